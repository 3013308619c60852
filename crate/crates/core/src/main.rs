use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lsgg::datastream::{make_stage_datasets, save_embeddings, EmbHeader, RelationInstance};
use lsgg::harness::{
    build_report, predict_records, prepare, read_bundle, run_experiment_with_model, write_bundle,
    DataSource, ExperimentConfig, ReportFormat, ResultsBundle, SUITE,
};
use lsgg::metrics::{
    m_at_k, parse_ground_truth, parse_predictions, per_class_recall_at_k, recall_at_k, score_wtd,
    weighted_map, write_ground_truth, write_predictions, MatchMode,
};
use lsgg::numerics::SeededRng;
use lsgg::trainer::checkpoint::{load_checkpoint, save_checkpoint};

#[derive(Parser)]
#[command(
    name = "lsgg",
    version,
    about = "Lifelong predicate prediction experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ablation preset applied after the config file.
    #[arg(long)]
    preset: Option<String>,
    /// Extra key=value overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed; overrides `seeds` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            cfg.apply(&text)
                .with_context(|| format!("in {}", p.display()))?;
        }
        if let Some(p) = &self.preset {
            cfg = cfg.with_preset(p)?;
        }
        for kv in &self.set {
            cfg.apply(kv)?;
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg
        .out
        .clone()
        .context("an output directory is required (--out or out=)")?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with its vocabulary and ground truth.
    Synth(Common),
    /// Split the configured dataset into stages and per-stage files.
    Split(Common),
    /// Run the staged protocol for one seed and save results and the model.
    Train(Common),
    /// Score a checkpoint on a dataset, or score a prediction dump.
    Eval(EvalArgs),
    /// Run the ablation suite over the configured seeds.
    Ablate(AblateArgs),
    /// Summarize result directories into tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long, conflicts_with = "pred")]
    checkpoint: Option<PathBuf>,
    /// Embeddings file to predict on (with --checkpoint).
    #[arg(long, requires = "checkpoint")]
    data: Option<PathBuf>,
    /// Prediction dump to score.
    #[arg(long, requires = "gt")]
    pred: Option<PathBuf>,
    /// Ground-truth file.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Comma-separated recall cut-offs.
    #[arg(long, value_delimiter = ',', default_values_t = [50, 100])]
    ks: Vec<usize>,
    /// Seed for retrieval tie shuffles in ablation variants.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Writes predictions.txt, gt.txt and eval.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated presets; defaults to the full suite.
    #[arg(long, value_delimiter = ',')]
    presets: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Text,
}

#[derive(Args)]
struct ReportArgs {
    /// Result directories; searched recursively for run manifests.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Writes table files here instead of printing.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(c) => synth(&c),
        Command::Split(c) => split(&c),
        Command::Train(c) => train(&c),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Report(a) => report(&a),
    }
}

fn header_for(
    cfg: &ExperimentConfig,
    data: &[RelationInstance],
    n_pred: usize,
) -> Result<EmbHeader> {
    let first = data.first().context("dataset is empty")?;
    let n_obj = match &cfg.data {
        DataSource::Synth(s) => s.n_obj,
        DataSource::Files { .. } => data
            .iter()
            .map(|i| i.subject_class.max(i.object_class) as usize + 1)
            .max()
            .unwrap_or(0),
    };
    Ok(EmbHeader {
        d_c: first.f_c.len(),
        d_r: first.f_r.len(),
        d_o: first.f_s.len(),
        n_obj,
        n_pred,
    })
}

fn ground_truth_text(data: &[RelationInstance]) -> String {
    let mut next = std::collections::BTreeMap::new();
    let triplets = data.iter().map(|i| {
        let id = next.entry(i.image_id).or_insert(0u64);
        *id += 1;
        lsgg::metrics::GtTriplet {
            image_id: i.image_id,
            gt_id: *id - 1,
            subject: i.subject_class,
            predicate: i.predicate,
            object: i.object_class,
            boxes: i.boxes,
        }
    });
    write_ground_truth(&lsgg::metrics::GroundTruth::new(
        triplets.collect::<Vec<_>>(),
    ))
}

fn synth(c: &Common) -> Result<()> {
    let cfg = c.load()?;
    if !matches!(cfg.data, DataSource::Synth(_)) {
        bail!("synth needs a synthetic data source");
    }
    let dir = out_dir(&cfg)?;
    let p = prepare(&cfg, cfg.seeds[0])?;
    let header = header_for(&cfg, &p.dataset, p.vocab.labels().count())?;
    save_embeddings(&p.dataset, &header, dir.join("data.emb"))?;
    fs::write(dir.join("vocab.txt"), p.vocab.to_text())?;
    fs::write(dir.join("gt.txt"), ground_truth_text(&p.dataset))?;
    println!("wrote {} instances to {}", p.dataset.len(), dir.display());
    Ok(())
}

fn split(c: &Common) -> Result<()> {
    let cfg = c.load()?;
    let dir = out_dir(&cfg)?;
    let p = prepare(&cfg, cfg.seeds[0])?;
    fs::write(dir.join("schedule.txt"), p.schedule.to_text())?;
    let header = header_for(&cfg, &p.dataset, p.vocab.labels().count())?;
    for s in make_stage_datasets(&p.dataset, &p.schedule, cfg.fractions)? {
        for (part, data) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
            save_embeddings(
                data,
                &header,
                dir.join(format!("stage{}_{part}.emb", s.stage)),
            )?;
        }
        println!(
            "stage {}: {} labels, {} train / {} val / {} test",
            s.stage,
            s.labels.len(),
            s.train.len(),
            s.val.len(),
            s.test.len()
        );
    }
    Ok(())
}

fn print_final(b: &ResultsBundle) {
    let r = b.final_report();
    for (i, k) in r.ks.iter().enumerate() {
        let fm = b
            .forgetting_at(*k)
            .map_or("-".to_string(), |f| format!("{f:.2}"));
        println!(
            "{} seed {}: R@{k} {:.2}  mR@{k} {:.2}  M@{k} {:.2}  FM@{k} {fm}",
            b.config.name, b.seed, r.recall[i], r.mean_recall[i], r.m[i]
        );
    }
}

fn train(c: &Common) -> Result<()> {
    let cfg = c.load()?;
    let dir = out_dir(&cfg)?;
    let seed = cfg.seeds[0];
    let (bundle, model) = run_experiment_with_model(&cfg, seed)?;
    write_bundle(&bundle, &dir)?;
    let echo = ExperimentConfig {
        seeds: vec![seed],
        ..cfg.clone()
    }
    .to_text();
    save_checkpoint(&dir, &model, &echo)?;
    print_final(&bundle);
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (records, gt) = if let Some(ck) = &a.checkpoint {
        let data_path = a
            .data
            .as_ref()
            .context("--data is required with --checkpoint")?;
        let ck = load_checkpoint(ck)?;
        let cfg = ExperimentConfig::parse(&ck.config_echo).context("checkpoint config echo")?;
        let (_, data) = lsgg::datastream::load_embeddings(data_path)?;
        let candidates: Vec<_> = ck.model.vocab.labels().collect();
        let mut rng = SeededRng::new(a.seed);
        let (records, gt) = predict_records(
            &ck.model,
            &data,
            &candidates,
            cfg.train.k,
            cfg.ablation.variant(),
            &mut rng,
        )?;
        if let Some(o) = &a.out {
            fs::create_dir_all(o)?;
            fs::write(o.join("predictions.txt"), write_predictions(&records))?;
            fs::write(o.join("gt.txt"), write_ground_truth(&gt))?;
        }
        (records, gt)
    } else {
        let (Some(p), Some(g)) = (&a.pred, &a.gt) else {
            bail!("give --checkpoint with --data, or --pred with --gt");
        };
        let records =
            parse_predictions(&fs::read_to_string(p)?).with_context(|| p.display().to_string())?;
        let gt =
            parse_ground_truth(&fs::read_to_string(g)?).with_context(|| g.display().to_string())?;
        (records, gt)
    };
    let with_boxes = gt.triplets().all(|t| t.boxes.is_some()) && !gt.is_empty();
    let mode = MatchMode::InstanceId;
    let mode = if records
        .iter()
        .flat_map(|r| r.predictions())
        .any(|p| p.gt_id.is_none())
        && with_boxes
    {
        MatchMode::Rel
    } else {
        mode
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["k", "recall", "mean_recall", "m"])?;
    let mut r50 = None;
    for &k in &a.ks {
        let r = recall_at_k(&records, &gt, k, mode)?;
        let mr = per_class_recall_at_k(&records, &gt, k, mode)?.mean;
        if k == 50 {
            r50 = Some(r);
        }
        w.write_record([
            k.to_string(),
            r.to_string(),
            mr.to_string(),
            m_at_k(r, mr).to_string(),
        ])?;
    }
    let mut text = String::from_utf8(w.into_inner()?)?;
    if with_boxes {
        let rel = weighted_map(&records, &gt, MatchMode::Rel)?;
        let phr = weighted_map(&records, &gt, MatchMode::Phr)?;
        text.push_str(&format!("# wmap_rel={rel} wmap_phr={phr}"));
        if let Some(r) = r50 {
            text.push_str(&format!(" score_wtd={}", score_wtd(r, rel, phr)));
        }
        text.push('\n');
    }
    match &a.out {
        Some(o) => {
            fs::create_dir_all(o)?;
            fs::write(o.join("eval.csv"), &text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn slug(name: &str) -> String {
    name.replace('/', "-")
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let base = a.common.load()?;
    if a.common.preset.is_some() {
        bail!("ablate runs presets itself; use --presets to choose them");
    }
    let dir = out_dir(&base)?;
    let presets: Vec<&str> = if a.presets.is_empty() {
        SUITE.to_vec()
    } else {
        a.presets.iter().map(String::as_str).collect()
    };
    let mut failure = None;
    let bundles = lsgg::harness::run_ablation_suite(&base, &presets, |b| {
        let d = dir
            .join(slug(&b.config.name))
            .join(format!("seed{}", b.seed));
        if let Err(e) = write_bundle(b, &d) {
            failure.get_or_insert(e);
        }
        print_final(b);
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    let report = build_report(&bundles)?;
    for (name, body) in report.render(ReportFormat::Csv)? {
        fs::write(dir.join(name), body)?;
    }
    print!("{}", report.final_metrics.to_text());
    Ok(())
}

fn find_runs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.join("manifest.txt").is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for e in entries.into_iter().filter(|e| e.is_dir()) {
        find_runs(&e, out)?;
    }
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    let mut runs = Vec::new();
    for d in &a.dirs {
        find_runs(d, &mut runs)?;
    }
    if runs.is_empty() {
        bail!("no run manifests found");
    }
    let bundles = runs
        .iter()
        .map(|d| read_bundle(d).with_context(|| d.display().to_string()))
        .collect::<Result<Vec<_>>>()?;
    let format = match a.format {
        Format::Csv => ReportFormat::Csv,
        Format::Text => ReportFormat::Text,
    };
    let files = build_report(&bundles)?.render(format)?;
    match &a.out {
        Some(o) => {
            fs::create_dir_all(o)?;
            for (name, body) in files {
                fs::write(o.join(name), body)?;
            }
        }
        None => {
            for (name, body) in files {
                println!("== {name}");
                print!("{body}");
            }
        }
    }
    Ok(())
}
