//! Experiment orchestration: the staged protocol, ablation presets, result
//! files and reports.

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::datastream::{
    load_embeddings, make_stage_datasets, predicate_counts, split_by_frequency, split_random,
    synth_generate, DataError, Label, RelationInstance, StageDataset, TaskSchedule,
};
use crate::metrics::{
    forgetting_measure, m_at_k, per_class_recall_at_k, recall_at_k, score_wtd, weighted_map,
    AccuracyMatrix, GroundTruth, GtTriplet, MatchMode, MetricError, MetricReport, PredictionRecord,
    TripletPrediction,
};
use crate::numerics::SeededRng;
use crate::scorer::PredicateVocab;
use crate::trainer::{
    predict, train_stage, AdamW, Model, ModelGeometry, StageSummary, TrainError, Variant,
};

pub use config::{
    Ablation, DataSource, ExperimentConfig, ScheduleMode, TokenPreset, PRESETS, SUITE,
};
pub use report::{build_report, Report, ReportFormat, Table};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("protocol invariant violated: {0}")]
    Invariant(String),
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Scorer(#[from] crate::scorer::ScorerError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const RESULTS_FORMAT: u32 = 1;

/// Dataset and vocabulary for one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Vec<RelationInstance>,
    pub vocab: PredicateVocab,
    pub schedule: TaskSchedule,
}

/// Loads or generates the data and splits the label space.
pub fn prepare(config: &ExperimentConfig, seed: u64) -> Result<Prepared, HarnessError> {
    let root = SeededRng::new(seed);
    let (dataset, vocab) = match &config.data {
        DataSource::Synth(s) => {
            let out = synth_generate(s, &mut root.fork(10))?;
            let vocab = PredicateVocab::from_phrases(
                out.phrases
                    .into_iter()
                    .enumerate()
                    .map(|(i, p)| (i as Label, p)),
            )?;
            (out.dataset, vocab)
        }
        DataSource::Files { embeddings, vocab } => {
            let (_, data) = load_embeddings(embeddings)?;
            let vocab = PredicateVocab::parse(&fs::read_to_string(vocab)?)?;
            (data, vocab)
        }
    };
    let labels: Vec<Label> = vocab.labels().collect();
    let present = predicate_counts(&dataset);
    if let Some(l) = present.keys().find(|l| vocab.tokens(**l).is_err()) {
        return Err(HarnessError::Config(format!(
            "predicate {l} has no vocabulary entry"
        )));
    }
    // Labels without data cannot be scheduled meaningfully.
    let labels: Vec<Label> = labels
        .into_iter()
        .filter(|l| present.contains_key(l))
        .collect();
    let schedule = match config.schedule {
        ScheduleMode::Random => split_random(&labels, config.stages, &mut root.fork(11))?,
        ScheduleMode::Frequency => split_by_frequency(&labels, &present, config.stages)?,
    };
    Ok(Prepared {
        dataset,
        vocab,
        schedule,
    })
}

/// Hands out each stage's training split exactly once, in order.
pub struct StageStream {
    train: Vec<Option<Vec<RelationInstance>>>,
    log: Vec<usize>,
}

impl StageStream {
    pub fn new(stages: &mut [StageDataset]) -> Self {
        Self {
            train: stages
                .iter_mut()
                .map(|s| Some(std::mem::take(&mut s.train)))
                .collect(),
            log: Vec::new(),
        }
    }

    pub fn open(&mut self, stage: usize) -> Result<Vec<RelationInstance>, HarnessError> {
        if self.log.last().is_some_and(|&l| stage <= l) {
            return Err(HarnessError::Invariant(format!(
                "stage {stage} opened after stage {}",
                self.log.last().unwrap()
            )));
        }
        let data = self
            .train
            .get_mut(stage)
            .and_then(Option::take)
            .ok_or_else(|| {
                HarnessError::Invariant(format!("training split of stage {stage} reopened"))
            })?;
        // Earlier splits are dropped for good.
        for s in &mut self.train[..stage] {
            *s = None;
        }
        self.log.push(stage);
        Ok(data)
    }

    pub fn access_log(&self) -> &[usize] {
        &self.log
    }
}

/// Results of one `(config, seed)` run.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsBundle {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub schedule: Vec<Vec<Label>>,
    pub reports: Vec<MetricReport>,
    /// mR@K accuracy matrix per evaluated K.
    pub accuracy: Vec<(usize, AccuracyMatrix)>,
    /// Forgetting per K; empty for a single stage.
    pub forgetting: Vec<(usize, f64)>,
    pub summaries: Vec<StageSummary>,
    pub checks: Vec<String>,
    /// Wall-clock seconds per stage; not part of the deterministic files.
    pub stage_seconds: Vec<f64>,
}

impl ResultsBundle {
    pub fn final_report(&self) -> &MetricReport {
        self.reports.last().expect("at least one stage")
    }

    pub fn final_mean_recall(&self, k: usize) -> Option<f64> {
        let r = self.final_report();
        r.ks.iter().position(|&x| x == k).map(|i| r.mean_recall[i])
    }

    pub fn forgetting_at(&self, k: usize) -> Option<f64> {
        self.forgetting.iter().find(|(x, _)| *x == k).map(|p| p.1)
    }
}

fn geometry(
    config: &ExperimentConfig,
    data: &[RelationInstance],
) -> Result<ModelGeometry, HarnessError> {
    let first = data
        .first()
        .ok_or_else(|| HarnessError::Config("dataset is empty".into()))?;
    Ok(ModelGeometry {
        d_tok: config.d_tok,
        depth: config.depth,
        counts: config.token_counts(),
        dims: [
            first.f_c.len(),
            first.f_r.len(),
            first.f_s.len(),
            first.f_o.len(),
        ],
        n_t: config.n_t,
        n_p: config.n_p,
        n_e: config.n_e,
        max_k: config.train.k,
    })
}

/// Predictions for `test`, grouped per image, with ground truth.
#[derive(Debug, Clone)]
struct Evaluated {
    records: Vec<PredictionRecord>,
    gt: GroundTruth,
}

fn predict_all(
    model: &Model,
    test: &[&RelationInstance],
    candidates: &[Label],
    k: usize,
    variant: Variant,
    rng: &mut SeededRng,
) -> Result<Vec<(Label, f64)>, HarnessError> {
    test.iter()
        .map(|inst| Ok(predict(model, inst, candidates, k, variant, rng)?))
        .collect()
}

/// Builds records from per-instance predictions; `gt_id` is the instance's
/// position among the given instances of its image.
fn evaluated(
    test: &[&RelationInstance],
    preds: &[(Label, f64)],
) -> Result<Evaluated, HarnessError> {
    let mut by_image: BTreeMap<u64, Vec<(TripletPrediction, GtTriplet)>> = BTreeMap::new();
    for (inst, &(label, score)) in test.iter().zip(preds) {
        let list = by_image.entry(inst.image_id).or_default();
        let id = list.len() as u64;
        list.push((
            TripletPrediction {
                rank: 0,
                subject: inst.subject_class,
                predicate: label,
                object: inst.object_class,
                confidence: score.exp(),
                boxes: inst.boxes,
                gt_id: Some(id),
            },
            GtTriplet {
                image_id: inst.image_id,
                gt_id: id,
                subject: inst.subject_class,
                predicate: inst.predicate,
                object: inst.object_class,
                boxes: inst.boxes,
            },
        ));
    }
    let mut records = Vec::with_capacity(by_image.len());
    let mut gts = Vec::new();
    for (image, list) in by_image {
        let mut preds: Vec<TripletPrediction> = list.iter().map(|p| p.0.clone()).collect();
        preds.sort_by(|a, b| {
            b.confidence
                .partial_cmp(&a.confidence)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.gt_id.cmp(&b.gt_id))
        });
        for (r, p) in preds.iter_mut().enumerate() {
            p.rank = r;
        }
        records.push(PredictionRecord::new(image, preds)?);
        gts.extend(list.into_iter().map(|p| p.1));
    }
    Ok(Evaluated {
        records,
        gt: GroundTruth::new(gts),
    })
}

/// Runs the staged protocol for one seed.
pub fn run_experiment(config: &ExperimentConfig, seed: u64) -> Result<ResultsBundle, HarnessError> {
    Ok(run_experiment_with_model(config, seed)?.0)
}

/// Predicts every instance and returns per-image records with matching
/// ground truth.
pub fn predict_records(
    model: &Model,
    data: &[RelationInstance],
    candidates: &[Label],
    k: usize,
    variant: Variant,
    rng: &mut SeededRng,
) -> Result<(Vec<PredictionRecord>, GroundTruth), HarnessError> {
    let refs: Vec<&RelationInstance> = data.iter().collect();
    let preds = predict_all(model, &refs, candidates, k, variant, rng)?;
    let ev = evaluated(&refs, &preds)?;
    Ok((ev.records, ev.gt))
}

/// As [`run_experiment`], also returning the model after the last stage.
pub fn run_experiment_with_model(
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(ResultsBundle, Model), HarnessError> {
    config.validate()?;
    let prepared = prepare(config, seed)?;
    let schedule = prepared.schedule.clone();
    let mut checks = Vec::new();
    check_schedule(&schedule)?;
    checks.push("schedule_disjoint".to_string());

    let mut stages = make_stage_datasets(&prepared.dataset, &schedule, config.fractions)?;
    let tests: Vec<Vec<RelationInstance>> = stages
        .iter_mut()
        .map(|s| std::mem::take(&mut s.test))
        .collect();
    let mut vals: Vec<Vec<RelationInstance>> = stages
        .iter_mut()
        .map(|s| std::mem::take(&mut s.val))
        .collect();
    let labels: Vec<Vec<Label>> = stages.iter().map(|s| s.labels.clone()).collect();
    let mut stream = StageStream::new(&mut stages);
    drop(stages);

    let root = SeededRng::new(seed);
    let mut model = Model::init(
        &geometry(config, &prepared.dataset)?,
        prepared.vocab.clone(),
        &root.fork(12),
    )?;
    let mut opt = AdamW::new();
    let mut train_rng = root.fork(13);
    let variant = config.ablation.variant();
    let t_total = schedule.num_stages();
    let ks = config.eval_ks.clone();
    let mut accuracy: Vec<(usize, AccuracyMatrix)> = ks
        .iter()
        .map(|&k| (k, AccuracyMatrix::new(t_total)))
        .collect();
    let mut reports = Vec::with_capacity(t_total);
    let mut summaries = Vec::with_capacity(t_total);
    let mut seconds = Vec::with_capacity(t_total);
    let with_boxes = prepared.dataset.iter().all(|i| i.boxes.is_some());

    for t in 0..t_total {
        let started = Instant::now();
        let stage_err = |e: HarnessError| HarnessError::Stage {
            stage: t,
            source: Box::new(e),
        };
        let stage_data = StageDataset {
            stage: t,
            labels: labels[t].clone(),
            train: stream.open(t).map_err(stage_err)?,
            val: std::mem::take(&mut vals[t]),
            test: Vec::new(),
        };
        let summary = train_stage(
            &mut model,
            &mut opt,
            &stage_data,
            &config.train,
            variant,
            config.quota(),
            &mut train_rng,
        )
        .map_err(|e| stage_err(e.into()))?;
        drop(stage_data);
        check_pool(&model, t).map_err(stage_err)?;

        let seen = schedule.seen_labels(t);
        let mut eval_rng = root.fork(100 + t as u64);
        let all_test: Vec<&RelationInstance> = tests[..=t].iter().flatten().collect();
        let preds = predict_all(
            &model,
            &all_test,
            &seen,
            config.train.k,
            variant,
            &mut eval_rng,
        )
        .map_err(stage_err)?;
        let report =
            stage_report(t, &ks, &tests[..=t], &all_test, &preds, with_boxes).map_err(stage_err)?;
        report
            .check_m_exact()
            .map_err(|e| stage_err(HarnessError::Invariant(e.to_string())))?;
        for (i, (_, m)) in accuracy.iter_mut().enumerate() {
            for (j, task) in report.per_task.iter().enumerate() {
                m.set(t, j, task[i]).map_err(|e| stage_err(e.into()))?;
            }
        }
        reports.push(report);
        summaries.push(summary);
        seconds.push(started.elapsed().as_secs_f64());
    }
    if stream.access_log() != (0..t_total).collect::<Vec<_>>() {
        return Err(HarnessError::Invariant(
            "stage access log is out of order".into(),
        ));
    }
    checks.push("stage_isolation".into());
    checks.push("pool_capacity".into());
    checks.push("m_at_k_exact".into());
    let forgetting = if t_total >= 2 {
        accuracy
            .iter()
            .map(|(k, m)| Ok((*k, forgetting_measure(m)?)))
            .collect::<Result<Vec<_>, MetricError>>()?
    } else {
        Vec::new()
    };
    let bundle = ResultsBundle {
        config: config.clone(),
        seed,
        schedule: schedule.stages().to_vec(),
        reports,
        accuracy,
        forgetting,
        summaries,
        checks,
        stage_seconds: seconds,
    };
    Ok((bundle, model))
}

fn check_schedule(s: &TaskSchedule) -> Result<(), HarnessError> {
    let mut seen = std::collections::BTreeSet::new();
    for stage in s.stages() {
        if stage.is_empty() {
            return Err(HarnessError::Invariant("empty stage in schedule".into()));
        }
        for l in stage {
            if !seen.insert(*l) {
                return Err(HarnessError::Invariant(format!(
                    "predicate {l} scheduled twice"
                )));
            }
        }
    }
    Ok(())
}

fn check_pool(model: &Model, stage: usize) -> Result<(), HarnessError> {
    model
        .pool
        .check_capacity()
        .map_err(|e| HarnessError::Invariant(e.to_string()))?;
    if model.pool.stored() > model.pool.capacity() {
        return Err(HarnessError::Invariant(
            "pool holds more than n_t·n_e exemplars".into(),
        ));
    }
    if let Some((_, e)) = model
        .pool
        .exemplars()
        .find(|(_, e)| e.stage as usize > stage)
    {
        return Err(HarnessError::Invariant(format!(
            "pool holds an exemplar of stage {} after stage {stage}",
            e.stage
        )));
    }
    Ok(())
}

fn stage_report(
    stage: usize,
    ks: &[usize],
    tasks: &[Vec<RelationInstance>],
    all: &[&RelationInstance],
    preds: &[(Label, f64)],
    with_boxes: bool,
) -> Result<MetricReport, HarnessError> {
    let ev = evaluated(all, preds)?;
    let mut recall = Vec::with_capacity(ks.len());
    let mut mean_recall = Vec::with_capacity(ks.len());
    for &k in ks {
        recall.push(recall_at_k(&ev.records, &ev.gt, k, MatchMode::InstanceId)?);
        mean_recall
            .push(per_class_recall_at_k(&ev.records, &ev.gt, k, MatchMode::InstanceId)?.mean);
    }
    let m = recall
        .iter()
        .zip(&mean_recall)
        .map(|(r, mr)| m_at_k(*r, *mr))
        .collect();
    let mut per_task = Vec::with_capacity(tasks.len());
    let mut offset = 0;
    for task in tasks {
        let refs: Vec<&RelationInstance> = task.iter().collect();
        let ev = evaluated(&refs, &preds[offset..offset + task.len()])?;
        offset += task.len();
        let row = ks
            .iter()
            .map(|&k| {
                Ok(per_class_recall_at_k(&ev.records, &ev.gt, k, MatchMode::InstanceId)?.mean)
            })
            .collect::<Result<Vec<_>, MetricError>>()?;
        per_task.push(row);
    }
    let (wmap_rel, wmap_phr, wtd) = if with_boxes {
        let rel = weighted_map(&ev.records, &ev.gt, MatchMode::Rel)?;
        let phr = weighted_map(&ev.records, &ev.gt, MatchMode::Phr)?;
        let r50 = ks.iter().position(|&k| k == 50).map(|i| recall[i]);
        (Some(rel), Some(phr), r50.map(|r| score_wtd(r, rel, phr)))
    } else {
        (None, None, None)
    };
    Ok(MetricReport {
        stage,
        ks: ks.to_vec(),
        recall,
        mean_recall,
        m,
        per_task,
        wmap_rel,
        wmap_phr,
        score_wtd: wtd,
    })
}

/// Runs every preset of the suite on top of `base` for each of its seeds.
pub fn run_ablation_suite(
    base: &ExperimentConfig,
    presets: &[&str],
    mut on_run: impl FnMut(&ResultsBundle),
) -> Result<Vec<ResultsBundle>, HarnessError> {
    let mut out = Vec::new();
    for preset in presets {
        let cfg = base.clone().with_preset(preset)?;
        for &seed in &cfg.seeds {
            let b = run_experiment(&cfg, seed)?;
            on_run(&b);
            out.push(b);
        }
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the deterministic result files plus `timing.csv`.
pub fn write_bundle(bundle: &ResultsBundle, dir: impl AsRef<Path>) -> Result<(), HarnessError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;

    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    w.write_record([
        "stage",
        "k",
        "recall",
        "mean_recall",
        "m",
        "wmap_rel",
        "wmap_phr",
        "score_wtd",
    ])?;
    for r in &bundle.reports {
        for (i, k) in r.ks.iter().enumerate() {
            w.write_record([
                r.stage.to_string(),
                k.to_string(),
                r.recall[i].to_string(),
                r.mean_recall[i].to_string(),
                r.m[i].to_string(),
                opt(r.wmap_rel),
                opt(r.wmap_phr),
                opt(r.score_wtd),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("accuracy_matrix.csv"))?;
    w.write_record(["k", "stage", "task", "mean_recall"])?;
    for (k, m) in &bundle.accuracy {
        for l in 0..m.stages() {
            for (j, v) in m.row(l).iter().enumerate() {
                let v = v.ok_or_else(|| {
                    HarnessError::Invariant("accuracy matrix has an empty cell".into())
                })?;
                w.write_record([k.to_string(), l.to_string(), j.to_string(), v.to_string()])?;
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("forgetting.csv"))?;
    w.write_record(["k", "fm"])?;
    for (k, fm) in &bundle.forgetting {
        w.write_record([k.to_string(), fm.to_string()])?;
    }
    w.flush()?;

    fs::write(dir.join("manifest.txt"), manifest(bundle))?;

    let mut w = csv::Writer::from_path(dir.join("timing.csv"))?;
    w.write_record(["stage", "seconds"])?;
    for (t, s) in bundle.stage_seconds.iter().enumerate() {
        w.write_record([t.to_string(), format!("{s:.3}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Files whose bytes depend only on config and seed.
pub const DETERMINISTIC_FILES: [&str; 4] = [
    "metrics.csv",
    "accuracy_matrix.csv",
    "forgetting.csv",
    "manifest.txt",
];

fn manifest(b: &ResultsBundle) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# lsgg run manifest");
    let _ = writeln!(s, "format={RESULTS_FORMAT}");
    let _ = writeln!(s, "lsgg_version={}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "seed={}", b.seed);
    for (t, stage) in b.schedule.iter().enumerate() {
        let labels: Vec<String> = stage.iter().map(ToString::to_string).collect();
        let _ = writeln!(s, "schedule.{t}={}", labels.join(","));
    }
    for sum in &b.summaries {
        let _ = writeln!(
            s,
            "stage.{}=steps:{} first_loss:{} last_loss:{} admission_attempts:{} admitted:{}",
            sum.stage,
            sum.steps,
            sum.first_epoch_loss,
            sum.last_epoch_loss,
            sum.admission_attempts,
            sum.admitted
        );
    }
    for c in &b.checks {
        let _ = writeln!(s, "check.{c}=ok");
    }
    let _ = writeln!(s, "[config]");
    // The output directory is not part of the run's identity.
    s.push_str(
        &ExperimentConfig {
            out: None,
            ..b.config.clone()
        }
        .to_text(),
    );
    s
}

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| Ok(rec?.iter().map(str::to_string).collect()))
        .collect()
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T, HarnessError> {
    s.parse()
        .map_err(|_| HarnessError::Report(format!("bad number {s:?} in results")))
}

fn opt_num(s: &str) -> Result<Option<f64>, HarnessError> {
    if s.is_empty() {
        Ok(None)
    } else {
        num(s).map(Some)
    }
}

/// Reads a results directory written by [`write_bundle`]. Stage summaries
/// and timings are not restored.
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<ResultsBundle, HarnessError> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    let (head, cfg_text) = text
        .split_once("[config]\n")
        .ok_or_else(|| HarnessError::Report("manifest has no [config] section".into()))?;
    let config = ExperimentConfig::parse(cfg_text)?;
    let mut seed = None;
    let mut schedule = Vec::new();
    let mut checks = Vec::new();
    for line in head.lines().filter(|l| !l.starts_with('#')) {
        let Some((k, v)) = line.split_once('=') else {
            continue;
        };
        if k == "seed" {
            seed = Some(num(v)?);
        } else if k.starts_with("schedule.") {
            schedule.push(v.split(',').map(num).collect::<Result<Vec<Label>, _>>()?);
        } else if let Some(c) = k.strip_prefix("check.") {
            checks.push(c.to_string());
        }
    }
    let seed = seed.ok_or_else(|| HarnessError::Report("manifest has no seed".into()))?;

    let mut reports: Vec<MetricReport> = Vec::new();
    for row in read_csv(&dir.join("metrics.csv"))? {
        let stage: usize = num(&row[0])?;
        if reports.last().is_none_or(|r| r.stage != stage) {
            reports.push(MetricReport {
                stage,
                ks: vec![],
                recall: vec![],
                mean_recall: vec![],
                m: vec![],
                per_task: vec![],
                wmap_rel: opt_num(&row[5])?,
                wmap_phr: opt_num(&row[6])?,
                score_wtd: opt_num(&row[7])?,
            });
        }
        let r = reports.last_mut().expect("pushed above");
        r.ks.push(num(&row[1])?);
        r.recall.push(num(&row[2])?);
        r.mean_recall.push(num(&row[3])?);
        r.m.push(num(&row[4])?);
    }
    let t_total = reports.len();
    let mut accuracy: Vec<(usize, AccuracyMatrix)> = Vec::new();
    for row in read_csv(&dir.join("accuracy_matrix.csv"))? {
        let k: usize = num(&row[0])?;
        let (l, j, v): (usize, usize, f64) = (num(&row[1])?, num(&row[2])?, num(&row[3])?);
        if accuracy.last().is_none_or(|a| a.0 != k) {
            accuracy.push((k, AccuracyMatrix::new(t_total)));
        }
        accuracy.last_mut().expect("pushed above").1.set(l, j, v)?;
        let ki = reports
            .get(l)
            .and_then(|r| r.ks.iter().position(|&x| x == k))
            .ok_or_else(|| HarnessError::Report("accuracy matrix does not match metrics".into()))?;
        let report = &mut reports[l];
        if report.per_task.len() <= j {
            report
                .per_task
                .resize(j + 1, vec![f64::NAN; report.ks.len()]);
        }
        report.per_task[j][ki] = v;
    }
    let forgetting = read_csv(&dir.join("forgetting.csv"))?
        .iter()
        .map(|row| Ok((num(&row[0])?, num(&row[1])?)))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(ResultsBundle {
        config,
        seed,
        schedule,
        reports,
        accuracy,
        forgetting,
        summaries: Vec::new(),
        checks,
        stage_seconds: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastream::SynthConfig;

    pub(crate) fn tiny(stages: usize) -> ExperimentConfig {
        let mut c = ExperimentConfig {
            data: DataSource::Synth(SynthConfig {
                n_pred: 6,
                n_groups: 2,
                n_obj: 5,
                d_c: 6,
                d_r: 6,
                d_o: 4,
                total_n: 240,
                ..SynthConfig::default()
            }),
            stages,
            n_t: 6,
            n_p: 2,
            n_e: 4,
            d_tok: 6,
            seeds: vec![1],
            ..ExperimentConfig::default()
        };
        c.train.epochs = 2;
        c.train.batch_size = 16;
        c.train.k = 2;
        c
    }

    #[test]
    fn stage_stream_hands_out_each_split_once() {
        let mk = |stage| StageDataset {
            stage,
            labels: vec![stage as Label],
            train: vec![],
            val: vec![],
            test: vec![],
        };
        let mut stages = vec![mk(0), mk(1), mk(2)];
        let mut s = StageStream::new(&mut stages);
        s.open(0).unwrap();
        assert!(s.open(0).is_err());
        s.open(2).unwrap();
        assert!(s.open(1).is_err());
        assert_eq!(s.access_log(), &[0, 2]);
    }

    #[test]
    fn single_stage_has_no_forgetting() {
        let b = run_experiment(&tiny(1), 3).unwrap();
        assert_eq!(b.reports.len(), 1);
        assert!(b.forgetting.is_empty());
        assert_eq!(b.accuracy[0].1.stages(), 1);
    }

    #[test]
    fn run_fills_lower_triangle_and_round_trips() {
        let cfg = tiny(3);
        let b = run_experiment(&cfg, 5).unwrap();
        assert_eq!(b.reports.len(), 3);
        for (_, m) in &b.accuracy {
            assert!(m.is_complete());
        }
        for r in &b.reports {
            r.check_m_exact().unwrap();
            assert_eq!(r.per_task.len(), r.stage + 1);
            assert!(r.score_wtd.is_some());
        }
        assert_eq!(b.forgetting.len(), 2);
        assert_eq!(b.checks.len(), 4);
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&b, dir.path()).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        assert_eq!(back.reports, b.reports);
        assert_eq!(back.accuracy, b.accuracy);
        assert_eq!(back.forgetting, b.forgetting);
        assert_eq!(back.config, b.config);
        assert_eq!(back.schedule, b.schedule);
    }

    #[test]
    fn results_files_are_deterministic() {
        let cfg = tiny(2);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_bundle(&run_experiment(&cfg, 8).unwrap(), a.path()).unwrap();
        write_bundle(&run_experiment(&cfg, 8).unwrap(), b.path()).unwrap();
        for f in DETERMINISTIC_FILES {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn every_variant_runs() {
        for preset in PRESETS {
            let cfg = tiny(2).with_preset(preset).unwrap();
            let cfg = if preset == "w-1k" {
                ExperimentConfig { n_e: 2, ..cfg }
            } else {
                cfg
            };
            run_experiment(&cfg, 2).unwrap_or_else(|e| panic!("{preset}: {e}"));
        }
    }
}
