//! Flat `key=value` experiment configuration and ablation presets.

use std::fmt::Write as _;
use std::path::PathBuf;

use super::HarnessError;
use crate::datastream::{SplitFractions, SynthConfig};
use crate::token_mapper::TokenCounts;
use crate::trainer::{TrainConfig, Variant};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth(SynthConfig),
    Files { embeddings: PathBuf, vocab: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    Random,
    Frequency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenPreset {
    Small,
    Default,
    Large,
}

impl TokenPreset {
    pub fn counts(self) -> TokenCounts {
        match self {
            TokenPreset::Small => TokenCounts::small(),
            TokenPreset::Default => TokenCounts::default(),
            TokenPreset::Large => TokenCounts::large(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            TokenPreset::Small => "small",
            TokenPreset::Default => "default",
            TokenPreset::Large => "large",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_kap: bool,
    pub no_toe: bool,
    pub no_aso: bool,
    pub no_inc: bool,
    pub fine_tune: bool,
}

impl Ablation {
    pub fn variant(self) -> Variant {
        Variant {
            random_prompts: self.no_kap,
            random_exemplar: self.no_toe,
            shuffled_order: self.no_aso,
            no_in_context: self.no_inc,
            fine_tune: self.fine_tune,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataSource,
    pub schedule: ScheduleMode,
    pub stages: usize,
    pub fractions: SplitFractions,
    pub n_t: usize,
    pub n_p: usize,
    pub n_e: usize,
    pub d_tok: usize,
    pub depth: usize,
    pub tokens: TokenPreset,
    pub train: TrainConfig,
    pub ablation: Ablation,
    /// Admission attempts per stage; `None` means `n_t·n_e / stages`.
    pub quota: Option<usize>,
    pub eval_ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "full".into(),
            data: DataSource::Synth(SynthConfig::default()),
            schedule: ScheduleMode::Random,
            stages: 5,
            fractions: SplitFractions::default(),
            n_t: 100,
            n_p: 8,
            n_e: 20,
            d_tok: 64,
            depth: 1,
            tokens: TokenPreset::Default,
            train: TrainConfig::default(),
            ablation: Ablation::default(),
            quota: None,
            eval_ks: vec![50, 100],
            seeds: vec![0, 1, 2, 3, 4],
            out: None,
        }
    }
}

/// Ablation suite, in table order.
pub const SUITE: [&str; 9] = [
    "full", "w/o-kap", "w/o-toe", "w/o-aso", "w/o-inc", "w-1k", "w-sc", "w-lc", "w-frq",
];

/// Every preset accepted by [`ExperimentConfig::with_preset`].
pub const PRESETS: [&str; 10] = [
    "full", "w/o-kap", "w/o-toe", "w/o-aso", "w/o-inc", "w-1k", "w-ft", "w-sc", "w-lc", "w-frq",
];

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| format!("{v:?}: {e}"))
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|t| parse_num(t.trim())).collect()
}

fn synth(c: &mut ExperimentConfig) -> Result<&mut SynthConfig, String> {
    if let DataSource::Files { .. } = c.data {
        c.data = DataSource::Synth(SynthConfig::default());
    }
    match &mut c.data {
        DataSource::Synth(s) => Ok(s),
        DataSource::Files { .. } => unreachable!(),
    }
}

fn files(c: &mut ExperimentConfig) -> (&mut PathBuf, &mut PathBuf) {
    if let DataSource::Synth(_) = c.data {
        c.data = DataSource::Files {
            embeddings: PathBuf::new(),
            vocab: PathBuf::new(),
        };
    }
    match &mut c.data {
        DataSource::Files { embeddings, vocab } => (embeddings, vocab),
        DataSource::Synth(_) => unreachable!(),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    pub fn quota(&self) -> usize {
        self.quota
            .unwrap_or(self.n_t * self.n_e / self.stages.max(1))
    }

    pub fn token_counts(&self) -> TokenCounts {
        self.tokens.counts()
    }

    /// Applies one named preset to this configuration.
    pub fn with_preset(mut self, preset: &str) -> Result<Self, HarnessError> {
        match preset {
            "full" => {}
            "w/o-kap" => self.ablation.no_kap = true,
            "w/o-toe" => self.ablation.no_toe = true,
            "w/o-aso" => self.ablation.no_aso = true,
            "w/o-inc" => {
                self.ablation.no_inc = true;
                self.train.k = 1;
                self.train.rehearsal = 0.0;
            }
            "w-1k" => self.n_e = 1000 / self.n_t.max(1),
            "w-ft" => self.ablation.fine_tune = true,
            "w-sc" => self.tokens = TokenPreset::Small,
            "w-lc" => self.tokens = TokenPreset::Large,
            "w-frq" => self.schedule = ScheduleMode::Frequency,
            other => return Err(HarnessError::Config(format!("unknown preset {other:?}"))),
        }
        self.name = preset.to_string();
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.train
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.fractions
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if let DataSource::Synth(s) = &self.data {
            s.validate()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if self.stages == 0 {
            return bad("stages must be >= 1".into());
        }
        if self.n_t == 0 || self.n_p == 0 || self.n_e == 0 || self.d_tok == 0 {
            return bad("pool sizes and d_tok must be >= 1".into());
        }
        if self.train.k > self.n_t {
            return bad(format!("k = {} exceeds n_t = {}", self.train.k, self.n_t));
        }
        if self.ablation.no_inc && (self.train.k != 1 || self.train.rehearsal != 0.0) {
            return bad("no_inc requires k = 1 and rehearsal = 0".into());
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return bad("eval_ks must be a non-empty list of positive integers".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let r: Result<(), String> = (|| {
            let v = value.trim();
            match key {
                "name" => self.name = v.to_string(),
                "data" => match v {
                    "synth" => {
                        synth(self)?;
                    }
                    "file" => {
                        files(self);
                    }
                    _ => return Err(format!("data must be synth or file, got {v:?}")),
                },
                "data.embeddings" => *files(self).0 = PathBuf::from(v),
                "data.vocab" => *files(self).1 = PathBuf::from(v),
                "synth.n_pred" => synth(self)?.n_pred = parse_num(v)?,
                "synth.n_groups" => synth(self)?.n_groups = parse_num(v)?,
                "synth.n_obj" => synth(self)?.n_obj = parse_num(v)?,
                "synth.d_c" => synth(self)?.d_c = parse_num(v)?,
                "synth.d_r" => synth(self)?.d_r = parse_num(v)?,
                "synth.d_o" => synth(self)?.d_o = parse_num(v)?,
                "synth.sigma" => synth(self)?.sigma = parse_num(v)?,
                "synth.zipf_s" => synth(self)?.zipf_s = parse_num(v)?,
                "synth.total_n" => synth(self)?.total_n = parse_num(v)?,
                "synth.relations_per_image" => synth(self)?.relations_per_image = parse_num(v)?,
                "synth.entity_choices" => synth(self)?.entity_choices = parse_num(v)?,
                "synth.with_boxes" => synth(self)?.with_boxes = parse_bool(v)?,
                "schedule" => {
                    self.schedule = match v {
                        "random" => ScheduleMode::Random,
                        "frequency" => ScheduleMode::Frequency,
                        _ => {
                            return Err(format!("schedule must be random or frequency, got {v:?}"))
                        }
                    }
                }
                "stages" => self.stages = parse_num(v)?,
                "split.train" => self.fractions.train = parse_num(v)?,
                "split.val" => self.fractions.val = parse_num(v)?,
                "split.test" => self.fractions.test = parse_num(v)?,
                "n_t" => self.n_t = parse_num(v)?,
                "n_p" => self.n_p = parse_num(v)?,
                "n_e" => self.n_e = parse_num(v)?,
                "d_tok" => self.d_tok = parse_num(v)?,
                "depth" => self.depth = parse_num(v)?,
                "tokens" => {
                    self.tokens = match v {
                        "small" => TokenPreset::Small,
                        "default" => TokenPreset::Default,
                        "large" => TokenPreset::Large,
                        _ => {
                            return Err(format!(
                                "tokens must be small, default or large, got {v:?}"
                            ))
                        }
                    }
                }
                "alpha" => self.train.alpha = parse_num(v)?,
                "lambda" => self.train.lambda = parse_num(v)?,
                "lr" => self.train.lr = parse_num(v)?,
                "weight_decay" => self.train.weight_decay = parse_num(v)?,
                "beta1" => self.train.beta1 = parse_num(v)?,
                "beta2" => self.train.beta2 = parse_num(v)?,
                "eps" => self.train.eps = parse_num(v)?,
                "epochs" => self.train.epochs = parse_num(v)?,
                "batch_size" => self.train.batch_size = parse_num(v)?,
                "rehearsal" => self.train.rehearsal = parse_num(v)?,
                "k" => self.train.k = parse_num(v)?,
                "scorer_lr_scale" => self.train.scorer_lr_scale = parse_num(v)?,
                "aux_token_norm" => self.train.aux_token_norm = parse_bool(v)?,
                "early_stop_patience" => self.train.early_stop_patience = parse_num(v)?,
                "no_kap" => self.ablation.no_kap = parse_bool(v)?,
                "no_toe" => self.ablation.no_toe = parse_bool(v)?,
                "no_aso" => self.ablation.no_aso = parse_bool(v)?,
                "no_inc" => self.ablation.no_inc = parse_bool(v)?,
                "fine_tune" => self.ablation.fine_tune = parse_bool(v)?,
                "quota" => {
                    self.quota = match v {
                        "auto" => None,
                        _ => Some(parse_num(v)?),
                    }
                }
                "eval_ks" => self.eval_ks = parse_list(v)?,
                "seeds" => self.seeds = parse_list(v)?,
                "out" => self.out = (!v.is_empty()).then(|| PathBuf::from(v)),
                _ => return Err(format!("unknown key {key:?}")),
            }
            Ok(())
        })();
        r.map_err(|m| HarnessError::Config(format!("{key}: {m}")))
    }

    /// Parses `key=value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies `key=value` lines on top of this configuration.
    pub fn apply(&mut self, text: &str) -> Result<(), HarnessError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {}: expected key=value", i + 1))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| HarnessError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Every key in a fixed order; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("name", self.name.clone());
        match &self.data {
            DataSource::Synth(c) => {
                kv("data", "synth".into());
                kv("synth.n_pred", c.n_pred.to_string());
                kv("synth.n_groups", c.n_groups.to_string());
                kv("synth.n_obj", c.n_obj.to_string());
                kv("synth.d_c", c.d_c.to_string());
                kv("synth.d_r", c.d_r.to_string());
                kv("synth.d_o", c.d_o.to_string());
                kv("synth.sigma", c.sigma.to_string());
                kv("synth.zipf_s", c.zipf_s.to_string());
                kv("synth.total_n", c.total_n.to_string());
                kv(
                    "synth.relations_per_image",
                    c.relations_per_image.to_string(),
                );
                kv("synth.entity_choices", c.entity_choices.to_string());
                kv("synth.with_boxes", c.with_boxes.to_string());
            }
            DataSource::Files { embeddings, vocab } => {
                kv("data", "file".into());
                kv("data.embeddings", embeddings.display().to_string());
                kv("data.vocab", vocab.display().to_string());
            }
        }
        kv(
            "schedule",
            match self.schedule {
                ScheduleMode::Random => "random",
                ScheduleMode::Frequency => "frequency",
            }
            .into(),
        );
        kv("stages", self.stages.to_string());
        kv("split.train", self.fractions.train.to_string());
        kv("split.val", self.fractions.val.to_string());
        kv("split.test", self.fractions.test.to_string());
        kv("n_t", self.n_t.to_string());
        kv("n_p", self.n_p.to_string());
        kv("n_e", self.n_e.to_string());
        kv("d_tok", self.d_tok.to_string());
        kv("depth", self.depth.to_string());
        kv("tokens", self.tokens.name().into());
        let t = &self.train;
        kv("alpha", t.alpha.to_string());
        kv("lambda", t.lambda.to_string());
        kv("lr", t.lr.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("eps", t.eps.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("rehearsal", t.rehearsal.to_string());
        kv("k", t.k.to_string());
        kv("scorer_lr_scale", t.scorer_lr_scale.to_string());
        kv("aux_token_norm", t.aux_token_norm.to_string());
        kv("early_stop_patience", t.early_stop_patience.to_string());
        let a = &self.ablation;
        kv("no_kap", a.no_kap.to_string());
        kv("no_toe", a.no_toe.to_string());
        kv("no_aso", a.no_aso.to_string());
        kv("no_inc", a.no_inc.to_string());
        kv("fine_tune", a.fine_tune.to_string());
        kv("quota", self.quota.map_or("auto".into(), |q| q.to_string()));
        kv("eval_ks", join(&self.eval_ks));
        kv("seeds", join(&self.seeds));
        kv(
            "out",
            self.out
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        s
    }

    /// Keys whose values differ between two configurations.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let a = self.to_text();
        let b = other.to_text();
        let map = |t: &str| -> std::collections::BTreeMap<String, String> {
            t.lines()
                .filter_map(|l| l.split_once('='))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect()
        };
        let (ma, mb) = (map(&a), map(&b));
        let mut keys: Vec<String> = ma.keys().chain(mb.keys()).cloned().collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .filter(|k| ma.get(k) != mb.get(k))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.train.lr = 0.0015;
        c.quota = Some(7);
        c.seeds = vec![3, 9];
        c.out = Some(PathBuf::from("runs/a"));
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        let f = ExperimentConfig::parse("data.embeddings=x.emb\ndata.vocab=v.txt\n").unwrap();
        assert_eq!(ExperimentConfig::parse(&f.to_text()).unwrap(), f);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let e = ExperimentConfig::parse("k=3\nbogus=1\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 2"), "{e}");
        assert!(ExperimentConfig::parse("k=three\n").is_err());
        assert!(ExperimentConfig::parse("k\n").is_err());
        let c = ExperimentConfig::parse("# comment\n k = 2 # trailing\n").unwrap();
        assert_eq!(c.train.k, 2);
    }

    #[test]
    fn presets_change_only_their_fields() {
        let base = ExperimentConfig::default();
        let expect: [(&str, &[&str]); 10] = [
            ("full", &[]),
            ("w/o-kap", &["no_kap"]),
            ("w/o-toe", &["no_toe"]),
            ("w/o-aso", &["no_aso"]),
            ("w/o-inc", &["k", "no_inc", "rehearsal"]),
            ("w-1k", &["n_e"]),
            ("w-ft", &["fine_tune"]),
            ("w-sc", &["tokens"]),
            ("w-lc", &["tokens"]),
            ("w-frq", &["schedule"]),
        ];
        for (preset, fields) in expect {
            let p = base.clone().with_preset(preset).unwrap();
            let mut diff = p.diff(&base);
            diff.retain(|k| k != "name");
            assert_eq!(diff, fields.to_vec(), "{preset}");
            p.validate().unwrap();
        }
        let w1k = base.clone().with_preset("w-1k").unwrap();
        assert_eq!(w1k.n_t * w1k.n_e, 1000);
        assert_eq!(base.n_t * base.n_e, 2000);
        assert_eq!(
            base.clone().with_preset("w-sc").unwrap().token_counts(),
            TokenCounts::small()
        );
        assert!(base.with_preset("w/o-everything").is_err());
    }

    #[test]
    fn inconsistent_flags_are_rejected() {
        let mut c = ExperimentConfig::default();
        c.ablation.no_inc = true;
        assert!(c.validate().is_err());
        c.train.k = 1;
        c.train.rehearsal = 0.0;
        assert!(c.validate().is_ok());
        c.train.k = 101;
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_quota() {
        assert_eq!(ExperimentConfig::default().quota(), 400);
    }
}
