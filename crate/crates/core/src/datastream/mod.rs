//! Task streams: relation instances, the stage schedule over predicate labels,
//! per-stage train/val/test routing, synthetic data and the embedding file
//! format.

mod emb;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::numerics::{all_finite, mix64, SeededRng};

pub use emb::{load_embeddings, read_embeddings, save_embeddings, write_embeddings, EmbHeader};
pub use synth::{synth_generate, SynthConfig, SynthOutput};

/// Predicate or object class id.
pub type Label = u32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("predicate {0} is not covered by the schedule")]
    UnscheduledPredicate(Label),
    #[error("missing training count for predicate {0}")]
    MissingCount(Label),
    #[error("invalid instance: {0}")]
    Instance(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Subject and object boxes, `(x1, y1, x2, y2)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxPair {
    pub subject: [f64; 4],
    pub object: [f64; 4],
}

impl BoxPair {
    pub fn is_valid(&self) -> bool {
        let ok = |b: &[f64; 4]| all_finite(b) && b[0] < b[2] && b[1] < b[3];
        ok(&self.subject) && ok(&self.object)
    }

    /// Smallest box enclosing both boxes.
    pub fn union(&self) -> [f64; 4] {
        let (s, o) = (self.subject, self.object);
        [
            s[0].min(o[0]),
            s[1].min(o[1]),
            s[2].max(o[2]),
            s[3].max(o[3]),
        ]
    }
}

/// One subject–object pair with its four feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationInstance {
    pub image_id: u64,
    pub f_c: Vec<f64>,
    pub f_r: Vec<f64>,
    pub f_s: Vec<f64>,
    pub f_o: Vec<f64>,
    pub subject_class: Label,
    pub object_class: Label,
    pub predicate: Label,
    pub boxes: Option<BoxPair>,
    pub confidence: Option<f64>,
}

impl RelationInstance {
    pub fn validate(&self) -> Result<(), DataError> {
        for (name, f) in [
            ("f_c", &self.f_c),
            ("f_r", &self.f_r),
            ("f_s", &self.f_s),
            ("f_o", &self.f_o),
        ] {
            if f.is_empty() || !all_finite(f) {
                return Err(DataError::Instance(format!(
                    "{name} is empty or non-finite"
                )));
            }
        }
        if let Some(b) = &self.boxes {
            if !b.is_valid() {
                return Err(DataError::Instance("degenerate box".into()));
            }
        }
        if let Some(c) = self.confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(DataError::Instance(format!(
                    "confidence {c} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Ordered partition of the predicate vocabulary into disjoint stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSchedule {
    stages: Vec<Vec<Label>>,
}

impl TaskSchedule {
    /// Checks disjointness, non-emptiness and (if given) coverage of `vocab`.
    pub fn new(stages: Vec<Vec<Label>>, vocab: Option<&[Label]>) -> Result<Self, DataError> {
        if stages.is_empty() {
            return Err(DataError::Schedule("no stages".into()));
        }
        let mut seen = BTreeSet::new();
        for (i, s) in stages.iter().enumerate() {
            if s.is_empty() {
                return Err(DataError::Schedule(format!("stage {} is empty", i + 1)));
            }
            for &l in s {
                if !seen.insert(l) {
                    return Err(DataError::Schedule(format!("predicate {l} appears twice")));
                }
            }
        }
        if let Some(v) = vocab {
            let want: BTreeSet<Label> = v.iter().copied().collect();
            if want != seen {
                return Err(DataError::Schedule(
                    "stages do not cover the vocabulary".into(),
                ));
            }
        }
        Ok(Self { stages })
    }

    pub fn stages(&self) -> &[Vec<Label>] {
        &self.stages
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage_of(&self, label: Label) -> Option<usize> {
        self.stages.iter().position(|s| s.contains(&label))
    }

    /// All labels of stages `0..=stage`.
    pub fn seen_labels(&self, stage: usize) -> Vec<Label> {
        let mut out: Vec<Label> = self.stages[..=stage].iter().flatten().copied().collect();
        out.sort_unstable();
        out
    }

    pub fn vocab(&self) -> Vec<Label> {
        self.seen_labels(self.stages.len() - 1)
    }

    /// One line per stage, labels separated by spaces.
    pub fn to_text(&self) -> String {
        self.stages
            .iter()
            .map(|s| {
                s.iter()
                    .map(|l| l.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
                    + "\n"
            })
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let mut stages = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let stage = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<Label>().map_err(|e| DataError::Parse {
                        line: i + 1,
                        msg: format!("bad label {t:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            stages.push(stage);
        }
        Self::new(stages, None)
    }
}

fn dedup_vocab(vocab: &[Label]) -> Result<Vec<Label>, DataError> {
    let set: BTreeSet<Label> = vocab.iter().copied().collect();
    if set.len() != vocab.len() {
        return Err(DataError::Schedule("duplicate labels in vocabulary".into()));
    }
    Ok(set.into_iter().collect())
}

/// Sizes of `n` items chunked into `t` near-equal consecutive parts.
fn chunk_sizes(n: usize, t: usize) -> Vec<usize> {
    (0..t).map(|i| n / t + usize::from(i < n % t)).collect()
}

fn chunk(labels: &[Label], t: usize) -> Vec<Vec<Label>> {
    let mut out = Vec::with_capacity(t);
    let mut start = 0;
    for size in chunk_sizes(labels.len(), t) {
        let mut stage = labels[start..start + size].to_vec();
        stage.sort_unstable();
        out.push(stage);
        start += size;
    }
    out
}

/// Random partition into `t` stages whose sizes differ by at most one.
pub fn split_random(
    vocab: &[Label],
    t: usize,
    rng: &mut SeededRng,
) -> Result<TaskSchedule, DataError> {
    let mut labels = dedup_vocab(vocab)?;
    if t == 0 || t > labels.len() {
        return Err(DataError::Schedule(format!(
            "cannot split {} predicates into {t} stages",
            labels.len()
        )));
    }
    rng.shuffle(&mut labels);
    TaskSchedule::new(chunk(&labels, t), Some(vocab))
}

/// Head-to-tail split: most frequent labels arrive first.
pub fn split_by_frequency(
    vocab: &[Label],
    counts: &BTreeMap<Label, usize>,
    t: usize,
) -> Result<TaskSchedule, DataError> {
    let mut labels = dedup_vocab(vocab)?;
    if let Some(&missing) = labels.iter().find(|l| !counts.contains_key(l)) {
        return Err(DataError::MissingCount(missing));
    }
    if t == 0 || t > labels.len() {
        return Err(DataError::Schedule(format!(
            "cannot split {} predicates into {t} stages",
            labels.len()
        )));
    }
    labels.sort_by(|a, b| counts[b].cmp(&counts[a]).then(a.cmp(b)));
    TaskSchedule::new(chunk(&labels, t), Some(vocab))
}

pub fn predicate_counts(dataset: &[RelationInstance]) -> BTreeMap<Label, usize> {
    let mut counts = BTreeMap::new();
    for inst in dataset {
        *counts.entry(inst.predicate).or_insert(0) += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<(), DataError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&f| !(f.is_finite() && f > 0.0)) {
            return Err(DataError::Config("split fractions must be positive".into()));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::Config("split fractions must sum to 1".into()));
        }
        Ok(())
    }
}

/// Train/val/test data of one stage.
#[derive(Debug, Clone, Default)]
pub struct StageDataset {
    pub stage: usize,
    pub labels: Vec<Label>,
    pub train: Vec<RelationInstance>,
    pub val: Vec<RelationInstance>,
    pub test: Vec<RelationInstance>,
}

/// Routes every instance to the stage owning its predicate, then splits each
/// stage by a stable hash of `(image_id, dataset index)`.
///
/// Within a stage the instances are ordered by hash and cut at
/// `round(n·train)` and `round(n·(train+val))`.
pub fn make_stage_datasets(
    dataset: &[RelationInstance],
    schedule: &TaskSchedule,
    fractions: SplitFractions,
) -> Result<Vec<StageDataset>, DataError> {
    fractions.validate()?;
    let mut routed: Vec<Vec<(u64, usize)>> = vec![Vec::new(); schedule.num_stages()];
    for (idx, inst) in dataset.iter().enumerate() {
        let stage = schedule
            .stage_of(inst.predicate)
            .ok_or(DataError::UnscheduledPredicate(inst.predicate))?;
        let key = mix64(mix64(inst.image_id) ^ (idx as u64).wrapping_mul(0xA24B_AED4_963E_E407));
        routed[stage].push((key, idx));
    }
    Ok(routed
        .into_iter()
        .enumerate()
        .map(|(stage, mut items)| {
            items.sort_unstable();
            let n = items.len() as f64;
            let n_train = (n * fractions.train).round() as usize;
            let n_trainval =
                ((n * (fractions.train + fractions.val)).round() as usize).max(n_train);
            let take = |range: &[(u64, usize)]| {
                let mut idx: Vec<usize> = range.iter().map(|&(_, i)| i).collect();
                idx.sort_unstable();
                idx.into_iter()
                    .map(|i| dataset[i].clone())
                    .collect::<Vec<_>>()
            };
            StageDataset {
                stage,
                labels: schedule.stages()[stage].clone(),
                train: take(&items[..n_train]),
                val: take(&items[n_train..n_trainval]),
                test: take(&items[n_trainval..]),
            }
        })
        .collect())
}
