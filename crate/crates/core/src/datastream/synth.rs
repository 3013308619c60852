//! Gaussian-cluster relation data with a long-tailed predicate distribution.
//!
//! Each predicate has a unit-norm relation mean and belongs to a knowledge
//! group with its own unit-norm context mean, so context features carry the
//! group and relation features carry the class. Subject/object labels come
//! from a vocabulary shared by all predicates, each predicate preferring a
//! few subject and object classes.

use super::{BoxPair, DataError, Label, RelationInstance};
use crate::numerics::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_pred: usize,
    pub n_groups: usize,
    pub n_obj: usize,
    pub d_c: usize,
    pub d_r: usize,
    pub d_o: usize,
    /// Per-coordinate noise standard deviation.
    pub sigma: f64,
    /// Zipf exponent of the per-class counts; 0 gives a balanced dataset.
    pub zipf_s: f64,
    pub total_n: usize,
    pub relations_per_image: usize,
    /// Candidate subject (and object) classes per predicate.
    pub entity_choices: usize,
    pub with_boxes: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_pred: 50,
            n_groups: 5,
            n_obj: 30,
            d_c: 64,
            d_r: 64,
            d_o: 32,
            sigma: 0.35,
            zipf_s: 0.8,
            total_n: 10_000,
            relations_per_image: 8,
            entity_choices: 3,
            with_boxes: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.n_pred == 0 {
            return bad("n_pred must be >= 1");
        }
        if self.n_groups == 0 {
            return bad("n_groups must be >= 1");
        }
        if self.n_obj == 0 || self.entity_choices == 0 {
            return bad("n_obj and entity_choices must be >= 1");
        }
        if self.d_c < 2 || self.d_r < 2 || self.d_o < 2 {
            return bad("feature dimensions must be >= 2");
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return bad("sigma must be finite and >= 0");
        }
        if !(self.zipf_s.is_finite() && self.zipf_s >= 0.0) {
            return bad("zipf_s must be finite and >= 0");
        }
        if self.relations_per_image == 0 {
            return bad("relations_per_image must be >= 1");
        }
        Ok(())
    }

    /// Per-class counts `∝ (rank+1)^-s`, largest-remainder rounded to `total_n`.
    pub fn class_counts(&self) -> Vec<usize> {
        let weights: Vec<f64> = (0..self.n_pred)
            .map(|c| ((c + 1) as f64).powf(-self.zipf_s))
            .collect();
        let z: f64 = weights.iter().sum();
        let exact: Vec<f64> = weights
            .iter()
            .map(|w| self.total_n as f64 * w / z)
            .collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut rest = self.total_n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..self.n_pred).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &c in order.iter().cycle() {
            if rest == 0 {
                break;
            }
            counts[c] += 1;
            rest -= 1;
        }
        counts
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Vec<RelationInstance>,
    /// Knowledge group of each predicate.
    pub groups: Vec<usize>,
    /// Word sequence of each predicate.
    pub phrases: Vec<Vec<String>>,
    pub relation_means: Vec<Vec<f64>>,
}

/// Predicate names: every fifth predicate is a two-word phrase ending in a
/// shared preposition, the rest are single words.
pub fn predicate_phrases(n_pred: usize) -> Vec<Vec<String>> {
    const PREPS: [&str; 3] = ["on", "in", "of"];
    (0..n_pred)
        .map(|c| {
            let head = format!("rel{c}");
            if c % 5 == 4 {
                vec![head, PREPS[(c / 5) % PREPS.len()].to_string()]
            } else {
                vec![head]
            }
        })
        .collect()
}

fn noisy(mean: &[f64], sigma: f64, rng: &mut SeededRng) -> Vec<f64> {
    mean.iter().map(|m| m + sigma * rng.gaussian()).collect()
}

fn random_box(rng: &mut SeededRng) -> [f64; 4] {
    let x1 = (rng.uniform() * 500.0).floor();
    let y1 = (rng.uniform() * 350.0).floor();
    let w = 16.0 + (rng.uniform() * 120.0).floor();
    let h = 16.0 + (rng.uniform() * 120.0).floor();
    [x1, y1, x1 + w, y1 + h]
}

pub fn synth_generate(config: &SynthConfig, rng: &mut SeededRng) -> Result<SynthOutput, DataError> {
    config.validate()?;
    let counts = config.class_counts();

    let mut groups: Vec<usize> = (0..config.n_pred).map(|c| c % config.n_groups).collect();
    rng.shuffle(&mut groups);
    let group_means: Vec<Vec<f64>> = (0..config.n_groups)
        .map(|_| rng.unit_vector(config.d_c))
        .collect();
    let relation_means: Vec<Vec<f64>> = (0..config.n_pred)
        .map(|_| rng.unit_vector(config.d_r))
        .collect();
    let entity_means: Vec<Vec<f64>> = (0..config.n_obj)
        .map(|_| rng.unit_vector(config.d_o))
        .collect();
    let choices = config.entity_choices.min(config.n_obj);
    let subject_pool: Vec<Vec<usize>> = (0..config.n_pred)
        .map(|_| rng.choose_distinct(config.n_obj, choices))
        .collect();
    let object_pool: Vec<Vec<usize>> = (0..config.n_pred)
        .map(|_| rng.choose_distinct(config.n_obj, choices))
        .collect();

    let mut dataset = Vec::with_capacity(config.total_n);
    for (c, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let subj = subject_pool[c][rng.below(choices)];
            let obj = object_pool[c][rng.below(choices)];
            let f_c = noisy(&group_means[groups[c]], config.sigma, rng);
            let f_r = noisy(&relation_means[c], config.sigma, rng);
            let f_s = noisy(&entity_means[subj], config.sigma, rng);
            let f_o = noisy(&entity_means[obj], config.sigma, rng);
            let boxes = config.with_boxes.then(|| BoxPair {
                subject: random_box(rng),
                object: random_box(rng),
            });
            dataset.push(RelationInstance {
                image_id: 0,
                f_c,
                f_r,
                f_s,
                f_o,
                subject_class: subj as Label,
                object_class: obj as Label,
                predicate: c as Label,
                boxes,
                confidence: None,
            });
        }
    }
    rng.shuffle(&mut dataset);
    for (i, inst) in dataset.iter_mut().enumerate() {
        inst.image_id = (i / config.relations_per_image) as u64;
    }

    Ok(SynthOutput {
        dataset,
        groups,
        phrases: predicate_phrases(config.n_pred),
        relation_means,
    })
}
