//! Recall@K, mean Recall@K, M@K, forgetting, weighted mAP and the weighted
//! summary score.
//!
//! All percentages are on a 0..100 scale. Matching is graph-constrained and
//! greedy: predictions are visited in rank order and each one claims the
//! first unclaimed ground-truth triplet it matches.

pub mod dump;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::datastream::{BoxPair, Label};

pub use dump::{parse_ground_truth, parse_predictions, write_ground_truth, write_predictions};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("K must be >= 1")]
    ZeroK,
    #[error("image {0} has predictions but no ground truth")]
    UnknownImage(u64),
    #[error("image {0} appears in more than one prediction record")]
    DuplicateImage(u64),
    #[error("image {image}: {msg}")]
    Record { image: u64, msg: String },
    #[error("box matching needs boxes on image {0}")]
    MissingBoxes(u64),
    #[error("no ground truth to evaluate")]
    NoGroundTruth,
    #[error("accuracy matrix: {0}")]
    Matrix(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// How a prediction is matched to a ground-truth triplet; class labels must
/// agree in every mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMode {
    /// The prediction carries the id of the pair it was made for.
    InstanceId,
    /// Subject and object boxes each with IoU >= 0.5.
    Rel,
    /// Union boxes with IoU >= 0.5.
    Phr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletPrediction {
    pub rank: usize,
    pub subject: Label,
    pub predicate: Label,
    pub object: Label,
    pub confidence: f64,
    pub boxes: Option<BoxPair>,
    pub gt_id: Option<u64>,
}

/// Ranked predictions of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub image_id: u64,
    predictions: Vec<TripletPrediction>,
}

impl PredictionRecord {
    /// Sorts by rank and checks that confidences do not increase with rank.
    pub fn new(
        image_id: u64,
        mut predictions: Vec<TripletPrediction>,
    ) -> Result<Self, MetricError> {
        let err = |msg: String| MetricError::Record {
            image: image_id,
            msg,
        };
        predictions.sort_by_key(|p| p.rank);
        for w in predictions.windows(2) {
            if w[0].rank == w[1].rank {
                return Err(err(format!("rank {} repeated", w[0].rank)));
            }
            if w[1].confidence > w[0].confidence {
                return Err(err(format!(
                    "rank {} has higher confidence than rank {}",
                    w[1].rank, w[0].rank
                )));
            }
        }
        if predictions.iter().any(|p| !p.confidence.is_finite()) {
            return Err(err("non-finite confidence".into()));
        }
        Ok(Self {
            image_id,
            predictions,
        })
    }

    pub fn predictions(&self) -> &[TripletPrediction] {
        &self.predictions
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtTriplet {
    pub image_id: u64,
    pub gt_id: u64,
    pub subject: Label,
    pub predicate: Label,
    pub object: Label,
    pub boxes: Option<BoxPair>,
}

/// Ground truth grouped by image, in file order within an image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    by_image: BTreeMap<u64, Vec<GtTriplet>>,
}

impl GroundTruth {
    pub fn new(triplets: impl IntoIterator<Item = GtTriplet>) -> Self {
        let mut by_image: BTreeMap<u64, Vec<GtTriplet>> = BTreeMap::new();
        for t in triplets {
            by_image.entry(t.image_id).or_default().push(t);
        }
        Self { by_image }
    }

    pub fn image(&self, id: u64) -> &[GtTriplet] {
        self.by_image.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn images(&self) -> impl Iterator<Item = (u64, &[GtTriplet])> {
        self.by_image.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.by_image.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn triplets(&self) -> impl Iterator<Item = &GtTriplet> {
        self.by_image.values().flatten()
    }
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn triplet_matches(
    p: &TripletPrediction,
    g: &GtTriplet,
    mode: MatchMode,
) -> Result<bool, MetricError> {
    if p.subject != g.subject || p.predicate != g.predicate || p.object != g.object {
        return Ok(false);
    }
    match mode {
        MatchMode::InstanceId => Ok(p.gt_id == Some(g.gt_id)),
        MatchMode::Rel | MatchMode::Phr => {
            let (Some(pb), Some(gb)) = (&p.boxes, &g.boxes) else {
                return Err(MetricError::MissingBoxes(g.image_id));
            };
            Ok(if mode == MatchMode::Rel {
                iou(&pb.subject, &gb.subject) >= 0.5 && iou(&pb.object, &gb.object) >= 0.5
            } else {
                iou(&pb.union(), &gb.union()) >= 0.5
            })
        }
    }
}

/// Greedy by-rank matching of the top `k` predictions. Returns, per visited
/// prediction, the index of the claimed ground truth.
pub fn match_image(
    preds: &[TripletPrediction],
    gts: &[GtTriplet],
    k: usize,
    mode: MatchMode,
) -> Result<Vec<Option<usize>>, MetricError> {
    let mut claimed = vec![false; gts.len()];
    let mut out = Vec::with_capacity(k.min(preds.len()));
    for p in preds.iter().take(k) {
        let mut hit = None;
        for (gi, g) in gts.iter().enumerate() {
            if !claimed[gi] && triplet_matches(p, g, mode)? {
                hit = Some(gi);
                claimed[gi] = true;
                break;
            }
        }
        out.push(hit);
    }
    Ok(out)
}

fn index_records<'a>(
    records: &'a [PredictionRecord],
    gt: &GroundTruth,
) -> Result<BTreeMap<u64, &'a PredictionRecord>, MetricError> {
    let mut map = BTreeMap::new();
    for r in records {
        if gt.image(r.image_id).is_empty() && !r.predictions.is_empty() {
            return Err(MetricError::UnknownImage(r.image_id));
        }
        if map.insert(r.image_id, r).is_some() {
            return Err(MetricError::DuplicateImage(r.image_id));
        }
    }
    Ok(map)
}

/// Per ground-truth triplet, whether it is matched within the top `k`.
fn matched_flags(
    records: &[PredictionRecord],
    gt: &GroundTruth,
    k: usize,
    mode: MatchMode,
) -> Result<Vec<(u64, Vec<bool>)>, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    let map = index_records(records, gt)?;
    let mut out = Vec::new();
    for (image, gts) in gt.images() {
        let mut flags = vec![false; gts.len()];
        if let Some(rec) = map.get(&image) {
            for gi in match_image(&rec.predictions, gts, k, mode)?
                .into_iter()
                .flatten()
            {
                flags[gi] = true;
            }
        }
        out.push((image, flags));
    }
    Ok(out)
}

pub fn recall_at_k(
    records: &[PredictionRecord],
    gt: &GroundTruth,
    k: usize,
    mode: MatchMode,
) -> Result<f64, MetricError> {
    let flags = matched_flags(records, gt, k, mode)?;
    let images: Vec<f64> = flags
        .iter()
        .filter(|(_, f)| !f.is_empty())
        .map(|(_, f)| f.iter().filter(|&&b| b).count() as f64 / f.len() as f64)
        .collect();
    if images.is_empty() {
        return Err(MetricError::NoGroundTruth);
    }
    Ok(100.0 * images.iter().sum::<f64>() / images.len() as f64)
}

pub fn mean_recall_at_k(
    records: &[PredictionRecord],
    gt: &GroundTruth,
    k: usize,
    mode: MatchMode,
) -> Result<f64, MetricError> {
    Ok(per_class_recall_at_k(records, gt, k, mode)?.mean)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecall {
    /// `(matched, total)` per predicate with ground truth.
    pub per_class: BTreeMap<Label, (usize, usize)>,
    pub mean: f64,
}

pub fn per_class_recall_at_k(
    records: &[PredictionRecord],
    gt: &GroundTruth,
    k: usize,
    mode: MatchMode,
) -> Result<ClassRecall, MetricError> {
    let flags = matched_flags(records, gt, k, mode)?;
    let mut per_class: BTreeMap<Label, (usize, usize)> = BTreeMap::new();
    for (image, f) in &flags {
        for (g, &hit) in gt.image(*image).iter().zip(f) {
            let c = per_class.entry(g.predicate).or_default();
            c.0 += usize::from(hit);
            c.1 += 1;
        }
    }
    if per_class.is_empty() {
        return Err(MetricError::NoGroundTruth);
    }
    let sum: f64 = per_class.values().map(|&(m, n)| m as f64 / n as f64).sum();
    Ok(ClassRecall {
        mean: 100.0 * sum / per_class.len() as f64,
        per_class,
    })
}

pub fn m_at_k(r: f64, mr: f64) -> f64 {
    (r + mr) / 2.0
}

/// `0.2·R@50 + 0.4·wmAP_rel + 0.4·wmAP_phr`.
pub fn score_wtd(r50: f64, wmap_rel: f64, wmap_phr: f64) -> f64 {
    0.2 * r50 + 0.4 * wmap_rel + 0.4 * wmap_phr
}

/// Area under the monotone precision envelope of a ranked hit list.
pub fn average_precision(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    hits.iter()
        .zip(&precision)
        .filter(|(&h, _)| h)
        .map(|(_, p)| p / n_gt as f64)
        .sum()
}

/// Per-class AP weighted by ground-truth count.
pub fn weighted_map(
    records: &[PredictionRecord],
    gt: &GroundTruth,
    mode: MatchMode,
) -> Result<f64, MetricError> {
    let map = index_records(records, gt)?;
    let mut n_gt: BTreeMap<Label, usize> = BTreeMap::new();
    for g in gt.triplets() {
        *n_gt.entry(g.predicate).or_default() += 1;
    }
    let total: usize = n_gt.values().sum();
    if total == 0 {
        return Err(MetricError::NoGroundTruth);
    }
    let mut acc = 0.0;
    for (&class, &count) in &n_gt {
        let mut preds: Vec<(u64, &TripletPrediction)> = map
            .iter()
            .flat_map(|(&img, r)| r.predictions.iter().map(move |p| (img, p)))
            .filter(|(_, p)| p.predicate == class)
            .collect();
        preds.sort_by(|a, b| {
            b.1.confidence
                .partial_cmp(&a.1.confidence)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.1.rank.cmp(&b.1.rank))
        });
        let mut claimed: BTreeMap<u64, Vec<bool>> = BTreeMap::new();
        let mut hits = Vec::with_capacity(preds.len());
        for (img, p) in preds {
            let gts = gt.image(img);
            let c = claimed.entry(img).or_insert_with(|| vec![false; gts.len()]);
            let mut hit = false;
            for (gi, g) in gts.iter().enumerate() {
                if !c[gi] && triplet_matches(p, g, mode)? {
                    c[gi] = true;
                    hit = true;
                    break;
                }
            }
            hits.push(hit);
        }
        acc += count as f64 * average_precision(&hits, count);
    }
    Ok(100.0 * acc / total as f64)
}

/// `a[l][j]`: metric on task `j` after stage `l`, filled for `j <= l` only.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    cells: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(stages: usize) -> Self {
        Self {
            cells: (0..stages).map(|l| vec![None; l + 1]).collect(),
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, MetricError> {
        let mut m = Self::new(rows.len());
        for (l, row) in rows.iter().enumerate() {
            if row.len() != l + 1 {
                return Err(MetricError::Matrix(format!(
                    "row {l} has {} values, expected {}",
                    row.len(),
                    l + 1
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                m.set(l, j, v)?;
            }
        }
        Ok(m)
    }

    pub fn stages(&self) -> usize {
        self.cells.len()
    }

    /// Each cell may be written once.
    pub fn set(&mut self, l: usize, j: usize, v: f64) -> Result<(), MetricError> {
        if !(0.0..=100.0).contains(&v) {
            return Err(MetricError::Matrix(format!("value {v} outside [0, 100]")));
        }
        let cell = self
            .cells
            .get_mut(l)
            .and_then(|r| r.get_mut(j))
            .ok_or_else(|| MetricError::Matrix(format!("cell ({l}, {j}) is above the diagonal")))?;
        if cell.is_some() {
            return Err(MetricError::Matrix(format!(
                "cell ({l}, {j}) already written"
            )));
        }
        *cell = Some(v);
        Ok(())
    }

    pub fn get(&self, l: usize, j: usize) -> Option<f64> {
        self.cells.get(l).and_then(|r| r.get(j)).copied().flatten()
    }

    pub fn row(&self, l: usize) -> Vec<Option<f64>> {
        self.cells[l].clone()
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().flatten().all(Option::is_some)
    }
}

/// `(1/(T-1)) Σ_{j<T-1} [max_{j<=l<T-1} a[l][j] - a[T-1][j]]`.
pub fn forgetting_measure(a: &AccuracyMatrix) -> Result<f64, MetricError> {
    let t = a.stages();
    if t < 2 {
        return Err(MetricError::Matrix(
            "forgetting needs at least two stages".into(),
        ));
    }
    if !a.is_complete() {
        return Err(MetricError::Matrix(
            "lower triangle is not fully filled".into(),
        ));
    }
    let last = t - 1;
    let mut sum = 0.0;
    for j in 0..last {
        let best = (j..last)
            .map(|l| a.get(l, j).expect("complete"))
            .fold(f64::NEG_INFINITY, f64::max);
        sum += best - a.get(last, j).expect("complete");
    }
    Ok(sum / last as f64)
}

/// Metrics after one stage, on the test data of every task seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub stage: usize,
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub mean_recall: Vec<f64>,
    pub m: Vec<f64>,
    /// `per_task[j][i]`: mR@ks[i] on task `j`.
    pub per_task: Vec<Vec<f64>>,
    pub wmap_rel: Option<f64>,
    pub wmap_phr: Option<f64>,
    pub score_wtd: Option<f64>,
}

impl MetricReport {
    pub fn check_m_exact(&self) -> Result<(), MetricError> {
        for ((r, mr), m) in self.recall.iter().zip(&self.mean_recall).zip(&self.m) {
            if m_at_k(*r, *mr).to_bits() != m.to_bits() {
                return Err(MetricError::Matrix(format!("M@K {m} != ({r} + {mr}) / 2")));
            }
        }
        Ok(())
    }
}
