//! Random instances and brute-force reference implementations shared by the
//! integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use lsgg::datastream::{BoxPair, Label};
use lsgg::metrics::{GroundTruth, GtTriplet, MatchMode, PredictionRecord, TripletPrediction};
use lsgg::numerics::SeededRng;

pub struct MetricCase {
    pub records: Vec<PredictionRecord>,
    pub gt: GroundTruth,
    pub k: usize,
}

fn random_box(rng: &mut SeededRng) -> [f64; 4] {
    let x = rng.below(6) as f64;
    let y = rng.below(6) as f64;
    [
        x,
        y,
        x + 1.0 + rng.below(4) as f64,
        y + 1.0 + rng.below(4) as f64,
    ]
}

fn jitter(b: &[f64; 4], rng: &mut SeededRng) -> [f64; 4] {
    let d = |rng: &mut SeededRng| (rng.below(3) as f64 - 1.0) * 0.5;
    let x1 = b[0] + d(rng);
    let y1 = b[1] + d(rng);
    [
        x1,
        y1,
        (b[2] + d(rng)).max(x1 + 0.5),
        (b[3] + d(rng)).max(y1 + 0.5),
    ]
}

/// Up to 20 images, 10 predicates and 10 predictions per image. Confidences
/// come from a coarse grid so ties are common.
pub fn random_case(rng: &mut SeededRng) -> MetricCase {
    let n_images = 1 + rng.below(20);
    let n_pred = 1 + rng.below(10);
    let mut gts = Vec::new();
    let mut records = Vec::new();
    for img in 0..n_images as u64 {
        let n_gt = rng.below(6);
        let mine: Vec<GtTriplet> = (0..n_gt as u64)
            .map(|g| GtTriplet {
                image_id: img,
                gt_id: g,
                subject: rng.below(3) as Label,
                predicate: rng.below(n_pred) as Label,
                object: rng.below(3) as Label,
                boxes: Some(BoxPair {
                    subject: random_box(rng),
                    object: random_box(rng),
                }),
            })
            .collect();
        if n_gt == 0 {
            continue;
        }
        let n_p = rng.below(11);
        let mut confs: Vec<u32> = (0..n_p).map(|_| rng.below(10) as u32 + 1).collect();
        confs.sort_unstable_by(|a, b| b.cmp(a));
        let preds: Vec<TripletPrediction> = confs
            .iter()
            .enumerate()
            .map(|(rank, &c)| {
                let src = &mine[rng.below(mine.len())];
                let copy = rng.uniform() < 0.6;
                let b = src.boxes.unwrap();
                TripletPrediction {
                    rank,
                    subject: if copy {
                        src.subject
                    } else {
                        rng.below(3) as Label
                    },
                    predicate: if copy {
                        src.predicate
                    } else {
                        rng.below(n_pred) as Label
                    },
                    object: if copy {
                        src.object
                    } else {
                        rng.below(3) as Label
                    },
                    confidence: c as f64 / 10.0,
                    boxes: Some(BoxPair {
                        subject: jitter(&b.subject, rng),
                        object: jitter(&b.object, rng),
                    }),
                    gt_id: match rng.below(4) {
                        0 => None,
                        1 => Some(rng.below(n_gt) as u64),
                        _ => Some(src.gt_id),
                    },
                }
            })
            .collect();
        if !preds.is_empty() || rng.uniform() < 0.5 {
            records.push(PredictionRecord::new(img, preds).unwrap());
        }
        gts.extend(mine);
    }
    if gts.is_empty() {
        return random_case(rng);
    }
    MetricCase {
        records,
        gt: GroundTruth::new(gts),
        k: 1 + rng.below(12),
    }
}

fn area(r: &[f64; 4]) -> f64 {
    (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0)
}

fn overlap(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let i = w * h;
    i / (area(a) + area(b) - i)
}

fn enclosing(b: &BoxPair) -> [f64; 4] {
    [
        b.subject[0].min(b.object[0]),
        b.subject[1].min(b.object[1]),
        b.subject[2].max(b.object[2]),
        b.subject[3].max(b.object[3]),
    ]
}

pub fn oracle_matches(p: &TripletPrediction, g: &GtTriplet, mode: MatchMode) -> bool {
    let same = (p.subject, p.predicate, p.object) == (g.subject, g.predicate, g.object);
    same && match mode {
        MatchMode::InstanceId => p.gt_id == Some(g.gt_id),
        MatchMode::Rel => {
            let (a, b) = (p.boxes.unwrap(), g.boxes.unwrap());
            overlap(&a.subject, &b.subject) >= 0.5 && overlap(&a.object, &b.object) >= 0.5
        }
        MatchMode::Phr => {
            overlap(&enclosing(&p.boxes.unwrap()), &enclosing(&g.boxes.unwrap())) >= 0.5
        }
    }
}

/// Ground-truth hit flags per image: predictions taken in rank order, each
/// claiming the first unclaimed matching triplet.
fn oracle_hits(case: &MetricCase, k: usize, mode: MatchMode) -> BTreeMap<u64, Vec<bool>> {
    let mut out = BTreeMap::new();
    for g in case.gt.triplets() {
        out.entry(g.image_id).or_insert_with(Vec::new).push(false);
    }
    for r in &case.records {
        let gts: Vec<&GtTriplet> = case
            .gt
            .triplets()
            .filter(|g| g.image_id == r.image_id)
            .collect();
        let mut preds: Vec<&TripletPrediction> = r.predictions().iter().collect();
        preds.sort_by_key(|p| p.rank);
        let flags = out.get_mut(&r.image_id).unwrap();
        for p in preds.into_iter().filter(|p| p.rank < k) {
            if let Some(i) = (0..gts.len()).find(|&i| !flags[i] && oracle_matches(p, gts[i], mode))
            {
                flags[i] = true;
            }
        }
    }
    out
}

pub fn oracle_recall(case: &MetricCase, mode: MatchMode) -> f64 {
    let hits = oracle_hits(case, case.k, mode);
    let mut sum = 0.0;
    for f in hits.values() {
        sum += f.iter().filter(|h| **h).count() as f64 / f.len() as f64;
    }
    100.0 * sum / hits.len() as f64
}

pub fn oracle_mean_recall(case: &MetricCase, mode: MatchMode) -> f64 {
    let hits = oracle_hits(case, case.k, mode);
    let mut per: BTreeMap<Label, (usize, usize)> = BTreeMap::new();
    for (img, flags) in &hits {
        let gts: Vec<&GtTriplet> = case.gt.triplets().filter(|g| g.image_id == *img).collect();
        for (g, h) in gts.iter().zip(flags) {
            let e = per.entry(g.predicate).or_default();
            e.0 += *h as usize;
            e.1 += 1;
        }
    }
    let sum: f64 = per.values().map(|&(m, n)| m as f64 / n as f64).sum();
    100.0 * sum / per.len() as f64
}

/// Precision at each hit, maximized over all later cut-offs, summed and
/// divided by the number of ground-truth triplets.
pub fn oracle_ap(hits: &[bool], n_gt: usize) -> f64 {
    let prec = |n: usize| hits[..=n].iter().filter(|h| **h).count() as f64 / (n + 1) as f64;
    let mut ap = 0.0;
    for i in 0..hits.len() {
        if hits[i] {
            ap += (i..hits.len()).map(prec).fold(0.0, f64::max);
        }
    }
    if n_gt == 0 {
        0.0
    } else {
        ap / n_gt as f64
    }
}

pub fn oracle_weighted_map(case: &MetricCase, mode: MatchMode) -> f64 {
    let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
    for g in case.gt.triplets() {
        *counts.entry(g.predicate).or_default() += 1;
    }
    let total: usize = counts.values().sum();
    let mut acc = 0.0;
    for (&c, &n) in &counts {
        // Highest confidence first, then image, then rank.
        let mut preds: Vec<(i64, u64, usize, &TripletPrediction)> = case
            .records
            .iter()
            .flat_map(|r| r.predictions().iter().map(move |p| (r.image_id, p)))
            .filter(|(_, p)| p.predicate == c)
            .map(|(img, p)| (-(p.confidence * 10.0).round() as i64, img, p.rank, p))
            .collect();
        preds.sort_by_key(|t| (t.0, t.1, t.2));
        let mut claimed: Vec<(u64, u64)> = Vec::new();
        let hits: Vec<bool> = preds
            .iter()
            .map(|(_, img, _, p)| {
                let hit = case
                    .gt
                    .triplets()
                    .filter(|g| g.image_id == *img && !claimed.contains(&(*img, g.gt_id)))
                    .find(|g| oracle_matches(p, g, mode));
                if let Some(g) = hit {
                    claimed.push((*img, g.gt_id));
                }
                hit.is_some()
            })
            .collect();
        acc += n as f64 * oracle_ap(&hits, n);
    }
    100.0 * acc / total as f64
}

/// Random complete lower-triangular accuracy rows in [0, 100].
pub fn random_rows(rng: &mut SeededRng, t: usize) -> Vec<Vec<f64>> {
    (0..t)
        .map(|l| (0..=l).map(|_| (rng.below(1001) as f64) / 10.0).collect())
        .collect()
}

pub fn oracle_forgetting(rows: &[Vec<f64>]) -> f64 {
    let t = rows.len();
    let mut sum = 0.0;
    for j in 0..t - 1 {
        let mut best = f64::NEG_INFINITY;
        for row in &rows[j..t - 1] {
            best = best.max(row[j]);
        }
        sum += best - rows[t - 1][j];
    }
    sum / (t - 1) as f64
}
