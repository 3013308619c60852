//! Prediction dumps and ground-truth files.
//!
//! ```text
//! prediction: image_id rank subj pred obj conf [8 box floats] [gt_id|-]
//! ground truth: image_id gt_id subj pred obj [8 box floats]
//! ```
//!
//! Boxes are the subject box then the object box, each `x1 y1 x2 y2`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{GroundTruth, GtTriplet, MetricError, PredictionRecord, TripletPrediction};
use crate::datastream::{BoxPair, Label};

fn perr(line: usize, msg: impl Into<String>) -> MetricError {
    MetricError::Parse {
        line,
        msg: msg.into(),
    }
}

fn num<T: std::str::FromStr>(t: &str, what: &str, line: usize) -> Result<T, MetricError> {
    t.parse()
        .map_err(|_| perr(line, format!("bad {what} {t:?}")))
}

fn float(t: &str, line: usize) -> Result<f64, MetricError> {
    let v: f64 = num(t, "number", line)?;
    if !v.is_finite() {
        return Err(perr(line, format!("non-finite value {t:?}")));
    }
    Ok(v)
}

fn boxes(toks: &[&str], line: usize) -> Result<BoxPair, MetricError> {
    let v = toks
        .iter()
        .map(|t| float(t, line))
        .collect::<Result<Vec<_>, _>>()?;
    let b = BoxPair {
        subject: [v[0], v[1], v[2], v[3]],
        object: [v[4], v[5], v[6], v[7]],
    };
    if !b.is_valid() {
        return Err(perr(line, "box with x2 < x1 or y2 < y1"));
    }
    Ok(b)
}

fn content(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        (!l.is_empty() && !l.starts_with('#')).then(|| (i + 1, l.split_whitespace().collect()))
    })
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRecord>, MetricError> {
    let mut by_image: BTreeMap<u64, Vec<TripletPrediction>> = BTreeMap::new();
    for (line, toks) in content(text) {
        let (box_toks, gt_tok) = match toks.len() {
            6 => (None, None),
            7 => (None, Some(toks[6])),
            14 => (Some(&toks[6..14]), None),
            15 => (Some(&toks[6..14]), Some(toks[14])),
            n => {
                return Err(perr(
                    line,
                    format!("expected 6, 7, 14 or 15 fields, found {n}"),
                ))
            }
        };
        let image: u64 = num(toks[0], "image id", line)?;
        let p = TripletPrediction {
            rank: num(toks[1], "rank", line)?,
            subject: num::<Label>(toks[2], "subject", line)?,
            predicate: num::<Label>(toks[3], "predicate", line)?,
            object: num::<Label>(toks[4], "object", line)?,
            confidence: float(toks[5], line)?,
            boxes: box_toks.map(|b| boxes(b, line)).transpose()?,
            gt_id: match gt_tok {
                None | Some("-") => None,
                Some(t) => Some(num(t, "gt id", line)?),
            },
        };
        by_image.entry(image).or_default().push(p);
    }
    by_image
        .into_iter()
        .map(|(img, preds)| PredictionRecord::new(img, preds))
        .collect()
}

pub fn write_predictions(records: &[PredictionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        for p in r.predictions() {
            let _ = write!(
                out,
                "{} {} {} {} {} {:?}",
                r.image_id, p.rank, p.subject, p.predicate, p.object, p.confidence
            );
            if let Some(b) = &p.boxes {
                for v in b.subject.iter().chain(&b.object) {
                    let _ = write!(out, " {v:?}");
                }
            }
            match p.gt_id {
                Some(g) => {
                    let _ = writeln!(out, " {g}");
                }
                None => out.push_str(" -\n"),
            }
        }
    }
    out
}

pub fn parse_ground_truth(text: &str) -> Result<GroundTruth, MetricError> {
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (line, toks) in content(text) {
        if toks.len() != 5 && toks.len() != 13 {
            return Err(perr(
                line,
                format!("expected 5 or 13 fields, found {}", toks.len()),
            ));
        }
        let g = GtTriplet {
            image_id: num(toks[0], "image id", line)?,
            gt_id: num(toks[1], "gt id", line)?,
            subject: num(toks[2], "subject", line)?,
            predicate: num(toks[3], "predicate", line)?,
            object: num(toks[4], "object", line)?,
            boxes: (toks.len() == 13)
                .then(|| boxes(&toks[5..13], line))
                .transpose()?,
        };
        if !seen.insert((g.image_id, g.gt_id)) {
            return Err(perr(
                line,
                format!("gt id {} repeated in image {}", g.gt_id, g.image_id),
            ));
        }
        out.push(g);
    }
    Ok(GroundTruth::new(out))
}

pub fn write_ground_truth(gt: &GroundTruth) -> String {
    let mut out = String::new();
    for g in gt.triplets() {
        let _ = write!(
            out,
            "{} {} {} {} {}",
            g.image_id, g.gt_id, g.subject, g.predicate, g.object
        );
        if let Some(b) = &g.boxes {
            for v in b.subject.iter().chain(&b.object) {
                let _ = write!(out, " {v:?}");
            }
        }
        out.push('\n');
    }
    out
}
