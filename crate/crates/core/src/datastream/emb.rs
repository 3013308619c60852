//! `LSGG-EMB 1` text format.
//!
//! ```text
//! LSGG-EMB 1 <d_c> <d_r> <d_o> <n_obj> <n_pred>
//! <image_id> <subj> <obj> <pred> <has_boxes> [8 box floats] <confidence|-> f_c.. f_r.. f_s.. f_o..
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! save/load cycle reproduces every value bit-for-bit. Lines starting with
//! `#` are comments.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{BoxPair, DataError, Label, RelationInstance};

const MAGIC: &str = "LSGG-EMB";
const VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbHeader {
    pub d_c: usize,
    pub d_r: usize,
    pub d_o: usize,
    pub n_obj: usize,
    pub n_pred: usize,
}

pub fn write_embeddings<W: Write>(
    mut out: W,
    header: &EmbHeader,
    dataset: &[RelationInstance],
) -> Result<(), DataError> {
    writeln!(
        out,
        "{MAGIC} {VERSION} {} {} {} {} {}",
        header.d_c, header.d_r, header.d_o, header.n_obj, header.n_pred
    )?;
    let mut line = String::new();
    for inst in dataset {
        check_dims(header, inst).map_err(DataError::Instance)?;
        line.clear();
        use std::fmt::Write as _;
        let _ = write!(
            line,
            "{} {} {} {} ",
            inst.image_id, inst.subject_class, inst.object_class, inst.predicate
        );
        match &inst.boxes {
            Some(b) => {
                line.push('1');
                for v in b.subject.iter().chain(&b.object) {
                    let _ = write!(line, " {v:?}");
                }
            }
            None => line.push('0'),
        }
        match inst.confidence {
            Some(c) => {
                let _ = write!(line, " {c:?}");
            }
            None => line.push_str(" -"),
        }
        for f in [&inst.f_c, &inst.f_r, &inst.f_s, &inst.f_o] {
            for v in f.iter() {
                let _ = write!(line, " {v:?}");
            }
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn check_dims(h: &EmbHeader, inst: &RelationInstance) -> Result<(), String> {
    if inst.f_c.len() != h.d_c
        || inst.f_r.len() != h.d_r
        || inst.f_s.len() != h.d_o
        || inst.f_o.len() != h.d_o
    {
        return Err("feature dimensions do not match the header".into());
    }
    if inst.subject_class as usize >= h.n_obj || inst.object_class as usize >= h.n_obj {
        return Err("object class outside vocabulary".into());
    }
    if inst.predicate as usize >= h.n_pred {
        return Err(format!("predicate {} outside vocabulary", inst.predicate));
    }
    Ok(())
}

fn parse_header(line: &str) -> Result<EmbHeader, DataError> {
    let err = |msg: String| DataError::Parse { line: 1, msg };
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.first() != Some(&MAGIC) {
        return Err(err(format!("expected {MAGIC} header")));
    }
    if toks.get(1) != Some(&VERSION) {
        return Err(err(format!("unsupported version {:?}", toks.get(1))));
    }
    if toks.len() != 7 {
        return Err(err("header needs 5 integers after the version".into()));
    }
    let nums = toks[2..]
        .iter()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|e| err(format!("bad header field {t:?}: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EmbHeader {
        d_c: nums[0],
        d_r: nums[1],
        d_o: nums[2],
        n_obj: nums[3],
        n_pred: nums[4],
    })
}

fn parse_record(h: &EmbHeader, line: &str, lineno: usize) -> Result<RelationInstance, DataError> {
    let err = |msg: String| DataError::Parse { line: lineno, msg };
    let mut toks = line.split_whitespace();
    let mut next = |what: &str| toks.next().ok_or_else(|| err(format!("missing {what}")));

    fn int<T: std::str::FromStr>(t: &str, what: &str, lineno: usize) -> Result<T, DataError>
    where
        T::Err: std::fmt::Display,
    {
        t.parse::<T>().map_err(|e| DataError::Parse {
            line: lineno,
            msg: format!("bad {what} {t:?}: {e}"),
        })
    }
    fn float(t: &str, lineno: usize) -> Result<f64, DataError> {
        let v: f64 = t.parse().map_err(|e| DataError::Parse {
            line: lineno,
            msg: format!("bad float {t:?}: {e}"),
        })?;
        if !v.is_finite() {
            return Err(DataError::Parse {
                line: lineno,
                msg: format!("non-finite value {t:?}"),
            });
        }
        Ok(v)
    }

    let image_id: u64 = int(next("image_id")?, "image_id", lineno)?;
    let subject_class: Label = int(next("subject class")?, "subject class", lineno)?;
    let object_class: Label = int(next("object class")?, "object class", lineno)?;
    let predicate: Label = int(next("predicate")?, "predicate", lineno)?;
    let boxes = match next("has_boxes")? {
        "0" => None,
        "1" => {
            let mut v = [0.0; 8];
            for slot in &mut v {
                *slot = float(next("box coordinate")?, lineno)?;
            }
            Some(BoxPair {
                subject: [v[0], v[1], v[2], v[3]],
                object: [v[4], v[5], v[6], v[7]],
            })
        }
        other => return Err(err(format!("has_boxes must be 0 or 1, got {other:?}"))),
    };
    let confidence = match next("confidence")? {
        "-" => None,
        t => Some(float(t, lineno)?),
    };
    let rest: Vec<&str> = toks.collect();
    let want = h.d_c + h.d_r + 2 * h.d_o;
    if rest.len() != want {
        return Err(err(format!(
            "expected {want} feature values, found {}",
            rest.len()
        )));
    }
    let values = rest
        .iter()
        .map(|t| float(t, lineno))
        .collect::<Result<Vec<_>, _>>()?;
    let (f_c, tail) = values.split_at(h.d_c);
    let (f_r, tail) = tail.split_at(h.d_r);
    let (f_s, f_o) = tail.split_at(h.d_o);
    let inst = RelationInstance {
        image_id,
        f_c: f_c.to_vec(),
        f_r: f_r.to_vec(),
        f_s: f_s.to_vec(),
        f_o: f_o.to_vec(),
        subject_class,
        object_class,
        predicate,
        boxes,
        confidence,
    };
    check_dims(h, &inst).map_err(err)?;
    inst.validate().map_err(|e| err(e.to_string()))?;
    Ok(inst)
}

pub fn read_embeddings<R: Read>(input: R) -> Result<(EmbHeader, Vec<RelationInstance>), DataError> {
    let reader = BufReader::new(input);
    let mut header = None;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match &header {
            None => {
                header = Some(parse_header(trimmed).map_err(|e| match e {
                    DataError::Parse { msg, .. } => DataError::Parse { line: lineno, msg },
                    other => other,
                })?)
            }
            Some(h) => out.push(parse_record(h, trimmed, lineno)?),
        }
    }
    let header = header.ok_or(DataError::Parse {
        line: 0,
        msg: "missing header".into(),
    })?;
    Ok((header, out))
}

pub fn save_embeddings(
    dataset: &[RelationInstance],
    header: &EmbHeader,
    path: impl AsRef<Path>,
) -> Result<(), DataError> {
    let f = File::create(path)?;
    write_embeddings(BufWriter::new(f), header, dataset)
}

pub fn load_embeddings(
    path: impl AsRef<Path>,
) -> Result<(EmbHeader, Vec<RelationInstance>), DataError> {
    read_embeddings(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastream::{synth_generate, SynthConfig};
    use crate::numerics::SeededRng;

    fn header(d_c: usize) -> EmbHeader {
        EmbHeader {
            d_c,
            d_r: 2,
            d_o: 2,
            n_obj: 5,
            n_pred: 5,
        }
    }

    #[test]
    fn empty_round_trip() {
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &header(3), &[]).unwrap();
        let (h, data) = read_embeddings(&buf[..]).unwrap();
        assert_eq!(h, header(3));
        assert!(data.is_empty());
    }

    #[test]
    fn generated_round_trip_is_exact() {
        let cfg = SynthConfig {
            total_n: 100,
            ..SynthConfig::default()
        };
        let mut out = synth_generate(&cfg, &mut SeededRng::new(3)).unwrap();
        out.dataset[0].confidence = Some(0.123456789012345);
        out.dataset[1].f_c[0] = 1e-300;
        let h = EmbHeader {
            d_c: cfg.d_c,
            d_r: cfg.d_r,
            d_o: cfg.d_o,
            n_obj: cfg.n_obj,
            n_pred: cfg.n_pred,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.emb");
        save_embeddings(&out.dataset, &h, &path).unwrap();
        let (h2, back) = load_embeddings(&path).unwrap();
        assert_eq!(h2, h);
        assert_eq!(back, out.dataset);
    }

    #[test]
    fn short_record_reports_its_line() {
        let text = "# comment\nLSGG-EMB 1 4 2 2 5 5\n0 1 2 3 0 - 1 2 3 4 1 2 1 2 1 2\n0 1 2 3 0 - 1 2 3 1 2 1 2 1 2\n";
        match read_embeddings(text.as_bytes()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_header_and_non_finite() {
        assert!(matches!(
            read_embeddings("LSGG-EMB 2 1 1 1 1 1\n".as_bytes()),
            Err(DataError::Parse { line: 1, .. })
        ));
        let text = "LSGG-EMB 1 2 2 2 5 5\n0 1 2 3 0 - 1 NaN 1 1 1 1 1 1\n";
        assert!(matches!(
            read_embeddings(text.as_bytes()),
            Err(DataError::Parse { line: 2, .. })
        ));
        let text = "LSGG-EMB 1 2 2 2 5 5\n0 1 2 9 0 - 1 1 1 1 1 1 1 1\n";
        assert!(read_embeddings(text.as_bytes()).is_err());
    }

    #[test]
    fn d_c_64_with_63_values_fails_on_that_record() {
        let vals = |n: usize| vec!["0.5"; n].join(" ");
        let text = format!(
            "LSGG-EMB 1 64 2 2 3 3\n0 0 0 0 0 - {} {}\n1 0 0 0 0 - {} {}\n",
            vals(64),
            vals(6),
            vals(63),
            vals(6)
        );
        match read_embeddings(text.as_bytes()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
