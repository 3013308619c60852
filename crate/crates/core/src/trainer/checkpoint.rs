//! `LSGG-CKPT 1` checkpoints.
//!
//! ```text
//! LSGG-CKPT 1
//! pool <file name, relative to the checkpoint>
//! config <n bytes>
//! <config echo>
//! vocab <n bytes>
//! <predicate vocabulary file>
//! mapper <d_tok> <depth> <n_c> <n_r> <n_s> <n_o> <d_c> <d_r> <d_s> <d_o>
//! scorer <V> <label_len> <max_len> <learn_positions 0|1>
//! tensors <count>
//! ```
//!
//! followed by `count` tensors, each a little-endian `u64` length and that
//! many little-endian `f64`. Tensor order is the mapper's, then the mask
//! rows, then the scorer's. Prompts and keys live in the referenced pool file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Model, TrainError};
use crate::numerics::Matrix;
use crate::prompt_pool::{get_f64s, get_u64, put_f64s, put_u64, PromptPool};
use crate::scorer::{PredicateVocab, ScorerParams};
use crate::token_mapper::{MapperConfig, MapperParams, TokenCounts};

const MAGIC: &str = "LSGG-CKPT 1";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const POOL_FILE: &str = "pool.lsgg";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config_echo: String,
}

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(
    w: &mut W,
    model: &Model,
    config_echo: &str,
    pool_ref: &str,
) -> Result<(), TrainError> {
    if pool_ref.is_empty() || pool_ref.contains(['/', '\\', '\n']) {
        return Err(bad("pool reference must be a plain file name"));
    }
    let cfg = model.mapper.config();
    let vocab = model.vocab.to_text();
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "pool {pool_ref}")?;
    writeln!(w, "config {}", config_echo.len())?;
    w.write_all(config_echo.as_bytes())?;
    writeln!(w, "vocab {}", vocab.len())?;
    w.write_all(vocab.as_bytes())?;
    let c = cfg.counts;
    writeln!(
        w,
        "mapper {} {} {} {} {} {} {} {} {} {}",
        cfg.d_tok,
        cfg.depth,
        c.context,
        c.relation,
        c.subject,
        c.object,
        cfg.dims[0],
        cfg.dims[1],
        cfg.dims[2],
        cfg.dims[3]
    )?;
    let s = &model.scorer;
    writeln!(
        w,
        "scorer {} {} {} {}",
        s.vocab_size(),
        s.label_len(),
        s.positions.len(),
        u8::from(s.learn_positions)
    )?;
    let mut tensors = model.mapper.tensors();
    tensors.push(model.mask.as_slice());
    tensors.extend(s.tensors());
    writeln!(w, "tensors {}", tensors.len())?;
    for t in tensors {
        put_u64(w, t.len() as u64)?;
        put_f64s(w, t)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str, TrainError> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
    }

    fn field(&mut self, name: &str) -> Result<Vec<&'a str>, TrainError> {
        let line = self.line()?;
        let mut toks = line.split(' ');
        if toks.next() != Some(name) {
            return Err(bad(format!("expected `{name}` line, found {line:?}")));
        }
        Ok(toks.collect())
    }

    fn numbers(&mut self, name: &str, n: usize) -> Result<Vec<usize>, TrainError> {
        let toks = self.field(name)?;
        if toks.len() != n {
            return Err(bad(format!("`{name}` needs {n} values")));
        }
        toks.iter()
            .map(|t| {
                t.parse()
                    .map_err(|_| bad(format!("bad number {t:?} in `{name}`")))
            })
            .collect()
    }

    fn blob(&mut self, name: &str) -> Result<&'a str, TrainError> {
        let n = self.numbers(name, 1)?[0];
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad("truncated"))?;
        let s = std::str::from_utf8(&self.bytes[self.pos..end])
            .map_err(|_| bad("text is not UTF-8"))?;
        self.pos = end;
        Ok(s)
    }
}

/// Parses a checkpoint; `load_pool` resolves the pool reference.
pub fn read_checkpoint(
    bytes: &[u8],
    load_pool: impl FnOnce(&str) -> Result<PromptPool, TrainError>,
) -> Result<Checkpoint, TrainError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.line()? != MAGIC {
        return Err(bad("not an LSGG-CKPT 1 file"));
    }
    let pool_ref = c.field("pool")?.join(" ");
    let config_echo = c.blob("config")?.to_string();
    let vocab = PredicateVocab::parse(c.blob("vocab")?)?;
    let m = c.numbers("mapper", 10)?;
    let mapper_cfg = MapperConfig {
        d_tok: m[0],
        depth: m[1],
        counts: TokenCounts {
            context: m[2],
            relation: m[3],
            subject: m[4],
            object: m[5],
        },
        dims: [m[6], m[7], m[8], m[9]],
    };
    let sc = c.numbers("scorer", 4)?;
    let mut mapper = MapperParams::zeros(mapper_cfg)?;
    let d = mapper_cfg.d_tok;
    let mut scorer = ScorerParams {
        embed: Matrix::zeros(sc[0], d),
        readout: vec![Matrix::zeros(sc[0], d); sc[1]],
        positions: vec![0.0; sc[2]],
        learn_positions: sc[3] == 1,
    };
    let mut mask = Matrix::zeros(sc[1], d);
    if vocab.vocab_size() != sc[0] || vocab.label_len() != sc[1] {
        return Err(bad("scorer shape disagrees with the vocabulary"));
    }
    let count = c.numbers("tensors", 1)?[0];
    let mut rest = &bytes[c.pos..];
    {
        let mut targets = mapper.tensors_mut();
        targets.push(mask.as_mut_slice());
        targets.extend(scorer.tensors_mut());
        if targets.len() != count {
            return Err(bad(format!(
                "expected {} tensors, file has {count}",
                targets.len()
            )));
        }
        for t in targets {
            let n = get_u64(&mut rest)? as usize;
            if n != t.len() {
                return Err(bad(format!(
                    "tensor of {n} values where {} expected",
                    t.len()
                )));
            }
            t.copy_from_slice(&get_f64s(&mut rest, n)?);
        }
    }
    if !rest.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let pool = load_pool(&pool_ref)?;
    if pool.d_tok() != d || pool.d_c() != mapper_cfg.dims[0] {
        return Err(bad("pool geometry disagrees with the mapper"));
    }
    Ok(Checkpoint {
        model: Model {
            mapper,
            pool,
            mask,
            scorer,
            vocab,
        },
        config_echo,
    })
}

/// Writes `model.ckpt` and its pool into `dir`; returns the checkpoint path.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &Model,
    config_echo: &str,
) -> Result<PathBuf, TrainError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    model.pool.save(dir.join(POOL_FILE))?;
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model, config_echo, POOL_FILE)?;
    let path = dir.join(CHECKPOINT_FILE);
    fs::write(&path, buf)?;
    Ok(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    read_checkpoint(&bytes, |name| Ok(PromptPool::load(dir.join(name))?))
}
