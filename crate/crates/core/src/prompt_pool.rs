//! Knowledge-keyed prompt pool.
//!
//! Each entry couples a block of prompt tokens, a key living in context
//! feature space and a bounded store of exemplars. Queries pick entries by
//! cosine between their context feature and the keys, then pick one exemplar
//! per entry by cosine between relation features.
//!
//! Exemplar stores are filled by reservoir sampling: an entry keeps the first
//! `n_e` admissions, afterwards the `n`-th admission replaces a uniform slot
//! with probability `n_e / n`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::datastream::{Label, RelationInstance};
use crate::numerics::{
    cosine, random_gaussian_matrix, top_k_scored, Matrix, NumericsError, SeededRng,
};

const POOL_MAGIC: &[u8] = b"LSGG-POOL 1\n";

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("invalid pool geometry: {0}")]
    Geometry(String),
    #[error("k = {k} outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("not a pool file or unsupported version")]
    Version,
    #[error("pool file truncated or corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A stored past instance. `stage` records the stage that admitted it.
#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub f_c: Vec<f64>,
    pub f_s: Vec<f64>,
    pub f_o: Vec<f64>,
    pub f_r: Vec<f64>,
    pub predicate: Label,
    pub stage: u32,
}

impl Exemplar {
    pub fn from_instance(inst: &RelationInstance, stage: u32) -> Self {
        Self {
            f_c: inst.f_c.clone(),
            f_s: inst.f_s.clone(),
            f_o: inst.f_o.clone(),
            f_r: inst.f_r.clone(),
            predicate: inst.predicate,
            stage,
        }
    }

    /// True when both carry the same relation and context features, i.e.
    /// `self` was admitted from `inst`.
    pub fn is_copy_of(&self, f_c: &[f64], f_r: &[f64]) -> bool {
        self.f_r == f_r && self.f_c == f_c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEntry {
    /// `n_p × d_tok` prompt tokens.
    pub prompt: Matrix,
    pub key: Vec<f64>,
    pub exemplars: Vec<Exemplar>,
    pub seen_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptPool {
    entries: Vec<PromptEntry>,
    n_p: usize,
    d_tok: usize,
    d_c: usize,
    n_e: usize,
}

impl PromptPool {
    /// Random unit keys, `N(0, 1/d_tok)` prompt tokens, empty stores.
    pub fn init(
        n_t: usize,
        n_p: usize,
        d_tok: usize,
        d_c: usize,
        n_e: usize,
        rng: &mut SeededRng,
    ) -> Result<Self, PoolError> {
        if n_t == 0 || n_p == 0 || d_tok == 0 || d_c == 0 || n_e == 0 {
            return Err(PoolError::Geometry("all pool sizes must be >= 1".into()));
        }
        let scale = 1.0 / (d_tok as f64).sqrt();
        let entries = (0..n_t)
            .map(|_| PromptEntry {
                prompt: random_gaussian_matrix(n_p, d_tok, scale, rng),
                key: rng.unit_vector(d_c),
                exemplars: Vec::with_capacity(n_e),
                seen_count: 0,
            })
            .collect();
        Ok(Self {
            entries,
            n_p,
            d_tok,
            d_c,
            n_e,
        })
    }

    pub fn entries(&self) -> &[PromptEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &PromptEntry {
        &self.entries[i]
    }

    pub fn entries_mut(&mut self) -> &mut [PromptEntry] {
        &mut self.entries
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut PromptEntry {
        &mut self.entries[i]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_p(&self) -> usize {
        self.n_p
    }

    pub fn d_tok(&self) -> usize {
        self.d_tok
    }

    pub fn d_c(&self) -> usize {
        self.d_c
    }

    pub fn n_e(&self) -> usize {
        self.n_e
    }

    pub fn capacity(&self) -> usize {
        self.entries.len() * self.n_e
    }

    pub fn stored(&self) -> usize {
        self.entries.iter().map(|e| e.exemplars.len()).sum()
    }

    pub fn exemplars(&self) -> impl Iterator<Item = (usize, &Exemplar)> {
        self.entries
            .iter()
            .enumerate()
            .flat_map(|(i, e)| e.exemplars.iter().map(move |x| (i, x)))
    }

    /// Top-`k` entries by cosine between `f_c` and the keys, most similar first.
    pub fn retrieve_topk_prompts(
        &self,
        f_c: &[f64],
        k: usize,
    ) -> Result<Vec<(usize, f64)>, PoolError> {
        if k == 0 || k > self.entries.len() {
            return Err(PoolError::KOutOfRange {
                k,
                n: self.entries.len(),
            });
        }
        let keys: Vec<&[f64]> = self.entries.iter().map(|e| e.key.as_slice()).collect();
        Ok(top_k_scored(f_c, &keys, k)?)
    }

    /// Nearest entry for admission routing.
    pub fn nearest_entry(&self, f_c: &[f64]) -> Result<usize, PoolError> {
        Ok(self.retrieve_topk_prompts(f_c, 1)?[0].0)
    }

    /// Checks `|E| <= n_e` for every entry and prompt shapes.
    pub fn check_capacity(&self) -> Result<(), PoolError> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.exemplars.len() > self.n_e {
                return Err(PoolError::Geometry(format!(
                    "entry {i} holds {} > {} exemplars",
                    e.exemplars.len(),
                    self.n_e
                )));
            }
            if e.prompt.rows() != self.n_p
                || e.prompt.cols() != self.d_tok
                || e.key.len() != self.d_c
            {
                return Err(PoolError::Geometry(format!("entry {i} has wrong shape")));
            }
        }
        Ok(())
    }

    /// Routes `instance` to its nearest-key entry and applies the reservoir
    /// rule there. Returns the entry index if the instance was stored.
    pub fn admit_exemplar(
        &mut self,
        instance: &RelationInstance,
        stage: u32,
        rng: &mut SeededRng,
    ) -> Result<Option<usize>, PoolError> {
        let idx = self.nearest_entry(&instance.f_c)?;
        let n_e = self.n_e;
        let entry = &mut self.entries[idx];
        entry.seen_count += 1;
        let ex = Exemplar::from_instance(instance, stage);
        if entry.exemplars.len() < n_e {
            entry.exemplars.push(ex);
            return Ok(Some(idx));
        }
        // Keep with probability n_e / seen_count.
        let j = (rng.uniform() * entry.seen_count as f64) as u64;
        if (j as usize) < n_e {
            let slot = rng.below(n_e);
            entry.exemplars[slot] = ex;
            Ok(Some(idx))
        } else {
            Ok(None)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PoolError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PoolError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    /// Binary layout: magic, five `u64` sizes, then per entry the prompt,
    /// key, `seen_count`, exemplar count and exemplars. Little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), PoolError> {
        w.write_all(POOL_MAGIC)?;
        let d_r = self
            .exemplars()
            .next()
            .map(|(_, e)| e.f_r.len())
            .unwrap_or(0);
        let d_o = self
            .exemplars()
            .next()
            .map(|(_, e)| e.f_s.len())
            .unwrap_or(0);
        for v in [
            self.entries.len(),
            self.n_p,
            self.d_tok,
            self.d_c,
            self.n_e,
            d_r,
            d_o,
        ] {
            put_u64(w, v as u64)?;
        }
        for e in &self.entries {
            put_f64s(w, e.prompt.as_slice())?;
            put_f64s(w, &e.key)?;
            put_u64(w, e.seen_count)?;
            put_u64(w, e.exemplars.len() as u64)?;
            for x in &e.exemplars {
                if x.f_r.len() != d_r
                    || x.f_s.len() != d_o
                    || x.f_o.len() != d_o
                    || x.f_c.len() != self.d_c
                {
                    return Err(PoolError::Geometry(
                        "exemplar dimensions are inconsistent".into(),
                    ));
                }
                put_u64(w, u64::from(x.predicate))?;
                put_u64(w, u64::from(x.stage))?;
                for f in [&x.f_c, &x.f_s, &x.f_o, &x.f_r] {
                    put_f64s(w, f)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, PoolError> {
        let mut magic = [0u8; POOL_MAGIC.len()];
        r.read_exact(&mut magic).map_err(|_| PoolError::Version)?;
        if magic != POOL_MAGIC {
            return Err(PoolError::Version);
        }
        let mut sizes = [0usize; 7];
        for s in &mut sizes {
            *s = get_u64(r)? as usize;
        }
        let [n_t, n_p, d_tok, d_c, n_e, d_r, d_o] = sizes;
        if n_t == 0 || n_p == 0 || d_tok == 0 || d_c == 0 || n_e == 0 || n_t > 1 << 24 {
            return Err(PoolError::Corrupt("bad geometry".into()));
        }
        let mut entries = Vec::with_capacity(n_t);
        for _ in 0..n_t {
            let prompt = Matrix::from_vec(n_p, d_tok, get_f64s(r, n_p * d_tok)?)?;
            let key = get_f64s(r, d_c)?;
            let seen_count = get_u64(r)?;
            let count = get_u64(r)? as usize;
            if count > n_e {
                return Err(PoolError::Corrupt(format!(
                    "{count} exemplars exceed capacity {n_e}"
                )));
            }
            let mut exemplars = Vec::with_capacity(count);
            for _ in 0..count {
                let predicate = get_u64(r)? as Label;
                let stage = get_u64(r)? as u32;
                let f_c = get_f64s(r, d_c)?;
                let f_s = get_f64s(r, d_o)?;
                let f_o = get_f64s(r, d_o)?;
                let f_r = get_f64s(r, d_r)?;
                exemplars.push(Exemplar {
                    f_c,
                    f_s,
                    f_o,
                    f_r,
                    predicate,
                    stage,
                });
            }
            entries.push(PromptEntry {
                prompt,
                key,
                exemplars,
                seen_count,
            });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(PoolError::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            entries,
            n_p,
            d_tok,
            d_c,
            n_e,
        })
    }
}

/// Exemplar in `entry` closest to `f_r`; earliest slot wins ties.
pub fn retrieve_exemplar<'a>(entry: &'a PromptEntry, f_r: &[f64]) -> Option<&'a Exemplar> {
    retrieve_exemplar_excluding(entry, f_r, |_| false)
}

/// Like [`retrieve_exemplar`], skipping exemplars for which `skip` holds.
pub fn retrieve_exemplar_excluding<'a>(
    entry: &'a PromptEntry,
    f_r: &[f64],
    skip: impl Fn(&Exemplar) -> bool,
) -> Option<&'a Exemplar> {
    nearest_exemplar_slot(entry, f_r, skip).map(|i| &entry.exemplars[i])
}

/// Slot index of the exemplar [`retrieve_exemplar_excluding`] would return.
pub fn nearest_exemplar_slot(
    entry: &PromptEntry,
    f_r: &[f64],
    skip: impl Fn(&Exemplar) -> bool,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, ex) in entry.exemplars.iter().enumerate() {
        if skip(ex) {
            continue;
        }
        // Degenerate (zero-norm) exemplars are never returned.
        let Ok(sim) = cosine(f_r, &ex.f_r) else {
            continue;
        };
        if best.is_none_or(|(_, s)| sim > s) {
            best = Some((i, sim));
        }
    }
    best.map(|(i, _)| i)
}

/// Rehearsal buffer for non-prompt baselines: with `M` predicates seen it
/// keeps at most `budget / M` exemplars per predicate, reservoir-sampled
/// within each predicate, and shrinks older classes as `M` grows.
#[derive(Debug, Clone)]
pub struct ClassBalancedBuffer {
    budget: usize,
    classes: BTreeMap<Label, (u64, Vec<Exemplar>)>,
}

impl ClassBalancedBuffer {
    pub fn new(budget: usize) -> Self {
        Self {
            budget,
            classes: BTreeMap::new(),
        }
    }

    pub fn per_class_cap(&self) -> usize {
        if self.classes.is_empty() {
            self.budget
        } else {
            self.budget / self.classes.len()
        }
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(|(_, v)| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_len(&self, label: Label) -> usize {
        self.classes.get(&label).map_or(0, |(_, v)| v.len())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Exemplar> {
        self.classes.values().flat_map(|(_, v)| v.iter())
    }

    pub fn admit(&mut self, ex: Exemplar, rng: &mut SeededRng) {
        let is_new = !self.classes.contains_key(&ex.predicate);
        if is_new {
            self.classes.insert(ex.predicate, (0, Vec::new()));
            let cap = self.per_class_cap();
            for (_, items) in self.classes.values_mut() {
                while items.len() > cap {
                    let drop = rng.below(items.len());
                    items.swap_remove(drop);
                }
            }
        }
        let cap = self.per_class_cap();
        let (seen, items) = self
            .classes
            .get_mut(&ex.predicate)
            .expect("class inserted above");
        *seen += 1;
        if items.len() < cap {
            items.push(ex);
        } else if cap > 0 {
            let j = (rng.uniform() * *seen as f64) as usize;
            if j < cap {
                let slot = rng.below(items.len());
                items[slot] = ex;
            }
        }
    }
}

pub(crate) fn put_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn put_f64s<W: Write>(w: &mut W, vs: &[f64]) -> std::io::Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn get_u64<R: Read>(r: &mut R) -> Result<u64, PoolError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| PoolError::Corrupt(format!("unexpected end of data: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, PoolError> {
    (0..n)
        .map(|_| {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|e| PoolError::Corrupt(format!("unexpected end of data: {e}")))?;
            Ok(f64::from_le_bytes(b))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, norm};

    fn instance(f_c: Vec<f64>, f_r: Vec<f64>, predicate: Label) -> RelationInstance {
        RelationInstance {
            image_id: 0,
            f_c,
            f_r,
            f_s: vec![1.0, 0.0],
            f_o: vec![0.0, 1.0],
            subject_class: 0,
            object_class: 0,
            predicate,
            boxes: None,
            confidence: None,
        }
    }

    fn brute_top_k(pool: &PromptPool, q: &[f64], k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = pool
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| (i, dot(q, &e.key) / (norm(q) * norm(&e.key))))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn init_geometry() {
        let pool = PromptPool::init(100, 8, 16, 12, 20, &mut SeededRng::new(1)).unwrap();
        assert_eq!(pool.capacity(), 2000);
        assert_eq!(pool.stored(), 0);
        for e in pool.entries() {
            assert!((norm(&e.key) - 1.0).abs() < 1e-12);
            assert_eq!(e.prompt.rows(), 8);
        }
        let one = PromptPool::init(1, 8, 16, 12, 20, &mut SeededRng::new(1)).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one.entry(0).exemplars.is_empty());
        let again = PromptPool::init(100, 8, 16, 12, 20, &mut SeededRng::new(1)).unwrap();
        assert_eq!(pool, again);
        assert!(PromptPool::init(0, 8, 16, 12, 20, &mut SeededRng::new(1)).is_err());
    }

    #[test]
    fn retrieval_examples() {
        let mut pool = PromptPool::init(4, 2, 4, 4, 3, &mut SeededRng::new(2)).unwrap();
        for (i, e) in pool.entries.iter_mut().enumerate() {
            e.key = vec![0.0; 4];
            e.key[i] = 1.0;
        }
        let got = pool
            .retrieve_topk_prompts(&[0.0, 0.0, 1.0, 0.0], 1)
            .unwrap();
        assert_eq!(got, vec![(2, 1.0)]);

        for e in pool.entries.iter_mut() {
            e.key = vec![1.0, 1.0, 0.0, 0.0];
        }
        let got = pool
            .retrieve_topk_prompts(&[1.0, 0.0, 0.0, 0.0], 4)
            .unwrap();
        assert_eq!(
            got.iter().map(|p| p.0).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
        assert!(got.windows(2).all(|w| w[0].1 == w[1].1));
        assert!(pool
            .retrieve_topk_prompts(&[1.0, 0.0, 0.0, 0.0], 5)
            .is_err());
        assert!(pool
            .retrieve_topk_prompts(&[1.0, 0.0, 0.0, 0.0], 0)
            .is_err());
    }

    #[test]
    fn retrieval_matches_brute_force_and_does_not_mutate() {
        let mut rng = SeededRng::new(3);
        let pool = PromptPool::init(40, 2, 4, 8, 3, &mut rng).unwrap();
        let before = pool.clone();
        let q = rng.unit_vector(8);
        assert_eq!(
            pool.retrieve_topk_prompts(&q, 5).unwrap(),
            brute_top_k(&pool, &q, 5)
        );
        let all = pool.retrieve_topk_prompts(&q, 40).unwrap();
        assert_eq!(pool.retrieve_topk_prompts(&q, 1).unwrap()[0], all[0]);
        assert_eq!(pool, before);
    }

    #[test]
    fn exemplar_retrieval() {
        let mut rng = SeededRng::new(4);
        let mut entry = PromptEntry {
            prompt: Matrix::zeros(1, 1),
            key: vec![1.0],
            exemplars: vec![],
            seen_count: 0,
        };
        assert!(retrieve_exemplar(&entry, &[1.0, 0.0]).is_none());
        for p in 0..50 {
            let inst = instance(vec![1.0], rng.unit_vector(6), p);
            entry.exemplars.push(Exemplar::from_instance(&inst, 0));
        }
        let q = entry.exemplars[17].f_r.clone();
        assert_eq!(retrieve_exemplar(&entry, &q).unwrap().predicate, 17);

        let q = rng.unit_vector(6);
        let (mut best, mut best_sim) = (0, f64::NEG_INFINITY);
        for (i, e) in entry.exemplars.iter().enumerate() {
            let s = dot(&q, &e.f_r) / (norm(&q) * norm(&e.f_r));
            if s > best_sim {
                best = i;
                best_sim = s;
            }
        }
        assert_eq!(
            retrieve_exemplar(&entry, &q).unwrap(),
            &entry.exemplars[best]
        );

        // Ties go to the earliest slot.
        entry.exemplars[3].f_r = entry.exemplars[9].f_r.clone();
        let q = entry.exemplars[9].f_r.clone();
        assert_eq!(retrieve_exemplar(&entry, &q).unwrap().predicate, 3);
        let skipped = retrieve_exemplar_excluding(&entry, &q, |e| e.predicate == 3).unwrap();
        assert_eq!(skipped.predicate, 9);
    }

    #[test]
    fn first_admission_goes_to_nearest_key() {
        let mut rng = SeededRng::new(5);
        let mut pool = PromptPool::init(10, 2, 4, 6, 3, &mut rng).unwrap();
        let target = pool.entry(7).key.clone();
        let got = pool
            .admit_exemplar(&instance(target, vec![1.0, 2.0], 1), 0, &mut rng)
            .unwrap();
        assert_eq!(got, Some(7));
        assert_eq!(pool.entry(7).exemplars.len(), 1);
        assert_eq!(pool.stored(), 1);
    }

    #[test]
    fn single_entry_counts() {
        let mut rng = SeededRng::new(6);
        let mut pool = PromptPool::init(1, 2, 4, 3, 5, &mut rng).unwrap();
        for n in 1..=40u64 {
            let inst = instance(rng.unit_vector(3), rng.unit_vector(4), n as Label);
            pool.admit_exemplar(&inst, 0, &mut rng).unwrap();
            assert_eq!(pool.entry(0).seen_count, n);
            assert_eq!(pool.entry(0).exemplars.len(), (n as usize).min(5));
            pool.check_capacity().unwrap();
        }
    }

    #[test]
    fn second_admission_kept_half_the_time() {
        let trials = 10_000;
        let mut kept = 0;
        for t in 0..trials {
            let mut rng = SeededRng::new(1_000 + t);
            let mut pool = PromptPool::init(1, 1, 2, 2, 1, &mut rng).unwrap();
            pool.admit_exemplar(&instance(vec![1.0, 0.0], vec![1.0, 0.0], 0), 0, &mut rng)
                .unwrap();
            pool.admit_exemplar(&instance(vec![1.0, 0.0], vec![0.0, 1.0], 1), 0, &mut rng)
                .unwrap();
            if pool.entry(0).exemplars[0].predicate == 1 {
                kept += 1;
            }
        }
        let p = kept as f64 / trials as f64;
        let sigma = (0.25 / trials as f64).sqrt();
        assert!((p - 0.5).abs() <= 3.0 * sigma, "keep rate {p}");
    }

    #[test]
    fn pool_round_trip() {
        let mut rng = SeededRng::new(8);
        let fresh = PromptPool::init(5, 3, 4, 6, 4, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.bin");
        fresh.save(&path).unwrap();
        assert_eq!(PromptPool::load(&path).unwrap(), fresh);

        let mut full = PromptPool::init(100, 8, 8, 6, 20, &mut rng).unwrap();
        for i in 0..2000 {
            full.entry_mut(i % 100).exemplars.push(Exemplar {
                f_c: rng.unit_vector(6),
                f_s: rng.unit_vector(3),
                f_o: rng.unit_vector(3),
                f_r: rng.unit_vector(5),
                predicate: (i % 50) as Label,
                stage: (i % 5) as u32,
            });
        }
        full.entry_mut(3).seen_count = 12345;
        assert_eq!(full.stored(), 2000);
        full.save(&path).unwrap();
        assert_eq!(PromptPool::load(&path).unwrap(), full);

        let bytes = std::fs::read(&path).unwrap();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            PromptPool::read_from(&mut &truncated[..]),
            Err(PoolError::Corrupt(_))
        ));
        let mut wrong = bytes.clone();
        wrong[10] = b'2';
        assert!(matches!(
            PromptPool::read_from(&mut &wrong[..]),
            Err(PoolError::Version)
        ));
    }

    #[test]
    fn class_balanced_buffer_shrinks_with_new_classes() {
        let mut rng = SeededRng::new(9);
        let mut buf = ClassBalancedBuffer::new(20);
        let ex = |p: Label, rng: &mut SeededRng| Exemplar {
            f_c: rng.unit_vector(2),
            f_s: vec![1.0],
            f_o: vec![1.0],
            f_r: rng.unit_vector(2),
            predicate: p,
            stage: 0,
        };
        for _ in 0..50 {
            let e = ex(0, &mut rng);
            buf.admit(e, &mut rng);
        }
        assert_eq!(buf.class_len(0), 20);
        for p in 1..4 {
            for _ in 0..30 {
                let e = ex(p, &mut rng);
                buf.admit(e, &mut rng);
            }
        }
        assert_eq!(buf.per_class_cap(), 5);
        for p in 0..4 {
            assert_eq!(buf.class_len(p), 5);
        }
        assert!(buf.len() <= 20);
    }
}
