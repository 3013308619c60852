//! Losses, analytic gradients and the per-stage training loop.
//!
//! The total loss of one query is `α·L1 + λ·L2 + L3`:
//!
//! * `L1` is an optional auxiliary term, `mean_t (‖t‖² − 1)²` over the query
//!   tokens, off by default.
//! * `L2 = Σ_i (1 − cos(f_c, k_i))` over the keys of the retrieved entries.
//!   Rehearsal items skip it.
//! * `L3` is the per-slot cross-entropy of the target predicate's tokens.
//!
//! Retrieval (which entries, which exemplars, in which order) is decided up
//! front by [`plan_query`] and held fixed through the backward pass.

pub mod checkpoint;

use thiserror::Error;

use crate::datastream::{Label, RelationInstance, StageDataset};
use crate::numerics::{axpy, cosine, dot, norm, Matrix, NumericsError, SeededRng};
use crate::prompt_pool::{nearest_exemplar_slot, Exemplar, PoolError, PromptPool};
use crate::scorer::{
    assemble_prompt, backward_score, score_traced, ContextItem, PredicateVocab, ScorerError,
    ScorerParams, SegmentOrder, SegmentSource, PAD_TOKEN,
};
use crate::token_mapper::{
    backward_exemplar, encode_exemplar_traced, ExemplarTrace, FeatureSet, MapperConfig,
    MapperError, MapperParams, TokenCounts,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("stage {0} has no training data")]
    EmptyStage(usize),
    #[error("non-finite loss at step {step}: l1={l1} l2={l2} l3={l3}")]
    NonFinite {
        step: u64,
        l1: f64,
        l2: f64,
        l3: f64,
    },
    #[error("target predicate {0} has a token outside the vocabulary")]
    TargetOutOfRange(Label),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Mapper(#[from] MapperError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Share of each batch replayed from the pool.
    pub rehearsal: f64,
    /// Retrieved entries per query.
    pub k: usize,
    /// Learning-rate multiplier for the scorer when it is fine-tuned.
    pub scorer_lr_scale: f64,
    pub aux_token_norm: bool,
    /// Stop a stage after this many epochs without a lower validation loss;
    /// 0 disables early stopping.
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            lambda: 0.5,
            lr: 0.002,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 20,
            batch_size: 64,
            rehearsal: 0.25,
            k: 3,
            scorer_lr_scale: 0.1,
            aux_token_norm: false,
            early_stop_patience: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.alpha >= 0.0 && self.lambda >= 0.0) {
            return bad("alpha and lambda must be >= 0");
        }
        if !(0.0..1.0).contains(&self.rehearsal) {
            return bad("rehearsal ratio must lie in [0, 1)");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be finite and >= 0");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return bad("optimizer constants out of range");
        }
        if !(self.eps.is_finite()
            && self.eps > 0.0
            && self.scorer_lr_scale.is_finite()
            && self.scorer_lr_scale >= 0.0)
        {
            return bad("eps must be > 0 and the scorer scale >= 0");
        }
        if self.batch_size == 0 || self.k == 0 {
            return bad("batch size and k must be >= 1");
        }
        if self.rehearsal_count() >= self.batch_size {
            return bad("rehearsal leaves no room for current data");
        }
        Ok(())
    }

    /// Rehearsal items per batch, `round(ρ·B)`.
    pub fn rehearsal_count(&self) -> usize {
        (self.rehearsal * self.batch_size as f64).round() as usize
    }
}

/// Ablation switches that reroute retrieval and assembly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Variant {
    /// Pick `K` entries uniformly instead of by key similarity.
    pub random_prompts: bool,
    /// Pick a uniform exemplar from each entry instead of the nearest.
    pub random_exemplar: bool,
    /// Random segment order instead of ascending similarity.
    pub shuffled_order: bool,
    /// Single prompt with no exemplars.
    pub no_in_context: bool,
    /// Train the scorer too.
    pub fine_tune: bool,
}

pub fn loss_key_alignment(query: &[f64], keys: &[&[f64]]) -> Result<f64, TrainError> {
    if keys.is_empty() {
        return Err(TrainError::Config("no keys selected".into()));
    }
    let mut total = 0.0;
    for k in keys {
        total += 1.0 - cosine(query, k)?;
    }
    Ok(total)
}

/// Teacher-forced cross-entropy over the target's non-padding tokens.
pub fn loss_predicate_ce(
    distributions: &[Vec<f64>],
    target: Label,
    vocab: &PredicateVocab,
) -> Result<f64, TrainError> {
    let toks = vocab.tokens(target)?;
    if toks.len() > distributions.len() {
        return Err(ScorerError::SlotCount {
            got: distributions.len(),
            expected: toks.len(),
        }
        .into());
    }
    let mut total = 0.0;
    for (j, &t) in toks.iter().enumerate() {
        let p = *distributions[j]
            .get(t)
            .ok_or(TrainError::TargetOutOfRange(target))?;
        total -= p.ln();
    }
    Ok(total)
}

pub fn loss_total(l1_aux: f64, l2: f64, l3: f64, cfg: &TrainConfig) -> f64 {
    cfg.alpha * l1_aux + cfg.lambda * l2 + l3
}

/// Sizes needed to build a [`Model`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelGeometry {
    pub d_tok: usize,
    pub depth: usize,
    pub counts: TokenCounts,
    /// d_c, d_r, d_s, d_o.
    pub dims: [usize; 4],
    pub n_t: usize,
    pub n_p: usize,
    pub n_e: usize,
    /// Largest `K` the positional table must cover.
    pub max_k: usize,
}

impl ModelGeometry {
    pub fn mapper_config(&self) -> MapperConfig {
        MapperConfig {
            d_tok: self.d_tok,
            depth: self.depth,
            counts: self.counts,
            dims: self.dims,
        }
    }

    pub fn max_len(&self, label_len: usize) -> usize {
        self.max_k * (self.n_p + self.counts.total() + label_len)
    }
}

/// Everything the in-context predictor needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub mapper: MapperParams,
    pub pool: PromptPool,
    /// One learnable row per label slot.
    pub mask: Matrix,
    pub scorer: ScorerParams,
    pub vocab: PredicateVocab,
}

impl Model {
    pub fn init(
        geom: &ModelGeometry,
        vocab: PredicateVocab,
        rng: &SeededRng,
    ) -> Result<Self, TrainError> {
        if geom.max_k == 0 || geom.max_k > geom.n_t {
            return Err(TrainError::Config(format!(
                "k must lie in 1..={}",
                geom.n_t
            )));
        }
        let label_len = vocab.label_len();
        let mapper = MapperParams::init(geom.mapper_config(), &mut rng.fork(1))?;
        let pool = PromptPool::init(
            geom.n_t,
            geom.n_p,
            geom.d_tok,
            geom.dims[0],
            geom.n_e,
            &mut rng.fork(2),
        )?;
        let mask = crate::numerics::random_gaussian_matrix(
            label_len,
            geom.d_tok,
            1.0 / (geom.d_tok as f64).sqrt(),
            &mut rng.fork(3),
        );
        let scorer = ScorerParams::init(
            vocab.vocab_size(),
            geom.d_tok,
            label_len,
            geom.max_len(label_len),
            &mut rng.fork(4),
        );
        Ok(Self {
            mapper,
            pool,
            mask,
            scorer,
            vocab,
        })
    }

    pub fn d_tok(&self) -> usize {
        self.mapper.config().d_tok
    }

    /// Trainable tensors in a fixed order: mapper, then each entry's prompt
    /// and key, then the mask rows, then the scorer when fine-tuned.
    pub fn trainable_tensors(&self, fine_tune: bool) -> Vec<&[f64]> {
        let mut out = self.mapper.tensors();
        for e in self.pool.entries() {
            out.push(e.prompt.as_slice());
            out.push(&e.key);
        }
        out.push(self.mask.as_slice());
        if fine_tune {
            out.extend(self.scorer.tensors());
        }
        out
    }

    pub fn trainable_tensors_mut(&mut self, fine_tune: bool) -> Vec<&mut [f64]> {
        let mut out = self.mapper.tensors_mut();
        for e in self.pool.entries_mut() {
            out.push(e.prompt.as_mut_slice());
            out.push(&mut e.key);
        }
        out.push(self.mask.as_mut_slice());
        if fine_tune {
            out.extend(self.scorer.tensors_mut());
        }
        out
    }

    fn scorer_tensor_count(&self) -> usize {
        self.scorer.tensors().len()
    }
}

/// Gradient buffers shaped like the trainables.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub mapper: MapperParams,
    pub prompts: Vec<Matrix>,
    pub keys: Vec<Vec<f64>>,
    pub mask: Matrix,
    pub scorer: Option<ScorerParams>,
}

impl Gradients {
    pub fn zeros(model: &Model, fine_tune: bool) -> Self {
        Self {
            mapper: model.mapper.zeros_like(),
            prompts: model
                .pool
                .entries()
                .iter()
                .map(|e| Matrix::zeros(e.prompt.rows(), e.prompt.cols()))
                .collect(),
            keys: model
                .pool
                .entries()
                .iter()
                .map(|e| vec![0.0; e.key.len()])
                .collect(),
            mask: Matrix::zeros(model.mask.rows(), model.mask.cols()),
            scorer: fine_tune.then(|| model.scorer.zeros_like()),
        }
    }

    /// Same order as [`Model::trainable_tensors`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = self.mapper.tensors();
        for (p, k) in self.prompts.iter().zip(&self.keys) {
            out.push(p.as_slice());
            out.push(k);
        }
        out.push(self.mask.as_slice());
        if let Some(s) = &self.scorer {
            out.extend(s.tensors());
        }
        out
    }
}

/// A query or replayed exemplar with its target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub f_c: Vec<f64>,
    pub f_r: Vec<f64>,
    pub f_s: Vec<f64>,
    pub f_o: Vec<f64>,
    pub target: Label,
    pub rehearsal: bool,
}

impl TrainItem {
    pub fn from_instance(inst: &RelationInstance) -> Self {
        Self {
            f_c: inst.f_c.clone(),
            f_r: inst.f_r.clone(),
            f_s: inst.f_s.clone(),
            f_o: inst.f_o.clone(),
            target: inst.predicate,
            rehearsal: false,
        }
    }

    pub fn from_exemplar(ex: &Exemplar) -> Self {
        Self {
            f_c: ex.f_c.clone(),
            f_r: ex.f_r.clone(),
            f_s: ex.f_s.clone(),
            f_o: ex.f_o.clone(),
            target: ex.predicate,
            rehearsal: true,
        }
    }

    fn features(&self) -> FeatureSet<'_> {
        FeatureSet {
            f_c: &self.f_c,
            f_r: &self.f_r,
            f_s: &self.f_s,
            f_o: &self.f_o,
        }
    }
}

/// Discrete retrieval choices for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    /// `(entry, similarity)` in sequence order; the last one accompanies
    /// the query.
    pub order: Vec<(usize, f64)>,
    /// Exemplar slot used for each position in `order`.
    pub exemplars: Vec<Option<usize>>,
}

pub fn plan_query(
    model: &Model,
    f_c: &[f64],
    f_r: &[f64],
    k: usize,
    variant: Variant,
    rng: &mut SeededRng,
) -> Result<Plan, TrainError> {
    let pool = &model.pool;
    let k = if variant.no_in_context { 1 } else { k };
    let mut order = if variant.random_prompts {
        if k == 0 || k > pool.len() {
            return Err(PoolError::KOutOfRange { k, n: pool.len() }.into());
        }
        rng.choose_distinct(pool.len(), k)
            .into_iter()
            .map(|i| Ok((i, cosine(f_c, &pool.entry(i).key)?)))
            .collect::<Result<Vec<_>, TrainError>>()?
    } else {
        pool.retrieve_topk_prompts(f_c, k)?
    };
    if variant.shuffled_order {
        rng.shuffle(&mut order);
    } else {
        order.sort_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.0.cmp(&a.0))
        });
    }
    let last = order.len() - 1;
    let mut exemplars = Vec::with_capacity(order.len());
    for (pos, &(entry, _)) in order.iter().enumerate() {
        if pos == last || variant.no_in_context {
            exemplars.push(None);
            continue;
        }
        let e = pool.entry(entry);
        let slot = if variant.random_exemplar {
            let slots: Vec<usize> = (0..e.exemplars.len())
                .filter(|&i| !e.exemplars[i].is_copy_of(f_c, f_r))
                .collect();
            (!slots.is_empty()).then(|| slots[rng.below(slots.len())])
        } else {
            nearest_exemplar_slot(e, f_r, |x| x.is_copy_of(f_c, f_r))
        };
        exemplars.push(slot);
    }
    Ok(Plan { order, exemplars })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
}

struct Forward {
    query_trace: ExemplarTrace,
    exemplar_traces: Vec<(usize, ExemplarTrace)>,
    assembled: crate::scorer::AssembledPrompt,
    score: crate::scorer::ScoreTrace,
}

fn forward(model: &Model, item: &TrainItem, plan: &Plan) -> Result<Forward, TrainError> {
    let (query, query_trace) = encode_exemplar_traced(&model.mapper, item.features())?;
    let mut encoded = Vec::new();
    for (pos, slot) in plan.exemplars.iter().enumerate() {
        if let Some(slot) = *slot {
            let ex = &model.pool.entry(plan.order[pos].0).exemplars[slot];
            let (block, trace) = encode_exemplar_traced(&model.mapper, ex)?;
            let labels = model.scorer.label_rows(&model.vocab, ex.predicate)?;
            encoded.push((pos, block, labels, ex.predicate, trace));
        }
    }
    let items: Vec<ContextItem<'_>> = plan
        .order
        .iter()
        .enumerate()
        .map(|(pos, &(entry, similarity))| ContextItem {
            entry,
            similarity,
            prompt: &model.pool.entry(entry).prompt,
            exemplar: encoded
                .iter()
                .find(|e| e.0 == pos)
                .map(|(_, block, labels, pred, _)| (block, labels, *pred)),
        })
        .collect();
    let assembled = assemble_prompt(&items, &query, &model.mask, SegmentOrder::AsGiven)?;
    let score = score_traced(&model.scorer, &assembled)?;
    Ok(Forward {
        query_trace,
        exemplar_traces: encoded
            .into_iter()
            .map(|(pos, _, _, _, t)| (pos, t))
            .collect(),
        assembled,
        score,
    })
}

/// Loss of one item; when `grads` is given, adds `scale ×` its gradient.
pub fn item_loss(
    model: &Model,
    item: &TrainItem,
    plan: &Plan,
    cfg: &TrainConfig,
    grads: Option<&mut Gradients>,
    scale: f64,
) -> Result<LossParts, TrainError> {
    let fw = forward(model, item, plan)?;
    let l3 = loss_predicate_ce(&fw.score.probs, item.target, &model.vocab)?;
    let keys: Vec<&[f64]> = plan
        .order
        .iter()
        .map(|&(i, _)| model.pool.entry(i).key.as_slice())
        .collect();
    let l2 = if item.rehearsal {
        0.0
    } else {
        loss_key_alignment(&item.f_c, &keys)?
    };
    let d = model.d_tok();
    let query_rows = model.mapper.config().counts.total();
    let query_seg = fw
        .assembled
        .segments
        .iter()
        .find(|s| s.source == SegmentSource::Query)
        .expect("assembly always has a query segment")
        .clone();
    let l1 = if cfg.aux_token_norm {
        (0..query_rows)
            .map(|r| {
                let row = fw.assembled.rows.row(query_seg.start + r);
                (dot(row, row) - 1.0).powi(2)
            })
            .sum::<f64>()
            / query_rows as f64
    } else {
        0.0
    };
    let parts = LossParts {
        l1,
        l2,
        l3,
        total: loss_total(l1, l2, l3, cfg),
    };
    let Some(grads) = grads else { return Ok(parts) };

    // Cross-entropy: d logits = p - onehot on non-padding slots.
    let padded = model.vocab.padded(item.target)?;
    let d_logits: Vec<Vec<f64>> = fw
        .score
        .probs
        .iter()
        .zip(&padded)
        .map(|(p, &t)| {
            if t == PAD_TOKEN {
                vec![0.0; p.len()]
            } else {
                let mut g: Vec<f64> = p.iter().map(|v| v * scale).collect();
                g[t] -= scale;
                g
            }
        })
        .collect();
    let d_rows = backward_score(
        &model.scorer,
        &fw.assembled,
        &fw.score,
        &d_logits,
        grads.scorer.as_mut(),
    );

    for seg in &fw.assembled.segments {
        let slice = &d_rows.as_slice()[seg.start * d..(seg.start + seg.len) * d];
        match seg.source {
            SegmentSource::Prompt { entry } => {
                axpy(1.0, slice, grads.prompts[entry].as_mut_slice())
            }
            SegmentSource::Mask => axpy(1.0, slice, grads.mask.as_mut_slice()),
            SegmentSource::Label { predicate } => {
                if let Some(sg) = grads.scorer.as_mut() {
                    for (r, &t) in model.vocab.padded(predicate)?.iter().enumerate() {
                        axpy(1.0, &slice[r * d..(r + 1) * d], sg.embed.row_mut(t));
                    }
                }
            }
            SegmentSource::Exemplar { .. } => {}
            SegmentSource::Query => {
                let mut g = Matrix::from_vec(seg.len, d, slice.to_vec())?;
                if cfg.aux_token_norm && cfg.alpha > 0.0 {
                    let c = scale * cfg.alpha * 4.0 / query_rows as f64;
                    for r in 0..seg.len {
                        let row = fw.assembled.rows.row(seg.start + r);
                        let f = c * (dot(row, row) - 1.0);
                        axpy(f, row, g.row_mut(r));
                    }
                }
                backward_exemplar(&model.mapper, &fw.query_trace, &g, &mut grads.mapper);
            }
        }
    }
    // Exemplar segments: match traces by entry in sequence order.
    let ex_segs: Vec<_> = fw
        .assembled
        .segments
        .iter()
        .filter(|s| matches!(s.source, SegmentSource::Exemplar { .. }))
        .collect();
    for (seg, (_, trace)) in ex_segs.iter().zip(&fw.exemplar_traces) {
        let g = Matrix::from_vec(
            seg.len,
            d,
            d_rows.as_slice()[seg.start * d..(seg.start + seg.len) * d].to_vec(),
        )?;
        backward_exemplar(&model.mapper, trace, &g, &mut grads.mapper);
    }

    if !item.rehearsal && cfg.lambda > 0.0 {
        let nq = norm(&item.f_c);
        for &(i, _) in &plan.order {
            let k = &model.pool.entry(i).key;
            let nk = norm(k);
            let c = cosine(&item.f_c, k)?;
            let g = &mut grads.keys[i];
            // d(1 - cos)/dk = -(q / (|q||k|) - cos · k / |k|²)
            for ((gj, qj), kj) in g.iter_mut().zip(&item.f_c).zip(k) {
                *gj -= scale * cfg.lambda * (qj / (nq * nk) - c * kj / (nk * nk));
            }
        }
    }
    Ok(parts)
}

/// Mean loss over a planned batch, accumulating mean gradients if asked.
pub fn batch_loss(
    model: &Model,
    items: &[TrainItem],
    plans: &[Plan],
    cfg: &TrainConfig,
    mut grads: Option<&mut Gradients>,
) -> Result<LossParts, TrainError> {
    if items.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let scale = 1.0 / items.len() as f64;
    let mut acc = LossParts::default();
    for (item, plan) in items.iter().zip(plans) {
        let p = item_loss(model, item, plan, cfg, grads.as_deref_mut(), scale)?;
        acc.l1 += p.l1 * scale;
        acc.l2 += p.l2 * scale;
        acc.l3 += p.l3 * scale;
        acc.total += p.total * scale;
    }
    Ok(acc)
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(
        &mut self,
        params: Vec<&mut [f64]>,
        grads: Vec<&[f64]>,
        lr_scale: &[f64],
        cfg: &TrainConfig,
    ) {
        assert_eq!(
            params.len(),
            grads.len(),
            "parameter and gradient lists differ"
        );
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let lr = cfg.lr * lr_scale[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[j]);
            }
        }
    }
}

/// One optimizer step on a planned batch; returns the batch loss.
pub fn grad_step(
    model: &mut Model,
    opt: &mut AdamW,
    items: &[TrainItem],
    plans: &[Plan],
    cfg: &TrainConfig,
    variant: Variant,
) -> Result<LossParts, TrainError> {
    let mut grads = Gradients::zeros(model, variant.fine_tune);
    let loss = batch_loss(model, items, plans, cfg, Some(&mut grads))?;
    if !loss.total.is_finite() {
        return Err(TrainError::NonFinite {
            step: opt.steps(),
            l1: loss.l1,
            l2: loss.l2,
            l3: loss.l3,
        });
    }
    let n_scorer = if variant.fine_tune {
        model.scorer_tensor_count()
    } else {
        0
    };
    let mut lr_scale = vec![1.0; grads.tensors().len()];
    let n = lr_scale.len();
    for s in &mut lr_scale[n - n_scorer..] {
        *s = cfg.scorer_lr_scale;
    }
    opt.step(
        model.trainable_tensors_mut(variant.fine_tune),
        grads.tensors(),
        &lr_scale,
        cfg,
    );
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage: usize,
    pub steps: u64,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
    pub admission_attempts: usize,
    pub admitted: usize,
}

/// Trains on one stage's split, replaying pool exemplars and admitting up to
/// `quota` instances of this stage, spread evenly over its steps.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    model: &mut Model,
    opt: &mut AdamW,
    stage: &StageDataset,
    cfg: &TrainConfig,
    variant: Variant,
    quota: usize,
    rng: &mut SeededRng,
) -> Result<StageSummary, TrainError> {
    cfg.validate()?;
    let train = &stage.train;
    if train.is_empty() {
        return Err(TrainError::EmptyStage(stage.stage));
    }
    let n_reh = cfg.rehearsal_count();
    let n_cur = cfg.batch_size - n_reh;
    let steps_per_epoch = train.len().div_ceil(n_cur);
    let total_steps = cfg.epochs * steps_per_epoch;

    let mut admit_order: Vec<usize> = (0..train.len()).collect();
    rng.shuffle(&mut admit_order);
    let attempts = quota.min(train.len());
    // Attempt a happens before step floor(a · total / attempts).
    let admit_at = |a: usize| a * total_steps / attempts.max(1);
    let mut next_admit = 0;
    let mut admitted = 0;

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut best_val = f64::INFINITY;
    let mut since_best = 0;
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        for chunk in order.chunks(n_cur) {
            while next_admit < attempts && admit_at(next_admit) <= step {
                let inst = &train[admit_order[next_admit]];
                if model
                    .pool
                    .admit_exemplar(inst, stage.stage as u32, rng)?
                    .is_some()
                {
                    admitted += 1;
                }
                next_admit += 1;
            }
            let mut items: Vec<TrainItem> = chunk
                .iter()
                .map(|&i| TrainItem::from_instance(&train[i]))
                .collect();
            if n_reh > 0 && model.pool.stored() > 0 {
                let stored: Vec<&Exemplar> = model.pool.exemplars().map(|(_, e)| e).collect();
                for _ in 0..n_reh {
                    items.push(TrainItem::from_exemplar(stored[rng.below(stored.len())]));
                }
            }
            let plans = items
                .iter()
                .map(|it| plan_query(model, &it.f_c, &it.f_r, cfg.k, variant, rng))
                .collect::<Result<Vec<_>, _>>()?;
            let loss = grad_step(model, opt, &items, &plans, cfg, variant)?;
            sum += loss.total;
            step += 1;
        }
        epoch_losses.push(sum / steps_per_epoch as f64);
        if cfg.early_stop_patience > 0 && !stage.val.is_empty() {
            let v = validation_loss(model, &stage.val, cfg, variant, rng)?;
            if v < best_val {
                best_val = v;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.early_stop_patience {
                    break;
                }
            }
        }
    }
    // Attempts not reached when epochs = 0.
    while next_admit < attempts {
        let inst = &train[admit_order[next_admit]];
        if model
            .pool
            .admit_exemplar(inst, stage.stage as u32, rng)?
            .is_some()
        {
            admitted += 1;
        }
        next_admit += 1;
    }
    Ok(StageSummary {
        stage: stage.stage,
        steps: step as u64,
        first_epoch_loss: epoch_losses.first().copied().unwrap_or(f64::NAN),
        last_epoch_loss: epoch_losses.last().copied().unwrap_or(f64::NAN),
        admission_attempts: attempts,
        admitted,
    })
}

/// Mean loss over held-out instances, without gradients.
pub fn validation_loss(
    model: &Model,
    val: &[RelationInstance],
    cfg: &TrainConfig,
    variant: Variant,
    rng: &mut SeededRng,
) -> Result<f64, TrainError> {
    let items: Vec<TrainItem> = val.iter().map(TrainItem::from_instance).collect();
    let plans = items
        .iter()
        .map(|it| plan_query(model, &it.f_c, &it.f_r, cfg.k, variant, rng))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(batch_loss(model, &items, &plans, cfg, None)?.total)
}

/// Per-slot distributions for a query under `plan`.
pub fn predict_distributions(
    model: &Model,
    inst: &RelationInstance,
    plan: &Plan,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let item = TrainItem::from_instance(inst);
    Ok(forward(model, &item, plan)?.score.probs)
}

/// Best candidate predicate and its length-normalized log score.
pub fn predict(
    model: &Model,
    inst: &RelationInstance,
    candidates: &[Label],
    k: usize,
    variant: Variant,
    rng: &mut SeededRng,
) -> Result<(Label, f64), TrainError> {
    let plan = plan_query(model, &inst.f_c, &inst.f_r, k, variant, rng)?;
    let dists = predict_distributions(model, inst, &plan)?;
    let ranked = crate::scorer::rank_predicates(&dists, &model.vocab, candidates)?;
    ranked
        .first()
        .copied()
        .ok_or_else(|| TrainError::Config("no candidate predicates".into()))
}
