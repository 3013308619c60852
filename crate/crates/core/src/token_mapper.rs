//! Feature-to-token encoder.
//!
//! A feature vector `f` of kind `*` is projected to `l` token vectors,
//! `φ(f) = reshape(W f + b)`. The encoder input is the sequence
//! `[φ_1..φ_l; p_1 + φ_{1 mod l} .. p_n + φ_{n mod l}]`, where `p` are the
//! learnable soft-position tokens of that kind. Each of the `depth` layers is a
//! residual token-mixing map `S ← S + tanh(M S + B)` with `M` of shape
//! `(l+n)×(l+n)`. The block read out is the `n` rows at the soft-position
//! slots. With `depth = 0` the output is `p + φ(f)`, an affine image of `f`.

use thiserror::Error;

use crate::numerics::{axpy, dot, random_gaussian_matrix, Matrix, SeededRng};

#[derive(Debug, Error, PartialEq)]
pub enum MapperError {
    #[error("{kind:?} feature has dimension {got}, expected {expected}")]
    Dimension {
        kind: FeatureKind,
        got: usize,
        expected: usize,
    },
    #[error("{0:?} feature is missing")]
    Missing(FeatureKind),
    #[error("invalid mapper configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureKind {
    Context,
    Relation,
    Subject,
    Object,
}

impl FeatureKind {
    /// Concatenation order of an encoded exemplar.
    pub const ALL: [FeatureKind; 4] = [
        FeatureKind::Context,
        FeatureKind::Relation,
        FeatureKind::Subject,
        FeatureKind::Object,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Tag of a block of rows in an assembled sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Context,
    Relation,
    Subject,
    Object,
    Exemplar,
    Prompt,
    Label,
    Mask,
}

impl From<FeatureKind> for TokenKind {
    fn from(k: FeatureKind) -> Self {
        match k {
            FeatureKind::Context => TokenKind::Context,
            FeatureKind::Relation => TokenKind::Relation,
            FeatureKind::Subject => TokenKind::Subject,
            FeatureKind::Object => TokenKind::Object,
        }
    }
}

/// Tokens per feature kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenCounts {
    pub context: usize,
    pub relation: usize,
    pub subject: usize,
    pub object: usize,
}

impl Default for TokenCounts {
    fn default() -> Self {
        Self {
            context: 4,
            relation: 4,
            subject: 2,
            object: 2,
        }
    }
}

impl TokenCounts {
    pub fn small() -> Self {
        Self {
            context: 2,
            relation: 1,
            subject: 1,
            object: 1,
        }
    }

    pub fn large() -> Self {
        Self {
            context: 8,
            relation: 4,
            subject: 4,
            object: 4,
        }
    }

    pub fn get(&self, kind: FeatureKind) -> usize {
        match kind {
            FeatureKind::Context => self.context,
            FeatureKind::Relation => self.relation,
            FeatureKind::Subject => self.subject,
            FeatureKind::Object => self.object,
        }
    }

    pub fn total(&self) -> usize {
        self.context + self.relation + self.subject + self.object
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenBlock {
    pub kind: TokenKind,
    pub tokens: Matrix,
}

impl TokenBlock {
    pub fn rows(&self) -> usize {
        self.tokens.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapperConfig {
    pub d_tok: usize,
    pub depth: usize,
    pub counts: TokenCounts,
    /// Input dimension per kind, in [`FeatureKind::ALL`] order.
    pub dims: [usize; 4],
}

/// Parameters of one feature kind.
#[derive(Debug, Clone, PartialEq)]
pub struct KindParams {
    /// `(l·d_tok) × d_in`
    pub proj_w: Matrix,
    pub proj_b: Vec<f64>,
    /// `n × d_tok` soft-position tokens.
    pub soft: Matrix,
    /// Per layer, `(l+n) × (l+n)`.
    pub mix: Vec<Matrix>,
    /// Per layer, `(l+n) × d_tok`.
    pub mix_b: Vec<Matrix>,
    l: usize,
    n: usize,
}

impl KindParams {
    fn zeros(d_in: usize, l: usize, n: usize, d_tok: usize, depth: usize) -> Self {
        Self {
            proj_w: Matrix::zeros(l * d_tok, d_in),
            proj_b: vec![0.0; l * d_tok],
            soft: Matrix::zeros(n, d_tok),
            mix: vec![Matrix::zeros(l + n, l + n); depth],
            mix_b: vec![Matrix::zeros(l + n, d_tok); depth],
            l,
            n,
        }
    }

    pub fn projected(&self) -> usize {
        self.l
    }

    pub fn tokens(&self) -> usize {
        self.n
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![
            self.proj_w.as_slice(),
            self.proj_b.as_slice(),
            self.soft.as_slice(),
        ];
        out.extend(self.mix.iter().map(|m| m.as_slice()));
        out.extend(self.mix_b.iter().map(|m| m.as_slice()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.proj_w.as_mut_slice(),
            self.proj_b.as_mut_slice(),
            self.soft.as_mut_slice(),
        ];
        out.extend(self.mix.iter_mut().map(|m| m.as_mut_slice()));
        out.extend(self.mix_b.iter_mut().map(|m| m.as_mut_slice()));
        out
    }
}

/// Learnable mapper parameters for the four feature kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct MapperParams {
    config: MapperConfig,
    kinds: Vec<KindParams>,
}

impl MapperParams {
    pub fn zeros(config: MapperConfig) -> Result<Self, MapperError> {
        if config.d_tok == 0 {
            return Err(MapperError::Config("d_tok must be >= 1".into()));
        }
        for kind in FeatureKind::ALL {
            if config.counts.get(kind) == 0 || config.dims[kind.index()] == 0 {
                return Err(MapperError::Config(format!(
                    "{kind:?} needs >= 1 token and dimension"
                )));
            }
        }
        let kinds = FeatureKind::ALL
            .iter()
            .map(|&k| {
                let n = config.counts.get(k);
                KindParams::zeros(config.dims[k.index()], n, n, config.d_tok, config.depth)
            })
            .collect();
        Ok(Self { config, kinds })
    }

    pub fn init(config: MapperConfig, rng: &mut SeededRng) -> Result<Self, MapperError> {
        let mut p = Self::zeros(config)?;
        let d_tok = config.d_tok as f64;
        for (kind, kp) in FeatureKind::ALL.iter().zip(p.kinds.iter_mut()) {
            let d_in = config.dims[kind.index()];
            kp.proj_w =
                random_gaussian_matrix(kp.l * config.d_tok, d_in, 1.0 / (d_in as f64).sqrt(), rng);
            kp.soft = random_gaussian_matrix(kp.n, config.d_tok, 0.1 / d_tok.sqrt(), rng);
            let s = kp.l + kp.n;
            for m in &mut kp.mix {
                *m = random_gaussian_matrix(s, s, 0.5 / (s as f64).sqrt(), rng);
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("config already validated")
    }

    pub fn config(&self) -> &MapperConfig {
        &self.config
    }

    pub fn kind(&self, kind: FeatureKind) -> &KindParams {
        &self.kinds[kind.index()]
    }

    pub fn kind_mut(&mut self, kind: FeatureKind) -> &mut KindParams {
        &mut self.kinds[kind.index()]
    }

    /// Every parameter tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.kinds.iter().flat_map(|k| k.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.kinds
            .iter_mut()
            .flat_map(|k| k.tensors_mut())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Forward intermediates needed by [`backward_feature`].
#[derive(Debug, Clone)]
pub struct FeatureTrace {
    kind: FeatureKind,
    input: Vec<f64>,
    /// Sequence entering each layer, plus the final one.
    states: Vec<Matrix>,
    /// `tanh(M S + B)` of each layer.
    activations: Vec<Matrix>,
}

fn check_dim(params: &MapperParams, f: &[f64], kind: FeatureKind) -> Result<(), MapperError> {
    if f.is_empty() {
        return Err(MapperError::Missing(kind));
    }
    let expected = params.config.dims[kind.index()];
    if f.len() != expected {
        return Err(MapperError::Dimension {
            kind,
            got: f.len(),
            expected,
        });
    }
    Ok(())
}

/// Encodes one feature vector into `n` token rows.
pub fn encode_feature(
    params: &MapperParams,
    f: &[f64],
    kind: FeatureKind,
) -> Result<TokenBlock, MapperError> {
    encode_feature_traced(params, f, kind).map(|(b, _)| b)
}

pub fn encode_feature_traced(
    params: &MapperParams,
    f: &[f64],
    kind: FeatureKind,
) -> Result<(TokenBlock, FeatureTrace), MapperError> {
    check_dim(params, f, kind)?;
    let d = params.config.d_tok;
    let kp = params.kind(kind);
    let (l, n) = (kp.l, kp.n);

    let mut phi = kp.proj_w.matvec(f);
    for (p, b) in phi.iter_mut().zip(&kp.proj_b) {
        *p += b;
    }
    let mut state = Matrix::zeros(l + n, d);
    for r in 0..l {
        state.row_mut(r).copy_from_slice(&phi[r * d..(r + 1) * d]);
    }
    for i in 0..n {
        let src = i % l;
        let row = state.row_mut(l + i);
        row.copy_from_slice(kp.soft.row(i));
        axpy(1.0, &phi[src * d..(src + 1) * d], row);
    }

    let mut states = Vec::with_capacity(params.config.depth + 1);
    let mut activations = Vec::with_capacity(params.config.depth);
    for layer in 0..params.config.depth {
        let mix = &kp.mix[layer];
        let mut act = kp.mix_b[layer].clone();
        for r in 0..l + n {
            let out = act.row_mut(r);
            for c in 0..l + n {
                let w = mix.get(r, c);
                if w != 0.0 {
                    axpy(w, state.row(c), out);
                }
            }
        }
        for v in act.as_mut_slice() {
            *v = v.tanh();
        }
        let mut next = state.clone();
        axpy(1.0, act.as_slice(), next.as_mut_slice());
        states.push(state);
        activations.push(act);
        state = next;
    }

    let mut tokens = Matrix::zeros(n, d);
    for i in 0..n {
        tokens.row_mut(i).copy_from_slice(state.row(l + i));
    }
    states.push(state);
    Ok((
        TokenBlock {
            kind: kind.into(),
            tokens,
        },
        FeatureTrace {
            kind,
            input: f.to_vec(),
            states,
            activations,
        },
    ))
}

/// Accumulates parameter gradients of `<grad_out, encode(f)>` into `grads`.
pub fn backward_feature(
    params: &MapperParams,
    trace: &FeatureTrace,
    grad_out: &Matrix,
    grads: &mut MapperParams,
) {
    let d = params.config.d_tok;
    let kind = trace.kind;
    let kp = params.kind(kind);
    let (l, n) = (kp.l, kp.n);
    let gk = grads.kind_mut(kind);

    let mut d_state = Matrix::zeros(l + n, d);
    for i in 0..n {
        d_state.row_mut(l + i).copy_from_slice(grad_out.row(i));
    }
    for layer in (0..params.config.depth).rev() {
        let act = &trace.activations[layer];
        let input = &trace.states[layer];
        let mut d_pre = d_state.clone();
        for (g, a) in d_pre.as_mut_slice().iter_mut().zip(act.as_slice()) {
            *g *= 1.0 - a * a;
        }
        axpy(1.0, d_pre.as_slice(), gk.mix_b[layer].as_mut_slice());
        let mix = &kp.mix[layer];
        for r in 0..l + n {
            let dr = d_pre.row(r);
            for c in 0..l + n {
                let g = dot(dr, input.row(c));
                let cur = gk.mix[layer].get(r, c);
                gk.mix[layer].set(r, c, cur + g);
                let w = mix.get(r, c);
                if w != 0.0 {
                    axpy(w, dr, d_state.row_mut(c));
                }
            }
        }
    }

    let mut d_phi = vec![0.0; l * d];
    for r in 0..l {
        d_phi[r * d..(r + 1) * d].copy_from_slice(d_state.row(r));
    }
    for i in 0..n {
        let src = i % l;
        let g = d_state.row(l + i);
        axpy(1.0, g, gk.soft.row_mut(i));
        axpy(1.0, g, &mut d_phi[src * d..(src + 1) * d]);
    }
    axpy(1.0, &d_phi, &mut gk.proj_b);
    gk.proj_w.add_outer(&d_phi, &trace.input);
}

/// Borrowed view of the four features of an instance or exemplar.
#[derive(Debug, Clone, Copy)]
pub struct FeatureSet<'a> {
    pub f_c: &'a [f64],
    pub f_r: &'a [f64],
    pub f_s: &'a [f64],
    pub f_o: &'a [f64],
}

impl<'a> FeatureSet<'a> {
    pub fn get(&self, kind: FeatureKind) -> &'a [f64] {
        match kind {
            FeatureKind::Context => self.f_c,
            FeatureKind::Relation => self.f_r,
            FeatureKind::Subject => self.f_s,
            FeatureKind::Object => self.f_o,
        }
    }
}

impl<'a> From<&'a crate::datastream::RelationInstance> for FeatureSet<'a> {
    fn from(i: &'a crate::datastream::RelationInstance) -> Self {
        Self {
            f_c: &i.f_c,
            f_r: &i.f_r,
            f_s: &i.f_s,
            f_o: &i.f_o,
        }
    }
}

impl<'a> From<&'a crate::prompt_pool::Exemplar> for FeatureSet<'a> {
    fn from(e: &'a crate::prompt_pool::Exemplar) -> Self {
        Self {
            f_c: &e.f_c,
            f_r: &e.f_r,
            f_s: &e.f_s,
            f_o: &e.f_o,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExemplarTrace {
    parts: Vec<FeatureTrace>,
}

/// `[t^c; t^r; t^s; t^o]`.
pub fn encode_exemplar<'a>(
    params: &MapperParams,
    features: impl Into<FeatureSet<'a>>,
) -> Result<TokenBlock, MapperError> {
    encode_exemplar_traced(params, features).map(|(b, _)| b)
}

pub fn encode_exemplar_traced<'a>(
    params: &MapperParams,
    features: impl Into<FeatureSet<'a>>,
) -> Result<(TokenBlock, ExemplarTrace), MapperError> {
    let fs = features.into();
    let mut blocks = Vec::with_capacity(4);
    let mut parts = Vec::with_capacity(4);
    for kind in FeatureKind::ALL {
        let (b, t) = encode_feature_traced(params, fs.get(kind), kind)?;
        blocks.push(b.tokens);
        parts.push(t);
    }
    let tokens = Matrix::vstack(blocks.iter(), params.config.d_tok);
    Ok((
        TokenBlock {
            kind: TokenKind::Exemplar,
            tokens,
        },
        ExemplarTrace { parts },
    ))
}

pub fn backward_exemplar(
    params: &MapperParams,
    trace: &ExemplarTrace,
    grad_out: &Matrix,
    grads: &mut MapperParams,
) {
    let d = params.config.d_tok;
    let mut offset = 0;
    for part in &trace.parts {
        let n = params.kind(part.kind).n;
        let g = Matrix::from_vec(
            n,
            d,
            grad_out.as_slice()[offset * d..(offset + n) * d].to_vec(),
        )
        .expect("slice has n·d values");
        backward_feature(params, part, &g, grads);
        offset += n;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;

    fn config(depth: usize) -> MapperConfig {
        MapperConfig {
            d_tok: 6,
            depth,
            counts: TokenCounts::default(),
            dims: [5, 4, 3, 3],
        }
    }

    #[test]
    fn depth_zero_is_affine_in_the_feature() {
        let cfg = MapperConfig {
            d_tok: 3,
            depth: 0,
            counts: TokenCounts {
                context: 1,
                relation: 1,
                subject: 1,
                object: 1,
            },
            dims: [3, 3, 3, 3],
        };
        let mut p = MapperParams::zeros(cfg).unwrap();
        let kp = p.kind_mut(FeatureKind::Context);
        for i in 0..3 {
            kp.proj_w.set(i, i, 1.0);
        }
        kp.proj_b = vec![0.5, 0.0, -1.0];
        let out = encode_feature(&p, &[1.0, 2.0, 3.0], FeatureKind::Context).unwrap();
        assert_eq!(out.tokens.row(0), &[1.5, 2.0, 2.0]);
    }

    #[test]
    fn token_counts_per_kind() {
        let p = MapperParams::init(config(1), &mut SeededRng::new(1)).unwrap();
        let c = encode_feature(&p, &[0.1; 5], FeatureKind::Context).unwrap();
        let s = encode_feature(&p, &[0.1; 3], FeatureKind::Subject).unwrap();
        assert_eq!(c.rows(), 4);
        assert_eq!(s.rows(), 2);
        assert_eq!(c.kind, TokenKind::Context);
        assert!(matches!(
            encode_feature(&p, &[0.1; 4], FeatureKind::Context),
            Err(MapperError::Dimension { .. })
        ));
    }

    #[test]
    fn exemplar_block_order_and_purity() {
        let p = MapperParams::init(config(2), &mut SeededRng::new(2)).unwrap();
        let fs = FeatureSet {
            f_c: &[0.1, 0.2, 0.3, 0.4, 0.5],
            f_r: &[1.0, -1.0, 0.5, 0.0],
            f_s: &[0.3, 0.3, 0.1],
            f_o: &[-0.2, 0.9, 0.4],
        };
        let a = encode_exemplar(&p, fs).unwrap();
        let b = encode_exemplar(&p, fs).unwrap();
        assert_eq!(a.rows(), 12);
        assert_eq!(a, b);
        let rel = encode_feature(&p, fs.f_r, FeatureKind::Relation).unwrap();
        for i in 0..4 {
            assert_eq!(a.tokens.row(4 + i), rel.tokens.row(i));
        }
        // Swapping the subject and object features changes the block.
        let swapped = FeatureSet {
            f_s: fs.f_o,
            f_o: fs.f_s,
            ..fs
        };
        assert_ne!(encode_exemplar(&p, swapped).unwrap(), a);
        let missing = FeatureSet { f_s: &[], ..fs };
        assert_eq!(
            encode_exemplar(&p, missing).unwrap_err(),
            MapperError::Missing(FeatureKind::Subject)
        );
    }

    /// Central differences of `<G, encode(f)>` against the analytic backward.
    #[test]
    fn feature_gradients_match_finite_differences() {
        for depth in [0, 1, 2] {
            let mut rng = SeededRng::new(10 + depth as u64);
            let params = MapperParams::init(config(depth), &mut rng).unwrap();
            for kind in FeatureKind::ALL {
                let f: Vec<f64> = (0..config(depth).dims[kind.index()])
                    .map(|_| rng.gaussian())
                    .collect();
                let (block, trace) = encode_feature_traced(&params, &f, kind).unwrap();
                let g = random_gaussian_matrix(block.rows(), 6, 1.0, &mut rng);
                let mut grads = params.zeros_like();
                backward_feature(&params, &trace, &g, &mut grads);

                let objective = |p: &MapperParams| {
                    let b = encode_feature(p, &f, kind).unwrap();
                    dot(b.tokens.as_slice(), g.as_slice())
                };
                let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
                let mut probe = params.clone();
                let h = 1e-5;
                for (ti, tensor) in analytic.iter().enumerate() {
                    for j in 0..tensor.len() {
                        let orig = probe.tensors()[ti][j];
                        probe.tensors_mut()[ti][j] = orig + h;
                        let up = objective(&probe);
                        probe.tensors_mut()[ti][j] = orig - h;
                        let down = objective(&probe);
                        probe.tensors_mut()[ti][j] = orig;
                        let numeric = (up - down) / (2.0 * h);
                        let a = tensor[j];
                        let tol = 1e-4 * a.abs().max(numeric.abs()).max(1e-3);
                        assert!(
                            (a - numeric).abs() <= tol,
                            "depth {depth} {kind:?} tensor {ti}[{j}]: {a} vs {numeric}"
                        );
                    }
                }
            }
        }
    }
}
