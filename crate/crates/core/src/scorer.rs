//! In-context sequence assembly and the frozen readout that scores it.
//!
//! The assembled sequence for `K` retrieved entries, least similar first, is
//!
//! ```text
//! [v_K; e_K; y_K; ...; v_2; e_2; y_2; v_1; e_q; y_mask]
//! ```
//!
//! where `v_i` are prompt tokens, `e_i` encoded exemplars, `y_i` their label
//! tokens (rows of the frozen embedding table), `e_q` the encoded query and
//! `y_mask` the learnable mask rows, one per label slot.
//!
//! The readout pools the sequence with positional weights (uniform by
//! default), adds the `j`-th mask row and applies `softmax(R_j · pooled)`.
//! `R_j` is initialized from the embedding table plus a per-slot Gaussian
//! perturbation, so a label token present in the context raises the logit of
//! that same token.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::datastream::Label;
use crate::numerics::{axpy, random_gaussian_matrix, softmax, Matrix, NumericsError, SeededRng};
use crate::token_mapper::{TokenBlock, TokenKind};

pub const PAD_TOKEN: usize = 0;
pub const PAD_WORD: &str = "<pad>";

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("at least one retrieved entry is required")]
    NoContext,
    #[error("row dimension {got} does not match d_tok {expected}")]
    RowDimension { got: usize, expected: usize },
    #[error("sequence of {got} rows exceeds the positional table ({max})")]
    TooLong { got: usize, max: usize },
    #[error("expected {expected} distributions, got {got}")]
    SlotCount { got: usize, expected: usize },
    #[error("predicate {0} has no tokens")]
    EmptyPhrase(Label),
    #[error("unknown predicate {0}")]
    UnknownPredicate(Label),
    #[error("token {token} outside a vocabulary of {size}")]
    TokenOutOfRange { token: usize, size: usize },
    #[error("vocabulary file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Closed word vocabulary for predicate phrases. Token 0 is padding.
#[derive(Debug, Clone, PartialEq)]
pub struct PredicateVocab {
    words: Vec<String>,
    word_ids: BTreeMap<String, usize>,
    phrases: BTreeMap<Label, Vec<usize>>,
    label_len: usize,
}

impl PredicateVocab {
    pub fn from_phrases<I, S>(phrases: I) -> Result<Self, ScorerError>
    where
        I: IntoIterator<Item = (Label, Vec<S>)>,
        S: AsRef<str>,
    {
        let mut words = vec![PAD_WORD.to_string()];
        let mut word_ids = BTreeMap::from([(PAD_WORD.to_string(), PAD_TOKEN)]);
        let mut out = BTreeMap::new();
        for (label, phrase) in phrases {
            if phrase.is_empty() {
                return Err(ScorerError::EmptyPhrase(label));
            }
            let ids = phrase
                .iter()
                .map(|w| {
                    let w = w.as_ref();
                    *word_ids.entry(w.to_string()).or_insert_with(|| {
                        words.push(w.to_string());
                        words.len() - 1
                    })
                })
                .collect::<Vec<_>>();
            out.insert(label, ids);
        }
        let label_len = out.values().map(Vec::len).max().unwrap_or(1);
        Ok(Self {
            words,
            word_ids,
            phrases: out,
            label_len,
        })
    }

    /// One predicate per line: `<label_id> <word> [<word>...]`.
    pub fn parse(text: &str) -> Result<Self, ScorerError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut toks = line.split_whitespace();
            let id = toks.next().unwrap_or_default();
            let label: Label = id.parse().map_err(|e| ScorerError::Parse {
                line: i + 1,
                msg: format!("bad label id {id:?}: {e}"),
            })?;
            let words: Vec<String> = toks.map(str::to_string).collect();
            if words.is_empty() {
                return Err(ScorerError::EmptyPhrase(label));
            }
            if words.iter().any(|w| w == PAD_WORD) {
                return Err(ScorerError::Parse {
                    line: i + 1,
                    msg: "the padding word is reserved".into(),
                });
            }
            entries.push((label, words));
        }
        Self::from_phrases(entries)
    }

    pub fn to_text(&self) -> String {
        self.phrases
            .iter()
            .map(|(l, ids)| {
                let words: Vec<&str> = ids.iter().map(|&t| self.words[t].as_str()).collect();
                format!("{l} {}\n", words.join(" "))
            })
            .collect()
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    /// Longest phrase, in tokens; the number of mask slots.
    pub fn label_len(&self) -> usize {
        self.label_len
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.phrases.keys().copied()
    }

    pub fn word(&self, token: usize) -> &str {
        &self.words[token]
    }

    pub fn token_id(&self, word: &str) -> Option<usize> {
        self.word_ids.get(word).copied()
    }

    pub fn tokens(&self, label: Label) -> Result<&[usize], ScorerError> {
        self.phrases
            .get(&label)
            .map(Vec::as_slice)
            .ok_or(ScorerError::UnknownPredicate(label))
    }

    /// Token ids padded to `label_len` with [`PAD_TOKEN`].
    pub fn padded(&self, label: Label) -> Result<Vec<usize>, ScorerError> {
        let mut t = self.tokens(label)?.to_vec();
        t.resize(self.label_len, PAD_TOKEN);
        Ok(t)
    }
}

/// Frozen (unless fine-tuned) readout.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    /// `V × d_tok` token embeddings.
    pub embed: Matrix,
    /// One `V × d_tok` matrix per label slot.
    pub readout: Vec<Matrix>,
    /// Weight of each sequence position in the pooled mean.
    pub positions: Vec<f64>,
    pub learn_positions: bool,
}

impl ScorerParams {
    pub fn init(
        vocab_size: usize,
        d_tok: usize,
        label_len: usize,
        max_len: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let embed = random_gaussian_matrix(vocab_size, d_tok, 1.0, rng);
        let readout = (0..label_len)
            .map(|_| {
                let mut r = random_gaussian_matrix(vocab_size, d_tok, 0.5, rng);
                axpy(1.0, embed.as_slice(), r.as_mut_slice());
                r
            })
            .collect();
        Self {
            embed,
            readout,
            positions: vec![1.0; max_len],
            learn_positions: false,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            embed: Matrix::zeros(self.embed.rows(), self.embed.cols()),
            readout: self
                .readout
                .iter()
                .map(|r| Matrix::zeros(r.rows(), r.cols()))
                .collect(),
            positions: vec![0.0; self.positions.len()],
            learn_positions: self.learn_positions,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.rows()
    }

    pub fn d_tok(&self) -> usize {
        self.embed.cols()
    }

    pub fn label_len(&self) -> usize {
        self.readout.len()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.embed.as_slice()];
        out.extend(self.readout.iter().map(Matrix::as_slice));
        out.push(&self.positions);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.embed.as_mut_slice()];
        out.extend(self.readout.iter_mut().map(Matrix::as_mut_slice));
        out.push(&mut self.positions);
        out
    }

    /// Label rows `y` for a predicate: embeddings of its padded tokens.
    pub fn label_rows(&self, vocab: &PredicateVocab, label: Label) -> Result<Matrix, ScorerError> {
        let ids = vocab.padded(label)?;
        let mut m = Matrix::zeros(ids.len(), self.d_tok());
        for (r, &t) in ids.iter().enumerate() {
            if t >= self.vocab_size() {
                return Err(ScorerError::TokenOutOfRange {
                    token: t,
                    size: self.vocab_size(),
                });
            }
            m.row_mut(r).copy_from_slice(self.embed.row(t));
        }
        Ok(m)
    }
}

/// Where a segment's rows came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SegmentSource {
    Prompt { entry: usize },
    Exemplar { entry: usize },
    Label { predicate: Label },
    Query,
    Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub kind: TokenKind,
    pub source: SegmentSource,
    pub start: usize,
    pub len: usize,
    /// Similarity of the entry this segment belongs to.
    pub similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledPrompt {
    pub rows: Matrix,
    pub segments: Vec<Segment>,
    pub mask_start: usize,
    pub label_len: usize,
}

impl AssembledPrompt {
    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    /// Entries in sequence order, with their similarity.
    pub fn entry_order(&self) -> Vec<(usize, f64)> {
        self.segments
            .iter()
            .filter_map(|s| match s.source {
                SegmentSource::Prompt { entry } => Some((entry, s.similarity.unwrap_or(f64::NAN))),
                _ => None,
            })
            .collect()
    }
}

/// One retrieved entry with its (optional) exemplar.
#[derive(Debug, Clone, Copy)]
pub struct ContextItem<'a> {
    pub entry: usize,
    pub similarity: f64,
    pub prompt: &'a Matrix,
    pub exemplar: Option<(&'a TokenBlock, &'a Matrix, Label)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentOrder {
    /// Least similar first; the most similar entry accompanies the query.
    Ascending,
    /// Keep the caller's order; the last item accompanies the query.
    AsGiven,
}

/// Builds the in-context sequence. The exemplar of the entry adjacent to the
/// query is not used; entries without an exemplar contribute only their
/// prompt rows.
pub fn assemble_prompt(
    items: &[ContextItem<'_>],
    query: &TokenBlock,
    mask: &Matrix,
    order: SegmentOrder,
) -> Result<AssembledPrompt, ScorerError> {
    if items.is_empty() {
        return Err(ScorerError::NoContext);
    }
    let d = query.tokens.cols();
    let mut ordered: Vec<&ContextItem<'_>> = items.iter().collect();
    if order == SegmentOrder::Ascending {
        // Exact reverse of retrieval order (descending, lower index first).
        ordered.sort_by(|a, b| {
            a.similarity
                .partial_cmp(&b.similarity)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.entry.cmp(&a.entry))
        });
    }

    let mut blocks: Vec<&Matrix> = Vec::new();
    let mut segments = Vec::new();
    let mut cursor = 0;
    let mut push = |len: usize, kind, source, similarity, segments: &mut Vec<Segment>| {
        segments.push(Segment {
            kind,
            source,
            start: cursor,
            len,
            similarity,
        });
        cursor += len;
        cursor
    };

    let last = ordered.len() - 1;
    for (pos, item) in ordered.iter().enumerate() {
        if item.prompt.cols() != d {
            return Err(ScorerError::RowDimension {
                got: item.prompt.cols(),
                expected: d,
            });
        }
        let sim = Some(item.similarity);
        blocks.push(item.prompt);
        push(
            item.prompt.rows(),
            TokenKind::Prompt,
            SegmentSource::Prompt { entry: item.entry },
            sim,
            &mut segments,
        );
        if pos == last {
            break;
        }
        if let Some((ex, labels, predicate)) = item.exemplar {
            if ex.tokens.cols() != d || labels.cols() != d {
                return Err(ScorerError::RowDimension {
                    got: ex.tokens.cols(),
                    expected: d,
                });
            }
            blocks.push(&ex.tokens);
            push(
                ex.tokens.rows(),
                TokenKind::Exemplar,
                SegmentSource::Exemplar { entry: item.entry },
                sim,
                &mut segments,
            );
            blocks.push(labels);
            push(
                labels.rows(),
                TokenKind::Label,
                SegmentSource::Label { predicate },
                sim,
                &mut segments,
            );
        }
    }
    if mask.cols() != d {
        return Err(ScorerError::RowDimension {
            got: mask.cols(),
            expected: d,
        });
    }
    blocks.push(&query.tokens);
    let mask_start = push(
        query.tokens.rows(),
        query.kind,
        SegmentSource::Query,
        None,
        &mut segments,
    );
    blocks.push(mask);
    push(
        mask.rows(),
        TokenKind::Mask,
        SegmentSource::Mask,
        None,
        &mut segments,
    );

    Ok(AssembledPrompt {
        rows: Matrix::vstack(blocks, d),
        segments,
        mask_start,
        label_len: mask.rows(),
    })
}

/// Forward intermediates of [`score`].
#[derive(Debug, Clone)]
pub struct ScoreTrace {
    pub pooled: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
    mean: Vec<f64>,
    weight_sum: f64,
}

/// Per-slot distributions over the token vocabulary.
pub fn score(params: &ScorerParams, x: &AssembledPrompt) -> Result<Vec<Vec<f64>>, ScorerError> {
    score_traced(params, x).map(|t| t.probs)
}

pub fn score_traced(params: &ScorerParams, x: &AssembledPrompt) -> Result<ScoreTrace, ScorerError> {
    let d = params.d_tok();
    if x.rows.cols() != d {
        return Err(ScorerError::RowDimension {
            got: x.rows.cols(),
            expected: d,
        });
    }
    let n = x.len();
    if n > params.positions.len() {
        return Err(ScorerError::TooLong {
            got: n,
            max: params.positions.len(),
        });
    }
    if x.label_len != params.label_len() || x.mask_start + x.label_len != n {
        return Err(ScorerError::SlotCount {
            got: x.label_len,
            expected: params.label_len(),
        });
    }
    let weights = &params.positions[..n];
    let weight_sum: f64 = weights.iter().sum();
    let mut mean = vec![0.0; d];
    for (row, &w) in x.rows.iter_rows().zip(weights) {
        axpy(w / weight_sum, row, &mut mean);
    }
    let mut pooled = Vec::with_capacity(x.label_len);
    let mut probs = Vec::with_capacity(x.label_len);
    for j in 0..x.label_len {
        let mut p = mean.clone();
        axpy(1.0, x.rows.row(x.mask_start + j), &mut p);
        let logits = params.readout[j].matvec(&p);
        probs.push(softmax(&logits)?);
        pooled.push(p);
    }
    Ok(ScoreTrace {
        pooled,
        probs,
        mean,
        weight_sum,
    })
}

/// Backpropagates logit gradients `d_logits[j]` through the readout.
///
/// Returns the gradient with respect to every row of `x`. Readout and
/// positional gradients are accumulated into `grads` when given.
pub fn backward_score(
    params: &ScorerParams,
    x: &AssembledPrompt,
    trace: &ScoreTrace,
    d_logits: &[Vec<f64>],
    mut grads: Option<&mut ScorerParams>,
) -> Matrix {
    let d = params.d_tok();
    let n = x.len();
    let mut d_rows = Matrix::zeros(n, d);
    let mut d_mean = vec![0.0; d];
    for (j, g) in d_logits.iter().enumerate() {
        let mut d_pooled = vec![0.0; d];
        params.readout[j].matvec_t_acc(g, &mut d_pooled);
        if let Some(gr) = grads.as_deref_mut() {
            gr.readout[j].add_outer(g, &trace.pooled[j]);
        }
        axpy(1.0, &d_pooled, d_rows.row_mut(x.mask_start + j));
        axpy(1.0, &d_pooled, &mut d_mean);
    }
    let weights = &params.positions[..n];
    for (i, &w) in weights.iter().enumerate() {
        axpy(w / trace.weight_sum, &d_mean, d_rows.row_mut(i));
    }
    if let Some(gr) = grads {
        if params.learn_positions {
            for i in 0..n {
                let diff: f64 = x
                    .rows
                    .row(i)
                    .iter()
                    .zip(&trace.mean)
                    .zip(&d_mean)
                    .map(|((xi, m), g)| (xi - m) * g)
                    .sum();
                gr.positions[i] += diff / trace.weight_sum;
            }
        }
    }
    d_rows
}

/// Length-normalized log-likelihood of each candidate predicate, best first;
/// ties go to the lower label id.
pub fn rank_predicates(
    distributions: &[Vec<f64>],
    vocab: &PredicateVocab,
    candidates: &[Label],
) -> Result<Vec<(Label, f64)>, ScorerError> {
    if distributions.len() != vocab.label_len() {
        return Err(ScorerError::SlotCount {
            got: distributions.len(),
            expected: vocab.label_len(),
        });
    }
    let mut scored = candidates
        .iter()
        .map(|&label| {
            let toks = vocab.tokens(label)?;
            if toks.is_empty() {
                return Err(ScorerError::EmptyPhrase(label));
            }
            let mut total = 0.0;
            for (j, &t) in toks.iter().enumerate() {
                let dist = &distributions[j];
                let p = *dist.get(t).ok_or(ScorerError::TokenOutOfRange {
                    token: t,
                    size: dist.len(),
                })?;
                total += p.ln();
            }
            Ok((label, total / toks.len() as f64))
        })
        .collect::<Result<Vec<_>, ScorerError>>()?;
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> PredicateVocab {
        PredicateVocab::parse("0 on\n1 sitting on\n2 near\n").unwrap()
    }

    fn block(rows: usize, d: usize, kind: TokenKind, rng: &mut SeededRng) -> TokenBlock {
        TokenBlock {
            kind,
            tokens: random_gaussian_matrix(rows, d, 1.0, rng),
        }
    }

    #[test]
    fn vocab_parsing() {
        let v = vocab();
        assert_eq!(v.vocab_size(), 4);
        assert_eq!(v.label_len(), 2);
        assert_eq!(v.tokens(1).unwrap(), &[2, 1]);
        assert_eq!(v.padded(0).unwrap(), vec![1, PAD_TOKEN]);
        assert_eq!(PredicateVocab::parse(&v.to_text()).unwrap(), v);
        assert!(PredicateVocab::parse("x on\n").is_err());
        assert!(matches!(
            PredicateVocab::parse("3\n"),
            Err(ScorerError::EmptyPhrase(3))
        ));
    }

    fn items<'a>(
        prompts: &'a [Matrix],
        exemplars: &'a [(TokenBlock, Matrix)],
        sims: &[f64],
    ) -> Vec<ContextItem<'a>> {
        sims.iter()
            .enumerate()
            .map(|(i, &s)| ContextItem {
                entry: i,
                similarity: s,
                prompt: &prompts[i],
                exemplar: Some((&exemplars[i].0, &exemplars[i].1, i as Label)),
            })
            .collect()
    }

    #[test]
    fn assembly_row_counts() {
        let mut rng = SeededRng::new(1);
        let d = 4;
        let prompts: Vec<Matrix> = (0..3)
            .map(|_| random_gaussian_matrix(8, d, 1.0, &mut rng))
            .collect();
        let exemplars: Vec<(TokenBlock, Matrix)> = (0..3)
            .map(|_| {
                (
                    block(12, d, TokenKind::Exemplar, &mut rng),
                    random_gaussian_matrix(2, d, 1.0, &mut rng),
                )
            })
            .collect();
        let query = block(12, d, TokenKind::Exemplar, &mut rng);
        let mask = random_gaussian_matrix(2, d, 1.0, &mut rng);

        let one = assemble_prompt(
            &items(&prompts, &exemplars, &[0.9])[..1],
            &query,
            &mask,
            SegmentOrder::Ascending,
        )
        .unwrap();
        assert_eq!(one.len(), 8 + 12 + 2);
        let three = assemble_prompt(
            &items(&prompts, &exemplars, &[0.9, 0.5, 0.1]),
            &query,
            &mask,
            SegmentOrder::Ascending,
        )
        .unwrap();
        assert_eq!(three.len(), 66);
        assert_eq!(three.mask_start, 64);
        assert!(assemble_prompt(&[], &query, &mask, SegmentOrder::Ascending).is_err());
    }

    #[test]
    fn assembly_sorts_ascending() {
        let mut rng = SeededRng::new(2);
        let d = 3;
        let prompts: Vec<Matrix> = (0..4)
            .map(|_| random_gaussian_matrix(2, d, 1.0, &mut rng))
            .collect();
        let exemplars: Vec<(TokenBlock, Matrix)> = (0..4)
            .map(|_| {
                (
                    block(4, d, TokenKind::Exemplar, &mut rng),
                    random_gaussian_matrix(1, d, 1.0, &mut rng),
                )
            })
            .collect();
        let query = block(4, d, TokenKind::Exemplar, &mut rng);
        let mask = random_gaussian_matrix(1, d, 1.0, &mut rng);
        let shuffled = items(&prompts, &exemplars, &[0.2, 0.9, -0.3, 0.5]);
        let x = assemble_prompt(&shuffled, &query, &mask, SegmentOrder::Ascending).unwrap();
        let order: Vec<usize> = x.entry_order().iter().map(|p| p.0).collect();
        assert_eq!(order, vec![2, 0, 3, 1]);
        let sims: Vec<f64> = x.entry_order().iter().map(|p| p.1).collect();
        assert!(sims.windows(2).all(|w| w[0] <= w[1]));
        // The most similar entry sits right before the query, without its exemplar.
        let tail: Vec<_> = x.segments.iter().rev().take(3).map(|s| s.source).collect();
        assert_eq!(
            tail,
            vec![
                SegmentSource::Mask,
                SegmentSource::Query,
                SegmentSource::Prompt { entry: 1 }
            ]
        );
        assert_eq!(x.rows.row(x.mask_start), mask.row(0));

        let given = assemble_prompt(&shuffled, &query, &mask, SegmentOrder::AsGiven).unwrap();
        let order: Vec<usize> = given.entry_order().iter().map(|p| p.0).collect();
        assert_eq!(order, vec![0, 1, 2, 3]);
    }

    fn assembled(
        d: usize,
        n_rows: usize,
        label_len: usize,
        rng: &mut SeededRng,
    ) -> AssembledPrompt {
        AssembledPrompt {
            rows: random_gaussian_matrix(n_rows, d, 1.0, rng),
            segments: vec![],
            mask_start: n_rows - label_len,
            label_len,
        }
    }

    #[test]
    fn zero_readout_is_uniform() {
        let mut rng = SeededRng::new(3);
        let mut p = ScorerParams::init(7, 4, 2, 30, &mut rng);
        for r in &mut p.readout {
            *r = Matrix::zeros(7, 4);
        }
        let x = assembled(4, 10, 2, &mut rng);
        for dist in score(&p, &x).unwrap() {
            for v in dist {
                assert!((v - 1.0 / 7.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn score_matches_direct_arithmetic() {
        let mut rng = SeededRng::new(4);
        let mut p = ScorerParams::init(9, 5, 3, 40, &mut rng);
        for w in p.positions.iter_mut() {
            *w = 0.5 + rng.uniform();
        }
        let x = assembled(5, 17, 3, &mut rng);
        let got = score(&p, &x).unwrap();
        let wsum: f64 = p.positions[..17].iter().sum();
        for j in 0..3 {
            let mut pooled = [0.0; 5];
            for c in 0..5 {
                let mut acc = 0.0;
                for i in 0..17 {
                    acc += p.positions[i] * x.rows.get(i, c);
                }
                pooled[c] = acc / wsum + x.rows.get(14 + j, c);
            }
            let logits: Vec<f64> = (0..9)
                .map(|v| (0..5).map(|c| p.readout[j].get(v, c) * pooled[c]).sum())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let total: f64 = got[j].iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
            for v in 0..9 {
                assert!((got[j][v] - logits[v].exp() / z).abs() < 1e-12);
            }
        }
        let wrong = assembled(4, 17, 3, &mut rng);
        assert!(matches!(
            score(&p, &wrong),
            Err(ScorerError::RowDimension { .. })
        ));
    }

    #[test]
    fn ranking_rules() {
        let v = PredicateVocab::parse("0 a\n1 b\n2 c\n").unwrap();
        let dists = vec![vec![0.1, 0.2, 0.5, 0.2]];
        let r = rank_predicates(&dists, &v, &[0, 1, 2]).unwrap();
        assert_eq!(r.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 0, 2]);
        // Ties between label 0 and 2 resolved by label id.
        assert!(r[1].1 == r[2].1);

        // Two slots, V = 2 plus padding: "x" and "x x".
        let v = PredicateVocab::parse("0 x\n1 x x\n").unwrap();
        let dists = vec![vec![0.0, 0.8, 0.2], vec![0.0, 0.5, 0.5]];
        let r = rank_predicates(&dists, &v, &[0, 1]).unwrap();
        let s0 = 0.8f64.ln();
        let s1 = (0.8f64.ln() + 0.5f64.ln()) / 2.0;
        assert_eq!(r, vec![(0, s0), (1, s1)]);
        assert!(rank_predicates(&dists[..1], &v, &[0]).is_err());
    }

    #[test]
    fn padding_does_not_change_single_token_scores() {
        let short = PredicateVocab::parse("0 x\n1 y\n").unwrap();
        let long = PredicateVocab::parse("0 x\n1 y\n2 x y\n").unwrap();
        let d1 = vec![vec![0.0, 0.3, 0.7]];
        let d2 = vec![vec![0.0, 0.3, 0.7], vec![0.9, 0.05, 0.05]];
        let a = rank_predicates(&d1, &short, &[0, 1]).unwrap();
        let b = rank_predicates(&d2, &long, &[0, 1]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn score_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(5);
        let mut p = ScorerParams::init(6, 3, 2, 20, &mut rng);
        p.learn_positions = true;
        for w in p.positions.iter_mut() {
            *w = 0.5 + rng.uniform();
        }
        let x = assembled(3, 9, 2, &mut rng);
        let target = [2usize, 4usize];
        let loss = |p: &ScorerParams, x: &AssembledPrompt| -> f64 {
            let d = score(p, x).unwrap();
            -(d[0][target[0]].ln() + d[1][target[1]].ln())
        };
        let trace = score_traced(&p, &x).unwrap();
        let d_logits: Vec<Vec<f64>> = (0..2)
            .map(|j| {
                let mut g = trace.probs[j].clone();
                g[target[j]] -= 1.0;
                g
            })
            .collect();
        let mut grads = p.zeros_like();
        let d_rows = backward_score(&p, &x, &trace, &d_logits, Some(&mut grads));
        let h = 1e-5;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-3);
        for i in 0..x.rows.as_slice().len() {
            let mut xp = x.clone();
            xp.rows.as_mut_slice()[i] += h;
            let mut xm = x.clone();
            xm.rows.as_mut_slice()[i] -= h;
            let num = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
            assert!(close(d_rows.as_slice()[i], num));
        }
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
        // Skip the embedding table (index 0): it reaches the loss only through label rows.
        for ti in 1..analytic.len() {
            for j in 0..analytic[ti].len().min(12) {
                let mut pp = p.clone();
                pp.tensors_mut()[ti][j] += h;
                let mut pm = p.clone();
                pm.tensors_mut()[ti][j] -= h;
                let num = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
                assert!(close(analytic[ti][j], num), "tensor {ti}[{j}]");
            }
        }
    }
}
