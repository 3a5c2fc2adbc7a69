//! Image-token ranking and filtering.
//!
//! After layer `K` every candidate token (by default the image span) is ranked
//! by the attention it received at layer `K`, and the lowest `R%` are removed
//! from all later layers. With `K = 0` no attention exists yet, so the
//! candidates are dropped at random (or by a fixed segment rule).

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{InferenceMode, Model};
use crate::numkernel::{DenseMatrix, MacCounter};
use crate::segments::{SegmentKind, SegmentedSequence, Span};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PruneError {
    #[error("filtering ratio {0}% is outside [0, 100]")]
    Ratio(u32),
    #[error("filtering layer K={layer} exceeds layer count {layers}")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error(
        "K=0 has no attention to rank by; use criterion=random or a head-first segment target"
    )]
    AttentionAtLayerZero,
    #[error("the output segment cannot be a pruning target")]
    OutTarget,
    #[error("expected {expected} scores for the candidate span, got {got}")]
    ScoreLength { expected: usize, got: usize },
    #[error("span {span:?} lies outside the {n_input}-token input")]
    SpanOutOfRange { span: Span, n_input: usize },
    #[error("invalid prune spec `{input}`: {reason}")]
    Parse { input: String, reason: String },
}

/// Which query rows of the layer-K attention contribute to a token's score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringRule {
    /// Mean over every query row that can see the token.
    #[default]
    AllRows,
    /// Attention from the final input position only.
    LastRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetStrategy {
    LowestAttention,
    HeadFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneCriterion {
    AttentionRank(ScoringRule),
    Random {
        seed: u64,
    },
    SegmentTarget {
        kind: SegmentKind,
        strategy: TargetStrategy,
    },
}

impl PruneCriterion {
    pub fn target(&self) -> SegmentKind {
        match self {
            Self::SegmentTarget { kind, .. } => *kind,
            _ => SegmentKind::Img,
        }
    }

    pub fn needs_attention(&self) -> bool {
        matches!(
            self,
            Self::AttentionRank(_)
                | Self::SegmentTarget {
                    strategy: TargetStrategy::LowestAttention,
                    ..
                }
        )
    }

    pub fn scoring_rule(&self) -> ScoringRule {
        match self {
            Self::AttentionRank(rule) => *rule,
            _ => ScoringRule::AllRows,
        }
    }
}

/// Filtering layer `K`, ratio `R` (percent) and ranking criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub layer: usize,
    pub ratio: u32,
    pub criterion: PruneCriterion,
}

impl PruneConfig {
    pub fn new(layer: usize, ratio: u32, criterion: PruneCriterion) -> Self {
        Self {
            layer,
            ratio,
            criterion,
        }
    }

    pub fn attention(layer: usize, ratio: u32) -> Self {
        Self::new(
            layer,
            ratio,
            PruneCriterion::AttentionRank(ScoringRule::AllRows),
        )
    }

    pub fn random(layer: usize, ratio: u32, seed: u64) -> Self {
        Self::new(layer, ratio, PruneCriterion::Random { seed })
    }

    pub fn validate(&self, layers: usize) -> Result<(), PruneError> {
        if self.ratio > 100 {
            return Err(PruneError::Ratio(self.ratio));
        }
        if self.layer > layers {
            return Err(PruneError::LayerOutOfRange {
                layer: self.layer,
                layers,
            });
        }
        if self.criterion.target() == SegmentKind::Out {
            return Err(PruneError::OutTarget);
        }
        if self.layer == 0 && self.criterion.needs_attention() {
            return Err(PruneError::AttentionAtLayerZero);
        }
        Ok(())
    }
}

impl fmt::Display for PruneConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "K={},R={},criterion=", self.layer, self.ratio)?;
        match self.criterion {
            PruneCriterion::AttentionRank(ScoringRule::AllRows) => f.write_str("attn"),
            PruneCriterion::AttentionRank(ScoringRule::LastRow) => f.write_str("attn-last"),
            PruneCriterion::Random { seed } => write!(f, "random:{seed}"),
            PruneCriterion::SegmentTarget { kind, strategy } => {
                let s = match strategy {
                    TargetStrategy::LowestAttention => "lowest",
                    TargetStrategy::HeadFirst => "head-first",
                };
                write!(f, "segment:{kind}:{s}")
            }
        }
    }
}

/// Parses `K=<int>,R=<int>,criterion=<attn|attn-last|random:SEED|segment:KIND:STRATEGY>`.
/// `R` defaults to 50 and `criterion` to `attn` when omitted.
impl FromStr for PruneConfig {
    type Err = PruneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fail = |reason: String| PruneError::Parse {
            input: s.to_owned(),
            reason,
        };
        let mut layer = None;
        let mut ratio = 50;
        let mut criterion = PruneCriterion::AttentionRank(ScoringRule::AllRows);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| fail(format!("expected key=value, got `{part}`")))?;
            match key.trim() {
                "K" | "k" => {
                    layer = Some(value.parse().map_err(|e| fail(format!("K: {e}")))?);
                }
                "R" | "r" => {
                    ratio = value
                        .trim_end_matches('%')
                        .parse()
                        .map_err(|e| fail(format!("R: {e}")))?;
                }
                "criterion" => criterion = parse_criterion(value).map_err(fail)?,
                other => return Err(fail(format!("unknown key `{other}`"))),
            }
        }
        let layer = layer.ok_or_else(|| fail("missing K".into()))?;
        if ratio > 100 {
            return Err(PruneError::Ratio(ratio));
        }
        Ok(Self::new(layer, ratio, criterion))
    }
}

fn parse_criterion(v: &str) -> Result<PruneCriterion, String> {
    let parts: Vec<&str> = v.split(':').collect();
    match parts.as_slice() {
        ["attn"] => Ok(PruneCriterion::AttentionRank(ScoringRule::AllRows)),
        ["attn-last"] => Ok(PruneCriterion::AttentionRank(ScoringRule::LastRow)),
        ["random", seed] => seed
            .parse()
            .map(|seed| PruneCriterion::Random { seed })
            .map_err(|e| format!("random seed: {e}")),
        ["segment", kind, strategy] => {
            let kind: SegmentKind = kind.parse()?;
            let strategy = match *strategy {
                "lowest" | "lowest-attention" => TargetStrategy::LowestAttention,
                "head-first" => TargetStrategy::HeadFirst,
                other => return Err(format!("unknown segment strategy `{other}`")),
            };
            Ok(PruneCriterion::SegmentTarget { kind, strategy })
        }
        _ => Err(format!("unknown criterion `{v}`")),
    }
}

/// Outcome of ranking: which input positions survive past layer `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    /// Score of each candidate in span order; absent for non-attention rankings.
    pub scores: Option<Vec<f64>>,
    pub candidate: Span,
}

impl PruneDecision {
    /// Keeps every position.
    pub fn keep_all(n_input: usize, candidate: Span) -> Self {
        Self {
            kept: (0..n_input).collect(),
            dropped: Vec::new(),
            scores: None,
            candidate,
        }
    }

    pub fn n_input(&self) -> usize {
        self.kept.len() + self.dropped.len()
    }

    /// `dropped` as a dense mask over input positions.
    pub fn dropped_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_input()];
        for &p in &self.dropped {
            mask[p] = true;
        }
        mask
    }
}

/// Accumulates per-head received attention from post-softmax matrices.
#[derive(Debug, Clone)]
pub struct ReceivedAttention {
    n: usize,
    rule: ScoringRule,
    per_head: Vec<Vec<f64>>,
}

impl ReceivedAttention {
    pub fn new(n: usize, rule: ScoringRule) -> Self {
        Self {
            n,
            rule,
            per_head: Vec::new(),
        }
    }

    /// Adds one head's `n x n` causal attention matrix.
    pub fn accumulate_head(&mut self, probs: &DenseMatrix) {
        assert_eq!(probs.shape(), (self.n, self.n), "attention matrix shape");
        let n = self.n;
        let scores = match self.rule {
            ScoringRule::AllRows => {
                let mut col = vec![0.0f64; n];
                for q in 0..n {
                    for (c, v) in col.iter_mut().zip(probs.row(q)) {
                        *c += *v as f64;
                    }
                }
                col.iter_mut()
                    .enumerate()
                    .for_each(|(p, c)| *c /= (n - p) as f64);
                col
            }
            ScoringRule::LastRow if n > 0 => probs.row(n - 1).iter().map(|v| *v as f64).collect(),
            ScoringRule::LastRow => Vec::new(),
        };
        self.per_head.push(scores);
    }

    pub fn heads(&self) -> usize {
        self.per_head.len()
    }

    /// Head-mean score for each position in `span`.
    pub fn scores(&self, span: Range<usize>) -> Vec<f64> {
        let h = self.per_head.len().max(1) as f64;
        span.map(|p| self.per_head.iter().map(|s| s[p]).sum::<f64>() / h)
            .collect()
    }
}

/// Average attention each token in `span` received, over the query rows that
/// can see it, then averaged across heads.
pub fn score_received_attention(heads: &[DenseMatrix], span: Range<usize>) -> Vec<f64> {
    score_with_rule(heads, span, ScoringRule::AllRows)
}

pub fn score_with_rule(heads: &[DenseMatrix], span: Range<usize>, rule: ScoringRule) -> Vec<f64> {
    if span.is_empty() || heads.is_empty() {
        return Vec::new();
    }
    let mut acc = ReceivedAttention::new(heads[0].rows(), rule);
    for h in heads {
        acc.accumulate_head(h);
    }
    acc.scores(span)
}

/// How candidates are ordered before the lowest `R%` are dropped.
#[derive(Debug, Clone, Copy)]
pub enum Ranking<'a> {
    Scores(&'a [f64]),
    Random(u64),
    HeadFirst,
}

/// Number of candidates removed from a span of `len` tokens at ratio `ratio`%.
pub fn drop_count(len: usize, ratio: u32) -> usize {
    len * ratio as usize / 100
}

pub fn select_pruned(
    ranking: Ranking<'_>,
    span: Span,
    ratio: u32,
    n_input: usize,
) -> Result<PruneDecision, PruneError> {
    if ratio > 100 {
        return Err(PruneError::Ratio(ratio));
    }
    if span.end > n_input || span.start > span.end {
        return Err(PruneError::SpanOutOfRange { span, n_input });
    }
    let len = span.len();
    let count = drop_count(len, ratio);
    let mut scores_out = None;
    let mut dropped: Vec<usize> = match ranking {
        Ranking::Scores(scores) => {
            if scores.len() != len {
                return Err(PruneError::ScoreLength {
                    expected: len,
                    got: scores.len(),
                });
            }
            scores_out = Some(scores.to_vec());
            let mut order: Vec<usize> = (0..len).collect();
            // lowest score first; among equal scores the later position goes first
            order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)));
            order[..count].iter().map(|i| span.start + i).collect()
        }
        Ranking::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, len, count)
                .into_iter()
                .map(|i| span.start + i)
                .collect()
        }
        Ranking::HeadFirst => (span.start..span.start + count).collect(),
    };
    dropped.sort_unstable();
    let mut is_dropped = vec![false; n_input];
    dropped.iter().for_each(|&p| is_dropped[p] = true);
    let kept = (0..n_input).filter(|&p| !is_dropped[p]).collect();
    Ok(PruneDecision {
        kept,
        dropped,
        scores: scores_out,
        candidate: span,
    })
}

/// Attention-sink plus sliding-window pattern: query `q` sees positions
/// `< sink` and positions in `(q - window, q]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamingMask {
    pub sink: usize,
    pub window: usize,
}

impl StreamingMask {
    pub fn new(sink: usize, window: usize) -> Self {
        assert!(window >= 1, "window must be at least 1");
        Self { sink, window }
    }

    #[inline]
    pub fn allows(&self, q: usize, k: usize) -> bool {
        k <= q && (k < self.sink || k + self.window > q)
    }

    /// Positions visible to query `q`, ascending.
    pub fn visible(&self, q: usize) -> Vec<usize> {
        (0..=q).filter(|&k| self.allows(q, k)).collect()
    }

    /// True when the pattern equals plain causal attention for `n` tokens.
    pub fn is_degenerate(&self, n: usize) -> bool {
        self.sink + self.window >= n
    }
}

impl FromStr for StreamingMask {
    type Err = String;

    /// Parses `S=<int>,W=<int>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut sink = None;
        let mut window = None;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got `{part}`"))?;
            let v: usize = v.parse().map_err(|e| format!("{k}: {e}"))?;
            match k {
                "S" | "s" => sink = Some(v),
                "W" | "w" => window = Some(v),
                other => return Err(format!("unknown key `{other}`")),
            }
        }
        let sink = sink.ok_or("missing S")?;
        let window = window.ok_or("missing W")?;
        if window == 0 {
            return Err("W must be at least 1".into());
        }
        Ok(Self { sink, window })
    }
}

impl fmt::Display for StreamingMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S={},W={}", self.sink, self.window)
    }
}

/// Full-length forward that emulates removal with attention masks: layers
/// after `layer` cannot attend to dropped positions and dropped positions
/// receive no residual updates. Returns the last-position logits.
pub fn masked_reference_forward(
    model: &Model,
    seq: &SegmentedSequence,
    decision: &PruneDecision,
    layer: usize,
    counter: &mut MacCounter,
) -> Result<Vec<f32>, crate::Error> {
    let mode = InferenceMode::Masked {
        layer,
        decision: decision.clone(),
    };
    Ok(model.prefill(seq, &mode, counter)?.logits)
}
