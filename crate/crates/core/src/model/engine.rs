use std::time::Duration;

use serde::{Serialize, Serializer};

use super::{ModelConfig, WeightSet};
use crate::clock::Stopwatch;
use crate::numkernel::{
    gelu_in_place, layer_norm, matmul, softmax_rows_in_place, softmax_slice, DenseMatrix,
    KernelError, MacCounter,
};
use crate::pruning::{
    select_pruned, PruneConfig, PruneCriterion, PruneDecision, PruneError, Ranking,
    ReceivedAttention, StreamingMask, TargetStrategy,
};
use crate::segments::{SegmentedSequence, TokenId};
use crate::Error;

const LN_EPS: f32 = 1e-5;

/// How attention is routed during a generation.
#[derive(Debug, Clone, PartialEq)]
pub enum InferenceMode {
    /// Plain causal attention over every position.
    Baseline,
    /// Rank and physically remove tokens after layer `K`.
    FastV(PruneConfig),
    /// Sink + sliding-window attention at every layer.
    Streaming(StreamingMask),
    /// Reference for `FastV`: keep every position but mask `decision.dropped`
    /// in layers after `layer` and freeze their hidden states there.
    Masked {
        layer: usize,
        decision: PruneDecision,
    },
}

#[derive(Debug, Clone)]
enum Routing {
    Full,
    Masked { after: usize, blocked: Vec<bool> },
    Streaming(StreamingMask),
}

impl Routing {
    /// Whether query position `q` may attend to key position `k` in `layer`.
    #[inline]
    fn allows(&self, layer: usize, q: usize, k: usize) -> bool {
        if k > q {
            return false;
        }
        match self {
            Routing::Full => true,
            Routing::Masked { after, blocked } => {
                layer <= *after || k == q || !blocked.get(k).copied().unwrap_or(false)
            }
            Routing::Streaming(mask) => mask.allows(q, k),
        }
    }

    #[inline]
    fn frozen(&self, layer: usize, pos: usize) -> bool {
        match self {
            Routing::Masked { after, blocked } => {
                layer > *after && blocked.get(pos).copied().unwrap_or(false)
            }
            _ => false,
        }
    }
}

/// Keys and values of one layer over its live positions.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub positions: Vec<usize>,
    pub keys: DenseMatrix,
    pub values: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct KVCache {
    layers: Vec<LayerCache>,
    routing: Routing,
    n_input: usize,
    total_len: usize,
}

impl KVCache {
    /// Live original positions of `layer` (1-indexed), ascending.
    pub fn live_positions(&self, layer: usize) -> &[usize] {
        &self.layers[layer - 1].positions
    }

    pub fn layer(&self, layer: usize) -> &LayerCache {
        &self.layers[layer - 1]
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_input(&self) -> usize {
        self.n_input
    }

    /// Input plus generated tokens processed so far.
    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn live_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.positions.len()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub cache: KVCache,
    /// Logits of the last live input position.
    pub logits: Vec<f32>,
    pub decision: Option<PruneDecision>,
    /// Head-averaged `n_input x n_input` attention for each requested layer.
    /// Rows of positions not live in that layer are zero.
    pub captured: Vec<(usize, DenseMatrix)>,
}

/// Post-softmax attention of one query row in one layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerAttention {
    /// Original positions the row covers, ascending.
    pub positions: Vec<usize>,
    /// One probability row per head, aligned with `positions`.
    pub heads: Vec<Vec<f32>>,
}

impl LayerAttention {
    pub fn head_mean(&self) -> Vec<f32> {
        let h = self.heads.len() as f32;
        (0..self.positions.len())
            .map(|i| self.heads.iter().map(|r| r[i]).sum::<f32>() / h)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub logits: Vec<f32>,
    /// One entry per layer, in layer order.
    pub attention: Vec<LayerAttention>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxNewTokens,
    MaxSeq,
}

fn secs<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Timings {
    #[serde(serialize_with = "secs")]
    pub prefill: Duration,
    #[serde(serialize_with = "secs")]
    pub decode: Duration,
}

impl Timings {
    pub fn total(&self) -> Duration {
        self.prefill + self.decode
    }
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    pub eos_id: Option<TokenId>,
    /// Keep every decode step's attention rows in the result.
    pub record_attention: bool,
    /// Layers whose prefill attention is captured for map export.
    pub capture_layers: Vec<usize>,
}

impl GenerateOptions {
    pub fn new(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            eos_id: Some(0),
            record_attention: false,
            capture_layers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub output_ids: Vec<TokenId>,
    pub decision: Option<PruneDecision>,
    /// Per generated token (when recorded): its attention row in every layer.
    pub steps: Vec<Vec<LayerAttention>>,
    pub counter: MacCounter,
    pub timings: Timings,
    pub stop: StopReason,
    /// Live positions per layer after prefill.
    pub live_counts: Vec<usize>,
    pub captured: Vec<(usize, DenseMatrix)>,
}

/// Weights plus configuration; immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: WeightSet,
}

/// Sinusoidal encoding of `pos` at channel `i` of a `d`-wide embedding.
fn positional(pos: usize, i: usize, d: usize) -> f32 {
    let pair = (i / 2) as f64;
    let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
    if i.is_multiple_of(2) {
        angle.sin() as f32
    } else {
        angle.cos() as f32
    }
}

fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

fn integrity(layer: usize, e: KernelError) -> Error {
    Error::Integrity(format!("layer {layer}: {e}"))
}

impl Model {
    pub fn new(config: ModelConfig, weights: WeightSet) -> Result<Self, Error> {
        config.validate()?;
        if weights.layers.len() != config.layers
            || weights.embedding.shape() != (config.vocab, config.d_model)
            || weights.out_proj.shape() != (config.d_model, config.vocab)
        {
            return Err(Error::Integrity("weight shapes do not match config".into()));
        }
        Ok(Self { config, weights })
    }

    /// Model with [`synth_weights`](super::synth_weights) for `seed`.
    pub fn synthetic(config: ModelConfig, seed: u64) -> Result<Self, Error> {
        let weights = super::synth_weights(&config, seed)?;
        Self::new(config, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &WeightSet {
        &self.weights
    }

    fn embed(&self, ids: &[TokenId], positions: &[usize]) -> Result<DenseMatrix, Error> {
        let d = self.config.d_model;
        let mut x = DenseMatrix::zeros(ids.len(), d);
        for (r, (&id, &pos)) in ids.iter().zip(positions).enumerate() {
            if id as usize >= self.config.vocab {
                return Err(Error::Token {
                    id,
                    vocab: self.config.vocab,
                });
            }
            let emb = self.weights.embedding.row(id as usize);
            for (i, out) in x.row_mut(r).iter_mut().enumerate() {
                *out = emb[i] + positional(pos, i, d);
            }
        }
        Ok(x)
    }

    fn logits(&self, last: &[f32], counter: &mut MacCounter) -> Result<Vec<f32>, Error> {
        let row = DenseMatrix::from_vec(1, last.len(), last.to_vec())?;
        let h = layer_norm(&row, &self.weights.lnf_g, &self.weights.lnf_b, LN_EPS)?;
        Ok(matmul(&h, &self.weights.out_proj, counter, "lm_head")?.into_vec())
    }

    /// One transformer layer over rows at `positions` (ascending original
    /// positions). Returns the new hidden states, keys and values.
    #[allow(clippy::too_many_arguments)]
    fn layer_forward(
        &self,
        layer: usize,
        x: DenseMatrix,
        positions: &[usize],
        routing: &Routing,
        counter: &mut MacCounter,
        mut scorer: Option<&mut ReceivedAttention>,
        mut capture: Option<&mut DenseMatrix>,
    ) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix), Error> {
        let lw = &self.weights.layers[layer - 1];
        let n = x.rows();
        let (d, heads, dh) = (
            self.config.d_model,
            self.config.n_heads,
            self.config.head_dim(),
        );
        let qkv = format!("layer{layer}/qkv");
        let scores_scope = format!("layer{layer}/attn_scores");
        let values_scope = format!("layer{layer}/attn_values");

        let h = layer_norm(&x, &lw.ln1_g, &lw.ln1_b, LN_EPS)?;
        let q = matmul(&h, &lw.wq, counter, &qkv)?;
        let k = matmul(&h, &lw.wk, counter, &qkv)?;
        let v = matmul(&h, &lw.wv, counter, &qkv)?;

        let mut allowed = vec![false; n * n];
        for (r, &qp) in positions.iter().enumerate() {
            for (c, &kp) in positions.iter().enumerate().take(r + 1) {
                allowed[r * n + c] = routing.allows(layer, qp, kp);
            }
        }

        let scale = 1.0 / (dh as f32).sqrt();
        let mut attn = DenseMatrix::zeros(n, d);
        for head in 0..heads {
            let qh = q.col_block(head * dh, dh);
            let kh_t = k.col_block(head * dh, dh).transpose();
            let vh = v.col_block(head * dh, dh);
            let mut s = matmul(&qh, &kh_t, counter, &scores_scope)?;
            for (val, ok) in s.data_mut().iter_mut().zip(&allowed) {
                *val = if *ok { *val * scale } else { f32::NEG_INFINITY };
            }
            softmax_rows_in_place(&mut s).map_err(|e| integrity(layer, e))?;
            if let Some(acc) = scorer.as_deref_mut() {
                acc.accumulate_head(&s);
            }
            if let Some(map) = capture.as_deref_mut() {
                let w = 1.0 / heads as f32;
                for (r, &qp) in positions.iter().enumerate() {
                    for (c, &kp) in positions.iter().enumerate().take(r + 1) {
                        let cur = map.get(qp, kp);
                        map.set(qp, kp, cur + w * s.get(r, c));
                    }
                }
            }
            let oh = matmul(&s, &vh, counter, &values_scope)?;
            attn.set_col_block(head * dh, &oh);
        }

        let mut a = matmul(&attn, &lw.wo, counter, &format!("layer{layer}/out_proj"))?;
        self.freeze_rows(&mut a, layer, positions, routing);
        let mut x = x;
        x.add_assign(&a)?;

        let ffn = format!("layer{layer}/ffn");
        let h2 = layer_norm(&x, &lw.ln2_g, &lw.ln2_b, LN_EPS)?;
        let mut up = matmul(&h2, &lw.w1, counter, &ffn)?;
        gelu_in_place(&mut up);
        let mut f = matmul(&up, &lw.w2, counter, &ffn)?;
        self.freeze_rows(&mut f, layer, positions, routing);
        x.add_assign(&f)?;
        Ok((x, k, v))
    }

    fn freeze_rows(
        &self,
        m: &mut DenseMatrix,
        layer: usize,
        positions: &[usize],
        routing: &Routing,
    ) {
        for (r, &p) in positions.iter().enumerate() {
            if routing.frozen(layer, p) {
                m.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn prefill(
        &self,
        seq: &SegmentedSequence,
        mode: &InferenceMode,
        counter: &mut MacCounter,
    ) -> Result<PrefillOutput, Error> {
        self.prefill_with(seq, mode, counter, &[])
    }

    /// Forward pass over the input sequence, populating the KV cache.
    /// `capture_layers` (1-indexed) select layers whose head-averaged attention
    /// is returned.
    pub fn prefill_with(
        &self,
        seq: &SegmentedSequence,
        mode: &InferenceMode,
        counter: &mut MacCounter,
        capture_layers: &[usize],
    ) -> Result<PrefillOutput, Error> {
        let cfg = &self.config;
        let n = seq.n_input();
        if n > cfg.max_seq {
            return Err(Error::SequenceTooLong {
                len: n,
                max_seq: cfg.max_seq,
            });
        }
        let prune = match mode {
            InferenceMode::FastV(p) => {
                p.validate(cfg.layers)?;
                Some(*p)
            }
            _ => None,
        };
        let routing = match mode {
            InferenceMode::Baseline | InferenceMode::FastV(_) => Routing::Full,
            InferenceMode::Streaming(mask) => {
                if mask.is_degenerate(n) {
                    log::warn!("streaming mask {mask} covers all {n} input tokens; attention is fully causal");
                }
                Routing::Streaming(*mask)
            }
            InferenceMode::Masked { layer, decision } => {
                if *layer > cfg.layers {
                    return Err(PruneError::LayerOutOfRange {
                        layer: *layer,
                        layers: cfg.layers,
                    }
                    .into());
                }
                if decision.n_input() != n {
                    return Err(Error::Integrity(format!(
                        "decision covers {} positions, sequence has {n}",
                        decision.n_input()
                    )));
                }
                Routing::Masked {
                    after: *layer,
                    blocked: decision.dropped_mask(),
                }
            }
        };

        let mut positions: Vec<usize> = (0..n).collect();
        let mut x = self.embed(seq.token_ids(), &positions)?;
        let mut decision = None;

        if let Some(p) = prune.filter(|p| p.layer == 0) {
            let d = decide(&p, seq, None)?;
            x = x.select_rows(&d.kept);
            positions = d.kept.clone();
            decision = Some(d);
        }

        let mut layers = Vec::with_capacity(cfg.layers);
        let mut captured = Vec::new();
        for layer in 1..=cfg.layers {
            let scoring_here = prune.filter(|p| p.layer == layer);
            let mut scorer = scoring_here
                .filter(|p| p.criterion.needs_attention())
                .map(|p| ReceivedAttention::new(positions.len(), p.criterion.scoring_rule()));
            let mut capture = capture_layers
                .contains(&layer)
                .then(|| DenseMatrix::zeros(n, n));
            let (nx, keys, values) = self.layer_forward(
                layer,
                x,
                &positions,
                &routing,
                counter,
                scorer.as_mut(),
                capture.as_mut(),
            )?;
            x = nx;
            layers.push(LayerCache {
                positions: positions.clone(),
                keys,
                values,
            });
            if let Some(map) = capture {
                captured.push((layer, map));
            }
            if let Some(p) = scoring_here {
                let d = decide(&p, seq, scorer.as_ref())?;
                if layer < cfg.layers {
                    x = x.select_rows(&d.kept);
                    positions = d.kept.clone();
                }
                decision = Some(d);
            }
        }

        let last = x.rows().checked_sub(1).ok_or_else(|| {
            Error::Integrity("no live input positions remain after pruning".into())
        })?;
        let logits = self.logits(x.row(last), counter)?;
        Ok(PrefillOutput {
            cache: KVCache {
                layers,
                routing,
                n_input: n,
                total_len: n,
            },
            logits,
            decision,
            captured,
        })
    }

    /// Feeds `token` at `position` through every layer, extending the cache.
    pub fn decode_step(
        &self,
        cache: &mut KVCache,
        token: TokenId,
        position: usize,
        counter: &mut MacCounter,
    ) -> Result<DecodeOutput, Error> {
        let cfg = &self.config;
        if position != cache.total_len {
            return Err(Error::Position {
                expected: cache.total_len,
                got: position,
            });
        }
        if position >= cfg.max_seq {
            return Err(Error::LengthCap {
                position,
                max_seq: cfg.max_seq,
            });
        }
        let (d, heads, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let scale = 1.0 / (dh as f32).sqrt();
        let mut x = self.embed(&[token], &[position])?;
        let mut attention = Vec::with_capacity(cfg.layers);

        for layer in 1..=cfg.layers {
            let lw = &self.weights.layers[layer - 1];
            let qkv = format!("layer{layer}/qkv");
            let h = layer_norm(&x, &lw.ln1_g, &lw.ln1_b, LN_EPS)?;
            let q = matmul(&h, &lw.wq, counter, &qkv)?;
            let k = matmul(&h, &lw.wk, counter, &qkv)?;
            let v = matmul(&h, &lw.wv, counter, &qkv)?;

            let lc = &mut cache.layers[layer - 1];
            lc.keys.push_row(k.row(0));
            lc.values.push_row(v.row(0));
            lc.positions.push(position);
            let visible: Vec<usize> = (0..lc.positions.len())
                .filter(|&i| cache.routing.allows(layer, position, lc.positions[i]))
                .collect();

            let mut out = vec![0.0f32; d];
            let mut head_rows = Vec::with_capacity(heads);
            for head in 0..heads {
                let cols = head * dh..(head + 1) * dh;
                let qh = &q.row(0)[cols.clone()];
                let mut row: Vec<f32> = visible
                    .iter()
                    .map(|&i| {
                        let kh = &lc.keys.row(i)[cols.clone()];
                        qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f32>() * scale
                    })
                    .collect();
                softmax_slice(&mut row).map_err(|e| integrity(layer, e))?;
                let oh = &mut out[cols.clone()];
                for (&i, p) in visible.iter().zip(&row) {
                    let vh = &lc.values.row(i)[cols.clone()];
                    for (o, val) in oh.iter_mut().zip(vh) {
                        *o += p * val;
                    }
                }
                head_rows.push(row);
            }
            let macs = (visible.len() * d) as u64;
            counter.add(&format!("layer{layer}/attn_scores"), macs);
            counter.add(&format!("layer{layer}/attn_values"), macs);
            attention.push(LayerAttention {
                positions: visible.iter().map(|&i| lc.positions[i]).collect(),
                heads: head_rows,
            });

            let out = DenseMatrix::from_vec(1, d, out)?;
            let a = matmul(&out, &lw.wo, counter, &format!("layer{layer}/out_proj"))?;
            x.add_assign(&a)?;
            let ffn = format!("layer{layer}/ffn");
            let h2 = layer_norm(&x, &lw.ln2_g, &lw.ln2_b, LN_EPS)?;
            let mut up = matmul(&h2, &lw.w1, counter, &ffn)?;
            gelu_in_place(&mut up);
            let f = matmul(&up, &lw.w2, counter, &ffn)?;
            x.add_assign(&f)?;
        }
        cache.total_len += 1;
        let logits = self.logits(x.row(0), counter)?;
        Ok(DecodeOutput { logits, attention })
    }

    /// Greedy decoding. Each emitted token is also fed through
    /// [`decode_step`](Self::decode_step) so that every output token has an
    /// attention row, unless the sequence length cap is reached.
    pub fn generate(
        &self,
        seq: &SegmentedSequence,
        mode: &InferenceMode,
        opts: &GenerateOptions,
    ) -> Result<GenerationResult, Error> {
        if opts.max_new_tokens == 0 {
            return Err(Error::Integrity("max_new_tokens must be at least 1".into()));
        }
        let mut counter = MacCounter::new();
        let clock = Stopwatch::start();
        let pre = self.prefill_with(seq, mode, &mut counter, &opts.capture_layers)?;
        let prefill_time = clock.elapsed();

        let clock = Stopwatch::start();
        let live_counts = pre.cache.live_counts();
        let mut cache = pre.cache;
        let mut logits = pre.logits;
        let mut output_ids = Vec::new();
        let mut steps = Vec::new();
        let stop = loop {
            let token = argmax(&logits);
            output_ids.push(token);
            let position = cache.total_len();
            if position >= self.config.max_seq {
                break StopReason::MaxSeq;
            }
            let step = self.decode_step(&mut cache, token, position, &mut counter)?;
            if opts.record_attention {
                steps.push(step.attention);
            }
            if opts.eos_id == Some(token) {
                break StopReason::Eos;
            }
            if output_ids.len() >= opts.max_new_tokens {
                break StopReason::MaxNewTokens;
            }
            logits = step.logits;
        };
        let decode_time = clock.elapsed();

        Ok(GenerationResult {
            output_ids,
            decision: pre.decision,
            steps,
            counter,
            timings: Timings {
                prefill: prefill_time,
                decode: decode_time,
            },
            stop,
            live_counts,
            captured: pre.captured,
        })
    }

    /// [`generate`](Self::generate) with optional FastV pruning.
    pub fn generate_greedy(
        &self,
        seq: &SegmentedSequence,
        prune: Option<PruneConfig>,
        max_new_tokens: usize,
        eos_id: Option<TokenId>,
    ) -> Result<GenerationResult, Error> {
        let mode = prune.map_or(InferenceMode::Baseline, InferenceMode::FastV);
        let opts = GenerateOptions {
            eos_id,
            ..GenerateOptions::new(max_new_tokens)
        };
        self.generate(seq, &mode, &opts)
    }
}

fn decide(
    p: &PruneConfig,
    seq: &SegmentedSequence,
    scorer: Option<&ReceivedAttention>,
) -> Result<PruneDecision, PruneError> {
    let span = seq.span(p.criterion.target());
    let n = seq.n_input();
    match p.criterion {
        PruneCriterion::Random { seed } => select_pruned(Ranking::Random(seed), span, p.ratio, n),
        PruneCriterion::SegmentTarget {
            strategy: TargetStrategy::HeadFirst,
            ..
        } => select_pruned(Ranking::HeadFirst, span, p.ratio, n),
        _ => {
            let scores = scorer
                .ok_or(PruneError::AttentionAtLayerZero)?
                .scores(span.range());
            select_pruned(Ranking::Scores(&scores), span, p.ratio, n)
        }
    }
}
