//! Browser bindings for the interactive demo page in `www/`.
//!
//! Each exported function takes plain numbers/strings and returns a JSON
//! string, so the page needs no generated TypeScript types. The same logic is
//! available natively through the `*_json` functions for testing.

use fastv_core::costmodel::{grid, CostMode, CostParams};
use fastv_core::model::GenerateOptions;
use fastv_core::profiler::{merge, AttentionMapDump, AttentionStats};
use fastv_core::segments::Span;
use fastv_core::{
    InferenceMode, Model, ModelConfig, PruneConfig, SegmentedSequence, SequenceSpec, TokenId,
};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const DEMO_SYS: usize = 4;
const DEMO_INS: usize = 6;
const DEMO_NEW_TOKENS: usize = 8;

fn demo_config() -> ModelConfig {
    ModelConfig {
        layers: 4,
        d_model: 32,
        n_heads: 4,
        d_ff: 128,
        vocab: 128,
        max_seq: 128,
    }
}

/// Deterministic prompt with `n_img` image tokens; `salt` varies the ids.
fn demo_sequence(cfg: &ModelConfig, n_img: usize, salt: u32) -> Result<SegmentedSequence, String> {
    let text = cfg.text_ids();
    let img = cfg.image_ids();
    let pick = |r: &std::ops::Range<TokenId>, i: usize| -> TokenId {
        let span = r.end - r.start;
        r.start
            + ((i as u32)
                .wrapping_mul(2_654_435_761)
                .wrapping_add(salt.wrapping_mul(40_503))
                >> 7)
                % span
    };
    let spec = SequenceSpec {
        sys_ids: (0..DEMO_SYS).map(|i| pick(&text, i)).collect(),
        img_ids: (0..n_img).map(|i| pick(&img, i + 100)).collect(),
        ins_ids: (0..DEMO_INS).map(|i| pick(&text, i + 200)).collect(),
    };
    SegmentedSequence::from_spec(&spec, cfg.vocab).map_err(|e| e.to_string())
}

fn demo_mode(k: usize, r: u32, layers: usize) -> Result<InferenceMode, String> {
    if r == 0 {
        return Ok(InferenceMode::Baseline);
    }
    let prune = if k == 0 {
        PruneConfig::random(0, r, 1)
    } else {
        PruneConfig::attention(k, r)
    };
    prune.validate(layers).map_err(|e| e.to_string())?;
    Ok(InferenceMode::FastV(prune))
}

#[derive(Serialize)]
struct GridJson {
    mode: String,
    ks: Vec<u64>,
    rs: Vec<u32>,
    /// `reduction[k_index][r_index]`
    reduction: Vec<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn flops_grid_json(
    n_text: u64,
    n_img: u64,
    d: u64,
    m: u64,
    layers: u64,
    mode: &str,
    r_step: u32,
) -> Result<String, String> {
    let mode: CostMode = mode.parse()?;
    if r_step == 0 || r_step > 100 {
        return Err("ratio step must be in 1..=100".into());
    }
    let base = CostParams {
        n: n_text + n_img,
        n_img,
        d,
        m,
        layers,
        k: 0,
        ratio: 0,
        mode,
    };
    let ks: Vec<u64> = (0..=layers).collect();
    let rs: Vec<u32> = (0..=100).step_by(r_step as usize).collect();
    let g = grid(&base, &ks, &rs).map_err(|e| e.to_string())?;
    let reduction = ks
        .iter()
        .map(|&k| {
            rs.iter()
                .map(|&r| g.cell(k, r).map_or(0.0, |c| c.reduction))
                .collect()
        })
        .collect();
    serde_json::to_string(&GridJson {
        mode: mode.to_string(),
        ks,
        rs,
        reduction,
    })
    .map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct AttentionJson {
    layer: usize,
    n_input: usize,
    total_len: usize,
    spans: Vec<Span>,
    dropped: Vec<usize>,
    output_ids: Vec<TokenId>,
    /// Row-major `total_len x total_len` head-averaged attention.
    map: Vec<f32>,
}

pub fn attention_demo_json(
    seed: u64,
    n_img: usize,
    k: usize,
    r: u32,
    layer: usize,
) -> Result<String, String> {
    let cfg = demo_config();
    if layer == 0 || layer > cfg.layers {
        return Err(format!("layer must be in 1..={}", cfg.layers));
    }
    let model = Model::synthetic(cfg, seed).map_err(|e| e.to_string())?;
    let seq = demo_sequence(&cfg, n_img, seed as u32)?;
    let mode = demo_mode(k, r, cfg.layers)?;
    let opts = GenerateOptions {
        eos_id: None,
        record_attention: true,
        capture_layers: vec![layer],
        ..GenerateOptions::new(DEMO_NEW_TOKENS)
    };
    let gen = model
        .generate(&seq, &mode, &opts)
        .map_err(|e| e.to_string())?;
    let dump = AttentionMapDump::from_generation(&gen, &seq).map_err(|e| e.to_string())?;
    let (_, map) = dump
        .layers
        .into_iter()
        .next()
        .ok_or("no attention captured")?;
    serde_json::to_string(&AttentionJson {
        layer,
        n_input: dump.n_input,
        total_len: dump.total_len,
        spans: dump.spans,
        dropped: dump.dropped,
        output_ids: gen.output_ids,
        map: map.into_vec(),
    })
    .map_err(|e| e.to_string())
}

pub fn allocation_demo_json(
    seed: u64,
    n_samples: usize,
    n_img: usize,
    k: usize,
    r: u32,
) -> Result<String, String> {
    if n_samples == 0 || n_samples > 64 {
        return Err("sample count must be in 1..=64".into());
    }
    let cfg = demo_config();
    let model = Model::synthetic(cfg, seed).map_err(|e| e.to_string())?;
    let mode = demo_mode(k, r, cfg.layers)?;
    let opts = GenerateOptions {
        eos_id: None,
        record_attention: true,
        ..GenerateOptions::new(DEMO_NEW_TOKENS)
    };
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let seq = demo_sequence(&cfg, n_img, i as u32 + 1)?;
        let gen = model
            .generate(&seq, &mode, &opts)
            .map_err(|e| e.to_string())?;
        samples.push(AttentionStats::from_generation(&gen, &seq).map_err(|e| e.to_string())?);
    }
    let merged = merge(&samples).map_err(|e| e.to_string())?;
    serde_json::to_string(&merged.to_document()).map_err(|e| e.to_string())
}

/// Reduction grid over every filtering layer and ratios `0, step, .., 100`.
#[wasm_bindgen]
pub fn flops_grid(
    n_text: u32,
    n_img: u32,
    d: u32,
    m: u32,
    layers: u32,
    mode: &str,
    r_step: u32,
) -> Result<String, JsError> {
    flops_grid_json(
        n_text.into(),
        n_img.into(),
        d.into(),
        m.into(),
        layers.into(),
        mode,
        r_step,
    )
    .map_err(|e| JsError::new(&e))
}

/// Attention map of one layer for a tiny synthetic model, with pruning applied
/// after layer `k` at ratio `r` (`r = 0` disables pruning).
#[wasm_bindgen]
pub fn attention_demo(
    seed: u32,
    n_img: u32,
    k: u32,
    r: u32,
    layer: u32,
) -> Result<String, JsError> {
    attention_demo_json(seed.into(), n_img as usize, k as usize, r, layer as usize)
        .map_err(|e| JsError::new(&e))
}

/// Per-layer attention allocation and efficiency averaged over `n_samples` prompts.
#[wasm_bindgen]
pub fn allocation_demo(
    seed: u32,
    n_samples: u32,
    n_img: u32,
    k: u32,
    r: u32,
) -> Result<String, JsError> {
    allocation_demo_json(
        seed.into(),
        n_samples as usize,
        n_img as usize,
        k as usize,
        r,
    )
    .map_err(|e| JsError::new(&e))
}
