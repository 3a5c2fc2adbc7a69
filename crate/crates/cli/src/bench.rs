//! `bench`: serial wall-clock comparison of inference variants on identical inputs.

use std::path::PathBuf;
use std::time::Duration;

use clap::Args;
use fastv_core::model::GenerateOptions;
use fastv_core::{InferenceMode, Model, SegmentedSequence};
use serde::Serialize;

use crate::{mode_label, parse_mode, usage, write_json, ModelArgs};

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// `baseline`, a prune spec such as `K=2,R=75,criterion=attn`, or
    /// `streaming:S=4,W=64`. Repeatable. Defaults to baseline plus --fastv/--streaming.
    #[arg(long)]
    pub variant: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub repeat: usize,
    /// JSON report destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeSummary {
    pub median: f64,
    pub min: f64,
}

impl TimeSummary {
    /// Median (mean of the middle pair for even counts) and minimum, in seconds.
    pub fn from_samples(samples: &[Duration]) -> Self {
        let mut secs: Vec<f64> = samples.iter().map(Duration::as_secs_f64).collect();
        secs.sort_by(f64::total_cmp);
        let mid = secs.len() / 2;
        let median = if secs.len().is_multiple_of(2) {
            (secs[mid - 1] + secs[mid]) / 2.0
        } else {
            secs[mid]
        };
        Self {
            median,
            min: secs[0],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantReport {
    pub variant: String,
    pub repeats: usize,
    pub prefill: TimeSummary,
    pub decode: TimeSummary,
    pub total: TimeSummary,
    /// Median total time divided by the number of inputs.
    pub latency_per_example: f64,
    /// MACs summed over all inputs for one repeat.
    pub mac_total: u64,
    pub tokens_generated: usize,
    /// Maximum over inputs of the live positions each layer held after prefill.
    pub peak_live_counts: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub n_inputs: usize,
    pub max_new_tokens: usize,
    pub variants: Vec<VariantReport>,
}

struct Pass {
    prefill: Duration,
    decode: Duration,
    macs: u64,
    tokens: usize,
    peak: Vec<usize>,
}

fn one_pass(
    model: &Model,
    seqs: &[SegmentedSequence],
    mode: &InferenceMode,
    opts: &GenerateOptions,
) -> anyhow::Result<Pass> {
    let mut pass = Pass {
        prefill: Duration::ZERO,
        decode: Duration::ZERO,
        macs: 0,
        tokens: 0,
        peak: vec![0; model.config().layers],
    };
    for seq in seqs {
        let gen = model.generate(seq, mode, opts)?;
        pass.prefill += gen.timings.prefill;
        pass.decode += gen.timings.decode;
        pass.macs += gen.counter.total();
        pass.tokens += gen.output_ids.len();
        for (p, c) in pass.peak.iter_mut().zip(&gen.live_counts) {
            *p = (*p).max(*c);
        }
    }
    Ok(pass)
}

/// Runs one warmup pass and `repeat` measured passes per variant, serially.
/// End-of-sequence stopping is disabled so every variant decodes the same
/// number of tokens.
pub fn bench_variants(
    model: &Model,
    seqs: &[SegmentedSequence],
    variants: &[(String, InferenceMode)],
    repeat: usize,
    max_new_tokens: usize,
) -> anyhow::Result<BenchReport> {
    if repeat < 3 {
        return Err(usage(format!("--repeat must be at least 3, got {repeat}")));
    }
    if seqs.is_empty() {
        return Err(usage("bench needs at least one input"));
    }
    let opts = GenerateOptions {
        eos_id: None,
        ..GenerateOptions::new(max_new_tokens)
    };
    let mut reports = Vec::with_capacity(variants.len());
    for (name, mode) in variants {
        log::info!("bench variant {name}: warmup");
        one_pass(model, seqs, mode, &opts)?;
        let mut passes = Vec::with_capacity(repeat);
        for i in 0..repeat {
            let pass = one_pass(model, seqs, mode, &opts)?;
            log::info!(
                "bench variant {name}: repeat {} took {:.3}s",
                i + 1,
                (pass.prefill + pass.decode).as_secs_f64()
            );
            passes.push(pass);
        }
        if passes.iter().any(|p| p.macs != passes[0].macs) {
            anyhow::bail!("variant {name}: MAC totals differ between repeats");
        }
        let prefill: Vec<_> = passes.iter().map(|p| p.prefill).collect();
        let decode: Vec<_> = passes.iter().map(|p| p.decode).collect();
        let total: Vec<_> = passes.iter().map(|p| p.prefill + p.decode).collect();
        let total = TimeSummary::from_samples(&total);
        reports.push(VariantReport {
            variant: name.clone(),
            repeats: repeat,
            prefill: TimeSummary::from_samples(&prefill),
            decode: TimeSummary::from_samples(&decode),
            total,
            latency_per_example: total.median / seqs.len() as f64,
            mac_total: passes[0].macs,
            tokens_generated: passes[0].tokens,
            peak_live_counts: passes[0].peak.clone(),
        });
    }
    Ok(BenchReport {
        n_inputs: seqs.len(),
        max_new_tokens,
        variants: reports,
    })
}

pub fn parse_variant(spec: &str, layers: usize) -> anyhow::Result<(String, InferenceMode)> {
    let mode = if spec == "baseline" {
        InferenceMode::Baseline
    } else if let Some(s) = spec.strip_prefix("streaming:") {
        parse_mode(None, Some(s), layers)?
    } else {
        parse_mode(
            Some(spec.strip_prefix("fastv:").unwrap_or(spec)),
            None,
            layers,
        )?
    };
    Ok((mode_label(&mode), mode))
}

pub fn cmd_bench(args: &BenchArgs) -> anyhow::Result<BenchReport> {
    let model = args.model.load_model()?;
    let cfg = *model.config();
    let seqs = args.model.sequences(&cfg)?;
    let variants = if args.variant.is_empty() {
        let mut v = vec![("baseline".to_string(), InferenceMode::Baseline)];
        let mode = args.model.mode(cfg.layers)?;
        if mode != InferenceMode::Baseline {
            v.push((mode_label(&mode), mode));
        }
        v
    } else {
        args.variant
            .iter()
            .map(|s| parse_variant(s, cfg.layers))
            .collect::<anyhow::Result<Vec<_>>>()?
    };
    let report = bench_variants(
        &model,
        &seqs,
        &variants,
        args.repeat,
        args.model.max_new_tokens,
    )?;
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(report)
}
