//! `run`: one greedy generation per input, one result document per input.

use std::path::{Path, PathBuf};

use clap::Args;
use fastv_core::model::{GenerateOptions, GenerationResult, StopReason, Timings};
use fastv_core::numkernel::MacCounter;
use fastv_core::segments::Span;
use fastv_core::{InferenceMode, Model, ModelConfig, PruneDecision, SegmentedSequence};
use rayon::prelude::*;
use serde::Serialize;

use crate::{mode_label, write_json, ModelArgs};

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directory receiving `<input-stem>.result.json` files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneSummary {
    pub candidate: Span,
    pub n_kept: usize,
    pub n_dropped: usize,
    pub dropped: Vec<usize>,
}

impl From<&PruneDecision> for PruneSummary {
    fn from(d: &PruneDecision) -> Self {
        Self {
            candidate: d.candidate,
            n_kept: d.kept.len(),
            n_dropped: d.dropped.len(),
            dropped: d.dropped.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResultDocument {
    pub input: String,
    pub config: ModelConfig,
    pub weights: String,
    pub mode: String,
    pub fastv: Option<String>,
    pub streaming: Option<String>,
    pub max_new_tokens: usize,
    pub n_input: usize,
    pub output_ids: Vec<u32>,
    pub stop: StopReason,
    pub prune: Option<PruneSummary>,
    pub counter: MacCounter,
    pub live_counts: Vec<usize>,
    pub timings: Timings,
}

pub fn generate_all(
    model: &Model,
    seqs: &[SegmentedSequence],
    mode: &InferenceMode,
    opts: &GenerateOptions,
) -> anyhow::Result<Vec<GenerationResult>> {
    let results: Result<Vec<_>, _> = seqs
        .par_iter()
        .map(|s| model.generate(s, mode, opts))
        .collect();
    Ok(results?)
}

pub fn result_path(out: &Path, input: &Path) -> PathBuf {
    let stem = input
        .file_stem()
        .map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned());
    out.join(format!("{stem}.result.json"))
}

pub fn cmd_run(args: &RunArgs) -> anyhow::Result<Vec<PathBuf>> {
    let model = args.model.load_model()?;
    let cfg = *model.config();
    let mode = args.model.mode(cfg.layers)?;
    let seqs = args.model.sequences(&cfg)?;
    let opts = GenerateOptions::new(args.model.max_new_tokens);
    log::info!(
        "running {} input(s) in mode {}",
        seqs.len(),
        mode_label(&mode)
    );
    let results = generate_all(&model, &seqs, &mode, &opts)?;

    let mut written = Vec::new();
    for ((input, seq), gen) in args.model.input.iter().zip(&seqs).zip(results) {
        let doc = ResultDocument {
            input: input.display().to_string(),
            config: cfg,
            weights: args.model.weights_label(),
            mode: mode_label(&mode),
            fastv: args.model.fastv.clone(),
            streaming: args.model.streaming.clone(),
            max_new_tokens: args.model.max_new_tokens,
            n_input: seq.n_input(),
            output_ids: gen.output_ids,
            stop: gen.stop,
            prune: gen.decision.as_ref().map(PruneSummary::from),
            counter: gen.counter,
            live_counts: gen.live_counts,
            timings: gen.timings,
        };
        let path = result_path(&args.out, input);
        write_json(&path, &doc)?;
        written.push(path);
    }
    Ok(written)
}
