//! `profile`: attention allocation and efficiency over many inputs.

use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use fastv_core::model::GenerateOptions;
use fastv_core::profiler::{export_maps, merge, AttentionMapDump, AttentionStats, StatsDocument};
use rayon::prelude::*;

use crate::{usage, write_json, ModelArgs};

#[derive(Debug, Clone, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directory receiving stats.json and optional maps/.
    #[arg(long)]
    pub out: PathBuf,
    /// Index (into --input) of the sequence whose attention maps are exported.
    #[arg(long)]
    pub maps_input: Option<usize>,
    /// 1-indexed layers to export, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub maps_layers: Vec<usize>,
}

pub fn cmd_profile(args: &ProfileArgs) -> anyhow::Result<StatsDocument> {
    let model = args.model.load_model()?;
    let cfg = *model.config();
    let mode = args.model.mode(cfg.layers)?;
    let seqs = args.model.sequences(&cfg)?;
    if let Some(i) = args.maps_input {
        if i >= seqs.len() {
            return Err(usage(format!(
                "--maps-input {i} out of range for {} input(s)",
                seqs.len()
            )));
        }
        if let Some(&l) = args.maps_layers.iter().find(|&&l| l == 0 || l > cfg.layers) {
            return Err(usage(format!(
                "--maps-layers {l} outside 1..={}",
                cfg.layers
            )));
        }
    }

    let per_sample: Vec<anyhow::Result<AttentionStats>> = seqs
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let opts = GenerateOptions {
                record_attention: true,
                capture_layers: if args.maps_input == Some(i) {
                    args.maps_layers.clone()
                } else {
                    Vec::new()
                },
                ..GenerateOptions::new(args.model.max_new_tokens)
            };
            let gen = model.generate(seq, &mode, &opts)?;
            if args.maps_input == Some(i) {
                let dump = AttentionMapDump::from_generation(&gen, seq)?;
                export_maps(&dump, args.out.join("maps")).context("exporting attention maps")?;
            }
            Ok(AttentionStats::from_generation(&gen, seq)?)
        })
        .collect();
    let samples = per_sample.into_iter().collect::<anyhow::Result<Vec<_>>>()?;
    let merged = merge(&samples)?;
    let doc = merged.to_document();
    write_json(&args.out.join("stats.json"), &doc)?;
    Ok(doc)
}
