//! `flops`: analytic cost grid over filtering layer and ratio.

use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use fastv_core::costmodel::{grid, CostMode, CostParams, GridReport};

use crate::usage;

/// Inclusive integer range written `A..B`, with an optional `:STEP`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridRange {
    pub start: u64,
    pub end: u64,
    pub step: u64,
}

impl GridRange {
    pub fn values(&self) -> Vec<u64> {
        (self.start..=self.end)
            .step_by(self.step as usize)
            .collect()
    }
}

impl std::str::FromStr for GridRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (range, step) = match s.split_once(':') {
            Some((r, st)) => (
                r,
                st.trim()
                    .parse::<u64>()
                    .map_err(|e| format!("step `{st}`: {e}"))?,
            ),
            None => (s, 1),
        };
        let (a, b) = range
            .split_once("..")
            .ok_or_else(|| format!("expected A..B[:STEP], got `{s}`"))?;
        let num = |t: &str| {
            t.trim()
                .parse::<u64>()
                .map_err(|e| format!("bound `{t}`: {e}"))
        };
        let (start, end) = (num(a)?, num(b)?);
        if step == 0 {
            return Err("step must be at least 1".into());
        }
        if start > end {
            return Err(format!("empty range {start}..{end}"));
        }
        Ok(Self { start, end, step })
    }
}

#[derive(Debug, Clone, Args)]
pub struct FlopsArgs {
    /// Total input tokens (defaults to --n-text + --n-img).
    #[arg(long)]
    pub n: Option<u64>,
    /// Non-image tokens, used when --n is absent.
    #[arg(long, default_value_t = 58)]
    pub n_text: u64,
    #[arg(long, default_value_t = 576)]
    pub n_img: u64,
    #[arg(long, default_value_t = 5120)]
    pub d: u64,
    #[arg(long, default_value_t = 13824)]
    pub m: u64,
    #[arg(long, default_value_t = 40)]
    pub layers: u64,
    /// eq5 (R% of all tokens) or image-only (R% of image tokens).
    #[arg(long, default_value = "image-only")]
    pub mode: CostMode,
    /// Filtering layers, e.g. 0..40 (defaults to 0..layers).
    #[arg(long)]
    pub grid_k: Option<GridRange>,
    /// Filtering ratios, e.g. 0..100:5.
    #[arg(long, default_value = "0..100:5")]
    pub grid_r: GridRange,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl FlopsArgs {
    pub fn params(&self) -> CostParams {
        CostParams {
            n: self.n.unwrap_or(self.n_text + self.n_img),
            n_img: self.n_img,
            d: self.d,
            m: self.m,
            layers: self.layers,
            k: 0,
            ratio: 0,
            mode: self.mode,
        }
    }
}

pub fn compute_grid(args: &FlopsArgs) -> anyhow::Result<GridReport> {
    let base = args.params();
    let ks = args
        .grid_k
        .unwrap_or(GridRange {
            start: 0,
            end: args.layers,
            step: 1,
        })
        .values();
    let rs = args
        .grid_r
        .values()
        .into_iter()
        .map(|r| u32::try_from(r).map_err(|_| usage(format!("ratio {r} out of range"))))
        .collect::<anyhow::Result<Vec<u32>>>()?;
    Ok(grid(&base, &ks, &rs)?)
}

pub fn cmd_flops(args: &FlopsArgs) -> anyhow::Result<GridReport> {
    let report = compute_grid(args)?;
    let csv = report.to_csv();
    match &args.out {
        Some(path) => {
            std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{csv}"),
    }
    Ok(report)
}
