//! Seeded synthetic sequence specs.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use fastv_core::{ModelConfig, SequenceSpec, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{usage, write_json};

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    /// Model config JSON; id ranges and the length cap come from it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub n_sys: usize,
    #[arg(long, default_value_t = 64)]
    pub n_img: usize,
    #[arg(long, default_value_t = 12)]
    pub n_ins: usize,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Output directory for seq_XXXX.json files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkloadShape {
    pub n_sys: usize,
    pub n_img: usize,
    pub n_ins: usize,
}

impl WorkloadShape {
    pub fn total(&self) -> usize {
        self.n_sys + self.n_img + self.n_ins
    }
}

/// Text ids come from `[1, vocab/2)`, image ids from `[vocab/2, vocab)`.
/// Id 0 is reserved for end-of-sequence and never drawn.
pub fn generate_specs(
    cfg: &ModelConfig,
    shape: WorkloadShape,
    seed: u64,
    count: usize,
) -> anyhow::Result<Vec<SequenceSpec>> {
    if count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    if shape.n_sys == 0 || shape.n_ins == 0 {
        return Err(usage("--n-sys and --n-ins must be at least 1"));
    }
    if shape.total() > cfg.max_seq {
        return Err(usage(format!(
            "sequence length {} exceeds max_seq {}",
            shape.total(),
            cfg.max_seq
        )));
    }
    let text = cfg.text_ids();
    let image = cfg.image_ids();
    if text.is_empty() || (shape.n_img > 0 && image.is_empty()) {
        return Err(usage(format!(
            "vocab {} is too small for synthetic ids",
            cfg.vocab
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |range: std::ops::Range<TokenId>, n: usize| -> Vec<TokenId> {
        (0..n).map(|_| rng.gen_range(range.clone())).collect()
    };
    Ok((0..count)
        .map(|_| SequenceSpec {
            sys_ids: draw(text.clone(), shape.n_sys),
            img_ids: draw(image.clone(), shape.n_img),
            ins_ids: draw(text.clone(), shape.n_ins),
        })
        .collect())
}

pub fn cmd_gen(args: &GenArgs) -> anyhow::Result<Vec<PathBuf>> {
    let cfg = match &args.config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    let shape = WorkloadShape {
        n_sys: args.n_sys,
        n_img: args.n_img,
        n_ins: args.n_ins,
    };
    let specs = generate_specs(&cfg, shape, args.seed, args.count)?;
    write_specs(&specs, &args.out)
}

pub fn write_specs(specs: &[SequenceSpec], dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut paths = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let path = dir.join(format!("seq_{i:04}.json"));
        write_json(&path, spec)?;
        paths.push(path);
    }
    Ok(paths)
}
