//! Experiment harness behind the `fastv` binary.
//!
//! Each subcommand has a library entry point so that tests can drive the
//! same code paths without spawning processes.

pub mod bench;
pub mod flops;
pub mod profile;
pub mod run;
pub mod workload;

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use fastv_core::model::{load_weights, Model, ModelConfig};
use fastv_core::{InferenceMode, PruneConfig, SegmentedSequence, SequenceSpec, StreamingMask};

/// Bad flags, configuration, or inputs. Maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Exit code for an error: 1 for usage/config problems, 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>()
            || cause.is::<fastv_core::model::ConfigError>()
            || cause.is::<fastv_core::pruning::PruneError>()
            || cause.is::<fastv_core::segments::SegmentError>()
            || cause.is::<fastv_core::costmodel::CostError>()
            || cause.is::<fastv_core::model::WeightFormatError>()
        {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<fastv_core::Error>() {
            return if e.is_usage() { 1 } else { 2 };
        }
    }
    2
}

/// Flags shared by `run`, `profile` and `bench`.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Model config JSON (defaults to a small built-in config).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Binary weight file in FVW1 format.
    #[arg(long, conflicts_with = "seed")]
    pub weights: Option<PathBuf>,
    /// Seed for synthetic weights.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sequence spec JSON files.
    #[arg(long, num_args = 1.., required = true)]
    pub input: Vec<PathBuf>,
    /// K=<int>,R=<int>,criterion=<attn|attn-last|random:SEED|segment:KIND:STRATEGY>
    #[arg(long, conflicts_with = "streaming")]
    pub fastv: Option<String>,
    /// S=<int>,W=<int>
    #[arg(long)]
    pub streaming: Option<String>,
    #[arg(long, default_value_t = 16)]
    pub max_new_tokens: usize,
}

impl ModelArgs {
    pub fn model_config(&self) -> anyhow::Result<ModelConfig> {
        match &self.config {
            Some(p) => Ok(ModelConfig::load(p)?),
            None => Ok(ModelConfig::default()),
        }
    }

    pub fn weights_label(&self) -> String {
        match &self.weights {
            Some(p) => p.display().to_string(),
            None => format!("seed:{}", self.seed.unwrap_or(0)),
        }
    }

    pub fn load_model(&self) -> anyhow::Result<Model> {
        let cfg = self.model_config()?;
        let model = match &self.weights {
            Some(path) => {
                let ws = load_weights(path, &cfg)
                    .with_context(|| format!("loading weights from {}", path.display()))?;
                Model::new(cfg, ws)?
            }
            None => Model::synthetic(cfg, self.seed.unwrap_or(0))?,
        };
        Ok(model)
    }

    pub fn mode(&self, layers: usize) -> anyhow::Result<InferenceMode> {
        parse_mode(self.fastv.as_deref(), self.streaming.as_deref(), layers)
    }

    pub fn sequences(&self, cfg: &ModelConfig) -> anyhow::Result<Vec<SegmentedSequence>> {
        self.input.iter().map(|p| read_sequence(p, cfg)).collect()
    }
}

pub fn parse_mode(
    fastv: Option<&str>,
    streaming: Option<&str>,
    layers: usize,
) -> anyhow::Result<InferenceMode> {
    match (fastv, streaming) {
        (Some(_), Some(_)) => bail!(usage("--fastv and --streaming are mutually exclusive")),
        (Some(spec), None) => {
            let p: PruneConfig = spec.parse()?;
            p.validate(layers)?;
            Ok(InferenceMode::FastV(p))
        }
        (None, Some(spec)) => {
            let m: StreamingMask = spec
                .parse()
                .map_err(|e: String| usage(format!("--streaming: {e}")))?;
            Ok(InferenceMode::Streaming(m))
        }
        (None, None) => Ok(InferenceMode::Baseline),
    }
}

pub fn mode_label(mode: &InferenceMode) -> String {
    match mode {
        InferenceMode::Baseline => "baseline".into(),
        InferenceMode::FastV(p) => format!("fastv:{p}"),
        InferenceMode::Streaming(m) => format!("streaming:{m}"),
        InferenceMode::Masked { layer, .. } => format!("masked:K={layer}"),
    }
}

pub fn read_sequence(path: &Path, cfg: &ModelConfig) -> anyhow::Result<SegmentedSequence> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
    let spec: SequenceSpec =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    SegmentedSequence::from_spec(&spec, cfg.vocab)
        .with_context(|| format!("validating {}", path.display()))
}

pub(crate) fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
