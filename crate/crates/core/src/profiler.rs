//! Per-segment attention statistics over generated tokens.
//!
//! For every output token and layer, the token's post-softmax attention row
//! is split into the mass it puts on each segment (`alpha`). Summing over a
//! response gives the allocation `lambda`; dividing by the segment's token
//! count gives the efficiency `epsilon`. Heads are averaged within a sample,
//! then samples are averaged.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{GenerationResult, LayerAttention};
use crate::numkernel::DenseMatrix;
use crate::segments::{SegmentKind, SegmentedSequence, Span};

/// Row-sum deviation beyond which a recorded row is rejected.
pub const ROW_SUM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProfileError {
    #[error("step {step}, layer {layer}, head {head}: attention row sums to {sum}")]
    RowSum {
        step: usize,
        layer: usize,
        head: usize,
        sum: f64,
    },
    #[error("no recorded decode steps")]
    Empty,
    #[error("layer count mismatch: {expected} vs {got}")]
    LayerMismatch { expected: usize, got: usize },
    #[error("nothing to merge")]
    NoSamples,
    #[error("map export needs recorded steps and captured layers")]
    MissingAttention,
    #[error("{0}")]
    Io(String),
}

/// Segment masses of one generated token's attention rows.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAttentionRecord {
    pub step: usize,
    /// `alphas[layer][head]`, indexed by [`SegmentKind::index`].
    pub alphas: Vec<Vec<[f64; 4]>>,
}

impl StepAttentionRecord {
    pub fn n_layers(&self) -> usize {
        self.alphas.len()
    }

    /// Head-mean alpha of one layer (0-indexed).
    pub fn head_mean(&self, layer: usize) -> [f64; 4] {
        let heads = &self.alphas[layer];
        let mut out = [0.0; 4];
        for a in heads {
            for t in 0..4 {
                out[t] += a[t];
            }
        }
        out.map(|v| v / heads.len() as f64)
    }
}

/// Routes each attention row's mass into the four segments.
pub fn record(
    step: usize,
    rows: &[LayerAttention],
    seq: &SegmentedSequence,
) -> Result<StepAttentionRecord, ProfileError> {
    let mut alphas = Vec::with_capacity(rows.len());
    for (l, row) in rows.iter().enumerate() {
        let kinds: Vec<usize> = row
            .positions
            .iter()
            .map(|&p| seq.kind_at(p).index())
            .collect();
        let mut per_head = Vec::with_capacity(row.heads.len());
        for (h, probs) in row.heads.iter().enumerate() {
            let mut a = [0.0f64; 4];
            for (k, p) in kinds.iter().zip(probs) {
                a[*k] += *p as f64;
            }
            let sum: f64 = a.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(ProfileError::RowSum {
                    step,
                    layer: l + 1,
                    head: h,
                    sum,
                });
            }
            per_head.push(a);
        }
        alphas.push(per_head);
    }
    Ok(StepAttentionRecord { step, alphas })
}

pub fn record_all(
    steps: &[Vec<LayerAttention>],
    seq: &SegmentedSequence,
) -> Result<Vec<StepAttentionRecord>, ProfileError> {
    steps
        .iter()
        .enumerate()
        .map(|(i, rows)| record(i, rows, seq))
        .collect()
}

/// Allocation `lambda[kind][layer]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationStats {
    pub lambda: [Vec<f64>; 4],
    pub n_out: f64,
}

/// Efficiency `epsilon[kind][layer]`; `None` for a kind with no tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyStats {
    pub epsilon: [Option<Vec<f64>>; 4],
    pub counts: [f64; 4],
}

/// Sum over steps of head-mean alpha, per layer and kind.
pub fn allocation(records: &[StepAttentionRecord]) -> Result<AllocationStats, ProfileError> {
    let first = records.first().ok_or(ProfileError::Empty)?;
    let layers = first.n_layers();
    let mut lambda: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; layers]);
    for r in records {
        if r.n_layers() != layers {
            return Err(ProfileError::LayerMismatch {
                expected: layers,
                got: r.n_layers(),
            });
        }
        for l in 0..layers {
            for (per_kind, a) in lambda.iter_mut().zip(r.head_mean(l)) {
                per_kind[l] += a;
            }
        }
    }
    Ok(AllocationStats {
        lambda,
        n_out: records.len() as f64,
    })
}

/// `lambda / |kind|`, using the original (pre-pruning) input counts and the
/// number of recorded output tokens for `Out`.
pub fn efficiency(
    records: &[StepAttentionRecord],
    seq: &SegmentedSequence,
) -> Result<EfficiencyStats, ProfileError> {
    let alloc = allocation(records)?;
    Ok(efficiency_from(&alloc, seq))
}

fn efficiency_from(alloc: &AllocationStats, seq: &SegmentedSequence) -> EfficiencyStats {
    let counts = SegmentKind::ALL.map(|k| match k {
        SegmentKind::Out => alloc.n_out,
        k => seq.count(k) as f64,
    });
    let epsilon = std::array::from_fn(|t| {
        (counts[t] > 0.0).then(|| alloc.lambda[t].iter().map(|v| v / counts[t]).collect())
    });
    EfficiencyStats { epsilon, counts }
}

/// Statistics for one or more samples, as written to the stats document.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStats {
    pub n_samples: usize,
    pub n_layers: usize,
    pub allocation: AllocationStats,
    pub efficiency: EfficiencyStats,
}

impl AttentionStats {
    pub fn from_records(
        records: &[StepAttentionRecord],
        seq: &SegmentedSequence,
    ) -> Result<Self, ProfileError> {
        let allocation = allocation(records)?;
        let efficiency = efficiency_from(&allocation, seq);
        Ok(Self {
            n_samples: 1,
            n_layers: allocation.lambda[0].len(),
            allocation,
            efficiency,
        })
    }

    pub fn from_generation(
        gen: &GenerationResult,
        seq: &SegmentedSequence,
    ) -> Result<Self, ProfileError> {
        Self::from_records(&record_all(&gen.steps, seq)?, seq)
    }

    pub fn lambda(&self, kind: SegmentKind) -> &[f64] {
        &self.allocation.lambda[kind.index()]
    }

    pub fn epsilon(&self, kind: SegmentKind) -> Option<&[f64]> {
        self.efficiency.epsilon[kind.index()].as_deref()
    }

    pub fn to_document(&self) -> StatsDocument {
        let name = |k: &SegmentKind| k.as_str().to_owned();
        StatsDocument {
            n_samples: self.n_samples,
            n_layers: self.n_layers,
            n_out: self.allocation.n_out,
            counts: SegmentKind::ALL
                .iter()
                .map(|k| (name(k), self.efficiency.counts[k.index()]))
                .collect(),
            lambda: SegmentKind::ALL
                .iter()
                .map(|k| (name(k), self.allocation.lambda[k.index()].clone()))
                .collect(),
            epsilon: SegmentKind::ALL
                .iter()
                .map(|k| (name(k), self.efficiency.epsilon[k.index()].clone()))
                .collect(),
        }
    }
}

/// JSON layout of the stats file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsDocument {
    pub n_samples: usize,
    pub n_layers: usize,
    pub n_out: f64,
    pub counts: BTreeMap<String, f64>,
    pub lambda: BTreeMap<String, Vec<f64>>,
    pub epsilon: BTreeMap<String, Option<Vec<f64>>>,
}

fn mean_vecs<'a>(vs: impl Iterator<Item = &'a Vec<f64>>, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let mut n = 0usize;
    for v in vs {
        out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
        n += 1;
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    out
}

/// Macro-average over samples, in input order. `epsilon` of a kind is
/// averaged over the samples where it is defined.
pub fn merge(samples: &[AttentionStats]) -> Result<AttentionStats, ProfileError> {
    let first = samples.first().ok_or(ProfileError::NoSamples)?;
    let layers = first.n_layers;
    if let Some(bad) = samples.iter().find(|s| s.n_layers != layers) {
        return Err(ProfileError::LayerMismatch {
            expected: layers,
            got: bad.n_layers,
        });
    }
    let n = samples.len() as f64;
    let lambda =
        std::array::from_fn(|t| mean_vecs(samples.iter().map(|s| &s.allocation.lambda[t]), layers));
    let epsilon = std::array::from_fn(|t| {
        let defined: Vec<&Vec<f64>> = samples
            .iter()
            .filter_map(|s| s.efficiency.epsilon[t].as_ref())
            .collect();
        (!defined.is_empty()).then(|| mean_vecs(defined.into_iter(), layers))
    });
    let counts =
        std::array::from_fn(|t| samples.iter().map(|s| s.efficiency.counts[t]).sum::<f64>() / n);
    Ok(AttentionStats {
        n_samples: samples.iter().map(|s| s.n_samples).sum(),
        n_layers: layers,
        allocation: AllocationStats {
            lambda,
            n_out: samples.iter().map(|s| s.allocation.n_out).sum::<f64>() / n,
        },
        efficiency: EfficiencyStats { epsilon, counts },
    })
}

/// Head-averaged attention over the whole generated sequence for selected
/// layers. Row `i` is query position `i`; invisible entries are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMapDump {
    pub spans: Vec<Span>,
    pub n_input: usize,
    pub total_len: usize,
    pub layers: Vec<(usize, DenseMatrix)>,
    /// Input positions removed by pruning; their rows past layer K are zero.
    pub dropped: Vec<usize>,
}

impl AttentionMapDump {
    /// Combines captured prefill attention with recorded decode rows.
    pub fn from_generation(
        gen: &GenerationResult,
        seq: &SegmentedSequence,
    ) -> Result<Self, ProfileError> {
        if gen.captured.is_empty() {
            return Err(ProfileError::MissingAttention);
        }
        let n = seq.n_input();
        let total = n + gen.steps.len();
        let mut layers = Vec::new();
        for (layer, pre) in &gen.captured {
            let mut m = DenseMatrix::zeros(total, total);
            for r in 0..n {
                m.row_mut(r)[..n].copy_from_slice(pre.row(r));
            }
            for (i, step) in gen.steps.iter().enumerate() {
                let row = step.get(layer - 1).ok_or(ProfileError::MissingAttention)?;
                for (p, v) in row.positions.iter().zip(row.head_mean()) {
                    m.set(n + i, *p, v);
                }
            }
            layers.push((*layer, m));
        }
        Ok(Self {
            spans: seq.spans().to_vec(),
            n_input: n,
            total_len: total,
            layers,
            dropped: gen
                .decision
                .as_ref()
                .map(|d| d.dropped.clone())
                .unwrap_or_default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapsMeta {
    pub spans: Vec<Span>,
    pub layers: Vec<usize>,
    pub n_input: usize,
    pub total_len: usize,
    pub dropped: Vec<usize>,
    pub files: Vec<String>,
}

/// Writes `layer_<j>.csv` per layer plus `maps_meta.json` into `dir`.
pub fn export_maps(
    dump: &AttentionMapDump,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, ProfileError> {
    let dir = dir.as_ref();
    let io = |e: std::io::Error| ProfileError::Io(format!("{}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    let mut written = Vec::new();
    let mut files = Vec::new();
    for (layer, m) in &dump.layers {
        let name = format!("layer_{layer}.csv");
        let mut text = String::with_capacity(m.rows() * m.cols() * 8);
        for r in 0..m.rows() {
            let line: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
            text.push_str(&line.join(","));
            text.push('\n');
        }
        let path = dir.join(&name);
        fs::write(&path, text).map_err(io)?;
        written.push(path);
        files.push(name);
    }
    let meta = MapsMeta {
        spans: dump.spans.clone(),
        layers: dump.layers.iter().map(|(l, _)| *l).collect(),
        n_input: dump.n_input,
        total_len: dump.total_len,
        dropped: dump.dropped.clone(),
        files,
    };
    let path = dir.join("maps_meta.json");
    let json = serde_json::to_string_pretty(&meta).map_err(|e| ProfileError::Io(e.to_string()))?;
    fs::write(&path, json).map_err(io)?;
    written.push(path);
    Ok(written)
}

/// Parses a matrix written by [`export_maps`].
pub fn read_map_csv(path: impl AsRef<Path>) -> Result<DenseMatrix, ProfileError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| ProfileError::Io(format!("{}: {e}", path.display())))?;
    let rows: Vec<Vec<f32>> = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f32>())
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()
        .map_err(|e| ProfileError::Io(format!("{}: {e}", path.display())))?;
    DenseMatrix::from_rows(&rows).map_err(|e| ProfileError::Io(e.to_string()))
}
