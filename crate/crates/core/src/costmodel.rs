//! Analytic FLOPs model for attention + FFN layers.
//!
//! One layer over `n` tokens with hidden size `d` and FFN width `m` costs
//! `4nd² + 2n²d + 2ndm` multiply-accumulates: `4nd²` for the Q/K/V/output
//! projections, `2n²d` for scores and weighted values, `2ndm` for the two FFN
//! products. If pruning leaves `n̂` tokens after layer `K` of `T`, the
//! reduction is `1 - (K·C(n) + (T-K)·C(n̂)) / (T·C(n))`.
//!
//! Costs are exact `u128` integers, so no realistic configuration overflows.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::numkernel::MacCounter;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CostError {
    #[error("reduction ratio is undefined for n = 0")]
    UndefinedRatio,
    #[error("invalid cost parameters: {0}")]
    Invalid(String),
    #[error("counter mismatch: {0}")]
    CounterMismatch(String),
}

/// How the post-K token count `n̂` is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostMode {
    /// `n̂ = floor((1 - R/100) · n)`: R% of all tokens are removed.
    Eq5Literal,
    /// `n̂ = n - floor(R/100 · n_img)`: only image tokens are removed.
    ImageOnly,
}

impl fmt::Display for CostMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostMode::Eq5Literal => "eq5",
            CostMode::ImageOnly => "image-only",
        })
    }
}

impl FromStr for CostMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "eq5" => Ok(Self::Eq5Literal),
            "image-only" => Ok(Self::ImageOnly),
            other => Err(format!(
                "unknown cost mode `{other}` (expected eq5 or image-only)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostParams {
    pub n: u64,
    pub n_img: u64,
    pub d: u64,
    pub m: u64,
    pub layers: u64,
    pub k: u64,
    pub ratio: u32,
    pub mode: CostMode,
}

impl CostParams {
    pub fn validate(&self) -> Result<(), CostError> {
        if self.k > self.layers {
            return Err(CostError::Invalid(format!(
                "K={} exceeds layer count {}",
                self.k, self.layers
            )));
        }
        if self.ratio > 100 {
            return Err(CostError::Invalid(format!(
                "R={} is outside [0, 100]",
                self.ratio
            )));
        }
        if self.n_img > self.n {
            return Err(CostError::Invalid(format!(
                "n_img={} exceeds n={}",
                self.n_img, self.n
            )));
        }
        Ok(())
    }

    /// Token count entering layers after `K`.
    pub fn n_hat(&self) -> u64 {
        let r = self.ratio as u64;
        match self.mode {
            CostMode::Eq5Literal => (100 - r) * self.n / 100,
            CostMode::ImageOnly => self.n - r * self.n_img / 100,
        }
    }
}

/// `4nd² + 2n²d + 2ndm`.
pub fn flops_per_layer(n: u64, d: u64, m: u64) -> u128 {
    let (n, d, m) = (n as u128, d as u128, m as u128);
    4 * n * d * d + 2 * n * n * d + 2 * n * d * m
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    pub params: CostParams,
    pub n_hat: u64,
    pub per_layer: Vec<u128>,
    pub baseline: u128,
    pub pruned: u128,
    pub reduction: f64,
}

pub fn report(p: &CostParams) -> Result<FlopsReport, CostError> {
    p.validate()?;
    if p.n == 0 {
        return Err(CostError::UndefinedRatio);
    }
    let full = flops_per_layer(p.n, p.d, p.m);
    let n_hat = p.n_hat();
    let reduced = flops_per_layer(n_hat, p.d, p.m);
    let per_layer: Vec<u128> = (1..=p.layers)
        .map(|j| if j <= p.k { full } else { reduced })
        .collect();
    let baseline = full * p.layers as u128;
    let pruned = per_layer.iter().sum::<u128>();
    // (baseline - pruned) / baseline keeps toy cases such as 192/640 exact
    let reduction = if baseline == 0 {
        0.0
    } else {
        (baseline - pruned) as f64 / baseline as f64
    };
    Ok(FlopsReport {
        params: *p,
        n_hat,
        per_layer,
        baseline,
        pruned,
        reduction,
    })
}

pub fn reduction_ratio(p: &CostParams) -> Result<f64, CostError> {
    Ok(report(p)?.reduction)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub k: u64,
    pub r: u32,
    pub reduction: f64,
    pub baseline: u128,
    pub pruned: u128,
}

/// Reduction for every `(K, R)` pair, K-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridReport {
    pub mode: CostMode,
    pub ks: Vec<u64>,
    pub rs: Vec<u32>,
    pub cells: Vec<GridCell>,
}

impl GridReport {
    pub fn cell(&self, k: u64, r: u32) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.k == k && c.r == r)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("K,R,reduction,flops_baseline,flops_pruned,mode\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.k, c.r, c.reduction, c.baseline, c.pruned, self.mode
            ));
        }
        out
    }
}

pub fn grid(base: &CostParams, ks: &[u64], rs: &[u32]) -> Result<GridReport, CostError> {
    if ks.is_empty() || rs.is_empty() {
        return Err(CostError::Invalid("grid ranges must be non-empty".into()));
    }
    let mut cells = Vec::with_capacity(ks.len() * rs.len());
    for &k in ks {
        for &r in rs {
            let p = CostParams {
                k,
                ratio: r,
                ..*base
            };
            let rep = report(&p)?;
            cells.push(GridCell {
                k,
                r,
                reduction: rep.reduction,
                baseline: rep.baseline,
                pruned: rep.pruned,
            });
        }
    }
    Ok(GridReport {
        mode: base.mode,
        ks: ks.to_vec(),
        rs: rs.to_vec(),
        cells,
    })
}

/// Expected vs counted MACs for one layer: `[projections, attention, ffn]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCheck {
    pub layer: usize,
    pub n: u64,
    pub expected: [u64; 3],
    pub actual: [u64; 3],
}

impl LayerCheck {
    pub fn matches(&self) -> bool {
        self.expected == self.actual
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterReport {
    pub layers: Vec<LayerCheck>,
    /// Scopes outside the per-layer terms (vocabulary projection).
    pub excluded: BTreeMap<String, u64>,
}

const TERMS: [&str; 3] = [
    "projections (qkv+out_proj)",
    "attention (scores+values)",
    "ffn",
];

impl CounterReport {
    pub fn mismatches(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in &self.layers {
            for ((term, want), got) in TERMS.iter().zip(l.expected).zip(l.actual) {
                if want != got {
                    out.push(format!(
                        "layer {} {term}: expected {want} got {got}",
                        l.layer
                    ));
                }
            }
        }
        out
    }

    pub fn is_exact(&self) -> bool {
        self.layers.iter().all(LayerCheck::matches)
    }

    pub fn into_result(self) -> Result<Self, CostError> {
        let bad = self.mismatches();
        if bad.is_empty() {
            Ok(self)
        } else {
            Err(CostError::CounterMismatch(bad.join("; ")))
        }
    }
}

/// Compares a prefill's counter with `4nd²`, `2n²d`, `2ndm` per layer, where
/// `live_counts[j-1]` is the number of tokens layer `j` processed.
pub fn verify_against_counter(
    config: &ModelConfig,
    live_counts: &[usize],
    counter: &MacCounter,
) -> CounterReport {
    let (d, m) = (config.d_model as u64, config.d_ff as u64);
    let layers = live_counts
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let j = i + 1;
            let n = n as u64;
            let scope = |s: &str| counter.scope(&format!("layer{j}/{s}"));
            LayerCheck {
                layer: j,
                n,
                expected: [4 * n * d * d, 2 * n * n * d, 2 * n * d * m],
                actual: [
                    scope("qkv") + scope("out_proj"),
                    scope("attn_scores") + scope("attn_values"),
                    scope("ffn"),
                ],
            }
        })
        .collect();
    let excluded = counter
        .per_scope()
        .iter()
        .filter(|(k, _)| !k.starts_with("layer"))
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    CounterReport { layers, excluded }
}
