//! Analytic FLOPs model over MHA and FFN matmuls, plus the bridge to the
//! tape's instrumented counter.
//!
//! Per layer with `n` tokens, width `d` and FFN width `m`:
//! `4nd²` (Q/K/V/O projections) `+ 2n²d` (scores and weighted values, all
//! heads) `+ 2ndm` (FFN up and down). Counts are multiply-adds; norms,
//! softmax, the router, pooling and the LM head are excluded.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::FlopCounter;
use crate::dpe::{grid_schedule, PoolingExpert, PyramidConfig, RouterDecision, SequenceLayout};
use crate::error::{Error, Result};
use crate::transformer::ModelDims;

/// The three extents the cost model needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostDims {
    pub n_layers: usize,
    pub d: usize,
    pub m: usize,
}

impl From<&ModelDims> for CostDims {
    fn from(d: &ModelDims) -> Self {
        Self { n_layers: d.n_layers, d: d.d, m: d.m }
    }
}

pub fn layer_flops(n: u64, d: u64, m: u64) -> u64 {
    4 * n * d * d + 2 * n * n * d + 2 * n * d * m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: usize,
    pub tokens: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_layer: Vec<LayerFlops>,
    pub total: u64,
    pub baseline_total: u64,
    pub ratio: f64,
}

impl FlopsReport {
    /// Report for explicit per-layer token counts against an uncompressed
    /// baseline of `baseline_tokens` at every layer.
    pub fn from_tokens(dims: CostDims, tokens: &[usize], baseline_tokens: usize) -> Result<Self> {
        if tokens.len() != dims.n_layers {
            return Err(Error::Contract(format!(
                "{} token counts for {} layers",
                tokens.len(),
                dims.n_layers
            )));
        }
        let (d, m) = (dims.d as u64, dims.m as u64);
        let per_layer: Vec<LayerFlops> = tokens
            .iter()
            .enumerate()
            .map(|(layer, &n)| LayerFlops { layer, tokens: n, flops: layer_flops(n as u64, d, m) })
            .collect();
        let total = per_layer.iter().map(|l| l.flops).sum();
        let baseline_total = dims.n_layers as u64 * layer_flops(baseline_tokens as u64, d, m);
        let ratio = if baseline_total == 0 { 1.0 } else { total as f64 / baseline_total as f64 };
        Ok(Self { per_layer, total, baseline_total, ratio })
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.per_layer.iter().map(|l| l.tokens).collect()
    }
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>5} {:>8} {:>20}", "layer", "tokens", "flops")?;
        for l in &self.per_layer {
            writeln!(f, "{:>5} {:>8} {:>20}", l.layer, l.tokens, l.flops)?;
        }
        writeln!(f, "total    {}", self.total)?;
        writeln!(f, "baseline {}", self.baseline_total)?;
        write!(f, "ratio    {:.6}", self.ratio)
    }
}

/// Token counts per layer implied by routing decisions on `layout`:
/// `n_i = h_i·w_i + text + 1 + answer`.
pub fn schedule_tokens(
    dims: CostDims,
    config: &PyramidConfig,
    layout: &SequenceLayout,
    decisions: &[RouterDecision],
) -> Result<Vec<usize>> {
    config.validate(dims.n_layers).map_err(|e| Error::Contract(e.to_string()))?;
    for (d, &l) in decisions.iter().zip(&config.dpe_layers) {
        if d.layer != l {
            return Err(Error::Contract(format!("decision for layer {} where layer {l} expected", d.layer)));
        }
    }
    let grids = grid_schedule(layout.grid(), dims.n_layers, config, decisions)?;
    Ok(grids.iter().map(|(h, w)| h * w + layout.tail_len()).collect())
}

pub fn schedule_flops(
    dims: CostDims,
    config: &PyramidConfig,
    layout: &SequenceLayout,
    decisions: &[RouterDecision],
) -> Result<FlopsReport> {
    let tokens = schedule_tokens(dims, config, layout, decisions)?;
    FlopsReport::from_tokens(dims, &tokens, layout.total_len())
}

/// Decisions that deterministically select `expert_index` at every DPE layer.
pub fn static_decisions(
    config: &PyramidConfig,
    grid: (usize, usize),
    expert_index: usize,
) -> Result<Vec<RouterDecision>> {
    let expert: &PoolingExpert = config
        .experts
        .get(expert_index)
        .ok_or_else(|| Error::Config(format!("no expert {expert_index} in a set of {}", config.experts.len())))?;
    let mut g = grid;
    let mut out = Vec::with_capacity(config.dpe_layers.len());
    for &layer in &config.dpe_layers {
        let mut probs = vec![0.0; config.experts.len()];
        probs[expert_index] = 1.0;
        let post = expert.pooled_grid(g);
        out.push(RouterDecision { layer, probs, selected: expert_index, scale: 1.0, pre_grid: g, post_grid: post });
        g = post;
    }
    Ok(out)
}

/// MHA + FFN multiply-adds recorded by a counting tape.
pub fn measured_flops(counter: Option<FlopCounter>) -> Result<u64> {
    counter
        .map(|c| c.mha + c.ffn)
        .ok_or_else(|| Error::State("forward ran without flop counting".into()))
}
