//! Dynamic pooling experts: routing-token router, top-1 pooling dispatch and
//! reassembly of the shortened sequence.
//!
//! At every configured layer the router reads the routing token's residual
//! state, picks the most probable pooling expert, max-pools the visual grid
//! with that expert's kernel and scales the pooled grid by the winning
//! probability. The scale is the only gradient path into the router from the
//! autoregressive loss.

mod layout;

pub use layout::{Segment, SequenceLayout, TokenGrid};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::Binder;
use crate::transformer::{Model, ModelInput, Routing};

/// Max-pooling kernel plus the token reduction factor credited to it by the
/// routing loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolingExpert {
    pub kernel: (usize, usize),
    pub compression: f64,
}

impl PoolingExpert {
    pub fn new(kernel: (usize, usize), compression: f64) -> Result<Self> {
        let e = Self { kernel, compression };
        e.validate()?;
        Ok(e)
    }

    /// Credits the kernel with its token-count reduction `kh·kw`.
    pub fn from_kernel(kh: usize, kw: usize) -> Result<Self> {
        Self::new((kh, kw), (kh * kw) as f64)
    }

    pub fn identity() -> Self {
        Self { kernel: (1, 1), compression: 1.0 }
    }

    pub fn is_identity(&self) -> bool {
        self.kernel == (1, 1)
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if kh == 0 || kw == 0 {
            return Err(Error::Config(format!("expert kernel {kh}x{kw} has a zero extent")));
        }
        if !(self.compression >= 1.0) || !self.compression.is_finite() {
            return Err(Error::Config(format!("compression rate {} must be >= 1", self.compression)));
        }
        if self.is_identity() != (self.compression == 1.0) {
            return Err(Error::Config(format!(
                "kernel {kh}x{kw} with compression {}: only the 1x1 kernel has rate 1",
                self.compression
            )));
        }
        Ok(())
    }

    /// Ceil-mode output grid for an `h×w` input.
    pub fn pooled_grid(&self, (h, w): (usize, usize)) -> (usize, usize) {
        (h.div_ceil(self.kernel.0), w.div_ceil(self.kernel.1))
    }
}

/// DPE placement and routing-loss settings.
///
/// `dpe_layers` are 0-based indices of the layers whose input is pooled, so
/// index 8 sits after the eighth layer of the stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub dpe_layers: Vec<usize>,
    pub experts: Vec<PoolingExpert>,
    pub target: f64,
    pub lambda: f64,
    /// Std of the router's output projection at initialization; 0 gives
    /// uniform initial probabilities.
    #[serde(default)]
    pub router_init_std: f64,
}

impl PyramidConfig {
    pub const DEFAULT_TARGET: f64 = 1.5;
    pub const DEFAULT_LAMBDA: f64 = 0.01;
    /// Routing-loss weight used for high-resolution inputs.
    pub const HIGH_RES_LAMBDA: f64 = 1.0;

    /// `{1x1, 1x2, 2x2}` experts at the given layers, `t = 1.5`, `λ = 0.01`.
    pub fn new(dpe_layers: Vec<usize>) -> Self {
        Self {
            dpe_layers,
            experts: default_experts(),
            target: Self::DEFAULT_TARGET,
            lambda: Self::DEFAULT_LAMBDA,
            router_init_std: 0.0,
        }
    }

    /// No DPE layers at all.
    pub fn none() -> Self {
        Self::new(Vec::new())
    }

    /// A single identity expert at each given layer; routing is then a no-op.
    pub fn identity_only(dpe_layers: Vec<usize>) -> Self {
        Self { experts: vec![PoolingExpert::identity()], ..Self::new(dpe_layers) }
    }

    pub fn with_experts(mut self, experts: Vec<PoolingExpert>) -> Self {
        self.experts = experts;
        self
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.experts.is_empty() {
            return Err(Error::Config("expert set is empty".into()));
        }
        for e in &self.experts {
            e.validate()?;
        }
        if self.dpe_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("DPE layers {:?} not strictly increasing", self.dpe_layers)));
        }
        if let Some(&last) = self.dpe_layers.last() {
            if last >= n_layers {
                return Err(Error::Config(format!("DPE layer {last} outside a {n_layers}-layer stack")));
            }
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if !self.target.is_finite() {
            return Err(Error::Config("target compression must be finite".into()));
        }
        Ok(())
    }

    pub fn compression_rates(&self) -> Vec<f64> {
        self.experts.iter().map(|e| e.compression).collect()
    }

    /// Position of `layer` among the DPE layers.
    pub fn slot(&self, layer: usize) -> Option<usize> {
        self.dpe_layers.iter().position(|&l| l == layer)
    }
}

pub fn default_experts() -> Vec<PoolingExpert> {
    vec![
        PoolingExpert::identity(),
        PoolingExpert { kernel: (1, 2), compression: 2.0 },
        PoolingExpert { kernel: (2, 2), compression: 4.0 },
    ]
}

/// What one DPE layer decided for one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterDecision {
    pub layer: usize,
    pub probs: Vec<f64>,
    pub selected: usize,
    pub scale: f64,
    pub pre_grid: (usize, usize),
    pub post_grid: (usize, usize),
}

impl RouterDecision {
    /// `Σ_i p_i · C_i` over every expert.
    pub fn expected_compression(&self, experts: &[PoolingExpert]) -> f64 {
        self.probs.iter().zip(experts).map(|(p, e)| p * e.compression).sum()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn router_param_names(layer: usize) -> [String; 2] {
    [format!("routers.{layer}.w1"), format!("routers.{layer}.w2")]
}

/// Softmax over experts of a two-layer SiLU MLP applied to the routing
/// token's state (`[1×d]`). Returns a `[n_experts]` probability vector.
pub fn route(tape: &mut Tape, binder: &mut Binder<'_>, layer: usize, r_state: Var) -> Result<Var> {
    let [w1, w2] = router_param_names(layer);
    let w1 = binder.get(tape, &w1)?;
    let w2 = binder.get(tape, &w2)?;
    let h = tape.matmul(r_state, w1)?;
    let h = tape.silu(h);
    let logits = tape.matmul(h, w2)?;
    let probs = tape.softmax(logits, 1)?;
    let n = tape.shape(probs)[1];
    tape.reshape(probs, &[n])
}

/// Pools `grid` with `expert` and multiplies the result by `scale` (1 element).
pub fn apply_expert(tape: &mut Tape, grid: TokenGrid, expert: &PoolingExpert, scale: Var) -> Result<TokenGrid> {
    let d = tape.shape(grid.tokens)[1];
    let cube = tape.reshape(grid.tokens, &[grid.h, grid.w, d])?;
    let pooled = tape.maxpool_grid(cube, expert.kernel)?;
    let (h, w) = expert.pooled_grid((grid.h, grid.w));
    let flat = tape.reshape(pooled, &[h * w, d])?;
    let tokens = tape.scale_by(flat, scale)?;
    Ok(TokenGrid { h, w, tokens })
}

/// Top-1 dispatch: applies the probability-maximal expert scaled by its
/// probability.
pub fn dpe_forward(
    tape: &mut Tape,
    grid: TokenGrid,
    probs: Var,
    experts: &[PoolingExpert],
    layer: usize,
) -> Result<(TokenGrid, RouterDecision)> {
    let p = tape.data(probs).to_vec();
    if p.len() != experts.len() {
        return Err(Error::Dimension(format!("{} probabilities for {} experts", p.len(), experts.len())));
    }
    let selected = argmax(&p);
    let scale = tape.select(probs, selected)?;
    let out = apply_expert(tape, grid, &experts[selected], scale)?;
    let decision = RouterDecision {
        layer,
        scale: p[selected],
        probs: p,
        selected,
        pre_grid: (grid.h, grid.w),
        post_grid: (out.h, out.w),
    };
    Ok((out, decision))
}

/// `[pooled visual ++ text ++ routing ++ answer]` with offsets recomputed.
pub fn rebuild_sequence(
    tape: &mut Tape,
    pooled: TokenGrid,
    layout: &SequenceLayout,
    hidden: Var,
) -> Result<(Var, SequenceLayout)> {
    layout.check_len(tape.shape(hidden)[0])?;
    if tape.shape(pooled.tokens)[0] != pooled.h * pooled.w {
        return Err(Error::Layout(format!(
            "pooled grid {}x{} carries {} rows",
            pooled.h,
            pooled.w,
            tape.shape(pooled.tokens)[0]
        )));
    }
    let tail = tape.slice(hidden, 0, layout.visual().len, layout.tail_len())?;
    let seq = tape.concat(&[pooled.tokens, tail], 0)?;
    let new_layout = layout.with_grid((pooled.h, pooled.w))?;
    new_layout.check_len(tape.shape(seq)[0])?;
    Ok((seq, new_layout))
}

/// Routing frozen after prefill; decode steps reuse it and never pool.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodePlan {
    pub decisions: Vec<RouterDecision>,
}

/// Freezes prefill decisions. Requires one decision per configured DPE layer.
pub fn freeze_routing(decisions: &[RouterDecision], config: &PyramidConfig) -> Result<DecodePlan> {
    if decisions.len() != config.dpe_layers.len() {
        return Err(Error::State(format!(
            "{} routing decisions for {} DPE layers; run prefill first",
            decisions.len(),
            config.dpe_layers.len()
        )));
    }
    for (d, &l) in decisions.iter().zip(&config.dpe_layers) {
        if d.layer != l {
            return Err(Error::State(format!("decision for layer {} where layer {l} expected", d.layer)));
        }
    }
    Ok(DecodePlan { decisions: decisions.to_vec() })
}

/// Output of [`dpn_forward`].
#[derive(Clone, Debug)]
pub struct DpnOutput {
    /// `[n_final × vocab]` over the compressed sequence.
    pub logits: Tensor,
    pub layout: SequenceLayout,
    pub decisions: Vec<RouterDecision>,
}

/// Inference forward with dynamic routing at the configured layers.
pub fn dpn_forward(model: &Model, input: &ModelInput, config: &PyramidConfig) -> Result<DpnOutput> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.params, false);
    let fwd = model.forward(&mut tape, &mut binder, input, Routing::Dynamic(config), None)?;
    Ok(DpnOutput { logits: tape.value(fwd.logits).clone(), layout: fwd.layout, decisions: fwd.decisions })
}

/// Visual grid entering each layer given the decisions made along the way.
pub fn grid_schedule(
    initial: (usize, usize),
    n_layers: usize,
    config: &PyramidConfig,
    decisions: &[RouterDecision],
) -> Result<Vec<(usize, usize)>> {
    if decisions.len() != config.dpe_layers.len() {
        return Err(Error::Contract(format!(
            "{} decisions for {} DPE layers",
            decisions.len(),
            config.dpe_layers.len()
        )));
    }
    let mut grid = initial;
    let mut out = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        if let Some(slot) = config.slot(layer) {
            let expert = config
                .experts
                .get(decisions[slot].selected)
                .ok_or_else(|| Error::Contract(format!("decision selects unknown expert {}", decisions[slot].selected)))?;
            grid = expert.pooled_grid(grid);
        }
        out.push(grid);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
