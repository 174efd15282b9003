//! Causal pre-norm decoder with learned absolute positions, RMS norms,
//! multi-head attention and a SiLU FFN.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{FlopTag, Tape, Tensor, Var};
use crate::dpe::{self, DecodePlan, PyramidConfig, RouterDecision, SequenceLayout, TokenGrid};
use crate::error::{Error, Result};
use crate::params::{normal, Binder, ParamStore};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_layers: usize,
    pub d: usize,
    pub n_heads: usize,
    /// FFN intermediate width.
    pub m: usize,
    pub vocab: usize,
    /// Largest visual grid the position table covers.
    pub max_grid: (usize, usize),
    /// Positions available after the grid (text + routing + answer).
    pub max_tail: usize,
    /// Number of distinct cell codes the patch embedder accepts.
    pub patch_codes: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.n_layers,
            self.d,
            self.n_heads,
            self.m,
            self.vocab,
            self.max_grid.0,
            self.max_grid.1,
            self.max_tail,
            self.patch_codes,
        ];
        if extents.contains(&0) {
            return Err(Error::Config(format!("all model extents must be positive: {self:?}")));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::Config(format!("d={} not divisible by {} heads", self.d, self.n_heads)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }
}

/// Token ids for one sequence. The routing token has no id; it is a learned
/// vector inserted between `text` and `answer`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInput {
    pub grid: (usize, usize),
    /// Row-major cell codes, `grid.0 * grid.1` of them.
    pub cells: Vec<usize>,
    pub text: Vec<usize>,
    /// Begin-of-answer marker followed by teacher-forced answer tokens.
    pub answer: Vec<usize>,
}

impl ModelInput {
    pub fn layout(&self) -> Result<SequenceLayout> {
        if self.cells.len() != self.grid.0 * self.grid.1 {
            return Err(Error::Layout(format!(
                "{} cells for a {}x{} grid",
                self.cells.len(),
                self.grid.0,
                self.grid.1
            )));
        }
        SequenceLayout::new(self.grid, self.text.len(), self.answer.len())
    }
}

/// How DPE layers behave during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Routing<'a> {
    /// Every layer is a standard layer.
    Plain,
    /// Router picks an expert per DPE layer.
    Dynamic(&'a PyramidConfig),
    /// Replays earlier decisions with their recorded scales as constants.
    Frozen(&'a PyramidConfig, &'a [RouterDecision]),
}

/// Per-layer keys and values (`[len × d]`, all heads) of everything processed
/// so far, after any pooling at or before that layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvCache {
    layers: Vec<Option<(Tensor, Tensor)>>,
}

impl KvCache {
    pub fn new(n_layers: usize) -> Self {
        Self { layers: vec![None; n_layers] }
    }

    pub fn len(&self, layer: usize) -> usize {
        self.layers.get(layer).and_then(Option::as_ref).map_or(0, |(k, _)| k.shape()[0])
    }

    pub fn lens(&self) -> Vec<usize> {
        (0..self.layers.len()).map(|l| self.len(l)).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(Option::is_none)
    }
}

/// Result of [`Model::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[n_final × vocab]`.
    pub logits: Var,
    /// Layout of the final (possibly compressed) sequence.
    pub layout: SequenceLayout,
    pub decisions: Vec<RouterDecision>,
    /// Router probability vectors, one per decision.
    pub probs: Vec<Var>,
    /// Sequence length entering each layer.
    pub layer_lens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub params: ParamStore,
    /// Layers that own a router, and the number of experts each routes over.
    pub router_layers: Vec<usize>,
    pub n_experts: usize,
}

fn layer_name(layer: usize, part: &str) -> String {
    format!("layers.{layer}.{part}")
}

impl Model {
    /// Fresh model with routers for every DPE layer of `pyramid`.
    pub fn new(dims: ModelDims, pyramid: &PyramidConfig, seed: u64) -> Result<Self> {
        dims.validate()?;
        pyramid.validate(dims.n_layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.d;
        let proj = 1.0 / (d as f64).sqrt();
        let resid = proj / (2.0 * dims.n_layers as f64).sqrt();
        let mut p = ParamStore::new();
        p.insert("tok_emb", normal(&mut rng, &[dims.vocab, d], 0.5));
        p.insert("patch_emb", normal(&mut rng, &[dims.patch_codes, d], 0.5));
        p.insert("vis_pos", normal(&mut rng, &[dims.max_grid.0 * dims.max_grid.1, d], 0.5));
        p.insert("tail_pos", normal(&mut rng, &[dims.max_tail, d], 0.5));
        p.insert("routing_emb", normal(&mut rng, &[1, d], 0.5));
        for l in 0..dims.n_layers {
            p.insert(layer_name(l, "attn_norm"), Tensor::full(&[d], 1.0));
            for w in ["wq", "wk", "wv"] {
                p.insert(layer_name(l, w), normal(&mut rng, &[d, d], proj));
            }
            p.insert(layer_name(l, "wo"), normal(&mut rng, &[d, d], resid));
            p.insert(layer_name(l, "ffn_norm"), Tensor::full(&[d], 1.0));
            p.insert(layer_name(l, "w_up"), normal(&mut rng, &[d, dims.m], proj));
            p.insert(layer_name(l, "w_down"), normal(&mut rng, &[dims.m, d], resid / (dims.m as f64 / d as f64).sqrt()));
        }
        p.insert("final_norm", Tensor::full(&[d], 1.0));
        p.insert("lm_head", normal(&mut rng, &[d, dims.vocab], proj));
        let n_experts = pyramid.experts.len();
        for &l in &pyramid.dpe_layers {
            let [w1, w2] = dpe::router_param_names(l);
            p.insert(w1, normal(&mut rng, &[d, d], proj));
            p.insert(w2, normal(&mut rng, &[d, n_experts], pyramid.router_init_std));
        }
        Ok(Self { dims, params: p, router_layers: pyramid.dpe_layers.clone(), n_experts })
    }

    /// Errors unless this model owns a router matching every DPE layer of `pyramid`.
    pub fn check_pyramid(&self, pyramid: &PyramidConfig) -> Result<()> {
        pyramid.validate(self.dims.n_layers)?;
        if pyramid.dpe_layers.is_empty() {
            return Ok(());
        }
        if pyramid.dpe_layers != self.router_layers || pyramid.experts.len() != self.n_experts {
            return Err(Error::Config(format!(
                "model routes {} experts at layers {:?}; config asks for {} at {:?}",
                self.n_experts,
                self.router_layers,
                pyramid.experts.len(),
                pyramid.dpe_layers
            )));
        }
        Ok(())
    }

    fn check_input(&self, input: &ModelInput) -> Result<SequenceLayout> {
        let layout = input.layout()?;
        let (h, w) = input.grid;
        if h > self.dims.max_grid.0 || w > self.dims.max_grid.1 {
            return Err(Error::Capacity(format!("grid {h}x{w} exceeds max grid {:?}", self.dims.max_grid)));
        }
        if layout.tail_len() > self.dims.max_tail {
            return Err(Error::Capacity(format!(
                "{} tail positions exceed capacity {}",
                layout.tail_len(),
                self.dims.max_tail
            )));
        }
        if let Some(&c) = input.cells.iter().find(|&&c| c >= self.dims.patch_codes) {
            return Err(Error::Index(format!("cell code {c} outside {} codes", self.dims.patch_codes)));
        }
        Ok(layout)
    }

    /// Input embeddings `[n × d]`: patch + grid position for cells, token +
    /// tail position for text, routing and answer.
    pub fn embed(&self, tape: &mut Tape, binder: &mut Binder<'_>, input: &ModelInput) -> Result<Var> {
        let layout = self.check_input(input)?;
        let (h, w) = input.grid;
        let max_w = self.dims.max_grid.1;
        let patch = binder.get(tape, "patch_emb")?;
        let vis_pos = binder.get(tape, "vis_pos")?;
        let tok = binder.get(tape, "tok_emb")?;
        let tail_pos = binder.get(tape, "tail_pos")?;
        let routing = binder.get(tape, "routing_emb")?;

        let cells = tape.embedding(patch, &input.cells)?;
        let pos_ids: Vec<usize> = (0..h).flat_map(|r| (0..w).map(move |c| r * max_w + c)).collect();
        let cell_pos = tape.embedding(vis_pos, &pos_ids)?;
        let visual = tape.add(cells, cell_pos)?;

        let mut parts = vec![visual];
        let n_text = input.text.len();
        if n_text > 0 {
            let t = tape.embedding(tok, &input.text)?;
            let p = tape.embedding(tail_pos, &(0..n_text).collect::<Vec<_>>())?;
            parts.push(tape.add(t, p)?);
        }
        let rp = tape.embedding(tail_pos, &[n_text])?;
        parts.push(tape.add(routing, rp)?);
        if !input.answer.is_empty() {
            let a = tape.embedding(tok, &input.answer)?;
            let start = n_text + 1;
            let ids: Vec<usize> = (start..start + input.answer.len()).collect();
            let p = tape.embedding(tail_pos, &ids)?;
            parts.push(tape.add(a, p)?);
        }
        let x = tape.concat(&parts, 0)?;
        layout.check_len(tape.shape(x)[0])?;
        Ok(x)
    }

    /// Input embeddings as a plain tensor.
    pub fn embed_input(&self, input: &ModelInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params, false);
        let x = self.embed(&mut tape, &mut binder, input)?;
        Ok(tape.value(x).clone())
    }

    /// Causal multi-head attention over `x` (`[n × d]`, already normalized).
    ///
    /// With a cache, keys/values of earlier tokens are prepended and the new
    /// ones appended to it; the `n` queries sit after the cached positions.
    pub fn mha(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        layer: usize,
        x: Var,
        cache: Option<&mut KvCache>,
    ) -> Result<Var> {
        let d = self.dims.d;
        let dh = self.dims.head_dim();
        let wq = binder.get(tape, &layer_name(layer, "wq"))?;
        let wk = binder.get(tape, &layer_name(layer, "wk"))?;
        let wv = binder.get(tape, &layer_name(layer, "wv"))?;
        let wo = binder.get(tape, &layer_name(layer, "wo"))?;
        let q = tape.matmul_tagged(x, wq, FlopTag::Mha)?;
        let mut k = tape.matmul_tagged(x, wk, FlopTag::Mha)?;
        let mut v = tape.matmul_tagged(x, wv, FlopTag::Mha)?;
        let mut offset = 0;
        if let Some(cache) = cache {
            if layer >= cache.layers.len() {
                return Err(Error::State(format!("cache has no slot for layer {layer}")));
            }
            if let Some((ck, cv)) = &cache.layers[layer] {
                if ck.shape() != cv.shape() || ck.shape()[1] != d {
                    return Err(Error::State(format!(
                        "cache for layer {layer} holds keys {:?} and values {:?}",
                        ck.shape(),
                        cv.shape()
                    )));
                }
                offset = ck.shape()[0];
                let ck = tape.constant(ck.clone());
                let cv = tape.constant(cv.clone());
                k = tape.concat(&[ck, k], 0)?;
                v = tape.concat(&[cv, v], 0)?;
            }
            cache.layers[layer] = Some((tape.value(k).clone(), tape.value(v).clone()));
        }
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.dims.n_heads);
        for h in 0..self.dims.n_heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let kh = tape.slice(k, 1, h * dh, dh)?;
            let vh = tape.slice(v, 1, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul_tagged(qh, kt, FlopTag::Mha)?;
            let scores = tape.scale(scores, inv_sqrt);
            let masked = tape.causal_mask(scores, offset)?;
            let weights = tape.softmax(masked, 1)?;
            heads.push(tape.matmul_tagged(weights, vh, FlopTag::Mha)?);
        }
        let cat = tape.concat(&heads, 1)?;
        tape.matmul_tagged(cat, wo, FlopTag::Mha)
    }

    fn ffn(&self, tape: &mut Tape, binder: &mut Binder<'_>, layer: usize, x: Var) -> Result<Var> {
        let up = binder.get(tape, &layer_name(layer, "w_up"))?;
        let down = binder.get(tape, &layer_name(layer, "w_down"))?;
        let h = tape.matmul_tagged(x, up, FlopTag::Ffn)?;
        let h = tape.silu(h);
        tape.matmul_tagged(h, down, FlopTag::Ffn)
    }

    /// `z + MHA(Norm(z))`, then `+ FFN(Norm(·))`.
    pub fn transformer_layer(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        layer: usize,
        z: Var,
        cache: Option<&mut KvCache>,
    ) -> Result<Var> {
        let g1 = binder.get(tape, &layer_name(layer, "attn_norm"))?;
        let g2 = binder.get(tape, &layer_name(layer, "ffn_norm"))?;
        let h = tape.rmsnorm(z, g1, NORM_EPS)?;
        let a = self.mha(tape, binder, layer, h, cache)?;
        let z = tape.add(z, a)?;
        let h = tape.rmsnorm(z, g2, NORM_EPS)?;
        let f = self.ffn(tape, binder, layer, h)?;
        tape.add(z, f)
    }

    fn head(&self, tape: &mut Tape, binder: &mut Binder<'_>, z: Var) -> Result<Var> {
        let g = binder.get(tape, "final_norm")?;
        let w = binder.get(tape, "lm_head")?;
        let h = tape.rmsnorm(z, g, NORM_EPS)?;
        tape.matmul(h, w)
    }

    /// Full forward. At each DPE layer (per `routing`) the visual grid is
    /// pooled before that layer's attention. With `cache`, every layer's keys
    /// and values are stored for decoding.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        input: &ModelInput,
        routing: Routing<'_>,
        mut cache: Option<&mut KvCache>,
    ) -> Result<Forward> {
        let pyramid = match routing {
            Routing::Plain => None,
            Routing::Dynamic(p) => Some(p),
            Routing::Frozen(p, decisions) => {
                if decisions.len() != p.dpe_layers.len() {
                    return Err(Error::State(format!(
                        "{} frozen decisions for {} DPE layers",
                        decisions.len(),
                        p.dpe_layers.len()
                    )));
                }
                Some(p)
            }
        };
        if let Some(p) = pyramid {
            self.check_pyramid(p)?;
        }
        if let Some(c) = cache.as_deref() {
            if !c.is_empty() {
                return Err(Error::State("prefill needs an empty cache".into()));
            }
        }
        let mut layout = self.check_input(input)?;
        let mut z = self.embed(tape, binder, input)?;
        let mut decisions = Vec::new();
        let mut probs = Vec::new();
        let mut layer_lens = Vec::with_capacity(self.dims.n_layers);
        for layer in 0..self.dims.n_layers {
            if let Some((p, slot)) = pyramid.and_then(|p| p.slot(layer).map(|s| (p, s))) {
                let grid_rows = tape.slice(z, 0, 0, layout.visual().len)?;
                let (gh, gw) = layout.grid();
                let grid = TokenGrid { h: gh, w: gw, tokens: grid_rows };
                let (pooled, decision, pv) = match routing {
                    Routing::Frozen(_, frozen) => {
                        let fd = &frozen[slot];
                        let expert = p.experts.get(fd.selected).ok_or_else(|| {
                            Error::State(format!("frozen decision selects unknown expert {}", fd.selected))
                        })?;
                        let scale = tape.constant(Tensor::scalar(fd.scale));
                        let pooled = dpe::apply_expert(tape, grid, expert, scale)?;
                        let pv = tape.constant(Tensor::new(vec![fd.probs.len()], fd.probs.clone())?);
                        let mut d = fd.clone();
                        d.layer = layer;
                        d.pre_grid = (gh, gw);
                        d.post_grid = (pooled.h, pooled.w);
                        (pooled, d, pv)
                    }
                    _ => {
                        let r_state = tape.slice(z, 0, layout.routing(), 1)?;
                        let pv = dpe::route(tape, binder, layer, r_state)?;
                        let (pooled, d) = dpe::dpe_forward(tape, grid, pv, &p.experts, layer)?;
                        (pooled, d, pv)
                    }
                };
                let (seq, new_layout) = dpe::rebuild_sequence(tape, pooled, &layout, z)?;
                z = seq;
                layout = new_layout;
                decisions.push(decision);
                probs.push(pv);
            }
            layer_lens.push(layout.total_len());
            z = self.transformer_layer(tape, binder, layer, z, cache.as_deref_mut())?;
        }
        let logits = self.head(tape, binder, z)?;
        Ok(Forward { logits, layout, decisions, probs, layer_lens })
    }

    /// Logits `[n × vocab]` with every layer standard.
    pub fn forward_plain(&self, input: &ModelInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params, false);
        let fwd = self.forward(&mut tape, &mut binder, input, Routing::Plain, None)?;
        Ok(tape.value(fwd.logits).clone())
    }

    /// Greedy decoding from `input` (whose answer segment holds the
    /// begin-of-answer marker and any forced prefix).
    pub fn generate(&self, input: &ModelInput, routing: Routing<'_>, max_new: usize) -> Result<Generation> {
        let mut session = DecodeSession::new(self, routing);
        let tail_after = input.text.len() + 1 + input.answer.len() + max_new.saturating_sub(1);
        if tail_after > self.dims.max_tail {
            return Err(Error::Capacity(format!(
                "decoding {max_new} tokens needs {tail_after} tail positions; capacity is {}",
                self.dims.max_tail
            )));
        }
        let mut logits = session.prefill(input)?;
        let plan = session.freeze_routing()?.clone();
        let mut tokens = Vec::with_capacity(max_new);
        for step in 0..max_new {
            let next = dpe::argmax(&logits);
            tokens.push(next);
            if step + 1 < max_new {
                logits = session.step(next)?;
            }
        }
        Ok(Generation { tokens, decisions: plan.decisions, cache_lens: session.cache.lens() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub decisions: Vec<RouterDecision>,
    /// Per-layer cache length when decoding stopped.
    pub cache_lens: Vec<usize>,
}

/// Prefill → freeze → step lifecycle over a compressed KV cache.
pub struct DecodeSession<'m> {
    model: &'m Model,
    routing: Routing<'m>,
    cache: KvCache,
    prefill: Option<Prefilled>,
    plan: Option<DecodePlan>,
}

struct Prefilled {
    decisions: Vec<RouterDecision>,
    /// Next tail position to feed.
    tail_pos: usize,
    /// Cache length each layer must have before the next step.
    expected: Vec<usize>,
}

impl<'m> DecodeSession<'m> {
    pub fn new(model: &'m Model, routing: Routing<'m>) -> Self {
        Self { model, routing, cache: KvCache::new(model.dims.n_layers), prefill: None, plan: None }
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    /// Runs the prompt through the model, filling the cache. Returns the
    /// logits of the last position.
    pub fn prefill(&mut self, input: &ModelInput) -> Result<Vec<f64>> {
        if self.prefill.is_some() {
            return Err(Error::State("session already prefilled".into()));
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.model.params, false);
        let fwd = self.model.forward(&mut tape, &mut binder, input, self.routing, Some(&mut self.cache))?;
        self.prefill = Some(Prefilled {
            decisions: fwd.decisions,
            tail_pos: input.text.len() + 1 + input.answer.len(),
            expected: self.cache.lens(),
        });
        let logits = tape.value(fwd.logits);
        let last = logits.shape()[0] - 1;
        Ok(logits.row(last).to_vec())
    }

    pub fn freeze_routing(&mut self) -> Result<&DecodePlan> {
        let pre = self.prefill.as_ref().ok_or_else(|| Error::State("freeze before prefill".into()))?;
        let plan = match self.routing {
            Routing::Plain => DecodePlan { decisions: Vec::new() },
            Routing::Dynamic(p) | Routing::Frozen(p, _) => dpe::freeze_routing(&pre.decisions, p)?,
        };
        Ok(self.plan.insert(plan))
    }

    /// Feeds one token; returns next-token logits. Never pools.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        if self.prefill.is_none() {
            return Err(Error::State("decode step before prefill".into()));
        }
        if self.plan.is_none() {
            return Err(Error::State("decode step before routing was frozen".into()));
        }
        let Some(pre) = self.prefill.as_mut() else { unreachable!() };
        let pos = pre.tail_pos;
        if pos >= self.model.dims.max_tail {
            return Err(Error::Capacity(format!("tail position {pos} beyond capacity {}", self.model.dims.max_tail)));
        }
        let actual = self.cache.lens();
        if actual != pre.expected {
            return Err(Error::State(format!("cache lengths {actual:?}, expected {:?}", pre.expected)));
        }
        pre.tail_pos += 1;
        pre.expected.iter_mut().for_each(|n| *n += 1);
        let model = self.model;
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params, false);
        let tok = binder.get(&mut tape, "tok_emb")?;
        let tp = binder.get(&mut tape, "tail_pos")?;
        let e = tape.embedding(tok, &[token])?;
        let p = tape.embedding(tp, &[pos])?;
        let mut z = tape.add(e, p)?;
        for layer in 0..model.dims.n_layers {
            z = model.transformer_layer(&mut tape, &mut binder, layer, z, Some(&mut self.cache))?;
        }
        let logits = model.head(&mut tape, &mut binder, z)?;
        Ok(tape.data(logits).to_vec())
    }
}
