//! Greedy decoding over a compressed KV cache: prefill routes and pools once,
//! decode steps reuse the frozen decisions.

use dpn::dpe::PyramidConfig;
use dpn::synth::{prompt_input, TaskConfig};
use dpn::transformer::{DecodeSession, Model, ModelDims, Routing};

fn main() -> dpn::Result<()> {
    let task = TaskConfig::default();
    let dims = ModelDims {
        n_layers: 4,
        d: 16,
        n_heads: 2,
        m: 32,
        vocab: task.vocab(),
        max_grid: task.grid,
        max_tail: task.max_tail() + 4,
        patch_codes: task.n_codes,
    };
    let cfg = PyramidConfig { router_init_std: 1.0, ..PyramidConfig::new(vec![2]) };
    let model = Model::new(dims, &cfg, 4)?;
    let sample = task.sample(0, 0)?;
    let (input, _) = prompt_input(&sample, dims.max_grid)?;

    let mut session = DecodeSession::new(&model, Routing::Dynamic(&cfg));
    if let Err(e) = session.step(0) {
        println!("step before prefill: {e}");
    }
    let logits = session.prefill(&input)?;
    println!("after prefill, cache lengths {:?}", session.cache().lens());
    let plan = session.freeze_routing()?;
    println!("frozen decisions: {:?}", plan.decisions.iter().map(|d| (d.layer, d.selected)).collect::<Vec<_>>());
    let mut next = dpn::dpe::argmax(&logits);
    for _ in 0..3 {
        let logits = session.step(next)?;
        println!("fed {next:>2}, cache lengths {:?}", session.cache().lens());
        next = dpn::dpe::argmax(&logits);
    }

    let generation = model.generate(&input, Routing::Dynamic(&cfg), 4)?;
    println!("generate(): tokens {:?}, final cache {:?}", generation.tokens, generation.cache_lens);
    Ok(())
}
