//! Runs one sample through a DPN with three routed layers and prints each
//! router decision and the shrinking sequence layout.

use dpn::autodiff::Tape;
use dpn::dpe::PyramidConfig;
use dpn::flops::{schedule_flops, CostDims};
use dpn::params::Binder;
use dpn::synth::{embed_sample, TaskConfig};
use dpn::transformer::{Model, ModelDims, Routing};

fn main() -> dpn::Result<()> {
    let task = TaskConfig { grid: (16, 16), ..TaskConfig::default() };
    let dims = ModelDims {
        n_layers: 6,
        d: 16,
        n_heads: 2,
        m: 32,
        vocab: task.vocab(),
        max_grid: task.grid,
        max_tail: task.max_tail(),
        patch_codes: task.n_codes,
    };
    let cfg = PyramidConfig { router_init_std: 2.0, ..PyramidConfig::new(vec![1, 3, 5]) };
    let model = Model::new(dims, &cfg, 11)?;
    for index in 0..4 {
        let sample = task.sample(5, index)?;
        let (input, layout) = embed_sample(&sample, dims.max_grid)?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params, false);
        let fwd = model.forward(&mut tape, &mut binder, &input, Routing::Dynamic(&cfg), None)?;
        println!("sample {index} ({})", sample.tag.as_str());
        for d in &fwd.decisions {
            let probs: Vec<String> = d.probs.iter().map(|p| format!("{p:.3}")).collect();
            println!(
                "  layer {}: probs [{}] -> expert {} ({:?} -> {:?}), scale {:.3}",
                d.layer,
                probs.join(", "),
                d.selected,
                d.pre_grid,
                d.post_grid,
                d.scale
            );
        }
        println!("  tokens entering each layer: {:?}", fwd.layer_lens);
        let f = schedule_flops(CostDims::from(&dims), &cfg, &layout, &fwd.decisions)?;
        println!("  FLOPs ratio {:.4}", f.ratio);
    }
    Ok(())
}
