//! Analytic FLOPs at 7B scale, the placement/kernel sweep, and a check that
//! the instrumented tape counts the same multiply-adds on a small model.

use dpn::autodiff::Tape;
use dpn::dpe::{PyramidConfig, SequenceLayout};
use dpn::flops::{measured_flops, schedule_flops, static_decisions, CostDims};
use dpn::harness::{profile, sweep, ProfileRow};
use dpn::params::Binder;
use dpn::transformer::{Model, ModelDims, ModelInput, Routing};

fn main() -> dpn::Result<()> {
    let dims = CostDims { n_layers: 32, d: 4096, m: 11008 };
    let layout = SequenceLayout::new((24, 24), 30, 0)?;
    let report = profile(dims, &PyramidConfig::new(vec![8, 16, 24]), &layout, 2)?;
    println!("2x2 pooling at layers 8, 16, 24:");
    for l in report.per_layer.iter().filter(|l| [0, 7, 8, 15, 16, 23, 24, 31].contains(&l.layer)) {
        println!("  layer {:>2}: {:>4} tokens, {:>14} flops", l.layer, l.tokens, l.flops);
    }
    println!("  total {} / baseline {} = {:.4}", report.total, report.baseline_total, report.ratio);
    let rows = sweep(dims, &layout, &[vec![8, 16, 24], vec![4, 8, 12]], &[(1, 2), (2, 2)])?;
    print!("{}", ProfileRow::table(&rows));

    let small = ModelDims { n_layers: 4, d: 16, n_heads: 4, m: 24, vocab: 10, max_grid: (8, 8), max_tail: 4, patch_codes: 4 };
    let cfg = PyramidConfig::new(vec![1, 3]);
    let model = Model::new(small, &cfg, 1)?;
    let input = ModelInput { grid: (7, 6), cells: vec![1; 42], text: vec![3, 4], answer: vec![0] };
    let decisions = static_decisions(&cfg, input.grid, 1)?;
    let mut tape = Tape::with_flop_counting();
    let mut binder = Binder::new(&model.params, false);
    model.forward(&mut tape, &mut binder, &input, Routing::Frozen(&cfg, &decisions), None)?;
    let measured = measured_flops(tape.flop_counter())?;
    let analytic = schedule_flops(CostDims::from(&small), &cfg, &input.layout()?, &decisions)?.total;
    println!("small model, 1x2 at layers 1 and 3: measured {measured}, analytic {analytic}");
    Ok(())
}
