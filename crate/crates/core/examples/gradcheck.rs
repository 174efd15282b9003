//! Checks reverse-mode gradients against central finite differences, first on
//! a small op graph and then through a two-layer DPN with one routed layer.

use dpn::autodiff::{gradcheck, Tape, Tensor};
use dpn::dpe::{PoolingExpert, PyramidConfig};
use dpn::objectives::{autoregressive_loss, routing_loss, total_loss_var};
use dpn::params::Binder;
use dpn::transformer::{Model, ModelDims, ModelInput, Routing};

fn main() -> dpn::Result<()> {
    let a = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).sin());
    let b = Tensor::from_fn(&[4, 2], |i| (i as f64 * 1.3).cos());
    let r = gradcheck::check(&[a, b], 1e-6, 1e-8, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        let y = t.silu(y);
        let y = t.softmax(y, 1)?;
        let y = t.mul(y, y)?;
        Ok(t.sum(y))
    })?;
    println!("op graph: {} entries, max rel err {:.2e}", r.checked, r.max_rel_err);

    let dims = ModelDims { n_layers: 2, d: 8, n_heads: 2, m: 16, vocab: 7, max_grid: (4, 4), max_tail: 4, patch_codes: 3 };
    let experts = vec![PoolingExpert::identity(), PoolingExpert::from_kernel(2, 2)?];
    let cfg = PyramidConfig { router_init_std: 0.5, ..PyramidConfig::new(vec![1]).with_experts(experts) };
    let model = Model::new(dims, &cfg, 3)?;
    let input = ModelInput { grid: (4, 4), cells: (0..16).map(|i| i % 3).collect(), text: vec![2], answer: vec![0, 4] };
    let targets = [4, 5];
    let loss = |m: &Model, trainable: bool| -> dpn::Result<(f64, std::collections::BTreeMap<String, Vec<f64>>)> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&m.params, trainable);
        let fwd = m.forward(&mut tape, &mut binder, &input, Routing::Dynamic(&cfg), None)?;
        let la = autoregressive_loss(&mut tape, fwd.logits, &fwd.layout, &targets)?;
        let lr = routing_loss(&mut tape, &fwd.probs, &cfg.experts, cfg.target)?;
        let total = total_loss_var(&mut tape, la, Some(lr), cfg.lambda)?;
        if trainable {
            tape.backward(total)?;
        }
        Ok((tape.data(total)[0], binder.grads(&tape)))
    };
    let (_, grads) = loss(&model, true)?;
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for name in ["layers.0.wq", "layers.1.w_up", "routers.1.w1", "patch_emb"] {
        for i in 0..grads[name].len() {
            let mut plus = model.clone();
            plus.params.get_mut(name)?.data_mut()[i] += eps;
            let mut minus = model.clone();
            minus.params.get_mut(name)?.data_mut()[i] -= eps;
            let numeric = (loss(&plus, false)?.0 - loss(&minus, false)?.0) / (2.0 * eps);
            worst = worst.max(gradcheck::rel_err(grads[name][i], numeric, 1e-5));
        }
    }
    println!("two-layer DPN: max rel err {worst:.2e}");
    Ok(())
}
