use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck;
use crate::transformer::ModelDims;

fn dims() -> ModelDims {
    ModelDims { n_layers: 3, d: 8, n_heads: 2, m: 16, vocab: 12, max_grid: (16, 16), max_tail: 8, patch_codes: 5 }
}

fn input(rng: &mut impl Rng, grid: (usize, usize)) -> ModelInput {
    ModelInput {
        grid,
        cells: (0..grid.0 * grid.1).map(|_| rng.gen_range(0..5)).collect(),
        text: vec![1, 2],
        answer: vec![0, 7],
    }
}

fn grid_var(tape: &mut Tape, rng: &mut impl Rng, h: usize, w: usize, d: usize) -> TokenGrid {
    let t = Tensor::from_fn(&[h * w, d], |_| rng.gen_range(-1.0..1.0));
    TokenGrid { h, w, tokens: tape.constant(t) }
}

#[test]
fn expert_validation() {
    assert!(PoolingExpert::new((1, 1), 1.0).is_ok());
    assert!(PoolingExpert::new((1, 1), 2.0).is_err());
    assert!(PoolingExpert::new((2, 2), 1.0).is_err());
    assert!(PoolingExpert::new((2, 2), 0.5).is_err());
    assert!(PoolingExpert::new((0, 2), 2.0).is_err());
    assert_eq!(PoolingExpert::from_kernel(2, 2).unwrap().compression, 4.0);
    assert_eq!(default_experts().iter().map(|e| e.compression).collect::<Vec<_>>(), vec![1.0, 2.0, 4.0]);
}

#[test]
fn pyramid_validation() {
    assert!(PyramidConfig::new(vec![1, 2]).validate(3).is_ok());
    assert!(PyramidConfig::new(vec![2, 2]).validate(3).is_err());
    assert!(PyramidConfig::new(vec![2, 1]).validate(3).is_err());
    assert!(PyramidConfig::new(vec![3]).validate(3).is_err());
    assert!(PyramidConfig::new(vec![1]).with_experts(vec![]).validate(3).is_err());
    let c = PyramidConfig::new(vec![8, 16, 24]);
    assert_eq!((c.target, c.lambda), (1.5, 0.01));
}

#[test]
fn argmax_breaks_ties_low() {
    assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
    assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    assert_eq!(argmax(&[0.2, 0.5, 0.3]), 1);
}

#[test]
fn zero_router_is_uniform() {
    let cfg = PyramidConfig::new(vec![1]);
    let mut model = Model::new(dims(), &cfg, 1).unwrap();
    for (name, t) in model.params.iter_mut() {
        if name.starts_with("routers.") {
            t.data_mut().fill(0.0);
        }
    }
    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.params, false);
    let r = tape.constant(Tensor::from_fn(&[1, 8], |i| i as f64 - 3.0));
    let p = route(&mut tape, &mut binder, 1, r).unwrap();
    for v in tape.data(p) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn router_probabilities_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = PyramidConfig { router_init_std: 1.0, ..PyramidConfig::new(vec![1]) };
    let model = Model::new(dims(), &cfg, 2).unwrap();
    for _ in 0..20 {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params, false);
        let r = tape.constant(Tensor::from_fn(&[1, 8], |_| rng.gen_range(-3.0..3.0)));
        let p = route(&mut tape, &mut binder, 1, r).unwrap();
        let s: f64 = tape.data(p).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(tape.data(p).iter().all(|&v| v > 0.0));
    }
}

#[test]
fn router_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 6;
    let inputs = [
        Tensor::from_fn(&[1, d], |_| rng.gen_range(-1.0..1.0)),
        Tensor::from_fn(&[d, d], |_| rng.gen_range(-1.0..1.0)),
        Tensor::from_fn(&[d, 3], |_| rng.gen_range(-1.0..1.0)),
    ];
    let weights = [0.3, -1.2, 2.0];
    let r = gradcheck::check(&inputs, 1e-6, 1e-8, |t, v| {
        // same graph as `route`, with the weights as explicit leaves
        let h = t.matmul(v[0], v[1])?;
        let h = t.silu(h);
        let l = t.matmul(h, v[2])?;
        let p = t.softmax(l, 1)?;
        let c = t.constant(Tensor::new(vec![1, 3], weights.to_vec())?);
        let s = t.mul(p, c)?;
        Ok(t.sum(s))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn dpe_forward_identity_expert_unit_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let g = grid_var(&mut tape, &mut rng, 4, 4, 3);
    let p = tape.constant(Tensor::new(vec![3], vec![1.0, 0.0, 0.0]).unwrap());
    let (out, dec) = dpe_forward(&mut tape, g, p, &default_experts(), 2).unwrap();
    assert_eq!((out.h, out.w), (4, 4));
    assert_eq!(tape.data(out.tokens), tape.data(g.tokens));
    assert_eq!(dec.selected, 0);
    assert_eq!(dec.scale, 1.0);
    assert_eq!(dec.pre_grid, dec.post_grid);
}

#[test]
fn dpe_forward_selects_argmax_and_scales() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let d = 3;
    let g = grid_var(&mut tape, &mut rng, 4, 4, d);
    let p = tape.constant(Tensor::new(vec![3], vec![0.2, 0.5, 0.3]).unwrap());
    let (out, dec) = dpe_forward(&mut tape, g, p, &default_experts(), 2).unwrap();
    assert_eq!(dec.selected, 1);
    assert_eq!((out.h, out.w), (4, 2));
    assert_eq!(dec.post_grid, (4, 2));
    assert_eq!(dec.scale, 0.5);
    let x = tape.data(g.tokens).to_vec();
    let y = tape.data(out.tokens);
    for r in 0..4 {
        for c in 0..2 {
            for ch in 0..d {
                let a = x[(r * 4 + 2 * c) * d + ch];
                let b = x[(r * 4 + 2 * c + 1) * d + ch];
                assert_eq!(y[(r * 2 + c) * d + ch], 0.5 * a.max(b));
            }
        }
    }
}

#[test]
fn dpe_forward_ceil_mode_on_odd_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let g = grid_var(&mut tape, &mut rng, 3, 3, 2);
    let p = tape.constant(Tensor::new(vec![3], vec![0.1, 0.1, 0.8]).unwrap());
    let (out, _) = dpe_forward(&mut tape, g, p, &default_experts(), 0).unwrap();
    assert_eq!((out.h, out.w), (2, 2));
    // bottom-right window covers the single corner cell
    let x = tape.data(g.tokens).to_vec();
    let y = tape.data(out.tokens);
    assert_eq!(y[3 * 2], 0.8 * x[8 * 2]);
}

#[test]
fn dpe_forward_kernel_larger_than_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let g = grid_var(&mut tape, &mut rng, 2, 3, 2);
    let experts = vec![PoolingExpert::identity(), PoolingExpert::from_kernel(4, 4).unwrap()];
    let p = tape.constant(Tensor::new(vec![2], vec![0.3, 0.7]).unwrap());
    let (out, _) = dpe_forward(&mut tape, g, p, &experts, 0).unwrap();
    assert_eq!((out.h, out.w), (1, 1));
}

#[test]
fn rebuild_sequence_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 2;
    // identity: unchanged
    let mut tape = Tape::new();
    let layout = SequenceLayout::new((3, 3), 2, 1).unwrap();
    let hidden = tape.constant(Tensor::from_fn(&[layout.total_len(), d], |_| rng.gen_range(-1.0..1.0)));
    let vis = tape.slice(hidden, 0, 0, 9).unwrap();
    let (seq, l2) = rebuild_sequence(&mut tape, TokenGrid { h: 3, w: 3, tokens: vis }, &layout, hidden).unwrap();
    assert_eq!(l2, layout);
    assert_eq!(tape.data(seq), tape.data(hidden));

    // 24x24 grid + 30 text + routing, 2x2 → 144 + 30 + 1
    let layout = SequenceLayout::new((24, 24), 30, 0).unwrap();
    let hidden = tape.constant(Tensor::zeros(&[layout.total_len(), d]));
    let g = TokenGrid { h: 24, w: 24, tokens: tape.slice(hidden, 0, 0, 576).unwrap() };
    let one = tape.constant(Tensor::scalar(1.0));
    let pooled = apply_expert(&mut tape, g, &default_experts()[2], one).unwrap();
    let (seq, l2) = rebuild_sequence(&mut tape, pooled, &layout, hidden).unwrap();
    assert_eq!(tape.shape(seq)[0], 144 + 30 + 1);
    assert_eq!(l2.total_len(), 175);

    // two 1x2 layers on 4x4: widths 2 then 1
    let mut layout = SequenceLayout::new((4, 4), 1, 1).unwrap();
    let mut hidden = tape.constant(Tensor::zeros(&[layout.total_len(), d]));
    let mut widths = Vec::new();
    for _ in 0..2 {
        let (h, w) = layout.grid();
        let g = TokenGrid { h, w, tokens: tape.slice(hidden, 0, 0, h * w).unwrap() };
        let pooled = apply_expert(&mut tape, g, &default_experts()[1], one).unwrap();
        let (seq, l2) = rebuild_sequence(&mut tape, pooled, &layout, hidden).unwrap();
        hidden = seq;
        layout = l2;
        widths.push(layout.grid().1);
    }
    assert_eq!(widths, vec![2, 1]);
}

#[test]
fn rebuild_sequence_rejects_length_mismatch() {
    let mut tape = Tape::new();
    let layout = SequenceLayout::new((2, 2), 1, 1).unwrap();
    let hidden = tape.constant(Tensor::zeros(&[layout.total_len() + 1, 2]));
    let vis = tape.slice(hidden, 0, 0, 4).unwrap();
    let r = rebuild_sequence(&mut tape, TokenGrid { h: 2, w: 2, tokens: vis }, &layout, hidden);
    assert!(matches!(r, Err(Error::Layout(_))));
}

#[test]
fn no_dpe_layers_matches_plain_forward_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = Model::new(dims(), &PyramidConfig::none(), 3).unwrap();
    let x = input(&mut rng, (4, 4));
    let plain = model.forward_plain(&x).unwrap();
    let dpn = dpn_forward(&model, &x, &PyramidConfig::none()).unwrap();
    assert_eq!(plain.data(), dpn.logits.data());
    assert!(dpn.decisions.is_empty());
}

#[test]
fn identity_only_experts_match_plain_forward_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = PyramidConfig { router_init_std: 1.0, ..PyramidConfig::identity_only(vec![1, 2]) };
    let model = Model::new(dims(), &cfg, 4).unwrap();
    let x = input(&mut rng, (4, 4));
    let plain = model.forward_plain(&x).unwrap();
    let dpn = dpn_forward(&model, &x, &cfg).unwrap();
    assert_eq!(plain.data(), dpn.logits.data());
    assert!(dpn.decisions.iter().all(|d| d.selected == 0 && d.scale == 1.0));
}

#[test]
fn three_stage_pyramid_shrinks_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = PyramidConfig::new(vec![0, 1, 2]);
    let model = Model::new(dims(), &cfg, 5).unwrap();
    let x = input(&mut rng, (16, 16));
    let frozen = crate::flops::static_decisions(&cfg, (16, 16), 2).unwrap();
    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.params, false);
    let fwd = model.forward(&mut tape, &mut binder, &x, Routing::Frozen(&cfg, &frozen), None).unwrap();
    let visual: Vec<usize> = fwd.decisions.iter().map(|d| d.pre_grid.0 * d.pre_grid.1).collect();
    assert_eq!(visual, vec![256, 64, 16]);
    assert_eq!(fwd.layout.visual().len, 4);
    let tail = x.text.len() + 1 + x.answer.len();
    assert_eq!(fwd.layer_lens, vec![64 + tail, 16 + tail, 4 + tail]);
    assert_eq!(tape.shape(fwd.logits), &[4 + tail, 12]);
}

#[test]
fn dynamic_decisions_are_recorded_per_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = PyramidConfig { router_init_std: 2.0, ..PyramidConfig::new(vec![1, 2]) };
    let model = Model::new(dims(), &cfg, 6).unwrap();
    for _ in 0..10 {
        let x = input(&mut rng, (4, 4));
        let out = dpn_forward(&model, &x, &cfg).unwrap();
        assert_eq!(out.decisions.len(), 2);
        for d in &out.decisions {
            assert_eq!(d.selected, argmax(&d.probs));
            assert_eq!(d.scale, d.probs[d.selected]);
            assert_eq!(d.post_grid, cfg.experts[d.selected].pooled_grid(d.pre_grid));
        }
        assert_eq!(out.decisions[0].post_grid, out.decisions[1].pre_grid);
        assert_eq!(out.layout.grid(), out.decisions[1].post_grid);
    }
}

#[test]
fn mismatched_router_config_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let model = Model::new(dims(), &PyramidConfig::new(vec![1]), 6).unwrap();
    let x = input(&mut rng, (4, 4));
    assert!(matches!(dpn_forward(&model, &x, &PyramidConfig::new(vec![2])), Err(Error::Config(_))));
}

#[test]
fn freeze_routing_contract() {
    let cfg = PyramidConfig::new(vec![1, 2]);
    assert!(matches!(freeze_routing(&[], &cfg), Err(Error::State(_))));
    let dec = crate::flops::static_decisions(&cfg, (4, 4), 1).unwrap();
    let plan = freeze_routing(&dec, &cfg).unwrap();
    assert_eq!(plan.decisions.len(), cfg.dpe_layers.len());
    assert!(freeze_routing(&dec[..1], &cfg).is_err());
}

#[test]
fn router_receives_gradient_through_scale() {
    // Two experts; finite differences of the loss w.r.t. the router's output
    // projection must be nonzero and agree with backward.
    let d = ModelDims { n_layers: 2, d: 4, n_heads: 1, m: 8, vocab: 6, max_grid: (2, 2), max_tail: 4, patch_codes: 3 };
    let experts = vec![PoolingExpert::identity(), PoolingExpert::from_kernel(1, 2).unwrap()];
    let cfg = PyramidConfig { router_init_std: 0.5, ..PyramidConfig::new(vec![1]).with_experts(experts) };
    let model = Model::new(d, &cfg, 11).unwrap();
    let x = ModelInput { grid: (2, 2), cells: vec![0, 1, 2, 1], text: vec![1], answer: vec![0, 3] };
    let w2 = model.params.get("routers.1.w2").unwrap().clone();
    let loss_at = |w: &Tensor| -> (f64, Option<Vec<f64>>) {
        let mut m = model.clone();
        *m.params.get_mut("routers.1.w2").unwrap() = w.clone();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&m.params, true);
        let fwd = m.forward(&mut tape, &mut binder, &x, Routing::Dynamic(&cfg), None).unwrap();
        let l = crate::objectives::autoregressive_loss(&mut tape, fwd.logits, &fwd.layout, &[3, 4]).unwrap();
        tape.backward(l).unwrap();
        let g = binder.grads(&tape).remove("routers.1.w2");
        (tape.data(l)[0], g)
    };
    let (_, analytic) = loss_at(&w2);
    let analytic = analytic.unwrap();
    let eps = 1e-4;
    let mut any_nonzero = false;
    for i in 0..w2.numel() {
        let mut plus = w2.clone();
        plus.data_mut()[i] += eps;
        let mut minus = w2.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (loss_at(&plus).0 - loss_at(&minus).0) / (2.0 * eps);
        assert!(gradcheck::rel_err(analytic[i], numeric, 1e-12) < 1e-3, "{i}: {} vs {numeric}", analytic[i]);
        any_nonzero |= numeric.abs() > 1e-10;
    }
    assert!(any_nonzero);
}

#[test]
fn ceil_mode_shape_law_exhaustive() {
    for h in 1..=16 {
        for w in 1..=16 {
            for kh in 1..=4 {
                for kw in 1..=4 {
                    let e = PoolingExpert { kernel: (kh, kw), compression: if kh * kw == 1 { 1.0 } else { 2.0 } };
                    let (oh, ow) = e.pooled_grid((h, w));
                    // brute-force window enumeration
                    let windows_h = (0..h).step_by(kh).count();
                    let windows_w = (0..w).step_by(kw).count();
                    assert_eq!((oh, ow), (windows_h, windows_w));
                }
            }
        }
    }
    let mut tape = Tape::new();
    for (h, w) in [(1, 1), (3, 5), (16, 16), (7, 2)] {
        let x = tape.constant(Tensor::zeros(&[h, w, 2]));
        let p = tape.maxpool_grid(x, (2, 2)).unwrap();
        assert_eq!(tape.shape(p)[0] * tape.shape(p)[1], h.div_ceil(2) * w.div_ceil(2));
    }
}

proptest! {
    #[test]
    fn layout_invariants_hold_along_random_schedules(
        h in 1usize..=16,
        w in 1usize..=16,
        text in 0usize..6,
        answer in 0usize..6,
        picks in proptest::collection::vec(0usize..3, 0..5),
    ) {
        let experts = default_experts();
        let mut layout = SequenceLayout::new((h, w), text, answer).unwrap();
        let tail = layout.tail_len();
        let mut prev_visual = layout.visual().len;
        for &k in &picks {
            let g = experts[k].pooled_grid(layout.grid());
            layout = layout.with_grid(g).unwrap();
            prop_assert!(layout.visual().len <= prev_visual);
            prop_assert_eq!(layout.tail_len(), tail);
            prop_assert_eq!(layout.text().len, text);
            prop_assert_eq!(layout.answer().len, answer);
            prop_assert_eq!(layout.text().offset, layout.visual().len);
            prop_assert_eq!(layout.routing(), layout.text().end());
            prop_assert_eq!(layout.answer().offset, layout.routing() + 1);
            prop_assert_eq!(layout.total_len(), g.0 * g.1 + text + 1 + answer);
            prop_assert!(layout.validate().is_ok());
            prev_visual = layout.visual().len;
        }
    }
}
