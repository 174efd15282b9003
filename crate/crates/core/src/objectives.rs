//! Autoregressive answer loss, hinge routing loss and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dpe::{PoolingExpert, RouterDecision, SequenceLayout};
use crate::error::{Error, Result};

/// Loss values of one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub autoregressive: f64,
    pub routing: f64,
    pub total: f64,
    /// Mean of `Σ_i p_i·C_i` over the step's routing decisions (1 when there are none).
    pub mean_expected_compression: f64,
}

/// Mean cross-entropy over answer positions only. `targets[j]` is the token
/// predicted at `layout.answer().offset + j`.
pub fn autoregressive_loss(tape: &mut Tape, logits: Var, layout: &SequenceLayout, targets: &[usize]) -> Result<Var> {
    let rows = answer_rows(tape, logits, layout, targets)?;
    tape.cross_entropy(rows, targets)
}

/// Answer-position logits of several sequences stacked into one batch loss.
pub fn batch_autoregressive_loss(
    tape: &mut Tape,
    items: &[(Var, SequenceLayout, Vec<usize>)],
) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::Contract("autoregressive loss over an empty batch".into()));
    }
    let mut parts = Vec::with_capacity(items.len());
    let mut all_targets = Vec::new();
    for (logits, layout, targets) in items {
        let rows = answer_rows(tape, *logits, layout, targets)?;
        parts.push(rows);
        all_targets.extend_from_slice(targets);
    }
    let stacked = tape.concat(&parts, 0)?;
    tape.cross_entropy(stacked, &all_targets)
}

fn answer_rows(
    tape: &mut Tape,
    logits: Var,
    layout: &SequenceLayout,
    targets: &[usize],
) -> Result<Var> {
    let answer = layout.answer();
    if answer.len == 0 || targets.is_empty() {
        return Err(Error::Contract("answer segment is empty".into()));
    }
    if targets.len() != answer.len {
        return Err(Error::Contract(format!(
            "{} targets for an answer segment of {}",
            targets.len(),
            answer.len
        )));
    }
    layout.check_len(tape.shape(logits)[0])?;
    tape.slice(logits, 0, answer.offset, answer.len)
}

/// `max(0, t - mean_k Σ_i p_{k,i}·C_i)` over every decision `k`, on the tape.
pub fn routing_loss(tape: &mut Tape, probs: &[Var], experts: &[PoolingExpert], target: f64) -> Result<Var> {
    if probs.is_empty() {
        return Err(Error::Contract("routing loss needs at least one decision".into()));
    }
    let rates: Vec<f64> = experts.iter().map(|e| e.compression).collect();
    let mut expected = Vec::with_capacity(probs.len());
    for &p in probs {
        if tape.shape(p) != [rates.len()] {
            return Err(Error::Dimension(format!(
                "probability vector {:?} for {} experts",
                tape.shape(p),
                rates.len()
            )));
        }
        let c = tape.constant(Tensor::new(vec![rates.len()], rates.clone())?);
        let weighted = tape.mul(p, c)?;
        expected.push(tape.sum(weighted));
    }
    let stacked = tape.concat(&expected, 0)?;
    let mean = tape.mean(stacked)?;
    let gap = tape.scale(mean, -1.0);
    let gap = tape.add_scalar(gap, target);
    Ok(tape.relu(gap))
}

/// Mean expected compression of recorded decisions.
pub fn mean_expected_compression(decisions: &[RouterDecision], experts: &[PoolingExpert]) -> Option<f64> {
    if decisions.is_empty() {
        return None;
    }
    let s: f64 = decisions.iter().map(|d| d.expected_compression(experts)).sum();
    Some(s / decisions.len() as f64)
}

/// Routing loss evaluated on recorded decisions.
pub fn routing_loss_value(decisions: &[RouterDecision], experts: &[PoolingExpert], target: f64) -> Result<f64> {
    let mean = mean_expected_compression(decisions, experts)
        .ok_or_else(|| Error::Contract("routing loss needs at least one decision".into()))?;
    Ok((target - mean).max(0.0))
}

pub fn total_loss(autoregressive: f64, routing: f64, lambda: f64) -> f64 {
    autoregressive + lambda * routing
}

/// `L_a + λ·L_r` on the tape; `routing` may be absent when there are no DPE layers.
pub fn total_loss_var(tape: &mut Tape, autoregressive: Var, routing: Option<Var>, lambda: f64) -> Result<Var> {
    match routing {
        Some(r) => {
            let weighted = tape.scale(r, lambda);
            tape.add(autoregressive, weighted)
        }
        None => Ok(autoregressive),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::dpe::default_experts;

    fn decision(probs: &[f64]) -> RouterDecision {
        RouterDecision {
            layer: 1,
            probs: probs.to_vec(),
            selected: crate::dpe::argmax(probs),
            scale: probs[crate::dpe::argmax(probs)],
            pre_grid: (4, 4),
            post_grid: (4, 4),
        }
    }

    fn tape_routing_loss(probs: &[&[f64]], t: f64) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> =
            probs.iter().map(|p| tape.constant(Tensor::new(vec![p.len()], p.to_vec()).unwrap())).collect();
        let l = routing_loss(&mut tape, &vars, &default_experts(), t).unwrap();
        tape.data(l)[0]
    }

    #[test]
    fn routing_loss_closed_forms() {
        let e = default_experts();
        assert_eq!(routing_loss_value(&[decision(&[1.0, 0.0, 0.0])], &e, 1.5).unwrap(), 0.5);
        assert_eq!(routing_loss_value(&[decision(&[0.0, 0.0, 1.0])], &e, 1.5).unwrap(), 0.0);
        let third = 1.0 / 3.0;
        let u = decision(&[third, third, third]);
        assert!((u.expected_compression(&e) - 7.0 / 3.0).abs() < 1e-15);
        assert_eq!(routing_loss_value(&[u], &e, 1.5).unwrap(), 0.0);

        assert_eq!(tape_routing_loss(&[&[1.0, 0.0, 0.0]], 1.5), 0.5);
        assert_eq!(tape_routing_loss(&[&[0.0, 0.0, 1.0]], 1.5), 0.0);
        assert_eq!(tape_routing_loss(&[&[third, third, third]], 1.5), 0.0);
    }

    #[test]
    fn routing_loss_requires_decisions() {
        assert!(matches!(routing_loss_value(&[], &default_experts(), 1.5), Err(Error::Contract(_))));
        let mut tape = Tape::new();
        assert!(matches!(routing_loss(&mut tape, &[], &default_experts(), 1.5), Err(Error::Contract(_))));
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(2.0, 0.5, 0.0), 2.0);
        assert!((total_loss(2.0, 0.5, 0.01) - 2.005).abs() < 1e-15);
    }

    #[test]
    fn hinge_gradient_dead_and_active() {
        let e = default_experts();
        // active: expected compressions 1.2 and 1.3, mean 1.25 < 1.5
        let probs = [vec![0.8, 0.2, 0.0], vec![0.9, 0.0, 0.1]];
        let mut tape = Tape::new();
        let vars: Vec<Var> = probs.iter().map(|p| tape.param(Tensor::new(vec![3], p.clone()).unwrap())).collect();
        let l = routing_loss(&mut tape, &vars, &e, 1.5).unwrap();
        tape.backward(l).unwrap();
        for &v in &vars {
            let g = tape.grad(v).unwrap();
            for (gi, ex) in g.iter().zip(&e) {
                assert!((gi - (-ex.compression / 2.0)).abs() < 1e-10);
            }
        }
        // dead zone: uniform probabilities give 7/3 > 1.5
        let mut tape = Tape::new();
        let v = tape.param(Tensor::new(vec![3], vec![1.0 / 3.0; 3]).unwrap());
        let l = routing_loss(&mut tape, &[v], &e, 1.5).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(v).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn hinge_gradient_matches_finite_differences() {
        let e = default_experts();
        let inputs = [Tensor::new(vec![3], vec![0.7, 0.2, 0.1]).unwrap(), Tensor::new(vec![3], vec![0.9, 0.05, 0.05]).unwrap()];
        let r = gradcheck::check(&inputs, 1e-6, 1e-8, |t, v| routing_loss(t, v, &e, 1.5)).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn autoregressive_loss_examples() {
        let layout = SequenceLayout::new((2, 2), 1, 2).unwrap();
        let n = layout.total_len();
        let v = 5;
        // uniform logits: ln V
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[n, v]));
        let l = autoregressive_loss(&mut tape, logits, &layout, &[1, 4]).unwrap();
        assert!((tape.data(l)[0] - (v as f64).ln()).abs() < 1e-14);

        // near one-hot correct logits at answer rows: ~0
        let mut data = vec![0.0; n * v];
        let a = layout.answer().offset;
        data[a * v + 1] = 800.0;
        data[(a + 1) * v + 4] = 800.0;
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![n, v], data.clone()).unwrap());
        let l = autoregressive_loss(&mut tape, logits, &layout, &[1, 4]).unwrap();
        assert_eq!(tape.data(l)[0], 0.0);

        // perturbing visual rows leaves the loss unchanged
        let mut perturbed = data;
        for x in &mut perturbed[..4 * v] {
            *x += 3.7;
        }
        let logits = tape.constant(Tensor::new(vec![n, v], perturbed).unwrap());
        let l2 = autoregressive_loss(&mut tape, logits, &layout, &[1, 4]).unwrap();
        assert_eq!(tape.data(l2)[0], tape.data(l)[0]);
    }

    #[test]
    fn autoregressive_loss_empty_answer_is_contract_error() {
        let layout = SequenceLayout::new((2, 2), 1, 0).unwrap();
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[layout.total_len(), 3]));
        assert!(matches!(autoregressive_loss(&mut tape, logits, &layout, &[]), Err(Error::Contract(_))));
    }
}
