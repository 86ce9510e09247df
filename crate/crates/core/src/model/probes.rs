//! Measurements behind the invariance, non-leakage and interdependence
//! properties.

use itertools::Itertools;

use super::{prediction_positions, ModelState, Target};
use crate::error::Result;
use crate::layout::SequenceLayout;
use crate::masks::SchemeId;
use crate::tasks::TaskInstance;

/// Added to a label when testing whether a prediction can see it.
pub const LABEL_SHIFT: f64 = 1.0;

/// Every ordering of `0..n`.
pub fn all_orders(n: usize) -> Vec<Vec<usize>> {
    (0..n).permutations(n).collect()
}

/// Largest change of the query prediction over the given context orders.
pub fn invariance_deviation(state: &ModelState, inst: &TaskInstance, orders: &[Vec<usize>]) -> Result<f64> {
    let mut batch = vec![inst.clone()];
    batch.extend(orders.iter().map(|o| inst.reordered(o)));
    let preds = state.predict_queries(&batch, 128)?;
    Ok(preds[1..].iter().map(|p| (p - preds[0]).abs()).fold(0.0, f64::max))
}

/// Token whose read-out predicts `y_example`: the x-token in the copy
/// used for prediction (the second copy under InvICL).
pub fn example_prediction_token(scheme: SchemeId, layout: &SequenceLayout, example: usize) -> usize {
    let copy = if scheme == SchemeId::InvIcl { 1 } else { 0 };
    layout.pair(example, copy).0
}

/// Largest change of `y_hat_i` when `y_i` alone is shifted, over all `i`.
pub fn leakage_effect(state: &ModelState, inst: &TaskInstance) -> Result<f64> {
    let prep = state.prepare(inst.n())?;
    let mut batch = vec![inst.clone()];
    for i in 0..inst.n() {
        let mut shifted = inst.clone();
        shifted.y[i] += LABEL_SHIFT;
        batch.push(shifted);
    }
    let outs = state.forward_batch(&batch, &prep, false)?;
    let mut worst: f64 = 0.0;
    for i in 0..inst.n() {
        let t = example_prediction_token(state.config.scheme, &prep.layout, i);
        let base = outs[0].at(t).expect("x token");
        worst = worst.max((outs[i + 1].at(t).expect("x token") - base).abs());
    }
    Ok(worst)
}

/// Like [`leakage_effect`] but restricted to the positions the scheme is
/// trained on.
pub fn trained_position_leakage(state: &ModelState, inst: &TaskInstance) -> Result<f64> {
    let prep = state.prepare(inst.n())?;
    let positions = prediction_positions(state.config.scheme, &prep.layout);
    let mut worst: f64 = 0.0;
    let base = state.forward_batch(std::slice::from_ref(inst), &prep, false)?.remove(0);
    for (token, target) in positions {
        if let Target::Example(i) = target {
            let mut shifted = inst.clone();
            shifted.y[i] += LABEL_SHIFT;
            let out = state.forward_batch(&[shifted], &prep, false)?.remove(0);
            worst = worst.max((out.at(token).unwrap() - base.at(token).unwrap()).abs());
        }
    }
    Ok(worst)
}

/// Replaces example `j` with a deterministic, clearly different one.
pub fn perturb_example(inst: &TaskInstance, j: usize) -> TaskInstance {
    let mut out = inst.clone();
    for (k, v) in out.x[j].iter_mut().enumerate() {
        *v = -0.7 * *v + 0.3 + 0.1 * k as f64;
    }
    out.y[j] += LABEL_SHIFT;
    out
}

/// `effect[i][j]`: largest change, over all layers, of the hidden states at
/// example `i`'s tokens in its prediction copy when example `j` is
/// perturbed. Diagonal entries are 0.
pub fn dependence_matrix(state: &ModelState, inst: &TaskInstance) -> Result<Vec<Vec<f64>>> {
    let n = inst.n();
    let prep = state.prepare(n)?;
    let mut batch = vec![inst.clone()];
    batch.extend((0..n).map(|j| perturb_example(inst, j)));
    let outs = state.forward_batch(&batch, &prep, true)?;
    let base = outs[0].hidden.as_ref().expect("hidden");
    let copy = if state.config.scheme == SchemeId::InvIcl { 1 } else { 0 };
    let mut effect = vec![vec![0.0; n]; n];
    for j in 0..n {
        let pert = outs[j + 1].hidden.as_ref().expect("hidden");
        for (i, row) in effect.iter_mut().enumerate() {
            if i == j {
                continue;
            }
            let (xt, yt) = prep.layout.pair(i, copy);
            let mut worst: f64 = 0.0;
            for (hb, hp) in base.iter().zip(pert) {
                for t in [xt, yt] {
                    for (a, b) in hb.row(t).iter().zip(hp.row(t)) {
                        worst = worst.max((a - b).abs());
                    }
                }
            }
            row[j] = worst;
        }
    }
    Ok(effect)
}
