//! Error curves, order sensitivity, length extrapolation and linear probes.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::tasks::{
    oracle_lasso_ista, oracle_least_squares, sample_episode, OodShift, TaskConfig, TaskInstance,
};

/// Episodes per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;
pub const DEFAULT_TAU: f64 = 1e-4;
pub const DEFAULT_PROBE_LAMBDA: f64 = 1e-3;
/// Relative floor on the ridge penalty when the system is singular.
pub const RIDGE_FLOOR: f64 = 1e-10;
const PERMUTATION_SALT: u64 = 0x7065_726d;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scheme: String,
    pub pe: String,
    pub ood: OodShift,
    pub length: usize,
    pub episodes: usize,
    pub mse: f64,
    pub mse_norm: f64,
}

fn episodes_at(task: &TaskConfig, length: usize, episodes: usize) -> Result<Vec<TaskInstance>> {
    let cfg = TaskConfig { n: length, ..*task };
    (0..episodes as u64).map(|e| sample_episode(&cfg, e)).collect()
}

/// Query predictions, evaluated in fixed chunks on the rayon pool.
pub fn query_predictions(state: &ModelState, insts: &[TaskInstance]) -> Result<Vec<f64>> {
    let parts: Vec<Vec<f64>> = insts
        .par_chunks(EVAL_CHUNK)
        .map(|c| state.predict_queries(c, EVAL_CHUNK))
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

fn mse_of(preds: &[f64], insts: &[TaskInstance]) -> f64 {
    preds.iter().zip(insts).map(|(p, i)| (p - i.y_t).powi(2)).sum::<f64>() / insts.len() as f64
}

/// Mean squared query error at each context length over `episodes` fresh
/// episodes drawn from `task.seed`.
pub fn mse_curve(state: &ModelState, lengths: &[usize], task: &TaskConfig, episodes: usize) -> Result<Vec<EvalRecord>> {
    if episodes == 0 {
        return Err(Error::Config("need at least one episode".into()));
    }
    lengths
        .iter()
        .map(|&length| {
            let insts = episodes_at(task, length, episodes)?;
            let preds = query_predictions(state, &insts)?;
            let mse = mse_of(&preds, &insts);
            Ok(EvalRecord {
                scheme: state.config.scheme.to_string(),
                pe: state.config.pe.to_string(),
                ood: task.ood,
                length,
                episodes,
                mse,
                mse_norm: mse / task.d as f64,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reference {
    Zero,
    LeastSquares,
    /// Penalty as a multiple of the context length.
    Lasso { lambda_per_example: f64, iters: usize },
}

impl Reference {
    pub fn label(&self) -> &'static str {
        match self {
            Reference::Zero => "zero",
            Reference::LeastSquares => "least_squares",
            Reference::Lasso { .. } => "lasso",
        }
    }

    pub fn predict(&self, inst: &TaskInstance) -> Result<f64> {
        match *self {
            Reference::Zero => Ok(0.0),
            Reference::LeastSquares => Ok(oracle_least_squares(&inst.x, &inst.y, &inst.x_t)),
            Reference::Lasso { lambda_per_example, iters } => oracle_lasso_ista(
                &inst.x,
                &inst.y,
                lambda_per_example * inst.n() as f64,
                iters,
                &inst.x_t,
            ),
        }
    }
}

/// [`mse_curve`] for a closed-form learner on the same episodes.
pub fn reference_curve(reference: Reference, lengths: &[usize], task: &TaskConfig, episodes: usize) -> Result<Vec<EvalRecord>> {
    if episodes == 0 {
        return Err(Error::Config("need at least one episode".into()));
    }
    lengths
        .iter()
        .map(|&length| {
            let insts = episodes_at(task, length, episodes)?;
            let preds: Vec<f64> = insts.par_iter().map(|i| reference.predict(i)).collect::<Result<_>>()?;
            let mse = mse_of(&preds, &insts);
            Ok(EvalRecord {
                scheme: reference.label().into(),
                pe: "-".into(),
                ood: task.ood,
                length,
                episodes,
                mse,
                mse_norm: mse / task.d as f64,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub scheme: String,
    pub n: usize,
    pub permutations: usize,
    pub tau: f64,
    pub change_freq: f64,
    /// Standard deviation of `y_hat(perm) - y_hat(identity)`.
    pub pred_std: f64,
}

/// Draws `permutations` (episode, random reordering) pairs; episode `k`
/// receives the `k`-th reordering.
pub fn sensitivity(state: &ModelState, task: &TaskConfig, n: usize, permutations: usize, tau: f64) -> Result<SensitivityReport> {
    if permutations == 0 {
        return Err(Error::Config("need at least one permutation".into()));
    }
    let insts = episodes_at(task, n, permutations)?;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed ^ PERMUTATION_SALT);
    let permuted: Vec<TaskInstance> = insts
        .iter()
        .map(|inst| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            inst.reordered(&order)
        })
        .collect();
    let base = query_predictions(state, &insts)?;
    let moved = query_predictions(state, &permuted)?;
    let diffs: Vec<f64> = moved.iter().zip(&base).map(|(a, b)| a - b).collect();
    let changed = diffs.iter().filter(|d| d.abs() > tau).count();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64;
    Ok(SensitivityReport {
        scheme: state.config.scheme.to_string(),
        n,
        permutations,
        tau,
        change_freq: changed as f64 / permutations as f64,
        pred_std: var.sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationRecord {
    pub scheme: String,
    pub pe: String,
    pub train_len: usize,
    pub eval_len: usize,
    pub mse_train_len: f64,
    pub mse_eval_len: f64,
    /// `mse_eval_len / mse_train_len`.
    pub ratio: f64,
}

/// Error at `train_len` and `factor * train_len` for each state.
pub fn length_extrapolation(
    states: &[&ModelState],
    train_len: usize,
    factor: usize,
    task: &TaskConfig,
    episodes: usize,
) -> Result<Vec<ExtrapolationRecord>> {
    let long = train_len * factor;
    states
        .iter()
        .map(|s| {
            s.prepare(long)?;
            let curve = mse_curve(s, &[train_len, long], task, episodes)?;
            Ok(ExtrapolationRecord {
                scheme: s.config.scheme.to_string(),
                pe: s.config.pe.to_string(),
                train_len,
                eval_len: long,
                mse_train_len: curve[0].mse,
                mse_eval_len: curve[1].mse,
                ratio: curve[1].mse / curve[0].mse,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub scheme: String,
    pub layer: usize,
    pub probe_mse: f64,
}

fn query_features(state: &ModelState, insts: &[TaskInstance], layers: &[usize]) -> Result<Vec<DMatrix<f64>>> {
    let e = state.config.embed_dim;
    let n = insts[0].n();
    let prep = state.prepare(n)?;
    let q = prep.layout.query_token();
    let chunks: Vec<Vec<Vec<f64>>> = insts
        .par_chunks(EVAL_CHUNK)
        .map(|c| {
            let outs = state.forward_batch(c, &prep, true)?;
            Ok(layers
                .iter()
                .map(|&l| {
                    outs.iter()
                        .flat_map(|o| o.hidden.as_ref().expect("hidden")[l].row(q).to_vec())
                        .collect()
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..layers.len())
        .map(|li| {
            let data: Vec<f64> = chunks.iter().flat_map(|c| c[li].iter().copied()).collect();
            DMatrix::from_row_slice(insts.len(), e, &data)
        })
        .collect())
}

/// Ridge weights `(H^T H + lambda I)^-1 H^T y`, raising `lambda` to a
/// floor when the system cannot be factored.
pub fn ridge(h: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let gram = h.transpose() * h;
    let rhs = h.transpose() * y;
    let floor = RIDGE_FLOOR * gram.trace().max(1.0);
    let mut lam = lambda.max(0.0);
    loop {
        let sys = &gram + DMatrix::identity(gram.nrows(), gram.ncols()) * lam;
        if let Some(ch) = sys.cholesky() {
            return ch.solve(&rhs);
        }
        lam = if lam < floor { floor } else { lam * 10.0 };
    }
}

/// Fits a ridge probe from the query's hidden state at each listed layer
/// (0 = embedding) to `y_t` on `train_episodes`, and reports the error on
/// `test_episodes` further episodes.
pub fn linear_probe(
    state: &ModelState,
    layers: &[usize],
    task: &TaskConfig,
    train_episodes: usize,
    test_episodes: usize,
    lambda: f64,
) -> Result<Vec<ProbeRecord>> {
    if let Some(&bad) = layers.iter().find(|&&l| l > state.config.layers) {
        return Err(Error::Config(format!(
            "probe layer {bad} exceeds the model's {} layers",
            state.config.layers
        )));
    }
    if train_episodes == 0 || test_episodes == 0 {
        return Err(Error::Config("probe needs training and test episodes".into()));
    }
    let all = episodes_at(task, task.n, train_episodes + test_episodes)?;
    let (train, test) = all.split_at(train_episodes);
    let f_train = query_features(state, train, layers)?;
    let f_test = query_features(state, test, layers)?;
    let y_train = DVector::from_iterator(train.len(), train.iter().map(|i| i.y_t));
    let y_test = DVector::from_iterator(test.len(), test.iter().map(|i| i.y_t));
    Ok(layers
        .iter()
        .enumerate()
        .map(|(li, &layer)| {
            let w = ridge(&f_train[li], &y_train, lambda);
            let resid = &f_test[li] * w - &y_test;
            ProbeRecord {
                scheme: state.config.scheme.to_string(),
                layer,
                probe_mse: resid.norm_squared() / test.len() as f64,
            }
        })
        .collect())
}
