//! Synthetic regression episodes and closed-form reference learners.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nonzero weights in the sparse variant.
pub const SPARSE_SUPPORT: usize = 3;
/// Relative cutoff for singular values in the pseudo-inverse.
pub const PINV_RCOND: f64 = 1e-10;
/// Lasso penalties tried for the reference curve, as multiples of `n`.
pub const LASSO_LAMBDA_GRID: [f64; 4] = [0.001, 0.01, 0.1, 1.0];
/// Standard deviation of inputs under [`OodShift::Scale`].
pub const SCALE_SHIFT_STD: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[serde(rename = "linreg")]
    LinReg,
    #[serde(rename = "sparse")]
    SparseLinReg,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linreg" => Ok(TaskKind::LinReg),
            "sparse" | "sparse_linreg" => Ok(TaskKind::SparseLinReg),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::LinReg => "linreg",
            TaskKind::SparseLinReg => "sparse",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodShift {
    None,
    /// Per-episode bias `b ~ N(0, 1)` added to every label.
    Noise,
    /// Inputs drawn from `N(0, 3^2 I)`.
    Scale,
    /// Inputs drawn from a random `floor(d/2)`-dimensional subspace.
    Subspace,
}

impl OodShift {
    pub fn as_str(self) -> &'static str {
        match self {
            OodShift::None => "none",
            OodShift::Noise => "noise",
            OodShift::Scale => "scale",
            OodShift::Subspace => "subspace",
        }
    }
}

impl FromStr for OodShift {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(OodShift::None),
            "noise" => Ok(OodShift::Noise),
            "scale" => Ok(OodShift::Scale),
            "subspace" => Ok(OodShift::Subspace),
            other => Err(Error::Config(format!("unknown OOD shift `{other}`"))),
        }
    }
}

impl fmt::Display for OodShift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub d: usize,
    pub n: usize,
    pub ood: OodShift,
    pub seed: u64,
}

impl TaskConfig {
    pub fn linreg(d: usize, n: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::LinReg,
            d,
            n,
            ood: OodShift::None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("task dimension must be at least 1".into()));
        }
        if self.kind == TaskKind::SparseLinReg && self.d < SPARSE_SUPPORT {
            return Err(Error::Config(format!(
                "sparse regression needs d >= {SPARSE_SUPPORT}, got {}",
                self.d
            )));
        }
        Ok(())
    }
}

/// One regression episode: `n` labelled examples plus a query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    /// Rows `x_i`.
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub b: f64,
    pub x_t: Vec<f64>,
    pub y_t: f64,
}

impl TaskInstance {
    /// Builds an episode whose labels follow `w` and `b` exactly.
    pub fn from_parts(x: Vec<Vec<f64>>, w: Vec<f64>, b: f64, x_t: Vec<f64>) -> Self {
        let y = x.iter().map(|row| dot(&w, row) + b).collect();
        let y_t = dot(&w, &x_t) + b;
        Self { x, y, w, b, x_t, y_t }
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn d(&self) -> usize {
        self.x_t.len()
    }

    /// Context reordered so that position `i` holds the example previously
    /// at `order[i]`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        Self {
            x: order.iter().map(|&i| self.x[i].clone()).collect(),
            y: order.iter().map(|&i| self.y[i]).collect(),
            ..self.clone()
        }
    }

    /// The first `n` context examples, same query.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            x: self.x[..n].to_vec(),
            y: self.y[..n].to_vec(),
            ..self.clone()
        }
    }

    pub fn design(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.d(), |i, j| self.x[i][j])
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Independent stream for episode `episode` of a run seeded with `seed`.
pub fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    rng
}

fn normal_vec(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn sample_task(cfg: &TaskConfig) -> Result<TaskInstance> {
    sample_episode(cfg, 0)
}

/// Episode `episode` of the stream defined by `cfg.seed`.
pub fn sample_episode(cfg: &TaskConfig, episode: u64) -> Result<TaskInstance> {
    cfg.validate()?;
    let mut rng = episode_rng(cfg.seed, episode);
    let d = cfg.d;
    let w = match cfg.kind {
        TaskKind::LinReg => normal_vec(&mut rng, d),
        TaskKind::SparseLinReg => {
            let mut w = vec![0.0; d];
            for idx in sample(&mut rng, d, SPARSE_SUPPORT) {
                w[idx] = rng.sample(StandardNormal);
            }
            w
        }
    };
    let b = if cfg.ood == OodShift::Noise {
        rng.sample(StandardNormal)
    } else {
        0.0
    };
    let basis = (cfg.ood == OodShift::Subspace).then(|| random_basis(&mut rng, d, (d / 2).max(1)));
    let draw_x = |rng: &mut ChaCha8Rng| match (&basis, cfg.ood) {
        (Some(u), _) => {
            let z = DVector::from_vec(normal_vec(rng, u.ncols()));
            (u * z).iter().copied().collect()
        }
        (None, OodShift::Scale) => normal_vec(rng, d).into_iter().map(|v| SCALE_SHIFT_STD * v).collect(),
        (None, _) => normal_vec(rng, d),
    };
    let x: Vec<Vec<f64>> = (0..cfg.n).map(|_| draw_x(&mut rng)).collect();
    let x_t = draw_x(&mut rng);
    Ok(TaskInstance::from_parts(x, w, b, x_t))
}

/// Orthonormal `d x k` basis of a uniformly random subspace.
fn random_basis(rng: &mut ChaCha8Rng, d: usize, k: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

/// Minimum-norm least-squares weights via SVD; singular values below
/// `PINV_RCOND * sigma_max` are dropped. Rows are put in a canonical order
/// first, so the result is bit-identical under any reordering.
pub fn least_squares_weights(x: &[Vec<f64>], y: &[f64], d: usize) -> Vec<f64> {
    if x.is_empty() {
        return vec![0.0; d];
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| {
        x[a].iter()
            .zip(&x[b])
            .map(|(p, q)| p.total_cmp(q))
            .chain([y[a].total_cmp(&y[b])])
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let a = DMatrix::from_fn(x.len(), d, |i, j| x[order[i]][j]);
    let svd = a.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let sigma_max = svd.singular_values.max();
    let cutoff = PINV_RCOND * sigma_max;
    let yv = DVector::from_iterator(y.len(), order.iter().map(|&i| y[i]));
    let mut w = DVector::zeros(d);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            let coef = u.column(i).dot(&yv) / s;
            w += vt.row(i).transpose() * coef;
        }
    }
    w.iter().copied().collect()
}

pub fn oracle_least_squares(x: &[Vec<f64>], y: &[f64], x_t: &[f64]) -> f64 {
    dot(&least_squares_weights(x, y, x_t.len()), x_t)
}

fn residual(x: &[Vec<f64>], y: &[f64], w: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(row, yi)| dot(row, w) - yi).collect()
}

/// `X^T r`.
fn xt_times(x: &[Vec<f64>], r: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (row, ri) in x.iter().zip(r) {
        for j in 0..d {
            out[j] += row[j] * ri;
        }
    }
    out
}

fn check_step(eta: f64) -> Result<()> {
    if eta < 0.0 || !eta.is_finite() {
        Err(Error::Config(format!("step size must be non-negative, got {eta}")))
    } else {
        Ok(())
    }
}

/// `w - eta X^T (X w - y)`.
pub fn gd_step(x: &[Vec<f64>], y: &[f64], w: &[f64], eta: f64) -> Vec<f64> {
    let g = xt_times(x, &residual(x, y, w), w.len());
    w.iter().zip(&g).map(|(wi, gi)| wi - eta * gi).collect()
}

/// `X^T (X X^T - diag(X X^T)) (X w - y)`: the leave-one-out correction.
pub fn loo_correction(x: &[Vec<f64>], y: &[f64], w: &[f64]) -> Vec<f64> {
    let r = residual(x, y, w);
    let n = x.len();
    let off: Vec<f64> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).map(|j| dot(&x[i], &x[j]) * r[j]).sum())
        .collect();
    xt_times(x, &off, w.len())
}

/// Plain gradient descent on `||X w - y||^2`; `steps + 1` iterates.
pub fn oracle_gd(x: &[Vec<f64>], y: &[f64], eta: f64, steps: usize, w0: &[f64]) -> Result<Vec<Vec<f64>>> {
    recurrence(x, y, eta, steps, w0, false)
}

/// Gradient descent plus the `eta^2` leave-one-out correction.
pub fn oracle_invicl_recurrence(
    x: &[Vec<f64>],
    y: &[f64],
    eta: f64,
    steps: usize,
    w0: &[f64],
) -> Result<Vec<Vec<f64>>> {
    recurrence(x, y, eta, steps, w0, true)
}

/// Shared iteration; `correction = false` is exactly [`oracle_gd`].
pub fn recurrence(
    x: &[Vec<f64>],
    y: &[f64],
    eta: f64,
    steps: usize,
    w0: &[f64],
    correction: bool,
) -> Result<Vec<Vec<f64>>> {
    check_step(eta)?;
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(w0.to_vec());
    for _ in 0..steps {
        let prev = traj.last().expect("non-empty");
        let mut next = gd_step(x, y, prev, eta);
        if correction {
            let delta = loo_correction(x, y, prev);
            for (w, dw) in next.iter_mut().zip(&delta) {
                *w += eta * eta * dw;
            }
        }
        traj.push(next);
    }
    Ok(traj)
}

/// Largest eigenvalue of `X^T X`.
pub fn gram_spectral_radius(x: &[Vec<f64>], d: usize) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let a = DMatrix::from_fn(x.len(), d, |i, j| x[i][j]);
    let gram = a.transpose() * &a;
    gram.symmetric_eigenvalues().max().max(0.0)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// ISTA on `0.5 ||X w - y||^2 + lambda ||w||_1` from `w = 0`.
pub fn lasso_ista_weights(x: &[Vec<f64>], y: &[f64], d: usize, lambda: f64, iters: usize) -> Result<Vec<f64>> {
    if lambda < 0.0 || iters == 0 {
        return Err(Error::Config(format!("ista needs lambda >= 0 and iters >= 1, got {lambda}, {iters}")));
    }
    let lmax = gram_spectral_radius(x, d);
    let mut w = vec![0.0; d];
    if lmax == 0.0 {
        return Ok(w);
    }
    let step = 1.0 / lmax;
    for _ in 0..iters {
        let g = xt_times(x, &residual(x, y, &w), d);
        for j in 0..d {
            w[j] = soft_threshold(w[j] - step * g[j], step * lambda);
        }
    }
    Ok(w)
}

pub fn oracle_lasso_ista(x: &[Vec<f64>], y: &[f64], lambda: f64, iters: usize, x_t: &[f64]) -> Result<f64> {
    Ok(dot(&lasso_ista_weights(x, y, x_t.len(), lambda, iters)?, x_t))
}

/// Picks the grid penalty (times `n`) with the lowest query error over
/// `tuning` held-out episodes.
pub fn select_lasso_lambda(tuning: &[TaskInstance], iters: usize) -> Result<f64> {
    let mut best = (f64::INFINITY, LASSO_LAMBDA_GRID[0]);
    for &scale in &LASSO_LAMBDA_GRID {
        let mut err = 0.0;
        for inst in tuning {
            let pred = oracle_lasso_ista(&inst.x, &inst.y, scale * inst.n() as f64, iters, &inst.x_t)?;
            err += (pred - inst.y_t).powi(2);
        }
        if err < best.0 {
            best = (err, scale);
        }
    }
    Ok(best.1)
}

/// One line of the episode dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub cfg: TaskConfig,
    pub episode: u64,
    #[serde(flatten)]
    pub instance: TaskInstance,
}

/// Writes `count` episodes as JSON lines.
pub fn dump_episodes(cfg: &TaskConfig, count: u64, out: &mut impl Write) -> Result<()> {
    for episode in 0..count {
        let record = EpisodeRecord {
            cfg: *cfg,
            episode,
            instance: sample_episode(cfg, episode)?,
        };
        serde_json::to_writer(&mut *out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_episodes(input: impl BufRead) -> Result<Vec<EpisodeRecord>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|line| Ok(serde_json::from_str(&line?)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let cfg = TaskConfig::linreg(5, 7, 42);
        let a = sample_task(&cfg).unwrap();
        let b = sample_task(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(bits(&a.y), bits(&b.y));
        assert_ne!(sample_episode(&cfg, 1).unwrap(), a);
    }

    #[test]
    fn linreg_labels_are_exact() {
        let t = sample_task(&TaskConfig::linreg(4, 6, 1)).unwrap();
        assert_eq!(t.b, 0.0);
        for (row, &yi) in t.x.iter().zip(&t.y) {
            assert_eq!(dot(&t.w, row), yi);
        }
        assert_eq!(dot(&t.w, &t.x_t), t.y_t);
    }

    #[test]
    fn sparse_weights_have_three_nonzeros() {
        let cfg = TaskConfig {
            kind: TaskKind::SparseLinReg,
            ..TaskConfig::linreg(20, 5, 3)
        };
        for e in 0..20 {
            let t = sample_episode(&cfg, e).unwrap();
            assert_eq!(t.w.iter().filter(|&&v| v != 0.0).count(), SPARSE_SUPPORT);
        }
        let bad = TaskConfig { d: 2, ..cfg };
        assert!(sample_task(&bad).is_err());
    }

    #[test]
    fn subspace_inputs_are_low_rank() {
        let cfg = TaskConfig {
            ood: OodShift::Subspace,
            ..TaskConfig::linreg(20, 15, 9)
        };
        let t = sample_task(&cfg).unwrap();
        assert!(t.design().rank(1e-9) <= 10);
    }

    #[test]
    fn scale_and_noise_shifts() {
        let base = TaskConfig::linreg(3, 2000, 5);
        let scaled = sample_task(&TaskConfig { ood: OodShift::Scale, ..base }).unwrap();
        let var = scaled.x.iter().flatten().map(|v| v * v).sum::<f64>() / (3.0 * 2000.0);
        assert!((var - 9.0).abs() < 0.8, "var = {var}");
        let noisy = sample_task(&TaskConfig { ood: OodShift::Noise, ..base }).unwrap();
        assert_ne!(noisy.b, 0.0);
        for (row, &yi) in noisy.x.iter().zip(&noisy.y) {
            assert_eq!(dot(&noisy.w, row) + noisy.b, yi);
        }
    }

    #[test]
    fn least_squares_identity_design() {
        let x = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((oracle_least_squares(&x, &[2.0, 3.0], &[1.0, 0.0]) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn least_squares_recovers_full_rank_task() {
        let t = sample_task(&TaskConfig::linreg(5, 12, 8)).unwrap();
        let pred = oracle_least_squares(&t.x, &t.y, &t.x_t);
        assert!((pred - t.y_t).abs() <= 1e-8);
    }

    #[test]
    fn underdetermined_least_squares_is_minimum_norm_interpolant() {
        let t = sample_task(&TaskConfig::linreg(6, 3, 11)).unwrap();
        let w = least_squares_weights(&t.x, &t.y, 6);
        // normal-equation oracle: w* = X^T (X X^T)^-1 y
        let a = t.design();
        let gram = &a * a.transpose();
        let alpha = gram.lu().solve(&DVector::from_column_slice(&t.y)).unwrap();
        let w_star = a.transpose() * alpha;
        for j in 0..6 {
            assert!((w[j] - w_star[j]).abs() < 1e-10);
        }
        for (row, yi) in t.x.iter().zip(&t.y) {
            assert!((dot(row, &w) - yi).abs() <= 1e-10);
        }
    }

    #[test]
    fn gd_trajectories() {
        let x = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let y = [0.5, -2.0];
        let constant = oracle_gd(&x, &y, 0.0, 3, &[0.1, 0.2]).unwrap();
        assert!(constant.iter().all(|w| w == &vec![0.1, 0.2]));
        let one = oracle_gd(&x, &y, 0.3, 1, &[0.0, 0.0]).unwrap();
        assert_eq!(one[1], vec![0.3 * 0.5, 0.3 * -2.0]);
        assert!(oracle_gd(&x, &y, -0.1, 1, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn gd_loss_non_increasing_below_stability_limit() {
        let t = sample_task(&TaskConfig::linreg(4, 10, 2)).unwrap();
        let eta = 0.9 / gram_spectral_radius(&t.x, 4);
        let traj = oracle_gd(&t.x, &t.y, eta, 50, &[0.0; 4]).unwrap();
        let loss = |w: &Vec<f64>| residual(&t.x, &t.y, w).iter().map(|r| r * r).sum::<f64>();
        for pair in traj.windows(2) {
            assert!(loss(&pair[1]) <= loss(&pair[0]) + 1e-12);
        }
    }

    #[test]
    fn invicl_recurrence_single_example_is_gd() {
        let t = sample_task(&TaskConfig::linreg(3, 1, 4)).unwrap();
        let a = oracle_gd(&t.x, &t.y, 0.05, 6, &[0.0; 3]).unwrap();
        let b = oracle_invicl_recurrence(&t.x, &t.y, 0.05, 6, &[0.0; 3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invicl_first_step_differs_by_correction() {
        let t = sample_task(&TaskConfig::linreg(4, 8, 6)).unwrap();
        let eta = 0.01;
        let w0 = [0.0; 4];
        let gd = oracle_gd(&t.x, &t.y, eta, 1, &w0).unwrap();
        let inv = oracle_invicl_recurrence(&t.x, &t.y, eta, 1, &w0).unwrap();
        let delta = loo_correction(&t.x, &t.y, &w0);
        let diff: f64 = inv[1].iter().zip(&gd[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let bound = eta * eta * delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((diff - bound).abs() <= 1e-12 * bound.max(1.0));
        let still = oracle_invicl_recurrence(&t.x, &t.y, 0.0, 4, &w0).unwrap();
        assert!(still.iter().all(|w| w == &w0.to_vec()));
    }

    #[test]
    fn ista_limits() {
        let t = sample_task(&TaskConfig::linreg(3, 10, 12)).unwrap();
        let ls = oracle_least_squares(&t.x, &t.y, &t.x_t);
        let lasso = oracle_lasso_ista(&t.x, &t.y, 0.0, 5000, &t.x_t).unwrap();
        assert!((ls - lasso).abs() <= 1e-4, "{ls} vs {lasso}");
        let shrunk = lasso_ista_weights(&t.x, &t.y, 3, 1e6, 10).unwrap();
        assert_eq!(shrunk, vec![0.0; 3]);
        assert!(lasso_ista_weights(&t.x, &t.y, 3, -1.0, 10).is_err());
    }

    #[test]
    fn least_squares_is_order_invariant() {
        let t = sample_task(&TaskConfig::linreg(4, 9, 21)).unwrap();
        let base = oracle_least_squares(&t.x, &t.y, &t.x_t);
        let order = [8, 3, 1, 0, 7, 2, 6, 5, 4];
        let r = t.reordered(&order);
        assert_eq!(oracle_least_squares(&r.x, &r.y, &r.x_t).to_bits(), base.to_bits());
    }

    #[test]
    fn dump_round_trip() {
        let cfg = TaskConfig::linreg(3, 4, 77);
        let mut buf = Vec::new();
        dump_episodes(&cfg, 3, &mut buf).unwrap();
        let records = read_episodes(buf.as_slice()).unwrap();
        assert_eq!(records.len(), 3);
        for r in &records {
            assert_eq!(r.instance, sample_episode(&cfg, r.episode).unwrap());
        }
    }
}
