//! Linear self-attention construction under the leave-one-out mask, checked
//! against the gradient-descent-with-correction recurrence.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{dot, oracle_gd, oracle_invicl_recurrence, sample_task, TaskConfig, TaskInstance};

/// Tolerance for the one-layer match against the corrected recurrence.
pub const SINGLE_LAYER_TOL: f64 = 1e-8;
/// Tolerance for the single-example collapse onto plain gradient descent.
pub const COLLAPSE_TOL: f64 = 1e-10;

/// Which states the second copies and the query read within one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timing {
    /// Every update reads the states from before the layer.
    Stale,
    /// Second copies read pre-layer first copies; the query reads the
    /// second copies after their update in the same layer.
    Fresh,
}

impl Timing {
    pub const ALL: [Timing; 2] = [Timing::Stale, Timing::Fresh];

    pub fn as_str(self) -> &'static str {
        match self {
            Timing::Stale => "stale",
            Timing::Fresh => "fresh",
        }
    }
}

impl FromStr for Timing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stale" => Ok(Timing::Stale),
            "fresh" => Ok(Timing::Fresh),
            other => Err(Error::Config(format!("unknown timing `{other}`"))),
        }
    }
}

impl fmt::Display for Timing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOptions {
    pub timing: Timing,
    /// Adds the second copy's own term to its update, as its mask row
    /// allows. The verbatim rule sums over first copies `i != j` only.
    pub second_copy_self: bool,
}

impl LayerOptions {
    pub fn verbatim(timing: Timing) -> Self {
        Self {
            timing,
            second_copy_self: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearAttnParams {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub eta: f64,
    pub w0: Vec<f64>,
}

impl LinearAttnParams {
    /// `W_q = W_k = [[I, 0], [0, 0]]`, `W_v = [[0, 0], [w0^T, -1]]`, `P = eta I`.
    pub fn construction(w0: &[f64], eta: f64) -> Self {
        let d = w0.len();
        let mut w_q = DMatrix::zeros(d + 1, d + 1);
        for i in 0..d {
            w_q[(i, i)] = 1.0;
        }
        let mut w_v = DMatrix::zeros(d + 1, d + 1);
        for j in 0..d {
            w_v[(d, j)] = w0[j];
        }
        w_v[(d, d)] = -1.0;
        Self {
            w_k: w_q.clone(),
            w_q,
            w_v,
            eta,
            w0: w0.to_vec(),
        }
    }

    pub fn d(&self) -> usize {
        self.w0.len()
    }

    /// `P W_v src (src^T W_k^T W_q dst)`.
    fn message(&self, src: &DVector<f64>, dst: &DVector<f64>) -> DVector<f64> {
        let score = (&self.w_k * src).dot(&(&self.w_q * dst));
        (&self.w_v * src) * (self.eta * score)
    }
}

/// Columns `z_1..z_2n` (two copies of the context) and the query `z_{2n+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStateZ {
    pub n: usize,
    pub cols: Vec<DVector<f64>>,
}

impl TokenStateZ {
    pub fn from_instance(inst: &TaskInstance) -> Self {
        let d = inst.d();
        let pair = |x: &[f64], y: f64| {
            let mut z = DVector::zeros(d + 1);
            z.rows_mut(0, d).copy_from_slice(x);
            z[d] = y;
            z
        };
        let first: Vec<_> = inst.x.iter().zip(&inst.y).map(|(x, &y)| pair(x, y)).collect();
        let mut cols = first.clone();
        cols.extend(first);
        cols.push(pair(&inst.x_t, 0.0));
        Self { n: inst.n(), cols }
    }

    pub fn query(&self) -> &DVector<f64> {
        &self.cols[2 * self.n]
    }
}

/// One layer of the leave-one-out linear attention update.
pub fn loo_linear_layer(params: &LinearAttnParams, z: &TokenStateZ, opts: LayerOptions) -> TokenStateZ {
    let n = z.n;
    let mut next = z.clone();
    for j in 0..n {
        next.cols[j] += params.message(&z.cols[j], &z.cols[j]);
    }
    for j in 0..n {
        let dst = &z.cols[n + j];
        let mut acc = DVector::zeros(dst.len());
        for i in (0..n).filter(|&i| i != j) {
            acc += params.message(&z.cols[i], dst);
        }
        if opts.second_copy_self {
            acc += params.message(dst, dst);
        }
        next.cols[n + j] += acc;
    }
    let second = match opts.timing {
        Timing::Stale => &z.cols[n..2 * n],
        Timing::Fresh => &next.cols[n..2 * n],
    };
    let q = z.query();
    let mut acc = DVector::zeros(q.len());
    for src in second {
        acc += params.message(src, q);
    }
    next.cols[2 * n] += acc;
    next
}

/// `x_t^T w0 - y-coordinate of the query`.
pub fn readout(z_query: &DVector<f64>, w0: &[f64]) -> f64 {
    let d = w0.len();
    let x_t: Vec<f64> = z_query.rows(0, d).iter().copied().collect();
    dot(&x_t, w0) - z_query[d]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub options: LayerOptions,
    pub readouts: Vec<f64>,
    /// `|readout - x_t^T w_l|` against the corrected recurrence, per layer.
    pub deviations: Vec<f64>,
    /// The same against plain gradient descent.
    pub gd_deviations: Vec<f64>,
    pub max_abs_dev: f64,
}

impl EquivalenceReport {
    pub fn max_gd_dev(&self) -> f64 {
        self.gd_deviations.iter().copied().fold(0.0, f64::max)
    }
}

/// Runs `layers` layers from `w0 = 0`.
pub fn verify_equivalence(inst: &TaskInstance, eta: f64, layers: usize, opts: LayerOptions) -> Result<EquivalenceReport> {
    verify_equivalence_from(inst, &vec![0.0; inst.d()], eta, layers, opts)
}

pub fn verify_equivalence_from(
    inst: &TaskInstance,
    w0: &[f64],
    eta: f64,
    layers: usize,
    opts: LayerOptions,
) -> Result<EquivalenceReport> {
    if layers == 0 {
        return Err(Error::Config("equivalence check needs at least one layer".into()));
    }
    if w0.len() != inst.d() {
        return Err(Error::Shape(format!("w0 has {} entries, task has d = {}", w0.len(), inst.d())));
    }
    let params = LinearAttnParams::construction(w0, eta);
    let corrected = oracle_invicl_recurrence(&inst.x, &inst.y, eta, layers, w0)?;
    let plain = oracle_gd(&inst.x, &inst.y, eta, layers, w0)?;
    let mut z = TokenStateZ::from_instance(inst);
    let mut readouts = Vec::with_capacity(layers);
    let mut deviations = Vec::with_capacity(layers);
    let mut gd_deviations = Vec::with_capacity(layers);
    for l in 1..=layers {
        z = loo_linear_layer(&params, &z, opts);
        let r = readout(z.query(), w0);
        readouts.push(r);
        deviations.push((r - dot(&inst.x_t, &corrected[l])).abs());
        gd_deviations.push((r - dot(&inst.x_t, &plain[l])).abs());
    }
    let max_abs_dev = deviations.iter().copied().fold(0.0, f64::max);
    Ok(EquivalenceReport {
        options: opts,
        readouts,
        deviations,
        gd_deviations,
        max_abs_dev,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub n: usize,
    pub d: usize,
    pub eta: f64,
    pub layers: usize,
    pub seeds: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n: 8,
            d: 4,
            eta: 0.01,
            layers: 5,
            seeds: 100,
        }
    }
}

/// One report per seed; seed `s` samples the task with `TaskConfig::linreg(d, n, s)`.
pub fn sweep(cfg: &SweepConfig, opts: LayerOptions) -> Result<Vec<(u64, EquivalenceReport)>> {
    (0..cfg.seeds)
        .map(|seed| {
            let inst = sample_task(&TaskConfig::linreg(cfg.d, cfg.n, seed))?;
            Ok((seed, verify_equivalence(&inst, cfg.eta, cfg.layers, opts)?))
        })
        .collect()
}

/// Largest deviation at each layer across all seeds.
pub fn per_layer_max(reports: &[(u64, EquivalenceReport)], plain_gd: bool) -> Vec<f64> {
    let layers = reports.first().map_or(0, |(_, r)| r.deviations.len());
    (0..layers)
        .map(|l| {
            reports
                .iter()
                .map(|(_, r)| if plain_gd { r.gd_deviations[l] } else { r.deviations[l] })
                .fold(0.0, f64::max)
        })
        .collect()
}

/// `timing,seed,layer,deviation,gd_deviation` rows.
pub fn write_report_csv(reports: &[(u64, EquivalenceReport)], out: &mut impl Write) -> Result<()> {
    writeln!(out, "timing,seed,layer,deviation,gd_deviation")?;
    for (seed, r) in reports {
        for (l, (dev, gd)) in r.deviations.iter().zip(&r.gd_deviations).enumerate() {
            writeln!(out, "{},{},{},{:.8e},{:.8e}", r.options.timing, seed, l + 1, dev, gd)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(n: usize, seed: u64) -> TaskInstance {
        sample_task(&TaskConfig::linreg(4, n, seed)).unwrap()
    }

    #[test]
    fn construction_blocks() {
        let p = LinearAttnParams::construction(&[0.5, -1.0], 0.1);
        assert_eq!(p.w_q, DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]));
        assert_eq!(p.w_k, p.w_q);
        assert_eq!(p.w_v, DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, -1.0, -1.0]));
    }

    #[test]
    fn zero_step_leaves_state() {
        let inst = task(5, 1);
        let z = TokenStateZ::from_instance(&inst);
        let p = LinearAttnParams::construction(&[0.3; 4], 0.0);
        for t in Timing::ALL {
            assert_eq!(loo_linear_layer(&p, &z, LayerOptions::verbatim(t)), z);
        }
        assert_eq!(readout(z.query(), &[0.0; 4]), 0.0);
    }

    #[test]
    fn copies_start_identical() {
        let z = TokenStateZ::from_instance(&task(3, 2));
        for j in 0..3 {
            assert_eq!(z.cols[j], z.cols[3 + j]);
        }
        assert_eq!(z.query()[4], 0.0);
    }

    #[test]
    fn single_example_second_copy_never_moves() {
        let inst = task(1, 3);
        let p = LinearAttnParams::construction(&[0.0; 4], 0.05);
        let z0 = TokenStateZ::from_instance(&inst);
        let z1 = loo_linear_layer(&p, &z0, LayerOptions::verbatim(Timing::Stale));
        assert_eq!(z1.cols[1], z0.cols[1]);
        assert_ne!(z1.cols[0], z0.cols[0]);
    }

    #[test]
    fn first_layer_query_update_matches_hand_expansion() {
        // stale reads give one plain GD step: dy = eta sum_i (w0.x_i - y_i)(x_i.x_t)
        let inst = task(6, 4);
        let w0 = [0.2, -0.1, 0.4, 0.0];
        let eta = 0.03;
        let p = LinearAttnParams::construction(&w0, eta);
        let z1 = loo_linear_layer(&p, &TokenStateZ::from_instance(&inst), LayerOptions::verbatim(Timing::Stale));
        let expect: f64 = inst
            .x
            .iter()
            .zip(&inst.y)
            .map(|(x, y)| eta * (dot(&w0, x) - y) * dot(x, &inst.x_t))
            .sum();
        assert!((z1.query()[4] - expect).abs() < 1e-14);
        let w1 = &oracle_gd(&inst.x, &inst.y, eta, 1, &w0).unwrap()[1];
        assert!((readout(z1.query(), &w0) - dot(&inst.x_t, w1)).abs() < 1e-14);
    }

    #[test]
    fn fresh_single_layer_matches_corrected_recurrence() {
        for seed in 0..20 {
            let r = verify_equivalence(&task(8, seed), 0.01, 1, LayerOptions::verbatim(Timing::Fresh)).unwrap();
            assert!(r.max_abs_dev <= SINGLE_LAYER_TOL, "seed {seed}: {}", r.max_abs_dev);
        }
    }

    #[test]
    fn stale_single_layer_is_plain_gd() {
        let r = verify_equivalence(&task(8, 0), 0.01, 1, LayerOptions::verbatim(Timing::Stale)).unwrap();
        assert!(r.gd_deviations[0] < 1e-12);
        assert!(r.deviations[0] > 1e-6);
    }

    #[test]
    fn zero_step_has_zero_deviation() {
        for t in Timing::ALL {
            let r = verify_equivalence(&task(8, 5), 0.0, 4, LayerOptions::verbatim(t)).unwrap();
            assert!(r.deviations.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn self_term_collapses_single_example_to_gd() {
        let opts = LayerOptions {
            timing: Timing::Stale,
            second_copy_self: true,
        };
        let r = verify_equivalence(&task(1, 6), 0.01, 10, opts).unwrap();
        assert!(r.max_gd_dev() <= COLLAPSE_TOL, "{:?}", r.gd_deviations);
    }

    #[test]
    fn report_is_permutation_invariant() {
        let inst = task(5, 7);
        let perm = inst.reordered(&[3, 0, 4, 1, 2]);
        for t in Timing::ALL {
            let a = verify_equivalence(&inst, 0.02, 3, LayerOptions::verbatim(t)).unwrap();
            let b = verify_equivalence(&perm, 0.02, 3, LayerOptions::verbatim(t)).unwrap();
            for (x, y) in a.readouts.iter().zip(&b.readouts) {
                assert!((x - y).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn rejects_zero_layers() {
        assert!(verify_equivalence(&task(2, 0), 0.01, 0, LayerOptions::verbatim(Timing::Stale)).is_err());
    }

    #[test]
    fn csv_rows() {
        let cfg = SweepConfig {
            seeds: 2,
            layers: 2,
            ..SweepConfig::default()
        };
        let reports = sweep(&cfg, LayerOptions::verbatim(Timing::Fresh)).unwrap();
        let mut buf = Vec::new();
        write_report_csv(&reports, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 4);
        assert!(text.starts_with("timing,seed,layer,deviation,gd_deviation\n"));
        assert_eq!(per_layer_max(&reports, false).len(), 2);
    }
}
