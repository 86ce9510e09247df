//! Verdicts for the invariance / non-leakage / interdependence triple.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::probes::{all_orders, dependence_matrix, invariance_deviation, leakage_effect};
use crate::model::{ModelConfig, ModelState};
use crate::masks::SchemeId;
use crate::tasks::{sample_task, TaskConfig, TaskInstance};

/// At or below: the query prediction is unchanged by reordering.
pub const INVARIANCE_TOL: f64 = 1e-9;
/// At or below: a quantity is treated as exactly unaffected.
pub const EXACT_TOL: f64 = 1e-12;
/// Above: reordering or a label demonstrably moves a prediction.
pub const EFFECT_MIN: f64 = 1e-6;
/// Above: one example's encoding depends on another.
pub const DEPENDENCE_MIN: f64 = 1e-8;
/// Fraction of seeds that must agree on a verdict.
pub const AGREEMENT: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interdependence {
    /// No example's encoding depends on another.
    None,
    /// Each example depends on exactly the earlier ones.
    Partial,
    /// Every example depends on every other.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefinitionMeasures {
    pub invariance_dev: f64,
    pub leakage: f64,
    pub dependence: Vec<Vec<f64>>,
}

/// `None` in a field means the measurement fell between the thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefinitionVerdict {
    pub invariance: Option<bool>,
    pub non_leakage: Option<bool>,
    pub interdependence: Option<Interdependence>,
}

impl DefinitionVerdict {
    pub fn matches(&self, expected: &DefinitionVerdict) -> bool {
        self == expected
    }
}

fn mark(v: Option<bool>) -> &'static str {
    match v {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "UNCLEAR",
    }
}

impl fmt::Display for DefinitionVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inter = match self.interdependence {
            Some(Interdependence::Full) => "PASS",
            Some(Interdependence::Partial) => "PARTIAL",
            Some(Interdependence::None) => "FAIL",
            None => "UNCLEAR",
        };
        write!(
            f,
            "invariance={} nonleak={} interdep={}",
            mark(self.invariance),
            mark(self.non_leakage),
            inter
        )
    }
}

/// The pattern each scheme is designed to show.
pub fn expected_pattern(scheme: SchemeId) -> DefinitionVerdict {
    let (inv, leak, inter) = match scheme {
        SchemeId::Ar => (false, true, Interdependence::Partial),
        SchemeId::Prefix => (true, false, Interdependence::Full),
        SchemeId::Boe => (true, true, Interdependence::None),
        SchemeId::InvIcl => (true, true, Interdependence::Full),
    };
    DefinitionVerdict {
        invariance: Some(inv),
        non_leakage: Some(leak),
        interdependence: Some(inter),
    }
}

pub fn measure(state: &ModelState, inst: &TaskInstance) -> Result<DefinitionMeasures> {
    Ok(DefinitionMeasures {
        invariance_dev: invariance_deviation(state, inst, &all_orders(inst.n()))?,
        leakage: leakage_effect(state, inst)?,
        dependence: dependence_matrix(state, inst)?,
    })
}

fn classify_dependence(dep: &[Vec<f64>]) -> Option<Interdependence> {
    let n = dep.len();
    let pairs = || (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)));
    let on = |i: usize, j: usize| dep[i][j] > DEPENDENCE_MIN;
    let off = |i: usize, j: usize| dep[i][j] <= EXACT_TOL;
    if pairs().all(|(i, j)| on(i, j)) {
        Some(Interdependence::Full)
    } else if pairs().all(|(i, j)| off(i, j)) {
        Some(Interdependence::None)
    } else if pairs().all(|(i, j)| if j < i { on(i, j) } else { off(i, j) }) {
        Some(Interdependence::Partial)
    } else {
        None
    }
}

pub fn verdict(m: &DefinitionMeasures) -> DefinitionVerdict {
    let band = |v: f64, exact: f64| {
        if v <= exact {
            Some(true)
        } else if v > EFFECT_MIN {
            Some(false)
        } else {
            None
        }
    };
    DefinitionVerdict {
        invariance: band(m.invariance_dev, INVARIANCE_TOL),
        non_leakage: band(m.leakage, EXACT_TOL),
        interdependence: classify_dependence(&m.dependence),
    }
}

/// Measures and classifies one state on one instance (`n <= 6`).
pub fn definition_checks(state: &ModelState, inst: &TaskInstance) -> Result<DefinitionVerdict> {
    Ok(verdict(&measure(state, inst)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub scheme: SchemeId,
    pub n: usize,
    pub per_seed: Vec<DefinitionMeasures>,
    /// Per field, the verdict shared by at least [`AGREEMENT`] of the seeds.
    pub verdict: DefinitionVerdict,
}

impl SweepReport {
    pub fn matches_expectation(&self) -> bool {
        self.verdict.matches(&expected_pattern(self.scheme))
    }

    pub fn max_invariance_dev(&self) -> f64 {
        self.per_seed.iter().map(|m| m.invariance_dev).fold(0.0, f64::max)
    }

    pub fn max_leakage(&self) -> f64 {
        self.per_seed.iter().map(|m| m.leakage).fold(0.0, f64::max)
    }

    /// Fraction of seeds where `pred` holds.
    pub fn fraction(&self, pred: impl Fn(&DefinitionMeasures) -> bool) -> f64 {
        self.per_seed.iter().filter(|m| pred(m)).count() as f64 / self.per_seed.len() as f64
    }
}

fn consensus<T: Copy + PartialEq>(values: &[Option<T>]) -> Option<T> {
    let need = (AGREEMENT * values.len() as f64).ceil() as usize;
    values
        .iter()
        .flatten()
        .find(|v| values.iter().filter(|w| **w == Some(**v)).count() >= need)
        .copied()
}

/// Random-weight model and fresh episode per seed.
pub fn definition_sweep(model: &ModelConfig, n: usize, seeds: u64) -> Result<SweepReport> {
    let mut per_seed = Vec::with_capacity(seeds as usize);
    for seed in 0..seeds {
        let state = ModelState::random(*model, seed)?;
        let inst = sample_task(&TaskConfig::linreg(model.d, n, 1000 + seed))?;
        per_seed.push(measure(&state, &inst)?);
    }
    let verdicts: Vec<DefinitionVerdict> = per_seed.iter().map(verdict).collect();
    let verdict = DefinitionVerdict {
        invariance: consensus(&verdicts.iter().map(|v| v.invariance).collect::<Vec<_>>()),
        non_leakage: consensus(&verdicts.iter().map(|v| v.non_leakage).collect::<Vec<_>>()),
        interdependence: consensus(&verdicts.iter().map(|v| v.interdependence).collect::<Vec<_>>()),
    };
    Ok(SweepReport {
        scheme: model.scheme,
        n,
        per_seed,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::PeScheme;

    fn cfg(scheme: SchemeId) -> ModelConfig {
        let pe = if scheme == SchemeId::Ar { PeScheme::Absolute } else { PeScheme::Symmetric };
        ModelConfig {
            scheme,
            pe,
            d: 3,
            layers: 2,
            heads: 2,
            embed_dim: 8,
            max_examples: 4,
        }
    }

    #[test]
    fn each_scheme_shows_its_pattern() {
        for scheme in SchemeId::ALL {
            let report = definition_sweep(&cfg(scheme), 4, 4).unwrap();
            assert!(report.matches_expectation(), "{scheme}: {}", report.verdict);
        }
    }

    #[test]
    fn display() {
        assert_eq!(
            expected_pattern(SchemeId::InvIcl).to_string(),
            "invariance=PASS nonleak=PASS interdep=PASS"
        );
        assert_eq!(
            expected_pattern(SchemeId::Prefix).to_string(),
            "invariance=PASS nonleak=FAIL interdep=PASS"
        );
    }

    #[test]
    fn consensus_threshold() {
        let mut v = vec![Some(true); 19];
        v.push(None);
        assert_eq!(consensus(&v), Some(true));
        v[0] = Some(false);
        assert_eq!(consensus(&v), None);
    }
}
