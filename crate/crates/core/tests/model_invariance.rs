//! Query predictions under every reordering of the context, for random
//! weights and all four schemes.

use invicl_core::layout::PeScheme;
use invicl_core::masks::SchemeId;
use invicl_core::model::probes::{all_orders, invariance_deviation, leakage_effect};
use invicl_core::model::{ModelConfig, ModelState};
use invicl_core::tasks::{sample_episode, TaskConfig};

const INVARIANCE_TOL: f64 = 1e-9;
const ORDER_EFFECT_MIN: f64 = 1e-6;
const LEAK_TOL: f64 = 1e-12;
const SEEDS: u64 = 5;

fn config(scheme: SchemeId, pe: PeScheme) -> ModelConfig {
    ModelConfig {
        scheme,
        pe,
        d: 3,
        layers: 2,
        heads: 2,
        embed_dim: 8,
        max_examples: 5,
    }
}

#[test]
fn invariant_schemes_ignore_every_order() {
    for scheme in [SchemeId::InvIcl, SchemeId::Prefix, SchemeId::Boe] {
        for pe in [PeScheme::Symmetric, PeScheme::None] {
            for seed in 0..SEEDS {
                let state = ModelState::random(config(scheme, pe), seed).unwrap();
                for n in 1..=5 {
                    let inst = sample_episode(&TaskConfig::linreg(3, n, seed), n as u64).unwrap();
                    let dev = invariance_deviation(&state, &inst, &all_orders(n)).unwrap();
                    assert!(dev <= INVARIANCE_TOL, "{scheme} {pe} seed {seed} n {n}: {dev:e}");
                }
            }
        }
    }
}

#[test]
fn causal_scheme_depends_on_order() {
    for pe in [PeScheme::Absolute, PeScheme::Symmetric, PeScheme::None] {
        for seed in 0..SEEDS {
            let state = ModelState::random(config(SchemeId::Ar, pe), seed).unwrap();
            for n in 2..=5 {
                let inst = sample_episode(&TaskConfig::linreg(3, n, seed), n as u64).unwrap();
                let dev = invariance_deviation(&state, &inst, &all_orders(n)).unwrap();
                assert!(dev > ORDER_EFFECT_MIN, "{pe} seed {seed} n {n}: {dev:e}");
            }
        }
    }
}

#[test]
fn absolute_positions_break_invariance() {
    let state = ModelState::random(config(SchemeId::InvIcl, PeScheme::Absolute), 0).unwrap();
    let inst = sample_episode(&TaskConfig::linreg(3, 4, 0), 0).unwrap();
    assert!(invariance_deviation(&state, &inst, &all_orders(4)).unwrap() > ORDER_EFFECT_MIN);
}

#[test]
fn batched_queries_are_order_free() {
    let task = TaskConfig::linreg(3, 5, 9);
    let insts: Vec<_> = (0..16).map(|e| sample_episode(&task, e).unwrap()).collect();
    let shuffled: Vec<_> = insts.iter().map(|i| i.reordered(&[3, 0, 4, 1, 2])).collect();
    for scheme in [SchemeId::InvIcl, SchemeId::Prefix, SchemeId::Boe] {
        let state = ModelState::random(config(scheme, PeScheme::Symmetric), 1).unwrap();
        let a = state.predict_queries(&insts, 8).unwrap();
        let b = state.predict_queries(&shuffled, 8).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() <= INVARIANCE_TOL, "{scheme}: {p} vs {q}");
        }
    }
}

#[test]
fn label_leakage_by_scheme() {
    for seed in 0..SEEDS {
        let inst = sample_episode(&TaskConfig::linreg(3, 4, seed), 0).unwrap();
        for scheme in [SchemeId::Ar, SchemeId::InvIcl] {
            let pe = if scheme == SchemeId::Ar { PeScheme::Absolute } else { PeScheme::Symmetric };
            let state = ModelState::random(config(scheme, pe), seed).unwrap();
            let leak = leakage_effect(&state, &inst).unwrap();
            assert!(leak <= LEAK_TOL, "{scheme} seed {seed}: {leak:e}");
        }
        let state = ModelState::random(config(SchemeId::Prefix, PeScheme::Symmetric), seed).unwrap();
        assert!(leakage_effect(&state, &inst).unwrap() > ORDER_EFFECT_MIN);
    }
}
