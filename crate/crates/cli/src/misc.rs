use invicl_core::harness::defcheck::{definition_sweep, expected_pattern, DEPENDENCE_MIN, EFFECT_MIN};
use invicl_core::layout::PeScheme;
use invicl_core::masks::SchemeId;
use invicl_core::model::ModelConfig;
use invicl_core::tasks::{dump_episodes, TaskConfig};

use crate::output::{check_outputs, write_file};
use crate::{CliError, CliResult, DefcheckArgs, DumpArgs};

/// Smallest effect of one example on another's encoding.
fn min_cross_dependence(dep: &[Vec<f64>]) -> f64 {
    let n = dep.len();
    (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| dep[i][j]))
        .fold(f64::INFINITY, f64::min)
}

pub fn defcheck(args: DefcheckArgs) -> CliResult {
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let pe = args.pe.unwrap_or(if args.scheme == SchemeId::Ar {
        PeScheme::Absolute
    } else {
        PeScheme::Symmetric
    });
    let model = ModelConfig {
        scheme: args.scheme,
        pe,
        d: args.d,
        layers: args.layers,
        heads: args.heads,
        embed_dim: args.embed,
        max_examples: args.n,
    };
    model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let report = definition_sweep(&model, args.n, args.seeds)?;
    println!("{}", report.verdict);
    println!(
        "max invariance deviation {:.3e}; max leakage {:.3e}; label effect > {EFFECT_MIN:e} in {:.0}%; \
         cross-example dependence > {DEPENDENCE_MIN:e} in {:.0}%",
        report.max_invariance_dev(),
        report.max_leakage(),
        100.0 * report.fraction(|m| m.leakage > EFFECT_MIN),
        100.0 * report.fraction(|m| min_cross_dependence(&m.dependence) > DEPENDENCE_MIN),
    );
    let expected = expected_pattern(args.scheme);
    if report.matches_expectation() {
        println!("matches expected pattern for {}", args.scheme);
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "{} shows `{}`, expected `{expected}`",
            args.scheme, report.verdict
        )))
    }
}

pub fn dump(args: DumpArgs) -> CliResult {
    check_outputs(&[&args.out], args.force)?;
    let cfg = TaskConfig {
        kind: args.task,
        d: args.d,
        n: args.n,
        ood: args.ood,
        seed: args.seed,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(&args.out, |w| dump_episodes(&cfg, args.episodes, w))
}
