use std::path::PathBuf;

use serde::Serialize;

use invicl_core::harness::csv::{write_extrapolation, write_mse_curve, write_probe, write_sensitivity};
use invicl_core::harness::eval::{DEFAULT_PROBE_LAMBDA, DEFAULT_TAU};
use invicl_core::harness::{
    length_extrapolation, linear_probe, mse_curve, reference_curve, sensitivity, Reference, TrainConfig,
};
use invicl_core::model::checkpoint::load_checkpoint;
use invicl_core::tasks::{OodShift, TaskConfig, TaskKind};

use crate::config::resolve;
use crate::output::{check_outputs, sibling, write_file, Manifest};
use crate::train::{with_suffix, DEFAULT_EVAL_SEED};
use crate::{CliError, CliResult, EvalArgs};

/// ISTA iterations for the lasso reference.
const LASSO_ITERS: usize = 500;
/// Penalty per context example for the lasso reference.
const LASSO_LAMBDA: f64 = 0.01;

/// `a..b` (inclusive), `a,b,c`, or a single number.
pub fn parse_lengths(spec: &str) -> CliResult<Vec<usize>> {
    let bad = || CliError::Usage(format!("bad length spec `{spec}`"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    if let Some((a, b)) = spec.split_once("..") {
        let (a, b) = (num(a)?, num(b)?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    spec.split(',').map(num).collect()
}

pub fn parse_references(spec: &str) -> CliResult<Vec<Reference>> {
    spec.split(',')
        .map(|s| match s.trim() {
            "least_squares" | "ls" => Ok(Reference::LeastSquares),
            "lasso" => Ok(Reference::Lasso {
                lambda_per_example: LASSO_LAMBDA,
                iters: LASSO_ITERS,
            }),
            "zero" => Ok(Reference::Zero),
            other => Err(CliError::Usage(format!("unknown reference `{other}`"))),
        })
        .collect()
}

#[derive(Serialize)]
struct Resolved {
    args: EvalArgs,
    task: TaskConfig,
    lengths: Vec<usize>,
    train_len: usize,
}

pub fn run(args: EvalArgs) -> CliResult {
    let force = args.force;
    let args = resolve(args.clone(), args.config.as_deref(), "eval")?;
    let ckpt_path = args.ckpt.clone().ok_or_else(|| CliError::Usage("eval needs --ckpt".into()))?;
    let csv = args.csv.clone().ok_or_else(|| CliError::Usage("eval needs --csv".into()))?;
    let ck = load_checkpoint(&ckpt_path)?;
    let state = &ck.state;
    let trained: Option<TrainConfig> = serde_json::from_value(ck.meta.clone()).ok();
    let base_task = trained.as_ref().map(|t| t.task).unwrap_or(TaskConfig {
        kind: TaskKind::LinReg,
        d: state.config.d,
        n: 10,
        ood: OodShift::None,
        seed: 0,
    });
    let train_len = base_task.n;
    let at_n = args.at_n.unwrap_or(train_len);
    let task = TaskConfig {
        ood: args.ood.unwrap_or(OodShift::None),
        seed: args.seed.unwrap_or(DEFAULT_EVAL_SEED),
        n: at_n,
        ..base_task
    };
    let lengths = parse_lengths(args.lengths.as_deref().unwrap_or(&format!("1..{}", 2 * train_len)))?;
    let episodes = args.episodes.unwrap_or(1000);
    if episodes == 0 {
        return Err(CliError::Usage("--episodes must be at least 1".into()));
    }
    let references = args.reference.as_deref().map(parse_references).transpose()?.unwrap_or_default();
    let probe_layers = args.probe.as_deref().map(parse_lengths).transpose()?;

    let sens_path = sibling(&csv, "sensitivity");
    let probe_path = sibling(&csv, "probe");
    let extra_path = sibling(&csv, "extrapolation");
    let manifest_path = with_suffix(&csv, ".manifest.json");
    let mut outputs: Vec<PathBuf> = vec![csv.clone(), manifest_path.clone()];
    if args.sensitivity.is_some() {
        outputs.push(sens_path.clone());
    }
    if probe_layers.is_some() {
        outputs.push(probe_path.clone());
    }
    if args.compare.is_some() {
        outputs.push(extra_path.clone());
    }
    check_outputs(&outputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(), force)?;
    let mut manifest = Manifest::new(
        "eval",
        Some(task.seed),
        Resolved {
            args: args.clone(),
            task,
            lengths: lengths.clone(),
            train_len,
        },
        outputs,
    );
    manifest.write(&manifest_path)?;

    let mut records = mse_curve(state, &lengths, &task, episodes)?;
    for r in &references {
        records.extend(reference_curve(*r, &lengths, &task, episodes)?);
    }
    write_file(&csv, |w| write_mse_curve(&records, true, w))?;
    for r in &records {
        println!("{:<14} n={:<4} mse {:.6}", r.scheme, r.length, r.mse);
    }

    if let Some(p) = args.sensitivity {
        let rep = sensitivity(state, &task, at_n, p, args.tau.unwrap_or(DEFAULT_TAU))?;
        println!(
            "sensitivity n={} permutations={} tau={:e}: change frequency {:.2}, std {:.3e}",
            rep.n, rep.permutations, rep.tau, rep.change_freq, rep.pred_std
        );
        write_file(&sens_path, |w| write_sensitivity(&[rep], true, w))?;
    }

    if let Some(layers) = probe_layers {
        let recs = linear_probe(
            state,
            &layers,
            &task,
            args.probe_train.unwrap_or(2000),
            args.probe_test.unwrap_or(1000),
            args.probe_lambda.unwrap_or(DEFAULT_PROBE_LAMBDA),
        )?;
        for r in &recs {
            println!("probe layer {:<3} mse {:.6}", r.layer, r.probe_mse);
        }
        write_file(&probe_path, |w| write_probe(&recs, true, w))?;
    }

    if let Some(other) = &args.compare {
        let other = load_checkpoint(other)?;
        let recs = length_extrapolation(
            &[state, &other.state],
            train_len,
            args.factor.unwrap_or(2),
            &task,
            episodes,
        )?;
        for r in &recs {
            println!(
                "extrapolation {:<8} mse@{} {:.6}  mse@{} {:.6}  ratio {:.4}",
                r.scheme, r.train_len, r.mse_train_len, r.eval_len, r.mse_eval_len, r.ratio
            );
        }
        write_file(&extra_path, |w| write_extrapolation(&recs, true, w))?;
    }
    manifest.finish(&manifest_path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_specs() {
        assert_eq!(parse_lengths("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_lengths("3,5").unwrap(), vec![3, 5]);
        assert_eq!(parse_lengths("7").unwrap(), vec![7]);
        assert!(parse_lengths("4..1").is_err());
        assert!(parse_lengths("x").is_err());
    }

    #[test]
    fn reference_specs() {
        assert_eq!(parse_references("least_squares,zero").unwrap().len(), 2);
        assert!(parse_references("ridge").is_err());
    }
}
