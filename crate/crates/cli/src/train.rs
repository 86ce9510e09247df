use std::path::{Path, PathBuf};

use serde::Serialize;

use invicl_core::harness::csv::write_loss_trace;
use invicl_core::harness::{mse_curve, train_with, TrainConfig, DEFAULT_CLIP};
use invicl_core::layout::PeScheme;
use invicl_core::masks::SchemeId;
use invicl_core::model::ModelConfig;
use invicl_core::tasks::{OodShift, TaskConfig, TaskKind};

use crate::config::resolve;
use crate::output::{check_outputs, write_file, Manifest};
use crate::{CliError, CliResult, TrainArgs};

/// Seed for evaluation episodes unless one is given; distinct from the
/// small seeds used for training streams.
pub const DEFAULT_EVAL_SEED: u64 = 1_000_003;

pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Serialize)]
struct Resolved {
    train: TrainConfig,
    eval_episodes: usize,
    eval_seed: u64,
}

pub fn resolve_train(args: TrainArgs) -> CliResult<(TrainConfig, usize, PathBuf)> {
    let args = resolve(args.clone(), args.config.as_deref(), "train")?;
    let out = args.out.ok_or_else(|| CliError::Usage("train needs --out".into()))?;
    let scheme = args.scheme.unwrap_or(SchemeId::InvIcl);
    let pe = args.pe.unwrap_or(PeScheme::Symmetric);
    let d = args.d.unwrap_or(5);
    let n = args.n.unwrap_or(10);
    let model = ModelConfig {
        scheme,
        pe,
        d,
        layers: args.layers.unwrap_or(3),
        heads: args.heads.unwrap_or(4),
        embed_dim: args.embed.unwrap_or(64),
        max_examples: args.max_examples.unwrap_or(2 * n),
    };
    let task = TaskConfig {
        kind: args.task.unwrap_or(TaskKind::LinReg),
        d,
        n,
        ood: args.ood.unwrap_or(OodShift::None),
        seed: 0,
    };
    let seed = args.seed.unwrap_or(0);
    let cfg = TrainConfig {
        steps: args.steps.unwrap_or(2000),
        batch_size: args.batch.unwrap_or(64),
        lr: args.lr.unwrap_or(1e-4),
        clip: args.clip.unwrap_or(DEFAULT_CLIP),
        seed,
        eval_every: args.eval_every.unwrap_or(50),
        checkpoint_path: Some(out.clone()),
        query_only: args.query_only,
        ..TrainConfig::new(model, TaskConfig { seed, ..task })
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if pe == PeScheme::Absolute && scheme != SchemeId::Ar {
        eprintln!("warning: absolute positions break the permutation invariance of `{scheme}`");
    }
    Ok((cfg, args.eval_episodes.unwrap_or(1000), out))
}

pub fn run(args: TrainArgs) -> CliResult {
    let force = args.force;
    let (cfg, eval_episodes, out) = resolve_train(args)?;
    let loss_path = with_suffix(&out, ".loss.csv");
    let manifest_path = with_suffix(&out, ".manifest.json");
    check_outputs(&[&out, &loss_path, &manifest_path], force)?;
    let resolved = Resolved {
        train: cfg.clone(),
        eval_episodes,
        eval_seed: DEFAULT_EVAL_SEED,
    };
    let mut manifest = Manifest::new(
        "train",
        Some(cfg.seed),
        resolved,
        vec![out.clone(), loss_path.clone(), manifest_path.clone()],
    );
    manifest.write(&manifest_path)?;

    let started = std::time::Instant::now();
    let outcome = train_with(&cfg, |rec| {
        println!("step {:>6}  loss {:.6}", rec.step, rec.loss);
    })?;
    write_file(&loss_path, |w| write_loss_trace(&outcome.trace, w))?;
    let eval_task = TaskConfig {
        seed: DEFAULT_EVAL_SEED,
        ..cfg.task
    };
    let rec = &mse_curve(&outcome.state, &[cfg.task.n], &eval_task, eval_episodes)?[0];
    println!(
        "trained {} steps in {:.1}s; eval mse at n={} over {} episodes: {:.6} (zero predictor: {})",
        cfg.steps,
        started.elapsed().as_secs_f64(),
        cfg.task.n,
        eval_episodes,
        rec.mse,
        cfg.task.d
    );
    manifest.finish(&manifest_path)?;
    Ok(())
}
