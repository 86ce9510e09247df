//! Training loop and evaluation runs over synthetic regression episodes.

pub mod csv;
pub mod defcheck;
pub mod eval;

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::{save_checkpoint, Checkpoint, RngState};
use crate::model::{ModelConfig, ModelState};
use crate::numerics::{adam_step, AdamHyper, Moments};
use crate::tasks::{sample_episode, TaskConfig, TaskInstance};

pub use defcheck::{definition_checks, definition_sweep, expected_pattern, DefinitionVerdict, Interdependence};
pub use eval::{
    length_extrapolation, linear_probe, mse_curve, reference_curve, sensitivity, EvalRecord, ExtrapolationRecord,
    ProbeRecord, Reference, SensitivityReport,
};

/// Episodes per gradient shard; shards are reduced in a fixed order so the
/// result does not depend on the thread count.
pub const TRAIN_SHARD: usize = 16;
pub const DEFAULT_CLIP: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// `task.n` is the training context length; `task.seed` is ignored in
    /// favour of `seed`.
    pub task: TaskConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub clip: f64,
    /// Train on the query position only.
    pub query_only: bool,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, task: TaskConfig) -> Self {
        Self {
            model,
            task,
            steps: 2000,
            batch_size: 64,
            lr: 1e-4,
            seed: 0,
            eval_every: 50,
            checkpoint_path: None,
            clip: DEFAULT_CLIP,
            query_only: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("steps, batch_size and eval_every must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.clip > 0.0) {
            return Err(Error::Config(format!("bad lr {} or clip {}", self.lr, self.clip)));
        }
        if self.task.d != self.model.d {
            return Err(Error::Config(format!(
                "task d = {} but model d = {}",
                self.task.d, self.model.d
            )));
        }
        if self.task.n == 0 {
            return Err(Error::EmptyContext);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    /// Mean training loss over the steps since the previous record.
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub trace: Vec<LossRecord>,
    pub rng: RngState,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Result<Checkpoint> {
        Ok(Checkpoint {
            state: self.state.clone(),
            rng: self.rng,
            step: cfg.steps as u64,
            meta: serde_json::to_value(cfg)?,
        })
    }
}

fn training_task(cfg: &TrainConfig) -> TaskConfig {
    TaskConfig {
        seed: cfg.seed,
        ..cfg.task
    }
}

/// Loss and gradient of one batch, sharded over threads.
pub fn batch_gradient(state: &ModelState, batch: &[TaskInstance], query_only: bool) -> Result<(f64, Vec<Vec<f64>>)> {
    let prep = state.prepare(batch[0].n())?;
    let shards: Vec<(usize, f64, Vec<Vec<f64>>)> = batch
        .par_chunks(TRAIN_SHARD)
        .map(|chunk| {
            let (loss, grads) = state.loss_and_grads(chunk, &prep, query_only, true)?;
            Ok((chunk.len(), loss, grads))
        })
        .collect::<Result<_>>()?;
    let total = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = state.params().iter().map(|p| vec![0.0; p.numel()]).collect();
    for (count, l, g) in shards {
        let w = count as f64 / total;
        loss += w * l;
        for (acc, part) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(part).for_each(|(a, p)| *a += w * p);
        }
    }
    Ok((loss, grads))
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Adam on the mean squared error at the scheme's prediction positions.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(cfg, |_| {})
}

/// [`train`] with a callback after every recorded trace point.
pub fn train_with(cfg: &TrainConfig, mut on_record: impl FnMut(&LossRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut state = ModelState::init(cfg.model, cfg.seed)?;
    state.prepare(cfg.task.n)?;
    let task = training_task(cfg);
    let hyper = AdamHyper {
        lr: cfg.lr,
        ..AdamHyper::default()
    };
    let mut moments: Vec<Moments> = state.params().iter().map(|p| Moments::zeros(p.numel())).collect();
    let mut next_episode = 0u64;
    let mut trace = Vec::new();
    let (mut window, mut window_len) = (0.0, 0usize);
    for step in 1..=cfg.steps {
        let batch: Vec<TaskInstance> = (0..cfg.batch_size as u64)
            .map(|b| sample_episode(&task, next_episode + b))
            .collect::<Result<_>>()?;
        next_episode += cfg.batch_size as u64;
        // masks are validated up front, so an empty softmax row here means
        // the scores went non-finite
        let (loss, mut grads) = match batch_gradient(&state, &batch, cfg.query_only) {
            Err(Error::DegenerateRow(_)) => return Err(Error::Divergence { step, loss: f64::NAN }),
            other => other?,
        };
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }
        clip_global_norm(&mut grads, cfg.clip);
        for ((p, g), m) in state.params_mut().iter_mut().zip(&grads).zip(moments.iter_mut()) {
            adam_step(p.data_mut(), g, m, &hyper, step as u64)?;
        }
        window += loss;
        window_len += 1;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let rec = LossRecord {
                step,
                loss: window / window_len as f64,
            };
            on_record(&rec);
            trace.push(rec);
            window = 0.0;
            window_len = 0;
        }
    }
    let outcome = TrainOutcome {
        state,
        trace,
        rng: RngState {
            seed: cfg.seed,
            next_episode,
        },
    };
    if let Some(path) = &cfg.checkpoint_path {
        save_checkpoint(path, &outcome.checkpoint(cfg)?)?;
    }
    Ok(outcome)
}

/// Trailing moving average of the trace losses over `window` records.
pub fn smoothed(trace: &[LossRecord], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..trace.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            trace[lo..=i].iter().map(|r| r.loss).sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::PeScheme;
    use crate::masks::SchemeId;

    fn small(steps: usize, lr: f64) -> TrainConfig {
        let model = ModelConfig {
            scheme: SchemeId::InvIcl,
            pe: PeScheme::Symmetric,
            d: 2,
            layers: 1,
            heads: 2,
            embed_dim: 8,
            max_examples: 3,
        };
        TrainConfig {
            steps,
            batch_size: 4,
            lr,
            eval_every: 1,
            ..TrainConfig::new(model, TaskConfig::linreg(2, 3, 0))
        }
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let cfg = small(1, 0.0);
        let out = train(&cfg).unwrap();
        assert_eq!(out.state, ModelState::init(cfg.model, cfg.seed).unwrap());
        assert_eq!(out.rng.next_episode, 4);
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let a = train(&small(5, 1e-2)).unwrap();
        let b = train(&small(5, 1e-2)).unwrap();
        let bits = |t: &[LossRecord]| t.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.trace), bits(&b.trace));
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn sharded_gradient_matches_whole_batch() {
        let cfg = small(1, 0.0);
        let state = ModelState::random(cfg.model, 2).unwrap();
        let batch: Vec<_> = (0..40).map(|e| sample_episode(&cfg.task, e).unwrap()).collect();
        let (l1, g1) = batch_gradient(&state, &batch, false).unwrap();
        let prep = state.prepare(3).unwrap();
        let (l2, g2) = state.loss_and_grads(&batch, &prep, false, true).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().flatten().zip(g2.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small(0, 1e-3);
        assert!(train(&cfg).is_err());
        cfg.steps = 1;
        cfg.batch_size = 0;
        assert!(train(&cfg).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = small(3, 1e-3);
        cfg.task.ood = crate::tasks::OodShift::Scale;
        cfg.lr = f64::MAX;
        cfg.clip = f64::MAX;
        assert!(matches!(train(&cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn smoothing() {
        let trace: Vec<_> = [4.0, 2.0, 3.0].iter().enumerate().map(|(i, &l)| LossRecord { step: i, loss: l }).collect();
        assert_eq!(smoothed(&trace, 2), vec![4.0, 3.0, 2.5]);
    }
}
