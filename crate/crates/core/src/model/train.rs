use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::Batcher;
use super::{evaluate_loss, Example, Seq2Seq};
use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamConfig, Graph, LrSchedule, ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub adam: AdamConfig,
    pub schedule: LrSchedule,
    pub token_budget: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            schedule: LrSchedule::InverseSqrt { warmup: 4000 },
            token_budget: 4096,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    /// Short runs on small corpora: higher rate, short warmup, small batches.
    pub fn desk() -> Self {
        Self {
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            schedule: LrSchedule::InverseSqrt { warmup: 100 },
            token_budget: 512,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub loss: f64,
    pub lr: f64,
    pub skipped: bool,
    pub tokens: usize,
}

/// Optimiser state plus the two random streams (dropout, batch order).
pub struct Trainer<T> {
    pub config: TrainerConfig,
    adam: Adam<T>,
    /// Multiplier on the scheduled rate; halved on every non-finite loss.
    pub lr_scale: f64,
    pub step: u64,
    pub nan_events: usize,
    dropout_rng: ChaCha8Rng,
    batch_rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainerConfig, store: &ParamStore<T>) -> Self {
        Self {
            config,
            adam: Adam::new(config.adam, store),
            lr_scale: 1.0,
            step: 0,
            nan_events: 0,
            dropout_rng: ChaCha8Rng::seed_from_u64(config.seed),
            batch_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c),
        }
    }

    /// Rate for the next update.
    pub fn current_lr(&self) -> f64 {
        self.config.adam.lr * self.config.schedule.factor(self.step + 1) * self.lr_scale
    }

    /// One teacher-forced update. A non-finite loss skips the update and
    /// halves the learning rate.
    pub fn step<M: Seq2Seq<T>>(&mut self, model: &mut M, batch: &[&Example]) -> Result<StepOutcome> {
        let tokens = batch.iter().map(|e| e.target.len() + 1).sum();
        let mut g = Graph::new().with_mode(model.exec_mode());
        let loss = model.loss(&mut g, batch, model.label_smoothing(), Some(&mut self.dropout_rng))?;
        let value = g.value(loss).item().as_f64();
        let lr = self.current_lr();
        if !value.is_finite() {
            self.nan_events += 1;
            self.lr_scale *= 0.5;
            log::warn!(
                "non-finite loss at step {}; update skipped, lr scale now {}",
                self.step,
                self.lr_scale
            );
            return Ok(StepOutcome {
                loss: value,
                lr,
                skipped: true,
                tokens,
            });
        }
        g.backward(loss, model.store_mut())?;
        self.adam.step(model.store_mut(), lr);
        self.step += 1;
        Ok(StepOutcome {
            loss: value,
            lr,
            skipped: false,
            tokens,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_steps: u64,
    /// Updates between validations.
    pub validation_interval: u64,
    /// Stop after this many validations without improvement.
    pub patience: Option<usize>,
    /// Abort once validation loss exceeds `factor × initial` this many times in a row.
    pub divergence_factor: f64,
    pub divergence_validations: usize,
    pub log_interval: u64,
    /// Updates between `on_checkpoint` calls (0: never).
    #[serde(default)]
    pub checkpoint_every: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_steps: 2000,
            validation_interval: 200,
            patience: None,
            divergence_factor: 2.0,
            divergence_validations: 3,
            log_interval: 50,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    Patience,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tokens_per_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub steps: u64,
    pub stop: StopReason,
    pub initial_val_loss: Option<f64>,
    pub validations: Vec<(u64, f64)>,
    pub best_step: Option<u64>,
    pub best_val_loss: Option<f64>,
    pub final_train_loss: f64,
    pub nan_events: usize,
}

/// Trains until `max_steps` or until patience runs out. With a validation
/// set, the parameters of the best validation are restored at the end.
pub fn fit<T, M, L>(
    model: &mut M,
    trainer: &mut Trainer<T>,
    train: &[Example],
    val: &[Example],
    cfg: &FitConfig,
    on_log: L,
) -> Result<FitReport>
where
    T: Real,
    M: Seq2Seq<T>,
    L: FnMut(&LogEntry),
{
    fit_with_checkpoints(model, trainer, train, val, cfg, on_log, |_, _| Ok(()))
}

/// [`fit`] that also hands the model to `on_checkpoint` (with the trainer's
/// update count) every `cfg.checkpoint_every` updates.
pub fn fit_with_checkpoints<T, M, L, C>(
    model: &mut M,
    trainer: &mut Trainer<T>,
    train: &[Example],
    val: &[Example],
    cfg: &FitConfig,
    mut on_log: L,
    mut on_checkpoint: C,
) -> Result<FitReport>
where
    T: Real,
    M: Seq2Seq<T>,
    L: FnMut(&LogEntry),
    C: FnMut(u64, &M) -> Result<()>,
{
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if cfg.validation_interval == 0 || cfg.patience == Some(0) {
        return Err(Error::Config(
            "validation_interval and patience must be positive".into(),
        ));
    }
    let budget = trainer.config.token_budget;
    let lens: Vec<usize> = train.iter().map(Example::num_tokens).collect();
    let mut batcher = Batcher::new(&lens, budget);
    let validate = !val.is_empty();
    let initial = if validate {
        Some(evaluate_loss(&*model, val, budget)?)
    } else {
        None
    };
    let mut report = FitReport {
        steps: 0,
        stop: StopReason::MaxSteps,
        initial_val_loss: initial,
        validations: Vec::new(),
        best_step: None,
        best_val_loss: None,
        final_train_loss: f64::NAN,
        nan_events: 0,
    };
    let mut best_store: Option<ParamStore<T>> = None;
    let mut stale = 0usize;
    let mut diverging = 0usize;
    let mut window_tokens = 0usize;
    let mut window_start = Instant::now();

    for step in 1..=cfg.max_steps {
        let idx: Vec<usize> = batcher.next_batch(&mut trainer.batch_rng).to_vec();
        let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
        let out = trainer.step(model, &batch)?;
        report.steps = step;
        report.final_train_loss = out.loss;
        window_tokens += out.tokens;

        let mut val_loss = None;
        if validate && step % cfg.validation_interval == 0 {
            let v = evaluate_loss(&*model, val, budget)?;
            report.validations.push((step, v));
            val_loss = Some(v);
            if report.best_val_loss.is_none_or(|b| v < b) {
                report.best_val_loss = Some(v);
                report.best_step = Some(step);
                best_store = Some(model.store().clone());
                stale = 0;
            } else {
                stale += 1;
            }
            let init = initial.unwrap_or(f64::INFINITY);
            if v > cfg.divergence_factor * init || !v.is_finite() {
                diverging += 1;
                if diverging >= cfg.divergence_validations {
                    return Err(Error::Numeric(format!(
                        "training diverged: validation loss {v:.4} above {}x the initial {init:.4} for {diverging} validations",
                        cfg.divergence_factor
                    )));
                }
            } else {
                diverging = 0;
            }
        }
        if step % cfg.log_interval == 0 || val_loss.is_some() || step == cfg.max_steps {
            let secs = window_start.elapsed().as_secs_f64().max(1e-9);
            on_log(&LogEntry {
                step,
                loss: out.loss,
                lr: out.lr,
                tokens_per_s: window_tokens as f64 / secs,
                val_loss,
            });
            window_tokens = 0;
            window_start = Instant::now();
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            on_checkpoint(trainer.step, model)?;
        }
        if cfg.patience.is_some_and(|p| stale >= p) {
            report.stop = StopReason::Patience;
            break;
        }
    }
    if let Some(best) = best_store {
        model.store_mut().load_values_from(&best)?;
    }
    report.nan_events = trainer.nan_events;
    Ok(report)
}
