//! Alternating training: each stage runs an estimator phase, where
//! mini-batches share one structure drawn from the current sampler, then a
//! selector phase driven by the score-function gradient. Stage 1 draws from
//! a mixture of the full model and a uniform distribution; later stages
//! draw from the selector itself.

use std::time::Instant;

use log::{debug, info};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, EvalReport};
use crate::data::{round_robin_batches, Batch, Dataset, Suite};
use crate::error::{Error, Result};
use crate::estimator::{build_estimator, EstimatorConfig, EstimatorParams, ModelStructure};
use crate::metrics::{MetricsRecord, Phase};
use crate::objective::{
    dense_estimator_update, estimator_update, selector_gradient_estimate, sparse_reg, EstimateOptions,
    EstimatorReward, RewardSource,
};
use crate::rng::{derive_rng, stream, DenRng};
use crate::selector::{build_selector, sample_structure, SelectorDistribution, SelectorParams};
use crate::tensor::OptimizerState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub rho: f64,
    pub tau: f64,
    pub epsilon: f64,
    /// Multiplier applied to `ε` after each stage.
    pub epsilon_decay: f64,
    pub sample_count: usize,
    pub stages: usize,
    /// Epoch cap for estimator phases.
    pub epochs_per_phase: usize,
    /// Epoch cap for selector phases; zero skips them.
    pub selector_epochs_per_phase: usize,
    pub lr_est: f64,
    pub lr_sel: f64,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Epochs without relative improvement above `min_improvement` before a
    /// phase stops.
    pub patience: usize,
    pub min_improvement: f64,
    pub baseline: Option<f64>,
    /// Supplied by the run config's top-level `seed`.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rho: 0.1,
            tau: 0.75,
            epsilon: 0.1,
            epsilon_decay: 0.5,
            sample_count: 4,
            stages: 3,
            epochs_per_phase: 20,
            selector_epochs_per_phase: 20,
            lr_est: 0.1,
            lr_sel: 1e-5,
            lr_decay_factor: 10.0,
            momentum: 0.9,
            batch_size: 32,
            patience: 2,
            min_improvement: 0.001,
            baseline: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::validation(format!("train.{key}"), msg))
            }
        };
        check(self.rho >= 0.0 && self.rho.is_finite(), "rho", "must be a finite value ≥ 0")?;
        check((0.0..=1.0).contains(&self.tau), "tau", "must lie in [0, 1]")?;
        check((0.0..=1.0).contains(&self.epsilon), "epsilon", "must lie in [0, 1]")?;
        check((0.0..=1.0).contains(&self.epsilon_decay), "epsilon_decay", "must lie in [0, 1]")?;
        check(self.sample_count >= 1, "sample_count", "must be at least 1")?;
        check(self.stages >= 1, "stages", "must be at least 1")?;
        check(self.epochs_per_phase >= 1, "epochs_per_phase", "must be at least 1")?;
        check(self.lr_est > 0.0 && self.lr_est.is_finite(), "lr_est", "must be positive")?;
        check(self.lr_sel > 0.0 && self.lr_sel.is_finite(), "lr_sel", "must be positive")?;
        check(self.lr_decay_factor > 1.0 && self.lr_decay_factor.is_finite(), "lr_decay_factor", "must exceed 1")?;
        check((0.0..1.0).contains(&self.momentum), "momentum", "must lie in [0, 1)")?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        check(self.patience >= 1, "patience", "must be at least 1")?;
        check((0.0..1.0).contains(&self.min_improvement), "min_improvement", "must lie in [0, 1)")?;
        check(self.baseline.is_none_or(f64::is_finite), "baseline", "must be finite")?;
        Ok(())
    }

    /// `ε` in force during stage `stage` (one-based).
    pub fn epsilon_at(&self, stage: usize) -> f64 {
        self.epsilon * self.epsilon_decay.powi(stage as i32 - 1)
    }
}

/// The stage-1 sampler: the full model with probability `τ`, otherwise a
/// uniform draw over all `h^n` structures (the full model included).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialSampler {
    pub levels: usize,
    pub blocks: usize,
    pub tau: f64,
}

pub fn initial_structure_sampler(levels: usize, blocks: usize, tau: f64) -> Result<InitialSampler> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::validation("train.tau", format!("{tau} outside [0, 1]")));
    }
    if levels == 0 || blocks == 0 {
        return Err(Error::Config("sampler needs at least one level and one block".into()));
    }
    Ok(InitialSampler { levels, blocks, tau })
}

impl InitialSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelStructure {
        if rng.random::<f64>() < self.tau {
            ModelStructure::new(vec![self.levels - 1; self.blocks])
        } else {
            ModelStructure::uniform(self.levels, self.blocks, rng)
        }
    }

    /// `P(z)` under the mixture.
    pub fn probability(&self, z: &ModelStructure) -> f64 {
        let uniform = (1.0 - self.tau) / (self.levels as f64).powi(self.blocks as i32);
        if z.levels().iter().all(|&l| l == self.levels - 1) {
            self.tau + uniform
        } else {
            uniform
        }
    }
}

/// With probability `ε` a uniform structure, otherwise a draw from `C`.
/// At `ε = 0` no extra random number is consumed.
pub fn epsilon_greedy_sample<R: Rng + ?Sized>(c: &SelectorDistribution, epsilon: f64, rng: &mut R) -> ModelStructure {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        ModelStructure::uniform(c.levels(), c.blocks(), rng)
    } else {
        sample_structure(c, rng)
    }
}

/// Stops a phase once the monitored value has failed to improve by more
/// than `min_improvement` (relative) for `patience` consecutive epochs.
#[derive(Debug, Clone)]
struct Convergence {
    best: f64,
    stale: usize,
    patience: usize,
    min_improvement: f64,
}

impl Convergence {
    fn new(cfg: &TrainConfig) -> Self {
        Convergence {
            best: f64::INFINITY,
            stale: 0,
            patience: cfg.patience,
            min_improvement: cfg.min_improvement,
        }
    }

    /// Records one epoch; true when the phase should stop.
    fn update(&mut self, value: f64) -> bool {
        if !self.best.is_finite() || value < self.best - self.min_improvement * self.best.abs() {
            self.best = value;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseReport {
    pub epochs: usize,
    /// Monitored validation value after each epoch.
    pub validation: Vec<f64>,
    /// Training loss (estimator) or mean reward (selector) per mini-batch.
    pub batch_values: Vec<f64>,
}

fn check_suite(cfg: &EstimatorConfig, suite: &Suite) -> Result<()> {
    if suite.width() != cfg.input_width() {
        return Err(Error::Config(format!(
            "data width {} does not match estimator input width {}",
            suite.width(),
            cfg.input_width()
        )));
    }
    if suite.task_count() != cfg.task_count() {
        return Err(Error::Config(format!(
            "data has {} tasks, estimator has {}",
            suite.task_count(),
            cfg.task_count()
        )));
    }
    for t in 0..cfg.task_count() {
        if suite.classes[t] != cfg.classes(t)? {
            return Err(Error::Config(format!(
                "task {t}: data has {} classes, estimator head has {}",
                suite.classes[t],
                cfg.classes(t)?
            )));
        }
        for (name, split) in [("train", &suite.train), ("val", &suite.val)] {
            if split.task_indices(t).is_empty() {
                return Err(Error::Config(format!("task {t} has no {name} samples")));
            }
        }
    }
    Ok(())
}

fn mean_sparsity(cfg: &EstimatorConfig, structures: &[ModelStructure], rho: f64) -> Result<f64> {
    let mut total = 0.0;
    for z in structures {
        total += sparse_reg(&crate::estimator::density(cfg, z)?.per_block, rho);
    }
    Ok(total / structures.len() as f64)
}

/// Mutable state of one training run.
pub struct Trainer<'a> {
    pub config: &'a EstimatorConfig,
    pub train: &'a TrainConfig,
    pub suite: &'a Suite,
    pub estimator: EstimatorParams,
    pub selector: SelectorParams,
    opt_est: OptimizerState,
    opt_sel: OptimizerState,
    /// One-based index of the stage in progress.
    pub stage: usize,
    est_phases: u32,
    sel_phases: u32,
    shuffle_epoch: u64,
    structure_rng: DenRng,
    pub metrics: Vec<MetricsRecord>,
    clock: Option<Instant>,
}

impl<'a> Trainer<'a> {
    /// Validates everything and initialises both networks from the seed.
    pub fn new(config: &'a EstimatorConfig, selector_hidden: usize, train: &'a TrainConfig, suite: &'a Suite) -> Result<Self> {
        train.validate()?;
        config.validate()?;
        check_suite(config, suite)?;
        if selector_hidden == 0 {
            return Err(Error::validation("selector.hidden", "must be positive"));
        }
        let estimator = build_estimator(config, train.seed)?;
        let selector = build_selector(
            config.input_width(),
            selector_hidden,
            config.levels(),
            config.block_count(),
            train.seed,
        )?;
        Ok(Trainer {
            config,
            train,
            suite,
            estimator,
            selector,
            opt_est: OptimizerState::sgd_nesterov(train.lr_est, train.momentum)?,
            opt_sel: OptimizerState::adam(train.lr_sel)?,
            stage: 1,
            est_phases: 0,
            sel_phases: 0,
            shuffle_epoch: 0,
            structure_rng: derive_rng(train.seed, &[stream::STRUCTURES]),
            metrics: Vec::new(),
            clock: None,
        })
    }

    /// Records elapsed wall time in metrics instead of zero.
    pub fn with_wall_clock(mut self) -> Self {
        self.clock = Some(Instant::now());
        self
    }

    pub fn lr_est(&self) -> f64 {
        self.opt_est.learning_rate
    }

    pub fn lr_sel(&self) -> f64 {
        self.opt_sel.learning_rate
    }

    pub fn epsilon(&self) -> f64 {
        self.train.epsilon_at(self.stage)
    }

    fn sampler(&self) -> Result<InitialSampler> {
        initial_structure_sampler(self.config.levels(), self.config.block_count(), self.train.tau)
    }

    fn next_plan(&mut self) -> Result<Vec<Vec<usize>>> {
        let plan = round_robin_batches(
            &self.suite.train,
            self.config.task_count(),
            self.train.batch_size,
            self.train.seed,
            self.shuffle_epoch,
        )?;
        self.shuffle_epoch += 1;
        Ok(plan)
    }

    /// One structure for the whole batch: from the stage-1 mixture, or from
    /// `C` of a uniformly chosen instance of the batch.
    fn batch_structure(&mut self, batch: &Batch) -> Result<ModelStructure> {
        if self.stage == 1 {
            let s = self.sampler()?;
            return Ok(s.sample(&mut self.structure_rng));
        }
        let r = self.structure_rng.random_range(0..batch.len());
        let c = self.selector.distribute(batch.row(r))?;
        Ok(sample_structure(&c, &mut self.structure_rng))
    }

    /// Per-instance structures the current estimator-phase sampler would
    /// produce on `dataset`, from a generator fixed for the stage.
    pub fn sampled_structures(&self, dataset: &Dataset) -> Result<Vec<ModelStructure>> {
        let mut rng = derive_rng(self.train.seed, &[stream::EVALUATION, self.stage as u64]);
        if self.stage == 1 {
            let s = self.sampler()?;
            return Ok((0..dataset.len()).map(|_| s.sample(&mut rng)).collect());
        }
        Ok(analysis::distributions(&self.selector, dataset)?
            .iter()
            .map(|c| sample_structure(c, &mut rng))
            .collect())
    }

    pub fn argmax_structures(&self, dataset: &Dataset) -> Result<Vec<ModelStructure>> {
        analysis::deploy(&self.selector, dataset, analysis::Deployment::Argmax)
    }

    fn record(&mut self, phase: Phase, epoch: usize, report: &EvalReport) {
        let wall_seconds = self.clock.map_or(0.0, |c| c.elapsed().as_secs_f64());
        self.metrics.push(MetricsRecord {
            stage: self.stage,
            phase,
            epoch,
            task_loss: report.tasks.iter().map(|t| t.loss).collect(),
            task_accuracy: report.tasks.iter().map(|t| t.accuracy).collect(),
            mean_density: report.cost.mean_density,
            mean_flops: report.cost.mean_flops,
            epsilon: self.epsilon(),
            lr_est: self.opt_est.learning_rate,
            lr_sel: self.opt_sel.learning_rate,
            wall_seconds,
        });
    }

    /// Estimator updates until convergence, then decays `lr_est`.
    pub fn train_estimator_phase(&mut self) -> Result<PhaseReport> {
        let mut conv = Convergence::new(self.train);
        let mut validation = Vec::new();
        let mut batch_values = Vec::new();
        let eval_structures = self.sampled_structures(&self.suite.val)?;
        for epoch in 1..=self.train.epochs_per_phase {
            for idx in self.next_plan()? {
                let batch = self.suite.train.batch(&idx)?;
                let z = self.batch_structure(&batch)?;
                let zs = vec![z; batch.len()];
                let loss = estimator_update(&mut self.estimator, self.config, &batch, &zs, &mut self.opt_est)
                    .map_err(|e| Error::Numeric(format!("stage {} estimator epoch {epoch}: {e}", self.stage)))?;
                self.estimator.params_mut().round_to_f32();
                batch_values.push(loss);
            }
            let report = analysis::evaluate(&self.estimator, self.config, &self.suite.val, &eval_structures)?;
            debug!("stage {} estimator epoch {epoch}: val loss {:.5}", self.stage, report.loss);
            self.record(Phase::Estimator, epoch, &report);
            validation.push(report.loss);
            if conv.update(report.loss) {
                break;
            }
        }
        self.est_phases += 1;
        self.opt_est.learning_rate = self.train.lr_est / self.train.lr_decay_factor.powi(self.est_phases as i32);
        info!(
            "stage {} estimator phase: {} epochs, val loss {:.5}",
            self.stage,
            validation.len(),
            validation.last().copied().unwrap_or(f64::NAN)
        );
        Ok(PhaseReport {
            epochs: validation.len(),
            validation,
            batch_values,
        })
    }

    pub fn train_selector_phase(&mut self) -> Result<PhaseReport> {
        self.train_selector_phase_with(None)
    }

    /// Selector updates against `source`, or against the estimator's own
    /// rewards when `None`; then decays `lr_sel`.
    pub fn train_selector_phase_with(&mut self, source: Option<&dyn RewardSource>) -> Result<PhaseReport> {
        let mut conv = Convergence::new(self.train);
        let mut validation = Vec::new();
        let mut batch_values = Vec::new();
        let opts = EstimateOptions {
            sample_count: self.train.sample_count,
            baseline: self.train.baseline,
        };
        let eps = self.epsilon();
        let val_batch = self.suite.val.as_batch()?;
        for epoch in 1..=self.train.selector_epochs_per_phase {
            for idx in self.next_plan()? {
                let batch = self.suite.train.batch(&idx)?;
                let own = EstimatorReward {
                    estimator: &self.estimator,
                    config: self.config,
                    rho: self.train.rho,
                };
                let src: &dyn RewardSource = source.unwrap_or(&own);
                let grad = selector_gradient_estimate(&self.selector, src, &batch, opts, &mut self.structure_rng, |c, r| {
                    epsilon_greedy_sample(c, eps, r)
                })
                .map_err(|e| Error::Numeric(format!("stage {} selector epoch {epoch}: {e}", self.stage)))?;
                self.opt_sel.step(self.selector.params_mut(), &grad.grads, None)?;
                self.selector.params_mut().round_to_f32();
                batch_values.push(grad.mean_reward);
            }
            let structures = self.argmax_structures(&self.suite.val)?;
            let report = analysis::evaluate(&self.estimator, self.config, &self.suite.val, &structures)?;
            let monitored = match source {
                None => report.loss + mean_sparsity(self.config, &structures, self.train.rho)?,
                Some(src) => src.rewards(&val_batch, &structures)?.iter().sum::<f64>() / structures.len() as f64,
            };
            debug!(
                "stage {} selector epoch {epoch}: val reward {monitored:.5}, density {:.4}",
                self.stage, report.cost.mean_density
            );
            self.record(Phase::Selector, epoch, &report);
            validation.push(monitored);
            if conv.update(monitored) {
                break;
            }
        }
        self.sel_phases += 1;
        self.opt_sel.learning_rate = self.train.lr_sel / self.train.lr_decay_factor.powi(self.sel_phases as i32);
        Ok(PhaseReport {
            epochs: validation.len(),
            validation,
            batch_values,
        })
    }

    /// Runs the remaining stages.
    pub fn run(&mut self) -> Result<()> {
        while self.stage <= self.train.stages {
            self.train_estimator_phase()?;
            self.train_selector_phase()?;
            self.stage += 1;
        }
        self.stage = self.train.stages;
        Ok(())
    }

    pub fn into_outcome(self) -> TrainingOutcome {
        TrainingOutcome {
            estimator: self.estimator,
            selector: self.selector,
            metrics: self.metrics,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub estimator: EstimatorParams,
    pub selector: SelectorParams,
    pub metrics: Vec<MetricsRecord>,
}

/// Full run: `S` stages of estimator then selector training.
pub fn run_training(
    config: &EstimatorConfig,
    selector_hidden: usize,
    train: &TrainConfig,
    suite: &Suite,
    wall_clock: bool,
) -> Result<TrainingOutcome> {
    let mut t = Trainer::new(config, selector_hidden, train, suite)?;
    if wall_clock {
        t = t.with_wall_clock();
    }
    t.run()?;
    Ok(t.into_outcome())
}

/// Plain training of the unmasked backbone with the same batching,
/// optimizer and stopping rule as one estimator phase.
pub fn train_dense_baseline(config: &EstimatorConfig, train: &TrainConfig, suite: &Suite) -> Result<EstimatorParams> {
    train.validate()?;
    check_suite(config, suite)?;
    let mut est = build_estimator(config, train.seed)?;
    let mut opt = OptimizerState::sgd_nesterov(train.lr_est, train.momentum)?;
    let mut conv = Convergence::new(train);
    for epoch in 0..train.epochs_per_phase {
        let plan = round_robin_batches(&suite.train, config.task_count(), train.batch_size, train.seed, epoch as u64)?;
        for idx in plan {
            let batch = suite.train.batch(&idx)?;
            dense_estimator_update(&mut est, config, &batch, &mut opt)?;
            est.params_mut().round_to_f32();
        }
        let report = analysis::evaluate_dense(&est, config, &suite.val)?;
        if conv.update(report.loss) {
            break;
        }
    }
    Ok(est)
}
