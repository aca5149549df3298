//! Training objectives: the sparsity regularizer, per-instance rewards, the
//! estimator's masked cross-entropy step, and the selector's score-function
//! gradient together with its exact enumeration.

use std::collections::BTreeMap;

use rand::Rng;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::estimator::{self, EstimatorConfig, EstimatorParams, ModelStructure};
use crate::params::grads_of;
use crate::selector::{model_probability, SelectorDistribution, SelectorParams};
use crate::tensor::{cross_entropy, row_losses, Graph, OptimizerState, Tensor, Touch};

/// Largest structure space the exact routines will enumerate.
pub const ENUMERATION_BOUND: usize = 4096;

/// `ρ · mean(d)²`.
pub fn sparse_reg(densities: &[f64], rho: f64) -> f64 {
    if densities.is_empty() {
        return 0.0;
    }
    let mean = densities.iter().sum::<f64>() / densities.len() as f64;
    rho * (mean * mean)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardRecord {
    pub z: ModelStructure,
    pub loss: f64,
    pub sparsity: f64,
    pub reward: f64,
}

/// Classification loss of the masked forward plus the regularizer of `z`.
pub fn reward(
    est: &EstimatorParams,
    cfg: &EstimatorConfig,
    x: &[f64],
    y: usize,
    t: usize,
    z: &ModelStructure,
    rho: f64,
) -> Result<RewardRecord> {
    let logits = est.forward_one(cfg, x, z, t)?;
    let loss = cross_entropy(&logits, y)?;
    let sparsity = sparse_reg(&estimator::density(cfg, z)?.per_block, rho);
    Ok(RewardRecord {
        z: z.clone(),
        loss,
        sparsity,
        reward: loss + sparsity,
    })
}

/// Anything that can score structures for the rows of a batch.
pub trait RewardSource {
    /// `R(structures[r]; x_r, y_r, t_r)` for every row `r`.
    fn rewards(&self, batch: &Batch, structures: &[ModelStructure]) -> Result<Vec<f64>>;
}

/// Rewards from a fixed closure of `(z, label, task)`; used to build
/// controlled reward landscapes.
impl<F> RewardSource for F
where
    F: Fn(&ModelStructure, usize, usize) -> f64,
{
    fn rewards(&self, batch: &Batch, structures: &[ModelStructure]) -> Result<Vec<f64>> {
        Ok(structures
            .iter()
            .enumerate()
            .map(|(r, z)| self(z, batch.labels[r], batch.tasks[r]))
            .collect())
    }
}

/// Groups batch rows sharing `(z, task)` so each group runs one forward.
fn group_rows(batch: &Batch, structures: &[ModelStructure]) -> BTreeMap<(Vec<usize>, usize), Vec<usize>> {
    let mut groups: BTreeMap<(Vec<usize>, usize), Vec<usize>> = BTreeMap::new();
    for (r, z) in structures.iter().enumerate() {
        groups.entry((z.levels().to_vec(), batch.tasks[r])).or_default().push(r);
    }
    groups
}

fn check_structures(batch: &Batch, structures: &[ModelStructure]) -> Result<()> {
    if structures.len() != batch.len() {
        return Err(Error::Length(format!(
            "{} structures for a batch of {}",
            structures.len(),
            batch.len()
        )));
    }
    Ok(())
}

/// The real reward: estimator loss plus `ρ`-weighted sparsity.
#[derive(Debug, Clone, Copy)]
pub struct EstimatorReward<'a> {
    pub estimator: &'a EstimatorParams,
    pub config: &'a EstimatorConfig,
    pub rho: f64,
}

impl RewardSource for EstimatorReward<'_> {
    fn rewards(&self, batch: &Batch, structures: &[ModelStructure]) -> Result<Vec<f64>> {
        check_structures(batch, structures)?;
        let mut out = vec![0.0; batch.len()];
        for ((levels, task), rows) in group_rows(batch, structures) {
            let z = ModelStructure::new(levels);
            let sub = batch.select(&rows)?;
            let logits = self.estimator.forward(self.config, &sub.x, &z, task)?;
            let losses = row_losses(&logits, &sub.labels)?;
            let s = sparse_reg(&estimator::density(self.config, &z)?.per_block, self.rho);
            for (&r, loss) in rows.iter().zip(losses) {
                out[r] = loss + s;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorGradient {
    /// Mean cross-entropy over the batch before any update.
    pub loss: f64,
    pub grads: Vec<Tensor>,
    /// Union of the entries read by every `(z, task)` in the batch.
    pub touch: Vec<Touch>,
}

/// Gradient of the batch-mean cross-entropy where row `r` runs under
/// `structures[r]`. The regularizer does not depend on the estimator and
/// contributes nothing here.
pub fn estimator_gradient(
    est: &EstimatorParams,
    cfg: &EstimatorConfig,
    batch: &Batch,
    structures: &[ModelStructure],
) -> Result<EstimatorGradient> {
    check_structures(batch, structures)?;
    let mut g = Graph::new();
    let vars = est.params().bind(&mut g);
    let b = batch.len() as f64;
    let mut total = None;
    let mut touch: Option<Vec<Touch>> = None;
    for ((levels, task), rows) in group_rows(batch, structures) {
        let z = ModelStructure::new(levels);
        let sub = batch.select(&rows)?;
        let x = g.leaf(sub.x.clone());
        let logits = EstimatorParams::forward_on(cfg, &mut g, &vars, x, &z, task)?;
        let ce = g.cross_entropy(logits, &sub.labels)?;
        let part = g.scale(ce, rows.len() as f64 / b)?;
        total = Some(match total {
            Some(acc) => g.add(acc, part)?,
            None => part,
        });
        let t = estimator::touched(cfg, &z, task)?;
        touch = Some(match touch {
            Some(acc) => acc.iter().zip(&t).map(|(a, b)| a.union(b)).collect(),
            None => t,
        });
    }
    let (Some(root), Some(touch)) = (total, touch) else {
        return Err(Error::Contract("empty batch".into()));
    };
    let loss = g.value(root).item()?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("estimator loss is {loss}")));
    }
    g.backward(root)?;
    Ok(EstimatorGradient {
        loss,
        grads: grads_of(&g, &vars),
        touch,
    })
}

/// One optimizer step on the masked cross-entropy. Entries outside every
/// row's active groups, and heads of absent tasks, are left untouched.
pub fn estimator_update(
    est: &mut EstimatorParams,
    cfg: &EstimatorConfig,
    batch: &Batch,
    structures: &[ModelStructure],
    opt: &mut OptimizerState,
) -> Result<f64> {
    let grad = estimator_gradient(est, cfg, batch, structures)?;
    opt.step(est.params_mut(), &grad.grads, Some(&grad.touch))?;
    Ok(grad.loss)
}

/// One optimizer step on the unmasked backbone.
pub fn dense_estimator_update(
    est: &mut EstimatorParams,
    cfg: &EstimatorConfig,
    batch: &Batch,
    opt: &mut OptimizerState,
) -> Result<f64> {
    let mut by_task: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (r, &t) in batch.tasks.iter().enumerate() {
        by_task.entry(t).or_default().push(r);
    }
    let mut g = Graph::new();
    let vars = est.params().bind(&mut g);
    let b = batch.len() as f64;
    let mut total = None;
    let mut touch = vec![Touch::Frozen; vars.len()];
    for (task, rows) in by_task {
        let sub = batch.select(&rows)?;
        let x = g.leaf(sub.x.clone());
        let logits = EstimatorParams::forward_dense_on(cfg, &mut g, &vars, x, task)?;
        let ce = g.cross_entropy(logits, &sub.labels)?;
        let part = g.scale(ce, rows.len() as f64 / b)?;
        total = Some(match total {
            Some(acc) => g.add(acc, part)?,
            None => part,
        });
        let t = estimator::touched(cfg, &cfg.full_structure(), task)?;
        touch = touch.iter().zip(&t).map(|(a, b)| a.union(b)).collect();
    }
    let root = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
    let loss = g.value(root).item()?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("estimator loss is {loss}")));
    }
    g.backward(root)?;
    opt.step(est.params_mut(), &grads_of(&g, &vars), Some(&touch))?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    /// Structures drawn per instance, `|Z|`.
    pub sample_count: usize,
    /// Constant subtracted from every reward. Off by default.
    pub baseline: Option<f64>,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            sample_count: 4,
            baseline: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorGradient {
    pub grads: Vec<Tensor>,
    /// Mean reward over every drawn `(instance, z)` pair.
    pub mean_reward: f64,
}

/// Score-function estimate of `∇ E_z[R]`: for each instance draw `|Z|`
/// structures with `draw`, weight `∇ log P(z; x)` by `R / |Z|`, and average
/// over the batch. Rewards are constants; only the selector is
/// differentiated.
pub fn selector_gradient_estimate<R, D>(
    sel: &SelectorParams,
    source: &dyn RewardSource,
    batch: &Batch,
    opts: EstimateOptions,
    rng: &mut R,
    mut draw: D,
) -> Result<SelectorGradient>
where
    R: Rng + ?Sized,
    D: FnMut(&SelectorDistribution, &mut R) -> ModelStructure,
{
    if opts.sample_count == 0 {
        return Err(Error::Config("sample count |Z| must be at least 1".into()));
    }
    let cfg = sel.config();
    let (h, n, b, k) = (cfg.levels, cfg.blocks, batch.len(), opts.sample_count);
    let dists = sel.distribute_batch(&batch.x)?;
    let draws: Vec<Vec<ModelStructure>> = dists
        .iter()
        .map(|c| (0..k).map(|_| draw(c, rng)).collect())
        .collect();
    let mut weights = vec![0.0; b * h * n];
    let mut reward_sum = 0.0;
    let scale = 1.0 / (k * b) as f64;
    for j in 0..k {
        let zs: Vec<ModelStructure> = draws.iter().map(|d| d[j].clone()).collect();
        let rewards = source.rewards(batch, &zs)?;
        for (r, (z, &rew)) in zs.iter().zip(&rewards).enumerate() {
            if !rew.is_finite() {
                return Err(Error::Numeric(format!("reward for row {r} is {rew}")));
            }
            reward_sum += rew;
            let w = (rew - opts.baseline.unwrap_or(0.0)) * scale;
            for (i, &l) in z.levels().iter().enumerate() {
                weights[r * h * n + l * n + i] += w;
            }
        }
    }
    let mut g = Graph::new();
    let vars = sel.params().bind(&mut g);
    let x = g.leaf(batch.x.clone());
    let log_c = sel.log_distribution_on(&mut g, &vars, x)?;
    let w = g.leaf(Tensor::new(vec![b, h, n], weights)?);
    let weighted = g.mul(w, log_c)?;
    let root = g.sum(weighted)?;
    g.backward(root)?;
    Ok(SelectorGradient {
        grads: grads_of(&g, &vars),
        mean_reward: reward_sum * scale,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactGradient {
    /// `J = (1/B) Σ_x Σ_z R(z; x) P(z; x)`.
    pub objective: f64,
    pub grads: Vec<Tensor>,
}

fn all_structures(sel: &SelectorParams, bound: usize) -> Result<Vec<ModelStructure>> {
    let cfg = sel.config();
    estimator::enumerate_structures(cfg.levels, cfg.blocks, bound)
}

/// Exact `∇J` by summing `R(z)·∇P(z; x)` over every structure.
pub fn exact_selector_gradient(
    sel: &SelectorParams,
    source: &dyn RewardSource,
    batch: &Batch,
    bound: usize,
) -> Result<ExactGradient> {
    let structures = all_structures(sel, bound)?;
    let b = batch.len();
    let mut g = Graph::new();
    let vars = sel.params().bind(&mut g);
    let x = g.leaf(batch.x.clone());
    let log_c = sel.log_distribution_on(&mut g, &vars, x)?;
    let mut total = None;
    for z in &structures {
        let rewards = source.rewards(batch, &vec![z.clone(); b])?;
        let scaled: Vec<f64> = rewards.iter().map(|r| r / b as f64).collect();
        let log_p = g.gather_levels(log_c, z.levels())?;
        let p = g.exp(log_p)?;
        let rv = g.leaf(Tensor::vector(scaled)?);
        let term = g.mul(p, rv)?;
        let term = g.sum(term)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let root = total.ok_or_else(|| Error::Contract("no structures".into()))?;
    let objective = g.value(root).item()?;
    g.backward(root)?;
    Ok(ExactGradient {
        objective,
        grads: grads_of(&g, &vars),
    })
}

/// `J` by enumeration, without a tape.
pub fn enumerated_objective(sel: &SelectorParams, source: &dyn RewardSource, batch: &Batch, bound: usize) -> Result<f64> {
    let structures = all_structures(sel, bound)?;
    let dists = sel.distribute_batch(&batch.x)?;
    let b = batch.len();
    let mut total = 0.0;
    for z in &structures {
        let rewards = source.rewards(batch, &vec![z.clone(); b])?;
        for (c, r) in dists.iter().zip(rewards) {
            total += r * model_probability(c, z)?;
        }
    }
    Ok(total / b as f64)
}

/// Sampled versus exact selector gradients on a toy problem.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub exact: Vec<f64>,
    pub mean: Vec<f64>,
    /// Standard error of each coordinate of `mean`.
    pub std_error: Vec<f64>,
    /// Largest `|mean − exact| / std_error` over coordinates with spread.
    pub max_z: f64,
    pub cosine: f64,
}

/// Draws `samples` single-structure estimates on one instance of an `n`
/// block, `h` level toy estimator and compares their mean to enumeration.
pub fn check_score_function(h: usize, n: usize, samples: usize, seed: u64) -> Result<GradientCheck> {
    if h < 2 || n == 0 {
        return Err(Error::Config(format!("need h ≥ 2 and n ≥ 1, got h = {h}, n = {n}")));
    }
    if samples < 2 {
        return Err(Error::Config("need at least 2 samples".into()));
    }
    let width = 3;
    let blocks = (0..n).map(|_| estimator::BlockConfig::residual(width, vec![1; h - 1])).collect();
    let cfg = EstimatorConfig::new(blocks, vec![estimator::TaskConfig { input_width: width, classes: 2 }])?;
    let est = estimator::build_estimator(&cfg, seed)?;
    let sel = crate::selector::build_selector(width, 4, h, n, seed)?;
    let mut rng = crate::rng::derive_rng(seed, &[crate::rng::stream::ANALYSIS, 2]);
    let x: Vec<f64> = (0..width).map(|_| rng.random_range(-1.5..1.5)).collect();
    let batch = crate::data::Dataset::new(width, vec![crate::data::TaskSample { x, y: 1, t: 0 }], &[2])?.as_batch()?;
    let source = EstimatorReward {
        estimator: &est,
        config: &cfg,
        rho: 1.0,
    };
    let flat = |ts: &[Tensor]| ts.iter().flat_map(|t| t.data().to_vec()).collect::<Vec<f64>>();
    let exact = flat(&exact_selector_gradient(&sel, &source, &batch, ENUMERATION_BOUND)?.grads);
    let (mut sum, mut sq) = (vec![0.0; exact.len()], vec![0.0; exact.len()]);
    let opts = EstimateOptions {
        sample_count: 1,
        baseline: None,
    };
    for _ in 0..samples {
        let g = flat(&selector_gradient_estimate(&sel, &source, &batch, opts, &mut rng, |c, r| {
            crate::selector::sample_structure(c, r)
        })?
        .grads);
        for (j, v) in g.into_iter().enumerate() {
            sum[j] += v;
            sq[j] += v * v;
        }
    }
    let m = samples as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
    let std_error: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(q, mu)| ((q / m - mu * mu).max(0.0) * m / (m - 1.0) / m).sqrt())
        .collect();
    let mut max_z = 0.0f64;
    for j in 0..exact.len() {
        let diff = (mean[j] - exact[j]).abs();
        if std_error[j] > 0.0 {
            max_z = max_z.max(diff / std_error[j]);
        } else if diff > 1e-12 {
            max_z = f64::INFINITY;
        }
    }
    let dot: f64 = mean.iter().zip(&exact).map(|(a, b)| a * b).sum();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let cosine = dot / (norm(&mean) * norm(&exact));
    Ok(GradientCheck {
        exact,
        mean,
        std_error,
        max_z,
        cosine,
    })
}
