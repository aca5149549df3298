//! The elastic estimator: a stack of `n` residual-style blocks, each with `h`
//! hierarchy levels over contiguous hidden-unit groups, followed by one
//! linear head per task.
//!
//! Level `l` of a block activates the first `g(l)` groups of its hidden
//! layer, where `g(l) = l` for residual blocks (so level 0 is the identity
//! map) and `g(l) = l + 1` otherwise. A block computes
//!
//! ```text
//! out = W2[:, :w] · relu(W1[:w, :] · in + b1[:w]) + b2   (+ in if residual)
//! ```
//!
//! with `w` the number of active hidden units; when `w = 0` the block
//! returns its input unchanged.
//!
//! Accounting conventions: a block's density counts the leveled parameters
//! `W1[:w, :]`, `b1[:w]` and `W2[:, :w]` against the same count at full
//! width. Parameter counts add `b2` for every block that runs plus the
//! active task head. FLOPs count a multiply-add as two operations, plus one
//! per bias add and per residual add.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::{derive_rng, stream, DenRng};
use crate::tensor::{Graph, Tensor, Touch, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockConfig {
    pub input_width: usize,
    pub hidden_width: usize,
    pub output_width: usize,
    pub group_sizes: Vec<usize>,
    pub residual: bool,
}

impl BlockConfig {
    /// A residual block over `width` units whose hidden layer is split into
    /// `group_sizes`.
    pub fn residual(width: usize, group_sizes: Vec<usize>) -> Self {
        BlockConfig {
            input_width: width,
            hidden_width: group_sizes.iter().sum(),
            output_width: width,
            group_sizes,
            residual: true,
        }
    }

    pub fn plain(input_width: usize, output_width: usize, group_sizes: Vec<usize>) -> Self {
        BlockConfig {
            input_width,
            hidden_width: group_sizes.iter().sum(),
            output_width,
            group_sizes,
            residual: false,
        }
    }

    pub fn levels(&self) -> usize {
        self.group_sizes.len() + usize::from(self.residual)
    }

    fn active_groups(&self, level: usize) -> usize {
        if self.residual {
            level
        } else {
            level + 1
        }
    }

    /// Hidden units reached at `level`.
    pub fn active_width(&self, level: usize) -> usize {
        self.group_sizes[..self.active_groups(level)].iter().sum()
    }

    pub fn leveled_params(&self, level: usize) -> usize {
        let w = self.active_width(level);
        w * self.input_width + w + self.output_width * w
    }

    pub fn param_count(&self, level: usize) -> usize {
        let w = self.active_width(level);
        if w == 0 {
            0
        } else {
            self.leveled_params(level) + self.output_width
        }
    }

    pub fn flops(&self, level: usize) -> u64 {
        let w = self.active_width(level) as u64;
        if w == 0 {
            return 0;
        }
        let (i, o) = (self.input_width as u64, self.output_width as u64);
        let residual = if self.residual { o } else { 0 };
        2 * w * i + w + 2 * o * w + o + residual
    }

    pub fn density(&self, level: usize) -> f64 {
        self.leveled_params(level) as f64 / self.leveled_params(self.levels() - 1) as f64
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        let ctx = |msg: String| Error::Config(format!("block {index}: {msg}"));
        if self.group_sizes.is_empty() {
            return Err(ctx("group_sizes must be non-empty".into()));
        }
        if self.group_sizes.contains(&0) {
            return Err(ctx("group sizes must be positive".into()));
        }
        if self.group_sizes.iter().sum::<usize>() != self.hidden_width {
            return Err(ctx(format!(
                "group sizes {:?} do not sum to hidden width {}",
                self.group_sizes, self.hidden_width
            )));
        }
        if self.input_width == 0 || self.output_width == 0 {
            return Err(ctx("widths must be positive".into()));
        }
        if self.residual && self.input_width != self.output_width {
            return Err(ctx(format!(
                "residual block needs equal input and output widths, got {} and {}",
                self.input_width, self.output_width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskConfig {
    pub input_width: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EstimatorConfig {
    pub blocks: Vec<BlockConfig>,
    pub tasks: Vec<TaskConfig>,
}

impl EstimatorConfig {
    pub fn new(blocks: Vec<BlockConfig>, tasks: Vec<TaskConfig>) -> Result<Self> {
        let cfg = EstimatorConfig { blocks, tasks };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `n` identical residual blocks of `width` units with hidden groups
    /// `group_sizes`, and one head per entry of `classes`.
    pub fn uniform_residual(width: usize, blocks: usize, group_sizes: Vec<usize>, classes: &[usize]) -> Result<Self> {
        EstimatorConfig::new(
            (0..blocks).map(|_| BlockConfig::residual(width, group_sizes.clone())).collect(),
            classes
                .iter()
                .map(|&c| TaskConfig {
                    input_width: width,
                    classes: c,
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .blocks
            .first()
            .ok_or_else(|| Error::Config("estimator needs at least one block".into()))?;
        let h = first.levels();
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate(i)?;
            if b.levels() != h {
                return Err(Error::Config(format!(
                    "block {i} has {} levels, block 0 has {h}; levels must be uniform",
                    b.levels()
                )));
            }
            if i > 0 && self.blocks[i - 1].output_width != b.input_width {
                return Err(Error::Config(format!(
                    "width chain broken: block {} outputs {} but block {i} takes {}",
                    i - 1,
                    self.blocks[i - 1].output_width,
                    b.input_width
                )));
            }
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("estimator needs at least one task".into()));
        }
        for (t, task) in self.tasks.iter().enumerate() {
            if task.classes < 2 {
                return Err(Error::Config(format!("task {t} has {} classes; need at least 2", task.classes)));
            }
            if task.input_width != first.input_width {
                return Err(Error::Config(format!(
                    "task {t} input width {} differs from trunk input width {}",
                    task.input_width, first.input_width
                )));
            }
        }
        Ok(())
    }

    /// Levels per block (`h`).
    pub fn levels(&self) -> usize {
        self.blocks[0].levels()
    }

    /// Number of blocks (`n`).
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn input_width(&self) -> usize {
        self.blocks[0].input_width
    }

    pub fn output_width(&self) -> usize {
        self.blocks[self.blocks.len() - 1].output_width
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn classes(&self, task: usize) -> Result<usize> {
        self.tasks
            .get(task)
            .map(|t| t.classes)
            .ok_or(Error::Task {
                task,
                count: self.tasks.len(),
            })
    }

    /// The all-highest-level structure `z*`.
    pub fn full_structure(&self) -> ModelStructure {
        ModelStructure::new(vec![self.levels() - 1; self.block_count()])
    }

    pub fn lowest_structure(&self) -> ModelStructure {
        ModelStructure::new(vec![0; self.block_count()])
    }

    pub fn structure_count(&self) -> u128 {
        (self.levels() as u128).saturating_pow(self.block_count() as u32)
    }

    /// Every structure in lexicographic order (first block most significant),
    /// provided there are at most `bound` of them.
    pub fn enumerate_structures(&self, bound: usize) -> Result<Vec<ModelStructure>> {
        enumerate_structures(self.levels(), self.block_count(), bound)
    }

    pub fn density_table(&self) -> DensityTable {
        DensityTable {
            d: self
                .blocks
                .iter()
                .map(|b| (0..b.levels()).map(|l| b.density(l)).collect())
                .collect(),
        }
    }

    fn head_params(&self, task: usize) -> usize {
        let k = self.tasks[task].classes;
        k * self.output_width() + k
    }

    fn head_flops(&self, task: usize) -> u64 {
        let k = self.tasks[task].classes as u64;
        2 * k * self.output_width() as u64 + k
    }

    fn check_task(&self, task: usize) -> Result<()> {
        self.classes(task).map(|_| ())
    }

    /// Number of tensors in a parameter set built for this config.
    pub fn tensor_count(&self) -> usize {
        4 * self.blocks.len() + 2 * self.tasks.len()
    }
}

/// All `h^n` structures, lexicographic with block 0 most significant.
pub fn enumerate_structures(h: usize, n: usize, bound: usize) -> Result<Vec<ModelStructure>> {
    let count = (h as u128).saturating_pow(n as u32);
    if count > bound as u128 {
        return Err(Error::Capacity { count, bound });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut levels = vec![0usize; n];
    for _ in 0..count {
        out.push(ModelStructure::new(levels.clone()));
        for i in (0..n).rev() {
            levels[i] += 1;
            if levels[i] < h {
                break;
            }
            levels[i] = 0;
        }
    }
    Ok(out)
}

/// One level per block: the vector `z = (l_1, …, l_n)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelStructure {
    levels: Vec<usize>,
}

impl ModelStructure {
    pub fn new(levels: Vec<usize>) -> Self {
        ModelStructure { levels }
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn validate(&self, h: usize, n: usize) -> Result<()> {
        if self.levels.len() != n {
            return Err(Error::Structure(format!(
                "structure has {} levels but the estimator has {n} blocks",
                self.levels.len()
            )));
        }
        if let Some((i, &l)) = self.levels.iter().enumerate().find(|(_, &l)| l >= h) {
            return Err(Error::Structure(format!("block {i} level {l} outside [0, {h})")));
        }
        Ok(())
    }

    pub fn validate_for(&self, cfg: &EstimatorConfig) -> Result<()> {
        self.validate(cfg.levels(), cfg.block_count())
    }

    /// Componentwise `self ≤ other`.
    pub fn le(&self, other: &ModelStructure) -> bool {
        self.levels.len() == other.levels.len() && self.levels.iter().zip(&other.levels).all(|(a, b)| a <= b)
    }

    /// Uniform draw over all `h^n` structures.
    pub fn uniform<R: Rng + ?Sized>(h: usize, n: usize, rng: &mut R) -> Self {
        ModelStructure::new((0..n).map(|_| rng.random_range(0..h)).collect())
    }
}

/// Canonical encoding: levels joined by `-`, e.g. `2-0-1`.
impl fmt::Display for ModelStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.levels.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

/// `d[i][l]`: fraction of block `i`'s leveled parameters used at level `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityTable {
    pub d: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Densities {
    pub per_block: Vec<f64>,
    pub mean: f64,
}

pub fn density(cfg: &EstimatorConfig, z: &ModelStructure) -> Result<Densities> {
    z.validate_for(cfg)?;
    let per_block: Vec<f64> = cfg.blocks.iter().zip(z.levels()).map(|(b, &l)| b.density(l)).collect();
    let mean = per_block.iter().sum::<f64>() / per_block.len() as f64;
    Ok(Densities { per_block, mean })
}

/// Weights and biases touched by a forward pass under `z` for task `task`.
pub fn param_count(cfg: &EstimatorConfig, z: &ModelStructure, task: usize) -> Result<usize> {
    z.validate_for(cfg)?;
    cfg.check_task(task)?;
    let blocks: usize = cfg.blocks.iter().zip(z.levels()).map(|(b, &l)| b.param_count(l)).sum();
    Ok(blocks + cfg.head_params(task))
}

pub fn flops_count(cfg: &EstimatorConfig, z: &ModelStructure, task: usize) -> Result<u64> {
    z.validate_for(cfg)?;
    cfg.check_task(task)?;
    let blocks: u64 = cfg.blocks.iter().zip(z.levels()).map(|(b, &l)| b.flops(l)).sum();
    Ok(blocks + cfg.head_flops(task))
}

/// Every parameter of the dense network, across blocks and all heads.
pub fn total_param_count(cfg: &EstimatorConfig) -> usize {
    let blocks: usize = cfg.blocks.iter().map(|b| b.param_count(b.levels() - 1)).sum();
    blocks + (0..cfg.task_count()).map(|t| cfg.head_params(t)).sum::<usize>()
}

/// Uniform Xavier initialisation, `U(−a, a)` with `a = √(6 / (fan_in + fan_out))`.
/// Values are rounded to `f32` so checkpoints reproduce them exactly.
pub(crate) fn xavier(rows: usize, cols: usize, rng: &mut DenRng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-a..a) as f32 as f64)
        .collect();
    Tensor::new(vec![rows, cols], data).expect("xavier shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorParams {
    params: ParamSet,
}

pub fn build_estimator(cfg: &EstimatorConfig, seed: u64) -> Result<EstimatorParams> {
    cfg.validate()?;
    let mut rng = derive_rng(seed, &[stream::ESTIMATOR_INIT]);
    let mut params = ParamSet::new();
    for (i, b) in cfg.blocks.iter().enumerate() {
        params.push(format!("estimator.block{i}.w1"), xavier(b.hidden_width, b.input_width, &mut rng));
        params.push(format!("estimator.block{i}.b1"), Tensor::zeros(&[b.hidden_width]));
        params.push(format!("estimator.block{i}.w2"), xavier(b.output_width, b.hidden_width, &mut rng));
        params.push(format!("estimator.block{i}.b2"), Tensor::zeros(&[b.output_width]));
    }
    for (t, task) in cfg.tasks.iter().enumerate() {
        params.push(format!("estimator.head{t}.w"), xavier(task.classes, cfg.output_width(), &mut rng));
        params.push(format!("estimator.head{t}.b"), Tensor::zeros(&[task.classes]));
    }
    Ok(EstimatorParams { params })
}

impl EstimatorParams {
    /// Wraps an existing parameter set after checking names and shapes.
    pub fn from_params(cfg: &EstimatorConfig, params: ParamSet) -> Result<Self> {
        let template = build_estimator(cfg, 0)?;
        check_layout(&template.params, &params)?;
        Ok(EstimatorParams { params })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn block(&self, i: usize) -> [&Tensor; 4] {
        let p = &self.params;
        [p.tensor(4 * i), p.tensor(4 * i + 1), p.tensor(4 * i + 2), p.tensor(4 * i + 3)]
    }

    fn head(&self, cfg: &EstimatorConfig, task: usize) -> [&Tensor; 2] {
        let base = 4 * cfg.block_count() + 2 * task;
        [self.params.tensor(base), self.params.tensor(base + 1)]
    }

    fn check_input(cfg: &EstimatorConfig, x: &[usize], z: Option<&ModelStructure>, task: usize) -> Result<()> {
        cfg.check_task(task)?;
        if let Some(z) = z {
            z.validate_for(cfg)?;
        }
        if x.len() != 2 || x[1] != cfg.input_width() {
            return Err(Error::shape("estimator forward", x, &[cfg.input_width()]));
        }
        Ok(())
    }

    /// Class logits `[b×k]` for a batch `x[b×d]` under structure `z`.
    pub fn forward(&self, cfg: &EstimatorConfig, x: &Tensor, z: &ModelStructure, task: usize) -> Result<Tensor> {
        EstimatorParams::check_input(cfg, x.shape(), Some(z), task)?;
        let mut h = x.clone();
        for (i, (b, &level)) in cfg.blocks.iter().zip(z.levels()).enumerate() {
            let w = b.active_width(level);
            if w == 0 {
                continue;
            }
            let [w1, b1, w2, b2] = self.block(i);
            let hidden = h.matmul_nt(&w1.prefix_rows(w)?)?.add_row(&b1.prefix_rows(w)?)?.relu();
            let mut out = hidden.matmul_nt(&w2.prefix_cols(w)?)?.add_row(b2)?;
            if b.residual {
                out = out.add(&h)?;
            }
            h = out;
        }
        let [hw, hb] = self.head(cfg, task);
        let logits = h.matmul_nt(hw)?.add_row(hb)?;
        logits.ensure_finite("estimator forward")?;
        Ok(logits)
    }

    /// Logits for a single instance.
    pub fn forward_one(&self, cfg: &EstimatorConfig, x: &[f64], z: &ModelStructure, task: usize) -> Result<Tensor> {
        let x = Tensor::new(vec![1, x.len()], x.to_vec())?;
        let logits = self.forward(cfg, &x, z, task)?;
        let k = logits.numel();
        logits.reshape(&[k])
    }

    /// The unmasked backbone: every block at full width, no slicing.
    pub fn forward_dense(&self, cfg: &EstimatorConfig, x: &Tensor, task: usize) -> Result<Tensor> {
        EstimatorParams::check_input(cfg, x.shape(), None, task)?;
        let mut h = x.clone();
        for (i, b) in cfg.blocks.iter().enumerate() {
            let [w1, b1, w2, b2] = self.block(i);
            let hidden = h.matmul_nt(w1)?.add_row(b1)?.relu();
            let mut out = hidden.matmul_nt(w2)?.add_row(b2)?;
            if b.residual {
                out = out.add(&h)?;
            }
            h = out;
        }
        let [hw, hb] = self.head(cfg, task);
        h.matmul_nt(hw)?.add_row(hb)
    }

    /// Masked forward recorded on a tape. `vars` are this parameter set
    /// bound to `g` (see [`ParamSet::bind`]).
    pub fn forward_on(
        cfg: &EstimatorConfig,
        g: &mut Graph,
        vars: &[Var],
        x: Var,
        z: &ModelStructure,
        task: usize,
    ) -> Result<Var> {
        EstimatorParams::check_input(cfg, g.value(x).shape(), Some(z), task)?;
        let mut h = x;
        for (i, (b, &level)) in cfg.blocks.iter().zip(z.levels()).enumerate() {
            let w = b.active_width(level);
            if w == 0 {
                continue;
            }
            let w1 = g.prefix_rows(vars[4 * i], w)?;
            let b1 = g.prefix_rows(vars[4 * i + 1], w)?;
            let w2 = g.prefix_cols(vars[4 * i + 2], w)?;
            let pre = g.matmul_nt(h, w1)?;
            let pre = g.add_row(pre, b1)?;
            let hidden = g.relu(pre)?;
            let out = g.matmul_nt(hidden, w2)?;
            let mut out = g.add_row(out, vars[4 * i + 3])?;
            if b.residual {
                out = g.add(out, h)?;
            }
            h = out;
        }
        let base = 4 * cfg.block_count() + 2 * task;
        let logits = g.matmul_nt(h, vars[base])?;
        g.add_row(logits, vars[base + 1])
    }

    /// Unmasked forward on a tape.
    pub fn forward_dense_on(cfg: &EstimatorConfig, g: &mut Graph, vars: &[Var], x: Var, task: usize) -> Result<Var> {
        EstimatorParams::check_input(cfg, g.value(x).shape(), None, task)?;
        let mut h = x;
        for (i, b) in cfg.blocks.iter().enumerate() {
            let pre = g.matmul_nt(h, vars[4 * i])?;
            let pre = g.add_row(pre, vars[4 * i + 1])?;
            let hidden = g.relu(pre)?;
            let out = g.matmul_nt(hidden, vars[4 * i + 2])?;
            let mut out = g.add_row(out, vars[4 * i + 3])?;
            if b.residual {
                out = g.add(out, h)?;
            }
            h = out;
        }
        let base = 4 * cfg.block_count() + 2 * task;
        let logits = g.matmul_nt(h, vars[base])?;
        g.add_row(logits, vars[base + 1])
    }
}

/// Which parameter entries a forward under `(z, task)` reads.
pub fn touched(cfg: &EstimatorConfig, z: &ModelStructure, task: usize) -> Result<Vec<Touch>> {
    z.validate_for(cfg)?;
    cfg.check_task(task)?;
    let mut out = Vec::with_capacity(cfg.tensor_count());
    for (b, &level) in cfg.blocks.iter().zip(z.levels()) {
        let w = b.active_width(level);
        if w == 0 {
            out.extend([Touch::Frozen, Touch::Frozen, Touch::Frozen, Touch::Frozen]);
            continue;
        }
        let (hid, inp, outw) = (b.hidden_width, b.input_width, b.output_width);
        let w1: Vec<bool> = (0..hid * inp).map(|j| j / inp < w).collect();
        let b1: Vec<bool> = (0..hid).map(|j| j < w).collect();
        let w2: Vec<bool> = (0..outw * hid).map(|j| j % hid < w).collect();
        out.extend([Touch::Mask(w1), Touch::Mask(b1), Touch::Mask(w2), Touch::All]);
    }
    for t in 0..cfg.task_count() {
        let touch = if t == task { Touch::All } else { Touch::Frozen };
        out.extend([touch.clone(), touch]);
    }
    Ok(out)
}

pub(crate) fn check_layout(expected: &ParamSet, actual: &ParamSet) -> Result<()> {
    if expected.len() != actual.len() {
        return Err(Error::Compatibility(format!(
            "expected {} tensors, found {}",
            expected.len(),
            actual.len()
        )));
    }
    for (e, a) in expected.iter().zip(actual.iter()) {
        if e.name != a.name {
            return Err(Error::Compatibility(format!("expected tensor `{}`, found `{}`", e.name, a.name)));
        }
        if e.value.shape() != a.value.shape() {
            return Err(Error::Compatibility(format!(
                "tensor `{}` has shape {:?}, config expects {:?}",
                a.name,
                a.value.shape(),
                e.value.shape()
            )));
        }
    }
    Ok(())
}
