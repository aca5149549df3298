//! The selector: a two-layer network mapping an instance to an `h×n` matrix
//! whose column `i` is a categorical distribution over the levels of block
//! `i`. The probability of a whole structure is the product of its chosen
//! entries, one per column.

use rand::Rng;

use crate::error::{Error, Result};
use crate::estimator::{xavier, ModelStructure};
use crate::params::ParamSet;
use crate::rng::{derive_rng, stream};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectorConfig {
    pub input_width: usize,
    pub hidden_width: usize,
    pub levels: usize,
    pub blocks: usize,
}

impl SelectorConfig {
    pub fn param_count(&self) -> usize {
        let out = self.levels * self.blocks;
        self.input_width * self.hidden_width + self.hidden_width + self.hidden_width * out + out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorParams {
    config: SelectorConfig,
    params: ParamSet,
}

pub fn build_selector(
    input_width: usize,
    hidden_width: usize,
    levels: usize,
    blocks: usize,
    seed: u64,
) -> Result<SelectorParams> {
    let config = SelectorConfig {
        input_width,
        hidden_width,
        levels,
        blocks,
    };
    if [input_width, hidden_width, levels, blocks].contains(&0) {
        return Err(Error::Config(format!("selector dimensions must be positive: {config:?}")));
    }
    let mut rng = derive_rng(seed, &[stream::SELECTOR_INIT]);
    let out = levels * blocks;
    let mut params = ParamSet::new();
    params.push("selector.w1", xavier(hidden_width, input_width, &mut rng));
    params.push("selector.b1", Tensor::zeros(&[hidden_width]));
    params.push("selector.w2", xavier(out, hidden_width, &mut rng));
    params.push("selector.b2", Tensor::zeros(&[out]));
    Ok(SelectorParams { config, params })
}

impl SelectorParams {
    pub fn from_params(config: SelectorConfig, params: ParamSet) -> Result<Self> {
        let template = build_selector(config.input_width, config.hidden_width, config.levels, config.blocks, 0)?;
        crate::estimator::check_layout(&template.params, &params)?;
        Ok(SelectorParams { config, params })
    }

    pub fn config(&self) -> SelectorConfig {
        self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Sets every weight and bias to zero, which makes every column uniform.
    pub fn zero(&mut self) {
        for i in 0..self.params.len() {
            let shape = self.params.tensor(i).shape().to_vec();
            *self.params.tensor_mut(i) = Tensor::zeros(&shape);
        }
    }

    fn check_width(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, d] if *d == self.config.input_width => Ok(()),
            _ => Err(Error::shape("selector input", shape, &[self.config.input_width])),
        }
    }

    /// Raw logits `[b × h·n]`.
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_width(x.shape())?;
        let p = &self.params;
        let hidden = x.matmul_nt(p.tensor(0))?.add_row(p.tensor(1))?.relu();
        hidden.matmul_nt(p.tensor(2))?.add_row(p.tensor(3))
    }

    /// `C = g(x)` for one instance.
    pub fn distribute(&self, x: &[f64]) -> Result<SelectorDistribution> {
        let x = Tensor::new(vec![1, x.len()], x.to_vec())?;
        Ok(self.distribute_batch(&x)?.remove(0))
    }

    /// One distribution per row of `x[b×d]`.
    pub fn distribute_batch(&self, x: &Tensor) -> Result<Vec<SelectorDistribution>> {
        let (h, n) = (self.config.levels, self.config.blocks);
        let logits = self.logits(x)?;
        let b = x.shape()[0];
        let log_probs = logits.reshape(&[b, h, n])?.column_log_softmax()?;
        log_probs
            .data()
            .chunks(h * n)
            .map(|chunk| SelectorDistribution::from_log_probs(Tensor::new(vec![h, n], chunk.to_vec())?))
            .collect()
    }

    /// Column log-probabilities `[b×h×n]` recorded on a tape; `vars` are the
    /// selector parameters bound to `g`.
    pub fn log_distribution_on(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        self.check_width(g.value(x).shape())?;
        let b = g.value(x).shape()[0];
        let hidden = g.matmul_nt(x, vars[0])?;
        let hidden = g.add_row(hidden, vars[1])?;
        let hidden = g.relu(hidden)?;
        let logits = g.matmul_nt(hidden, vars[2])?;
        let logits = g.add_row(logits, vars[3])?;
        let logits = g.reshape(logits, &[b, self.config.levels, self.config.blocks])?;
        g.column_log_softmax(logits)
    }
}

/// The column-stochastic matrix `C[h×n]` for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorDistribution {
    probs: Tensor,
    log_probs: Tensor,
}

impl SelectorDistribution {
    fn from_log_probs(log_probs: Tensor) -> Result<Self> {
        Ok(SelectorDistribution {
            probs: log_probs.map(f64::exp),
            log_probs,
        })
    }

    /// Builds a distribution from explicit probabilities. Each column must
    /// sum to one within `1e-6`; zero entries are allowed.
    pub fn from_probs(probs: Tensor) -> Result<Self> {
        let (h, n) = match probs.shape() {
            [h, n] => (*h, *n),
            s => return Err(Error::shape("selector distribution", s, &[])),
        };
        for i in 0..n {
            let mut total = 0.0;
            for l in 0..h {
                let p = probs.data()[l * n + i];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Numeric(format!("probability {p} outside [0, 1] in column {i}")));
                }
                total += p;
            }
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::Numeric(format!("column {i} sums to {total}")));
            }
        }
        let log_probs = probs.map(f64::ln);
        Ok(SelectorDistribution { probs, log_probs })
    }

    pub fn uniform(h: usize, n: usize) -> Self {
        SelectorDistribution::from_probs(Tensor::full(&[h, n], 1.0 / h as f64)).expect("uniform columns")
    }

    pub fn levels(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn blocks(&self) -> usize {
        self.probs.shape()[1]
    }

    /// `C_i(l)`: probability of level `l` in block `i`.
    pub fn prob(&self, level: usize, block: usize) -> f64 {
        self.probs.data()[level * self.blocks() + block]
    }

    pub fn log_prob(&self, level: usize, block: usize) -> f64 {
        self.log_probs.data()[level * self.blocks() + block]
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    /// Per-column argmax; ties go to the lower (cheaper) level.
    pub fn argmax(&self) -> ModelStructure {
        let (h, n) = (self.levels(), self.blocks());
        ModelStructure::new(
            (0..n)
                .map(|i| {
                    let mut best = 0;
                    for l in 1..h {
                        if self.prob(l, i) > self.prob(best, i) {
                            best = l;
                        }
                    }
                    best
                })
                .collect(),
        )
    }
}

/// `log P(z; x) = Σ_i log C_i(l_i; x)`.
pub fn log_model_probability(c: &SelectorDistribution, z: &ModelStructure) -> Result<f64> {
    z.validate(c.levels(), c.blocks())?;
    Ok(z.levels().iter().enumerate().map(|(i, &l)| c.log_prob(l, i)).sum())
}

/// `P(z; x) = ∏_i C_i(l_i; x)`, accumulated in log space.
pub fn model_probability(c: &SelectorDistribution, z: &ModelStructure) -> Result<f64> {
    Ok(log_model_probability(c, z)?.exp())
}

/// Independent categorical draw per column.
pub fn sample_structure<R: Rng + ?Sized>(c: &SelectorDistribution, rng: &mut R) -> ModelStructure {
    let (h, n) = (c.levels(), c.blocks());
    ModelStructure::new(
        (0..n)
            .map(|i| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for l in 0..h {
                    acc += c.prob(l, i);
                    if u < acc {
                        return l;
                    }
                }
                // Rounding can leave the cumulative sum just under 1.
                (0..h).rev().find(|&l| c.prob(l, i) > 0.0).unwrap_or(h - 1)
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::enumerate_structures;
    use crate::rng::DenRng;
    use rand::SeedableRng;

    fn random_input(width: usize, rng: &mut DenRng) -> Vec<f64> {
        (0..width).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn build_is_deterministic_and_counts_match() {
        let a = build_selector(5, 7, 3, 4, 9).unwrap();
        assert_eq!(a, build_selector(5, 7, 3, 4, 9).unwrap());
        assert_eq!(a.params().scalar_count(), 5 * 7 + 7 + 7 * 12 + 12);
        assert_eq!(a.config().param_count(), a.params().scalar_count());
    }

    #[test]
    fn zero_weights_give_uniform_columns() {
        let mut s = build_selector(3, 4, 3, 2, 0).unwrap();
        s.zero();
        let c = s.distribute(&[1.0, -2.0, 0.5]).unwrap();
        assert!(c.probs().data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn columns_sum_to_one() {
        let mut rng = DenRng::seed_from_u64(1);
        for seed in 0..20 {
            let s = build_selector(4, 8, 3, 5, seed).unwrap();
            let c = s.distribute(&random_input(4, &mut rng)).unwrap();
            for i in 0..5 {
                let total: f64 = (0..3).map(|l| c.prob(l, i)).sum();
                assert!((total - 1.0).abs() < 1e-9);
                assert!((0..3).all(|l| c.prob(l, i) > 0.0 && c.prob(l, i) < 1.0));
            }
        }
    }

    #[test]
    fn distinct_inputs_give_distinct_distributions() {
        let mut rng = DenRng::seed_from_u64(2);
        let s = build_selector(4, 16, 2, 3, 5).unwrap();
        let distinct = (0..100)
            .filter(|_| {
                let a = s.distribute(&random_input(4, &mut rng)).unwrap();
                let b = s.distribute(&random_input(4, &mut rng)).unwrap();
                a != b
            })
            .count();
        assert!(distinct >= 99);
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let s = build_selector(4, 8, 2, 2, 0).unwrap();
        assert!(matches!(s.distribute(&[1.0, 2.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn uniform_model_probability() {
        let c = SelectorDistribution::uniform(2, 3);
        for z in enumerate_structures(2, 3, 100).unwrap() {
            assert!((model_probability(&c, &z).unwrap() - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_column_suppresses_other_levels() {
        let s = {
            let mut s = build_selector(1, 1, 2, 2, 0).unwrap();
            s.zero();
            // Bias +50 on (level 1, block 0) saturates column 0.
            s.params_mut().tensor_mut(3).data_mut()[2] = 50.0;
            s
        };
        let c = s.distribute(&[0.0]).unwrap();
        let p = model_probability(&c, &ModelStructure::new(vec![0, 0])).unwrap();
        assert!(p <= 1e-6);
    }

    #[test]
    fn enumerated_probabilities_sum_to_one() {
        let mut rng = DenRng::seed_from_u64(3);
        let s = build_selector(3, 6, 3, 4, 1).unwrap();
        let c = s.distribute(&random_input(3, &mut rng)).unwrap();
        let all = enumerate_structures(3, 4, 81).unwrap();
        let total: f64 = all.iter().map(|z| model_probability(&c, z).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9, "{total}");
        for z in &all {
            let direct: f64 = z.levels().iter().enumerate().map(|(i, &l)| c.prob(l, i)).product();
            let p = model_probability(&c, z).unwrap();
            assert!((p - direct).abs() <= 1e-12 * direct);
        }
    }

    #[test]
    fn one_hot_columns_always_sample_the_same_structure() {
        let probs = Tensor::from_rows(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 1.0]]).unwrap();
        let c = SelectorDistribution::from_probs(probs).unwrap();
        let mut rng = DenRng::seed_from_u64(4);
        for _ in 0..1000 {
            assert_eq!(sample_structure(&c, &mut rng).levels(), &[1, 0, 1]);
        }
    }

    #[test]
    fn uniform_single_column_frequency() {
        let c = SelectorDistribution::uniform(2, 1);
        let mut rng = DenRng::seed_from_u64(5);
        let draws = 100_000;
        let zeros = (0..draws).filter(|_| sample_structure(&c, &mut rng).levels()[0] == 0).count();
        let freq = zeros as f64 / draws as f64;
        assert!((freq - 0.5).abs() < 0.01, "{freq}");
    }

    #[test]
    fn joint_frequencies_match_model_probability() {
        let probs = Tensor::from_rows(&[&[0.3, 0.8], &[0.7, 0.2]]).unwrap();
        let c = SelectorDistribution::from_probs(probs).unwrap();
        let mut rng = DenRng::seed_from_u64(6);
        let draws = 100_000usize;
        let all = enumerate_structures(2, 2, 4).unwrap();
        let mut counts = vec![0usize; 4];
        for _ in 0..draws {
            let z = sample_structure(&c, &mut rng);
            counts[all.iter().position(|a| *a == z).unwrap()] += 1;
        }
        for (z, &count) in all.iter().zip(&counts) {
            let p = model_probability(&c, z).unwrap();
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            let freq = count as f64 / draws as f64;
            assert!((freq - p).abs() < 3.0 * se, "{z}: {freq} vs {p}");
        }
    }

    #[test]
    fn marginals_pass_chi_square() {
        // 99% critical value of chi-square with 2 degrees of freedom.
        const CRITICAL: f64 = 9.210;
        let probs = Tensor::from_rows(&[&[0.2, 0.5], &[0.3, 0.25], &[0.5, 0.25]]).unwrap();
        let c = SelectorDistribution::from_probs(probs).unwrap();
        let mut rng = DenRng::seed_from_u64(7);
        let draws = 100_000usize;
        let mut counts = vec![[0usize; 3]; 2];
        for _ in 0..draws {
            let z = sample_structure(&c, &mut rng);
            for (i, &l) in z.levels().iter().enumerate() {
                counts[i][l] += 1;
            }
        }
        for (i, col) in counts.iter().enumerate() {
            let chi: f64 = (0..3)
                .map(|l| {
                    let e = c.prob(l, i) * draws as f64;
                    (col[l] as f64 - e).powi(2) / e
                })
                .sum();
            assert!(chi < CRITICAL, "block {i}: chi-square {chi}");
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_lower_level() {
        assert_eq!(SelectorDistribution::uniform(3, 2).argmax().levels(), &[0, 0]);
        let probs = Tensor::from_rows(&[&[0.2, 0.5], &[0.8, 0.5]]).unwrap();
        let c = SelectorDistribution::from_probs(probs).unwrap();
        assert_eq!(c.argmax().levels(), &[1, 0]);
    }

    #[test]
    fn tape_distribution_matches_eager() {
        let s = build_selector(3, 5, 2, 4, 3).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.2, -0.3]).unwrap();
        let eager = s.distribute_batch(&x).unwrap();
        let mut g = Graph::new();
        let vars = s.params().bind(&mut g);
        let xv = g.leaf(x);
        let lp = s.log_distribution_on(&mut g, &vars, xv).unwrap();
        let lp = g.value(lp);
        for (b, c) in eager.iter().enumerate() {
            assert_eq!(&lp.data()[b * 8..(b + 1) * 8], c.log_probs.data());
        }
    }
}
