//! Post-hoc analytics over a trained selector: which structures it picks,
//! how confident it is per level, which instances it treats alike, and
//! what the chosen models cost.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{self, EstimatorConfig, EstimatorParams, ModelStructure};
use crate::rng::{derive_rng, stream};
use crate::selector::{sample_structure, SelectorDistribution, SelectorParams};
use crate::tensor::{row_losses, Tensor};

/// How a structure is chosen from `C` at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Deployment {
    /// Per-column argmax, ties to the lower level.
    Argmax,
    /// One draw per instance from a generator seeded with `seed`.
    Sample { seed: u64 },
}

/// `C(x)` for every instance of `dataset`, in order.
pub fn distributions(sel: &SelectorParams, dataset: &Dataset) -> Result<Vec<SelectorDistribution>> {
    if dataset.is_empty() {
        return Ok(Vec::new());
    }
    sel.distribute_batch(&dataset.as_batch()?.x)
}

pub fn deploy(sel: &SelectorParams, dataset: &Dataset, mode: Deployment) -> Result<Vec<ModelStructure>> {
    let dists = distributions(sel, dataset)?;
    Ok(match mode {
        Deployment::Argmax => dists.iter().map(SelectorDistribution::argmax).collect(),
        Deployment::Sample { seed } => {
            let mut rng = derive_rng(seed, &[stream::ANALYSIS, 0]);
            dists.iter().map(|c| sample_structure(c, &mut rng)).collect()
        }
    })
}

/// Occurrence counts keyed by the structure's `l1-l2-…` encoding.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ModelHistogram {
    pub counts: BTreeMap<String, usize>,
}

impl ModelHistogram {
    pub fn from_structures(structures: &[ModelStructure]) -> Self {
        let mut counts = BTreeMap::new();
        for z in structures {
            *counts.entry(z.to_string()).or_insert(0) += 1;
        }
        ModelHistogram { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    /// Most frequent structures first; equal counts in key order.
    pub fn ranked(&self) -> Vec<(String, usize)> {
        let mut v: Vec<(String, usize)> = self.counts.iter().map(|(k, &c)| (k.clone(), c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v
    }
}

pub fn model_histogram(
    sel: &SelectorParams,
    cfg: &EstimatorConfig,
    dataset: &Dataset,
    mode: Deployment,
) -> Result<ModelHistogram> {
    let structures = deploy(sel, dataset, mode)?;
    for z in &structures {
        z.validate_for(cfg)?;
    }
    Ok(ModelHistogram::from_structures(&structures))
}

/// `M[l][i]`: mean of `C_i(l; x)` over the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelProbStats {
    pub mean: Tensor,
}

impl LevelProbStats {
    pub fn column_sums(&self) -> Vec<f64> {
        let (h, n) = (self.mean.shape()[0], self.mean.shape()[1]);
        (0..n).map(|i| (0..h).map(|l| self.mean.data()[l * n + i]).sum()).collect()
    }

    /// Rows as nested vectors, level-major.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        let n = self.mean.shape()[1];
        self.mean.data().chunks(n).map(<[f64]>::to_vec).collect()
    }
}

pub fn mean_level_probability(sel: &SelectorParams, dataset: &Dataset) -> Result<LevelProbStats> {
    if dataset.is_empty() {
        return Err(Error::Contract("mean over an empty dataset".into()));
    }
    let dists = distributions(sel, dataset)?;
    let cfg = sel.config();
    let mut acc = Tensor::zeros(&[cfg.levels, cfg.blocks]);
    for c in &dists {
        acc = acc.add(c.probs())?;
    }
    Ok(LevelProbStats {
        mean: acc.scale(1.0 / dists.len() as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// The `k` instances whose `C` is closest to the query's in Euclidean
/// distance over the flattened matrices; ties go to the lower index.
pub fn nearest_by_distribution(sel: &SelectorParams, query: &[f64], dataset: &Dataset, k: usize) -> Result<Vec<Neighbor>> {
    if k > dataset.len() {
        return Err(Error::Contract(format!("k = {k} exceeds dataset size {}", dataset.len())));
    }
    let q = sel.distribute(query)?;
    let dists = distributions(sel, dataset)?;
    let mut ranked: Vec<Neighbor> = dists
        .iter()
        .enumerate()
        .map(|(index, c)| {
            let d2: f64 = c.probs().data().iter().zip(q.probs().data()).map(|(a, b)| (a - b).powi(2)).sum();
            Neighbor {
                index,
                distance: d2.sqrt(),
            }
        })
        .collect();
    ranked.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
    ranked.truncate(k);
    Ok(ranked)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostReport {
    pub mean_flops: f64,
    pub mean_params: f64,
    pub mean_density: f64,
}

/// Mean cost of running instance `r` under `structures[r]`.
pub fn structure_cost(cfg: &EstimatorConfig, dataset: &Dataset, structures: &[ModelStructure]) -> Result<CostReport> {
    if structures.len() != dataset.len() || structures.is_empty() {
        return Err(Error::Length(format!(
            "{} structures for {} instances",
            structures.len(),
            dataset.len()
        )));
    }
    let (mut flops, mut params, mut dens) = (0.0, 0.0, 0.0);
    for (s, z) in dataset.samples().iter().zip(structures) {
        flops += estimator::flops_count(cfg, z, s.t)? as f64;
        params += estimator::param_count(cfg, z, s.t)? as f64;
        dens += estimator::density(cfg, z)?.mean;
    }
    let n = structures.len() as f64;
    Ok(CostReport {
        mean_flops: flops / n,
        mean_params: params / n,
        mean_density: dens / n,
    })
}

/// Cost under argmax deployment.
pub fn average_cost(sel: &SelectorParams, cfg: &EstimatorConfig, dataset: &Dataset) -> Result<CostReport> {
    structure_cost(cfg, dataset, &deploy(sel, dataset, Deployment::Argmax)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskEval {
    pub task: usize,
    pub count: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub cost: CostReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskEval>,
    pub loss: f64,
    pub accuracy: f64,
    pub cost: CostReport,
}

fn predicted(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn report(cfg: &EstimatorConfig, dataset: &Dataset, structures: &[ModelStructure], losses: &[f64], correct: &[bool]) -> Result<EvalReport> {
    let mut tasks = Vec::new();
    for t in 0..cfg.task_count() {
        let rows = dataset.task_indices(t);
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        let own: Vec<ModelStructure> = rows.iter().map(|&r| structures[r].clone()).collect();
        tasks.push(TaskEval {
            task: t,
            count: rows.len(),
            loss: rows.iter().map(|&r| losses[r]).sum::<f64>() / n,
            accuracy: rows.iter().filter(|&&r| correct[r]).count() as f64 / n,
            cost: structure_cost(cfg, &dataset.task_subset(t), &own)?,
        });
    }
    let n = dataset.len() as f64;
    Ok(EvalReport {
        tasks,
        loss: losses.iter().sum::<f64>() / n,
        accuracy: correct.iter().filter(|&&c| c).count() as f64 / n,
        cost: structure_cost(cfg, dataset, structures)?,
    })
}

/// Loss and accuracy with instance `r` run under `structures[r]`.
pub fn evaluate(est: &EstimatorParams, cfg: &EstimatorConfig, dataset: &Dataset, structures: &[ModelStructure]) -> Result<EvalReport> {
    if structures.len() != dataset.len() || dataset.is_empty() {
        return Err(Error::Length(format!(
            "{} structures for {} instances",
            structures.len(),
            dataset.len()
        )));
    }
    let mut groups: BTreeMap<(Vec<usize>, usize), Vec<usize>> = BTreeMap::new();
    for (r, (s, z)) in dataset.samples().iter().zip(structures).enumerate() {
        groups.entry((z.levels().to_vec(), s.t)).or_default().push(r);
    }
    let mut losses = vec![0.0; dataset.len()];
    let mut correct = vec![false; dataset.len()];
    for ((levels, task), rows) in groups {
        let batch = dataset.batch(&rows)?;
        let logits = est.forward(cfg, &batch.x, &ModelStructure::new(levels), task)?;
        for ((&r, loss), (p, &y)) in rows
            .iter()
            .zip(row_losses(&logits, &batch.labels)?)
            .zip(predicted(&logits).into_iter().zip(&batch.labels))
        {
            losses[r] = loss;
            correct[r] = p == y;
        }
    }
    report(cfg, dataset, structures, &losses, &correct)
}

/// Evaluation of the unmasked backbone.
pub fn evaluate_dense(est: &EstimatorParams, cfg: &EstimatorConfig, dataset: &Dataset) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Contract("evaluation on an empty dataset".into()));
    }
    let mut losses = vec![0.0; dataset.len()];
    let mut correct = vec![false; dataset.len()];
    for t in 0..cfg.task_count() {
        let rows = dataset.task_indices(t);
        if rows.is_empty() {
            continue;
        }
        let batch = dataset.batch(&rows)?;
        let logits = est.forward_dense(cfg, &batch.x, t)?;
        for ((&r, loss), (p, &y)) in rows
            .iter()
            .zip(row_losses(&logits, &batch.labels)?)
            .zip(predicted(&logits).into_iter().zip(&batch.labels))
        {
            losses[r] = loss;
            correct[r] = p == y;
        }
    }
    let full = vec![cfg.full_structure(); dataset.len()];
    report(cfg, dataset, &full, &losses, &correct)
}

/// `F[l][i]`: fraction of `structures` choosing level `l` in block `i`.
pub fn level_frequencies(h: usize, n: usize, structures: &[ModelStructure]) -> Result<Tensor> {
    if structures.is_empty() {
        return Err(Error::Contract("no structures to count".into()));
    }
    let mut f = vec![0.0; h * n];
    for z in structures {
        z.validate(h, n)?;
        for (i, &l) in z.levels().iter().enumerate() {
            f[l * n + i] += 1.0;
        }
    }
    let total = structures.len() as f64;
    Tensor::new(vec![h, n], f.into_iter().map(|c| c / total).collect())
}

/// An input-blind selector matched to `reference`: each block's level is
/// drawn independently from that block's empirical level frequencies in
/// `reference`, so the expected mean density is the same.
pub fn matched_random_structures(reference: &[ModelStructure], h: usize, count: usize, seed: u64) -> Result<Vec<ModelStructure>> {
    let n = reference.first().map_or(0, ModelStructure::len);
    let marginals = SelectorDistribution::from_probs(level_frequencies(h, n, reference)?)?;
    let mut rng = derive_rng(seed, &[stream::ANALYSIS, 1]);
    Ok((0..count).map(|_| sample_structure(&marginals, &mut rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskSample;
    use crate::estimator::{build_estimator, BlockConfig, TaskConfig};
    use crate::rng::DenRng;
    use crate::selector::build_selector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn dataset(width: usize, rows: usize, seed: u64) -> Dataset {
        let mut rng = DenRng::seed_from_u64(seed);
        let samples = (0..rows)
            .map(|i| TaskSample {
                x: (0..width).map(|_| rng.random_range(-2.0..2.0)).collect(),
                y: i % 2,
                t: 0,
            })
            .collect();
        Dataset::new(width, samples, &[2]).unwrap()
    }

    fn cfg() -> EstimatorConfig {
        EstimatorConfig::uniform_residual(3, 2, vec![2, 2], &[2]).unwrap()
    }

    #[test]
    fn zero_selector_gives_a_single_bar_and_uniform_means() {
        let mut sel = build_selector(3, 5, 3, 2, 0).unwrap();
        sel.zero();
        let d = dataset(3, 40, 1);
        let hist = model_histogram(&sel, &cfg(), &d, Deployment::Argmax).unwrap();
        assert_eq!(hist.distinct(), 1);
        assert_eq!(hist.counts.get("0-0"), Some(&40));
        let stats = mean_level_probability(&sel, &d).unwrap();
        assert!(stats.mean.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn histogram_counts_sum_to_dataset_size() {
        let sel = build_selector(3, 5, 3, 2, 4).unwrap();
        let d = dataset(3, 57, 2);
        for mode in [Deployment::Argmax, Deployment::Sample { seed: 3 }] {
            assert_eq!(model_histogram(&sel, &cfg(), &d, mode).unwrap().total(), 57);
        }
    }

    #[test]
    fn sampled_histogram_is_seeded() {
        let sel = build_selector(3, 5, 3, 2, 4).unwrap();
        let d = dataset(3, 30, 2);
        let a = model_histogram(&sel, &cfg(), &d, Deployment::Sample { seed: 9 }).unwrap();
        assert_eq!(a, model_histogram(&sel, &cfg(), &d, Deployment::Sample { seed: 9 }).unwrap());
    }

    #[test]
    fn level_means_are_column_stochastic_and_exact_for_one_instance() {
        let sel = build_selector(3, 6, 3, 4, 5).unwrap();
        let d = dataset(3, 25, 3);
        let stats = mean_level_probability(&sel, &d).unwrap();
        assert!(stats.column_sums().iter().all(|s| (s - 1.0).abs() < 1e-6));
        let one = dataset(3, 1, 4);
        let single = mean_level_probability(&sel, &one).unwrap();
        assert_eq!(&single.mean, sel.distribute(&one.get(0).x).unwrap().probs());
    }

    #[test]
    fn query_in_dataset_ranks_first_and_distances_increase() {
        let sel = build_selector(3, 6, 3, 4, 6).unwrap();
        let d = dataset(3, 30, 5);
        let nn = nearest_by_distribution(&sel, &d.get(17).x, &d, 10).unwrap();
        assert_eq!(nn[0].index, 17);
        assert_eq!(nn[0].distance, 0.0);
        assert!(nn.windows(2).all(|w| w[0].distance <= w[1].distance));
        assert!(nearest_by_distribution(&sel, &d.get(0).x, &d, 31).is_err());
    }

    #[test]
    fn neighbors_share_the_query_cluster() {
        // Hidden unit 0 fires on the right cluster, unit 1 on the left; the
        // output layer maps them to opposite ends of the level range.
        let mut sel = build_selector(2, 2, 3, 3, 0).unwrap();
        let p = sel.params_mut();
        *p.tensor_mut(0) = Tensor::from_rows(&[&[1.0, 0.0], &[-1.0, 0.0]]).unwrap();
        let mut w2 = vec![0.0; 9 * 2];
        for i in 0..3 {
            w2[(2 * 3 + i) * 2] = 2.0; // level 2 ← right
            w2[i * 2 + 1] = 2.0; // level 0 ← left
        }
        *p.tensor_mut(2) = Tensor::new(vec![9, 2], w2).unwrap();
        let mut rng = DenRng::seed_from_u64(7);
        let samples: Vec<TaskSample> = (0..200)
            .map(|i| {
                let cx = if i % 2 == 0 { 2.0 } else { -2.0 };
                TaskSample {
                    x: vec![cx + rng.random_range(-0.7..0.7), rng.random_range(-1.0..1.0)],
                    y: i % 2,
                    t: 0,
                }
            })
            .collect();
        let d = Dataset::new(2, samples, &[2]).unwrap();
        let (mut same, mut total) = (0, 0);
        for q in 0..20 {
            for nb in nearest_by_distribution(&sel, &d.get(q).x, &d, 10).unwrap() {
                total += 1;
                if nb.index % 2 == q % 2 {
                    same += 1;
                }
            }
        }
        assert!(same as f64 >= 0.8 * total as f64, "{same}/{total}");
    }

    #[test]
    fn selector_pinned_to_full_costs_the_dense_model() {
        let c = cfg();
        let mut sel = build_selector(3, 4, 3, 2, 0).unwrap();
        sel.zero();
        let mut b2 = vec![0.0; 6];
        b2[4] = 100.0;
        b2[5] = 100.0;
        *sel.params_mut().tensor_mut(3) = Tensor::vector(b2).unwrap();
        let d = dataset(3, 10, 8);
        let cost = average_cost(&sel, &c, &d).unwrap();
        let full = c.full_structure();
        assert_eq!(cost.mean_flops, estimator::flops_count(&c, &full, 0).unwrap() as f64);
        assert_eq!(cost.mean_params, estimator::param_count(&c, &full, 0).unwrap() as f64);
        assert_eq!(cost.mean_density, 1.0);
    }

    #[test]
    fn mean_density_is_a_fraction() {
        let sel = build_selector(3, 4, 3, 2, 11).unwrap();
        let cost = average_cost(&sel, &cfg(), &dataset(3, 40, 9)).unwrap();
        assert!((0.0..=1.0).contains(&cost.mean_density));
    }

    #[test]
    fn full_structure_evaluation_matches_dense() {
        let c = EstimatorConfig::new(
            vec![BlockConfig::residual(3, vec![2, 1]), BlockConfig::plain(3, 4, vec![1, 2, 1])],
            vec![TaskConfig { input_width: 3, classes: 2 }],
        )
        .unwrap();
        let est = build_estimator(&c, 2).unwrap();
        let d = dataset(3, 33, 10);
        let full = vec![c.full_structure(); d.len()];
        assert_eq!(evaluate(&est, &c, &d, &full).unwrap(), evaluate_dense(&est, &c, &d).unwrap());
    }

    #[test]
    fn matched_random_selector_reproduces_marginals() {
        let mut rng = DenRng::seed_from_u64(3);
        let reference: Vec<ModelStructure> = (0..500)
            .map(|_| ModelStructure::new(vec![rng.random_range(0..2), 2, rng.random_range(0..3)]))
            .collect();
        let fake = matched_random_structures(&reference, 3, 40_000, 1).unwrap();
        let (a, b) = (level_frequencies(3, 3, &reference).unwrap(), level_frequencies(3, 3, &fake).unwrap());
        for (p, q) in a.data().iter().zip(b.data()) {
            let se = (p * (1.0 - p) / 40_000.0).sqrt();
            assert!((p - q).abs() <= 4.0 * se + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn argmax_survives_monotone_rescaling(raw in proptest::collection::vec(0.01f64..1.0, 12), power in 0.2f64..5.0) {
            let normalize = |v: Vec<f64>| {
                let mut out = v.clone();
                for i in 0..4 {
                    let s: f64 = (0..3).map(|l| v[l * 4 + i]).sum();
                    for l in 0..3 {
                        out[l * 4 + i] = v[l * 4 + i] / s;
                    }
                }
                SelectorDistribution::from_probs(Tensor::new(vec![3, 4], out).unwrap()).unwrap()
            };
            let c = normalize(raw.clone());
            let bent = normalize(c.probs().data().iter().map(|p| p.powf(power)).collect());
            prop_assert_eq!(c.argmax(), bent.argmax());
        }
    }
}
