//! Gaussian-cluster classification tasks on a shared two-dimensional layout.
//!
//! Every task uses the same cluster centers in a latent plane. Task `t`
//! rotates that plane by `t · rotation` radians and shifts it by
//! `task_separation` along a task-specific random direction before it is
//! embedded into `input_width` dimensions. Class `k` owns
//! `clusters_per_class` clusters, drawn uniformly from `[−1, 1]²`. With a
//! positive `home_radius`, the first cluster of class `k` moves out to
//! radius `home_radius` at angle `2πk / classes`; those instances are
//! linearly separable while the rest stay tangled. With `graded_tasks`,
//! task `t` of `T` only uses the first `1 + round(t·(c−1)/(T−1))` clusters
//! of each class, so later tasks are harder.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Suite, TaskSample};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, stream, DenRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Omitted fields take their values from `SyntheticSpec::default()`, which
/// is the shipped three-task suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub tasks: usize,
    pub classes: usize,
    pub input_width: usize,
    pub clusters_per_class: usize,
    pub cluster_spread: f64,
    /// Radians of latent-plane rotation between consecutive tasks.
    pub rotation: f64,
    pub task_separation: f64,
    pub home_radius: f64,
    pub graded_tasks: bool,
    /// Samples per task in each split.
    pub samples: SplitSizes,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            tasks: 3,
            classes: 4,
            input_width: 8,
            clusters_per_class: 5,
            cluster_spread: 0.1,
            rotation: 0.6,
            task_separation: 1.0,
            home_radius: 1.8,
            graded_tasks: true,
            samples: SplitSizes {
                train: 1200,
                val: 300,
                test: 600,
            },
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tasks", self.tasks),
            ("classes", self.classes),
            ("clusters_per_class", self.clusters_per_class),
            ("samples.train", self.samples.train),
            ("samples.val", self.samples.val),
            ("samples.test", self.samples.test),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::validation(format!("data.synthetic.{key}"), "must be positive"));
            }
        }
        if self.classes < 2 {
            return Err(Error::validation("data.synthetic.classes", "need at least 2 classes"));
        }
        if self.input_width < 2 {
            return Err(Error::validation("data.synthetic.input_width", "need at least 2 dimensions"));
        }
        if !(self.cluster_spread > 0.0) || !self.cluster_spread.is_finite() {
            return Err(Error::validation("data.synthetic.cluster_spread", "must be positive"));
        }
        if !self.rotation.is_finite() {
            return Err(Error::validation("data.synthetic.rotation", "must be finite"));
        }
        if !(self.task_separation >= 0.0) || !self.task_separation.is_finite() {
            return Err(Error::validation("data.synthetic.task_separation", "must be a finite value ≥ 0"));
        }
        if !(self.home_radius >= 0.0) || !self.home_radius.is_finite() {
            return Err(Error::validation("data.synthetic.home_radius", "must be a finite value ≥ 0"));
        }
        Ok(())
    }
}

struct Layout {
    centers: Vec<[f64; 2]>,
    /// Two orthonormal columns of the `input_width × 2` embedding.
    basis: [Vec<f64>; 2],
    offsets: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut DenRng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn layout(spec: &SyntheticSpec) -> Layout {
    let mut rng = derive_rng(spec.seed, &[stream::DATA, 0]);
    let d = spec.input_width;
    let mut centers: Vec<[f64; 2]> = (0..spec.classes * spec.clusters_per_class)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    if spec.home_radius > 0.0 {
        for (k, c) in centers.iter_mut().take(spec.classes).enumerate() {
            let (sin, cos) = (std::f64::consts::TAU * k as f64 / spec.classes as f64).sin_cos();
            *c = [spec.home_radius * cos, spec.home_radius * sin];
        }
    }
    let e0 = unit((0..d).map(|_| gaussian(&mut rng)).collect());
    let raw: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
    let proj: f64 = raw.iter().zip(&e0).map(|(a, b)| a * b).sum();
    let e1 = unit(raw.iter().zip(&e0).map(|(a, b)| a - proj * b).collect());
    let offsets = (0..spec.tasks)
        .map(|_| {
            unit((0..d).map(|_| gaussian(&mut rng)).collect())
                .into_iter()
                .map(|v| v * spec.task_separation)
                .collect()
        })
        .collect();
    Layout {
        centers,
        basis: [e0, e1],
        offsets,
    }
}

/// Clusters per class available to `task`.
fn task_clusters(spec: &SyntheticSpec, task: usize) -> usize {
    if !spec.graded_tasks || spec.tasks == 1 {
        return spec.clusters_per_class;
    }
    let extra = (task * (spec.clusters_per_class - 1)) as f64 / (spec.tasks - 1) as f64;
    1 + extra.round() as usize
}

fn generate(spec: &SyntheticSpec, layout: &Layout, task: usize, split: u64, count: usize) -> Vec<TaskSample> {
    let mut rng = derive_rng(spec.seed, &[stream::DATA, 1, task as u64, split]);
    let angle = task as f64 * spec.rotation;
    let (sin, cos) = angle.sin_cos();
    let clusters = task_clusters(spec, task);
    (0..count)
        .map(|_| {
            let y = rng.random_range(0..spec.classes);
            let cluster = y + spec.classes * rng.random_range(0..clusters);
            let c = layout.centers[cluster];
            let u = c[0] + spec.cluster_spread * gaussian(&mut rng);
            let v = c[1] + spec.cluster_spread * gaussian(&mut rng);
            let (ru, rv) = (cos * u - sin * v, sin * u + cos * v);
            let x = (0..spec.input_width)
                .map(|j| ru * layout.basis[0][j] + rv * layout.basis[1][j] + layout.offsets[task][j])
                .collect();
            TaskSample { x, y, t: task }
        })
        .collect()
}

/// Train/validation/test splits for every task, a pure function of `spec`.
pub fn gen_synthetic_tasks(spec: &SyntheticSpec) -> Result<Suite> {
    spec.validate()?;
    let layout = layout(spec);
    let classes = vec![spec.classes; spec.tasks];
    let split = |id: u64, count: usize| -> Result<Dataset> {
        let samples = (0..spec.tasks).flat_map(|t| generate(spec, &layout, t, id, count)).collect();
        Dataset::new(spec.input_width, samples, &classes)
    };
    Ok(Suite {
        train: split(0, spec.samples.train)?,
        val: split(1, spec.samples.val)?,
        test: split(2, spec.samples.test)?,
        classes: classes.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let spec = SyntheticSpec::default();
        assert_eq!(gen_synthetic_tasks(&spec).unwrap(), gen_synthetic_tasks(&spec).unwrap());
        let other = SyntheticSpec { seed: 1, ..spec.clone() };
        assert_ne!(gen_synthetic_tasks(&spec).unwrap(), gen_synthetic_tasks(&other).unwrap());
    }

    #[test]
    fn sizes_and_labels() {
        let spec = SyntheticSpec::default();
        let suite = gen_synthetic_tasks(&spec).unwrap();
        assert_eq!(suite.train.len(), spec.tasks * spec.samples.train);
        assert_eq!(suite.test.task_indices(2).len(), spec.samples.test);
        assert!(suite.train.samples().iter().all(|s| s.y < spec.classes && s.x.len() == spec.input_width));
    }

    #[test]
    fn unrotated_unshifted_tasks_are_identically_distributed() {
        let spec = SyntheticSpec {
            rotation: 0.0,
            task_separation: 0.0,
            graded_tasks: false,
            samples: SplitSizes {
                train: 4000,
                val: 1,
                test: 1,
            },
            ..SyntheticSpec::default()
        };
        let suite = gen_synthetic_tasks(&spec).unwrap();
        let a = suite.train.task_subset(0);
        let b = suite.train.task_subset(1);
        // Two-sample z-test on every coordinate mean and on class frequencies.
        for j in 0..spec.input_width {
            let stats = |d: &Dataset| {
                let v: Vec<f64> = d.samples().iter().map(|s| s.x[j]).collect();
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
                (m, var / v.len() as f64)
            };
            let ((ma, va), (mb, vb)) = (stats(&a), stats(&b));
            let z = (ma - mb) / (va + vb).sqrt();
            assert!(z.abs() < 4.0, "coordinate {j}: z = {z}");
        }
        for k in 0..spec.classes {
            let f = |d: &Dataset| d.samples().iter().filter(|s| s.y == k).count() as f64 / d.len() as f64;
            let p = 1.0 / spec.classes as f64;
            let se = (2.0 * p * (1.0 - p) / 4000.0).sqrt();
            assert!((f(&a) - f(&b)).abs() < 4.0 * se);
        }
    }

    #[test]
    fn omitted_fields_take_defaults() {
        let spec: SyntheticSpec = serde_json::from_str(r#"{"seed": 4}"#).unwrap();
        assert_eq!(spec, SyntheticSpec { seed: 4, ..SyntheticSpec::default() });
    }

    #[test]
    fn rejects_bad_spec() {
        let spec = SyntheticSpec {
            cluster_spread: 0.0,
            ..SyntheticSpec::default()
        };
        assert!(matches!(gen_synthetic_tasks(&spec), Err(Error::Validation { .. })));
    }
}
