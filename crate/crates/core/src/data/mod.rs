//! Multi-task datasets and deterministic batching.

mod csv;
mod idx;
mod synthetic;

pub use self::csv::{read_csv, write_csv};
pub use idx::{load_idx, parse_idx};
pub use synthetic::{gen_synthetic_tasks, SplitSizes, SyntheticSpec};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{derive_rng, stream};
use crate::tensor::Tensor;

/// One labelled instance `(x, y, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub x: Vec<f64>,
    pub y: usize,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    width: usize,
    samples: Vec<TaskSample>,
}

impl Dataset {
    /// Checks every sample against the input width and the per-task class
    /// counts in `classes`.
    pub fn new(width: usize, samples: Vec<TaskSample>, classes: &[usize]) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != width {
                return Err(Error::Length(format!("sample {i} has width {}, expected {width}", s.x.len())));
            }
            let k = *classes.get(s.t).ok_or(Error::Task {
                task: s.t,
                count: classes.len(),
            })?;
            if s.y >= k {
                return Err(Error::Index { index: s.y, len: k });
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("sample {i} has a non-finite feature")));
            }
        }
        Ok(Dataset { width, samples })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[TaskSample] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> &TaskSample {
        &self.samples[i]
    }

    /// Indices of the samples belonging to `task`, in order.
    pub fn task_indices(&self, task: usize) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].t == task).collect()
    }

    pub fn task_subset(&self, task: usize) -> Dataset {
        Dataset {
            width: self.width,
            samples: self.samples.iter().filter(|s| s.t == task).cloned().collect(),
        }
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut x = Vec::with_capacity(indices.len() * self.width);
        let mut labels = Vec::with_capacity(indices.len());
        let mut tasks = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.samples.get(i).ok_or(Error::Index {
                index: i,
                len: self.samples.len(),
            })?;
            x.extend_from_slice(&s.x);
            labels.push(s.y);
            tasks.push(s.t);
        }
        Ok(Batch {
            x: Tensor::new(vec![indices.len(), self.width], x)?,
            labels,
            tasks,
            indices: indices.to_vec(),
        })
    }

    /// The whole dataset as a single batch.
    pub fn as_batch(&self) -> Result<Batch> {
        let all: Vec<usize> = (0..self.samples.len()).collect();
        self.batch(&all)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub tasks: Vec<usize>,
    /// Positions of these samples in the source dataset.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.x.shape()[1];
        &self.x.data()[i * d..(i + 1) * d]
    }

    /// Sub-batch of the given rows.
    pub fn select(&self, rows: &[usize]) -> Result<Batch> {
        let d = self.x.shape()[1];
        let mut x = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            x.extend_from_slice(self.row(r));
        }
        Ok(Batch {
            x: Tensor::new(vec![rows.len(), d], x)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            tasks: rows.iter().map(|&r| self.tasks[r]).collect(),
            indices: rows.iter().map(|&r| self.indices[r]).collect(),
        })
    }
}

/// Batch index lists over `dataset`. With `shuffle`, the order is a pure
/// function of `(seed, epoch)`; the final short batch is kept.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    chunked(all, batch_size, seed, &[epoch], shuffle)
}

fn chunked(mut order: Vec<usize>, batch_size: usize, seed: u64, tags: &[u64], shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    if order.is_empty() {
        return Err(Error::Contract("cannot batch an empty dataset".into()));
    }
    if shuffle {
        let mut all_tags = vec![stream::SHUFFLE];
        all_tags.extend_from_slice(tags);
        order.shuffle(&mut derive_rng(seed, &all_tags));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Single-task batches interleaved round-robin across tasks (task 0, 1, …,
/// 0, 1, …); tasks that run out of batches drop out of the rotation.
pub fn round_robin_batches(
    dataset: &Dataset,
    tasks: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    let mut per_task = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let idx = dataset.task_indices(t);
        if idx.is_empty() {
            return Err(Error::Contract(format!("task {t} has no samples")));
        }
        per_task.push(chunked(idx, batch_size, seed, &[epoch, t as u64], true)?.into_iter());
    }
    let mut out = Vec::new();
    loop {
        let before = out.len();
        for it in per_task.iter_mut() {
            if let Some(b) = it.next() {
                out.push(b);
            }
        }
        if out.len() == before {
            return Ok(out);
        }
    }
}

/// Train, validation and test splits sharing a width and task layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub classes: Vec<usize>,
}

impl Suite {
    pub fn width(&self) -> usize {
        self.train.width()
    }

    pub fn task_count(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, name: &str) -> Result<&Dataset> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Contract(format!("unknown split `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| TaskSample {
                x: vec![i as f64],
                y: i % 2,
                t: i % 3,
            })
            .collect();
        Dataset::new(1, samples, &[2, 2, 2]).unwrap()
    }

    #[test]
    fn batch_sizes_keep_the_short_tail() {
        let b = batches(&toy(10), 3, 0, 0, true).unwrap();
        let sizes: Vec<usize> = b.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
    }

    #[test]
    fn shuffle_is_seeded() {
        let d = toy(50);
        assert_eq!(batches(&d, 7, 1, 0, true).unwrap(), batches(&d, 7, 1, 0, true).unwrap());
        assert_ne!(batches(&d, 7, 1, 0, true).unwrap(), batches(&d, 7, 2, 0, true).unwrap());
        assert_ne!(batches(&d, 7, 1, 0, true).unwrap(), batches(&d, 7, 1, 1, true).unwrap());
        let unshuffled: Vec<usize> = batches(&d, 7, 1, 0, false).unwrap().concat();
        assert_eq!(unshuffled, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn batches_cover_the_dataset_exactly() {
        let mut all = batches(&toy(23), 4, 9, 3, true).unwrap().concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn empty_dataset_and_zero_batch_size_are_contract_errors() {
        let empty = Dataset::new(1, vec![], &[2]).unwrap();
        assert!(matches!(batches(&empty, 2, 0, 0, true), Err(Error::Contract(_))));
        assert!(matches!(batches(&toy(3), 0, 0, 0, true), Err(Error::Contract(_))));
    }

    #[test]
    fn round_robin_alternates_tasks_and_covers_everything() {
        let d = toy(20);
        let plan = round_robin_batches(&d, 3, 2, 5, 0).unwrap();
        for b in &plan {
            let t = d.get(b[0]).t;
            assert!(b.iter().all(|&i| d.get(i).t == t));
        }
        let first: Vec<usize> = plan[..3].iter().map(|b| d.get(b[0]).t).collect();
        assert_eq!(first, vec![0, 1, 2]);
        let mut all = plan.concat();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_samples_rejected() {
        let bad_label = vec![TaskSample { x: vec![0.0], y: 2, t: 0 }];
        assert!(matches!(Dataset::new(1, bad_label, &[2]), Err(Error::Index { .. })));
        let bad_task = vec![TaskSample { x: vec![0.0], y: 0, t: 1 }];
        assert!(matches!(Dataset::new(1, bad_task, &[2]), Err(Error::Task { .. })));
        let bad_width = vec![TaskSample { x: vec![0.0, 1.0], y: 0, t: 0 }];
        assert!(matches!(Dataset::new(1, bad_width, &[2]), Err(Error::Length(_))));
    }
}
