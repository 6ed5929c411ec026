//! Synthetic Gaussian-mixture classification tasks.
//!
//! Every sample is a pure function of `(task seed, sample index)`, so task
//! data is never stored. A suite shares one input space: `feature_dim`
//! mixture features followed by a one-hot task indicator, so a single model
//! can answer every task in the suite (logits restricted to the task's
//! first `num_classes` outputs).

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub num_classes: usize,
    /// 1 / num_classes; an attack succeeds when accuracy drops below it.
    pub chance_level: f64,
    pub seed: u64,
    pub task_index: usize,
    pub num_tasks: usize,
    pub feature_dim: usize,
    /// Standard deviation of the class means around the origin.
    pub separation: f64,
    pub noise: f64,
    pub train_samples: usize,
    pub grad_samples: usize,
    pub eval_samples: usize,
}

/// Which slice of a task's sample stream to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    /// Gradient samples for one attack run.
    Grad { run_seed: u64 },
    /// Evaluation samples for one attack run.
    Eval { run_seed: u64 },
}

/// Inputs with labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` samples.
    pub fn truncated(&self, n: usize) -> Batch {
        let n = n.min(self.len());
        Batch { inputs: self.inputs[..n].to_vec(), labels: self.labels[..n].to_vec(), num_classes: self.num_classes }
    }
}

const MEANS_STREAM: u64 = u64::MAX;

impl TaskSpec {
    pub fn input_dim(&self) -> usize {
        self.feature_dim + self.num_tasks
    }

    /// Sample indices of a split. Runs get consecutive, non-overlapping
    /// blocks after the training range, so all splits are disjoint.
    pub fn index_range(&self, split: Split) -> Range<u64> {
        let train = self.train_samples as u64;
        let per_run = (self.grad_samples + self.eval_samples) as u64;
        match split {
            Split::Train => 0..train,
            Split::Grad { run_seed } => {
                let start = train + run_seed * per_run;
                start..start + self.grad_samples as u64
            }
            Split::Eval { run_seed } => {
                let start = train + run_seed * per_run + self.grad_samples as u64;
                start..start + self.eval_samples as u64
            }
        }
    }

    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(MEANS_STREAM);
        (0..self.num_classes)
            .map(|_| {
                (0..self.feature_dim).map(|_| self.separation * rng.sample::<f64, _>(StandardNormal)).collect()
            })
            .collect()
    }

    fn sample_with(&self, means: &[Vec<f64>], index: u64) -> (Vec<f64>, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let label = rng.gen_range(0..self.num_classes);
        let mut x: Vec<f64> = means[label]
            .iter()
            .map(|m| m + self.noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        x.extend((0..self.num_tasks).map(|t| if t == self.task_index { 1.0 } else { 0.0 }));
        (x, label)
    }

    pub fn sample(&self, index: u64) -> (Vec<f64>, usize) {
        self.sample_with(&self.class_means(), index)
    }

    pub fn batch(&self, split: Split) -> Batch {
        let means = self.class_means();
        let (inputs, labels) = self.index_range(split).map(|i| self.sample_with(&means, i)).unzip();
        Batch { inputs, labels, num_classes: self.num_classes }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.num_classes < 2 {
            return Err(format!("task `{}` needs at least 2 classes", self.name));
        }
        if (self.chance_level - 1.0 / self.num_classes as f64).abs() > 1e-12 {
            return Err(format!("task `{}` chance level {} != 1/{}", self.name, self.chance_level, self.num_classes));
        }
        if self.task_index >= self.num_tasks {
            return Err(format!("task `{}` index out of range", self.name));
        }
        Ok(())
    }
}

/// Tasks sharing one input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub seed: u64,
    pub feature_dim: usize,
    pub tasks: Vec<TaskSpec>,
}

impl TaskSuite {
    /// The built-in suite: a 4-way task, a binary task and a held-out 4-way
    /// task used for transfer checks.
    pub fn toy(seed: u64, feature_dim: usize) -> TaskSuite {
        let defs = [("toy-mmlu", 4usize), ("toy-sst2", 2), ("toy-arc", 4)];
        let num_tasks = defs.len();
        let tasks = defs
            .iter()
            .enumerate()
            .map(|(i, &(name, classes))| TaskSpec {
                name: name.to_string(),
                num_classes: classes,
                chance_level: 1.0 / classes as f64,
                seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1),
                task_index: i,
                num_tasks,
                feature_dim,
                separation: 0.8,
                noise: 1.0,
                train_samples: 1500,
                grad_samples: 200,
                eval_samples: 100,
            })
            .collect();
        TaskSuite { seed, feature_dim, tasks }
    }

    pub fn input_dim(&self) -> usize {
        self.feature_dim + self.tasks.len()
    }

    pub fn max_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.num_classes).max().unwrap_or(0)
    }

    pub fn get(&self, name: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn validate(&self) -> Result<(), String> {
        for t in &self.tasks {
            t.validate()?;
            if t.feature_dim != self.feature_dim || t.num_tasks != self.tasks.len() {
                return Err(format!("task `{}` disagrees with suite dimensions", t.name));
            }
        }
        Ok(())
    }
}
