use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::TrainingError;
use crate::tensor::DenseTensor;

/// Which property of a blob carries the class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Cue {
    /// Blob orientation relative to the task's base orientation.
    #[default]
    Orientation,
    /// Blob brightness; orientation is random.
    Amplitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSetSpec {
    pub tasks: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Minimum Euclidean distance between any two task transform vectors.
    pub margin: f64,
    /// Std of the additive pixel noise.
    pub noise: f64,
}

impl Default for TaskSetSpec {
    fn default() -> Self {
        Self {
            tasks: 4,
            classes: 2,
            height: 8,
            width: 8,
            channels: 3,
            train_per_class: 25,
            test_per_class: 25,
            margin: 0.5,
            noise: 0.05,
        }
    }
}

impl TaskSetSpec {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let counts = [
            ("tasks", self.tasks),
            ("classes", self.classes),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(TrainingError::Config(format!("tasks.{name} must be positive")));
            }
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(TrainingError::Config("tasks.margin must be finite and ≥ 0".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(TrainingError::Config("tasks.noise must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    /// Number of global labels, `tasks · classes`.
    pub fn labels(&self) -> usize {
        self.tasks * self.classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }
}

/// Per-task appearance parameters shared by all of the task's samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTransform {
    pub color: Vec<f64>,
    /// Base orientation in `[0, π)`.
    pub orientation: f64,
}

impl TaskTransform {
    /// `[color..., cos 2θ, sin 2θ]`; orientation is π-periodic.
    pub fn vector(&self) -> Vec<f64> {
        let mut v = self.color.clone();
        v.push((2.0 * self.orientation).cos());
        v.push((2.0 * self.orientation).sin());
        v
    }

    pub fn distance(&self, other: &TaskTransform) -> f64 {
        self.vector()
            .iter()
            .zip(other.vector())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: DenseTensor,
    pub task: usize,
    pub class: usize,
    /// `task · classes + class`.
    pub label: usize,
    pub split: Split,
    pub index: usize,
}

/// Deterministic Gaussian-blob tasks. Every sample is a function of
/// `(seed, cue, task, split, index)` alone.
#[derive(Debug, Clone)]
pub struct SyntheticTaskSet {
    spec: TaskSetSpec,
    seed: u64,
    cue: Cue,
    transforms: Vec<TaskTransform>,
    train: Vec<Sample>,
    test: Vec<Sample>,
}

const TRANSFORM_STREAM: u64 = u64::MAX;
const MAX_TRANSFORM_DRAWS: usize = 100_000;

impl SyntheticTaskSet {
    pub fn generate(spec: &TaskSetSpec, seed: u64, cue: Cue) -> Result<Self, TrainingError> {
        spec.validate()?;
        let transforms = draw_transforms(spec, seed)?;
        let split = |split, per_class| {
            let mut out = Vec::with_capacity(spec.tasks * spec.classes * per_class);
            for (task, transform) in transforms.iter().enumerate() {
                for index in 0..spec.classes * per_class {
                    out.push(make_sample(spec, transform, seed, cue, task, split, index));
                }
            }
            out
        };
        Ok(Self {
            train: split(Split::Train, spec.train_per_class),
            test: split(Split::Test, spec.test_per_class),
            spec: spec.clone(),
            seed,
            cue,
            transforms,
        })
    }

    pub fn spec(&self) -> &TaskSetSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cue(&self) -> Cue {
        self.cue
    }

    pub fn transforms(&self) -> &[TaskTransform] {
        &self.transforms
    }

    pub fn train(&self) -> &[Sample] {
        &self.train
    }

    pub fn test(&self) -> &[Sample] {
        &self.test
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Regenerates one sample from its coordinates.
    pub fn sample(&self, task: usize, split: Split, index: usize) -> Sample {
        make_sample(&self.spec, &self.transforms[task], self.seed, self.cue, task, split, index)
    }
}

/// Rejection-samples task transforms until every pair is `margin` apart.
fn draw_transforms(spec: &TaskSetSpec, seed: u64) -> Result<Vec<TaskTransform>, TrainingError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRANSFORM_STREAM);
    let mut out: Vec<TaskTransform> = Vec::with_capacity(spec.tasks);
    let mut draws = 0;
    while out.len() < spec.tasks {
        draws += 1;
        if draws > MAX_TRANSFORM_DRAWS {
            return Err(TrainingError::Config(format!(
                "could not place {} tasks with transform margin {}",
                spec.tasks, spec.margin
            )));
        }
        let candidate = TaskTransform {
            color: (0..spec.channels).map(|_| rng.random_range(0.2..1.0)).collect(),
            orientation: rng.random_range(0.0..PI),
        };
        if out.iter().all(|t| t.distance(&candidate) >= spec.margin) {
            out.push(candidate);
        }
    }
    Ok(out)
}

fn sample_stream(cue: Cue, task: usize, split: Split, index: usize) -> u64 {
    let cue = match cue {
        Cue::Orientation => 0u64,
        Cue::Amplitude => 1,
    };
    let split = match split {
        Split::Train => 0u64,
        Split::Test => 1,
    };
    (cue << 62) | (split << 61) | ((task as u64) << 32) | index as u64
}

fn make_sample(
    spec: &TaskSetSpec,
    transform: &TaskTransform,
    seed: u64,
    cue: Cue,
    task: usize,
    split: Split,
    index: usize,
) -> Sample {
    let per_class = match split {
        Split::Train => spec.train_per_class,
        Split::Test => spec.test_per_class,
    };
    let class = index / per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_stream(cue, task, split, index));
    let mut normal = || rng.sample::<f64, _>(StandardNormal);

    let (angle, amplitude) = match cue {
        Cue::Orientation => {
            let angle = transform.orientation + class as f64 * PI / spec.classes as f64 + 0.1 * normal();
            (angle, 1.0 + 0.1 * normal())
        }
        Cue::Amplitude => {
            let level = if spec.classes > 1 {
                class as f64 / (spec.classes - 1) as f64
            } else {
                0.5
            };
            let angle = PI * (normal() * 0.5 + 0.5).rem_euclid(1.0);
            (angle, 0.5 + level + 0.05 * normal())
        }
    };
    let ch = (spec.height as f64 - 1.0) / 2.0 + 0.5 * normal();
    let cw = (spec.width as f64 - 1.0) / 2.0 + 0.5 * normal();
    let (sin, cos) = angle.sin_cos();
    let (long, short) = (2.0, 0.7);

    let mut data = Vec::with_capacity(spec.height * spec.width * spec.channels);
    for h in 0..spec.height {
        for w in 0..spec.width {
            let (dh, dw) = (h as f64 - ch, w as f64 - cw);
            let u = dh * cos + dw * sin;
            let v = -dh * sin + dw * cos;
            let blob = amplitude * (-0.5 * ((u / long).powi(2) + (v / short).powi(2))).exp();
            for c in 0..spec.channels {
                data.push(blob * transform.color[c] + spec.noise * normal());
            }
        }
    }
    Sample {
        input: DenseTensor::new(vec![spec.height, spec.width, spec.channels], data)
            .expect("extents are validated positive"),
        task,
        class,
        label: task * spec.classes + class,
        split,
        index,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_labels() {
        let spec = TaskSetSpec {
            tasks: 2,
            train_per_class: 10,
            test_per_class: 3,
            ..TaskSetSpec::default()
        };
        let set = SyntheticTaskSet::generate(&spec, 5, Cue::Orientation).unwrap();
        assert_eq!(set.train().len(), 40);
        assert_eq!(set.test().len(), 12);
        let labels: Vec<usize> = set.train().iter().map(|s| s.label).collect();
        assert_eq!(labels.iter().filter(|&&l| l == 3).count(), 10);
        assert!(labels.iter().all(|&l| l < 4));
    }

    #[test]
    fn samples_are_pure_functions_of_coordinates() {
        let spec = TaskSetSpec::default();
        let a = SyntheticTaskSet::generate(&spec, 9, Cue::Orientation).unwrap();
        let b = SyntheticTaskSet::generate(&spec, 9, Cue::Orientation).unwrap();
        assert_eq!(a.train(), b.train());
        let s = &a.test()[37];
        assert_eq!(&a.sample(s.task, Split::Test, s.index), s);
        let other = SyntheticTaskSet::generate(&spec, 9, Cue::Amplitude).unwrap();
        assert_eq!(a.transforms(), other.transforms());
        assert_ne!(a.train()[0].input, other.train()[0].input);
    }

    #[test]
    fn transforms_respect_margin() {
        let spec = TaskSetSpec {
            tasks: 6,
            margin: 0.8,
            ..TaskSetSpec::default()
        };
        let set = SyntheticTaskSet::generate(&spec, 1, Cue::Orientation).unwrap();
        let t = set.transforms();
        for i in 0..t.len() {
            for j in i + 1..t.len() {
                assert!(t[i].distance(&t[j]) >= 0.8);
            }
        }
        let impossible = TaskSetSpec {
            margin: 10.0,
            ..spec
        };
        assert!(SyntheticTaskSet::generate(&impossible, 1, Cue::Orientation).is_err());
    }
}
