//! Seeded synthetic datasets and a CSV loader.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::Likelihood;
use crate::nn::{BatchInput, Targets};

mod csvio;

pub use csvio::{load_csv, write_csv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetKind {
    /// Two interleaved crescents with isotropic Gaussian noise.
    BananaLike {
        #[serde(default = "default_banana_noise")]
        noise_std: f64,
    },
    /// Spiral arms; radius `|N(radial_mean, radial_std)|`, angle
    /// `arm * 2 pi / n_classes + rate * r + N(0, angular_std)`.
    Pinwheel {
        #[serde(default = "default_arms")]
        n_classes: usize,
        #[serde(default = "default_one")]
        radial_mean: f64,
        #[serde(default = "default_radial_std")]
        radial_std: f64,
        #[serde(default = "default_rate")]
        rate: f64,
        #[serde(default = "default_angular_std")]
        angular_std: f64,
    },
    /// `y = 0.8 sin(3x) + 0.1 x + noise`; training inputs avoid `gap`,
    /// test inputs fill it.
    GappedSine {
        #[serde(default = "default_sine_noise")]
        noise_std: f64,
        #[serde(default = "default_x_range")]
        x_range: (f64, f64),
        #[serde(default = "default_gap")]
        gap: (f64, f64),
    },
    /// Externally supplied `x1,...,xD,y` files.
    Csv {
        train: PathBuf,
        test: PathBuf,
        task: Task,
    },
}

fn default_banana_noise() -> f64 {
    0.2
}
fn default_arms() -> usize {
    5
}
fn default_one() -> f64 {
    1.0
}
fn default_radial_std() -> f64 {
    0.3
}
fn default_rate() -> f64 {
    4.0
}
fn default_angular_std() -> f64 {
    0.05
}
fn default_sine_noise() -> f64 {
    0.2
}
fn default_x_range() -> (f64, f64) {
    (0.0, 6.0)
}
fn default_gap() -> (f64, f64) {
    (1.5, 3.0)
}

/// JSON form is flat: `{"kind": "pinwheel", "n_train": 350, "rate": 4.0, ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "serde_json::Value")]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub kind: DatasetKind,
    /// Ignored for `csv`.
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl TryFrom<serde_json::Value> for DatasetSpec {
    type Error = serde_json::Error;

    // serde's flatten cannot be combined with deny_unknown_fields
    fn try_from(v: serde_json::Value) -> std::result::Result<Self, Self::Error> {
        use serde::de::Error as _;
        let serde_json::Value::Object(mut map) = v else {
            return Err(serde_json::Error::custom("dataset spec must be an object"));
        };
        let mut take = |key: &str| -> std::result::Result<u64, serde_json::Error> {
            map.remove(key).map_or(Ok(0), serde_json::from_value)
        };
        let n_train = take("n_train")? as usize;
        let n_test = take("n_test")? as usize;
        let seed = take("seed")?;
        let kind = serde_json::from_value(serde_json::Value::Object(map))?;
        Ok(DatasetSpec {
            kind,
            n_train,
            n_test,
            seed,
        })
    }
}

impl DatasetSpec {
    pub fn banana_like(n_train: usize, n_test: usize, seed: u64) -> Self {
        DatasetSpec {
            kind: DatasetKind::BananaLike {
                noise_std: default_banana_noise(),
            },
            n_train,
            n_test,
            seed,
        }
    }

    /// 200 points per arm, 350 for training and 650 for testing.
    pub fn pinwheel(seed: u64) -> Self {
        DatasetSpec {
            kind: DatasetKind::Pinwheel {
                n_classes: default_arms(),
                radial_mean: 1.0,
                radial_std: default_radial_std(),
                rate: default_rate(),
                angular_std: default_angular_std(),
            },
            n_train: 350,
            n_test: 650,
            seed,
        }
    }

    pub fn gapped_sine(n_train: usize, n_test: usize, seed: u64) -> Self {
        DatasetSpec {
            kind: DatasetKind::GappedSine {
                noise_std: default_sine_noise(),
                x_range: default_x_range(),
                gap: default_gap(),
            },
            n_train,
            n_test,
            seed,
        }
    }

    pub fn task(&self) -> Task {
        match &self.kind {
            DatasetKind::BananaLike { .. } | DatasetKind::Pinwheel { .. } => Task::Classification,
            DatasetKind::GappedSine { .. } => Task::Regression,
            DatasetKind::Csv { task, .. } => *task,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let positive = |x: f64| x.is_finite() && x > 0.0;
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !matches!(self.kind, DatasetKind::Csv { .. }) && (self.n_train == 0 || self.n_test == 0)
        {
            return bad(format!(
                "n_train and n_test must be positive, got {} and {}",
                self.n_train, self.n_test
            ));
        }
        match &self.kind {
            DatasetKind::BananaLike { noise_std } if !nonneg(*noise_std) => {
                bad(format!("noise_std = {noise_std}"))
            }
            DatasetKind::Pinwheel {
                n_classes,
                radial_mean,
                radial_std,
                rate,
                angular_std,
            } => {
                if *n_classes < 2 {
                    return bad("pinwheel needs at least 2 arms".into());
                }
                if !positive(*radial_mean)
                    || !nonneg(*radial_std)
                    || !rate.is_finite()
                    || !nonneg(*angular_std)
                {
                    return bad("pinwheel parameters must be finite and non-negative".into());
                }
                Ok(())
            }
            DatasetKind::GappedSine {
                noise_std,
                x_range,
                gap,
            } => {
                if !nonneg(*noise_std) {
                    return bad(format!("noise_std = {noise_std}"));
                }
                if !(x_range.0 <= gap.0 && gap.0 < gap.1 && gap.1 <= x_range.1)
                    || !x_range.0.is_finite()
                    || !x_range.1.is_finite()
                {
                    return bad(format!("gap {gap:?} must lie inside x_range {x_range:?}"));
                }
                if x_range.1 - x_range.0 - (gap.1 - gap.0) <= 0.0 {
                    return bad("gap covers the whole range".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn likelihood(&self, sigma2: f64) -> Likelihood {
        match self.task() {
            Task::Classification => Likelihood::Categorical,
            Task::Regression => Likelihood::Gaussian { sigma2 },
        }
    }
}

/// Train and test splits.
pub fn generate(spec: &DatasetSpec) -> Result<(BatchInput, BatchInput)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.n_train + spec.n_test;
    match &spec.kind {
        DatasetKind::BananaLike { noise_std } => {
            let (x, labels) = banana(&mut rng, total, *noise_std);
            rng.set_stream(1);
            stratified_split(&mut rng, 2, x, labels, 2, spec.n_train)
        }
        &DatasetKind::Pinwheel {
            n_classes,
            radial_mean,
            radial_std,
            rate,
            angular_std,
        } => {
            let (x, labels) = pinwheel(
                &mut rng,
                total,
                n_classes,
                radial_mean,
                radial_std,
                rate,
                angular_std,
            );
            rng.set_stream(1);
            stratified_split(&mut rng, 2, x, labels, n_classes, spec.n_train)
        }
        &DatasetKind::GappedSine {
            noise_std,
            x_range,
            gap,
        } => {
            let noise = Normal::new(0.0, noise_std).expect("validated");
            let below = gap.0 - x_range.0;
            let outside = below + (x_range.1 - gap.1);
            let mut train_x = Vec::with_capacity(spec.n_train);
            for _ in 0..spec.n_train {
                // inverse map of a uniform draw over the two pieces
                let u = rng.gen::<f64>() * outside;
                train_x.push(if u < below {
                    x_range.0 + u
                } else {
                    gap.1 + (u - below)
                });
            }
            let test_x: Vec<f64> = (0..spec.n_test)
                .map(|_| rng.gen_range(gap.0..gap.1))
                .collect();
            let mut target = |x: &[f64]| -> Vec<f64> {
                x.iter()
                    .map(|&x| sine(x) + noise.sample(&mut rng))
                    .collect()
            };
            let train_y = target(&train_x);
            let test_y = target(&test_x);
            Ok((
                BatchInput::new(
                    1,
                    train_x,
                    Some(Targets::Values {
                        dim: 1,
                        values: train_y,
                    }),
                )?,
                BatchInput::new(
                    1,
                    test_x,
                    Some(Targets::Values {
                        dim: 1,
                        values: test_y,
                    }),
                )?,
            ))
        }
        DatasetKind::Csv { train, test, task } => {
            Ok((load_csv(train, *task)?, load_csv(test, *task)?))
        }
    }
}

/// Noise-free regression curve of the gapped sine task.
pub fn sine(x: f64) -> f64 {
    (3.0 * x).sin() * 0.8 + 0.1 * x
}

/// Balanced classes: point `i` belongs to class `i % 2`.
fn banana(rng: &mut ChaCha8Rng, n: usize, noise_std: f64) -> (Vec<f64>, Vec<usize>) {
    let noise = Normal::new(0.0, noise_std).expect("validated");
    let mut x = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.gen_range(0.0..PI);
        let (px, py) = if i % 2 == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        x.push(px + noise.sample(rng));
        x.push(py + noise.sample(rng));
        labels.push(i % 2);
    }
    (x, labels)
}

fn pinwheel(
    rng: &mut ChaCha8Rng,
    n: usize,
    arms: usize,
    radial_mean: f64,
    radial_std: f64,
    rate: f64,
    angular_std: f64,
) -> (Vec<f64>, Vec<usize>) {
    let radial = Normal::new(radial_mean, radial_std).expect("validated");
    let angular = Normal::new(0.0, angular_std).expect("validated");
    let mut x = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let arm = i % arms;
        let r: f64 = radial.sample(rng).abs();
        let angle = arm as f64 * 2.0 * PI / arms as f64 + rate * r + angular.sample(rng);
        x.push(r * angle.cos());
        x.push(r * angle.sin());
        labels.push(arm);
    }
    (x, labels)
}

/// Per-class shuffle, then largest-remainder allocation of `n_train` so
/// every class keeps its share within one point.
fn stratified_split(
    rng: &mut ChaCha8Rng,
    d: usize,
    x: Vec<f64>,
    labels: Vec<usize>,
    n_classes: usize,
    n_train: usize,
) -> Result<(BatchInput, BatchInput)> {
    let n = labels.len();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let quota = allocate(
        &by_class.iter().map(Vec::len).collect::<Vec<_>>(),
        n_train,
        n,
    );
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n - n_train);
    for (members, q) in by_class.iter_mut().zip(quota) {
        members.shuffle(rng);
        train.extend_from_slice(&members[..q]);
        test.extend_from_slice(&members[q..]);
    }
    train.shuffle(rng);
    test.shuffle(rng);
    let full = BatchInput::new(d, x, Some(Targets::Classes { n_classes, labels }))?;
    Ok((full.select(&train), full.select(&test)))
}

fn allocate(counts: &[usize], n_train: usize, n: usize) -> Vec<usize> {
    let mut quota: Vec<usize> = counts.iter().map(|&c| c * n_train / n).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // remainders descending, ties by class index
    order.sort_by_key(|&k| (std::cmp::Reverse(counts[k] * n_train % n), k));
    let mut left = n_train - quota.iter().sum::<usize>();
    for k in order {
        if left == 0 {
            break;
        }
        quota[k] += 1;
        left -= 1;
    }
    quota
}

/// Input-space bounding box `(min, max)` per dimension.
pub fn bounding_box(x: &BatchInput) -> Vec<(f64, f64)> {
    (0..x.dim())
        .map(|j| {
            (0..x.len())
                .map(|i| x.row(i)[j])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                })
        })
        .collect()
}

/// Writes `train.csv` and `test.csv` under `dir`.
pub fn write_splits(
    dir: &Path,
    train: &BatchInput,
    test: &BatchInput,
) -> Result<(PathBuf, PathBuf)> {
    let a = dir.join("train.csv");
    let b = dir.join("test.csv");
    write_csv(&a, train)?;
    write_csv(&b, test)?;
    Ok((a, b))
}
