//! Fixed-architecture `tanh` MLP with hand-written reverse mode.
//!
//! The network maps `R^D -> R^C` through hidden `tanh` layers and a linear
//! output layer. All parameters live in one flat [`ParamVector`]; the layout
//! is documented in [`tape`] and is the coordinate system for every Hessian,
//! covariance and geodesic state in this crate.

pub mod real;
pub mod tape;

use std::ops::{Deref, DerefMut};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use tape::{Scratch, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
}

/// Layer widths `[D, h_1, ..., C]` of a dense network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ArchitectureRepr", into = "ArchitectureRepr")]
pub struct MlpArchitecture {
    widths: Vec<usize>,
    activation: Activation,
    offsets: Vec<usize>,
    num_params: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchitectureRepr {
    layer_widths: Vec<usize>,
    #[serde(default)]
    activation: Activation,
}

impl TryFrom<ArchitectureRepr> for MlpArchitecture {
    type Error = Error;
    fn try_from(r: ArchitectureRepr) -> Result<Self> {
        MlpArchitecture::new(r.layer_widths)
    }
}

impl From<MlpArchitecture> for ArchitectureRepr {
    fn from(a: MlpArchitecture) -> Self {
        ArchitectureRepr {
            layer_widths: a.widths,
            activation: a.activation,
        }
    }
}

impl MlpArchitecture {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an MLP needs at least 2 layer widths, got {}",
                widths.len()
            )));
        }
        if let Some(pos) = widths.iter().position(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!("layer width {pos} is zero")));
        }
        let mut offsets = Vec::with_capacity(widths.len() - 1);
        let mut k = 0;
        for pair in widths.windows(2) {
            offsets.push(k);
            k += pair[0] * pair[1] + pair[1];
        }
        Ok(Self {
            widths,
            activation: Activation::Tanh,
            offsets,
            num_params: k,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Total parameter count `K`.
    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Offset of each layer's weight block in the flat parameter vector.
    pub fn layer_offsets(&self) -> &[usize] {
        &self.offsets
    }
}

/// Flat weight vector `theta in R^K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

/// Weights and biases of a single dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `n_out x n_in`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    /// Checks the length against `arch`.
    pub fn for_arch(arch: &MlpArchitecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.num_params() {
            return Err(Error::DimensionMismatch {
                axis: "parameters",
                expected: arch.num_params(),
                found: values.len(),
            });
        }
        Ok(Self(values))
    }

    /// Seeded initialization: weights `N(0, 1/fan_in)`, biases zero.
    pub fn init(arch: &MlpArchitecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = vec![0.0; arch.num_params()];
        for (l, pair) in arch.widths().windows(2).enumerate() {
            let (n_in, n_out) = (pair[0], pair[1]);
            let off = arch.layer_offsets()[l];
            let std = 1.0 / (n_in as f64).sqrt();
            for w in &mut v[off..off + n_in * n_out] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = std * z;
            }
        }
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn unflatten(&self, arch: &MlpArchitecture) -> Result<Vec<LayerParams>> {
        check_len(arch, &self.0)?;
        Ok(arch
            .widths()
            .windows(2)
            .zip(arch.layer_offsets())
            .map(|(pair, &off)| {
                let (n_in, n_out) = (pair[0], pair[1]);
                let weights =
                    DMatrix::from_row_slice(n_out, n_in, &self.0[off..off + n_in * n_out]);
                let b0 = off + n_in * n_out;
                let bias = DVector::from_column_slice(&self.0[b0..b0 + n_out]);
                LayerParams { weights, bias }
            })
            .collect())
    }

    pub fn flatten(arch: &MlpArchitecture, layers: &[LayerParams]) -> Result<Self> {
        if layers.len() != arch.num_layers() {
            return Err(Error::DimensionMismatch {
                axis: "layers",
                expected: arch.num_layers(),
                found: layers.len(),
            });
        }
        let mut v = Vec::with_capacity(arch.num_params());
        for (layer, pair) in layers.iter().zip(arch.widths().windows(2)) {
            let (n_in, n_out) = (pair[0], pair[1]);
            if layer.weights.shape() != (n_out, n_in) || layer.bias.len() != n_out {
                return Err(Error::DimensionMismatch {
                    axis: "layer shape",
                    expected: n_out * n_in + n_out,
                    found: layer.weights.len() + layer.bias.len(),
                });
            }
            for o in 0..n_out {
                for i in 0..n_in {
                    v.push(layer.weights[(o, i)]);
                }
            }
            v.extend(layer.bias.iter());
        }
        Ok(Self(v))
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

pub(crate) fn check_len(arch: &MlpArchitecture, theta: &[f64]) -> Result<()> {
    if theta.len() != arch.num_params() {
        return Err(Error::DimensionMismatch {
            axis: "parameters",
            expected: arch.num_params(),
            found: theta.len(),
        });
    }
    Ok(())
}

/// Supervision attached to a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Row-major `N x C` real targets.
    Values { dim: usize, values: Vec<f64> },
    /// Class indices in `[0, n_classes)`.
    Classes {
        n_classes: usize,
        labels: Vec<usize>,
    },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values { dim, values } => values.len() / dim,
            Targets::Classes { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Values { .. } => None,
        }
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Values { dim, values } => Targets::Values {
                dim: *dim,
                values: idx
                    .iter()
                    .flat_map(|&i| values[i * dim..(i + 1) * dim].iter().copied())
                    .collect(),
            },
            Targets::Classes { n_classes, labels } => Targets::Classes {
                n_classes: *n_classes,
                labels: idx.iter().map(|&i| labels[i]).collect(),
            },
        }
    }
}

/// `N x D` inputs in row-major order, optionally with targets.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInput {
    n: usize,
    d: usize,
    inputs: Vec<f64>,
    targets: Option<Targets>,
}

impl BatchInput {
    pub fn new(d: usize, inputs: Vec<f64>, targets: Option<Targets>) -> Result<Self> {
        if d == 0 || inputs.is_empty() || inputs.len() % d != 0 {
            return Err(Error::InvalidArgument(format!(
                "inputs of length {} cannot be split into rows of width {d}",
                inputs.len()
            )));
        }
        let n = inputs.len() / d;
        if let Some(t) = &targets {
            if let Targets::Values { dim, values } = t {
                if *dim == 0 || values.len() != n * dim {
                    return Err(Error::DimensionMismatch {
                        axis: "target rows",
                        expected: n * dim,
                        found: values.len(),
                    });
                }
            }
            if t.len() != n {
                return Err(Error::DimensionMismatch {
                    axis: "target rows",
                    expected: n,
                    found: t.len(),
                });
            }
            if let Targets::Classes { n_classes, labels } = t {
                if let Some(&bad) = labels.iter().find(|&&c| c >= *n_classes) {
                    return Err(Error::InvalidArgument(format!(
                        "class label {bad} outside [0, {n_classes})"
                    )));
                }
            }
        }
        Ok(Self {
            n,
            d,
            inputs,
            targets,
        })
    }

    pub fn inputs_only(d: usize, inputs: Vec<f64>) -> Result<Self> {
        Self::new(d, inputs, None)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.d..(i + 1) * self.d]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> Option<&Targets> {
        self.targets.as_ref()
    }

    /// Rows `idx` (in the given order), targets included.
    pub fn select(&self, idx: &[usize]) -> BatchInput {
        let inputs = idx
            .iter()
            .flat_map(|&i| self.row(i).iter().copied())
            .collect();
        BatchInput {
            n: idx.len(),
            d: self.d,
            inputs,
            targets: self.targets.as_ref().map(|t| t.select(idx)),
        }
    }

    pub(crate) fn check_arch(&self, arch: &MlpArchitecture) -> Result<()> {
        if self.d != arch.input_dim() {
            return Err(Error::DimensionMismatch {
                axis: "input features",
                expected: arch.input_dim(),
                found: self.d,
            });
        }
        match &self.targets {
            Some(Targets::Values { dim, .. }) if *dim != arch.output_dim() => {
                Err(Error::DimensionMismatch {
                    axis: "target columns",
                    expected: arch.output_dim(),
                    found: *dim,
                })
            }
            Some(Targets::Classes { n_classes, .. }) if *n_classes != arch.output_dim() => {
                Err(Error::DimensionMismatch {
                    axis: "classes",
                    expected: arch.output_dim(),
                    found: *n_classes,
                })
            }
            _ => Ok(()),
        }
    }
}

/// Raw network outputs (logits or regression means), `N x C`.
pub fn forward(arch: &MlpArchitecture, theta: &[f64], x: &BatchInput) -> Result<DMatrix<f64>> {
    check_len(arch, theta)?;
    x.check_arch(arch)?;
    let c = arch.output_dim();
    let mut tape = Tape::<f64>::new(arch);
    let mut out = DMatrix::zeros(x.len(), c);
    for n in 0..x.len() {
        tape::forward(arch, theta, x.row(n), &mut tape);
        for (j, v) in tape.output().iter().enumerate() {
            out[(n, j)] = *v;
        }
    }
    Ok(out)
}

/// Output of the network for a single input row.
pub fn forward_one(arch: &MlpArchitecture, theta: &[f64], x: &[f64]) -> Vec<f64> {
    let mut tape = Tape::<f64>::new(arch);
    tape::forward(arch, theta, x, &mut tape);
    tape.output().to_vec()
}

/// Parameter Jacobian `d f(x) / d theta`, `C x K`.
pub fn network_jacobian(arch: &MlpArchitecture, theta: &[f64], x: &[f64]) -> Result<DMatrix<f64>> {
    check_len(arch, theta)?;
    if x.len() != arch.input_dim() {
        return Err(Error::DimensionMismatch {
            axis: "input features",
            expected: arch.input_dim(),
            found: x.len(),
        });
    }
    let (c, k) = (arch.output_dim(), arch.num_params());
    let mut tape = Tape::<f64>::new(arch);
    let mut scratch = Scratch::<f64>::new(arch);
    tape::forward(arch, theta, x, &mut tape);
    let mut jac = DMatrix::zeros(c, k);
    let mut seed = vec![0.0; c];
    let mut row = vec![0.0; k];
    for j in 0..c {
        seed.iter_mut().for_each(|s| *s = 0.0);
        seed[j] = 1.0;
        row.iter_mut().for_each(|r| *r = 0.0);
        tape::backward(arch, theta, &tape, &seed, 1.0, &mut row, &mut scratch);
        for (col, v) in row.iter().enumerate() {
            jac[(j, col)] = *v;
        }
    }
    Ok(jac)
}
