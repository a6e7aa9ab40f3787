//! Synthetic tasks: a low-rank teacher regression and a two-cluster classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{gram_schmidt_extend, Matrix};
use crate::rng::SeededRng;
use crate::trainer::model::{Activation, Loss};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticTask {
    /// Targets come from the frozen base network with a rank-`k` update added
    /// to each linear layer (`teacher_ranks[i]` for layer i), plus noise.
    LowRankTeacher {
        layer_dims: Vec<usize>,
        teacher_ranks: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
        /// Every nonzero singular value of a teacher update.
        #[serde(default = "default_delta_scale")]
        delta_scale: f64,
        #[serde(default)]
        noise_std: f64,
        samples: usize,
    },
    /// Two Gaussian clusters at ±separation/2 along a random unit direction.
    TwoBlob {
        layer_dims: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_blob_std")]
        noise_std: f64,
        samples: usize,
    },
}

fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_delta_scale() -> f64 {
    1.0
}
fn default_separation() -> f64 {
    4.0
}
fn default_blob_std() -> f64 {
    1.0
}

impl SyntheticTask {
    pub fn layer_dims(&self) -> &[usize] {
        match self {
            SyntheticTask::LowRankTeacher { layer_dims, .. } | SyntheticTask::TwoBlob { layer_dims, .. } => layer_dims,
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            SyntheticTask::LowRankTeacher { activation, .. } | SyntheticTask::TwoBlob { activation, .. } => *activation,
        }
    }

    pub fn loss(&self) -> Loss {
        match self {
            SyntheticTask::LowRankTeacher { .. } => Loss::MeanSquaredError,
            SyntheticTask::TwoBlob { .. } => Loss::SoftmaxCrossEntropy,
        }
    }

    pub fn linear_layers(&self) -> usize {
        self.layer_dims().len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.layer_dims();
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::config("task.layer_dims", "need at least two positive dimensions"));
        }
        match self {
            SyntheticTask::LowRankTeacher {
                teacher_ranks,
                delta_scale,
                noise_std,
                samples,
                ..
            } => {
                if teacher_ranks.len() != dims.len() - 1 {
                    return Err(Error::config(
                        "task.teacher_ranks",
                        format!("expected {} entries (one per linear layer), got {}", dims.len() - 1, teacher_ranks.len()),
                    ));
                }
                for (i, &k) in teacher_ranks.iter().enumerate() {
                    let limit = dims[i].min(dims[i + 1]);
                    if k > limit {
                        return Err(Error::config(
                            format!("task.teacher_ranks[{i}]"),
                            format!("rank {k} exceeds layer dims {}x{}", dims[i + 1], dims[i]),
                        ));
                    }
                }
                if !(delta_scale.is_finite() && *delta_scale > 0.0) {
                    return Err(Error::config("task.delta_scale", "must be positive"));
                }
                if !(noise_std.is_finite() && *noise_std >= 0.0) {
                    return Err(Error::config("task.noise_std", "must be non-negative"));
                }
                if *samples == 0 {
                    return Err(Error::config("task.samples", "must be positive"));
                }
            }
            SyntheticTask::TwoBlob {
                separation,
                noise_std,
                samples,
                ..
            } => {
                if dims[dims.len() - 1] != 2 {
                    return Err(Error::config("task.layer_dims", "two-blob output dimension must be 2"));
                }
                if !(separation.is_finite() && *separation > 0.0) {
                    return Err(Error::config("task.separation", "must be positive"));
                }
                if !(noise_std.is_finite() && *noise_std > 0.0) {
                    return Err(Error::config("task.noise_std", "must be positive"));
                }
                if *samples < 2 {
                    return Err(Error::config("task.samples", "need at least two samples"));
                }
            }
        }
        Ok(())
    }
}

/// A generated dataset together with the frozen base network it was built on.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    /// Frozen base weight of each linear layer, `dims[i+1] × dims[i]`.
    pub base_weights: Vec<Matrix>,
    /// Teacher update per linear layer (empty for classification).
    pub teacher_deltas: Vec<Matrix>,
    /// `d_in × samples`
    pub inputs: Matrix,
    /// `d_out × samples`
    pub targets: Matrix,
    pub activation: Activation,
    pub loss: Loss,
}

impl Task {
    pub fn samples(&self) -> usize {
        self.inputs.cols()
    }

    /// Columns `idx` of inputs and targets.
    pub fn batch(&self, idx: &[usize]) -> (Matrix, Matrix) {
        (gather_columns(&self.inputs, idx), gather_columns(&self.targets, idx))
    }
}

pub fn gather_columns(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), idx.len());
    for (j, &src) in idx.iter().enumerate() {
        for i in 0..m.rows() {
            out.set(i, j, m.get(i, src));
        }
    }
    out
}

/// `scale · Σ_{j<k} u_j v_jᵀ` with orthonormal `u`s and `v`s, so the update
/// has exactly `k` singular values, all equal to `scale`.
pub fn low_rank_delta(d_out: usize, d_in: usize, k: usize, scale: f64, rng: &mut SeededRng) -> Result<Matrix> {
    if k > d_out.min(d_in) {
        return Err(Error::Parameter(format!("rank {k} exceeds dims {d_out}x{d_in}")));
    }
    let mut us = Matrix::zeros(d_out, 0);
    let mut vs = Matrix::zeros(d_in, 0);
    for _ in 0..k {
        let cu: Vec<f64> = (0..d_out).map(|_| rng.standard_normal()).collect();
        let u = gram_schmidt_extend(&us, &cu, rng)?;
        us.push_column(&u)?;
        let cv: Vec<f64> = (0..d_in).map(|_| rng.standard_normal()).collect();
        let v = gram_schmidt_extend(&vs, &cv, rng)?;
        vs.push_column(&v)?;
    }
    Ok(us.matmul_t(&vs)?.scale(scale))
}

fn teacher_forward(weights: &[Matrix], activation: Activation, x: &Matrix) -> Result<Matrix> {
    let mut h = x.clone();
    for (i, w) in weights.iter().enumerate() {
        h = w.matmul(&h)?;
        if i + 1 < weights.len() {
            h = match activation {
                Activation::Tanh => h.map(f64::tanh),
                Activation::Relu => h.map(|v| v.max(0.0)),
            };
        }
    }
    Ok(h)
}

pub fn make_task(spec: &SyntheticTask, rng: &mut SeededRng) -> Result<Task> {
    spec.validate().map_err(|e| match e {
        Error::Config { path, message } => Error::Parameter(format!("{path}: {message}")),
        other => other,
    })?;
    let dims = spec.layer_dims();
    let base_weights = dims
        .windows(2)
        .map(|w| Matrix::gaussian(w[1], w[0], 1.0 / (w[0] as f64).sqrt(), rng))
        .collect::<Result<Vec<_>>>()?;

    match spec {
        SyntheticTask::LowRankTeacher {
            teacher_ranks,
            delta_scale,
            noise_std,
            samples,
            activation,
            ..
        } => {
            let teacher_deltas = dims
                .windows(2)
                .zip(teacher_ranks)
                .map(|(w, &k)| low_rank_delta(w[1], w[0], k, *delta_scale, rng))
                .collect::<Result<Vec<_>>>()?;
            let teacher: Vec<Matrix> = base_weights
                .iter()
                .zip(&teacher_deltas)
                .map(|(w, d)| w.add(d))
                .collect::<Result<_>>()?;
            let inputs = Matrix::gaussian(dims[0], *samples, 1.0, rng)?;
            let mut targets = teacher_forward(&teacher, *activation, &inputs)?;
            if *noise_std > 0.0 {
                let noise = Matrix::gaussian(targets.rows(), targets.cols(), *noise_std, rng)?;
                targets.add_assign(&noise)?;
            }
            Ok(Task {
                base_weights,
                teacher_deltas,
                inputs,
                targets,
                activation: *activation,
                loss: Loss::MeanSquaredError,
            })
        }
        SyntheticTask::TwoBlob {
            separation,
            noise_std,
            samples,
            activation,
            ..
        } => {
            let d = dims[0];
            let raw: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
            let direction = gram_schmidt_extend(&Matrix::zeros(d, 0), &raw, rng)?;
            let mut inputs = Matrix::gaussian(d, *samples, *noise_std, rng)?;
            let mut targets = Matrix::zeros(2, *samples);
            for j in 0..*samples {
                let label = j % 2;
                let sign = if label == 0 { 1.0 } else { -1.0 };
                for i in 0..d {
                    let v = inputs.get(i, j) + sign * 0.5 * separation * direction[i];
                    inputs.set(i, j, v);
                }
                targets.set(label, j, 1.0);
            }
            Ok(Task {
                base_weights,
                teacher_deltas: Vec::new(),
                inputs,
                targets,
                activation: *activation,
                loss: Loss::SoftmaxCrossEntropy,
            })
        }
    }
}
