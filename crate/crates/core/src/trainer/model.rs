//! Small feed-forward network with frozen linear layers, optional SVD-form
//! adapters and biases, and hand-written reverse-mode gradients.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterCache, AdapterGrads, SvdAdapter};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        match self {
            Activation::Tanh => x.map(f64::tanh),
            Activation::Relu => x.map(|v| v.max(0.0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    MeanSquaredError,
    SoftmaxCrossEntropy,
}

impl Loss {
    pub fn name(&self) -> &'static str {
        match self {
            Loss::MeanSquaredError => "mean_squared_error",
            Loss::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    /// Loss value and `dL/d(outputs)`.
    ///
    /// MSE averages over every output entry. Cross-entropy expects one
    /// probability column per example in `targets` and averages over the batch.
    pub fn evaluate(&self, outputs: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
        if outputs.shape() != targets.shape() {
            return Err(Error::shape(
                "loss",
                format!("{:?}", outputs.shape()),
                format!("{:?}", targets.shape()),
            ));
        }
        let (rows, batch) = outputs.shape();
        match self {
            Loss::MeanSquaredError => {
                let n = (rows * batch) as f64;
                let diff = outputs.sub(targets)?;
                let value = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
                Ok((value, diff.scale(2.0 / n)))
            }
            Loss::SoftmaxCrossEntropy => {
                let mut grad = Matrix::zeros(rows, batch);
                let mut value = 0.0;
                for b in 0..batch {
                    let col = outputs.column(b);
                    let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = col.iter().map(|v| (v - max).exp()).sum();
                    let log_z = max + sum.ln();
                    for k in 0..rows {
                        let t = targets.get(k, b);
                        let log_p = col[k] - log_z;
                        if t != 0.0 {
                            value -= t * log_p;
                        }
                        grad.set(k, b, (log_p.exp() - t) / batch as f64);
                    }
                }
                Ok((value / batch as f64, grad))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinearWeight {
    Frozen(Matrix),
    Adapted(SvdAdapter),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: LinearWeight,
    pub bias: Option<Vec<f64>>,
}

impl Linear {
    pub fn d_in(&self) -> usize {
        match &self.weight {
            LinearWeight::Frozen(w) => w.cols(),
            LinearWeight::Adapted(a) => a.d_in(),
        }
    }

    pub fn d_out(&self) -> usize {
        match &self.weight {
            LinearWeight::Frozen(w) => w.rows(),
            LinearWeight::Adapted(a) => a.d_out(),
        }
    }

    pub fn adapter(&self) -> Option<&SvdAdapter> {
        match &self.weight {
            LinearWeight::Adapted(a) => Some(a),
            LinearWeight::Frozen(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(Linear),
    Activation(Activation),
}

#[derive(Debug, Clone)]
enum LayerCache {
    Linear {
        input: Matrix,
        adapter: Option<AdapterCache>,
    },
    Activation {
        input: Matrix,
        output: Matrix,
    },
}

/// Per-layer intermediates from [`ToyModel::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    layers: Vec<LayerCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub adapter: Option<AdapterGrads>,
    pub bias: Option<Vec<f64>>,
}

/// Gradients aligned with the model's layers; `None` for activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<LinearGrads>>,
}

impl Gradients {
    /// Flattened in the same order as [`ToyModel::trainables`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.layers.iter().flatten() {
            if let Some(a) = &g.adapter {
                out.extend_from_slice(a.p.data());
                out.extend_from_slice(&a.lambda);
                out.extend_from_slice(a.q.data());
            }
            if let Some(b) = &g.bias {
                out.extend_from_slice(b);
            }
        }
        out
    }

    /// Adapter gradients keyed by layer index.
    pub fn adapter(&self, layer: usize) -> Option<&AdapterGrads> {
        self.layers.get(layer)?.as_ref()?.adapter.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    layers: Vec<Layer>,
    loss: Loss,
    version: u64,
}

impl ToyModel {
    pub fn new(layers: Vec<Layer>, loss: Loss) -> Result<Self> {
        let mut dim: Option<usize> = None;
        let mut ids = std::collections::BTreeSet::new();
        for (i, layer) in layers.iter().enumerate() {
            if let Layer::Linear(lin) = layer {
                if let Some(d) = dim {
                    if d != lin.d_in() {
                        return Err(Error::shape("ToyModel::new", format!("layer {i} input {d}"), lin.d_in()));
                    }
                }
                if let Some(b) = &lin.bias {
                    if b.len() != lin.d_out() {
                        return Err(Error::shape("ToyModel::new", format!("bias {}", lin.d_out()), b.len()));
                    }
                }
                if let Some(a) = lin.adapter() {
                    if !ids.insert(a.id().to_string()) {
                        return Err(Error::Parameter(format!("duplicate adapter id {}", a.id())));
                    }
                }
                dim = Some(lin.d_out());
            }
        }
        if dim.is_none() {
            return Err(Error::Parameter("model needs at least one linear layer".into()));
        }
        Ok(Self { layers, loss, version: 0 })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn loss_kind(&self) -> Loss {
        self.loss
    }

    pub fn input_dim(&self) -> usize {
        self.linears().next().map_or(0, |(_, l)| l.d_in())
    }

    pub fn output_dim(&self) -> usize {
        self.linears().last().map_or(0, |(_, l)| l.d_out())
    }

    fn linears(&self) -> impl Iterator<Item = (usize, &Linear)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::Linear(lin) => Some((i, lin)),
            Layer::Activation(_) => None,
        })
    }

    /// Adapters in layer order.
    pub fn adapters(&self) -> Vec<&SvdAdapter> {
        self.linears().filter_map(|(_, l)| l.adapter()).collect()
    }

    /// Layer index and mutable adapter, in layer order.
    pub fn adapters_mut(&mut self) -> Vec<(usize, &mut SvdAdapter)> {
        self.version += 1;
        self.layers
            .iter_mut()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Layer::Linear(Linear {
                    weight: LinearWeight::Adapted(a),
                    ..
                }) => Some((i, a)),
                _ => None,
            })
            .collect()
    }

    pub(crate) fn linear_mut(&mut self, layer: usize) -> Option<&mut Linear> {
        self.version += 1;
        match self.layers.get_mut(layer)? {
            Layer::Linear(l) => Some(l),
            Layer::Activation(_) => None,
        }
    }

    pub fn total_rank(&self) -> usize {
        self.adapters().iter().map(|a| a.rank()).sum()
    }

    /// Trainable parameter count: adapter factors plus biases.
    pub fn param_count(&self) -> usize {
        self.linears()
            .map(|(_, l)| l.adapter().map_or(0, SvdAdapter::param_count) + l.bias.as_ref().map_or(0, Vec::len))
            .sum()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if x.rows() != self.input_dim() {
            return Err(Error::shape(
                "ToyModel::forward",
                format!("input with {} rows", self.input_dim()),
                format!("{}x{}", x.rows(), x.cols()),
            ));
        }
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Linear(lin) => {
                    let (mut y, adapter) = match &lin.weight {
                        LinearWeight::Frozen(w) => (w.matmul(&h)?, None),
                        LinearWeight::Adapted(a) => {
                            let (y, c) = a.forward_cached(&h)?;
                            (y, Some(c))
                        }
                    };
                    if let Some(b) = &lin.bias {
                        add_bias(&mut y, b);
                    }
                    caches.push(LayerCache::Linear { input: h, adapter });
                    h = y;
                }
                Layer::Activation(act) => {
                    let y = act.apply(&h);
                    caches.push(LayerCache::Activation {
                        input: h,
                        output: y.clone(),
                    });
                    h = y;
                }
            }
        }
        Ok((
            h,
            ForwardCache {
                version: self.version,
                layers: caches,
            },
        ))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.forward(x).map(|(y, _)| y)
    }

    pub fn data_loss(&self, x: &Matrix, targets: &Matrix) -> Result<f64> {
        let y = self.predict(x)?;
        Ok(self.loss.evaluate(&y, targets)?.0)
    }

    /// Sum of the orthogonality penalty over all adapters.
    pub fn regularizer(&self) -> f64 {
        self.adapters().iter().map(|a| a.ortho_regularizer()).sum()
    }

    /// `data_loss + gamma · regularizer`
    pub fn objective(&self, x: &Matrix, targets: &Matrix, gamma: f64) -> Result<f64> {
        Ok(self.data_loss(x, targets)? + gamma * self.regularizer())
    }

    /// Reverse pass. `grad_out` is `dL/d(outputs)`; the orthogonality
    /// penalty's gradient is added with weight `gamma`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Matrix, gamma: f64) -> Result<Gradients> {
        if cache.version != self.version || cache.layers.len() != self.layers.len() {
            return Err(Error::Stale(format!(
                "forward cache from model version {} used at version {}",
                cache.version, self.version
            )));
        }
        let mut grads: Vec<Option<LinearGrads>> = vec![None; self.layers.len()];
        let mut g = grad_out.clone();
        for (i, (layer, c)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            match (layer, c) {
                (Layer::Linear(lin), LayerCache::Linear { input, adapter }) => {
                    let bias = lin.bias.as_ref().map(|_| (0..g.rows()).map(|r| g.row(r).iter().sum()).collect());
                    let (adapter_grads, grad_in) = match (&lin.weight, adapter) {
                        (LinearWeight::Frozen(w), _) => (None, w.t_matmul(&g)?),
                        (LinearWeight::Adapted(a), Some(ac)) => {
                            let (mut ag, mut grad_in) = a.backward(input, ac, &g)?;
                            grad_in.add_assign(&a.base_weight().t_matmul(&g)?)?;
                            if gamma != 0.0 {
                                let (rp, rq) = a.ortho_regularizer_grad();
                                ag.p.axpy(gamma, &rp)?;
                                ag.q.axpy(gamma, &rq)?;
                            }
                            (Some(ag), grad_in)
                        }
                        (LinearWeight::Adapted(_), None) => {
                            return Err(Error::Stale(format!("layer {i} cache lacks adapter state")));
                        }
                    };
                    grads[i] = Some(LinearGrads {
                        adapter: adapter_grads,
                        bias,
                    });
                    g = grad_in;
                }
                (Layer::Activation(act), LayerCache::Activation { input, output }) => {
                    let data = match act {
                        Activation::Tanh => g
                            .data()
                            .iter()
                            .zip(output.data())
                            .map(|(gv, y)| gv * (1.0 - y * y))
                            .collect(),
                        Activation::Relu => g
                            .data()
                            .iter()
                            .zip(input.data())
                            .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                            .collect(),
                    };
                    g = Matrix::from_vec(g.rows(), g.cols(), data)?;
                }
                _ => return Err(Error::Stale(format!("layer {i} cache kind mismatch"))),
            }
        }
        Ok(Gradients { layers: grads })
    }

    /// Objective value and full gradient on one batch.
    pub fn loss_and_grad(&self, x: &Matrix, targets: &Matrix, gamma: f64) -> Result<(f64, Gradients)> {
        let (y, cache) = self.forward(x)?;
        let (loss, g) = self.loss.evaluate(&y, targets)?;
        let grads = self.backward(&cache, &g, gamma)?;
        Ok((loss, grads))
    }

    /// All trainable values: per linear layer, adapter P, λ, Q (row-major), then bias.
    pub fn trainables(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, l) in self.linears() {
            if let Some(a) = l.adapter() {
                out.extend_from_slice(a.p().data());
                out.extend_from_slice(a.lambda());
                out.extend_from_slice(a.q().data());
            }
            if let Some(b) = &l.bias {
                out.extend_from_slice(b);
            }
        }
        out
    }

    pub fn set_trainables(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.param_count();
        if values.len() != expected {
            return Err(Error::shape("set_trainables", expected, values.len()));
        }
        self.version += 1;
        let mut pos = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&values[pos..pos + dst.len()]);
            pos += dst.len();
        };
        for layer in &mut self.layers {
            if let Layer::Linear(l) = layer {
                if let LinearWeight::Adapted(a) = &mut l.weight {
                    let (p, lambda, q) = a.factors_mut();
                    take(p.data_mut());
                    take(lambda);
                    take(q.data_mut());
                }
                if let Some(b) = &mut l.bias {
                    take(b);
                }
            }
        }
        Ok(())
    }
}

fn add_bias(y: &mut Matrix, b: &[f64]) {
    let cols = y.cols();
    for (i, bi) in b.iter().enumerate() {
        for v in &mut y.data_mut()[i * cols..(i + 1) * cols] {
            *v += bi;
        }
    }
}
