//! AdamW with per-direction moment state that follows rank changes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{Action, RankChange};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::trainer::model::{Gradients, Layer, LinearWeight, ToyModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_lr() -> f64 {
    1e-2
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !finite_pos(self.lr) {
            return Err(Error::config("optimizer.lr", format!("must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("optimizer.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer.beta2", "must lie in [0, 1)"));
        }
        if !finite_pos(self.eps) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("optimizer.weight_decay", "must be non-negative"));
        }
        Ok(())
    }

    /// One AdamW update of a single scalar. `t` is the 1-based step count of
    /// the slot the scalar lives in.
    fn update(&self, w: &mut f64, g: f64, m: &mut f64, v: &mut f64, t: u64) {
        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
        let m_hat = *m / (1.0 - self.beta1.powi(t as i32));
        let v_hat = *v / (1.0 - self.beta2.powi(t as i32));
        *w -= self.lr * self.weight_decay * *w;
        *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
    }
}

/// First and second moments for one adapter. Column i of the P moments, entry
/// i of the λ moments and row i of the Q moments belong to direction i, which
/// carries its own step count for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterMoments {
    pub m_p: Matrix,
    pub v_p: Matrix,
    pub m_lambda: Vec<f64>,
    pub v_lambda: Vec<f64>,
    pub m_q: Matrix,
    pub v_q: Matrix,
    pub steps: Vec<u64>,
}

impl AdapterMoments {
    fn zeros(d_out: usize, rank: usize, d_in: usize) -> Self {
        Self {
            m_p: Matrix::zeros(d_out, rank),
            v_p: Matrix::zeros(d_out, rank),
            m_lambda: vec![0.0; rank],
            v_lambda: vec![0.0; rank],
            m_q: Matrix::zeros(rank, d_in),
            v_q: Matrix::zeros(rank, d_in),
            steps: vec![0; rank],
        }
    }

    pub fn rank(&self) -> usize {
        self.steps.len()
    }

    fn remove_direction(&mut self, i: usize) {
        self.m_p.remove_column(i);
        self.v_p.remove_column(i);
        self.m_lambda.remove(i);
        self.v_lambda.remove(i);
        self.m_q.remove_row(i);
        self.v_q.remove_row(i);
        self.steps.remove(i);
    }

    fn push_direction(&mut self) {
        let zc = vec![0.0; self.m_p.rows()];
        let zr = vec![0.0; self.m_q.cols()];
        self.m_p.push_column(&zc).expect("rows match");
        self.v_p.push_column(&zc).expect("rows match");
        self.m_lambda.push(0.0);
        self.v_lambda.push(0.0);
        self.m_q.push_row(&zr).expect("cols match");
        self.v_q.push_row(&zr).expect("cols match");
        self.steps.push(0);
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
struct BiasMoments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    config: AdamWConfig,
    adapters: BTreeMap<String, AdapterMoments>,
    biases: BTreeMap<usize, BiasMoments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, model: &ToyModel) -> Self {
        let mut adapters = BTreeMap::new();
        let mut biases = BTreeMap::new();
        for (i, layer) in model.layers().iter().enumerate() {
            if let Layer::Linear(lin) = layer {
                if let Some(a) = lin.adapter() {
                    adapters.insert(a.id().to_string(), AdapterMoments::zeros(a.d_out(), a.rank(), a.d_in()));
                }
                if let Some(b) = &lin.bias {
                    biases.insert(
                        i,
                        BiasMoments {
                            m: vec![0.0; b.len()],
                            v: vec![0.0; b.len()],
                            steps: 0,
                        },
                    );
                }
            }
        }
        Self {
            config,
            adapters,
            biases,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn moments(&self, adapter_id: &str) -> Option<&AdapterMoments> {
        self.adapters.get(adapter_id)
    }

    /// Keeps moment slices aligned with an adapter's directions: a pruned
    /// direction's state is dropped, an expanded one starts at zero.
    pub fn on_rank_change(&mut self, change: &RankChange) -> Result<()> {
        let st = self
            .adapters
            .get_mut(&change.adapter_id)
            .ok_or_else(|| Error::Stale(format!("no optimizer state for adapter {}", change.adapter_id)))?;
        if st.rank() != change.rank_before {
            return Err(Error::Stale(format!(
                "optimizer state for {} has rank {}, change expects {}",
                change.adapter_id,
                st.rank(),
                change.rank_before
            )));
        }
        match change.action {
            Action::Prune => st.remove_direction(change.index),
            Action::Expand => st.push_direction(),
        }
        Ok(())
    }

    pub fn step(&mut self, model: &mut ToyModel, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != model.layers().len() {
            return Err(Error::shape("AdamW::step", model.layers().len(), grads.layers.len()));
        }
        let cfg = self.config;
        for (i, g) in grads.layers.iter().enumerate() {
            let Some(g) = g else { continue };
            let lin = model
                .linear_mut(i)
                .ok_or_else(|| Error::shape("AdamW::step", "linear layer", format!("layer {i}")))?;
            if let (LinearWeight::Adapted(a), Some(ga)) = (&mut lin.weight, &g.adapter) {
                let st = self
                    .adapters
                    .get_mut(a.id())
                    .ok_or_else(|| Error::Stale(format!("no optimizer state for adapter {}", a.id())))?;
                let r = a.rank();
                if st.rank() != r || ga.lambda.len() != r || ga.p.shape() != a.p().shape() || ga.q.shape() != a.q().shape() {
                    return Err(Error::shape(
                        "AdamW::step",
                        format!("rank {r} state and grads for {}", a.id()),
                        format!("state rank {}, grad rank {}", st.rank(), ga.lambda.len()),
                    ));
                }
                for s in &mut st.steps {
                    *s += 1;
                }
                let (p, lambda, q) = a.factors_mut();
                let d_in = q.cols();
                for (k, w) in p.data_mut().iter_mut().enumerate() {
                    let t = st.steps[k % r];
                    cfg.update(w, ga.p.data()[k], &mut st.m_p.data_mut()[k], &mut st.v_p.data_mut()[k], t);
                }
                for (k, w) in lambda.iter_mut().enumerate() {
                    cfg.update(w, ga.lambda[k], &mut st.m_lambda[k], &mut st.v_lambda[k], st.steps[k]);
                }
                for (k, w) in q.data_mut().iter_mut().enumerate() {
                    let t = st.steps[k / d_in];
                    cfg.update(w, ga.q.data()[k], &mut st.m_q.data_mut()[k], &mut st.v_q.data_mut()[k], t);
                }
            }
            if let (Some(b), Some(gb)) = (&mut lin.bias, &g.bias) {
                let st = self.biases.get_mut(&i).ok_or_else(|| Error::Stale(format!("no bias state for layer {i}")))?;
                if gb.len() != b.len() {
                    return Err(Error::shape("AdamW::step", b.len(), gb.len()));
                }
                st.steps += 1;
                for (k, w) in b.iter_mut().enumerate() {
                    cfg.update(w, gb[k], &mut st.m[k], &mut st.v[k], st.steps);
                }
            }
        }
        Ok(())
    }
}
