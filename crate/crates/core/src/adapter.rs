//! SVD-form adapters: `W' = W + (alpha / r_init) · P · diag(λ) · Q`.
//!
//! `P` is `d_out × r`, `Q` is `r × d_in` and `λ` has `r` entries. One
//! singular direction is the triple (column i of P, λ_i, row i of Q); pruning
//! and expansion add or remove whole directions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{gram_schmidt_extend, Matrix};
use crate::rng::SeededRng;

pub const DEFAULT_INIT_STD: f64 = 0.02;
pub const DEFAULT_SMALL_VALUE: f64 = 1e-4;

/// How a newly added singular direction is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitStrategy {
    /// λ = 0, Gaussian vectors. The forward map is unchanged at insertion.
    #[default]
    ZeroImpact,
    /// λ = `value`, unit vectors orthogonal to the existing directions.
    SmallInit {
        #[serde(default = "default_small_value")]
        value: f64,
    },
    /// λ = 0 and all-zero vectors.
    ZeroInit,
    /// λ = 0, unit vectors orthogonal to the existing directions.
    OrthogonalInit,
}

fn default_small_value() -> f64 {
    DEFAULT_SMALL_VALUE
}

impl InitStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            InitStrategy::ZeroImpact => "zero_impact",
            InitStrategy::SmallInit { .. } => "small_init",
            InitStrategy::ZeroInit => "zero_init",
            InitStrategy::OrthogonalInit => "orthogonal_init",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let InitStrategy::SmallInit { value } = self {
            if !value.is_finite() || *value <= 0.0 {
                return Err(Error::Parameter(format!(
                    "small_init value must be positive and finite, got {value}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Prune,
    Expand,
}

/// Structural record of one prune or expand on a single adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct RankChange {
    pub adapter_id: String,
    pub action: Action,
    pub rank_before: usize,
    pub rank_after: usize,
    /// Index of the removed direction, or of the appended one.
    pub index: usize,
    /// |λ| of the removed direction, or the init strategy name.
    pub detail: String,
}

/// Gradients with respect to an adapter's trainable factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub p: Matrix,
    pub lambda: Vec<f64>,
    pub q: Matrix,
}

impl AdapterGrads {
    pub fn zeros_like(adapter: &SvdAdapter) -> Self {
        Self {
            p: Matrix::zeros(adapter.d_out(), adapter.rank()),
            lambda: vec![0.0; adapter.rank()],
            q: Matrix::zeros(adapter.rank(), adapter.d_in()),
        }
    }
}

/// Intermediate values of the adapter branch kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AdapterCache {
    /// `Q · x`, r × batch.
    pub projected: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvdAdapter {
    id: String,
    base_w: Matrix,
    p: Matrix,
    lambda: Vec<f64>,
    q: Matrix,
    r_init: usize,
    r_max: usize,
    alpha: f64,
    init_std: f64,
}

impl SvdAdapter {
    /// New adapter at rank `r_init` with λ = 0 and Gaussian `P`, `Q`, so the
    /// effective weight starts equal to `base_w`.
    pub fn new(
        id: impl Into<String>,
        base_w: Matrix,
        r_init: usize,
        r_max: usize,
        alpha: f64,
        init_std: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let (d_out, d_in) = base_w.shape();
        let p = Matrix::gaussian(d_out, r_init, init_std, rng)?;
        let q = Matrix::gaussian(r_init, d_in, init_std, rng)?;
        Self::from_parts(id, base_w, p, vec![0.0; r_init], q, r_init, r_max, alpha, init_std)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        id: impl Into<String>,
        base_w: Matrix,
        p: Matrix,
        lambda: Vec<f64>,
        q: Matrix,
        r_init: usize,
        r_max: usize,
        alpha: f64,
        init_std: f64,
    ) -> Result<Self> {
        let id = id.into();
        if r_init == 0 || r_max < r_init {
            return Err(Error::Parameter(format!(
                "adapter {id}: need 1 <= r_init <= r_max, got r_init={r_init}, r_max={r_max}"
            )));
        }
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::Parameter(format!("adapter {id}: alpha must be positive, got {alpha}")));
        }
        if !init_std.is_finite() || init_std <= 0.0 {
            return Err(Error::Parameter(format!(
                "adapter {id}: init_std must be positive, got {init_std}"
            )));
        }
        let r = lambda.len();
        if p.rows() != base_w.rows() || q.cols() != base_w.cols() || p.cols() != r || q.rows() != r {
            return Err(Error::shape(
                "SvdAdapter::from_parts",
                format!("P {}x{r}, λ {r}, Q {r}x{}", base_w.rows(), base_w.cols()),
                format!("P {}x{}, λ {r}, Q {}x{}", p.rows(), p.cols(), q.rows(), q.cols()),
            ));
        }
        if r == 0 || r > r_max {
            return Err(Error::Parameter(format!(
                "adapter {id}: rank {r} outside [1, {r_max}]"
            )));
        }
        if !(base_w.is_finite() && p.is_finite() && q.is_finite() && lambda.iter().all(|v| v.is_finite())) {
            return Err(Error::Parameter(format!("adapter {id}: non-finite entries")));
        }
        Ok(Self {
            id,
            base_w,
            p,
            lambda,
            q,
            r_init,
            r_max,
            alpha,
            init_std,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn base_weight(&self) -> &Matrix {
        &self.base_w
    }

    pub fn p(&self) -> &Matrix {
        &self.p
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn rank(&self) -> usize {
        self.lambda.len()
    }

    pub fn r_init(&self) -> usize {
        self.r_init
    }

    pub fn r_max(&self) -> usize {
        self.r_max
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn init_std(&self) -> f64 {
        self.init_std
    }

    pub fn d_out(&self) -> usize {
        self.base_w.rows()
    }

    pub fn d_in(&self) -> usize {
        self.base_w.cols()
    }

    /// The fixed multiplier `alpha / r_init`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.r_init as f64
    }

    /// Trainable parameter count at the current rank.
    pub fn param_count(&self) -> usize {
        self.rank() * (self.d_out() + self.d_in() + 1)
    }

    /// Mutable access to the trainable factors, in the order P, λ, Q.
    pub fn factors_mut(&mut self) -> (&mut Matrix, &mut Vec<f64>, &mut Matrix) {
        (&mut self.p, &mut self.lambda, &mut self.q)
    }

    /// `(alpha / r_init) · P · diag(λ) · Q`, materialized.
    pub fn delta(&self) -> Matrix {
        let scaled_q = self.q.scale_rows(&self.lambda).expect("λ length tracks rank");
        self.p
            .matmul(&scaled_q)
            .expect("P cols track rank")
            .scale(self.scaling())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_cached(x).map(|(y, _)| y)
    }

    /// Base term plus adapter term; `W'` is never materialized, so a zero
    /// singular value contributes exactly zero.
    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, AdapterCache)> {
        if x.rows() != self.d_in() {
            return Err(Error::shape(
                "SvdAdapter::forward",
                format!("input with {} rows", self.d_in()),
                format!("{}x{}", x.rows(), x.cols()),
            ));
        }
        let mut y = self.base_w.matmul(x)?;
        let projected = self.q.matmul(x)?;
        let gated = projected.scale_rows(&self.lambda)?;
        let update = self.p.matmul(&gated)?;
        y.axpy(self.scaling(), &update)?;
        Ok((y, AdapterCache { projected }))
    }

    /// `‖PᵀP − I‖²_F + ‖QQᵀ − I‖²_F`
    pub fn ortho_regularizer(&self) -> f64 {
        let (gp, gq) = self.gram_residuals();
        let fp = gp.frobenius_norm();
        let fq = gq.frobenius_norm();
        fp * fp + fq * fq
    }

    /// Gradient of [`Self::ortho_regularizer`]: `4P(PᵀP − I)` and `4(QQᵀ − I)Q`.
    pub fn ortho_regularizer_grad(&self) -> (Matrix, Matrix) {
        let (gp, gq) = self.gram_residuals();
        let grad_p = self.p.matmul(&gp).expect("square gram").scale(4.0);
        let grad_q = gq.matmul(&self.q).expect("square gram").scale(4.0);
        (grad_p, grad_q)
    }

    fn gram_residuals(&self) -> (Matrix, Matrix) {
        let r = self.rank();
        let eye = Matrix::identity(r);
        let gp = self.p.t_matmul(&self.p).and_then(|g| g.sub(&eye)).expect("r×r");
        let gq = self.q.matmul_t(&self.q).and_then(|g| g.sub(&eye)).expect("r×r");
        (gp, gq)
    }

    /// Index of the direction with the smallest |λ_i|; ties go to the lowest index.
    pub fn weakest_direction(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.lambda.iter().enumerate().skip(1) {
            if v.abs() < self.lambda[best].abs() {
                best = i;
            }
        }
        best
    }

    /// Removes the direction with the smallest |λ_i|.
    pub fn prune_rank(&mut self) -> Result<RankChange> {
        let before = self.rank();
        if before <= 1 {
            return Err(Error::MinRank { id: self.id.clone() });
        }
        let i = self.weakest_direction();
        let removed = self.lambda.remove(i);
        self.p.remove_column(i);
        self.q.remove_row(i);
        Ok(RankChange {
            adapter_id: self.id.clone(),
            action: Action::Prune,
            rank_before: before,
            rank_after: self.rank(),
            index: i,
            detail: format!("{:?}", removed.abs()),
        })
    }

    /// Appends one direction initialized according to `strategy`.
    pub fn expand_rank(&mut self, strategy: InitStrategy, rng: &mut SeededRng) -> Result<RankChange> {
        strategy.validate()?;
        let before = self.rank();
        if before >= self.r_max {
            return Err(Error::MaxRank {
                id: self.id.clone(),
                r_max: self.r_max,
            });
        }
        let (d_out, d_in) = (self.d_out(), self.d_in());
        let (p_col, value, q_row) = match strategy {
            InitStrategy::ZeroImpact => {
                let p_col: Vec<f64> = (0..d_out).map(|_| rng.normal(self.init_std)).collect();
                let q_row: Vec<f64> = (0..d_in).map(|_| rng.normal(self.init_std)).collect();
                (p_col, 0.0, q_row)
            }
            InitStrategy::ZeroInit => (vec![0.0; d_out], 0.0, vec![0.0; d_in]),
            InitStrategy::SmallInit { value } => {
                let (p_col, q_row) = self.orthogonal_pair(rng)?;
                (p_col, value, q_row)
            }
            InitStrategy::OrthogonalInit => {
                let (p_col, q_row) = self.orthogonal_pair(rng)?;
                (p_col, 0.0, q_row)
            }
        };
        self.p.push_column(&p_col)?;
        self.q.push_row(&q_row)?;
        self.lambda.push(value);
        Ok(RankChange {
            adapter_id: self.id.clone(),
            action: Action::Expand,
            rank_before: before,
            rank_after: self.rank(),
            index: before,
            detail: strategy.name().to_string(),
        })
    }

    fn orthogonal_pair(&self, rng: &mut SeededRng) -> Result<(Vec<f64>, Vec<f64>)> {
        let cand_p: Vec<f64> = (0..self.d_out()).map(|_| rng.standard_normal()).collect();
        let p_col = gram_schmidt_extend(&self.p, &cand_p, rng)?;
        let cand_q: Vec<f64> = (0..self.d_in()).map(|_| rng.standard_normal()).collect();
        let q_row = gram_schmidt_extend(&self.q.transpose(), &cand_q, rng)?;
        Ok((p_col, q_row))
    }

    /// Gradients of a loss with respect to P, λ, Q given `dL/dy` for the
    /// batch `x` and the cached projection `Q·x`. Also returns the adapter
    /// branch's contribution to `dL/dx` (the base term is added by the caller).
    pub fn backward(&self, x: &Matrix, cache: &AdapterCache, grad_out: &Matrix) -> Result<(AdapterGrads, Matrix)> {
        let s = self.scaling();
        let gated = cache.projected.scale_rows(&self.lambda)?;
        // dL/dP = s · G · (Λ Q x)ᵀ
        let grad_p = grad_out.matmul_t(&gated)?.scale(s);
        // dL/d(Λ Q x) = s · Pᵀ G
        let grad_gated = self.p.t_matmul(grad_out)?.scale(s);
        let grad_lambda = (0..self.rank())
            .map(|i| crate::matrix::dot(grad_gated.row(i), cache.projected.row(i)))
            .collect();
        let grad_projected = grad_gated.scale_rows(&self.lambda)?;
        let grad_q = grad_projected.matmul_t(x)?;
        let grad_x = self.q.t_matmul(&grad_projected)?;
        Ok((
            AdapterGrads {
                p: grad_p,
                lambda: grad_lambda,
                q: grad_q,
            },
            grad_x,
        ))
    }
}
