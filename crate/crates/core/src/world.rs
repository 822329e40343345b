//! Labeled Gaussian-mixture data world.
//!
//! The mixture plays the role of the data distribution, and because the
//! forward process maps each component `N(m, S)` to
//! `N(alpha(t) m, alpha(t)^2 S + beta(t)^2 I)`, everything a neural network
//! would be trained to estimate is available in closed form here: the noised
//! score, the optimal noise prediction, and the Bayes class posterior.
//!
//! Components carry label *sets*. A component labeled `{y, z}` models data
//! that legitimately contains structure of both classes; intersection
//! conditioning selects exactly those components.

use std::collections::BTreeSet;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use thiserror::Error;

use crate::rng::Generator;
use crate::schedule::{ScheduleError, ScheduleTable};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world: {0}")]
    Invalid(String),
    #[error("conditioning {0} selects no component")]
    EmptyConditioning(String),
    #[error("invalid conditioning: {0}")]
    InvalidConditioning(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// One mixture component: a Gaussian with a weight and a nonempty label set.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub weight: f64,
    pub labels: BTreeSet<usize>,
}

impl Component {
    /// Isotropic component: covariance `var * I`.
    pub fn iso(mean: Vec<f64>, var: f64, weight: f64, labels: &[usize]) -> Self {
        let dim = mean.len();
        Self {
            mean: DVector::from_vec(mean),
            cov: DMatrix::identity(dim, dim) * var,
            weight,
            labels: labels.iter().copied().collect(),
        }
    }
}

/// Which slice of the mixture an operation conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ConditioningSet {
    /// All components.
    Unconditional,
    /// Components whose label set contains the class.
    Single(usize),
    /// Components whose label set contains both classes (`y != y_tilde`).
    Intersection(usize, usize),
}

impl std::fmt::Display for ConditioningSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConditioningSet::Unconditional => write!(f, "unconditional"),
            ConditioningSet::Single(y) => write!(f, "single({y})"),
            ConditioningSet::Intersection(y, z) => write!(f, "intersection({y}, {z})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MixtureWorld {
    components: Vec<Component>,
    num_classes: usize,
    dim: usize,
    /// Lower Cholesky factor of each covariance, for sampling.
    chol: Vec<DMatrix<f64>>,
}

impl MixtureWorld {
    pub fn new(components: Vec<Component>, num_classes: usize) -> Result<Self, WorldError> {
        if components.is_empty() {
            return Err(WorldError::Invalid("world has no components".into()));
        }
        if num_classes == 0 {
            return Err(WorldError::Invalid("num_classes must be positive".into()));
        }
        let dim = components[0].mean.len();
        if dim == 0 {
            return Err(WorldError::Invalid("dimension must be positive".into()));
        }
        let weight_sum: f64 = components.iter().map(|c| c.weight).sum();
        if (weight_sum - 1.0).abs() > 1e-12 {
            return Err(WorldError::Invalid(format!(
                "world.weights must sum to 1, got {weight_sum}"
            )));
        }
        let mut covered = vec![false; num_classes];
        let mut chol = Vec::with_capacity(components.len());
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.cov.nrows() != dim || c.cov.ncols() != dim {
                return Err(WorldError::Invalid(format!(
                    "component {i} has inconsistent dimensions"
                )));
            }
            if c.weight <= 0.0 || !c.weight.is_finite() {
                return Err(WorldError::Invalid(format!(
                    "component {i} weight {} is not positive",
                    c.weight
                )));
            }
            if (&c.cov - c.cov.transpose()).amax() > 1e-12 {
                return Err(WorldError::Invalid(format!(
                    "component {i} covariance is not symmetric"
                )));
            }
            let factor = Cholesky::new(c.cov.clone()).ok_or_else(|| {
                WorldError::Invalid(format!("component {i} covariance is not positive definite"))
            })?;
            chol.push(factor.l());
            if c.labels.is_empty() {
                return Err(WorldError::Invalid(format!("component {i} has no labels")));
            }
            for &l in &c.labels {
                if l >= num_classes {
                    return Err(WorldError::Invalid(format!(
                        "component {i} label {l} outside [0, {num_classes})"
                    )));
                }
                covered[l] = true;
            }
        }
        if let Some(missing) = covered.iter().position(|&c| !c) {
            return Err(WorldError::Invalid(format!(
                "class {missing} appears in no component"
            )));
        }
        Ok(Self {
            components,
            num_classes,
            dim,
            chol,
        })
    }

    /// The bundled demonstration world: three classes on the plane plus one
    /// dual-labeled component between classes 0 and 1 that models their
    /// intersection region. Shortcut classifiers that cue on a single
    /// coordinate separate the classes cleanly, which is what makes
    /// transferability measurable here.
    pub fn demo_shortcut() -> Self {
        Self::new(
            vec![
                Component::iso(vec![2.0, 2.0], 0.25, 0.30, &[0]),
                Component::iso(vec![10.0, 10.0], 0.25, 0.30, &[1]),
                Component::iso(vec![-6.0, -6.0], 0.25, 0.25, &[2]),
                Component::iso(vec![7.0, 7.0], 0.25, 0.15, &[0, 1]),
            ],
            3,
        )
        .expect("demo world is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// Indices of the components selected by `cond`.
    pub fn selected(&self, cond: ConditioningSet) -> Result<Vec<usize>, WorldError> {
        if let ConditioningSet::Intersection(y, z) = cond {
            if y == z {
                return Err(WorldError::InvalidConditioning(format!(
                    "intersection requires distinct classes, got ({y}, {z})"
                )));
            }
        }
        let picked: Vec<usize> = self
            .components
            .iter()
            .enumerate()
            .filter(|(_, c)| match cond {
                ConditioningSet::Unconditional => true,
                ConditioningSet::Single(y) => c.labels.contains(&y),
                ConditioningSet::Intersection(y, z) => {
                    c.labels.contains(&y) && c.labels.contains(&z)
                }
            })
            .map(|(i, _)| i)
            .collect();
        if picked.is_empty() {
            return Err(WorldError::EmptyConditioning(cond.to_string()));
        }
        Ok(picked)
    }

    /// Draw a data point from `p(x0 | y in cond)`; returns the point and the
    /// generating component's label set.
    pub fn sample_data(
        &self,
        cond: ConditioningSet,
        rng: &mut Generator,
    ) -> Result<(DVector<f64>, BTreeSet<usize>), WorldError> {
        let picked = self.selected(cond)?;
        let total: f64 = picked.iter().map(|&i| self.components[i].weight).sum();
        let mut u: f64 = rng.random::<f64>() * total;
        let mut chosen = picked[picked.len() - 1];
        for &i in &picked {
            u -= self.components[i].weight;
            if u <= 0.0 {
                chosen = i;
                break;
            }
        }
        let c = &self.components[chosen];
        let z = crate::rng::standard_normal(rng, self.dim);
        let x = &c.mean + &self.chol[chosen] * z;
        Ok((x, c.labels.clone()))
    }

    /// Per-component noised Gaussian parameters at time `t`:
    /// `N(alpha m, alpha^2 S + beta^2 I)`.
    fn noised_gaussians(
        &self,
        picked: &[usize],
        t: usize,
        table: &ScheduleTable,
    ) -> Result<Vec<NoisedGaussian>, WorldError> {
        let (alpha, beta) = table.alpha_beta(t)?;
        self.gaussians_at(picked, alpha, beta)
    }

    fn gaussians_at(
        &self,
        picked: &[usize],
        alpha: f64,
        beta: f64,
    ) -> Result<Vec<NoisedGaussian>, WorldError> {
        picked
            .iter()
            .map(|&i| {
                let c = &self.components[i];
                let mean = &c.mean * alpha;
                let cov = &c.cov * (alpha * alpha)
                    + DMatrix::identity(self.dim, self.dim) * (beta * beta);
                NoisedGaussian::new(mean, cov, c.weight)
                    .ok_or_else(|| WorldError::Invalid(format!("noised component {i} degenerate")))
            })
            .collect()
    }

    /// Log density of the conditioned mixture pushed through the forward
    /// process, `log p(x_t | y in cond)`.
    pub fn log_density_noised(
        &self,
        cond: ConditioningSet,
        x: &DVector<f64>,
        t: usize,
        table: &ScheduleTable,
    ) -> Result<f64, WorldError> {
        let picked = self.selected(cond)?;
        let gs = self.noised_gaussians(&picked, t, table)?;
        let total: f64 = gs.iter().map(|g| g.weight).sum();
        let logs: Vec<f64> = gs
            .iter()
            .map(|g| (g.weight / total).ln() + g.log_pdf(x))
            .collect();
        Ok(log_sum_exp(&logs))
    }

    /// Exact score `grad_x log p(x_t | y in cond)`.
    pub fn noised_score(
        &self,
        cond: ConditioningSet,
        x: &DVector<f64>,
        t: usize,
        table: &ScheduleTable,
    ) -> Result<DVector<f64>, WorldError> {
        let picked = self.selected(cond)?;
        let gs = self.noised_gaussians(&picked, t, table)?;
        let (resp, grads) = responsibilities(&gs, x);
        let mut score = DVector::zeros(self.dim);
        for (r, g) in resp.iter().zip(&grads) {
            score += g * *r;
        }
        Ok(score)
    }

    /// Jacobian of the score (the Hessian of the log density). Needed to
    /// differentiate through the oracle noise prediction.
    pub fn noised_score_jacobian(
        &self,
        cond: ConditioningSet,
        x: &DVector<f64>,
        t: usize,
        table: &ScheduleTable,
    ) -> Result<DMatrix<f64>, WorldError> {
        let picked = self.selected(cond)?;
        let gs = self.noised_gaussians(&picked, t, table)?;
        let (resp, grads) = responsibilities(&gs, x);
        let mut score = DVector::zeros(self.dim);
        let mut jac = DMatrix::zeros(self.dim, self.dim);
        for ((r, g), gauss) in resp.iter().zip(&grads).zip(&gs) {
            score += g * *r;
            jac -= gauss.precision() * *r;
            jac += g * g.transpose() * *r;
        }
        jac -= &score * score.transpose();
        Ok(jac)
    }

    /// The optimal noise prediction `-beta(t) * score`; exact stand-in for a
    /// perfectly trained conditional denoiser.
    pub fn oracle_epsilon(
        &self,
        cond: ConditioningSet,
        x: &DVector<f64>,
        t: usize,
        table: &ScheduleTable,
    ) -> Result<DVector<f64>, WorldError> {
        let (_, beta) = table.alpha_beta(t)?;
        Ok(self.noised_score(cond, x, t, table)? * (-beta))
    }

    /// Exact class posterior `p(y | x_t)` over all classes. A multi-label
    /// component contributes its full weight to each of its labels before
    /// renormalization.
    pub fn bayes_posterior(
        &self,
        x: &DVector<f64>,
        t: usize,
        table: &ScheduleTable,
    ) -> Result<DVector<f64>, WorldError> {
        let logq = self.class_log_masses(x, t, table)?;
        Ok(softmax(&logq))
    }

    /// Unnormalized per-class log masses `log sum_{k: y in labels_k} w_k N_k(x)`.
    /// Softmaxing these gives the Bayes posterior, so they serve directly as
    /// classifier logits.
    pub fn class_log_masses(
        &self,
        x: &DVector<f64>,
        t: usize,
        table: &ScheduleTable,
    ) -> Result<DVector<f64>, WorldError> {
        let all: Vec<usize> = (0..self.components.len()).collect();
        let gs = self.noised_gaussians(&all, t, table)?;
        let logs: Vec<f64> = gs
            .iter()
            .map(|g| g.weight.ln() + g.log_pdf(x))
            .collect();
        let mut out = DVector::zeros(self.num_classes);
        for y in 0..self.num_classes {
            let class_logs: Vec<f64> = self
                .components
                .iter()
                .zip(&logs)
                .filter(|(c, _)| c.labels.contains(&y))
                .map(|(_, &l)| l)
                .collect();
            out[y] = if class_logs.is_empty() {
                f64::NEG_INFINITY
            } else {
                log_sum_exp(&class_logs)
            };
        }
        Ok(out)
    }

    /// Gradient of `class_log_masses` for one class (at time `t`).
    pub fn class_log_mass_grad(
        &self,
        x: &DVector<f64>,
        class: usize,
        t: usize,
        table: &ScheduleTable,
    ) -> Result<DVector<f64>, WorldError> {
        let (alpha, beta) = table.alpha_beta(t)?;
        self.class_log_mass_grad_at(x, class, alpha, beta)
    }

    /// `class_log_masses` on the raw (unnoised) mixture.
    pub fn class_log_masses_raw(&self, x: &DVector<f64>) -> Result<DVector<f64>, WorldError> {
        let all: Vec<usize> = (0..self.components.len()).collect();
        let gs = self.gaussians_at(&all, 1.0, 0.0)?;
        let logs: Vec<f64> = gs.iter().map(|g| g.weight.ln() + g.log_pdf(x)).collect();
        let mut out = DVector::zeros(self.num_classes);
        for y in 0..self.num_classes {
            let class_logs: Vec<f64> = self
                .components
                .iter()
                .zip(&logs)
                .filter(|(c, _)| c.labels.contains(&y))
                .map(|(_, &l)| l)
                .collect();
            out[y] = log_sum_exp(&class_logs);
        }
        Ok(out)
    }

    /// `class_log_mass_grad` on the raw (unnoised) mixture.
    pub fn class_log_mass_grad_raw(
        &self,
        x: &DVector<f64>,
        class: usize,
    ) -> Result<DVector<f64>, WorldError> {
        self.class_log_mass_grad_at(x, class, 1.0, 0.0)
    }

    fn class_log_mass_grad_at(
        &self,
        x: &DVector<f64>,
        class: usize,
        alpha: f64,
        beta: f64,
    ) -> Result<DVector<f64>, WorldError> {
        let picked: Vec<usize> = (0..self.components.len())
            .filter(|&i| self.components[i].labels.contains(&class))
            .collect();
        if picked.is_empty() {
            return Err(WorldError::EmptyConditioning(format!("class {class}")));
        }
        let gs = self.gaussians_at(&picked, alpha, beta)?;
        let (resp, grads) = responsibilities(&gs, x);
        let mut out = DVector::zeros(self.dim);
        for (r, g) in resp.iter().zip(&grads) {
            out += g * *r;
        }
        Ok(out)
    }

    /// Class-conditional data means, the default label embeddings used by
    /// similarity targeting.
    pub fn class_embeddings(&self) -> Vec<DVector<f64>> {
        (0..self.num_classes)
            .map(|y| {
                let mut total = 0.0;
                let mut mean = DVector::zeros(self.dim);
                for c in &self.components {
                    if c.labels.contains(&y) {
                        total += c.weight;
                        mean += &c.mean * c.weight;
                    }
                }
                mean / total
            })
            .collect()
    }
}

/// One noised component with its Cholesky factor cached.
struct NoisedGaussian {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    weight: f64,
    log_norm: f64,
}

impl NoisedGaussian {
    fn new(mean: DVector<f64>, cov: DMatrix<f64>, weight: f64) -> Option<Self> {
        let dim = mean.len() as f64;
        let chol = Cholesky::new(cov)?;
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        let log_norm = -0.5 * (dim * (2.0 * std::f64::consts::PI).ln() + log_det);
        Some(Self {
            mean,
            chol,
            weight,
            log_norm,
        })
    }

    fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let solved = self.chol.solve(&diff);
        self.log_norm - 0.5 * diff.dot(&solved)
    }

    /// `-C^{-1} (x - m)`, the gradient of this component's log pdf.
    fn log_pdf_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let diff = x - &self.mean;
        -self.chol.solve(&diff)
    }

    fn precision(&self) -> DMatrix<f64> {
        self.chol
            .solve(&DMatrix::identity(self.mean.len(), self.mean.len()))
    }
}

/// Posterior responsibilities and per-component log-pdf gradients at `x`.
fn responsibilities(gs: &[NoisedGaussian], x: &DVector<f64>) -> (Vec<f64>, Vec<DVector<f64>>) {
    let logs: Vec<f64> = gs
        .iter()
        .map(|g| g.weight.ln() + g.log_pdf(x))
        .collect();
    let lse = log_sum_exp(&logs);
    let resp: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();
    let grads: Vec<DVector<f64>> = gs.iter().map(|g| g.log_pdf_grad(x)).collect();
    (resp, grads)
}

pub(crate) fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    DVector::from_vec(exps.into_iter().map(|e| e / sum).collect())
}
