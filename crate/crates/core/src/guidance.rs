//! Noise-prediction composition: classifier-free guidance, adversarial
//! boundary guidance, clean-sample prediction, and the transform-averaged
//! normalized adversarial classifier gradient.
//!
//! Boundary guidance blends three predictions of the same network:
//!
//! `eps_hat = eps_u + (omega - mu*omega) v_y + mu*rho v_{y&z}`
//!
//! where `v_y` points toward the true class and `v_{y&z}` toward the
//! intersection of the true and adversarial classes. At `mu = 0` this is
//! plain adversarial classifier guidance.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::predictor::{NoisePredictor, PredictorError};
use crate::schedule::{ScheduleError, ScheduleTable};
use crate::world::{softmax, ConditioningSet};

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("adversarial gradient is degenerate (norm below 1e-12)")]
    DegenerateGradient,
    #[error("schedule singular at t = {t}: alpha(t) = 0")]
    Singular { t: usize },
    #[error("invalid guidance parameters: {0}")]
    Invalid(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

/// Guidance strengths and the classifier window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceParams {
    /// Classifier-free guidance strength.
    pub omega: f64,
    /// Intersection guidance strength.
    pub rho: f64,
    /// Blend toward the class intersection, in [0, 1].
    pub mu: f64,
    /// Adversarial classifier guidance strength.
    pub s: f64,
    /// Time window `[c_l, c_u]` inside which the adversarial term applies.
    pub classifier_window: (usize, usize),
}

impl Default for GuidanceParams {
    fn default() -> Self {
        Self {
            omega: 7.5,
            rho: 7.5,
            mu: 0.2,
            s: 0.0,
            classifier_window: (0, 700),
        }
    }
}

impl GuidanceParams {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(GuidanceError::Invalid(format!(
                "mu must be in [0, 1], got {}",
                self.mu
            )));
        }
        for (name, v) in [("omega", self.omega), ("rho", self.rho), ("s", self.s)] {
            if !v.is_finite() || v < 0.0 {
                return Err(GuidanceError::Invalid(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if self.classifier_window.0 > self.classifier_window.1 {
            return Err(GuidanceError::Invalid(format!(
                "classifier window [{}, {}] is empty",
                self.classifier_window.0, self.classifier_window.1
            )));
        }
        Ok(())
    }

    pub fn in_classifier_window(&self, t: usize) -> bool {
        self.classifier_window.0 <= t && t <= self.classifier_window.1
    }
}

/// The three noise predictions one guided step consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonBundle {
    pub eps_uncond: DVector<f64>,
    pub eps_cond: DVector<f64>,
    pub eps_intersection: DVector<f64>,
}

impl EpsilonBundle {
    /// Direction toward the conditioned class.
    pub fn v_class(&self) -> DVector<f64> {
        &self.eps_cond - &self.eps_uncond
    }

    /// Direction toward the class intersection.
    pub fn v_intersection(&self) -> DVector<f64> {
        &self.eps_intersection - &self.eps_uncond
    }
}

/// Classifier-free guidance: `eps_u + omega (eps_y - eps_u)`.
pub fn cfg_epsilon(bundle: &EpsilonBundle, omega: f64) -> DVector<f64> {
    &bundle.eps_uncond + bundle.v_class() * omega
}

/// Adversarial boundary guidance:
/// `eps_u + (omega - mu*omega) v_y + mu*rho v_{y&z}`.
pub fn boundary_epsilon(bundle: &EpsilonBundle, params: &GuidanceParams) -> DVector<f64> {
    &bundle.eps_uncond
        + bundle.v_class() * (params.omega - params.mu * params.omega)
        + bundle.v_intersection() * (params.mu * params.rho)
}

/// Predicted clean sample `x0_hat = (x_t - beta(t) eps_hat) / alpha(t)`.
pub fn predict_x0(
    x_t: &DVector<f64>,
    eps_hat: &DVector<f64>,
    t: usize,
    table: &ScheduleTable,
) -> Result<DVector<f64>, GuidanceError> {
    let (alpha, beta) = table.alpha_beta(t)?;
    if alpha == 0.0 {
        return Err(GuidanceError::Singular { t });
    }
    Ok((x_t - eps_hat * beta) / alpha)
}

/// Add the adversarial term: `eps_hat - s beta(t) g`.
pub fn apply_adversarial(
    eps_hat: &DVector<f64>,
    g_unit: &DVector<f64>,
    s: f64,
    t: usize,
    table: &ScheduleTable,
) -> Result<DVector<f64>, GuidanceError> {
    let (_, beta) = table.alpha_beta(t)?;
    Ok(eps_hat - g_unit * (s * beta))
}

/// Map from the diffusion space to the space victims classify.
#[derive(Debug, Clone)]
pub enum Decoder {
    Identity,
    Linear { matrix: DMatrix<f64>, bias: DVector<f64> },
}

impl Decoder {
    /// A linear decoder must have full column rank so gradients survive the
    /// pull-back.
    pub fn linear(matrix: DMatrix<f64>, bias: DVector<f64>) -> Result<Self, GuidanceError> {
        if bias.len() != matrix.nrows() {
            return Err(GuidanceError::Invalid(
                "decoder bias length must match output rows".into(),
            ));
        }
        let cols = matrix.ncols();
        if matrix.clone().rank(1e-10) != cols {
            return Err(GuidanceError::Invalid(
                "linear decoder must have full column rank".into(),
            ));
        }
        Ok(Decoder::Linear { matrix, bias })
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Decoder::Identity => x.clone(),
            Decoder::Linear { matrix, bias } => matrix * x + bias,
        }
    }

    pub fn vjp(&self, upstream: &DVector<f64>) -> DVector<f64> {
        match self {
            Decoder::Identity => upstream.clone(),
            Decoder::Linear { matrix, .. } => matrix.transpose() * upstream,
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            Decoder::Identity => input_dim,
            Decoder::Linear { matrix, .. } => matrix.nrows(),
        }
    }
}

/// One differentiable map on decoded space, `x -> M x + c`.
#[derive(Debug, Clone)]
pub struct AffineTransform {
    pub matrix: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl AffineTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: DMatrix::identity(dim, dim),
            shift: DVector::zeros(dim),
        }
    }

    /// Rotation by `degrees` in the plane of the first two coordinates.
    pub fn rotation2d(dim: usize, degrees: f64) -> Self {
        assert!(dim >= 2, "rotation needs at least two coordinates");
        let rad = degrees.to_radians();
        let mut m = DMatrix::identity(dim, dim);
        m[(0, 0)] = rad.cos();
        m[(0, 1)] = -rad.sin();
        m[(1, 0)] = rad.sin();
        m[(1, 1)] = rad.cos();
        Self {
            matrix: m,
            shift: DVector::zeros(dim),
        }
    }

    /// Sign flip of coordinate 0. Meaningful only on worlds symmetric under
    /// it; included in the default set for parity with image-space flips.
    pub fn reflection0(dim: usize) -> Self {
        let mut m = DMatrix::identity(dim, dim);
        m[(0, 0)] = -1.0;
        Self {
            matrix: m,
            shift: DVector::zeros(dim),
        }
    }

    pub fn uniform_shift(dim: usize, amount: f64) -> Self {
        Self {
            matrix: DMatrix::identity(dim, dim),
            shift: DVector::from_element(dim, amount),
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x + &self.shift
    }

    pub fn vjp(&self, upstream: &DVector<f64>) -> DVector<f64> {
        self.matrix.transpose() * upstream
    }
}

/// Nonempty collection of transforms averaged inside the adversarial
/// gradient.
#[derive(Debug, Clone)]
pub struct TransformSet {
    transforms: Vec<AffineTransform>,
}

impl TransformSet {
    pub fn new(transforms: Vec<AffineTransform>) -> Result<Self, GuidanceError> {
        if transforms.is_empty() {
            return Err(GuidanceError::Invalid("transform set is empty".into()));
        }
        Ok(Self { transforms })
    }

    /// Identity only.
    pub fn none(dim: usize) -> Self {
        Self {
            transforms: vec![AffineTransform::identity(dim)],
        }
    }

    /// Identity, two small rotations, a reflection of coordinate 0, and a
    /// uniform shift.
    pub fn default5(dim: usize) -> Self {
        Self {
            transforms: vec![
                AffineTransform::identity(dim),
                AffineTransform::rotation2d(dim, 10.0),
                AffineTransform::rotation2d(dim, -10.0),
                AffineTransform::reflection0(dim),
                AffineTransform::uniform_shift(dim, 0.1),
            ],
        }
    }

    pub fn transforms(&self) -> &[AffineTransform] {
        &self.transforms
    }
}

/// A noise prediction seen as a differentiable function of `x` at fixed `t`.
pub trait EpsilonHat {
    fn value(&self, x: &DVector<f64>) -> Result<DVector<f64>, GuidanceError>;
    fn vjp(&self, x: &DVector<f64>, upstream: &DVector<f64>) -> Result<DVector<f64>, GuidanceError>;
}

/// Single-conditioning prediction.
pub struct PlainEpsilon<'a> {
    pub predictor: &'a dyn NoisePredictor,
    pub table: &'a ScheduleTable,
    pub t: usize,
    pub cond: ConditioningSet,
}

impl EpsilonHat for PlainEpsilon<'_> {
    fn value(&self, x: &DVector<f64>) -> Result<DVector<f64>, GuidanceError> {
        Ok(self.predictor.epsilon(x, self.t, self.cond, self.table)?)
    }

    fn vjp(&self, x: &DVector<f64>, upstream: &DVector<f64>) -> Result<DVector<f64>, GuidanceError> {
        Ok(self
            .predictor
            .epsilon_vjp(x, self.t, self.cond, self.table, upstream)?)
    }
}

/// The boundary-guided prediction as a function of `x`. The intersection
/// prediction is only evaluated when its coefficient `mu * rho` is nonzero,
/// so `mu = 0` runs work on worlds without any dual-labeled component.
pub struct GuidedEpsilon<'a> {
    pub predictor: &'a dyn NoisePredictor,
    pub table: &'a ScheduleTable,
    pub t: usize,
    pub class: usize,
    pub adversarial_class: usize,
    pub params: GuidanceParams,
}

impl GuidedEpsilon<'_> {
    fn coefficients(&self) -> (f64, f64, f64) {
        let c_class = self.params.omega - self.params.mu * self.params.omega;
        let c_inter = self.params.mu * self.params.rho;
        (1.0 - c_class - c_inter, c_class, c_inter)
    }

    /// The three raw predictions at `x`; the intersection entry falls back
    /// to the unconditional prediction when unused.
    pub fn bundle(&self, x: &DVector<f64>) -> Result<EpsilonBundle, GuidanceError> {
        let eps_uncond =
            self.predictor
                .epsilon(x, self.t, ConditioningSet::Unconditional, self.table)?;
        let eps_cond =
            self.predictor
                .epsilon(x, self.t, ConditioningSet::Single(self.class), self.table)?;
        let (_, _, c_inter) = self.coefficients();
        let eps_intersection = if c_inter != 0.0 {
            self.predictor.epsilon(
                x,
                self.t,
                ConditioningSet::Intersection(self.class, self.adversarial_class),
                self.table,
            )?
        } else {
            eps_uncond.clone()
        };
        Ok(EpsilonBundle {
            eps_uncond,
            eps_cond,
            eps_intersection,
        })
    }
}

impl EpsilonHat for GuidedEpsilon<'_> {
    fn value(&self, x: &DVector<f64>) -> Result<DVector<f64>, GuidanceError> {
        Ok(boundary_epsilon(&self.bundle(x)?, &self.params))
    }

    fn vjp(&self, x: &DVector<f64>, upstream: &DVector<f64>) -> Result<DVector<f64>, GuidanceError> {
        let (c_uncond, c_class, c_inter) = self.coefficients();
        let mut out = self.predictor.epsilon_vjp(
            x,
            self.t,
            ConditioningSet::Unconditional,
            self.table,
            upstream,
        )? * c_uncond;
        out += self.predictor.epsilon_vjp(
            x,
            self.t,
            ConditioningSet::Single(self.class),
            self.table,
            upstream,
        )? * c_class;
        if c_inter != 0.0 {
            out += self.predictor.epsilon_vjp(
                x,
                self.t,
                ConditioningSet::Intersection(self.class, self.adversarial_class),
                self.table,
                upstream,
            )? * c_inter;
        }
        Ok(out)
    }
}

/// Transform-averaged normalized adversarial classifier gradient.
///
/// Computes `g / ||g||` with
/// `g = grad_x log softmax_target( mean_j h(T_j(decode(x0_hat(x)))) )`,
/// chaining through the clean-sample prediction, the decoder, and every
/// transform. Logits are averaged before the softmax.
#[allow(clippy::too_many_arguments)]
pub fn adv_gradient(
    x_t: &DVector<f64>,
    t: usize,
    table: &ScheduleTable,
    eps_hat: &dyn EpsilonHat,
    decoder: &Decoder,
    transforms: &TransformSet,
    victim: &dyn crate::victims::Victim,
    target_class: usize,
) -> Result<DVector<f64>, GuidanceError> {
    let (alpha, beta) = table.alpha_beta(t)?;
    if alpha == 0.0 {
        return Err(GuidanceError::Singular { t });
    }
    let eps = eps_hat.value(x_t)?;
    let x0_hat = (x_t - &eps * beta) / alpha;
    let decoded = decoder.apply(&x0_hat);

    let views: Vec<DVector<f64>> = transforms
        .transforms()
        .iter()
        .map(|tr| tr.apply(&decoded))
        .collect();
    let count = views.len() as f64;
    let mut mean_logits = DVector::zeros(victim.num_classes());
    for v in &views {
        mean_logits += victim.logits(v) / count;
    }
    // d log softmax_target / d mean_logits
    let mut upstream_logits = -softmax(&mean_logits);
    upstream_logits[target_class] += 1.0;

    let mut d_decoded = DVector::zeros(decoded.len());
    for (tr, v) in transforms.transforms().iter().zip(&views) {
        let d_view = victim.logits_vjp(v, &(&upstream_logits / count));
        d_decoded += tr.vjp(&d_view);
    }
    let d_x0 = decoder.vjp(&d_decoded);
    // x0_hat = (x - beta eps(x)) / alpha
    let g = (&d_x0 - eps_hat.vjp(x_t, &d_x0)? * beta) / alpha;
    let norm = g.norm();
    if norm < 1e-12 {
        return Err(GuidanceError::DegenerateGradient);
    }
    Ok(g / norm)
}
