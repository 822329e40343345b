//! The noise-predictor interface shared by the exact oracle and the trained
//! denoiser.
//!
//! Guidance and sampling only ever talk to this trait, so every attack can
//! run either against the closed-form optimum (zero model error) or against
//! a trained network.

use nalgebra::DVector;
use thiserror::Error;

use crate::nn::NetError;
use crate::schedule::{ScheduleError, ScheduleTable};
use crate::world::{ConditioningSet, MixtureWorld, WorldError};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("no conditioning token for {0}")]
    UnknownConditioning(String),
}

/// Conditional noise prediction with enough differentiability to chain a
/// classifier gradient through the predicted clean sample.
pub trait NoisePredictor: Sync {
    fn dim(&self) -> usize;

    /// Predicted noise at `(x, t)` under the given conditioning.
    fn epsilon(
        &self,
        x: &DVector<f64>,
        t: usize,
        cond: ConditioningSet,
        table: &ScheduleTable,
    ) -> Result<DVector<f64>, PredictorError>;

    /// Vector-Jacobian product `(d epsilon / d x)^T upstream`.
    fn epsilon_vjp(
        &self,
        x: &DVector<f64>,
        t: usize,
        cond: ConditioningSet,
        table: &ScheduleTable,
        upstream: &DVector<f64>,
    ) -> Result<DVector<f64>, PredictorError>;
}

/// The exact optimum `-beta(t) * score`: what a perfectly trained denoiser
/// would predict on this world.
#[derive(Debug, Clone)]
pub struct OracleEpsilon<'a> {
    world: &'a MixtureWorld,
}

impl<'a> OracleEpsilon<'a> {
    pub fn new(world: &'a MixtureWorld) -> Self {
        Self { world }
    }

    pub fn world(&self) -> &MixtureWorld {
        self.world
    }
}

impl NoisePredictor for OracleEpsilon<'_> {
    fn dim(&self) -> usize {
        self.world.dim()
    }

    fn epsilon(
        &self,
        x: &DVector<f64>,
        t: usize,
        cond: ConditioningSet,
        table: &ScheduleTable,
    ) -> Result<DVector<f64>, PredictorError> {
        Ok(self.world.oracle_epsilon(cond, x, t, table)?)
    }

    fn epsilon_vjp(
        &self,
        x: &DVector<f64>,
        t: usize,
        cond: ConditioningSet,
        table: &ScheduleTable,
        upstream: &DVector<f64>,
    ) -> Result<DVector<f64>, PredictorError> {
        let (_, beta) = table.alpha_beta(t)?;
        // The score Jacobian is symmetric, so J^T u = J u.
        let jac = self.world.noised_score_jacobian(cond, x, t, table)?;
        Ok(jac * upstream * (-beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::schedule::ScheduleTable;

    #[test]
    fn oracle_vjp_matches_finite_difference() {
        let world = MixtureWorld::demo_shortcut();
        let table = ScheduleTable::default_table();
        let oracle = OracleEpsilon::new(&world);
        let cond = ConditioningSet::Single(0);
        let x = DVector::from_vec(vec![3.0, 2.5]);
        let t = 300;
        let mut rng = rng::from_seed(4);
        let u = rng::standard_normal(&mut rng, 2);
        let vjp = oracle.epsilon_vjp(&x, t, cond, &table, &u).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fp = oracle.epsilon(&xp, t, cond, &table).unwrap().dot(&u);
            let fm = oracle.epsilon(&xm, t, cond, &table).unwrap().dot(&u);
            let fd = (fp - fm) / (2.0 * h);
            assert!((vjp[i] - fd).abs() < 1e-6, "coord {i}: {} vs {fd}", vjp[i]);
        }
    }
}
