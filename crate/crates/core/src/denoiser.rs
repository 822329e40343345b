//! Trainable conditional noise-prediction network.
//!
//! A dense net over `[x, time features, conditioning token]` trained to
//! predict the clean sample through `x0_hat = (x_t - beta eps) / alpha`.
//! Conditioning is a learned token table: one token per class, one
//! unconditional token, and one token per ordered class pair that appears in
//! a dual-labeled component. Pair tokens start at the mean of their two
//! class tokens.
//!
//! Hidden layers are tanh so the classifier gradient chained through the
//! predicted clean sample stays differentiable everywhere.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{adam_slice, Activation, Adam, AdamConfig, Gradients, Mlp, NetDump, NetError, Tape};
use crate::predictor::{NoisePredictor, PredictorError};
use crate::rng::{standard_normal, Generator};
use crate::schedule::ScheduleTable;
use crate::world::{ConditioningSet, MixtureWorld};

/// Key into the conditioning-token table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TokenKey {
    Uncond,
    Class(usize),
    Pair(usize, usize),
}

impl TokenKey {
    fn from_conditioning(cond: ConditioningSet) -> Self {
        match cond {
            ConditioningSet::Unconditional => TokenKey::Uncond,
            ConditioningSet::Single(y) => TokenKey::Class(y),
            ConditioningSet::Intersection(y, z) => TokenKey::Pair(y, z),
        }
    }

    fn to_conditioning(self) -> ConditioningSet {
        match self {
            TokenKey::Uncond => ConditioningSet::Unconditional,
            TokenKey::Class(y) => ConditioningSet::Single(y),
            TokenKey::Pair(y, z) => ConditioningSet::Intersection(y, z),
        }
    }

    fn encode(&self) -> String {
        match self {
            TokenKey::Uncond => "uncond".into(),
            TokenKey::Class(y) => format!("class:{y}"),
            TokenKey::Pair(y, z) => format!("pair:{y}:{z}"),
        }
    }

    fn decode(s: &str) -> Option<Self> {
        if s == "uncond" {
            return Some(TokenKey::Uncond);
        }
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["class", y] => y.parse().ok().map(TokenKey::Class),
            ["pair", y, z] => Some(TokenKey::Pair(y.parse().ok()?, z.parse().ok()?)),
            _ => None,
        }
    }
}

/// Architecture knobs.
#[derive(Debug, Clone)]
pub struct DenoiserSpec {
    pub hidden: Vec<usize>,
    pub t_embed_dim: usize,
    pub token_dim: usize,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            t_embed_dim: 8,
            token_dim: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of replacing the drawn conditioning with the
    /// unconditional token (classifier-free training).
    pub drop_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 30_000,
            batch_size: 128,
            learning_rate: 1e-3,
            drop_prob: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    mlp: Mlp,
    /// Token table, one row per token.
    tokens: DMatrix<f64>,
    token_index: BTreeMap<TokenKey, usize>,
    dim: usize,
    num_timesteps: usize,
    t_embed_dim: usize,
    token_dim: usize,
}

/// Recorded state of one forward pass, consumed by [`DenoiserNet::backward`].
#[derive(Debug, Clone, Default)]
pub struct GradSession {
    tape: Tape,
    token_row: usize,
}

/// Gradients of one recorded pass: network parameters, the touched token
/// row, and the gradient with respect to `x`.
#[derive(Debug, Clone)]
pub struct DenoiserGradients {
    pub net: Gradients,
    pub token_row: usize,
    pub token_grad: DVector<f64>,
    pub x_grad: DVector<f64>,
}

impl DenoiserNet {
    pub fn new(
        world: &MixtureWorld,
        num_timesteps: usize,
        spec: &DenoiserSpec,
        rng: &mut Generator,
    ) -> Self {
        let dim = world.dim();
        let mut widths = vec![dim + spec.t_embed_dim + spec.token_dim];
        widths.extend_from_slice(&spec.hidden);
        widths.push(dim);
        let mlp = Mlp::new(&widths, Activation::Tanh, rng);

        let mut keys = vec![TokenKey::Uncond];
        for y in 0..world.num_classes() {
            keys.push(TokenKey::Class(y));
        }
        for c in world.components() {
            let labels: Vec<usize> = c.labels.iter().copied().collect();
            for &a in &labels {
                for &b in &labels {
                    if a != b && !keys.contains(&TokenKey::Pair(a, b)) {
                        keys.push(TokenKey::Pair(a, b));
                    }
                }
            }
        }
        let mut tokens = DMatrix::from_fn(keys.len(), spec.token_dim, |_, _| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            z * 0.5
        });
        let token_index: BTreeMap<TokenKey, usize> =
            keys.iter().copied().zip(0..keys.len()).collect();
        for (key, &row) in &token_index {
            if let TokenKey::Pair(a, b) = key {
                let ra = token_index[&TokenKey::Class(*a)];
                let rb = token_index[&TokenKey::Class(*b)];
                let mean = (tokens.row(ra) + tokens.row(rb)) * 0.5;
                tokens.set_row(row, &mean);
            }
        }
        Self {
            mlp,
            tokens,
            token_index,
            dim,
            num_timesteps,
            t_embed_dim: spec.t_embed_dim,
            token_dim: spec.token_dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_timesteps(&self) -> usize {
        self.num_timesteps
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    /// Conditioning sets the token table can express, minus unconditional.
    pub fn conditionings(&self) -> Vec<ConditioningSet> {
        self.token_index
            .keys()
            .filter(|k| **k != TokenKey::Uncond)
            .map(|k| k.to_conditioning())
            .collect()
    }

    fn token_row(&self, cond: ConditioningSet) -> Result<usize, PredictorError> {
        self.token_index
            .get(&TokenKey::from_conditioning(cond))
            .copied()
            .ok_or_else(|| PredictorError::UnknownConditioning(cond.to_string()))
    }

    fn pack_input(&self, x: &DVector<f64>, t: usize, token_row: usize) -> DVector<f64> {
        let temb = time_embedding(t, self.num_timesteps, self.t_embed_dim);
        let mut input = DVector::zeros(self.dim + self.t_embed_dim + self.token_dim);
        input.rows_mut(0, self.dim).copy_from(x);
        input.rows_mut(self.dim, self.t_embed_dim).copy_from(&temb);
        input
            .rows_mut(self.dim + self.t_embed_dim, self.token_dim)
            .copy_from(&self.tokens.row(token_row).transpose());
        input
    }

    /// Predicted noise for `(x, t, cond)`.
    pub fn forward(
        &self,
        x: &DVector<f64>,
        t: usize,
        cond: ConditioningSet,
    ) -> Result<DVector<f64>, PredictorError> {
        let row = self.token_row(cond)?;
        Ok(self.mlp.forward(&self.pack_input(x, t, row)))
    }

    /// Forward pass that records everything needed for [`Self::backward`].
    pub fn forward_recorded(
        &self,
        x: &DVector<f64>,
        t: usize,
        cond: ConditioningSet,
        session: &mut GradSession,
    ) -> Result<DVector<f64>, PredictorError> {
        let row = self.token_row(cond)?;
        session.token_row = row;
        Ok(self
            .mlp
            .forward_recorded(&self.pack_input(x, t, row), &mut session.tape))
    }

    /// Exact reverse-mode gradients of `upstream . output` for the recorded
    /// pass. Fails if no forward pass was recorded in `session`.
    pub fn backward(
        &self,
        session: &GradSession,
        upstream: &DVector<f64>,
    ) -> Result<DenoiserGradients, NetError> {
        let (net, input_grad) = self.mlp.backward(&session.tape, upstream)?;
        Ok(DenoiserGradients {
            net,
            token_row: session.token_row,
            token_grad: input_grad
                .rows(self.dim + self.t_embed_dim, self.token_dim)
                .into(),
            x_grad: input_grad.rows(0, self.dim).into(),
        })
    }

    /// The score implied by the prediction, `-eps / beta(t)`.
    pub fn implied_score(
        &self,
        x: &DVector<f64>,
        t: usize,
        cond: ConditioningSet,
        table: &ScheduleTable,
    ) -> Result<DVector<f64>, PredictorError> {
        let (_, beta) = table.alpha_beta(t)?;
        Ok(self.forward(x, t, cond)? * (-1.0 / beta))
    }

    /// Train with the clean-sample reconstruction objective
    /// `E || x0 - (x_t - beta eps_theta) / alpha ||^2`, times drawn uniformly
    /// over `[1, T]`, conditioning dropped to the unconditional token with
    /// probability `drop_prob`. Returns the per-step batch loss curve.
    pub fn train(
        &mut self,
        world: &MixtureWorld,
        table: &ScheduleTable,
        cfg: &TrainConfig,
    ) -> Result<Vec<f64>, NetError> {
        if !(0.0..1.0).contains(&cfg.drop_prob) {
            return Err(NetError::TrainingFailure(format!(
                "drop_prob must be in [0, 1), got {}",
                cfg.drop_prob
            )));
        }
        let mut rng = crate::rng::from_seed(cfg.seed);
        let adam_cfg = AdamConfig {
            lr: cfg.learning_rate,
            ..Default::default()
        };
        let mut adam = Adam::new(adam_cfg, &self.mlp);
        let mut tok_m = DMatrix::zeros(self.tokens.nrows(), self.tokens.ncols());
        let mut tok_v = DMatrix::zeros(self.tokens.nrows(), self.tokens.ncols());
        let conds = self.conditionings();
        let mut curve = Vec::with_capacity(cfg.steps);
        let mut session = GradSession::default();

        for step in 0..cfg.steps {
            let mut batch_grads = Gradients::zeros_like(&self.mlp);
            let mut token_grads = DMatrix::zeros(self.tokens.nrows(), self.tokens.ncols());
            let mut batch_loss = 0.0;
            for _ in 0..cfg.batch_size {
                let cond = if rng.random::<f64>() < cfg.drop_prob {
                    ConditioningSet::Unconditional
                } else {
                    conds[rng.random_range(0..conds.len())]
                };
                let (x0, _) = world
                    .sample_data(cond, &mut rng)
                    .map_err(|e| NetError::TrainingFailure(e.to_string()))?;
                let t = rng.random_range(1..=table.num_timesteps());
                let (alpha, beta) = table
                    .alpha_beta(t)
                    .map_err(|e| NetError::TrainingFailure(e.to_string()))?;
                let eps = standard_normal(&mut rng, self.dim);
                let x_t = &x0 * alpha + &eps * beta;
                let out = self
                    .forward_recorded(&x_t, t, cond, &mut session)
                    .map_err(|e| NetError::TrainingFailure(e.to_string()))?;
                let resid = (&x_t - &out * beta) / alpha - &x0;
                batch_loss += resid.norm_squared();
                // dL/d eps = -2 (beta / alpha) resid
                let upstream = &resid * (-2.0 * beta / alpha);
                let grads = self.backward(&session, &upstream)?;
                batch_grads.accumulate(&grads.net);
                let mut row = token_grads.row_mut(grads.token_row);
                row += grads.token_grad.transpose();
            }
            let scale = 1.0 / cfg.batch_size as f64;
            batch_grads.scale(scale);
            token_grads *= scale;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(NetError::TrainingFailure(format!(
                    "non-finite loss at step {step}"
                )));
            }
            curve.push(batch_loss);
            adam.update(&mut self.mlp, &batch_grads);
            let t_step = (step + 1) as f64;
            let bc1 = 1.0 - adam_cfg.beta1.powf(t_step);
            let bc2 = 1.0 - adam_cfg.beta2.powf(t_step);
            adam_slice(
                &adam_cfg,
                bc1,
                bc2,
                self.tokens.as_mut_slice(),
                token_grads.as_slice(),
                tok_m.as_mut_slice(),
                tok_v.as_mut_slice(),
            );
        }
        if !self.mlp.params_finite() {
            return Err(NetError::TrainingFailure(
                "parameters diverged to non-finite values".into(),
            ));
        }
        Ok(curve)
    }

    pub fn to_checkpoint(&self) -> DenoiserCheckpoint {
        DenoiserCheckpoint {
            version: 1,
            kind: "denoiser".into(),
            dim: self.dim,
            num_timesteps: self.num_timesteps,
            t_embed_dim: self.t_embed_dim,
            token_dim: self.token_dim,
            net: self.mlp.to_dump(),
            tokens: self
                .token_index
                .iter()
                .map(|(key, &row)| TokenDump {
                    key: key.encode(),
                    values: self.tokens.row(row).iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &DenoiserCheckpoint) -> Result<Self, NetError> {
        if ckpt.kind != "denoiser" {
            return Err(NetError::ShapeMismatch(format!(
                "checkpoint kind '{}' is not a denoiser",
                ckpt.kind
            )));
        }
        let mlp = Mlp::from_dump(&ckpt.net)?;
        let mut token_index = BTreeMap::new();
        let mut tokens = DMatrix::zeros(ckpt.tokens.len(), ckpt.token_dim);
        for (row, dump) in ckpt.tokens.iter().enumerate() {
            let key = TokenKey::decode(&dump.key).ok_or_else(|| {
                NetError::ShapeMismatch(format!("unknown token key '{}'", dump.key))
            })?;
            if dump.values.len() != ckpt.token_dim {
                return Err(NetError::ShapeMismatch(format!(
                    "token '{}' has {} values, expected {}",
                    dump.key,
                    dump.values.len(),
                    ckpt.token_dim
                )));
            }
            for (c, &v) in dump.values.iter().enumerate() {
                tokens[(row, c)] = v;
            }
            token_index.insert(key, row);
        }
        Ok(Self {
            mlp,
            tokens,
            token_index,
            dim: ckpt.dim,
            num_timesteps: ckpt.num_timesteps,
            t_embed_dim: ckpt.t_embed_dim,
            token_dim: ckpt.token_dim,
        })
    }
}

impl NoisePredictor for DenoiserNet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn epsilon(
        &self,
        x: &DVector<f64>,
        t: usize,
        cond: ConditioningSet,
        _table: &ScheduleTable,
    ) -> Result<DVector<f64>, PredictorError> {
        self.forward(x, t, cond)
    }

    fn epsilon_vjp(
        &self,
        x: &DVector<f64>,
        t: usize,
        cond: ConditioningSet,
        _table: &ScheduleTable,
        upstream: &DVector<f64>,
    ) -> Result<DVector<f64>, PredictorError> {
        let mut session = GradSession::default();
        self.forward_recorded(x, t, cond, &mut session)?;
        let grads = self.backward(&session, upstream)?;
        Ok(grads.x_grad)
    }
}

/// Checkpoint: shapes, row-major parameter arrays, and the token table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserCheckpoint {
    pub version: u32,
    pub kind: String,
    pub dim: usize,
    pub num_timesteps: usize,
    pub t_embed_dim: usize,
    pub token_dim: usize,
    pub net: NetDump,
    pub tokens: Vec<TokenDump>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenDump {
    pub key: String,
    pub values: Vec<f64>,
}

/// Sinusoidal time features over normalized time, frequencies doubling per
/// pair. `cos` at the base frequency keeps t = 0 and t = T distinguishable.
fn time_embedding(t: usize, num_timesteps: usize, dim: usize) -> DVector<f64> {
    let tn = t as f64 / num_timesteps as f64;
    let mut v = Vec::with_capacity(dim);
    let mut freq = 1.0;
    while v.len() < dim {
        v.push((std::f64::consts::PI * freq * tn).sin());
        if v.len() < dim {
            v.push((std::f64::consts::PI * freq * tn).cos());
        }
        freq *= 2.0;
    }
    DVector::from_vec(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn demo_net(seed: u64) -> DenoiserNet {
        let world = MixtureWorld::demo_shortcut();
        DenoiserNet::new(
            &world,
            1000,
            &DenoiserSpec::default(),
            &mut rng::from_seed(seed),
        )
    }

    #[test]
    fn zeroed_net_outputs_zero_for_all_conditionings() {
        let mut net = demo_net(0);
        for layer in net.mlp_mut().layers_mut() {
            layer.weight.fill(0.0);
            layer.bias.fill(0.0);
        }
        let x = DVector::from_vec(vec![1.0, -2.0]);
        for cond in [
            ConditioningSet::Unconditional,
            ConditioningSet::Single(1),
            ConditioningSet::Intersection(0, 1),
        ] {
            let out = net.forward(&x, 500, cond).unwrap();
            assert_eq!(out, DVector::zeros(2));
        }
    }

    #[test]
    fn output_dimension_matches_world() {
        let net = demo_net(1);
        let x = DVector::from_vec(vec![0.0, 0.0]);
        for cond in [
            ConditioningSet::Unconditional,
            ConditioningSet::Single(0),
            ConditioningSet::Single(2),
            ConditioningSet::Intersection(1, 0),
        ] {
            assert_eq!(net.forward(&x, 10, cond).unwrap().len(), 2);
        }
    }

    #[test]
    fn unknown_pair_token_is_a_lookup_error() {
        let net = demo_net(2);
        let x = DVector::zeros(2);
        // No component carries labels {0, 2} in the demo world.
        let err = net.forward(&x, 10, ConditioningSet::Intersection(0, 2));
        assert!(matches!(err, Err(PredictorError::UnknownConditioning(_))));
    }

    #[test]
    fn pair_tokens_start_at_class_token_mean() {
        let net = demo_net(3);
        let ra = net.token_index[&TokenKey::Class(0)];
        let rb = net.token_index[&TokenKey::Class(1)];
        let rp = net.token_index[&TokenKey::Pair(0, 1)];
        let mean = (net.tokens.row(ra) + net.tokens.row(rb)) * 0.5;
        assert_eq!(net.tokens.row(rp), mean);
    }

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let net = demo_net(4);
        let err = net.backward(&GradSession::default(), &DVector::zeros(2));
        assert!(matches!(err, Err(NetError::BackwardWithoutForward)));
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let net = demo_net(5);
        let table = ScheduleTable::default_table();
        let cond = ConditioningSet::Single(1);
        let x = DVector::from_vec(vec![0.4, -0.7]);
        let mut rng = rng::from_seed(6);
        let u = rng::standard_normal(&mut rng, 2);
        let vjp = net.epsilon_vjp(&x, 321, cond, &table, &u).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (net.forward(&xp, 321, cond).unwrap().dot(&u)
                - net.forward(&xm, 321, cond).unwrap().dot(&u))
                / (2.0 * h);
            let rel = (vjp[i] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-5, "coord {i} rel err {rel}");
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let world = MixtureWorld::demo_shortcut();
        let table = ScheduleTable::default_table();
        let mut net = demo_net(7);
        let before = net.clone();
        net.train(
            &world,
            &table,
            &TrainConfig {
                steps: 5,
                batch_size: 8,
                learning_rate: 0.0,
                drop_prob: 0.1,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let world = MixtureWorld::demo_shortcut();
        let table = ScheduleTable::default_table();
        let cfg = TrainConfig {
            steps: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            drop_prob: 0.1,
            seed: 42,
        };
        let mut a = demo_net(8);
        let mut b = demo_net(8);
        let ca = a.train(&world, &table, &cfg).unwrap();
        let cb = b.train(&world, &table, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
    }

    #[test]
    fn invalid_drop_prob_is_rejected() {
        let world = MixtureWorld::demo_shortcut();
        let table = ScheduleTable::default_table();
        let mut net = demo_net(9);
        let err = net.train(
            &world,
            &table,
            &TrainConfig {
                steps: 1,
                batch_size: 1,
                learning_rate: 1e-3,
                drop_prob: 1.0,
                seed: 0,
            },
        );
        assert!(matches!(err, Err(NetError::TrainingFailure(_))));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let net = demo_net(10);
        let json = serde_json::to_string(&net.to_checkpoint()).unwrap();
        let back: DenoiserCheckpoint = serde_json::from_str(&json).unwrap();
        let restored = DenoiserNet::from_checkpoint(&back).unwrap();
        assert_eq!(net, restored);
    }

    #[test]
    fn single_point_world_training_recovers_the_noise_map() {
        // With the data concentrated at one point the optimal prediction is
        // (x - alpha x0) / beta; a short training run must approach it.
        let x0 = vec![0.5, -0.25];
        let world = MixtureWorld::new(
            vec![crate::world::Component::iso(x0.clone(), 1e-6, 1.0, &[0])],
            1,
        )
        .unwrap();
        let table = ScheduleTable::default_table();
        let mut net = DenoiserNet::new(
            &world,
            1000,
            &DenoiserSpec::default(),
            &mut rng::from_seed(11),
        );
        net.train(
            &world,
            &table,
            &TrainConfig {
                steps: 6000,
                batch_size: 64,
                learning_rate: 2e-3,
                drop_prob: 0.1,
                seed: 3,
            },
        )
        .unwrap();
        let x0 = DVector::from_vec(x0);
        let mut num = 0.0;
        let mut den = 0.0;
        let mut rng = rng::from_seed(12);
        for t in [100usize, 300, 500, 700, 900] {
            let (alpha, beta) = table.alpha_beta(t).unwrap();
            for _ in 0..40 {
                let eps = rng::standard_normal(&mut rng, 2);
                let x_t = &x0 * alpha + &eps * beta;
                let expect = (&x_t - &x0 * alpha) / beta;
                let got = net
                    .forward(&x_t, t, ConditioningSet::Unconditional)
                    .unwrap();
                num += (got - &expect).norm_squared();
                den += expect.norm_squared();
            }
        }
        let rel = (num / den).sqrt();
        assert!(rel <= 0.05, "relative L2 {rel}");
    }
}
