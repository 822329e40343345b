//! Victim classifiers and the constrained-attack baselines.
//!
//! All victims expose logits and exact input-gradients. "Architecturally
//! distinct" classifiers are modeled as different inductive biases: the
//! Bayes victim sees the full input, shortcut victims see only a cue
//! projection of it, and the MLP victims learn whatever a small net learns.
//! That difference in what each model attends to is the lever that makes
//! attack transferability measurable on a toy world.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Adam, AdamConfig, Gradients, Mlp, NetDump, NetError, Tape};
use crate::rng::Generator;
use crate::world::{softmax, ConditioningSet, MixtureWorld};

/// Classifier surface consumed by guidance and evaluation.
pub trait Victim: Send + Sync {
    fn name(&self) -> &str;
    fn num_classes(&self) -> usize;
    fn logits(&self, x: &DVector<f64>) -> DVector<f64>;
    fn logit_grad(&self, x: &DVector<f64>, class: usize) -> DVector<f64>;

    /// `(d logits / d x)^T upstream`; default sums per-class gradients.
    fn logits_vjp(&self, x: &DVector<f64>, upstream: &DVector<f64>) -> DVector<f64> {
        let mut out = self.logit_grad(x, 0) * upstream[0];
        for c in 1..self.num_classes() {
            if upstream[c] != 0.0 {
                out += self.logit_grad(x, c) * upstream[c];
            }
        }
        out
    }

    fn probabilities(&self, x: &DVector<f64>) -> DVector<f64> {
        softmax(&self.logits(x))
    }

    fn predict(&self, x: &DVector<f64>) -> usize {
        let l = self.logits(x);
        let mut best = 0;
        for c in 1..l.len() {
            if l[c] > l[best] {
                best = c;
            }
        }
        best
    }

    /// Gradient of `log p(class | x)` under the softmax of the logits.
    fn log_prob_grad(&self, x: &DVector<f64>, class: usize) -> DVector<f64> {
        let mut upstream = -self.probabilities(x);
        upstream[class] += 1.0;
        self.logits_vjp(x, &upstream)
    }
}

/// Exact Bayes classifier: logits are the log class posterior of the raw
/// mixture.
#[derive(Debug, Clone)]
pub struct BayesVictim {
    name: String,
    world: MixtureWorld,
}

impl BayesVictim {
    pub fn new(world: &MixtureWorld) -> Self {
        Self {
            name: "bayes".into(),
            world: world.clone(),
        }
    }
}

impl Victim for BayesVictim {
    fn name(&self) -> &str {
        &self.name
    }

    fn num_classes(&self) -> usize {
        self.world.num_classes()
    }

    fn logits(&self, x: &DVector<f64>) -> DVector<f64> {
        let logq = self
            .world
            .class_log_masses_raw(x)
            .expect("raw masses are total");
        let lse = crate::world::log_sum_exp(logq.as_slice());
        logq.map(|v| v - lse)
    }

    fn logit_grad(&self, x: &DVector<f64>, class: usize) -> DVector<f64> {
        // d/dx [log q_c - log sum_y q_y] with the sum taken over classes.
        let logq = self
            .world
            .class_log_masses_raw(x)
            .expect("raw masses are total");
        let p = softmax(&logq);
        let mut grad = self
            .world
            .class_log_mass_grad_raw(x, class)
            .expect("class is covered");
        for y in 0..self.world.num_classes() {
            let gy = self
                .world
                .class_log_mass_grad_raw(x, y)
                .expect("class is covered");
            grad -= gy * p[y];
        }
        grad
    }
}

/// Classifier that sees the input only through a fixed cue projection, with
/// a low-capacity logistic model on the projected data. Perturbations in the
/// projection kernel cannot change its output.
#[derive(Debug, Clone)]
pub struct ShortcutVictim {
    name: String,
    projection: DMatrix<f64>,
    model: Mlp,
}

impl ShortcutVictim {
    /// Fit the internal logistic model on projected world samples.
    pub fn fit(
        name: &str,
        world: &MixtureWorld,
        projection: DMatrix<f64>,
        cfg: &VictimTrainConfig,
        rng: &mut Generator,
    ) -> Result<Self, NetError> {
        assert_eq!(projection.ncols(), world.dim(), "projection input dim");
        let data = labeled_samples(world, cfg.samples, rng);
        let proj_data: Vec<(DVector<f64>, usize)> = data
            .into_iter()
            .map(|(x, y)| (&projection * x, y))
            .collect();
        let model = Mlp::new(
            &[projection.nrows(), world.num_classes()],
            Activation::Linear,
            rng,
        );
        let model = fit_classifier(model, &proj_data, cfg, rng)?;
        Ok(Self {
            name: name.into(),
            projection,
            model,
        })
    }

    /// Projection that keeps a single coordinate.
    pub fn cue_projection(dim: usize, coordinate: usize) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(1, dim);
        p[(0, coordinate)] = 1.0;
        p
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    pub fn to_checkpoint(&self) -> VictimCheckpoint {
        VictimCheckpoint {
            version: 1,
            kind: "shortcut".into(),
            name: self.name.clone(),
            net: self.model.to_dump(),
            projection: Some(MatrixDump::from(&self.projection)),
        }
    }

    pub fn from_checkpoint(ckpt: &VictimCheckpoint) -> Result<Self, NetError> {
        if ckpt.kind != "shortcut" {
            return Err(NetError::ShapeMismatch(format!(
                "checkpoint kind '{}' is not a shortcut victim",
                ckpt.kind
            )));
        }
        let proj = ckpt
            .projection
            .as_ref()
            .ok_or_else(|| NetError::ShapeMismatch("shortcut checkpoint lacks projection".into()))?;
        Ok(Self {
            name: ckpt.name.clone(),
            projection: proj.to_matrix(),
            model: Mlp::from_dump(&ckpt.net)?,
        })
    }
}

impl Victim for ShortcutVictim {
    fn name(&self) -> &str {
        &self.name
    }

    fn num_classes(&self) -> usize {
        self.model.output_dim()
    }

    fn logits(&self, x: &DVector<f64>) -> DVector<f64> {
        self.model.forward(&(&self.projection * x))
    }

    fn logit_grad(&self, x: &DVector<f64>, class: usize) -> DVector<f64> {
        let mut upstream = DVector::zeros(self.num_classes());
        upstream[class] = 1.0;
        self.logits_vjp(x, &upstream)
    }

    fn logits_vjp(&self, x: &DVector<f64>, upstream: &DVector<f64>) -> DVector<f64> {
        let u = &self.projection * x;
        let mut tape = Tape::default();
        self.model.forward_recorded(&u, &mut tape);
        let (_, proj_grad) = self
            .model
            .backward(&tape, upstream)
            .expect("forward was recorded");
        self.projection.transpose() * proj_grad
    }
}

/// Trainable full-input MLP victim; produced by [`train_standard`] or
/// [`adversarial_train`].
#[derive(Debug, Clone)]
pub struct MlpVictim {
    name: String,
    net: Mlp,
}

impl MlpVictim {
    pub fn to_checkpoint(&self) -> VictimCheckpoint {
        VictimCheckpoint {
            version: 1,
            kind: "mlp".into(),
            name: self.name.clone(),
            net: self.net.to_dump(),
            projection: None,
        }
    }

    pub fn from_checkpoint(ckpt: &VictimCheckpoint) -> Result<Self, NetError> {
        if ckpt.kind != "mlp" {
            return Err(NetError::ShapeMismatch(format!(
                "checkpoint kind '{}' is not an mlp victim",
                ckpt.kind
            )));
        }
        Ok(Self {
            name: ckpt.name.clone(),
            net: Mlp::from_dump(&ckpt.net)?,
        })
    }
}

impl Victim for MlpVictim {
    fn name(&self) -> &str {
        &self.name
    }

    fn num_classes(&self) -> usize {
        self.net.output_dim()
    }

    fn logits(&self, x: &DVector<f64>) -> DVector<f64> {
        self.net.forward(x)
    }

    fn logit_grad(&self, x: &DVector<f64>, class: usize) -> DVector<f64> {
        let mut upstream = DVector::zeros(self.num_classes());
        upstream[class] = 1.0;
        self.logits_vjp(x, &upstream)
    }

    fn logits_vjp(&self, x: &DVector<f64>, upstream: &DVector<f64>) -> DVector<f64> {
        let mut tape = Tape::default();
        self.net.forward_recorded(x, &mut tape);
        let (_, input_grad) = self
            .net
            .backward(&tape, upstream)
            .expect("forward was recorded");
        input_grad
    }
}

#[derive(Debug, Clone)]
pub struct VictimTrainConfig {
    pub samples: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for VictimTrainConfig {
    fn default() -> Self {
        Self {
            samples: 4000,
            steps: 3000,
            batch_size: 64,
            learning_rate: 5e-3,
            hidden: vec![32, 32],
            seed: 0,
        }
    }
}

/// Infinity-norm constrained projected gradient descent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PgdConfig {
    /// Perturbation budget (infinity norm).
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub targeted: bool,
    /// Start from a uniform point inside the ball instead of zero.
    #[serde(default)]
    pub random_init: bool,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            epsilon: 3.0,
            step_size: 0.3,
            steps: 30,
            targeted: false,
            random_init: false,
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// PGD attack. Targeted mode ascends the target-class log-probability;
/// untargeted descends the true-class log-probability. The perturbation is
/// projected into the infinity-norm ball after every step.
pub fn pgd_attack(
    victim: &dyn Victim,
    x: &DVector<f64>,
    label: usize,
    cfg: &PgdConfig,
    rng: &mut Generator,
) -> DVector<f64> {
    let dim = x.len();
    let mut delta = if cfg.random_init && cfg.steps > 0 {
        DVector::from_fn(dim, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * cfg.epsilon)
    } else {
        DVector::zeros(dim)
    };
    let direction = if cfg.targeted { 1.0 } else { -1.0 };
    for _ in 0..cfg.steps {
        let grad = victim.log_prob_grad(&(x + &delta), label);
        for i in 0..dim {
            delta[i] += cfg.step_size * sign(direction * grad[i]);
            delta[i] = delta[i].clamp(-cfg.epsilon, cfg.epsilon);
        }
    }
    x + delta
}

/// Train an MLP victim on clean world samples.
pub fn train_standard(
    name: &str,
    world: &MixtureWorld,
    cfg: &VictimTrainConfig,
) -> Result<MlpVictim, NetError> {
    train_mlp_victim(name, world, cfg, None)
}

/// Adversarial training: the inner maximization is approximated by PGD on
/// each batch input before the gradient step. A zero-step PGD reduces this
/// to standard training.
pub fn adversarial_train(
    name: &str,
    world: &MixtureWorld,
    pgd: &PgdConfig,
    cfg: &VictimTrainConfig,
) -> Result<MlpVictim, NetError> {
    train_mlp_victim(name, world, cfg, Some(pgd))
}

fn train_mlp_victim(
    name: &str,
    world: &MixtureWorld,
    cfg: &VictimTrainConfig,
    pgd: Option<&PgdConfig>,
) -> Result<MlpVictim, NetError> {
    let mut rng = crate::rng::from_seed(cfg.seed);
    let data = labeled_samples(world, cfg.samples, &mut rng);
    let mut widths = vec![world.dim()];
    widths.extend_from_slice(&cfg.hidden);
    widths.push(world.num_classes());
    let net = Mlp::new(&widths, Activation::Tanh, &mut rng);
    let mut victim = MlpVictim {
        name: name.into(),
        net,
    };
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.learning_rate,
            ..Default::default()
        },
        &victim.net,
    );
    let mut tape = Tape::default();
    let untargeted_pgd = pgd.map(|p| PgdConfig {
        targeted: false,
        ..p.clone()
    });
    for step in 0..cfg.steps {
        let mut grads = Gradients::zeros_like(&victim.net);
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let (x, y) = &data[rng.random_range(0..data.len())];
            let x = match &untargeted_pgd {
                Some(p) if p.steps > 0 => pgd_attack(&victim, x, *y, p, &mut rng),
                _ => x.clone(),
            };
            let logits = victim.net.forward_recorded(&x, &mut tape);
            let p = softmax(&logits);
            loss -= p[*y].max(1e-300).ln();
            let mut upstream = p;
            upstream[*y] -= 1.0;
            let (g, _) = victim.net.backward(&tape, &upstream)?;
            grads.accumulate(&g);
        }
        grads.scale(1.0 / cfg.batch_size as f64);
        loss /= cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(NetError::TrainingFailure(format!(
                "non-finite victim loss at step {step}"
            )));
        }
        adam.update(&mut victim.net, &grads);
    }
    if !victim.net.params_finite() {
        return Err(NetError::TrainingFailure(
            "victim parameters diverged".into(),
        ));
    }
    Ok(victim)
}

fn fit_classifier(
    mut net: Mlp,
    data: &[(DVector<f64>, usize)],
    cfg: &VictimTrainConfig,
    rng: &mut Generator,
) -> Result<Mlp, NetError> {
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.learning_rate,
            ..Default::default()
        },
        &net,
    );
    let mut tape = Tape::default();
    for step in 0..cfg.steps {
        let mut grads = Gradients::zeros_like(&net);
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let (x, y) = &data[rng.random_range(0..data.len())];
            let logits = net.forward_recorded(x, &mut tape);
            let p = softmax(&logits);
            loss -= p[*y].max(1e-300).ln();
            let mut upstream = p;
            upstream[*y] -= 1.0;
            let (g, _) = net.backward(&tape, &upstream)?;
            grads.accumulate(&g);
        }
        grads.scale(1.0 / cfg.batch_size as f64);
        loss /= cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(NetError::TrainingFailure(format!(
                "non-finite fit loss at step {step}"
            )));
        }
        adam.update(&mut net, &grads);
    }
    Ok(net)
}

/// Sample `(point, single label)` pairs; multi-label components contribute
/// one of their labels uniformly at random.
pub fn labeled_samples(
    world: &MixtureWorld,
    n: usize,
    rng: &mut Generator,
) -> Vec<(DVector<f64>, usize)> {
    (0..n)
        .map(|_| {
            let (x, labels) = world
                .sample_data(ConditioningSet::Unconditional, rng)
                .expect("unconditional sampling is total");
            let labels: Vec<usize> = labels.into_iter().collect();
            let y = labels[rng.random_range(0..labels.len())];
            (x, y)
        })
        .collect()
}

/// Compare `logit_grad` against central finite differences, returning the
/// maximum relative error over coordinates.
pub fn finite_diff_check(
    victim: &dyn Victim,
    x: &DVector<f64>,
    class: usize,
    step: f64,
) -> f64 {
    assert!(step > 0.0);
    let analytic = victim.logit_grad(x, class);
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += step;
        xm[i] -= step;
        let fd = (victim.logits(&xp)[class] - victim.logits(&xm)[class]) / (2.0 * step);
        let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

/// Name-to-victim map for CLI reference and transfer studies.
#[derive(Default, Clone)]
pub struct VictimRegistry {
    victims: BTreeMap<String, Arc<dyn Victim>>,
}

impl VictimRegistry {
    pub fn insert(&mut self, victim: Arc<dyn Victim>) {
        self.victims.insert(victim.name().to_string(), victim);
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn Victim>> {
        self.victims.get(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.victims.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arc<dyn Victim>)> {
        self.victims.iter()
    }
}

/// Victim checkpoint with a `kind` tag; shares the network dump format with
/// the denoiser checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VictimCheckpoint {
    pub version: u32,
    pub kind: String,
    pub name: String,
    pub net: NetDump,
    pub projection: Option<MatrixDump>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixDump {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixDump {
    fn from(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m
                .row_iter()
                .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
                .collect(),
        }
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}
