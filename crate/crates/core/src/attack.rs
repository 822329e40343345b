//! Guided sampling loops: the targeted and similarity-targeted attacks,
//! time-travel resampling, escalation across attempts, early stopping, and
//! the diffusion purification defense.
//!
//! One attempt sweeps the sampling times in reverse. Every step composes the
//! boundary-guided prediction; inside the classifier window the normalized
//! adversarial gradient is subtracted with strength `s`; inside the travel
//! window the step is repeated `R` times with forward-bridge re-noising in
//! between. Failed attempts escalate `mu` (clamped to 1) and `s` and retry
//! up to `S` times, stopping early on success.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::guidance::{
    adv_gradient, apply_adversarial, Decoder, EpsilonHat, GuidanceError, GuidanceParams,
    GuidedEpsilon, TransformSet,
};
use crate::predictor::{NoisePredictor, PredictorError};
use crate::rng::{standard_normal, Generator};
use crate::schedule::{ScheduleError, ScheduleTable};
use crate::victims::Victim;
use crate::world::ConditioningSet;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    Invalid(String),
    #[error("similarity targeting has no candidates")]
    EmptyCandidates,
    #[error("zero-norm embedding for class {0}")]
    ZeroEmbedding(usize),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

/// How the adversarial class is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    Targeted(usize),
    Similarity,
}

/// Whether similarity targeting picks the most or least similar candidate.
/// The written definition and the surrounding text of the source method
/// disagree on the sense; `Most` follows the text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimilaritySense {
    #[default]
    Most,
    Least,
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub guidance: GuidanceParams,
    /// Time-travel repeats per step inside the travel window.
    pub repeats: usize,
    /// Re-noise jump length along the sampling-time sequence.
    pub jump: usize,
    /// Travel window `[r_l, r_u]`.
    pub travel_window: (usize, usize),
    /// Maximum sampling attempts.
    pub attempts: usize,
    pub delta_mu: f64,
    pub delta_s: f64,
    pub true_class: usize,
    pub target: TargetMode,
    pub similarity_sense: SimilaritySense,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            guidance: GuidanceParams::default(),
            repeats: 5,
            jump: 1,
            travel_window: (500, 800),
            attempts: 5,
            delta_mu: 0.0,
            delta_s: 0.0,
            true_class: 0,
            target: TargetMode::Similarity,
            similarity_sense: SimilaritySense::Most,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, num_classes: usize) -> Result<(), AttackError> {
        self.guidance
            .validate()
            .map_err(|e| AttackError::Invalid(e.to_string()))?;
        if self.repeats < 1 {
            return Err(AttackError::Invalid("R must be >= 1".into()));
        }
        if self.jump < 1 {
            return Err(AttackError::Invalid("k must be >= 1".into()));
        }
        if self.attempts < 1 {
            return Err(AttackError::Invalid("S must be >= 1".into()));
        }
        if self.travel_window.0 > self.travel_window.1 {
            return Err(AttackError::Invalid(format!(
                "travel window [{}, {}] is empty",
                self.travel_window.0, self.travel_window.1
            )));
        }
        if self.true_class >= num_classes {
            return Err(AttackError::Invalid(format!(
                "true class {} outside [0, {num_classes})",
                self.true_class
            )));
        }
        if let TargetMode::Targeted(t) = self.target {
            if t >= num_classes {
                return Err(AttackError::Invalid(format!(
                    "target class {t} outside [0, {num_classes})"
                )));
            }
            if t == self.true_class {
                return Err(AttackError::Invalid(
                    "target class must differ from the true class".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One attack outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    /// Final decoded point.
    pub x: Vec<f64>,
    pub y: usize,
    pub y_tilde: usize,
    pub mode: String,
    pub attempts: u32,
    /// Guidance values in effect during the last executed attempt.
    pub mu_final: f64,
    pub s_final: f64,
    /// Whether the crafting victim classified the final point as `y_tilde`.
    pub success: bool,
    pub verdicts: BTreeMap<String, usize>,
    /// Hash over the accepted trajectory states.
    pub digest: String,
}

/// One notable event inside a run, for window-discipline checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEventKind {
    /// A reverse step; flag says whether the adversarial term was applied.
    Reverse { adversarial: bool },
    /// Forward-bridge re-noising inside the time-travel loop.
    Renoise,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEvent {
    pub attempt: u32,
    /// The sampling time governing the step (the outer loop time for
    /// re-noise events).
    pub t: usize,
    pub kind: StepEventKind,
}

struct RunState<'a> {
    predictor: &'a dyn NoisePredictor,
    victim: &'a dyn Victim,
    table: &'a ScheduleTable,
    decoder: &'a Decoder,
    transforms: &'a TransformSet,
    y: usize,
    y_tilde: usize,
    attempt: u32,
    trace: Option<&'a mut Vec<StepEvent>>,
}

impl RunState<'_> {
    fn record(&mut self, t: usize, kind: StepEventKind) {
        if let Some(trace) = self.trace.as_deref_mut() {
            trace.push(StepEvent {
                attempt: self.attempt,
                t,
                kind,
            });
        }
    }

    /// One guided reverse step from `times[idx]` to `times[idx - 1]`.
    fn guided_step(
        &mut self,
        z: &DVector<f64>,
        idx: usize,
        params: &GuidanceParams,
    ) -> Result<DVector<f64>, AttackError> {
        let times = self.table.sampling_times();
        let t = times[idx];
        let guided = GuidedEpsilon {
            predictor: self.predictor,
            table: self.table,
            t,
            class: self.y,
            adversarial_class: self.y_tilde,
            params: *params,
        };
        let mut eps_hat = guided.value(z)?;
        let mut adversarial = false;
        if params.s > 0.0 && params.in_classifier_window(t) {
            match adv_gradient(
                z,
                t,
                self.table,
                &guided,
                self.decoder,
                self.transforms,
                self.victim,
                self.y_tilde,
            ) {
                Ok(g) => {
                    eps_hat = apply_adversarial(&eps_hat, &g, params.s, t, self.table)?;
                    adversarial = true;
                }
                // A vanishing gradient skips the term for this step instead
                // of aborting the trajectory.
                Err(GuidanceError::DegenerateGradient) => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.record(t, StepEventKind::Reverse { adversarial });
        Ok(self.table.ddim_reverse_step(z, &eps_hat, t, times[idx - 1])?)
    }
}

/// Targeted attack run. The adversarial class must already be resolved (see
/// [`natadiff_similarity_run`] for the untargeted variant).
pub fn natadiff_run(
    predictor: &dyn NoisePredictor,
    victim: &dyn Victim,
    cfg: &AttackConfig,
    table: &ScheduleTable,
    decoder: &Decoder,
    transforms: &TransformSet,
    rng: &mut Generator,
) -> Result<SampleRecord, AttackError> {
    natadiff_run_traced(predictor, victim, cfg, table, decoder, transforms, rng, None)
}

/// As [`natadiff_run`], optionally recording per-step events.
#[allow(clippy::too_many_arguments)]
pub fn natadiff_run_traced(
    predictor: &dyn NoisePredictor,
    victim: &dyn Victim,
    cfg: &AttackConfig,
    table: &ScheduleTable,
    decoder: &Decoder,
    transforms: &TransformSet,
    rng: &mut Generator,
    mut trace: Option<&mut Vec<StepEvent>>,
) -> Result<SampleRecord, AttackError> {
    cfg.validate(victim.num_classes())?;
    let y = cfg.true_class;
    let y_tilde = match cfg.target {
        TargetMode::Targeted(t) => t,
        TargetMode::Similarity => {
            return Err(AttackError::Invalid(
                "similarity mode must resolve its target first".into(),
            ))
        }
    };
    let times = table.sampling_times();
    let n = times.len();
    let dim = predictor.dim();
    let z_terminal = standard_normal(rng, dim);

    let mut mu = cfg.guidance.mu;
    let mut s = cfg.guidance.s;
    let mut hasher = Sha256::new();
    let mut outcome: Option<(DVector<f64>, u32, f64, f64, bool, usize)> = None;

    for attempt in 1..=cfg.attempts as u32 {
        let params = GuidanceParams {
            mu,
            s,
            ..cfg.guidance
        };
        let mut state = RunState {
            predictor,
            victim,
            table,
            decoder,
            transforms,
            y,
            y_tilde,
            attempt,
            trace: trace.as_deref_mut(),
        };
        let mut z = z_terminal.clone();
        let mut i = n - 1;
        loop {
            let t_i = times[i];
            let in_travel = cfg.travel_window.0 <= t_i && t_i <= cfg.travel_window.1;
            let reps = if in_travel { cfg.repeats } else { 1 };
            let mut z_low = state.guided_step(&z, i, &params)?;
            for _ in 1..reps {
                let j = (i - 1 + cfg.jump).min(n - 1);
                z = table.resample_bridge(&z_low, times[i - 1], times[j], rng)?;
                state.record(t_i, StepEventKind::Renoise);
                z_low = z.clone();
                for a in (i..=j).rev() {
                    z_low = state.guided_step(&z_low, a, &params)?;
                }
            }
            z = z_low;
            hash_state(&mut hasher, &z);
            if i == 1 {
                break;
            }
            i -= 1;
        }
        let decoded = decoder.apply(&z);
        hash_state(&mut hasher, &decoded);
        let verdict = victim.predict(&decoded);
        let success = verdict == y_tilde;
        outcome = Some((decoded, attempt, mu, s, success, verdict));
        if success {
            break;
        }
        mu = (mu + cfg.delta_mu).min(1.0);
        s += cfg.delta_s;
    }

    let (decoded, attempts, mu_final, s_final, success, verdict) =
        outcome.expect("at least one attempt ran");
    let digest = hex16(&hasher.finalize());
    let mut verdicts = BTreeMap::new();
    verdicts.insert(victim.name().to_string(), verdict);
    Ok(SampleRecord {
        id: 0,
        x: decoded.iter().copied().collect(),
        y,
        y_tilde,
        mode: "targeted".into(),
        attempts,
        mu_final,
        s_final,
        success,
        verdicts,
        digest,
    })
}

/// Untargeted attack: resolve the adversarial class by embedding similarity,
/// then run the targeted loop.
#[allow(clippy::too_many_arguments)]
pub fn natadiff_similarity_run(
    predictor: &dyn NoisePredictor,
    victim: &dyn Victim,
    cfg: &AttackConfig,
    table: &ScheduleTable,
    decoder: &Decoder,
    transforms: &TransformSet,
    embeddings: &[DVector<f64>],
    rng: &mut Generator,
) -> Result<SampleRecord, AttackError> {
    let candidates = candidate_classes(victim.num_classes(), cfg.true_class);
    let y_tilde = similarity_target(
        cfg.true_class,
        &candidates,
        embeddings,
        cfg.similarity_sense,
    )?;
    let resolved = AttackConfig {
        target: TargetMode::Targeted(y_tilde),
        ..cfg.clone()
    };
    let mut record = natadiff_run(predictor, victim, &resolved, table, decoder, transforms, rng)?;
    record.mode = "similarity".into();
    Ok(record)
}

/// All classes except the true one.
pub fn candidate_classes(num_classes: usize, y: usize) -> Vec<usize> {
    (0..num_classes).filter(|&c| c != y).collect()
}

/// Pick the adversarial target by cosine similarity of label embeddings.
/// Ties break toward the smallest class id.
pub fn similarity_target(
    y: usize,
    candidates: &[usize],
    embeddings: &[DVector<f64>],
    sense: SimilaritySense,
) -> Result<usize, AttackError> {
    if candidates.is_empty() {
        return Err(AttackError::EmptyCandidates);
    }
    let norm_of = |class: usize| -> Result<f64, AttackError> {
        let e = embeddings
            .get(class)
            .ok_or(AttackError::ZeroEmbedding(class))?;
        let n = e.norm();
        if n < 1e-12 {
            return Err(AttackError::ZeroEmbedding(class));
        }
        Ok(n)
    };
    let y_norm = norm_of(y)?;
    let mut best: Option<(usize, f64)> = None;
    for &c in candidates {
        let c_norm = norm_of(c)?;
        let cos = embeddings[y].dot(&embeddings[c]) / (y_norm * c_norm);
        let better = match (&best, sense) {
            (None, _) => true,
            (Some((_, b)), SimilaritySense::Most) => cos > *b,
            (Some((_, b)), SimilaritySense::Least) => cos < *b,
        };
        if better {
            best = Some((c, cos));
        }
    }
    Ok(best.expect("candidates nonempty").0)
}

/// Diffusion purification: forward-noise to `t_star` (snapped down to the
/// sampling grid), then reverse-sample unconditionally back to t = 0.
pub fn purify(
    x: &DVector<f64>,
    t_star: usize,
    predictor: &dyn NoisePredictor,
    table: &ScheduleTable,
    rng: &mut Generator,
) -> Result<DVector<f64>, AttackError> {
    if t_star > table.num_timesteps() {
        return Err(AttackError::Invalid(format!(
            "t_star {t_star} outside [0, {}]",
            table.num_timesteps()
        )));
    }
    let times = table.sampling_times();
    let idx = times.iter().rposition(|&t| t <= t_star).unwrap_or(0);
    if times[idx] == 0 {
        return Ok(x.clone());
    }
    let mut z = table.sample_forward(x, times[idx], rng)?;
    for i in (1..=idx).rev() {
        let t = times[i];
        let eps = predictor.epsilon(&z, t, ConditioningSet::Unconditional, table)?;
        z = table.ddim_reverse_step(&z, &eps, t, times[i - 1])?;
    }
    Ok(z)
}

/// Run a batch of attacks, one derived seed per sample, in parallel.
/// Records come back ordered by id, so output bytes are reproducible.
#[allow(clippy::too_many_arguments)]
pub fn run_batch(
    predictor: &dyn NoisePredictor,
    victim: &dyn Victim,
    cfg: &AttackConfig,
    table: &ScheduleTable,
    decoder: &Decoder,
    transforms: &TransformSet,
    embeddings: &[DVector<f64>],
    num_samples: usize,
) -> Result<Vec<SampleRecord>, AttackError> {
    (0..num_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = crate::rng::for_item(cfg.seed, i as u64);
            let mut record = match cfg.target {
                TargetMode::Targeted(_) => {
                    natadiff_run(predictor, victim, cfg, table, decoder, transforms, &mut rng)?
                }
                TargetMode::Similarity => natadiff_similarity_run(
                    predictor, victim, cfg, table, decoder, transforms, embeddings, &mut rng,
                )?,
            };
            record.id = i as u64;
            Ok(record)
        })
        .collect()
}

/// Fill in verdicts from additional victims.
pub fn annotate_verdicts(record: &mut SampleRecord, victims: &[(&str, &dyn Victim)]) {
    let x = DVector::from_vec(record.x.clone());
    for (name, victim) in victims {
        record
            .verdicts
            .insert((*name).to_string(), victim.predict(&x));
    }
}

fn hash_state(hasher: &mut Sha256, z: &DVector<f64>) {
    for v in z.iter() {
        hasher.update(v.to_le_bytes());
    }
}

fn hex16(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::OracleEpsilon;
    use crate::rng;
    use crate::world::MixtureWorld;

    /// Victim with fixed logits: always predicts `winner`.
    struct Fixed {
        winner: usize,
        classes: usize,
    }

    impl Victim for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn num_classes(&self) -> usize {
            self.classes
        }
        fn logits(&self, _x: &DVector<f64>) -> DVector<f64> {
            let mut l = DVector::zeros(self.classes);
            l[self.winner] = 1.0;
            l
        }
        fn logit_grad(&self, x: &DVector<f64>, _class: usize) -> DVector<f64> {
            DVector::zeros(x.len())
        }
    }

    fn quick_cfg() -> AttackConfig {
        AttackConfig {
            guidance: GuidanceParams {
                s: 0.5,
                ..Default::default()
            },
            repeats: 3,
            jump: 1,
            travel_window: (500, 800),
            attempts: 4,
            delta_mu: 0.4,
            delta_s: 1.0,
            true_class: 0,
            target: TargetMode::Targeted(1),
            similarity_sense: SimilaritySense::Most,
            seed: 5,
        }
    }

    fn small_table() -> ScheduleTable {
        ScheduleTable::linear(1000, 1e-5, 25).unwrap()
    }

    #[test]
    fn similarity_prefers_parallel_then_nearest_angle() {
        let embeddings = vec![
            DVector::from_vec(vec![1.0, 0.0]),                   // y = 0
            DVector::from_vec(vec![2.0, 0.0]),                   // parallel
            DVector::from_vec(vec![0.0, 1.0]),                   // orthogonal
            DVector::from_vec(vec![1.0, 1.0]),                   // 45 degrees
        ];
        let t = similarity_target(0, &[1, 2, 3], &embeddings, SimilaritySense::Most).unwrap();
        assert_eq!(t, 1);
        let t = similarity_target(0, &[2, 3], &embeddings, SimilaritySense::Most).unwrap();
        assert_eq!(t, 3, "45 degrees beats 90 degrees");
        let t = similarity_target(0, &[2, 3], &embeddings, SimilaritySense::Least).unwrap();
        assert_eq!(t, 2);
    }

    #[test]
    fn similarity_matches_brute_force_in_higher_dimension() {
        let mut rng = rng::from_seed(33);
        let embeddings: Vec<DVector<f64>> =
            (0..10).map(|_| rng::standard_normal(&mut rng, 8)).collect();
        let y = 4;
        let candidates = candidate_classes(10, y);
        let got = similarity_target(y, &candidates, &embeddings, SimilaritySense::Most).unwrap();
        let brute = candidates
            .iter()
            .map(|&c| {
                let cos = embeddings[y].dot(&embeddings[c])
                    / (embeddings[y].norm() * embeddings[c].norm());
                (c, cos)
            })
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, (c, cos)| {
                if cos > acc.1 {
                    (c, cos)
                } else {
                    acc
                }
            })
            .0;
        assert_eq!(got, brute);
    }

    #[test]
    fn similarity_tie_breaks_to_smallest_id_and_rejects_bad_input() {
        let e = DVector::from_vec(vec![1.0, 0.0]);
        let embeddings = vec![e.clone(), e.clone(), e.clone()];
        let t = similarity_target(0, &[2, 1], &embeddings, SimilaritySense::Most).unwrap();
        assert_eq!(t, 1, "equal cosines resolve to the smallest class id");
        assert!(matches!(
            similarity_target(0, &[], &embeddings, SimilaritySense::Most),
            Err(AttackError::EmptyCandidates)
        ));
        let with_zero = vec![e.clone(), DVector::zeros(2)];
        assert!(matches!(
            similarity_target(0, &[1], &with_zero, SimilaritySense::Most),
            Err(AttackError::ZeroEmbedding(1))
        ));
    }

    #[test]
    fn two_class_world_similarity_equals_forced_choice() {
        let world = MixtureWorld::new(
            vec![
                crate::world::Component::iso(vec![2.0, 0.0], 0.3, 0.5, &[0]),
                crate::world::Component::iso(vec![-2.0, 1.0], 0.3, 0.5, &[1]),
            ],
            2,
        )
        .unwrap();
        let emb = world.class_embeddings();
        let t = similarity_target(0, &candidate_classes(2, 0), &emb, SimilaritySense::Most)
            .unwrap();
        assert_eq!(t, 1);
    }

    #[test]
    fn first_attempt_success_skips_escalation() {
        let world = MixtureWorld::demo_shortcut();
        let table = small_table();
        let oracle = OracleEpsilon::new(&world);
        let victim = Fixed {
            winner: 1,
            classes: 3,
        };
        let cfg = quick_cfg();
        let mut trace = Vec::new();
        let record = natadiff_run_traced(
            &oracle,
            &victim,
            &cfg,
            &table,
            &Decoder::Identity,
            &TransformSet::none(2),
            &mut rng::from_seed(0),
            Some(&mut trace),
        )
        .unwrap();
        assert!(record.success);
        assert_eq!(record.attempts, 1);
        assert_eq!(record.mu_final, cfg.guidance.mu);
        assert_eq!(record.s_final, cfg.guidance.s);
        assert!(trace.iter().all(|e| e.attempt == 1));
    }

    #[test]
    fn escalation_is_monotone_and_mu_clamps_at_one() {
        let world = MixtureWorld::demo_shortcut();
        let table = small_table();
        let oracle = OracleEpsilon::new(&world);
        // Always predicts the true class: every attempt fails.
        let victim = Fixed {
            winner: 0,
            classes: 3,
        };
        let cfg = quick_cfg();
        let record = natadiff_run(
            &oracle,
            &victim,
            &cfg,
            &table,
            &Decoder::Identity,
            &TransformSet::none(2),
            &mut rng::from_seed(0),
        )
        .unwrap();
        assert!(!record.success);
        assert_eq!(record.attempts, cfg.attempts as u32);
        // delta_mu = 0.4 over 3 escalations: 0.2 -> 0.6 -> 1.0 -> clamped 1.0.
        assert_eq!(record.mu_final, 1.0);
        assert_eq!(
            record.s_final,
            cfg.guidance.s + cfg.delta_s * (cfg.attempts as f64 - 1.0)
        );
    }

    #[test]
    fn identical_seed_gives_identical_records() {
        let world = MixtureWorld::demo_shortcut();
        let table = small_table();
        let oracle = OracleEpsilon::new(&world);
        let victim = Fixed {
            winner: 0,
            classes: 3,
        };
        let cfg = quick_cfg();
        let run = || {
            natadiff_run(
                &oracle,
                &victim,
                &cfg,
                &table,
                &Decoder::Identity,
                &TransformSet::none(2),
                &mut rng::from_seed(cfg.seed),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn window_discipline_holds_in_traces() {
        let world = MixtureWorld::demo_shortcut();
        let table = small_table();
        let oracle = OracleEpsilon::new(&world);
        let victim = crate::victims::BayesVictim::new(&world);
        let cfg = AttackConfig {
            guidance: GuidanceParams {
                s: 1.0,
                classifier_window: (0, 700),
                ..Default::default()
            },
            ..quick_cfg()
        };
        let mut trace = Vec::new();
        natadiff_run_traced(
            &oracle,
            &victim,
            &cfg,
            &table,
            &Decoder::Identity,
            &TransformSet::none(2),
            &mut rng::from_seed(3),
            Some(&mut trace),
        )
        .unwrap();
        let mut saw_renoise = false;
        let mut saw_adv = false;
        for e in &trace {
            match e.kind {
                StepEventKind::Renoise => {
                    saw_renoise = true;
                    assert!(
                        cfg.travel_window.0 <= e.t && e.t <= cfg.travel_window.1,
                        "re-noise outside travel window at t = {}",
                        e.t
                    );
                }
                StepEventKind::Reverse { adversarial } => {
                    if adversarial {
                        saw_adv = true;
                        assert!(
                            cfg.guidance.in_classifier_window(e.t),
                            "adversarial term outside classifier window at t = {}",
                            e.t
                        );
                    }
                }
            }
        }
        assert!(saw_renoise && saw_adv, "trace exercised both windows");
    }

    #[test]
    fn target_equal_to_true_class_is_rejected() {
        let world = MixtureWorld::demo_shortcut();
        let table = small_table();
        let oracle = OracleEpsilon::new(&world);
        let victim = Fixed {
            winner: 0,
            classes: 3,
        };
        let cfg = AttackConfig {
            target: TargetMode::Targeted(0),
            ..quick_cfg()
        };
        let err = natadiff_run(
            &oracle,
            &victim,
            &cfg,
            &table,
            &Decoder::Identity,
            &TransformSet::none(2),
            &mut rng::from_seed(0),
        );
        assert!(matches!(err, Err(AttackError::Invalid(_))));
    }

    #[test]
    fn purify_at_zero_is_identity() {
        let world = MixtureWorld::demo_shortcut();
        let table = small_table();
        let oracle = OracleEpsilon::new(&world);
        let x = DVector::from_vec(vec![3.3, -1.2]);
        let out = purify(&x, 0, &oracle, &table, &mut rng::from_seed(9)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn purify_pulls_isolated_point_toward_its_basin() {
        let world = MixtureWorld::demo_shortcut();
        let table = ScheduleTable::default_table();
        let oracle = OracleEpsilon::new(&world);
        // A point near the class-0 mode but displaced along coordinate 0.
        let x = DVector::from_vec(vec![4.0, 2.0]);
        let mut dist_sum = 0.0;
        let n = 20;
        let mut rng = rng::from_seed(10);
        for _ in 0..n {
            let p = purify(&x, 300, &oracle, &table, &mut rng).unwrap();
            dist_sum += (p - DVector::from_vec(vec![2.0, 2.0])).norm();
        }
        let mean_dist = dist_sum / n as f64;
        assert!(
            mean_dist < (x - DVector::from_vec(vec![2.0, 2.0])).norm(),
            "purification moved points away from the data mode: {mean_dist}"
        );
    }

    #[test]
    fn batch_records_are_ordered_and_deterministic() {
        let world = MixtureWorld::demo_shortcut();
        let table = small_table();
        let oracle = OracleEpsilon::new(&world);
        let victim = Fixed {
            winner: 1,
            classes: 3,
        };
        let cfg = AttackConfig {
            target: TargetMode::Similarity,
            ..quick_cfg()
        };
        let emb = world.class_embeddings();
        let run = || {
            run_batch(
                &oracle,
                &victim,
                &cfg,
                &table,
                &Decoder::Identity,
                &TransformSet::none(2),
                &emb,
                6,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        for (i, r) in a.iter().enumerate() {
            assert_eq!(r.id, i as u64);
            assert_eq!(r.mode, "similarity");
            assert_eq!(r.y_tilde, 1, "class 1 shares the dual component with 0");
            assert_ne!(r.y_tilde, r.y);
        }
    }
}
