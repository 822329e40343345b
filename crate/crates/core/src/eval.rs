//! Metrics and experiment protocols: attack success rates (plain and
//! adjusted), accuracy, Fréchet distance between Gaussian moment fits,
//! an entropy-based quality score, transfer matrices, and the blend-strength
//! ablation sweep.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::attack::{run_batch, AttackConfig, AttackError, SampleRecord};
use crate::guidance::{Decoder, GuidanceParams, TransformSet};
use crate::predictor::NoisePredictor;
use crate::schedule::ScheduleTable;
use crate::victims::Victim;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input: {0}")]
    Empty(String),
    #[error("mismatched inputs: {0}")]
    Mismatch(String),
    #[error("undefined rate: no correctly classified clean samples")]
    UndefinedRate,
    #[error("invalid metric input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

/// Unadjusted attack success rate: the fraction of records the victim
/// classifies as their adversarial target.
pub fn asr(records: &[SampleRecord], victim: &dyn Victim) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty("no samples".into()));
    }
    let hits = records
        .iter()
        .filter(|r| victim.predict(&DVector::from_vec(r.x.clone())) == r.y_tilde)
        .count();
    Ok(hits as f64 / records.len() as f64)
}

/// Fraction of records the victim still classifies as their true class.
pub fn accuracy_on_records(records: &[SampleRecord], victim: &dyn Victim) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty("no samples".into()));
    }
    let hits = records
        .iter()
        .filter(|r| victim.predict(&DVector::from_vec(r.x.clone())) == r.y)
        .count();
    Ok(hits as f64 / records.len() as f64)
}

/// Accuracy on labeled clean data; a prediction is correct when it lies in
/// the sample's label set (dual-labeled data accepts either class).
pub fn accuracy_labeled(
    victim: &dyn Victim,
    data: &[(DVector<f64>, BTreeSet<usize>)],
) -> Result<f64, EvalError> {
    if data.is_empty() {
        return Err(EvalError::Empty("no samples".into()));
    }
    let hits = data
        .iter()
        .filter(|(x, labels)| labels.contains(&victim.predict(x)))
        .count();
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsrMode {
    Targeted,
    Untargeted,
}

/// Adjusted attack success rate, gated on the victim classifying the clean
/// counterpart correctly. `adv` pairs carry the adversarial target in
/// targeted mode and the true label in untargeted mode, aligned with `clean`
/// by index.
pub fn adjusted_asr(
    clean: &[(DVector<f64>, usize)],
    adv: &[(DVector<f64>, usize)],
    victim: &dyn Victim,
    mode: AsrMode,
) -> Result<f64, EvalError> {
    if clean.len() != adv.len() {
        return Err(EvalError::Mismatch(format!(
            "clean has {} samples, adversarial has {}",
            clean.len(),
            adv.len()
        )));
    }
    if clean.is_empty() {
        return Err(EvalError::Empty("no samples".into()));
    }
    let mut denominator = 0usize;
    let mut numerator = 0usize;
    for ((x, y), (x_adv, label)) in clean.iter().zip(adv) {
        if victim.predict(x) != *y {
            continue;
        }
        denominator += 1;
        let pred = victim.predict(x_adv);
        let hit = match mode {
            AsrMode::Targeted => pred == *label,
            AsrMode::Untargeted => pred != *y,
        };
        if hit {
            numerator += 1;
        }
    }
    if denominator == 0 {
        return Err(EvalError::UndefinedRate);
    }
    Ok(numerator as f64 / denominator as f64)
}

/// Fréchet distance between Gaussian moment fits of two point sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrechetOutcome {
    pub distance: f64,
    /// Set when a degenerate covariance needed a ridge before the square
    /// root.
    pub regularized: bool,
}

pub fn frechet_distance(
    a: &[DVector<f64>],
    b: &[DVector<f64>],
) -> Result<FrechetOutcome, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::Empty("no samples".into()));
    }
    let dim = a[0].len();
    if b[0].len() != dim {
        return Err(EvalError::Mismatch("dimension mismatch".into()));
    }
    if a.len() < dim + 1 || b.len() < dim + 1 {
        return Err(EvalError::Invalid(format!(
            "need at least {} points per set",
            dim + 1
        )));
    }
    let (mean_a, cov_a) = moments(a);
    let (mean_b, cov_b) = moments(b);
    let mut regularized = false;
    let cov_a = ensure_pd(cov_a, &mut regularized);
    let cov_b = ensure_pd(cov_b, &mut regularized);

    // tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}) via symmetric eigendecompositions.
    let root_a = sqrt_psd(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = inner
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();

    let diff = mean_a - mean_b;
    let distance = (diff.norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross).max(0.0);
    Ok(FrechetOutcome {
        distance,
        regularized,
    })
}

fn moments(points: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let dim = points[0].len();
    let n = points.len() as f64;
    let mut mean = DVector::zeros(dim);
    for p in points {
        mean += p;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for p in points {
        let d = p - &mean;
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    (mean, cov)
}

fn ensure_pd(cov: DMatrix<f64>, regularized: &mut bool) -> DMatrix<f64> {
    let min_eig = cov
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min_eig <= 0.0 {
        *regularized = true;
        let dim = cov.nrows();
        cov + DMatrix::identity(dim, dim) * 1e-10
    } else {
        cov
    }
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let roots = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Entropy-based quality score: `exp(E[KL(p(y|x) || mean p(y|x))])` under a
/// reference classifier. Lies in `[1, num_classes]`.
pub fn entropy_score(
    samples: &[DVector<f64>],
    reference: &dyn Victim,
) -> Result<f64, EvalError> {
    if samples.len() < 2 {
        return Err(EvalError::Empty(
            "entropy score needs at least two samples".into(),
        ));
    }
    let posts: Vec<DVector<f64>> = samples.iter().map(|x| reference.probabilities(x)).collect();
    let classes = reference.num_classes();
    let mut marginal = DVector::zeros(classes);
    for p in &posts {
        marginal += p;
    }
    marginal /= posts.len() as f64;
    let mut kl_sum = 0.0;
    for p in &posts {
        for c in 0..classes {
            if p[c] > 0.0 {
                kl_sum += p[c] * (p[c] / marginal[c]).ln();
            }
        }
    }
    Ok((kl_sum / posts.len() as f64).exp())
}

/// Cross-victim attack success rates: rows are crafting victims, columns
/// evaluating victims, the diagonal is white-box ASR.
#[derive(Debug, Clone)]
pub struct TransferMatrix {
    pub crafting: Vec<String>,
    pub evaluating: Vec<String>,
    pub asr: Vec<Vec<f64>>,
}

impl TransferMatrix {
    pub fn get(&self, crafting: &str, evaluating: &str) -> Option<f64> {
        let r = self.crafting.iter().position(|n| n == crafting)?;
        let c = self.evaluating.iter().position(|n| n == evaluating)?;
        Some(self.asr[r][c])
    }
}

pub fn transfer_matrix(
    sample_sets: &BTreeMap<String, Vec<SampleRecord>>,
    victims: &[(&str, &dyn Victim)],
) -> Result<TransferMatrix, EvalError> {
    let mut crafting = Vec::new();
    let mut rows = Vec::new();
    for (name, records) in sample_sets {
        crafting.push(name.clone());
        let mut row = Vec::new();
        for (_, victim) in victims {
            row.push(asr(records, *victim)?);
        }
        rows.push(row);
    }
    Ok(TransferMatrix {
        crafting,
        evaluating: victims.iter().map(|(n, _)| (*n).to_string()).collect(),
        asr: rows,
    })
}

/// Everything a blend-strength sweep needs besides the sweep itself.
pub struct AblationInputs<'a> {
    pub predictor: &'a dyn NoisePredictor,
    pub crafting_victim: &'a dyn Victim,
    pub verdict_victims: &'a [(&'a str, &'a dyn Victim)],
    pub table: &'a ScheduleTable,
    pub decoder: &'a Decoder,
    pub transforms: &'a TransformSet,
    pub embeddings: &'a [DVector<f64>],
    /// Clean reference points for the Fréchet column.
    pub reference: &'a [DVector<f64>],
}

#[derive(Debug, Clone)]
pub struct MuAblationRow {
    pub mu: f64,
    pub asr: BTreeMap<String, f64>,
    pub accuracy: BTreeMap<String, f64>,
    pub frechet: f64,
    pub frechet_regularized: bool,
}

/// Run the attack at each blend strength with the same seeds (paired
/// comparison) and report per-victim ASR, accuracy, and Fréchet distance to
/// the clean reference.
pub fn mu_ablation(
    inputs: &AblationInputs,
    base: &AttackConfig,
    mu_list: &[f64],
    num_samples: usize,
) -> Result<Vec<MuAblationRow>, EvalError> {
    if mu_list.is_empty() {
        return Err(EvalError::Empty("mu list is empty".into()));
    }
    for &mu in mu_list {
        if !(0.0..=1.0).contains(&mu) {
            return Err(EvalError::Invalid(format!("mu {mu} outside [0, 1]")));
        }
    }
    mu_list
        .par_iter()
        .map(|&mu| {
            let cfg = AttackConfig {
                guidance: GuidanceParams {
                    mu,
                    ..base.guidance
                },
                ..base.clone()
            };
            let records = run_batch(
                inputs.predictor,
                inputs.crafting_victim,
                &cfg,
                inputs.table,
                inputs.decoder,
                inputs.transforms,
                inputs.embeddings,
                num_samples,
            )?;
            let mut asr_map = BTreeMap::new();
            let mut acc_map = BTreeMap::new();
            for (name, victim) in inputs.verdict_victims {
                asr_map.insert((*name).to_string(), asr(&records, *victim)?);
                acc_map.insert((*name).to_string(), accuracy_on_records(&records, *victim)?);
            }
            let points: Vec<DVector<f64>> = records
                .iter()
                .map(|r| DVector::from_vec(r.x.clone()))
                .collect();
            let fd = frechet_distance(&points, inputs.reference)?;
            Ok(MuAblationRow {
                mu,
                asr: asr_map,
                accuracy: acc_map,
                frechet: fd.distance,
                frechet_regularized: fd.regularized,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::victims::BayesVictim;
    use crate::world::MixtureWorld;

    /// Victim that classifies by nearest anchor.
    struct Nearest {
        anchors: Vec<DVector<f64>>,
    }

    impl Victim for Nearest {
        fn name(&self) -> &str {
            "nearest"
        }
        fn num_classes(&self) -> usize {
            self.anchors.len()
        }
        fn logits(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_iterator(
                self.anchors.len(),
                self.anchors.iter().map(|a| -(x - a).norm_squared()),
            )
        }
        fn logit_grad(&self, x: &DVector<f64>, class: usize) -> DVector<f64> {
            (&self.anchors[class] - x) * 2.0
        }
    }

    fn record(x: Vec<f64>, y: usize, y_tilde: usize) -> SampleRecord {
        SampleRecord {
            id: 0,
            x,
            y,
            y_tilde,
            mode: "targeted".into(),
            attempts: 1,
            mu_final: 0.0,
            s_final: 0.0,
            success: false,
            verdicts: BTreeMap::new(),
            digest: String::new(),
        }
    }

    fn three_anchor_victim() -> Nearest {
        Nearest {
            anchors: vec![
                DVector::from_vec(vec![0.0]),
                DVector::from_vec(vec![10.0]),
                DVector::from_vec(vec![20.0]),
            ],
        }
    }

    #[test]
    fn asr_counts_hits() {
        let victim = three_anchor_victim();
        let all_hit: Vec<SampleRecord> =
            (0..5).map(|_| record(vec![10.0], 0, 1)).collect();
        assert_eq!(asr(&all_hit, &victim).unwrap(), 1.0);
        let none: Vec<SampleRecord> = (0..5).map(|_| record(vec![0.0], 0, 1)).collect();
        assert_eq!(asr(&none, &victim).unwrap(), 0.0);
        // 7 of 20 hit the target anchor.
        let mut mixed = Vec::new();
        for i in 0..20 {
            let x = if i < 7 { vec![10.0] } else { vec![0.0] };
            mixed.push(record(x, 0, 1));
        }
        assert!((asr(&mixed, &victim).unwrap() - 0.35).abs() < 1e-15);
        assert!(matches!(asr(&[], &victim), Err(EvalError::Empty(_))));
    }

    #[test]
    fn asr_is_permutation_invariant() {
        let victim = three_anchor_victim();
        let mut records: Vec<SampleRecord> = (0..10)
            .map(|i| record(vec![if i % 3 == 0 { 10.0 } else { 0.0 }], 0, 1))
            .collect();
        let before = asr(&records, &victim).unwrap();
        records.reverse();
        assert_eq!(before, asr(&records, &victim).unwrap());
    }

    #[test]
    fn adjusted_asr_contracts() {
        let victim = three_anchor_victim();
        // Clean all correct, adversarial unchanged: both modes are 0.
        let clean: Vec<(DVector<f64>, usize)> =
            (0..10).map(|_| (DVector::from_vec(vec![0.0]), 0)).collect();
        let adv_same: Vec<(DVector<f64>, usize)> =
            (0..10).map(|_| (DVector::from_vec(vec![0.0]), 1)).collect();
        assert_eq!(
            adjusted_asr(&clean, &adv_same, &victim, AsrMode::Targeted).unwrap(),
            0.0
        );
        let adv_same_y: Vec<(DVector<f64>, usize)> =
            (0..10).map(|_| (DVector::from_vec(vec![0.0]), 0)).collect();
        assert_eq!(
            adjusted_asr(&clean, &adv_same_y, &victim, AsrMode::Untargeted).unwrap(),
            0.0
        );

        // Victim wrong on every clean sample: the rate is undefined.
        let clean_wrong: Vec<(DVector<f64>, usize)> =
            (0..4).map(|_| (DVector::from_vec(vec![10.0]), 0)).collect();
        assert!(matches!(
            adjusted_asr(&clean_wrong, &adv_same[..4], &victim, AsrMode::Targeted),
            Err(EvalError::UndefinedRate)
        ));

        // Counting fixture: 10 clean-correct, 4 flip to the target.
        let mut adv = Vec::new();
        for i in 0..10 {
            let x = if i < 4 { vec![10.0] } else { vec![0.0] };
            adv.push((DVector::from_vec(x), 1));
        }
        assert!(
            (adjusted_asr(&clean, &adv, &victim, AsrMode::Targeted).unwrap() - 0.4).abs() < 1e-15
        );
        // 6 of 10 flip somewhere other than the true class.
        let mut adv_any = Vec::new();
        for i in 0..10 {
            let x = if i < 6 { vec![20.0] } else { vec![0.0] };
            adv_any.push((DVector::from_vec(x), 0));
        }
        assert!(
            (adjusted_asr(&clean, &adv_any, &victim, AsrMode::Untargeted).unwrap() - 0.6).abs()
                < 1e-15
        );
    }

    fn gaussian_cloud(
        mean: &[f64],
        scale: &[f64],
        n: usize,
        seed: u64,
    ) -> Vec<DVector<f64>> {
        let mut rng = rng::from_seed(seed);
        (0..n)
            .map(|_| {
                let z = rng::standard_normal(&mut rng, mean.len());
                DVector::from_iterator(
                    mean.len(),
                    mean.iter()
                        .zip(scale)
                        .zip(z.iter())
                        .map(|((m, s), zi)| m + s * zi),
                )
            })
            .collect()
    }

    #[test]
    fn frechet_identical_sets_vanish() {
        let a = gaussian_cloud(&[1.0, -2.0], &[1.0, 0.5], 400, 3);
        let out = frechet_distance(&a, &a).unwrap();
        assert!(out.distance < 1e-10, "distance {}", out.distance);
        assert!(!out.regularized);
    }

    #[test]
    fn frechet_translation_gives_squared_norm() {
        let a = gaussian_cloud(&[0.0, 0.0], &[1.0, 2.0], 500, 5);
        let shift = DVector::from_vec(vec![3.0, -4.0]);
        let b: Vec<DVector<f64>> = a.iter().map(|p| p + &shift).collect();
        // Identical fitted covariances: the trace terms cancel exactly.
        let out = frechet_distance(&a, &b).unwrap();
        assert!((out.distance - 25.0).abs() < 1e-8, "distance {}", out.distance);
    }

    #[test]
    fn frechet_is_symmetric_and_matches_spectral_oracle() {
        let a = gaussian_cloud(&[0.5, 1.0], &[1.0, 0.7], 600, 7);
        let b = gaussian_cloud(&[-1.0, 2.0], &[0.4, 1.5], 600, 8);
        let ab = frechet_distance(&a, &b).unwrap().distance;
        let ba = frechet_distance(&b, &a).unwrap().distance;
        assert!((ab - ba).abs() < 1e-8);

        // Independent 2x2 oracle: tr sqrt(S_a S_b) from the eigenvalues of
        // the product matrix via the quadratic formula.
        let (ma, ca) = moments(&a);
        let (mb, cb) = moments(&b);
        let prod = &ca * &cb;
        let tr = prod[(0, 0)] + prod[(1, 1)];
        let det = prod[(0, 0)] * prod[(1, 1)] - prod[(0, 1)] * prod[(1, 0)];
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        let (l1, l2) = (tr / 2.0 + disc, tr / 2.0 - disc);
        let oracle = (ma - mb).norm_squared() + ca.trace() + cb.trace()
            - 2.0 * (l1.max(0.0).sqrt() + l2.max(0.0).sqrt());
        assert!((ab - oracle).abs() < 1e-8, "{ab} vs oracle {oracle}");
    }

    #[test]
    fn frechet_flags_degenerate_covariance() {
        let a: Vec<DVector<f64>> = (0..10).map(|_| DVector::from_vec(vec![1.0, 2.0])).collect();
        let b = gaussian_cloud(&[1.0, 2.0], &[1.0, 1.0], 50, 9);
        let out = frechet_distance(&a, &b).unwrap();
        assert!(out.regularized);
        assert!(out.distance >= 0.0);
    }

    #[test]
    fn entropy_score_bounds_and_split_modes() {
        let world = MixtureWorld::demo_shortcut();
        let bayes = BayesVictim::new(&world);
        // All samples at one mode: conditional equals marginal, score 1.
        let single: Vec<DVector<f64>> =
            (0..30).map(|_| DVector::from_vec(vec![2.0, 2.0])).collect();
        let s = entropy_score(&single, &bayes).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "score {s}");

        // Evenly split across the three confident single-class modes.
        let mut split = Vec::new();
        for _ in 0..20 {
            split.push(DVector::from_vec(vec![2.0, 2.0]));
            split.push(DVector::from_vec(vec![10.0, 10.0]));
            split.push(DVector::from_vec(vec![-6.0, -6.0]));
        }
        let s = entropy_score(&split, &bayes).unwrap();
        assert!(s <= 3.0 + 1e-12, "bounded by the class count, got {s}");
        assert!(s > 2.9, "well-separated confident modes score near 3, got {s}");

        assert!(entropy_score(&single[..1], &bayes).is_err());
    }

    #[test]
    fn transfer_matrix_single_victim_equals_asr() {
        let victim = three_anchor_victim();
        let records: Vec<SampleRecord> = (0..8)
            .map(|i| record(vec![if i < 2 { 10.0 } else { 0.0 }], 0, 1))
            .collect();
        let mut sets = BTreeMap::new();
        sets.insert("nearest".to_string(), records.clone());
        let m = transfer_matrix(&sets, &[("nearest", &victim)]).unwrap();
        assert_eq!(m.asr.len(), 1);
        assert_eq!(m.asr[0].len(), 1);
        assert_eq!(m.asr[0][0], asr(&records, &victim).unwrap());
        assert!(m.asr[0][0] >= 0.0 && m.asr[0][0] <= 1.0);
        assert_eq!(m.get("nearest", "nearest"), Some(m.asr[0][0]));
    }
}
