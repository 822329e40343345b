//! Structured-text configuration.
//!
//! A run is described by one sectioned TOML file
//! (`[schedule] [world] [denoiser] [victims] [guidance] [attack] [eval]`)
//! plus an included world file listing mixture components. Shorthands:
//! `alpha_bar = "linear(1.0, 1e-5)"`, `sampling_times = "uniform(200)"`,
//! `cov = "iso(0.25)"`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use thiserror::Error;

use crate::attack::{AttackConfig, SimilaritySense, TargetMode};
use crate::denoiser::{DenoiserSpec, TrainConfig};
use crate::guidance::{
    boundary_epsilon, cfg_epsilon, Decoder, EpsilonBundle, GuidanceParams, TransformSet,
};
use crate::schedule::ScheduleTable;
use crate::victims::{
    adversarial_train, finite_diff_check, train_standard, BayesVictim, PgdConfig, ShortcutVictim,
    Victim, VictimTrainConfig,
};
use crate::world::{Component, ConditioningSet, MixtureWorld};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("parse error in {path} at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
}

impl ConfigError {
    fn io(path: &Path, err: std::io::Error) -> Self {
        ConfigError::Io {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }

    fn parse(path: &Path, text: &str, err: toml::de::Error) -> Self {
        let (line, column) = err
            .span()
            .map(|span| line_column(text, span.start))
            .unwrap_or((0, 0));
        ConfigError::Parse {
            path: path.to_path_buf(),
            line,
            column,
            message: err.message().to_string(),
        }
    }
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let mut line = 1;
    let mut col = 1;
    for (i, ch) in text.char_indices() {
        if i >= offset {
            break;
        }
        if ch == '\n' {
            line += 1;
            col = 1;
        } else {
            col += 1;
        }
    }
    (line, col)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub schedule: ScheduleSection,
    pub world: WorldSection,
    #[serde(default)]
    pub denoiser: DenoiserSection,
    #[serde(default)]
    pub victims: VictimsSection,
    #[serde(default)]
    pub guidance: GuidanceSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default = "d_num_timesteps")]
    pub num_timesteps: usize,
    #[serde(default = "d_alpha_bar")]
    pub alpha_bar: AlphaBarSpec,
    #[serde(default = "d_sampling_times")]
    pub sampling_times: TimesSpec,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            num_timesteps: d_num_timesteps(),
            alpha_bar: d_alpha_bar(),
            sampling_times: d_sampling_times(),
        }
    }
}

fn d_num_timesteps() -> usize {
    1000
}
fn d_alpha_bar() -> AlphaBarSpec {
    AlphaBarSpec::Shorthand("linear(1.0, 1e-5)".into())
}
fn d_sampling_times() -> TimesSpec {
    TimesSpec::Shorthand("uniform(200)".into())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum AlphaBarSpec {
    Shorthand(String),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum TimesSpec {
    Shorthand(String),
    Values(Vec<usize>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSection {
    /// World file path, relative to the config file.
    pub file: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSection {
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "d_embed")]
    pub t_embed_dim: usize,
    #[serde(default = "d_embed")]
    pub token_dim: usize,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_drop")]
    pub drop_prob: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        toml::from_str("").expect("empty denoiser section is valid")
    }
}

fn d_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn d_embed() -> usize {
    8
}
fn d_steps() -> usize {
    30_000
}
fn d_batch() -> usize {
    128
}
fn d_lr() -> f64 {
    1e-3
}
fn d_drop() -> f64 {
    0.1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimsSection {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_v_samples")]
    pub train_samples: usize,
    #[serde(default = "d_v_steps")]
    pub train_steps: usize,
    #[serde(default = "d_v_batch")]
    pub batch_size: usize,
    #[serde(default = "d_v_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_v_hidden")]
    pub hidden: Vec<usize>,
    /// Cue coordinates; each yields a `shortcut<k>` victim.
    #[serde(default = "d_cues")]
    pub shortcut_cues: Vec<usize>,
    #[serde(default)]
    pub pgd: PgdConfig,
}

impl Default for VictimsSection {
    fn default() -> Self {
        toml::from_str("").expect("empty victims section is valid")
    }
}

fn d_v_samples() -> usize {
    4000
}
fn d_v_steps() -> usize {
    3000
}
fn d_v_batch() -> usize {
    64
}
fn d_v_lr() -> f64 {
    5e-3
}
fn d_v_hidden() -> Vec<usize> {
    vec![32, 32]
}
fn d_cues() -> Vec<usize> {
    vec![0, 1]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSection {
    #[serde(default = "d_omega")]
    pub omega: f64,
    #[serde(default = "d_omega")]
    pub rho: f64,
    #[serde(default = "d_mu")]
    pub mu: f64,
    #[serde(default)]
    pub s: f64,
    #[serde(default)]
    pub c_l: usize,
    #[serde(default = "d_cu")]
    pub c_u: usize,
    #[serde(default = "d_transforms")]
    pub transforms: String,
    #[serde(default = "d_decoder")]
    pub decoder: String,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        toml::from_str("").expect("empty guidance section is valid")
    }
}

fn d_omega() -> f64 {
    7.5
}
fn d_mu() -> f64 {
    0.2
}
fn d_cu() -> usize {
    700
}
fn d_transforms() -> String {
    "none".into()
}
fn d_decoder() -> String {
    "identity".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(rename = "R", default = "d_repeats")]
    pub repeats: usize,
    #[serde(default = "d_jump")]
    pub k: usize,
    #[serde(default = "d_rl")]
    pub r_l: usize,
    #[serde(default = "d_ru")]
    pub r_u: usize,
    #[serde(rename = "S", default = "d_attempts")]
    pub attempts: usize,
    #[serde(default)]
    pub delta_mu: f64,
    #[serde(default)]
    pub delta_s: f64,
    #[serde(default = "d_mode")]
    pub mode: String,
    #[serde(default)]
    pub true_class: usize,
    #[serde(default)]
    pub target_class: Option<usize>,
    #[serde(default = "d_num_samples")]
    pub num_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_sense")]
    pub similarity_sense: String,
    /// Optional label-embedding table; defaults to class-conditional means.
    #[serde(default)]
    pub embeddings_file: Option<PathBuf>,
}

impl Default for AttackSection {
    fn default() -> Self {
        toml::from_str("").expect("empty attack section is valid")
    }
}

fn d_repeats() -> usize {
    5
}
fn d_jump() -> usize {
    1
}
fn d_rl() -> usize {
    500
}
fn d_ru() -> usize {
    800
}
fn d_attempts() -> usize {
    5
}
fn d_mode() -> String {
    "similarity".into()
}
fn d_num_samples() -> usize {
    20
}
fn d_sense() -> String {
    "most".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "d_ref_samples")]
    pub reference_samples: usize,
    #[serde(default = "d_ref_seed")]
    pub reference_seed: u64,
    #[serde(default = "d_entropy_ref")]
    pub entropy_reference: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        toml::from_str("").expect("empty eval section is valid")
    }
}

fn d_ref_samples() -> usize {
    500
}
fn d_ref_seed() -> u64 {
    123
}
fn d_entropy_ref() -> String {
    "bayes".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    dim: usize,
    num_classes: usize,
    #[serde(rename = "component")]
    components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentSpec {
    mean: Vec<f64>,
    cov: CovSpec,
    weight: f64,
    labels: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum CovSpec {
    Shorthand(String),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingFile {
    #[serde(rename = "embedding")]
    embeddings: Vec<EmbeddingSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingSpec {
    class: usize,
    vector: Vec<f64>,
}

/// Fully loaded run configuration.
pub struct Loaded {
    pub file: FileConfig,
    pub table: ScheduleTable,
    pub world: MixtureWorld,
    pub base_dir: PathBuf,
    /// Raw config text, for digesting into manifests.
    pub config_text: String,
}

pub fn load(path: &Path) -> Result<Loaded, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::io(path, e))?;
    let file: FileConfig =
        toml::from_str(&text).map_err(|e| ConfigError::parse(path, &text, e))?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let table = build_schedule(&file.schedule)?;
    let world_path = base_dir.join(&file.world.file);
    let world = load_world(&world_path)?;
    Ok(Loaded {
        file,
        table,
        world,
        base_dir,
        config_text: text,
    })
}

pub fn build_schedule(section: &ScheduleSection) -> Result<ScheduleTable, ConfigError> {
    let times = match &section.sampling_times {
        TimesSpec::Values(v) => v.clone(),
        TimesSpec::Shorthand(s) => {
            let n = parse_call1(s, "uniform")
                .ok_or_else(|| ConfigError::Invalid(format!("bad sampling_times shorthand '{s}'")))?
                as usize;
            return match &section.alpha_bar {
                AlphaBarSpec::Shorthand(sh) => {
                    let (start, end) = parse_call2(sh, "linear").ok_or_else(|| {
                        ConfigError::Invalid(format!("bad alpha_bar shorthand '{sh}'"))
                    })?;
                    if start != 1.0 {
                        return Err(ConfigError::Invalid(format!(
                            "linear alpha_bar must start at 1.0, got {start}"
                        )));
                    }
                    ScheduleTable::linear(section.num_timesteps, end, n)
                        .map_err(|e| ConfigError::Invalid(e.to_string()))
                }
                AlphaBarSpec::Values(v) => {
                    let times = uniform_times(section.num_timesteps, n)?;
                    ScheduleTable::new(v.clone(), times)
                        .map_err(|e| ConfigError::Invalid(e.to_string()))
                }
            };
        }
    };
    let alpha_bar = match &section.alpha_bar {
        AlphaBarSpec::Values(v) => v.clone(),
        AlphaBarSpec::Shorthand(sh) => {
            let (start, end) = parse_call2(sh, "linear")
                .ok_or_else(|| ConfigError::Invalid(format!("bad alpha_bar shorthand '{sh}'")))?;
            if start != 1.0 {
                return Err(ConfigError::Invalid(format!(
                    "linear alpha_bar must start at 1.0, got {start}"
                )));
            }
            let probe = ScheduleTable::linear(section.num_timesteps, end, 2)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            (0..=section.num_timesteps)
                .map(|t| probe.alpha_bar(t).expect("in range"))
                .collect()
        }
    };
    ScheduleTable::new(alpha_bar, times).map_err(|e| ConfigError::Invalid(e.to_string()))
}

fn uniform_times(num_timesteps: usize, n: usize) -> Result<Vec<usize>, ConfigError> {
    // Reuse the table builder's spacing by constructing a throwaway table.
    ScheduleTable::linear(num_timesteps, 1e-5, n)
        .map(|t| t.sampling_times().to_vec())
        .map_err(|e| ConfigError::Invalid(e.to_string()))
}

pub fn load_world(path: &Path) -> Result<MixtureWorld, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::io(path, e))?;
    let file: WorldFile = toml::from_str(&text).map_err(|e| ConfigError::parse(path, &text, e))?;
    let mut components = Vec::with_capacity(file.components.len());
    for (i, spec) in file.components.iter().enumerate() {
        if spec.mean.len() != file.dim {
            return Err(ConfigError::Invalid(format!(
                "component {i} mean has dimension {}, world.dim is {}",
                spec.mean.len(),
                file.dim
            )));
        }
        let cov = match &spec.cov {
            CovSpec::Shorthand(s) => {
                let var = parse_call1(s, "iso").ok_or_else(|| {
                    ConfigError::Invalid(format!("component {i}: bad cov shorthand '{s}'"))
                })?;
                DMatrix::identity(file.dim, file.dim) * var
            }
            CovSpec::Matrix(rows) => {
                if rows.len() != file.dim || rows.iter().any(|r| r.len() != file.dim) {
                    return Err(ConfigError::Invalid(format!(
                        "component {i}: covariance must be {0}x{0}",
                        file.dim
                    )));
                }
                DMatrix::from_fn(file.dim, file.dim, |r, c| rows[r][c])
            }
        };
        components.push(Component {
            mean: DVector::from_vec(spec.mean.clone()),
            cov,
            weight: spec.weight,
            labels: spec.labels.iter().copied().collect::<BTreeSet<usize>>(),
        });
    }
    MixtureWorld::new(components, file.num_classes)
        .map_err(|e| ConfigError::Invalid(e.to_string()))
}

/// Label embeddings: from the configured file, or class-conditional data
/// means by default.
pub fn load_embeddings(loaded: &Loaded) -> Result<Vec<DVector<f64>>, ConfigError> {
    let Some(rel) = &loaded.file.attack.embeddings_file else {
        return Ok(loaded.world.class_embeddings());
    };
    let path = loaded.base_dir.join(rel);
    let text = std::fs::read_to_string(&path).map_err(|e| ConfigError::io(&path, e))?;
    let file: EmbeddingFile =
        toml::from_str(&text).map_err(|e| ConfigError::parse(&path, &text, e))?;
    let classes = loaded.world.num_classes();
    let mut out = vec![None; classes];
    for spec in &file.embeddings {
        if spec.class >= classes {
            return Err(ConfigError::Invalid(format!(
                "embedding class {} outside [0, {classes})",
                spec.class
            )));
        }
        out[spec.class] = Some(DVector::from_vec(spec.vector.clone()));
    }
    out.into_iter()
        .enumerate()
        .map(|(c, e)| e.ok_or_else(|| ConfigError::Invalid(format!("class {c} has no embedding"))))
        .collect()
}

pub fn build_guidance(section: &GuidanceSection) -> Result<GuidanceParams, ConfigError> {
    let params = GuidanceParams {
        omega: section.omega,
        rho: section.rho,
        mu: section.mu,
        s: section.s,
        classifier_window: (section.c_l, section.c_u),
    };
    params
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(params)
}

pub fn build_decoder(section: &GuidanceSection) -> Result<Decoder, ConfigError> {
    match section.decoder.as_str() {
        "identity" => Ok(Decoder::Identity),
        other => Err(ConfigError::Invalid(format!(
            "unknown decoder '{other}' (expected 'identity')"
        ))),
    }
}

pub fn build_transforms(section: &GuidanceSection, dim: usize) -> Result<TransformSet, ConfigError> {
    match section.transforms.as_str() {
        "none" => Ok(TransformSet::none(dim)),
        "default5" => Ok(TransformSet::default5(dim)),
        other => Err(ConfigError::Invalid(format!(
            "unknown transform preset '{other}' (expected 'none' or 'default5')"
        ))),
    }
}

pub fn build_attack(loaded: &Loaded) -> Result<AttackConfig, ConfigError> {
    let a = &loaded.file.attack;
    let guidance = build_guidance(&loaded.file.guidance)?;
    let target = match a.mode.as_str() {
        "similarity" => TargetMode::Similarity,
        "targeted" => {
            let t = a.target_class.ok_or_else(|| {
                ConfigError::Invalid("targeted mode requires attack.target_class".into())
            })?;
            TargetMode::Targeted(t)
        }
        other => {
            return Err(ConfigError::Invalid(format!(
                "unknown attack mode '{other}' (expected 'targeted' or 'similarity')"
            )))
        }
    };
    let similarity_sense = match a.similarity_sense.as_str() {
        "most" => SimilaritySense::Most,
        "least" => SimilaritySense::Least,
        other => {
            return Err(ConfigError::Invalid(format!(
                "unknown similarity_sense '{other}' (expected 'most' or 'least')"
            )))
        }
    };
    let cfg = AttackConfig {
        guidance,
        repeats: a.repeats,
        jump: a.k,
        travel_window: (a.r_l, a.r_u),
        attempts: a.attempts,
        delta_mu: a.delta_mu,
        delta_s: a.delta_s,
        true_class: a.true_class,
        target,
        similarity_sense,
        seed: a.seed,
    };
    cfg.validate(loaded.world.num_classes())
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}

pub fn build_denoiser_spec(section: &DenoiserSection) -> DenoiserSpec {
    DenoiserSpec {
        hidden: section.hidden.clone(),
        t_embed_dim: section.t_embed_dim,
        token_dim: section.token_dim,
    }
}

pub fn build_train_config(section: &DenoiserSection) -> TrainConfig {
    TrainConfig {
        steps: section.steps,
        batch_size: section.batch_size,
        learning_rate: section.learning_rate,
        drop_prob: section.drop_prob,
        seed: section.seed,
    }
}

/// Victim names understood by [`build_victim`].
pub fn victim_names(section: &VictimsSection) -> Vec<String> {
    let mut names = vec!["bayes".to_string()];
    for cue in &section.shortcut_cues {
        names.push(format!("shortcut{cue}"));
    }
    names.push("trained_mlp".into());
    names.push("adv_trained".into());
    names
}

/// Build one victim by registry name. Trained victims are fit on the spot,
/// deterministically from the section seed.
pub fn build_victim(
    name: &str,
    world: &MixtureWorld,
    section: &VictimsSection,
) -> Result<Arc<dyn Victim>, ConfigError> {
    let train_cfg = |seed: u64| VictimTrainConfig {
        samples: section.train_samples,
        steps: section.train_steps,
        batch_size: section.batch_size,
        learning_rate: section.learning_rate,
        hidden: section.hidden.clone(),
        seed,
    };
    if name == "bayes" {
        return Ok(Arc::new(BayesVictim::new(world)));
    }
    if let Some(cue) = name.strip_prefix("shortcut") {
        let cue: usize = cue
            .parse()
            .map_err(|_| ConfigError::Invalid(format!("bad shortcut victim name '{name}'")))?;
        if cue >= world.dim() {
            return Err(ConfigError::Invalid(format!(
                "shortcut cue {cue} outside world dimension {}",
                world.dim()
            )));
        }
        let cfg = train_cfg(section.seed.wrapping_add(10 + cue as u64));
        let mut rng = crate::rng::from_seed(cfg.seed);
        let victim = ShortcutVictim::fit(
            name,
            world,
            ShortcutVictim::cue_projection(world.dim(), cue),
            &cfg,
            &mut rng,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        return Ok(Arc::new(victim));
    }
    match name {
        "trained_mlp" => {
            let victim = train_standard(name, world, &train_cfg(section.seed.wrapping_add(1)))
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            Ok(Arc::new(victim))
        }
        "adv_trained" => {
            let victim = adversarial_train(
                name,
                world,
                &section.pgd,
                &train_cfg(section.seed.wrapping_add(2)),
            )
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            Ok(Arc::new(victim))
        }
        other => Err(ConfigError::Invalid(format!(
            "unknown victim '{other}' (known: {:?})",
            victim_names(section)
        ))),
    }
}

fn parse_call1(s: &str, name: &str) -> Option<f64> {
    let inner = s
        .trim()
        .strip_prefix(name)?
        .trim()
        .strip_prefix('(')?
        .strip_suffix(')')?;
    inner.trim().parse().ok()
}

fn parse_call2(s: &str, name: &str) -> Option<(f64, f64)> {
    let inner = s
        .trim()
        .strip_prefix(name)?
        .trim()
        .strip_prefix('(')?
        .strip_suffix(')')?;
    let mut parts = inner.split(',');
    let a = parts.next()?.trim().parse().ok()?;
    let b = parts.next()?.trim().parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some((a, b))
}

/// One named invariant check, for the `validate` command.
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed,
        detail,
    }
}

/// Run the schedule/world/gradient self-check suites against a loaded
/// configuration.
pub fn run_self_checks(loaded: &Loaded) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let table = &loaded.table;
    let world = &loaded.world;

    // Variance-preserving identity at every table entry.
    let mut worst: f64 = 0.0;
    for t in 0..=table.num_timesteps() {
        let (a, b) = table.alpha_beta(t).expect("in range");
        worst = worst.max((a * a + b * b - 1.0).abs());
    }
    out.push(check(
        "schedule.vp_identity",
        worst < 1e-12,
        format!("max |alpha^2 + beta^2 - 1| = {worst:.3e}"),
    ));

    // Bridge consistency over a 100-pair grid.
    let mut worst: f64 = 0.0;
    let step = (table.num_timesteps() / 10).max(1);
    for tau in (0..=table.num_timesteps()).step_by(step) {
        for t in (tau..=table.num_timesteps()).step_by(step) {
            let p = table.bridge_params(tau, t).expect("ordered");
            let (_, b_tau) = table.alpha_beta(tau).expect("in range");
            let (_, b_t) = table.alpha_beta(t).expect("in range");
            worst = worst.max((p.a * p.a * b_tau * b_tau + p.b_sq - b_t * b_t).abs());
        }
    }
    out.push(check(
        "schedule.bridge_consistency",
        worst < 1e-10,
        format!("max |a^2 b_tau^2 + b^2 - b_t^2| = {worst:.3e}"),
    ));

    // Posterior normalization at probe points.
    let probes = probe_points(world);
    let mut worst: f64 = 0.0;
    for x in &probes {
        for t in [0, table.num_timesteps() / 5] {
            let p = world.bayes_posterior(x, t, table).expect("total");
            worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
        }
    }
    out.push(check(
        "world.posterior_normalization",
        worst < 1e-12,
        format!("max |sum p - 1| = {worst:.3e}"),
    ));

    // Score against finite differences of the log density.
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for x in &probes {
        for t in [1, table.num_timesteps() / 3] {
            let score = world
                .noised_score(ConditioningSet::Unconditional, x, t, table)
                .expect("total");
            for i in 0..world.dim() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (world
                    .log_density_noised(ConditioningSet::Unconditional, &xp, t, table)
                    .expect("total")
                    - world
                        .log_density_noised(ConditioningSet::Unconditional, &xm, t, table)
                        .expect("total"))
                    / (2.0 * h);
                worst = worst.max((score[i] - fd).abs());
            }
        }
    }
    out.push(check(
        "world.score_finite_difference",
        worst <= 1e-6,
        format!("max |score - fd| = {worst:.3e}"),
    ));

    // Score-model link at probe points.
    let mut worst: f64 = 0.0;
    for x in &probes {
        let t = table.num_timesteps() / 4;
        let (_, beta) = table.alpha_beta(t).expect("in range");
        let eps = world
            .oracle_epsilon(ConditioningSet::Unconditional, x, t, table)
            .expect("total");
        let score = world
            .noised_score(ConditioningSet::Unconditional, x, t, table)
            .expect("total");
        worst = worst.max((eps + score * beta).norm());
    }
    out.push(check(
        "world.oracle_epsilon_link",
        worst == 0.0,
        format!("max |eps + beta score| = {worst:.3e}"),
    ));

    // Bayes victim gradients against finite differences.
    let bayes = BayesVictim::new(world);
    let mut worst: f64 = 0.0;
    for x in probes.iter().take(3) {
        for class in 0..world.num_classes() {
            worst = worst.max(finite_diff_check(&bayes, x, class, 1e-5));
        }
    }
    out.push(check(
        "victims.bayes_gradient",
        worst <= 1e-4,
        format!("max relative error = {worst:.3e}"),
    ));

    // Shortcut victims are exactly invariant in their projection kernel.
    if world.dim() >= 2 {
        let cue = loaded.file.victims.shortcut_cues.first().copied().unwrap_or(0);
        let quick = VictimsSection {
            train_steps: 300,
            ..loaded.file.victims.clone()
        };
        match build_victim(&format!("shortcut{cue}"), world, &quick) {
            Ok(victim) => {
                let x = probes[0].clone();
                let mut kernel = DVector::zeros(world.dim());
                kernel[(cue + 1) % world.dim()] = 3.0;
                let moved = &x + kernel;
                let invariant = (victim.logits(&x) - victim.logits(&moved)).amax() == 0.0;
                out.push(check(
                    "victims.shortcut_kernel_invariance",
                    invariant,
                    "logits under kernel perturbation".into(),
                ));
            }
            Err(e) => out.push(check(
                "victims.shortcut_kernel_invariance",
                false,
                e.to_string(),
            )),
        }
    }

    // Guidance reductions.
    let mut rng = crate::rng::from_seed(0);
    let mut exact = true;
    for _ in 0..10 {
        let bundle = EpsilonBundle {
            eps_uncond: crate::rng::standard_normal(&mut rng, world.dim()),
            eps_cond: crate::rng::standard_normal(&mut rng, world.dim()),
            eps_intersection: crate::rng::standard_normal(&mut rng, world.dim()),
        };
        let params = GuidanceParams {
            mu: 0.0,
            omega: 5.5,
            ..Default::default()
        };
        if boundary_epsilon(&bundle, &params) != cfg_epsilon(&bundle, 5.5) {
            exact = false;
        }
    }
    out.push(check(
        "guidance.mu_zero_reduction",
        exact,
        "boundary guidance at mu = 0 equals classifier-free guidance".into(),
    ));

    let worked = boundary_epsilon(
        &EpsilonBundle {
            eps_uncond: DVector::from_vec(vec![0.0, 0.0]),
            eps_cond: DVector::from_vec(vec![1.0, 0.0]),
            eps_intersection: DVector::from_vec(vec![0.0, 1.0]),
        },
        &GuidanceParams {
            omega: 7.5,
            rho: 7.5,
            mu: 0.2,
            ..Default::default()
        },
    );
    out.push(check(
        "guidance.worked_value",
        worked == DVector::from_vec(vec![6.0, 1.5]),
        format!("got ({}, {})", worked[0], worked[1]),
    ));

    out
}

fn probe_points(world: &MixtureWorld) -> Vec<DVector<f64>> {
    let mut points: Vec<DVector<f64>> = world.components().iter().map(|c| c.mean.clone()).collect();
    let mut rng = crate::rng::from_seed(1234);
    for _ in 0..3 {
        points.push(crate::rng::standard_normal(&mut rng, world.dim()) * 2.0);
    }
    points
}
