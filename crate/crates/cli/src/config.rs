//! Run configuration: parsing, defaulting and validation.
//!
//! A config is one JSON document. Every block has full defaults, so `{}` is
//! a valid config (default quadratic, Discover, one seed). Validation never
//! stops at the first problem; it returns every violation it can find, each
//! tagged with the dotted path of the offending field.

use std::fmt;
use std::path::{Path, PathBuf};

use discover_core::engine::{
    Composition, LrSchedule, OptimizerConfig, ShardingPlan, TrainLoopConfig,
};
use discover_core::optim::{AdamParams, HyperParams, Variant};
use discover_core::problems::{
    ClusteredLogistic, ClusteredProblem, ClusteredQuadratic, LogisticConfig, QuadraticConfig,
};
use discover_core::{ClusterSpec, Error as CoreError};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::presets;

/// One schema or constraint violation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid config:\n{}", list(.0))]
    Invalid(Vec<Violation>),
}

fn list(v: &[Violation]) -> String {
    v.iter()
        .map(|x| format!("  {x}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl ConfigError {
    pub fn violations(&self) -> &[Violation] {
        match self {
            ConfigError::Invalid(v) => v,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ProblemConfig {
    Quadratic(QuadraticConfig),
    Logistic(LogisticConfig),
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig::Quadratic(QuadraticConfig::default())
    }
}

/// A built problem instance.
pub enum Problem {
    Quadratic(ClusteredQuadratic),
    Logistic(ClusteredLogistic),
}

impl Problem {
    pub fn as_dyn(&self) -> &dyn ClusteredProblem {
        match self {
            Problem::Quadratic(p) => p,
            Problem::Logistic(p) => p,
        }
    }
}

impl ProblemConfig {
    pub fn family(&self) -> &'static str {
        match self {
            ProblemConfig::Quadratic(_) => "quadratic",
            ProblemConfig::Logistic(_) => "logistic",
        }
    }

    pub fn build(&self) -> Result<Problem, CoreError> {
        Ok(match self {
            ProblemConfig::Quadratic(c) => Problem::Quadratic(c.build()?),
            ProblemConfig::Logistic(c) => Problem::Logistic(c.build()?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerBlock {
    pub variant: Variant,
    pub mu: f64,
    pub beta: f64,
    pub nu_mix: f64,
    pub alpha: f64,
    pub alpha_n: Option<Vec<f64>>,
    pub tail_fraction: Option<f64>,
    pub adam: AdamParams,
}

impl Default for OptimizerBlock {
    fn default() -> Self {
        let hp = HyperParams::default();
        Self {
            variant: Variant::Discover,
            mu: hp.mu,
            beta: hp.beta,
            nu_mix: hp.nu_mix,
            alpha: hp.alpha,
            alpha_n: hp.alpha_n,
            tail_fraction: hp.tail_fraction,
            adam: hp.adam,
        }
    }
}

impl OptimizerBlock {
    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            mu: self.mu,
            beta: self.beta,
            nu_mix: self.nu_mix,
            alpha: self.alpha,
            alpha_n: self.alpha_n.clone(),
            tail_fraction: self.tail_fraction,
            adam: self.adam,
        }
    }

    pub fn to_optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            variant: self.variant,
            hp: self.hyper_params(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopBlock {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub eval_every: u64,
    pub noise_probe_batches: usize,
    pub trace_between_var: bool,
    /// Global batch size; split evenly over `n_shards`.
    pub batch_size: usize,
    pub n_shards: usize,
    pub composition: Composition,
}

impl Default for LoopBlock {
    fn default() -> Self {
        let t = TrainLoopConfig::default();
        Self {
            total_steps: t.total_steps,
            warmup_steps: t.warmup_steps,
            lr_schedule: t.lr_schedule,
            weight_decay: t.weight_decay,
            eval_every: t.eval_every,
            noise_probe_batches: t.noise_probe_batches,
            trace_between_var: t.trace_between_var,
            batch_size: 20,
            n_shards: 1,
            composition: Composition::SingleClusterPerShard,
        }
    }
}

impl LoopBlock {
    pub fn train_loop(&self) -> TrainLoopConfig {
        TrainLoopConfig {
            total_steps: self.total_steps,
            warmup_steps: self.warmup_steps,
            lr_schedule: self.lr_schedule,
            weight_decay: self.weight_decay,
            eval_every: self.eval_every,
            noise_probe_batches: self.noise_probe_batches,
            trace_between_var: self.trace_between_var,
        }
    }

    pub fn plan(&self) -> Result<ShardingPlan, CoreError> {
        if self.n_shards == 0 || self.batch_size % self.n_shards != 0 {
            return Err(CoreError::InvalidPlan(format!(
                "batch_size {} is not divisible by n_shards {}",
                self.batch_size, self.n_shards
            )));
        }
        ShardingPlan::new(
            self.n_shards,
            self.batch_size / self.n_shards,
            self.composition,
        )
    }
}

/// Settings read only by the `variance` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarianceBlock {
    pub variants: Vec<Variant>,
    /// Window length in steps for the windowed between-cluster variance.
    pub window: u64,
}

impl Default for VarianceBlock {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Sgd, Variant::Momentum, Variant::Discover],
            window: discover_core::metrics::DEFAULT_WINDOW,
        }
    }
}

/// Grid read only by the `sweep` subcommand. Empty axes keep the value of
/// the optimizer block.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepBlock {
    pub mu: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Scalar rates broadcast to every cluster.
    pub alpha_n: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub optimizer: OptimizerBlock,
    #[serde(rename = "loop")]
    pub loop_: LoopBlock,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    /// Enforce the step-size regime of the convergence theorem
    /// (`0 < α < p_min`, Discover family, quadratic problem).
    pub theorem_mode: bool,
    pub variance: VarianceBlock,
    pub sweep: SweepBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: ProblemConfig::default(),
            optimizer: OptimizerBlock::default(),
            loop_: LoopBlock::default(),
            seeds: vec![0],
            output_dir: None,
            theorem_mode: false,
            variance: VarianceBlock::default(),
            sweep: SweepBlock::default(),
        }
    }
}

/// Reads a config file, or a built-in preset when `path` is `preset:<name>`.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    if let Some(name) = path.to_str().and_then(|s| s.strip_prefix("preset:")) {
        let cfg = presets::preset(name).ok_or_else(|| ConfigError::UnknownPreset(name.into()))?;
        return cfg.validated();
    }
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let value: Value = serde_json::from_str(text)?;
    parse_config_value(&value)
}

pub fn parse_config_value(value: &Value) -> Result<RunConfig, ConfigError> {
    let mut errs = Vec::new();
    schema_check(value, &mut errs);
    if !errs.is_empty() {
        return Err(ConfigError::Invalid(errs));
    }
    let cfg: RunConfig = serde_json::from_value(value.clone())
        .map_err(|e| ConfigError::Invalid(vec![Violation::new("<root>", e.to_string())]))?;
    cfg.validated()
}

impl RunConfig {
    /// Runs the constraint checks, returning `self` when there are none.
    pub fn validated(self) -> Result<Self, ConfigError> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(self)
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    /// Every constraint violation of an already well-typed config.
    pub fn violations(&self) -> Vec<Violation> {
        let mut errs = Vec::new();
        let spec = self.problem_violations(&mut errs);
        self.optimizer_violations(spec.as_ref(), &mut errs);
        self.loop_violations(&mut errs);
        if self.seeds.is_empty() {
            errs.push(Violation::new("seeds", "at least one seed is required"));
        }
        if self.variance.window == 0 {
            errs.push(Violation::new("variance.window", "must be positive"));
        }
        if self.variance.variants.contains(&Variant::Adam) {
            errs.push(Violation::new(
                "variance.variants",
                "adam has no cluster or momentum buffer to measure",
            ));
        }
        if self.variance.variants.is_empty() {
            errs.push(Violation::new("variance.variants", "must list at least one optimizer"));
        }
        for (axis, values) in [
            ("mu", &self.sweep.mu),
            ("alpha", &self.sweep.alpha),
            ("alpha_n", &self.sweep.alpha_n),
            ("beta", &self.sweep.beta),
        ] {
            if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                errs.push(Violation::new(
                    format!("sweep.{axis}"),
                    format!("{v} is not a finite non-negative value"),
                ));
            }
        }
        errs
    }

    fn problem_violations(&self, errs: &mut Vec<Violation>) -> Option<ClusterSpec> {
        let built = match &self.problem {
            ProblemConfig::Quadratic(q) => {
                if let Err(e) = q.spec() {
                    errs.push(Violation::new("problem.probs", e.to_string()));
                    return None;
                }
                q.build().map(|p| p.spec().clone())
            }
            ProblemConfig::Logistic(l) => l.build().map(|p| p.spec().clone()),
        };
        match built {
            Ok(spec) => Some(spec),
            Err(e) => {
                errs.push(Violation::new("problem", e.to_string()));
                None
            }
        }
    }

    fn optimizer_violations(&self, spec: Option<&ClusterSpec>, errs: &mut Vec<Violation>) {
        let opt = &self.optimizer;
        let Some(spec) = spec else {
            return;
        };
        if let Err(e) = opt.hyper_params().validate(opt.variant, spec) {
            let path = match &e {
                CoreError::InvalidHyperParam { name, .. } => format!("optimizer.{name}"),
                _ => "optimizer".into(),
            };
            errs.push(Violation::new(path, e.to_string()));
        }
        if self.theorem_mode {
            if !matches!(self.problem, ProblemConfig::Quadratic(_)) {
                errs.push(Violation::new(
                    "problem.family",
                    "theorem_mode needs the quadratic family (exact constants)",
                ));
            }
            if !opt.variant.is_discover() {
                errs.push(Violation::new(
                    "optimizer.variant",
                    format!("theorem_mode needs a Discover variant, got {}", opt.variant),
                ));
            }
            let p_min = spec.p_min();
            if !(opt.alpha > 0.0 && opt.alpha < p_min) {
                errs.push(Violation::new(
                    "optimizer.alpha",
                    format!(
                        "theorem_mode requires alpha in (0, p_min) = (0, {p_min}), got {}",
                        opt.alpha
                    ),
                ));
            }
        }
    }

    fn loop_violations(&self, errs: &mut Vec<Violation>) {
        let l = &self.loop_;
        if l.total_steps > 0 && l.warmup_steps >= l.total_steps {
            errs.push(Violation::new(
                "loop.warmup_steps",
                format!("{} must be below total_steps {}", l.warmup_steps, l.total_steps),
            ));
        }
        if l.eval_every == 0 {
            errs.push(Violation::new("loop.eval_every", "must be positive"));
        }
        if !(l.weight_decay.is_finite() && l.weight_decay >= 0.0) {
            errs.push(Violation::new(
                "loop.weight_decay",
                format!("{} must be a finite non-negative value", l.weight_decay),
            ));
        }
        if l.batch_size == 0 {
            errs.push(Violation::new("loop.batch_size", "must be positive"));
        }
        if l.n_shards == 0 {
            errs.push(Violation::new("loop.n_shards", "must be positive"));
        } else if l.batch_size % l.n_shards != 0 {
            errs.push(Violation::new(
                "loop.n_shards",
                format!("batch_size {} is not divisible by {}", l.batch_size, l.n_shards),
            ));
        }
    }

    pub fn output_dir_or<'a>(&'a self, fallback: &'a Path) -> &'a Path {
        self.output_dir.as_deref().unwrap_or(fallback)
    }
}

/// Structural checks against the defaulted schema: unknown keys and type
/// mismatches, all reported.
fn schema_check(value: &Value, errs: &mut Vec<Violation>) {
    let Some(root) = value.as_object() else {
        errs.push(Violation::new("<root>", "config must be a JSON object"));
        return;
    };
    let mut rest = root.clone();
    if let Some(problem) = rest.remove("problem") {
        check_problem(&problem, errs);
    }
    if let Some(v) = rest.remove("optimizer") {
        check_block::<OptimizerBlock>("optimizer", &v, errs);
    }
    if let Some(v) = rest.remove("loop") {
        check_block::<LoopBlock>("loop", &v, errs);
    }
    if let Some(v) = rest.remove("variance") {
        check_block::<VarianceBlock>("variance", &v, errs);
    }
    if let Some(v) = rest.remove("sweep") {
        check_block::<SweepBlock>("sweep", &v, errs);
    }
    let mut top = Map::new();
    for (k, v) in rest {
        top.insert(k, v);
    }
    check_fields::<TopLevel>("", &Value::Object(top), errs);
}

/// Scalar top-level fields, checked the same way as the blocks.
#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TopLevel {
    seeds: Vec<u64>,
    output_dir: Option<PathBuf>,
    theorem_mode: bool,
}

fn check_problem(value: &Value, errs: &mut Vec<Violation>) {
    let Some(obj) = value.as_object() else {
        errs.push(Violation::new("problem", "must be an object"));
        return;
    };
    let mut fields = obj.clone();
    match fields.remove("family") {
        None => errs.push(Violation::new("problem.family", "missing required field")),
        Some(Value::String(f)) if f == "quadratic" => {
            check_block::<QuadraticConfig>("problem", &Value::Object(fields), errs)
        }
        Some(Value::String(f)) if f == "logistic" => {
            check_block::<LogisticConfig>("problem", &Value::Object(fields), errs)
        }
        Some(other) => errs.push(Violation::new(
            "problem.family",
            format!("expected \"quadratic\" or \"logistic\", got {other}"),
        )),
    }
}

fn check_block<T: Default + Serialize + DeserializeOwned>(
    path: &str,
    value: &Value,
    errs: &mut Vec<Violation>,
) {
    if !value.is_object() {
        errs.push(Violation::new(path, "must be an object"));
        return;
    }
    check_fields::<T>(&format!("{path}."), value, errs);
}

/// Substitutes each user field, one at a time, into the serialized default
/// of `T` and tries to deserialize; a failure is that field's type error.
fn check_fields<T: Default + Serialize + DeserializeOwned>(
    prefix: &str,
    value: &Value,
    errs: &mut Vec<Violation>,
) {
    let defaults = match serde_json::to_value(T::default()) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("config blocks serialize to objects"),
    };
    let user = value.as_object().expect("checked by caller");
    for (key, v) in user {
        let path = format!("{prefix}{key}");
        let Some(default) = defaults.get(key) else {
            errs.push(Violation::new(path, "unknown field"));
            continue;
        };
        if let (Value::Object(d), Value::Object(u)) = (default, v) {
            for k in u.keys().filter(|k| !d.contains_key(*k)) {
                errs.push(Violation::new(format!("{path}.{k}"), "unknown field"));
            }
        }
        let mut probe = defaults.clone();
        probe.insert(key.clone(), v.clone());
        if let Err(e) = serde_json::from_value::<T>(Value::Object(probe)) {
            if !e.to_string().starts_with("unknown field") {
                errs.push(Violation::new(path, strip_position(&e.to_string())));
            }
        }
    }
}

fn strip_position(msg: &str) -> String {
    match msg.find(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paths(e: ConfigError) -> Vec<String> {
        e.violations().iter().map(|v| v.path.clone()).collect()
    }

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = parse_config_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn minimal_config_fills_adam_defaults() {
        let cfg = parse_config_str(r#"{"problem": {"family": "quadratic"}}"#).unwrap();
        assert_eq!(cfg.optimizer.adam.beta1, 0.9);
        assert_eq!(cfg.optimizer.adam.beta2, 0.999);
        assert_eq!(cfg.optimizer.adam.eps, 1e-8);
    }

    #[test]
    fn probs_not_summing_to_one() {
        let e = parse_config_str(
            r#"{"problem": {"family": "quadratic", "n_clusters": 2, "probs": [0.5, 0.6]}}"#,
        )
        .unwrap_err();
        assert_eq!(paths(e), vec!["problem.probs"]);
    }

    #[test]
    fn theorem_mode_alpha_above_p_min() {
        let e = parse_config_str(
            r#"{"theorem_mode": true, "optimizer": {"alpha": 0.5},
                "problem": {"family": "quadratic", "n_clusters": 5}}"#,
        )
        .unwrap_err();
        // alpha_n = alpha / p_n = 2.5 is reported as well.
        let v = e
            .violations()
            .iter()
            .find(|v| v.path == "optimizer.alpha")
            .expect("alpha violation");
        assert!(v.message.contains("(0, p_min)"), "{}", v.message);
    }

    #[test]
    fn all_violations_are_listed() {
        let e = parse_config_str(
            r#"{"bogus": 1,
                "problem": {"family": "quadratic", "dim": "big", "colour": 3},
                "optimizer": {"mu": "fast", "adam": {"beta3": 0.1}},
                "loop": {"batch_size": -1}}"#,
        )
        .unwrap_err();
        let mut p = paths(e);
        p.sort();
        assert_eq!(
            p,
            vec![
                "bogus",
                "loop.batch_size",
                "optimizer.adam.beta3",
                "optimizer.mu",
                "problem.colour",
                "problem.dim"
            ]
        );
    }

    #[test]
    fn constraint_violations_across_blocks() {
        let e = parse_config_str(
            r#"{"seeds": [], "optimizer": {"mu": -1.0},
                "loop": {"batch_size": 10, "n_shards": 3, "eval_every": 0}}"#,
        )
        .unwrap_err();
        let mut p = paths(e);
        p.sort();
        assert_eq!(p, vec!["loop.eval_every", "loop.n_shards", "optimizer.mu", "seeds"]);
    }

    #[test]
    fn missing_family_and_bad_family() {
        let e = parse_config_str(r#"{"problem": {"dim": 3}}"#).unwrap_err();
        assert_eq!(paths(e), vec!["problem.family"]);
        let e = parse_config_str(r#"{"problem": {"family": "cubic"}}"#).unwrap_err();
        assert_eq!(paths(e), vec!["problem.family"]);
    }

    #[test]
    fn logistic_block_parses() {
        let cfg = parse_config_str(
            r#"{"problem": {"family": "logistic", "flip_prob": 0.2, "policy": "transforms"},
                "optimizer": {"variant": "sgd"}}"#,
        )
        .unwrap();
        match cfg.problem {
            ProblemConfig::Logistic(l) => assert_eq!(l.flip_prob, 0.2),
            _ => panic!("wrong family"),
        }
    }

    #[test]
    fn serialized_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seeds = vec![3, 4];
        cfg.optimizer.alpha_n = Some(vec![0.5; 5]);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(parse_config_str(&text).unwrap(), cfg);
    }
}
