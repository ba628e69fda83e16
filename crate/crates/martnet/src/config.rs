//! Plain-text `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Every key has a default
//! taken from the selected profile, unknown keys are rejected, and
//! [`RunConfig::to_text`] writes the fully resolved configuration back in the
//! same syntax so that it parses to an identical value.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use martnet_core::autodiff::Activation;
use martnet_core::martingale::Estimator;
use martnet_core::networks::Architecture;
use martnet_core::problems::{make_problem, Preset, ProblemSpec, StartKind};
use martnet_core::trainer::{delta0, ThetaObjective, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` given twice")]
    Duplicate(String),
    #[error("key `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Single-CPU scale: d=10, M=2·10⁴, N=50, I=2000, r=64.
    Desk,
    /// The published protocol: d=100, M=10⁵, N=100, I=6000, r=600.
    Paper,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub paths: u64,
    pub init: u64,
    pub train: u64,
    pub reference: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub problem: Preset,
    pub d: usize,
    pub horizon: f64,
    /// Preset parameter overrides other than `T`, sorted by key.
    pub overrides: Vec<(String, f64)>,
    pub steps: usize,
    pub paths: usize,
    /// `|D₀|`.
    pub start_points: usize,
    pub width: usize,
    pub depth: usize,
    pub r: usize,
    pub value_activation: Activation,
    pub control_activation: Activation,
    pub train: TrainConfig,
    pub seeds: Seeds,
    pub ref_samples: usize,
    pub eval_points: usize,
    /// Relative errors are logged every `eval_every` iterations (and at the
    /// last one); zero disables them during training.
    pub eval_every: usize,
    pub curve: StartKind,
    pub curve_points: usize,
    pub convergence_steps: Vec<usize>,
    pub rollouts: usize,
    pub x0: Vec<f64>,
    /// Fill `wall_ms` in the metrics stream. Off by default, since timings
    /// would make reruns differ.
    pub wall_time: bool,
}

const KEYS: &[&str] = &[
    "profile",
    "problem",
    "d",
    "T",
    "N",
    "M",
    "start_points",
    "width",
    "depth",
    "r",
    "value_activation",
    "control_activation",
    "iterations",
    "J",
    "K",
    "batch",
    "lr_primal",
    "lr_test",
    "lr_lambda",
    "lr_decay",
    "lambda0",
    "lambda_bar",
    "rms_decay",
    "rms_eps",
    "sequential",
    "theta_objective",
    "estimator",
    "seed_paths",
    "seed_init",
    "seed_train",
    "seed_reference",
    "ref_samples",
    "eval_points",
    "eval_every",
    "curve",
    "curve_points",
    "convergence_n",
    "rollouts",
    "x0",
    "wall_time",
];

/// Preset parameters other than `T`.
const PROBLEM_KEYS: &[&str] = &["b", "eps0", "eps1", "c1", "eps", "cg"];

/// Splits text into an ordered key map, rejecting syntax errors, unknown
/// and repeated keys.
pub fn parse_entries(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        }
        if !KEYS.contains(&k) && !PROBLEM_KEYS.contains(&k) {
            return Err(ConfigError::UnknownKey(k.to_string()));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(ConfigError::Duplicate(k.to_string()));
        }
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| invalid(key, format!("cannot parse `{v}`")))
}

fn positive(key: &str, v: &str) -> Result<usize, ConfigError> {
    let n: usize = num(key, v)?;
    if n == 0 {
        return Err(invalid(key, "must be at least 1"));
    }
    Ok(n)
}

fn finite(key: &str, v: &str) -> Result<f64, ConfigError> {
    let x: f64 = num(key, v)?;
    if !x.is_finite() {
        return Err(invalid(key, "must be finite"));
    }
    Ok(x)
}

fn boolean(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(invalid(key, format!("expected true or false, got `{v}`"))),
    }
}

fn activation(key: &str, v: &str) -> Result<Activation, ConfigError> {
    match Activation::parse(v) {
        Some(a @ (Activation::Relu | Activation::Tanh)) => Ok(a),
        _ => Err(invalid(key, format!("expected relu or tanh, got `{v}`"))),
    }
}

fn curve_kind(key: &str, v: &str) -> Result<StartKind, ConfigError> {
    match v {
        "s1" => Ok(StartKind::S1),
        "s2" => Ok(StartKind::S2),
        "s3" => Ok(StartKind::S3),
        _ => Err(invalid(key, format!("expected s1, s2 or s3, got `{v}`"))),
    }
}

fn curve_name(kind: &StartKind) -> &'static str {
    match kind {
        StartKind::S1 => "s1",
        StartKind::S3 => "s3",
        _ => "s2",
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError> {
    let items: Result<Vec<T>, _> = v.split(',').map(|s| num(key, s.trim())).collect();
    let items = items?;
    if items.is_empty() {
        return Err(invalid(key, "empty list"));
    }
    Ok(items)
}

fn join<T: std::fmt::Debug>(items: &[T]) -> String {
    items.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Defaults of a profile before any key is applied.
    pub fn defaults(profile: Profile) -> Self {
        let (d, steps, paths, iterations, r) = match profile {
            Profile::Desk => (10, 50, 20_000, 2000, 64),
            Profile::Paper => (100, 100, 100_000, 6000, 600),
        };
        let mut train = TrainConfig::for_dimension(d);
        train.iterations = iterations;
        train.seed = 3;
        Self {
            profile,
            problem: Preset::Linear,
            d,
            horizon: 1.0,
            overrides: Vec::new(),
            steps,
            paths,
            start_points: paths,
            width: d + 10,
            depth: 6,
            r,
            value_activation: Activation::Relu,
            control_activation: Activation::Relu,
            train,
            seeds: Seeds { paths: 1, init: 2, train: 3, reference: 4 },
            ref_samples: 100_000,
            eval_points: 40,
            eval_every: 100,
            curve: StartKind::S2,
            curve_points: 41,
            convergence_steps: vec![3, 6, 12, 24],
            rollouts: 256,
            x0: vec![0.0; d],
            wall_time: false,
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::from_entries(parse_entries(text)?)
    }

    pub fn load(path: &Path, sets: &[String]) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading config {}: {e}", path.display()))?;
        Ok(Self::with_sets(&text, sets)?)
    }

    /// Parses `text` and then applies `key=value` overrides on top of it.
    pub fn with_sets(text: &str, sets: &[String]) -> Result<Self, ConfigError> {
        let mut entries = parse_entries(text)?;
        for s in sets {
            let one = parse_entries(s)?;
            if one.is_empty() {
                return Err(ConfigError::Syntax { line: 0, text: s.clone() });
            }
            entries.extend(one);
        }
        Self::from_entries(entries)
    }

    pub fn from_entries(entries: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let get = |k: &str| entries.get(k).map(String::as_str);
        let profile = match get("profile") {
            None | Some("desk") => Profile::Desk,
            Some("paper") => Profile::Paper,
            Some(other) => return Err(invalid("profile", format!("expected desk or paper, got `{other}`"))),
        };
        let mut c = Self::defaults(profile);
        if let Some(v) = get("problem") {
            c.problem = Preset::parse(v).map_err(|_| invalid("problem", format!("unknown preset `{v}`")))?;
        }
        if let Some(v) = get("d") {
            c.d = positive("d", v)?;
        }
        let d = c.d;
        let base = TrainConfig::for_dimension(d);
        c.train.batch_size = base.batch_size;
        c.width = d + 10;
        c.x0 = vec![0.0; d];

        for key in PROBLEM_KEYS {
            if let Some(v) = get(key) {
                if !c.problem.override_keys().contains(key) {
                    return Err(invalid(key, format!("not a parameter of `{}`", c.problem.name())));
                }
                c.overrides.push((key.to_string(), finite(key, v)?));
            }
        }
        if let Some(v) = get("T") {
            c.horizon = finite("T", v)?;
            if !(c.horizon > 0.0) {
                return Err(invalid("T", "must be positive"));
            }
        }
        let spec = c.problem_spec().map_err(|e| invalid("problem", e.to_string()))?;
        if spec.demand().laplacian {
            c.value_activation = Activation::Tanh;
        }

        for (key, v) in &entries {
            let (key, v) = (key.as_str(), v.as_str());
            match key {
                "profile" | "problem" | "d" | "T" => {}
                k if PROBLEM_KEYS.contains(&k) => {}
                "N" => c.steps = positive(key, v)?,
                "M" => {
                    c.paths = positive(key, v)?;
                    if get("start_points").is_none() {
                        c.start_points = c.paths;
                    }
                }
                "start_points" => c.start_points = positive(key, v)?,
                "width" => c.width = positive(key, v)?,
                "depth" => c.depth = num(key, v)?,
                "r" => c.r = positive(key, v)?,
                "value_activation" => c.value_activation = activation(key, v)?,
                "control_activation" => c.control_activation = activation(key, v)?,
                "iterations" => c.train.iterations = positive(key, v)?,
                "J" => c.train.descent_steps = positive(key, v)?,
                "K" => c.train.ascent_steps = num(key, v)?,
                "batch" => c.train.batch_size = positive(key, v)?,
                "lr_primal" => {
                    c.train.lr_primal = if v == "auto" { None } else { Some(finite(key, v)?) };
                }
                "lr_test" => c.train.lr_test = finite(key, v)?,
                "lr_lambda" => c.train.lr_lambda = finite(key, v)?,
                "lr_decay" => c.train.lr_decay = finite(key, v)?,
                "lambda0" => c.train.lambda0 = finite(key, v)?,
                "lambda_bar" => c.train.lambda_bar = finite(key, v)?,
                "rms_decay" => c.train.rms_decay = finite(key, v)?,
                "rms_eps" => c.train.rms_eps = finite(key, v)?,
                "sequential" => c.train.sequential = boolean(key, v)?,
                "theta_objective" => {
                    c.train.theta_objective =
                        ThetaObjective::parse(v).ok_or_else(|| invalid(key, format!("expected full or martingale, got `{v}`")))?;
                }
                "estimator" => {
                    c.train.estimator = Estimator::parse(v).ok_or_else(|| invalid(key, format!("expected plain or split, got `{v}`")))?;
                }
                "seed_paths" => c.seeds.paths = num(key, v)?,
                "seed_init" => c.seeds.init = num(key, v)?,
                "seed_train" => c.seeds.train = num(key, v)?,
                "seed_reference" => c.seeds.reference = num(key, v)?,
                "ref_samples" => c.ref_samples = positive(key, v)?,
                "eval_points" => c.eval_points = positive(key, v)?,
                "eval_every" => c.eval_every = num(key, v)?,
                "curve" => c.curve = curve_kind(key, v)?,
                "curve_points" => {
                    c.curve_points = num(key, v)?;
                    if c.curve_points < 2 {
                        return Err(invalid(key, "need at least 2 points"));
                    }
                }
                "convergence_n" => {
                    c.convergence_steps = list(key, v)?;
                    if c.convergence_steps.contains(&0) {
                        return Err(invalid(key, "time steps must be at least 1"));
                    }
                    let mut distinct = c.convergence_steps.clone();
                    distinct.sort_unstable();
                    distinct.dedup();
                    if distinct.len() < 3 {
                        return Err(invalid(key, "a rate fit needs at least 3 distinct values"));
                    }
                }
                "rollouts" => c.rollouts = positive(key, v)?,
                "x0" => {
                    let xs: Vec<f64> = list(key, v)?;
                    c.x0 = match xs.len() {
                        1 => vec![xs[0]; d],
                        n if n == d => xs,
                        n => return Err(invalid(key, format!("expected 1 or {d} values, got {n}"))),
                    };
                }
                "wall_time" => c.wall_time = boolean(key, v)?,
                other => return Err(ConfigError::UnknownKey(other.to_string())),
            }
        }
        c.train.seed = c.seeds.train;
        c.check(&spec)?;
        Ok(c)
    }

    fn check(&self, spec: &ProblemSpec) -> Result<(), ConfigError> {
        spec.check_value_activation(self.value_activation).map_err(|e| invalid("value_activation", e.to_string()))?;
        if self.train.batch_size > self.paths {
            return Err(invalid("batch", format!("{} exceeds M = {}", self.train.batch_size, self.paths)));
        }
        if !(self.train.lambda0 >= 0.0 && self.train.lambda_bar >= self.train.lambda0) {
            return Err(invalid("lambda_bar", "need 0 <= lambda0 <= lambda_bar"));
        }
        if !(0.0..=1.0).contains(&self.train.rms_decay) {
            return Err(invalid("rms_decay", "must lie in [0, 1]"));
        }
        if !(self.train.rms_eps > 0.0) {
            return Err(invalid("rms_eps", "must be positive"));
        }
        if matches!(spec.start, StartKind::S1 | StartKind::S2 | StartKind::S3 | StartKind::Union(_)) && self.start_points < 2 {
            return Err(invalid("start_points", "grid start sets need at least 2 points"));
        }
        Ok(())
    }

    /// The parameter overrides handed to the problem constructor.
    pub fn problem_overrides(&self) -> Vec<(String, f64)> {
        let mut o = self.overrides.clone();
        o.push(("T".to_string(), self.horizon));
        o
    }

    pub fn problem_spec(&self) -> martnet_core::Result<ProblemSpec> {
        make_problem(self.problem, self.d, &self.problem_overrides())
    }

    pub fn architecture(&self, spec: &ProblemSpec) -> Architecture {
        Architecture {
            d: self.d,
            m: spec.control_dim(),
            width: self.width,
            depth: self.depth,
            r: self.r,
            value_activation: self.value_activation,
            control_activation: self.control_activation,
        }
    }

    /// Settings the published protocol uses only on large machines.
    pub fn beyond_desk_scale(&self) -> bool {
        self.d >= 1000 || self.paths > 100_000
    }

    /// The resolved configuration in the input syntax, one key per line.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("profile", self.profile.name().into());
        put("problem", self.problem.name().into());
        put("d", self.d.to_string());
        put("T", format!("{:?}", self.horizon));
        for (k, v) in &self.overrides {
            put(k, format!("{v:?}"));
        }
        put("N", self.steps.to_string());
        put("M", self.paths.to_string());
        put("start_points", self.start_points.to_string());
        put("width", self.width.to_string());
        put("depth", self.depth.to_string());
        put("r", self.r.to_string());
        put("value_activation", self.value_activation.name().into());
        put("control_activation", self.control_activation.name().into());
        put("iterations", t.iterations.to_string());
        put("J", t.descent_steps.to_string());
        put("K", t.ascent_steps.to_string());
        put("batch", t.batch_size.to_string());
        put("lr_primal", t.lr_primal.map_or("auto".into(), |v| format!("{v:?}")));
        put("lr_test", format!("{:?}", t.lr_test));
        put("lr_lambda", format!("{:?}", t.lr_lambda));
        put("lr_decay", format!("{:?}", t.lr_decay));
        put("lambda0", format!("{:?}", t.lambda0));
        put("lambda_bar", format!("{:?}", t.lambda_bar));
        put("rms_decay", format!("{:?}", t.rms_decay));
        put("rms_eps", format!("{:?}", t.rms_eps));
        put("sequential", t.sequential.to_string());
        put("theta_objective", t.theta_objective.name().into());
        put("estimator", t.estimator.name().into());
        put("seed_paths", self.seeds.paths.to_string());
        put("seed_init", self.seeds.init.to_string());
        put("seed_train", self.seeds.train.to_string());
        put("seed_reference", self.seeds.reference.to_string());
        put("ref_samples", self.ref_samples.to_string());
        put("eval_points", self.eval_points.to_string());
        put("eval_every", self.eval_every.to_string());
        put("curve", curve_name(&self.curve).into());
        put("curve_points", self.curve_points.to_string());
        put("convergence_n", join(&self.convergence_steps));
        put("rollouts", self.rollouts.to_string());
        put("x0", join(&self.x0));
        put("wall_time", self.wall_time.to_string());
        s
    }

    /// Initial primal step size after resolving `auto`.
    pub fn primal_rate(&self) -> f64 {
        self.train.lr_primal.unwrap_or(delta0(self.d) * 1e-3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_desk_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.profile, Profile::Desk);
        assert_eq!((c.d, c.steps, c.paths, c.train.iterations, c.r, c.width), (10, 50, 20_000, 2000, 64, 20));
        assert_eq!(c.horizon, 1.0);
        assert_eq!(c.start_points, c.paths);
        assert_eq!(c.train.batch_size, 256);
        let p = RunConfig::parse("profile = paper").unwrap();
        assert_eq!((p.d, p.steps, p.paths, p.r), (100, 100, 100_000, 600));
    }

    #[test]
    fn overrides_are_honored() {
        let c = RunConfig::parse("N = 50\nd = 3 # small\n\nwidth = 7").unwrap();
        assert_eq!((c.steps, c.d, c.width, c.x0.len()), (50, 3, 7, 3));
        let c = RunConfig::parse("d = 2000").unwrap();
        assert_eq!((c.train.batch_size, c.width), (128, 2010));
        assert!(c.beyond_desk_scale());
        let c = RunConfig::parse("problem = hjb-1\neps1 = 0.5\nT = 0.5").unwrap();
        assert_eq!(c.problem_spec().unwrap().horizon, 0.5);
        assert_eq!(c.overrides, vec![("eps1".to_string(), 0.5)]);
    }

    #[test]
    fn rejects_bad_input_by_key() {
        assert_eq!(RunConfig::parse("foo = 1"), Err(ConfigError::UnknownKey("foo".into())));
        assert_eq!(RunConfig::parse("N = 1\nN = 2"), Err(ConfigError::Duplicate("N".into())));
        assert!(matches!(RunConfig::parse("N = x"), Err(ConfigError::Invalid { key, .. }) if key == "N"));
        assert!(matches!(RunConfig::parse("N = 0"), Err(ConfigError::Invalid { key, .. }) if key == "N"));
        assert!(matches!(RunConfig::parse("cg = 2"), Err(ConfigError::Invalid { key, .. }) if key == "cg"));
        assert!(matches!(RunConfig::parse("batch = 500\nM = 100"), Err(ConfigError::Invalid { key, .. }) if key == "batch"));
        assert!(matches!(RunConfig::parse("just words"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::parse("convergence_n = 3,6,6"), Err(ConfigError::Invalid { key, .. }) if key == "convergence_n"));
        assert!(matches!(RunConfig::parse("x0 = 1,2"), Err(ConfigError::Invalid { key, .. }) if key == "x0"));
        assert!(matches!(
            RunConfig::parse("value_activation = sine"),
            Err(ConfigError::Invalid { key, .. }) if key == "value_activation"
        ));
    }

    #[test]
    fn sets_apply_after_the_file() {
        let c = RunConfig::with_sets("N = 10", &["N=20".into(), "x0 = 0.5".into()]).unwrap();
        assert_eq!(c.steps, 20);
        assert_eq!(c.x0, vec![0.5; 10]);
        assert!(RunConfig::with_sets("", &["bogus=1".into()]).is_err());
    }

    #[test]
    fn resolved_text_round_trips() {
        let c = RunConfig::parse("problem = shifted-target\ncg = 10\nlr_primal = 0.001\nconvergence_n = 3,4,5").unwrap();
        let text = c.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert_eq!(RunConfig::parse(&text).unwrap().to_text(), text);
    }
}
