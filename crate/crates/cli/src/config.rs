//! JSON run configuration.
//!
//! A config file is parsed into [`ConfigFile`] (every key optional except
//! `problem`), command-line overrides are applied, and [`resolve`] fills
//! defaults, builds the problem instance and checks the stepsize caps.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fbo_core::hypergrad::check_lambda_cap;
use fbo_core::synthetic::{
    make_hyperrep, make_quadratic, HyperRepProblem, HyperRepSpec, NoiseSpec, PartitionMode, QuadraticInstance,
    QuadraticSpec,
};
use fbo_core::verify::{measure_constants, TestRegion};
use fbo_core::{
    default_stepsizes, BilevelProblem, EstimatorKind, LowerStepConfig, LowerVariant, Participation, ProblemConstants,
    Reference, RunConfig, Vector,
};
use serde::de::value::MapAccessDeserializer;
use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

/// Either a bare name (`"quadratic"`) or a full object.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum NameOr<T> {
    Name(String),
    Spec(T),
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for NameOr<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V<T>(std::marker::PhantomData<T>);
        impl<'de, T: Deserialize<'de>> Visitor<'de> for V<T> {
            type Value = NameOr<T>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a name or an object")
            }
            fn visit_str<E: de::Error>(self, s: &str) -> Result<Self::Value, E> {
                Ok(NameOr::Name(s.to_string()))
            }
            fn visit_map<A: MapAccess<'de>>(self, map: A) -> Result<Self::Value, A::Error> {
                T::deserialize(MapAccessDeserializer::new(map)).map(NameOr::Spec)
            }
        }
        d.deserialize_any(V(std::marker::PhantomData))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TauField {
    All(usize),
    PerClient(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticOptions {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d1: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d2: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_per_client: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_g: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_x: Option<f64>,
    /// Instance seed, independent of the run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperRepOptions {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clients: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_points: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProblemOptions {
    Quadratic(QuadraticOptions),
    Hyperrep(HyperRepOptions),
}

/// The config document as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub problem: NameOr<ProblemOptions>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimator: Option<EstimatorKind>,
    #[serde(rename = "K", skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(rename = "N", skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Scale of the default `alpha = alpha_scale / sqrt(K)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<TauField>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<LowerVariant>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub participation: Option<f64>,
    /// Fresh client subset for every HessIV round of the AID baseline.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hessiv_participation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hetero: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<NameOr<NoiseSpec>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

/// `key=value` from the command line; dotted keys reach into objects and the
/// value is JSON when it parses as JSON, a string otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

impl Override {
    pub fn new(key: &str, value: Value) -> CliResult<Self> {
        let path: Vec<String> = key.split('.').map(str::to_string).collect();
        if path.iter().any(String::is_empty) {
            return Err(CliError::Config(format!("malformed override key `{key}`")));
        }
        Ok(Self { path, value })
    }

    pub fn key(&self) -> String {
        self.path.join(".")
    }
}

impl FromStr for Override {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{s}` is not of the form key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        Override::new(key.trim(), value)
    }
}

/// Tag key used when a bare name must be expanded into an object.
fn tag_key(field: &str) -> &'static str {
    if field == "noise" {
        "mode"
    } else {
        "kind"
    }
}

pub fn apply_override(doc: &mut Value, ov: &Override) -> CliResult<()> {
    let mut node = doc;
    for (depth, seg) in ov.path.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            _ => {
                return Err(CliError::Config(format!(
                    "override `{}`: `{}` is not an object",
                    ov.key(),
                    ov.path[..depth].join(".")
                )))
            }
        };
        if depth + 1 == ov.path.len() {
            obj.insert(seg.clone(), ov.value.clone());
            return Ok(());
        }
        let child = obj.entry(seg.clone()).or_insert_with(|| Value::Object(Map::new()));
        if let Value::String(name) = child {
            let mut expanded = Map::new();
            expanded.insert(tag_key(seg).to_string(), Value::String(name.clone()));
            *child = Value::Object(expanded);
        }
        node = child;
    }
    Ok(())
}

/// Resolved problem description.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProblemChoice {
    Quadratic { spec: QuadraticSpec },
    Hyperrep { spec: HyperRepSpec, seed: u64 },
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub problem: ProblemChoice,
    pub run: RunConfig,
    pub out_dir: PathBuf,
}

impl Config {
    /// An explicit document that resolves back to `self`.
    pub fn to_file(&self) -> ConfigFile {
        let run = &self.run;
        let (problem, hetero, noise) = match &self.problem {
            ProblemChoice::Quadratic { spec } => (
                ProblemOptions::Quadratic(QuadraticOptions {
                    d1: Some(spec.d1),
                    d2: Some(spec.d2),
                    m: Some(spec.m),
                    n_per_client: Some(spec.n_per_client),
                    mu: Some(spec.mu),
                    l_g: Some(spec.l_g),
                    rho_x: Some(spec.rho_x),
                    seed: Some(spec.seed),
                }),
                Some(spec.hetero),
                Some(NameOr::Spec(spec.noise)),
            ),
            ProblemChoice::Hyperrep { spec, seed } => (
                ProblemOptions::Hyperrep(HyperRepOptions {
                    embed_dim: Some(spec.embed_dim),
                    feature_dim: Some(spec.feature_dim),
                    classes: Some(spec.classes),
                    ridge: Some(spec.ridge),
                    partition: Some(spec.partition),
                    clients: Some(spec.clients),
                    points: Some(spec.points),
                    test_points: Some(spec.test_points),
                    separation: Some(spec.separation),
                    batch: Some(spec.batch),
                    seed: Some(*seed),
                }),
                None,
                None,
            ),
        };
        ConfigFile {
            problem: NameOr::Spec(problem),
            estimator: Some(run.estimator),
            k: Some(run.k),
            n: Some(run.n),
            t: Some(run.t),
            lambda: Some(run.lambda),
            alpha: Some(run.alpha),
            alpha_scale: None,
            beta: Some(run.lower.beta),
            tau: Some(TauField::PerClient(run.lower.tau.clone())),
            variant: Some(run.lower.variant),
            participation: Some(run.participation.ratio),
            hessiv_participation: run.hessiv_participation.map(|p| p.ratio),
            hetero,
            noise,
            seed: Some(run.seed),
            eval_every: Some(run.eval_every),
            out_dir: Some(self.out_dir.to_string_lossy().into_owned()),
        }
    }
}

/// Problem oracles plus reference solutions, as one object-safe trait.
pub trait FederatedProblem: BilevelProblem + Reference {}
impl<P: BilevelProblem + Reference> FederatedProblem for P {}

#[derive(Debug, Clone)]
pub enum ProblemInstance {
    Quadratic(QuadraticInstance),
    Hyperrep(HyperRepProblem),
}

impl ProblemInstance {
    pub fn as_dyn(&self) -> &dyn FederatedProblem {
        match self {
            ProblemInstance::Quadratic(q) => q,
            ProblemInstance::Hyperrep(h) => h,
        }
    }
}

/// A resolved config with its instantiated problem and starting point.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: Config,
    pub problem: ProblemInstance,
    /// Constants used for the defaults and caps.
    pub constants: ProblemConstants,
    pub x0: Vector,
    pub y0: Vector,
}

fn resolve_noise(noise: NameOr<NoiseSpec>) -> CliResult<NoiseSpec> {
    match noise {
        NameOr::Spec(n) => Ok(n),
        NameOr::Name(name) => match name.as_str() {
            "exact" => Ok(NoiseSpec::Exact),
            "finite-sum" => Ok(NoiseSpec::default()),
            "gaussian" => Ok(NoiseSpec::Gaussian {
                sigma_f: 0.1,
                sigma_g: 0.1,
            }),
            other => Err(CliError::Config(format!(
                "unknown noise mode `{other}` (expected exact, finite-sum or gaussian)"
            ))),
        },
    }
}

fn resolve_problem(file: &ConfigFile) -> CliResult<ProblemChoice> {
    let options = match &file.problem {
        NameOr::Spec(o) => o.clone(),
        NameOr::Name(name) => match name.as_str() {
            "quadratic" => ProblemOptions::Quadratic(QuadraticOptions::default()),
            "hyperrep" => ProblemOptions::Hyperrep(HyperRepOptions::default()),
            other => {
                return Err(CliError::Config(format!(
                    "unknown problem `{other}` (expected quadratic or hyperrep)"
                )))
            }
        },
    };
    match options {
        ProblemOptions::Quadratic(o) => {
            let d = QuadraticSpec::default();
            Ok(ProblemChoice::Quadratic {
                spec: QuadraticSpec {
                    d1: o.d1.unwrap_or(d.d1),
                    d2: o.d2.unwrap_or(d.d2),
                    m: o.m.unwrap_or(d.m),
                    n_per_client: o.n_per_client.unwrap_or(d.n_per_client),
                    mu: o.mu.unwrap_or(d.mu),
                    l_g: o.l_g.unwrap_or(d.l_g),
                    hetero: file.hetero.unwrap_or(d.hetero),
                    noise: file.noise.clone().map(resolve_noise).transpose()?.unwrap_or(d.noise),
                    rho_x: o.rho_x.unwrap_or(d.rho_x),
                    seed: o.seed.unwrap_or(d.seed),
                },
            })
        }
        ProblemOptions::Hyperrep(o) => {
            if file.hetero.is_some() || file.noise.is_some() {
                return Err(CliError::Config(
                    "`hetero` and `noise` apply to the quadratic problem; use problem.partition and problem.batch".into(),
                ));
            }
            let d = HyperRepSpec::default();
            Ok(ProblemChoice::Hyperrep {
                spec: HyperRepSpec {
                    embed_dim: o.embed_dim.unwrap_or(d.embed_dim),
                    feature_dim: o.feature_dim.unwrap_or(d.feature_dim),
                    classes: o.classes.unwrap_or(d.classes),
                    ridge: o.ridge.unwrap_or(d.ridge),
                    partition: o.partition.unwrap_or(d.partition),
                    clients: o.clients.unwrap_or(d.clients),
                    points: o.points.unwrap_or(d.points),
                    test_points: o.test_points.unwrap_or(d.test_points),
                    separation: o.separation.unwrap_or(d.separation),
                    batch: o.batch.unwrap_or(d.batch),
                },
                seed: o.seed.unwrap_or(0),
            })
        }
    }
}

/// Fill defaults, instantiate the problem and check the stepsize caps.
pub fn resolve(file: ConfigFile) -> CliResult<Experiment> {
    let choice = resolve_problem(&file)?;
    let (problem, x0, constants) = match &choice {
        ProblemChoice::Quadratic { spec } => {
            let inst = make_quadratic(spec)?;
            let x0 = Vector::zeros(spec.d1);
            let region = TestRegion::around_optimum(&inst, &x0, 1.0)?;
            let constants = measure_constants(&inst, &region, 100, 0)?.constants;
            (ProblemInstance::Quadratic(inst), x0, constants)
        }
        ProblemChoice::Hyperrep { spec, seed } => {
            let p = make_hyperrep(spec, *seed)?;
            let x0 = p.initial_embedding(*seed);
            let constants = p.constants_at(&x0)?;
            (ProblemInstance::Hyperrep(p), x0, constants)
        }
    };
    let dims = problem.as_dyn().dims();
    let m = problem.as_dyn().num_clients();

    if file.alpha.is_some() && file.alpha_scale.is_some() {
        return Err(CliError::Config("set either `alpha` or `alpha_scale`, not both".into()));
    }
    let k = file.k.unwrap_or(100);
    let defaults = default_stepsizes(&constants, k, file.n, file.alpha_scale);
    let lambda = file.lambda.unwrap_or(defaults.lambda);
    check_lambda_cap(lambda, &constants)?;

    let caps = [
        ("1", 1.0),
        ("lambda", lambda),
        ("1/(6 L_g)", 1.0 / (6.0 * constants.l_g)),
    ];
    let beta_cap = caps.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let beta = file.beta.unwrap_or(beta_cap);
    let violated: Vec<String> = caps
        .iter()
        .filter(|(_, cap)| beta > cap * (1.0 + 1e-12))
        .map(|(name, cap)| format!("beta <= {name} = {cap}"))
        .collect();
    if !violated.is_empty() {
        return Err(CliError::Core(fbo_core::Error::Parameter {
            name: "beta",
            reason: format!("{beta} violates the cap {}", violated.join(" and ")),
        }));
    }

    let tau = match file.tau.clone() {
        None => vec![1],
        Some(TauField::All(t)) => vec![t],
        Some(TauField::PerClient(ts)) => ts,
    };
    let run = RunConfig {
        estimator: file.estimator.unwrap_or_default(),
        k,
        n: defaults.n,
        t: file.t.unwrap_or(defaults.n.max(1)),
        lambda,
        alpha: file.alpha.unwrap_or(defaults.alpha),
        lower: LowerStepConfig {
            beta,
            tau,
            variant: file.variant.unwrap_or_default(),
        },
        participation: Participation::new(file.participation.unwrap_or(1.0))?,
        hessiv_participation: file.hessiv_participation.map(Participation::new).transpose()?,
        seed: file.seed.unwrap_or(0),
        eval_every: file.eval_every.unwrap_or(1),
    };
    run.validate(m)?;
    Ok(Experiment {
        config: Config {
            problem: choice,
            run,
            out_dir: PathBuf::from(file.out_dir.unwrap_or_else(|| "out".into())),
        },
        problem,
        constants,
        x0,
        y0: Vector::zeros(dims.d2),
    })
}

/// Parse config text (`origin` names it in error messages) and apply overrides.
pub fn parse_config_str(text: &str, origin: &str, overrides: &[Override]) -> CliResult<Experiment> {
    let file: ConfigFile = serde_json::from_str(text).map_err(|e| CliError::parse(origin, &e))?;
    if overrides.is_empty() {
        return resolve(file);
    }
    let mut doc: Value = serde_json::to_value(&file).expect("config serializes");
    for ov in overrides {
        apply_override(&mut doc, ov)?;
    }
    let file = ConfigFile::deserialize(doc).map_err(|e| CliError::Config(format!("after overrides: {e}")))?;
    resolve(file)
}

pub fn parse_config(path: &Path, overrides: &[Override]) -> CliResult<Experiment> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config_str(&text, &path.display().to_string(), overrides)
}
