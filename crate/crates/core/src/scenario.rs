//! Config-driven experiment runner. A scenario builds its inputs from the
//! seed, runs the library routes, compares them against independently
//! computed targets and returns a [`RunReport`] plus CSV artifacts.
//!
//! Configs are TOML (or JSON) files; command-line flags override file keys,
//! which override the per-scenario defaults.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::integral::{
    doob_check, fubini_check, integrate_grid, isometry_check, localization_consistency,
    pathwise_cost, pushforward_commute, stopped_integral, zero_mean_check, AdaptedIntegrand,
    ConstantIntegrand, DeterministicIntegrand, GridIntegrand, History, IDENTITY_TOL,
};
use crate::linalg::{coverage_radius, sphere_sequence, PsdOperator};
use crate::measure::{
    brute_force_sup, sup_measures, AtomSet, DiscreteMeasure, GridSpec, BRUTE_FORCE_LIMIT,
};
use crate::noise::{
    simulate, ClosedFormIntensity, HaarSystem, JumpSpec, LevyAtom, NoiseSpec, HAAR_MAX_LEVEL,
};
use crate::quadvar::{
    haar_partition_report, qm_density, qv_refine, qv_supremum, sampling_modulus,
    BilinearMeasureField, QmField, QvEstimate,
};
use crate::spde::{
    convolution_second_moment, heat_example_setup, picard_solve, stochastic_convolution,
    time_integrated_second_moment, v_beta_distance, weak_residual, CoefficientSpec, DiffusionSpec,
    DriftSpec, HeatSetup, InitialGuess, InitialValue, PicardConfig,
};

/// The runnable scenarios.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    SupMeasuresOracle,
    WhiteNoiseQv,
    DiscreteLevyQv,
    HvaluedLevyQm,
    HaarCounterexample,
    ItoIsometry,
    Fubini,
    StoppedIntegral,
    HeatSpde,
    PicardContraction,
}

/// Grid and path-count defaults of a scenario.
#[derive(Clone, Copy, Debug)]
struct Defaults {
    horizon: f64,
    steps: usize,
    atoms: usize,
    paths: usize,
}

impl Scenario {
    pub const ALL: [Scenario; 10] = [
        Scenario::SupMeasuresOracle,
        Scenario::WhiteNoiseQv,
        Scenario::DiscreteLevyQv,
        Scenario::HvaluedLevyQm,
        Scenario::HaarCounterexample,
        Scenario::ItoIsometry,
        Scenario::Fubini,
        Scenario::StoppedIntegral,
        Scenario::HeatSpde,
        Scenario::PicardContraction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::SupMeasuresOracle => "sup_measures_oracle",
            Scenario::WhiteNoiseQv => "white_noise_qv",
            Scenario::DiscreteLevyQv => "discrete_levy_qv",
            Scenario::HvaluedLevyQm => "hvalued_levy_qm",
            Scenario::HaarCounterexample => "haar_counterexample",
            Scenario::ItoIsometry => "ito_isometry",
            Scenario::Fubini => "fubini",
            Scenario::StoppedIntegral => "stopped_integral",
            Scenario::HeatSpde => "heat_spde",
            Scenario::PicardContraction => "picard_contraction",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::UnknownScenario(name.to_string()))
    }

    /// The statement the scenario exercises.
    pub fn description(self) -> &'static str {
        match self {
            Scenario::SupMeasuresOracle => {
                "supremum of a finite family of measures: cellwise maximum against the partition supremum over every cell subset"
            }
            Scenario::WhiteNoiseQv => {
                "white noise: nu_t(A) = t lambda(A), quadratic variation equals dt lambda per cell"
            }
            Scenario::DiscreteLevyQv => {
                "independent Levy atoms: QV cell mass dt lambda_max(Q^k), Q_M = Q^k / ||Q^k|| on atom k"
            }
            Scenario::HvaluedLevyQm => {
                "H-valued Levy process: Q_M = Q / ||Q|| on the Wiener atom and the projection onto u on jump atom u"
            }
            Scenario::HaarCounterexample => {
                "Haar system on L^2[0,1]: dyadic partition sums of the supremum grow like 2^k, so the supremum is not finite"
            }
            Scenario::ItoIsometry => {
                "E ||I_t(Phi)||^2 = ||Phi 1_[0,t]||^2 in Lambda^2, zero mean and the Doob maximal bound"
            }
            Scenario::Fubini => "integral of a weighted family of integrands equals the weighted sum of their integrals; R I(Phi) = I(R Phi)",
            Scenario::StoppedIntegral => {
                "stopped integrands integrate to the frozen integral; localization is consistent and bounded"
            }
            Scenario::HeatSpde => {
                "stochastic heat equation with Levy noise: deterministic semigroup, convolution second moment, second-moment bound"
            }
            Scenario::PicardContraction => {
                "mild solution by Picard iteration: contraction in V_beta, convergence and uniqueness from two starting processes"
            }
        }
    }

    fn defaults(self) -> Defaults {
        let d = |horizon, steps, atoms, paths| Defaults {
            horizon,
            steps,
            atoms,
            paths,
        };
        match self {
            Scenario::SupMeasuresOracle => d(1.0, 2, 3, 1),
            Scenario::WhiteNoiseQv => d(1.0, 20, 1, 10_000),
            Scenario::DiscreteLevyQv => d(1.0, 4, 3, 1),
            Scenario::HvaluedLevyQm => d(1.0, 4, 3, 10_000),
            Scenario::HaarCounterexample => d(1.0, 1, 1, 1),
            Scenario::ItoIsometry => d(1.0, 8, 3, 20_000),
            Scenario::Fubini => d(1.0, 16, 2, 500),
            Scenario::StoppedIntegral => d(1.0, 16, 2, 2_000),
            Scenario::HeatSpde => d(1.0, 64, 1, 10_000),
            Scenario::PicardContraction => d(1.0, 64, 1, 2_000),
        }
    }

    /// Scenario parameters with every default filled in.
    pub fn default_params(self) -> Value {
        Params::parse(self, &Map::new())
            .and_then(|p| p.to_value())
            .expect("defaults always validate")
    }

    /// JSON schema of the scenario's `params` table.
    pub fn params_schema(self) -> Value {
        let schema = match self {
            Scenario::SupMeasuresOracle => schemars::schema_for!(SupOracleParams),
            Scenario::WhiteNoiseQv => schemars::schema_for!(WhiteNoiseParams),
            Scenario::DiscreteLevyQv => schemars::schema_for!(DiscreteLevyParams),
            Scenario::HvaluedLevyQm => schemars::schema_for!(HvaluedLevyParams),
            Scenario::HaarCounterexample => schemars::schema_for!(HaarParams),
            Scenario::ItoIsometry => schemars::schema_for!(IsometryParams),
            Scenario::Fubini => schemars::schema_for!(FubiniParams),
            Scenario::StoppedIntegral => schemars::schema_for!(StoppedParams),
            Scenario::HeatSpde => schemars::schema_for!(HeatParams),
            Scenario::PicardContraction => schemars::schema_for!(PicardParams),
        };
        serde_json::to_value(schema).expect("schemas serialize")
    }
}

/// Grid keys of a config file; missing keys take the scenario defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<usize>,
}

/// A config file as written by the user.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default)]
    pub grid: GridConfig,
    /// Scenario-specific parameters; see `cmvm list` for each schema.
    #[serde(default)]
    pub params: Map<String, Value>,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

fn config_err(key: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        msg: msg.into(),
    }
}

fn deserialize_at<T: DeserializeOwned>(prefix: &str, value: Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let key = match (prefix.is_empty(), path.as_str()) {
            (true, p) => p.to_string(),
            (false, ".") => prefix.to_string(),
            (false, p) => format!("{prefix}.{p}"),
        };
        config_err(key, e.into_inner().to_string())
    })
}

impl ScenarioConfig {
    /// Parses TOML, or JSON when the text starts with `{`. A JSON run report
    /// is accepted too: its embedded `config` is used.
    pub fn parse(text: &str) -> Result<Self> {
        let value: Value = if text.trim_start().starts_with('{') {
            let v: Value =
                serde_json::from_str(text).map_err(|e| config_err(".", e.to_string()))?;
            match v {
                Value::Object(mut m) if m.contains_key("checks") && m.contains_key("config") => {
                    m.remove("config").unwrap()
                }
                v => v,
            }
        } else {
            let table: toml::Table =
                toml::from_str(text).map_err(|e| config_err(".", e.to_string()))?;
            serde_json::to_value(table)?
        };
        deserialize_at("", value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Self::parse(&text)
    }

    /// Applies `flags` over the file over the defaults and validates the result.
    pub fn resolve(&self, flags: &Overrides) -> Result<ResolvedConfig> {
        let scenario = Scenario::from_name(&self.scenario)?;
        let params = Params::parse(scenario, &self.params)?;
        let d = scenario.defaults();
        let seed = flags.seed.or(self.seed).ok_or_else(|| {
            config_err(
                "seed",
                "a seed is required (config key `seed` or flag --seed)",
            )
        })?;
        let paths = flags.paths.or(self.paths).unwrap_or(d.paths);
        let threads = flags.threads.or(self.threads);
        let out = flags
            .out
            .clone()
            .or_else(|| self.out.clone())
            .unwrap_or_else(|| PathBuf::from("cmvm-out").join(scenario.name()));
        let horizon = self.grid.horizon.unwrap_or(d.horizon);
        let steps = self.grid.steps.unwrap_or(d.steps);
        let atoms = match (params.fixed_atoms(), self.grid.atoms) {
            (Some(n), Some(a)) if a != n => {
                return Err(config_err(
                    "grid.atoms",
                    format!("{} needs exactly {n} atoms, got {a}", scenario.name()),
                ))
            }
            (Some(n), _) => n,
            (None, a) => a.unwrap_or(d.atoms),
        };
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(config_err("grid.horizon", "must be positive"));
        }
        for (key, v) in [
            ("grid.steps", steps),
            ("grid.atoms", atoms),
            ("paths", paths),
        ] {
            if v == 0 {
                return Err(config_err(key, "must be positive"));
            }
        }
        if threads == Some(0) {
            return Err(config_err("threads", "must be positive"));
        }
        let resolved = ResolvedConfig {
            scenario,
            seed,
            paths,
            threads,
            out,
            horizon,
            steps,
            atoms,
            params,
        };
        resolved.params.validate(&resolved)?;
        Ok(resolved)
    }
}

/// A validated config with every value filled in.
#[derive(Clone, Debug)]
pub struct ResolvedConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub paths: usize,
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub horizon: f64,
    pub steps: usize,
    pub atoms: usize,
    params: Params,
}

impl ResolvedConfig {
    /// The config file that reproduces this run.
    pub fn to_config(&self) -> ScenarioConfig {
        let params = match self.params.to_value() {
            Ok(Value::Object(m)) => m,
            _ => Map::new(),
        };
        ScenarioConfig {
            scenario: self.scenario.name().to_string(),
            seed: Some(self.seed),
            paths: Some(self.paths),
            out: Some(self.out.clone()),
            threads: self.threads,
            grid: GridConfig {
                horizon: Some(self.horizon),
                steps: Some(self.steps),
                atoms: Some(self.atoms),
            },
            params,
        }
    }

    fn grid(&self) -> Result<Arc<GridSpec>> {
        Ok(Arc::new(GridSpec::uniform(
            self.horizon,
            self.steps,
            self.atoms,
        )?))
    }

    /// Generator for scenario inputs (random operators, families); the noise
    /// itself is driven by per-path streams derived from the same seed.
    fn input_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(0x5ce7_a210);
        rng
    }
}

// ---------------------------------------------------------------------------
// parameters

/// Noise family used by scenarios that accept several.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    WhiteNoise,
    DiscreteLevy,
    HvaluedLevy,
}

/// Integrand family for the isometry scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum IntegrandKind {
    /// One random operator for every cell.
    Constant,
    /// A random operator per cell, independent of the path.
    Deterministic,
    /// A random operator scaled by `cos` of the running noise value.
    Adapted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct SupOracleParams {
    /// Number of random families.
    pub families: usize,
    /// Measures per family.
    pub family_size: usize,
    /// Cell masses are integers in `0..=max_mass` divided by 8.
    pub max_mass: u32,
}

impl Default for SupOracleParams {
    fn default() -> Self {
        Self {
            families: 50,
            family_size: 4,
            max_mass: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct WhiteNoiseParams {
    /// Intensity per unit time of each atom; fixes the atom count.
    pub lambda: Vec<f64>,
}

impl Default for WhiteNoiseParams {
    fn default() -> Self {
        Self { lambda: vec![1.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct DiscreteLevyParams {
    pub h_dim: usize,
    pub sphere_count: usize,
    /// Power-iteration directions added per cell on top of the sphere sample.
    pub refine_steps: usize,
}

impl Default for DiscreteLevyParams {
    fn default() -> Self {
        Self {
            h_dim: 4,
            sphere_count: 512,
            refine_steps: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct HvaluedLevyParams {
    pub h_dim: usize,
    /// Number of jump atoms; the grid has one more atom for the Wiener part.
    pub jumps: usize,
    pub sphere_count: usize,
    pub refine_steps: usize,
}

impl Default for HvaluedLevyParams {
    fn default() -> Self {
        Self {
            h_dim: 4,
            jumps: 2,
            sphere_count: 512,
            refine_steps: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct HaarParams {
    /// Finest dyadic level; the Haar system has `2^(k+1)` functions.
    pub k: u32,
}

impl Default for HaarParams {
    fn default() -> Self {
        Self { k: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct IsometryParams {
    pub noise: NoiseKind,
    pub integrand: IntegrandKind,
    pub h_dim: usize,
    pub g_dim: usize,
    pub sphere_count: usize,
}

impl Default for IsometryParams {
    fn default() -> Self {
        Self {
            noise: NoiseKind::DiscreteLevy,
            integrand: IntegrandKind::Deterministic,
            h_dim: 3,
            g_dim: 2,
            sphere_count: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct FubiniParams {
    /// Number of integrands in the weighted family.
    pub family_size: usize,
    pub h_dim: usize,
    pub g_dim: usize,
    /// Rows of the random operator pushed through the integral.
    pub pushforward_rows: usize,
}

impl Default for FubiniParams {
    fn default() -> Self {
        Self {
            family_size: 5,
            h_dim: 3,
            g_dim: 2,
            pushforward_rows: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct StoppedParams {
    pub h_dim: usize,
    /// Paths stop once `|M_t(x)|` reaches this level.
    pub exit_level: f64,
    /// Localization levels `n` of `tau_n`.
    pub thresholds: Vec<f64>,
    pub sphere_count: usize,
}

impl Default for StoppedParams {
    fn default() -> Self {
        Self {
            h_dim: 3,
            exit_level: 1.0,
            thresholds: vec![1.0, 2.0, 4.0, 8.0],
            sphere_count: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct HeatParams {
    /// Sine modes kept in the Galerkin truncation.
    pub modes: usize,
    pub sphere_count: usize,
}

impl Default for HeatParams {
    fn default() -> Self {
        Self {
            modes: 16,
            sphere_count: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct PicardParams {
    pub modes: usize,
    /// Drift `B(g) = drift_c g`.
    pub drift_c: f64,
    /// Diffusion `diag(1 + c clamp(g, -clip, clip)) F`.
    pub diffusion_c: f64,
    pub clip: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Weight of the `V_beta` norm; the default weight when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub sphere_count: usize,
}

impl Default for PicardParams {
    fn default() -> Self {
        Self {
            modes: 16,
            drift_c: 1.0,
            diffusion_c: 0.5,
            clip: 1.0,
            tol: 1e-6,
            max_iter: 50,
            beta: None,
            sphere_count: 256,
        }
    }
}

#[derive(Clone, Debug)]
enum Params {
    SupOracle(SupOracleParams),
    WhiteNoise(WhiteNoiseParams),
    DiscreteLevy(DiscreteLevyParams),
    HvaluedLevy(HvaluedLevyParams),
    Haar(HaarParams),
    Isometry(IsometryParams),
    Fubini(FubiniParams),
    Stopped(StoppedParams),
    Heat(HeatParams),
    Picard(PicardParams),
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(config_err(
            format!("params.{key}"),
            format!("must be positive, got {v}"),
        ))
    }
}

fn positive_all(pairs: &[(&str, f64)]) -> Result<()> {
    pairs.iter().try_for_each(|(k, v)| positive(k, *v))
}

impl Params {
    fn parse(scenario: Scenario, map: &Map<String, Value>) -> Result<Self> {
        let v = Value::Object(map.clone());
        Ok(match scenario {
            Scenario::SupMeasuresOracle => Params::SupOracle(deserialize_at("params", v)?),
            Scenario::WhiteNoiseQv => Params::WhiteNoise(deserialize_at("params", v)?),
            Scenario::DiscreteLevyQv => Params::DiscreteLevy(deserialize_at("params", v)?),
            Scenario::HvaluedLevyQm => Params::HvaluedLevy(deserialize_at("params", v)?),
            Scenario::HaarCounterexample => Params::Haar(deserialize_at("params", v)?),
            Scenario::ItoIsometry => Params::Isometry(deserialize_at("params", v)?),
            Scenario::Fubini => Params::Fubini(deserialize_at("params", v)?),
            Scenario::StoppedIntegral => Params::Stopped(deserialize_at("params", v)?),
            Scenario::HeatSpde => Params::Heat(deserialize_at("params", v)?),
            Scenario::PicardContraction => Params::Picard(deserialize_at("params", v)?),
        })
    }

    fn to_value(&self) -> Result<Value> {
        Ok(match self {
            Params::SupOracle(p) => serde_json::to_value(p)?,
            Params::WhiteNoise(p) => serde_json::to_value(p)?,
            Params::DiscreteLevy(p) => serde_json::to_value(p)?,
            Params::HvaluedLevy(p) => serde_json::to_value(p)?,
            Params::Haar(p) => serde_json::to_value(p)?,
            Params::Isometry(p) => serde_json::to_value(p)?,
            Params::Fubini(p) => serde_json::to_value(p)?,
            Params::Stopped(p) => serde_json::to_value(p)?,
            Params::Heat(p) => serde_json::to_value(p)?,
            Params::Picard(p) => serde_json::to_value(p)?,
        })
    }

    /// Atom count forced by the parameters, if any.
    fn fixed_atoms(&self) -> Option<usize> {
        match self {
            Params::WhiteNoise(p) => Some(p.lambda.len()),
            Params::HvaluedLevy(p) => Some(p.jumps + 1),
            Params::Haar(_) | Params::Heat(_) | Params::Picard(_) => Some(1),
            _ => None,
        }
    }

    fn validate(&self, cfg: &ResolvedConfig) -> Result<()> {
        let u = |v: usize| v as f64;
        match self {
            Params::SupOracle(p) => {
                positive_all(&[
                    ("families", u(p.families)),
                    ("family_size", u(p.family_size)),
                    ("max_mass", p.max_mass as f64),
                ])?;
                let cells = cfg.steps * cfg.atoms;
                if cells > BRUTE_FORCE_LIMIT {
                    return Err(config_err(
                        "grid",
                        format!("{cells} cells; partition enumeration is limited to {BRUTE_FORCE_LIMIT}"),
                    ));
                }
            }
            Params::WhiteNoise(p) => {
                if p.lambda.is_empty() {
                    return Err(config_err("params.lambda", "needs at least one atom"));
                }
                for (i, l) in p.lambda.iter().enumerate() {
                    positive(&format!("lambda[{i}]"), *l)?;
                }
            }
            Params::DiscreteLevy(p) => positive_all(&[
                ("h_dim", u(p.h_dim)),
                ("sphere_count", u(p.sphere_count)),
                ("refine_steps", u(p.refine_steps)),
            ])?,
            Params::HvaluedLevy(p) => positive_all(&[
                ("h_dim", u(p.h_dim)),
                ("jumps", u(p.jumps)),
                ("sphere_count", u(p.sphere_count)),
                ("refine_steps", u(p.refine_steps)),
            ])?,
            Params::Haar(p) => {
                positive("k", p.k as f64)?;
                if p.k > HAAR_MAX_LEVEL {
                    return Err(config_err("params.k", format!("at most {HAAR_MAX_LEVEL}")));
                }
            }
            Params::Isometry(p) => {
                positive_all(&[
                    ("h_dim", u(p.h_dim)),
                    ("g_dim", u(p.g_dim)),
                    ("sphere_count", u(p.sphere_count)),
                ])?;
                if p.noise == NoiseKind::WhiteNoise && p.h_dim != 1 {
                    return Err(config_err(
                        "params.h_dim",
                        "white noise is real valued: h_dim must be 1",
                    ));
                }
                if p.noise == NoiseKind::HvaluedLevy && cfg.atoms < 2 {
                    return Err(config_err(
                        "grid.atoms",
                        "hvalued_levy needs a Wiener atom and at least one jump atom",
                    ));
                }
                if cfg.paths < 2 {
                    return Err(config_err(
                        "paths",
                        "Monte Carlo checks need at least two paths",
                    ));
                }
            }
            Params::Fubini(p) => positive_all(&[
                ("family_size", u(p.family_size)),
                ("h_dim", u(p.h_dim)),
                ("g_dim", u(p.g_dim)),
                ("pushforward_rows", u(p.pushforward_rows)),
            ])?,
            Params::Stopped(p) => {
                positive_all(&[
                    ("h_dim", u(p.h_dim)),
                    ("exit_level", p.exit_level),
                    ("sphere_count", u(p.sphere_count)),
                ])?;
                if p.thresholds.is_empty() {
                    return Err(config_err("params.thresholds", "needs at least one level"));
                }
                for (i, t) in p.thresholds.iter().enumerate() {
                    positive(&format!("thresholds[{i}]"), *t)?;
                }
            }
            Params::Heat(p) => {
                positive_all(&[("modes", u(p.modes)), ("sphere_count", u(p.sphere_count))])?;
                if cfg.paths < 2 {
                    return Err(config_err(
                        "paths",
                        "Monte Carlo checks need at least two paths",
                    ));
                }
            }
            Params::Picard(p) => {
                positive_all(&[
                    ("modes", u(p.modes)),
                    ("drift_c", p.drift_c),
                    ("diffusion_c", p.diffusion_c),
                    ("clip", p.clip),
                    ("tol", p.tol),
                    ("max_iter", u(p.max_iter)),
                    ("sphere_count", u(p.sphere_count)),
                ])?;
                if let Some(b) = p.beta {
                    positive("beta", b)?;
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// reports

/// Where the target value of a check comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// An explicit formula for the example at hand.
    ClosedForm,
    /// An inequality the measured value must respect.
    Bound,
    /// A second, independent computation (enumeration, quadrature).
    Oracle,
    /// Monte Carlo; the tolerance is three standard errors.
    MonteCarlo,
    /// An exact pathwise identity between two routes.
    Identity,
}

/// How `measured` is compared with `target`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// `|measured - target| <= tolerance`.
    Within,
    /// `measured <= target + tolerance`.
    AtMost,
    /// `measured >= target - tolerance`.
    AtLeast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Check {
    pub name: String,
    pub target: f64,
    pub provenance: Provenance,
    pub measured: f64,
    pub tolerance: f64,
    pub comparison: Comparison,
    pub passed: bool,
}

impl Check {
    pub fn new(
        name: impl Into<String>,
        target: f64,
        provenance: Provenance,
        measured: f64,
        tolerance: f64,
        comparison: Comparison,
    ) -> Self {
        let passed = measured.is_finite()
            && match comparison {
                Comparison::Within => (measured - target).abs() <= tolerance,
                Comparison::AtMost => measured <= target + tolerance,
                Comparison::AtLeast => measured >= target - tolerance,
            };
        Self {
            name: name.into(),
            target,
            provenance,
            measured,
            tolerance,
            comparison,
            passed,
        }
    }
}

/// Machine-readable outcome of a run. `config` reproduces the run:
/// `cmvm run report.json` accepts the report itself.
#[derive(Clone, Debug, Serialize, Deserialize, JsonSchema)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub threads: usize,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub wall_clock_s: f64,
    pub artifacts: Vec<String>,
    pub config: ScenarioConfig,
}

/// A CSV artifact held in memory until the run ends.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub artifacts: Vec<Artifact>,
}

struct Ctx<'a> {
    cfg: &'a ResolvedConfig,
    checks: Vec<Check>,
    artifacts: Vec<Artifact>,
}

impl Ctx<'_> {
    fn check(
        &mut self,
        name: impl Into<String>,
        target: f64,
        provenance: Provenance,
        measured: f64,
        tolerance: f64,
        cmp: Comparison,
    ) {
        self.checks.push(Check::new(
            name, target, provenance, measured, tolerance, cmp,
        ));
    }

    /// Monte Carlo mean against `target` with a three-standard-error tolerance.
    fn mc(&mut self, name: impl Into<String>, target: f64, samples: &[f64]) {
        let (m, se) = mean_se(samples);
        self.check(
            name,
            target,
            Provenance::MonteCarlo,
            m,
            3.0 * se,
            Comparison::Within,
        );
    }

    fn csv(&mut self, name: &str, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut bytes = Vec::new();
        write(&mut bytes)?;
        self.artifacts.push(Artifact {
            name: name.to_string(),
            bytes,
        });
        Ok(())
    }

    fn rows(
        &mut self,
        name: &str,
        header: &[&str],
        rows: impl IntoIterator<Item = Vec<String>>,
    ) -> Result<()> {
        self.csv(name, |out| {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(header)?;
            for r in rows {
                w.write_record(&r)?;
            }
            w.flush()?;
            Ok(())
        })
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

/// Runs the scenario on the configured thread pool. No files are written.
pub fn run(cfg: &ResolvedConfig) -> Result<RunOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.unwrap_or(0))
        .build()
        .map_err(|e| config_err("threads", e.to_string()))?;
    let threads = pool.current_num_threads();
    let start = Instant::now();
    let mut ctx = Ctx {
        cfg,
        checks: Vec::new(),
        artifacts: Vec::new(),
    };
    pool.install(|| match &cfg.params {
        Params::SupOracle(p) => sup_oracle(&mut ctx, p),
        Params::WhiteNoise(p) => white_noise(&mut ctx, p),
        Params::DiscreteLevy(p) => discrete_levy(&mut ctx, p),
        Params::HvaluedLevy(p) => hvalued_levy(&mut ctx, p),
        Params::Haar(p) => haar(&mut ctx, p),
        Params::Isometry(p) => isometry(&mut ctx, p),
        Params::Fubini(p) => fubini(&mut ctx, p),
        Params::Stopped(p) => stopped(&mut ctx, p),
        Params::Heat(p) => heat(&mut ctx, p),
        Params::Picard(p) => picard(&mut ctx, p),
    })?;
    let Ctx {
        checks, artifacts, ..
    } = ctx;
    let report = RunReport {
        scenario: cfg.scenario.name().to_string(),
        seed: cfg.seed,
        threads,
        passed: checks.iter().all(|c| c.passed),
        checks,
        wall_clock_s: start.elapsed().as_secs_f64(),
        artifacts: artifacts
            .iter()
            .map(|a| a.name.clone())
            .chain(["report.json".to_string()])
            .collect(),
        config: cfg.to_config(),
    };
    Ok(RunOutcome { report, artifacts })
}

/// Writes the artifacts and `report.json` into `dir`.
pub fn write_outputs(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for a in &outcome.artifacts {
        std::fs::write(dir.join(&a.name), &a.bytes)?;
    }
    let json = serde_json::to_string_pretty(&outcome.report)?;
    std::fs::write(dir.join("report.json"), json + "\n")?;
    Ok(())
}

/// Loads `path`, applies `flags`, runs and writes the outputs.
pub fn run_file(path: &Path, flags: &Overrides) -> Result<RunOutcome> {
    let cfg = ScenarioConfig::load(path)?.resolve(flags)?;
    let outcome = run(&cfg)?;
    write_outputs(&outcome, &cfg.out)?;
    Ok(outcome)
}

/// Text printed by `cmvm list`.
pub fn list_text() -> String {
    let mut s = String::new();
    for sc in Scenario::ALL {
        let d = sc.defaults();
        s.push_str(&format!("{}\n  {}\n", sc.name(), sc.description()));
        s.push_str(&format!(
            "  defaults: horizon = {}, steps = {}, atoms = {}, paths = {}\n",
            d.horizon, d.steps, d.atoms, d.paths
        ));
        s.push_str(&format!("  params: {}\n\n", sc.default_params()));
    }
    s
}

/// JSON schema of the config file together with each scenario's `params` schema.
pub fn schema_document() -> Value {
    let mut params = Map::new();
    for sc in Scenario::ALL {
        params.insert(sc.name().to_string(), sc.params_schema());
    }
    serde_json::json!({
        "config": serde_json::to_value(schemars::schema_for!(ScenarioConfig)).expect("schema serializes"),
        "report": serde_json::to_value(schemars::schema_for!(RunReport)).expect("schema serializes"),
        "params": params,
    })
}

// ---------------------------------------------------------------------------
// shared inputs

fn random_psd(dim: usize, rng: &mut ChaCha8Rng) -> PsdOperator {
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    PsdOperator::project(&(&a * a.transpose()))
}

fn random_op(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn lambda_max(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.max()
}

struct Densities {
    qv: QvEstimate,
    refined: QvEstimate,
    qm: QmField,
    qm_refined: QmField,
    alpha: BilinearMeasureField,
    radius: f64,
}

fn densities(
    spec: &NoiseSpec,
    grid: Arc<GridSpec>,
    count: usize,
    refine_steps: usize,
    seed: u64,
) -> Result<Densities> {
    let src = ClosedFormIntensity::new(spec, grid)?;
    let sphere = sphere_sequence(spec.h_dim(), count, seed);
    let qv = qv_supremum(&src, &sphere)?;
    let alpha = BilinearMeasureField::from_source(&src)?;
    let qm = qm_density(&alpha, &qv)?;
    let refined = qv_refine(&src, &alpha, &qv, &sphere, refine_steps)?;
    let qm_refined = qm_density(&alpha, &refined)?;
    let radius = coverage_radius(&sphere, 20_000, seed ^ 0x9e37_79b9, true);
    Ok(Densities {
        qv,
        refined,
        qm,
        qm_refined,
        alpha,
        radius,
    })
}

fn qv_trace_rows(qv: &QvEstimate) -> Vec<Vec<String>> {
    qv.convergence_trace
        .iter()
        .map(|(n, v)| vec![n.to_string(), v.to_string()])
        .collect()
}

fn measure_csv(m: &DiscreteMeasure) -> impl FnOnce(&mut Vec<u8>) -> Result<()> + '_ {
    move |out| m.write_csv(out)
}

// ---------------------------------------------------------------------------
// scenarios

fn sup_oracle(ctx: &mut Ctx, p: &SupOracleParams) -> Result<()> {
    let grid = ctx.cfg.grid()?;
    let mut rng = ctx.cfg.input_rng();
    let cells = grid.n_cells();
    let (mut worst, mut undominated) = (0.0f64, 0usize);
    let mut rows = Vec::new();
    for f in 0..p.families {
        let family: Vec<DiscreteMeasure> = (0..p.family_size)
            .map(|_| {
                let mass = (0..cells)
                    .map(|_| rng.random_range(0..=p.max_mass) as f64 / 8.0)
                    .collect();
                DiscreteMeasure::new(grid.clone(), mass)
            })
            .collect::<Result<_>>()?;
        let sup = sup_measures(&family)?;
        undominated += family.iter().filter(|m| !m.dominated_by(&sup)).count();
        for mask in 1..(1usize << cells) {
            let subset: Vec<usize> = (0..cells).filter(|c| mask >> c & 1 == 1).collect();
            let cellwise = sup.measure_of(&subset);
            let partition = brute_force_sup(&family, &subset)?;
            worst = worst.max((cellwise - partition).abs());
            rows.push(vec![
                f.to_string(),
                mask.to_string(),
                cellwise.to_string(),
                partition.to_string(),
            ]);
        }
    }
    ctx.check(
        "cellwise_vs_partition_sup",
        0.0,
        Provenance::Oracle,
        worst,
        1e-12,
        Comparison::Within,
    );
    ctx.check(
        "members_not_dominated",
        0.0,
        Provenance::Bound,
        undominated as f64,
        0.0,
        Comparison::Within,
    );
    ctx.rows(
        "sup_oracle.csv",
        &["family", "cell_mask", "cellwise_sup", "partition_sup"],
        rows,
    )
}

fn white_noise(ctx: &mut Ctx, p: &WhiteNoiseParams) -> Result<()> {
    let grid = ctx.cfg.grid()?;
    let spec = NoiseSpec::WhiteNoise {
        lambda: p.lambda.clone(),
    };
    let src = ClosedFormIntensity::new(&spec, grid.clone())?;
    let qv = qv_supremum(&src, &sphere_sequence(1, 2, ctx.cfg.seed))?;
    let qv_err = (0..grid.n_cells())
        .map(|c| {
            let (i, a) = grid.split(c);
            (qv.measure.mass(c) - grid.dt(i) * p.lambda[a]).abs()
        })
        .fold(0.0, f64::max);
    let scale = p.lambda.iter().fold(1.0f64, |m, l| m.max(*l)) * grid.horizon();
    ctx.check(
        "qv_cell_mass_error",
        0.0,
        Provenance::ClosedForm,
        qv_err,
        1e-12 * scale,
        Comparison::Within,
    );

    let ens = simulate(&spec, grid.clone(), ctx.cfg.paths, ctx.cfg.seed)?;
    let one = DVector::from_element(1, 1.0);
    let n = grid.n_steps();
    let t = grid.horizon();
    for a in 0..grid.n_atoms() {
        let set = AtomSet::singleton(a);
        let sq: Vec<f64> = (0..ens.paths())
            .map(|q| ens.tested(q, n, &set, &one).powi(2))
            .collect();
        ctx.mc(format!("second_moment_T_atom{a}"), t * p.lambda[a], &sq);
    }
    let all = AtomSet::all(grid.n_atoms());
    let sq: Vec<f64> = (0..ens.paths())
        .map(|q| ens.tested(q, n, &all, &one).powi(2))
        .collect();
    ctx.mc(
        "second_moment_T_all_atoms",
        t * p.lambda.iter().sum::<f64>(),
        &sq,
    );

    ctx.csv("qv.csv", measure_csv(&qv.measure))?;
    ctx.csv("noise_summary.csv", |out| ens.write_summary_csv(out))
}

fn discrete_levy(ctx: &mut Ctx, p: &DiscreteLevyParams) -> Result<()> {
    let grid = ctx.cfg.grid()?;
    let mut rng = ctx.cfg.input_rng();
    let qs: Vec<PsdOperator> = (0..grid.n_atoms())
        .map(|_| random_psd(p.h_dim, &mut rng))
        .collect();
    let spec = NoiseSpec::DiscreteLevy {
        atoms: qs.iter().cloned().map(LevyAtom::brownian).collect(),
    };
    let d = densities(
        &spec,
        grid.clone(),
        p.sphere_count,
        p.refine_steps,
        ctx.cfg.seed,
    )?;
    let (mut gap, mut excess, mut entry) = (0.0f64, f64::NEG_INFINITY, 0.0f64);
    for c in 0..grid.n_cells() {
        let (i, a) = grid.split(c);
        let q = qs[a].matrix();
        let top = lambda_max(q);
        let exact = grid.dt(i) * top;
        gap = gap.max((exact - d.qv.measure.mass(c)).abs() / exact);
        excess = excess.max((d.refined.measure.mass(c) - exact) / exact);
        entry = entry.max((d.qm_refined.cell(c).matrix() - q / top).amax());
    }
    let eps = sampling_modulus(d.radius);
    ctx.check(
        "qv_relative_gap_sample",
        0.0,
        Provenance::Bound,
        gap,
        eps,
        Comparison::Within,
    );
    ctx.check(
        "qv_relative_excess_refined",
        0.0,
        Provenance::Bound,
        excess,
        1e-12,
        Comparison::AtMost,
    );
    ctx.check(
        "qm_entry_error",
        0.0,
        Provenance::ClosedForm,
        entry,
        0.02,
        Comparison::Within,
    );
    let recon = d.qm_refined.reconstruction_error(&d.alpha, &d.refined);
    ctx.check(
        "qm_reconstruction_error",
        0.0,
        Provenance::Identity,
        recon,
        1e-9,
        Comparison::Within,
    );

    ctx.csv("qv_sample.csv", measure_csv(&d.qv.measure))?;
    ctx.csv("qv_refined.csv", measure_csv(&d.refined.measure))?;
    ctx.csv("qm.csv", |out| d.qm_refined.write_csv(out))?;
    ctx.rows(
        "qv_trace.csv",
        &["directions", "total"],
        qv_trace_rows(&d.refined),
    )
}

fn hvalued_spec(h_dim: usize, jumps: usize, rng: &mut ChaCha8Rng) -> (PsdOperator, Vec<JumpSpec>) {
    let q = random_psd(h_dim, rng);
    let jumps = (0..jumps)
        .map(|_| {
            JumpSpec::new(
                (0..h_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                rng.random_range(0.5..3.0),
            )
        })
        .collect();
    (q, jumps)
}

fn hvalued_levy(ctx: &mut Ctx, p: &HvaluedLevyParams) -> Result<()> {
    let grid = ctx.cfg.grid()?;
    let mut rng = ctx.cfg.input_rng();
    let (q, jumps) = hvalued_spec(p.h_dim, p.jumps, &mut rng);
    let spec = NoiseSpec::HValuedLevy {
        q: q.clone(),
        jumps: jumps.clone(),
    };
    let d = densities(
        &spec,
        grid.clone(),
        p.sphere_count,
        p.refine_steps,
        ctx.cfg.seed,
    )?;
    let q_norm = lambda_max(q.matrix());
    let (mut wiener, mut jump, mut gap) = (0.0f64, 0.0f64, 0.0f64);
    for c in 0..grid.n_cells() {
        let (i, a) = grid.split(c);
        let (expected, mass) = if a == 0 {
            (q.matrix() / q_norm, q_norm)
        } else {
            let u = jumps[a - 1].vector();
            (
                &u * u.transpose() / u.norm_squared(),
                jumps[a - 1].rate * u.norm_squared(),
            )
        };
        let err = (d.qm_refined.cell(c).matrix() - expected).amax();
        if a == 0 {
            wiener = wiener.max(err);
        } else {
            jump = jump.max(err);
        }
        let exact = grid.dt(i) * mass;
        gap = gap.max((exact - d.qv.measure.mass(c)).abs() / exact);
    }
    ctx.check(
        "qm_wiener_atom_entry_error",
        0.0,
        Provenance::ClosedForm,
        wiener,
        0.02,
        Comparison::Within,
    );
    ctx.check(
        "qm_jump_atom_entry_error",
        0.0,
        Provenance::ClosedForm,
        jump,
        0.02,
        Comparison::Within,
    );
    ctx.check(
        "qv_relative_gap_sample",
        0.0,
        Provenance::Bound,
        gap,
        sampling_modulus(d.radius),
        Comparison::Within,
    );

    // E |M((0,T], U)(h)|^2 = T [(h, Q h) + sum rate (u, h)^2]
    let h = {
        let v = DVector::from_fn(p.h_dim, |_, _| rng.random_range(-1.0..1.0));
        let n = v.norm();
        v / n
    };
    let target = grid.horizon()
        * (q.quad(&h)
            + jumps
                .iter()
                .map(|j| j.rate * j.vector().dot(&h).powi(2))
                .sum::<f64>());
    let ens = simulate(&spec, grid.clone(), ctx.cfg.paths, ctx.cfg.seed)?;
    let all = AtomSet::all(grid.n_atoms());
    let sq: Vec<f64> = (0..ens.paths())
        .map(|k| ens.tested(k, grid.n_steps(), &all, &h).powi(2))
        .collect();
    ctx.mc("second_moment_T", target, &sq);

    ctx.csv("qv_sample.csv", measure_csv(&d.qv.measure))?;
    ctx.csv("qm.csv", |out| d.qm_refined.write_csv(out))?;
    ctx.csv("noise_summary.csv", |out| ens.write_summary_csv(out))
}

fn haar(ctx: &mut Ctx, p: &HaarParams) -> Result<()> {
    let r = haar_partition_report(p.k)?;
    let bound = 2f64.powi(p.k as i32);
    ctx.check(
        "partition_sum",
        bound,
        Provenance::Bound,
        r.partition_sum,
        0.0,
        Comparison::AtLeast,
    );
    let worst = r
        .refinement_trace
        .iter()
        .enumerate()
        .map(|(j, v)| (v - 2f64.powi(j as i32)).abs())
        .fold(0.0, f64::max);
    ctx.check(
        "refinement_trace_vs_2^j",
        0.0,
        Provenance::ClosedForm,
        worst,
        1e-9,
        Comparison::Within,
    );
    let growth = r.refinement_trace.last().copied().unwrap_or(0.0)
        / r.refinement_trace.first().copied().unwrap_or(1.0);
    ctx.check(
        "refinement_growth",
        bound,
        Provenance::Bound,
        growth,
        0.0,
        Comparison::AtLeast,
    );
    let dim = HaarSystem::new(p.k)?.dim();
    ctx.check(
        "haar_dimension",
        2f64.powi(p.k as i32 + 1),
        Provenance::ClosedForm,
        dim as f64,
        0.0,
        Comparison::Within,
    );

    let rows = r.refinement_trace.iter().enumerate().map(|(j, v)| {
        vec![
            j.to_string(),
            v.to_string(),
            2f64.powi(j as i32).to_string(),
        ]
    });
    ctx.rows(
        "haar_refinement.csv",
        &["level", "partition_sum", "lower_bound"],
        rows,
    )?;
    let rows = r
        .convergence_trace
        .iter()
        .map(|(n, v)| vec![n.to_string(), v.to_string()]);
    ctx.rows("haar_trace.csv", &["functions", "total"], rows)
}

fn noise_for(kind: NoiseKind, h_dim: usize, atoms: usize, rng: &mut ChaCha8Rng) -> NoiseSpec {
    match kind {
        NoiseKind::WhiteNoise => NoiseSpec::WhiteNoise {
            lambda: (0..atoms).map(|a| 0.5 * (a + 1) as f64).collect(),
        },
        NoiseKind::DiscreteLevy => NoiseSpec::DiscreteLevy {
            atoms: (0..atoms)
                .map(|_| LevyAtom {
                    brownian: random_psd(h_dim, rng),
                    jumps: vec![JumpSpec::new(
                        (0..h_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        1.5,
                    )],
                })
                .collect(),
        },
        NoiseKind::HvaluedLevy => {
            let (q, jumps) = hvalued_spec(h_dim, atoms - 1, rng);
            NoiseSpec::HValuedLevy { q, jumps }
        }
    }
}

fn isometry(ctx: &mut Ctx, p: &IsometryParams) -> Result<()> {
    let grid = ctx.cfg.grid()?;
    let mut rng = ctx.cfg.input_rng();
    let spec = noise_for(p.noise, p.h_dim, grid.n_atoms(), &mut rng);
    let phi: Box<dyn GridIntegrand> = match p.integrand {
        IntegrandKind::Constant => {
            Box::new(ConstantIntegrand(random_op(p.g_dim, p.h_dim, &mut rng)))
        }
        IntegrandKind::Deterministic => Box::new(DeterministicIntegrand::new(
            grid.clone(),
            (0..grid.n_cells())
                .map(|_| random_op(p.g_dim, p.h_dim, &mut rng))
                .collect(),
        )?),
        IntegrandKind::Adapted => {
            let base = random_op(p.g_dim, p.h_dim, &mut rng);
            let x = DVector::from_element(p.h_dim, 1.0 / (p.h_dim as f64).sqrt());
            let atoms = grid.n_atoms();
            Box::new(AdaptedIntegrand::new(
                p.g_dim,
                p.h_dim,
                move |h: &History<'_>, _| {
                    Ok(&base * h.tested(h.cutoff(), &AtomSet::all(atoms), &x)?.cos())
                },
            ))
        }
    };
    let d = densities(&spec, grid.clone(), p.sphere_count, 1, ctx.cfg.seed)?;
    let ens = simulate(&spec, grid.clone(), ctx.cfg.paths, ctx.cfg.seed)?;
    let int = integrate_grid(phi.as_ref(), &ens)?;
    let cost = pathwise_cost(phi.as_ref(), &d.qm, &d.qv, &ens)?;
    let iso = isometry_check(&int, &cost)?;
    let n = grid.n_steps();
    ctx.check(
        "isometry_T",
        iso.target[n],
        Provenance::MonteCarlo,
        iso.mc[n],
        3.0 * iso.se[n],
        Comparison::Within,
    );
    let worst_z = (1..=n)
        .map(|k| (iso.mc[k] - iso.target[k]).abs() / iso.se[k].max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    ctx.check(
        "isometry_max_z_over_times",
        0.0,
        Provenance::MonteCarlo,
        worst_z,
        3.0,
        Comparison::Within,
    );
    let mean = zero_mean_check(&int, n);
    let mean_z = mean
        .mean
        .iter()
        .zip(&mean.se)
        .map(|(m, s)| m.abs() / s.max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    ctx.check(
        "zero_mean_max_z",
        0.0,
        Provenance::MonteCarlo,
        mean_z,
        3.0,
        Comparison::Within,
    );
    let doob = doob_check(&int, cost.mean_at(n));
    ctx.check(
        "doob_maximal",
        doob.bound,
        Provenance::Bound,
        doob.mean_sup,
        3.0 * doob.se,
        Comparison::AtMost,
    );

    // cost against sum trace(Phi alpha Phi^T), independent of the sphere sample
    let mut gap = 0.0f64;
    for q in 0..ens.paths().min(50) {
        let mut total = 0.0;
        for i in 0..n {
            let h = History::new(&ens, q, i);
            for a in 0..grid.n_atoms() {
                let v = phi.value(&h, a)?;
                total += (&v * d.alpha.cell(grid.cell(i, a)) * v.transpose()).trace();
            }
        }
        gap = gap.max((total - cost.at(q, n)).abs() / total.abs().max(1.0));
    }
    ctx.check(
        "cost_vs_trace_form",
        0.0,
        Provenance::Identity,
        gap,
        1e-9,
        Comparison::Within,
    );

    let profile = cost.mean_profile();
    ctx.csv("integral_summary.csv", |out| {
        int.write_summary_csv(out, Some(&profile))
    })
}

fn fubini(ctx: &mut Ctx, p: &FubiniParams) -> Result<()> {
    let grid = ctx.cfg.grid()?;
    let mut rng = ctx.cfg.input_rng();
    let spec = noise_for(NoiseKind::DiscreteLevy, p.h_dim, grid.n_atoms(), &mut rng);
    let ens = simulate(&spec, grid.clone(), ctx.cfg.paths, ctx.cfg.seed)?;
    let members: Vec<DeterministicIntegrand> = (0..p.family_size)
        .map(|_| {
            DeterministicIntegrand::new(
                grid.clone(),
                (0..grid.n_cells())
                    .map(|_| random_op(p.g_dim, p.h_dim, &mut rng))
                    .collect(),
            )
        })
        .collect::<Result<_>>()?;
    let weights: Vec<f64> = (0..p.family_size)
        .map(|_| rng.random_range(0.0..2.0))
        .collect();
    let family: Vec<(f64, &dyn GridIntegrand)> = weights
        .iter()
        .zip(&members)
        .map(|(w, m)| (*w, m as &dyn GridIntegrand))
        .collect();
    let fub = fubini_check(&family, &ens)?;
    ctx.check(
        "fubini_max_abs_diff",
        0.0,
        Provenance::Identity,
        fub.max_abs_diff,
        IDENTITY_TOL * fub.scale,
        Comparison::Within,
    );

    let r = random_op(p.pushforward_rows, p.g_dim, &mut rng);
    let push = pushforward_commute(&r, &members[0], &ens)?;
    ctx.check(
        "pushforward_max_abs_diff",
        0.0,
        Provenance::Identity,
        push.max_abs_diff,
        IDENTITY_TOL * push.scale,
        Comparison::Within,
    );

    let combined = crate::integral::LinearCombination::new(family)?;
    let int = integrate_grid(&combined, &ens)?;
    ctx.csv("fubini_summary.csv", |out| int.write_summary_csv(out, None))
}

fn stopped(ctx: &mut Ctx, p: &StoppedParams) -> Result<()> {
    let grid = ctx.cfg.grid()?;
    let mut rng = ctx.cfg.input_rng();
    let spec = noise_for(NoiseKind::DiscreteLevy, p.h_dim, grid.n_atoms(), &mut rng);
    let ens = simulate(&spec, grid.clone(), ctx.cfg.paths, ctx.cfg.seed)?;
    let d = densities(&spec, grid.clone(), p.sphere_count, 1, ctx.cfg.seed)?;
    let atoms = grid.n_atoms();
    let x = DVector::from_fn(p.h_dim, |_, _| rng.random_range(-1.0..1.0));
    let base = random_op(2, p.h_dim, &mut rng);
    let xs = x.clone();
    // adapted and unbounded in the path
    let phi = AdaptedIntegrand::new(2, p.h_dim, move |h, _| {
        let m = h.tested(h.cutoff(), &AtomSet::all(atoms), &xs)?;
        Ok(&base * m.abs().exp())
    });
    let level = p.exit_level;
    let exit =
        move |h: &History<'_>| Ok(h.tested(h.cutoff(), &AtomSet::all(atoms), &x)?.abs() >= level);
    let st = stopped_integral(&phi, &ens, &exit)?;
    ctx.check(
        "stopped_vs_frozen_max_abs_diff",
        0.0,
        Provenance::Identity,
        st.identity.max_abs_diff,
        IDENTITY_TOL * st.identity.scale,
        Comparison::Within,
    );
    let stopped_paths = st.sigma.iter().filter(|&&s| s < grid.n_steps()).count();
    ctx.check(
        "paths_stopped_before_T",
        1.0,
        Provenance::Bound,
        stopped_paths as f64,
        0.0,
        Comparison::AtLeast,
    );

    let local = localization_consistency(&phi, &d.qm, &d.qv, &ens, &p.thresholds)?;
    ctx.check(
        "localization_max_abs_diff",
        0.0,
        Provenance::Identity,
        local.identity.max_abs_diff,
        IDENTITY_TOL * local.identity.scale,
        Comparison::Within,
    );
    for l in &local.levels {
        ctx.check(
            format!("localized_norm_n{}", l.threshold),
            l.bound,
            Provenance::Bound,
            l.norm,
            0.0,
            Comparison::AtMost,
        );
    }

    let mut header = vec!["path".to_string(), "sigma".to_string()];
    header.extend(local.levels.iter().map(|l| format!("tau_{}", l.threshold)));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = (0..ens.paths())
        .map(|q| {
            let mut r = vec![q.to_string(), st.sigma[q].to_string()];
            r.extend(local.levels.iter().map(|l| l.tau[q].to_string()));
            r
        })
        .collect();
    ctx.rows("stopping_times.csv", &header, rows)?;
    ctx.csv("stopped_summary.csv", |out| {
        st.stopped.write_summary_csv(out, None)
    })
}

fn heat_inputs(modes: usize) -> Result<(HeatSetup, DVector<f64>)> {
    let sigmas: Vec<Vec<f64>> = (0..3)
        .map(|i| {
            (0..modes)
                .map(|k| 1.0 / ((k + 1) as f64 * (i + 1) as f64))
                .collect()
        })
        .collect();
    let levy = LevyAtom {
        brownian: PsdOperator::from_diagonal(&[1.0, 0.5, 0.25])?,
        jumps: vec![JumpSpec::new(vec![0.5, -0.5, 0.2], 2.0)],
    };
    let setup = heat_example_setup(&sigmas, &[1.0, 0.5, 2.0], levy)?;
    let y0 = DVector::from_fn(modes, |k, _| 1.0 / (k + 1) as f64);
    Ok((setup, y0))
}

fn heat(ctx: &mut Ctx, p: &HeatParams) -> Result<()> {
    let grid = ctx.cfg.grid()?;
    let (setup, y0) = heat_inputs(p.modes)?;
    let sg = &setup.semigroup;
    let ens = simulate(&setup.noise, grid.clone(), ctx.cfg.paths, ctx.cfg.seed)?;
    let t = grid.time_points();
    let n = grid.n_steps();

    let quiet = CoefficientSpec {
        drift: DriftSpec::Zero,
        diffusion: DiffusionSpec::Zero {
            g_dim: p.modes,
            h_dim: 3,
        },
    };
    let det = picard_solve(
        sg,
        &quiet,
        &ens,
        &InitialValue::Deterministic(y0.clone()),
        0.0,
        &PicardConfig::default(),
    )?;
    let mut err = 0.0f64;
    for (k, tk) in t.iter().enumerate() {
        for m in 0..p.modes {
            let exact = (-((m + 1) as f64 * PI).powi(2) * tk).exp() * y0[m];
            err = err.max((det.x.value(0, k)[m] - exact).abs());
        }
    }
    ctx.check(
        "zero_noise_semigroup_error",
        0.0,
        Provenance::ClosedForm,
        err,
        1e-12,
        Comparison::Within,
    );

    let d = densities(&setup.noise, grid.clone(), p.sphere_count, 1, ctx.cfg.seed)?;
    let f = setup.f_alpha.clone();
    let closed = convolution_second_moment(sg, &|_| f.clone(), &d.qm, &d.qv);
    let fqf = &setup.f_alpha * setup.noise_covariance() * setup.f_alpha.transpose();
    let modewise = |k: usize| -> f64 {
        (0..k)
            .map(|i| {
                (0..p.modes)
                    .map(|m| {
                        (-2.0 * sg.eigenvalues[m] * (t[k] - t[i])).exp() * fqf[(m, m)] * grid.dt(i)
                    })
                    .sum::<f64>()
            })
            .sum()
    };
    let closed_gap = (1..=n)
        .map(|k| (modewise(k) - closed[k]).abs() / modewise(k))
        .fold(0.0, f64::max);
    ctx.check(
        "convolution_closed_sum_vs_modewise",
        0.0,
        Provenance::Oracle,
        closed_gap,
        1e-9,
        Comparison::Within,
    );
    let conv = stochastic_convolution(sg, &ConstantIntegrand(setup.f_alpha.clone()), &ens)?;
    ctx.mc(
        "convolution_second_moment_T",
        modewise(n),
        &conv.sq_norms(n),
    );

    let sol = picard_solve(
        sg,
        &setup.coeffs,
        &ens,
        &InitialValue::Deterministic(y0.clone()),
        0.0,
        &PicardConfig::default(),
    )?;
    let (m, se) = time_integrated_second_moment(&sol.x);
    let horizon = grid.horizon();
    let cost = horizon * fqf.trace();
    let bound = sg.growth_sq(horizon) * horizon.max(1.0) * (y0.norm_squared() + cost);
    ctx.check(
        "second_moment_bound",
        bound,
        Provenance::Bound,
        m,
        3.0 * se,
        Comparison::AtMost,
    );

    let rows: Vec<Vec<String>> = (0..=n)
        .map(|k| {
            let (mc, se) = mean_se(&conv.sq_norms(k));
            vec![
                t[k].to_string(),
                mc.to_string(),
                se.to_string(),
                closed[k].to_string(),
            ]
        })
        .collect();
    ctx.rows(
        "convolution_second_moment.csv",
        &["t", "mc", "se", "closed_sum"],
        rows,
    )?;
    let residuals: Vec<Vec<f64>> = (0..3.min(p.modes))
        .map(|mode| weak_residual(&sol.x, sg, &setup.coeffs, &ens, mode).map(|r| r.path0))
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<String>> = (0..=n)
        .map(|k| {
            let mut r = vec![t[k].to_string()];
            r.extend(
                residuals
                    .iter()
                    .map(|v| v.get(k).map_or(String::new(), f64::to_string)),
            );
            r
        })
        .collect();
    let mut header = vec!["t".to_string()];
    header.extend((0..residuals.len()).map(|m| format!("residual_mode{m}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    ctx.rows("weak_residual_path0.csv", &header, rows)?;
    ctx.csv("solution_summary.csv", |out| sol.write_csv(out))
}

fn picard(ctx: &mut Ctx, p: &PicardParams) -> Result<()> {
    let grid = ctx.cfg.grid()?;
    let (setup, y0) = heat_inputs(p.modes)?;
    let sg = &setup.semigroup;
    let coeffs = CoefficientSpec {
        drift: DriftSpec::Linear { c: p.drift_c },
        diffusion: DiffusionSpec::Nemytskii {
            ops: vec![setup.f_alpha.clone()],
            c: p.diffusion_c,
            clip: p.clip,
        },
    };
    let d = densities(&setup.noise, grid.clone(), p.sphere_count, 1, ctx.cfg.seed)?;
    let c_f = coeffs.c_f(&d.qm, &d.qv);
    let ens = simulate(&setup.noise, grid.clone(), ctx.cfg.paths, ctx.cfg.seed)?;
    let x0 = InitialValue::Deterministic(y0);
    let solve = |guess| {
        let cfg = PicardConfig {
            beta: p.beta,
            tol: p.tol,
            max_iter: p.max_iter,
            guess,
        };
        picard_solve(sg, &coeffs, &ens, &x0, c_f, &cfg)
    };
    let zero = solve(InitialGuess::Zero)?;
    let free = solve(InitialGuess::FreeEvolution)?;
    let observed = zero.max_ratio().max(free.max_ratio());
    ctx.check(
        "observed_ratio_vs_contraction_bound",
        zero.analytic_ratio_sum,
        Provenance::Bound,
        observed,
        0.0,
        Comparison::AtMost,
    );
    ctx.check(
        "contraction_bound_below_one",
        1.0,
        Provenance::Bound,
        zero.analytic_ratio_sum,
        0.0,
        Comparison::AtMost,
    );
    ctx.check(
        "final_residual",
        p.tol,
        Provenance::Bound,
        zero.residual().max(free.residual()),
        0.0,
        Comparison::AtMost,
    );
    // both iterates lie within tol / (1 - r) of the fixed point
    let r = observed.max(zero.analytic_ratio_sum).min(0.99);
    let dist = v_beta_distance(&zero.x, &free.x, zero.beta);
    ctx.check(
        "uniqueness_two_guesses",
        0.0,
        Provenance::Bound,
        dist,
        2.0 * p.tol / (1.0 - r),
        Comparison::AtMost,
    );

    let mut rows = Vec::new();
    for (name, sol) in [("zero", &zero), ("free_evolution", &free)] {
        for (m, dist) in sol.picard_trace.iter().enumerate() {
            let ratio = if m == 0 {
                String::new()
            } else {
                sol.ratios.get(m - 1).map_or(String::new(), f64::to_string)
            };
            rows.push(vec![
                name.to_string(),
                m.to_string(),
                dist.to_string(),
                ratio,
            ]);
        }
    }
    ctx.rows(
        "picard_trace.csv",
        &["guess", "iteration", "distance", "ratio"],
        rows,
    )?;
    ctx.csv("solution_summary.csv", |out| zero.write_csv(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> Result<ResolvedConfig> {
        ScenarioConfig::parse(text)?.resolve(&Overrides::default())
    }

    #[test]
    fn names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(Scenario::from_name(s.name()).unwrap(), s);
        }
        assert!(matches!(
            Scenario::from_name("nope"),
            Err(Error::UnknownScenario(_))
        ));
    }

    #[test]
    fn precedence_flag_over_file_over_default() {
        let file = ScenarioConfig::parse("scenario = \"fubini\"\nseed = 3\npaths = 40\n").unwrap();
        let r = file.resolve(&Overrides::default()).unwrap();
        assert_eq!((r.seed, r.paths, r.steps), (3, 40, 16));
        let r = file
            .resolve(&Overrides {
                seed: Some(9),
                paths: Some(7),
                ..Overrides::default()
            })
            .unwrap();
        assert_eq!((r.seed, r.paths), (9, 7));
    }

    #[test]
    fn errors_name_the_offending_key() {
        let key = |text: &str| match cfg(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        };
        assert_eq!(key("scenario = \"fubini\""), "seed");
        assert_eq!(key("scenario = \"fubini\"\nseed = 1\npaths = 0"), "paths");
        assert_eq!(
            key("scenario = \"fubini\"\nseed = 1\n[grid]\nsteps = 0"),
            "grid.steps"
        );
        assert_eq!(
            key("scenario = \"fubini\"\nseed = 1\n[grid]\nhorizon = -1.0"),
            "grid.horizon"
        );
        assert_eq!(
            key("scenario = \"heat_spde\"\nseed = 1\n[params]\nmodes = 0"),
            "params.modes"
        );
        assert_eq!(
            key("scenario = \"heat_spde\"\nseed = 1\n[params]\nmodes = \"many\""),
            "params.modes"
        );
        assert_eq!(
            key("scenario = \"white_noise_qv\"\nseed = 1\n[grid]\natoms = 4"),
            "grid.atoms"
        );
        assert!(
            key("scenario = \"heat_spde\"\nseed = 1\n[params]\nbogus = 1").starts_with("params")
        );
        assert!(matches!(
            cfg("scenario = \"warp\"\nseed = 1"),
            Err(Error::UnknownScenario(_))
        ));
    }

    #[test]
    fn default_params_round_trip_through_the_validator() {
        for s in Scenario::ALL {
            let v = s.default_params();
            let Value::Object(map) = v.clone() else {
                panic!("params are a table")
            };
            let again = Params::parse(s, &map).unwrap().to_value().unwrap();
            assert_eq!(v, again, "{}", s.name());
            assert!(s.params_schema().is_object());
        }
    }

    #[test]
    fn check_comparisons() {
        assert!(Check::new("a", 1.0, Provenance::Bound, 1.5, 0.5, Comparison::Within).passed);
        assert!(!Check::new("a", 1.0, Provenance::Bound, 1.6, 0.5, Comparison::Within).passed);
        assert!(Check::new("a", 1.0, Provenance::Bound, 0.0, 0.0, Comparison::AtMost).passed);
        assert!(!Check::new("a", 1.0, Provenance::Bound, 0.0, 0.0, Comparison::AtLeast).passed);
        assert!(
            !Check::new(
                "a",
                1.0,
                Provenance::Bound,
                f64::NAN,
                1.0,
                Comparison::Within
            )
            .passed
        );
    }

    #[test]
    fn haar_scenario_passes() {
        let c = cfg("scenario = \"haar_counterexample\"\nseed = 0\n[params]\nk = 3").unwrap();
        let out = run(&c).unwrap();
        assert!(out.report.passed);
        let sum = out
            .report
            .checks
            .iter()
            .find(|c| c.name == "partition_sum")
            .unwrap();
        assert!(sum.measured >= 8.0);
    }
}
