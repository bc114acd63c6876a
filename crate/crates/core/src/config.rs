//! File formats: the model specification and the scenario runner
//! configuration (JSON).

use crate::model::{
    Atom, DiscountCurve, InitialLaw, IntensitySpec, ModelError, ModelSpec, PaymentSpec,
};
use crate::rates::{Clock, Func, PwLinear, Rate};
use crate::state::State;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn field(params: &Value, name: &str) -> Result<f64, ConfigError> {
    params
        .get(name)
        .and_then(Value::as_f64)
        .ok_or_else(|| ConfigError::Parse(format!("missing numeric field '{name}'")))
}

fn points(params: &Value) -> Result<Vec<(f64, f64)>, ConfigError> {
    let arr = params
        .get("points")
        .and_then(Value::as_array)
        .ok_or_else(|| ConfigError::Parse("missing 'points' array".into()))?;
    arr.iter()
        .map(|p| {
            let pair = p.as_array().filter(|a| a.len() == 2);
            let pair = pair.ok_or_else(|| ConfigError::Parse("points must be [x, y] pairs".into()))?;
            Ok((
                pair[0]
                    .as_f64()
                    .ok_or_else(|| ConfigError::Parse("non-numeric abscissa".into()))?,
                pair[1]
                    .as_f64()
                    .ok_or_else(|| ConfigError::Parse("non-numeric ordinate".into()))?,
            ))
        })
        .collect()
}

/// Parse a scalar function: `constant`, `gompertz`, or `piecewise_linear` /
/// `table` (the latter two are the same linear-interpolation table).
pub fn parse_func(kind: &str, params: &Value) -> Result<Func, ConfigError> {
    match kind {
        "constant" => Ok(Func::Constant(field(params, "value")?)),
        "gompertz" => Ok(Func::Gompertz {
            level: field(params, "level")?,
            coeff: field(params, "coeff")?,
            exponent: field(params, "exponent")?,
        }),
        "piecewise_linear" | "table" => Ok(Func::PwLinear(
            PwLinear::new(points(params)?).map_err(ConfigError::Parse)?,
        )),
        other => Err(ConfigError::Parse(format!("unknown function kind '{other}'"))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntensityEntry {
    pub from: String,
    pub to: String,
    pub kind: String,
    #[serde(default)]
    pub params: Value,
    /// when set, the function argument is the state's duration clock (time
    /// since entering the current state before retirement; time since
    /// retirement inside the retired block) instead of calendar time
    #[serde(default)]
    pub duration_dependent: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SojournEntry {
    pub state: String,
    pub kind: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionEntry {
    pub from: String,
    pub to: String,
    pub kind: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteEntry {
    pub time: f64,
    pub state: String,
    pub amount: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PaymentsConfig {
    #[serde(default)]
    pub sojourn: Vec<SojournEntry>,
    #[serde(default)]
    pub discrete: Vec<DiscreteEntry>,
    #[serde(default)]
    pub transition: Vec<TransitionEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscountConfig {
    pub kind: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitEntry {
    pub state: String,
    pub prob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub sigma: u32,
    pub horizon: f64,
    pub sup_bound: f64,
    #[serde(default)]
    pub initial: Vec<InitEntry>,
    pub intensities: Vec<IntensityEntry>,
    #[serde(default)]
    pub payments: PaymentsConfig,
    pub discount: DiscountConfig,
}

impl ModelConfig {
    /// Build and validate the model.
    pub fn build(&self) -> Result<ModelSpec, ConfigError> {
        let sigma = self.sigma;
        let state = |label: &str| -> Result<State, ConfigError> {
            State::parse(label, sigma)
                .ok_or_else(|| ConfigError::Parse(format!("unknown state label '{label}'")))
        };
        let mut entries = Vec::new();
        for e in &self.intensities {
            let func = parse_func(&e.kind, &e.params)?;
            let clock = if e.duration_dependent {
                Clock::Duration
            } else {
                Clock::Calendar
            };
            entries.push((state(&e.from)?, state(&e.to)?, Rate { func, clock }));
        }
        let intensities = IntensitySpec::new(sigma, entries, self.sup_bound)?;
        let mut sojourn = Vec::new();
        for s in &self.payments.sojourn {
            sojourn.push((state(&s.state)?, parse_func(&s.kind, &s.params)?));
        }
        let mut transition = Vec::new();
        for t in &self.payments.transition {
            transition.push((state(&t.from)?, state(&t.to)?, parse_func(&t.kind, &t.params)?));
        }
        let atoms = self
            .payments
            .discrete
            .iter()
            .map(|d| {
                Ok(Atom {
                    time: d.time,
                    state: state(&d.state)?,
                    amount: d.amount,
                })
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        let payments = PaymentSpec::new(sigma, self.horizon, sojourn, transition, atoms)?;
        let discount = match self.discount.kind.as_str() {
            "constant_rate" => DiscountCurve::ConstantRate(field(&self.discount.params, "rate")?),
            "table" => DiscountCurve::ShortRateTable(
                PwLinear::new(points(&self.discount.params)?).map_err(ConfigError::Parse)?,
            ),
            other => {
                return Err(ConfigError::Parse(format!(
                    "unknown discount kind '{other}'"
                )))
            }
        };
        let initial = if self.initial.is_empty() {
            InitialLaw::default()
        } else {
            InitialLaw {
                weights: self
                    .initial
                    .iter()
                    .map(|e| Ok((state(&e.state)?, e.prob)))
                    .collect::<Result<Vec<_>, ConfigError>>()?,
            }
        };
        let spec = ModelSpec {
            sigma,
            intensities,
            payments,
            discount,
            initial,
            horizon: self.horizon,
        };
        Ok(spec.validate()?)
    }
}

fn default_n_paths() -> usize {
    100_000
}

fn default_seed() -> u64 {
    1
}

fn default_bandwidth() -> f64 {
    0.25
}

fn default_min_effective() -> usize {
    crate::mc::DEFAULT_MIN_EFFECTIVE
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McConfig {
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// window for the occurrence/exposure intensity estimators
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    /// width of the retirement-time bins; defaults to five grid steps
    #[serde(default)]
    pub eta_bin_width: Option<f64>,
    /// width of the last-sojourn bins; defaults to five grid steps
    #[serde(default)]
    pub uh_bin_width: Option<f64>,
    #[serde(default = "default_min_effective")]
    pub min_effective: usize,
    /// comparison times; defaults to `{0, n/4, n/2, 3n/4}`
    #[serde(default)]
    pub compare_times: Option<Vec<f64>>,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            n_paths: default_n_paths(),
            seed: default_seed(),
            bandwidth: default_bandwidth(),
            eta_bin_width: None,
            uh_bin_width: None,
            min_effective: default_min_effective(),
            compare_times: None,
        }
    }
}

fn default_residual_factor() -> f64 {
    10.0
}

fn default_identity_tol() -> f64 {
    1e-3
}

fn default_tower_factor() -> f64 {
    5e-3
}

fn default_z_limit() -> f64 {
    3.0
}

fn default_z_fraction() -> f64 {
    0.99
}

/// Pass/fail thresholds of the run checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckConfig {
    /// residual threshold is `factor * h^2 * reserve scale`
    #[serde(default = "default_residual_factor")]
    pub residual_factor: f64,
    #[serde(default = "default_identity_tol")]
    pub identity_tol: f64,
    /// tower threshold is `factor * max |state-only reserve|`
    #[serde(default = "default_tower_factor")]
    pub tower_factor: f64,
    #[serde(default = "default_z_limit")]
    pub z_limit: f64,
    /// minimum fraction of comparisons within the z limit
    #[serde(default = "default_z_fraction")]
    pub z_fraction: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            residual_factor: default_residual_factor(),
            identity_tol: default_identity_tol(),
            tower_factor: default_tower_factor(),
            z_limit: default_z_limit(),
            z_fraction: default_z_fraction(),
        }
    }
}

fn default_regimes() -> Vec<String> {
    vec!["full".into(), "g1".into(), "g2".into(), "practice".into()]
}

fn default_checks() -> Vec<String> {
    vec![
        "residual".into(),
        "identity".into(),
        "tower".into(),
        "zscore".into(),
    ]
}

fn default_occupancy_floor() -> f64 {
    0.01
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub model: ModelConfig,
    pub grid_step: f64,
    #[serde(default = "default_regimes")]
    pub regimes: Vec<String>,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default = "default_checks")]
    pub checks: Vec<String>,
    #[serde(default)]
    pub check_thresholds: Option<CheckConfig>,
    /// spacing between stored retirement-time slices (time units)
    #[serde(default)]
    pub slice_spacing: Option<f64>,
    /// occupancy gate for the identity check and the state-only residual rows
    #[serde(default = "default_occupancy_floor")]
    pub occupancy_floor: f64,
    /// retirement times whose reserve slices go into the exported CSVs
    #[serde(default)]
    pub export_r_slices: Option<Vec<f64>>,
    #[serde(default)]
    pub dump_paths: bool,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<ScenarioConfig, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn effective_slice_spacing(&self) -> f64 {
        self.slice_spacing
            .unwrap_or_else(|| (self.model.horizon / 400.0).max(self.grid_step / 2.0))
    }

    pub fn effective_eta_bin(&self) -> f64 {
        self.mc.eta_bin_width.unwrap_or(5.0 * self.grid_step)
    }

    pub fn effective_uh_bin(&self) -> f64 {
        self.mc.uh_bin_width.unwrap_or(5.0 * self.grid_step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_model_config_builds() {
        let text = r#"{
            "sigma": 1,
            "horizon": 10.0,
            "sup_bound": 1.0,
            "intensities": [
                {"from": "1", "to": "2", "kind": "constant", "params": {"value": 0.5}},
                {"from": "2", "to": "d", "kind": "constant", "params": {"value": 0.3}}
            ],
            "payments": {
                "sojourn": [{"state": "p", "kind": "constant", "params": {"value": 1.0}}]
            },
            "discount": {"kind": "constant_rate", "params": {"rate": 0.03}}
        }"#;
        let cfg: ModelConfig = serde_json::from_str(text).unwrap();
        let spec = cfg.build().unwrap();
        assert_eq!(spec.sigma, 1);
        let idx_retired = State::Retired(1).ext_index(1);
        assert_eq!(
            spec.intensities
                .rate(State::Pre(1).ext_index(1), idx_retired, 3.0, 0.0),
            0.5
        );
    }

    #[test]
    fn bad_kind_is_rejected() {
        let v: Value = serde_json::json!({"value": 1.0});
        assert!(parse_func("mystery", &v).is_err());
    }

    #[test]
    fn duration_flag_selects_clock() {
        let text = r#"{
            "sigma": 1,
            "horizon": 10.0,
            "sup_bound": 2.0,
            "intensities": [
                {"from": "1", "to": "2", "kind": "constant", "params": {"value": 0.5}},
                {"from": "2", "to": "d", "kind": "piecewise_linear",
                 "params": {"points": [[0.0, 0.0], [10.0, 1.0]]},
                 "duration_dependent": true}
            ],
            "discount": {"kind": "constant_rate", "params": {"rate": 0.0}}
        }"#;
        let cfg: ModelConfig = serde_json::from_str(text).unwrap();
        let spec = cfg.build().unwrap();
        assert!(!spec.intensities.retired_block_markov());
        assert!(spec.intensities.pre_retirement_markov());
        let rate = spec.intensities.rate(
            State::Retired(1).ext_index(1),
            State::Dead.ext_index(1),
            9.0,
            2.0,
        );
        assert!((rate - 0.2).abs() < 1e-12);
    }
}
