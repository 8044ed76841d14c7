//! TOML run configuration and its translation into a problem specification.

use std::path::Path;

use serde::{Deserialize, Serialize};
use snctl_core::carleman::{CarlemanParams, TargetCase};
use snctl_core::expr::{parse_expr, Expression};
use snctl_core::hum::PenaltyMode;
use snctl_core::mesh::{Grid, SpaceTimeField, SubdomainMask};
use snctl_core::operators::{Coefficients, ProblemSpec};
use snctl_core::semilinear::{nonlinearity_from_spec, ExprNonlinearity, Nonlinearity};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("{field}: {source}")]
    Expression {
        field: String,
        #[source]
        source: snctl_core::Error,
    },
    #[error("missing required entry {0}")]
    Missing(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] snctl_core::Error),
}

/// A number or an expression in `x`, `y`, `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExprValue {
    Number(f64),
    Text(String),
}

impl Default for ExprValue {
    fn default() -> Self {
        ExprValue::Number(0.0)
    }
}

impl ExprValue {
    pub fn parse(&self, field: &str) -> Result<Expression, ConfigError> {
        match self {
            ExprValue::Number(v) => Ok(Expression::constant(*v, &snctl_core::expr::SPACE_TIME_VARS)),
            ExprValue::Text(s) => parse_expr(s).map_err(|source| ConfigError::Expression {
                field: field.to_string(),
                source,
            }),
        }
    }
}

fn field_of(grid: &Grid, e: &Expression) -> SpaceTimeField {
    SpaceTimeField::from_fn(grid, |x, t| e.eval(&[x[0], x[1], t]))
}

fn spatial_of(grid: &Grid, e: &Expression) -> Vec<f64> {
    grid.sample(|x| e.eval(&[x[0], x[1], 0.0]))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub lengths: Vec<f64>,
    /// Nodes per axis, boundary included.
    pub nx: Vec<usize>,
    pub t_final: f64,
    pub nt: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsConfig {
    #[serde(default)]
    pub a: ExprValue,
    /// One entry per axis; missing entries are zero.
    #[serde(default)]
    pub b: Vec<ExprValue>,
}

pub type BoxBounds = Vec<[f64; 2]>;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub leader: Option<BoxBounds>,
    pub control_1: Option<BoxBounds>,
    pub control_2: Option<BoxBounds>,
    pub observe_1: Option<BoxBounds>,
    pub observe_2: Option<BoxBounds>,
    /// Center of the observation region used by the `carleman` report.
    pub omega0_center: Option<Vec<f64>>,
    pub omega0_radius: Option<f64>,
    pub case: Option<TargetCase>,
}

fn default_lambda() -> f64 {
    2.0
}

fn default_eps() -> Vec<f64> {
    vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5]
}

fn default_eps_control() -> f64 {
    1e-4
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    pub alpha: [f64; 2],
    pub mu: [f64; 2],
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub s: Option<f64>,
    /// Penalty list of the `null-control` sweep.
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    /// Penalty of the `trajectory` and `semilinear` runs.
    #[serde(default = "default_eps_control")]
    pub eps_control: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub u0: ExprValue,
    pub ubar0: Option<ExprValue>,
    #[serde(default)]
    pub target_1: ExprValue,
    #[serde(default)]
    pub target_2: ExprValue,
    /// Leader control for `nash` and `second-order`.
    #[serde(default)]
    pub leader: ExprValue,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub nash_tol: f64,
    pub nash_max_iter: usize,
    pub damping: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub penalty: PenaltyMode,
    pub outer_tol: f64,
    pub outer_max_iter: usize,
    pub outer_damping: f64,
    /// Random samples for `observability` and `carleman`.
    pub samples: usize,
    /// Random directions per follower for `second-order`.
    pub directions: usize,
    pub divergence_source: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            nash_tol: 1e-10,
            nash_max_iter: 200,
            damping: 1.0,
            cg_tol: 1e-10,
            cg_max_iter: 500,
            penalty: PenaltyMode::Quadratic,
            outer_tol: 1e-8,
            outer_max_iter: 30,
            outer_damping: 1.0,
            samples: 50,
            directions: 20,
            divergence_source: false,
        }
    }
}

fn default_kind() -> String {
    "zero".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearityConfig {
    /// `zero`, `tanh`, `grad-tanh` or `expr`.
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default)]
    pub c1: f64,
    #[serde(default)]
    pub c2: f64,
    /// Expression in `u`, `px`, `py` for `kind = "expr"`.
    pub expr: Option<String>,
    pub bound: Option<f64>,
}

impl Default for NonlinearityConfig {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            c1: 0.0,
            c2: 0.0,
            expr: None,
            bound: None,
        }
    }
}

impl NonlinearityConfig {
    pub fn build(&self) -> Result<Box<dyn Nonlinearity>, ConfigError> {
        if self.kind == "expr" {
            let text = self.expr.as_deref().ok_or(ConfigError::Missing("nonlinearity.expr"))?;
            let nl = ExprNonlinearity::parse(text, self.bound).map_err(|source| ConfigError::Expression {
                field: "nonlinearity.expr".into(),
                source,
            })?;
            return Ok(Box::new(nl));
        }
        Ok(nonlinearity_from_spec(&self.kind, self.c1, self.c2, None)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub grid: GridConfig,
    #[serde(default)]
    pub coefficients: CoefficientsConfig,
    #[serde(default)]
    pub geometry: GeometryConfig,
    pub weights: WeightsConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub nonlinearity: NonlinearityConfig,
}

/// Everything a run needs, validated.
pub struct Prepared {
    pub spec: ProblemSpec,
    pub leader: SpaceTimeField,
    pub carleman: CarlemanParams,
    /// Observation region from `omega0_center`, if given.
    pub omega0: Option<(Vec<f64>, SubdomainMask)>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Copy with every expression in normalized form.
    pub fn normalized(&self) -> Result<Self, ConfigError> {
        let norm = |v: &ExprValue, f: &str| -> Result<ExprValue, ConfigError> {
            Ok(match v {
                ExprValue::Number(x) => ExprValue::Number(*x),
                ExprValue::Text(_) => ExprValue::Text(v.parse(f)?.normalized()),
            })
        };
        let mut out = self.clone();
        out.coefficients.a = norm(&self.coefficients.a, "coefficients.a")?;
        out.coefficients.b = self
            .coefficients
            .b
            .iter()
            .map(|b| norm(b, "coefficients.b"))
            .collect::<Result<_, _>>()?;
        out.data.u0 = norm(&self.data.u0, "data.u0")?;
        out.data.ubar0 = self.data.ubar0.as_ref().map(|v| norm(v, "data.ubar0")).transpose()?;
        out.data.target_1 = norm(&self.data.target_1, "data.target_1")?;
        out.data.target_2 = norm(&self.data.target_2, "data.target_2")?;
        out.data.leader = norm(&self.data.leader, "data.leader")?;
        Ok(out)
    }

    /// Parses every expression and builds the problem; nothing is solved.
    pub fn prepare(&self) -> Result<Prepared, ConfigError> {
        let g = &self.grid;
        let grid = Grid::new(g.dim, &g.lengths, &g.nx, g.t_final, g.nt)?;
        let geo = &self.geometry;
        let mask = |b: &Option<BoxBounds>, name: &'static str| -> Result<SubdomainMask, ConfigError> {
            let b = b.as_ref().ok_or(ConfigError::Missing(name))?;
            let bounds: Vec<(f64, f64)> = b.iter().map(|r| (r[0], r[1])).collect();
            SubdomainMask::from_box(&grid, &bounds).map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))
        };
        let leader_mask = mask(&geo.leader, "geometry.leader")?;
        let control = [mask(&geo.control_1, "geometry.control_1")?, mask(&geo.control_2, "geometry.control_2")?];
        let observe = [mask(&geo.observe_1, "geometry.observe_1")?, mask(&geo.observe_2, "geometry.observe_2")?];

        if self.coefficients.b.len() > grid.dim() {
            return Err(ConfigError::Invalid(format!(
                "coefficients.b has {} entries for a {}-dimensional grid",
                self.coefficients.b.len(),
                grid.dim()
            )));
        }
        let a = field_of(&grid, &self.coefficients.a.parse("coefficients.a")?);
        let mut b = Vec::with_capacity(grid.dim());
        for axis in 0..grid.dim() {
            let e = match self.coefficients.b.get(axis) {
                Some(v) => v.parse("coefficients.b")?,
                None => ExprValue::default().parse("coefficients.b")?,
            };
            b.push(field_of(&grid, &e));
        }
        let d = &self.data;
        let ubar0 = match &d.ubar0 {
            Some(v) => Some(spatial_of(&grid, &v.parse("data.ubar0")?)),
            None => None,
        };
        let spec = ProblemSpec {
            coeffs: Coefficients { a, b },
            leader: leader_mask,
            control,
            observe,
            alpha: self.weights.alpha,
            mu: self.weights.mu,
            targets: [
                field_of(&grid, &d.target_1.parse("data.target_1")?),
                field_of(&grid, &d.target_2.parse("data.target_2")?),
            ],
            u0: spatial_of(&grid, &d.u0.parse("data.u0")?),
            ubar0,
            grid: grid.clone(),
        };
        spec.validate()?;
        let leader = field_of(&grid, &d.leader.parse("data.leader")?);

        let w = &self.weights;
        if !(w.lambda > 0.0) || w.s.is_some_and(|s| !(s > 0.0)) {
            return Err(ConfigError::Invalid("weights.lambda and weights.s must be positive".into()));
        }
        let omega0 = match &geo.omega0_center {
            Some(c) => {
                if c.len() != grid.dim() {
                    return Err(ConfigError::Invalid("geometry.omega0_center has the wrong length".into()));
                }
                let r = geo.omega0_radius.unwrap_or(0.1 * grid.lengths()[0]);
                let bounds: Vec<(f64, f64)> = c.iter().map(|&x| (x - r, x + r)).collect();
                let m = SubdomainMask::from_box(&grid, &bounds)
                    .map_err(|e| ConfigError::Invalid(format!("geometry.omega0_center: {e}")))?;
                Some((c.clone(), m))
            }
            None => None,
        };
        Ok(Prepared {
            spec,
            leader,
            carleman: CarlemanParams {
                lambda: w.lambda,
                s: w.s,
            },
            omega0,
        })
    }
}
