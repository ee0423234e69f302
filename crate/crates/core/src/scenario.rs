//! Scenario files: JSON schema, validation and the built-in example.
//!
//! A scenario describes one candidate of a multi-objective control problem
//! together with the direction used for the second-order test. Expressions
//! use `t, x1..xn, u1..um` (dynamics), `x1, x2` (graph height) and
//! `a1..an, b1..bn, T` (endpoints, initial point, terminal point, horizon).

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditions::{EndpointData, Tolerances};
use crate::cones::{Contains, ConvexSet};
use crate::dynamics::{ControlSystem, Horizon};
use crate::exprlang::{self, Expr, ExprError, VarSet};
use crate::geometry::{Manifold, DEFAULT_FD_STEP};
use crate::grid::{GridFn, UniformGrid};

pub const BUILTIN_EXAMPLE: &str = "example-exg";

/// Grid steps per unit of time when a scenario does not fix `steps`.
pub const STEPS_PER_UNIT_TIME: f64 = 2000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("schema error at {pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("expression error at {pointer}: {source}")]
    Expression { pointer: String, source: ExprError },
    #[error("invalid scenario at {pointer}: {message}")]
    Invalid { pointer: String, message: String },
    #[error("unknown builtin `{0}`")]
    UnknownBuiltin(String),
}

impl ScenarioError {
    fn invalid(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        ScenarioError::Invalid {
            pointer: pointer.into(),
            message: message.into(),
        }
    }

    pub fn pointer(&self) -> Option<&str> {
        match self {
            ScenarioError::Schema { pointer, .. } | ScenarioError::Expression { pointer, .. } | ScenarioError::Invalid { pointer, .. } => {
                Some(pointer)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ManifoldSpec {
    Flat { dim: usize },
    Graph { height: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSpec {
    pub state_dim: usize,
    pub control_dim: usize,
    pub f: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HorizonSpec {
    Fixed {
        #[serde(rename = "T")]
        t: f64,
    },
    Free {
        #[serde(rename = "T")]
        t: f64,
    },
}

impl HorizonSpec {
    pub fn length(&self) -> f64 {
        match *self {
            HorizonSpec::Fixed { t } | HorizonSpec::Free { t } => t,
        }
    }

    pub fn with_length(&self, t: f64) -> Self {
        match self {
            HorizonSpec::Fixed { .. } => HorizonSpec::Fixed { t },
            HorizonSpec::Free { .. } => HorizonSpec::Free { t },
        }
    }

    pub fn horizon(&self) -> Horizon {
        match *self {
            HorizonSpec::Fixed { t } => Horizon::Fixed(t),
            HorizonSpec::Free { t } => Horizon::Free(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointSpec {
    pub objectives: Vec<String>,
    pub inequalities: Vec<String>,
    pub equalities: Vec<String>,
}

/// A vector-valued function of time sampled on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SignalSpec {
    Constant { value: Vec<f64> },
    /// Linear interpolation between knots, held constant outside them.
    Piecewise { times: Vec<f64>, values: Vec<Vec<f64>> },
    /// One expression in `t` per component.
    Expr { components: Vec<String> },
}

impl SignalSpec {
    pub fn dim(&self) -> usize {
        match self {
            SignalSpec::Constant { value } => value.len(),
            SignalSpec::Piecewise { values, .. } => values.first().map_or(0, Vec::len),
            SignalSpec::Expr { components } => components.len(),
        }
    }

    fn validate(&self, pointer: &str, dim: usize) -> Result<(), ScenarioError> {
        if self.dim() != dim {
            return Err(ScenarioError::invalid(pointer, format!("expected {dim} components, got {}", self.dim())));
        }
        match self {
            SignalSpec::Constant { value } => finite(&format!("{pointer}/value"), value),
            SignalSpec::Piecewise { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return Err(ScenarioError::invalid(pointer, "`times` and `values` must be nonempty and of equal length"));
                }
                if times.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(ScenarioError::invalid(format!("{pointer}/times"), "knots must be strictly increasing"));
                }
                finite(&format!("{pointer}/times"), times)?;
                for (i, v) in values.iter().enumerate() {
                    if v.len() != dim {
                        return Err(ScenarioError::invalid(format!("{pointer}/values/{i}"), format!("expected {dim} components")));
                    }
                    finite(&format!("{pointer}/values/{i}"), v)?;
                }
                Ok(())
            }
            SignalSpec::Expr { components } => {
                let vars = VarSet::new(["t"]);
                for (i, c) in components.iter().enumerate() {
                    parse_at(&format!("{pointer}/components/{i}"), c, &vars)?;
                }
                Ok(())
            }
        }
    }

    pub fn sample(&self, grid: UniformGrid) -> Result<GridFn, ExprError> {
        match self {
            SignalSpec::Constant { value } => Ok(GridFn::constant(grid, DVector::from_column_slice(value))),
            SignalSpec::Piecewise { times, values } => Ok(GridFn::from_fn(grid, |t| piecewise_linear(times, values, t))),
            SignalSpec::Expr { components } => {
                let vars = VarSet::new(["t"]);
                let exprs = components.iter().map(|c| exprlang::parse(c, &vars)).collect::<Result<Vec<_>, _>>()?;
                let values = grid
                    .times()
                    .into_iter()
                    .map(|t| {
                        let mut v = DVector::zeros(exprs.len());
                        for (k, e) in exprs.iter().enumerate() {
                            v[k] = e.eval(&[t])?;
                        }
                        Ok(v)
                    })
                    .collect::<Result<Vec<_>, ExprError>>()?;
                Ok(GridFn { grid, values })
            }
        }
    }
}

fn piecewise_linear(times: &[f64], values: &[Vec<f64>], t: f64) -> DVector<f64> {
    let last = times.len() - 1;
    if t <= times[0] {
        return DVector::from_column_slice(&values[0]);
    }
    if t >= times[last] {
        return DVector::from_column_slice(&values[last]);
    }
    let k = times.partition_point(|s| *s <= t) - 1;
    let w = (t - times[k]) / (times[k + 1] - times[k]);
    DVector::from_column_slice(&values[k]) * (1.0 - w) + DVector::from_column_slice(&values[k + 1]) * w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateSpec {
    pub x0: Vec<f64>,
    pub control: SignalSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionSpec {
    pub v: SignalSpec,
    /// time direction, free horizon only
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<SignalSpec>,
    /// initial value of the first variation; zero when omitted
    #[serde(default, rename = "X0", skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericsSpec {
    /// total grid steps; derived from the horizon when omitted
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub fd_step: f64,
    pub tolerances: Tolerances,
    pub samples: usize,
    pub seed: u64,
}

impl Default for NumericsSpec {
    fn default() -> Self {
        NumericsSpec {
            steps: None,
            fd_step: DEFAULT_FD_STEP,
            tolerances: Tolerances::default(),
            samples: 10_000,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub manifold: ManifoldSpec,
    pub dynamics: DynamicsSpec,
    pub control_set: ConvexSet,
    pub horizon: HorizonSpec,
    pub endpoints: EndpointSpec,
    pub candidate: CandidateSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub singular_direction: Option<DirectionSpec>,
    #[serde(default)]
    pub numerics: NumericsSpec,
}

fn finite(pointer: &str, values: &[f64]) -> Result<(), ScenarioError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(ScenarioError::invalid(format!("{pointer}/{i}"), "non-finite number")),
        None => Ok(()),
    }
}

fn parse_at(pointer: &str, text: &str, vars: &VarSet) -> Result<Expr, ScenarioError> {
    exprlang::parse(text, vars).map_err(|source| ScenarioError::Expression {
        pointer: pointer.to_string(),
        source,
    })
}

fn to_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            Segment::Enum { variant } => out.push_str(&format!("/{variant}")),
            Segment::Unknown => {}
        }
    }
    out
}

/// Parses and validates scenario JSON text.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
        let mut pointer = to_pointer(e.path());
        let message = e.inner().to_string();
        // point at the missing member itself
        if let Some(field) = message.strip_prefix("missing field `").and_then(|r| r.split('`').next()) {
            pointer.push('/');
            pointer.push_str(field);
        }
        ScenarioError::Schema { pointer, message }
    })?;
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_scenario(&text)
}

/// The worked example: a graph surface over the plane, two objectives, one
/// inequality and two equality constraints, candidate `u = (1, 0)`.
pub fn example_scenario(horizon: f64) -> Scenario {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    Scenario {
        name: BUILTIN_EXAMPLE.into(),
        manifold: ManifoldSpec::Graph {
            height: "ln(1+x1^2+x2^2)".into(),
        },
        dynamics: DynamicsSpec {
            state_dim: 2,
            control_dim: 2,
            f: s(&["u2*ln(1+x1^2+x2^2)^2", "-x1^2+4*x1*u2-u1"]),
        },
        control_set: ConvexSet::ball(vec![0.0, 0.0], 1.0),
        horizon: HorizonSpec::Fixed { t: horizon },
        endpoints: EndpointSpec {
            objectives: s(&["-b1^2", "-ln(1+b1^2+b2^2)"]),
            inequalities: s(&["a2"]),
            equalities: s(&["a1", "b1^3+b2+T"]),
        },
        candidate: CandidateSpec {
            x0: vec![0.0, 0.0],
            control: SignalSpec::Constant { value: vec![1.0, 0.0] },
        },
        singular_direction: Some(DirectionSpec {
            v: SignalSpec::Constant { value: vec![0.0, 1.0] },
            xi: None,
            x0: None,
        }),
        numerics: NumericsSpec::default(),
    }
}

pub fn builtin(name: &str, horizon: Option<f64>) -> Result<Scenario, ScenarioError> {
    match name {
        BUILTIN_EXAMPLE => {
            let scenario = example_scenario(horizon.unwrap_or(1.0));
            scenario.validate()?;
            Ok(scenario)
        }
        other => Err(ScenarioError::UnknownBuiltin(other.to_string())),
    }
}

fn validate_set(set: &ConvexSet, m: usize) -> Result<(), ScenarioError> {
    let p = "/control_set";
    match set {
        ConvexSet::Ball { center, radius } => {
            if center.len() != m {
                return Err(ScenarioError::invalid(format!("{p}/center"), format!("expected {m} components")));
            }
            finite(&format!("{p}/center"), center)?;
            if !(radius.is_finite() && *radius > 0.0) {
                return Err(ScenarioError::invalid(format!("{p}/radius"), "radius must be positive"));
            }
        }
        ConvexSet::Box { lower, upper } => {
            if lower.len() != m || upper.len() != m {
                return Err(ScenarioError::invalid(p, format!("bounds need {m} components")));
            }
            if let Some(i) = (0..m).find(|&i| !(lower[i] <= upper[i])) {
                return Err(ScenarioError::invalid(format!("{p}/lower/{i}"), "lower bound exceeds upper bound"));
            }
        }
        ConvexSet::Polyhedron { a, b } => {
            if a.len() != b.len() {
                return Err(ScenarioError::invalid(format!("{p}/b"), "one bound per row of `a`"));
            }
            for (i, row) in a.iter().enumerate() {
                if row.len() != m {
                    return Err(ScenarioError::invalid(format!("{p}/a/{i}"), format!("expected {m} columns")));
                }
                finite(&format!("{p}/a/{i}"), row)?;
            }
            finite(&format!("{p}/b"), b)?;
        }
    }
    Ok(())
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let n = self.dynamics.state_dim;
        let m = self.dynamics.control_dim;
        if n == 0 || m == 0 {
            return Err(ScenarioError::invalid("/dynamics", "state and control dimensions must be positive"));
        }
        match &self.manifold {
            ManifoldSpec::Flat { dim } => {
                if *dim != n {
                    return Err(ScenarioError::invalid("/manifold/dim", format!("manifold dimension {dim} differs from state dimension {n}")));
                }
            }
            ManifoldSpec::Graph { height } => {
                if n != 2 {
                    return Err(ScenarioError::invalid("/manifold", "graph manifolds are surfaces; state dimension must be 2"));
                }
                parse_at("/manifold/height", height, &VarSet::new(["x1", "x2"]))?;
            }
        }
        if self.dynamics.f.len() != n {
            return Err(ScenarioError::invalid("/dynamics/f", format!("expected {n} components, got {}", self.dynamics.f.len())));
        }
        let vars = ControlSystem::variables(n, m);
        for (i, f) in self.dynamics.f.iter().enumerate() {
            parse_at(&format!("/dynamics/f/{i}"), f, &vars)?;
        }
        validate_set(&self.control_set, m)?;
        let t = self.horizon.length();
        if !(t.is_finite() && t > 0.0) {
            return Err(ScenarioError::invalid("/horizon/T", "horizon must be positive"));
        }
        let vars = EndpointData::variables(n);
        for (key, list) in [
            ("objectives", &self.endpoints.objectives),
            ("inequalities", &self.endpoints.inequalities),
            ("equalities", &self.endpoints.equalities),
        ] {
            for (i, e) in list.iter().enumerate() {
                parse_at(&format!("/endpoints/{key}/{i}"), e, &vars)?;
            }
        }
        if self.endpoints.objectives.is_empty() {
            return Err(ScenarioError::invalid("/endpoints/objectives", "at least one objective is required"));
        }
        if self.candidate.x0.len() != n {
            return Err(ScenarioError::invalid("/candidate/x0", format!("expected {n} components")));
        }
        finite("/candidate/x0", &self.candidate.x0)?;
        self.candidate.control.validate("/candidate/control", m)?;
        if let Some(dir) = &self.singular_direction {
            dir.v.validate("/singular_direction/v", m)?;
            if let Some(xi) = &dir.xi {
                if !matches!(self.horizon, HorizonSpec::Free { .. }) {
                    return Err(ScenarioError::invalid("/singular_direction/xi", "a time direction needs a free horizon"));
                }
                xi.validate("/singular_direction/xi", 1)?;
            }
            if let Some(x0) = &dir.x0 {
                if x0.len() != n {
                    return Err(ScenarioError::invalid("/singular_direction/X0", format!("expected {n} components")));
                }
                finite("/singular_direction/X0", x0)?;
            }
        }
        let num = &self.numerics;
        if let Some(steps) = num.steps {
            if steps < 2 || steps % 2 != 0 {
                return Err(ScenarioError::invalid("/numerics/steps", "steps must be even and at least 2"));
            }
        }
        if !(num.fd_step > 0.0 && num.fd_step < 1.0) {
            return Err(ScenarioError::invalid("/numerics/fd_step", "finite-difference step must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Grid steps for the current horizon, always even.
    pub fn steps(&self) -> usize {
        self.numerics.steps.unwrap_or_else(|| {
            let raw = (STEPS_PER_UNIT_TIME * self.horizon.length()).ceil().max(2.0) as usize;
            raw + raw % 2
        })
    }
}

/// Compiled form of a scenario, ready for the pipeline.
#[derive(Debug, Clone)]
pub struct Problem {
    pub scenario: Scenario,
    pub sys: ControlSystem,
    pub manifold: Manifold,
    pub set: ConvexSet,
    pub horizon: Horizon,
    pub endpoints: EndpointData,
    pub grid: UniformGrid,
    pub x0: DVector<f64>,
    pub controls: GridFn,
    pub direction: Option<GridFn>,
    pub xi: Option<GridFn>,
    pub variation_start: DVector<f64>,
}

impl Problem {
    pub fn build(scenario: &Scenario) -> Result<Self, ScenarioError> {
        scenario.validate()?;
        let n = scenario.dynamics.state_dim;
        let m = scenario.dynamics.control_dim;
        let expr_err = |pointer: &str| {
            let pointer = pointer.to_string();
            move |source| ScenarioError::Expression { pointer, source }
        };
        let manifold = match &scenario.manifold {
            ManifoldSpec::Flat { dim } => Manifold::flat(*dim),
            ManifoldSpec::Graph { height } => Manifold::graph(height).map_err(expr_err("/manifold/height"))?,
        }
        .with_fd_step(scenario.numerics.fd_step);
        let f: Vec<&str> = scenario.dynamics.f.iter().map(String::as_str).collect();
        let sys = ControlSystem::parse(n, m, &f).map_err(expr_err("/dynamics/f"))?;
        fn refs(v: &[String]) -> Vec<&str> {
            v.iter().map(String::as_str).collect()
        }
        let ends = &scenario.endpoints;
        let endpoints = EndpointData::parse(n, &refs(&ends.objectives), &refs(&ends.inequalities), &refs(&ends.equalities))
            .map_err(expr_err("/endpoints"))?;
        let horizon = scenario.horizon.horizon();
        let grid = UniformGrid::new(0.0, horizon.length(), scenario.steps());
        let controls = scenario.candidate.control.sample(grid).map_err(expr_err("/candidate/control"))?;
        let set = scenario.control_set.clone();
        if let Some(i) = (0..grid.len()).find(|&i| !set.contains(&controls.values[i])) {
            return Err(ScenarioError::invalid(
                "/candidate/control",
                format!("control leaves the control set at t = {}", grid.times()[i]),
            ));
        }
        let (direction, xi, variation_start) = match &scenario.singular_direction {
            Some(d) => (
                Some(d.v.sample(grid).map_err(expr_err("/singular_direction/v"))?),
                d.xi.as_ref().map(|x| x.sample(grid)).transpose().map_err(expr_err("/singular_direction/xi"))?,
                d.x0.as_ref().map_or_else(|| DVector::zeros(n), |x| DVector::from_column_slice(x)),
            ),
            None => (None, None, DVector::zeros(n)),
        };
        Ok(Problem {
            scenario: scenario.clone(),
            sys,
            manifold,
            set,
            horizon,
            endpoints,
            grid,
            x0: DVector::from_column_slice(&scenario.candidate.x0),
            controls,
            direction,
            xi,
            variation_start,
        })
    }

    pub fn tolerances(&self) -> Tolerances {
        self.scenario.numerics.tolerances
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "manifold": {"kind": "flat", "dim": 1},
        "dynamics": {"state_dim": 1, "control_dim": 1, "f": ["u1"]},
        "control_set": {"kind": "ball", "center": [0], "radius": 1},
        "horizon": {"kind": "fixed", "T": 1},
        "endpoints": {"objectives": ["b1^2"], "equalities": ["a1"]},
        "candidate": {"x0": [0], "control": {"kind": "constant", "value": [0]}}
    }"#;

    #[test]
    fn minimal_flat_scenario_loads() {
        let s = parse_scenario(MINIMAL).unwrap();
        assert_eq!(s.steps(), 2000);
        assert_eq!(s.numerics.samples, 10_000);
        let p = Problem::build(&s).unwrap();
        assert_eq!(p.grid.len(), 2001);
        assert!(p.direction.is_none());
    }

    #[test]
    fn missing_horizon_is_a_schema_error() {
        let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        v.as_object_mut().unwrap().remove("horizon");
        let err = parse_scenario(&v.to_string()).unwrap_err();
        assert!(matches!(err, ScenarioError::Schema { .. }));
        assert_eq!(err.pointer(), Some("/horizon"));
    }

    #[test]
    fn nested_schema_errors_carry_pointers() {
        let bad = MINIMAL.replace(r#""radius": 1"#, r#""radius": "one""#);
        // tagged enums are buffered, so the pointer stops at the set itself
        assert_eq!(parse_scenario(&bad).unwrap_err().pointer(), Some("/control_set"));
        let bad = MINIMAL.replace(r#""f": ["u1"]"#, r#""f": ["u1"], "g": 1"#);
        assert!(parse_scenario(&bad).unwrap_err().pointer().unwrap().starts_with("/dynamics"));
    }

    #[test]
    fn expression_errors_carry_offsets() {
        let bad = MINIMAL.replace(r#"["b1^2"]"#, r#"["b1^2 + q"]"#);
        match parse_scenario(&bad).unwrap_err() {
            ScenarioError::Expression { pointer, source } => {
                assert_eq!(pointer, "/endpoints/objectives/0");
                assert_eq!(source.offset(), Some(7));
            }
            other => panic!("{other}"),
        }
        let bad = MINIMAL.replace(r#"["u1"]"#, r#"["u1 +"]"#);
        assert_eq!(parse_scenario(&bad).unwrap_err().pointer(), Some("/dynamics/f/0"));
    }

    #[test]
    fn dimension_and_membership_checks() {
        let bad = MINIMAL.replace(r#""x0": [0]"#, r#""x0": [0, 1]"#);
        assert_eq!(parse_scenario(&bad).unwrap_err().pointer(), Some("/candidate/x0"));
        let outside = MINIMAL.replace(r#""value": [0]"#, r#""value": [2]"#);
        let s = parse_scenario(&outside).unwrap();
        assert_eq!(Problem::build(&s).unwrap_err().pointer(), Some("/candidate/control"));
        let graph3 = MINIMAL.replace(r#"{"kind": "flat", "dim": 1}"#, r#"{"kind": "graph", "height": "x1"}"#);
        assert_eq!(parse_scenario(&graph3).unwrap_err().pointer(), Some("/manifold"));
    }

    #[test]
    fn builtin_example() {
        let s = builtin(BUILTIN_EXAMPLE, Some(1.0)).unwrap();
        assert_eq!(s.dynamics.f, vec!["u2*ln(1+x1^2+x2^2)^2", "-x1^2+4*x1*u2-u1"]);
        assert_eq!(s.endpoints.equalities, vec!["a1", "b1^3+b2+T"]);
        assert_eq!(s.endpoints.inequalities, vec!["a2"]);
        assert_eq!(s.endpoints.objectives, vec!["-b1^2", "-ln(1+b1^2+b2^2)"]);
        let p = Problem::build(&s).unwrap();
        assert!(!p.manifold.is_flat());
        assert_eq!(p.endpoints.layout.dim(), 5);
        assert_eq!(builtin(BUILTIN_EXAMPLE, Some(2.0)).unwrap().steps(), 4000);
        // JSON round trip
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(parse_scenario(&text).unwrap(), s);
        assert!(matches!(builtin("nope", None), Err(ScenarioError::UnknownBuiltin(_))));
    }

    #[test]
    fn signals_sample_on_the_grid() {
        let grid = UniformGrid::new(0.0, 1.0, 4);
        let pw = SignalSpec::Piecewise {
            times: vec![0.0, 1.0],
            values: vec![vec![0.0], vec![2.0]],
        };
        assert_eq!(pw.sample(grid).unwrap().values[1][0], 0.5);
        let ex = SignalSpec::Expr { components: vec!["1-t".into()] };
        assert_eq!(ex.sample(grid).unwrap().values[2][0], 0.5);
    }
}
