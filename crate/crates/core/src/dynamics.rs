//! State, adjoint and variational equations along a candidate trajectory.
//!
//! Dynamics are given by chart components `f_k(t, x, u)`. Every partial used
//! below is generated from the same expression trees at construction time.
//! Expression slots are laid out as `[t, x1..xn, u1..um]`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::exprlang::{self, Expr, ExprError, VarSet};
use crate::geometry::{Curve, GeometryError, Manifold, ParallelFrame};
use crate::grid::{hermite_mid, rk4, At, GridField, GridFn, Sweep, UniformGrid};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("state blew up at t = {time} (node {node})")]
    BlowUp { node: usize, time: f64 },
    #[error("grid needs an even number of steps, got {0}")]
    OddSteps(usize),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
}

/// Time horizon of a candidate: fixed `T` or a free horizon optimal at `T̄`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Horizon {
    Fixed(f64),
    Free(f64),
}

impl Horizon {
    pub fn length(&self) -> f64 {
        match *self {
            Horizon::Fixed(t) | Horizon::Free(t) => t,
        }
    }

    pub fn is_free(&self) -> bool {
        matches!(self, Horizon::Free(_))
    }
}

#[derive(Debug, Clone)]
pub struct ControlSystem {
    pub n: usize,
    pub m: usize,
    vars: VarSet,
    f: Vec<Expr>,
    /// `[k][j] = ∂f_k/∂x_j`
    f_x: Vec<Vec<Expr>>,
    /// `[k][a] = ∂f_k/∂u_a`
    f_u: Vec<Vec<Expr>>,
    f_xx: Vec<Vec<Vec<Expr>>>,
    f_xu: Vec<Vec<Vec<Expr>>>,
    f_uu: Vec<Vec<Vec<Expr>>>,
    f_t: Vec<Expr>,
    f_tt: Vec<Expr>,
    f_tx: Vec<Vec<Expr>>,
    f_tu: Vec<Vec<Expr>>,
    pub autonomous: bool,
}

/// All derivatives of `f` at one `(t, x, u)`.
#[derive(Debug, Clone)]
pub struct DynJet {
    pub f: DVector<f64>,
    pub f_x: DMatrix<f64>,
    pub f_u: DMatrix<f64>,
    /// one `n x n` matrix per component
    pub f_xx: Vec<DMatrix<f64>>,
    /// one `n x m` matrix per component
    pub f_xu: Vec<DMatrix<f64>>,
    /// one `m x m` matrix per component
    pub f_uu: Vec<DMatrix<f64>>,
    pub f_t: DVector<f64>,
    pub f_tt: DVector<f64>,
    pub f_tx: DMatrix<f64>,
    pub f_tu: DMatrix<f64>,
}

fn eval_vec(exprs: &[Expr], slots: &[f64]) -> Result<DVector<f64>, ExprError> {
    let mut out = DVector::zeros(exprs.len());
    for (k, e) in exprs.iter().enumerate() {
        out[k] = e.eval(slots)?;
    }
    Ok(out)
}

fn eval_mat(exprs: &[Vec<Expr>], cols: usize, slots: &[f64]) -> Result<DMatrix<f64>, ExprError> {
    let mut out = DMatrix::zeros(exprs.len(), cols);
    for (k, row) in exprs.iter().enumerate() {
        for (j, e) in row.iter().enumerate() {
            if !e.is_zero() {
                out[(k, j)] = e.eval(slots)?;
            }
        }
    }
    Ok(out)
}

impl ControlSystem {
    /// Variable set `[t, x1..xn, u1..um]` used by dynamics expressions.
    pub fn variables(n: usize, m: usize) -> VarSet {
        let mut names = vec!["t".to_string()];
        names.extend((1..=n).map(|i| format!("x{i}")));
        names.extend((1..=m).map(|a| format!("u{a}")));
        VarSet::new(names)
    }

    pub fn parse(n: usize, m: usize, components: &[&str]) -> Result<Self, ExprError> {
        let vars = Self::variables(n, m);
        let f = components
            .iter()
            .map(|s| exprlang::parse(s, &vars))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_exprs(n, m, f))
    }

    /// Builds the system from parsed components; `f.len()` must equal `n`.
    pub fn from_exprs(n: usize, m: usize, f: Vec<Expr>) -> Self {
        assert_eq!(f.len(), n, "one dynamics component per state coordinate");
        let vars = Self::variables(n, m);
        let xs: Vec<usize> = (1..=n).collect();
        let us: Vec<usize> = (n + 1..=n + m).collect();
        let grad = |e: &Expr, slots: &[usize]| slots.iter().map(|&s| e.differentiate(s)).collect::<Vec<_>>();
        let f_x: Vec<Vec<Expr>> = f.iter().map(|e| grad(e, &xs)).collect();
        let f_u: Vec<Vec<Expr>> = f.iter().map(|e| grad(e, &us)).collect();
        let f_xx = f_x.iter().map(|row| row.iter().map(|e| grad(e, &xs)).collect()).collect();
        let f_xu = f_x.iter().map(|row| row.iter().map(|e| grad(e, &us)).collect()).collect();
        let f_uu = f_u.iter().map(|row| row.iter().map(|e| grad(e, &us)).collect()).collect();
        let f_t: Vec<Expr> = f.iter().map(|e| e.differentiate(0)).collect();
        let f_tt = f_t.iter().map(|e| e.differentiate(0)).collect();
        let f_tx = f_t.iter().map(|e| grad(e, &xs)).collect();
        let f_tu = f_t.iter().map(|e| grad(e, &us)).collect();
        let autonomous = f.iter().all(|e| !e.depends_on(0));
        ControlSystem {
            n,
            m,
            vars,
            f,
            f_x,
            f_u,
            f_xx,
            f_xu,
            f_uu,
            f_t,
            f_tt,
            f_tx,
            f_tu,
            autonomous,
        }
    }

    pub fn vars(&self) -> &VarSet {
        &self.vars
    }

    pub fn components(&self) -> &[Expr] {
        &self.f
    }

    pub fn slots(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Vec<f64> {
        let mut s = Vec::with_capacity(1 + self.n + self.m);
        s.push(t);
        s.extend(x.iter());
        s.extend(u.iter());
        s
    }

    pub fn eval(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ExprError> {
        eval_vec(&self.f, &self.slots(t, x, u))
    }

    /// `f`, `∂f/∂x` and `∂f/∂u`.
    pub fn linearize(
        &self,
        t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>), ExprError> {
        let s = self.slots(t, x, u);
        Ok((eval_vec(&self.f, &s)?, eval_mat(&self.f_x, self.n, &s)?, eval_mat(&self.f_u, self.m, &s)?))
    }

    pub fn jet(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Result<DynJet, ExprError> {
        let s = self.slots(t, x, u);
        let (n, m) = (self.n, self.m);
        Ok(DynJet {
            f: eval_vec(&self.f, &s)?,
            f_x: eval_mat(&self.f_x, n, &s)?,
            f_u: eval_mat(&self.f_u, m, &s)?,
            f_xx: self.f_xx.iter().map(|h| eval_mat(h, n, &s)).collect::<Result<_, _>>()?,
            f_xu: self.f_xu.iter().map(|h| eval_mat(h, m, &s)).collect::<Result<_, _>>()?,
            f_uu: self.f_uu.iter().map(|h| eval_mat(h, m, &s)).collect::<Result<_, _>>()?,
            f_t: eval_vec(&self.f_t, &s)?,
            f_tt: eval_vec(&self.f_tt, &s)?,
            f_tx: eval_mat(&self.f_tx, n, &s)?,
            f_tu: eval_mat(&self.f_tu, m, &s)?,
        })
    }
}

/// Candidate trajectory on a uniform grid over `[0, T]`.
///
/// Controls are piecewise linear. Midpoint states are Hermite interpolants
/// of the stored nodes; midpoint velocities are `f` evaluated there.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: UniformGrid,
    pub states: GridField,
    pub controls: GridFn,
    pub horizon: Horizon,
    mid_states: Vec<DVector<f64>>,
    mid_velocities: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.grid.steps
    }

    pub fn control(&self, at: At) -> DVector<f64> {
        self.controls.at(at)
    }

    pub fn time(&self, at: At) -> f64 {
        self.grid.time(at)
    }

    pub fn initial(&self) -> &DVector<f64> {
        self.states.first()
    }

    pub fn terminal(&self) -> &DVector<f64> {
        self.states.last()
    }
}

impl Curve for Trajectory {
    fn grid(&self) -> UniformGrid {
        self.grid
    }

    fn point(&self, at: At) -> DVector<f64> {
        match at {
            At::Node(i) => self.states.values[i].clone(),
            At::Mid(i) => self.mid_states[i].clone(),
        }
    }

    fn velocity(&self, at: At) -> DVector<f64> {
        match at {
            At::Node(i) => self.states.derivs[i].clone(),
            At::Mid(i) => self.mid_velocities[i].clone(),
        }
    }
}

fn node_of(grid: &UniformGrid, at: At) -> usize {
    match at {
        At::Node(i) => i,
        At::Mid(i) => (i + 1).min(grid.steps),
    }
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<(), DynamicsError> {
    if expected == got {
        Ok(())
    } else {
        Err(DynamicsError::Dimension { what, expected, got })
    }
}

/// RK4 integration of `ẋ = f(t, x, u(t))` from `x0` on the controls' grid.
pub fn integrate_state(
    sys: &ControlSystem,
    manifold: &Manifold,
    x0: &DVector<f64>,
    controls: &GridFn,
    horizon: Horizon,
) -> Result<Trajectory, DynamicsError> {
    check_dim("initial state", sys.n, x0.len())?;
    check_dim("manifold", sys.n, manifold.dim())?;
    check_dim("controls", sys.m, controls.dim())?;
    let grid = controls.grid;
    if !grid.steps.is_multiple_of(2) {
        return Err(DynamicsError::OddSteps(grid.steps));
    }
    if (grid.t0 != 0.0) || (grid.t1 - horizon.length()).abs() > 1e-12 * (1.0 + horizon.length()) {
        return Err(DynamicsError::Unsupported(format!(
            "control grid spans [{}, {}] but the horizon is {}",
            grid.t0,
            grid.t1,
            horizon.length()
        )));
    }
    let blow_up = |at: At| DynamicsError::BlowUp {
        node: node_of(&grid, at),
        time: grid.time(at),
    };
    let states = rk4(grid, x0.clone(), Sweep::Forward, |at, x| {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(blow_up(at));
        }
        let dx = sys.eval(grid.time(at), x, &controls.at(at)).map_err(|e| match e {
            ExprError::Domain(_) => blow_up(at),
            other => other.into(),
        })?;
        if !dx.iter().all(|v| v.is_finite()) {
            return Err(blow_up(at));
        }
        Ok(dx)
    })?;
    if let Some(i) = states.values.iter().position(|x| !x.iter().all(|v| v.is_finite())) {
        return Err(DynamicsError::BlowUp { node: i, time: grid.time(At::Node(i)) });
    }
    let h = grid.step();
    let mut mid_states = Vec::with_capacity(grid.steps);
    let mut mid_velocities = Vec::with_capacity(grid.steps);
    for i in 0..grid.steps {
        let xm = hermite_mid(&states.values[i], &states.values[i + 1], &states.derivs[i], &states.derivs[i + 1], h);
        let vm = sys.eval(grid.time(At::Mid(i)), &xm, &controls.at(At::Mid(i)))?;
        mid_states.push(xm);
        mid_velocities.push(vm);
    }
    Ok(Trajectory {
        grid,
        states,
        controls: controls.clone(),
        horizon,
        mid_states,
        mid_velocities,
    })
}

/// Backward RK4 for `ṗ = -(∂f/∂x)^T p` from `p(T) = p_terminal`.
pub fn integrate_adjoint(
    sys: &ControlSystem,
    traj: &Trajectory,
    p_terminal: &DVector<f64>,
) -> Result<GridField, DynamicsError> {
    check_dim("terminal covector", sys.n, p_terminal.len())?;
    rk4(traj.grid, p_terminal.clone(), Sweep::Backward, |at, p| {
        let (_, fx, _) = sys.linearize(traj.time(at), &traj.point(at), &traj.control(at))?;
        Ok::<_, DynamicsError>(-(fx.transpose() * p))
    })
}

/// Forward RK4 for `Ẋ = (∂f/∂x) X + (∂f/∂u) v` from `X(0) = x0`.
pub fn integrate_first_variation(
    sys: &ControlSystem,
    traj: &Trajectory,
    direction: &GridFn,
    x0: &DVector<f64>,
) -> Result<GridField, DynamicsError> {
    check_dim("control direction", sys.m, direction.dim())?;
    check_dim("initial variation", sys.n, x0.len())?;
    rk4(traj.grid, x0.clone(), Sweep::Forward, |at, x| {
        let (_, fx, fu) = sys.linearize(traj.time(at), &traj.point(at), &traj.control(at))?;
        Ok::<_, DynamicsError>(fx * x + fu * direction.at(at))
    })
}

/// Running integral `∫_0^t ξ` of a piecewise-linear scalar, exact at nodes
/// and midpoints.
pub fn running_integral(xi: &GridFn, at: At) -> f64 {
    let grid = xi.grid;
    let h = grid.step();
    let nodes = grid.running_trapezoid(&(0..grid.len()).map(|i| xi.scalar(i)).collect::<Vec<_>>());
    match at {
        At::Node(i) => nodes[i],
        At::Mid(i) => nodes[i] + 0.25 * h * (xi.scalar(i) + xi.at(At::Mid(i))[0]),
    }
}

/// Free-horizon first variation:
/// `Ẋ = f_x X + (S(t)/T̄) f_t + (ξ(t)/T̄) f + f_u v` with `S(t) = ∫_0^t ξ`.
pub fn integrate_first_variation_free_time(
    sys: &ControlSystem,
    traj: &Trajectory,
    xi: &GridFn,
    direction: &GridFn,
    x0: &DVector<f64>,
    t_bar: f64,
) -> Result<GridField, DynamicsError> {
    check_dim("time direction", 1, xi.dim())?;
    check_dim("control direction", sys.m, direction.dim())?;
    check_dim("initial variation", sys.n, x0.len())?;
    let grid = traj.grid;
    let h = grid.step();
    let node_s = grid.running_trapezoid(&(0..grid.len()).map(|i| xi.scalar(i)).collect::<Vec<_>>());
    let s_at = |at: At| match at {
        At::Node(i) => node_s[i],
        At::Mid(i) => node_s[i] + 0.25 * h * (xi.scalar(i) + xi.at(At::Mid(i))[0]),
    };
    rk4(grid, x0.clone(), Sweep::Forward, |at, x| {
        let s = sys.slots(traj.time(at), &traj.point(at), &traj.control(at));
        let f = eval_vec(&sys.f, &s)?;
        let fx = eval_mat(&sys.f_x, sys.n, &s)?;
        let fu = eval_mat(&sys.f_u, sys.m, &s)?;
        let ft = eval_vec(&sys.f_t, &s)?;
        let xi_t = xi.at(at)[0];
        Ok::<_, DynamicsError>(fx * x + ft * (s_at(at) / t_bar) + f * (xi_t / t_bar) + fu * direction.at(at))
    })
}

/// Frame-component coefficients of the second-variation equation at one
/// grid point: `Ẏ = F_x Y + F_u σ + S`.
#[derive(Debug, Clone)]
pub struct SecondVariationCoefficients {
    pub f_x: DMatrix<f64>,
    pub f_u: DMatrix<f64>,
    pub source: DVector<f64>,
}

/// Assembles the coefficients at `at` from the chart jet of `f`, the
/// connection, and the curvature of the manifold.
pub fn second_variation_coefficients(
    sys: &ControlSystem,
    manifold: &Manifold,
    traj: &Trajectory,
    frame: &ParallelFrame,
    at: At,
    x_var: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<SecondVariationCoefficients, DynamicsError> {
    let n = sys.n;
    let q = traj.point(at);
    let jet = sys.jet(traj.time(at), &q, &traj.control(at))?;
    let gamma = manifold.christoffel_at(&q)?;
    let dgamma = manifold.christoffel_grad_at(&q)?;
    let e = frame.basis_at(at);
    let d = frame.dual_at(at);

    // A^k_j = ∂_j f^k + Γ^k_{jm} f^m, the covariant derivative of f
    let a = &jet.f_x + gamma.along(&jet.f);

    // ∇²f(X, X)
    let mut hess_xx = DVector::zeros(n);
    for k in 0..n {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let xij = x_var[i] * x_var[j];
                if xij == 0.0 {
                    continue;
                }
                let mut da = jet.f_xx[k][(i, j)];
                for m in 0..n {
                    da += dgamma.get(k, j, m, i) * jet.f[m] + gamma.get(k, j, m) * jet.f_x[(m, i)];
                }
                let mut term = da;
                for m in 0..n {
                    term += gamma.get(k, i, m) * a[(m, j)] - gamma.get(m, i, j) * a[(k, m)];
                }
                s += xij * term;
            }
        }
        hess_xx[k] = s;
    }

    // ∇_u ∇_x f(X, v)
    let fu_v = &jet.f_u * v;
    let mut mixed = DVector::zeros(n);
    for k in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            let mut inner = (jet.f_xu[k].row(j) * v)[0];
            for m in 0..n {
                inner += gamma.get(k, j, m) * fu_v[m];
            }
            s += x_var[j] * inner;
        }
        mixed[k] = s;
    }

    let uu = DVector::from_fn(n, |k, _| 0.5 * v.dot(&(&jet.f_uu[k] * v)));
    let chart_source = hess_xx * 0.5 + mixed + uu;
    let mut source = &d * chart_source;
    if !manifold.is_flat() {
        if n != 2 {
            return Err(DynamicsError::Unsupported(
                "second variation on curved manifolds needs dimension 2".into(),
            ));
        }
        for i in 0..n {
            let di = d.row(i).transpose();
            source[i] -= 0.5 * manifold.curvature_term(&q, &di, x_var, &jet.f)?;
        }
    }
    Ok(SecondVariationCoefficients {
        f_x: &d * a * &e,
        f_u: &d * &jet.f_u,
        source,
    })
}

/// Second variation in parallel-frame components, starting from the frame
/// components of the chart vector `w0` at `x̄(0)`.
#[allow(clippy::too_many_arguments)]
pub fn integrate_second_variation(
    sys: &ControlSystem,
    manifold: &Manifold,
    traj: &Trajectory,
    frame: &ParallelFrame,
    first_variation: &GridField,
    direction: &GridFn,
    sigma: &GridFn,
    w0: &DVector<f64>,
) -> Result<GridField, DynamicsError> {
    check_dim("second-order control", sys.m, sigma.dim())?;
    check_dim("second-order initial value", sys.n, w0.len())?;
    let y0 = frame.to_frame(At::Node(0), w0);
    rk4(traj.grid, y0, Sweep::Forward, |at, y| {
        let c = second_variation_coefficients(sys, manifold, traj, frame, at, &first_variation.at(at), &direction.at(at))?;
        Ok::<_, DynamicsError>(c.f_x * y + c.f_u * sigma.at(at) + c.source)
    })
}

/// Perturbed flow with initial point `exp_{x̄(0)}(ε X0 + ε² W)` and control
/// `ū + ε v + ε² σ`.
#[allow(clippy::too_many_arguments)]
pub fn flow_perturbed(
    sys: &ControlSystem,
    manifold: &Manifold,
    base: &Trajectory,
    x0_direction: &DVector<f64>,
    w0: &DVector<f64>,
    direction: &GridFn,
    sigma: &GridFn,
    eps: f64,
) -> Result<Trajectory, DynamicsError> {
    let shift = x0_direction * eps + w0 * (eps * eps);
    let start = manifold.geodesic_shoot(base.initial(), &shift, 1.0)?;
    let controls = base.controls.perturbed(eps, direction, sigma);
    integrate_state(sys, manifold, &start, &controls, base.horizon)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use nalgebra::dvector;
    use proptest::prelude::*;

    pub const EXAMPLE_HEIGHT: &str = "ln(1+x1^2+x2^2)";

    pub fn example_system() -> ControlSystem {
        ControlSystem::parse(2, 2, &["u2*ln(1+x1^2+x2^2)^2", "-x1^2+4*x1*u2-u1"]).unwrap()
    }

    pub fn example_trajectory(t: f64, steps: usize) -> (ControlSystem, Manifold, Trajectory) {
        let sys = example_system();
        let m = Manifold::graph(EXAMPLE_HEIGHT).unwrap();
        let grid = UniformGrid::new(0.0, t, steps);
        let u = GridFn::constant(grid, dvector![1.0, 0.0]);
        let traj = integrate_state(&sys, &m, &dvector![0.0, 0.0], &u, Horizon::Fixed(t)).unwrap();
        (sys, m, traj)
    }

    /// Composite Simpson of ln²(1+τ²) on [0, t] with a fine grid.
    pub fn x1_oracle(t: f64) -> f64 {
        let g = UniformGrid::new(0.0, t, 20000);
        let v: Vec<f64> = g.times().iter().map(|s| (1.0 + s * s).ln().powi(2)).collect();
        g.simpson(&v)
    }

    #[test]
    fn example_trajectory_matches_closed_form() {
        let (_, m, traj) = example_trajectory(1.0, 2000);
        let a = crate::geometry::GraphHeight::parse(EXAMPLE_HEIGHT).unwrap();
        let mut err: f64 = 0.0;
        for i in 0..traj.grid.len() {
            let t = traj.time(At::Node(i));
            let x = &traj.states.values[i];
            let height = a.height().eval(&[x[0], x[1]]).unwrap();
            err = err.max(x[0].abs()).max((x[1] + t).abs()).max((height - (1.0 + t * t).ln()).abs());
        }
        assert!(err <= 1e-8, "{err}");
        assert!(m.dim() == 2);
    }

    #[test]
    fn flat_unit_velocity() {
        let sys = ControlSystem::parse(1, 1, &["u1"]).unwrap();
        let grid = UniformGrid::new(0.0, 1.0, 10);
        let traj = integrate_state(&sys, &Manifold::flat(1), &dvector![0.0], &GridFn::constant(grid, dvector![1.0]), Horizon::Fixed(1.0)).unwrap();
        assert!((traj.terminal()[0] - 1.0).abs() < 1e-14);
        assert!(sys.autonomous);
        assert!(!ControlSystem::parse(1, 1, &["t*u1"]).unwrap().autonomous);
    }

    #[test]
    fn rk4_convergence_order() {
        // ẋ = -x + sin(t) u, u = 1 + t: closed form available through a
        // very fine reference run
        let sys = ControlSystem::parse(1, 1, &["-x1 + sin(t)*u1"]).unwrap();
        let run = |n: usize| {
            let grid = UniformGrid::new(0.0, 1.0, n);
            let u = GridFn::from_fn(grid, |t| dvector![1.0 + t]);
            integrate_state(&sys, &Manifold::flat(1), &dvector![1.0], &u, Horizon::Fixed(1.0)).unwrap().terminal()[0]
        };
        let reference = run(20000);
        let e1 = (run(20) - reference).abs();
        let e2 = (run(40) - reference).abs();
        let order = (e1 / e2).log2();
        assert!((3.7..=4.3).contains(&order), "order {order}");
    }

    #[test]
    fn blow_up_is_reported() {
        let sys = ControlSystem::parse(1, 1, &["x1^2"]).unwrap();
        let grid = UniformGrid::new(0.0, 2.0, 200);
        let err = integrate_state(&sys, &Manifold::flat(1), &dvector![1.0], &GridFn::zeros(grid, 1), Horizon::Fixed(2.0)).unwrap_err();
        assert!(matches!(err, DynamicsError::BlowUp { .. }), "{err:?}");
        let odd = UniformGrid::new(0.0, 1.0, 7);
        assert_eq!(
            integrate_state(&sys, &Manifold::flat(1), &dvector![1.0], &GridFn::zeros(odd, 1), Horizon::Fixed(1.0)).unwrap_err(),
            DynamicsError::OddSteps(7)
        );
    }

    #[test]
    fn example_adjoint_is_constant() {
        let (sys, _, traj) = example_trajectory(1.0, 2000);
        let p = integrate_adjoint(&sys, &traj, &dvector![0.0, 0.8]).unwrap();
        let drift = p.values.iter().map(|v| (v - dvector![0.0, 0.8]).amax()).fold(0.0, f64::max);
        assert!(drift <= 1e-9, "{drift}");
        let z = integrate_adjoint(&sys, &traj, &dvector![0.0, 0.0]).unwrap();
        assert!(z.values.iter().all(|v| v.amax() == 0.0));
    }

    #[test]
    fn example_first_variation() {
        for t in [0.5, 1.0, 2.0] {
            let (sys, _, traj) = example_trajectory(t, 2000);
            let v = GridFn::constant(traj.grid, dvector![0.0, 1.0]);
            let x = integrate_first_variation(&sys, &traj, &v, &dvector![0.0, 0.0]).unwrap();
            assert!((x.last()[0] - x1_oracle(t)).abs() < 1e-9 * (1.0 + x1_oracle(t)), "t={t}");
            assert!(x.values.iter().all(|x| x[1].abs() < 1e-12));
        }
        let (sys, _, traj) = example_trajectory(1.0, 2000);
        let x = integrate_first_variation(&sys, &traj, &GridFn::constant(traj.grid, dvector![0.0, 1.0]), &dvector![0.0, 0.0]).unwrap();
        assert!((x.last()[0] - 0.115987).abs() < 1e-4);
        assert!((x.last()[0] - 0.115988788397).abs() < 1e-10);
        let zero = integrate_first_variation(&sys, &traj, &GridFn::zeros(traj.grid, 2), &dvector![0.0, 0.0]).unwrap();
        assert!(zero.values.iter().all(|v| v.amax() == 0.0));
    }

    #[test]
    fn free_time_variation_reduces_correctly() {
        let (sys, _, traj) = example_trajectory(1.0, 400);
        let v = GridFn::constant(traj.grid, dvector![0.0, 1.0]);
        let fixed = integrate_first_variation(&sys, &traj, &v, &dvector![0.0, 0.0]).unwrap();
        let free = integrate_first_variation_free_time(&sys, &traj, &GridFn::zeros(traj.grid, 1), &v, &dvector![0.0, 0.0], 1.0).unwrap();
        for (a, b) in fixed.values.iter().zip(&free.values) {
            assert!((a - b).amax() <= 1e-12);
        }

        // flat ẋ = u, ū ≡ 1, ξ ≡ c: X(t) = c t / T̄
        let flat = ControlSystem::parse(1, 1, &["u1"]).unwrap();
        let t_bar = 2.0;
        let grid = UniformGrid::new(0.0, t_bar, 40);
        let traj = integrate_state(&flat, &Manifold::flat(1), &dvector![0.0], &GridFn::constant(grid, dvector![1.0]), Horizon::Free(t_bar)).unwrap();
        let c = 0.7;
        let x = integrate_first_variation_free_time(&flat, &traj, &GridFn::constant(grid, dvector![c]), &GridFn::zeros(grid, 1), &dvector![0.0], t_bar).unwrap();
        for i in 0..grid.len() {
            let t = grid.time(At::Node(i));
            assert!((x.values[i][0] - c * t / t_bar).abs() < 1e-13);
        }
    }

    #[test]
    fn example_free_time_variation_converges() {
        // ξ ≡ 1, v ≡ 0 on the Example; Richardson against a finer grid
        let run = |n: usize| {
            let (sys, _, traj) = example_trajectory(1.0, n);
            let xi = GridFn::constant(traj.grid, dvector![1.0]);
            integrate_first_variation_free_time(&sys, &traj, &xi, &GridFn::zeros(traj.grid, 2), &dvector![0.0, 0.0], 1.0)
                .unwrap()
                .last()
                .clone()
        };
        let coarse = run(100);
        let fine = run(200);
        assert!((&coarse - &fine).amax() < 1e-9);
        // autonomous: Ẋ = f_x X + f, so X(t) = t f along the straight line
        assert!((fine - dvector![0.0, -1.0]).amax() < 1e-12);
    }

    #[test]
    fn running_integral_is_exact_for_linear_data() {
        let grid = UniformGrid::new(0.0, 1.0, 10);
        let xi = GridFn::from_fn(grid, |t| dvector![2.0 * t]);
        assert!((running_integral(&xi, At::Node(10)) - 1.0).abs() < 1e-14);
        let tm = grid.time(At::Mid(3));
        assert!((running_integral(&xi, At::Mid(3)) - tm * tm).abs() < 1e-14);
    }

    fn pairing_defect(sys: &ControlSystem, traj: &Trajectory, p_t: &DVector<f64>, v: &GridFn, x0: &DVector<f64>) -> f64 {
        let p = integrate_adjoint(sys, traj, p_t).unwrap();
        let x = integrate_first_variation(sys, traj, v, x0).unwrap();
        let h = traj.grid.step();
        let mut worst: f64 = 0.0;
        for i in 1..traj.grid.steps {
            let pair = |k: usize| p.values[k].dot(&x.values[k]);
            let lhs = (pair(i + 1) - pair(i - 1)) / (2.0 * h);
            let (_, _, fu) = sys.linearize(traj.time(At::Node(i)), &traj.states.values[i], &traj.controls.values[i]).unwrap();
            let rhs = (p.values[i].transpose() * fu * v.at(At::Node(i)))[0];
            worst = worst.max((lhs - rhs).abs());
        }
        worst
    }

    #[test]
    fn pairing_identity_is_second_order_in_the_grid() {
        let sys = ControlSystem::parse(2, 1, &["x2*cos(t) + u1^2", "-sin(x1) + x1*u1"]).unwrap();
        let run = |n: usize| {
            let grid = UniformGrid::new(0.0, 1.0, n);
            let u = GridFn::from_fn(grid, |t| dvector![0.5 * t.cos()]);
            let traj = integrate_state(&sys, &Manifold::flat(2), &dvector![0.2, -0.1], &u, Horizon::Fixed(1.0)).unwrap();
            let v = GridFn::from_fn(grid, |t| dvector![1.0 - t]);
            pairing_defect(&sys, &traj, &dvector![0.3, -0.8], &v, &dvector![0.1, 0.4])
        };
        let (e1, e2) = (run(100), run(200));
        assert!(e1 < 1e-3 && (e1 / e2) > 3.5, "{e1} {e2}");

        // v ≡ 0: pairing is conserved
        let (sys, _, traj) = example_trajectory(1.0, 2000);
        let p = integrate_adjoint(&sys, &traj, &dvector![0.4, -0.3]).unwrap();
        let x = integrate_first_variation(&sys, &traj, &GridFn::zeros(traj.grid, 2), &dvector![0.5, 0.2]).unwrap();
        let c0 = p.values[0].dot(&x.values[0]);
        for (pi, xi) in p.values.iter().zip(&x.values) {
            assert!((pi.dot(xi) - c0).abs() < 1e-8);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn pairing_identity_random_scenarios(a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0) {
            let sys = ControlSystem::parse(2, 1, &["x2 + u1", "-x1 + u1^2"]).unwrap();
            let grid = UniformGrid::new(0.0, 1.0, 200);
            let u = GridFn::from_fn(grid, |t| dvector![a * t]);
            let traj = integrate_state(&sys, &Manifold::flat(2), &dvector![b, c], &u, Horizon::Fixed(1.0)).unwrap();
            let v = GridFn::from_fn(grid, |t| dvector![(3.0 * t).sin()]);
            prop_assert!(pairing_defect(&sys, &traj, &dvector![c, a], &v, &dvector![b, 0.0]) < 1e-3);
        }
    }

    fn taylor_errors(
        sys: &ControlSystem,
        m: &Manifold,
        traj: &Trajectory,
        v: &GridFn,
        sigma: &GridFn,
        x0: &DVector<f64>,
        w0: &DVector<f64>,
        eps: f64,
    ) -> (f64, f64) {
        let frame = m.build_parallel_frame(traj).unwrap();
        let x = integrate_first_variation(sys, traj, v, x0).unwrap();
        let y = integrate_second_variation(sys, m, traj, &frame, &x, v, sigma, w0).unwrap();
        let pert = flow_perturbed(sys, m, traj, x0, w0, v, sigma, eps).unwrap();
        let end = At::Node(traj.grid.steps);
        let log = m.log_map(traj.terminal(), pert.terminal()).unwrap();
        let log_frame = frame.to_frame(end, &log);
        let x_frame = frame.to_frame(end, x.last());
        let first = (&log_frame - &x_frame * eps).norm();
        let second = (&log_frame - &x_frame * eps - y.last() * (eps * eps)).norm();
        (first, second)
    }

    #[test]
    fn flat_second_variation_taylor() {
        let sys = ControlSystem::parse(2, 1, &["x2 + u1^2", "-sin(x1) + x1*u1"]).unwrap();
        let m = Manifold::flat(2);
        let grid = UniformGrid::new(0.0, 1.0, 400);
        let u = GridFn::from_fn(grid, |t| dvector![0.5 * t]);
        let traj = integrate_state(&sys, &m, &dvector![0.2, -0.1], &u, Horizon::Fixed(1.0)).unwrap();
        let v = GridFn::from_fn(grid, |t| dvector![1.0 - t]);
        let sigma = GridFn::from_fn(grid, |t| dvector![t * t]);
        let x0 = dvector![0.3, 0.1];
        let w0 = dvector![-0.2, 0.5];
        let (f1, s1) = taylor_errors(&sys, &m, &traj, &v, &sigma, &x0, &w0, 1e-2);
        let (f2, s2) = taylor_errors(&sys, &m, &traj, &v, &sigma, &x0, &w0, 1e-3);
        assert!((80.0..=120.0).contains(&(f1 / f2)), "first {}", f1 / f2);
        assert!((800.0..=1200.0).contains(&(s1 / s2)), "second {}", s1 / s2);

        let zero = integrate_second_variation(
            &ControlSystem::parse(2, 1, &["x2", "-x1 + u1"]).unwrap(),
            &m,
            &integrate_state(&ControlSystem::parse(2, 1, &["x2", "-x1 + u1"]).unwrap(), &m, &dvector![1.0, 0.0], &GridFn::zeros(grid, 1), Horizon::Fixed(1.0)).unwrap(),
            &m.build_parallel_frame(&traj).unwrap(),
            &GridField { grid, values: vec![dvector![0.0, 0.0]; grid.len()], derivs: vec![dvector![0.0, 0.0]; grid.len()] },
            &GridFn::zeros(grid, 1),
            &GridFn::zeros(grid, 1),
            &dvector![0.0, 0.0],
        )
        .unwrap();
        assert!(zero.values.iter().all(|y| y.amax() == 0.0));
    }

    #[test]
    fn example_second_variation_taylor() {
        let (sys, m, traj) = example_trajectory(1.0, 400);
        let v = GridFn::constant(traj.grid, dvector![0.0, 1.0]);
        let sigma = GridFn::constant(traj.grid, dvector![-0.5, 0.0]);
        let x0 = dvector![0.0, 0.0];
        let w0 = dvector![0.0, 0.0];
        let (f1, s1) = taylor_errors(&sys, &m, &traj, &v, &sigma, &x0, &w0, 1e-2);
        let (f2, s2) = taylor_errors(&sys, &m, &traj, &v, &sigma, &x0, &w0, 1e-3);
        assert!((80.0..=120.0).contains(&(f1 / f2)), "first {}", f1 / f2);
        assert!((800.0..=1200.0).contains(&(s1 / s2)), "second {}", s1 / s2);
    }

    #[test]
    fn curved_second_variation_taylor_generic() {
        // exercises the curvature and Christoffel-derivative terms with a
        // nonzero initial displacement
        let sys = ControlSystem::parse(2, 1, &["cos(x2) + u1", "0.5*x1 - u1^2"]).unwrap();
        let m = Manifold::graph(EXAMPLE_HEIGHT).unwrap();
        let grid = UniformGrid::new(0.0, 1.0, 400);
        let u = GridFn::from_fn(grid, |t| dvector![0.3 * t]);
        let traj = integrate_state(&sys, &m, &dvector![0.1, 0.2], &u, Horizon::Fixed(1.0)).unwrap();
        let v = GridFn::from_fn(grid, |t| dvector![1.0 + t]);
        let sigma = GridFn::from_fn(grid, |t| dvector![-t]);
        let x0 = dvector![0.4, -0.3];
        let w0 = dvector![0.2, 0.1];
        let (f1, s1) = taylor_errors(&sys, &m, &traj, &v, &sigma, &x0, &w0, 1e-2);
        let (f2, s2) = taylor_errors(&sys, &m, &traj, &v, &sigma, &x0, &w0, 1e-3);
        assert!((80.0..=120.0).contains(&(f1 / f2)), "first {}", f1 / f2);
        assert!((800.0..=1200.0).contains(&(s1 / s2)), "second {}", s1 / s2);
    }

    #[test]
    fn perturbed_flow_basics() {
        let (sys, m, traj) = example_trajectory(1.0, 400);
        let v = GridFn::constant(traj.grid, dvector![0.0, 1.0]);
        let zero = GridFn::zeros(traj.grid, 2);
        let same = flow_perturbed(&sys, &m, &traj, &dvector![0.0, 0.0], &dvector![0.0, 0.0], &v, &zero, 0.0).unwrap();
        assert_eq!(same.terminal(), traj.terminal());
        let eps = 1e-2;
        let pert = flow_perturbed(&sys, &m, &traj, &dvector![0.0, 0.0], &dvector![0.0, 0.0], &v, &zero, eps).unwrap();
        let x = integrate_first_variation(&sys, &traj, &v, &dvector![0.0, 0.0]).unwrap();
        let diff = pert.terminal() - traj.terminal();
        assert!((diff - x.last() * eps).amax() < 1e-3 * eps);
    }
}
