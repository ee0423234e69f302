//! Hamiltonian and endpoint-Lagrangian calculus, multiplier cones, the
//! first-order and singular-direction checks, the second-order functional
//! and the non-optimality certificate.
//!
//! Multipliers are ordered `(objectives, inequality constraints, equality
//! constraints)`. Endpoint expressions use the variables `a1..an` (initial
//! chart point), `b1..bn` (terminal chart point) and `T` (horizon).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cones::{self, AffineSup, ConeError, Contains, ConvexSet, Extended, ShiftedConeRepr, SupportMethod};
use crate::dynamics::{self, ControlSystem, DynamicsError, Trajectory};
use crate::exec::{map_ordered, Execution};
use crate::exprlang::{self, Expr, ExprError, VarSet};
use crate::geometry::{Curve, GeometryError, Manifold};
use crate::grid::{At, GridField, GridFn, UniformGrid};

/// Above this multiplier dimension extreme rays are not enumerated and the
/// family is explored by sampling only.
pub const MAX_EXACT_MULTIPLIER_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConditionsError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Cone(#[from] ConeError),
    #[error("direction leaves the adjacent cone at t = {time}")]
    DirectionOutsideCone { time: f64 },
    #[error("singular-direction endpoint condition fails for {label}: value {value:e}")]
    EndpointCondition { label: String, value: f64 },
    #[error("multiplier has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
}

/// Sizes of the multiplier blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MultiplierLayout {
    pub objectives: usize,
    pub inequalities: usize,
    pub equalities: usize,
}

impl MultiplierLayout {
    pub fn dim(&self) -> usize {
        self.objectives + self.inequalities + self.equalities
    }

    pub fn is_equality(&self, i: usize) -> bool {
        i >= self.objectives + self.inequalities
    }

    pub fn is_inequality(&self, i: usize) -> bool {
        i >= self.objectives && !self.is_equality(i)
    }

    pub fn labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend((1..=self.objectives).map(|i| format!("objective{i}")));
        out.extend((1..=self.inequalities).map(|i| format!("inequality{i}")));
        out.extend((1..=self.equalities).map(|i| format!("equality{i}")));
        out
    }
}

/// Objectives, inequality and equality constraints on the endpoints, with
/// generated first and second partials.
#[derive(Debug, Clone)]
pub struct EndpointData {
    pub n: usize,
    pub layout: MultiplierLayout,
    vars: VarSet,
    components: Vec<Expr>,
    grad: Vec<Vec<Expr>>,
    hess: Vec<Vec<Vec<Expr>>>,
}

impl EndpointData {
    pub fn variables(n: usize) -> VarSet {
        let mut names: Vec<String> = (1..=n).map(|i| format!("a{i}")).collect();
        names.extend((1..=n).map(|i| format!("b{i}")));
        names.push("T".into());
        VarSet::new(names)
    }

    pub fn parse(n: usize, objectives: &[&str], inequalities: &[&str], equalities: &[&str]) -> Result<Self, ExprError> {
        let vars = Self::variables(n);
        let parse_all = |list: &[&str]| list.iter().map(|s| exprlang::parse(s, &vars)).collect::<Result<Vec<_>, _>>();
        let obj = parse_all(objectives)?;
        let ineq = parse_all(inequalities)?;
        let eq = parse_all(equalities)?;
        Ok(Self::from_exprs(n, obj, ineq, eq))
    }

    pub fn from_exprs(n: usize, objectives: Vec<Expr>, inequalities: Vec<Expr>, equalities: Vec<Expr>) -> Self {
        let layout = MultiplierLayout {
            objectives: objectives.len(),
            inequalities: inequalities.len(),
            equalities: equalities.len(),
        };
        let components: Vec<Expr> = objectives.into_iter().chain(inequalities).chain(equalities).collect();
        let slots = 2 * n + 1;
        let grad: Vec<Vec<Expr>> = components.iter().map(|e| (0..slots).map(|s| e.differentiate(s)).collect()).collect();
        let hess = grad
            .iter()
            .map(|row| row.iter().map(|g| (0..slots).map(|s| g.differentiate(s)).collect()).collect())
            .collect();
        EndpointData {
            n,
            layout,
            vars: Self::variables(n),
            components,
            grad,
            hess,
        }
    }

    pub fn vars(&self) -> &VarSet {
        &self.vars
    }

    pub fn components(&self) -> &[Expr] {
        &self.components
    }

    fn slots(&self, q0: &DVector<f64>, qt: &DVector<f64>, horizon: f64) -> Vec<f64> {
        let mut s: Vec<f64> = q0.iter().chain(qt.iter()).copied().collect();
        s.push(horizon);
        s
    }

    pub fn values(&self, q0: &DVector<f64>, qt: &DVector<f64>, horizon: f64) -> Result<DVector<f64>, ExprError> {
        let s = self.slots(q0, qt, horizon);
        let mut out = DVector::zeros(self.components.len());
        for (i, e) in self.components.iter().enumerate() {
            out[i] = e.eval(&s)?;
        }
        Ok(out)
    }

    /// Objectives and inequality constraints with `|φ_i| ≤ tol`.
    pub fn active_set(&self, q0: &DVector<f64>, qt: &DVector<f64>, horizon: f64, tol: f64) -> Result<Vec<bool>, ExprError> {
        let v = self.values(q0, qt, horizon)?;
        Ok((0..self.layout.dim())
            .map(|i| {
                if i < self.layout.objectives {
                    true
                } else if self.layout.is_inequality(i) {
                    v[i].abs() <= tol
                } else {
                    false
                }
            })
            .collect())
    }

    /// `∇₁c(X(0)) + ∇₂c(X(T))` for every component `c`.
    pub fn first_order_terms(
        &self,
        q0: &DVector<f64>,
        qt: &DVector<f64>,
        horizon: f64,
        x0: &DVector<f64>,
        xt: &DVector<f64>,
    ) -> Result<DVector<f64>, ExprError> {
        let s = self.slots(q0, qt, horizon);
        let n = self.n;
        let mut out = DVector::zeros(self.components.len());
        for (c, g) in self.grad.iter().enumerate() {
            let mut v = 0.0;
            for i in 0..n {
                if x0[i] != 0.0 {
                    v += g[i].eval(&s)? * x0[i];
                }
                if xt[i] != 0.0 {
                    v += g[n + i].eval(&s)? * xt[i];
                }
            }
            out[c] = v;
        }
        Ok(out)
    }
}

/// Derivatives of `L_ℓ(x1, x2) = (φ₀, φ, ψ) · ℓ` at a pair of endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianDerivs {
    pub value: f64,
    /// differential in the initial point
    pub d1: DVector<f64>,
    /// differential in the terminal point
    pub d2: DVector<f64>,
    pub h11: DMatrix<f64>,
    pub h12: DMatrix<f64>,
    pub h22: DMatrix<f64>,
}

impl LagrangianDerivs {
    /// `∇₁²L(X0, X0) + 2∇₂∇₁L(X0, XT) + ∇₂²L(XT, XT)` with Christoffel
    /// corrections in the pure slots and plain mixed partials across them.
    pub fn second_differential(
        &self,
        manifold: &Manifold,
        q0: &DVector<f64>,
        qt: &DVector<f64>,
        x0: &DVector<f64>,
        xt: &DVector<f64>,
    ) -> Result<f64, GeometryError> {
        let first = manifold.covariant_hessian(q0, &self.d1, &self.h11, x0, x0)?;
        let last = manifold.covariant_hessian(qt, &self.d2, &self.h22, xt, xt)?;
        Ok(first + 2.0 * x0.dot(&(&self.h12 * xt)) + last)
    }
}

pub fn lagrangian_derivs(
    endpoints: &EndpointData,
    multiplier: &DVector<f64>,
    q0: &DVector<f64>,
    qt: &DVector<f64>,
    horizon: f64,
) -> Result<LagrangianDerivs, ConditionsError> {
    let d = endpoints.layout.dim();
    if multiplier.len() != d {
        return Err(ConditionsError::Dimension { expected: d, got: multiplier.len() });
    }
    let n = endpoints.n;
    let s = endpoints.slots(q0, qt, horizon);
    let mut out = LagrangianDerivs {
        value: 0.0,
        d1: DVector::zeros(n),
        d2: DVector::zeros(n),
        h11: DMatrix::zeros(n, n),
        h12: DMatrix::zeros(n, n),
        h22: DMatrix::zeros(n, n),
    };
    for c in 0..d {
        let l = multiplier[c];
        if l == 0.0 {
            continue;
        }
        out.value += l * endpoints.components[c].eval(&s)?;
        let g = &endpoints.grad[c];
        let h = &endpoints.hess[c];
        for i in 0..n {
            out.d1[i] += l * g[i].eval(&s)?;
            out.d2[i] += l * g[n + i].eval(&s)?;
            for k in 0..n {
                out.h11[(i, k)] += l * h[i][k].eval(&s)?;
                out.h12[(i, k)] += l * h[i][n + k].eval(&s)?;
                out.h22[(i, k)] += l * h[n + i][n + k].eval(&s)?;
            }
        }
    }
    Ok(out)
}

/// `H = p(f)` and its derivatives at one point. `h_xx` is the covariant
/// Hessian; mixed blocks are plain partials.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianDerivs {
    pub h: f64,
    pub h_x: DVector<f64>,
    pub h_u: DVector<f64>,
    pub h_xx: DMatrix<f64>,
    pub h_uu: DMatrix<f64>,
    pub h_xu: DMatrix<f64>,
    pub h_t: f64,
    pub h_tt: f64,
    pub h_tx: DVector<f64>,
    pub h_tu: DVector<f64>,
    /// the dynamics `f` at the same point
    pub f: DVector<f64>,
}

pub fn hamiltonian_derivs(
    sys: &ControlSystem,
    manifold: &Manifold,
    t: f64,
    q: &DVector<f64>,
    p: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<HamiltonianDerivs, ConditionsError> {
    let jet = sys.jet(t, q, u)?;
    let (n, m) = (sys.n, sys.m);
    let h_x = jet.f_x.transpose() * p;
    let mut h_xx = DMatrix::zeros(n, n);
    let mut h_xu = DMatrix::zeros(n, m);
    let mut h_uu = DMatrix::zeros(m, m);
    for k in 0..n {
        if p[k] != 0.0 {
            h_xx += &jet.f_xx[k] * p[k];
            h_xu += &jet.f_xu[k] * p[k];
            h_uu += &jet.f_uu[k] * p[k];
        }
    }
    let gamma = manifold.christoffel_at(q)?;
    if !gamma.is_zero() {
        for i in 0..n {
            for l in 0..n {
                let corr: f64 = (0..n).map(|e| gamma.get(e, l, i) * h_x[e]).sum();
                h_xx[(i, l)] -= corr;
            }
        }
    }
    Ok(HamiltonianDerivs {
        h: p.dot(&jet.f),
        h_u: jet.f_u.transpose() * p,
        h_x,
        h_xx,
        h_uu,
        h_xu,
        h_t: p.dot(&jet.f_t),
        h_tt: p.dot(&jet.f_tt),
        h_tx: jet.f_tx.transpose() * p,
        h_tu: jet.f_tu.transpose() * p,
        f: jet.f,
    })
}

/// Adjoints for the unit multipliers; every adjoint is a linear combination.
#[derive(Debug, Clone)]
pub struct AdjointBasis {
    pub layout: MultiplierLayout,
    pub fields: Vec<GridField>,
    /// column `e` is `p_e(0) + d₁L_e`
    pub defect: DMatrix<f64>,
}

impl AdjointBasis {
    pub fn build(sys: &ControlSystem, traj: &Trajectory, endpoints: &EndpointData) -> Result<Self, ConditionsError> {
        let d = endpoints.layout.dim();
        let n = sys.n;
        let horizon = traj.horizon.length();
        let (q0, qt) = (traj.initial(), traj.terminal());
        let mut fields = Vec::with_capacity(d);
        let mut defect = DMatrix::zeros(n, d);
        for e in 0..d {
            let unit = DVector::from_fn(d, |i, _| if i == e { 1.0 } else { 0.0 });
            let lag = lagrangian_derivs(endpoints, &unit, q0, qt, horizon)?;
            let p = dynamics::integrate_adjoint(sys, traj, &lag.d2)?;
            defect.set_column(e, &(p.first() + &lag.d1));
            fields.push(p);
        }
        Ok(AdjointBasis {
            layout: endpoints.layout,
            fields,
            defect,
        })
    }

    /// Adjoint of the multiplier `ℓ`.
    pub fn adjoint(&self, multiplier: &DVector<f64>) -> GridField {
        let first = &self.fields[0];
        let n = first.dim();
        let len = first.grid.len();
        let mut values = vec![DVector::zeros(n); len];
        let mut derivs = vec![DVector::zeros(n); len];
        for (e, field) in self.fields.iter().enumerate() {
            let l = multiplier[e];
            if l == 0.0 {
                continue;
            }
            for i in 0..len {
                values[i] += &field.values[i] * l;
                derivs[i] += &field.derivs[i] * l;
            }
        }
        GridField {
            grid: first.grid,
            values,
            derivs,
        }
    }
}

/// Polyhedral cone of multipliers `{ℓ : Aℓ = 0, sign pattern}`.
#[derive(Debug, Clone)]
pub struct MultiplierFamily {
    pub layout: MultiplierLayout,
    /// index set `I_A` (objectives and active inequalities)
    pub active: Vec<bool>,
    /// components forced to zero (inactive inequalities and any restriction)
    pub forced_zero: Vec<bool>,
    pub equality: DMatrix<f64>,
    /// orthonormal basis of the admissible null space, one column each
    pub nullspace: DMatrix<f64>,
    /// extreme rays with `|ℓ|₁ = 1`
    pub rays: Vec<DVector<f64>>,
    /// lineality directions with `|ℓ|₁ = 1`; both signs belong to the family
    pub lineality: Vec<DVector<f64>>,
    pub exact: bool,
    pub warnings: Vec<String>,
}

fn l1_normalize(v: DVector<f64>) -> DVector<f64> {
    let s = v.iter().map(|x| x.abs()).sum::<f64>();
    v / s
}

impl MultiplierFamily {
    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.nullspace.ncols() == 0 || (self.exact && self.rays.is_empty() && self.lineality.is_empty())
    }

    /// Rays together with both orientations of each lineality direction.
    pub fn generators(&self) -> Vec<DVector<f64>> {
        let mut out = self.rays.clone();
        for l in &self.lineality {
            out.push(l.clone());
            out.push(-l);
        }
        out
    }

    /// Sign pattern and forced zeros, to `tol`.
    pub fn satisfies_signs(&self, ell: &DVector<f64>, tol: f64) -> bool {
        (0..self.dim()).all(|i| {
            if self.forced_zero[i] {
                ell[i].abs() <= tol
            } else if self.active[i] {
                ell[i] <= tol
            } else {
                true
            }
        })
    }

    pub fn equality_defect(&self, ell: &DVector<f64>) -> f64 {
        (&self.equality * ell).amax()
    }

    /// Deterministic sample of the cross-section `{ℓ in the family, |ℓ|₁ = 1}`.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        if self.is_empty() || count == 0 {
            return out;
        }
        let gens = self.generators();
        if self.exact {
            let mut attempts = 0;
            while out.len() < count && attempts < 10 * count {
                attempts += 1;
                let mut ell = DVector::zeros(self.dim());
                for g in &gens {
                    let w: f64 = -(1.0 - rng.random::<f64>()).ln();
                    ell += g * w;
                }
                if ell.amax() > 1e-12 {
                    out.push(l1_normalize(ell));
                }
            }
        } else {
            let q = self.nullspace.ncols();
            let mut attempts = 0;
            while out.len() < count && attempts < 200 * count {
                attempts += 1;
                let y = DVector::from_fn(q, |_, _| rng.random_range(-1.0..1.0));
                let ell = &self.nullspace * y;
                if ell.amax() > 1e-12 && self.satisfies_signs(&ell, 0.0) {
                    out.push(l1_normalize(ell));
                }
            }
        }
        out
    }
}

/// Orthonormal basis of the null space of `a`, columns as vectors.
fn nullspace(a: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let cols = a.ncols();
    if cols == 0 {
        return DMatrix::zeros(0, 0);
    }
    let rows = a.nrows().max(cols);
    let mut padded = DMatrix::zeros(rows, cols);
    padded.view_mut((0, 0), (a.nrows(), cols)).copy_from(a);
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let scale = a.amax().max(1.0);
    let basis: Vec<DVector<f64>> = (0..cols)
        .filter(|&i| svd.singular_values[i] <= tol * scale)
        .map(|i| vt.row(i).transpose())
        .collect();
    if basis.is_empty() {
        DMatrix::zeros(cols, 0)
    } else {
        DMatrix::from_columns(&basis)
    }
}

fn rank(rows: &[&DVector<f64>], tol: f64) -> usize {
    if rows.is_empty() {
        return 0;
    }
    let m = DMatrix::from_rows(&rows.iter().map(|r| r.transpose()).collect::<Vec<_>>());
    m.svd(false, false).singular_values.iter().filter(|s| **s > tol).count()
}

/// Generators of `{y : g_k · y ≤ 0}` by the double-description method:
/// extreme rays of the pointed part plus a lineality basis.
pub(crate) fn cone_generators(constraints: &[DVector<f64>], dim: usize, tol: f64) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mut lineality: Vec<DVector<f64>> = (0..dim).map(|i| DVector::from_fn(dim, |k, _| if k == i { 1.0 } else { 0.0 })).collect();
    let mut rays: Vec<DVector<f64>> = Vec::new();
    let mut processed: Vec<DVector<f64>> = Vec::new();
    for g in constraints {
        let norm = g.norm();
        if norm <= tol {
            continue;
        }
        let g = g / norm;
        if let Some(pos) = lineality.iter().position(|l| g.dot(l).abs() > tol) {
            let mut pivot = lineality.remove(pos);
            if g.dot(&pivot) > 0.0 {
                pivot = -pivot;
            }
            let gp = g.dot(&pivot);
            for l in lineality.iter_mut() {
                let c = g.dot(l) / gp;
                *l -= &pivot * c;
            }
            for r in rays.iter_mut() {
                let c = g.dot(r) / gp;
                *r -= &pivot * c;
            }
            rays.push(pivot);
        } else {
            let pointed_dim = dim - lineality.len();
            let value = |r: &DVector<f64>| g.dot(r) / r.norm();
            let (pos, rest): (Vec<_>, Vec<_>) = rays.into_iter().partition(|r| value(r) > tol);
            let neg: Vec<&DVector<f64>> = rest.iter().filter(|r| value(r) < -tol).collect();
            let mut next: Vec<DVector<f64>> = rest.to_vec();
            for p in &pos {
                for nr in &neg {
                    let tight: Vec<&DVector<f64>> = processed
                        .iter()
                        .filter(|c| (c.dot(p) / p.norm()).abs() <= tol && (c.dot(nr) / nr.norm()).abs() <= tol)
                        .collect();
                    if pointed_dim >= 2 && rank(&tight, tol) == pointed_dim - 2 {
                        next.push(*nr * g.dot(p) - p * g.dot(nr));
                    }
                }
            }
            rays = next;
        }
        processed.push(g);
        rays = rays
            .into_iter()
            .filter(|r| r.norm() > tol)
            .map(|r| {
                let n = r.norm();
                r / n
            })
            .collect();
        let mut unique: Vec<DVector<f64>> = Vec::new();
        for r in rays {
            if !unique.iter().any(|u| (u - &r).norm() <= 1e3 * tol) {
                unique.push(r);
            }
        }
        rays = unique;
    }
    (rays, lineality)
}

/// Tolerances for the multiplier and singular-direction stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// endpoint constraint violation accepted for an admissible candidate
    pub admissibility: f64,
    /// `|φ_i| ≤ active` marks an active inequality
    pub active: f64,
    /// `|∇c(X)| ≤ refined` marks an index of the refined active set
    pub refined: f64,
    /// transversality defect allowed in the null space
    pub equality: f64,
    pub first_order: f64,
    pub singular: f64,
    pub margin: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            admissibility: 1e-6,
            active: 1e-8,
            refined: 1e-7,
            equality: 1e-7,
            first_order: 1e-7,
            singular: 1e-7,
            margin: 1e-6,
        }
    }
}

/// Multiplier family for a candidate trajectory. `allowed` restricts which
/// objective and inequality multipliers may be nonzero (the refined active
/// set); equality multipliers are never restricted.
pub fn solve_multiplier_cone(
    traj: &Trajectory,
    endpoints: &EndpointData,
    basis: &AdjointBasis,
    allowed: Option<&[bool]>,
    tol: &Tolerances,
) -> Result<MultiplierFamily, ConditionsError> {
    let layout = endpoints.layout;
    let d = layout.dim();
    let active = endpoints.active_set(traj.initial(), traj.terminal(), traj.horizon.length(), tol.active)?;
    let forced_zero: Vec<bool> = (0..d)
        .map(|i| {
            if layout.is_equality(i) {
                false
            } else if layout.is_inequality(i) && !active[i] {
                true
            } else {
                allowed.is_some_and(|a| !a[i])
            }
        })
        .collect();
    let free: Vec<usize> = (0..d).filter(|&i| !forced_zero[i]).collect();
    let a_free = DMatrix::from_columns(&free.iter().map(|&i| basis.defect.column(i).into_owned()).collect::<Vec<_>>());
    let a_free = if free.is_empty() { DMatrix::zeros(basis.defect.nrows(), 0) } else { a_free };
    let z_free = nullspace(&a_free, tol.equality);
    let q = z_free.ncols();
    let mut z = DMatrix::zeros(d, q);
    for (row, &i) in free.iter().enumerate() {
        z.set_row(i, &z_free.row(row));
    }
    let sign_rows: Vec<usize> = (0..d).filter(|&i| active[i] && !forced_zero[i] && !layout.is_equality(i)).collect();
    let mut warnings = Vec::new();
    let exact = d <= MAX_EXACT_MULTIPLIER_DIM;
    let (rays, lineality) = if q == 0 {
        (Vec::new(), Vec::new())
    } else if exact {
        let constraints: Vec<DVector<f64>> = sign_rows.iter().map(|&i| z.row(i).transpose()).collect();
        let (ry, ly) = cone_generators(&constraints, q, 1e-10);
        let to_ell = |y: &DVector<f64>| {
            let mut ell = &z * y;
            ell.iter_mut().for_each(|x| {
                if x.abs() < 1e-13 {
                    *x = 0.0
                }
            });
            l1_normalize(ell)
        };
        (ry.iter().map(to_ell).collect(), ly.iter().map(to_ell).collect())
    } else {
        warnings.push(format!(
            "multiplier dimension {d} exceeds {MAX_EXACT_MULTIPLIER_DIM}; extreme rays not enumerated, using a sampled cross-section"
        ));
        (Vec::new(), Vec::new())
    };
    Ok(MultiplierFamily {
        layout,
        active,
        forced_zero,
        equality: basis.defect.clone(),
        nullspace: z,
        rays,
        lineality,
        exact,
        warnings,
    })
}

/// Node-wise sup of `∂H/∂u · v` over the adjacent cone intersected with the
/// unit ball.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FirstOrderProfile {
    pub per_node: Vec<f64>,
    pub max_violation: f64,
    pub method: SupportMethod,
    pub holds: bool,
}

pub fn check_first_order(
    sys: &ControlSystem,
    traj: &Trajectory,
    adjoint: &GridField,
    set: &ConvexSet,
    tol: f64,
) -> Result<FirstOrderProfile, ConditionsError> {
    let mut per_node = Vec::with_capacity(traj.grid.len());
    let mut method = SupportMethod::Exact;
    for i in 0..traj.grid.len() {
        let at = At::Node(i);
        let u = traj.control(at);
        let cone = cones::adjacent_cone(set, &u)?;
        let (_, _, fu) = sys.linearize(traj.time(at), &traj.point(at), &u)?;
        let c = fu.transpose() * &adjoint.values[i];
        let s = cones::support_over_cone(&cone, &c);
        if s.method == SupportMethod::Sampled {
            method = SupportMethod::Sampled;
        }
        per_node.push(s.value);
    }
    let max_violation = per_node.iter().copied().fold(0.0, f64::max);
    Ok(FirstOrderProfile {
        per_node,
        max_violation,
        method,
        holds: max_violation <= tol,
    })
}

/// Result of checking a candidate singular direction.
#[derive(Debug, Clone)]
pub struct SingularReport {
    pub variation: GridField,
    /// `∇₁c(X(0)) + ∇₂c(X(T))` for every endpoint component
    pub endpoint_terms: DVector<f64>,
    /// refined active set `I_A′`
    pub refined_active: Vec<bool>,
    /// per generator: max over nodes of `|∂H/∂u · v|`
    pub degeneracy: Vec<f64>,
    pub degenerate_for: Vec<bool>,
}

/// Checks the singular-direction definition for `v` (and `ξ` on a free
/// horizon), returning the variation field and the degeneracy profile over
/// the given multipliers.
#[allow(clippy::too_many_arguments)]
pub fn verify_singular_direction(
    sys: &ControlSystem,
    traj: &Trajectory,
    endpoints: &EndpointData,
    set: &ConvexSet,
    basis: &AdjointBasis,
    multipliers: &[DVector<f64>],
    direction: &GridFn,
    xi: Option<&GridFn>,
    x0: &DVector<f64>,
    tol: &Tolerances,
) -> Result<SingularReport, ConditionsError> {
    let layout = endpoints.layout;
    for i in 0..traj.grid.len() {
        let at = At::Node(i);
        let cone = cones::adjacent_cone(set, &traj.control(at))?;
        if !cone.contains(&direction.values[i]) {
            return Err(ConditionsError::DirectionOutsideCone { time: traj.time(at) });
        }
    }
    let variation = match xi {
        Some(xi) => dynamics::integrate_first_variation_free_time(sys, traj, xi, direction, x0, traj.horizon.length())?,
        None => dynamics::integrate_first_variation(sys, traj, direction, x0)?,
    };
    let horizon = traj.horizon.length();
    let terms = endpoints.first_order_terms(traj.initial(), traj.terminal(), horizon, variation.first(), variation.last())?;
    let active = endpoints.active_set(traj.initial(), traj.terminal(), horizon, tol.active)?;
    let labels = layout.labels();
    for i in 0..layout.dim() {
        if layout.is_equality(i) {
            if terms[i].abs() > tol.refined {
                return Err(ConditionsError::EndpointCondition { label: labels[i].clone(), value: terms[i] });
            }
        } else if active[i] && terms[i] > tol.refined {
            return Err(ConditionsError::EndpointCondition { label: labels[i].clone(), value: terms[i] });
        }
    }
    let refined_active: Vec<bool> = (0..layout.dim())
        .map(|i| !layout.is_equality(i) && active[i] && terms[i].abs() <= tol.refined)
        .collect();
    let fu: Vec<DMatrix<f64>> = (0..traj.grid.len())
        .map(|i| {
            let at = At::Node(i);
            sys.linearize(traj.time(at), &traj.point(at), &traj.control(at)).map(|(_, _, fu)| fu)
        })
        .collect::<Result<_, _>>()?;
    let degeneracy: Vec<f64> = multipliers
        .iter()
        .map(|ell| {
            let p = basis.adjoint(ell);
            (0..traj.grid.len())
                .map(|i| (p.values[i].transpose() * &fu[i] * &direction.values[i])[0].abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let degenerate_for = degeneracy.iter().map(|d| *d <= tol.singular).collect();
    Ok(SingularReport {
        variation,
        endpoint_terms: terms,
        refined_active,
        degeneracy,
        degenerate_for,
    })
}

/// Node-wise integrands of the second-order functional.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SecondOrderIntegrands {
    pub sigma: Vec<f64>,
    pub hessian_x: Vec<f64>,
    pub mixed: Vec<f64>,
    pub hessian_u: Vec<f64>,
    pub curvature: Vec<f64>,
    pub time_hessian: Vec<f64>,
    pub time_state: Vec<f64>,
    pub time_coupling: Vec<f64>,
    pub time_control: Vec<f64>,
    pub xi_state: Vec<f64>,
    pub xi_control: Vec<f64>,
    /// `∂H/∂u` at each node, the slope of the σ-integrand
    #[serde(skip)]
    pub h_u: Vec<DVector<f64>>,
}

/// Term-by-term integrals of the second-order functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SecondOrderBreakdown {
    pub sigma_term: f64,
    pub hessian_x_term: f64,
    pub mixed_term: f64,
    pub hessian_u_term: f64,
    pub curvature_term: f64,
    pub endpoint_term: f64,
    pub time_hessian_term: f64,
    pub time_state_term: f64,
    pub time_coupling_term: f64,
    pub time_control_term: f64,
    pub xi_state_term: f64,
    pub xi_control_term: f64,
    pub total: f64,
}

impl SecondOrderBreakdown {
    pub fn parts(&self) -> [f64; 12] {
        [
            self.sigma_term,
            self.hessian_x_term,
            self.mixed_term,
            self.hessian_u_term,
            self.curvature_term,
            self.endpoint_term,
            self.time_hessian_term,
            self.time_state_term,
            self.time_coupling_term,
            self.time_control_term,
            self.xi_state_term,
            self.xi_control_term,
        ]
    }

    fn with_total(mut self) -> Self {
        self.total = self.parts().iter().sum();
        self
    }

    /// Total without the σ contribution.
    pub fn sigma_free_total(&self) -> f64 {
        self.parts()[1..].iter().sum()
    }
}

/// Inputs shared by the fixed- and free-horizon evaluators.
#[derive(Debug, Clone, Copy)]
pub struct SecondOrderInputs<'a> {
    pub sys: &'a ControlSystem,
    pub manifold: &'a Manifold,
    pub traj: &'a Trajectory,
    pub endpoints: &'a EndpointData,
    pub direction: &'a GridFn,
    pub variation: &'a GridField,
    /// time direction on a free horizon
    pub xi: Option<&'a GridFn>,
}

pub fn second_order_integrands(
    inputs: &SecondOrderInputs<'_>,
    adjoint: &GridField,
    sigma: &GridFn,
) -> Result<SecondOrderIntegrands, ConditionsError> {
    let SecondOrderInputs { sys, manifold, traj, direction, variation, xi, .. } = *inputs;
    if !manifold.is_flat() && manifold.dim() != 2 {
        return Err(ConditionsError::Unsupported(
            "second-order functional on curved manifolds needs dimension 2".into(),
        ));
    }
    let grid = traj.grid;
    let len = grid.len();
    let t_bar = traj.horizon.length();
    let running = xi.map(|xi| grid.running_trapezoid(&(0..len).map(|i| xi.scalar(i)).collect::<Vec<_>>()));
    let mut out = SecondOrderIntegrands::default();
    for i in 0..len {
        let at = At::Node(i);
        let q = traj.point(at);
        let p = &adjoint.values[i];
        let v = &direction.values[i];
        let x = &variation.values[i];
        let hd = hamiltonian_derivs(sys, manifold, traj.time(at), &q, p, &traj.control(at))?;
        out.sigma.push(2.0 * hd.h_u.dot(&sigma.values[i]));
        out.hessian_x.push(x.dot(&(&hd.h_xx * x)));
        out.mixed.push(2.0 * x.dot(&(&hd.h_xu * v)));
        out.hessian_u.push(v.dot(&(&hd.h_uu * v)));
        out.curvature.push(-manifold.curvature_term(&q, p, x, &hd.f)?);
        if let (Some(xi), Some(running)) = (xi, &running) {
            let s = running[i] / t_bar;
            let xi_t = xi.scalar(i);
            out.time_hessian.push(hd.h_tt * s * s);
            out.time_state.push(2.0 * s * hd.h_tx.dot(x));
            out.time_coupling.push(2.0 * running[i] * xi_t * hd.h_t / (t_bar * t_bar));
            out.time_control.push(2.0 * s * hd.h_tu.dot(v));
            out.xi_state.push(2.0 * xi_t * hd.h_x.dot(x) / t_bar);
            out.xi_control.push(2.0 * xi_t * hd.h_u.dot(v) / t_bar);
        }
        out.h_u.push(hd.h_u);
    }
    Ok(out)
}

fn integrate_breakdown(
    inputs: &SecondOrderInputs<'_>,
    multiplier: &DVector<f64>,
    integrands: &SecondOrderIntegrands,
) -> Result<SecondOrderBreakdown, ConditionsError> {
    let traj = inputs.traj;
    let grid = traj.grid;
    let simpson = |v: &[f64]| if v.is_empty() { 0.0 } else { grid.simpson(v) };
    let lag = lagrangian_derivs(inputs.endpoints, multiplier, traj.initial(), traj.terminal(), traj.horizon.length())?;
    let endpoint_term = lag.second_differential(
        inputs.manifold,
        traj.initial(),
        traj.terminal(),
        inputs.variation.first(),
        inputs.variation.last(),
    )?;
    Ok(SecondOrderBreakdown {
        sigma_term: simpson(&integrands.sigma),
        hessian_x_term: simpson(&integrands.hessian_x),
        mixed_term: simpson(&integrands.mixed),
        hessian_u_term: simpson(&integrands.hessian_u),
        curvature_term: simpson(&integrands.curvature),
        endpoint_term,
        time_hessian_term: simpson(&integrands.time_hessian),
        time_state_term: simpson(&integrands.time_state),
        time_coupling_term: simpson(&integrands.time_coupling),
        time_control_term: simpson(&integrands.time_control),
        xi_state_term: simpson(&integrands.xi_state),
        xi_control_term: simpson(&integrands.xi_control),
        total: 0.0,
    }
    .with_total())
}

/// Fixed-horizon second-order functional at a given `σ`.
pub fn second_order_lhs(
    inputs: &SecondOrderInputs<'_>,
    multiplier: &DVector<f64>,
    adjoint: &GridField,
    sigma: &GridFn,
) -> Result<SecondOrderBreakdown, ConditionsError> {
    let fixed = SecondOrderInputs { xi: None, ..*inputs };
    let integrands = second_order_integrands(&fixed, adjoint, sigma)?;
    integrate_breakdown(&fixed, multiplier, &integrands)
}

/// Free-horizon second-order functional; `inputs.xi` must be set.
pub fn free_time_second_order_lhs(
    inputs: &SecondOrderInputs<'_>,
    multiplier: &DVector<f64>,
    adjoint: &GridField,
    sigma: &GridFn,
) -> Result<SecondOrderBreakdown, ConditionsError> {
    if inputs.xi.is_none() {
        return Err(ConditionsError::Unsupported("free-horizon functional needs a time direction".into()));
    }
    let integrands = second_order_integrands(inputs, adjoint, sigma)?;
    integrate_breakdown(inputs, multiplier, &integrands)
}

/// Node-wise sets `Σ(t)` with identical nodes sharing one factored LP.
#[derive(Debug, Clone)]
pub struct NodeSets {
    unique: Vec<AffineSup>,
    index: Vec<usize>,
}

impl NodeSets {
    pub fn new(sets: &[ShiftedConeRepr]) -> Result<Self, ConditionsError> {
        let mut seen: Vec<&ShiftedConeRepr> = Vec::new();
        let mut unique = Vec::new();
        let mut index = Vec::with_capacity(sets.len());
        for set in sets {
            match seen.iter().position(|s| *s == set) {
                Some(k) => index.push(k),
                None => {
                    index.push(unique.len());
                    unique.push(AffineSup::new(set)?);
                    seen.push(set);
                }
            }
        }
        Ok(NodeSets { unique, index })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// `Σ_i w_i sup_{σ ∈ Σ(t_i)} slope(i) · σ`, `+∞` as soon as a node with
    /// positive weight is unbounded.
    fn weighted_sup(&self, weights: &[f64], mut slope: impl FnMut(usize, &mut [f64]), dim: usize) -> Result<Extended, ConditionsError> {
        let mut c = vec![0.0; dim];
        let mut total = 0.0;
        for (i, w) in weights.iter().enumerate() {
            slope(i, &mut c);
            match self.unique[self.index[i]].sup(&c, 0.0)? {
                Extended::Finite(v) => total += w * v,
                Extended::PlusInfinity => {
                    if *w > 0.0 {
                        return Ok(Extended::PlusInfinity);
                    }
                }
            }
        }
        Ok(Extended::Finite(total))
    }
}

/// Sup over σ of the node-wise affine σ-term, Simpson-weighted.
pub fn sigma_sup(grid: &UniformGrid, h_u: &[DVector<f64>], sets: &[ShiftedConeRepr]) -> Result<Extended, ConditionsError> {
    let weights = grid.simpson_weights();
    let dim = h_u.first().map_or(0, |h| h.len());
    NodeSets::new(sets)?.weighted_sup(
        &weights,
        |i, c| {
            for (ck, hk) in c.iter_mut().zip(h_u[i].iter()) {
                *ck = 2.0 * hk;
            }
        },
        dim,
    )
}

/// `sup_σ` of the second-order functional over node-wise sets `Σ(t)`,
/// with the σ-free breakdown.
pub fn second_order_sup(
    inputs: &SecondOrderInputs<'_>,
    multiplier: &DVector<f64>,
    adjoint: &GridField,
    sets: &[ShiftedConeRepr],
) -> Result<(Extended, SecondOrderBreakdown), ConditionsError> {
    let zero = GridFn::zeros(inputs.traj.grid, inputs.sys.m);
    let integrands = second_order_integrands(inputs, adjoint, &zero)?;
    let breakdown = integrate_breakdown(inputs, multiplier, &integrands)?;
    let sup = match sigma_sup(&inputs.traj.grid, &integrands.h_u, sets)? {
        Extended::Finite(v) => Extended::Finite(breakdown.sigma_free_total() + v),
        Extended::PlusInfinity => Extended::PlusInfinity,
    };
    Ok((sup, breakdown))
}

/// Node-wise second-order sets `T^(2)_U(ū(t), v(t))`.
pub fn second_order_sets(traj: &Trajectory, set: &ConvexSet, direction: &GridFn) -> Result<Vec<ShiftedConeRepr>, ConditionsError> {
    (0..traj.grid.len())
        .map(|i| Ok(cones::second_order_set(set, &traj.controls.values[i], &direction.values[i])?))
        .collect()
}

/// The second-order functional as a linear function of `ℓ`, built from
/// evaluations at unit multipliers.
#[derive(Debug, Clone)]
pub struct LinearSecondOrderModel {
    pub grid: UniformGrid,
    /// σ-free total per unit multiplier
    pub base: DVector<f64>,
    /// σ-free breakdown per unit multiplier
    pub breakdowns: Vec<SecondOrderBreakdown>,
    /// `2 ∂H/∂u` per node and unit multiplier, flattened as `[node][e][a]`
    slopes: Vec<f64>,
    controls: usize,
    weights: Vec<f64>,
    sets: NodeSets,
}

impl LinearSecondOrderModel {
    pub fn build(inputs: &SecondOrderInputs<'_>, basis: &AdjointBasis, sets: Vec<ShiftedConeRepr>) -> Result<Self, ConditionsError> {
        let d = basis.layout.dim();
        let m = inputs.sys.m;
        let grid = inputs.traj.grid;
        let zero = GridFn::zeros(grid, m);
        let mut base = DVector::zeros(d);
        let mut breakdowns = Vec::with_capacity(d);
        let mut slopes = vec![0.0; grid.len() * d * m];
        for e in 0..d {
            let unit = DVector::from_fn(d, |i, _| if i == e { 1.0 } else { 0.0 });
            let integrands = second_order_integrands(inputs, &basis.fields[e], &zero)?;
            let b = integrate_breakdown(inputs, &unit, &integrands)?;
            base[e] = b.sigma_free_total();
            breakdowns.push(b);
            for (i, hu) in integrands.h_u.iter().enumerate() {
                for a in 0..m {
                    slopes[(i * d + e) * m + a] = 2.0 * hu[a];
                }
            }
        }
        Ok(LinearSecondOrderModel {
            grid,
            base,
            breakdowns,
            slopes,
            controls: m,
            weights: grid.simpson_weights(),
            sets: NodeSets::new(&sets)?,
        })
    }

    pub fn sup(&self, multiplier: &DVector<f64>) -> Result<Extended, ConditionsError> {
        let (d, m) = (self.base.len(), self.controls);
        let sigma = self.sets.weighted_sup(
            &self.weights,
            |i, c| {
                c.fill(0.0);
                for (e, l) in multiplier.iter().enumerate() {
                    if *l == 0.0 {
                        continue;
                    }
                    let row = &self.slopes[(i * d + e) * m..(i * d + e + 1) * m];
                    for (ck, s) in c.iter_mut().zip(row) {
                        *ck += l * s;
                    }
                }
            },
            m,
        )?;
        Ok(match sigma {
            Extended::Finite(v) => Extended::Finite(self.base.dot(multiplier) + v),
            Extended::PlusInfinity => Extended::PlusInfinity,
        })
    }

    pub fn breakdown(&self, multiplier: &DVector<f64>) -> SecondOrderBreakdown {
        let mut parts = [0.0; 12];
        for (e, b) in self.breakdowns.iter().enumerate() {
            for (acc, v) in parts.iter_mut().zip(b.parts()) {
                *acc += multiplier[e] * v;
            }
        }
        SecondOrderBreakdown {
            sigma_term: 0.0,
            hessian_x_term: parts[1],
            mixed_term: parts[2],
            hessian_u_term: parts[3],
            curvature_term: parts[4],
            endpoint_term: parts[5],
            time_hessian_term: parts[6],
            time_state_term: parts[7],
            time_coupling_term: parts[8],
            time_control_term: parts[9],
            xi_state_term: parts[10],
            xi_control_term: parts[11],
            total: 0.0,
        }
        .with_total()
    }

}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    CertifiedNotWeakPareto,
    Inconclusive,
    InfeasibleFirstOrder,
    AdmissibilityFailed,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::CertifiedNotWeakPareto => "certified-not-weak-pareto",
            Verdict::Inconclusive => "inconclusive",
            Verdict::InfeasibleFirstOrder => "infeasible-first-order",
            Verdict::AdmissibilityFailed => "admissibility-failed",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RayEvaluation {
    pub multiplier: Vec<f64>,
    pub sup: Extended,
    pub breakdown: SecondOrderBreakdown,
}

#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub verdict: Verdict,
    /// smallest sup over all evaluated multipliers
    pub min_sup: Option<Extended>,
    pub minimizer: Option<Vec<f64>>,
    pub margin_tol: f64,
    pub rays: Vec<RayEvaluation>,
    pub samples_evaluated: usize,
    pub samples_infinite: usize,
}

/// Discharges "for every multiplier the sup over σ is positive" on the
/// generators and a sampled cross-section of the (restricted) family.
pub fn certify_not_weak_pareto(
    model: &LinearSecondOrderModel,
    family: &MultiplierFamily,
    samples: usize,
    seed: u64,
    margin_tol: f64,
    mode: Execution,
) -> Result<Certificate, ConditionsError> {
    if family.is_empty() {
        return Ok(Certificate {
            verdict: Verdict::InfeasibleFirstOrder,
            min_sup: None,
            minimizer: None,
            margin_tol,
            rays: Vec::new(),
            samples_evaluated: 0,
            samples_infinite: 0,
        });
    }
    let generators = family.generators();
    let rays = generators
        .iter()
        .map(|g| {
            Ok(RayEvaluation {
                multiplier: g.iter().copied().collect(),
                sup: model.sup(g)?,
                breakdown: model.breakdown(g),
            })
        })
        .collect::<Result<Vec<_>, ConditionsError>>()?;
    let points = family.sample(samples, seed);
    let values = map_ordered(mode, &points, |ell| model.sup(ell));
    let mut min: Option<(f64, Vec<f64>)> = None;
    let mut infinite = 0;
    let mut consider = |v: f64, ell: &DVector<f64>| {
        if min.as_ref().is_none_or(|(m, _)| v < *m) {
            min = Some((v, ell.iter().copied().collect()));
        }
    };
    for r in &rays {
        consider(r.sup.to_f64(), &DVector::from_column_slice(&r.multiplier));
    }
    for (ell, v) in points.iter().zip(values) {
        let v = v?;
        if !v.is_finite() {
            infinite += 1;
        }
        consider(v.to_f64(), ell);
    }
    let (min_value, minimizer) = min.expect("a nonempty family has at least one generator or sample");
    let verdict = if min_value > margin_tol {
        Verdict::CertifiedNotWeakPareto
    } else {
        Verdict::Inconclusive
    };
    Ok(Certificate {
        verdict,
        min_sup: Some(Extended::from_f64(min_value)),
        minimizer: Some(minimizer),
        margin_tol,
        rays,
        samples_evaluated: points.len(),
        samples_infinite: infinite,
    })
}

/// Candidate on `[0, T̄]` rescaled to `[0, 1]`: `y(s) = x(T̄ s)`,
/// `w(s) = u(T̄ s)`, with constant speed `T̄`.
#[derive(Debug, Clone)]
pub struct UnitTrajectory {
    pub states: GridField,
    pub controls: GridFn,
    pub speed: f64,
}

pub fn reparameterize_to_unit(traj: &Trajectory) -> UnitTrajectory {
    let speed = traj.horizon.length();
    let grid = UniformGrid::new(0.0, 1.0, traj.grid.steps);
    UnitTrajectory {
        states: GridField {
            grid,
            values: traj.states.values.clone(),
            derivs: traj.states.derivs.iter().map(|d| d * speed).collect(),
        },
        controls: GridFn {
            grid,
            values: traj.controls.values.clone(),
        },
        speed,
    }
}

impl UnitTrajectory {
    /// State at unit time `s` by Hermite interpolation.
    pub fn state_at(&self, s: f64) -> DVector<f64> {
        let grid = self.states.grid;
        let h = grid.step();
        let i = ((s / h).floor() as usize).min(grid.steps - 1);
        let tau = (s - i as f64 * h) / h;
        let (y0, y1) = (&self.states.values[i], &self.states.values[i + 1]);
        let (d0, d1) = (&self.states.derivs[i], &self.states.derivs[i + 1]);
        let h00 = 2.0 * tau.powi(3) - 3.0 * tau * tau + 1.0;
        let h10 = tau.powi(3) - 2.0 * tau * tau + tau;
        let h01 = -2.0 * tau.powi(3) + 3.0 * tau * tau;
        let h11 = tau.powi(3) - tau * tau;
        y0 * h00 + d0 * (h10 * h) + y1 * h01 + d1 * (h11 * h)
    }

    /// Back to the original horizon `[0, speed]`.
    pub fn restore(&self) -> (GridField, GridFn) {
        let grid = UniformGrid::new(0.0, self.speed, self.states.grid.steps);
        (
            GridField {
                grid,
                values: self.states.values.clone(),
                derivs: self.states.derivs.iter().map(|d| d / self.speed).collect(),
            },
            GridFn {
                grid,
                values: self.controls.values.clone(),
            },
        )
    }
}

/// Profile of `|H(t) + ∫_t^T̄ ∂H/∂t|` over the nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreeTimeResidual {
    pub per_node: Vec<f64>,
    pub max: f64,
}

pub fn free_time_first_order_residual(
    sys: &ControlSystem,
    manifold: &Manifold,
    traj: &Trajectory,
    adjoint: &GridField,
) -> Result<FreeTimeResidual, ConditionsError> {
    let len = traj.grid.len();
    let mut h = Vec::with_capacity(len);
    let mut ht = Vec::with_capacity(len);
    for i in 0..len {
        let at = At::Node(i);
        let d = hamiltonian_derivs(sys, manifold, traj.time(at), &traj.point(at), &adjoint.values[i], &traj.control(at))?;
        h.push(d.h);
        ht.push(d.h_t);
    }
    let tails = traj.grid.tail_integrals(&ht);
    let per_node: Vec<f64> = h.iter().zip(&tails).map(|(a, b)| (a + b).abs()).collect();
    let max = per_node.iter().copied().fold(0.0, f64::max);
    Ok(FreeTimeResidual { per_node, max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::tests::{example_system, example_trajectory, x1_oracle};
    use crate::dynamics::Horizon;
    use crate::exprlang::central_difference;
    use nalgebra::dvector;
    use proptest::prelude::*;

    fn example_endpoints() -> EndpointData {
        EndpointData::parse(2, &["-b1^2", "-ln(1+b1^2+b2^2)"], &["a2"], &["a1", "b1^3+b2+T"]).unwrap()
    }

    fn ball() -> ConvexSet {
        ConvexSet::ball(vec![0.0, 0.0], 1.0)
    }

    /// Relation matrix of the expected family: ℓψ₁ = 0 and
    /// ℓφ + 2Tℓ₀₂/(1+T²) + ℓψ₂ = 0.
    fn family_relations(t: f64, ell: &DVector<f64>) -> f64 {
        let a = ell[3].abs();
        let b = (ell[2] + 2.0 * t * ell[1] / (1.0 + t * t) + ell[4]).abs();
        a.max(b)
    }

    struct Setup {
        sys: ControlSystem,
        manifold: Manifold,
        traj: Trajectory,
        endpoints: EndpointData,
        basis: AdjointBasis,
        family: MultiplierFamily,
    }

    fn setup(t: f64, steps: usize) -> Setup {
        let (sys, manifold, traj) = example_trajectory(t, steps);
        let endpoints = example_endpoints();
        let basis = AdjointBasis::build(&sys, &traj, &endpoints).unwrap();
        let family = solve_multiplier_cone(&traj, &endpoints, &basis, None, &Tolerances::default()).unwrap();
        Setup { sys, manifold, traj, endpoints, basis, family }
    }

    #[test]
    fn hamiltonian_matches_example_form() {
        let sys = example_system();
        let m = Manifold::graph("ln(1+x1^2+x2^2)").unwrap();
        let (q, p, u) = (dvector![0.3, -0.4], dvector![0.7, -1.1], dvector![0.2, 0.5]);
        let d = hamiltonian_derivs(&sys, &m, 0.0, &q, &p, &u).unwrap();
        let a = (1.0f64 + 0.09 + 0.16).ln();
        let h = -0.09 + 4.0 * 0.3 * 0.5 - 0.2;
        assert!((d.h - (0.5 * a * a * 0.7 + h * -1.1)).abs() < 1e-14);
        // FD oracle for ∂H/∂ξ and ∂H/∂u
        let vars = ControlSystem::variables(2, 2);
        let ham = exprlang::parse("0.7*u2*ln(1+x1^2+x2^2)^2 - 1.1*(-x1^2+4*x1*u2-u1)", &vars).unwrap();
        let slots = [0.0, 0.3, -0.4, 0.2, 0.5];
        for i in 0..2 {
            assert!((central_difference(&ham, 1 + i, &slots, 1e-5).unwrap() - d.h_x[i]).abs() < 1e-6);
            assert!((central_difference(&ham, 3 + i, &slots, 1e-5).unwrap() - d.h_u[i]).abs() < 1e-6);
        }
        assert_eq!(d.h_xx, d.h_xx.transpose());
        let z = hamiltonian_derivs(&sys, &m, 0.0, &q, &dvector![0.0, 0.0], &u).unwrap();
        assert_eq!(z.h, 0.0);
        assert_eq!(z.h_xx.amax(), 0.0);
        assert_eq!(z.h_u.amax(), 0.0);
    }

    #[test]
    fn lagrangian_examples() {
        let e = example_endpoints();
        let m = Manifold::graph("ln(1+x1^2+x2^2)").unwrap();
        let q0 = dvector![0.0, 0.0];
        let x0 = dvector![0.0, 0.0];
        let xt = dvector![0.37, 0.0];
        for t in [0.5f64, 1.0, 2.0] {
            let qt = dvector![0.0, -t];
            let zero = lagrangian_derivs(&e, &DVector::zeros(5), &q0, &qt, t).unwrap();
            assert_eq!(zero.second_differential(&m, &q0, &qt, &x0, &xt).unwrap(), 0.0);
            let l01 = lagrangian_derivs(&e, &dvector![-1.0, 0.0, 0.0, 0.0, 0.0], &q0, &qt, t).unwrap();
            assert!((l01.second_differential(&m, &q0, &qt, &x0, &xt).unwrap() - 2.0 * 0.37 * 0.37).abs() < 1e-14);
            let psi2 = lagrangian_derivs(&e, &dvector![0.0, 0.0, 0.0, 0.0, 1.0], &q0, &qt, t).unwrap();
            let expected = 4.0 * t / (1.0 + 6.0 * t * t + t.powi(4)) * 0.37 * 0.37;
            assert!((psi2.second_differential(&m, &q0, &qt, &x0, &xt).unwrap() - expected).abs() < 1e-14);
            // linear in ℓ
            let mix = lagrangian_derivs(&e, &dvector![-2.0, 0.0, 0.0, 0.0, 3.0], &q0, &qt, t).unwrap();
            let lin = 2.0 * l01.second_differential(&m, &q0, &qt, &x0, &xt).unwrap() + 3.0 * psi2.second_differential(&m, &q0, &qt, &x0, &xt).unwrap();
            assert!((mix.second_differential(&m, &q0, &qt, &x0, &xt).unwrap() - lin).abs() < 1e-14);
        }
    }

    #[test]
    fn cone_generators_simple_cases() {
        // quadrant in the plane
        let (rays, lin) = cone_generators(&[dvector![1.0, 0.0], dvector![0.0, 1.0]], 2, 1e-10);
        assert!(lin.is_empty());
        assert_eq!(rays.len(), 2);
        // halfplane: one ray plus a lineality direction
        let (rays, lin) = cone_generators(&[dvector![1.0, 0.0]], 2, 1e-10);
        assert_eq!((rays.len(), lin.len()), (1, 1));
        // square pyramid with four facets has four extreme rays
        let facets = [dvector![1.0, 0.0, -1.0], dvector![-1.0, 0.0, -1.0], dvector![0.0, 1.0, -1.0], dvector![0.0, -1.0, -1.0]];
        let (rays, lin) = cone_generators(&facets, 3, 1e-10);
        assert!(lin.is_empty());
        assert_eq!(rays.len(), 4);
        for r in &rays {
            assert!(facets.iter().all(|f| f.dot(r) <= 1e-12));
        }
        // contradictory constraints collapse to the origin
        let (rays, lin) = cone_generators(&[dvector![1.0], dvector![-1.0]], 1, 1e-10);
        assert!(rays.is_empty() && lin.is_empty());
    }

    #[test]
    fn example_multiplier_family() {
        for t in [0.5f64, 1.0, 2.0] {
            let s = setup(t, 400);
            let f = &s.family;
            assert!(f.lineality.is_empty());
            assert_eq!(f.rays.len(), 3, "T={t}");
            for r in &f.rays {
                assert!(family_relations(t, r) <= 1e-7);
                assert!(f.equality_defect(r) <= 1e-7);
                assert!(f.satisfies_signs(r, 1e-12));
                assert!((r.iter().map(|x| x.abs()).sum::<f64>() - 1.0).abs() < 1e-12);
            }
            // the three expected generators, up to normalization
            let c = 2.0 * t / (1.0 + t * t);
            let expected = [
                l1_normalize(dvector![-1.0, 0.0, 0.0, 0.0, 0.0]),
                l1_normalize(dvector![0.0, -1.0, 0.0, 0.0, c]),
                l1_normalize(dvector![0.0, 0.0, -1.0, 0.0, 1.0]),
            ];
            for e in &expected {
                assert!(f.rays.iter().any(|r| (r - e).amax() < 1e-9), "missing {e}");
            }
            for ell in f.sample(200, 7) {
                assert!(family_relations(t, &ell) <= 1e-7);
                assert!(f.satisfies_signs(&ell, 1e-12));
            }
        }
    }

    #[test]
    fn unconstrained_family_is_objective_sign_cone() {
        let sys = ControlSystem::parse(1, 1, &["u1"]).unwrap();
        let grid = UniformGrid::new(0.0, 1.0, 10);
        let traj = dynamics::integrate_state(&sys, &Manifold::flat(1), &dvector![0.0], &GridFn::zeros(grid, 1), Horizon::Fixed(1.0)).unwrap();
        let e = EndpointData::parse(1, &["0", "0"], &[], &[]).unwrap();
        let basis = AdjointBasis::build(&sys, &traj, &e).unwrap();
        assert_eq!(basis.defect.amax(), 0.0);
        let f = solve_multiplier_cone(&traj, &e, &basis, None, &Tolerances::default()).unwrap();
        assert_eq!(f.rays.len(), 2);
        assert!(f.rays.iter().all(|r| r.iter().all(|x| *x <= 0.0)));
    }

    #[test]
    fn infeasible_transversality_gives_empty_family() {
        let sys = ControlSystem::parse(2, 2, &["u1", "u2"]).unwrap();
        let grid = UniformGrid::new(0.0, 1.0, 10);
        let traj = dynamics::integrate_state(&sys, &Manifold::flat(2), &dvector![0.0, 0.0], &GridFn::zeros(grid, 2), Horizon::Fixed(1.0)).unwrap();
        let e = EndpointData::parse(2, &["b2"], &[], &["a1"]).unwrap();
        let basis = AdjointBasis::build(&sys, &traj, &e).unwrap();
        let f = solve_multiplier_cone(&traj, &e, &basis, None, &Tolerances::default()).unwrap();
        assert!(f.is_empty());
        // the unperturbed constraint ψ = a2 is feasible
        let ok = EndpointData::parse(2, &["b2"], &[], &["a2"]).unwrap();
        let basis = AdjointBasis::build(&sys, &traj, &ok).unwrap();
        assert!(!solve_multiplier_cone(&traj, &ok, &basis, None, &Tolerances::default()).unwrap().is_empty());
    }

    #[test]
    fn first_order_on_example() {
        let s = setup(1.0, 400);
        for r in &s.family.rays {
            let p = s.basis.adjoint(r);
            let prof = check_first_order(&s.sys, &s.traj, &p, &ball(), 1e-7).unwrap();
            // ∂H/∂u = (ℓφ, 0) over the cone {v₁ ≤ 0}: the sup is -ℓφ
            assert!((prof.max_violation - (-r[2])).abs() < 1e-9, "{r}");
            assert_eq!(prof.holds, r[2].abs() < 1e-12);
            if r[2] < 0.0 {
                assert!(prof.per_node.iter().all(|v| (v + r[2]).abs() < 1e-9));
            }
        }
        let flipped = dvector![0.0, 0.0, 0.5, 0.0, -0.5];
        let prof = check_first_order(&s.sys, &s.traj, &s.basis.adjoint(&flipped), &ball(), 1e-7).unwrap();
        assert!(prof.max_violation.abs() < 1e-9);
        let zero = check_first_order(&s.sys, &s.traj, &s.basis.adjoint(&DVector::zeros(5)), &ball(), 1e-7).unwrap();
        assert_eq!(zero.max_violation, 0.0);
    }

    #[test]
    fn singular_direction_on_example() {
        let s = setup(1.0, 2000);
        let v = GridFn::constant(s.traj.grid, dvector![0.0, 1.0]);
        let rep = verify_singular_direction(&s.sys, &s.traj, &s.endpoints, &ball(), &s.basis, &s.family.rays, &v, None, &dvector![0.0, 0.0], &Tolerances::default()).unwrap();
        assert!((rep.variation.last()[0] - 0.115987).abs() < 1e-4);
        assert!(rep.degeneracy.iter().all(|d| *d <= 1e-9));
        assert_eq!(rep.refined_active, vec![true, true, true, false, false]);

        let zero = GridFn::zeros(s.traj.grid, 2);
        let rep0 = verify_singular_direction(&s.sys, &s.traj, &s.endpoints, &ball(), &s.basis, &s.family.rays, &zero, None, &dvector![0.0, 0.0], &Tolerances::default()).unwrap();
        assert!(rep0.variation.values.iter().all(|x| x.amax() == 0.0));

        // v = (-1, 0): ∂H/∂u · v = -ℓφ on every ray
        let back = GridFn::constant(s.traj.grid, dvector![-1.0, 0.0]);
        let x = dynamics::integrate_first_variation(&s.sys, &s.traj, &back, &dvector![0.0, 0.0]).unwrap();
        let fu = s.sys.linearize(0.5, &s.traj.states.values[1000], &s.traj.controls.values[1000]).unwrap().2;
        for r in &s.family.rays {
            let p = s.basis.adjoint(r);
            let val = (p.values[1000].transpose() * &fu * dvector![-1.0, 0.0])[0];
            assert!((val + r[2]).abs() < 1e-9);
        }
        assert!(x.last()[1].abs() > 0.5);
        assert!(matches!(
            verify_singular_direction(&s.sys, &s.traj, &s.endpoints, &ball(), &s.basis, &s.family.rays, &back, None, &dvector![0.0, 0.0], &Tolerances::default()),
            Err(ConditionsError::EndpointCondition { .. })
        ));
        let outward = GridFn::constant(s.traj.grid, dvector![1.0, 0.0]);
        assert!(matches!(
            verify_singular_direction(&s.sys, &s.traj, &s.endpoints, &ball(), &s.basis, &s.family.rays, &outward, None, &dvector![0.0, 0.0], &Tolerances::default()),
            Err(ConditionsError::DirectionOutsideCone { .. })
        ));
    }

    fn example_inputs<'a>(s: &'a Setup, v: &'a GridFn, x: &'a GridField) -> SecondOrderInputs<'a> {
        SecondOrderInputs {
            sys: &s.sys,
            manifold: &s.manifold,
            traj: &s.traj,
            endpoints: &s.endpoints,
            direction: v,
            variation: x,
            xi: None,
        }
    }

    #[test]
    fn second_order_closed_form_at_zero_phi_multiplier() {
        for t in [0.5f64, 1.0, 2.0] {
            let s = setup(t, 2000);
            let v = GridFn::constant(s.traj.grid, dvector![0.0, 1.0]);
            let x = dynamics::integrate_first_variation(&s.sys, &s.traj, &v, &dvector![0.0, 0.0]).unwrap();
            let inputs = example_inputs(&s, &v, &x);
            let sigma = GridFn::constant(s.traj.grid, dvector![-0.5, 0.0]);
            let x1 = x1_oracle(t);
            for (l01, l02) in [(-1.0, 0.0), (0.0, -1.0), (-0.3, -0.7)] {
                let ell = dvector![l01, l02, 0.0, 0.0, -2.0 * t * l02 / (1.0 + t * t)];
                let b = second_order_lhs(&inputs, &ell, &s.basis.adjoint(&ell), &sigma).unwrap();
                let closed = -2.0 * (l01 + l02 / (1.0 + t * t)) * x1 * x1;
                assert!((b.total - closed).abs() <= 1e-5 * closed.abs(), "T={t}: {} vs {closed}", b.total);
                assert!((b.total - b.parts().iter().sum::<f64>()).abs() < 1e-12);
                assert_eq!(b.time_hessian_term, 0.0);
            }
        }
    }

    #[test]
    fn second_order_reports_both_forms_for_nonzero_phi_multiplier() {
        // ℓφ ≠ 0: assembled total = displayed closed form plus an endpoint
        // Christoffel contribution 4T(-ℓφ)/(1+6T²+T⁴)·X₁(T)²
        let t = 1.0;
        let s = setup(t, 2000);
        let v = GridFn::constant(s.traj.grid, dvector![0.0, 1.0]);
        let x = dynamics::integrate_first_variation(&s.sys, &s.traj, &v, &dvector![0.0, 0.0]).unwrap();
        let inputs = example_inputs(&s, &v, &x);
        let sigma = GridFn::constant(s.traj.grid, dvector![-0.5, 0.0]);
        let lphi = -1.0;
        let ell = dvector![0.0, 0.0, lphi, 0.0, -lphi];
        let b = second_order_lhs(&inputs, &ell, &s.basis.adjoint(&ell), &sigma).unwrap();
        let grid = s.traj.grid;
        let integrand: Vec<f64> = (0..grid.len())
            .map(|i| {
                let tt = grid.time(At::Node(i));
                let k = 4.0 * (1.0 - tt.powi(4)) / (1.0 + 6.0 * tt * tt + tt.powi(4)).powi(2);
                let x1 = x.values[i][0];
                -0.5 + (1.0 + 0.5 * k) * x1 * x1 - 4.0 * x1
            })
            .collect();
        let displayed = 2.0 * lphi * grid.simpson(&integrand);
        let x1t = x.last()[0];
        let extra = 4.0 * t * (-lphi) / (1.0 + 6.0 * t * t + t.powi(4)) * x1t * x1t;
        assert!((b.total - (displayed + extra)).abs() < 1e-8, "{} vs {}", b.total, displayed + extra);
    }

    #[test]
    fn second_order_sup_on_example() {
        let s = setup(1.0, 2000);
        let v = GridFn::constant(s.traj.grid, dvector![0.0, 1.0]);
        let x = dynamics::integrate_first_variation(&s.sys, &s.traj, &v, &dvector![0.0, 0.0]).unwrap();
        let inputs = example_inputs(&s, &v, &x);
        let sets = second_order_sets(&s.traj, &ball(), &v).unwrap();
        let x1 = x1_oracle(1.0);
        for r in &s.family.rays {
            let (sup, _) = second_order_sup(&inputs, r, &s.basis.adjoint(r), &sets).unwrap();
            if r[2] < 0.0 {
                assert_eq!(sup, Extended::PlusInfinity);
            } else {
                let expected = -2.0 * (r[0] + r[1] / 2.0) * x1 * x1;
                assert!((sup.to_f64() - expected).abs() < 1e-6 * expected, "{r}: {sup:?}");
            }
        }
        let ell = dvector![-1.0, 0.0, 0.0, 0.0, 0.0];
        let (sup, _) = second_order_sup(&inputs, &ell, &s.basis.adjoint(&ell), &sets).unwrap();
        assert!((sup.to_f64() - 0.026906798068).abs() < 5e-4);

        let model = LinearSecondOrderModel::build(&inputs, &s.basis, sets.clone()).unwrap();
        for r in &s.family.rays {
            let (direct, _) = second_order_sup(&inputs, r, &s.basis.adjoint(r), &sets).unwrap();
            match (direct, model.sup(r).unwrap()) {
                (Extended::Finite(a), Extended::Finite(b)) => assert!((a - b).abs() < 1e-12),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn certify_example() {
        let s = setup(1.0, 2000);
        let v = GridFn::constant(s.traj.grid, dvector![0.0, 1.0]);
        let x = dynamics::integrate_first_variation(&s.sys, &s.traj, &v, &dvector![0.0, 0.0]).unwrap();
        let inputs = example_inputs(&s, &v, &x);
        let sets = second_order_sets(&s.traj, &ball(), &v).unwrap();
        let model = LinearSecondOrderModel::build(&inputs, &s.basis, sets).unwrap();
        let seq = certify_not_weak_pareto(&model, &s.family, 2000, 11, 1e-6, Execution::Sequential).unwrap();
        let par = certify_not_weak_pareto(&model, &s.family, 2000, 11, 1e-6, Execution::Parallel).unwrap();
        assert_eq!(seq.verdict, Verdict::CertifiedNotWeakPareto);
        assert_eq!(seq.min_sup, par.min_sup);
        assert_eq!(seq.minimizer, par.minimizer);
        assert!(seq.min_sup.unwrap().to_f64() > 0.0);
    }

    #[test]
    fn certify_inconclusive_and_empty() {
        // flat ẋ = u, cost x(T)², x(0) = 0, candidate u ≡ 0, direction v ≡ 0
        let sys = ControlSystem::parse(1, 1, &["u1"]).unwrap();
        let m = Manifold::flat(1);
        let grid = UniformGrid::new(0.0, 1.0, 20);
        let traj = dynamics::integrate_state(&sys, &m, &dvector![0.0], &GridFn::zeros(grid, 1), Horizon::Fixed(1.0)).unwrap();
        let e = EndpointData::parse(1, &["b1^2"], &[], &["a1"]).unwrap();
        let basis = AdjointBasis::build(&sys, &traj, &e).unwrap();
        let fam = solve_multiplier_cone(&traj, &e, &basis, None, &Tolerances::default()).unwrap();
        let set = ConvexSet::ball(vec![0.0], 1.0);
        let v = GridFn::zeros(grid, 1);
        let x = dynamics::integrate_first_variation(&sys, &traj, &v, &dvector![0.0]).unwrap();
        let inputs = SecondOrderInputs { sys: &sys, manifold: &m, traj: &traj, endpoints: &e, direction: &v, variation: &x, xi: None };
        let model = LinearSecondOrderModel::build(&inputs, &basis, second_order_sets(&traj, &set, &v).unwrap()).unwrap();
        let cert = certify_not_weak_pareto(&model, &fam, 500, 3, 1e-6, Execution::Sequential).unwrap();
        assert_eq!(cert.verdict, Verdict::Inconclusive);
        assert!(cert.min_sup.unwrap().to_f64() <= 0.0);

        // v ≡ 1, X = t: sup = -2T² ℓ normalized to ℓ₀ = -1
        let v1 = GridFn::constant(grid, dvector![1.0]);
        let x1 = dynamics::integrate_first_variation(&sys, &traj, &v1, &dvector![0.0]).unwrap();
        let inputs1 = SecondOrderInputs { direction: &v1, variation: &x1, ..inputs };
        let ell = dvector![-1.0, 0.0];
        let (sup, _) = second_order_sup(&inputs1, &ell, &basis.adjoint(&ell), &second_order_sets(&traj, &set, &v1).unwrap()).unwrap();
        assert!((sup.to_f64() + 2.0).abs() < 1e-12);

        let sys2 = ControlSystem::parse(2, 2, &["u1", "u2"]).unwrap();
        let traj2 = dynamics::integrate_state(&sys2, &Manifold::flat(2), &dvector![0.0, 0.0], &GridFn::zeros(grid, 2), Horizon::Fixed(1.0)).unwrap();
        let e2 = EndpointData::parse(2, &["b2"], &[], &["a1"]).unwrap();
        let basis2 = AdjointBasis::build(&sys2, &traj2, &e2).unwrap();
        let fam2 = solve_multiplier_cone(&traj2, &e2, &basis2, None, &Tolerances::default()).unwrap();
        let v2 = GridFn::zeros(grid, 2);
        let x2 = dynamics::integrate_first_variation(&sys2, &traj2, &v2, &dvector![0.0, 0.0]).unwrap();
        let m2 = Manifold::flat(2);
        let inputs2 = SecondOrderInputs { sys: &sys2, manifold: &m2, traj: &traj2, endpoints: &e2, direction: &v2, variation: &x2, xi: None };
        let model2 = LinearSecondOrderModel::build(&inputs2, &basis2, second_order_sets(&traj2, &ConvexSet::ball(vec![0.0, 0.0], 1.0), &v2).unwrap()).unwrap();
        let cert2 = certify_not_weak_pareto(&model2, &fam2, 100, 3, 1e-6, Execution::Sequential).unwrap();
        assert_eq!(cert2.verdict, Verdict::InfeasibleFirstOrder);
    }

    #[test]
    fn free_time_evaluator_reduces_to_fixed_time() {
        let s = setup(1.0, 400);
        let v = GridFn::constant(s.traj.grid, dvector![0.0, 1.0]);
        let x = dynamics::integrate_first_variation(&s.sys, &s.traj, &v, &dvector![0.0, 0.0]).unwrap();
        let sigma = GridFn::constant(s.traj.grid, dvector![-0.5, 0.0]);
        let zero_xi = GridFn::zeros(s.traj.grid, 1);
        let fixed_inputs = example_inputs(&s, &v, &x);
        let free_inputs = SecondOrderInputs { xi: Some(&zero_xi), ..fixed_inputs };
        for r in &s.family.rays {
            let p = s.basis.adjoint(r);
            let a = second_order_lhs(&fixed_inputs, r, &p, &sigma).unwrap();
            let b = free_time_second_order_lhs(&free_inputs, r, &p, &sigma).unwrap();
            assert!((a.total - b.total).abs() <= 1e-9);
        }

        // autonomous, ξ ≡ c: extras are (2c/T̄)∫(∇ₓH(X) + ∇ᵤH(v))
        let c = 0.6;
        let xi = GridFn::constant(s.traj.grid, dvector![c]);
        let xf = dynamics::integrate_first_variation_free_time(&s.sys, &s.traj, &xi, &v, &dvector![0.0, 0.0], 1.0).unwrap();
        let fixed_c = SecondOrderInputs { variation: &xf, ..fixed_inputs };
        let free_c = SecondOrderInputs { xi: Some(&xi), ..fixed_c };
        let ell = s.family.rays[0].clone();
        let p = s.basis.adjoint(&ell);
        let a = second_order_lhs(&fixed_c, &ell, &p, &sigma).unwrap();
        let b = free_time_second_order_lhs(&free_c, &ell, &p, &sigma).unwrap();
        let grid = s.traj.grid;
        let extra: Vec<f64> = (0..grid.len())
            .map(|i| {
                let at = At::Node(i);
                let d = hamiltonian_derivs(&s.sys, &s.manifold, grid.time(at), &s.traj.point(at), &p.values[i], &s.traj.control(at)).unwrap();
                2.0 * c * (d.h_x.dot(&xf.values[i]) + d.h_u.dot(&v.values[i]))
            })
            .collect();
        assert!((b.total - a.total - grid.simpson(&extra)).abs() < 1e-12);
        assert_eq!(b.time_hessian_term, 0.0);
    }

    fn synthetic_free_time(steps: usize) -> (ControlSystem, Manifold, Trajectory, EndpointData, AdjointBasis) {
        let sys = ControlSystem::parse(1, 1, &["u1*(exp(1-t)-1)"]).unwrap();
        let m = Manifold::flat(1);
        let grid = UniformGrid::new(0.0, 1.0, steps);
        let traj = dynamics::integrate_state(&sys, &m, &dvector![0.0], &GridFn::constant(grid, dvector![1.0]), Horizon::Free(1.0)).unwrap();
        let e = EndpointData::parse(1, &["b1"], &[], &["a1"]).unwrap();
        let basis = AdjointBasis::build(&sys, &traj, &e).unwrap();
        (sys, m, traj, e, basis)
    }

    #[test]
    fn free_time_first_order_residuals() {
        let (sys, m, traj, e, basis) = synthetic_free_time(2000);
        let fam = solve_multiplier_cone(&traj, &e, &basis, None, &Tolerances::default()).unwrap();
        assert_eq!(fam.rays.len(), 1);
        let res = free_time_first_order_residual(&sys, &m, &traj, &basis.adjoint(&fam.rays[0])).unwrap();
        assert!(res.max <= 1e-7, "{}", res.max);

        // autonomous flat ẋ = u, ū ≡ 1, p ≡ c
        let flat = ControlSystem::parse(1, 1, &["u1"]).unwrap();
        let grid = UniformGrid::new(0.0, 1.0, 20);
        let traj = dynamics::integrate_state(&flat, &m, &dvector![0.0], &GridFn::constant(grid, dvector![1.0]), Horizon::Free(1.0)).unwrap();
        let p = dynamics::integrate_adjoint(&flat, &traj, &dvector![-0.8]).unwrap();
        let res = free_time_first_order_residual(&flat, &m, &traj, &p).unwrap();
        assert!((res.max - 0.8).abs() < 1e-14);
        let zero = dynamics::integrate_adjoint(&flat, &traj, &dvector![0.0]).unwrap();
        assert_eq!(free_time_first_order_residual(&flat, &m, &traj, &zero).unwrap().max, 0.0);
    }

    #[test]
    fn synthetic_free_time_functional_converges() {
        // pinned against a fine-grid run
        let run = |steps: usize| {
            let (sys, m, traj, e, basis) = synthetic_free_time(steps);
            let xi = GridFn::from_fn(traj.grid, |t| dvector![1.0 - t]);
            let v = GridFn::constant(traj.grid, dvector![0.5]);
            let x = dynamics::integrate_first_variation_free_time(&sys, &traj, &xi, &v, &dvector![0.0], 1.0).unwrap();
            let inputs = SecondOrderInputs { sys: &sys, manifold: &m, traj: &traj, endpoints: &e, direction: &v, variation: &x, xi: Some(&xi) };
            let ell = dvector![-1.0, 1.0];
            free_time_second_order_lhs(&inputs, &ell, &basis.adjoint(&ell), &GridFn::zeros(traj.grid, 1)).unwrap().total
        };
        let (a, b, c) = (run(100), run(200), run(4000));
        assert!((b - c).abs() < (a - c).abs() || (a - c).abs() < 1e-10);
        assert!((b - c).abs() < 1e-5, "{b} {c}");
    }

    #[test]
    fn reparameterization_round_trip() {
        let (_, _, traj) = example_trajectory(2.0, 400);
        let unit = reparameterize_to_unit(&traj);
        assert!((unit.state_at(0.5) - traj.states.values[200].clone()).amax() < 1e-12);
        let (states, controls) = unit.restore();
        for (a, b) in states.values.iter().zip(&traj.states.values) {
            assert!((a - b).amax() <= 1e-10);
        }
        for (a, b) in states.derivs.iter().zip(&traj.states.derivs) {
            assert!((a - b).amax() <= 1e-10);
        }
        assert_eq!(controls.values, traj.controls.values);
        let (_, _, one) = example_trajectory(1.0, 10);
        let u = reparameterize_to_unit(&one);
        assert_eq!(u.states.values, one.states.values);
        assert_eq!(u.states.derivs, one.states.derivs);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn second_order_is_linear_in_the_multiplier(l in 0.1f64..5.0, a in -1.0f64..0.0, b in -1.0f64..0.0, c in -1.0f64..0.0) {
            let s = setup(1.0, 200);
            let v = GridFn::constant(s.traj.grid, dvector![0.0, 1.0]);
            let x = dynamics::integrate_first_variation(&s.sys, &s.traj, &v, &dvector![0.0, 0.0]).unwrap();
            let inputs = example_inputs(&s, &v, &x);
            let sigma = GridFn::constant(s.traj.grid, dvector![-0.5, 0.1]);
            let ell = dvector![a, b, c, 0.0, -c - b];
            let base = second_order_lhs(&inputs, &ell, &s.basis.adjoint(&ell), &sigma).unwrap();
            let scaled_ell = &ell * l;
            let scaled = second_order_lhs(&inputs, &scaled_ell, &s.basis.adjoint(&scaled_ell), &sigma).unwrap();
            for (x, y) in base.parts().iter().zip(scaled.parts()) {
                prop_assert!((x * l - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
            // affine in σ with slope Simpson(2 ∂H/∂u ·)
            let sigma2 = GridFn::constant(s.traj.grid, dvector![-0.5 + l, 0.1]);
            let shifted = second_order_lhs(&inputs, &ell, &s.basis.adjoint(&ell), &sigma2).unwrap();
            let p = s.basis.adjoint(&ell);
            let slope: Vec<f64> = (0..s.traj.grid.len())
                .map(|i| {
                    let fu = s.sys.linearize(s.traj.time(At::Node(i)), &s.traj.states.values[i], &s.traj.controls.values[i]).unwrap().2;
                    2.0 * (p.values[i].transpose() * fu * dvector![l, 0.0])[0]
                })
                .collect();
            prop_assert!((shifted.total - base.total - s.traj.grid.simpson(&slope)).abs() < 1e-12);
        }

        #[test]
        fn family_rays_satisfy_invariants(t in 0.3f64..3.0) {
            let s = setup(t, 100);
            for r in &s.family.rays {
                prop_assert!(s.family.equality_defect(r) <= 1e-7);
                prop_assert!(s.family.satisfies_signs(r, 1e-12));
                prop_assert!((r.iter().map(|x| x.abs()).sum::<f64>() - 1.0).abs() < 1e-12);
                if r[2] == 0.0 {
                    let prof = check_first_order(&s.sys, &s.traj, &s.basis.adjoint(r), &ball(), 1e-7).unwrap();
                    prop_assert!(prof.holds);
                }
            }
        }
    }
}
