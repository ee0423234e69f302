//! Chart-level Riemannian geometry for flat `R^n` and graphs of height
//! functions over the plane.
//!
//! For the graph `{(x1, x2, a(x1, x2))}` with the induced metric, with
//! `W = 1 + a_1^2 + a_2^2`:
//!
//! ```text
//! g_il    = δ_il + a_i a_l
//! Γ^l_ip  = a_l a_ip / W
//! K       = (a_11 a_22 - a_12^2) / W^2
//! ```
//!
//! Third-order information (derivatives of the Christoffel symbols) is taken
//! by central differences with a configurable step.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::exprlang::{self, Expr, ExprError, VarSet};
use crate::grid::{hermite_mid, rk4, At, GridField, Sweep, UniformGrid};

pub type ChartPoint = DVector<f64>;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("non-finite geometric quantity at {at:?}: {what}")]
    NonFinite { what: String, at: Vec<f64> },
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("operands live at different base points")]
    MismatchedBase,
    #[error("log map did not converge after {iterations} iterations (residual {residual:e}); points too far apart")]
    LogMapDiverged { iterations: usize, residual: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Height function of a graph manifold with its symbolic partials.
#[derive(Debug, Clone)]
pub struct GraphHeight {
    pub source: String,
    vars: VarSet,
    height: Expr,
    grad: [Expr; 2],
    hess: [[Expr; 2]; 2],
}

impl GraphHeight {
    pub fn parse(source: &str) -> Result<Self, ExprError> {
        let vars = VarSet::new(["x1", "x2"]);
        let height = exprlang::parse(source, &vars)?;
        let g1 = height.differentiate(0);
        let g2 = height.differentiate(1);
        let h11 = g1.differentiate(0);
        let h12 = g1.differentiate(1);
        let h22 = g2.differentiate(1);
        Ok(GraphHeight {
            source: source.to_string(),
            vars,
            height,
            grad: [g1, g2],
            hess: [[h11.clone(), h12.clone()], [h12, h22]],
        })
    }

    pub fn vars(&self) -> &VarSet {
        &self.vars
    }

    pub fn height(&self) -> &Expr {
        &self.height
    }
}

#[derive(Debug, Clone)]
pub enum ManifoldKind {
    Flat { dim: usize },
    Graph(Box<GraphHeight>),
}

#[derive(Debug, Clone)]
pub struct Manifold {
    pub kind: ManifoldKind,
    pub fd_step: f64,
}

/// Height derivatives at a point, up to second order.
#[derive(Debug, Clone, Copy)]
struct HeightJet {
    a: [f64; 2],
    aa: [[f64; 2]; 2],
}

impl HeightJet {
    fn w(&self) -> f64 {
        1.0 + self.a[0] * self.a[0] + self.a[1] * self.a[1]
    }
}

/// Metric matrix with its inverse and symmetric square roots.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricInfo {
    pub g: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    pub sqrt: DMatrix<f64>,
    pub inverse_sqrt: DMatrix<f64>,
}

/// Christoffel symbols `Γ^l_{ip}` stored densely, `get(l, i, p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Christoffel {
    n: usize,
    data: Vec<f64>,
}

impl Christoffel {
    pub fn zeros(n: usize) -> Self {
        Christoffel {
            n,
            data: vec![0.0; n * n * n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, l: usize, i: usize, p: usize) -> f64 {
        self.data[(l * self.n + i) * self.n + p]
    }

    fn set(&mut self, l: usize, i: usize, p: usize, v: f64) {
        let n = self.n;
        self.data[(l * n + i) * n + p] = v;
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }

    /// `Γ^k(a, b) = Σ Γ^k_{ij} a^i b^j`.
    pub fn contract(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        DVector::from_fn(n, |k, _| {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += self.get(k, i, j) * a[i] * b[j];
                }
            }
            s
        })
    }

    /// Matrix `M^k_j = Σ_i Γ^k_{ij} v^i` (the connection along `v`).
    pub fn along(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |k, j| (0..n).map(|i| self.get(k, i, j) * v[i]).sum())
    }
}

/// Chart derivatives `∂Γ^l_{ip}/∂ξ_k`, `get(l, i, p, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChristoffelGrad {
    n: usize,
    data: Vec<f64>,
}

impl ChristoffelGrad {
    pub fn get(&self, l: usize, i: usize, p: usize, k: usize) -> f64 {
        let n = self.n;
        self.data[((l * n + i) * n + p) * n + k]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TangentVec {
    pub base: ChartPoint,
    pub components: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Covector {
    pub base: ChartPoint,
    pub components: DVector<f64>,
}

/// What a transported quantity is; covectors use the sign-flipped action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variance {
    Vector,
    Covector,
}

/// A curve sampled on a uniform grid, queried at nodes and midpoints.
pub trait Curve {
    fn grid(&self) -> UniformGrid;
    fn point(&self, at: At) -> DVector<f64>;
    fn velocity(&self, at: At) -> DVector<f64>;
}

impl Curve for GridField {
    fn grid(&self) -> UniformGrid {
        self.grid
    }

    fn point(&self, at: At) -> DVector<f64> {
        self.at(at)
    }

    fn velocity(&self, at: At) -> DVector<f64> {
        match at {
            At::Node(i) => self.derivs[i].clone(),
            // derivative of the cubic Hermite interpolant at the midpoint
            At::Mid(i) => {
                let h = self.grid.step();
                (&self.values[i + 1] - &self.values[i]) * (1.5 / h) - (&self.derivs[i] + &self.derivs[i + 1]) * 0.25
            }
        }
    }
}

/// Orthonormal frame transported along a curve, with its dual coframe.
///
/// Column `i` of `basis` holds the chart components of `e_i(t)`; row `i` of
/// `dual` holds those of `d_i(t)`.
#[derive(Debug, Clone)]
pub struct ParallelFrame {
    pub grid: UniformGrid,
    basis: GridField,
    dual: GridField,
    n: usize,
}

impl ParallelFrame {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn basis_at(&self, at: At) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n, self.n, self.basis.at(at).as_slice())
    }

    /// Dual coframe, rows are covectors.
    pub fn dual_at(&self, at: At) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, self.dual.at(at).as_slice())
    }

    /// Frame components `d_i(v)` of a chart vector.
    pub fn to_frame(&self, at: At, chart: &DVector<f64>) -> DVector<f64> {
        self.dual_at(at) * chart
    }

    /// Chart components of `Σ c_i e_i`.
    pub fn to_chart(&self, at: At, frame: &DVector<f64>) -> DVector<f64> {
        self.basis_at(at) * frame
    }
}

fn check_finite(what: &str, q: &DVector<f64>, v: f64) -> Result<f64, GeometryError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(GeometryError::NonFinite {
            what: what.to_string(),
            at: q.iter().copied().collect(),
        })
    }
}

impl Manifold {
    pub fn flat(dim: usize) -> Self {
        Manifold {
            kind: ManifoldKind::Flat { dim },
            fd_step: DEFAULT_FD_STEP,
        }
    }

    pub fn graph(height: &str) -> Result<Self, ExprError> {
        Ok(Manifold {
            kind: ManifoldKind::Graph(Box::new(GraphHeight::parse(height)?)),
            fd_step: DEFAULT_FD_STEP,
        })
    }

    pub fn with_fd_step(mut self, step: f64) -> Self {
        self.fd_step = step;
        self
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            ManifoldKind::Flat { dim } => *dim,
            ManifoldKind::Graph(_) => 2,
        }
    }

    pub fn is_flat(&self) -> bool {
        matches!(self.kind, ManifoldKind::Flat { .. })
    }

    fn check_dim(&self, v: &DVector<f64>) -> Result<(), GeometryError> {
        if v.len() != self.dim() {
            return Err(GeometryError::Dimension {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(())
    }

    fn jet(&self, h: &GraphHeight, q: &DVector<f64>) -> Result<HeightJet, GeometryError> {
        let s = [q[0], q[1]];
        let mut jet = HeightJet {
            a: [0.0; 2],
            aa: [[0.0; 2]; 2],
        };
        for i in 0..2 {
            jet.a[i] = check_finite("height gradient", q, h.grad[i].eval(&s)?)?;
            for j in 0..2 {
                jet.aa[i][j] = check_finite("height Hessian", q, h.hess[i][j].eval(&s)?)?;
            }
        }
        Ok(jet)
    }

    /// Metric matrix only.
    pub fn metric(&self, q: &ChartPoint) -> Result<DMatrix<f64>, GeometryError> {
        self.check_dim(q)?;
        match &self.kind {
            ManifoldKind::Flat { dim } => Ok(DMatrix::identity(*dim, *dim)),
            ManifoldKind::Graph(h) => {
                let j = self.jet(h, q)?;
                Ok(DMatrix::from_fn(2, 2, |i, l| {
                    let delta = if i == l { 1.0 } else { 0.0 };
                    delta + j.a[i] * j.a[l]
                }))
            }
        }
    }

    pub fn metric_at(&self, q: &ChartPoint) -> Result<MetricInfo, GeometryError> {
        let g = self.metric(q)?;
        let eig = g.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(GeometryError::NonFinite {
                what: "metric is not positive definite".into(),
                at: q.iter().copied().collect(),
            });
        }
        let v = &eig.eigenvectors;
        let map = |f: fn(f64) -> f64| {
            let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
            v * d * v.transpose()
        };
        Ok(MetricInfo {
            inverse: map(|l| 1.0 / l),
            sqrt: map(f64::sqrt),
            inverse_sqrt: map(|l| 1.0 / l.sqrt()),
            g,
        })
    }

    pub fn christoffel_at(&self, q: &ChartPoint) -> Result<Christoffel, GeometryError> {
        self.check_dim(q)?;
        match &self.kind {
            ManifoldKind::Flat { dim } => Ok(Christoffel::zeros(*dim)),
            ManifoldKind::Graph(h) => {
                let j = self.jet(h, q)?;
                let w = j.w();
                let mut c = Christoffel::zeros(2);
                for l in 0..2 {
                    for i in 0..2 {
                        for p in 0..2 {
                            c.set(l, i, p, j.a[l] * j.aa[i][p] / w);
                        }
                    }
                }
                Ok(c)
            }
        }
    }

    /// Central differences of [`Manifold::christoffel_at`] with step `fd_step`.
    pub fn christoffel_grad_at(&self, q: &ChartPoint) -> Result<ChristoffelGrad, GeometryError> {
        let n = self.dim();
        self.check_dim(q)?;
        let mut data = vec![0.0; n * n * n * n];
        if self.is_flat() {
            return Ok(ChristoffelGrad { n, data });
        }
        let step = self.fd_step;
        for k in 0..n {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[k] += step;
            qm[k] -= step;
            let cp = self.christoffel_at(&qp)?;
            let cm = self.christoffel_at(&qm)?;
            for l in 0..n {
                for i in 0..n {
                    for p in 0..n {
                        data[((l * n + i) * n + p) * n + k] = (cp.get(l, i, p) - cm.get(l, i, p)) / (2.0 * step);
                    }
                }
            }
        }
        Ok(ChristoffelGrad { n, data })
    }

    /// Gaussian curvature for graphs; zero on flat spaces of any dimension.
    pub fn sectional_curvature_at(&self, q: &ChartPoint) -> Result<f64, GeometryError> {
        self.check_dim(q)?;
        match &self.kind {
            ManifoldKind::Flat { .. } => Ok(0.0),
            ManifoldKind::Graph(h) => {
                let j = self.jet(h, q)?;
                let w = j.w();
                Ok((j.aa[0][0] * j.aa[1][1] - j.aa[0][1] * j.aa[0][1]) / (w * w))
            }
        }
    }

    pub fn inner(&self, q: &ChartPoint, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64, GeometryError> {
        let g = self.metric(q)?;
        Ok(x.dot(&(g * y)))
    }

    /// `|X| = |sqrt(G) X|`.
    pub fn vector_norm(&self, q: &ChartPoint, x: &DVector<f64>) -> Result<f64, GeometryError> {
        Ok((self.metric_at(q)?.sqrt * x).norm())
    }

    /// `|η| = |sqrt(G^{-1}) η|`.
    pub fn covector_norm(&self, q: &ChartPoint, eta: &DVector<f64>) -> Result<f64, GeometryError> {
        Ok((self.metric_at(q)?.inverse_sqrt * eta).norm())
    }

    pub fn norm_of_vector(&self, v: &TangentVec) -> Result<f64, GeometryError> {
        self.vector_norm(&v.base, &v.components)
    }

    pub fn norm_of_covector(&self, eta: &Covector) -> Result<f64, GeometryError> {
        self.covector_norm(&eta.base, &eta.components)
    }

    /// Metric pairing `g(X, Y)` of two vectors at the same base point.
    pub fn pair_vectors(&self, a: &TangentVec, b: &TangentVec) -> Result<f64, GeometryError> {
        if a.base != b.base {
            return Err(GeometryError::MismatchedBase);
        }
        self.inner(&a.base, &a.components, &b.components)
    }

    /// Duality pairing `η(X) = Σ η_i X^i`; independent of the metric.
    pub fn pair_dual(&self, eta: &Covector, x: &TangentVec) -> Result<f64, GeometryError> {
        if eta.base != x.base {
            return Err(GeometryError::MismatchedBase);
        }
        Ok(eta.components.dot(&x.components))
    }

    /// Dual vector of a covector, `G^{-1} η`.
    pub fn raise(&self, q: &ChartPoint, eta: &DVector<f64>) -> Result<DVector<f64>, GeometryError> {
        Ok(self.metric_at(q)?.inverse * eta)
    }

    /// `R(p̃, X, f, X) = -K (p(f)|X|^2 - p(X)<f, X>)`, valid in two dimensions
    /// and trivially on flat spaces.
    pub fn curvature_term(
        &self,
        q: &ChartPoint,
        p: &DVector<f64>,
        x: &DVector<f64>,
        f: &DVector<f64>,
    ) -> Result<f64, GeometryError> {
        if self.is_flat() {
            return Ok(0.0);
        }
        if self.dim() != 2 {
            return Err(GeometryError::Unsupported(
                "curvature term is only available for flat or two-dimensional manifolds".into(),
            ));
        }
        let k = self.sectional_curvature_at(q)?;
        let g = self.metric(q)?;
        let xx = x.dot(&(&g * x));
        let fx = f.dot(&(&g * x));
        Ok(-k * (p.dot(f) * xx - p.dot(x) * fx))
    }

    /// Covariant Hessian `∇²ζ(X, Y)` from chart gradient and Hessian.
    pub fn covariant_hessian(
        &self,
        q: &ChartPoint,
        grad: &DVector<f64>,
        hess: &DMatrix<f64>,
        x: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<f64, GeometryError> {
        let gamma = self.christoffel_at(q)?;
        let plain = x.dot(&(hess * y));
        // Σ Γ^η_{li} ∂_η ζ X_i Y_l
        let correction = grad.dot(&gamma.contract(y, x));
        Ok(plain - correction)
    }

    /// Covariant Hessian of a scalar expression whose first `n` slots are the
    /// chart coordinates.
    pub fn covariant_hessian_scalar(
        &self,
        zeta: &Expr,
        q: &ChartPoint,
        x: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<f64, GeometryError> {
        let n = self.dim();
        let slots: Vec<f64> = q.iter().copied().collect();
        let mut grad = DVector::zeros(n);
        let mut hess = DMatrix::zeros(n, n);
        for i in 0..n {
            let d = zeta.differentiate(i);
            grad[i] = d.eval(&slots)?;
            for l in 0..n {
                hess[(i, l)] = d.differentiate(l).eval(&slots)?;
            }
        }
        self.covariant_hessian(q, &grad, &hess, x, y)
    }

    fn transport_rhs(
        &self,
        point: &DVector<f64>,
        velocity: &DVector<f64>,
        v: &DVector<f64>,
        variance: Variance,
    ) -> Result<DVector<f64>, GeometryError> {
        let gamma = self.christoffel_at(point)?;
        let conn = gamma.along(velocity);
        Ok(match variance {
            Variance::Vector => -(conn * v),
            Variance::Covector => conn.transpose() * v,
        })
    }

    /// Parallel transport of `v0` along `curve` by RK4 on the curve's grid.
    pub fn parallel_transport(
        &self,
        curve: &dyn Curve,
        v0: &DVector<f64>,
        variance: Variance,
    ) -> Result<GridField, GeometryError> {
        if self.is_flat() {
            let grid = curve.grid();
            return Ok(GridField {
                grid,
                values: vec![v0.clone(); grid.len()],
                derivs: vec![DVector::zeros(v0.len()); grid.len()],
            });
        }
        rk4(curve.grid(), v0.clone(), Sweep::Forward, |at, v| {
            self.transport_rhs(&curve.point(at), &curve.velocity(at), v, variance)
        })
    }

    /// Orthonormal frame at the start of `curve` (Gram-Schmidt of the chart
    /// basis against the metric), transported along with its dual.
    pub fn build_parallel_frame(&self, curve: &dyn Curve) -> Result<ParallelFrame, GeometryError> {
        let n = self.dim();
        let q0 = curve.point(At::Node(0));
        let g = self.metric(&q0)?;
        let mut cols: Vec<DVector<f64>> = Vec::with_capacity(n);
        for k in 0..n {
            let mut v = DVector::from_fn(n, |i, _| if i == k { 1.0 } else { 0.0 });
            for c in &cols {
                let proj = c.dot(&(&g * &v));
                v -= c * proj;
            }
            let norm = v.dot(&(&g * &v)).sqrt();
            cols.push(v / norm);
        }
        let e0 = DMatrix::from_columns(&cols);
        let d0 = e0.clone().try_inverse().ok_or_else(|| GeometryError::NonFinite {
            what: "degenerate initial frame".into(),
            at: q0.iter().copied().collect(),
        })?;

        let flat_basis: DVector<f64> = DVector::from_column_slice(e0.as_slice());
        // row-major flattening of the dual
        let flat_dual: DVector<f64> = DVector::from_iterator(n * n, d0.transpose().iter().copied());
        let grid = curve.grid();
        if self.is_flat() {
            let zeros = DVector::zeros(n * n);
            return Ok(ParallelFrame {
                grid,
                basis: GridField {
                    grid,
                    values: vec![flat_basis; grid.len()],
                    derivs: vec![zeros.clone(); grid.len()],
                },
                dual: GridField {
                    grid,
                    values: vec![flat_dual; grid.len()],
                    derivs: vec![zeros; grid.len()],
                },
                n,
            });
        }
        let basis = rk4(grid, flat_basis, Sweep::Forward, |at, y| {
            let conn = self.christoffel_at(&curve.point(at))?.along(&curve.velocity(at));
            let e = DMatrix::from_column_slice(n, n, y.as_slice());
            let de = -(conn * e);
            Ok::<_, GeometryError>(DVector::from_column_slice(de.as_slice()))
        })?;
        let dual = rk4(grid, flat_dual, Sweep::Forward, |at, y| {
            let conn = self.christoffel_at(&curve.point(at))?.along(&curve.velocity(at));
            let d = DMatrix::from_row_slice(n, n, y.as_slice());
            // each row is a covector: η̇ = conn^T η  ⇒  Ḋ = D conn
            let dd = d * conn;
            Ok::<_, GeometryError>(DVector::from_iterator(n * n, dd.transpose().iter().copied()))
        })?;
        Ok(ParallelFrame { grid, basis, dual, n })
    }

    fn geodesic_rhs(&self, y: &DVector<f64>) -> Result<DVector<f64>, GeometryError> {
        let n = self.dim();
        let x = y.rows(0, n).into_owned();
        let v = y.rows(n, n).into_owned();
        let acc = -self.christoffel_at(&x)?.contract(&v, &v);
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&v);
        out.rows_mut(n, n).copy_from(&acc);
        Ok(out)
    }

    fn geodesic_steps(&self, q: &ChartPoint, v: &DVector<f64>, t: f64) -> usize {
        let speed = self.vector_norm(q, v).unwrap_or_else(|_| v.norm());
        (64.0_f64).max((400.0 * speed * t.abs()).ceil()) as usize
    }

    /// Position and velocity along the geodesic from `q` with initial velocity `v`.
    pub fn geodesic_path(&self, q: &ChartPoint, v: &DVector<f64>, t: f64, steps: usize) -> Result<GridField, GeometryError> {
        self.check_dim(q)?;
        self.check_dim(v)?;
        let n = self.dim();
        let mut y0 = DVector::zeros(2 * n);
        y0.rows_mut(0, n).copy_from(q);
        y0.rows_mut(n, n).copy_from(v);
        let grid = UniformGrid::new(0.0, t, steps);
        rk4(grid, y0, Sweep::Forward, |_, y| self.geodesic_rhs(y))
    }

    /// `exp_q(t V)` by RK4 on the geodesic equation.
    pub fn geodesic_shoot(&self, q: &ChartPoint, v: &DVector<f64>, t: f64) -> Result<ChartPoint, GeometryError> {
        if self.is_flat() {
            return Ok(q + v * t);
        }
        let steps = self.geodesic_steps(q, v, t);
        let path = self.geodesic_path(q, v, t, steps)?;
        Ok(path.last().rows(0, self.dim()).into_owned())
    }

    /// Inverse of [`Manifold::geodesic_shoot`] near `q`, by Newton iteration on
    /// the shooting residual.
    pub fn log_map(&self, q: &ChartPoint, target: &ChartPoint) -> Result<DVector<f64>, GeometryError> {
        self.check_dim(q)?;
        self.check_dim(target)?;
        if self.is_flat() {
            return Ok(target - q);
        }
        let n = self.dim();
        let scale = 1.0 + target.norm();
        let mut v = target - q;
        let mut residual = f64::INFINITY;
        for _ in 0..50 {
            let r = self.geodesic_shoot(q, &v, 1.0)? - target;
            residual = r.norm();
            if residual <= 1e-15 * scale {
                return Ok(v);
            }
            let delta = 1e-7 * (1.0 + v.norm());
            let mut jac = DMatrix::zeros(n, n);
            for k in 0..n {
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[k] += delta;
                vm[k] -= delta;
                let col = (self.geodesic_shoot(q, &vp, 1.0)? - self.geodesic_shoot(q, &vm, 1.0)?) / (2.0 * delta);
                jac.set_column(k, &col);
            }
            let step = jac.lu().solve(&r).ok_or(GeometryError::LogMapDiverged {
                iterations: 0,
                residual,
            })?;
            let next = &v - step;
            if !next.iter().all(|x| x.is_finite()) {
                break;
            }
            if (&next - &v).norm() <= 1e-16 * (1.0 + v.norm()) {
                v = next;
                residual = (self.geodesic_shoot(q, &v, 1.0)? - target).norm();
                break;
            }
            v = next;
        }
        if residual <= 1e-10 {
            Ok(v)
        } else {
            Err(GeometryError::LogMapDiverged { iterations: 50, residual })
        }
    }
}

/// Midpoint of a stored field, re-exported for callers holding raw vectors.
pub fn field_mid(field: &GridField, i: usize) -> DVector<f64> {
    hermite_mid(
        &field.values[i],
        &field.values[i + 1],
        &field.derivs[i],
        &field.derivs[i + 1],
        field.grid.step(),
    )
}
