//! Convex control sets, their adjacent cones and second-order adjacent sets,
//! and the support-type suprema used by the optimality checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MEMBERSHIP_TOL: f64 = 1e-9;

/// Up to this many halfspaces the cone support is computed by active-set
/// enumeration; beyond it, by sampling.
const EXACT_SUPPORT_LIMIT: usize = 12;
const SUPPORT_SAMPLES: usize = 4096;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConeError {
    #[error("point {point:?} is not in the control set")]
    NotInSet { point: Vec<f64> },
    #[error("direction {direction:?} is not in the adjacent cone")]
    NotInCone { direction: Vec<f64> },
    #[error("the shifted cone is empty")]
    Empty,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConvexSet {
    Ball { center: Vec<f64>, radius: f64 },
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// `{u : A u ≤ b}`, `A` given by rows.
    Polyhedron { a: Vec<Vec<f64>>, b: Vec<f64> },
}

/// `{v : n_k · v ≤ 0 for all k}`; no normals means the whole space.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeRepr {
    pub dim: usize,
    pub normals: Vec<DVector<f64>>,
}

/// `{w : n_k · w ≤ β_k for all k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedConeRepr {
    pub dim: usize,
    pub halfspaces: Vec<(DVector<f64>, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportMethod {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Support {
    pub value: f64,
    pub method: SupportMethod,
}

/// A supremum that may be `+∞`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Extended {
    Finite(f64),
    PlusInfinity,
}

impl Extended {
    pub fn is_finite(&self) -> bool {
        matches!(self, Extended::Finite(_))
    }

    pub fn to_f64(self) -> f64 {
        match self {
            Extended::Finite(v) => v,
            Extended::PlusInfinity => f64::INFINITY,
        }
    }

    pub fn from_f64(v: f64) -> Self {
        if v == f64::INFINITY {
            Extended::PlusInfinity
        } else {
            Extended::Finite(v)
        }
    }
}

impl Serialize for Extended {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Extended::Finite(v) => s.serialize_f64(*v),
            Extended::PlusInfinity => s.serialize_str("+inf"),
        }
    }
}

pub trait Contains {
    fn contains(&self, point: &DVector<f64>) -> bool;
}

fn scaled_tol(scale: f64) -> f64 {
    MEMBERSHIP_TOL * (1.0 + scale)
}

impl ConvexSet {
    pub fn ball(center: Vec<f64>, radius: f64) -> Self {
        ConvexSet::Ball { center, radius }
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexSet::Ball { center, .. } => center.len(),
            ConvexSet::Box { lower, .. } => lower.len(),
            ConvexSet::Polyhedron { a, .. } => a.first().map_or(0, |r| r.len()),
        }
    }

    /// Constraint rows `(n_k, b_k)` with `n_k · u ≤ b_k` for box and
    /// polyhedron sets.
    fn linear_rows(&self) -> Vec<(DVector<f64>, f64)> {
        match self {
            ConvexSet::Ball { .. } => Vec::new(),
            ConvexSet::Box { lower, upper } => {
                let m = lower.len();
                let mut rows = Vec::with_capacity(2 * m);
                for i in 0..m {
                    let e = DVector::from_fn(m, |k, _| if k == i { 1.0 } else { 0.0 });
                    rows.push((-&e, -lower[i]));
                    rows.push((e, upper[i]));
                }
                rows
            }
            ConvexSet::Polyhedron { a, b } => a
                .iter()
                .zip(b)
                .map(|(row, bk)| (DVector::from_column_slice(row), *bk))
                .collect(),
        }
    }

    /// Euclidean distance to the set; `None` for general polyhedra.
    pub fn distance(&self, u: &DVector<f64>) -> Option<f64> {
        match self {
            ConvexSet::Ball { center, radius } => {
                let d = (u - DVector::from_column_slice(center)).norm();
                Some((d - radius).max(0.0))
            }
            ConvexSet::Box { lower, upper } => Some(
                u.iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let c = x.clamp(lower[i], upper[i]);
                        (x - c) * (x - c)
                    })
                    .sum::<f64>()
                    .sqrt(),
            ),
            ConvexSet::Polyhedron { .. } => None,
        }
    }

    fn check(&self, u: &DVector<f64>) -> Result<(), ConeError> {
        if u.len() != self.dim() {
            return Err(ConeError::Dimension { expected: self.dim(), got: u.len() });
        }
        if !self.contains(u) {
            return Err(ConeError::NotInSet { point: u.iter().copied().collect() });
        }
        Ok(())
    }
}

impl Contains for ConvexSet {
    fn contains(&self, u: &DVector<f64>) -> bool {
        match self {
            ConvexSet::Ball { center, radius } => {
                (u - DVector::from_column_slice(center)).norm() <= radius + scaled_tol(*radius)
            }
            _ => self
                .linear_rows()
                .iter()
                .all(|(n, b)| n.dot(u) <= b + scaled_tol(b.abs())),
        }
    }
}

impl Contains for ConeRepr {
    fn contains(&self, v: &DVector<f64>) -> bool {
        self.normals
            .iter()
            .all(|n| n.dot(v) <= scaled_tol(0.0) * (n.norm() * v.norm()).max(1.0))
    }
}

impl Contains for ShiftedConeRepr {
    fn contains(&self, w: &DVector<f64>) -> bool {
        self.halfspaces
            .iter()
            .all(|(n, b)| n.dot(w) <= b + scaled_tol(b.abs()))
    }
}

impl ConeRepr {
    pub fn whole(dim: usize) -> Self {
        ConeRepr { dim, normals: Vec::new() }
    }

    pub fn is_whole_space(&self) -> bool {
        self.normals.is_empty()
    }

    /// The cone as a shifted cone with zero offsets.
    pub fn to_shifted(&self) -> ShiftedConeRepr {
        ShiftedConeRepr {
            dim: self.dim,
            halfspaces: self.normals.iter().map(|n| (n.clone(), 0.0)).collect(),
        }
    }
}

impl ShiftedConeRepr {
    pub fn whole(dim: usize) -> Self {
        ShiftedConeRepr { dim, halfspaces: Vec::new() }
    }

    /// Empty only through a degenerate row `0 · w ≤ β` with `β < 0`.
    pub fn is_empty(&self) -> bool {
        self.halfspaces
            .iter()
            .any(|(n, b)| n.norm() == 0.0 && *b < -MEMBERSHIP_TOL)
    }
}

/// First-order tangent directions to `set` at `u`.
pub fn adjacent_cone(set: &ConvexSet, u: &DVector<f64>) -> Result<ConeRepr, ConeError> {
    set.check(u)?;
    let dim = set.dim();
    let normals = match set {
        ConvexSet::Ball { center, radius } => {
            let n = u - DVector::from_column_slice(center);
            if n.norm() < radius - scaled_tol(*radius) {
                Vec::new()
            } else {
                vec![n]
            }
        }
        _ => set
            .linear_rows()
            .into_iter()
            .filter(|(n, b)| n.dot(u) >= b - scaled_tol(b.abs()))
            .map(|(n, _)| n)
            .collect(),
    };
    Ok(ConeRepr { dim, normals })
}

/// Second-order adjacent subset of `set` at `u` in direction `v`.
pub fn second_order_set(set: &ConvexSet, u: &DVector<f64>, v: &DVector<f64>) -> Result<ShiftedConeRepr, ConeError> {
    let cone = adjacent_cone(set, u)?;
    if v.len() != cone.dim {
        return Err(ConeError::Dimension { expected: cone.dim, got: v.len() });
    }
    if !cone.contains(v) {
        return Err(ConeError::NotInCone { direction: v.iter().copied().collect() });
    }
    let tangential = |n: &DVector<f64>| n.dot(v).abs() <= scaled_tol(0.0) * (n.norm() * v.norm()).max(1.0);
    let halfspaces = match set {
        ConvexSet::Ball { .. } => cone
            .normals
            .iter()
            .filter(|n| tangential(n))
            .map(|n| (n.clone(), -0.5 * v.norm_squared()))
            .collect(),
        _ => cone
            .normals
            .iter()
            .filter(|n| tangential(n))
            .map(|n| (n.clone(), 0.0))
            .collect(),
    };
    Ok(ShiftedConeRepr { dim: cone.dim, halfspaces })
}

/// Sampled `max_ε d_U(u + εv)/ε²`, a lower estimate of `η` in
/// `d_U(u + εv) ≤ ε² η`. `None` when the distance is not available.
pub fn distance_ratio(set: &ConvexSet, u: &DVector<f64>, v: &DVector<f64>, eps: &[f64]) -> Option<f64> {
    eps.iter()
        .map(|&e| set.distance(&(u + v * e)).map(|d| d / (e * e)))
        .try_fold(0.0f64, |acc, r| r.map(|r| acc.max(r)))
}

/// Orthogonal projection of `c` onto the null space of the rows `rows`.
fn project_off(c: &DVector<f64>, rows: &[&DVector<f64>]) -> DVector<f64> {
    if rows.is_empty() {
        return c.clone();
    }
    let n = DMatrix::from_rows(&rows.iter().map(|r| r.transpose()).collect::<Vec<_>>());
    let gram = &n * n.transpose();
    let rhs = &n * c;
    let coeffs = gram
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .expect("SVD solve with computed U and V");
    c - n.transpose() * coeffs
}

/// `sup {c · v : v ∈ cone, |v| ≤ 1}`, i.e. the norm of the projection of
/// `c` onto the cone.
pub fn support_over_cone(cone: &ConeRepr, c: &DVector<f64>) -> Support {
    let exact = |value: f64| Support { value, method: SupportMethod::Exact };
    match cone.normals.len() {
        0 => exact(c.norm()),
        1 => {
            let n = &cone.normals[0];
            let nc = n.dot(c);
            if nc <= 0.0 {
                exact(c.norm())
            } else {
                exact((c - n * (nc / n.norm_squared())).norm())
            }
        }
        k if k <= EXACT_SUPPORT_LIMIT => {
            // the projection is the subspace projection for some active set;
            // among feasible candidates it is the one closest to c
            let mut best_dist = f64::INFINITY;
            let mut best_norm = 0.0;
            for mask in 0u32..(1u32 << k) {
                let rows: Vec<&DVector<f64>> = (0..k).filter(|i| mask & (1 << i) != 0).map(|i| &cone.normals[i]).collect();
                let p = project_off(c, &rows);
                if cone.contains(&p) {
                    let d = (c - &p).norm();
                    if d < best_dist {
                        best_dist = d;
                        best_norm = p.norm();
                    }
                }
            }
            exact(best_norm)
        }
        _ => Support {
            value: sampled_support(cone, c),
            method: SupportMethod::Sampled,
        },
    }
}

fn sampled_support(cone: &ConeRepr, c: &DVector<f64>) -> f64 {
    let m = cone.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut best = 0.0;
    let mut best_v = DVector::zeros(m);
    let consider = |v: DVector<f64>, best: &mut f64, best_v: &mut DVector<f64>| {
        let norm = v.norm();
        if norm == 0.0 {
            return;
        }
        let v = v / norm;
        if cone.contains(&v) {
            let val = c.dot(&v);
            if val > *best {
                *best = val;
                *best_v = v;
            }
        }
    };
    consider(c.clone(), &mut best, &mut best_v);
    for _ in 0..SUPPORT_SAMPLES {
        let v = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        consider(v, &mut best, &mut best_v);
    }
    // local polish by shrinking random perturbations
    let mut radius = 0.1;
    for _ in 0..2000 {
        let trial = &best_v + DVector::from_fn(m, |_, _| rng.random_range(-radius..radius));
        let before = best;
        consider(trial, &mut best, &mut best_v);
        if best <= before {
            radius *= 0.995;
        }
    }
    best
}

/// One basic index set of the dual LP, factored once.
#[derive(Debug, Clone, PartialEq)]
struct DualBasis {
    /// selected normals as columns, `dim × size`
    normals: DMatrix<f64>,
    /// least-squares solve for the multipliers, `size × dim`
    solve: DMatrix<f64>,
    offsets: Vec<f64>,
}

/// `sup {c0 + c · w : w ∈ S}` through the LP dual
/// `min {β^T λ : N^T λ = c, λ ≥ 0}`, with every basic solution factored up
/// front so repeated evaluations are cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineSup {
    dim: usize,
    bases: Vec<DualBasis>,
}

impl AffineSup {
    pub fn new(set: &ShiftedConeRepr) -> Result<Self, ConeError> {
        if set.is_empty() {
            return Err(ConeError::Empty);
        }
        let k = set.halfspaces.len();
        let m = set.dim;
        let max_size = k.min(m);
        let mut bases = Vec::new();
        for mask in 1u32..(1u32 << k) {
            let size = mask.count_ones() as usize;
            if size > max_size {
                continue;
            }
            let idx: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
            let normals = DMatrix::from_columns(&idx.iter().map(|&i| set.halfspaces[i].0.clone()).collect::<Vec<_>>());
            let svd = normals.clone().svd(true, true);
            if svd.rank(1e-10 * (1.0 + normals.norm())) < size {
                continue;
            }
            let solve = svd.pseudo_inverse(1e-12).expect("SVD with computed U and V");
            bases.push(DualBasis {
                normals,
                solve,
                offsets: idx.iter().map(|&i| set.halfspaces[i].1).collect(),
            });
        }
        Ok(AffineSup { dim: m, bases })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sup(&self, c: &[f64], c0: f64) -> Result<Extended, ConeError> {
        if c.len() != self.dim {
            return Err(ConeError::Dimension { expected: self.dim, got: c.len() });
        }
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= MEMBERSHIP_TOL {
            return Ok(Extended::Finite(c0));
        }
        let tol = MEMBERSHIP_TOL * (1.0 + norm);
        let mut best: Option<f64> = None;
        let mut lambda = Vec::new();
        'bases: for b in &self.bases {
            let size = b.offsets.len();
            lambda.clear();
            for j in 0..size {
                let l: f64 = (0..self.dim).map(|r| b.solve[(j, r)] * c[r]).sum();
                if l < -tol {
                    continue 'bases;
                }
                lambda.push(l);
            }
            let mut residual = 0.0;
            for (r, cr) in c.iter().enumerate() {
                let v: f64 = (0..size).map(|j| b.normals[(r, j)] * lambda[j]).sum::<f64>() - cr;
                residual += v * v;
            }
            if residual.sqrt() > tol {
                continue;
            }
            let value: f64 = lambda.iter().zip(&b.offsets).map(|(l, beta)| l.max(0.0) * beta).sum();
            best = Some(best.map_or(value, |v: f64| v.min(value)));
        }
        Ok(match best {
            Some(v) => Extended::Finite(c0 + v),
            None => Extended::PlusInfinity,
        })
    }
}

/// `sup {c0 + c · w : w ∈ S}`; see [`AffineSup`] for repeated evaluation.
pub fn sup_affine_over_shifted(set: &ShiftedConeRepr, c: &DVector<f64>, c0: f64) -> Result<Extended, ConeError> {
    if c.len() != set.dim {
        return Err(ConeError::Dimension { expected: set.dim, got: c.len() });
    }
    AffineSup::new(set)?.sup(c.as_slice(), c0)
}
