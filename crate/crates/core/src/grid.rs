//! Uniform time grids, fixed-step RK4 and grid quadrature.
//!
//! Every field integrated along a trajectory is stored as node values plus
//! node derivatives. RK4 stages need values half a step away from the nodes;
//! those come from the cubic Hermite interpolant of the stored data, which is
//! accurate to O(h^4) and keeps the overall scheme fourth order.

use nalgebra::DVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformGrid {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
}

/// A sampling location on a grid: node `i`, or the midpoint of `[t_i, t_{i+1}]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum At {
    Node(usize),
    Mid(usize),
}

impl UniformGrid {
    pub fn new(t0: f64, t1: f64, steps: usize) -> Self {
        assert!(steps > 0, "grid needs at least one step");
        UniformGrid { t0, t1, steps }
    }

    pub fn step(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, at: At) -> f64 {
        let h = self.step();
        match at {
            At::Node(i) if i == self.steps => self.t1,
            At::Node(i) => self.t0 + i as f64 * h,
            At::Mid(i) => self.t0 + (i as f64 + 0.5) * h,
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(At::Node(i))).collect()
    }

    /// Composite Simpson weights; requires an even step count.
    pub fn simpson_weights(&self) -> Vec<f64> {
        assert!(self.steps.is_multiple_of(2), "Simpson quadrature needs an even step count");
        let h = self.step();
        (0..=self.steps)
            .map(|i| {
                let c = if i == 0 || i == self.steps {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                c * h / 3.0
            })
            .collect()
    }

    pub fn simpson(&self, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.len());
        self.simpson_weights()
            .iter()
            .zip(values)
            .map(|(w, v)| w * v)
            .sum()
    }

    /// `out[i] = ∫_{t_i}^{t1} g`, Simpson on the tail. An odd tail ends with a
    /// 3/8-rule panel; the last interval alone integrates the quadratic
    /// through the final three nodes.
    pub fn tail_integrals(&self, values: &[f64]) -> Vec<f64> {
        assert_eq!(values.len(), self.len());
        let n = self.steps;
        let h = self.step();
        let mut out = vec![0.0; n + 1];
        for (i, slot) in out.iter_mut().enumerate().take(n) {
            *slot = if i + 1 == n && n >= 2 {
                h / 12.0 * (-values[n - 2] + 8.0 * values[n - 1] + 5.0 * values[n])
            } else {
                panel_integral(&values[i..=n], h)
            };
        }
        out
    }

    /// Running integral `∫_{t0}^{t_i} g` of a piecewise-linear grid function
    /// (exact for that interpolant).
    pub fn running_trapezoid(&self, values: &[f64]) -> Vec<f64> {
        let h = self.step();
        let mut out = Vec::with_capacity(values.len());
        let mut acc = 0.0;
        out.push(0.0);
        for w in values.windows(2) {
            acc += 0.5 * h * (w[0] + w[1]);
            out.push(acc);
        }
        out
    }
}

fn panel_integral(v: &[f64], h: f64) -> f64 {
    let intervals = v.len() - 1;
    match intervals {
        0 => 0.0,
        1 => 0.5 * h * (v[0] + v[1]),
        _ if intervals.is_multiple_of(2) => simpson_even(v, h),
        3 => 3.0 * h / 8.0 * (v[0] + 3.0 * v[1] + 3.0 * v[2] + v[3]),
        _ => {
            let split = intervals - 3;
            simpson_even(&v[..=split], h)
                + 3.0 * h / 8.0 * (v[split] + 3.0 * v[split + 1] + 3.0 * v[split + 2] + v[split + 3])
        }
    }
}

fn simpson_even(v: &[f64], h: f64) -> f64 {
    let n = v.len() - 1;
    let mut s = v[0] + v[n];
    for (i, x) in v.iter().enumerate().take(n).skip(1) {
        s += if i % 2 == 1 { 4.0 * x } else { 2.0 * x };
    }
    s * h / 3.0
}

/// Midpoint value of the cubic Hermite interpolant on an interval of length `h`.
pub fn hermite_mid(y0: &DVector<f64>, y1: &DVector<f64>, d0: &DVector<f64>, d1: &DVector<f64>, h: f64) -> DVector<f64> {
    (y0 + y1) * 0.5 + (d0 - d1) * (h / 8.0)
}

/// Node values and node derivatives of a vector-valued function on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub grid: UniformGrid,
    pub values: Vec<DVector<f64>>,
    pub derivs: Vec<DVector<f64>>,
}

impl GridField {
    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn at(&self, at: At) -> DVector<f64> {
        match at {
            At::Node(i) => self.values[i].clone(),
            At::Mid(i) => hermite_mid(
                &self.values[i],
                &self.values[i + 1],
                &self.derivs[i],
                &self.derivs[i + 1],
                self.grid.step(),
            ),
        }
    }

    pub fn node(&self, i: usize) -> &DVector<f64> {
        &self.values[i]
    }

    pub fn first(&self) -> &DVector<f64> {
        &self.values[0]
    }

    pub fn last(&self) -> &DVector<f64> {
        &self.values[self.values.len() - 1]
    }

    /// Component `k` at every node.
    pub fn component(&self, k: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[k]).collect()
    }
}

/// Piecewise-linear grid function (controls, directions, time-change rates).
#[derive(Debug, Clone, PartialEq)]
pub struct GridFn {
    pub grid: UniformGrid,
    pub values: Vec<DVector<f64>>,
}

impl GridFn {
    pub fn constant(grid: UniformGrid, value: DVector<f64>) -> Self {
        GridFn {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: UniformGrid, f: impl Fn(f64) -> DVector<f64>) -> Self {
        GridFn {
            grid,
            values: grid.times().into_iter().map(f).collect(),
        }
    }

    pub fn zeros(grid: UniformGrid, dim: usize) -> Self {
        Self::constant(grid, DVector::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn at(&self, at: At) -> DVector<f64> {
        match at {
            At::Node(i) => self.values[i].clone(),
            At::Mid(i) => (&self.values[i] + &self.values[i + 1]) * 0.5,
        }
    }

    /// `self + eps * a + eps^2 * b`, node-wise.
    pub fn perturbed(&self, eps: f64, a: &GridFn, b: &GridFn) -> GridFn {
        GridFn {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&a.values)
                .zip(&b.values)
                .map(|((u, v), s)| u + v * eps + s * (eps * eps))
                .collect(),
        }
    }

    pub fn scalar(&self, i: usize) -> f64 {
        self.values[i][0]
    }
}

/// Direction of integration over the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    Forward,
    Backward,
}

/// Classical RK4 over the grid nodes. `rhs(at, y)` is evaluated at nodes and
/// midpoints only. Returns node values and the right-hand side at each node.
pub fn rk4<E, F>(grid: UniformGrid, y_start: DVector<f64>, sweep: Sweep, mut rhs: F) -> Result<GridField, E>
where
    F: FnMut(At, &DVector<f64>) -> Result<DVector<f64>, E>,
{
    let n = grid.steps;
    let h = grid.step();
    let mut values = vec![DVector::zeros(0); n + 1];
    let mut derivs = vec![DVector::zeros(0); n + 1];
    match sweep {
        Sweep::Forward => {
            let mut y = y_start;
            for i in 0..n {
                let k1 = rhs(At::Node(i), &y)?;
                let k2 = rhs(At::Mid(i), &(&y + &k1 * (0.5 * h)))?;
                let k3 = rhs(At::Mid(i), &(&y + &k2 * (0.5 * h)))?;
                let k4 = rhs(At::Node(i + 1), &(&y + &k3 * h))?;
                let next = &y + (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (h / 6.0);
                values[i] = y;
                derivs[i] = k1;
                y = next;
            }
            derivs[n] = rhs(At::Node(n), &y)?;
            values[n] = y;
        }
        Sweep::Backward => {
            let mut y = y_start;
            for i in (0..n).rev() {
                let k1 = rhs(At::Node(i + 1), &y)?;
                let k2 = rhs(At::Mid(i), &(&y - &k1 * (0.5 * h)))?;
                let k3 = rhs(At::Mid(i), &(&y - &k2 * (0.5 * h)))?;
                let k4 = rhs(At::Node(i), &(&y - &k3 * h))?;
                let next = &y - (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (h / 6.0);
                values[i + 1] = y;
                derivs[i + 1] = k1;
                y = next;
            }
            derivs[0] = rhs(At::Node(0), &y)?;
            values[0] = y;
        }
    }
    Ok(GridField { grid, values, derivs })
}
