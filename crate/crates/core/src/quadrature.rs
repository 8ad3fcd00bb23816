//! Gauss-Legendre rules, tensor rules on knot-span cells, and the singular
//! and near-singular rules used for the weakly singular single-layer kernel.

use crate::error::{Error, Result};

/// Maximum number of bisection levels for near-singular subdivision.
pub const MAX_SUBDIVISION_DEPTH: usize = 12;

/// Axis-aligned parametric rectangle `[u0, u1] x [v0, v1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub u0: f64,
    pub u1: f64,
    pub v0: f64,
    pub v1: f64,
}

impl Cell {
    pub fn new(u0: f64, u1: f64, v0: f64, v1: f64) -> Self {
        Self { u0, u1, v0, v1 }
    }

    pub fn unit() -> Self {
        Self::new(0.0, 1.0, 0.0, 1.0)
    }

    pub fn width(&self) -> f64 {
        self.u1 - self.u0
    }

    pub fn height(&self) -> f64 {
        self.v1 - self.v0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn diameter(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.u0 + self.u1), 0.5 * (self.v0 + self.v1)]
    }

    /// Map a point of the unit square into this cell.
    pub fn map(&self, r: [f64; 2]) -> [f64; 2] {
        [self.u0 + r[0] * self.width(), self.v0 + r[1] * self.height()]
    }

    /// Closed containment with an absolute tolerance.
    pub fn contains(&self, s: [f64; 2], tol: f64) -> bool {
        s[0] >= self.u0 - tol && s[0] <= self.u1 + tol && s[1] >= self.v0 - tol && s[1] <= self.v1 + tol
    }

    /// Euclidean distance from `s` to the closed cell.
    pub fn distance_to(&self, s: [f64; 2]) -> f64 {
        let du = (self.u0 - s[0]).max(0.0).max(s[0] - self.u1);
        let dv = (self.v0 - s[1]).max(0.0).max(s[1] - self.v1);
        du.hypot(dv)
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        [
            [self.u0, self.v0],
            [self.u1, self.v0],
            [self.u1, self.v1],
            [self.u0, self.v1],
        ]
    }

    /// Four congruent children.
    pub fn split(&self) -> [Cell; 4] {
        let [uc, vc] = self.center();
        [
            Cell::new(self.u0, uc, self.v0, vc),
            Cell::new(uc, self.u1, self.v0, vc),
            Cell::new(self.u0, uc, vc, self.v1),
            Cell::new(uc, self.u1, vc, self.v1),
        ]
    }
}

/// One-dimensional rule on `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussRule {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Gauss-Legendre rule with `order` points on `[0, 1]`, exact for
/// polynomials of degree `2 * order - 1`.
pub fn gauss_legendre(order: usize) -> Result<GaussRule> {
    if !(1..=64).contains(&order) {
        return Err(Error::QuadratureOrder(order));
    }
    let n = order;
    let mut points = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        points[i] = 0.5 * (1.0 - x);
        points[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    Ok(GaussRule { points, weights })
}

/// Legendre polynomial `P_n(x)` and its derivative.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Two-dimensional rule: points and positive weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuadratureRule {
    points: Vec<[f64; 2]>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ([f64; 2], f64)> + '_ {
        self.points.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn integrate(&self, mut f: impl FnMut([f64; 2]) -> f64) -> f64 {
        self.iter().map(|(s, w)| w * f(s)).sum()
    }

    /// Map a unit-square rule into `cell` (weights scaled by its area).
    pub fn mapped(&self, cell: &Cell) -> QuadratureRule {
        let a = cell.area();
        QuadratureRule {
            points: self.points.iter().map(|&r| cell.map(r)).collect(),
            weights: self.weights.iter().map(|w| w * a).collect(),
        }
    }

    fn append(&mut self, other: QuadratureRule) {
        self.points.extend(other.points);
        self.weights.extend(other.weights);
    }
}

/// Tensor Gauss rule on the unit square.
pub fn cell_rule(order_u: usize, order_v: usize) -> Result<QuadratureRule> {
    let gu = gauss_legendre(order_u)?;
    let gv = gauss_legendre(order_v)?;
    let mut rule = QuadratureRule::default();
    for (&xu, &wu) in gu.points.iter().zip(&gu.weights) {
        for (&xv, &wv) in gv.points.iter().zip(&gv.weights) {
            rule.points.push([xu, xv]);
            rule.weights.push(wu * wv);
        }
    }
    Ok(rule)
}

/// Rule on `cell` for integrands with a `1/|s - s0|` singularity at `s0`
/// (inside or on the boundary of the cell): the cell is fanned into
/// triangles from `s0` and each triangle is pulled back through a Duffy
/// map, whose Jacobian cancels the singularity.
pub fn singular_rule(cell: &Cell, s0: [f64; 2], order: usize) -> Result<QuadratureRule> {
    let g = gauss_legendre(order)?;
    let s0 = [s0[0].clamp(cell.u0, cell.u1), s0[1].clamp(cell.v0, cell.v1)];
    let c = cell.corners();
    let mut rule = QuadratureRule::default();
    let min_area = 1e-14 * cell.area();
    for k in 0..4 {
        let a = c[k];
        let b = c[(k + 1) % 4];
        let edge = [b[0] - a[0], b[1] - a[1]];
        let len = edge[0].hypot(edge[1]);
        let ea = [a[0] - s0[0], a[1] - s0[1]];
        let twice_area = (ea[0] * edge[1] - ea[1] * edge[0]).abs();
        if 0.5 * twice_area <= min_area {
            continue;
        }
        // Split edges much longer than their distance from `s0` so that the
        // angular integrand stays smooth on every sub-triangle: pieces grow
        // geometrically away from the foot of the perpendicular from `s0`,
        // each no longer than twice its distance from `s0`.
        let dist = twice_area / len;
        let foot = ((-ea[0] * edge[0] - ea[1] * edge[1]) / (len * len)).clamp(0.0, 1.0);
        let first = 2.0 * dist / len;
        let mut breaks = vec![0.0, foot, 1.0];
        let mut step = first;
        while foot - step > 0.0 || foot + step < 1.0 {
            breaks.extend([foot - step, foot + step].into_iter().filter(|t| *t > 0.0 && *t < 1.0));
            step *= 2.0;
        }
        breaks.sort_by(f64::total_cmp);
        breaks.dedup_by(|x, y| (*x - *y).abs() <= 1e-14);
        for w in breaks.windows(2) {
            let a = [a[0] + w[0] * edge[0], a[1] + w[0] * edge[1]];
            let eb = [(w[1] - w[0]) * edge[0], (w[1] - w[0]) * edge[1]];
            let ea = [a[0] - s0[0], a[1] - s0[1]];
            let twice_area = (ea[0] * eb[1] - ea[1] * eb[0]).abs();
            for (&x, &wx) in g.points.iter().zip(&g.weights) {
                for (&y, &wy) in g.points.iter().zip(&g.weights) {
                    rule.points.push([
                        s0[0] + x * (ea[0] + y * eb[0]),
                        s0[1] + x * (ea[1] + y * eb[1]),
                    ]);
                    rule.weights.push(wx * wy * x * twice_area);
                }
            }
        }
    }
    Ok(rule)
}

/// Rule on `cell` for a singularity at `s0` outside the cell: children are
/// bisected until their diameter drops below twice their distance to `s0`.
pub fn near_singular_rule(cell: &Cell, s0: [f64; 2], order: usize) -> Result<QuadratureRule> {
    subdivided_rule(cell, order, |c| (c.distance_to(s0), c.diameter()))
}

/// Adaptive tensor rule. `measure` returns `(distance, diameter)` of a cell
/// in whatever metric drives the subdivision; cells with
/// `diameter >= 2 * distance` are split.
pub fn subdivided_rule(
    cell: &Cell,
    order: usize,
    measure: impl Fn(&Cell) -> (f64, f64),
) -> Result<QuadratureRule> {
    subdivided_rule_to_depth(cell, order, MAX_SUBDIVISION_DEPTH, measure)
}

/// [`subdivided_rule`] with an explicit depth limit.
pub fn subdivided_rule_to_depth(
    cell: &Cell,
    order: usize,
    max_depth: usize,
    measure: impl Fn(&Cell) -> (f64, f64),
) -> Result<QuadratureRule> {
    let base = cell_rule(order, order)?;
    let mut rule = QuadratureRule::default();
    let mut stack = vec![(*cell, 0usize)];
    while let Some((c, depth)) = stack.pop() {
        let (dist, diam) = measure(&c);
        if diam < 2.0 * dist {
            rule.append(base.mapped(&c));
        } else if depth >= max_depth {
            return Err(Error::NearSingularOverflow(max_depth));
        } else {
            stack.extend(c.split().into_iter().map(|k| (k, depth + 1)));
        }
    }
    Ok(rule)
}
