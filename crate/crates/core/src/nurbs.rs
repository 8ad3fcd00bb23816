//! B-spline and NURBS bases, single-patch NURBS surfaces and their pointwise
//! differential geometry.
//!
//! Control points of a patch are stored row-major with the `u` index outer:
//! global index `iu * n_v + iv`. Vector-valued coefficients (displacements,
//! velocities, tractions) use the interleaved layout `3 * index + component`.

use std::fmt::Write as _;

use nalgebra::{Matrix2, Vector3};

use crate::error::{Error, Result};
use crate::quadrature::Cell;

pub type Vec3 = Vector3<f64>;

/// Relative slack allowed when a parameter lands a rounding error outside the
/// knot range.
const DOMAIN_SLACK: f64 = 1e-12;

/// Relative offset applied to collapsed Greville abscissae.
const GREVILLE_SHIFT: f64 = 1e-3;

/// Open (clamped) knot vector together with its polynomial degree.
#[derive(Clone, Debug, PartialEq)]
pub struct KnotVector {
    knots: Vec<f64>,
    degree: usize,
}

/// Nonzero univariate basis functions at one parameter value.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisSpan {
    /// Knot span index `i` with `k_i <= s < k_{i+1}`.
    pub span: usize,
    /// Index of the first nonzero function (`span - p`).
    pub first: usize,
    pub values: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

impl KnotVector {
    pub fn new(knots: Vec<f64>, degree: usize) -> Result<Self> {
        let p = degree;
        if knots.len() < 2 * (p + 1) {
            return Err(Error::InvalidKnots(format!(
                "{} knots cannot carry degree {p}",
                knots.len()
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::InvalidKnots("non-finite knot".into()));
        }
        if knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidKnots("knots must be nondecreasing".into()));
        }
        let lo = knots[0];
        let hi = knots[knots.len() - 1];
        if hi <= lo {
            return Err(Error::InvalidKnots("empty parametric range".into()));
        }
        let m = knots.len();
        let clamped_front = knots[..=p].iter().all(|&k| k == lo) && knots[p + 1] > lo;
        let clamped_back = knots[m - p - 1..].iter().all(|&k| k == hi) && knots[m - p - 2] < hi;
        if !clamped_front || !clamped_back {
            return Err(Error::InvalidKnots(
                "end knots must be repeated exactly p+1 times".into(),
            ));
        }
        let mut run = 1;
        for w in knots.windows(2) {
            run = if w[1] == w[0] { run + 1 } else { 1 };
            if run > p + 1 {
                return Err(Error::InvalidKnots(format!(
                    "knot {} repeated more than p+1 times",
                    w[0]
                )));
            }
        }
        Ok(Self { knots, degree })
    }

    /// Open knot vector on `[a, b]` with `elements` equal spans.
    pub fn open_uniform(degree: usize, elements: usize, a: f64, b: f64) -> Result<Self> {
        if elements == 0 {
            return Err(Error::InvalidKnots("at least one element required".into()));
        }
        let mut knots = vec![a; degree + 1];
        for i in 1..elements {
            knots.push(a + (b - a) * i as f64 / elements as f64);
        }
        knots.extend(std::iter::repeat_n(b, degree + 1));
        Self::new(knots, degree)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of basis functions `len - p - 1`.
    pub fn num_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    /// Distinct knot values in increasing order.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for &k in &self.knots {
            if out.last() != Some(&k) {
                out.push(k);
            }
        }
        out
    }

    /// Nonempty knot spans as `(span index, left, right)`.
    pub fn spans(&self) -> Vec<(usize, f64, f64)> {
        (self.degree..self.num_basis())
            .filter(|&i| self.knots[i + 1] > self.knots[i])
            .map(|i| (i, self.knots[i], self.knots[i + 1]))
            .collect()
    }

    /// Knot span containing `s`: left-closed spans, with the right end of the
    /// domain assigned to the last nonempty span.
    pub fn find_span(&self, s: f64) -> Result<usize> {
        let (lo, hi) = self.domain();
        let slack = DOMAIN_SLACK * (hi - lo);
        if !(s >= lo - slack && s <= hi + slack) {
            return Err(Error::Domain { value: s, lo, hi });
        }
        let n = self.num_basis();
        if s >= self.knots[n] {
            return Ok(n - 1);
        }
        if s <= lo {
            return Ok(self.degree);
        }
        let (mut low, mut high) = (self.degree, n);
        let mut mid = (low + high) / 2;
        while s < self.knots[mid] || s >= self.knots[mid + 1] {
            if s < self.knots[mid] {
                high = mid;
            } else {
                low = mid;
            }
            mid = (low + high) / 2;
        }
        Ok(mid)
    }

    /// Nonzero basis functions and up to `max_deriv` derivatives at `s`.
    pub fn eval(&self, s: f64, max_deriv: usize) -> Result<BasisSpan> {
        let span = self.find_span(s)?;
        let (lo, hi) = self.domain();
        let s = s.clamp(lo, hi);
        let ders = self.ders_basis(span, s, max_deriv.min(2));
        let p = self.degree;
        let mut it = ders.into_iter();
        let values = it.next().unwrap_or_default();
        let d1 = it.next().unwrap_or_else(|| vec![0.0; p + 1]);
        let d2 = it.next().unwrap_or_else(|| vec![0.0; p + 1]);
        Ok(BasisSpan {
            span,
            first: span - p,
            values,
            d1,
            d2,
        })
    }

    /// Like [`eval`](Self::eval) but on a prescribed knot span, for points
    /// known to belong to a given element.
    pub fn eval_span(&self, span: usize, s: f64, max_deriv: usize) -> BasisSpan {
        let p = self.degree;
        let ders = self.ders_basis(span, s, max_deriv.min(2));
        let mut it = ders.into_iter();
        let values = it.next().unwrap_or_default();
        let d1 = it.next().unwrap_or_else(|| vec![0.0; p + 1]);
        let d2 = it.next().unwrap_or_else(|| vec![0.0; p + 1]);
        BasisSpan {
            span,
            first: span - p,
            values,
            d1,
            d2,
        }
    }

    /// Triangular-table evaluation of the nonzero basis functions and their
    /// derivatives up to order `nd` on knot span `span`.
    fn ders_basis(&self, span: usize, s: f64, nd: usize) -> Vec<Vec<f64>> {
        let p = self.degree;
        let u = &self.knots;
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = s - u[span + 1 - j];
            right[j] = u[span + j] - s;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }

        let mut ders = vec![vec![0.0; p + 1]; nd + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let top = nd.min(p);
        let mut a = [vec![0.0; p + 1], vec![0.0; p + 1]];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=top {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    let rk = rk as usize;
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk];
                    d = a[s2][0] * ndu[rk][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if r as isize - 1 <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for (k, row) in ders.iter_mut().enumerate().take(top + 1).skip(1) {
            for v in row.iter_mut() {
                *v *= factor;
            }
            factor *= (p - k) as f64;
        }
        ders
    }

    /// Greville abscissae `(k_{i+1} + ... + k_{i+p}) / p`, with coincident
    /// abscissae pulled apart symmetrically.
    pub fn greville(&self) -> Result<Vec<f64>> {
        let p = self.degree;
        if p == 0 {
            return Err(Error::InvalidKnots("Greville abscissae need degree >= 1".into()));
        }
        let mut g: Vec<f64> = (0..self.num_basis())
            .map(|i| self.knots[i + 1..=i + p].iter().sum::<f64>() / p as f64)
            .collect();
        let (lo, hi) = self.domain();
        separate_collapsed(&mut g, &self.breakpoints(), lo, hi);
        check_separation(&g, hi - lo)?;
        Ok(g)
    }

    /// New knot vector with `t` inserted once.
    fn with_knot(&self, t: f64) -> Result<Self> {
        let mut knots = self.knots.clone();
        let pos = knots.partition_point(|&k| k <= t);
        knots.insert(pos, t);
        Self::new(knots, self.degree)
    }
}

/// Pull apart groups of coincident abscissae by `GREVILLE_SHIFT` times the
/// length of the knot span they sit in, keeping them inside `[lo, hi]`.
pub fn separate_collapsed(points: &mut [f64], breakpoints: &[f64], lo: f64, hi: f64) {
    let tol = 1e-10 * (hi - lo);
    let mut i = 0;
    while i < points.len() {
        let mut j = i + 1;
        while j < points.len() && (points[j] - points[i]).abs() <= tol {
            j += 1;
        }
        let m = j - i;
        if m > 1 {
            let c = points[i];
            let k = breakpoints.partition_point(|&b| b <= c);
            let left = if k >= 1 { breakpoints[k - 1] } else { lo };
            let right = if k < breakpoints.len() { breakpoints[k] } else { hi };
            let below = if k >= 2 { c - breakpoints[k - 2].max(lo) } else { 0.0 };
            let span = (right - left).max(below).max(tol);
            let delta = GREVILLE_SHIFT * span;
            for (q, v) in points[i..j].iter_mut().enumerate() {
                let offset = (q as f64 - (m - 1) as f64 / 2.0) * delta;
                *v = (c + offset).clamp(lo, hi);
            }
            // Groups sitting on a domain end can only move inwards.
            if (c - lo).abs() <= tol {
                for (q, v) in points[i..j].iter_mut().enumerate() {
                    *v = lo + q as f64 * delta;
                }
            } else if (c - hi).abs() <= tol {
                for (q, v) in points[i..j].iter_mut().enumerate() {
                    *v = hi - (m - 1 - q) as f64 * delta;
                }
            }
        }
        i = j;
    }
}

fn check_separation(points: &[f64], range: f64) -> Result<()> {
    for w in points.windows(2) {
        if w[1] - w[0] < 1e-10 * range {
            return Err(Error::CollocationDegeneracy(w[0], w[1]));
        }
    }
    Ok(())
}

/// Rational bivariate basis functions with derivatives at one point.
#[derive(Clone, Debug, Default)]
pub struct SurfaceBasis {
    /// Global control-point indices of the nonzero functions.
    pub indices: Vec<usize>,
    pub n: Vec<f64>,
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
    pub duu: Vec<f64>,
    pub duv: Vec<f64>,
    pub dvv: Vec<f64>,
}

impl SurfaceBasis {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `sum_a N^a c_a` for a coefficient field stored per control point.
    pub fn combine(&self, weights: &[f64], coeffs: &[Vec3]) -> Vec3 {
        let mut out = Vec3::zeros();
        for (w, &i) in weights.iter().zip(&self.indices) {
            out += *w * coeffs[i];
        }
        out
    }

    /// Same as [`combine`](Self::combine) for interleaved `3n` coefficient vectors.
    pub fn combine_flat(&self, weights: &[f64], coeffs: &[f64]) -> Vec3 {
        let mut out = Vec3::zeros();
        for (w, &i) in weights.iter().zip(&self.indices) {
            out += *w * Vec3::new(coeffs[3 * i], coeffs[3 * i + 1], coeffs[3 * i + 2]);
        }
        out
    }
}

/// Pointwise geometry of a surface.
#[derive(Clone, Debug)]
pub struct SurfaceFrame {
    pub x: Vec3,
    pub g1: Vec3,
    pub g2: Vec3,
    /// Unit normal.
    pub g3: Vec3,
    pub x_uu: Vec3,
    pub x_uv: Vec3,
    pub x_vv: Vec3,
    pub metric: Matrix2<f64>,
    pub curvature: Matrix2<f64>,
    /// Area element `sqrt(det metric)`.
    pub jac: f64,
}

impl SurfaceFrame {
    /// Contravariant metric `g^{ab}`.
    pub fn metric_inverse(&self) -> Matrix2<f64> {
        let m = &self.metric;
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det
    }

    /// Principal curvatures (ascending) from the shape operator `g^{-1} b`.
    pub fn principal_curvatures(&self) -> (f64, f64) {
        let s = self.metric_inverse() * self.curvature;
        let tr = s.trace();
        let det = s.determinant();
        let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
        (0.5 * tr - disc, 0.5 * tr + disc)
    }
}

/// Build a frame from position and parametric derivatives.
pub fn frame_from_derivatives(
    x: Vec3,
    g1: Vec3,
    g2: Vec3,
    x_uu: Vec3,
    x_uv: Vec3,
    x_vv: Vec3,
    at: [f64; 2],
) -> Result<SurfaceFrame> {
    let cross = g1.cross(&g2);
    let area = cross.norm();
    if !(area > 1e-14 * g1.norm() * g2.norm()) || area == 0.0 {
        return Err(Error::DegenerateParameterization(at[0], at[1]));
    }
    let g3 = cross / area;
    let metric = Matrix2::new(g1.dot(&g1), g1.dot(&g2), g2.dot(&g1), g2.dot(&g2));
    let b12 = x_uv.dot(&g3);
    let curvature = Matrix2::new(x_uu.dot(&g3), b12, b12, x_vv.dot(&g3));
    Ok(SurfaceFrame {
        x,
        g1,
        g2,
        g3,
        x_uu,
        x_uv,
        x_vv,
        metric,
        curvature,
        jac: area,
    })
}

/// One knot-span element of a patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Element {
    pub index: usize,
    pub span_u: usize,
    pub span_v: usize,
    pub cell: Cell,
}

/// Which side of the parametric square an edge lies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Edge {
    /// `u = u_min`
    U0,
    /// `u = u_max`
    U1,
    /// `v = v_min`
    V0,
    /// `v = v_max`
    V1,
}

impl Edge {
    pub const ALL: [Edge; 4] = [Edge::U0, Edge::U1, Edge::V0, Edge::V1];
}

/// Single NURBS patch: the shared geometry of the shell mid-surface and the
/// fluid boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct NurbsPatch {
    kv_u: KnotVector,
    kv_v: KnotVector,
    points: Vec<Vec3>,
    weights: Vec<f64>,
    allow_degenerate: bool,
}

impl NurbsPatch {
    pub fn new(
        kv_u: KnotVector,
        kv_v: KnotVector,
        points: Vec<Vec3>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        Self::build(kv_u, kv_v, points, weights, false)
    }

    /// Patch that may contain degenerate corners or collapsed edges (only
    /// used by the disk drag oracle).
    pub fn new_degenerate(
        kv_u: KnotVector,
        kv_v: KnotVector,
        points: Vec<Vec3>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        Self::build(kv_u, kv_v, points, weights, true)
    }

    fn build(
        kv_u: KnotVector,
        kv_v: KnotVector,
        points: Vec<Vec3>,
        weights: Vec<f64>,
        allow_degenerate: bool,
    ) -> Result<Self> {
        let n = kv_u.num_basis() * kv_v.num_basis();
        if points.len() != n || weights.len() != n {
            return Err(Error::InvalidPatch(format!(
                "expected {n} control points and weights, got {} and {}",
                points.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidPatch("weights must be positive".into()));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidPatch("non-finite control point".into()));
        }
        let patch = Self {
            kv_u,
            kv_v,
            points,
            weights,
            allow_degenerate,
        };
        if !allow_degenerate {
            patch.check_poles()?;
        }
        Ok(patch)
    }

    fn check_poles(&self) -> Result<()> {
        let tol = 1e-12 * self.diameter().max(f64::MIN_POSITIVE);
        let (nu, nv) = (self.nu(), self.nv());
        for edge in Edge::ALL {
            let row = self.edge_row(edge, 0);
            if row.windows(2).all(|w| (self.points[w[0]] - self.points[w[1]]).norm() <= tol) {
                return Err(Error::InvalidPatch(format!(
                    "collapsed edge {edge:?} (pole) on a {nu}x{nv} net"
                )));
            }
        }
        Ok(())
    }

    pub fn kv_u(&self) -> &KnotVector {
        &self.kv_u
    }

    pub fn kv_v(&self) -> &KnotVector {
        &self.kv_v
    }

    pub fn nu(&self) -> usize {
        self.kv_u.num_basis()
    }

    pub fn nv(&self) -> usize {
        self.kv_v.num_basis()
    }

    /// Number of control points.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index(&self, iu: usize, iv: usize) -> usize {
        iu * self.nv() + iv
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn allows_degenerate(&self) -> bool {
        self.allow_degenerate
    }

    pub fn degrees(&self) -> (usize, usize) {
        (self.kv_u.degree(), self.kv_v.degree())
    }

    /// Control-point indices of the `offset`-th row parallel to `edge`.
    pub fn edge_row(&self, edge: Edge, offset: usize) -> Vec<usize> {
        let (nu, nv) = (self.nu(), self.nv());
        match edge {
            Edge::U0 => (0..nv).map(|iv| self.index(offset, iv)).collect(),
            Edge::U1 => (0..nv).map(|iv| self.index(nu - 1 - offset, iv)).collect(),
            Edge::V0 => (0..nu).map(|iu| self.index(iu, offset)).collect(),
            Edge::V1 => (0..nu).map(|iu| self.index(iu, nv - 1 - offset)).collect(),
        }
    }

    /// Largest distance between two control points.
    pub fn diameter(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    /// Rational basis with derivatives up to `max_deriv` (0, 1 or 2).
    pub fn basis(&self, s: [f64; 2], max_deriv: usize) -> Result<SurfaceBasis> {
        let bu = self.kv_u.eval(s[0], max_deriv)?;
        let bv = self.kv_v.eval(s[1], max_deriv)?;
        Ok(self.rational(&bu, &bv, max_deriv))
    }

    /// Rational basis on a given element (the point should lie in its cell).
    pub fn basis_in(&self, e: &Element, s: [f64; 2], max_deriv: usize) -> SurfaceBasis {
        let bu = self.kv_u.eval_span(e.span_u, s[0], max_deriv);
        let bv = self.kv_v.eval_span(e.span_v, s[1], max_deriv);
        self.rational(&bu, &bv, max_deriv)
    }

    fn rational(&self, bu: &BasisSpan, bv: &BasisSpan, max_deriv: usize) -> SurfaceBasis {
        let (pu, pv) = self.degrees();
        let m = (pu + 1) * (pv + 1);
        let mut out = SurfaceBasis {
            indices: Vec::with_capacity(m),
            n: Vec::with_capacity(m),
            du: Vec::with_capacity(m),
            dv: Vec::with_capacity(m),
            duu: Vec::with_capacity(m),
            duv: Vec::with_capacity(m),
            dvv: Vec::with_capacity(m),
        };
        let (mut w, mut wu, mut wv, mut wuu, mut wuv, mut wvv) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for a in 0..=pu {
            for b in 0..=pv {
                let idx = self.index(bu.first + a, bv.first + b);
                let wi = self.weights[idx];
                let n = wi * bu.values[a] * bv.values[b];
                let nu = wi * bu.d1[a] * bv.values[b];
                let nv = wi * bu.values[a] * bv.d1[b];
                let nuu = wi * bu.d2[a] * bv.values[b];
                let nuv = wi * bu.d1[a] * bv.d1[b];
                let nvv = wi * bu.values[a] * bv.d2[b];
                w += n;
                wu += nu;
                wv += nv;
                wuu += nuu;
                wuv += nuv;
                wvv += nvv;
                out.indices.push(idx);
                out.n.push(n);
                out.du.push(nu);
                out.dv.push(nv);
                out.duu.push(nuu);
                out.duv.push(nuv);
                out.dvv.push(nvv);
            }
        }
        let inv = 1.0 / w;
        for k in 0..out.indices.len() {
            let n = out.n[k] * inv;
            out.n[k] = n;
            if max_deriv >= 1 {
                let nu = (out.du[k] - n * wu) * inv;
                let nv = (out.dv[k] - n * wv) * inv;
                if max_deriv >= 2 {
                    out.duu[k] = (out.duu[k] - 2.0 * nu * wu - n * wuu) * inv;
                    out.duv[k] = (out.duv[k] - nu * wv - nv * wu - n * wuv) * inv;
                    out.dvv[k] = (out.dvv[k] - 2.0 * nv * wv - n * wvv) * inv;
                }
                out.du[k] = nu;
                out.dv[k] = nv;
            }
        }
        if max_deriv < 2 {
            out.duu.iter_mut().for_each(|v| *v = 0.0);
            out.duv.iter_mut().for_each(|v| *v = 0.0);
            out.dvv.iter_mut().for_each(|v| *v = 0.0);
        }
        if max_deriv < 1 {
            out.du.iter_mut().for_each(|v| *v = 0.0);
            out.dv.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    pub fn point(&self, s: [f64; 2]) -> Result<Vec3> {
        let b = self.basis(s, 0)?;
        Ok(b.combine(&b.n, &self.points))
    }

    pub fn frame(&self, s: [f64; 2]) -> Result<SurfaceFrame> {
        let b = self.basis(s, 2)?;
        self.frame_with(&b, s)
    }

    /// Frame from an already evaluated second-order basis.
    pub fn frame_with(&self, b: &SurfaceBasis, s: [f64; 2]) -> Result<SurfaceFrame> {
        frame_from_derivatives(
            b.combine(&b.n, &self.points),
            b.combine(&b.du, &self.points),
            b.combine(&b.dv, &self.points),
            b.combine(&b.duu, &self.points),
            b.combine(&b.duv, &self.points),
            b.combine(&b.dvv, &self.points),
            s,
        )
    }

    /// Patch with every control point moved by the interleaved coefficient
    /// vector `u` (same weights, so the displacement lives in the NURBS space).
    pub fn displaced(&self, u: &[f64]) -> Result<Self> {
        if u.len() != 3 * self.len() {
            return Err(Error::InvalidPatch(format!(
                "displacement has {} entries, expected {}",
                u.len(),
                3 * self.len()
            )));
        }
        let points = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| p + Vec3::new(u[3 * i], u[3 * i + 1], u[3 * i + 2]))
            .collect();
        Ok(Self {
            kv_u: self.kv_u.clone(),
            kv_v: self.kv_v.clone(),
            points,
            weights: self.weights.clone(),
            allow_degenerate: self.allow_degenerate,
        })
    }

    /// Patch with control points replaced (same knots and weights).
    pub fn with_points(&self, points: Vec<Vec3>) -> Result<Self> {
        Self::build(
            self.kv_u.clone(),
            self.kv_v.clone(),
            points,
            self.weights.clone(),
            self.allow_degenerate,
        )
    }

    /// Nonempty knot-span elements, `u` outer.
    pub fn elements(&self) -> Vec<Element> {
        let su = self.kv_u.spans();
        let sv = self.kv_v.spans();
        let mut out = Vec::with_capacity(su.len() * sv.len());
        for &(iu, u0, u1) in &su {
            for &(iv, v0, v1) in &sv {
                out.push(Element {
                    index: out.len(),
                    span_u: iu,
                    span_v: iv,
                    cell: Cell::new(u0, u1, v0, v1),
                });
            }
        }
        out
    }

    /// Control-point indices with support on an element.
    pub fn element_support(&self, e: &Element) -> Vec<usize> {
        let (pu, pv) = self.degrees();
        let mut out = Vec::with_capacity((pu + 1) * (pv + 1));
        for a in e.span_u - pu..=e.span_u {
            for b in e.span_v - pv..=e.span_v {
                out.push(self.index(a, b));
            }
        }
        out
    }

    /// Greville abscissae in both directions, as parametric points with the
    /// same indexing as the control net.
    pub fn greville_params(&self) -> Result<Vec<[f64; 2]>> {
        let gu = self.kv_u.greville()?;
        let gv = self.kv_v.greville()?;
        let mut out = Vec::with_capacity(gu.len() * gv.len());
        for &u in &gu {
            for &v in &gv {
                out.push([u, v]);
            }
        }
        Ok(out)
    }

    /// Closest point on the surface to `x`: coarse sampling of every element
    /// followed by a few projected Gauss-Newton steps. Returns the parameter
    /// and the distance.
    pub fn closest_point(&self, x: &Vec3) -> ([f64; 2], f64) {
        let mut best = ([0.0, 0.0], f64::INFINITY);
        for e in self.elements() {
            for i in 0..5 {
                for j in 0..5 {
                    let s = e.cell.map([i as f64 / 4.0, j as f64 / 4.0]);
                    let b = self.basis_in(&e, s, 0);
                    let d = (b.combine(&b.n, &self.points) - x).norm();
                    if d < best.1 {
                        best = (s, d);
                    }
                }
            }
        }
        let (lo_u, hi_u) = self.kv_u.domain();
        let (lo_v, hi_v) = self.kv_v.domain();
        let mut s = best.0;
        for _ in 0..20 {
            let Ok(b) = self.basis(s, 1) else { break };
            let p = b.combine(&b.n, &self.points);
            let g1 = b.combine(&b.du, &self.points);
            let g2 = b.combine(&b.dv, &self.points);
            let r = x - p;
            let a = Matrix2::new(g1.dot(&g1), g1.dot(&g2), g1.dot(&g2), g2.dot(&g2));
            let Some(inv) = a.try_inverse() else { break };
            let ds = inv * nalgebra::Vector2::new(g1.dot(&r), g2.dot(&r));
            let next = [(s[0] + ds[0]).clamp(lo_u, hi_u), (s[1] + ds[1]).clamp(lo_v, hi_v)];
            let moved = (next[0] - s[0]).abs() + (next[1] - s[1]).abs();
            s = next;
            if moved < 1e-15 {
                break;
            }
        }
        let d = self.point(s).map_or(f64::INFINITY, |p| (p - x).norm());
        if d < best.1 {
            (s, d)
        } else {
            best
        }
    }

    /// Axis-aligned box around a `samples x samples` sample of the surface over `cell`.
    pub fn sampled_box(&self, e: &Element, cell: &Cell, samples: usize) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        let k = samples.max(2) - 1;
        for i in 0..=k {
            for j in 0..=k {
                let s = cell.map([i as f64 / k as f64, j as f64 / k as f64]);
                let b = self.basis_in(e, s, 0);
                let p = b.combine(&b.n, &self.points);
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
        (lo, hi)
    }

    /// Check `|g1 x g2| > 0` at the tensor Gauss points of every element.
    pub fn check_regular(&self, order: usize) -> Result<()> {
        let rule = crate::quadrature::cell_rule(order, order)?;
        for e in self.elements() {
            for q in rule.points() {
                let s = e.cell.map(*q);
                self.frame(s)?;
            }
        }
        Ok(())
    }

    /// Insert knot `t` once in the `u` direction (geometry unchanged).
    pub fn insert_knot_u(&self, t: f64) -> Result<Self> {
        let (nu, nv) = (self.nu(), self.nv());
        let homog = self.homogeneous();
        let kv = self.kv_u.with_knot(t)?;
        let mut out = vec![[0.0; 4]; (nu + 1) * nv];
        for iv in 0..nv {
            let row: Vec<[f64; 4]> = (0..nu).map(|iu| homog[iu * nv + iv]).collect();
            let new_row = insert_in_curve(&self.kv_u, &row, t)?;
            for (iu, p) in new_row.into_iter().enumerate() {
                out[iu * nv + iv] = p;
            }
        }
        self.from_homogeneous(kv, self.kv_v.clone(), out)
    }

    /// Insert knot `t` once in the `v` direction (geometry unchanged).
    pub fn insert_knot_v(&self, t: f64) -> Result<Self> {
        let (nu, nv) = (self.nu(), self.nv());
        let homog = self.homogeneous();
        let kv = self.kv_v.with_knot(t)?;
        let mut out = Vec::with_capacity(nu * (nv + 1));
        for iu in 0..nu {
            let row = &homog[iu * nv..(iu + 1) * nv];
            out.extend(insert_in_curve(&self.kv_v, row, t)?);
        }
        self.from_homogeneous(self.kv_u.clone(), kv, out)
    }

    /// Split every knot span into `div_u` x `div_v` equal parts.
    pub fn refine(&self, div_u: usize, div_v: usize) -> Result<Self> {
        let mut patch = self.clone();
        for (a, b) in self.kv_u.breakpoints().windows(2).map(|w| (w[0], w[1])) {
            for k in 1..div_u.max(1) {
                patch = patch.insert_knot_u(a + (b - a) * k as f64 / div_u as f64)?;
            }
        }
        for (a, b) in self.kv_v.breakpoints().windows(2).map(|w| (w[0], w[1])) {
            for k in 1..div_v.max(1) {
                patch = patch.insert_knot_v(a + (b - a) * k as f64 / div_v as f64)?;
            }
        }
        Ok(patch)
    }

    /// Uniform h-refinement: halve every knot span `levels` times.
    pub fn refine_uniform(&self, levels: usize) -> Result<Self> {
        let f = 1usize << levels;
        self.refine(f, f)
    }

    fn homogeneous(&self) -> Vec<[f64; 4]> {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(p, &w)| [p.x * w, p.y * w, p.z * w, w])
            .collect()
    }

    fn from_homogeneous(&self, kv_u: KnotVector, kv_v: KnotVector, h: Vec<[f64; 4]>) -> Result<Self> {
        let weights: Vec<f64> = h.iter().map(|q| q[3]).collect();
        let points = h.iter().map(|q| Vec3::new(q[0], q[1], q[2]) / q[3]).collect();
        Self::build(kv_u, kv_v, points, weights, self.allow_degenerate)
    }

    /// Plain-text patch description (see `docs/formats.md`).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let (pu, pv) = self.degrees();
        let _ = writeln!(s, "degrees {pu} {pv}");
        let _ = writeln!(s, "knots_u {}", join(self.kv_u.knots()));
        let _ = writeln!(s, "knots_v {}", join(self.kv_v.knots()));
        let _ = writeln!(s, "size {} {}", self.nu(), self.nv());
        if self.allow_degenerate {
            let _ = writeln!(s, "degenerate");
        }
        for (p, w) in self.points.iter().zip(&self.weights) {
            let _ = writeln!(s, "{:e} {:e} {:e} {:e}", p.x, p.y, p.z, w);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let perr = |line: usize, msg: &str| Error::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut degrees = None;
        let mut ku = None;
        let mut kv = None;
        let mut size = None;
        let mut degenerate = false;
        let mut rows: Vec<[f64; 4]> = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line_no = ln + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut toks = line.split_whitespace();
            let head = toks.next().unwrap_or("");
            let nums = |toks: std::str::SplitWhitespace| -> Result<Vec<f64>> {
                toks.map(|t| t.parse::<f64>().map_err(|_| perr(line_no, &format!("bad number `{t}`"))))
                    .collect()
            };
            match head {
                "degrees" => {
                    let v = nums(toks)?;
                    if v.len() != 2 {
                        return Err(perr(line_no, "degrees needs two integers"));
                    }
                    degrees = Some((v[0] as usize, v[1] as usize));
                }
                "knots_u" => ku = Some(nums(toks)?),
                "knots_v" => kv = Some(nums(toks)?),
                "size" => {
                    let v = nums(toks)?;
                    if v.len() != 2 {
                        return Err(perr(line_no, "size needs two integers"));
                    }
                    size = Some((v[0] as usize, v[1] as usize));
                }
                "degenerate" => degenerate = true,
                _ => {
                    let v = nums(line.split_whitespace())?;
                    if v.len() != 4 {
                        return Err(perr(line_no, "control point rows are `x y z w`"));
                    }
                    rows.push([v[0], v[1], v[2], v[3]]);
                }
            }
        }
        let (pu, pv) = degrees.ok_or_else(|| perr(0, "missing `degrees`"))?;
        let kv_u = KnotVector::new(ku.ok_or_else(|| perr(0, "missing `knots_u`"))?, pu)?;
        let kv_v = KnotVector::new(kv.ok_or_else(|| perr(0, "missing `knots_v`"))?, pv)?;
        let (n0, n1) = size.ok_or_else(|| perr(0, "missing `size`"))?;
        if n0 != kv_u.num_basis() || n1 != kv_v.num_basis() {
            return Err(perr(0, "size does not match knot vectors"));
        }
        let points = rows.iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect();
        let weights = rows.iter().map(|r| r[3]).collect();
        Self::build(kv_u, kv_v, points, weights, degenerate)
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|k| format!("{k}")).collect::<Vec<_>>().join(" ")
}

/// Single knot insertion on a homogeneous control polygon.
fn insert_in_curve(kv: &KnotVector, pw: &[[f64; 4]], t: f64) -> Result<Vec<[f64; 4]>> {
    let p = kv.degree();
    let k = kv.find_span(t)?;
    let u = kv.knots();
    let n = pw.len();
    let mut out = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let q = if i + p <= k {
            pw[i]
        } else if i > k {
            pw[i - 1]
        } else {
            let alpha = (t - u[i]) / (u[i + p] - u[i]);
            let mut q = [0.0; 4];
            for c in 0..4 {
                q[c] = alpha * pw[i][c] + (1.0 - alpha) * pw[i - 1][c];
            }
            q
        };
        out.push(q);
    }
    Ok(out)
}

/// Flat rectangle `[0, lx] x [0, ly]` in the `z = 0` plane with an exact
/// linear parameterization (control points at Greville abscissae).
pub fn flat_rectangle(
    lx: f64,
    ly: f64,
    degrees: (usize, usize),
    elements: (usize, usize),
) -> Result<NurbsPatch> {
    let kv_u = KnotVector::open_uniform(degrees.0, elements.0, 0.0, 1.0)?;
    let kv_v = KnotVector::open_uniform(degrees.1, elements.1, 0.0, 1.0)?;
    let gu = kv_u.greville()?;
    let gv = kv_v.greville()?;
    let mut points = Vec::with_capacity(gu.len() * gv.len());
    for &u in &gu {
        for &v in &gv {
            points.push(Vec3::new(u * lx, v * ly, 0.0));
        }
    }
    let n = points.len();
    NurbsPatch::new(kv_u, kv_v, points, vec![1.0; n])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(k: &[f64], p: usize) -> KnotVector {
        KnotVector::new(k.to_vec(), p).unwrap()
    }

    #[test]
    fn rejects_bad_knot_vectors() {
        assert!(KnotVector::new(vec![0.0, 0.0, 1.0, 0.5, 1.0, 1.0], 1).is_err());
        assert!(KnotVector::new(vec![0.0, 0.0, 0.5, 1.0, 1.0, 1.0], 2).is_err());
        assert!(KnotVector::new(vec![0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 1.0, 1.0, 1.0], 2).is_err());
        assert!(KnotVector::new(vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0], 2).is_err());
    }

    #[test]
    fn find_span_conventions() {
        let k = kv(&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0], 2);
        assert_eq!(k.find_span(0.5).unwrap(), 2);
        assert_eq!(k.find_span(1.0).unwrap(), 2);
        assert_eq!(k.find_span(0.0).unwrap(), 2);
        let k = kv(&[0.0, 0.0, 0.0, 0.5, 1.0, 1.0, 1.0], 2);
        assert_eq!(k.find_span(0.5).unwrap(), 3);
        assert_eq!(k.find_span(0.49).unwrap(), 2);
        assert!(matches!(k.find_span(1.5), Err(Error::Domain { .. })));
        assert!(k.find_span(-0.1).is_err());
    }

    #[test]
    fn quadratic_bernstein_values() {
        let k = kv(&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0], 2);
        let b = k.eval(0.5, 2).unwrap();
        assert_eq!(b.values, vec![0.25, 0.5, 0.25]);
        assert!((b.d1[0] + 1.0).abs() < 1e-15 && b.d1[1].abs() < 1e-15);
        assert!((b.d2[0] - 2.0).abs() < 1e-14 && (b.d2[1] + 4.0).abs() < 1e-14);
    }

    #[test]
    fn greville_examples() {
        assert_eq!(kv(&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0], 2).greville().unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(
            kv(&[0.0, 0.0, 0.0, 0.5, 1.0, 1.0, 1.0], 2).greville().unwrap(),
            vec![0.0, 0.25, 0.75, 1.0]
        );
        // C0 knot of multiplicity p: one abscissa sits on it, none collapse.
        let g = kv(&[0.0, 0.0, 0.0, 0.5, 0.5, 1.0, 1.0, 1.0], 2).greville().unwrap();
        assert_eq!(g, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn collapsed_abscissae_are_pulled_apart() {
        let bp = [0.0, 0.5, 1.0];
        let mut g = vec![0.0, 0.25, 0.5, 0.5, 0.75, 1.0];
        separate_collapsed(&mut g, &bp, 0.0, 1.0);
        // Shift is 1e-3 of the adjacent span length 0.5, split symmetrically.
        assert!((g[2] - (0.5 - 0.25e-3)).abs() < 1e-14);
        assert!((g[3] - (0.5 + 0.25e-3)).abs() < 1e-14);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        let mut g = vec![0.0, 0.0, 0.5, 1.0, 1.0];
        separate_collapsed(&mut g, &bp, 0.0, 1.0);
        assert!(g.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert!(check_separation(&g, 1.0).is_ok());
        assert!(check_separation(&[0.0, 1e-12, 1.0], 1.0).is_err());
    }

    #[test]
    fn flat_square_frame() {
        let p = flat_rectangle(1.0, 1.0, (1, 1), (1, 1)).unwrap();
        let f = p.frame([0.3, 0.7]).unwrap();
        assert!((f.metric - Matrix2::identity()).norm() < 1e-15);
        assert!(f.curvature.norm() < 1e-15);
        assert!((f.jac - 1.0).abs() < 1e-15);
        assert!((f.g3 - Vec3::z()).norm() < 1e-15);
    }

    #[test]
    fn degenerate_frame_is_reported() {
        let f = frame_from_derivatives(
            Vec3::zeros(),
            Vec3::x(),
            2.0 * Vec3::x(),
            Vec3::zeros(),
            Vec3::zeros(),
            Vec3::zeros(),
            [0.0, 0.0],
        );
        assert!(matches!(f, Err(Error::DegenerateParameterization(..))));
    }

    #[test]
    fn knot_insertion_preserves_geometry() {
        let p = flat_rectangle(2.0, 1.0, (2, 3), (2, 1)).unwrap();
        let mut pts = p.points().to_vec();
        for (i, q) in pts.iter_mut().enumerate() {
            q.z = 0.1 * (i as f64).sin();
        }
        let p = p.with_points(pts).unwrap();
        let r = p.refine_uniform(1).unwrap();
        assert_eq!(r.nu(), p.nu() + 2);
        assert_eq!(r.nv(), p.nv() + 1);
        for s in [[0.1, 0.2], [0.77, 0.5], [1.0, 1.0], [0.5, 0.0]] {
            assert!((r.point(s).unwrap() - p.point(s).unwrap()).norm() < 1e-14);
        }
    }

    #[test]
    fn patch_text_round_trip() {
        let p = flat_rectangle(1.0, 0.1, (3, 2), (4, 1)).unwrap();
        let q = NurbsPatch::from_text(&p.to_text()).unwrap();
        assert_eq!(p, q);
        assert!(NurbsPatch::from_text("degrees 1 1\nsize 2 2\n").is_err());
    }

    #[test]
    fn poles_are_rejected_unless_flagged() {
        let kv_u = KnotVector::open_uniform(1, 1, 0.0, 1.0).unwrap();
        let kv_v = kv_u.clone();
        let pts = vec![Vec3::zeros(), Vec3::zeros(), Vec3::x(), Vec3::new(1.0, 1.0, 0.0)];
        assert!(NurbsPatch::new(kv_u.clone(), kv_v.clone(), pts.clone(), vec![1.0; 4]).is_err());
        assert!(NurbsPatch::new_degenerate(kv_u, kv_v, pts, vec![1.0; 4]).is_ok());
    }
}
