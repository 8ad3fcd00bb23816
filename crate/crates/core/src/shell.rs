//! Rotation-free Kirchhoff-Love shell with a St.Venant-Kirchhoff material.
//!
//! Strains and resultants use Voigt vectors `(11, 22, 12)` where the strain
//! vectors carry the engineering shear `2 e_12` and the resultant vectors the
//! plain `n^12`, `m^12`, so that `n : e = n_v . e_v`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix2, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::ScalarCsr;
use crate::nurbs::{Edge, Element, NurbsPatch, SurfaceBasis, SurfaceFrame, Vec3};
use crate::quadrature::{self, Cell};

pub type Voigt = Vector3<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShellMaterial {
    /// Young's modulus (Pa).
    pub e: f64,
    pub nu: f64,
    /// Density (kg/m^3).
    pub rho: f64,
    /// Thickness (m).
    pub h: f64,
}

impl ShellMaterial {
    pub fn validate(&self) -> Result<()> {
        let ok = self.e > 0.0 && (0.0..0.5).contains(&self.nu) && self.rho > 0.0 && self.h > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid shell material {self:?}")))
        }
    }

    /// `(lambda_bar, mu)` of the plane-stress reduction.
    pub fn lame(&self) -> (f64, f64) {
        let lambda = self.e * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu));
        let mu = self.e / (2.0 * (1.0 + self.nu));
        (2.0 * lambda * mu / (lambda + 2.0 * mu), mu)
    }
}

/// Fourth-order plane-stress tensor indexed `[a][b][c][d]`.
pub type Tensor4 = [[[[f64; 2]; 2]; 2]; 2];

/// `C^{abcd} = lb G^{ab} G^{cd} + mu (G^{ac} G^{bd} + G^{ad} G^{bc})`.
pub fn plane_stress_tensor(mat: &ShellMaterial, gcon: &Matrix2<f64>) -> Tensor4 {
    let (lb, mu) = mat.lame();
    let mut c = [[[[0.0; 2]; 2]; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            for g in 0..2 {
                for d in 0..2 {
                    c[a][b][g][d] = lb * gcon[(a, b)] * gcon[(g, d)]
                        + mu * (gcon[(a, g)] * gcon[(b, d)] + gcon[(a, d)] * gcon[(b, g)]);
                }
            }
        }
    }
    c
}

const VOIGT: [(usize, usize); 3] = [(0, 0), (1, 1), (0, 1)];

/// Voigt matrix `D` with `n_v = h D e_v` for the conventions of this module.
pub fn voigt_matrix(c: &Tensor4) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| {
        let (a, b) = VOIGT[i];
        let (g, d) = VOIGT[j];
        c[a][b][g][d]
    })
}

/// Membrane strain `(g - G)/2` and bending strain `B - b`.
pub fn strains(reference: &SurfaceFrame, current: &SurfaceFrame) -> (Matrix2<f64>, Matrix2<f64>) {
    (
        0.5 * (current.metric - reference.metric),
        reference.curvature - current.curvature,
    )
}

/// `n = h C : eps`, `m = h^3/12 C : kap`.
pub fn stress_resultants(
    mat: &ShellMaterial,
    c: &Tensor4,
    eps: &Matrix2<f64>,
    kap: &Matrix2<f64>,
) -> (Matrix2<f64>, Matrix2<f64>) {
    let contract = |e: &Matrix2<f64>| {
        Matrix2::from_fn(|a, b| {
            let mut s = 0.0;
            for g in 0..2 {
                for d in 0..2 {
                    s += c[a][b][g][d] * e[(g, d)];
                }
            }
            s
        })
    };
    let h = mat.h;
    (h * contract(eps), h * h * h / 12.0 * contract(kap))
}

/// Current configuration kinematics at one point.
#[derive(Clone, Debug)]
struct Kinematics {
    a1: Vec3,
    a2: Vec3,
    a11: Vec3,
    a12: Vec3,
    a22: Vec3,
    a3: Vec3,
    len: f64,
}

impl Kinematics {
    fn new(b: &SurfaceBasis, x: &[Vec3]) -> Self {
        let a1 = b.combine(&b.du, x);
        let a2 = b.combine(&b.dv, x);
        let a3t = a1.cross(&a2);
        let len = a3t.norm();
        Self {
            a1,
            a2,
            a11: b.combine(&b.duu, x),
            a12: b.combine(&b.duv, x),
            a22: b.combine(&b.dvv, x),
            a3: a3t / len,
            len,
        }
    }

    fn metric_voigt(&self) -> Voigt {
        Voigt::new(self.a1.dot(&self.a1), self.a2.dot(&self.a2), self.a1.dot(&self.a2))
    }

    fn curvature_voigt(&self) -> Voigt {
        Voigt::new(self.a11.dot(&self.a3), self.a22.dot(&self.a3), self.a12.dot(&self.a3))
    }
}

/// First variations for each local DOF `3 k + i` (control point `k` of the
/// basis support, component `i`), in Voigt form.
#[derive(Clone, Debug)]
pub struct Variations {
    pub eps: Vec<Voigt>,
    pub kap: Vec<Voigt>,
    a3: Vec<Vec3>,
    a3t: Vec<Vec3>,
    len: Vec<f64>,
}

fn unit(i: usize) -> Vec3 {
    let mut e = Vec3::zeros();
    e[i] = 1.0;
    e
}

fn first_variations(b: &SurfaceBasis, k: &Kinematics) -> Variations {
    let m = 3 * b.len();
    let mut v = Variations {
        eps: Vec::with_capacity(m),
        kap: Vec::with_capacity(m),
        a3: Vec::with_capacity(m),
        a3t: Vec::with_capacity(m),
        len: Vec::with_capacity(m),
    };
    for c in 0..b.len() {
        for i in 0..3 {
            let e = unit(i);
            let (nu, nv) = (b.du[c], b.dv[c]);
            v.eps.push(Voigt::new(
                nu * k.a1[i],
                nv * k.a2[i],
                nu * k.a2[i] + nv * k.a1[i],
            ));
            let a3t_r = nu * e.cross(&k.a2) + nv * k.a1.cross(&e);
            let len_r = k.a3.dot(&a3t_r);
            let a3_r = (a3t_r - len_r * k.a3) / k.len;
            let b11 = b.duu[c] * k.a3[i] + k.a11.dot(&a3_r);
            let b22 = b.dvv[c] * k.a3[i] + k.a22.dot(&a3_r);
            let b12 = b.duv[c] * k.a3[i] + k.a12.dot(&a3_r);
            v.kap.push(-Voigt::new(b11, b22, 2.0 * b12));
            v.a3.push(a3_r);
            v.a3t.push(a3t_r);
            v.len.push(len_r);
        }
    }
    v
}

/// `sum_ab w_ab b_ab,rs` for weights `w = (w11, w22, w12)` applied to the
/// symmetric curvature (so `w12` multiplies `b_12` once).
fn weighted_curvature_second(
    b: &SurfaceBasis,
    k: &Kinematics,
    v: &Variations,
    w: &Voigt,
    r: usize,
    s: usize,
) -> f64 {
    let (kr, i) = (r / 3, r % 3);
    let (ks, j) = (s / 3, s % 3);
    let nm = |c: usize| w[0] * b.duu[c] + w[1] * b.dvv[c] + w[2] * b.duv[c];
    let a = w[0] * k.a11 + w[1] * k.a22 + w[2] * k.a12;
    // a3t_rs = (Nu_r Nv_s - Nu_s Nv_r) e_i x e_j
    let c = b.du[kr] * b.dv[ks] - b.du[ks] * b.dv[kr];
    let eij = unit(i).cross(&unit(j)) * c;
    let len_rs = v.a3[s].dot(&v.a3t[r]) + k.a3.dot(&eij);
    let a_a3_rs = (a.dot(&eij) - len_rs * a.dot(&k.a3) - v.len[r] * a.dot(&v.a3[s]) - v.len[s] * a.dot(&v.a3[r])) / k.len;
    nm(kr) * v.a3[s][i] + nm(ks) * v.a3[r][j] + a_a3_rs
}

/// Explicit second variations `(eps_rs, kap_rs)` for local DOFs `r`, `s`.
pub fn second_variation(b: &SurfaceBasis, frame: &SurfaceFrame, r: usize, s: usize) -> (Voigt, Voigt) {
    let k = kinematics_from_frame(frame);
    let v = first_variations(b, &k);
    let (kr, i) = (r / 3, r % 3);
    let (ks, j) = (s / 3, s % 3);
    let eps = if i == j {
        Voigt::new(
            b.du[kr] * b.du[ks],
            b.dv[kr] * b.dv[ks],
            b.du[kr] * b.dv[ks] + b.dv[kr] * b.du[ks],
        )
    } else {
        Voigt::zeros()
    };
    let comp = |w: Voigt| weighted_curvature_second(b, &k, &v, &w, r, s);
    let kap = -Voigt::new(
        comp(Voigt::new(1.0, 0.0, 0.0)),
        comp(Voigt::new(0.0, 1.0, 0.0)),
        2.0 * comp(Voigt::new(0.0, 0.0, 1.0)),
    );
    (eps, kap)
}

fn kinematics_from_frame(f: &SurfaceFrame) -> Kinematics {
    Kinematics {
        a1: f.g1,
        a2: f.g2,
        a11: f.x_uu,
        a12: f.x_uv,
        a22: f.x_vv,
        a3: f.g3,
        len: f.jac,
    }
}

/// First variations of the Voigt strains with respect to the local DOFs of
/// `b` on the configuration described by `frame`.
pub fn strain_variations(b: &SurfaceBasis, frame: &SurfaceFrame) -> Variations {
    first_variations(b, &kinematics_from_frame(frame))
}

/// Reference data at one shell quadrature point.
#[derive(Clone, Debug)]
pub struct ShellPoint {
    pub element: usize,
    pub param: [f64; 2],
    pub basis: SurfaceBasis,
    /// Quadrature weight times reference area element.
    pub da: f64,
    pub metric: Voigt,
    pub curvature: Voigt,
    /// Voigt plane-stress matrix on the reference metric.
    pub d: Matrix3<f64>,
}

/// Cached reference geometry of a shell patch.
#[derive(Clone, Debug)]
pub struct ReferenceGeometry {
    pub elements: Vec<Element>,
    /// Quadrature points grouped by element.
    pub points: Vec<Vec<ShellPoint>>,
}

impl ReferenceGeometry {
    /// `(p+1)` Gauss points per direction per element.
    pub fn new(patch: &NurbsPatch, mat: &ShellMaterial) -> Result<Self> {
        let (pu, pv) = patch.degrees();
        let rule = quadrature::cell_rule(pu + 1, pv + 1)?;
        let elements = patch.elements();
        let mut points = Vec::with_capacity(elements.len());
        for e in &elements {
            let mut pts = Vec::with_capacity(rule.len());
            for (s, w) in rule.mapped(&e.cell).iter() {
                let basis = patch.basis_in(e, s, 2);
                let f = patch
                    .frame_with(&basis, s)
                    .map_err(|_| Error::ElementDegeneracy(e.index))?;
                let d = voigt_matrix(&plane_stress_tensor(mat, &f.metric_inverse()));
                pts.push(ShellPoint {
                    element: e.index,
                    param: s,
                    basis,
                    da: w * f.jac,
                    metric: Voigt::new(f.metric[(0, 0)], f.metric[(1, 1)], f.metric[(0, 1)]),
                    curvature: Voigt::new(f.curvature[(0, 0)], f.curvature[(1, 1)], f.curvature[(0, 1)]),
                    d,
                });
            }
            points.push(pts);
        }
        Ok(Self { elements, points })
    }

    pub fn total_area(&self) -> f64 {
        self.points.iter().flatten().map(|p| p.da).sum()
    }
}

/// Boundary condition of one patch edge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeCondition {
    #[default]
    Free,
    /// Displacements of the edge control-point row fixed.
    Hinged,
    /// Displacements of the edge row and the adjacent row fixed.
    Clamped,
}

/// Edge conditions keyed by edge; missing edges are free.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub edges: BTreeMap<EdgeKey, EdgeCondition>,
}

/// Ordered wrapper so edges can key a sorted map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKey {
    U0,
    U1,
    V0,
    V1,
}

impl From<EdgeKey> for Edge {
    fn from(k: EdgeKey) -> Self {
        match k {
            EdgeKey::U0 => Edge::U0,
            EdgeKey::U1 => Edge::U1,
            EdgeKey::V0 => Edge::V0,
            EdgeKey::V1 => Edge::V1,
        }
    }
}

impl From<Edge> for EdgeKey {
    fn from(e: Edge) -> Self {
        match e {
            Edge::U0 => EdgeKey::U0,
            Edge::U1 => EdgeKey::U1,
            Edge::V0 => EdgeKey::V0,
            Edge::V1 => EdgeKey::V1,
        }
    }
}

impl BoundarySpec {
    pub fn free() -> Self {
        Self::default()
    }

    pub fn with(mut self, edge: Edge, cond: EdgeCondition) -> Self {
        self.edges.insert(edge.into(), cond);
        self
    }

    /// Constrained global DOF indices (sorted, unique).
    pub fn constrained_dofs(&self, patch: &NurbsPatch) -> Result<Vec<usize>> {
        let mut dofs = Vec::new();
        for (&key, &cond) in &self.edges {
            let edge = Edge::from(key);
            let rows = match cond {
                EdgeCondition::Free => 0,
                EdgeCondition::Hinged => 1,
                EdgeCondition::Clamped => 2,
            };
            let depth = match edge {
                Edge::U0 | Edge::U1 => patch.nu(),
                Edge::V0 | Edge::V1 => patch.nv(),
            };
            if rows > depth {
                return Err(Error::Config(format!("{edge:?}: too few control-point rows to clamp")));
            }
            for offset in 0..rows {
                for i in patch.edge_row(edge, offset) {
                    dofs.extend([3 * i, 3 * i + 1, 3 * i + 2]);
                }
            }
        }
        dofs.sort_unstable();
        dofs.dedup();
        Ok(dofs)
    }
}

/// Elimination of constrained DOFs (prescribed to zero).
#[derive(Clone, Debug, PartialEq)]
pub struct DofMap {
    n: usize,
    free: Vec<usize>,
    constrained: Vec<usize>,
}

impl DofMap {
    pub fn new(n: usize, constrained: Vec<usize>) -> Result<Self> {
        let mut mask = vec![false; n];
        for &d in &constrained {
            mask[d] = true;
        }
        let free: Vec<usize> = (0..n).filter(|&d| !mask[d]).collect();
        if free.is_empty() {
            return Err(Error::Config("every degree of freedom is constrained".into()));
        }
        Ok(Self { n, free, constrained })
    }

    pub fn full_len(&self) -> usize {
        self.n
    }

    pub fn free(&self) -> &[usize] {
        &self.free
    }

    pub fn constrained(&self) -> &[usize] {
        &self.constrained
    }

    pub fn reduce_vec(&self, v: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&i| v[i]).collect()
    }

    pub fn reduce_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.free.len();
        DMatrix::from_fn(k, k, |i, j| m[(self.free[i], self.free[j])])
    }

    /// Scatter reduced values into a full vector with zeros on constraints.
    pub fn expand(&self, r: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (&i, &v) in self.free.iter().zip(r) {
            out[i] = v;
        }
        out
    }

    /// Zero the constrained entries in place.
    pub fn mask(&self, v: &mut [f64]) {
        for &i in &self.constrained {
            v[i] = 0.0;
        }
    }
}

/// Dead loads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LoadSpec {
    /// Body force density (N/m^3), multiplied by the thickness.
    Body { force: [f64; 3] },
    /// Gravitational acceleration (m/s^2); force density `rho * g`.
    Gravity { g: [f64; 3] },
    /// Surface traction (N/m^2), optionally restricted to a parametric window
    /// `[u0, u1, v0, v1]`.
    Surface {
        traction: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        window: Option<[f64; 4]>,
    },
    /// Line load (N/m) along an edge.
    Edge { edge: Edge, load: [f64; 3] },
}

/// Shell model on a fixed reference patch.
#[derive(Clone, Debug)]
pub struct ShellSystem {
    pub patch: NurbsPatch,
    pub material: ShellMaterial,
    pub geometry: ReferenceGeometry,
    /// Scalar mass matrix `rho h int N_I N_J dA`.
    pub mass: ScalarCsr,
    pub dofs: DofMap,
}

/// Local-to-global scatter data of one element.
struct ElementBlock {
    support: Vec<usize>,
    values: Vec<f64>,
}

impl ShellSystem {
    pub fn new(patch: NurbsPatch, material: ShellMaterial, bc: &BoundarySpec) -> Result<Self> {
        material.validate()?;
        let geometry = ReferenceGeometry::new(&patch, &material)?;
        let n = patch.len();
        let mut rows = vec![Vec::new(); n];
        let rh = material.rho * material.h;
        for p in geometry.points.iter().flatten() {
            let b = &p.basis;
            for (a, &i) in b.indices.iter().enumerate() {
                for (c, &j) in b.indices.iter().enumerate() {
                    rows[i].push((j, rh * p.da * b.n[a] * b.n[c]));
                }
            }
        }
        let mass = ScalarCsr::from_rows(n, rows);
        let dofs = DofMap::new(3 * n, bc.constrained_dofs(&patch)?)?;
        Ok(Self {
            patch,
            material,
            geometry,
            mass,
            dofs,
        })
    }

    pub fn ndofs(&self) -> usize {
        3 * self.patch.len()
    }

    /// Current control points `X + u`.
    pub fn current_points(&self, u: &[f64]) -> Vec<Vec3> {
        self.patch
            .points()
            .iter()
            .enumerate()
            .map(|(i, p)| p + Vec3::new(u[3 * i], u[3 * i + 1], u[3 * i + 2]))
            .collect()
    }

    fn point_state(&self, p: &ShellPoint, x: &[Vec3]) -> Result<(Kinematics, Voigt, Voigt)> {
        let k = Kinematics::new(&p.basis, x);
        if !(k.len > 1e-14 * k.a1.norm() * k.a2.norm()) {
            return Err(Error::ElementDegeneracy(p.element));
        }
        let g = k.metric_voigt();
        let eps = Voigt::new(0.5 * (g[0] - p.metric[0]), 0.5 * (g[1] - p.metric[1]), g[2] - p.metric[2]);
        let b = k.curvature_voigt();
        let kap = Voigt::new(
            p.curvature[0] - b[0],
            p.curvature[1] - b[1],
            2.0 * (p.curvature[2] - b[2]),
        );
        Ok((k, eps, kap))
    }

    /// Membrane and bending strains at a cached quadrature point.
    pub fn strain_state(&self, u: &[f64], element: usize, q: usize) -> Result<(Matrix2<f64>, Matrix2<f64>)> {
        let x = self.current_points(u);
        let (_, e, k) = self.point_state(&self.geometry.points[element][q], &x)?;
        Ok((
            Matrix2::new(e[0], 0.5 * e[2], 0.5 * e[2], e[1]),
            Matrix2::new(k[0], 0.5 * k[2], 0.5 * k[2], k[1]),
        ))
    }

    /// Stored elastic energy.
    pub fn strain_energy(&self, u: &[f64]) -> Result<f64> {
        let x = self.current_points(u);
        let h = self.material.h;
        let mut total = 0.0;
        for p in self.geometry.points.iter().flatten() {
            let (_, eps, kap) = self.point_state(p, &x)?;
            total += 0.5 * p.da * (h * eps.dot(&(p.d * eps)) + h * h * h / 12.0 * kap.dot(&(p.d * kap)));
        }
        Ok(total)
    }

    fn element_blocks(&self, u: &[f64], with_stiffness: bool) -> Result<Vec<(ElementBlock, Option<ElementBlock>)>> {
        let x = self.current_points(u);
        let h = self.material.h;
        let hb = h * h * h / 12.0;
        self.geometry
            .points
            .par_iter()
            .map(|pts| -> Result<(ElementBlock, Option<ElementBlock>)> {
                let support = pts[0].basis.indices.clone();
                let m = 3 * support.len();
                let mut f = vec![0.0; m];
                let mut kgeo = if with_stiffness { vec![0.0; m * m] } else { Vec::new() };
                let mut kmat = if with_stiffness { vec![0.0; m * m] } else { Vec::new() };
                let mut bt: Vec<[f64; 6]> = Vec::with_capacity(m);
                let mut a3v: Vec<[f64; 3]> = Vec::with_capacity(m);
                let mut a3tv: Vec<[f64; 3]> = Vec::with_capacity(m);
                let mut lr: Vec<(f64, f64)> = Vec::with_capacity(m);
                let mut dbt: Vec<[f64; 6]> = Vec::with_capacity(m);
                for p in pts {
                    let (k, eps, kap) = self.point_state(p, &x)?;
                    let nres = h * (p.d * eps);
                    let mres = hb * (p.d * kap);
                    let v = first_variations(&p.basis, &k);
                    for r in 0..m {
                        f[r] += p.da * (nres.dot(&v.eps[r]) + mres.dot(&v.kap[r]));
                    }
                    if !with_stiffness {
                        continue;
                    }
                    // Material part B^T D B with B = [eps_r; kap_r], upper triangle.
                    let dn = h * p.da * p.d;
                    let dm = hb * p.da * p.d;
                    bt.clear();
                    dbt.clear();
                    for r in 0..m {
                        let (e, q) = (v.eps[r], v.kap[r]);
                        let (de, dq) = (dn * e, dm * q);
                        bt.push([e[0], e[1], e[2], q[0], q[1], q[2]]);
                        dbt.push([de[0], de[1], de[2], dq[0], dq[1], dq[2]]);
                    }
                    for r in 0..m {
                        let x = &bt[r];
                        let row = &mut kmat[r * m..(r + 1) * m];
                        for (s, y) in dbt.iter().enumerate().skip(r) {
                            row[s] += x[0] * y[0] + x[1] * y[1] + x[2] * y[2] + x[3] * y[3] + x[4] * y[4] + x[5] * y[5];
                        }
                    }
                    // m : kap_rs = -sum w_ab b_ab,rs with w = (m11, m22, 2 m12)
                    let w = Voigt::new(mres[0], mres[1], 2.0 * mres[2]);
                    let b = &p.basis;
                    let nb = b.len();
                    let a = w[0] * k.a11 + w[1] * k.a22 + w[2] * k.a12;
                    let a_a3 = a.dot(&k.a3);
                    let nm: Vec<f64> = (0..nb)
                        .map(|c| w[0] * b.duu[c] + w[1] * b.dvv[c] + w[2] * b.duv[c])
                        .collect();
                    let inv_len = 1.0 / k.len;
                    let q = p.da;
                    // Per-dof data in flat arrays; `lr` folds the 1/|a3~| factor.
                    a3v.clear();
                    a3tv.clear();
                    lr.clear();
                    for r in 0..m {
                        let (x, y) = (v.a3[r], v.a3t[r]);
                        a3v.push([x[0], x[1], x[2]]);
                        a3tv.push([y[0] * inv_len * a_a3, y[1] * inv_len * a_a3, y[2] * inv_len * a_a3]);
                        lr.push((v.len[r] * inv_len, a.dot(&x)));
                    }
                    // off-diagonal (i != j) part: (e_i x e_j) = +-e_l
                    let ap = (a - a_a3 * k.a3) * inv_len;
                    for kr in 0..nb {
                        for ks in kr..nb {
                            let c = b.du[kr] * b.dv[ks] - b.du[ks] * b.dv[kr];
                            let geo = nres[0] * b.du[kr] * b.du[ks]
                                + nres[1] * b.dv[kr] * b.dv[ks]
                                + nres[2] * (b.du[kr] * b.dv[ks] + b.dv[kr] * b.du[ks]);
                            let skew = [
                                [0.0, -c * ap[2], c * ap[1]],
                                [c * ap[2], 0.0, -c * ap[0]],
                                [-c * ap[1], c * ap[0], 0.0],
                            ];
                            let (nr, ns) = (nm[kr], nm[ks]);
                            for i in 0..3 {
                                let r = 3 * kr + i;
                                let (ar, atr, (len_r, aar)) = (&a3v[r], &a3tv[r], lr[r]);
                                let j0 = if ks == kr { i } else { 0 };
                                let row = &mut kgeo[r * m..(r + 1) * m];
                                for j in j0..3 {
                                    let s = 3 * ks + j;
                                    let (as_, (len_s, aas)) = (&a3v[s], lr[s]);
                                    let t = as_[0] * atr[0] + as_[1] * atr[1] + as_[2] * atr[2];
                                    let mut val = skew[i][j] + t + len_r * aas + len_s * aar - nr * as_[i] - ns * ar[j];
                                    if i == j {
                                        val += geo;
                                    }
                                    row[s] += q * val;
                                }
                            }
                        }
                    }
                }
                let mut values = Vec::new();
                if with_stiffness {
                    // the material part holds the upper triangle; the rest only
                    // blocks with ks >= kr (and j >= i on the diagonal)
                    values = vec![0.0; m * m];
                    for r in 0..m {
                        values[r * m + r] = kmat[r * m + r] + kgeo[r * m + r];
                        for s in r + 1..m {
                            let v = kmat[r * m + s] + kgeo[r * m + s] + kgeo[s * m + r];
                            values[r * m + s] = v;
                            values[s * m + r] = v;
                        }
                    }
                }
                let fb = ElementBlock {
                    support: support.clone(),
                    values: f,
                };
                let kb = with_stiffness.then_some(ElementBlock { support, values });
                Ok((fb, kb))
            })
            .collect()
    }

    /// Internal force vector `P` (positive restoring).
    pub fn internal_forces(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut p = vec![0.0; self.ndofs()];
        for (fb, _) in self.element_blocks(u, false)? {
            scatter_vec(&mut p, &fb);
        }
        Ok(p)
    }

    /// `P(u)` and its Jacobian `K(u)`.
    pub fn forces_and_stiffness(&self, u: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let n = self.ndofs();
        let mut p = vec![0.0; n];
        let mut k = DMatrix::zeros(n, n);
        for (fb, kb) in self.element_blocks(u, true)? {
            scatter_vec(&mut p, &fb);
            if let Some(kb) = kb {
                let m = 3 * kb.support.len();
                for r in 0..m {
                    let gr = 3 * kb.support[r / 3] + r % 3;
                    for s in 0..m {
                        let gs = 3 * kb.support[s / 3] + s % 3;
                        k[(gr, gs)] += kb.values[r * m + s];
                    }
                }
            }
        }
        Ok((p, k))
    }

    pub fn stiffness(&self, u: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.forces_and_stiffness(u)?.1)
    }

    /// Dense `M_s` over interleaved DOFs.
    pub fn mass_matrix(&self) -> DMatrix<f64> {
        self.mass.to_dense3()
    }

    /// Consistent nodal load vector of a dead load.
    pub fn external_load(&self, load: &LoadSpec) -> Result<Vec<f64>> {
        let mut f = vec![0.0; self.ndofs()];
        let mat = &self.material;
        let area_load = |density: Vec3, window: Option<Cell>, f: &mut Vec<f64>| -> Result<()> {
            match window {
                None => {
                    for p in self.geometry.points.iter().flatten() {
                        add_point_load(f, &p.basis, density * p.da);
                    }
                }
                Some(w) => {
                    // Integrate over the intersection of the window with each
                    // element so partial coverage stays exact.
                    let (pu, pv) = self.patch.degrees();
                    let rule = quadrature::cell_rule(pu + 1, pv + 1)?;
                    for e in &self.geometry.elements {
                        let c = Cell::new(e.cell.u0.max(w.u0), e.cell.u1.min(w.u1), e.cell.v0.max(w.v0), e.cell.v1.min(w.v1));
                        if c.u1 <= c.u0 || c.v1 <= c.v0 {
                            continue;
                        }
                        for (s, wq) in rule.mapped(&c).iter() {
                            let b = self.patch.basis_in(e, s, 1);
                            let jac = b.combine(&b.du, self.patch.points()).cross(&b.combine(&b.dv, self.patch.points())).norm();
                            add_point_load(f, &b, density * (wq * jac));
                        }
                    }
                }
            }
            Ok(())
        };
        match load {
            LoadSpec::Body { force } => area_load(Vec3::from(*force) * mat.h, None, &mut f)?,
            LoadSpec::Gravity { g } => area_load(Vec3::from(*g) * (mat.rho * mat.h), None, &mut f)?,
            LoadSpec::Surface { traction, window } => {
                let w = window.map(|w| Cell::new(w[0], w[1], w[2], w[3]));
                area_load(Vec3::from(*traction), w, &mut f)?
            }
            LoadSpec::Edge { edge, load } => self.edge_load(*edge, Vec3::from(*load), &mut f)?,
        }
        Ok(f)
    }

    fn edge_load(&self, edge: Edge, q: Vec3, f: &mut [f64]) -> Result<()> {
        let (pu, pv) = self.patch.degrees();
        let (lo_u, hi_u) = self.patch.kv_u().domain();
        let (lo_v, hi_v) = self.patch.kv_v().domain();
        let (along_u, fixed) = match edge {
            Edge::U0 => (false, lo_u),
            Edge::U1 => (false, hi_u),
            Edge::V0 => (true, lo_v),
            Edge::V1 => (true, hi_v),
        };
        let order = if along_u { pu + 1 } else { pv + 1 };
        let g = quadrature::gauss_legendre(order)?;
        let spans = if along_u { self.patch.kv_u().spans() } else { self.patch.kv_v().spans() };
        for (_, a, b) in spans {
            for (&t, &w) in g.points.iter().zip(&g.weights) {
                let s = a + t * (b - a);
                let param = if along_u { [s, fixed] } else { [fixed, s] };
                let basis = self.patch.basis(param, 1)?;
                let pts = self.patch.points();
                let tangent = if along_u { basis.combine(&basis.du, pts) } else { basis.combine(&basis.dv, pts) };
                add_point_load(f, &basis, q * (w * (b - a) * tangent.norm()));
            }
        }
        Ok(())
    }
}

fn add_point_load(f: &mut [f64], b: &SurfaceBasis, force: Vec3) {
    for (&i, &n) in b.indices.iter().zip(&b.n) {
        for c in 0..3 {
            f[3 * i + c] += n * force[c];
        }
    }
}

fn scatter_vec(out: &mut [f64], b: &ElementBlock) {
    for (r, v) in b.values.iter().enumerate() {
        out[3 * b.support[r / 3] + r % 3] += v;
    }
}
