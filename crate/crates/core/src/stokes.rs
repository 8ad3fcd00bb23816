//! Collocated single-layer boundary integral formulation of Stokes flow
//! around a patch, and the damping operator `C = M_u D_c^{-1} M_c` it induces.
//!
//! The single-layer density `f` returned by [`BemSystem::tractions`] is the
//! force per unit area the surface exerts on the fluid, so for a passive
//! surface `v . C v > 0`. The force the fluid exerts on the surface is `-C v`.

use std::f64::consts::PI;
use std::io::{self, Write};

use nalgebra::{DMatrix, Matrix3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dense_entries, write_matrix_market, DenseLu, ScalarCsr};
use crate::nurbs::{Element, NurbsPatch, Vec3};
use crate::quadrature::{self, Cell, QuadratureRule};

/// Subdivision depth allowed when evaluating the velocity off the surface.
const OFFSURFACE_DEPTH: usize = 40;

/// Stokeslet `S_ab = (r_a r_b / |r|^3 + delta_ab / |r|) / (8 pi eta)`.
pub fn stokeslet(r: &Vec3, eta: f64) -> Result<Matrix3<f64>> {
    let d2 = r.norm_squared();
    if d2 == 0.0 {
        return Err(Error::SingularEvaluation);
    }
    let d = d2.sqrt();
    let c = 1.0 / (8.0 * PI * eta * d);
    Ok(r * r.transpose() * (c / d2) + Matrix3::identity() * c)
}

/// Stresslet `T_abc = -3 r_a r_b r_c / (4 pi |r|^5)`, indexed `[a][b][c]`.
pub fn stresslet(r: &Vec3) -> Result<[[[f64; 3]; 3]; 3]> {
    let d2 = r.norm_squared();
    if d2 == 0.0 {
        return Err(Error::SingularEvaluation);
    }
    let c = -3.0 / (4.0 * PI * d2 * d2 * d2.sqrt());
    let mut t = [[[0.0; 3]; 3]; 3];
    for (a, ta) in t.iter_mut().enumerate() {
        for (b, tab) in ta.iter_mut().enumerate() {
            for (cc, v) in tab.iter_mut().enumerate() {
                *v = c * r[a] * r[b] * r[cc];
            }
        }
    }
    Ok(t)
}

/// Quadrature settings for the boundary element assembly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadConfig {
    /// Gauss points per direction on regular elements.
    pub regular_order: usize,
    /// Gauss points per direction of each Duffy triangle.
    pub singular_order: usize,
    /// Gauss points per direction on the children of near-singular elements.
    pub near_order: usize,
    /// Elements closer to a collocation point than this multiple of their
    /// diameter are integrated with the near-singular rule.
    pub near_factor: f64,
    /// Assemble `M_u` on the reference instead of the current configuration.
    pub mass_on_reference: bool,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self {
            regular_order: 4,
            singular_order: 12,
            near_order: 6,
            near_factor: 2.0,
            mass_on_reference: false,
        }
    }
}

impl QuadConfig {
    pub fn validate(&self) -> Result<()> {
        for o in [self.regular_order, self.singular_order, self.near_order] {
            if !(1..=64).contains(&o) {
                return Err(Error::QuadratureOrder(o));
            }
        }
        if !(self.near_factor >= 0.0) {
            return Err(Error::Config(format!("near_factor {} must be >= 0", self.near_factor)));
        }
        Ok(())
    }
}

/// Quadrature points of one element with the rational basis cached. Only the
/// control points change between assemblies, so geometry is recombined from
/// the cached values.
#[derive(Clone, Debug)]
struct PointSet {
    support: Vec<usize>,
    weights: Vec<f64>,
    /// Per point: `N`, then `N_u`, then `N_v`, each of length `support.len()`.
    basis: Vec<f64>,
}

impl PointSet {
    fn new(patch: &NurbsPatch, e: &Element, rule: &QuadratureRule) -> Self {
        let support = patch.element_support(e);
        let m = support.len();
        let mut basis = Vec::with_capacity(3 * m * rule.len());
        for (s, _) in rule.iter() {
            let b = patch.basis_in(e, s, 1);
            debug_assert_eq!(b.indices, support);
            basis.extend_from_slice(&b.n);
            basis.extend_from_slice(&b.du);
            basis.extend_from_slice(&b.dv);
        }
        Self {
            support,
            weights: rule.weights().to_vec(),
            basis,
        }
    }

    fn len(&self) -> usize {
        self.weights.len()
    }

    fn values(&self, q: usize) -> &[f64] {
        let m = self.support.len();
        &self.basis[3 * m * q..3 * m * q + m]
    }

    /// Position and `weight * J` at point `q`.
    fn geometry(&self, q: usize, points: &[Vec3]) -> (Vec3, f64) {
        let m = self.support.len();
        let b = &self.basis[3 * m * q..3 * m * (q + 1)];
        let (mut y, mut g1, mut g2) = (Vec3::zeros(), Vec3::zeros(), Vec3::zeros());
        for (k, &i) in self.support.iter().enumerate() {
            let p = &points[i];
            y += b[k] * p;
            g1 += b[m + k] * p;
            g2 += b[2 * m + k] * p;
        }
        (y, self.weights[q] * g1.cross(&g2).norm())
    }

    /// Scalar mass contributions `sum_q w J N_I N_J`.
    fn mass_into(&self, points: &[Vec3], rows: &mut [Vec<(usize, f64)>]) {
        for q in 0..self.len() {
            let (_, wj) = self.geometry(q, points);
            let n = self.values(q);
            for (a, &i) in self.support.iter().enumerate() {
                for (b, &j) in self.support.iter().enumerate() {
                    rows[i].push((j, wj * n[a] * n[b]));
                }
            }
        }
    }
}

/// Accumulate `sum_q w J K(x - y_q) N_k(y_q)` into a three-row block, where
/// `K = r r^T / |r|^3 + I / |r|` (the Stokeslet without `1/(8 pi eta)`).
fn accumulate(row: &mut [f64], ncols: usize, x: &Vec3, y: &Vec3, wj: f64, support: &[usize], n: &[f64]) -> Result<()> {
    let r = x - y;
    let d2 = r.norm_squared();
    if d2 == 0.0 {
        return Err(Error::SingularEvaluation);
    }
    let inv = 1.0 / d2.sqrt();
    let inv3 = inv / d2;
    let k = [
        [r[0] * r[0] * inv3 + inv, r[0] * r[1] * inv3, r[0] * r[2] * inv3],
        [r[1] * r[0] * inv3, r[1] * r[1] * inv3 + inv, r[1] * r[2] * inv3],
        [r[2] * r[0] * inv3, r[2] * r[1] * inv3, r[2] * r[2] * inv3 + inv],
    ];
    for (&j, &nj) in support.iter().zip(n) {
        let c = wj * nj;
        for (a, ka) in k.iter().enumerate() {
            let base = a * ncols + 3 * j;
            row[base] += ka[0] * c;
            row[base + 1] += ka[1] * c;
            row[base + 2] += ka[2] * c;
        }
    }
    Ok(())
}

fn box_distance(x: &Vec3, lo: &Vec3, hi: &Vec3) -> f64 {
    let d = (lo - x).sup(&(x - hi)).sup(&Vec3::zeros());
    d.norm()
}

/// Rule on `cell` refined around the physical point `x`, using sampled
/// bounding boxes of the subcells as the distance and diameter measure.
fn physical_near_rule(
    patch: &NurbsPatch,
    e: &Element,
    cell: &Cell,
    x: &Vec3,
    order: usize,
    max_depth: usize,
) -> Result<QuadratureRule> {
    quadrature::subdivided_rule_to_depth(cell, order, max_depth, |c| {
        let (lo, hi) = patch.sampled_box(e, c, 3);
        (box_distance(x, &lo, &hi), (hi - lo).norm())
    })
}

/// Element integration plan of one collocation row.
#[derive(Clone, Debug)]
struct RowPlan {
    /// Elements integrated with the shared regular rule.
    regular: Vec<usize>,
    /// Singular or near-singular rules of the remaining elements.
    special: Vec<PointSet>,
}

/// Precomputed quadrature for one patch topology. Built once from a
/// reference geometry; [`assemble`](Self::assemble) then only recombines the
/// control points of the current configuration.
///
/// Which elements get singular, near-singular or regular treatment, and the
/// subdivision of near-singular elements, are decided on the geometry given
/// to [`new`](Self::new).
#[derive(Clone, Debug)]
pub struct BemAssembler {
    cfg: QuadConfig,
    n: usize,
    colloc_params: Vec<[f64; 2]>,
    mc: ScalarCsr,
    regular: Vec<PointSet>,
    mass: Vec<PointSet>,
    reference_mass: ScalarCsr,
    rows: Vec<RowPlan>,
}

impl BemAssembler {
    pub fn new(patch: &NurbsPatch, cfg: &QuadConfig) -> Result<Self> {
        cfg.validate()?;
        let n = patch.len();
        let colloc_params = patch.greville_params()?;
        let mut mc_rows = Vec::with_capacity(n);
        let mut colloc_points = Vec::with_capacity(n);
        for &s in &colloc_params {
            let b = patch.basis(s, 0)?;
            colloc_points.push(b.combine(&b.n, patch.points()));
            mc_rows.push(b.indices.iter().copied().zip(b.n.iter().copied()).collect());
        }
        let mc = ScalarCsr::from_rows(n, mc_rows);

        let elements = patch.elements();
        let reg_rule = quadrature::cell_rule(cfg.regular_order, cfg.regular_order)?;
        let (pu, pv) = patch.degrees();
        let mass_rule = quadrature::cell_rule(pu + 1, pv + 1)?;
        let regular: Vec<PointSet> = elements
            .iter()
            .map(|e| PointSet::new(patch, e, &reg_rule.mapped(&e.cell)))
            .collect();
        let mass: Vec<PointSet> = elements
            .iter()
            .map(|e| PointSet::new(patch, e, &mass_rule.mapped(&e.cell)))
            .collect();
        let reference_mass = mass_matrix(&mass, patch.points(), n);

        let boxes: Vec<(Vec3, Vec3)> = elements.iter().map(|e| patch.sampled_box(e, &e.cell, 5)).collect();
        let (lo_u, hi_u) = patch.kv_u().domain();
        let (lo_v, hi_v) = patch.kv_v().domain();
        let tol = 1e-12 * (hi_u - lo_u).max(hi_v - lo_v);
        let rows = colloc_params
            .par_iter()
            .zip(&colloc_points)
            .map(|(&s, x)| -> Result<RowPlan> {
                let mut plan = RowPlan {
                    regular: Vec::new(),
                    special: Vec::new(),
                };
                for (e, (lo, hi)) in elements.iter().zip(&boxes) {
                    if e.cell.contains(s, tol) {
                        let rule = quadrature::singular_rule(&e.cell, s, cfg.singular_order)?;
                        plan.special.push(PointSet::new(patch, e, &rule));
                    } else if box_distance(x, lo, hi) < cfg.near_factor * (hi - lo).norm() {
                        let rule = physical_near_rule(
                            patch,
                            e,
                            &e.cell,
                            x,
                            cfg.near_order,
                            quadrature::MAX_SUBDIVISION_DEPTH,
                        )?;
                        plan.special.push(PointSet::new(patch, e, &rule));
                    } else {
                        plan.regular.push(e.index);
                    }
                }
                Ok(plan)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            n,
            colloc_params,
            mc,
            regular,
            mass,
            reference_mass,
            rows,
        })
    }

    pub fn config(&self) -> &QuadConfig {
        &self.cfg
    }

    pub fn colloc_params(&self) -> &[[f64; 2]] {
        &self.colloc_params
    }

    /// Scalar collocation matrix `N_j(s_i)`; it does not depend on the
    /// configuration since collocation abscissae are parametric.
    pub fn mc(&self) -> &ScalarCsr {
        &self.mc
    }

    /// Scalar pseudo mass matrix on the reference configuration.
    pub fn reference_mass(&self) -> &ScalarCsr {
        &self.reference_mass
    }

    /// Assemble and factorize the single-layer system on `current`, which
    /// must share knots and weights with the reference patch.
    pub fn assemble(&self, current: &NurbsPatch, eta: f64) -> Result<BemSystem> {
        if current.len() != self.n {
            return Err(Error::InvalidPatch(format!(
                "patch has {} control points, assembler expects {}",
                current.len(),
                self.n
            )));
        }
        if !(eta > 0.0) {
            return Err(Error::Config(format!("viscosity {eta} must be positive")));
        }
        let pts = current.points();
        let colloc_points: Vec<Vec3> = (0..self.n)
            .map(|i| self.mc.row(i).fold(Vec3::zeros(), |acc, (j, v)| acc + v * pts[j]))
            .collect();
        let shared: Vec<Vec<(Vec3, f64)>> = self
            .regular
            .iter()
            .map(|ps| (0..ps.len()).map(|q| ps.geometry(q, pts)).collect())
            .collect();

        let ncols = 3 * self.n;
        let blocks = self
            .rows
            .par_iter()
            .zip(&colloc_points)
            .map(|(plan, x)| -> Result<Vec<f64>> {
                let mut row = vec![0.0; 3 * ncols];
                for &e in &plan.regular {
                    let ps = &self.regular[e];
                    for (q, (y, wj)) in shared[e].iter().enumerate() {
                        accumulate(&mut row, ncols, x, y, *wj, &ps.support, ps.values(q))?;
                    }
                }
                for ps in &plan.special {
                    for q in 0..ps.len() {
                        let (y, wj) = ps.geometry(q, pts);
                        accumulate(&mut row, ncols, x, &y, wj, &ps.support, ps.values(q))?;
                    }
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / (8.0 * PI * eta);
        let dc = DMatrix::from_fn(ncols, ncols, |r, c| blocks[r / 3][(r % 3) * ncols + c] * scale);
        let lu = DenseLu::factor(&dc).map_err(|e| match e {
            Error::SingularMatrix(r) => {
                let p = colloc_points[r / 3];
                Error::BemSingular {
                    row: r / 3,
                    point: [p[0], p[1], p[2]],
                }
            }
            other => other,
        })?;
        let rcond = lu.rcond();
        log::debug!("single-layer system: {} dofs, rcond {rcond:.3e}", ncols);
        let mu = if self.cfg.mass_on_reference {
            self.reference_mass.clone()
        } else {
            mass_matrix(&self.mass, pts, self.n)
        };
        Ok(BemSystem {
            colloc_params: self.colloc_params.clone(),
            colloc_points,
            mc: self.mc.clone(),
            dc,
            lu,
            mu,
            eta,
            rcond,
        })
    }
}

fn mass_matrix(sets: &[PointSet], points: &[Vec3], n: usize) -> ScalarCsr {
    let mut rows = vec![Vec::new(); n];
    for ps in sets {
        ps.mass_into(points, &mut rows);
    }
    ScalarCsr::from_rows(n, rows)
}

/// One-shot assembly on `patch`.
pub fn assemble_bem(patch: &NurbsPatch, eta: f64, cfg: &QuadConfig) -> Result<BemSystem> {
    BemAssembler::new(patch, cfg)?.assemble(patch, eta)
}

/// Assembled and factorized single-layer system on one configuration.
#[derive(Clone, Debug)]
pub struct BemSystem {
    pub colloc_params: Vec<[f64; 2]>,
    /// Images of the collocation abscissae on the assembled configuration.
    pub colloc_points: Vec<Vec3>,
    /// Scalar collocation matrix; acts as `M_c (x) I_3`.
    pub mc: ScalarCsr,
    /// Dense single-layer matrix `D_c` (`3n x 3n`).
    pub dc: DMatrix<f64>,
    lu: DenseLu,
    /// Scalar pseudo mass matrix; acts as `M_u (x) I_3`.
    pub mu: ScalarCsr,
    pub eta: f64,
    /// Reciprocal 1-norm condition estimate of `D_c`.
    pub rcond: f64,
}

impl BemSystem {
    pub fn dofs(&self) -> usize {
        self.dc.nrows()
    }

    /// Single-layer density coefficients for the surface velocity `v`:
    /// the solution of `D_c f = M_c v`.
    pub fn tractions(&self, v: &[f64]) -> Vec<f64> {
        self.lu.solve(&self.mc.apply3(v))
    }

    pub fn damping(&self) -> DampingOperator<'_> {
        DampingOperator { system: self }
    }

    /// Write `D_c`, `M_c`, `M_u` and optionally a traction vector as
    /// consecutive matrix-market blocks.
    pub fn write_debug<W: Write>(&self, w: &mut W, tractions: Option<&[f64]>) -> io::Result<()> {
        let n = self.dofs();
        write_matrix_market(w, "Dc", n, n, dense_entries(&self.dc))?;
        let mc = self.mc.to_dense3();
        write_matrix_market(w, "Mc", n, n, dense_entries(&mc))?;
        let mu = self.mu.to_dense3();
        write_matrix_market(w, "Mu", n, n, dense_entries(&mu))?;
        if let Some(f) = tractions {
            write_matrix_market(w, "tractions", n, 1, f.iter().enumerate().map(|(i, &v)| (i, 0, v)))?;
        }
        Ok(())
    }
}

/// The discrete Dirichlet-to-Neumann map `C = M_u D_c^{-1} M_c`.
#[derive(Clone, Copy, Debug)]
pub struct DampingOperator<'a> {
    system: &'a BemSystem,
}

impl DampingOperator<'_> {
    /// `C v` (generalized force on the fluid; the fluid force on the
    /// surface is the negative).
    pub fn action(&self, v: &[f64]) -> Vec<f64> {
        self.system.mu.apply3(&self.system.tractions(v))
    }

    /// Dense `C`, built from a block solve against `M_c (x) I_3`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let s = self.system;
        let x = s.lu.solve_matrix(&s.mc.to_dense3());
        let n = s.dofs();
        let mut c = DMatrix::zeros(n, n);
        for col in 0..n {
            let xc = x.column(col);
            let mut cc = c.column_mut(col);
            for i in 0..s.mu.n_rows() {
                for (j, m) in s.mu.row(i) {
                    for a in 0..3 {
                        cc[3 * i + a] += m * xc[3 * j + a];
                    }
                }
            }
        }
        c
    }

    /// Sum of the per-control-point blocks of `C v`; for a rigid velocity
    /// field this is the total force on the fluid.
    pub fn resultant(&self, v: &[f64]) -> Vec3 {
        let f = self.action(v);
        f.chunks_exact(3).fold(Vec3::zeros(), |acc, c| acc + Vec3::new(c[0], c[1], c[2]))
    }
}

/// Velocity `v(x) = int S(x - y) f(y) dGamma_y` of the single layer with
/// density coefficients `f` on `patch`, at a point off the surface.
pub fn offsurface_velocity(x: &Vec3, f: &[f64], patch: &NurbsPatch, eta: f64, cfg: &QuadConfig) -> Result<Vec3> {
    if f.len() != 3 * patch.len() {
        return Err(Error::InvalidPatch(format!(
            "density has {} entries, expected {}",
            f.len(),
            3 * patch.len()
        )));
    }
    let (_, dist) = patch.closest_point(x);
    if dist <= 1e-8 * patch.diameter() {
        return Err(Error::NearSurface(dist));
    }
    let reg = quadrature::cell_rule(cfg.regular_order, cfg.regular_order)?;
    let mut v = Vec3::zeros();
    for e in patch.elements() {
        let (lo, hi) = patch.sampled_box(&e, &e.cell, 5);
        let rule = if box_distance(x, &lo, &hi) < cfg.near_factor * (hi - lo).norm() {
            physical_near_rule(patch, &e, &e.cell, x, cfg.near_order, OFFSURFACE_DEPTH)?
        } else {
            reg.mapped(&e.cell)
        };
        for (s, w) in rule.iter() {
            let b = patch.basis_in(&e, s, 1);
            let y = b.combine(&b.n, patch.points());
            let jac = b.combine(&b.du, patch.points()).cross(&b.combine(&b.dv, patch.points())).norm();
            let fy = b.combine_flat(&b.n, f);
            v += stokeslet(&(x - y), eta)? * fy * (w * jac);
        }
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stokeslet_examples() {
        let eta = 1.0 / (8.0 * PI);
        let s = stokeslet(&Vec3::new(1.0, 0.0, 0.0), eta).unwrap();
        assert!((s - Matrix3::from_diagonal(&Vec3::new(2.0, 1.0, 1.0))).norm() < 1e-15);
        let s = stokeslet(&Vec3::new(1.0, 1.0, 0.0), eta).unwrap();
        assert!((s[(0, 1)] - 1.0 / (2.0 * 2f64.sqrt())).abs() < 1e-15);
        assert!(stokeslet(&Vec3::zeros(), 1.0).is_err());
    }

    #[test]
    fn stresslet_examples() {
        let t = stresslet(&Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((t[0][0][0] + 3.0 / (4.0 * PI)).abs() < 1e-15);
        let others: f64 = (0..27)
            .filter(|&k| k != 0)
            .map(|k| t[k / 9][(k / 3) % 3][k % 3].abs())
            .sum();
        assert_eq!(others, 0.0);
        assert!(stresslet(&Vec3::zeros()).is_err());
    }

    #[test]
    fn default_quadrature_settings() {
        let c = QuadConfig::default();
        assert_eq!((c.regular_order, c.singular_order, c.near_order), (4, 12, 6));
        assert!(c.validate().is_ok());
        let bad = QuadConfig {
            singular_order: 0,
            ..c
        };
        assert!(bad.validate().is_err());
    }
}
