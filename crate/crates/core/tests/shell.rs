use bemshell::nurbs::{flat_rectangle, Edge, KnotVector, NurbsPatch, Vec3};
use bemshell::shell::{
    second_variation, strain_variations, BoundarySpec, EdgeCondition, LoadSpec, ShellMaterial, ShellSystem,
};
use nalgebra::{DMatrix, Rotation3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn material() -> ShellMaterial {
    ShellMaterial {
        e: 1.0e3,
        nu: 0.3,
        rho: 2.0,
        h: 0.05,
    }
}

/// Doubly curved rational patch with nonuniform knots.
fn curved_patch() -> NurbsPatch {
    let ku = KnotVector::new(vec![0.0, 0.0, 0.0, 0.4, 1.0, 1.0, 1.0], 2).unwrap();
    let kv = KnotVector::new(vec![0.0, 0.0, 0.0, 0.0, 0.5, 1.0, 1.0, 1.0, 1.0], 3).unwrap();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let gu = ku.greville().unwrap();
    let gv = kv.greville().unwrap();
    for (i, &u) in gu.iter().enumerate() {
        for (j, &v) in gv.iter().enumerate() {
            let z = 0.3 * (u - 0.5).powi(2) - 0.2 * (v - 0.3).powi(2) + 0.05 * u * v;
            points.push(Vec3::new(1.2 * u + 0.1 * v, 0.8 * v, z));
            weights.push(1.0 + 0.2 * ((i + 2 * j) % 3) as f64);
        }
    }
    NurbsPatch::new(ku, kv, points, weights).unwrap()
}

fn random_u(n: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n
}

#[test]
fn internal_force_is_energy_gradient() {
    let sys = ShellSystem::new(curved_patch(), material(), &BoundarySpec::free()).unwrap();
    for seed in 0..5 {
        let u = random_u(sys.ndofs(), 0.05, seed);
        let p = sys.internal_forces(&u).unwrap();
        let h = 1e-6;
        let fd: Vec<f64> = (0..u.len())
            .map(|i| {
                let mut up = u.clone();
                let mut um = u.clone();
                up[i] += h;
                um[i] -= h;
                (sys.strain_energy(&up).unwrap() - sys.strain_energy(&um).unwrap()) / (2.0 * h)
            })
            .collect();
        assert!(rel_err(&fd, &p) < 1e-6, "seed {seed}: {}", rel_err(&fd, &p));
    }
}

#[test]
fn stiffness_is_force_jacobian_and_symmetric() {
    let sys = ShellSystem::new(curved_patch(), material(), &BoundarySpec::free()).unwrap();
    for seed in 10..15 {
        let u = random_u(sys.ndofs(), 0.05, seed);
        let k = sys.stiffness(&u).unwrap();
        let asym = (&k - k.transpose()).norm() / k.norm();
        assert!(asym < 1e-10, "asymmetry {asym}");
        let h = 1e-6;
        let mut fd = DMatrix::zeros(u.len(), u.len());
        for j in 0..u.len() {
            let mut up = u.clone();
            let mut um = u.clone();
            up[j] += h;
            um[j] -= h;
            let pp = sys.internal_forces(&up).unwrap();
            let pm = sys.internal_forces(&um).unwrap();
            for i in 0..u.len() {
                fd[(i, j)] = (pp[i] - pm[i]) / (2.0 * h);
            }
        }
        let err = (&fd - &k).norm() / k.norm();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

/// Voigt strains at a parameter on a displaced patch, from the frames.
fn voigt_strains(patch: &NurbsPatch, u: &[f64], s: [f64; 2]) -> [f64; 6] {
    let f0 = patch.frame(s).unwrap();
    let f = patch.displaced(u).unwrap().frame(s).unwrap();
    let (e, k) = bemshell::shell::strains(&f0, &f);
    [e[(0, 0)], e[(1, 1)], 2.0 * e[(0, 1)], k[(0, 0)], k[(1, 1)], 2.0 * k[(0, 1)]]
}

#[test]
fn strain_first_variations_match_finite_differences() {
    let patch = curved_patch();
    let u = random_u(3 * patch.len(), 0.05, 3);
    let step = 1e-7 * patch.diameter();
    for s in [[0.2, 0.7], [0.55, 0.1], [0.9, 0.45]] {
        let b = patch.basis(s, 2).unwrap();
        let frame = patch.displaced(&u).unwrap().frame(s).unwrap();
        let v = strain_variations(&b, &frame);
        let mut analytic = Vec::new();
        let mut fd = Vec::new();
        for (loc, &cp) in b.indices.iter().enumerate() {
            for c in 0..3 {
                let r = 3 * loc + c;
                let mut up = u.clone();
                let mut um = u.clone();
                up[3 * cp + c] += step;
                um[3 * cp + c] -= step;
                let sp = voigt_strains(&patch, &up, s);
                let sm = voigt_strains(&patch, &um, s);
                for q in 0..6 {
                    fd.push((sp[q] - sm[q]) / (2.0 * step));
                }
                analytic.extend(v.eps[r].iter().chain(v.kap[r].iter()).copied());
            }
        }
        assert!(rel_err(&fd, &analytic) < 1e-6, "{s:?}: {}", rel_err(&fd, &analytic));
    }
}

#[test]
fn strain_second_variations_match_finite_differences() {
    let patch = curved_patch();
    let u = random_u(3 * patch.len(), 0.05, 4);
    let step = 1e-6;
    let s = [0.33, 0.61];
    let b = patch.basis(s, 2).unwrap();
    let m = 3 * b.len();
    let frame = patch.displaced(&u).unwrap().frame(s).unwrap();
    let mut analytic = Vec::new();
    let mut fd = Vec::new();
    for sdof in 0..m {
        let cp = b.indices[sdof / 3];
        let mut up = u.clone();
        let mut um = u.clone();
        up[3 * cp + sdof % 3] += step;
        um[3 * cp + sdof % 3] -= step;
        let vp = strain_variations(&b, &patch.displaced(&up).unwrap().frame(s).unwrap());
        let vm = strain_variations(&b, &patch.displaced(&um).unwrap().frame(s).unwrap());
        for r in 0..m {
            let (e, k) = second_variation(&b, &frame, r, sdof);
            let (e2, k2) = second_variation(&b, &frame, sdof, r);
            assert!((e - e2).norm() < 1e-12 && (k - k2).norm() < 1e-12 * (1.0 + k.norm()));
            analytic.extend(e.iter().chain(k.iter()).copied());
            for q in 0..3 {
                fd.push((vp.eps[r][q] - vm.eps[r][q]) / (2.0 * step));
            }
            for q in 0..3 {
                fd.push((vp.kap[r][q] - vm.kap[r][q]) / (2.0 * step));
            }
        }
    }
    assert!(rel_err(&fd, &analytic) < 1e-5, "{}", rel_err(&fd, &analytic));
}

#[test]
fn membrane_second_variation_does_not_depend_on_state() {
    let patch = curved_patch();
    let s = [0.4, 0.4];
    let b = patch.basis(s, 2).unwrap();
    let f1 = patch.displaced(&random_u(3 * patch.len(), 0.05, 1)).unwrap().frame(s).unwrap();
    let f2 = patch.displaced(&random_u(3 * patch.len(), 0.05, 2)).unwrap().frame(s).unwrap();
    for (r, sd) in [(0, 0), (3, 9), (4, 13), (7, 20)] {
        assert_eq!(second_variation(&b, &f1, r, sd).0, second_variation(&b, &f2, r, sd).0);
    }
}

#[test]
fn flat_membrane_variation_reduces_to_basis_derivative() {
    let patch = flat_rectangle(1.0, 1.0, (2, 2), (2, 2)).unwrap();
    let s = [0.3, 0.8];
    let b = patch.basis(s, 2).unwrap();
    let v = strain_variations(&b, &patch.frame(s).unwrap());
    for k in 0..b.len() {
        assert!((v.eps[3 * k][0] - b.du[k]).abs() < 1e-14);
        assert!((v.eps[3 * k + 1][1] - b.dv[k]).abs() < 1e-14);
    }
}

#[test]
fn rigid_motions_are_strain_free() {
    let patch = curved_patch();
    let sys = ShellSystem::new(patch.clone(), material(), &BoundarySpec::free()).unwrap();
    let zero = vec![0.0; sys.ndofs()];
    assert!(sys.internal_forces(&zero).unwrap().iter().all(|&v| v.abs() < 1e-14));
    let t: Vec<f64> = (0..patch.len()).flat_map(|_| [0.3, -1.2, 0.7]).collect();
    let k_scale = sys.stiffness(&zero).unwrap().norm();
    let p = sys.internal_forces(&t).unwrap();
    assert!(p.iter().all(|v| v.abs() < 1e-10 * k_scale));
    for e in 0..sys.geometry.elements.len() {
        let (eps, kap) = sys.strain_state(&t, e, 0).unwrap();
        assert!(eps.norm() < 1e-12 && kap.norm() < 1e-12);
    }
    // Directional derivative along a rigid translation.
    let s = [0.5, 0.5];
    let b = patch.basis(s, 2).unwrap();
    let v = strain_variations(&b, &patch.frame(s).unwrap());
    for dir in 0..3 {
        let (mut de, mut dk) = (nalgebra::Vector3::zeros(), nalgebra::Vector3::zeros());
        for k in 0..b.len() {
            de += v.eps[3 * k + dir];
            dk += v.kap[3 * k + dir];
        }
        assert!(de.norm() < 1e-12 && dk.norm() < 1e-12);
    }
    // Exact small rotation against a bending displacement of equal size.
    let rot = Rotation3::from_axis_angle(&nalgebra::Vector3::y_axis(), 1e-3);
    let centre = Vec3::new(0.6, 0.4, 0.0);
    let ur: Vec<f64> = patch
        .points()
        .iter()
        .flat_map(|p| {
            let d = rot * (p - centre) + centre - p;
            [d[0], d[1], d[2]]
        })
        .collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let ub: Vec<f64> = patch
        .points()
        .iter()
        .flat_map(|p| [0.0, 0.0, (p[0] - centre[0]).powi(2)])
        .collect();
    let scale = norm(&ur) / norm(&ub);
    let ub: Vec<f64> = ub.iter().map(|v| v * scale).collect();
    let pr = norm(&sys.internal_forces(&ur).unwrap());
    let pb = norm(&sys.internal_forces(&ub).unwrap());
    assert!(pr <= 1e-5 * pb, "{pr} vs {pb}");
}

#[test]
fn flat_plate_membrane_and_bending_decouple() {
    let patch = flat_rectangle(1.0, 0.5, (2, 3), (3, 2)).unwrap();
    let sys = ShellSystem::new(patch, material(), &BoundarySpec::free()).unwrap();
    let k = sys.stiffness(&vec![0.0; sys.ndofs()]).unwrap();
    let n = sys.ndofs();
    let mut cross = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            if (i % 3 == 2) != (j % 3 == 2) {
                cross = cross.max(k[(i, j)].abs());
            }
        }
    }
    assert!(cross < 1e-12 * k.amax(), "{cross}");
}

#[test]
fn bending_to_a_cylinder() {
    let (l, r) = (0.5, 2.0);
    let patch = flat_rectangle(l, 0.05, (3, 3), (16, 1)).unwrap();
    let sys = ShellSystem::new(patch.clone(), material(), &BoundarySpec::free()).unwrap();
    let u: Vec<f64> = patch
        .points()
        .iter()
        .flat_map(|p| {
            let t = p[0] / r;
            [r * t.sin() - p[0], 0.0, r * (1.0 - t.cos())]
        })
        .collect();
    for e in [3, 8, 12] {
        let (_, kap) = sys.strain_state(&u, e, 2).unwrap();
        let g11 = l * l;
        let k = kap[(0, 0)] / g11;
        assert!((k + 1.0 / r).abs() < 0.02 / r, "{k}");
    }
}

#[test]
fn mass_and_loads() {
    let patch = curved_patch();
    let mat = material();
    let sys = ShellSystem::new(patch, mat, &BoundarySpec::free()).unwrap();
    let m = sys.mass_matrix();
    let ones: Vec<f64> = (0..sys.patch.len()).flat_map(|_| [1.0, 0.0, 0.0]).collect();
    let x = DMatrix::from_column_slice(ones.len(), 1, &ones);
    let total = (x.transpose() * &m * &x)[(0, 0)];
    let area = sys.geometry.total_area();
    assert!((total - mat.rho * mat.h * area).abs() < 1e-10 * total);
    let lu = bemshell::linalg::DenseLu::factor(&m).unwrap();
    assert!(lu.rcond() > 0.0);

    let flat = flat_rectangle(1.0, 1.0, (2, 2), (2, 3)).unwrap();
    let unit = ShellMaterial { rho: 1.0, h: 1.0, ..mat };
    let sys = ShellSystem::new(flat.clone(), unit, &BoundarySpec::free()).unwrap();
    let f = sys.external_load(&LoadSpec::Gravity { g: [0.0, 0.0, -9.81] }).unwrap();
    let sum: f64 = f.iter().skip(2).step_by(3).sum();
    assert!((sum + 9.81).abs() < 1e-12);
    let mass_sum: f64 = sys.mass_matrix().iter().sum::<f64>() / 3.0;
    assert!((mass_sum - 1.0).abs() < 1e-12);

    let plate = flat_rectangle(1.0, 0.1, (3, 3), (16, 2)).unwrap();
    let sys = ShellSystem::new(plate, mat, &BoundarySpec::free()).unwrap();
    let f = sys
        .external_load(&LoadSpec::Edge {
            edge: Edge::U1,
            load: [0.0, 0.0, 225.0],
        })
        .unwrap();
    let sum: f64 = f.iter().skip(2).step_by(3).sum();
    assert!((sum - 22.5).abs() < 1e-12, "{sum}");
    let f = sys
        .external_load(&LoadSpec::Surface {
            traction: [0.0, 0.0, 0.0],
            window: None,
        })
        .unwrap();
    assert!(f.iter().all(|&v| v == 0.0));
    let f = sys
        .external_load(&LoadSpec::Surface {
            traction: [0.0, 2.0, 0.0],
            window: Some([0.1, 0.35, 0.2, 0.9]),
        })
        .unwrap();
    let sum: f64 = f.iter().skip(1).step_by(3).sum();
    assert!((sum - 2.0 * 0.25 * 0.7 * 0.1).abs() < 1e-12, "{sum}");
}

#[test]
fn clamped_edge_keeps_its_normal() {
    let plate = flat_rectangle(1.0, 0.1, (3, 3), (8, 2)).unwrap();
    let bc = BoundarySpec::free().with(Edge::U0, EdgeCondition::Clamped);
    let sys = ShellSystem::new(plate.clone(), material(), &bc).unwrap();
    let f = sys
        .external_load(&LoadSpec::Edge {
            edge: Edge::U1,
            load: [0.0, 0.0, 1e-6],
        })
        .unwrap();
    let k = sys.dofs.reduce_mat(&sys.stiffness(&vec![0.0; sys.ndofs()]).unwrap());
    let lu = bemshell::linalg::DenseLu::factor(&k).unwrap();
    let u = sys.dofs.expand(&lu.solve(&sys.dofs.reduce_vec(&f)));
    let tip = u.iter().skip(2).step_by(3).fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(tip > 0.0);
    let deformed = plate.displaced(&u).unwrap();
    for v in [0.0, 0.3, 0.5, 1.0] {
        let n = deformed.frame([0.0, v]).unwrap().g3;
        let angle = n.cross(&Vec3::z()).norm().asin();
        assert!(angle < 1e-8, "{angle}");
    }
}
