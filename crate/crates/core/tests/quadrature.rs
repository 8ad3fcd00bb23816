use bemshell::quadrature::{cell_rule, gauss_legendre, near_singular_rule, singular_rule, Cell};
use proptest::prelude::*;

/// Integral of `1/r` over `[0, a] x [0, b]`, singularity at the origin.
fn corner(a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        return 0.0;
    }
    let d = a.hypot(b);
    a * ((b + d) / a).ln() + b * ((a + d) / b).ln()
}

/// Integral of `1/|s - s0|` over an axis-aligned cell by splitting it at
/// `s0` (inside) or by inclusion-exclusion of corner rectangles (outside,
/// in the positive quadrant of `s0`).
fn inverse_r(c: &Cell, s0: [f64; 2]) -> f64 {
    let (x1, x2) = (c.u0 - s0[0], c.u1 - s0[0]);
    let (y1, y2) = (c.v0 - s0[1], c.v1 - s0[1]);
    if x1 <= 0.0 && y1 <= 0.0 {
        corner(x2, y2) + corner(-x1, y2) + corner(x2, -y1) + corner(-x1, -y1)
    } else {
        assert!(x1 >= 0.0 && y1 >= 0.0);
        corner(x2, y2) - corner(x1, y2) - corner(x2, y1) + corner(x1, y1)
    }
}

fn cell_strategy() -> impl Strategy<Value = Cell> {
    (-1.0f64..1.0, -1.0f64..1.0, 0.05f64..2.0, 0.05f64..2.0).prop_map(|(u, v, w, h)| Cell::new(u, u + w, v, v + h))
}

proptest! {
    #[test]
    fn gauss_weights_are_positive_and_sum_to_one(order in 1usize..=64) {
        let g = gauss_legendre(order).unwrap();
        prop_assert!(g.weights.iter().all(|&w| w > 0.0));
        prop_assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-13);
        prop_assert!(g.points.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn singular_rule_measures_the_cell(c in cell_strategy(), a in 0.0f64..=1.0, b in 0.0f64..=1.0, order in 1usize..16) {
        let s0 = c.map([a, b]);
        let r = singular_rule(&c, s0, order).unwrap();
        prop_assert!(r.weights().iter().all(|&w| w >= 0.0));
        prop_assert!((r.total_weight() - c.area()).abs() < 1e-12 * c.area().max(1.0));
        prop_assert!(r.points().iter().all(|&p| c.contains(p, 1e-12)));
    }

    #[test]
    fn singular_rule_integrates_inverse_distance(c in cell_strategy(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let s0 = c.map([a, b]);
        let r = singular_rule(&c, s0, 16).unwrap();
        let approx = r.integrate(|p| 1.0 / (p[0] - s0[0]).hypot(p[1] - s0[1]));
        let exact = inverse_r(&c, s0);
        prop_assert!((approx - exact).abs() < 1e-9 * exact, "{approx} vs {exact}");
    }

    #[test]
    fn near_rule_integrates_inverse_distance(c in cell_strategy(), gap_u in 1e-4f64..0.5, gap_v in 0.0f64..0.5) {
        let s0 = [c.u0 - gap_u, c.v0 - gap_v];
        let r = near_singular_rule(&c, s0, 8).unwrap();
        prop_assert!(r.weights().iter().all(|&w| w > 0.0));
        prop_assert!((r.total_weight() - c.area()).abs() < 1e-12 * c.area().max(1.0));
        let approx = r.integrate(|p| 1.0 / (p[0] - s0[0]).hypot(p[1] - s0[1]));
        let exact = inverse_r(&c, s0);
        prop_assert!((approx - exact).abs() < 1e-7 * exact, "{approx} vs {exact}");
    }
}

#[test]
fn tensor_rule_is_exact_for_polynomials() {
    let c = Cell::new(-0.3, 0.9, 0.2, 0.7);
    let r = cell_rule(3, 4).unwrap().mapped(&c);
    // x^5 y^7 needs 3 points in x and 4 in y.
    let exact = (c.u1.powi(6) - c.u0.powi(6)) / 6.0 * (c.v1.powi(8) - c.v0.powi(8)) / 8.0;
    assert!((r.integrate(|p| p[0].powi(5) * p[1].powi(7)) - exact).abs() < 1e-15);
}
