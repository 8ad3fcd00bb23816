//! Patch generators for the built-in scenarios.

use bemshell::nurbs::{KnotVector, NurbsPatch, Vec3};
use bemshell::Result;
use std::f64::consts::SQRT_2;

/// Flat circular disk of radius `r` in the `z = 0` plane, centred at the
/// origin: a single biquadratic rational patch whose four corners sit on the
/// rim (the parameterization degenerates there), refined `levels` times.
pub fn disk(r: f64, levels: usize) -> Result<NurbsPatch> {
    let c = r / SQRT_2;
    let s = SQRT_2 * r;
    let w = SQRT_2 / 2.0;
    let points = vec![
        Vec3::new(-c, -c, 0.0),
        Vec3::new(-s, 0.0, 0.0),
        Vec3::new(-c, c, 0.0),
        Vec3::new(0.0, -s, 0.0),
        Vec3::new(0.0, 0.0, 0.0),
        Vec3::new(0.0, s, 0.0),
        Vec3::new(c, -c, 0.0),
        Vec3::new(s, 0.0, 0.0),
        Vec3::new(c, c, 0.0),
    ];
    let weights = vec![1.0, w, 1.0, w, 1.0, w, 1.0, w, 1.0];
    let kv = KnotVector::open_uniform(2, 1, 0.0, 1.0)?;
    NurbsPatch::new_degenerate(kv.clone(), kv, points, weights)?.refine_uniform(levels)
}

/// Non-rational patch approximating the surface `f` by placing control
/// points at the images of the Greville abscissae.
pub fn greville_fit(
    degrees: (usize, usize),
    elements: (usize, usize),
    f: impl Fn(f64, f64) -> Vec3,
) -> Result<NurbsPatch> {
    let kv_u = KnotVector::open_uniform(degrees.0, elements.0, 0.0, 1.0)?;
    let kv_v = KnotVector::open_uniform(degrees.1, elements.1, 0.0, 1.0)?;
    let gu = kv_u.greville()?;
    let gv = kv_v.greville()?;
    let points: Vec<Vec3> = gu.iter().flat_map(|&u| gv.iter().map(move |&v| (u, v))).map(|(u, v)| f(u, v)).collect();
    let n = points.len();
    NurbsPatch::new(kv_u, kv_v, points, vec![1.0; n])
}

/// Spoon-like curved strip hanging along `+z`: `u` runs from the bowl tip
/// (`u = 0`, bottom) to the handle end (`u = 1`, at `z = length`), `v`
/// across the width. The bowl is wider and cupped towards `+x`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpoonShape {
    pub length: f64,
    /// Handle width.
    pub width: f64,
    /// Bowl width at the tip.
    pub bowl_width: f64,
    /// Cup depth at the bowl centre line.
    pub bowl_depth: f64,
    /// Fraction of the length occupied by the bowl.
    pub bowl_fraction: f64,
}

impl Default for SpoonShape {
    fn default() -> Self {
        Self {
            length: 0.045,
            width: 0.006,
            bowl_width: 0.014,
            bowl_depth: 0.003,
            bowl_fraction: 0.35,
        }
    }
}

impl SpoonShape {
    /// Bowl weight: 1 at the tip, fading smoothly to 0 on the handle.
    fn bowl(&self, u: f64) -> f64 {
        let t = (u / self.bowl_fraction).min(1.0);
        let s = 1.0 - t * t;
        s * s
    }

    pub fn point(&self, u: f64, v: f64) -> Vec3 {
        let b = self.bowl(u);
        let width = self.width + (self.bowl_width - self.width) * b;
        let y = (v - 0.5) * width;
        let across = 2.0 * v - 1.0;
        // Shallow S-bend along the length plus the cupped bowl.
        let x = 0.1 * self.bowl_depth * (std::f64::consts::PI * u).sin()
            + self.bowl_depth * b * (1.0 - across * across);
        Vec3::new(x, y, u * self.length)
    }

    pub fn patch(&self, elements: (usize, usize)) -> Result<NurbsPatch> {
        greville_fit((2, 2), elements, |u, v| self.point(u, v))
    }
}

/// Biquadratic bump over `[-a, a]^2` with apex height `height`, refined to
/// `elements` per direction and tilted by `tilt_deg` about the `x` axis.
pub fn cap(half_width: f64, height: f64, tilt_deg: f64, elements: usize) -> Result<NurbsPatch> {
    let kv = KnotVector::open_uniform(2, 1, 0.0, 1.0)?;
    let mut points = Vec::with_capacity(9);
    for i in 0..3 {
        for j in 0..3 {
            // Corner nets at 0, edge midpoints at h, centre at 2h: apex = h.
            let z = height * ((i == 1) as u8 + (j == 1) as u8) as f64;
            points.push(Vec3::new((i as f64 - 1.0) * half_width, (j as f64 - 1.0) * half_width, z));
        }
    }
    let flat = NurbsPatch::new(kv.clone(), kv, points, vec![1.0; 9])?.refine(elements, elements)?;
    let (s, c) = tilt_deg.to_radians().sin_cos();
    let tilted = flat.points().iter().map(|p| Vec3::new(p.x, c * p.y - s * p.z, s * p.y + c * p.z)).collect();
    flat.with_points(tilted)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_rim_and_centre() {
        let p = disk(0.5, 1).unwrap();
        assert!(p.point([0.5, 0.5]).unwrap().norm() < 1e-14);
        for t in [0.0, 0.2, 0.7, 1.0] {
            assert!((p.point([t, 0.0]).unwrap().norm() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn cap_apex_height() {
        let p = cap(0.05, 0.02, 0.0, 3).unwrap();
        assert!((p.point([0.5, 0.5]).unwrap().z - 0.02).abs() < 1e-14);
        assert!(p.point([0.0, 0.0]).unwrap().z.abs() < 1e-14);
    }
}
