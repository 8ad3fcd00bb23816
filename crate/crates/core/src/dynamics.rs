//! Generalized-alpha time integration of the coupled shell/fluid system
//!
//! `M a + C(u) v + P(u) - F = 0`
//!
//! where `C` is the boundary-element damping operator (see [`crate::stokes`];
//! `C v` is the force on the fluid, so the fluid force on the shell is
//! `-C v`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseLu;
use crate::shell::ShellSystem;
use crate::stokes::{BemAssembler, BemSystem};

/// Generalized-alpha parameters for one time step size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenAlphaParams {
    pub rho_inf: f64,
    pub alpha_m: f64,
    pub alpha_f: f64,
    pub beta: f64,
    pub gamma: f64,
    pub dt: f64,
}

impl GenAlphaParams {
    pub fn new(rho_inf: f64, dt: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho_inf) {
            return Err(Error::Config(format!("rho_inf {rho_inf} outside [0, 1]")));
        }
        if !(dt > 0.0) {
            return Err(Error::Config(format!("time step {dt} must be positive")));
        }
        let alpha_m = (2.0 - rho_inf) / (1.0 + rho_inf);
        let alpha_f = 1.0 / (1.0 + rho_inf);
        let beta = (1.0 - alpha_f + alpha_m).powi(2) / 4.0;
        let gamma = 0.5 - alpha_f + alpha_m;
        Ok(Self {
            rho_inf,
            alpha_m,
            alpha_f,
            beta,
            gamma,
            dt,
        })
    }
}

/// Newmark velocity and acceleration at step `k` from the displacement
/// `u_k` and the previous state.
pub fn newmark_update(p: &GenAlphaParams, prev: &SimState, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (b, g, dt) = (p.beta, p.gamma, p.dt);
    let mut v = Vec::with_capacity(u.len());
    let mut a = Vec::with_capacity(u.len());
    for i in 0..u.len() {
        let du = u[i] - prev.u[i];
        v.push(g / (b * dt) * du + (1.0 - g / b) * prev.v[i] + (1.0 - g / (2.0 * b)) * dt * prev.a[i]);
        a.push(du / (b * dt * dt) - prev.v[i] / (b * dt) - (1.0 / (2.0 * b) - 1.0) * prev.a[i]);
    }
    (v, a)
}

/// `(u_{k-1+af}, v_{k-1+af}, a_{k-1+am})`.
pub fn alpha_interpolate(
    p: &GenAlphaParams,
    prev: &SimState,
    u: &[f64],
    v: &[f64],
    a: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mix = |x0: &[f64], x1: &[f64], w: f64| -> Vec<f64> {
        x0.iter().zip(x1).map(|(a, b)| (1.0 - w) * a + w * b).collect()
    };
    (
        mix(&prev.u, u, p.alpha_f),
        mix(&prev.v, v, p.alpha_f),
        mix(&prev.a, a, p.alpha_m),
    )
}

/// How the fluid operator enters each time step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    /// `C` reassembled on the alpha-interpolated geometry at every Newton iterate.
    FullyImplicit,
    /// `C(u_{k-1})` frozen over the step, applied to the current velocity.
    SemiImplicit,
    /// `C(u_{k-1}) v_{k-1}` applied as an explicit external force.
    Segregated,
    /// No fluid.
    Dry,
}

impl std::str::FromStr for CouplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "fully_implicit" | "fully" => Ok(Self::FullyImplicit),
            "semi_implicit" | "semi" => Ok(Self::SemiImplicit),
            "segregated" => Ok(Self::Segregated),
            "dry" => Ok(Self::Dry),
            other => Err(Error::Config(format!("unknown coupling mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonConfig {
    /// Absolute residual tolerance (N).
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iters: usize,
    /// Also stop once a correction is this small relative to `max(|u|, L)`,
    /// `L` the patch diameter; the residual of very stiff membranes has a
    /// round-off floor above `abs_tol`.
    pub step_tol: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-9,
            rel_tol: 1e-6,
            max_iters: 30,
            step_tol: 1e-10,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.abs_tol > 0.0 && self.rel_tol > 0.0 && self.step_tol >= 0.0 && self.max_iters >= 1 {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Newton settings {self:?}")))
        }
    }
}

/// Displacement, velocity and acceleration coefficients at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    pub step: usize,
    pub time: f64,
    /// Alpha-level displacement of the step that produced this state
    /// (equal to `u` for an initial state).
    pub u_alpha: Vec<f64>,
}

impl SimState {
    pub fn at_rest(ndofs: usize) -> Self {
        Self {
            u_alpha: vec![0.0; ndofs],
            u: vec![0.0; ndofs],
            v: vec![0.0; ndofs],
            a: vec![0.0; ndofs],
            step: 0,
            time: 0.0,
        }
    }
}

/// Per-step diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepInfo {
    pub newton_iters: usize,
    pub residual: f64,
    /// Reciprocal condition estimate of the last single-layer system
    /// assembled during the step (NaN when none was).
    pub bem_rcond: f64,
}

/// Fluid part of the model: a quadrature plan and the viscosity.
#[derive(Clone, Debug)]
pub struct Fluid {
    pub assembler: BemAssembler,
    pub eta: f64,
}

impl Fluid {
    pub fn assemble(&self, shell: &ShellSystem, u: &[f64]) -> Result<BemSystem> {
        self.assembler.assemble(&shell.patch.displaced(u)?, self.eta)
    }

    /// Dense `C(u)` and the condition estimate of its single-layer system.
    pub fn damping_matrix(&self, shell: &ShellSystem, u: &[f64]) -> Result<(DMatrix<f64>, f64)> {
        let sys = self.assemble(shell, u)?;
        Ok((sys.damping().matrix(), sys.rcond))
    }
}

/// Load vector as a function of time.
pub trait LoadHistory: Sync {
    fn load(&self, t: f64) -> Vec<f64>;
}

/// Time-independent load.
pub struct ConstantLoad(pub Vec<f64>);

impl LoadHistory for ConstantLoad {
    fn load(&self, _t: f64) -> Vec<f64> {
        self.0.clone()
    }
}

impl<F: Fn(f64) -> Vec<f64> + Sync> LoadHistory for F {
    fn load(&self, t: f64) -> Vec<f64> {
        self(t)
    }
}

/// Coupled shell/fluid integrator.
pub struct Integrator<'a> {
    pub shell: &'a ShellSystem,
    pub fluid: Option<&'a Fluid>,
    pub mode: CouplingMode,
    pub params: GenAlphaParams,
    pub newton: NewtonConfig,
    pub loads: &'a dyn LoadHistory,
    mass: DMatrix<f64>,
}

struct Trial {
    u: Vec<f64>,
    v: Vec<f64>,
    a: Vec<f64>,
    u_af: Vec<f64>,
    rr: Vec<f64>,
    rn: f64,
    damping: Option<DMatrix<f64>>,
    rcond: f64,
}

fn mat_vec(m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; m.nrows()];
    for (j, &xj) in x.iter().enumerate() {
        if xj != 0.0 {
            for (yi, mij) in y.iter_mut().zip(m.column(j).iter()) {
                *yi += mij * xj;
            }
        }
    }
    y
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl<'a> Integrator<'a> {
    pub fn new(
        shell: &'a ShellSystem,
        fluid: Option<&'a Fluid>,
        mode: CouplingMode,
        params: GenAlphaParams,
        newton: NewtonConfig,
        loads: &'a dyn LoadHistory,
    ) -> Result<Self> {
        newton.validate()?;
        if mode != CouplingMode::Dry && fluid.is_none() {
            return Err(Error::Config(format!("{mode:?} coupling needs a fluid")));
        }
        Ok(Self {
            shell,
            fluid,
            mode,
            params,
            newton,
            loads,
            mass: shell.mass_matrix(),
        })
    }

    fn fluid(&self) -> &Fluid {
        self.fluid.expect("checked in Integrator::new")
    }

    /// State at `t = 0` with the acceleration solved from the equation of
    /// motion: `M a0 = -C(u0) v0 - P(u0) + F(0)`.
    pub fn initial_state(&self, u0: Vec<f64>, v0: Vec<f64>) -> Result<SimState> {
        let dofs = &self.shell.dofs;
        let mut u0 = u0;
        let mut v0 = v0;
        dofs.mask(&mut u0);
        dofs.mask(&mut v0);
        let mut rhs = self.loads.load(0.0);
        let p = self.shell.internal_forces(&u0)?;
        for (r, pi) in rhs.iter_mut().zip(&p) {
            *r -= pi;
        }
        if self.mode != CouplingMode::Dry && v0.iter().any(|&x| x != 0.0) {
            let sys = self.fluid().assemble(self.shell, &u0)?;
            let cv = sys.damping().action(&v0);
            for (r, c) in rhs.iter_mut().zip(&cv) {
                *r -= c;
            }
        }
        let m = dofs.reduce_mat(&self.mass);
        let a = DenseLu::factor(&m)?.solve(&dofs.reduce_vec(&rhs));
        Ok(SimState {
            u_alpha: u0.clone(),
            u: u0,
            v: v0,
            a: dofs.expand(&a),
            step: 0,
            time: 0.0,
        })
    }

    /// Advance one step.
    pub fn step(&self, prev: &SimState) -> Result<(SimState, StepInfo)> {
        let p = &self.params;
        let dofs = &self.shell.dofs;
        let t_alpha = prev.time + p.alpha_f * p.dt;
        let f = self.loads.load(t_alpha);
        let c_m = p.alpha_m / (p.beta * p.dt * p.dt);
        let c_c = p.alpha_f * p.gamma / (p.beta * p.dt);
        let mut info = StepInfo {
            bem_rcond: f64::NAN,
            ..Default::default()
        };

        // Operator frozen over the step for the explicit-geometry modes.
        let frozen = match self.mode {
            CouplingMode::SemiImplicit | CouplingMode::Segregated => {
                let (c, rcond) = self.fluid().damping_matrix(self.shell, &prev.u)?;
                info.bem_rcond = rcond;
                Some(c)
            }
            _ => None,
        };
        let explicit_force = match (self.mode, &frozen) {
            (CouplingMode::Segregated, Some(c)) => Some(mat_vec(c, &prev.v)),
            _ => None,
        };

        let eval = |u: &[f64]| -> Result<Trial> {
            let (v, a) = newmark_update(p, prev, u);
            let (u_af, v_af, a_am) = alpha_interpolate(p, prev, u, &v, &a);
            let mut rcond = f64::NAN;
            let damping = match self.mode {
                CouplingMode::FullyImplicit => {
                    let (c, rc) = self.fluid().damping_matrix(self.shell, &u_af)?;
                    rcond = rc;
                    Some(c)
                }
                CouplingMode::SemiImplicit => frozen.clone(),
                _ => None,
            };
            let pint = self.shell.internal_forces(&u_af)?;
            let mut res = mat_vec(&self.mass, &a_am);
            for i in 0..res.len() {
                res[i] += pint[i] - f[i];
            }
            if let Some(c) = &damping {
                for (ri, ci) in res.iter_mut().zip(mat_vec(c, &v_af)) {
                    *ri += ci;
                }
            }
            if let Some(fx) = &explicit_force {
                for (ri, ci) in res.iter_mut().zip(fx) {
                    *ri += ci;
                }
            }
            let rr = dofs.reduce_vec(&res);
            let rn = norm(&rr);
            Ok(Trial {
                u: u.to_vec(),
                v,
                a,
                u_af,
                rr,
                rn,
                damping,
                rcond,
            })
        };

        // Start from the previous alpha-level configuration, which is in
        // balance, rather than from u_{k-1}: the extrapolation to the step end
        // carries membrane strain that is not there at the alpha level.
        let start: Vec<f64> = (0..prev.u.len())
            .map(|i| prev.u[i] + (prev.u_alpha[i] - prev.u[i]) / p.alpha_f)
            .collect();
        let mut cur = eval(&start)?;
        let mut converged = false;
        let r_ref = cur.rn;
        loop {
            info.residual = cur.rn;
            if self.mode == CouplingMode::FullyImplicit {
                info.bem_rcond = cur.rcond;
            }
            if !cur.rn.is_finite() {
                return Err(Error::NewtonDivergence {
                    iterations: info.newton_iters,
                    residual: cur.rn,
                });
            }
            if converged || cur.rn <= self.newton.abs_tol.max(self.newton.rel_tol * r_ref) {
                let Trial {
                    u, mut v, mut a, u_af, ..
                } = cur;
                dofs.mask(&mut v);
                dofs.mask(&mut a);
                let state = SimState {
                    u_alpha: u_af,
                    u,
                    v,
                    a,
                    step: prev.step + 1,
                    time: prev.time + p.dt,
                };
                return Ok((state, info));
            }
            if info.newton_iters >= self.newton.max_iters {
                return Err(Error::NewtonDivergence {
                    iterations: info.newton_iters,
                    residual: cur.rn,
                });
            }
            let mut lhs = &self.mass * c_m + self.shell.stiffness(&cur.u_af)? * p.alpha_f;
            if let Some(c) = &cur.damping {
                lhs += c * c_c;
            }
            let lhs = dofs.reduce_mat(&lhs);
            // Without a fluid operator in the matrix it is symmetric and
            // usually positive definite.
            let chol = match cur.damping {
                None => lhs.clone().cholesky(),
                Some(_) => None,
            };
            let du = match chol {
                Some(ch) => ch.solve(&DVector::from_column_slice(&cur.rr)).as_slice().to_vec(),
                None => DenseLu::factor(&lhs)?.solve(&cur.rr),
            };
            info.newton_iters += 1;

            let mut u = cur.u.clone();
            for (&i, d) in dofs.free().iter().zip(&du) {
                u[i] -= d;
            }
            let tiny = norm(&du) <= self.newton.step_tol * norm(&u).max(self.shell.patch.diameter());
            cur = eval(&u)?;
            if tiny {
                converged = true;
            }
        }
    }

    /// Kinetic plus elastic energy minus the potential of the load at `t`.
    /// The elastic part is taken at the alpha-level displacement, the one
    /// that satisfies the balance equations; under large rotations the
    /// end-of-step `u` sits off the arc and carries spurious membrane strain.
    pub fn energy(&self, s: &SimState) -> Result<f64> {
        let mv = mat_vec(&self.mass, &s.v);
        let kinetic = 0.5 * s.v.iter().zip(&mv).map(|(a, b)| a * b).sum::<f64>();
        let f = self.loads.load(s.time);
        let work: f64 = f.iter().zip(&s.u_alpha).map(|(a, b)| a * b).sum();
        Ok(kinetic + self.shell.strain_energy(&s.u_alpha)? - work)
    }
}

/// Static equilibrium `P(u) = F` by Newton iteration with `load_steps`
/// equal load increments.
pub fn static_equilibrium(shell: &ShellSystem, f: &[f64], load_steps: usize, newton: &NewtonConfig) -> Result<Vec<f64>> {
    newton.validate()?;
    let dofs = &shell.dofs;
    let mut u = vec![0.0; shell.ndofs()];
    let steps = load_steps.max(1);
    for k in 1..=steps {
        let lambda = k as f64 / steps as f64;
        let mut r0 = None;
        let mut iters = 0;
        let mut tiny = false;
        loop {
            let (p, kmat) = shell.forces_and_stiffness(&u)?;
            let r: Vec<f64> = p.iter().zip(f).map(|(p, f)| p - lambda * f).collect();
            let rr = dofs.reduce_vec(&r);
            let rn = norm(&rr);
            let r_ref = *r0.get_or_insert(rn.max(norm(&dofs.reduce_vec(f)) / steps as f64));
            if tiny || rn <= newton.abs_tol.max(newton.rel_tol * r_ref) {
                break;
            }
            if iters >= newton.max_iters || !rn.is_finite() {
                return Err(Error::NewtonDivergence {
                    iterations: iters,
                    residual: rn,
                });
            }
            let du = DenseLu::factor(&dofs.reduce_mat(&kmat))?.solve(&rr);
            for (&i, d) in dofs.free().iter().zip(&du) {
                u[i] -= d;
            }
            tiny = norm(&du) <= newton.step_tol * norm(&u).max(shell.patch.diameter());
            iters += 1;
        }
        log::debug!("load step {k}/{steps}: {iters} Newton iterations");
    }
    Ok(u)
}

/// One row of observables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Record {
    pub time: f64,
    pub tip: [f64; 3],
    pub newton_iters: usize,
    pub bem_rcond: f64,
    pub energy: f64,
}

/// Result of a march; `failure` holds the error that stopped it early.
#[derive(Debug)]
pub struct RunOutput {
    pub records: Vec<Record>,
    pub snapshots: Vec<SimState>,
    pub last: SimState,
    pub failure: Option<Error>,
}

/// Observable hooks for [`run`].
pub struct RunOptions<'a> {
    pub steps: usize,
    /// Keep every `cadence`-th state (and the initial one).
    pub snapshot_every: usize,
    /// Tip displacement from a displacement vector.
    pub tip: &'a (dyn Fn(&[f64]) -> [f64; 3] + Sync),
    /// Called after every accepted step.
    pub on_step: Option<&'a mut dyn FnMut(&SimState, &Record)>,
}

/// March `steps` fixed steps from `start`.
pub fn run(integ: &Integrator, start: SimState, mut opts: RunOptions) -> RunOutput {
    let mut out = RunOutput {
        records: Vec::with_capacity(opts.steps + 1),
        snapshots: Vec::new(),
        last: start.clone(),
        failure: None,
    };
    let record = |s: &SimState, info: &StepInfo| -> Result<Record> {
        Ok(Record {
            time: s.time,
            tip: (opts.tip)(&s.u),
            newton_iters: info.newton_iters,
            bem_rcond: info.bem_rcond,
            energy: integ.energy(s)?,
        })
    };
    let first = match record(
        &start,
        &StepInfo {
            bem_rcond: f64::NAN,
            ..Default::default()
        },
    ) {
        Ok(r) => r,
        Err(e) => {
            out.failure = Some(e);
            return out;
        }
    };
    out.records.push(first);
    out.snapshots.push(start.clone());
    let cadence = opts.snapshot_every.max(1);
    let mut state = start;
    for _ in 0..opts.steps {
        let next = integ.step(&state).and_then(|(s, info)| Ok((record(&s, &info)?, s)));
        match next {
            Ok((rec, s)) => {
                log::debug!(
                    "step {} t={:.4} iters={} tip=({:.4e}, {:.4e}, {:.4e})",
                    s.step,
                    s.time,
                    rec.newton_iters,
                    rec.tip[0],
                    rec.tip[1],
                    rec.tip[2]
                );
                if let Some(cb) = opts.on_step.as_mut() {
                    cb(&s, &rec);
                }
                out.records.push(rec);
                if s.step % cadence == 0 {
                    out.snapshots.push(s.clone());
                }
                state = s;
            }
            Err(e) => {
                log::warn!("step {} failed: {e}", state.step + 1);
                out.failure = Some(e);
                break;
            }
        }
    }
    out.last = state;
    out
}

/// Frequency (Hz) from successive same-direction crossings of the signal
/// about its final mean (mean of the last 10% of samples):
/// `7 / (t_c[7] - t_c[0])`. `None` if fewer than 15 crossings exist.
pub fn measure_frequency(times: &[f64], values: &[f64]) -> Option<f64> {
    let n = values.len().min(times.len());
    if n < 2 {
        return None;
    }
    let tail = (n / 10).max(1);
    let mean = values[n - tail..n].iter().sum::<f64>() / tail as f64;
    let mut up = Vec::new();
    let mut down = Vec::new();
    for i in 1..n {
        let (y0, y1) = (values[i - 1] - mean, values[i] - mean);
        if (y0 < 0.0 && y1 >= 0.0) || (y0 > 0.0 && y1 <= 0.0) {
            if y1 == 0.0 && i + 1 < n && (values[i + 1] - mean).signum() == y0.signum() {
                continue;
            }
            let t = times[i - 1] + (times[i] - times[i - 1]) * y0 / (y0 - y1);
            if y0 < 0.0 {
                up.push(t);
            } else {
                down.push(t);
            }
        }
    }
    if up.len() + down.len() < 15 {
        return None;
    }
    let first_up = up.first().copied().unwrap_or(f64::INFINITY);
    let first_down = down.first().copied().unwrap_or(f64::INFINITY);
    let c = if first_up <= first_down { &up } else { &down };
    if c.len() < 8 {
        return None;
    }
    Some(7.0 / (c[7] - c[0]))
}

/// True when some step increment of `series` alternates in sign with the
/// previous two increments and exceeds `factor` times the largest increment
/// of `reference`. Non-finite values also count as spurious oscillation.
pub fn spurious_oscillation(series: &[f64], reference: &[f64], factor: f64) -> bool {
    if series.iter().any(|v| !v.is_finite()) {
        return true;
    }
    let inc = |s: &[f64]| -> Vec<f64> { s.windows(2).map(|w| w[1] - w[0]).collect() };
    let d = inc(series);
    let bound = factor * inc(reference).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    d.windows(3)
        .any(|w| w[0] * w[1] < 0.0 && w[1] * w[2] < 0.0 && w[2].abs() > bound)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn genalpha_parameters() {
        let p = GenAlphaParams::new(0.5, 0.01).unwrap();
        assert_eq!(p.alpha_m, 1.0);
        assert!((p.alpha_f - 2.0 / 3.0).abs() < 1e-16);
        assert!((p.gamma - 5.0 / 6.0).abs() < 1e-15);
        assert!((p.beta - 4.0 / 9.0).abs() < 1e-15);
        let p = GenAlphaParams::new(1.0, 0.1).unwrap();
        assert_eq!((p.alpha_m, p.alpha_f, p.gamma, p.beta), (0.5, 0.5, 0.5, 0.25));
        let p = GenAlphaParams::new(0.0, 0.1).unwrap();
        assert_eq!((p.alpha_m, p.alpha_f, p.gamma, p.beta), (2.0, 1.0, 1.5, 1.0));
        assert!(GenAlphaParams::new(1.5, 0.1).is_err());
        assert!(GenAlphaParams::new(0.5, 0.0).is_err());
    }

    #[test]
    fn coupling_mode_names() {
        assert_eq!("semi".parse::<CouplingMode>().unwrap(), CouplingMode::SemiImplicit);
        assert_eq!("fully-implicit".parse::<CouplingMode>().unwrap(), CouplingMode::FullyImplicit);
        assert!("wet".parse::<CouplingMode>().is_err());
    }
}
