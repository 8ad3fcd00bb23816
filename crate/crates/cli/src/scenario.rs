//! Assembled scenarios, the time march with streamed outputs, and the
//! built-in benchmark presets.

use crate::config::*;
use crate::geometry::SpoonShape;
use crate::output::{sample_probes, write_probe_vtk, write_surface_vtk, CsvSink};
use anyhow::{bail, ensure, Context, Result};
use bemshell::dynamics::{
    run, static_equilibrium, CouplingMode, Fluid, GenAlphaParams, Integrator, NewtonConfig, Record, RunOptions,
    RunOutput, SimState,
};
use bemshell::nurbs::{Edge, NurbsPatch, Vec3};
use bemshell::shell::{BoundarySpec, EdgeCondition, LoadSpec, ShellMaterial, ShellSystem};
use bemshell::stokes::{BemAssembler, QuadConfig};
use std::path::{Path, PathBuf};

/// A validated, assembled scenario ready to march.
pub struct Scenario {
    pub config: ScenarioConfig,
    pub shell: ShellSystem,
    pub fluid: Option<Fluid>,
    /// Scheduled loads with their assembled load vectors.
    loads: Vec<(ScheduledLoad, Vec<f64>)>,
    /// Initial displacement (static equilibrium under the initial loads).
    pub u0: Vec<f64>,
    pub v0: Vec<f64>,
}

impl Scenario {
    pub fn build(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let patch = config.patch.build()?;
        patch.check_regular(4).context("reference patch is not regular")?;
        let tip = config.output.tip;
        let ((u0, u1), (v0, v1)) = (patch.kv_u().domain(), patch.kv_v().domain());
        ensure!(
            (u0..=u1).contains(&tip[0]) && (v0..=v1).contains(&tip[1]),
            "tip parameter {tip:?} outside the patch domain"
        );
        let shell = ShellSystem::new(patch, config.material, &config.boundary)?;
        ensure!(!shell.dofs.free().is_empty(), "boundary conditions fix every degree of freedom");
        if !config.initial.static_loads.is_empty() {
            ensure!(
                !config.boundary.edges.values().all(|c| *c == EdgeCondition::Free),
                "a static pre-solve needs a supported shell"
            );
        }
        let loads = config
            .loads
            .iter()
            .map(|l| Ok((l.clone(), shell.external_load(&l.spec)?)))
            .collect::<Result<Vec<_>>>()?;
        let fluid = match &config.fluid {
            Some(f) if config.time.mode != CouplingMode::Dry || config.rigid_velocity.is_some() => Some(Fluid {
                assembler: BemAssembler::new(&shell.patch, &f.quadrature)?,
                eta: f.eta,
            }),
            _ => None,
        };
        let n = shell.ndofs();
        let u0 = if config.initial.static_loads.is_empty() {
            vec![0.0; n]
        } else {
            let mut f = vec![0.0; n];
            for l in &config.initial.static_loads {
                for (a, b) in f.iter_mut().zip(shell.external_load(l)?) {
                    *a += b;
                }
            }
            static_equilibrium(&shell, &f, config.initial.load_steps, &config.time.newton)
                .context("static pre-solve did not converge")?
        };
        let mut v0 = vec![0.0; n];
        if let Some(w) = config.initial.velocity {
            for c in v0.chunks_exact_mut(3) {
                c.copy_from_slice(&w);
            }
            shell.dofs.mask(&mut v0);
        }
        Ok(Self {
            config,
            shell,
            fluid,
            loads,
            u0,
            v0,
        })
    }

    pub fn load_at(&self, t: f64) -> Vec<f64> {
        let mut f = vec![0.0; self.shell.ndofs()];
        for (s, l) in &self.loads {
            if s.active(t) {
                for (a, b) in f.iter_mut().zip(l) {
                    *a += b;
                }
            }
        }
        f
    }

    /// Displacement at the configured tip parameter.
    pub fn tip(&self, u: &[f64]) -> [f64; 3] {
        let b = self.shell.patch.basis(self.config.output.tip, 0).expect("tip checked at build");
        let d = b.combine_flat(&b.n, u);
        [d.x, d.y, d.z]
    }

    /// March the configured time span, streaming outputs if an output
    /// directory is set. A failed step ends the march early and is reported
    /// in `RunOutput::failure`; I/O problems are returned as errors.
    pub fn run(&self) -> Result<RunOutput> {
        self.run_observed(&mut |_, _| {})
    }

    /// [`run`](Self::run) with a callback after every accepted step.
    pub fn run_observed(&self, observer: &mut dyn FnMut(&SimState, &Record)) -> Result<RunOutput> {
        if self.config.rigid_velocity.is_some() {
            bail!("scenario {} prescribes a rigid velocity; use rigid_solve", self.config.name);
        }
        let t = &self.config.time;
        let params = GenAlphaParams::new(t.rho_inf, t.dt)?;
        let loads = |time: f64| self.load_at(time);
        let integ = Integrator::new(&self.shell, self.fluid.as_ref(), t.mode, params, t.newton, &loads)?;
        let start = integ.initial_state(self.u0.clone(), self.v0.clone())?;
        let steps = t.steps();
        let mut writer = match &self.config.output.dir {
            Some(dir) => Some(OutputWriter::create(self, dir)?),
            None => None,
        };
        if let Some(w) = writer.as_mut() {
            let first = Record {
                time: start.time,
                tip: self.tip(&start.u),
                newton_iters: 0,
                bem_rcond: f64::NAN,
                energy: integ.energy(&start)?,
            };
            w.observe(self, &start, &first, false)?;
        }
        let mut io_error = None;
        let mut on_step = |s: &SimState, r: &Record| {
            observer(s, r);
            if let (Some(w), None) = (writer.as_mut(), &io_error) {
                if let Err(e) = w.observe(self, s, r, s.step == steps) {
                    io_error = Some(e);
                }
            }
        };
        let tip = |u: &[f64]| self.tip(u);
        let out = run(
            &integ,
            start,
            RunOptions {
                steps,
                snapshot_every: steps.max(1),
                tip: &tip,
                on_step: Some(&mut on_step),
            },
        );
        if let Some(e) = io_error {
            return Err(e);
        }
        if let (Some(w), Some(_)) = (writer.as_mut(), &out.failure) {
            // Leave the last good state on disk.
            w.snapshot(self, &out.last, true)?;
        }
        Ok(out)
    }

    /// Single BEM solve for the prescribed rigid velocity on the reference
    /// patch; writes the surface and probe outputs if configured.
    pub fn rigid_solve(&self) -> Result<RigidSolution> {
        let (Some(w), Some(fluid)) = (self.config.rigid_velocity, &self.fluid) else {
            bail!("scenario {} has no rigid velocity and fluid", self.config.name);
        };
        let n = self.shell.ndofs();
        let v: Vec<f64> = (0..n).map(|i| w[i % 3]).collect();
        let sys = fluid.assemble(&self.shell, &vec![0.0; n])?;
        let tractions = sys.tractions(&v);
        let drag = sys.damping().resultant(&v);
        if let Some(dir) = &self.config.output.dir {
            std::fs::create_dir_all(dir)?;
            let name = &self.config.name;
            let o = &self.config.output;
            write_surface_vtk(
                &dir.join(format!("{name}_surface.vtk")),
                name,
                &self.shell.patch,
                o.vis_per_element,
                &vec![0.0; n],
                &v,
                Some(&tractions),
            )?;
            for g in &o.probes {
                let values = sample_probes(g, &self.shell.patch, &tractions, fluid.eta, &fluid.assembler.config().clone())?;
                write_probe_vtk(&dir.join(format!("{name}_{}.vtk", g.name)), name, g, &values)?;
            }
        }
        Ok(RigidSolution {
            drag,
            tractions,
            rcond: sys.rcond,
        })
    }
}

/// Result of a rigid-velocity solve.
#[derive(Clone, Debug)]
pub struct RigidSolution {
    /// Total force exerted on the fluid.
    pub drag: Vec3,
    pub tractions: Vec<f64>,
    pub rcond: f64,
}

/// File outputs of one run: `<name>.csv`, `<name>_surface_<step>.vtk` and
/// `<name>_<probe>_<step>.vtk` in the output directory.
struct OutputWriter {
    dir: PathBuf,
    csv: CsvSink,
    /// Pending probe times per grid (ascending).
    probe_times: Vec<Vec<f64>>,
}

impl OutputWriter {
    fn create(sc: &Scenario, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let csv = CsvSink::create(&dir.join(format!("{}.csv", sc.config.name)))?;
        let probe_times = sc
            .config
            .output
            .probes
            .iter()
            .map(|g| {
                let mut t = g.times.clone();
                t.sort_by(f64::total_cmp);
                t.reverse();
                t
            })
            .collect();
        Ok(Self {
            dir: dir.to_path_buf(),
            csv,
            probe_times,
        })
    }

    fn observe(&mut self, sc: &Scenario, s: &SimState, r: &Record, last: bool) -> Result<()> {
        let o = &sc.config.output;
        if s.step % o.csv_every == 0 {
            self.csv.push(r)?;
        }
        self.snapshot(sc, s, last)
    }

    /// Surface and probe files due at this state (`force` writes the surface
    /// and the end-of-run probes regardless of cadence).
    fn snapshot(&mut self, sc: &Scenario, s: &SimState, force: bool) -> Result<()> {
        let o = &sc.config.output;
        let name = &sc.config.name;
        let eps = 1e-9 * sc.config.time.dt;
        let surface_due = force || (o.vtk_every > 0 && s.step % o.vtk_every == 0);
        let mut probes_due = Vec::new();
        for (k, g) in o.probes.iter().enumerate() {
            let pending = &mut self.probe_times[k];
            let mut due = force && g.times.is_empty();
            while pending.last().is_some_and(|&t| s.time + eps >= t) {
                pending.pop();
                due = true;
            }
            if due {
                probes_due.push(k);
            }
        }
        if !surface_due && probes_due.is_empty() {
            return Ok(());
        }
        let bem = match &sc.fluid {
            Some(f) => {
                let sys = f.assemble(&sc.shell, &s.u)?;
                Some((sys.tractions(&s.v), f))
            }
            None => None,
        };
        if surface_due {
            write_surface_vtk(
                &self.dir.join(format!("{name}_surface_{:06}.vtk", s.step)),
                &format!("{name} t={}", s.time),
                &sc.shell.patch,
                o.vis_per_element,
                &s.u,
                &s.v,
                bem.as_ref().map(|(f, _)| f.as_slice()),
            )?;
        }
        if let (Some((f, fluid)), false) = (&bem, probes_due.is_empty()) {
            let current = sc.shell.patch.displaced(&s.u)?;
            for k in probes_due {
                let g = &o.probes[k];
                let values = sample_probes(g, &current, f, fluid.eta, fluid.assembler.config())?;
                write_probe_vtk(
                    &self.dir.join(format!("{name}_{}_{:06}.vtk", g.name, s.step)),
                    &format!("{name} t={}", s.time),
                    g,
                    &values,
                )?;
            }
        }
        Ok(())
    }
}

/// Presets for the built-in benchmarks.
pub mod presets {
    use super::*;

    /// Steel strip `1 m x 0.1 m x 1 mm` clamped at `u = 0`, deflected by a
    /// 225 N/m line load at the free end which is removed at `t = 0`.
    pub fn cantilever(mode: CouplingMode, eta: Option<f64>, dt: f64, t_end: f64) -> ScenarioConfig {
        ScenarioConfig {
            name: "cantilever".into(),
            patch: PatchSource::Rectangle {
                lx: 1.0,
                ly: 0.1,
                degrees: [3, 3],
                elements: [16, 2],
            },
            material: ShellMaterial {
                e: 210.1e10,
                nu: 0.3,
                rho: 7850.0,
                h: 1e-3,
            },
            boundary: BoundarySpec::free().with(Edge::U0, EdgeCondition::Clamped),
            loads: Vec::new(),
            fluid: eta.map(|eta| FluidConfig {
                eta,
                quadrature: QuadConfig::default(),
            }),
            time: TimeConfig {
                dt,
                t_end,
                rho_inf: 0.5,
                mode,
                newton: NewtonConfig::default(),
            },
            initial: InitialConfig {
                static_loads: vec![LoadSpec::Edge {
                    edge: Edge::U1,
                    load: [0.0, 0.0, 225.0],
                }],
                load_steps: 10,
                velocity: None,
            },
            rigid_velocity: None,
            output: OutputConfig::default(),
        }
    }

    /// Cantilever frequency of the Euler-Bernoulli beam with the same data
    /// (first bending mode).
    pub fn beam_frequency(mat: &ShellMaterial, length: f64) -> f64 {
        let beta = 1.875_104_068_711_961_f64;
        beta * beta / (2.0 * std::f64::consts::PI * length * length) * (mat.e * mat.h * mat.h / (12.0 * mat.rho)).sqrt()
    }

    /// Disk of radius `radius` translating broadside with unit speed along
    /// `z` through a fluid of viscosity `eta`.
    pub fn disk(radius: f64, refine: usize, eta: f64) -> ScenarioConfig {
        ScenarioConfig {
            name: "disk".into(),
            patch: PatchSource::Disk { radius, refine },
            material: ShellMaterial {
                e: 1.0e9,
                nu: 0.3,
                rho: 1000.0,
                h: 1e-3,
            },
            boundary: BoundarySpec::free(),
            loads: Vec::new(),
            fluid: Some(FluidConfig {
                eta,
                quadrature: QuadConfig::default(),
            }),
            time: TimeConfig {
                dt: 1.0,
                t_end: 0.0,
                rho_inf: 0.5,
                mode: CouplingMode::SemiImplicit,
                newton: NewtonConfig::default(),
            },
            initial: InitialConfig::default(),
            rigid_velocity: Some([0.0, 0.0, 1.0]),
            output: OutputConfig {
                tip: [0.5, 0.5],
                ..OutputConfig::default()
            },
        }
    }

    /// Broadside drag of a disk moving with speed `u`: `16 eta R U`.
    pub fn disk_drag_reference(eta: f64, radius: f64, u: f64) -> f64 {
        16.0 * eta * radius * u
    }

    /// Total dead load on the spoon bowl (N).
    pub const SPOON_LOAD: f64 = 0.177;
    /// Dead surface load on the spoon bowl (N/m^2).
    pub const SPOON_PRESSURE: f64 = 7000.0;

    /// Spoon hanging in honey, clamped at the handle end, pushed sideways by
    /// a dead load on the bowl tip. The loaded window `u < u_w` is sized so
    /// the total load is [`SPOON_LOAD`]. Demo geometry, not a regression case.
    pub fn spoon() -> Result<ScenarioConfig> {
        let shape = SpoonShape::default();
        let elements = [8, 2];
        let material = ShellMaterial {
            e: 2.8e15,
            nu: 0.39,
            rho: 1.13,
            h: 2e-4,
        };
        let boundary = BoundarySpec::free().with(Edge::U1, EdgeCondition::Clamped);
        let patch = shape.patch((elements[0], elements[1]))?;
        let shell = ShellSystem::new(patch, material, &boundary)?;
        let area = |uw: f64| -> Result<f64> {
            let f = shell.external_load(&LoadSpec::Surface {
                traction: [1.0, 0.0, 0.0],
                window: Some([0.0, uw, 0.0, 1.0]),
            })?;
            Ok(f.iter().step_by(3).sum())
        };
        let target = SPOON_LOAD / SPOON_PRESSURE;
        ensure!(area(1.0)? > target, "spoon surface smaller than the loaded area");
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if area(mid)? < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(ScenarioConfig {
            name: "spoon".into(),
            patch: PatchSource::Spoon { shape, elements },
            material,
            boundary,
            loads: vec![ScheduledLoad {
                spec: LoadSpec::Surface {
                    traction: [SPOON_PRESSURE, 0.0, 0.0],
                    window: Some([0.0, 0.5 * (lo + hi), 0.0, 1.0]),
                },
                on: 0.0,
                off: None,
            }],
            fluid: Some(FluidConfig {
                eta: 5.0,
                quadrature: QuadConfig::default(),
            }),
            time: TimeConfig {
                dt: 0.1,
                t_end: 1.1,
                rho_inf: 0.5,
                mode: CouplingMode::SemiImplicit,
                newton: NewtonConfig::default(),
            },
            initial: InitialConfig::default(),
            rigid_velocity: None,
            output: OutputConfig {
                tip: [0.0, 0.5],
                ..OutputConfig::default()
            },
        })
    }

    /// Free cap sinking under gravity in water from a tilted start. Demo
    /// geometry, not a regression case.
    pub fn falling_cap() -> ScenarioConfig {
        ScenarioConfig {
            name: "cap".into(),
            patch: PatchSource::Cap {
                half_width: 0.05,
                height: 0.02,
                tilt_deg: 30.0,
                elements: 4,
            },
            material: ShellMaterial {
                e: 2.8e11,
                nu: 0.39,
                rho: 1.13,
                h: 1e-3,
            },
            boundary: BoundarySpec::free(),
            loads: vec![ScheduledLoad {
                spec: LoadSpec::Gravity { g: [0.0, 0.0, -9.81] },
                on: 0.0,
                off: None,
            }],
            fluid: Some(FluidConfig {
                eta: 9.0e-3,
                quadrature: QuadConfig::default(),
            }),
            time: TimeConfig {
                dt: 1.0,
                t_end: 551.0,
                rho_inf: 0.5,
                mode: CouplingMode::SemiImplicit,
                newton: NewtonConfig::default(),
            },
            initial: InitialConfig::default(),
            rigid_velocity: None,
            output: OutputConfig {
                tip: [0.5, 0.5],
                ..OutputConfig::default()
            },
        }
    }

    /// `|n . e_z|` at the centre of the deformed patch.
    pub fn alignment(patch: &NurbsPatch, u: &[f64]) -> Result<f64> {
        let f = patch.displaced(u)?.frame([0.5, 0.5])?;
        Ok(f.g3.z.abs())
    }
}
