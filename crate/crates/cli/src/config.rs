//! Scenario description, read from and written to TOML.

use crate::geometry::{self, SpoonShape};
use anyhow::{bail, ensure, Context, Result};
use bemshell::dynamics::{CouplingMode, NewtonConfig};
use bemshell::nurbs::{flat_rectangle, NurbsPatch};
use bemshell::shell::{BoundarySpec, LoadSpec, ShellMaterial};
use bemshell::stokes::QuadConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub patch: PatchSource,
    pub material: ShellMaterial,
    #[serde(default)]
    pub boundary: BoundarySpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loads: Vec<ScheduledLoad>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fluid: Option<FluidConfig>,
    pub time: TimeConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    /// Prescribed uniform velocity: makes the run a single BEM solve on the
    /// undeformed patch instead of a time march.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rigid_velocity: Option<[f64; 3]>,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Where the reference patch comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PatchSource {
    /// Flat `[0, lx] x [0, ly]` plate in the `z = 0` plane.
    Rectangle {
        lx: f64,
        ly: f64,
        degrees: [usize; 2],
        elements: [usize; 2],
    },
    /// Flat disk centred at the origin, refined `refine` times.
    Disk { radius: f64, refine: usize },
    Spoon {
        #[serde(default)]
        shape: SpoonShape,
        elements: [usize; 2],
    },
    Cap {
        half_width: f64,
        height: f64,
        tilt_deg: f64,
        elements: usize,
    },
    /// Patch text file; [`ScenarioConfig::load`] resolves a relative path
    /// against the config file.
    File { path: PathBuf },
    /// Patch text embedded in the config.
    Inline { text: String },
}

impl PatchSource {
    pub fn build(&self) -> Result<NurbsPatch> {
        let p = match self {
            Self::Rectangle { lx, ly, degrees, elements } => {
                ensure!(*lx > 0.0 && *ly > 0.0, "rectangle sides must be positive");
                flat_rectangle(*lx, *ly, (degrees[0], degrees[1]), (elements[0], elements[1]))?
            }
            Self::Disk { radius, refine } => {
                ensure!(*radius > 0.0, "disk radius must be positive");
                geometry::disk(*radius, *refine)?
            }
            Self::Spoon { shape, elements } => {
                ensure!(shape.length > 0.0 && shape.width > 0.0, "spoon dimensions must be positive");
                shape.patch((elements[0], elements[1]))?
            }
            Self::Cap { half_width, height, tilt_deg, elements } => {
                ensure!(*half_width > 0.0 && *elements > 0, "cap size and elements must be positive");
                geometry::cap(*half_width, *height, *tilt_deg, *elements)?
            }
            Self::File { path } => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading patch {}", path.display()))?;
                NurbsPatch::from_text(&text)?
            }
            Self::Inline { text } => NurbsPatch::from_text(text)?,
        };
        Ok(p)
    }
}

/// A dead load active for `on < t <= off`. A load switched on at the start
/// time does not enter the initial acceleration, so a run starts from rest
/// instead of from the impulsive response to the load jump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledLoad {
    pub spec: LoadSpec,
    #[serde(default)]
    pub on: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub off: Option<f64>,
}

impl ScheduledLoad {
    pub fn active(&self, t: f64) -> bool {
        t > self.on && self.off.map_or(true, |off| t <= off)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidConfig {
    /// Dynamic viscosity (Pa s).
    pub eta: f64,
    #[serde(default)]
    pub quadrature: QuadConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: f64,
    pub t_end: f64,
    #[serde(default = "default_rho_inf")]
    pub rho_inf: f64,
    pub mode: CouplingMode,
    #[serde(default)]
    pub newton: NewtonConfig,
}

fn default_rho_inf() -> f64 {
    0.5
}

impl TimeConfig {
    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

/// Starting state. With `static_loads` the run starts from the static
/// equilibrium under those loads, reached in `load_steps` increments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub static_loads: Vec<LoadSpec>,
    #[serde(default = "default_load_steps")]
    pub load_steps: usize,
    /// Uniform initial velocity of every control point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<[f64; 3]>,
}

fn default_load_steps() -> usize {
    10
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self {
            static_loads: Vec::new(),
            load_steps: default_load_steps(),
            velocity: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Output directory; nothing is written when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// CSV row every `csv_every` steps.
    #[serde(default = "one")]
    pub csv_every: usize,
    /// Surface VTK file every `vtk_every` steps (0: none).
    #[serde(default)]
    pub vtk_every: usize,
    /// Visualization grid cells per element and direction.
    #[serde(default = "default_vis")]
    pub vis_per_element: usize,
    /// Parametric point whose displacement is reported as the tip.
    #[serde(default = "default_tip")]
    pub tip: [f64; 2],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probes: Vec<ProbeGridConfig>,
}

fn one() -> usize {
    1
}

fn default_vis() -> usize {
    4
}

fn default_tip() -> [f64; 2] {
    [1.0, 0.5]
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            csv_every: 1,
            vtk_every: 0,
            vis_per_element: default_vis(),
            tip: default_tip(),
            probes: Vec::new(),
        }
    }
}

/// Axis-aligned lattice of velocity probes. A dimension of 1 gives a plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeGridConfig {
    pub name: String,
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    pub dims: [usize; 3],
    /// Sample at the first step reaching each of these times; empty means
    /// the final state only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub times: Vec<f64>,
    /// Points closer to the surface than this are masked.
    #[serde(default)]
    pub min_distance: f64,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Read a config file, resolving a relative patch path against it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let PatchSource::File { path: p } = &mut cfg.patch {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.material.validate()?;
        let t = &self.time;
        ensure!(t.dt > 0.0 && t.dt.is_finite(), "time step must be positive");
        ensure!(t.t_end >= 0.0 && t.t_end.is_finite(), "t_end must be nonnegative");
        ensure!((0.0..=1.0).contains(&t.rho_inf), "rho_inf must lie in [0, 1]");
        t.newton.validate()?;
        for l in &self.loads {
            ensure!(l.on >= 0.0 && l.on <= t.t_end, "load switch-on time {} outside [0, {}]", l.on, t.t_end);
            if let Some(off) = l.off {
                ensure!(off >= l.on && off <= t.t_end, "load switch-off time {off} outside [{}, {}]", l.on, t.t_end);
            }
        }
        ensure!(self.initial.load_steps >= 1, "load_steps must be at least 1");
        match (&self.fluid, t.mode) {
            (Some(f), _) => {
                ensure!(f.eta > 0.0 && f.eta.is_finite(), "viscosity must be positive");
                f.quadrature.validate()?;
            }
            (None, CouplingMode::Dry) => {}
            (None, mode) => bail!("coupling mode {mode:?} needs a [fluid] section"),
        }
        if self.rigid_velocity.is_some() {
            ensure!(self.fluid.is_some(), "a rigid-velocity run needs a [fluid] section");
        }
        let o = &self.output;
        ensure!(o.csv_every >= 1, "csv_every must be at least 1");
        ensure!(o.vis_per_element >= 1, "vis_per_element must be at least 1");
        for p in &o.probes {
            ensure!(p.dims.iter().all(|&d| d >= 1), "probe grid {} has an empty dimension", p.name);
            ensure!(p.spacing.iter().all(|&s| s > 0.0), "probe grid {} spacing must be positive", p.name);
            ensure!(p.min_distance >= 0.0, "probe grid {} min_distance must be nonnegative", p.name);
        }
        Ok(())
    }
}
