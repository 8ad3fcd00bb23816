//! CSV observables, legacy VTK surfaces and probe grids.

use crate::config::ProbeGridConfig;
use anyhow::{bail, Context, Result};
use bemshell::dynamics::Record;
use bemshell::nurbs::{NurbsPatch, Vec3};
use bemshell::stokes::{offsurface_velocity, QuadConfig};
use bemshell::Error;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const CSV_HEADER: [&str; 7] = [
    "time",
    "tip_disp_x",
    "tip_disp_y",
    "tip_disp_z",
    "newton_iters",
    "bem_rcond",
    "energy",
];

/// Streaming CSV writer; every row is flushed so partial runs leave a
/// readable file.
pub struct CsvSink {
    writer: csv::Writer<File>,
}

impl CsvSink {
    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        writer.write_record(CSV_HEADER)?;
        writer.flush()?;
        Ok(Self { writer })
    }

    pub fn push(&mut self, r: &Record) -> Result<()> {
        let fields = [
            r.time.to_string(),
            r.tip[0].to_string(),
            r.tip[1].to_string(),
            r.tip[2].to_string(),
            r.newton_iters.to_string(),
            r.bem_rcond.to_string(),
            r.energy.to_string(),
        ];
        self.writer.write_record(&fields)?;
        self.writer.flush()?;
        Ok(())
    }
}

/// Read back the numeric rows of a CSV written by [`CsvSink`].
pub fn read_csv(path: &Path) -> Result<Vec<[f64; 7]>> {
    let mut reader = csv::Reader::from_path(path)?;
    if reader.headers()?.iter().ne(CSV_HEADER) {
        bail!("unexpected CSV header in {}", path.display());
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let mut row = [0.0; 7];
        for (x, s) in row.iter_mut().zip(rec.iter()) {
            *x = s.parse()?;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Parameters of a uniform visualization grid, `per_element` cells per
/// knot span and direction.
pub fn vis_params(patch: &NurbsPatch, per_element: usize) -> (Vec<f64>, Vec<f64>) {
    let sample = |bp: Vec<f64>| {
        let mut out = vec![bp[0]];
        for w in bp.windows(2) {
            for k in 1..=per_element {
                out.push(w[0] + (w[1] - w[0]) * k as f64 / per_element as f64);
            }
        }
        out
    };
    (sample(patch.kv_u().breakpoints()), sample(patch.kv_v().breakpoints()))
}

/// Deformed surface as legacy VTK polydata. `u` and `v` are displacement and
/// velocity coefficients on the reference `patch`; `tractions` optional
/// single-layer density coefficients.
pub fn write_surface_vtk(
    path: &Path,
    title: &str,
    patch: &NurbsPatch,
    per_element: usize,
    u: &[f64],
    v: &[f64],
    tractions: Option<&[f64]>,
) -> Result<()> {
    let (us, vs) = vis_params(patch, per_element);
    let (nu, nv) = (us.len(), vs.len());
    let mut pts = Vec::with_capacity(nu * nv);
    let mut disp = Vec::with_capacity(nu * nv);
    let mut vel = Vec::with_capacity(nu * nv);
    let mut trac = Vec::with_capacity(nu * nv);
    for &a in &us {
        for &b in &vs {
            let basis = patch.basis([a, b], 0)?;
            let x = basis.combine(&basis.n, patch.points());
            let d = basis.combine_flat(&basis.n, u);
            pts.push(x + d);
            disp.push(d);
            vel.push(basis.combine_flat(&basis.n, v));
            trac.push(tractions.map_or(0.0, |f| basis.combine_flat(&basis.n, f).norm()));
        }
    }
    let mut s = String::new();
    writeln!(s, "# vtk DataFile Version 3.0\n{}\nASCII\nDATASET POLYDATA", one_line(title))?;
    writeln!(s, "POINTS {} double", pts.len())?;
    for p in &pts {
        push_vec(&mut s, p);
    }
    let cells = (nu - 1) * (nv - 1);
    writeln!(s, "POLYGONS {cells} {}", 5 * cells)?;
    for i in 0..nu - 1 {
        for j in 0..nv - 1 {
            let k = |i: usize, j: usize| i * nv + j;
            writeln!(s, "4 {} {} {} {}", k(i, j), k(i + 1, j), k(i + 1, j + 1), k(i, j + 1))?;
        }
    }
    writeln!(s, "POINT_DATA {}", pts.len())?;
    writeln!(s, "VECTORS displacement double")?;
    disp.iter().for_each(|d| push_vec(&mut s, d));
    writeln!(s, "VECTORS velocity double")?;
    vel.iter().for_each(|d| push_vec(&mut s, d));
    writeln!(s, "SCALARS traction_magnitude double 1\nLOOKUP_TABLE default")?;
    for t in &trac {
        writeln!(s, "{t:e}")?;
    }
    write_file(path, &s)
}

/// Probe lattice points in VTK order (`x` fastest).
pub fn probe_points(grid: &ProbeGridConfig) -> Vec<Vec3> {
    let [nx, ny, nz] = grid.dims;
    let mut out = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                out.push(Vec3::new(
                    grid.origin[0] + i as f64 * grid.spacing[0],
                    grid.origin[1] + j as f64 * grid.spacing[1],
                    grid.origin[2] + k as f64 * grid.spacing[2],
                ));
            }
        }
    }
    out
}

/// Fluid velocity at the probe points for the single-layer density `f` on
/// the current surface `patch`. Points within `min_distance` of the surface,
/// or too close for the off-surface quadrature, come back as `None`.
pub fn sample_probes(
    grid: &ProbeGridConfig,
    patch: &NurbsPatch,
    f: &[f64],
    eta: f64,
    quad: &QuadConfig,
) -> Result<Vec<Option<Vec3>>> {
    probe_points(grid)
        .par_iter()
        .map(|x| {
            if grid.min_distance > 0.0 && patch.closest_point(x).1 < grid.min_distance {
                return Ok(None);
            }
            match offsurface_velocity(x, f, patch, eta, quad) {
                Ok(v) => Ok(Some(v)),
                Err(Error::NearSurface(_)) => Ok(None),
                Err(e) => Err(e.into()),
            }
        })
        .collect()
}

/// Probe grid as VTK structured points; masked points carry zero velocity
/// and `valid = 0`.
pub fn write_probe_vtk(path: &Path, title: &str, grid: &ProbeGridConfig, values: &[Option<Vec3>]) -> Result<()> {
    let n = grid.dims.iter().product::<usize>();
    if values.len() != n {
        bail!("probe grid {} has {n} points, got {} values", grid.name, values.len());
    }
    let mut s = String::new();
    writeln!(s, "# vtk DataFile Version 3.0\n{}\nASCII\nDATASET STRUCTURED_POINTS", one_line(title))?;
    let [nx, ny, nz] = grid.dims;
    writeln!(s, "DIMENSIONS {nx} {ny} {nz}")?;
    let [ox, oy, oz] = grid.origin;
    writeln!(s, "ORIGIN {ox:e} {oy:e} {oz:e}")?;
    let [dx, dy, dz] = grid.spacing;
    writeln!(s, "SPACING {dx:e} {dy:e} {dz:e}")?;
    writeln!(s, "POINT_DATA {n}\nVECTORS velocity double")?;
    for v in values {
        push_vec(&mut s, &v.unwrap_or_else(Vec3::zeros));
    }
    writeln!(s, "SCALARS valid int 1\nLOOKUP_TABLE default")?;
    for v in values {
        writeln!(s, "{}", v.is_some() as u8)?;
    }
    write_file(path, &s)
}

fn one_line(title: &str) -> String {
    title.lines().next().unwrap_or("").chars().take(255).collect()
}

fn push_vec(s: &mut String, v: &Vec3) {
    let _ = writeln!(s, "{:e} {:e} {:e}", v.x, v.y, v.z);
}

fn write_file(path: &Path, s: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    w.write_all(s.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Contents of an ASCII legacy VTK file of the two kinds written here.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VtkData {
    pub title: String,
    pub dataset: String,
    pub points: Vec<[f64; 3]>,
    pub polygons: Vec<Vec<usize>>,
    pub dims: Option<[usize; 3]>,
    pub origin: Option<[f64; 3]>,
    pub spacing: Option<[f64; 3]>,
    pub vectors: BTreeMap<String, Vec<[f64; 3]>>,
    pub scalars: BTreeMap<String, Vec<f64>>,
}

impl VtkData {
    /// Number of points, from either the point list or the lattice.
    pub fn num_points(&self) -> usize {
        self.dims.map_or(self.points.len(), |d| d.iter().product())
    }
}

/// Minimal reader for ASCII `POLYDATA` (points and polygons) and
/// `STRUCTURED_POINTS` with `VECTORS`/`SCALARS` point data.
pub fn read_vtk(text: &str) -> Result<VtkData> {
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or("");
    if !magic.starts_with("# vtk DataFile Version") {
        bail!("missing VTK magic line");
    }
    let mut out = VtkData {
        title: lines.next().unwrap_or("").to_string(),
        ..Default::default()
    };
    if lines.next().map(str::trim) != Some("ASCII") {
        bail!("only ASCII VTK is supported");
    }
    let mut tok = lines.flat_map(str::split_whitespace).peekable();
    let mut next = |what: &str| tok.next().with_context(|| format!("unexpected end of file reading {what}"));
    macro_rules! num {
        ($t:ty, $what:expr) => {{
            let s = next($what)?;
            s.parse::<$t>().with_context(|| format!("bad {} {s:?}", $what))?
        }};
    }
    if next("DATASET")? != "DATASET" {
        bail!("expected DATASET");
    }
    out.dataset = next("dataset type")?.to_string();
    let mut npoint_data = None;
    while let Ok(key) = next("section") {
        match key {
            "POINTS" => {
                let n = num!(usize, "point count");
                next("point type")?;
                for _ in 0..n {
                    out.points.push([num!(f64, "coordinate"), num!(f64, "coordinate"), num!(f64, "coordinate")]);
                }
            }
            "POLYGONS" => {
                let n = num!(usize, "polygon count");
                num!(usize, "polygon size");
                for _ in 0..n {
                    let k = num!(usize, "vertex count");
                    let mut poly = Vec::with_capacity(k);
                    for _ in 0..k {
                        poly.push(num!(usize, "vertex"));
                    }
                    out.polygons.push(poly);
                }
            }
            "DIMENSIONS" => out.dims = Some([num!(usize, "dimension"), num!(usize, "dimension"), num!(usize, "dimension")]),
            "ORIGIN" => out.origin = Some([num!(f64, "origin"), num!(f64, "origin"), num!(f64, "origin")]),
            "SPACING" => out.spacing = Some([num!(f64, "spacing"), num!(f64, "spacing"), num!(f64, "spacing")]),
            "POINT_DATA" => npoint_data = Some(num!(usize, "point data count")),
            "VECTORS" => {
                let name = next("vector name")?.to_string();
                next("vector type")?;
                let n = npoint_data.context("VECTORS before POINT_DATA")?;
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    v.push([num!(f64, "vector"), num!(f64, "vector"), num!(f64, "vector")]);
                }
                out.vectors.insert(name, v);
            }
            "SCALARS" => {
                let name = next("scalar name")?.to_string();
                next("scalar type")?;
                if num!(usize, "component count") != 1 {
                    bail!("only single-component scalars are supported");
                }
                if next("LOOKUP_TABLE")? != "LOOKUP_TABLE" {
                    bail!("expected LOOKUP_TABLE");
                }
                next("table name")?;
                let n = npoint_data.context("SCALARS before POINT_DATA")?;
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    v.push(num!(f64, "scalar"));
                }
                out.scalars.insert(name, v);
            }
            other => bail!("unsupported VTK section {other:?}"),
        }
    }
    if let Some(n) = npoint_data {
        if n != out.num_points() {
            bail!("POINT_DATA {n} does not match {} points", out.num_points());
        }
    }
    Ok(out)
}
