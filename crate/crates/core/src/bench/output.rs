use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::Vector2;

use super::{Snapshot, TimeSeries};
use crate::mesh::{BackgroundMesh, Point};
use crate::schemes::Scheme;

/// Background velocity and pressure at one recorded step.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSnapshot {
    pub step: usize,
    pub t: f64,
    pub u: Vec<f64>,
    pub p: Vec<f64>,
}

fn io_err(path: &Path, e: io::Error) -> io::Error {
    io::Error::new(e.kind(), format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> io::Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub const METRICS_HEADER: &str = "t,step,velocity_norm,divergence,divergence_relative,fp_iterations";

pub fn write_metrics_csv(series: &TimeSeries, path: &Path) -> io::Result<()> {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for snap in &series.snapshots {
        writeln!(
            s,
            "{:.16e},{},{:.16e},{:.16e},{:.16e},{}",
            snap.t, snap.step, snap.velocity_norm, snap.divergence, snap.divergence_relative, snap.fp_iterations
        )
        .unwrap();
    }
    write_file(path, &s)
}

fn bad_data(path: &Path, line: usize, msg: impl std::fmt::Display) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, format!("{}:{line}: {msg}", path.display()))
}

fn parse_fields<'a>(path: &Path, line: usize, text: &'a str, n: usize) -> io::Result<Vec<&'a str>> {
    let cols: Vec<&str> = text.split(',').map(str::trim).collect();
    if cols.len() != n {
        return Err(bad_data(path, line, format!("expected {n} columns, found {}", cols.len())));
    }
    Ok(cols)
}

fn num<T: std::str::FromStr>(path: &Path, line: usize, s: &str) -> io::Result<T> {
    s.parse().map_err(|_| bad_data(path, line, format!("bad number '{s}'")))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub t: f64,
    pub step: usize,
    pub velocity_norm: f64,
    pub divergence: f64,
    pub divergence_relative: f64,
    pub fp_iterations: usize,
}

pub fn read_metrics_csv(path: &Path) -> io::Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let ln = i + 1;
        let c = parse_fields(path, ln, line, 6)?;
        rows.push(MetricsRow {
            t: num(path, ln, c[0])?,
            step: num(path, ln, c[1])?,
            velocity_norm: num(path, ln, c[2])?,
            divergence: num(path, ln, c[3])?,
            divergence_relative: num(path, ln, c[4])?,
            fp_iterations: num(path, ln, c[5])?,
        });
    }
    Ok(rows)
}

pub fn write_solid_nodes_csv(series: &TimeSeries, path: &Path) -> io::Result<()> {
    let mut s = String::from("t,step,node,x,y,X,Y,ux,uy\n");
    for snap in &series.snapshots {
        for (k, ((x, r), v)) in snap.coords.iter().zip(&series.reference).zip(&snap.velocities).enumerate() {
            writeln!(
                s,
                "{:.16e},{},{k},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                snap.t, snap.step, x.x, x.y, r.x, r.y, v.x, v.y
            )
            .unwrap();
        }
    }
    write_file(path, &s)
}

/// Rebuilds a solid-node series from `solid_nodes.csv`. The time step is
/// recovered from `t / step`; divergence and iteration counts are not stored
/// there and read back as zero.
pub fn read_solid_nodes_csv(path: &Path, case: &str, scheme: Scheme) -> io::Result<TimeSeries> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut series = TimeSeries {
        case: case.to_string(),
        scheme,
        dt: 0.0,
        reference: Vec::new(),
        triangles: Vec::new(),
        snapshots: Vec::new(),
        event: None,
    };
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let ln = i + 1;
        let c = parse_fields(path, ln, line, 9)?;
        let t: f64 = num(path, ln, c[0])?;
        let step: usize = num(path, ln, c[1])?;
        let node: usize = num(path, ln, c[2])?;
        let f = |k: usize| num::<f64>(path, ln, c[k]);
        let (x, r, v) = (Point::new(f(3)?, f(4)?), Point::new(f(5)?, f(6)?), Vector2::new(f(7)?, f(8)?));
        if node == 0 {
            series.snapshots.push(Snapshot {
                step,
                t,
                coords: Vec::new(),
                velocities: Vec::new(),
                velocity_norm: 0.0,
                divergence: 0.0,
                divergence_relative: 0.0,
                fp_iterations: 0,
            });
        }
        let first = series.snapshots.len() == 1;
        let snap = series
            .snapshots
            .last_mut()
            .ok_or_else(|| bad_data(path, ln, "first row must be node 0"))?;
        if node != snap.coords.len() || snap.step != step {
            return Err(bad_data(path, ln, "rows out of order"));
        }
        if first {
            series.reference.push(r);
        }
        snap.coords.push(x);
        snap.velocities.push(v);
        if step > 0 && series.dt == 0.0 {
            series.dt = t / step as f64;
        }
    }
    for s in &mut series.snapshots {
        if s.coords.len() != series.reference.len() {
            return Err(bad_data(path, 0, format!("snapshot at t = {} has a different node count", s.t)));
        }
        s.velocity_norm = s.velocities.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
    }
    Ok(series)
}

pub fn write_solid_vtk(series: &TimeSeries, snap: &Snapshot, path: &Path) -> io::Result<()> {
    let n = snap.coords.len();
    let m = series.triangles.len();
    let mut s = String::new();
    writeln!(s, "# vtk DataFile Version 3.0").unwrap();
    writeln!(s, "{} solid t={:.16e}", series.case, snap.t).unwrap();
    writeln!(s, "ASCII\nDATASET UNSTRUCTURED_GRID").unwrap();
    writeln!(s, "POINTS {n} double").unwrap();
    for p in &snap.coords {
        writeln!(s, "{:.16e} {:.16e} 0", p.x, p.y).unwrap();
    }
    writeln!(s, "CELLS {m} {}", 4 * m).unwrap();
    for t in &series.triangles {
        writeln!(s, "3 {} {} {}", t[0], t[1], t[2]).unwrap();
    }
    writeln!(s, "CELL_TYPES {m}").unwrap();
    for _ in 0..m {
        s.push_str("5\n");
    }
    writeln!(s, "POINT_DATA {n}\nVECTORS velocity double").unwrap();
    for v in &snap.velocities {
        writeln!(s, "{:.16e} {:.16e} 0", v.x, v.y).unwrap();
    }
    writeln!(s, "VECTORS displacement double").unwrap();
    for d in snap.displacements(&series.reference) {
        writeln!(s, "{:.16e} {:.16e} 0", d.x, d.y).unwrap();
    }
    write_file(path, &s)
}

/// Structured points on the velocity lattice; pressure is the bilinear
/// interpolant evaluated at the velocity nodes.
pub fn write_fluid_vtk(bg: &BackgroundMesh, field: &FieldSnapshot, path: &Path) -> io::Result<()> {
    let (nxv, nyv) = (2 * bg.nx + 1, 2 * bg.ny + 1);
    let npx = bg.nx + 1;
    let mut s = String::new();
    writeln!(s, "# vtk DataFile Version 3.0").unwrap();
    writeln!(s, "fluid t={:.16e}", field.t).unwrap();
    writeln!(s, "ASCII\nDATASET STRUCTURED_POINTS").unwrap();
    writeln!(s, "DIMENSIONS {nxv} {nyv} 1").unwrap();
    writeln!(s, "ORIGIN {:.16e} {:.16e} 0", bg.domain.x0, bg.domain.y0).unwrap();
    writeln!(s, "SPACING {:.16e} {:.16e} 1", 0.5 * bg.hx, 0.5 * bg.hy).unwrap();
    writeln!(s, "POINT_DATA {}\nVECTORS velocity double", nxv * nyv).unwrap();
    for k in 0..nxv * nyv {
        writeln!(s, "{:.16e} {:.16e} 0", field.u[2 * k], field.u[2 * k + 1]).unwrap();
    }
    writeln!(s, "SCALARS pressure double 1\nLOOKUP_TABLE default").unwrap();
    for j in 0..nyv {
        let (j0, j1) = (j / 2, j.div_ceil(2));
        for i in 0..nxv {
            let (i0, i1) = (i / 2, i.div_ceil(2));
            let p = 0.25
                * (field.p[j0 * npx + i0] + field.p[j0 * npx + i1] + field.p[j1 * npx + i0] + field.p[j1 * npx + i1]);
            writeln!(s, "{p:.16e}").unwrap();
        }
    }
    write_file(path, &s)
}

pub fn write_plot_script(series: &TimeSeries, path: &Path) -> io::Result<()> {
    let s = format!(
        "# gnuplot script; reads metrics.csv only\n\
         set datafile separator ','\n\
         set terminal pngcairo size 900,600\n\
         set xlabel 't'\n\
         set grid\n\
         set output 'velocity_norm.png'\n\
         set ylabel '||u|| on solid nodes'\n\
         plot 'metrics.csv' using 1:3 every ::1 with lines title '{} ({})'\n\
         set output 'divergence.png'\n\
         set ylabel '||Bu|| / ||u||_M'\n\
         set logscale y\n\
         plot 'metrics.csv' using 1:5 every ::2 with lines title 'relative divergence residual'\n",
        series.case, series.scheme
    );
    write_file(path, &s)
}

/// Writes `metrics.csv`, `solid_nodes.csv`, `solid_NNNN.vtk` per snapshot,
/// `fluid_NNNN.vtk` per field snapshot (numbered like the matching solid file),
/// `plot.gp` and `outcome.txt`. Returns the written paths.
pub fn write_outputs(
    series: &TimeSeries,
    fields: &[FieldSnapshot],
    bg: &BackgroundMesh,
    out_dir: &Path,
) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut written = Vec::new();
    let mut push = |name: String| {
        let p = out_dir.join(name);
        written.push(p.clone());
        p
    };
    write_metrics_csv(series, &push("metrics.csv".into()))?;
    write_solid_nodes_csv(series, &push("solid_nodes.csv".into()))?;
    for (k, snap) in series.snapshots.iter().enumerate() {
        write_solid_vtk(series, snap, &push(format!("solid_{k:04}.vtk")))?;
    }
    for (i, field) in fields.iter().enumerate() {
        let k = series
            .snapshots
            .iter()
            .position(|s| s.step == field.step)
            .unwrap_or(series.snapshots.len() + i);
        write_fluid_vtk(bg, field, &push(format!("fluid_{k:04}.vtk")))?;
    }
    write_plot_script(series, &push("plot.gp".into()))?;
    let outcome = match &series.event {
        None => format!(
            "completed t={:.16e} step={}\n",
            series.last().map_or(0.0, |s| s.t),
            series.last().map_or(0, |s| s.step)
        ),
        Some(e) => format!("{:?} t={:.16e} step={}\n{}\n", e.kind, e.t, e.step, e.message),
    };
    write_file(&push("outcome.txt".into()), &outcome)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{preset, run_case_with};
    use crate::mesh::{build_background_grid, Rect};

    fn tiny_series(snaps: usize) -> TimeSeries {
        let reference = vec![Point::new(0.25, 0.5), Point::new(0.5, 0.5), Point::new(0.25, 0.75)];
        let snapshots = (0..snaps)
            .map(|k| Snapshot {
                step: 3 * k,
                t: 0.1 * (3 * k) as f64,
                coords: reference.iter().map(|p| p + Point::new(0.01 * k as f64, -1.0 / 7.0 * 1e-3)).collect(),
                velocities: vec![Vector2::new(1.0 / 3.0, -2.0 / 7.0); 3],
                velocity_norm: (3.0f64 * (1.0 / 9.0 + 4.0 / 49.0)).sqrt(),
                divergence: 1e-11 / 3.0,
                divergence_relative: 1e-10 / 7.0,
                fp_iterations: k,
            })
            .collect();
        TimeSeries {
            case: "tiny".into(),
            scheme: Scheme::ImplicitIfem,
            dt: 0.1,
            reference,
            triangles: vec![[0, 1, 2]],
            snapshots,
            event: None,
        }
    }

    #[test]
    fn metrics_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let series = tiny_series(4);
        let path = dir.path().join("m.csv");
        write_metrics_csv(&series, &path).unwrap();
        let rows = read_metrics_csv(&path).unwrap();
        assert_eq!(rows.len(), 4);
        for (r, s) in rows.iter().zip(&series.snapshots) {
            assert_eq!(r.t.to_bits(), s.t.to_bits());
            assert_eq!(r.velocity_norm.to_bits(), s.velocity_norm.to_bits());
            assert_eq!(r.divergence.to_bits(), s.divergence.to_bits());
            assert_eq!(r.divergence_relative.to_bits(), s.divergence_relative.to_bits());
            assert_eq!((r.step, r.fp_iterations), (s.step, s.fp_iterations));
        }
    }

    #[test]
    fn solid_nodes_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let series = tiny_series(3);
        let path = dir.path().join("s.csv");
        write_solid_nodes_csv(&series, &path).unwrap();
        let back = read_solid_nodes_csv(&path, "tiny", Scheme::ImplicitIfem).unwrap();
        assert_eq!(back.reference, series.reference);
        assert!((back.dt - 0.1).abs() < 1e-12);
        for (a, b) in back.snapshots.iter().zip(&series.snapshots) {
            assert_eq!((a.coords.clone(), a.velocities.clone(), a.step), (b.coords.clone(), b.velocities.clone(), b.step));
            assert_eq!(a.velocity_norm, b.velocity_norm);
        }
    }

    #[test]
    fn zero_state_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut case = preset("cavity-2-coarse").unwrap();
        case.nx = 6;
        case.ny = 6;
        case.lid_speed = 0.0;
        case.solid_triangles = 40;
        case.t_end = 2.0 * case.dt;
        let mut fields = Vec::new();
        let series = run_case_with(&case, &case.scheme_config(Scheme::OneFieldFdm), 2, |sim, s| {
            fields.push(FieldSnapshot {
                step: s.step,
                t: s.t,
                u: sim.state.u.clone(),
                p: sim.state.p.clone(),
            })
        })
        .unwrap();
        assert_eq!(series.snapshots.len(), 2);
        let bg = case.build_problem().unwrap().bg;
        let files = write_outputs(&series, &fields, &bg, dir.path()).unwrap();
        for f in &files {
            assert!(f.exists(), "{}", f.display());
        }
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let n = series.reference.len();
        let vtk = fs::read_to_string(dir.path().join("solid_0001.vtk")).unwrap();
        assert!(vtk.contains(&format!("POINTS {n} double")));
        assert!(vtk.contains(&format!("POINT_DATA {n}")));
        let fluid = fs::read_to_string(dir.path().join("fluid_0001.vtk")).unwrap();
        assert!(fluid.contains("DIMENSIONS 13 13 1"));
        assert!(fluid.contains(&format!("POINT_DATA {}", bg.num_velocity_nodes())));
        assert_eq!(fluid.lines().filter(|l| !l.is_empty()).count(), 9 + 2 * 169 + 2);
        let outcome = fs::read_to_string(dir.path().join("outcome.txt")).unwrap();
        assert!(outcome.starts_with("completed"));
        let plot = fs::read_to_string(dir.path().join("plot.gp")).unwrap();
        assert!(plot.contains("metrics.csv") && !plot.contains(".vtk"));
    }

    #[test]
    fn leaflet_vtk_cell_count() {
        let dir = tempfile::tempdir().unwrap();
        let case = preset("leaflet-1").unwrap();
        let solid = case.build_solid().unwrap();
        let series = TimeSeries {
            case: case.name.clone(),
            scheme: Scheme::OneFieldFdm,
            dt: case.dt,
            reference: solid.ref_coords.clone(),
            triangles: solid.triangles.clone(),
            snapshots: vec![Snapshot {
                step: 0,
                t: 0.0,
                coords: solid.cur_coords.clone(),
                velocities: vec![Vector2::zeros(); solid.num_nodes()],
                velocity_norm: 0.0,
                divergence: 0.0,
                divergence_relative: 0.0,
                fp_iterations: 0,
            }],
            event: None,
        };
        let path = dir.path().join("leaf.vtk");
        write_solid_vtk(&series, &series.snapshots[0], &path).unwrap();
        let vtk = fs::read_to_string(&path).unwrap();
        let m = solid.num_triangles();
        assert!(vtk.contains(&format!("CELLS {m} {}", 4 * m)));
        assert!(vtk.contains(&format!("CELL_TYPES {m}")));
        assert_eq!(vtk.lines().filter(|l| *l == "5").count(), m);
    }

    #[test]
    fn fluid_pressure_interpolates_bilinear_field() {
        let dir = tempfile::tempdir().unwrap();
        let bg = build_background_grid(2, 3, Rect::new(0.0, 2.0, 0.0, 3.0)).unwrap();
        let p: Vec<f64> = bg.pressure_nodes.iter().map(|x| 1.0 + 2.0 * x.x - x.y + 0.5 * x.x * x.y).collect();
        let field = FieldSnapshot {
            step: 0,
            t: 0.0,
            u: vec![0.0; 2 * bg.num_velocity_nodes()],
            p,
        };
        let path = dir.path().join("f.vtk");
        write_fluid_vtk(&bg, &field, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let vals: Vec<f64> = text
            .lines()
            .skip_while(|l| !l.starts_with("LOOKUP_TABLE"))
            .skip(1)
            .map(|l| l.parse().unwrap())
            .collect();
        assert_eq!(vals.len(), bg.num_velocity_nodes());
        for (v, x) in vals.iter().zip(&bg.velocity_nodes) {
            assert!((v - (1.0 + 2.0 * x.x - x.y + 0.5 * x.x * x.y)).abs() < 1e-12);
        }
    }

    #[test]
    fn io_errors_name_the_path() {
        let e = read_metrics_csv(Path::new("/no/such/metrics.csv")).unwrap_err();
        assert!(e.to_string().contains("/no/such/metrics.csv"));
    }
}
