//! Text writers for fields and traces.
//!
//! Fields go to legacy VTK `STRUCTURED_POINTS` files (nodal values as
//! `POINT_DATA`, per-square values as `CELL_DATA`) with CSV mirrors. A
//! square's cell value is the mean of its two triangles.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use eit_shape::eit::{OptTrace, TraceRow};
use eit_shape::StructuredMesh;

pub const TRACE_HEADER: &str = "iter,J,step,dJ_theta,grad_dev,stop_hits";

pub struct Field<'a> {
    pub name: &'a str,
    pub values: &'a [f64],
}

/// Per-square means of a per-triangle quantity.
pub fn square_means(mesh: &StructuredMesh, per_triangle: &[f64]) -> Vec<f64> {
    per_triangle.chunks_exact(2).take(mesh.n() * mesh.n()).map(|p| 0.5 * (p[0] + p[1])).collect()
}

pub fn vtk_string(mesh: &StructuredMesh, title: &str, points: &[Field], cells: &[Field]) -> String {
    let n = mesh.n();
    let h = mesh.h();
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "{}", title.replace('\n', " "));
    let _ = writeln!(s, "ASCII");
    let _ = writeln!(s, "DATASET STRUCTURED_POINTS");
    let _ = writeln!(s, "DIMENSIONS {} {} 1", n + 1, n + 1);
    let _ = writeln!(s, "ORIGIN 0 0 0");
    let _ = writeln!(s, "SPACING {h:e} {h:e} 1");
    let mut section = |kind: &str, count: usize, fields: &[Field]| {
        if fields.is_empty() {
            return;
        }
        let _ = writeln!(s, "{kind} {count}");
        for f in fields {
            let _ = writeln!(s, "SCALARS {} double 1", f.name);
            let _ = writeln!(s, "LOOKUP_TABLE default");
            for v in f.values {
                let _ = writeln!(s, "{v:e}");
            }
        }
    };
    section("POINT_DATA", mesh.num_nodes(), points);
    section("CELL_DATA", n * n, cells);
    s
}

/// One row per node: `i,j,x,y` and the field values.
pub fn nodal_csv(mesh: &StructuredMesh, fields: &[Field]) -> String {
    let mut s = String::from("i,j,x,y");
    for f in fields {
        s.push(',');
        s.push_str(f.name);
    }
    s.push('\n');
    for (k, p) in mesh.nodes().iter().enumerate() {
        let (i, j) = mesh.node_ij(k);
        let _ = write!(s, "{i},{j},{:e},{:e}", p[0], p[1]);
        for f in fields {
            let _ = write!(s, ",{:e}", f.values[k]);
        }
        s.push('\n');
    }
    s
}

/// One row per square: indices, centre and the field values.
pub fn cell_csv(mesh: &StructuredMesh, fields: &[Field]) -> String {
    let n = mesh.n();
    let h = mesh.h();
    let mut s = String::from("i,j,x,y");
    for f in fields {
        s.push(',');
        s.push_str(f.name);
    }
    s.push('\n');
    for j in 0..n {
        for i in 0..n {
            let _ = write!(s, "{i},{j},{:e},{:e}", (i as f64 + 0.5) * h, (j as f64 + 0.5) * h);
            for f in fields {
                let _ = write!(s, ",{:e}", f.values[j * n + i]);
            }
            s.push('\n');
        }
    }
    s
}

/// Writes `<stem>.vtk`, `<stem>_nodes.csv` and, with cell data, `<stem>_cells.csv`.
pub fn write_fields(dir: &Path, stem: &str, mesh: &StructuredMesh, title: &str, points: &[Field], cells: &[Field]) -> io::Result<()> {
    fs::write(dir.join(format!("{stem}.vtk")), vtk_string(mesh, title, points, cells))?;
    fs::write(dir.join(format!("{stem}_nodes.csv")), nodal_csv(mesh, points))?;
    if !cells.is_empty() {
        fs::write(dir.join(format!("{stem}_cells.csv")), cell_csv(mesh, cells))?;
    }
    Ok(())
}

pub fn trace_line(row: &TraceRow) -> String {
    format!("{},{:e},{:e},{:e},{:e},{}", row.iter, row.cost, row.step, row.dj_theta, row.grad_dev, row.stop_hits)
}

pub fn trace_csv(trace: &OptTrace) -> String {
    let mut s = format!("{TRACE_HEADER}\n");
    for row in &trace.rows {
        s.push_str(&trace_line(row));
        s.push('\n');
    }
    s
}

/// Appends trace rows to a file as they arrive.
pub struct TraceWriter {
    file: io::BufWriter<fs::File>,
}

impl TraceWriter {
    pub fn create(path: &Path) -> io::Result<Self> {
        let mut file = io::BufWriter::new(fs::File::create(path)?);
        writeln!(file, "{TRACE_HEADER}")?;
        Ok(Self { file })
    }

    pub fn push(&mut self, row: &TraceRow) -> io::Result<()> {
        writeln!(self.file, "{}", trace_line(row))?;
        self.file.flush()
    }
}
