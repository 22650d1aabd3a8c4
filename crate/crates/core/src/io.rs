//! Plain-text artifacts: matrix CSV, per-pixel result tables and a legacy
//! VTK dump of the mesh.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mesh::{BoxMesh, PixelPartition};
use crate::monreg::MonRegConstraints;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Row-major CSV, 17 significant digits, LF line endings.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::with_capacity(m.len() * 25);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{:.16e}", m[(i, j)]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            line.split(',')
                .map(|tok| {
                    tok.trim().parse::<f64>().map_err(|e| {
                        Error::Parse(format!("row {}: '{}': {e}", i + 1, tok.trim()))
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse("ragged matrix CSV".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_text(path, &matrix_to_csv(m))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    matrix_from_csv(&read_text(path)?)
}

pub fn write_scalar(path: &Path, v: f64) -> Result<()> {
    write_text(path, &format!("{v:.16e}\n"))
}

pub fn read_scalar(path: &Path) -> Result<f64> {
    let text = read_text(path)?;
    text.trim()
        .parse()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Per-pixel reconstruction table.
pub struct VoxelRow {
    pub nu: f64,
    pub kappa: f64,
    pub lambda: f64,
    pub mu: f64,
    pub inside_truth: bool,
}

pub const VOXEL_HEADER: &str = "pixel,ix,iy,iz,nu,kappa,lambda,mu,inside_truth";

pub fn voxel_csv(partition: &PixelPartition, rows: &[VoxelRow]) -> String {
    let mut out = String::from(VOXEL_HEADER);
    out.push('\n');
    for (k, r) in rows.iter().enumerate() {
        let [ix, iy, iz] = partition.pixel_coords(k);
        writeln!(
            out,
            "{k},{ix},{iy},{iz},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            r.nu,
            r.kappa,
            r.lambda,
            r.mu,
            u8::from(r.inside_truth)
        )
        .unwrap();
    }
    out
}

pub fn constraints_csv(c: &MonRegConstraints) -> String {
    let mut out = String::from("k,beta_k,upper_k\n");
    for (k, (b, u)) in c.beta.iter().zip(c.upper_bounds()).enumerate() {
        writeln!(out, "{k},{b:.16e},{u:.16e}").unwrap();
    }
    out
}

pub fn montest_csv(partition: &PixelPartition, detected: &[bool], truth: &[bool]) -> String {
    let mut out = String::from("pixel,ix,iy,iz,detected,inside_truth\n");
    for (k, (&d, &t)) in detected.iter().zip(truth).enumerate() {
        let [ix, iy, iz] = partition.pixel_coords(k);
        writeln!(out, "{k},{ix},{iy},{iz},{},{}", u8::from(d), u8::from(t)).unwrap();
    }
    out
}

/// Legacy ASCII VTK unstructured grid with per-tet scalar fields.
pub fn vtk_unstructured(mesh: &BoxMesh, cell_fields: &[(&str, Vec<f64>)]) -> String {
    let mut out = String::new();
    out.push_str("# vtk DataFile Version 3.0\nlame-mono mesh\nASCII\nDATASET UNSTRUCTURED_GRID\n");
    writeln!(out, "POINTS {} double", mesh.num_nodes()).unwrap();
    for p in &mesh.nodes {
        writeln!(out, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]).unwrap();
    }
    let nt = mesh.num_tets();
    writeln!(out, "CELLS {nt} {}", 5 * nt).unwrap();
    for t in &mesh.tets {
        writeln!(out, "4 {} {} {} {}", t[0], t[1], t[2], t[3]).unwrap();
    }
    writeln!(out, "CELL_TYPES {nt}").unwrap();
    for _ in 0..nt {
        out.push_str("10\n");
    }
    if !cell_fields.is_empty() {
        writeln!(out, "CELL_DATA {nt}").unwrap();
        for (name, values) in cell_fields {
            writeln!(out, "SCALARS {name} double 1\nLOOKUP_TABLE default").unwrap();
            for v in values {
                writeln!(out, "{v:.16e}").unwrap();
            }
        }
    }
    out
}

/// FNV-1a over the mesh topology and coordinates; identifies a mesh in metadata.
pub fn mesh_hash(mesh: &BoxMesh) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for p in &mesh.nodes {
        for c in p.iter() {
            feed(&c.to_le_bytes());
        }
    }
    for t in &mesh.tets {
        for n in t {
            feed(&(*n as u64).to_le_bytes());
        }
    }
    format!("{h:016x}")
}
