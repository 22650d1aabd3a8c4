//! Structured tetrahedral meshes of an axis-aligned box, the voxel ("pixel")
//! partition used by the reconstruction, and the boundary patches that carry
//! the applied tractions.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the six faces of the box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Face {
    #[serde(rename = "x-")]
    XMinus,
    #[serde(rename = "x+")]
    XPlus,
    #[serde(rename = "y-")]
    YMinus,
    #[serde(rename = "y+")]
    YPlus,
    #[serde(rename = "z-")]
    ZMinus,
    #[serde(rename = "z+")]
    ZPlus,
}

impl Face {
    pub const ALL: [Face; 6] = [
        Face::XMinus,
        Face::XPlus,
        Face::YMinus,
        Face::YPlus,
        Face::ZMinus,
        Face::ZPlus,
    ];

    /// Coordinate axis orthogonal to the face.
    pub fn axis(self) -> usize {
        match self {
            Face::XMinus | Face::XPlus => 0,
            Face::YMinus | Face::YPlus => 1,
            Face::ZMinus | Face::ZPlus => 2,
        }
    }

    pub fn is_max_side(self) -> bool {
        matches!(self, Face::XPlus | Face::YPlus | Face::ZPlus)
    }

    pub fn outward_normal(self) -> Vector3<f64> {
        let mut n = Vector3::zeros();
        n[self.axis()] = if self.is_max_side() { 1.0 } else { -1.0 };
        n
    }

    /// The two in-plane axes, ascending.
    pub fn tangent_axes(self) -> (usize, usize) {
        match self.axis() {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Face::XMinus => "x-",
            Face::XPlus => "x+",
            Face::YMinus => "y-",
            Face::YPlus => "y+",
            Face::ZMinus => "z-",
            Face::ZPlus => "z+",
        }
    }
}

impl fmt::Display for Face {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Face {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Face::ALL
            .into_iter()
            .find(|f| f.label() == s)
            .ok_or_else(|| Error::invalid(format!("unknown face label '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryTri {
    /// Node indices, ordered so the right-hand normal points out of the box.
    pub nodes: [usize; 3],
    pub face: Face,
}

/// Conforming tetrahedral mesh of `origin + [0, extents]`.
#[derive(Debug, Clone)]
pub struct BoxMesh {
    pub origin: Vector3<f64>,
    pub extents: Vector3<f64>,
    pub resolution: [usize; 3],
    pub nodes: Vec<Vector3<f64>>,
    pub tets: Vec<[usize; 4]>,
    pub boundary_tris: Vec<BoundaryTri>,
}

/// Kuhn subdivision of the unit cube: one tet per axis permutation, each a
/// monotone path from corner (0,0,0) to (1,1,1). Every hex uses the same
/// pattern, so shared hex faces are split along the same diagonal.
const KUHN_PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [1, 2, 0],
    [2, 0, 1],
    [0, 2, 1],
    [2, 1, 0],
    [1, 0, 2],
];

pub fn build_box_mesh(
    origin: Vector3<f64>,
    extents: Vector3<f64>,
    resolution: [usize; 3],
) -> Result<BoxMesh> {
    if resolution.contains(&0) {
        return Err(Error::invalid(format!(
            "mesh resolution must be positive, got {resolution:?}"
        )));
    }
    if extents.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(Error::invalid(format!(
            "box extents must be positive and finite, got {:?}",
            extents.as_slice()
        )));
    }
    if origin.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("box origin must be finite"));
    }

    let [nx, ny, nz] = resolution;
    let h = Vector3::new(
        extents[0] / nx as f64,
        extents[1] / ny as f64,
        extents[2] / nz as f64,
    );
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                // Snap the last layer exactly onto the far face.
                let coord = |idx: usize, n: usize, axis: usize| {
                    if idx == n {
                        origin[axis] + extents[axis]
                    } else {
                        origin[axis] + idx as f64 * h[axis]
                    }
                };
                nodes.push(Vector3::new(
                    coord(i, nx, 0),
                    coord(j, ny, 1),
                    coord(k, nz, 2),
                ));
            }
        }
    }

    let node_id = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);
    let mut tets = Vec::with_capacity(6 * nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                for perm in KUHN_PERMUTATIONS {
                    let mut corner = [i, j, k];
                    let mut tet = [node_id(i, j, k); 4];
                    for (step, &axis) in perm.iter().enumerate() {
                        corner[axis] += 1;
                        tet[step + 1] = node_id(corner[0], corner[1], corner[2]);
                    }
                    if signed_volume(&nodes, &tet) < 0.0 {
                        tet.swap(2, 3);
                    }
                    tets.push(tet);
                }
            }
        }
    }

    let mut mesh = BoxMesh {
        origin,
        extents,
        resolution,
        nodes,
        tets,
        boundary_tris: Vec::new(),
    };
    mesh.boundary_tris = mesh.extract_boundary()?;
    Ok(mesh)
}

fn signed_volume(nodes: &[Vector3<f64>], tet: &[usize; 4]) -> f64 {
    let a = nodes[tet[1]] - nodes[tet[0]];
    let b = nodes[tet[2]] - nodes[tet[0]];
    let c = nodes[tet[3]] - nodes[tet[0]];
    a.dot(&b.cross(&c)) / 6.0
}

impl BoxMesh {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_tets(&self) -> usize {
        self.tets.len()
    }

    /// Grid spacing along each axis.
    pub fn spacing(&self) -> Vector3<f64> {
        Vector3::new(
            self.extents[0] / self.resolution[0] as f64,
            self.extents[1] / self.resolution[1] as f64,
            self.extents[2] / self.resolution[2] as f64,
        )
    }

    pub fn tet_volume(&self, t: usize) -> f64 {
        signed_volume(&self.nodes, &self.tets[t])
    }

    pub fn tet_centroid(&self, t: usize) -> Vector3<f64> {
        self.tets[t]
            .iter()
            .fold(Vector3::zeros(), |acc, &n| acc + self.nodes[n])
            / 4.0
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.num_tets()).map(|t| self.tet_volume(t)).sum()
    }

    pub fn triangle_area(&self, tri: &BoundaryTri) -> f64 {
        let [a, b, c] = tri.nodes.map(|n| self.nodes[n]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn triangle_centroid(&self, tri: &BoundaryTri) -> Vector3<f64> {
        tri.nodes
            .iter()
            .fold(Vector3::zeros(), |acc, &n| acc + self.nodes[n])
            / 3.0
    }

    /// Grid cell (along each axis) containing point `x`, clamped into the box.
    pub fn cell_of_point(&self, x: &Vector3<f64>) -> [usize; 3] {
        let h = self.spacing();
        let mut cell = [0; 3];
        for axis in 0..3 {
            let rel = ((x[axis] - self.origin[axis]) / h[axis]).floor();
            cell[axis] = (rel.max(0.0) as usize).min(self.resolution[axis] - 1);
        }
        cell
    }

    /// Whether node `n` lies on the given box face.
    pub fn node_on_face(&self, n: usize, face: Face) -> bool {
        let axis = face.axis();
        let target = if face.is_max_side() {
            self.origin[axis] + self.extents[axis]
        } else {
            self.origin[axis]
        };
        self.nodes[n][axis] == target
    }

    /// Every tet face seen exactly once is a boundary face; label it by the
    /// box face its three nodes share.
    fn extract_boundary(&self) -> Result<Vec<BoundaryTri>> {
        let mut seen: HashMap<[usize; 3], (usize, [usize; 3])> = HashMap::new();
        for tet in &self.tets {
            for skip in 0..4 {
                let mut face = [0; 3];
                let mut m = 0;
                for (i, &n) in tet.iter().enumerate() {
                    if i != skip {
                        face[m] = n;
                        m += 1;
                    }
                }
                let mut key = face;
                key.sort_unstable();
                seen.entry(key).or_insert((0, face)).0 += 1;
            }
        }

        let mut tris = Vec::new();
        for (key, (count, face_nodes)) in seen {
            match count {
                1 => {}
                2 => continue,
                _ => {
                    return Err(Error::numerical(format!(
                        "non-conforming mesh: face {key:?} shared by {count} tets"
                    )))
                }
            }
            let face = Face::ALL
                .into_iter()
                .find(|&f| face_nodes.iter().all(|&n| self.node_on_face(n, f)))
                .ok_or_else(|| {
                    Error::numerical(format!("boundary face {key:?} is not on the box surface"))
                })?;
            let mut nodes = face_nodes;
            let [a, b, c] = nodes.map(|n| self.nodes[n]);
            if (b - a).cross(&(c - a)).dot(&face.outward_normal()) < 0.0 {
                nodes.swap(1, 2);
            }
            tris.push(BoundaryTri { nodes, face });
        }
        // HashMap order is not deterministic.
        tris.sort_by_key(|t| {
            let mut k = t.nodes;
            k.sort_unstable();
            (t.face, k)
        });
        Ok(tris)
    }
}

/// Voxel partition `{B_k}` of the mesh: each pixel is a block of whole grid cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelPartition {
    pub pixel_resolution: [usize; 3],
    /// Pixel index of every tet (0-based, `ix + px·(iy + py·iz)`).
    pub element_to_pixel: Vec<usize>,
    /// Tets of every pixel, ascending.
    pub pixel_elements: Vec<Vec<usize>>,
}

impl PixelPartition {
    pub fn num_pixels(&self) -> usize {
        self.pixel_elements.len()
    }

    pub fn pixel_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        let [px, py, _] = self.pixel_resolution;
        ix + px * (iy + py * iz)
    }

    pub fn pixel_coords(&self, k: usize) -> [usize; 3] {
        let [px, py, _] = self.pixel_resolution;
        [k % px, (k / px) % py, k / (px * py)]
    }

    /// Axis-aligned bounds `(min, max)` of pixel `k`.
    pub fn pixel_bounds(&self, mesh: &BoxMesh, k: usize) -> (Vector3<f64>, Vector3<f64>) {
        let c = self.pixel_coords(k);
        let mut lo = Vector3::zeros();
        let mut hi = Vector3::zeros();
        for axis in 0..3 {
            let size = mesh.extents[axis] / self.pixel_resolution[axis] as f64;
            lo[axis] = mesh.origin[axis] + c[axis] as f64 * size;
            hi[axis] = mesh.origin[axis] + (c[axis] + 1) as f64 * size;
        }
        (lo, hi)
    }

    /// Face-adjacent pixels of `k`.
    pub fn neighbors(&self, k: usize) -> Vec<usize> {
        let c = self.pixel_coords(k);
        let mut out = Vec::with_capacity(6);
        for axis in 0..3 {
            for step in [-1_i64, 1] {
                let v = c[axis] as i64 + step;
                if v < 0 || v >= self.pixel_resolution[axis] as i64 {
                    continue;
                }
                let mut n = c;
                n[axis] = v as usize;
                out.push(self.pixel_index(n[0], n[1], n[2]));
            }
        }
        out
    }
}

pub fn build_pixel_partition(
    mesh: &BoxMesh,
    pixel_resolution: [usize; 3],
) -> Result<PixelPartition> {
    for axis in 0..3 {
        let p = pixel_resolution[axis];
        if p == 0 || !mesh.resolution[axis].is_multiple_of(p) {
            return Err(Error::invalid(format!(
                "pixel resolution {pixel_resolution:?} does not divide mesh resolution {:?}",
                mesh.resolution
            )));
        }
    }
    let cells_per_pixel: Vec<usize> = (0..3)
        .map(|a| mesh.resolution[a] / pixel_resolution[a])
        .collect();
    let [px, py, pz] = pixel_resolution;
    let mut pixel_elements = vec![Vec::new(); px * py * pz];
    let mut element_to_pixel = Vec::with_capacity(mesh.num_tets());
    for t in 0..mesh.num_tets() {
        let cell = mesh.cell_of_point(&mesh.tet_centroid(t));
        let ix = cell[0] / cells_per_pixel[0];
        let iy = cell[1] / cells_per_pixel[1];
        let iz = cell[2] / cells_per_pixel[2];
        let k = ix + px * (iy + py * iz);
        element_to_pixel.push(k);
        pixel_elements[k].push(t);
    }
    Ok(PixelPartition {
        pixel_resolution,
        element_to_pixel,
        pixel_elements,
    })
}

/// A Neumann patch: one cell of the `q × q` grid on a non-Dirichlet face.
#[derive(Debug, Clone)]
pub struct Patch {
    pub face: Face,
    /// Cell index along the two tangent axes of the face.
    pub cell: (usize, usize),
    /// Indices into `BoxMesh::boundary_tris`.
    pub triangles: Vec<usize>,
    pub area: f64,
    /// Constant traction on the patch, `n / √area` so that `‖g‖_{L²} = 1`.
    pub traction: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct PatchSet {
    pub dirichlet_face: Face,
    pub per_face_grid: usize,
    pub patches: Vec<Patch>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn neumann_faces(&self) -> impl Iterator<Item = Face> + '_ {
        Face::ALL.into_iter().filter(move |&f| f != self.dirichlet_face)
    }

    /// Gram matrix `∫_{Γ_N} g_l · g_m ds` of the patch tractions.
    pub fn load_gram(&self, mesh: &BoxMesh) -> nalgebra::DMatrix<f64> {
        let m = self.len();
        let mut owners: HashMap<usize, Vec<usize>> = HashMap::new();
        for (l, patch) in self.patches.iter().enumerate() {
            for &tri in &patch.triangles {
                owners.entry(tri).or_default().push(l);
            }
        }
        let mut gram = nalgebra::DMatrix::zeros(m, m);
        for (tri, ls) in owners {
            let area = mesh.triangle_area(&mesh.boundary_tris[tri]);
            for &a in &ls {
                for &b in &ls {
                    gram[(a, b)] += area * self.patches[a].traction.dot(&self.patches[b].traction);
                }
            }
        }
        gram
    }
}

pub fn build_patch_set(mesh: &BoxMesh, per_face_grid: usize, dirichlet_face: Face) -> Result<PatchSet> {
    let q = per_face_grid;
    if q == 0 {
        return Err(Error::invalid("per-face patch grid must be at least 1"));
    }
    let neumann: Vec<Face> = Face::ALL
        .into_iter()
        .filter(|&f| f != dirichlet_face)
        .collect();
    for &face in &neumann {
        let (a, b) = face.tangent_axes();
        if !mesh.resolution[a].is_multiple_of(q) || !mesh.resolution[b].is_multiple_of(q) {
            return Err(Error::invalid(format!(
                "face {face} resolution ({}, {}) is not divisible by the patch grid {q}",
                mesh.resolution[a], mesh.resolution[b]
            )));
        }
    }

    let mut patches = Vec::with_capacity(neumann.len() * q * q);
    let mut lookup = HashMap::new();
    for &face in &neumann {
        for v in 0..q {
            for u in 0..q {
                lookup.insert((face, u, v), patches.len());
                patches.push(Patch {
                    face,
                    cell: (u, v),
                    triangles: Vec::new(),
                    area: 0.0,
                    traction: Vector3::zeros(),
                });
            }
        }
    }

    for (idx, tri) in mesh.boundary_tris.iter().enumerate() {
        if tri.face == dirichlet_face {
            continue;
        }
        let (a, b) = tri.face.tangent_axes();
        let cell = mesh.cell_of_point(&mesh.triangle_centroid(tri));
        let u = cell[a] / (mesh.resolution[a] / q);
        let v = cell[b] / (mesh.resolution[b] / q);
        let l = lookup[&(tri.face, u, v)];
        patches[l].triangles.push(idx);
        patches[l].area += mesh.triangle_area(tri);
    }

    for patch in &mut patches {
        if patch.triangles.is_empty() || !(patch.area > 0.0) {
            return Err(Error::numerical(format!(
                "patch {:?} on face {} received no boundary triangles",
                patch.cell, patch.face
            )));
        }
        patch.traction = patch.face.outward_normal() / patch.area.sqrt();
    }

    Ok(PatchSet {
        dirichlet_face,
        per_face_grid: q,
        patches,
    })
}
