//! Dense SDF grids and marching-cubes extraction of the zero level set.
//!
//! The per-cube triangulation comes from a 256-entry case table built once
//! from the cube's face topology: on every face, oriented isoline segments
//! run through spans of negative corners, the segments chain into closed
//! polygons, and each polygon is fan-triangulated. Faces with four
//! crossings always separate the two negative corners; no asymptotic
//! decider. The construction makes triangles wind counter-clockwise seen
//! from the positive side, so face normals point toward positive SDF.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use thiserror::Error;

use crate::diffcore::Tensor;
use crate::geometry::{DepthMap, GeomError, ImageMap, NormalMap, TriMesh, Vec3};
use crate::pifu::{FieldQuery, ImplicitField, PifuError, SdfQuery};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("depth map has no foreground pixels")]
    EmptyMask,
    #[error(transparent)]
    Field(#[from] PifuError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Signed distances on an axis-aligned lattice over [−1,1]³. Node (i,j,k)
/// sits at −1 + 2·i/(res−1) per axis; index i varies fastest, then j, k.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    pub res: usize,
    pub values: Vec<f64>,
}

impl SdfGrid {
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(k * self.res + j) * self.res + i]
    }

    pub fn node_pos(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let s = 2.0 / (self.res - 1) as f64;
        [-1.0 + s * i as f64, -1.0 + s * j as f64, -1.0 + s * k as f64]
    }

    /// Trilinear interpolation at a world point inside the lattice.
    pub fn trilinear(&self, p: Vec3) -> f64 {
        let s = (self.res - 1) as f64 / 2.0;
        let mut c = [0usize; 3];
        let mut f = [0.0f64; 3];
        for a in 0..3 {
            let x = ((p[a] + 1.0) * s).clamp(0.0, (self.res - 1) as f64);
            let i = (x.floor() as usize).min(self.res - 2);
            c[a] = i;
            f[a] = x - i as f64;
        }
        let mut acc = 0.0;
        for dk in 0..2 {
            for dj in 0..2 {
                for di in 0..2 {
                    let w = (if di == 0 { 1.0 - f[0] } else { f[0] })
                        * (if dj == 0 { 1.0 - f[1] } else { f[1] })
                        * (if dk == 0 { 1.0 - f[2] } else { f[2] });
                    acc += w * self.at(c[0] + di, c[1] + dj, c[2] + dk);
                }
            }
        }
        acc
    }

    /// The grid as a rank-3 tensor (k, j, i), for NTF dumps.
    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![self.res, self.res, self.res], self.values.clone())
    }
}

/// Default query batch for grid evaluation.
pub const GRID_CHUNK: usize = 32768;

/// Evaluates the field on an `res`³ lattice over [−1,1]³ in query chunks.
pub fn eval_grid(field: &impl SdfQuery, res: usize) -> SdfGrid {
    eval_grid_chunked(field, res, GRID_CHUNK)
}

pub fn eval_grid_chunked(field: &impl SdfQuery, res: usize, chunk: usize) -> SdfGrid {
    assert!(res >= 2, "a lattice needs two nodes per axis");
    assert!(chunk >= 1);
    let s = 2.0 / (res - 1) as f64;
    let coord = |i: usize| -1.0 + s * i as f64;
    let mut points = Vec::with_capacity(chunk);
    let mut values = Vec::with_capacity(res * res * res);
    for k in 0..res {
        for j in 0..res {
            for i in 0..res {
                points.push([coord(i), coord(j), coord(k)]);
                if points.len() == chunk {
                    values.extend(field.eval_batch(&points));
                    points.clear();
                }
            }
        }
    }
    if !points.is_empty() {
        values.extend(field.eval_batch(&points));
    }
    SdfGrid { res, values }
}

/// Every directed edge used once, matched by its reverse in another face.
pub fn is_watertight(mesh: &TriMesh) -> bool {
    if mesh.faces.is_empty() {
        return false;
    }
    let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
    for f in &mesh.faces {
        for e in 0..3 {
            let a = f[e];
            let b = f[(e + 1) % 3];
            *directed.entry((a, b)).or_insert(0) += 1;
        }
    }
    directed
        .iter()
        .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
}

/// Corner offsets (dx, dy, dz), classic cube numbering: 0..3 bottom ring,
/// 4..7 top ring.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Cube edges as corner pairs.
const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Face corner cycles, counter-clockwise as seen from outside the cube.
const FACES: [[usize; 4]; 6] = [
    [0, 3, 2, 1], // z = 0
    [4, 5, 6, 7], // z = 1
    [0, 1, 5, 4], // y = 0
    [2, 3, 7, 6], // y = 1
    [0, 4, 7, 3], // x = 0
    [1, 2, 6, 5], // x = 1
];

fn edge_index(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a))
        .expect("corner pair is a cube edge")
}

/// Triangles (as cube-edge triples) for one sign configuration. Bit c of
/// `cfg` set means corner c is negative.
fn triangulate_case(cfg: usize) -> Vec<[u8; 3]> {
    let inside = |c: usize| cfg >> c & 1 == 1;
    // succ[e] = the cut edge the oriented isoline leaves for, from cut edge
    // e, across whichever face enters a negative span at e.
    let mut succ = [usize::MAX; 12];
    for face in &FACES {
        for s in 0..4 {
            let a = face[s];
            let b = face[(s + 1) % 4];
            if !inside(a) && inside(b) {
                // Entering a negative span; walk to where it exits.
                let mut t = s + 1;
                while inside(face[(t + 1) % 4]) {
                    t += 1;
                }
                let exit = edge_index(face[t % 4], face[(t + 1) % 4]);
                succ[edge_index(a, b)] = exit;
            }
        }
    }
    let mut tris = Vec::new();
    let mut seen = [false; 12];
    for start in 0..12 {
        if succ[start] == usize::MAX || seen[start] {
            continue;
        }
        let mut cycle = vec![start];
        seen[start] = true;
        let mut cur = succ[start];
        while cur != start {
            seen[cur] = true;
            cycle.push(cur);
            cur = succ[cur];
        }
        for w in 1..cycle.len() - 1 {
            tris.push([cycle[0] as u8, cycle[w] as u8, cycle[w + 1] as u8]);
        }
    }
    tris
}

/// The 256-entry case table, built on first use.
fn case_table() -> &'static [Vec<[u8; 3]>; 256] {
    static TABLE: OnceLock<[Vec<[u8; 3]>; 256]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(triangulate_case))
}

/// Extracts the level set as a triangle mesh. Vertices sit on linear zero
/// crossings along cube edges and are shared between cells through an
/// edge-keyed merge, so cell visit order fixes vertex numbering.
pub fn marching_cubes(grid: &SdfGrid, level: f64) -> TriMesh {
    assert!(grid.values.iter().all(|v| v.is_finite()), "grid must be finite");
    let r = grid.res;
    let table = case_table();
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    // Global edge key: (axis, i, j, k) of the edge's lower node.
    let mut merged: HashMap<(u8, usize, usize, usize), usize> = HashMap::new();
    for k in 0..r - 1 {
        for j in 0..r - 1 {
            for i in 0..r - 1 {
                let base = [i, j, k];
                let mut cfg = 0usize;
                let mut vals = [0.0; 8];
                for (c, off) in CORNERS.iter().enumerate() {
                    let v = grid.at(i + off[0], j + off[1], k + off[2]);
                    vals[c] = v;
                    if v < level {
                        cfg |= 1 << c;
                    }
                }
                for tri in &table[cfg] {
                    let mut ids = [0usize; 3];
                    for (slot, &e) in tri.iter().enumerate() {
                        let (ca, cb) = EDGES[e as usize];
                        let oa = CORNERS[ca];
                        let ob = CORNERS[cb];
                        let axis = (0..3).find(|&a| oa[a] != ob[a]).unwrap();
                        let lower = if oa[axis] < ob[axis] { oa } else { ob };
                        let key = (
                            axis as u8,
                            base[0] + lower[0],
                            base[1] + lower[1],
                            base[2] + lower[2],
                        );
                        let next_id = vertices.len();
                        ids[slot] = *merged.entry(key).or_insert_with(|| {
                            let (va, vb) = (vals[ca] - level, vals[cb] - level);
                            let t = va / (va - vb);
                            let pa = grid.node_pos(i + oa[0], j + oa[1], k + oa[2]);
                            let pb = grid.node_pos(i + ob[0], j + ob[1], k + ob[2]);
                            vertices.push([
                                pa[0] + t * (pb[0] - pa[0]),
                                pa[1] + t * (pb[1] - pa[1]),
                                pa[2] + t * (pb[2] - pa[2]),
                            ]);
                            next_id
                        });
                    }
                    if ids[0] != ids[1] && ids[1] != ids[2] && ids[2] != ids[0] {
                        faces.push(ids);
                    }
                }
            }
        }
    }
    TriMesh::new(vertices, faces).expect("extraction emits valid faces")
}

/// Mesh summary reported by `reconstruct`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MeshStats {
    pub vertices: usize,
    pub faces: usize,
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
    pub watertight: bool,
}

impl MeshStats {
    pub fn of(mesh: &TriMesh) -> Self {
        let (bbox_min, bbox_max) = if mesh.vertices.is_empty() {
            ([0.0; 3], [0.0; 3])
        } else {
            mesh.bbox()
        };
        Self {
            vertices: mesh.vertices.len(),
            faces: mesh.faces.len(),
            bbox_min,
            bbox_max,
            watertight: is_watertight(mesh),
        }
    }
}

/// Checkpoint → conditioned field → dense grid → mesh. Writes an OBJ when
/// `obj_out` is given; a depth map without foreground is rejected before
/// anything is evaluated or written.
pub fn reconstruct(
    ckpt: &Path,
    image: Option<&ImageMap>,
    normal: Option<&NormalMap>,
    depth: Option<&DepthMap>,
    res: usize,
    obj_out: Option<&Path>,
) -> Result<(TriMesh, MeshStats), MeshError> {
    if let Some(dm) = depth {
        if dm.foreground_count() == 0 {
            return Err(MeshError::EmptyMask);
        }
    }
    let field = ImplicitField::load(ckpt)?;
    let mesh = reconstruct_with_field(&field, image, normal, depth, res)?;
    let stats = MeshStats::of(&mesh);
    if let Some(path) = obj_out {
        mesh.write_obj(path)?;
    }
    Ok((mesh, stats))
}

/// The grid-and-extract stage of [`reconstruct`], for callers that already
/// hold a field.
pub fn reconstruct_with_field(
    field: &ImplicitField,
    image: Option<&ImageMap>,
    normal: Option<&NormalMap>,
    depth: Option<&DepthMap>,
    res: usize,
) -> Result<TriMesh, MeshError> {
    let fm = field.encode_maps(image, normal, depth)?;
    let grid = eval_grid(&FieldQuery { field, fm: &fm }, res);
    Ok(marching_cubes(&grid, 0.0))
}
