//! Orthographic camera, raster map types, point clouds and triangle meshes.
//!
//! World conventions used by the whole pipeline:
//! - reconstruction volume is the box [-1,1]^3; 1 world unit = 100 cm;
//! - the camera sits at +z looking down -z; rays march from z = +1 to -1;
//! - pixel (u,v) covers a square centered at
//!   x = he*(2(u+0.5)/W - 1), y = he*(1 - 2(v+0.5)/H), row 0 at the top;
//! - depth rasters store the world z-coordinate of the visible surface,
//!   so back-projection is a direct (x(u,v), y(u,v), depth) lookup.

use std::fs::File;
use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::diffcore::{read_ntf_f32, write_ntf, Element, NtfError, Tensor};

pub type Vec3 = [f64; 3];

pub fn v_add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn v_sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn v_scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn v_dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn v_cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn v_norm(a: Vec3) -> f64 {
    v_dot(a, a).sqrt()
}

pub fn v_normalize(a: Vec3) -> Vec3 {
    let n = v_norm(a);
    if n == 0.0 {
        [0.0; 3]
    } else {
        v_scale(a, 1.0 / n)
    }
}

pub fn v_dist(a: Vec3, b: Vec3) -> f64 {
    v_norm(v_sub(a, b))
}

/// Near march bound (camera side).
pub const Z_NEAR: f64 = 1.0;
/// Far march bound.
pub const Z_FAR: f64 = -1.0;
/// Depth value stored at background pixels; outside the valid z-range so an
/// accidental read shows up immediately in range checks.
pub const DEPTH_SENTINEL: f64 = -2.0;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("depth map has no foreground pixels")]
    EmptyMask,
    #[error("mask mismatch: {0}")]
    MaskMismatch(String),
    #[error("invalid {0}")]
    Invalid(String),
    #[error(transparent)]
    File(#[from] NtfError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Orthographic camera over the image rectangle [-he, he]^2, looking down -z.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OrthoCamera {
    pub width: usize,
    pub height: usize,
    pub half_extent: f64,
}

impl OrthoCamera {
    pub fn new(width: usize, height: usize, half_extent: f64) -> Self {
        assert!(width > 0 && height > 0, "degenerate raster");
        assert!(half_extent > 0.0, "half_extent must be positive");
        Self { width, height, half_extent }
    }

    /// World (x, y) of the center of pixel (u, v).
    pub fn pixel_center(&self, u: usize, v: usize) -> (f64, f64) {
        let x = self.half_extent * (2.0 * (u as f64 + 0.5) / self.width as f64 - 1.0);
        let y = self.half_extent * (1.0 - 2.0 * (v as f64 + 0.5) / self.height as f64);
        (x, y)
    }

    /// Continuous pixel coordinates plus z; inverse of `back_project`.
    /// Out-of-frame points simply return out-of-range (u, v).
    pub fn project(&self, p: Vec3) -> (f64, f64, f64) {
        let u = (p[0] / self.half_extent + 1.0) * 0.5 * self.width as f64 - 0.5;
        let v = (1.0 - p[1] / self.half_extent) * 0.5 * self.height as f64 - 0.5;
        (u, v, p[2])
    }

    /// World point of continuous pixel coordinates (u, v) at depth z = d.
    pub fn back_project(&self, u: f64, v: f64, d: f64) -> Vec3 {
        let x = self.half_extent * (2.0 * (u + 0.5) / self.width as f64 - 1.0);
        let y = self.half_extent * (1.0 - 2.0 * (v + 0.5) / self.height as f64);
        [x, y, d]
    }
}

/// World-z depth raster plus foreground mask, row-major, row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub camera: OrthoCamera,
    depth: Vec<f64>,
    mask: Vec<u8>,
}

impl DepthMap {
    /// Background entries of `depth` are overwritten with the sentinel;
    /// foreground entries must lie within [Z_FAR, Z_NEAR].
    pub fn new(camera: OrthoCamera, mut depth: Vec<f64>, mask: Vec<u8>) -> Result<Self, GeomError> {
        let n = camera.width * camera.height;
        if depth.len() != n || mask.len() != n {
            return Err(GeomError::Invalid(format!(
                "raster length {} / {} for {}x{}",
                depth.len(),
                mask.len(),
                camera.width,
                camera.height
            )));
        }
        for i in 0..n {
            if mask[i] != 0 {
                if !(Z_FAR..=Z_NEAR).contains(&depth[i]) {
                    return Err(GeomError::Invalid(format!(
                        "foreground depth {} outside [{Z_FAR}, {Z_NEAR}]",
                        depth[i]
                    )));
                }
            } else {
                depth[i] = DEPTH_SENTINEL;
            }
        }
        Ok(Self { camera, depth, mask })
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.camera.width + u]
    }

    pub fn mask_at(&self, u: usize, v: usize) -> bool {
        self.mask[v * self.camera.width + u] != 0
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn depth_raster(&self) -> &[f64] {
        &self.depth
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }

    pub fn foreground_pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for v in 0..self.camera.height {
            for u in 0..self.camera.width {
                if self.mask_at(u, v) {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// One world point per foreground pixel.
    pub fn back_project(&self) -> Result<PointCloud, GeomError> {
        if self.foreground_count() == 0 {
            return Err(GeomError::EmptyMask);
        }
        let mut points = Vec::new();
        for (u, v) in self.foreground_pixels() {
            let (x, y) = self.camera.pixel_center(u, v);
            points.push([x, y, self.at(u, v)]);
        }
        Ok(PointCloud::new(points))
    }

    /// `[2, H, W]`: depth plane (sentinel at background) then mask plane.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let n = self.depth.len();
        let mut data = Vec::with_capacity(2 * n);
        data.extend(self.depth.iter().map(|&d| T::from_f64(d)));
        data.extend(self.mask.iter().map(|&m| T::from_f64(m as f64)));
        Tensor::new(vec![2, self.camera.height, self.camera.width], data)
    }

    pub fn from_tensor<T: Element>(camera: OrthoCamera, t: &Tensor<T>) -> Result<Self, GeomError> {
        let sh = t.shape();
        if sh != [2, camera.height, camera.width] {
            return Err(GeomError::Invalid(format!("depth tensor shape {sh:?}")));
        }
        let n = camera.width * camera.height;
        let depth: Vec<f64> = t.data()[..n].iter().map(|v| v.to_f64()).collect();
        let mask: Vec<u8> = t.data()[n..].iter().map(|v| (v.to_f64() != 0.0) as u8).collect();
        Self::new(camera, depth, mask)
    }

    pub fn save(&self, path: &Path) -> Result<(), GeomError> {
        Ok(write_ntf(path, &self.to_tensor::<f32>())?)
    }

    pub fn load(path: &Path, half_extent: f64) -> Result<Self, GeomError> {
        let t = read_ntf_f32(path)?;
        let sh = t.shape().to_vec();
        if sh.len() != 3 || sh[0] != 2 {
            return Err(GeomError::Invalid(format!("depth tensor shape {sh:?}")));
        }
        let camera = OrthoCamera::new(sh[2], sh[1], half_extent);
        Self::from_tensor(camera, &t)
    }
}

/// Unit-normal raster stored as channel planes (nx, ny, nz), plus mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub camera: OrthoCamera,
    normals: Vec<f64>,
    mask: Vec<u8>,
}

impl NormalMap {
    /// Foreground normals must be unit length within 1e-5; background
    /// entries are zeroed.
    pub fn new(
        camera: OrthoCamera,
        mut normals: Vec<f64>,
        mask: Vec<u8>,
    ) -> Result<Self, GeomError> {
        let n = camera.width * camera.height;
        if normals.len() != 3 * n || mask.len() != n {
            return Err(GeomError::Invalid("normal raster length".into()));
        }
        for i in 0..n {
            if mask[i] != 0 {
                let len =
                    (normals[i].powi(2) + normals[n + i].powi(2) + normals[2 * n + i].powi(2))
                        .sqrt();
                if (len - 1.0).abs() > 1e-5 {
                    return Err(GeomError::Invalid(format!("foreground normal length {len}")));
                }
            } else {
                normals[i] = 0.0;
                normals[n + i] = 0.0;
                normals[2 * n + i] = 0.0;
            }
        }
        Ok(Self { camera, normals, mask })
    }

    pub fn normal_at(&self, u: usize, v: usize) -> Vec3 {
        let n = self.camera.width * self.camera.height;
        let i = v * self.camera.width + u;
        [self.normals[i], self.normals[n + i], self.normals[2 * n + i]]
    }

    pub fn mask_at(&self, u: usize, v: usize) -> bool {
        self.mask[v * self.camera.width + u] != 0
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn planes(&self) -> &[f64] {
        &self.normals
    }

    /// `[4, H, W]`: nx, ny, nz, mask.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let mut data: Vec<T> = self.normals.iter().map(|&v| T::from_f64(v)).collect();
        data.extend(self.mask.iter().map(|&m| T::from_f64(m as f64)));
        Tensor::new(vec![4, self.camera.height, self.camera.width], data)
    }

    pub fn from_tensor<T: Element>(camera: OrthoCamera, t: &Tensor<T>) -> Result<Self, GeomError> {
        let sh = t.shape();
        if sh != [4, camera.height, camera.width] {
            return Err(GeomError::Invalid(format!("normal tensor shape {sh:?}")));
        }
        let n = camera.width * camera.height;
        let normals: Vec<f64> = t.data()[..3 * n].iter().map(|v| v.to_f64()).collect();
        let mask: Vec<u8> =
            t.data()[3 * n..].iter().map(|v| (v.to_f64() != 0.0) as u8).collect();
        Self::new(camera, normals, mask)
    }

    pub fn save(&self, path: &Path) -> Result<(), GeomError> {
        Ok(write_ntf(path, &self.to_tensor::<f32>())?)
    }

    pub fn load(path: &Path, half_extent: f64) -> Result<Self, GeomError> {
        let t = read_ntf_f32(path)?;
        let sh = t.shape().to_vec();
        if sh.len() != 3 || sh[0] != 4 {
            return Err(GeomError::Invalid(format!("normal tensor shape {sh:?}")));
        }
        let camera = OrthoCamera::new(sh[2], sh[1], half_extent);
        Self::from_tensor(camera, &t)
    }
}

/// Shaded RGB raster in [0,1], channel planes, background zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMap {
    pub camera: OrthoCamera,
    rgb: Vec<f64>,
    mask: Vec<u8>,
}

impl ImageMap {
    pub fn new(camera: OrthoCamera, mut rgb: Vec<f64>, mask: Vec<u8>) -> Result<Self, GeomError> {
        let n = camera.width * camera.height;
        if rgb.len() != 3 * n || mask.len() != n {
            return Err(GeomError::Invalid("image raster length".into()));
        }
        for i in 0..n {
            if mask[i] != 0 {
                for c in 0..3 {
                    let v = rgb[c * n + i];
                    if !(0.0..=1.0).contains(&v) {
                        return Err(GeomError::Invalid(format!("image value {v} outside [0,1]")));
                    }
                }
            } else {
                for c in 0..3 {
                    rgb[c * n + i] = 0.0;
                }
            }
        }
        Ok(Self { camera, rgb, mask })
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn planes(&self) -> &[f64] {
        &self.rgb
    }

    /// `[3, H, W]`.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let data = self.rgb.iter().map(|&v| T::from_f64(v)).collect();
        Tensor::new(vec![3, self.camera.height, self.camera.width], data)
    }

    pub fn from_tensor<T: Element>(
        camera: OrthoCamera,
        t: &Tensor<T>,
        mask: Vec<u8>,
    ) -> Result<Self, GeomError> {
        let sh = t.shape();
        if sh != [3, camera.height, camera.width] {
            return Err(GeomError::Invalid(format!("image tensor shape {sh:?}")));
        }
        let rgb = t.data().iter().map(|v| v.to_f64()).collect();
        Self::new(camera, rgb, mask)
    }

    pub fn save(&self, path: &Path) -> Result<(), GeomError> {
        Ok(write_ntf(path, &self.to_tensor::<f32>())?)
    }

    pub fn load(path: &Path, half_extent: f64, mask: Vec<u8>) -> Result<Self, GeomError> {
        let t = read_ntf_f32(path)?;
        let sh = t.shape().to_vec();
        if sh.len() != 3 || sh[0] != 3 {
            return Err(GeomError::Invalid(format!("image tensor shape {sh:?}")));
        }
        let camera = OrthoCamera::new(sh[2], sh[1], half_extent);
        Self::from_tensor(camera, &t, mask)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub labels: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        assert!(
            points.iter().all(|p| p.iter().all(|c| c.is_finite())),
            "non-finite point coordinate"
        );
        Self { points, labels: None }
    }

    pub fn with_labels(points: Vec<Vec3>, labels: Vec<f64>) -> Self {
        assert_eq!(points.len(), labels.len(), "label count mismatch");
        let mut pc = Self::new(points);
        assert!(labels.iter().all(|l| l.is_finite()), "non-finite label");
        pc.labels = Some(labels);
        pc
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl TriMesh {
    /// Validates index bounds and rejects faces with repeated vertices.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self, GeomError> {
        for p in &vertices {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(GeomError::Invalid("non-finite vertex".into()));
            }
        }
        for f in &faces {
            if f.iter().any(|&i| i >= vertices.len()) {
                return Err(GeomError::Invalid(format!("face index out of range: {f:?}")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(GeomError::Invalid(format!("degenerate face {f:?}")));
            }
        }
        Ok(Self { vertices, faces })
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f];
        let ab = v_sub(self.vertices[b], self.vertices[a]);
        let ac = v_sub(self.vertices[c], self.vertices[a]);
        0.5 * v_norm(v_cross(ab, ac))
    }

    /// Signed volume via the divergence theorem; positive when face normals
    /// (right-hand winding) point outward.
    pub fn signed_volume(&self) -> f64 {
        let mut vol = 0.0;
        for &[a, b, c] in &self.faces {
            let (a, b, c) = (self.vertices[a], self.vertices[b], self.vertices[c]);
            vol += v_dot(a, v_cross(b, c)) / 6.0;
        }
        vol
    }

    pub fn bbox(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    /// Area-weighted surface samples; deterministic given the rng state.
    pub fn sample_surface(&self, n: usize, rng: &mut impl Rng) -> PointCloud {
        assert!(!self.faces.is_empty(), "cannot sample an empty mesh");
        let mut cum = Vec::with_capacity(self.faces.len());
        let mut total = 0.0;
        for f in 0..self.faces.len() {
            total += self.face_area(f);
            cum.push(total);
        }
        assert!(total > 0.0, "mesh has zero area");
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let t = rng.gen::<f64>() * total;
            let f = cum.partition_point(|&c| c < t).min(self.faces.len() - 1);
            let [a, b, c] = self.faces[f];
            let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
            let s = r1.sqrt();
            let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
            let p = v_add(
                v_add(v_scale(self.vertices[a], wa), v_scale(self.vertices[b], wb)),
                v_scale(self.vertices[c], wc),
            );
            points.push(p);
        }
        PointCloud::new(points)
    }

    /// ASCII OBJ with v/f records only, 1-based indices.
    pub fn write_obj(&self, path: &Path) -> Result<(), GeomError> {
        let mut w = BufWriter::new(File::create(path)?);
        for p in &self.vertices {
            writeln!(w, "v {} {} {}", p[0], p[1], p[2])?;
        }
        for f in &self.faces {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn principal_point_back_projects_to_axis() {
        let cam = OrthoCamera::new(1, 1, 1.0);
        let dm = DepthMap::new(cam, vec![0.5], vec![1]).unwrap();
        let pc = dm.back_project().unwrap();
        assert_eq!(pc.points, vec![[0.0, 0.0, 0.5]]);
    }

    #[test]
    fn corner_pixel_of_4x4_maps_to_three_quarters() {
        let cam = OrthoCamera::new(4, 4, 1.0);
        let p = cam.back_project(0.0, 0.0, 0.25);
        assert_eq!(p, [-0.75, 0.75, 0.25]);
    }

    #[test]
    fn world_origin_projects_to_image_center() {
        let cam = OrthoCamera::new(4, 4, 1.0);
        let (u, v, z) = cam.project([0.0, 0.0, 0.3]);
        assert_eq!((u, v, z), (1.5, 1.5, 0.3));
    }

    #[test]
    fn right_edge_projects_to_width_minus_half() {
        let cam = OrthoCamera::new(7, 5, 2.0);
        let (u, _, _) = cam.project([2.0, 0.0, 0.0]);
        assert!((u - 6.5).abs() < 1e-12);
    }

    #[test]
    fn doubling_half_extent_doubles_xy_keeps_z() {
        let a = OrthoCamera::new(16, 16, 1.0);
        let b = OrthoCamera::new(16, 16, 2.0);
        let pa = a.back_project(3.0, 11.0, 0.4);
        let pb = b.back_project(3.0, 11.0, 0.4);
        assert!((pb[0] - 2.0 * pa[0]).abs() < 1e-12);
        assert!((pb[1] - 2.0 * pa[1]).abs() < 1e-12);
        assert_eq!(pa[2], pb[2]);
    }

    proptest! {
        #[test]
        fn project_inverts_back_project(
            u in 0usize..32, v in 0usize..32, d in -1.0f64..1.0,
            he in 0.5f64..3.0,
        ) {
            let cam = OrthoCamera::new(32, 32, he);
            let p = cam.back_project(u as f64, v as f64, d);
            let (pu, pv, pz) = cam.project(p);
            prop_assert!((pu - u as f64).abs() < 1e-9);
            prop_assert!((pv - v as f64).abs() < 1e-9);
            prop_assert_eq!(pz, d);
        }

        #[test]
        fn depth_map_tensor_roundtrip(seed in 0u64..1000) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cam = OrthoCamera::new(6, 5, 1.0);
            let n = 30;
            let mask: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.6) as u8).collect();
            let depth: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dm = DepthMap::new(cam, depth, mask).unwrap();
            let back = DepthMap::from_tensor(cam, &dm.to_tensor::<f64>()).unwrap();
            prop_assert_eq!(back, dm);
        }
    }

    #[test]
    fn foreground_depth_outside_range_is_rejected() {
        let cam = OrthoCamera::new(2, 1, 1.0);
        assert!(DepthMap::new(cam, vec![1.5, 0.0], vec![1, 1]).is_err());
        // Same value at background is fine: it is replaced by the sentinel.
        let dm = DepthMap::new(cam, vec![1.5, 0.0], vec![0, 1]).unwrap();
        assert_eq!(dm.at(0, 0), DEPTH_SENTINEL);
    }

    #[test]
    fn empty_mask_back_projection_errors() {
        let cam = OrthoCamera::new(2, 2, 1.0);
        let dm = DepthMap::new(cam, vec![0.0; 4], vec![0; 4]).unwrap();
        assert!(matches!(dm.back_project(), Err(GeomError::EmptyMask)));
    }

    #[test]
    fn non_unit_foreground_normal_is_rejected() {
        let cam = OrthoCamera::new(1, 1, 1.0);
        assert!(NormalMap::new(cam, vec![0.5, 0.5, 0.5], vec![1]).is_err());
        assert!(NormalMap::new(cam, vec![0.0, 0.0, 1.0], vec![1]).is_ok());
        // Background junk is zeroed, not validated.
        let nm = NormalMap::new(cam, vec![5.0, 5.0, 5.0], vec![0]).unwrap();
        assert_eq!(nm.normal_at(0, 0), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn normal_map_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cam = OrthoCamera::new(2, 2, 1.0);
        let s = 1.0 / 3f64.sqrt();
        let mut planes = vec![0.0; 12];
        for i in 0..4 {
            planes[i] = s;
            planes[4 + i] = s;
            planes[8 + i] = s;
        }
        let nm = NormalMap::new(cam, planes, vec![1, 1, 0, 1]).unwrap();
        let path = dir.path().join("n.ntf");
        nm.save(&path).unwrap();
        let back = NormalMap::load(&path, 1.0).unwrap();
        assert_eq!(back.mask(), nm.mask());
        for (a, b) in back.planes().iter().zip(nm.planes()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mesh_rejects_bad_indices_and_degenerate_faces() {
        let verts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert!(TriMesh::new(verts.clone(), vec![[0, 1, 3]]).is_err());
        assert!(TriMesh::new(verts.clone(), vec![[0, 1, 1]]).is_err());
        assert!(TriMesh::new(verts, vec![[0, 1, 2]]).is_ok());
    }

    #[test]
    fn tetrahedron_volume_and_obj_output() {
        let verts = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ];
        // Outward-wound unit tetrahedron.
        let faces = vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]];
        let mesh = TriMesh::new(verts, faces).unwrap();
        assert!((mesh.signed_volume() - 1.0 / 6.0).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tet.obj");
        mesh.write_obj(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 8);
        assert!(text.starts_with("v 0 0 0\n"));
        assert!(text.contains("\nf 1 3 2\n"));
    }

    #[test]
    fn surface_samples_lie_on_faces() {
        use rand::SeedableRng;
        let verts = vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let mesh = TriMesh::new(verts, vec![[0, 1, 2]]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let pc = mesh.sample_surface(256, &mut rng);
        for p in &pc.points {
            assert_eq!(p[2], 0.0);
            assert!(p[0] >= 0.0 && p[1] >= 0.0 && p[0] + p[1] <= 2.0 + 1e-12, "{p:?}");
        }
    }
}
