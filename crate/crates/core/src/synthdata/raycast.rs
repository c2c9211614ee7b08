//! Orthographic sphere tracing against analytic distance fields.
//!
//! Rays start on the near plane and walk toward the far plane. The step is
//! the current distance value shrunk by the field's Lipschitz bound, so a
//! ray can never cross the surface between evaluations: it either converges
//! onto the zero level set or leaves the volume.

use rand::Rng;

use crate::geometry::{
    v_dot, v_normalize, DepthMap, ImageMap, NormalMap, OrthoCamera, DEPTH_SENTINEL, Z_FAR, Z_NEAR,
};
use crate::seed;

use super::shapes::AnalyticShape;

/// A ray counts as a hit once the distance value drops below this.
pub const RAYCAST_HIT_EPS: f64 = 1e-5;

/// Stall guard for near-tangent rays; such rays are treated as misses.
const MAX_STEPS: usize = 512;

/// Noise amplitude applied per channel to the shaded image.
const IMAGE_NOISE: f64 = 0.1;

/// One rendered view of a shape. All three rasters share the same
/// foreground mask.
#[derive(Debug, Clone)]
pub struct SampleTriplet {
    pub image: ImageMap,
    pub normal: NormalMap,
    pub depth: DepthMap,
}

/// Renders the shape from the fixed front-facing orthographic camera.
///
/// `light_seed` fixes the light direction and the image noise, so the same
/// seed reproduces the triplet bit for bit.
pub fn raycast(shape: &AnalyticShape, camera: &OrthoCamera, light_seed: u64) -> SampleTriplet {
    let w = camera.width;
    let h = camera.height;
    let n = w * h;
    let lipschitz = shape.lipschitz();
    assert!(lipschitz.is_finite() && lipschitz >= 1.0, "bad Lipschitz bound");
    let step_scale = 1.0 / lipschitz;

    let mut rng = seed::rng(light_seed, "raycast-light");
    let light = v_normalize([
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(0.2..1.0),
    ]);

    let mut depth = vec![DEPTH_SENTINEL; n];
    let mut mask = vec![0u8; n];
    let mut normals = vec![0.0f64; 3 * n];
    let mut rgb = vec![0.0f64; 3 * n];

    for v in 0..h {
        for u in 0..w {
            let idx = v * w + u;
            let (x, y) = camera.pixel_center(u, v);
            let mut z = Z_NEAR;
            let mut hit = false;
            for _ in 0..MAX_STEPS {
                let s = shape.sdf([x, y, z]);
                if s.abs() < RAYCAST_HIT_EPS {
                    hit = true;
                    break;
                }
                z -= s * step_scale;
                if z < Z_FAR {
                    break;
                }
            }
            if !hit {
                continue;
            }
            mask[idx] = 1;
            depth[idx] = z;
            let nrm = shape.normal([x, y, z]);
            for c in 0..3 {
                normals[c * n + idx] = nrm[c];
            }
            let shade = v_dot(nrm, light).max(0.0);
            for c in 0..3 {
                let noisy = shade + rng.gen_range(-IMAGE_NOISE..IMAGE_NOISE);
                rgb[c * n + idx] = noisy.clamp(0.0, 1.0);
            }
        }
    }

    SampleTriplet {
        image: ImageMap::new(camera.clone(), rgb, mask.clone()).expect("shaded image invalid"),
        normal: NormalMap::new(camera.clone(), normals, mask.clone())
            .expect("raycast normals invalid"),
        depth: DepthMap::new(camera.clone(), depth, mask).expect("raycast depth invalid"),
    }
}
