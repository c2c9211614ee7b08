//! Analytic SDF primitives, composition trees, and seeded shape sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{v_dist, v_dot, v_norm, v_normalize, v_scale, v_sub, Vec3};
use crate::seed;

/// Shapes must fit inside [-FIT_BOX, FIT_BOX]^3.
pub const FIT_BOX: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    Sphere { center: Vec3, radius: f64 },
    Capsule { a: Vec3, b: Vec3, radius: f64 },
    RoundedBox { center: Vec3, half: Vec3, round: f64 },
    Ellipsoid { center: Vec3, radii: Vec3 },
}

impl Primitive {
    pub fn sdf(&self, p: Vec3) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => v_dist(p, center) - radius,
            Primitive::Capsule { a, b, radius } => {
                let pa = v_sub(p, a);
                let ba = v_sub(b, a);
                let t = (v_dot(pa, ba) / v_dot(ba, ba)).clamp(0.0, 1.0);
                v_norm(v_sub(pa, v_scale(ba, t))) - radius
            }
            Primitive::RoundedBox { center, half, round } => {
                let q = [
                    (p[0] - center[0]).abs() - half[0],
                    (p[1] - center[1]).abs() - half[1],
                    (p[2] - center[2]).abs() - half[2],
                ];
                let outside = [q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)];
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                v_norm(outside) + inside - round
            }
            Primitive::Ellipsoid { center, radii } => {
                // Standard scaled-space approximation; exact on the axes,
                // Lipschitz stays ~1 for the modest aspect ratios we sample.
                let q = v_sub(p, center);
                let k0 = v_norm([q[0] / radii[0], q[1] / radii[1], q[2] / radii[2]]);
                let k1 = v_norm([
                    q[0] / (radii[0] * radii[0]),
                    q[1] / (radii[1] * radii[1]),
                    q[2] / (radii[2] * radii[2]),
                ]);
                if k1 == 0.0 {
                    // Center: distance to the nearest semi-axis end.
                    return -radii[0].min(radii[1]).min(radii[2]);
                }
                k0 * (k0 - 1.0) / k1
            }
        }
    }

    /// Conservative Chebyshev-norm bound on the primitive's extent.
    fn bound(&self) -> f64 {
        fn linf(v: Vec3) -> f64 {
            v[0].abs().max(v[1].abs()).max(v[2].abs())
        }
        match *self {
            Primitive::Sphere { center, radius } => linf(center) + radius,
            Primitive::Capsule { a, b, radius } => linf(a).max(linf(b)) + radius,
            Primitive::RoundedBox { center, half, round } => linf(center) + linf(half) + round,
            Primitive::Ellipsoid { center, radii } => linf(center) + linf(radii),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ShapeNode {
    Prim(Primitive),
    Union(Box<ShapeNode>, Box<ShapeNode>),
    /// Polynomial smooth minimum with blend radius `k`:
    /// `h = clamp(0.5 + 0.5 (b - a)/k, 0, 1); lerp(b, a, h) - k h (1 - h)`.
    /// Never exceeds `min(a, b)` and never dips below `min(a, b) - k/4`.
    SmoothUnion(Box<ShapeNode>, Box<ShapeNode>, f64),
}

impl ShapeNode {
    pub fn sdf(&self, p: Vec3) -> f64 {
        match self {
            ShapeNode::Prim(prim) => prim.sdf(p),
            ShapeNode::Union(l, r) => l.sdf(p).min(r.sdf(p)),
            ShapeNode::SmoothUnion(l, r, k) => {
                let (a, b) = (l.sdf(p), r.sdf(p));
                let h = (0.5 + 0.5 * (b - a) / k).clamp(0.0, 1.0);
                b + (a - b) * h - k * h * (1.0 - h)
            }
        }
    }

    fn bound(&self) -> f64 {
        match self {
            ShapeNode::Prim(prim) => prim.bound(),
            ShapeNode::Union(l, r) => l.bound().max(r.bound()),
            // The smooth blend can push the surface out by at most k/4.
            ShapeNode::SmoothUnion(l, r, k) => l.bound().max(r.bound()) + k / 4.0,
        }
    }

    /// Same tree with every smooth union replaced by a hard union.
    pub fn hardened(&self) -> ShapeNode {
        match self {
            ShapeNode::Prim(p) => ShapeNode::Prim(p.clone()),
            ShapeNode::Union(l, r) => {
                ShapeNode::Union(Box::new(l.hardened()), Box::new(r.hardened()))
            }
            ShapeNode::SmoothUnion(l, r, _) => {
                ShapeNode::Union(Box::new(l.hardened()), Box::new(r.hardened()))
            }
        }
    }
}

/// Radial ripple added to the composed field: `amp * sin(omega * |p|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Displacement {
    pub amp: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticShape {
    pub root: ShapeNode,
    pub displacement: Option<Displacement>,
}

impl AnalyticShape {
    /// Panics if the conservative extent bound exceeds the fit box; the
    /// sampling distributions are ranged so this never fires.
    pub fn new(root: ShapeNode, displacement: Option<Displacement>) -> Self {
        let slack = displacement.map_or(0.0, |d| {
            assert!(d.amp >= 0.0 && d.omega > 0.0, "bad displacement {d:?}");
            assert!(d.amp * d.omega < 1.0, "displacement would destroy sign structure");
            // Surface can move by amp / (1 - amp*omega) along the gradient.
            2.0 * d.amp
        });
        let bound = root.bound() + slack;
        assert!(bound <= FIT_BOX, "shape bound {bound} exceeds fit box {FIT_BOX}");
        Self { root, displacement }
    }

    pub fn sphere(radius: f64) -> Self {
        Self::new(ShapeNode::Prim(Primitive::Sphere { center: [0.0; 3], radius }), None)
    }

    pub fn sdf(&self, p: Vec3) -> f64 {
        let base = self.root.sdf(p);
        match self.displacement {
            Some(d) => base + d.amp * (d.omega * v_norm(p)).sin(),
            None => base,
        }
    }

    /// Upper bound on the field's Lipschitz constant.
    pub fn lipschitz(&self) -> f64 {
        1.0 + self.displacement.map_or(0.0, |d| d.amp * d.omega)
    }

    /// Central-difference gradient, step 1e-4.
    pub fn gradient(&self, p: Vec3) -> Vec3 {
        let h = 1e-4;
        let mut g = [0.0; 3];
        for k in 0..3 {
            let mut hi = p;
            let mut lo = p;
            hi[k] += h;
            lo[k] -= h;
            g[k] = (self.sdf(hi) - self.sdf(lo)) / (2.0 * h);
        }
        g
    }

    /// Projects random volume points onto the zero set by damped Newton
    /// steps; returned points satisfy |sdf| < 1e-7.
    pub fn surface_samples(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(n);
        let mut guard = 0;
        while out.len() < n {
            guard += 1;
            assert!(guard < 100 * n + 1000, "surface projection failed to converge");
            let mut p = [
                rng.gen_range(-FIT_BOX..FIT_BOX),
                rng.gen_range(-FIT_BOX..FIT_BOX),
                rng.gen_range(-FIT_BOX..FIT_BOX),
            ];
            let mut ok = false;
            for _ in 0..40 {
                let s = self.sdf(p);
                if s.abs() < 1e-7 {
                    ok = true;
                    break;
                }
                let g = self.gradient(p);
                let gg = v_dot(g, g);
                if gg < 1e-12 {
                    break;
                }
                // Damping keeps the iteration stable on the rippled fields.
                p = v_sub(p, v_scale(g, 0.8 * s / gg));
            }
            if ok && p.iter().all(|c| c.abs() <= FIT_BOX) {
                out.push(p);
            }
        }
        out
    }

    /// Surface normal (normalized gradient) at a point near the zero set.
    pub fn normal(&self, p: Vec3) -> Vec3 {
        let g = self.gradient(p);
        if v_norm(g) < 1e-8 {
            [0.0, 0.0, 1.0]
        } else {
            v_normalize(g)
        }
    }
}

/// Parameter ranges for seeded shape sampling. Train/test draw from one
/// distribution, the wild split from a deliberately shifted one, so the two
/// populations never share blend or displacement parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeDistribution {
    pub prim_count: (usize, usize),
    pub center_max: f64,
    pub sphere_radius: (f64, f64),
    pub capsule_radius: (f64, f64),
    pub capsule_half_len: (f64, f64),
    pub box_half: (f64, f64),
    pub box_round: f64,
    pub ellipsoid_radius: (f64, f64),
    pub smooth_prob: f64,
    pub blend: (f64, f64),
    pub displacement_prob: f64,
    pub disp_amp: (f64, f64),
    pub disp_omega: (f64, f64),
}

/// Ranges are budgeted so that worst-case primitive extent plus all blend
/// bulges plus displacement slack stays within `FIT_BOX`.
pub fn train_distribution() -> ShapeDistribution {
    ShapeDistribution {
        prim_count: (2, 4),
        center_max: 0.25,
        sphere_radius: (0.25, 0.45),
        capsule_radius: (0.12, 0.2),
        capsule_half_len: (0.12, 0.25),
        box_half: (0.15, 0.33),
        box_round: 0.05,
        ellipsoid_radius: (0.2, 0.4),
        smooth_prob: 0.7,
        blend: (0.05, 0.15),
        displacement_prob: 0.5,
        disp_amp: (0.015, 0.04),
        disp_omega: (6.0, 10.0),
    }
}

/// Shifted mixture: wider blends and a stronger ripple, parts shrunk so the
/// extra bulges still fit the box.
pub fn wild_distribution() -> ShapeDistribution {
    ShapeDistribution {
        prim_count: (3, 4),
        center_max: 0.15,
        sphere_radius: (0.18, 0.3),
        capsule_radius: (0.08, 0.13),
        capsule_half_len: (0.1, 0.18),
        box_half: (0.1, 0.2),
        box_round: 0.04,
        ellipsoid_radius: (0.14, 0.28),
        smooth_prob: 1.0,
        blend: (0.2, 0.32),
        displacement_prob: 1.0,
        disp_amp: (0.04, 0.065),
        disp_omega: (10.0, 14.0),
    }
}

fn sample_center(rng: &mut ChaCha8Rng, m: f64) -> Vec3 {
    [rng.gen_range(-m..m), rng.gen_range(-m..m), rng.gen_range(-m..m)]
}

fn sample_primitive(dist: &ShapeDistribution, rng: &mut ChaCha8Rng) -> Primitive {
    match rng.gen_range(0..4) {
        0 => Primitive::Sphere {
            center: sample_center(rng, dist.center_max),
            radius: rng.gen_range(dist.sphere_radius.0..dist.sphere_radius.1),
        },
        1 => {
            let center = sample_center(rng, dist.center_max);
            let axis = v_normalize([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
            let axis = if v_norm(axis) == 0.0 { [0.0, 0.0, 1.0] } else { axis };
            let half = rng.gen_range(dist.capsule_half_len.0..dist.capsule_half_len.1);
            Primitive::Capsule {
                a: v_sub(center, v_scale(axis, half)),
                b: v_sub(center, v_scale(axis, -half)),
                radius: rng.gen_range(dist.capsule_radius.0..dist.capsule_radius.1),
            }
        }
        2 => Primitive::RoundedBox {
            center: sample_center(rng, dist.center_max),
            half: [
                rng.gen_range(dist.box_half.0..dist.box_half.1),
                rng.gen_range(dist.box_half.0..dist.box_half.1),
                rng.gen_range(dist.box_half.0..dist.box_half.1),
            ],
            round: dist.box_round,
        },
        _ => {
            // Aspect ratio capped at 2 to keep the approximate SDF tame.
            let base = rng.gen_range(dist.ellipsoid_radius.0..dist.ellipsoid_radius.1);
            let r = |rng: &mut ChaCha8Rng| base * rng.gen_range(0.5..1.0);
            Primitive::Ellipsoid {
                center: sample_center(rng, dist.center_max),
                radii: [r(rng), r(rng), r(rng)],
            }
        }
    }
}

/// Deterministic shape draw; all geometry flows from `shape_seed`.
pub fn sample_shape(dist: &ShapeDistribution, shape_seed: u64) -> AnalyticShape {
    let mut rng = seed::rng(shape_seed, "shape-params");
    let count = rng.gen_range(dist.prim_count.0..=dist.prim_count.1);
    let mut node = ShapeNode::Prim(sample_primitive(dist, &mut rng));
    for _ in 1..count {
        let next = ShapeNode::Prim(sample_primitive(dist, &mut rng));
        node = if rng.gen_bool(dist.smooth_prob) {
            let k = rng.gen_range(dist.blend.0..dist.blend.1);
            ShapeNode::SmoothUnion(Box::new(node), Box::new(next), k)
        } else {
            ShapeNode::Union(Box::new(node), Box::new(next))
        };
    }
    let displacement = if rng.gen_bool(dist.displacement_prob) {
        Some(Displacement {
            amp: rng.gen_range(dist.disp_amp.0..dist.disp_amp.1),
            omega: rng.gen_range(dist.disp_omega.0..dist.disp_omega.1),
        })
    } else {
        None
    };
    AnalyticShape::new(node, displacement)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn random_point(rng: &mut ChaCha8Rng, m: f64) -> Vec3 {
        [rng.gen_range(-m..m), rng.gen_range(-m..m), rng.gen_range(-m..m)]
    }

    #[test]
    fn unit_sphere_sdf_at_center_and_outside() {
        let s = AnalyticShape::new(
            ShapeNode::Prim(Primitive::Sphere { center: [0.0; 3], radius: 0.9 }),
            None,
        );
        assert!((s.sdf([0.0; 3]) + 0.9).abs() < 1e-12);
        assert!((s.sdf([1.9, 0.0, 0.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smooth_union_never_exceeds_hard_union() {
        let a = Primitive::Sphere { center: [-0.3, 0.0, 0.0], radius: 0.35 };
        let b = Primitive::Sphere { center: [0.3, 0.0, 0.0], radius: 0.35 };
        let k = 0.12;
        let smooth = ShapeNode::SmoothUnion(
            Box::new(ShapeNode::Prim(a.clone())),
            Box::new(ShapeNode::Prim(b.clone())),
            k,
        );
        let mut r = rng(3);
        for _ in 0..1000 {
            let p = random_point(&mut r, 1.0);
            let hard = a.sdf(p).min(b.sdf(p));
            let s = smooth.sdf(p);
            assert!(s <= hard + 1e-12, "smooth {s} above hard {hard} at {p:?}");
            assert!(s >= hard - k / 4.0 - 1e-12, "bulge beyond k/4 at {p:?}");
            // Far from the blend region the two agree exactly.
            if (a.sdf(p) - b.sdf(p)).abs() > k {
                assert!((s - hard).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampled_shapes_respect_lipschitz_slack() {
        for (dist, base) in [(train_distribution(), 0), (wild_distribution(), 100)] {
            for i in 0..8u64 {
                let shape = sample_shape(&dist, base + i);
                let lip = shape.lipschitz();
                let mut r = rng(1000 + i);
                for _ in 0..400 {
                    let p = random_point(&mut r, 1.2);
                    let q = random_point(&mut r, 1.2);
                    let lhs = (shape.sdf(p) - shape.sdf(q)).abs();
                    assert!(
                        lhs <= lip * v_dist(p, q) + 1e-9,
                        "|ds|={lhs} over dist={} lip={lip}",
                        v_dist(p, q)
                    );
                }
            }
        }
    }

    #[test]
    fn sampled_shapes_fit_inside_the_box() {
        for (dist, base) in [(train_distribution(), 0), (wild_distribution(), 100)] {
            for i in 0..12u64 {
                let shape = sample_shape(&dist, base + i);
                // Positive SDF on the fit-box faces means no surface outside.
                let mut r = rng(2000 + i);
                for _ in 0..200 {
                    let mut p = random_point(&mut r, FIT_BOX);
                    let axis = r.gen_range(0..3);
                    p[axis] = if r.gen_bool(0.5) { FIT_BOX } else { -FIT_BOX };
                    assert!(shape.sdf(p) > 0.0, "surface reaches box face at {p:?}");
                }
            }
        }
    }

    #[test]
    fn surface_samples_sit_on_the_zero_set() {
        let shape = sample_shape(&train_distribution(), 5);
        let mut r = rng(7);
        for p in shape.surface_samples(64, &mut r) {
            assert!(shape.sdf(p).abs() < 1e-7);
        }
    }

    #[test]
    fn displaced_field_keeps_negative_interior() {
        let shape = sample_shape(&wild_distribution(), 11);
        assert!(shape.displacement.is_some());
        // Interior deep point stays inside despite the ripple.
        let mut r = rng(13);
        let deep = shape
            .surface_samples(32, &mut r)
            .into_iter()
            .map(|p| v_scale(p, 0.5))
            .map(|p| shape.sdf(p))
            .fold(f64::INFINITY, f64::min);
        assert!(deep < 0.0, "no interior found");
    }

    #[test]
    fn shape_json_roundtrip() {
        let shape = sample_shape(&wild_distribution(), 42);
        let text = serde_json::to_string(&shape).unwrap();
        let back: AnalyticShape = serde_json::from_str(&text).unwrap();
        assert_eq!(back, shape);
    }

    #[test]
    fn gradient_matches_direction_on_sphere() {
        let s = AnalyticShape::sphere(0.5);
        let g = s.normal([0.3, 0.0, 0.4]);
        let expect = v_normalize([0.3, 0.0, 0.4]);
        assert!(v_dist(g, expect) < 1e-6);
    }
}
