//! Procedural ray-cast scenes with exact semantic, depth and normal targets.
//!
//! Camera frame: pinhole at the origin looking down +z, +y up, +x right.
//! The floor is the plane y = -1 and the back wall the plane z = d_max.
//! Stored normals are analytic outward surface normals, so visible surfaces
//! satisfy n · ray_dir <= 0 (the wall normal is (0, 0, -1)).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix, Rng};

pub type Vec3 = [f64; 3];

pub const CLASS_NAMES: [&str; 4] = ["back_wall", "floor", "sphere", "box"];
pub const WALL: u8 = 0;
pub const FLOOR: u8 = 1;
pub const SPHERE: u8 = 2;
pub const BOX: u8 = 3;

const ALBEDO: [Vec3; 4] = [
    [0.75, 0.72, 0.65],
    [0.55, 0.42, 0.30],
    [0.85, 0.25, 0.20],
    [0.20, 0.40, 0.85],
];
const AMBIENT: f64 = 0.3;
const T_MIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Image height and width in pixels.
    pub size: usize,
    pub min_primitives: usize,
    pub max_primitives: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub num_classes: usize,
    /// Unit vector pointing toward the light.
    pub light_dir: Vec3,
    pub noise_std: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 64,
            min_primitives: 1,
            max_primitives: 4,
            d_min: 0.5,
            d_max: 10.0,
            num_classes: CLASS_NAMES.len(),
            light_dir: normalize([-0.5, 0.8, -0.6]),
            noise_std: 0.01,
        }
    }
}

impl SceneConfig {
    pub fn with_size(size: usize) -> Self {
        SceneConfig {
            size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.d_min && self.d_min < self.d_max) {
            return Err(Error::contract(format!(
                "depth range must satisfy 0 < d_min < d_max, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        if self.size < 16 {
            return Err(Error::contract(format!("image size {} below 16", self.size)));
        }
        if (norm(self.light_dir) - 1.0).abs() > 1e-6 {
            return Err(Error::contract("light direction must be a unit vector"));
        }
        if self.num_classes != CLASS_NAMES.len() {
            return Err(Error::contract(format!(
                "class count is fixed at {}",
                CLASS_NAMES.len()
            )));
        }
        if self.min_primitives < 1 || self.min_primitives > self.max_primitives {
            return Err(Error::contract("primitive count range must be 1 <= min <= max"));
        }
        if self.noise_std < 0.0 {
            return Err(Error::contract("noise_std must be non-negative"));
        }
        Ok(())
    }

    pub fn focal(&self) -> f64 {
        (self.size as f64 / 2.0) / 30f64.to_radians().tan()
    }

    /// Unit ray direction through the center of pixel (row, col).
    pub fn ray_dir(&self, row: usize, col: usize) -> Vec3 {
        let half = self.size as f64 / 2.0;
        let f = self.focal();
        normalize([
            (col as f64 + 0.5 - half) / f,
            -(row as f64 + 0.5 - half) / f,
            1.0,
        ])
    }
}

/// One rendered scene. Images and normals are row-major `H×W×3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
    pub depth: Vec<f32>,
    pub normal: Vec<f32>,
}

impl Sample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Sphere { center: Vec3, radius: f64 },
    Cuboid { min: Vec3, max: Vec3 },
}

impl Primitive {
    pub fn class(&self) -> u8 {
        match self {
            Primitive::Sphere { .. } => SPHERE,
            Primitive::Cuboid { .. } => BOX,
        }
    }

    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<Hit> {
        match *self {
            Primitive::Sphere { center, radius } => ray_sphere(origin, dir, center, radius),
            Primitive::Cuboid { min, max } => ray_box(origin, dir, min, max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

impl Scene {
    /// Samples the primitive layout for `(seed, index)`; objects rest on the floor.
    pub fn sample(rng: &mut Rng, cfg: &SceneConfig) -> Scene {
        let span = (cfg.max_primitives - cfg.min_primitives + 1) as u64;
        let count = cfg.min_primitives + rng.below(span) as usize;
        let half_fov = 30f64.to_radians().tan();
        let primitives = (0..count)
            .map(|_| {
                let sphere = rng.next_f64() < 0.5;
                let z = rng.uniform(2.5, 0.8 * cfg.d_max);
                let x = rng.uniform(-0.45, 0.45) * 2.0 * z * half_fov;
                if sphere {
                    let r = rng.uniform(0.35, 0.9);
                    Primitive::Sphere {
                        center: [x, -1.0 + r, z],
                        radius: r,
                    }
                } else {
                    let hx = rng.uniform(0.3, 0.8);
                    let hy = rng.uniform(0.3, 1.0);
                    let hz = rng.uniform(0.3, 0.8);
                    Primitive::Cuboid {
                        min: [x - hx, -1.0, z - hz],
                        max: [x + hx, -1.0 + 2.0 * hy, z + hz],
                    }
                }
            })
            .collect();
        Scene { primitives }
    }

    /// Nearest surface along the ray: (t, normal, class).
    pub fn trace(&self, dir: Vec3, cfg: &SceneConfig) -> (f64, Vec3, u8) {
        let origin = [0.0; 3];
        // the wall is always hit for forward rays
        let mut best = (cfg.d_max / dir[2], [0.0, 0.0, -1.0], WALL);
        if dir[1] < -1e-12 {
            let t = -1.0 / dir[1];
            if t < best.0 {
                best = (t, [0.0, 1.0, 0.0], FLOOR);
            }
        }
        for p in &self.primitives {
            if let Some(hit) = p.intersect(origin, dir) {
                if hit.t < best.0 {
                    best = (hit.t, hit.normal, p.class());
                }
            }
        }
        best
    }

    /// Ray-casts every pixel; `noise` supplies the image noise.
    pub fn render(&self, cfg: &SceneConfig, noise: &mut Rng) -> Sample {
        let (h, w) = (cfg.size, cfg.size);
        let mut s = Sample {
            height: h,
            width: w,
            image: Vec::with_capacity(h * w * 3),
            labels: Vec::with_capacity(h * w),
            depth: Vec::with_capacity(h * w),
            normal: Vec::with_capacity(h * w * 3),
        };
        for row in 0..h {
            for col in 0..w {
                let dir = cfg.ray_dir(row, col);
                let (t, n, class) = self.trace(dir, cfg);
                let z = (t * dir[2]).clamp(cfg.d_min, cfg.d_max);
                let shade = AMBIENT + (1.0 - AMBIENT) * dot(n, cfg.light_dir).max(0.0);
                let albedo = ALBEDO[class as usize];
                for a in albedo {
                    let v = a * shade + cfg.noise_std * noise.normal();
                    s.image.push(v.clamp(0.0, 1.0) as f32);
                }
                s.labels.push(class);
                s.depth.push(z as f32);
                s.normal.extend(n.iter().map(|&v| v as f32));
            }
        }
        s
    }
}

/// Nearest intersection with t > 1e-6 of a ray with a sphere.
pub fn ray_sphere(origin: Vec3, dir: Vec3, center: Vec3, radius: f64) -> Option<Hit> {
    let oc = sub(origin, center);
    let b = dot(oc, dir);
    let c = dot(oc, oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t = [-b - s, -b + s].into_iter().find(|&t| t > T_MIN)?;
    let p = add(origin, scale(dir, t));
    Some(Hit {
        t,
        normal: scale(sub(p, center), 1.0 / radius),
    })
}

/// Slab-method nearest positive hit with an axis-aligned box. The normal is
/// the face normal; ties between axes resolve in x, y, z order.
pub fn ray_box(origin: Vec3, dir: Vec3, min: Vec3, max: Vec3) -> Option<Hit> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = None;
    let mut far_axis = None;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < min[a] || origin[a] > max[a] {
                return None;
            }
            continue;
        }
        let t1 = (min[a] - origin[a]) / dir[a];
        let t2 = (max[a] - origin[a]) / dir[a];
        let (enter, exit) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        if enter > t_near {
            t_near = enter;
            near_axis = Some(a);
        }
        if exit < t_far {
            t_far = exit;
            far_axis = Some(a);
        }
    }
    if t_near > t_far || t_far <= T_MIN {
        return None;
    }
    let (t, axis, sign) = if t_near > T_MIN {
        (t_near, near_axis?, -dir[near_axis?].signum())
    } else {
        (t_far, far_axis?, dir[far_axis?].signum())
    };
    let mut normal = [0.0; 3];
    normal[axis] = sign;
    Some(Hit { t, normal })
}

/// Pure function of `(seed, index, cfg)`.
pub fn generate_sample(seed: u64, index: u64, cfg: &SceneConfig) -> Sample {
    let mut rng = Rng::new(mix(seed ^ mix(index)));
    let scene = Scene::sample(&mut rng, cfg);
    scene.render(cfg, &mut rng)
}

pub fn generate_split(seed: u64, count: usize, cfg: &SceneConfig) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::contract("split count must be at least 1"));
    }
    cfg.validate()?;
    Ok((0..count as u64).map(|i| generate_sample(seed, i, cfg)).collect())
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: Vec3, b: Vec3, tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() <= tol)
    }

    #[test]
    fn sphere_front_hit() {
        let h = ray_sphere([0.0; 3], [0.0, 0.0, 1.0], [0.0, 0.0, 5.0], 1.0).unwrap();
        assert!((h.t - 4.0).abs() < 1e-12);
        assert!(approx(h.normal, [0.0, 0.0, -1.0], 1e-12));
    }

    #[test]
    fn sphere_miss() {
        assert!(ray_sphere([0.0; 3], [0.0, 0.0, 1.0], [10.0, 0.0, 5.0], 1.0).is_none());
    }

    #[test]
    fn sphere_from_center_exits() {
        let d = normalize([0.3, -0.2, 0.9]);
        let c = [1.0, 2.0, 3.0];
        let h = ray_sphere(c, d, c, 1.0).unwrap();
        assert!((h.t - 1.0).abs() < 1e-12);
        assert!(approx(h.normal, d, 1e-12));
    }

    #[test]
    fn box_front_face() {
        let h = ray_box([0.0; 3], [0.0, 0.0, 1.0], [-0.5, -0.5, 4.5], [0.5, 0.5, 5.5]).unwrap();
        assert!((h.t - 4.5).abs() < 1e-12);
        assert_eq!(h.normal, [0.0, 0.0, -1.0]);
    }

    #[test]
    fn box_parallel_outside_slab_misses() {
        assert!(ray_box([0.0, 2.0, 0.0], [0.0, 0.0, 1.0], [-0.5, -0.5, 4.5], [0.5, 0.5, 5.5]).is_none());
    }

    #[test]
    fn box_corner_tie_prefers_x() {
        // enters the x and y slabs at the same t
        let d = normalize([1.0, 1.0, 0.0]);
        let h = ray_box([0.0; 3], d, [1.0, 1.0, -1.0], [2.0, 2.0, 1.0]).unwrap();
        assert_eq!(h.normal, [-1.0, 0.0, 0.0]);
    }

    #[test]
    fn box_hit_from_inside_exits() {
        let h = ray_box([0.0; 3], [0.0, 1.0, 0.0], [-1.0; 3], [1.0; 3]).unwrap();
        assert!((h.t - 1.0).abs() < 1e-12);
        assert_eq!(h.normal, [0.0, 1.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        assert!(SceneConfig::default().validate().is_ok());
        let mut c = SceneConfig::default();
        c.d_min = 11.0;
        assert!(c.validate().is_err());
        let c = SceneConfig::with_size(8);
        assert!(c.validate().is_err());
        let mut c = SceneConfig::default();
        c.light_dir = [1.0, 1.0, 0.0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn wall_only_pixels() {
        let cfg = SceneConfig::default();
        let s = Scene { primitives: vec![] }.render(&cfg, &mut Rng::new(0));
        // top row sees only the back wall
        for col in 0..cfg.size {
            assert_eq!(s.labels[col], WALL);
            assert_eq!(s.depth[col], cfg.d_max as f32);
            assert_eq!(&s.normal[col * 3..col * 3 + 3], &[0.0, 0.0, -1.0]);
        }
        // bottom row sees the floor
        let last = (cfg.size - 1) * cfg.size;
        assert_eq!(s.labels[last], FLOOR);
    }

    #[test]
    fn known_sphere_matches_closed_form() {
        let cfg = SceneConfig::default();
        let center = [0.0, -0.2, 4.0];
        let scene = Scene {
            primitives: vec![Primitive::Sphere { center, radius: 0.8 }],
        };
        let s = scene.render(&cfg, &mut Rng::new(0));
        let (row, col) = (cfg.size / 2, cfg.size / 2);
        let dir = cfg.ray_dir(row, col);
        let hit = ray_sphere([0.0; 3], dir, center, 0.8).unwrap();
        let p = row * cfg.size + col;
        assert_eq!(s.labels[p], SPHERE);
        assert!((s.depth[p] as f64 - hit.t * dir[2]).abs() < 1e-5);
        for k in 0..3 {
            assert!((s.normal[p * 3 + k] as f64 - hit.normal[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic_and_pure() {
        let cfg = SceneConfig::with_size(32);
        assert_eq!(generate_sample(7, 3, &cfg), generate_sample(7, 3, &cfg));
        let split = generate_split(7, 4, &cfg).unwrap();
        assert_eq!(split.len(), 4);
        assert_eq!(split[2], generate_sample(7, 2, &cfg));
        assert!(generate_split(7, 0, &cfg).is_err());
    }

    #[test]
    fn seeds_change_label_histograms() {
        let cfg = SceneConfig::with_size(32);
        let hist = |seed| {
            let mut h = [0usize; 4];
            for s in generate_split(seed, 8, &cfg).unwrap() {
                for &l in &s.labels {
                    h[l as usize] += 1;
                }
            }
            h
        };
        assert_ne!(hist(1), hist(2));
    }

    #[test]
    fn targets_satisfy_invariants() {
        let cfg = SceneConfig::with_size(32);
        for s in generate_split(99, 120, &cfg).unwrap() {
            for p in 0..s.pixels() {
                let n = &s.normal[p * 3..p * 3 + 3];
                let len = n.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                assert!((len - 1.0).abs() < 1e-5);
                let d = s.depth[p] as f64;
                assert!(d >= cfg.d_min && d <= cfg.d_max);
                assert!((s.labels[p] as usize) < cfg.num_classes);
                assert!(s.image[p * 3..p * 3 + 3].iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn depth_gradient_normals_agree_on_planes() {
        let cfg = SceneConfig::default();
        let f = cfg.focal();
        let half = cfg.size as f64 / 2.0;
        let point = |s: &Sample, r: usize, c: usize| -> Vec3 {
            let z = s.depth[r * cfg.size + c] as f64;
            [
                z * (c as f64 + 0.5 - half) / f,
                -z * (r as f64 + 0.5 - half) / f,
                z,
            ]
        };
        let mut checked = 0;
        for s in generate_split(5, 10, &cfg).unwrap() {
            for r in 1..cfg.size - 1 {
                for c in 1..cfg.size - 1 {
                    let p = r * cfg.size + c;
                    if s.labels[p] == SPHERE {
                        continue;
                    }
                    // 3x3 neighbourhood on one planar face
                    let same = (r - 1..=r + 1).all(|rr| {
                        (c - 1..=c + 1).all(|cc| {
                            let q = rr * cfg.size + cc;
                            s.labels[q] == s.labels[p] && s.normal[q * 3..q * 3 + 3] == s.normal[p * 3..p * 3 + 3]
                        })
                    });
                    if !same {
                        continue;
                    }
                    let dx = sub(point(&s, r, c + 1), point(&s, r, c - 1));
                    let dy = sub(point(&s, r - 1, c), point(&s, r + 1, c));
                    let mut n = normalize(cross(dx, dy));
                    if dot(n, cfg.ray_dir(r, c)) > 0.0 {
                        n = scale(n, -1.0);
                    }
                    let stored = [
                        s.normal[p * 3] as f64,
                        s.normal[p * 3 + 1] as f64,
                        s.normal[p * 3 + 2] as f64,
                    ];
                    let angle = dot(n, stored).clamp(-1.0, 1.0).acos().to_degrees();
                    assert!(angle < 5.0, "pixel ({r},{c}) label {} off by {angle}°", s.labels[p]);
                    checked += 1;
                }
            }
        }
        assert!(checked > 10_000);
    }
}
