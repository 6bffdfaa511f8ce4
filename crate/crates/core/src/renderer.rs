//! Deterministic CPU ray tracer: one point light, hard shadows, no bounces.
//!
//! Each pixel is `ambient · albedo + visible · I · color ⊙ (diffuse + specular) · falloff`
//! where diffuse is Oren–Nayar weighted by the incidence cosine and falloff
//! is `(35 / d)²`. Intensity is applied last so scaling it scales pixels
//! exactly.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{LumenError, Result};
use crate::scenegen::{CameraSpec, ObjectSpec, PrimitiveKind, RoomSpec, SceneSpec, Specular, WallTexture};

type V3 = Vector3<f64>;

/// Smallest accepted hit distance.
pub const T_MIN: f64 = 1e-4;
/// Light distance at which falloff is 1.
pub const FALLOFF_REFERENCE: f64 = 35.0;
pub const DEFAULT_AMBIENT: f64 = 0.03;
pub const MIN_RENDER_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: V3,
    /// Unit length.
    pub dir: V3,
}

impl Ray {
    pub fn new(origin: V3, dir: V3) -> Self {
        Self { origin, dir: dir.normalize() }
    }

    pub fn at(&self, t: f64) -> V3 {
        self.origin + self.dir * t
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Material {
    pub albedo: [f64; 3],
    /// Oren–Nayar σ in radians.
    pub roughness: f64,
    pub specular: Option<Specular>,
}

/// What a primary ray landed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Floor,
    Wall(usize),
    Object(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: V3,
    /// Unit normal facing the ray origin.
    pub normal: V3,
    pub material: Material,
    pub surface: Surface,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub data: Vec<f64>,
}

impl LinearImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }
}

/// Rec. 709 luminance of linear RGB.
pub fn luminance(c: [f64; 3]) -> f64 {
    0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2]
}

/// Camera basis: `right` and `up` span the image plane, `forward` is the optical axis.
#[derive(Clone, Copy, Debug)]
pub struct CameraFrame {
    pub position: V3,
    pub forward: V3,
    pub right: V3,
    pub up: V3,
    pub tan_half_vfov: f64,
}

impl CameraFrame {
    pub fn new(camera: &CameraSpec) -> Self {
        let position = camera.pose.position();
        let forward = (V3::from(camera.look_at) - position).normalize();
        // zenithal cameras fall back to +y as the image-up hint
        let hint = if forward.cross(&V3::z()).norm() < 1e-12 { V3::y() } else { V3::z() };
        let right = forward.cross(&hint).normalize();
        let up = right.cross(&forward);
        Self { position, forward, right, up, tan_half_vfov: (0.5 * camera.vfov).to_radians().tan() }
    }

    /// Ray through continuous image coordinates; pixel `(i, j)` covers `[i, i+1) × [j, j+1)`.
    pub fn ray_at(&self, x: f64, y: f64, w: usize, h: usize) -> Ray {
        let aspect = w as f64 / h as f64;
        let sx = (2.0 * x / w as f64 - 1.0) * self.tan_half_vfov * aspect;
        let sy = (1.0 - 2.0 * y / h as f64) * self.tan_half_vfov;
        Ray::new(self.position, self.forward + self.right * sx + self.up * sy)
    }

    /// Continuous image coordinates of a world point in front of the camera.
    pub fn project(&self, p: &V3, w: usize, h: usize) -> Option<(f64, f64)> {
        let d = p - self.position;
        let z = d.dot(&self.forward);
        if z <= 0.0 {
            return None;
        }
        let sx = d.dot(&self.right) / z / (self.tan_half_vfov * w as f64 / h as f64);
        let sy = d.dot(&self.up) / z / self.tan_half_vfov;
        Some(((sx + 1.0) * 0.5 * w as f64, (1.0 - sy) * 0.5 * h as f64))
    }
}

/// Pinhole ray through the center of pixel `(px, py)`.
pub fn camera_ray(camera: &CameraSpec, px: usize, py: usize, w: usize, h: usize) -> Ray {
    CameraFrame::new(camera).ray_at(px as f64 + 0.5, py as f64 + 0.5, w, h)
}

/// An object with its world transform `p = R·S·local + c` precomputed.
#[derive(Clone, Debug)]
pub struct PreparedObject {
    kind: PrimitiveKind,
    center: V3,
    rot: Matrix3<f64>,
    half: V3,
    bound_radius: f64,
    material: Material,
}

impl PreparedObject {
    pub fn new(spec: &ObjectSpec) -> Self {
        let (s, c) = spec.yaw.to_radians().sin_cos();
        let rot = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Self {
            kind: spec.kind,
            center: spec.center(),
            rot,
            half: spec.half_extents(),
            bound_radius: spec.bounding_radius(),
            material: Material { albedo: spec.albedo, roughness: spec.roughness, specular: spec.specular },
        }
    }

    fn to_local(&self, p: &V3) -> V3 {
        (self.rot.transpose() * (p - self.center)).component_div(&self.half)
    }

    fn dir_to_local(&self, d: &V3) -> V3 {
        (self.rot.transpose() * d).component_div(&self.half)
    }

    fn normal_to_world(&self, n: &V3) -> V3 {
        (self.rot * n.component_div(&self.half)).normalize()
    }

    /// Whether a world point lies strictly inside the solid.
    pub fn contains(&self, p: &V3) -> bool {
        inside_local(self.kind, &self.to_local(p))
    }

    /// Nearest hit with `t` in `(t_min, t_max)`, as `(t, world normal)`.
    fn intersect(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<(f64, V3)> {
        // bounding sphere rejection
        let oc = ray.origin - self.center;
        let b = oc.dot(&ray.dir);
        let c = oc.norm_squared() - self.bound_radius * self.bound_radius;
        if c > 0.0 && (b > 0.0 || b * b < c) {
            return None;
        }
        let o = self.to_local(&ray.origin);
        let d = self.dir_to_local(&ray.dir);
        let (t, n) = intersect_local(self.kind, &o, &d, t_min, t_max)?;
        Some((t, self.normal_to_world(&n)))
    }
}

/// Nearest local-space hit of `o + t·d` with the unit primitive.
fn intersect_local(kind: PrimitiveKind, o: &V3, d: &V3, t_min: f64, t_max: f64) -> Option<(f64, V3)> {
    let mut best: Option<(f64, V3)> = None;
    let mut offer = |cand: Option<(f64, V3)>| {
        if let Some((t, n)) = cand {
            if t > t_min && t < t_max && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, n));
            }
        }
    };
    match kind {
        PrimitiveKind::Box => offer(hit_box(o, d, &V3::new(-1.0, -1.0, -1.0), &V3::new(1.0, 1.0, 1.0), t_min)),
        PrimitiveKind::Sphere => {
            for h in hit_sphere(o, d, &V3::zeros(), 1.0) {
                offer(h);
            }
        }
        PrimitiveKind::Cylinder => {
            for h in hit_cylinder(o, d, 1.0, -1.0, 1.0) {
                offer(h);
            }
        }
        PrimitiveKind::Cone => {
            for h in hit_cone(o, d) {
                offer(h);
            }
        }
        PrimitiveKind::Capsule => {
            for h in hit_cylinder_side(o, d, CAPSULE_RADIUS, -CAPSULE_HALF, CAPSULE_HALF) {
                offer(h);
            }
            for z in [-CAPSULE_HALF, CAPSULE_HALF] {
                for h in hit_sphere(o, d, &V3::new(0.0, 0.0, z), CAPSULE_RADIUS) {
                    // only the cap hemisphere outside the body counts
                    offer(h.filter(|(t, _)| {
                        let pz = o.z + t * d.z;
                        if z > 0.0 {
                            pz >= z
                        } else {
                            pz <= z
                        }
                    }));
                }
            }
        }
        PrimitiveKind::Composite => {
            offer(hit_box(o, d, &V3::new(-1.0, -1.0, -1.0), &V3::new(1.0, 1.0, 0.0), t_min));
            for h in hit_cylinder(o, d, COMPOSITE_TOP_RADIUS, 0.0, 1.0) {
                offer(h);
            }
        }
    }
    best
}

const CAPSULE_RADIUS: f64 = 0.5;
const CAPSULE_HALF: f64 = 0.5;
const COMPOSITE_TOP_RADIUS: f64 = 0.6;

fn inside_local(kind: PrimitiveKind, p: &V3) -> bool {
    let r2 = p.x * p.x + p.y * p.y;
    match kind {
        PrimitiveKind::Box => p.x.abs() < 1.0 && p.y.abs() < 1.0 && p.z.abs() < 1.0,
        PrimitiveKind::Sphere => p.norm_squared() < 1.0,
        PrimitiveKind::Cylinder => r2 < 1.0 && p.z.abs() < 1.0,
        PrimitiveKind::Cone => {
            let r = 0.5 * (1.0 - p.z);
            p.z > -1.0 && p.z < 1.0 && r2 < r * r
        }
        PrimitiveKind::Capsule => {
            let z = p.z.clamp(-CAPSULE_HALF, CAPSULE_HALF);
            r2 + (p.z - z) * (p.z - z) < CAPSULE_RADIUS * CAPSULE_RADIUS
        }
        PrimitiveKind::Composite => {
            let lower = p.x.abs() < 1.0 && p.y.abs() < 1.0 && p.z > -1.0 && p.z < 0.0;
            let upper = r2 < COMPOSITE_TOP_RADIUS * COMPOSITE_TOP_RADIUS && p.z >= 0.0 && p.z < 1.0;
            lower || upper
        }
    }
}

/// Slab test; returns the entry hit, or the exit hit when the origin is inside.
fn hit_box(o: &V3, d: &V3, lo: &V3, hi: &V3, t_min: f64) -> Option<(f64, V3)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let (mut n0, mut n1) = (V3::zeros(), V3::zeros());
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut ta, mut tb) = ((lo[a] - o[a]) * inv, (hi[a] - o[a]) * inv);
        let mut na = V3::zeros();
        na[a] = -1.0;
        let mut nb = V3::zeros();
        nb[a] = 1.0;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
            std::mem::swap(&mut na, &mut nb);
        }
        if ta > t0 {
            t0 = ta;
            n0 = na;
        }
        if tb < t1 {
            t1 = tb;
            n1 = nb;
        }
    }
    if t0 > t1 {
        return None;
    }
    if t0 > t_min {
        Some((t0, n0))
    } else {
        Some((t1, n1))
    }
}

fn quadratic(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    if a.abs() < 1e-300 {
        return None;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    // numerically stable root pair
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let (r0, r1) = if q == 0.0 { (0.0, 0.0) } else { (q / a, c / q) };
    Some((r0.min(r1), r0.max(r1)))
}

fn hit_sphere(o: &V3, d: &V3, center: &V3, r: f64) -> [Option<(f64, V3)>; 2] {
    let oc = o - center;
    match quadratic(d.norm_squared(), 2.0 * oc.dot(d), oc.norm_squared() - r * r) {
        None => [None, None],
        Some((t0, t1)) => [t0, t1].map(|t| Some((t, (oc + d * t) / r))),
    }
}

fn hit_cylinder_side(o: &V3, d: &V3, r: f64, z0: f64, z1: f64) -> [Option<(f64, V3)>; 2] {
    let a = d.x * d.x + d.y * d.y;
    let b = 2.0 * (o.x * d.x + o.y * d.y);
    let c = o.x * o.x + o.y * o.y - r * r;
    match quadratic(a, b, c) {
        None => [None, None],
        Some((t0, t1)) => [t0, t1].map(|t| {
            let p = o + d * t;
            (p.z >= z0 && p.z <= z1).then(|| (t, V3::new(p.x, p.y, 0.0)))
        }),
    }
}

fn hit_disc(o: &V3, d: &V3, z: f64, r: f64, normal_z: f64) -> Option<(f64, V3)> {
    if d.z == 0.0 {
        return None;
    }
    let t = (z - o.z) / d.z;
    let p = o + d * t;
    (p.x * p.x + p.y * p.y <= r * r).then(|| (t, V3::new(0.0, 0.0, normal_z)))
}

fn hit_cylinder(o: &V3, d: &V3, r: f64, z0: f64, z1: f64) -> [Option<(f64, V3)>; 4] {
    let [s0, s1] = hit_cylinder_side(o, d, r, z0, z1);
    [s0, s1, hit_disc(o, d, z0, r, -1.0), hit_disc(o, d, z1, r, 1.0)]
}

/// Cone with apex at z = 1 and unit base radius at z = −1: `x² + y² = ((1 − z) / 2)²`.
fn hit_cone(o: &V3, d: &V3) -> [Option<(f64, V3)>; 3] {
    let k = 0.25;
    let a = d.x * d.x + d.y * d.y - k * d.z * d.z;
    let b = 2.0 * (o.x * d.x + o.y * d.y + k * (1.0 - o.z) * d.z);
    let c = o.x * o.x + o.y * o.y - k * (1.0 - o.z) * (1.0 - o.z);
    let side = match quadratic(a, b, c) {
        None => [None, None],
        Some((t0, t1)) => [t0, t1].map(|t| {
            let p = o + d * t;
            (p.z >= -1.0 && p.z <= 1.0).then(|| (t, V3::new(p.x, p.y, 0.5 * (1.0 - p.z) * 0.5)))
        }),
    };
    [side[0], side[1], hit_disc(o, d, -1.0, 1.0, -1.0)]
}

/// Scene geometry in render-ready form.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub objects: Vec<PreparedObject>,
    room: Option<RoomSpec>,
    wall_normals: Vec<V3>,
    seed: u64,
    pub light_position: V3,
    pub light_rgb: [f64; 3],
    pub intensity: f64,
    pub camera: CameraFrame,
}

impl PreparedScene {
    pub fn new(scene: &SceneSpec) -> Self {
        let room = scene.room.clone();
        let wall_normals = (0..room.walls).map(|i| room.wall_normal(i)).collect();
        Self {
            objects: scene.objects.iter().map(PreparedObject::new).collect(),
            room: Some(room),
            wall_normals,
            seed: scene.seed,
            light_position: scene.light.pose.position(),
            light_rgb: scene.light.color.to_array(),
            intensity: scene.light.intensity,
            camera: CameraFrame::new(&scene.camera),
        }
    }

    /// Drops the walls; rays that miss the floor and objects see black.
    pub fn without_walls(mut self) -> Self {
        self.wall_normals.clear();
        self
    }

    pub fn intersect(&self, ray: &Ray) -> Option<Hit> {
        let mut best: Option<(f64, V3, Material, Surface)> = None;
        for (i, obj) in self.objects.iter().enumerate() {
            let t_max = best.map_or(f64::INFINITY, |b| b.0);
            if let Some((t, n)) = obj.intersect(ray, T_MIN, t_max) {
                best = Some((t, n, obj.material, Surface::Object(i)));
            }
        }
        if let Some(room) = &self.room {
            if ray.dir.z < 0.0 {
                let t = -ray.origin.z / ray.dir.z;
                if t > T_MIN && best.is_none_or(|b| t < b.0) {
                    let m = Material { albedo: room.floor_albedo, roughness: 0.0, specular: None };
                    best = Some((t, V3::z(), m, Surface::Floor));
                }
            }
            for (i, n) in self.wall_normals.iter().enumerate() {
                let dn = n.dot(&ray.dir);
                if dn <= 0.0 {
                    continue;
                }
                let t = (room.distance - n.dot(&ray.origin)) / dn;
                let p = ray.at(t);
                if t > T_MIN && p.z >= 0.0 && best.is_none_or(|b| t < b.0) {
                    let albedo = self.wall_albedo(room, i, &p);
                    best = Some((t, *n, Material { albedo, roughness: 0.0, specular: None }, Surface::Wall(i)));
                }
            }
        }
        best.map(|(t, n, material, surface)| {
            let normal = if n.dot(&ray.dir) > 0.0 { -n } else { n };
            Hit { t, point: ray.at(t), normal, material, surface }
        })
    }

    fn wall_albedo(&self, room: &RoomSpec, i: usize, p: &V3) -> [f64; 3] {
        let n = self.wall_normals[i];
        let s = V3::new(-n.y, n.x, 0.0).dot(p);
        let base = room.wall_albedo[i];
        let factor = match room.wall_texture[i] {
            WallTexture::Flat => 1.0,
            WallTexture::Checker { period, contrast } => {
                let parity = ((s / period).floor() as i64 + (p.z / period).floor() as i64).rem_euclid(2);
                if parity == 1 {
                    1.0 - contrast
                } else {
                    1.0
                }
            }
            WallTexture::ValueNoise { cell, contrast } => {
                1.0 - contrast * value_noise(self.seed ^ (i as u64).wrapping_mul(0x9e37_79b9), s / cell, p.z / cell)
            }
        };
        base.map(|a| a * factor)
    }

    /// Whether the open segment from `p` to the light crosses an object.
    pub fn occluded(&self, p: &V3) -> bool {
        let to_light = self.light_position - p;
        let dist = to_light.norm();
        let ray = Ray::new(*p, to_light);
        self.objects.iter().any(|o| o.intersect(&ray, T_MIN, dist - T_MIN).is_some())
    }

    /// Direct radiance at a hit, light intensity included. The second value
    /// is the shadow-ray visibility (false when the surface faces away).
    pub fn shade_direct(&self, hit: &Hit, view_dir: &V3) -> ([f64; 3], bool) {
        let to_light = self.light_position - hit.point;
        let dist = to_light.norm();
        let wi = to_light / dist;
        let n = hit.normal;
        let cos_i = n.dot(&wi);
        if cos_i <= 0.0 {
            return ([0.0; 3], false);
        }
        let origin = hit.point + n * (4.0 * T_MIN);
        if self.occluded(&origin) {
            return ([0.0; 3], false);
        }
        let wo = -view_dir;
        let m = &hit.material;
        let diffuse = oren_nayar(&n, &wi, &wo, m.roughness) * cos_i / std::f64::consts::PI;
        let spec = m.specular.map_or(0.0, |s| phong(&n, &wi, &wo, s));
        let falloff = (FALLOFF_REFERENCE / dist).powi(2);
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = (self.light_rgb[c] * (m.albedo[c] * diffuse + spec) * falloff) * self.intensity;
        }
        (out, true)
    }
}

/// Oren–Nayar multiplier on the Lambertian term; 1 at zero roughness.
pub fn oren_nayar(n: &V3, wi: &V3, wo: &V3, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    let s2 = sigma * sigma;
    let a = 1.0 - 0.5 * s2 / (s2 + 0.33);
    let b = 0.45 * s2 / (s2 + 0.09);
    let cos_i = n.dot(wi).clamp(-1.0, 1.0);
    let cos_o = n.dot(wo).clamp(-1.0, 1.0);
    let (ti, to) = (cos_i.acos(), cos_o.acos());
    let (alpha, beta) = (ti.max(to), ti.min(to));
    let pi = wi - n * cos_i;
    let po = wo - n * cos_o;
    let denom = pi.norm() * po.norm();
    let cos_phi = if denom > 1e-12 { pi.dot(&po) / denom } else { 0.0 };
    a + b * cos_phi.max(0.0) * alpha.sin() * beta.tan()
}

/// Phong lobe `strength / π · max(0, R·V)^exponent`.
pub fn phong(n: &V3, wi: &V3, wo: &V3, s: Specular) -> f64 {
    let r = n * (2.0 * n.dot(wi)) - wi;
    s.strength / std::f64::consts::PI * r.dot(wo).max(0.0).powf(s.exponent)
}

/// Value noise in [0, 1] on a unit lattice.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let lattice = |i: i64, j: i64| -> f64 {
        let mut h =
            seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (j as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
        h ^= h >> 33;
        h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
        h ^= h >> 33;
        (h >> 11) as f64 / (1u64 << 53) as f64
    };
    let (fx, fy) = (x.floor(), y.floor());
    let (i, j) = (fx as i64, fy as i64);
    let (u, v) = (x - fx, y - fy);
    let (u, v) = (u * u * (3.0 - 2.0 * u), v * v * (3.0 - 2.0 * v));
    let a = lattice(i, j) * (1.0 - u) + lattice(i + 1, j) * u;
    let b = lattice(i, j + 1) * (1.0 - u) + lattice(i + 1, j + 1) * u;
    a * (1.0 - v) + b * v
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub width: usize,
    pub height: usize,
    /// Multiplies albedo for the constant ambient term.
    pub ambient: f64,
    /// 1, or 4 for a 2×2 stratified grid per pixel.
    pub samples: usize,
}

impl RenderOptions {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, ambient: DEFAULT_AMBIENT, samples: 1 }
    }

    fn offsets(&self) -> Result<&'static [(f64, f64)]> {
        match self.samples {
            1 => Ok(&[(0.5, 0.5)]),
            4 => Ok(&[(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]),
            n => Err(LumenError::InvalidArgument(format!("{n} samples per pixel; use 1 or 4"))),
        }
    }

    fn check(&self) -> Result<()> {
        if self.width < MIN_RENDER_SIZE || self.height < MIN_RENDER_SIZE {
            return Err(LumenError::InvalidArgument(format!(
                "render size {}x{} below {MIN_RENDER_SIZE}",
                self.width, self.height
            )));
        }
        self.offsets().map(|_| ())
    }
}

/// Per-pixel record of the primary hit at the pixel center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GPixel {
    pub surface: Option<Surface>,
    pub point: V3,
    pub normal: V3,
    pub direct: [f64; 3],
    /// Surface faces the light and the shadow ray is clear.
    pub lit: bool,
}

fn shade_sample(scene: &PreparedScene, ray: &Ray, ambient: f64) -> [f64; 3] {
    match scene.intersect(ray) {
        None => [0.0; 3],
        Some(hit) => {
            let (direct, _) = scene.shade_direct(&hit, &ray.dir);
            let a = hit.material.albedo;
            [0, 1, 2].map(|c| ambient * a[c] + direct[c])
        }
    }
}

pub fn render_prepared(scene: &PreparedScene, opts: RenderOptions) -> Result<LinearImage> {
    opts.check()?;
    let offsets = opts.offsets()?;
    let (w, h) = (opts.width, opts.height);
    let mut img = LinearImage::new(w, h);
    img.data.par_chunks_mut(3 * w).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for &(ox, oy) in offsets {
                let ray = scene.camera.ray_at(x as f64 + ox, y as f64 + oy, w, h);
                let c = shade_sample(scene, &ray, opts.ambient);
                for k in 0..3 {
                    acc[k] += c[k];
                }
            }
            for k in 0..3 {
                row[3 * x + k] = acc[k] / offsets.len() as f64;
            }
        }
    });
    Ok(img)
}

pub fn render(scene: &SceneSpec, opts: RenderOptions) -> Result<LinearImage> {
    render_prepared(&PreparedScene::new(scene), opts)
}

/// Primary-hit buffer at pixel centers, row-major.
pub fn gbuffer(scene: &PreparedScene, w: usize, h: usize) -> Vec<GPixel> {
    (0..w * h)
        .into_par_iter()
        .map(|i| {
            let ray = scene.camera.ray_at((i % w) as f64 + 0.5, (i / w) as f64 + 0.5, w, h);
            match scene.intersect(&ray) {
                None => GPixel { surface: None, point: V3::zeros(), normal: V3::zeros(), direct: [0.0; 3], lit: false },
                Some(hit) => {
                    let (direct, lit) = scene.shade_direct(&hit, &ray.dir);
                    GPixel { surface: Some(hit.surface), point: hit.point, normal: hit.normal, direct, lit }
                }
            }
        })
        .collect()
}

/// 8-bit sRGB-ish encoding: clamp to [0, 1], gamma 1/2.2, round half up.
pub fn encode_channel(x: f64) -> u8 {
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
    (x.powf(1.0 / 2.2) * 255.0 + 0.5).floor() as u8
}

/// Inverse of [`encode_channel`] up to quantization.
pub fn decode_channel(v: u8) -> f64 {
    (v as f64 / 255.0).powf(2.2)
}

pub fn tonemap_encode(img: &LinearImage) -> image::RgbImage {
    let bytes = img.data.iter().map(|&x| encode_channel(x)).collect();
    image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes).expect("buffer matches dimensions")
}

pub fn decode_to_linear(img: &image::RgbImage) -> LinearImage {
    LinearImage {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.as_raw().iter().map(|&v| decode_channel(v)).collect(),
    }
}

pub fn write_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| LumenError::Image { path: path.into(), source })
}

pub fn read_png(path: &Path) -> Result<image::RgbImage> {
    let img = image::open(path).map_err(|source| LumenError::Image { path: path.into(), source })?;
    Ok(img.to_rgb8())
}
