//! Independent oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::f64::consts::PI;

use lumen_core::lightmath::{direction_error_deg, planckian_xyz, xyz_to_uv, LightColor};
use lumen_core::probe::*;
use lumen_core::renderer::*;
use lumen_core::scenegen::*;
use nalgebra::{Matrix3, Vector3};

pub type V3 = Vector3<f64>;

pub fn room() -> RoomSpec {
    RoomSpec {
        walls: 4,
        distance: 60.0,
        rotation: 10.0,
        wall_albedo: vec![[0.5; 3]; 4],
        wall_texture: vec![WallTexture::Flat; 4],
        floor_albedo: [0.3, 0.5, 0.7],
    }
}

pub fn scene(
    objects: Vec<ObjectSpec>,
    light: SphericalPose,
    color: LightColor,
    intensity: f64,
    cam_tilt: f64,
) -> SceneSpec {
    SceneSpec {
        seed: 3,
        objects,
        room: room(),
        light: LightSpec { pose: light, color, intensity },
        camera: CameraSpec { pose: SphericalPose { r: 20.0, pan: 0.0, tilt: cam_tilt }, look_at: [0.0; 3], vfov: 50.0 },
    }
}

/// Pinhole ray direction through continuous image coordinates, built from
/// the camera pose alone.
pub fn pinhole_dir(cam: &CameraSpec, x: f64, y: f64, w: usize, h: usize) -> (V3, V3) {
    let (p, t) = (cam.pose.pan.to_radians(), cam.pose.tilt.to_radians());
    let pos = V3::new(t.cos() * p.sin(), t.cos() * p.cos(), t.sin()) * cam.pose.r;
    let fwd = (V3::from(cam.look_at) - pos).normalize();
    let hint = if fwd.cross(&V3::z()).norm() < 1e-12 { V3::y() } else { V3::z() };
    let right = fwd.cross(&hint).normalize();
    let up = right.cross(&fwd);
    let th = (cam.vfov / 2.0).to_radians().tan();
    let sx = (2.0 * x / w as f64 - 1.0) * th * w as f64 / h as f64;
    let sy = (1.0 - 2.0 * y / h as f64) * th;
    (pos, (fwd + right * sx + up * sy).normalize())
}

/// Worst per-pixel relative deviation of a rendered bare floor under a
/// zenithal light from the closed-form Lambertian value, and how many
/// pixels saw the floor.
pub fn bare_floor_worst_relative(cam_tilt: f64) -> (f64, usize) {
    let color = lumen_core::lightmath::planckian_rgb(3500.0).unwrap();
    let s = scene(vec![], SphericalPose { r: 35.0, pan: 0.0, tilt: 90.0 }, color, 2.3, cam_tilt);
    let (w, h, ambient) = (64, 48, 0.03);
    let img =
        render_prepared(&PreparedScene::new(&s).without_walls(), RenderOptions { ambient, ..RenderOptions::new(w, h) })
            .unwrap();
    let light = s.light.pose.position();
    let alb = s.room.floor_albedo;
    let (mut worst, mut floor_pixels) = (0.0f64, 0);
    for y in 0..h {
        for x in 0..w {
            let (o, d) = pinhole_dir(&s.camera, x as f64 + 0.5, y as f64 + 0.5, w, h);
            let expect = if d.z < 0.0 {
                floor_pixels += 1;
                let p = o + d * (-o.z / d.z);
                let dist = (light - p).norm();
                let cos = light.z / dist;
                let falloff = (35.0 / dist).powi(2);
                let c = color.to_array();
                [0, 1, 2].map(|k| ambient * alb[k] + 2.3 * c[k] * alb[k] / PI * cos * falloff)
            } else {
                [0.0; 3]
            };
            let got = img.get(x, y);
            for k in 0..3 {
                let err = (got[k] - expect[k]).abs();
                // a zero expectation needs an exact zero: anything else divides to infinity
                worst = worst.max(if err == 0.0 { 0.0 } else { err / expect[k].abs() });
            }
        }
    }
    (worst, floor_pixels)
}

/// Largest ulp distance between `2·a` and the render at doubled intensity,
/// ambient 0, over a few sampled scenes.
pub fn intensity_doubling_max_ulps(scenes: u64, samples: usize) -> i64 {
    let mut worst = 0;
    for i in 0..scenes {
        let mut s = sample_scene(&mut scene_rng(77, i), &SceneConfig::sid2()).unwrap();
        let opts = RenderOptions { ambient: 0.0, samples, ..RenderOptions::new(64, 64) };
        let a = render(&s, opts).unwrap();
        s.light.intensity *= 2.0;
        let b = render(&s, opts).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            worst = worst.max((y.to_bits() as i64 - (2.0 * x).to_bits() as i64).abs());
        }
    }
    worst
}

/// Occluders the shadow oracle can intersect in closed form.
pub enum Solid {
    Ball { c: V3, r: f64 },
    Block { lo: V3, hi: V3 },
}

impl Solid {
    pub fn spec(&self) -> ObjectSpec {
        let (kind, position, scale) = match *self {
            Solid::Ball { c, r } => (PrimitiveKind::Sphere, c, V3::repeat(2.0 * r)),
            Solid::Block { lo, hi } => (PrimitiveKind::Box, (lo + hi) / 2.0, hi - lo),
        };
        ObjectSpec {
            kind,
            position: position.into(),
            scale: scale.into(),
            yaw: 0.0,
            albedo: [0.6; 3],
            roughness: 0.2,
            specular: None,
        }
    }

    /// Whether the surface is crossed at some `t` in `(t0, t1)` along `o + t·d`, `d` unit.
    pub fn crosses(&self, o: &V3, d: &V3, t0: f64, t1: f64) -> bool {
        match self {
            Solid::Ball { c, r } => {
                let oc = o - c;
                let b = oc.dot(d);
                let disc = b * b - (oc.norm_squared() - r * r);
                if disc < 0.0 {
                    return false;
                }
                let s = disc.sqrt();
                [-b - s, -b + s].iter().any(|t| *t > t0 && *t < t1)
            }
            Solid::Block { lo, hi } => {
                let (mut near, mut far) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    let (a, b) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
                    near = near.max(a.min(b));
                    far = far.min(a.max(b));
                }
                near <= far && ((near > t0 && near < t1) || (far > t0 && far < t1))
            }
        }
    }
}

pub fn shadow_solids() -> [Solid; 3] {
    [
        Solid::Ball { c: V3::new(2.5, -1.0, 1.5), r: 1.5 },
        Solid::Ball { c: V3::new(-2.0, 1.5, 1.0), r: 1.0 },
        Solid::Block { lo: V3::new(-1.0, 3.0, 0.0), hi: V3::new(1.0, 5.0, 3.0) },
    ]
}

pub const SHADOW_LIGHTS: [SphericalPose; 3] = [
    SphericalPose { r: 30.0, pan: 60.0, tilt: 45.0 },
    SphericalPose { r: 25.0, pan: 200.0, tilt: 30.0 },
    SphericalPose { r: 40.0, pan: 300.0, tilt: 75.0 },
];

#[derive(Debug, Default)]
pub struct ShadowCheck {
    /// Pixels whose shadow flag disagrees with the brute-force shadow ray.
    pub mismatches: Vec<usize>,
    /// Floor pixels whose rendered value disagrees with that flag.
    pub floor_mismatches: Vec<usize>,
    pub shadowed: usize,
}

/// Compares a 64×64 render's cast shadows against analytic shadow rays.
pub fn shadow_check(light: SphericalPose) -> ShadowCheck {
    let solids = shadow_solids();
    let s = scene(solids.iter().map(Solid::spec).collect(), light, LightColor::WHITE, 1.0, 40.0);
    let prepared = PreparedScene::new(&s);
    let (w, h, ambient) = (64, 64, 0.03);
    let img = render_prepared(&prepared, RenderOptions { ambient, ..RenderOptions::new(w, h) }).unwrap();
    let g = gbuffer(&prepared, w, h);
    let lp = light.position();
    let mut out = ShadowCheck::default();
    for (i, px) in g.iter().enumerate() {
        let Some(surface) = px.surface else { continue };
        let facing = px.normal.dot(&(lp - px.point)) > 0.0;
        let o = px.point + px.normal * (4.0 * T_MIN);
        let dist = (lp - o).norm();
        let d = (lp - o) / dist;
        let oracle_shadow = facing && solids.iter().any(|s| s.crosses(&o, &d, T_MIN, dist - T_MIN));
        if (facing && !px.lit) != oracle_shadow {
            out.mismatches.push(i);
        }
        if surface == Surface::Floor {
            let dark = img.get(i % w, i / w) == s.room.floor_albedo.map(|a| ambient * a);
            if dark != oracle_shadow {
                out.floor_mismatches.push(i);
            }
        }
        out.shadowed += oracle_shadow as usize;
    }
    out
}

/// Direction errors of the specular probe over pans -60..60 step 15 and
/// tilts 20..70 step 12.5, corrected with an on-axis reference render.
pub fn probe_grid_errors() -> Vec<f64> {
    let rig = ProbeRig::specular();
    let circle = rig.circle(SphereKind::Specular);
    let reference = rig.render(0.0, 0.0, LightColor::WHITE).unwrap();
    let rh = find_highlight(&reference, &circle).unwrap();
    let (rp, rt) = highlight_to_direction(&circle, rh.x, rh.y).unwrap();
    // the reference light sits on the camera axis, so there is no mount offset
    let cal = ReferenceCalibration { reference_pan: rp, reference_tilt: rt, mount_tilt_offset: 0.0 };
    let mut errors = Vec::new();
    for i in 0..9 {
        for j in 0..5 {
            let (pan, tilt) = (-60.0 + 15.0 * i as f64, 20.0 + 12.5 * j as f64);
            let img = rig.render(pan, tilt, LightColor::WHITE).unwrap();
            let hl = find_highlight(&img, &circle).unwrap();
            let raw = highlight_to_direction(&circle, hl.x, hl.y).unwrap();
            errors.push(direction_error_deg(apply_reference_correction(raw, &cal), (pan, tilt)));
        }
    }
    errors
}

/// Linear RGB to XYZ built from the primaries' chromaticities and the D65
/// white point.
pub fn rgb_to_xyz_from_primaries() -> Matrix3<f64> {
    let col = |x: f64, y: f64| V3::new(x / y, 1.0, (1.0 - x - y) / y);
    let p = Matrix3::from_columns(&[col(0.64, 0.33), col(0.30, 0.60), col(0.15, 0.06)]);
    let white = col(0.3127, 0.3290);
    let s = p.try_inverse().unwrap() * white;
    p * Matrix3::from_diagonal(&s)
}

pub fn uv_of(xyz: V3) -> (f64, f64) {
    let d = xyz.x + 15.0 * xyz.y + 3.0 * xyz.z;
    (4.0 * xyz.x / d, 6.0 * xyz.y / d)
}

/// Distance in CIE 1960 uv from a color to a dense 1000..15000 K locus polyline.
pub struct LocusOracle {
    points: Vec<(f64, f64)>,
    to_xyz: Matrix3<f64>,
}

impl LocusOracle {
    pub fn new() -> Self {
        let points = (0..=1400).map(|i| xyz_to_uv(&planckian_xyz(1000.0 + 10.0 * i as f64).unwrap())).collect();
        Self { points, to_xyz: rgb_to_xyz_from_primaries() }
    }

    pub fn distance(&self, c: LightColor) -> f64 {
        let (u, v) = uv_of(self.to_xyz * V3::new(c.r, c.g, c.b));
        self.points
            .windows(2)
            .map(|w| {
                let (a, b) = (w[0], w[1]);
                let (dx, dy) = (b.0 - a.0, b.1 - a.1);
                let t = (((u - a.0) * dx + (v - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
                (u - a.0 - t * dx).hypot(v - a.1 - t * dy)
            })
            .fold(f64::INFINITY, f64::min)
    }
}
