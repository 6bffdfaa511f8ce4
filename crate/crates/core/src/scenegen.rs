//! Parametric scene sampling and the camera-relative regression target.
//!
//! World frame: z up, floor at z = 0, origin at the scene center. Objects
//! sit on the floor around the origin inside a regular-polygon room whose
//! walls are infinitely tall and open to the sky.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LumenError, Result};
use crate::lightmath::{self, pan_tilt_to_unit, wrap_delta, LightColor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Box,
    Sphere,
    Cylinder,
    Cone,
    Capsule,
    /// A slab with a narrower cylinder standing on it.
    Composite,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 6] = [
        PrimitiveKind::Box,
        PrimitiveKind::Sphere,
        PrimitiveKind::Cylinder,
        PrimitiveKind::Cone,
        PrimitiveKind::Capsule,
        PrimitiveKind::Composite,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Specular {
    pub strength: f64,
    pub exponent: f64,
}

/// One object. `scale` is the full world extent along each local axis; the
/// primitive fills the local cube [-1, 1]³ with its lowest point at z = −1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub kind: PrimitiveKind,
    /// Center of the local cube; `z == scale[2] / 2` for floor contact.
    pub position: [f64; 3],
    pub scale: [f64; 3],
    pub yaw: f64,
    pub albedo: [f64; 3],
    pub roughness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specular: Option<Specular>,
}

impl ObjectSpec {
    pub fn half_extents(&self) -> Vector3<f64> {
        Vector3::from(self.scale) * 0.5
    }

    pub fn bounding_radius(&self) -> f64 {
        self.half_extents().norm()
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    pub fn lowest_z(&self) -> f64 {
        self.position[2] - 0.5 * self.scale[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WallTexture {
    Flat,
    /// Square checks of side `period` meters, darker checks scaled by `1 − contrast`.
    Checker {
        period: f64,
        contrast: f64,
    },
    /// Bilinear lattice noise of cell size `cell` meters.
    ValueNoise {
        cell: f64,
        contrast: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub walls: usize,
    /// Distance from the origin to every wall plane.
    pub distance: f64,
    /// Azimuth of the first wall normal, degrees.
    pub rotation: f64,
    pub wall_albedo: Vec<[f64; 3]>,
    pub wall_texture: Vec<WallTexture>,
    pub floor_albedo: [f64; 3],
}

impl RoomSpec {
    /// Outward unit normal of wall `i`.
    pub fn wall_normal(&self, i: usize) -> Vector3<f64> {
        let a = (self.rotation + 360.0 * i as f64 / self.walls as f64).to_radians();
        Vector3::new(a.cos(), a.sin(), 0.0)
    }

    /// Signed clearance of a horizontal disc to the nearest wall; positive inside.
    pub fn clearance(&self, p: &Vector3<f64>, radius: f64) -> f64 {
        (0..self.walls).map(|i| self.distance - self.wall_normal(i).dot(p) - radius).fold(f64::INFINITY, f64::min)
    }
}

/// Spherical position around the origin: pan is azimuth from +y toward +x,
/// tilt is elevation above the floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphericalPose {
    pub r: f64,
    pub pan: f64,
    pub tilt: f64,
}

impl SphericalPose {
    pub fn position(&self) -> Vector3<f64> {
        pan_tilt_to_unit(self.pan, self.tilt) * self.r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightSpec {
    pub pose: SphericalPose,
    pub color: LightColor,
    pub intensity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub pose: SphericalPose,
    #[serde(default)]
    pub look_at: [f64; 3],
    /// Vertical field of view, degrees.
    pub vfov: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Seeds the procedural wall textures.
    pub seed: u64,
    pub objects: Vec<ObjectSpec>,
    pub room: RoomSpec,
    pub light: LightSpec,
    pub camera: CameraSpec,
}

/// Camera-relative light direction and the light color.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightGT {
    /// `wrap(camera pan − light pan)`; positive puts the light on the camera's right.
    pub delta_pan: f64,
    /// `wrap(camera tilt − light tilt)`.
    pub delta_tilt: f64,
    pub color: LightColor,
}

impl LightGT {
    /// Absolute light tilt, recovered with the camera tilt.
    pub fn light_tilt(&self, camera_tilt: f64) -> f64 {
        camera_tilt - self.delta_tilt
    }
}

pub const CAMERA_RADIUS: f64 = 20.0;
pub const LIGHT_TILT_STEP: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Inclusive object count range.
    pub objects: (usize, usize),
    pub cct_range: (f64, f64),
    pub locus_offset: f64,
    pub roughness: (f64, f64),
    pub object_scale: (f64, f64),
    /// Object centers are drawn uniformly in a floor disc of this radius.
    pub placement_radius: f64,
    /// Radius of the empty sphere around the origin.
    pub exclusion_radius: f64,
    pub intensity: (f64, f64),
    pub light_radius: (f64, f64),
    /// Inclusive, multiples of [`LIGHT_TILT_STEP`].
    pub light_tilt: (f64, f64),
    pub camera_tilt: (f64, f64),
    pub vfov: f64,
    pub walls: (usize, usize),
    pub wall_distance: (f64, f64),
}

impl SceneConfig {
    /// Multi-object scenes with one to three objects.
    pub fn sid2() -> Self {
        Self {
            objects: (1, 3),
            cct_range: (2500.0, 9500.0),
            locus_offset: lightmath::DEFAULT_LOCUS_OFFSET,
            roughness: (0.0, 0.5),
            object_scale: (1.0, 4.0),
            placement_radius: 6.0,
            exclusion_radius: 0.5,
            intensity: (0.5, 4.0),
            light_radius: (20.0, 50.0),
            light_tilt: (30.0, 90.0),
            camera_tilt: (10.0, 70.0),
            vfov: 50.0,
            walls: (4, 6),
            wall_distance: (60.0, 80.0),
        }
    }

    /// Single-object scenes.
    pub fn sid1() -> Self {
        Self { objects: (1, 1), ..Self::sid2() }
    }

    fn check(&self) -> Result<()> {
        let bad = |what: &str| Err(LumenError::InvalidArgument(format!("scene config: {what}")));
        if self.objects.0 == 0 || self.objects.0 > self.objects.1 {
            return bad("object count range");
        }
        if self.walls.0 < 3 || self.walls.0 > self.walls.1 {
            return bad("wall count range");
        }
        let ranges = [
            self.roughness,
            self.object_scale,
            self.intensity,
            self.light_radius,
            self.light_tilt,
            self.camera_tilt,
            self.wall_distance,
        ];
        if ranges.iter().any(|&(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
            return bad("empty range");
        }
        if self.intensity.0 <= 0.0 || self.object_scale.0 <= 0.0 {
            return bad("non-positive intensity or scale");
        }
        if self.light_tilt.0.rem_euclid(LIGHT_TILT_STEP) != 0.0 || self.light_tilt.1.rem_euclid(LIGHT_TILT_STEP) != 0.0
        {
            return bad("light tilt bounds off the 5 degree grid");
        }
        Ok(())
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::sid2()
    }
}

/// Independent stream for scene `index` of a dataset.
pub fn scene_rng(dataset_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    rng.set_stream(index);
    rng
}

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn random_albedo(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..=hi), rng.random_range(lo..=hi), rng.random_range(lo..=hi)]
}

fn sample_object(rng: &mut impl Rng, cfg: &SceneConfig) -> ObjectSpec {
    let kind = PrimitiveKind::ALL[rng.random_range(0..PrimitiveKind::ALL.len())];
    let scale = [uniform(rng, cfg.object_scale), uniform(rng, cfg.object_scale), uniform(rng, cfg.object_scale)];
    let rho = cfg.placement_radius * rng.random::<f64>().sqrt();
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    ObjectSpec {
        kind,
        position: [rho * phi.cos(), rho * phi.sin(), 0.5 * scale[2]],
        scale,
        yaw: rng.random_range(0.0..360.0),
        albedo: random_albedo(rng, 0.05, 0.95),
        roughness: uniform(rng, cfg.roughness),
        specular: None,
    }
}

fn placement_ok(obj: &ObjectSpec, placed: &[ObjectSpec], cfg: &SceneConfig) -> bool {
    let (c, r) = (obj.center(), obj.bounding_radius());
    c.norm() > r + cfg.exclusion_radius && placed.iter().all(|o| (o.center() - c).norm() > o.bounding_radius() + r)
}

fn sample_texture(rng: &mut impl Rng) -> WallTexture {
    match rng.random_range(0..3) {
        0 => WallTexture::Flat,
        1 => WallTexture::Checker { period: rng.random_range(1.0..6.0), contrast: rng.random_range(0.2..0.7) },
        _ => WallTexture::ValueNoise { cell: rng.random_range(1.0..8.0), contrast: rng.random_range(0.2..0.7) },
    }
}

pub fn sample_scene(rng: &mut impl Rng, cfg: &SceneConfig) -> Result<SceneSpec> {
    cfg.check()?;
    let seed = rng.random();

    let count = rng.random_range(cfg.objects.0..=cfg.objects.1);
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let obj = sample_object(rng, cfg);
            if placement_ok(&obj, &objects, cfg) {
                placed = Some(obj);
                break;
            }
        }
        objects.push(placed.ok_or(LumenError::Placement { attempts: MAX_PLACEMENT_ATTEMPTS })?);
    }

    let walls = rng.random_range(cfg.walls.0..=cfg.walls.1);
    let room = RoomSpec {
        walls,
        distance: uniform(rng, cfg.wall_distance),
        rotation: rng.random_range(0.0..360.0),
        wall_albedo: (0..walls).map(|_| random_albedo(rng, 0.1, 0.9)).collect(),
        wall_texture: (0..walls).map(|_| sample_texture(rng)).collect(),
        floor_albedo: random_albedo(rng, 0.2, 0.8),
    };

    let steps = ((cfg.light_tilt.1 - cfg.light_tilt.0) / LIGHT_TILT_STEP).round() as u32;
    let light = LightSpec {
        pose: SphericalPose {
            r: uniform(rng, cfg.light_radius),
            pan: rng.random_range(0..360u32) as f64,
            tilt: cfg.light_tilt.0 + LIGHT_TILT_STEP * rng.random_range(0..=steps) as f64,
        },
        color: lightmath::sample_near_planckian(rng, cfg.cct_range, cfg.locus_offset)?,
        intensity: uniform(rng, (cfg.intensity.0.ln(), cfg.intensity.1.ln())).exp(),
    };
    let camera = CameraSpec {
        pose: SphericalPose { r: CAMERA_RADIUS, pan: 0.0, tilt: uniform(rng, cfg.camera_tilt) },
        look_at: [0.0; 3],
        vfov: cfg.vfov,
    };

    let scene = SceneSpec { seed, objects, room, light, camera };
    let violations = validate_scene(&scene, cfg);
    if !violations.is_empty() {
        return Err(LumenError::InvalidArgument(format!("sampled scene violates {violations:?}")));
    }
    Ok(scene)
}

pub fn gt_from_scene(scene: &SceneSpec) -> LightGT {
    LightGT {
        delta_pan: wrap_delta(scene.camera.pose.pan - scene.light.pose.pan),
        delta_tilt: wrap_delta(scene.camera.pose.tilt - scene.light.pose.tilt),
        color: scene.light.color,
    }
}

fn in_range(x: f64, (lo, hi): (f64, f64)) -> bool {
    (lo..=hi).contains(&x)
}

/// Every broken scene constraint, by name. Empty iff the scene is valid
/// under `cfg`.
pub fn validate_scene(scene: &SceneSpec, cfg: &SceneConfig) -> Vec<String> {
    let mut v = Vec::new();
    let mut flag = |ok: bool, what: &str| {
        if !ok {
            v.push(what.to_string());
        }
    };

    let n = scene.objects.len();
    flag(in_range(n as f64, (cfg.objects.0 as f64, cfg.objects.1 as f64)), "object count");
    for (i, o) in scene.objects.iter().enumerate() {
        flag(o.scale.iter().all(|&s| in_range(s, cfg.object_scale)), "object scale range");
        flag(o.albedo.iter().all(|&a| in_range(a, (0.05, 0.95))), "object albedo range");
        flag(in_range(o.roughness, (0.0, 1.0)), "object roughness range");
        flag(o.lowest_z().abs() <= 1e-9, "floor contact");
        flag(o.center().norm() > o.bounding_radius() + cfg.exclusion_radius, "exclusion zone");
        flag(scene.room.clearance(&o.center(), o.bounding_radius()) > 0.0, "room containment");
        for o2 in &scene.objects[i + 1..] {
            flag((o.center() - o2.center()).norm() > o.bounding_radius() + o2.bounding_radius(), "object overlap");
        }
    }

    let room = &scene.room;
    flag(room.walls >= 3 && in_range(room.walls as f64, (cfg.walls.0 as f64, cfg.walls.1 as f64)), "wall count");
    flag(room.wall_albedo.len() == room.walls && room.wall_texture.len() == room.walls, "wall attributes");
    flag(room.distance > 0.0, "room contains origin");

    let light = &scene.light;
    flag(in_range(light.pose.r, cfg.light_radius), "light radius range");
    flag(
        in_range(light.pose.tilt, cfg.light_tilt) && light.pose.tilt.rem_euclid(LIGHT_TILT_STEP) == 0.0,
        "light tilt grid",
    );
    flag(in_range(light.pose.pan, (0.0, 359.0)) && light.pose.pan.fract() == 0.0, "light pan grid");
    flag(light.intensity > 0.0 && light.intensity.is_finite(), "light intensity");
    let c = light.color;
    flag(c.r >= 0.0 && c.g >= 0.0 && c.b >= 0.0 && c.max_channel() > 0.0, "light color");
    flag(room.clearance(&light.pose.position(), 0.0) > 0.0, "light inside room");

    let cam = &scene.camera;
    flag(cam.pose.r == CAMERA_RADIUS, "camera radius");
    flag(cam.pose.pan == 0.0, "camera pan");
    flag(in_range(cam.pose.tilt, cfg.camera_tilt), "camera tilt range");
    flag(cam.look_at == [0.0; 3], "camera look-at");
    flag(room.clearance(&cam.pose.position(), 0.0) > 0.0, "camera inside room");
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(seed: u64, cfg: &SceneConfig) -> SceneSpec {
        sample_scene(&mut scene_rng(seed, 0), cfg).unwrap()
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SceneConfig::sid2();
        assert_eq!(sample(3, &cfg), sample(3, &cfg));
        assert_ne!(sample(3, &cfg), sample(4, &cfg));
        let a = sample_scene(&mut scene_rng(3, 1), &cfg).unwrap();
        assert_ne!(a, sample(3, &cfg));
    }

    #[test]
    fn gt_examples() {
        let mut s = sample(1, &SceneConfig::sid2());
        s.light.pose.pan = 0.0;
        assert_eq!(gt_from_scene(&s).delta_pan, 0.0);
        s.light.pose.pan = 90.0;
        assert_eq!(gt_from_scene(&s).delta_pan, -90.0);
        s.light.pose.pan = 270.0;
        assert_eq!(gt_from_scene(&s).delta_pan, 90.0);
        s.camera.pose.tilt = 10.0;
        s.light.pose.tilt = 90.0;
        assert_eq!(gt_from_scene(&s).delta_tilt, -80.0);
        assert_eq!(gt_from_scene(&s).light_tilt(10.0), 90.0);
    }

    #[test]
    fn validation_names_violations() {
        let cfg = SceneConfig::sid2();
        let s = sample(2, &cfg);
        assert!(validate_scene(&s, &cfg).is_empty());

        let mut four = s.clone();
        while four.objects.len() < 4 {
            let mut o = four.objects[0].clone();
            o.position[0] += 100.0;
            four.objects.push(o);
        }
        assert!(validate_scene(&four, &cfg).contains(&"object count".to_string()));

        let mut far = s.clone();
        far.light.pose.r = 60.0;
        assert_eq!(validate_scene(&far, &cfg), vec!["light radius range".to_string()]);

        let mut off = s.clone();
        off.light.pose.tilt = 32.0;
        off.objects[0].position[2] += 0.1;
        let v = validate_scene(&off, &cfg);
        assert!(v.contains(&"light tilt grid".to_string()) && v.contains(&"floor contact".to_string()));

        let mut center = s;
        center.objects[0].position[0] = 0.0;
        center.objects[0].position[1] = 0.0;
        assert!(validate_scene(&center, &cfg).contains(&"exclusion zone".to_string()));
    }

    #[test]
    fn impossible_placement_is_reported() {
        let cfg = SceneConfig { exclusion_radius: 100.0, ..SceneConfig::sid1() };
        let err = sample_scene(&mut scene_rng(0, 0), &cfg).unwrap_err();
        assert!(matches!(err, LumenError::Placement { attempts: 1000 }));
    }

    #[test]
    fn sid1_has_one_object() {
        let cfg = SceneConfig::sid1();
        for i in 0..200 {
            assert_eq!(sample_scene(&mut scene_rng(9, i), &cfg).unwrap().objects.len(), 1);
        }
    }

    #[test]
    fn serde_round_trip_is_exact() {
        let s = sample(11, &SceneConfig::sid2());
        let text = serde_json::to_string(&s).unwrap();
        let back: SceneSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
