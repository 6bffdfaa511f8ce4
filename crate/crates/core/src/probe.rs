//! Light direction and color from a pair of probe spheres.
//!
//! Image coordinates are continuous with pixel `(i, j)` centered at
//! `(i + 0.5, j + 0.5)` and y pointing down. Probe directions live in the
//! camera frame: x right, y up, z toward the camera. A light at camera-frame
//! `(pan, tilt)` points along `(cos t · sin p, sin t, cos t · cos p)`, so
//! `(0, 0)` sits at the camera and positive pan is to the right.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{LumenError, Result};
use crate::lightmath::{wrap_delta, LightColor};
use crate::renderer::{luminance, render_prepared, CameraFrame, LinearImage, PreparedScene, RenderOptions};
use crate::scenegen::{
    CameraSpec, LightSpec, ObjectSpec, PrimitiveKind, RoomSpec, SceneSpec, Specular, SphericalPose, WallTexture,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SphereKind {
    Specular,
    Diffuse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircleAnnotation {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub kind: SphereKind,
}

impl CircleAnnotation {
    pub const MIN_RADIUS: f64 = 2.0;

    pub fn new(cx: f64, cy: f64, radius: f64, kind: SphereKind) -> Self {
        Self { cx, cy, radius, kind }
    }

    /// Radius above the minimum and the disc inside `[0, w] × [0, h]`.
    pub fn check(&self, w: usize, h: usize) -> Result<()> {
        let finite = self.cx.is_finite() && self.cy.is_finite() && self.radius.is_finite();
        if !finite || self.radius <= Self::MIN_RADIUS {
            return Err(LumenError::Probe(format!("circle radius {} not above {}", self.radius, Self::MIN_RADIUS)));
        }
        let inside = self.cx - self.radius >= 0.0
            && self.cy - self.radius >= 0.0
            && self.cx + self.radius <= w as f64
            && self.cy + self.radius <= h as f64;
        if !inside {
            return Err(LumenError::Probe(format!("circle {self:?} exceeds the {w}x{h} image")));
        }
        Ok(())
    }

    /// Pixels whose centers lie strictly inside the circle scaled by `scale`.
    pub fn pixels(&self, w: usize, h: usize, scale: f64) -> Vec<(usize, usize)> {
        let r = self.radius * scale;
        let (x0, x1) = (((self.cx - r).floor().max(0.0)) as usize, ((self.cx + r).ceil() as usize).min(w));
        let (y0, y1) = (((self.cy - r).floor().max(0.0)) as usize, ((self.cy + r).ceil() as usize).min(h));
        let mut out = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                if self.contains(x, y, scale) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    fn contains(&self, x: usize, y: usize, scale: f64) -> bool {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let r = self.radius * scale;
        dx * dx + dy * dy < r * r
    }
}

/// Circle of equal area centered on the centroid of the single 8-connected
/// foreground component of a row-major mask.
pub fn circle_from_mask(mask: &[bool], w: usize, h: usize, kind: SphereKind) -> Result<CircleAnnotation> {
    if mask.len() != w * h {
        return Err(LumenError::InvalidArgument(format!("mask of {} values for {w}x{h}", mask.len())));
    }
    let start = mask.iter().position(|&m| m).ok_or_else(|| LumenError::Probe("empty mask".into()))?;
    let mut seen = vec![false; mask.len()];
    let mut stack = vec![start];
    seen[start] = true;
    let (mut area, mut sx, mut sy) = (0usize, 0.0, 0.0);
    while let Some(i) = stack.pop() {
        let (x, y) = (i % w, i / w);
        area += 1;
        sx += x as f64 + 0.5;
        sy += y as f64 + 0.5;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    if mask.iter().zip(&seen).any(|(&m, &s)| m && !s) {
        return Err(LumenError::Probe("mask has more than one component".into()));
    }
    let circle =
        CircleAnnotation::new(sx / area as f64, sy / area as f64, (area as f64 / std::f64::consts::PI).sqrt(), kind);
    circle.check(w, h)?;
    Ok(circle)
}

/// Nearest-rank percentile of a sorted slice, `p` in [0, 100].
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn sorted_luminance(img: &LinearImage, pixels: &[(usize, usize)]) -> Vec<f64> {
    let mut lum: Vec<f64> = pixels.iter().map(|&(x, y)| luminance(img.get(x, y))).collect();
    lum.sort_by(f64::total_cmp);
    lum
}

fn check_image_circle(img: &LinearImage, circle: &CircleAnnotation) -> Result<Vec<(usize, usize)>> {
    circle.check(img.width, img.height)?;
    let px = circle.pixels(img.width, img.height, 1.0);
    if px.is_empty() {
        return Err(LumenError::Probe("circle covers no pixel centers".into()));
    }
    Ok(px)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Highlight {
    pub x: f64,
    pub y: f64,
    /// `(peak − median) / peak` of in-circle luminance.
    pub confidence: f64,
}

/// Luminance-weighted centroid of the in-circle pixels at or above the 99th
/// luminance percentile. When that percentile ties with the median, only
/// pixels strictly above the median count.
pub fn find_highlight(img: &LinearImage, circle: &CircleAnnotation) -> Result<Highlight> {
    let px = check_image_circle(img, circle)?;
    let sorted = sorted_luminance(img, &px);
    let (peak, median, p99) = (sorted[sorted.len() - 1], percentile(&sorted, 50.0), percentile(&sorted, 99.0));
    if !(peak > median) {
        return Err(LumenError::Probe("no highlight: flat sphere".into()));
    }
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for &(x, y) in &px {
        let l = luminance(img.get(x, y));
        if l >= p99 && l > median {
            sw += l;
            sx += l * (x as f64 + 0.5);
            sy += l * (y as f64 + 0.5);
        }
    }
    Ok(Highlight { x: sx / sw, y: sy / sw, confidence: (peak - median) / peak })
}

/// Camera-frame light direction for a highlight under the orthographic
/// mirror-sphere model. Returns `(pan, tilt, L)`.
pub fn highlight_direction(circle: &CircleAnnotation, hx: f64, hy: f64) -> Result<(f64, f64, Vector3<f64>)> {
    let u = (hx - circle.cx) / circle.radius;
    let v = (circle.cy - hy) / circle.radius;
    let rho2 = u * u + v * v;
    if !(rho2 < 1.0) {
        return Err(LumenError::Probe(format!("highlight on or outside the silhouette (u={u:.3}, v={v:.3})")));
    }
    let n = Vector3::new(u, v, (1.0 - rho2).sqrt());
    let view = Vector3::z();
    let l = n * (2.0 * n.dot(&view)) - view;
    let pan = l.x.atan2(l.z).to_degrees();
    let tilt = l.y.clamp(-1.0, 1.0).asin().to_degrees();
    Ok((wrap_delta(pan), tilt, l))
}

pub fn highlight_to_direction(circle: &CircleAnnotation, hx: f64, hy: f64) -> Result<(f64, f64)> {
    highlight_direction(circle, hx, hy).map(|(p, t, _)| (p, t))
}

/// Default height of the light mount above the probe center, degrees.
pub const DEFAULT_MOUNT_TILT: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCalibration {
    pub reference_pan: f64,
    pub reference_tilt: f64,
    pub mount_tilt_offset: f64,
}

impl ReferenceCalibration {
    pub fn new(reference_pan: f64, reference_tilt: f64) -> Self {
        Self { reference_pan, reference_tilt, mount_tilt_offset: DEFAULT_MOUNT_TILT }
    }
}

/// Removes the displacement measured on the reference image, where light
/// and camera point the same way.
pub fn apply_reference_correction(raw: (f64, f64), cal: &ReferenceCalibration) -> (f64, f64) {
    (wrap_delta(raw.0 - cal.reference_pan), wrap_delta(raw.1 - cal.reference_tilt + cal.mount_tilt_offset))
}

/// Luminance above which a pixel counts as clipped.
pub const CLIP_LEVEL: f64 = 0.999;

/// Mean in-circle color over the [40th, 95th] luminance percentile band,
/// skipping clipped pixels, normalized to max channel 1.
pub fn diffuse_sphere_color(img: &LinearImage, circle: &CircleAnnotation) -> Result<LightColor> {
    let px = check_image_circle(img, circle)?;
    let clipped = |c: [f64; 3]| c.iter().any(|&v| v >= CLIP_LEVEL);
    let usable: Vec<(usize, usize)> = px.iter().copied().filter(|&(x, y)| !clipped(img.get(x, y))).collect();
    if usable.is_empty() {
        return Err(LumenError::Probe("saturated probe".into()));
    }
    let sorted = sorted_luminance(img, &usable);
    let (lo, hi) = (percentile(&sorted, 40.0), percentile(&sorted, 95.0));
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for &(x, y) in &usable {
        let c = img.get(x, y);
        let l = luminance(c);
        if l >= lo && l <= hi {
            for k in 0..3 {
                sum[k] += c[k];
            }
            n += 1;
        }
    }
    LightColor::new(sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64)
        .normalized()
        .map_err(|_| LumenError::Probe("diffuse sphere is black".into()))
}

/// Radius factor of the masked disc.
pub const MASK_PAD: f64 = 1.1;

/// Replaces each circle (radius padded by 10%) with the mean color of a thin
/// annulus just outside it. Annulus means come from the input image and skip
/// pixels inside any padded circle; later circles overwrite earlier ones.
pub fn mask_spheres(img: &LinearImage, circles: &[CircleAnnotation]) -> LinearImage {
    let (w, h) = (img.width, img.height);
    let masked_by_any = |x: usize, y: usize| circles.iter().any(|c| c.contains(x, y, MASK_PAD));
    let mut out = img.clone();
    for c in circles {
        let inner = c.radius * MASK_PAD;
        let outer = inner + (0.2 * c.radius).max(2.0);
        let ring = CircleAnnotation { radius: outer, ..*c };
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for (x, y) in ring.pixels(w, h, 1.0) {
            if !masked_by_any(x, y) {
                let p = img.get(x, y);
                for k in 0..3 {
                    sum[k] += p[k];
                }
                n += 1;
            }
        }
        // a ring with no free pixel falls back to the image mean
        let fill = if n > 0 {
            sum.map(|s| s / n as f64)
        } else {
            let m = img.pixels().fold([0.0; 3], |a, p| [a[0] + p[0], a[1] + p[1], a[2] + p[2]]);
            m.map(|s| s / (w * h) as f64)
        };
        for (x, y) in c.pixels(w, h, MASK_PAD) {
            out.set(x, y, fill);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub pan: f64,
    pub tilt: f64,
    pub color: LightColor,
    pub highlight: (f64, f64),
    pub confidence: f64,
}

/// Full pipeline for one probe image and its reference image.
pub fn extract_probe(
    image: &LinearImage,
    reference: &LinearImage,
    specular: &CircleAnnotation,
    diffuse: &CircleAnnotation,
    mount_tilt_offset: f64,
) -> Result<ProbeResult> {
    let hl = find_highlight(image, specular)?;
    let raw = highlight_to_direction(specular, hl.x, hl.y)?;
    let ref_hl = find_highlight(reference, specular)?;
    let (rp, rt) = highlight_to_direction(specular, ref_hl.x, ref_hl.y)?;
    let cal = ReferenceCalibration { reference_pan: rp, reference_tilt: rt, mount_tilt_offset };
    let (pan, tilt) = apply_reference_correction(raw, &cal);
    Ok(ProbeResult {
        pan,
        tilt,
        color: diffuse_sphere_color(image, diffuse)?,
        highlight: (hl.x, hl.y),
        confidence: hl.confidence,
    })
}

/// Synthetic probe setup: one sphere of radius 1 resting on the floor,
/// viewed from far away with a narrow field of view, lit by a distant light
/// placed by camera-frame angles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeRig {
    pub size: usize,
    /// Sphere radius in pixels.
    pub radius_px: f64,
    pub camera_distance: f64,
    pub camera_tilt: f64,
    pub light_distance: f64,
    pub albedo: [f64; 3],
    pub specular: Option<Specular>,
    pub ambient: f64,
    /// Light intensity at unit falloff.
    pub exposure: f64,
}

impl ProbeRig {
    pub fn specular() -> Self {
        Self {
            size: 128,
            radius_px: 50.0,
            camera_distance: 60.0,
            camera_tilt: 10.0,
            light_distance: 1000.0,
            albedo: [0.02; 3],
            specular: Some(Specular { strength: 1.0, exponent: 300.0 }),
            ambient: 0.0,
            exposure: 1.0,
        }
    }

    /// Exposed so the lit side peaks near 0.9, below clipping.
    pub fn diffuse() -> Self {
        Self {
            albedo: [0.8; 3],
            specular: None,
            ambient: crate::renderer::DEFAULT_AMBIENT,
            exposure: 3.5,
            ..Self::specular()
        }
    }

    const CENTER: [f64; 3] = [0.0, 0.0, 1.0];

    fn camera(&self) -> CameraSpec {
        // angular radius asin(1 / d) maps to radius_px
        let half = (1.0 / self.camera_distance).asin().tan() * (0.5 * self.size as f64) / self.radius_px;
        CameraSpec {
            pose: SphericalPose { r: self.camera_distance, pan: 0.0, tilt: self.camera_tilt },
            look_at: Self::CENTER,
            vfov: 2.0 * half.atan().to_degrees(),
        }
    }

    /// Scene with the light at camera-frame `(pan, tilt)` around the sphere.
    pub fn scene(&self, pan: f64, tilt: f64, color: LightColor) -> SceneSpec {
        let camera = self.camera();
        let frame = CameraFrame::new(&camera);
        let (sp, cp) = pan.to_radians().sin_cos();
        let (st, ct) = tilt.to_radians().sin_cos();
        let dir = frame.right * (ct * sp) + frame.up * st - frame.forward * (ct * cp);
        let pos = Vector3::from(Self::CENTER) + dir * self.light_distance;
        let r = pos.norm();
        let pose = SphericalPose {
            r,
            pan: pos.x.atan2(pos.y).to_degrees().rem_euclid(360.0),
            tilt: (pos.z / r).asin().to_degrees(),
        };
        SceneSpec {
            seed: 0,
            objects: vec![ObjectSpec {
                kind: PrimitiveKind::Sphere,
                position: Self::CENTER,
                scale: [2.0; 3],
                yaw: 0.0,
                albedo: self.albedo,
                roughness: 0.0,
                specular: self.specular,
            }],
            room: RoomSpec {
                walls: 4,
                distance: 2.0 * self.light_distance,
                rotation: 0.0,
                wall_albedo: vec![[0.0; 3]; 4],
                wall_texture: vec![WallTexture::Flat; 4],
                floor_albedo: [0.0; 3],
            },
            // cancel the distance falloff
            light: LightSpec {
                pose,
                color,
                intensity: self.exposure * (r / crate::renderer::FALLOFF_REFERENCE).powi(2),
            },
            camera,
        }
    }

    pub fn render(&self, pan: f64, tilt: f64, color: LightColor) -> Result<LinearImage> {
        let prepared = PreparedScene::new(&self.scene(pan, tilt, color)).without_walls();
        render_prepared(&prepared, RenderOptions { ambient: self.ambient, ..RenderOptions::new(self.size, self.size) })
    }

    /// Annotation of the sphere silhouette.
    pub fn circle(&self, kind: SphereKind) -> CircleAnnotation {
        let c = 0.5 * self.size as f64;
        CircleAnnotation::new(c, c, self.radius_px, kind)
    }
}
