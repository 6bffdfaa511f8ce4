//! Prediction overlays: a GT-lit sphere (top left), a prediction-lit sphere
//! (top right) and a pole with its cast shadow under the prediction (below
//! the GT sphere).
//!
//! Sphere shading uses the camera-aligned frame x right, y up, z toward the
//! viewer. The pole stands on a ground frame x right, y away from the
//! viewer, z up. In both, the light sits at `pan` around the vertical axis
//! (positive to the right, 0 behind the viewer) and `elevation` above the
//! horizon.

use image::RgbImage;
use nalgebra::Vector3;

use crate::estimator::Prediction;
use crate::lightmath::LightColor;
use crate::renderer::{encode_channel, LinearImage};
use crate::scenegen::LightGT;

const BACKDROP: f64 = 0.02;
const SPHERE_AMBIENT: f64 = 0.08;
const GROUND: f64 = 0.35;
const SHADOW: f64 = 0.06;
const POLE: f64 = 0.9;

/// Pixel placement of the overlay parts; origins are top-left corners.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OverlayLayout {
    pub sphere_radius: usize,
    /// Side of a sphere patch, backdrop included.
    pub patch: usize,
    pub gt_origin: (usize, usize),
    pub prediction_origin: (usize, usize),
    pub panel_origin: (usize, usize),
}

impl OverlayLayout {
    pub fn for_size(w: usize, h: usize) -> Self {
        let r = (w.min(h) / 10).max(2);
        let patch = 2 * r + 2;
        let m = (w.min(h) / 32).max(1);
        Self {
            sphere_radius: r,
            patch,
            gt_origin: (m, m),
            prediction_origin: (w.saturating_sub(m + patch), m),
            panel_origin: (m, 2 * m + patch),
        }
    }
}

fn sphere_light(pan: f64, elevation: f64) -> Vector3<f64> {
    let (sp, cp) = pan.to_radians().sin_cos();
    let (se, ce) = elevation.to_radians().sin_cos();
    Vector3::new(ce * sp, se, ce * cp)
}

/// A Lambertian sphere of `radius` pixels on a dark square backdrop,
/// tinted by `color` scaled to max channel 1.
pub fn sphere_patch(pan: f64, elevation: f64, color: LightColor, radius: usize) -> LinearImage {
    let l = sphere_light(pan, elevation);
    let tint = color.normalized().map(|c| c.to_array()).unwrap_or([1.0; 3]);
    let side = 2 * radius + 2;
    let c = side as f64 / 2.0;
    let r = radius as f64;
    LinearImage::from_fn(side, side, |x, y| {
        let u = (x as f64 + 0.5 - c) / r;
        let v = (c - (y as f64 + 0.5)) / r;
        let rho2 = u * u + v * v;
        if rho2 >= 1.0 {
            return [BACKDROP; 3];
        }
        let n = Vector3::new(u, v, (1.0 - rho2).sqrt());
        let shade = SPHERE_AMBIENT + (1.0 - SPHERE_AMBIENT) * n.dot(&l).max(0.0);
        tint.map(|t| t * shade)
    })
}

/// Ground-plane offset `-h · (Lx, Ly) / Lz` of the shadow tip of a pole of
/// height `h`; `None` for a light at or below the horizon.
pub fn pole_shadow_tip(pan: f64, elevation: f64, height: f64) -> Option<(f64, f64)> {
    let (sp, cp) = pan.to_radians().sin_cos();
    let (se, ce) = elevation.to_radians().sin_cos();
    let l = Vector3::new(ce * sp, -ce * cp, se);
    (l.z > 1e-9).then(|| (-height * l.x / l.z, -height * l.y / l.z))
}

fn pole_panel(pan: f64, elevation: f64, side: usize) -> LinearImage {
    let mut img = LinearImage::from_fn(side, side, |_, _| [GROUND; 3]);
    let scale = side as f64 * 0.4;
    let base = (side as f64 * 0.5, side as f64 * 0.8);
    // ground (gx, gy) maps to the screen with depth foreshortened by half
    let to_screen = |gx: f64, gy: f64| (base.0 + gx * scale, base.1 - 0.5 * gy * scale);
    if let Some((tx, ty)) = pole_shadow_tip(pan, elevation, 1.0) {
        draw_segment(&mut img, base, to_screen(tx, ty), [SHADOW; 3]);
    }
    draw_segment(&mut img, base, (base.0, base.1 - scale), [POLE; 3]);
    img
}

fn draw_segment(img: &mut LinearImage, a: (f64, f64), b: (f64, f64), c: [f64; 3]) {
    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    // long shadows leave the panel; stop a little past its diagonal
    let limit = 2.0 * (img.width + img.height) as f64;
    let steps = (len.min(limit) * 4.0).ceil() as usize + 1;
    for i in 0..steps {
        let t = if len > 0.0 { (i as f64 * 0.25 / len).min(1.0) } else { 0.0 };
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        if x >= 0.0 && y >= 0.0 && (x as usize) < img.width && (y as usize) < img.height {
            img.set(x as usize, y as usize, c);
        }
    }
}

fn paste(dst: &mut RgbImage, src: &LinearImage, (ox, oy): (usize, usize)) {
    for y in 0..src.height {
        for x in 0..src.width {
            let (dx, dy) = ((ox + x) as u32, (oy + y) as u32);
            if dx < dst.width() && dy < dst.height() {
                dst.put_pixel(dx, dy, image::Rgb(src.get(x, y).map(encode_channel)));
            }
        }
    }
}

/// Composites the overlay onto a copy of `base`. Elevations are
/// `camera_tilt − delta_tilt`; with `camera_tilt = 0` they are the
/// camera-relative elevations.
pub fn render_overlay(prediction: &Prediction, gt: &LightGT, base: &RgbImage, camera_tilt: f64) -> RgbImage {
    let (w, h) = (base.width() as usize, base.height() as usize);
    let layout = OverlayLayout::for_size(w, h);
    let r = layout.sphere_radius;
    let mut out = base.clone();
    let gt_elev = camera_tilt - gt.delta_tilt;
    let pred_elev = camera_tilt - prediction.delta_tilt;
    paste(&mut out, &sphere_patch(gt.delta_pan, gt_elev, gt.color, r), layout.gt_origin);
    paste(&mut out, &sphere_patch(prediction.delta_pan, pred_elev, prediction.color, r), layout.prediction_origin);
    paste(&mut out, &pole_panel(prediction.delta_pan, pred_elev, layout.patch), layout.panel_origin);
    out
}
