//! Angle encodings, angular error metrics and blackbody light colors.
//!
//! Angles are plain `f64` degrees. Camera-relative differences live in
//! (−180, 180]; absolute pans live in [0, 360). Directions use
//! `(cos t · sin p, cos t · cos p, sin t)`: pan 0 looks along +y, pan 90
//! along +x, and tilt 90 is the zenith.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LumenError, Result};

/// Wraps to (−180, 180].
pub fn wrap_delta(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Wraps to [0, 360).
pub fn wrap_pan(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    // rem_euclid can round up to the modulus itself for tiny negatives
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

/// Absolute angular distance between two angles, in [0, 180].
pub fn angle_distance(a: f64, b: f64) -> f64 {
    wrap_delta(a - b).abs()
}

pub fn encode_angle(deg: f64) -> (f64, f64) {
    wrap_delta(deg).to_radians().sin_cos()
}

/// Inverse of [`encode_angle`]. The pair need not be normalized.
pub fn decode_angle(sin: f64, cos: f64) -> Result<f64> {
    if sin == 0.0 && cos == 0.0 {
        return Err(LumenError::Degenerate("decode_angle of (0, 0)".into()));
    }
    if !(sin.is_finite() && cos.is_finite()) {
        return Err(LumenError::InvalidArgument(format!("decode_angle of ({sin}, {cos})")));
    }
    Ok(wrap_delta(sin.atan2(cos).to_degrees()))
}

/// Sine and cosine of pan and tilt; the pan pair comes first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirectionEncoding {
    pub sin_pan: f64,
    pub cos_pan: f64,
    pub sin_tilt: f64,
    pub cos_tilt: f64,
}

impl DirectionEncoding {
    pub fn from_angles(pan: f64, tilt: f64) -> Self {
        let (sin_pan, cos_pan) = encode_angle(pan);
        let (sin_tilt, cos_tilt) = encode_angle(tilt);
        Self { sin_pan, cos_pan, sin_tilt, cos_tilt }
    }

    pub fn decode(&self) -> Result<(f64, f64)> {
        Ok((decode_angle(self.sin_pan, self.cos_pan)?, decode_angle(self.sin_tilt, self.cos_tilt)?))
    }
}

pub fn pan_tilt_to_unit(pan: f64, tilt: f64) -> Vector3<f64> {
    let (sp, cp) = pan.to_radians().sin_cos();
    let (st, ct) = tilt.to_radians().sin_cos();
    Vector3::new(ct * sp, ct * cp, st)
}

/// Angle between two vectors in degrees, stable near 0 and 180.
fn vector_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

/// 3D angle between the unit vectors of two `(pan, tilt)` pairs, in [0, 180].
pub fn direction_error_deg(a: (f64, f64), b: (f64, f64)) -> f64 {
    vector_angle_deg(&pan_tilt_to_unit(a.0, a.1), &pan_tilt_to_unit(b.0, b.1))
}

/// Linear RGB light color. Only its direction carries meaning.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightColor {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl LightColor {
    pub const WHITE: LightColor = LightColor { r: 1.0, g: 1.0, b: 1.0 };

    pub fn new(r: f64, g: f64, b: f64) -> Self {
        Self { r, g, b }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }

    pub fn from_array(c: [f64; 3]) -> Self {
        Self::new(c[0], c[1], c[2])
    }

    pub fn max_channel(self) -> f64 {
        self.r.max(self.g).max(self.b)
    }

    /// Scales so the largest channel is 1.
    pub fn normalized(self) -> Result<Self> {
        let m = self.max_channel();
        if !(m > 0.0 && m.is_finite()) {
            return Err(LumenError::Degenerate(format!("color {self:?} has no positive channel")));
        }
        Ok(Self::new(self.r / m, self.g / m, self.b / m))
    }

    fn vector(self) -> Vector3<f64> {
        Vector3::new(self.r, self.g, self.b)
    }
}

/// Angle between two RGB vectors in degrees; scale invariant.
pub fn rgb_angular_error_deg(a: LightColor, b: LightColor) -> Result<f64> {
    let (va, vb) = (a.vector(), b.vector());
    if va.norm() == 0.0 || vb.norm() == 0.0 {
        return Err(LumenError::Degenerate("rgb angular error of a zero vector".into()));
    }
    Ok(vector_angle_deg(&va, &vb))
}

pub const MIN_CCT: f64 = 1000.0;
pub const MAX_CCT: f64 = 15000.0;

/// Default bound on the chromaticity offset from the blackbody locus.
pub const DEFAULT_LOCUS_OFFSET: f64 = 0.02;

/// Piecewise Gaussian with separate widths below and above the mean.
fn lobe(lambda: f64, mu: f64, below: f64, above: f64) -> f64 {
    let s = if lambda < mu { below } else { above };
    let t = (lambda - mu) / s;
    (-0.5 * t * t).exp()
}

/// CIE 1931 2° color matching functions, multi-lobe analytic fit.
pub fn cie_xyz_bar(lambda_nm: f64) -> [f64; 3] {
    let l = lambda_nm;
    let x =
        1.056 * lobe(l, 599.8, 37.9, 31.0) + 0.362 * lobe(l, 442.0, 16.0, 26.7) - 0.065 * lobe(l, 501.1, 20.4, 26.2);
    let y = 0.821 * lobe(l, 568.8, 46.9, 40.5) + 0.286 * lobe(l, 530.9, 16.3, 31.1);
    let z = 1.217 * lobe(l, 437.0, 11.8, 36.0) + 0.681 * lobe(l, 459.0, 26.0, 13.8);
    [x, y, z]
}

/// Planck spectral radiance up to a constant factor.
fn planck(lambda_nm: f64, cct: f64) -> f64 {
    const C2: f64 = 1.438_776_877e-2; // m·K
    let lm = lambda_nm * 1e-9;
    1.0 / (lm.powi(5) * ((C2 / (lm * cct)).exp_m1()))
}

fn check_cct(cct: f64) -> Result<()> {
    if !(MIN_CCT..=MAX_CCT).contains(&cct) {
        return Err(LumenError::InvalidArgument(format!("cct {cct} K outside [{MIN_CCT}, {MAX_CCT}]")));
    }
    Ok(())
}

/// Blackbody XYZ with Y = 1.
pub fn planckian_xyz(cct: f64) -> Result<Vector3<f64>> {
    check_cct(cct)?;
    let mut xyz = Vector3::zeros();
    let mut lambda = 360.0;
    while lambda <= 830.0 {
        let p = planck(lambda, cct);
        let [x, y, z] = cie_xyz_bar(lambda);
        xyz += Vector3::new(x, y, z) * p;
        lambda += 1.0;
    }
    Ok(xyz / xyz.y)
}

pub fn xyz_to_linear_srgb() -> Matrix3<f64> {
    Matrix3::new(
        3.2404542, -1.5371385, -0.4985314, //
        -0.9692660, 1.8760108, 0.0415560, //
        0.0556434, -0.2040259, 1.0572252,
    )
}

pub fn linear_srgb_to_xyz() -> Matrix3<f64> {
    Matrix3::new(
        0.4124564, 0.3575761, 0.1804375, //
        0.2126729, 0.7151522, 0.0721750, //
        0.0193339, 0.1191920, 0.9503041,
    )
}

/// CIE 1960 (u, v) chromaticity.
pub fn xyz_to_uv(xyz: &Vector3<f64>) -> (f64, f64) {
    let d = xyz.x + 15.0 * xyz.y + 3.0 * xyz.z;
    (4.0 * xyz.x / d, 6.0 * xyz.y / d)
}

/// XYZ with Y = 1 for a CIE 1960 chromaticity.
pub fn uv_to_xyz(u: f64, v: f64) -> Vector3<f64> {
    let d = 2.0 * u - 8.0 * v + 4.0;
    let (x, y) = (3.0 * u / d, 2.0 * v / d);
    Vector3::new(x / y, 1.0, (1.0 - x - y) / y)
}

pub fn rgb_to_uv(c: LightColor) -> (f64, f64) {
    xyz_to_uv(&(linear_srgb_to_xyz() * c.vector()))
}

fn xyz_to_color(xyz: &Vector3<f64>) -> LightColor {
    let rgb = xyz_to_linear_srgb() * xyz;
    LightColor::new(rgb.x, rgb.y, rgb.z)
}

/// Linear sRGB of a blackbody at `cct`, negative channels clamped, max channel 1.
pub fn planckian_rgb(cct: f64) -> Result<LightColor> {
    let c = xyz_to_color(&planckian_xyz(cct)?);
    LightColor::new(c.r.max(0.0), c.g.max(0.0), c.b.max(0.0)).normalized()
}

/// Blackbody color at a uniform random temperature, moved off the locus by a
/// uniform random offset in the (u, v) disc of radius `max_offset`.
pub fn sample_near_planckian<R: Rng + ?Sized>(
    rng: &mut R,
    cct_range: (f64, f64),
    max_offset: f64,
) -> Result<LightColor> {
    let (lo, hi) = cct_range;
    check_cct(lo)?;
    check_cct(hi)?;
    if lo > hi || !(max_offset >= 0.0) {
        return Err(LumenError::InvalidArgument(format!("cct range {cct_range:?}, offset {max_offset}")));
    }
    let cct = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    if max_offset == 0.0 {
        return planckian_rgb(cct);
    }
    let (u0, v0) = xyz_to_uv(&planckian_xyz(cct)?);
    // offsets leaving the RGB gamut would be clamped and move off the disc
    for _ in 0..100 {
        let r = max_offset * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let c = xyz_to_color(&uv_to_xyz(u0 + r * phi.cos(), v0 + r * phi.sin()));
        if c.r >= 0.0 && c.g >= 0.0 && c.b >= 0.0 {
            return c.normalized();
        }
    }
    planckian_rgb(cct)
}
