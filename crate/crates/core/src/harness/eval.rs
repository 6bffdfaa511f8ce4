use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{ManifestRecord, Split};
use crate::error::{LumenError, Result};
use crate::estimator::{LightPredictor, Prediction};
use crate::lightmath::{angle_distance, direction_error_deg, rgb_angular_error_deg, wrap_delta};
use crate::renderer::read_png;

/// Errors of one prediction, in degrees, with the stratification keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleErrors {
    pub id: u64,
    pub pan: f64,
    pub tilt: f64,
    pub direction: f64,
    pub color: f64,
    pub gt_delta_pan: f64,
    /// Absolute light tilt; unknown for probe-derived records.
    pub light_tilt: Option<f64>,
}

pub fn sample_errors(pred: &Prediction, rec: &ManifestRecord) -> Result<SampleErrors> {
    let gt = &rec.gt;
    Ok(SampleErrors {
        id: rec.id,
        pan: angle_distance(pred.delta_pan, gt.delta_pan),
        tilt: angle_distance(pred.delta_tilt, gt.delta_tilt),
        direction: direction_error_deg((pred.delta_pan, pred.delta_tilt), (gt.delta_pan, gt.delta_tilt)),
        color: rgb_angular_error_deg(pred.color, gt.color)?,
        gt_delta_pan: gt.delta_pan,
        light_tilt: rec.light_tilt(),
    })
}

/// One value per error column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub pan: f64,
    pub tilt: f64,
    pub direction: f64,
    pub color: f64,
}

impl Aggregate {
    const NAN: Aggregate = Aggregate { pan: f64::NAN, tilt: f64::NAN, direction: f64::NAN, color: f64::NAN };

    fn of(samples: &[&SampleErrors], reduce: fn(Vec<f64>) -> f64) -> Self {
        if samples.is_empty() {
            return Self::NAN;
        }
        let col = |f: fn(&SampleErrors) -> f64| reduce(samples.iter().map(|s| f(s)).collect());
        Self { pan: col(|s| s.pan), tilt: col(|s| s.tilt), direction: col(|s| s.direction), color: col(|s| s.color) }
    }

    /// Column means, summed in the given order.
    pub fn mean(samples: &[&SampleErrors]) -> Self {
        Self::of(samples, |v| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Column medians; the mean of the two middle values for even counts.
    pub fn median(samples: &[&SampleErrors]) -> Self {
        Self::of(samples, |mut v| {
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    /// Sorted by record id.
    pub samples: Vec<SampleErrors>,
    pub mean: Aggregate,
    pub median: Aggregate,
}

impl EvalReport {
    /// Sorts by id so that aggregates do not depend on input order.
    pub fn from_samples(split: Split, mut samples: Vec<SampleErrors>) -> Result<Self> {
        samples.sort_by_key(|s| s.id);
        if samples.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(LumenError::InvalidArgument("duplicate record ids in evaluation".into()));
        }
        let refs: Vec<&SampleErrors> = samples.iter().collect();
        let (mean, median) = (Aggregate::mean(&refs), Aggregate::median(&refs));
        Ok(Self { split, samples, mean, median })
    }

    /// One-row table of the overall errors.
    pub fn overall_table(&self, median: bool) -> String {
        let agg = if median { self.median } else { self.mean };
        format_table("Split", &[(format!("{} (n={})", self.split, self.samples.len()), agg)])
    }
}

/// Predicts every record of `split` and scores it. Image paths resolve
/// against `root`.
pub fn evaluate<P: LightPredictor + ?Sized>(
    predictor: &P,
    root: &Path,
    records: &[ManifestRecord],
    split: Split,
) -> Result<EvalReport> {
    let chosen: Vec<&ManifestRecord> = records.iter().filter(|r| r.split == split).collect();
    if chosen.is_empty() {
        return Err(LumenError::InvalidArgument(format!("split {split} has no records")));
    }
    let samples = chosen
        .par_iter()
        .map(|rec| {
            let img = read_png(&root.join(&rec.image))?;
            sample_errors(&predictor.predict_image(&img)?, rec)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_samples(split, samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Tilt,
    Pan,
    FrontBack,
}

impl FromStr for Scheme {
    type Err = LumenError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tilt" => Ok(Scheme::Tilt),
            "pan" => Ok(Scheme::Pan),
            "frontback" => Ok(Scheme::FrontBack),
            _ => Err(LumenError::InvalidArgument(format!("unknown scheme {s:?}; use tilt, pan or frontback"))),
        }
    }
}

/// Light tilt levels `[30, 50)`, `[50, 70)` and `[70, 90]` as 0, 1, 2.
pub fn tilt_level(light_tilt: f64) -> Option<usize> {
    match light_tilt {
        t if (30.0..50.0).contains(&t) => Some(0),
        t if (50.0..70.0).contains(&t) => Some(1),
        t if (70.0..=90.0).contains(&t) => Some(2),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PanQuadrant {
    Front,
    Right,
    Back,
    Left,
}

/// 90° quadrants of `delta_pan`; ±45° fall to the front, ±135° to the back.
pub fn pan_quadrant(delta_pan: f64) -> PanQuadrant {
    let d = wrap_delta(delta_pan);
    match d.abs() {
        a if a <= 45.0 => PanQuadrant::Front,
        a if a >= 135.0 => PanQuadrant::Back,
        _ if d > 0.0 => PanQuadrant::Right,
        _ => PanQuadrant::Left,
    }
}

/// Light tilt band kept by the pan scheme.
pub const PAN_SCHEME_TILT: (f64, f64) = (30.0, 70.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub label: String,
    pub count: usize,
    /// NaN columns when the stratum is empty.
    pub mean: Aggregate,
    pub median: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratifiedTable {
    pub scheme: Scheme,
    pub rows: Vec<Stratum>,
}

impl StratifiedTable {
    pub fn render(&self, median: bool) -> String {
        let title = match self.scheme {
            Scheme::Tilt => "Tilt range",
            Scheme::Pan => "Pan range",
            Scheme::FrontBack => "Light",
        };
        let rows: Vec<(String, Aggregate)> = self
            .rows
            .iter()
            .map(|r| (format!("{} (n={})", r.label, r.count), if median { r.median } else { r.mean }))
            .collect();
        format_table(title, &rows)
    }
}

/// Groups the report's samples by `scheme`. Samples outside every stratum,
/// or without a light tilt where one is needed, are left out.
pub fn stratify(report: &EvalReport, scheme: Scheme) -> StratifiedTable {
    let (labels, key): (&[&str], Box<dyn Fn(&SampleErrors) -> Option<usize>>) = match scheme {
        Scheme::Tilt => (
            &["level 1 [30,50)", "level 2 [50,70)", "level 3 [70,90]"],
            Box::new(|s: &SampleErrors| s.light_tilt.and_then(tilt_level)),
        ),
        Scheme::Pan => (
            &["front", "right", "back", "left"],
            Box::new(|s: &SampleErrors| {
                let t = s.light_tilt?;
                (PAN_SCHEME_TILT.0..=PAN_SCHEME_TILT.1).contains(&t).then(|| pan_quadrant(s.gt_delta_pan) as usize)
            }),
        ),
        Scheme::FrontBack => (
            &["front", "back"],
            Box::new(|s: &SampleErrors| Some(if wrap_delta(s.gt_delta_pan).abs() <= 90.0 { 0 } else { 1 })),
        ),
    };
    let rows = labels
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let members: Vec<&SampleErrors> = report.samples.iter().filter(|s| key(s) == Some(i)).collect();
            Stratum {
                label: label.to_string(),
                count: members.len(),
                mean: Aggregate::mean(&members),
                median: Aggregate::median(&members),
            }
        })
        .collect();
    StratifiedTable { scheme, rows }
}

/// Plain-text table with the columns Pan, Tilt, Direction and Color.
pub fn format_table(title: &str, rows: &[(String, Aggregate)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).chain([title.len()]).max().unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(out, "{title:<width$} | {:>9} | {:>9} | {:>9} | {:>9}", "Pan", "Tilt", "Direction", "Color");
    let _ = writeln!(out, "{}", "-".repeat(width + 4 * 12));
    for (label, a) in rows {
        let _ = writeln!(
            out,
            "{label:<width$} | {:>9.2} | {:>9.2} | {:>9.2} | {:>9.2}",
            a.pan, a.tilt, a.direction, a.color
        );
    }
    out
}
