//! Probe annotation files: one header line, then one record per image
//! naming the image, its reference image and the two sphere circles.
//! Paths are relative to the annotation file's directory.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{probe_gt, ManifestRecord, ManifestWriter, ProbeSource, Split, MANIFEST_FILE};
use crate::error::{LumenError, Result};
use crate::probe::{extract_probe, mask_spheres, CircleAnnotation, SphereKind, DEFAULT_MOUNT_TILT};
use crate::renderer::{decode_to_linear, read_png, tonemap_encode, write_png};

pub const ANNOTATION_FORMAT: &str = "lumen-probe-annotations";
pub const ANNOTATION_VERSION: u32 = 1;

/// Circle in pixels; the record field it sits in gives its kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCircle {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl ProbeCircle {
    pub fn with_kind(self, kind: SphereKind) -> CircleAnnotation {
        CircleAnnotation::new(self.cx, self.cy, self.radius, kind)
    }
}

fn default_mount() -> f64 {
    DEFAULT_MOUNT_TILT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeAnnotation {
    pub id: String,
    pub image: String,
    /// Image of the same scene with light and camera pointing the same way.
    pub reference: String,
    pub specular: ProbeCircle,
    pub diffuse: ProbeCircle,
    #[serde(default = "default_mount")]
    pub mount_tilt: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

fn format_err(detail: impl std::fmt::Display) -> LumenError {
    LumenError::format("annotation file", detail)
}

pub fn write_annotations(w: &mut impl Write, records: &[ProbeAnnotation]) -> Result<()> {
    let io = |e| LumenError::io("<annotations>", e);
    let header = Header { format: ANNOTATION_FORMAT.into(), version: ANNOTATION_VERSION };
    writeln!(w, "{}", serde_json::to_string(&header).map_err(format_err)?).map_err(io)?;
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).map_err(format_err)?).map_err(io)?;
    }
    Ok(())
}

pub fn read_annotations(r: impl BufRead) -> Result<Vec<ProbeAnnotation>> {
    let mut lines = r.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| format_err("empty file"))?;
    let header: Header = serde_json::from_str(&first.map_err(|e| LumenError::io("<annotations>", e))?)
        .map_err(|e| format_err(format!("header: {e}")))?;
    if header.format != ANNOTATION_FORMAT || header.version != ANNOTATION_VERSION {
        return Err(format_err(format!("unsupported format {:?} version {}", header.format, header.version)));
    }
    let mut out: Vec<ProbeAnnotation> = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| LumenError::io("<annotations>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format_err(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProbeRunOptions {
    /// Blank both spheres in the written images.
    pub mask_spheres: bool,
    pub threads: Option<usize>,
}

/// Extracts probe targets for every annotation and writes a manifest of
/// re-encoded images under `out_dir`. Masking is the only step that differs
/// between the two image conditions.
pub fn run_probe_annotations(
    annotation_file: &Path,
    out_dir: &Path,
    opts: ProbeRunOptions,
) -> Result<Vec<ManifestRecord>> {
    let file = File::open(annotation_file).map_err(|e| LumenError::io(annotation_file, e))?;
    let annotations = read_annotations(BufReader::new(file))?;
    let root = annotation_file.parent().unwrap_or(Path::new(""));
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| LumenError::io(&images, e))?;

    let processed = super::with_workers(opts.threads, || {
        annotations
            .par_iter()
            .enumerate()
            .map(|(i, a)| process(root, i as u64, a, opts.mask_spheres))
            .collect::<Result<Vec<_>>>()
    })??;

    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mfile = File::create(&manifest_path).map_err(|e| LumenError::io(&manifest_path, e))?;
    let mut writer = ManifestWriter::new(std::io::BufWriter::new(mfile))?;
    let mut records = Vec::with_capacity(processed.len());
    for (record, img) in processed {
        write_png(&img, &out_dir.join(&record.image))?;
        writer.push(&record)?;
        records.push(record);
    }
    writer.finish().map_err(|e| match e {
        LumenError::Io { source, .. } => LumenError::io(&manifest_path, source),
        other => other,
    })?;
    Ok(records)
}

fn process(root: &Path, id: u64, a: &ProbeAnnotation, mask: bool) -> Result<(ManifestRecord, image::RgbImage)> {
    let image = decode_to_linear(&read_png(&root.join(&a.image))?);
    let reference = decode_to_linear(&read_png(&root.join(&a.reference))?);
    let spec = a.specular.with_kind(SphereKind::Specular);
    let diff = a.diffuse.with_kind(SphereKind::Diffuse);
    let result = extract_probe(&image, &reference, &spec, &diff, a.mount_tilt)
        .map_err(|e| LumenError::Probe(format!("annotation {:?}: {e}", a.id)))?;
    let out = if mask { mask_spheres(&image, &[spec, diff]) } else { image };
    let encoded = tonemap_encode(&out);
    let record = ManifestRecord {
        id,
        image: super::image_name(id),
        width: encoded.width(),
        height: encoded.height(),
        split: Split::Test,
        gt: probe_gt(&result),
        scene: None,
        probe: Some(ProbeSource { annotation: a.id.clone(), result }),
    };
    Ok((record, encoded))
}
