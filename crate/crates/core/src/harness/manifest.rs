//! Line-delimited JSON manifests: one header line, then one record per line.
//! Image paths are relative to the manifest's directory.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LumenError, Result};
use crate::lightmath::angle_distance;
use crate::probe::ProbeResult;
use crate::renderer::read_png;
use crate::scenegen::{gt_from_scene, LightGT, SceneSpec};

pub const MANIFEST_FORMAT: &str = "lumen-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = LumenError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| LumenError::InvalidArgument(format!("unknown split {s:?}; use train, val or test")))
    }
}

/// Where a probe-derived target came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSource {
    /// Annotation record id.
    pub annotation: String,
    pub result: ProbeResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: u64,
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub split: Split,
    pub gt: LightGT,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeSource>,
}

impl ManifestRecord {
    /// Absolute light tilt, known for synthetic records only.
    pub fn light_tilt(&self) -> Option<f64> {
        self.scene.as_ref().map(|s| s.light.pose.tilt)
    }

    /// The target implied by the record's source, if it has one.
    pub fn recomputed_gt(&self) -> Option<LightGT> {
        if let Some(scene) = &self.scene {
            return Some(gt_from_scene(scene));
        }
        self.probe.as_ref().map(|p| probe_gt(&p.result))
    }
}

/// Probe tilt is the light's elevation over the camera axis, the opposite
/// sign of `delta_tilt`.
pub(crate) fn probe_gt(r: &ProbeResult) -> LightGT {
    LightGT { delta_pan: r.pan, delta_tilt: crate::lightmath::wrap_delta(-r.tilt), color: r.color }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

fn format_err(detail: impl fmt::Display) -> LumenError {
    LumenError::format("manifest", detail)
}

/// Streams records after the header line.
pub struct ManifestWriter<W: Write> {
    w: W,
}

impl<W: Write> ManifestWriter<W> {
    pub fn new(mut w: W) -> Result<Self> {
        let header = Header { format: MANIFEST_FORMAT.into(), version: MANIFEST_VERSION };
        write_json_line(&mut w, &header)?;
        Ok(Self { w })
    }

    pub fn push(&mut self, record: &ManifestRecord) -> Result<()> {
        write_json_line(&mut self.w, record)
    }

    pub fn finish(mut self) -> Result<W> {
        self.w.flush().map_err(|e| LumenError::io("<manifest>", e))?;
        Ok(self.w)
    }
}

fn write_json_line(w: &mut impl Write, value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value).map_err(format_err)?;
    writeln!(w, "{line}").map_err(|e| LumenError::io("<manifest>", e))
}

pub fn write_manifest(w: &mut impl Write, records: &[ManifestRecord]) -> Result<()> {
    let mut mw = ManifestWriter::new(w)?;
    for r in records {
        mw.push(r)?;
    }
    mw.finish().map(|_| ())
}

pub fn read_manifest(r: impl BufRead) -> Result<Vec<ManifestRecord>> {
    let mut lines = r.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| format_err("empty file"))?;
    let first = first.map_err(|e| LumenError::io("<manifest>", e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| format_err(format!("header: {e}")))?;
    if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
        return Err(format_err(format!("unsupported format {:?} version {}", header.format, header.version)));
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| LumenError::io("<manifest>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format_err(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn save_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| LumenError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_manifest(&mut w, records).map_err(|e| relabel(e, path))?;
    w.flush().map_err(|e| LumenError::io(path, e))
}

/// Reads `path`, or `path/manifest.jsonl` when `path` is a directory.
/// Returns the records and the directory image paths are relative to.
pub fn load_manifest(path: &Path) -> Result<(Vec<ManifestRecord>, std::path::PathBuf)> {
    let file_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let file = File::open(&file_path).map_err(|e| LumenError::io(&file_path, e))?;
    let records = read_manifest(BufReader::new(file)).map_err(|e| relabel(e, &file_path))?;
    let root = file_path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((records, root))
}

fn relabel(e: LumenError, path: &Path) -> LumenError {
    match e {
        LumenError::Io { source, .. } => LumenError::io(path, source),
        LumenError::Format { what, detail } => {
            LumenError::Format { what, detail: format!("{}: {detail}", path.display()) }
        }
        other => other,
    }
}

/// Tolerance of the stored target against its recomputation.
pub const GT_TOLERANCE: f64 = 1e-9;

/// Checks that the image decodes at the declared size and that the stored
/// target matches its source.
pub fn verify_record(root: &Path, rec: &ManifestRecord) -> Result<()> {
    let bad = |d: String| Err(format_err(format!("record {}: {d}", rec.id)));
    let img = read_png(&root.join(&rec.image))?;
    if (img.width(), img.height()) != (rec.width, rec.height) {
        return bad(format!("image is {}x{}, declared {}x{}", img.width(), img.height(), rec.width, rec.height));
    }
    if let Some(expected) = rec.recomputed_gt() {
        let g = &rec.gt;
        let close = angle_distance(g.delta_pan, expected.delta_pan) <= GT_TOLERANCE
            && angle_distance(g.delta_tilt, expected.delta_tilt) <= GT_TOLERANCE
            && g.color.to_array().iter().zip(expected.color.to_array()).all(|(a, b)| (a - b).abs() <= GT_TOLERANCE);
        if !close {
            return bad(format!("stored target {g:?} differs from recomputed {expected:?}"));
        }
    }
    Ok(())
}
