use std::fs::{self, File};
use std::io::{BufWriter, Cursor};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{ManifestRecord, ManifestWriter, Split, MANIFEST_FILE};
use super::with_workers;
use crate::error::{LumenError, Result};
use crate::renderer::{render, tonemap_encode, RenderOptions, DEFAULT_AMBIENT};
use crate::scenegen::{gt_from_scene, sample_scene, scene_rng, SceneConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    /// Square image side in pixels.
    pub size: usize,
    pub scene: SceneConfig,
    /// Samples per pixel, 1 or 4.
    pub samples: usize,
    pub ambient: f64,
    /// Worker cap; `None` defers to `LUMEN_THREADS`, then to all cores.
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 2500,
            seed: 0,
            size: 64,
            scene: SceneConfig::sid2(),
            samples: 1,
            ambient: DEFAULT_AMBIENT,
            threads: None,
        }
    }
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 80/10/10 train/val/test assignment from a hash of the seed and index.
pub fn split_for(seed: u64, index: u64) -> Split {
    match mix64(seed ^ mix64(index)) % 10 {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

/// Image path of record `id`, relative to the dataset root.
pub fn image_name(id: u64) -> String {
    format!("images/{id:06}.png")
}

/// Records rendered in parallel between two writer flushes.
const CHUNK: usize = 64;

fn make_record(cfg: &DatasetConfig, id: u64) -> Result<(ManifestRecord, Vec<u8>)> {
    let scene = sample_scene(&mut scene_rng(cfg.seed, id), &cfg.scene)?;
    let opts = RenderOptions { ambient: cfg.ambient, samples: cfg.samples, ..RenderOptions::new(cfg.size, cfg.size) };
    let img = tonemap_encode(&render(&scene, opts)?);
    let mut png = Vec::new();
    let image = image_name(id);
    img.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(|source| LumenError::Image { path: image.clone().into(), source })?;
    let record = ManifestRecord {
        id,
        image,
        width: cfg.size as u32,
        height: cfg.size as u32,
        split: split_for(cfg.seed, id),
        gt: gt_from_scene(&scene),
        scene: Some(scene),
        probe: None,
    };
    Ok((record, png))
}

fn at_path(e: LumenError, path: &Path) -> LumenError {
    match e {
        LumenError::Io { source, .. } => LumenError::io(path, source),
        other => other,
    }
}

/// Samples, renders and writes `cfg.count` scenes under `out_dir`: PNGs in
/// `images/` and `manifest.jsonl`. Output bytes depend only on `cfg`.
pub fn generate_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Vec<ManifestRecord>> {
    if cfg.count == 0 {
        return Err(LumenError::InvalidArgument("dataset size must be at least 1".into()));
    }
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| LumenError::io(&images, e))?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let file = File::create(&manifest_path).map_err(|e| LumenError::io(&manifest_path, e))?;
    let mut writer = ManifestWriter::new(BufWriter::new(file))?;
    let mut records = Vec::with_capacity(cfg.count);

    let ids: Vec<u64> = (0..cfg.count as u64).collect();
    with_workers(cfg.threads, || -> Result<()> {
        for chunk in ids.chunks(CHUNK) {
            let rendered: Vec<Result<(ManifestRecord, Vec<u8>)>> =
                chunk.par_iter().map(|&id| make_record(cfg, id)).collect();
            for item in rendered {
                let (record, png) = item?;
                let path = out_dir.join(&record.image);
                fs::write(&path, &png).map_err(|e| LumenError::io(&path, e))?;
                writer.push(&record).map_err(|e| at_path(e, &manifest_path))?;
                records.push(record);
            }
        }
        Ok(())
    })??;
    writer.finish().map_err(|e| at_path(e, &manifest_path))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_proportions() {
        let mut counts = [0usize; 3];
        for i in 0..10_000 {
            counts[split_for(11, i) as usize] += 1;
        }
        assert!((7700..8300).contains(&counts[0]), "{counts:?}");
        assert!((800..1200).contains(&counts[1]), "{counts:?}");
        assert!((800..1200).contains(&counts[2]), "{counts:?}");
        // the seed reshuffles assignments
        assert!((0..100).any(|i| split_for(11, i) != split_for(12, i)));
    }
}
