//! On-disk dataset layout.
//!
//! ```text
//! shapes.json          manifest: generation settings and the shape catalog
//! NNN_input.png        canonical input view
//! NNN_view0.png        fixed view at 0°   (likewise view90, view180)
//! NNN_queries.bin      u64 count, then count × { x f64, y f64, z f64, label u8 }, little-endian
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{render_ground_truth, sample_queries, ProceduralShape, QuerySet};
use crate::par;
use crate::pointrender::SplatConfig;
use crate::scenegeom::ImageRgba;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "shapes.json";
const VIEW_SUFFIXES: [&str; 3] = ["view0", "view90", "view180"];
const RECORD_BYTES: usize = 3 * 8 + 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub image_size: usize,
    pub n_uniform: usize,
    pub n_surface: usize,
    pub noise_sd: f64,
    pub splat: SplatConfig,
    pub shapes: Vec<ProceduralShape>,
}

impl DatasetManifest {
    /// Seed for one random stream of one sample.
    pub fn sample_seed(&self, index: usize, stream: u64) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add((index as u64) << 8).wrapping_add(stream)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() {
            return Err(Error::contract("dataset manifest", "no shapes"));
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(4) {
            return Err(Error::contract(
                "dataset manifest",
                format!("image_size {} must be a multiple of 4 and at least 8", self.image_size),
            ));
        }
        self.splat.validate()?;
        self.shapes.iter().try_for_each(ProceduralShape::validate)
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub index: usize,
    pub input: ImageRgba,
    pub views: [ImageRgba; 3],
    pub queries: QuerySet,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

fn sample_path(dir: &Path, index: usize, suffix: &str) -> PathBuf {
    dir.join(format!("{index:03}_{suffix}"))
}

impl Dataset {
    /// Renders every shape and samples its queries, deterministically per manifest.
    pub fn generate(manifest: DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        let samples = par::map_indexed(manifest.shapes.len(), |i| {
            let shape = &manifest.shapes[i];
            let gt = render_ground_truth(shape, manifest.image_size, &manifest.splat, manifest.sample_seed(i, 0))?;
            let queries = sample_queries(
                shape,
                manifest.n_uniform,
                manifest.n_surface,
                manifest.noise_sd,
                manifest.sample_seed(i, 1),
            )?;
            Ok(Sample { index: i, input: gt.input, views: gt.views, queries })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, samples })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        for s in &self.samples {
            s.input.save_png(sample_path(dir, s.index, "input.png"))?;
            for (view, suffix) in s.views.iter().zip(VIEW_SUFFIXES) {
                view.save_png(sample_path(dir, s.index, &format!("{suffix}.png")))?;
            }
            write_queries(&s.queries, sample_path(dir, s.index, "queries.bin"))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        manifest.validate()?;
        let samples = (0..manifest.shapes.len())
            .map(|i| {
                let [a, b, c] = VIEW_SUFFIXES.map(|s| ImageRgba::load_png(sample_path(dir, i, &format!("{s}.png"))));
                Ok(Sample {
                    index: i,
                    input: ImageRgba::load_png(sample_path(dir, i, "input.png"))?,
                    views: [a?, b?, c?],
                    queries: read_queries(sample_path(dir, i, "queries.bin"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn write_queries(queries: &QuerySet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(8 + queries.len() * RECORD_BYTES);
    buf.extend_from_slice(&(queries.len() as u64).to_le_bytes());
    for (p, l) in queries.points.iter().zip(&queries.labels) {
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(*l);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_queries(path: impl AsRef<Path>) -> Result<QuerySet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::format(path, "query file is truncated"));
    }
    let count = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if count.checked_mul(RECORD_BYTES) != Some(body.len()) {
        return Err(Error::format(path, format!("expected {count} records, found {} bytes", body.len())));
    }
    let mut points = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for rec in body.chunks_exact(RECORD_BYTES) {
        let f = |k: usize| f64::from_le_bytes(rec[8 * k..8 * k + 8].try_into().unwrap());
        points.push([f(0), f(1), f(2)]);
        let label = rec[24];
        if label > 1 {
            return Err(Error::format(path, format!("label {label} is not 0 or 1")));
        }
        labels.push(label);
    }
    Ok(QuerySet { points, labels })
}
