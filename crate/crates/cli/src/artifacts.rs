//! Output files other than datasets and models: run manifests, GeoJSON
//! choropleths and histogram CSVs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context};
use obsr_core::regionize::RegionDataset;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "run_timing.json";

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_bytes(&bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub sha256: String,
    pub bytes: u64,
}

/// Every artifact of a run with its content hash. Wall-clock timings live in a
/// separate file so that reruns reproduce this one byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub task: String,
    pub config_sha256: String,
    pub config: serde_json::Value,
    /// Path relative to the output directory (with `/` separators) → entry.
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn read(dir: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Hash every file under `dir` except the manifest and the timing file.
pub fn collect_artifacts(dir: &Path) -> anyhow::Result<BTreeMap<String, ArtifactEntry>> {
    let mut out = BTreeMap::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir)?;
        let key = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        if key == MANIFEST_FILE || key == TIMING_FILE {
            continue;
        }
        let bytes = std::fs::read(entry.path())?;
        out.insert(
            key,
            ArtifactEntry {
                sha256: sha256_bytes(&bytes),
                bytes: bytes.len() as u64,
            },
        );
    }
    Ok(out)
}

/// Artifacts whose current hash differs from the manifest, or that vanished.
pub fn verify_manifest(dir: &Path, manifest: &RunManifest) -> anyhow::Result<Vec<String>> {
    let now = collect_artifacts(dir)?;
    Ok(manifest
        .artifacts
        .iter()
        .filter(|(k, v)| now.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect())
}

/// GeoJSON FeatureCollection with one closed hexagon ring per cell.
pub fn choropleth(ds: &RegionDataset) -> anyhow::Result<serde_json::Value> {
    if ds.is_empty() {
        bail!("cannot draw an empty dataset");
    }
    let features: Vec<serde_json::Value> = ds
        .rows
        .iter()
        .map(|(c, row)| {
            let mut ring: Vec<[f64; 2]> = c.boundary().iter().map(|p| [p.lon(), p.lat()]).collect();
            ring.push(ring[0]);
            json!({
                "type": "Feature",
                "geometry": { "type": "Polygon", "coordinates": [ring] },
                "properties": { "cell": c.to_string(), "target": row.target, "support": row.support },
            })
        })
        .collect();
    Ok(json!({ "type": "FeatureCollection", "features": features }))
}

pub fn emit_choropleth(ds: &RegionDataset, path: &Path) -> anyhow::Result<()> {
    let doc = choropleth(ds)?;
    std::fs::write(path, serde_json::to_string(&doc)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: u64,
}

/// Equal-width bins over `range` (data min/max when absent). The last bin is
/// closed; values outside the range are clamped into the edge bins.
pub fn histogram(values: &[f64], bins: usize, range: Option<(f64, f64)>) -> anyhow::Result<Vec<HistBin>> {
    if values.is_empty() || bins == 0 {
        bail!("histogram needs values and at least one bin");
    }
    if values.iter().any(|v| !v.is_finite()) {
        bail!("histogram values must be finite");
    }
    let (lo, hi) = range.unwrap_or_else(|| {
        values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
    });
    // A constant sample gets a unit-wide range so the bins are not empty intervals.
    let hi = if hi > lo { hi } else { lo + 1.0 };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let i = ((v - lo) / width).floor();
        let i = if i < 0.0 { 0 } else { (i as usize).min(bins - 1) };
        counts[i] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistBin {
            bin_left: lo + width * i as f64,
            bin_right: if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 },
            count,
        })
        .collect())
}

pub fn write_histogram(bins: &[HistBin], path: &Path) -> anyhow::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "bin_left,bin_right,count")?;
    for b in bins {
        writeln!(f, "{},{},{}", b.bin_left, b.bin_right, b.count)?;
    }
    f.flush()?;
    Ok(())
}

pub fn emit_histogram(values: &[f64], bins: usize, range: Option<(f64, f64)>, path: &Path) -> anyhow::Result<Vec<HistBin>> {
    let h = histogram(values, bins, range)?;
    write_histogram(&h, path)?;
    Ok(h)
}
