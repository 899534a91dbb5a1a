//! Count-based region embeddings from per-cell feature (tag) counts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hexgrid::{cell_of, CellId, GeoPoint, GridError};
use crate::ingest::{FeatureValue, PointRecord};

const DEFAULT_FILTER_JSON: &str = include_str!("../data/default_tag_filter.json");

/// Neighborhood radius of the contextual embedder.
pub const DEFAULT_CCE_K: u32 = 2;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("tag filter is empty")]
    EmptyFilter,
    #[error("cell {cell} has resolution {found}, expected {expected}")]
    ResolutionMismatch { cell: CellId, found: u8, expected: u8 },
    #[error("embedding for {0} has wrong length or non-finite values")]
    BadVector(CellId),
    #[error("malformed embedding file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EmbedError>;

/// The bundled `key=value` tag filter.
pub fn default_tag_filter() -> Vec<String> {
    serde_json::from_str(DEFAULT_FILTER_JSON).expect("bundled tag filter is valid JSON")
}

pub fn load_tag_filter(path: &Path) -> Result<Vec<String>> {
    let filter: Vec<String> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if filter.is_empty() {
        return Err(EmbedError::EmptyFilter);
    }
    Ok(filter)
}

/// `(location, "key=value")` pairs from the text feature `column` of each point.
pub fn tagged_points(points: &[PointRecord], column: &str) -> Vec<(GeoPoint, String)> {
    points
        .iter()
        .filter_map(|p| match p.features.get(column) {
            Some(FeatureValue::Text(tag)) => Some((p.point, tag.trim().to_string())),
            _ => None,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCountTable {
    pub resolution: u8,
    /// Sorted, deduplicated feature keys.
    pub vocabulary: Vec<String>,
    pub counts: BTreeMap<CellId, Vec<u64>>,
}

impl FeatureCountTable {
    pub fn dim(&self) -> usize {
        self.vocabulary.len()
    }

    fn row(&self, c: &CellId) -> Option<&Vec<u64>> {
        self.counts.get(c)
    }

    /// Total count of each feature over all cells.
    pub fn totals(&self) -> Vec<u64> {
        let mut t = vec![0; self.dim()];
        for row in self.counts.values() {
            for (a, b) in t.iter_mut().zip(row) {
                *a += b;
            }
        }
        t
    }
}

/// Count filtered features per cell. Keys outside `filter` are ignored.
pub fn ingest_feature_counts(
    records: &[(GeoPoint, String)],
    r: u8,
    filter: &[String],
) -> Result<FeatureCountTable> {
    if filter.is_empty() {
        return Err(EmbedError::EmptyFilter);
    }
    let mut vocabulary = filter.to_vec();
    vocabulary.sort();
    vocabulary.dedup();
    let index: BTreeMap<&str, usize> = vocabulary
        .iter()
        .enumerate()
        .map(|(i, k)| (k.as_str(), i))
        .collect();
    let hits: Vec<(CellId, usize)> = records
        .par_iter()
        .filter_map(|(p, key)| index.get(key.as_str()).map(|&i| (*p, i)))
        .map(|(p, i)| Ok((cell_of(p, r)?, i)))
        .collect::<Result<_>>()?;
    let dim = vocabulary.len();
    let mut counts: BTreeMap<CellId, Vec<u64>> = BTreeMap::new();
    for (c, i) in hits {
        counts.entry(c).or_insert_with(|| vec![0; dim])[i] += 1;
    }
    Ok(FeatureCountTable {
        resolution: r,
        vocabulary,
        counts,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Ce,
    Cce,
    External,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CceMode {
    /// Ring means side by side.
    #[default]
    Concat,
    /// `Σ_i m_i / (i + 1)`.
    Squashed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: EmbedderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<CceMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl Provenance {
    pub fn external(source: impl Into<String>) -> Self {
        Self {
            kind: EmbedderKind::External,
            k: None,
            mode: None,
            vocabulary_size: None,
            source: Some(source.into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub vectors: BTreeMap<CellId, Vec<f64>>,
    pub provenance: Provenance,
}

fn check_cells(table: &FeatureCountTable, cells: &[CellId]) -> Result<()> {
    match cells.iter().find(|c| c.resolution() != table.resolution) {
        Some(&cell) => Err(EmbedError::ResolutionMismatch {
            cell,
            found: cell.resolution(),
            expected: table.resolution,
        }),
        None => Ok(()),
    }
}

/// Raw count vector per cell; cells absent from the table embed as zeros.
pub fn count_embed(table: &FeatureCountTable, cells: &[CellId]) -> Result<EmbeddingMatrix> {
    check_cells(table, cells)?;
    let dim = table.dim();
    let vectors = cells
        .iter()
        .map(|c| {
            let v = match table.row(c) {
                Some(row) => row.iter().map(|&x| x as f64).collect(),
                None => vec![0.0; dim],
            };
            (*c, v)
        })
        .collect();
    Ok(EmbeddingMatrix {
        dim,
        vectors,
        provenance: Provenance {
            kind: EmbedderKind::Ce,
            k: None,
            mode: None,
            vocabulary_size: Some(dim),
            source: None,
        },
    })
}

/// Mean count vector over `ring(c, i)` for `i = 0..=k`; missing cells count as zeros.
pub fn ring_means(table: &FeatureCountTable, c: CellId, k: u32) -> Result<Vec<Vec<f64>>> {
    let dim = table.dim();
    (0..=k)
        .map(|i| {
            let ring = c.ring(i)?;
            let mut m = vec![0.0; dim];
            for cell in &ring {
                if let Some(row) = table.row(cell) {
                    for (a, &b) in m.iter_mut().zip(row) {
                        *a += b as f64;
                    }
                }
            }
            let n = ring.len() as f64;
            m.iter_mut().for_each(|v| *v /= n);
            Ok(m)
        })
        .collect()
}

/// Neighborhood-aware counts: per-ring means up to radius `k`, concatenated
/// or distance-weighted and summed.
pub fn contextual_count_embed(
    table: &FeatureCountTable,
    cells: &[CellId],
    k: u32,
    mode: CceMode,
) -> Result<EmbeddingMatrix> {
    check_cells(table, cells)?;
    let base = table.dim();
    let dim = match mode {
        CceMode::Concat => base * (k as usize + 1),
        CceMode::Squashed => base,
    };
    let vectors = cells
        .par_iter()
        .map(|&c| {
            let means = ring_means(table, c, k)?;
            let v = match mode {
                CceMode::Concat => means.concat(),
                CceMode::Squashed => {
                    let mut v = vec![0.0; base];
                    for (i, m) in means.iter().enumerate() {
                        for (a, b) in v.iter_mut().zip(m) {
                            *a += b / (i + 1) as f64;
                        }
                    }
                    v
                }
            };
            Ok((c, v))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();
    Ok(EmbeddingMatrix {
        dim,
        vectors,
        provenance: Provenance {
            kind: EmbedderKind::Cce,
            k: Some(k),
            mode: Some(mode),
            vocabulary_size: Some(base),
            source: None,
        },
    })
}

impl EmbeddingMatrix {
    pub fn get(&self, c: &CellId) -> Option<&[f64]> {
        self.vectors.get(c).map(Vec::as_slice)
    }

    pub fn validate(&self) -> Result<()> {
        for (c, v) in &self.vectors {
            if v.len() != self.dim || !v.iter().all(|x| x.is_finite()) {
                return Err(EmbedError::BadVector(*c));
            }
        }
        Ok(())
    }

    /// CSV with header `cell,f_0,…,f_{dim-1}` plus a provenance sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["cell".to_string()];
        header.extend((0..self.dim).map(|i| format!("f_{i}")));
        w.write_record(&header)?;
        for (c, v) in &self.vectors {
            let mut row = vec![c.to_string()];
            row.extend(v.iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        std::fs::write(
            provenance_path(path),
            serde_json::to_string_pretty(&self.provenance)? + "\n",
        )?;
        Ok(())
    }

    /// Read an embedding CSV. Without a sidecar the provenance is `external`.
    pub fn read(path: &Path) -> Result<EmbeddingMatrix> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.get(0) != Some("cell") {
            return Err(EmbedError::Malformed("first column must be `cell`".into()));
        }
        let dim = headers.len() - 1;
        let mut vectors = BTreeMap::new();
        for rec in reader.records() {
            let rec = rec?;
            let cell: CellId = rec.get(0).unwrap_or("").parse()?;
            let v = rec
                .iter()
                .skip(1)
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| EmbedError::Malformed(format!("{cell}: {e}")))?;
            vectors.insert(cell, v);
        }
        let side = provenance_path(path);
        let provenance = if side.exists() {
            serde_json::from_str(&std::fs::read_to_string(side)?)?
        } else {
            Provenance::external(path.display().to_string())
        };
        let m = EmbeddingMatrix {
            dim,
            vectors,
            provenance,
        };
        m.validate()?;
        Ok(m)
    }
}

pub fn provenance_path(path: &Path) -> PathBuf {
    path.with_extension("provenance.json")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origin() -> CellId {
        "8928308280fffff".parse().unwrap()
    }

    fn recs(c: CellId, tag: &str, n: usize) -> Vec<(GeoPoint, String)> {
        vec![(c.centroid(), tag.to_string()); n]
    }

    #[test]
    fn counts_filtered_tags() {
        let c = origin();
        let mut r = recs(c, "amenity=cafe", 3);
        r.extend(recs(c, "shop=bakery", 2));
        let t = ingest_feature_counts(&r, 9, &["amenity=cafe".into()]).unwrap();
        assert_eq!(t.counts[&c], vec![3]);
        assert!(matches!(ingest_feature_counts(&r, 9, &[]), Err(EmbedError::EmptyFilter)));
    }

    #[test]
    fn vocabulary_sorted_and_deduplicated() {
        let filter: Vec<String> = ["b=1", "a=1", "b=1"].iter().map(|s| s.to_string()).collect();
        let t = ingest_feature_counts(&[], 9, &filter).unwrap();
        assert_eq!(t.vocabulary, ["a=1", "b=1"]);
    }

    #[test]
    fn count_embed_is_identity_with_zero_fallback() {
        let c = origin();
        let t = ingest_feature_counts(&recs(c, "x=1", 4), 9, &["x=1".into(), "y=2".into()]).unwrap();
        let far = c.ring(3).unwrap()[0];
        let e = count_embed(&t, &[c, far]).unwrap();
        assert_eq!(e.get(&c).unwrap(), &[4.0, 0.0]);
        assert_eq!(e.get(&far).unwrap(), &[0.0, 0.0]);
        assert_eq!(e.provenance.kind, EmbedderKind::Ce);
    }

    #[test]
    fn default_filter_dimension() {
        let f = default_tag_filter();
        let t = ingest_feature_counts(&[], 9, &f).unwrap();
        assert_eq!(count_embed(&t, &[origin()]).unwrap().dim, f.len());
    }

    #[test]
    fn cce_degenerate_and_uniform() {
        let c = origin();
        let mut r = Vec::new();
        for cell in c.disk(4) {
            r.extend(recs(cell, "x=1", 2));
            r.extend(recs(cell, "y=1", 1));
        }
        let t = ingest_feature_counts(&r, 9, &["x=1".into(), "y=1".into()]).unwrap();
        let cells = vec![c];
        let ce = count_embed(&t, &cells).unwrap();
        let k0 = contextual_count_embed(&t, &cells, 0, CceMode::Concat).unwrap();
        assert_eq!(k0.vectors, ce.vectors);
        let k2 = contextual_count_embed(&t, &cells, 2, CceMode::Concat).unwrap();
        assert_eq!(k2.dim, 6);
        assert_eq!(k2.get(&c).unwrap(), &[2.0, 1.0, 2.0, 1.0, 2.0, 1.0]);
        let sq = contextual_count_embed(&t, &cells, 2, CceMode::Squashed).unwrap();
        let w = 1.0 + 0.5 + 1.0 / 3.0;
        assert!((sq.get(&c).unwrap()[0] - 2.0 * w).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = origin();
        let t = ingest_feature_counts(&recs(c, "x=1", 4), 9, &["x=1".into()]).unwrap();
        let e = contextual_count_embed(&t, &[c], 1, CceMode::Concat).unwrap();
        let p = dir.path().join("emb.csv");
        e.write(&p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("cell,f_0,f_1\n"));
        assert_eq!(EmbeddingMatrix::read(&p).unwrap(), e);
        std::fs::remove_file(provenance_path(&p)).unwrap();
        assert_eq!(EmbeddingMatrix::read(&p).unwrap().provenance.kind, EmbedderKind::External);
    }
}
