//! Side files the binary formats do not cover: records, prototypes,
//! probability grids and manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use tpm_core::grid::normalize_vector;
use tpm_core::report::{fmt_float, to_json};
use tpm_core::threshold::EpisodeRecord;
use tpm_core::{PrototypeSet, ScalarMap};

pub fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_text(path, &to_json(value)?)
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Records from a CSV (with header) or a JSON array.
pub fn read_records(path: &Path) -> anyhow::Result<Vec<EpisodeRecord>> {
    let text = read_text(path)?;
    let raw: Vec<EpisodeRecord> = if is_json(path) {
        serde_json::from_str(&text).with_context(|| format!("malformed records in {}", path.display()))?
    } else {
        csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .collect::<Result<_, _>>()
            .with_context(|| format!("malformed records in {}", path.display()))?
    };
    raw.into_iter()
        .map(|r| EpisodeRecord::new(r.support_fg_count, r.slice_loc, r.icp).map_err(Into::into))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct StoredPrototypes {
    vectors: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

pub fn write_prototypes(path: &Path, set: &PrototypeSet) -> anyhow::Result<()> {
    write_json(
        path,
        &StoredPrototypes {
            vectors: set.vectors().to_vec(),
            weights: set.weights().to_vec(),
        },
    )
}

/// Prototypes as written by [`write_prototypes`]; rounding in the file is
/// undone by renormalizing.
pub fn read_prototypes(path: &Path) -> anyhow::Result<PrototypeSet> {
    let stored: StoredPrototypes = serde_json::from_str(&read_text(path)?)
        .with_context(|| format!("malformed prototypes in {}", path.display()))?;
    let vectors = stored
        .vectors
        .iter()
        .map(|v| normalize_vector(v))
        .collect::<Result<Vec<_>, _>>()?;
    let total: f64 = stored.weights.iter().sum();
    if !(total > 0.0) {
        bail!("prototype weights in {} do not sum to a positive value", path.display());
    }
    let weights = stored.weights.iter().map(|w| w / total).collect();
    Ok(PrototypeSet::new(vectors, weights)?)
}

/// Row-major probability grid, one CSV line per grid row.
pub fn write_prob_csv(path: &Path, map: &ScalarMap) -> anyhow::Result<()> {
    let mut out = String::new();
    for row in map.values().chunks(map.width()) {
        let line: Vec<String> = row.iter().map(|&p| fmt_float(p)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn read_prob_csv(path: &Path) -> anyhow::Result<ScalarMap> {
    let text = read_text(path)?;
    let mut values = Vec::new();
    let mut width = None;
    let mut height = 0;
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{}: bad number on line {}", path.display(), i + 1))?;
        if *width.get_or_insert(row.len()) != row.len() {
            bail!("{}: line {} has {} values", path.display(), i + 1, row.len());
        }
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            bail!("{}: probabilities must lie in [0, 1]", path.display());
        }
        values.extend(row);
        height += 1;
    }
    Ok(ScalarMap::new(height, width.unwrap_or(0), values)?)
}

#[derive(Debug, Deserialize)]
pub struct PairEntry {
    pub support_features: PathBuf,
    pub support_mask: PathBuf,
    pub query_features: PathBuf,
    pub query_mask: PathBuf,
    pub slice_loc: f64,
}

pub fn read_manifest(path: &Path) -> anyhow::Result<Vec<PairEntry>> {
    let mut entries: Vec<PairEntry> = serde_json::from_str(&read_text(path)?)
        .with_context(|| format!("malformed manifest {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for e in &mut entries {
        for p in [
            &mut e.support_features,
            &mut e.support_mask,
            &mut e.query_features,
            &mut e.query_mask,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    Ok(entries)
}
