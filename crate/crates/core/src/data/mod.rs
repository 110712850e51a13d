//! Observation-set ingestion, the manifest format, and the geographic
//! train/test/OOD split protocol.

pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitness::MetricId;
use crate::primitives::InputDescriptor;
use crate::raster::{sha256_hex, Raster, RasterError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest schema error: {0}")]
    Schema(String),
    #[error("missing raster {0}")]
    MissingRaster(PathBuf),
    #[error("checksum mismatch for raster of observation {id}: manifest {expected}, file {found}")]
    ChecksumMismatch {
        id: String,
        expected: String,
        found: String,
    },
    #[error("raster error on {path}: {source}")]
    Raster {
        path: PathBuf,
        source: RasterError,
    },
    #[error("too few observations: {found} (need at least {need})")]
    TooFewObservations { found: usize, need: usize },
    #[error("invalid hidden program: {0}")]
    InvalidHiddenProgram(String),
}

#[derive(Debug, Clone)]
pub struct Observation {
    pub input: Arc<InputDescriptor>,
    pub target: f64,
}

/// A loaded dataset: observations plus the task description around them.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    pub observations: Vec<Observation>,
    /// Natural-language description of the target quantity (descr).
    pub target_name: String,
    pub metric_id: MetricId,
    /// Closed concept vocabulary available to `mask`.
    pub vocabulary: Vec<String>,
    pub manifest_path: Option<PathBuf>,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn all(&self) -> Vec<&Observation> {
        self.observations.iter().collect()
    }

    pub fn by_ids<'a>(&'a self, ids: &[String]) -> Vec<&'a Observation> {
        let wanted: HashSet<&str> = ids.iter().map(|s| s.as_str()).collect();
        self.observations
            .iter()
            .filter(|o| wanted.contains(o.input.id.as_str()))
            .collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.observations.is_empty() {
            return Err(DataError::TooFewObservations { found: 0, need: 1 });
        }
        let mut ids = HashSet::new();
        let dims = {
            let r = &self.observations[0].input.raster;
            (r.width(), r.height())
        };
        for o in &self.observations {
            if !ids.insert(o.input.id.as_str()) {
                return Err(DataError::Schema(format!(
                    "duplicate observation id {:?}",
                    o.input.id
                )));
            }
            let r = &o.input.raster;
            if (r.width(), r.height()) != dims {
                return Err(DataError::Schema(format!(
                    "raster of {:?} is {}x{}, expected {}x{}",
                    o.input.id,
                    r.width(),
                    r.height(),
                    dims.0,
                    dims.1
                )));
            }
            if !o.target.is_finite() {
                return Err(DataError::Schema(format!(
                    "non-finite target for {:?}",
                    o.input.id
                )));
            }
            for concept in &self.vocabulary {
                if r.channel(concept).is_none() {
                    return Err(DataError::Schema(format!(
                        "raster of {:?} lacks vocabulary channel {concept:?}",
                        o.input.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Disjoint id cover: train and test come from the easternmost two-thirds,
/// OOD is exactly the westernmost third by longitude.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub ood_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    Test,
    Ood,
}

impl SplitSpec {
    pub fn part(&self, part: SplitPart) -> &[String] {
        match part {
            SplitPart::Train => &self.train_ids,
            SplitPart::Test => &self.test_ids,
            SplitPart::Ood => &self.ood_ids,
        }
    }
}

pub const DEFAULT_TRAIN_RATIO: f64 = 0.8;
/// Fixed shuffle seed for the in-distribution train/test split.
pub const DEFAULT_SPLIT_SEED: u64 = 17;

pub fn split_by_longitude(
    obs: &ObservationSet,
    train_ratio_within_east: f64,
    shuffle_seed: u64,
) -> Result<SplitSpec, DataError> {
    let n = obs.len();
    if n < 3 {
        return Err(DataError::TooFewObservations { found: n, need: 3 });
    }
    let mut order: Vec<&Observation> = obs.observations.iter().collect();
    order.sort_by(|a, b| {
        a.input
            .longitude
            .partial_cmp(&b.input.longitude)
            .expect("finite longitudes")
            .then_with(|| a.input.id.cmp(&b.input.id))
    });

    let ood_count = n / 3;
    let ood_ids: Vec<String> = order[..ood_count]
        .iter()
        .map(|o| o.input.id.clone())
        .collect();
    let mut east: Vec<String> = order[ood_count..]
        .iter()
        .map(|o| o.input.id.clone())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    east.shuffle(&mut rng);
    let train_count = if east.len() < 2 {
        east.len()
    } else {
        (((east.len() as f64) * train_ratio_within_east).floor() as usize)
            .clamp(1, east.len() - 1)
    };
    let (train, test) = east.split_at(train_count);
    Ok(SplitSpec {
        train_ids: train.to_vec(),
        test_ids: test.to_vec(),
        ood_ids,
    })
}

// ---------------------------------------------------------------------
// Manifest: JSON document referencing DGRD raster files with checksums.
// ---------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    target_name: String,
    metric_id: MetricId,
    vocabulary: Vec<String>,
    observations: Vec<ManifestObs>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestObs {
    id: String,
    lon: f64,
    lat: f64,
    raster_file: String,
    raster_sha256: String,
    scalar_fields: BTreeMap<String, f64>,
    target: f64,
}

/// Write `manifest.json` plus one DGRD file per observation under
/// `dir/rasters/`.
pub fn save_manifest(obs: &ObservationSet, dir: &Path) -> Result<PathBuf, DataError> {
    let io_err = |path: &Path, source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let rasters_dir = dir.join("rasters");
    std::fs::create_dir_all(&rasters_dir).map_err(|e| io_err(&rasters_dir, e))?;

    let mut entries = Vec::with_capacity(obs.len());
    for o in &obs.observations {
        let file_rel = format!("rasters/{}.dgrd", o.input.id);
        let file_abs = dir.join(&file_rel);
        let bytes = o.input.raster.encode();
        let digest = sha256_hex(&bytes);
        write_atomic(&file_abs, &bytes).map_err(|e| io_err(&file_abs, e))?;
        entries.push(ManifestObs {
            id: o.input.id.clone(),
            lon: o.input.longitude,
            lat: o.input.latitude,
            raster_file: file_rel,
            raster_sha256: digest,
            scalar_fields: o.input.scalar_fields.clone(),
            target: o.target,
        });
    }
    let doc = ManifestDoc {
        target_name: obs.target_name.clone(),
        metric_id: obs.metric_id,
        vocabulary: obs.vocabulary.clone(),
        observations: entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    write_atomic(&path, json.as_bytes()).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

/// Temp-then-rename so concurrent readers never see a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

/// Load a manifest (a path to `manifest.json` or to its directory),
/// verifying raster availability and checksums.
pub fn load_manifest(path: &Path) -> Result<ObservationSet, DataError> {
    let manifest_path = if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    };
    let base = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| DataError::Io {
        path: manifest_path.clone(),
        source: e,
    })?;
    let doc: ManifestDoc =
        serde_json::from_str(&text).map_err(|e| DataError::Schema(e.to_string()))?;

    let mut observations = Vec::with_capacity(doc.observations.len());
    for entry in doc.observations {
        let raster_path = base.join(&entry.raster_file);
        if !raster_path.is_file() {
            return Err(DataError::MissingRaster(raster_path));
        }
        let bytes = std::fs::read(&raster_path).map_err(|e| DataError::Io {
            path: raster_path.clone(),
            source: e,
        })?;
        let digest = sha256_hex(&bytes);
        if digest != entry.raster_sha256 {
            return Err(DataError::ChecksumMismatch {
                id: entry.id,
                expected: entry.raster_sha256,
                found: digest,
            });
        }
        let raster = Raster::decode(&bytes).map_err(|e| DataError::Raster {
            path: raster_path,
            source: e,
        })?;
        let input = InputDescriptor::new(
            entry.id,
            entry.lon,
            entry.lat,
            Arc::new(raster),
            entry.scalar_fields,
        )
        .map_err(DataError::Schema)?;
        observations.push(Observation {
            input: Arc::new(input),
            target: entry.target,
        });
    }
    let set = ObservationSet {
        observations,
        target_name: doc.target_name,
        metric_id: doc.metric_id,
        vocabulary: doc.vocabulary,
        manifest_path: Some(manifest_path),
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitness::MetricId;
    use rand::Rng;

    fn tiny_set(longitudes: &[f64]) -> ObservationSet {
        let mut raster = Raster::new(4, 4);
        raster.push_channel("water", vec![0; 16]);
        let raster = Arc::new(raster);
        let observations = longitudes
            .iter()
            .enumerate()
            .map(|(i, &lon)| Observation {
                input: Arc::new(
                    InputDescriptor::new(
                        format!("obs_{i:04}"),
                        lon,
                        40.0,
                        raster.clone(),
                        BTreeMap::new(),
                    )
                    .unwrap(),
                ),
                target: i as f64,
            })
            .collect();
        ObservationSet {
            observations,
            target_name: "t".into(),
            metric_id: MetricId::Rmse,
            vocabulary: vec!["water".into()],
            manifest_path: None,
        }
    }

    #[test]
    fn westernmost_third_is_ood() {
        let set = tiny_set(&[-9.0, -8.0, -7.0, -6.0, -5.0, -4.0, -3.0, -2.0, -1.0]);
        let split = split_by_longitude(&set, DEFAULT_TRAIN_RATIO, DEFAULT_SPLIT_SEED).unwrap();
        let mut ood = split.ood_ids.clone();
        ood.sort();
        assert_eq!(ood, vec!["obs_0000", "obs_0001", "obs_0002"]);
        assert_eq!(split.train_ids.len() + split.test_ids.len(), 6);
    }

    #[test]
    fn three_observations_boundary() {
        let set = tiny_set(&[-9.0, -8.0, -7.0]);
        let split = split_by_longitude(&set, DEFAULT_TRAIN_RATIO, DEFAULT_SPLIT_SEED).unwrap();
        assert_eq!(split.ood_ids, vec!["obs_0000"]);
        assert_eq!(split.train_ids.len(), 1);
        assert_eq!(split.test_ids.len(), 1);
    }

    #[test]
    fn too_few_observations() {
        let set = tiny_set(&[-9.0, -8.0]);
        assert!(matches!(
            split_by_longitude(&set, DEFAULT_TRAIN_RATIO, DEFAULT_SPLIT_SEED),
            Err(DataError::TooFewObservations { .. })
        ));
    }

    #[test]
    fn equal_longitudes_still_partition() {
        let set = tiny_set(&[5.0; 10]);
        let split = split_by_longitude(&set, DEFAULT_TRAIN_RATIO, DEFAULT_SPLIT_SEED).unwrap();
        let mut seen: Vec<&String> = split
            .train_ids
            .iter()
            .chain(&split.test_ids)
            .chain(&split.ood_ids)
            .collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 10);
        // tie-break by id: ood must be the three lexicographically first ids
        assert_eq!(split.ood_ids, vec!["obs_0000", "obs_0001", "obs_0002"]);
    }

    #[test]
    fn random_sets_partition_with_western_ood() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let n = rng.gen_range(3..40);
            let lons: Vec<f64> = (0..n).map(|_| rng.gen_range(-120.0..-70.0)).collect();
            let set = tiny_set(&lons);
            let split = split_by_longitude(&set, DEFAULT_TRAIN_RATIO, DEFAULT_SPLIT_SEED).unwrap();
            assert_eq!(
                split.train_ids.len() + split.test_ids.len() + split.ood_ids.len(),
                n
            );
            assert_eq!(split.ood_ids.len(), n / 3);
            let lon_of = |id: &String| {
                set.observations
                    .iter()
                    .find(|o| &o.input.id == id)
                    .unwrap()
                    .input
                    .longitude
            };
            let max_ood = split.ood_ids.iter().map(lon_of).fold(f64::MIN, f64::max);
            let min_east = split
                .train_ids
                .iter()
                .chain(&split.test_ids)
                .map(lon_of)
                .fold(f64::MAX, f64::min);
            if !split.ood_ids.is_empty() {
                assert!(max_ood <= min_east);
            }
        }
    }
}
