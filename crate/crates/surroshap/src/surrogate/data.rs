//! Training data for the dispatch surrogate.
//!
//! A sample is one (operating conditions, coalition) draw together with the
//! exact dispatch emissions of that coalition. Features are stored in f32,
//! the precision the network consumes; the labelling dispatch is solved on
//! the f32-rounded values so every label matches its stored features
//! exactly.

use crate::dcopf::characteristic_emissions;
use crate::error::{Error, Result};
use crate::grid::io::system_hash;
use crate::grid::{Coalition, EntityCounts, GridSystem, OperatingConditions, DEFAULT_VOLL};
use crate::rng::{mix64, ns, ns_index, stream};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

/// Which partition a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Provenance stored beside the binary sample file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub counts: EntityCounts,
    /// Thermal emission rates in id order; the beta feature block repeats
    /// these on every row.
    pub betas: Vec<f64>,
    pub seed: u64,
    pub system_hash: String,
    pub voll: f64,
}

/// Feature rows, labels and the derived split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    n_features: usize,
    features: Vec<f32>,
    labels: Vec<f32>,
    splits: Vec<Split>,
}

/// Width of one feature row: thermal offers, thermal emission rates,
/// renewable ceilings, load ceilings, then one membership flag per entity.
pub fn feature_count(counts: &EntityCounts) -> usize {
    2 * counts.thermal + counts.renewable + counts.load + counts.total()
}

/// Writes one feature row. `betas` holds the thermal emission rates only.
pub(crate) fn fill_features(
    out: &mut [f32],
    offers: &[f64],
    betas: &[f64],
    r_max: &[f64],
    d_max: &[f64],
    coalition: &Coalition,
) {
    let mut k = 0;
    for &v in offers {
        out[k] = v as f32;
        k += 1;
    }
    for &v in betas {
        out[k] = v as f32;
        k += 1;
    }
    for &v in r_max {
        out[k] = v as f32;
        k += 1;
    }
    for &v in d_max {
        out[k] = v as f32;
        k += 1;
    }
    for i in 0..coalition.n() {
        out[k] = if coalition.contains(i) { 1.0 } else { 0.0 };
        k += 1;
    }
    debug_assert_eq!(k, out.len());
}

/// Salt for the split hash. Fixed, not seed-derived: the partition of a file
/// is a pure function of its sample count, so a reloaded dataset always
/// carries the same split it was trained with.
const SPLIT_SALT: u64 = 0x5353_4453_1070_2010;

/// Assigns splits by ranking sample indices on a hash: the lowest 70% of
/// ranks train, the next 20% validate, the rest test. Exact proportions,
/// deterministic, and independent of how the samples were generated.
pub fn split_assignment(n_samples: usize) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.sort_by_key(|&i| (mix64(SPLIT_SALT, i as u64), i));
    let n_train = n_samples * 7 / 10;
    let n_val = n_samples * 2 / 10;
    let mut splits = vec![Split::Test; n_samples];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

impl Dataset {
    pub(crate) fn from_parts(
        meta: DatasetMeta,
        n_features: usize,
        features: Vec<f32>,
        labels: Vec<f32>,
    ) -> Result<Self> {
        if n_features == 0 || labels.is_empty() || features.len() != n_features * labels.len() {
            return Err(Error::Argument(format!(
                "feature buffer of {} does not hold {} rows of width {n_features}",
                features.len(),
                labels.len()
            )));
        }
        let splits = split_assignment(labels.len());
        Ok(Dataset {
            meta,
            n_features,
            features,
            labels,
            splits,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> f64 {
        f64::from(self.labels[i])
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.n_samples())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Column index of entity `i`'s membership flag.
    pub fn membership_column(&self, i: usize) -> usize {
        let c = &self.meta.counts;
        2 * c.thermal + c.renewable + c.load + i
    }
}

/// Draws `n_samples` labelled samples from `system`.
///
/// Per row, thermal offers scale their base offer by U[0.8, 1.2], renewable
/// ceilings scale nameplate by U[0, 1.2], load ceilings scale nominal demand
/// by U[0.4, 1.2] (the scenario ranges, minus the diurnal shape: rows are
/// not tied to an hour), and the coalition includes each entity
/// independently with probability 1/2, covering all 2^n masks. Every row has
/// its own counter-derived stream, so generation is reproducible and
/// parallelizes freely.
pub fn generate_dataset(system: &GridSystem, n_samples: usize, seed: u64) -> Result<Dataset> {
    if n_samples < 10 {
        return Err(Error::Argument(format!(
            "datasets need at least 10 samples so every split is populated, got {n_samples}"
        )));
    }
    let counts = system.counts();
    let n = counts.total();
    let n_features = feature_count(&counts);
    let thermal_betas: Vec<f64> = system.thermals().iter().map(|e| e.beta).collect();

    let rows: Vec<(Vec<f32>, f32)> = (0..n_samples)
        .into_par_iter()
        .map(|row| -> Result<(Vec<f32>, f32)> {
            let mut rng = stream(seed, ns_index(ns::DATASET, row as u64));
            let offers: Vec<f64> = system
                .thermals()
                .iter()
                .map(|e| e.base_offer * rng.random_range(0.8..1.2))
                .collect();
            let r_max: Vec<f64> = system
                .renewables()
                .iter()
                .map(|e| e.p_max * rng.random_range(0.0..1.2))
                .collect();
            let d_max: Vec<f64> = system
                .loads()
                .iter()
                .map(|e| e.p_max * rng.random_range(0.4..1.2))
                .collect();
            let mut coalition = Coalition::empty(n);
            for i in 0..n {
                if rng.random::<bool>() {
                    coalition.insert(i);
                }
            }
            let mut features = vec![0.0f32; n_features];
            fill_features(&mut features, &offers, &thermal_betas, &r_max, &d_max, &coalition);
            // Label the f32-rounded conditions the network will actually see.
            let cond = OperatingConditions {
                t: 1,
                offers: offers.iter().map(|&v| f64::from(v as f32)).collect(),
                r_max: r_max.iter().map(|&v| f64::from(v as f32)).collect(),
                d_max: d_max.iter().map(|&v| f64::from(v as f32)).collect(),
                voll: DEFAULT_VOLL,
            };
            let label = characteristic_emissions(system, &cond, &coalition)?;
            if !label.is_finite() || label < 0.0 {
                return Err(Error::Numeric(format!(
                    "sample {row} got a non-physical label {label}"
                )));
            }
            Ok((features, label as f32))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut features = Vec::with_capacity(n_samples * n_features);
    let mut labels = Vec::with_capacity(n_samples);
    for (f, l) in rows {
        features.extend_from_slice(&f);
        labels.push(l);
    }
    Dataset::from_parts(
        DatasetMeta {
            counts,
            betas: thermal_betas,
            seed,
            system_hash: system_hash(system),
            voll: DEFAULT_VOLL,
        },
        n_features,
        features,
        labels,
    )
}

const DATASET_MAGIC: &[u8; 4] = b"SSDS";

/// Binary image: magic, u32 feature width, u64 sample count, then one f32
/// feature row plus one f32 label per sample, all little-endian.
pub fn dataset_to_bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + ds.features.len() * 4 + ds.labels.len() * 4);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(ds.n_features as u32).to_le_bytes());
    out.extend_from_slice(&(ds.n_samples() as u64).to_le_bytes());
    for i in 0..ds.n_samples() {
        for v in ds.row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&ds.labels[i].to_le_bytes());
    }
    out
}

pub fn dataset_from_bytes(bytes: &[u8], meta: DatasetMeta) -> Result<Dataset> {
    let parse = |msg: &str| Error::Parse {
        path: "<bytes>".into(),
        message: msg.into(),
    };
    if bytes.len() < 16 || &bytes[..4] != DATASET_MAGIC {
        return Err(parse("not a dataset file: bad magic"));
    }
    let n_features = u32::from_le_bytes(bytes[4..8].try_into().expect("slice length")) as usize;
    let n_samples = u64::from_le_bytes(bytes[8..16].try_into().expect("slice length")) as usize;
    let expect = 16 + n_samples * (n_features + 1) * 4;
    if bytes.len() != expect {
        return Err(parse(&format!(
            "dataset holds {} bytes, header implies {expect}",
            bytes.len()
        )));
    }
    if n_features != feature_count(&meta.counts) {
        return Err(parse(&format!(
            "feature width {n_features} does not match the sidecar's entity counts"
        )));
    }
    let mut features = Vec::with_capacity(n_samples * n_features);
    let mut labels = Vec::with_capacity(n_samples);
    let mut k = 16;
    for _ in 0..n_samples {
        for _ in 0..n_features {
            features.push(f32::from_le_bytes(bytes[k..k + 4].try_into().expect("slice length")));
            k += 4;
        }
        labels.push(f32::from_le_bytes(bytes[k..k + 4].try_into().expect("slice length")));
        k += 4;
    }
    Dataset::from_parts(meta, n_features, features, labels)
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".json");
    name.into()
}

/// Writes the binary samples plus a JSON sidecar carrying the provenance the
/// binary layout cannot express (entity counts, emission rates, seed).
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io {
        context: format!("writing dataset {}", path.display()),
        source: e,
    };
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&dataset_to_bytes(ds)).map_err(io_err)?;
    let meta = serde_json::to_string_pretty(&ds.meta).expect("meta serializes");
    std::fs::write(sidecar_path(path), meta + "\n").map_err(io_err)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let io_err = |e: std::io::Error| Error::Io {
        context: format!("reading dataset {}", path.display()),
        source: e,
    };
    let bytes = std::fs::read(path).map_err(io_err)?;
    let sidecar = sidecar_path(path);
    let meta_text = std::fs::read_to_string(&sidecar).map_err(|e| Error::Io {
        context: format!(
            "reading dataset sidecar {} (regenerate the dataset if it is missing)",
            sidecar.display()
        ),
        source: e,
    })?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text).map_err(|e| Error::Parse {
        path: sidecar.display().to_string(),
        message: e.to_string(),
    })?;
    dataset_from_bytes(&bytes, meta).map_err(|e| match e {
        Error::Parse { message, .. } => Error::Parse {
            path: path.display().to_string(),
            message,
        },
        other => other,
    })
}
