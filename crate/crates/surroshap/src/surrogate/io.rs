//! Model files: a compact little-endian binary for the weights plus a JSON
//! sidecar for everything the binary cannot express (entity counts, emission
//! rates, training history).

use super::data::feature_count;
use super::net::{ModelMeta, SurrogateModel};
use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

const MODEL_MAGIC: &[u8; 4] = b"SSNN";
const MODEL_VERSION: u32 = 1;

/// Binary image: magic, u32 version, u32 layer-size count, the layer sizes
/// as u32, then per layer the row-major f32 weights followed by the f32
/// biases, then input means, input deviations, output mean and output
/// deviation. Everything little-endian.
pub fn model_to_bytes(model: &SurrogateModel) -> Vec<u8> {
    let n_params: usize = model.weights.iter().map(Vec::len).sum::<usize>()
        + model.biases.iter().map(Vec::len).sum::<usize>();
    let mut out = Vec::with_capacity(12 + model.dims.len() * 4 + (n_params + 2 * model.dims[0] + 2) * 4);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.dims.len() as u32).to_le_bytes());
    for &d in &model.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for l in 0..model.dims.len() - 1 {
        for v in &model.weights[l] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &model.biases[l] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in model.in_mean.iter().chain(&model.in_std) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&model.out_mean.to_le_bytes());
    out.extend_from_slice(&model.out_std.to_le_bytes());
    out
}

pub fn model_from_bytes(bytes: &[u8], meta: ModelMeta) -> Result<SurrogateModel> {
    let parse = |msg: String| Error::Parse {
        path: "<bytes>".into(),
        message: msg,
    };
    if bytes.len() < 12 || &bytes[..4] != MODEL_MAGIC {
        return Err(parse("not a model file: bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("slice length"));
    if version != MODEL_VERSION {
        return Err(parse(format!(
            "model format version {version}, this build reads {MODEL_VERSION}"
        )));
    }
    let n_dims = u32::from_le_bytes(bytes[8..12].try_into().expect("slice length")) as usize;
    if n_dims < 2 {
        return Err(parse(format!("a network needs at least 2 layer sizes, found {n_dims}")));
    }
    if bytes.len() < 12 + n_dims * 4 {
        return Err(parse("model file truncated inside the layer sizes".into()));
    }
    let dims: Vec<usize> = (0..n_dims)
        .map(|i| {
            let at = 12 + i * 4;
            u32::from_le_bytes(bytes[at..at + 4].try_into().expect("slice length")) as usize
        })
        .collect();
    if dims.iter().any(|&d| d == 0) {
        return Err(parse("layer sizes must be positive".into()));
    }
    if *dims.last().expect("nonempty") != 1 {
        return Err(parse(format!(
            "the output layer must have one unit, found {}",
            dims.last().expect("nonempty")
        )));
    }
    let n_params: usize = (0..n_dims - 1).map(|l| dims[l + 1] * dims[l] + dims[l + 1]).sum();
    let expect = 12 + n_dims * 4 + (n_params + 2 * dims[0] + 2) * 4;
    if bytes.len() != expect {
        return Err(parse(format!(
            "model holds {} bytes, header implies {expect}",
            bytes.len()
        )));
    }
    if feature_count(&meta.counts) != dims[0] {
        return Err(parse(format!(
            "input width {} does not match the sidecar's entity counts",
            dims[0]
        )));
    }
    if meta.betas.len() != meta.counts.thermal {
        return Err(parse(format!(
            "sidecar carries {} emission rates for {} thermal entities",
            meta.betas.len(),
            meta.counts.thermal
        )));
    }
    let mut k = 12 + n_dims * 4;
    let mut take = |count: usize| -> Vec<f32> {
        let vals = (0..count)
            .map(|i| {
                let at = k + i * 4;
                f32::from_le_bytes(bytes[at..at + 4].try_into().expect("slice length"))
            })
            .collect();
        k += count * 4;
        vals
    };
    let mut weights = Vec::with_capacity(n_dims - 1);
    let mut biases = Vec::with_capacity(n_dims - 1);
    for l in 0..n_dims - 1 {
        weights.push(take(dims[l + 1] * dims[l]));
        biases.push(take(dims[l + 1]));
    }
    let in_mean = take(dims[0]);
    let in_std = take(dims[0]);
    let out_mean = take(1)[0];
    let out_std = take(1)[0];
    Ok(SurrogateModel {
        dims,
        weights,
        biases,
        in_mean,
        in_std,
        out_mean,
        out_std,
        meta,
    })
}

/// Hex SHA-256 of the binary image; stable across save/load round trips.
pub fn model_hash(model: &SurrogateModel) -> String {
    let digest = Sha256::digest(model_to_bytes(model));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".json");
    name.into()
}

/// Writes the binary weights plus the JSON sidecar.
pub fn save_model(model: &SurrogateModel, path: &Path) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io {
        context: format!("writing model {}", path.display()),
        source: e,
    };
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&model_to_bytes(model)).map_err(io_err)?;
    let meta = serde_json::to_string_pretty(&model.meta).expect("meta serializes");
    std::fs::write(sidecar_path(path), meta + "\n").map_err(io_err)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SurrogateModel> {
    let io_err = |e: std::io::Error| Error::Io {
        context: format!("reading model {}", path.display()),
        source: e,
    };
    let bytes = std::fs::read(path).map_err(io_err)?;
    let sidecar = sidecar_path(path);
    let meta_text = std::fs::read_to_string(&sidecar).map_err(|e| Error::Io {
        context: format!(
            "reading model sidecar {} (retrain if it is missing)",
            sidecar.display()
        ),
        source: e,
    })?;
    let meta: ModelMeta = serde_json::from_str(&meta_text).map_err(|e| Error::Parse {
        path: sidecar.display().to_string(),
        message: e.to_string(),
    })?;
    model_from_bytes(&bytes, meta).map_err(|e| match e {
        Error::Parse { message, .. } => Error::Parse {
            path: path.display().to_string(),
            message,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::synthesize_system;
    use crate::surrogate::data::generate_dataset;
    use crate::surrogate::net::{predict_features, train, TrainConfig};

    fn tiny_model() -> SurrogateModel {
        let sys = synthesize_system(2, 1, 2, 3, 1).unwrap();
        let ds = generate_dataset(&sys, 60, 0).unwrap();
        let cfg = TrainConfig {
            hidden: vec![12, 12],
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        train(&ds, &cfg).unwrap()
    }

    #[test]
    fn save_load_round_trip_is_bit_identical() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ssnn");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(model, back);
        assert_eq!(model_hash(&model), model_hash(&back));

        // The loaded model predicts bit-identically.
        let row = vec![0.5f32; model.n_inputs()];
        let a = predict_features(&model, &row).unwrap();
        let b = predict_features(&back, &row).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = tiny_model();
        let mut bytes = model_to_bytes(&model);
        let meta = model.meta.clone();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            model_from_bytes(&bad_magic, meta.clone()),
            Err(Error::Parse { .. })
        ));

        let mut bad_version = bytes.clone();
        bad_version[4] = 99;
        assert!(matches!(
            model_from_bytes(&bad_version, meta.clone()),
            Err(Error::Parse { .. })
        ));

        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            model_from_bytes(&bytes, meta.clone()),
            Err(Error::Parse { .. })
        ));

        // A sidecar whose counts disagree with the stored input width.
        let mut wrong = meta;
        wrong.counts.load += 1;
        assert!(matches!(
            model_from_bytes(&model_to_bytes(&model), wrong),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn missing_sidecar_is_an_io_error() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ssnn");
        save_model(&model, &path).unwrap();
        std::fs::remove_file(sidecar_path(&path)).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Io { .. })));
    }
}
