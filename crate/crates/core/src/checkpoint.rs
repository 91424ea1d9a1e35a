//! Model checkpoints: a self-describing JSON container holding the config,
//! every parameter tensor (row-major f64), a format-version field, and a
//! free-form provenance echo of the run configuration.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelState;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    state: ModelState,
    provenance: serde_json::Value,
}

/// Write a checkpoint. Parameters must be finite (JSON cannot carry NaN or
/// infinities losslessly).
pub fn save(state: &ModelState, provenance: serde_json::Value, path: &Path) -> Result<()> {
    let finite = state.trainable_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
        && state.patient_fixed.iter().all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFinite("model parameters".into()));
    }
    let checkpoint = Checkpoint {
        format_version: FORMAT_VERSION,
        state: state.clone(),
        provenance,
    };
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer(&mut out, &checkpoint)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelState, serde_json::Value)> {
    let file = File::open(path)?;
    let checkpoint: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
    if checkpoint.format_version != FORMAT_VERSION {
        return Err(Error::Structure(format!(
            "unsupported checkpoint format version {}",
            checkpoint.format_version
        )));
    }
    checkpoint.state.validate()?;
    Ok((checkpoint.state, checkpoint.provenance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_state, ModelConfig};
    use ndarray::Array2;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_is_exact() {
        let cfg = ModelConfig {
            embed_dim: 6,
            fixed_dim: 2,
            num_layers: 2,
            max_hops: 2,
            layer_dims: vec![6, 5],
            dropout: vec![0.1, 0.2],
            leaky_slope: 0.2,
            seed: 11,
        };
        let features = Array2::from_shape_fn((4, 2), |(i, j)| ((i + j) % 2) as f64);
        let state = init_state(&cfg, 7, &features.view()).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.json");
        save(&state, serde_json::json!({"run": "test"}), &path).unwrap();
        let (loaded, provenance) = load(&path).unwrap();
        assert_eq!(loaded, state);
        assert_eq!(provenance["run"], "test");
    }

    #[test]
    fn rejects_foreign_version() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.json");
        std::fs::write(
            &path,
            r#"{"format_version": 999, "state": {}, "provenance": null}"#,
        )
        .unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn rejects_non_finite_parameters() {
        let cfg = ModelConfig::plain_factorization(3, 1);
        let mut state = init_state(&cfg, 2, &Array2::zeros((2, 0)).view()).unwrap();
        state.disease_embed[[0, 0]] = f64::NAN;
        let dir = tempdir().unwrap();
        assert!(save(&state, serde_json::Value::Null, &dir.path().join("m.json")).is_err());
    }
}
