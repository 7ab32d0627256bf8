//! Command implementations and the filesystem conventions they share.

pub mod control;
pub mod evaluate;
pub mod sweep;
pub mod train;

use crate::config::ExperimentConfig;
use crate::{CliError, RunArgs};
use ndarray::Array1;
use pinc_core::{NetworkParams, OdeModel};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Resolve the run's output directory (`--out` wins) and create it.
pub fn output_dir(config: &ExperimentConfig, args: &RunArgs) -> Result<PathBuf, CliError> {
    let dir = args.out.clone().unwrap_or_else(|| config.output_dir.clone());
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

/// Refuse to clobber any of the run's planned outputs unless `--overwrite`,
/// in which case stale files are removed up front.
pub fn claim_outputs(dir: &Path, names: &[&str], overwrite: bool) -> Result<(), CliError> {
    for name in names {
        let path = dir.join(name);
        if path.exists() {
            if !overwrite {
                return Err(CliError::Clobber(path));
            }
            let removed = if path.is_dir() {
                std::fs::remove_dir_all(&path)
            } else {
                std::fs::remove_file(&path)
            };
            removed.map_err(|e| CliError::Io {
                path,
                source: e,
            })?;
        }
    }
    Ok(())
}

/// The checkpoint a command reads: `--checkpoint`, else the train output
/// location inside the run directory.
pub fn checkpoint_path(args: &RunArgs, dir: &Path) -> PathBuf {
    args.checkpoint
        .clone()
        .unwrap_or_else(|| dir.join("checkpoint.json"))
}

/// Load a checkpoint and verify it matches the configured model's shape.
pub fn load_checkpoint_for(
    path: &Path,
    model: &OdeModel,
) -> Result<NetworkParams, CliError> {
    let params = NetworkParams::load_checkpoint(path)?;
    if params.n_states() != model.n_states() || params.n_controls() != model.n_controls() {
        return Err(CliError::Config(format!(
            "checkpoint `{}` maps {} states / {} controls but model `{}` has {} / {}",
            path.display(),
            params.n_states(),
            params.n_controls(),
            model.name(),
            model.n_states(),
            model.n_controls()
        )));
    }
    Ok(params)
}

/// Deterministic random control sequence over the model's control box.
pub fn random_u_sequence(model: &OdeModel, steps: usize, seed: u64) -> Vec<Array1<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..steps)
        .map(|_| {
            Array1::from_iter(
                model
                    .control_ranges()
                    .iter()
                    .map(|&(lo, hi)| rng.random_range(lo..hi)),
            )
        })
        .collect()
}

/// Serialize a value as pretty JSON at `path`.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
