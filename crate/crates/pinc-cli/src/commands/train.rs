//! `pinc train`: fit the surrogate and leave a checkpoint, a per-iteration
//! report, and a reproduction manifest.

use super::{claim_outputs, output_dir, write_json};
use crate::config::ExperimentConfig;
use crate::manifest::Manifest;
use crate::{CliError, RunArgs};
use pinc_core::{load_training_csv, mse_gen, rk4_integrate, self_loop_rollout, train, Phase};
use serde::Serialize;
use std::time::Instant;

#[derive(Debug, Serialize)]
struct TrainSummary {
    lambda: f64,
    final_mse_y: f64,
    final_mse_f: f64,
    final_total: f64,
    final_mse_gen: Option<f64>,
    lbfgs_stopped_early: Option<String>,
    iterations: usize,
    param_count: usize,
    wall_ms: u128,
}

pub fn run(args: &RunArgs) -> Result<(), CliError> {
    if args.checkpoint.is_some() {
        return Err(CliError::Config(
            "train initializes from the config; --checkpoint is for evaluate/control".into(),
        ));
    }
    let config = ExperimentConfig::load(&args.config)?;
    let dir = output_dir(&config, args)?;
    claim_outputs(
        &dir,
        &[
            "manifest.json",
            "checkpoint.json",
            "train_report.csv",
            "train_summary.json",
            "snapshots",
        ],
        args.overwrite,
    )?;

    let model = config.build_model()?;
    let init = config.init_network(&model)?;
    let train_config = config.train_config();
    let data = match &config.sampling.data_file {
        Some(path) => Some(load_training_csv(path, &model)?),
        None => None,
    };

    let snap_dir = dir.join("snapshots");
    std::fs::create_dir_all(&snap_dir).map_err(|e| CliError::Io {
        path: snap_dir.clone(),
        source: e,
    })?;
    let mut hook = |params: &pinc_core::NetworkParams,
                    phase: Phase,
                    iter: usize|
     -> Result<(), pinc_core::NetworkError> {
        params.save_checkpoint(&snap_dir.join(format!("iter_{iter:06}_{phase}.json")))
    };

    let started = Instant::now();
    let (trained, mut report) = train(&init, &model, &train_config, data.as_ref(), Some(&mut hook))?;
    let wall_ms = started.elapsed().as_millis();

    // A validation rollout error, when a scenario describes one; a net bad
    // enough to diverge in self-loop mode just leaves the field empty.
    if let Some(scenario) = &config.scenario {
        let steps = scenario.validation_steps.unwrap_or(scenario.c_steps);
        if steps > 0 && scenario.y0.len() == model.n_states() {
            let u_seq = super::random_u_sequence(&model, steps, scenario.validation_seed);
            let y0 = ndarray::Array1::from_vec(scenario.y0.clone());
            let rollout = self_loop_rollout(&trained, y0.view(), &u_seq);
            let oracle = rk4_integrate(
                &model,
                y0.view(),
                &u_seq,
                trained.t_horizon(),
                scenario.substeps,
            );
            if let (Ok(pinc), Ok(rk)) = (rollout, oracle) {
                if let Ok((value, _)) = mse_gen(&pinc, &rk) {
                    report.final_mse_gen = Some(value);
                }
            }
        }
    }

    trained.save_checkpoint(&dir.join("checkpoint.json"))?;
    let report_path = dir.join("train_report.csv");
    report.save_csv(&report_path).map_err(|e| CliError::Io {
        path: report_path,
        source: e,
    })?;
    write_json(
        &dir.join("train_summary.json"),
        &TrainSummary {
            lambda: report.lambda,
            final_mse_y: report.final_mse_y,
            final_mse_f: report.final_mse_f,
            final_total: report.final_total,
            final_mse_gen: report.final_mse_gen,
            lbfgs_stopped_early: report.lbfgs_stopped_early.clone(),
            iterations: report.records.len(),
            param_count: trained.param_count(),
            wall_ms,
        },
    )?;
    let manifest = Manifest::new(
        "train",
        &config,
        &[
            ("sampling", config.sampling.seed),
            ("collocation", config.sampling.seed + 1),
            ("network", config.network.seed),
        ],
        wall_ms,
    )?;
    manifest.save(&dir.join("manifest.json"))?;
    println!(
        "trained {} parameters in {} iterations ({wall_ms} ms); outputs in {}",
        trained.param_count(),
        report.records.len(),
        dir.display()
    );
    Ok(())
}
