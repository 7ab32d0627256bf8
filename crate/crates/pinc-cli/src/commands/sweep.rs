//! `pinc sweep`: grid-search architectures and sampling budgets with a
//! fixed iteration budget, several independently seeded repetitions per
//! cell, reporting mean log10 generalization error.

use super::{claim_outputs, output_dir, random_u_sequence};
use crate::config::ExperimentConfig;
use crate::manifest::Manifest;
use crate::{CliError, RunArgs};
use ndarray::Array1;
use pinc_core::{mse_gen, rk4_integrate, self_loop_rollout, train, TrainConfig};
use rayon::prelude::*;
use std::time::Instant;

/// One grid cell: an architecture and a sampling budget.
#[derive(Debug, Clone)]
struct Cell {
    hidden_layers: Vec<usize>,
    n_t: usize,
    n_f: usize,
}

pub fn run(args: &RunArgs) -> Result<(), CliError> {
    let config = ExperimentConfig::load(&args.config)?;
    let dir = output_dir(&config, args)?;
    claim_outputs(&dir, &["manifest.json", "sweep.csv"], args.overwrite)?;
    let sweep = config
        .sweep
        .clone()
        .ok_or_else(|| CliError::Config("`sweep` requires a sweep section".into()))?;
    let scenario = config.scenario("sweep")?;
    if args.workers == 0 {
        return Err(CliError::Config("--workers must be at least 1".into()));
    }

    // Absent axes fall back to the base config, so a sweep can vary one
    // dimension at a time.
    let arch_axis: Vec<Vec<usize>> = if sweep.hidden_layer_grid.is_empty() {
        vec![config.network.hidden_layers.clone()]
    } else {
        sweep.hidden_layer_grid.clone()
    };
    let n_t_axis = if sweep.n_t_grid.is_empty() {
        vec![config.sampling.n_t]
    } else {
        sweep.n_t_grid.clone()
    };
    let n_f_axis = if sweep.n_f_grid.is_empty() {
        vec![config.sampling.n_f]
    } else {
        sweep.n_f_grid.clone()
    };
    if arch_axis.iter().any(|a| a.is_empty() || a.contains(&0)) {
        return Err(CliError::Config(
            "hidden_layer_grid entries must be non-empty positive widths".into(),
        ));
    }
    if n_t_axis.contains(&0) || n_f_axis.contains(&0) {
        return Err(CliError::Config("grid point counts must be positive".into()));
    }
    let mut cells = Vec::new();
    for arch in &arch_axis {
        for &n_t in &n_t_axis {
            for &n_f in &n_f_axis {
                cells.push(Cell {
                    hidden_layers: arch.clone(),
                    n_t,
                    n_f,
                });
            }
        }
    }

    let model = config.build_model()?;
    if scenario.y0.len() != model.n_states() {
        return Err(CliError::Config(format!(
            "scenario y0 has {} entries, the model has {} states",
            scenario.y0.len(),
            model.n_states()
        )));
    }
    let steps = scenario.validation_steps.unwrap_or(scenario.c_steps);
    if steps == 0 {
        return Err(CliError::Config(
            "sweep needs a validation rollout of at least one step".into(),
        ));
    }
    // One shared validation scenario and oracle across every cell.
    let y0 = Array1::from_vec(scenario.y0.clone());
    let u_seq = random_u_sequence(&model, steps, scenario.validation_seed);
    let oracle = rk4_integrate(
        &model,
        y0.view(),
        &u_seq,
        config.network.t_horizon,
        scenario.substeps,
    )?;

    let reps = sweep.repetitions;
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|ci| (0..reps).map(move |rep| (ci, rep)))
        .collect();

    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers)
        .build()
        .map_err(|e| CliError::Config(format!("building worker pool: {e}")))?;
    // Each job trains one repetition with its own seed offset and scores
    // the shared validation rollout; failures poison only their own cell
    // entry.
    let results: Vec<(usize, usize, Result<f64, String>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(ci, rep)| {
                let offset = (ci * reps + rep) as u64;
                let outcome = run_cell(&config, &model, &cells[ci], offset, &y0, &u_seq, &oracle);
                (ci, rep, outcome.map_err(|e| e.to_string()))
            })
            .collect()
    });
    let wall_ms = started.elapsed().as_millis();

    // Aggregate in cell order, independent of execution order.
    let mut per_cell: Vec<Vec<f64>> = vec![Vec::new(); cells.len()];
    let mut failures = 0usize;
    for (ci, _rep, outcome) in results {
        match outcome {
            Ok(v) => per_cell[ci].push(v.log10()),
            Err(_) => failures += 1,
        }
    }
    let mut out =
        String::from("cell,hidden_layers,n_t,n_f,reps_ok,mean_log10_mse_gen,min_log10_mse_gen,max_log10_mse_gen\n");
    for (ci, cell) in cells.iter().enumerate() {
        let arch = cell
            .hidden_layers
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let scores = &per_cell[ci];
        if scores.is_empty() {
            out.push_str(&format!("{ci},{arch},{},{},0,NaN,NaN,NaN\n", cell.n_t, cell.n_f));
            continue;
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.push_str(&format!(
            "{ci},{arch},{},{},{},{mean},{min},{max}\n",
            cell.n_t,
            cell.n_f,
            scores.len()
        ));
    }
    let csv_path = dir.join("sweep.csv");
    std::fs::write(&csv_path, out).map_err(|e| CliError::Io {
        path: csv_path,
        source: e,
    })?;
    let manifest = Manifest::new(
        "sweep",
        &config,
        &[
            ("sampling-base", config.sampling.seed),
            ("network-base", config.network.seed),
            ("validation", scenario.validation_seed),
        ],
        wall_ms,
    )?;
    manifest.save(&dir.join("manifest.json"))?;
    println!(
        "swept {} cells x {} reps ({} failed) in {wall_ms} ms; outputs in {}",
        cells.len(),
        reps,
        failures,
        dir.display()
    );
    Ok(())
}

/// Train one repetition and score it on the shared validation rollout.
fn run_cell(
    config: &ExperimentConfig,
    model: &pinc_core::OdeModel,
    cell: &Cell,
    seed_offset: u64,
    y0: &Array1<f64>,
    u_seq: &[Array1<f64>],
    oracle: &pinc_core::Trajectory,
) -> Result<f64, CliError> {
    let init = config.init_network_with(
        model,
        &cell.hidden_layers,
        config.network.seed + seed_offset,
    )?;
    let train_config = TrainConfig {
        n_t: cell.n_t,
        n_f: cell.n_f,
        seed: config.sampling.seed + seed_offset,
        ..config.train_config()
    };
    let (trained, _) = train(&init, model, &train_config, None, None)?;
    let rollout = self_loop_rollout(&trained, y0.view(), u_seq)?;
    let (gen, _) = mse_gen(&rollout, oracle)?;
    Ok(gen)
}
