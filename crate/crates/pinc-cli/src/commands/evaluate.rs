//! `pinc evaluate`: roll the trained network out in self-loop mode on a
//! validation control sequence, compare against the RK oracle, and emit
//! plotting CSVs plus a metric report.

use super::{
    checkpoint_path, claim_outputs, load_checkpoint_for, output_dir, random_u_sequence,
    write_json,
};
use crate::config::ExperimentConfig;
use crate::manifest::Manifest;
use crate::{CliError, RunArgs};
use ndarray::Array1;
use pinc_core::{
    dense_prediction, mse_gen, rk4_integrate, rk4_step_fn, self_loop_rollout, MetricReport,
    NetworkParams, OdeModel, Trajectory,
};
use std::path::Path;
use std::time::Instant;

pub fn run(args: &RunArgs) -> Result<(), CliError> {
    let config = ExperimentConfig::load(&args.config)?;
    let dir = output_dir(&config, args)?;
    let scenario = config.scenario("evaluate")?;
    let dense = scenario.dense_points;
    let mut outputs = vec![
        "manifest.json",
        "metrics.json",
        "pinc_rollout.csv",
        "rk_oracle.csv",
    ];
    if dense > 0 {
        outputs.push("dense_prediction.csv");
    }
    claim_outputs(&dir, &outputs, args.overwrite)?;

    let model = config.build_model()?;
    let params = load_checkpoint_for(&checkpoint_path(args, &dir), &model)?;

    // Validation scenario: either replayed from a previous trajectory CSV
    // or a fresh random control sequence over the sampling region.
    let (y0, u_seq) = match &scenario.replay_file {
        Some(path) => {
            let prev = Trajectory::load_csv(path)?;
            if prev.states[0].len() != model.n_states() {
                return Err(CliError::Config(format!(
                    "replay file `{}` has {} states, the model has {}",
                    path.display(),
                    prev.states[0].len(),
                    model.n_states()
                )));
            }
            (prev.states[0].clone(), prev.controls)
        }
        None => {
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
                    "validation rollout needs at least one step".into(),
                ));
            }
            (
                Array1::from_vec(scenario.y0.clone()),
                random_u_sequence(&model, steps, scenario.validation_seed),
            )
        }
    };

    let started = Instant::now();
    let pinc = self_loop_rollout(&params, y0.view(), &u_seq)?;
    let oracle = rk4_integrate(
        &model,
        y0.view(),
        &u_seq,
        params.t_horizon(),
        scenario.substeps,
    )?;
    let (gen, per_output) = mse_gen(&pinc, &oracle)?;
    let wall_ms = started.elapsed().as_millis();

    pinc.save_csv(&dir.join("pinc_rollout.csv"))?;
    oracle.save_csv(&dir.join("rk_oracle.csv"))?;
    if dense > 0 {
        write_dense_csv(
            &dir.join("dense_prediction.csv"),
            &params,
            &model,
            &pinc,
            &oracle,
            dense,
            scenario.substeps,
        )?;
    }
    write_json(
        &dir.join("metrics.json"),
        &MetricReport {
            mse_gen: Some(gen),
            iae_normalized: None,
            iae_unnormalized_sum: None,
            rmse: None,
            steps: u_seq.len(),
            mse_gen_per_output: Some(per_output),
            rmse_per_output: None,
        },
    )?;
    let manifest = Manifest::new(
        "evaluate",
        &config,
        &[("validation", scenario.validation_seed)],
        wall_ms,
    )?;
    manifest.save(&dir.join("manifest.json"))?;
    println!(
        "mse_gen {gen:.6e} over {} self-loop steps; outputs in {}",
        u_seq.len(),
        dir.display()
    );
    Ok(())
}

/// Within-step prediction curves for plotting: both the network and the
/// oracle evaluated on a grid inside every sampling interval, each chained
/// from its own previous state.
fn write_dense_csv(
    path: &Path,
    params: &NetworkParams,
    model: &OdeModel,
    pinc: &Trajectory,
    oracle: &Trajectory,
    dense: usize,
    substeps: usize,
) -> Result<(), CliError> {
    let t_horizon = params.t_horizon();
    let ny = model.n_states();
    let mut out = String::from("k,t_local,t_abs");
    for i in 1..=ny {
        out.push_str(&format!(",y_pinc_{i}"));
    }
    for i in 1..=ny {
        out.push_str(&format!(",y_rk_{i}"));
    }
    out.push('\n');
    let mut rhs = |yv: ndarray::ArrayView1<f64>, uv: ndarray::ArrayView1<f64>| model.rhs(yv, uv);
    for (k, u) in pinc.controls.iter().enumerate() {
        let grid: Vec<f64> = (0..=dense)
            .map(|j| t_horizon * j as f64 / dense as f64)
            .collect();
        let net_curve = dense_prediction(params, pinc.states[k].view(), u.view(), &grid)?;
        for (j, &t) in grid.iter().enumerate() {
            let rk_point = if t == 0.0 {
                oracle.states[k].clone()
            } else {
                let sub = ((substeps as f64 * t / t_horizon).ceil() as usize).max(1);
                rk4_step_fn(&mut rhs, &oracle.states[k], u.view(), t, sub)?
            };
            out.push_str(&format!("{},{t},{}", k + 1, k as f64 * t_horizon + t));
            for v in net_curve[j].iter() {
                out.push_str(&format!(",{v}"));
            }
            for v in rk_point.iter() {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
