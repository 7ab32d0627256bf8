//! `pinc control`: close the loop on the simulated plant with the trained
//! network as prediction model, optionally alongside an RK-as-model
//! baseline run under the identical scenario.

use super::{checkpoint_path, claim_outputs, load_checkpoint_for, output_dir, write_json};
use crate::config::{ExperimentConfig, ScenarioSection};
use crate::manifest::Manifest;
use crate::{CliError, RunArgs};
use ndarray::Array1;
use pinc_core::{
    control_report, project_outputs, receding_horizon_run, ClosedLoopRun, Controller,
    MetricReport, OdeModel, PincModel, PredictionModel, RkModel, Trajectory,
};
use serde::Serialize;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Serialize)]
struct ControlSummary {
    report: MetricReport,
    wall_ms: u128,
    mean_solver_iters: f64,
    converged_fraction: f64,
}

pub fn run(args: &RunArgs) -> Result<(), CliError> {
    let config = ExperimentConfig::load(&args.config)?;
    let dir = output_dir(&config, args)?;
    let scenario = config.scenario("control")?.clone();
    let mpc = config
        .mpc
        .clone()
        .ok_or_else(|| CliError::Config("`control` requires an mpc section".into()))?;
    let mut outputs = vec!["manifest.json", "closed_loop_pinc.csv", "metrics_pinc.json"];
    if scenario.rk_baseline {
        outputs.push("closed_loop_rk.csv");
        outputs.push("metrics_rk.json");
    }
    claim_outputs(&dir, &outputs, args.overwrite)?;

    let plant = config.build_model()?;
    let params = load_checkpoint_for(&checkpoint_path(args, &dir), &plant)?;
    if scenario.y0.len() != plant.n_states() {
        return Err(CliError::Config(format!(
            "scenario y0 has {} entries, the plant has {} states",
            scenario.y0.len(),
            plant.n_states()
        )));
    }
    let reference = scenario.reference_program(
        scenario.c_steps + mpc.n2 + 1,
        plant.n_states(),
    )?;
    let ts = params.t_horizon();

    let started = Instant::now();
    let pinc_ctrl = Controller::new(PincModel::new(params), mpc.clone())?;
    run_one(
        pinc_ctrl,
        &plant,
        &scenario,
        &reference,
        &dir.join("closed_loop_pinc.csv"),
        &dir.join("metrics_pinc.json"),
    )?;
    if scenario.rk_baseline {
        let rk_ctrl = Controller::new(
            RkModel::new(plant.clone(), ts, scenario.substeps)?,
            mpc.clone(),
        )?;
        run_one(
            rk_ctrl,
            &plant,
            &scenario,
            &reference,
            &dir.join("closed_loop_rk.csv"),
            &dir.join("metrics_rk.json"),
        )?;
    }
    let manifest = Manifest::new("control", &config, &[], started.elapsed().as_millis())?;
    manifest.save(&dir.join("manifest.json"))?;
    println!(
        "closed {}-step loop{}; outputs in {}",
        scenario.c_steps,
        if scenario.rk_baseline {
            " with RK baseline"
        } else {
            ""
        },
        dir.display()
    );
    Ok(())
}

fn run_one<M: PredictionModel>(
    mut controller: Controller<M>,
    plant: &OdeModel,
    scenario: &ScenarioSection,
    reference: &[Array1<f64>],
    log_path: &Path,
    metrics_path: &Path,
) -> Result<(), CliError> {
    let u_start = scenario.u_start.as_ref().map(|u| Array1::from_vec(u.clone()));
    let y0 = Array1::from_vec(scenario.y0.clone());
    let started = Instant::now();
    let run = receding_horizon_run(
        &mut controller,
        plant,
        y0.view(),
        u_start.as_ref().map(|u| u.view()),
        reference,
        scenario.c_steps,
        scenario.substeps,
    )?;
    let wall_ms = started.elapsed().as_millis();
    run.save_csv(log_path)?;
    let report = tracking_metrics(&run, scenario.controlled_outputs.as_deref())?;
    let steps = run.solver_iters.len().max(1) as f64;
    write_json(
        metrics_path,
        &ControlSummary {
            report,
            wall_ms,
            mean_solver_iters: run.solver_iters.iter().sum::<usize>() as f64 / steps,
            converged_fraction: run.converged.iter().filter(|c| **c).count() as f64 / steps,
        },
    )
}

/// Tracking metrics, restricted to the controlled outputs when the
/// scenario names a subset (tank levels h3/h4 are measured but not
/// referenced, so they stay out of IAE/RMSE).
fn tracking_metrics(
    run: &ClosedLoopRun,
    outputs: Option<&[usize]>,
) -> Result<MetricReport, CliError> {
    match outputs {
        None => Ok(control_report(&run.trajectory, &run.references)?),
        Some(indices) => {
            let projected = Trajectory {
                ts: run.trajectory.ts,
                states: project_outputs(&run.trajectory.states, indices),
                controls: run.trajectory.controls.clone(),
                provenance: run.trajectory.provenance,
            };
            let refs = project_outputs(&run.references, indices);
            Ok(control_report(&projected, &refs)?)
        }
    }
}
