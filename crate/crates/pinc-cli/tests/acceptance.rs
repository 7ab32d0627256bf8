//! Workspace acceptance gates.
//!
//! Each test exercises one numbered requirement end to end — training real
//! networks where the requirement demands one — and prints a single
//! `ACCEPTANCE <n> <PASS|FAIL>` line with the measured values before
//! asserting, so a failed run still reports what every criterion measured.
//! Trained models are shared across criteria through `OnceLock` so the
//! expensive identification runs happen once per suite invocation.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{array, Array1, ArrayView1};
use pinc_core::*;
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

/// Print the per-criterion verdict line, then enforce it.
fn check(n: usize, what: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {n} {verdict}: {what} — {detail}");
    assert!(pass, "criterion {n} failed: {what} — {detail}");
}

fn random_vector(rng: &mut ChaCha8Rng, ranges: &[(f64, f64)]) -> Array1<f64> {
    Array1::from_iter(ranges.iter().map(|&(lo, hi)| rng.random_range(lo..hi)))
}

fn random_u_sequence(ranges: &[(f64, f64)], steps: usize, seed: u64) -> Vec<Array1<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..steps).map(|_| random_vector(&mut rng, ranges)).collect()
}

/// Largest per-component |f(0, y0, u) - y0| over uniformly sampled inputs.
fn worst_boundary_error(params: &NetworkParams, model: &OdeModel, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let y0 = random_vector(&mut rng, model.state_ranges());
        let u = random_vector(&mut rng, model.control_ranges());
        let p = params
            .forward(0.0, y0.view(), u.view())
            .expect("forward at t = 0");
        for i in 0..y0.len() {
            worst = worst.max((p.y[i] - y0[i]).abs());
        }
    }
    worst
}

struct TrainedModel {
    params: NetworkParams,
    model: OdeModel,
    train_secs: f64,
}

static VDP: OnceLock<TrainedModel> = OnceLock::new();
static TANKS: OnceLock<TrainedModel> = OnceLock::new();

/// Van der Pol identification at the reduced scale the criteria fix:
/// 4x20 net, N_t = 1000, N_F = 20000, K1 = 500, K2 = 5000.
fn vdp() -> &'static TrainedModel {
    VDP.get_or_init(|| {
        let model = OdeModel::van_der_pol(1.0).expect("van der pol model");
        let params = NetworkParams::init(
            &[4, 20, 20, 20, 20, 2],
            0.5,
            model.state_ranges(),
            model.control_ranges(),
            OutputScalingMode::Identity,
            2,
        )
        .expect("network init");
        let config = TrainConfig {
            n_t: 1000,
            n_f: 20_000,
            k1: 500,
            k2: 5000,
            lambda: Lambda::Auto,
            seed: 0,
            checkpoint_every: 100_000,
            lbfgs: LbfgsConfig {
                memory: 30,
                ..LbfgsConfig::default()
            },
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let (trained, _) = train(&params, &model, &config, None, None).expect("vdp training");
        TrainedModel {
            params: trained,
            model,
            train_secs: t0.elapsed().as_secs_f64(),
        }
    })
}

/// Four-tank identification at a reduced scale (the tank scale is not
/// pinned by the criteria; this one trains in minutes and tracks well).
fn tanks() -> &'static TrainedModel {
    TANKS.get_or_init(|| {
        let model = OdeModel::four_tank(FourTankParams::default()).expect("four tank model");
        let params = NetworkParams::init(
            &[7, 20, 20, 20, 20, 20, 4],
            10.0,
            model.state_ranges(),
            model.control_ranges(),
            OutputScalingMode::Centered,
            1,
        )
        .expect("network init");
        let config = TrainConfig {
            n_t: 1000,
            n_f: 10_000,
            k1: 500,
            k2: 2500,
            lambda: Lambda::Auto,
            seed: 0,
            checkpoint_every: 100_000,
            lbfgs: LbfgsConfig {
                memory: 30,
                ..LbfgsConfig::default()
            },
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let (trained, _) = train(&params, &model, &config, None, None).expect("tank training");
        TrainedModel {
            params: trained,
            model,
            train_secs: t0.elapsed().as_secs_f64(),
        }
    })
}

// ---------------------------------------------------------------------------
// Criterion 1: gradients against central finite differences.
// ---------------------------------------------------------------------------

/// Composite training loss mse_y + 0.7 mse_f at a flat parameter vector.
fn composite_loss(eval: &mut LossEvaluator, x: &Array1<f64>) -> f64 {
    let (terms, _, _) = eval.eval_with_grad(x).expect("loss evaluation");
    terms.mse_y + 0.7 * terms.mse_f
}

fn loss_gradient_worst_error(draws: usize) -> f64 {
    let vdp_model = OdeModel::van_der_pol(1.0).expect("vdp");
    let tank_model = OdeModel::four_tank(FourTankParams::default()).expect("tanks");
    let mut worst = 0.0f64;
    for draw in 0..draws {
        let (model, layers, t_horizon, scaling): (&OdeModel, &[usize], f64, OutputScalingMode) =
            if draw % 2 == 0 {
                (&vdp_model, &[4, 6, 2], 0.5, OutputScalingMode::Identity)
            } else {
                (&tank_model, &[7, 5, 4], 10.0, OutputScalingMode::Centered)
            };
        let params = NetworkParams::init(
            layers,
            t_horizon,
            model.state_ranges(),
            model.control_ranges(),
            scaling,
            1000 + draw as u64,
        )
        .expect("small net init");
        let data = sample_training_set(model, 3, draw as u64).expect("data");
        let colloc =
            sample_collocation_set(model, t_horizon, 5, 500 + draw as u64).expect("collocation");
        let mut eval = LossEvaluator::build(&params, model, &data, &colloc).expect("evaluator");

        let mut x = params.to_flat();
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + draw as u64);
        for v in x.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }

        let (terms, gy, gf) = eval.eval_with_grad(&x).expect("gradient evaluation");
        assert!(terms.mse_y.is_finite() && terms.mse_f.is_finite());
        let ad = &gy + &(&gf * 0.7);

        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (composite_loss(&mut eval, &xp) - composite_loss(&mut eval, &xm)) / (2.0 * eps);
            let rel = (ad[i] - fd).abs() / ad[i].abs().max(fd.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

fn small_vdp_mpc_config() -> MpcConfig {
    MpcConfig {
        n1: 1,
        n2: 3,
        nu: 2,
        q: vec![1.0, 0.5],
        r: vec![0.1],
        u_bounds: vec![(-1.0, 1.0)],
        du_bounds: vec![(-2.0, 2.0)],
        state_constraints: vec![],
        solver: SolverConfig::default(),
    }
}

fn small_tank_mpc_config() -> MpcConfig {
    MpcConfig {
        n1: 1,
        n2: 3,
        nu: 2,
        q: vec![1.0, 1.0, 0.0, 0.0],
        r: vec![0.1, 0.1],
        u_bounds: vec![(0.0, 5.0), (0.0, 5.0)],
        du_bounds: vec![(-1.0, 1.0), (-1.0, 1.0)],
        state_constraints: vec![StateConstraint {
            index: 2,
            lower: 0.6,
            upper: 4.5,
            weight: 25.0,
        }],
        solver: SolverConfig::default(),
    }
}

fn mpc_gradient_worst_error<M: PredictionModel>(
    controller: &mut Controller<M>,
    model: &OdeModel,
    config: &MpcConfig,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = random_vector(&mut rng, model.state_ranges());
    let u_prev = random_vector(&mut rng, &config.u_bounds);
    let refs: Vec<Array1<f64>> = (0..config.n2)
        .map(|_| random_vector(&mut rng, model.state_ranges()))
        .collect();
    let du = Array1::from_iter(
        (0..config.nu).flat_map(|_| {
            config
                .du_bounds
                .iter()
                .map(|&(lo, hi)| rng.random_range(lo..hi))
                .collect::<Vec<_>>()
        }),
    );

    let (_, grad) = controller
        .evaluate_cost(y0.view(), u_prev.view(), &refs, &du)
        .expect("cost and gradient");

    let eps = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..du.len() {
        let mut dp = du.clone();
        dp[i] += eps;
        let mut dm = du.clone();
        dm[i] -= eps;
        let (jp, _) = controller
            .evaluate_cost(y0.view(), u_prev.view(), &refs, &dp)
            .expect("cost at +eps");
        let (jm, _) = controller
            .evaluate_cost(y0.view(), u_prev.view(), &refs, &dm)
            .expect("cost at -eps");
        let fd = (jp - jm) / (2.0 * eps);
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn criterion_1_gradients_match_central_differences() {
    let t0 = Instant::now();

    let loss_worst = loss_gradient_worst_error(100);

    let vdp_model = OdeModel::van_der_pol(1.0).expect("vdp");
    let tank_model = OdeModel::four_tank(FourTankParams::default()).expect("tanks");
    let mut mpc_worst = 0.0f64;
    for draw in 0..40u64 {
        let rk = RkModel::new(vdp_model.clone(), 0.5, 5).expect("rk model");
        let mut ctl = Controller::new(rk, small_vdp_mpc_config()).expect("controller");
        mpc_worst = mpc_worst.max(mpc_gradient_worst_error(
            &mut ctl,
            &vdp_model,
            &small_vdp_mpc_config(),
            100 + draw,
        ));
    }
    for draw in 0..30u64 {
        let rk = RkModel::new(tank_model.clone(), 10.0, 5).expect("rk model");
        let mut ctl = Controller::new(rk, small_tank_mpc_config()).expect("controller");
        mpc_worst = mpc_worst.max(mpc_gradient_worst_error(
            &mut ctl,
            &tank_model,
            &small_tank_mpc_config(),
            200 + draw,
        ));
    }
    for draw in 0..30u64 {
        let params = NetworkParams::init(
            &[4, 8, 2],
            0.5,
            vdp_model.state_ranges(),
            vdp_model.control_ranges(),
            OutputScalingMode::Identity,
            300 + draw,
        )
        .expect("small net");
        let mut ctl =
            Controller::new(PincModel::new(params), small_vdp_mpc_config()).expect("controller");
        mpc_worst = mpc_worst.max(mpc_gradient_worst_error(
            &mut ctl,
            &vdp_model,
            &small_vdp_mpc_config(),
            400 + draw,
        ));
    }

    let secs = t0.elapsed().as_secs_f64();
    check(
        1,
        "loss and horizon-cost gradients match central differences",
        loss_worst < 1e-5 && mpc_worst < 1e-4 && secs < 60.0,
        &format!(
            "worst loss-gradient rel err {loss_worst:.2e} (tol 1e-5, 100 draws), \
             worst cost-gradient rel err {mpc_worst:.2e} (tol 1e-4, 100 draws), {secs:.1} s (budget 60 s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: integrator order and equilibrium fidelity.
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_rk4_order_and_equilibrium() {
    // Exponential decay: halving the substep length must shrink the error
    // by the classical fourth-order factor (about 16).
    let mut rhs =
        |y: ArrayView1<f64>, _u: ArrayView1<f64>| Ok(y.mapv(|v| -v));
    let y0 = array![1.0];
    let u = array![0.0];
    let exact = (-1.0f64).exp();
    let errors: Vec<f64> = [2usize, 4, 8, 16]
        .iter()
        .map(|&s| {
            let y = rk4_step_fn(&mut rhs, &y0, u.view(), 1.0, s).expect("rk4 step");
            (y[0] - exact).abs()
        })
        .collect();
    let ratios: Vec<f64> = errors.windows(2).map(|w| w[0] / w[1]).collect();
    let order_ok = ratios.iter().all(|&r| (12.0..=20.0).contains(&r));

    // Van der Pol holds its equilibrium (u, 0) exactly; the integrator must
    // stay on it to fp accuracy over a long run.
    let model = OdeModel::van_der_pol(1.0).expect("vdp");
    let u_eq = 1.2;
    let u_seq = vec![array![u_eq]; 100];
    let traj = rk4_integrate(&model, array![u_eq, 0.0].view(), &u_seq, 0.5, 10)
        .expect("equilibrium integration");
    let drift = traj
        .states
        .iter()
        .map(|y| (y[0] - u_eq).abs().max(y[1].abs()))
        .fold(0.0f64, f64::max);

    check(
        2,
        "integrator shows fourth-order convergence and holds the equilibrium",
        order_ok && drift <= 1e-9,
        &format!(
            "error ratios per halving {ratios:?} (band [12, 20]), \
             equilibrium drift {drift:.2e} over 100 steps (tol 1e-9)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: identification quality at the fixed reduced scale.
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_van_der_pol_identification() {
    let trained = vdp();
    let u_seq = random_u_sequence(trained.model.control_ranges(), 200, 42);
    let y0 = array![0.0, 0.0];
    let pinc = self_loop_rollout(&trained.params, y0.view(), &u_seq).expect("self-loop rollout");
    let oracle = rk4_integrate(&trained.model, y0.view(), &u_seq, 0.5, 10).expect("oracle");
    let (mse, per_output) = mse_gen(&pinc, &oracle).expect("mse_gen");

    let mins = trained.train_secs / 60.0;
    check(
        3,
        "reduced-scale identification generalizes over a 200-step rollout",
        mse < 1e-2 && mins < 30.0,
        &format!(
            "mse_gen {mse:.3e} (tol 1e-2, log10 {:.2}), per-output {per_output:?}, \
             trained 4x20 with N_t=1000 N_F=20000 K1=500 K2=5000 in {mins:.1} min (budget 30 min)",
            mse.log10()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: initial-condition fidelity of the trained net.
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_initial_condition_fidelity() {
    let trained = vdp();
    let worst = worst_boundary_error(&trained.params, &trained.model, 1000, 7);
    check(
        4,
        "trained net reproduces the initial state at t = 0",
        worst < 1e-2,
        &format!("max per-component |f(0, y0, u) - y0| {worst:.3e} over 1000 draws (tol 1e-2)"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: Van der Pol closed loop against the exact-model baseline.
// ---------------------------------------------------------------------------

fn vdp_step_program(len: usize) -> Vec<Array1<f64>> {
    (0..len)
        .map(|k| {
            let r = if k < 30 {
                0.75
            } else if k < 60 {
                -0.75
            } else if k < 90 {
                0.25
            } else {
                -0.25
            };
            array![r, 0.0]
        })
        .collect()
}

fn vdp_mpc_config() -> MpcConfig {
    MpcConfig {
        n1: 1,
        n2: 5,
        nu: 5,
        q: vec![10.0, 10.0],
        r: vec![1.0],
        u_bounds: vec![(-1.0, 1.0)],
        du_bounds: vec![(-2.0, 2.0)],
        state_constraints: vec![],
        solver: SolverConfig::default(),
    }
}

#[test]
fn criterion_5_van_der_pol_closed_loop() {
    let trained = vdp();
    let c_steps = 120usize;
    let refs = vdp_step_program(c_steps + 6);
    let y0 = array![0.0, 0.0];

    let mut pinc_ctl =
        Controller::new(PincModel::new(trained.params.clone()), vdp_mpc_config())
            .expect("pinc controller");
    let run_pinc = receding_horizon_run(
        &mut pinc_ctl,
        &trained.model,
        y0.view(),
        None,
        &refs,
        c_steps,
        10,
    )
    .expect("pinc closed loop");
    let (rmse_pinc, _) = rmse(&run_pinc.trajectory, &run_pinc.references).expect("rmse");

    let rk_model = RkModel::new(trained.model.clone(), 0.5, 10).expect("rk prediction model");
    let mut rk_ctl = Controller::new(rk_model, vdp_mpc_config()).expect("rk controller");
    let run_rk = receding_horizon_run(
        &mut rk_ctl,
        &trained.model,
        y0.view(),
        None,
        &refs,
        c_steps,
        10,
    )
    .expect("rk closed loop");
    let (rmse_rk, _) = rmse(&run_rk.trajectory, &run_rk.references).expect("rmse");

    check(
        5,
        "closed-loop tracking matches the exact-model controller",
        rmse_pinc <= 0.30 && rmse_pinc <= 1.5 * rmse_rk,
        &format!(
            "rmse {rmse_pinc:.4} (tol 0.30) vs exact-model baseline {rmse_rk:.4} \
             (ratio {:.3}, tol 1.5) over 120 steps",
            rmse_pinc / rmse_rk
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: four-tank closed loop with soft level constraints.
// ---------------------------------------------------------------------------

fn tank_reference_program(len: usize) -> Vec<Array1<f64>> {
    (0..len)
        .map(|k| {
            if k < 80 {
                array![11.3, 11.9, 0.0, 0.0]
            } else if k < 160 {
                array![12.2, 12.2, 0.0, 0.0]
            } else {
                array![10.8, 11.2, 0.0, 0.0]
            }
        })
        .collect()
}

/// Tank horizons must cover the slow cross-coupled dynamics: with the
/// plant's 40-90 s tank time constants, a 50 s preview optimizes the
/// transient gain mix and parks h4 on the constraint boundary; 120 s sees
/// the steady redistribution.
fn tank_mpc_config() -> MpcConfig {
    MpcConfig {
        n1: 1,
        n2: 12,
        nu: 3,
        q: vec![10.0, 10.0, 0.0, 0.0],
        r: vec![0.1, 0.1],
        u_bounds: vec![(0.0, 5.0), (0.0, 5.0)],
        du_bounds: vec![(-1.0, 1.0), (-1.0, 1.0)],
        state_constraints: vec![
            StateConstraint {
                index: 2,
                lower: 0.6,
                upper: 5.5,
                weight: 100.0,
            },
            StateConstraint {
                index: 3,
                lower: 0.6,
                upper: 5.5,
                weight: 100.0,
            },
        ],
        solver: SolverConfig {
            max_iterations: 400,
            gradient_tolerance: 1e-5,
            penalty_growth: 10.0,
        },
    }
}

#[test]
fn criterion_6_four_tank_closed_loop() {
    let trained = tanks();
    let c_steps = 240usize;
    let refs = tank_reference_program(c_steps + 13);
    let y0 = array![11.29, 11.95, 4.29, 4.52];
    let u_start = array![3.0, 3.0];

    let mut ctl = Controller::new(PincModel::new(trained.params.clone()), tank_mpc_config())
        .expect("tank controller");
    let run = receding_horizon_run(
        &mut ctl,
        &trained.model,
        y0.view(),
        Some(u_start.view()),
        &refs,
        c_steps,
        10,
    )
    .expect("tank closed loop");

    // Constrained levels h3, h4 must stay inside the band at every step.
    let mut band_breach = 0.0f64;
    for y in &run.trajectory.states {
        for i in [2usize, 3] {
            band_breach = band_breach.max(y[i] - 5.5).max(0.6 - y[i]);
        }
    }

    // Controlled levels must settle to within 5% of each setpoint before the
    // next reference change. Solves from step 68 already see the next
    // setpoint inside their 12-step preview, so the settled reading is taken
    // just before that preview begins.
    let mut settle_err = 0.0f64;
    for (k_check, k_ref) in [(68usize, 67usize), (148, 147), (240, 239)] {
        let y = &run.trajectory.states[k_check];
        let r = &refs[k_ref];
        for i in 0..2 {
            settle_err = settle_err.max((y[i] - r[i]).abs() / r[i]);
        }
    }

    check(
        6,
        "four-tank loop respects the level band and reaches each setpoint",
        band_breach <= 0.05 && settle_err <= 0.05,
        &format!(
            "worst [0.6, 5.5] band breach {band_breach:.3} cm (tol 0.05), \
             worst settled level error {:.1}% of setpoint (tol 5%) over 240 steps",
            settle_err * 100.0
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: metric definitions, exact on hand-computed cases.
// ---------------------------------------------------------------------------

fn traj(ts: f64, states: Vec<Array1<f64>>) -> Trajectory {
    let controls = vec![Array1::zeros(1); states.len() - 1];
    Trajectory {
        ts,
        states,
        controls,
        provenance: Provenance::Rk,
    }
}

#[test]
fn criterion_7_metric_hand_cases() {
    let tol = 1e-12;
    let mut failures: Vec<String> = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64| {
        if (got - want).abs() > tol {
            failures.push(format!("{name}: got {got}, want {want}"));
        }
    };

    // mse_gen: identical trajectories score zero.
    let a = traj(1.0, vec![array![1.0, 2.0], array![3.0, 4.0], array![5.0, 6.0]]);
    let (m, _) = mse_gen(&a, &a).expect("mse_gen");
    expect("mse_gen identical", m, 0.0);

    // mse_gen: constant 0.1 offset on one of two outputs over two steps.
    let b = traj(1.0, vec![array![0.0, 0.0], array![1.1, 1.0], array![2.1, 2.0]]);
    let c = traj(1.0, vec![array![0.0, 0.0], array![1.0, 1.0], array![2.0, 2.0]]);
    let (m, per) = mse_gen(&b, &c).expect("mse_gen");
    expect("mse_gen offset mean", m, 0.005);
    expect("mse_gen offset per[0]", per[0], 0.01);
    expect("mse_gen offset per[1]", per[1], 0.0);

    // mse_gen: three steps, two outputs, hand-summed squared errors
    // (0.17 and 0.14) give (0.17 + 0.14) / 6.
    let p = traj(
        1.0,
        vec![
            array![0.0, 0.0],
            array![1.1, 0.8],
            array![2.0, 2.3],
            array![2.6, 3.1],
        ],
    );
    let q = traj(
        1.0,
        vec![
            array![0.0, 0.0],
            array![1.0, 1.0],
            array![2.0, 2.0],
            array![3.0, 3.0],
        ],
    );
    let (m, _) = mse_gen(&p, &q).expect("mse_gen");
    expect("mse_gen hand case", m, 0.31 / 6.0);

    // mse_gen ignores the shared-by-construction step 0.
    let d = traj(1.0, vec![array![99.0], array![2.0]]);
    let e = traj(1.0, vec![array![0.0], array![2.0]]);
    let (m, _) = mse_gen(&d, &e).expect("mse_gen");
    expect("mse_gen ignores step 0", m, 0.0);

    // IAE: perfect tracking scores zero in both conventions.
    let t = traj(1.0, vec![array![1.0, 2.0]; 5]);
    let refs = constant_reference(array![1.0, 2.0].view(), 5);
    let (norm, total) = iae(&t, &refs).expect("iae");
    expect("iae perfect normalized", norm, 0.0);
    expect("iae perfect total", total, 0.0);

    // IAE: constant unit error on two outputs over four steps.
    let t = traj(1.0, vec![array![1.0, 3.0]; 5]);
    let refs = constant_reference(array![2.0, 2.0].view(), 5);
    let (norm, total) = iae(&t, &refs).expect("iae");
    expect("iae unit normalized", norm, 1.0);
    expect("iae unit total", total, 8.0);

    // IAE: hand case with per-step absolute errors 1.5, 0.25, 2.75, 0.5.
    let t = traj(
        1.0,
        vec![
            array![0.0, 0.0],
            array![-0.5, 1.0],
            array![-0.25, 0.0],
            array![0.75, -2.0],
            array![0.0, 0.5],
        ],
    );
    let refs = constant_reference(array![0.0, 0.0].view(), 5);
    let (norm, total) = iae(&t, &refs).expect("iae");
    expect("iae hand total", total, 5.0);
    expect("iae hand normalized", norm, 0.625);

    // RMSE: perfect tracking scores zero; constant error c scores c.
    let t = traj(1.0, vec![array![1.0]; 4]);
    let (r, _) = rmse(&t, &constant_reference(array![1.0].view(), 4)).expect("rmse");
    expect("rmse perfect", r, 0.0);
    let (r, _) = rmse(&t, &constant_reference(array![1.3].view(), 4)).expect("rmse");
    expect("rmse constant error", r, 0.3);

    // RMSE: one step, per-output errors 3 and 4, mean of per-output RMS.
    let t = traj(1.0, vec![array![0.0, 0.0], array![3.0, -4.0]]);
    let (r, per) = rmse(&t, &constant_reference(array![0.0, 0.0].view(), 2)).expect("rmse");
    expect("rmse (3,4) per[0]", per[0], 3.0);
    expect("rmse (3,4) per[1]", per[1], 4.0);
    expect("rmse (3,4) mean", r, 3.5);

    check(
        7,
        "metric hand cases are exact",
        failures.is_empty(),
        &if failures.is_empty() {
            "18 hand-computed values matched at 1e-12".to_string()
        } else {
            failures.join("; ")
        },
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: horizon-solver structural properties.
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_mpc_solver_properties() {
    let mut failures: Vec<String> = Vec::new();

    // Increment aggregation: controls accumulate over the control horizon
    // and stay frozen beyond it.
    let u_prev = array![1.0, -1.0];
    let du = vec![array![0.1, 0.2], array![-0.3, 0.4], array![0.5, -0.6]];
    let u = aggregate_controls(u_prev.view(), &du, 5);
    let mut expected = Vec::new();
    let mut acc = u_prev.clone();
    for d in &du {
        acc = &acc + d;
        expected.push(acc.clone());
    }
    expected.push(expected[2].clone());
    expected.push(expected[2].clone());
    for (j, (got, want)) in u.iter().zip(expected.iter()).enumerate() {
        for i in 0..2 {
            if (got[i] - want[i]).abs() > 1e-15 {
                failures.push(format!("aggregation u[{j}][{i}]: got {}, want {}", got[i], want[i]));
            }
        }
    }

    // Stationarity: at an equilibrium-matching reference the solver keeps
    // the increments essentially zero.
    let model = OdeModel::van_der_pol(1.0).expect("vdp");
    let config = MpcConfig {
        n1: 1,
        n2: 5,
        nu: 5,
        q: vec![10.0, 10.0],
        r: vec![1.0],
        u_bounds: vec![(0.0, 2.0)],
        du_bounds: vec![(-1.0, 1.0)],
        state_constraints: vec![],
        solver: SolverConfig::default(),
    };
    let rk = RkModel::new(model.clone(), 0.5, 10).expect("rk model");
    let mut ctl = Controller::new(rk, config).expect("controller");
    let refs = constant_reference(array![1.2, 0.0].view(), 6);
    let sol = ctl
        .solve(array![1.2, 0.0].view(), array![1.2].view(), &refs[1..])
        .expect("equilibrium solve");
    let du_norm = sol
        .du
        .iter()
        .flat_map(|d| d.iter())
        .fold(0.0f64, |a, &v| a.max(v.abs()));
    if du_norm >= 1e-3 {
        failures.push(format!("equilibrium increments |du| {du_norm:.2e} >= 1e-3"));
    }
    if !sol.converged {
        failures.push("equilibrium solve did not converge".into());
    }

    // The optimized cost never exceeds the zero-increment warm start.
    let rk = RkModel::new(model.clone(), 0.5, 10).expect("rk model");
    let mut ctl = Controller::new(rk, vdp_mpc_config()).expect("controller");
    let refs = constant_reference(array![0.75, 0.0].view(), 6);
    let zeros = Array1::zeros(5);
    let (j_zero, _) = ctl
        .evaluate_cost(array![0.0, 0.0].view(), array![0.0].view(), &refs[1..], &zeros)
        .expect("zero-increment cost");
    let sol = ctl
        .solve(array![0.0, 0.0].view(), array![0.0].view(), &refs[1..])
        .expect("step solve");
    if sol.cost > j_zero + 1e-12 {
        failures.push(format!(
            "optimized cost {:.6} exceeds zero-increment cost {:.6}",
            sol.cost, j_zero
        ));
    }

    check(
        8,
        "aggregation, equilibrium stationarity, and cost monotonicity hold",
        failures.is_empty(),
        &if failures.is_empty() {
            "hand-expanded aggregation exact; |du| < 1e-3 at equilibrium; optimized cost <= warm-start cost"
                .to_string()
        } else {
            failures.join("; ")
        },
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: determinism and manifest reproducibility via the binary.
// ---------------------------------------------------------------------------

fn micro_config(out_dir: &Path) -> serde_json::Value {
    serde_json::json!({
        "schema_version": 1,
        "model": { "name": "van-der-pol", "mu": 1.0 },
        "network": { "hidden_layers": [8, 8], "t_horizon": 0.5, "seed": 11 },
        "sampling": { "n_t": 32, "n_f": 64, "seed": 5 },
        "training": { "k1": 30, "k2": 10, "checkpoint_every": 50 },
        "output_dir": out_dir.to_string_lossy()
    })
}

fn run_train(config_path: &Path, out: &Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_pinc"))
        .args([
            "train",
            "--config",
            config_path.to_str().expect("utf-8 path"),
            "--out",
            out.to_str().expect("utf-8 path"),
        ])
        .status()
        .expect("spawn trainer");
    assert!(status.success(), "training run failed");
}

#[test]
fn criterion_9_determinism_and_manifest_reproduction() {
    let dir = tempfile::tempdir().expect("tempdir");
    let config_path = dir.path().join("config.json");
    let config = micro_config(&dir.path().join("unused"));
    std::fs::write(&config_path, serde_json::to_vec_pretty(&config).expect("json"))
        .expect("write config");

    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    run_train(&config_path, &out1);
    run_train(&config_path, &out2);
    let ck1 = std::fs::read(out1.join("checkpoint.json")).expect("checkpoint 1");
    let ck2 = std::fs::read(out2.join("checkpoint.json")).expect("checkpoint 2");
    let identical = ck1 == ck2;

    // The manifest embeds the full config; a run launched from that embedded
    // config must land on the same bytes again.
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out1.join("manifest.json")).expect("manifest"))
            .expect("manifest json");
    let embedded = manifest.get("config").expect("embedded config").clone();
    let replay_config_path = dir.path().join("replay.json");
    std::fs::write(
        &replay_config_path,
        serde_json::to_vec_pretty(&embedded).expect("json"),
    )
    .expect("write replay config");
    let out3 = dir.path().join("run3");
    run_train(&replay_config_path, &out3);
    let ck3 = std::fs::read(out3.join("checkpoint.json")).expect("checkpoint 3");
    let reproduced = ck1 == ck3;

    check(
        9,
        "identical configs and manifest replays give bit-identical checkpoints",
        identical && reproduced,
        &format!(
            "two runs identical: {identical}; manifest-embedded config reproduces run: {reproduced} \
             ({} checkpoint bytes)",
            ck1.len()
        ),
    );
}
