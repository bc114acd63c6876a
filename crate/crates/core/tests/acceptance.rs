//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! The disability-retirement scenarios come from `configs/`; heavy pipelines
//! are shared between criteria through lazily initialised fixtures.

use reserve_engine::config::ScenarioConfig;
use reserve_engine::distributions::{
    backward_identity_check, solve_occupation, JointLaw, OccupationTable,
};
use reserve_engine::grid::TimeGrid;
use reserve_engine::mc::{
    estimate_backward_intensity, estimate_reserve, outflow_tables, simulate_paths, Conditioning,
    OutflowTables, Paths,
};
use reserve_engine::model::{
    DiscountCurve, InitialLaw, IntensitySpec, ModelSpec, PaymentSpec,
};
use reserve_engine::rates::{Func, Rate};
use reserve_engine::scenario::{bin_average, run_scenario, top_cells};
use reserve_engine::state::State;
use reserve_engine::thiele::{
    solve_extended_markov, solve_full_info, solve_g1, solve_g2, solve_practice_approx,
    thiele_residual, tower_check, FullInfoSurfaces, G1Surface, G2Surface, PracticeSurface,
    Regime, RegimeSurfaces, SolveOptions,
};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

const OCCUPANCY_FLOOR: f64 = 0.01;

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn load_config(name: &str) -> ScenarioConfig {
    let text = std::fs::read_to_string(config_path(name)).expect("scenario config readable");
    ScenarioConfig::from_json(&text).expect("scenario config parses")
}

fn pass(criterion: u32, summary: &str) {
    println!("criterion {criterion}: PASS - {summary}");
}

/// Shared heavy pipeline for one scenario.
struct Fixture {
    spec: Arc<ModelSpec>,
    grid: TimeGrid,
    occ: OccupationTable,
    law: JointLaw,
    full: FullInfoSurfaces,
    g1: G1Surface,
    g2: G2Surface,
    practice: PracticeSurface,
    paths: Paths,
    tables: OutflowTables,
    elapsed: Duration,
}

fn build_fixture(config_name: &str) -> Fixture {
    let config = load_config(config_name);
    let started = Instant::now();
    let spec = Arc::new(config.model.build().expect("model validates"));
    let grid = TimeGrid::for_payments(spec.horizon, config.grid_step, &spec.payments).unwrap();
    let occ = solve_occupation(&spec, &grid).unwrap();
    let law = JointLaw::build(&spec, &grid, &occ, config.effective_slice_spacing()).unwrap();
    let opts = SolveOptions {
        slice_spacing: config.effective_slice_spacing(),
        diag_half: true,
        with_pre: true,
        slices_only: false,
    };
    let full = solve_full_info(&spec, &grid, &law, &opts).unwrap();
    let g1 = solve_g1(&spec, &grid, &law, &opts).unwrap();
    let g2 = solve_g2(&spec, &grid, &law, &g1).unwrap();
    let practice = solve_practice_approx(&spec, &grid, &law, &g2);
    let paths = simulate_paths(&spec, config.mc.n_paths, config.mc.seed).unwrap();
    let tables = outflow_tables(&spec, &grid);
    let elapsed = started.elapsed();
    Fixture {
        spec,
        grid,
        occ,
        law,
        full,
        g1,
        g2,
        practice,
        paths,
        tables,
        elapsed,
    }
}

fn base_fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| build_fixture("disability_base.json"))
}

fn duration_fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| build_fixture("disability_duration.json"))
}

#[test]
fn criterion_1_closed_form_term_insurance() {
    let started = Instant::now();
    let sigma = 1;
    let (lambda, rho, n) = (0.02, 0.03, 40.0);
    let spec = ModelSpec {
        sigma,
        intensities: IntensitySpec::new(
            sigma,
            vec![(State::Pre(1), State::Dead, Rate::calendar(Func::Constant(lambda)))],
            0.1,
        )
        .unwrap(),
        payments: PaymentSpec::new(
            sigma,
            n,
            vec![],
            vec![(State::Pre(1), State::Dead, Func::Constant(1.0))],
            vec![],
        )
        .unwrap(),
        discount: DiscountCurve::ConstantRate(rho),
        initial: InitialLaw::default(),
        horizon: n,
    }
    .validate()
    .unwrap();
    let grid = TimeGrid::new(n, 1e-3).unwrap();
    let curves = solve_extended_markov(&spec, &grid).unwrap();
    let got = curves[State::Pre(1).ext_index(sigma)].at(0);
    // integral of e^{-rho s} lambda e^{-lambda s} ds over [0, 40]
    let expected = lambda / (lambda + rho) * (1.0 - (-(lambda + rho) * n).exp());
    let err = (got - expected).abs();
    let elapsed = started.elapsed();
    assert!(err < 1e-6, "analytic gap {err}");
    assert!(
        elapsed < Duration::from_secs(1),
        "runtime {elapsed:?} exceeds 1 s"
    );
    pass(
        1,
        &format!("two-state value {got} vs closed form {expected} (|gap| = {err:.3e}, {elapsed:?})"),
    );
}

#[test]
fn criterion_2_full_regime_oracle_agreement() {
    let fix = base_fixture();
    let grid = &fix.grid;
    let mut checked = 0;
    let mut worst_z: f64 = 0.0;
    let mut worst_label = String::new();
    let mut push = |label: String, analytic: f64, mean: f64, se: f64| {
        let z = if se > 0.0 { (mean - analytic) / se } else { 0.0 };
        if z.abs() > worst_z {
            worst_z = z.abs();
            worst_label = format!("{label}: analytic {analytic}, mc {mean} +- {se}");
        }
        assert!(
            z.abs() <= 3.0,
            "{label}: |z| = {} (analytic {analytic}, mc {mean} +- {se})",
            z.abs()
        );
        checked += 1;
    };
    for &t in &[0.0, 10.0, 20.0, 30.0] {
        let node = grid.node_index(t).unwrap();
        // pre-retirement states and the dead state under plain state
        // conditioning
        for j in 1..=fix.spec.sigma {
            if let Ok(est) = estimate_reserve(
                &fix.paths,
                &fix.tables,
                &Conditioning::InState {
                    t,
                    state: State::Pre(j),
                },
                1,
            ) {
                push(
                    format!("t={t} state-{j}"),
                    fix.full.pre[(j - 1) as usize].at(node),
                    est.mean,
                    est.std_error,
                );
            }
        }
        if let Ok(est) = estimate_reserve(
            &fix.paths,
            &fix.tables,
            &Conditioning::InState {
                t,
                state: State::Dead,
            },
            1,
        ) {
            push(
                format!("t={t} dead"),
                fix.full.dead.curve.at(node),
                est.mean,
                est.std_error,
            );
        }
        // fully conditioned pensioner cells: retirement-time, pre-state and
        // last-sojourn bins of width 0.1; cells need enough paths for a
        // meaningful standard error
        for (lo, hi, k, uh_lo, uh_hi, _count) in
            top_cells(&fix.paths, t, 0.1, 0.1, true, 3, 50)
        {
            let family = &fix.full.pensioner[(k - 1) as usize];
            let Some(analytic) = bin_average(&fix.law, family, node, lo, hi, grid) else {
                continue;
            };
            let est = estimate_reserve(
                &fix.paths,
                &fix.tables,
                &Conditioning::RetiredFull {
                    t,
                    eta_lo: lo,
                    eta_hi: hi,
                    pre_state: k,
                    uh_lo,
                    uh_hi,
                },
                1,
            )
            .expect("cell selected from the same paths");
            push(
                format!("t={t} pensioner eta[{lo:.1},{hi:.1}) h={k} uh[{uh_lo:.1},{uh_hi:.1})"),
                analytic,
                est.mean,
                est.std_error,
            );
        }
    }
    assert!(checked >= 12, "only {checked} comparisons available");
    assert!(
        fix.elapsed < Duration::from_secs(120),
        "pipeline took {:?}",
        fix.elapsed
    );
    pass(
        2,
        &format!(
            "{checked} full-information comparisons within 3 SE at 2e5 paths; worst |z| = {worst_z:.2} ({worst_label}); pipeline {:?}",
            fix.elapsed
        ),
    );
}

#[test]
fn criterion_3_g1_g2_oracle_agreement() {
    let fix = duration_fixture();
    let grid = &fix.grid;
    let mut checked = 0;
    let mut worst_z: f64 = 0.0;
    for &t in &[10.0, 20.0, 30.0] {
        let node = grid.node_index(t).unwrap();
        for (lo, hi, _, _, _, _) in top_cells(&fix.paths, t, 0.1, 1.0, false, 3, 200) {
            let analytic = bin_average(&fix.law, &fix.g1.pensioner, node, lo, hi, grid)
                .expect("slices cover the bin");
            let est = estimate_reserve(
                &fix.paths,
                &fix.tables,
                &Conditioning::RetiredEta { t, lo, hi },
                1,
            )
            .unwrap();
            let z = (est.mean - analytic) / est.std_error;
            worst_z = worst_z.max(z.abs());
            assert!(
                z.abs() <= 3.0,
                "g1 t={t} eta[{lo},{hi}): |z| = {} (analytic {analytic}, mc {} +- {})",
                z.abs(),
                est.mean,
                est.std_error
            );
            checked += 1;
        }
        let est = estimate_reserve(
            &fix.paths,
            &fix.tables,
            &Conditioning::InState {
                t,
                state: State::Pensioner,
            },
            1,
        )
        .unwrap();
        let analytic = fix.g2.value.at(node);
        let z = (est.mean - analytic) / est.std_error;
        worst_z = worst_z.max(z.abs());
        assert!(
            z.abs() <= 3.0,
            "g2 t={t}: |z| = {} (analytic {analytic}, mc {} +- {})",
            z.abs(),
            est.mean,
            est.std_error
        );
        checked += 1;
    }
    assert!(checked >= 9, "only {checked} comparisons");
    pass(
        3,
        &format!("{checked} retirement-dated and state-only comparisons within 3 SE (worst |z| = {worst_z:.2})"),
    );
}

#[test]
fn criterion_4_backward_intensity_identity() {
    // identity at the fine step on the health-dependent scenario
    let config = load_config("disability_base.json");
    let spec = Arc::new(config.model.build().unwrap());
    let grid = TimeGrid::for_payments(spec.horizon, 1e-3, &spec.payments).unwrap();
    let occ = solve_occupation(&spec, &grid).unwrap();
    let law = JointLaw::build(&spec, &grid, &occ, 0.5).unwrap();
    let report = backward_identity_check(&spec, &law, &occ, OCCUPANCY_FLOOR);
    assert!(report.nodes_checked > 1000);
    assert!(
        report.max_rel_discrepancy < 1e-3,
        "identity discrepancy {}",
        report.max_rel_discrepancy
    );
    assert!(
        report.max_sum_discrepancy < 1e-3,
        "sum discrepancy {}",
        report.max_sum_discrepancy
    );
    // reverse-window estimator against the analytic rate
    let fix = base_fixture();
    let h_b = 0.25;
    let mut worst_z: f64 = 0.0;
    for &t in &[10.0, 20.0, 30.0] {
        let est = estimate_backward_intensity(&fix.paths, None, t, h_b).unwrap();
        let analytic = law.mu_bar(t);
        // first-order bandwidth bias allowance: the window sees the rate
        // slightly earlier than t
        let bias = (law.mu_bar(t - h_b) - analytic).abs();
        let gap = (est.rate - analytic).abs();
        worst_z = worst_z.max(gap / est.std_error.max(1e-12));
        assert!(
            gap <= 3.0 * est.std_error + bias,
            "t={t}: rate {} vs {analytic} (se {}, bias allowance {bias})",
            est.rate,
            est.std_error
        );
    }
    pass(
        4,
        &format!(
            "identity discrepancy {:.3e} over {} nodes; reverse-window estimator within 3 SE + bias at bandwidth {h_b}",
            report.max_rel_discrepancy, report.nodes_checked
        ),
    );
}

#[test]
fn criterion_5_tower_property() {
    let fix = duration_fixture();
    let report = tower_check(&fix.law, &fix.g1, &fix.g2, &fix.grid);
    let threshold = 5e-3 * report.scale;
    assert!(
        report.max_abs_gap < threshold,
        "tower gap {} vs threshold {threshold}",
        report.max_abs_gap
    );
    // estimator-level tower identity: the bin-weighted average of the binned
    // estimates reproduces the state-only estimate exactly
    let t = 20.0;
    let total = estimate_reserve(
        &fix.paths,
        &fix.tables,
        &Conditioning::InState {
            t,
            state: State::Pensioner,
        },
        1,
    )
    .unwrap();
    let mut weighted = 0.0;
    let mut n_total = 0usize;
    let bin = 1.0;
    let mut lo = 0.0;
    while lo < t {
        if let Ok(est) = estimate_reserve(
            &fix.paths,
            &fix.tables,
            &Conditioning::RetiredEta {
                t,
                lo,
                hi: lo + bin,
            },
            1,
        ) {
            weighted += est.mean * est.n_effective as f64;
            n_total += est.n_effective;
        }
        lo += bin;
    }
    assert_eq!(n_total, total.n_effective);
    let combined = weighted / n_total as f64;
    let rel = (combined - total.mean).abs() / total.mean.abs().max(1.0);
    assert!(rel < 1e-12, "estimator tower defect {rel}");
    pass(
        5,
        &format!(
            "mixture gap {:.3e} below {threshold:.3e}; estimator tower defect {rel:.2e}",
            report.max_abs_gap
        ),
    );
}

#[test]
fn criterion_6_markov_collapse() {
    let config = load_config("disability_collapse.json");
    let spec = Arc::new(config.model.build().unwrap());
    let grid = TimeGrid::for_payments(spec.horizon, 1e-3, &spec.payments).unwrap();
    let occ = solve_occupation(&spec, &grid).unwrap();
    let law = JointLaw::build(&spec, &grid, &occ, 0.1).unwrap();
    let opts = SolveOptions {
        slice_spacing: 0.1,
        diag_half: true,
        with_pre: false,
        slices_only: false,
    };
    let g1 = solve_g1(&spec, &grid, &law, &opts).unwrap();
    let g2 = solve_g2(&spec, &grid, &law, &g1).unwrap();
    let practice = solve_practice_approx(&spec, &grid, &law, &g2);
    let full = solve_full_info(
        &spec,
        &grid,
        &law,
        &SolveOptions {
            slice_spacing: 0.1,
            diag_half: false,
            with_pre: false,
            slices_only: true,
        },
    )
    .unwrap();
    // full-information vs retirement-dated surfaces on matching slices
    let mut worst_full_g1: f64 = 0.0;
    for family in &full.pensioner {
        for slice in &family.slices {
            let g1_slice = fix_slice(&g1, slice.r_half);
            for node in slice.first_node..=grid.m() {
                worst_full_g1 = worst_full_g1
                    .max((slice.at_node(node) - g1_slice.at_node(node)).abs());
            }
        }
    }
    assert!(worst_full_g1 < 1e-6, "full vs g1 gap {worst_full_g1}");
    // retirement-dated diagonal vs state-only curve where pensioners exist
    let mut worst_diag_g2: f64 = 0.0;
    let mut adjustment_integral = 0.0;
    for node in 0..=grid.m() {
        if law.tail_alive.at_node(node) <= OCCUPANCY_FLOOR {
            continue;
        }
        worst_diag_g2 =
            worst_diag_g2.max((g1.pensioner.diag.at_node(node) - g2.value.at(node)).abs());
        adjustment_integral += g2.adjustment[node].abs() * grid.h();
    }
    assert!(worst_diag_g2 < 1e-6, "diag vs g2 gap {worst_diag_g2}");
    assert!(
        adjustment_integral < 1e-8,
        "adjustment integral {adjustment_integral}"
    );
    // the production shortcut coincides as well (used again by criterion 8)
    let practice_gap = practice
        .gap_vs_g2
        .iter()
        .enumerate()
        .filter(|(node, _)| law.tail_alive.at_node(*node) > OCCUPANCY_FLOOR)
        .fold(0.0f64, |a, (_, g)| a.max(g.abs()));
    assert!(practice_gap < 1e-6, "practice gap {practice_gap}");
    COLLAPSE_PRACTICE_GAP.set(practice_gap).ok();
    pass(
        6,
        &format!(
            "all regimes coincide: |full-g1| = {worst_full_g1:.2e}, |g1 diag - g2| = {worst_diag_g2:.2e}, correction integral {adjustment_integral:.2e}"
        ),
    );
}

static COLLAPSE_PRACTICE_GAP: OnceLock<f64> = OnceLock::new();

fn fix_slice<'a>(
    g1: &'a reserve_engine::thiele::G1Surface,
    r_half: usize,
) -> &'a reserve_engine::thiele::CharSolution {
    g1.pensioner
        .slice_at(r_half)
        .expect("matching slice stored")
}

#[test]
fn criterion_7_residual_order() {
    let config = load_config("disability_duration.json");
    let spec = Arc::new(config.model.build().unwrap());
    let mut per_regime: Vec<(Regime, Vec<f64>)> = vec![
        (Regime::Full, Vec::new()),
        (Regime::G1, Vec::new()),
        (Regime::G2, Vec::new()),
    ];
    for &h in &[0.04, 0.02, 0.01] {
        let grid = TimeGrid::for_payments(spec.horizon, h, &spec.payments).unwrap();
        let occ = solve_occupation(&spec, &grid).unwrap();
        let law = JointLaw::build(&spec, &grid, &occ, 0.2).unwrap();
        let opts = SolveOptions {
            slice_spacing: 0.2,
            diag_half: true,
            with_pre: true,
            slices_only: false,
        };
        let full = solve_full_info(&spec, &grid, &law, &opts).unwrap();
        let g1 = solve_g1(&spec, &grid, &law, &opts).unwrap();
        let g2 = solve_g2(&spec, &grid, &law, &g1).unwrap();
        for (regime, series) in per_regime.iter_mut() {
            let surfaces = match regime {
                Regime::Full => RegimeSurfaces::Full(&full),
                Regime::G1 => RegimeSurfaces::G1(&g1),
                Regime::G2 => RegimeSurfaces::G2 {
                    surface: &g2,
                    g1: &g1,
                },
                Regime::Practice => unreachable!(),
            };
            let report =
                thiele_residual(*regime, &surfaces, &law, &spec, &grid, OCCUPANCY_FLOOR).unwrap();
            series.push(report.max_abs);
        }
    }
    let mut summary = String::new();
    for (regime, series) in &per_regime {
        let r1 = series[0] / series[1];
        let r2 = series[1] / series[2];
        summary.push_str(&format!(
            "{}: {:.2e} -> {:.2e} -> {:.2e} (x{:.1}, x{:.1}); ",
            regime.label(),
            series[0],
            series[1],
            series[2],
            r1,
            r2
        ));
        assert!(
            r1 >= 3.5 && r2 >= 3.5,
            "{} residuals {series:?} reduce by x{r1:.2}, x{r2:.2} per halving (need >= 3.5)",
            regime.label()
        );
    }
    pass(7, &format!("second-order residual decay confirmed: {summary}"));
}

#[test]
fn criterion_8_practitioner_gap() {
    let fix = duration_fixture();
    let gap_at_0 = fix.practice.gap_vs_g2[0].abs();
    // the run-check residual tolerance at this grid: 10 h^2 x reserve scale
    let ode_tol = 10.0 * fix.grid.h() * fix.grid.h() * fix.g2.value.max_abs();
    assert!(
        gap_at_0 > 10.0 * ode_tol,
        "practice gap {gap_at_0} vs 10 x ode tolerance {}",
        10.0 * ode_tol
    );
    // in the collapse scenario the gap vanishes (established by criterion 6;
    // recompute cheaply here if that test has not run in this process)
    let collapse_gap = *COLLAPSE_PRACTICE_GAP.get_or_init(|| {
        let config = load_config("disability_collapse.json");
        let spec = Arc::new(config.model.build().unwrap());
        let grid = TimeGrid::for_payments(spec.horizon, 0.005, &spec.payments).unwrap();
        let occ = solve_occupation(&spec, &grid).unwrap();
        let law = JointLaw::build(&spec, &grid, &occ, 0.1).unwrap();
        let opts = SolveOptions {
            slice_spacing: 0.1,
            diag_half: true,
            with_pre: false,
            slices_only: false,
        };
        let g1 = solve_g1(&spec, &grid, &law, &opts).unwrap();
        let g2 = solve_g2(&spec, &grid, &law, &g1).unwrap();
        let practice = solve_practice_approx(&spec, &grid, &law, &g2);
        practice
            .gap_vs_g2
            .iter()
            .enumerate()
            .filter(|(node, _)| law.tail_alive.at_node(*node) > OCCUPANCY_FLOOR)
            .fold(0.0f64, |a, (_, g)| a.max(g.abs()))
    });
    assert!(collapse_gap < 1e-6, "collapse gap {collapse_gap}");
    pass(
        8,
        &format!(
            "duration scenario: |practice - g2|(0) = {gap_at_0:.4} > 10 x ode tolerance {:.2e}; collapse gap {collapse_gap:.2e}",
            10.0 * ode_tol
        ),
    );
}

#[test]
fn criterion_9_deterministic_runs() {
    let mut config = load_config("disability_base.json");
    config.grid_step = 0.05;
    config.mc.n_paths = 20_000;
    config.mc.seed = 3;
    config.mc.compare_times = Some(vec![10.0, 20.0]);
    config.slice_spacing = Some(0.1);
    let base_dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("determinism");
    let dir_a = base_dir.join("a");
    let dir_b = base_dir.join("b");
    let dir_c = base_dir.join("c");
    let out_a = run_scenario(&config, &dir_a).unwrap();
    let out_b = run_scenario(&config, &dir_b).unwrap();
    assert_eq!(out_a.exit_code, 0, "checks: {:#?}", out_a.checks);
    assert_eq!(out_b.exit_code, 0);
    let csvs = [
        "occupation.csv",
        "intensities.csv",
        "conditional_law.csv",
        "reserves_full.csv",
        "reserves_g1.csv",
        "reserves_g2.csv",
        "reserves_practice.csv",
        "comparison_full.csv",
        "comparison_g1.csv",
        "comparison_g2.csv",
        "residuals.csv",
        "manifest.json",
        "report.txt",
    ];
    for name in csvs {
        let a = std::fs::read(dir_a.join(name)).unwrap_or_else(|_| panic!("{name} written"));
        let b = std::fs::read(dir_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    // a different seed changes the Monte Carlo columns but not the analytic
    // tables
    let mut config_seeded = config.clone();
    config_seeded.mc.seed = 4;
    let out_c = run_scenario(&config_seeded, &dir_c).unwrap();
    assert_eq!(out_c.exit_code, 0);
    for name in [
        "occupation.csv",
        "intensities.csv",
        "reserves_full.csv",
        "reserves_g1.csv",
        "reserves_g2.csv",
        "reserves_practice.csv",
        "residuals.csv",
    ] {
        let a = std::fs::read(dir_a.join(name)).unwrap();
        let c = std::fs::read(dir_c.join(name)).unwrap();
        assert_eq!(a, c, "analytic table {name} changed with the seed");
    }
    let cmp_a = std::fs::read_to_string(dir_a.join("comparison_g2.csv")).unwrap();
    let cmp_c = std::fs::read_to_string(dir_c.join("comparison_g2.csv")).unwrap();
    assert_ne!(cmp_a, cmp_c, "Monte Carlo columns should move with the seed");
    // analytic column of the comparison files is seed-invariant
    for (la, lc) in cmp_a.lines().skip(1).zip(cmp_c.lines().skip(1)) {
        let fa: Vec<&str> = la.split(',').collect();
        let fc: Vec<&str> = lc.split(',').collect();
        assert_eq!(fa[0], fc[0]);
        assert_eq!(fa[2], fc[2], "analytic column changed with the seed");
    }
    pass(
        9,
        "byte-identical artifacts for identical configs; seed change moves only the Monte Carlo columns",
    );
}
