//! Scenario runner: executes the analytic and Monte Carlo pipelines for the
//! requested information regimes, cross-checks them, and writes CSV tables,
//! a run manifest, and a plain-text report.
//!
//! Exit contract: 0 when every enabled check passes, 1 on configuration or
//! validation failure, 2 when a check fails (artifacts are still written).

use crate::config::ScenarioConfig;
use crate::distributions::{
    backward_identity_check, intensity_tables, solve_occupation, JointLaw, OccupationTable,
};
use crate::grid::TimeGrid;
use crate::mc::{
    estimate_reserve, outflow_tables, simulate_paths, Conditioning, McEstimate, OutflowTables,
    Paths,
};
use crate::model::ModelSpec;
use crate::state::State;
use crate::thiele::{
    solve_full_info, solve_g1, solve_g2, solve_practice_approx, thiele_residual, tower_check,
    FullInfoSurfaces, G1Surface, G2Surface, PracticeSurface, Regime, RegimeSurfaces,
    ReserveFamily, ResidualReport, SolveOptions,
};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("configuration: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("grid: {0}")]
    Grid(#[from] crate::grid::GridError),
    #[error("pipeline: {0}")]
    Pipeline(#[from] crate::distributions::PipelineError),
    #[error("simulation: {0}")]
    Mc(#[from] crate::mc::McError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario: {0}")]
    Other(String),
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub regime: Regime,
    pub t: f64,
    pub label: String,
    pub analytic: f64,
    pub mc_mean: f64,
    pub mc_se: f64,
    pub z: f64,
    pub n_effective: usize,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub checks: Vec<CheckResult>,
    pub comparisons: Vec<ComparisonRow>,
    pub report: String,
}

/// Everything the analytic pipeline produced for one run.
pub struct Pipelines {
    pub spec: Arc<ModelSpec>,
    pub grid: TimeGrid,
    pub occ: OccupationTable,
    pub law: JointLaw,
    pub full: Option<FullInfoSurfaces>,
    pub g1: Option<G1Surface>,
    pub g2: Option<G2Surface>,
    pub practice: Option<PracticeSurface>,
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<(), ScenarioError> {
    fs::write(dir.join(name), content)?;
    Ok(())
}

fn fmt_row(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Run the full scenario; artifacts land in `out_dir`.
pub fn run_scenario(config: &ScenarioConfig, out_dir: &Path) -> Result<RunOutcome, ScenarioError> {
    fs::create_dir_all(out_dir)?;
    let spec = Arc::new(config.model.build()?);
    let grid = TimeGrid::for_payments(spec.horizon, config.grid_step, &spec.payments)?;
    let regimes: Vec<Regime> = {
        let mut rs = Vec::new();
        for name in &config.regimes {
            let r = Regime::parse(name)
                .ok_or_else(|| ScenarioError::Other(format!("unknown regime '{name}'")))?;
            if !rs.contains(&r) {
                rs.push(r);
            }
        }
        if rs.is_empty() {
            return Err(ScenarioError::Other("no regimes requested".into()));
        }
        rs
    };
    let checks_enabled = &config.checks;
    let thresholds = config.check_thresholds.clone().unwrap_or_default();

    // analytic pipeline
    let occ = solve_occupation(&spec, &grid)?;
    let law = JointLaw::build(&spec, &grid, &occ, config.effective_slice_spacing())?;
    let opts = SolveOptions {
        slice_spacing: config.effective_slice_spacing(),
        diag_half: true,
        with_pre: true,
        slices_only: false,
    };
    let want = |r: Regime| regimes.contains(&r);
    let need_g1 = want(Regime::G1)
        || want(Regime::G2)
        || want(Regime::Practice)
        || checks_enabled.iter().any(|c| c == "tower");
    let full = if want(Regime::Full) {
        Some(solve_full_info(&spec, &grid, &law, &opts)?)
    } else {
        None
    };
    let g1 = if need_g1 {
        Some(solve_g1(&spec, &grid, &law, &opts)?)
    } else {
        None
    };
    let g2 = if want(Regime::G2) || want(Regime::Practice) {
        Some(solve_g2(&spec, &grid, &law, g1.as_ref().unwrap())?)
    } else {
        None
    };
    let practice = want(Regime::Practice)
        .then(|| solve_practice_approx(&spec, &grid, &law, g2.as_ref().unwrap()));
    let pipes = Pipelines {
        spec: spec.clone(),
        grid,
        occ,
        law,
        full,
        g1,
        g2,
        practice,
    };

    // Monte Carlo pipeline: one common path set for every regime
    let paths = simulate_paths(&spec, config.mc.n_paths, config.mc.seed)?;
    let tables = outflow_tables(&spec, &grid);
    let compare_times = effective_compare_times(config, &grid);
    let mut comparisons = Vec::new();
    for regime in &regimes {
        comparisons.extend(regime_comparisons(
            *regime,
            &pipes,
            &paths,
            &tables,
            config,
            &compare_times,
        ));
    }

    // checks
    let mut checks: Vec<CheckResult> = Vec::new();
    let mut residual_reports: Vec<ResidualReport> = Vec::new();
    if checks_enabled.iter().any(|c| c == "residual") {
        for regime in &regimes {
            if let Some(report) = residual_for(*regime, &pipes, config.occupancy_floor)? {
                let scale = regime_scale(*regime, &pipes).max(1.0);
                let threshold = thresholds.residual_factor * grid.h() * grid.h() * scale;
                checks.push(CheckResult {
                    name: format!("residual-{}", regime.label()),
                    passed: report.max_abs <= threshold && report.max_jump_defect == 0.0,
                    detail: format!(
                        "max |residual| {} (threshold {}), jump defect {}",
                        report.max_abs, threshold, report.max_jump_defect
                    ),
                });
                residual_reports.push(report);
            }
        }
    }
    if checks_enabled.iter().any(|c| c == "identity") {
        let report = backward_identity_check(&spec, &pipes.law, &pipes.occ, config.occupancy_floor);
        checks.push(CheckResult {
            name: "identity".into(),
            passed: report.max_rel_discrepancy <= thresholds.identity_tol
                && report.max_sum_discrepancy <= thresholds.identity_tol,
            detail: format!(
                "max relative discrepancy {} over {} nodes (tolerance {})",
                report.max_rel_discrepancy, report.nodes_checked, thresholds.identity_tol
            ),
        });
    }
    let mut tower_gap = None;
    if checks_enabled.iter().any(|c| c == "tower") {
        if let (Some(g1), Some(g2)) = (&pipes.g1, &pipes.g2) {
            let report = tower_check(&pipes.law, g1, g2, &grid);
            let threshold = thresholds.tower_factor * report.scale.max(1e-12);
            tower_gap = Some(report.max_abs_gap);
            checks.push(CheckResult {
                name: "tower".into(),
                passed: report.max_abs_gap <= threshold,
                detail: format!(
                    "max mixture gap {} (threshold {})",
                    report.max_abs_gap, threshold
                ),
            });
        }
    }
    if checks_enabled.iter().any(|c| c == "zscore") && !comparisons.is_empty() {
        let total = comparisons.len();
        let within = comparisons
            .iter()
            .filter(|c| c.z.abs() <= thresholds.z_limit)
            .count();
        let fraction = within as f64 / total as f64;
        checks.push(CheckResult {
            name: "zscore".into(),
            passed: fraction >= thresholds.z_fraction,
            detail: format!(
                "{within}/{total} comparisons within {} standard errors",
                thresholds.z_limit
            ),
        });
    }

    // artifacts
    write_manifest(config, out_dir)?;
    write_occupation_csv(&pipes, out_dir)?;
    write_intensity_csvs(&pipes, out_dir)?;
    write_reserve_csvs(&pipes, config, out_dir)?;
    write_comparison_csvs(&comparisons, &regimes, out_dir)?;
    write_residual_csv(&residual_reports, out_dir)?;
    if config.dump_paths {
        write_paths_csv(&paths, &spec, out_dir)?;
    }

    let report = emit_report(&pipes, &comparisons, &checks, &residual_reports, tower_gap);
    write_file(out_dir, "report.txt", &report)?;
    let checks_text: String = checks
        .iter()
        .map(|c| {
            format!(
                "{}: {} ({})\n",
                c.name,
                if c.passed { "pass" } else { "FAIL" },
                c.detail
            )
        })
        .collect();
    write_file(out_dir, "checks_summary.txt", &checks_text)?;

    let exit_code = if checks.iter().all(|c| c.passed) { 0 } else { 2 };
    Ok(RunOutcome {
        exit_code,
        checks,
        comparisons,
        report,
    })
}

fn effective_compare_times(config: &ScenarioConfig, grid: &TimeGrid) -> Vec<usize> {
    let times = config.mc.compare_times.clone().unwrap_or_else(|| {
        let n = grid.n();
        vec![0.0, 0.25 * n, 0.5 * n, 0.75 * n]
    });
    let mut nodes: Vec<usize> = times
        .iter()
        .map(|t| {
            let i = (t / grid.h()).round().max(0.0) as usize;
            i.min(grid.m())
        })
        .collect();
    nodes.dedup();
    nodes
}

fn regime_scale(regime: Regime, pipes: &Pipelines) -> f64 {
    match regime {
        Regime::Full => pipes.full.as_ref().map_or(0.0, |f| {
            let pre = f.pre.iter().map(|c| c.max_abs()).fold(0.0f64, f64::max);
            let fam = f
                .pensioner
                .iter()
                .flat_map(|fam| fam.slices.iter())
                .flat_map(|s| s.values.iter())
                .fold(0.0f64, |a, v| a.max(v.abs()));
            pre.max(fam).max(f.dead.curve.max_abs())
        }),
        Regime::G1 => pipes.g1.as_ref().map_or(0.0, |g| {
            g.pensioner
                .slices
                .iter()
                .flat_map(|s| s.values.iter())
                .fold(0.0f64, |a, v| a.max(v.abs()))
                .max(g.dead.curve.max_abs())
        }),
        Regime::G2 => pipes.g2.as_ref().map_or(0.0, |g| g.value.max_abs()),
        Regime::Practice => pipes.practice.as_ref().map_or(0.0, |p| p.value.max_abs()),
    }
}

fn residual_for(
    regime: Regime,
    pipes: &Pipelines,
    occupancy_floor: f64,
) -> Result<Option<ResidualReport>, ScenarioError> {
    let spec = &pipes.spec;
    let grid = &pipes.grid;
    let law = &pipes.law;
    let report = match regime {
        Regime::Full => pipes.full.as_ref().map(|f| {
            thiele_residual(regime, &RegimeSurfaces::Full(f), law, spec, grid, occupancy_floor)
        }),
        Regime::G1 => pipes.g1.as_ref().map(|g| {
            thiele_residual(regime, &RegimeSurfaces::G1(g), law, spec, grid, occupancy_floor)
        }),
        Regime::G2 => match (&pipes.g2, &pipes.g1) {
            (Some(g2), Some(g1)) => Some(thiele_residual(
                regime,
                &RegimeSurfaces::G2 { surface: g2, g1 },
                law,
                spec,
                grid,
                occupancy_floor,
            )),
            _ => None,
        },
        Regime::Practice => match (&pipes.practice, &pipes.g2) {
            (Some(p), Some(g2)) => Some(thiele_residual(
                regime,
                &RegimeSurfaces::Practice {
                    surface: p,
                    dead: &g2.dead,
                    law_gate: true,
                },
                law,
                spec,
                grid,
                occupancy_floor,
            )),
            _ => None,
        },
    };
    Ok(report.transpose()?)
}

/// Most-populated conditioning cells of the retired block at a node. With
/// `split_pre` unset, cells are aggregated over the pre-retirement state and
/// the last-sojourn bin (retirement-time bins only).
pub fn top_cells(
    paths: &Paths,
    t: f64,
    eta_bin: f64,
    uh_bin: f64,
    split_pre: bool,
    limit: usize,
    min_count: usize,
) -> Vec<(f64, f64, u32, f64, f64, usize)> {
    let mut counts: BTreeMap<(u64, u32, u64), usize> = BTreeMap::new();
    for p in &paths.samples {
        if p.lumped_at(t) != State::Pensioner {
            continue;
        }
        let (Some(eta), Some(h), Some(uh)) =
            (p.eta(), p.state_before_retirement(), p.last_pre_sojourn())
        else {
            continue;
        };
        let State::Pre(k) = h else { continue };
        let key = if split_pre {
            (
                (eta / eta_bin).floor() as u64,
                k,
                (uh / uh_bin).floor() as u64,
            )
        } else {
            ((eta / eta_bin).floor() as u64, 0, 0)
        };
        *counts.entry(key).or_default() += 1;
    }
    let mut cells: Vec<((u64, u32, u64), usize)> = counts.into_iter().collect();
    cells.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    cells
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .take(limit)
        .map(|((eb, k, ub), count)| {
            (
                eb as f64 * eta_bin,
                (eb + 1) as f64 * eta_bin,
                k,
                ub as f64 * uh_bin,
                (ub + 1) as f64 * uh_bin,
                count,
            )
        })
        .collect()
}

/// Bin-averaged analytic reserve over a retirement-time bin: the stored
/// slices inside `[lo, hi]` weighted by the joint entry density times the
/// conditional survival (the exact conditional weights of the bin event).
pub fn bin_average(
    law: &JointLaw,
    family: &ReserveFamily,
    node: usize,
    lo: f64,
    hi: f64,
    grid: &TimeGrid,
) -> Option<f64> {
    let mut pts: Vec<(f64, f64, f64)> = Vec::new(); // (r, weight, weight * value)
    for slice in &family.slices {
        let r = grid.half_time(slice.r_half);
        if r < lo - 1e-12 || r > hi + 1e-12 || !slice.covers(node) {
            continue;
        }
        let density = match family.k {
            None => law.f_eta.at_half(slice.r_half),
            Some(k) => law.entry_density_by_pre(k, slice.r_half),
        };
        let w = density * slice.survival[node - slice.first_node];
        pts.push((r, w, w * slice.at_node(node)));
    }
    if pts.len() < 2 {
        return None;
    }
    let mut wsum = 0.0;
    let mut vsum = 0.0;
    for pair in pts.windows(2) {
        let dr = pair[1].0 - pair[0].0;
        wsum += 0.5 * (pair[0].1 + pair[1].1) * dr;
        vsum += 0.5 * (pair[0].2 + pair[1].2) * dr;
    }
    (wsum > 0.0).then(|| vsum / wsum)
}

fn push_row(
    rows: &mut Vec<ComparisonRow>,
    regime: Regime,
    t: f64,
    label: String,
    analytic: f64,
    est: &McEstimate,
) {
    let z = if est.std_error > 0.0 {
        (est.mean - analytic) / est.std_error
    } else {
        0.0
    };
    rows.push(ComparisonRow {
        regime,
        t,
        label,
        analytic,
        mc_mean: est.mean,
        mc_se: est.std_error,
        z,
        n_effective: est.n_effective,
    });
}

fn regime_comparisons(
    regime: Regime,
    pipes: &Pipelines,
    paths: &Paths,
    tables: &OutflowTables,
    config: &ScenarioConfig,
    compare_nodes: &[usize],
) -> Vec<ComparisonRow> {
    let grid = &pipes.grid;
    let law = &pipes.law;
    let min_eff = config.mc.min_effective;
    let eta_bin = config.effective_eta_bin();
    let uh_bin = config.effective_uh_bin();
    let mut rows = Vec::new();
    for &node in compare_nodes {
        let t = grid.node(node);
        match regime {
            Regime::Full => {
                let Some(full) = &pipes.full else { continue };
                for j in 1..=pipes.spec.sigma {
                    let cond = Conditioning::InState {
                        t,
                        state: State::Pre(j),
                    };
                    if let Ok(est) = estimate_reserve(paths, tables, &cond, min_eff) {
                        push_row(
                            &mut rows,
                            regime,
                            t,
                            format!("state-{j}"),
                            full.pre[(j - 1) as usize].at(node),
                            &est,
                        );
                    }
                }
                let cond = Conditioning::InState {
                    t,
                    state: State::Dead,
                };
                if let Ok(est) = estimate_reserve(paths, tables, &cond, min_eff) {
                    push_row(
                        &mut rows,
                        regime,
                        t,
                        "state-d".into(),
                        full.dead.curve.at(node),
                        &est,
                    );
                }
                for (lo, hi, k, uh_lo, uh_hi, _count) in
                    top_cells(paths, t, eta_bin, uh_bin, true, 3, min_eff)
                {
                    let family = &full.pensioner[(k - 1) as usize];
                    let Some(analytic) = bin_average(law, family, node, lo, hi, grid) else {
                        continue;
                    };
                    let cond = Conditioning::RetiredFull {
                        t,
                        eta_lo: lo,
                        eta_hi: hi,
                        pre_state: k,
                        uh_lo,
                        uh_hi,
                    };
                    if let Ok(est) = estimate_reserve(paths, tables, &cond, min_eff) {
                        push_row(
                            &mut rows,
                            regime,
                            t,
                            format!("pensioner-eta[{lo},{hi})-h{k}-uh[{uh_lo},{uh_hi})"),
                            analytic,
                            &est,
                        );
                    }
                }
            }
            Regime::G1 => {
                let Some(g1) = &pipes.g1 else { continue };
                for (lo, hi, _k, _ul, _uh, _count) in
                    top_cells(paths, t, eta_bin, 1.0, false, 3, min_eff)
                {
                    let Some(analytic) = bin_average(law, &g1.pensioner, node, lo, hi, grid) else {
                        continue;
                    };
                    let cond = Conditioning::RetiredEta { t, lo, hi };
                    if let Ok(est) = estimate_reserve(paths, tables, &cond, min_eff) {
                        push_row(
                            &mut rows,
                            regime,
                            t,
                            format!("pensioner-eta[{lo},{hi})"),
                            analytic,
                            &est,
                        );
                    }
                }
            }
            Regime::G2 => {
                let Some(g2) = &pipes.g2 else { continue };
                let cond = Conditioning::InState {
                    t,
                    state: State::Pensioner,
                };
                if let Ok(est) = estimate_reserve(paths, tables, &cond, min_eff) {
                    push_row(&mut rows, regime, t, "pensioner".into(), g2.value.at(node), &est);
                }
            }
            Regime::Practice => {
                // the production shortcut has no conditional law of its own;
                // its gap against the state-only regime is reported instead
            }
        }
    }
    rows
}

fn write_manifest(config: &ScenarioConfig, out_dir: &Path) -> Result<(), ScenarioError> {
    let canonical = serde_json::to_vec(config).map_err(|e| ScenarioError::Other(e.to_string()))?;
    let mut hasher = Sha256::new();
    hasher.update(&canonical);
    let digest = hasher.finalize();
    let mut hash = String::new();
    for b in digest {
        let _ = write!(hash, "{b:02x}");
    }
    let manifest = serde_json::json!({
        "config_sha256": hash,
        "seed": config.mc.seed,
        "n_paths": config.mc.n_paths,
        "grid_step": config.grid_step,
        "engine_version": env!("CARGO_PKG_VERSION"),
    });
    write_file(
        out_dir,
        "manifest.json",
        &serde_json::to_string_pretty(&manifest).map_err(|e| ScenarioError::Other(e.to_string()))?,
    )
}

fn write_occupation_csv(pipes: &Pipelines, out_dir: &Path) -> Result<(), ScenarioError> {
    let grid = &pipes.grid;
    let sigma = pipes.spec.sigma;
    let mut out = String::from("t");
    for j in 1..=sigma {
        let _ = write!(out, ",pre_{j}");
    }
    for m in 1..=sigma {
        let _ = write!(out, ",retired_{m}");
    }
    out.push_str(",pensioner,dead\n");
    for i in 0..=grid.m() {
        let half = 2 * i;
        let mut vals = vec![grid.node(i)];
        for j in 1..=sigma {
            vals.push(pipes.occ.prob_pre_half(j, half));
        }
        for m in 1..=sigma {
            vals.push(pipes.occ.prob_retired_half(m, half));
        }
        vals.push(pipes.occ.prob_pensioner_half(half));
        vals.push(pipes.occ.prob_dead_half(half));
        out.push_str(&fmt_row(&vals));
        out.push('\n');
    }
    write_file(out_dir, "occupation.csv", &out)
}

fn write_intensity_csvs(pipes: &Pipelines, out_dir: &Path) -> Result<(), ScenarioError> {
    let tables = intensity_tables(&pipes.spec, &pipes.law);
    let mut out = String::from("t,mu2,mu_bar");
    for j in 1..=pipes.spec.sigma {
        let _ = write!(out, ",mu_bar_from_{j}");
    }
    for (label, _) in &tables.lumped_forward {
        let _ = write!(out, ",forward_{label}");
    }
    out.push('\n');
    for (i, t) in tables.times.iter().enumerate() {
        let mut vals = vec![*t, tables.mu2[i], tables.mu_bar[i]];
        for row in &tables.mu_bar_from {
            vals.push(row[i]);
        }
        for (_, row) in &tables.lumped_forward {
            vals.push(row[i]);
        }
        out.push_str(&fmt_row(&vals));
        out.push('\n');
    }
    write_file(out_dir, "intensities.csv", &out)?;

    // conditional-hazard slices, row-major over the triangle
    let mut out = String::from("r,t,survival,death_flow,hazard\n");
    let grid = &pipes.grid;
    for slice in &pipes.law.slices {
        let r = grid.half_time(slice.r_half);
        for node in slice.first_node..=grid.m() {
            let idx = node - slice.first_node;
            out.push_str(&fmt_row(&[
                r,
                grid.node(node),
                slice.survival[idx],
                slice.death_flow[idx],
                slice.hazard[idx],
            ]));
            out.push('\n');
        }
    }
    write_file(out_dir, "conditional_law.csv", &out)
}

fn export_slice_halves(
    config: &ScenarioConfig,
    pipes: &Pipelines,
) -> Vec<usize> {
    let grid = &pipes.grid;
    match &config.export_r_slices {
        Some(rs) => rs
            .iter()
            .map(|r| grid.nearest_half_index(*r))
            .collect(),
        None => {
            let n = grid.n();
            [0.125, 0.25, 0.375, 0.5, 0.625, 0.75]
                .iter()
                .map(|f| grid.nearest_half_index(f * n))
                .collect()
        }
    }
}

fn write_reserve_csvs(
    pipes: &Pipelines,
    config: &ScenarioConfig,
    out_dir: &Path,
) -> Result<(), ScenarioError> {
    let grid = &pipes.grid;
    let sigma = pipes.spec.sigma;
    if let Some(full) = &pipes.full {
        let mut out = String::from("t");
        for j in 1..=sigma {
            let _ = write!(out, ",state_{j}");
        }
        out.push_str(",dead");
        for k in 1..=sigma {
            let _ = write!(out, ",pensioner_diag_h{k}");
        }
        out.push('\n');
        for i in 0..=grid.m() {
            let mut vals = vec![grid.node(i)];
            for j in 1..=sigma {
                vals.push(full.pre[(j - 1) as usize].at(i));
            }
            vals.push(full.dead.curve.at(i));
            for k in 1..=sigma {
                vals.push(full.pensioner[(k - 1) as usize].diag.at_node(i));
            }
            out.push_str(&fmt_row(&vals));
            out.push('\n');
        }
        write_file(out_dir, "reserves_full.csv", &out)?;
    }
    if let Some(g1) = &pipes.g1 {
        let slice_halves = export_slice_halves(config, pipes);
        let slices: Vec<_> = slice_halves
            .iter()
            .filter_map(|rh| g1.pensioner.slice_at(*rh).or_else(|| {
                // snap to the nearest stored slice
                g1.pensioner
                    .slices
                    .iter()
                    .min_by_key(|s| s.r_half.abs_diff(*rh))
            }))
            .collect();
        let mut out = String::from("t,diag");
        for s in &slices {
            let _ = write!(out, ",r{}", grid.half_time(s.r_half));
        }
        out.push('\n');
        for i in 0..=grid.m() {
            let mut vals = vec![grid.node(i), g1.pensioner.diag.at_node(i)];
            for s in &slices {
                vals.push(if s.covers(i) { s.at_node(i) } else { f64::NAN });
            }
            out.push_str(&fmt_row(&vals));
            out.push('\n');
        }
        write_file(out_dir, "reserves_g1.csv", &out)?;
    }
    if let Some(g2) = &pipes.g2 {
        let mut out = String::from("t,value,adjustment,dead\n");
        for i in 0..=grid.m() {
            out.push_str(&fmt_row(&[
                grid.node(i),
                g2.value.at(i),
                g2.adjustment[i],
                g2.dead.curve.at(i),
            ]));
            out.push('\n');
        }
        write_file(out_dir, "reserves_g2.csv", &out)?;
    }
    if let Some(practice) = &pipes.practice {
        let mut out = String::from("t,value,gap_vs_g2\n");
        for i in 0..=grid.m() {
            out.push_str(&fmt_row(&[
                grid.node(i),
                practice.value.at(i),
                practice.gap_vs_g2[i],
            ]));
            out.push('\n');
        }
        write_file(out_dir, "reserves_practice.csv", &out)?;
    }
    Ok(())
}

fn write_comparison_csvs(
    comparisons: &[ComparisonRow],
    regimes: &[Regime],
    out_dir: &Path,
) -> Result<(), ScenarioError> {
    for regime in regimes {
        let rows: Vec<&ComparisonRow> = comparisons
            .iter()
            .filter(|c| c.regime == *regime)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let mut out = String::from("t,label,analytic,mc_mean,mc_se,z,n_effective\n");
        for row in rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                row.t, row.label, row.analytic, row.mc_mean, row.mc_se, row.z, row.n_effective
            );
        }
        write_file(out_dir, &format!("comparison_{}.csv", regime.label()), &out)?;
    }
    Ok(())
}

fn write_residual_csv(
    reports: &[ResidualReport],
    out_dir: &Path,
) -> Result<(), ScenarioError> {
    if reports.is_empty() {
        return Ok(());
    }
    let mut out = String::from("regime,row,max_abs_residual,intervals\n");
    for report in reports {
        for row in &report.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                report.regime.label(),
                row.label,
                row.max_abs,
                row.intervals
            );
        }
    }
    write_file(out_dir, "residuals.csv", &out)
}

fn write_paths_csv(paths: &Paths, spec: &ModelSpec, out_dir: &Path) -> Result<(), ScenarioError> {
    let mut out = String::from("path_id,jump_time,new_state\n");
    for (id, p) in paths.samples.iter().enumerate() {
        for (t, s) in &p.jumps {
            let _ = writeln!(out, "{id},{t},{}", s.label(spec.sigma));
        }
    }
    write_file(out_dir, "paths.csv", &out)
}

/// Plain-text summary: headline reserves at `{0, n/4, n/2, 3n/4}`, worst
/// residuals, identity discrepancy, and the tower gap. Values are echoes of
/// the CSV contents (same in-memory numbers, same formatting).
pub fn emit_report(
    pipes: &Pipelines,
    comparisons: &[ComparisonRow],
    checks: &[CheckResult],
    residuals: &[ResidualReport],
    tower_gap: Option<f64>,
) -> String {
    let grid = &pipes.grid;
    let mut out = String::new();
    let _ = writeln!(out, "reserve summary (horizon {}, step {})", grid.n(), grid.h());
    let header = "t | full state-1 | full pensioner diag h1 | g1 diag | g2 | practice | practice gap";
    let _ = writeln!(out, "{header}");
    for frac in [0.0, 0.25, 0.5, 0.75] {
        let node = ((frac * grid.n() / grid.h()).round() as usize).min(grid.m());
        let t = grid.node(node);
        let full_1 = pipes
            .full
            .as_ref()
            .map(|f| f.pre[0].at(node).to_string())
            .unwrap_or_else(|| "-".into());
        let full_diag = pipes
            .full
            .as_ref()
            .map(|f| f.pensioner[0].diag.at_node(node).to_string())
            .unwrap_or_else(|| "-".into());
        let g1_diag = pipes
            .g1
            .as_ref()
            .map(|g| g.pensioner.diag.at_node(node).to_string())
            .unwrap_or_else(|| "-".into());
        let g2 = pipes
            .g2
            .as_ref()
            .map(|g| g.value.at(node).to_string())
            .unwrap_or_else(|| "-".into());
        let practice = pipes
            .practice
            .as_ref()
            .map(|p| p.value.at(node).to_string())
            .unwrap_or_else(|| "-".into());
        let gap = pipes
            .practice
            .as_ref()
            .map(|p| p.gap_vs_g2[node].to_string())
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(out, "{t} | {full_1} | {full_diag} | {g1_diag} | {g2} | {practice} | {gap}");
    }
    if !residuals.is_empty() {
        let _ = writeln!(out, "\nmax drift residuals:");
        for r in residuals {
            let _ = writeln!(out, "  {}: {}", r.regime.label(), r.max_abs);
        }
    }
    if let Some(gap) = tower_gap {
        let _ = writeln!(out, "tower mixture gap: {gap}");
    }
    if !comparisons.is_empty() {
        let worst = comparisons
            .iter()
            .max_by(|a, b| a.z.abs().total_cmp(&b.z.abs()))
            .unwrap();
        let _ = writeln!(
            out,
            "\nanalytic vs Monte Carlo: {} comparisons, worst |z| = {} ({} at t={})",
            comparisons.len(),
            worst.z.abs(),
            worst.label,
            worst.t
        );
    }
    if !checks.is_empty() {
        let _ = writeln!(out, "\nchecks:");
        for c in checks {
            let _ = writeln!(
                out,
                "  {}: {} ({})",
                c.name,
                if c.passed { "pass" } else { "FAIL" },
                c.detail
            );
        }
    }
    out
}
