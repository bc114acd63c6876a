//! Backward reserve solvers for the four information regimes, drift-residual
//! verification, sums at risk, and the tower cross-check.
//!
//! Every solver integrates backward from a zero terminal condition with
//! classical fixed-step RK4 and exact jump conditions at the discrete
//! payment dates. Coefficients are either closed-form callables or curves
//! tabulated at half/quarter resolution, so stage values are always exact
//! table reads.

use crate::distributions::{JointLaw, PipelineError};
use crate::grid::{HalfTab, QuarterTab, TimeGrid};
use crate::kernel::CharKernel;
use crate::model::ModelSpec;
use crate::numerics::{backward_walk_scalar, backward_walk_vec};
use crate::state::State;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Information regime of a reserve surface.
///
/// * `Full` - the whole observed history of the lumped chain is used.
/// * `G1` - after retirement only the retirement date is retained.
/// * `G2` - after retirement only the current state is retained.
/// * `Practice` - the `G2` dynamics with the just-retired correction term
///   dropped, as commonly used in production reserving systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Full,
    G1,
    G2,
    Practice,
}

impl Regime {
    pub fn parse(s: &str) -> Option<Regime> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Some(Regime::Full),
            "g1" => Some(Regime::G1),
            "g2" => Some(Regime::G2),
            "practice" => Some(Regime::Practice),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Regime::Full => "full",
            Regime::G1 => "g1",
            Regime::G2 => "g2",
            Regime::Practice => "practice",
        }
    }
}

/// A reserve curve on the node grid. `values` are cadlag (a value at a
/// discrete-payment date excludes that payment); `left_values` record the
/// left limits at payment dates, which exceed the cadlag value by exactly
/// the payment amount.
#[derive(Debug, Clone)]
pub struct Curve {
    pub values: Vec<f64>,
    pub left_values: Vec<(usize, f64)>,
}

impl Curve {
    pub fn at(&self, node: usize) -> f64 {
        self.values[node]
    }

    pub fn left_at(&self, node: usize) -> Option<f64> {
        self.left_values
            .iter()
            .find(|(n, _)| *n == node)
            .map(|(_, v)| *v)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

/// Dead-state reserve, kept at quarter resolution because every other solver
/// reads it at its Runge-Kutta stages.
#[derive(Debug, Clone)]
pub struct DeadReserve {
    pub curve: Curve,
    pub quarter: QuarterTab,
    /// `(quarter index, amount)` of the dead-state discrete payments
    atom_amounts: Vec<(usize, f64)>,
}

impl DeadReserve {
    /// Quarter-grid value; on the left branch of a payment date the left
    /// limit (cadlag value plus the payment) applies.
    #[inline]
    fn at_quarter_side(&self, q: usize, left: bool) -> f64 {
        let base = self.quarter.at_quarter(q);
        if left {
            base + lookup_amount(&self.atom_amounts, q)
        } else {
            base
        }
    }
}

#[inline]
fn lookup_amount(amounts: &[(usize, f64)], q: usize) -> f64 {
    amounts
        .iter()
        .find(|(aq, _)| *aq == q)
        .map(|(_, a)| *a)
        .unwrap_or(0.0)
}

/// Solution along one retirement-time characteristic: the reserve of a
/// pensioner as a function of calendar time for a fixed retirement time
/// (and, for full-information surfaces, a fixed pre-retirement state).
#[derive(Debug, Clone)]
pub struct CharSolution {
    pub r_half: usize,
    /// smallest node index with `node_time >= r`
    pub first_node: usize,
    pub values: Vec<f64>,
    pub left_values: Vec<(usize, f64)>,
    /// mortality hazard of this characteristic at the node times
    pub hazard: Vec<f64>,
    /// conditional survival of this characteristic at the node times
    pub survival: Vec<f64>,
    /// reserve at the characteristic's own birth time (the just-retired value)
    pub birth_value: f64,
}

impl CharSolution {
    pub fn at_node(&self, node: usize) -> f64 {
        self.values[node - self.first_node]
    }

    pub fn covers(&self, node: usize) -> bool {
        node >= self.first_node
    }
}

/// Diagonal of a reserve family: the just-retired value as a function of the
/// retirement time.
#[derive(Debug, Clone)]
pub enum DiagCurve {
    /// every half node (required when the curve feeds another solver)
    Half(HalfTab),
    /// node resolution only
    Nodes(Vec<f64>),
    /// not materialised (slices-only solve)
    Absent,
}

impl DiagCurve {
    pub fn at_node(&self, node: usize) -> f64 {
        match self {
            DiagCurve::Half(tab) => tab.at_node(node),
            DiagCurve::Nodes(v) => v[node],
            DiagCurve::Absent => panic!("diagonal was not materialised for this family"),
        }
    }

    pub fn half(&self) -> Option<&HalfTab> {
        match self {
            DiagCurve::Half(tab) => Some(tab),
            _ => None,
        }
    }
}

/// A retirement-time-indexed family of reserve curves.
#[derive(Debug, Clone)]
pub struct ReserveFamily {
    /// pre-retirement state this family conditions on, if any
    pub k: Option<u32>,
    pub diag: DiagCurve,
    pub slices: Vec<CharSolution>,
}

impl ReserveFamily {
    pub fn slice_at(&self, r_half: usize) -> Option<&CharSolution> {
        self.slices.iter().find(|s| s.r_half == r_half)
    }
}

/// Full-information state-wise reserves: one curve per pre-retirement state
/// (the entry-time argument collapses under calendar-clock pre-retirement
/// rates), one retirement-time family per pre-retirement state, and the
/// dead-state curve.
#[derive(Debug, Clone)]
pub struct FullInfoSurfaces {
    pub pre: Vec<Curve>,
    pub pensioner: Vec<ReserveFamily>,
    pub dead: DeadReserve,
}

#[derive(Debug, Clone)]
pub struct G1Surface {
    pub pensioner: ReserveFamily,
    pub dead: DeadReserve,
}

#[derive(Debug, Clone)]
pub struct G2Surface {
    pub value: Curve,
    /// the just-retired correction term `(diag - value) * mu_bar` at the nodes
    pub adjustment: Vec<f64>,
    pub dead: DeadReserve,
}

#[derive(Debug, Clone)]
pub struct PracticeSurface {
    pub value: Curve,
    pub gap_vs_g2: Vec<f64>,
}

/// Options for the characteristic families.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// spacing (time units) between stored characteristic slices
    pub slice_spacing: f64,
    /// materialise the diagonal on the half grid (required when it feeds the
    /// state-only solver or the pre-retirement system)
    pub diag_half: bool,
    /// solve the coupled pre-retirement system (full information only)
    pub with_pre: bool,
    /// solve only the stored slices and skip the diagonal entirely
    pub slices_only: bool,
}

impl SolveOptions {
    pub fn dense(grid: &TimeGrid) -> SolveOptions {
        SolveOptions {
            slice_spacing: (grid.n() / 400.0).max(grid.h()),
            diag_half: true,
            with_pre: true,
            slices_only: false,
        }
    }
}

fn scalar_atoms(spec: &ModelSpec, grid: &TimeGrid, state: State) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = spec
        .payments
        .atoms_in_state(state)
        .map(|a| {
            let node = grid
                .node_index(a.time)
                .expect("payment dates are grid-aligned (checked at grid construction)");
            (4 * node, a.amount)
        })
        .collect();
    out.sort_by_key(|(q, _)| *q);
    out
}

/// Every discrete payment date as a walker boundary, with the jump amount of
/// `own` (zero for the other states' dates: the coupled reserve curves still
/// jump there, so the stepping must break and switch branches).
fn payment_boundaries(spec: &ModelSpec, grid: &TimeGrid, own: State) -> Vec<(usize, f64)> {
    let own = own.lump();
    let mut map: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    for a in &spec.payments.atoms {
        let q = 4 * grid
            .node_index(a.time)
            .expect("payment dates are grid-aligned");
        let amount = if a.state == own { a.amount } else { 0.0 };
        *map.entry(q).or_insert(0.0) += amount;
    }
    map.into_iter().collect()
}

/// Dead-state reserve by backward integration from zero at the horizon, with
/// jump conditions at the discrete payment dates. Tabulated at quarter
/// resolution.
pub fn solve_dead_reserve(spec: &ModelSpec, grid: &TimeGrid) -> DeadReserve {
    let atoms = scalar_atoms(spec, grid, State::Dead);
    let qn = grid.quarter_count();
    let mut quarter = vec![0.0; qn];
    let mut node_values = vec![0.0; grid.m() + 1];
    let mut left_values = Vec::new();
    let hq = grid.h() / 4.0;
    let mut y = 0.0;
    let mut q = qn - 1;
    quarter[q] = y;
    node_values[grid.m()] = y;
    let mut boundaries: Vec<(usize, f64)> = atoms.iter().rev().copied().collect();
    boundaries.push((0, 0.0));
    for (boundary, amount) in boundaries {
        while q > boundary {
            let t = grid.quarter_time(q);
            // one RK4 step of -h/4 on W' = r W - b_d with closed-form coefficients
            let f = |tt: f64, w: f64| spec.discount.short_rate(tt) * w - spec.payments.sojourn_rate(State::Dead, tt);
            let dt = -hq;
            let k1 = f(t, y);
            let k2 = f(t + 0.5 * dt, y + 0.5 * dt * k1);
            let k3 = f(t + 0.5 * dt, y + 0.5 * dt * k2);
            let k4 = f(t + dt, y + dt * k3);
            y += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            q -= 1;
            quarter[q] = y;
            if q % 4 == 0 {
                node_values[q / 4] = y;
            }
        }
        if amount != 0.0 {
            y += amount;
            left_values.push((q / 4, y));
            // values strictly below the payment date include it; the stored
            // quarter value at the date itself stays cadlag
        }
    }
    left_values.reverse();
    DeadReserve {
        curve: Curve {
            values: node_values,
            left_values,
        },
        quarter: QuarterTab { values: quarter },
        atom_amounts: atoms,
    }
}

enum EntryKind {
    /// conditioned on the retirement time only
    Marginal,
    /// conditioned on (retirement time, pre-retirement state)
    PreState(u32),
}

fn family_kernel(law: &JointLaw, kind: &EntryKind, r_half: usize) -> CharKernel {
    match kind {
        EntryKind::Marginal => law.g1_kernel(r_half),
        EntryKind::PreState(k) => law.pre_state_kernel(r_half, *k),
    }
}

/// Solve one retirement-time characteristic backward from the horizon.
fn solve_characteristic(
    spec: &ModelSpec,
    grid: &TimeGrid,
    law: &JointLaw,
    dead: &DeadReserve,
    kind: &EntryKind,
    boundaries: &[(usize, f64)],
    r_half: usize,
    keep_slice: bool,
) -> (f64, Option<CharSolution>) {
    let engine = law.engine();
    let ck = family_kernel(law, kind, r_half);
    let start_q = 4 * grid.m();
    let end_q = 2 * r_half;
    let coeff = |q: usize, left: bool| {
        let t = grid.quarter_time(q);
        let haz = engine.hazard_q(&ck, q);
        let alpha = spec.discount.short_rate(t) + haz;
        let gamma = -spec.payments.sojourn_rate(State::Pensioner, t)
            - (spec.payments.transition_payment(State::Pensioner, State::Dead, t)
                + dead.at_quarter_side(q, left))
                * haz;
        (alpha, gamma)
    };
    let first_node = (r_half + 1) / 2;
    let mut values = vec![0.0; grid.m() + 1 - first_node];
    let mut left_values = Vec::new();
    let mut birth_value = 0.0;
    backward_walk_scalar(
        start_q,
        end_q,
        grid.h() / 4.0,
        boundaries,
        coeff,
        |q, y| {
            if q == end_q {
                birth_value = y;
            }
            if q % 4 == 0 {
                let node = q / 4;
                if node >= first_node {
                    values[node - first_node] = y;
                }
            }
        },
        |q, y| {
            if q % 4 == 0 {
                left_values.push((q / 4, y));
            }
        },
        0.0,
    );
    let slice = if keep_slice {
        let mut hazard = Vec::with_capacity(values.len());
        let mut survival = Vec::with_capacity(values.len());
        for node in first_node..=grid.m() {
            hazard.push(engine.hazard_q(&ck, 4 * node));
            survival.push(engine.survival_q(&ck, 4 * node));
        }
        left_values.reverse();
        Some(CharSolution {
            r_half,
            first_node,
            values,
            left_values,
            hazard,
            survival,
            birth_value,
        })
    } else {
        None
    };
    (birth_value, slice)
}

fn solve_family(
    spec: &ModelSpec,
    grid: &TimeGrid,
    law: &JointLaw,
    dead: &DeadReserve,
    kind: EntryKind,
    opts: &SolveOptions,
) -> ReserveFamily {
    let boundaries = payment_boundaries(spec, grid, State::Pensioner);
    let slice_stride = ((opts.slice_spacing / (grid.h() / 2.0)).round() as usize).max(1);
    let char_step = if opts.slices_only {
        slice_stride
    } else if opts.diag_half {
        1
    } else {
        2
    };
    let char_halves: Vec<usize> = (0..grid.half_count()).step_by(char_step).collect();
    let results: Vec<(f64, Option<CharSolution>)> = char_halves
        .par_iter()
        .map(|&r_half| {
            solve_characteristic(
                spec,
                grid,
                law,
                dead,
                &kind,
                &boundaries,
                r_half,
                r_half % slice_stride == 0,
            )
        })
        .collect();
    let mut slices = Vec::new();
    let diag = if opts.slices_only {
        for (_, slice) in results {
            if let Some(s) = slice {
                slices.push(s);
            }
        }
        DiagCurve::Absent
    } else if opts.diag_half {
        let mut tab = HalfTab::zeros(grid);
        for (r_half, (birth, slice)) in results.into_iter().enumerate() {
            tab.values[r_half] = birth;
            if let Some(s) = slice {
                slices.push(s);
            }
        }
        DiagCurve::Half(tab)
    } else {
        let mut nodes = vec![0.0; grid.m() + 1];
        for (idx, (birth, slice)) in results.into_iter().enumerate() {
            nodes[idx] = birth;
            if let Some(s) = slice {
                slices.push(s);
            }
        }
        DiagCurve::Nodes(nodes)
    };
    ReserveFamily {
        k: match kind {
            EntryKind::Marginal => None,
            EntryKind::PreState(k) => Some(k),
        },
        diag,
        slices,
    }
}

/// Retirement-time-indexed reserves (retirement date retained, health
/// history discarded).
pub fn solve_g1(
    spec: &ModelSpec,
    grid: &TimeGrid,
    law: &JointLaw,
    opts: &SolveOptions,
) -> Result<G1Surface, PipelineError> {
    if !spec.intensities.pre_retirement_markov() {
        return Err(PipelineError::NonMarkovPreRetirement);
    }
    let dead = solve_dead_reserve(spec, grid);
    let pensioner = solve_family(spec, grid, law, &dead, EntryKind::Marginal, opts);
    Ok(G1Surface { pensioner, dead })
}

/// Full-information state-wise reserves.
pub fn solve_full_info(
    spec: &ModelSpec,
    grid: &TimeGrid,
    law: &JointLaw,
    opts: &SolveOptions,
) -> Result<FullInfoSurfaces, PipelineError> {
    if !spec.intensities.pre_retirement_markov() {
        return Err(PipelineError::NonMarkovPreRetirement);
    }
    let mut opts = *opts;
    if opts.with_pre {
        opts.diag_half = true;
        opts.slices_only = false;
    }
    let dead = solve_dead_reserve(spec, grid);
    let pensioner: Vec<ReserveFamily> = (1..=spec.sigma)
        .map(|k| solve_family(spec, grid, law, &dead, EntryKind::PreState(k), &opts))
        .collect();
    let pre = if opts.with_pre {
        solve_pre_system(spec, grid, &pensioner, &dead)
    } else {
        Vec::new()
    };
    Ok(FullInfoSurfaces {
        pre,
        pensioner,
        dead,
    })
}

/// Coupled backward system for the pre-retirement states, reading the
/// just-retired boundary values from the per-state diagonal curves.
fn solve_pre_system(
    spec: &ModelSpec,
    grid: &TimeGrid,
    pensioner: &[ReserveFamily],
    dead: &DeadReserve,
) -> Vec<Curve> {
    let sigma = spec.sigma as usize;
    let diags: Vec<&HalfTab> = pensioner
        .iter()
        .map(|f| f.diag.half().expect("pre-retirement system requires half-grid diagonals"))
        .collect();
    // every payment date is a boundary; amounts are the pre-state payments
    let mut atom_nodes: Vec<usize> = Vec::new();
    for a in &spec.payments.atoms {
        let q = 4 * grid.node_index(a.time).expect("grid-aligned atoms");
        if !atom_nodes.contains(&q) {
            atom_nodes.push(q);
        }
    }
    atom_nodes.sort_unstable();
    let atoms: Vec<(usize, Vec<f64>)> = atom_nodes
        .into_iter()
        .map(|q| {
            let t = grid.quarter_time(q);
            let amounts = (1..=sigma)
                .map(|j| spec.payments.atom_amount(State::Pre(j as u32), t))
                .collect();
            (q, amounts)
        })
        .collect();
    let pensioner_atoms = scalar_atoms(spec, grid, State::Pensioner);
    let dead_ext = State::Dead.ext_index(spec.sigma);
    let deriv = |q: usize, left: bool, y: &[f64], dy: &mut [f64]| {
        let t = grid.quarter_time(q);
        let half = q / 2;
        let rr = spec.discount.short_rate(t);
        let wd = dead.at_quarter_side(q, left);
        let diag_add = if left {
            lookup_amount(&pensioner_atoms, q)
        } else {
            0.0
        };
        for j in 0..sigma {
            let from = State::Pre(j as u32 + 1).ext_index(spec.sigma);
            let mut acc = rr * y[j] - spec.payments.sojourn_rate(State::Pre(j as u32 + 1), t);
            for k in 0..sigma {
                if k == j {
                    continue;
                }
                let rate = spec.intensities.rate(from, State::Pre(k as u32 + 1).ext_index(spec.sigma), t, 0.0);
                if rate != 0.0 {
                    let b = spec.payments.transition_payment(
                        State::Pre(j as u32 + 1),
                        State::Pre(k as u32 + 1),
                        t,
                    );
                    acc -= (b + y[k] - y[j]) * rate;
                }
            }
            let mu_retire = spec
                .intensities
                .lumped_rate_from_pre(j as u32 + 1, State::Pensioner, t);
            if mu_retire != 0.0 {
                let b = spec
                    .payments
                    .transition_payment(State::Pre(j as u32 + 1), State::Pensioner, t);
                acc -= (b + diags[j].at_half(half) + diag_add - y[j]) * mu_retire;
            }
            let mu_death = spec.intensities.rate(from, dead_ext, t, 0.0);
            if mu_death != 0.0 {
                let b = spec
                    .payments
                    .transition_payment(State::Pre(j as u32 + 1), State::Dead, t);
                acc -= (b + wd - y[j]) * mu_death;
            }
            dy[j] = acc;
        }
    };
    let mut values = vec![vec![0.0; grid.m() + 1]; sigma];
    let mut lefts: Vec<Vec<(usize, f64)>> = vec![Vec::new(); sigma];
    backward_walk_vec(
        4 * grid.m(),
        0,
        grid.h() / 4.0,
        &atoms,
        deriv,
        |q, y| {
            if q % 4 == 0 {
                for (vj, yj) in values.iter_mut().zip(y) {
                    vj[q / 4] = *yj;
                }
            }
        },
        |q, y| {
            if q % 4 == 0 {
                for (lj, yj) in lefts.iter_mut().zip(y) {
                    lj.push((q / 4, *yj));
                }
            }
        },
        vec![0.0; sigma],
    );
    values
        .into_iter()
        .zip(lefts)
        .map(|(values, mut left_values)| {
            left_values.reverse();
            Curve {
                values,
                left_values,
            }
        })
        .collect()
}

/// State-only pensioner reserve. Consumes the half-grid diagonal of the
/// retirement-time-indexed surface.
pub fn solve_g2(
    spec: &ModelSpec,
    grid: &TimeGrid,
    law: &JointLaw,
    g1: &G1Surface,
) -> Result<G2Surface, PipelineError> {
    let diag = g1
        .pensioner
        .diag
        .half()
        .ok_or(PipelineError::RegimeMismatch)?;
    let dead = g1.dead.clone();
    let boundaries = payment_boundaries(spec, grid, State::Pensioner);
    let pensioner_atoms = scalar_atoms(spec, grid, State::Pensioner);
    let coeff = |q: usize, left: bool| {
        debug_assert!(q % 2 == 0);
        let t = grid.quarter_time(q);
        let half = q / 2;
        let mu2 = law.mu2_tab.at_half(half);
        let mu_bar = law.mu_bar_tab.at_half(half);
        let diag_here = diag.at_half(half)
            + if left {
                lookup_amount(&pensioner_atoms, q)
            } else {
                0.0
            };
        let alpha = spec.discount.short_rate(t) + mu2 - mu_bar;
        let gamma = -spec.payments.sojourn_rate(State::Pensioner, t)
            - (spec.payments.transition_payment(State::Pensioner, State::Dead, t)
                + dead.at_quarter_side(q, left))
                * mu2
            + diag_here * mu_bar;
        (alpha, gamma)
    };
    let mut values = vec![0.0; grid.m() + 1];
    let mut left_values = Vec::new();
    backward_walk_scalar(
        4 * grid.m(),
        0,
        grid.h() / 4.0,
        &boundaries,
        coeff,
        |q, y| {
            if q % 4 == 0 {
                values[q / 4] = y;
            }
        },
        |q, y| {
            if q % 4 == 0 {
                left_values.push((q / 4, y));
            }
        },
        0.0,
    );
    left_values.reverse();
    let adjustment: Vec<f64> = (0..=grid.m())
        .map(|i| (diag.at_node(i) - values[i]) * law.mu_bar_tab.at_node(i))
        .collect();
    Ok(G2Surface {
        value: Curve {
            values,
            left_values,
        },
        adjustment,
        dead,
    })
}

/// The production shortcut: state-only dynamics with the just-retired
/// correction dropped. Returned with its gap against the state-only solver.
pub fn solve_practice_approx(
    spec: &ModelSpec,
    grid: &TimeGrid,
    law: &JointLaw,
    g2: &G2Surface,
) -> PracticeSurface {
    let dead = &g2.dead;
    let boundaries = payment_boundaries(spec, grid, State::Pensioner);
    let coeff = |q: usize, left: bool| {
        let t = grid.quarter_time(q);
        let mu2 = law.mu2_tab.at_half(q / 2);
        let alpha = spec.discount.short_rate(t) + mu2;
        let gamma = -spec.payments.sojourn_rate(State::Pensioner, t)
            - (spec.payments.transition_payment(State::Pensioner, State::Dead, t)
                + dead.at_quarter_side(q, left))
                * mu2;
        (alpha, gamma)
    };
    let mut values = vec![0.0; grid.m() + 1];
    let mut left_values = Vec::new();
    backward_walk_scalar(
        4 * grid.m(),
        0,
        grid.h() / 4.0,
        &boundaries,
        coeff,
        |q, y| {
            if q % 4 == 0 {
                values[q / 4] = y;
            }
        },
        |q, y| {
            if q % 4 == 0 {
                left_values.push((q / 4, y));
            }
        },
        0.0,
    );
    left_values.reverse();
    let gap_vs_g2: Vec<f64> = values
        .iter()
        .zip(&g2.value.values)
        .map(|(p, g)| p - g)
        .collect();
    PracticeSurface {
        value: Curve {
            values,
            left_values,
        },
        gap_vs_g2,
    }
}

/// Reserves of every extended state under a fully calendar-clocked model
/// (the oracle-level classic solver on the extended chain). Lumped payments
/// are mapped onto the extended states.
pub fn solve_extended_markov(
    spec: &ModelSpec,
    grid: &TimeGrid,
) -> Result<Vec<Curve>, PipelineError> {
    if !(spec.intensities.pre_retirement_markov() && spec.intensities.retired_block_markov()) {
        return Err(PipelineError::NonMarkovPreRetirement);
    }
    let dim = spec.n_ext();
    // atoms: amounts per extended state at each payment date
    let mut atom_nodes: Vec<usize> = Vec::new();
    for a in &spec.payments.atoms {
        let q = 4 * grid.node_index(a.time).expect("grid-aligned atoms");
        if !atom_nodes.contains(&q) {
            atom_nodes.push(q);
        }
    }
    atom_nodes.sort_unstable();
    let atoms: Vec<(usize, Vec<f64>)> = atom_nodes
        .into_iter()
        .map(|q| {
            let t = grid.quarter_time(q);
            let amounts = (0..dim)
                .map(|e| {
                    spec.payments
                        .atom_amount(State::from_ext_index(e, spec.sigma), t)
                })
                .collect();
            (q, amounts)
        })
        .collect();
    let deriv = |q: usize, _left: bool, y: &[f64], dy: &mut [f64]| {
        // all coefficients are continuous functions; the state vector itself
        // carries the payment jumps
        let t = grid.quarter_time(q);
        let rr = spec.discount.short_rate(t);
        for e in 0..dim {
            let se = State::from_ext_index(e, spec.sigma);
            let mut acc = rr * y[e] - spec.payments.sojourn_rate(se, t);
            for f in 0..dim {
                if f == e {
                    continue;
                }
                let rate = spec.intensities.rate(e, f, t, 0.0);
                if rate != 0.0 {
                    let sf = State::from_ext_index(f, spec.sigma);
                    let b = spec.payments.transition_payment(se, sf, t);
                    acc -= (b + y[f] - y[e]) * rate;
                }
            }
            dy[e] = acc;
        }
    };
    let mut values = vec![vec![0.0; grid.m() + 1]; dim];
    let mut lefts: Vec<Vec<(usize, f64)>> = vec![Vec::new(); dim];
    backward_walk_vec(
        4 * grid.m(),
        0,
        grid.h() / 4.0,
        &atoms,
        deriv,
        |q, y| {
            if q % 4 == 0 {
                for (ve, ye) in values.iter_mut().zip(y) {
                    ve[q / 4] = *ye;
                }
            }
        },
        |q, y| {
            if q % 4 == 0 {
                for (le, ye) in lefts.iter_mut().zip(y) {
                    le.push((q / 4, *ye));
                }
            }
        },
        vec![0.0; dim],
    );
    Ok(values
        .into_iter()
        .zip(lefts)
        .map(|(values, mut left_values)| {
            left_values.reverse();
            Curve {
                values,
                left_values,
            }
        })
        .collect())
}

/// Forward and backward sums at risk derived from solved surfaces.
#[derive(Debug, Clone)]
pub struct SumAtRisk {
    /// `transition payment + destination reserve - origin reserve` at nodes
    pub forward: Vec<f64>,
    /// the just-retired correction `(diag - state_only) * mu_bar` at nodes
    pub backward_adjustment: Vec<f64>,
}

pub fn sum_at_risk(
    spec: &ModelSpec,
    grid: &TimeGrid,
    from: State,
    to: State,
    w_from: &Curve,
    w_to: &Curve,
    g2: &G2Surface,
) -> SumAtRisk {
    let forward = (0..=grid.m())
        .map(|i| {
            spec.payments.transition_payment(from, to, grid.node(i)) + w_to.at(i) - w_from.at(i)
        })
        .collect();
    SumAtRisk {
        forward,
        backward_adjustment: g2.adjustment.clone(),
    }
}

/// Surfaces handed to the residual check, one variant per regime.
pub enum RegimeSurfaces<'a> {
    Full(&'a FullInfoSurfaces),
    G1(&'a G1Surface),
    G2 {
        surface: &'a G2Surface,
        g1: &'a G1Surface,
    },
    Practice {
        surface: &'a PracticeSurface,
        dead: &'a DeadReserve,
        law_gate: bool,
    },
}

#[derive(Debug, Clone)]
pub struct ResidualRow {
    pub label: String,
    pub max_abs: f64,
    pub intervals: usize,
}

#[derive(Debug, Clone)]
pub struct ResidualReport {
    pub regime: Regime,
    pub rows: Vec<ResidualRow>,
    pub max_abs: f64,
    /// worst defect of the jump conditions at discrete payment dates
    pub max_jump_defect: f64,
}

/// Trapezoid residual of the drift identity on interior intervals, with
/// payment-date intervals excluded and checked separately as exact jump
/// conditions.
///
/// Pensioner rows of the state-only regimes are evaluated only where the
/// retired occupancy exceeds `occupancy_floor`: below it the conditional
/// quantities degenerate (the just-retired rate behaves like `1/t` near the
/// onset of retirement) and the identity is vacuous.
pub fn thiele_residual(
    regime: Regime,
    surfaces: &RegimeSurfaces,
    law: &JointLaw,
    spec: &ModelSpec,
    grid: &TimeGrid,
    occupancy_floor: f64,
) -> Result<ResidualReport, PipelineError> {
    let matches = matches!(
        (regime, surfaces),
        (Regime::Full, RegimeSurfaces::Full(_))
            | (Regime::G1, RegimeSurfaces::G1(_))
            | (Regime::G2, RegimeSurfaces::G2 { .. })
            | (Regime::Practice, RegimeSurfaces::Practice { .. })
    );
    if !matches {
        return Err(PipelineError::RegimeMismatch);
    }
    let mut rows = Vec::new();
    let mut max_jump: f64 = 0.0;
    let h = grid.h();
    // intervals touching any payment date are excluded: the drift reads
    // coupled reserve curves, which jump at every payment date
    let atom_nodes_of = |_state: State| -> Vec<usize> {
        spec.payments
            .atoms
            .iter()
            .filter_map(|a| grid.node_index(a.time))
            .collect()
    };
    let jump_defect =
        |state: State, curve_values: &[f64], first_node: usize, lefts: &[(usize, f64)]| -> f64 {
            let mut worst: f64 = 0.0;
            for (node, left) in lefts {
                let b = spec.payments.atom_amount(state, grid.node(*node));
                // the solver produces the left limit as cadlag value plus the
                // payment; the comparison reproduces that sum so agreement is
                // bitwise
                worst = worst.max((left - (curve_values[node - first_node] + b)).abs());
            }
            worst
        };
    let mut curve_row = |label: String,
                         state: State,
                         values: &[f64],
                         lefts: &[(usize, f64)],
                         first_node: usize,
                         gate: &dyn Fn(usize) -> bool,
                         drift: &dyn Fn(usize, f64) -> f64|
     -> ResidualRow {
        let atom_nodes = atom_nodes_of(state);
        let mut max_abs: f64 = 0.0;
        let mut count = 0;
        for i in first_node..grid.m() {
            if atom_nodes.contains(&i) || atom_nodes.contains(&(i + 1)) {
                continue;
            }
            if !(gate(i) && gate(i + 1)) {
                continue;
            }
            let w0 = values[i - first_node];
            let w1 = values[i + 1 - first_node];
            let res = (w1 - w0) / h - 0.5 * (drift(i, w0) + drift(i + 1, w1));
            max_abs = max_abs.max(res.abs());
            count += 1;
        }
        max_jump = max_jump.max(jump_defect(state, values, first_node, lefts));
        ResidualRow {
            label,
            max_abs,
            intervals: count,
        }
    };
    let no_gate = |_: usize| true;
    let occ_gate = |i: usize| law.tail_alive.at_node(i) > occupancy_floor;
    let rr = |i: usize| spec.discount.short_rate(grid.node(i));

    let dead_drift = |i: usize, w: f64| rr(i) * w - spec.payments.sojourn_rate(State::Dead, grid.node(i));

    match surfaces {
        RegimeSurfaces::Full(full) => {
            // pre-retirement rows (skipped when the surfaces were solved
            // without the pre-retirement system)
            let sigma = if full.pre.is_empty() {
                0
            } else {
                spec.sigma as usize
            };
            for j in 0..sigma {
                let state = State::Pre(j as u32 + 1);
                let from = state.ext_index(spec.sigma);
                let drift = |i: usize, w: f64| {
                    let t = grid.node(i);
                    let mut acc = rr(i) * w - spec.payments.sojourn_rate(state, t);
                    for k in 0..sigma {
                        if k == j {
                            continue;
                        }
                        let rate = spec.intensities.rate(
                            from,
                            State::Pre(k as u32 + 1).ext_index(spec.sigma),
                            t,
                            0.0,
                        );
                        if rate != 0.0 {
                            let b = spec.payments.transition_payment(
                                state,
                                State::Pre(k as u32 + 1),
                                t,
                            );
                            acc -= (b + full.pre[k].at(i) - w) * rate;
                        }
                    }
                    let mu_ret = spec
                        .intensities
                        .lumped_rate_from_pre(j as u32 + 1, State::Pensioner, t);
                    if mu_ret != 0.0 {
                        let b = spec.payments.transition_payment(state, State::Pensioner, t);
                        acc -= (b + full.pensioner[j].diag.at_node(i) - w) * mu_ret;
                    }
                    let mu_d = spec
                        .intensities
                        .rate(from, State::Dead.ext_index(spec.sigma), t, 0.0);
                    if mu_d != 0.0 {
                        let b = spec.payments.transition_payment(state, State::Dead, t);
                        acc -= (b + full.dead.curve.at(i) - w) * mu_d;
                    }
                    acc
                };
                rows.push(curve_row(
                    format!("pre-{}", j + 1),
                    state,
                    &full.pre[j].values,
                    &full.pre[j].left_values,
                    0,
                    &no_gate,
                    &drift,
                ));
            }
            // pensioner characteristics
            for family in &full.pensioner {
                for slice in &family.slices {
                    let drift = |i: usize, w: f64| {
                        let haz = slice.hazard[i - slice.first_node];
                        rr(i) * w
                            - spec.payments.sojourn_rate(State::Pensioner, grid.node(i))
                            - (spec.payments.transition_payment(
                                State::Pensioner,
                                State::Dead,
                                grid.node(i),
                            ) + full.dead.curve.at(i)
                                - w)
                                * haz
                    };
                    rows.push(curve_row(
                        format!(
                            "pensioner-k{}-r{}",
                            family.k.unwrap_or(0),
                            grid.half_time(slice.r_half)
                        ),
                        State::Pensioner,
                        &slice.values,
                        &slice.left_values,
                        slice.first_node,
                        &no_gate,
                        &drift,
                    ));
                }
            }
            rows.push(curve_row(
                "dead".into(),
                State::Dead,
                &full.dead.curve.values,
                &full.dead.curve.left_values,
                0,
                &no_gate,
                &dead_drift,
            ));
        }
        RegimeSurfaces::G1(g1) => {
            for slice in &g1.pensioner.slices {
                let drift = |i: usize, w: f64| {
                    let haz = slice.hazard[i - slice.first_node];
                    rr(i) * w
                        - spec.payments.sojourn_rate(State::Pensioner, grid.node(i))
                        - (spec.payments.transition_payment(
                            State::Pensioner,
                            State::Dead,
                            grid.node(i),
                        ) + g1.dead.curve.at(i)
                            - w)
                            * haz
                };
                rows.push(curve_row(
                    format!("pensioner-r{}", grid.half_time(slice.r_half)),
                    State::Pensioner,
                    &slice.values,
                    &slice.left_values,
                    slice.first_node,
                    &no_gate,
                    &drift,
                ));
            }
            rows.push(curve_row(
                "dead".into(),
                State::Dead,
                &g1.dead.curve.values,
                &g1.dead.curve.left_values,
                0,
                &no_gate,
                &dead_drift,
            ));
        }
        RegimeSurfaces::G2 { surface, g1 } => {
            let diag = g1.pensioner.diag.half().ok_or(PipelineError::RegimeMismatch)?;
            let drift = |i: usize, w: f64| {
                let t = grid.node(i);
                let mu2 = law.mu2_tab.at_node(i);
                let mu_bar = law.mu_bar_tab.at_node(i);
                rr(i) * w
                    - spec.payments.sojourn_rate(State::Pensioner, t)
                    - (spec.payments.transition_payment(State::Pensioner, State::Dead, t)
                        + surface.dead.curve.at(i)
                        - w)
                        * mu2
                    + (diag.at_node(i) - w) * mu_bar
            };
            rows.push(curve_row(
                "pensioner".into(),
                State::Pensioner,
                &surface.value.values,
                &surface.value.left_values,
                0,
                &occ_gate,
                &drift,
            ));
            rows.push(curve_row(
                "dead".into(),
                State::Dead,
                &surface.dead.curve.values,
                &surface.dead.curve.left_values,
                0,
                &no_gate,
                &dead_drift,
            ));
        }
        RegimeSurfaces::Practice { surface, dead, law_gate } => {
            let drift = |i: usize, w: f64| {
                let t = grid.node(i);
                let mu2 = law.mu2_tab.at_node(i);
                rr(i) * w
                    - spec.payments.sojourn_rate(State::Pensioner, t)
                    - (spec.payments.transition_payment(State::Pensioner, State::Dead, t)
                        + dead.curve.at(i)
                        - w)
                        * mu2
            };
            let gate: &dyn Fn(usize) -> bool = if *law_gate { &occ_gate } else { &no_gate };
            rows.push(curve_row(
                "pensioner".into(),
                State::Pensioner,
                &surface.value.values,
                &surface.value.left_values,
                0,
                gate,
                &drift,
            ));
            rows.push(curve_row(
                "dead".into(),
                State::Dead,
                &dead.curve.values,
                &dead.curve.left_values,
                0,
                &no_gate,
                &dead_drift,
            ));
        }
    }
    let max_abs = rows.iter().fold(0.0f64, |a, r| a.max(r.max_abs));
    Ok(ResidualReport {
        regime,
        rows,
        max_abs,
        max_jump_defect: max_jump,
    })
}

#[derive(Debug, Clone)]
pub struct TowerReport {
    /// worst absolute gap between the mixture of retirement-time-indexed
    /// reserves and the state-only reserve
    pub max_abs_gap: f64,
    /// scale used for relative statements: max |state-only reserve|
    pub scale: f64,
}

/// Mixture cross-check: averaging the retirement-time-indexed reserves with
/// the conditional retirement-time weights must reproduce the state-only
/// reserve. Uses the stored characteristic slices plus the diagonal
/// endpoint; nodes with vanishing retired occupancy contribute zero gap.
pub fn tower_check(law: &JointLaw, g1: &G1Surface, g2: &G2Surface, grid: &TimeGrid) -> TowerReport {
    let mut max_gap: f64 = 0.0;
    let scale = g2.value.max_abs();
    let diag = g1.pensioner.diag.half();
    for node in 0..=grid.m() {
        let tail = law.tail_alive.at_node(node);
        if tail <= crate::kernel::DENOMINATOR_FLOOR {
            continue;
        }
        // integration points: stored slices with r <= t, then the diagonal
        let mut pts: Vec<(f64, f64)> = Vec::new();
        for slice in &g1.pensioner.slices {
            if !slice.covers(node) || grid.half_time(slice.r_half) > grid.node(node) {
                continue;
            }
            let r = grid.half_time(slice.r_half);
            let f_eta = law.f_eta.at_half(slice.r_half);
            let s = slice.survival[node - slice.first_node];
            pts.push((r, slice.at_node(node) * f_eta * s));
        }
        if let Some(diag) = diag {
            let t = grid.node(node);
            let w_diag = law.f_eta.at_half(2 * node);
            let last_r = pts.last().map(|(r, _)| *r).unwrap_or(-1.0);
            if last_r < t {
                pts.push((t, diag.at_node(node) * w_diag));
            }
        }
        if pts.len() < 2 {
            continue;
        }
        let mut integral = 0.0;
        for w in pts.windows(2) {
            integral += 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0);
        }
        let mixture = integral / tail;
        max_gap = max_gap.max((mixture - g2.value.at(node)).abs());
    }
    TowerReport {
        max_abs_gap: max_gap,
        scale,
    }
}
