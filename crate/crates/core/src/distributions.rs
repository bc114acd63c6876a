//! Occupation probabilities, the joint law of (retirement time, death time),
//! and the derived transition-intensity tables.
//!
//! The forward solve runs on the extended chain. With a calendar-clock
//! retired block this is a plain time-inhomogeneous Markov system; with
//! duration-dependent retired mortality the retired occupations are
//! assembled from the conditional sub-chains of [`crate::kernel`], one per
//! retirement time, integrated with composite-trapezoid weights.
//!
//! Derived quantities follow the convention that ratios with vanishing
//! denominators are zero (see [`crate::kernel::DENOMINATOR_FLOOR`]).

use crate::grid::{HalfTab, TimeGrid};
use crate::kernel::{guarded_ratio, CharKernel, KernelEngine, DENOMINATOR_FLOOR};
use crate::model::ModelSpec;
use crate::numerics::rk4_step_vec;
use crate::state::State;
use rayon::prelude::*;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("analytic pipeline requires calendar-clock pre-retirement intensities; use the Monte Carlo oracle for duration-dependent pre-retirement models")]
    NonMarkovPreRetirement,
    #[error("surfaces passed to the residual check do not match the requested regime")]
    RegimeMismatch,
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Occupation probabilities of the extended chain on the half grid, with the
/// dead state split by whether death occurred before or after retirement.
#[derive(Debug, Clone)]
pub struct OccupationTable {
    pub grid: TimeGrid,
    pub sigma: u32,
    /// per pre-retirement state `1..=sigma`
    pre: Vec<HalfTab>,
    /// per retired health state `1..=sigma`
    retired: Vec<HalfTab>,
    dead_from_pre: HalfTab,
    dead_from_retired: HalfTab,
    /// largest `|row sum - 1|` observed before renormalisation
    pub max_row_drift: f64,
}

impl OccupationTable {
    pub fn prob_pre_half(&self, j: u32, half: usize) -> f64 {
        self.pre[(j - 1) as usize].at_half(half)
    }

    pub fn prob_retired_half(&self, m: u32, half: usize) -> f64 {
        self.retired[(m - 1) as usize].at_half(half)
    }

    /// `P(Z_t = p)` on the half grid: total retired-block mass.
    pub fn prob_pensioner_half(&self, half: usize) -> f64 {
        self.retired.iter().map(|tab| tab.at_half(half)).sum()
    }

    pub fn prob_dead_half(&self, half: usize) -> f64 {
        self.dead_from_pre.at_half(half) + self.dead_from_retired.at_half(half)
    }

    pub fn dead_from_retired_half(&self, half: usize) -> f64 {
        self.dead_from_retired.at_half(half)
    }

    /// Occupation probability of an extended state at a node.
    pub fn prob_ext(&self, s: State, node: usize) -> f64 {
        let half = 2 * node;
        match s {
            State::Pre(j) => self.prob_pre_half(j, half),
            State::Retired(m) => self.prob_retired_half(m, half),
            State::Dead => self.prob_dead_half(half),
            State::Pensioner => self.prob_pensioner_half(half),
        }
    }

    /// `P(η <= n)`: retirement happened by the horizon (still alive or not).
    pub fn prob_ever_retired_by_horizon(&self) -> f64 {
        let last = self.grid.half_count() - 1;
        self.prob_pensioner_half(last) + self.dead_from_retired.at_half(last)
    }
}

/// Extended-chain occupation probabilities.
///
/// Requires calendar-clock pre-retirement rates. Rows are renormalised when
/// the drift from 1 exceeds `1e-10` and entries are clamped to `[0, 1]`; the
/// observed drift is reported on the table.
pub fn solve_occupation(
    spec: &Arc<ModelSpec>,
    grid: &TimeGrid,
) -> Result<OccupationTable, PipelineError> {
    if !spec.intensities.pre_retirement_markov() {
        return Err(PipelineError::NonMarkovPreRetirement);
    }
    let table = if spec.intensities.retired_block_markov() {
        occupation_markov(spec, grid)
    } else {
        occupation_streaming(spec, grid)
    };
    Ok(table)
}

/// Index layout of the augmented forward system in the fully Markov case:
/// `[pre 0..sigma) [retired sigma..2 sigma) dead_from_pre dead_from_retired`.
fn occupation_markov(spec: &ModelSpec, grid: &TimeGrid) -> OccupationTable {
    let sigma = spec.sigma as usize;
    let dim = 2 * sigma + 2;
    let mut y = vec![0.0; dim];
    for (s, w) in &spec.initial.weights {
        y[s.ext_index(spec.sigma)] += *w;
    }
    let dead_ext = State::Dead.ext_index(spec.sigma);
    let mut tabs = vec![vec![0.0; grid.half_count()]; dim];
    let record = |tabs: &mut Vec<Vec<f64>>, half: usize, y: &[f64]| {
        for (tab, v) in tabs.iter_mut().zip(y) {
            tab[half] = *v;
        }
    };
    record(&mut tabs, 0, &y);
    let mut scratch = vec![0.0; 4 * dim];
    let hh = grid.h() / 2.0;
    for half in 1..grid.half_count() {
        let t0 = grid.half_time(half - 1);
        rk4_step_vec(
            t0,
            hh,
            &mut y,
            |t, yy, dy| {
                dy.fill(0.0);
                for from in 0..2 * sigma {
                    let mass = yy[from];
                    if mass == 0.0 {
                        continue;
                    }
                    let mut exit = 0.0;
                    for to in 0..2 * sigma {
                        if to == from {
                            continue;
                        }
                        let rate = spec.intensities.rate(from, to, t, 0.0);
                        if rate != 0.0 {
                            dy[to] += mass * rate;
                            exit += rate;
                        }
                    }
                    let death = spec.intensities.rate(from, dead_ext, t, 0.0);
                    if death != 0.0 {
                        let slot = if from < sigma { 2 * sigma } else { 2 * sigma + 1 };
                        dy[slot] += mass * death;
                        exit += death;
                    }
                    dy[from] -= mass * exit;
                }
            },
            &mut scratch,
        );
        record(&mut tabs, half, &y);
    }
    finalize_occupation(spec, grid, tabs)
}

/// Chunk size for deterministic ordered reductions over characteristics.
const CHAR_CHUNK: usize = 128;

fn occupation_streaming(spec: &Arc<ModelSpec>, grid: &TimeGrid) -> OccupationTable {
    let sigma = spec.sigma as usize;
    let pre = solve_pre_block(spec, grid);
    let engine = KernelEngine::new(spec.clone(), *grid);
    let f_eta = retirement_density(spec, grid, &pre);
    let mixes = g1_entry_mixes(spec, grid, &pre);

    let halves = grid.half_count();
    let n_chars = halves;
    let chunks: Vec<usize> = (0..n_chars.div_ceil(CHAR_CHUNK)).collect();
    // partial[state][t_half] accumulated per chunk in characteristic order;
    // state slots: retired 0..sigma, dead-from-retired at sigma
    let partials: Vec<Vec<Vec<f64>>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut acc = vec![vec![0.0; halves]; sigma + 1];
            let lo = chunk * CHAR_CHUNK;
            let hi = ((chunk + 1) * CHAR_CHUNK).min(n_chars);
            for r_half in lo..hi {
                let weight_base = f_eta.at_half(r_half);
                if weight_base == 0.0 {
                    continue;
                }
                let entry = &mixes[r_half * sigma..(r_half + 1) * sigma];
                engine.run_char(r_half, entry, |q, state, _flow| {
                    if q % 2 != 0 {
                        return;
                    }
                    let t_half = q / 2;
                    let w = trapezoid_weight(r_half, t_half, grid.h() / 2.0) * weight_base;
                    if w == 0.0 {
                        return;
                    }
                    for m in 0..sigma {
                        acc[m][t_half] += w * state[m];
                    }
                    acc[sigma][t_half] += w * state[sigma];
                });
            }
            acc
        })
        .collect();

    let dim = 2 * sigma + 2;
    let mut tabs = vec![vec![0.0; halves]; dim];
    for (j, tab) in pre.pre.iter().enumerate() {
        tabs[j] = tab.values.clone();
    }
    tabs[2 * sigma] = pre.dead_from_pre.values.clone();
    for part in partials {
        for m in 0..sigma {
            for h in 0..halves {
                tabs[sigma + m][h] += part[m][h];
            }
        }
        for h in 0..halves {
            tabs[2 * sigma + 1][h] += part[sigma][h];
        }
    }
    finalize_occupation(spec, grid, tabs)
}

/// Trapezoid weight of abscissa index `r` in the integral over `[0, t]`.
fn trapezoid_weight(r: usize, t: usize, step: f64) -> f64 {
    if r > t || t == 0 {
        return 0.0;
    }
    if r == 0 || r == t {
        0.5 * step
    } else {
        step
    }
}

struct PreBlock {
    pre: Vec<HalfTab>,
    dead_from_pre: HalfTab,
}

/// Forward solve of the autonomous pre-retirement block (plus its death
/// flow); outflow to the retired block leaves the system.
fn solve_pre_block(spec: &ModelSpec, grid: &TimeGrid) -> PreBlock {
    let sigma = spec.sigma as usize;
    let dim = sigma + 1;
    let dead_ext = State::Dead.ext_index(spec.sigma);
    let mut y = vec![0.0; dim];
    for (s, w) in &spec.initial.weights {
        y[s.ext_index(spec.sigma)] += *w;
    }
    let mut tabs = vec![vec![0.0; grid.half_count()]; dim];
    for (tab, v) in tabs.iter_mut().zip(&y) {
        tab[0] = *v;
    }
    let mut scratch = vec![0.0; 4 * dim];
    let hh = grid.h() / 2.0;
    for half in 1..grid.half_count() {
        let t0 = grid.half_time(half - 1);
        rk4_step_vec(
            t0,
            hh,
            &mut y,
            |t, yy, dy| {
                dy.fill(0.0);
                for from in 0..sigma {
                    let mass = yy[from];
                    if mass == 0.0 {
                        continue;
                    }
                    let mut exit = 0.0;
                    for to in 0..2 * sigma {
                        if to == from {
                            continue;
                        }
                        let rate = spec.intensities.rate(from, to, t, 0.0);
                        if rate != 0.0 {
                            if to < sigma {
                                dy[to] += mass * rate;
                            }
                            exit += rate;
                        }
                    }
                    let death = spec.intensities.rate(from, dead_ext, t, 0.0);
                    dy[sigma] += mass * death;
                    exit += death;
                    dy[from] -= mass * exit;
                }
            },
            &mut scratch,
        );
        for (tab, v) in tabs.iter_mut().zip(&y) {
            tab[half] = *v;
        }
    }
    let dead_from_pre = HalfTab {
        values: tabs.pop().unwrap(),
    };
    PreBlock {
        pre: tabs.into_iter().map(|values| HalfTab { values }).collect(),
        dead_from_pre,
    }
}

/// Retirement-time density `f_eta(r)` on the half grid: total flow from the
/// pre-retirement block into the retired block.
fn retirement_density(spec: &ModelSpec, grid: &TimeGrid, pre: &PreBlock) -> HalfTab {
    let sigma = spec.sigma;
    let mut values = vec![0.0; grid.half_count()];
    for (half, v) in values.iter_mut().enumerate() {
        let r = grid.half_time(half);
        let mut acc = 0.0;
        for j in 1..=sigma {
            acc += pre.pre[(j - 1) as usize].at_half(half)
                * spec.intensities.lumped_rate_from_pre(j, State::Pensioner, r);
        }
        *v = acc;
    }
    HalfTab { values }
}

/// Entry mixes of the retirement-time-conditioned sub-chain, flattened
/// `half * sigma + m`: the conditional law of the entry health state given
/// retirement at `r`, pre-retirement state marginalised out.
fn g1_entry_mixes(spec: &ModelSpec, grid: &TimeGrid, pre: &PreBlock) -> Vec<f64> {
    let sigma = spec.sigma as usize;
    let mut out = vec![0.0; grid.half_count() * sigma];
    for half in 0..grid.half_count() {
        let r = grid.half_time(half);
        let slot = &mut out[half * sigma..(half + 1) * sigma];
        let mut total = 0.0;
        for k in 0..sigma {
            let from = State::Pre(k as u32 + 1).ext_index(spec.sigma);
            let mass = pre.pre[k].at_half(half);
            for (m, s) in slot.iter_mut().enumerate() {
                let rate = spec.intensities.rate(
                    from,
                    State::Retired(m as u32 + 1).ext_index(spec.sigma),
                    r,
                    0.0,
                );
                *s += mass * rate;
                total += mass * rate;
            }
        }
        if total > DENOMINATOR_FLOOR {
            for s in slot.iter_mut() {
                *s /= total;
            }
        } else {
            slot.fill(1.0 / sigma as f64);
        }
    }
    out
}

fn finalize_occupation(spec: &ModelSpec, grid: &TimeGrid, mut tabs: Vec<Vec<f64>>) -> OccupationTable {
    let sigma = spec.sigma as usize;
    let mut max_drift: f64 = 0.0;
    for half in 0..grid.half_count() {
        let sum: f64 = tabs.iter().map(|tab| tab[half]).sum();
        let drift = (sum - 1.0).abs();
        max_drift = max_drift.max(drift);
        if drift > 1e-10 {
            for tab in tabs.iter_mut() {
                tab[half] /= sum;
            }
        }
        for tab in tabs.iter_mut() {
            tab[half] = tab[half].clamp(0.0, 1.0);
        }
    }
    let dead_from_retired = HalfTab {
        values: tabs.pop().unwrap(),
    };
    let dead_from_pre = HalfTab {
        values: tabs.pop().unwrap(),
    };
    let retired = tabs
        .split_off(sigma)
        .into_iter()
        .map(|values| HalfTab { values })
        .collect();
    let pre = tabs.into_iter().map(|values| HalfTab { values }).collect();
    OccupationTable {
        grid: *grid,
        sigma: spec.sigma,
        pre,
        retired,
        dead_from_pre,
        dead_from_retired,
        max_row_drift: max_drift,
    }
}

/// One stored retirement-time slice of the conditional law, tabulated at the
/// grid nodes `t >= r`.
#[derive(Debug, Clone)]
pub struct LawSlice {
    pub r_half: usize,
    /// first node index covered (smallest node with `node >= r`)
    pub first_node: usize,
    pub survival: Vec<f64>,
    pub death_flow: Vec<f64>,
    pub hazard: Vec<f64>,
}

impl LawSlice {
    pub fn survival_at_node(&self, node: usize) -> f64 {
        self.survival[node - self.first_node]
    }

    pub fn hazard_at_node(&self, node: usize) -> f64 {
        self.hazard[node - self.first_node]
    }
}

/// Joint law of (retirement time, death time) and every intensity derived
/// from it.
pub struct JointLaw {
    pub grid: TimeGrid,
    pub sigma: u32,
    engine: KernelEngine,
    /// entry density `f(r, k, m) = P(pre state k at r) * rate(k -> retired m at r)`,
    /// flattened `half * sigma^2 + k * sigma + m`
    entry: Vec<f64>,
    /// marginal retirement-time density (defective: integrates to `P(eta <= n)`)
    pub f_eta: HalfTab,
    /// `integral of f_eta over [0, t]`
    pub cum_f_eta: HalfTab,
    /// `integral over s in [0, t] of f_(eta,delta)(s, t)`: the death-flow
    /// aggregated over retirement times
    pub death_flow_agg: HalfTab,
    /// `P(eta <= t < delta)` aggregated from the conditional survival
    /// kernels with the same quadrature weights as the death flow; this is
    /// the denominator of every derived intensity, keeping the ratios exact
    /// when the conditional hazards do not depend on the retirement time
    pub tail_alive: HalfTab,
    /// `P(eta <= t < delta)` by cumulative quadrature of the joint density
    /// over the triangle: an independent route used by the identity check
    pub tail_cumulative: HalfTab,
    /// state-only mortality intensity of pensioners
    pub mu2_tab: HalfTab,
    /// rate of retirement having just occurred given currently retired
    pub mu_bar_tab: HalfTab,
    /// per pre-state numerators `sum_m f(t, j, m)` for the per-state backward
    /// intensities
    entry_by_pre: Vec<HalfTab>,
    pub slices: Vec<LawSlice>,
    pub slice_stride_half: usize,
    g1_mixes: Vec<f64>,
}

impl JointLaw {
    /// Build the law from the occupation table. `slice_spacing` controls how
    /// densely retirement-time slices are stored (in time units; snapped to
    /// the half grid).
    pub fn build(
        spec: &Arc<ModelSpec>,
        grid: &TimeGrid,
        occ: &OccupationTable,
        slice_spacing: f64,
    ) -> Result<JointLaw, PipelineError> {
        if !spec.intensities.pre_retirement_markov() {
            return Err(PipelineError::NonMarkovPreRetirement);
        }
        let sigma = spec.sigma as usize;
        let halves = grid.half_count();
        let engine = KernelEngine::new(spec.clone(), *grid);

        // entry density and marginals
        let mut entry = vec![0.0; halves * sigma * sigma];
        let mut f_eta = vec![0.0; halves];
        let mut entry_by_pre = vec![vec![0.0; halves]; sigma];
        for half in 0..halves {
            let r = grid.half_time(half);
            for k in 0..sigma {
                let from = State::Pre(k as u32 + 1).ext_index(spec.sigma);
                let mass = occ.prob_pre_half(k as u32 + 1, half);
                for m in 0..sigma {
                    let rate = spec.intensities.rate(
                        from,
                        State::Retired(m as u32 + 1).ext_index(spec.sigma),
                        r,
                        0.0,
                    );
                    let val = mass * rate;
                    entry[half * sigma * sigma + k * sigma + m] = val;
                    f_eta[half] += val;
                    entry_by_pre[k][half] += val;
                }
            }
        }
        let mut g1_mixes = vec![0.0; halves * sigma];
        for half in 0..halves {
            let slot = &mut g1_mixes[half * sigma..(half + 1) * sigma];
            let mut total = 0.0;
            for m in 0..sigma {
                let mut s = 0.0;
                for k in 0..sigma {
                    s += entry[half * sigma * sigma + k * sigma + m];
                }
                slot[m] = s;
                total += s;
            }
            if total > DENOMINATOR_FLOOR {
                for s in slot.iter_mut() {
                    *s /= total;
                }
            } else {
                slot.fill(1.0 / sigma as f64);
            }
        }

        // death flow and alive mass aggregated over retirement times
        let (death_flow_agg, tail_alive) =
            aggregate_kernel_marginals(&engine, grid, &f_eta, &g1_mixes, sigma);

        // cumulative quantities on the half grid (composite trapezoid)
        let hh = grid.h() / 2.0;
        let cum_f_eta = cumulative_trapezoid(&f_eta, hh);
        let cum_flow = cumulative_trapezoid(&death_flow_agg, hh);
        let mut tail_cumulative = vec![0.0; halves];
        for h in 0..halves {
            tail_cumulative[h] = (cum_f_eta[h] - cum_flow[h]).max(0.0);
        }
        let mut mu2_tab = vec![0.0; halves];
        let mut mu_bar_tab = vec![0.0; halves];
        for h in 0..halves {
            mu2_tab[h] = guarded_ratio(death_flow_agg[h], tail_alive[h]);
            mu_bar_tab[h] = guarded_ratio(f_eta[h], tail_alive[h]);
        }

        // stored slices
        let slice_stride_half = ((slice_spacing / hh).round() as usize).max(1);
        let slice_halves: Vec<usize> = (0..halves).step_by(slice_stride_half).collect();
        let slices: Vec<LawSlice> = slice_halves
            .par_iter()
            .map(|&r_half| {
                let entry_mix = &g1_mixes[r_half * sigma..(r_half + 1) * sigma];
                let ck = engine.char_kernel(r_half, entry_mix);
                build_slice(&engine, grid, &ck)
            })
            .collect();

        Ok(JointLaw {
            grid: *grid,
            sigma: spec.sigma,
            engine,
            entry,
            f_eta: HalfTab { values: f_eta },
            cum_f_eta: HalfTab { values: cum_f_eta },
            death_flow_agg: HalfTab {
                values: death_flow_agg,
            },
            tail_alive: HalfTab { values: tail_alive },
            tail_cumulative: HalfTab {
                values: tail_cumulative,
            },
            mu2_tab: HalfTab { values: mu2_tab },
            mu_bar_tab: HalfTab { values: mu_bar_tab },
            entry_by_pre: entry_by_pre
                .into_iter()
                .map(|values| HalfTab { values })
                .collect(),
            slices,
            slice_stride_half,
            g1_mixes,
        })
    }

    pub fn engine(&self) -> &KernelEngine {
        &self.engine
    }

    /// Entry density `f(r, k, m)` at half index `r_half`.
    pub fn entry_density(&self, r_half: usize, k: u32, m: u32) -> f64 {
        let sigma = self.sigma as usize;
        self.entry[r_half * sigma * sigma + (k - 1) as usize * sigma + (m - 1) as usize]
    }

    /// `sum_m f(t, j, m)`: joint density of retiring at `t` out of pre-state `j`.
    pub fn entry_density_by_pre(&self, j: u32, half: usize) -> f64 {
        self.entry_by_pre[(j - 1) as usize].at_half(half)
    }

    /// Entry mix over retired health states given retirement at half index
    /// `r_half` (pre-state marginalised out).
    pub fn g1_entry_mix(&self, r_half: usize) -> &[f64] {
        let sigma = self.sigma as usize;
        &self.g1_mixes[r_half * sigma..(r_half + 1) * sigma]
    }

    /// Kernel conditioned on the retirement time only.
    pub fn g1_kernel(&self, r_half: usize) -> CharKernel {
        self.engine.char_kernel(r_half, self.g1_entry_mix(r_half))
    }

    /// Kernel conditioned on (retirement time, pre-retirement state).
    pub fn pre_state_kernel(&self, r_half: usize, k: u32) -> CharKernel {
        let r = self.grid.half_time(r_half);
        let entry = crate::kernel::entry_mix_from_pre(self.engine.spec(), k, r);
        self.engine.char_kernel(r_half, &entry)
    }

    /// Retirement-time-conditioned mortality intensity
    /// `f(t | r) / P(delta >= t | eta = r)`, zero on a vanishing
    /// denominator. `t` and `r` snap to the quarter/half grid.
    pub fn mu1(&self, t: f64, r: f64) -> f64 {
        debug_assert!(r <= t);
        let r_half = self.grid.nearest_half_index(r);
        let q = nearest_quarter(&self.grid, t).max(2 * r_half);
        let ck = self.g1_kernel(r_half);
        self.engine.hazard_q(&ck, q)
    }

    /// Variant of [`JointLaw::mu1`] additionally conditioned on the
    /// pre-retirement state.
    pub fn mu1_given_pre_state(&self, t: f64, r: f64, k: u32) -> f64 {
        let r_half = self.grid.nearest_half_index(r);
        let q = nearest_quarter(&self.grid, t).max(2 * r_half);
        let ck = self.pre_state_kernel(r_half, k);
        self.engine.hazard_q(&ck, q)
    }

    /// State-only mortality intensity of pensioners at time `t`.
    pub fn mu2(&self, t: f64) -> f64 {
        self.mu2_tab.at_half(self.grid.nearest_half_index(t))
    }

    /// Rate of retirement having just occurred, conditionally on being
    /// retired at `t`.
    pub fn mu_bar(&self, t: f64) -> f64 {
        self.mu_bar_tab.at_half(self.grid.nearest_half_index(t))
    }

    /// Per-pre-state backward retirement intensity at half index `half`,
    /// over the cumulative-route tail (the identity check compares it to the
    /// occupation-rescaled forward intensity, so the routes must not share a
    /// denominator).
    pub fn mu_bar_from_pre(&self, j: u32, half: usize) -> f64 {
        guarded_ratio(
            self.entry_density_by_pre(j, half),
            self.tail_cumulative.at_half(half),
        )
    }

    /// Conditional survival `P(delta > t | eta = r)` read from the stored
    /// slice grid (both arguments node-aligned, `r` on a stored slice).
    pub fn slice_at(&self, r_half: usize) -> Option<&LawSlice> {
        if r_half % self.slice_stride_half != 0 {
            return None;
        }
        self.slices.get(r_half / self.slice_stride_half)
    }
}

fn nearest_quarter(grid: &TimeGrid, t: f64) -> usize {
    let q = (4.0 * t / grid.h()).round();
    (q.max(0.0) as usize).min(4 * grid.m())
}

fn build_slice(engine: &KernelEngine, grid: &TimeGrid, ck: &CharKernel) -> LawSlice {
    let first_node = (ck.birth_half + 1) / 2;
    let mut survival = Vec::with_capacity(grid.m() + 1 - first_node);
    let mut death_flow = Vec::with_capacity(survival.capacity());
    let mut hazard = Vec::with_capacity(survival.capacity());
    for node in first_node..=grid.m() {
        let q = 4 * node;
        let s = engine.survival_q(ck, q);
        let f = engine.flow_q(ck, q);
        survival.push(s);
        death_flow.push(f);
        hazard.push(guarded_ratio(f, s));
    }
    LawSlice {
        r_half: ck.birth_half,
        first_node,
        survival,
        death_flow,
        hazard,
    }
}

fn cumulative_trapezoid(values: &[f64], step: f64) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for i in 1..values.len() {
        out[i] = out[i - 1] + 0.5 * step * (values[i - 1] + values[i]);
    }
    out
}

/// `integral over r of f_eta(r) * death_flow(t | r)` and
/// `integral over r of f_eta(r) * survival(t | r)` on the half grid, with
/// shared quadrature weights.
///
/// In fundamental mode the integrals collapse to a running prefix of
/// coefficient rows against the shared tables, which is exactly the
/// composite-trapezoid sum of the per-characteristic route; otherwise the
/// characteristics are advanced individually.
fn aggregate_kernel_marginals(
    engine: &KernelEngine,
    grid: &TimeGrid,
    f_eta: &[f64],
    mixes: &[f64],
    sigma: usize,
) -> (Vec<f64>, Vec<f64>) {
    let halves = grid.half_count();
    let hh = grid.h() / 2.0;
    if engine.is_fundamental() {
        // prefix of weighted coefficient rows: flow(t) = c(t) . xv(t),
        // alive(t) = c(t) . yv(t)
        let d = sigma + 1;
        let mut flow_out = vec![0.0; halves];
        let mut alive_out = vec![0.0; halves];
        let mut prefix = vec![0.0; d];
        let mut first_row: Option<Vec<f64>> = None;
        let mut rows: Vec<f64> = vec![0.0; d];
        for t_half in 0..halves {
            let entry = &mixes[t_half * sigma..(t_half + 1) * sigma];
            let ck = engine.char_kernel(t_half, entry);
            let row = engine.char_row(&ck).expect("fundamental kernel");
            for (slot, v) in rows.iter_mut().zip(row) {
                *slot = *v * f_eta[t_half];
            }
            if first_row.is_none() {
                first_row = Some(rows.clone());
            }
            for (p, v) in prefix.iter_mut().zip(&rows) {
                *p += v;
            }
            // trapezoid over [0, t]: endpoints get half weight
            let f0 = first_row.as_ref().unwrap();
            let mut c = vec![0.0; d];
            for i in 0..d {
                c[i] = hh * (prefix[i] - 0.5 * f0[i] - 0.5 * rows[i]);
            }
            flow_out[t_half] = engine.dot_xv(&c, 2 * t_half);
            alive_out[t_half] = engine.dot_yv(&c, 2 * t_half).max(0.0);
        }
        (flow_out, alive_out)
    } else {
        let n_chars = halves;
        let chunks: Vec<usize> = (0..n_chars.div_ceil(CHAR_CHUNK)).collect();
        let partials: Vec<(Vec<f64>, Vec<f64>)> = chunks
            .par_iter()
            .map(|chunk| {
                let mut flow_acc = vec![0.0; halves];
                let mut alive_acc = vec![0.0; halves];
                let lo = chunk * CHAR_CHUNK;
                let hi = ((chunk + 1) * CHAR_CHUNK).min(n_chars);
                for r_half in lo..hi {
                    let w_base = f_eta[r_half];
                    if w_base == 0.0 {
                        continue;
                    }
                    let entry = &mixes[r_half * sigma..(r_half + 1) * sigma];
                    engine.run_char(r_half, entry, |q, state, flow| {
                        if q % 2 != 0 {
                            return;
                        }
                        let t_half = q / 2;
                        let w = trapezoid_weight(r_half, t_half, hh) * w_base;
                        if w != 0.0 {
                            flow_acc[t_half] += w * flow;
                            let alive: f64 = state[..sigma].iter().sum();
                            alive_acc[t_half] += w * alive;
                        }
                    });
                }
                (flow_acc, alive_acc)
            })
            .collect();
        let mut flow_out = vec![0.0; halves];
        let mut alive_out = vec![0.0; halves];
        for (flow, alive) in partials {
            for (o, v) in flow_out.iter_mut().zip(flow) {
                *o += v;
            }
            for (o, v) in alive_out.iter_mut().zip(alive) {
                *o += v;
            }
        }
        for v in &mut alive_out {
            *v = v.max(0.0);
        }
        (flow_out, alive_out)
    }
}

/// Report of the backward-intensity identity check.
#[derive(Debug, Clone)]
pub struct IdentityReport {
    /// worst relative gap between the two routes across pre-states and nodes
    pub max_rel_discrepancy: f64,
    /// worst relative gap between the summed per-state backward intensities
    /// and the aggregate backward intensity
    pub max_sum_discrepancy: f64,
    pub nodes_checked: usize,
}

/// Cross-checks the backward retirement intensities on interior nodes where
/// the pensioner occupancy exceeds `occupancy_floor`.
///
/// Route one takes the per-state entry density over the triangle-quadrature
/// tail; route two rescales the forward retirement intensity by the
/// occupation-probability ratio. The two routes share no denominator: the
/// first uses the joint-law tail, the second the forward-solved occupancy.
pub fn backward_identity_check(
    spec: &ModelSpec,
    law: &JointLaw,
    occ: &OccupationTable,
    occupancy_floor: f64,
) -> IdentityReport {
    let grid = &law.grid;
    let mut max_rel: f64 = 0.0;
    let mut max_sum: f64 = 0.0;
    let mut checked = 0;
    for node in 1..grid.m() {
        let half = 2 * node;
        let p_pensioner = occ.prob_pensioner_half(half);
        if p_pensioner <= occupancy_floor {
            continue;
        }
        checked += 1;
        let t = grid.node(node);
        let mut lhs_sum = 0.0;
        for j in 1..=spec.sigma {
            let lhs = law.mu_bar_from_pre(j, half);
            let rhs = occ.prob_pre_half(j, half)
                * spec.intensities.lumped_rate_from_pre(j, State::Pensioner, t)
                / p_pensioner;
            lhs_sum += lhs;
            let rel = (lhs - rhs).abs() / rhs.abs().max(DENOMINATOR_FLOOR);
            max_rel = max_rel.max(rel);
        }
        let agg = law.mu_bar_tab.at_half(half);
        let rel_sum = (lhs_sum - agg).abs() / agg.abs().max(DENOMINATOR_FLOOR);
        max_sum = max_sum.max(rel_sum);
    }
    IdentityReport {
        max_rel_discrepancy: max_rel,
        max_sum_discrepancy: max_sum,
        nodes_checked: checked,
    }
}

/// Node-level intensity tables for export.
#[derive(Debug, Clone)]
pub struct IntensityTables {
    pub times: Vec<f64>,
    pub mu2: Vec<f64>,
    pub mu_bar: Vec<f64>,
    /// per pre-state backward retirement intensity
    pub mu_bar_from: Vec<Vec<f64>>,
    /// lumped forward intensities out of each pre-state: (to-label, values)
    pub lumped_forward: Vec<(String, Vec<f64>)>,
}

pub fn intensity_tables(spec: &ModelSpec, law: &JointLaw) -> IntensityTables {
    let grid = &law.grid;
    let times: Vec<f64> = grid.nodes().collect();
    let mu2 = (0..=grid.m()).map(|i| law.mu2_tab.at_node(i)).collect();
    let mu_bar = (0..=grid.m()).map(|i| law.mu_bar_tab.at_node(i)).collect();
    let mu_bar_from = (1..=spec.sigma)
        .map(|j| (0..=grid.m()).map(|i| law.mu_bar_from_pre(j, 2 * i)).collect())
        .collect();
    let mut lumped_forward = Vec::new();
    for j in 1..=spec.sigma {
        for target in crate::state::lumped_states(spec.sigma) {
            if target == State::Pre(j) {
                continue;
            }
            let values: Vec<f64> = times
                .iter()
                .map(|&t| spec.intensities.lumped_rate_from_pre(j, target, t))
                .collect();
            if values.iter().any(|v| *v != 0.0) {
                lumped_forward.push((format!("{}->{}", j, target.label(spec.sigma)), values));
            }
        }
    }
    IntensityTables {
        times,
        mu2,
        mu_bar,
        mu_bar_from,
        lumped_forward,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DiscountCurve, InitialLaw, IntensitySpec, PaymentSpec};
    use crate::rates::{Func, PwLinear, Rate};

    fn model(
        sigma: u32,
        horizon: f64,
        entries: Vec<(State, State, Rate)>,
        bound: f64,
    ) -> Arc<ModelSpec> {
        Arc::new(
            ModelSpec {
                sigma,
                intensities: IntensitySpec::new(sigma, entries, bound).unwrap(),
                payments: PaymentSpec::zero(sigma, horizon),
                discount: DiscountCurve::ConstantRate(0.0),
                initial: InitialLaw::default(),
                horizon,
            }
            .validate()
            .unwrap(),
        )
    }

    fn cst(v: f64) -> Rate {
        Rate::calendar(Func::Constant(v))
    }

    fn duration_linear(c0: f64, c1: f64, span: f64) -> Rate {
        Rate::duration(Func::PwLinear(
            PwLinear::new(vec![(0.0, c0), (span, c0 + c1 * span)]).unwrap(),
        ))
    }

    /// ingredients of the five-state example family: two pre-retirement
    /// states with exchange, two retired states, constant rates
    fn five_state_constant() -> Vec<(State, State, Rate)> {
        vec![
            (State::Pre(1), State::Pre(2), cst(0.06)),
            (State::Pre(2), State::Pre(1), cst(0.2)),
            (State::Pre(1), State::Retired(1), cst(0.08)),
            (State::Pre(2), State::Retired(2), cst(0.07)),
            (State::Pre(1), State::Dead, cst(0.01)),
            (State::Pre(2), State::Dead, cst(0.02)),
            (State::Retired(1), State::Retired(2), cst(0.05)),
            (State::Retired(2), State::Retired(1), cst(0.15)),
            (State::Retired(1), State::Dead, cst(0.03)),
            (State::Retired(2), State::Dead, cst(0.09)),
        ]
    }

    /// dense matrix exponential by scaling and squaring with a Taylor core;
    /// independent oracle for the constant-rate forward solve
    fn matrix_exp(a: &[f64], dim: usize, t: f64) -> Vec<f64> {
        let mut scaled: Vec<f64> = a.iter().map(|x| x * t).collect();
        let norm: f64 = scaled.iter().map(|x| x.abs()).sum();
        let squarings = norm.log2().ceil().max(0.0) as u32 + 4;
        let factor = 0.5f64.powi(squarings as i32);
        for x in &mut scaled {
            *x *= factor;
        }
        // Taylor series of exp for the scaled matrix
        let mut result = vec![0.0; dim * dim];
        for i in 0..dim {
            result[i * dim + i] = 1.0;
        }
        let mut term = result.clone();
        for k in 1..24 {
            let mut next = vec![0.0; dim * dim];
            for i in 0..dim {
                for l in 0..dim {
                    let v = term[i * dim + l];
                    if v != 0.0 {
                        for j in 0..dim {
                            next[i * dim + j] += v * scaled[l * dim + j] / k as f64;
                        }
                    }
                }
            }
            term = next;
            for (r, x) in result.iter_mut().zip(&term) {
                *r += x;
            }
        }
        for _ in 0..squarings {
            let mut sq = vec![0.0; dim * dim];
            for i in 0..dim {
                for l in 0..dim {
                    let v = result[i * dim + l];
                    if v != 0.0 {
                        for j in 0..dim {
                            sq[i * dim + j] += v * result[l * dim + j];
                        }
                    }
                }
            }
            result = sq;
        }
        result
    }

    #[test]
    fn frozen_chain_stays_put() {
        let spec = model(1, 5.0, vec![], 0.0);
        let grid = TimeGrid::new(5.0, 0.05).unwrap();
        let occ = solve_occupation(&spec, &grid).unwrap();
        for i in 0..=grid.m() {
            assert_eq!(occ.prob_pre_half(1, 2 * i), 1.0);
        }
    }

    #[test]
    fn two_state_exponential_survival() {
        let lambda = 0.3;
        let spec = model(1, 10.0, vec![(State::Pre(1), State::Dead, cst(lambda))], 1.0);
        let grid = TimeGrid::new(10.0, 1e-3).unwrap();
        let occ = solve_occupation(&spec, &grid).unwrap();
        let mut worst: f64 = 0.0;
        for i in (0..=grid.m()).step_by(500) {
            let t = grid.node(i);
            worst = worst.max((occ.prob_pre_half(1, 2 * i) - (-lambda * t).exp()).abs());
        }
        assert!(worst < 1e-8, "worst {worst}");
    }

    #[test]
    fn five_state_matches_matrix_exponential() {
        let spec = model(2, 10.0, five_state_constant(), 1.0);
        let grid = TimeGrid::new(10.0, 0.01).unwrap();
        let occ = solve_occupation(&spec, &grid).unwrap();
        // generator over extended states (dead last)
        let dim = 5;
        let mut gen = vec![0.0; dim * dim];
        for (from, to, rate) in five_state_constant() {
            let (i, j) = (from.ext_index(2), to.ext_index(2));
            let v = rate.eval(0.0, 0.0);
            gen[i * dim + j] += v;
            gen[i * dim + i] -= v;
        }
        for &t in &[1.0, 5.0, 10.0] {
            let e = matrix_exp(&gen, dim, t);
            let node = grid.node_index(t).unwrap();
            for target in 0..dim {
                let expected = e[target]; // row 0: started in state 1
                let got = occ.prob_ext(State::from_ext_index(target, 2), node);
                assert!(
                    (got - expected).abs() < 1e-9,
                    "state {target} at t={t}: {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn streaming_occupation_matches_markov_when_duration_free() {
        // same model expressed with a duration clock that is constant in u:
        // forces the streaming route, which must agree with the generator
        // route
        let mut entries = five_state_constant();
        entries.retain(|(f, t, _)| !(*f == State::Retired(2) && *t == State::Dead));
        entries.push((
            State::Retired(2),
            State::Dead,
            Rate::duration(Func::PwLinear(
                PwLinear::new(vec![(0.0, 0.09), (10.0, 0.09)]).unwrap(),
            )),
        ));
        let spec_stream = model(2, 10.0, entries, 1.0);
        let spec_markov = model(2, 10.0, five_state_constant(), 1.0);
        let grid = TimeGrid::new(10.0, 0.01).unwrap();
        let occ_stream = solve_occupation(&spec_stream, &grid).unwrap();
        let occ_markov = solve_occupation(&spec_markov, &grid).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..=grid.m() {
            for m in 1..=2 {
                worst = worst.max(
                    (occ_stream.prob_retired_half(m, 2 * i)
                        - occ_markov.prob_retired_half(m, 2 * i))
                    .abs(),
                );
            }
            worst = worst
                .max((occ_stream.prob_dead_half(2 * i) - occ_markov.prob_dead_half(2 * i)).abs());
        }
        // streaming uses trapezoid weights over retirement times: O(h^2)
        assert!(worst < 2e-5, "worst {worst}");
    }

    #[test]
    fn row_stochasticity_duration_case_fine_grid() {
        let mut entries = five_state_constant();
        entries.retain(|(f, _, _)| !matches!(f, State::Retired(_)));
        entries.push((State::Retired(1), State::Dead, duration_linear(0.01, 0.002, 10.0)));
        entries.push((State::Retired(2), State::Dead, duration_linear(0.01, 0.002, 10.0)));
        let spec = model(2, 5.0, entries, 1.0);
        let grid = TimeGrid::new(5.0, 1e-3).unwrap();
        let occ = solve_occupation(&spec, &grid).unwrap();
        assert!(occ.max_row_drift < 1e-8, "drift {}", occ.max_row_drift);
    }

    #[test]
    fn no_retirement_gives_zero_law() {
        let spec = model(
            1,
            5.0,
            vec![(State::Pre(1), State::Dead, cst(0.1))],
            1.0,
        );
        let grid = TimeGrid::new(5.0, 0.05).unwrap();
        let occ = solve_occupation(&spec, &grid).unwrap();
        let law = JointLaw::build(&spec, &grid, &occ, 0.5).unwrap();
        for i in 0..=grid.m() {
            assert_eq!(law.f_eta.at_node(i), 0.0);
            assert_eq!(law.mu2_tab.at_node(i), 0.0);
            assert_eq!(law.mu_bar_tab.at_node(i), 0.0);
        }
    }

    #[test]
    fn exponential_composition_closed_form() {
        // retire at rate a, die retired at rate c, no pre-retirement death
        let (a, c) = (0.5, 0.3);
        let spec = model(
            1,
            10.0,
            vec![
                (State::Pre(1), State::Retired(1), cst(a)),
                (State::Retired(1), State::Dead, cst(c)),
            ],
            2.0,
        );
        let grid = TimeGrid::new(10.0, 0.01).unwrap();
        let occ = solve_occupation(&spec, &grid).unwrap();
        let law = JointLaw::build(&spec, &grid, &occ, 0.25).unwrap();
        // f_eta(r) = a e^{-a r}
        for &r in &[0.5, 2.0, 7.0] {
            let half = grid.half_index(r).unwrap();
            let expect = a * (-a * r).exp();
            assert!((law.f_eta.at_half(half) - expect).abs() < 1e-9);
        }
        // S(t | r) = e^{-c (t - r)} via the stored slices
        let slice = law.slice_at(grid.half_index(2.0).unwrap()).unwrap();
        let node = grid.node_index(6.0).unwrap();
        assert!((slice.survival_at_node(node) - (-c * 4.0f64).exp()).abs() < 1e-9);
        // mu_bar at t=1 with zero retired mortality requires c = 0; separate
        // model below
        let spec0 = model(1, 10.0, vec![(State::Pre(1), State::Retired(1), cst(a))], 2.0);
        let occ0 = solve_occupation(&spec0, &grid).unwrap();
        let law0 = JointLaw::build(&spec0, &grid, &occ0, 0.25).unwrap();
        let expect = a * (-a * 1.0f64).exp() / (1.0 - (-a * 1.0f64).exp());
        assert!(
            (law0.mu_bar(1.0) - expect).abs() < 1e-6,
            "{} vs {expect}",
            law0.mu_bar(1.0)
        );
    }

    #[test]
    fn mu1_constant_and_duration_hazards() {
        let (a, c) = (0.4, 0.25);
        let spec = model(
            1,
            10.0,
            vec![
                (State::Pre(1), State::Retired(1), cst(a)),
                (State::Retired(1), State::Dead, cst(c)),
            ],
            2.0,
        );
        let grid = TimeGrid::new(10.0, 0.01).unwrap();
        let occ = solve_occupation(&spec, &grid).unwrap();
        let law = JointLaw::build(&spec, &grid, &occ, 0.25).unwrap();
        for &(t, r) in &[(3.0, 1.0), (8.0, 7.5), (5.0, 5.0)] {
            assert!((law.mu1(t, r) - c).abs() < 1e-10);
        }
        // duration-dependent: hazard c0 + c1 (t - r)
        let spec_d = model(
            1,
            10.0,
            vec![
                (State::Pre(1), State::Retired(1), cst(a)),
                (State::Retired(1), State::Dead, duration_linear(0.01, 0.002, 10.0)),
            ],
            2.0,
        );
        let occ_d = solve_occupation(&spec_d, &grid).unwrap();
        let law_d = JointLaw::build(&spec_d, &grid, &occ_d, 0.25).unwrap();
        for &(t, r) in &[(3.0, 1.0), (9.0, 2.0)] {
            let expect = 0.01 + 0.002 * (t - r);
            assert!(
                (law_d.mu1(t, r) - expect).abs() < 1e-9,
                "{} vs {expect}",
                law_d.mu1(t, r)
            );
        }
    }

    #[test]
    fn mu1_zero_survival_uses_zero_convention() {
        // enormous retired mortality empties the kernel quickly
        let spec = model(
            1,
            10.0,
            vec![
                (State::Pre(1), State::Retired(1), cst(0.5)),
                (State::Retired(1), State::Dead, cst(30.0)),
            ],
            40.0,
        );
        let grid = TimeGrid::new(10.0, 0.01).unwrap();
        let occ = solve_occupation(&spec, &grid).unwrap();
        let law = JointLaw::build(&spec, &grid, &occ, 0.25).unwrap();
        // survival at t - r = 9 is e^{-270}: below the denominator floor
        assert_eq!(law.mu1(9.5, 0.5), 0.0);
    }

    #[test]
    fn mu2_is_mixture_of_hazards() {
        // two retired states with distinct constant hazards, no exchange
        let (c1, c2) = (0.05, 0.2);
        let entries = vec![
            (State::Pre(1), State::Retired(1), cst(0.1)),
            (State::Pre(2), State::Retired(2), cst(0.1)),
            (State::Pre(1), State::Pre(2), cst(0.15)),
            (State::Pre(2), State::Pre(1), cst(0.15)),
            (State::Retired(1), State::Dead, cst(c1)),
            (State::Retired(2), State::Dead, cst(c2)),
        ];
        let spec = model(2, 10.0, entries, 1.0);
        let grid = TimeGrid::new(10.0, 0.01).unwrap();
        let occ = solve_occupation(&spec, &grid).unwrap();
        let law = JointLaw::build(&spec, &grid, &occ, 0.1).unwrap();
        // brute-force mixture oracle: occupation-weighted average of the two
        // hazards among living retirees
        for &t in &[2.0, 5.0, 9.0] {
            let node = grid.node_index(t).unwrap();
            let w1 = occ.prob_retired_half(1, 2 * node);
            let w2 = occ.prob_retired_half(2, 2 * node);
            let expected = (w1 * c1 + w2 * c2) / (w1 + w2);
            let got = law.mu2(t);
            assert!(
                (got - expected).abs() < 1e-6,
                "t={t}: {got} vs {expected}"
            );
            assert!(got >= c1 - 1e-9 && got <= c2 + 1e-9, "mixture bounds");
        }
    }

    #[test]
    fn mu1_equals_mu2_for_identical_duration_free_hazards() {
        let c = 0.12;
        let entries = vec![
            (State::Pre(1), State::Retired(1), cst(0.1)),
            (State::Pre(2), State::Retired(2), cst(0.08)),
            (State::Pre(1), State::Pre(2), cst(0.15)),
            (State::Pre(2), State::Pre(1), cst(0.15)),
            (State::Retired(1), State::Retired(2), cst(0.1)),
            (State::Retired(2), State::Retired(1), cst(0.2)),
            (State::Retired(1), State::Dead, cst(c)),
            (State::Retired(2), State::Dead, cst(c)),
        ];
        let spec = model(2, 10.0, entries, 1.0);
        // the two routes to the state-only hazard carry independent
        // quadrature errors of order h^2; the degeneracy bound needs the
        // fine default step
        let grid = TimeGrid::new(10.0, 1e-3).unwrap();
        let occ = solve_occupation(&spec, &grid).unwrap();
        let law = JointLaw::build(&spec, &grid, &occ, 0.5).unwrap();
        for &t in &[1.0, 4.0, 8.0] {
            for &r in &[0.5, 0.25 * t, t] {
                let gap = (law.mu1(t, r) - law.mu2(t)).abs();
                assert!(gap < 1e-8, "t={t} r={r} gap={gap}");
            }
        }
    }

    #[test]
    fn retirement_mass_consistency() {
        // integral of f_eta over [0, n] equals P(eta <= n) from the
        // occupation table (retired mass plus deaths after retirement)
        let spec = model(2, 10.0, five_state_constant(), 1.0);
        let grid = TimeGrid::new(10.0, 0.01).unwrap();
        let occ = solve_occupation(&spec, &grid).unwrap();
        let law = JointLaw::build(&spec, &grid, &occ, 0.1).unwrap();
        let total_density = law.cum_f_eta.at_node(grid.m());
        let from_occ = occ.prob_ever_retired_by_horizon();
        assert!(
            (total_density - from_occ).abs() < 1e-6,
            "{total_density} vs {from_occ}"
        );
        assert!(total_density < 1.0);
    }

    #[test]
    fn backward_identity_exponential_model() {
        let (a, c) = (0.5, 0.1);
        let spec = model(
            1,
            10.0,
            vec![
                (State::Pre(1), State::Retired(1), cst(a)),
                (State::Retired(1), State::Dead, cst(c)),
            ],
            2.0,
        );
        let grid = TimeGrid::new(10.0, 1e-3).unwrap();
        let occ = solve_occupation(&spec, &grid).unwrap();
        let law = JointLaw::build(&spec, &grid, &occ, 0.5).unwrap();
        let report = backward_identity_check(&spec, &law, &occ, 0.01);
        assert!(report.nodes_checked > 100);
        assert!(
            report.max_rel_discrepancy < 1e-6,
            "discrepancy {}",
            report.max_rel_discrepancy
        );
        assert!(report.max_sum_discrepancy < 1e-6);
    }

    #[test]
    fn frozen_chain_identity_is_vacuous() {
        let spec = model(1, 5.0, vec![], 0.0);
        let grid = TimeGrid::new(5.0, 0.05).unwrap();
        let occ = solve_occupation(&spec, &grid).unwrap();
        let law = JointLaw::build(&spec, &grid, &occ, 0.5).unwrap();
        let report = backward_identity_check(&spec, &law, &occ, 0.01);
        assert_eq!(report.nodes_checked, 0);
        assert_eq!(report.max_rel_discrepancy, 0.0);
    }

    #[test]
    fn non_markov_pre_retirement_is_rejected() {
        let entries = vec![(
            State::Pre(1),
            State::Retired(1),
            duration_linear(0.1, 0.01, 10.0),
        )];
        let spec = model(1, 10.0, entries, 1.0);
        let grid = TimeGrid::new(10.0, 0.1).unwrap();
        assert!(matches!(
            solve_occupation(&spec, &grid),
            Err(PipelineError::NonMarkovPreRetirement)
        ));
    }
}
