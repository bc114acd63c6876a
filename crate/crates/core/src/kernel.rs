//! Conditional post-retirement sub-chain.
//!
//! Conditionally on retiring at time `r`, the retired block together with the
//! dead state evolves as a time-inhomogeneous Markov chain (retired-block
//! rates may read the time-since-retirement clock `t - r`). This module
//! solves that sub-chain forward from an entry mix over the retired health
//! states and exposes, per retirement time:
//!
//! * the conditional survival `S(t | r)` (probability of still being alive),
//! * the conditional death-time density `f(t | r)` (flow into dead),
//! * the conditional mortality hazard `f(t | r) / S(t | r)`.
//!
//! Two evaluation modes share the same contract. When every retired-block
//! rate reads the calendar clock, one fundamental-matrix solve serves all
//! retirement times exactly (semigroup property); otherwise each retirement
//! time gets its own Runge-Kutta pass. Tabulation is on the quarter grid so
//! that downstream backward solvers never interpolate.

use crate::grid::TimeGrid;
use crate::model::ModelSpec;
use crate::numerics::{rk4_step_vec, solve_row_system};
use crate::state::State;
use std::sync::Arc;

/// Ratios with denominators at or below this floor are defined as zero.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

#[inline]
pub fn guarded_ratio(num: f64, den: f64) -> f64 {
    if den > DENOMINATOR_FLOOR {
        num / den
    } else {
        0.0
    }
}

/// Fills the row-major generator of the retired sub-chain (dimension
/// `sigma + 1`; the last index is the dead compartment) at calendar time `t`
/// and time-since-retirement `u`.
fn fill_generator(spec: &ModelSpec, t: f64, u: f64, out: &mut [f64]) {
    let sigma = spec.sigma as usize;
    let d = sigma + 1;
    out[..d * d].fill(0.0);
    for a in 0..sigma {
        let from = State::Retired(a as u32 + 1).ext_index(spec.sigma);
        let mut total = 0.0;
        for b in 0..sigma {
            if a == b {
                continue;
            }
            let to = State::Retired(b as u32 + 1).ext_index(spec.sigma);
            let rate = spec.intensities.rate(from, to, t, u);
            out[a * d + b] = rate;
            total += rate;
        }
        let dead = spec.intensities.rate(from, State::Dead.ext_index(spec.sigma), t, u);
        out[a * d + sigma] = dead;
        total += dead;
        out[a * d + a] = -total;
    }
}

struct Fundamental {
    /// fundamental matrix of the sub-chain from time 0, row-major `d x d`
    /// per quarter node
    phi: Vec<f64>,
    /// `phi(t) * alive_mask` per quarter node (length `d` each)
    yv: Vec<f64>,
    /// `phi(t) * death_rate_vector(t)` per quarter node
    xv: Vec<f64>,
}

pub struct KernelEngine {
    spec: Arc<ModelSpec>,
    grid: TimeGrid,
    fund: Option<Fundamental>,
}

/// Per-retirement-time kernel handle; access goes through the owning engine.
pub struct CharKernel {
    pub birth_half: usize,
    source: CharSource,
}

enum CharSource {
    /// coefficient row against the fundamental tables
    Fund { a: Vec<f64> },
    /// tabulated survival/flow at quarter offsets from birth
    Tab { survival: Vec<f64>, flow: Vec<f64> },
}

impl KernelEngine {
    pub fn new(spec: Arc<ModelSpec>, grid: TimeGrid) -> KernelEngine {
        let fund = if spec.intensities.retired_block_markov() {
            Some(build_fundamental(&spec, &grid))
        } else {
            None
        };
        KernelEngine { spec, grid, fund }
    }

    pub fn is_fundamental(&self) -> bool {
        self.fund.is_some()
    }

    pub fn spec(&self) -> &Arc<ModelSpec> {
        &self.spec
    }

    /// Coefficient row of a fundamental-mode kernel (none in direct mode).
    pub fn char_row<'a>(&self, ck: &'a CharKernel) -> Option<&'a [f64]> {
        match &ck.source {
            CharSource::Fund { a } => Some(a),
            CharSource::Tab { .. } => None,
        }
    }

    /// Dot of a coefficient row against the death-flow table at quarter `q`.
    pub fn dot_xv(&self, row: &[f64], q: usize) -> f64 {
        let d = self.dim();
        let f = self.fund.as_ref().expect("fundamental tables required");
        dot(row, &f.xv[q * d..(q + 1) * d])
    }

    /// Dot of a coefficient row against the alive-mass table at quarter `q`.
    pub fn dot_yv(&self, row: &[f64], q: usize) -> f64 {
        let d = self.dim();
        let f = self.fund.as_ref().expect("fundamental tables required");
        dot(row, &f.yv[q * d..(q + 1) * d])
    }

    /// Dimension of the sub-chain state (retired states plus dead).
    pub fn dim(&self) -> usize {
        self.spec.sigma as usize + 1
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Build the kernel handle for retirement at half node `birth_half` with
    /// entry mix `entry` over the retired health states (sums to one).
    pub fn char_kernel(&self, birth_half: usize, entry: &[f64]) -> CharKernel {
        let d = self.dim();
        let sigma = d - 1;
        debug_assert_eq!(entry.len(), sigma);
        match &self.fund {
            Some(f) => {
                let mut w = vec![0.0; d];
                w[..sigma].copy_from_slice(entry);
                let birth_q = 2 * birth_half;
                let a = solve_row_system(&f.phi[birth_q * d * d..(birth_q + 1) * d * d], &w, d);
                CharKernel {
                    birth_half,
                    source: CharSource::Fund { a },
                }
            }
            None => {
                let mut survival = Vec::new();
                let mut flow = Vec::new();
                self.run_char(birth_half, entry, |_, state, f| {
                    survival.push(state[..sigma].iter().sum());
                    flow.push(f);
                });
                CharKernel {
                    birth_half,
                    source: CharSource::Tab { survival, flow },
                }
            }
        }
    }

    /// Conditional survival at absolute quarter index `q` (must be at or
    /// after birth).
    pub fn survival_q(&self, ck: &CharKernel, q: usize) -> f64 {
        debug_assert!(q >= 2 * ck.birth_half);
        match &ck.source {
            CharSource::Fund { a } => {
                let d = self.dim();
                let f = self.fund.as_ref().unwrap();
                dot(a, &f.yv[q * d..(q + 1) * d])
            }
            CharSource::Tab { survival, .. } => survival[q - 2 * ck.birth_half],
        }
    }

    /// Conditional death-time density at absolute quarter index `q`.
    pub fn flow_q(&self, ck: &CharKernel, q: usize) -> f64 {
        debug_assert!(q >= 2 * ck.birth_half);
        match &ck.source {
            CharSource::Fund { a } => {
                let d = self.dim();
                let f = self.fund.as_ref().unwrap();
                dot(a, &f.xv[q * d..(q + 1) * d])
            }
            CharSource::Tab { flow, .. } => flow[q - 2 * ck.birth_half],
        }
    }

    /// Conditional mortality hazard at quarter index `q`, zero on a vanishing
    /// denominator.
    pub fn hazard_q(&self, ck: &CharKernel, q: usize) -> f64 {
        guarded_ratio(self.flow_q(ck, q), self.survival_q(ck, q))
    }

    /// Forward-solve one characteristic, visiting every quarter index from
    /// birth to the horizon with the sub-chain state (retired occupancies
    /// plus dead mass) and the instantaneous death flow.
    pub fn run_char<F>(&self, birth_half: usize, entry: &[f64], mut visit: F)
    where
        F: FnMut(usize, &[f64], f64),
    {
        let d = self.dim();
        let sigma = d - 1;
        let grid = &self.grid;
        let r = grid.half_time(birth_half);
        let dead_idx = State::Dead.ext_index(self.spec.sigma);
        let mut y = vec![0.0; d];
        y[..sigma].copy_from_slice(entry);
        let mut gen = vec![0.0; d * d];
        let mut scratch = vec![0.0; 4 * d];
        let q_end = 4 * grid.m();
        let hq = grid.h() / 4.0;
        let mut q = 2 * birth_half;
        loop {
            let t = grid.quarter_time(q);
            let mut flow = 0.0;
            for a in 0..sigma {
                let from = State::Retired(a as u32 + 1).ext_index(self.spec.sigma);
                flow += y[a] * self.spec.intensities.rate(from, dead_idx, t, t - r);
            }
            visit(q, &y, flow);
            if q == q_end {
                break;
            }
            let spec = &self.spec;
            rk4_step_vec(
                t,
                hq,
                &mut y,
                |s, yy, dy| {
                    fill_generator(spec, s, s - r, &mut gen);
                    for j in 0..d {
                        let mut acc = 0.0;
                        for i in 0..d {
                            acc += yy[i] * gen[i * d + j];
                        }
                        dy[j] = acc;
                    }
                },
                &mut scratch,
            );
            q += 1;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn build_fundamental(spec: &ModelSpec, grid: &TimeGrid) -> Fundamental {
    let d = spec.sigma as usize + 1;
    let sigma = d - 1;
    let qn = grid.quarter_count();
    let mut phi = vec![0.0; qn * d * d];
    // identity at t = 0
    for i in 0..d {
        phi[i * d + i] = 1.0;
    }
    let mut cur: Vec<f64> = phi[..d * d].to_vec();
    let mut scratch = vec![0.0; 4 * d * d];
    let mut gen = vec![0.0; d * d];
    let hq = grid.h() / 4.0;
    for q in 1..qn {
        let t = grid.quarter_time(q - 1);
        rk4_step_vec(
            t,
            hq,
            &mut cur,
            |s, yy, dy| {
                // calendar-clock rates only in fundamental mode: duration is unused
                fill_generator(spec, s, 0.0, &mut gen);
                for row in 0..d {
                    for j in 0..d {
                        let mut acc = 0.0;
                        for i in 0..d {
                            acc += yy[row * d + i] * gen[i * d + j];
                        }
                        dy[row * d + j] = acc;
                    }
                }
            },
            &mut scratch,
        );
        phi[q * d * d..(q + 1) * d * d].copy_from_slice(&cur);
    }
    // derived coefficient tables
    let mut yv = vec![0.0; qn * d];
    let mut xv = vec![0.0; qn * d];
    let dead_idx = State::Dead.ext_index(spec.sigma);
    for q in 0..qn {
        let t = grid.quarter_time(q);
        let block = &phi[q * d * d..(q + 1) * d * d];
        for i in 0..d {
            let mut alive = 0.0;
            let mut death = 0.0;
            for j in 0..sigma {
                alive += block[i * d + j];
                let from = State::Retired(j as u32 + 1).ext_index(spec.sigma);
                death += block[i * d + j] * spec.intensities.rate(from, dead_idx, t, 0.0);
            }
            yv[q * d + i] = alive;
            xv[q * d + i] = death;
        }
    }
    Fundamental { phi, yv, xv }
}

/// Entry mix over retired health states for retirement out of pre-state `k`
/// at time `r`: proportional to the retirement channel rates. Falls back to
/// uniform when no channel is open (such kernels only ever carry zero
/// weight).
pub fn entry_mix_from_pre(spec: &ModelSpec, k: u32, r: f64) -> Vec<f64> {
    let sigma = spec.sigma as usize;
    let from = State::Pre(k).ext_index(spec.sigma);
    let mut w: Vec<f64> = (0..sigma)
        .map(|m| {
            spec.intensities
                .rate(from, State::Retired(m as u32 + 1).ext_index(spec.sigma), r, 0.0)
        })
        .collect();
    let total: f64 = w.iter().sum();
    if total > DENOMINATOR_FLOOR {
        for x in &mut w {
            *x /= total;
        }
    } else {
        w.fill(1.0 / sigma as f64);
    }
    w
}
