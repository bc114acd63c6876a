//! Monte Carlo oracle: exact-in-law simulation of the extended chain by
//! thinning, pathwise discounted outflows, conditional-mean reserve
//! estimators, and occurrence/exposure intensity estimators.
//!
//! Every path owns an independent counter-derived RNG stream, so results are
//! byte-identical for a fixed `(seed, n_paths)` regardless of the degree of
//! parallelism. Estimator reductions use order-fixed pairwise summation.

use crate::grid::TimeGrid;
use crate::model::ModelSpec;
use crate::numerics::pairwise_sum;
use crate::state::State;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum McError {
    #[error("thinning bound violated at t={t}: total exit rate {total} exceeds declared bound {bound}")]
    BadBound { t: f64, total: f64, bound: f64 },
    #[error("conditioning event selects no paths")]
    EmptyConditioning,
}

/// One simulated trajectory of the extended chain: the initial state and the
/// ordered jump records. Jump times are strictly increasing and capped at
/// the horizon; the dead state is terminal.
#[derive(Debug, Clone)]
pub struct PathSample {
    pub initial: State,
    pub jumps: Vec<(f64, State)>,
}

impl PathSample {
    /// Extended state at time `t` (cadlag: a jump exactly at `t` has already
    /// happened).
    pub fn ext_state_at(&self, t: f64) -> State {
        let mut state = self.initial;
        for (s, new) in &self.jumps {
            if *s <= t {
                state = *new;
            } else {
                break;
            }
        }
        state
    }

    /// Extended state just before `t`.
    pub fn ext_state_before(&self, t: f64) -> State {
        let mut state = self.initial;
        for (s, new) in &self.jumps {
            if *s < t {
                state = *new;
            } else {
                break;
            }
        }
        state
    }

    pub fn lumped_at(&self, t: f64) -> State {
        self.ext_state_at(t).lump()
    }

    /// Retirement time: first entry into the retired block.
    pub fn eta(&self) -> Option<f64> {
        self.jumps
            .iter()
            .find(|(_, s)| matches!(s, State::Retired(_)))
            .map(|(t, _)| *t)
    }

    /// Death time.
    pub fn delta(&self) -> Option<f64> {
        self.jumps
            .iter()
            .find(|(_, s)| matches!(s, State::Dead))
            .map(|(t, _)| *t)
    }

    /// State occupied just before retirement (defined once retired).
    pub fn state_before_retirement(&self) -> Option<State> {
        let eta = self.eta()?;
        Some(self.ext_state_before(eta))
    }

    /// Duration of the last sojourn before retirement.
    pub fn last_pre_sojourn(&self) -> Option<f64> {
        let eta = self.eta()?;
        let mut start = 0.0;
        for (s, _) in &self.jumps {
            if *s < eta {
                start = *s;
            } else {
                break;
            }
        }
        Some(eta - start)
    }

    /// Sojourn duration of the current state at `t` (time since the last
    /// jump at or before `t`).
    pub fn duration_at(&self, t: f64) -> f64 {
        let mut start = 0.0;
        for (s, _) in &self.jumps {
            if *s <= t {
                start = *s;
            } else {
                break;
            }
        }
        t - start
    }

    /// Time since retirement at `t` (zero before retirement).
    pub fn time_since_retirement(&self, t: f64) -> f64 {
        match self.eta() {
            Some(eta) if t >= eta => t - eta,
            _ => 0.0,
        }
    }

    /// Number of jumps up to and including `t`.
    pub fn jump_count_at(&self, t: f64) -> usize {
        self.jumps.iter().take_while(|(s, _)| *s <= t).count()
    }
}

#[derive(Debug)]
pub struct Paths {
    pub samples: Vec<PathSample>,
    pub seed: u64,
    pub horizon: f64,
}

/// Simulate by thinning: candidate events from a homogeneous stream at the
/// declared bound, accepted with probability `total rate / bound`,
/// destination drawn proportionally to the individual rates. Exact in law;
/// no time discretisation.
pub fn simulate_paths(spec: &Arc<ModelSpec>, n_paths: usize, seed: u64) -> Result<Paths, McError> {
    let samples: Result<Vec<PathSample>, McError> = (0..n_paths)
        .into_par_iter()
        .map(|idx| simulate_one(spec, seed, idx as u64))
        .collect();
    Ok(Paths {
        samples: samples?,
        seed,
        horizon: spec.horizon,
    })
}

fn simulate_one(spec: &ModelSpec, seed: u64, idx: u64) -> Result<PathSample, McError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(idx);
    let initial = if spec.initial.weights.len() == 1 {
        spec.initial.weights[0].0
    } else {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = spec.initial.weights[0].0;
        for (s, w) in &spec.initial.weights {
            acc += w;
            if u < acc {
                chosen = *s;
                break;
            }
            chosen = *s;
        }
        chosen
    };
    let bound = spec.intensities.sup_bound;
    let n = spec.horizon;
    let mut jumps = Vec::new();
    if bound <= 0.0 {
        return Ok(PathSample { initial, jumps });
    }
    let dim = spec.n_ext();
    let mut state = initial;
    let mut sojourn_start = 0.0;
    let mut eta: Option<f64> = None;
    let mut t = 0.0;
    loop {
        let step: f64 = {
            let u: f64 = rng.gen();
            -(1.0 - u).ln() / bound
        };
        t += step;
        if t > n {
            break;
        }
        let duration = match state {
            State::Retired(_) => t - eta.expect("retired implies a retirement time"),
            _ => t - sojourn_start,
        };
        let from = state.ext_index(spec.sigma);
        let total = spec.intensities.total_exit(from, t, duration);
        if total > bound * (1.0 + 1e-9) {
            return Err(McError::BadBound { t, total, bound });
        }
        let accept: f64 = rng.gen();
        if accept * bound >= total {
            continue;
        }
        // destination proportional to the individual rates
        let pick: f64 = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut dest = from;
        for to in 0..dim {
            if to == from {
                continue;
            }
            let rate = spec.intensities.rate(from, to, t, duration);
            if rate <= 0.0 {
                continue;
            }
            acc += rate;
            dest = to;
            if pick < acc {
                break;
            }
        }
        let new_state = State::from_ext_index(dest, spec.sigma);
        jumps.push((t, new_state));
        if matches!(new_state, State::Retired(_)) && eta.is_none() {
            eta = Some(t);
        }
        if new_state == State::Dead {
            break;
        }
        sojourn_start = t;
        state = new_state;
    }
    Ok(PathSample { initial, jumps })
}

/// Precomputed discounting tables for pathwise outflow evaluation: per
/// lumped state the tail integral of the discounted sojourn rate on the
/// quarter grid, plus the discounted payment atoms.
pub struct OutflowTables {
    spec: Arc<ModelSpec>,
    grid: TimeGrid,
    /// `tail[state][q] = integral of v(s) b_state(s) over [t_q, n]`
    tail: Vec<Vec<f64>>,
    /// `(time, lumped state, v(time) * amount)`
    atoms: Vec<(f64, State, f64)>,
}

pub fn outflow_tables(spec: &Arc<ModelSpec>, grid: &TimeGrid) -> OutflowTables {
    let sigma = spec.sigma;
    let qn = grid.quarter_count();
    let hq = grid.h() / 4.0;
    let tail = crate::state::lumped_states(sigma)
        .map(|s| {
            let mut tab = vec![0.0; qn];
            let mut g_next = spec.discount.v(grid.quarter_time(qn - 1))
                * spec.payments.sojourn_rate(s, grid.quarter_time(qn - 1));
            for q in (0..qn - 1).rev() {
                let g = spec.discount.v(grid.quarter_time(q))
                    * spec.payments.sojourn_rate(s, grid.quarter_time(q));
                tab[q] = tab[q + 1] + 0.5 * hq * (g + g_next);
                g_next = g;
            }
            tab
        })
        .collect();
    let atoms = spec
        .payments
        .atoms
        .iter()
        .map(|a| (a.time, a.state, spec.discount.v(a.time) * a.amount))
        .collect();
    OutflowTables {
        spec: spec.clone(),
        grid: *grid,
        tail,
        atoms,
    }
}

impl OutflowTables {
    /// Tail integral at an arbitrary time (linear within a quarter cell,
    /// consistent with the trapezoid tabulation).
    fn tail_at(&self, lumped_idx: usize, s: f64) -> f64 {
        if s >= self.grid.n() {
            return 0.0;
        }
        let x = (s / (self.grid.h() / 4.0)).max(0.0);
        let i = (x.floor() as usize).min(self.grid.quarter_count() - 2);
        let frac = x - i as f64;
        let tab = &self.tail[lumped_idx];
        tab[i] + (tab[i + 1] - tab[i]) * frac
    }

    /// Discounted accumulated strictly-future payments of a path, valued at
    /// `t`: sojourn payments by grid-aligned quadrature, discrete payments to
    /// the state occupied just before their due date, and transition
    /// payments at the jump times. Payments at exactly `t` are excluded.
    pub fn discounted_outflow(&self, path: &PathSample, t: f64) -> f64 {
        let spec = &self.spec;
        let sigma = spec.sigma;
        let n = self.grid.n();
        let kappa_t = spec.discount.kappa(t);
        let mut acc = 0.0;
        let mut seg_start = t;
        let mut state = path.ext_state_at(t).lump();
        for (s, new) in &path.jumps {
            if *s <= t {
                continue;
            }
            if *s > n {
                break;
            }
            let idx = state.lumped_index(sigma);
            acc += self.tail_at(idx, seg_start) - self.tail_at(idx, *s);
            let new_lumped = new.lump();
            if new_lumped != state {
                acc += spec.discount.v(*s) * spec.payments.transition_payment(state, new_lumped, *s);
            }
            state = new_lumped;
            seg_start = *s;
        }
        acc += self.tail_at(state.lumped_index(sigma), seg_start);
        for (time, atom_state, discounted) in &self.atoms {
            if *time > t && path.ext_state_before(*time).lump() == *atom_state {
                acc += discounted;
            }
        }
        kappa_t * acc
    }
}

/// Conditioning events for the reserve estimators. Times are evaluated with
/// the cadlag convention: the state at `t` is the post-jump state when a
/// jump lands exactly on `t`.
#[derive(Debug, Clone)]
pub enum Conditioning {
    /// `{Z_t = state}` for a lumped state
    InState { t: f64, state: State },
    /// `{Z_t = p, eta in [lo, hi)}`
    RetiredEta { t: f64, lo: f64, hi: f64 },
    /// `{Z_t = p, eta in bin, pre-retirement state, last sojourn in bin}`
    RetiredFull {
        t: f64,
        eta_lo: f64,
        eta_hi: f64,
        pre_state: u32,
        uh_lo: f64,
        uh_hi: f64,
    },
    /// a lumped `from -> to` jump inside `[t, t + window)`; the outflow is
    /// valued at the jump time
    AtTransition {
        t: f64,
        from: State,
        to: State,
        window: f64,
    },
}

impl Conditioning {
    pub fn time(&self) -> f64 {
        match self {
            Conditioning::InState { t, .. }
            | Conditioning::RetiredEta { t, .. }
            | Conditioning::RetiredFull { t, .. }
            | Conditioning::AtTransition { t, .. } => *t,
        }
    }

    /// Valuation time when the path satisfies the event.
    pub fn matches(&self, path: &PathSample) -> Option<f64> {
        match self {
            Conditioning::InState { t, state } => (path.lumped_at(*t) == *state).then_some(*t),
            Conditioning::RetiredEta { t, lo, hi } => {
                if path.lumped_at(*t) != State::Pensioner {
                    return None;
                }
                let eta = path.eta()?;
                (*lo <= eta && eta < *hi).then_some(*t)
            }
            Conditioning::RetiredFull {
                t,
                eta_lo,
                eta_hi,
                pre_state,
                uh_lo,
                uh_hi,
            } => {
                if path.lumped_at(*t) != State::Pensioner {
                    return None;
                }
                let eta = path.eta()?;
                if !(*eta_lo <= eta && eta < *eta_hi) {
                    return None;
                }
                if path.state_before_retirement()? != State::Pre(*pre_state) {
                    return None;
                }
                let uh = path.last_pre_sojourn()?;
                (*uh_lo <= uh && uh < *uh_hi).then_some(*t)
            }
            Conditioning::AtTransition { t, from, to, window } => {
                for (s, new) in &path.jumps {
                    if *s < *t {
                        continue;
                    }
                    if *s >= t + window {
                        break;
                    }
                    if path.ext_state_before(*s).lump() == *from && new.lump() == *to {
                        return Some(*s);
                    }
                }
                None
            }
        }
    }
}

/// Conditional-mean estimate with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_effective: usize,
    /// set when fewer paths satisfy the event than the configured minimum
    pub unreliable: bool,
    /// metadata: width of the conditioning bins, when the event was binned
    pub bin_width: Option<f64>,
}

/// Default minimum number of conditioned paths for a reliable estimate.
pub const DEFAULT_MIN_EFFECTIVE: usize = 200;

/// Sample mean of the discounted outflow over the paths satisfying the
/// event.
pub fn estimate_reserve(
    paths: &Paths,
    tables: &OutflowTables,
    cond: &Conditioning,
    min_effective: usize,
) -> Result<McEstimate, McError> {
    let values: Vec<Option<f64>> = paths
        .samples
        .par_iter()
        .map(|p| cond.matches(p).map(|at| tables.discounted_outflow(p, at)))
        .collect();
    let selected: Vec<f64> = values.into_iter().flatten().collect();
    let n = selected.len();
    if n == 0 {
        return Err(McError::EmptyConditioning);
    }
    let mean = pairwise_sum(&selected) / n as f64;
    let sq: Vec<f64> = selected.iter().map(|v| (v - mean) * (v - mean)).collect();
    let std_error = if n > 1 {
        (pairwise_sum(&sq) / ((n - 1) as f64) / n as f64).sqrt()
    } else {
        0.0
    };
    let bin_width = match cond {
        Conditioning::RetiredEta { lo, hi, .. } => Some(hi - lo),
        Conditioning::RetiredFull { eta_lo, eta_hi, .. } => Some(eta_hi - eta_lo),
        _ => None,
    };
    Ok(McEstimate {
        mean,
        std_error,
        n_effective: n,
        unreliable: n < min_effective,
        bin_width,
    })
}

/// Occurrence/exposure rate estimate.
#[derive(Debug, Clone, Copy)]
pub struct RateEstimate {
    pub rate: f64,
    pub std_error: f64,
    pub occurrences: usize,
    pub exposure: f64,
}

/// Forward occurrence/exposure estimator of the lumped `from -> to`
/// intensity over `[t, t + bandwidth)`, among paths satisfying `base` at
/// `t`.
pub fn estimate_forward_intensity(
    paths: &Paths,
    base: &Conditioning,
    from: State,
    to: State,
    bandwidth: f64,
) -> Result<RateEstimate, McError> {
    let t = base.time();
    let hi = t + bandwidth;
    let per_path: Vec<Option<(bool, f64)>> = paths
        .samples
        .par_iter()
        .map(|p| {
            base.matches(p)?;
            let mut occurred = false;
            for (s, new) in &p.jumps {
                if *s < t {
                    continue;
                }
                if *s >= hi {
                    break;
                }
                if p.ext_state_before(*s).lump() == from && new.lump() == to {
                    occurred = true;
                    break;
                }
            }
            // exposure: time spent in `from` during the window
            let mut exposure = 0.0;
            let mut seg_start = t;
            let mut state = p.lumped_at(t);
            let mut truncated = false;
            for (s, new) in &p.jumps {
                if *s <= t {
                    continue;
                }
                if *s >= hi {
                    truncated = true;
                    if state == from {
                        exposure += hi - seg_start;
                    }
                    break;
                }
                if state == from {
                    exposure += *s - seg_start;
                }
                state = new.lump();
                seg_start = *s;
            }
            if !truncated && state == from && seg_start < hi {
                exposure += hi - seg_start;
            }
            Some((occurred, exposure))
        })
        .collect();
    let mut occurrences = 0usize;
    let mut any = false;
    let exposures: Vec<f64> = per_path
        .into_iter()
        .flatten()
        .map(|(occ, exp)| {
            any = true;
            if occ {
                occurrences += 1;
            }
            exp
        })
        .collect();
    if !any {
        return Err(McError::EmptyConditioning);
    }
    let exposure = pairwise_sum(&exposures);
    let rate = if exposure > 0.0 {
        occurrences as f64 / exposure
    } else {
        0.0
    };
    let std_error = if exposure > 0.0 {
        (occurrences as f64).sqrt() / exposure
    } else {
        0.0
    };
    Ok(RateEstimate {
        rate,
        std_error,
        occurrences,
        exposure,
    })
}

/// Reverse-window estimator of the rate at which pensioners at `t` have just
/// retired: entries into the retired block during `(t - bandwidth, t]`, over
/// `bandwidth` times the number of pensioners at `t`. Restricting `from_pre`
/// counts only retirements out of that pre-retirement state.
pub fn estimate_backward_intensity(
    paths: &Paths,
    from_pre: Option<u32>,
    t: f64,
    bandwidth: f64,
) -> Result<RateEstimate, McError> {
    let lo = t - bandwidth;
    let counts: Vec<(bool, bool)> = paths
        .samples
        .par_iter()
        .map(|p| {
            let retired_now = p.lumped_at(t) == State::Pensioner;
            let entered = match p.eta() {
                Some(eta) if lo < eta && eta <= t => match from_pre {
                    None => true,
                    Some(k) => p.state_before_retirement() == Some(State::Pre(k)),
                },
                _ => false,
            };
            (retired_now, entered)
        })
        .collect();
    let denom = counts.iter().filter(|(r, _)| *r).count();
    if denom == 0 {
        return Err(McError::EmptyConditioning);
    }
    let occurrences = counts.iter().filter(|(_, e)| *e).count();
    let scale = bandwidth * denom as f64;
    Ok(RateEstimate {
        rate: occurrences as f64 / scale,
        std_error: (occurrences as f64).sqrt() / scale,
        occurrences,
        exposure: scale,
    })
}
