//! Model family: extended chain, payments on the lumped chain, discounting.

use crate::rates::{Func, PwLinear, Rate};
use crate::state::{extended_states, State};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("structural violation: transition {from} -> {to} is forbidden ({reason})")]
    StructuralViolation {
        from: String,
        to: String,
        reason: String,
    },
    #[error("unbounded intensity: total exit rate {found} from state {state} at (t={t}, u={u}) exceeds declared bound {bound}")]
    UnboundedIntensity {
        state: String,
        t: f64,
        u: f64,
        found: f64,
        bound: f64,
    },
    #[error("bad discount curve: {0}")]
    BadDiscount(String),
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("time {0} outside the contract horizon")]
    OutOfHorizon(f64),
}

/// Transition-intensity table of the extended chain.
///
/// Entries are sparse; pairs without an entry have rate zero. Structural
/// zeros (retired -> pre-retirement, anything out of dead) are rejected at
/// validation. `sup_bound` is a declared finite bound on the total exit rate
/// of every state over `[0, n] x [0, n]`, verified by grid sampling; the
/// Monte Carlo thinning sampler uses it as the dominating rate.
#[derive(Debug, Clone)]
pub struct IntensitySpec {
    pub sigma: u32,
    pub entries: Vec<(State, State, Rate)>,
    pub sup_bound: f64,
    /// dense (from, to) lookup, row-major over extended indices
    table: Vec<Option<usize>>,
}

impl IntensitySpec {
    pub fn new(
        sigma: u32,
        entries: Vec<(State, State, Rate)>,
        sup_bound: f64,
    ) -> Result<Self, ModelError> {
        if sigma == 0 {
            return Err(ModelError::InvalidSpec("sigma must be at least 1".into()));
        }
        if !(sup_bound.is_finite() && sup_bound >= 0.0) {
            return Err(ModelError::InvalidSpec(
                "sup_bound must be finite and nonnegative".into(),
            ));
        }
        let d = (2 * sigma + 1) as usize;
        let mut table = vec![None; d * d];
        for (idx, (from, to, _)) in entries.iter().enumerate() {
            for s in [from, to] {
                if !s.is_extended(sigma) {
                    return Err(ModelError::InvalidSpec(format!(
                        "state {s} is not in the extended alphabet for sigma={sigma}"
                    )));
                }
            }
            if from == to {
                return Err(ModelError::InvalidSpec(format!(
                    "self-transition {from} -> {to} is not allowed"
                )));
            }
            let slot = &mut table[from.ext_index(sigma) * d + to.ext_index(sigma)];
            if slot.is_some() {
                return Err(ModelError::InvalidSpec(format!(
                    "duplicate intensity entry {from} -> {to}"
                )));
            }
            *slot = Some(idx);
        }
        Ok(IntensitySpec {
            sigma,
            entries,
            sup_bound,
            table,
        })
    }

    #[inline]
    pub fn rate_entry(&self, from: usize, to: usize) -> Option<&Rate> {
        let d = (2 * self.sigma + 1) as usize;
        self.table[from * d + to].map(|i| &self.entries[i].2)
    }

    /// Rate from extended index `from` to `to` at calendar time `t` with
    /// duration `u` on the clock owned by `from`.
    #[inline]
    pub fn rate(&self, from: usize, to: usize, t: f64, u: f64) -> f64 {
        self.rate_entry(from, to).map_or(0.0, |r| r.eval(t, u))
    }

    /// Total exit rate of extended index `from`.
    pub fn total_exit(&self, from: usize, t: f64, u: f64) -> f64 {
        let d = (2 * self.sigma + 1) as usize;
        (0..d).map(|to| self.rate(from, to, t, u)).sum()
    }

    /// True when every pre-retirement pair reads the calendar clock only.
    pub fn pre_retirement_markov(&self) -> bool {
        !self
            .entries
            .iter()
            .any(|(from, _, r)| matches!(from, State::Pre(_)) && r.is_duration_dependent())
    }

    /// True when every retired-block pair reads the calendar clock only.
    pub fn retired_block_markov(&self) -> bool {
        !self
            .entries
            .iter()
            .any(|(from, _, r)| matches!(from, State::Retired(_)) && r.is_duration_dependent())
    }

    /// Lumped forward intensity out of pre-retirement state `j` into a lumped
    /// target (`p` sums the whole retired block). Only defined for Markov
    /// pre-retirement rows.
    pub fn lumped_rate_from_pre(&self, j: u32, to: State, t: f64) -> f64 {
        let from = State::Pre(j).ext_index(self.sigma);
        match to {
            State::Pensioner => (1..=self.sigma)
                .map(|m| self.rate(from, State::Retired(m).ext_index(self.sigma), t, 0.0))
                .sum(),
            State::Pre(k) => self.rate(from, State::Pre(k).ext_index(self.sigma), t, 0.0),
            State::Dead => self.rate(from, State::Dead.ext_index(self.sigma), t, 0.0),
            State::Retired(_) => panic!("use extended indices for retired targets"),
        }
    }
}

/// One discrete payment: `amount` due at `time` to an insured occupying
/// lumped state `state` just before `time`.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub time: f64,
    pub state: State,
    pub amount: f64,
}

/// Payments on the lumped chain: sojourn rates, discrete payments, and
/// transition payments. Everything is deterministic and vanishes after the
/// horizon.
#[derive(Debug, Clone)]
pub struct PaymentSpec {
    pub sigma: u32,
    pub horizon: f64,
    sojourn: Vec<Func>,
    transition: Vec<Vec<Func>>,
    pub atoms: Vec<Atom>,
}

impl PaymentSpec {
    pub fn new(
        sigma: u32,
        horizon: f64,
        sojourn: Vec<(State, Func)>,
        transition: Vec<(State, State, Func)>,
        mut atoms: Vec<Atom>,
    ) -> Result<Self, ModelError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(ModelError::InvalidSpec(
                "horizon must be finite and positive".into(),
            ));
        }
        let l = sigma as usize + 2;
        let mut soj = vec![Func::Zero; l];
        for (s, f) in sojourn {
            if !s.is_lumped(sigma) {
                return Err(ModelError::InvalidSpec(format!(
                    "sojourn payment on non-lumped state {s}"
                )));
            }
            soj[s.lumped_index(sigma)] = f;
        }
        let mut tra = vec![vec![Func::Zero; l]; l];
        for (from, to, f) in transition {
            if !from.is_lumped(sigma) || !to.is_lumped(sigma) || from == to {
                return Err(ModelError::InvalidSpec(format!(
                    "transition payment on invalid lumped pair {from} -> {to}"
                )));
            }
            tra[from.lumped_index(sigma)][to.lumped_index(sigma)] = f;
        }
        atoms.sort_by(|a, b| a.time.total_cmp(&b.time));
        for w in atoms.windows(2) {
            if w[0].time == w[1].time && w[0].state == w[1].state {
                return Err(ModelError::InvalidSpec(format!(
                    "duplicate discrete payment at t={} in state {}",
                    w[0].time, w[0].state
                )));
            }
        }
        for a in &atoms {
            if !(0.0 <= a.time && a.time <= horizon) {
                return Err(ModelError::InvalidSpec(format!(
                    "discrete payment time {} outside [0, horizon]",
                    a.time
                )));
            }
            if !a.state.is_lumped(sigma) {
                return Err(ModelError::InvalidSpec(format!(
                    "discrete payment on non-lumped state {}",
                    a.state
                )));
            }
        }
        Ok(PaymentSpec {
            sigma,
            horizon,
            sojourn: soj,
            transition: tra,
            atoms,
        })
    }

    pub fn zero(sigma: u32, horizon: f64) -> PaymentSpec {
        PaymentSpec::new(sigma, horizon, vec![], vec![], vec![]).unwrap()
    }

    /// Sojourn payment rate in lumped state `s` at time `t`; zero after the
    /// horizon.
    #[inline]
    pub fn sojourn_rate(&self, s: State, t: f64) -> f64 {
        if t > self.horizon {
            return 0.0;
        }
        self.sojourn[s.lump().lumped_index(self.sigma)].eval(t)
    }

    /// Transition payment for a lumped jump `from -> to` at time `t`.
    #[inline]
    pub fn transition_payment(&self, from: State, to: State, t: f64) -> f64 {
        if t > self.horizon {
            return 0.0;
        }
        let (f, g) = (from.lump(), to.lump());
        if f == g {
            return 0.0;
        }
        self.transition[f.lumped_index(self.sigma)][g.lumped_index(self.sigma)].eval(t)
    }

    /// Discrete payment amount due at exactly `t` in lumped state `s`.
    pub fn atom_amount(&self, s: State, t: f64) -> f64 {
        let s = s.lump();
        self.atoms
            .iter()
            .filter(|a| a.time == t && a.state == s)
            .map(|a| a.amount)
            .sum()
    }

    pub fn atoms_in_state(&self, s: State) -> impl Iterator<Item = &Atom> {
        let s = s.lump();
        self.atoms.iter().filter(move |a| a.state == s)
    }

    pub fn is_zero(&self) -> bool {
        self.sojourn.iter().all(Func::is_zero)
            && self.transition.iter().flatten().all(Func::is_zero)
            && self.atoms.is_empty()
    }
}

/// Deterministic bank account with continuous paths.
///
/// `kappa(t) = exp(integral of the short rate over [0, t])`, so `kappa(0)=1`
/// and the curve is bounded away from zero on compacts by construction. The
/// short rate is either constant or a piecewise-linear table, which keeps
/// `kappa` available in closed form.
#[derive(Debug, Clone)]
pub enum DiscountCurve {
    ConstantRate(f64),
    ShortRateTable(PwLinear),
}

impl DiscountCurve {
    pub fn short_rate(&self, t: f64) -> f64 {
        match self {
            DiscountCurve::ConstantRate(r) => *r,
            DiscountCurve::ShortRateTable(p) => p.eval(t),
        }
    }

    pub fn kappa(&self, t: f64) -> f64 {
        match self {
            DiscountCurve::ConstantRate(r) => (r * t).exp(),
            DiscountCurve::ShortRateTable(p) => p.integral(0.0, t).exp(),
        }
    }

    /// Discount function `v(t) = 1 / kappa(t)`.
    pub fn v(&self, t: f64) -> f64 {
        1.0 / self.kappa(t)
    }
}

/// Discount factor `kappa(t)/kappa(s)` for `0 <= t <= s <= horizon`.
pub fn discount_factor(
    t: f64,
    s: f64,
    curve: &DiscountCurve,
    horizon: f64,
) -> Result<f64, ModelError> {
    if s > horizon || t > s || t < 0.0 {
        return Err(ModelError::OutOfHorizon(if s > horizon { s } else { t }));
    }
    Ok(match curve {
        DiscountCurve::ConstantRate(r) => (-r * (s - t)).exp(),
        DiscountCurve::ShortRateTable(p) => (-p.integral(t, s)).exp(),
    })
}

/// Initial distribution over pre-retirement states.
#[derive(Debug, Clone)]
pub struct InitialLaw {
    pub weights: Vec<(State, f64)>,
}

impl InitialLaw {
    pub fn state(s: State) -> InitialLaw {
        InitialLaw {
            weights: vec![(s, 1.0)],
        }
    }
}

impl Default for InitialLaw {
    fn default() -> Self {
        InitialLaw::state(State::Pre(1))
    }
}

/// Number of `(t, u)` samples per intensity entry used when verifying the
/// declared bound and the clock flags.
pub const VALIDATION_SAMPLES_PER_PAIR: usize = 10_000;

/// The full model: extended-chain intensities, lumped payments, discounting,
/// and the initial law. Immutable once validated; rate evaluation is pure.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub sigma: u32,
    pub intensities: IntensitySpec,
    pub payments: PaymentSpec,
    pub discount: DiscountCurve,
    pub initial: InitialLaw,
    pub horizon: f64,
}

impl ModelSpec {
    pub fn n_ext(&self) -> usize {
        (2 * self.sigma + 1) as usize
    }

    /// Validate structural constraints, the declared intensity bound, and the
    /// discount curve. Returns the spec unchanged on success.
    ///
    /// The bound and the sign of every rate are verified on a sample grid
    /// (`VALIDATION_SAMPLES_PER_PAIR` points per entry); a declared
    /// calendar-clock entry must not vary with the sampled duration.
    pub fn validate(self) -> Result<ModelSpec, ModelError> {
        let sigma = self.sigma;
        if self.payments.sigma != sigma || self.intensities.sigma != sigma {
            return Err(ModelError::InvalidSpec(
                "sigma mismatch between intensities and payments".into(),
            ));
        }
        if (self.payments.horizon - self.horizon).abs() > 1e-12 * self.horizon.max(1.0) {
            return Err(ModelError::InvalidSpec(
                "payment horizon differs from model horizon".into(),
            ));
        }
        // structural zeros
        for (from, to, rate) in &self.intensities.entries {
            let forbidden = match (from, to) {
                (State::Retired(_), State::Pre(_)) => Some("no return from retirement"),
                (State::Dead, _) => Some("dead is absorbing"),
                _ => None,
            };
            if let Some(reason) = forbidden {
                if !rate.is_zero() {
                    return Err(ModelError::StructuralViolation {
                        from: from.label(sigma),
                        to: to.label(sigma),
                        reason: reason.into(),
                    });
                }
            }
        }
        // initial law: pre-retirement states, weights normalized
        let mut total = 0.0;
        for (s, w) in &self.initial.weights {
            if !matches!(s, State::Pre(i) if *i >= 1 && *i <= sigma) {
                return Err(ModelError::InvalidSpec(format!(
                    "initial state {s} is not a pre-retirement state"
                )));
            }
            if !(w.is_finite() && *w >= 0.0) {
                return Err(ModelError::InvalidSpec("initial weights must be >= 0".into()));
            }
            total += w;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(ModelError::InvalidSpec(format!(
                "initial weights sum to {total}, expected 1"
            )));
        }
        // sampled checks: nonnegative rates, clock flags, total exit below bound
        let n = self.horizon;
        let side = (VALIDATION_SAMPLES_PER_PAIR as f64).sqrt().ceil() as usize;
        let step = n / (side as f64 - 1.0).max(1.0);
        for (from, _, rate) in &self.intensities.entries {
            for it in 0..side {
                let t = (it as f64) * step;
                for iu in 0..side {
                    let u = (iu as f64) * step;
                    let v = rate.eval(t, u.min(t));
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(ModelError::InvalidSpec(format!(
                            "rate out of {} is negative or non-finite at (t={t}, u={u})",
                            from.label(sigma)
                        )));
                    }
                }
            }
        }
        for from in extended_states(sigma) {
            if from == State::Dead {
                continue;
            }
            let fi = from.ext_index(sigma);
            for it in 0..side {
                let t = (it as f64) * step;
                for iu in 0..=it {
                    let u = (iu as f64) * step;
                    let total = self.intensities.total_exit(fi, t, u);
                    if total > self.intensities.sup_bound * (1.0 + 1e-12) {
                        return Err(ModelError::UnboundedIntensity {
                            state: from.label(sigma),
                            t,
                            u,
                            found: total,
                            bound: self.intensities.sup_bound,
                        });
                    }
                }
            }
        }
        // discount curve: kappa(0)=1, positive and finite on samples
        let k0 = self.discount.kappa(0.0);
        if (k0 - 1.0).abs() > 1e-12 {
            return Err(ModelError::BadDiscount(format!("kappa(0) = {k0}, expected 1")));
        }
        for it in 0..=256 {
            let t = n * (it as f64) / 256.0;
            let k = self.discount.kappa(t);
            if !(k.is_finite() && k > 0.0) {
                return Err(ModelError::BadDiscount(format!(
                    "kappa({t}) = {k} is not strictly positive"
                )));
            }
        }
        Ok(self)
    }
}
