//! Scalar rate/payment functions of one time-like argument.
//!
//! All model inputs (transition intensities, sojourn payment rates,
//! transition payments, short rates) are built from this small family so
//! that evaluation is cheap, `Send + Sync`, and exactly reproducible.

use serde::{Deserialize, Serialize};

/// Piecewise-linear function given by knots `(x, y)` with strictly
/// increasing abscissae. Values are clamped to the end values outside the
/// knot range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwLinear {
    points: Vec<(f64, f64)>,
}

impl PwLinear {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, String> {
        if points.is_empty() {
            return Err("piecewise-linear function needs at least one point".into());
        }
        for w in points.windows(2) {
            if !(w[0].0 < w[1].0) {
                return Err(format!(
                    "piecewise-linear abscissae must be strictly increasing, got {} then {}",
                    w[0].0, w[1].0
                ));
            }
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err("piecewise-linear points must be finite".into());
        }
        Ok(PwLinear { points })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let pts = &self.points;
        if x <= pts[0].0 {
            return pts[0].1;
        }
        if x >= pts[pts.len() - 1].0 {
            return pts[pts.len() - 1].1;
        }
        // partition_point: first knot with abscissa > x
        let hi = pts.partition_point(|(px, _)| *px <= x);
        let (x0, y0) = pts[hi - 1];
        let (x1, y1) = pts[hi];
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    /// Exact integral over `[a, b]` (piecewise-trapezoid on the knots).
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b < a {
            return -self.integral(b, a);
        }
        let mut xs: Vec<f64> = vec![a];
        for (x, _) in &self.points {
            if *x > a && *x < b {
                xs.push(*x);
            }
        }
        xs.push(b);
        let mut acc = 0.0;
        for w in xs.windows(2) {
            acc += 0.5 * (self.eval(w[0]) + self.eval(w[1])) * (w[1] - w[0]);
        }
        acc
    }
}

/// A nonnegative-or-signed scalar function of a single time argument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Func {
    Zero,
    Constant(f64),
    /// `level + coeff * exp(exponent * x)`
    Gompertz {
        level: f64,
        coeff: f64,
        exponent: f64,
    },
    PwLinear(PwLinear),
}

impl Func {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Func::Zero => 0.0,
            Func::Constant(c) => *c,
            Func::Gompertz {
                level,
                coeff,
                exponent,
            } => level + coeff * (exponent * x).exp(),
            Func::PwLinear(p) => p.eval(x),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Func::Zero) || matches!(self, Func::Constant(c) if *c == 0.0)
    }
}

/// Clock driving a time-varying coefficient: calendar time, or the duration
/// clock of the owning state.
///
/// For pre-retirement states the duration clock is the time since entering
/// the current state; for retired health states it is the time since
/// retirement (entry into the retired block), so that the post-retirement
/// sub-chain conditioned on the retirement time stays Markov in calendar
/// time. The Monte Carlo sampler and the analytic solvers share this
/// convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Clock {
    Calendar,
    Duration,
}

/// A transition-rate entry: a scalar function plus the clock it reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub func: Func,
    pub clock: Clock,
}

impl Rate {
    pub fn calendar(func: Func) -> Rate {
        Rate {
            func,
            clock: Clock::Calendar,
        }
    }

    pub fn duration(func: Func) -> Rate {
        Rate {
            func,
            clock: Clock::Duration,
        }
    }

    pub fn zero() -> Rate {
        Rate::calendar(Func::Zero)
    }

    /// Evaluate at calendar time `t` with duration `u` on the owning clock.
    pub fn eval(&self, t: f64, u: f64) -> f64 {
        match self.clock {
            Clock::Calendar => self.func.eval(t),
            Clock::Duration => self.func.eval(u),
        }
    }

    pub fn is_duration_dependent(&self) -> bool {
        self.clock == Clock::Duration && !self.func.is_zero()
    }

    pub fn is_zero(&self) -> bool {
        self.func.is_zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pw_linear_interpolates_and_clamps() {
        let f = PwLinear::new(vec![(0.0, 1.0), (2.0, 3.0), (4.0, 3.0)]).unwrap();
        assert_eq!(f.eval(-1.0), 1.0);
        assert_eq!(f.eval(1.0), 2.0);
        assert_eq!(f.eval(3.0), 3.0);
        assert_eq!(f.eval(9.0), 3.0);
    }

    #[test]
    fn pw_linear_rejects_unsorted() {
        assert!(PwLinear::new(vec![(1.0, 0.0), (1.0, 2.0)]).is_err());
        assert!(PwLinear::new(vec![]).is_err());
    }

    #[test]
    fn pw_linear_exact_integral() {
        let f = PwLinear::new(vec![(0.0, 0.0), (2.0, 2.0)]).unwrap();
        // integral of x over [0,2] = 2, over [1,3] = 1.5 + 2 (clamped value 2 on [2,3])
        assert!((f.integral(0.0, 2.0) - 2.0).abs() < 1e-14);
        assert!((f.integral(1.0, 3.0) - 3.5).abs() < 1e-14);
        assert!((f.integral(3.0, 1.0) + 3.5).abs() < 1e-14);
    }

    #[test]
    fn rate_clock_selects_argument() {
        let r = Rate::duration(Func::PwLinear(
            PwLinear::new(vec![(0.0, 0.01), (40.0, 0.09)]).unwrap(),
        ));
        assert!((r.eval(33.0, 5.0) - 0.02).abs() < 1e-15);
        let c = Rate::calendar(Func::Constant(0.7));
        assert_eq!(c.eval(3.0, 100.0), 0.7);
    }
}
