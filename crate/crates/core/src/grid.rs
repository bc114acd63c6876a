//! Uniform time grid and its internal refinements.
//!
//! Public tables live on the node grid (step `h`). Solvers tabulate
//! intermediate curves on the half grid (step `h/2`) and the quarter grid
//! (step `h/4`) so that every Runge-Kutta stage time is a tabulated point;
//! nothing is ever interpolated inside a solver.

use crate::model::PaymentSpec;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("bad grid: {0}")]
    BadStep(String),
    #[error("grid misaligned: discrete payment at t={0} is not a grid node for step {1}")]
    Misaligned(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    n: f64,
    h: f64,
    m: usize,
}

impl TimeGrid {
    pub fn new(n: f64, h: f64) -> Result<TimeGrid, GridError> {
        if !(h > 0.0 && h.is_finite() && n > 0.0 && n.is_finite()) {
            return Err(GridError::BadStep(format!("n={n}, h={h}")));
        }
        let m = (n / h).round();
        if m < 1.0 || (m * h - n).abs() > 1e-12 * n.max(1.0) {
            return Err(GridError::BadStep(format!(
                "step {h} does not divide the horizon {n}"
            )));
        }
        Ok(TimeGrid { n, h, m: m as usize })
    }

    /// Grid for a model: additionally requires every discrete payment time to
    /// sit on a node.
    pub fn for_payments(n: f64, h: f64, payments: &PaymentSpec) -> Result<TimeGrid, GridError> {
        let grid = TimeGrid::new(n, h)?;
        for atom in &payments.atoms {
            let i = (atom.time / h).round();
            if (i * h - atom.time).abs() > 1e-9 * n.max(1.0) {
                return Err(GridError::Misaligned(atom.time, h));
            }
        }
        Ok(grid)
    }

    #[inline]
    pub fn n(&self) -> f64 {
        self.n
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Number of `h`-intervals; nodes are `0..=m`.
    #[inline]
    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        debug_assert!(i <= self.m);
        if i == self.m {
            self.n
        } else {
            i as f64 * self.h
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.m).map(move |i| self.node(i))
    }

    /// Index of half-grid points `0..=2m`.
    #[inline]
    pub fn half_count(&self) -> usize {
        2 * self.m + 1
    }

    #[inline]
    pub fn half_time(&self, j: usize) -> f64 {
        debug_assert!(j <= 2 * self.m);
        if j == 2 * self.m {
            self.n
        } else {
            j as f64 * self.h / 2.0
        }
    }

    /// Index of quarter-grid points `0..=4m`.
    #[inline]
    pub fn quarter_count(&self) -> usize {
        4 * self.m + 1
    }

    #[inline]
    pub fn quarter_time(&self, q: usize) -> f64 {
        debug_assert!(q <= 4 * self.m);
        if q == 4 * self.m {
            self.n
        } else {
            q as f64 * self.h / 4.0
        }
    }

    /// Node index of a time that is expected to sit on the node grid.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let i = (t / self.h).round();
        if i >= 0.0 && i <= self.m as f64 && (i * self.h - t).abs() <= 1e-9 * self.n.max(1.0) {
            Some(i as usize)
        } else {
            None
        }
    }

    /// Half-grid index of a time expected on the half grid.
    pub fn half_index(&self, t: f64) -> Option<usize> {
        let j = (2.0 * t / self.h).round();
        if j >= 0.0
            && j <= 2.0 * self.m as f64
            && (j * self.h / 2.0 - t).abs() <= 1e-9 * self.n.max(1.0)
        {
            Some(j as usize)
        } else {
            None
        }
    }

    /// Nearest half-grid index to an arbitrary time in `[0, n]`.
    pub fn nearest_half_index(&self, t: f64) -> usize {
        let j = (2.0 * t / self.h).round();
        (j.max(0.0) as usize).min(2 * self.m)
    }

    /// Quarter index of a grid atom time (atoms are node-aligned).
    pub fn quarter_index_of_node(&self, i: usize) -> usize {
        4 * i
    }
}

/// A curve tabulated on the half grid (`2m+1` values).
#[derive(Debug, Clone, PartialEq)]
pub struct HalfTab {
    pub values: Vec<f64>,
}

impl HalfTab {
    pub fn zeros(grid: &TimeGrid) -> HalfTab {
        HalfTab {
            values: vec![0.0; grid.half_count()],
        }
    }

    #[inline]
    pub fn at_half(&self, j: usize) -> f64 {
        self.values[j]
    }

    #[inline]
    pub fn at_node(&self, i: usize) -> f64 {
        self.values[2 * i]
    }

    /// Value at a quarter index that must fall on the half grid.
    #[inline]
    pub fn at_quarter(&self, q: usize) -> f64 {
        debug_assert!(q % 2 == 0, "half-grid table read off the half grid");
        self.values[q / 2]
    }

    pub fn node_values(&self) -> Vec<f64> {
        self.values.iter().step_by(2).copied().collect()
    }
}

/// A curve tabulated on the quarter grid (`4m+1` values).
#[derive(Debug, Clone, PartialEq)]
pub struct QuarterTab {
    pub values: Vec<f64>,
}

impl QuarterTab {
    pub fn zeros(grid: &TimeGrid) -> QuarterTab {
        QuarterTab {
            values: vec![0.0; grid.quarter_count()],
        }
    }

    #[inline]
    pub fn at_quarter(&self, q: usize) -> f64 {
        self.values[q]
    }

    #[inline]
    pub fn at_half(&self, j: usize) -> f64 {
        self.values[2 * j]
    }

    #[inline]
    pub fn at_node(&self, i: usize) -> f64 {
        self.values[4 * i]
    }
}
