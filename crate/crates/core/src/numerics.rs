//! Shared numerical kernels: fixed-step Runge-Kutta steppers, the backward
//! walker with discrete-payment jump conditions, deterministic summation,
//! and a small dense linear solver.

/// Order-fixed pairwise summation; deterministic for a fixed slice regardless
/// of how the values were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        len => {
            let mid = len / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Composite trapezoid over uniformly spaced values.
pub fn trapezoid_uniform(values: &[f64], step: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let interior: f64 = values[1..values.len() - 1].iter().sum();
    step * (0.5 * values[0] + interior + 0.5 * values[values.len() - 1])
}

/// One classical RK4 step of size `dt` (may be negative for backward
/// integration) for a small in-place vector system `y' = f(t, y)`.
///
/// `f(t, y, dy)` writes the derivative into `dy`. `scratch` must hold
/// `4 * dim` values.
pub fn rk4_step_vec<F>(t: f64, dt: f64, y: &mut [f64], mut f: F, scratch: &mut [f64])
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let dim = y.len();
    let (k1, rest) = scratch.split_at_mut(dim);
    let (k2, rest) = rest.split_at_mut(dim);
    let (k3, rest) = rest.split_at_mut(dim);
    let (tmp, _) = rest.split_at_mut(dim);

    f(t, y, k1);
    for i in 0..dim {
        tmp[i] = y[i] + 0.5 * dt * k1[i];
    }
    f(t + 0.5 * dt, tmp, k2);
    for i in 0..dim {
        tmp[i] = y[i] + 0.5 * dt * k2[i];
    }
    f(t + 0.5 * dt, tmp, k3);
    for i in 0..dim {
        tmp[i] = y[i] + dt * k3[i];
    }
    // fold k1..k3 into y, then reuse the k2 buffer for the last stage
    for i in 0..dim {
        y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i]);
    }
    f(t + dt, tmp, k2);
    for i in 0..dim {
        y[i] += dt / 6.0 * k2[i];
    }
}

/// One RK4 step for a scalar linear ODE `y' = a(t) y + c(t)` where the
/// coefficients are supplied at quarter-grid indices. `q` is the quarter
/// index of the current point and `dq` the signed step in quarter units
/// (stages then fall on integer quarter indices when `dq` is even).
///
/// `top_left` marks the stage at `q` itself as sitting on the left branch of
/// the coefficients: when a discrete payment falls exactly at `q`, the drift
/// of the interval below reads the left limits of any coupled reserve
/// curves there.
pub fn rk4_step_scalar_linear<C>(
    q: usize,
    dq: i64,
    h_quarter: f64,
    y: f64,
    top_left: bool,
    coeff: C,
) -> f64
where
    C: Fn(usize, bool) -> (f64, f64),
{
    let dt = dq as f64 * h_quarter;
    let qi = |offset: i64| -> usize { (q as i64 + offset) as usize };
    let (a0, c0) = coeff(qi(0), top_left);
    let (am, cm) = coeff(qi(dq / 2), false);
    let (a1, c1) = coeff(qi(dq), false);
    let k1 = a0 * y + c0;
    let k2 = am * (y + 0.5 * dt * k1) + cm;
    let k3 = am * (y + 0.5 * dt * k2) + cm;
    let k4 = a1 * (y + dt * k3) + c1;
    y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Backward walk on the quarter grid from `start_q` down to `end_q` for a
/// scalar linear ODE with jump conditions at discrete payments.
///
/// * `start_q`, `end_q`, and every boundary index are even (half-grid
///   points); boundaries additionally sit on full nodes.
/// * Steps are `h` (4 quarter units); a segment of length `2 mod 4` takes its
///   leftover `h/2` step at its lower end, so all visited points and stage
///   times stay on the quarter grid.
/// * `boundaries` are `(quarter_index, own_jump_amount)` for every discrete
///   payment date of the model (any state), sorted ascending. Crossing one
///   applies the jump condition `y(t-) = y(t) + amount` and marks the stages
///   at that index as left-branch for the coefficients (coupled reserve
///   curves jump there even when the own amount is zero).
/// * `visit(q, y)` is called at every visited quarter point with the cadlag
///   value, from `start_q` downward, including both endpoints;
///   `visit_left(q, y_left)` reports the post-jump (left-limit) value where
///   the own amount is nonzero.
pub fn backward_walk_scalar<C, V, W>(
    start_q: usize,
    end_q: usize,
    h_quarter: f64,
    boundaries: &[(usize, f64)],
    coeff: C,
    mut visit: V,
    mut visit_left: W,
    terminal: f64,
) where
    C: Fn(usize, bool) -> (f64, f64),
    V: FnMut(usize, f64),
    W: FnMut(usize, f64),
{
    debug_assert!(start_q >= end_q);
    debug_assert!(start_q % 2 == 0 && end_q % 2 == 0);
    let mut y = terminal;
    let mut q = start_q;
    visit(q, y);
    let mut segments: Vec<(usize, f64, bool)> = boundaries
        .iter()
        .filter(|(bq, _)| *bq >= end_q && *bq <= start_q)
        .map(|(bq, amount)| (*bq, *amount, true))
        .collect();
    segments.sort_by_key(|(bq, _, _)| std::cmp::Reverse(*bq));
    if segments.last().map(|(bq, _, _)| *bq) != Some(end_q) {
        segments.push((end_q, 0.0, false));
    }
    let mut top_left = false; // stages at the current top sit on the left branch
    for (boundary, amount, is_payment) in segments {
        let mut rem = q - boundary;
        debug_assert!(rem % 2 == 0);
        while rem > 2 {
            y = rk4_step_scalar_linear(q, -4, h_quarter, y, top_left, &coeff);
            top_left = false;
            q -= 4;
            rem -= 4;
            visit(q, y);
        }
        if rem == 2 {
            y = rk4_step_scalar_linear(q, -2, h_quarter, y, top_left, &coeff);
            top_left = false;
            q -= 2;
            visit(q, y);
        }
        if is_payment && q > end_q {
            if amount != 0.0 {
                y += amount;
                visit_left(q, y);
            }
            top_left = true;
        }
    }
}

/// Backward walk for a coupled linear system on the quarter grid; same
/// stepping and payment-boundary contract as [`backward_walk_scalar`], with
/// vector jump amounts. `deriv(q, left_branch, y, dy)` evaluates the drift
/// at quarter index `q`.
#[allow(clippy::too_many_arguments)]
pub fn backward_walk_vec<F, V, W>(
    start_q: usize,
    end_q: usize,
    h_quarter: f64,
    boundaries: &[(usize, Vec<f64>)],
    mut deriv: F,
    mut visit: V,
    mut visit_left: W,
    terminal: Vec<f64>,
) where
    F: FnMut(usize, bool, &[f64], &mut [f64]),
    V: FnMut(usize, &[f64]),
    W: FnMut(usize, &[f64]),
{
    debug_assert!(start_q % 2 == 0 && end_q % 2 == 0);
    let dim = terminal.len();
    let mut y = terminal;
    let mut scratch = vec![0.0; 4 * dim];
    let mut q = start_q;
    visit(q, &y);
    let mut segments: Vec<(usize, Option<&Vec<f64>>)> = boundaries
        .iter()
        .filter(|(bq, _)| *bq >= end_q && *bq <= start_q)
        .map(|(bq, amounts)| (*bq, Some(amounts)))
        .collect();
    segments.sort_by_key(|(bq, _)| std::cmp::Reverse(*bq));
    if segments.last().map(|(bq, _)| *bq) != Some(end_q) {
        segments.push((end_q, None));
    }
    let mut step = |q: usize, dq: i64, top_left: bool, y: &mut Vec<f64>, scratch: &mut Vec<f64>| {
        let dt = dq as f64 * h_quarter;
        let base = q as i64;
        rk4_step_vec(
            0.0,
            1.0,
            y,
            |s, yy, dy| {
                // map the abstract stage time s in {0, 0.5, 1} onto quarter indices
                let offset = (s * dq as f64).round() as i64;
                let qq = (base + offset) as usize;
                deriv(qq, top_left && offset == 0, yy, dy);
                for d in dy.iter_mut() {
                    *d *= dt;
                }
            },
            scratch,
        );
    };
    let mut top_left = false;
    for (boundary, amounts) in segments {
        let mut rem = q - boundary;
        while rem > 2 {
            step(q, -4, top_left, &mut y, &mut scratch);
            top_left = false;
            q -= 4;
            rem -= 4;
            visit(q, &y);
        }
        if rem == 2 {
            step(q, -2, top_left, &mut y, &mut scratch);
            top_left = false;
            q -= 2;
            visit(q, &y);
        }
        if let Some(amounts) = amounts {
            if q > end_q {
                let mut any = false;
                for (yi, a) in y.iter_mut().zip(amounts) {
                    if *a != 0.0 {
                        *yi += a;
                        any = true;
                    }
                }
                if any {
                    visit_left(q, &y);
                }
                top_left = true;
            }
        }
    }
}

/// Solve the small dense system `x A = b` (row-vector convention) in place by
/// Gaussian elimination with partial pivoting. `a` is row-major `dim x dim`.
pub fn solve_row_system(a: &[f64], b: &[f64], dim: usize) -> Vec<f64> {
    // transpose to solve A^T x^T = b^T
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            m[i * dim + j] = a[j * dim + i];
        }
    }
    let mut x = b.to_vec();
    for col in 0..dim {
        let mut piv = col;
        for row in col + 1..dim {
            if m[row * dim + col].abs() > m[piv * dim + col].abs() {
                piv = row;
            }
        }
        if piv != col {
            for j in 0..dim {
                m.swap(col * dim + j, piv * dim + j);
            }
            x.swap(col, piv);
        }
        let d = m[col * dim + col];
        for row in col + 1..dim {
            let f = m[row * dim + col] / d;
            if f != 0.0 {
                for j in col..dim {
                    m[row * dim + j] -= f * m[col * dim + j];
                }
                x[row] -= f * x[col];
            }
        }
    }
    for col in (0..dim).rev() {
        let mut acc = x[col];
        for j in col + 1..dim {
            acc -= m[col * dim + j] * x[j];
        }
        x[col] = acc / m[col * dim + col];
    }
    x
}
