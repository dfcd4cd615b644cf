//! Carathéodory recombination: reduces an N-point convex measure to at most
//! n points while preserving n-1 test-function moments and the total mass.
//!
//! The reduction runs in halving rounds: the active points are grouped into
//! ~2n blocks, the block moment matrix is reduced by repeated null-space
//! eliminations (one O(n^3) factorisation per round, O(n^2) updates per
//! elimination), and surviving blocks recurse. Cost is
//! O(C_phi N + n^3 log(N / n)).
//!
//! Each elimination can move along either sign of the null direction. When
//! an objective vector is supplied, the direction that does not increase the
//! weighted objective is preferred, so the returned rule satisfies
//! `rule(g) <= measure(g)` for that function; select_batch passes the
//! Nyström residual here to certify its quadrature error bound.

use nalgebra::{DMatrix, DVector};

use crate::domain::EmpiricalMeasure;
use crate::error::{Result, SoberError};

use super::QuadratureRule;

/// Relative pivot tolerance for the null-space elimination.
const PIVOT_TOL: f64 = 1e-12;

/// Reduces `measure` to at most `n` support points whose weighted
/// test-function sums match the measure's.
pub fn recombination(
    measure: &EmpiricalMeasure,
    moments: &DMatrix<f64>,
    n: usize,
) -> Result<QuadratureRule> {
    recombination_with_objective(measure, moments, n, None)
}

/// [`recombination`] with an optional objective whose weighted sum must not
/// increase during the reduction.
pub fn recombination_with_objective(
    measure: &EmpiricalMeasure,
    moments: &DMatrix<f64>,
    n: usize,
    objective: Option<&DVector<f64>>,
) -> Result<QuadratureRule> {
    let big_n = measure.len();
    if n < 2 {
        return Err(SoberError::InvalidArgument(
            "recombination needs n >= 2".into(),
        ));
    }
    if big_n < n {
        return Err(SoberError::InvalidArgument(format!(
            "recombination needs at least n = {n} candidates, got {big_n}"
        )));
    }
    if moments.nrows() != big_n {
        return Err(SoberError::DimensionMismatch {
            context: "moment rows vs measure size",
            expected: big_n,
            got: moments.nrows(),
        });
    }
    if moments.ncols() + 1 > n {
        return Err(SoberError::InvalidArgument(format!(
            "{} test functions exceed the n - 1 = {} limit",
            moments.ncols(),
            n - 1
        )));
    }
    if let Some(g) = objective {
        if g.len() != big_n {
            return Err(SoberError::DimensionMismatch {
                context: "objective length vs measure size",
                expected: big_n,
                got: g.len(),
            });
        }
    }

    let k = moments.ncols();
    // Active support: indices into the measure with strictly positive weight.
    let mut active: Vec<usize> = (0..big_n).filter(|&i| measure.weights()[i] > 0.0).collect();
    if active.is_empty() {
        return Err(SoberError::InvalidArgument(
            "measure has no positive weights".into(),
        ));
    }
    let mut weight: Vec<f64> = active.iter().map(|&i| measure.weights()[i]).collect();

    while active.len() > n {
        let q = (2 * n).min(active.len());
        // Partition the active points into q nearly equal blocks.
        let bounds: Vec<usize> = (0..=q).map(|b| b * active.len() / q).collect();
        let mut cols = DMatrix::zeros(k + 1, q);
        let mut gvals = vec![0.0; q];
        for b in 0..q {
            for slot in bounds[b]..bounds[b + 1] {
                let (idx, w) = (active[slot], weight[slot]);
                for c in 0..k {
                    cols[(c, b)] += w * moments[(idx, c)];
                }
                cols[(k, b)] += w;
                if let Some(g) = objective {
                    gvals[b] += w * g[idx];
                }
            }
        }
        let theta = eliminate(&cols, &gvals);

        let mut next_active = Vec::with_capacity(active.len() / 2 + n);
        let mut next_weight = Vec::with_capacity(active.len() / 2 + n);
        for b in 0..q {
            if theta[b] <= 0.0 {
                continue;
            }
            for slot in bounds[b]..bounds[b + 1] {
                next_active.push(active[slot]);
                next_weight.push(weight[slot] * theta[b]);
            }
        }
        active = next_active;
        weight = next_weight;
    }

    // Final elimination on singleton blocks until the support is affinely
    // independent in moment space.
    let q = active.len();
    let mut cols = DMatrix::zeros(k + 1, q);
    let mut gvals = vec![0.0; q];
    for (b, (&idx, &w)) in active.iter().zip(weight.iter()).enumerate() {
        for c in 0..k {
            cols[(c, b)] = w * moments[(idx, c)];
        }
        cols[(k, b)] = w;
        if let Some(g) = objective {
            gvals[b] = w * g[idx];
        }
    }
    let theta = eliminate(&cols, &gvals);

    let mut indices = Vec::new();
    let mut weights = Vec::new();
    for b in 0..q {
        if theta[b] > 0.0 {
            indices.push(active[b]);
            weights.push(weight[b] * theta[b]);
        }
    }
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    QuadratureRule::from_measure(measure, indices, weights, 0.0)
}

/// Scales the columns of `cols` by factors `theta >= 0`, repeatedly removing
/// null directions until the surviving columns are linearly independent.
/// `sum_b theta_b * cols[:, b]` is invariant; `sum_b theta_b * gvals[b]`
/// never increases.
fn eliminate(cols: &DMatrix<f64>, gvals: &[f64]) -> Vec<f64> {
    let q = cols.ncols();
    let mut theta = vec![1.0f64; q];
    let mut alive: Vec<bool> = (0..q).map(|b| cols.column(b).amax() > 0.0).collect();
    // Columns that are exactly zero carry no moment mass; drop them outright.
    for (b, a) in alive.iter().enumerate() {
        if !a {
            theta[b] = 0.0;
        }
    }

    loop {
        let mut basis = null_space(cols, &alive);
        if basis.is_empty() {
            break;
        }
        let mut progressed = false;
        while let Some(mut v) = basis.pop() {
            for b in 0..q {
                if !alive[b] {
                    v[b] = 0.0;
                }
            }
            let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if scale < 1e-300 {
                continue;
            }
            for x in v.iter_mut() {
                *x /= scale;
            }
            // Prefer the direction that does not increase the objective.
            let gdot: f64 = v.iter().zip(gvals).map(|(vi, gi)| vi * gi).sum();
            let mut dir: Vec<f64> = if gdot >= 0.0 {
                v.clone()
            } else {
                v.iter().map(|x| -x).collect()
            };
            if !dir
                .iter()
                .enumerate()
                .any(|(b, d)| alive[b] && *d > PIVOT_TOL)
            {
                dir = dir.iter().map(|x| -x).collect();
                if !dir
                    .iter()
                    .enumerate()
                    .any(|(b, d)| alive[b] && *d > PIVOT_TOL)
                {
                    continue;
                }
            }
            // Ratio test: the block whose weight reaches zero first; ties
            // broken towards the lowest index.
            let mut t = f64::INFINITY;
            let mut leaving = usize::MAX;
            for b in 0..q {
                if alive[b] && dir[b] > PIVOT_TOL {
                    let ratio = theta[b] / dir[b];
                    if ratio < t {
                        t = ratio;
                        leaving = b;
                    }
                }
            }
            if leaving == usize::MAX {
                continue;
            }
            for b in 0..q {
                if alive[b] {
                    theta[b] -= t * dir[b];
                    if theta[b] < 0.0 {
                        theta[b] = 0.0;
                    }
                }
            }
            theta[leaving] = 0.0;
            alive[leaving] = false;
            progressed = true;
            // Keep the remaining null vectors inside the reduced column space.
            let pivot = dir[leaving];
            for other in basis.iter_mut() {
                let factor = other[leaving] / pivot;
                if factor != 0.0 {
                    for b in 0..q {
                        other[b] -= factor * dir[b];
                    }
                    other[leaving] = 0.0;
                }
            }
        }
        if !progressed {
            break;
        }
    }
    theta
}

/// A basis of the null space of the alive columns of `cols`, via Gaussian
/// elimination with partial pivoting.
fn null_space(cols: &DMatrix<f64>, alive: &[bool]) -> Vec<Vec<f64>> {
    let rows = cols.nrows();
    let live: Vec<usize> = (0..cols.ncols()).filter(|&b| alive[b]).collect();
    let q = live.len();
    if q == 0 {
        return Vec::new();
    }
    let mut a = DMatrix::zeros(rows, q);
    for (j, &b) in live.iter().enumerate() {
        a.set_column(j, &cols.column(b));
    }
    let scale = a.amax().max(1.0);

    let mut pivot_col_of_row = vec![usize::MAX; rows];
    let mut is_pivot_col = vec![false; q];
    let mut rank = 0;
    for col in 0..q {
        if rank >= rows {
            break;
        }
        // Partial pivot within this column.
        let mut best = rank;
        for r in (rank + 1)..rows {
            if a[(r, col)].abs() > a[(best, col)].abs() {
                best = r;
            }
        }
        if a[(best, col)].abs() <= PIVOT_TOL * scale {
            continue;
        }
        a.swap_rows(rank, best);
        let p = a[(rank, col)];
        for r in 0..rows {
            if r != rank && a[(r, col)] != 0.0 {
                let f = a[(r, col)] / p;
                for cc in col..q {
                    a[(r, cc)] -= f * a[(rank, cc)];
                }
                a[(r, col)] = 0.0;
            }
        }
        pivot_col_of_row[rank] = col;
        is_pivot_col[col] = true;
        rank += 1;
    }

    let mut basis = Vec::with_capacity(q.saturating_sub(rank));
    for free in 0..q {
        if is_pivot_col[free] {
            continue;
        }
        let mut v = vec![0.0; cols.ncols()];
        v[live[free]] = 1.0;
        for r in 0..rank {
            let pc = pivot_col_of_row[r];
            let coeff = a[(r, free)] / a[(r, pc)];
            v[live[pc]] = -coeff;
        }
        basis.push(v);
    }
    basis
}
