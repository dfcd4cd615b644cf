//! Dense two-phase primal simplex with bounded variables.
//!
//! Solves `max c^T x` subject to `A x = b`, `0 <= x_j <= u_j` (upper bounds
//! may be infinite). The moment constraints of the quadrature LP arrive as
//! rows with range-bounded slack variables, which keeps the row count at the
//! batch size and makes every basic solution at most that sparse.
//!
//! Pricing is Dantzig by default and switches to Bland's rule after a run of
//! degenerate pivots, which is what makes the iteration provably finite.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SoberError};

const FEAS_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;
/// Consecutive degenerate pivots before Bland's rule engages.
const DEGENERATE_STREAK: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VarStatus {
    Basic,
    AtLower,
    AtUpper,
    /// Artificial pinned at zero after phase 1.
    Fixed,
}

/// A vertex solution of the bounded LP.
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
}

/// Maximises `c^T x` over `A x = b`, `0 <= x <= upper`.
pub fn solve_bounded_lp(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    c: &DVector<f64>,
    upper: &[f64],
) -> Result<LpSolution> {
    let m = a.nrows();
    let n = a.ncols();
    if b.len() != m || c.len() != n || upper.len() != n {
        return Err(SoberError::InvalidArgument("LP dimensions disagree".into()));
    }
    if m == 0 {
        return Err(SoberError::InvalidArgument(
            "LP needs at least one row".into(),
        ));
    }

    // Row scaling, with signs flipped so every right-hand side is >= 0.
    let total = n + m;
    let mut tab = DMatrix::zeros(m, total);
    let mut rhs = DVector::zeros(m);
    for i in 0..m {
        let mut scale = b[i].abs();
        for j in 0..n {
            scale = scale.max(a[(i, j)].abs());
        }
        if scale <= 0.0 {
            scale = 1.0;
        }
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            tab[(i, j)] = sign * a[(i, j)] / scale;
        }
        rhs[i] = sign * b[i] / scale;
        tab[(i, n + i)] = 1.0;
    }

    let mut state = State {
        orig: tab.clone(),
        orig_b: rhs.clone(),
        tab,
        xb: rhs.clone(),
        basis: (0..m).map(|i| n + i).collect(),
        status: {
            let mut s = vec![VarStatus::AtLower; total];
            for i in 0..m {
                s[n + i] = VarStatus::Basic;
            }
            s
        },
        upper: {
            let mut u = upper.to_vec();
            u.resize(n + m, f64::INFINITY);
            u
        },
        n_struct: n,
        iterations: 0,
    };

    // Phase 1: drive the artificial variables to zero.
    let mut phase1 = DVector::zeros(total);
    for j in n..total {
        phase1[j] = -1.0;
    }
    state.optimise(&phase1, true)?;
    state.refactor();
    let infeasibility: f64 = (0..m)
        .filter(|i| state.basis[*i] >= n)
        .map(|i| state.xb[i].max(0.0))
        .sum();
    // The quadrature LPs are feasible by construction (uniform candidate
    // weights satisfy every row), so residual infeasibility here is dense
    // Gauss-Jordan drift; anything beyond this level is a real defect.
    if infeasibility > 1e-6 {
        return Err(SoberError::LpInternal(format!(
            "phase 1 ended with infeasibility {infeasibility:.3e}"
        )));
    }
    state.retire_artificials();

    // Phase 2: the real objective.
    let mut cost = DVector::zeros(total);
    for j in 0..n {
        cost[j] = c[j];
    }
    state.optimise(&cost, false)?;

    let x = state.extract(n);
    let objective = c.dot(&x);
    Ok(LpSolution {
        x,
        objective,
        iterations: state.iterations,
    })
}

struct State {
    /// Row-scaled constraint matrix, never modified after construction.
    orig: DMatrix<f64>,
    orig_b: DVector<f64>,
    tab: DMatrix<f64>,
    xb: DVector<f64>,
    basis: Vec<usize>,
    status: Vec<VarStatus>,
    upper: Vec<f64>,
    n_struct: usize,
    iterations: usize,
}

impl State {
    fn extract(&self, n: usize) -> DVector<f64> {
        let mut x = DVector::zeros(n);
        for j in 0..n {
            x[j] = match self.status[j] {
                VarStatus::AtLower | VarStatus::Fixed => 0.0,
                VarStatus::AtUpper => self.upper[j],
                VarStatus::Basic => 0.0,
            };
        }
        for (i, &bj) in self.basis.iter().enumerate() {
            if bj < n {
                x[bj] = self.xb[i].max(0.0);
            }
        }
        x
    }

    /// Pins every non-basic artificial at zero and pivots basic ones out of
    /// the basis where a structural column is available; rows that stay on an
    /// artificial are redundant and keep it fixed at zero.
    fn retire_artificials(&mut self) {
        let n = self.n_struct;
        let total = self.tab.ncols();
        for j in n..total {
            if self.status[j] != VarStatus::Basic {
                self.status[j] = VarStatus::Fixed;
                self.upper[j] = 0.0;
            }
        }
        for i in 0..self.tab.nrows() {
            if self.basis[i] < n {
                continue;
            }
            let mut pivot_col = None;
            for j in 0..n {
                if self.status[j] != VarStatus::Basic && self.tab[(i, j)].abs() > PIVOT_TOL {
                    pivot_col = Some(j);
                    break;
                }
            }
            if let Some(j) = pivot_col {
                let old = self.basis[i];
                self.pivot(i, j);
                self.status[old] = VarStatus::Fixed;
                self.upper[old] = 0.0;
                self.xb[i] = self.xb[i].max(0.0);
            } else {
                // Redundant row: the artificial stays basic at zero.
                self.upper[self.basis[i]] = 0.0;
            }
        }
    }

    fn optimise(&mut self, cost: &DVector<f64>, phase1: bool) -> Result<()> {
        let total = self.tab.ncols();
        let m = self.tab.nrows();
        let cap = 20_000 + 40 * m;
        let mut degenerate_streak = 0usize;
        let mut since_refactor = 0usize;
        loop {
            self.iterations += 1;
            if self.iterations > cap {
                return Err(SoberError::LpInternal(format!(
                    "iteration limit {cap} exceeded"
                )));
            }
            since_refactor += 1;
            if since_refactor >= 50 {
                self.refactor();
                since_refactor = 0;
            }
            let bland = degenerate_streak >= DEGENERATE_STREAK;

            // Reduced costs y = c_B^T B^-1 A come straight off the tableau.
            let mut cb = DVector::zeros(m);
            for i in 0..m {
                cb[i] = cost[self.basis[i]];
            }
            let mut entering = None;
            let mut best_score = COST_TOL;
            for j in 0..total {
                match self.status[j] {
                    VarStatus::Basic | VarStatus::Fixed => continue,
                    _ => {}
                }
                if phase1 && j >= self.n_struct && self.status[j] != VarStatus::Basic {
                    // Artificials never re-enter.
                    if cost[j] != 0.0 {
                        continue;
                    }
                }
                let mut red = cost[j];
                for i in 0..m {
                    if cb[i] != 0.0 {
                        red -= cb[i] * self.tab[(i, j)];
                    }
                }
                // Profitable directions: increase from lower (red > 0) or
                // decrease from upper (red < 0).
                let score = match self.status[j] {
                    VarStatus::AtLower => red,
                    VarStatus::AtUpper => -red,
                    _ => unreachable!(),
                };
                if score > COST_TOL {
                    if bland {
                        entering = Some((j, red));
                        break;
                    }
                    if score > best_score {
                        best_score = score;
                        entering = Some((j, red));
                    }
                }
            }
            let Some((e, _red)) = entering else {
                return Ok(());
            };

            // Direction: +1 means x_e increases.
            let dir = if self.status[e] == VarStatus::AtLower {
                1.0
            } else {
                -1.0
            };
            // Ratio test: basics hitting either bound, or a bound flip of e.
            let mut t = if self.upper[e].is_finite() {
                self.upper[e]
            } else {
                f64::INFINITY
            };
            let mut leaving: Option<(usize, VarStatus)> = None;
            for i in 0..m {
                let delta = dir * self.tab[(i, e)];
                let bi = self.basis[i];
                // A basic value either falls to its lower bound 0 or rises
                // to a finite upper bound.
                let (ratio, to) = if delta > PIVOT_TOL {
                    ((self.xb[i].max(0.0)) / delta, VarStatus::AtLower)
                } else if delta < -PIVOT_TOL && self.upper[bi].is_finite() {
                    let room = (self.upper[bi] - self.xb[i]).max(0.0);
                    (room / (-delta), VarStatus::AtUpper)
                } else {
                    continue;
                };
                let take = match leaving {
                    None => ratio < t,
                    Some((r, _)) => {
                        ratio < t - FEAS_TOL
                            || (bland && ratio < t + FEAS_TOL && bi < self.basis[r])
                    }
                };
                if take {
                    t = ratio.max(0.0);
                    leaving = Some((i, to));
                }
            }
            if t.is_infinite() {
                return Err(SoberError::LpInternal("unbounded direction".into()));
            }
            if t <= FEAS_TOL {
                degenerate_streak += 1;
            } else {
                degenerate_streak = 0;
            }

            match leaving {
                None => {
                    // Bound flip: e jumps to its other bound, basis unchanged.
                    let step = dir * t;
                    for i in 0..m {
                        self.xb[i] -= step * self.tab[(i, e)];
                    }
                    self.status[e] = if dir > 0.0 {
                        VarStatus::AtUpper
                    } else {
                        VarStatus::AtLower
                    };
                }
                Some((row, leave_to)) => {
                    let step = dir * t;
                    for i in 0..m {
                        self.xb[i] -= step * self.tab[(i, e)];
                    }
                    let old = self.basis[row];
                    self.pivot(row, e);
                    // The entering variable's basic value.
                    self.xb[row] = if dir > 0.0 { t } else { self.upper[e] - t };
                    self.status[old] = leave_to;
                    if leave_to == VarStatus::AtUpper && !self.upper[old].is_finite() {
                        return Err(SoberError::LpInternal(
                            "variable left at a non-finite bound".into(),
                        ));
                    }
                }
            }
        }
    }

    /// Rebuilds the tableau and the basic values directly from the basis,
    /// discarding accumulated Gauss-Jordan drift. Returns false when the
    /// basis matrix cannot be factorised (the updated tableau is kept).
    fn refactor(&mut self) -> bool {
        let m = self.tab.nrows();
        let mut bmat = DMatrix::zeros(m, m);
        for (k, &j) in self.basis.iter().enumerate() {
            bmat.set_column(k, &self.orig.column(j));
        }
        let lu = bmat.lu();
        let Some(fresh) = lu.solve(&self.orig) else {
            return false;
        };
        // b adjusted for non-basic variables pinned at their upper bound.
        let mut b_adj = self.orig_b.clone();
        for (j, status) in self.status.iter().enumerate() {
            if *status == VarStatus::AtUpper && self.upper[j] != 0.0 {
                b_adj -= self.orig.column(j) * self.upper[j];
            }
        }
        let Some(xb) = lu.solve(&b_adj) else {
            return false;
        };
        self.tab = fresh;
        self.xb = xb;
        true
    }

    /// Gauss-Jordan pivot making column `col` basic in `row`.
    fn pivot(&mut self, row: usize, col: usize) {
        let m = self.tab.nrows();
        let total = self.tab.ncols();
        let p = self.tab[(row, col)];
        debug_assert!(p.abs() > 0.0, "zero pivot");
        let inv = 1.0 / p;
        for j in 0..total {
            self.tab[(row, j)] *= inv;
        }
        self.tab[(row, col)] = 1.0;
        for i in 0..m {
            if i == row {
                continue;
            }
            let f = self.tab[(i, col)];
            if f != 0.0 {
                for j in 0..total {
                    self.tab[(i, j)] -= f * self.tab[(row, j)];
                }
                self.tab[(i, col)] = 0.0;
            }
        }
        self.basis[row] = col;
        self.status[col] = VarStatus::Basic;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn textbook_lp_with_upper_bounds() {
        // max 3x + 2y, x + y + s = 4, 0 <= x <= 2, 0 <= y <= 3, s >= 0.
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![4.0]);
        let c = DVector::from_vec(vec![3.0, 2.0, 0.0]);
        let sol = solve_bounded_lp(&a, &b, &c, &[2.0, 3.0, f64::INFINITY]).unwrap();
        assert_relative_eq!(sol.objective, 10.0, epsilon = 1e-8);
        assert_relative_eq!(sol.x[0], 2.0, epsilon = 1e-8);
        assert_relative_eq!(sol.x[1], 2.0, epsilon = 1e-8);
    }

    #[test]
    fn equality_simplex_with_negative_rhs_row() {
        // max x - y, x - y = -1 with x, y <= 5: best is y = x + 1, x = 5 is
        // not allowed (y would hit 6), so x = 4, y = 5.
        let a = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let b = DVector::from_vec(vec![-1.0]);
        let c = DVector::from_vec(vec![1.0, -1.0]);
        let sol = solve_bounded_lp(&a, &b, &c, &[5.0, 5.0]).unwrap();
        assert_relative_eq!(sol.objective, -1.0, epsilon = 1e-8);
    }

    #[test]
    fn infeasible_program_is_reported() {
        // x + y = 1 and x + y = 2 cannot both hold.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let c = DVector::from_vec(vec![1.0, 0.0]);
        assert!(matches!(
            solve_bounded_lp(&a, &b, &c, &[f64::INFINITY; 2]),
            Err(SoberError::LpInternal(_))
        ));
    }

    #[test]
    fn redundant_rows_are_tolerated() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let c = DVector::from_vec(vec![2.0, 1.0]);
        let sol = solve_bounded_lp(&a, &b, &c, &[f64::INFINITY; 2]).unwrap();
        assert_relative_eq!(sol.objective, 2.0, epsilon = 1e-8);
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn simplex_returns_vertex_with_sparse_support() {
        // One equality row over 50 variables: a vertex has one basic
        // variable, so at most one non-zero entry.
        let n = 50;
        let a = DMatrix::from_element(1, n, 1.0);
        let b = DVector::from_vec(vec![1.0]);
        let mut c = DVector::zeros(n);
        for j in 0..n {
            c[j] = ((j as f64) * 0.37f64).sin();
        }
        let sol = solve_bounded_lp(&a, &b, &c, &vec![f64::INFINITY; n]).unwrap();
        let support = sol.x.iter().filter(|v| **v > 1e-10).count();
        assert_eq!(support, 1);
        let best = (0..n).map(|j| c[j]).fold(f64::NEG_INFINITY, f64::max);
        assert_relative_eq!(sol.objective, best, epsilon = 1e-8);
    }

    #[test]
    fn range_bounded_slack_limits_row_violation() {
        // x1 + x2 = 1 (mass), 2x1 - x2 + s = 0.5 + eps with s in [0, 2eps]
        // encodes |2x1 - x2 - 0.5| <= eps.
        let eps = 0.1;
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 2.0, -1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 0.5 + eps]);
        let c = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let sol = solve_bounded_lp(&a, &b, &c, &[f64::INFINITY, f64::INFINITY, 2.0 * eps]).unwrap();
        let moment = 2.0 * sol.x[0] - sol.x[1];
        assert!((moment - 0.5).abs() <= eps + 1e-9, "moment {moment}");
        // Maximising x1 pushes the moment to its upper band edge.
        assert_relative_eq!(moment, 0.5 + eps, epsilon = 1e-8);
    }
}
