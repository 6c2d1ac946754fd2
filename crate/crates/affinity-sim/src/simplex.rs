//! Phase-1 simplex for small dense feasibility problems:
//! find x >= 0 with A_eq x = b_eq (b_eq >= 0) and A_ub x <= b_ub (b_ub >= 0).
//!
//! Instances here are tiny (tens of variables), so a plain dense tableau with
//! Bland's rule is plenty: deterministic, cycle-free, and exact to float
//! round-off. Returns a feasible point or `None`.

const TOL: f64 = 1e-9;

pub fn feasible_point(
    a_eq: &[Vec<f64>],
    b_eq: &[f64],
    a_ub: &[Vec<f64>],
    b_ub: &[f64],
) -> Option<Vec<f64>> {
    let n = if !a_eq.is_empty() { a_eq[0].len() } else { a_ub[0].len() };
    let ne = a_eq.len();
    let nu = a_ub.len();
    debug_assert!(b_eq.iter().all(|&b| b >= 0.0));
    debug_assert!(b_ub.iter().all(|&b| b >= 0.0));

    // Columns: x (n), slacks (nu), artificials (ne). Rows: ne + nu, then the
    // phase-1 objective row (minimize the artificial sum) at the bottom.
    let rows = ne + nu;
    let cols = n + nu + ne + 1; // + rhs
    let mut t = vec![vec![0.0f64; cols]; rows + 1];
    let mut basis = vec![0usize; rows];

    for (r, row) in a_eq.iter().enumerate() {
        t[r][..n].copy_from_slice(row);
        t[r][n + nu + r] = 1.0;
        t[r][cols - 1] = b_eq[r];
        basis[r] = n + nu + r;
    }
    for (k, row) in a_ub.iter().enumerate() {
        let r = ne + k;
        t[r][..n].copy_from_slice(row);
        t[r][n + k] = 1.0;
        t[r][cols - 1] = b_ub[k];
        basis[r] = n + k;
    }
    // Objective row: reduced costs for min(sum of artificials) with the
    // artificial basis priced out: z_j = c_j - sum of equality rows, where
    // c_j = 1 exactly on artificial columns.
    for j in 0..cols {
        let s: f64 = (0..ne).map(|r| t[r][j]).sum();
        let c = if (n + nu..n + nu + ne).contains(&j) { 1.0 } else { 0.0 };
        t[rows][j] = c - s;
    }

    loop {
        // Bland: entering = lowest-index column with negative reduced cost.
        // Artificials never re-enter.
        let Some(col) = (0..n + nu).find(|&j| t[rows][j] < -TOL) else {
            break;
        };
        // Ratio test; ties by lowest basis variable index (Bland).
        let mut pivot: Option<usize> = None;
        let mut best = f64::INFINITY;
        for r in 0..rows {
            if t[r][col] > TOL {
                let ratio = t[r][cols - 1] / t[r][col];
                let better = ratio < best - TOL
                    || (ratio < best + TOL && pivot.map_or(true, |p| basis[r] < basis[p]));
                if better {
                    best = ratio.min(best);
                    pivot = Some(r);
                }
            }
        }
        // The phase-1 objective is bounded below by 0, so a pivot row exists.
        let r = pivot?;
        let piv = t[r][col];
        for v in t[r].iter_mut() {
            *v /= piv;
        }
        for rr in 0..=rows {
            if rr != r {
                let f = t[rr][col];
                if f != 0.0 {
                    for j in 0..cols {
                        t[rr][j] -= f * t[r][j];
                    }
                }
            }
        }
        basis[r] = col;
    }

    // Objective value = -rhs of the objective row.
    if -t[rows][cols - 1] > TOL {
        return None;
    }
    let mut x = vec![0.0f64; n];
    for (r, &b) in basis.iter().enumerate() {
        if b < n {
            x[b] = t[r][cols - 1].max(0.0);
        }
    }
    Some(x)
}
