//! Minimum-cost bipartite assignment (Hungarian method, shortest
//! augmenting paths with potentials, O(n²m)).

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssignmentError {
    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs, sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimum-cost assignment of a rectangular matrix. Every row is matched
/// when rows ≤ cols, otherwise every column is.
pub fn solve(cost: &DMatrix<f64>) -> Result<Assignment, AssignmentError> {
    if let Some((i, _)) = cost.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        let (row, col) = (i % cost.nrows(), i / cost.nrows());
        return Err(AssignmentError::NonFinite { row, col });
    }
    if cost.nrows() == 0 || cost.ncols() == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    let transposed = cost.nrows() > cost.ncols();
    let c = if transposed { cost.transpose() } else { cost.clone() };
    let mut pairs: Vec<(usize, usize)> = solve_wide(&c)
        .into_iter()
        .enumerate()
        .map(|(r, col)| if transposed { (col, r) } else { (r, col) })
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(r, c)| cost[(r, c)]).sum();
    Ok(Assignment { pairs, total_cost })
}

/// rows ≤ cols; returns the column of every row.
fn solve_wide(c: &DMatrix<f64>) -> Vec<usize> {
    let (n, m) = (c.nrows(), c.ncols());
    // 1-based potentials, index 0 is the virtual root column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Assignment restricted to pairs with `cost <= gate`. Pairs outside the
/// gate are replaced by a sentinel larger than any feasible total, solved,
/// then dropped from the result.
pub fn gated_assignment(cost: &DMatrix<f64>, gate: f64) -> Result<Vec<(usize, usize)>, AssignmentError> {
    let k = cost.nrows().min(cost.ncols()) as f64;
    let sentinel = (gate.abs() + 1.0) * (k + 1.0) * 2.0;
    let mut padded = cost.clone();
    for (i, v) in padded.iter_mut().enumerate() {
        if !v.is_finite() && *v != f64::INFINITY {
            let n = cost.nrows();
            return Err(AssignmentError::NonFinite { row: i % n, col: i / n });
        }
        if *v > gate {
            *v = sentinel;
        }
    }
    let a = solve(&padded)?;
    Ok(a.pairs.into_iter().filter(|&(r, c)| cost[(r, c)] <= gate).collect())
}
