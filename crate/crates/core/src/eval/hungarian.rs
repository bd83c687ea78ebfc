//! Kuhn–Munkres assignment (shortest augmenting path with dual potentials).

use crate::error::{Error, Result};

/// Square matrix of finite costs.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n: usize,
    cost: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, cost: Vec<f64>) -> Result<Self> {
        if cost.len() != n * n {
            return Err(Error::Contract(format!(
                "cost matrix of size {n} needs {} entries, got {}",
                n * n,
                cost.len()
            )));
        }
        if let Some(i) = cost.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!(
                "non-finite cost at ({}, {})",
                i / n,
                i % n
            )));
        }
        Ok(Self { n, cost })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Contract("cost matrix must be square".into()));
        }
        Self::new(n, rows.concat())
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.cost[i * self.n + j]
    }

    /// `Σ_i cost[i, perm[i]]`, summed in row order.
    pub fn total(&self, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Column assigned to each row.
    pub perm: Vec<usize>,
    pub total: f64,
}

/// Minimum-cost perfect assignment in O(n³).
///
/// When several assignments reach the optimum, the lexicographically smallest
/// `perm` is returned.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let n = cost.size();
    if n == 0 {
        return Assignment {
            perm: Vec::new(),
            total: 0.0,
        };
    }
    let (mut row_to_col, u, v) = solve(cost);

    let scale = cost.cost.iter().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale;
    let tight = |i: usize, j: usize| (cost.get(i, j) - u[i + 1] - v[j + 1]).abs() <= tol;
    lexicographic_min(n, &tight, &mut row_to_col);

    let total = cost.total(&row_to_col);
    Assignment {
        perm: row_to_col,
        total,
    }
}

/// Returns (row → col, row potentials, column potentials); potentials are
/// 1-based with index 0 as the virtual row/column.
fn solve(cost: &CostMatrix) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.size();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j]: row (1-based) matched to column j; 0 = free
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    (row_to_col, u, v)
}

/// Every optimal assignment uses only tight edges of an optimal dual, so the
/// lexicographically smallest optimum is found by fixing rows in order, each
/// to its smallest tight column that still admits a perfect tight matching.
fn lexicographic_min(n: usize, tight: &impl Fn(usize, usize) -> bool, row_to_col: &mut [usize]) {
    let mut col_to_row = vec![0; n];
    for (r, &c) in row_to_col.iter().enumerate() {
        col_to_row[c] = r;
    }
    let mut fixed_col = vec![false; n];
    for i in 0..n {
        for j in 0..n {
            if fixed_col[j] || !tight(i, j) {
                continue;
            }
            if row_to_col[i] == j {
                break;
            }
            // Row r' = owner of j must move; look for an alternating path from
            // r' to i's current column through free (unfixed) rows/columns.
            let target = row_to_col[i];
            let start = col_to_row[j];
            let mut visited = vec![false; n];
            visited[j] = true;
            let mut path = Vec::new();
            if augment(start, target, i, tight, row_to_col, &col_to_row, &fixed_col, &mut visited, &mut path) {
                // path holds (row, new col) pairs
                for &(r, c) in &path {
                    row_to_col[r] = c;
                    col_to_row[c] = r;
                }
                row_to_col[i] = j;
                col_to_row[j] = i;
                break;
            }
        }
        fixed_col[row_to_col[i]] = true;
    }
}

#[allow(clippy::too_many_arguments)]
fn augment(
    row: usize,
    target: usize,
    skip_row: usize,
    tight: &impl Fn(usize, usize) -> bool,
    row_to_col: &[usize],
    col_to_row: &[usize],
    fixed_col: &[bool],
    visited: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    let n = row_to_col.len();
    for c in 0..n {
        if visited[c] || fixed_col[c] || !tight(row, c) {
            continue;
        }
        visited[c] = true;
        if c == target {
            path.push((row, c));
            return true;
        }
        let next = col_to_row[c];
        if next == skip_row {
            continue;
        }
        if augment(next, target, skip_row, tight, row_to_col, col_to_row, fixed_col, visited, path) {
            path.push((row, c));
            return true;
        }
    }
    false
}
