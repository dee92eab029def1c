//! Minimum-cost one-to-one assignment on rectangular matrices.
//!
//! The core is the O(n^3) shortest-augmenting-path form of the Hungarian
//! method with row and column potentials. Rectangular inputs are padded to a
//! square with zero-cost dummy rows or columns. Among all optimal
//! assignments the one whose `(row, col)` pair list is lexicographically
//! smallest is returned: rows are fixed in order to the lowest column that
//! still admits an optimal completion. Only columns with zero reduced cost
//! under the current optimal duals can take part in an optimal assignment,
//! so the extra solves run only on genuine ties.

use std::fmt;

use crate::geometry::{iou, BoundingBox};

/// Dense row-major cost matrix.
#[derive(Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "cost matrix shape mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged cost matrix");
        Self::new(rows.len(), cols, rows.concat())
    }

    /// `1 - IoU` between every anchor (rows) and candidate (columns).
    pub fn from_boxes(anchors: &[BoundingBox], candidates: &[BoundingBox]) -> Self {
        let data = anchors
            .iter()
            .flat_map(|a| candidates.iter().map(move |c| 1.0 - iou(a, c)))
            .collect();
        Self::new(anchors.len(), candidates.len(), data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }
}

impl fmt::Debug for CostMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<&[f64]> = self.data.chunks(self.cols.max(1)).collect();
        f.debug_struct("CostMatrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("data", &rows)
            .finish()
    }
}

/// Sum of the costs of `pairs`, in pair order.
pub fn assignment_cost(costs: &CostMatrix, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| costs.get(r, c)).sum()
}

/// Optimal assignment covering `min(rows, cols)` pairs, sorted by row.
pub fn hungarian(costs: &CostMatrix) -> Vec<(usize, usize)> {
    if costs.is_empty() {
        return Vec::new();
    }
    debug_assert!(costs.data.iter().all(|c| c.is_finite()), "non-finite cost");
    let n = costs.rows.max(costs.cols);
    let square = Square::padded(costs, n);
    let row_to_col = square.lexicographic_optimum();
    row_to_col
        .into_iter()
        .enumerate()
        .filter(|&(r, c)| r < costs.rows && c < costs.cols)
        .collect()
}

struct Square {
    n: usize,
    data: Vec<f64>,
    tol: f64,
}

struct Solution {
    /// Column index (into the sub-problem's column list) per sub-problem row.
    row_to_col: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
    cost: f64,
}

impl Square {
    fn padded(costs: &CostMatrix, n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        let mut max_abs = 0.0f64;
        for r in 0..costs.rows {
            for c in 0..costs.cols {
                let v = costs.get(r, c);
                max_abs = max_abs.max(v.abs());
                data[r * n + c] = v;
            }
        }
        Self {
            n,
            data,
            tol: 1e-10 * (1.0 + max_abs * n as f64),
        }
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n + c]
    }

    #[allow(clippy::needless_range_loop)]
    fn lexicographic_optimum(&self) -> Vec<usize> {
        let n = self.n;
        let all: Vec<usize> = (0..n).collect();
        let mut sol = self.solve(&all, &all);
        let optimum = sol.cost;
        let mut assigned = vec![usize::MAX; n];
        let mut fixed_cost = 0.0;
        let mut free_cols: Vec<usize> = all.clone();

        for row in 0..n {
            // `sol` solves rows row.. over `free_cols`; its row 0 is `row`.
            let current = free_cols[sol.row_to_col[0]];
            let mut chosen = None;
            for (k, &col) in free_cols.iter().enumerate() {
                if col >= current {
                    break;
                }
                let reduced = self.at(row, col) - sol.u[0] - sol.v[k];
                if reduced > self.tol {
                    continue;
                }
                let rest_cols: Vec<usize> =
                    free_cols.iter().copied().filter(|&c| c != col).collect();
                let rest_rows: Vec<usize> = (row + 1..n).collect();
                let rest = self.solve(&rest_rows, &rest_cols);
                if fixed_cost + self.at(row, col) + rest.cost <= optimum + self.tol {
                    chosen = Some((col, rest));
                    break;
                }
            }
            let (col, rest) = match chosen {
                Some(found) => found,
                None => {
                    let pos = sol.row_to_col[0];
                    let rest = Solution {
                        row_to_col: sol.row_to_col[1..]
                            .iter()
                            .map(|&c| if c > pos { c - 1 } else { c })
                            .collect(),
                        u: sol.u[1..].to_vec(),
                        v: sol
                            .v
                            .iter()
                            .enumerate()
                            .filter(|&(k, _)| k != pos)
                            .map(|(_, &x)| x)
                            .collect(),
                        cost: sol.cost - self.at(row, current),
                    };
                    (current, rest)
                }
            };
            assigned[row] = col;
            fixed_cost += self.at(row, col);
            free_cols.retain(|&c| c != col);
            sol = rest;
        }
        assigned
    }

    /// Solve the square sub-problem on `rows x cols` (equal lengths).
    fn solve(&self, rows: &[usize], cols: &[usize]) -> Solution {
        let m = rows.len();
        debug_assert_eq!(m, cols.len());
        if m == 0 {
            return Solution {
                row_to_col: Vec::new(),
                u: Vec::new(),
                v: Vec::new(),
                cost: 0.0,
            };
        }
        let cost = |i: usize, j: usize| self.at(rows[i - 1], cols[j - 1]);
        // 1-based potentials; index 0 is the virtual source column.
        let mut u = vec![0.0; m + 1];
        let mut v = vec![0.0; m + 1];
        let mut owner = vec![0usize; m + 1];
        let mut way = vec![0usize; m + 1];
        for i in 1..=m {
            owner[0] = i;
            let mut j0 = 0usize;
            let mut minv = vec![f64::INFINITY; m + 1];
            let mut used = vec![false; m + 1];
            loop {
                used[j0] = true;
                let i0 = owner[j0];
                let mut delta = f64::INFINITY;
                let mut j1 = 0usize;
                for j in 1..=m {
                    if used[j] {
                        continue;
                    }
                    let cur = cost(i0, j) - u[i0] - v[j];
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
                        u[owner[j]] += delta;
                        v[j] -= delta;
                    } else {
                        minv[j] -= delta;
                    }
                }
                j0 = j1;
                if owner[j0] == 0 {
                    break;
                }
            }
            loop {
                let j1 = way[j0];
                owner[j0] = owner[j1];
                j0 = j1;
                if j0 == 0 {
                    break;
                }
            }
        }
        let mut row_to_col = vec![0usize; m];
        for j in 1..=m {
            row_to_col[owner[j] - 1] = j - 1;
        }
        let total = (0..m).map(|i| cost(i + 1, row_to_col[i] + 1)).sum();
        Solution {
            row_to_col,
            u: u[1..].to_vec(),
            v: v[1..].to_vec(),
            cost: total,
        }
    }
}
