//! Minimum-cost bipartite assignment with deterministic tie-breaking.

use super::ObjectiveError;

/// Dense row-major cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "cost matrix size");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged cost matrix");
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// One matched `(query, segment)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Match {
    pub query: usize,
    pub segment: usize,
}

/// Optimal assignment of every column (segment) to a distinct row (query).
///
/// Among optimal assignments the one returned lists, in segment order, the
/// lexicographically smallest sequence of query indices. Costs that tie up
/// to a relative tolerance of `1e-9` count as equal.
pub fn hungarian_match(cost: &CostMatrix) -> Result<Vec<Match>, ObjectiveError> {
    if cost.data.iter().any(|c| !c.is_finite()) {
        return Err(ObjectiveError::NonFiniteCost);
    }
    if cost.cols > cost.rows {
        return Err(ObjectiveError::TooManySegments {
            segments: cost.cols,
            queries: cost.rows,
        });
    }
    let (n, m) = (cost.rows, cost.cols);
    let optimum = min_cost(cost, &vec![false; n], &(0..m).collect::<Vec<_>>());
    let tol = 1e-9 * (1.0 + optimum.abs());

    let mut used = vec![false; n];
    let mut fixed_cost = 0.0;
    let mut out = Vec::with_capacity(m);
    for seg in 0..m {
        let rest: Vec<usize> = (seg + 1..m).collect();
        let mut chosen = None;
        for q in 0..n {
            if used[q] {
                continue;
            }
            used[q] = true;
            let total = fixed_cost + cost.at(q, seg) + min_cost(cost, &used, &rest);
            used[q] = false;
            if total <= optimum + tol {
                chosen = Some(q);
                break;
            }
        }
        let q = chosen.expect("an optimal completion always exists");
        used[q] = true;
        fixed_cost += cost.at(q, seg);
        out.push(Match { query: q, segment: seg });
    }
    Ok(out)
}

/// Minimum total cost of assigning `segments` to distinct unused rows,
/// via the potential-based O(m²n) Kuhn–Munkres algorithm.
fn min_cost(cost: &CostMatrix, used: &[bool], segments: &[usize]) -> f64 {
    let rows: Vec<usize> = (0..cost.rows).filter(|&r| !used[r]).collect();
    let (m, n) = (segments.len(), rows.len());
    if m == 0 {
        return 0.0;
    }
    let a = |i: usize, j: usize| cost.at(rows[j - 1], segments[i - 1]);
    // 1-based: u over segments, v over rows; way/p track the augmenting tree.
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut visited = vec![false; n + 1];
        loop {
            visited[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if visited[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
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
                if visited[j] {
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
    (1..=n)
        .filter(|&j| p[j] != 0)
        .map(|j| a(p[j], j))
        .sum()
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &CostMatrix, matches: &[Match]) -> f64 {
    matches.iter().map(|m| cost.at(m.query, m.segment)).sum()
}
