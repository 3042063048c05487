//! Exact Earth Mover's Distance between small, equal-size point sets,
//! via an O(n^3) Hungarian assignment solver.

use super::GeometryError;

/// Exact EMD is intended for patch-sized sets; larger inputs are
/// rejected rather than silently approximated.
pub const MAX_EXACT_EMD_POINTS: usize = 64;

/// Minimum-cost perfect matching on a dense `n x n` cost matrix
/// (row-major), returning `perm[row] = column`. Classic potentials +
/// shortest-augmenting-path formulation, O(n^3) time.
fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    debug_assert_eq!(cost.len(), n * n);
    // 1-indexed working arrays; index 0 is the virtual source column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
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
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            perm[p[j] - 1] = j - 1;
        }
    }
    perm
}

fn validate(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<usize, GeometryError> {
    if a.is_empty() || b.is_empty() {
        return Err(GeometryError::EmptyPointSet);
    }
    if a.len() != b.len() {
        return Err(GeometryError::UnequalSets {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() > MAX_EXACT_EMD_POINTS {
        return Err(GeometryError::TooManyPointsForExactEmd {
            n: a.len(),
            limit: MAX_EXACT_EMD_POINTS,
        });
    }
    Ok(a.len())
}

/// The optimal one-to-one matching between two equal-size point sets and
/// its mean matched distance `(1/n) sum_i |a_i - b_perm(i)|`.
pub fn emd_assignment(
    a: &[[f64; 3]],
    b: &[[f64; 3]],
) -> Result<(Vec<usize>, f64), GeometryError> {
    let n = validate(a, b)?;
    let mut cost = vec![0.0f64; n * n];
    for (i, p) in a.iter().enumerate() {
        for (j, q) in b.iter().enumerate() {
            cost[i * n + j] = super::squared_distance(p, q).sqrt();
        }
    }
    let perm = solve_assignment(&cost, n);
    let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((perm, total / n as f64))
}

/// Exact Earth Mover's Distance between two equal-size point sets of at
/// most [`MAX_EXACT_EMD_POINTS`] points.
pub fn emd_exact(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64, GeometryError> {
    emd_assignment(a, b).map(|(_, d)| d)
}
