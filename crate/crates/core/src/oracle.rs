//! Independent reference computations used by the test suites and the `check` command.
//!
//! Everything here is deliberately naive (enumeration, grid search, direct sums) and
//! shares no code path with the production operators it is compared against.

/// Naive `ln(sum exp z)` without the max shift.
pub fn naive_log_sum_exp(z: &[f64]) -> f64 {
    z.iter().map(|v| v.exp()).sum::<f64>().ln()
}

/// Euclidean projection of `z` onto the probability simplex by enumerating every
/// candidate support. For each nonempty subset the equality-constrained minimizer is
/// solved in closed form; the feasible candidate closest to `z` wins.
pub fn simplex_projection_bruteforce(z: &[f64]) -> Vec<f64> {
    let n = z.len();
    assert!((1..=20).contains(&n), "enumeration limited to 20 actions");
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1u32 << n) {
        let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let shift = (members.iter().map(|&i| z[i]).sum::<f64>() - 1.0) / members.len() as f64;
        let mut candidate = vec![0.0; n];
        let mut feasible = true;
        for &i in &members {
            candidate[i] = z[i] - shift;
            if candidate[i] < 0.0 {
                feasible = false;
                break;
            }
        }
        if !feasible {
            continue;
        }
        let dist: f64 = candidate.iter().zip(z).map(|(m, v)| (m - v) * (m - v)).sum();
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, candidate));
        }
    }
    best.expect("the singleton of the largest score is always feasible").1
}

/// `sum_a mu_a z_a + (1 - sum_a mu_a^2) / 2`.
pub fn tsallis_plug_in(z: &[f64], mu: &[f64]) -> f64 {
    let lin: f64 = mu.iter().zip(z).map(|(m, v)| m * v).sum();
    let sq: f64 = mu.iter().map(|m| m * m).sum();
    lin + 0.5 * (1.0 - sq)
}

/// Maximum of [`tsallis_plug_in`] over the regular simplex lattice with spacing `1/m`,
/// where `m` is the finest resolution whose lattice has at most `budget` points.
pub fn tsallis_grid_search(z: &[f64], budget: usize) -> f64 {
    let n = z.len();
    let mut m = 1;
    while lattice_size(n, m + 1) <= budget as f64 {
        m += 1;
    }
    let mut counts = vec![0usize; n];
    let mut best = f64::NEG_INFINITY;
    walk_lattice(z, m, 0, m, &mut counts, &mut best);
    best
}

fn lattice_size(n: usize, m: usize) -> f64 {
    // C(m + n - 1, n - 1)
    (1..n).fold(1.0, |acc, k| acc * (m + k) as f64 / k as f64)
}

fn walk_lattice(z: &[f64], m: usize, idx: usize, left: usize, counts: &mut [usize], best: &mut f64) {
    if idx == z.len() - 1 {
        counts[idx] = left;
        let mu: Vec<f64> = counts.iter().map(|&c| c as f64 / m as f64).collect();
        *best = best.max(tsallis_plug_in(z, &mu));
        return;
    }
    for c in 0..=left {
        counts[idx] = c;
        walk_lattice(z, m, idx + 1, left - c, counts, best);
    }
}

/// `Q[x][a] = r[x][a] + gamma sum_x' P[x][a][x'] v[x']` by explicit triple loop over
/// nested tables.
pub fn q_table_naive(
    transition: &[Vec<Vec<f64>>],
    reward: &[Vec<f64>],
    gamma: f64,
    v: &[f64],
) -> Vec<Vec<f64>> {
    let mut q = vec![vec![0.0; reward[0].len()]; reward.len()];
    for x in 0..reward.len() {
        for a in 0..reward[x].len() {
            let mut acc = 0.0;
            for (y, &vy) in v.iter().enumerate() {
                acc += transition[x][a][y] * vy;
            }
            q[x][a] = reward[x][a] + gamma * acc;
        }
    }
    q
}

/// Central finite-difference gradient of `f` at `params` with step `h`.
pub fn central_difference<F>(params: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = params.to_vec();
    (0..params.len())
        .map(|i| {
            probe[i] = params[i] + h;
            let up = f(&probe);
            probe[i] = params[i] - h;
            let down = f(&probe);
            probe[i] = params[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||, floor)` in the Euclidean norm.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_of_simplex_point_is_identity() {
        let p = simplex_projection_bruteforce(&[0.2, 0.3, 0.5]);
        for (a, b) in p.iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(simplex_projection_bruteforce(&[3.0, 0.0]), vec![1.0, 0.0]);
    }

    #[test]
    fn lattice_counts() {
        assert_eq!(lattice_size(3, 2), 6.0);
        assert_eq!(lattice_size(1, 5), 1.0);
        // m = 10 puts the uniform point on the lattice
        let best = tsallis_grid_search(&[0.0, 0.0], 11);
        assert!((best - 0.25).abs() < 1e-15);
    }

    #[test]
    fn finite_difference_of_quadratic() {
        let g = central_difference(&[1.0, -2.0], 1e-5, |p| p[0] * p[0] + 3.0 * p[1]);
        assert!((g[0] - 2.0).abs() < 1e-9 && (g[1] - 3.0).abs() < 1e-9);
    }
}
