//! Two-component PCA by power iteration with deflation.

pub const MAX_ITERATIONS: usize = 200;
pub const RAYLEIGH_TOL: f64 = 1e-10;
/// Eigenvalues below this fraction of the data energy count as zero.
const RANK_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// Unit principal directions; a zero vector when the component is absent.
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
    /// `[pc1, pc2]` per row.
    pub scores: Vec<[f64; 2]>,
    /// Set when the centered data has rank below 2.
    pub rank_deficient: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn matvec(c: &[f64], v: &[f64]) -> Vec<f64> {
    c.chunks(v.len()).map(|row| dot(row, v)).collect()
}

/// Largest-magnitude entry positive.
fn fix_sign(v: &mut [f64]) {
    let pivot = v
        .iter()
        .copied()
        .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn dominant(c: &[f64], dim: usize, seed_shift: f64) -> (Vec<f64>, f64) {
    let mut v: Vec<f64> = (0..dim)
        .map(|i| 1.0 + 0.5 * (1.7 * i as f64 + seed_shift).sin())
        .collect();
    normalize(&mut v);
    let mut lambda = dot(&v, &matvec(c, &v));
    for _ in 0..MAX_ITERATIONS {
        let mut w = matvec(c, &v);
        if normalize(&mut w) == 0.0 {
            return (v, 0.0);
        }
        let next = dot(&w, &matvec(c, &w));
        v = w;
        let change = (next - lambda).abs();
        lambda = next;
        if change < RAYLEIGH_TOL {
            break;
        }
    }
    (v, lambda)
}

/// Projects the rows of `data` (`n × dim`, row-major) onto their top two
/// principal components after centering.
pub fn project_2d(data: &[f64], dim: usize) -> Projection {
    assert!(dim > 0 && data.len() % dim == 0, "data must be n × dim");
    let n = data.len() / dim;
    let mut mean = vec![0.0; dim];
    for row in data.chunks(dim) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let centered: Vec<f64> = data
        .chunks(dim)
        .flat_map(|row| row.iter().zip(&mean).map(|(x, m)| x - m))
        .collect();

    let mut cov = vec![0.0; dim * dim];
    for row in centered.chunks(dim) {
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] += row[i] * row[j];
            }
        }
    }
    let denom = n.saturating_sub(1).max(1) as f64;
    cov.iter_mut().for_each(|c| *c /= denom);
    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    // rounding in the mean leaves a residue on constant data, so the floor
    // also scales with the raw magnitude
    let raw = dot(data, data) / n.max(1) as f64;
    let floor = RANK_TOL * trace.max(raw);

    let mut components = [vec![0.0; dim], vec![0.0; dim]];
    let mut eigenvalues = [0.0; 2];
    let mut found = 0;
    for k in 0..2 {
        if trace <= 0.0 {
            break;
        }
        let (mut v, _) = dominant(&cov, dim, k as f64);
        for prev in &components[..k] {
            let p = dot(&v, prev);
            v.iter_mut().zip(prev).for_each(|(x, q)| *x -= p * q);
        }
        if normalize(&mut v) == 0.0 {
            break;
        }
        let lambda = dot(&v, &matvec(&cov, &v));
        if lambda <= floor {
            break;
        }
        fix_sign(&mut v);
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] -= lambda * v[i] * v[j];
            }
        }
        eigenvalues[k] = lambda;
        components[k] = v;
        found += 1;
    }

    let scores = centered
        .chunks(dim)
        .map(|row| [dot(row, &components[0]), dot(row, &components[1])])
        .collect();
    Projection {
        components,
        eigenvalues,
        scores,
        rank_deficient: found < 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_rows_project_to_origin() {
        let data: Vec<f64> = (0..30).flat_map(|_| (0..16).map(|j| j as f64 * 0.1)).collect();
        let p = project_2d(&data, 16);
        assert_eq!(p.scores.len(), 30);
        assert!(p.scores.iter().all(|s| s == &[0.0, 0.0]));
        assert!(p.rank_deficient);
    }

    #[test]
    fn planar_data_keeps_pairwise_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let basis: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let offset: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let data: Vec<f64> = (0..30)
            .flat_map(|_| {
                let (a, b): (f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0));
                (0..16)
                    .map(|j| offset[j] + a * basis[0][j] + b * basis[1][j])
                    .collect::<Vec<_>>()
            })
            .collect();
        let p = project_2d(&data, 16);
        assert!(!p.rank_deficient);
        for i in 0..30 {
            for j in 0..30 {
                let full: f64 = (0..16)
                    .map(|k| (data[i * 16 + k] - data[j * 16 + k]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let (si, sj) = (p.scores[i], p.scores[j]);
                let proj = ((si[0] - sj[0]).powi(2) + (si[1] - sj[1]).powi(2)).sqrt();
                assert!((full - proj).abs() < 1e-8, "{i},{j}: {full} vs {proj}");
            }
        }
    }

    #[test]
    fn components_are_orthonormal_and_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..30 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = project_2d(&data, 16);
        let [a, b] = &p.components;
        assert!((dot(a, a) - 1.0).abs() < 1e-8);
        assert!((dot(b, b) - 1.0).abs() < 1e-8);
        assert!(dot(a, b).abs() < 1e-8);
        assert!(p.eigenvalues[0] >= p.eigenvalues[1]);
        let sum: f64 = p.scores.iter().map(|s| s[0]).sum();
        assert!(sum.abs() < 1e-10);
    }

    #[test]
    fn rank_one_data_zeroes_second_component() {
        let data: Vec<f64> = (0..10)
            .flat_map(|i| [i as f64, 2.0 * i as f64, -(i as f64)])
            .collect();
        let p = project_2d(&data, 3);
        assert!(p.rank_deficient);
        assert!(p.scores.iter().all(|s| s[1] == 0.0));
        // first score is the signed distance along (1, 2, −1)/√6
        let spread = p.scores[9][0] - p.scores[0][0];
        assert!((spread.abs() - 9.0 * 6f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn sign_is_deterministic() {
        let data = [0.0, 0.0, 1.0, -3.0, 2.0, -6.0];
        let p = project_2d(&data, 2);
        let c = &p.components[0];
        assert!(c[1].abs() > c[0].abs() && c[1] > 0.0);
    }
}
