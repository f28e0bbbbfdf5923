//! Two-component PCA via power iteration with deflation.

use ndarray::{Array1, Array2};

use crate::error::{PvpError, Result};

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 50_000;

/// 2-D projection of a vector set.
#[derive(Debug, Clone)]
pub struct PcaProjection {
    /// One (pc1, pc2) coordinate pair per input vector, in input order.
    pub coords: Vec<[f64; 2]>,
    /// Fraction of total variance captured by each component.
    pub explained: [f64; 2],
    /// The two principal directions.
    pub components: [Vec<f64>; 2],
}

fn power_iteration(matrix: &Array2<f64>) -> (Array1<f64>, f64) {
    let d = matrix.nrows();
    // Deterministic, dense start vector.
    let mut v = Array1::from_shape_fn(d, |i| ((i + 1) as f64).sin() + 1.5);
    let norm = v.dot(&v).sqrt();
    v /= norm;
    for _ in 0..POWER_MAX_ITERS {
        let next = matrix.dot(&v);
        let norm = next.dot(&next).sqrt();
        if norm < 1e-300 {
            // Operating in the null space: v is an eigenvector of eigenvalue 0.
            return (v, 0.0);
        }
        let next = next / norm;
        let delta = (&next - &v).mapv(f64::abs).sum();
        v = next;
        if delta < POWER_TOL {
            break;
        }
    }
    let lambda = v.dot(&matrix.dot(&v));
    (v, lambda.max(0.0))
}

fn apply_sign_convention(v: &mut Array1<f64>) {
    if let Some(&first) = v.iter().find(|x| **x != 0.0) {
        if first < 0.0 {
            v.mapv_inplace(|x| -x);
        }
    }
}

/// Project vectors onto their top two principal components.
///
/// Mean-centers the input, extracts the top two covariance eigenvectors by
/// power iteration with deflation, and fixes each component's sign so its
/// first nonzero coordinate is positive.
pub fn pca_project(vectors: &[Vec<f64>]) -> Result<PcaProjection> {
    if vectors.len() < 3 {
        return Err(PvpError::Argument(format!(
            "PCA needs at least 3 vectors, got {}",
            vectors.len()
        )));
    }
    let d = vectors[0].len();
    if d < 2 {
        return Err(PvpError::Argument("PCA needs dimension >= 2".into()));
    }
    if vectors.iter().any(|v| v.len() != d) {
        return Err(PvpError::Shape("PCA input widths differ".into()));
    }
    let n = vectors.len();
    let mut centered = Array2::zeros((n, d));
    let mut mean = vec![0.0f64; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    for (i, v) in vectors.iter().enumerate() {
        for j in 0..d {
            centered[(i, j)] = v[j] - mean[j];
        }
    }
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let total_var: f64 = (0..d).map(|j| cov[(j, j)]).sum();
    if total_var <= 1e-24 {
        return Err(PvpError::Degenerate(
            "all input vectors are identical; covariance has rank 0".into(),
        ));
    }

    let (mut v1, lambda1) = power_iteration(&cov);
    apply_sign_convention(&mut v1);
    let outer = {
        let mut m = Array2::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] = lambda1 * v1[i] * v1[j];
            }
        }
        m
    };
    let deflated = &cov - &outer;
    let (mut v2, lambda2) = power_iteration(&deflated);
    apply_sign_convention(&mut v2);

    let coords = centered
        .rows()
        .into_iter()
        .map(|row| [row.dot(&v1), row.dot(&v2)])
        .collect();
    Ok(PcaProjection {
        coords,
        explained: [lambda1 / total_var, lambda2 / total_var],
        components: [v1.to_vec(), v2.to_vec()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn explained_variance_is_ordered_and_nonnegative() {
        let data = random_cloud(1, 40, 8);
        let proj = pca_project(&data).unwrap();
        assert!(proj.explained[0] >= proj.explained[1]);
        assert!(proj.explained[1] >= 0.0);
        assert!(proj.explained[0] <= 1.0 + 1e-12);
    }

    #[test]
    fn projections_are_centered() {
        let data = random_cloud(2, 25, 6);
        let proj = pca_project(&data).unwrap();
        let mean1: f64 = proj.coords.iter().map(|c| c[0]).sum::<f64>() / 25.0;
        let mean2: f64 = proj.coords.iter().map(|c| c[1]).sum::<f64>() / 25.0;
        assert!(mean1.abs() < 1e-9);
        assert!(mean2.abs() < 1e-9);
    }

    #[test]
    fn planar_data_reconstructs_exactly() {
        // Vectors constructed in a 2-plane inside R^5: two components must
        // reconstruct them to rounding error.
        let u = [1.0, 0.5, -0.25, 0.0, 2.0];
        let w = [0.0, 1.0, 0.75, -1.5, 0.25];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<Vec<f64>> = (0..30)
            .map(|_| {
                let a: f64 = rng.gen_range(-2.0..2.0);
                let b: f64 = rng.gen_range(-2.0..2.0);
                (0..5).map(|j| a * u[j] + b * w[j] + 0.3).collect()
            })
            .collect();
        let proj = pca_project(&data).unwrap();
        let mut mean = vec![0.0; 5];
        for v in &data {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / data.len() as f64;
            }
        }
        for (v, c) in data.iter().zip(&proj.coords) {
            for j in 0..5 {
                let rebuilt =
                    mean[j] + c[0] * proj.components[0][j] + c[1] * proj.components[1][j];
                assert!(
                    (rebuilt - v[j]).abs() < 1e-8,
                    "coordinate {j}: {rebuilt} vs {}",
                    v[j]
                );
            }
        }
        assert!(proj.explained[0] + proj.explained[1] > 1.0 - 1e-9);
    }

    #[test]
    fn ordering_invariance_up_to_sign_convention() {
        let data = random_cloud(4, 20, 5);
        let proj_a = pca_project(&data).unwrap();
        let mut reversed: Vec<Vec<f64>> = data.clone();
        reversed.reverse();
        let proj_b = pca_project(&reversed).unwrap();
        for k in 0..2 {
            for j in 0..5 {
                assert!(
                    (proj_a.components[k][j] - proj_b.components[k][j]).abs() < 1e-6,
                    "component {k} coordinate {j}"
                );
            }
        }
    }

    #[test]
    fn degenerate_and_small_inputs_are_rejected() {
        let same = vec![vec![1.0, 2.0, 3.0]; 5];
        assert!(matches!(
            pca_project(&same),
            Err(PvpError::Degenerate(_))
        ));
        let two = random_cloud(5, 2, 4);
        assert!(matches!(pca_project(&two), Err(PvpError::Argument(_))));
    }
}
