//! Outlier scoring in activation space: a strong backdoor signature shows
//! up as correlation with the top singular direction of the centered
//! feature matrix.

use nalgebra::{DMatrix, SVD};

use crate::tensor::Tensor;

use super::DefenseError;

/// Dimension ceiling before the final decomposition.
const PCA_DIMS: usize = 128;

/// Per-sample |correlation| with the top singular vector.
///
/// Rows are centered, reduced to `min(128, cols, rows-1)` principal
/// dimensions, then scored by absolute inner product with the top right
/// singular vector of the reduced matrix. A matrix with no entries has
/// no usable rank; a matrix whose rows are all identical centers to zero
/// and scores every sample 0.
pub fn spectral_signature(activations: &Tensor) -> Result<Vec<f64>, DefenseError> {
    let shape = activations.shape();
    assert_eq!(shape.len(), 2, "activations must be a matrix");
    let (n, d) = (shape[0], shape[1]);
    if n == 0 || d == 0 {
        return Err(DefenseError::RankZero);
    }

    let data = activations.data();
    let mut mean = vec![0.0; d];
    for row in data.chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| data[i * d + j] - mean[j]);

    let q = PCA_DIMS.min(d).min(n.saturating_sub(1));
    if q == 0 {
        // a single row carries no signal once centered
        return Ok(vec![0.0; n]);
    }

    // singular values come back in descending order, so the leading rows
    // of v_t span the top principal subspace
    let svd = SVD::new(centered.clone(), false, true);
    let vt = svd.v_t.expect("right singular vectors requested");
    let vq = vt.rows(0, q).transpose();
    let reduced = &centered * &vq;

    let svd2 = SVD::new(reduced.clone(), false, true);
    let top = svd2.v_t.expect("right singular vectors requested").row(0).transpose();
    Ok((0..n).map(|i| (reduced.row(i) * &top)[(0, 0)].abs()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defense::auroc;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        let u1: f64 = rng.gen::<f64>().max(1e-12);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    #[test]
    fn identical_rows_score_zero() {
        let rows = 5;
        let m = Tensor::new(&[rows, 3], [3.0, -1.0, 0.5].repeat(rows));
        let scores = spectral_signature(&m).unwrap();
        assert_eq!(scores, vec![0.0; rows]);
    }

    #[test]
    fn rank_one_scores_equal_centered_coefficients() {
        // rows a_i·u with unit u: after centering the score must be
        // exactly |a_i − mean(a)|
        let u = [0.6, 0.8];
        let a = [0.0, 1.0, 2.0, 5.0];
        let data: Vec<f64> = a.iter().flat_map(|&c| u.iter().map(move |&x| c * x)).collect();
        let scores = spectral_signature(&Tensor::new(&[4, 2], data)).unwrap();
        let expect = [2.0, 1.0, 0.0, 3.0];
        for (s, e) in scores.iter().zip(expect) {
            assert!((s - e).abs() < 1e-9, "{s} vs {e}");
        }
    }

    #[test]
    fn separated_clusters_give_high_auroc() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = 10;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..60 {
            data.extend((0..d).map(|_| 0.1 * gauss(&mut rng)));
            labels.push(false);
        }
        for _ in 0..20 {
            data.extend((0..d).map(|j| if j == 0 { 3.0 } else { 0.0 } + 0.1 * gauss(&mut rng)));
            labels.push(true);
        }
        let scores = spectral_signature(&Tensor::new(&[80, d], data)).unwrap();
        let a = auroc(&scores, &labels).unwrap();
        assert!(a >= 0.95, "cluster auroc {a}");
    }

    #[test]
    fn scores_ignore_constant_row_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d) = (20, 6);
        let base: Vec<f64> = (0..n * d).map(|_| gauss(&mut rng)).collect();
        let shift: Vec<f64> = (0..d).map(|_| 10.0 * gauss(&mut rng)).collect();
        let shifted: Vec<f64> =
            base.chunks_exact(d).flat_map(|r| r.iter().zip(&shift).map(|(&v, &s)| v + s)).collect();
        let a = spectral_signature(&Tensor::new(&[n, d], base)).unwrap();
        let b = spectral_signature(&Tensor::new(&[n, d], shifted)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn dimension_ceiling_applies_above_128_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (n, d) = (140, 200);
        let data: Vec<f64> = (0..n * d).map(|_| gauss(&mut rng)).collect();
        let scores = spectral_signature(&Tensor::new(&[n, d], data)).unwrap();
        assert_eq!(scores.len(), n);
        assert!(scores.iter().all(|s| s.is_finite() && *s >= 0.0));
    }

    #[test]
    fn degenerate_shapes() {
        assert!(matches!(
            spectral_signature(&Tensor::new(&[0, 4], vec![])),
            Err(DefenseError::RankZero)
        ));
        let single = spectral_signature(&Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(single, vec![0.0]);
    }
}
