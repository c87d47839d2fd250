//! Per-image principal component analysis: rows are observations, columns
//! are features. Fitting runs a one-sided Jacobi SVD on the centered matrix
//! in f64, which is deterministic and accurate for the image sizes used here.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::Grid;

/// Threshold below which the centered image is treated as zero-variance.
const DEGENERATE_VARIANCE: f64 = 1e-18;

/// A fitted per-image PCA basis.
#[derive(Debug, Clone)]
pub struct PcaReduction {
    /// (k, d): orthonormal component rows, largest variance first. Each
    /// row's largest-magnitude coordinate is positive.
    components: Array2<f64>,
    /// (d): column means of the fitted image.
    mean: Array1<f64>,
    /// Per-component variance, non-increasing.
    explained_variance: Vec<f64>,
    /// Total variance of the fitted image (sum over all directions).
    total_variance: f64,
    degenerate: bool,
}

impl PcaReduction {
    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn components(&self) -> &Array2<f64> {
        &self.components
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// Fraction of total variance captured per component; empty when the
    /// fitted image had no variance.
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        if self.total_variance <= 0.0 {
            return vec![0.0; self.explained_variance.len()];
        }
        self.explained_variance
            .iter()
            .map(|v| v / self.total_variance)
            .collect()
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }
}

/// One-sided Jacobi orthogonalization of the columns of `a`; returns the
/// squared column norms (descending is NOT applied here) and the accumulated
/// right rotation matrix `v` whose columns are the right singular vectors.
fn jacobi_right_vectors(a: &mut Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let (m, d) = a.dim();
    let mut v = Array2::<f64>::eye(d);
    let tol = 1e-14;
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..d.saturating_sub(1) {
            for q in p + 1..d {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..m {
                    let x = a[[i, p]];
                    let y = a[[i, q]];
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if apq.abs() <= tol * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let x = a[[i, p]];
                    let y = a[[i, q]];
                    a[[i, p]] = c * x - s * y;
                    a[[i, q]] = s * x + c * y;
                }
                for i in 0..d {
                    let x = v[[i, p]];
                    let y = v[[i, q]];
                    v[[i, p]] = c * x - s * y;
                    v[[i, q]] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms2 = (0..d)
        .map(|j| (0..m).map(|i| a[[i, j]] * a[[i, j]]).sum())
        .collect();
    (norms2, v)
}

/// Fix the sign of each component row so its largest-magnitude coordinate
/// is positive (first index wins ties).
pub fn align_component_signs(components: &mut Array2<f64>) {
    for mut row in components.rows_mut() {
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for (i, &x) in row.iter().enumerate() {
            if x.abs() > best_abs {
                best_abs = x.abs();
                best = i;
            }
        }
        if row[best] < 0.0 {
            row.mapv_inplace(|x| -x);
        }
    }
}

/// Fit the top-`k` principal components of an image, treating rows as
/// observations and columns as features.
pub fn pca_fit(img: &Grid, k: usize) -> Result<PcaReduction> {
    let (rows, cols) = img.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::Data("pca_fit on empty grid".into()));
    }
    if img.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("pca_fit on non-finite grid".into()));
    }
    if k == 0 || k > rows.min(cols) {
        return Err(Error::Config(format!(
            "pca component count {k} out of range 1..={}",
            rows.min(cols)
        )));
    }

    let mut centered = Array2::<f64>::zeros((rows, cols));
    let mut mean = Array1::<f64>::zeros(cols);
    for j in 0..cols {
        let mut acc = 0.0;
        for i in 0..rows {
            acc += img[[i, j]] as f64;
        }
        mean[j] = acc / rows as f64;
    }
    for i in 0..rows {
        for j in 0..cols {
            centered[[i, j]] = img[[i, j]] as f64 - mean[j];
        }
    }
    let denom = if rows > 1 { (rows - 1) as f64 } else { 1.0 };
    let total_variance: f64 = centered.iter().map(|v| v * v).sum::<f64>() / denom;
    if total_variance <= DEGENERATE_VARIANCE {
        return Ok(PcaReduction {
            components: Array2::zeros((0, cols)),
            mean,
            explained_variance: Vec::new(),
            total_variance: 0.0,
            degenerate: true,
        });
    }

    let (norms2, v) = jacobi_right_vectors(&mut centered);
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| norms2[b].partial_cmp(&norms2[a]).unwrap());

    let mut components = Array2::<f64>::zeros((k, cols));
    let mut explained_variance = Vec::with_capacity(k);
    for (row, &j) in order.iter().take(k).enumerate() {
        for i in 0..cols {
            components[[row, i]] = v[[i, j]];
        }
        explained_variance.push(norms2[j] / denom);
    }
    align_component_signs(&mut components);

    Ok(PcaReduction {
        components,
        mean,
        explained_variance,
        total_variance,
        degenerate: false,
    })
}

/// Project `img` onto the fitted basis and invert, without the final clip.
/// Degenerate reductions reconstruct every row as the column mean.
pub fn pca_reconstruct_raw(img: &Grid, red: &PcaReduction) -> Result<Array2<f64>> {
    let (rows, cols) = img.dim();
    if cols != red.feature_dim() {
        return Err(Error::Data(format!(
            "reconstruction column count {cols} does not match fitted dimension {}",
            red.feature_dim()
        )));
    }
    let mut centered = Array2::<f64>::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            centered[[i, j]] = img[[i, j]] as f64 - red.mean[j];
        }
    }
    let mut recon = if red.k() == 0 {
        Array2::<f64>::zeros((rows, cols))
    } else {
        let scores = centered.dot(&red.components.t()); // (rows, k)
        scores.dot(&red.components) // (rows, cols)
    };
    for i in 0..rows {
        for j in 0..cols {
            recon[[i, j]] += red.mean[j];
        }
    }
    Ok(recon)
}

/// Reconstruct an image from its projection onto the fitted components,
/// clipped to `[0, 1]`.
pub fn pca_reconstruct(img: &Grid, red: &PcaReduction) -> Result<Grid> {
    let recon = pca_reconstruct_raw(img, red)?;
    Ok(recon.mapv(|v| v.clamp(0.0, 1.0) as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rank_one_image_captured_by_single_component() {
        // outer product u v^T has exactly one nonzero singular direction
        let u = [0.2f32, 0.5, 0.9, 0.4];
        let v = [0.1f32, 0.8, 0.3, 0.6, 0.2];
        let img = Grid::from_shape_fn((4, 5), |(i, j)| u[i] * v[j]);
        let red = pca_fit(&img, 1).unwrap();
        assert!(!red.is_degenerate());
        let ratio = red.explained_variance_ratio();
        assert!((ratio[0] - 1.0).abs() < 1e-9, "ratio {ratio:?}");
        let recon = pca_reconstruct(&img, &red).unwrap();
        for (a, b) in recon.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_image_is_degenerate_and_reconstructs_constant() {
        let img = Grid::from_elem((6, 6), 0.41f32);
        let red = pca_fit(&img, 3).unwrap();
        assert!(red.is_degenerate());
        assert_eq!(red.k(), 0);
        assert!(red.explained_variance().is_empty());
        let recon = pca_reconstruct(&img, &red).unwrap();
        for v in recon.iter() {
            assert!((v - 0.41).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_reconstruction_is_column_mean() {
        let img = array![[0.0f32, 1.0], [0.0, 1.0], [0.0, 1.0]];
        // columns constant but distinct: variance zero after centering
        let red = pca_fit(&img, 2).unwrap();
        assert!(red.is_degenerate());
        let recon = pca_reconstruct(&img, &red).unwrap();
        assert!((recon[[0, 0]] - 0.0).abs() < 1e-7);
        assert!((recon[[2, 1]] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn k_out_of_range_is_config_error() {
        let img = Grid::zeros((4, 4));
        assert!(matches!(pca_fit(&img, 5), Err(Error::Config(_))));
        assert!(matches!(pca_fit(&img, 0), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_input_is_data_error() {
        let mut img = Grid::zeros((4, 4));
        img[[1, 2]] = f32::NAN;
        assert!(matches!(pca_fit(&img, 2), Err(Error::Data(_))));
    }

    #[test]
    fn dimension_mismatch_is_data_error() {
        let img = Grid::from_shape_fn((6, 6), |(i, j)| (i * j) as f32 / 36.0);
        let red = pca_fit(&img, 2).unwrap();
        let other = Grid::zeros((6, 7));
        assert!(matches!(
            pca_reconstruct(&other, &red),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn components_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let img = Grid::from_shape_fn((10, 8), |_| rng.random_range(0.0..1.0f32));
        let red = pca_fit(&img, 5).unwrap();
        let g = red.components().dot(&red.components().t());
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (g[[i, j]] - expect).abs() < 1e-10,
                    "gram[{i},{j}] = {}",
                    g[[i, j]]
                );
            }
        }
    }

    #[test]
    fn explained_variance_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Grid::from_shape_fn((12, 12), |_| rng.random_range(0.0..1.0f32));
        let red = pca_fit(&img, 12).unwrap();
        let ev = red.explained_variance();
        for w in ev.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
    }

    #[test]
    fn full_rank_reconstruction_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let img = Grid::from_shape_fn((7, 7), |_| rng.random_range(0.05..0.95f32));
        let red = pca_fit(&img, 7).unwrap();
        let recon = pca_reconstruct(&img, &red).unwrap();
        for (a, b) in recon.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn sign_convention_largest_coordinate_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let img = Grid::from_shape_fn((9, 9), |_| rng.random_range(0.0..1.0f32));
        let red = pca_fit(&img, 4).unwrap();
        for row in red.components().rows() {
            let mut best = 0usize;
            let mut best_abs = -1.0f64;
            for (i, &x) in row.iter().enumerate() {
                if x.abs() > best_abs {
                    best_abs = x.abs();
                    best = i;
                }
            }
            assert!(row[best] > 0.0);
        }
    }

    #[test]
    fn residual_orthogonal_to_component_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let img = Grid::from_shape_fn((10, 10), |_| rng.random_range(0.0..1.0f32));
        let red = pca_fit(&img, 4).unwrap();
        let recon = pca_reconstruct_raw(&img, &red).unwrap();
        // residual rows dotted with each component stay near zero
        for i in 0..10 {
            for comp in red.components().rows() {
                let mut dot = 0.0f64;
                for j in 0..10 {
                    dot += (img[[i, j]] as f64 - recon[[i, j]]) * comp[j];
                }
                assert!(dot.abs() < 1e-5, "residual leak {dot}");
            }
        }
    }

    #[test]
    fn reconstruction_error_non_increasing_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let img = Grid::from_shape_fn((12, 10), |_| rng.random_range(0.0..1.0f32));
        let mut prev = f64::INFINITY;
        for k in 1..=10 {
            let red = pca_fit(&img, k).unwrap();
            let recon = pca_reconstruct_raw(&img, &red).unwrap();
            let err: f64 = img
                .iter()
                .zip(recon.iter())
                .map(|(&a, &b)| (a as f64 - b) * (a as f64 - b))
                .sum::<f64>()
                .sqrt();
            assert!(err <= prev + 1e-9, "k={k}: {err} > {prev}");
            prev = err;
        }
    }
}
