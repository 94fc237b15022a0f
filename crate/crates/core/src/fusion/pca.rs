//! Feature-space cluster analysis: pixels of a C×H×W feature map are
//! projected onto the top-2 principal components, then each cluster
//! (object/background per the mask) reports the mean distance of its pixels
//! to its own centroid.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct PcaResult {
    pub object_avg_dist: f64,
    pub background_avg_dist: f64,
    /// 2-D projection per pixel, row-major over H×W.
    pub projected: Vec<[f64; 2]>,
}

pub fn pca_cluster_distance(features: &Tensor, object_mask: &[bool]) -> Result<PcaResult> {
    let (c, h, w) = match features.shape() {
        &[c, h, w] => (c, h, w),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "expected C×H×W features, got {:?}",
                other
            )))
        }
    };
    if c < 2 {
        return Err(Error::InvalidArgument(format!(
            "PCA needs at least 2 channels, got {}",
            c
        )));
    }
    let m = h * w;
    if object_mask.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "mask length {} vs {}×{} pixels",
            object_mask.len(),
            h,
            w
        )));
    }
    let objects = object_mask.iter().filter(|&&b| b).count();
    if objects == 0 || objects == m {
        return Err(Error::InvalidArgument(
            "mask must leave both clusters non-empty".into(),
        ));
    }

    // Pixels as rows of length C, mean-centered.
    let plane = h * w;
    let mut means = vec![0.0; c];
    for ci in 0..c {
        means[ci] = features.data()[ci * plane..(ci + 1) * plane].iter().sum::<f64>() / m as f64;
    }
    let centered = |p: usize, ci: usize| features.data()[ci * plane + p] - means[ci];

    // Covariance (C×C, population normalization).
    let mut cov = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let mut s = 0.0;
            for p in 0..m {
                s += centered(p, i) * centered(p, j);
            }
            s /= m as f64;
            cov[i * c + j] = s;
            cov[j * c + i] = s;
        }
    }

    let (eigvals, eigvecs) = jacobi_eigen(&cov, c);
    // Indices of the two largest eigenvalues.
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap());
    let axes: [usize; 2] = [order[0], order[1]];

    let mut projected = Vec::with_capacity(m);
    for p in 0..m {
        let mut point = [0.0; 2];
        for (d, &ax) in point.iter_mut().zip(&axes) {
            // Degenerate directions project to zero.
            if eigvals[ax].abs() < 1e-12 {
                continue;
            }
            let mut s = 0.0;
            for ci in 0..c {
                s += centered(p, ci) * eigvecs[ci * c + ax];
            }
            *d = s;
        }
        projected.push(point);
    }

    let mean_dist = |want: bool| -> f64 {
        let pts: Vec<&[f64; 2]> = projected
            .iter()
            .zip(object_mask)
            .filter(|(_, &flag)| flag == want)
            .map(|(p, _)| p)
            .collect();
        let n = pts.len() as f64;
        let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
        let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
        pts.iter()
            .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
            .sum::<f64>()
            / n
    };

    Ok(PcaResult {
        object_avg_dist: mean_dist(true),
        background_avg_dist: mean_dist(false),
        projected,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major n×n).
/// Returns (eigenvalues, eigenvectors as columns).
fn jacobi_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = cos * akp - sin * akq;
                    a[k * n + q] = sin * akp + cos * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = cos * apk - sin * aqk;
                    a[q * n + k] = sin * apk + cos * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = cos * vkp - sin * vkq;
                    v[k * n + q] = sin * vkp + cos * vkq;
                }
            }
        }
    }
    let eigvals = (0..n).map(|i| a[i * n + i]).collect();
    (eigvals, v)
}

#[cfg(test)]
mod tests {
    use nalgebra::{DMatrix, SymmetricEigen};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Independent oracle built on nalgebra's symmetric eigendecomposition:
    /// centers the pixel rows, projects onto the top-2 eigenvectors of the
    /// population covariance, and reports the per-cluster mean centroid
    /// distance.
    fn oracle(features: &Tensor, mask: &[bool]) -> (f64, f64) {
        let (c, h, w) = match features.shape() {
            &[c, h, w] => (c, h, w),
            _ => unreachable!(),
        };
        let m = h * w;
        let plane = m;
        let mut rows = DMatrix::zeros(m, c);
        for p in 0..m {
            for ci in 0..c {
                rows[(p, ci)] = features.data()[ci * plane + p];
            }
        }
        let mean = rows.row_mean();
        for p in 0..m {
            for ci in 0..c {
                rows[(p, ci)] -= mean[ci];
            }
        }
        let cov = rows.transpose() * &rows / m as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let basis = DMatrix::from_columns(&[
            eig.eigenvectors.column(order[0]).clone_owned(),
            eig.eigenvectors.column(order[1]).clone_owned(),
        ]);
        let projected = rows * basis;
        let mean_dist = |want: bool| {
            let pts: Vec<usize> = (0..m).filter(|&p| mask[p] == want).collect();
            let n = pts.len() as f64;
            let cx = pts.iter().map(|&p| projected[(p, 0)]).sum::<f64>() / n;
            let cy = pts.iter().map(|&p| projected[(p, 1)]).sum::<f64>() / n;
            pts.iter()
                .map(|&p| ((projected[(p, 0)] - cx).powi(2) + (projected[(p, 1)] - cy).powi(2)).sqrt())
                .sum::<f64>()
                / n
        };
        (mean_dist(true), mean_dist(false))
    }

    fn rel_close(a: f64, b: f64, tol: f64) {
        let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
        assert!(rel <= tol, "{} vs {} (rel {})", a, b, rel);
    }

    #[test]
    fn identical_pixels_give_zero_distances() {
        let features = Tensor::filled(&[3, 2, 2], 0.7);
        let mask = [true, false, false, true];
        let result = pca_cluster_distance(&features, &mask).unwrap();
        assert_eq!(result.object_avg_dist, 0.0);
        assert_eq!(result.background_avg_dist, 0.0);
        assert!(result.projected.iter().all(|p| p == &[0.0, 0.0]));
    }

    #[test]
    fn two_point_clouds_match_their_rms_radius() {
        // Two clusters at (±5, 0) in channel space with radius-1 jitter.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 8;
        let w = 8;
        let m = h * w;
        let mut data = vec![0.0; 2 * m];
        let mut mask = vec![false; m];
        let mut jitter_dists = Vec::new();
        for p in 0..m {
            let object = p < m / 2;
            mask[p] = object;
            let center = if object { 5.0 } else { -5.0 };
            let dx: f64 = rng.gen_range(-1.0..1.0);
            let dy: f64 = rng.gen_range(-1.0..1.0);
            data[p] = center + dx;
            data[m + p] = dy;
            jitter_dists.push((dx, dy));
        }
        let features = Tensor::from_vec(&[2, h, w], data).unwrap();
        let result = pca_cluster_distance(&features, &mask).unwrap();
        let (oracle_obj, oracle_bg) = oracle(&features, &mask);
        rel_close(result.object_avg_dist, oracle_obj, 1e-8);
        rel_close(result.background_avg_dist, oracle_bg, 1e-8);
        // The projection is a rigid transform of the plane, so the cluster
        // spread matches the raw jitter's mean distance to its centroid.
        let cluster_mean_dist = |want: bool| {
            let pts: Vec<(f64, f64)> = (0..m)
                .filter(|&p| mask[p] == want)
                .map(|p| jitter_dists[p])
                .collect();
            let n = pts.len() as f64;
            let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
            pts.iter()
                .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
                .sum::<f64>()
                / n
        };
        rel_close(result.object_avg_dist, cluster_mean_dist(true), 0.1);
        rel_close(result.background_avg_dist, cluster_mean_dist(false), 0.1);
    }

    #[test]
    fn agrees_with_oracle_on_random_features_up_to_16_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for c in [2usize, 3, 8, 16] {
            let h = 6;
            let w = 5;
            let features = Tensor::rand_uniform(&[c, h, w], -2.0, 2.0, &mut rng);
            let mask: Vec<bool> = (0..h * w).map(|p| p % 3 == 0).collect();
            let result = pca_cluster_distance(&features, &mask).unwrap();
            let (oracle_obj, oracle_bg) = oracle(&features, &mask);
            rel_close(result.object_avg_dist, oracle_obj, 1e-8);
            rel_close(result.background_avg_dist, oracle_bg, 1e-8);
        }
    }

    #[test]
    fn distances_are_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 4;
        let h = 6;
        let w = 6;
        let m = h * w;
        let features = Tensor::rand_uniform(&[c, h, w], -1.0, 1.0, &mut rng);
        let mask: Vec<bool> = (0..m).map(|p| p % 2 == 0).collect();
        // Random orthogonal matrix from a QR decomposition.
        let random = DMatrix::from_fn(c, c, |_, _| rng.gen_range(-1.0..1.0));
        let q = random.qr().q();
        let mut rotated = vec![0.0; c * m];
        for p in 0..m {
            for i in 0..c {
                let mut s = 0.0;
                for j in 0..c {
                    s += q[(i, j)] * features.data()[j * m + p];
                }
                rotated[i * m + p] = s;
            }
        }
        let rotated = Tensor::from_vec(&[c, h, w], rotated).unwrap();
        let a = pca_cluster_distance(&features, &mask).unwrap();
        let b = pca_cluster_distance(&rotated, &mask).unwrap();
        rel_close(a.object_avg_dist, b.object_avg_dist, 1e-6);
        rel_close(a.background_avg_dist, b.background_avg_dist, 1e-6);
    }

    #[test]
    fn input_validation() {
        let features = Tensor::zeros(&[1, 2, 2]);
        assert!(pca_cluster_distance(&features, &[true, false, true, false]).is_err());
        let features = Tensor::zeros(&[3, 2, 2]);
        assert!(pca_cluster_distance(&features, &[true, false]).is_err());
        assert!(pca_cluster_distance(&features, &[true; 4]).is_err());
        assert!(pca_cluster_distance(&features, &[false; 4]).is_err());
        assert!(pca_cluster_distance(&Tensor::zeros(&[2, 2]), &[true, false]).is_err());
    }
}
