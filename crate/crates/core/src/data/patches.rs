use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetSplit, SplitMeta};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchOptions {
    pub patch: usize,
    pub count: usize,
    /// Lower bound on the per-patch standard deviation used for contrast normalization.
    pub contrast_floor: f64,
    /// Covariance regularizer as a multiple of the mean eigenvalue.
    pub eps_scale: f64,
    /// Patches with a standard deviation at or below this are dropped.
    pub min_std: f64,
}

impl Default for PatchOptions {
    fn default() -> Self {
        Self {
            patch: 16,
            count: 20_000,
            contrast_floor: 0.05,
            eps_scale: 1e-2,
            min_std: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchReport {
    pub extracted: usize,
    pub dropped: usize,
    pub condition_number: f64,
}

/// Zero-phase whitening `y = (x − mean) W` with `W = U (Λ + ε)^{-1/2} Uᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct WhiteningTransform {
    pub mean: Vec<f64>,
    pub matrix: Matrix,
    pub inverse: Matrix,
    pub epsilon: f64,
    pub condition_number: f64,
    descriptor: String,
}

impl WhiteningTransform {
    /// Fits on the rows of `patches`.
    pub fn fit(patches: &Matrix, opts: &PatchOptions) -> Result<Self> {
        let (n, m) = patches.shape();
        if n < 2 {
            return Err(Error::data("whitening needs at least two patches"));
        }
        let mean: Vec<f64> = patches.column_sums().iter().map(|s| s / n as f64).collect();
        let centered = Matrix::from_fn(n, m, |i, j| patches.get(i, j) - mean[j]);
        let cov = centered.matmul_tn(&centered)?.scale(1.0 / (n - 1) as f64);
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(m, m, cov.as_slice()));
        let lambda: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
        let mean_eig = lambda.iter().sum::<f64>() / m as f64;
        if !(mean_eig > 0.0) {
            return Err(Error::data("patch covariance is zero"));
        }
        let epsilon = opts.eps_scale * mean_eig;
        let u = Matrix::from_fn(m, m, |i, j| eig.eigenvectors[(i, j)]);
        let build = |f: &dyn Fn(f64) -> f64| -> Result<Matrix> {
            let scaled = Matrix::from_fn(m, m, |i, j| u.get(i, j) * f(lambda[j] + epsilon));
            let mut w = scaled.matmul_nt(&u)?;
            // symmetrize rounding noise
            for i in 0..m {
                for j in 0..i {
                    let v = 0.5 * (w.get(i, j) + w.get(j, i));
                    w.set(i, j, v);
                    w.set(j, i, v);
                }
            }
            Ok(w)
        };
        let matrix = build(&|v| 1.0 / v.sqrt())?;
        let inverse = build(&|v| v.sqrt())?;
        let (lo, hi) = lambda.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let condition_number = (hi + epsilon) / (lo + epsilon);
        let mut hasher = Sha256::new();
        for v in mean.iter().chain(matrix.as_slice()) {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        let descriptor = format!(
            "{p}x{p} patches; mean removal; contrast floor {floor}; zero-phase whitening eps {epsilon:e}; fit {hash}",
            p = opts.patch,
            floor = opts.contrast_floor,
            hash = digest[..8].iter().map(|b| format!("{b:02x}")).collect::<String>(),
        );
        Ok(Self {
            mean,
            matrix,
            inverse,
            epsilon,
            condition_number,
            descriptor,
        })
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let centered = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) - self.mean[j]);
        centered.matmul(&self.matrix)
    }

    pub fn unwhiten(&self, y: &Matrix) -> Result<Matrix> {
        let mut x = y.matmul(&self.inverse)?;
        let m = x.cols();
        for (i, v) in x.as_mut_slice().iter_mut().enumerate() {
            *v += self.mean[i % m];
        }
        Ok(x)
    }
}

/// Random `patch × patch` crops of `height × width` images, each with its
/// mean removed and divided by its standard deviation (floored). Constant
/// crops are dropped and counted.
pub fn extract_patches(
    images: &Matrix,
    height: usize,
    width: usize,
    opts: &PatchOptions,
    rng: &mut RngStream,
) -> Result<(Matrix, usize)> {
    let p = opts.patch;
    if p == 0 || p > height || p > width {
        return Err(Error::data(format!(
            "patch size {p} does not fit {height}x{width} images"
        )));
    }
    if images.cols() != height * width {
        return Err(Error::data(format!(
            "images have {} pixels, expected {height}x{width}",
            images.cols()
        )));
    }
    if images.rows() == 0 {
        return Err(Error::data("no images to extract patches from"));
    }
    let m = p * p;
    let mut out = Vec::with_capacity(opts.count * m);
    let mut dropped = 0;
    let mut got = 0;
    let max_attempts = opts.count.saturating_mul(50).max(1000);
    let mut buf = vec![0.0; m];
    for _ in 0..max_attempts {
        if got == opts.count {
            break;
        }
        let img = images.row(rng.below(images.rows()));
        let top = rng.below(height - p + 1);
        let left = rng.below(width - p + 1);
        for r in 0..p {
            let start = (top + r) * width + left;
            buf[r * p..(r + 1) * p].copy_from_slice(&img[start..start + p]);
        }
        let mean = buf.iter().sum::<f64>() / m as f64;
        let std = (buf.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64).sqrt();
        if std <= opts.min_std {
            dropped += 1;
            continue;
        }
        let d = std.max(opts.contrast_floor);
        out.extend(buf.iter().map(|v| (v - mean) / d));
        got += 1;
    }
    if got < opts.count {
        return Err(Error::data(format!(
            "found only {got} non-constant patches of {} requested ({dropped} dropped)",
            opts.count
        )));
    }
    Ok((Matrix::new(got, m, out)?, dropped))
}

/// Extracts, normalizes and whitens patches. The transform is fitted on
/// these patches unless `fitted` is given (use the training transform for
/// validation data).
pub fn extract_whitened_patches(
    images: &DatasetSplit,
    height: usize,
    width: usize,
    opts: &PatchOptions,
    fitted: Option<&WhiteningTransform>,
    rng: &mut RngStream,
) -> Result<(DatasetSplit, WhiteningTransform, PatchReport)> {
    let (patches, dropped) = extract_patches(images.samples(), height, width, opts, rng)?;
    let transform = match fitted {
        Some(t) => t.clone(),
        None => WhiteningTransform::fit(&patches, opts)?,
    };
    let white = transform.apply(&patches)?;
    let report = PatchReport {
        extracted: white.rows(),
        dropped,
        condition_number: transform.condition_number,
    };
    let split = DatasetSplit::new(
        white,
        None,
        SplitMeta {
            source: format!("{}:patches", images.meta.source),
            patch_size: opts.patch,
            preprocessing: transform.descriptor().to_string(),
            checksum: None,
        },
    )?;
    Ok((split, transform, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_images(n: usize, side: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed, 0);
        Matrix::from_fn(n, side * side, |_, _| rng.uniform())
    }

    fn split(m: Matrix) -> DatasetSplit {
        DatasetSplit::new(
            m,
            None,
            SplitMeta {
                source: "noise".into(),
                patch_size: 0,
                preprocessing: String::new(),
                checksum: None,
            },
        )
        .unwrap()
    }

    fn opts(count: usize) -> PatchOptions {
        PatchOptions {
            patch: 8,
            count,
            ..PatchOptions::default()
        }
    }

    #[test]
    fn whitened_covariance_is_near_identity() {
        let imgs = split(noise_images(200, 12, 1));
        let (s, _, rep) =
            extract_whitened_patches(&imgs, 12, 12, &opts(8000), None, &mut RngStream::new(2, 0))
                .unwrap();
        assert_eq!(rep.extracted, 8000);
        let x = s.samples();
        let n = x.rows() as f64;
        let mean: Vec<f64> = x.column_sums().iter().map(|v| v / n).collect();
        let c = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) - mean[j]);
        let cov = c.matmul_tn(&c).unwrap().scale(1.0 / (n - 1.0));
        let dev = cov.sub(&Matrix::identity(64)).unwrap().max_abs();
        assert!(dev <= 0.05, "max |Cov - I| = {dev}");
    }

    #[test]
    fn round_trip_recovers_centered_patches() {
        let imgs = noise_images(50, 10, 3);
        let (p, _) = extract_patches(&imgs, 10, 10, &opts(500), &mut RngStream::new(4, 0)).unwrap();
        let t = WhiteningTransform::fit(&p, &opts(500)).unwrap();
        let back = t.unwhiten(&t.apply(&p).unwrap()).unwrap();
        assert!(back.sub(&p).unwrap().max_abs() < 1e-6);
        assert_eq!(t.matrix, t.matrix.transpose());
    }

    #[test]
    fn constant_patches_are_dropped() {
        // left half constant, right half noisy
        let mut rng = RngStream::new(5, 0);
        let imgs = Matrix::from_fn(
            20,
            16 * 16,
            |_, k| if k % 16 < 8 { 0.3 } else { rng.uniform() },
        );
        let (p, dropped) =
            extract_patches(&imgs, 16, 16, &opts(300), &mut RngStream::new(6, 0)).unwrap();
        assert!(dropped > 0);
        for i in 0..p.rows() {
            assert!(p.row(i).iter().any(|v| *v != 0.0));
        }
        let all_flat = Matrix::filled(3, 256, 0.5);
        assert!(extract_patches(&all_flat, 16, 16, &opts(10), &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn validation_uses_training_transform() {
        let train = split(noise_images(40, 12, 7));
        let val = split(noise_images(40, 12, 8));
        let (a, t, _) =
            extract_whitened_patches(&train, 12, 12, &opts(400), None, &mut RngStream::new(1, 1))
                .unwrap();
        let (b, t2, _) = extract_whitened_patches(
            &val,
            12,
            12,
            &opts(100),
            Some(&t),
            &mut RngStream::new(1, 2),
        )
        .unwrap();
        assert_eq!(t, t2);
        assert_eq!(a.meta.preprocessing, b.meta.preprocessing);
    }

    #[test]
    fn oversized_patch_rejected() {
        assert!(extract_patches(
            &noise_images(2, 4, 0),
            4,
            4,
            &opts(1),
            &mut RngStream::new(0, 0)
        )
        .is_err());
    }
}
