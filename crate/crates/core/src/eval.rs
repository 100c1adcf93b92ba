//! Trajectory and image metrics.

use nalgebra::{DMatrix, Matrix3};

use crate::error::{Error, Result};
use crate::geometry::{SE3Pose, Vec3};
use crate::raster::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Alignment {
    /// Compare positions as given.
    None,
    /// Least-squares rotation and translation.
    #[default]
    Rigid,
    /// Rigid plus a global scale.
    Similarity,
}

#[derive(Clone, Debug)]
pub struct AteResult {
    pub rmse: f64,
    pub errors: Vec<f64>,
    /// Maps estimated positions onto the reference: `p_ref ≈ scale · R p + t`.
    pub alignment: SE3Pose,
    pub scale: f64,
}

/// Closed-form alignment of `src` onto `dst`, returning `(R, t, scale)`.
pub fn umeyama(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Result<(Matrix3<f64>, Vec3, f64)> {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vec3>() / n;
    let mu_d = dst.iter().sum::<Vec3>() / n;
    let var_s = src.iter().map(|p| (p - mu_s).norm_squared()).sum::<f64>() / n;
    if var_s < 1e-20 || dst.iter().all(|p| (p - mu_d).norm_squared() < 1e-20) {
        return Err(Error::DegenerateTrajectory("all positions coincide"));
    }
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut sign = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * v_t;
    let scale = if with_scale {
        (Matrix3::from_diagonal(&svd.singular_values) * sign).trace() / var_s
    } else {
        1.0
    };
    let t = mu_d - scale * r * mu_s;
    Ok((r, t, scale))
}

/// Absolute trajectory error over index-associated positions.
pub fn ate_rmse(
    estimated: &[SE3Pose],
    reference: &[SE3Pose],
    alignment: Alignment,
) -> Result<AteResult> {
    if estimated.len() != reference.len() || estimated.len() < 2 {
        return Err(Error::LengthMismatch {
            estimated: estimated.len(),
            reference: reference.len(),
        });
    }
    let est: Vec<Vec3> = estimated.iter().map(|p| *p.translation()).collect();
    let gt: Vec<Vec3> = reference.iter().map(|p| *p.translation()).collect();
    let (r, t, scale) = match alignment {
        Alignment::None => {
            if gt.iter().all(|p| (p - gt[0]).norm_squared() < 1e-20) {
                return Err(Error::DegenerateTrajectory("all positions coincide"));
            }
            (Matrix3::identity(), Vec3::zeros(), 1.0)
        }
        Alignment::Rigid => umeyama(&est, &gt, false)?,
        Alignment::Similarity => umeyama(&est, &gt, true)?,
    };
    let errors: Vec<f64> = est
        .iter()
        .zip(&gt)
        .map(|(e, g)| (scale * r * e + t - g).norm())
        .collect();
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
    Ok(AteResult {
        rmse,
        errors,
        alignment: SE3Pose::from_rotation_matrix(&r, t),
        scale,
    })
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    b.check_shape("image", a.width(), a.height(), a.channels())?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB for images in [0, 1]; `+inf` when equal.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// PSNR over pixels where `keep` is true.
pub fn masked_psnr(a: &Image, b: &Image, keep: &[bool]) -> Result<f64> {
    b.check_shape("image", a.width(), a.height(), a.channels())?;
    let c = a.channels();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, _) in keep.iter().enumerate().filter(|(_, k)| **k) {
        for ch in 0..c {
            let d = a.data()[i * c + ch] - b.data()[i * c + ch];
            sum += d * d;
        }
        n += c;
    }
    if n == 0 {
        return Err(Error::EmptyPixelSet);
    }
    if sum == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (n as f64 / sum).log10())
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WIN / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WIN)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a `w × h` plane.
fn filter_valid(plane: &DMatrix<f64>, win: &[f64]) -> DMatrix<f64> {
    let (h, w) = plane.shape();
    let k = win.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let rows = DMatrix::from_fn(h, ow, |r, c| {
        (0..k).map(|j| win[j] * plane[(r, c + j)]).sum::<f64>()
    });
    DMatrix::from_fn(oh, ow, |r, c| {
        (0..k).map(|j| win[j] * rows[(r + j, c)]).sum::<f64>()
    })
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    b.check_shape("image", a.width(), a.height(), a.channels())?;
    if a.width().min(a.height()) < SSIM_WIN {
        return Err(Error::TooSmall {
            min: a.width().min(a.height()),
            required: SSIM_WIN,
        });
    }
    let win = gaussian_window();
    let (w, h, c) = (a.width(), a.height(), a.channels());
    let mut total = 0.0;
    for ch in 0..c {
        let pa = DMatrix::from_fn(h, w, |r, col| a.get(col, r, ch));
        let pb = DMatrix::from_fn(h, w, |r, col| b.get(col, r, ch));
        let mu_a = filter_valid(&pa, &win);
        let mu_b = filter_valid(&pb, &win);
        let saa = filter_valid(&pa.component_mul(&pa), &win);
        let sbb = filter_valid(&pb.component_mul(&pb), &win);
        let sab = filter_valid(&pa.component_mul(&pb), &win);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            acc += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square() -> Vec<SE3Pose> {
        [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
            .iter()
            .map(|(x, y)| SE3Pose::from_translation(Vec3::new(*x, *y, 0.0)))
            .collect()
    }

    #[test]
    fn identical_trajectories() {
        let a = square();
        assert!(ate_rmse(&a, &a, Alignment::Rigid).unwrap().rmse < 1e-12);
    }

    #[test]
    fn offset_without_alignment() {
        let gt = square();
        let est: Vec<SE3Pose> = gt
            .iter()
            .map(|p| SE3Pose::from_translation(p.translation() + Vec3::new(0.0, 0.0, 0.1)))
            .collect();
        let r = ate_rmse(&est, &gt, Alignment::None).unwrap();
        assert!((r.rmse - 0.1).abs() < 1e-12);
        assert!(ate_rmse(&est, &gt, Alignment::Rigid).unwrap().rmse < 1e-9);
    }

    #[test]
    fn rigid_motion_is_absorbed() {
        let gt: Vec<SE3Pose> = (0..10)
            .map(|i| {
                let f = i as f64;
                SE3Pose::from_translation(Vec3::new(f.sin(), 0.3 * f, f * f * 0.05))
            })
            .collect();
        let g = SE3Pose::exp(&nalgebra::Vector6::new(1.0, -2.0, 0.5, 0.3, -0.2, 0.9));
        let est: Vec<SE3Pose> = gt.iter().map(|p| g.compose(p)).collect();
        let r = ate_rmse(&est, &gt, Alignment::Rigid).unwrap();
        assert!(r.rmse < 1e-9, "{}", r.rmse);
        let scaled: Vec<SE3Pose> = gt
            .iter()
            .map(|p| SE3Pose::from_translation(p.translation() * 2.5))
            .collect();
        let s = ate_rmse(&scaled, &gt, Alignment::Similarity).unwrap();
        assert!(s.rmse < 1e-9 && (s.scale - 0.4).abs() < 1e-9);
    }

    #[test]
    fn ate_errors() {
        let a = square();
        assert!(matches!(
            ate_rmse(&a, &a[..3], Alignment::Rigid),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(ate_rmse(&a[..1], &a[..1], Alignment::Rigid).is_err());
        let still = vec![SE3Pose::identity(); 4];
        assert!(matches!(
            ate_rmse(&still, &still, Alignment::Rigid),
            Err(Error::DegenerateTrajectory(_))
        ));
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(8, 8, 3, 0.2);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::filled(8, 8, 3, 0.3);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let black = Image::filled(8, 8, 3, 0.0);
        let white = Image::filled(8, 8, 3, 1.0);
        assert!(psnr(&black, &white).unwrap().abs() < 1e-12);
        assert!(psnr(&a, &Image::zeros(8, 7, 3)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = Image::from_vec(
            16,
            16,
            1,
            (0..256).map(|i| ((i * 37 % 101) as f64) / 100.0).collect(),
        )
        .unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let neg = Image::from_vec(16, 16, 1, a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &neg).unwrap() < 0.0);
        assert!(matches!(
            ssim(&Image::zeros(10, 20, 1), &Image::zeros(10, 20, 1)),
            Err(Error::TooSmall { .. })
        ));
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Image::from_vec(12, 12, 2, (0..288).map(|_| rng.gen::<f64>()).collect()).unwrap();
            let b = Image::from_vec(12, 12, 2, (0..288).map(|_| rng.gen::<f64>()).collect()).unwrap();
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        }
    }
}
