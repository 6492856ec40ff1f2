//! Image quality metrics.

use crate::error::{Error, Result};
use crate::tensor::{check_same_dims, Real, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        return Ok(());
    }
    match (a.dims4(), b.dims4()) {
        (Ok(da), Ok(db)) => check_same_dims(da, db, what),
        _ => Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ))),
    }
}

/// `10·log10(1 / MSE)` for images in `[0, 1]`; `+∞` when the images are identical.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b, "psnr")?;
    if a.numel() == 0 {
        return Err(Error::Shape("psnr of an empty image".into()));
    }
    let mut sum = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.as_f64() - y.as_f64();
        sum += d * d;
    }
    let mse = sum / a.numel() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

fn ssim_term(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// SSIM of one channel plane using global statistics (population moments).
pub fn ssim_global_plane(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cxy += (a - mx) * (b - my);
    }
    ssim_term(mx, my, vx / n, vy / n, cxy / n)
}

/// Mean SSIM over all valid 11×11 Gaussian windows of one plane.
fn ssim_windowed_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    // Separable filtering: rows first, then columns, for the five moment maps.
    let maps: [Vec<f64>; 5] = [
        x.to_vec(),
        y.to_vec(),
        x.iter().map(|v| v * v).collect(),
        y.iter().map(|v| v * v).collect(),
        x.iter().zip(y).map(|(a, b)| a * b).collect(),
    ];
    let filtered: Vec<Vec<f64>> = maps
        .iter()
        .map(|m| {
            let mut rows = vec![0.0; h * ow];
            for r in 0..h {
                for c in 0..ow {
                    rows[r * ow + c] = (0..SSIM_WINDOW).map(|k| g[k] * m[r * w + c + k]).sum();
                }
            }
            let mut out = vec![0.0; oh * ow];
            for r in 0..oh {
                for c in 0..ow {
                    out[r * ow + c] = (0..SSIM_WINDOW)
                        .map(|k| g[k] * rows[(r + k) * ow + c])
                        .sum();
                }
            }
            out
        })
        .collect();
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (mx, my) = (filtered[0][i], filtered[1][i]);
        let vx = filtered[2][i] - mx * mx;
        let vy = filtered[3][i] - my * my;
        let cxy = filtered[4][i] - mx * my;
        total += ssim_term(mx, my, vx, vy, cxy);
    }
    total / (oh * ow) as f64
}

/// Structural similarity of two `(N, C, H, W)` images, averaged over windows,
/// channels and batch entries. Images smaller than the 11×11 window fall back
/// to global per-channel statistics.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let (n, c, h, w) = a.dims4()?;
    if n * c * h * w == 0 {
        return Err(Error::Shape("ssim of an empty image".into()));
    }
    let plane = h * w;
    let mut total = 0.0;
    for p in 0..n * c {
        let x: Vec<f64> = a.data()[p * plane..(p + 1) * plane]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let y: Vec<f64> = b.data()[p * plane..(p + 1) * plane]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        total += if h < SSIM_WINDOW || w < SSIM_WINDOW {
            ssim_global_plane(&x, &y)
        } else {
            ssim_windowed_plane(&x, &y, h, w)
        };
    }
    Ok(total / (n * c) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_normalized_and_symmetric() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(g[i], g[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let a = Tensor::<f64>::from_fn(vec![1, 3, 4, 4], |i| i as f64 / 48.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = Tensor::<f64>::zeros(vec![1, 3, 4, 4]);
        let b = Tensor::<f64>::zeros(vec![1, 3, 4, 5]);
        assert!(matches!(
            psnr(&a, &b),
            Err(Error::Dimension { axis: "width", .. })
        ));
    }

    #[test]
    fn ssim_small_image_uses_global_stats() {
        let a = Tensor::<f64>::from_fn(vec![1, 1, 3, 3], |i| i as f64 / 9.0);
        let b = a.map(|v| 1.0 - v);
        let want = ssim_global_plane(a.data(), b.data());
        assert_eq!(ssim(&a, &b).unwrap(), want);
        assert!(want < 0.0);
    }
}
