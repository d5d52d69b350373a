//! Image quality and sequence statistics.

use crate::dataset::Rect;
use crate::losses::{SSIM_C1, SSIM_C2, SSIM_WINDOW};

/// Reported in place of `+∞` for identical images.
pub const PSNR_CAP: f64 = 99.0;
/// Luminance below which a pixel counts as mouth cavity or eye.
pub const DARK_THRESHOLD: f64 = 0.3;

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "images must have equal sizes");
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64
}

/// `10·log10(1/MSE)` over all channel values, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f32], b: &[f32]) -> f64 {
    let m = mse(a, b);
    if m <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
}

/// Mean SSIM of two `[h·w·3]` images over valid 7×7 box windows and channels.
pub fn ssim(a: &[f32], b: &[f32], width: usize, height: usize) -> f64 {
    let win = SSIM_WINDOW.min(width).min(height);
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..3 {
        for r0 in 0..=height - win {
            for c0 in 0..=width - win {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for r in r0..r0 + win {
                    for c in c0..c0 + win {
                        let i = (r * width + c) * 3 + k;
                        let (x, y) = (a[i] as f64, b[i] as f64);
                        sx += x;
                        sy += y;
                        sxx += x * x;
                        syy += y * y;
                        sxy += x * y;
                    }
                }
                let (mx, my) = (sx / n, sy / n);
                let vx = sxx / n - mx * mx;
                let vy = syy / n - my * my;
                let cxy = sxy / n - mx * my;
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Pearson correlation; `NaN` when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "series must have equal lengths");
    let n = x.len() as f64;
    if x.len() < 2 {
        return f64::NAN;
    }
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

pub fn luminance(rgb: [f32; 3]) -> f64 {
    0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64
}

/// Pixels of `rect` darker than [`DARK_THRESHOLD`] in a `[h·w·3]` image.
pub fn dark_count(image: &[f32], width: usize, rect: &Rect) -> usize {
    rect.pixels()
        .into_iter()
        .filter(|&(r, c)| {
            let i = (r * width + c) * 3;
            luminance([image[i], image[i + 1], image[i + 2]]) < DARK_THRESHOLD
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = vec![0.5f32; 48];
        assert_eq!(psnr(&a, &a), PSNR_CAP);
        let b: Vec<f32> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-4);
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let a: Vec<f32> = (0..10 * 12 * 3).map(|i| (i % 17) as f32 / 17.0).collect();
        assert!((ssim(&a, &a, 12, 10) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &x) - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!(pearson(&x, &[2.0; 4]).is_nan());
        assert!((spearman(&x, &[1.0, 10.0, 100.0, 1000.0]) - 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn dark_pixels_inside_rect() {
        let mut img = vec![1.0f32; 4 * 4 * 3];
        for c in 0..3 {
            img[(4 + 1) * 3 + c] = 0.0;
            img[(3 * 4 + 3) * 3 + c] = 0.0;
        }
        assert_eq!(dark_count(&img, 4, &Rect { x: 0, y: 0, w: 2, h: 2 }), 1);
        assert_eq!(dark_count(&img, 4, &Rect { x: 0, y: 0, w: 4, h: 4 }), 2);
    }
}
