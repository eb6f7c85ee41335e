//! Structural similarity over 11×11 Gaussian windows, and its edge variant.

use super::AnalyticsError;
use crate::tile::TileImage;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
pub const DYNAMIC_RANGE: f64 = 255.0;

/// Single-channel image with real-valued samples, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, AnalyticsError> {
        if data.len() != width * height {
            return Err(AnalyticsError::Shape(format!(
                "{} samples for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    /// Luma `0.299 R + 0.587 G + 0.114 B`.
    pub fn luma(t: &TileImage) -> Self {
        let data = t
            .pixels()
            .map(|[r, g, b]| 0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b))
            .collect();
        GrayImage {
            width: t.width() as usize,
            height: t.height() as usize,
            data,
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; WINDOW] {
    let mut taps = [0.0; WINDOW];
    let mid = (WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *t = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

fn check_pair(a: &GrayImage, b: &GrayImage) -> Result<(), AnalyticsError> {
    if a.width != b.width || a.height != b.height {
        return Err(AnalyticsError::Shape(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.width < WINDOW || a.height < WINDOW {
        return Err(AnalyticsError::Shape(format!(
            "{}x{} is smaller than the {WINDOW}x{WINDOW} window",
            a.width, a.height
        )));
    }
    Ok(())
}

/// Gaussian filter keeping only fully covered positions.
fn filter_valid(src: &[f64], width: usize, height: usize, taps: &[f64; WINDOW]) -> Vec<f64> {
    let ow = width - WINDOW + 1;
    let oh = height - WINDOW + 1;
    let mut horiz = vec![0.0; ow * height];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for x in 0..ow {
            horiz[y * ow + x] = taps
                .iter()
                .zip(&row[x..x + WINDOW])
                .map(|(t, v)| t * v)
                .sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * horiz[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over every fully contained window.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64, AnalyticsError> {
    check_pair(a, b)?;
    let taps = gaussian_taps();
    let (w, h) = (a.width, a.height);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect()
    };
    let mu_a = filter_valid(&a.data, w, h, &taps);
    let mu_b = filter_valid(&b.data, w, h, &taps);
    let aa = filter_valid(&prod(&|x, _| x * x), w, h, &taps);
    let bb = filter_valid(&prod(&|_, y| y * y), w, h, &taps);
    let ab = filter_valid(&prod(&|x, y| x * y), w, h, &taps);

    let c1 = (K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (K2 * DYNAMIC_RANGE).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = aa[i] - ma * ma;
        let var_b = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// SSIM of two RGB tiles via their luma.
pub fn ssim_rgb(a: &TileImage, b: &TileImage) -> Result<f64, AnalyticsError> {
    ssim(&GrayImage::luma(a), &GrayImage::luma(b))
}

/// 3×3 Sobel gradient magnitude with replicated borders, clamped to
/// `[0, 255]`.
pub fn sobel_magnitude(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width as isize, img.height as isize);
    let px = |x: isize, y: isize| img.at(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize);
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..h {
        for x in 0..w {
            let gx = (px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x - 1, y) + px(x - 1, y + 1));
            let gy = (px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x, y - 1) + px(x + 1, y - 1));
            data.push((gx * gx + gy * gy).sqrt().min(255.0));
        }
    }
    GrayImage {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Edge structural similarity: SSIM between Sobel edge maps of the luma.
pub fn essi(a: &TileImage, b: &TileImage) -> Result<f64, AnalyticsError> {
    essi_gray(&GrayImage::luma(a), &GrayImage::luma(b))
}

pub fn essi_gray(a: &GrayImage, b: &GrayImage) -> Result<f64, AnalyticsError> {
    check_pair(a, b)?;
    ssim(&sobel_magnitude(a), &sobel_magnitude(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(size: u32, k: u32) -> TileImage {
        TileImage::from_fn(size, |x, y| {
            [
                ((x * k + y) % 256) as u8,
                ((y * 3 + x * k) % 256) as u8,
                ((x ^ y) * 5 % 256) as u8,
            ]
        })
        .unwrap()
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let t = gaussian_taps();
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..WINDOW {
            assert_eq!(t[i], t[WINDOW - 1 - i]);
        }
    }

    #[test]
    fn identical_images_score_one() {
        let t = ramp(32, 7);
        assert_eq!(ssim_rgb(&t, &t).unwrap(), 1.0);
        assert_eq!(essi(&t, &t).unwrap(), 1.0);
    }

    #[test]
    fn constant_images_have_identical_edges() {
        let a = TileImage::filled(16, [10, 20, 30]).unwrap();
        let b = TileImage::filled(16, [200, 90, 4]).unwrap();
        assert_eq!(essi(&a, &b).unwrap(), 1.0);
        assert!(ssim_rgb(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn rejects_small_or_mismatched() {
        let a = GrayImage::new(10, 10, vec![0.0; 100]).unwrap();
        assert!(matches!(ssim(&a, &a), Err(AnalyticsError::Shape(_))));
        let b = GrayImage::new(12, 12, vec![0.0; 144]).unwrap();
        let c = GrayImage::new(12, 11, vec![0.0; 132]).unwrap();
        assert!(matches!(ssim(&b, &c), Err(AnalyticsError::Shape(_))));
    }

    #[test]
    fn sobel_on_vertical_step() {
        let img = GrayImage::new(4, 3, [0.0, 0.0, 10.0, 10.0].repeat(3)).unwrap();
        let e = sobel_magnitude(&img);
        assert_eq!(e.at(0, 1), 0.0);
        assert_eq!(e.at(1, 1), 40.0);
        assert_eq!(e.at(2, 1), 40.0);
        let steep = GrayImage::new(4, 3, [0.0, 0.0, 255.0, 255.0].repeat(3)).unwrap();
        assert_eq!(sobel_magnitude(&steep).at(1, 1), 255.0);
    }

    #[test]
    fn symmetric_in_arguments() {
        let a = ramp(32, 3);
        let b = ramp(32, 11);
        assert_eq!(ssim_rgb(&a, &b).unwrap(), ssim_rgb(&b, &a).unwrap());
        assert_eq!(essi(&a, &b).unwrap(), essi(&b, &a).unwrap());
    }
}
