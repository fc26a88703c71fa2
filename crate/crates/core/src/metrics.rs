//! Image quality metrics. Accumulation happens in f64 regardless of the
//! tensor element type.

use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::losses::{perceptual_loss, FrozenFeatureNet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
#[allow(unused_imports)]
use num_traits::Float as _;


/// Reported PSNR when the mean squared error vanishes.
pub const PSNR_CAP_DB: f64 = 120.0;
/// MSE below this counts as zero.
pub const PSNR_MSE_FLOOR: f64 = 1e-12;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if !x.same_shape(y) {
        return Err(shape_err!("metric inputs: {:?} vs {:?}", x.shape(), y.shape()));
    }
    Ok(())
}

fn mse<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> f64 {
    let mut acc = 0.0f64;
    for (&a, &b) in x.data().iter().zip(y.data().iter()) {
        let d = a.as_f64() - b.as_f64();
        acc += d * d;
    }
    acc / x.numel() as f64
}

fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        10.0 * ((data_range * data_range) / mse).log10()
    }
}

/// Peak signal-to-noise ratio in dB; capped at [`PSNR_CAP_DB`] for
/// vanishing error.
pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, data_range: f64) -> Result<f64> {
    check_same(x, y)?;
    if data_range <= 0.0 {
        return Err(Error::InvalidArgument(alloc::format!(
            "data_range {data_range} must be positive"
        )));
    }
    Ok(psnr_from_mse(mse(x, y), data_range))
}

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let dy = i as f64 - half;
            let dx = j as f64 - half;
            let v = num_traits::Float::exp(-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5) over all fully
/// valid window positions.
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, data_range: f64) -> Result<f64> {
    check_same(x, y)?;
    let (c, h, w) = x.dims3()?;
    if c != 1 {
        return Err(shape_err!("ssim expects single-channel images, got {c}"));
    }
    let min_dim = h.min(w);
    if min_dim < SSIM_WINDOW {
        return Err(Error::TooSmall {
            min_dim,
            required: SSIM_WINDOW,
        });
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * data_range) * (SSIM_K1 * data_range);
    let c2 = (SSIM_K2 * data_range) * (SSIM_K2 * data_range);
    let xd = x.data();
    let yd = y.data();

    let mut total = 0.0f64;
    let mut count = 0usize;
    for y0 in 0..=(h - SSIM_WINDOW) {
        for x0 in 0..=(w - SSIM_WINDOW) {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut mxx = 0.0;
            let mut myy = 0.0;
            let mut mxy = 0.0;
            for i in 0..SSIM_WINDOW {
                let row = (y0 + i) * w + x0;
                let wrow = &win[i * SSIM_WINDOW..(i + 1) * SSIM_WINDOW];
                for j in 0..SSIM_WINDOW {
                    let wv = wrow[j];
                    let a = xd[row + j].as_f64();
                    let b = yd[row + j].as_f64();
                    mx += wv * a;
                    my += wv * b;
                    mxx += wv * a * a;
                    myy += wv * b * b;
                    mxy += wv * a * b;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Feature-space distance shared with the training loss; stands in for a
/// pretrained perceptual metric.
pub fn perceptual_distance<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    net: &FrozenFeatureNet<T>,
) -> Result<T> {
    perceptual_loss(x, y, net)
}

/// Linear-interpolation percentile of unsorted values.
fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// PSNR split by an enhancement-map percentile threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StratifiedPsnr {
    pub psnr_high: f64,
    pub psnr_low: f64,
    pub threshold: f64,
    pub high_count: usize,
    pub low_count: usize,
}

/// Split pixels at the given percentile of the map; PSNR over map-values
/// strictly above the threshold vs the rest, each over its own restricted
/// MSE at the same data range.
pub fn tsem_stratified_psnr<T: Scalar>(
    x_hat: &Tensor<T>,
    x_tgt: &Tensor<T>,
    map: &Tensor<T>,
    percentile_level: f64,
    data_range: f64,
) -> Result<StratifiedPsnr> {
    check_same(x_hat, x_tgt)?;
    check_same(x_hat, map)?;
    if !(0.0 < percentile_level && percentile_level < 100.0) {
        return Err(Error::InvalidArgument(alloc::format!(
            "percentile {percentile_level} outside (0, 100)"
        )));
    }
    let values: Vec<f64> = map.data().iter().map(|v| v.as_f64()).collect();
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    if lo == hi {
        return Err(Error::DegenerateMap);
    }
    let threshold = percentile(&values, percentile_level);

    let mut se_high = 0.0f64;
    let mut se_low = 0.0f64;
    let mut n_high = 0usize;
    let mut n_low = 0usize;
    for ((&a, &b), &m) in x_hat
        .data()
        .iter()
        .zip(x_tgt.data().iter())
        .zip(values.iter())
    {
        let d = a.as_f64() - b.as_f64();
        if m > threshold {
            se_high += d * d;
            n_high += 1;
        } else {
            se_low += d * d;
            n_low += 1;
        }
    }
    if n_high == 0 {
        return Err(Error::DegenerateMap);
    }
    Ok(StratifiedPsnr {
        psnr_high: psnr_from_mse(se_high / n_high as f64, data_range),
        psnr_low: psnr_from_mse(se_low / n_low as f64, data_range),
        threshold,
        high_count: n_high,
        low_count: n_low,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_image(rng: &mut Rng, h: usize, w: usize) -> Tensor<f64> {
        let data = (0..h * w).map(|_| rng.range(-1.0, 1.0)).collect();
        Tensor::from_vec(&[1, h, w], data).unwrap()
    }

    #[test]
    fn psnr_cap_and_closed_form() {
        let mut rng = Rng::new(41);
        let x = rand_image(&mut rng, 16, 16);
        assert_eq!(psnr(&x, &x, 2.0).unwrap(), PSNR_CAP_DB);

        let y = x.map(|v| v + 0.1);
        let got = psnr(&x, &y, 2.0).unwrap();
        let want = 10.0 * (4.0f64 / 0.01).log10(); // 26.0206
        assert!((got - want).abs() < 1e-3, "got {got}, want {want}");

        // scale invariance of the ratio
        let alpha = 3.7;
        let xs = x.map(|v| v * alpha);
        let ys = y.map(|v| v * alpha);
        let scaled = psnr(&xs, &ys, 2.0 * alpha).unwrap();
        assert!((scaled - got).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_mse() {
        let mut rng = Rng::new(42);
        let x = rand_image(&mut rng, 16, 16);
        let mut last = f64::INFINITY;
        for step in [0.01, 0.05, 0.1, 0.4] {
            let y = x.map(|v| v + step);
            let p = psnr(&x, &y, 2.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_symmetry_constants() {
        let mut rng = Rng::new(43);
        let x = rand_image(&mut rng, 16, 16);
        let y = rand_image(&mut rng, 16, 16);
        assert!((ssim(&x, &x, 2.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&x, &y, 2.0).unwrap() - ssim(&y, &x, 2.0).unwrap()).abs() < 1e-12);

        // constant images: contrast/structure term is 1, luminance term is
        // (2*0*0.5 + C1) / (0 + 0.25 + C1) with C1 = (0.01*2)^2
        let a = Tensor::<f64>::zeros(&[1, 12, 12]);
        let b = Tensor::<f64>::full(&[1, 12, 12], 0.5);
        let c1 = (0.01f64 * 2.0) * (0.01f64 * 2.0);
        let want = c1 / (0.25 + c1);
        let got = ssim(&a, &b, 2.0).unwrap();
        assert!((got - want).abs() < 1e-4, "got {got}, want {want}");

        let tiny = Tensor::<f64>::zeros(&[1, 8, 8]);
        assert!(matches!(
            ssim(&tiny, &tiny, 2.0),
            Err(Error::TooSmall { .. })
        ));
    }

    #[test]
    fn ssim_near_one_implies_small_error() {
        let mut rng = Rng::new(44);
        let x = rand_image(&mut rng, 16, 16);
        let y = x.map(|v| v + 0.001);
        assert!(ssim(&x, &y, 2.0).unwrap() > 0.999);
        let z = rand_image(&mut rng, 16, 16);
        assert!(ssim(&x, &z, 2.0).unwrap() < 0.9);
    }

    #[test]
    fn stratified_psnr_counting_and_additivity() {
        let mut rng = Rng::new(45);
        let n = 64usize;
        let x = rand_image(&mut rng, n, n);
        let y = rand_image(&mut rng, n, n);
        // distinct map values
        let map = Tensor::<f64>::from_vec(
            &[1, n, n],
            (0..n * n).map(|i| i as f64 / (n * n) as f64).collect(),
        )
        .unwrap();

        let s = tsem_stratified_psnr(&x, &y, &map, 99.0, 2.0).unwrap();
        let want_high = (0.01 * (n * n) as f64).ceil() as usize;
        assert_eq!(s.high_count, want_high, "strict > with distinct values");
        assert_eq!(s.high_count + s.low_count, n * n);

        // partition additivity: region MSEs recombine to the global MSE
        let mse_high = 4.0 / (10.0f64).powf(s.psnr_high / 10.0) * 1.0;
        let mse_low = 4.0 / (10.0f64).powf(s.psnr_low / 10.0);
        let global = super::mse(&x, &y);
        let recombined = (mse_high * s.high_count as f64 + mse_low * s.low_count as f64)
            / (n * n) as f64;
        assert!(
            (recombined - global).abs() < 1e-9,
            "{recombined} vs {global}"
        );
    }

    #[test]
    fn stratified_psnr_caps_and_degenerate() {
        let mut rng = Rng::new(46);
        let n = 32usize;
        let x = rand_image(&mut rng, n, n);
        let map = Tensor::<f64>::from_vec(
            &[1, n, n],
            (0..n * n).map(|_| rng.uniform()).collect(),
        )
        .unwrap();
        let s = tsem_stratified_psnr(&x, &x, &map, 99.0, 2.0).unwrap();
        assert_eq!(s.psnr_high, PSNR_CAP_DB);
        assert_eq!(s.psnr_low, PSNR_CAP_DB);

        let flat = Tensor::<f64>::full(&[1, n, n], 0.25);
        assert!(matches!(
            tsem_stratified_psnr(&x, &x, &flat, 99.0, 2.0),
            Err(Error::DegenerateMap)
        ));
    }
}
