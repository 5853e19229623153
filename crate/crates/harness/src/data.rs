//! Synthetic datasets: interleaved spirals for classification and
//! band-limited images for super-resolution.

use std::f64::consts::PI;

use qprune::pipeline::{Dataset, Targets};
use qprune::{Error, Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Fraction of samples held out for evaluation.
pub const EVAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub eval: Dataset,
}

fn eval_count(n: usize) -> usize {
    (EVAL_FRACTION * n as f64).round() as usize
}

/// Shuffles sample indices and returns `(train, eval)` index lists.
fn split_indices(rng: &mut ChaCha8Rng, n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let eval = idx.split_off(n - eval_count(n));
    (idx, eval)
}

/// Two interleaved 2-D spirals, labels 0 and 1, with Gaussian noise of
/// standard deviation `noise` added to both coordinates.
pub fn gen_toy_classify(seed: u64, n_samples: usize, noise: f64) -> Result<Split> {
    if n_samples < 4 {
        return Err(Error::InvalidArgument(format!("n_samples must be >= 4, got {n_samples}")));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(2 * n_samples);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let class = i % 2;
        let r: f64 = rng.random_range(0.1..1.0);
        let theta = 3.0 * PI * r + PI * class as f64;
        let nx: f64 = StandardNormal.sample(&mut rng);
        let ny: f64 = StandardNormal.sample(&mut rng);
        points.push(r * theta.cos() + noise * nx);
        points.push(r * theta.sin() + noise * ny);
        labels.push(class);
    }
    let inputs = Tensor::new(vec![n_samples, 2], points)?;
    let all = Dataset::new(inputs, Targets::Classes(labels))?;
    let (train, eval) = split_indices(&mut rng, n_samples);
    Ok(subsets(&all, &train, &eval))
}

fn subsets(all: &Dataset, train: &[usize], eval: &[usize]) -> Split {
    let (ti, tt) = all.batch(train);
    let (ei, et) = all.batch(eval);
    Split {
        train: Dataset {
            inputs: ti,
            targets: tt,
        },
        eval: Dataset {
            inputs: ei,
            targets: et,
        },
    }
}

/// Mean over non-overlapping `scale × scale` blocks of `[N, C, H, W]` images.
pub fn box_downsample(x: &Tensor, scale: usize) -> Result<Tensor> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::InvalidArgument(format!("expected [N, C, H, W], got {:?}", x.shape())));
    };
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::InvalidArgument(format!(
            "image size {h}x{w} is not divisible by scale {scale}"
        )));
    }
    let (oh, ow) = (h / scale, w / scale);
    let src = x.data();
    let norm = (scale * scale) as f64;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in src.chunks_exact(h * w) {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for di in 0..scale {
                    let row = (i * scale + di) * w + j * scale;
                    acc += plane[row..row + scale].iter().sum::<f64>();
                }
                out.push(acc / norm);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Nearest-neighbour upsampling of `[N, C, H, W]` images by `scale`.
pub fn nearest_upsample(x: &Tensor, scale: usize) -> Result<Tensor> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::InvalidArgument(format!("expected [N, C, H, W], got {:?}", x.shape())));
    };
    if scale == 0 {
        return Err(Error::InvalidArgument("scale must be >= 1".into()));
    }
    let (oh, ow) = (h * scale, w * scale);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks_exact(h * w) {
        for i in 0..oh {
            for j in 0..ow {
                out.push(plane[(i / scale) * w + j / scale]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Maximum number of sinusoids summed per image.
const MAX_WAVES: usize = 5;
/// Highest spatial frequency, in cycles per image side.
const MAX_FREQ: i32 = 2;

fn band_limited_image(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..=MAX_WAVES))
        .map(|_| {
            let fx = rng.random_range(0..=MAX_FREQ) as f64;
            let fy = rng.random_range(-MAX_FREQ..=MAX_FREQ) as f64;
            (rng.random_range(0.2..1.0), fx, fy, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w.0).sum();
    let mut img = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
            let s: f64 = waves
                .iter()
                .map(|&(a, fx, fy, phase)| a * (2.0 * PI * (fx * u + fy * v) + phase).sin())
                .sum();
            img.push((0.5 + 0.5 * s / total).clamp(0.0, 1.0));
        }
    }
    img
}

/// Super-resolution pairs. Targets are `[N, 1, size, size]` images in
/// `[0, 1]`; model inputs are the box-downsampled images upsampled back to
/// `size` by nearest neighbour.
pub fn gen_toy_superres(seed: u64, n_images: usize, size: usize, scale: usize) -> Result<Split> {
    if scale == 0 || size == 0 || !size.is_multiple_of(scale) {
        return Err(Error::InvalidArgument(format!("size {size} is not divisible by scale {scale}")));
    }
    if n_images < 3 {
        return Err(Error::InvalidArgument(format!("n_images must be >= 3, got {n_images}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n_images * size * size);
    for _ in 0..n_images {
        pixels.extend(band_limited_image(&mut rng, size));
    }
    let targets = Tensor::new(vec![n_images, 1, size, size], pixels)?;
    let inputs = nearest_upsample(&box_downsample(&targets, scale)?, scale)?;
    let all = Dataset::new(inputs, Targets::Values(targets))?;
    let (train, eval) = split_indices(&mut rng, n_images);
    Ok(subsets(&all, &train, &eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        let s = gen_toy_classify(0, 4, 0.0).unwrap();
        assert_eq!((s.train.len(), s.eval.len()), (3, 1));
        let s = gen_toy_classify(0, 1000, 0.1).unwrap();
        assert_eq!((s.train.len(), s.eval.len()), (800, 200));
        assert!(gen_toy_classify(0, 3, 0.0).is_err());
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(gen_toy_classify(5, 50, 0.1).unwrap(), gen_toy_classify(5, 50, 0.1).unwrap());
        assert_ne!(gen_toy_classify(5, 50, 0.1).unwrap(), gen_toy_classify(6, 50, 0.1).unwrap());
        assert_eq!(gen_toy_superres(5, 6, 8, 2).unwrap(), gen_toy_superres(5, 6, 8, 2).unwrap());
    }

    #[test]
    fn superres_values_and_divisibility() {
        let s = gen_toy_superres(1, 10, 12, 3).unwrap();
        let Targets::Values(t) = &s.train.targets else { panic!() };
        assert_eq!(t.shape(), &[8, 1, 12, 12]);
        assert_eq!(s.train.inputs.shape(), t.shape());
        assert!(t.min() >= 0.0 && t.max() <= 1.0);
        assert!(gen_toy_superres(1, 10, 12, 5).is_err());
    }

    #[test]
    fn unit_scale_input_equals_target() {
        let s = gen_toy_superres(2, 5, 8, 1).unwrap();
        assert_eq!(Targets::Values(s.train.inputs.clone()), s.train.targets);
    }

    #[test]
    fn constant_image_downsamples_exactly() {
        let img = Tensor::filled(&[1, 1, 6, 6], 0.375);
        let low = box_downsample(&img, 3).unwrap();
        assert_eq!(low, Tensor::filled(&[1, 1, 2, 2], 0.375));
        let up = nearest_upsample(&low, 3).unwrap();
        assert_eq!(qprune::metrics::psnr(&up, &img, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn downsample_averages_blocks() {
        let img = Tensor::new(vec![1, 1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let low = box_downsample(&img, 2).unwrap();
        assert_eq!(low.data(), &[3.5, 5.5]);
    }
}
