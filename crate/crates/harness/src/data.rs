//! Deterministic synthetic datasets: 2D Gaussian mixtures, procedural images,
//! and image/condition-map pairs.

use std::f64::consts::PI;

use affiner::nn::derive_seed;
use affiner::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Which half of a dataset to draw from; the two use unrelated seed streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// Mixture of 2D Gaussians with equal weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub means: Vec<[f64; 2]>,
    /// Row-major 2×2 covariances.
    pub covs: Vec<[[f64; 2]; 2]>,
}

impl Mixture {
    /// `k` isotropic modes evenly spaced on a circle.
    pub fn ring(k: usize, radius: f64, std: f64) -> Self {
        let means = (0..k)
            .map(|i| {
                let th = 2.0 * PI * i as f64 / k as f64;
                [radius * th.cos(), radius * th.sin()]
            })
            .collect();
        Self {
            means,
            covs: vec![[[std * std, 0.0], [0.0, std * std]]; k],
        }
    }

    /// The default source task: 8 modes on a radius-2 ring.
    pub fn source() -> Self {
        Self::ring(8, 2.0, 0.2)
    }

    /// The default target task: the source rotated by half a mode spacing, shifted,
    /// and with tangentially stretched modes.
    pub fn target() -> Self {
        Self::source().transformed(PI / 8.0, [0.4, -0.3], 0.35, 0.12)
    }

    /// Rotates every mean by `angle`, adds `shift`, and gives each mode a covariance
    /// with standard deviation `tangential` along the ring and `radial` across it.
    pub fn transformed(&self, angle: f64, shift: [f64; 2], tangential: f64, radial: f64) -> Self {
        let (c, s) = (angle.cos(), angle.sin());
        let means: Vec<[f64; 2]> = self
            .means
            .iter()
            .map(|m| [c * m[0] - s * m[1] + shift[0], s * m[0] + c * m[1] + shift[1]])
            .collect();
        let covs = means
            .iter()
            .map(|m| {
                let th = (m[1] - shift[1]).atan2(m[0] - shift[0]);
                // radial unit vector u, tangent v
                let (u, v) = ([th.cos(), th.sin()], [-th.sin(), th.cos()]);
                let (r2, t2) = (radial * radial, tangential * tangential);
                let mut cov = [[0.0; 2]; 2];
                for i in 0..2 {
                    for j in 0..2 {
                        cov[i][j] = r2 * u[i] * u[j] + t2 * v[i] * v[j];
                    }
                }
                cov
            })
            .collect();
        Self { means, covs }
    }

    pub fn modes(&self) -> usize {
        self.means.len()
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> [f64; 2] {
        let k = rng.random_range(0..self.modes());
        let (m, c) = (self.means[k], self.covs[k]);
        // Cholesky of a 2×2 SPD matrix
        let l00 = c[0][0].sqrt();
        let l10 = c[1][0] / l00;
        let l11 = (c[1][1] - l10 * l10).max(0.0).sqrt();
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        [m[0] + l00 * z0, m[1] + l10 * z0 + l11 * z1]
    }

    /// `n` points from the given split.
    pub fn sample(&self, n: usize, seed: u64, split: Split) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, split.label()));
        (0..n).map(|_| self.draw(&mut rng)).collect()
    }

    /// Training batch of `batch` sequences of `set_size` i.i.d. points, `[B, 1, set_size, 2]`.
    pub fn batch<S: Scalar, R: Rng>(&self, batch: usize, set_size: usize, rng: &mut R) -> Tensor<S> {
        let data = (0..batch * set_size).flat_map(|_| self.draw(rng)).map(S::from_f64).collect();
        Tensor::new(vec![batch, 1, set_size, 2], data).expect("consistent shape")
    }
}

/// Flattens `[B, 1, T, 2]` point sets into a list of points.
pub fn points_of<S: Scalar>(x: &Tensor<S>) -> Vec<[f64; 2]> {
    x.data().chunks(2).map(|p| [p[0].as_f64(), p[1].as_f64()]).collect()
}

/// Procedural image families; the family index doubles as the class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Disk,
    Square,
    Stripes,
    Ring,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Disk, Family::Square, Family::Stripes, Family::Ring];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&f| f == self).expect("listed")
    }
}

/// One procedural image in `[-1, 1]` with its silhouette.
#[derive(Debug, Clone)]
pub struct Picture {
    pub size: usize,
    /// `size × size × 3`, row-major, channels innermost.
    pub pixels: Vec<f64>,
    /// `size × size`, 1 inside the shape.
    pub silhouette: Vec<f64>,
    pub family: Family,
}

fn paint<R: Rng>(family: Family, size: usize, rng: &mut R) -> Picture {
    let s = size as f64;
    let (cx, cy) = (rng.random_range(0.3..0.7) * s, rng.random_range(0.3..0.7) * s);
    let r = rng.random_range(0.18..0.3) * s;
    let period = rng.random_range(3.0..6.0);
    let fg: [f64; 3] = [rng.random_range(0.2..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..0.5)];
    let bg = -0.8;
    let mut pixels = Vec::with_capacity(size * size * 3);
    let mut silhouette = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let dist = (dx * dx + dy * dy).sqrt();
            let inside = match family {
                Family::Disk => dist < r,
                Family::Square => dx.abs() < r && dy.abs() < r,
                Family::Stripes => dx.abs() < r && dy.abs() < r && ((x as f64 / period) as usize).is_multiple_of(2),
                Family::Ring => dist < r && dist > 0.55 * r,
            };
            silhouette.push(if inside { 1.0 } else { 0.0 });
            for &c in &fg {
                pixels.push(if inside { c } else { bg });
            }
        }
    }
    Picture {
        size,
        pixels,
        silhouette,
        family,
    }
}

/// Downsamples a silhouette by `factor` (block mean) and repeats it back to full size.
pub fn condition_map(silhouette: &[f64], size: usize, factor: usize) -> Vec<f64> {
    let cells = size / factor;
    let mut coarse = vec![0.0; cells * cells];
    for y in 0..size {
        for x in 0..size {
            coarse[(y / factor) * cells + x / factor] += silhouette[y * size + x] / (factor * factor) as f64;
        }
    }
    (0..size * size).map(|i| coarse[(i / size / factor) * cells + (i % size) / factor]).collect()
}

/// Shape/texture images and their coarse silhouettes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSet {
    pub size: usize,
    pub families: Vec<Family>,
    /// Block size of the condition map.
    pub cond_factor: usize,
}

impl ImageSet {
    pub fn new(size: usize, families: Vec<Family>) -> Self {
        Self {
            size,
            families,
            cond_factor: 4,
        }
    }

    /// Images `[B, H, W, 3]`, condition maps `[B, H, W, 1]`, and class labels.
    pub fn batch<S: Scalar, R: Rng>(&self, batch: usize, rng: &mut R) -> (Tensor<S>, Tensor<S>, Vec<usize>) {
        let n = self.size;
        let (mut xs, mut cs, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..batch {
            let fam = self.families[rng.random_range(0..self.families.len())];
            let p = paint(fam, n, rng);
            xs.extend(p.pixels.iter().map(|&v| S::from_f64(v)));
            cs.extend(condition_map(&p.silhouette, n, self.cond_factor).into_iter().map(S::from_f64));
            labels.push(fam.index());
        }
        (
            Tensor::new(vec![batch, n, n, 3], xs).expect("consistent shape"),
            Tensor::new(vec![batch, n, n, 1], cs).expect("consistent shape"),
            labels,
        )
    }

    pub fn split_batch<S: Scalar>(&self, batch: usize, seed: u64, split: Split) -> (Tensor<S>, Tensor<S>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, split.label()));
        self.batch(batch, &mut rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(pts: &[[f64; 2]]) -> ([f64; 2], [[f64; 2]; 2]) {
        let n = pts.len() as f64;
        let mean = [pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n];
        let mut cov = [[0.0; 2]; 2];
        for p in pts {
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += (p[i] - mean[i]) * (p[j] - mean[j]) / (n - 1.0);
                }
            }
        }
        (mean, cov)
    }

    #[test]
    fn single_mode_moments() {
        let m = Mixture {
            means: vec![[1.0, -2.0]],
            covs: vec![[[1.0, 0.6], [0.6, 2.0]]],
        };
        let (mean, cov) = moments(&m.sample(50_000, 1, Split::Train));
        assert!((mean[0] - 1.0).abs() < 0.03 && (mean[1] + 2.0).abs() < 0.03);
        for (i, j, v) in [(0, 0, 1.0), (0, 1, 0.6), (1, 1, 2.0)] {
            assert!((cov[i][j] - v).abs() < 0.05 * v, "{cov:?}");
        }
    }

    #[test]
    fn ring_is_centred() {
        let (mean, cov) = moments(&Mixture::source().sample(40_000, 2, Split::Train));
        assert!(mean[0].abs() < 0.05 && mean[1].abs() < 0.05);
        // radius² / 2 + std² per axis
        assert!((cov[0][0] - 2.04).abs() < 0.1);
    }

    #[test]
    fn target_covariances_are_tangential() {
        let t = Mixture::target();
        for (m, c) in t.means.iter().zip(&t.covs) {
            let d = [m[0] - 0.4, m[1] + 0.3];
            let r = (d[0] * d[0] + d[1] * d[1]).sqrt();
            let u = [d[0] / r, d[1] / r];
            let radial = u[0] * (c[0][0] * u[0] + c[0][1] * u[1]) + u[1] * (c[1][0] * u[0] + c[1][1] * u[1]);
            assert!((radial - 0.12f64.powi(2)).abs() < 1e-12);
            assert!((r - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn splits_are_deterministic_and_distinct() {
        let m = Mixture::source();
        assert_eq!(m.sample(10, 3, Split::Train), m.sample(10, 3, Split::Train));
        assert_ne!(m.sample(10, 3, Split::Train), m.sample(10, 3, Split::Eval));
    }

    #[test]
    fn batch_layout() {
        let m = Mixture::source();
        let x: Tensor<f64> = m.batch(3, 8, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(x.shape(), &[3, 1, 8, 2]);
        assert_eq!(points_of(&x).len(), 24);
    }

    #[test]
    fn condition_map_is_block_mean() {
        let mut sil = vec![0.0; 16];
        sil[0] = 1.0;
        sil[5] = 1.0;
        let c = condition_map(&sil, 4, 2);
        assert_eq!(c[0], 0.5);
        assert_eq!(c[1], 0.5);
        assert_eq!(c[4], 0.5);
        assert_eq!(c[2], 0.0);
        assert_eq!(c[15], 0.0);
    }

    #[test]
    fn images_have_labels_and_ranges() {
        let set = ImageSet::new(16, Family::ALL.to_vec());
        let (x, c, labels) = set.split_batch::<f32>(6, 0, Split::Eval);
        assert_eq!(x.shape(), &[6, 16, 16, 3]);
        assert_eq!(c.shape(), &[6, 16, 16, 1]);
        assert!(labels.iter().all(|&l| l < 4));
        assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(c.data().iter().any(|&v| v > 0.0));
    }
}
