//! Two-sample distances between point clouds of any dimension.

use serde::Serialize;

fn dist<P: AsRef<[f64]>>(a: &P, b: &P) -> f64 {
    a.as_ref().iter().zip(b.as_ref()).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt()
}

fn mean_pairwise<P>(x: &[P], y: &[P], f: impl Fn(&P, &P) -> f64) -> f64 {
    let mut acc = 0.0;
    for a in x {
        for b in y {
            acc += f(a, b);
        }
    }
    acc / (x.len() * y.len()) as f64
}

/// Within-sample mean over distinct pairs.
fn mean_within<P>(x: &[P], f: impl Fn(&P, &P) -> f64) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            acc += f(&x[i], &x[j]);
        }
    }
    2.0 * acc / (n * (n - 1)) as f64
}

/// `2 E|X−Y| − E|X−X'| − E|Y−Y'|`, with unbiased within-sample terms.
pub fn energy_distance<P: AsRef<[f64]>>(x: &[P], y: &[P]) -> f64 {
    assert!(x.len() >= 2 && y.len() >= 2, "energy distance needs two points per sample");
    2.0 * mean_pairwise(x, y, dist) - mean_within(x, dist) - mean_within(y, dist)
}

/// Unbiased squared MMD with a Gaussian kernel of the given bandwidth.
pub fn mmd_rbf<P: AsRef<[f64]>>(x: &[P], y: &[P], bandwidth: f64) -> f64 {
    assert!(x.len() >= 2 && y.len() >= 2, "MMD needs two points per sample");
    let k = |a: &P, b: &P| (-dist(a, b).powi(2) / (2.0 * bandwidth * bandwidth)).exp();
    mean_within(x, k) + mean_within(y, k) - 2.0 * mean_pairwise(x, y, k)
}

/// Fraction of samples nearest to each mode, and the fraction of modes that
/// received at least `min_share` of an even split.
pub fn coverage(samples: &[[f64; 2]], means: &[[f64; 2]], min_share: f64) -> (Vec<f64>, f64) {
    let mut counts = vec![0usize; means.len()];
    for p in samples {
        let k = (0..means.len())
            .min_by(|&a, &b| dist(p, &means[a]).total_cmp(&dist(p, &means[b])))
            .expect("at least one mode");
        counts[k] += 1;
    }
    let n = samples.len().max(1) as f64;
    let shares: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let even = 1.0 / means.len() as f64;
    let covered = shares.iter().filter(|&&s| s >= min_share * even).count() as f64 / means.len() as f64;
    (shares, covered)
}

/// Kernel bandwidth: median pairwise distance of the reference set.
pub fn median_bandwidth<P: AsRef<[f64]>>(reference: &[P]) -> f64 {
    let mut d: Vec<f64> = Vec::new();
    let step = (reference.len() / 200).max(1);
    let sub: Vec<&P> = reference.iter().step_by(step).collect();
    for i in 0..sub.len() {
        for j in i + 1..sub.len() {
            d.push(dist(sub[i], sub[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2].max(1e-6)
}

/// Distances of one sample set to a reference set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub samples: usize,
    pub energy_distance: f64,
    pub mmd: f64,
    pub bandwidth: f64,
    /// Per-mode share of samples; empty for images.
    pub mode_shares: Vec<f64>,
    pub modes_covered: Option<f64>,
}

impl MetricReport {
    /// Energy distance and MMD; mode coverage when `means` is given.
    pub fn compute<P: AsRef<[f64]>>(samples: &[P], reference: &[P], means: Option<&[[f64; 2]]>) -> Self {
        if samples.len() < 1000 {
            log::warn!("metrics on {} samples; at least 1000 are recommended", samples.len());
        }
        let bandwidth = median_bandwidth(reference);
        let (mode_shares, modes_covered) = match means {
            Some(means) => {
                let pts: Vec<[f64; 2]> = samples.iter().map(|p| [p.as_ref()[0], p.as_ref()[1]]).collect();
                let (s, c) = coverage(&pts, means, 0.5);
                (s, Some(c))
            }
            None => (Vec::new(), None),
        };
        Self {
            samples: samples.len(),
            energy_distance: energy_distance(samples, reference),
            mmd: mmd_rbf(samples, reference, bandwidth),
            bandwidth,
            mode_shares,
            modes_covered,
        }
    }
}
