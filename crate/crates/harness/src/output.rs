//! Files written by the commands: portable pixmaps, CSV tables and the run manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use affiner::{Scalar, Tensor};
use anyhow::Context;
use sha2::{Digest, Sha256};

/// Binary PPM (P6) from `[H, W, 3]` values in `[-1, 1]`.
pub fn ppm_bytes(pixels: &[f64], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8));
    out
}

/// Lays `[N, H, W, C]` images out on a near-square grid with a one-pixel gap.
/// Single-channel images are replicated to grey; extra channels are dropped.
pub fn grid<S: Scalar>(images: &Tensor<S>) -> (Vec<f64>, usize, usize) {
    let [n, h, w, c] = images.shape()[..] else {
        panic!("grid expects [N, H, W, C], got {:?}", images.shape());
    };
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols).max(1);
    let (gh, gw) = (rows * (h + 1) + 1, cols * (w + 1) + 1);
    let mut out = vec![-1.0; gh * gw * 3];
    let data = images.data();
    for i in 0..n {
        let (oy, ox) = (1 + (i / cols) * (h + 1), 1 + (i % cols) * (w + 1));
        for y in 0..h {
            for x in 0..w {
                let src = ((i * h + y) * w + x) * c;
                let dst = ((oy + y) * gw + ox + x) * 3;
                for k in 0..3 {
                    out[dst + k] = data[src + k.min(c - 1)].as_f64();
                }
            }
        }
    }
    (out, gh, gw)
}

/// Scatter plot of 2D points on a square canvas covering `[-extent, extent]²`.
pub fn scatter(points: &[[f64; 2]], reference: &[[f64; 2]], size: usize, extent: f64) -> Vec<f64> {
    let mut img = vec![1.0; size * size * 3];
    let mut plot = |p: &[f64; 2], colour: [f64; 3]| {
        let px = ((p[0] + extent) / (2.0 * extent) * size as f64).floor();
        let py = ((extent - p[1]) / (2.0 * extent) * size as f64).floor();
        if (0.0..size as f64).contains(&px) && (0.0..size as f64).contains(&py) {
            let i = (py as usize * size + px as usize) * 3;
            img[i..i + 3].copy_from_slice(&colour);
        }
    };
    for p in reference {
        plot(p, [0.4, 0.4, 0.4]);
    }
    for p in points {
        plot(p, [0.8, -0.8, -0.6]);
    }
    img
}

/// CSV text from a header and rows of already formatted cells.
pub fn csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects everything a run wrote, for the manifest.
#[derive(Debug, Default)]
pub struct Manifest {
    entries: Vec<(String, String)>,
    files: Vec<(PathBuf, String)>,
}

impl Manifest {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    /// Writes `bytes` under `dir` and records its hash.
    pub fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.push((PathBuf::from(name), sha256_hex(bytes)));
        Ok(path)
    }

    /// Records a file written by someone else.
    pub fn record(&mut self, dir: &Path, name: &str) -> anyhow::Result<()> {
        let bytes = std::fs::read(dir.join(name))?;
        self.files.push((PathBuf::from(name), sha256_hex(&bytes)));
        Ok(())
    }

    pub fn files(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            writeln!(s, "{k} = {v}").unwrap();
        }
        for (p, h) in &self.files {
            writeln!(s, "file {} sha256 {h}", p.display()).unwrap();
        }
        s
    }

    pub fn finish(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        let path = dir.join("manifest.txt");
        std::fs::write(&path, self.render())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_range() {
        let b = ppm_bytes(&[-1.0, 0.0, 1.0, 2.0, -3.0, 0.5], 1, 2);
        let header = b"P6\n2 1\n255\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(&b[header.len()..], &[0, 128, 255, 255, 0, 191]);
    }

    #[test]
    fn grid_places_tiles() {
        let imgs = Tensor::<f64>::from_fn(vec![2, 1, 1, 1], |i| i as f64 * 0.5);
        let (px, h, w) = grid(&imgs);
        assert_eq!((h, w), (3, 5));
        // first tile at (1, 1), second at (1, 3), grey replicated
        assert_eq!(&px[(w + 1) * 3..(w + 1) * 3 + 3], &[0.0, 0.0, 0.0]);
        assert_eq!(&px[(w + 3) * 3..(w + 3) * 3 + 3], &[0.5, 0.5, 0.5]);
        assert_eq!(px[0], -1.0);
    }

    #[test]
    fn scatter_marks_points() {
        let img = scatter(&[[0.0, 0.0]], &[], 4, 1.0);
        let i = (2 * 4 + 2) * 3;
        assert_eq!(&img[i..i + 3], &[0.8, -0.8, -0.6]);
        assert_eq!(img.iter().filter(|&&v| v != 1.0).count(), 3);
    }

    #[test]
    fn manifest_lists_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::default();
        m.set("seed", 3);
        m.write(dir.path(), "a.txt", b"abc").unwrap();
        let text = m.render();
        assert!(text.contains("seed = 3"));
        assert!(text.contains("a.txt sha256 ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"));
    }
}
