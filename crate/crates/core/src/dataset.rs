//! Host corpora (pre-styled images on disk) and copyright badge sets.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{load_image, ImageTensor};

/// Independent deterministic generator for `(seed, purpose, index)`.
pub fn stream_rng(seed: u64, purpose: u32, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..12].copy_from_slice(&purpose.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

pub(crate) const PURPOSE_EPOCH: u32 = 1;
pub(crate) const PURPOSE_BADGE: u32 = 2;
pub(crate) const PURPOSE_DISTORTION: u32 = 3;
pub(crate) const PURPOSE_OVERLAY: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub root: PathBuf,
    pub split: Option<Split>,
    pub image_paths: Vec<PathBuf>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.image_paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_paths.is_empty()
    }

    pub fn load_all(&self, side: usize) -> Result<Vec<ImageTensor>> {
        self.image_paths.iter().map(|p| load_image(p, side)).collect()
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else if is_image(&path) {
            out.push(path);
        }
    }
    Ok(())
}

/// Recursively lists PNG/JPEG files under `dir`, sorted lexicographically.
pub fn scan_dir(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Data(format!("corpus directory {} does not exist", dir.display())));
    }
    let mut paths = Vec::new();
    walk(dir, &mut paths)?;
    if paths.is_empty() {
        return Err(Error::Data(format!("no PNG/JPEG images under {}", dir.display())));
    }
    paths.sort();
    Ok(Corpus {
        root: dir.to_path_buf(),
        split: None,
        image_paths: paths,
    })
}

/// Lists `<root>/<split>`.
pub fn scan_corpus(root: impl AsRef<Path>, split: Split) -> Result<Corpus> {
    let root = root.as_ref();
    let mut corpus = scan_dir(root.join(split.to_string()))?;
    corpus.root = root.to_path_buf();
    corpus.split = Some(split);
    Ok(corpus)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BadgeMode {
    Single,
    Multi,
}

/// Copyright badges at model resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct BadgeSet {
    badges: Vec<ImageTensor>,
    mode: BadgeMode,
}

/// SHA-256 of the badge's 8-bit raster, hex encoded.
pub fn badge_digest(badge: &ImageTensor) -> String {
    let digest = Sha256::digest(badge.to_rgb8().as_raw());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl BadgeSet {
    pub fn new(badges: Vec<ImageTensor>) -> Result<Self> {
        let mode = match badges.len() {
            0 => return Err(Error::Data("badge set is empty".into())),
            1 => BadgeMode::Single,
            _ => BadgeMode::Multi,
        };
        if badges.iter().any(|b| !b.same_shape(&badges[0])) {
            return Err(Error::Data("badges must share one size".into()));
        }
        Ok(Self { badges, mode })
    }

    pub fn load(paths: &[PathBuf], side: usize) -> Result<Self> {
        Self::new(paths.iter().map(|p| load_image(p, side)).collect::<Result<_>>()?)
    }

    pub fn mode(&self) -> BadgeMode {
        self.mode
    }

    pub fn badges(&self) -> &[ImageTensor] {
        &self.badges
    }

    pub fn len(&self) -> usize {
        self.badges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.badges.is_empty()
    }

    pub fn digests(&self) -> Vec<String> {
        self.badges.iter().map(badge_digest).collect()
    }

    /// Uniform badge index (always 0 in single mode).
    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        match self.mode {
            BadgeMode::Single => 0,
            BadgeMode::Multi => rng.random_range(0..self.badges.len()),
        }
    }
}

/// Host images and, per sample, the index of its badge.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub hosts: Vec<ImageTensor>,
    pub badge_indices: Vec<usize>,
}

impl Batch {
    pub fn badges<'a>(&self, set: &'a BadgeSet) -> Vec<&'a ImageTensor> {
        self.badge_indices.iter().map(|&i| &set.badges[i]).collect()
    }
}

const CACHE_LIMIT_BYTES: usize = 512 << 20;

/// Deterministic batch stream: a fresh seeded permutation per epoch, partial
/// final batches dropped. Batch `k` depends only on `(seed, k)`.
pub struct BatchStream {
    corpus: Corpus,
    side: usize,
    batch_size: usize,
    seed: u64,
    cursor: u64,
    order: Option<(u64, Vec<usize>)>,
    cache: Option<HashMap<usize, ImageTensor>>,
}

impl BatchStream {
    pub fn new(corpus: Corpus, side: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if batch_size > corpus.len() {
            return Err(Error::Config(format!(
                "batch_size {batch_size} exceeds corpus size {}",
                corpus.len()
            )));
        }
        let cache = (corpus.len() * side * side * 12 <= CACHE_LIMIT_BYTES).then(HashMap::new);
        Ok(Self {
            corpus,
            side,
            batch_size,
            seed,
            cursor: 0,
            order: None,
            cache,
        })
    }

    pub fn batches_per_epoch(&self) -> u64 {
        (self.corpus.len() / self.batch_size) as u64
    }

    /// Image indices of batch `k`.
    pub fn indices(&mut self, k: u64) -> Vec<usize> {
        let per = self.batches_per_epoch();
        let (epoch, pos) = (k / per, (k % per) as usize);
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.corpus.len()).collect();
            perm.shuffle(&mut stream_rng(self.seed, PURPOSE_EPOCH, epoch));
            self.order = Some((epoch, perm));
        }
        let perm = &self.order.as_ref().expect("order just set").1;
        perm[pos * self.batch_size..(pos + 1) * self.batch_size].to_vec()
    }

    fn host(&mut self, i: usize) -> Result<ImageTensor> {
        if let Some(img) = self.cache.as_ref().and_then(|c| c.get(&i)) {
            return Ok(img.clone());
        }
        let img = load_image(&self.corpus.image_paths[i], self.side)?;
        if let Some(c) = self.cache.as_mut() {
            c.insert(i, img.clone());
        }
        Ok(img)
    }

    /// Batch `k` of the stream.
    pub fn batch_at(&mut self, k: u64, badges: &BadgeSet) -> Result<Batch> {
        let idx = self.indices(k);
        let hosts = idx.iter().map(|&i| self.host(i)).collect::<Result<_>>()?;
        let mut rng = stream_rng(self.seed, PURPOSE_BADGE, k);
        let badge_indices = idx.iter().map(|_| badges.draw(&mut rng)).collect();
        Ok(Batch { hosts, badge_indices })
    }

    pub fn seek(&mut self, k: u64) {
        self.cursor = k;
    }

    pub fn next_batch(&mut self, badges: &BadgeSet) -> Result<Batch> {
        let b = self.batch_at(self.cursor, badges)?;
        self.cursor += 1;
        Ok(b)
    }
}

/// Procedural stand-in for a styled artwork: a smooth colour field, soft blobs
/// and a painterly stripe texture.
pub fn synthetic_host(side: usize, rng: &mut impl Rng) -> ImageTensor {
    let corners: [[f32; 3]; 4] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0.1..0.9)));
    let blobs: Vec<([f32; 2], f32, [f32; 3])> = (0..rng.random_range(3..7))
        .map(|_| {
            let centre = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let colour = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            (centre, rng.random_range(0.08..0.3), colour)
        })
        .collect();
    let (freq, angle, amp): (f32, f32, f32) =
        (rng.random_range(4.0..14.0), rng.random_range(0.0..std::f32::consts::PI), rng.random_range(0.02..0.08));
    let s = side as f32;
    ImageTensor::from_fn(side, side, |c, y, x| {
        let (u, v) = ((x as f32 + 0.5) / s, (y as f32 + 0.5) / s);
        let mut val = corners[0][c] * (1.0 - u) * (1.0 - v)
            + corners[1][c] * u * (1.0 - v)
            + corners[2][c] * (1.0 - u) * v
            + corners[3][c] * u * v;
        for (centre, radius, colour) in &blobs {
            let d2 = (u - centre[0]).powi(2) + (v - centre[1]).powi(2);
            let a = 1.0 / (1.0 + (((d2.sqrt() - radius) / 0.02).exp()));
            val = val * (1.0 - a) + colour[c] * a;
        }
        let phase = (u * angle.cos() + v * angle.sin()) * freq * std::f32::consts::TAU;
        (val + amp * phase.sin()).clamp(0.0, 1.0)
    })
}

/// Deterministic copyright-mark image: a coloured ring around a bold `C` on a
/// light ground. `variant` rotates the palette.
pub fn synthetic_badge(side: usize, variant: usize) -> ImageTensor {
    const PALETTE: [[f32; 3]; 7] = [
        [0.80, 0.10, 0.10],
        [0.10, 0.35, 0.80],
        [0.10, 0.60, 0.20],
        [0.55, 0.20, 0.70],
        [0.90, 0.55, 0.05],
        [0.05, 0.55, 0.60],
        [0.25, 0.25, 0.25],
    ];
    let ink = PALETTE[variant % PALETTE.len()];
    let ground = [0.96, 0.95, 0.90];
    let s = side as f32;
    ImageTensor::from_fn(side, side, |c, y, x| {
        let (u, v) = ((x as f32 + 0.5) / s - 0.5, (y as f32 + 0.5) / s - 0.5);
        let r = (u * u + v * v).sqrt();
        let ring = (0.40..0.46).contains(&r);
        let opening = u > 0.0 && v.abs() < 0.09;
        let letter = (0.16..0.28).contains(&r) && !opening;
        if ring || letter {
            ink[c]
        } else {
            ground[c]
        }
    })
}

/// Writes `n` synthetic hosts as `host_XXXX.png` under `dir` and scans them.
pub fn write_synthetic_corpus(dir: impl AsRef<Path>, n: usize, side: usize, seed: u64) -> Result<Corpus> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let img = synthetic_host(side, &mut rng);
        crate::imaging::save_image(&img, &dir.join(format!("host_{i:04}.png")), crate::imaging::SaveFormat::Png)?;
    }
    scan_dir(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a: u64 = stream_rng(5, 1, 0).random();
        assert_eq!(a, stream_rng(5, 1, 0).random::<u64>());
        assert_ne!(a, stream_rng(5, 1, 1).random::<u64>());
        assert_ne!(a, stream_rng(5, 2, 0).random::<u64>());
        assert_ne!(a, stream_rng(6, 1, 0).random::<u64>());
    }

    #[test]
    fn badge_modes() {
        let b = ImageTensor::constant(4, 4, [1.0, 0.0, 0.0]);
        assert!(BadgeSet::new(vec![]).is_err());
        assert_eq!(BadgeSet::new(vec![b.clone()]).unwrap().mode(), BadgeMode::Single);
        let multi = BadgeSet::new(vec![b.clone(), b.clone()]).unwrap();
        assert_eq!(multi.mode(), BadgeMode::Multi);
        assert!(BadgeSet::new(vec![b, ImageTensor::constant(4, 5, [0.0; 3])]).is_err());
    }

    #[test]
    fn digest_is_hex_sha256() {
        let d = badge_digest(&ImageTensor::constant(1, 1, [0.0; 3]));
        // sha256 of three zero bytes
        assert_eq!(d, "709e80c88487a2411e1ee4dfb9f22a861492d20c4765150c0c794abd70f8147c");
    }
}
