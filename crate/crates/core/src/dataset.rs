//! Synthetic infrared-like scenes and the on-disk dataset layout
//! (`images/`, `masks/`, `splits.txt`, `MANIFEST.sha`).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, GrayImage};
use crate::metrics::connected_components;
use crate::par;
use crate::rng::{self, Rng, Stream};

/// Largest component area allowed for a small target, in pixels.
pub const MAX_TARGET_AREA: usize = 81;
pub const MIN_TARGET_AREA: usize = 3;
pub const SPLITS_FILE: &str = "splits.txt";
pub const MANIFEST_FILE: &str = "MANIFEST.sha";

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: GrayImage,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    pub targets_per_image: [usize; 2],
    /// Gaussian standard deviation range of a target, in pixels.
    pub target_radius: [f64; 2],
    /// Peak intensity above the local background.
    pub target_contrast: [f64; 2],
    /// Amplitude of the low-frequency background.
    pub clutter_scale: f64,
    /// Fraction of scenes tagged `test`.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 200,
            size: 64,
            targets_per_image: [1, 3],
            target_radius: [1.5, 4.0],
            target_contrast: [0.1, 0.4],
            clutter_scale: 0.25,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

/// The half-peak ellipse of a Gaussian with deviations `a`, `b` has area
/// `2 ln 2 · π a b`.
fn half_peak_area(a: f64, b: f64) -> f64 {
    2.0 * std::f64::consts::LN_2 * std::f64::consts::PI * a * b
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size < 16 || self.size % 8 != 0 {
            return bad(format!("size must be >= 16 and divisible by 8, got {}", self.size));
        }
        let [tlo, thi] = self.targets_per_image;
        if tlo == 0 || tlo > thi || thi > 8 {
            return bad("targets_per_image must satisfy 1 <= lo <= hi <= 8".into());
        }
        let [rlo, rhi] = self.target_radius;
        if !(rlo > 0.0 && rlo <= rhi) {
            return bad("target_radius must satisfy 0 < lo <= hi".into());
        }
        if half_peak_area(rhi, rhi) > MAX_TARGET_AREA as f64 {
            return bad(format!(
                "target_radius {rhi} is too large for the {MAX_TARGET_AREA}px small-target bound"
            ));
        }
        if half_peak_area(rlo, rlo) < MIN_TARGET_AREA as f64 {
            return bad(format!("target_radius {rlo} yields targets under {MIN_TARGET_AREA}px"));
        }
        let [clo, chi] = self.target_contrast;
        if !(clo > 0.0 && clo <= chi && chi <= 0.4) {
            return bad("target_contrast must satisfy 0 < lo <= hi <= 0.4".into());
        }
        if !(0.0..=0.5).contains(&self.clutter_scale) {
            return bad("clutter_scale must lie in [0, 0.5]".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must lie in [0, 1)".into());
        }
        if self.count > 0 && self.size < 4 * (rhi.ceil() as usize + 2) {
            return bad("size too small for the target radius".into());
        }
        Ok(())
    }

    pub fn id(index: usize) -> String {
        format!("{index:05}")
    }

    pub fn split_of(&self, index: usize) -> Split {
        let test = (self.count as f64 * self.test_fraction).round() as usize;
        if index >= self.count - test {
            Split::Test
        } else {
            Split::Train
        }
    }
}

fn bilinear_field(size: usize, grid: usize, r: &mut Rng) -> Vec<f64> {
    let g: Vec<f64> = (0..grid * grid).map(|_| r.gen_range(-1.0..1.0)).collect();
    let scale = (grid - 1) as f64 / (size - 1) as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = y as f64 * scale;
        let y0 = (fy.floor() as usize).min(grid - 2);
        let ty = fy - y0 as f64;
        for x in 0..size {
            let fx = x as f64 * scale;
            let x0 = (fx.floor() as usize).min(grid - 2);
            let tx = fx - x0 as f64;
            let at = |a: usize, b: usize| g[a * grid + b];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

struct Target {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    angle: f64,
    contrast: f64,
}

impl Target {
    /// Normalized squared Mahalanobis distance of a pixel to the centre.
    fn q(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

fn scene(cfg: &SynthConfig, seed: u64) -> (GrayImage, BinaryMask) {
    let mut r = rng::rng(seed);
    let n = cfg.size;
    let base = r.gen_range(0.2..0.4);
    let low = bilinear_field(n, 4, &mut r);
    let mid = bilinear_field(n, 9, &mut r);
    // Sparse bright clutter blobs, larger than any target.
    let blobs: Vec<(f64, f64, f64, f64)> = (0..r.gen_range(1..=3))
        .map(|_| {
            (
                r.gen_range(0.0..n as f64),
                r.gen_range(0.0..n as f64),
                r.gen_range(5.0..9.0),
                r.gen_range(0.05..0.15),
            )
        })
        .collect();
    let mut pix: Vec<f64> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            let mut v = base + cfg.clutter_scale * (0.6 * low[i] + 0.3 * mid[i]);
            for &(by, bx, s, amp) in &blobs {
                v += amp * (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * s * s)).exp();
            }
            v + r.gen_range(-0.015..0.015)
        })
        .collect();

    let count = r.gen_range(cfg.targets_per_image[0]..=cfg.targets_per_image[1]);
    let margin = cfg.target_radius[1] * 2.0 + 2.0;
    let mut targets: Vec<Target> = Vec::new();
    let mut tries = 0;
    while targets.len() < count && tries < 1000 {
        tries += 1;
        let t = Target {
            cy: r.gen_range(margin..n as f64 - margin),
            cx: r.gen_range(margin..n as f64 - margin),
            a: r.gen_range(cfg.target_radius[0]..=cfg.target_radius[1]),
            b: r.gen_range(cfg.target_radius[0]..=cfg.target_radius[1]),
            angle: r.gen_range(0.0..std::f64::consts::PI),
            contrast: r.gen_range(cfg.target_contrast[0]..=cfg.target_contrast[1]),
        };
        let sep = 2.0 * (t.a.max(t.b) + cfg.target_radius[1]) + 3.0;
        if targets.iter().all(|o| (o.cy - t.cy).hypot(o.cx - t.cx) > sep) {
            targets.push(t);
        }
    }
    let mut mask = BinaryMask::empty(n, n);
    for t in &targets {
        let half = 2.0 * std::f64::consts::LN_2;
        for y in 0..n {
            for x in 0..n {
                let q = t.q(y as f64, x as f64);
                pix[y * n + x] += t.contrast * (-0.5 * q).exp();
                if q < half {
                    mask.set(y, x, true);
                }
            }
        }
    }
    let mut image = GrayImage::new(n, n, pix).expect("scene dimensions");
    image.clamp01();
    // Quantize so that a PNG round trip is exact.
    let image = GrayImage::from_u8(n, n, &image.to_u8()).expect("scene dimensions");
    (image, mask)
}

fn mask_ok(mask: &BinaryMask) -> bool {
    let comps = connected_components(mask, 8);
    !comps.is_empty()
        && comps
            .iter()
            .all(|c| (MIN_TARGET_AREA..=MAX_TARGET_AREA).contains(&c.area))
}

/// Deterministic scenes; each one is drawn from its own derived seed and
/// redrawn (next attempt index) in the rare case a mask breaks the area bounds.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<ImageSample>> {
    cfg.validate()?;
    let out = par::map_indexed(cfg.count, |i| {
        for attempt in 0..64u64 {
            let (image, mask) = scene(cfg, rng::derive2(cfg.seed, Stream::Synth, i as u64, attempt));
            if mask_ok(&mask) {
                return Ok(ImageSample { id: SynthConfig::id(i), image, mask });
            }
        }
        Err(Error::Config(format!("could not place targets for scene {i}")))
    });
    out.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
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

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split tag `{other}` (expected train or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// Hex SHA-256 over the splits file and every image and mask.
    pub hash: String,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Loads every sample of one split, in manifest order.
    pub fn load(&self, split: Split) -> Result<Vec<ImageSample>> {
        let entries: Vec<&ManifestEntry> = self.split(split).collect();
        par::map_slice(&entries, |e| {
            Ok(ImageSample {
                id: e.id.clone(),
                image: GrayImage::load_png(&e.image)?,
                mask: BinaryMask::load_png(&e.mask)?,
            })
        })
        .into_iter()
        .collect()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `samples` under `root` and returns the manifest hash. `splits`
/// gives the tag of each sample.
pub fn write_dataset(root: &Path, samples: &[ImageSample], splits: &[Split]) -> Result<String> {
    if samples.is_empty() {
        return Err(Error::Dataset("no entries to write".into()));
    }
    if samples.len() != splits.len() {
        return Err(Error::shape(samples.len(), splits.len()));
    }
    for dir in [root.join("images"), root.join("masks")] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut list = String::new();
    for (s, split) in samples.iter().zip(splits) {
        s.image.save_png(&root.join("images").join(format!("{}.png", s.id)))?;
        s.mask.save_png(&root.join("masks").join(format!("{}.png", s.id)))?;
        list.push_str(&format!("{} {split}\n", s.id));
    }
    write_file(&root.join(SPLITS_FILE), list.as_bytes())?;
    let manifest = load_manifest(root)?;
    write_file(&root.join(MANIFEST_FILE), format!("{}\n", manifest.hash).as_bytes())?;
    Ok(manifest.hash)
}

/// Generates `cfg.count` scenes and writes them with their configured split.
pub fn synth_to_disk(cfg: &SynthConfig, root: &Path) -> Result<String> {
    if cfg.count == 0 {
        return Err(Error::Config("count must be positive".into()));
    }
    let samples = synth_generate(cfg)?;
    let splits: Vec<Split> = (0..samples.len()).map(|i| cfg.split_of(i)).collect();
    write_dataset(root, &samples, &splits)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads and validates a dataset directory.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let splits_path = root.join(SPLITS_FILE);
    if !splits_path.exists() {
        let images = root.join("images");
        let has_images = fs::read_dir(&images).map(|mut d| d.next().is_some()).unwrap_or(false);
        return Err(Error::Dataset(if has_images {
            format!("missing {}", splits_path.display())
        } else {
            format!("no entries in {}", root.display())
        }));
    }
    let list_bytes = read(&splits_path)?;
    let list = String::from_utf8(list_bytes.clone())
        .map_err(|_| Error::Dataset(format!("{} is not UTF-8", splits_path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&list_bytes);
    let mut entries = Vec::new();
    for (ln, line) in list.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(id), Some(tag), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Dataset(format!(
                "{}:{}: expected `<id> train|test`",
                splits_path.display(),
                ln + 1
            )));
        };
        let image = root.join("images").join(format!("{id}.png"));
        let mask = root.join("masks").join(format!("{id}.png"));
        if !image.exists() {
            return Err(Error::Dataset(format!("missing image {}", image.display())));
        }
        if !mask.exists() {
            return Err(Error::Dataset(format!("missing mask {} for image {}", mask.display(), image.display())));
        }
        let img_bytes = read(&image)?;
        let mask_bytes = read(&mask)?;
        let i = GrayImage::load_png(&image)?;
        let m = BinaryMask::load_png(&mask)?;
        if i.dims() != m.dims() {
            return Err(Error::Dataset(format!(
                "dimension mismatch: {} is {}x{} but {} is {}x{}",
                image.display(),
                i.height(),
                i.width(),
                mask.display(),
                m.height(),
                m.width()
            )));
        }
        for bytes in [&img_bytes, &mask_bytes] {
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(bytes);
        }
        entries.push(ManifestEntry {
            id: id.to_string(),
            image,
            mask,
            split: tag.parse()?,
        });
    }
    if entries.is_empty() {
        return Err(Error::Dataset(format!("no entries in {}", root.display())));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
        hash: hex::encode(hasher.finalize()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_count_is_empty() {
        let cfg = SynthConfig { count: 0, ..Default::default() };
        assert!(synth_generate(&cfg).unwrap().is_empty());
    }

    #[test]
    fn default_scenes_respect_target_bounds() {
        let samples = synth_generate(&SynthConfig::default()).unwrap();
        assert_eq!(samples.len(), 200);
        for s in &samples {
            let comps = connected_components(&s.mask, 8);
            assert!(!comps.is_empty(), "{}", s.id);
            for c in comps {
                assert!((3..=81).contains(&c.area), "{}: area {}", s.id, c.area);
            }
            assert!(s.image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn same_seed_same_scenes() {
        let cfg = SynthConfig { count: 6, ..Default::default() };
        assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(synth_generate(&cfg).unwrap(), synth_generate(&other).unwrap());
    }

    #[test]
    fn infeasible_radius_rejected() {
        let cfg = SynthConfig { target_radius: [2.0, 8.0], ..Default::default() };
        assert!(matches!(synth_generate(&cfg), Err(Error::Config(_))));
        let cfg = SynthConfig { size: 60, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn split_tail_is_test() {
        let cfg = SynthConfig { count: 10, test_fraction: 0.2, ..Default::default() };
        let tags: Vec<Split> = (0..10).map(|i| cfg.split_of(i)).collect();
        assert_eq!(tags.iter().filter(|&&s| s == Split::Test).count(), 2);
        assert_eq!(tags[9], Split::Test);
        assert_eq!(tags[0], Split::Train);
    }
}
