//! Synthetic paired images, resizing, normalization and the on-disk formats.
//!
//! Native images (`.jpim`): magic `JPIM`, version `u32`, height `u32`,
//! width `u32`, then `height * width` little-endian `f64` in row-major order.
//! PGM export maps `[-1, 1]` to 8-bit gray and is lossy.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::joint::JointState;
use crate::seeding;

pub const IMAGE_MAGIC: &[u8; 4] = b"JPIM";
pub const IMAGE_VERSION: u32 = 1;
const IMAGE_HEADER: usize = 16;

/// Writes through a sibling temporary file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("{} has no file name", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Monotone intensity map `v -> offset + gain * v^gamma` for `v >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityTransfer {
    pub offset: f64,
    pub gain: f64,
    pub gamma: f64,
}

impl IntensityTransfer {
    pub const IDENTITY: IntensityTransfer = IntensityTransfer {
        offset: 0.0,
        gain: 1.0,
        gamma: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Validation(format!("transfer gamma must be positive, got {}", self.gamma)));
        }
        if self.gain == 0.0 || !self.gain.is_finite() || !self.offset.is_finite() {
            return Err(Error::Validation("transfer gain must be finite and nonzero".into()));
        }
        Ok(())
    }

    pub fn apply(&self, v: f64) -> f64 {
        self.offset + self.gain * v.max(0.0).powf(self.gamma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticPhantomSpec {
    pub num_shapes: usize,
    pub intensity_map: IntensityTransfer,
    /// Standard deviation of the Gaussian blur, in pixels.
    pub blur_radius: f64,
    pub noise_std: f64,
    /// Width of the soft ellipse edge, in units of the ellipse radius.
    pub edge_softness: f64,
}

impl Default for SyntheticPhantomSpec {
    fn default() -> Self {
        SyntheticPhantomSpec {
            num_shapes: 4,
            intensity_map: IntensityTransfer {
                offset: 0.0,
                gain: 1.0,
                gamma: 2.0,
            },
            blur_radius: 1.0,
            noise_std: 0.02,
            edge_softness: 0.08,
        }
    }
}

impl SyntheticPhantomSpec {
    pub fn validate(&self) -> Result<()> {
        self.intensity_map.validate()?;
        if !(self.blur_radius >= 0.0 && self.blur_radius.is_finite()) {
            return Err(Error::Validation(format!("blur_radius must be >= 0, got {}", self.blur_radius)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Validation(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(self.edge_softness > 0.0) {
            return Err(Error::Validation("edge_softness must be positive".into()));
        }
        Ok(())
    }
}

/// Guide in `[0, 1]`: a sum of soft-edged random ellipses, clipped.
pub fn phantom<R: Rng + ?Sized>(spec: &SyntheticPhantomSpec, size: usize, rng: &mut R) -> Grid {
    let mut img = Grid::zeros(size, size);
    for _ in 0..spec.num_shapes {
        let cy = rng.random_range(0.2..0.8);
        let cx = rng.random_range(0.2..0.8);
        let ay = rng.random_range(0.08..0.35);
        let ax = rng.random_range(0.08..0.35);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let level = rng.random_range(0.2..0.7);
        let (s, c) = theta.sin_cos();
        for r in 0..size {
            for col in 0..size {
                let y = (r as f64 + 0.5) / size as f64 - cy;
                let x = (col as f64 + 0.5) / size as f64 - cx;
                let u = (c * x + s * y) / ax;
                let v = (-s * x + c * y) / ay;
                let radius = (u * u + v * v).sqrt();
                let inside = 1.0 / (1.0 + ((radius - 1.0) / spec.edge_softness).exp());
                let idx = r * size + col;
                img.as_mut_slice()[idx] += level * inside;
            }
        }
    }
    img.map(|v| v.clamp(0.0, 1.0))
}

/// Separable Gaussian blur with edge clamping; `sigma = 0` is the identity.
pub fn gaussian_blur(grid: &Grid, sigma: f64) -> Grid {
    if sigma == 0.0 {
        return grid.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = grid.shape();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let off = j as isize - radius;
                    let (rr, cc) = if horizontal {
                        (r as isize, (c as isize + off).clamp(0, w as isize - 1))
                    } else {
                        ((r as isize + off).clamp(0, h as isize - 1), c as isize)
                    };
                    acc += k * src[rr as usize * w + cc as usize];
                }
                out[r * w + c] = acc;
            }
        }
        out
    };
    let tmp = pass(grid.as_slice(), true);
    Grid::new(h, w, pass(&tmp, false)).expect("blur keeps the shape")
}

/// Target modality from a guide: transfer, blur, then additive noise.
pub fn synthesize_target<R: Rng + ?Sized>(spec: &SyntheticPhantomSpec, guide: &Grid, rng: &mut R) -> Grid {
    let mapped = guide.map(|v| spec.intensity_map.apply(v));
    let blurred = gaussian_blur(&mapped, spec.blur_radius);
    if spec.noise_std == 0.0 {
        return blurred;
    }
    let z = Grid::standard_normal(guide.height(), guide.width(), rng);
    blurred.add_scaled(&z, spec.noise_std).expect("same shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub guide: Grid,
    pub target: Grid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub pairs: Vec<Pair>,
    pub height: usize,
    pub width: usize,
    /// Raw-intensity range mapped to `[-1, 1]`.
    pub normalization: (f64, f64),
    pub seed: u64,
    /// The last `heldout` pairs are reserved for evaluation.
    pub heldout: usize,
}

impl PairedDataset {
    pub fn train_pairs(&self) -> &[Pair] {
        &self.pairs[..self.pairs.len() - self.heldout]
    }

    pub fn heldout_pairs(&self) -> &[Pair] {
        &self.pairs[self.pairs.len() - self.heldout..]
    }

    /// Clean joint states for the training split.
    pub fn training_states(&self) -> Result<Vec<JointState>> {
        self.train_pairs()
            .iter()
            .map(|p| JointState::new(p.target.clone(), p.guide.clone()))
            .collect()
    }
}

/// Generates `count` pairs of `size x size` images, normalized jointly to
/// `[-1, 1]` by the min and max over every guide and target. Pair `i` draws
/// from its own stream, so generation is parallel and reproducible.
pub fn generate_pairs(
    spec: &SyntheticPhantomSpec,
    count: usize,
    size: usize,
    seed: u64,
    heldout: usize,
) -> Result<PairedDataset> {
    spec.validate()?;
    if size < 8 {
        return Err(Error::Validation(format!("image size must be at least 8, got {size}")));
    }
    if count == 0 {
        return Err(Error::Validation("pair count must be at least 1".into()));
    }
    if heldout >= count {
        return Err(Error::Validation(format!(
            "held-out count {heldout} leaves no training pairs out of {count}"
        )));
    }
    let raw: Vec<Pair> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeding::stream_rng(seed, i as u64);
            let guide = phantom(spec, size, &mut rng);
            let target = synthesize_target(spec, &guide, &mut rng);
            Pair { guide, target }
        })
        .collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &raw {
        for g in [&p.guide, &p.target] {
            let (a, b) = g.min_max();
            lo = lo.min(a);
            hi = hi.max(b);
        }
    }
    if !(hi > lo) {
        hi = lo + 1.0;
    }
    let pairs = raw
        .into_iter()
        .map(|p| {
            Ok(Pair {
                guide: normalize(&p.guide, lo, hi)?,
                target: normalize(&p.target, lo, hi)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairedDataset {
        pairs,
        height: size,
        width: size,
        normalization: (lo, hi),
        seed,
        heldout,
    })
}

/// `count` scalar targets drawn from `N(mean, std^2)` with a zero guide.
/// Values are stored as drawn (normalization range `[-1, 1]`).
pub fn generate_gaussian_pairs(count: usize, mean: f64, std: f64, seed: u64) -> Result<PairedDataset> {
    if count == 0 {
        return Err(Error::Validation("pair count must be at least 1".into()));
    }
    if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
        return Err(Error::Validation(format!("gaussian data needs finite mean and std > 0, got {mean}, {std}")));
    }
    let mut rng = seeding::rng(seed);
    let pairs = (0..count)
        .map(|_| Pair {
            guide: Grid::zeros(1, 1),
            target: Grid::scalar(mean + std * rng.sample::<f64, _>(StandardNormal)),
        })
        .collect();
    Ok(PairedDataset {
        pairs,
        height: 1,
        width: 1,
        normalization: (-1.0, 1.0),
        seed,
        heldout: 0,
    })
}

/// Affine map of `[lo, hi]` onto `[-1, 1]`.
pub fn normalize(grid: &Grid, lo: f64, hi: f64) -> Result<Grid> {
    check_range(lo, hi)?;
    let scale = 2.0 / (hi - lo);
    Ok(grid.map(|v| (v - lo) * scale - 1.0))
}

/// Inverse of [`normalize`].
pub fn denormalize(grid: &Grid, lo: f64, hi: f64) -> Result<Grid> {
    check_range(lo, hi)?;
    let half = 0.5 * (hi - lo);
    Ok(grid.map(|v| (v + 1.0) * half + lo))
}

fn check_range(lo: f64, hi: f64) -> Result<()> {
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Argument(format!("normalization needs lo < hi, got [{lo}, {hi}]")));
    }
    Ok(())
}

/// Bilinear resize with corner-aligned sampling: output pixel `i` reads
/// source coordinate `i * (h - 1) / (new_h - 1)`, so corners map to corners.
pub fn resize(grid: &Grid, new_h: usize, new_w: usize) -> Result<Grid> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::Argument(format!("cannot resize to {new_h}x{new_w}")));
    }
    let (h, w) = grid.shape();
    if (h, w) == (new_h, new_w) {
        return Ok(grid.clone());
    }
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let i0 = (x.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = Vec::with_capacity(new_h * new_w);
    for r in 0..new_h {
        let (r0, r1, fy) = coord(r, new_h, h);
        for c in 0..new_w {
            let (c0, c1, fx) = coord(c, new_w, w);
            let top = grid.get(r0, c0) * (1.0 - fx) + grid.get(r0, c1) * fx;
            let bottom = grid.get(r1, c0) * (1.0 - fx) + grid.get(r1, c1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Grid::new(new_h, new_w, out)
}

pub fn encode_image(grid: &Grid) -> Vec<u8> {
    let mut out = Vec::with_capacity(IMAGE_HEADER + 8 * grid.len());
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.height() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.width() as u32).to_le_bytes());
    for v in grid.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses native image bytes; `path` is only used in error messages.
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Grid> {
    let bad = |reason: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < IMAGE_HEADER {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: IMAGE_HEADER,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != IMAGE_MAGIC {
        return Err(bad("missing JPIM magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != IMAGE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    if h == 0 || w == 0 {
        return Err(bad("zero image dimension"));
    }
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(IMAGE_HEADER))
        .ok_or_else(|| bad("dimensions overflow"))?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(bad("trailing bytes after payload"));
    }
    let data = bytes[IMAGE_HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Grid::new(h, w, data)
}

pub fn write_image(path: &Path, grid: &Grid) -> Result<()> {
    if !grid.is_finite() {
        return Err(Error::Argument(format!("{}: refusing to write non-finite image", path.display())));
    }
    atomic_write(path, &encode_image(grid))
}

pub fn read_image(path: &Path) -> Result<Grid> {
    decode_image(&read_bytes(path)?, path)
}

/// 8-bit gray level of a `[-1, 1]` value: `round((v + 1) / 2 * 255)`, clipped.
pub fn quantize(v: f64) -> u8 {
    (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(grid: &Grid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(grid.as_slice().iter().map(|v| quantize(*v)));
    out
}

pub fn write_pgm(path: &Path, grid: &Grid) -> Result<()> {
    atomic_write(path, &encode_pgm(grid))
}

/// Reads a binary 8-bit PGM into `[-1, 1]`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Grid> {
    let bad = |reason: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("incomplete PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("only binary P5 PGM is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric PGM header field"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 || w == 0 || h == 0 {
        return Err(bad("expected nonzero dimensions and maxval 255"));
    }
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() < w * h {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: pos + w * h,
            found: bytes.len(),
        });
    }
    let data = payload[..w * h].iter().map(|b| *b as f64 / 255.0 * 2.0 - 1.0).collect();
    Grid::new(h, w, data)
}

pub fn read_pgm(path: &Path) -> Result<Grid> {
    decode_pgm(&read_bytes(path)?, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    pub guide: PathBuf,
    pub target: PathBuf,
}

/// Plain-text dataset index. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub normalization: (f64, f64),
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# jpddm dataset manifest\n");
        s.push_str(&format!("height {}\nwidth {}\nseed {}\n", self.height, self.width, self.seed));
        s.push_str(&format!("normalization {} {}\n", self.normalization.0, self.normalization.1));
        for e in &self.entries {
            s.push_str(&format!(
                "pair {} {} {}\n",
                e.split.as_str(),
                e.guide.display(),
                e.target.display()
            ));
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, reason: &str| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("line {line}: {reason}"),
        };
        let (mut height, mut width, mut seed, mut norm) = (None, None, None, None);
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let n = n + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<u64>().map_err(|_| bad(n, "expected an integer"));
            let real = |s: &str| s.parse::<f64>().map_err(|_| bad(n, "expected a number"));
            match parts.as_slice() {
                ["height", v] => height = Some(num(v)? as usize),
                ["width", v] => width = Some(num(v)? as usize),
                ["seed", v] => seed = Some(num(v)?),
                ["normalization", lo, hi] => norm = Some((real(lo)?, real(hi)?)),
                ["pair", split, guide, target] => {
                    let split = match *split {
                        "train" => Split::Train,
                        "heldout" => Split::Heldout,
                        _ => return Err(bad(n, "split must be train or heldout")),
                    };
                    entries.push(ManifestEntry {
                        split,
                        guide: PathBuf::from(guide),
                        target: PathBuf::from(target),
                    });
                }
                _ => return Err(bad(n, "unrecognized entry")),
            }
        }
        let missing = |what: &str| bad(0, &format!("missing {what}"));
        Ok(DatasetManifest {
            height: height.ok_or_else(|| missing("height"))?,
            width: width.ok_or_else(|| missing("width"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            normalization: norm.ok_or_else(|| missing("normalization"))?,
            entries,
        })
    }
}

/// Writes every pair as `.jpim` files under `dir/pairs` plus the manifest.
pub fn save_dataset(dir: &Path, data: &PairedDataset) -> Result<DatasetManifest> {
    let pair_dir = dir.join("pairs");
    fs::create_dir_all(&pair_dir).map_err(|e| Error::io(&pair_dir, e))?;
    let n_train = data.pairs.len() - data.heldout;
    let mut entries = Vec::with_capacity(data.pairs.len());
    for (i, p) in data.pairs.iter().enumerate() {
        let guide = PathBuf::from(format!("pairs/{i:05}_guide.jpim"));
        let target = PathBuf::from(format!("pairs/{i:05}_target.jpim"));
        write_image(&dir.join(&guide), &p.guide)?;
        write_image(&dir.join(&target), &p.target)?;
        entries.push(ManifestEntry {
            split: if i < n_train { Split::Train } else { Split::Heldout },
            guide,
            target,
        });
    }
    let manifest = DatasetManifest {
        height: data.height,
        width: data.width,
        seed: data.seed,
        normalization: data.normalization,
        entries,
    };
    atomic_write(&dir.join(MANIFEST_FILE), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

/// Loads a dataset written by [`save_dataset`]. Held-out pairs must come last.
pub fn load_dataset(dir: &Path) -> Result<PairedDataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = DatasetManifest::parse(&text, &path)?;
    let first_heldout = manifest
        .entries
        .iter()
        .position(|e| e.split == Split::Heldout)
        .unwrap_or(manifest.entries.len());
    if manifest.entries[first_heldout..].iter().any(|e| e.split == Split::Train) {
        return Err(Error::MalformedHeader {
            path,
            reason: "held-out pairs must follow all training pairs".into(),
        });
    }
    let pairs = manifest
        .entries
        .par_iter()
        .map(|e| {
            let guide = read_image(&dir.join(&e.guide))?;
            let target = read_image(&dir.join(&e.target))?;
            for g in [&guide, &target] {
                if g.shape() != (manifest.height, manifest.width) {
                    return Err(Error::Dimension(format!(
                        "{}: expected {}x{} images",
                        e.guide.display(),
                        manifest.height,
                        manifest.width
                    )));
                }
            }
            Ok(Pair { guide, target })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairedDataset {
        heldout: pairs.len() - first_heldout,
        pairs,
        height: manifest.height,
        width: manifest.width,
        normalization: manifest.normalization,
        seed: manifest.seed,
    })
}
