//! Dataset ingestion, splitting, and the synthetic center-signal generator.
//!
//! The generator reproduces the dataset premise at desk scale: 96x96 RGB
//! patches whose class evidence lives strictly inside the center 32x32
//! region. Both classes share one background texture process (seeded
//! low-frequency shading plus high-frequency speckle); positive images
//! additionally receive Gabor-like oriented stripes confined to the center
//! block. Backgrounds are drawn per consecutive image pair and shared
//! within the pair, so at a 50/50 class balance every positive has a
//! matched negative control and the class-conditional mean difference is
//! exactly zero outside the center by construction.

pub mod ppm;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::augment::ImagePatch;
use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// Expected side length of dataset patches.
pub const PATCH_SIDE: usize = 96;
/// First row/col of the informative center block.
pub const CENTER_LO: usize = 32;
/// One past the last row/col of the informative center block.
pub const CENTER_HI: usize = 64;

/// Generator defaults: mid-gray base, low-frequency shading amplitude,
/// speckle amplitude, and stripe amplitude.
pub const BASE_LEVEL: f64 = 150.0;
pub const LOW_FREQ_AMP: f64 = 40.0;
pub const DEFAULT_NOISE_LEVEL: f64 = 20.0;
pub const DEFAULT_SIGNAL_STRENGTH: f64 = 25.0;
/// Class imbalance mirroring the 89117 / 220025 source ratio.
pub const DEFAULT_POS_FRACTION: f64 = 0.405;

const LABEL_STREAM: u64 = 0x6c61_6265;
const BG_STREAM: u64 = 0x6267_5f73;
const SIG_STREAM: u64 = 0x7369_675f;
const SPLIT_STREAM: u64 = 0x7370_6c69;

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSource {
    Synthetic,
    Disk(PathBuf),
}

/// An ordered, labeled set of patches with a reproducibility digest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<ImagePatch>,
    pub source: DatasetSource,
    /// SHA-256 hex over the dataset contents; see [`dataset_digest`] and
    /// [`load_dataset`] for the two framing rules.
    pub digest: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// (negatives, positives)
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.images.iter().filter(|p| p.label == 1).count();
        (self.images.len() - pos, pos)
    }

    pub fn labels(&self) -> Vec<u8> {
        self.images.iter().map(|p| p.label).collect()
    }
}

/// Synthetic dataset parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub pos_fraction: f64,
    pub signal_strength: f64,
    pub noise_level: f64,
    pub texture_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n: 2000,
            pos_fraction: DEFAULT_POS_FRACTION,
            signal_strength: DEFAULT_SIGNAL_STRENGTH,
            noise_level: DEFAULT_NOISE_LEVEL,
            texture_seed: 0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::config(format!("synthetic n = {} must be >= 2", self.n)));
        }
        if !(self.pos_fraction > 0.0 && self.pos_fraction < 1.0) {
            return Err(Error::config(format!(
                "pos_fraction {} must lie strictly inside (0,1)",
                self.pos_fraction
            )));
        }
        if self.signal_strength < 0.0 || !self.signal_strength.is_finite() {
            return Err(Error::config(format!(
                "signal_strength {} must be a finite non-negative value",
                self.signal_strength
            )));
        }
        if self.noise_level < 0.0 || !self.noise_level.is_finite() {
            return Err(Error::config(format!(
                "noise_level {} must be a finite non-negative value",
                self.noise_level
            )));
        }
        Ok(())
    }
}

/// Digest over in-memory content: (source_id, label, pixel bytes) in
/// dataset order.
pub fn dataset_digest(images: &[ImagePatch]) -> String {
    let mut h = Sha256::new();
    for img in images {
        h.update((img.source_id.len() as u64).to_le_bytes());
        h.update(img.source_id.as_bytes());
        h.update([img.label]);
        let bytes: Vec<u8> = img.pixels.iter().map(|&v| v as u8).collect();
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    to_hex(&h.finalize())
}

fn to_hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Generate a synthetic center-signal dataset. Fully deterministic per
/// spec; image `i` depends only on `(texture_seed, i)` streams.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    crate::perf::tune_allocator();
    spec.validate()?;
    let n = spec.n;
    let n_pos = ((n as f64 * spec.pos_fraction).round() as usize).clamp(1, n - 1);
    let labels = pair_balanced_labels(n, n_pos, spec.texture_seed);

    let mut images = Vec::with_capacity(n);
    for pair in 0..n.div_ceil(2) {
        let raw = background(spec, pair);
        for member in 0..2 {
            let idx = pair * 2 + member;
            if idx >= n {
                break;
            }
            let mut px = raw.clone();
            if labels[idx] == 1 && spec.signal_strength > 0.0 {
                add_center_stripes(&mut px, spec, idx);
            }
            let pixels: Vec<f32> = px
                .iter()
                .map(|&v| v.clamp(0.0, 255.0).round() as f32)
                .collect();
            images.push(ImagePatch::new(
                PATCH_SIDE,
                PATCH_SIDE,
                pixels,
                labels[idx],
                format!("synthetic:{}:{idx}", spec.texture_seed),
            )?);
        }
    }
    let digest = dataset_digest(&images);
    Ok(Dataset {
        images,
        source: DatasetSource::Synthetic,
        digest,
    })
}

/// Exact-count label sequence, arranged in pairs so that every positive
/// shares its background with a negative while both classes remain.
fn pair_balanced_labels(n: usize, n_pos: usize, seed: u64) -> Vec<u8> {
    let mut rng = CounterRng::substream(seed, CounterRng::stream_id(&[LABEL_STREAM]));
    let mut pos_left = n_pos;
    let mut neg_left = n - n_pos;
    let mut labels = Vec::with_capacity(n);
    while labels.len() + 2 <= n {
        let pair: [u8; 2] = if pos_left > 0 && neg_left > 0 {
            if rng.gen_bool(0.5) {
                [1, 0]
            } else {
                [0, 1]
            }
        } else if pos_left >= 2 {
            [1, 1]
        } else {
            [0, 0]
        };
        for l in pair {
            if l == 1 {
                pos_left -= 1;
            } else {
                neg_left -= 1;
            }
            labels.push(l);
        }
    }
    if labels.len() < n {
        labels.push(if pos_left > 0 { 1 } else { 0 });
    }
    labels
}

/// Shared background for one image pair: coarse bilinear shading plus
/// per-pixel speckle, unclamped f64 HWC values.
fn background(spec: &SynthSpec, pair: usize) -> Vec<f64> {
    const GRID: usize = 7;
    let mut rng = CounterRng::substream(
        spec.texture_seed,
        CounterRng::stream_id(&[BG_STREAM, pair as u64]),
    );
    let mut grid = [[[0.0f64; GRID]; GRID]; 3];
    for ch in grid.iter_mut() {
        for row in ch.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.gen_uniform(-1.0, 1.0);
            }
        }
    }
    let side = PATCH_SIDE;
    let scale = (GRID - 1) as f64 / (side - 1) as f64;
    let mut px = vec![0.0f64; side * side * 3];
    for r in 0..side {
        let fy = r as f64 * scale;
        let y0 = (fy as usize).min(GRID - 2);
        let ty = fy - y0 as f64;
        for c in 0..side {
            let fx = c as f64 * scale;
            let x0 = (fx as usize).min(GRID - 2);
            let tx = fx - x0 as f64;
            for ch in 0..3 {
                let g = &grid[ch];
                let low = g[y0][x0] * (1.0 - ty) * (1.0 - tx)
                    + g[y0][x0 + 1] * (1.0 - ty) * tx
                    + g[y0 + 1][x0] * ty * (1.0 - tx)
                    + g[y0 + 1][x0 + 1] * ty * tx;
                let speckle = rng.gen_uniform(-spec.noise_level, spec.noise_level);
                px[(r * side + c) * 3 + ch] = BASE_LEVEL + LOW_FREQ_AMP * low + speckle;
            }
        }
    }
    px
}

/// Add oriented stripes of amplitude `signal_strength`, strictly inside the
/// center block, with per-image orientation/frequency/phase.
fn add_center_stripes(px: &mut [f64], spec: &SynthSpec, index: usize) {
    let mut rng = CounterRng::substream(
        spec.texture_seed,
        CounterRng::stream_id(&[SIG_STREAM, index as u64]),
    );
    let theta = rng.gen_uniform(0.0, std::f64::consts::PI);
    let freq = rng.gen_uniform(0.15, 0.35);
    let phase = rng.gen_uniform(0.0, std::f64::consts::TAU);
    let (sin_t, cos_t) = theta.sin_cos();
    for r in CENTER_LO..CENTER_HI {
        for c in CENTER_LO..CENTER_HI {
            let u = r as f64 * sin_t + c as f64 * cos_t;
            let v = spec.signal_strength * (std::f64::consts::TAU * freq * u + phase).cos();
            for ch in 0..3 {
                px[(r * PATCH_SIDE + c) * 3 + ch] += v;
            }
        }
    }
}

/// Write a dataset as PPM files plus `labels.csv` (header
/// `filename,label`, LF line endings).
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}: {e}", dir.display())))?;
    let mut manifest = String::from("filename,label\n");
    for (i, img) in ds.images.iter().enumerate() {
        let name = format!("img_{i:05}.ppm");
        let rgb: Vec<u8> = img
            .pixels
            .iter()
            .map(|&v| v.clamp(0.0, 255.0).round() as u8)
            .collect();
        let bytes = ppm::encode(img.width, img.height, &rgb);
        let path = dir.join(&name);
        std::fs::write(&path, bytes)
            .map_err(|e| Error::io(format!("writing {}: {e}", path.display())))?;
        let _ = writeln!(manifest, "{name},{}", img.label);
    }
    let path = dir.join("labels.csv");
    std::fs::write(&path, manifest)
        .map_err(|e| Error::io(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

/// Load a dataset directory (`labels.csv` + referenced PPM files), in
/// manifest order. The digest is SHA-256 over entries sorted by filename:
/// (filename, label, raw file bytes).
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("labels.csv");
    let manifest = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(format!("reading {}: {e}", manifest_path.display())))?;
    let mut lines = manifest.lines();
    match lines.next() {
        Some(h) if h.trim_end() == "filename,label" => {}
        other => {
            return Err(Error::data(format!(
                "labels.csv: expected header `filename,label`, got {other:?}"
            )))
        }
    }

    let mut images = Vec::new();
    let mut digest_entries: Vec<(String, u8, Vec<u8>)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let row = lineno + 2; // 1-based, after the header
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let (filename, label_text) = line.split_once(',').ok_or_else(|| {
            Error::data(format!("labels.csv row {row}: expected `filename,label`"))
        })?;
        let label: u8 = match label_text.trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::data(format!(
                    "labels.csv row {row}: label `{other}` outside {{0,1}}"
                )))
            }
        };
        let path = root.join(filename);
        let bytes = std::fs::read(&path).map_err(|e| {
            Error::data(format!("labels.csv row {row}: cannot read {}: {e}", path.display()))
        })?;
        let (w, h, rgb) = ppm::decode(&bytes)
            .map_err(|e| Error::data(format!("labels.csv row {row} ({filename}): {e}")))?;
        if w != PATCH_SIDE || h != PATCH_SIDE {
            return Err(Error::data(format!(
                "labels.csv row {row} ({filename}): image is {w}x{h}, expected {PATCH_SIDE}x{PATCH_SIDE}"
            )));
        }
        let pixels: Vec<f32> = rgb.iter().map(|&b| b as f32).collect();
        images.push(ImagePatch::new(h, w, pixels, label, filename)?);
        digest_entries.push((filename.to_string(), label, bytes));
    }
    if images.is_empty() {
        return Err(Error::data(format!(
            "{}: manifest lists no images",
            manifest_path.display()
        )));
    }

    digest_entries.sort_by(|a, b| a.0.cmp(&b.0));
    let mut hasher = Sha256::new();
    for (name, label, bytes) in &digest_entries {
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update([*label]);
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    }
    Ok(Dataset {
        images,
        source: DatasetSource::Disk(root.to_path_buf()),
        digest: to_hex(&hasher.finalize()),
    })
}

/// Stratified split: per class, seeded shuffle then prefix split, so each
/// side's class ratio matches the whole within one sample per class. The
/// returned datasets keep the original relative order.
pub fn split_dataset(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::usage(format!(
            "train_fraction {train_fraction} must lie strictly inside (0,1)"
        )));
    }
    let mut train_idx: Vec<usize> = Vec::new();
    let mut val_idx: Vec<usize> = Vec::new();
    for class in 0..=1u8 {
        let members: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.images[i].label == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mut shuffled = members.clone();
        let mut rng = CounterRng::substream(
            seed,
            CounterRng::stream_id(&[SPLIT_STREAM, class as u64]),
        );
        rng.shuffle(&mut shuffled);
        let take = (members.len() as f64 * train_fraction).round() as usize;
        train_idx.extend_from_slice(&shuffled[..take]);
        val_idx.extend_from_slice(&shuffled[take..]);
    }
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::usage(format!(
            "train_fraction {train_fraction} leaves an empty split for {} samples",
            ds.len()
        )));
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    let subset = |idx: &[usize]| -> Dataset {
        let images: Vec<ImagePatch> = idx.iter().map(|&i| ds.images[i].clone()).collect();
        let digest = dataset_digest(&images);
        Dataset {
            images,
            source: ds.source.clone(),
            digest,
        }
    };
    Ok((subset(&train_idx), subset(&val_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_contract_and_shapes() {
        let ds = generate_synthetic(&SynthSpec {
            n: 100,
            pos_fraction: 0.5,
            ..SynthSpec::default()
        })
        .unwrap();
        let (neg, pos) = ds.class_counts();
        assert_eq!((neg, pos), (50, 50));
        for img in &ds.images {
            assert_eq!((img.height, img.width), (96, 96));
            assert_eq!(img.pixels.len(), 96 * 96 * 3);
            assert!(img.pixels.iter().all(|&v| (0.0..=255.0).contains(&v)));
            assert!(img.pixels.iter().all(|&v| v == v.round()));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec {
            n: 20,
            ..SynthSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.digest, b.digest);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.pixels, y.pixels);
        }
    }

    #[test]
    fn null_signal_gives_identical_class_pixel_multisets_when_balanced() {
        let ds = generate_synthetic(&SynthSpec {
            n: 200,
            pos_fraction: 0.5,
            signal_strength: 0.0,
            ..SynthSpec::default()
        })
        .unwrap();
        let mut pos: Vec<u32> = Vec::new();
        let mut neg: Vec<u32> = Vec::new();
        for img in &ds.images {
            let sink = if img.label == 1 { &mut pos } else { &mut neg };
            sink.extend(img.pixels.iter().map(|&v| v as u32));
        }
        pos.sort_unstable();
        neg.sort_unstable();
        assert_eq!(pos, neg);
    }

    #[test]
    fn class_mean_difference_is_zero_outside_center_and_nonzero_inside() {
        let ds = generate_synthetic(&SynthSpec {
            n: 10_000,
            pos_fraction: 0.5,
            ..SynthSpec::default()
        })
        .unwrap();
        let side = PATCH_SIDE;
        let mut pos_sum = vec![0.0f64; side * side];
        let mut neg_sum = vec![0.0f64; side * side];
        let mut n_pos = 0.0;
        let mut n_neg = 0.0;
        for img in &ds.images {
            let (sink, count) = if img.label == 1 {
                (&mut pos_sum, &mut n_pos)
            } else {
                (&mut neg_sum, &mut n_neg)
            };
            *count += 1.0;
            for (p, s) in img.pixels.chunks_exact(3).zip(sink.iter_mut()) {
                *s += p[0] as f64;
            }
        }
        let mut max_outside = 0.0f64;
        let mut max_inside = 0.0f64;
        for r in 0..side {
            for c in 0..side {
                let d = (pos_sum[r * side + c] / n_pos - neg_sum[r * side + c] / n_neg).abs();
                let inside =
                    (CENTER_LO..CENTER_HI).contains(&r) && (CENTER_LO..CENTER_HI).contains(&c);
                if inside {
                    max_inside = max_inside.max(d);
                } else {
                    max_outside = max_outside.max(d);
                }
            }
        }
        assert_eq!(max_outside, 0.0, "background leaked class information");
        assert!(max_inside > 0.5, "signal too weak to measure: {max_inside}");
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        assert!(generate_synthetic(&SynthSpec { n: 1, ..SynthSpec::default() }).is_err());
        assert!(generate_synthetic(&SynthSpec {
            pos_fraction: 0.0,
            ..SynthSpec::default()
        })
        .is_err());
        assert!(generate_synthetic(&SynthSpec {
            signal_strength: -1.0,
            ..SynthSpec::default()
        })
        .is_err());
    }

    #[test]
    fn write_then_load_roundtrips_bitwise() {
        let dir = std::env::temp_dir().join(format!("effnet-mini-data-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let ds = generate_synthetic(&SynthSpec {
            n: 12,
            ..SynthSpec::default()
        })
        .unwrap();
        write_dataset(&ds, &dir).unwrap();
        let loaded = load_dataset(&dir).unwrap();
        assert_eq!(loaded.len(), 12);
        for (a, b) in ds.images.iter().zip(&loaded.images) {
            assert_eq!(a.pixels, b.pixels);
            assert_eq!(a.label, b.label);
        }
        // unchanged directory -> identical manifest digest
        let again = load_dataset(&dir).unwrap();
        assert_eq!(loaded.digest, again.digest);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn loader_reports_bad_rows() {
        let dir = std::env::temp_dir().join(format!("effnet-mini-bad-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();

        // wrong dimensions
        let small = ppm::encode(64, 64, &vec![0u8; 64 * 64 * 3]);
        std::fs::write(dir.join("small.ppm"), small).unwrap();
        std::fs::write(dir.join("labels.csv"), "filename,label\nsmall.ppm,0\n").unwrap();
        let err = load_dataset(&dir).unwrap_err();
        match err {
            Error::Data(m) => assert!(m.contains("96x96") && m.contains("row 2"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }

        // bad label
        std::fs::write(dir.join("labels.csv"), "filename,label\nsmall.ppm,7\n").unwrap();
        assert!(matches!(load_dataset(&dir), Err(Error::Data(_))));

        // missing file
        std::fs::write(dir.join("labels.csv"), "filename,label\nnope.ppm,0\n").unwrap();
        assert!(matches!(load_dataset(&dir), Err(Error::Data(_))));

        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let ds = generate_synthetic(&SynthSpec {
            n: 100,
            ..SynthSpec::default()
        })
        .unwrap();
        let (t1, v1) = split_dataset(&ds, 0.8, 7).unwrap();
        let (t2, v2) = split_dataset(&ds, 0.8, 7).unwrap();
        assert_eq!(t1.digest, t2.digest);
        assert_eq!(v1.digest, v2.digest);
        assert_eq!(t1.len() + v1.len(), ds.len());

        let mut ids: Vec<&str> = t1
            .images
            .iter()
            .chain(&v1.images)
            .map(|p| p.source_id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), ds.len(), "splits overlap or drop samples");
    }

    #[test]
    fn split_is_stratified_within_one_sample() {
        let ds = generate_synthetic(&SynthSpec {
            n: 1000,
            pos_fraction: 0.405,
            ..SynthSpec::default()
        })
        .unwrap();
        let (_, pos) = ds.class_counts();
        assert_eq!(pos, 405);
        let (train, val) = split_dataset(&ds, 0.8, 3).unwrap();
        let (_, tp) = train.class_counts();
        let (_, vp) = val.class_counts();
        assert_eq!(tp, 324); // round(0.8 * 405)
        assert_eq!(vp, 81);
        assert_eq!(train.len(), 800);
        assert_eq!(val.len(), 200);
    }

    #[test]
    fn split_rejects_empty_side() {
        let ds = generate_synthetic(&SynthSpec {
            n: 4,
            pos_fraction: 0.5,
            ..SynthSpec::default()
        })
        .unwrap();
        assert!(matches!(split_dataset(&ds, 0.999, 1), Err(Error::Usage(_))));
        assert!(matches!(split_dataset(&ds, 1.0, 1), Err(Error::Usage(_))));
    }

    #[test]
    fn null_case_kolmogorov_smirnov_calibration() {
        // Two-sample KS on pixel samples, signal off: the classes must be
        // statistically indistinguishable (p > 0.01 on 10 seeds). Pixels
        // within one image share its low-frequency shading, so the samples
        // are kept sparse (a 4x4 grid of well-separated positions per
        // image) to stay close to the independence the test assumes.
        for seed in 0..10u64 {
            let ds = generate_synthetic(&SynthSpec {
                n: 400,
                signal_strength: 0.0,
                texture_seed: seed,
                ..SynthSpec::default()
            })
            .unwrap();
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for img in &ds.images {
                let sink = if img.label == 1 { &mut pos } else { &mut neg };
                for r in [12usize, 36, 60, 84] {
                    for c in [12usize, 36, 60, 84] {
                        sink.push(img.get(r, c, 0) as f64);
                    }
                }
            }
            let p = ks_two_sample_p(&mut pos, &mut neg);
            assert!(p > 0.01, "seed {seed}: KS p-value {p}");
        }
    }

    /// Two-sample Kolmogorov-Smirnov p-value (asymptotic).
    fn ks_two_sample_p(a: &mut Vec<f64>, b: &mut Vec<f64>) -> f64 {
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let mut i = 0usize;
        let mut j = 0usize;
        let mut d = 0.0f64;
        while i < a.len() && j < b.len() {
            let x = a[i].min(b[j]);
            while i < a.len() && a[i] <= x {
                i += 1;
            }
            while j < b.len() && b[j] <= x {
                j += 1;
            }
            d = d.max((i as f64 / na - j as f64 / nb).abs());
        }
        let ne = (na * nb / (na + nb)).sqrt();
        let lambda = (ne + 0.12 + 0.11 / ne) * d;
        // Q_KS(lambda) = 2 sum (-1)^{k-1} exp(-2 k^2 lambda^2)
        let mut p = 0.0f64;
        for k in 1..=100 {
            let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
            p += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
        }
        p.clamp(0.0, 1.0)
    }
}
