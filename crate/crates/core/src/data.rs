//! Synthetic patch generation, normalization, splitting, and the ULDS
//! on-disk dataset format.
//!
//! Patches imitate the shape of the real estimation problem at desk scale:
//! small grayscale images containing two visually distinct cell populations,
//! where the regression target is exactly the malignant fraction of the
//! stamped cells. Pixels are stored as `f32` (the serialized precision) so a
//! save/load round trip reproduces every byte.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, UltraError};
use crate::label_dist::TcScore;

const ULDS_MAGIC: &[u8; 4] = b"ULDS";
const ULDS_VERSION: u16 = 1;

/// Single-channel image with pixel values in `[0, 1]`.
///
/// Dimensions are capped at `u16::MAX` per side, the limit of the file
/// format.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Patch {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(UltraError::invalid("patch dimensions must be nonzero"));
        }
        if height > u16::MAX as usize || width > u16::MAX as usize {
            return Err(UltraError::invalid("patch dimensions exceed u16::MAX"));
        }
        if pixels.len() != height * width {
            return Err(UltraError::mismatch(
                "patch pixels",
                height * width,
                pixels.len(),
            ));
        }
        if pixels.iter().any(|p| !p.is_finite() || !(0.0..=1.0).contains(p)) {
            return Err(UltraError::invalid(
                "patch pixels must be finite values in [0, 1]",
            ));
        }
        Ok(Patch {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    /// Mirror left-right.
    pub fn flipped_horizontal(&self) -> Patch {
        let mut px = Vec::with_capacity(self.pixels.len());
        for r in 0..self.height {
            for c in 0..self.width {
                px.push(self.get(r, self.width - 1 - c));
            }
        }
        Patch {
            height: self.height,
            width: self.width,
            pixels: px,
        }
    }

    /// Mirror top-bottom.
    pub fn flipped_vertical(&self) -> Patch {
        let mut px = Vec::with_capacity(self.pixels.len());
        for r in 0..self.height {
            for c in 0..self.width {
                px.push(self.get(self.height - 1 - r, c));
            }
        }
        Patch {
            height: self.height,
            width: self.width,
            pixels: px,
        }
    }

    /// Quarter turn clockwise; height and width swap.
    pub fn rotated_90cw(&self) -> Patch {
        let (h, w) = (self.height, self.width);
        let mut px = Vec::with_capacity(self.pixels.len());
        for r in 0..w {
            for c in 0..h {
                px.push(self.get(h - 1 - c, r));
            }
        }
        Patch {
            height: w,
            width: h,
            pixels: px,
        }
    }
}

/// One labeled example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub patch: Patch,
    pub label: TcScore,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Parameters of the synthetic patch generator.
///
/// Each patch gets `T` cells drawn uniformly from `[cells_min, cells_max]`,
/// of which `M` are malignant; the label is exactly `M / T`. Malignant and
/// benign cells are disks whose intensities come from two disjoint bands, so
/// the fraction is visually estimable. `label_zero_prob` / `label_one_prob`
/// reserve probability mass for the `M = 0` and `M = T` extremes; otherwise
/// `M` is uniform over `0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub cells_min: usize,
    pub cells_max: usize,
    /// Intensity band `(lo, hi)` for malignant disks.
    pub malignant_intensity: (f64, f64),
    /// Intensity band `(lo, hi)` for benign disks; must not overlap the
    /// malignant band.
    pub benign_intensity: (f64, f64),
    /// Disk radius range `(min, max)` in pixels.
    pub cell_radius: (f64, f64),
    /// Std of additive Gaussian background noise.
    pub noise_std: f64,
    pub label_zero_prob: f64,
    pub label_one_prob: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            height: 16,
            width: 16,
            cells_min: 6,
            cells_max: 14,
            malignant_intensity: (0.55, 0.75),
            benign_intensity: (0.25, 0.45),
            cell_radius: (1.5, 2.6),
            noise_std: 0.05,
            label_zero_prob: 0.04,
            label_one_prob: 0.04,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(UltraError::invalid("patch dimensions must be nonzero"));
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return Err(UltraError::invalid("patch dimensions exceed u16::MAX"));
        }
        if self.cells_min < 1 || self.cells_max < self.cells_min {
            return Err(UltraError::invalid(
                "cell count range must satisfy 1 <= cells_min <= cells_max",
            ));
        }
        for (name, (lo, hi)) in [
            ("malignant intensity band", self.malignant_intensity),
            ("benign intensity band", self.benign_intensity),
        ] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(UltraError::invalid(format!(
                    "{name} must be an ordered range inside [0, 1]"
                )));
            }
        }
        let (mlo, mhi) = self.malignant_intensity;
        let (blo, bhi) = self.benign_intensity;
        if mlo < bhi && blo < mhi {
            return Err(UltraError::invalid(
                "malignant and benign intensity bands must be disjoint",
            ));
        }
        let (rmin, rmax) = self.cell_radius;
        if !(rmin > 0.0) || rmax < rmin {
            return Err(UltraError::invalid(
                "cell radius range must satisfy 0 < min <= max",
            ));
        }
        if 2.0 * rmax >= self.width.min(self.height) as f64 {
            return Err(UltraError::invalid(
                "cell radius too large for the patch dimensions",
            ));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(UltraError::invalid("noise std must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.label_zero_prob)
            || !(0.0..=1.0).contains(&self.label_one_prob)
            || self.label_zero_prob + self.label_one_prob > 1.0
        {
            return Err(UltraError::invalid(
                "endpoint label probabilities must be in [0, 1] and sum to at most 1",
            ));
        }
        Ok(())
    }
}

/// Generates `count` labeled patches.
///
/// Each sample is produced from its own RNG seeded with `config.seed ^ index`,
/// so generation order does not matter and any single sample can be
/// regenerated in isolation. The label is the exact rational `M / T` as an
/// `f64`. Pixels are clamped to `[0, 1]` and quantized to `f32` before the
/// patch is built.
pub fn generate(config: &GeneratorConfig, count: usize) -> Result<Dataset> {
    config.validate()?;
    if count == 0 {
        return Err(UltraError::invalid("sample count must be nonzero"));
    }
    let mut samples = Vec::with_capacity(count);
    for idx in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ idx as u64);
        samples.push(generate_one(config, idx, &mut rng)?);
    }
    Ok(Dataset::new(samples))
}

fn generate_one(config: &GeneratorConfig, idx: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (h, w) = (config.height, config.width);
    let total = rng.random_range(config.cells_min..=config.cells_max);
    let u: f64 = rng.random();
    let malignant = if u < config.label_zero_prob {
        0
    } else if u < config.label_zero_prob + config.label_one_prob {
        total
    } else {
        rng.random_range(0..=total)
    };
    let label = TcScore::new(malignant as f64 / total as f64)?;

    let mut buf = vec![0.0f64; h * w];
    for cell in 0..total {
        let band = if cell < malignant {
            config.malignant_intensity
        } else {
            config.benign_intensity
        };
        let r = rng.random_range(config.cell_radius.0..=config.cell_radius.1);
        let cx = rng.random_range(r..(w as f64 - r));
        let cy = rng.random_range(r..(h as f64 - r));
        let intensity = rng.random_range(band.0..=band.1);
        stamp_disk(&mut buf, h, w, cx, cy, r, intensity);
    }
    if config.noise_std > 0.0 {
        let noise = Normal::new(0.0, config.noise_std)
            .map_err(|e| UltraError::invalid(format!("noise distribution: {e}")))?;
        for p in &mut buf {
            *p += noise.sample(rng);
        }
    }
    let pixels: Vec<f32> = buf.iter().map(|&p| p.clamp(0.0, 1.0) as f32).collect();
    Ok(Sample {
        id: format!("p{idx:04}"),
        patch: Patch::new(h, w, pixels)?,
        label,
    })
}

/// Pixel (row, col) is covered when its center lies within the disk.
fn stamp_disk(buf: &mut [f64], h: usize, w: usize, cx: f64, cy: f64, r: f64, intensity: f64) {
    let r2 = r * r;
    let row_lo = ((cy - r).floor().max(0.0)) as usize;
    let row_hi = ((cy + r).ceil() as usize).min(h - 1);
    let col_lo = ((cx - r).floor().max(0.0)) as usize;
    let col_hi = ((cx + r).ceil() as usize).min(w - 1);
    for row in row_lo..=row_hi {
        for col in col_lo..=col_hi {
            let dy = row as f64 + 0.5 - cy;
            let dx = col as f64 + 0.5 - cx;
            if dx * dx + dy * dy <= r2 {
                buf[row * w + col] = intensity;
            }
        }
    }
}

/// Pixel mean and standard deviation of a training set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    mean: f64,
    std: f64,
}

impl NormStats {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !mean.is_finite() || !std.is_finite() || std <= 0.0 {
            return Err(UltraError::invalid(format!(
                "normalization stats must be finite with positive std, got mean {mean}, std {std}"
            )));
        }
        Ok(NormStats { mean, std })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        self.std
    }
}

/// Population mean/std over every pixel of every patch. Two-pass for
/// stability. Constant datasets are rejected: they cannot be standardized.
pub fn compute_norm_stats(dataset: &Dataset) -> Result<NormStats> {
    if dataset.is_empty() {
        return Err(UltraError::empty("dataset for normalization stats"));
    }
    let mut n = 0usize;
    let mut sum = 0.0f64;
    for s in &dataset.samples {
        for &p in s.patch.pixels() {
            sum += p as f64;
            n += 1;
        }
    }
    let mean = sum / n as f64;
    let mut ss = 0.0f64;
    for s in &dataset.samples {
        for &p in s.patch.pixels() {
            let d = p as f64 - mean;
            ss += d * d;
        }
    }
    let std = (ss / n as f64).sqrt();
    if std == 0.0 {
        return Err(UltraError::DegenerateVariance {
            component: "pixel std of the dataset is zero".into(),
        });
    }
    NormStats::new(mean, std)
}

/// Flattened, standardized pixels `(x - mean) / std` in row-major order.
pub fn apply_norm(patch: &Patch, stats: &NormStats) -> Vec<f64> {
    patch
        .pixels()
        .iter()
        .map(|&p| (p as f64 - stats.mean) / stats.std)
        .collect()
}

/// Deterministic shuffle-and-cut split into train/val/test.
///
/// Fractions must be nonnegative and sum to 1 (within 1e-9). Validation and
/// test sizes round down; the remainder goes to train, so for 1000 samples
/// at (0.8, 0.1, 0.1) the sizes are exactly 800/100/100.
pub fn split(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (ft, fv, fe) = fractions;
    for f in [ft, fv, fe] {
        if !f.is_finite() || f < 0.0 {
            return Err(UltraError::invalid(
                "split fractions must be nonnegative and finite",
            ));
        }
    }
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(UltraError::invalid(format!(
            "split fractions must sum to 1, got {}",
            ft + fv + fe
        )));
    }
    let n = dataset.len();
    let n_val = (fv * n as f64).floor() as usize;
    let n_test = (fe * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;

    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    indices.shuffle(&mut rng);

    let pick = |range: std::ops::Range<usize>| {
        Dataset::new(
            indices[range]
                .iter()
                .map(|&i| dataset.samples[i].clone())
                .collect(),
        )
    };
    Ok((
        pick(0..n_train),
        pick(n_train..n_train + n_val),
        pick(n_train + n_val..n),
    ))
}

/// Serializes a dataset in the ULDS format:
///
/// ```text
/// magic "ULDS" | version u16 LE | count u32 LE | samples...
/// sample: id_len u16 LE | id UTF-8 | height u16 LE | width u16 LE
///         | label f64 LE | pixels (height * width) f32 LE
/// ```
pub fn save_dataset(dataset: &Dataset, path: &std::path::Path) -> Result<()> {
    if dataset.len() > u32::MAX as usize {
        return Err(UltraError::invalid("dataset too large for ULDS (u32 count)"));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(ULDS_MAGIC);
    buf.extend_from_slice(&ULDS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    for s in &dataset.samples {
        let id = s.id.as_bytes();
        if id.len() > u16::MAX as usize {
            return Err(UltraError::invalid(format!(
                "sample id too long for ULDS: {} bytes",
                id.len()
            )));
        }
        buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
        buf.extend_from_slice(id);
        buf.extend_from_slice(&(s.patch.height() as u16).to_le_bytes());
        buf.extend_from_slice(&(s.patch.width() as u16).to_le_bytes());
        buf.extend_from_slice(&s.label.value().to_le_bytes());
        for &p in s.patch.pixels() {
            buf.extend_from_slice(&p.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(UltraError::Parse {
                offset: self.pos as u64,
                what: format!("unexpected end of file while reading {what}"),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16_le(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64_le(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32_le(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Reads a ULDS file back into a dataset, validating invariants on the way;
/// corrupt input yields a parse error carrying the byte offset.
pub fn load_dataset(path: &std::path::Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    let magic = r.take(4, "magic")?;
    if magic != ULDS_MAGIC {
        return Err(UltraError::Parse {
            offset: 0,
            what: format!("bad magic {magic:?}, expected \"ULDS\""),
        });
    }
    let version = r.u16_le("version")?;
    if version != ULDS_VERSION {
        return Err(UltraError::VersionMismatch {
            what: "ULDS dataset".into(),
            found: version,
            expected: ULDS_VERSION,
        });
    }
    let count = r.u32_le("sample count")? as usize;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let id_offset = r.pos as u64;
        let id_len = r.u16_le("id length")? as usize;
        let id_bytes = r.take(id_len, "sample id")?;
        let id = std::str::from_utf8(id_bytes)
            .map_err(|e| UltraError::Parse {
                offset: id_offset,
                what: format!("sample {i} id is not UTF-8: {e}"),
            })?
            .to_string();
        let height = r.u16_le("height")? as usize;
        let width = r.u16_le("width")? as usize;
        let label_offset = r.pos as u64;
        let label = TcScore::new(r.f64_le("label")?).map_err(|e| UltraError::Parse {
            offset: label_offset,
            what: format!("sample {i}: {e}"),
        })?;
        let px_offset = r.pos as u64;
        let mut pixels = Vec::with_capacity(height * width);
        for _ in 0..height * width {
            pixels.push(r.f32_le("pixels")?);
        }
        let patch = Patch::new(height, width, pixels).map_err(|e| UltraError::Parse {
            offset: px_offset,
            what: format!("sample {i}: {e}"),
        })?;
        samples.push(Sample { id, patch, label });
    }
    if r.pos != bytes.len() {
        return Err(UltraError::Parse {
            offset: r.pos as u64,
            what: format!("{} trailing bytes after last sample", bytes.len() - r.pos),
        });
    }
    Ok(Dataset::new(samples))
}

/// Writes the companion `id,tc` CSV next to a dataset.
pub fn write_labels_csv(dataset: &Dataset, path: &std::path::Path) -> Result<()> {
    let mut out = String::from("id,tc\n");
    for s in &dataset.samples {
        out.push_str(&format!("{},{}\n", s.id, s.label.value()));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parses an `id,tc` CSV produced by [`write_labels_csv`].
pub fn read_labels_csv(path: &std::path::Path) -> Result<Vec<(String, TcScore)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "id,tc")) => {}
        _ => {
            return Err(UltraError::Parse {
                offset: 1,
                what: "labels CSV must start with header \"id,tc\"".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = (i + 1) as u64;
        let (id, tc) = line.split_once(',').ok_or_else(|| UltraError::Parse {
            offset: lineno,
            what: "expected \"id,tc\"".into(),
        })?;
        let value: f64 = tc.trim().parse().map_err(|e| UltraError::Parse {
            offset: lineno,
            what: format!("bad tc value {tc:?}: {e}"),
        })?;
        let score = TcScore::new(value).map_err(|e| UltraError::Parse {
            offset: lineno,
            what: e.to_string(),
        })?;
        out.push((id.to_string(), score));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_patch() -> Patch {
        Patch::new(2, 3, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap()
    }

    #[test]
    fn patch_validates() {
        assert!(Patch::new(0, 3, vec![]).is_err());
        assert!(Patch::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Patch::new(1, 2, vec![0.5, 1.5]).is_err());
        assert!(Patch::new(1, 2, vec![0.5, f32::NAN]).is_err());
    }

    #[test]
    fn flips_are_involutions() {
        let p = tiny_patch();
        assert_eq!(p.flipped_horizontal().flipped_horizontal(), p);
        assert_eq!(p.flipped_vertical().flipped_vertical(), p);
        // Spot-check the mirror itself.
        let fh = p.flipped_horizontal();
        assert_eq!(fh.get(0, 0), p.get(0, 2));
        assert_eq!(fh.get(1, 2), p.get(1, 0));
        let fv = p.flipped_vertical();
        assert_eq!(fv.get(0, 1), p.get(1, 1));
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let p = tiny_patch();
        let r = p.rotated_90cw();
        assert_eq!((r.height(), r.width()), (3, 2));
        // Top row of the original becomes the right column.
        assert_eq!(r.get(0, 1), p.get(0, 0));
        assert_eq!(r.get(2, 1), p.get(0, 2));
        let full = p
            .rotated_90cw()
            .rotated_90cw()
            .rotated_90cw()
            .rotated_90cw();
        assert_eq!(full, p);
    }

    #[test]
    fn generator_is_deterministic_and_labels_are_exact() {
        let cfg = GeneratorConfig {
            seed: 99,
            ..GeneratorConfig::default()
        };
        let a = generate(&cfg, 50).unwrap();
        let b = generate(&cfg, 50).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        assert_eq!(a.samples[7].id, "p0007");
        for s in &a.samples {
            // Label must be an exact small rational M / T.
            let t = (cfg.cells_min..=cfg.cells_max).find(|&t| {
                let m = s.label.value() * t as f64;
                m == m.round() && (m.round() as f64 / t as f64) == s.label.value()
            });
            assert!(t.is_some(), "label {} is not M/T", s.label.value());
        }
    }

    #[test]
    fn per_sample_seeding_makes_prefixes_agree() {
        let cfg = GeneratorConfig {
            seed: 5,
            ..GeneratorConfig::default()
        };
        let big = generate(&cfg, 20).unwrap();
        let small = generate(&cfg, 5).unwrap();
        assert_eq!(&big.samples[..5], &small.samples[..]);
    }

    #[test]
    fn forced_endpoint_labels() {
        let zero = GeneratorConfig {
            label_zero_prob: 1.0,
            label_one_prob: 0.0,
            seed: 3,
            ..GeneratorConfig::default()
        };
        for s in &generate(&zero, 30).unwrap().samples {
            assert_eq!(s.label.value(), 0.0);
        }
        let one = GeneratorConfig {
            label_zero_prob: 0.0,
            label_one_prob: 1.0,
            seed: 3,
            ..GeneratorConfig::default()
        };
        for s in &generate(&one, 30).unwrap().samples {
            assert_eq!(s.label.value(), 1.0);
        }
    }

    #[test]
    fn generator_config_validation() {
        let mut cfg = GeneratorConfig::default();
        cfg.benign_intensity = (0.4, 0.6); // overlaps malignant band
        assert!(cfg.validate().is_err());

        let mut cfg = GeneratorConfig::default();
        cfg.cells_min = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = GeneratorConfig::default();
        cfg.cell_radius = (9.0, 9.0); // diameter exceeds a 16-pixel patch
        assert!(cfg.validate().is_err());

        assert!(generate(&GeneratorConfig::default(), 0).is_err());
    }

    #[test]
    fn norm_stats_standardize_training_pixels() {
        let ds = generate(&GeneratorConfig::default(), 40).unwrap();
        let stats = compute_norm_stats(&ds).unwrap();
        let mut n = 0usize;
        let (mut sum, mut ss) = (0.0f64, 0.0f64);
        for s in &ds.samples {
            for v in apply_norm(&s.patch, &stats) {
                sum += v;
                ss += v * v;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        let std = (ss / n as f64 - mean * mean).sqrt();
        assert!(mean.abs() < 1e-9, "normalized mean {mean}");
        assert!((std - 1.0).abs() < 1e-6, "normalized std {std}");
    }

    #[test]
    fn norm_stats_reject_constant_data() {
        let patch = Patch::new(2, 2, vec![0.5; 4]).unwrap();
        let ds = Dataset::new(vec![Sample {
            id: "c".into(),
            patch,
            label: TcScore::new(0.5).unwrap(),
        }]);
        assert!(matches!(
            compute_norm_stats(&ds),
            Err(UltraError::DegenerateVariance { .. })
        ));
        assert!(compute_norm_stats(&Dataset::default()).is_err());
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ds = generate(&GeneratorConfig::default(), 1000).unwrap();
        let (tr, va, te) = split(&ds, (0.8, 0.1, 0.1), 42).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (800, 100, 100));
        let mut ids: Vec<&str> = tr
            .samples
            .iter()
            .chain(&va.samples)
            .chain(&te.samples)
            .map(|s| s.id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 1000);
        // Same seed, same split.
        let (tr2, _, _) = split(&ds, (0.8, 0.1, 0.1), 42).unwrap();
        assert_eq!(tr, tr2);
    }

    #[test]
    fn split_remainder_goes_to_train() {
        let ds = generate(&GeneratorConfig::default(), 7).unwrap();
        let (tr, va, te) = split(&ds, (0.5, 0.25, 0.25), 1).unwrap();
        // floor(0.25*7) = 1 twice, remainder 5 to train.
        assert_eq!((tr.len(), va.len(), te.len()), (5, 1, 1));
        let (all, none_v, none_t) = split(&ds, (1.0, 0.0, 0.0), 1).unwrap();
        assert_eq!((all.len(), none_v.len(), none_t.len()), (7, 0, 0));
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = generate(&GeneratorConfig::default(), 10).unwrap();
        assert!(split(&ds, (0.5, 0.4, 0.2), 0).is_err());
        assert!(split(&ds, (-0.1, 0.6, 0.5), 0).is_err());
    }

    #[test]
    fn ulds_round_trip_preserves_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.ulds");
        let ds = generate(&GeneratorConfig::default(), 25).unwrap();
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
        let path2 = dir.path().join("ds2.ulds");
        save_dataset(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn ulds_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.ulds");
        let ds = generate(&GeneratorConfig::default(), 3).unwrap();
        save_dataset(&ds, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        // Bad magic.
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(UltraError::Parse { offset: 0, .. })
        ));

        // Unsupported version.
        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(UltraError::VersionMismatch { .. })
        ));

        // Truncation.
        std::fs::write(&path, &good[..good.len() - 5]).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(matches!(err, UltraError::Parse { .. }), "{err}");

        // Trailing garbage.
        let mut bad = good.clone();
        bad.extend_from_slice(&[0, 1, 2]);
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_dataset(&path), Err(UltraError::Parse { .. })));
    }

    #[test]
    fn labels_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        let ds = generate(&GeneratorConfig::default(), 10).unwrap();
        write_labels_csv(&ds, &path).unwrap();
        let rows = read_labels_csv(&path).unwrap();
        assert_eq!(rows.len(), 10);
        for (row, s) in rows.iter().zip(&ds.samples) {
            assert_eq!(row.0, s.id);
            assert_eq!(row.1.value(), s.label.value());
        }
        // A hand-written line parses to the exact value.
        std::fs::write(&path, "id,tc\np0007,0.42\n").unwrap();
        let rows = read_labels_csv(&path).unwrap();
        assert_eq!(rows[0].0, "p0007");
        assert_eq!(rows[0].1.value(), 0.42);
        // Bad header is rejected.
        std::fs::write(&path, "ident,score\n").unwrap();
        assert!(read_labels_csv(&path).is_err());
    }

    #[test]
    fn labels_cover_the_unit_interval() {
        let cfg = GeneratorConfig {
            seed: 123,
            ..GeneratorConfig::default()
        };
        let ds = generate(&cfg, 10_000).unwrap();
        let mut bins = [0usize; 10];
        for s in &ds.samples {
            let b = ((s.label.value() * 10.0).floor() as usize).min(9);
            bins[b] += 1;
        }
        assert!(bins.iter().all(|&c| c > 0), "bins {bins:?}");
    }
}
