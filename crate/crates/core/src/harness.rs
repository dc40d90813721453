//! Synthetic data pipeline: corruption operators, procedural clean images,
//! image file IO, and manifest handling.
//!
//! The two corruption operators are desk-scale stand-ins: block corruption
//! overwrites rectangles with uniform noise until a target coverage band is
//! hit, and the rain operator draws additive oriented streaks with jittered
//! angles. Both report an exact per-pixel mask, and pixels outside the mask
//! are bit-identical to the clean image. The mask is never an input to the
//! model; it exists for masked-region metrics only.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{invalid, Result, Tensor};

/// Which corruption family a sample receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionKind {
    NoiseBlocks,
    RainStreaks,
}

/// Corruption parameters. Coverage bounds are fractions of the image area
/// and must satisfy 0 <= lo <= hi <= 0.9.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub coverage_lo: f64,
    pub coverage_hi: f64,
    /// Block side bounds (noise blocks) or streak length bounds (rain).
    pub extent_lo: usize,
    pub extent_hi: usize,
    /// Base streak angle in degrees, jittered by up to +/- 10; unused by
    /// noise blocks.
    pub rain_angle_deg: f64,
}

impl CorruptionSpec {
    pub fn noise_blocks(coverage_lo: f64, coverage_hi: f64, extent_lo: usize, extent_hi: usize) -> CorruptionSpec {
        CorruptionSpec {
            kind: CorruptionKind::NoiseBlocks,
            coverage_lo,
            coverage_hi,
            extent_lo,
            extent_hi,
            rain_angle_deg: 0.0,
        }
    }

    pub fn rain_streaks(coverage_lo: f64, coverage_hi: f64, length_lo: usize, length_hi: usize, angle_deg: f64) -> CorruptionSpec {
        CorruptionSpec {
            kind: CorruptionKind::RainStreaks,
            coverage_lo,
            coverage_hi,
            extent_lo: length_lo,
            extent_hi: length_hi,
            rain_angle_deg: angle_deg,
        }
    }

    pub fn check(&self, h: usize, w: usize) -> Result<()> {
        if !(0.0..=0.9).contains(&self.coverage_lo)
            || !(0.0..=0.9).contains(&self.coverage_hi)
            || self.coverage_lo > self.coverage_hi
        {
            return Err(invalid(
                "corrupt",
                format!(
                    "coverage band [{}, {}] must satisfy 0 <= lo <= hi <= 0.9",
                    self.coverage_lo, self.coverage_hi
                ),
            ));
        }
        if self.extent_lo == 0 || self.extent_lo > self.extent_hi {
            return Err(invalid(
                "corrupt",
                format!("extent bounds [{}, {}] invalid", self.extent_lo, self.extent_hi),
            ));
        }
        if self.kind == CorruptionKind::NoiseBlocks && self.extent_hi > h.min(w) {
            return Err(invalid(
                "corrupt",
                format!("block side {} exceeds image {h}x{w}", self.extent_hi),
            ));
        }
        Ok(())
    }
}

/// One training example: clean target, corrupted input, and the exact pixel
/// mask of where they differ (1.0 = corrupted).
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub clean: Tensor,
    pub corrupted: Tensor,
    /// Shape [1, 1, H, W].
    pub mask: Tensor,
}

const COVERAGE_RETRIES: usize = 1000;

fn mask_fraction(mask: &[f64]) -> f64 {
    mask.iter().sum::<f64>() / mask.len() as f64
}

fn apply_noise_blocks(
    clean: &Tensor,
    spec: &CorruptionSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = dims3(clean)?;
    for _ in 0..COVERAGE_RETRIES {
        let mut out = clean.clone();
        let mut mask = vec![0.0f64; h * w];
        // Place blocks until coverage reaches the lower bound, then accept
        // if still under the upper bound; otherwise redraw from scratch.
        while mask_fraction(&mask) < spec.coverage_lo {
            let side = rng.gen_range(spec.extent_lo..=spec.extent_hi);
            let y0 = rng.gen_range(0..=h - side);
            let x0 = rng.gen_range(0..=w - side);
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    mask[y * w + x] = 1.0;
                    for ch in 0..c {
                        out.set4(0, ch, y, x, rng.gen::<f64>());
                    }
                }
            }
            if spec.coverage_lo == 0.0 {
                break;
            }
        }
        if mask_fraction(&mask) <= spec.coverage_hi {
            return Ok((out, Tensor::from_vec(&[1, 1, h, w], mask)?));
        }
    }
    Err(invalid(
        "corrupt",
        format!(
            "could not hit coverage [{}, {}] with blocks of side {}..={}",
            spec.coverage_lo, spec.coverage_hi, spec.extent_lo, spec.extent_hi
        ),
    ))
}

fn apply_rain_streaks(
    clean: &Tensor,
    spec: &CorruptionSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = dims3(clean)?;
    for _ in 0..COVERAGE_RETRIES {
        let mut out = clean.clone();
        let mut mask = vec![0.0f64; h * w];
        while mask_fraction(&mask) < spec.coverage_lo {
            let len = rng.gen_range(spec.extent_lo..=spec.extent_hi);
            let jitter: f64 = rng.gen_range(-10.0..=10.0);
            let theta = (spec.rain_angle_deg + jitter).to_radians();
            let (dy, dx) = (theta.sin(), theta.cos());
            let y0 = rng.gen_range(0..h) as f64;
            let x0 = rng.gen_range(0..w) as f64;
            let intensity = rng.gen_range(0.2..=0.8);
            for t in 0..len {
                let y = (y0 + dy * t as f64).round() as isize;
                let x = (x0 + dx * t as f64).round() as isize;
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let (y, x) = (y as usize, x as usize);
                let mut touched = false;
                for ch in 0..c {
                    let before = out.at4(0, ch, y, x);
                    let after = (before + intensity).min(1.0);
                    if after != before {
                        out.set4(0, ch, y, x, after);
                        touched = true;
                    }
                }
                if touched {
                    mask[y * w + x] = 1.0;
                }
            }
            if spec.coverage_lo == 0.0 {
                break;
            }
        }
        if mask_fraction(&mask) <= spec.coverage_hi {
            return Ok((out, Tensor::from_vec(&[1, 1, h, w], mask)?));
        }
    }
    Err(invalid(
        "corrupt",
        format!(
            "could not hit coverage [{}, {}] with streaks of length {}..={}",
            spec.coverage_lo, spec.coverage_hi, spec.extent_lo, spec.extent_hi
        ),
    ))
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = t.dims4("corrupt")?;
    if b != 1 {
        return Err(invalid("corrupt", format!("expected batch 1, got {b}")));
    }
    Ok((c, h, w))
}

/// Applies the corruption and returns the pair. Deterministic in the RNG
/// state; `corrupted == clean` bit-for-bit wherever `mask == 0`.
pub fn corrupt(clean: &Tensor, spec: &CorruptionSpec, rng: &mut ChaCha8Rng) -> Result<SamplePair> {
    let (_, h, w) = dims3(clean)?;
    spec.check(h, w)?;
    let (corrupted, mask) = match spec.kind {
        CorruptionKind::NoiseBlocks => apply_noise_blocks(clean, spec, rng)?,
        CorruptionKind::RainStreaks => apply_rain_streaks(clean, spec, rng)?,
    };
    Ok(SamplePair { clean: clean.clone(), corrupted, mask })
}

/// Procedural clean-image families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusKind {
    /// Smooth linear color ramps with random orientation.
    Gradients,
    /// Axis-aligned checkerboards with random cell size and phase.
    Checkerboards,
    /// Uniform noise smoothed by a separable box filter.
    FilteredNoise,
    /// Round-robin over the three families.
    Mixed,
}

impl CorpusKind {
    pub fn parse(s: &str) -> Result<CorpusKind> {
        match s {
            "gradients" => Ok(CorpusKind::Gradients),
            "checkerboards" => Ok(CorpusKind::Checkerboards),
            "filtered_noise" => Ok(CorpusKind::FilteredNoise),
            "mixed" => Ok(CorpusKind::Mixed),
            other => Err(invalid("corpus", format!("unknown corpus kind {other:?}"))),
        }
    }
}

fn gradient_image(size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (theta.sin(), theta.cos());
    let mut lo = [0.0f64; 3];
    let mut hi = [0.0f64; 3];
    for ch in 0..3 {
        let a: f64 = rng.gen();
        let b: f64 = rng.gen();
        lo[ch] = a.min(b);
        hi[ch] = a.max(b);
    }
    let mut t = Tensor::zeros(&[1, 3, size, size]);
    let half = (size - 1) as f64 / 2.0;
    let scale = 1.0 / (2.0 * half.max(1.0) * std::f64::consts::SQRT_2);
    for y in 0..size {
        for x in 0..size {
            let proj = (y as f64 - half) * dy + (x as f64 - half) * dx;
            let u = 0.5 + proj * scale;
            for ch in 0..3 {
                t.set4(0, ch, y, x, lo[ch] + (hi[ch] - lo[ch]) * u);
            }
        }
    }
    t
}

fn checkerboard_image(size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let cell = rng.gen_range(4..=(size / 4).max(4));
    let (py, px) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
    let a: [f64; 3] = [rng.gen_range(0.0..0.35), rng.gen_range(0.0..0.35), rng.gen_range(0.0..0.35)];
    let b: [f64; 3] = [rng.gen_range(0.65..1.0), rng.gen_range(0.65..1.0), rng.gen_range(0.65..1.0)];
    let mut t = Tensor::zeros(&[1, 3, size, size]);
    for y in 0..size {
        for x in 0..size {
            let parity = (((y + py) / cell) + ((x + px) / cell)) % 2;
            let color = if parity == 0 { &a } else { &b };
            for ch in 0..3 {
                t.set4(0, ch, y, x, color[ch]);
            }
        }
    }
    t
}

fn filtered_noise_image(size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let radius = 1usize;
    let mut t = Tensor::zeros(&[1, 3, size, size]);
    for ch in 0..3 {
        let raw: Vec<f64> = (0..size * size).map(|_| rng.gen()).collect();
        // Separable box blur with clamped borders keeps values inside [0, 1].
        let mut rows = vec![0.0f64; size * size];
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                let mut n = 0.0;
                for d in -(radius as isize)..=(radius as isize) {
                    let xi = x as isize + d;
                    if (0..size as isize).contains(&xi) {
                        acc += raw[y * size + xi as usize];
                        n += 1.0;
                    }
                }
                rows[y * size + x] = acc / n;
            }
        }
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                let mut n = 0.0;
                for d in -(radius as isize)..=(radius as isize) {
                    let yi = y as isize + d;
                    if (0..size as isize).contains(&yi) {
                        acc += rows[yi as usize * size + x];
                        n += 1.0;
                    }
                }
                t.set4(0, ch, y, x, acc / n);
            }
        }
    }
    t
}

/// Generates `n` clean images of side `size`, deterministic in `seed`.
pub fn synth_corpus(n: usize, size: usize, kind: CorpusKind, seed: u64) -> Result<Vec<Tensor>> {
    if size < 16 {
        return Err(invalid("corpus", format!("side {size} below the 16px model minimum")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| match kind {
            CorpusKind::Gradients => gradient_image(size, &mut rng),
            CorpusKind::Checkerboards => checkerboard_image(size, &mut rng),
            CorpusKind::FilteredNoise => filtered_noise_image(size, &mut rng),
            CorpusKind::Mixed => match i % 3 {
                0 => gradient_image(size, &mut rng),
                1 => checkerboard_image(size, &mut rng),
                _ => filtered_noise_image(size, &mut rng),
            },
        })
        .collect())
}

/// Derives an independent per-iteration RNG so that resuming at iteration k
/// replays the identical corruption draws.
pub fn stream_rng(seed: u64, iter: u64) -> ChaCha8Rng {
    // SplitMix64 finalizer over the combined key decorrelates consecutive
    // iteration seeds.
    let mut z = seed ^ iter.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

fn quantize(v: f64) -> u8 {
    let clamped = v.clamp(0.0, 1.0);
    // Round half away from zero so 0.5/255 maps up, matching the reader's
    // v/255 inverse within half a quantization step.
    (clamped * 255.0 + 0.5).floor().min(255.0) as u8
}

fn to_bytes(t: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (c, h, w) = dims3(t)?;
    if c != 3 {
        return Err(invalid("image", format!("expected 3 channels, got {c}")));
    }
    let mut bytes = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                bytes.push(quantize(t.at4(0, ch, y, x)));
            }
        }
    }
    Ok((h, w, bytes))
}

fn from_bytes(h: usize, w: usize, bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() != h * w * 3 {
        return Err(invalid(
            "image",
            format!("{} bytes for {h}x{w}x3 image", bytes.len()),
        ));
    }
    let mut t = Tensor::zeros(&[1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                t.set4(0, ch, y, x, bytes[(y * w + x) * 3 + ch] as f64 / 255.0);
            }
        }
    }
    Ok(t)
}

/// Writes a [1, 3, H, W] unit-range tensor as 8-bit RGB. The format follows
/// the extension: `.png` or `.ppm` (binary P6).
pub fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w, bytes) = to_bytes(t)?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "png" => {
            let img = image::RgbImage::from_raw(w as u32, h as u32, bytes)
                .ok_or_else(|| invalid("image", "buffer size mismatch".into()))?;
            img.save_with_format(path, image::ImageFormat::Png)
                .map_err(|e| invalid("image", format!("writing {}: {e}", path.display())))
        }
        "ppm" => {
            let file = fs::File::create(path)
                .map_err(|e| invalid("image", format!("creating {}: {e}", path.display())))?;
            let mut out = BufWriter::new(file);
            write!(out, "P6\n{w} {h}\n255\n")
                .and_then(|_| out.write_all(&bytes))
                .map_err(|e| invalid("image", format!("writing {}: {e}", path.display())))
        }
        other => Err(invalid("image", format!("unsupported image extension {other:?}"))),
    }
}

/// Reads an 8-bit RGB image back into a [1, 3, H, W] tensor with values
/// v / 255.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "png" => {
            let img = image::open(path)
                .map_err(|e| invalid("image", format!("reading {}: {e}", path.display())))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            from_bytes(h, w, img.as_raw())
        }
        "ppm" => {
            let file = fs::File::open(path)
                .map_err(|e| invalid("image", format!("reading {}: {e}", path.display())))?;
            let mut bytes = Vec::new();
            BufReader::new(file)
                .read_to_end(&mut bytes)
                .map_err(|e| invalid("image", format!("reading {}: {e}", path.display())))?;
            let (w, h, pixels) = parse_ppm(&bytes)?;
            from_bytes(h, w, &pixels)
        }
        other => Err(invalid("image", format!("unsupported image extension {other:?}"))),
    }
}

fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let err = |m: &str| invalid("image", format!("ppm: {m}"));
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(bytes)? != "P6" {
        return Err(err("not a P6 file"));
    }
    let w: usize = token(bytes)?.parse().map_err(|_| err("bad width"))?;
    let h: usize = token(bytes)?.parse().map_err(|_| err("bad height"))?;
    let maxval: usize = token(bytes)?.parse().map_err(|_| err("bad maxval"))?;
    if maxval != 255 {
        return Err(err("only maxval 255 supported"));
    }
    pos += 1; // the single whitespace byte after maxval
    if bytes.len() < pos + w * h * 3 {
        return Err(err("truncated pixel data"));
    }
    Ok((w, h, bytes[pos..pos + w * h * 3].to_vec()))
}

/// One manifest row: a clean/corrupted file pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub clean: String,
    pub corrupted: String,
}

/// Reads a line-oriented manifest: `clean_path<TAB>corrupted_path`, with
/// `#` comments and blank lines skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path)
        .map_err(|e| invalid("manifest", format!("opening {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| invalid("manifest", format!("line {}: {e}", i + 1)))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (clean, corrupted) = line.split_once('\t').ok_or_else(|| {
            invalid(
                "manifest",
                format!("line {}: expected clean<TAB>corrupted, got {line:?}", i + 1),
            )
        })?;
        out.push(ManifestEntry { clean: clean.to_string(), corrupted: corrupted.to_string() });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let body: String = entries
        .iter()
        .map(|e| format!("{}\t{}\n", e.clean, e.corrupted))
        .collect();
    fs::write(path, body)
        .map_err(|e| invalid("manifest", format!("writing {}: {e}", path.display())))
}

/// The sample indices visited at a given epoch: a seeded shuffle that is a
/// pure function of (seed, epoch), so any iteration can be replayed.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = stream_rng(seed.rotate_left(17) ^ 0x5b5a_d312, epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates driven by the derived stream.
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    idx
}
