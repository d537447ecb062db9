//! Synthetic multi-class phantoms, the default random augmentation pipeline
//! and on-disk dataset I/O.
//!
//! Phantoms mimic a nested disk-ring topology plus a lateral blob so the
//! contour loss and class weighting meet the same structure a cardiac
//! short-axis slice would present: background (0), inner disk (1), ring
//! around it (2), lateral blob (3).

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transforms::{AffineParams, MorphParams, TransformParams};

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape("label map size mismatch"));
        }
        Ok(LabelMap { h, w, data })
    }

    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..256)
            .filter(|&i| seen[i])
            .map(|i| i as u8)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<S> {
    pub image: Tensor<S>,
    pub label: LabelMap,
    pub subject_id: u32,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    /// Number of classes including background (2..=4).
    pub classes: usize,
    /// Image height and width.
    pub size: usize,
    /// Gaussian pixel-noise level.
    pub noise_level: f64,
    /// Center jitter as a fraction of the image size.
    pub center_jitter: f64,
    /// Relative radius jitter.
    pub radius_jitter: f64,
    /// Per-structure intensity jitter.
    pub intensity_jitter: f64,
    /// Blob placement angle jitter (radians).
    pub angle_jitter: f64,
    /// Base disk radius as a fraction of the image size.
    pub disk_radius: f64,
    /// Ring thickness as a fraction of the image size.
    pub ring_thickness: f64,
    /// Strength of the per-subject smooth multiplicative intensity
    /// corruption (max deviation of the field from 1).
    pub bias_field_strength: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            classes: 4,
            size: 64,
            noise_level: 0.02,
            center_jitter: 0.045,
            radius_jitter: 0.15,
            intensity_jitter: 0.08,
            angle_jitter: 0.5,
            disk_radius: 0.13,
            ring_thickness: 0.065,
            bias_field_strength: 0.15,
        }
    }
}

/// Blob placement constants shared by generation and validation
/// (fractions of the image size).
const BLOB_OFFSET: f64 = 0.085;
const BLOB_SEMI_A: f64 = 0.085;
const BLOB_SEMI_B: f64 = 0.055;

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.classes) {
            return Err(Error::invalid("phantom classes must be 2..=4"));
        }
        if self.size < 16 {
            return Err(Error::invalid("phantom size must be at least 16"));
        }
        // worst-case extent: center shift + ring + blob reach must stay inside
        let r2_max = (self.disk_radius + self.ring_thickness) * (1.0 + self.radius_jitter);
        let reach = if self.classes >= 4 {
            self.center_jitter + r2_max + BLOB_OFFSET + BLOB_SEMI_A * (1.0 + self.radius_jitter)
        } else {
            self.center_jitter + r2_max
        };
        if reach >= 0.49 {
            return Err(Error::invalid(format!(
                "phantom structures exceed the field of view (reach {:.2} of half-size)",
                reach * 2.0
            )));
        }
        Ok(())
    }
}

/// Deterministic multi-class phantom dataset.
pub fn generate_phantoms<S: Scalar>(
    spec: &PhantomSpec,
    n_subjects: usize,
    seed: u64,
) -> Result<Vec<Sample<S>>> {
    spec.validate()?;
    if n_subjects == 0 {
        return Err(Error::invalid("need at least one subject"));
    }
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.size;
    let mut out = Vec::with_capacity(n_subjects);
    for subject in 0..n_subjects {
        let jit = |r: &mut ChaCha8Rng, mag: f64| 1.0 + r.gen_range(-mag..mag);
        let cx = n as f64 / 2.0 + n as f64 * rng.gen_range(-spec.center_jitter..spec.center_jitter);
        let cy = n as f64 / 2.0 + n as f64 * rng.gen_range(-spec.center_jitter..spec.center_jitter);
        let r1 = n as f64 * spec.disk_radius * jit(&mut rng, spec.radius_jitter);
        let r2 = r1 + n as f64 * spec.ring_thickness * jit(&mut rng, spec.radius_jitter);
        let blob_angle = std::f64::consts::PI + rng.gen_range(-spec.angle_jitter..spec.angle_jitter);
        let blob_d = r2 + n as f64 * BLOB_OFFSET;
        let bx = cx + blob_d * blob_angle.cos();
        let by = cy + blob_d * blob_angle.sin() * 0.6;
        let ba = n as f64 * BLOB_SEMI_A * jit(&mut rng, spec.radius_jitter);
        let bb = n as f64 * BLOB_SEMI_B * jit(&mut rng, spec.radius_jitter);
        let tilt = blob_angle + std::f64::consts::FRAC_PI_2;

        // per-subject intensities
        let ij = spec.intensity_jitter;
        let i_bg = 0.15 * jit(&mut rng, ij);
        let i_disk = 0.78 * jit(&mut rng, ij);
        let i_ring = 0.45 * jit(&mut rng, ij);
        let i_blob = 0.85 * jit(&mut rng, ij);
        // smooth illumination gradient
        let gx = rng.gen_range(-0.06..0.06);
        let gy = rng.gen_range(-0.06..0.06);
        // smooth multiplicative corruption field (intensity inhomogeneity)
        let bias_field = if spec.bias_field_strength > 0.0 {
            let lo = (1.0 - spec.bias_field_strength).ln();
            let hi = (1.0 + spec.bias_field_strength).ln();
            let ctrl = Tensor::from_fn(&[1, 4, 4], |_| rng.gen_range(lo..hi));
            Some(kernels::bspline_forward(&ctrl, n, n).map(|v| v.exp()))
        } else {
            None
        };

        let mut labels = vec![0u8; n * n];
        let mut clean = vec![0.0f64; n * n];
        for y in 0..n {
            for x in 0..n {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let d = (dx * dx + dy * dy).sqrt();
                // blob in rotated ellipse coordinates
                let ex = (x as f64 - bx) * tilt.cos() + (y as f64 - by) * tilt.sin();
                let ey = -(x as f64 - bx) * tilt.sin() + (y as f64 - by) * tilt.cos();
                let in_blob = (ex / ba).powi(2) + (ey / bb).powi(2) <= 1.0;
                let (label, intensity) = if d <= r1 {
                    (1u8, i_disk)
                } else if d <= r2 && spec.classes >= 3 {
                    (2, i_ring)
                } else if in_blob && spec.classes >= 4 {
                    (3, i_blob)
                } else {
                    (0, i_bg)
                };
                let idx = y * n + x;
                labels[idx] = label.min(spec.classes as u8 - 1);
                clean[idx] =
                    intensity + gx * (x as f64 / n as f64 - 0.5) + gy * (y as f64 / n as f64 - 0.5);
            }
        }
        // soften edges, apply the corruption field, add pixel noise, clamp
        let clean_t = Tensor::new(vec![1, n, n], clean)?;
        let soft = kernels::gaussian_forward(&clean_t, 0.8);
        let image = Tensor::from_fn(&[1, n, n], |i| {
            let mut v = soft.data()[i];
            if let Some(b) = &bias_field {
                v *= b.data()[i];
            }
            v += rng.sample::<f64, _>(StandardNormal) * spec.noise_level;
            S::c(v.clamp(0.0, 1.0))
        });
        out.push(Sample {
            image,
            label: LabelMap::new(n, n, labels)?,
            subject_id: subject as u32,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Default random augmentation pipeline
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Translation range in normalized coordinates.
    pub max_translate: f64,
    /// Rotation range as a fraction of π.
    pub max_rotate: f64,
    /// Scale deviation range.
    pub max_scale: f64,
    pub flip_horizontal_prob: f64,
    pub flip_vertical_prob: f64,
    /// Additive brightness range.
    pub max_brightness: f64,
    /// Contrast multiplier deviation range.
    pub max_contrast: f64,
    /// Magnitude of the elastic-like jitter (a random small deformation
    /// reusing the morph model); 0 disables it.
    pub elastic_magnitude: f64,
    pub elastic_downsample: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_translate: 0.06,
            max_rotate: 10.0 / 180.0,
            max_scale: 0.12,
            flip_horizontal_prob: 0.5,
            flip_vertical_prob: 0.0,
            max_brightness: 0.1,
            max_contrast: 0.2,
            elastic_magnitude: 0.75,
            elastic_downsample: 8,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            max_translate: 0.0,
            max_rotate: 0.0,
            max_scale: 0.0,
            flip_horizontal_prob: 0.0,
            flip_vertical_prob: 0.0,
            max_brightness: 0.0,
            max_contrast: 0.0,
            elastic_magnitude: 0.0,
            elastic_downsample: 8,
        }
    }
}

fn nearest_sample_labels(label: &LabelMap, grid: &Tensor<f64>) -> LabelMap {
    let (h, w) = (label.h, label.w);
    let gd = grid.data();
    let half_w = (w.max(1) - 1) as f64 / 2.0;
    let half_h = (h.max(1) - 1) as f64 / 2.0;
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let u = gd[y * w + x];
            let v = gd[h * w + y * w + x];
            let fx = (u + 1.0) * half_w;
            let fy = (v + 1.0) * half_h;
            let xi = fx.round() as isize;
            let yi = fy.round() as isize;
            if xi >= 0 && xi < w as isize && yi >= 0 && yi < h as isize {
                out[y * w + x] = label.data[yi as usize * w + xi as usize];
            } // outside the field of view stays background
        }
    }
    LabelMap { h, w, data: out }
}

/// Random affine + flips + global intensity + elastic-like jitter, label
/// warped with nearest neighbor, output clamped to [0, 1].
pub fn default_random_augment<S: Scalar>(
    sample: &Sample<S>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Sample<S>> {
    let (_, h, w) = sample.image.chw()?;
    // work in f64 for the warp geometry regardless of the storage scalar
    let mut image: Tensor<f64> = sample.image.cast();
    let mut label = sample.label.clone();

    // 1. random affine
    if cfg.max_translate > 0.0 || cfg.max_rotate > 0.0 || cfg.max_scale > 0.0 {
        let u = |r: &mut ChaCha8Rng, m: f64| if m > 0.0 { r.gen_range(-m..m) } else { 0.0 };
        let params = Tensor::new(
            vec![5],
            vec![
                u(rng, cfg.max_translate),
                u(rng, cfg.max_translate),
                u(rng, cfg.max_rotate),
                u(rng, cfg.max_scale),
                u(rng, cfg.max_scale),
            ],
        )?;
        let affine = AffineParams {
            params,
            translate_bound: 1.0,
            rotate_bound: 1.0,
            scale_bound: 0.9,
        };
        let grid = kernels::affine_grid_forward(
            &kernels::affine_mat_forward(affine.params.data(), false),
            h,
            w,
        );
        image = kernels::bilinear_forward(&image, &grid);
        label = nearest_sample_labels(&label, &grid);
    }

    // 2. flips
    if rng.gen_range(0.0..1.0) < cfg.flip_horizontal_prob {
        image = Tensor::from_fn(&[1, h, w], |i| {
            let (y, x) = (i / w, i % w);
            image.data()[y * w + (w - 1 - x)]
        });
        let old = label.clone();
        for y in 0..h {
            for x in 0..w {
                label.data[y * w + x] = old.data[y * w + (w - 1 - x)];
            }
        }
    }
    if rng.gen_range(0.0..1.0) < cfg.flip_vertical_prob {
        image = Tensor::from_fn(&[1, h, w], |i| {
            let (y, x) = (i / w, i % w);
            image.data()[(h - 1 - y) * w + x]
        });
        let old = label.clone();
        for y in 0..h {
            for x in 0..w {
                label.data[y * w + x] = old.data[(h - 1 - y) * w + x];
            }
        }
    }

    // 3. global brightness / contrast
    if cfg.max_brightness > 0.0 || cfg.max_contrast > 0.0 {
        let b = if cfg.max_brightness > 0.0 {
            rng.gen_range(-cfg.max_brightness..cfg.max_brightness)
        } else {
            0.0
        };
        let c = if cfg.max_contrast > 0.0 {
            1.0 + rng.gen_range(-cfg.max_contrast..cfg.max_contrast)
        } else {
            1.0
        };
        image = image.map(|v| (v - 0.5) * c + 0.5 + b);
    }

    // 4. elastic-like jitter via the morph model at random parameters
    if cfg.elastic_magnitude > 0.0 {
        let ds = cfg.elastic_downsample.max(1);
        let (hl, wl) = ((h / ds).max(1), (w / ds).max(1));
        let mut v = Tensor::from_fn(&[2, hl, wl], |_| rng.sample::<f64, _>(StandardNormal));
        let norm = v.l2_norm();
        if norm > 1e-12 {
            v = v.scale(cfg.elastic_magnitude / norm);
        }
        let morph = TransformParams::Morph(MorphParams {
            v_low: v,
            epsilon: cfg.elastic_magnitude,
            downsample: ds,
            sigma: 1.0,
            squaring_steps: 8,
        });
        let phi = morph.integrate_eager(false)?;
        let mut g = Graph::<f64>::new();
        let id = g.constant(kernels::identity_grid(h, w));
        let ph = g.constant(phi);
        let grid_v = g.add(id, ph)?;
        let grid = g.value(grid_v).clone();
        image = kernels::bilinear_forward(&image, &grid);
        label = nearest_sample_labels(&label, &grid);
    }

    // 5. clamp intensities back into [0, 1]
    let image = Tensor::from_fn(&[1, h, w], |i| S::c(image.data()[i].clamp(0.0, 1.0)));
    Ok(Sample {
        image,
        label,
        subject_id: sample.subject_id,
    })
}

// ---------------------------------------------------------------------------
// Dataset I/O
// ---------------------------------------------------------------------------

#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Unlabeled,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    pub samples: Vec<Sample<S>>,
    pub splits: Vec<Split>,
}

const DATA_MAGIC: &str = "ADVCHAIN1";

#[derive(serde::Serialize, serde::Deserialize)]
struct ManifestEntry {
    file: String,
    subject: u32,
    split: Split,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct DataManifest {
    version: u32,
    entries: Vec<ManifestEntry>,
}

fn write_section(out: &mut Vec<u8>, kind: &str, h: usize, w: usize, subject: Option<u32>, dtype: &str) {
    out.extend_from_slice(DATA_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(format!("kind {}\n", kind).as_bytes());
    out.extend_from_slice(format!("shape {} {}\n", h, w).as_bytes());
    out.extend_from_slice(format!("dtype {}\n", dtype).as_bytes());
    out.extend_from_slice(b"endian little\n");
    if let Some(s) = subject {
        out.extend_from_slice(format!("subject {}\n", s).as_bytes());
    }
    out.push(b'\n');
}

struct SectionHeader {
    kind: String,
    h: usize,
    w: usize,
    dtype: String,
    big_endian: bool,
    subject: Option<u32>,
}

fn read_section_header(buf: &[u8], pos: &mut usize) -> Result<SectionHeader> {
    let read_line = |pos: &mut usize| -> Result<String> {
        let start = *pos;
        while *pos < buf.len() && buf[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= buf.len() {
            return Err(Error::CorruptData("truncated header".into()));
        }
        let line = String::from_utf8(buf[start..*pos].to_vec())
            .map_err(|_| Error::CorruptData("non-text header".into()))?;
        *pos += 1;
        Ok(line)
    };
    let magic = read_line(pos)?;
    if magic != DATA_MAGIC {
        if magic.starts_with("ADVCHAIN") {
            return Err(Error::CorruptData(format!(
                "unsupported format version {:?}",
                magic
            )));
        }
        return Err(Error::CorruptData(format!("bad magic {:?}", magic)));
    }
    let mut hdr = SectionHeader {
        kind: String::new(),
        h: 0,
        w: 0,
        dtype: String::new(),
        big_endian: false,
        subject: None,
    };
    loop {
        let line = read_line(pos)?;
        if line.is_empty() {
            break;
        }
        let mut it = line.splitn(2, ' ');
        let key = it.next().unwrap_or("");
        let val = it.next().unwrap_or("");
        match key {
            "kind" => hdr.kind = val.to_string(),
            "shape" => {
                let dims: Vec<usize> = val
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| Error::CorruptData("bad shape".into())))
                    .collect::<Result<_>>()?;
                if dims.len() != 2 {
                    return Err(Error::CorruptData("shape must be 2D".into()));
                }
                hdr.h = dims[0];
                hdr.w = dims[1];
            }
            "dtype" => hdr.dtype = val.to_string(),
            "endian" => hdr.big_endian = val == "big",
            "subject" => {
                hdr.subject = Some(
                    val.parse()
                        .map_err(|_| Error::CorruptData("bad subject id".into()))?,
                )
            }
            _ => {} // unknown keys ignored for forward compatibility
        }
    }
    if hdr.kind.is_empty() || hdr.h == 0 || hdr.w == 0 || hdr.dtype.is_empty() {
        return Err(Error::CorruptData("incomplete section header".into()));
    }
    Ok(hdr)
}

/// Serialize one sample: image floats and label bytes, each preceded by a
/// structured text header.
pub fn encode_sample<S: Scalar>(sample: &Sample<S>) -> Result<Vec<u8>> {
    let (_, h, w) = sample.image.chw()?;
    let mut out = Vec::new();
    write_section(&mut out, "image", h, w, Some(sample.subject_id), "f32");
    for v in sample.image.data() {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    write_section(&mut out, "label", h, w, None, "u8");
    out.extend_from_slice(&sample.label.data);
    Ok(out)
}

/// Parse one sample written by [`encode_sample`]; honors the declared
/// endianness.
pub fn decode_sample<S: Scalar>(buf: &[u8]) -> Result<Sample<S>> {
    let mut pos = 0usize;
    let img_hdr = read_section_header(buf, &mut pos)?;
    if img_hdr.kind != "image" || img_hdr.dtype != "f32" {
        return Err(Error::CorruptData("expected f32 image section".into()));
    }
    let n = img_hdr.h * img_hdr.w;
    if pos + 4 * n > buf.len() {
        return Err(Error::CorruptData("image payload truncated".into()));
    }
    let image = Tensor::from_fn(&[1, img_hdr.h, img_hdr.w], |i| {
        let b = &buf[pos + 4 * i..pos + 4 * i + 4];
        let arr = [b[0], b[1], b[2], b[3]];
        let v = if img_hdr.big_endian {
            f32::from_be_bytes(arr)
        } else {
            f32::from_le_bytes(arr)
        };
        S::c(v as f64)
    });
    pos += 4 * n;
    let lbl_hdr = read_section_header(buf, &mut pos)?;
    if lbl_hdr.kind != "label" || lbl_hdr.dtype != "u8" {
        return Err(Error::CorruptData("expected u8 label section".into()));
    }
    if (lbl_hdr.h, lbl_hdr.w) != (img_hdr.h, img_hdr.w) {
        return Err(Error::CorruptData("label shape differs from image".into()));
    }
    if pos + n > buf.len() {
        return Err(Error::CorruptData("label payload truncated".into()));
    }
    let label = LabelMap::new(lbl_hdr.h, lbl_hdr.w, buf[pos..pos + n].to_vec())?;
    Ok(Sample {
        image,
        label,
        subject_id: img_hdr.subject.unwrap_or(0),
    })
}

/// Write one file per sample plus a manifest with ids and split assignment.
pub fn save_dataset<S: Scalar>(dir: &Path, dataset: &Dataset<S>) -> Result<()> {
    if dataset.samples.len() != dataset.splits.len() {
        return Err(Error::invalid("split list does not match samples"));
    }
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (i, (sample, split)) in dataset.samples.iter().zip(&dataset.splits).enumerate() {
        let file = format!("s{:04}.dat", i);
        let bytes = encode_sample(sample)?;
        let mut f = std::fs::File::create(dir.join(&file))?;
        f.write_all(&bytes)?;
        entries.push(ManifestEntry {
            file,
            subject: sample.subject_id,
            split: *split,
        });
    }
    let manifest = DataManifest {
        version: 1,
        entries,
    };
    let mut f = std::fs::File::create(dir.join("manifest.json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest).unwrap().as_bytes())?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset<S: Scalar>(dir: &Path) -> Result<Dataset<S>> {
    let manifest_path = dir.join("manifest.json");
    let mut text = String::new();
    std::fs::File::open(&manifest_path)?.read_to_string(&mut text)?;
    let manifest: DataManifest =
        serde_json::from_str(&text).map_err(|e| Error::CorruptData(format!("manifest: {}", e)))?;
    if manifest.version != 1 {
        return Err(Error::CorruptData(format!(
            "unsupported dataset version {}",
            manifest.version
        )));
    }
    let mut samples = Vec::new();
    let mut splits = Vec::new();
    for e in &manifest.entries {
        let mut buf = Vec::new();
        std::fs::File::open(dir.join(&e.file))?.read_to_end(&mut buf)?;
        let mut s = decode_sample::<S>(&buf)?;
        s.subject_id = e.subject;
        samples.push(s);
        splits.push(e.split);
    }
    Ok(Dataset { samples, splits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let spec = PhantomSpec::default();
        let a = generate_phantoms::<f32>(&spec, 5, 42).unwrap();
        let b = generate_phantoms::<f32>(&spec, 5, 42).unwrap();
        assert_eq!(a, b);
        for s in &a {
            for v in s.image.data() {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn every_sample_contains_all_classes_with_background_majority() {
        let spec = PhantomSpec::default();
        let samples = generate_phantoms::<f32>(&spec, 50, 7).unwrap();
        for s in &samples {
            let mut hist = [0usize; 4];
            for &l in &s.label.data {
                hist[l as usize] += 1;
            }
            assert!(hist[0] > s.label.data.len() / 2, "background not majority");
            for (c, count) in hist.iter().enumerate() {
                assert!(*count > 0, "class {} missing from subject {}", c, s.subject_id);
            }
        }
    }

    #[test]
    fn oversized_structures_are_rejected() {
        let spec = PhantomSpec {
            disk_radius: 0.4,
            ring_thickness: 0.2,
            ..PhantomSpec::default()
        };
        assert!(generate_phantoms::<f32>(&spec, 1, 0).is_err());
        assert!(generate_phantoms::<f32>(&PhantomSpec::default(), 0, 0).is_err());
    }

    #[test]
    fn zero_magnitude_augment_is_identity() {
        let spec = PhantomSpec::default();
        let samples = generate_phantoms::<f32>(&spec, 1, 3).unwrap();
        let out = default_random_augment(&samples[0], &AugmentConfig::identity(), &mut rng(1))
            .unwrap();
        assert_eq!(out, samples[0]);
    }

    #[test]
    fn augment_stays_in_intensity_range_and_is_finite() {
        let spec = PhantomSpec::default();
        let samples = generate_phantoms::<f32>(&spec, 4, 5).unwrap();
        let cfg = AugmentConfig::default();
        let mut r = rng(2);
        for _ in 0..50 {
            for s in &samples {
                let out = default_random_augment(s, &cfg, &mut r).unwrap();
                assert!(out.image.all_finite());
                for v in out.image.data() {
                    assert!((0.0..=1.0).contains(v));
                }
            }
        }
    }

    #[test]
    fn label_classes_survive_flips_and_small_affine() {
        let spec = PhantomSpec::default();
        let samples = generate_phantoms::<f32>(&spec, 2, 11).unwrap();
        let cfg = AugmentConfig {
            elastic_magnitude: 0.0,
            max_translate: 0.03,
            max_rotate: 5.0 / 180.0,
            max_scale: 0.05,
            flip_horizontal_prob: 0.5,
            flip_vertical_prob: 0.5,
            ..AugmentConfig::default()
        };
        let mut r = rng(3);
        for _ in 0..200 {
            for s in &samples {
                let out = default_random_augment(s, &cfg, &mut r).unwrap();
                assert_eq!(
                    out.label.classes_present(),
                    s.label.classes_present(),
                    "class set changed under mild augmentation"
                );
            }
        }
    }

    #[test]
    fn augment_keeps_most_foreground_in_view() {
        let spec = PhantomSpec::default();
        let samples = generate_phantoms::<f32>(&spec, 8, 13).unwrap();
        let cfg = AugmentConfig::default();
        let mut r = rng(4);
        for s in &samples {
            let before = s.label.data.iter().filter(|&&l| l > 0).count();
            for _ in 0..20 {
                let out = default_random_augment(s, &cfg, &mut r).unwrap();
                let after = out.label.data.iter().filter(|&&l| l > 0).count();
                assert!(
                    after * 2 >= before,
                    "more than half the foreground left the field of view"
                );
            }
        }
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("advchain_data_test");
        std::fs::remove_dir_all(&dir).ok();
        let spec = PhantomSpec::default();
        let samples = generate_phantoms::<f32>(&spec, 3, 17).unwrap();
        let splits = vec![Split::Train, Split::Unlabeled, Split::Test];
        let ds = Dataset {
            samples,
            splits,
        };
        save_dataset(&dir, &ds).unwrap();
        let back = load_dataset::<f32>(&dir).unwrap();
        assert_eq!(ds, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_and_truncated_files_are_rejected() {
        let spec = PhantomSpec::default();
        let sample = &generate_phantoms::<f32>(&spec, 1, 19).unwrap()[0];
        let bytes = encode_sample(sample).unwrap();

        assert!(decode_sample::<f32>(&bytes[..bytes.len() / 2]).is_err());

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode_sample::<f32>(&bad_magic).is_err());

        let mut wrong_version = bytes.clone();
        wrong_version[8] = b'2'; // ADVCHAIN1 -> ADVCHAIN2
        match decode_sample::<f32>(&wrong_version) {
            Err(Error::CorruptData(msg)) => assert!(msg.contains("version")),
            other => panic!("expected version error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn byte_swapped_image_is_honored_via_header() {
        let spec = PhantomSpec::default();
        let sample = &generate_phantoms::<f32>(&spec, 1, 23).unwrap()[0];
        let bytes = encode_sample(sample).unwrap();
        // find the image payload (after first blank line) and byte-swap it
        let hdr_end = bytes.windows(2).position(|w| w == b"\n\n").unwrap() + 2;
        let n = sample.image.len();
        let mut swapped = Vec::new();
        let hdr = String::from_utf8(bytes[..hdr_end].to_vec()).unwrap();
        swapped.extend_from_slice(hdr.replace("endian little", "endian big").as_bytes());
        for i in 0..n {
            let mut chunk = bytes[hdr_end + 4 * i..hdr_end + 4 * i + 4].to_vec();
            chunk.reverse();
            swapped.extend_from_slice(&chunk);
        }
        swapped.extend_from_slice(&bytes[hdr_end + 4 * n..]);
        let back = decode_sample::<f32>(&swapped).unwrap();
        assert_eq!(back.image, sample.image);
    }
}
