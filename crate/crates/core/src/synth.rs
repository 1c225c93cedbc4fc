//! Procedural phantom generator.
//!
//! Images mimic the geometry of a "standard plane vs. non-standard plane"
//! task at 28x36: an elliptical bone-like ring that may be incomplete, plus
//! three inner structures (TH, CSP, FP) of which a standard plane must show
//! TH and CSP but not FP, with a complete ring and low blur. Renders are
//! anti-aliased, blurred, and speckled; masks and labels come from the
//! pre-blur geometry, so texture noise never changes a label.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, sha256_hex};
use crate::tensor::Tensor;

pub const IMG_H: usize = 28;
pub const IMG_W: usize = 36;

/// Mask label indices.
pub const MASK_BACKGROUND: u8 = 0;
pub const MASK_SKULL: u8 = 1;
pub const MASK_TH: u8 = 2;
pub const MASK_CSP: u8 = 3;
pub const MASK_FP: u8 = 4;
pub const NUM_MASK_CLASSES: usize = 5;

pub const REJECTION_BUDGET: usize = 10_000;
/// Bump when the labeling rule changes; recorded in dataset manifests.
pub const RULE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Sp,
    Nsp,
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Sp => write!(f, "SP"),
            Label::Nsp => write!(f, "NSP"),
        }
    }
}

/// One inner structure: present or not, with a position jitter (in unit
/// ellipse coordinates) and an intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub present: bool,
    pub offset: (f64, f64),
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub center: (f64, f64),
    pub axes: (f64, f64),
    pub rotation: f64,
    pub ring_intensity: f64,
    /// Fraction of the ring that is drawn, in [0, 1].
    pub completeness: f64,
    /// Angular position of the ring gap.
    pub gap_angle: f64,
    pub th: BlobSpec,
    pub csp: BlobSpec,
    pub fp: BlobSpec,
    pub blur_sigma: f64,
    pub speckle: f64,
    pub background_gain: f64,
    /// Seed for the multiplicative texture noise; labels never depend on it.
    pub texture_seed: u64,
}

/// Distribution and rule knobs. These are configuration, not code: the SP
/// rate and class separability are tuned here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorKnobs {
    pub th_present_prob: f64,
    pub csp_present_prob: f64,
    pub fp_present_prob: f64,
    pub completeness_range: (f64, f64),
    pub completeness_threshold: f64,
    pub blur_range: (f64, f64),
    pub sigma_max: f64,
    pub ring_intensity_range: (f64, f64),
    pub blob_intensity_range: (f64, f64),
    pub speckle_range: (f64, f64),
    pub background_gain_range: (f64, f64),
}

impl Default for GeneratorKnobs {
    fn default() -> Self {
        GeneratorKnobs {
            th_present_prob: 0.88,
            csp_present_prob: 0.85,
            fp_present_prob: 0.25,
            completeness_range: (0.75, 1.0),
            completeness_threshold: 0.9,
            blur_range: (0.1, 1.4),
            sigma_max: 0.9,
            ring_intensity_range: (0.6, 1.0),
            blob_intensity_range: (0.5, 0.95),
            speckle_range: (0.03, 0.18),
            background_gain_range: (0.03, 0.10),
        }
    }
}

/// Ground-truth concept annotations derived from the spec.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Concepts {
    pub th_present: bool,
    pub csp_present: bool,
    pub fp_present: bool,
    /// Visibility-graded quality scalars in [0, 1]. `q_fp` is high when the
    /// unwanted FP structure is absent.
    pub q_th: f64,
    pub q_csp: f64,
    pub q_fp: f64,
}

#[derive(Debug, Clone)]
pub struct PhantomSample {
    pub spec: PhantomSpec,
    /// [1, 28, 36], values in [-1, 1].
    pub image: Tensor<f32>,
    /// Row-major label indices, pre-blur geometry.
    pub mask: Vec<u8>,
    pub concepts: Concepts,
    pub label: Label,
}

fn uniform(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    rng.gen_range(range.0..=range.1)
}

/// Draw a spec from the unconditioned distribution, or rejection-sample
/// until the label matches `target`.
pub fn sample_spec(
    rng: &mut impl Rng,
    knobs: &GeneratorKnobs,
    target: Option<Label>,
) -> Result<PhantomSpec> {
    for _ in 0..REJECTION_BUDGET {
        let spec = draw_spec(rng, knobs);
        match target {
            None => return Ok(spec),
            Some(t) if label_spec(&spec, knobs) == t => return Ok(spec),
            Some(_) => {}
        }
    }
    Err(Error::RejectionBudget {
        budget: REJECTION_BUDGET,
        target: target.map_or_else(|| "any".into(), |t| t.to_string()),
    })
}

fn draw_blob(
    rng: &mut impl Rng,
    present: bool,
    base: (f64, f64),
    range: (f64, f64),
) -> BlobSpec {
    BlobSpec {
        present,
        offset: (
            base.0 + rng.gen_range(-0.07..=0.07),
            base.1 + rng.gen_range(-0.07..=0.07),
        ),
        intensity: uniform(rng, range),
    }
}

fn draw_spec(rng: &mut impl Rng, knobs: &GeneratorKnobs) -> PhantomSpec {
    let th_present = rng.gen_bool(knobs.th_present_prob);
    let csp_present = rng.gen_bool(knobs.csp_present_prob);
    let fp_present = rng.gen_bool(knobs.fp_present_prob);
    PhantomSpec {
        center: (
            IMG_W as f64 / 2.0 + rng.gen_range(-1.2..=1.2),
            IMG_H as f64 / 2.0 + rng.gen_range(-1.0..=1.0),
        ),
        axes: (rng.gen_range(11.0..=13.5), rng.gen_range(8.5..=10.5)),
        rotation: rng.gen_range(-0.22..=0.22),
        ring_intensity: uniform(rng, knobs.ring_intensity_range),
        completeness: uniform(rng, knobs.completeness_range),
        gap_angle: rng.gen_range(0.0..(2.0 * PI)),
        th: draw_blob(rng, th_present, (0.02, 0.18), knobs.blob_intensity_range),
        csp: draw_blob(rng, csp_present, (-0.42, -0.02), knobs.blob_intensity_range),
        fp: draw_blob(rng, fp_present, (0.45, 0.12), knobs.blob_intensity_range),
        blur_sigma: uniform(rng, knobs.blur_range),
        speckle: uniform(rng, knobs.speckle_range),
        background_gain: uniform(rng, knobs.background_gain_range),
        texture_seed: rng.gen(),
    }
}

/// The deterministic labeling rule: SP iff TH present, CSP present, FP
/// absent, ring complete enough, and blur low enough.
pub fn label_spec(spec: &PhantomSpec, knobs: &GeneratorKnobs) -> Label {
    let sp = spec.th.present
        && spec.csp.present
        && !spec.fp.present
        && spec.completeness >= knobs.completeness_threshold
        && spec.blur_sigma <= knobs.sigma_max;
    if sp {
        Label::Sp
    } else {
        Label::Nsp
    }
}

/// Visibility attenuation by blur, in (0, 1].
fn blur_attenuation(blur: f64, sigma_max: f64) -> f64 {
    1.0 / (1.0 + (blur / sigma_max).powi(2))
}

pub fn concepts_of(spec: &PhantomSpec, knobs: &GeneratorKnobs) -> Concepts {
    let atten = blur_attenuation(spec.blur_sigma, knobs.sigma_max);
    let vis = |b: &BlobSpec| if b.present { b.intensity * atten } else { 0.0 };
    Concepts {
        th_present: spec.th.present,
        csp_present: spec.csp.present,
        fp_present: spec.fp.present,
        q_th: vis(&spec.th),
        q_csp: vis(&spec.csp),
        q_fp: 1.0 - vis(&spec.fp),
    }
}

const RING_SIGMA: f64 = 0.8;
const BLOB_SIGMAS: [f64; 3] = [2.3, 1.6, 1.9]; // TH, CSP, FP
const MASK_RING_THRESHOLD: f64 = 0.35;
const MASK_BLOB_THRESHOLD: f64 = 0.45;

/// Deterministic render: anti-aliased ring plus Gaussian blobs, Gaussian
/// blur, multiplicative log-normal speckle, clamped to [-1, 1].
pub fn render(spec: &PhantomSpec, knobs: &GeneratorKnobs) -> PhantomSample {
    let (cx, cy) = spec.center;
    let (a, b) = spec.axes;
    let (sin_r, cos_r) = spec.rotation.sin_cos();
    let mean_radius = 0.5 * (a + b);

    let mut lum = vec![spec.background_gain; IMG_H * IMG_W];
    let mut mask = vec![MASK_BACKGROUND; IMG_H * IMG_W];

    // Ring with an angular gap of fraction (1 - completeness).
    let half_keep = PI * spec.completeness;
    for row in 0..IMG_H {
        for col in 0..IMG_W {
            let dx = col as f64 - cx;
            let dy = row as f64 - cy;
            let u = (dx * cos_r + dy * sin_r) / a;
            let v = (-dx * sin_r + dy * cos_r) / b;
            let r = (u * u + v * v).sqrt();
            let d_px = (r - 1.0) * mean_radius;
            let profile = (-d_px * d_px / (2.0 * RING_SIGMA * RING_SIGMA)).exp();
            if profile < 1e-4 {
                continue;
            }
            let phi = v.atan2(u);
            let mut delta = (phi - spec.gap_angle).rem_euclid(2.0 * PI);
            if delta > PI {
                delta = 2.0 * PI - delta;
            }
            // The gap is centered on gap_angle; keep the rest of the ring.
            if PI - delta > half_keep {
                continue;
            }
            let idx = row * IMG_W + col;
            lum[idx] += spec.ring_intensity * profile;
            if profile > MASK_RING_THRESHOLD {
                mask[idx] = MASK_SKULL;
            }
        }
    }

    // Inner structures.
    let blobs = [(&spec.th, MASK_TH), (&spec.csp, MASK_CSP), (&spec.fp, MASK_FP)];
    for (i, (blob, mask_label)) in blobs.into_iter().enumerate() {
        if !blob.present {
            continue;
        }
        let sigma = BLOB_SIGMAS[i];
        let bx = cx + a * blob.offset.0 * cos_r - b * blob.offset.1 * sin_r;
        let by = cy + a * blob.offset.0 * sin_r + b * blob.offset.1 * cos_r;
        for row in 0..IMG_H {
            for col in 0..IMG_W {
                let d2 = (col as f64 - bx).powi(2) + (row as f64 - by).powi(2);
                let profile = (-d2 / (2.0 * sigma * sigma)).exp();
                if profile < 1e-4 {
                    continue;
                }
                let idx = row * IMG_W + col;
                lum[idx] += blob.intensity * profile;
                if profile > MASK_BLOB_THRESHOLD {
                    mask[idx] = mask_label;
                }
            }
        }
    }

    if spec.blur_sigma > 0.0 {
        lum = gaussian_blur(&lum, IMG_H, IMG_W, spec.blur_sigma);
    }

    if spec.speckle > 0.0 {
        let mut noise_rng = derive_rng(spec.texture_seed, "speckle", &[]);
        let s = spec.speckle;
        for v in lum.iter_mut() {
            let z: f64 = noise_rng.sample(StandardNormal);
            *v *= (s * z - 0.5 * s * s).exp();
        }
    }

    let image = Tensor::new(
        vec![1, IMG_H, IMG_W],
        lum.iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 2.0 - 1.0) as f32)
            .collect(),
    )
    .expect("image shape");

    PhantomSample {
        spec: spec.clone(),
        image,
        mask,
        concepts: concepts_of(spec, knobs),
        label: label_spec(spec, knobs),
    }
}

/// Separable Gaussian blur with clamp-to-edge padding.
fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-(i * i) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let mut tmp = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let c = (col as isize + ki as isize - radius).clamp(0, w as isize - 1);
                acc += k * src[row * w + c as usize];
            }
            tmp[row * w + col] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let r = (row as isize + ki as isize - radius).clamp(0, h as isize - 1);
                acc += k * tmp[r as usize * w + col];
            }
            out[row * w + col] = acc;
        }
    }
    out
}

/// Class balance for dataset generation: an explicit SP fraction, or
/// `"paper"` for the reference clinical imbalance (240 standard planes of
/// 1579 images).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Balance {
    Fraction(f64),
    Named(BalanceName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceName {
    Paper,
}

impl Balance {
    pub fn paper() -> Self {
        Balance::Named(BalanceName::Paper)
    }

    pub fn fraction(&self) -> Result<f64> {
        match self {
            Balance::Fraction(f) if (0.0..=1.0).contains(f) => Ok(*f),
            Balance::Fraction(f) => Err(Error::invalid(format!("balance {f} outside [0,1]"))),
            Balance::Named(BalanceName::Paper) => Ok(240.0 / 1579.0),
        }
    }
}

/// Generate `n` labelled samples with an exact SP count of
/// `round(n * balance)`, deterministically shuffled. Each sample's rng is
/// derived from (seed, index), so generation order never matters.
pub fn generate_samples(
    n: usize,
    balance: &Balance,
    seed: u64,
    knobs: &GeneratorKnobs,
) -> Result<Vec<PhantomSample>> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    let frac = balance.fraction()?;
    let n_sp = (n as f64 * frac).round() as usize;
    let mut labels = vec![Label::Nsp; n];
    for slot in labels.iter_mut().take(n_sp) {
        *slot = Label::Sp;
    }
    // Fisher-Yates with a derived stream, independent of sample draws.
    let mut order_rng = derive_rng(seed, "label-order", &[]);
    for i in (1..n).rev() {
        let j = order_rng.gen_range(0..=i);
        labels.swap(i, j);
    }

    let mut samples = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = derive_rng(seed, "phantom", &[i as u64]);
        let spec = sample_spec(&mut rng, knobs, Some(label))?;
        samples.push(render(&spec, knobs));
    }
    Ok(samples)
}

// ---- persistence ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub image: String,
    pub mask: String,
    pub label: Label,
    pub concepts: Concepts,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub rule_version: u32,
    pub n: usize,
    pub n_sp: usize,
    pub n_nsp: usize,
    pub knobs: GeneratorKnobs,
    pub entries: Vec<DatasetEntry>,
}

/// Write images and masks as PGM plus a JSON manifest; returns the manifest.
pub fn persist_dataset(
    dir: &Path,
    samples: &[PhantomSample],
    seed: u64,
    knobs: &GeneratorKnobs,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut entries = Vec::with_capacity(samples.len());
    let mut n_sp = 0;
    for (i, s) in samples.iter().enumerate() {
        let image_rel = format!("images/{i:05}.pgm");
        let mask_rel = format!("masks/{i:05}.pgm");
        fs::write(dir.join(&image_rel), image_to_pgm(&s.image))?;
        fs::write(dir.join(&mask_rel), mask_to_pgm(&s.mask))?;
        if s.label == Label::Sp {
            n_sp += 1;
        }
        entries.push(DatasetEntry {
            image: image_rel,
            mask: mask_rel,
            label: s.label,
            concepts: s.concepts,
        });
    }
    let manifest = DatasetManifest {
        seed,
        rule_version: RULE_VERSION,
        n: samples.len(),
        n_sp,
        n_nsp: samples.len() - n_sp,
        knobs: knobs.clone(),
        entries,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// A dataset loaded back from disk. Images round-trip through the 8-bit PGM
/// quantization, so training consumes exactly what is persisted.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub image: Tensor<f32>,
    pub mask: Vec<u8>,
    pub label: Label,
    pub concepts: Concepts,
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<LoadedSample>)> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingStage {
            stage: "dataset".into(),
            hint: "synth".into(),
        });
    }
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let image = pgm_to_image(&fs::read(dir.join(&e.image))?)?;
        let mask = pgm_to_mask(&fs::read(dir.join(&e.mask))?)?;
        samples.push(LoadedSample {
            image,
            mask,
            label: e.label,
            concepts: e.concepts,
        });
    }
    Ok((manifest, samples))
}

/// Hash of the manifest file content, used to key checkpoints to data.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(dir.join("manifest.json"))?))
}

pub fn image_to_pgm(image: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| {
        (((v as f64 + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8
    }));
    out
}

pub fn pgm_to_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (w, h, maxval, data) = parse_pgm(bytes)?;
    if maxval != 255 {
        return Err(Error::invalid("image PGM must have maxval 255"));
    }
    Tensor::new(
        vec![1, h, w],
        data.iter()
            .map(|&b| (b as f32 / 255.0) * 2.0 - 1.0)
            .collect(),
    )
}

pub fn mask_to_pgm(mask: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{IMG_W} {IMG_H}\n{}\n", NUM_MASK_CLASSES - 1).into_bytes();
    out.extend_from_slice(mask);
    out
}

pub fn pgm_to_mask(bytes: &[u8]) -> Result<Vec<u8>> {
    let (_, _, _, data) = parse_pgm(bytes)?;
    Ok(data)
}

fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let header_err = || Error::invalid("malformed PGM header");
    let mut fields = Vec::new();
    let mut pos = 0;
    // P5, width, height, maxval separated by whitespace; then raw bytes.
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| header_err())?);
    }
    if fields.len() != 4 || fields[0] != "P5" {
        return Err(header_err());
    }
    let w: usize = fields[1].parse().map_err(|_| header_err())?;
    let h: usize = fields[2].parse().map_err(|_| header_err())?;
    let maxval: usize = fields[3].parse().map_err(|_| header_err())?;
    pos += 1; // single whitespace after maxval
    let data = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::invalid("PGM data truncated"))?
        .to_vec();
    Ok((w, h, maxval, data))
}

/// Convenience accessors used across training code.
pub fn split_by_label(samples: &[LoadedSample]) -> (Vec<usize>, Vec<usize>) {
    let mut sp = Vec::new();
    let mut nsp = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        match s.label {
            Label::Sp => sp.push(i),
            Label::Nsp => nsp.push(i),
        }
    }
    (sp, nsp)
}
