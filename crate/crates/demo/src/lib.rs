//! Interactive browser bindings over the core engine.
//!
//! Three operations are exposed to the page: rendering a phantom from
//! slider values, corrupting it to a chosen noise level, and running
//! iterations of guided counterfactual generation once checkpoints have
//! been loaded. All state lives in [`DemoEngine`]; the JS side only moves
//! pixels and slider values.

use wasm_bindgen::prelude::wasm_bindgen;

use planeshift_core::checkpoint::{load_checkpoint_from_parts, CheckpointManifest};
use planeshift_core::diffusion::{forward_sample, noise_like, DenoiserArch, DenoiserModel};
use planeshift_core::guidance::{diff_ice, GuidanceConfig, GuidanceModels, ScoringModels};
use planeshift_core::models::{FeatureNet, OracleModel, QualityClassifier};
use planeshift_core::rng::derive_rng;
use planeshift_core::schedule::{build_schedule, respace, NoiseSchedule, ScheduleKind};
use planeshift_core::synth::{
    label_spec, render, BlobSpec, GeneratorKnobs, Label, PhantomSample, PhantomSpec, IMG_H, IMG_W,
};
use planeshift_core::tensor::Tensor;

const T_TRAIN: usize = 1000;
const T_SAMPLE: usize = 400;

/// Map a [-1, 1] image to RGBA bytes for `putImageData`.
fn image_to_rgba(image: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(image.numel() * 4);
    for &v in image.data() {
        let g = (((v as f64 + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8;
        out.extend_from_slice(&[g, g, g, 255]);
    }
    out
}

/// Mask overlay: structures tinted, background transparent.
fn mask_to_rgba(mask: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(mask.len() * 4);
    for &m in mask {
        let (r, g, b, a) = match m {
            1 => (250, 215, 90, 140),  // skull ring
            2 => (110, 190, 255, 160), // TH
            3 => (130, 240, 150, 160), // CSP
            4 => (255, 110, 120, 170), // FP
            _ => (0, 0, 0, 0),
        };
        out.extend_from_slice(&[r, g, b, a]);
    }
    out
}

#[wasm_bindgen]
pub struct DemoEngine {
    knobs: GeneratorKnobs,
    schedule: NoiseSchedule,
    phantom: Option<PhantomSample>,
    denoiser: Option<DenoiserModel<f32>>,
    classifier: Option<QualityClassifier<f32>>,
    oracle: Option<OracleModel<f32>>,
    feat_guid: Option<FeatureNet<f32>>,
    feat_eval: Option<FeatureNet<f32>>,
    last_confidences: Vec<f64>,
}

impl Default for DemoEngine {
    fn default() -> Self {
        Self::new()
    }
}

#[wasm_bindgen]
impl DemoEngine {
    #[wasm_bindgen(constructor)]
    pub fn new() -> DemoEngine {
        let base = build_schedule(T_TRAIN, ScheduleKind::default()).expect("schedule");
        DemoEngine {
            knobs: GeneratorKnobs::default(),
            schedule: respace(&base, T_SAMPLE).expect("respace"),
            phantom: None,
            denoiser: None,
            classifier: None,
            oracle: None,
            feat_guid: None,
            feat_eval: None,
            last_confidences: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        IMG_W
    }

    pub fn height(&self) -> usize {
        IMG_H
    }

    /// Operation 1: render a phantom from explicit parameters. Returns the
    /// RGBA pixels; the label and mask are read separately.
    #[allow(clippy::too_many_arguments)]
    pub fn render_phantom(
        &mut self,
        completeness: f64,
        blur_sigma: f64,
        th_present: bool,
        th_intensity: f64,
        csp_present: bool,
        csp_intensity: f64,
        fp_present: bool,
        fp_intensity: f64,
        speckle: f64,
        seed: u64,
    ) -> Vec<u8> {
        let blob = |present: bool, offset: (f64, f64), intensity: f64| BlobSpec {
            present,
            offset,
            intensity: intensity.clamp(0.0, 1.0),
        };
        let spec = PhantomSpec {
            center: (IMG_W as f64 / 2.0, IMG_H as f64 / 2.0),
            axes: (12.4, 9.6),
            rotation: 0.05,
            ring_intensity: 0.9,
            completeness: completeness.clamp(0.0, 1.0),
            gap_angle: 1.1,
            th: blob(th_present, (0.02, 0.18), th_intensity),
            csp: blob(csp_present, (-0.42, -0.02), csp_intensity),
            fp: blob(fp_present, (0.45, 0.12), fp_intensity),
            blur_sigma: blur_sigma.max(0.0),
            speckle: speckle.max(0.0),
            background_gain: 0.06,
            texture_seed: seed,
        };
        let sample = render(&spec, &self.knobs);
        let rgba = image_to_rgba(&sample.image);
        self.phantom = Some(sample);
        rgba
    }

    /// Rule label of the current phantom ("SP" or "NSP").
    pub fn phantom_label(&self) -> String {
        match &self.phantom {
            Some(p) => p.label.to_string(),
            None => String::new(),
        }
    }

    pub fn phantom_mask_rgba(&self) -> Vec<u8> {
        self.phantom
            .as_ref()
            .map(|p| mask_to_rgba(&p.mask))
            .unwrap_or_default()
    }

    /// Operation 2: corrupt the current phantom to re-spaced step `t`
    /// (1..=400) with seeded noise.
    pub fn corrupt(&self, t: usize, noise_seed: u64) -> Result<Vec<u8>, String> {
        let phantom = self.phantom.as_ref().ok_or("render a phantom first")?;
        let t = t.clamp(1, self.schedule.len());
        let mut rng = derive_rng(noise_seed, "demo-corrupt", &[t as u64]);
        let eps = noise_like(&phantom.image, &mut rng);
        let x_t = forward_sample(&phantom.image, t, &eps, &self.schedule)
            .map_err(|e| e.to_string())?;
        Ok(image_to_rgba(&x_t.map(|v| v.clamp(-1.0, 1.0))))
    }

    /// Signal-preservation fraction `sqrt(alpha_bar_t)` shown next to the
    /// corruption slider.
    pub fn signal_fraction(&self, t: usize) -> f64 {
        let t = t.clamp(1, self.schedule.len());
        self.schedule.alpha_bar(t).sqrt()
    }

    /// Load one checkpoint (role: diffusion, classifier, oracle, feat_guid,
    /// feat_eval) from its manifest JSON and tensor blob.
    pub fn load_checkpoint(
        &mut self,
        role: &str,
        manifest_json: &str,
        tensors: &[u8],
    ) -> Result<(), String> {
        let manifest: CheckpointManifest =
            serde_json::from_str(manifest_json).map_err(|e| e.to_string())?;
        match role {
            "diffusion" => {
                let arch: DenoiserArch =
                    serde_json::from_value(manifest.arch.clone()).map_err(|e| e.to_string())?;
                let mut model = DenoiserModel::init(arch, &mut derive_rng(0, "skeleton", &[]));
                load_checkpoint_from_parts(manifest, tensors, model.params_mut())
                    .map_err(|e| e.to_string())?;
                self.denoiser = Some(model);
            }
            "classifier" => {
                let mut model = QualityClassifier::init(&mut derive_rng(0, "skeleton", &[]));
                let mut params = Vec::new();
                for (n, t) in model.segmenter.params_mut() {
                    params.push((intern(&format!("segmenter.{n}")), t));
                }
                for (n, t) in model.predictor.params_mut() {
                    params.push((intern(&format!("predictor.{n}")), t));
                }
                params.push(("temperature", &mut model.temperature));
                load_checkpoint_from_parts(manifest, tensors, params)
                    .map_err(|e| e.to_string())?;
                self.classifier = Some(model);
            }
            "oracle" => {
                let mut model = OracleModel::init(&mut derive_rng(0, "skeleton", &[]));
                load_checkpoint_from_parts(manifest, tensors, model.params_mut())
                    .map_err(|e| e.to_string())?;
                self.oracle = Some(model);
            }
            "feat_guid" | "feat_eval" => {
                let dim = manifest.arch["dim"]
                    .as_u64()
                    .ok_or("feature checkpoint missing dim")? as usize;
                let mut model =
                    FeatureNet::init(dim, (IMG_H, IMG_W), &mut derive_rng(0, "skeleton", &[]));
                load_checkpoint_from_parts(manifest, tensors, model.params_mut())
                    .map_err(|e| e.to_string())?;
                if role == "feat_guid" {
                    self.feat_guid = Some(model);
                } else {
                    self.feat_eval = Some(model);
                }
            }
            other => return Err(format!("unknown checkpoint role `{other}`")),
        }
        Ok(())
    }

    pub fn models_ready(&self) -> bool {
        self.denoiser.is_some()
            && self.classifier.is_some()
            && self.oracle.is_some()
            && self.feat_guid.is_some()
            && self.feat_eval.is_some()
    }

    /// SP confidence of the current phantom under the loaded classifier.
    pub fn classify_phantom(&self) -> Result<f64, String> {
        let phantom = self.phantom.as_ref().ok_or("render a phantom first")?;
        let classifier = self.classifier.as_ref().ok_or("load checkpoints first")?;
        classifier
            .classify(&phantom.image)
            .map(|(p, _)| p)
            .map_err(|e| e.to_string())
    }

    /// Operation 3: run the full iterated counterfactual generation on the
    /// current phantom. Returns a strip of RGBA frames (input first, then
    /// one per iteration); SP confidences follow via
    /// [`DemoEngine::last_confidences`].
    pub fn run_counterfactual(
        &mut self,
        tau: usize,
        iterations: usize,
        lambda_c: f64,
        lambda_p: f64,
        seed: u64,
    ) -> Result<Vec<u8>, String> {
        let phantom = self.phantom.as_ref().ok_or("render a phantom first")?;
        if !self.models_ready() {
            return Err("load all five checkpoints first".into());
        }
        let cfg = GuidanceConfig {
            tau: tau.clamp(1, self.schedule.len()),
            iterations: iterations.clamp(1, 8),
            lambda_c,
            lambda_p,
            lambda_c_candidates: vec![],
            ..GuidanceConfig::default()
        };
        let models = GuidanceModels {
            denoiser: self.denoiser.as_ref().unwrap(),
            classifier: self.classifier.as_ref().unwrap(),
            feat_guid: self.feat_guid.as_ref().unwrap(),
        };
        let scoring = ScoringModels {
            oracle: self.oracle.as_ref().unwrap(),
            feat_eval: self.feat_eval.as_ref().unwrap(),
        };
        let record = diff_ice(
            &phantom.image,
            &cfg,
            &models,
            &scoring,
            &self.schedule,
            seed,
            0,
        )
        .map_err(|e| e.to_string())?;

        let mut strip = image_to_rgba(&record.original);
        for img in &record.iterations {
            strip.extend(image_to_rgba(img));
        }
        self.last_confidences = std::iter::once(record.input_p_sp)
            .chain(record.scores.iter().map(|s| s.p_sp))
            .collect();
        Ok(strip)
    }

    /// SP confidences for the last counterfactual strip (input first).
    pub fn last_confidences(&self) -> Vec<f64> {
        self.last_confidences.clone()
    }
}

fn intern(s: &str) -> &'static str {
    Box::leak(s.to_string().into_boxed_str())
}

/// The labeling rule as text for the page footer.
#[wasm_bindgen]
pub fn labeling_rule() -> String {
    let knobs = GeneratorKnobs::default();
    format!(
        "SP iff TH present and CSP present and FP absent and ring completeness >= {} and blur <= {}",
        knobs.completeness_threshold, knobs.sigma_max
    )
}

/// Smoke check used by the page to verify the module: an ideal spec must
/// label as SP.
#[wasm_bindgen]
pub fn self_check() -> bool {
    let knobs = GeneratorKnobs::default();
    let spec = PhantomSpec {
        center: (18.0, 14.0),
        axes: (12.4, 9.6),
        rotation: 0.0,
        ring_intensity: 0.9,
        completeness: 1.0,
        gap_angle: 0.0,
        th: BlobSpec { present: true, offset: (0.02, 0.18), intensity: 0.8 },
        csp: BlobSpec { present: true, offset: (-0.42, -0.02), intensity: 0.8 },
        fp: BlobSpec { present: false, offset: (0.45, 0.12), intensity: 0.0 },
        blur_sigma: 0.3,
        speckle: 0.05,
        background_gain: 0.06,
        texture_seed: 7,
    };
    label_spec(&spec, &knobs) == Label::Sp
}
