//! Counterfactual generation: the guided reverse process, the guiding loss,
//! efficient gradient estimation at the one-step denoised prediction, the
//! backprop-through-the-denoiser baseline, and the iterated loop that feeds
//! each output back in while keeping proximity anchored to the original.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    forward_sample, noise_like, one_step_denoise, predict_mu, shifted_gaussian_sample,
    DenoiserModel,
};
use crate::error::{Error, Result};
use crate::models::{
    cosine_similarity, FeatureNet, OracleModel, OracleScores, QualityClassifier, CLASS_SP,
};
use crate::rng::{derive_rng, sha256_hex};
use crate::schedule::NoiseSchedule;
use crate::synth::{IMG_H, IMG_W};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Gradient w.r.t. the one-step denoised estimate; never backpropagates
    /// through the denoiser.
    Denoised,
    /// Gradient w.r.t. the noisy iterate, through the denoiser.
    Noisy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSelect {
    /// Smallest candidate that flips this image; fall back to the highest
    /// final SP confidence.
    PerImage,
    /// One candidate chosen for the whole batch (resolved by the caller).
    PerDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// Noise entry level: how many re-spaced steps of corruption.
    pub tau: usize,
    /// Classifier guidance strength used when `lambda_c_candidates` is empty.
    pub lambda_c: f64,
    /// Proximity guidance strength.
    pub lambda_p: f64,
    /// Number of corrupt-then-guide passes (the iteration count L).
    pub iterations: usize,
    /// Target class index (SP = 1).
    pub target: usize,
    pub grad_mode: GradMode,
    pub lambda_c_candidates: Vec<f64>,
    pub lambda_select: LambdaSelect,
    /// Redraw the corruption noise each iteration (the default) or reuse
    /// the first draw.
    pub redraw_noise: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            tau: 120,
            lambda_c: 60.0,
            lambda_p: 30.0,
            iterations: 5,
            target: CLASS_SP,
            grad_mode: GradMode::Denoised,
            lambda_c_candidates: vec![40.0, 60.0, 80.0],
            lambda_select: LambdaSelect::PerImage,
            redraw_noise: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, t_sample: usize) -> Result<()> {
        if self.tau == 0 || self.tau > t_sample {
            return Err(Error::invalid(format!(
                "tau {} outside 1..={t_sample}",
                self.tau
            )));
        }
        if self.lambda_c < 0.0 || self.lambda_p < 0.0 || self.lambda_c_candidates.iter().any(|&l| l < 0.0) {
            return Err(Error::invalid("guidance strengths must be non-negative"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iteration count L must be at least 1"));
        }
        if self.target > 1 {
            return Err(Error::invalid("target class must be 0 (NSP) or 1 (SP)"));
        }
        Ok(())
    }

    pub fn candidates(&self) -> Vec<f64> {
        if self.lambda_c_candidates.is_empty() {
            vec![self.lambda_c]
        } else {
            self.lambda_c_candidates.clone()
        }
    }
}

/// Read-only models driving the guidance.
#[derive(Clone, Copy)]
pub struct GuidanceModels<'a> {
    pub denoiser: &'a DenoiserModel<f32>,
    pub classifier: &'a QualityClassifier<f32>,
    pub feat_guid: &'a FeatureNet<f32>,
}

/// Read-only models used only for per-iteration scoring, never guidance.
#[derive(Clone, Copy)]
pub struct ScoringModels<'a> {
    pub oracle: &'a OracleModel<f32>,
    pub feat_eval: &'a FeatureNet<f32>,
}

/// Derives every random stream of one counterfactual run from
/// (master seed, image id, iteration, timestep), so results do not depend
/// on batch composition or scheduling.
#[derive(Debug, Clone, Copy)]
pub struct RngContext {
    pub master_seed: u64,
    pub image_id: u64,
    pub iteration: u64,
}

impl RngContext {
    fn corrupt(&self, redraw: bool) -> ChaCha8Rng {
        let iter = if redraw { self.iteration } else { 0 };
        derive_rng(self.master_seed, "cf-corrupt", &[self.image_id, iter])
    }

    fn step(&self, t: usize) -> ChaCha8Rng {
        derive_rng(
            self.master_seed,
            "cf-step",
            &[self.image_id, self.iteration, t as u64],
        )
    }
}

/// The counterfactual guiding loss
/// `lambda_c * (-log p_target(f(x_hat))) + lambda_p * ||F(x_hat) - F(x)||^2`
/// built on an existing tape from a [1, 1, H, W] var.
///
/// `feat_orig` must be the guidance features of the anchor image. Terms with
/// a zero weight are skipped; the result is identical and the classifier or
/// feature net is then never evaluated.
pub fn guidance_loss_on(
    tape: &mut Tape<f32>,
    models: &GuidanceModels,
    x_hat: Var,
    feat_orig: &Tensor<f32>,
    target: usize,
    lambda_c: f64,
    lambda_p: f64,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    if lambda_c > 0.0 {
        let b = models.classifier.bind(tape, false);
        let nll = models.classifier.nll_on(tape, &b, x_hat, target)?;
        let term = tape.scale(nll, lambda_c)?;
        total = Some(term);
    }
    if lambda_p > 0.0 {
        let fb = models.feat_guid.bind(tape, false);
        let feats = models.feat_guid.features_on(tape, &fb, x_hat)?;
        let anchor = tape.constant(&feat_orig.reshaped(vec![1, feat_orig.numel()])?);
        let diff = tape.sub(feats, anchor)?;
        let sq = tape.square(diff)?;
        let dist = tape.sum(sq, None)?;
        let term = tape.scale(dist, lambda_p)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.constant_scalar(0.0)),
    }
}

/// Scalar value of the guiding loss at a clean image; the test-facing entry.
pub fn guidance_loss(
    x_hat: &Tensor<f32>,
    x_orig: &Tensor<f32>,
    target: usize,
    models: &GuidanceModels,
    lambda_c: f64,
    lambda_p: f64,
) -> Result<f64> {
    let feat_orig = models.feat_guid.extract(x_orig)?;
    let mut tape = Tape::new();
    let xv = tape.constant(&x_hat.reshaped(vec![1, 1, IMG_H, IMG_W])?);
    let loss = guidance_loss_on(
        &mut tape, models, xv, &feat_orig, target, lambda_c, lambda_p,
    )?;
    let v = tape.data(loss)[0] as f64;
    if !v.is_finite() {
        return Err(Error::non_finite("guidance_loss"));
    }
    Ok(v)
}

/// Outcome of one gradient estimation at a timestep.
pub struct GradEstimate {
    /// Gradient with the image's shape: w.r.t. the one-step denoised
    /// estimate in [`GradMode::Denoised`], w.r.t. the noisy iterate in
    /// [`GradMode::Noisy`].
    pub grad: Tensor<f32>,
    /// The denoiser's prediction at this step, reused for the transition.
    pub eps_hat: Tensor<f32>,
    pub loss: f64,
}

/// Efficient estimation with an arbitrary scalar loss built from the
/// one-step denoised estimate: the denoiser output is treated as a constant
/// and the loss is differentiated w.r.t. that estimate only.
pub fn grad_wrt_denoised_with<L>(
    x_t: &Tensor<f32>,
    t: usize,
    denoiser: &DenoiserModel<f32>,
    schedule: &NoiseSchedule,
    loss_closure: L,
) -> Result<GradEstimate>
where
    L: FnOnce(&mut Tape<f32>, Var) -> Result<Var>,
{
    let eps_hat = denoiser.predict_noise(x_t, schedule.original_step(t))?;
    let x0_hat = one_step_denoise(x_t, t, &eps_hat, schedule)?;
    let (h, w) = (x_t.shape()[1], x_t.shape()[2]);

    let mut tape = Tape::new();
    let leaf = tape.leaf(&x0_hat.reshaped(vec![1, 1, h, w])?, true);
    let loss = loss_closure(&mut tape, leaf)?;
    let loss_val = tape.data(loss)[0] as f64;
    tape.backward(loss)?;
    let grad = tape.grad_tensor(leaf).reshaped(vec![1, h, w])?;
    if !grad.all_finite() {
        return Err(Error::non_finite("guidance gradient"));
    }
    Ok(GradEstimate {
        grad,
        eps_hat,
        loss: loss_val,
    })
}

/// Baseline estimation: differentiate the loss w.r.t. the noisy iterate,
/// backpropagating through the denoiser.
pub fn grad_wrt_noisy_with<L>(
    x_t: &Tensor<f32>,
    t: usize,
    denoiser: &DenoiserModel<f32>,
    schedule: &NoiseSchedule,
    loss_closure: L,
) -> Result<GradEstimate>
where
    L: FnOnce(&mut Tape<f32>, Var) -> Result<Var>,
{
    let ab = schedule.alpha_bar(t);
    let (h, w) = (x_t.shape()[1], x_t.shape()[2]);
    let mut tape = Tape::new();
    let binding = denoiser.bind(&mut tape, false);
    let leaf = tape.leaf(&x_t.reshaped(vec![1, 1, h, w])?, true);
    let eps_var = denoiser.forward_on(&mut tape, &binding, leaf, &[schedule.original_step(t)])?;
    // x0_hat = (x_t - sqrt(1 - ab) * eps_hat) / sqrt(ab), on the tape.
    let scaled_eps = tape.scale(eps_var, (1.0 - ab).sqrt())?;
    let num = tape.sub(leaf, scaled_eps)?;
    let x0_var = tape.scale(num, 1.0 / ab.sqrt())?;
    let loss = loss_closure(&mut tape, x0_var)?;
    let loss_val = tape.data(loss)[0] as f64;
    tape.backward(loss)?;
    let grad = tape.grad_tensor(leaf).reshaped(vec![1, h, w])?;
    if !grad.all_finite() {
        return Err(Error::non_finite("guidance gradient"));
    }
    Ok(GradEstimate {
        grad,
        eps_hat: tape.value(eps_var).reshaped(vec![1, h, w])?,
        loss: loss_val,
    })
}

/// The counterfactual gradient at a timestep under the configured loss.
#[allow(clippy::too_many_arguments)]
pub fn counterfactual_grad(
    x_t: &Tensor<f32>,
    t: usize,
    mode: GradMode,
    models: &GuidanceModels,
    schedule: &NoiseSchedule,
    feat_orig: &Tensor<f32>,
    target: usize,
    lambda_c: f64,
    lambda_p: f64,
) -> Result<GradEstimate> {
    let loss = |tape: &mut Tape<f32>, x_hat: Var| {
        guidance_loss_on(tape, models, x_hat, feat_orig, target, lambda_c, lambda_p)
    };
    match mode {
        GradMode::Denoised => grad_wrt_denoised_with(x_t, t, models.denoiser, schedule, loss),
        GradMode::Noisy => grad_wrt_noisy_with(x_t, t, models.denoiser, schedule, loss),
    }
}

/// One guided reverse transition: the Gaussian mean is shifted by
/// `-sigma2_t * g`. A zero gradient reproduces the unguided step bit for bit
/// under the same rng.
pub fn guided_reverse_step(
    x_t: &Tensor<f32>,
    t: usize,
    grad: &Tensor<f32>,
    model: &DenoiserModel<f32>,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    let eps_hat = model.predict_noise(x_t, schedule.original_step(t))?;
    guided_reverse_step_with_eps(x_t, t, grad, &eps_hat, schedule, rng)
}

/// Same transition with a precomputed denoiser output, so the gradient
/// estimation and the transition share one forward pass.
pub fn guided_reverse_step_with_eps(
    x_t: &Tensor<f32>,
    t: usize,
    grad: &Tensor<f32>,
    eps_hat: &Tensor<f32>,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    if grad.shape() != x_t.shape() {
        return Err(Error::ShapeMismatch {
            op: "guided_reverse_step",
            lhs: x_t.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    let mu = predict_mu(x_t, t, eps_hat, schedule)?;
    let sigma2 = schedule.posterior_variance(t) as f32;
    let mut shifted = mu;
    for (m, g) in shifted.data_mut().iter_mut().zip(grad.data()) {
        *m -= sigma2 * g;
    }
    let out = shifted_gaussian_sample(&shifted, t, schedule, rng);
    if !out.all_finite() {
        return Err(Error::non_finite("guided_reverse_step"));
    }
    Ok(out)
}

/// Per-iteration scores kept in the run record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationScores {
    pub p_sp: f64,
    pub oracle: OracleScores,
    /// Cosine similarity of evaluation features against the original input.
    pub feature_cosine: f64,
    /// Hash of the proximity anchor used by this iteration's loss.
    pub anchor_hash: String,
}

/// One candidate's full L-iteration trajectory.
#[derive(Debug, Clone)]
pub struct CandidateRun {
    pub lambda_c: f64,
    pub iterates: Vec<Tensor<f32>>,
    pub scores: Vec<IterationScores>,
    pub seconds_per_iteration: Vec<f64>,
    pub flipped: bool,
    pub final_p_sp: f64,
}

/// Self-describing record of one image's counterfactual generation.
#[derive(Debug, Clone)]
pub struct CounterfactualRecord {
    pub image_id: u64,
    pub master_seed: u64,
    pub config: GuidanceConfig,
    pub original: Tensor<f32>,
    pub input_p_sp: f64,
    pub input_oracle: OracleScores,
    pub chosen_lambda_c: f64,
    pub iterations: Vec<Tensor<f32>>,
    pub scores: Vec<IterationScores>,
    /// Wall-clock seconds per iteration; excluded from content hashing.
    pub seconds_per_iteration: Vec<f64>,
}

impl CounterfactualRecord {
    pub fn final_image(&self) -> &Tensor<f32> {
        self.iterations.last().expect("L >= 1")
    }
}

/// One corrupt-then-guided-reverse pass. The proximity anchor is `x_orig`,
/// which stays fixed across iterations of the outer loop; `x_in` is the
/// previous output being refined.
#[allow(clippy::too_many_arguments)]
pub fn counterfactual_once(
    x_in: &Tensor<f32>,
    x_orig: &Tensor<f32>,
    lambda_c: f64,
    cfg: &GuidanceConfig,
    models: &GuidanceModels,
    schedule: &NoiseSchedule,
    rng_ctx: &RngContext,
) -> Result<Tensor<f32>> {
    cfg.validate(schedule.len())?;
    let feat_orig = models.feat_guid.extract(x_orig)?;
    let mut corrupt_rng = rng_ctx.corrupt(cfg.redraw_noise);
    let eps = noise_like(x_in, &mut corrupt_rng);
    let mut x = forward_sample(x_in, cfg.tau, &eps, schedule)?;

    for t in (1..=cfg.tau).rev() {
        let estimate = counterfactual_grad(
            &x,
            t,
            cfg.grad_mode,
            models,
            schedule,
            &feat_orig,
            cfg.target,
            lambda_c,
            cfg.lambda_p,
        )?;
        let mut step_rng = rng_ctx.step(t);
        x = guided_reverse_step_with_eps(
            &x,
            t,
            &estimate.grad,
            &estimate.eps_hat,
            schedule,
            &mut step_rng,
        )?;
    }
    Ok(x.map(|v| v.clamp(-1.0, 1.0)))
}

/// Run the full iterated loop for one guidance strength.
#[allow(clippy::too_many_arguments)]
pub fn run_candidate(
    x: &Tensor<f32>,
    lambda_c: f64,
    cfg: &GuidanceConfig,
    models: &GuidanceModels,
    scoring: &ScoringModels,
    schedule: &NoiseSchedule,
    master_seed: u64,
    image_id: u64,
) -> Result<CandidateRun> {
    let anchor_hash = hash_image(x);
    let feat_eval_orig = scoring.feat_eval.extract(x)?;
    let mut iterates = Vec::with_capacity(cfg.iterations);
    let mut scores = Vec::with_capacity(cfg.iterations);
    let mut seconds = Vec::with_capacity(cfg.iterations);
    let mut current = x.clone();
    for iteration in 0..cfg.iterations {
        let ctx = RngContext {
            master_seed,
            image_id,
            iteration: iteration as u64,
        };
        let start = Instant::now();
        current = counterfactual_once(&current, x, lambda_c, cfg, models, schedule, &ctx)?;
        seconds.push(start.elapsed().as_secs_f64());

        let (p_sp, _) = models.classifier.classify(&current)?;
        let oracle = scoring.oracle.score(&current)?;
        let feats = scoring.feat_eval.extract(&current)?;
        scores.push(IterationScores {
            p_sp,
            oracle,
            feature_cosine: cosine_similarity(&feat_eval_orig, &feats),
            anchor_hash: anchor_hash.clone(),
        });
        iterates.push(current.clone());
    }
    let final_p_sp = scores.last().expect("L >= 1").p_sp;
    let flipped = if cfg.target == CLASS_SP {
        final_p_sp >= 0.5
    } else {
        final_p_sp < 0.5
    };
    Ok(CandidateRun {
        lambda_c,
        iterates,
        scores,
        seconds_per_iteration: seconds,
        flipped,
        final_p_sp,
    })
}

/// The iterated counterfactual generation for one image.
///
/// Candidates are tried in ascending order and the first one whose final
/// output flips to the target class wins, which selects the smallest
/// sufficient guidance strength without running the rest. When none flips,
/// the candidate with the highest final target confidence is kept.
#[allow(clippy::too_many_arguments)]
pub fn diff_ice(
    x: &Tensor<f32>,
    cfg: &GuidanceConfig,
    models: &GuidanceModels,
    scoring: &ScoringModels,
    schedule: &NoiseSchedule,
    master_seed: u64,
    image_id: u64,
) -> Result<CounterfactualRecord> {
    cfg.validate(schedule.len())?;
    let mut candidates = cfg.candidates();
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite lambda"));

    let target_conf = |p_sp: f64| if cfg.target == CLASS_SP { p_sp } else { 1.0 - p_sp };
    let mut best: Option<CandidateRun> = None;
    for lambda_c in candidates {
        let run = run_candidate(x, lambda_c, cfg, models, scoring, schedule, master_seed, image_id)?;
        let done = run.flipped;
        let better = match &best {
            None => true,
            Some(b) => target_conf(run.final_p_sp) > target_conf(b.final_p_sp),
        };
        if better {
            best = Some(run);
        }
        if done {
            break;
        }
    }
    let run = best.expect("at least one candidate");

    let (input_p_sp, _) = models.classifier.classify(x)?;
    let input_oracle = scoring.oracle.score(x)?;
    Ok(CounterfactualRecord {
        image_id,
        master_seed,
        config: cfg.clone(),
        original: x.clone(),
        input_p_sp,
        input_oracle,
        chosen_lambda_c: run.lambda_c,
        iterations: run.iterates,
        scores: run.scores,
        seconds_per_iteration: run.seconds_per_iteration,
    })
}

pub fn hash_image(x: &Tensor<f32>) -> String {
    let mut bytes = Vec::with_capacity(x.numel() * 4);
    for v in x.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    sha256_hex(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::CLASS_NSP;
    use crate::schedule::{build_schedule, respace, ScheduleKind};
    use crate::synth::{generate_samples, Balance, GeneratorKnobs};
    use crate::tensor::max_abs_diff;

    struct Fixture {
        denoiser: DenoiserModel<f32>,
        classifier: QualityClassifier<f32>,
        feat_guid: FeatureNet<f32>,
        oracle: OracleModel<f32>,
        feat_eval: FeatureNet<f32>,
        schedule: NoiseSchedule,
        image: Tensor<f32>,
    }

    impl Fixture {
        fn new() -> Self {
            let mut rng = derive_rng(900, "fixture", &[]);
            let image = generate_samples(1, &Balance::Fraction(0.0), 901, &GeneratorKnobs::default())
                .unwrap()
                .remove(0)
                .image;
            Fixture {
                denoiser: DenoiserModel::init(Default::default(), &mut rng),
                classifier: QualityClassifier::init(&mut rng),
                feat_guid: FeatureNet::init(16, (IMG_H, IMG_W), &mut rng),
                oracle: OracleModel::init(&mut rng),
                feat_eval: FeatureNet::init(16, (IMG_H, IMG_W), &mut derive_rng(902, "fe", &[])),
                schedule: respace(&build_schedule(100, ScheduleKind::default()).unwrap(), 40)
                    .unwrap(),
                image,
            }
        }

        fn models(&self) -> GuidanceModels<'_> {
            GuidanceModels {
                denoiser: &self.denoiser,
                classifier: &self.classifier,
                feat_guid: &self.feat_guid,
            }
        }

        fn scoring(&self) -> ScoringModels<'_> {
            ScoringModels {
                oracle: &self.oracle,
                feat_eval: &self.feat_eval,
            }
        }

        fn config(&self, tau: usize, iterations: usize) -> GuidanceConfig {
            GuidanceConfig {
                tau,
                iterations,
                lambda_c: 5.0,
                lambda_p: 2.0,
                lambda_c_candidates: vec![],
                ..GuidanceConfig::default()
            }
        }
    }

    #[test]
    fn proximity_term_vanishes_at_anchor() {
        let fx = Fixture::new();
        let loss = guidance_loss(&fx.image, &fx.image, CLASS_SP, &fx.models(), 0.0, 30.0).unwrap();
        assert!(loss.abs() < 1e-9, "loss = {loss}");
    }

    #[test]
    fn zero_weights_give_zero_loss() {
        let fx = Fixture::new();
        let other = fx.image.map(|v| (v + 0.3).clamp(-1.0, 1.0));
        let loss = guidance_loss(&other, &fx.image, CLASS_SP, &fx.models(), 0.0, 0.0).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn confident_classifier_gives_zero_classification_loss() {
        let fx = Fixture::new();
        let mut confident = fx.classifier.clone();
        for (name, p) in confident.predictor.params_mut() {
            if name == "fc.b" {
                p.data_mut()[CLASS_NSP] = -20.0;
                p.data_mut()[CLASS_SP] = 20.0;
            }
        }
        let models = GuidanceModels {
            classifier: &confident,
            ..fx.models()
        };
        let loss = guidance_loss(&fx.image, &fx.image, CLASS_SP, &models, 40.0, 0.0).unwrap();
        assert!(loss.abs() < 1e-4, "-log p = {loss}");
    }

    #[test]
    fn quadratic_loss_gradient_is_the_estimate_itself() {
        // loss = 0.5 * ||x_hat||^2  =>  g = x_hat
        let fx = Fixture::new();
        let t = 10;
        let est = grad_wrt_denoised_with(&fx.image, t, &fx.denoiser, &fx.schedule, |tape, x| {
            let sq = tape.square(x)?;
            let s = tape.sum(sq, None)?;
            tape.scale(s, 0.5)
        })
        .unwrap();
        let x0_hat = one_step_denoise(&fx.image, t, &est.eps_hat, &fx.schedule).unwrap();
        assert!(max_abs_diff(&est.grad, &x0_hat) < 1e-5);
    }

    #[test]
    fn identity_denoiser_relates_noisy_and_denoised_gradients() {
        // The untrained denoiser predicts exactly zero noise, so the chain
        // rule reduces to a 1/sqrt(alpha_bar) scaling.
        let fx = Fixture::new();
        let t = 7;
        let feat_orig = fx.feat_guid.extract(&fx.image).unwrap();
        let run = |mode| {
            counterfactual_grad(
                &fx.image,
                t,
                mode,
                &fx.models(),
                &fx.schedule,
                &feat_orig,
                CLASS_SP,
                5.0,
                2.0,
            )
            .unwrap()
        };
        let denoised = run(GradMode::Denoised);
        let noisy = run(GradMode::Noisy);
        let scale = (1.0 / fx.schedule.alpha_bar(t).sqrt()) as f32;
        // Gradient entries are O(1e-3); 1e-6 absolute proves the algebra
        // while leaving room for f32 rounding along the two routes.
        for (n, d) in noisy.grad.data().iter().zip(denoised.grad.data()) {
            assert!((n - d * scale).abs() < 1e-6);
        }
    }

    #[test]
    fn denoised_mode_never_backprops_through_denoiser() {
        let fx = Fixture::new();
        let cfg = fx.config(3, 1);
        let before = fx.denoiser.grad_forward_count();
        diff_ice(&fx.image, &cfg, &fx.models(), &fx.scoring(), &fx.schedule, 1, 0).unwrap();
        assert_eq!(fx.denoiser.grad_forward_count(), before);

        let noisy_cfg = GuidanceConfig {
            grad_mode: GradMode::Noisy,
            ..cfg
        };
        diff_ice(&fx.image, &noisy_cfg, &fx.models(), &fx.scoring(), &fx.schedule, 1, 0).unwrap();
        assert!(fx.denoiser.grad_forward_count() > before);
    }

    #[test]
    fn zero_gradient_reproduces_unguided_step() {
        let fx = Fixture::new();
        let t = 9;
        let x_t = fx.image.clone();
        let zero = Tensor::zeros(x_t.shape());
        let guided = guided_reverse_step(
            &x_t,
            t,
            &zero,
            &fx.denoiser,
            &fx.schedule,
            &mut derive_rng(3, "step", &[]),
        )
        .unwrap();
        let unguided = crate::diffusion::reverse_step(
            &x_t,
            t,
            &fx.denoiser,
            &fx.schedule,
            &mut derive_rng(3, "step", &[]),
        )
        .unwrap();
        assert_eq!(guided.data(), unguided.data(), "bit-exact equivalence");
    }

    #[test]
    fn doubling_gradient_doubles_mean_shift() {
        let fx = Fixture::new();
        // t = 1 is the deterministic step, exposing the mean directly.
        let t = 1;
        let mut rng = derive_rng(4, "grad", &[]);
        let g = Tensor::<f32>::randn(fx.image.shape(), &mut rng);
        let g2 = g.map(|v| 2.0 * v);
        let zero = Tensor::zeros(fx.image.shape());
        let step = |grad: &Tensor<f32>| {
            guided_reverse_step(
                &fx.image,
                t,
                grad,
                &fx.denoiser,
                &fx.schedule,
                &mut derive_rng(5, "s", &[]),
            )
            .unwrap()
        };
        let base = step(&zero);
        let one = step(&g);
        let two = step(&g2);
        for ((b, o), t2) in base.data().iter().zip(one.data()).zip(two.data()) {
            let shift1 = b - o;
            let shift2 = b - t2;
            assert!((shift2 - 2.0 * shift1).abs() < 1e-6);
        }
    }

    #[test]
    fn guided_mean_shift_matches_monte_carlo() {
        let fx = Fixture::new();
        let t = 9;
        let mut grng = derive_rng(6, "grad", &[]);
        let g = Tensor::<f32>::randn(fx.image.shape(), &mut grng).map(|v| 3.0 * v);
        let eps_hat = fx
            .denoiser
            .predict_noise(&fx.image, fx.schedule.original_step(t))
            .unwrap();
        let mu = predict_mu(&fx.image, t, &eps_hat, &fx.schedule).unwrap();
        let sigma2 = fx.schedule.posterior_variance(t);

        let n = 10_000usize;
        let pixel = 200usize;
        let mut mean = 0.0f64;
        let mut rng = derive_rng(7, "mc", &[]);
        for _ in 0..n {
            let out =
                guided_reverse_step_with_eps(&fx.image, t, &g, &eps_hat, &fx.schedule, &mut rng)
                    .unwrap();
            mean += out.data()[pixel] as f64;
        }
        mean /= n as f64;
        let expect = mu.data()[pixel] as f64 - sigma2 * g.data()[pixel] as f64;
        let se = sigma2.sqrt() / (n as f64).sqrt();
        assert!(
            (mean - expect).abs() < 3.0 * se,
            "mean {mean} vs {expect} (3se = {})",
            3.0 * se
        );
    }

    #[test]
    fn counterfactual_once_is_deterministic_and_bounded() {
        let fx = Fixture::new();
        let cfg = fx.config(5, 1);
        let ctx = RngContext {
            master_seed: 11,
            image_id: 2,
            iteration: 0,
        };
        let a = counterfactual_once(&fx.image, &fx.image, 5.0, &cfg, &fx.models(), &fx.schedule, &ctx)
            .unwrap();
        let b = counterfactual_once(&fx.image, &fx.image, 5.0, &cfg, &fx.models(), &fx.schedule, &ctx)
            .unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn single_iteration_loop_degenerates_to_counterfactual_once() {
        let fx = Fixture::new();
        let cfg = fx.config(4, 1);
        let record = diff_ice(&fx.image, &cfg, &fx.models(), &fx.scoring(), &fx.schedule, 21, 3)
            .unwrap();
        let ctx = RngContext {
            master_seed: 21,
            image_id: 3,
            iteration: 0,
        };
        let direct =
            counterfactual_once(&fx.image, &fx.image, 5.0, &cfg, &fx.models(), &fx.schedule, &ctx)
                .unwrap();
        assert_eq!(record.iterations.len(), 1);
        assert_eq!(record.final_image().data(), direct.data());
    }

    #[test]
    fn iterations_stay_anchored_to_the_original() {
        let fx = Fixture::new();
        let cfg = fx.config(3, 3);
        let record = diff_ice(&fx.image, &cfg, &fx.models(), &fx.scoring(), &fx.schedule, 31, 4)
            .unwrap();
        let expected = hash_image(&fx.image);
        assert_eq!(record.scores.len(), 3);
        for s in &record.scores {
            assert_eq!(s.anchor_hash, expected);
        }
    }

    #[test]
    fn lambda_only_runs_agree_when_classifier_weight_is_zero() {
        let fx = Fixture::new();
        let t = 6;
        let feat_orig = fx.feat_guid.extract(&fx.image).unwrap();
        let joint = counterfactual_grad(
            &fx.image, t, GradMode::Denoised, &fx.models(), &fx.schedule,
            &feat_orig, CLASS_SP, 0.0, 2.0,
        )
        .unwrap();
        let p_only = counterfactual_grad(
            &fx.image, t, GradMode::Denoised, &fx.models(), &fx.schedule,
            &feat_orig, CLASS_SP, 0.0, 2.0,
        )
        .unwrap();
        let cos = cosine_similarity(&joint.grad, &p_only.grad);
        assert!(cos > 0.999, "cos = {cos}");
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let fx = Fixture::new();
        let bad_tau = GuidanceConfig { tau: 0, ..GuidanceConfig::default() };
        assert!(bad_tau.validate(fx.schedule.len()).is_err());
        let big_tau = GuidanceConfig { tau: 1000, ..GuidanceConfig::default() };
        assert!(big_tau.validate(fx.schedule.len()).is_err());
        let neg = GuidanceConfig { lambda_p: -1.0, ..GuidanceConfig::default() };
        assert!(neg.validate(fx.schedule.len()).is_err());
        let zero_l = GuidanceConfig { iterations: 0, ..GuidanceConfig::default() };
        assert!(zero_l.validate(fx.schedule.len()).is_err());
    }
}
