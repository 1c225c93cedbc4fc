//! Forward corruption, one-step denoised prediction, reverse transitions,
//! and the small epsilon-prediction U-Net with its training loop.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    conv_forward, sinusoidal_embedding_batch, Adam, Bound, Conv2d, Linear,
};
use crate::rng::derive_rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// `x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_sample<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    schedule.check_range(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "forward_sample",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let ab = schedule.alpha_bar(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    // Accumulate in f64: the only rounding left is the final cast.
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| T::from_f64(sa * x.to_f64() + sn * e.to_f64()))
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Solve the forward kernel for x0:
/// `x0_hat = (x_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t)`.
pub fn one_step_denoise<T: Scalar>(
    x_t: &Tensor<T>,
    t: usize,
    eps_hat: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    schedule.check_range(t)?;
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch {
            op: "one_step_denoise",
            lhs: x_t.shape().to_vec(),
            rhs: eps_hat.shape().to_vec(),
        });
    }
    let ab = schedule.alpha_bar(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| T::from_f64((x.to_f64() - sn * e.to_f64()) / sa))
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Reverse-transition mean from the predicted noise:
/// `mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(1 - beta_t)`.
pub fn predict_mu<T: Scalar>(
    x_t: &Tensor<T>,
    t: usize,
    eps_hat: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    schedule.check_range(t)?;
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch {
            op: "predict_mu",
            lhs: x_t.shape().to_vec(),
            rhs: eps_hat.shape().to_vec(),
        });
    }
    let beta = schedule.beta(t);
    let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
    let coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| T::from_f64(inv_sqrt_alpha * (x.to_f64() - coef * e.to_f64())))
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Draw standard-normal noise shaped like `like`.
pub fn noise_like<T: Scalar>(like: &Tensor<T>, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::randn(like.shape(), rng)
}

/// One unguided reverse transition; no noise is added at t = 1.
pub fn reverse_step(
    x_t: &Tensor<f32>,
    t: usize,
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor<f32>> {
    let eps_hat = model.predict_noise(x_t, schedule.original_step(t))?;
    let mu = predict_mu(x_t, t, &eps_hat, schedule)?;
    Ok(shifted_gaussian_sample(&mu, t, schedule, rng))
}

/// Sample `N(mu, sigma2_t I)`, deterministic (the mean itself) at t = 1.
///
/// Exposed so the guided path can reuse the exact same rng consumption: with
/// a zero shift it reproduces [`reverse_step`] bit for bit.
pub fn shifted_gaussian_sample(
    mu: &Tensor<f32>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Tensor<f32> {
    if t <= 1 {
        return mu.clone();
    }
    let sigma = schedule.posterior_variance(t).sqrt() as f32;
    let mut out = mu.clone();
    for v in out.data_mut() {
        let z: f32 = rng.sample(StandardNormal);
        *v += sigma * z;
    }
    out
}

/// Unguided ancestral sampling from pure noise down to a clean image.
/// The output is clamped to [-1, 1] only at the very end.
pub fn sample_unconditional(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    shape: &[usize],
    rng: &mut impl Rng,
) -> Result<Tensor<f32>> {
    let mut x = Tensor::randn(shape, rng);
    for t in (1..=schedule.len()).rev() {
        x = reverse_step(&x, t, model, schedule, rng)?;
    }
    Ok(x.map(|v| v.clamp(-1.0, 1.0)))
}

/// Channel widths and embedding size of the denoiser U-Net.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserArch {
    pub base_channels: usize,
    pub time_dim: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        DenoiserArch {
            base_channels: 8,
            time_dim: 32,
        }
    }
}

/// Two-downsample U-Net predicting the corruption noise, conditioned on the
/// timestep through a per-stage embedding projection. The output head is
/// zero-initialized, so an untrained model predicts exactly zero noise.
#[derive(Debug)]
pub struct DenoiserModel<T: Scalar = f32> {
    pub arch: DenoiserArch,
    stem: Conv2d<T>,
    enc1: Conv2d<T>,
    enc2: Conv2d<T>,
    mid1: Conv2d<T>,
    mid2: Conv2d<T>,
    dec2: Conv2d<T>,
    dec1: Conv2d<T>,
    out: Conv2d<T>,
    t_enc1: Linear<T>,
    t_enc2: Linear<T>,
    t_mid1: Linear<T>,
    t_mid2: Linear<T>,
    t_dec2: Linear<T>,
    t_dec1: Linear<T>,
    /// Forward passes recorded with a gradient-participating input; the
    /// efficient guidance mode must keep this at zero.
    grad_forwards: AtomicU64,
}

impl<T: Scalar> Clone for DenoiserModel<T> {
    fn clone(&self) -> Self {
        DenoiserModel {
            arch: self.arch,
            stem: self.stem.clone(),
            enc1: self.enc1.clone(),
            enc2: self.enc2.clone(),
            mid1: self.mid1.clone(),
            mid2: self.mid2.clone(),
            dec2: self.dec2.clone(),
            dec1: self.dec1.clone(),
            out: self.out.clone(),
            t_enc1: self.t_enc1.clone(),
            t_enc2: self.t_enc2.clone(),
            t_mid1: self.t_mid1.clone(),
            t_mid2: self.t_mid2.clone(),
            t_dec2: self.t_dec2.clone(),
            t_dec1: self.t_dec1.clone(),
            grad_forwards: AtomicU64::new(0),
        }
    }
}

pub struct DenoiserBinding {
    stem: Bound,
    enc1: Bound,
    enc2: Bound,
    mid1: Bound,
    mid2: Bound,
    dec2: Bound,
    dec1: Bound,
    out: Bound,
    t_enc1: Bound,
    t_enc2: Bound,
    t_mid1: Bound,
    t_mid2: Bound,
    t_dec2: Bound,
    t_dec1: Bound,
}

impl DenoiserBinding {
    /// Vars in the same order as [`DenoiserModel::params`].
    pub fn vars(&self) -> Vec<Var> {
        [
            self.stem, self.enc1, self.enc2, self.mid1, self.mid2, self.dec2, self.dec1,
            self.out, self.t_enc1, self.t_enc2, self.t_mid1, self.t_mid2, self.t_dec2,
            self.t_dec1,
        ]
        .iter()
        .flat_map(|b| [b.w, b.b])
        .collect()
    }
}

impl<T: Scalar> DenoiserModel<T> {
    pub fn init(arch: DenoiserArch, rng: &mut impl Rng) -> Self {
        let c = arch.base_channels;
        let e = arch.time_dim;
        DenoiserModel {
            arch,
            stem: Conv2d::init(1, c, 3, 1, 1, rng),
            enc1: Conv2d::init(c, c, 3, 1, 1, rng),
            enc2: Conv2d::init(c, 2 * c, 3, 1, 1, rng),
            mid1: Conv2d::init(2 * c, 4 * c, 3, 1, 1, rng),
            mid2: Conv2d::init(4 * c, 4 * c, 3, 1, 1, rng),
            dec2: Conv2d::init(6 * c, 2 * c, 3, 1, 1, rng),
            dec1: Conv2d::init(3 * c, c, 3, 1, 1, rng),
            out: Conv2d::zeros(c, 1, 3, 1, 1),
            t_enc1: Linear::init(e, c, rng),
            t_enc2: Linear::init(e, 2 * c, rng),
            t_mid1: Linear::init(e, 4 * c, rng),
            t_mid2: Linear::init(e, 4 * c, rng),
            t_dec2: Linear::init(e, 2 * c, rng),
            t_dec1: Linear::init(e, c, rng),
            grad_forwards: AtomicU64::new(0),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let layers: [(&'static str, &Conv2d<T>); 8] = [
            ("stem", &self.stem),
            ("enc1", &self.enc1),
            ("enc2", &self.enc2),
            ("mid1", &self.mid1),
            ("mid2", &self.mid2),
            ("dec2", &self.dec2),
            ("dec1", &self.dec1),
            ("out", &self.out),
        ];
        let tlayers: [(&'static str, &Linear<T>); 6] = [
            ("t_enc1", &self.t_enc1),
            ("t_enc2", &self.t_enc2),
            ("t_mid1", &self.t_mid1),
            ("t_mid2", &self.t_mid2),
            ("t_dec2", &self.t_dec2),
            ("t_dec1", &self.t_dec1),
        ];
        let mut out = Vec::new();
        for (_, l) in layers {
            out.push(("", &l.weight));
            out.push(("", &l.bias));
        }
        for (_, l) in tlayers {
            out.push(("", &l.weight));
            out.push(("", &l.bias));
        }
        // Names assigned positionally to keep this list flat.
        let names = denoiser_param_names();
        out.into_iter()
            .enumerate()
            .map(|(i, (_, t))| (names[i], t))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let names = denoiser_param_names();
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for l in [
            &mut self.stem,
            &mut self.enc1,
            &mut self.enc2,
            &mut self.mid1,
            &mut self.mid2,
            &mut self.dec2,
            &mut self.dec1,
            &mut self.out,
        ] {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for l in [
            &mut self.t_enc1,
            &mut self.t_enc2,
            &mut self.t_mid1,
            &mut self.t_mid2,
            &mut self.t_dec2,
            &mut self.t_dec1,
        ] {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        names.iter().copied().zip(out).collect()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> DenoiserBinding {
        DenoiserBinding {
            stem: self.stem.bind(tape, trainable),
            enc1: self.enc1.bind(tape, trainable),
            enc2: self.enc2.bind(tape, trainable),
            mid1: self.mid1.bind(tape, trainable),
            mid2: self.mid2.bind(tape, trainable),
            dec2: self.dec2.bind(tape, trainable),
            dec1: self.dec1.bind(tape, trainable),
            out: self.out.bind(tape, trainable),
            t_enc1: self.t_enc1.bind(tape, trainable),
            t_enc2: self.t_enc2.bind(tape, trainable),
            t_mid1: self.t_mid1.bind(tape, trainable),
            t_mid2: self.t_mid2.bind(tape, trainable),
            t_dec2: self.t_dec2.bind(tape, trainable),
            t_dec1: self.t_dec1.bind(tape, trainable),
        }
    }

    /// Forward pass on an existing tape. `t_orig` holds per-sample original
    /// (training-scale) timesteps.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        binding: &DenoiserBinding,
        x: Var,
        t_orig: &[usize],
    ) -> Result<Var> {
        if tape.grad_participating(x) {
            self.grad_forwards.fetch_add(1, Ordering::Relaxed);
        }
        let n = tape.shape(x)[0];
        if t_orig.len() != n {
            return Err(Error::invalid(format!(
                "denoiser got {} timesteps for a batch of {n}",
                t_orig.len()
            )));
        }
        let emb = sinusoidal_embedding_batch::<T>(t_orig, self.arch.time_dim);
        let emb = tape.constant(&emb);

        let add_t = |tape: &mut Tape<T>, h: Var, proj: &Bound| -> Result<Var> {
            let tb = tape.matmul(emb, proj.w)?;
            let tb = tape.add(tb, proj.b)?;
            let c = tape.shape(tb)[1];
            let tb = tape.reshape(tb, vec![n, c, 1, 1])?;
            tape.add(h, tb)
        };

        let e0 = conv_forward(tape, x, &binding.stem, 1, 1)?;
        let e0 = tape.relu(e0)?;

        let e1 = conv_forward(tape, e0, &binding.enc1, 1, 1)?;
        let e1 = add_t(tape, e1, &binding.t_enc1)?;
        let e1 = tape.relu(e1)?;

        let p1 = tape.avg_pool2(e1)?;
        let e2 = conv_forward(tape, p1, &binding.enc2, 1, 1)?;
        let e2 = add_t(tape, e2, &binding.t_enc2)?;
        let e2 = tape.relu(e2)?;

        let p2 = tape.avg_pool2(e2)?;
        let m1 = conv_forward(tape, p2, &binding.mid1, 1, 1)?;
        let m1 = add_t(tape, m1, &binding.t_mid1)?;
        let m1 = tape.relu(m1)?;

        let m2 = conv_forward(tape, m1, &binding.mid2, 1, 1)?;
        let m2 = add_t(tape, m2, &binding.t_mid2)?;
        let m2 = tape.relu(m2)?;

        let u2 = tape.upsample_nearest2(m2)?;
        let cat2 = tape.concat(u2, e2, 1)?;
        let d2 = conv_forward(tape, cat2, &binding.dec2, 1, 1)?;
        let d2 = add_t(tape, d2, &binding.t_dec2)?;
        let d2 = tape.relu(d2)?;

        let u1 = tape.upsample_nearest2(d2)?;
        let cat1 = tape.concat(u1, e1, 1)?;
        let d1 = conv_forward(tape, cat1, &binding.dec1, 1, 1)?;
        let d1 = add_t(tape, d1, &binding.t_dec1)?;
        let d1 = tape.relu(d1)?;

        conv_forward(tape, d1, &binding.out, 1, 1)
    }

    /// Number of forward passes that participated in a gradient graph.
    pub fn grad_forward_count(&self) -> u64 {
        self.grad_forwards.load(Ordering::Relaxed)
    }

    pub fn cast<U: Scalar>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            arch: self.arch,
            stem: self.stem.cast(),
            enc1: self.enc1.cast(),
            enc2: self.enc2.cast(),
            mid1: self.mid1.cast(),
            mid2: self.mid2.cast(),
            dec2: self.dec2.cast(),
            dec1: self.dec1.cast(),
            out: self.out.cast(),
            t_enc1: self.t_enc1.cast(),
            t_enc2: self.t_enc2.cast(),
            t_mid1: self.t_mid1.cast(),
            t_mid2: self.t_mid2.cast(),
            t_dec2: self.t_dec2.cast(),
            t_dec1: self.t_dec1.cast(),
            grad_forwards: AtomicU64::new(0),
        }
    }
}

impl DenoiserModel<f32> {
    /// Plain inference: predict the noise in a single image [1, H, W].
    pub fn predict_noise(&self, x_t: &Tensor<f32>, t_orig: usize) -> Result<Tensor<f32>> {
        let (h, w) = (x_t.shape()[1], x_t.shape()[2]);
        let batch = x_t.reshaped(vec![1, 1, h, w])?;
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false);
        let xv = tape.constant(&batch);
        let out = self.forward_on(&mut tape, &binding, xv, &[t_orig])?;
        tape.value(out).reshaped(vec![1, h, w])
    }
}

/// Hyperparameters for denoiser training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub arch: DenoiserArch,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        DenoiserTrainConfig {
            iterations: 1600,
            batch_size: 8,
            learning_rate: 2e-3,
            weight_decay: 0.0,
            arch: DenoiserArch::default(),
        }
    }
}

/// Train the epsilon-prediction objective: mean squared error between the
/// drawn corruption noise and the model's prediction at a random timestep.
///
/// Returns the model and the per-iteration loss trace.
pub fn train_denoiser(
    dataset: &[Tensor<f32>],
    schedule: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
    seed: u64,
) -> Result<(DenoiserModel<f32>, Vec<(usize, f32)>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("denoiser training set".into()));
    }
    let (h, w) = (dataset[0].shape()[1], dataset[0].shape()[2]);
    let mut init_rng = derive_rng(seed, "denoiser-init", &[]);
    let mut model = DenoiserModel::init(cfg.arch, &mut init_rng);
    let n_params = model.params().len();
    let mut opt = Adam::new(cfg.learning_rate, cfg.weight_decay, n_params);
    let mut trace = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let mut rng = derive_rng(seed, "denoiser-iter", &[iter as u64]);
        let bs = cfg.batch_size.min(dataset.len());
        let mut xs = Vec::with_capacity(bs * h * w);
        let mut eps = Vec::with_capacity(bs * h * w);
        let mut ts = Vec::with_capacity(bs);
        for _ in 0..bs {
            let idx = rng.gen_range(0..dataset.len());
            let t = rng.gen_range(1..=schedule.len());
            let noise = Tensor::<f32>::randn(dataset[idx].shape(), &mut rng);
            let x_t = forward_sample(&dataset[idx], t, &noise, schedule)?;
            xs.extend_from_slice(x_t.data());
            eps.extend_from_slice(noise.data());
            ts.push(schedule.original_step(t));
        }
        let x_batch = Tensor::new(vec![bs, 1, h, w], xs)?;
        let eps_batch = Tensor::new(vec![bs, 1, h, w], eps)?;

        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, true);
        let xv = tape.constant(&x_batch);
        let pred = model.forward_on(&mut tape, &binding, xv, &ts)?;
        let target = tape.constant(&eps_batch);
        let diff = tape.sub(pred, target)?;
        let sq = tape.square(diff)?;
        let loss = tape.mean(sq)?;

        let loss_val = tape.data(loss)[0];
        if !loss_val.is_finite() {
            return Err(Error::Diverged { iteration: iter });
        }
        trace.push((iter, loss_val));

        tape.backward(loss)?;
        opt.next_step();
        let vars = binding.vars();
        for (pi, ((_, param), var)) in model.params_mut().into_iter().zip(vars).enumerate() {
            if let Some(g) = tape.grad(var) {
                opt.update(pi, param, g);
            }
        }
    }
    Ok((model, trace))
}

fn denoiser_param_names() -> [&'static str; 28] {
    [
        "stem.w", "stem.b", "enc1.w", "enc1.b", "enc2.w", "enc2.b", "mid1.w", "mid1.b",
        "mid2.w", "mid2.b", "dec2.w", "dec2.b", "dec1.w", "dec1.b", "out.w", "out.b",
        "t_enc1.w", "t_enc1.b", "t_enc2.w", "t_enc2.b", "t_mid1.w", "t_mid1.b", "t_mid2.w",
        "t_mid2.b", "t_dec2.w", "t_dec2.b", "t_dec1.w", "t_dec1.b",
    ]
}

/// Exponentially smoothed loss, for the "training made progress" check.
pub fn smoothed_loss(trace: &[(usize, f32)], alpha: f32) -> Vec<f32> {
    let mut out = Vec::with_capacity(trace.len());
    let mut acc = None;
    for &(_, l) in trace {
        let next = match acc {
            None => l,
            Some(prev) => alpha * l + (1.0 - alpha) * prev,
        };
        out.push(next);
        acc = Some(next);
    }
    out
}
