//! The guiding quality classifier (segmenter + predictor), the independent
//! oracle with per-structure heads, and the frozen feature extractors used
//! by the perceptual loss and the evaluation metrics.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{cast_tensor, conv_forward, global_mean_pool, linear_forward, Adam, Bound, Conv2d, Linear};
use crate::rng::derive_rng;
use crate::synth::{Label, LoadedSample, IMG_H, IMG_W, NUM_MASK_CLASSES};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Floor inside log() compositions; keeps guidance losses finite when a
/// probability saturates in f32.
pub const PROB_EPS: f64 = 1e-12;

/// Class indices of the two-way plane-quality decision.
pub const CLASS_NSP: usize = 0;
pub const CLASS_SP: usize = 1;

pub fn stack_images(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    if images.is_empty() {
        return Err(Error::EmptyDataset("image batch".into()));
    }
    let (h, w) = (images[0].shape()[1], images[0].shape()[2]);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.shape() != [1, h, w] {
            return Err(Error::ShapeMismatch {
                op: "stack_images",
                lhs: vec![1, h, w],
                rhs: img.shape().to_vec(),
            });
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), 1, h, w], data)
}

fn check_image_shape(x: &Tensor<f32>) -> Result<()> {
    if x.shape() != [1, IMG_H, IMG_W] {
        return Err(Error::ShapeMismatch {
            op: "classify",
            lhs: vec![1, IMG_H, IMG_W],
            rhs: x.shape().to_vec(),
        });
    }
    Ok(())
}

// ---- segmenter ----

/// Three-level U-Net (8/16/32 channels) emitting per-pixel logits over
/// {background, skull, TH, CSP, FP}.
#[derive(Debug, Clone)]
pub struct SegmenterModel<T: Scalar = f32> {
    stem: Conv2d<T>,
    enc1: Conv2d<T>,
    enc2: Conv2d<T>,
    mid1: Conv2d<T>,
    mid2: Conv2d<T>,
    dec2: Conv2d<T>,
    dec1: Conv2d<T>,
    out: Conv2d<T>,
}

pub struct SegmenterBinding {
    layers: [Bound; 8],
}

impl<T: Scalar> SegmenterModel<T> {
    pub fn init(rng: &mut impl Rng) -> Self {
        let c = 8;
        SegmenterModel {
            stem: Conv2d::init(1, c, 3, 1, 1, rng),
            enc1: Conv2d::init(c, c, 3, 1, 1, rng),
            enc2: Conv2d::init(c, 2 * c, 3, 1, 1, rng),
            mid1: Conv2d::init(2 * c, 4 * c, 3, 1, 1, rng),
            mid2: Conv2d::init(4 * c, 4 * c, 3, 1, 1, rng),
            dec2: Conv2d::init(6 * c, 2 * c, 3, 1, 1, rng),
            dec1: Conv2d::init(3 * c, c, 3, 1, 1, rng),
            out: Conv2d::init(c, NUM_MASK_CLASSES, 3, 1, 1, rng),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let layers = [
            &self.stem, &self.enc1, &self.enc2, &self.mid1, &self.mid2, &self.dec2,
            &self.dec1, &self.out,
        ];
        SEG_PARAM_NAMES
            .iter()
            .copied()
            .zip(layers.iter().flat_map(|l| [&l.weight, &l.bias]))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut v: Vec<&mut Tensor<T>> = Vec::new();
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
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        SEG_PARAM_NAMES.iter().copied().zip(v).collect()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> SegmenterBinding {
        SegmenterBinding {
            layers: [
                self.stem.bind(tape, trainable),
                self.enc1.bind(tape, trainable),
                self.enc2.bind(tape, trainable),
                self.mid1.bind(tape, trainable),
                self.mid2.bind(tape, trainable),
                self.dec2.bind(tape, trainable),
                self.dec1.bind(tape, trainable),
                self.out.bind(tape, trainable),
            ],
        }
    }

    /// Per-pixel logits [N, 5, H, W].
    pub fn logits_on(
        &self,
        tape: &mut Tape<T>,
        b: &SegmenterBinding,
        x: Var,
    ) -> Result<Var> {
        let [stem, enc1, enc2, mid1, mid2, dec2, dec1, out] = &b.layers;
        let e0 = conv_forward(tape, x, stem, 1, 1)?;
        let e0 = tape.relu(e0)?;
        let e1 = conv_forward(tape, e0, enc1, 1, 1)?;
        let e1 = tape.relu(e1)?;
        let p1 = tape.avg_pool2(e1)?;
        let e2 = conv_forward(tape, p1, enc2, 1, 1)?;
        let e2 = tape.relu(e2)?;
        let p2 = tape.avg_pool2(e2)?;
        let m1 = conv_forward(tape, p2, mid1, 1, 1)?;
        let m1 = tape.relu(m1)?;
        let m2 = conv_forward(tape, m1, mid2, 1, 1)?;
        let m2 = tape.relu(m2)?;
        let u2 = tape.upsample_nearest2(m2)?;
        let cat2 = tape.concat(u2, e2, 1)?;
        let d2 = conv_forward(tape, cat2, dec2, 1, 1)?;
        let d2 = tape.relu(d2)?;
        let u1 = tape.upsample_nearest2(d2)?;
        let cat1 = tape.concat(u1, e1, 1)?;
        let d1 = conv_forward(tape, cat1, dec1, 1, 1)?;
        let d1 = tape.relu(d1)?;
        conv_forward(tape, d1, out, 1, 1)
    }

    pub fn cast<U: Scalar>(&self) -> SegmenterModel<U> {
        SegmenterModel {
            stem: self.stem.cast(),
            enc1: self.enc1.cast(),
            enc2: self.enc2.cast(),
            mid1: self.mid1.cast(),
            mid2: self.mid2.cast(),
            dec2: self.dec2.cast(),
            dec1: self.dec1.cast(),
            out: self.out.cast(),
        }
    }
}

impl SegmenterModel<f32> {
    /// Argmax segmentation of a single image.
    pub fn segment(&self, x: &Tensor<f32>) -> Result<Vec<u8>> {
        check_image_shape(x)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let xv = tape.constant(&x.reshaped(vec![1, 1, IMG_H, IMG_W])?);
        let logits = self.logits_on(&mut tape, &b, xv)?;
        let data = tape.data(logits);
        let hw = IMG_H * IMG_W;
        let mut mask = vec![0u8; hw];
        for (p, m) in mask.iter_mut().enumerate() {
            let mut best = 0;
            for c in 1..NUM_MASK_CLASSES {
                if data[c * hw + p] > data[best * hw + p] {
                    best = c;
                }
            }
            *m = best as u8;
        }
        Ok(mask)
    }
}

// ---- predictor ----

/// Four-layer convnet over the 6-channel (5 segmentation probability maps +
/// image) input, emitting (NSP, SP) logits. The final layer starts at zero
/// so an untrained classifier is exactly uninformative.
#[derive(Debug, Clone)]
pub struct PredictorModel<T: Scalar = f32> {
    c1: Conv2d<T>,
    c2: Conv2d<T>,
    c3: Conv2d<T>,
    fc: Linear<T>,
}

pub struct PredictorBinding {
    c1: Bound,
    c2: Bound,
    c3: Bound,
    fc: Bound,
}

impl<T: Scalar> PredictorModel<T> {
    pub fn init(rng: &mut impl Rng) -> Self {
        PredictorModel {
            c1: Conv2d::init(NUM_MASK_CLASSES + 1, 8, 3, 1, 1, rng),
            c2: Conv2d::init(8, 16, 3, 1, 1, rng),
            c3: Conv2d::init(16, 16, 3, 1, 1, rng),
            fc: Linear::zeros(16, 2),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("c1.w", &self.c1.weight),
            ("c1.b", &self.c1.bias),
            ("c2.w", &self.c2.weight),
            ("c2.b", &self.c2.bias),
            ("c3.w", &self.c3.weight),
            ("c3.b", &self.c3.bias),
            ("fc.w", &self.fc.weight),
            ("fc.b", &self.fc.bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("c1.w", &mut self.c1.weight),
            ("c1.b", &mut self.c1.bias),
            ("c2.w", &mut self.c2.weight),
            ("c2.b", &mut self.c2.bias),
            ("c3.w", &mut self.c3.weight),
            ("c3.b", &mut self.c3.bias),
            ("fc.w", &mut self.fc.weight),
            ("fc.b", &mut self.fc.bias),
        ]
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> PredictorBinding {
        PredictorBinding {
            c1: self.c1.bind(tape, trainable),
            c2: self.c2.bind(tape, trainable),
            c3: self.c3.bind(tape, trainable),
            fc: self.fc.bind(tape, trainable),
        }
    }

    /// (NSP, SP) logits [N, 2] from the 6-channel input.
    pub fn logits_on(&self, tape: &mut Tape<T>, b: &PredictorBinding, x6: Var) -> Result<Var> {
        let h = conv_forward(tape, x6, &b.c1, 1, 1)?;
        let h = tape.relu(h)?;
        let h = tape.avg_pool2(h)?;
        let h = conv_forward(tape, h, &b.c2, 1, 1)?;
        let h = tape.relu(h)?;
        let h = tape.avg_pool2(h)?;
        let h = conv_forward(tape, h, &b.c3, 1, 1)?;
        let h = tape.relu(h)?;
        let pooled = global_mean_pool(tape, h)?;
        linear_forward(tape, pooled, &b.fc)
    }

    pub fn cast<U: Scalar>(&self) -> PredictorModel<U> {
        PredictorModel {
            c1: self.c1.cast(),
            c2: self.c2.cast(),
            c3: self.c3.cast(),
            fc: self.fc.cast(),
        }
    }
}

// ---- composite classifier ----

/// The guiding classifier: segmentation probabilities and the image are
/// channel-concatenated and scored by the predictor. The logits carry a
/// post-hoc temperature fitted on validation data, so confidences (and the
/// gradients guidance takes through them) are calibrated rather than
/// saturated.
#[derive(Debug, Clone)]
pub struct QualityClassifier<T: Scalar = f32> {
    pub segmenter: SegmenterModel<T>,
    pub predictor: PredictorModel<T>,
    /// Softmax temperature as a 1-element tensor so it rides along in
    /// checkpoints. Values above 1 soften the confidence surface.
    pub temperature: Tensor<T>,
}

pub struct ClassifierBinding {
    pub seg: SegmenterBinding,
    pub pred: PredictorBinding,
}

impl<T: Scalar> QualityClassifier<T> {
    pub fn init(rng: &mut impl Rng) -> Self {
        QualityClassifier {
            segmenter: SegmenterModel::init(rng),
            predictor: PredictorModel::init(rng),
            temperature: Tensor::full(&[1], T::ONE),
        }
    }

    pub fn temperature_value(&self) -> f64 {
        self.temperature.data()[0].to_f64()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ClassifierBinding {
        ClassifierBinding {
            seg: self.segmenter.bind(tape, trainable),
            pred: self.predictor.bind(tape, trainable),
        }
    }

    /// Differentiable end-to-end calibrated logits [N, 2] from a batch var
    /// [N, 1, H, W].
    pub fn logits_on(&self, tape: &mut Tape<T>, b: &ClassifierBinding, x: Var) -> Result<Var> {
        let seg_logits = self.segmenter.logits_on(tape, &b.seg, x)?;
        let seg_probs = tape.softmax(seg_logits, 1)?;
        let joint = tape.concat(seg_probs, x, 1)?;
        let raw = self.predictor.logits_on(tape, &b.pred, joint)?;
        tape.scale(raw, 1.0 / self.temperature_value())
    }

    /// `-log p_target`, the classification loss used for guidance.
    pub fn nll_on(
        &self,
        tape: &mut Tape<T>,
        b: &ClassifierBinding,
        x: Var,
        target: usize,
    ) -> Result<Var> {
        let logits = self.logits_on(tape, b, x)?;
        let probs = tape.softmax(logits, 1)?;
        let n = tape.shape(probs)[0];
        let mut onehot = vec![T::ZERO; n * 2];
        for row in 0..n {
            onehot[row * 2 + target] = T::ONE;
        }
        let oh = tape.constant(&Tensor::new(vec![n, 2], onehot)?);
        let picked = tape.mul(probs, oh)?;
        let p = tape.sum(picked, None)?;
        let p = tape.add_scalar(p, PROB_EPS)?;
        let lp = tape.log(p)?;
        tape.scale(lp, -1.0)
    }

    pub fn cast<U: Scalar>(&self) -> QualityClassifier<U> {
        QualityClassifier {
            segmenter: self.segmenter.cast(),
            predictor: self.predictor.cast(),
            temperature: cast_tensor(&self.temperature),
        }
    }
}

impl QualityClassifier<f32> {
    /// SP probability plus the argmax segmentation, for interpretability.
    pub fn classify(&self, x: &Tensor<f32>) -> Result<(f64, Vec<u8>)> {
        check_image_shape(x)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let xv = tape.constant(&x.reshaped(vec![1, 1, IMG_H, IMG_W])?);
        let logits = self.logits_on(&mut tape, &b, xv)?;
        let l = tape.data(logits);
        let (l0, l1) = (l[CLASS_NSP] as f64, l[CLASS_SP] as f64);
        let m = l0.max(l1);
        let p_sp = ((l1 - m).exp()) / ((l0 - m).exp() + (l1 - m).exp());
        let seg = self.segmenter.segment(x)?;
        Ok((p_sp, seg))
    }

    pub fn predicted_label(&self, x: &Tensor<f32>) -> Result<Label> {
        let (p_sp, _) = self.classify(x)?;
        Ok(if p_sp >= 0.5 { Label::Sp } else { Label::Nsp })
    }
}

// ---- oracle ----

/// Independent scorer, never used for guidance: a single trunk with an
/// overall head plus one head per structure, all sigmoid-bounded.
#[derive(Debug, Clone)]
pub struct OracleModel<T: Scalar = f32> {
    c1: Conv2d<T>,
    c2: Conv2d<T>,
    c3: Conv2d<T>,
    trunk: Linear<T>,
    heads: [Linear<T>; 4], // overall, TH, CSP, FP
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleScores {
    pub overall: f64,
    pub th: f64,
    pub csp: f64,
    pub fp: f64,
}

pub struct OracleBinding {
    c1: Bound,
    c2: Bound,
    c3: Bound,
    trunk: Bound,
    heads: [Bound; 4],
}

impl<T: Scalar> OracleModel<T> {
    pub fn init(rng: &mut impl Rng) -> Self {
        OracleModel {
            c1: Conv2d::init(1, 10, 3, 1, 1, rng),
            c2: Conv2d::init(10, 20, 3, 1, 1, rng),
            c3: Conv2d::init(20, 20, 3, 1, 1, rng),
            trunk: Linear::init(20, 16, rng),
            heads: [
                Linear::init(16, 1, rng),
                Linear::init(16, 1, rng),
                Linear::init(16, 1, rng),
                Linear::init(16, 1, rng),
            ],
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v: Vec<&Tensor<T>> = Vec::new();
        for l in [&self.c1, &self.c2, &self.c3] {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v.push(&self.trunk.weight);
        v.push(&self.trunk.bias);
        for h in &self.heads {
            v.push(&h.weight);
            v.push(&h.bias);
        }
        ORACLE_PARAM_NAMES.iter().copied().zip(v).collect()
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut v: Vec<&mut Tensor<T>> = Vec::new();
        for l in [&mut self.c1, &mut self.c2, &mut self.c3] {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v.push(&mut self.trunk.weight);
        v.push(&mut self.trunk.bias);
        for h in &mut self.heads {
            v.push(&mut h.weight);
            v.push(&mut h.bias);
        }
        ORACLE_PARAM_NAMES.iter().copied().zip(v).collect()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> OracleBinding {
        OracleBinding {
            c1: self.c1.bind(tape, trainable),
            c2: self.c2.bind(tape, trainable),
            c3: self.c3.bind(tape, trainable),
            trunk: self.trunk.bind(tape, trainable),
            heads: [
                self.heads[0].bind(tape, trainable),
                self.heads[1].bind(tape, trainable),
                self.heads[2].bind(tape, trainable),
                self.heads[3].bind(tape, trainable),
            ],
        }
    }

    /// Sigmoid scores [N, 4] with columns (overall, TH, CSP, FP).
    pub fn scores_on(&self, tape: &mut Tape<T>, b: &OracleBinding, x: Var) -> Result<Var> {
        let h = conv_forward(tape, x, &b.c1, 1, 1)?;
        let h = tape.relu(h)?;
        let h = tape.avg_pool2(h)?;
        let h = conv_forward(tape, h, &b.c2, 1, 1)?;
        let h = tape.relu(h)?;
        let h = tape.avg_pool2(h)?;
        let h = conv_forward(tape, h, &b.c3, 1, 1)?;
        let h = tape.relu(h)?;
        let pooled = global_mean_pool(tape, h)?;
        let z = linear_forward(tape, pooled, &b.trunk)?;
        let z = tape.relu(z)?;
        let mut cols = Vec::with_capacity(4);
        for head in &b.heads {
            cols.push(linear_forward(tape, z, head)?);
        }
        let c01 = tape.concat(cols[0], cols[1], 1)?;
        let c23 = tape.concat(cols[2], cols[3], 1)?;
        let logits = tape.concat(c01, c23, 1)?;
        tape.sigmoid(logits)
    }

    pub fn cast<U: Scalar>(&self) -> OracleModel<U> {
        OracleModel {
            c1: self.c1.cast(),
            c2: self.c2.cast(),
            c3: self.c3.cast(),
            trunk: self.trunk.cast(),
            heads: [
                self.heads[0].cast(),
                self.heads[1].cast(),
                self.heads[2].cast(),
                self.heads[3].cast(),
            ],
        }
    }
}

impl OracleModel<f32> {
    pub fn score(&self, x: &Tensor<f32>) -> Result<OracleScores> {
        check_image_shape(x)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let xv = tape.constant(&x.reshaped(vec![1, 1, IMG_H, IMG_W])?);
        let s = self.scores_on(&mut tape, &b, xv)?;
        let d = tape.data(s);
        Ok(OracleScores {
            overall: d[0] as f64,
            th: d[1] as f64,
            csp: d[2] as f64,
            fp: d[3] as f64,
        })
    }
}

// ---- feature network ----

/// Small convolutional encoder to a fixed-length feature vector. Two
/// instances are trained with different seeds and augmentation noise: one
/// guides the perceptual loss, the other scores realism metrics.
#[derive(Debug, Clone)]
pub struct FeatureNet<T: Scalar = f32> {
    pub dim: usize,
    pub input_hw: (usize, usize),
    c1: Conv2d<T>,
    c2: Conv2d<T>,
    c3: Conv2d<T>,
    fc: Linear<T>,
}

pub struct FeatureBinding {
    c1: Bound,
    c2: Bound,
    c3: Bound,
    fc: Bound,
}

impl<T: Scalar> FeatureNet<T> {
    pub fn init(dim: usize, input_hw: (usize, usize), rng: &mut impl Rng) -> Self {
        // Three pooling halvings; at the default 28x36 the flattened trunk
        // is 16 channels on a 3x4 grid.
        let (h, w) = input_hw;
        let flat = 16 * (h / 8) * (w / 8);
        FeatureNet {
            dim,
            input_hw,
            c1: Conv2d::init(1, 8, 3, 1, 1, rng),
            c2: Conv2d::init(8, 16, 3, 1, 1, rng),
            c3: Conv2d::init(16, 16, 3, 1, 1, rng),
            fc: Linear::init(flat, dim, rng),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("c1.w", &self.c1.weight),
            ("c1.b", &self.c1.bias),
            ("c2.w", &self.c2.weight),
            ("c2.b", &self.c2.bias),
            ("c3.w", &self.c3.weight),
            ("c3.b", &self.c3.bias),
            ("fc.w", &self.fc.weight),
            ("fc.b", &self.fc.bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("c1.w", &mut self.c1.weight),
            ("c1.b", &mut self.c1.bias),
            ("c2.w", &mut self.c2.weight),
            ("c2.b", &mut self.c2.bias),
            ("c3.w", &mut self.c3.weight),
            ("c3.b", &mut self.c3.bias),
            ("fc.w", &mut self.fc.weight),
            ("fc.b", &mut self.fc.bias),
        ]
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> FeatureBinding {
        FeatureBinding {
            c1: self.c1.bind(tape, trainable),
            c2: self.c2.bind(tape, trainable),
            c3: self.c3.bind(tape, trainable),
            fc: self.fc.bind(tape, trainable),
        }
    }

    /// Feature rows [N, dim].
    pub fn features_on(&self, tape: &mut Tape<T>, b: &FeatureBinding, x: Var) -> Result<Var> {
        let h = conv_forward(tape, x, &b.c1, 1, 1)?;
        let h = tape.relu(h)?;
        let h = tape.avg_pool2(h)?;
        let h = conv_forward(tape, h, &b.c2, 1, 1)?;
        let h = tape.relu(h)?;
        let h = tape.avg_pool2(h)?;
        let h = conv_forward(tape, h, &b.c3, 1, 1)?;
        let h = tape.relu(h)?;
        let h = tape.avg_pool2(h)?;
        let shape = tape.shape(h).to_vec();
        let flat = tape.reshape(h, vec![shape[0], shape[1] * shape[2] * shape[3]])?;
        linear_forward(tape, flat, &b.fc)
    }

    pub fn cast<U: Scalar>(&self) -> FeatureNet<U> {
        FeatureNet {
            dim: self.dim,
            input_hw: self.input_hw,
            c1: self.c1.cast(),
            c2: self.c2.cast(),
            c3: self.c3.cast(),
            fc: self.fc.cast(),
        }
    }
}

impl FeatureNet<f32> {
    pub fn extract(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_image_shape(x)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let xv = tape.constant(&x.reshaped(vec![1, 1, IMG_H, IMG_W])?);
        let f = self.features_on(&mut tape, &b, xv)?;
        tape.value(f).reshaped(vec![self.dim])
    }
}

/// Cosine similarity with the documented 1e-12 norm floor.
pub fn cosine_similarity(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        dot += x as f64 * y as f64;
        na += (x as f64).powi(2);
        nb += (y as f64).powi(2);
    }
    dot / (na.sqrt().max(1e-12) * nb.sqrt().max(1e-12))
}

const SEG_PARAM_NAMES: [&str; 16] = [
    "stem.w", "stem.b", "enc1.w", "enc1.b", "enc2.w", "enc2.b", "mid1.w", "mid1.b",
    "mid2.w", "mid2.b", "dec2.w", "dec2.b", "dec1.w", "dec1.b", "out.w", "out.b",
];

const ORACLE_PARAM_NAMES: [&str; 16] = [
    "c1.w", "c1.b", "c2.w", "c2.b", "c3.w", "c3.b", "trunk.w", "trunk.b",
    "head_overall.w", "head_overall.b", "head_th.w", "head_th.b", "head_csp.w",
    "head_csp.b", "head_fp.w", "head_fp.b",
];

// ---- training ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Softens hard targets; bounds the trained logit scale, which in turn
    /// bounds the guidance gradients the classifier produces.
    pub label_smoothing: f64,
    /// Gaussian input noise during training; smooths the decision surface
    /// the guidance differentiates through.
    pub input_noise: f64,
}

impl Default for ModelTrainConfig {
    fn default() -> Self {
        ModelTrainConfig {
            iterations: 600,
            batch_size: 16,
            learning_rate: 2e-3,
            weight_decay: 0.0,
            label_smoothing: 0.1,
            input_noise: 0.0,
        }
    }
}

/// Per-class weights for the pixel cross-entropy; background dominates the
/// frame, so it is down-weighted.
const SEG_CLASS_WEIGHTS: [f64; NUM_MASK_CLASSES] = [0.2, 1.0, 2.0, 2.0, 2.0];

pub fn train_segmenter(
    samples: &[LoadedSample],
    cfg: &ModelTrainConfig,
    seed: u64,
) -> Result<(SegmenterModel<f32>, Vec<(usize, f32)>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("segmenter training set".into()));
    }
    let mut model = SegmenterModel::init(&mut derive_rng(seed, "segmenter-init", &[]));
    let n_params = model.params().len();
    let mut opt = Adam::new(cfg.learning_rate, cfg.weight_decay, n_params);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let hw = IMG_H * IMG_W;

    for iter in 0..cfg.iterations {
        let mut rng = derive_rng(seed, "segmenter-iter", &[iter as u64]);
        let bs = cfg.batch_size.min(samples.len());
        let mut imgs = Vec::with_capacity(bs);
        let mut weighted_onehot = vec![0.0f32; bs * NUM_MASK_CLASSES * hw];
        for bi in 0..bs {
            let idx = rng.gen_range(0..samples.len());
            imgs.push(&samples[idx].image);
            for (p, &cls) in samples[idx].mask.iter().enumerate() {
                weighted_onehot[(bi * NUM_MASK_CLASSES + cls as usize) * hw + p] =
                    SEG_CLASS_WEIGHTS[cls as usize] as f32;
            }
        }
        let batch = stack_images(&imgs)?;
        let targets = Tensor::new(vec![bs, NUM_MASK_CLASSES, IMG_H, IMG_W], weighted_onehot)?;

        let mut tape = Tape::new();
        let b = model.bind(&mut tape, true);
        let xv = tape.constant(&batch);
        let logits = model.logits_on(&mut tape, &b, xv)?;
        let probs = tape.softmax(logits, 1)?;
        let probs = tape.add_scalar(probs, PROB_EPS)?;
        let logp = tape.log(probs)?;
        let tv = tape.constant(&targets);
        let weighted = tape.mul(logp, tv)?;
        let total = tape.sum(weighted, None)?;
        let loss = tape.scale(total, -1.0 / (bs * hw) as f64)?;

        let loss_val = tape.data(loss)[0];
        if !loss_val.is_finite() {
            return Err(Error::Diverged { iteration: iter });
        }
        trace.push((iter, loss_val));
        tape.backward(loss)?;
        opt.next_step();
        let vars: Vec<Var> = b.layers.iter().flat_map(|l| [l.w, l.b]).collect();
        for (pi, ((_, param), var)) in model.params_mut().into_iter().zip(vars).enumerate() {
            if let Some(g) = tape.grad(var) {
                opt.update(pi, param, g);
            }
        }
    }
    Ok((model, trace))
}

/// Segmentation probabilities for one image under a frozen segmenter,
/// concatenated with the image into the predictor's 6-channel input.
pub fn predictor_input(segmenter: &SegmenterModel<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let b = segmenter.bind(&mut tape, false);
    let xv = tape.constant(&image.reshaped(vec![1, 1, IMG_H, IMG_W])?);
    let logits = segmenter.logits_on(&mut tape, &b, xv)?;
    let probs = tape.softmax(logits, 1)?;
    let p = tape.value(probs);
    let mut data = Vec::with_capacity((NUM_MASK_CLASSES + 1) * IMG_H * IMG_W);
    data.extend_from_slice(p.data());
    data.extend_from_slice(image.data());
    Tensor::new(vec![NUM_MASK_CLASSES + 1, IMG_H, IMG_W], data)
}

/// Train the predictor on class-balanced batches with the segmenter frozen;
/// its probability maps are precomputed once.
pub fn train_predictor(
    samples: &[LoadedSample],
    segmenter: &SegmenterModel<f32>,
    cfg: &ModelTrainConfig,
    seed: u64,
) -> Result<(PredictorModel<f32>, Vec<(usize, f32)>)> {
    let (sp_idx, nsp_idx) = crate::synth::split_by_label(samples);
    if sp_idx.is_empty() || nsp_idx.is_empty() {
        return Err(Error::EmptyDataset(
            "predictor training needs both SP and NSP samples".into(),
        ));
    }
    let inputs: Vec<Tensor<f32>> = samples
        .iter()
        .map(|s| predictor_input(segmenter, &s.image))
        .collect::<Result<_>>()?;

    let mut model = PredictorModel::init(&mut derive_rng(seed, "predictor-init", &[]));
    let n_params = model.params().len();
    let mut opt = Adam::new(cfg.learning_rate, cfg.weight_decay, n_params);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let c6 = NUM_MASK_CLASSES + 1;

    for iter in 0..cfg.iterations {
        let mut rng = derive_rng(seed, "predictor-iter", &[iter as u64]);
        let bs = cfg.batch_size.max(2);
        let mut data = Vec::with_capacity(bs * c6 * IMG_H * IMG_W);
        let mut onehot = vec![0.0f32; bs * 2];
        for bi in 0..bs {
            let (pool, class) = if bi % 2 == 0 {
                (&sp_idx, CLASS_SP)
            } else {
                (&nsp_idx, CLASS_NSP)
            };
            let idx = pool[rng.gen_range(0..pool.len())];
            if cfg.input_noise > 0.0 {
                let sigma = cfg.input_noise as f32;
                data.extend(inputs[idx].data().iter().map(|&v| {
                    let z: f32 = rng.sample(rand_distr::StandardNormal);
                    v + sigma * z
                }));
            } else {
                data.extend_from_slice(inputs[idx].data());
            }
            let s = cfg.label_smoothing as f32;
            onehot[bi * 2 + class] = 1.0 - s / 2.0;
            onehot[bi * 2 + (1 - class)] = s / 2.0;
        }
        let batch = Tensor::new(vec![bs, c6, IMG_H, IMG_W], data)?;
        let target = Tensor::new(vec![bs, 2], onehot)?;

        let mut tape = Tape::new();
        let b = model.bind(&mut tape, true);
        let xv = tape.constant(&batch);
        let logits = model.logits_on(&mut tape, &b, xv)?;
        let probs = tape.softmax(logits, 1)?;
        let probs = tape.add_scalar(probs, PROB_EPS)?;
        let logp = tape.log(probs)?;
        let tv = tape.constant(&target);
        let picked = tape.mul(logp, tv)?;
        let total = tape.sum(picked, None)?;
        let loss = tape.scale(total, -1.0 / bs as f64)?;

        let loss_val = tape.data(loss)[0];
        if !loss_val.is_finite() {
            return Err(Error::Diverged { iteration: iter });
        }
        trace.push((iter, loss_val));
        tape.backward(loss)?;
        opt.next_step();
        let vars = [b.c1, b.c2, b.c3, b.fc];
        let var_list: Vec<Var> = vars.iter().flat_map(|l| [l.w, l.b]).collect();
        for (pi, ((_, param), var)) in model.params_mut().into_iter().zip(var_list).enumerate() {
            if let Some(g) = tape.grad(var) {
                opt.update(pi, param, g);
            }
        }
    }
    Ok((model, trace))
}

/// Sequential recipe: segmenter first, then the predictor against the frozen
/// segmenter, then confidence calibration on held-out data.
pub fn train_classifier(
    samples: &[LoadedSample],
    val_samples: &[LoadedSample],
    seg_cfg: &ModelTrainConfig,
    pred_cfg: &ModelTrainConfig,
    seed: u64,
) -> Result<QualityClassifier<f32>> {
    let (segmenter, _) = train_segmenter(samples, seg_cfg, seed)?;
    let (predictor, _) = train_predictor(samples, &segmenter, pred_cfg, seed ^ 0x5eed)?;
    let mut classifier = QualityClassifier {
        segmenter,
        predictor,
        temperature: Tensor::full(&[1], 1.0),
    };
    let t = fit_temperature(&classifier, val_samples)?;
    classifier.temperature = Tensor::full(&[1], t as f32);
    Ok(classifier)
}

/// Temperature scaling: pick the T minimizing validation NLL over a fixed
/// log-spaced grid. With no validation data the temperature stays 1.
pub fn fit_temperature(
    classifier: &QualityClassifier<f32>,
    val_samples: &[LoadedSample],
) -> Result<f64> {
    if val_samples.is_empty() {
        return Ok(1.0);
    }
    let mut logits = Vec::with_capacity(val_samples.len());
    for s in val_samples {
        let mut tape = Tape::new();
        let b = classifier.bind(&mut tape, false);
        let xv = tape.constant(&s.image.reshaped(vec![1, 1, IMG_H, IMG_W])?);
        let seg_logits = classifier.segmenter.logits_on(&mut tape, &b.seg, xv)?;
        let seg_probs = tape.softmax(seg_logits, 1)?;
        let joint = tape.concat(seg_probs, xv, 1)?;
        let raw = classifier.predictor.logits_on(&mut tape, &b.pred, joint)?;
        let l = tape.data(raw);
        logits.push((
            l[CLASS_NSP] as f64,
            l[CLASS_SP] as f64,
            s.label == Label::Sp,
        ));
    }
    let nll_at = |t: f64| -> f64 {
        logits
            .iter()
            .map(|&(l0, l1, is_sp)| {
                let (a, b) = (l0 / t, l1 / t);
                let m = a.max(b);
                let lse = m + ((a - m).exp() + (b - m).exp()).ln();
                let target = if is_sp { b } else { a };
                lse - target
            })
            .sum()
    };
    let mut best = (1.0, nll_at(1.0));
    for i in 0..=64 {
        let t = (0.5f64.ln() + (16.0f64.ln() - 0.5f64.ln()) * i as f64 / 64.0).exp();
        let v = nll_at(t);
        if v < best.1 {
            best = (t, v);
        }
    }
    Ok(best.0)
}

/// Joint regression of the four oracle heads onto generator ground truth:
/// overall = SP label, structures = visibility-graded concept scores.
pub fn train_oracle(
    samples: &[LoadedSample],
    cfg: &ModelTrainConfig,
    seed: u64,
) -> Result<(OracleModel<f32>, Vec<(usize, f32)>)> {
    let (sp_idx, nsp_idx) = crate::synth::split_by_label(samples);
    if sp_idx.is_empty() || nsp_idx.is_empty() {
        return Err(Error::EmptyDataset(
            "oracle training needs both SP and NSP samples".into(),
        ));
    }
    let mut model = OracleModel::init(&mut derive_rng(seed, "oracle-init", &[]));
    let n_params = model.params().len();
    let mut opt = Adam::new(cfg.learning_rate, cfg.weight_decay, n_params);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let smooth = cfg.label_smoothing as f32;

    for iter in 0..cfg.iterations {
        let mut rng = derive_rng(seed, "oracle-iter", &[iter as u64]);
        let bs = cfg.batch_size.max(2);
        let mut imgs = Vec::with_capacity(bs);
        let mut targets = Vec::with_capacity(bs * 4);
        // Class-balanced batches keep the overall head calibrated around
        // the 0.5 confidence cut used by the oracle-validity metric.
        for bi in 0..bs {
            let pool = if bi % 2 == 0 { &sp_idx } else { &nsp_idx };
            let s = &samples[pool[rng.gen_range(0..pool.len())]];
            imgs.push(&s.image);
            let overall = if s.label == Label::Sp { 1.0 - smooth / 2.0 } else { smooth / 2.0 };
            targets.push(overall);
            targets.push(s.concepts.q_th as f32);
            targets.push(s.concepts.q_csp as f32);
            targets.push(s.concepts.q_fp as f32);
        }
        let batch = stack_images(&imgs)?;
        let tv = Tensor::new(vec![bs, 4], targets)?;

        let mut tape = Tape::new();
        let b = model.bind(&mut tape, true);
        let xv = tape.constant(&batch);
        let scores = model.scores_on(&mut tape, &b, xv)?;
        // Binary cross-entropy against soft targets.
        let t = tape.constant(&tv);
        let sp = tape.add_scalar(scores, PROB_EPS)?;
        let log_p = tape.log(sp)?;
        let one_minus_s = tape.scale(scores, -1.0)?;
        let one_minus_s = tape.add_scalar(one_minus_s, 1.0 + PROB_EPS)?;
        let log_q = tape.log(one_minus_s)?;
        let one_minus_t = tape.scale(t, -1.0)?;
        let one_minus_t = tape.add_scalar(one_minus_t, 1.0)?;
        let pos = tape.mul(t, log_p)?;
        let neg = tape.mul(one_minus_t, log_q)?;
        let both = tape.add(pos, neg)?;
        let m = tape.mean(both)?;
        let loss = tape.scale(m, -1.0)?;

        let loss_val = tape.data(loss)[0];
        if !loss_val.is_finite() {
            return Err(Error::Diverged { iteration: iter });
        }
        trace.push((iter, loss_val));
        tape.backward(loss)?;
        opt.next_step();
        let mut var_list: Vec<Var> = [b.c1, b.c2, b.c3, b.trunk]
            .iter()
            .flat_map(|l| [l.w, l.b])
            .collect();
        for h in &b.heads {
            var_list.push(h.w);
            var_list.push(h.b);
        }
        for (pi, ((_, param), var)) in model.params_mut().into_iter().zip(var_list).enumerate() {
            if let Some(g) = tape.grad(var) {
                opt.update(pi, param, g);
            }
        }
    }
    Ok((model, trace))
}

/// Train a feature extractor with a throwaway SP/NSP linear head; the input
/// noise level differentiates the guidance instance from the evaluation one.
/// `output_scale` multiplies the trained linear head, setting the feature
/// magnitude (and thereby the strength of squared-distance proximity terms).
pub fn train_featurenet(
    samples: &[LoadedSample],
    dim: usize,
    noise_sigma: f64,
    output_scale: f64,
    cfg: &ModelTrainConfig,
    seed: u64,
) -> Result<(FeatureNet<f32>, Vec<(usize, f32)>)> {
    let (sp_idx, nsp_idx) = crate::synth::split_by_label(samples);
    if sp_idx.is_empty() || nsp_idx.is_empty() {
        return Err(Error::EmptyDataset(
            "feature training needs both SP and NSP samples".into(),
        ));
    }
    let mut model = FeatureNet::init(
        dim,
        (IMG_H, IMG_W),
        &mut derive_rng(seed, "featnet-init", &[]),
    );
    let mut head = Linear::<f32>::init(dim, 2, &mut derive_rng(seed, "featnet-head", &[]));
    let n_params = model.params().len();
    let mut opt = Adam::new(cfg.learning_rate, cfg.weight_decay, n_params + 2);
    let mut trace = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let mut rng = derive_rng(seed, "featnet-iter", &[iter as u64]);
        let bs = cfg.batch_size.max(2);
        let mut data = Vec::with_capacity(bs * IMG_H * IMG_W);
        let mut onehot = vec![0.0f32; bs * 2];
        for bi in 0..bs {
            let (pool, class) = if bi % 2 == 0 {
                (&sp_idx, CLASS_SP)
            } else {
                (&nsp_idx, CLASS_NSP)
            };
            let idx = pool[rng.gen_range(0..pool.len())];
            let img = &samples[idx].image;
            for &v in img.data() {
                let z: f32 = rng.sample(rand_distr::StandardNormal);
                data.push(v + noise_sigma as f32 * z);
            }
            let s = cfg.label_smoothing as f32;
            onehot[bi * 2 + class] = 1.0 - s / 2.0;
            onehot[bi * 2 + (1 - class)] = s / 2.0;
        }
        let batch = Tensor::new(vec![bs, 1, IMG_H, IMG_W], data)?;
        let target = Tensor::new(vec![bs, 2], onehot)?;

        let mut tape = Tape::new();
        let b = model.bind(&mut tape, true);
        let hb = head.bind(&mut tape, true);
        let xv = tape.constant(&batch);
        let feats = model.features_on(&mut tape, &b, xv)?;
        let logits = linear_forward(&mut tape, feats, &hb)?;
        let probs = tape.softmax(logits, 1)?;
        let probs = tape.add_scalar(probs, PROB_EPS)?;
        let logp = tape.log(probs)?;
        let tv = tape.constant(&target);
        let picked = tape.mul(logp, tv)?;
        let total = tape.sum(picked, None)?;
        let loss = tape.scale(total, -1.0 / bs as f64)?;

        let loss_val = tape.data(loss)[0];
        if !loss_val.is_finite() {
            return Err(Error::Diverged { iteration: iter });
        }
        trace.push((iter, loss_val));
        tape.backward(loss)?;
        opt.next_step();
        let var_list: Vec<Var> = [b.c1, b.c2, b.c3, b.fc]
            .iter()
            .flat_map(|l| [l.w, l.b])
            .collect();
        for (pi, ((_, param), var)) in model.params_mut().into_iter().zip(var_list).enumerate() {
            if let Some(g) = tape.grad(var) {
                opt.update(pi, param, g);
            }
        }
        for (pi, (param, var)) in [
            (&mut head.weight, hb.w),
            (&mut head.bias, hb.b),
        ]
        .into_iter()
        .enumerate()
        {
            if let Some(g) = tape.grad(var) {
                opt.update(n_params + pi, param, g);
            }
        }
    }
    if output_scale != 1.0 {
        let k = output_scale as f32;
        for v in model.fc.weight.data_mut() {
            *v *= k;
        }
        for v in model.fc.bias.data_mut() {
            *v *= k;
        }
    }
    Ok((model, trace))
}

// ---- evaluation helpers ----

/// Mean of per-class recalls on the SP/NSP decision.
pub fn balanced_accuracy(
    classifier: &QualityClassifier<f32>,
    samples: &[LoadedSample],
) -> Result<f64> {
    let mut correct = [0usize; 2];
    let mut count = [0usize; 2];
    for s in samples {
        let truth = if s.label == Label::Sp { 1 } else { 0 };
        let predicted = if classifier.predicted_label(&s.image)? == Label::Sp {
            1
        } else {
            0
        };
        count[truth] += 1;
        if predicted == truth {
            correct[truth] += 1;
        }
    }
    if count[0] == 0 || count[1] == 0 {
        return Err(Error::EmptyDataset("balanced accuracy needs both classes".into()));
    }
    Ok(0.5 * (correct[0] as f64 / count[0] as f64 + correct[1] as f64 / count[1] as f64))
}

/// Mean over classes of intersection-over-union, counting only classes that
/// appear in the ground truth or prediction.
pub fn segmentation_mean_iou(
    segmenter: &SegmenterModel<f32>,
    samples: &[LoadedSample],
) -> Result<f64> {
    let mut intersection = [0usize; NUM_MASK_CLASSES];
    let mut union = [0usize; NUM_MASK_CLASSES];
    for s in samples {
        let predicted = segmenter.segment(&s.image)?;
        for (&p, &t) in predicted.iter().zip(&s.mask) {
            if p == t {
                intersection[p as usize] += 1;
                union[p as usize] += 1;
            } else {
                union[p as usize] += 1;
                union[t as usize] += 1;
            }
        }
    }
    let mut total = 0.0;
    let mut classes = 0;
    for c in 0..NUM_MASK_CLASSES {
        if union[c] > 0 {
            total += intersection[c] as f64 / union[c] as f64;
            classes += 1;
        }
    }
    Ok(total / classes.max(1) as f64)
}

/// Deterministically split indices into train/val/test by shuffling with a
/// derived stream.
pub fn split_indices(n: usize, n_train: usize, n_val: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = derive_rng(seed, "split", &[]);
    idx.shuffle(&mut rng);
    let train = idx[..n_train.min(n)].to_vec();
    let val = idx[n_train.min(n)..(n_train + n_val).min(n)].to_vec();
    let test = idx[(n_train + n_val).min(n)..].to_vec();
    (train, val, test)
}
