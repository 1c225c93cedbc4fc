//! Small neural-network building blocks on top of the tape: conv / linear
//! layers, parameter binding, Adam, and the sinusoidal timestep embedding.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// 3x3-style convolution layer with owned weights.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar = f32> {
    pub weight: Tensor<T>, // [Co, Ci, k, k]
    pub bias: Tensor<T>,   // [Co]
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// He-initialized kernel, zero bias.
    pub fn init(
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / (ci * k * k) as f64).sqrt();
        let data = (0..co * ci * k * k)
            .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Conv2d {
            weight: Tensor::new(vec![co, ci, k, k], data).expect("conv weight shape"),
            bias: Tensor::zeros(&[co]),
            stride,
            padding,
        }
    }

    /// All-zero layer; used for output heads so untrained nets emit zeros.
    pub fn zeros(ci: usize, co: usize, k: usize, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight: Tensor::zeros(&[co, ci, k, k]),
            bias: Tensor::zeros(&[co]),
            stride,
            padding,
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            w: tape.leaf(&self.weight, trainable),
            b: tape.leaf(&self.bias, trainable),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d {
            weight: cast_tensor(&self.weight),
            bias: cast_tensor(&self.bias),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar = f32> {
    pub weight: Tensor<T>, // [In, Out]
    pub bias: Tensor<T>,   // [Out]
}

impl<T: Scalar> Linear<T> {
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / input as f64).sqrt();
        let data = (0..input * output)
            .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Linear {
            weight: Tensor::new(vec![input, output], data).expect("linear weight shape"),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            w: tape.leaf(&self.weight, trainable),
            b: tape.leaf(&self.bias, trainable),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: cast_tensor(&self.weight),
            bias: cast_tensor(&self.bias),
        }
    }
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct Bound {
    pub w: Var,
    pub b: Var,
}

pub fn cast_tensor<T: Scalar, U: Scalar>(t: &Tensor<T>) -> Tensor<U> {
    Tensor::new(
        t.shape().to_vec(),
        t.data().iter().map(|v| U::from_f64(v.to_f64())).collect(),
    )
    .expect("cast keeps shape")
}

/// conv2d + per-channel bias.
pub fn conv_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    layer: &Bound,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let y = tape.conv2d(x, layer.w, stride, padding)?;
    let co = tape.shape(layer.b)[0];
    let b = tape.reshape(layer.b, vec![co, 1, 1])?;
    tape.add(y, b)
}

/// matmul + bias for [N, In] inputs.
pub fn linear_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, layer: &Bound) -> Result<Var> {
    let y = tape.matmul(x, layer.w)?;
    tape.add(y, layer.b)
}

/// Mean over the spatial dims: [N, C, H, W] -> [N, C].
pub fn global_mean_pool<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (h, w) = (shape[2], shape[3]);
    let s3 = tape.sum(x, Some(3))?;
    let s2 = tape.sum(s3, Some(2))?;
    tape.scale(s2, 1.0 / (h * w) as f64)
}

/// Classic sinusoidal embedding of a (possibly re-spaced) timestep index.
pub fn sinusoidal_embedding<T: Scalar>(t: usize, dim: usize) -> Tensor<T> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (-(k as f64) * (10000f64).ln() / (half - 1).max(1) as f64).exp();
        data.push(T::from_f64((t as f64 * freq).sin()));
    }
    for k in 0..half {
        let freq = (-(k as f64) * (10000f64).ln() / (half - 1).max(1) as f64).exp();
        data.push(T::from_f64((t as f64 * freq).cos()));
    }
    Tensor::new(vec![dim], data).expect("embedding shape")
}

/// Rows of sinusoidal embeddings for a batch of timesteps: [N, dim].
pub fn sinusoidal_embedding_batch<T: Scalar>(ts: &[usize], dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend_from_slice(sinusoidal_embedding::<T>(t, dim).data());
    }
    Tensor::new(vec![ts.len(), dim], data).expect("embedding batch shape")
}

/// Adam with optional decoupled weight decay. State is indexed by the
/// position of each parameter in the model's canonical parameter list.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, n_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![Vec::new(); n_params],
            v: vec![Vec::new(); n_params],
        }
    }

    /// Call once per iteration before the per-parameter updates.
    pub fn next_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, index: usize, param: &mut Tensor<f32>, grad: &[f32]) {
        let n = grad.len();
        if self.m[index].is_empty() {
            self.m[index] = vec![0.0; n];
            self.v[index] = vec![0.0; n];
        }
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr = self.lr as f32;
        let wd = self.weight_decay as f32;
        let eps = self.eps as f32;
        let data = param.data_mut();
        for i in 0..n {
            let g = grad[i];
            self.m[index][i] = b1 * self.m[index][i] + (1.0 - b1) * g;
            self.v[index][i] = b2 * self.v[index][i] + (1.0 - b2) * g * g;
            let mh = self.m[index][i] / bc1 as f32;
            let vh = self.v[index][i] / bc2 as f32;
            data[i] -= lr * (mh / (vh.sqrt() + eps) + wd * data[i]);
        }
    }
}
