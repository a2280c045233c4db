//! Parameterised layers on top of the graph ops.
//!
//! Parameters and running statistics live in a [`ParamStore`]; layers hold
//! only indices into it. A forward pass binds the store into a [`Ctx`], which
//! turns each parameter into a graph leaf and collects running-statistic
//! updates produced in training mode.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::Var;
use crate::tensor::{ConvGeometry, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// Named trainable parameters plus non-trainable buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            buffer_names: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffer_names.push(name.into());
        self.buffers.push(value);
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffer_names.iter().map(String::as_str).zip(self.buffers.iter())
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Replaces a parameter by name; shapes must agree.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<(), String> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| format!("unknown parameter {name}"))?;
        if self.values[i].shape() != value.shape() {
            return Err(format!(
                "parameter {name}: expected shape {:?}, got {:?}",
                self.values[i].shape(),
                value.shape()
            ));
        }
        self.values[i] = value;
        Ok(())
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<(), String> {
        let i = self
            .buffer_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| format!("unknown buffer {name}"))?;
        if self.buffers[i].shape() != value.shape() {
            return Err(format!(
                "buffer {name}: expected shape {:?}, got {:?}",
                self.buffers[i].shape(),
                value.shape()
            ));
        }
        self.buffers[i] = value;
        Ok(())
    }

    /// Graph leaves for every parameter; `trainable` selects whether they
    /// require gradients.
    pub fn bind(&self, trainable: bool) -> Vec<Var<T>> {
        self.values
            .iter()
            .map(|v| if trainable { Var::leaf(v.clone()) } else { Var::constant(v.clone()) })
            .collect()
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(BufferId, Tensor<T>)>) {
        for (id, value) in updates {
            self.buffers[id.0] = value;
        }
    }
}

/// Per-forward-pass state.
pub struct Ctx<'a, T, R> {
    params: &'a [Var<T>],
    store: &'a ParamStore<T>,
    pub train: bool,
    rng: Option<&'a mut R>,
    updates: Vec<(BufferId, Tensor<T>)>,
}

impl<'a, T: Scalar, R: Rng> Ctx<'a, T, R> {
    /// `rng` drives dropout and is only needed in training mode.
    pub fn new(store: &'a ParamStore<T>, params: &'a [Var<T>], train: bool, rng: Option<&'a mut R>) -> Self {
        assert_eq!(params.len(), store.len(), "bound parameters do not match store");
        Self {
            params,
            store,
            train,
            rng,
            updates: Vec::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> &Var<T> {
        &self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        // A later update in this pass wins so repeated layers see fresh stats.
        self.updates
            .iter()
            .rev()
            .find(|(b, _)| *b == id)
            .map(|(_, t)| t)
            .unwrap_or_else(|| self.store.buffer(id))
    }

    fn push_update(&mut self, id: BufferId, value: Tensor<T>) {
        self.updates.push((id, value));
    }

    pub fn rng(&mut self) -> Option<&mut R> {
        self.rng.as_deref_mut()
    }

    pub fn into_updates(self) -> Vec<(BufferId, Tensor<T>)> {
        self.updates
    }
}

fn normal_tensor<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], mean: f64, std: f64) -> Tensor<T> {
    let dist = Normal::new(mean, std).expect("valid normal");
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect(), shape)
}

/// Weight init standard deviation for conv and affine layers.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeometry,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
        bias: bool,
    ) -> Self {
        let k = geom.kernel;
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(rng, &[out_channels, in_channels, k, k], 0.0, INIT_STD),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            geom,
        }
    }

    pub fn forward<T: Scalar, R: Rng>(&self, ctx: &Ctx<'_, T, R>, x: &Var<T>) -> Var<T> {
        assert_eq!(x.shape()[1], self.in_channels, "conv input channels");
        let y = x.conv2d(ctx.param(self.weight), self.geom);
        add_channel_bias(ctx, y, self.bias)
    }
}

/// Transposed convolution. The weight is stored `[in, out, k, k]`, i.e. as
/// the weight of the convolution it transposes.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeometry,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
        bias: bool,
    ) -> Self {
        let k = geom.kernel;
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(rng, &[in_channels, out_channels, k, k], 0.0, INIT_STD),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            geom,
        }
    }

    /// Output extent for an input extent: `(n - 1) * stride - 2 * pad + k`.
    pub fn output_len(&self, input: usize) -> usize {
        (input - 1) * self.geom.stride + self.geom.kernel - 2 * self.geom.padding
    }

    pub fn forward<T: Scalar, R: Rng>(&self, ctx: &Ctx<'_, T, R>, x: &Var<T>) -> Var<T> {
        assert_eq!(x.shape()[1], self.in_channels, "deconv input channels");
        let out_hw = (self.output_len(x.shape()[2]), self.output_len(x.shape()[3]));
        let y = x.conv_transpose2d(ctx.param(self.weight), self.geom, out_hw);
        add_channel_bias(ctx, y, self.bias)
    }
}

fn add_channel_bias<T: Scalar, R: Rng>(ctx: &Ctx<'_, T, R>, y: Var<T>, bias: Option<ParamId>) -> Var<T> {
    match bias {
        Some(b) => {
            let shape = y.shape().to_vec();
            y.add(&ctx.param(b).broadcast_axis(1, &shape))
        }
        None => y,
    }
}

/// Batch normalisation over axis 1 of an NCHW (or NC) tensor.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), normal_tensor(rng, &[channels], 1.0, INIT_STD)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<T: Scalar, R: Rng>(&self, ctx: &mut Ctx<'_, T, R>, x: &Var<T>) -> Var<T> {
        let shape = x.shape().to_vec();
        assert_eq!(shape[1], self.channels, "batch norm channels");
        let count = x.value().numel() / self.channels;
        let gamma = ctx.param(self.gamma).clone();
        let beta = ctx.param(self.beta).clone();
        let eps = T::from_f64_lossy(self.eps);
        if ctx.train {
            let inv_count = T::one() / T::from_usize(count).expect("count");
            let mean = x.sum_keep_axis(1).scale(inv_count);
            let centered = x.sub(&mean.broadcast_axis(1, &shape));
            let var = centered.mul(&centered).sum_keep_axis(1).scale(inv_count);
            let inv_std = var.add_scalar(eps).sqrt().safe_recip();
            let y = centered
                .mul(&inv_std.mul(&gamma).broadcast_axis(1, &shape))
                .add(&beta.broadcast_axis(1, &shape));

            let m = T::from_f64_lossy(self.momentum);
            let unbias = if count > 1 {
                T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
            } else {
                T::one()
            };
            let new_mean = ctx
                .buffer(self.running_mean)
                .zip_map(mean.value(), |r, b| (T::one() - m) * r + m * b);
            let new_var = ctx
                .buffer(self.running_var)
                .zip_map(var.value(), |r, b| (T::one() - m) * r + m * b * unbias);
            ctx.push_update(self.running_mean, new_mean);
            ctx.push_update(self.running_var, new_var);
            y
        } else {
            let mean = ctx.buffer(self.running_mean).clone();
            let inv_std = ctx.buffer(self.running_var).map(|v| T::one() / (v + eps).sqrt());
            let shift = Tensor::from_vec(
                mean.data().iter().zip(inv_std.data()).map(|(&m, &s)| -m * s).collect(),
                &[self.channels],
            );
            let scale = Var::constant(inv_std).mul(&gamma);
            let offset = Var::constant(shift).mul(&gamma).add(&beta);
            x.mul(&scale.broadcast_axis(1, &shape)).add(&offset.broadcast_axis(1, &shape))
        }
    }
}

/// Fully connected layer `[N, in] -> [N, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                normal_tensor(rng, &[in_features, out_features], 0.0, INIT_STD),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_features])),
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar, R: Rng>(&self, ctx: &Ctx<'_, T, R>, x: &Var<T>) -> Var<T> {
        assert_eq!(x.shape()[1], self.in_features, "linear input features");
        let y = x.matmul(ctx.param(self.weight));
        let shape = y.shape().to_vec();
        y.add(&ctx.param(self.bias).broadcast_axis(1, &shape))
    }
}

/// Inverted dropout; identity outside training mode.
pub fn dropout<T: Scalar, R: Rng>(ctx: &mut Ctx<'_, T, R>, x: &Var<T>, p: f64) -> Var<T> {
    if !ctx.train || p == 0.0 {
        return x.clone();
    }
    let keep_scale = T::from_f64_lossy(1.0 / (1.0 - p));
    let rng = ctx.rng().expect("dropout in training mode needs an rng");
    let mask: Vec<T> = (0..x.value().numel())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep_scale })
        .collect();
    x.mul_const(&Tensor::from_vec(mask, x.shape()))
}

/// Adaptive-moment optimiser state for one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store.values.iter().map(|v| Tensor::zeros(v.shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(grads.len(), store.values.len());
        self.step += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = T::from_f64_lossy(self.lr);
        let (tb1, tb2) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let (tbc1, tbc2) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
        let eps = T::from_f64_lossy(self.eps);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.values[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = tb1 * *m + (T::one() - tb1) * g;
                *v = tb2 * *v + (T::one() - tb2) * g * g;
                let m_hat = *m / tbc1;
                let v_hat = *v / tbc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
