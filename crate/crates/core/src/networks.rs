//! Generator and critics.
//!
//! The generator is a u-net over single faces: each face is a 4-channel
//! (RGB + mask) image, and the six faces of a panorama travel through shared
//! weights as consecutive batch rows `n * 6 + face`. Two Wasserstein critics
//! score the result: the whole critic sees all six faces stacked into 24
//! channels, the slice critic scores each face separately with shared
//! weights and averages the six scores.
//!
//! Every convolution uses kernel 4, stride 2, padding 1. Networks work in
//! `[-1, 1]` image space; the generator output is mapped back to `[0, 1]`.

use panocube_autograd::nn::{dropout, BatchNorm, BufferId, Conv2d, ConvTranspose2d, Ctx, Linear, ParamStore};
use panocube_autograd::{ConvGeometry, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::{CubeMap, CubeMask};

pub const CONV: ConvGeometry = ConvGeometry::new(4, 2, 1);
pub const LEAKY_SLOPE: f64 = 0.2;
pub const FACES: usize = 6;

/// Batch-norm running statistics produced by a forward pass in train mode.
pub type BufferUpdates<T> = Vec<(BufferId, Tensor<T>)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    DeConv,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu,
    Relu,
    /// `tanh` rescaled to `[0, 1]`.
    UnitTanh,
    None,
}

/// Structural description of one layer, for introspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    /// 1-based layer number.
    pub index: usize,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub batch_norm: bool,
    pub activation: Activation,
    pub dropout: Option<f64>,
    /// Encoder layer whose output is concatenated after this layer.
    pub concat_with: Option<usize>,
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub max_width: usize,
    /// Number of encoder layers.
    pub depth: usize,
    pub dropout_p: f64,
    /// How many leading decoder layers apply dropout.
    pub dropout_layers: usize,
    pub out_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            base_width: 64,
            max_width: 512,
            depth: 7,
            dropout_p: 0.5,
            dropout_layers: 2,
            out_channels: 3,
        }
    }
}

impl GeneratorConfig {
    /// Standard widths with the deepest encoder that fits `face_size`
    /// (seven layers from 128 pixels up).
    pub fn for_face_size(face_size: usize) -> Self {
        let max_depth = face_size.max(1).ilog2() as usize;
        Self {
            depth: max_depth.min(7),
            ..Self::default()
        }
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|i| (self.base_width << i).min(self.max_width))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("generator depth {} is below 2", self.depth)));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("generator channel counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    /// Face size must be a power of two with at least one pixel left after
    /// `depth` halvings.
    pub fn check_face_size(&self, face_size: usize) -> Result<()> {
        if !face_size.is_power_of_two() || face_size < (1 << self.depth) {
            return Err(Error::Shape(format!(
                "face size {face_size} must be a power of two of at least {} for depth {}",
                1usize << self.depth,
                self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CriticKind {
    /// All six faces with masks stacked channel-wise.
    Whole,
    /// One face with its mask, shared across faces.
    Slice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub kind: CriticKind,
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub face_size: usize,
}

impl CriticConfig {
    pub fn whole(face_size: usize) -> Self {
        Self {
            kind: CriticKind::Whole,
            in_channels: FACES * 4,
            widths: vec![64, 128, 256, 512],
            face_size,
        }
    }

    pub fn slice(face_size: usize) -> Self {
        Self {
            kind: CriticKind::Slice,
            in_channels: 4,
            ..Self::whole(face_size)
        }
    }

    /// Spatial side after the strided convolutions.
    pub fn final_side(&self) -> usize {
        self.face_size >> self.widths.len()
    }

    /// Input size of the affine head.
    pub fn flatten_features(&self) -> usize {
        self.widths.last().copied().unwrap_or(self.in_channels) * self.final_side().pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.widths.len();
        if self.face_size == 0 || !self.face_size.is_multiple_of(div) {
            return Err(Error::Shape(format!(
                "critic face size {} must be a positive multiple of {div}",
                self.face_size
            )));
        }
        Ok(())
    }
}

fn conv_spec(index: usize, kind: LayerKind, cin: usize, cout: usize) -> LayerSpec {
    LayerSpec {
        index,
        kind,
        in_channels: cin,
        out_channels: cout,
        kernel: CONV.kernel,
        stride: CONV.stride,
        padding: CONV.padding,
        batch_norm: false,
        activation: Activation::None,
        dropout: None,
        concat_with: None,
        bias: false,
    }
}

struct Block {
    spec: LayerSpec,
    conv: Option<Conv2d>,
    deconv: Option<ConvTranspose2d>,
    bn: Option<BatchNorm>,
}

/// u-net generator.
pub struct Generator<T> {
    config: GeneratorConfig,
    store: ParamStore<T>,
    encoders: Vec<Block>,
    decoders: Vec<Block>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let widths = config.encoder_widths();
        let depth = config.depth;

        let mut encoders = Vec::with_capacity(depth);
        for (i, &w) in widths.iter().enumerate() {
            let cin = if i == 0 { config.in_channels } else { widths[i - 1] };
            let name = format!("gen.layer{}", i + 1);
            let use_bn = i > 0;
            let mut spec = conv_spec(i + 1, LayerKind::Conv, cin, w);
            spec.batch_norm = use_bn;
            spec.activation = Activation::LeakyRelu;
            spec.bias = !use_bn;
            encoders.push(Block {
                conv: Some(Conv2d::new(&mut store, &mut rng, &name, cin, w, CONV, !use_bn)),
                deconv: None,
                bn: use_bn.then(|| BatchNorm::new(&mut store, &mut rng, &format!("{name}.bn"), w)),
                spec,
            });
        }

        let mut decoders = Vec::with_capacity(depth);
        for j in 0..depth {
            let index = depth + j + 1;
            let name = format!("gen.layer{index}");
            let cin = if j == 0 { widths[depth - 1] } else { 2 * widths[depth - 1 - j] };
            let last = j == depth - 1;
            let cout = if last { config.out_channels } else { widths[depth - 2 - j] };
            let mut spec = conv_spec(index, LayerKind::DeConv, cin, cout);
            spec.bias = last;
            if last {
                spec.activation = Activation::UnitTanh;
            } else {
                spec.batch_norm = true;
                spec.activation = Activation::Relu;
                spec.dropout = (j < config.dropout_layers).then_some(config.dropout_p);
                spec.concat_with = Some(depth - 1 - j);
            }
            decoders.push(Block {
                conv: None,
                deconv: Some(ConvTranspose2d::new(&mut store, &mut rng, &name, cin, cout, CONV, last)),
                bn: (!last).then(|| BatchNorm::new(&mut store, &mut rng, &format!("{name}.bn"), cout)),
                spec,
            });
        }

        Ok(Self {
            config,
            store,
            encoders,
            decoders,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.encoders
            .iter()
            .chain(&self.decoders)
            .map(|b| b.spec.clone())
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Runs the u-net on `[B, in_channels, S, S]` network-space input and
    /// returns `[B, out_channels, S, S]` in `[0, 1]`, plus running-statistic
    /// updates to apply with [`Generator::apply_updates`].
    pub fn forward<R: Rng>(
        &self,
        params: &[Var<T>],
        input: &Var<T>,
        mode: Mode,
        rng: Option<&mut R>,
    ) -> Result<(Var<T>, BufferUpdates<T>)> {
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "generator expects [B, {}, S, S], got {shape:?}",
                self.config.in_channels
            )));
        }
        if shape[2] != shape[3] {
            return Err(Error::Shape(format!("faces must be square, got {shape:?}")));
        }
        self.config.check_face_size(shape[2])?;

        let mut ctx = Ctx::new(&self.store, params, mode == Mode::Train, rng);
        let slope = T::from_f64_lossy(LEAKY_SLOPE);
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut h = input.clone();
        for block in &self.encoders {
            h = block.conv.as_ref().expect("encoder conv").forward(&ctx, &h);
            if let Some(bn) = &block.bn {
                h = bn.forward(&mut ctx, &h);
            }
            h = h.leaky_relu(slope);
            skips.push(h.clone());
        }
        for block in &self.decoders {
            h = block.deconv.as_ref().expect("decoder deconv").forward(&ctx, &h);
            if let Some(bn) = &block.bn {
                h = bn.forward(&mut ctx, &h);
            }
            match block.spec.activation {
                Activation::Relu => h = h.relu(),
                Activation::UnitTanh => {
                    h = h.tanh().add_scalar(T::one()).scale(T::from_f64_lossy(0.5));
                }
                _ => {}
            }
            if let Some(p) = block.spec.dropout {
                h = dropout(&mut ctx, &h, p);
            }
            if let Some(skip) = block.spec.concat_with {
                h = Var::concat_channels(&[h, skips[skip - 1].clone()]);
            }
        }
        Ok((h, ctx.into_updates()))
    }

    pub fn apply_updates(&mut self, updates: BufferUpdates<T>) {
        self.store.apply_buffer_updates(updates);
    }

    /// Evaluation-mode generation for a batch of face rows.
    pub fn generate(&self, damaged: &Tensor<T>, masks: &Tensor<T>) -> Result<Tensor<T>> {
        let params = self.store.bind(false);
        let input = generator_input(damaged, masks)?;
        let (out, _) = self.forward::<ChaCha8Rng>(&params, &Var::constant(input), Mode::Eval, None)?;
        Ok(out.value().clone())
    }
}

/// A critic: four strided convolutions and an affine head to one score.
pub struct Critic<T> {
    config: CriticConfig,
    store: ParamStore<T>,
    convs: Vec<Conv2d>,
    norms: Vec<Option<BatchNorm>>,
    head: Linear,
}

impl<T: Scalar> Critic<T> {
    pub fn new(config: CriticConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let prefix = match config.kind {
            CriticKind::Whole => "whole",
            CriticKind::Slice => "slice",
        };
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = config.in_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            let name = format!("{prefix}.layer{}", i + 1);
            let use_bn = i > 0;
            convs.push(Conv2d::new(&mut store, &mut rng, &name, cin, w, CONV, !use_bn));
            norms.push(use_bn.then(|| BatchNorm::new(&mut store, &mut rng, &format!("{name}.bn"), w)));
            cin = w;
        }
        let head = Linear::new(
            &mut store,
            &mut rng,
            &format!("{prefix}.layer{}", config.widths.len() + 1),
            config.flatten_features(),
            1,
        );
        Ok(Self {
            config,
            store,
            convs,
            norms,
            head,
        })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs: Vec<LayerSpec> = self
            .convs
            .iter()
            .zip(&self.norms)
            .enumerate()
            .map(|(i, (c, bn))| LayerSpec {
                batch_norm: bn.is_some(),
                activation: Activation::LeakyRelu,
                bias: c.bias.is_some(),
                ..conv_spec(i + 1, LayerKind::Conv, c.in_channels, c.out_channels)
            })
            .collect();
        specs.push(LayerSpec {
            index: self.convs.len() + 1,
            kind: LayerKind::Linear,
            in_channels: self.head.in_features,
            out_channels: self.head.out_features,
            kernel: 0,
            stride: 0,
            padding: 0,
            batch_norm: false,
            activation: Activation::None,
            dropout: None,
            concat_with: None,
            bias: true,
        });
        specs
    }

    /// `[B, in_channels, S, S]` to `[B, 1]` raw scores.
    pub fn forward(
        &self,
        params: &[Var<T>],
        x: &Var<T>,
        mode: Mode,
    ) -> Result<(Var<T>, BufferUpdates<T>)> {
        let s = self.config.face_size;
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.config.in_channels || shape[2] != s || shape[3] != s {
            return Err(Error::Shape(format!(
                "critic expects [B, {}, {s}, {s}], got {shape:?}",
                self.config.in_channels
            )));
        }
        let mut ctx: Ctx<'_, T, ChaCha8Rng> = Ctx::new(&self.store, params, mode == Mode::Train, None);
        let slope = T::from_f64_lossy(LEAKY_SLOPE);
        let mut h = x.clone();
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(&ctx, &h);
            if let Some(bn) = bn {
                h = bn.forward(&mut ctx, &h);
            }
            h = h.leaky_relu(slope);
        }
        let n = h.shape()[0];
        let flat = h.reshape(&[n, self.config.flatten_features()]);
        Ok((self.head.forward(&ctx, &flat), ctx.into_updates()))
    }

    pub fn apply_updates(&mut self, updates: BufferUpdates<T>) {
        self.store.apply_buffer_updates(updates);
    }

    /// Scores face rows `[N*6, 3, S, S]` (network space) with masks
    /// `[N*6, 1, S, S]`.
    ///
    /// Returns `(aggregate [N, 1], per_face)`: for the whole critic
    /// `per_face` is the aggregate itself; for the slice critic it is the
    /// `[N, 6]` matrix of per-face scores, each from a separate pass over
    /// that face's rows.
    pub fn score_faces(
        &self,
        params: &[Var<T>],
        rgb: &Var<T>,
        masks: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Var<T>, Var<T>, BufferUpdates<T>)> {
        let rows = rgb.shape()[0];
        if !rows.is_multiple_of(FACES) || rows == 0 {
            return Err(Error::Validation(format!(
                "critic input has {rows} face rows, not a positive multiple of 6"
            )));
        }
        if masks.shape()[0] != rows {
            return Err(Error::Shape("mask rows do not match face rows".into()));
        }
        let n = rows / FACES;
        let s = rgb.shape()[2];
        let stacked = Var::concat_channels(&[rgb.clone(), Var::constant(masks.clone())]);
        match self.config.kind {
            CriticKind::Whole => {
                let x = stacked.reshape(&[n, FACES * 4, s, s]);
                let (score, updates) = self.forward(params, &x, mode)?;
                Ok((score.clone(), score, updates))
            }
            CriticKind::Slice => {
                let mut per_face = Vec::with_capacity(FACES);
                let mut updates = Vec::new();
                for f in 0..FACES {
                    let idx: Vec<usize> = (0..n).map(|b| b * FACES + f).collect();
                    let (score, u) = self.forward(params, &stacked.gather_rows(&idx), mode)?;
                    per_face.push(score);
                    // Sequential passes: each sees the statistics the previous left.
                    updates.extend(u);
                }
                let per_face = Var::concat_channels(&per_face);
                let aggregate = mean_over_faces(&per_face);
                Ok((aggregate, per_face, updates))
            }
        }
    }
}

/// `[N, 6]` to `[N, 1]` arithmetic mean.
pub fn mean_over_faces<T: Scalar>(per_face: &Var<T>) -> Var<T> {
    let n = per_face.shape()[0];
    let k = per_face.shape()[1];
    per_face
        .sum_keep_axis(0)
        .scale(T::one() / T::from_usize(k).expect("count"))
        .reshape(&[n, 1])
}

/// `[0, 1]` image values to network space `[-1, 1]`.
pub fn to_network<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let two = T::from_f64_lossy(2.0);
    t.map(|v| v * two - T::one())
}

/// Concatenates normalised damaged faces `[B, 3, S, S]` and masks `[B, 1, S, S]`.
pub fn generator_input<T: Scalar>(damaged: &Tensor<T>, masks: &Tensor<T>) -> Result<Tensor<T>> {
    if damaged.shape().len() != 4 || masks.shape().len() != 4 {
        return Err(Error::Shape("generator inputs must be 4-d".into()));
    }
    if damaged.shape()[0] != masks.shape()[0] || damaged.shape()[2..] != masks.shape()[2..] || masks.shape()[1] != 1 {
        return Err(Error::Shape(format!(
            "faces {:?} and masks {:?} do not pair up",
            damaged.shape(),
            masks.shape()
        )));
    }
    Ok(Tensor::concat_channels(&[&to_network(damaged), masks]))
}

/// Face rows `[N*6, 3, S, S]` of a batch of cube maps, values in `[0, 1]`.
pub fn cubes_to_tensor<T: Scalar>(cubes: &[&CubeMap]) -> Tensor<T> {
    let s = cubes.first().map_or(0, |c| c.face_size());
    let mut data = Vec::with_capacity(cubes.len() * FACES * 3 * s * s);
    for cube in cubes {
        for face in cube.faces() {
            let px = face.as_slice();
            for c in 0..3 {
                data.extend(px.iter().skip(c).step_by(3).map(|&v| T::from_f64_lossy(v as f64)));
            }
        }
    }
    Tensor::from_vec(data, &[cubes.len() * FACES, 3, s, s])
}

/// Mask rows `[N*6, 1, S, S]`, 1 = valid.
pub fn masks_to_tensor<T: Scalar>(masks: &[&CubeMask]) -> Tensor<T> {
    let s = masks.first().map_or(0, |m| m.face_size());
    let mut data = Vec::with_capacity(masks.len() * FACES * s * s);
    for m in masks {
        for face in m.faces() {
            data.extend(face.as_slice().iter().map(|&v| if v == 1 { T::one() } else { T::zero() }));
        }
    }
    Tensor::from_vec(data, &[masks.len() * FACES, 1, s, s])
}

/// Inverse of [`cubes_to_tensor`].
pub fn tensor_to_cubes<T: Scalar>(t: &Tensor<T>) -> Result<Vec<CubeMap>> {
    let shape = t.shape();
    if shape.len() != 4 || shape[1] != 3 || !shape[0].is_multiple_of(FACES) || shape[2] != shape[3] {
        return Err(Error::Shape(format!("cannot read cube maps from {shape:?}")));
    }
    let s = shape[2];
    let plane = s * s;
    let data = t.data();
    (0..shape[0] / FACES)
        .map(|n| {
            let faces = (0..FACES)
                .map(|f| {
                    let base = (n * FACES + f) * 3 * plane;
                    let mut px = Vec::with_capacity(3 * plane);
                    for i in 0..plane {
                        for c in 0..3 {
                            px.push(data[base + c * plane + i].to_f32().unwrap_or(f32::NAN));
                        }
                    }
                    crate::image::RgbImage::from_raw(s, s, px).expect("face size")
                })
                .collect();
            CubeMap::new(faces)
        })
        .collect()
}

/// Broadcasts `[B, 1, S, S]` masks to `[B, 3, S, S]`.
pub fn expand_mask_rgb<T: Scalar>(masks: &Tensor<T>) -> Tensor<T> {
    Tensor::concat_channels(&[masks, masks, masks])
}

/// `mask * input + (1 - mask) * generated` with a differentiable
/// `generated`. Pixels with mask 1 reproduce `input` exactly.
pub fn composite<T: Scalar>(generated: &Var<T>, input: &Tensor<T>, masks: &Tensor<T>) -> Result<Var<T>> {
    if generated.shape() != input.shape() {
        return Err(Error::Shape(format!(
            "generated {:?} and input {:?} differ",
            generated.shape(),
            input.shape()
        )));
    }
    if masks.shape()[0] != input.shape()[0] || masks.shape()[2..] != input.shape()[2..] {
        return Err(Error::Shape("mask does not match image rows".into()));
    }
    let m3 = expand_mask_rgb(masks);
    let hole = m3.map(|m| T::one() - m);
    let kept = input.zip_map(&m3, |x, m| x * m);
    Ok(generated.mul_const(&hole).add(&Var::constant(kept)))
}

/// Pixel-selecting composite on cube maps: valid pixels are copied from
/// `input`, hole pixels from `generated`.
pub fn composite_cube(generated: &CubeMap, input: &CubeMap, masks: &CubeMask) -> Result<CubeMap> {
    if generated.face_size() != input.face_size() || masks.face_size() != input.face_size() {
        return Err(Error::Shape("cube maps and masks must share a face size".into()));
    }
    let faces = (0..FACES)
        .map(|f| {
            let mut out = input.faces()[f].clone();
            let gen = &generated.faces()[f];
            let m = &masks.faces()[f];
            let s = input.face_size();
            for y in 0..s {
                for x in 0..s {
                    if !m.is_valid(x, y) {
                        out.set(x, y, gen.get(x, y));
                    }
                }
            }
            out
        })
        .collect();
    CubeMap::new(faces)
}
