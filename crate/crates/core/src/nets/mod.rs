//! Encoder–decoder networks for reconstruction and segmentation.
//!
//! Both variants share one backbone: `depth` down/up stages of two padded
//! 3x3 convolutions (optional group norm, ReLU), max-pool downsampling,
//! 2x2 transposed-convolution upsampling and same-size skip concatenation.
//! They differ only in the 1x1 head: a sigmoid squash onto (0, 1) for
//! reconstruction, a per-pixel softmax over classes for segmentation.

pub(crate) mod checkpoint;
mod layers;
mod tensor;
mod unet;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::{Image, SegProbs, NUM_CLASSES};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CheckpointMeta};
pub use layers::ParamSpec;
pub use tensor::Tensor;
pub use unet::Tape;

use layers::{Init, LayoutBuilder};
use unet::UNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Sigmoid onto the open unit interval.
    UnitSquash,
    /// Softmax over output channels.
    ClassProbs,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub head: Head,
    /// Group-norm groups per normalisation layer; 0 disables normalisation.
    pub norm_groups: usize,
}

impl UNetConfig {
    pub fn reconstruction(depth: usize, base_channels: usize) -> Self {
        Self {
            depth,
            base_channels,
            in_channels: 1,
            out_channels: 1,
            head: Head::UnitSquash,
            norm_groups: 0,
        }
    }

    pub fn segmentation(depth: usize, base_channels: usize) -> Self {
        Self {
            out_channels: NUM_CLASSES,
            head: Head::ClassProbs,
            ..Self::reconstruction(depth, base_channels)
        }
    }

    pub fn with_norm_groups(mut self, groups: usize) -> Self {
        self.norm_groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.in_channels != 1 {
            return Err(Error::Config("networks take single-channel slices".into()));
        }
        match (self.head, self.out_channels) {
            (Head::UnitSquash, 1) => {}
            (Head::ClassProbs, c) if c == NUM_CLASSES => {}
            (h, c) => {
                return Err(Error::Config(format!(
                    "head {h:?} is incompatible with {c} output channels"
                )))
            }
        }
        if self.norm_groups > 0 && self.base_channels % self.norm_groups != 0 {
            return Err(Error::Config(format!(
                "norm_groups {} must divide base_channels {}",
                self.norm_groups, self.base_channels
            )));
        }
        Ok(())
    }

    /// Input side lengths must survive `depth` halvings exactly.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let div = 1usize << self.depth;
        if height == 0 || width == 0 || height % div != 0 || width % div != 0 {
            return Err(Error::Config(format!(
                "input {height}x{width} is not divisible by 2^depth = {div}"
            )));
        }
        Ok(())
    }
}

/// Network parameters plus the architecture they belong to.
#[derive(Debug, Clone)]
pub struct ModelHandle<T> {
    net: UNet,
    specs: Vec<ParamSpec>,
    params: Vec<T>,
    frozen: bool,
    init_seed: u64,
}

/// Builds a network with deterministic seeded initialisation.
pub fn build_model<T: Real>(config: UNetConfig, init_seed: u64) -> Result<ModelHandle<T>> {
    config.validate()?;
    let mut layout = LayoutBuilder::default();
    let net = UNet::new(config, &mut layout);
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut params = Vec::with_capacity(layout.total);
    for (spec, init) in layout.specs.iter().zip(&layout.inits) {
        match *init {
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                params.extend((0..spec.len()).map(|_| T::lit(dist.sample(&mut rng))));
            }
            Init::Constant(v) => params.extend(std::iter::repeat_n(T::lit(v), spec.len())),
        }
    }
    Ok(ModelHandle {
        net,
        specs: layout.specs,
        params,
        frozen: false,
        init_seed,
    })
}

impl<T: Real> ModelHandle<T> {
    pub fn config(&self) -> &UNetConfig {
        &self.net.config
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Mutable parameter access; refused for frozen models.
    pub fn params_mut(&mut self) -> Result<&mut [T]> {
        if self.frozen {
            return Err(Error::Usage("attempted to modify a frozen model".into()));
        }
        Ok(&mut self.params)
    }

    pub fn named_parameters(&self) -> impl Iterator<Item = (&ParamSpec, &[T])> {
        self.specs.iter().map(|s| (s, &self.params[s.range()]))
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn unfreeze(mut self) -> Self {
        self.frozen = false;
        self
    }

    /// Same weights in another precision.
    pub fn cast<U: Real>(&self) -> ModelHandle<U> {
        ModelHandle {
            net: self.net.clone(),
            specs: self.specs.clone(),
            params: self.params.iter().map(|v| U::lit(v.as_f64())).collect(),
            frozen: self.frozen,
            init_seed: self.init_seed,
        }
    }

    pub(crate) fn from_parts(
        config: UNetConfig,
        params: Vec<T>,
        frozen: bool,
        init_seed: u64,
    ) -> Result<Self> {
        let mut model = build_model::<T>(config, init_seed)?;
        if params.len() != model.params.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                params.len()
            )));
        }
        model.params = params;
        model.frozen = frozen;
        Ok(model)
    }

    /// Forward pass retaining activations for [`ModelHandle::backward`].
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tape<T>> {
        if input.channels != self.net.config.in_channels {
            return Err(Error::Dimension(format!(
                "expected {} input channels, got {}",
                self.net.config.in_channels, input.channels
            )));
        }
        self.net.config.check_input(input.height, input.width)?;
        Ok(self.net.forward(&self.params, input))
    }

    /// Output of the forward pass only.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(input)?.into_output())
    }

    /// Back-propagates `d_output` through the pass recorded in `tape`.
    ///
    /// Parameter gradients are accumulated into `param_grads` when given; the
    /// parameters themselves are never modified. Returns the input gradient
    /// when `need_input_grad` is set.
    pub fn backward(
        &self,
        tape: Tape<T>,
        d_output: &Tensor<T>,
        param_grads: Option<&mut [T]>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        if let Some(g) = &param_grads {
            assert_eq!(g.len(), self.params.len(), "gradient buffer size");
        }
        self.net
            .backward(&self.params, param_grads, tape, d_output, need_input_grad)
    }

    fn require_head(&self, head: Head) -> Result<()> {
        if self.net.config.head != head {
            return Err(Error::Usage(format!(
                "model has {:?} head, operation needs {head:?}",
                self.net.config.head
            )));
        }
        Ok(())
    }
}

pub fn image_to_tensor<T: Real>(image: &Image) -> Tensor<T> {
    let (h, w) = image.dim();
    Tensor::from_vec(1, h, w, image.iter().map(|&v| T::lit(v)).collect())
}

pub fn tensor_to_image<T: Real>(t: &Tensor<T>) -> Image {
    Array2::from_shape_vec(
        (t.height, t.width),
        t.channel(0).iter().map(|v| v.as_f64()).collect(),
    )
    .expect("tensor plane shape")
}

pub fn tensor_to_probs<T: Real>(t: &Tensor<T>) -> SegProbs {
    Array3::from_shape_vec(
        (t.channels, t.height, t.width),
        t.data.iter().map(|v| v.as_f64()).collect(),
    )
    .expect("tensor shape")
}

pub fn probs_to_tensor<T: Real>(p: &SegProbs) -> Tensor<T> {
    let (c, h, w) = p.dim();
    Tensor::from_vec(c, h, w, p.iter().map(|&v| T::lit(v)).collect())
}

/// Runs a reconstruction network on one low-dose slice.
pub fn reconstruct<T: Real>(model: &ModelHandle<T>, low_dose: &Image) -> Result<Image> {
    model.require_head(Head::UnitSquash)?;
    let out = model.predict(&image_to_tensor(low_dose))?;
    Ok(tensor_to_image(&out))
}

/// Per-pixel class probabilities (`classes x H x W`).
pub fn segment<T: Real>(model: &ModelHandle<T>, image: &Image) -> Result<SegProbs> {
    model.require_head(Head::ClassProbs)?;
    let out = model.predict(&image_to_tensor(image))?;
    Ok(tensor_to_probs(&out))
}
