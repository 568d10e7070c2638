//! Pre-encoder, copyright encoder and decoder, and the spatial transformer in
//! front of the decoder.
//!
//! The encoder is a U-Net over the channel-wise concatenation of the host
//! image and the pre-encoded badge; the decoder is a U-Net behind an STN.

mod checkpoint;
mod net;

use std::collections::HashMap;

use cpmark_tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::imaging::{ColorSpace, ImageTensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use net::Forward;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    /// Number of stride-2 levels in each U-Net.
    pub depth: usize,
    pub pre_encoder_layers: usize,
    pub stn_hidden: usize,
    pub image_side: usize,
    /// Amplitude of the tanh perturbation head.
    pub alpha: f64,
    /// Optional hard L-infinity bound on the perturbation.
    pub epsilon: Option<f64>,
    /// Init scale of the 1x1 output heads relative to He init.
    pub head_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 4,
            pre_encoder_layers: 5,
            stn_hidden: 128,
            image_side: 400,
            alpha: 1.0,
            epsilon: None,
            head_gain: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_channels == 0 || self.depth == 0 || self.stn_hidden == 0 {
            return bad("base_channels, depth and stn_hidden must be positive".into());
        }
        if self.depth > 6 {
            return bad(format!("depth {} is unreasonably deep (max 6)", self.depth));
        }
        if self.pre_encoder_layers != 5 {
            return bad(format!("pre_encoder_layers must be 5, got {}", self.pre_encoder_layers));
        }
        if self.image_side < 16 {
            return bad(format!("image_side {} is below the 16 px minimum", self.image_side));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive".into());
        }
        if let Some(e) = self.epsilon {
            if !(e >= 0.0 && e.is_finite()) {
                return bad("epsilon must be finite and non-negative".into());
            }
        }
        if !(self.head_gain > 0.0 && self.head_gain.is_finite()) {
            return bad("head_gain must be positive".into());
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
}

impl Params {
    pub(crate) fn new(entries: Vec<(String, Tensor<f32>)>) -> Self {
        let (names, tensors): (Vec<String>, Vec<Tensor<f32>>) = entries.into_iter().unzip();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, tensors, index }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Parameters whose names start with `prefix`.
    pub fn group<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor<f32>)> + 'a {
        self.names
            .iter()
            .zip(&self.tensors)
            .filter(move |(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.as_str(), t))
    }

    fn zeros_like(&self) -> Vec<Tensor<f32>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect()
    }
}

/// Adam first and second moments, aligned with [`Params`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

/// All trainable weights, optimizer moments and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Params,
    pub optimizer: OptimizerState,
    pub step: u64,
}

impl ModelState {
    /// Binds the parameters to `tape`, as leaves when `trainable`.
    pub fn bind<'a, 't, T: cpmark_tensor::Real>(&'a self, tape: &'t Tape<T>, trainable: bool) -> Forward<'a, 't, T> {
        Forward::new(tape, &self.config, &self.params.index, &self.params.tensors, trainable)
    }

    fn check_image(&self, img: &ImageTensor, what: &str) -> Result<()> {
        let side = self.config.image_side;
        ensure!(
            img.color_space() == ColorSpace::Rgb,
            "{what} must be an RGB image"
        );
        ensure!(
            img.height() == side && img.width() == side,
            "{what} is {}x{}, model expects {side}x{side}",
            img.height(),
            img.width()
        );
        Ok(())
    }
}

/// Reproducible initialization; the STN head starts at the identity transform.
pub fn init_state(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut rng = net::seeded_rng(seed);
    let entries = net::layout(config)
        .into_iter()
        .map(|spec| {
            let t = net::initialize(&spec, &mut rng);
            (spec.name, t)
        })
        .collect();
    let params = Params::new(entries);
    let optimizer = OptimizerState {
        m: params.zeros_like(),
        v: params.zeros_like(),
    };
    Ok(ModelState {
        config: config.clone(),
        params,
        optimizer,
        step: 0,
    })
}

/// Badge features `(C, h, w)` from the pre-encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(pub Tensor<f32>);

/// Additive perturbation `(3, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation(pub Tensor<f32>);

impl Perturbation {
    pub fn max_abs(&self) -> f32 {
        self.0.max_abs()
    }
}

fn single(img: &ImageTensor) -> Tensor<f32> {
    let (h, w) = (img.height(), img.width());
    img.data().reshape([1, 3, h, w])
}

pub fn pre_encode(cp_image: &ImageTensor, state: &ModelState) -> Result<FeatureMap> {
    state.check_image(cp_image, "badge")?;
    let tape = Tape::<f32>::new();
    let f = state.bind(&tape, false).pre_encode(tape.constant(single(cp_image)));
    Ok(FeatureMap(f.value().index0(0)))
}

pub fn encode(host: &ImageTensor, features: &FeatureMap, state: &ModelState) -> Result<Perturbation> {
    state.check_image(host, "host")?;
    let fs = features.0.shape();
    ensure!(
        fs == [state.config.base_channels, host.height(), host.width()],
        "feature map {fs:?} does not match host {}x{} with {} channels",
        host.height(),
        host.width(),
        state.config.base_channels
    );
    let tape = Tape::<f32>::new();
    let feat = tape.constant(features.0.reshape([1, fs[0], fs[1], fs[2]]));
    let delta = state.bind(&tape, false).encode(tape.constant(single(host)), feat);
    Ok(Perturbation(delta.value().index0(0)))
}

/// `clamp(host + delta, 0, 1)`.
pub fn apply_perturbation(host: &ImageTensor, delta: &Perturbation) -> Result<ImageTensor> {
    ensure!(
        host.data().shape() == delta.0.shape(),
        "perturbation {:?} does not match host {:?}",
        delta.0.shape(),
        host.data().shape()
    );
    ImageTensor::rgb(host.data().zip_map(&delta.0, |a, b| (a + b).clamp(0.0, 1.0)))
}

/// Host plus the perturbation for `badge`.
pub fn embed(host: &ImageTensor, badge: &ImageTensor, state: &ModelState) -> Result<ImageTensor> {
    let features = pre_encode(badge, state)?;
    apply_perturbation(host, &encode(host, &features, state)?)
}

pub fn stn_transform(img: &ImageTensor, state: &ModelState) -> Result<ImageTensor> {
    state.check_image(img, "image")?;
    let tape = Tape::<f32>::new();
    let out = state.bind(&tape, false).stn(tape.constant(single(img)));
    ImageTensor::rgb(out.value().index0(0))
}

/// Resamples `img` through a fixed affine map in normalized coordinates
/// (see [`cpmark_tensor::IDENTITY_AFFINE`]), zero outside the image.
pub fn warp_affine(img: &ImageTensor, theta: [f64; 6]) -> Result<ImageTensor> {
    ensure!(theta.iter().all(|v| v.is_finite()), "affine parameters must be finite");
    let tape = Tape::<f64>::new();
    let x = tape.constant(single(img).cast());
    let t = tape.constant(Tensor::new([1, 6], theta.to_vec()));
    ImageTensor::rgb(x.affine_grid_sample(t).value().index0(0).cast())
}

pub fn decode(cimg: &ImageTensor, state: &ModelState) -> Result<ImageTensor> {
    state.check_image(cimg, "encoded image")?;
    let tape = Tape::<f32>::new();
    let out = state.bind(&tape, false).decode(tape.constant(single(cimg)));
    ImageTensor::rgb(out.value().index0(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            depth: 2,
            stn_hidden: 8,
            image_side: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn layout_names_are_unique() {
        let state = init_state(&tiny(), 1).unwrap();
        assert_eq!(state.params.index.len(), state.params.len());
        assert!(state.params.get("pre.4.w").is_some());
        assert!(state.params.get("enc.down2.b.w").is_some());
        assert_eq!(state.params.get("enc.in.w").unwrap().shape(), &[4, 7, 3, 3]);
        assert_eq!(state.params.get("dec.up1.b.w").unwrap().shape(), &[4, 8, 3, 3]);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            ModelConfig { pre_encoder_layers: 4, ..tiny() },
            ModelConfig { base_channels: 0, ..tiny() },
            ModelConfig { alpha: 0.0, ..tiny() },
            ModelConfig { epsilon: Some(-1.0), ..tiny() },
        ] {
            assert!(matches!(init_state(&cfg, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn wrong_side_is_a_contract_violation() {
        let state = init_state(&tiny(), 1).unwrap();
        let img = ImageTensor::constant(8, 8, [0.5; 3]);
        assert!(matches!(decode(&img, &state), Err(Error::Contract(_))));
    }

    #[test]
    fn epsilon_bounds_the_perturbation() {
        let cfg = ModelConfig {
            epsilon: Some(0.01),
            ..tiny()
        };
        let state = init_state(&cfg, 3).unwrap();
        let host = ImageTensor::from_fn(16, 16, |c, y, x| ((c + y * x) % 5) as f32 / 5.0);
        let f = pre_encode(&host, &state).unwrap();
        assert!(encode(&host, &f, &state).unwrap().max_abs() <= 0.01);
    }
}
