//! Training objective: perceptual distance on the encoded image, YUV distance,
//! and decoded-badge MSE, plus the frozen perceptual feature backend.

use std::path::Path;

use cpmark_tensor::{Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::error::{ensure, Error, Result};
use crate::imaging::{rgb_to_yuv_var, ImageTensor};

/// Magic string of a perceptual backend weights file.
pub const BACKEND_MAGIC: &str = "CPMARK-LPIPS-v1";

const NORM_EPS: f64 = 1e-10;
const RANDOM_BACKEND_SEED: u64 = 0x1b1b5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 15.0,
        }
    }
}

/// One frozen convolution of a feature stack, followed by LeakyReLU(0.2).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStage {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub stride: usize,
}

/// A frozen feature network with per-channel tap weights, as used by LPIPS.
///
/// Taps are the (optionally rescaled) input when `tap_input` is set, then the
/// output of every stage. Parameters never receive gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualBackend {
    pub name: String,
    /// Inputs are mapped to `x * scale + shift` before the first stage.
    pub input_scale: f64,
    pub input_shift: f64,
    pub tap_input: bool,
    pub stages: Vec<FeatureStage>,
    /// Non-negative channel weights, one vector per tap.
    pub tap_weights: Vec<Vec<f64>>,
}

impl PerceptualBackend {
    /// Fixed-seed random conv stack (3 -> 16 -> 32 -> 32, strides 1, 2, 2).
    ///
    /// The distance properties (zero at identity, symmetry, smoothness) do not
    /// depend on where the features come from, so this backend stands in
    /// wherever pretrained weights are unavailable.
    pub fn deterministic() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(RANDOM_BACKEND_SEED);
        let mut stages = Vec::new();
        let mut cin = 3;
        for (cout, stride) in [(16, 1), (32, 2), (32, 2)] {
            let fan_in = (cin * 9) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let weight = Tensor::from_fn([cout, cin, 3, 3], |_| rng.random_range(-bound..bound) as f32);
            let bias = Tensor::from_fn([cout], |_| rng.random_range(-0.1..0.1f32));
            stages.push(FeatureStage { weight, bias, stride });
            cin = cout;
        }
        let tap_weights = stages.iter().map(|s| vec![1.0; s.weight.shape()[0]]).collect();
        Self {
            name: "random-conv".into(),
            input_scale: 2.0,
            input_shift: -1.0,
            tap_input: false,
            stages,
            tap_weights,
        }
    }

    /// Single tap on the raw input with unit channel weights.
    pub fn identity() -> Self {
        Self {
            name: "identity".into(),
            input_scale: 1.0,
            input_shift: 0.0,
            tap_input: true,
            stages: Vec::new(),
            tap_weights: vec![vec![1.0; 3]],
        }
    }

    /// Loads a weights file: tensors `stage{i}.weight`, `stage{i}.bias`,
    /// `tap{j}.weight`, and header keys `strides`, `input_scale`,
    /// `input_shift`, `tap_input`.
    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = archive::read(path, BACKEND_MAGIC)?;
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| bad(format!("missing tensor {name}")))
        };
        let strides: Vec<usize> = header
            .get("strides")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| bad("header lacks strides".into()))?;
        let num = |key: &str, default: f64| header.get(key).and_then(|v| v.as_f64()).unwrap_or(default);
        let tap_input = header.get("tap_input").and_then(|v| v.as_bool()).unwrap_or(false);
        let mut stages = Vec::new();
        for (i, &stride) in strides.iter().enumerate() {
            stages.push(FeatureStage {
                weight: find(&format!("stage{i}.weight"))?,
                bias: find(&format!("stage{i}.bias"))?,
                stride,
            });
        }
        let taps = stages.len() + usize::from(tap_input);
        let tap_weights = (0..taps)
            .map(|j| find(&format!("tap{j}.weight")).map(|t| t.data().iter().map(|&v| v as f64).collect()))
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let backend = Self {
            name: path.display().to_string(),
            input_scale: num("input_scale", 2.0),
            input_shift: num("input_shift", -1.0),
            tap_input,
            stages,
            tap_weights,
        };
        backend.check().map_err(|e| bad(e.to_string()))?;
        Ok(backend)
    }

    /// Writes the backend in the format read by [`PerceptualBackend::load`].
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = serde_json::Map::new();
        let strides: Vec<usize> = self.stages.iter().map(|s| s.stride).collect();
        header.insert("strides".into(), serde_json::json!(strides));
        header.insert("input_scale".into(), self.input_scale.into());
        header.insert("input_shift".into(), self.input_shift.into());
        header.insert("tap_input".into(), self.tap_input.into());
        let taps: Vec<Tensor<f32>> = self
            .tap_weights
            .iter()
            .map(|w| Tensor::new([w.len()], w.iter().map(|&v| v as f32).collect()))
            .collect();
        let mut named: Vec<(String, &Tensor<f32>)> = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            named.push((format!("stage{i}.weight"), &s.weight));
            named.push((format!("stage{i}.bias"), &s.bias));
        }
        for (j, t) in taps.iter().enumerate() {
            named.push((format!("tap{j}.weight"), t));
        }
        archive::write(path, BACKEND_MAGIC, header, &named)
    }

    /// The weights file when given and present, else the deterministic backend
    /// with a warning.
    pub fn from_weights(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) if p.exists() => Self::load(p),
            Some(p) => {
                log::warn!(
                    "perceptual weights {} not found; using the deterministic random-feature backend",
                    p.display()
                );
                Ok(Self::deterministic())
            }
            None => {
                log::warn!("no perceptual weights configured; using the deterministic random-feature backend");
                Ok(Self::deterministic())
            }
        }
    }

    fn check(&self) -> Result<()> {
        let mut c = 3;
        let mut widths = Vec::new();
        if self.tap_input {
            widths.push(3);
        }
        for s in &self.stages {
            let (cout, cin, _, _) = s.weight.dims4();
            ensure!(cin == c, "stage expects {cin} channels, previous stage gives {c}");
            ensure!(s.bias.shape() == [cout], "stage bias must have {cout} entries");
            ensure!(s.stride >= 1, "stage stride must be positive");
            widths.push(cout);
            c = cout;
        }
        ensure!(self.tap_weights.len() == widths.len(), "one weight vector per tap required");
        for (w, &n) in self.tap_weights.iter().zip(&widths) {
            ensure!(w.len() == n, "tap weight vector has {} entries, tap has {n} channels", w.len());
            ensure!(w.iter().all(|v| *v >= 0.0), "tap weights must be non-negative");
        }
        Ok(())
    }

    /// Tap activations of an `(n, 3, h, w)` batch.
    pub fn features<'t, T: Real>(&self, x: Var<'t, T>) -> Vec<Var<'t, T>> {
        let tape = x.tape();
        let mut h = x.mul_scalar(self.input_scale).add_scalar(self.input_shift);
        let mut taps = Vec::with_capacity(self.tap_weights.len());
        if self.tap_input {
            taps.push(h);
        }
        for s in &self.stages {
            let pad = s.weight.shape()[2] / 2;
            let w = tape.constant(s.weight.cast());
            let b = tape.constant(s.bias.cast());
            h = h.conv2d(w, Some(b), s.stride, pad).leaky_relu(0.2);
            taps.push(h);
        }
        taps
    }

    /// Batch-mean LPIPS distance as a `[1]` variable.
    pub fn distance_var<'t, T: Real>(&self, x: Var<'t, T>, y: Var<'t, T>) -> Var<'t, T> {
        assert_eq!(x.shape(), y.shape(), "lpips inputs must share a shape");
        let fx = self.features(x);
        let fy = self.features(y);
        let mut total: Option<Var<'t, T>> = None;
        for ((a, b), w) in fx.into_iter().zip(fy).zip(&self.tap_weights) {
            let d = (unit_normalize(a) - unit_normalize(b)).square();
            let term = d.channel_mix(w, &[0.0]).mean();
            total = Some(match total {
                Some(t) => t + term,
                None => term,
            });
        }
        total.expect("backend has at least one tap")
    }

    pub fn distance(&self, x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
        ensure!(x.same_shape(y), "lpips inputs must share a shape");
        let tape = Tape::<f32>::new();
        let a = tape.constant(ImageTensor::batch(std::slice::from_ref(x))?);
        let b = tape.constant(ImageTensor::batch(std::slice::from_ref(y))?);
        Ok(self.distance_var(a, b).value().item() as f64)
    }

    /// Spatially pooled tap activations, concatenated; the FID feature vector.
    pub fn pooled_features(&self, img: &ImageTensor) -> Vec<f64> {
        let tape = Tape::<f32>::new();
        let x = tape.constant(ImageTensor::batch(std::slice::from_ref(img)).expect("single image batches"));
        self.features(x)
            .into_iter()
            .flat_map(|t| t.mean_axes(&[2, 3]).value().data().iter().map(|&v| v as f64).collect::<Vec<_>>())
            .collect()
    }
}

/// Divides every feature vector (across channels) by its Euclidean norm.
fn unit_normalize<'t, T: Real>(f: Var<'t, T>) -> Var<'t, T> {
    let shape = f.shape();
    let norm = f.square().sum_axes(&[1]).add_scalar(NORM_EPS).sqrt().expand(shape);
    f / norm
}

/// Per-image RMS distance in YUV (channel-summed squared error averaged over
/// pixels, then square-rooted), averaged over the batch.
pub fn yuv_l2_var<'t, T: Real>(x: Var<'t, T>, y: Var<'t, T>) -> Var<'t, T> {
    assert_eq!(x.shape(), y.shape(), "yuv_l2 inputs must share a shape");
    let shape = x.shape();
    let pixels = (shape[2] * shape[3]) as f64;
    let d = (rgb_to_yuv_var(x) - rgb_to_yuv_var(y)).square();
    d.sum_axes(&[1, 2, 3]).mul_scalar(1.0 / pixels).sqrt().mean()
}

/// Mean squared error over all elements.
pub fn decode_mse_var<'t, T: Real>(cp: Var<'t, T>, decoded: Var<'t, T>) -> Var<'t, T> {
    assert_eq!(cp.shape(), decoded.shape(), "decode_mse inputs must share a shape");
    (cp - decoded).square().mean()
}

/// Unweighted loss terms and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub enc: f64,
    pub dec: f64,
    pub yuv: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [("loss_enc", self.enc), ("loss_dec", self.dec), ("loss_yuv", self.yuv), ("loss_total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// `lambda1 * lpips(host, encoded) + lambda2 * mse(badge, decoded) + yuv_l2(host, encoded)`.
pub fn total_loss_var<'t, T: Real>(
    host: Var<'t, T>,
    encoded: Var<'t, T>,
    badge: Var<'t, T>,
    decoded: Var<'t, T>,
    weights: &LossWeights,
    backend: &PerceptualBackend,
) -> (Var<'t, T>, LossBreakdown) {
    let enc = backend.distance_var(host, encoded);
    let dec = decode_mse_var(badge, decoded);
    let yuv = yuv_l2_var(host, encoded);
    let total = enc.mul_scalar(weights.lambda1) + dec.mul_scalar(weights.lambda2) + yuv;
    let scalar = |v: Var<'t, T>| v.value().item().as_f64();
    let breakdown = LossBreakdown {
        total: scalar(total),
        enc: scalar(enc),
        dec: scalar(dec),
        yuv: scalar(yuv),
    };
    (total, breakdown)
}

fn pair<'t>(tape: &'t Tape<f64>, x: &ImageTensor, y: &ImageTensor) -> Result<(Var<'t, f64>, Var<'t, f64>)> {
    ensure!(x.same_shape(y), "loss inputs must share a shape");
    let a = ImageTensor::batch(std::slice::from_ref(x))?.cast();
    let b = ImageTensor::batch(std::slice::from_ref(y))?.cast();
    Ok((tape.constant(a), tape.constant(b)))
}

pub fn lpips(x: &ImageTensor, y: &ImageTensor, backend: &PerceptualBackend) -> Result<f64> {
    let tape = Tape::new();
    let (a, b) = pair(&tape, x, y)?;
    Ok(backend.distance_var(a, b).value().item())
}

pub fn yuv_l2(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    let tape = Tape::new();
    let (a, b) = pair(&tape, x, y)?;
    Ok(yuv_l2_var(a, b).value().item())
}

pub fn decode_mse(cp: &ImageTensor, decoded: &ImageTensor) -> Result<f64> {
    let tape = Tape::new();
    let (a, b) = pair(&tape, cp, decoded)?;
    Ok(decode_mse_var(a, b).value().item())
}

pub fn total_loss(
    host: &ImageTensor,
    encoded: &ImageTensor,
    badge: &ImageTensor,
    decoded: &ImageTensor,
    weights: &LossWeights,
    backend: &PerceptualBackend,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let (h, e) = pair(&tape, host, encoded)?;
    let (b, d) = pair(&tape, badge, decoded)?;
    Ok(total_loss_var(h, e, b, d, weights, backend).1)
}
