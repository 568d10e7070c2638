//! Parameter layout and forward passes of the four networks.
//!
//! Layout (names are the checkpoint keys, `C` = base channels, `ch(l) = C 2^l`):
//!
//! - `pre.{0..5}`: 3x3 convolutions, 3 -> C then C -> C, stride 1.
//! - `enc.*`, `dec.*`: U-Nets. `in` (3x3, cin -> C); per level `l = 1..=depth`
//!   `down{l}.a` (3x3 stride 2, ch(l-1) -> ch(l)) and `down{l}.b`; on the way up
//!   `up{l}.a` (ch(l) -> ch(l-1) at the coarse scale), nearest upsampling, skip
//!   concatenation, `up{l}.b` (2 ch(l-1) -> ch(l-1)); `head` (1x1 -> 3). The
//!   decoder pads its convolutions by reflection, the encoder by zeros.
//! - `stn.conv{0,1,2}` (3x3 stride 2: 3 -> 8 -> 16 -> 32), global mean,
//!   `stn.fc1` (32 -> hidden), `stn.fc2` (hidden -> 6, zero weights, identity bias).

use std::collections::HashMap;

use cpmark_tensor::{Real, Tape, Tensor, Var, IDENTITY_AFFINE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;

const SLOPE: f64 = 0.2;
const STN_WIDTHS: [usize; 3] = [8, 16, 32];

#[derive(Clone, Copy, Debug)]
enum Init {
    /// He-uniform for LeakyReLU, scaled by the factor.
    He(f64),
    Zero,
    Identity,
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

fn conv(out: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize, k: usize, gain: f64) {
    out.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![cout, cin, k, k],
        init: Init::He(gain),
    });
    out.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![cout],
        init: Init::Zero,
    });
}

fn unet_layout(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cfg: &ModelConfig) {
    let ch = |l: usize| cfg.base_channels << l;
    conv(out, &format!("{prefix}.in"), cin, ch(0), 3, 1.0);
    for l in 1..=cfg.depth {
        conv(out, &format!("{prefix}.down{l}.a"), ch(l - 1), ch(l), 3, 1.0);
        conv(out, &format!("{prefix}.down{l}.b"), ch(l), ch(l), 3, 1.0);
    }
    for l in (1..=cfg.depth).rev() {
        conv(out, &format!("{prefix}.up{l}.a"), ch(l), ch(l - 1), 3, 1.0);
        conv(out, &format!("{prefix}.up{l}.b"), 2 * ch(l - 1), ch(l - 1), 3, 1.0);
    }
    conv(out, &format!("{prefix}.head"), ch(0), 3, 1, cfg.head_gain);
}

pub(crate) fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let c = cfg.base_channels;
    for i in 0..cfg.pre_encoder_layers {
        conv(&mut out, &format!("pre.{i}"), if i == 0 { 3 } else { c }, c, 3, 1.0);
    }
    unet_layout(&mut out, "enc", 3 + c, cfg);
    unet_layout(&mut out, "dec", 3, cfg);
    let mut cin = 3;
    for (i, &w) in STN_WIDTHS.iter().enumerate() {
        conv(&mut out, &format!("stn.conv{i}"), cin, w, 3, 1.0);
        cin = w;
    }
    out.push(ParamSpec {
        name: "stn.fc1.w".into(),
        shape: vec![cin, cfg.stn_hidden],
        init: Init::He(1.0),
    });
    out.push(ParamSpec {
        name: "stn.fc1.b".into(),
        shape: vec![cfg.stn_hidden],
        init: Init::Zero,
    });
    out.push(ParamSpec {
        name: "stn.fc2.w".into(),
        shape: vec![cfg.stn_hidden, 6],
        init: Init::Zero,
    });
    out.push(ParamSpec {
        name: "stn.fc2.b".into(),
        shape: vec![6],
        init: Init::Identity,
    });
    out
}

pub(crate) fn initialize(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    match spec.init {
        Init::Zero => Tensor::zeros(spec.shape.clone()),
        Init::Identity => Tensor::new(spec.shape.clone(), IDENTITY_AFFINE.map(|v| v as f32).to_vec()),
        Init::He(gain) => {
            // fan-in: everything but the output axis (axis 0 for convs, axis 1 for FC (in, out))
            let fan_in: usize = if spec.shape.len() == 4 {
                spec.shape[1..].iter().product()
            } else {
                spec.shape[0]
            };
            let bound = gain * (6.0 / ((1.0 + SLOPE * SLOPE) * fan_in as f64)).sqrt();
            Tensor::from_fn(spec.shape.clone(), |_| rng.random_range(-bound..bound) as f32)
        }
    }
}

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Parameters bound to a tape, with the forward passes of every network.
pub struct Forward<'a, 't, T: Real> {
    cfg: &'a ModelConfig,
    index: &'a HashMap<String, usize>,
    vars: Vec<Var<'t, T>>,
}

/// Border handling of 3x3 convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Padding {
    Zero,
    /// Mirror padding without repeating the edge sample.
    Reflect,
}

impl<'a, 't, T: Real> Forward<'a, 't, T> {
    pub(crate) fn new(
        tape: &'t Tape<T>,
        cfg: &'a ModelConfig,
        index: &'a HashMap<String, usize>,
        tensors: &[Tensor<f32>],
        trainable: bool,
    ) -> Self {
        let vars = tensors
            .iter()
            .map(|t| {
                let v = t.cast::<T>();
                if trainable {
                    tape.leaf(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect();
        Self { cfg, index, vars }
    }

    /// Parameter variables in checkpoint order.
    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    fn p(&self, name: &str) -> Var<'t, T> {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    fn conv(&self, x: Var<'t, T>, name: &str, stride: usize) -> Var<'t, T> {
        self.conv_padded(x, name, stride, Padding::Zero)
    }

    fn conv_act(&self, x: Var<'t, T>, name: &str, stride: usize) -> Var<'t, T> {
        self.conv(x, name, stride).leaky_relu(SLOPE)
    }

    fn conv_padded(&self, x: Var<'t, T>, name: &str, stride: usize, padding: Padding) -> Var<'t, T> {
        let w = self.p(&format!("{name}.w"));
        let b = Some(self.p(&format!("{name}.b")));
        let pad = w.shape()[2] / 2;
        let shape = x.shape();
        if pad == 0 || pad >= shape[2].min(shape[3]) {
            return x.conv2d(w, b, stride, pad);
        }
        match padding {
            Padding::Zero => x.conv2d(w, b, stride, pad),
            Padding::Reflect => x.pad_reflect(pad, pad, pad, pad).conv2d(w, b, stride, 0),
        }
    }

    /// Badge features `(n, C, h, w)` at full resolution.
    pub fn pre_encode(&self, badge: Var<'t, T>) -> Var<'t, T> {
        let n = self.cfg.pre_encoder_layers;
        let mut h = badge;
        for i in 0..n {
            h = self.conv(h, &format!("pre.{i}"), 1);
            if i + 1 < n {
                h = h.leaky_relu(SLOPE);
            }
        }
        h
    }

    fn unet(&self, prefix: &str, x: Var<'t, T>, padding: Padding) -> Var<'t, T> {
        let conv_act = |x, name: String, stride| self.conv_padded(x, &name, stride, padding).leaky_relu(SLOPE);
        let shape = x.shape();
        let (h, w) = (shape[2], shape[3]);
        let m = 1 << self.cfg.depth;
        let (ph, pw) = (h.next_multiple_of(m) - h, w.next_multiple_of(m) - w);
        let x = if ph + pw > 0 { x.pad_reflect(0, ph, 0, pw) } else { x };

        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut y = conv_act(x, format!("{prefix}.in"), 1);
        for l in 1..=self.cfg.depth {
            skips.push(y);
            y = conv_act(y, format!("{prefix}.down{l}.a"), 2);
            y = conv_act(y, format!("{prefix}.down{l}.b"), 1);
        }
        for l in (1..=self.cfg.depth).rev() {
            y = conv_act(y, format!("{prefix}.up{l}.a"), 1).upsample_nearest(2);
            y = Var::cat(&[y, skips.pop().expect("one skip per level")], 1);
            y = conv_act(y, format!("{prefix}.up{l}.b"), 1);
        }
        let y = self.conv_padded(y, &format!("{prefix}.head"), 1, padding);
        if ph + pw > 0 {
            y.crop(0, 0, h, w)
        } else {
            y
        }
    }

    /// Perturbation `alpha tanh(E(cat(host, features)))`, optionally clamped to `[-eps, eps]`.
    pub fn encode(&self, host: Var<'t, T>, features: Var<'t, T>) -> Var<'t, T> {
        let delta = self
            .unet("enc", Var::cat(&[host, features], 1), Padding::Zero)
            .tanh()
            .mul_scalar(self.cfg.alpha);
        match self.cfg.epsilon {
            Some(eps) => delta.clamp(-eps, eps),
            None => delta,
        }
    }

    /// Affine parameters `(n, 6)` predicted by the localization net.
    pub fn stn_theta(&self, x: Var<'t, T>) -> Var<'t, T> {
        let mut h = x;
        for i in 0..STN_WIDTHS.len() {
            h = self.conv_act(h, &format!("stn.conv{i}"), 2);
        }
        let n = h.shape()[0];
        let pooled = h.mean_axes(&[2, 3]).reshape([n, STN_WIDTHS[2]]);
        let dense = |v: Var<'t, T>, name: &str| {
            let w = self.p(&format!("{name}.w"));
            let b = self.p(&format!("{name}.b"));
            let out = w.shape()[1];
            v.matmul(w) + b.reshape([1, out]).expand([n, out])
        };
        dense(dense(pooled, "stn.fc1").leaky_relu(SLOPE), "stn.fc2")
    }

    pub fn stn(&self, x: Var<'t, T>) -> Var<'t, T> {
        x.affine_grid_sample(self.stn_theta(x))
    }

    /// Decoded badge `sigmoid(D(stn(x)))`.
    pub fn decode(&self, x: Var<'t, T>) -> Var<'t, T> {
        self.unet("dec", self.stn(x), Padding::Reflect).sigmoid()
    }
}
