//! Joint optimization of pre-encoder, encoder, decoder and STN under sampled
//! distortions, with warmup, checkpointing and a CSV metrics log.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use cpmark_tensor::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{stream_rng, BadgeMode, BadgeSet, Batch, BatchStream, Corpus, PURPOSE_DISTORTION};
use crate::distortions::{apply_var, sample_transform, DistortionKind, DistortionSpec, RobustnessConfig};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::losses::{total_loss_var, LossBreakdown, LossWeights, PerceptualBackend};
use crate::models::{init_state, load_checkpoint, save_checkpoint, ModelConfig, ModelState, OptimizerState, Params};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Header of the metrics log.
pub const METRICS_COLUMNS: [&str; 6] = ["step", "lr", "loss_total", "loss_enc", "loss_dec", "loss_yuv"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Linear warmup length; 5% of `total_steps` when absent.
    pub warmup_steps: Option<u64>,
    pub weights: LossWeights,
    pub robustness: RobustnessConfig,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 20,
            total_steps: 140_000,
            warmup_steps: None,
            weights: LossWeights::default(),
            robustness: RobustnessConfig::default(),
            seed: 0,
            checkpoint_every: 5000,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> u64 {
        self.warmup_steps.unwrap_or(self.total_steps / 20)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.warmup() > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup(),
                self.total_steps
            ));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        let w = &self.weights;
        if !(w.lambda1 >= 0.0 && w.lambda2 >= 0.0 && w.lambda1.is_finite() && w.lambda2.is_finite()) {
            return bad("loss weights must be finite and non-negative".into());
        }
        self.robustness.validate()
    }
}

/// Linear ramp over the warmup (`lr / warmup` at step 0), constant afterwards.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup();
    if warmup == 0 {
        cfg.lr
    } else {
        cfg.lr * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

/// One Adam update with bias correction; `t` counts updates from 1.
pub fn adam_update(params: &mut Params, opt: &mut OptimizerState, grads: &[Tensor<f32>], lr: f64, t: u64) {
    let (c1, c2) = (1.0 - ADAM_BETA1.powf(t as f64), 1.0 - ADAM_BETA2.powf(t as f64));
    let step = (lr * c2.sqrt() / c1) as f32;
    let eps = (ADAM_EPS * c2.sqrt()) as f32;
    let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
    for (((p, m), v), g) in params
        .tensors_mut()
        .iter_mut()
        .zip(opt.m.iter_mut())
        .zip(opt.v.iter_mut())
        .zip(grads)
    {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            p[i] -= step * m[i] / (v[i].sqrt() + eps);
        }
    }
}

/// Applies one distortion per sample; all-`None` batches pass through untouched.
pub fn distort_batch<'t>(encoded: Var<'t, f32>, specs: &[DistortionSpec]) -> Var<'t, f32> {
    if specs.iter().all(|s| s.kind() == DistortionKind::None) {
        return encoded;
    }
    let parts: Vec<Var<'t, f32>> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| apply_var(s, encoded.narrow(0, i, 1)))
        .collect();
    Var::cat(&parts, 0)
}

/// Outcome of one [`train_step`].
#[derive(Clone, Debug)]
pub struct StepReport {
    pub losses: LossBreakdown,
    pub lr: f64,
    pub distortions: Vec<DistortionSpec>,
    /// Largest perturbation magnitude in the batch.
    pub max_abs_delta: f32,
}

/// Forward, loss, backward and one Adam update of all parameters.
///
/// Fails without touching `state` when the loss or a gradient is non-finite.
pub fn train_step(
    state: &mut ModelState,
    batch: &Batch,
    badges: &BadgeSet,
    cfg: &TrainConfig,
    backend: &PerceptualBackend,
    rng: &mut impl Rng,
) -> Result<StepReport> {
    let diverged = |term: &str| Error::Diverged {
        step: state.step,
        term: term.to_string(),
        checkpoint: PathBuf::new(),
    };
    let n = batch.hosts.len();
    let specs = (0..n)
        .map(|_| sample_transform(rng, &cfg.robustness))
        .collect::<Result<Vec<_>>>()?;
    let lr = lr_schedule(state.step, cfg);

    let tape = Tape::<f32>::new();
    let net = state.bind(&tape, true);
    let hosts = tape.constant(ImageTensor::batch(&batch.hosts)?);
    let shape = hosts.shape();
    let (features, targets) = match badges.mode() {
        BadgeMode::Single => {
            let badge = tape.constant(ImageTensor::batch(&badges.badges()[..1])?);
            let f = net.pre_encode(badge);
            let mut fshape = f.shape();
            fshape[0] = n;
            (f.expand(fshape), badge.expand(shape.clone()))
        }
        BadgeMode::Multi => {
            let imgs: Vec<ImageTensor> = batch.badges(badges).into_iter().cloned().collect();
            let b = tape.constant(ImageTensor::batch(&imgs)?);
            (net.pre_encode(b), b)
        }
    };
    let delta = net.encode(hosts, features);
    let encoded = (hosts + delta).clamp(0.0, 1.0);
    let decoded = net.decode(distort_batch(encoded, &specs));
    let (loss, losses) = total_loss_var(hosts, encoded, targets, decoded, &cfg.weights, backend);
    if let Some(term) = losses.non_finite_term() {
        return Err(diverged(term));
    }
    let max_abs_delta = delta.value().max_abs();

    let grads = tape.backward(loss);
    let grads: Vec<Tensor<f32>> = net.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(diverged(&format!("gradient of {}", state.params.names()[i])));
    }
    drop(net);
    let t = state.step + 1;
    adam_update(&mut state.params, &mut state.optimizer, &grads, lr, t);
    state.step = t;
    Ok(StepReport {
        losses,
        lr,
        distortions: specs,
        max_abs_delta,
    })
}

/// Where training writes its artifacts and what it records with them.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
    /// Stored verbatim in every checkpoint header.
    pub run_meta: Value,
}

impl TrainOutput {
    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("ckpt-{step:08}.bin"))
    }

    pub fn final_path(&self) -> PathBuf {
        self.dir.join("final.bin")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
}

/// Result of [`train`] / [`resume`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub state: ModelState,
    /// Losses of the steps run by this call, in order.
    pub losses: Vec<LossBreakdown>,
}

struct MetricsLog {
    writer: csv::Writer<fs::File>,
}

impl MetricsLog {
    fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            writer.write_record(METRICS_COLUMNS).map_err(|e| csv_err(path, e))?;
        }
        Ok(Self { writer })
    }

    fn append(&mut self, path: &Path, step: u64, lr: f64, l: &LossBreakdown) -> Result<()> {
        let row = [
            step.to_string(),
            format!("{lr:e}"),
            l.total.to_string(),
            l.enc.to_string(),
            l.dec.to_string(),
            l.yuv.to_string(),
        ];
        self.writer.write_record(&row).map_err(|e| csv_err(path, e))?;
        self.writer.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn run(
    mut state: ModelState,
    cfg: &TrainConfig,
    corpus: Corpus,
    badges: &BadgeSet,
    backend: &PerceptualBackend,
    out: &TrainOutput,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    let digests = badges.digests();
    let mut stream = BatchStream::new(corpus, state.config.image_side, cfg.batch_size, cfg.seed)?;
    let metrics_path = out.metrics_path();
    let mut log = MetricsLog::open(&metrics_path)?;
    let mut losses = Vec::new();
    while state.step < cfg.total_steps {
        let step = state.step;
        let batch = stream.batch_at(step, badges)?;
        let mut rng = stream_rng(cfg.seed, PURPOSE_DISTORTION, step);
        match train_step(&mut state, &batch, badges, cfg, backend, &mut rng) {
            Ok(report) => {
                log.append(&metrics_path, step, report.lr, &report.losses)?;
                losses.push(report.losses);
                if state.step % cfg.checkpoint_every == 0 && state.step < cfg.total_steps {
                    save_checkpoint(&out.checkpoint_path(state.step), &state, &out.run_meta, &digests)?;
                }
                if step % 100 == 0 {
                    log::info!(
                        "step {step}: total {:.5} enc {:.5} dec {:.5} yuv {:.5}",
                        report.losses.total,
                        report.losses.enc,
                        report.losses.dec,
                        report.losses.yuv
                    );
                }
            }
            Err(Error::Diverged { step, term, .. }) => {
                let checkpoint = out.dir.join(format!("diverged-{step:08}.bin"));
                save_checkpoint(&checkpoint, &state, &out.run_meta, &digests)?;
                return Err(Error::Diverged { step, term, checkpoint });
            }
            Err(e) => return Err(e),
        }
    }
    let checkpoint = out.final_path();
    save_checkpoint(&checkpoint, &state, &out.run_meta, &digests)?;
    Ok(TrainOutcome {
        checkpoint,
        state,
        losses,
    })
}

/// Trains from a fresh initialization seeded by `cfg.seed`.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    corpus: Corpus,
    badges: &BadgeSet,
    backend: &PerceptualBackend,
    out: &TrainOutput,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_badges(model, badges)?;
    run(init_state(model, cfg.seed)?, cfg, corpus, badges, backend, out)
}

/// Continues from a checkpoint up to `cfg.total_steps`; the loss stream matches
/// an uninterrupted run with the same seed.
pub fn resume(
    checkpoint: &Path,
    cfg: &TrainConfig,
    corpus: Corpus,
    badges: &BadgeSet,
    backend: &PerceptualBackend,
    out: &TrainOutput,
) -> Result<TrainOutcome> {
    let ck = load_checkpoint(checkpoint)?;
    check_badges(&ck.state.config, badges)?;
    if !ck.badge_digests.is_empty() && ck.badge_digests != badges.digests() {
        log::warn!("resuming with a badge set that differs from the checkpoint's");
    }
    run(ck.state, cfg, corpus, badges, backend, out)
}

fn check_badges(model: &ModelConfig, badges: &BadgeSet) -> Result<()> {
    let b = &badges.badges()[0];
    if b.height() != model.image_side || b.width() != model.image_side {
        return Err(Error::Data(format!(
            "badges are {}x{}, model expects {}",
            b.height(),
            b.width(),
            model.image_side
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_defaults_to_five_percent() {
        let cfg = TrainConfig {
            total_steps: 2000,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.warmup(), 100);
        assert!((lr_schedule(0, &cfg) - cfg.lr / 100.0).abs() < 1e-18);
        assert_eq!(lr_schedule(100, &cfg), cfg.lr);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { lr: 0.0, ..ok.clone() },
            TrainConfig { warmup_steps: Some(10), total_steps: 5, ..ok.clone() },
            TrainConfig { checkpoint_every: 0, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = Params::new(vec![("w".into(), Tensor::new([2], vec![1.0, -1.0]))]);
        let mut opt = OptimizerState {
            m: vec![Tensor::zeros([2])],
            v: vec![Tensor::zeros([2])],
        };
        let g = [Tensor::new([2], vec![0.5, -3.0])];
        adam_update(&mut params, &mut opt, &g, 0.01, 1);
        // bias-corrected first step is lr * sign(g)
        let p = params.get("w").unwrap().data();
        assert!((p[0] - 0.99).abs() < 1e-6 && (p[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn undistorted_batch_passes_through() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 16, 16], |i| (i % 13) as f32 / 13.0));
        let y = distort_batch(x, &[DistortionSpec::None, DistortionSpec::None]);
        assert_eq!(y.value(), x.value());
        assert_eq!(tape.len(), 1);
    }
}
