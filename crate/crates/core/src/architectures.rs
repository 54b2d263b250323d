//! The three disaggregation networks, their training loop and checkpoints.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{encode_rectangle, Batch, Target, TargetKind, TrainingPair};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{export_params, import_params, TensorRecord};
use crate::nn::{
    clip_gradients, loss_and_gradients, ActivationFn, Bidirectional, Border, Conv1d, Dense, Layer, LayerDesc, NesterovSgd, Network,
    Tensor, DEFAULT_BPTT_STEPS, DEFAULT_CLIP,
};
use crate::scalar::Scalar;

pub const CONV_FILTER_SIZE: usize = 4;

/// Samples trimmed from each end of the window by the two `valid`
/// convolutions of the autoencoder.
pub const DAE_HALO: usize = CONV_FILTER_SIZE - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchitectureKind {
    Lstm,
    Dae,
    Rectangles,
}

impl ArchitectureKind {
    pub const ALL: [ArchitectureKind; 3] = [ArchitectureKind::Lstm, ArchitectureKind::Dae, ArchitectureKind::Rectangles];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchitectureKind::Lstm => "lstm",
            ArchitectureKind::Dae => "dae",
            ArchitectureKind::Rectangles => "rectangles",
        }
    }

    pub fn default_update_budget(self) -> usize {
        match self {
            ArchitectureKind::Lstm => 10_000,
            ArchitectureKind::Dae => 100_000,
            ArchitectureKind::Rectangles => 300_000,
        }
    }

    pub fn target_kind(self) -> TargetKind {
        match self {
            ArchitectureKind::Rectangles => TargetKind::Rectangle,
            _ => TargetKind::Power,
        }
    }
}

impl fmt::Display for ArchitectureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchitectureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(ArchitectureKind::Lstm),
            "dae" => Ok(ArchitectureKind::Dae),
            "rectangles" => Ok(ArchitectureKind::Rectangles),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?}; expected one of lstm, dae, rectangles"
            ))),
        }
    }
}

/// Complete description of one network and how it is trained.
///
/// `hidden` holds, per kind:
/// - `lstm`: `[bilstm_1, bilstm_2, dense]` units, full size `[128, 256, 128]`
/// - `dae`: `[code]`, full size `[128]`
/// - `rectangles`: the dense chain before the output, full size `[4096, 3072, 2048, 512]`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub kind: ArchitectureKind,
    pub window_width: usize,
    pub conv_filters: usize,
    pub hidden: Vec<usize>,
    pub update_budget: usize,
    pub batch_size: usize,
    pub gradient_clip: Option<f64>,
    pub bptt_steps: Option<usize>,
}

impl ArchitectureSpec {
    pub fn paper(kind: ArchitectureKind, window_width: usize) -> Self {
        let (conv_filters, hidden, batch_size, gradient_clip) = match kind {
            ArchitectureKind::Lstm => (16, vec![128, 256, 128], 16, Some(DEFAULT_CLIP)),
            ArchitectureKind::Dae => (8, vec![128], 64, None),
            ArchitectureKind::Rectangles => (16, vec![4096, 3072, 2048, 512], 64, None),
        };
        ArchitectureSpec {
            kind,
            window_width,
            conv_filters,
            hidden,
            update_budget: kind.default_update_budget(),
            batch_size,
            gradient_clip,
            bptt_steps: Some(DEFAULT_BPTT_STEPS),
        }
    }

    /// Shrinks hidden widths (and the update budget) by integer factors,
    /// keeping every width at least 1.
    pub fn scaled(mut self, width_divisor: usize, budget_divisor: usize) -> Self {
        let w = width_divisor.max(1);
        self.hidden.iter_mut().for_each(|h| *h = (*h / w).max(1));
        self.update_budget /= budget_divisor.max(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let min_width = match self.kind {
            ArchitectureKind::Lstm => 1,
            ArchitectureKind::Dae | ArchitectureKind::Rectangles => 9,
        };
        if self.window_width < min_width {
            return Err(Error::InvalidParams(format!(
                "{} needs a window of at least {min_width} samples, got {}",
                self.kind, self.window_width
            )));
        }
        let expected_hidden = match self.kind {
            ArchitectureKind::Lstm => 3,
            ArchitectureKind::Dae => 1,
            ArchitectureKind::Rectangles => 4,
        };
        if self.hidden.len() != expected_hidden || self.hidden.contains(&0) || self.conv_filters == 0 {
            return Err(Error::InvalidParams(format!(
                "{} needs {expected_hidden} positive hidden widths and conv filters",
                self.kind
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParams("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Samples per window emitted by the network (3 for rectangles).
    pub fn output_len(&self) -> usize {
        match self.kind {
            ArchitectureKind::Lstm => self.window_width,
            ArchitectureKind::Dae => self.window_width - 2 * DAE_HALO,
            ArchitectureKind::Rectangles => 3,
        }
    }

    /// Position within the window of the first output sample.
    pub fn output_offset(&self) -> usize {
        match self.kind {
            ArchitectureKind::Dae => DAE_HALO,
            _ => 0,
        }
    }

    pub fn build<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Network<T>> {
        self.validate()?;
        let w = self.window_width;
        let f = self.conv_filters;
        let k = CONV_FILTER_SIZE;
        let h = &self.hidden;
        let linear = ActivationFn::Linear;
        let relu = ActivationFn::Relu;
        let mut net = match self.kind {
            ArchitectureKind::Lstm => Network::new(vec![
                Layer::Conv1d(Conv1d::new(1, k, 1, f, Border::Same, linear, rng)?),
                Layer::BiLstm(Bidirectional::new(f, h[0], rng)),
                Layer::BiLstm(Bidirectional::new(2 * h[0], h[1], rng)),
                Layer::Dense(Dense::new(2 * h[1], h[2], ActivationFn::Tanh, rng)),
                Layer::Dense(Dense::new(h[2], 1, linear, rng)),
            ]),
            ArchitectureKind::Dae => {
                let t = w - DAE_HALO;
                let flat = t * f;
                Network::new(vec![
                    Layer::Conv1d(Conv1d::new(1, k, 1, f, Border::Valid, linear, rng)?),
                    Layer::Reshape { time: 1, channels: flat },
                    Layer::Dense(Dense::new(flat, flat, relu, rng)),
                    Layer::Dense(Dense::new(flat, h[0], relu, rng)),
                    Layer::Dense(Dense::new(h[0], flat, relu, rng)),
                    Layer::Reshape { time: t, channels: f },
                    Layer::Conv1d(Conv1d::new(f, k, 1, 1, Border::Valid, linear, rng)?),
                ])
            }
            ArchitectureKind::Rectangles => {
                let flat = (w - 2 * DAE_HALO) * f;
                Network::new(vec![
                    Layer::Conv1d(Conv1d::new(1, k, 1, f, Border::Valid, linear, rng)?),
                    Layer::Conv1d(Conv1d::new(f, k, 1, f, Border::Valid, linear, rng)?),
                    Layer::Reshape { time: 1, channels: flat },
                    Layer::Dense(Dense::new(flat, h[0], relu, rng)),
                    Layer::Dense(Dense::new(h[0], h[1], relu, rng)),
                    Layer::Dense(Dense::new(h[1], h[2], relu, rng)),
                    Layer::Dense(Dense::new(h[2], h[3], relu, rng)),
                    Layer::Dense(Dense::new(h[3], 3, linear, rng)),
                ])
            }
        };
        net.set_bptt_steps(self.bptt_steps);
        Ok(net)
    }

    /// The layer stack `build` produces, without allocating parameters.
    pub fn expected_layers(&self) -> Vec<LayerDesc> {
        let conv = |filters, border| LayerDesc::Conv1d {
            filter_size: CONV_FILTER_SIZE,
            stride: 1,
            filters,
            activation: ActivationFn::Linear,
            border,
        };
        let dense = |units, activation| LayerDesc::Dense { units, activation };
        let h = &self.hidden;
        let f = self.conv_filters;
        match self.kind {
            ArchitectureKind::Lstm => vec![
                conv(f, Border::Same),
                LayerDesc::Bilstm {
                    units: h[0],
                    peepholes: true,
                },
                LayerDesc::Bilstm {
                    units: h[1],
                    peepholes: true,
                },
                dense(h[2], ActivationFn::Tanh),
                dense(1, ActivationFn::Linear),
            ],
            ArchitectureKind::Dae => {
                let t = self.window_width - DAE_HALO;
                vec![
                    conv(f, Border::Valid),
                    LayerDesc::Reshape { time: 1, channels: t * f },
                    dense(t * f, ActivationFn::Relu),
                    dense(h[0], ActivationFn::Relu),
                    dense(t * f, ActivationFn::Relu),
                    LayerDesc::Reshape { time: t, channels: f },
                    conv(1, Border::Valid),
                ]
            }
            ArchitectureKind::Rectangles => {
                let flat = (self.window_width - 2 * DAE_HALO) * f;
                vec![
                    conv(f, Border::Valid),
                    conv(f, Border::Valid),
                    LayerDesc::Reshape { time: 1, channels: flat },
                    dense(h[0], ActivationFn::Relu),
                    dense(h[1], ActivationFn::Relu),
                    dense(h[2], ActivationFn::Relu),
                    dense(h[3], ActivationFn::Relu),
                    dense(3, ActivationFn::Linear),
                ]
            }
        }
    }

    /// `[B, W, 1]` standardised inputs.
    pub fn input_tensor<T: Scalar>(&self, inputs: &[&[f64]]) -> Result<Tensor<T>> {
        let w = self.window_width;
        let mut data = Vec::with_capacity(inputs.len() * w);
        for x in inputs {
            if x.len() != w {
                return Err(Error::dim("input", format!("window of {w}"), x.len()));
            }
            data.extend(x.iter().map(|&v| T::lit(v)));
        }
        Tensor::from_vec(&[inputs.len(), w, 1], data)
    }

    /// Network-shaped target for one pair: the full window (lstm), its
    /// centre `W - 6` samples (dae) or the rectangle triple.
    pub fn target_values(&self, pair: &TrainingPair) -> Result<Vec<f64>> {
        match (self.kind, &pair.target) {
            (ArchitectureKind::Rectangles, Target::Rectangle(r)) => Ok(r.as_array().to_vec()),
            (ArchitectureKind::Rectangles, Target::Power(p)) => Ok(encode_rectangle(p).as_array().to_vec()),
            (_, Target::Power(p)) if p.len() == self.window_width => {
                let off = self.output_offset();
                Ok(p[off..off + self.output_len()].to_vec())
            }
            (kind, _) => Err(Error::dim(
                "target",
                format!("{kind} target for a window of {}", self.window_width),
                "incompatible target",
            )),
        }
    }

    pub fn batch_tensors<T: Scalar>(&self, batch: &[TrainingPair]) -> Result<(Tensor<T>, Tensor<T>)> {
        let inputs: Vec<&[f64]> = batch.iter().map(|p| p.input.as_slice()).collect();
        let x = self.input_tensor(&inputs)?;
        let mut targets = Vec::with_capacity(batch.len() * self.output_len());
        for p in batch {
            targets.extend(self.target_values(p)?.into_iter().map(T::lit));
        }
        let shape = match self.kind {
            ArchitectureKind::Rectangles => [batch.len(), 1, 3],
            _ => [batch.len(), self.output_len(), 1],
        };
        Ok((x, Tensor::from_vec(&shape, targets)?))
    }
}

/// Full-size LSTM for a window of `window_width` samples.
pub fn build_lstm<T: Scalar, R: Rng + ?Sized>(window_width: usize, rng: &mut R) -> Result<Network<T>> {
    ArchitectureSpec::paper(ArchitectureKind::Lstm, window_width).build(rng)
}

/// Full-size denoising autoencoder; output covers the centre `L - 6` samples.
pub fn build_dae<T: Scalar, R: Rng + ?Sized>(window_width: usize, rng: &mut R) -> Result<Network<T>> {
    ArchitectureSpec::paper(ArchitectureKind::Dae, window_width).build(rng)
}

/// Full-size start/end/power regressor.
pub fn build_rectangles<T: Scalar, R: Rng + ?Sized>(window_width: usize, rng: &mut R) -> Result<Network<T>> {
    ArchitectureSpec::paper(ArchitectureKind::Rectangles, window_width).build(rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub smoothed_loss: f64,
    /// Seconds since training started; `None` when wall-clock recording is off.
    pub wallclock_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub update_budget: usize,
    pub log_every: usize,
    /// Weight of the newest loss in the exponential moving average.
    pub smoothing: f64,
    pub checkpoint_every: Option<usize>,
    pub record_wallclock: bool,
}

impl TrainOptions {
    pub fn new(update_budget: usize) -> Self {
        TrainOptions {
            update_budget,
            log_every: 10,
            smoothing: 0.05,
            checkpoint_every: None,
            record_wallclock: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub records: Vec<LossRecord>,
    pub final_smoothed_loss: Option<f64>,
}

/// Training stopped early; the network holds the last finite parameters.
#[derive(Debug)]
pub struct TrainFailure {
    pub step: usize,
    pub report: TrainReport,
    pub error: Error,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training stopped at step {}: {}", self.step, self.error)
    }
}

impl std::error::Error for TrainFailure {}

/// Runs `options.update_budget` Nesterov-SGD updates on batches from
/// `batches`, minimising MSE. `on_checkpoint` fires every
/// `checkpoint_every` steps and once at the end.
pub fn train<T, I, F>(
    spec: &ArchitectureSpec,
    network: &mut Network<T>,
    batches: I,
    optimizer: &mut NesterovSgd<T>,
    options: &TrainOptions,
    mut on_checkpoint: F,
) -> std::result::Result<TrainReport, TrainFailure>
where
    T: Scalar,
    I: IntoIterator<Item = Result<Batch>>,
    F: FnMut(usize, &Network<T>) -> Result<()>,
{
    let started = Instant::now();
    let mut report = TrainReport {
        steps: 0,
        records: Vec::new(),
        final_smoothed_loss: None,
    };
    let mut smoothed: Option<f64> = None;
    let mut batches = batches.into_iter();
    let fail = |step: usize, report: &TrainReport, error: Error| TrainFailure {
        step,
        report: report.clone(),
        error,
    };
    for step in 1..=options.update_budget {
        let batch = match batches.next() {
            Some(Ok(b)) => b,
            Some(Err(e)) => return Err(fail(step, &report, e)),
            None => return Err(fail(step, &report, Error::Empty("batch stream ended".into()))),
        };
        let (x, y) = spec.batch_tensors::<T>(&batch).map_err(|e| fail(step, &report, e))?;
        let (loss, mut grads) = loss_and_gradients(network, &x, &y).map_err(|e| fail(step, &report, e))?;
        if let Some(bound) = spec.gradient_clip {
            clip_gradients(&mut grads, T::lit(bound));
        }
        optimizer
            .step(&mut network.params_mut(), &grads)
            .map_err(|e| fail(step, &report, e))?;
        let loss = loss.as_f64();
        let s = match smoothed {
            Some(prev) => prev + options.smoothing * (loss - prev),
            None => loss,
        };
        smoothed = Some(s);
        optimizer.observe(step, s);
        report.steps = step;
        report.final_smoothed_loss = smoothed;
        if options.log_every > 0 && (step % options.log_every == 0 || step == 1) {
            report.records.push(LossRecord {
                step,
                loss,
                smoothed_loss: s,
                wallclock_s: options.record_wallclock.then(|| started.elapsed().as_secs_f64()),
            });
        }
        if let Some(every) = options.checkpoint_every {
            if every > 0 && step % every == 0 && step != options.update_budget {
                on_checkpoint(step, network).map_err(|e| fail(step, &report, e))?;
            }
        }
    }
    on_checkpoint(report.steps, network).map_err(|e| fail(report.steps, &report, e))?;
    Ok(report)
}

/// Loss log as `step,loss,smoothed_loss,wallclock_s`.
pub fn loss_log_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("step,loss,smoothed_loss,wallclock_s\n");
    for r in records {
        let wall = r.wallclock_s.map(|w| format!("{w:.3}")).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.smoothed_loss, wall));
    }
    out
}

pub const CHECKPOINT_FORMAT: &str = "nilm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing parameter container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub appliance: String,
    pub architecture: ArchitectureSpec,
    pub manifest_hash: String,
    pub step: usize,
    pub layers: Vec<LayerDesc>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(appliance: &str, spec: &ArchitectureSpec, manifest_hash: &str, step: usize, network: &Network<T>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            appliance: appliance.into(),
            architecture: spec.clone(),
            manifest_hash: manifest_hash.into(),
            step,
            layers: network.describe(),
            tensors: export_params(network),
        }
    }

    /// `<appliance>_<kind>_<step>`
    pub fn file_stem(appliance: &str, kind: ArchitectureKind, step: usize) -> String {
        format!("{appliance}_{kind}_{step}")
    }

    pub fn restore<T: Scalar>(&self) -> Result<Network<T>> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net: Network<T> = self.architecture.build(&mut rng)?;
        if net.describe() != self.layers {
            return Err(Error::Checkpoint("layer stack differs from the architecture".into()));
        }
        import_params(&mut net, &self.tensors)?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
