//! Sliding-window inference over long aggregates and overlap combination.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::architectures::{ArchitectureKind, ArchitectureSpec};
use crate::datagen::{standardize_input, RectangleTriple, WindowSpec};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::scalar::Scalar;
use crate::timeseries::PowerSeries;

pub const DEFAULT_PROBABILITY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisaggConfig {
    pub stride: usize,
    pub power_threshold: f64,
    pub probability_threshold: f64,
}

impl DisaggConfig {
    pub fn new(stride: usize, power_threshold: f64) -> Self {
        DisaggConfig {
            stride,
            power_threshold,
            probability_threshold: DEFAULT_PROBABILITY_THRESHOLD,
        }
    }

    pub fn validate(&self, window_width: usize) -> Result<()> {
        if self.stride == 0 || self.stride > window_width {
            return Err(Error::Config(format!(
                "stride must lie in 1..={window_width}, got {}",
                self.stride
            )));
        }
        if !(0.0..=1.0).contains(&self.probability_threshold) || !self.power_threshold.is_finite() {
            return Err(Error::Config("thresholds out of range".into()));
        }
        Ok(())
    }
}

/// What one window's prediction covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    /// `len` samples starting `offset` samples into the window.
    Power { offset: usize, len: usize },
    Rectangle,
}

/// One standardised window handed to a predictor. `origin` is the position
/// of its first sample relative to the unpadded aggregate (negative inside
/// the leading padding).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowInput {
    pub origin: isize,
    pub values: Vec<f64>,
}

/// Anything that maps standardised windows to scaled outputs.
pub trait WindowPredictor: Sync {
    fn window_width(&self) -> usize;
    fn output_kind(&self) -> OutputKind;
    /// One output vector per window: power samples in `[0, 1]` units, or a
    /// `(start, end, height)` triple.
    fn predict(&self, windows: &[WindowInput]) -> Result<Vec<Vec<f64>>>;
}

pub struct NetworkPredictor<T> {
    pub network: Network<T>,
    pub spec: ArchitectureSpec,
    pub batch_size: usize,
}

impl<T: Scalar> NetworkPredictor<T> {
    pub fn new(network: Network<T>, spec: ArchitectureSpec) -> Self {
        NetworkPredictor {
            network,
            batch_size: spec.batch_size.max(1),
            spec,
        }
    }
}

impl<T: Scalar> WindowPredictor for NetworkPredictor<T> {
    fn window_width(&self) -> usize {
        self.spec.window_width
    }

    fn output_kind(&self) -> OutputKind {
        match self.spec.kind {
            ArchitectureKind::Rectangles => OutputKind::Rectangle,
            _ => OutputKind::Power {
                offset: self.spec.output_offset(),
                len: self.spec.output_len(),
            },
        }
    }

    fn predict(&self, windows: &[WindowInput]) -> Result<Vec<Vec<f64>>> {
        let per = self.spec.output_len();
        let chunks: Vec<Result<Vec<Vec<f64>>>> = windows
            .par_chunks(self.batch_size)
            .map(|chunk| {
                let inputs: Vec<&[f64]> = chunk.iter().map(|w| w.values.as_slice()).collect();
                let x = self.spec.input_tensor::<T>(&inputs)?;
                let y = self.network.forward(&x)?.to_f64();
                Ok(y.chunks(per).map(<[f64]>::to_vec).collect())
            })
            .collect();
        let mut out = Vec::with_capacity(windows.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WindowPrediction {
    /// Watts at absolute positions `start..start + values.len()`.
    Power { start: isize, values: Vec<f64> },
    Rectangle(RectangleTriple),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowOutput {
    pub origin: isize,
    pub prediction: WindowPrediction,
}

/// Window origins after padding the series with `width` zeros on each side.
pub fn window_origins(len: usize, width: usize, stride: usize) -> Vec<isize> {
    let padded = len + 2 * width;
    (0..)
        .map(|k| k * stride)
        .take_while(|&s| s + width <= padded)
        .map(|s| s as isize - width as isize)
        .collect()
}

pub fn slide<P: WindowPredictor + ?Sized>(predictor: &P, aggregate: &[f64], window: &WindowSpec, config: &DisaggConfig) -> Result<Vec<WindowOutput>> {
    let width = predictor.window_width();
    if width != window.window_width {
        return Err(Error::dim("disaggregate", format!("window of {}", window.window_width), width));
    }
    config.validate(width)?;
    if aggregate.is_empty() {
        return Ok(Vec::new());
    }
    let origins = window_origins(aggregate.len(), width, config.stride);
    let inputs: Vec<WindowInput> = origins
        .iter()
        .map(|&origin| {
            let raw: Vec<f64> = (0..width as isize)
                .map(|i| {
                    let p = origin + i;
                    if p >= 0 && (p as usize) < aggregate.len() {
                        aggregate[p as usize]
                    } else {
                        0.0
                    }
                })
                .collect();
            WindowInput {
                origin,
                values: standardize_input(&raw, window.input_std),
            }
        })
        .collect();
    let raw = predictor.predict(&inputs)?;
    if raw.len() != inputs.len() {
        return Err(Error::dim("predictor", inputs.len(), raw.len()));
    }
    let kind = predictor.output_kind();
    origins
        .into_iter()
        .zip(raw)
        .map(|(origin, out)| {
            let prediction = match kind {
                OutputKind::Power { offset, len } => {
                    if out.len() != len {
                        return Err(Error::dim("predictor", len, out.len()));
                    }
                    WindowPrediction::Power {
                        start: origin + offset as isize,
                        values: out.iter().map(|v| v * window.max_power).collect(),
                    }
                }
                OutputKind::Rectangle => {
                    if out.len() != 3 {
                        return Err(Error::dim("predictor", 3, out.len()));
                    }
                    WindowPrediction::Rectangle(RectangleTriple::from_slice(&out))
                }
            };
            Ok(WindowOutput { origin, prediction })
        })
        .collect()
}

/// Per-sample mean of every power prediction covering it, clipped at zero.
/// Samples nobody covers are zero.
pub fn combine_mean(outputs: &[WindowOutput], len: usize) -> Vec<f64> {
    let mut sum = vec![0.0; len];
    let mut count = vec![0usize; len];
    for out in outputs {
        if let WindowPrediction::Power { start, values } = &out.prediction {
            for (i, v) in values.iter().enumerate() {
                let p = start + i as isize;
                if p >= 0 && (p as usize) < len {
                    sum[p as usize] += v;
                    count[p as usize] += 1;
                }
            }
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { (s / c as f64).max(0.0) })
        .collect()
}

/// Absolute `[start, end)` sample span and watts of a predicted rectangle,
/// or `None` when the span is empty.
pub fn decode_rectangle(triple: &RectangleTriple, origin: isize, window_width: usize, max_power: f64) -> Option<(isize, isize, f64)> {
    let w = window_width as f64;
    let start = origin + (triple.start.clamp(0.0, 1.0) * w).round() as isize;
    let end = origin + (triple.end.clamp(0.0, 1.0) * w).round() as isize;
    (end > start).then_some((start, end, triple.height * max_power))
}

/// Overlays predicted rectangles; returns `(watts, probability)`.
pub fn combine_rectangles(
    outputs: &[WindowOutput],
    len: usize,
    window_width: usize,
    max_power: f64,
    config: &DisaggConfig,
) -> (Vec<f64>, Vec<f64>) {
    let mut windows = vec![0usize; len];
    let mut rects = vec![0usize; len];
    let mut watts = vec![0.0; len];
    let clip = |a: isize| a.clamp(0, len as isize) as usize;
    for out in outputs {
        for c in &mut windows[clip(out.origin)..clip(out.origin + window_width as isize)] {
            *c += 1;
        }
        let WindowPrediction::Rectangle(triple) = &out.prediction else {
            continue;
        };
        if let Some((s, e, w)) = decode_rectangle(triple, out.origin, window_width, max_power) {
            if w > config.power_threshold {
                for p in clip(s)..clip(e) {
                    rects[p] += 1;
                    watts[p] += w;
                }
            }
        }
    }
    let mut power = vec![0.0; len];
    let mut probability = vec![0.0; len];
    for p in 0..len {
        if windows[p] == 0 {
            continue;
        }
        probability[p] = (rects[p] as f64 / windows[p] as f64).min(1.0);
        if rects[p] > 0 {
            let mean = watts[p] / rects[p] as f64;
            if probability[p] >= config.probability_threshold && mean >= config.power_threshold {
                power[p] = mean;
            }
        }
    }
    (power, probability)
}

/// Estimated appliance power on the aggregate's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSeries {
    pub series: PowerSeries,
    pub probability: Option<Vec<f64>>,
}

impl EstimateSeries {
    /// `timestamp,estimated_watts[,probability]`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("timestamp,estimated_watts");
        out.push_str(if self.probability.is_some() { ",probability\n" } else { "\n" });
        for (i, v) in self.series.values().iter().enumerate() {
            out.push_str(&format!("{},{}", self.series.timestamp(i), v));
            if let Some(p) = &self.probability {
                out.push_str(&format!(",{}", p[i]));
            }
            out.push('\n');
        }
        out
    }
}

/// Reads a `timestamp,estimated_watts[,probability]` file written by
/// [`EstimateSeries::to_csv`], checking that rows sit on a
/// `sample_period` grid.
pub fn read_estimate_csv(path: impl AsRef<std::path::Path>, sample_period: u32) -> Result<EstimateSeries> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            line: 0,
            message: format!("{other:?}"),
        },
    })?;
    let with_probability = reader.headers()?.len() == 3;
    let mut start = None;
    let mut values = Vec::new();
    let mut probability = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(i as u64 + 2, |p| p.line());
        let field = |k: usize| -> Result<f64> {
            record.get(k).and_then(|f| f.parse().ok()).ok_or_else(|| Error::Parse {
                line,
                message: format!("bad field {k}"),
            })
        };
        let ts: i64 = record.get(0).and_then(|f| f.parse().ok()).ok_or_else(|| Error::Parse {
            line,
            message: "bad timestamp".into(),
        })?;
        let t0 = *start.get_or_insert(ts);
        let expected = t0 + i as i64 * sample_period as i64;
        if ts != expected {
            return Err(Error::Alignment(format!(
                "{}: timestamp {ts} at line {line} is off the {sample_period} s grid (expected {expected})",
                path.display()
            )));
        }
        values.push(field(1)?);
        if with_probability {
            probability.push(field(2)?);
        }
    }
    Ok(EstimateSeries {
        series: PowerSeries::new(start.unwrap_or(0), sample_period, values)?,
        probability: with_probability.then_some(probability),
    })
}

/// Full pipeline: pad, slide, predict, combine.
pub fn disaggregate<P: WindowPredictor + ?Sized>(
    predictor: &P,
    aggregate: &PowerSeries,
    window: &WindowSpec,
    config: &DisaggConfig,
) -> Result<EstimateSeries> {
    let outputs = slide(predictor, aggregate.values(), window, config)?;
    let len = aggregate.len();
    let (values, probability) = match predictor.output_kind() {
        OutputKind::Power { .. } => (combine_mean(&outputs, len), None),
        OutputKind::Rectangle => {
            let (v, p) = combine_rectangles(&outputs, len, window.window_width, window.max_power, config);
            (v, Some(p))
        }
    };
    Ok(EstimateSeries {
        series: PowerSeries::new(aggregate.start_time(), aggregate.sample_period(), values)?,
        probability,
    })
}
