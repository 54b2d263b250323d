//! Power time series: CSV ingestion, resampling, gap filling and appliance
//! activation extraction.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical sub-meter sample period in seconds.
pub const DEFAULT_SAMPLE_PERIOD: u32 = 6;

/// Gaps up to this many seconds are forward-filled; longer gaps become zeros.
pub const MAX_FORWARD_FILL_SECS: i64 = 180;

/// Uniformly sampled power demand in watts. Sample `i` sits at
/// `start_time + i * sample_period`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSeries {
    start_time: i64,
    sample_period: u32,
    values: Vec<f64>,
}

impl PowerSeries {
    pub fn new(start_time: i64, sample_period: u32, values: Vec<f64>) -> Result<Self> {
        if sample_period == 0 {
            return Err(Error::InvalidSeries("sample period must be positive".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidSeries(format!(
                "sample {i} is {} (values must be finite and non-negative)",
                values[i]
            )));
        }
        Ok(PowerSeries {
            start_time,
            sample_period,
            values,
        })
    }

    pub fn empty(sample_period: u32) -> Self {
        PowerSeries {
            start_time: 0,
            sample_period: sample_period.max(1),
            values: Vec::new(),
        }
    }

    pub fn start_time(&self) -> i64 {
        self.start_time
    }

    pub fn sample_period(&self) -> u32 {
        self.sample_period
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, index: usize) -> i64 {
        self.start_time + index as i64 * self.sample_period as i64
    }

    /// Samples `[from, to)` as a new series on the same grid.
    pub fn slice(&self, from: usize, to: usize) -> PowerSeries {
        let to = to.min(self.len());
        let from = from.min(to);
        PowerSeries {
            start_time: self.timestamp(from),
            sample_period: self.sample_period,
            values: self.values[from..to].to_vec(),
        }
    }
}

/// Arguments of the activation detector, all in watts or seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationParams {
    pub max_power: f64,
    pub on_power_threshold: f64,
    pub min_on_duration: f64,
    pub min_off_duration: f64,
}

impl ActivationParams {
    pub const KETTLE: Self = Self::new(3100.0, 2000.0, 12.0, 0.0);
    pub const FRIDGE: Self = Self::new(300.0, 50.0, 60.0, 12.0);
    pub const WASHING_MACHINE: Self = Self::new(2500.0, 20.0, 1800.0, 160.0);
    pub const MICROWAVE: Self = Self::new(3000.0, 200.0, 12.0, 30.0);
    pub const DISH_WASHER: Self = Self::new(2500.0, 10.0, 1800.0, 1800.0);

    pub const fn new(max_power: f64, on_power_threshold: f64, min_on_duration: f64, min_off_duration: f64) -> Self {
        ActivationParams {
            max_power,
            on_power_threshold,
            min_on_duration,
            min_off_duration,
        }
    }

    /// Default detector settings for the five standard appliance classes.
    pub fn for_appliance(name: &str) -> Option<Self> {
        match name {
            "kettle" => Some(Self::KETTLE),
            "fridge" => Some(Self::FRIDGE),
            "washing_machine" | "washing machine" => Some(Self::WASHING_MACHINE),
            "microwave" => Some(Self::MICROWAVE),
            "dish_washer" | "dish washer" => Some(Self::DISH_WASHER),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.max_power,
            self.on_power_threshold,
            self.min_on_duration,
            self.min_off_duration,
        ];
        if fields.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::InvalidParams("activation parameters must be finite and >= 0".into()));
        }
        if self.on_power_threshold > self.max_power {
            return Err(Error::InvalidParams(format!(
                "on_power_threshold {} exceeds max_power {}",
                self.on_power_threshold, self.max_power
            )));
        }
        Ok(())
    }
}

/// One complete appliance cycle. `source_offset` indexes the series it was
/// extracted from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub source_offset: usize,
    pub values: Vec<f64>,
}

impl Activation {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn end(&self) -> usize {
        self.source_offset + self.values.len()
    }
}

/// Raw `(timestamp, watts)` rows of a channel CSV, validated for sign and
/// ordering but not yet placed on a grid.
pub fn read_csv_samples(path: impl AsRef<Path>) -> Result<Vec<(i64, f64)>> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    parse_csv_samples(&text)
}

/// Parses `timestamp,watts` text. A leading non-numeric row is taken as the
/// header. Line numbers in errors are 1-based and count data rows only when
/// no header is present, physical lines otherwise.
pub fn parse_csv_samples(text: &str) -> Result<Vec<(i64, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out: Vec<(i64, f64)> = Vec::new();
    let mut header_seen = false;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let physical = record.position().map(|p| p.line()).unwrap_or(i as u64 + 1);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if record.len() != 2 {
            return Err(Error::Parse {
                line: physical,
                message: format!("expected 2 columns, found {}", record.len()),
            });
        }
        let (ts, w) = (&record[0], &record[1]);
        let timestamp = match ts.parse::<i64>() {
            Ok(t) => t,
            Err(_) if out.is_empty() && !header_seen => {
                header_seen = true;
                continue;
            }
            Err(e) => {
                return Err(Error::Parse {
                    line: physical,
                    message: format!("bad timestamp {ts:?}: {e}"),
                })
            }
        };
        let watts: f64 = w.parse().map_err(|e| Error::Parse {
            line: physical,
            message: format!("bad power value {w:?}: {e}"),
        })?;
        if !watts.is_finite() {
            return Err(Error::Parse {
                line: physical,
                message: format!("non-finite power value {w:?}"),
            });
        }
        if watts < 0.0 {
            return Err(Error::NegativePower { line: physical });
        }
        if let Some(&(prev, _)) = out.last() {
            if timestamp <= prev {
                return Err(Error::Ordering { line: physical });
            }
        }
        out.push((timestamp, watts));
    }
    Ok(out)
}

/// Reads a channel CSV onto a uniform grid of `sample_period` seconds
/// anchored at the first timestamp, then fills gaps.
pub fn load_csv(path: impl AsRef<Path>, sample_period: u32) -> Result<PowerSeries> {
    let samples = read_csv_samples(path)?;
    fill_gaps(&samples, sample_period, MAX_FORWARD_FILL_SECS)
}

/// Places `(timestamp, value)` pairs on the grid anchored at the first
/// timestamp. Off-grid timestamps snap to the nearest slot; when two samples
/// land in the same slot the later one wins. Missing slots are `None`.
pub fn snap_to_grid(samples: &[(i64, f64)], sample_period: u32) -> (i64, Vec<Option<f64>>) {
    let Some(&(t0, _)) = samples.first() else {
        return (0, Vec::new());
    };
    let p = sample_period as i64;
    let slot_of = |t: i64| -> usize {
        let d = t - t0;
        ((d + p / 2).div_euclid(p)) as usize
    };
    let last = slot_of(samples[samples.len() - 1].0);
    let mut slots = vec![None; last + 1];
    for &(t, v) in samples {
        slots[slot_of(t)] = Some(v);
    }
    (t0, slots)
}

/// Builds a gap-free series from irregular samples. Runs of missing slots
/// lasting at most `max_forward_fill` seconds repeat the last value; longer
/// runs are zero.
pub fn fill_gaps(samples: &[(i64, f64)], sample_period: u32, max_forward_fill: i64) -> Result<PowerSeries> {
    if sample_period == 0 {
        return Err(Error::InvalidSeries("sample period must be positive".into()));
    }
    let (start, slots) = snap_to_grid(samples, sample_period);
    let mut values = Vec::with_capacity(slots.len());
    let mut i = 0;
    while i < slots.len() {
        match slots[i] {
            Some(v) => {
                values.push(v);
                i += 1;
            }
            None => {
                let run_end = slots[i..].iter().position(Option::is_some).map_or(slots.len(), |k| i + k);
                let missing = run_end - i;
                let gap_secs = missing as i64 * sample_period as i64;
                let fill = if gap_secs <= max_forward_fill {
                    values.last().copied().unwrap_or(0.0)
                } else {
                    0.0
                };
                values.extend(std::iter::repeat_n(fill, missing));
                i = run_end;
            }
        }
    }
    if samples.is_empty() {
        return Ok(PowerSeries::empty(sample_period));
    }
    PowerSeries::new(start, sample_period, values)
}

/// Trims two series on the same grid to their common time span. Grids with
/// different periods or phases are an alignment error.
pub fn align(a: &PowerSeries, b: &PowerSeries) -> Result<(PowerSeries, PowerSeries)> {
    if a.sample_period != b.sample_period {
        return Err(Error::Alignment(format!(
            "sample periods differ: {} s vs {} s",
            a.sample_period, b.sample_period
        )));
    }
    let p = a.sample_period as i64;
    if a.is_empty() || b.is_empty() {
        return Ok((PowerSeries::empty(a.sample_period), PowerSeries::empty(a.sample_period)));
    }
    if (a.start_time - b.start_time).rem_euclid(p) != 0 {
        return Err(Error::Alignment(format!(
            "grids start at timestamps {} and {}, which are not a whole number of {p} s periods apart",
            a.start_time, b.start_time
        )));
    }
    let start = a.start_time.max(b.start_time);
    let end = a.timestamp(a.len() - 1).min(b.timestamp(b.len() - 1));
    if end < start {
        return Ok((PowerSeries::empty(a.sample_period), PowerSeries::empty(a.sample_period)));
    }
    let cut = |s: &PowerSeries| {
        let from = ((start - s.start_time) / p) as usize;
        let to = ((end - s.start_time) / p) as usize + 1;
        s.slice(from, to)
    };
    Ok((cut(a), cut(b)))
}

/// Downsamples by averaging consecutive bins of `target_period / period`
/// samples. A partial trailing bin is dropped.
pub fn resample(series: &PowerSeries, target_period: u32) -> Result<PowerSeries> {
    let period = series.sample_period;
    if target_period == 0 || !target_period.is_multiple_of(period) {
        return Err(Error::UnsupportedRatio {
            from: period,
            to: target_period,
        });
    }
    let ratio = (target_period / period) as usize;
    if ratio == 1 {
        return Ok(series.clone());
    }
    let values = series
        .values
        .chunks_exact(ratio)
        .map(|bin| bin.iter().sum::<f64>() / ratio as f64)
        .collect();
    PowerSeries::new(series.start_time, target_period, values)
}

/// Finds appliance activations: maximal runs strictly above the on-power
/// threshold, merged across sub-threshold stretches shorter than the minimum
/// off duration, discarded when shorter than the minimum on duration, and
/// clipped to the maximum power.
pub fn extract_activations(series: &PowerSeries, params: &ActivationParams) -> Vec<Activation> {
    let values = series.values();
    let period = series.sample_period() as f64;

    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < values.len() {
        if values[i] > params.on_power_threshold {
            let start = i;
            while i < values.len() && values[i] > params.on_power_threshold {
                i += 1;
            }
            runs.push((start, i));
        } else {
            i += 1;
        }
    }

    let mut merged: Vec<(usize, usize)> = Vec::with_capacity(runs.len());
    for run in runs {
        match merged.last_mut() {
            Some(last) if ((run.0 - last.1) as f64 * period) < params.min_off_duration => last.1 = run.1,
            _ => merged.push(run),
        }
    }

    merged
        .into_iter()
        .filter(|&(s, e)| (e - s) as f64 * period >= params.min_on_duration)
        .map(|(s, e)| Activation {
            source_offset: s,
            values: values[s..e].iter().map(|v| v.min(params.max_power)).collect(),
        })
        .collect()
}
