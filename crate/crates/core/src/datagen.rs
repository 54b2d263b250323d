//! Training pairs: windows of real aggregate data, synthetic aggregates built
//! from an activation library, input standardisation, target scaling, the
//! rectangle target encoding, and the 50:50 batch stream.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeseries::Activation;

pub type HouseId = String;

/// Default number of windows pooled when estimating the input scale.
pub const DEFAULT_STD_SAMPLE_COUNT: usize = 1000;

/// Window width in samples for the five standard appliances.
pub fn default_window_width(appliance: &str) -> Option<usize> {
    match appliance {
        "kettle" => Some(128),
        "fridge" => Some(512),
        "dish_washer" | "dish washer" => Some(1536),
        "washing_machine" | "washing machine" => Some(1024),
        "microwave" => Some(288),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub appliance_id: String,
    pub window_width: usize,
    /// Target scaling divisor, watts.
    pub max_power: f64,
    /// Dataset-level input scale, watts.
    pub input_std: f64,
}

impl WindowSpec {
    pub fn new(appliance_id: impl Into<String>, window_width: usize, max_power: f64, input_std: f64) -> Result<Self> {
        let spec = WindowSpec {
            appliance_id: appliance_id.into(),
            window_width,
            max_power,
            input_std,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_width == 0 {
            return Err(Error::InvalidParams("window_width must be positive".into()));
        }
        if !(self.max_power > 0.0 && self.max_power.is_finite()) {
            return Err(Error::InvalidParams("max_power must be positive".into()));
        }
        if !(self.input_std > 0.0 && self.input_std.is_finite()) {
            return Err(Error::InvalidParams("input_std must be positive".into()));
        }
        Ok(())
    }
}

/// Start, end (fractions of the window) and mean height (fraction of
/// `max_power`) of the first target activation. All zero when absent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RectangleTriple {
    pub start: f64,
    pub end: f64,
    pub height: f64,
}

impl RectangleTriple {
    pub const NONE: Self = RectangleTriple {
        start: 0.0,
        end: 0.0,
        height: 0.0,
    };

    pub fn as_array(&self) -> [f64; 3] {
        [self.start, self.end, self.height]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        RectangleTriple {
            start: v[0],
            end: v[1],
            height: v[2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Power(Vec<f64>),
    Rectangle(RectangleTriple),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairOrigin {
    Real,
    Synthetic,
}

/// Where an activation was placed in a window. `offset` may be negative for
/// distractors that only partially overlap the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub class: String,
    pub house: HouseId,
    /// Index of the activation within its library class (synthetic pairs) or
    /// within the house's activation list (real pairs).
    pub index: usize,
    pub offset: isize,
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    /// Standardised aggregate window.
    pub input: Vec<f64>,
    pub target: Target,
    pub origin: PairOrigin,
    pub placements: Vec<Placement>,
}

impl TrainingPair {
    /// Scaled power target; panics on rectangle targets.
    pub fn power_target(&self) -> &[f64] {
        match &self.target {
            Target::Power(v) => v,
            Target::Rectangle(_) => panic!("pair carries a rectangle target"),
        }
    }

    /// Re-encodes a power target as a rectangle triple.
    pub fn into_rectangle(self) -> TrainingPair {
        match self.target {
            Target::Power(ref v) => {
                let rect = encode_rectangle(v);
                TrainingPair {
                    target: Target::Rectangle(rect),
                    ..self
                }
            }
            Target::Rectangle(_) => self,
        }
    }
}

/// A pair before standardisation, in watts.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPair {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub origin: PairOrigin,
    pub placements: Vec<Placement>,
}

impl RawPair {
    pub fn finish(self, spec: &WindowSpec) -> TrainingPair {
        TrainingPair {
            input: standardize_input(&self.input, spec.input_std),
            target: Target::Power(scale_target(&self.target, spec.max_power)),
            origin: self.origin,
            placements: self.placements,
        }
    }
}

/// Centres the window on its own mean and divides by the dataset-level scale.
pub fn standardize_input(window: &[f64], input_std: f64) -> Vec<f64> {
    if window.is_empty() {
        return Vec::new();
    }
    let mean = window.iter().sum::<f64>() / window.len() as f64;
    window.iter().map(|v| (v - mean) / input_std).collect()
}

/// Population standard deviation of the samples pooled from `sample_count`
/// windows drawn with replacement.
pub fn estimate_input_std<R: Rng + ?Sized>(windows: &[Vec<f64>], sample_count: usize, rng: &mut R) -> Result<f64> {
    if windows.is_empty() || sample_count == 0 {
        return Err(Error::Empty("no training windows to estimate the input scale from".into()));
    }
    let mut n = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for _ in 0..sample_count {
        let w = &windows[rng.random_range(0..windows.len())];
        for &x in w {
            n += 1;
            let d = x - mean;
            mean += d / n as f64;
            m2 += d * (x - mean);
        }
    }
    if n == 0 {
        return Err(Error::Empty("training windows are empty".into()));
    }
    let std = (m2 / n as f64).sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::ZeroVariance);
    }
    Ok(std)
}

/// `window / max_power`, clipped to `[0, 1]`.
pub fn scale_target(window: &[f64], max_power: f64) -> Vec<f64> {
    window.iter().map(|v| (v / max_power).clamp(0.0, 1.0)).collect()
}

/// Encodes a scaled target holding at most one activation as
/// `(first on index / W, (last on index + 1) / W, mean over the span)`.
pub fn encode_rectangle(target: &[f64]) -> RectangleTriple {
    let width = target.len() as f64;
    let Some(first) = target.iter().position(|&v| v > 0.0) else {
        return RectangleTriple::NONE;
    };
    let last = target.iter().rposition(|&v| v > 0.0).unwrap_or(first);
    let span = &target[first..=last];
    RectangleTriple {
        start: first as f64 / width,
        end: (last + 1) as f64 / width,
        height: span.iter().sum::<f64>() / span.len() as f64,
    }
}

/// Writes `activation` into a zero window of `width` samples starting at
/// `offset`; anything falling outside the window is dropped.
pub fn place_activation(width: usize, values: &[f64], offset: isize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    add_activation(&mut out, values, offset);
    out
}

fn add_activation(window: &mut [f64], values: &[f64], offset: isize) {
    for (i, &v) in values.iter().enumerate() {
        let pos = offset + i as isize;
        if pos >= 0 && (pos as usize) < window.len() {
            window[pos as usize] += v;
        }
    }
}

/// Offset of a target activation of `len` samples in a window of `width`:
/// uniform over positions that contain it completely, or 0 when it is longer
/// than the window.
fn contained_offset<R: Rng + ?Sized>(len: usize, width: usize, rng: &mut R) -> isize {
    if len >= width {
        0
    } else {
        rng.random_range(0..=(width - len)) as isize
    }
}

/// Offset of a distractor: uniform over `[-(len-1), width-1]`, so any
/// non-empty overlap is possible.
fn overlapping_offset<R: Rng + ?Sized>(len: usize, width: usize, rng: &mut R) -> isize {
    let lo = -(len.max(1) as isize - 1);
    rng.random_range(lo as i64..=(width as i64 - 1)) as isize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub house: HouseId,
    pub activation: Activation,
}

/// Train/test house assignment for one appliance.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HouseSplit {
    pub train: BTreeSet<HouseId>,
    pub test: BTreeSet<HouseId>,
}

impl HouseSplit {
    pub fn new<I, J, S>(train: I, test: J) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = S>,
        S: Into<HouseId>,
    {
        let split = HouseSplit {
            train: train.into_iter().map(Into::into).collect(),
            test: test.into_iter().map(Into::into).collect(),
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(h) = self.train.intersection(&self.test).next() {
            return Err(Error::Config(format!("house {h} is assigned to both train and test")));
        }
        Ok(())
    }
}

/// Activations per appliance class, each tagged with its house.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationLibrary {
    classes: BTreeMap<String, Vec<LibraryEntry>>,
}

impl ActivationLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, class: &str, house: &str, activations: impl IntoIterator<Item = Activation>) {
        let entries = self.classes.entry(class.to_string()).or_default();
        entries.extend(activations.into_iter().map(|activation| LibraryEntry {
            house: house.to_string(),
            activation,
        }));
    }

    /// Registers a class even when it has no activations yet.
    pub fn ensure_class(&mut self, class: &str) {
        self.classes.entry(class.to_string()).or_default();
    }

    pub fn class(&self, name: &str) -> &[LibraryEntry] {
        self.classes.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Only the activations recorded in `houses`.
    pub fn restrict_to(&self, houses: &BTreeSet<HouseId>) -> ActivationLibrary {
        let classes = self
            .classes
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    v.iter().filter(|e| houses.contains(&e.house)).cloned().collect(),
                )
            })
            .collect();
        ActivationLibrary { classes }
    }

    /// Splits into (train, test) libraries. No entry ends up in both.
    pub fn partition(&self, split: &HouseSplit) -> Result<(ActivationLibrary, ActivationLibrary)> {
        split.validate()?;
        Ok((self.restrict_to(&split.train), self.restrict_to(&split.test)))
    }
}

/// Aggregate mains and target-appliance activations of one house, on the
/// same sample grid.
#[derive(Debug, Clone)]
pub struct RealHouse {
    pub house: HouseId,
    pub aggregate: Arc<Vec<f64>>,
    pub activations: Vec<Activation>,
    free_starts: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RealBranch {
    Exclude,
    Include,
}

impl RealHouse {
    pub fn new(house: impl Into<HouseId>, aggregate: Arc<Vec<f64>>, activations: Vec<Activation>, window_width: usize) -> Self {
        let n = aggregate.len();
        let mut covered = vec![0u32; n + 1];
        for a in &activations {
            for i in a.source_offset..a.end().min(n) {
                covered[i + 1] = 1;
            }
        }
        for i in 0..n {
            covered[i + 1] += covered[i];
        }
        let free_starts = if n >= window_width {
            (0..=n - window_width)
                .filter(|&s| covered[s + window_width] == covered[s])
                .collect()
        } else {
            Vec::new()
        };
        RealHouse {
            house: house.into(),
            aggregate,
            activations,
            free_starts,
        }
    }

    /// Activations that can be positioned inside a window of this width
    /// without running off the recorded aggregate.
    fn offset_range(&self, index: usize, width: usize) -> Option<(usize, usize)> {
        let a = &self.activations[index];
        let n = self.aggregate.len();
        if n < width || a.end() > n {
            return None;
        }
        if a.len() >= width {
            return (a.source_offset + width <= n).then_some((0, 0));
        }
        let lo = (a.source_offset + width).saturating_sub(n);
        let hi = (width - a.len()).min(a.source_offset);
        (lo <= hi).then_some((lo, hi))
    }

    pub fn has_free_window(&self) -> bool {
        !self.free_starts.is_empty()
    }

    pub fn placeable(&self, width: usize) -> Vec<usize> {
        (0..self.activations.len())
            .filter(|&i| self.offset_range(i, width).is_some())
            .collect()
    }

    /// Window with no target activity starting at `start`.
    pub fn exclude_window(&self, start: usize, width: usize) -> RawPair {
        RawPair {
            input: self.aggregate[start..start + width].to_vec(),
            target: vec![0.0; width],
            origin: PairOrigin::Real,
            placements: Vec::new(),
        }
    }

    /// Window in which activation `index` sits at `offset` samples from the
    /// window start. Only that activation is copied into the target.
    pub fn include_window(&self, index: usize, offset: usize, width: usize) -> RawPair {
        let a = &self.activations[index];
        let start = a.source_offset - offset;
        RawPair {
            input: self.aggregate[start..start + width].to_vec(),
            target: place_activation(width, &a.values, offset as isize),
            origin: PairOrigin::Real,
            placements: vec![Placement {
                class: String::new(),
                house: self.house.clone(),
                index,
                offset: offset as isize,
                is_target: true,
            }],
        }
    }

    /// Draws one real window. With probability 0.5 the window holds no
    /// target activation; otherwise a random activation is positioned
    /// uniformly so it is fully contained. Falls back to the other branch
    /// when the drawn one is impossible.
    pub fn select_window<R: Rng + ?Sized>(&self, width: usize, rng: &mut R) -> Result<RawPair> {
        let branch = if rng.random_bool(0.5) {
            RealBranch::Include
        } else {
            RealBranch::Exclude
        };
        self.select_window_branch(branch, width, rng)
    }

    pub fn select_window_branch<R: Rng + ?Sized>(&self, branch: RealBranch, width: usize, rng: &mut R) -> Result<RawPair> {
        let placeable = self.placeable(width);
        let branch = match branch {
            RealBranch::Include if placeable.is_empty() => RealBranch::Exclude,
            RealBranch::Exclude if self.free_starts.is_empty() => RealBranch::Include,
            b => b,
        };
        match branch {
            RealBranch::Exclude if !self.free_starts.is_empty() => {
                let start = self.free_starts[rng.random_range(0..self.free_starts.len())];
                Ok(self.exclude_window(start, width))
            }
            RealBranch::Include if !placeable.is_empty() => {
                let index = placeable[rng.random_range(0..placeable.len())];
                let (lo, hi) = self.offset_range(index, width).expect("placeable");
                let offset = rng.random_range(lo..=hi);
                Ok(self.include_window(index, offset, width))
            }
            _ => Err(Error::Empty(format!(
                "house {} has no aggregate window of {width} samples",
                self.house
            ))),
        }
    }
}

/// Real-aggregate windows drawn from several houses (house chosen uniformly).
#[derive(Debug, Clone)]
pub struct RealWindowSource {
    houses: Vec<RealHouse>,
    spec: WindowSpec,
}

impl RealWindowSource {
    pub fn new(houses: Vec<RealHouse>, spec: WindowSpec) -> Result<Self> {
        let houses: Vec<RealHouse> = houses
            .into_iter()
            .filter(|h| h.has_free_window() || !h.placeable(spec.window_width).is_empty())
            .collect();
        if houses.is_empty() {
            return Err(Error::Empty(format!(
                "no house has {} samples of aggregate data",
                spec.window_width
            )));
        }
        Ok(RealWindowSource { houses, spec })
    }

    pub fn houses(&self) -> &[RealHouse] {
        &self.houses
    }

    pub fn spec(&self) -> &WindowSpec {
        &self.spec
    }

    pub fn set_input_std(&mut self, input_std: f64) {
        self.spec.input_std = input_std;
    }

    pub fn raw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<RawPair> {
        let house = &self.houses[rng.random_range(0..self.houses.len())];
        let mut raw = house.select_window(self.spec.window_width, rng)?;
        for p in &mut raw.placements {
            p.class.clone_from(&self.spec.appliance_id);
        }
        Ok(raw)
    }

    pub fn pair<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TrainingPair> {
        Ok(self.raw(rng)?.finish(&self.spec))
    }
}

/// Synthetic aggregates assembled from a (training-house) activation library.
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    library: ActivationLibrary,
    target_class: String,
    spec: WindowSpec,
}

pub const TARGET_INCLUSION_PROBABILITY: f64 = 0.5;
pub const DISTRACTOR_INCLUSION_PROBABILITY: f64 = 0.25;

impl SyntheticSource {
    pub fn new(library: ActivationLibrary, target_class: impl Into<String>, spec: WindowSpec) -> Self {
        SyntheticSource {
            library,
            target_class: target_class.into(),
            spec,
        }
    }

    pub fn library(&self) -> &ActivationLibrary {
        &self.library
    }

    pub fn spec(&self) -> &WindowSpec {
        &self.spec
    }

    pub fn set_input_std(&mut self, input_std: f64) {
        self.spec.input_std = input_std;
    }

    /// Builds a synthetic window from explicit placements: `(class, index,
    /// offset)`. The target contribution is the entry of the target class.
    pub fn compose(&self, placements: &[(String, usize, isize)]) -> RawPair {
        let width = self.spec.window_width;
        let mut input = vec![0.0; width];
        let mut target = vec![0.0; width];
        let mut out = Vec::with_capacity(placements.len());
        for (class, index, offset) in placements {
            let entry = &self.library.class(class)[*index];
            add_activation(&mut input, &entry.activation.values, *offset);
            let is_target = *class == self.target_class;
            if is_target {
                add_activation(&mut target, &entry.activation.values, *offset);
            }
            out.push(Placement {
                class: class.clone(),
                house: entry.house.clone(),
                index: *index,
                offset: *offset,
                is_target,
            });
        }
        RawPair {
            input,
            target,
            origin: PairOrigin::Synthetic,
            placements: out,
        }
    }

    pub fn raw<R: Rng + ?Sized>(&self, rng: &mut R) -> RawPair {
        let width = self.spec.window_width;
        let mut placements = Vec::new();
        for class in self.library.class_names() {
            let is_target = class == self.target_class;
            let p = if is_target {
                TARGET_INCLUSION_PROBABILITY
            } else {
                DISTRACTOR_INCLUSION_PROBABILITY
            };
            if !rng.random_bool(p) {
                continue;
            }
            let entries = self.library.class(class);
            if entries.is_empty() {
                continue;
            }
            let index = rng.random_range(0..entries.len());
            let len = entries[index].activation.len();
            let offset = if is_target {
                contained_offset(len, width, rng)
            } else {
                overlapping_offset(len, width, rng)
            };
            placements.push((class.to_string(), index, offset));
        }
        self.compose(&placements)
    }

    pub fn pair<R: Rng + ?Sized>(&self, rng: &mut R) -> TrainingPair {
        self.raw(rng).finish(&self.spec)
    }
}

/// Unstandardised inputs drawn half from each source, for estimating the
/// input scale.
pub fn sample_raw_windows<R: Rng + ?Sized>(
    real: &RealWindowSource,
    synth: &SyntheticSource,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let raw = if i % 2 == 0 { real.raw(rng)? } else { synth.raw(rng) };
        out.push(raw.input);
    }
    Ok(out)
}

/// Which target representation batches carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetKind {
    Power,
    Rectangle,
}

pub type Batch = Vec<TrainingPair>;

/// Endless 50:50 stream of real and synthetic pairs, deterministic for a
/// given seed. The first half of each batch is real.
pub struct BatchStream {
    real: RealWindowSource,
    synth: SyntheticSource,
    batch_size: usize,
    target_kind: TargetKind,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(real: RealWindowSource, synth: SyntheticSource, batch_size: usize, target_kind: TargetKind, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidParams("batch_size must be positive".into()));
        }
        if real.spec().window_width != synth.spec().window_width {
            return Err(Error::InvalidParams("real and synthetic window widths differ".into()));
        }
        Ok(BatchStream {
            real,
            synth,
            batch_size,
            target_kind,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn split(&self) -> (usize, usize) {
        let real = self.batch_size / 2;
        (real, self.batch_size - real)
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let (n_real, n_synth) = self.split();
        let mut batch = Vec::with_capacity(self.batch_size);
        for _ in 0..n_real {
            batch.push(self.real.pair(&mut self.rng)?);
        }
        for _ in 0..n_synth {
            batch.push(self.synth.pair(&mut self.rng));
        }
        if self.target_kind == TargetKind::Rectangle {
            batch = batch.into_iter().map(TrainingPair::into_rectangle).collect();
        }
        Ok(batch)
    }

    /// Moves generation onto a producer thread with `capacity` batches of
    /// look-ahead.
    pub fn spawn(mut self, capacity: usize) -> BatchReceiver {
        let (tx, rx) = sync_channel(capacity.max(1));
        let handle = std::thread::spawn(move || loop {
            let batch = self.next_batch();
            let failed = batch.is_err();
            if tx.send(batch).is_err() || failed {
                break;
            }
        });
        BatchReceiver {
            rx: Some(rx),
            handle: Some(handle),
        }
    }
}

impl Iterator for BatchStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

/// Consumer end of a spawned [`BatchStream`].
pub struct BatchReceiver {
    rx: Option<Receiver<Result<Batch>>>,
    handle: Option<JoinHandle<()>>,
}

impl Iterator for BatchReceiver {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl Drop for BatchReceiver {
    fn drop(&mut self) {
        // Closing the channel unblocks the producer's pending send.
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
