use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context as _, Result};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use nilm_core::architectures::{loss_log_csv, train as train_network, ArchitectureKind, Checkpoint, TrainOptions};
use nilm_core::baselines::{co_disaggregate, fhmm_disaggregate, fit_states, ApplianceStateModel};
use nilm_core::datagen::{
    estimate_input_std, sample_raw_windows, ActivationLibrary, BatchStream, RealHouse, RealWindowSource, SyntheticSource, Target,
    TargetKind, WindowSpec,
};
use nilm_core::disaggregate::{disaggregate, read_estimate_csv, DisaggConfig, EstimateSeries, NetworkPredictor};
use nilm_core::experiment::{sha256_hex, ApplianceConfig, ExperimentConfig, Manifest, Profile, MANIFEST_FORMAT, MANIFEST_VERSION};
use nilm_core::metrics::{MetricsReport, METRIC_NAMES};
use nilm_core::nn::{NesterovSgd, Network};
use nilm_core::timeseries::{align, extract_activations, load_csv, Activation, PowerSeries};
use nilm_core::Error;

/// Bad command-line usage (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub struct Context {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub profile: Profile,
    pub wallclock: bool,
}

impl Context {
    pub fn load(path: &Path, seed: Option<u64>, profile: Profile, wallclock: bool) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let config = ExperimentConfig::load(path)?;
        Ok(Context {
            seed: seed.unwrap_or(config.seed),
            config,
            config_hash: sha256_hex(&bytes),
            profile,
            wallclock,
        })
    }

    fn out(&self, parts: &[&str]) -> Result<PathBuf> {
        let mut p = self.config.output_dir.clone();
        for part in parts {
            p.push(part);
        }
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(p)
    }

    fn period(&self) -> u32 {
        self.config.sample_period
    }

    fn aggregate(&self, house: &str) -> Result<PowerSeries> {
        let files = self
            .config
            .houses
            .get(house)
            .ok_or_else(|| Error::Config(format!("house {house:?} is not defined")))?;
        Ok(load_csv(&files.aggregate, self.period())?)
    }

    fn channel(&self, house: &str, appliance: &str) -> Result<PowerSeries> {
        let path = self
            .config
            .houses
            .get(house)
            .and_then(|f| f.channels.get(appliance))
            .ok_or_else(|| Error::Config(format!("house {house:?} has no {appliance} channel configured")))?;
        Ok(load_csv(path, self.period())?)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActivationStore {
    appliance: String,
    sample_period: u32,
    houses: BTreeMap<String, HouseActivations>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HouseActivations {
    start_time: i64,
    samples: usize,
    activations: Vec<Activation>,
}

impl HouseActivations {
    /// Activations re-indexed onto `aggregate`'s grid; ones that do not fit
    /// inside it are dropped.
    fn on_grid(&self, aggregate: &PowerSeries) -> Result<Vec<Activation>> {
        let p = aggregate.sample_period() as i64;
        let shift = self.start_time - aggregate.start_time();
        if shift.rem_euclid(p) != 0 {
            return Err(Error::Alignment(format!(
                "channel grid at {} and aggregate grid at {} are out of phase",
                self.start_time,
                aggregate.start_time()
            ))
            .into());
        }
        let shift = shift / p;
        Ok(self
            .activations
            .iter()
            .filter_map(|a| {
                let start = a.source_offset as i64 + shift;
                (start >= 0 && start as usize + a.len() <= aggregate.len()).then(|| Activation {
                    source_offset: start as usize,
                    values: a.values.clone(),
                })
            })
            .collect())
    }
}

fn store_path(ctx: &Context, appliance: &str) -> Result<PathBuf> {
    ctx.out(&["activations", &format!("{appliance}.json")])
}

fn load_store(ctx: &Context, appliance: &str) -> Result<ActivationStore> {
    let path = store_path(ctx, appliance)?;
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })
        .with_context(|| format!("no activations for {appliance}; run `nilm extract` first"))?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

pub fn extract(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for app in &cfg.appliances {
        let params = app.activation_params()?;
        let mut store = ActivationStore {
            appliance: app.id.clone(),
            sample_period: ctx.period(),
            houses: BTreeMap::new(),
        };
        for house in app.train_houses.iter().chain(&app.test_houses) {
            let series = ctx.channel(house, &app.id)?;
            let activations = extract_activations(&series, &params);
            info!("{} house {house}: {} activations", app.id, activations.len());
            counts.entry(house.clone()).or_default().insert(app.id.clone(), activations.len());
            store.houses.insert(
                house.clone(),
                HouseActivations {
                    start_time: series.start_time(),
                    samples: series.len(),
                    activations,
                },
            );
        }
        write(&store_path(ctx, &app.id)?, serde_json::to_string(&store)?)?;
    }
    let mut table = String::from("house");
    for app in &cfg.appliances {
        table.push(',');
        table.push_str(&app.id);
    }
    table.push('\n');
    for (house, row) in &counts {
        table.push_str(house);
        for app in &cfg.appliances {
            table.push(',');
            match row.get(&app.id) {
                Some(n) => table.push_str(&n.to_string()),
                None => table.push('-'),
            }
        }
        table.push('\n');
    }
    write(&ctx.out(&["activations", "counts.csv"])?, &table)?;
    print!("{}", table.replace(',', "\t"));
    Ok(())
}

struct Prepared {
    real: RealWindowSource,
    synth: SyntheticSource,
    window: WindowSpec,
    rng: ChaCha8Rng,
}

fn prepare(ctx: &Context, app: &ApplianceConfig, window_width: usize) -> Result<Prepared> {
    let cfg = &ctx.config;
    let params = app.activation_params()?;
    let split = app.split()?;
    let target = load_store(ctx, &app.id)?;

    let mut library = ActivationLibrary::new();
    for other in &cfg.appliances {
        library.ensure_class(&other.id);
        let store = if other.id == app.id {
            None
        } else {
            match load_store(ctx, &other.id) {
                Ok(s) => Some(s),
                Err(e) => {
                    warn!("skipping distractor {}: {e:#}", other.id);
                    continue;
                }
            }
        };
        let store = store.as_ref().unwrap_or(&target);
        for (house, h) in &store.houses {
            if split.train.contains(house) {
                library.add(&other.id, house, h.activations.iter().cloned());
            }
        }
    }

    let mut houses = Vec::new();
    for house in &app.train_houses {
        let aggregate = ctx.aggregate(house)?;
        let activations = match target.houses.get(house) {
            Some(h) => h.on_grid(&aggregate)?,
            None => Vec::new(),
        };
        houses.push(RealHouse::new(house.clone(), Arc::new(aggregate.into_values()), activations, window_width));
    }

    let mut window = WindowSpec::new(app.id.clone(), window_width, params.max_power, 1.0)?;
    let mut real = RealWindowSource::new(houses, window.clone())?;
    let mut synth = SyntheticSource::new(library, app.id.clone(), window.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let n = cfg.training.std_sample_count;
    let raw = sample_raw_windows(&real, &synth, n, &mut rng)?;
    let input_std = estimate_input_std(&raw, n, &mut rng)?;
    window.input_std = input_std;
    real.set_input_std(input_std);
    synth.set_input_std(input_std);
    Ok(Prepared { real, synth, window, rng })
}

pub fn synth_preview(ctx: &Context, appliance: &str, count: usize) -> Result<()> {
    if count == 0 {
        return Err(UsageError("--count must be positive".into()).into());
    }
    let app = ctx.config.appliance(appliance)?;
    let width = ctx.config.window_width(app, ctx.profile)?;
    let mut p = prepare(ctx, app, width)?;
    let mut stream = BatchStream::new(p.real, p.synth, count, TargetKind::Power, p.rng.random())?;
    let batch = stream.next_batch()?;
    let mut csv = String::from("pair,origin,index,input,target\n");
    for (k, pair) in batch.iter().enumerate() {
        let Target::Power(target) = &pair.target else {
            unreachable!("power batches carry power targets")
        };
        for (i, (x, y)) in pair.input.iter().zip(target).enumerate() {
            csv.push_str(&format!("{k},{:?},{i},{x},{y}\n", pair.origin));
        }
    }
    let path = ctx.out(&["preview", &format!("{appliance}.csv")])?;
    write(&path, csv)?;
    let (real, synth) = stream.split();
    println!(
        "{appliance}: {count} pairs ({real} real, {synth} synthetic), window {width}, input_std {:.3} -> {}",
        p.window.input_std,
        path.display()
    );
    Ok(())
}

pub fn train(ctx: &Context, appliance: &str, kind: ArchitectureKind, budget: Option<usize>) -> Result<()> {
    let cfg = &ctx.config;
    let app = cfg.appliance(appliance)?;
    let mut spec = cfg.architecture(app, kind, ctx.profile)?;
    if let Some(b) = budget {
        spec.update_budget = b;
    }
    let mut p = prepare(ctx, app, spec.window_width)?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        appliance_id: app.id.clone(),
        profile: ctx.profile,
        seed: ctx.seed,
        sample_period: ctx.period(),
        window: p.window.clone(),
        activation: app.activation_params()?,
        architecture: spec.clone(),
        train_houses: app.train_houses.clone(),
        test_houses: app.test_houses.clone(),
        std_sample_count: cfg.training.std_sample_count,
    };
    let dir_name = format!("{appliance}_{kind}");
    write(&ctx.out(&["models", &dir_name, "manifest.json"])?, manifest.to_json())?;
    let manifest_hash = manifest.hash();

    let mut network: Network<f32> = spec.build(&mut p.rng)?;
    let stream_seed = p.rng.random();
    let batches = BatchStream::new(p.real, p.synth, spec.batch_size, kind.target_kind(), stream_seed)?.spawn(4);
    let mut optimizer = NesterovSgd::<f32>::new(&cfg.optimizer);
    let options = TrainOptions {
        update_budget: spec.update_budget,
        log_every: cfg.training.log_every,
        smoothing: TrainOptions::new(0).smoothing,
        checkpoint_every: cfg.training.checkpoint_every,
        record_wallclock: ctx.wallclock,
    };
    let save = |step: usize, net: &Network<f32>| -> nilm_core::Result<PathBuf> {
        let stem = Checkpoint::file_stem(appliance, kind, step);
        let path = cfg.output_dir.join("models").join(&dir_name).join(format!("{stem}.json"));
        Checkpoint::capture(appliance, &spec, &manifest_hash, step, net).save(&path)?;
        Ok(path)
    };
    let log_path = ctx.out(&["models", &dir_name, "loss_log.csv"])?;
    match train_network(&spec, &mut network, batches, &mut optimizer, &options, |s, n| save(s, n).map(|_| ())) {
        Ok(report) => {
            write(&log_path, loss_log_csv(&report.records))?;
            let path = cfg
                .output_dir
                .join("models")
                .join(&dir_name)
                .join(format!("{}.json", Checkpoint::file_stem(appliance, kind, report.steps)));
            match report.final_smoothed_loss {
                Some(l) => println!("{appliance} {kind}: {} updates, smoothed loss {l:.6} -> {}", report.steps, path.display()),
                None => println!("{appliance} {kind}: 0 updates -> {}", path.display()),
            }
            Ok(())
        }
        Err(failure) => {
            write(&log_path, loss_log_csv(&failure.report.records))?;
            let path = save(failure.report.steps, &network)?;
            eprintln!("last finite parameters kept in {}", path.display());
            Err(failure.into())
        }
    }
}

#[derive(Debug, Serialize)]
struct RunReport<'a> {
    appliance: &'a str,
    algorithm: &'a str,
    house: &'a str,
    profile: Profile,
    seed: u64,
    config_hash: &'a str,
    checkpoint_hash: Option<&'a str>,
    manifest_hash: Option<&'a str>,
    disaggregation: Option<DisaggConfig>,
    samples: usize,
    runtime_s: Option<f64>,
}

fn write_estimate(ctx: &Context, algorithm: &str, house: &str, appliance: &str, est: &EstimateSeries, report: &RunReport) -> Result<PathBuf> {
    let house_dir = format!("house_{house}");
    let path = ctx.out(&["estimates", algorithm, &house_dir, &format!("{appliance}.csv")])?;
    write(&path, est.to_csv())?;
    let report_path = ctx.out(&["estimates", algorithm, &house_dir, &format!("{appliance}_run.json")])?;
    write(&report_path, serde_json::to_string_pretty(report)?)?;
    Ok(path)
}

pub fn disaggregate_network(ctx: &Context, checkpoint: &Path, manifest: Option<&Path>, house: Option<&str>) -> Result<()> {
    let bytes = fs::read(checkpoint).map_err(|e| Error::Io {
        path: checkpoint.to_path_buf(),
        source: e,
    })?;
    let checkpoint_hash = sha256_hex(&bytes);
    let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(Error::from)?;
    let manifest_path = match manifest {
        Some(m) => m.to_path_buf(),
        None => checkpoint.with_file_name("manifest.json"),
    };
    let manifest = Manifest::load(&manifest_path)?;
    let manifest_hash = manifest.hash();
    if manifest_hash != ck.manifest_hash || manifest.architecture != ck.architecture {
        return Err(Error::Checkpoint(format!(
            "{} was trained under manifest {} but {} hashes to {manifest_hash}; refusing to run",
            checkpoint.display(),
            ck.manifest_hash,
            manifest_path.display()
        ))
        .into());
    }
    let app = ctx.config.appliance(&manifest.appliance_id)?;
    let predictor = NetworkPredictor::new(ck.restore::<f32>()?, ck.architecture.clone());
    let dcfg = ctx.config.disagg_config(app, manifest.window.window_width)?;
    let algorithm = ck.architecture.kind.as_str();
    let houses: Vec<String> = house.map_or_else(|| app.test_houses.clone(), |h| vec![h.to_string()]);
    for h in &houses {
        let aggregate = ctx.aggregate(h)?;
        let started = Instant::now();
        let est = disaggregate(&predictor, &aggregate, &manifest.window, &dcfg)?;
        let report = RunReport {
            appliance: &app.id,
            algorithm,
            house: h,
            profile: manifest.profile,
            seed: manifest.seed,
            config_hash: &ctx.config_hash,
            checkpoint_hash: Some(&checkpoint_hash),
            manifest_hash: Some(&manifest_hash),
            disaggregation: Some(dcfg),
            samples: aggregate.len(),
            runtime_s: ctx.wallclock.then(|| started.elapsed().as_secs_f64()),
        };
        let path = write_estimate(ctx, algorithm, h, &app.id, &est, &report)?;
        println!("{} house {h}: {} samples -> {}", app.id, aggregate.len(), path.display());
    }
    Ok(())
}

pub fn disaggregate_baseline(ctx: &Context, fhmm: bool, house: Option<&str>) -> Result<()> {
    let cfg = &ctx.config;
    let algorithm = if fhmm { "fhmm" } else { "co" };
    let mut models: Vec<ApplianceStateModel> = Vec::new();
    for app in &cfg.appliances {
        let store = load_store(ctx, &app.id)?;
        let activations: Vec<Activation> = app
            .train_houses
            .iter()
            .filter_map(|h| store.houses.get(h))
            .flat_map(|h| h.activations.iter().cloned())
            .collect();
        models.push(fit_states(&app.id, &activations, app.baseline_state_count()).with_context(|| format!("fitting {} states", app.id))?);
    }
    write(&ctx.out(&["models", &format!("baseline_{algorithm}.json")])?, serde_json::to_string_pretty(&models)?)?;
    let houses: BTreeSet<String> = match house {
        Some(h) => BTreeSet::from([h.to_string()]),
        None => cfg.appliances.iter().flat_map(|a| a.test_houses.iter().cloned()).collect(),
    };
    for h in &houses {
        let aggregate = ctx.aggregate(h)?;
        let started = Instant::now();
        let estimates = if fhmm {
            fhmm_disaggregate(aggregate.values(), &models)?
        } else {
            co_disaggregate(aggregate.values(), &models)?
        };
        let runtime = ctx.wallclock.then(|| started.elapsed().as_secs_f64());
        for (app, values) in cfg.appliances.iter().zip(estimates) {
            let est = EstimateSeries {
                series: PowerSeries::new(aggregate.start_time(), aggregate.sample_period(), values)?,
                probability: None,
            };
            let report = RunReport {
                appliance: &app.id,
                algorithm,
                house: h,
                profile: ctx.profile,
                seed: ctx.seed,
                config_hash: &ctx.config_hash,
                checkpoint_hash: None,
                manifest_hash: None,
                disaggregation: None,
                samples: aggregate.len(),
                runtime_s: runtime,
            };
            let path = write_estimate(ctx, algorithm, h, &app.id, &est, &report)?;
            println!("{} house {h}: {} samples -> {}", app.id, aggregate.len(), path.display());
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct HouseReport {
    house: String,
    report: MetricsReport,
}

pub fn evaluate(ctx: &Context, appliance: &str, algorithm: &str, house: Option<&str>) -> Result<()> {
    let app = ctx.config.appliance(appliance)?;
    let params = app.activation_params()?;
    let houses: Vec<String> = house.map_or_else(|| app.test_houses.clone(), |h| vec![h.to_string()]);
    for h in &houses {
        let est_path = ctx.config.output_dir.join("estimates").join(algorithm).join(format!("house_{h}")).join(format!("{appliance}.csv"));
        let est = read_estimate_csv(&est_path, ctx.period())?;
        let truth = ctx.channel(h, appliance)?;
        let aggregate = ctx.aggregate(h)?;
        let (e, t) = align(&est.series, &truth)?;
        let (e, a) = align(&e, &aggregate)?;
        let (t, _) = align(&t, &a)?;
        let report = MetricsReport::compute(appliance, algorithm, e.values(), t.values(), a.values(), params.on_power_threshold)?;
        let path = ctx.out(&["reports", &format!("{algorithm}__{appliance}__house_{h}.json")])?;
        println!(
            "{appliance} {algorithm} house {h}: f1 {:.3}, proportion {:.3}, mae {:.1} W",
            report.f1, report.proportion_energy_correct, report.mean_absolute_error
        );
        write(&path, serde_json::to_string_pretty(&HouseReport { house: h.clone(), report })?)?;
    }
    Ok(())
}

pub fn report(ctx: &Context) -> Result<()> {
    let dir = ctx.config.output_dir.join("reports");
    let mut files: Vec<PathBuf> = match fs::read_dir(&dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => bail!(Error::Empty(format!("no evaluations in {}; run `nilm evaluate` first", dir.display()))),
    };
    files.sort();
    let mut reports = Vec::new();
    for f in &files {
        let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        reports.push(serde_json::from_str::<HouseReport>(&text).with_context(|| format!("parsing {}", f.display()))?);
    }
    let mut csv = String::from("metric,appliance,algorithm,house,value\n");
    for (i, name) in METRIC_NAMES.iter().enumerate() {
        for r in &reports {
            csv.push_str(&format!(
                "{name},{},{},{},{}\n",
                r.report.appliance,
                r.report.algorithm,
                r.house,
                r.report.values()[i]
            ));
        }
    }
    write(&ctx.out(&["report.csv"])?, &csv)?;
    write(&ctx.out(&["report.json"])?, serde_json::to_string_pretty(&reports)?)?;
    println!("appliance\talgorithm\thouse\t{}", METRIC_NAMES.join("\t"));
    for r in &reports {
        let vals: Vec<String> = r.report.values().iter().map(|v| format!("{v:.4}")).collect();
        println!("{}\t{}\t{}\t{}", r.report.appliance, r.report.algorithm, r.house, vals.join("\t"));
    }
    Ok(())
}
