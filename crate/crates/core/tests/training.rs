use nilm_core::architectures::{train, ArchitectureKind, ArchitectureSpec, TrainOptions};
use nilm_core::datagen::{encode_rectangle, Batch, PairOrigin, Target, TrainingPair};
use nilm_core::nn::init::uniform;
use nilm_core::nn::{loss_and_gradients, NesterovSgd, Network, OptimizerConfig, Tensor};
use nilm_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pair(width: usize, rng: &mut ChaCha8Rng) -> TrainingPair {
    let input: Vec<f64> = (0..width).map(|_| rng.random_range(-1.0..1.0)).collect();
    let start = rng.random_range(0..width / 2);
    let target: Vec<f64> = (0..width).map(|i| if (start..start + 4).contains(&i) { 0.6 } else { 0.0 }).collect();
    TrainingPair {
        input,
        target: Target::Power(target),
        origin: PairOrigin::Synthetic,
        placements: Vec::new(),
    }
}

fn frozen_batch(width: usize, n: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| pair(width, &mut rng)).collect()
}

fn small(kind: ArchitectureKind, width: usize) -> ArchitectureSpec {
    let mut spec = ArchitectureSpec::paper(kind, width).scaled(16, 1);
    spec.conv_filters = 4;
    spec
}

fn no_plateau(lr: f64) -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: lr,
        plateau: None,
        ..OptimizerConfig::default()
    }
}

fn kind_batch(kind: ArchitectureKind, width: usize, n: usize, seed: u64) -> Batch {
    frozen_batch(width, n, seed)
        .into_iter()
        .map(|p| if kind == ArchitectureKind::Rectangles { p.into_rectangle() } else { p })
        .collect()
}

#[test]
fn frozen_batch_loss_strictly_decreases() {
    for kind in ArchitectureKind::ALL {
        let spec = small(kind, 16);
        let mut net: Network<f64> = spec.build(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (x, y) = spec.batch_tensors::<f64>(&kind_batch(kind, 16, 8, 2)).unwrap();
        let mut opt = NesterovSgd::new(&no_plateau(1e-4));
        let mut prev = f64::INFINITY;
        for step in 0..50 {
            let (loss, grads) = loss_and_gradients(&net, &x, &y).unwrap();
            assert!(loss < prev, "{kind}: loss rose at step {step}: {prev} -> {loss}");
            prev = loss;
            opt.step(&mut net.params_mut(), &grads).unwrap();
        }
    }
}

#[test]
fn every_architecture_fits_a_frozen_batch_in_200_updates() {
    for kind in ArchitectureKind::ALL {
        let spec = small(kind, 16);
        let mut net: Network<f64> = spec.build(&mut ChaCha8Rng::seed_from_u64(14)).unwrap();
        let batch = kind_batch(kind, 16, 4, 15);
        let (x, y) = spec.batch_tensors::<f64>(&batch).unwrap();
        let first = loss_and_gradients(&net, &x, &y).unwrap().0;
        let batches = std::iter::repeat_with(|| Ok(batch.clone()));
        train(&spec, &mut net, batches, &mut NesterovSgd::new(&no_plateau(0.01)), &TrainOptions::new(200), |_, _| Ok(())).unwrap();
        let last = loss_and_gradients(&net, &x, &y).unwrap().0;
        assert!(last < first, "{kind}: {first} -> {last}");
    }
}

#[test]
fn memorises_a_frozen_batch() {
    let spec = small(ArchitectureKind::Dae, 16);
    let mut net: Network<f64> = spec.build(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let batch = frozen_batch(16, 4, 4);
    let (x, y) = spec.batch_tensors::<f64>(&batch).unwrap();
    let first = loss_and_gradients(&net, &x, &y).unwrap().0;
    let batches = std::iter::repeat_with(|| Ok(batch.clone()));
    let report = train(&spec, &mut net, batches, &mut NesterovSgd::new(&no_plateau(0.01)), &TrainOptions::new(400), |_, _| Ok(())).unwrap();
    let last = loss_and_gradients(&net, &x, &y).unwrap().0;
    assert_eq!(report.steps, 400);
    assert!(last < first * 0.2, "{first} -> {last}");
}

#[test]
fn zero_budget_leaves_network_unchanged() {
    let spec = small(ArchitectureKind::Rectangles, 16);
    let mut net: Network<f32> = spec.build(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let before = net.clone();
    let mut saved = Vec::new();
    let report = train(
        &spec,
        &mut net,
        std::iter::empty::<Result<Batch>>(),
        &mut NesterovSgd::new(&OptimizerConfig::default()),
        &TrainOptions::new(0),
        |step, _| {
            saved.push(step);
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(net, before);
    assert_eq!(report.steps, 0);
    assert!(report.records.is_empty());
    assert_eq!(saved, vec![0]);
}

#[test]
fn checkpoints_at_intervals_and_end() {
    let spec = small(ArchitectureKind::Dae, 16);
    let mut net: Network<f32> = spec.build(&mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let batch = frozen_batch(16, 2, 7);
    let mut options = TrainOptions::new(25);
    options.checkpoint_every = Some(10);
    options.log_every = 5;
    let mut saved = Vec::new();
    let report = train(
        &spec,
        &mut net,
        std::iter::repeat_with(|| Ok(batch.clone())),
        &mut NesterovSgd::new(&OptimizerConfig::default()),
        &options,
        |step, _| {
            saved.push(step);
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(saved, vec![10, 20, 25]);
    let steps: Vec<usize> = report.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![1, 5, 10, 15, 20, 25]);
    assert!(report.records.iter().all(|r| r.wallclock_s.is_none()));
}

#[test]
fn non_finite_input_aborts_with_last_finite_state() {
    let spec = small(ArchitectureKind::Dae, 16);
    let init: Network<f64> = spec.build(&mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let good = frozen_batch(16, 2, 9);
    let mut bad = good.clone();
    bad[0].input[3] = f64::NAN;
    let cfg = OptimizerConfig::default();

    let mut reference = init.clone();
    train(&spec, &mut reference, std::iter::repeat_with(|| Ok(good.clone())).take(2), &mut NesterovSgd::new(&cfg), &TrainOptions::new(2), |_, _| Ok(())).unwrap();

    let mut net = init.clone();
    let stream = vec![Ok(good.clone()), Ok(good.clone()), Ok(bad)];
    let failure = train(&spec, &mut net, stream, &mut NesterovSgd::new(&cfg), &TrainOptions::new(10), |_, _| Ok(())).unwrap_err();
    assert_eq!(failure.step, 3);
    assert_eq!(failure.report.steps, 2);
    assert!(failure.error.is_numeric(), "{}", failure.error);
    assert_eq!(net, reference);
}

#[test]
fn rectangle_targets_from_power_pairs() {
    let spec = small(ArchitectureKind::Rectangles, 16);
    let batch = frozen_batch(16, 3, 10);
    let (_, y) = spec.batch_tensors::<f64>(&batch).unwrap();
    assert_eq!(y.shape(), &[3, 1, 3]);
    let Target::Power(p) = &batch[1].target else { unreachable!() };
    assert_eq!(&y.data()[3..6], &encode_rectangle(p).as_array());
}

#[test]
fn mismatched_target_is_a_dimension_error() {
    let spec = small(ArchitectureKind::Dae, 16);
    let batch = frozen_batch(20, 1, 11);
    assert!(matches!(spec.batch_tensors::<f64>(&batch), Err(Error::Dimension { .. })));
}

/// Same content at two offsets inside zero padding gives the same
/// per-timestep LSTM outputs once warm-up and the conv halo are excluded.
#[test]
fn lstm_outputs_are_offset_equivariant() {
    const W: usize = 64;
    const PAD: usize = 16;
    let mut spec = ArchitectureSpec::paper(ArchitectureKind::Lstm, W);
    spec.conv_filters = 4;
    spec.hidden = vec![8, 8, 8];
    let mut net: Network<f64> = spec.build(&mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(13);
    for p in net.params_mut() {
        let noise: Tensor<f64> = uniform(p.shape(), 0.1, &mut r);
        p.add_assign(&noise);
    }
    let content: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
    let halo = 3;
    for (a, b) in [(PAD, PAD + 7), (PAD + 3, W - PAD - content.len())] {
        let place = |at: usize| {
            let mut x = vec![0.0; W];
            x[at..at + content.len()].copy_from_slice(&content);
            Tensor::from_vec(&[1, W, 1], x).unwrap()
        };
        let ya = net.forward(&place(a)).unwrap();
        let yb = net.forward(&place(b)).unwrap();
        for i in halo..content.len() - halo {
            let d = (ya.data()[a + i] - yb.data()[b + i]).abs();
            assert!(d < 1e-3, "offset {a} vs {b}, sample {i}: {d}");
        }
    }
}
