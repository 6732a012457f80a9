use mlf_snn::checkpoint::{decode_checkpoint, encode_checkpoint};
use mlf_snn::data::{single_frame_ablation, synth_spatiotemporal, Dataset, SynthConfig};
use mlf_snn::network::{BlockVariant, Network, NetworkSpec, Width};
use mlf_snn::training::{evaluate, train, train_epoch, Sgd, TrainConfig, TrainState};
use mlf_snn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two classes of `[1, 4, 4]` images told apart by which half is lit.
fn halves(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let label = i % 2;
        samples.push(Tensor::from_fn(&[1, 4, 4], |j| {
            let lit = (j % 4 < 2) == (label == 0);
            f64::from(u8::from(lit)) + rng.gen_range(-0.2..0.2)
        }));
        labels.push(label);
    }
    Dataset {
        samples,
        labels,
        classes: 2,
    }
}

fn tiny_spec(input: [usize; 3], classes: usize, timesteps: usize, levels: usize) -> NetworkSpec {
    NetworkSpec::resnet(8, Width::Custom(4), BlockVariant::DsResnet, levels)
        .unwrap()
        .with_input(input, classes, timesteps)
}

fn cfg(epochs: usize, batch_size: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_halves_are_learned() {
    let ds = halves(64, 0);
    let spec = tiny_spec([1, 4, 4], 2, 2, 2);
    let mut net = Network::build(&spec, 1).unwrap();
    let cfg = cfg(20, 16, 1);
    let mut state = TrainState::new(&net, &cfg);
    let log = train(&mut net, &mut state, &ds, None, &cfg, None, |_, _, _| Ok(())).unwrap();
    let first = log.iter().position(|r| r.acc >= 0.99);
    assert!(first.is_some(), "{:?}", log.iter().map(|r| r.acc).collect::<Vec<_>>());
    let last = log.last().unwrap().acc;
    let ev = evaluate(&mut net, &ds, 16, None).unwrap();
    assert_eq!(ev.samples, 64);
    assert!(ev.acc >= last - 0.01, "eval {} vs train {last}", ev.acc);
}

#[test]
fn identical_seeds_give_identical_logs() {
    let ds = halves(32, 3);
    let spec = tiny_spec([1, 4, 4], 2, 2, 2);
    let run = |seed: u64| {
        let mut net = Network::build(&spec, seed).unwrap();
        let cfg = cfg(3, 8, seed);
        let mut state = TrainState::new(&net, &cfg);
        let log = train(&mut net, &mut state, &ds, Some(&ds), &cfg, None, |_, _, _| Ok(())).unwrap();
        (log, encode_checkpoint(&mut net, &state))
    };
    let (a, ca) = run(5);
    let (b, cb) = run(5);
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    let (c, _) = run(6);
    assert_ne!(a, c);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let ds = halves(24, 4);
    let spec = tiny_spec([1, 4, 4], 2, 3, 3);
    let full_cfg = cfg(4, 8, 2);
    let mut straight = Network::build(&spec, 2).unwrap();
    let mut s1 = TrainState::new(&straight, &full_cfg);
    let full = train(&mut straight, &mut s1, &ds, None, &full_cfg, None, |_, _, _| Ok(())).unwrap();

    let mut net = Network::build(&spec, 2).unwrap();
    let mut s2 = TrainState::new(&net, &full_cfg);
    let half = TrainConfig { epochs: 2, ..full_cfg.clone() };
    let mut log = train(&mut net, &mut s2, &ds, None, &half, None, |_, _, _| Ok(())).unwrap();
    let (mut resumed, mut s3) = decode_checkpoint(&encode_checkpoint(&mut net, &s2)).unwrap();
    log.extend(train(&mut resumed, &mut s3, &ds, None, &full_cfg, None, |_, _, _| Ok(())).unwrap());
    assert_eq!(log, full);
    assert_eq!(encode_checkpoint(&mut resumed, &s3), encode_checkpoint(&mut straight, &s1));
}

#[test]
fn empty_step_leaves_parameters_unchanged() {
    let spec = tiny_spec([1, 4, 4], 2, 1, 1);
    let mut net = Network::build(&spec, 0).unwrap();
    let before: Vec<Tensor> = net.params().iter().map(|(_, p)| p.value.clone()).collect();
    let cfg = TrainConfig {
        momentum: 0.0,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut sgd = Sgd::new(&net);
    net.zero_grad();
    sgd.step(&mut net, &cfg, 0.1).unwrap();
    let after: Vec<Tensor> = net.params().iter().map(|(_, p)| p.value.clone()).collect();
    assert_eq!(before, after);
    assert_eq!(TrainConfig::default().lr_at(40), 0.1 * 0.1);
}

fn order_pairs(samples: usize, seed: u64) -> Dataset {
    synth_spatiotemporal(&SynthConfig::new(2, samples, 8, [2, 8, 8], seed)).unwrap()
}

#[test]
fn order_only_classes_need_time() {
    let train_set = order_pairs(200, 10);
    let held_out = order_pairs(200, 11);
    let spec = NetworkSpec::resnet(8, Width::Small, BlockVariant::DsResnet, 2)
        .unwrap()
        .with_input([2, 8, 8], 2, 8);

    let mut net = Network::build(&spec, 0).unwrap();
    let cfg = cfg(15, 32, 0);
    let mut state = TrainState::new(&net, &cfg);
    let mut best = 0.0f64;
    while state.epoch < cfg.epochs && best < 0.95 {
        best = best.max(train_epoch(&mut net, &mut state, &train_set, &cfg, None).unwrap().record.acc);
    }
    assert!(best >= 0.95, "sequence training peaked at {best}");

    // a fresh net on single frames cannot beat chance on unseen samples
    let frames = single_frame_ablation(&train_set, 1).unwrap();
    let frames_held_out = single_frame_ablation(&held_out, 2).unwrap();
    let mut net = Network::build(&spec, 0).unwrap();
    let mut state = TrainState::new(&net, &cfg);
    train(&mut net, &mut state, &frames, None, &cfg, None, |_, _, _| Ok(())).unwrap();
    let ev = evaluate(&mut net, &frames_held_out, 50, None).unwrap();
    assert!((0.35..=0.65).contains(&ev.acc), "single-frame accuracy {}", ev.acc);
}

#[test]
fn multi_level_training_keeps_every_layer_firing() {
    let ds = synth_spatiotemporal(&SynthConfig::new(4, 96, 4, [2, 8, 8], 7)).unwrap();
    let spec = NetworkSpec::resnet(14, Width::Custom(8), BlockVariant::DsResnet, 2)
        .unwrap()
        .with_input([2, 8, 8], 4, 4);
    for seed in 0..2 {
        let mut net = Network::build(&spec, seed).unwrap();
        let cfg = cfg(6, 16, seed);
        let mut state = TrainState::new(&net, &cfg);
        while state.epoch < cfg.epochs {
            let s = train_epoch(&mut net, &mut state, &ds, &cfg, None).unwrap();
            assert!(s.silent.is_empty(), "seed {seed} epoch {}: {:?}", s.record.epoch, s.silent);
            assert!(s.record.loss.is_finite());
        }
    }
}
