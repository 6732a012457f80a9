use mlf_snn::analysis::{
    conv_flops, dormant_stats, equivalence_check, flops_estimate, grad_stats, theorem1_closed_form,
    theorem1_monte_carlo, EQUIVALENCE_TOLERANCE,
};
use mlf_snn::config::KeyValues;
use mlf_snn::data::{bin_events, Event, EventStream};
use mlf_snn::network::{BlockVariant, Network, NetworkSpec, Width};
use mlf_snn::neuron::{mlf_forward_sequence, surrogate_derivative, MlfConfig};
use mlf_snn::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Plain LIF reference: `u = τ·u·(1 − o) + x`, `o = [u ≥ V]`.
fn lif_reference(xs: &[f64], v: f64, decay: f64) -> Vec<f64> {
    let (mut u, mut o) = (0.0, 0.0);
    xs.iter()
        .map(|&x| {
            u = decay * u * (1.0 - o) + x;
            o = if u >= v { 1.0 } else { 0.0 };
            o
        })
        .collect()
}

fn variant(i: usize) -> BlockVariant {
    [BlockVariant::DsResnet, BlockVariant::SpikingResnet, BlockVariant::ResnetSnn][i]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mlf_output_counts_fired_levels(
        xs in prop::collection::vec(-1.0f64..4.0, 1..12),
        levels in 1usize..=4,
    ) {
        let cfg = MlfConfig::standard(levels);
        let t = xs.len();
        let x = Tensor::new(vec![t, 1], xs.clone()).unwrap();
        let (out, trace) = mlf_forward_sequence(&x, t, &cfg).unwrap();
        for (step, rec) in trace.entries().iter().enumerate() {
            let fired = (0..levels).filter(|&k| rec.u[k] >= cfg.threshold(k)).count();
            prop_assert_eq!(out.data()[step], fired as f64);
            prop_assert!(fired <= levels);
        }
    }

    #[test]
    fn single_level_matches_lif_reference(
        xs in prop::collection::vec(-1.0f64..2.0, 1..16),
        decay in 0.0f64..1.0,
    ) {
        let cfg = MlfConfig::new(1, 0.6, 1.0, decay).unwrap();
        let t = xs.len();
        let (out, _) = mlf_forward_sequence(&Tensor::new(vec![t, 1], xs.clone()).unwrap(), t, &cfg).unwrap();
        prop_assert_eq!(out.data(), &lif_reference(&xs, 0.6, decay)[..]);
    }

    #[test]
    fn surrogate_is_a_unit_rectangle(v in -2.0f64..2.0, a in 0.05f64..3.0, u in -6.0f64..6.0) {
        let h = surrogate_derivative(u, v, a).unwrap();
        prop_assert!(h == 0.0 || h == 1.0 / a);
        prop_assert_eq!(h > 0.0, (u - v).abs() < a / 2.0);
        // midpoint rule over a fine grid integrates to 1
        let n = 4000;
        let lo = v - a;
        let step = 2.0 * a / n as f64;
        let area: f64 = (0..n)
            .map(|i| surrogate_derivative(lo + (i as f64 + 0.5) * step, v, a).unwrap() * step)
            .sum();
        prop_assert!((area - 1.0).abs() < 2.0 * step / a + 1e-9, "{area}");
    }

    #[test]
    fn count_and_expanded_inputs_agree(
        case in (1usize..=4).prop_flat_map(|k| prop::collection::vec(
            (-1.0f64..1.0, prop::collection::vec(0u8..=1, k)), 1..40)),
        bias in -1.0f64..1.0,
    ) {
        let (w, s): (Vec<f64>, Vec<Vec<u8>>) = case.into_iter().unzip();
        let r = equivalence_check(&w, &s, bias).unwrap();
        prop_assert!(r.passed && r.max_deviation <= EQUIVALENCE_TOLERANCE);
    }

    #[test]
    fn binning_accounts_for_every_event(
        raw in prop::collection::vec((0u32..60_000, 0u16..32, 0u16..32, 0u8..=1), 0..300),
        timesteps in 1usize..6,
        side in 1usize..10,
    ) {
        let mut events: Vec<Event> = raw
            .into_iter()
            .map(|(t_us, x, y, polarity)| Event { t_us, x, y, polarity })
            .collect();
        events.sort_by_key(|e| e.t_us);
        let stream = EventStream { events, height: 32, width: 32, label: 0 };
        let (frames, stats) = bin_events(&stream, (side, side), 10.0, timesteps).unwrap();
        prop_assert_eq!(stats.total, stream.events.len());
        prop_assert_eq!(stats.mapped, stats.total - stats.discarded - stats.collisions);
        prop_assert_eq!(frames.frames.sum() as usize, stats.mapped);
        prop_assert_eq!(frames.frames.shape(), &[timesteps, 2, side, side]);
    }

    #[test]
    fn binning_ignores_order_within_a_bin(
        raw in prop::collection::vec((0u32..4, 0u16..16, 0u16..16, 0u8..=1), 1..200),
        seed in any::<u64>(),
    ) {
        // every event of bin b is stamped at the bin start, so any order within it is valid
        let mut events: Vec<Event> = raw
            .into_iter()
            .map(|(b, x, y, polarity)| Event { t_us: b * 5000, x, y, polarity })
            .collect();
        events.sort_by_key(|e| e.t_us);
        let stream = EventStream { events: events.clone(), height: 16, width: 16, label: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for chunk in events.chunk_by_mut(|a, b| a.t_us == b.t_us) {
            chunk.shuffle(&mut rng);
        }
        let shuffled = EventStream { events, ..stream.clone() };
        let a = bin_events(&stream, (5, 5), 5.0, 3).unwrap();
        let b = bin_events(&shuffled, (5, 5), 5.0, 3).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn right_saturation_never_grows_with_levels(us in prop::collection::vec(-3.0f64..8.0, 1..200)) {
        let mut prev = dormant_stats(&us, &MlfConfig::standard(1));
        for k in 2..=4 {
            let cur = dormant_stats(&us, &MlfConfig::standard(k));
            prop_assert!(cur.right <= prev.right);
            prop_assert_eq!(cur.left, prev.left);
            prev = cur;
        }
    }

    #[test]
    fn extra_levels_cost_one_add_per_output_per_level(
        layers in prop::sample::select(vec![8usize, 14, 20, 32]),
        w in prop::sample::select(vec![Width::Small, Width::Middle, Width::Large]),
        t in 1usize..8,
        k in 1usize..5,
    ) {
        let spec = NetworkSpec::resnet(layers, w, BlockVariant::DsResnet, k).unwrap();
        let r = flops_estimate(&spec, t, k);
        let outputs: u64 = spec.conv_layers().iter().map(|c| (c.out_h * c.out_w * c.out_channels) as u64).sum();
        prop_assert_eq!(r.f2 - r.f1, 2 * t as u64 * (k as u64 - 1) * outputs);
        prop_assert_eq!(r.f1, r.layers.iter().map(|l| l.f1).sum::<u64>());
    }

    #[test]
    fn conv_cost_is_linear_in_time(kernel in 1usize..4, cin in 1usize..64, hw in 1usize..33, cout in 1usize..64, t in 1usize..9, k in 1usize..4) {
        prop_assert_eq!(conv_flops(kernel, cin, hw, cout, t, k), t as u64 * conv_flops(kernel, cin, hw, cout, 1, k));
    }

    #[test]
    fn shortcut_saturation_needs_the_spike(v in 0.05f64..3.0, a in 0.05f64..3.0) {
        let r = theorem1_closed_form(v, a).unwrap();
        prop_assert!(r.p_star < r.p);
        prop_assert!((0.0..=1.0).contains(&r.unmapped));
        prop_assert!((r.mapped + r.unmapped - 1.0).abs() < 1e-15);
    }

    #[test]
    fn grad_report_scales_with_gradients(seed in any::<u64>(), c in -4.0f64..4.0) {
        let spec = NetworkSpec::resnet(8, Width::Custom(2), BlockVariant::DsResnet, 2)
            .unwrap()
            .with_input([1, 4, 4], 2, 1);
        let mut net = Network::build(&spec, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in net.params_mut() {
            p.grad = Tensor::from_fn(p.value.shape(), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        }
        let base = grad_stats(&net);
        for p in net.params_mut() {
            p.grad = p.grad.scale(c);
        }
        let scaled = grad_stats(&net);
        for (a, b) in base.stages.iter().zip(&scaled.stages) {
            prop_assert!((b.mean_abs - c.abs() * a.mean_abs).abs() <= 1e-12 * (1.0 + a.mean_abs));
            prop_assert_eq!(a.count, b.count);
        }
    }

    #[test]
    fn spec_survives_key_values(
        n in 1usize..6,
        w in prop::sample::select(vec![Width::Small, Width::Middle, Width::Large, Width::Custom(3)]),
        v in 0usize..3,
        k in 1usize..5,
        t in 1usize..9,
        classes in 2usize..12,
    ) {
        let spec = NetworkSpec::resnet(6 * n + 2, w, variant(v), k)
            .unwrap()
            .with_input([2, 8, 8], classes, t);
        let text = spec.to_key_values().render();
        let mut kv = KeyValues::parse(&text).unwrap();
        let back = NetworkSpec::from_key_values(&mut kv).unwrap();
        kv.finish().unwrap();
        prop_assert_eq!(back, spec);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn monte_carlo_is_reproducible(seed in any::<u64>(), samples in 1usize..5000) {
        let a = theorem1_monte_carlo(0.6, 1.0, samples, seed).unwrap();
        let b = theorem1_monte_carlo(0.6, 1.0, samples, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}
