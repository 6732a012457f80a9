//! Instrumentation and verification: dormant units, gradient statistics,
//! the FLOPs model, Theorem 1 probabilities, level coverage and the
//! sum-encoding equivalence.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ForwardPass, Network, NetworkSpec};
use crate::neuron::{MlfConfig, StepTrace};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper tail `1 − Φ(x)`, accurate far into the tail.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Where one unit sits relative to the surrogate windows of all its levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Saturation {
    /// Every level `k` has `u_k > V_th,k + a/2`.
    Right,
    /// Every level `k` has `u_k < V_th,k − a/2`.
    Left,
    Active,
}

pub fn classify(potentials: impl Fn(usize) -> f64, cfg: &MlfConfig) -> Saturation {
    let half = cfg.width() / 2.0;
    let levels = cfg.levels();
    if (0..levels).all(|k| potentials(k) > cfg.threshold(k) + half) {
        Saturation::Right
    } else if (0..levels).all(|k| potentials(k) < cfg.threshold(k) - half) {
        Saturation::Left
    } else {
        Saturation::Active
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerDormancy {
    pub name: String,
    pub stage: usize,
    pub right: f64,
    pub left: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DormantReport {
    pub epoch: Option<usize>,
    pub layers: Vec<LayerDormancy>,
}

impl DormantReport {
    /// Unweighted mean of per-layer right-saturation fractions.
    pub fn mean_right(&self) -> f64 {
        mean(self.layers.iter().map(|l| l.right))
    }

    pub fn mean_left(&self) -> f64 {
        mean(self.layers.iter().map(|l| l.left))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,layer,stage,right,left,samples\n");
        for l in &self.layers {
            let epoch = self.epoch.map(|e| e.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{epoch},{},{},{},{},{}", l.name, l.stage, l.right, l.left, l.samples);
        }
        s
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Saturation fractions for units whose levels all share one potential.
pub fn dormant_stats(potentials: &[f64], cfg: &MlfConfig) -> LayerDormancy {
    let mut out = LayerDormancy {
        samples: potentials.len(),
        ..Default::default()
    };
    for &u in potentials {
        match classify(|_| u, cfg) {
            Saturation::Right => out.right += 1.0,
            Saturation::Left => out.left += 1.0,
            Saturation::Active => {}
        }
    }
    if !potentials.is_empty() {
        out.right /= potentials.len() as f64;
        out.left /= potentials.len() as f64;
    }
    out
}

/// Saturation fractions over every unit and timestep of a recorded trace.
pub fn trace_dormancy(trace: &StepTrace, cfg: &MlfConfig) -> LayerDormancy {
    let levels = cfg.levels();
    let mut out = LayerDormancy::default();
    for rec in trace.entries() {
        let units = rec.u.len() / levels;
        for i in 0..units {
            match classify(|k| rec.u[k * units + i], cfg) {
                Saturation::Right => out.right += 1.0,
                Saturation::Left => out.left += 1.0,
                Saturation::Active => {}
            }
        }
        out.samples += units;
    }
    if out.samples > 0 {
        out.right /= out.samples as f64;
        out.left /= out.samples as f64;
    }
    out
}

pub fn pass_dormancy(pass: &ForwardPass, cfg: &MlfConfig) -> DormantReport {
    DormantReport {
        epoch: None,
        layers: pass
            .neuron_layers()
            .into_iter()
            .map(|layer| LayerDormancy {
                name: layer.name.to_string(),
                stage: layer.stage,
                ..trace_dormancy(layer.trace, cfg)
            })
            .collect(),
    }
}

/// Fraction of emitted spikes (summed over levels) per recorded unit-step.
pub fn spike_rates(pass: &ForwardPass) -> Vec<(String, f64)> {
    pass.neuron_layers()
        .into_iter()
        .map(|layer| {
            let (mut spikes, mut slots) = (0usize, 0usize);
            for rec in layer.trace.entries() {
                spikes += rec.spikes.iter().map(|&s| s as usize).sum::<usize>();
                slots += rec.spikes.len();
            }
            (layer.name.to_string(), spikes as f64 / slots.max(1) as f64)
        })
        .collect()
}

/// Total spikes emitted by every MLF population in a pass.
pub fn spike_count(pass: &ForwardPass) -> u64 {
    pass.neuron_layers()
        .iter()
        .flat_map(|l| l.trace.entries())
        .map(|rec| rec.spikes.iter().map(|&s| s as u64).sum::<u64>())
        .sum()
}

/// Names of populations with no spike at any level, step or sample.
pub fn silent_layers(pass: &ForwardPass) -> Vec<String> {
    spike_rates(pass)
        .into_iter()
        .filter(|(_, r)| *r == 0.0)
        .map(|(n, _)| n)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageGrad {
    pub stage: usize,
    pub mean_abs: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    /// Feature stages `conv2_x, conv3_x, …` in order.
    pub stages: Vec<StageGrad>,
    /// L1 norm over every convolution weight gradient, encoding layer included.
    pub total_l1: f64,
}

impl GradReport {
    /// Mean `|grad|` over all feature-stage convolution weights.
    pub fn overall_mean(&self) -> f64 {
        let n: usize = self.stages.iter().map(|s| s.count).sum();
        if n == 0 {
            return 0.0;
        }
        self.stages.iter().map(|s| s.mean_abs * s.count as f64).sum::<f64>() / n as f64
    }

    /// Relative change of the overall mean against `baseline`, absent when
    /// the baseline carries no gradient.
    pub fn improvement_over(&self, baseline: &GradReport) -> Option<f64> {
        let b = baseline.overall_mean();
        (b > 0.0).then(|| self.overall_mean() / b - 1.0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,mean_abs_grad,count\n");
        for st in &self.stages {
            let _ = writeln!(s, "conv{}_x,{:e},{}", st.stage + 1, st.mean_abs, st.count);
        }
        s
    }
}

pub fn grad_stats(net: &Network) -> GradReport {
    let stages = net.spec().stages;
    let mut sums = vec![(0.0, 0usize); stages];
    let mut total_l1 = 0.0;
    for (info, p) in net.params() {
        if !info.conv_weight {
            continue;
        }
        let l1 = p.grad.abs_sum();
        total_l1 += l1;
        if (1..=stages).contains(&info.stage) {
            sums[info.stage - 1].0 += l1;
            sums[info.stage - 1].1 += p.len();
        }
    }
    GradReport {
        stages: sums
            .into_iter()
            .enumerate()
            .map(|(i, (s, n))| StageGrad {
                stage: i + 1,
                mean_abs: if n == 0 { 0.0 } else { s / n as f64 },
                count: n,
            })
            .collect(),
        total_l1,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub name: String,
    pub f1: u64,
    pub f2: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub timesteps: usize,
    pub levels: usize,
    pub layers: Vec<LayerFlops>,
    pub f1: u64,
    pub f2: u64,
    pub spikes: Option<u64>,
}

impl FlopsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,f1,f2\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{},{}", l.name, l.f1, l.f2);
        }
        let _ = writeln!(s, "total,{},{}", self.f1, self.f2);
        s
    }
}

/// `2T(N_k²·C_in·M²·C_out + M²·C_out·K)` for a single convolution.
pub fn conv_flops(kernel: usize, c_in: usize, out_hw: usize, c_out: usize, timesteps: usize, levels: usize) -> u64 {
    let m2 = (out_hw * out_hw) as u64;
    let (k, ci, co, t, lv) = (kernel as u64, c_in as u64, c_out as u64, timesteps as u64, levels as u64);
    2 * t * (k * k * ci * m2 * co + m2 * co * lv)
}

/// Sums the per-convolution cost over every convolution in `spec`, with
/// the neuron term evaluated for one level (`f1`) and for `levels` (`f2`).
pub fn flops_estimate(spec: &NetworkSpec, timesteps: usize, levels: usize) -> FlopsReport {
    let layers: Vec<LayerFlops> = spec
        .conv_layers()
        .into_iter()
        .map(|c| {
            let cost = |k| {
                2 * timesteps as u64
                    * (c.kernel * c.kernel * c.in_channels * c.out_h * c.out_w * c.out_channels
                        + c.out_h * c.out_w * c.out_channels * k) as u64
            };
            LayerFlops {
                f1: cost(1),
                f2: cost(levels),
                name: c.name,
            }
        })
        .collect();
    FlopsReport {
        timesteps,
        levels,
        f1: layers.iter().map(|l| l.f1).sum(),
        f2: layers.iter().map(|l| l.f2).sum(),
        layers,
        spikes: None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub samples: usize,
    pub p: f64,
    pub p_star: f64,
    pub unmapped: f64,
    pub se_p: f64,
    pub se_p_star: f64,
    pub se_unmapped: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub v_th1: f64,
    pub width: f64,
    pub p: f64,
    pub p_star: f64,
    pub mapped: f64,
    pub unmapped: f64,
    pub monte_carlo: Option<MonteCarloEstimate>,
}

impl TheoremReport {
    /// Largest Monte Carlo deviation from the closed form in standard errors.
    pub fn max_sigma(&self) -> Option<f64> {
        let mc = self.monte_carlo.as_ref()?;
        let z = |est: f64, exact: f64, se: f64| {
            if se > 0.0 {
                (est - exact).abs() / se
            } else if est == exact {
                0.0
            } else {
                f64::INFINITY
            }
        };
        Some(
            z(mc.p, self.p, mc.se_p)
                .max(z(mc.p_star, self.p_star, mc.se_p_star))
                .max(z(mc.unmapped, self.unmapped, mc.se_unmapped)),
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("quantity,closed_form,monte_carlo,std_error\n");
        let mc = self.monte_carlo.as_ref();
        let rows = [
            ("P", self.p, mc.map(|m| (m.p, m.se_p))),
            ("P_star", self.p_star, mc.map(|m| (m.p_star, m.se_p_star))),
            ("unmapped", self.unmapped, mc.map(|m| (m.unmapped, m.se_unmapped))),
        ];
        for (name, exact, est) in rows {
            let (e, se) = est.map(|(e, se)| (e.to_string(), se.to_string())).unwrap_or_default();
            let _ = writeln!(s, "{name},{exact},{e},{se}");
        }
        s
    }
}

fn check_theorem_args(v_th1: f64, width: f64) -> Result<()> {
    if !(v_th1 > 0.0 && width > 0.0 && v_th1.is_finite() && width.is_finite()) {
        return Err(Error::Domain(format!(
            "need V_th1 > 0 and a > 0, got {v_th1} and {width}"
        )));
    }
    Ok(())
}

/// Closed-form probabilities under residual inputs `x ~ N(0, V_th1²)`.
pub fn theorem1_closed_form(v_th1: f64, width: f64) -> Result<TheoremReport> {
    check_theorem_args(v_th1, width)?;
    let p = normal_sf((v_th1 + width / 2.0 - 1.0) / v_th1);
    let p_star = normal_sf((v_th1 + width / 2.0) / v_th1);
    let mapped = normal_cdf(1.0) - normal_cdf((v_th1 - 1.0) / v_th1);
    Ok(TheoremReport {
        v_th1,
        width,
        p,
        p_star,
        mapped,
        unmapped: 1.0 - mapped,
        monte_carlo: None,
    })
}

const MC_SHARDS: usize = 16;

/// Worker count from `MLF_SNN_THREADS`, else the machine's parallelism.
pub fn worker_threads() -> usize {
    std::env::var("MLF_SNN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Counts `(x + 1 right-saturated, x right-saturated, x unmapped)` for one shard.
fn mc_shard(v_th1: f64, width: f64, n: usize, seed: u64, shard: usize) -> [u64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shard as u64);
    let edge = v_th1 + width / 2.0;
    let mut counts = [0u64; 3];
    for _ in 0..n {
        let z: f64 = rng.sample(StandardNormal);
        let x = v_th1 * z;
        counts[0] += (x + 1.0 > edge) as u64;
        counts[1] += (x > edge) as u64;
        // a shortcut spike is reproduced only if 1 + x fires and 0 + x does not
        let mapped = x + 1.0 >= v_th1 && x < v_th1;
        counts[2] += (!mapped) as u64;
    }
    counts
}

/// Direct event counting over `samples` draws, sharded with per-shard
/// streams so the result does not depend on the worker count.
pub fn theorem1_monte_carlo(v_th1: f64, width: f64, samples: usize, seed: u64) -> Result<TheoremReport> {
    let mut report = theorem1_closed_form(v_th1, width)?;
    if samples == 0 {
        return Err(Error::Domain("Monte Carlo needs at least one sample".into()));
    }
    let shard_sizes: Vec<usize> = (0..MC_SHARDS)
        .map(|i| samples / MC_SHARDS + usize::from(i < samples % MC_SHARDS))
        .collect();
    let workers = worker_threads().min(MC_SHARDS);
    let mut results = vec![[0u64; 3]; MC_SHARDS];
    std::thread::scope(|scope| {
        for (w, chunk) in results.chunks_mut(MC_SHARDS.div_ceil(workers)).enumerate() {
            let sizes = &shard_sizes;
            scope.spawn(move || {
                let base = w * MC_SHARDS.div_ceil(workers);
                for (j, slot) in chunk.iter_mut().enumerate() {
                    *slot = mc_shard(v_th1, width, sizes[base + j], seed, base + j);
                }
            });
        }
    });
    let mut total = [0u64; 3];
    for r in &results {
        for (t, c) in total.iter_mut().zip(r) {
            *t += c;
        }
    }
    let n = samples as f64;
    let est = |c: u64| c as f64 / n;
    let se = |p: f64| (p * (1.0 - p) / n).sqrt();
    let (p, p_star, unmapped) = (est(total[0]), est(total[1]), est(total[2]));
    report.monte_carlo = Some(MonteCarloEstimate {
        samples,
        p,
        p_star,
        unmapped,
        se_p: se(p),
        se_p_star: se(p_star),
        se_unmapped: se(unmapped),
    });
    Ok(report)
}

/// Mass of `N(0, std²)` beyond the top surrogate window `V_th,K + a/2`.
pub fn level_coverage(cfg: &MlfConfig, dist_std: f64) -> Result<f64> {
    if !(dist_std > 0.0) {
        return Err(Error::Domain(format!("distribution std must be > 0, got {dist_std}")));
    }
    Ok(normal_sf((cfg.top_threshold() + cfg.width() / 2.0) / dist_std))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub edge: f64,
    pub samples: usize,
    pub beyond: usize,
    pub fraction: f64,
}

/// Empirical counterpart of [`level_coverage`] over recorded potentials.
pub fn level_coverage_empirical(potentials: &[f64], cfg: &MlfConfig) -> CoverageReport {
    let edge = cfg.top_threshold() + cfg.width() / 2.0;
    let beyond = potentials.iter().filter(|&&u| u > edge).count();
    CoverageReport {
        edge,
        samples: potentials.len(),
        beyond,
        fraction: if potentials.is_empty() {
            0.0
        } else {
            beyond as f64 / potentials.len() as f64
        },
    }
}

/// Top-level potentials recorded by every population whose name passes `keep`.
pub fn top_level_potentials(pass: &ForwardPass, levels: usize, keep: impl Fn(&str) -> bool) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in pass.neuron_layers() {
        if !keep(layer.name) {
            continue;
        }
        for rec in layer.trace.entries() {
            let units = rec.u.len() / levels;
            out.extend_from_slice(&rec.u[(levels - 1) * units..]);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceResult {
    pub cases: usize,
    pub max_deviation: f64,
    pub passed: bool,
}

pub const EQUIVALENCE_TOLERANCE: f64 = 1e-12;

/// Pre-synaptic input computed from spike counts `Σ_i w_i·s(o_i) + b` and
/// from the expanded per-level form `Σ_i Σ_k w_i·o_i,k + b`.
pub fn presynaptic_pair(weights: &[f64], spikes: &[Vec<u8>], bias: f64) -> Result<(f64, f64)> {
    if weights.len() != spikes.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} inputs",
            weights.len(),
            spikes.len()
        )));
    }
    let mut encoded = bias;
    let mut expanded = bias;
    for (w, levels) in weights.iter().zip(spikes) {
        if levels.iter().any(|&o| o > 1) {
            return Err(Error::Domain("per-level spikes must be 0 or 1".into()));
        }
        let count: f64 = levels.iter().map(|&o| o as f64).sum();
        encoded += w * count;
        for &o in levels {
            expanded += w * o as f64;
        }
    }
    Ok((encoded, expanded))
}

pub fn equivalence_check(weights: &[f64], spikes: &[Vec<u8>], bias: f64) -> Result<EquivalenceResult> {
    let (a, b) = presynaptic_pair(weights, spikes, bias)?;
    let dev = (a - b).abs();
    Ok(EquivalenceResult {
        cases: 1,
        max_deviation: dev,
        passed: dev <= EQUIVALENCE_TOLERANCE,
    })
}

/// Random sweep: 1–64 inputs, 1–4 levels, weights in ±1, bias in ±1.
pub fn equivalence_sweep(cases: usize, seed: u64) -> EquivalenceResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_dev: f64 = 0.0;
    for _ in 0..cases {
        let inputs = rng.gen_range(1..=64);
        let levels = rng.gen_range(1..=4);
        let weights: Vec<f64> = (0..inputs).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spikes: Vec<Vec<u8>> = (0..inputs)
            .map(|_| (0..levels).map(|_| rng.gen_range(0..=1)).collect())
            .collect();
        let bias = rng.gen_range(-1.0..1.0);
        let (a, b) = presynaptic_pair(&weights, &spikes, bias).expect("well-formed case");
        max_dev = max_dev.max((a - b).abs());
    }
    EquivalenceResult {
        cases,
        max_deviation: max_dev,
        passed: max_dev <= EQUIVALENCE_TOLERANCE,
    }
}
