use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use mlf_snn::analysis::{
    equivalence_sweep, flops_estimate, grad_stats, level_coverage, pass_dormancy, spike_count,
    theorem1_monte_carlo,
};
use mlf_snn::checkpoint::{load_checkpoint, save_checkpoint};
use mlf_snn::data::{
    bin_events as bin_stream, load_raw_tensor_dataset, read_events, save_dataset_dir, standardize,
    synth_spatiotemporal, write_atomic, write_tensor, ChannelStats, Dataset, SynthConfig,
};
use mlf_snn::network::{BlockVariant, Mode, Network, NetworkSpec, Width};
use mlf_snn::neuron::MlfConfig;
use mlf_snn::oracle::{gradcheck, tiny_case};
use mlf_snn::training::{evaluate, softmax_cross_entropy, train as fit, MetricRecord, TrainState};
use mlf_snn::{Error, Tensor};
use serde::Serialize;

use crate::run_config::RunConfig;

pub struct CliError {
    pub code: u8,
    pub message: String,
}

/// Which input an error came from; decides the exit code of I/O and format errors.
#[derive(Clone, Copy)]
enum Source {
    Config,
    Data,
    Checkpoint,
    Output,
}

fn fail(source: Source) -> impl Fn(Error) -> CliError {
    move |e| {
        let code = match (&e, source) {
            (Error::Config(_) | Error::Domain(_), _) => 2,
            (Error::Data(_), _) => 3,
            (Error::Version(_), _) => 4,
            (Error::Numeric { .. }, _) => 5,
            (Error::Format { .. } | Error::Io(_), Source::Data) => 3,
            (Error::Format { .. } | Error::Io(_), Source::Checkpoint) => 4,
            (Error::Io(_), Source::Config) => 2,
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn config_error(message: impl Into<String>) -> CliError {
    CliError {
        code: 2,
        message: message.into(),
    }
}

fn data_error(message: impl Into<String>) -> CliError {
    CliError {
        code: 3,
        message: message.into(),
    }
}

type CliResult = Result<ExitCode, CliError>;

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("report types serialize")
}

fn write_report(dir: &Path, name: &str, csv: &str, jsonl: &str) -> Result<(), CliError> {
    let out = fail(Source::Output);
    write_atomic(&dir.join(format!("{name}.csv")), csv.as_bytes()).map_err(&out)?;
    write_atomic(&dir.join(format!("{name}.jsonl")), jsonl.as_bytes()).map_err(&out)?;
    Ok(())
}

/// Standardization statistics of a root's training split, for static images.
fn image_stats(root: &Path) -> Result<Option<ChannelStats>, CliError> {
    match load_raw_tensor_dataset(root, "train") {
        Ok(ds) if ds.sample_shape().is_some_and(|s| s.len() == 3) => {
            ChannelStats::from_images(&ds.samples).map(Some).map_err(fail(Source::Data))
        }
        _ => Ok(None),
    }
}

fn load_split(root: &Path, split: &str) -> Result<Dataset, CliError> {
    let ds = load_raw_tensor_dataset(root, split).map_err(fail(Source::Data))?;
    if ds.is_empty() {
        return Err(data_error(format!("split `{split}` of {} is empty", root.display())));
    }
    Ok(ds)
}

fn check_shape(spec: &NetworkSpec, ds: &Dataset) -> Result<(), CliError> {
    let shape = ds.sample_shape().unwrap_or(&[]);
    let frame = &spec.input_shape[..];
    let ok = shape == frame || (shape.len() == 4 && shape[0] == spec.timesteps && &shape[1..] == frame);
    if !ok || ds.classes > spec.classes {
        return Err(data_error(format!(
            "data samples {shape:?} with {} classes do not fit a network taking {frame:?} over T = {} with {} classes",
            ds.classes, spec.timesteps, spec.classes
        )));
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(Network, TrainState), CliError> {
    load_checkpoint(path).map_err(fail(Source::Checkpoint))
}

pub fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>, resume: Option<PathBuf>) -> CliResult {
    let mut cfg = RunConfig::load(config).map_err(fail(Source::Config))?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let out = out
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| config_error("no output directory: pass --out or set key `run.out`"))?;
    let train_set = load_split(&cfg.data_root, &cfg.train_split)?;
    check_shape(&cfg.net, &train_set)?;
    let test_set = match &cfg.test_split {
        Some(split) => {
            let ds = load_split(&cfg.data_root, split)?;
            check_shape(&cfg.net, &ds)?;
            Some(ds)
        }
        None => None,
    };
    let stats = match train_set.sample_shape() {
        Some(s) if s.len() == 3 => Some(ChannelStats::from_images(&train_set.samples).map_err(fail(Source::Data))?),
        _ => None,
    };
    let (mut net, mut state) = match &resume {
        Some(path) => {
            let (net, state) = load_model(path)?;
            if net.spec() != &cfg.net {
                return Err(config_error(
                    "checkpoint architecture differs from the `net.*`/`neuron.*` keys of the config",
                ));
            }
            (net, state)
        }
        None => {
            let net = Network::build(&cfg.net, cfg.train.seed).map_err(fail(Source::Config))?;
            let state = TrainState::new(&net, &cfg.train);
            (net, state)
        }
    };
    fs::create_dir_all(&out).map_err(|e| config_error(format!("cannot create {}: {e}", out.display())))?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = String::new();
    if resume.is_some() {
        if let Ok(text) = fs::read_to_string(&metrics_path) {
            for line in text.lines() {
                if let Ok(r) = serde_json::from_str::<MetricRecord>(line) {
                    if r.epoch < state.epoch {
                        metrics.push_str(line);
                        metrics.push('\n');
                    }
                }
            }
        }
    }
    let mut resolved = cfg.clone();
    resolved.out_dir = Some(out.clone());
    write_atomic(&out.join("config.txt"), resolved.render().as_bytes()).map_err(fail(Source::Output))?;
    write_atomic(&metrics_path, metrics.as_bytes()).map_err(fail(Source::Output))?;
    let every = cfg.train.checkpoint_every;
    let log = fit(
        &mut net,
        &mut state,
        &train_set,
        test_set.as_ref(),
        &cfg.train,
        stats.as_ref(),
        |net, state, records| {
            for r in records {
                metrics.push_str(&r.to_json());
                metrics.push('\n');
                println!(
                    "epoch {:>3} {:<5} loss {:.5} acc {:.4} lr {}",
                    r.epoch, r.split, r.loss, r.acc, r.lr
                );
            }
            write_atomic(&metrics_path, metrics.as_bytes())?;
            if every > 0 && state.epoch % every == 0 {
                let mut snapshot = net.clone();
                save_checkpoint(&out.join(format!("checkpoint-{:04}.ckpt", state.epoch)), &mut snapshot, state)?;
            }
            Ok(())
        },
    )
    .map_err(fail(Source::Data))?;
    save_checkpoint(&out.join("final.ckpt"), &mut net, &state).map_err(fail(Source::Output))?;
    println!(
        "trained {} epoch(s); final checkpoint {}",
        log.iter().filter(|r| r.split == "train").count(),
        out.join("final.ckpt").display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    split: &'a str,
    loss: f64,
    acc: f64,
    samples: usize,
}

pub fn eval(checkpoint: &Path, data: &Path, split: &str, batch: usize) -> CliResult {
    let (mut net, _) = load_model(checkpoint)?;
    let ds = load_split(data, split)?;
    check_shape(net.spec(), &ds)?;
    let stats = image_stats(data)?;
    let ev = evaluate(&mut net, &ds, batch, stats.as_ref()).map_err(fail(Source::Data))?;
    println!("accuracy = {}", ev.acc);
    println!(
        "{}",
        json(&EvalRecord {
            split,
            loss: ev.loss,
            acc: ev.acc,
            samples: ev.samples
        })
    );
    Ok(ExitCode::SUCCESS)
}

/// First `batch` samples of a split as one time-major input.
fn probe_batch(net: &Network, data: &Path, split: &str, batch: usize) -> Result<(Tensor, Vec<usize>), CliError> {
    let ds = load_split(data, split)?;
    check_shape(net.spec(), &ds)?;
    let stats = image_stats(data)?;
    let n = batch.clamp(1, ds.len());
    let samples: Vec<Tensor> = ds.samples[..n]
        .iter()
        .map(|s| match &stats {
            Some(st) if s.ndim() == 3 => standardize(s, st),
            _ => s.clone(),
        })
        .collect();
    let x = net
        .stack_inputs(&samples.iter().collect::<Vec<_>>())
        .map_err(fail(Source::Data))?;
    Ok((x, ds.labels[..n].to_vec()))
}

pub fn analyze_dormant(checkpoint: &Path, data: &Path, split: &str, batch: usize, out: &Path) -> CliResult {
    let (mut net, state) = load_model(checkpoint)?;
    let (x, _) = probe_batch(&net, data, split, batch)?;
    let pass = net.forward(&x, Mode::Eval).map_err(fail(Source::Data))?;
    let neuron = net.neuron().clone();
    let mut report = pass_dormancy(&pass, &neuron);
    report.epoch = Some(state.epoch);
    let jsonl: String = report.layers.iter().map(|l| json(l) + "\n").collect();
    write_report(out, "dormant", &report.to_csv(), &jsonl)?;
    println!(
        "{} populations: mean right-saturated {:.6}, mean left-saturated {:.6}",
        report.layers.len(),
        report.mean_right(),
        report.mean_left()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn analyze_grads(checkpoint: &Path, data: &Path, split: &str, batch: usize, out: &Path) -> CliResult {
    let (mut net, _) = load_model(checkpoint)?;
    let (x, labels) = probe_batch(&net, data, split, batch)?;
    net.zero_grad();
    let pass = net.forward(&x, Mode::Train).map_err(fail(Source::Data))?;
    let (_, g) = softmax_cross_entropy(&pass.logits, &labels).map_err(fail(Source::Data))?;
    net.backward(&pass, &g).map_err(fail(Source::Data))?;
    let report = grad_stats(&net);
    let jsonl: String = report.stages.iter().map(|s| json(s) + "\n").collect();
    write_report(out, "grads", &report.to_csv(), &jsonl)?;
    for s in &report.stages {
        println!("conv{}_x mean |grad| {:.6e}", s.stage + 1, s.mean_abs);
    }
    Ok(ExitCode::SUCCESS)
}

pub struct FlopsArgs {
    pub checkpoint: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub layers: usize,
    pub width: String,
    pub timesteps: usize,
    pub levels: usize,
    pub shortcut_kernel: usize,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn analyze_flops(args: FlopsArgs) -> CliResult {
    let mut net = None;
    let spec = match (&args.checkpoint, &args.config) {
        (Some(path), _) => {
            let (n, _) = load_model(path)?;
            let spec = n.spec().clone();
            net = Some(n);
            spec
        }
        (None, Some(path)) => RunConfig::load(path).map_err(fail(Source::Config))?.net,
        (None, None) => {
            let width: Width = args.width.parse().map_err(fail(Source::Config))?;
            let mut spec = NetworkSpec::resnet(args.layers, width, BlockVariant::SpikingResnet, args.levels)
                .map_err(fail(Source::Config))?;
            spec.timesteps = args.timesteps;
            spec.shortcut_kernel = args.shortcut_kernel;
            spec.validate().map_err(fail(Source::Config))?;
            spec
        }
    };
    let mut report = flops_estimate(&spec, spec.timesteps, spec.neuron.levels());
    if let (Some(net), Some(root)) = (net.as_mut(), &args.data) {
        let (x, _) = probe_batch(net, root, "test", 32)?;
        let pass = net.forward(&x, Mode::Eval).map_err(fail(Source::Data))?;
        report.spikes = Some(spike_count(&pass));
    }
    let jsonl: String = report.layers.iter().map(|l| json(l) + "\n").collect::<String>() + &json(&report) + "\n";
    write_report(&args.out, "flops", &report.to_csv(), &jsonl)?;
    println!("F1 (LIF) = {:.4e}", report.f1 as f64);
    println!("F2 (MLF, K = {}) = {:.4e}", report.levels, report.f2 as f64);
    if let Some(s) = report.spikes {
        println!("spikes = {s}");
    }
    Ok(ExitCode::SUCCESS)
}

fn verdict(pass: bool) -> CliResult {
    println!("{}", if pass { "PASS" } else { "FAIL" });
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

pub fn verify_theorem1(v_th1: f64, width: f64, samples: usize, seed: u64) -> CliResult {
    let r = theorem1_monte_carlo(v_th1, width, samples, seed).map_err(fail(Source::Config))?;
    let sigma = r.max_sigma().unwrap_or(f64::INFINITY);
    println!("P = {:.6}  P* = {:.6}  mapped = {:.6}  unmapped = {:.6}", r.p, r.p_star, r.mapped, r.unmapped);
    if let Some(mc) = &r.monte_carlo {
        println!(
            "Monte Carlo (n = {}): P = {:.6}  P* = {:.6}  unmapped = {:.6}  max deviation {sigma:.2} SE",
            mc.samples, mc.p, mc.p_star, mc.unmapped
        );
    }
    println!("{}", json(&r));
    verdict(r.p_star < r.p && sigma <= 3.0)
}

pub fn verify_equivalence(cases: usize, seed: u64) -> CliResult {
    let r = equivalence_sweep(cases, seed);
    println!("{} cases, max deviation {:e}", r.cases, r.max_deviation);
    println!("{}", json(&r));
    verdict(r.passed)
}

#[derive(Serialize)]
struct GradcheckSummary {
    cases: usize,
    max_rel_error: f64,
    worst: String,
}

pub fn verify_gradcheck(cases: usize, seed: u64) -> CliResult {
    let mut worst = (0.0f64, String::new());
    for i in 0..cases {
        let variant = BlockVariant::ALL[i % 3];
        let levels = 1 + (i / 3) % 3;
        let mut case = tiny_case(seed + i as u64, variant, levels).map_err(fail(Source::Config))?;
        let r = gradcheck(&mut case).map_err(fail(Source::Config))?;
        if r.max_rel_error >= worst.0 {
            worst = (r.max_rel_error, format!("{variant} K={levels} {}", r.worst_param));
        }
    }
    println!("{cases} tiny networks, max relative error {:.3e} ({})", worst.0, worst.1);
    println!(
        "{}",
        json(&GradcheckSummary {
            cases,
            max_rel_error: worst.0,
            worst: worst.1
        })
    );
    verdict(worst.0 < 1e-8)
}

#[derive(Serialize)]
struct CoverageSummary {
    levels: usize,
    std: f64,
    edge: f64,
    tail: f64,
}

pub fn verify_coverage(levels: usize, std: f64) -> CliResult {
    let cfg = MlfConfig::new(levels, 0.6, 1.0, 0.25).map_err(fail(Source::Config))?;
    let tail = level_coverage(&cfg, std).map_err(fail(Source::Config))?;
    let edge = cfg.top_threshold() + cfg.width() / 2.0;
    println!("mass beyond {edge} under N(0, {std}²): {tail:.3e}");
    println!("{}", json(&CoverageSummary { levels, std, edge, tail }));
    verdict(tail < 1e-6)
}

pub fn synth(
    out: &Path,
    classes: usize,
    samples: usize,
    test_samples: usize,
    timesteps: usize,
    size: usize,
    seed: u64,
) -> CliResult {
    let cfg = SynthConfig::new(classes, samples, timesteps, [2, size, size], seed);
    let train_set = synth_spatiotemporal(&cfg).map_err(fail(Source::Config))?;
    let mut prep = cfg.preprocessing();
    prep.push(("test_samples".into(), test_samples.to_string()));
    let names: Vec<String> = (0..classes).map(|c| format!("class{c}")).collect();
    let test_set;
    let mut splits = vec![("train", &train_set)];
    if test_samples > 0 {
        test_set = synth_spatiotemporal(&SynthConfig {
            samples: test_samples,
            seed: seed.wrapping_add(1),
            ..cfg.clone()
        })
        .map_err(fail(Source::Config))?;
        splits.push(("test", &test_set));
    }
    let m = save_dataset_dir(out, &splits, &names, &prep).map_err(fail(Source::Output))?;
    println!("wrote {} (fingerprint {})", out.display(), m.fingerprint);
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct BinSummary {
    total: usize,
    mapped: usize,
    discarded: usize,
    collisions: usize,
}

pub fn bin_events(input: &Path, out: &Path, size: usize, bin_ms: f64, timesteps: usize) -> CliResult {
    let stream = read_events(input, 0).map_err(fail(Source::Data))?;
    let (frames, stats) = bin_stream(&stream, (size, size), bin_ms, timesteps).map_err(fail(Source::Data))?;
    write_tensor(out, &frames.frames).map_err(fail(Source::Output))?;
    println!(
        "{}",
        json(&BinSummary {
            total: stats.total,
            mapped: stats.mapped,
            discarded: stats.discarded,
            collisions: stats.collisions
        })
    );
    Ok(ExitCode::SUCCESS)
}
