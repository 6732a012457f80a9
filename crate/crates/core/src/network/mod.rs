//! Spiking residual networks: conv → tdBN → MLF units arranged as a stem,
//! residual stages and a rate-decoded classifier.

mod spec;
mod tdbn;

pub use spec::{Architecture, BlockVariant, ConvLayerShape, NetworkSpec, Width};
pub use tdbn::{tdbn_backward, tdbn_forward, Mode, TdbnCache, TdbnGrads, TdbnParams};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Error, Result};
use crate::neuron::{mlf_backward_sequence, mlf_forward_sequence, MlfConfig, StepTrace};
use crate::ops::{
    conv2d_backward, conv2d_forward, global_avg_pool, global_avg_pool_backward, linear_backward,
    linear_forward,
};
use crate::tensor::{ParamRole, ParamTensor, Tensor};

/// Convolution without bias (tdBN's shift subsumes it).
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamTensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    fn he_normal(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| std * rng.sample::<f64, _>(StandardNormal));
        Self {
            weight: ParamTensor::new(w, ParamRole::Weight),
            stride,
            padding: k / 2,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_forward(x, &self.weight.value, None, self.stride, self.padding)
    }

    /// Accumulates the kernel gradient and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
        let g = conv2d_backward(grad_out, input, &self.weight.value, self.stride, self.padding)?;
        self.weight.accumulate(&g.kernel)?;
        Ok(g.input)
    }
}

/// Convolution followed by tdBN.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: TdbnParams,
}

#[derive(Clone, Debug)]
pub struct ConvBnCache {
    input: Tensor,
    bn: TdbnCache,
}

impl ConvBn {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv::he_normal(cin, cout, 3, stride, rng),
            bn: TdbnParams::new(cout),
        }
    }

    pub fn forward(&mut self, x: &Tensor, v_th1: f64, mode: Mode) -> Result<(Tensor, ConvBnCache)> {
        let a = self.conv.forward(x)?;
        let (y, bn) = tdbn_forward(&a, &mut self.bn, v_th1, mode)?;
        Ok((
            y,
            ConvBnCache {
                input: x.clone(),
                bn,
            },
        ))
    }

    pub fn backward(&mut self, grad_out: &Tensor, cache: &ConvBnCache) -> Result<Tensor> {
        let g = tdbn_backward(grad_out, Some(&cache.bn), &self.bn)?;
        self.bn.gamma.accumulate(&g.gamma)?;
        self.bn.beta.accumulate(&g.beta)?;
        self.conv.backward(&g.input, &cache.input)
    }
}

/// Adds the shortcut to a residual pre-activation and fires, as in the
/// activation-after-addition blocks.
pub fn merge_and_fire(
    residual: &Tensor,
    shortcut: &Tensor,
    neuron: &MlfConfig,
    timesteps: usize,
) -> Result<(Tensor, StepTrace)> {
    let z = residual.add(shortcut)?;
    mlf_forward_sequence(&z, timesteps, neuron)
}

#[derive(Clone, Debug)]
pub struct Block {
    pub variant: BlockVariant,
    pub a: ConvBn,
    pub b: ConvBn,
    /// Projection used when the block changes channel count or resolution.
    pub shortcut: Option<Conv>,
    /// tdBN on the shortcut path (resnet-snn only).
    pub shortcut_bn: Option<TdbnParams>,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    input: Tensor,
    a: ConvBnCache,
    trace_a: StepTrace,
    b: ConvBnCache,
    /// Second-branch activation for ds-resnet, post-addition activation otherwise.
    trace_out: StepTrace,
    shortcut_bn: Option<TdbnCache>,
}

impl Block {
    pub fn new(
        variant: BlockVariant,
        cin: usize,
        cout: usize,
        stride: usize,
        shortcut_kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let a = ConvBn::new(cin, cout, stride, rng);
        let b = ConvBn::new(cout, cout, 1, rng);
        let shortcut = (stride != 1 || cin != cout)
            .then(|| Conv::he_normal(cin, cout, shortcut_kernel, stride, rng));
        let shortcut_bn = (variant == BlockVariant::ResnetSnn).then(|| TdbnParams::new(cout));
        Self {
            variant,
            a,
            b,
            shortcut,
            shortcut_bn,
        }
    }

    pub fn forward(
        &mut self,
        x: &Tensor,
        neuron: &MlfConfig,
        timesteps: usize,
        mode: Mode,
    ) -> Result<(Tensor, BlockCache)> {
        let v_th1 = neuron.v_th1();
        let (ya, a) = self.a.forward(x, v_th1, mode)?;
        let (sa, trace_a) = mlf_forward_sequence(&ya, timesteps, neuron)?;
        let (yb, b) = self.b.forward(&sa, v_th1, mode)?;
        let projected = match &self.shortcut {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        let (out, trace_out, shortcut_bn) = match self.variant {
            BlockVariant::DsResnet => {
                let (sb, trace) = mlf_forward_sequence(&yb, timesteps, neuron)?;
                (sb.add(&projected)?, trace, None)
            }
            BlockVariant::SpikingResnet => {
                let (out, trace) = merge_and_fire(&yb, &projected, neuron, timesteps)?;
                (out, trace, None)
            }
            BlockVariant::ResnetSnn => {
                let bn = self
                    .shortcut_bn
                    .as_mut()
                    .ok_or_else(|| Error::Config("resnet-snn block without shortcut tdBN".into()))?;
                let (normed, cache) = tdbn_forward(&projected, bn, v_th1, mode)?;
                let (out, trace) = merge_and_fire(&yb, &normed, neuron, timesteps)?;
                (out, trace, Some(cache))
            }
        };
        Ok((
            out,
            BlockCache {
                input: x.clone(),
                a,
                trace_a,
                b,
                trace_out,
                shortcut_bn,
            },
        ))
    }

    pub fn backward(
        &mut self,
        grad_out: &Tensor,
        cache: &BlockCache,
        neuron: &MlfConfig,
        timesteps: usize,
    ) -> Result<Tensor> {
        let (grad_branch, grad_shortcut) = match self.variant {
            BlockVariant::DsResnet => {
                let g = mlf_backward_sequence(grad_out, &cache.trace_out, timesteps, neuron)?;
                (g, grad_out.clone())
            }
            BlockVariant::SpikingResnet => {
                let g = mlf_backward_sequence(grad_out, &cache.trace_out, timesteps, neuron)?;
                (g.clone(), g)
            }
            BlockVariant::ResnetSnn => {
                let g = mlf_backward_sequence(grad_out, &cache.trace_out, timesteps, neuron)?;
                let bn = self
                    .shortcut_bn
                    .as_mut()
                    .ok_or_else(|| Error::Config("resnet-snn block without shortcut tdBN".into()))?;
                let gs = tdbn_backward(&g, cache.shortcut_bn.as_ref(), bn)?;
                bn.gamma.accumulate(&gs.gamma)?;
                bn.beta.accumulate(&gs.beta)?;
                (g, gs.input)
            }
        };
        let g_sa = self.b.backward(&grad_branch, &cache.b)?;
        let g_ya = mlf_backward_sequence(&g_sa, &cache.trace_a, timesteps, neuron)?;
        let mut g_x = self.a.backward(&g_ya, &cache.a)?;
        let g_short = match &mut self.shortcut {
            Some(conv) => conv.backward(&grad_shortcut, &cache.input)?,
            None => grad_shortcut,
        };
        g_x.add_assign(&g_short)?;
        Ok(g_x)
    }
}

#[derive(Clone, Debug)]
pub enum Body {
    Residual(Vec<Block>),
    Plain(Vec<ConvBn>),
}

#[derive(Clone, Debug)]
enum BodyCache {
    Residual(Vec<BlockCache>),
    Plain(Vec<(ConvBnCache, StepTrace)>),
}

/// Metadata for one trainable tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    /// 0 for the encoding layer and classifier, `s ≥ 1` for feature stage `s`.
    pub stage: usize,
    pub conv_weight: bool,
}

/// Recorded activity of one population of MLF units.
#[derive(Clone, Copy, Debug)]
pub struct NeuronLayer<'a> {
    pub name: &'a str,
    pub stage: usize,
    pub trace: &'a StepTrace,
}

/// Everything recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    generation: u64,
    timesteps: usize,
    batch: usize,
    stem: ConvBnCache,
    stem_trace: StepTrace,
    body: BodyCache,
    head_input: Tensor,
    head_hw: (usize, usize),
    neuron_names: Vec<(String, usize)>,
    /// Decoded logits `[N, classes]`.
    pub logits: Tensor,
    /// Classifier outputs per timestep, `[T, N, classes]`.
    pub step_logits: Tensor,
}

impl ForwardPass {
    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// MLF populations in execution order.
    pub fn neuron_layers(&self) -> Vec<NeuronLayer<'_>> {
        let mut traces: Vec<&StepTrace> = vec![&self.stem_trace];
        match &self.body {
            BodyCache::Residual(blocks) => {
                for b in blocks {
                    traces.push(&b.trace_a);
                    traces.push(&b.trace_out);
                }
            }
            BodyCache::Plain(units) => traces.extend(units.iter().map(|(_, t)| t)),
        }
        self.neuron_names
            .iter()
            .zip(traces)
            .map(|((name, stage), trace)| NeuronLayer {
                name,
                stage: *stage,
                trace,
            })
            .collect()
    }
}

/// Mean over time of per-step classifier outputs: `[T, N, C] -> [N, C]`.
pub fn decode_logits(step_logits: &Tensor) -> Result<Tensor> {
    step_logits.expect_ndim(3, "decode_logits")?;
    let (t, n, c) = (step_logits.dim(0), step_logits.dim(1), step_logits.dim(2));
    if t == 0 {
        return dim_err("decode_logits: no timesteps");
    }
    let mut out = Tensor::zeros(&[n, c]);
    for chunk in step_logits.data().chunks(n * c) {
        for (o, v) in out.data_mut().iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Ok(out.scale(1.0 / t as f64))
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    pub stem: ConvBn,
    pub body: Body,
    pub fc_weight: ParamTensor,
    pub fc_bias: ParamTensor,
    generation: u64,
}

impl Network {
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = spec.width.base_channels();
        let stem = ConvBn::new(spec.input_shape[0], base, 1, &mut rng);
        let (body, head_channels) = match spec.arch {
            Architecture::ResNet => {
                let mut blocks = Vec::new();
                let mut cin = base;
                for (s, cout) in spec.stage_channels().into_iter().enumerate() {
                    for b in 0..spec.depth_n {
                        blocks.push(Block::new(
                            spec.variant,
                            cin,
                            cout,
                            spec.block_stride(s, b),
                            spec.shortcut_kernel,
                            &mut rng,
                        ));
                        cin = cout;
                    }
                }
                (Body::Residual(blocks), cin)
            }
            Architecture::PlainVgg16 => {
                let mut units = Vec::new();
                let mut cin = base;
                for (cout, stride) in spec::vgg16_plan(base) {
                    units.push(ConvBn::new(cin, cout, stride, &mut rng));
                    cin = cout;
                }
                (Body::Plain(units), cin)
            }
        };
        let std = (1.0 / head_channels as f64).sqrt();
        let fc = Tensor::from_fn(&[spec.classes, head_channels], |_| {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        Ok(Self {
            spec: spec.clone(),
            stem,
            body,
            fc_weight: ParamTensor::new(fc, ParamRole::Weight),
            fc_bias: ParamTensor::new(Tensor::zeros(&[spec.classes]), ParamRole::Bias),
            generation: 0,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn neuron(&self) -> &MlfConfig {
        &self.spec.neuron
    }

    /// Replaces the neuron configuration (e.g. to sweep `K` on fixed weights).
    pub fn set_neuron(&mut self, neuron: MlfConfig) {
        self.spec.neuron = neuron;
        self.generation += 1;
    }

    fn mlf_names(&self) -> Vec<(String, usize)> {
        let mut names = vec![("conv1".to_string(), 0)];
        match &self.body {
            Body::Residual(blocks) => {
                for (i, _) in blocks.iter().enumerate() {
                    let (s, b) = (i / self.spec.depth_n, i % self.spec.depth_n);
                    let name = format!("conv{}_{}", s + 2, b + 1);
                    names.push((format!("{name}.a"), s + 1));
                    names.push((format!("{name}.out"), s + 1));
                }
            }
            Body::Plain(units) => {
                for i in 0..units.len() {
                    names.push((format!("plain{}", i + 2), spec::vgg_stage(i)));
                }
            }
        }
        names
    }

    /// Runs every layer over all `T` steps. `input` is time-major
    /// `[T·N, C, H, W]` matching the spec's per-step input shape.
    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<ForwardPass> {
        let t = self.spec.timesteps;
        let [c, h, w] = self.spec.input_shape;
        input.expect_ndim(4, "network input")?;
        if input.shape()[1..] != [c, h, w] || input.dim(0) % t != 0 || input.dim(0) == 0 {
            return dim_err(format!(
                "network expects [T·N, {c}, {h}, {w}] with T = {t}, got {:?}",
                input.shape()
            ));
        }
        let batch = input.dim(0) / t;
        let neuron = self.spec.neuron.clone();
        let v_th1 = neuron.v_th1();
        self.generation += 1;

        let (y, stem) = self.stem.forward(input, v_th1, mode)?;
        check_finite(&y, "conv1", t)?;
        let (mut x, stem_trace) = mlf_forward_sequence(&y, t, &neuron)?;
        let body = match &mut self.body {
            Body::Residual(blocks) => {
                let mut caches = Vec::with_capacity(blocks.len());
                for (i, block) in blocks.iter_mut().enumerate() {
                    let (out, cache) = block.forward(&x, &neuron, t, mode)?;
                    check_finite(&out, &format!("block {i}"), t)?;
                    caches.push(cache);
                    x = out;
                }
                BodyCache::Residual(caches)
            }
            Body::Plain(units) => {
                let mut caches = Vec::with_capacity(units.len());
                for (i, unit) in units.iter_mut().enumerate() {
                    let (y, cache) = unit.forward(&x, v_th1, mode)?;
                    check_finite(&y, &format!("plain{}", i + 2), t)?;
                    let (s, trace) = mlf_forward_sequence(&y, t, &neuron)?;
                    caches.push((cache, trace));
                    x = s;
                }
                BodyCache::Plain(caches)
            }
        };
        let head_hw = (x.dim(2), x.dim(3));
        let pooled = global_avg_pool(&x)?;
        let step = linear_forward(&pooled, &self.fc_weight.value, &self.fc_bias.value)?;
        check_finite(&step, "fc", t)?;
        let step_logits = step.reshape(&[t, batch, self.spec.classes])?;
        let logits = decode_logits(&step_logits)?;
        Ok(ForwardPass {
            generation: self.generation,
            timesteps: t,
            batch,
            stem,
            stem_trace,
            body,
            head_input: pooled,
            head_hw,
            neuron_names: self.mlf_names(),
            logits,
            step_logits,
        })
    }

    /// Backpropagates `∂L/∂logits` through the pass recorded by the most
    /// recent [`Network::forward`], accumulating into every parameter gradient.
    pub fn backward(&mut self, pass: &ForwardPass, grad_logits: &Tensor) -> Result<()> {
        if pass.generation != self.generation {
            return Err(Error::Sequencing(
                "backward needs the trace of the immediately preceding forward pass".into(),
            ));
        }
        let t = pass.timesteps;
        grad_logits.expect_shape(&[pass.batch, self.spec.classes], "grad_logits")?;
        let neuron = self.spec.neuron.clone();
        // decode is a mean over time
        let mut g_step = Tensor::zeros(&[t * pass.batch, self.spec.classes]);
        for chunk in g_step.data_mut().chunks_mut(grad_logits.len()) {
            for (d, g) in chunk.iter_mut().zip(grad_logits.data()) {
                *d = g / t as f64;
            }
        }
        let lg = linear_backward(&g_step, &pass.head_input, &self.fc_weight.value)?;
        self.fc_weight.accumulate(&lg.weight)?;
        self.fc_bias.accumulate(&lg.bias)?;
        let mut g = global_avg_pool_backward(&lg.input, pass.head_hw.0, pass.head_hw.1)?;
        match (&mut self.body, &pass.body) {
            (Body::Residual(blocks), BodyCache::Residual(caches)) if blocks.len() == caches.len() => {
                for (block, cache) in blocks.iter_mut().zip(caches).rev() {
                    g = block.backward(&g, cache, &neuron, t)?;
                }
            }
            (Body::Plain(units), BodyCache::Plain(caches)) if units.len() == caches.len() => {
                for (unit, (cache, trace)) in units.iter_mut().zip(caches).rev() {
                    let gy = mlf_backward_sequence(&g, trace, t, &neuron)?;
                    g = unit.backward(&gy, cache)?;
                }
            }
            _ => {
                return Err(Error::Sequencing(
                    "forward trace does not match the network structure".into(),
                ))
            }
        }
        let gy = mlf_backward_sequence(&g, &pass.stem_trace, t, &neuron)?;
        self.stem.backward(&gy, &pass.stem)?;
        Ok(())
    }

    /// Marks parameters as changed so stale traces are rejected by `backward`.
    pub fn touch(&mut self) {
        self.generation += 1;
    }

    pub fn params(&self) -> Vec<(ParamInfo, &ParamTensor)> {
        let mut out = Vec::new();
        fn info(name: String, stage: usize, conv_weight: bool) -> ParamInfo {
            ParamInfo {
                name,
                stage,
                conv_weight,
            }
        }
        fn push_unit<'a>(out: &mut Vec<(ParamInfo, &'a ParamTensor)>, name: &str, stage: usize, u: &'a ConvBn) {
            out.push((info(format!("{name}.weight"), stage, true), &u.conv.weight));
            out.push((info(format!("{name}.bn.gamma"), stage, false), &u.bn.gamma));
            out.push((info(format!("{name}.bn.beta"), stage, false), &u.bn.beta));
        }
        push_unit(&mut out, "conv1", 0, &self.stem);
        match &self.body {
            Body::Residual(blocks) => {
                for (i, block) in blocks.iter().enumerate() {
                    let (s, b) = (i / self.spec.depth_n, i % self.spec.depth_n);
                    let name = format!("conv{}_{}", s + 2, b + 1);
                    push_unit(&mut out, &format!("{name}.a"), s + 1, &block.a);
                    push_unit(&mut out, &format!("{name}.b"), s + 1, &block.b);
                    if let Some(conv) = &block.shortcut {
                        out.push((info(format!("{name}.shortcut.weight"), s + 1, true), &conv.weight));
                    }
                    if let Some(bn) = &block.shortcut_bn {
                        out.push((info(format!("{name}.shortcut.bn.gamma"), s + 1, false), &bn.gamma));
                        out.push((info(format!("{name}.shortcut.bn.beta"), s + 1, false), &bn.beta));
                    }
                }
            }
            Body::Plain(units) => {
                for (i, u) in units.iter().enumerate() {
                    push_unit(&mut out, &format!("plain{}", i + 2), spec::vgg_stage(i), u);
                }
            }
        }
        out.push((info("fc.weight".into(), 0, false), &self.fc_weight));
        out.push((info("fc.bias".into(), 0, false), &self.fc_bias));
        out
    }

    /// Same order as [`Network::params`].
    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out: Vec<&mut ParamTensor> = Vec::new();
        fn unit<'a>(out: &mut Vec<&'a mut ParamTensor>, u: &'a mut ConvBn) {
            out.push(&mut u.conv.weight);
            out.push(&mut u.bn.gamma);
            out.push(&mut u.bn.beta);
        }
        unit(&mut out, &mut self.stem);
        match &mut self.body {
            Body::Residual(blocks) => {
                for block in blocks {
                    unit(&mut out, &mut block.a);
                    unit(&mut out, &mut block.b);
                    if let Some(conv) = &mut block.shortcut {
                        out.push(&mut conv.weight);
                    }
                    if let Some(bn) = &mut block.shortcut_bn {
                        out.push(&mut bn.gamma);
                        out.push(&mut bn.beta);
                    }
                }
            }
            Body::Plain(units) => units.iter_mut().for_each(|u| unit(&mut out, u)),
        }
        out.push(&mut self.fc_weight);
        out.push(&mut self.fc_bias);
        self.generation += 1;
        out
    }

    /// tdBN running statistics, named `<layer>.running_mean` / `.running_var`.
    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        fn bn<'a>(out: &mut Vec<(String, &'a mut Vec<f64>)>, name: &str, p: &'a mut TdbnParams) {
            out.push((format!("{name}.running_mean"), &mut p.running_mean));
            out.push((format!("{name}.running_var"), &mut p.running_var));
        }
        bn(&mut out, "conv1.bn", &mut self.stem.bn);
        let depth = self.spec.depth_n;
        match &mut self.body {
            Body::Residual(blocks) => {
                for (i, block) in blocks.iter_mut().enumerate() {
                    let name = format!("conv{}_{}", i / depth + 2, i % depth + 1);
                    bn(&mut out, &format!("{name}.a.bn"), &mut block.a.bn);
                    bn(&mut out, &format!("{name}.b.bn"), &mut block.b.bn);
                    if let Some(p) = &mut block.shortcut_bn {
                        bn(&mut out, &format!("{name}.shortcut.bn"), p);
                    }
                }
            }
            Body::Plain(units) => {
                for (i, u) in units.iter_mut().enumerate() {
                    bn(&mut out, &format!("plain{}.bn", i + 2), &mut u.bn);
                }
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(ParamTensor::zero_grad);
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Time-major batch from per-sample sequences `[T, C, H, W]` or static
    /// images `[C, H, W]` (repeated at every step).
    pub fn stack_inputs(&self, samples: &[&Tensor]) -> Result<Tensor> {
        stack_time_major(samples, self.spec.timesteps)
    }
}

pub fn stack_time_major(samples: &[&Tensor], timesteps: usize) -> Result<Tensor> {
    let Some(first) = samples.first() else {
        return dim_err("empty batch");
    };
    let frame_shape: Vec<usize> = match first.ndim() {
        3 => first.shape().to_vec(),
        4 if first.dim(0) == timesteps => first.shape()[1..].to_vec(),
        _ => {
            return dim_err(format!(
                "sample shape {:?} is neither [C,H,W] nor [T={timesteps},C,H,W]",
                first.shape()
            ))
        }
    };
    let frame: usize = frame_shape.iter().product();
    let n = samples.len();
    let mut shape = vec![timesteps * n];
    shape.extend_from_slice(&frame_shape);
    let mut out = Tensor::zeros(&shape);
    for (i, s) in samples.iter().enumerate() {
        if s.shape() != first.shape() {
            return dim_err("batch samples differ in shape");
        }
        for t in 0..timesteps {
            let src = if s.ndim() == 3 {
                s.data()
            } else {
                &s.data()[t * frame..(t + 1) * frame]
            };
            out.data_mut()[(t * n + i) * frame..][..frame].copy_from_slice(src);
        }
    }
    Ok(out)
}

fn check_finite(x: &Tensor, layer: &str, timesteps: usize) -> Result<()> {
    if x.is_finite() {
        return Ok(());
    }
    let per_step = x.len() / timesteps.max(1);
    let bad = x.data().iter().position(|v| !v.is_finite()).unwrap_or(0);
    Err(Error::Numeric {
        layer: layer.to_string(),
        timestep: bad / per_step.max(1) + 1,
        detail: "non-finite activation".into(),
    })
}
