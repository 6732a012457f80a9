//! Scalar computational-graph reference for network gradients.
//!
//! Every activation is an individual node on a tape; the spike nonlinearity
//! is a node whose local derivative is the rectangular surrogate. Gradients
//! come from a plain reverse sweep, so the result shares no code with the
//! tensor kernels, tdBN adjoint or BPTT loop it is used to check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{Architecture, Block, Body, BlockVariant, Conv, ConvBn, Mode, Network, NetworkSpec, Width};
use crate::neuron::MlfConfig;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Reverse-mode tape of scalar operations.
#[derive(Default)]
pub struct Graph {
    values: Vec<f64>,
    offsets: Vec<usize>,
    edges: Vec<(usize, f64)>,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            offsets: vec![0],
            edges: Vec::new(),
        }
    }

    fn node(&mut self, value: f64, parents: &[(Var, f64)]) -> Var {
        self.values.push(value);
        self.edges.extend(parents.iter().map(|(v, d)| (v.0, *d)));
        self.offsets.push(self.edges.len());
        Var(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.0]
    }

    pub fn leaf(&mut self, value: f64) -> Var {
        self.node(value, &[])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.node(self.value(a) + self.value(b), &[(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.node(self.value(a) - self.value(b), &[(a, 1.0), (b, -1.0)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        self.node(va * vb, &[(a, vb), (b, va)])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        self.node(va / vb, &[(a, 1.0 / vb), (b, -va / (vb * vb))])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.node(c * self.value(a), &[(a, c)])
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.node(self.value(a) + c, &[(a, 1.0)])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let r = self.value(a).sqrt();
        self.node(r, &[(a, 0.5 / r)])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let e = self.value(a).exp();
        self.node(e, &[(a, e)])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a);
        self.node(v.ln(), &[(a, 1.0 / v)])
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let total = xs.iter().map(|&x| self.value(x)).sum();
        let parents: Vec<(Var, f64)> = xs.iter().map(|&x| (x, 1.0)).collect();
        self.node(total, &parents)
    }

    /// `Σ wᵢ·xᵢ` with both operands differentiable.
    pub fn dot(&mut self, ws: &[Var], xs: &[Var]) -> Var {
        let mut total = 0.0;
        let mut parents = Vec::with_capacity(2 * ws.len());
        for (&w, &x) in ws.iter().zip(xs) {
            let (vw, vx) = (self.value(w), self.value(x));
            total += vw * vx;
            parents.push((w, vx));
            parents.push((x, vw));
        }
        self.node(total, &parents)
    }

    /// Heaviside step `u ≥ threshold` whose derivative is the rectangular
    /// surrogate `1/width` on `|u − threshold| < width/2`.
    pub fn spike(&mut self, u: Var, threshold: f64, width: f64) -> Var {
        let vu = self.value(u);
        let fired = if vu >= threshold { 1.0 } else { 0.0 };
        let d = if (vu - threshold).abs() < width / 2.0 {
            1.0 / width
        } else {
            0.0
        };
        self.node(fired, &[(u, d)])
    }

    /// Gradient of `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Vec<f64> {
        let mut grad = vec![0.0; self.values.len()];
        grad[out.0] = 1.0;
        for i in (0..=out.0).rev() {
            let g = grad[i];
            if g == 0.0 {
                continue;
            }
            for &(p, d) in &self.edges[self.offsets[i]..self.offsets[i + 1]] {
                grad[p] += g * d;
            }
        }
        grad
    }
}

/// Activations indexed `[t][n][c][y][x]`, flattened.
struct Maps {
    t: usize,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    vars: Vec<Var>,
}

impl Maps {
    fn idx(&self, t: usize, n: usize, c: usize, y: usize, x: usize) -> usize {
        (((t * self.n + n) * self.c + c) * self.h + y) * self.w + x
    }

    fn get(&self, t: usize, n: usize, c: usize, y: usize, x: usize) -> Var {
        self.vars[self.idx(t, n, c, y, x)]
    }

    fn like(&self, c: usize, h: usize, w: usize) -> Self {
        Maps {
            t: self.t,
            n: self.n,
            c,
            h,
            w,
            vars: Vec::with_capacity(self.t * self.n * c * h * w),
        }
    }
}

struct Replay<'a> {
    g: Graph,
    neuron: &'a MlfConfig,
    leaves: Vec<(String, Vec<Var>)>,
}

impl<'a> Replay<'a> {
    fn param(&mut self, name: String, t: &Tensor) -> Vec<Var> {
        let vars: Vec<Var> = t.data().iter().map(|&v| self.g.leaf(v)).collect();
        self.leaves.push((name, vars.clone()));
        vars
    }

    fn conv(&mut self, x: &Maps, conv: &Conv, name: &str) -> Maps {
        let w = self.param(format!("{name}.weight"), &conv.weight.value);
        let shape = conv.weight.value.shape();
        let (cout, cin, k) = (shape[0], shape[1], shape[2]);
        let (s, p) = (conv.stride, conv.padding as isize);
        let oh = (x.h + 2 * conv.padding - k) / s + 1;
        let ow = (x.w + 2 * conv.padding - k) / s + 1;
        let mut out = x.like(cout, oh, ow);
        for t in 0..x.t {
            for n in 0..x.n {
                for o in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut ws = Vec::new();
                            let mut xs = Vec::new();
                            for c in 0..cin {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let y = (oy * s + ky) as isize - p;
                                        let xx = (ox * s + kx) as isize - p;
                                        if y < 0 || xx < 0 || y >= x.h as isize || xx >= x.w as isize {
                                            continue;
                                        }
                                        ws.push(w[((o * cin + c) * k + ky) * k + kx]);
                                        xs.push(x.get(t, n, c, y as usize, xx as usize));
                                    }
                                }
                            }
                            let v = self.g.dot(&ws, &xs);
                            out.vars.push(v);
                        }
                    }
                }
            }
        }
        out
    }

    fn tdbn(&mut self, x: &Maps, gamma: &Tensor, beta: &Tensor, eps: f64, name: &str) -> Maps {
        let gam = self.param(format!("{name}.gamma"), gamma);
        let bet = self.param(format!("{name}.beta"), beta);
        let v_th1 = self.neuron.v_th1();
        let mut out_vars = vec![None; x.vars.len()];
        for c in 0..x.c {
            let mut idx = Vec::new();
            for t in 0..x.t {
                for n in 0..x.n {
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            idx.push(x.idx(t, n, c, y, xx));
                        }
                    }
                }
            }
            let m = idx.len() as f64;
            let members: Vec<Var> = idx.iter().map(|&i| x.vars[i]).collect();
            let total = self.g.sum(&members);
            let mean = self.g.scale(total, 1.0 / m);
            let mut sq = Vec::new();
            for &v in &members {
                let d = self.g.sub(v, mean);
                sq.push(self.g.mul(d, d));
            }
            let ss = self.g.sum(&sq);
            let var = self.g.scale(ss, 1.0 / m);
            let shifted = self.g.offset(var, eps);
            let std = self.g.sqrt(shifted);
            for (&i, &v) in idx.iter().zip(&members) {
                let d = self.g.sub(v, mean);
                let nrm = self.g.div(d, std);
                let scaled = self.g.mul(gam[c], nrm);
                let scaled = self.g.scale(scaled, v_th1);
                out_vars[i] = Some(self.g.add(scaled, bet[c]));
            }
        }
        Maps {
            t: x.t,
            n: x.n,
            c: x.c,
            h: x.h,
            w: x.w,
            vars: out_vars.into_iter().map(|v| v.expect("every position normalized")).collect(),
        }
    }

    fn conv_bn(&mut self, x: &Maps, unit: &ConvBn, name: &str) -> Maps {
        let a = self.conv(x, &unit.conv, name);
        self.tdbn(&a, &unit.bn.gamma.value, &unit.bn.beta.value, unit.bn.epsilon, &format!("{name}.bn"))
    }

    /// Per-level hard-reset LIF dynamics, output = number of fired levels.
    fn mlf(&mut self, x: &Maps) -> Maps {
        let per_step = x.n * x.c * x.h * x.w;
        let levels = self.neuron.levels();
        let decay = self.neuron.decay();
        let one = self.g.leaf(1.0);
        let mut out = x.like(x.c, x.h, x.w);
        out.vars = vec![one; x.vars.len()];
        for i in 0..per_step {
            let mut u_prev: Vec<Option<Var>> = vec![None; levels];
            let mut o_prev: Vec<Option<Var>> = vec![None; levels];
            for t in 0..x.t {
                let input = x.vars[t * per_step + i];
                let mut fired = Vec::with_capacity(levels);
                for k in 0..levels {
                    let u = match (u_prev[k], o_prev[k]) {
                        (Some(u), Some(o)) => {
                            let keep = self.g.sub(one, o);
                            let held = self.g.mul(u, keep);
                            let leak = self.g.scale(held, decay);
                            self.g.add(leak, input)
                        }
                        _ => input,
                    };
                    let o = self.g.spike(u, self.neuron.threshold(k), self.neuron.width());
                    u_prev[k] = Some(u);
                    o_prev[k] = Some(o);
                    fired.push(o);
                }
                out.vars[t * per_step + i] = self.g.sum(&fired);
            }
        }
        out
    }

    fn add_maps(&mut self, a: &Maps, b: &Maps) -> Maps {
        let mut out = a.like(a.c, a.h, a.w);
        for (&x, &y) in a.vars.iter().zip(&b.vars) {
            let v = self.g.add(x, y);
            out.vars.push(v);
        }
        out
    }

    fn block(&mut self, x: &Maps, block: &Block, name: &str) -> Maps {
        let ya = self.conv_bn(x, &block.a, &format!("{name}.a"));
        let sa = self.mlf(&ya);
        let yb = self.conv_bn(&sa, &block.b, &format!("{name}.b"));
        let short = match &block.shortcut {
            Some(conv) => self.conv(x, conv, &format!("{name}.shortcut")),
            None => Maps {
                vars: x.vars.clone(),
                ..x.like(x.c, x.h, x.w)
            },
        };
        match block.variant {
            BlockVariant::DsResnet => {
                let sb = self.mlf(&yb);
                self.add_maps(&sb, &short)
            }
            BlockVariant::SpikingResnet => {
                let z = self.add_maps(&yb, &short);
                self.mlf(&z)
            }
            BlockVariant::ResnetSnn => {
                let bn = block.shortcut_bn.as_ref().expect("resnet-snn shortcut tdBN");
                let normed = self.tdbn(&short, &bn.gamma.value, &bn.beta.value, bn.epsilon, &format!("{name}.shortcut.bn"));
                let z = self.add_maps(&yb, &normed);
                self.mlf(&z)
            }
        }
    }
}

/// Loss and parameter gradients from the scalar reference.
#[derive(Clone, Debug)]
pub struct OracleGradients {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grads: Vec<(String, Vec<f64>)>,
    pub nodes: usize,
}

/// Replays `net` (train-mode tdBN, mean-decoded softmax cross-entropy) on a
/// scalar tape and differentiates it.
pub fn reference_gradients(net: &Network, input: &Tensor, labels: &[usize]) -> Result<OracleGradients> {
    let spec = net.spec();
    let t = spec.timesteps;
    let [c, h, w] = spec.input_shape;
    if input.shape() != [input.dim(0), c, h, w] || input.dim(0) % t != 0 {
        return Err(Error::Dimension(format!("oracle input {:?}", input.shape())));
    }
    let n = input.dim(0) / t;
    if labels.len() != n {
        return Err(Error::Dimension("one label per sample".into()));
    }
    let mut r = Replay {
        g: Graph::new(),
        neuron: &spec.neuron,
        leaves: Vec::new(),
    };
    let mut x = Maps {
        t,
        n,
        c,
        h,
        w,
        vars: Vec::new(),
    };
    x.vars = input.data().iter().map(|&v| r.g.leaf(v)).collect();
    let y = r.conv_bn(&x, &net.stem, "conv1");
    let mut x = r.mlf(&y);
    match &net.body {
        Body::Residual(blocks) => {
            for (i, block) in blocks.iter().enumerate() {
                let name = format!("conv{}_{}", i / spec.depth_n + 2, i % spec.depth_n + 1);
                x = r.block(&x, block, &name);
            }
        }
        Body::Plain(units) => {
            for (i, unit) in units.iter().enumerate() {
                let y = r.conv_bn(&x, unit, &format!("plain{}", i + 2));
                x = r.mlf(&y);
            }
        }
    }
    let fw = r.param("fc.weight".into(), &net.fc_weight.value);
    let fb = r.param("fc.bias".into(), &net.fc_bias.value);
    let classes = spec.classes;
    let plane = (x.h * x.w) as f64;
    let mut losses = Vec::with_capacity(n);
    let mut logits_out = Vec::with_capacity(n * classes);
    for s in 0..n {
        let mut logits = Vec::with_capacity(classes);
        for o in 0..classes {
            let mut per_t = Vec::with_capacity(t);
            for step in 0..t {
                let mut pooled = Vec::with_capacity(x.c);
                for ch in 0..x.c {
                    let cells: Vec<Var> = (0..x.h)
                        .flat_map(|yy| (0..x.w).map(move |xx| (yy, xx)))
                        .map(|(yy, xx)| x.get(step, s, ch, yy, xx))
                        .collect();
                    let total = r.g.sum(&cells);
                    pooled.push(r.g.scale(total, 1.0 / plane));
                }
                let row = &fw[o * x.c..(o + 1) * x.c];
                let d = r.g.dot(row, &pooled);
                per_t.push(r.g.add(d, fb[o]));
            }
            let total = r.g.sum(&per_t);
            logits.push(r.g.scale(total, 1.0 / t as f64));
        }
        logits_out.extend(logits.iter().map(|&l| r.g.value(l)));
        let shift = logits.iter().map(|&l| r.g.value(l)).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<Var> = logits
            .iter()
            .map(|&l| {
                let z = r.g.offset(l, -shift);
                r.g.exp(z)
            })
            .collect();
        let total = r.g.sum(&exps);
        let lse = r.g.ln(total);
        let lse = r.g.offset(lse, shift);
        losses.push(r.g.sub(lse, logits[labels[s]]));
    }
    let total = r.g.sum(&losses);
    let loss = r.g.scale(total, 1.0 / n as f64);
    let grad = r.g.backward(loss);
    Ok(OracleGradients {
        loss: r.g.value(loss),
        logits: logits_out,
        grads: r
            .leaves
            .iter()
            .map(|(name, vars)| (name.clone(), vars.iter().map(|v| grad[v.0]).collect()))
            .collect(),
        nodes: r.g.len(),
    })
}

/// A randomly drawn tiny network with its batch, for gradient checking.
pub struct TinyCase {
    pub net: Network,
    pub input: Tensor,
    pub labels: Vec<usize>,
}

/// Draws a tiny ResNet (≤ 500 parameters, `T ≤ 4`) of the given variant.
pub fn tiny_case(seed: u64, variant: BlockVariant, levels: usize) -> Result<TinyCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f0a_c1e0);
    let timesteps = rng.gen_range(1..=4);
    let in_channels = rng.gen_range(1..=2);
    let classes = rng.gen_range(2..=3);
    let stages = rng.gen_range(2..=3);
    let base = if stages == 2 { 2 } else { 1 };
    let mut spec = NetworkSpec::resnet(8, Width::Custom(base), variant, levels)?
        .with_input([in_channels, 4, 4], classes, timesteps);
    spec.stages = stages;
    spec.arch = Architecture::ResNet;
    let mut net = Network::build(&spec, rng.gen())?;
    // move γ/β off their initial values so their gradients are exercised
    for p in net.params_mut() {
        if p.role == crate::tensor::ParamRole::Bias {
            for v in p.value.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
    let batch = 2;
    let input = Tensor::from_fn(&[timesteps * batch, in_channels, 4, 4], |_| rng.gen_range(0.0..1.0));
    let labels = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
    Ok(TinyCase { net, input, labels })
}

/// Largest per-parameter relative error between the network's hand-written
/// backward pass and the scalar reference.
#[derive(Clone, Debug)]
pub struct GradcheckResult {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub parameters: usize,
    pub loss_gap: f64,
    pub nonzero_grads: usize,
}

/// `|a − b| / max(|a|, |b|)`, treating pairs below `1e-12` in magnitude as equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub fn gradcheck(case: &mut TinyCase) -> Result<GradcheckResult> {
    let reference = reference_gradients(&case.net, &case.input, &case.labels)?;
    let net = &mut case.net;
    net.zero_grad();
    let pass = net.forward(&case.input, Mode::Train)?;
    let (loss, grad) = crate::training::softmax_cross_entropy(&pass.logits, &case.labels)?;
    net.backward(&pass, &grad)?;
    let mut result = GradcheckResult {
        max_rel_error: 0.0,
        worst_param: String::new(),
        parameters: 0,
        loss_gap: (loss - reference.loss).abs(),
        nonzero_grads: 0,
    };
    let params = net.params();
    for (name, want) in &reference.grads {
        let (_, p) = params
            .iter()
            .find(|(info, _)| &info.name == name)
            .ok_or_else(|| Error::Sequencing(format!("oracle parameter {name} not in network")))?;
        for (&got, &exp) in p.grad.data().iter().zip(want) {
            result.parameters += 1;
            if exp != 0.0 {
                result.nonzero_grads += 1;
            }
            let e = relative_error(got, exp);
            if e > result.max_rel_error {
                result.max_rel_error = e;
                result.worst_param = name.clone();
            }
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graph_derivatives() {
        let mut g = Graph::new();
        let a = g.leaf(3.0);
        let b = g.leaf(-2.0);
        let p = g.mul(a, b);
        let q = g.div(p, a);
        let e = g.exp(q);
        let l = g.ln(e);
        let s = g.sqrt(a);
        let out = g.add(l, s);
        let grad = g.backward(out);
        // out = b + sqrt(a)
        assert!((grad[a.0] - 0.5 / 3f64.sqrt()).abs() < 1e-14);
        assert!((grad[b.0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn spike_uses_rectangle() {
        let mut g = Graph::new();
        let u = g.leaf(0.9);
        let o = g.spike(u, 0.6, 1.0);
        assert_eq!(g.value(o), 1.0);
        assert_eq!(g.backward(o)[u.0], 1.0);
        let mut g = Graph::new();
        let u = g.leaf(1.2);
        let o = g.spike(u, 0.6, 1.0);
        assert_eq!(g.backward(o)[u.0], 0.0);
    }

    #[test]
    fn tiny_cases_stay_tiny() {
        for seed in 0..12 {
            for v in BlockVariant::ALL {
                let case = tiny_case(seed, v, 3).unwrap();
                assert!(case.net.parameter_count() <= 500, "{}", case.net.parameter_count());
                assert!(case.net.spec().timesteps <= 4);
            }
        }
    }
}
