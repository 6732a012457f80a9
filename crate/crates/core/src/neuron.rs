//! Leaky integrate-and-fire and multi-level firing (MLF) dynamics.
//!
//! An MLF unit is a bundle of `K` LIF neurons that receive the same input and
//! differ only in their firing threshold. The unit emits the number of levels
//! that fired, which is interchangeable with the union of their spikes when the
//! downstream weights are shared across levels.
//!
//! Level potentials follow the hard-reset recurrence
//! `u' = decay · u · (1 − o_prev) + x` and fire when `u' ≥ V_th,k`. The step
//! function is differentiated with a rectangular surrogate of width `a`.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_V_TH1: f64 = 0.6;
pub const DEFAULT_WIDTH: f64 = 1.0;
pub const DEFAULT_DECAY: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct MlfConfig {
    thresholds: Vec<f64>,
    width: f64,
    decay: f64,
    allow_overlap: bool,
}

impl MlfConfig {
    /// `levels` thresholds spaced by the surrogate width: `V_th,k = v_th1 + (k−1)·width`.
    pub fn new(levels: usize, v_th1: f64, width: f64, decay: f64) -> Result<Self> {
        if levels == 0 {
            return Err(Error::Config("MLF needs at least one level".into()));
        }
        let thresholds = (0..levels).map(|k| v_th1 + k as f64 * width).collect();
        Self::with_thresholds(thresholds, width, decay, false)
    }

    /// Default hyperparameters: `V_th = (0.6, 1.6, 2.6, …)`, `a = 1`, `k_τ = 0.25`.
    pub fn standard(levels: usize) -> Self {
        Self::new(levels, DEFAULT_V_TH1, DEFAULT_WIDTH, DEFAULT_DECAY)
            .expect("default MLF config is valid")
    }

    /// Arbitrary threshold vector. Unless `allow_overlap` is set the spacing must
    /// equal `width` exactly, so the surrogate supports tile without overlap.
    pub fn with_thresholds(
        thresholds: Vec<f64>,
        width: f64,
        decay: f64,
        allow_overlap: bool,
    ) -> Result<Self> {
        let cfg = Self {
            thresholds,
            width,
            decay,
            allow_overlap,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::Config("MLF needs at least one level".into()));
        }
        if !(self.width > 0.0) || !self.width.is_finite() {
            return Err(Error::Config(format!(
                "surrogate width must be positive, got {}",
                self.width
            )));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::Config(format!(
                "decay factor must lie in [0, 1), got {}",
                self.decay
            )));
        }
        if self.thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("thresholds must be finite".into()));
        }
        for pair in self.thresholds.windows(2) {
            let gap = pair[1] - pair[0];
            if gap <= 0.0 {
                return Err(Error::Config(format!(
                    "thresholds must be strictly increasing: {:?}",
                    self.thresholds
                )));
            }
            if !self.allow_overlap && (gap - self.width).abs() > 1e-9 * self.width.max(1.0) {
                return Err(Error::Config(format!(
                    "threshold spacing {gap} differs from surrogate width {}; set allow_overlap to override",
                    self.width
                )));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.thresholds.len()
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn threshold(&self, level: usize) -> f64 {
        self.thresholds[level]
    }

    pub fn v_th1(&self) -> f64 {
        self.thresholds[0]
    }

    pub fn top_threshold(&self) -> f64 {
        self.thresholds[self.thresholds.len() - 1]
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn allow_overlap(&self) -> bool {
        self.allow_overlap
    }

    /// Rectangular surrogate for level `level` (0-based).
    #[inline]
    pub fn surrogate(&self, level: usize, u: f64) -> f64 {
        rect(u, self.thresholds[level], self.width)
    }
}

#[inline]
fn rect(u: f64, threshold: f64, width: f64) -> f64 {
    if (u - threshold).abs() < 0.5 * width {
        1.0 / width
    } else {
        0.0
    }
}

/// `h(u) = 1/a` on `|u − V_th| < a/2`, zero elsewhere (boundary excluded).
pub fn surrogate_derivative(u: f64, threshold: f64, width: f64) -> Result<f64> {
    if !(width > 0.0) {
        return Err(Error::Config(format!(
            "surrogate width must be positive, got {width}"
        )));
    }
    Ok(rect(u, threshold, width))
}

/// Sum of a binary per-level spike vector.
pub fn spike_encode(spikes: &[f64]) -> Result<usize> {
    let mut count = 0;
    for &s in spikes {
        if s == 1.0 {
            count += 1;
        } else if s != 0.0 {
            return Err(Error::Domain(format!("spike value {s} is not binary")));
        }
    }
    Ok(count)
}

/// Per-level potentials and last outputs of a population of MLF units.
///
/// Both tensors have shape `[K, ..unit_shape]`.
#[derive(Clone, Debug)]
pub struct MembraneState {
    u: Tensor,
    o_prev: Tensor,
}

impl MembraneState {
    pub fn new(levels: usize, unit_shape: &[usize]) -> Self {
        let mut shape = vec![levels];
        shape.extend_from_slice(unit_shape);
        Self {
            u: Tensor::zeros(&shape),
            o_prev: Tensor::zeros(&shape),
        }
    }

    pub fn reset(&mut self) {
        self.u.fill(0.0);
        self.o_prev.fill(0.0);
    }

    pub fn levels(&self) -> usize {
        self.u.dim(0)
    }

    pub fn unit_shape(&self) -> &[usize] {
        &self.u.shape()[1..]
    }

    pub fn units(&self) -> usize {
        self.u.len() / self.levels()
    }

    pub fn potentials(&self) -> &Tensor {
        &self.u
    }

    pub fn last_outputs(&self) -> &Tensor {
        &self.o_prev
    }

    fn check(&self, x: &Tensor, cfg: &MlfConfig) -> Result<()> {
        if self.levels() != cfg.levels() {
            return Err(Error::Config(format!(
                "state has {} levels, config has {}",
                self.levels(),
                cfg.levels()
            )));
        }
        if x.shape() != self.unit_shape() {
            return dim_err(format!(
                "input shape {:?} does not match membrane state {:?}",
                x.shape(),
                self.unit_shape()
            ));
        }
        Ok(())
    }
}

/// Potentials (after integration, before reset) and spikes of one timestep.
#[derive(Clone, Debug)]
pub struct StepRecord {
    /// `[K × units]`, level-major.
    pub u: Vec<f64>,
    /// `[K × units]`, each 0 or 1.
    pub spikes: Vec<u8>,
}

impl StepRecord {
    pub fn spike_count(&self, unit: usize, units: usize) -> f64 {
        let levels = self.u.len() / units;
        (0..levels)
            .map(|k| self.spikes[k * units + unit] as f64)
            .sum()
    }
}

/// Everything the backward pass needs from a sequence of MLF steps.
#[derive(Clone, Debug, Default)]
pub struct StepTrace {
    entries: Vec<StepRecord>,
}

impl StepTrace {
    pub fn push(&mut self, record: StepRecord) {
        self.entries.push(record);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, t: usize) -> Result<&StepRecord> {
        self.entries.get(t).ok_or_else(|| {
            Error::Sequencing(format!(
                "no trace entry for timestep {t} ({} recorded)",
                self.entries.len()
            ))
        })
    }

    pub fn entries(&self) -> &[StepRecord] {
        &self.entries
    }
}

/// One LIF step (`K = 1`); returns the binary output.
pub fn lif_step(state: &mut MembraneState, x: &Tensor, cfg: &MlfConfig) -> Result<Tensor> {
    if cfg.levels() != 1 {
        return Err(Error::Config(format!(
            "lif_step requires a single level, config has {}",
            cfg.levels()
        )));
    }
    let (out, _) = mlf_step(state, x, cfg)?;
    Ok(out)
}

/// One MLF step: integrate `x` into every level, fire, and return the spike
/// count `ô = Σ_k o_k` together with the record for the backward pass.
pub fn mlf_step(
    state: &mut MembraneState,
    x: &Tensor,
    cfg: &MlfConfig,
) -> Result<(Tensor, StepRecord)> {
    state.check(x, cfg)?;
    let units = x.len();
    let levels = cfg.levels();
    let decay = cfg.decay();
    let mut out = Tensor::zeros(x.shape());
    let mut spikes = vec![0u8; levels * units];
    let u_all = state.u.data_mut();
    let o_all = state.o_prev.data_mut();
    for k in 0..levels {
        let threshold = cfg.threshold(k);
        let u = &mut u_all[k * units..(k + 1) * units];
        let o = &mut o_all[k * units..(k + 1) * units];
        let s = &mut spikes[k * units..(k + 1) * units];
        for i in 0..units {
            let v = decay * u[i] * (1.0 - o[i]) + x.data()[i];
            u[i] = v;
            let fired = v >= threshold;
            o[i] = if fired { 1.0 } else { 0.0 };
            s[i] = fired as u8;
        }
        for (acc, &f) in out.data_mut().iter_mut().zip(s.iter()) {
            *acc += f as f64;
        }
    }
    Ok((
        out,
        StepRecord {
            u: u_all.to_vec(),
            spikes,
        },
    ))
}

/// Local STBP rule for one timestep of an MLF population.
///
/// `grad_out` is `∂L/∂ô^t` (unit-shaped), `grad_u_next` is `∂L/∂u_k^{t+1}`
/// (`[K × units]`, zero at the last step). Returns `∂L/∂u_k^t` and the gradient
/// with respect to the shared input, `Σ_k ∂L/∂u_k^t`.
pub fn mlf_backward_step(
    grad_out: &[f64],
    grad_u_next: &[f64],
    record: &StepRecord,
    cfg: &MlfConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let units = grad_out.len();
    let levels = cfg.levels();
    if record.u.len() != levels * units || grad_u_next.len() != levels * units {
        return dim_err(format!(
            "mlf backward: {} units × {} levels vs trace of {} and next-grad of {}",
            units,
            levels,
            record.u.len(),
            grad_u_next.len()
        ));
    }
    let decay = cfg.decay();
    let mut grad_u = vec![0.0; levels * units];
    let mut grad_x = vec![0.0; units];
    for k in 0..levels {
        let threshold = cfg.threshold(k);
        let width = cfg.width();
        let base = k * units;
        for i in 0..units {
            let u = record.u[base + i];
            let o = record.spikes[base + i] as f64;
            let next = grad_u_next[base + i];
            let grad_o = grad_out[i] - next * u * decay;
            let g = grad_o * rect(u, threshold, width) + next * decay * (1.0 - o);
            grad_u[base + i] = g;
            grad_x[i] += g;
        }
    }
    Ok((grad_u, grad_x))
}

/// Runs a population of MLF units over `T` timesteps.
///
/// `x` is time-major: shape `[T·N, ..]` where rows `t·N .. (t+1)·N` hold step
/// `t`. The state is fresh at the first step.
pub fn mlf_forward_sequence(
    x: &Tensor,
    timesteps: usize,
    cfg: &MlfConfig,
) -> Result<(Tensor, StepTrace)> {
    let (step_shape, units) = step_geometry(x, timesteps)?;
    let mut state = MembraneState::new(cfg.levels(), &step_shape);
    let mut out = Tensor::zeros(x.shape());
    let mut trace = StepTrace::default();
    for t in 0..timesteps {
        let xt = Tensor::new(step_shape.clone(), x.data()[t * units..(t + 1) * units].to_vec())?;
        let (ot, record) = mlf_step(&mut state, &xt, cfg)?;
        out.data_mut()[t * units..(t + 1) * units].copy_from_slice(ot.data());
        trace.push(record);
    }
    Ok((out, trace))
}

/// Backpropagation through time for [`mlf_forward_sequence`]: iterates
/// `t = T..1` and returns `∂L/∂x` for every step.
pub fn mlf_backward_sequence(
    grad_out: &Tensor,
    trace: &StepTrace,
    timesteps: usize,
    cfg: &MlfConfig,
) -> Result<Tensor> {
    let (_, units) = step_geometry(grad_out, timesteps)?;
    if trace.len() != timesteps {
        return Err(Error::Sequencing(format!(
            "trace holds {} steps, expected {timesteps}",
            trace.len()
        )));
    }
    let mut grad_x = Tensor::zeros(grad_out.shape());
    let mut grad_u_next = vec![0.0; cfg.levels() * units];
    for t in (0..timesteps).rev() {
        let record = trace.get(t)?;
        let go = &grad_out.data()[t * units..(t + 1) * units];
        let (grad_u, gx) = mlf_backward_step(go, &grad_u_next, record, cfg)?;
        grad_x.data_mut()[t * units..(t + 1) * units].copy_from_slice(&gx);
        grad_u_next = grad_u;
    }
    Ok(grad_x)
}

fn step_geometry(x: &Tensor, timesteps: usize) -> Result<(Vec<usize>, usize)> {
    if timesteps == 0 || x.ndim() == 0 || x.dim(0) % timesteps != 0 {
        return dim_err(format!(
            "leading axis of {:?} is not a multiple of T = {timesteps}",
            x.shape()
        ));
    }
    let mut step_shape = x.shape().to_vec();
    step_shape[0] /= timesteps;
    Ok((step_shape, x.len() / timesteps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    fn state_with(levels: usize, u: &[f64], o: &[f64]) -> MembraneState {
        let mut s = MembraneState::new(levels, &[1]);
        s.u.data_mut().copy_from_slice(u);
        s.o_prev.data_mut().copy_from_slice(o);
        s
    }

    #[test]
    fn lif_integrates_with_decay() {
        let cfg = MlfConfig::standard(1);
        let mut s = state_with(1, &[0.4], &[0.0]);
        let o = lif_step(&mut s, &one(0.55), &cfg).unwrap();
        assert!((s.potentials().data()[0] - 0.65).abs() < 1e-15);
        assert_eq!(o.data(), &[1.0]);
        assert_eq!(s.last_outputs().data(), &[1.0]);
    }

    #[test]
    fn lif_resets_after_spike() {
        let cfg = MlfConfig::standard(1);
        for u in [-3.0, 0.2, 7.5] {
            let mut s = state_with(1, &[u], &[1.0]);
            let o = lif_step(&mut s, &one(0.0), &cfg).unwrap();
            assert_eq!(s.potentials().data(), &[0.0]);
            assert_eq!(o.data(), &[0.0]);
        }
    }

    #[test]
    fn lif_quiescent() {
        let cfg = MlfConfig::standard(1);
        let mut s = MembraneState::new(1, &[1]);
        let o = lif_step(&mut s, &one(0.0), &cfg).unwrap();
        assert_eq!(s.potentials().data(), &[0.0]);
        assert_eq!(o.data(), &[0.0]);
    }

    #[test]
    fn lif_rejects_multi_level_and_bad_shape() {
        let mut s = MembraneState::new(3, &[1]);
        assert!(matches!(
            lif_step(&mut s, &one(0.0), &MlfConfig::standard(3)),
            Err(Error::Config(_))
        ));
        let mut s = MembraneState::new(1, &[2]);
        assert!(matches!(
            lif_step(&mut s, &one(0.0), &MlfConfig::standard(1)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn mlf_fires_prefix_of_levels() {
        let cfg = MlfConfig::standard(3);
        let cases = [(1.7, [1.0, 1.0, 0.0], 2.0), (0.0, [0.0; 3], 0.0), (3.0, [1.0; 3], 3.0)];
        for (x, levels, count) in cases {
            let mut s = MembraneState::new(3, &[1]);
            let (o, rec) = mlf_step(&mut s, &one(x), &cfg).unwrap();
            assert_eq!(o.data(), &[count]);
            assert_eq!(s.last_outputs().data(), &levels);
            assert_eq!(rec.spikes.iter().map(|&b| b as f64).collect::<Vec<_>>(), levels);
        }
    }

    #[test]
    fn fresh_state_first_step_equals_input() {
        let cfg = MlfConfig::standard(2);
        let mut s = MembraneState::new(2, &[3]);
        let x = Tensor::new(vec![3], vec![-0.3, 0.9, 2.2]).unwrap();
        mlf_step(&mut s, &x, &cfg).unwrap();
        assert_eq!(&s.potentials().data()[..3], x.data());
        assert_eq!(&s.potentials().data()[3..], x.data());
        s.reset();
        assert!(s.potentials().data().iter().all(|&v| v == 0.0));
        assert!(s.last_outputs().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn surrogate_rectangle() {
        assert_eq!(surrogate_derivative(0.6, 0.6, 1.0).unwrap(), 1.0);
        assert_eq!(surrogate_derivative(1.2, 0.6, 1.0).unwrap(), 0.0);
        assert_eq!(surrogate_derivative(0.1, 0.6, 1.0).unwrap(), 0.0);
        assert_eq!(surrogate_derivative(0.7, 0.6, 0.5).unwrap(), 2.0);
        assert!(matches!(
            surrogate_derivative(0.0, 0.6, 0.0),
            Err(Error::Config(_))
        ));
        assert!(surrogate_derivative(0.0, 0.6, -1.0).is_err());
    }

    #[test]
    fn encode_sums_binary_levels() {
        assert_eq!(spike_encode(&[0.0, 0.0, 0.0]).unwrap(), 0);
        assert_eq!(spike_encode(&[1.0, 1.0, 0.0]).unwrap(), 2);
        assert_eq!(spike_encode(&[1.0, 1.0, 1.0]).unwrap(), 3);
        assert!(matches!(spike_encode(&[0.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn config_validation() {
        assert!(MlfConfig::new(0, 0.6, 1.0, 0.25).is_err());
        assert!(MlfConfig::new(2, 0.6, 0.0, 0.25).is_err());
        assert!(MlfConfig::new(2, 0.6, 1.0, 1.0).is_err());
        assert!(MlfConfig::with_thresholds(vec![0.6, 1.1], 1.0, 0.25, false).is_err());
        assert!(MlfConfig::with_thresholds(vec![0.6, 1.1], 1.0, 0.25, true).is_ok());
        assert!(MlfConfig::with_thresholds(vec![0.6, 0.6], 1.0, 0.25, true).is_err());
        assert_eq!(MlfConfig::standard(3).thresholds(), &[0.6, 1.6, 2.6]);
    }

    #[test]
    fn backward_dormant_blocks_gradient() {
        let cfg = MlfConfig::standard(3);
        // u far right of every rectangle, no future gradient
        let rec = StepRecord {
            u: vec![9.0, 9.0, 9.0],
            spikes: vec![1, 1, 1],
        };
        let (gu, gx) = mlf_backward_step(&[1.0], &[0.0; 3], &rec, &cfg).unwrap();
        assert_eq!(gu, vec![0.0; 3]);
        assert_eq!(gx, vec![0.0]);
    }

    #[test]
    fn backward_fired_level_blocks_temporal_path() {
        let cfg = MlfConfig::standard(1);
        let rec = StepRecord {
            u: vec![2.0],
            spikes: vec![1],
        };
        let (gu, _) = mlf_backward_step(&[0.7], &[0.3], &rec, &cfg).unwrap();
        assert_eq!(gu, vec![0.0]);
    }

    #[test]
    fn backward_single_level_inside_rectangle() {
        let cfg = MlfConfig::new(1, 0.6, 0.5, 0.25).unwrap();
        let rec = StepRecord {
            u: vec![0.7],
            spikes: vec![1],
        };
        let (gu, gx) = mlf_backward_step(&[0.3], &[0.0], &rec, &cfg).unwrap();
        assert!((gu[0] - 0.3 / 0.5).abs() < 1e-15);
        assert_eq!(gx, gu);
    }

    #[test]
    fn backward_includes_reset_cross_term() {
        // non-fired level inside the rectangle with a temporal gradient:
        // dL/do = g − next·u·k_τ ; dL/du = dL/do·(1/a) + next·k_τ
        let cfg = MlfConfig::standard(1);
        let rec = StepRecord {
            u: vec![0.5],
            spikes: vec![0],
        };
        let (gu, _) = mlf_backward_step(&[2.0], &[4.0], &rec, &cfg).unwrap();
        let want = (2.0 - 4.0 * 0.5 * 0.25) * 1.0 + 4.0 * 0.25;
        assert!((gu[0] - want).abs() < 1e-15);
    }

    #[test]
    fn missing_trace_entry_is_sequencing_error() {
        let trace = StepTrace::default();
        assert!(matches!(trace.get(0), Err(Error::Sequencing(_))));
        let cfg = MlfConfig::standard(1);
        assert!(matches!(
            mlf_backward_sequence(&Tensor::zeros(&[2, 1]), &trace, 2, &cfg),
            Err(Error::Sequencing(_))
        ));
    }

    #[test]
    fn sequence_matches_manual_steps() {
        let cfg = MlfConfig::standard(2);
        let x = Tensor::new(vec![3, 2], vec![0.7, 1.9, 0.1, 0.4, 2.5, -0.2]).unwrap();
        let (out, trace) = mlf_forward_sequence(&x, 3, &cfg).unwrap();
        let mut s = MembraneState::new(2, &[1, 2]);
        for t in 0..3 {
            let xt = Tensor::new(vec![1, 2], x.data()[t * 2..t * 2 + 2].to_vec()).unwrap();
            let (o, rec) = mlf_step(&mut s, &xt, &cfg).unwrap();
            assert_eq!(o.data(), &out.data()[t * 2..t * 2 + 2]);
            assert_eq!(rec.u, trace.get(t).unwrap().u);
        }
    }
}
