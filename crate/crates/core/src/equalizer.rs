//! Spiking decision-feedback equalizer.
//!
//! Topology: a linear input layer (FC0), a recurrent LIF block made of a
//! feed-forward layer (FC1), a recurrent layer (FC2) and the LIF cells, and a
//! linear readout (FC3) whose outputs are summed over all time steps. The
//! encoded window is presented at the first step only; later steps see zeros.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lif::{lif_step_in_place, LifParams, LifState};
use crate::tensor::{quantize_value, Matrix};

/// Inputs per received sample.
pub const RECEIVED_BLOCK: usize = 8;
/// Binary code width used for received samples.
const BINARY_LEVELS: f64 = 256.0;

pub fn input_size(n_tap: usize, m: u32) -> Result<usize> {
    if n_tap == 0 || n_tap.is_multiple_of(2) {
        return Err(Error::Parameter(format!(
            "n_tap must be odd and >= 1, got {n_tap}"
        )));
    }
    if m == 0 {
        return Err(Error::Parameter("modulation order must be >= 1".into()));
    }
    let half = n_tap / 2;
    Ok(RECEIVED_BLOCK * (half + 1) + (1usize << m) * half)
}

/// Multiply-accumulates per equalized symbol.
pub fn mac_count(n_hidden: usize, n_input: usize, time_steps: usize, m: u32) -> u64 {
    (n_hidden * (n_input + 2 * n_hidden + (1usize << m)) * time_steps) as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct TopologyConfig {
    pub n_tap: usize,
    pub m: u32,
    pub n_hidden: usize,
    pub time_steps: usize,
}

impl TopologyConfig {
    pub fn new(n_tap: usize, n_hidden: usize, time_steps: usize) -> Self {
        Self {
            n_tap,
            m: 2,
            n_hidden,
            time_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        input_size(self.n_tap, self.m)?;
        if !(1..=1024).contains(&self.n_hidden) {
            return Err(Error::Parameter(format!(
                "n_hidden {} outside 1..=1024",
                self.n_hidden
            )));
        }
        if self.time_steps == 0 {
            return Err(Error::Parameter("time_steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.n_tap / 2
    }

    pub fn n_input(&self) -> usize {
        RECEIVED_BLOCK * (self.half() + 1) + self.n_classes() * self.half()
    }

    pub fn n_classes(&self) -> usize {
        1 << self.m
    }

    pub fn mac(&self) -> u64 {
        mac_count(self.n_hidden, self.n_input(), self.time_steps, self.m)
    }
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self::new(17, 24, 5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderScheme {
    /// One of eight uniform bins is +1.
    OneHot,
    /// 8-bit uniform quantization, bits MSB first mapped to -1/+1.
    Binary,
}

/// Received-sample encoder with its min-max calibration range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub scheme: EncoderScheme,
    pub lo: f64,
    pub hi: f64,
}

impl EncoderConfig {
    pub fn calibrate(samples: &[f64], scheme: EncoderScheme) -> Result<Self> {
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::Calibration(
                "calibration samples need a finite, nonzero range".into(),
            ));
        }
        Ok(Self { scheme, lo, hi })
    }

    fn level(&self, y: f64, levels: f64) -> usize {
        let q = ((y - self.lo) / (self.hi - self.lo) * levels).floor();
        q.clamp(0.0, levels - 1.0) as usize
    }

    /// Active bin of a one-hot encoding.
    pub fn bin(&self, y: f64) -> usize {
        self.level(y, RECEIVED_BLOCK as f64)
    }

    pub fn encode_sample(&self, y: f64, out: &mut [i8]) {
        debug_assert_eq!(out.len(), RECEIVED_BLOCK);
        match self.scheme {
            EncoderScheme::OneHot => {
                out.fill(0);
                out[self.bin(y)] = 1;
            }
            EncoderScheme::Binary => {
                let q = self.level(y, BINARY_LEVELS);
                for (b, o) in out.iter_mut().enumerate() {
                    let bit = (q >> (RECEIVED_BLOCK - 1 - b)) & 1;
                    *o = if bit == 1 { 1 } else { -1 };
                }
            }
        }
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            scheme: EncoderScheme::Binary,
            lo: 0.0,
            hi: 1.0,
        }
    }
}

/// The last `capacity` decided classes, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionBuffer {
    capacity: usize,
    buf: VecDeque<usize>,
}

impl DecisionBuffer {
    pub fn new(capacity: usize, fill: usize) -> Self {
        Self {
            capacity,
            buf: std::iter::repeat_n(fill, capacity).collect(),
        }
    }

    pub fn from_slice(classes: &[usize]) -> Self {
        Self {
            capacity: classes.len(),
            buf: classes.iter().copied().collect(),
        }
    }

    pub fn push(&mut self, class: usize) {
        if self.capacity == 0 {
            return;
        }
        self.buf.pop_front();
        self.buf.push_back(class);
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.buf.iter().copied()
    }
}

/// Encode one window. `received` holds the `half` past samples (oldest first)
/// followed by the current sample.
///
/// Layout: past received blocks, decision blocks, current received block.
pub fn encode_window(
    received: &[f64],
    decisions: &DecisionBuffer,
    encoder: &EncoderConfig,
    n_classes: usize,
    out: &mut Vec<i8>,
) -> Result<()> {
    let half = decisions.capacity();
    if received.len() != half + 1 {
        return Err(Error::InputShape(format!(
            "window needs {} received samples, got {}",
            half + 1,
            received.len()
        )));
    }
    out.clear();
    out.resize(RECEIVED_BLOCK * (half + 1) + n_classes * half, 0);
    for (k, &y) in received[..half].iter().enumerate() {
        encoder.encode_sample(y, &mut out[k * RECEIVED_BLOCK..(k + 1) * RECEIVED_BLOCK]);
    }
    let base = RECEIVED_BLOCK * half;
    for (k, class) in decisions.iter().enumerate() {
        if class >= n_classes {
            return Err(Error::Input(format!("decision class {class} out of range")));
        }
        out[base + k * n_classes + class] = 1;
    }
    let cur = base + n_classes * half;
    encoder.encode_sample(received[half], &mut out[cur..cur + RECEIVED_BLOCK]);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform in +-1/sqrt(fan_in).
    pub fn init<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut sample = || rng.random_range(-bound..bound);
        let weight = Matrix {
            rows: out_dim,
            cols: in_dim,
            data: (0..out_dim * in_dim).map(|_| sample()).collect(),
        };
        let bias = (0..out_dim).map(|_| sample()).collect();
        Self { weight, bias }
    }

    /// `bias + W x`, counting multiplies into `macs`.
    pub(crate) fn apply(&self, x: &[f64], out: &mut [f64], macs: &mut u64) {
        out.copy_from_slice(&self.bias);
        *macs += self.weight.matvec_acc(x, out);
    }

    fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualizerModel {
    pub config: TopologyConfig,
    pub fc0: Linear,
    pub fc1: Linear,
    /// Recurrent weights; the block bias lives in `fc1`.
    pub fc2: Matrix,
    pub fc3: Linear,
    pub lif: LifParams,
    pub encoder: EncoderConfig,
    /// Grid the LIF state is rounded onto after every update (QAT models).
    #[serde(default)]
    pub state_quant: Option<StateQuant>,
}

/// Signed fixed-point grid for LIF voltage and current.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateQuant {
    pub bits: u32,
    pub frac_bits: u32,
}

impl StateQuant {
    /// Range of +-8 at any width.
    pub fn for_bits(bits: u32) -> Self {
        Self {
            bits,
            frac_bits: bits.saturating_sub(4),
        }
    }

    pub fn step(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    #[inline]
    pub fn apply(&self, x: f64) -> (f64, bool) {
        quantize_value(x, self.step(), self.bits)
    }

    #[inline]
    fn floor(&self, x: f64) -> f64 {
        (x / self.step()).floor() * self.step()
    }

    /// LIF current and pre-reset voltage computed the way the integer engine
    /// does: decay products floored onto the grid, the drive rounded half up,
    /// each sum saturated. Returns `(i_new, in_range_i, v_pre, in_range_v)`.
    #[inline]
    pub fn lif_update(
        &self,
        i: f64,
        v: f64,
        drive: f64,
        lif: &LifParams,
    ) -> (f64, bool, f64, bool) {
        let d = ((lif.r * drive) / self.step() + 0.5).floor() * self.step();
        let (i_new, mi) = self.apply(i - self.floor(lif.alpha_i * i) + d);
        let (v_pre, mv) = self.apply(
            v - self.floor(lif.alpha_v * v) + self.floor(lif.alpha_v * (lif.v_leak + i_new)),
        );
        (i_new, mi, v_pre, mv)
    }
}

/// One LIF update of the model's hidden layer, honouring `state_quant`.
pub fn model_lif_step(
    state: &mut LifState,
    drive: &[f64],
    lif: &LifParams,
    quant: Option<StateQuant>,
    spikes: &mut [bool],
) {
    let Some(q) = quant else {
        lif_step_in_place(state, drive, lif, spikes);
        return;
    };
    for n in 0..state.v.len() {
        let (i_new, _, v_pre, _) = q.lif_update(state.i[n], state.v[n], drive[n], lif);
        let fired = v_pre >= lif.v_th;
        state.i[n] = i_new;
        state.v[n] = if fired { lif.v_r } else { v_pre };
        spikes[n] = fired;
    }
}

impl EqualizerModel {
    pub fn zeros(config: TopologyConfig, lif: LifParams, encoder: EncoderConfig) -> Self {
        let (ni, nh, nc) = (config.n_input(), config.n_hidden, config.n_classes());
        Self {
            config,
            fc0: Linear::zeros(nh, ni),
            fc1: Linear::zeros(nh, nh),
            fc2: Matrix::zeros(nh, nh),
            fc3: Linear::zeros(nc, nh),
            lif,
            encoder,
            state_quant: None,
        }
    }

    pub fn init<R: Rng + ?Sized>(
        config: TopologyConfig,
        lif: LifParams,
        encoder: EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let (ni, nh, nc) = (config.n_input(), config.n_hidden, config.n_classes());
        let fc0 = Linear::init(nh, ni, rng);
        let fc1 = Linear::init(nh, nh, rng);
        let fc2 = Linear::init(nh, nh, rng).weight;
        let fc3 = Linear::init(nc, nh, rng);
        Self {
            config,
            fc0,
            fc1,
            fc2,
            fc3,
            lif,
            encoder,
            state_quant: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.lif.validate()?;
        let (ni, nh, nc) = (
            self.config.n_input(),
            self.config.n_hidden,
            self.config.n_classes(),
        );
        let dims_ok = self.fc0.weight.rows == nh
            && self.fc0.weight.cols == ni
            && self.fc0.bias.len() == nh
            && self.fc1.weight.rows == nh
            && self.fc1.weight.cols == nh
            && self.fc1.bias.len() == nh
            && self.fc2.rows == nh
            && self.fc2.cols == nh
            && self.fc3.weight.rows == nc
            && self.fc3.weight.cols == nh
            && self.fc3.bias.len() == nc;
        if !dims_ok {
            return Err(Error::InputShape(
                "layer dimensions disagree with topology".into(),
            ));
        }
        if !(self.fc0.is_finite()
            && self.fc1.is_finite()
            && self.fc2.is_finite()
            && self.fc3.is_finite())
        {
            return Err(Error::Input("non-finite weights".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model: self.clone(),
        };
        std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported model file {} v{}",
                file.format, file.version
            )));
        }
        file.model.validate()?;
        Ok(file.model)
    }
}

pub const MODEL_FORMAT: &str = "snn-dfe/float";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: EqualizerModel,
}

/// Logits summed over time steps plus the per-step readouts.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub logits: Vec<f64>,
    pub step_outputs: Vec<Vec<f64>>,
    pub macs: u64,
}

/// Dense reference forward pass; every layer is evaluated at every step.
pub fn snn_forward_traced(encoded: &[f64], model: &EqualizerModel) -> Result<ForwardTrace> {
    let cfg = &model.config;
    if encoded.len() != cfg.n_input() {
        return Err(Error::InputShape(format!(
            "encoded length {} != {}",
            encoded.len(),
            cfg.n_input()
        )));
    }
    let nh = cfg.n_hidden;
    let zeros = vec![0.0; encoded.len()];
    let mut macs = 0u64;
    let mut a0 = vec![0.0; nh];
    let mut drive = vec![0.0; nh];
    let mut prev = vec![0.0; nh];
    let mut spikes = vec![false; nh];
    let mut step_out = vec![0.0; cfg.n_classes()];
    let mut state = LifState::zeros(nh);
    let mut logits = vec![0.0; cfg.n_classes()];
    let mut step_outputs = Vec::with_capacity(cfg.time_steps);
    for t in 0..cfg.time_steps {
        let x = if t == 0 { encoded } else { &zeros };
        model.fc0.apply(x, &mut a0, &mut macs);
        model.fc1.apply(&a0, &mut drive, &mut macs);
        macs += model.fc2.matvec_acc(&prev, &mut drive);
        model_lif_step(
            &mut state,
            &drive,
            &model.lif,
            model.state_quant,
            &mut spikes,
        );
        for (p, &s) in prev.iter_mut().zip(&spikes) {
            *p = if s { 1.0 } else { 0.0 };
        }
        model.fc3.apply(&prev, &mut step_out, &mut macs);
        for (l, o) in logits.iter_mut().zip(&step_out) {
            *l += o;
        }
        step_outputs.push(step_out.clone());
    }
    Ok(ForwardTrace {
        logits,
        step_outputs,
        macs,
    })
}

pub fn snn_forward(encoded: &[f64], model: &EqualizerModel) -> Result<Vec<f64>> {
    Ok(snn_forward_traced(encoded, model)?.logits)
}

/// Lowest index among the maxima.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Anything that turns an encoded ternary window into a class decision.
pub trait SymbolDecider {
    fn topology(&self) -> &TopologyConfig;
    fn encoder(&self) -> &EncoderConfig;
    fn decide(&self, encoded: &[i8]) -> usize;
}

/// Reusable buffers for the sparse float forward pass.
pub struct FloatForward<'a> {
    model: &'a EqualizerModel,
    /// FC1 applied to the bias-only FC0 output of the zero-input steps.
    idle_drive: Vec<f64>,
}

impl<'a> FloatForward<'a> {
    pub fn new(model: &'a EqualizerModel) -> Self {
        let mut idle_drive = vec![0.0; model.config.n_hidden];
        let mut macs = 0;
        model.fc1.apply(&model.fc0.bias, &mut idle_drive, &mut macs);
        Self { model, idle_drive }
    }

    /// Same arithmetic as [`snn_forward`], skipping zero inputs.
    pub fn logits(&self, encoded: &[i8]) -> Vec<f64> {
        let m = self.model;
        let nh = m.config.n_hidden;
        let mut a0 = m.fc0.bias.clone();
        for (r, a) in a0.iter_mut().enumerate() {
            let row = m.fc0.weight.row(r);
            let mut acc = 0.0;
            for (w, &x) in row.iter().zip(encoded) {
                match x {
                    1 => acc += w,
                    -1 => acc -= w,
                    _ => {}
                }
            }
            *a += acc;
        }
        let mut first_drive = vec![0.0; nh];
        let mut macs = 0;
        m.fc1.apply(&a0, &mut first_drive, &mut macs);

        let mut state = LifState::zeros(nh);
        let mut prev = vec![0.0; nh];
        let mut spikes = vec![false; nh];
        let mut drive = vec![0.0; nh];
        let mut logits = vec![0.0; m.config.n_classes()];
        let mut step_out = vec![0.0; logits.len()];
        for t in 0..m.config.time_steps {
            drive.copy_from_slice(if t == 0 {
                &first_drive
            } else {
                &self.idle_drive
            });
            m.fc2.matvec_acc(&prev, &mut drive);
            model_lif_step(&mut state, &drive, &m.lif, m.state_quant, &mut spikes);
            for (p, &s) in prev.iter_mut().zip(&spikes) {
                *p = if s { 1.0 } else { 0.0 };
            }
            m.fc3.apply(&prev, &mut step_out, &mut macs);
            for (l, o) in logits.iter_mut().zip(&step_out) {
                *l += o;
            }
        }
        logits
    }
}

impl SymbolDecider for FloatForward<'_> {
    fn topology(&self) -> &TopologyConfig {
        &self.model.config
    }

    fn encoder(&self) -> &EncoderConfig {
        &self.model.encoder
    }

    fn decide(&self, encoded: &[i8]) -> usize {
        argmax(&self.logits(encoded))
    }
}

#[derive(Clone, Copy, Debug)]
pub enum FeedbackMode<'a> {
    /// Fed-back taps carry the equalizer's own decisions.
    Feedback,
    /// Fed-back taps carry the given ground-truth classes.
    Genie(&'a [usize]),
}

/// Class filling the decision buffer before the first decision.
pub const WARMUP_FILL_CLASS: usize = 0;

/// Equalize a symbol-rate stream.
///
/// The first `half = n_tap / 2` symbols only seed the window; the result
/// holds decisions for symbols `half..y.len()`.
pub fn equalize_stream<D: SymbolDecider + ?Sized>(
    y: &[f64],
    decider: &D,
    mode: FeedbackMode<'_>,
) -> Result<Vec<usize>> {
    let topo = *decider.topology();
    let half = topo.half();
    if y.len() < half + 1 {
        return Err(Error::InputShape(format!(
            "stream of {} symbols is shorter than {}",
            y.len(),
            half + 1
        )));
    }
    if let FeedbackMode::Genie(truth) = mode {
        if truth.len() != y.len() {
            return Err(Error::InputShape(
                "genie labels must match the stream length".into(),
            ));
        }
    }
    let encoder = *decider.encoder();
    let mut buffer = match mode {
        FeedbackMode::Feedback => DecisionBuffer::new(half, WARMUP_FILL_CLASS),
        FeedbackMode::Genie(truth) => DecisionBuffer::from_slice(&truth[..half]),
    };
    let mut encoded = Vec::with_capacity(topo.n_input());
    let mut out = Vec::with_capacity(y.len() - half);
    for k in half..y.len() {
        encode_window(
            &y[k - half..=k],
            &buffer,
            &encoder,
            topo.n_classes(),
            &mut encoded,
        )?;
        let class = decider.decide(&encoded);
        out.push(class);
        buffer.push(match mode {
            FeedbackMode::Feedback => class,
            FeedbackMode::Genie(truth) => truth[k],
        });
    }
    Ok(out)
}

pub fn to_f64(encoded: &[i8]) -> Vec<f64> {
    encoded.iter().map(|&x| x as f64).collect()
}
