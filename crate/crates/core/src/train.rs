//! Surrogate-gradient BPTT training with Adam and optional
//! quantization-aware training.
//!
//! The Heaviside spike is kept in the forward pass; its derivative is
//! replaced by the SuperSpike surrogate `1 / (1 + slope |u|)^2`. The hard reset
//! contributes no gradient. Fake quantization uses straight-through gradients
//! that are zeroed for saturated values.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{random_link, ChannelConfig};
use crate::equalizer::{
    encode_window, equalize_stream, DecisionBuffer, EncoderConfig, EncoderScheme, EqualizerModel,
    FeedbackMode, FloatForward, StateQuant, TopologyConfig,
};
use crate::error::{Error, Result};
use crate::lif::LifParams;
use crate::seed::rng_for;
use crate::tensor::{quantize_value, Matrix};

pub fn surrogate_grad(u: f64, slope: f64) -> f64 {
    let d = 1.0 + slope * u.abs();
    1.0 / (d * d)
}

/// Spike nonlinearity used by the BPTT pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpikeFn {
    /// Heaviside forward, SuperSpike backward, reset treated as constant.
    SuperSpike { slope: f64 },
    /// Logistic `1 / (1 + exp(-slope u))` in both passes with the exact
    /// reset derivative. This is the differentiable twin used for checks.
    Sigmoid { slope: f64 },
}

impl SpikeFn {
    #[inline]
    fn forward(&self, u: f64) -> f64 {
        match *self {
            SpikeFn::SuperSpike { .. } => {
                if u >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            SpikeFn::Sigmoid { slope } => 1.0 / (1.0 + (-slope * u).exp()),
        }
    }

    #[inline]
    fn derivative(&self, u: f64) -> f64 {
        match *self {
            SpikeFn::SuperSpike { slope } => surrogate_grad(u, slope),
            SpikeFn::Sigmoid { slope } => {
                let s = self.forward(u);
                slope * s * (1.0 - s)
            }
        }
    }

    fn reset_has_gradient(&self) -> bool {
        matches!(self, SpikeFn::Sigmoid { .. })
    }
}

/// Gradients with the same layout as the trainable tensors of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub fc0_w: Matrix,
    pub fc0_b: Vec<f64>,
    pub fc1_w: Matrix,
    pub fc1_b: Vec<f64>,
    pub fc2: Matrix,
    pub fc3_w: Matrix,
    pub fc3_b: Vec<f64>,
}

impl Grads {
    pub fn zeros_like(model: &EqualizerModel) -> Self {
        let c = &model.config;
        let (ni, nh, nc) = (c.n_input(), c.n_hidden, c.n_classes());
        Self {
            fc0_w: Matrix::zeros(nh, ni),
            fc0_b: vec![0.0; nh],
            fc1_w: Matrix::zeros(nh, nh),
            fc1_b: vec![0.0; nh],
            fc2: Matrix::zeros(nh, nh),
            fc3_w: Matrix::zeros(nc, nh),
            fc3_b: vec![0.0; nc],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 7] {
        [
            &self.fc0_w.data,
            &self.fc0_b,
            &self.fc1_w.data,
            &self.fc1_b,
            &self.fc2.data,
            &self.fc3_w.data,
            &self.fc3_b,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 7] {
        [
            &mut self.fc0_w.data,
            &mut self.fc0_b,
            &mut self.fc1_w.data,
            &mut self.fc1_b,
            &mut self.fc2.data,
            &mut self.fc3_w.data,
            &mut self.fc3_b,
        ]
    }

    fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, f: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= f);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Trainable tensors of a model in [`Grads`] order.
pub fn params_mut(model: &mut EqualizerModel) -> [&mut [f64]; 7] {
    [
        &mut model.fc0.weight.data,
        &mut model.fc0.bias,
        &mut model.fc1.weight.data,
        &mut model.fc1.bias,
        &mut model.fc2.data,
        &mut model.fc3.weight.data,
        &mut model.fc3.bias,
    ]
}

pub fn params(model: &EqualizerModel) -> [&[f64]; 7] {
    [
        &model.fc0.weight.data,
        &model.fc0.bias,
        &model.fc1.weight.data,
        &model.fc1.bias,
        &model.fc2.data,
        &model.fc3.weight.data,
        &model.fc3.bias,
    ]
}

/// One training example: an encoded window and its true class.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub encoded: Vec<i8>,
    pub label: usize,
}

struct StepTape {
    u: Vec<f64>,
    s: Vec<f64>,
    v_pre: Vec<f64>,
    mask_i: Vec<bool>,
    mask_v: Vec<bool>,
}

/// Cross-entropy loss of one example; adds its gradient into `g`.
fn example_grad(model: &EqualizerModel, ex: &Example, spike: SpikeFn, g: &mut Grads) -> f64 {
    let c = &model.config;
    let (nh, nc, steps) = (c.n_hidden, c.n_classes(), c.time_steps);
    let lif = &model.lif;
    let quant = model.state_quant;
    let mut macs = 0;

    // forward
    let mut a0 = model.fc0.bias.clone();
    for (r, a) in a0.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (w, &x) in model.fc0.weight.row(r).iter().zip(&ex.encoded) {
            match x {
                1 => acc += w,
                -1 => acc -= w,
                _ => {}
            }
        }
        *a += acc;
    }
    let mut first_drive = vec![0.0; nh];
    model.fc1.apply(&a0, &mut first_drive, &mut macs);
    let mut idle_drive = vec![0.0; nh];
    model.fc1.apply(&model.fc0.bias, &mut idle_drive, &mut macs);

    let mut v = vec![0.0; nh];
    let mut i = vec![0.0; nh];
    let mut prev_s = vec![0.0; nh];
    let mut drive = vec![0.0; nh];
    let mut spike_sum = vec![0.0; nh];
    let mut tape = Vec::with_capacity(steps);
    for t in 0..steps {
        drive.copy_from_slice(if t == 0 { &first_drive } else { &idle_drive });
        model.fc2.matvec_acc(&prev_s, &mut drive);
        let mut st = StepTape {
            u: vec![0.0; nh],
            s: vec![0.0; nh],
            v_pre: vec![0.0; nh],
            mask_i: vec![true; nh],
            mask_v: vec![true; nh],
        };
        for n in 0..nh {
            let (i_new, v_pre) = match quant {
                Some(q) => {
                    let (i_new, mi, v_pre, mv) = q.lif_update(i[n], v[n], drive[n], lif);
                    (st.mask_i[n], st.mask_v[n]) = (mi, mv);
                    (i_new, v_pre)
                }
                None => {
                    let i_new = (1.0 - lif.alpha_i) * i[n] + lif.r * drive[n];
                    (i_new, v[n] + lif.alpha_v * ((lif.v_leak - v[n]) + i_new))
                }
            };
            let u = v_pre - lif.v_th;
            let s = spike.forward(u);
            i[n] = i_new;
            v[n] = v_pre * (1.0 - s) + lif.v_r * s;
            st.u[n] = u;
            st.s[n] = s;
            st.v_pre[n] = v_pre;
        }
        prev_s.copy_from_slice(&st.s);
        spike_sum.iter_mut().zip(&st.s).for_each(|(a, b)| *a += b);
        tape.push(st);
    }
    let mut logits: Vec<f64> = model.fc3.bias.iter().map(|b| b * steps as f64).collect();
    model.fc3.weight.matvec_acc(&spike_sum, &mut logits);

    // softmax cross-entropy
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    let loss = -(exp[ex.label] / z).ln();
    let mut g_logits: Vec<f64> = exp.iter().map(|e| e / z).collect();
    g_logits[ex.label] -= 1.0;

    // readout
    g.fc3_w.add_outer(&g_logits, &spike_sum);
    for (b, gl) in g.fc3_b.iter_mut().zip(&g_logits) {
        *b += gl * steps as f64;
    }
    let mut g_s_out = vec![0.0; nh];
    model.fc3.weight.matvec_t_acc(&g_logits, &mut g_s_out);
    let _ = nc;

    // backward through time
    let mut g_vpre_next = vec![0.0; nh];
    let mut g_i_next = vec![0.0; nh];
    let mut g_d_next = vec![0.0; nh];
    let mut g_d_idle = vec![0.0; nh];
    let mut g_d = vec![0.0; nh];
    let mut g_s = vec![0.0; nh];
    for t in (0..steps).rev() {
        let st = &tape[t];
        g_s.copy_from_slice(&g_s_out);
        if t + 1 < steps {
            model.fc2.matvec_t_acc(&g_d_next, &mut g_s);
        }
        for n in 0..nh {
            let g_v = g_vpre_next[n] * (1.0 - lif.alpha_v);
            let mut dv_dvpre = 1.0 - st.s[n];
            if spike.reset_has_gradient() {
                dv_dvpre += (lif.v_r - st.v_pre[n]) * spike.derivative(st.u[n]);
            }
            let mut g_vpre = g_s[n] * spike.derivative(st.u[n]) + g_v * dv_dvpre;
            if !st.mask_v[n] {
                g_vpre = 0.0;
            }
            let mut g_i = g_vpre * lif.alpha_v + g_i_next[n] * (1.0 - lif.alpha_i);
            if !st.mask_i[n] {
                g_i = 0.0;
            }
            g_d[n] = g_i * lif.r;
            g_vpre_next[n] = g_vpre;
            g_i_next[n] = g_i;
        }
        if t > 0 {
            g.fc2.add_outer(&g_d, &tape[t - 1].s);
            g_d_idle.iter_mut().zip(&g_d).for_each(|(a, b)| *a += b);
        } else {
            g.fc1_w.add_outer(&g_d, &a0);
        }
        g.fc1_b.iter_mut().zip(&g_d).for_each(|(a, b)| *a += b);
        g_d_next.copy_from_slice(&g_d);
    }
    // steps >= 1 see the bias-only FC0 output
    g.fc1_w.add_outer(&g_d_idle, &model.fc0.bias);
    let mut g_a0_first = vec![0.0; nh];
    model.fc1.weight.matvec_t_acc(&g_d, &mut g_a0_first);
    let mut g_a0_idle = vec![0.0; nh];
    model.fc1.weight.matvec_t_acc(&g_d_idle, &mut g_a0_idle);
    for r in 0..nh {
        g.fc0_b[r] += g_a0_first[r] + g_a0_idle[r];
        let ga = g_a0_first[r];
        if ga == 0.0 {
            continue;
        }
        let cols = g.fc0_w.cols;
        let row = &mut g.fc0_w.data[r * cols..(r + 1) * cols];
        for (w, &x) in row.iter_mut().zip(&ex.encoded) {
            match x {
                1 => *w += ga,
                -1 => *w -= ga,
                _ => {}
            }
        }
    }
    loss
}

const GRAD_CHUNK: usize = 16;

/// Mean cross-entropy over `batch` and its gradient.
///
/// Examples are processed in fixed chunks whose partial sums are reduced in
/// order, so the result does not depend on the thread count.
pub fn loss_and_grads(
    batch: &[Example],
    model: &EqualizerModel,
    spike: SpikeFn,
) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::InputShape("empty batch".into()));
    }
    let nc = model.config.n_classes();
    let ni = model.config.n_input();
    for ex in batch {
        if ex.label >= nc {
            return Err(Error::Input(format!("label {} outside 0..{nc}", ex.label)));
        }
        if ex.encoded.len() != ni {
            return Err(Error::InputShape(format!(
                "encoded length {} != {ni}",
                ex.encoded.len()
            )));
        }
    }
    let partials: Vec<(f64, Grads)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = Grads::zeros_like(model);
            let loss = chunk
                .iter()
                .map(|ex| example_grad(model, ex, spike, &mut g))
                .sum::<f64>();
            (loss, g)
        })
        .collect();
    let mut total = Grads::zeros_like(model);
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        total.add_assign(g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    Ok((loss * inv, total))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_model(model: &EqualizerModel) -> Self {
        let shapes: Vec<usize> = params(model).iter().map(|t| t.len()).collect();
        Self::new(&shapes)
    }
}

/// Bias-corrected Adam update of every tensor.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InputShape(
            "parameter/gradient tensor count mismatch".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[k].len() {
            return Err(Error::InputShape(format!("tensor {k} shape mismatch")));
        }
        for j in 0..p.len() {
            let m = &mut state.m[k][j];
            let v = &mut state.v[k][j];
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g[j];
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g[j] * g[j];
            p[j] -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Smallest power-of-two step that covers the tensor's max magnitude.
    PowerOfTwo,
    /// `max|x| / (2^(bits-1) - 1)`.
    MaxAbs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FakeQuant {
    pub values: Vec<f64>,
    pub step: f64,
    /// Straight-through mask: true where the value was inside the clamp range.
    pub pass: Vec<bool>,
}

pub fn quant_step(values: &[f64], bits: u32, mode: ScaleMode) -> f64 {
    let max_abs = values.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if max_abs == 0.0 {
        return 1.0;
    }
    let qmax = ((1i64 << (bits - 1)) - 1) as f64;
    match mode {
        ScaleMode::MaxAbs => max_abs / qmax,
        ScaleMode::PowerOfTwo => (max_abs / qmax).log2().ceil().exp2(),
    }
}

/// Symmetric per-tensor fake quantization.
pub fn fake_quantize(values: &[f64], bits: u32, mode: ScaleMode) -> FakeQuant {
    let step = quant_step(values, bits, mode);
    fake_quantize_with_step(values, bits, step)
}

pub fn fake_quantize_with_step(values: &[f64], bits: u32, step: f64) -> FakeQuant {
    let (values, pass) = values
        .iter()
        .map(|&x| quantize_value(x, step, bits))
        .unzip();
    FakeQuant { values, step, pass }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QatConfig {
    pub weight_bits: u32,
    pub state_bits: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainFeedback {
    /// Decision taps carry ground truth.
    Genie,
    /// After the first epoch the decision taps carry the model's own
    /// closed-loop decisions on each fresh segment.
    DecisionDirected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear decay to zero over the run.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub train_snr_db: f64,
    pub surrogate_slope: f64,
    pub qat: Option<QatConfig>,
    pub feedback: TrainFeedback,
    pub encoder: EncoderScheme,
    pub lif: LifParams,
    pub calibration_symbols: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Constant,
            epochs: 5,
            batches_per_epoch: 782,
            batch_size: 128,
            train_snr_db: 17.0,
            surrogate_slope: 100.0,
            qat: None,
            feedback: TrainFeedback::Genie,
            encoder: EncoderScheme::Binary,
            lif: LifParams::hardware(),
            calibration_symbols: 50_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Batch count and size from the full-scale setup (10^4 x 2*10^5).
    pub fn full_scale() -> Self {
        Self {
            batches_per_epoch: 10_000,
            batch_size: 200_000,
            ..Self::default()
        }
    }

    /// About 5*10^5 symbols in small batches with a decaying rate, closed-loop
    /// decision taps after the first epoch and a softer surrogate.
    pub fn desk_scale() -> Self {
        Self {
            learning_rate: 1e-2,
            lr_schedule: LrSchedule::Linear,
            batches_per_epoch: 3128,
            batch_size: 32,
            surrogate_slope: 10.0,
            feedback: TrainFeedback::DecisionDirected,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Parameter("learning_rate must be >= 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.batches_per_epoch == 0 {
            return Err(Error::Parameter(
                "batch_size, epochs and batches_per_epoch must be >= 1".into(),
            ));
        }
        if !(self.surrogate_slope > 0.0) {
            return Err(Error::Parameter("surrogate_slope must be > 0".into()));
        }
        if let Some(q) = self.qat {
            if !(2..=16).contains(&q.weight_bits) || !(4..=16).contains(&q.state_bits) {
                return Err(Error::Parameter("QAT bit widths out of range".into()));
            }
        }
        self.lif.validate()
    }

    pub fn total_symbols(&self) -> usize {
        self.epochs * self.batches_per_epoch * self.batch_size
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub batch: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

pub fn write_log_csv<W: Write>(log: &[LogRow], mut out: W) -> Result<()> {
    writeln!(out, "batch,loss,grad_norm")?;
    for r in log {
        writeln!(out, "{},{},{}", r.batch, r.loss, r.grad_norm)?;
    }
    Ok(())
}

/// Fake-quantize the weights of `model` in place (power-of-two scales) and
/// return the straight-through masks in [`Grads`] order.
pub fn quantize_weights(model: &mut EqualizerModel, bits: u32) -> Vec<Vec<bool>> {
    params_mut(model)
        .into_iter()
        .map(|t| {
            let fq = fake_quantize(t, bits, ScaleMode::PowerOfTwo);
            t.copy_from_slice(&fq.values);
            fq.pass
        })
        .collect()
}

/// Windows of a fresh link segment with decision taps filled per `decisions`.
fn segment_examples(
    y: &[f64],
    classes: &[usize],
    decisions: &[usize],
    topo: &TopologyConfig,
    encoder: &EncoderConfig,
) -> Result<Vec<Example>> {
    let half = topo.half();
    let mut out = Vec::with_capacity(y.len().saturating_sub(half));
    for k in half..y.len() {
        let buf = DecisionBuffer::from_slice(&decisions[k - half..k]);
        let mut encoded = Vec::with_capacity(topo.n_input());
        encode_window(
            &y[k - half..=k],
            &buf,
            encoder,
            topo.n_classes(),
            &mut encoded,
        )?;
        out.push(Example {
            encoded,
            label: classes[k],
        });
    }
    Ok(out)
}

const BATCHES_PER_SEGMENT: usize = 64;

/// Train a fresh model. Every segment of `BATCHES_PER_SEGMENT` batches is a
/// new channel realisation; windows are shuffled within the segment.
pub fn train(
    channel: &ChannelConfig,
    topo: &TopologyConfig,
    cfg: &TrainConfig,
) -> Result<(EqualizerModel, Vec<LogRow>)> {
    channel.validate()?;
    topo.validate()?;
    cfg.validate()?;
    if channel.modulation_bits != topo.m {
        return Err(Error::Parameter(
            "channel and topology modulation orders differ".into(),
        ));
    }
    let calib = random_link(
        cfg.calibration_symbols.max(1000),
        channel,
        cfg.train_snr_db,
        &mut rng_for(cfg.seed, "train/calibration"),
    )?;
    let encoder = EncoderConfig::calibrate(calib.y.as_real()?, cfg.encoder)?;
    let mut model = EqualizerModel::init(
        *topo,
        cfg.lif,
        encoder,
        &mut rng_for(cfg.seed, "train/init"),
    );
    let state_quant = cfg.qat.map(|q| StateQuant::for_bits(q.state_bits));
    let spike = SpikeFn::SuperSpike {
        slope: cfg.surrogate_slope,
    };
    let mut adam = AdamState::for_model(&model);
    let total_batches = cfg.epochs * cfg.batches_per_epoch;
    let mut log = Vec::with_capacity(total_batches);
    let half = topo.half();
    let mut batch_idx = 0;

    for epoch in 0..cfg.epochs {
        let mut remaining = cfg.batches_per_epoch;
        let mut segment = 0;
        while remaining > 0 {
            let n_batches = remaining.min(BATCHES_PER_SEGMENT);
            remaining -= n_batches;
            let label = format!("train/data/{epoch}/{segment}");
            let link = random_link(
                n_batches * cfg.batch_size + half,
                channel,
                cfg.train_snr_db,
                &mut rng_for(cfg.seed, &label),
            )?;
            let y = link.y.as_real()?;
            let decisions = match cfg.feedback {
                TrainFeedback::DecisionDirected if epoch > 0 => {
                    let eval_model = effective_model(&model, cfg.qat, state_quant);
                    let fwd = FloatForward::new(&eval_model);
                    let mut d = link.classes[..half].to_vec();
                    // closed-loop decisions, seeded with the true prefix
                    let decided = equalize_stream(y, &fwd, FeedbackMode::Feedback)?;
                    d.extend(decided);
                    d
                }
                _ => link.classes.clone(),
            };
            let mut examples =
                segment_examples(y, &link.classes, &decisions, topo, &model.encoder)?;
            examples.shuffle(&mut rng_for(cfg.seed, &format!("{label}/shuffle")));
            for batch in examples.chunks(cfg.batch_size) {
                let lr = match cfg.lr_schedule {
                    LrSchedule::Constant => cfg.learning_rate,
                    LrSchedule::Linear => {
                        cfg.learning_rate * (1.0 - batch_idx as f64 / total_batches as f64)
                    }
                };
                let (loss, grads) = match cfg.qat {
                    None => loss_and_grads(batch, &model, spike)?,
                    Some(q) => {
                        let mut shadow = model.clone();
                        let masks = quantize_weights(&mut shadow, q.weight_bits);
                        shadow.state_quant = state_quant;
                        let (loss, mut grads) = loss_and_grads(batch, &shadow, spike)?;
                        for (g, m) in grads.tensors_mut().into_iter().zip(&masks) {
                            g.iter_mut().zip(m).for_each(|(x, &pass)| {
                                if !pass {
                                    *x = 0.0;
                                }
                            });
                        }
                        (loss, grads)
                    }
                };
                let grad_norm = grads.norm();
                if !loss.is_finite() || !grad_norm.is_finite() {
                    return Err(Error::Divergence {
                        batch: batch_idx,
                        detail: format!("loss {loss}, grad norm {grad_norm}"),
                    });
                }
                let g = grads.tensors();
                adam_step(&mut params_mut(&mut model), &g, &mut adam, lr)?;
                log.push(LogRow {
                    batch: batch_idx,
                    loss,
                    grad_norm,
                });
                batch_idx += 1;
            }
            segment += 1;
        }
    }
    Ok((effective_model(&model, cfg.qat, state_quant), log))
}

/// The model as deployed: QAT models carry grid-aligned weights and the
/// state grid.
fn effective_model(
    model: &EqualizerModel,
    qat: Option<QatConfig>,
    state_quant: Option<StateQuant>,
) -> EqualizerModel {
    let mut out = model.clone();
    if let Some(q) = qat {
        quantize_weights(&mut out, q.weight_bits);
        out.state_quant = state_quant;
    }
    out
}
