//! Bit-accurate integer inference.
//!
//! Every tensor carries its own power-of-two scale (`value = int * 2^-frac`).
//! Additions across scales align by exact left shifts. The lossy steps are
//! the floor shifts of the LIF decay, the round-half-up rescale of the drive
//! onto the state grid, and saturation.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::equalizer::{argmax, EncoderConfig, EqualizerModel, SymbolDecider, TopologyConfig};
use crate::error::{Error, Result};
use crate::train::{params, quant_step, ScaleMode};

/// Signed or unsigned fixed-point format; `frac_bits` may be negative or
/// exceed `total_bits` when a tensor's magnitude calls for it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FxpFormat {
    pub total_bits: u32,
    pub frac_bits: i32,
    pub signed: bool,
}

impl FxpFormat {
    pub fn signed(total_bits: u32, frac_bits: i32) -> Self {
        Self {
            total_bits,
            frac_bits,
            signed: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=32).contains(&self.total_bits) {
            return Err(Error::Parameter(format!(
                "total_bits {} outside 2..=32",
                self.total_bits
            )));
        }
        Ok(())
    }

    pub fn min_int(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.total_bits - 1))
        } else {
            0
        }
    }

    pub fn max_int(&self) -> i64 {
        if self.signed {
            (1i64 << (self.total_bits - 1)) - 1
        } else {
            (1i64 << self.total_bits) - 1
        }
    }

    pub fn step(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    /// Representable real interval.
    pub fn range(&self) -> (f64, f64) {
        (
            self.min_int() as f64 * self.step(),
            self.max_int() as f64 * self.step(),
        )
    }

    pub fn to_real(&self, x: i64) -> f64 {
        x as f64 * self.step()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FxpTensor {
    pub name: String,
    pub format: FxpFormat,
    pub data: Vec<i32>,
}

impl FxpTensor {
    pub fn frac(&self) -> i32 {
        self.format.frac_bits
    }
}

/// Integer LIF constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FxpLif {
    pub k_v: u32,
    pub k_i: u32,
    pub v_th: i32,
    pub v_r: i32,
    pub state: FxpFormat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FxpModel {
    pub config: TopologyConfig,
    pub encoder: EncoderConfig,
    pub fc0_w: FxpTensor,
    pub fc0_b: FxpTensor,
    pub fc1_w: FxpTensor,
    pub fc1_b: FxpTensor,
    pub fc2: FxpTensor,
    pub fc3_w: FxpTensor,
    pub fc3_b: FxpTensor,
    pub lif: FxpLif,
    pub acc_bits: u32,
}

pub const TENSOR_NAMES: [&str; 7] = [
    "fc0.weight",
    "fc0.bias",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc3.weight",
    "fc3.bias",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvertSpec {
    pub weight_bits: u32,
    pub state_bits: u32,
    pub acc_bits: u32,
    /// Per-tensor overrides by name; others get the smallest power-of-two
    /// scale covering their range.
    #[serde(default)]
    pub formats: Vec<(String, FxpFormat)>,
}

impl ConvertSpec {
    pub fn bits(bits: u32) -> Self {
        Self {
            weight_bits: bits,
            state_bits: bits,
            acc_bits: 32,
            formats: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conversion {
    pub model: FxpModel,
    /// Largest |float - fixed| per tensor, in [`TENSOR_NAMES`] order.
    pub max_error: Vec<f64>,
    pub warnings: Vec<String>,
}

fn log2_exact(alpha: f64) -> Option<u32> {
    (1..31).find(|&k| alpha == (-(k as f64)).exp2())
}

fn frac_of_step(step: f64) -> i32 {
    -(step.log2().round() as i32)
}

/// Round half to even onto `format`; `None` if out of range.
fn to_int(x: f64, format: &FxpFormat) -> Option<i32> {
    let q = (x / format.step()).round_ties_even();
    if q < format.min_int() as f64 || q > format.max_int() as f64 {
        None
    } else {
        Some(q as i32)
    }
}

/// Convert a float model to integers.
pub fn convert(model: &EqualizerModel, spec: &ConvertSpec) -> Result<Conversion> {
    model.validate()?;
    for (name, f) in &spec.formats {
        if !TENSOR_NAMES.contains(&name.as_str()) {
            return Err(Error::Parameter(format!("unknown tensor {name}")));
        }
        f.validate()?;
    }
    if !(8..=32).contains(&spec.acc_bits) {
        return Err(Error::Parameter(format!(
            "acc_bits {} outside 8..=32",
            spec.acc_bits
        )));
    }
    if !(2..=16).contains(&spec.weight_bits) || !(2..=16).contains(&spec.state_bits) {
        return Err(Error::Parameter("weight/state bits outside 2..=16".into()));
    }
    let lif = &model.lif;
    let (Some(k_v), Some(k_i)) = (log2_exact(lif.alpha_v), log2_exact(lif.alpha_i)) else {
        return Err(Error::Parameter(format!(
            "alpha_v {} and alpha_i {} must be powers of two for shift decay",
            lif.alpha_v, lif.alpha_i
        )));
    };
    if lif.v_leak != 0.0 || lif.r != 1.0 {
        return Err(Error::Parameter(
            "integer LIF requires v_leak = 0 and r = 1".into(),
        ));
    }

    let mut warnings = Vec::new();
    match model.state_quant {
        Some(q) if q.bits == spec.state_bits => {}
        Some(q) => warnings.push(format!(
            "model state grid is {} bits, converting to {}",
            q.bits, spec.state_bits
        )),
        None => warnings.push("model was not trained with quantized state".into()),
    }

    let mut tensors = Vec::with_capacity(7);
    let mut max_error = Vec::with_capacity(7);
    let mut overflow = Vec::new();
    let mut off_grid = Vec::new();
    for (name, values) in TENSOR_NAMES.iter().zip(params(model)) {
        let format = match spec.formats.iter().find(|(n, _)| n == name) {
            Some((_, f)) => *f,
            None => FxpFormat::signed(
                spec.weight_bits,
                frac_of_step(quant_step(values, spec.weight_bits, ScaleMode::PowerOfTwo)),
            ),
        };
        let mut data = Vec::with_capacity(values.len());
        let mut err: f64 = 0.0;
        let mut bad = false;
        for &x in values {
            match to_int(x, &format) {
                Some(q) => {
                    err = err.max((x - format.to_real(q as i64)).abs());
                    data.push(q);
                }
                None => {
                    bad = true;
                    data.push(0);
                }
            }
        }
        if bad {
            overflow.push(format!("{name} exceeds {:?}", format.range()));
        }
        if err > 0.0 {
            off_grid.push(*name);
        }
        tensors.push(FxpTensor {
            name: name.to_string(),
            format,
            data,
        });
        max_error.push(err);
    }
    if !overflow.is_empty() {
        return Err(Error::Conversion(overflow));
    }
    if !off_grid.is_empty() {
        warnings.push(format!(
            "tensors not on their {}-bit grid: {}",
            spec.weight_bits,
            off_grid.join(", ")
        ));
    }

    let state = FxpFormat::signed(spec.state_bits, spec.state_bits as i32 - 4);
    let v_th = to_int(lif.v_th, &state)
        .ok_or_else(|| Error::Conversion(vec![format!("v_th {} outside state range", lif.v_th)]))?;
    let v_r = to_int(lif.v_r, &state)
        .ok_or_else(|| Error::Conversion(vec![format!("v_r {} outside state range", lif.v_r)]))?;
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("seven tensors");
    Ok(Conversion {
        model: FxpModel {
            config: model.config,
            encoder: model.encoder,
            fc0_w: next(),
            fc0_b: next(),
            fc1_w: next(),
            fc1_b: next(),
            fc2: next(),
            fc3_w: next(),
            fc3_b: next(),
            lif: FxpLif {
                k_v,
                k_i,
                v_th,
                v_r,
                state,
            },
            acc_bits: spec.acc_bits,
        },
        max_error,
        warnings,
    })
}

/// Saturation diagnostics of one or more forward passes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SatCounters {
    /// Accumulator results clamped to the accumulator width.
    pub accumulator: u64,
    /// LIF state values clamped to the state format.
    pub state: u64,
}

/// Saturating accumulator arithmetic.
#[derive(Clone, Copy, Debug)]
pub struct Accumulator {
    lo: i64,
    hi: i64,
}

impl Accumulator {
    pub fn new(bits: u32) -> Self {
        Self {
            lo: -(1i64 << (bits - 1)),
            hi: (1i64 << (bits - 1)) - 1,
        }
    }

    #[inline]
    pub fn clamp(&self, x: i64, sat: &mut SatCounters) -> i64 {
        if x < self.lo {
            sat.accumulator += 1;
            self.lo
        } else if x > self.hi {
            sat.accumulator += 1;
            self.hi
        } else {
            x
        }
    }

    #[inline]
    pub fn add(&self, a: i64, b: i64, sat: &mut SatCounters) -> i64 {
        self.clamp(a + b, sat)
    }

    /// `x * 2^k` for k >= 0, `floor(x / 2^-k)` otherwise.
    #[inline]
    pub fn shift(&self, x: i64, k: i32, sat: &mut SatCounters) -> i64 {
        if k >= 0 {
            let k = k as u32;
            if k >= 62 || x.unsigned_abs() > (i64::MAX as u64 >> k) {
                return self.clamp(if x < 0 { i64::MIN } else { i64::MAX }, sat);
            }
            self.clamp(x << k, sat)
        } else {
            x >> (-k).min(63)
        }
    }

    /// Like [`Accumulator::shift`] but right shifts round half up.
    #[inline]
    pub fn round_shift(&self, x: i64, k: i32, sat: &mut SatCounters) -> i64 {
        if k >= 0 {
            return self.shift(x, k, sat);
        }
        let k = (-k).min(62);
        self.clamp((x + (1i64 << (k - 1))) >> k, sat)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FxpState {
    pub v: Vec<i64>,
    pub i: Vec<i64>,
}

impl FxpState {
    pub fn zeros(n: usize) -> Self {
        Self {
            v: vec![0; n],
            i: vec![0; n],
        }
    }
}

#[inline]
fn clamp_state(x: i64, f: &FxpFormat, sat: &mut SatCounters) -> i64 {
    if x < f.min_int() {
        sat.state += 1;
        f.min_int()
    } else if x > f.max_int() {
        sat.state += 1;
        f.max_int()
    } else {
        x
    }
}

/// One integer LIF update. `>>` is an arithmetic shift (rounds toward
/// negative infinity).
pub fn fxp_lif_step(
    state: &mut FxpState,
    drive: &[i64],
    lif: &FxpLif,
    spikes: &mut [bool],
    sat: &mut SatCounters,
) {
    for n in 0..state.v.len() {
        let i = state.i[n];
        let i_new = clamp_state(i - (i >> lif.k_i) + drive[n], &lif.state, sat);
        let v = state.v[n];
        let v_pre = clamp_state(v - (v >> lif.k_v) + (i_new >> lif.k_v), &lif.state, sat);
        let fired = v_pre >= lif.v_th as i64;
        state.i[n] = i_new;
        state.v[n] = if fired { lif.v_r as i64 } else { v_pre };
        spikes[n] = fired;
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FxpOutput {
    /// Accumulated logits at scale `2^-logit_frac`.
    pub logits: Vec<i64>,
    pub logit_frac: i32,
    pub class: usize,
    pub sat: SatCounters,
}

impl FxpModel {
    fn check(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (ni, nh, nc) = (c.n_input(), c.n_hidden, c.n_classes());
        let want = [nh * ni, nh, nh * nh, nh, nh * nh, nc * nh, nc];
        for (t, w) in self.tensors().iter().zip(want) {
            if t.data.len() != w {
                return Err(Error::InputShape(format!(
                    "{} has {} values, expected {w}",
                    t.name,
                    t.data.len()
                )));
            }
            t.format.validate()?;
        }
        self.lif.state.validate()?;
        if !(8..=32).contains(&self.acc_bits) {
            return Err(Error::Parameter(format!(
                "acc_bits {} outside 8..=32",
                self.acc_bits
            )));
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&FxpTensor; 7] {
        [
            &self.fc0_w,
            &self.fc0_b,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2,
            &self.fc3_w,
            &self.fc3_b,
        ]
    }

    /// Fraction bits of the FC0 output.
    pub fn a0_frac(&self) -> i32 {
        self.fc0_w.frac().max(self.fc0_b.frac())
    }

    /// Fraction bits of the LIF drive before rescaling to the state grid.
    pub fn drive_frac(&self) -> i32 {
        (self.fc1_w.frac() + self.a0_frac())
            .max(self.fc1_b.frac())
            .max(self.fc2.frac())
    }

    pub fn logit_frac(&self) -> i32 {
        self.fc3_w.frac().max(self.fc3_b.frac())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = FxpFile {
            format: FXP_FORMAT.into(),
            version: FXP_VERSION,
            model: self.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: FxpFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.format != FXP_FORMAT || file.version != FXP_VERSION {
            return Err(Error::Format(format!(
                "expected {FXP_FORMAT} v{FXP_VERSION}, got {} v{}",
                file.format, file.version
            )));
        }
        file.model.check()?;
        Ok(file.model)
    }
}

pub const FXP_FORMAT: &str = "snn-dfe/fxp";
pub const FXP_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FxpFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: FxpModel,
}

/// Integer forward pass on a ternary window.
pub fn fxp_forward(encoded: &[i8], model: &FxpModel) -> Result<FxpOutput> {
    model.check()?;
    if encoded.len() != model.config.n_input() {
        return Err(Error::InputShape(format!(
            "encoded length {} != {}",
            encoded.len(),
            model.config.n_input()
        )));
    }
    if encoded.iter().any(|&x| !(-1..=1).contains(&x)) {
        return Err(Error::Input("encoded values must be ternary".into()));
    }
    Ok(forward_unchecked(encoded, model))
}

fn forward_unchecked(encoded: &[i8], m: &FxpModel) -> FxpOutput {
    let c = &m.config;
    let (ni, nh, nc) = (c.n_input(), c.n_hidden, c.n_classes());
    let acc = Accumulator::new(m.acc_bits);
    let mut sat = SatCounters::default();

    // FC0 at a0_frac: bias-only for the zero-input steps, plus the +-1 taps at t = 0
    let f_a0 = m.a0_frac();
    let w0_shift = f_a0 - m.fc0_w.frac();
    let b0_shift = f_a0 - m.fc0_b.frac();
    let a0_idle: Vec<i64> = m
        .fc0_b
        .data
        .iter()
        .map(|&b| acc.shift(b as i64, b0_shift, &mut sat))
        .collect();
    let mut a0_first = a0_idle.clone();
    for (r, a) in a0_first.iter_mut().enumerate() {
        let row = &m.fc0_w.data[r * ni..(r + 1) * ni];
        for (&w, &x) in row.iter().zip(encoded) {
            let w = acc.shift(w as i64, w0_shift, &mut sat);
            match x {
                1 => *a = acc.add(*a, w, &mut sat),
                -1 => *a = acc.add(*a, -w, &mut sat),
                _ => {}
            }
        }
    }

    // FC1 at drive_frac
    let f_d = m.drive_frac();
    let p1_shift = f_d - (m.fc1_w.frac() + f_a0);
    let b1_shift = f_d - m.fc1_b.frac();
    let w2_shift = f_d - m.fc2.frac();
    let fc1 = |a0: &[i64], sat: &mut SatCounters| -> Vec<i64> {
        (0..nh)
            .map(|r| {
                let mut d = acc.shift(m.fc1_b.data[r] as i64, b1_shift, sat);
                for (&w, &a) in m.fc1_w.data[r * nh..(r + 1) * nh].iter().zip(a0) {
                    let p = acc.clamp(w as i64 * a, sat);
                    d = acc.add(d, acc.shift(p, p1_shift, sat), sat);
                }
                d
            })
            .collect()
    };
    let first_drive = fc1(&a0_first, &mut sat);
    let idle_drive = fc1(&a0_idle, &mut sat);
    let w2: Vec<i64> = m
        .fc2
        .data
        .iter()
        .map(|&w| acc.shift(w as i64, w2_shift, &mut sat))
        .collect();

    // FC3 at logit_frac
    let f_l = m.logit_frac();
    let w3: Vec<i64> = m
        .fc3_w
        .data
        .iter()
        .map(|&w| acc.shift(w as i64, f_l - m.fc3_w.frac(), &mut sat))
        .collect();
    let b3: Vec<i64> = m
        .fc3_b
        .data
        .iter()
        .map(|&b| acc.shift(b as i64, f_l - m.fc3_b.frac(), &mut sat))
        .collect();

    let to_state = m.lif.state.frac_bits - f_d;
    let mut state = FxpState::zeros(nh);
    let mut spikes = vec![false; nh];
    let mut prev = vec![false; nh];
    let mut drive = vec![0i64; nh];
    let mut logits = vec![0i64; nc];
    for t in 0..c.time_steps {
        for r in 0..nh {
            let mut d = if t == 0 {
                first_drive[r]
            } else {
                idle_drive[r]
            };
            for (k, &s) in prev.iter().enumerate() {
                if s {
                    d = acc.add(d, w2[r * nh + k], &mut sat);
                }
            }
            drive[r] = acc.round_shift(d, to_state, &mut sat);
        }
        fxp_lif_step(&mut state, &drive, &m.lif, &mut spikes, &mut sat);
        for (o, l) in logits.iter_mut().enumerate() {
            let mut z = b3[o];
            for (k, &s) in spikes.iter().enumerate() {
                if s {
                    z = acc.add(z, w3[o * nh + k], &mut sat);
                }
            }
            *l = acc.add(*l, z, &mut sat);
        }
        prev.copy_from_slice(&spikes);
    }
    let class = argmax(&logits);
    FxpOutput {
        logits,
        logit_frac: f_l,
        class,
        sat,
    }
}

/// Shared-read decider that tallies saturation across calls.
pub struct FxpDecider<'a> {
    model: &'a FxpModel,
    accumulator: AtomicU64,
    state: AtomicU64,
}

impl<'a> FxpDecider<'a> {
    pub fn new(model: &'a FxpModel) -> Result<Self> {
        model.check()?;
        Ok(Self {
            model,
            accumulator: AtomicU64::new(0),
            state: AtomicU64::new(0),
        })
    }

    pub fn counters(&self) -> SatCounters {
        SatCounters {
            accumulator: self.accumulator.load(Ordering::Relaxed),
            state: self.state.load(Ordering::Relaxed),
        }
    }
}

impl SymbolDecider for FxpDecider<'_> {
    fn topology(&self) -> &TopologyConfig {
        &self.model.config
    }

    fn encoder(&self) -> &EncoderConfig {
        &self.model.encoder
    }

    fn decide(&self, encoded: &[i8]) -> usize {
        let out = forward_unchecked(encoded, self.model);
        self.accumulator
            .fetch_add(out.sat.accumulator, Ordering::Relaxed);
        self.state.fetch_add(out.sat.state, Ordering::Relaxed);
        out.class
    }
}
