//! Recurrent leaky-integrate-and-fire layer, explicit-Euler float reference.
//!
//! One step updates the synaptic current first, then integrates the voltage
//! with the new current, thresholds with `>=`, and hard-resets to `v_r`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LifParams {
    /// dt / tau_m
    pub alpha_v: f64,
    /// dt / tau_s
    pub alpha_i: f64,
    pub v_th: f64,
    pub v_r: f64,
    pub v_leak: f64,
    /// Input resistance; scales the drive.
    pub r: f64,
}

impl LifParams {
    /// Shift-friendly decays 2^-3 and 2^-2.
    pub fn hardware() -> Self {
        Self {
            alpha_v: 0.125,
            alpha_i: 0.25,
            v_th: 1.0,
            v_r: 0.0,
            v_leak: 0.0,
            r: 1.0,
        }
    }

    /// Framework defaults before the hardware rounding (0.1, 0.2).
    pub fn reference() -> Self {
        Self {
            alpha_v: 0.1,
            alpha_i: 0.2,
            ..Self::hardware()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_v > 0.0 && self.alpha_v < 1.0 && self.alpha_i > 0.0 && self.alpha_i < 1.0) {
            return Err(Error::Parameter("decay factors must lie in (0, 1)".into()));
        }
        if !(self.v_th > self.v_r) {
            return Err(Error::Parameter("v_th must exceed v_r".into()));
        }
        Ok(())
    }
}

impl Default for LifParams {
    fn default() -> Self {
        Self::hardware()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub v: Vec<f64>,
    pub i: Vec<f64>,
}

impl LifState {
    pub fn zeros(n: usize) -> Self {
        Self {
            v: vec![0.0; n],
            i: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentLayerWeights {
    pub w_in: Matrix,
    pub w_rec: Matrix,
    pub bias: Vec<f64>,
}

impl RecurrentLayerWeights {
    pub fn width(&self) -> usize {
        self.w_rec.rows
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.w_rec.rows;
        if self.w_rec.cols != n || self.w_in.rows != n || self.bias.len() != n {
            return Err(Error::InputShape(
                "inconsistent recurrent layer dimensions".into(),
            ));
        }
        if !self.w_in.is_finite()
            || !self.w_rec.is_finite()
            || self.bias.iter().any(|b| !b.is_finite())
        {
            return Err(Error::Input("non-finite layer weights".into()));
        }
        Ok(())
    }
}

/// Advance every neuron by one step in place; writes spikes into `spikes`.
pub fn lif_step_in_place(
    state: &mut LifState,
    drive: &[f64],
    params: &LifParams,
    spikes: &mut [bool],
) {
    for n in 0..state.v.len() {
        let i_new = (1.0 - params.alpha_i) * state.i[n] + params.r * drive[n];
        let v_pre = state.v[n] + params.alpha_v * ((params.v_leak - state.v[n]) + i_new);
        let fired = v_pre >= params.v_th;
        state.i[n] = i_new;
        state.v[n] = if fired { params.v_r } else { v_pre };
        spikes[n] = fired;
    }
}

pub fn lif_step(
    state: &LifState,
    drive: &[f64],
    params: &LifParams,
) -> Result<(LifState, Vec<bool>)> {
    if drive.len() != state.len() || state.i.len() != state.v.len() {
        return Err(Error::InputShape(format!(
            "drive of length {} for a layer of width {}",
            drive.len(),
            state.len()
        )));
    }
    let mut next = state.clone();
    let mut spikes = vec![false; state.len()];
    lif_step_in_place(&mut next, drive, params, &mut spikes);
    Ok((next, spikes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub v: Vec<f64>,
    pub i: Vec<f64>,
    pub spikes: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Unroll {
    pub spikes: Vec<Vec<bool>>,
    pub final_state: LifState,
    pub trace: Vec<TraceRow>,
}

/// Run the layer for `inputs.len()` steps. The recurrent input at step `t`
/// is the layer's own spike vector from `t - 1` (zeros at `t = 0`).
pub fn lif_unroll(
    inputs: &[Vec<f64>],
    weights: &RecurrentLayerWeights,
    params: &LifParams,
) -> Result<Unroll> {
    if inputs.is_empty() {
        return Err(Error::Parameter("need at least one time step".into()));
    }
    weights.validate()?;
    let n = weights.width();
    let mut state = LifState::zeros(n);
    let mut prev = vec![0.0; n];
    let mut spikes = vec![false; n];
    let mut out = Vec::with_capacity(inputs.len());
    let mut trace = Vec::with_capacity(inputs.len());
    for (t, x) in inputs.iter().enumerate() {
        if x.len() != weights.w_in.cols {
            return Err(Error::InputShape(format!(
                "input {t} has length {}",
                x.len()
            )));
        }
        let mut drive = weights.bias.clone();
        weights.w_in.matvec_acc(x, &mut drive);
        weights.w_rec.matvec_acc(&prev, &mut drive);
        lif_step_in_place(&mut state, &drive, params, &mut spikes);
        for (p, &s) in prev.iter_mut().zip(&spikes) {
            *p = if s { 1.0 } else { 0.0 };
        }
        trace.push(TraceRow {
            step: t,
            v: state.v.clone(),
            i: state.i.clone(),
            spikes: spikes.clone(),
        });
        out.push(spikes.clone());
    }
    Ok(Unroll {
        spikes: out,
        final_state: state,
        trace,
    })
}

/// CSV `step,neuron,v,i,spike`.
pub fn write_trace_csv<W: Write>(trace: &[TraceRow], mut out: W) -> Result<()> {
    writeln!(out, "step,neuron,v,i,spike")?;
    for row in trace {
        for n in 0..row.v.len() {
            writeln!(
                out,
                "{},{n},{},{},{}",
                row.step, row.v[n], row.i[n], row.spikes[n] as u8
            )?;
        }
    }
    Ok(())
}

/// Single-neuron demonstration: input spikes at 20, 200/250/300 and
/// 800/850/900 ms over 1600 one-millisecond steps, slow decays.
pub struct DemoTrace;

impl DemoTrace {
    pub const STEPS: usize = 1600;
    pub const INPUT_TIMES: [usize; 7] = [20, 200, 250, 300, 800, 850, 900];

    pub fn params() -> LifParams {
        LifParams {
            alpha_v: 0.01,
            alpha_i: 0.01,
            ..LifParams::hardware()
        }
    }

    pub fn weights() -> RecurrentLayerWeights {
        RecurrentLayerWeights {
            w_in: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            w_rec: Matrix::zeros(1, 1),
            bias: vec![0.0],
        }
    }

    pub fn inputs() -> Vec<Vec<f64>> {
        (0..Self::STEPS)
            .map(|t| {
                vec![if Self::INPUT_TIMES.contains(&t) {
                    1.0
                } else {
                    0.0
                }]
            })
            .collect()
    }

    pub fn run() -> Unroll {
        lif_unroll(&Self::inputs(), &Self::weights(), &Self::params()).expect("demo is well formed")
    }
}
