//! IM/DD optical link simulation.
//!
//! PAM symbols are zero-stuffed to 2 samples per symbol, shaped with a
//! root-raised-cosine filter, dispersed by the fiber, square-law detected,
//! corrupted by AWGN and matched-filtered before being decimated back to one
//! sample per symbol.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// How the link-level SNR axis maps to per-sample noise variance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrReference {
    /// SNR is Eb/N0: `sigma^2 = P * sps / (2 * m * snr)`.
    EbN0,
    /// SNR is the plain sample-domain ratio `P / sigma^2`.
    PerSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    pub fiber_length_km: f64,
    /// ps/(nm km)
    pub dispersion_coeff: f64,
    pub wavelength_nm: f64,
    pub baud_rate_gbd: f64,
    pub sps: usize,
    pub rolloff: f64,
    /// Filter length in symbols; the filter has `rrc_span * sps + 1` taps.
    pub rrc_span: usize,
    pub modulation_bits: u32,
    pub snr_reference: SnrReference,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            fiber_length_km: 5.0,
            dispersion_coeff: 17.0,
            wavelength_nm: 1550.0,
            baud_rate_gbd: 50.0,
            sps: 2,
            rolloff: 0.2,
            rrc_span: 40,
            modulation_bits: 2,
            snr_reference: SnrReference::EbN0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fiber_length_km >= 0.0) {
            return Err(Error::Parameter("fiber_length_km must be >= 0".into()));
        }
        if !(self.rolloff > 0.0 && self.rolloff <= 1.0) {
            return Err(Error::Parameter("rolloff must lie in (0, 1]".into()));
        }
        if self.sps < 1 {
            return Err(Error::Parameter("sps must be >= 1".into()));
        }
        if self.rrc_span < 8 || !self.rrc_span.is_multiple_of(2) {
            return Err(Error::Parameter("rrc_span must be even and >= 8".into()));
        }
        if self.modulation_bits == 0 || self.modulation_bits > 8 {
            return Err(Error::Parameter("modulation_bits must be in 1..=8".into()));
        }
        if !(self.baud_rate_gbd > 0.0) || !(self.wavelength_nm > 0.0) {
            return Err(Error::Parameter(
                "baud rate and wavelength must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn sample_rate(&self) -> f64 {
        self.baud_rate_gbd * 1e9 * self.sps as f64
    }

    /// Coefficient `k` of the dispersion phase `-k * f^2` in rad/Hz^2.
    pub fn dispersion_phase_coeff(&self) -> f64 {
        let lambda = self.wavelength_nm * 1e-9;
        let d = self.dispersion_coeff * 1e-6; // s/m^2
        let length = self.fiber_length_km * 1e3;
        PI * lambda * lambda * d * length / SPEED_OF_LIGHT
    }

    /// Per-sample SNR in dB that realises `snr_db` on this config's axis.
    pub fn sample_snr_db(&self, snr_db: f64) -> f64 {
        match self.snr_reference {
            SnrReference::PerSample => snr_db,
            SnrReference::EbN0 => {
                let factor = 2.0 * self.modulation_bits as f64 / self.sps as f64;
                snr_db + 10.0 * factor.log10()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    SymbolRate,
    Oversampled,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Samples {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignalBuffer {
    pub samples: Samples,
    pub sample_rate: f64,
    pub domain: Domain,
}

impl SignalBuffer {
    pub fn real(samples: Vec<f64>, sample_rate: f64, domain: Domain) -> Self {
        Self {
            samples: Samples::Real(samples),
            sample_rate,
            domain,
        }
    }

    pub fn complex(samples: Vec<Complex64>, sample_rate: f64, domain: Domain) -> Self {
        Self {
            samples: Samples::Complex(samples),
            sample_rate,
            domain,
        }
    }

    pub fn len(&self) -> usize {
        match &self.samples {
            Samples::Real(v) => v.len(),
            Samples::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        match &self.samples {
            Samples::Real(v) => v.iter().all(|x| x.is_finite()),
            Samples::Complex(v) => v.iter().all(|x| x.re.is_finite() && x.im.is_finite()),
        }
    }

    pub fn to_complex(&self) -> Vec<Complex64> {
        match &self.samples {
            Samples::Real(v) => v.iter().map(|&x| Complex64::new(x, 0.0)).collect(),
            Samples::Complex(v) => v.clone(),
        }
    }

    /// Real samples; errors on a complex buffer.
    pub fn as_real(&self) -> Result<&[f64]> {
        match &self.samples {
            Samples::Real(v) => Ok(v),
            Samples::Complex(_) => Err(Error::InputShape("expected a real-valued buffer".into())),
        }
    }

    pub fn energy(&self) -> f64 {
        match &self.samples {
            Samples::Real(v) => v.iter().map(|x| x * x).sum(),
            Samples::Complex(v) => v.iter().map(|x| x.norm_sqr()).sum(),
        }
    }

    /// Dump as CSV with columns `index,re,im`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "index,re,im")?;
        for (k, z) in self.to_complex().iter().enumerate() {
            writeln!(out, "{k},{},{}", z.re, z.im)?;
        }
        Ok(())
    }
}

/// PAM levels with their Gray bit labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PamAlphabet {
    pub m: u32,
    /// Amplitudes in ascending order.
    pub amplitudes: Vec<f64>,
    /// `gray_map[k]` is the bit label (MSB first) of amplitude `k`.
    pub gray_map: Vec<u32>,
}

impl PamAlphabet {
    /// Levels `sqrt(k)` so the detected intensities are equally spaced.
    pub fn sqrt_levels(m: u32) -> Self {
        let n = 1usize << m;
        Self {
            m,
            amplitudes: (0..n).map(|k| (k as f64).sqrt()).collect(),
            gray_map: (0..n as u32).map(|k| k ^ (k >> 1)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    /// Inverse of `gray_map`.
    pub fn class_of_label(&self, label: u32) -> usize {
        self.gray_map
            .iter()
            .position(|&g| g == label)
            .expect("label outside alphabet")
    }

    /// Bits (MSB first) carried by class `k`.
    pub fn bits_of(&self, class: usize) -> impl Iterator<Item = u8> + '_ {
        let label = self.gray_map[class];
        (0..self.m).rev().map(move |b| ((label >> b) & 1) as u8)
    }

    /// Number of differing bits between two classes.
    pub fn bit_distance(&self, a: usize, b: usize) -> u32 {
        (self.gray_map[a] ^ self.gray_map[b]).count_ones()
    }
}

/// Group bits into symbols and return class indices (amplitude order).
pub fn bits_to_classes(bits: &[u8], alphabet: &PamAlphabet) -> Result<Vec<usize>> {
    let m = alphabet.m as usize;
    if !bits.len().is_multiple_of(m) {
        return Err(Error::InputShape(format!(
            "bit count {} is not a multiple of {m}",
            bits.len()
        )));
    }
    bits.chunks(m)
        .map(|group| {
            let mut label = 0u32;
            for &b in group {
                if b > 1 {
                    return Err(Error::Input(format!("bit value {b} is not 0 or 1")));
                }
                label = (label << 1) | b as u32;
            }
            Ok(alphabet.class_of_label(label))
        })
        .collect()
}

pub fn gray_map(bits: &[u8], alphabet: &PamAlphabet) -> Result<Vec<f64>> {
    Ok(bits_to_classes(bits, alphabet)?
        .into_iter()
        .map(|k| alphabet.amplitudes[k])
        .collect())
}

/// Bits carried by a class sequence.
pub fn gray_demap(classes: &[usize], alphabet: &PamAlphabet) -> Vec<u8> {
    classes.iter().flat_map(|&k| alphabet.bits_of(k)).collect()
}

/// Nearest-amplitude class of each symbol.
pub fn classify_amplitudes(symbols: &[f64], alphabet: &PamAlphabet) -> Vec<usize> {
    symbols
        .iter()
        .map(|&s| {
            let mut best = 0;
            for k in 1..alphabet.len() {
                if (alphabet.amplitudes[k] - s).abs() < (alphabet.amplitudes[best] - s).abs() {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Unit-energy root-raised-cosine taps, `span * sps + 1` long.
pub fn rrc_taps(rolloff: f64, span: usize, sps: usize) -> Vec<f64> {
    let n = span * sps + 1;
    let center = (n - 1) as f64 / 2.0;
    let beta = rolloff;
    let mut taps: Vec<f64> = (0..n)
        .map(|k| {
            let t = (k as f64 - center) / sps as f64;
            if t.abs() < 1e-12 {
                1.0 - beta + 4.0 * beta / PI
            } else if (4.0 * beta * t.abs() - 1.0).abs() < 1e-12 {
                let a = PI / (4.0 * beta);
                beta / 2f64.sqrt() * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos())
            } else {
                let num =
                    (PI * t * (1.0 - beta)).sin() + 4.0 * beta * t * (PI * t * (1.0 + beta)).cos();
                let den = PI * t * (1.0 - (4.0 * beta * t).powi(2));
                num / den
            }
        })
        .collect();
    let norm = taps.iter().map(|h| h * h).sum::<f64>().sqrt();
    taps.iter_mut().for_each(|h| *h /= norm);
    // enforce exact symmetry against rounding in the closed form
    for k in 0..n / 2 {
        let avg = 0.5 * (taps[k] + taps[n - 1 - k]);
        taps[k] = avg;
        taps[n - 1 - k] = avg;
    }
    taps
}

/// Full linear convolution (`a.len() + b.len() - 1` outputs).
pub fn convolve(signal: &[f64], taps: &[f64]) -> Vec<f64> {
    if signal.is_empty() || taps.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; signal.len() + taps.len() - 1];
    for (i, &s) in signal.iter().enumerate() {
        if s == 0.0 {
            continue;
        }
        for (j, &h) in taps.iter().enumerate() {
            out[i + j] += s * h;
        }
    }
    out
}

pub fn upsample(symbols: &[f64], factor: usize) -> Vec<f64> {
    let mut out = vec![0.0; symbols.len() * factor];
    for (k, &s) in symbols.iter().enumerate() {
        out[k * factor] = s;
    }
    out
}

/// Frequency of FFT bin `k` for an `n`-point transform.
pub fn bin_frequency(k: usize, n: usize, sample_rate: f64) -> f64 {
    let signed = if k <= (n - 1) / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    };
    signed * sample_rate / n as f64
}

/// Dispersion-only all-pass `H(f) = exp(-j k f^2)` over the whole buffer.
pub fn chromatic_dispersion(signal: &SignalBuffer, cfg: &ChannelConfig) -> Result<SignalBuffer> {
    if signal.is_empty() {
        return Err(Error::InputShape("empty buffer".into()));
    }
    let coeff = cfg.dispersion_phase_coeff();
    let mut data = signal.to_complex();
    if coeff != 0.0 {
        let n = data.len();
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(n).process(&mut data);
        for (k, z) in data.iter_mut().enumerate() {
            let f = bin_frequency(k, n, signal.sample_rate);
            *z *= Complex64::from_polar(1.0, -coeff * f * f);
        }
        planner.plan_fft_inverse(n).process(&mut data);
        let scale = 1.0 / n as f64;
        data.iter_mut().for_each(|z| *z *= scale);
    }
    Ok(SignalBuffer::complex(
        data,
        signal.sample_rate,
        signal.domain,
    ))
}

pub fn square_law(signal: &SignalBuffer) -> SignalBuffer {
    let out = match &signal.samples {
        Samples::Real(v) => v.iter().map(|x| x * x).collect(),
        Samples::Complex(v) => v.iter().map(|z| z.norm_sqr()).collect(),
    };
    SignalBuffer::real(out, signal.sample_rate, signal.domain)
}

/// Add white Gaussian noise at `snr_db` relative to the buffer's mean square.
/// `f64::INFINITY` means no noise.
pub fn add_awgn<R: Rng + ?Sized>(
    signal: &SignalBuffer,
    snr_db: f64,
    rng: &mut R,
) -> Result<SignalBuffer> {
    let x = signal.as_real()?;
    if !signal.is_finite() {
        return Err(Error::Input("non-finite samples".into()));
    }
    if snr_db == f64::INFINITY || x.is_empty() {
        return Ok(signal.clone());
    }
    let power = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let out = x
        .iter()
        .map(|&v| {
            let n: f64 = StandardNormal.sample(rng);
            v + sigma * n
        })
        .collect();
    Ok(SignalBuffer::real(out, signal.sample_rate, signal.domain))
}

#[derive(Clone, Debug)]
pub struct LinkOutput {
    pub classes: Vec<usize>,
    pub symbols: Vec<f64>,
    /// Received samples at one sample per symbol, aligned with `symbols`.
    pub y: SignalBuffer,
}

/// Run the full transmit/fiber/receive chain.
pub fn simulate_link<R: Rng + ?Sized>(
    tx_bits: &[u8],
    cfg: &ChannelConfig,
    snr_db: f64,
    rng: &mut R,
) -> Result<LinkOutput> {
    cfg.validate()?;
    let alphabet = PamAlphabet::sqrt_levels(cfg.modulation_bits);
    let classes = bits_to_classes(tx_bits, &alphabet)?;
    let symbols: Vec<f64> = classes.iter().map(|&k| alphabet.amplitudes[k]).collect();
    let n_sym = symbols.len();
    if n_sym == 0 {
        return Err(Error::InputShape("no symbols to transmit".into()));
    }
    let sps = cfg.sps;
    let taps = rrc_taps(cfg.rolloff, cfg.rrc_span, sps);
    let fs = cfg.sample_rate();

    let shaped = convolve(&upsample(&symbols, sps), &taps);
    // zero guard so the circular CD kernel does not wrap payload onto itself
    let guard = taps.len();
    let mut padded = vec![0.0; shaped.len() + 2 * guard];
    padded[guard..guard + shaped.len()].copy_from_slice(&shaped);
    let dispersed =
        chromatic_dispersion(&SignalBuffer::real(padded, fs, Domain::Oversampled), cfg)?;
    let window = match dispersed.samples {
        Samples::Complex(v) => v[guard..guard + shaped.len()].to_vec(),
        Samples::Real(_) => unreachable!("dispersion yields complex samples"),
    };
    let detected = square_law(&SignalBuffer::complex(window, fs, Domain::Oversampled));
    let noisy = add_awgn(&detected, cfg.sample_snr_db(snr_db), rng)?;
    let filtered = convolve(noisy.as_real()?, &taps);
    let delay = taps.len() - 1;
    let y: Vec<f64> = (0..n_sym).map(|k| filtered[delay + k * sps]).collect();
    Ok(LinkOutput {
        classes,
        symbols,
        y: SignalBuffer::real(y, cfg.baud_rate_gbd * 1e9, Domain::SymbolRate),
    })
}

pub fn random_bits<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<u8> {
    (0..count).map(|_| rng.random_range(0..2u8)).collect()
}

/// Simulate `n_symbols` random symbols through the link.
pub fn random_link<R: Rng + ?Sized>(
    n_symbols: usize,
    cfg: &ChannelConfig,
    snr_db: f64,
    rng: &mut R,
) -> Result<LinkOutput> {
    let bits = random_bits(n_symbols * cfg.modulation_bits as usize, rng);
    simulate_link(&bits, cfg, snr_db, rng)
}
