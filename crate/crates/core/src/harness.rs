//! Experiment configuration, Monte-Carlo BER evaluation, the hard-decision
//! baseline and output writers.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{random_link, ChannelConfig, LinkOutput, PamAlphabet};
use crate::equalizer::{equalize_stream, FeedbackMode, SymbolDecider, TopologyConfig};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::train::TrainConfig;

/// Smallest symbol count per SNR accepted in an experiment config.
pub const MIN_EVAL_SYMBOLS: usize = 10_000;
/// BER points with fewer errors are flagged unreliable.
pub const MIN_RELIABLE_ERRORS: u64 = 10;
/// Symbols dropped from the start of every evaluated stream.
pub const BASE_WARMUP: usize = 64;

pub fn default_snrs() -> Vec<f64> {
    (12..=21).map(f64::from).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub snr_db: Vec<f64>,
    pub symbols_per_snr: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            snr_db: default_snrs(),
            symbols_per_snr: 100_000,
            seed: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_empty() {
            return Err(Error::Config("eval.snr_db must not be empty".into()));
        }
        if self
            .snr_db
            .iter()
            .any(|s| s.is_nan() || *s == f64::NEG_INFINITY)
        {
            return Err(Error::Config("eval.snr_db must be a number or +inf".into()));
        }
        if self.symbols_per_snr == 0 {
            return Err(Error::Config("eval.symbols_per_snr must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub channel: ChannelConfig,
    pub topology: TopologyConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.topology.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.eval.symbols_per_snr < MIN_EVAL_SYMBOLS {
            return Err(Error::Config(format!(
                "eval.symbols_per_snr {} is below the reporting floor {MIN_EVAL_SYMBOLS}",
                self.eval.symbols_per_snr
            )));
        }
        if self.channel.modulation_bits != self.topology.m {
            return Err(Error::Config(
                "channel.modulation_bits and topology.m differ".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(
            serde_json::to_vec(self).expect("config serializes"),
        ))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerPoint {
    pub snr_db: f64,
    pub bit_errors: u64,
    pub bits_counted: u64,
    pub ber: f64,
    pub unreliable: bool,
}

impl BerPoint {
    pub fn new(snr_db: f64, bit_errors: u64, bits_counted: u64) -> Self {
        Self {
            snr_db,
            bit_errors,
            bits_counted,
            ber: bit_errors as f64 / bits_counted as f64,
            unreliable: bit_errors < MIN_RELIABLE_ERRORS,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BerCurve {
    pub points: Vec<BerPoint>,
}

impl BerCurve {
    pub fn at(&self, snr_db: f64) -> Option<&BerPoint> {
        self.points.iter().find(|p| p.snr_db == snr_db)
    }
}

/// Symbols skipped before counting, for a window half-width of `half`.
pub fn warmup_symbols(half: usize) -> usize {
    BASE_WARMUP.max(2 * half)
}

/// Label of the channel stream evaluated at `snr_db`.
pub fn eval_stream_label(snr_db: f64) -> String {
    format!("eval/snr/{snr_db}")
}

/// Bit errors between two class sequences under the Gray labelling.
pub fn count_bit_errors(decided: &[usize], truth: &[usize], alphabet: &PamAlphabet) -> u64 {
    decided
        .iter()
        .zip(truth)
        .map(|(&a, &b)| alphabet.bit_distance(a, b) as u64)
        .sum()
}

/// Evaluate a stream equalizer at every SNR of `eval`.
///
/// Each SNR draws `warmup + symbols_per_snr` fresh symbols from its own
/// derived stream; `equalize` returns one decision per symbol index
/// `warmup..`. Results are ordered by the SNR list.
pub fn evaluate_decisions<F>(
    channel: &ChannelConfig,
    eval: &EvalConfig,
    warmup: usize,
    equalize: F,
) -> Result<BerCurve>
where
    F: Fn(&LinkOutput, f64) -> Result<Vec<usize>> + Sync,
{
    channel.validate()?;
    eval.validate()?;
    let alphabet = PamAlphabet::sqrt_levels(channel.modulation_bits);
    let points = eval
        .snr_db
        .par_iter()
        .map(|&snr| {
            let mut rng = rng_for(eval.seed, &eval_stream_label(snr));
            let link = random_link(warmup + eval.symbols_per_snr, channel, snr, &mut rng)?;
            let decided = equalize(&link, snr)?;
            let truth = &link.classes[warmup..];
            if decided.len() != truth.len() {
                return Err(Error::InputShape(format!(
                    "{} decisions for {} symbols",
                    decided.len(),
                    truth.len()
                )));
            }
            let errors = count_bit_errors(&decided, truth, &alphabet);
            Ok(BerPoint::new(
                snr,
                errors,
                (truth.len() * channel.modulation_bits as usize) as u64,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BerCurve { points })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Feedback,
    Genie,
}

/// Closed-loop (or genie) BER of `decider`. Validation happens before any
/// simulation.
pub fn evaluate_ber<D: SymbolDecider + Sync + ?Sized>(
    decider: &D,
    channel: &ChannelConfig,
    eval: &EvalConfig,
    mode: EvalMode,
) -> Result<BerCurve> {
    let topo = *decider.topology();
    topo.validate()?;
    channel.validate()?;
    eval.validate()?;
    if topo.m != channel.modulation_bits {
        return Err(Error::Parameter(format!(
            "model expects m = {}, channel has m = {}",
            topo.m, channel.modulation_bits
        )));
    }
    let half = topo.half();
    let warmup = warmup_symbols(half);
    evaluate_decisions(channel, eval, warmup, |link, _| {
        let y = link.y.as_real()?;
        let fb = match mode {
            EvalMode::Feedback => FeedbackMode::Feedback,
            EvalMode::Genie => FeedbackMode::Genie(&link.classes),
        };
        let decided = equalize_stream(y, decider, fb)?;
        Ok(decided[warmup - half..].to_vec())
    })
}

/// Per-class centroids fitted on a pilot block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Centroids {
    pub values: Vec<f64>,
}

impl Centroids {
    pub fn fit(y: &[f64], classes: &[usize], n_classes: usize) -> Result<Self> {
        if y.len() != classes.len() {
            return Err(Error::InputShape(
                "pilot samples and labels differ in length".into(),
            ));
        }
        if y.len() < 4 * n_classes {
            return Err(Error::Calibration(format!(
                "pilot of {} symbols is shorter than {}",
                y.len(),
                4 * n_classes
            )));
        }
        let mut sum = vec![0.0; n_classes];
        let mut count = vec![0usize; n_classes];
        for (&v, &c) in y.iter().zip(classes) {
            if c >= n_classes {
                return Err(Error::Input(format!("pilot class {c} out of range")));
            }
            sum[c] += v;
            count[c] += 1;
        }
        if let Some(c) = count.iter().position(|&n| n == 0) {
            return Err(Error::Calibration(format!(
                "pilot has no symbol of class {c}"
            )));
        }
        Ok(Self {
            values: sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect(),
        })
    }
}

/// Minimum-distance decision against fitted centroids.
pub fn baseline_hard_decision(y: &[f64], centroids: &Centroids) -> Vec<usize> {
    y.iter()
        .map(|&v| {
            let mut best = 0;
            for (k, c) in centroids.values.iter().enumerate().skip(1) {
                if (v - c).abs() < (v - centroids.values[best]).abs() {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub const DEFAULT_PILOT_SYMBOLS: usize = 4096;

/// Hard-decision baseline over the same streams and counting window as a
/// model with window half-width `half`. Centroids come from a separate pilot
/// block per SNR.
pub fn evaluate_baseline(
    channel: &ChannelConfig,
    eval: &EvalConfig,
    half: usize,
    pilot_symbols: usize,
) -> Result<BerCurve> {
    let n_classes = 1usize << channel.modulation_bits;
    if pilot_symbols < 4 * n_classes {
        return Err(Error::Calibration(format!(
            "pilot of {pilot_symbols} symbols is shorter than {}",
            4 * n_classes
        )));
    }
    let warmup = warmup_symbols(half);
    evaluate_decisions(channel, eval, warmup, |link, snr| {
        let mut rng = rng_for(eval.seed, &format!("eval/pilot/{snr}"));
        let pilot = random_link(pilot_symbols, channel, snr, &mut rng)?;
        let centroids = Centroids::fit(pilot.y.as_real()?, &pilot.classes, n_classes)?;
        Ok(baseline_hard_decision(
            &link.y.as_real()?[warmup..],
            &centroids,
        ))
    })
}

/// Write labelled curves as `model,snr_db,bit_errors,bits_counted,ber,unreliable`.
pub fn write_curves_csv<W: Write>(curves: &[(&str, &BerCurve)], mut out: W) -> Result<()> {
    writeln!(out, "model,snr_db,bit_errors,bits_counted,ber,unreliable")?;
    for (label, curve) in curves {
        for p in &curve.points {
            writeln!(
                out,
                "{label},{},{},{},{:e},{}",
                p.snr_db, p.bit_errors, p.bits_counted, p.ber, p.unreliable
            )?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub snr_db: f64,
    pub ber_a: f64,
    pub ber_b: f64,
    /// `(ber_b - ber_a) / ber_a`.
    pub relative_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// Arithmetic mean of the per-SNR relative gaps.
    pub mean_relative_gap: f64,
    /// `exp(mean(ln(ber_b / ber_a))) - 1`.
    pub log_mean_gap: f64,
}

/// Pair two curves on their common SNRs. Points where either BER is zero are
/// listed but left out of both averages.
pub fn compare_curves(a: &BerCurve, b: &BerCurve) -> Comparison {
    let rows: Vec<ComparisonRow> = a
        .points
        .iter()
        .filter_map(|pa| {
            b.at(pa.snr_db).map(|pb| ComparisonRow {
                snr_db: pa.snr_db,
                ber_a: pa.ber,
                ber_b: pb.ber,
                relative_gap: (pb.ber - pa.ber) / pa.ber,
            })
        })
        .collect();
    let usable: Vec<&ComparisonRow> = rows
        .iter()
        .filter(|r| r.ber_a > 0.0 && r.ber_b > 0.0)
        .collect();
    let n = usable.len() as f64;
    let (mean_relative_gap, log_mean_gap) = if usable.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (
            usable.iter().map(|r| r.relative_gap).sum::<f64>() / n,
            (usable.iter().map(|r| (r.ber_b / r.ber_a).ln()).sum::<f64>() / n).exp() - 1.0,
        )
    };
    Comparison {
        rows,
        mean_relative_gap,
        log_mean_gap,
    }
}

pub fn write_comparison_csv<W: Write>(
    cmp: &Comparison,
    names: (&str, &str),
    mut out: W,
) -> Result<()> {
    writeln!(out, "snr_db,ber_{},ber_{},relative_gap", names.0, names.1)?;
    for r in &cmp.rows {
        writeln!(
            out,
            "{},{:e},{:e},{}",
            r.snr_db, r.ber_a, r.ber_b, r.relative_gap
        )?;
    }
    writeln!(out, "mean_relative_gap,,,{}", cmp.mean_relative_gap)?;
    writeln!(out, "log_mean_gap,,,{}", cmp.log_mean_gap)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig, seed: u64) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: config.hash(),
            seed,
            config: config.clone(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
