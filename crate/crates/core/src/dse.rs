//! Design-space exploration over (n_tap, N_H, T, bits): trial runner, grid
//! and random search with JSON-lines persistence, and Pareto extraction.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::equalizer::{FloatForward, TopologyConfig};
use crate::error::{Error, Result};
use crate::fxp::{convert, ConvertSpec, FxpDecider};
use crate::harness::{evaluate_ber, BerCurve, EvalConfig, EvalMode};
use crate::seed::{derive_seed, rng_for};
use crate::train::{train, QatConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrialConfig {
    pub n_tap: usize,
    pub n_hidden: usize,
    pub time_steps: usize,
    /// Weight/state width; `None` is a float model.
    pub bits: Option<u32>,
}

impl TrialConfig {
    pub fn topology(&self) -> TopologyConfig {
        TopologyConfig::new(self.n_tap, self.n_hidden, self.time_steps)
    }

    pub fn label(&self) -> String {
        let bits = self.bits.map_or("float".to_string(), |b| b.to_string());
        format!(
            "{}/{}/{}/{bits}",
            self.n_tap, self.n_hidden, self.time_steps
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DseSpace {
    pub n_tap: Vec<usize>,
    pub n_hidden: Vec<usize>,
    pub time_steps: Vec<usize>,
    pub bits: Vec<Option<u32>>,
}

impl Default for DseSpace {
    fn default() -> Self {
        Self {
            n_tap: (3..=41).step_by(2).collect(),
            n_hidden: (1..=80).collect(),
            time_steps: (1..=10).collect(),
            bits: vec![None],
        }
    }
}

impl DseSpace {
    pub fn validate(&self) -> Result<()> {
        if self.n_tap.is_empty()
            || self.n_hidden.is_empty()
            || self.time_steps.is_empty()
            || self.bits.is_empty()
        {
            return Err(Error::Parameter("design space has an empty axis".into()));
        }
        for c in self.grid() {
            c.topology().validate()?;
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.n_tap.len() * self.n_hidden.len() * self.time_steps.len() * self.bits.len()
    }

    /// Lexicographic enumeration in axis order.
    pub fn grid(&self) -> Vec<TrialConfig> {
        let mut out = Vec::with_capacity(self.size());
        for &n_tap in &self.n_tap {
            for &n_hidden in &self.n_hidden {
                for &time_steps in &self.time_steps {
                    for &bits in &self.bits {
                        out.push(TrialConfig {
                            n_tap,
                            n_hidden,
                            time_steps,
                            bits,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Grid,
    Random,
}

/// Trial configurations a search visits, in visiting order.
pub fn select_configs(
    space: &DseSpace,
    strategy: Strategy,
    budget: usize,
    seed: u64,
) -> Result<Vec<TrialConfig>> {
    space.validate()?;
    if budget == 0 {
        return Err(Error::Parameter("budget must be >= 1".into()));
    }
    if budget > space.size() {
        return Err(Error::Parameter(format!(
            "budget {budget} exceeds the {} points of the space",
            space.size()
        )));
    }
    let mut all = space.grid();
    if strategy == Strategy::Random {
        all.shuffle(&mut rng_for(seed, "dse/order"));
    }
    all.truncate(budget);
    Ok(all)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialScale {
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for TrialScale {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 2,
                batches_per_epoch: 200,
                ..TrainConfig::default()
            },
            eval: EvalConfig {
                symbols_per_snr: 20_000,
                ..EvalConfig::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub config: TrialConfig,
    pub mac: u64,
    pub ber: Option<BerCurve>,
    pub seed: u64,
    pub wall_time_s: f64,
    pub status: TrialStatus,
    #[serde(default)]
    pub error: Option<String>,
}

impl TrialResult {
    /// BER at `snr_db`, if evaluated.
    pub fn ber_at(&self, snr_db: f64) -> Option<f64> {
        self.ber.as_ref()?.at(snr_db).map(|p| p.ber)
    }

    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &TrialResult) -> bool {
        TrialResult {
            wall_time_s: 0.0,
            ..self.clone()
        } == TrialResult {
            wall_time_s: 0.0,
            ..other.clone()
        }
    }
}

/// Per-trial seed, independent of visiting order.
pub fn trial_seed(master: u64, config: &TrialConfig) -> u64 {
    derive_seed(master, &format!("dse/trial/{}", config.label()))
}

/// Train at the scale's training SNR and evaluate over its SNR list.
/// Divergence and fixed-point overflow produce a failed result.
pub fn run_trial(
    config: &TrialConfig,
    channel: &ChannelConfig,
    scale: &TrialScale,
    seed: u64,
) -> Result<TrialResult> {
    let topo = config.topology();
    topo.validate()?;
    let start = Instant::now();
    let mut train_cfg = scale.train.clone();
    train_cfg.seed = seed;
    train_cfg.qat = config.bits.map(|b| QatConfig {
        weight_bits: b,
        state_bits: b,
    });
    let eval = EvalConfig {
        seed,
        ..scale.eval.clone()
    };
    let outcome = (|| -> Result<BerCurve> {
        let (model, _) = train(channel, &topo, &train_cfg)?;
        match config.bits {
            None => evaluate_ber(
                &FloatForward::new(&model),
                channel,
                &eval,
                EvalMode::Feedback,
            ),
            Some(b) => {
                let fxp = convert(&model, &ConvertSpec::bits(b))?.model;
                evaluate_ber(&FxpDecider::new(&fxp)?, channel, &eval, EvalMode::Feedback)
            }
        }
    })();
    let (ber, status, error) = match outcome {
        Ok(curve) => (Some(curve), TrialStatus::Ok, None),
        Err(e @ (Error::Divergence { .. } | Error::Conversion(_))) => {
            (None, TrialStatus::Failed, Some(e.to_string()))
        }
        Err(e) => return Err(e),
    };
    Ok(TrialResult {
        config: *config,
        mac: topo.mac(),
        ber,
        seed,
        wall_time_s: start.elapsed().as_secs_f64(),
        status,
        error,
    })
}

pub fn read_results(path: &Path) -> Result<Vec<TrialResult>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), k + 1)))?,
        );
    }
    Ok(out)
}

pub fn append_result(path: &Path, result: &TrialResult) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(result)?)?;
    f.flush()?;
    Ok(())
}

/// Visit `configs` in order, running each through `runner` with its derived
/// seed and appending it to `results` immediately. With `resume`, configs
/// already in the file are skipped and their stored results returned.
pub fn search_with<F>(
    configs: &[TrialConfig],
    master_seed: u64,
    results: Option<&Path>,
    resume: bool,
    mut runner: F,
) -> Result<Vec<TrialResult>>
where
    F: FnMut(&TrialConfig, u64) -> Result<TrialResult>,
{
    let previous = match (results, resume) {
        (Some(p), true) => read_results(p)?,
        (Some(p), false) if p.exists() => {
            return Err(Error::Config(format!(
                "{} exists; pass resume to continue it",
                p.display()
            )));
        }
        _ => Vec::new(),
    };
    let done: HashSet<TrialConfig> = previous.iter().map(|r| r.config).collect();
    let mut out = Vec::with_capacity(configs.len());
    for c in configs {
        if done.contains(c) {
            out.push(
                previous
                    .iter()
                    .find(|r| r.config == *c)
                    .expect("present")
                    .clone(),
            );
            continue;
        }
        let r = runner(c, trial_seed(master_seed, c))?;
        if let Some(p) = results {
            append_result(p, &r)?;
        }
        out.push(r);
    }
    Ok(out)
}

pub fn search(
    space: &DseSpace,
    strategy: Strategy,
    budget: usize,
    master_seed: u64,
    channel: &ChannelConfig,
    scale: &TrialScale,
    results: Option<&Path>,
    resume: bool,
) -> Result<Vec<TrialResult>> {
    let configs = select_configs(space, strategy, budget, master_seed)?;
    search_with(&configs, master_seed, results, resume, |c, seed| {
        run_trial(c, channel, scale, seed)
    })
}

/// Non-dominated trials under minimize(mac, ber at `snr_db`), ordered by mac
/// then BER, otherwise in input order. Trials tied on both axes are all kept.
pub fn pareto_front(trials: &[TrialResult], snr_db: f64) -> Result<Vec<TrialResult>> {
    if trials.is_empty() {
        return Err(Error::Input("no trials".into()));
    }
    let mut points = Vec::with_capacity(trials.len());
    for (k, t) in trials.iter().enumerate() {
        let ber = t.ber_at(snr_db).ok_or_else(|| {
            Error::Input(format!(
                "trial {} has no BER at {snr_db} dB",
                t.config.label()
            ))
        })?;
        points.push((t.mac, ber, k));
    }
    points.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut front = Vec::new();
    let mut best = f64::INFINITY;
    let mut g = 0;
    while g < points.len() {
        let mac = points[g].0;
        let group_min = points[g].1;
        let mut end = g;
        while end < points.len() && points[end].0 == mac {
            end += 1;
        }
        if group_min < best {
            for p in &points[g..end] {
                if p.1 == group_min {
                    front.push(trials[p.2].clone());
                }
            }
            best = group_min;
        }
        g = end;
    }
    Ok(front)
}

/// Per-SNR (mac, ber) table of every successful trial with its front flag.
pub fn write_table_csv<W: Write>(trials: &[TrialResult], snrs: &[f64], mut out: W) -> Result<()> {
    writeln!(out, "snr_db,n_tap,n_hidden,time_steps,bits,mac,ber,pareto")?;
    let ok: Vec<TrialResult> = trials
        .iter()
        .filter(|t| t.status == TrialStatus::Ok)
        .cloned()
        .collect();
    for &snr in snrs {
        let usable: Vec<TrialResult> = ok
            .iter()
            .filter(|t| t.ber_at(snr).is_some())
            .cloned()
            .collect();
        if usable.is_empty() {
            continue;
        }
        let front: HashSet<TrialConfig> = pareto_front(&usable, snr)?
            .iter()
            .map(|t| t.config)
            .collect();
        for t in &usable {
            let c = &t.config;
            let bits = c.bits.map_or("float".to_string(), |b| b.to_string());
            writeln!(
                out,
                "{snr},{},{},{},{bits},{},{:e},{}",
                c.n_tap,
                c.n_hidden,
                c.time_steps,
                t.mac,
                t.ber_at(snr).expect("filtered"),
                front.contains(c)
            )?;
        }
    }
    Ok(())
}
