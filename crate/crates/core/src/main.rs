use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use snn_dfe::channel::random_link;
use snn_dfe::dse::{
    pareto_front, search, write_table_csv, DseSpace, Strategy, TrialScale, TrialStatus,
};
use snn_dfe::equalizer::{EqualizerModel, FloatForward};
use snn_dfe::fxp::{convert, ConvertSpec, FxpDecider, FxpModel};
use snn_dfe::harness::{
    compare_curves, evaluate_baseline, evaluate_ber, write_comparison_csv, write_curves_csv,
    EvalMode, ExperimentConfig, Manifest, DEFAULT_PILOT_SYMBOLS,
};
use snn_dfe::lif::{write_trace_csv, DemoTrace};
use snn_dfe::seed::rng_for;
use snn_dfe::train::{train, write_log_csv, QatConfig};
use snn_dfe::Error;

#[derive(Parser)]
#[command(
    name = "snn-dfe",
    version,
    about = "Spiking decision-feedback equalizer testbed"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for training and evaluation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Emit received samples of a random link.
    Simulate {
        #[arg(long, default_value_t = 10_000)]
        symbols: usize,
        #[arg(long, default_value_t = 17.0)]
        snr: f64,
    },
    /// Train an equalizer.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batches_per_epoch: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Quantization-aware training at this weight/state width.
        #[arg(long)]
        qat_bits: Option<u32>,
        #[arg(long, default_value = "model.json")]
        model_out: String,
    },
    /// BER curve of a saved model.
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
        /// The model file holds a fixed-point model.
        #[arg(long)]
        fxp: bool,
        /// Feed back true symbols instead of decisions.
        #[arg(long)]
        genie: bool,
        /// Add the hard-decision baseline curve.
        #[arg(long)]
        baseline: bool,
    },
    /// Design-space sweep.
    Dse {
        #[arg(long, value_enum, default_value_t = StrategyArg::Random)]
        strategy: StrategyArg,
        /// Number of configurations; defaults to the whole grid, or 20 random
        /// points.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        n_tap: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        n_hidden: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        time_steps: Option<Vec<usize>>,
        /// Bit widths; 0 means float.
        #[arg(long, value_delimiter = ',')]
        bits: Option<Vec<u32>>,
        #[arg(long, default_value = "dse.jsonl")]
        results: String,
        /// Continue an existing results file, skipping finished configs.
        #[arg(long)]
        resume: bool,
    },
    /// Convert a model to fixed point and compare BER with its float twin.
    Quantize {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        bits: u32,
        #[arg(long, default_value_t = 32)]
        acc_bits: u32,
    },
    /// Single-neuron trace of the demonstration input pattern.
    LifTrace,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Grid,
    Random,
}

struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn finish(self) -> Result<(), Error> {
        self.manifest.write(&self.out.join("manifest.json"))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(path)?))
}

fn missing(field: &str) -> Error {
    Error::Config(format!("missing required field `{field}`"))
}

fn require_file(path: Option<PathBuf>, field: &str) -> Result<PathBuf, Error> {
    let p = path.ok_or_else(|| missing(field))?;
    if !p.is_file() {
        return Err(Error::Config(format!(
            "`{field}` path {} does not exist",
            p.display()
        )));
    }
    Ok(p)
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.train.seed = s;
        cfg.eval.seed = s;
    }
    if let Some(o) = &cli.common.out {
        cfg.output.dir = o.clone();
    }
    let command = match &cli.command {
        Command::Simulate { .. } => "simulate",
        Command::Train { .. } => "train",
        Command::Evaluate { .. } => "evaluate",
        Command::Dse { .. } => "dse",
        Command::Quantize { .. } => "quantize",
        Command::LifTrace => "lif-trace",
    };
    if let Command::Train {
        epochs,
        batches_per_epoch,
        batch_size,
        lr,
        qat_bits,
        ..
    } = &cli.command
    {
        cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
        cfg.train.batches_per_epoch = batches_per_epoch.unwrap_or(cfg.train.batches_per_epoch);
        cfg.train.batch_size = batch_size.unwrap_or(cfg.train.batch_size);
        cfg.train.learning_rate = lr.unwrap_or(cfg.train.learning_rate);
        if let Some(b) = qat_bits {
            cfg.train.qat = Some(QatConfig {
                weight_bits: *b,
                state_bits: *b,
            });
        }
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output.dir)?;
    let manifest = Manifest::new(command, &cfg, cfg.train.seed);
    let mut r = Run {
        out: cfg.output.dir.clone(),
        cfg,
        manifest,
    };

    match cli.command {
        Command::Simulate { symbols, snr } => {
            let link = random_link(
                symbols,
                &r.cfg.channel,
                snr,
                &mut rng_for(r.cfg.eval.seed, "simulate"),
            )?;
            let y = link.y.as_real()?;
            let mut w = create(&r.path("simulate.csv"))?;
            writeln!(w, "index,class,symbol,y")?;
            for k in 0..symbols {
                writeln!(w, "{k},{},{},{}", link.classes[k], link.symbols[k], y[k])?;
            }
            w.flush()?;
        }
        Command::Train { model_out, .. } => {
            let (model, log) = train(&r.cfg.channel, &r.cfg.topology, &r.cfg.train)?;
            let last = log.last().map_or(f64::NAN, |l| l.loss);
            model.save(&r.path(&model_out))?;
            write_log_csv(&log, create(&r.path("train_log.csv"))?)?;
            println!("trained {} batches, final loss {last:.4}", log.len());
        }
        Command::Evaluate {
            model,
            fxp,
            genie,
            baseline,
        } => {
            let path = require_file(model, "model")?;
            let mode = if genie {
                EvalMode::Genie
            } else {
                EvalMode::Feedback
            };
            let (curve, half) = if fxp {
                let m = FxpModel::load(&path)?;
                let d = FxpDecider::new(&m)?;
                let c = evaluate_ber(&d, &r.cfg.channel, &r.cfg.eval, mode)?;
                let sat = d.counters();
                if sat.accumulator > 0 {
                    eprintln!("warning: {} accumulator saturations", sat.accumulator);
                }
                (c, m.config.half())
            } else {
                let m = EqualizerModel::load(&path)?;
                (
                    evaluate_ber(&FloatForward::new(&m), &r.cfg.channel, &r.cfg.eval, mode)?,
                    m.config.half(),
                )
            };
            let mut curves = vec![("model", &curve)];
            let base;
            if baseline {
                base = evaluate_baseline(&r.cfg.channel, &r.cfg.eval, half, DEFAULT_PILOT_SYMBOLS)?;
                curves.push(("baseline", &base));
            }
            write_curves_csv(&curves, create(&r.path("ber.csv"))?)?;
            write_curves_csv(&curves, std::io::stdout().lock())?;
        }
        Command::Dse {
            strategy,
            budget,
            n_tap,
            n_hidden,
            time_steps,
            bits,
            results,
            resume,
        } => {
            let d = DseSpace::default();
            let space = DseSpace {
                n_tap: n_tap.unwrap_or(d.n_tap),
                n_hidden: n_hidden.unwrap_or(d.n_hidden),
                time_steps: time_steps.unwrap_or(d.time_steps),
                bits: bits.map_or(d.bits, |b| {
                    b.into_iter().map(|x| (x != 0).then_some(x)).collect()
                }),
            };
            let strategy = match strategy {
                StrategyArg::Grid => Strategy::Grid,
                StrategyArg::Random => Strategy::Random,
            };
            let budget = budget.unwrap_or(match strategy {
                Strategy::Grid => space.size(),
                Strategy::Random => space.size().min(20),
            });
            let scale = TrialScale {
                train: r.cfg.train.clone(),
                eval: r.cfg.eval.clone(),
            };
            let results_path = r.path(&results);
            let trials = search(
                &space,
                strategy,
                budget,
                r.cfg.train.seed,
                &r.cfg.channel,
                &scale,
                Some(&results_path),
                resume,
            )?;
            let table = r.path("dse_table.csv");
            write_table_csv(&trials, &r.cfg.eval.snr_db, create(&table)?)?;
            let ok: Vec<_> = trials
                .iter()
                .filter(|t| t.status == TrialStatus::Ok)
                .cloned()
                .collect();
            let failed = trials.len() - ok.len();
            println!("{} trials, {failed} failed", trials.len());
            if let (false, Some(&snr)) = (
                ok.is_empty(),
                r.cfg
                    .eval
                    .snr_db
                    .iter()
                    .find(|&&s| s == r.cfg.train.train_snr_db),
            ) {
                for t in pareto_front(&ok, snr)? {
                    println!(
                        "front @ {snr} dB: {} mac {} ber {:e}",
                        t.config.label(),
                        t.mac,
                        t.ber_at(snr).unwrap_or(f64::NAN)
                    );
                }
            }
        }
        Command::Quantize {
            model,
            bits,
            acc_bits,
        } => {
            let path = require_file(model, "model")?;
            let float = EqualizerModel::load(&path)?;
            let spec = ConvertSpec {
                acc_bits,
                ..ConvertSpec::bits(bits)
            };
            let conv = convert(&float, &spec)?;
            for w in &conv.warnings {
                eprintln!("warning: {w}");
            }
            conv.model.save(&r.path(&format!("model_fxp{bits}.json")))?;
            let float_curve = evaluate_ber(
                &FloatForward::new(&float),
                &r.cfg.channel,
                &r.cfg.eval,
                EvalMode::Feedback,
            )?;
            let decider = FxpDecider::new(&conv.model)?;
            let fxp_curve =
                evaluate_ber(&decider, &r.cfg.channel, &r.cfg.eval, EvalMode::Feedback)?;
            let cmp = compare_curves(&float_curve, &fxp_curve);
            write_comparison_csv(&cmp, ("float", "fxp"), create(&r.path("quantize.csv"))?)?;
            write_comparison_csv(&cmp, ("float", "fxp"), std::io::stdout().lock())?;
            let sat = decider.counters();
            println!(
                "saturations: accumulator {}, state {}",
                sat.accumulator, sat.state
            );
        }
        Command::LifTrace => {
            let unroll = DemoTrace::run();
            write_trace_csv(&unroll.trace, create(&r.path("lif_trace.csv"))?)?;
            let times: Vec<usize> = unroll
                .spikes
                .iter()
                .enumerate()
                .filter(|(_, s)| s[0])
                .map(|(t, _)| t)
                .collect();
            println!("{} output spikes at steps {times:?}", times.len());
        }
    }
    r.finish()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parameter(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
