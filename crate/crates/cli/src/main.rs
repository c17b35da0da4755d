//! `pace`: circuit fitting, dataset preparation, training, evaluation,
//! ablations and streaming inference from the command line.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pace_core::dataset::{load_cells, FeatureWindow};
use pace_core::ecm::{write_cycle_fits, ExtractOptions};
use pace_core::fmt::f9;
use pace_core::model::{load_checkpoint, save_checkpoint, ModelConfig};
use pace_core::pipeline::{collection_tables, read_prepared, window_sets, write_prepared, CellTable, WindowSets};
use pace_core::report::write_report;
use pace_core::stream::{stream_infer, StreamOptions};
use pace_core::synth::{generate_fleet, write_fleet, FleetConfig};
use pace_core::train::{
    evaluate, permutation_importance, run_ablation, train, write_history_csv, write_metrics_csv, Importance, RunReport,
    TrainConfig, Variant,
};
use pace_core::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "pace", version, about = "Battery state-of-health forecasting with the PACE model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the circuit model to every cycle and write one row per cycle.
    FitEcm {
        #[command(flatten)]
        common: Common,
    },
    /// Write the per-cycle feature and label table.
    Prepare {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and save its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Also write the per-epoch history here.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Score a checkpoint on the test cells, one CSV row per horizon.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Train the base model and a variant with the same seeds and write both reports.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: TrainOverrides,
        #[arg(long)]
        variant: String,
    },
    /// Permutation importance of each input feature on the test cells.
    Importance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Predict from a stream of samples read from a file or standard input.
    Stream {
        #[arg(long)]
        ckpt: PathBuf,
        /// Sample file; `-` or absent reads standard input.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Prediction file; absent writes standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,30,50")]
        horizons: Vec<usize>,
    },
    /// Turn run reports into comparison, ablation and importance tables.
    Report {
        /// Run report JSON files written by `ablate`.
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        /// Importance JSON written by `importance`.
        #[arg(long)]
        importance: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic fleet with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        cells: Option<usize>,
        #[arg(long)]
        train_cells: Option<usize>,
        #[arg(long)]
        cycles: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// Cell manifest; cycles are fitted on load.
    #[arg(long, required_unless_present = "prepared", conflicts_with = "prepared")]
    manifest: Option<PathBuf>,
    /// Table written by `prepare`, used instead of a manifest.
    #[arg(long)]
    prepared: Option<PathBuf>,
    /// JSON with optional `model`, `train`, `extract` and `fleet` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,30,50")]
    horizons: Vec<usize>,
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Config {
    model: ModelConfig,
    train: TrainConfig,
    extract: ExtractOptions,
    fleet: FleetConfig,
}

fn read_config(path: Option<&Path>) -> Result<Config> {
    let Some(path) = path else {
        return Ok(Config::default());
    };
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl Common {
    fn config(&self) -> Result<Config> {
        let mut cfg = read_config(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.train.seeds = vec![seed];
            cfg.fleet.seed = seed;
        }
        Ok(cfg)
    }

    fn tables(&self, extract: &ExtractOptions) -> Result<Vec<CellTable>> {
        match (&self.manifest, &self.prepared) {
            (_, Some(p)) => read_prepared(p),
            (Some(m), None) => collection_tables(&load_cells(m)?, extract),
            (None, None) => Err(Error::Config("either --manifest or --prepared is required".into())),
        }
    }

    fn windows(&self, cfg: &Config, model: &ModelConfig) -> Result<WindowSets> {
        window_sets(&self.tables(&cfg.extract)?, model.window, model.max_horizon())
    }
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(e) = self.epochs {
            cfg.max_epochs = e;
            cfg.patience = cfg.patience.min(e.saturating_sub(1)).max(1);
        }
        if let Some(p) = self.patience {
            cfg.patience = p;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(Error::io(path))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).and_then(|_| w.flush()).map_err(Error::io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn require_test(sets: &WindowSets) -> Result<&[FeatureWindow]> {
    if sets.test.is_empty() {
        return Err(Error::Input("no test windows: no test cell is long enough for the model window".into()));
    }
    Ok(&sets.test)
}

pub const EVAL_HEADER: &str = "h,rmse,mae,rmse_unclamped,mae_unclamped,eta";

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitEcm { common } => {
            let cfg = common.config()?;
            let m = common.manifest.as_ref().ok_or_else(|| Error::Config("fit-ecm reads a --manifest".into()))?;
            let tables = collection_tables(&load_cells(m)?, &cfg.extract)?;
            let mut w = create(&common.out)?;
            for (k, t) in tables.iter().enumerate() {
                write_cycle_fits(&mut w, &t.cell_id, &t.fits, k == 0).map_err(Error::io(&common.out))?;
            }
            w.flush().map_err(Error::io(&common.out))
        }
        Command::Prepare { common } => {
            let cfg = common.config()?;
            let tables = common.tables(&cfg.extract)?;
            let mut w = create(&common.out)?;
            write_prepared(&mut w, &tables).and_then(|_| w.flush()).map_err(Error::io(&common.out))
        }
        Command::Train { common, overrides, history } => {
            let mut cfg = common.config()?;
            overrides.apply(&mut cfg.train);
            let sets = common.windows(&cfg, &cfg.model)?;
            let seed = cfg.train.seeds[0];
            let columns: Vec<usize> = (0..cfg.model.features).collect();
            let outcome = train(&cfg.model, &columns, &sets.train, &cfg.train, seed)?;
            save_checkpoint(&common.out, &outcome.checkpoint)?;
            if let Some(path) = history {
                let mut w = create(&path)?;
                write_history_csv(&mut w, &outcome.history).and_then(|_| w.flush()).map_err(Error::io(&path))?;
            }
            log::info!("best epoch {} with validation MSE {}", outcome.best_epoch, f9(outcome.best_val_mse));
            Ok(())
        }
        Command::Eval { common, ckpt } => {
            let cfg = common.config()?;
            let ckpt = load_checkpoint(&ckpt)?;
            let sets = common.windows(&cfg, ckpt.model.config())?;
            let m = evaluate(&ckpt, require_test(&sets)?, &common.horizons)?;
            let mut w = create(&common.out)?;
            let io = Error::io(&common.out);
            let mut body = format!("{EVAL_HEADER}\n");
            for h in &m.horizons {
                body.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    h.horizon,
                    f9(h.rmse),
                    f9(h.mae),
                    f9(h.rmse_unclamped),
                    f9(h.mae_unclamped),
                    h.eta.map_or(String::new(), f9)
                ));
            }
            w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(io)
        }
        Command::Ablate { common, overrides, variant } => {
            let variant: Variant = variant.parse()?;
            let mut cfg = common.config()?;
            overrides.apply(&mut cfg.train);
            let sets = common.windows(&cfg, &cfg.model)?;
            let (base, var) =
                run_ablation(&cfg.model, variant, &sets.train, require_test(&sets)?, &cfg.train, &common.horizons)?;
            std::fs::create_dir_all(&common.out).map_err(Error::io(&common.out))?;
            write_json(&common.out.join("base.json"), &base)?;
            write_json(&common.out.join(format!("{variant}.json")), &var)?;
            let path = common.out.join("metrics.csv");
            let mut w = create(&path)?;
            write_metrics_csv(&mut w, &[base, var]).and_then(|_| w.flush()).map_err(Error::io(&path))
        }
        Command::Importance { common, ckpt } => {
            let cfg = common.config()?;
            let ckpt = load_checkpoint(&ckpt)?;
            let sets = common.windows(&cfg, ckpt.model.config())?;
            let imp = permutation_importance(&ckpt, require_test(&sets)?, cfg.train.seeds[0])?;
            write_json(&common.out, &imp)
        }
        Command::Stream { ckpt, input, out, config, horizons } => {
            let cfg = read_config(config.as_deref())?;
            let ckpt = load_checkpoint(&ckpt)?;
            let opts = StreamOptions { extract: cfg.extract, horizons };
            let reader: Box<dyn BufRead> = match input.as_deref() {
                None => Box::new(io::stdin().lock()),
                Some(p) if p.as_os_str() == "-" => Box::new(io::stdin().lock()),
                Some(p) => Box::new(BufReader::new(File::open(p).map_err(Error::io(p))?)),
            };
            let summary = match out.as_deref() {
                Some(p) => stream_infer(&ckpt, reader, create(p)?, &opts)?,
                None => stream_infer(&ckpt, reader, io::stdout().lock(), &opts)?,
            };
            if summary.skipped_lines > 0 {
                log::warn!("{} malformed lines skipped", summary.skipped_lines);
            }
            log::info!("{} cycles, {} predictions", summary.cycles, summary.predictions);
            Ok(())
        }
        Command::Report { reports, importance, out } => {
            let reports: Vec<RunReport> = reports.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
            let importance: Option<Importance> = importance.as_deref().map(read_json).transpose()?;
            write_report(&reports, importance.as_ref(), &out).map(|_| ())
        }
        Command::Synth { out, config, seed, cells, train_cells, cycles } => {
            let mut fleet = read_config(config.as_deref())?.fleet;
            fleet.seed = seed.unwrap_or(fleet.seed);
            fleet.cells = cells.unwrap_or(fleet.cells);
            fleet.train_cells = train_cells.unwrap_or(fleet.train_cells.min(fleet.cells));
            fleet.cycles = cycles.unwrap_or(fleet.cycles);
            let manifest = write_fleet(&generate_fleet(&fleet)?, &out)?;
            log::info!("wrote {}", manifest.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            })
        }
    }
}
