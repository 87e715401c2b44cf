//! `fedcast` command line: generate, analyze, train, evaluate, bandwidth.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{Algorithm, RunConfig};
use crate::data::{
    build_client_datasets, correlation_report, ingest_client_files, synth_clients, write_client_files,
    ClientDataset, RawSeries, SplitKind, STATIC_FEATURES, TIMEVARYING_FEATURES,
};
use crate::error::{Error, Result};
use crate::federation::{
    bandwidth_report, make_clients, run_fl, run_nofl, run_plfl, RoundReport, SimOptions,
};
use crate::metrics::{client_forecasts, evaluate, EvalReport, TrainedModel};
use crate::model::{LayerPartition, ParamSet, PartitionId};

#[derive(Parser)]
#[command(
    name = "fedcast",
    version,
    about = "Simulate federated training of LSTM load forecasters with personalization layers"
)]
struct Cli {
    /// Run configuration file (TOML); defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override one config value (repeatable), e.g. --set training.seed=7
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Output directory; overrides the config and FEDCAST_OUT.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic client CSVs with their JSON sidecars.
    Generate,
    /// Correlate features with energy consumption and write the table.
    Analyze,
    /// Train with the configured algorithm; writes checkpoints, a JSON-lines
    /// history and the bandwidth report.
    Train,
    /// Evaluate a checkpoint: per-client metrics, summary and forecast dumps.
    Evaluate {
        /// Checkpoint file (defaults to <out>/checkpoint.fck).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Split to evaluate: test or val.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Print the per-epoch exchange volume for every partition.
    Bandwidth,
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let config = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    let out_dir = config.output_dir(cli.out.as_deref());
    match cli.command {
        Command::Generate => cmd_generate(&config, &out_dir),
        Command::Analyze => cmd_analyze(&config, &out_dir),
        Command::Train => cmd_train(&config, &out_dir),
        Command::Evaluate { checkpoint, split } => {
            let split = match split.as_str() {
                "test" => SplitKind::Test,
                "val" => SplitKind::Val,
                other => {
                    return Err(Error::Config {
                        field: "split".into(),
                        msg: format!("expected `test` or `val`, got `{other}`"),
                    })
                }
            };
            cmd_evaluate(&config, &out_dir, checkpoint.as_deref(), split)
        }
        Command::Bandwidth => cmd_bandwidth(&config, &out_dir),
    }
}

fn load_series(config: &RunConfig) -> Result<Vec<RawSeries>> {
    match config.data.source {
        crate::config::DataSource::Generate => synth_clients(&config.synth_config()),
        crate::config::DataSource::Csv => config
            .data
            .csv_paths
            .iter()
            .map(|p| ingest_client_files(p))
            .collect(),
    }
}

fn load_datasets(config: &RunConfig) -> Result<Vec<ClientDataset>> {
    let series = load_series(config)?;
    build_client_datasets(
        &series,
        config.model.lookback,
        config.scaler_scope(),
        config.split_order(),
    )
}

fn cmd_generate(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let series = synth_clients(&config.synth_config())?;
    let data_dir = out_dir.join("data");
    for s in &series {
        let (csv, sidecar) = write_client_files(s, &data_dir)?;
        println!("wrote {} ({} rows) + {}", csv.display(), s.len(), sidecar.display());
    }
    Ok(())
}

fn cmd_analyze(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let series = load_series(config)?;
    let report = correlation_report(&series, &STATIC_FEATURES, &TIMEVARYING_FEATURES)?;

    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("correlations.csv");
    let mut file = std::fs::File::create(&path)?;
    writeln!(file, "kind,feature,correlation")?;
    let fmt = |v: &Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
    for e in &report.static_features {
        writeln!(file, "static,{},{}", e.feature, fmt(&e.value))?;
    }
    for e in &report.timevarying_features {
        writeln!(file, "timevarying,{},{}", e.feature, fmt(&e.value))?;
    }

    for e in report.static_features.iter().chain(&report.timevarying_features) {
        match e.value {
            Some(v) => println!("{:<14} {v:+.4}", e.feature),
            None => println!("{:<14} (undefined: degenerate variance)", e.feature),
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    client_id: usize,
    train_loss: f64,
    params_sent: usize,
    params_received: usize,
}

fn write_history(path: &Path, history: &[RoundReport]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for round in history {
        for c in &round.clients {
            let row = HistoryRow {
                epoch: round.epoch,
                client_id: c.client_id,
                train_loss: c.train_loss,
                params_sent: c.params_sent,
                params_received: c.params_received,
            };
            serde_json::to_writer(&mut file, &row)?;
            file.write_all(b"\n")?;
        }
    }
    Ok(())
}

fn write_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    let file = std::fs::File::create(path)?;
    params.write_checkpoint(std::io::BufWriter::new(file))
}

fn read_checkpoint(path: &Path) -> Result<ParamSet> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Data(format!("cannot open checkpoint {}: {e}", path.display()))
    })?;
    ParamSet::read_checkpoint(std::io::BufReader::new(file))
}

fn psi_path(out_dir: &Path, client_id: usize) -> PathBuf {
    out_dir.join(format!("psi_client_{client_id}.fck"))
}

fn cmd_train(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let datasets = load_datasets(config)?;
    let mut clients = make_clients(datasets);
    let hp = config.hyperparams();
    let opts = SimOptions {
        workers: config.training.workers,
        resample_per_client_epoch: config.flags.resample_per_client_epoch,
        initial_weights: None,
    };
    std::fs::create_dir_all(out_dir)?;
    let checkpoint = out_dir.join("checkpoint.fck");
    let history_path = out_dir.join("history.jsonl");
    let seed = config.training.seed;

    match config.training.algorithm {
        Algorithm::Fl => {
            let out = run_fl(
                &mut clients,
                &config.model,
                &hp,
                config.training.server_algo,
                &opts,
                seed,
            )?;
            write_checkpoint(&checkpoint, &out.weights)?;
            write_history(&history_path, &out.history)?;
            let report = bandwidth_report(&LayerPartition::new(PartitionId::Fl, &config.model));
            write_bandwidth(out_dir, std::slice::from_ref(&report))?;
            println!(
                "fl: {} epochs x {} clients, {} params/epoch/client exchanged",
                hp.server_epochs,
                clients.len(),
                report.params_per_epoch
            );
        }
        Algorithm::Plfl => {
            let partition_id = config.training.partition;
            let out = run_plfl(
                &mut clients,
                &config.model,
                &hp,
                config.training.server_algo,
                partition_id,
                &opts,
                seed,
            )?;
            write_checkpoint(&checkpoint, &out.shared)?;
            for (id, psi) in out.personalized.iter().enumerate() {
                write_checkpoint(&psi_path(out_dir, id), psi)?;
            }
            write_history(&history_path, &out.history)?;
            let report = bandwidth_report(&LayerPartition::new(partition_id, &config.model));
            write_bandwidth(out_dir, std::slice::from_ref(&report))?;
            println!(
                "plfl {partition_id}: {} epochs x {} clients, {} params/epoch/client exchanged",
                hp.server_epochs,
                clients.len(),
                report.params_per_epoch
            );
        }
        Algorithm::NoFl => {
            let out = run_nofl(
                &clients,
                &config.model,
                config.training.nofl_epochs,
                config.training.nofl_lr,
                config.model.batch_size,
                seed,
            )?;
            write_checkpoint(&checkpoint, &out.weights)?;
            let mut file = std::fs::File::create(&history_path)?;
            for (i, loss) in out.epoch_losses.iter().enumerate() {
                let row = HistoryRow {
                    epoch: i + 1,
                    client_id: 0,
                    train_loss: *loss,
                    params_sent: 0,
                    params_received: 0,
                };
                serde_json::to_writer(&mut file, &row)?;
                file.write_all(b"\n")?;
            }
            println!(
                "nofl: {} epochs on {} pooled windows",
                config.training.nofl_epochs,
                clients.iter().map(|c| c.dataset.train.len()).sum::<usize>()
            );
        }
    }
    println!("wrote {}", checkpoint.display());
    println!("wrote {}", history_path.display());
    Ok(())
}

fn write_bandwidth(out_dir: &Path, reports: &[crate::federation::BandwidthReport]) -> Result<()> {
    let path = out_dir.join("bandwidth.json");
    serde_json::to_writer_pretty(std::fs::File::create(&path)?, reports)?;
    Ok(())
}

fn expect_names(params: &ParamSet, expected: Vec<String>, what: &str) -> Result<()> {
    let got: Vec<String> = params.names().cloned().collect();
    if got != expected {
        return Err(Error::CheckpointMismatch(format!(
            "{what}: parameter names do not match the configured model/partition"
        )));
    }
    Ok(())
}

fn cmd_evaluate(
    config: &RunConfig,
    out_dir: &Path,
    checkpoint: Option<&Path>,
    split: SplitKind,
) -> Result<()> {
    let datasets = load_datasets(config)?;
    let default_ckpt = out_dir.join("checkpoint.fck");
    let ckpt_path = checkpoint.unwrap_or(&default_ckpt);
    let main = read_checkpoint(ckpt_path)?;
    let mode = config.mase_mode();
    let algo = config.training.algorithm.label();

    let report: EvalReport;
    let mut forecast_sets: Vec<(String, crate::metrics::ForecastSeries)> = Vec::new();
    match config.training.algorithm {
        Algorithm::Fl | Algorithm::NoFl => {
            expect_names(&main, config.model.param_names(), "checkpoint")?;
            report = evaluate(
                &TrainedModel::Global(&main),
                &datasets,
                &config.model,
                split,
                mode,
                algo,
            )?;
            for d in &datasets {
                forecast_sets.push((
                    d.client_id.clone(),
                    client_forecasts(&main, &config.model, d, split)?,
                ));
            }
        }
        Algorithm::Plfl => {
            let partition = LayerPartition::new(config.training.partition, &config.model);
            expect_names(
                &main,
                partition.shared_names().cloned().collect(),
                "shared checkpoint",
            )?;
            let ckpt_dir = ckpt_path.parent().unwrap_or(out_dir);
            let mut psis = Vec::with_capacity(datasets.len());
            for id in 0..datasets.len() {
                let p = psi_path(ckpt_dir, id);
                let psi = read_checkpoint(&p).map_err(|_| {
                    Error::CheckpointMismatch(format!(
                        "missing personalized weights {} for partition {}",
                        p.display(),
                        partition.id
                    ))
                })?;
                let expected: Vec<String> = partition
                    .param_order()
                    .iter()
                    .filter(|n| partition.is_personalized(n))
                    .cloned()
                    .collect();
                expect_names(&psi, expected, "personalized checkpoint")?;
                psis.push(psi);
            }
            report = evaluate(
                &TrainedModel::Personalized {
                    shared: &main,
                    per_client: &psis,
                    partition: &partition,
                },
                &datasets,
                &config.model,
                split,
                mode,
                algo,
            )?;
            for (i, d) in datasets.iter().enumerate() {
                let full = partition.merge(&main, &psis[i])?;
                forecast_sets.push((
                    d.client_id.clone(),
                    client_forecasts(&full, &config.model, d, split)?,
                ));
            }
        }
    }

    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut file = std::fs::File::create(&metrics_path)?;
    writeln!(file, "client_id,mae,mase")?;
    for c in &report.per_client {
        writeln!(file, "{},{},{}", c.client_id, c.mae, c.mase)?;
    }

    let summary_path = out_dir.join("summary.json");
    serde_json::to_writer_pretty(std::fs::File::create(&summary_path)?, &report)?;

    let forecast_dir = out_dir.join("forecasts");
    std::fs::create_dir_all(&forecast_dir)?;
    for (client_id, series) in &forecast_sets {
        let path = forecast_dir.join(format!("{client_id}.csv"));
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "timestamp,truth,forecast")?;
        for (ts, truth, forecast) in series {
            writeln!(file, "{},{},{}", ts.format("%Y-%m-%dT%H:%M:%S"), truth, forecast)?;
        }
    }

    for c in &report.per_client {
        println!("{:<12} mae {:>12.4}  mase {:>8.4}", c.client_id, c.mae, c.mase);
    }
    println!(
        "average      mae {:>12.4}  mase {:>8.4}",
        report.avg_mae, report.avg_mase
    );
    println!("wrote {} and {}", metrics_path.display(), summary_path.display());
    Ok(())
}

fn cmd_bandwidth(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let reports: Vec<_> = PartitionId::all()
        .iter()
        .map(|&id| bandwidth_report(&LayerPartition::new(id, &config.model)))
        .collect();
    for r in &reports {
        println!(
            "{:<16} {:>8} params/epoch {:>6} kilobits/epoch",
            r.algorithm, r.params_per_epoch, r.kilobits_per_epoch
        );
    }
    std::fs::create_dir_all(out_dir)?;
    write_bandwidth(out_dir, &reports)?;
    println!("wrote {}", out_dir.join("bandwidth.json").display());
    Ok(())
}
