//! Python bindings: model sizing, bandwidth accounting, the synthetic
//! generator, error metrics, and config-driven training/evaluation.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use fedcast::config::{Algorithm, RunConfig};
use fedcast::data::{build_client_datasets, synth_clients, write_client_files, SplitKind};
use fedcast::federation::{bandwidth_report, make_clients, run_fl, run_nofl, run_plfl, SimOptions};
use fedcast::metrics::{evaluate, MaseMode, TrainedModel};
use fedcast::model::{LayerPartition, ModelConfig, PartitionId};

fn to_py_err(e: fedcast::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_partition(s: &str) -> PyResult<PartitionId> {
    s.parse().map_err(to_py_err)
}

/// Forecaster dimensions; defaults match the reference model.
#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (lookback=12, features=8, hidden1=20, hidden2=20, fc=None, batch_size=64))]
    fn new(
        lookback: usize,
        features: usize,
        hidden1: usize,
        hidden2: usize,
        fc: Option<Vec<usize>>,
        batch_size: usize,
    ) -> PyResult<Self> {
        let fc = match fc {
            Some(v) if v.len() == 4 => [v[0], v[1], v[2], v[3]],
            Some(v) => {
                return Err(PyValueError::new_err(format!(
                    "fc must have 4 sizes, got {}",
                    v.len()
                )))
            }
            None => [lookback * hidden2, 120, 60, 1],
        };
        let inner = ModelConfig {
            lookback,
            features,
            hidden1,
            hidden2,
            fc,
            batch_size,
        };
        inner.validate().map_err(to_py_err)?;
        Ok(PyModelConfig { inner })
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.param_names()
    }

    /// Number of parameters in the shared layers of a partition.
    fn shared_param_count(&self, partition: &str) -> PyResult<usize> {
        let id = parse_partition(partition)?;
        Ok(LayerPartition::new(id, &self.inner).shared_param_count())
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelConfig(lookback={}, features={}, hidden=({}, {}), fc={:?}, batch_size={})",
            self.inner.lookback,
            self.inner.features,
            self.inner.hidden1,
            self.inner.hidden2,
            self.inner.fc,
            self.inner.batch_size
        )
    }
}

/// (parameters, kilobits) exchanged per client per server epoch.
#[pyfunction]
#[pyo3(signature = (partition, config=None))]
fn bandwidth(partition: &str, config: Option<PyModelConfig>) -> PyResult<(u64, u64)> {
    let id = parse_partition(partition)?;
    let cfg = config.map_or_else(ModelConfig::default, |c| c.inner);
    let report = bandwidth_report(&LayerPartition::new(id, &cfg));
    Ok((report.params_per_epoch, report.kilobits_per_epoch))
}

#[pyfunction]
fn mae(truth: Vec<f64>, forecast: Vec<f64>) -> PyResult<f64> {
    fedcast::metrics::mae(&truth, &forecast).map_err(to_py_err)
}

#[pyfunction]
#[pyo3(signature = (truth, forecast, context=None, raw_sum=false))]
fn mase(
    truth: Vec<f64>,
    forecast: Vec<f64>,
    context: Option<f64>,
    raw_sum: bool,
) -> PyResult<f64> {
    let mode = if raw_sum {
        MaseMode::RawSum
    } else {
        MaseMode::Normalized
    };
    match context {
        Some(c) => fedcast::metrics::mase_with_context(c, &truth, &forecast, mode),
        None => fedcast::metrics::mase(&truth, &forecast, mode),
    }
    .map_err(to_py_err)
}

#[pyfunction]
fn pearson(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    fedcast::data::pearson(&a, &b).map_err(to_py_err)
}

/// The default run configuration as a TOML document.
#[pyfunction]
fn default_config() -> PyResult<String> {
    RunConfig::default().to_toml_string().map_err(to_py_err)
}

/// Write synthetic clients in the CSV + JSON sidecar format; returns the
/// CSV paths.
#[pyfunction]
#[pyo3(signature = (dir, n_clients=4, length=2016, scale_spread=100.0, variance_profile=0.8, noise_level=0.1, seed=0))]
fn generate_clients(
    dir: &str,
    n_clients: usize,
    length: usize,
    scale_spread: f64,
    variance_profile: f64,
    noise_level: f64,
    seed: u64,
) -> PyResult<Vec<String>> {
    let cfg = fedcast::data::SynthConfig {
        n_clients,
        length,
        scale_spread,
        variance_profile,
        noise_level,
        seed,
    };
    let series = synth_clients(&cfg).map_err(to_py_err)?;
    let mut paths = Vec::with_capacity(series.len());
    for s in &series {
        let (csv, _) = write_client_files(s, std::path::Path::new(dir)).map_err(to_py_err)?;
        paths.push(csv.display().to_string());
    }
    Ok(paths)
}

/// Outcome of a config-driven run.
#[pyclass]
struct TrainSummary {
    #[pyo3(get)]
    algorithm: String,
    #[pyo3(get)]
    partition: String,
    #[pyo3(get)]
    server_epochs: usize,
    #[pyo3(get)]
    params_per_epoch: u64,
    #[pyo3(get)]
    avg_mae: f64,
    #[pyo3(get)]
    avg_mase: f64,
    #[pyo3(get)]
    per_client_mae: Vec<f64>,
    #[pyo3(get)]
    per_client_mase: Vec<f64>,
}

#[pymethods]
impl TrainSummary {
    fn __repr__(&self) -> String {
        format!(
            "TrainSummary(algorithm='{}', partition='{}', avg_mae={}, avg_mase={})",
            self.algorithm, self.partition, self.avg_mae, self.avg_mase
        )
    }
}

/// Train with the given TOML configuration (same schema as the CLI) and
/// evaluate on the test split, entirely in memory.
#[pyfunction]
fn train_and_evaluate(config_toml: &str) -> PyResult<TrainSummary> {
    let config = RunConfig::from_toml_str(config_toml).map_err(to_py_err)?;
    let series = match config.data.source {
        fedcast::config::DataSource::Generate => {
            synth_clients(&config.synth_config()).map_err(to_py_err)?
        }
        fedcast::config::DataSource::Csv => config
            .data
            .csv_paths
            .iter()
            .map(|p| fedcast::data::ingest_client_files(p))
            .collect::<fedcast::Result<Vec<_>>>()
            .map_err(to_py_err)?,
    };
    let datasets = build_client_datasets(
        &series,
        config.model.lookback,
        config.scaler_scope(),
        config.split_order(),
    )
    .map_err(to_py_err)?;

    let hp = config.hyperparams();
    let opts = SimOptions {
        workers: config.training.workers,
        resample_per_client_epoch: config.flags.resample_per_client_epoch,
        initial_weights: None,
    };
    let seed = config.training.seed;
    let mode = config.mase_mode();
    let cfg = &config.model;
    let mut clients = make_clients(datasets.clone());

    let (report, params_per_epoch) = match config.training.algorithm {
        Algorithm::Fl => {
            let out = run_fl(&mut clients, cfg, &hp, config.training.server_algo, &opts, seed)
                .map_err(to_py_err)?;
            let report = evaluate(
                &TrainedModel::Global(&out.weights),
                &datasets,
                cfg,
                SplitKind::Test,
                mode,
                "fl",
            )
            .map_err(to_py_err)?;
            let bw = bandwidth_report(&LayerPartition::new(PartitionId::Fl, cfg));
            (report, bw.params_per_epoch)
        }
        Algorithm::Plfl => {
            let out = run_plfl(
                &mut clients,
                cfg,
                &hp,
                config.training.server_algo,
                config.training.partition,
                &opts,
                seed,
            )
            .map_err(to_py_err)?;
            let partition = LayerPartition::new(config.training.partition, cfg);
            let report = evaluate(
                &TrainedModel::Personalized {
                    shared: &out.shared,
                    per_client: &out.personalized,
                    partition: &partition,
                },
                &datasets,
                cfg,
                SplitKind::Test,
                mode,
                "plfl",
            )
            .map_err(to_py_err)?;
            let bw = bandwidth_report(&partition);
            (report, bw.params_per_epoch)
        }
        Algorithm::NoFl => {
            let out = run_nofl(
                &clients,
                cfg,
                config.training.nofl_epochs,
                config.training.nofl_lr,
                cfg.batch_size,
                seed,
            )
            .map_err(to_py_err)?;
            let report = evaluate(
                &TrainedModel::Global(&out.weights),
                &datasets,
                cfg,
                SplitKind::Test,
                mode,
                "nofl",
            )
            .map_err(to_py_err)?;
            (report, 0)
        }
    };

    Ok(TrainSummary {
        algorithm: report.algorithm.clone(),
        partition: report.partition.clone(),
        server_epochs: match config.training.algorithm {
            Algorithm::NoFl => config.training.nofl_epochs,
            _ => hp.server_epochs,
        },
        params_per_epoch,
        avg_mae: report.avg_mae,
        avg_mase: report.avg_mase,
        per_client_mae: report.per_client.iter().map(|c| c.mae).collect(),
        per_client_mase: report.per_client.iter().map(|c| c.mase).collect(),
    })
}

#[pymodule]
fn fedcast_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<TrainSummary>()?;
    m.add_function(wrap_pyfunction!(bandwidth, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(mase, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_clients, m)?)?;
    m.add_function(wrap_pyfunction!(train_and_evaluate, m)?)?;
    Ok(())
}
