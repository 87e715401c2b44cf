//! MAE and MASE on original-unit forecasts, and per-client evaluation
//! reports.
//!
//! MASE divides the MAE by the mean one-step naive error of the truth
//! series, so the last-value forecaster scores exactly 1. When the
//! evaluation comes from lookback windows, the step before the first target
//! is known (it is the last input of the first window) and is passed as
//! `context`, which makes the naive denominator cover exactly the points
//! being scored. The unnormalized variant (raw sum instead of mean in the
//! denominator) is available as [`MaseMode::RawSum`].

use serde::Serialize;

use crate::data::{ClientDataset, SplitKind, Window, FEATURES};
use crate::error::{Error, Result};
use crate::model::{predict, LayerPartition, ModelConfig, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaseMode {
    /// Denominator is the mean naive error (naive forecaster scores 1).
    #[default]
    Normalized,
    /// Denominator is the raw sum of naive errors.
    RawSum,
}

/// Mean absolute error, in whatever units the inputs carry.
pub fn mae(truth: &[f64], forecast: &[f64]) -> Result<f64> {
    if truth.len() != forecast.len() {
        return Err(Error::LengthMismatch {
            op: "mae",
            left: truth.len(),
            right: forecast.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput("mae"));
    }
    let sum: f64 = truth
        .iter()
        .zip(forecast)
        .map(|(&t, &f)| (t - f).abs())
        .sum();
    Ok(sum / truth.len() as f64)
}

fn naive_denominator(diff_sum: f64, diff_count: usize, mode: MaseMode) -> Result<f64> {
    if diff_sum == 0.0 {
        return Err(Error::ConstantTruth);
    }
    Ok(match mode {
        MaseMode::Normalized => diff_sum / diff_count as f64,
        MaseMode::RawSum => diff_sum,
    })
}

/// Mean absolute scaled error of `forecast` against `truth`.
pub fn mase(truth: &[f64], forecast: &[f64], mode: MaseMode) -> Result<f64> {
    if truth.len() < 2 {
        return Err(Error::EmptyInput("mase"));
    }
    let numerator = mae(truth, forecast)?;
    let diff_sum: f64 = truth.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    Ok(numerator / naive_denominator(diff_sum, truth.len() - 1, mode)?)
}

/// MASE where `context` is the known value one step before `truth[0]`, so
/// the naive error is defined at every scored point.
pub fn mase_with_context(
    context: f64,
    truth: &[f64],
    forecast: &[f64],
    mode: MaseMode,
) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::EmptyInput("mase"));
    }
    let numerator = mae(truth, forecast)?;
    let mut diff_sum = (truth[0] - context).abs();
    diff_sum += truth.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>();
    Ok(numerator / naive_denominator(diff_sum, truth.len(), mode)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct ClientMetrics {
    pub client_id: String,
    pub mae: f64,
    pub mase: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub algorithm: String,
    pub partition: String,
    pub split: String,
    pub per_client: Vec<ClientMetrics>,
    pub avg_mae: f64,
    pub avg_mase: f64,
}

impl EvalReport {
    fn from_clients(
        algorithm: &str,
        partition: &str,
        split: SplitKind,
        per_client: Vec<ClientMetrics>,
    ) -> Self {
        let n = per_client.len() as f64;
        let avg_mae = per_client.iter().map(|c| c.mae).sum::<f64>() / n;
        let avg_mase = per_client.iter().map(|c| c.mase).sum::<f64>() / n;
        EvalReport {
            algorithm: algorithm.to_string(),
            partition: partition.to_string(),
            split: format!("{split:?}").to_lowercase(),
            per_client,
            avg_mae,
            avg_mase,
        }
    }
}

/// One client's forecast dump: (target time, original-unit truth, forecast).
pub type ForecastSeries = Vec<(chrono::NaiveDateTime, f64, f64)>;

/// Weights to evaluate: one global set, or shared weights plus one
/// personalized set per client.
pub enum TrainedModel<'a> {
    Global(&'a ParamSet),
    Personalized {
        shared: &'a ParamSet,
        per_client: &'a [ParamSet],
        partition: &'a LayerPartition,
    },
}

/// The original-unit energy one step before the first window target: the
/// last input row of the first window, inverse-scaled.
fn split_context(dataset: &ClientDataset, windows: &[Window], lookback: usize) -> f64 {
    let first = &windows[0];
    let last_input_scaled = first.x.data()[(lookback - 1) * FEATURES];
    dataset.scaler.inverse_energy(last_input_scaled)
}

fn metrics_for(
    dataset: &ClientDataset,
    windows: &[Window],
    forecasts: &[f64],
    lookback: usize,
    mode: MaseMode,
) -> Result<ClientMetrics> {
    let truth: Vec<f64> = windows.iter().map(|w| w.y_orig).collect();
    let context = split_context(dataset, windows, lookback);
    Ok(ClientMetrics {
        client_id: dataset.client_id.clone(),
        mae: mae(&truth, forecasts)?,
        mase: mase_with_context(context, &truth, forecasts, mode)?,
    })
}

/// Forecast one client's split with the given weights, in original units.
pub fn client_forecasts(
    params: &ParamSet,
    cfg: &ModelConfig,
    dataset: &ClientDataset,
    split: SplitKind,
) -> Result<ForecastSeries> {
    let windows = dataset.split(split);
    if windows.is_empty() {
        return Err(Error::EmptyInput("client_forecasts"));
    }
    let refs: Vec<&crate::tensor::Tensor> = windows.iter().map(|w| &w.x).collect();
    let scaled = predict(params, cfg, &refs)?;
    Ok(windows
        .iter()
        .zip(scaled)
        .map(|(w, p)| (w.target_time, w.y_orig, dataset.scaler.inverse_energy(p)))
        .collect())
}

/// Per-client one-step forecasts over the chosen split, inverse-scaled, with
/// metrics per client and their arithmetic means.
pub fn evaluate(
    model: &TrainedModel<'_>,
    datasets: &[ClientDataset],
    cfg: &ModelConfig,
    split: SplitKind,
    mode: MaseMode,
    algorithm: &str,
) -> Result<EvalReport> {
    if datasets.is_empty() {
        return Err(Error::EmptyInput("evaluate"));
    }
    let partition_label = match model {
        TrainedModel::Global(_) => "FL".to_string(),
        TrainedModel::Personalized { partition, .. } => partition.id.to_string(),
    };
    if let TrainedModel::Personalized { per_client, .. } = model {
        if per_client.len() != datasets.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} personalized weight sets for {} clients",
                per_client.len(),
                datasets.len()
            )));
        }
    }

    let mut per_client = Vec::with_capacity(datasets.len());
    for (i, dataset) in datasets.iter().enumerate() {
        let full;
        let params: &ParamSet = match model {
            TrainedModel::Global(p) => p,
            TrainedModel::Personalized {
                shared,
                per_client,
                partition,
            } => {
                full = partition.merge(shared, &per_client[i])?;
                &full
            }
        };
        let windows = dataset.split(split);
        if windows.is_empty() {
            return Err(Error::EmptyInput("evaluate"));
        }
        let forecasts: Vec<f64> = client_forecasts(params, cfg, dataset, split)?
            .into_iter()
            .map(|(_, _, f)| f)
            .collect();
        per_client.push(metrics_for(dataset, windows, &forecasts, cfg.lookback, mode)?);
    }
    Ok(EvalReport::from_clients(
        algorithm,
        &partition_label,
        split,
        per_client,
    ))
}

/// Evaluate the naive last-value forecaster: each prediction is the
/// (inverse-scaled) energy at the final input step of the window.
pub fn evaluate_naive(
    datasets: &[ClientDataset],
    lookback: usize,
    split: SplitKind,
    mode: MaseMode,
) -> Result<EvalReport> {
    if datasets.is_empty() {
        return Err(Error::EmptyInput("evaluate_naive"));
    }
    let mut per_client = Vec::with_capacity(datasets.len());
    for dataset in datasets {
        let windows = dataset.split(split);
        if windows.is_empty() {
            return Err(Error::EmptyInput("evaluate_naive"));
        }
        let forecasts: Vec<f64> = windows
            .iter()
            .map(|w| {
                dataset
                    .scaler
                    .inverse_energy(w.x.data()[(lookback - 1) * FEATURES])
            })
            .collect();
        per_client.push(metrics_for(dataset, windows, &forecasts, lookback, mode)?);
    }
    Ok(EvalReport::from_clients("naive", "-", split, per_client))
}
