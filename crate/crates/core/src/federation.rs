//! Orchestration of federated training (all layers shared), personalized
//! federated training (only shared layers exchanged), and the pooled
//! baseline, plus communication-cost accounting.
//!
//! The simulation is in-process but the server/client boundary is explicit:
//! every exchange is a [`Broadcast`] or [`ClientReply`] value that observers
//! can inspect, and nothing else crosses it. Determinism: the server draws
//! from stream 0 of the run seed, client m from stream m + 1; client updates
//! are independent within an epoch (and may run on several worker threads);
//! aggregation reduces in ascending client id.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::model::{
    batch_loss, model_forward_batch, register_params, LayerPartition, ModelConfig, ParamSet,
    PartitionId,
};
use crate::optim::{adam_step, AdamState, HyperParams, ServerAlgo, ServerState};
use crate::tensor::Tensor;

/// RNG stream for the server (weight initialization, pooled minibatches).
pub fn server_stream_rng(run_seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(0);
    rng
}

/// Independent RNG stream for one client.
pub fn client_stream_rng(run_seed: u64, client_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(client_id as u64 + 1);
    rng
}

/// A simulated client: private dataset, personalized weights (when the
/// partition has any), and its own RNG stream.
pub struct Client {
    pub id: usize,
    pub dataset: ClientDataset,
    pub psi: Option<ParamSet>,
    rng: ChaCha8Rng,
}

impl Client {
    pub fn new(id: usize, dataset: ClientDataset) -> Self {
        Client {
            id,
            dataset,
            psi: None,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    fn reseed(&mut self, run_seed: u64) {
        self.rng = client_stream_rng(run_seed, self.id);
    }
}

/// Clients with ids 0..n, in dataset order.
pub fn make_clients(datasets: Vec<ClientDataset>) -> Vec<Client> {
    datasets
        .into_iter()
        .enumerate()
        .map(|(id, d)| Client::new(id, d))
        .collect()
}

/// Server-to-clients message: the shared weights for this epoch.
#[derive(Debug, Clone)]
pub struct Broadcast {
    pub epoch: usize,
    pub params: ParamSet,
}

/// Client-to-server message: the pseudo-gradient over shared names
/// (received minus locally updated weights), the minibatch size, and the
/// first-epoch training loss.
#[derive(Debug, Clone)]
pub struct ClientReply {
    pub epoch: usize,
    pub client_id: usize,
    pub pseudo_gradient: ParamSet,
    pub batch_size: usize,
    pub train_loss: f64,
}

/// Hook over the in-memory server/client channel.
pub trait ExchangeObserver {
    fn on_broadcast(&mut self, _msg: &Broadcast) {}
    fn on_reply(&mut self, _msg: &ClientReply) {}
}

impl ExchangeObserver for () {}

/// Records every message; used to audit what crosses the boundary.
#[derive(Default)]
pub struct MessageLog {
    pub broadcasts: Vec<Broadcast>,
    pub replies: Vec<ClientReply>,
}

impl ExchangeObserver for MessageLog {
    fn on_broadcast(&mut self, msg: &Broadcast) {
        self.broadcasts.push(msg.clone());
    }

    fn on_reply(&mut self, msg: &ClientReply) {
        self.replies.push(msg.clone());
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClientRound {
    pub client_id: usize,
    pub train_loss: f64,
    pub params_sent: usize,
    pub params_received: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundReport {
    pub epoch: usize,
    pub clients: Vec<ClientRound>,
    #[serde(skip)]
    pub duration: Duration,
}

/// Simulation knobs that are not part of the training hyperparameters.
#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    /// Worker threads for client updates (0 or 1 = sequential).
    pub workers: usize,
    /// Draw a fresh minibatch for every client epoch instead of reusing the
    /// one drawn at the start of the server epoch.
    pub resample_per_client_epoch: bool,
    /// Start from these weights instead of seeded initialization.
    pub initial_weights: Option<ParamSet>,
}

/// Loss and flattened gradients of the mean squared error over the chosen
/// minibatch windows.
pub fn minibatch_gradients(
    params: &ParamSet,
    cfg: &ModelConfig,
    windows: &[crate::data::Window],
    batch: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let mut tape = crate::tensor::Tape::new();
    let nodes = register_params(&mut tape, params);
    let xs: Vec<&Tensor> = batch.iter().map(|&i| &windows[i].x).collect();
    let ys: Vec<f64> = batch.iter().map(|&i| windows[i].y_scaled).collect();
    let preds = model_forward_batch(&mut tape, &nodes, cfg, &xs)?;
    let loss = batch_loss(&mut tape, preds, &ys)?;
    let grads = tape.backward(loss)?;
    let mut flat = Vec::with_capacity(params.total_params());
    for (name, _) in params.iter() {
        flat.extend_from_slice(grads.get(name).expect("registered leaf").data());
    }
    Ok((tape.value(loss).item(), flat))
}

fn minibatch_loss(
    params: &ParamSet,
    cfg: &ModelConfig,
    windows: &[crate::data::Window],
    batch: &[usize],
) -> Result<f64> {
    let mut tape = crate::tensor::Tape::new();
    let nodes = register_params(&mut tape, params);
    let xs: Vec<&Tensor> = batch.iter().map(|&i| &windows[i].x).collect();
    let ys: Vec<f64> = batch.iter().map(|&i| windows[i].y_scaled).collect();
    let preds = model_forward_batch(&mut tape, &nodes, cfg, &xs)?;
    let loss = batch_loss(&mut tape, preds, &ys)?;
    Ok(tape.value(loss).item())
}

/// Uniform minibatch without replacement; falls back to sampling with
/// replacement (with a warning) when the dataset is smaller than the batch.
pub fn sample_minibatch(rng: &mut ChaCha8Rng, population: usize, batch: usize) -> Vec<usize> {
    if batch <= population {
        rand::seq::index::sample(rng, population, batch).into_vec()
    } else {
        log::warn!(
            "minibatch size {batch} exceeds dataset size {population}; sampling with replacement"
        );
        (0..batch).map(|_| rng.gen_range(0..population)).collect()
    }
}

fn tensor_sub(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shapes")
}

/// One client's work for one server epoch: sample a minibatch, reset the
/// Adam state, take K' Adam steps on the full local weights, store the
/// personalized part, and return the pseudo-gradient over shared names.
pub fn client_update(
    client: &mut Client,
    received: &ParamSet,
    cfg: &ModelConfig,
    hp: &HyperParams,
    partition: &LayerPartition,
    resample_per_client_epoch: bool,
    epoch: usize,
) -> Result<ClientReply> {
    let empty = ParamSet::empty();
    let psi = client.psi.as_ref().unwrap_or(&empty);
    let full = partition.merge(received, psi)?;

    let windows = &client.dataset.train;
    if windows.is_empty() {
        return Err(Error::EmptyInput("client train set"));
    }
    let mut batch = sample_minibatch(&mut client.rng, windows.len(), hp.batch_size);

    let mut theta = full.flatten();
    let mut adam = AdamState::new(theta.len());
    let mut train_loss = f64::NAN;
    for k in 1..=hp.client_epochs {
        if resample_per_client_epoch && k > 1 {
            batch = sample_minibatch(&mut client.rng, windows.len(), hp.batch_size);
        }
        let params = full.unflatten_like(&theta)?;
        let (loss, grads) = minibatch_gradients(&params, cfg, windows, &batch)?;
        if k == 1 {
            train_loss = loss;
        }
        adam_step(
            &mut adam,
            &mut theta,
            &grads,
            hp.client_lr,
            hp.client_beta1,
            hp.client_beta2,
            hp.client_eps,
        )?;
    }
    if hp.client_epochs == 0 {
        train_loss = minibatch_loss(&full, cfg, windows, &batch)?;
    }

    let final_params = full.unflatten_like(&theta)?;
    let (phi_final, psi_final) = partition.split(&final_params)?;
    if !psi_final.is_empty() {
        client.psi = Some(psi_final);
    }

    let pseudo = ParamSet::from_entries(received.iter().map(|(name, before)| {
        let after = phi_final.get(name).expect("shared name");
        (name.clone(), tensor_sub(before, after))
    }));

    Ok(ClientReply {
        epoch,
        client_id: client.id,
        pseudo_gradient: pseudo,
        batch_size: batch.len(),
        train_loss,
    })
}

/// Minibatch-size-weighted average of client pseudo-gradients, reduced in
/// the order given (callers pass replies in ascending client id).
pub fn aggregate(pseudo_gradients: &[Vec<f64>], batch_sizes: &[usize]) -> Result<Vec<f64>> {
    if pseudo_gradients.is_empty() {
        return Err(Error::EmptyInput("aggregate"));
    }
    if pseudo_gradients.len() != batch_sizes.len() {
        return Err(Error::LengthMismatch {
            op: "aggregate",
            left: pseudo_gradients.len(),
            right: batch_sizes.len(),
        });
    }
    let dim = pseudo_gradients[0].len();
    let total: usize = batch_sizes.iter().sum();
    if batch_sizes.contains(&0) {
        return Err(Error::EmptyInput("aggregate: zero batch size"));
    }
    let mut delta = vec![0.0; dim];
    for (g, &b) in pseudo_gradients.iter().zip(batch_sizes) {
        if g.len() != dim {
            return Err(Error::LengthMismatch {
                op: "aggregate",
                left: g.len(),
                right: dim,
            });
        }
        let w = b as f64 / total as f64;
        for (d, &gi) in delta.iter_mut().zip(g) {
            *d += w * gi;
        }
    }
    Ok(delta)
}

fn run_clients(
    clients: &mut [Client],
    received: &ParamSet,
    cfg: &ModelConfig,
    hp: &HyperParams,
    partition: &LayerPartition,
    opts: &SimOptions,
    epoch: usize,
) -> Result<Vec<ClientReply>> {
    let workers = opts.workers.max(1);
    if workers == 1 || clients.len() == 1 {
        return clients
            .iter_mut()
            .map(|c| {
                client_update(
                    c,
                    received,
                    cfg,
                    hp,
                    partition,
                    opts.resample_per_client_epoch,
                    epoch,
                )
            })
            .collect();
    }
    let chunk_size = clients.len().div_ceil(workers);
    let chunk_results: Vec<Result<Vec<ClientReply>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = clients
            .chunks_mut(chunk_size)
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter_mut()
                        .map(|c| {
                            client_update(
                                c,
                                received,
                                cfg,
                                hp,
                                partition,
                                opts.resample_per_client_epoch,
                                epoch,
                            )
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("client worker panicked"))
            .collect()
    });
    let mut replies = Vec::new();
    for chunk in chunk_results {
        replies.extend(chunk?);
    }
    Ok(replies)
}

#[allow(clippy::too_many_arguments)]
fn run_federated(
    clients: &mut [Client],
    cfg: &ModelConfig,
    hp: &HyperParams,
    algo: ServerAlgo,
    partition: &LayerPartition,
    opts: &SimOptions,
    seed: u64,
    observer: &mut dyn ExchangeObserver,
) -> Result<(ParamSet, Vec<RoundReport>)> {
    if clients.is_empty() {
        return Err(Error::EmptyInput("run_federated"));
    }
    cfg.validate()?;
    hp.validate()?;
    clients.sort_by_key(|c| c.id);

    // Per-run client state: fresh RNG streams, freshly initialized
    // personalized weights. Explicit initial weights seed every client's
    // personalized part too (and then the client RNG is used for minibatch
    // sampling only).
    let personalized_present = partition.personalized_param_count() > 0;
    for client in clients.iter_mut() {
        client.reseed(seed);
        client.psi = if !personalized_present {
            None
        } else if let Some(w) = &opts.initial_weights {
            Some(partition.split(w)?.1)
        } else {
            let init = ParamSet::init_with_rng(cfg, &mut client.rng);
            Some(partition.split(&init)?.1)
        };
    }

    let full_init = match &opts.initial_weights {
        Some(w) => w.clone(),
        None => ParamSet::init_with_rng(cfg, &mut server_stream_rng(seed)),
    };
    let (mut shared, _) = partition.split(&full_init)?;
    let mut shared_flat = shared.flatten();
    let mut server_state = ServerState::init(algo, shared_flat.len(), hp.server_eps);

    let mut history = Vec::with_capacity(hp.server_epochs);
    for epoch in 1..=hp.server_epochs {
        let started = Instant::now();
        let broadcast = Broadcast {
            epoch,
            params: shared.clone(),
        };
        observer.on_broadcast(&broadcast);

        let replies = run_clients(clients, &broadcast.params, cfg, hp, partition, opts, epoch)?;
        let mut pseudos = Vec::with_capacity(replies.len());
        let mut batches = Vec::with_capacity(replies.len());
        for reply in &replies {
            observer.on_reply(reply);
            if !reply.train_loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            pseudos.push(reply.pseudo_gradient.flatten());
            batches.push(reply.batch_size);
        }

        let delta = aggregate(&pseudos, &batches)?;
        server_state.apply(&mut shared_flat, &delta, hp)?;
        if !shared_flat.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        shared = shared.unflatten_like(&shared_flat)?;

        let shared_count = shared.total_params();
        history.push(RoundReport {
            epoch,
            clients: replies
                .iter()
                .map(|r| ClientRound {
                    client_id: r.client_id,
                    train_loss: r.train_loss,
                    params_sent: shared_count,
                    params_received: shared_count,
                })
                .collect(),
            duration: started.elapsed(),
        });
    }
    Ok((shared, history))
}

#[derive(Debug, Clone)]
pub struct FlOutcome {
    pub weights: ParamSet,
    pub history: Vec<RoundReport>,
}

/// Federated training with every layer shared.
pub fn run_fl(
    clients: &mut [Client],
    cfg: &ModelConfig,
    hp: &HyperParams,
    algo: ServerAlgo,
    opts: &SimOptions,
    seed: u64,
) -> Result<FlOutcome> {
    run_fl_observed(clients, cfg, hp, algo, opts, seed, &mut ())
}

pub fn run_fl_observed(
    clients: &mut [Client],
    cfg: &ModelConfig,
    hp: &HyperParams,
    algo: ServerAlgo,
    opts: &SimOptions,
    seed: u64,
    observer: &mut dyn ExchangeObserver,
) -> Result<FlOutcome> {
    let partition = LayerPartition::new(PartitionId::Fl, cfg);
    let (weights, history) =
        run_federated(clients, cfg, hp, algo, &partition, opts, seed, observer)?;
    Ok(FlOutcome { weights, history })
}

#[derive(Debug, Clone)]
pub struct PlflOutcome {
    pub shared: ParamSet,
    /// Personalized weights in ascending client id.
    pub personalized: Vec<ParamSet>,
    pub history: Vec<RoundReport>,
}

/// Federated training where only the partition's shared layers are
/// exchanged; personalized weights never leave their client.
pub fn run_plfl(
    clients: &mut [Client],
    cfg: &ModelConfig,
    hp: &HyperParams,
    algo: ServerAlgo,
    partition_id: PartitionId,
    opts: &SimOptions,
    seed: u64,
) -> Result<PlflOutcome> {
    run_plfl_observed(clients, cfg, hp, algo, partition_id, opts, seed, &mut ())
}

#[allow(clippy::too_many_arguments)]
pub fn run_plfl_observed(
    clients: &mut [Client],
    cfg: &ModelConfig,
    hp: &HyperParams,
    algo: ServerAlgo,
    partition_id: PartitionId,
    opts: &SimOptions,
    seed: u64,
    observer: &mut dyn ExchangeObserver,
) -> Result<PlflOutcome> {
    if partition_id == PartitionId::Fl {
        return Err(Error::Config {
            field: "partition".into(),
            msg: "personalized training needs a partition with personalized layers (P1, P2 or P3)"
                .into(),
        });
    }
    let partition = LayerPartition::new(partition_id, cfg);
    let (shared, history) =
        run_federated(clients, cfg, hp, algo, &partition, opts, seed, observer)?;
    let personalized = clients
        .iter()
        .map(|c| c.psi.clone().expect("initialized personalized weights"))
        .collect();
    Ok(PlflOutcome {
        shared,
        personalized,
        history,
    })
}

#[derive(Debug, Clone)]
pub struct NoflOutcome {
    pub weights: ParamSet,
    pub epoch_losses: Vec<f64>,
}

/// Pooled baseline: all clients' train windows in one dataset, Adam with
/// persistent state, one uniformly sampled minibatch per epoch.
pub fn run_nofl(
    clients: &[Client],
    cfg: &ModelConfig,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<NoflOutcome> {
    if clients.is_empty() {
        return Err(Error::EmptyInput("run_nofl"));
    }
    cfg.validate()?;
    let mut pooled = Vec::new();
    let mut ordered: Vec<&Client> = clients.iter().collect();
    ordered.sort_by_key(|c| c.id);
    for c in &ordered {
        pooled.extend(c.dataset.train.iter().cloned());
    }
    if pooled.is_empty() {
        return Err(Error::EmptyInput("run_nofl: pooled train set"));
    }

    let mut rng = server_stream_rng(seed);
    let init = ParamSet::init_with_rng(cfg, &mut rng);
    let mut theta = init.flatten();
    let mut adam = AdamState::new(theta.len());
    let hp = HyperParams::defaults_for(ServerAlgo::FedAvg);

    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let batch = sample_minibatch(&mut rng, pooled.len(), batch_size);
        let params = init.unflatten_like(&theta)?;
        let (loss, grads) = minibatch_gradients(&params, cfg, &pooled, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        adam_step(
            &mut adam,
            &mut theta,
            &grads,
            lr,
            hp.client_beta1,
            hp.client_beta2,
            hp.client_eps,
        )?;
        epoch_losses.push(loss);
    }
    Ok(NoflOutcome {
        weights: init.unflatten_like(&theta)?,
        epoch_losses,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BandwidthReport {
    pub algorithm: String,
    /// Parameters exchanged per client per server epoch (send + receive).
    pub params_per_epoch: u64,
    /// At 32 bits per parameter, floored to whole kilobits.
    pub kilobits_per_epoch: u64,
}

/// Per-epoch exchange volume: double the shared parameter count, at 32 bits
/// per parameter.
pub fn bandwidth_report(partition: &LayerPartition) -> BandwidthReport {
    let params = 2 * partition.shared_param_count() as u64;
    let algorithm = match partition.id {
        PartitionId::Fl => "FL".to_string(),
        PartitionId::P1 => "PL-FL Config. 1".to_string(),
        PartitionId::P2 => "PL-FL Config. 2".to_string(),
        PartitionId::P3 => "PL-FL Config. 3".to_string(),
    };
    BandwidthReport {
        algorithm,
        params_per_epoch: params,
        kilobits_per_epoch: params * 32 / 1024,
    }
}
