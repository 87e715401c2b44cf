//! The two-stack LSTM + fully-connected forecaster, its named parameter set,
//! and the shared/personalized layer partitioning.
//!
//! Canonical parameter order (also the checkpoint and flattening order):
//! stack 1 gates f, i, g, o (each w_x, w_h, b_ih, b_hh), stack 2 likewise,
//! then FC layers in depth order with each PReLU slope vector directly after
//! its layer. Weight matrices are stored fan-in x fan-out so a batch of rows
//! multiplies them directly; each gate carries two additive bias vectors
//! (b_ih + b_hh), which is redundant algebraically but is what the exchanged
//! parameter counts are based on.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use indexmap::IndexMap;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

pub const GATES: [&str; 4] = ["f", "i", "g", "o"];

/// Default PReLU slope, one per channel.
pub const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Lookback window length T.
    pub lookback: usize,
    /// Features per timestep l.
    pub features: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    /// Fully connected layer sizes, input to output.
    pub fc: [usize; 4],
    pub batch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lookback: 12,
            features: 8,
            hidden1: 20,
            hidden2: 20,
            fc: [240, 120, 60, 1],
            batch_size: 64,
        }
    }
}

impl ModelConfig {
    /// A small configuration for gradient checks and fast tests.
    pub fn reduced() -> Self {
        ModelConfig {
            lookback: 4,
            features: 3,
            hidden1: 5,
            hidden2: 5,
            fc: [20, 10, 5, 1],
            batch_size: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0
            || self.features == 0
            || self.hidden1 == 0
            || self.hidden2 == 0
            || self.batch_size == 0
            || self.fc.contains(&0)
        {
            return Err(Error::ModelConfig("all sizes must be positive".into()));
        }
        if self.fc[0] != self.lookback * self.hidden2 {
            return Err(Error::ModelConfig(format!(
                "first FC size {} must equal lookback {} x stack-2 hidden size {}",
                self.fc[0], self.lookback, self.hidden2
            )));
        }
        if self.fc[3] != 1 {
            return Err(Error::ModelConfig(format!(
                "final FC size must be 1, got {}",
                self.fc[3]
            )));
        }
        Ok(())
    }

    /// Names, shapes and initialization of every parameter, in canonical order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let stacks = [
            (1usize, self.features, self.hidden1),
            (2, self.hidden1, self.hidden2),
        ];
        for (stack, input, hidden) in stacks {
            for gate in GATES {
                let prefix = format!("lstm{stack}.{gate}");
                specs.push(ParamSpec::uniform(
                    format!("{prefix}.w_x"),
                    vec![input, hidden],
                    input,
                ));
                specs.push(ParamSpec::uniform(
                    format!("{prefix}.w_h"),
                    vec![hidden, hidden],
                    hidden,
                ));
                specs.push(ParamSpec::uniform(
                    format!("{prefix}.b_ih"),
                    vec![1, hidden],
                    hidden,
                ));
                specs.push(ParamSpec::uniform(
                    format!("{prefix}.b_hh"),
                    vec![1, hidden],
                    hidden,
                ));
            }
        }
        for layer in 0..3 {
            let (fan_in, fan_out) = (self.fc[layer], self.fc[layer + 1]);
            let prefix = format!("fc{}", layer + 1);
            specs.push(ParamSpec::uniform(
                format!("{prefix}.weight"),
                vec![fan_in, fan_out],
                fan_in,
            ));
            specs.push(ParamSpec::uniform(
                format!("{prefix}.bias"),
                vec![1, fan_out],
                fan_in,
            ));
            // No activation after the final linear layer.
            if layer < 2 {
                specs.push(ParamSpec {
                    name: format!("{prefix}.prelu"),
                    shape: vec![fan_out],
                    init: Init::Constant(PRELU_INIT),
                });
            }
        }
        specs
    }

    pub fn param_names(&self) -> Vec<String> {
        self.param_specs().into_iter().map(|s| s.name).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone)]
pub enum Init {
    /// Uniform on [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    Uniform { fan_in: usize },
    Constant(f64),
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn uniform(name: String, shape: Vec<usize>, fan_in: usize) -> Self {
        ParamSpec {
            name,
            shape,
            init: Init::Uniform { fan_in },
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered, named collection of model parameters. The iteration order is the
/// canonical order and is what [`ParamSet::flatten`] uses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    /// Deterministic initialization from a seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(cfg, &mut rng)
    }

    /// Initialization drawing from a caller-owned RNG stream.
    pub fn init_with_rng(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut entries = IndexMap::new();
        for spec in cfg.param_specs() {
            let numel = spec.numel();
            let data = match spec.init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound);
                    (0..numel).map(|_| dist.sample(rng)).collect()
                }
                Init::Constant(c) => vec![c; numel],
            };
            entries.insert(spec.name, Tensor::new(spec.shape, data).expect("spec shape"));
        }
        ParamSet { entries }
    }

    pub fn empty() -> Self {
        ParamSet::default()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        ParamSet {
            entries: entries.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn insert(&mut self, name: String, value: Tensor) {
        self.entries.insert(name, value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    /// Concatenate all tensors into one vector, in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_params());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuild a set with this set's names and shapes from a flat vector.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.total_params() {
            return Err(Error::LengthMismatch {
                op: "unflatten",
                left: flat.len(),
                right: self.total_params(),
            });
        }
        let mut entries = IndexMap::new();
        let mut offset = 0;
        for (name, t) in &self.entries {
            let n = t.numel();
            entries.insert(
                name.clone(),
                Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?,
            );
            offset += n;
        }
        Ok(ParamSet { entries })
    }

    /// Checkpoint format: one line of JSON listing names and shapes, then the
    /// flattened values as little-endian f64.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let header = CheckpointHeader {
            params: self
                .entries
                .iter()
                .map(|(name, t)| CheckpointEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for t in self.entries.values() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<ParamSet> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
        let mut entries = IndexMap::new();
        for e in header.params {
            let numel: usize = e.shape.iter().product();
            let mut buf = vec![0u8; numel * 8];
            r.read_exact(&mut buf).map_err(|_| {
                Error::CheckpointMismatch(format!("truncated data for `{}`", e.name))
            })?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            entries.insert(e.name, Tensor::new(e.shape, data)?);
        }
        Ok(ParamSet { entries })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    params: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
}

/// The four personalization configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartitionId {
    /// Everything shared (plain federated learning).
    #[serde(rename = "FL")]
    Fl,
    /// FC head personalized.
    P1,
    /// FC head and the top LSTM stack personalized.
    P2,
    /// Entire model personalized.
    P3,
}

impl PartitionId {
    pub fn all() -> [PartitionId; 4] {
        [PartitionId::Fl, PartitionId::P1, PartitionId::P2, PartitionId::P3]
    }

    pub fn label(&self) -> &'static str {
        match self {
            PartitionId::Fl => "FL",
            PartitionId::P1 => "P1",
            PartitionId::P2 => "P2",
            PartitionId::P3 => "P3",
        }
    }
}

impl std::str::FromStr for PartitionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FL" => Ok(PartitionId::Fl),
            "P1" => Ok(PartitionId::P1),
            "P2" => Ok(PartitionId::P2),
            "P3" => Ok(PartitionId::P3),
            _ => Err(Error::Config {
                field: "partition".into(),
                msg: format!("unknown partition `{s}` (expected FL, P1, P2 or P3)"),
            }),
        }
    }
}

impl std::fmt::Display for PartitionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Assignment of every parameter name to shared or personalized, plus the
/// canonical name order used to merge the two halves back together.
#[derive(Debug, Clone)]
pub struct LayerPartition {
    pub id: PartitionId,
    order: Vec<String>,
    numels: Vec<usize>,
    personalized: HashSet<String>,
}

impl LayerPartition {
    pub fn new(id: PartitionId, cfg: &ModelConfig) -> Self {
        let specs = cfg.param_specs();
        let order: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
        let numels: Vec<usize> = specs.iter().map(ParamSpec::numel).collect();
        let personalized = order
            .iter()
            .filter(|name| match id {
                PartitionId::Fl => false,
                PartitionId::P1 => name.starts_with("fc"),
                PartitionId::P2 => name.starts_with("fc") || name.starts_with("lstm2"),
                PartitionId::P3 => true,
            })
            .cloned()
            .collect();
        LayerPartition {
            id,
            order,
            numels,
            personalized,
        }
    }

    pub fn is_personalized(&self, name: &str) -> bool {
        self.personalized.contains(name)
    }

    pub fn param_order(&self) -> &[String] {
        &self.order
    }

    pub fn shared_names(&self) -> impl Iterator<Item = &String> {
        self.order.iter().filter(|n| !self.is_personalized(n))
    }

    pub fn shared_param_count(&self) -> usize {
        self.order
            .iter()
            .zip(&self.numels)
            .filter(|(n, _)| !self.is_personalized(n))
            .map(|(_, &c)| c)
            .sum()
    }

    pub fn personalized_param_count(&self) -> usize {
        self.order
            .iter()
            .zip(&self.numels)
            .filter(|(n, _)| self.is_personalized(n))
            .map(|(_, &c)| c)
            .sum()
    }

    /// Split into (shared, personalized), preserving canonical order.
    pub fn split(&self, params: &ParamSet) -> Result<(ParamSet, ParamSet)> {
        for name in &self.order {
            if !params.contains(name) {
                return Err(Error::UnknownParam { name: name.clone() });
            }
        }
        for (name, _) in params.iter() {
            if !self.order.contains(name) {
                return Err(Error::UnknownParam { name: name.clone() });
            }
        }
        let mut shared = ParamSet::empty();
        let mut personalized = ParamSet::empty();
        for name in &self.order {
            let t = params.get(name).expect("checked above").clone();
            if self.is_personalized(name) {
                personalized.insert(name.clone(), t);
            } else {
                shared.insert(name.clone(), t);
            }
        }
        Ok((shared, personalized))
    }

    /// Inverse of [`LayerPartition::split`]; restores the canonical order.
    pub fn merge(&self, shared: &ParamSet, personalized: &ParamSet) -> Result<ParamSet> {
        let mut merged = ParamSet::empty();
        for name in &self.order {
            let source = if self.is_personalized(name) {
                personalized
            } else {
                shared
            };
            let t = source
                .get(name)
                .ok_or_else(|| Error::UnknownParam { name: name.clone() })?;
            merged.insert(name.clone(), t.clone());
        }
        Ok(merged)
    }
}

/// Tape node ids for every registered parameter.
pub struct ModelNodes {
    ids: IndexMap<String, NodeId>,
}

/// Node ids for one LSTM gate.
#[derive(Clone, Copy)]
pub struct GateNodes {
    pub w_x: NodeId,
    pub w_h: NodeId,
    pub b_ih: NodeId,
    pub b_hh: NodeId,
}

/// Node ids for one LSTM stack, gates in f, i, g, o order.
#[derive(Clone, Copy)]
pub struct LstmStackNodes {
    pub gates: [GateNodes; 4],
}

impl ModelNodes {
    pub fn id(&self, name: &str) -> NodeId {
        *self.ids.get(name).expect("registered parameter")
    }

    pub fn stack(&self, stack: usize) -> LstmStackNodes {
        let gate = |g: &str| GateNodes {
            w_x: self.id(&format!("lstm{stack}.{g}.w_x")),
            w_h: self.id(&format!("lstm{stack}.{g}.w_h")),
            b_ih: self.id(&format!("lstm{stack}.{g}.b_ih")),
            b_hh: self.id(&format!("lstm{stack}.{g}.b_hh")),
        };
        LstmStackNodes {
            gates: [gate("f"), gate("i"), gate("g"), gate("o")],
        }
    }
}

/// Register every parameter of `params` as a named leaf on `tape`.
pub fn register_params(tape: &mut Tape, params: &ParamSet) -> ModelNodes {
    let ids = params
        .iter()
        .map(|(name, t)| (name.clone(), tape.leaf(name.clone(), t.clone())))
        .collect();
    ModelNodes { ids }
}

fn gate_preactivation(
    tape: &mut Tape,
    gate: &GateNodes,
    x: NodeId,
    h_prev: NodeId,
    ones: NodeId,
) -> Result<NodeId> {
    let xw = tape.matmul(x, gate.w_x)?;
    let hw = tape.matmul(h_prev, gate.w_h)?;
    let lin = tape.add(xw, hw)?;
    let b_ih = tape.matmul(ones, gate.b_ih)?;
    let b_hh = tape.matmul(ones, gate.b_hh)?;
    let bias = tape.add(b_ih, b_hh)?;
    tape.add(lin, bias)
}

/// One LSTM cell step: f, i, o are sigmoid gates, g is the tanh candidate,
/// s = g (.) i + s_prev (.) f and h = tanh(s) (.) o. `ones` is a [batch, 1]
/// column used to expand the bias rows.
pub fn lstm_cell_forward(
    tape: &mut Tape,
    stack: &LstmStackNodes,
    s_prev: NodeId,
    h_prev: NodeId,
    x: NodeId,
    ones: NodeId,
) -> Result<(NodeId, NodeId)> {
    let [fg, ig, gg, og] = &stack.gates;
    let pre_f = gate_preactivation(tape, fg, x, h_prev, ones)?;
    let pre_i = gate_preactivation(tape, ig, x, h_prev, ones)?;
    let pre_g = gate_preactivation(tape, gg, x, h_prev, ones)?;
    let pre_o = gate_preactivation(tape, og, x, h_prev, ones)?;
    let f = tape.sigmoid(pre_f);
    let i = tape.sigmoid(pre_i);
    let g = tape.tanh(pre_g);
    let o = tape.sigmoid(pre_o);
    let gi = tape.hadamard(g, i)?;
    let sf = tape.hadamard(s_prev, f)?;
    let s = tape.add(gi, sf)?;
    let ts = tape.tanh(s);
    let h = tape.hadamard(ts, o)?;
    Ok((s, h))
}

/// Forward pass for a batch of lookback windows, each of shape [T, l].
/// Returns the [batch, 1] prediction node. States start at zero; the T
/// stack-2 h-states are concatenated time-major and fed to the FC head.
pub fn model_forward_batch(
    tape: &mut Tape,
    nodes: &ModelNodes,
    cfg: &ModelConfig,
    windows: &[&Tensor],
) -> Result<NodeId> {
    if windows.is_empty() {
        return Err(Error::EmptyInput("model_forward_batch"));
    }
    let (t_len, l) = (cfg.lookback, cfg.features);
    for w in windows {
        if w.shape() != [t_len, l] {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                left: w.shape().to_vec(),
                right: vec![t_len, l],
            });
        }
    }
    let batch = windows.len();
    let ones = tape.constant(Tensor::ones(&[batch, 1]));

    // Per-timestep input matrices, one row per sample.
    let mut xs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut data = Vec::with_capacity(batch * l);
        for w in windows {
            data.extend_from_slice(&w.data()[t * l..(t + 1) * l]);
        }
        xs.push(tape.constant(Tensor::new(vec![batch, l], data)?));
    }

    let stack1 = nodes.stack(1);
    let stack2 = nodes.stack(2);

    let mut s1 = tape.constant(Tensor::zeros(&[batch, cfg.hidden1]));
    let mut h1 = tape.constant(Tensor::zeros(&[batch, cfg.hidden1]));
    let mut s2 = tape.constant(Tensor::zeros(&[batch, cfg.hidden2]));
    let mut h2 = tape.constant(Tensor::zeros(&[batch, cfg.hidden2]));
    let mut h2_states = Vec::with_capacity(t_len);
    for &x in &xs {
        (s1, h1) = lstm_cell_forward(tape, &stack1, s1, h1, x, ones)?;
        (s2, h2) = lstm_cell_forward(tape, &stack2, s2, h2, h1, ones)?;
        h2_states.push(h2);
    }

    let fc_in = tape.concat(&h2_states, 1)?;

    let mut activ = fc_in;
    for layer in 1..=3 {
        let w = nodes.id(&format!("fc{layer}.weight"));
        let b = nodes.id(&format!("fc{layer}.bias"));
        let lin = tape.matmul(activ, w)?;
        let bias = tape.matmul(ones, b)?;
        activ = tape.add(lin, bias)?;
        if layer < 3 {
            let slope = nodes.id(&format!("fc{layer}.prelu"));
            activ = tape.prelu(activ, slope)?;
        }
    }
    Ok(activ)
}

/// Forward pass of a single window; returns a [1, 1] node.
pub fn model_forward(
    tape: &mut Tape,
    nodes: &ModelNodes,
    cfg: &ModelConfig,
    window: &Tensor,
) -> Result<NodeId> {
    model_forward_batch(tape, nodes, cfg, &[window])
}

/// Mean squared error between predictions [B, 1] and targets.
pub fn batch_loss(tape: &mut Tape, predictions: NodeId, targets: &[f64]) -> Result<NodeId> {
    let n = tape.value(predictions).shape()[0];
    if n != targets.len() {
        return Err(Error::LengthMismatch {
            op: "batch_loss",
            left: n,
            right: targets.len(),
        });
    }
    let y = tape.constant(Tensor::new(vec![targets.len(), 1], targets.to_vec())?);
    let d = tape.sub(predictions, y)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Evaluate the model on `windows` without keeping gradients; returns the
/// scaled predictions.
pub fn predict(params: &ParamSet, cfg: &ModelConfig, windows: &[&Tensor]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(windows.len());
    // Chunked so tapes stay small on long evaluation splits.
    for chunk in windows.chunks(256.max(cfg.batch_size)) {
        let mut tape = Tape::new();
        let nodes = register_params(&mut tape, params);
        let preds = model_forward_batch(&mut tape, &nodes, cfg, chunk)?;
        out.extend_from_slice(tape.value(preds).data());
    }
    Ok(out)
}
