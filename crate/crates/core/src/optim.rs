//! Client-side Adam and the three server update rules (FedAvg,
//! FedAvgMomentum, FedAdam), all over flat parameter vectors.
//!
//! The client Adam applies bias correction; the server rules do not. FedAdam
//! starts its second-moment state at epsilon^2 so the denominator is always
//! strictly positive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First/second moment filters plus the step counter used for bias
/// correction. `step` is the index of the NEXT update, starting at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u32,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 1,
        }
    }
}

fn check_len(op: &'static str, left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::LengthMismatch { op, left, right });
    }
    Ok(())
}

/// One Adam step with bias correction:
/// m <- b1 m + (1-b1) g, v <- b2 v + (1-b2) g^2,
/// theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
pub fn adam_step(
    state: &mut AdamState,
    theta: &mut [f64],
    grad: &[f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    check_len("adam_step", theta.len(), grad.len())?;
    check_len("adam_step", state.m.len(), theta.len())?;
    let k = state.step as i32;
    let bc1 = 1.0 - beta1.powi(k);
    let bc2 = 1.0 - beta2.powi(k);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    state.step += 1;
    Ok(())
}

/// theta <- theta - lr * delta.
pub fn fedavg_update(theta: &mut [f64], delta: &[f64], lr: f64) -> Result<()> {
    check_len("fedavg_update", theta.len(), delta.len())?;
    for (t, &d) in theta.iter_mut().zip(delta) {
        *t -= lr * d;
    }
    Ok(())
}

/// m <- b1 m + (1-b1) delta; theta <- theta - lr * m. No bias correction.
pub fn fedavgm_update(m: &mut [f64], theta: &mut [f64], delta: &[f64], lr: f64, beta1: f64) -> Result<()> {
    check_len("fedavgm_update", theta.len(), delta.len())?;
    check_len("fedavgm_update", m.len(), theta.len())?;
    for i in 0..theta.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * delta[i];
        theta[i] -= lr * m[i];
    }
    Ok(())
}

/// m <- b1 m + (1-b1) delta; v <- b2 v + (1-b2) delta^2;
/// theta <- theta - lr * m / (sqrt(v) + eps). No bias correction.
#[allow(clippy::too_many_arguments)]
pub fn fedadam_update(
    m: &mut [f64],
    v: &mut [f64],
    theta: &mut [f64],
    delta: &[f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    check_len("fedadam_update", theta.len(), delta.len())?;
    check_len("fedadam_update", m.len(), theta.len())?;
    check_len("fedadam_update", v.len(), theta.len())?;
    for i in 0..theta.len() {
        let d = delta[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * d;
        v[i] = beta2 * v[i] + (1.0 - beta2) * d * d;
        theta[i] -= lr * m[i] / (v[i].sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServerAlgo {
    FedAvg,
    #[serde(rename = "fedavgm")]
    FedAvgMomentum,
    FedAdam,
}

impl ServerAlgo {
    pub fn label(&self) -> &'static str {
        match self {
            ServerAlgo::FedAvg => "fedavg",
            ServerAlgo::FedAvgMomentum => "fedavgm",
            ServerAlgo::FedAdam => "fedadam",
        }
    }

    /// Server learning rate used in the reference experiments: 1 for the
    /// averaging rules, 0.01 for FedAdam.
    pub fn default_lr(&self) -> f64 {
        match self {
            ServerAlgo::FedAvg | ServerAlgo::FedAvgMomentum => 1.0,
            ServerAlgo::FedAdam => 0.01,
        }
    }
}

impl std::str::FromStr for ServerAlgo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fedavg" => Ok(ServerAlgo::FedAvg),
            "fedavgm" | "fedavgmomentum" => Ok(ServerAlgo::FedAvgMomentum),
            "fedadam" => Ok(ServerAlgo::FedAdam),
            _ => Err(Error::Config {
                field: "server_algo".into(),
                msg: format!("unknown server algorithm `{s}`"),
            }),
        }
    }
}

/// Optimizer-specific aggregation state living at the server.
#[derive(Debug, Clone, PartialEq)]
pub enum ServerState {
    FedAvg,
    FedAvgMomentum { m: Vec<f64> },
    FedAdam { m: Vec<f64>, v: Vec<f64> },
}

impl ServerState {
    /// FedAvgMomentum starts with m = 0; FedAdam with m = 0, v = eps^2.
    pub fn init(algo: ServerAlgo, dim: usize, eps: f64) -> Self {
        match algo {
            ServerAlgo::FedAvg => ServerState::FedAvg,
            ServerAlgo::FedAvgMomentum => ServerState::FedAvgMomentum { m: vec![0.0; dim] },
            ServerAlgo::FedAdam => ServerState::FedAdam {
                m: vec![0.0; dim],
                v: vec![eps * eps; dim],
            },
        }
    }

    pub fn apply(&mut self, theta: &mut [f64], delta: &[f64], hp: &HyperParams) -> Result<()> {
        match self {
            ServerState::FedAvg => fedavg_update(theta, delta, hp.server_lr),
            ServerState::FedAvgMomentum { m } => {
                fedavgm_update(m, theta, delta, hp.server_lr, hp.server_beta1)
            }
            ServerState::FedAdam { m, v } => fedadam_update(
                m,
                v,
                theta,
                delta,
                hp.server_lr,
                hp.server_beta1,
                hp.server_beta2,
                hp.server_eps,
            ),
        }
    }
}

/// Training hyperparameters for a federated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Server epochs K.
    pub server_epochs: usize,
    /// Client epochs K' per server epoch.
    pub client_epochs: usize,
    pub server_lr: f64,
    pub client_lr: f64,
    pub client_beta1: f64,
    pub client_beta2: f64,
    pub client_eps: f64,
    pub server_beta1: f64,
    pub server_beta2: f64,
    pub server_eps: f64,
    pub batch_size: usize,
}

impl HyperParams {
    /// Reference-experiment defaults: K = 2000, K' = 4, client lr 0.001,
    /// batch 64, beta1 = 0.99 and beta2 = 0.999 at the server, and the
    /// per-algorithm server learning rate.
    pub fn defaults_for(algo: ServerAlgo) -> Self {
        HyperParams {
            server_epochs: 2000,
            client_epochs: 4,
            server_lr: algo.default_lr(),
            client_lr: 0.001,
            client_beta1: 0.9,
            client_beta2: 0.999,
            client_eps: 1e-8,
            server_beta1: 0.99,
            server_beta2: 0.999,
            server_eps: 1e-8,
            batch_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Error::Config {
            field: name.into(),
            msg: msg.into(),
        };
        if self.server_lr <= 0.0 || self.client_lr <= 0.0 {
            return Err(field("lr", "learning rates must be positive"));
        }
        for (name, b) in [
            ("client_beta1", self.client_beta1),
            ("client_beta2", self.client_beta2),
            ("server_beta1", self.server_beta1),
            ("server_beta2", self.server_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(field(name, "betas must lie in [0, 1)"));
            }
        }
        if self.client_eps <= 0.0 || self.server_eps <= 0.0 {
            return Err(field("eps", "epsilons must be positive"));
        }
        if self.batch_size == 0 {
            return Err(field("batch_size", "batch size must be positive"));
        }
        Ok(())
    }
}
