use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::ClusterModel;
use crate::combat::BatchEffects;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const PROTOCOL_VERSION: u32 = 1;

/// Name the coordinator uses as sender/recipient.
pub const COORDINATOR: &str = "coordinator";

/// Round 1 payload: a site's local least-squares summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteLocalParams {
    pub site_id: String,
    /// Local intercepts α̂_ig.
    pub alpha_local: Vec<f64>,
    /// Local coefficients β̂_ig, P×G.
    pub beta_local: Matrix,
    /// Zero locally; the site offset only exists relative to the global α̂.
    pub gamma_local: Vec<f64>,
    /// [1 | X]ᵀ[1 | X], (P+1)×(P+1).
    pub gram: Matrix,
    /// [1 | X]ᵀY, (P+1)×G.
    pub cross: Matrix,
    /// Σ_j y_jg² per feature.
    pub sum_sq: Vec<f64>,
    pub n_samples: usize,
    /// The local normal equations needed a ridge to be solvable.
    pub ridge_fallback: bool,
}

/// Round 3 payload: a site's empirical Bayes posteriors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteEBParams {
    pub site_id: String,
    pub gamma_star_local: Vec<f64>,
    pub delta_sq_star_local: Vec<f64>,
}

/// Coordinate-wise z-scoring of site parameter vectors before clustering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamScaling {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ParamScaling {
    pub fn apply(&self, v: &mut [f64]) {
        for ((x, m), s) in v.iter_mut().zip(&self.mean).zip(&self.scale) {
            *x = (*x - m) / s;
        }
    }
}

/// Round 2 payload: global standardization parameters and the site clustering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalParams {
    pub alpha: Vec<f64>,
    /// P×G
    pub beta: Matrix,
    pub sigma: Vec<f64>,
    /// γ̂_ig = α̂_ig − α̂_g for every participating site.
    pub gamma_hat: BTreeMap<String, Vec<f64>>,
    pub cluster_model: ClusterModel,
    pub cluster_of_site: BTreeMap<String, usize>,
    pub param_scaling: Option<ParamScaling>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Round {
    LocalParams,
    GlobalParams,
    LocalEb,
    ClusterEb,
}

impl Round {
    pub const ALL: [Round; 4] = [Round::LocalParams, Round::GlobalParams, Round::LocalEb, Round::ClusterEb];

    pub fn number(self) -> u8 {
        match self {
            Round::LocalParams => 1,
            Round::GlobalParams => 2,
            Round::LocalEb => 3,
            Round::ClusterEb => 4,
        }
    }

    /// Rounds 1 and 3 flow site → coordinator, rounds 2 and 4 the other way.
    pub fn from_site(self) -> bool {
        matches!(self, Round::LocalParams | Round::LocalEb)
    }
}

impl fmt::Display for Round {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Round::LocalParams => "local_params",
            Round::GlobalParams => "global_params",
            Round::LocalEb => "local_eb",
            Round::ClusterEb => "cluster_eb",
        };
        write!(f, "{name}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "round", content = "payload", rename_all = "snake_case")]
pub enum Payload {
    LocalParams(SiteLocalParams),
    GlobalParams(GlobalParams),
    LocalEb(SiteEBParams),
    ClusterEb(BatchEffects),
}

impl Payload {
    pub fn round(&self) -> Round {
        match self {
            Payload::LocalParams(_) => Round::LocalParams,
            Payload::GlobalParams(_) => Round::GlobalParams,
            Payload::LocalEb(_) => Round::LocalEb,
            Payload::ClusterEb(_) => Round::ClusterEb,
        }
    }
}

/// Self-describing protocol message. The round tag lives inside the payload
/// enum, so a message can never carry a payload of the wrong round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMessage {
    pub protocol_version: u32,
    pub sender: String,
    pub recipient: String,
    /// Hex SHA-256 of the JSON-encoded payload.
    pub digest: String,
    #[serde(flatten)]
    pub payload: Payload,
}

fn digest_of(payload: &Payload) -> Result<String> {
    let bytes = serde_json::to_vec(payload)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RoundMessage {
    pub fn new(sender: impl Into<String>, recipient: impl Into<String>, payload: Payload) -> Result<Self> {
        Ok(RoundMessage {
            protocol_version: PROTOCOL_VERSION,
            sender: sender.into(),
            recipient: recipient.into(),
            digest: digest_of(&payload)?,
            payload,
        })
    }

    pub fn round(&self) -> Round {
        self.payload.round()
    }

    /// The site this message belongs to (sender for uplink rounds, recipient otherwise).
    pub fn site(&self) -> &str {
        if self.round().from_site() {
            &self.sender
        } else {
            &self.recipient
        }
    }

    pub fn verify(&self) -> Result<()> {
        if self.protocol_version != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!(
                "unsupported protocol version {} (expected {PROTOCOL_VERSION})",
                self.protocol_version
            )));
        }
        let actual = digest_of(&self.payload)?;
        if actual != self.digest {
            return Err(Error::Protocol(format!(
                "digest mismatch on {} message from `{}`",
                self.round(),
                self.sender
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let msg: RoundMessage = serde_json::from_str(text)?;
        msg.verify()?;
        Ok(msg)
    }
}
