use std::sync::Arc;

use crate::autodiff::{AdamConfig, AdamState};
use crate::checkpoint::{self, PayloadKind};
use crate::data::LabeledDataset;
use crate::error::{KoalaError, Result};
use crate::models::Model;
use crate::scalar::Scalar;
use crate::seeds;

use super::training::train_supervised;

/// One simulated client. The shard never leaves this struct.
#[derive(Debug, Clone)]
pub struct ClientState<S> {
    pub id: usize,
    shard: Arc<LabeledDataset<S>>,
    /// Local small model, or the downloaded large model in baseline mode.
    pub model: Option<Model<S>>,
    pub optimizer: AdamState<S>,
}

impl<S: Scalar> ClientState<S> {
    pub fn new(id: usize, shard: LabeledDataset<S>, model: Option<Model<S>>, local: AdamConfig) -> Self {
        Self {
            id,
            shard: Arc::new(shard),
            model,
            optimizer: AdamState::new(local),
        }
    }

    pub fn shard(&self) -> &LabeledDataset<S> {
        &self.shard
    }

    pub fn sample_count(&self) -> u64 {
        self.shard.len() as u64
    }

    /// Installs a model received from the server.
    pub fn receive(&mut self, payload: &[u8]) -> Result<()> {
        let ck = checkpoint::decode(payload)?;
        match (ck.kind, self.model.as_mut()) {
            (PayloadKind::Full, _) => self.model = Some(ck.into_model()?),
            (PayloadKind::Adapter, Some(m)) => ck.apply_to(m)?,
            (PayloadKind::Adapter, None) => {
                return Err(KoalaError::Checkpoint(format!(
                    "client {} received an adapter before any full model",
                    self.id
                )))
            }
        }
        Ok(())
    }
}

/// What a client sends to the server: its id, its sample count and model parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientUpload {
    pub client_id: usize,
    pub sample_count: u64,
    /// Checkpoint-format bytes.
    pub payload: Vec<u8>,
}

impl ClientUpload {
    /// Wire form: `client_id: u32 | sample_count: u64 | checkpoint bytes`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.payload.len());
        out.extend_from_slice(&(self.client_id as u32).to_le_bytes());
        out.extend_from_slice(&self.sample_count.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(KoalaError::Checkpoint("upload envelope truncated".into()));
        }
        Ok(Self {
            client_id: u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize,
            sample_count: u64::from_le_bytes(bytes[4..12].try_into().unwrap()),
            payload: bytes[12..].to_vec(),
        })
    }
}

/// Result of one client's local step.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub upload: Option<ClientUpload>,
    pub loss_trace: Vec<f64>,
}

/// Trains the client's model on its shard with per-client shuffling.
///
/// Returns the per-step loss trace. An empty shard is skipped with a warning.
pub fn local_train<S: Scalar>(
    client: &mut ClientState<S>,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    round: usize,
) -> Result<Vec<f64>> {
    if client.shard.is_empty() {
        log::warn!("client {} has an empty shard, skipping", client.id);
        return Ok(Vec::new());
    }
    let model = client.model.as_mut().ok_or_else(|| {
        KoalaError::InvalidArgument(format!("client {} has no model", client.id))
    })?;
    let mut rng = seeds::stream(seed, &format!("local-shuffle/{}", client.id), round as u64);
    train_supervised(
        model,
        &mut client.optimizer,
        &client.shard,
        epochs,
        batch_size,
        &mut rng,
        client.id,
    )
}
