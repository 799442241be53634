//! Round-based protocol: client sampling, local training, upload, reverse
//! then forward distillation on the server, dispatch, and the FedAvg baseline.

mod client;
mod server;
mod training;

use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState};
use crate::checkpoint::{self, encode_adapter, encode_model};
use crate::data::{evaluate, Evaluation, LabeledDataset, ProxyDataset};
use crate::distillation::{
    soft_labels, DistillLossConfig, ForwardTargets, LogitBundle, RefinementConfig,
};
use crate::error::{KoalaError, Result};
use crate::models::{BridgingMatrix, Model};
use crate::scalar::Scalar;
use crate::seeds;

pub use client::{local_train, ClientState, ClientUpload, LocalOutcome};
pub use server::{aggregate_homo, fedavg_adapters, forward_distill_pass, reverse_distill_pass};
pub use training::{minibatches, train_supervised};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// All clients share one small-model architecture.
    Homo,
    /// Each client runs its own small-model architecture.
    Hete,
    /// Clients fine-tune the large model's adapter locally; FedAvg on adapters.
    Baseline,
}

/// Protocol hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub mode: Mode,
    pub participation: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub local: AdamConfig,
    pub reverse: AdamConfig,
    pub forward: AdamConfig,
    pub refinement: RefinementConfig,
    pub loss: DistillLossConfig,
    pub distill_batch_size: usize,
    pub forward_distillation: bool,
    /// Clients removed from every sampled set (failure injection).
    pub dropped_clients: Vec<usize>,
    pub parallel_clients: usize,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Homo,
            participation: 1.0,
            local_epochs: 1,
            batch_size: 32,
            local: AdamConfig::new(1e-3, 1e-6),
            reverse: AdamConfig::new(1e-3, 1e-6),
            forward: AdamConfig::new(1e-4, 1e-6),
            refinement: RefinementConfig::default(),
            loss: DistillLossConfig::default(),
            distill_batch_size: 32,
            forward_distillation: true,
            dropped_clients: Vec::new(),
            parallel_clients: 1,
            seed: 0,
        }
    }
}

/// Per-client mean local training loss for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientLoss {
    pub client: usize,
    pub loss: f64,
}

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_loss_sum: f64,
    pub test_accuracy: f64,
    pub client_losses: Vec<ClientLoss>,
    pub reverse_loss: Option<f64>,
    pub forward_loss: Option<f64>,
    pub refinement_fallbacks: Option<usize>,
    /// Wall-clock time of the round; only recorded when timing is enabled.
    pub elapsed_ms: Option<u64>,
    /// Loss gap against a baseline run at the same round, when one is supplied.
    pub loss_gap: Option<f64>,
}

/// Picks `ceil(fraction * n)` distinct clients, deterministic per `(seed, round)`.
pub fn sample_clients(n: usize, fraction: f64, seed: u64, round: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(KoalaError::EmptyClientSet);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(KoalaError::InvalidArgument(format!(
            "participation fraction must be in (0, 1], got {fraction}"
        )));
    }
    let k = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    if k == n {
        return Ok((0..n).collect());
    }
    let mut rng = seeds::stream(seed, "sampling", round as u64);
    let mut picked = sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// `(L(koala) - L(baseline)) / |D|` over summed test losses.
pub fn compute_loss_gap(koala: &Evaluation, baseline: &Evaluation) -> Result<f64> {
    if koala.examples != baseline.examples || koala.fingerprint != baseline.fingerprint {
        return Err(KoalaError::MismatchedTestSet(format!(
            "{} examples (fingerprint {:x}) vs {} ({:x})",
            koala.examples, koala.fingerprint, baseline.examples, baseline.fingerprint
        )));
    }
    if koala.examples == 0 {
        return Err(KoalaError::MismatchedTestSet("empty test set".into()));
    }
    Ok((koala.loss_sum - baseline.loss_sum) / koala.examples as f64)
}

/// Initial small models handed to [`FederationState::new`].
#[derive(Debug, Clone)]
pub enum SmallModels<S> {
    /// Global small model, dispatched to every active client each round.
    Homo(Model<S>),
    /// One model per client, owned by that client.
    Hete(Vec<Model<S>>),
    Baseline,
}

/// Server-side round state plus the simulated clients.
#[derive(Debug, Clone)]
pub struct FederationState<S> {
    pub config: FederationConfig,
    /// Large model; only its adapter ever changes.
    pub large: Model<S>,
    /// Reverse-distillation optimizer (or unused in baseline mode).
    pub large_optimizer: AdamState<S>,
    /// Homo: aggregated global small model, its bridge and forward optimizer.
    pub global_small: Option<Model<S>>,
    pub global_bridge: Option<BridgingMatrix<S>>,
    pub global_forward_optimizer: Option<AdamState<S>>,
    /// Hete: server copies of each client's latest upload, bridges and forward optimizers.
    pub client_models: Vec<Option<Model<S>>>,
    pub bridges: Vec<BridgingMatrix<S>>,
    pub forward_optimizers: Vec<AdamState<S>>,
    pub clients: Vec<ClientState<S>>,
    /// Baseline: clients that already received the full large model.
    downloaded: Vec<bool>,
    /// Wire payloads received from clients in the last completed round.
    uploads: Vec<ClientUpload>,
    proxy: Arc<ProxyDataset<S>>,
    test: Arc<LabeledDataset<S>>,
    pub round: usize,
    pub total_rounds: usize,
    pub active: Vec<usize>,
    /// Record wall-clock round time in metrics (breaks byte-identical reruns).
    pub record_elapsed: bool,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl<S: Scalar> FederationState<S> {
    /// `shards[i]` becomes client `i`'s private data.
    pub fn new(
        config: FederationConfig,
        large: Model<S>,
        small: SmallModels<S>,
        shards: Vec<LabeledDataset<S>>,
        proxy: ProxyDataset<S>,
        test: LabeledDataset<S>,
        total_rounds: usize,
    ) -> Result<Self> {
        if shards.is_empty() {
            return Err(KoalaError::EmptyClientSet);
        }
        config.refinement.validate()?;
        let mut large = large;
        large.freeze_backbone();
        let n = shards.len();
        let seed = config.seed;
        let large_hidden = large.spec().hidden_dim();

        let mut state = Self {
            large_optimizer: AdamState::new(config.reverse),
            global_small: None,
            global_bridge: None,
            global_forward_optimizer: None,
            client_models: vec![None; n],
            bridges: Vec::new(),
            forward_optimizers: Vec::new(),
            clients: Vec::with_capacity(n),
            downloaded: vec![false; n],
            uploads: Vec::new(),
            proxy: Arc::new(proxy),
            test: Arc::new(test),
            round: 0,
            total_rounds,
            active: Vec::new(),
            record_elapsed: false,
            pool: None,
            large,
            config,
        };

        let check_classes = |m: &Model<S>| {
            if m.classes() != state.large.classes() {
                return Err(KoalaError::ClassMismatch {
                    teacher: state.large.classes(),
                    student: m.classes(),
                });
            }
            Ok(())
        };
        let mut locals: Vec<Option<Model<S>>> = vec![None; n];
        match (state.config.mode, small) {
            (Mode::Homo, SmallModels::Homo(global)) => {
                check_classes(&global)?;
                state.global_bridge = Some(BridgingMatrix::new(
                    usize::MAX,
                    global.spec().hidden_dim(),
                    large_hidden,
                    seeds::derive_seed(seed, "bridge", u64::MAX),
                ));
                state.global_forward_optimizer = Some(AdamState::new(state.config.forward));
                state.global_small = Some(global);
            }
            (Mode::Hete, SmallModels::Hete(models)) => {
                if models.len() != n {
                    return Err(KoalaError::InvalidArgument(format!(
                        "{} small models for {n} clients",
                        models.len()
                    )));
                }
                for (i, m) in models.iter().enumerate() {
                    check_classes(m)?;
                    state.bridges.push(BridgingMatrix::new(
                        i,
                        m.spec().hidden_dim(),
                        large_hidden,
                        seeds::derive_seed(seed, "bridge", i as u64),
                    ));
                    state.forward_optimizers.push(AdamState::new(state.config.forward));
                }
                locals = models.into_iter().map(Some).collect();
            }
            (Mode::Baseline, SmallModels::Baseline) => {}
            (mode, _) => {
                return Err(KoalaError::InvalidArgument(format!(
                    "small-model setup does not match mode {mode:?}"
                )))
            }
        }
        for (i, (shard, model)) in shards.into_iter().zip(locals).enumerate() {
            state
                .clients
                .push(ClientState::new(i, shard, model, state.config.local));
        }
        if state.config.parallel_clients > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(state.config.parallel_clients)
                .build()
                .map_err(|e| KoalaError::InvalidArgument(format!("thread pool: {e}")))?;
            state.pool = Some(Arc::new(pool));
        }
        Ok(state)
    }

    pub fn proxy(&self) -> &ProxyDataset<S> {
        &self.proxy
    }

    pub fn test_set(&self) -> &LabeledDataset<S> {
        &self.test
    }

    /// Uploads received in the last completed round, as sent over the wire.
    pub fn last_uploads(&self) -> &[ClientUpload] {
        &self.uploads
    }

    pub fn evaluate_large(&self) -> Result<Evaluation> {
        evaluate(&self.large, &self.test)
    }

    /// Evaluation-only record for the current round (round 0 before training).
    pub fn snapshot_metrics(&self) -> Result<RoundMetrics> {
        let e = self.evaluate_large()?;
        Ok(RoundMetrics {
            round: self.round,
            test_loss_sum: e.loss_sum,
            test_accuracy: e.accuracy,
            client_losses: Vec::new(),
            reverse_loss: None,
            forward_loss: None,
            refinement_fallbacks: None,
            elapsed_ms: None,
            loss_gap: None,
        })
    }

    fn sample_active(&self, round: usize) -> Result<Vec<usize>> {
        let picked = sample_clients(
            self.clients.len(),
            self.config.participation,
            self.config.seed,
            round,
        )?;
        let active: Vec<usize> = picked
            .into_iter()
            .filter(|i| !self.config.dropped_clients.contains(i))
            .collect();
        if active.is_empty() {
            return Err(KoalaError::EmptyClientSet);
        }
        Ok(active)
    }

    /// Server-to-client transfer at round start.
    fn dispatch_start(&mut self) -> Result<()> {
        match self.config.mode {
            Mode::Homo => {
                let global = self.global_small.as_ref().expect("homo state has a global model");
                let payload = encode_model(global);
                for &i in &self.active {
                    self.clients[i].receive(&payload)?;
                }
            }
            Mode::Baseline => {
                let full = encode_model(&self.large);
                let adapter = encode_adapter(&self.large);
                for &i in &self.active {
                    let payload = if self.downloaded[i] { &adapter } else { &full };
                    self.clients[i].receive(payload)?;
                    self.downloaded[i] = true;
                }
            }
            Mode::Hete => {}
        }
        Ok(())
    }

    /// Local training on every active client, possibly in parallel.
    fn run_clients(&mut self, round: usize) -> Result<Vec<LocalOutcome>> {
        let (epochs, batch, seed, mode) = (
            self.config.local_epochs,
            self.config.batch_size,
            self.config.seed,
            self.config.mode,
        );
        let active = &self.active;
        let mut selected: Vec<&mut ClientState<S>> = self
            .clients
            .iter_mut()
            .filter(|c| active.contains(&c.id))
            .collect();
        let work = |c: &mut &mut ClientState<S>| -> Result<LocalOutcome> {
            let trace = local_train(c, epochs, batch, seed, round)?;
            let upload = if trace.is_empty() && c.shard().is_empty() {
                None
            } else {
                let model = c.model.as_ref().expect("trained client has a model");
                let payload = match mode {
                    Mode::Baseline => encode_adapter(model),
                    Mode::Homo | Mode::Hete => encode_model(model),
                };
                Some(ClientUpload {
                    client_id: c.id,
                    sample_count: c.sample_count(),
                    payload,
                })
            };
            Ok(LocalOutcome {
                upload,
                loss_trace: trace,
            })
        };
        match &self.pool {
            Some(pool) => pool.install(|| selected.par_iter_mut().map(work).collect()),
            None => selected.iter_mut().map(work).collect(),
        }
    }

    /// Active clients expected to upload this round (empty shards are skipped).
    fn uploaders(&self) -> Vec<usize> {
        self.active
            .iter()
            .copied()
            .filter(|&i| !self.clients[i].shard().is_empty())
            .collect()
    }

    fn decode_uploads(&self, uploads: &[ClientUpload]) -> Result<Vec<(usize, u64, Model<S>)>> {
        let expected = self.uploaders();
        if expected.is_empty() {
            return Err(KoalaError::EmptyClientSet);
        }
        let mut out = Vec::with_capacity(expected.len());
        for i in expected {
            let up = uploads
                .iter()
                .find(|u| u.client_id == i)
                .ok_or(KoalaError::MissingUpload {
                    round: self.round + 1,
                    client: i,
                })?;
            let model = match self.config.mode {
                Mode::Baseline => {
                    let mut m = self.large.clone();
                    checkpoint::decode(&up.payload)?.apply_to(&mut m)?;
                    m
                }
                _ => checkpoint::decode_model(&up.payload)?,
            };
            out.push((i, up.sample_count, model));
        }
        Ok(out)
    }

    /// Reverse distillation (or FedAvg in baseline mode). Returns the mean
    /// reverse loss and the refinement fallback count (hete only).
    pub fn run_reverse_phase(&mut self, uploads: &[ClientUpload]) -> Result<(Option<f64>, Option<usize>)> {
        let decoded = self.decode_uploads(uploads)?;
        let counts: Vec<u64> = decoded.iter().map(|d| d.1).collect();
        let t = S::of(self.config.refinement.temperature);
        let (targets, fallbacks) = match self.config.mode {
            Mode::Baseline => {
                let models: Vec<&Model<S>> = decoded.iter().map(|d| &d.2).collect();
                fedavg_adapters(&mut self.large, &models, &counts)?;
                return Ok((None, None));
            }
            Mode::Homo => {
                let models: Vec<&Model<S>> = decoded.iter().map(|d| &d.2).collect();
                let global = aggregate_homo(&models, &counts)?;
                let targets = soft_labels(&global, &self.proxy.inputs, t)?;
                self.global_small = Some(global);
                (targets, None)
            }
            Mode::Hete => {
                let mut per_client = Vec::with_capacity(decoded.len());
                for (i, _, m) in decoded {
                    per_client.push((i, m.forward(&self.proxy.inputs)?));
                    self.client_models[i] = Some(m);
                }
                let bundle = LogitBundle {
                    per_client,
                    sample_counts: counts,
                };
                let consensus = bundle.consensus(&self.config.refinement)?;
                if consensus.degenerate_rows > 0 {
                    log::warn!(
                        "round {}: {} constant logit rows fell back to the flat refinement",
                        self.round + 1,
                        consensus.degenerate_rows
                    );
                }
                (consensus.soft_labels, Some(consensus.degenerate_rows))
            }
        };
        let loss = reverse_distill_pass(
            &mut self.large,
            &mut self.large_optimizer,
            &self.proxy,
            &targets,
            t,
            self.config.distill_batch_size,
            self.config.seed,
            self.round + 1,
        )?;
        Ok((Some(loss), fallbacks))
    }

    /// Forward distillation from the large model into the small model(s).
    /// Returns the mean forward loss (averaged over clients in hete mode).
    pub fn run_forward_phase(&mut self) -> Result<f64> {
        let t = S::of(self.config.refinement.temperature);
        let targets = ForwardTargets::compute(&self.large, &self.proxy.inputs, t)?;
        let round = self.round + 1;
        let cfg = &self.config;
        match cfg.mode {
            Mode::Homo => forward_distill_pass(
                self.global_small.as_mut().expect("homo global model"),
                self.global_bridge.as_mut().expect("homo bridge"),
                self.global_forward_optimizer.as_mut().expect("homo optimizer"),
                &self.proxy,
                &targets,
                t,
                &cfg.loss,
                cfg.distill_batch_size,
                cfg.seed,
                round,
            ),
            Mode::Hete => {
                let uploaders = self.uploaders();
                let mut total = 0.0;
                for &i in &uploaders {
                    let student = self.client_models[i].as_mut().ok_or(KoalaError::MissingUpload {
                        round,
                        client: i,
                    })?;
                    total += forward_distill_pass(
                        student,
                        &mut self.bridges[i],
                        &mut self.forward_optimizers[i],
                        &self.proxy,
                        &targets,
                        t,
                        &cfg.loss,
                        cfg.distill_batch_size,
                        cfg.seed,
                        round,
                    )?;
                }
                Ok(total / uploaders.len() as f64)
            }
            Mode::Baseline => Err(KoalaError::InvalidArgument(
                "baseline mode has no forward phase".into(),
            )),
        }
    }

    /// Hete: send each updated small model back to its owner.
    fn dispatch_end(&mut self) -> Result<()> {
        if self.config.mode == Mode::Hete {
            for i in self.uploaders() {
                if let Some(m) = &self.client_models[i] {
                    let payload = encode_model(m);
                    self.clients[i].receive(&payload)?;
                }
            }
        }
        Ok(())
    }

    fn round_inner(&mut self) -> Result<RoundMetrics> {
        let started = Instant::now();
        let round = self.round + 1;
        self.active = self.sample_active(round)?;
        self.dispatch_start()?;
        let outcomes = self.run_clients(round)?;

        let mut client_losses = Vec::new();
        let mut uploads = Vec::new();
        for (&i, o) in self.active.iter().zip(&outcomes) {
            if !o.loss_trace.is_empty() {
                client_losses.push(ClientLoss {
                    client: i,
                    loss: o.loss_trace.iter().sum::<f64>() / o.loss_trace.len() as f64,
                });
            }
            uploads.extend(o.upload.clone());
        }
        let (reverse_loss, refinement_fallbacks) = self.run_reverse_phase(&uploads)?;
        let forward_loss = if self.config.mode != Mode::Baseline && self.config.forward_distillation {
            Some(self.run_forward_phase()?)
        } else {
            None
        };
        self.dispatch_end()?;
        self.uploads = uploads;

        let e = self.evaluate_large()?;
        self.round = round;
        Ok(RoundMetrics {
            round,
            test_loss_sum: e.loss_sum,
            test_accuracy: e.accuracy,
            client_losses,
            reverse_loss,
            forward_loss,
            refinement_fallbacks,
            elapsed_ms: self
                .record_elapsed
                .then(|| started.elapsed().as_millis() as u64),
            loss_gap: None,
        })
    }

    /// Runs one full round. On error the state is restored to its pre-round value.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        if self.round >= self.total_rounds {
            return Err(KoalaError::RoundsExhausted {
                round: self.round,
                total: self.total_rounds,
            });
        }
        let checkpoint = self.clone();
        self.round_inner().inspect_err(|_| *self = checkpoint)
    }
}
