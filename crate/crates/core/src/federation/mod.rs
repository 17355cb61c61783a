//! Round orchestration: select clients, hand each a rank-truncated copy of
//! the global model, train locally, aggregate, evaluate.
//!
//! The three methods share every step except the aggregation call; the
//! full fine-tune baseline simply has no adapters to truncate.

mod exec;
mod metrics;

use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};

pub use exec::Executor;
pub use metrics::{
    first_reach, rolling_average, summarize, RoundMetrics, Summary, TargetReach, SMOOTHING_WINDOW,
};

use crate::aggregate::{
    aggregate_biases, aggregate_full, overlay_slices, rbla_aggregate, zp_aggregate, ClientUpdate,
    LayerUpdate, Method, UpdateWeight,
};
use crate::data::{assign_ranks, staircase_partition, ClientPartition, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{purpose, SeededRng};
use crate::lora::{init_adapter, truncate, FrozenBase, LoraLinear};
use crate::nn::{
    backward, evaluate, forward, he_normal_weights, loss_and_grad, sgd_step, LayerWeight, MlpModel,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Participation {
    Full,
    /// Fraction of clients drawn uniformly without replacement each round.
    Random(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub method: Method,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub participation: Participation,
    pub seed: u64,
    pub n_clients: usize,
    /// Multiplier on `B·A` in every adapted layer.
    pub lora_scale: f64,
    /// Layer widths including input and output.
    pub layer_dims: Vec<usize>,
    pub record_timing: bool,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            method: Method::Rbla,
            rounds: 50,
            local_epochs: 2,
            batch_size: 64,
            learning_rate: 0.01,
            participation: Participation::Full,
            seed: 42,
            n_clients: 10,
            lora_scale: 1.0,
            layer_dims: crate::nn::MNIST_MLP_DIMS.to_vec(),
            record_timing: false,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(key, msg));
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be a finite non-negative number");
        }
        if let Participation::Random(f) = self.participation {
            if !(f > 0.0 && f <= 1.0) {
                return bad("participation_fraction", "must lie in (0, 1]");
            }
        }
        if self.n_clients == 0 {
            return bad("n_clients", "must be at least 1");
        }
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return bad("layer_dims", "need at least input and output widths, all positive");
        }
        Ok(())
    }

    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layer_dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Global model held by the server.
///
/// In adapter mode every layer is `W0 + B·A` at the largest rank any client
/// uses for that layer; in full fine-tune mode layers are plain matrices
/// initialised to the same `W0`.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub model: MlpModel,
    pub round_index: usize,
}

impl ServerState {
    /// `global_ranks[k]` is the adapter rank of layer `k`; ignored for FFT.
    pub fn init(cfg: &RoundConfig, global_ranks: &[usize]) -> Result<Self> {
        let bases = he_normal_weights(&cfg.layer_dims, &mut SeededRng::derive(cfg.seed, &[purpose::BASE_INIT]))?;
        let weights = if cfg.method.uses_adapters() {
            if global_ranks.len() != bases.len() {
                return Err(Error::Defect(format!(
                    "{} global ranks for {} layers",
                    global_ranks.len(),
                    bases.len()
                )));
            }
            bases
                .into_iter()
                .zip(global_ranks)
                .enumerate()
                .map(|(k, (w0, &r))| {
                    let (m, n) = w0.shape();
                    let mut rng = SeededRng::derive(cfg.seed, &[purpose::ADAPTER_INIT, k as u64]);
                    let adapter = init_adapter(&mut rng, m, n, r)?;
                    Ok(LayerWeight::Lora(LoraLinear::new(
                        Arc::new(FrozenBase::new(w0)),
                        adapter,
                        cfg.lora_scale,
                    )?))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            bases.into_iter().map(LayerWeight::Full).collect()
        };
        Ok(Self {
            model: MlpModel::from_weights(weights)?,
            round_index: 0,
        })
    }

    pub fn bases(&self) -> Vec<Option<&Arc<FrozenBase>>> {
        self.model
            .layers()
            .iter()
            .map(|l| match &l.weight {
                LayerWeight::Lora(l) => Some(&l.base),
                LayerWeight::Full(_) => None,
            })
            .collect()
    }
}

/// A participant: its data share and per-layer adapter ranks.
#[derive(Debug, Clone)]
pub struct ClientSpec {
    pub partition: ClientPartition,
    pub ranks: Vec<usize>,
}

impl ClientSpec {
    pub fn id(&self) -> usize {
        self.partition.client_id
    }
}

/// Client ids taking part in a round, sorted ascending.
pub fn select_clients(all_clients: &[usize], participation: Participation, rng: &mut SeededRng) -> Vec<usize> {
    let mut ids = all_clients.to_vec();
    ids.sort_unstable();
    match participation {
        Participation::Full => ids,
        Participation::Random(fraction) => {
            if ids.is_empty() {
                return ids;
            }
            // the epsilon keeps 0.2·10 from rounding up to 3
            let want = ((fraction * ids.len() as f64) - 1e-9).ceil() as usize;
            let k = want.clamp(1, ids.len());
            rng.sample_indices(ids.len(), k)
                .into_iter()
                .map(|i| ids[i])
                .collect()
        }
    }
}

/// The client's starting model: each adapter truncated to the client's rank,
/// biases and frozen bases shared with the server. Full-weight layers are
/// copied as they are.
pub fn distribute(server: &ServerState, ranks: &[usize]) -> Result<MlpModel> {
    let layers = server.model.layers();
    if ranks.len() != layers.len() {
        return Err(Error::Defect(format!(
            "{} ranks for a {}-layer model",
            ranks.len(),
            layers.len()
        )));
    }
    let weights = layers
        .iter()
        .zip(ranks)
        .map(|(layer, &rank)| match &layer.weight {
            LayerWeight::Lora(global) => {
                let adapter = truncate(&global.adapter, rank)?;
                Ok(LayerWeight::Lora(LoraLinear::new(
                    global.base.clone(),
                    adapter,
                    global.scale,
                )?))
            }
            LayerWeight::Full(w) => Ok(LayerWeight::Full(w.clone())),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = MlpModel::from_weights(weights)?;
    for (dst, src) in model.layers_mut().iter_mut().zip(layers) {
        dst.bias = src.bias.clone();
    }
    Ok(model)
}

/// Packages a trained client model for the server.
pub fn to_update(client_id: usize, model: &MlpModel, weight: f64) -> ClientUpdate {
    ClientUpdate {
        client_id,
        weight,
        layers: model
            .layers()
            .iter()
            .map(|l| LayerUpdate {
                weight: match &l.weight {
                    LayerWeight::Lora(l) => UpdateWeight::Adapter(l.adapter.clone()),
                    LayerWeight::Full(w) => UpdateWeight::Full(w.clone()),
                },
                bias: l.bias.clone(),
            })
            .collect(),
    }
}

/// `local_epochs` passes of shuffled minibatch SGD over the client's
/// samples. Only adapters and biases move in adapter mode. Returns `None`
/// (with a warning) for a client without data.
pub fn local_train(
    mut model: MlpModel,
    partition: &ClientPartition,
    train: &Dataset,
    cfg: &RoundConfig,
    rng: &mut SeededRng,
) -> Result<Option<ClientUpdate>> {
    if partition.is_empty() {
        warn!("client {} has no samples; skipping", partition.client_id);
        return Ok(None);
    }
    let mut order = partition.sample_indices.clone();
    for _ in 0..cfg.local_epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let x = train.images.gather_rows(batch)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let (logits, cache) = forward(&model, &x)?;
            let (_, dlogits) = loss_and_grad(&logits, &labels)?;
            let grads = backward(&model, &cache, &dlogits)?;
            sgd_step(&mut model, &grads, cfg.learning_rate)?;
        }
    }
    Ok(Some(to_update(partition.client_id, &model, partition.len() as f64)))
}

/// Builds the next global model from this round's updates without touching
/// `current`. Adapter slices that no update covers keep their old values.
pub fn aggregate_model(current: &MlpModel, updates: &[ClientUpdate], method: Method) -> Result<MlpModel> {
    let mut next = current.clone();
    for (k, layer) in next.layers_mut().iter_mut().enumerate() {
        layer.bias = aggregate_biases(updates, k)?;
        match (&mut layer.weight, method) {
            (LayerWeight::Lora(global), Method::Rbla | Method::Zp) => {
                let fresh = if method == Method::Rbla {
                    rbla_aggregate(updates, k)?
                } else {
                    zp_aggregate(updates, k)?
                };
                global.adapter = overlay_slices(&global.adapter, &fresh)?;
            }
            (LayerWeight::Full(w), Method::Fft) => *w = aggregate_full(updates, k)?,
            _ => {
                return Err(Error::Defect(format!(
                    "layer {k}: server weight kind does not fit method {method}"
                )))
            }
        }
    }
    Ok(next)
}

/// A configured simulation over borrowed train/test sets.
#[derive(Clone)]
pub struct Federation<'a> {
    pub cfg: RoundConfig,
    pub server: ServerState,
    pub clients: Vec<ClientSpec>,
    train: &'a Dataset,
    test: &'a Dataset,
    executor: Executor,
}

impl<'a> Federation<'a> {
    /// Partitions `train` with the staircase scheme, assigns ranks and
    /// initialises the server.
    pub fn new(cfg: RoundConfig, train: &'a Dataset, test: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        if test.is_empty() {
            return Err(Error::Empty("test set"));
        }
        let partitions = staircase_partition(
            train,
            cfg.n_clients,
            &mut SeededRng::derive(cfg.seed, &[purpose::PARTITION]),
        )?;
        let shapes = cfg.layer_shapes();
        let ranks = assign_ranks(&partitions, &shapes);
        let clients: Vec<ClientSpec> = partitions
            .into_iter()
            .zip(ranks)
            .map(|(partition, ranks)| ClientSpec { partition, ranks })
            .collect();
        Self::with_clients(cfg, clients, train, test)
    }

    /// Uses the given clients as they are; global ranks are the per-layer
    /// maxima of the client ranks.
    pub fn with_clients(
        cfg: RoundConfig,
        clients: Vec<ClientSpec>,
        train: &'a Dataset,
        test: &'a Dataset,
    ) -> Result<Self> {
        cfg.validate()?;
        if clients.is_empty() {
            return Err(Error::Empty("clients"));
        }
        let depth = cfg.layer_dims.len() - 1;
        let global_ranks: Vec<usize> = (0..depth)
            .map(|k| clients.iter().map(|c| c.ranks.get(k).copied().unwrap_or(0)).max().unwrap_or(0))
            .collect();
        let server = ServerState::init(&cfg, &global_ranks)?;
        Ok(Self {
            cfg,
            server,
            clients,
            train,
            test,
            executor: Executor::default(),
        })
    }

    pub fn with_executor(mut self, executor: Executor) -> Self {
        self.executor = executor;
        self
    }

    pub fn evaluate_global(&self) -> Result<crate::nn::Evaluation> {
        evaluate(&self.server.model, &self.test.images, &self.test.labels)
    }

    /// Metrics for the untrained global model.
    pub fn initial_metrics(&self) -> Result<RoundMetrics> {
        let eval = self.evaluate_global()?;
        Ok(RoundMetrics {
            round_index: self.server.round_index,
            test_accuracy: eval.accuracy,
            test_loss: eval.loss,
            selected_clients: vec![],
            wall_millis: 0,
        })
    }

    /// One full round. The server state is replaced only once every step has
    /// succeeded.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let started = Instant::now();
        let round = self.server.round_index + 1;
        let ids: Vec<usize> = self.clients.iter().map(ClientSpec::id).collect();
        let selected = select_clients(
            &ids,
            self.cfg.participation,
            &mut SeededRng::derive(self.cfg.seed, &[purpose::SELECTION, round as u64]),
        );
        let participants: Vec<&ClientSpec> = self
            .clients
            .iter()
            .filter(|c| selected.binary_search(&c.id()).is_ok())
            .collect();

        let server = &self.server;
        let cfg = &self.cfg;
        let train = self.train;
        let results = self.executor.map(&participants, |client| {
            let model = distribute(server, &client.ranks)?;
            let mut rng =
                SeededRng::derive(cfg.seed, &[purpose::SHUFFLE, client.id() as u64, round as u64]);
            local_train(model, &client.partition, train, cfg, &mut rng)
        });
        let mut updates = Vec::with_capacity(results.len());
        for result in results {
            if let Some(update) = result? {
                updates.push(update);
            }
        }

        let next = if updates.is_empty() {
            warn!("round {round}: no client produced an update");
            self.server.model.clone()
        } else {
            aggregate_model(&self.server.model, &updates, self.cfg.method)?
        };
        let eval = evaluate(&next, &self.test.images, &self.test.labels)?;

        self.server = ServerState {
            model: next,
            round_index: round,
        };
        let wall_millis = if self.cfg.record_timing {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        info!(
            "{} round {round}: acc {:.4} loss {:.4} clients {:?}",
            self.cfg.method, eval.accuracy, eval.loss, selected
        );
        Ok(RoundMetrics {
            round_index: round,
            test_accuracy: eval.accuracy,
            test_loss: eval.loss,
            selected_clients: selected,
            wall_millis,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub metrics: Vec<RoundMetrics>,
    pub summary: Summary,
}

/// Round-0 evaluation followed by `cfg.rounds` rounds.
pub fn run_experiment(
    cfg: RoundConfig,
    train: &Dataset,
    test: &Dataset,
    targets: &[f64],
    executor: Executor,
) -> Result<ExperimentResult> {
    let rounds = cfg.rounds;
    let mut fed = Federation::new(cfg, train, test)?.with_executor(executor);
    let mut metrics = Vec::with_capacity(rounds + 1);
    metrics.push(fed.initial_metrics()?);
    for _ in 0..rounds {
        metrics.push(fed.run_round()?);
    }
    let summary = summarize(&metrics, targets);
    Ok(ExperimentResult { metrics, summary })
}
