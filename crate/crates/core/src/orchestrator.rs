//! Round-based federated protocol.
//!
//! One [`Experiment`] owns the server and every client. A round broadcasts the
//! server model, runs each client's two-phase local update (in parallel when
//! a thread pool is configured), collects masks, computes aggregation weights
//! and folds the shared submodels back into the server model. Baselines run
//! through the same code path with the mask and weighting pinned.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cowa::{self, ScoreOptions, NEUTRAL_GRAD_SCORE};
use crate::data::{self, ClientDataset, PartitionSpec, Pool};
use crate::error::{check_len, Error, Result};
use crate::mamo::{MamoConfig, MamoState, Phase};
use crate::model::{self, ModelSpec};
use crate::param::{elementwise_mul, mask_complement, mask_union, Mask, ParameterVector};
use crate::pwpm::{self, PersonalizationConfig};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    CoPfl,
    Fedavg,
    FedavgFt,
    LocalOnly,
    FixedHead,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 5] = [
        AlgorithmKind::CoPfl,
        AlgorithmKind::Fedavg,
        AlgorithmKind::FedavgFt,
        AlgorithmKind::LocalOnly,
        AlgorithmKind::FixedHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmKind::CoPfl => "co_pfl",
            AlgorithmKind::Fedavg => "fedavg",
            AlgorithmKind::FedavgFt => "fedavg_ft",
            AlgorithmKind::LocalOnly => "local_only",
            AlgorithmKind::FixedHead => "fixed_head",
        }
    }

    fn communicates(self) -> bool {
        self != AlgorithmKind::LocalOnly
    }

    /// Baselines evaluate the consensus model; everything else evaluates the
    /// client's own model.
    fn evaluates_server_model(self) -> bool {
        matches!(self, AlgorithmKind::Fedavg | AlgorithmKind::FedavgFt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CowaOptions {
    pub enabled: bool,
    pub score: ScoreOptions,
    /// Score only the shared coordinates of each client's update.
    pub shared_only_direction: bool,
}

impl Default for CowaOptions {
    fn default() -> Self {
        Self {
            enabled: true,
            score: ScoreOptions::default(),
            shared_only_direction: false,
        }
    }
}

/// Everything a round needs besides state.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub algorithm: AlgorithmKind,
    pub seed: u64,
    pub local_iters: usize,
    pub batch_size: usize,
    pub optimizer: MamoConfig,
    pub personalization: PersonalizationConfig,
    pub cowa: CowaOptions,
    pub renorm_per_coord: bool,
    pub ft_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub model: ParameterVector,
    pub mask: Mask,
    pub optimizer: MamoState,
    /// Meaningful only where `mask` is set.
    pub retained_personalized: ParameterVector,
    pub data: ClientDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub model: ParameterVector,
    pub prev_model: Option<ParameterVector>,
    pub mask: Mask,
    pub weights: Vec<f64>,
    pub round: usize,
}

/// What a client sends back after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    /// Model the round started from (after reconstitution).
    pub entry_model: ParameterVector,
    /// `entry_model - new model`.
    pub delta: ParameterVector,
    pub mask: Mask,
}

/// Indices of the samples used at local step `step`.
///
/// Samples are drawn without replacement within an epoch; each epoch within a
/// (round, phase) gets its own keyed shuffle.
pub fn minibatch_indices(
    n: usize,
    batch_size: usize,
    seed: u64,
    client: usize,
    round: usize,
    phase: Phase,
    step: usize,
) -> Vec<usize> {
    if batch_size >= n {
        return (0..n).collect();
    }
    let per_epoch = n.div_ceil(batch_size);
    let (epoch, slot) = (step / per_epoch, step % per_epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::keyed(
        seed,
        &[rng::TAG_BATCH, client as u64, round as u64, phase.key(), epoch as u64],
    ));
    let start = slot * batch_size;
    order[start..(start + batch_size).min(n)].to_vec()
}

/// How a client's mask evolves.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskPolicy {
    Dynamic(PersonalizationConfig),
    Pinned,
}

fn run_phase(
    spec: &ModelSpec,
    client: &ClientState,
    optimizer: &mut MamoState,
    start: &ParameterVector,
    phase: Phase,
    hyper: &HyperParams,
    round: usize,
) -> Result<ParameterVector> {
    let mut w = start.clone();
    let train = &client.data.train;
    for t in 0..hyper.local_iters {
        let idx = minibatch_indices(train.len(), hyper.batch_size, hyper.seed, client.id, round, phase, t);
        let (_, grad) = model::loss_and_grad(spec, &w, &train.select(&idx))?;
        optimizer.apply_step(&mut w, &grad, &client.mask, phase)?;
    }
    Ok(w)
}

/// One client's local round: reconstitute, personalized phase, shared phase,
/// mask growth. On error the client is left exactly as it was.
pub fn client_round(
    spec: &ModelSpec,
    client: &mut ClientState,
    broadcast_model: &ParameterVector,
    broadcast_mask: &Mask,
    hyper: &HyperParams,
    policy: &MaskPolicy,
    round: usize,
) -> Result<ClientUpdate> {
    let d = client.model.len();
    check_len(d, broadcast_model.len())?;
    check_len(d, broadcast_mask.len())?;
    let mask = &client.mask;

    let entry: ParameterVector = ParameterVector::from_vec(
        (0..d)
            .map(|i| {
                if mask.get(i) {
                    client.retained_personalized[i]
                } else {
                    broadcast_model[i]
                }
            })
            .collect(),
    );

    let mut optimizer = client.optimizer.clone();
    let popcount = mask.popcount();
    // A phase whose mask selects nothing cannot move any coordinate.
    let personalized = if popcount > 0 {
        run_phase(spec, client, &mut optimizer, &entry, Phase::Personalized, hyper, round)?
    } else {
        entry.clone()
    };
    let shared = if popcount < d {
        run_phase(spec, client, &mut optimizer, &entry, Phase::Shared, hyper, round)?
    } else {
        entry.clone()
    };
    let next = elementwise_mul(&shared, &mask_complement(mask))?.add(&elementwise_mul(&personalized, mask)?)?;
    if !next.is_finite() {
        return Err(Error::Numeric(format!("client {} diverged", client.id)));
    }

    let diff = pwpm::param_diff(&entry, &next)?;
    let new_mask = match policy {
        MaskPolicy::Dynamic(cfg) => pwpm::update_mask(mask, &diff.magnitude, cfg)?,
        MaskPolicy::Pinned => mask.clone(),
    };

    client.retained_personalized = elementwise_mul(&next, &new_mask)?;
    client.model = next;
    client.mask = new_mask.clone();
    client.optimizer = optimizer;
    Ok(ClientUpdate {
        entry_model: entry,
        delta: diff.signed,
        mask: new_mask,
    })
}

/// `Σ α_n w_n ∘ (1 - m_n)`, summed in the order given.
///
/// With `renorm_per_coord`, each coordinate is divided by the weight of the
/// clients that actually share it.
pub fn aggregate_shared(
    clients: &[(&ParameterVector, &Mask)],
    alphas: &[f64],
    renorm_per_coord: bool,
) -> Result<ParameterVector> {
    check_len(clients.len(), alphas.len())?;
    let d = clients
        .first()
        .map(|(w, _)| w.len())
        .ok_or_else(|| Error::arg("aggregation needs at least one client"))?;
    let mut sum = vec![0.0; d];
    let mut mass = vec![0.0; d];
    for (&(w, m), &a) in clients.iter().zip(alphas) {
        check_len(d, w.len())?;
        check_len(d, m.len())?;
        for i in 0..d {
            if !m.get(i) {
                sum[i] += a * w[i];
                mass[i] += a;
            }
        }
    }
    if renorm_per_coord {
        for (s, &z) in sum.iter_mut().zip(&mass) {
            *s = if z > 0.0 { *s / z } else { 0.0 };
        }
    }
    Ok(ParameterVector::from_vec(sum))
}

/// `w_new = g ∘ (1 - m0) + w_old ∘ m0`, advancing the round counter.
pub fn server_update(server: &mut ServerState, g_new: &ParameterVector, union: Mask) -> Result<()> {
    check_len(server.model.len(), g_new.len())?;
    check_len(server.model.len(), union.len())?;
    let model = ParameterVector::from_vec(
        (0..g_new.len())
            .map(|i| if union.get(i) { server.model[i] } else { g_new[i] })
            .collect(),
    );
    server.prev_model = Some(std::mem::replace(&mut server.model, model));
    server.mask = union;
    server.round += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client_id: usize,
    pub test_acc: f64,
    pub train_loss: f64,
    pub alpha: f64,
    pub gamma_grad: f64,
    pub gamma_data: f64,
    pub mask_popcount: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<ClientRecord>,
    pub mean_acc: f64,
    pub std_acc: f64,
    /// Whether the weights came from contribution scores (vs. uniform).
    pub scored: bool,
    pub broadcast_mask_popcount: usize,
    pub server_mask_popcount: usize,
    /// `(client_id, message)` for clients whose local round failed.
    pub failures: Vec<(usize, String)>,
    pub wall_ms: f64,
}

/// Facts about a run worth keeping next to its results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub num_params: usize,
    pub class_sets: Vec<Vec<usize>>,
    pub class_sets_overlap: bool,
    pub scoring_placement: String,
    pub mask_budget: usize,
}

/// Everything needed to build an [`Experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSetup {
    pub hyper: HyperParams,
    pub model: ModelSpec,
    pub partition: PartitionSpec,
    pub pool: Pool,
}

pub struct Experiment {
    spec: ModelSpec,
    hyper: HyperParams,
    policy: MaskPolicy,
    server: ServerState,
    clients: Vec<ClientState>,
    threads: Option<rayon::ThreadPool>,
    metadata: RunMetadata,
}

impl Experiment {
    pub fn new(setup: ExperimentSetup, jobs: usize) -> Result<Self> {
        let ExperimentSetup {
            hyper,
            model: spec,
            partition,
            pool,
        } = setup;
        spec.validate()?;
        if pool.data.dim() != spec.input_dim {
            return Err(Error::arg(format!(
                "data has {} features, model expects {}",
                pool.data.dim(),
                spec.input_dim
            )));
        }
        let datasets = data::partition(&pool, &partition)?;
        let d = spec.num_params();
        let init = model::init_params(&spec, hyper.seed);

        let (policy, start_mask) = match hyper.algorithm {
            AlgorithmKind::CoPfl => (MaskPolicy::Dynamic(hyper.personalization), Mask::zeros(d)),
            AlgorithmKind::FixedHead => {
                let mut m = Mask::zeros(d);
                spec.head_range().for_each(|i| m.set(i));
                (MaskPolicy::Pinned, m)
            }
            _ => (MaskPolicy::Pinned, Mask::zeros(d)),
        };

        let metadata = RunMetadata {
            num_params: d,
            class_sets: datasets.iter().map(|c| c.class_set.clone()).collect(),
            class_sets_overlap: partition.classes_overlap(),
            scoring_placement: "server-side simulation of client scoring".into(),
            mask_budget: hyper.personalization.max_personalized(d),
        };
        let n = datasets.len();
        let clients = datasets
            .into_iter()
            .enumerate()
            .map(|(id, data)| ClientState {
                id,
                retained_personalized: elementwise_mul(&init, &start_mask).expect("same length"),
                model: init.clone(),
                mask: start_mask.clone(),
                optimizer: MamoState::new(d, hyper.optimizer),
                data,
            })
            .collect();
        let threads = if jobs > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(jobs)
                    .build()
                    .map_err(|e| Error::arg(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            spec,
            hyper,
            policy,
            server: ServerState {
                model: init,
                prev_model: None,
                mask: Mask::zeros(d),
                weights: vec![1.0 / n as f64; n],
                round: 0,
            },
            clients,
            threads,
            metadata,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.hyper
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn metadata(&self) -> &RunMetadata {
        &self.metadata
    }

    fn in_pool<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.threads {
            Some(pool) => pool.install(f),
            None => f(),
        }
    }

    /// Runs one round; `evaluate` controls whether test metrics are computed.
    pub fn run_round(&mut self, evaluate: bool) -> Result<RoundRecord> {
        let started = Instant::now();
        let round = self.server.round;
        let algo = self.hyper.algorithm;
        let broadcast_model = self.server.model.clone();
        let broadcast_mask = self.server.mask.clone();

        let (spec, hyper, policy) = (&self.spec, &self.hyper, &self.policy);
        let clients = &mut self.clients;
        let threads = &self.threads;
        let (bmodel, bmask) = (&broadcast_model, &broadcast_mask);
        let mut work = move || {
            clients
                .par_iter_mut()
                .map(|c| {
                    // Local-only clients never see the server; they resume
                    // from their own model.
                    let own;
                    let start = if algo.communicates() {
                        bmodel
                    } else {
                        own = c.model.clone();
                        &own
                    };
                    client_round(spec, c, start, bmask, hyper, policy, round)
                })
                .collect::<Vec<_>>()
        };
        let results: Vec<Result<ClientUpdate>> = match threads {
            Some(pool) => pool.install(work),
            None => work(),
        };

        let n = self.clients.len();
        let mut failures = Vec::new();
        let mut survivors = Vec::new();
        let mut updates: Vec<Option<ClientUpdate>> = Vec::with_capacity(n);
        for (id, r) in results.into_iter().enumerate() {
            match r {
                Ok(u) => {
                    survivors.push(id);
                    updates.push(Some(u));
                }
                Err(e) => {
                    failures.push((id, e.to_string()));
                    updates.push(None);
                }
            }
        }

        let union = mask_union(self.clients.iter().map(|c| &c.mask))?;
        let mut alpha = vec![0.0; n];
        let mut gamma_grad = vec![0.0; n];
        let mut gamma_data = vec![0.0; n];
        for &(id, _) in &failures {
            gamma_grad[id] = NEUTRAL_GRAD_SCORE;
        }

        let scored = algo == AlgorithmKind::CoPfl
            && self.hyper.cowa.enabled
            && self.server.prev_model.is_some()
            && !survivors.is_empty();
        if scored {
            let raw = self.score_clients(&survivors, &updates)?;
            let reports = cowa::weights_from_scores(&raw, self.hyper.cowa.score)?;
            for (&id, r) in survivors.iter().zip(&reports) {
                alpha[id] = r.alpha;
                gamma_grad[id] = r.gamma_grad;
                gamma_data[id] = r.gamma_data;
            }
        } else {
            for &id in &survivors {
                alpha[id] = 1.0 / survivors.len() as f64;
            }
        }

        if algo.communicates() && !survivors.is_empty() {
            let parts: Vec<(&ParameterVector, &Mask)> = survivors
                .iter()
                .map(|&id| (&self.clients[id].model, &self.clients[id].mask))
                .collect();
            let weights: Vec<f64> = survivors.iter().map(|&id| alpha[id]).collect();
            let g = aggregate_shared(&parts, &weights, self.hyper.renorm_per_coord)?;
            server_update(&mut self.server, &g, union)?;
        } else {
            let model = self.server.model.clone();
            server_update(&mut self.server, &model, union)?;
        }
        self.server.weights = alpha.clone();

        let evals = if evaluate {
            self.evaluate_clients()?
        } else {
            vec![(f64::NAN, f64::NAN); n]
        };
        let clients: Vec<ClientRecord> = (0..n)
            .map(|id| ClientRecord {
                client_id: id,
                test_acc: evals[id].0,
                train_loss: evals[id].1,
                alpha: alpha[id],
                gamma_grad: gamma_grad[id],
                gamma_data: gamma_data[id],
                mask_popcount: self.clients[id].mask.popcount(),
            })
            .collect();
        let (mean_acc, std_acc) = mean_std(clients.iter().map(|c| c.test_acc));
        Ok(RoundRecord {
            round,
            clients,
            mean_acc,
            std_acc,
            scored,
            broadcast_mask_popcount: broadcast_mask.popcount(),
            server_mask_popcount: self.server.mask.popcount(),
            failures,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Raw `(gamma_grad, gamma_data)` for each surviving client, in order.
    fn score_clients(&self, survivors: &[usize], updates: &[Option<ClientUpdate>]) -> Result<Vec<(f64, f64)>> {
        let server = &self.server;
        let prev = server.prev_model.as_ref().expect("scoring requires a previous model");
        let delta_global = prev.sub(&server.model)?;
        let opts = self.hyper.cowa;
        let spec = &self.spec;
        let score = |&id: &usize| -> Result<(f64, f64)> {
            let update = updates[id].as_ref().expect("survivor has an update");
            let client = &self.clients[id];
            let alpha = server.weights[id];
            let delta_n = if opts.shared_only_direction {
                elementwise_mul(&update.delta, &mask_complement(&client.mask))?
            } else {
                update.delta.clone()
            };
            let grad = match cowa::leave_one_out_direction(&delta_global, &delta_n, alpha) {
                Ok(loo) => cowa::gradient_score(&delta_n, &loo)?,
                Err(Error::DegenerateLeaveOneOut { .. }) => NEUTRAL_GRAD_SCORE,
                Err(e) => return Err(e),
            };
            let loo_model = match cowa::leave_one_out_model(&server.model, &update.entry_model, alpha) {
                Ok(w) => w,
                Err(Error::DegenerateLeaveOneOut { .. }) => server.model.clone(),
                Err(e) => return Err(e),
            };
            // An overflowing leave-one-out model is as uninformative as the
            // degenerate case; fall back to the server model.
            let data = match cowa::prediction_score(spec, &loo_model, &client.data.train) {
                Ok(v) => v,
                Err(Error::Numeric(_)) => cowa::prediction_score(spec, &server.model, &client.data.train)?,
                Err(e) => return Err(e),
            };
            Ok((grad, data))
        };
        self.in_pool(|| survivors.par_iter().map(score).collect())
    }

    /// Model each client would deploy right now.
    pub fn personalized_model(&self, id: usize) -> Result<ParameterVector> {
        let algo = self.hyper.algorithm;
        if !algo.evaluates_server_model() {
            return Ok(self.clients[id].model.clone());
        }
        let mut w = self.server.model.clone();
        if algo == AlgorithmKind::FedavgFt && self.hyper.ft_steps > 0 {
            let d = w.len();
            let shared = Mask::zeros(d);
            let mut opt = MamoState::new(d, self.hyper.optimizer);
            let train = &self.clients[id].data.train;
            for _ in 0..self.hyper.ft_steps {
                let (_, grad) = model::loss_and_grad(&self.spec, &w, train)?;
                opt.apply_step(&mut w, &grad, &shared, Phase::Shared)?;
            }
        }
        Ok(w)
    }

    pub fn personalized_models(&self) -> Result<Vec<ParameterVector>> {
        (0..self.clients.len()).map(|id| self.personalized_model(id)).collect()
    }

    /// `(test accuracy, train loss)` per client.
    fn evaluate_clients(&self) -> Result<Vec<(f64, f64)>> {
        let ids: Vec<usize> = (0..self.clients.len()).collect();
        self.in_pool(|| {
            ids.par_iter()
                .map(|&id| {
                    let w = self.personalized_model(id)?;
                    let data = &self.clients[id].data;
                    Ok((
                        model::accuracy(&self.spec, &w, &data.test)?,
                        model::predict_loss(&self.spec, &w, &data.train)?,
                    ))
                })
                .collect()
        })
    }
}

pub fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub records: Vec<RoundRecord>,
    pub personalized_models: Vec<ParameterVector>,
    pub metadata: RunMetadata,
}

/// Runs `rounds` rounds, evaluating every `eval_every` rounds and always
/// after the last one. Only evaluated rounds are returned.
pub fn run_experiment(setup: ExperimentSetup, rounds: usize, eval_every: usize, jobs: usize) -> Result<ExperimentOutput> {
    if eval_every == 0 {
        return Err(Error::arg("eval_every must be >= 1"));
    }
    let mut exp = Experiment::new(setup, jobs)?;
    let mut records = Vec::new();
    for k in 0..rounds {
        let evaluate = (k + 1) % eval_every == 0 || k + 1 == rounds;
        let record = exp.run_round(evaluate)?;
        if evaluate {
            records.push(record);
        }
    }
    Ok(ExperimentOutput {
        records,
        personalized_models: exp.personalized_models()?,
        metadata: exp.metadata().clone(),
    })
}
