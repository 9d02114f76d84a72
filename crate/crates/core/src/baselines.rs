//! Comparison methods on the same client/data/model substrate: Local,
//! Centralized, FedAvg, FedProx, FedBN, FedCross, and the heterogeneous
//! FedCross variant.

use ndarray::ArrayD;
use thiserror::Error;

use crate::config::{ExperimentConfig, Method};
use crate::graph::Graph;
use crate::model::{
    build_model, clone_model, ModelInstance, ModelSpec, ParamBind, ParamSet,
};
use crate::optim::Adam;
use crate::protocol::{
    collect_grads, self_consolidation_step, ClientRoundStats, ClientState, ProtocolError,
    RoundReport,
};
use crate::seeding::{lane_seed, SeededRng};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("parameter schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("bad aggregation weights: {0}")]
    Weights(String),
}

fn check_aggregate_inputs(
    params: &[&ParamSet],
    weights: &[f64],
) -> Result<Vec<f64>, BaselineError> {
    if params.is_empty() {
        return Err(BaselineError::Weights("no parameter sets".into()));
    }
    if weights.len() != params.len() {
        return Err(BaselineError::Weights(format!(
            "{} weights for {} parameter sets",
            weights.len(),
            params.len()
        )));
    }
    if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
        return Err(BaselineError::Weights(
            "weights must be non-negative and finite".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(BaselineError::Weights("weights sum to zero".into()));
    }
    let schema = params[0].schema();
    for (i, p) in params.iter().enumerate().skip(1) {
        if p.schema() != schema {
            return Err(BaselineError::SchemaMismatch(format!(
                "parameter set {i} disagrees with set 0 (heterogeneous models cannot be averaged)"
            )));
        }
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Element-wise weighted average of schema-identical parameter collections;
/// weights are normalized to sum 1.
pub fn fedavg_aggregate(
    params: &[&ParamSet],
    weights: &[f64],
) -> Result<ParamSet, BaselineError> {
    let norm = check_aggregate_inputs(params, weights)?;
    let mut out = params[0].clone();
    for (idx, entry) in out.iter_mut().enumerate() {
        let mut acc = ArrayD::<f64>::zeros(entry.value.raw_dim());
        for (p, w) in params.iter().zip(&norm) {
            acc.scaled_add(*w, &p.entry(idx).value);
        }
        entry.value = acc;
    }
    Ok(out)
}

/// FedBN aggregation: average everything except batch-norm parameters and
/// statistics, which stay client-local. The returned set carries set 0's
/// batch-norm entries; callers write only the non-BN entries back into each
/// client. With no batch-norm entries this equals [`fedavg_aggregate`].
pub fn fedbn_aggregate(
    params: &[&ParamSet],
    weights: &[f64],
) -> Result<ParamSet, BaselineError> {
    let norm = check_aggregate_inputs(params, weights)?;
    let mut out = params[0].clone();
    for (idx, entry) in out.iter_mut().enumerate() {
        if entry.kind.is_batch_norm() {
            continue;
        }
        let mut acc = ArrayD::<f64>::zeros(entry.value.raw_dim());
        for (p, w) in params.iter().zip(&norm) {
            acc.scaled_add(*w, &p.entry(idx).value);
        }
        entry.value = acc;
    }
    Ok(out)
}

/// Overwrite only non-batch-norm entries of `dst` from `src`.
fn overwrite_non_bn(dst: &mut ModelInstance, src: &ParamSet) -> Result<(), BaselineError> {
    if dst.params().schema() != src.schema() {
        return Err(BaselineError::SchemaMismatch(
            "cannot distribute parameters across heterogeneous models".into(),
        ));
    }
    for idx in 0..src.len() {
        if src.entry(idx).kind.is_batch_norm() {
            continue;
        }
        *dst.param_value_mut(idx) = src.entry(idx).value.clone();
    }
    Ok(())
}

/// Loss terms of one supervised (optionally proximal) step.
#[derive(Clone, Copy, Debug)]
pub struct SupervisedLoss {
    pub ce: f64,
    pub prox_penalty: f64,
    pub total: f64,
}

/// One cross-entropy step with an optional FedProx proximal term
/// `(mu/2) * ||theta - theta_global||^2` over trainable parameters.
pub fn supervised_step(
    model: &mut ModelInstance,
    opt: &mut Adam,
    x: &ArrayD<f64>,
    y: &[usize],
    prox: Option<(&ParamSet, f64)>,
) -> Result<SupervisedLoss, ProtocolError> {
    let mut g = Graph::new();
    let out = model.forward_train(&mut g, x, ParamBind::Trainable)?;
    let ce = g.cross_entropy_mean(out.logits, y);
    let (root, losses) = match prox {
        None => (
            ce,
            SupervisedLoss {
                ce: g.scalar_value(ce),
                prox_penalty: 0.0,
                total: g.scalar_value(ce),
            },
        ),
        Some((global, mu)) => {
            let mut terms = Vec::new();
            for (idx, node) in &out.bound {
                let entry = model.params().entry(*idx);
                if entry.kind.is_buffer() {
                    continue;
                }
                let anchor = global.get(&entry.name).ok_or_else(|| {
                    ProtocolError::Invalid(format!("proximal anchor missing {}", entry.name))
                })?;
                let c = g.constant(anchor.value.clone());
                terms.push((g.frob_sq_diff(*node, c), 1.0));
            }
            let penalty = g.weighted_sum_scalars(&terms);
            let total = g.weighted_sum_scalars(&[(ce, 1.0), (penalty, mu / 2.0)]);
            (
                total,
                SupervisedLoss {
                    ce: g.scalar_value(ce),
                    prox_penalty: g.scalar_value(penalty) * mu / 2.0,
                    total: g.scalar_value(total),
                },
            )
        }
    };
    if !losses.total.is_finite() {
        return Err(ProtocolError::NonFiniteLoss {
            round: 0,
            client: usize::MAX,
            detail: format!("supervised loss {losses:?}"),
        });
    }
    g.backward(root);
    let grads = collect_grads(&g, &out.bound);
    opt.step(model, &grads);
    Ok(losses)
}

/// The FedProx local objective without taking a step (value + penalty).
pub fn fedprox_local_loss(
    model: &mut ModelInstance,
    x: &ArrayD<f64>,
    y: &[usize],
    global: &ParamSet,
    mu: f64,
) -> Result<SupervisedLoss, ProtocolError> {
    let mut g = Graph::new();
    let out = model.forward_train(&mut g, x, ParamBind::Frozen)?;
    let ce = g.cross_entropy_mean(out.logits, y);
    let mut penalty = 0.0;
    for entry in model.params().iter() {
        if entry.kind.is_buffer() {
            continue;
        }
        let anchor = global.get(&entry.name).ok_or_else(|| {
            ProtocolError::Invalid(format!("proximal anchor missing {}", entry.name))
        })?;
        penalty += entry
            .value
            .iter()
            .zip(anchor.value.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    let ce_v = g.scalar_value(ce);
    Ok(SupervisedLoss {
        ce: ce_v,
        prox_penalty: mu / 2.0 * penalty,
        total: ce_v + mu / 2.0 * penalty,
    })
}

fn ce_stats(client: usize, ce_mean: f64) -> ClientRoundStats {
    ClientRoundStats {
        client,
        sender: client,
        self_round: true,
        ce_dam: ce_mean,
        ce_ktm: None,
        skd: None,
        joint: None,
        additivity_rel_err: 0.0,
        ktm_head_intact: true,
    }
}

/// Plain supervised round on each client's own (or pooled) shard; used by the
/// `local` and `centralized` methods.
pub fn local_round(
    clients: &mut [ClientState],
    round: usize,
    iters: usize,
) -> Result<RoundReport, ProtocolError> {
    let started = std::time::Instant::now();
    let mut per_client = Vec::with_capacity(clients.len());
    for client in clients.iter_mut() {
        let mut ce_sum = 0.0;
        for _ in 0..iters {
            let (x, y) = client.next_batch();
            ce_sum += self_consolidation_step(client, &x, &y)?;
        }
        per_client.push(ce_stats(client.id, ce_sum / iters as f64));
    }
    Ok(RoundReport {
        round,
        schedule: (0..clients.len()).collect(),
        skd_active: false,
        per_client,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// FedCross (single circulating model) and its heterogeneous variant
// ---------------------------------------------------------------------------

/// Single homogeneous model visiting one client per round; hosts are drawn as
/// a fresh permutation every full cycle so each client is visited once per
/// cycle. With `fedcross_replicas` the method instead circulates N identical
/// replicas on the per-round permutation schedule.
pub struct FedCrossState {
    model: Option<ModelInstance>,
    replicas: Option<FedCrossDaggerState>,
    visit_order: Vec<usize>,
    seed: u64,
}

impl FedCrossState {
    pub fn new(cfg: &ExperimentConfig, base: &ModelSpec) -> Result<Self, ProtocolError> {
        let init = build_model(base, lane_seed(cfg.seed, "init-global", 0))?;
        if cfg.fedcross_replicas {
            let models = vec![init; cfg.n_clients];
            Ok(Self {
                model: None,
                replicas: Some(FedCrossDaggerState::from_models(models)),
                visit_order: Vec::new(),
                seed: cfg.seed,
            })
        } else {
            Ok(Self {
                model: Some(init),
                replicas: None,
                visit_order: Vec::new(),
                seed: cfg.seed,
            })
        }
    }

    pub fn run_round(
        &mut self,
        clients: &mut [ClientState],
        round: usize,
        iters: usize,
        seed: u64,
        lr: f64,
    ) -> Result<RoundReport, ProtocolError> {
        if let Some(replicas) = &mut self.replicas {
            return replicas.run_round(clients, round, iters, seed, lr);
        }
        let started = std::time::Instant::now();
        let n = clients.len();
        let pos = round % n;
        if pos == 0 {
            let cycle = (round / n) as u64;
            let mut rng = SeededRng::for_lane(self.seed, "fedcross-visit", cycle);
            self.visit_order = rng.permutation(n);
        }
        let host = self.visit_order[pos];
        let model = self.model.as_mut().expect("single-model mode");
        let client = &mut clients[host];
        let mut opt = Adam::new(lr); // fresh optimizer at each host
        let mut ce_sum = 0.0;
        for _ in 0..iters {
            let (x, y) = client.next_batch();
            ce_sum += supervised_step(model, &mut opt, &x, &y, None)?.ce;
        }
        Ok(RoundReport {
            round,
            schedule: vec![host],
            skd_active: false,
            per_client: vec![ce_stats(host, ce_sum / iters as f64)],
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    }

    /// Everyone deploys the shared model.
    pub fn deployed(&self, n: usize) -> Vec<ModelInstance> {
        match (&self.model, &self.replicas) {
            (Some(m), _) => vec![m.clone(); n],
            (None, Some(r)) => r.deployed(),
            _ => unreachable!(),
        }
    }
}

/// N personal models circulating per-round by the permutation schedule; each
/// host fine-tunes whichever model it received with plain supervision. Models
/// keep their owner identity and return to their owners for deployment.
pub struct FedCrossDaggerState {
    /// Indexed by owner.
    models: Vec<ModelInstance>,
    /// `at_host[i]` = owner of the model currently hosted by client `i`.
    at_host: Vec<usize>,
}

impl FedCrossDaggerState {
    pub fn new(clients: &[ClientState]) -> Self {
        Self::from_models(clients.iter().map(|c| clone_model(&c.dam)).collect())
    }

    pub fn from_models(models: Vec<ModelInstance>) -> Self {
        let n = models.len();
        Self {
            models,
            at_host: (0..n).collect(),
        }
    }

    pub fn run_round(
        &mut self,
        clients: &mut [ClientState],
        round: usize,
        iters: usize,
        seed: u64,
        lr: f64,
    ) -> Result<RoundReport, ProtocolError> {
        let started = std::time::Instant::now();
        let n = clients.len();
        let schedule = crate::protocol::generate_schedule(n, round, seed);
        let new_at_host: Vec<usize> = (0..n).map(|i| self.at_host[schedule.order[i]]).collect();
        let mut per_client = Vec::with_capacity(n);
        for (i, client) in clients.iter_mut().enumerate() {
            let owner = new_at_host[i];
            let model = &mut self.models[owner];
            let mut opt = Adam::new(lr); // optimizer state does not travel
            let mut ce_sum = 0.0;
            for _ in 0..iters {
                let (x, y) = client.next_batch();
                ce_sum += supervised_step(model, &mut opt, &x, &y, None)?.ce;
            }
            let mut stats = ce_stats(i, ce_sum / iters as f64);
            stats.sender = schedule.order[i];
            stats.self_round = schedule.order[i] == i;
            per_client.push(stats);
        }
        self.at_host = new_at_host;
        Ok(RoundReport {
            round,
            schedule: schedule.order,
            skd_active: false,
            per_client,
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    }

    /// Owner-ordered model specs (ownership ledger).
    pub fn owned_specs(&self) -> Vec<ModelSpec> {
        self.models.iter().map(|m| m.spec().clone()).collect()
    }

    /// Each model returns to its original owner for deployment.
    pub fn deployed(&self) -> Vec<ModelInstance> {
        self.models.clone()
    }
}

// ---------------------------------------------------------------------------
// Server-aggregation methods
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ServerFlavor {
    Avg,
    Prox,
    Bn,
}

/// FedAvg / FedProx / FedBN: distribute the global model, train locally with
/// a fresh optimizer, aggregate weighted by shard size.
pub struct ServerState {
    pub flavor: ServerFlavor,
    global: ModelInstance,
    mu: f64,
}

impl ServerState {
    pub fn new(cfg: &ExperimentConfig, base: &ModelSpec) -> Result<Self, ProtocolError> {
        let flavor = match cfg.method {
            Method::Fedavg => ServerFlavor::Avg,
            Method::Fedprox => ServerFlavor::Prox,
            Method::Fedbn => ServerFlavor::Bn,
            other => {
                return Err(ProtocolError::Invalid(format!(
                    "server state built for non-server method {other:?}"
                )))
            }
        };
        Ok(Self {
            flavor,
            global: build_model(base, lane_seed(cfg.seed, "init-global", 0))?,
            mu: cfg.fedprox_mu,
        })
    }

    pub fn run_round(
        &mut self,
        clients: &mut [ClientState],
        round: usize,
        iters: usize,
        lr: f64,
    ) -> Result<RoundReport, ProtocolError> {
        let started = std::time::Instant::now();
        // distribute round-start global
        let anchor = self.global.params().clone();
        for client in clients.iter_mut() {
            match self.flavor {
                ServerFlavor::Bn => {
                    overwrite_non_bn(&mut client.dam, &anchor)
                        .map_err(|e| ProtocolError::Invalid(e.to_string()))?;
                }
                _ => {
                    client
                        .dam
                        .replace_params(anchor.clone())
                        .map_err(ProtocolError::Model)?;
                }
            }
        }
        // local training (fresh optimizer per aggregation round)
        let mut per_client = Vec::with_capacity(clients.len());
        for client in clients.iter_mut() {
            let mut opt = Adam::new(lr);
            let mut ce_sum = 0.0;
            for _ in 0..iters {
                let (x, y) = client.next_batch();
                let prox = (self.flavor == ServerFlavor::Prox).then_some((&anchor, self.mu));
                ce_sum += supervised_step(&mut client.dam, &mut opt, &x, &y, prox)?.ce;
            }
            per_client.push(ce_stats(client.id, ce_sum / iters as f64));
        }
        // aggregate weighted by shard size
        let sets: Vec<&ParamSet> = clients.iter().map(|c| c.dam.params()).collect();
        let weights: Vec<f64> = clients.iter().map(|c| c.train_shard.n() as f64).collect();
        let aggregated = match self.flavor {
            ServerFlavor::Bn => fedbn_aggregate(&sets, &weights),
            _ => fedavg_aggregate(&sets, &weights),
        }
        .map_err(|e| ProtocolError::Invalid(e.to_string()))?;
        self.global
            .replace_params(aggregated)
            .map_err(ProtocolError::Model)?;
        Ok(RoundReport {
            round,
            schedule: (0..clients.len()).collect(),
            skd_active: false,
            per_client,
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    }

    /// FedAvg/FedProx deploy the shared global model; FedBN deploys each
    /// client's personalized-BN model.
    pub fn deployed(&self, clients: &[ClientState]) -> Vec<ModelInstance> {
        match self.flavor {
            ServerFlavor::Bn => clients.iter().map(|c| clone_model(&c.dam)).collect(),
            _ => vec![self.global.clone(); clients.len()],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{heterogeneous_fleet, ModelFamily, ParamKind, ModelPart};
    use ndarray::IxDyn;

    fn tiny_spec(width: usize) -> ModelSpec {
        ModelSpec {
            family: ModelFamily::TinyCnn,
            base_width: width,
            num_classes: 2,
            input_shape: vec![1, 8, 8],
            tap_layers: vec![3],
        }
    }

    fn toy_params(v: f64) -> ParamSet {
        let mut p = ParamSet::default();
        p.push(
            "w",
            ArrayD::from_elem(IxDyn(&[2, 2]), v),
            ParamKind::Weight,
            ModelPart::Extractor,
        );
        p.push(
            "b",
            ArrayD::from_elem(IxDyn(&[2]), v),
            ParamKind::Bias,
            ModelPart::Head,
        );
        p
    }

    #[test]
    fn fedavg_identity_and_means() {
        let a = toy_params(1.0);
        let b = toy_params(1.0);
        let out = fedavg_aggregate(&[&a, &b], &[1.0, 1.0]).unwrap();
        for e in out.iter() {
            assert!(e.value.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        }

        let a = toy_params(0.0);
        let b = toy_params(2.0);
        let out = fedavg_aggregate(&[&a, &b], &[1.0, 1.0]).unwrap();
        assert!(out.entry(0).value.iter().all(|&v| (v - 1.0).abs() < 1e-15));

        // weighted: (0*1 + 2*3) / 4 = 1.5
        let out = fedavg_aggregate(&[&a, &b], &[1.0, 3.0]).unwrap();
        assert!(out.entry(0).value.iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn fedavg_matches_bruteforce_oracle() {
        let mut rng = crate::seeding::SeededRng::new(91);
        let models: Vec<ModelInstance> = (0..4)
            .map(|i| build_model(&tiny_spec(4), i as u64).unwrap())
            .collect();
        let weights: Vec<f64> = (0..4).map(|_| rng.uniform01() + 0.1).collect();
        let sets: Vec<&ParamSet> = models.iter().map(|m| m.params()).collect();
        let out = fedavg_aggregate(&sets, &weights).unwrap();
        let total: f64 = weights.iter().sum();
        for idx in 0..out.len() {
            let flat_out = out.entry(idx).value.as_slice().unwrap();
            for (j, &got) in flat_out.iter().enumerate() {
                let mut expect = 0.0;
                for (m, w) in models.iter().zip(&weights) {
                    expect += w / total * m.params().entry(idx).value.as_slice().unwrap()[j];
                }
                assert!(
                    (got - expect).abs() < 1e-7,
                    "entry {idx}[{j}]: {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn fedavg_heterogeneous_fleet_is_rejected() {
        let fleet = heterogeneous_fleet(2, &tiny_spec(8), 2).unwrap();
        let a = build_model(&fleet[0], 1).unwrap();
        let b = build_model(&fleet[1], 2).unwrap();
        let err = fedavg_aggregate(&[a.params(), b.params()], &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, BaselineError::SchemaMismatch(_)));
    }

    #[test]
    fn fedavg_rejects_bad_weights() {
        let a = toy_params(1.0);
        let b = toy_params(2.0);
        assert!(fedavg_aggregate(&[&a, &b], &[0.0, 0.0]).is_err());
        assert!(fedavg_aggregate(&[&a, &b], &[1.0]).is_err());
        assert!(fedavg_aggregate(&[], &[]).is_err());
    }

    #[test]
    fn fedbn_keeps_bn_local_and_matches_fedavg_without_bn() {
        // toy sets without BN: identical results
        let a = toy_params(0.0);
        let b = toy_params(2.0);
        let avg = fedavg_aggregate(&[&a, &b], &[1.0, 1.0]).unwrap();
        let bn = fedbn_aggregate(&[&a, &b], &[1.0, 1.0]).unwrap();
        for (x, y) in avg.iter().zip(bn.iter()) {
            assert_eq!(x.value, y.value);
        }

        // real models: BN entries stay at set 0's values, conv entries average
        let m1 = build_model(&tiny_spec(4), 1).unwrap();
        let m2 = build_model(&tiny_spec(4), 2).unwrap();
        let out = fedbn_aggregate(&[m1.params(), m2.params()], &[1.0, 1.0]).unwrap();
        for (idx, e) in out.iter().enumerate() {
            if e.kind.is_batch_norm() {
                assert_eq!(e.value, m1.params().entry(idx).value, "{}", e.name);
            } else {
                let avg = (&m1.params().entry(idx).value + &m2.params().entry(idx).value) * 0.5;
                let diff = (&e.value - &avg).iter().map(|v| v.abs()).fold(0.0, f64::max);
                assert!(diff < 1e-12, "{}", e.name);
            }
        }
    }

    #[test]
    fn fedprox_penalty_is_zero_at_anchor_and_matches_oracle() {
        let spec = tiny_spec(4);
        let mut model = build_model(&spec, 3).unwrap();
        let global = model.params().clone();
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 1, 8, 8]), |_| 0.3);
        let y = vec![0usize, 1];
        // theta == theta_global -> penalty exactly 0
        let l = fedprox_local_loss(&mut model, &x, &y, &global, 0.5).unwrap();
        assert_eq!(l.prox_penalty, 0.0);
        // mu = 0 -> plain CE
        let l0 = fedprox_local_loss(&mut model, &x, &y, &global, 0.0).unwrap();
        assert_eq!(l0.total, l0.ce);

        // perturb one parameter and check the explicit-sum oracle
        let mut other = build_model(&spec, 4).unwrap();
        let mut expect = 0.0;
        for (a, b) in other.params().iter().zip(global.iter()) {
            if a.kind.is_buffer() {
                continue;
            }
            expect += a
                .value
                .iter()
                .zip(b.value.iter())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>();
        }
        let mu = 0.7;
        let l = fedprox_local_loss(&mut other, &x, &y, &global, mu).unwrap();
        assert!((l.prox_penalty - mu / 2.0 * expect).abs() < 1e-7 * expect.max(1.0));
    }
}
