//! Two-stage GraphSAGE-style link predictor.
//!
//! Stage one runs `n_iters` max-pool message-passing sweeps over the AP
//! graph starting from the AP features. The UE features go through one
//! affine projection, then `m_iters` sweeps over the AP→UE graph update AP
//! and UE states together. Edges only point from APs to UEs, so the AP
//! states never depend on the UEs and can be cached. A link's confidence
//! is the sigmoid of the inner product of its AP and UE embeddings.
//!
//! Each sweep computes, for every node `u`,
//! `h_u ← SELU(h_u·W + b + max_{v ∈ N(u)} Ψ(h_v))` with
//! `Ψ(h) = SELU(h·A₁ + a₁)·A₂ + a₂`. An empty neighbourhood contributes a
//! zero vector.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::TypedGraph;
use crate::io;
use crate::numerics::{linear, rowwise_max, selu, sigmoid, NamedTensor, ParamStore, Tape, Tensor, Var};
use crate::rng;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CACHE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of every hidden state; equals the number of APs.
    pub hidden_dim: usize,
    /// Sweeps over the AP graph.
    pub n_iters: usize,
    /// Sweeps over the AP→UE graph.
    pub m_iters: usize,
    /// Multiplier applied to dB-valued input features.
    pub feature_scale: f64,
    /// L2-normalize node states after every sweep.
    pub l2_normalize: bool,
}

impl ModelConfig {
    pub const DEFAULT_FEATURE_SCALE: f64 = 0.1;

    pub fn for_aps(ap_count: usize) -> Self {
        Self {
            hidden_dim: ap_count,
            n_iters: 2,
            m_iters: 2,
            feature_scale: Self::DEFAULT_FEATURE_SCALE,
            l2_normalize: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ap,
    Joint,
}

impl Stage {
    fn prefix(self) -> &'static str {
        match self {
            Stage::Ap => "ap",
            Stage::Joint => "joint",
        }
    }
}

/// Parameter names of one sweep's layer.
#[derive(Clone, Debug)]
struct LayerNames {
    pool_in_w: String,
    pool_in_b: String,
    pool_out_w: String,
    pool_out_b: String,
    self_w: String,
    self_b: String,
}

impl LayerNames {
    fn new(stage: Stage, index: usize) -> Self {
        let p = format!("{}.{index}", stage.prefix());
        Self {
            pool_in_w: format!("{p}.pool_in.weight"),
            pool_in_b: format!("{p}.pool_in.bias"),
            pool_out_w: format!("{p}.pool_out.weight"),
            pool_out_b: format!("{p}.pool_out.bias"),
            self_w: format!("{p}.self.weight"),
            self_b: format!("{p}.self.bias"),
        }
    }
}

const PROJ_W: &str = "ue_proj.weight";
const PROJ_B: &str = "ue_proj.bias";

/// Concrete weights of one message-passing layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SageLayer {
    pub pool_in_weight: Tensor,
    pub pool_in_bias: Tensor,
    pub pool_out_weight: Tensor,
    pub pool_out_bias: Tensor,
    pub self_weight: Tensor,
    pub self_bias: Tensor,
}

impl SageLayer {
    /// All-identity weights and zero biases.
    pub fn identity(d: usize) -> Self {
        Self {
            pool_in_weight: Tensor::identity(d),
            pool_in_bias: Tensor::zeros(&[d]),
            pool_out_weight: Tensor::identity(d),
            pool_out_bias: Tensor::zeros(&[d]),
            self_weight: Tensor::identity(d),
            self_bias: Tensor::zeros(&[d]),
        }
    }

    pub fn dim(&self) -> usize {
        self.self_bias.len()
    }

    /// `Ψ` applied row-wise.
    pub fn pool(&self, states: &Tensor) -> Result<Tensor> {
        let hidden = selu(&linear(states, &self.pool_in_weight, &self.pool_in_bias)?);
        linear(&hidden, &self.pool_out_weight, &self.pool_out_bias)
    }
}

/// Max-pool aggregate of the neighbour states (one per row).
pub fn aggregate(neighbor_states: &Tensor, layer: &SageLayer) -> Result<Tensor> {
    if neighbor_states.rows() == 0 || neighbor_states.is_empty() {
        return Ok(Tensor::zeros(&[layer.dim()]));
    }
    rowwise_max(&layer.pool(neighbor_states)?)
}

/// `SELU(self_state·W + b + aggregated)`.
pub fn update(self_state: &Tensor, aggregated: &Tensor, layer: &SageLayer) -> Result<Tensor> {
    if self_state.len() != layer.dim() || aggregated.len() != layer.dim() {
        return Err(Error::invalid("update: state width does not match layer"));
    }
    let row = self_state.clone().reshape(vec![1, layer.dim()])?;
    let pre = linear(&row, &layer.self_weight, &layer.self_bias)?;
    let summed: Vec<f64> = pre
        .values()
        .iter()
        .zip(aggregated.values())
        .map(|(a, b)| a + b)
        .collect();
    Ok(selu(&Tensor::vector(summed)))
}

/// Sigmoid of the inner product.
pub fn score_link(z_ap: &[f64], z_ue: &[f64]) -> Result<f64> {
    if z_ap.len() != z_ue.len() {
        return Err(Error::invalid("score_link: embedding widths differ"));
    }
    Ok(sigmoid(z_ap.iter().zip(z_ue).map(|(a, b)| a * b).sum()))
}

struct LayerVars {
    pool_in_w: Var,
    pool_in_b: Var,
    pool_out_w: Var,
    pool_out_b: Var,
    self_w: Var,
    self_b: Var,
}

/// Tape handles of the final states.
pub struct ForwardOutput {
    pub ap_states: Var,
    pub ue_states: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct GnnModel {
    config: ModelConfig,
    params: ParamStore,
    rng_seed: u64,
}

impl GnnModel {
    /// Glorot-uniform weights, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.hidden_dim == 0 {
            return Err(Error::invalid("hidden_dim must be positive"));
        }
        if !(config.feature_scale > 0.0 && config.feature_scale.is_finite()) {
            return Err(Error::invalid("feature_scale must be positive"));
        }
        let d = config.hidden_dim;
        let mut rng = rng::stream(seed, &[rng::TAG_INIT]);
        let mut params = ParamStore::new();
        let mut affine = |params: &mut ParamStore, w: &str, b: &str| {
            let bound = (6.0 / (2 * d) as f64).sqrt();
            let values = (0..d * d).map(|_| rng.random_range(-bound..bound)).collect();
            params.insert(w, Tensor::matrix(d, d, values).expect("square"));
            params.insert(b, Tensor::zeros(&[d]));
        };
        let stages = [(Stage::Ap, config.n_iters), (Stage::Joint, config.m_iters)];
        for (stage, count) in stages {
            for i in 0..count {
                let n = LayerNames::new(stage, i);
                affine(&mut params, &n.pool_in_w, &n.pool_in_b);
                affine(&mut params, &n.pool_out_w, &n.pool_out_b);
                affine(&mut params, &n.self_w, &n.self_b);
            }
        }
        affine(&mut params, PROJ_W, PROJ_B);
        Ok(Self {
            config,
            params,
            rng_seed: seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn step_count(&self) -> u64 {
        self.params.step_count()
    }

    pub fn layer(&self, stage: Stage, index: usize) -> Result<SageLayer> {
        let n = LayerNames::new(stage, index);
        let p = &self.params;
        Ok(SageLayer {
            pool_in_weight: p.get(&n.pool_in_w)?.clone(),
            pool_in_bias: p.get(&n.pool_in_b)?.clone(),
            pool_out_weight: p.get(&n.pool_out_w)?.clone(),
            pool_out_bias: p.get(&n.pool_out_b)?.clone(),
            self_weight: p.get(&n.self_w)?.clone(),
            self_bias: p.get(&n.self_b)?.clone(),
        })
    }

    /// Overwrites one layer's weights.
    pub fn set_layer(&mut self, stage: Stage, index: usize, layer: SageLayer) -> Result<()> {
        let n = LayerNames::new(stage, index);
        self.params.set(&n.pool_in_w, layer.pool_in_weight)?;
        self.params.set(&n.pool_in_b, layer.pool_in_bias)?;
        self.params.set(&n.pool_out_w, layer.pool_out_weight)?;
        self.params.set(&n.pool_out_b, layer.pool_out_bias)?;
        self.params.set(&n.self_w, layer.self_weight)?;
        self.params.set(&n.self_b, layer.self_bias)
    }

    fn check_graph(&self, graph: &TypedGraph) -> Result<()> {
        if graph.ap_count != self.config.hidden_dim {
            return Err(Error::invalid(format!(
                "model hidden_dim {} does not match graph with {} APs",
                self.config.hidden_dim, graph.ap_count
            )));
        }
        Ok(())
    }

    fn layer_vars(&self, tape: &mut Tape, stage: Stage, index: usize) -> Result<LayerVars> {
        let n = LayerNames::new(stage, index);
        Ok(LayerVars {
            pool_in_w: tape.param(&self.params, &n.pool_in_w)?,
            pool_in_b: tape.param(&self.params, &n.pool_in_b)?,
            pool_out_w: tape.param(&self.params, &n.pool_out_w)?,
            pool_out_b: tape.param(&self.params, &n.pool_out_b)?,
            self_w: tape.param(&self.params, &n.self_w)?,
            self_b: tape.param(&self.params, &n.self_b)?,
        })
    }

    fn pool_on_tape(tape: &mut Tape, lv: &LayerVars, states: Var) -> Result<Var> {
        let hidden = tape.linear(states, lv.pool_in_w, lv.pool_in_b)?;
        let hidden = tape.selu(hidden)?;
        tape.linear(hidden, lv.pool_out_w, lv.pool_out_b)
    }

    fn self_update(&self, tape: &mut Tape, lv: &LayerVars, states: Var, agg: Option<Var>) -> Result<Var> {
        let pre = tape.linear(states, lv.self_w, lv.self_b)?;
        let pre = match agg {
            Some(a) => tape.add(pre, a)?,
            None => pre,
        };
        let out = tape.selu(pre)?;
        if self.config.l2_normalize {
            tape.l2_normalize_rows(out)
        } else {
            Ok(out)
        }
    }

    /// AP-graph sweeps on the tape; returns `Z_AP`.
    pub fn forward_aps(&self, tape: &mut Tape, graph: &TypedGraph) -> Result<Var> {
        self.check_graph(graph)?;
        let x = graph.ap_features.map(|v| v * self.config.feature_scale);
        let mut h = tape.input(x)?;
        for i in 0..self.config.n_iters {
            let lv = self.layer_vars(tape, Stage::Ap, i)?;
            let messages = Self::pool_on_tape(tape, &lv, h)?;
            let agg = tape.segment_max(messages, &graph.ap_neighbors)?;
            h = self.self_update(tape, &lv, h, Some(agg))?;
        }
        Ok(h)
    }

    /// Joint sweeps starting from `z_ap` and the projected UE features.
    pub fn forward_joint(&self, tape: &mut Tape, graph: &TypedGraph, z_ap: Var) -> Result<ForwardOutput> {
        self.check_graph(graph)?;
        let mut ap = z_ap;
        let mut ue = if graph.ue_count > 0 {
            let x = graph.ue_features.map(|v| v * self.config.feature_scale);
            let x = tape.input(x)?;
            let w = tape.param(&self.params, PROJ_W)?;
            let b = tape.param(&self.params, PROJ_B)?;
            Some(tape.linear(x, w, b)?)
        } else {
            None
        };
        for i in 0..self.config.m_iters {
            let lv = self.layer_vars(tape, Stage::Joint, i)?;
            if let Some(u) = ue {
                let messages = Self::pool_on_tape(tape, &lv, ap)?;
                let agg = tape.segment_max(messages, graph.ue_neighbors())?;
                ue = Some(self.self_update(tape, &lv, u, Some(agg))?);
            }
            ap = self.self_update(tape, &lv, ap, None)?;
        }
        Ok(ForwardOutput {
            ap_states: ap,
            ue_states: ue,
        })
    }

    /// Full forward pass plus logits for the given `(ap, ue)` pairs.
    pub fn forward_logits(&self, tape: &mut Tape, graph: &TypedGraph, pairs: &[(usize, usize)]) -> Result<Var> {
        let z_ap = self.forward_aps(tape, graph)?;
        let out = self.forward_joint(tape, graph, z_ap)?;
        let ue = out.ue_states.ok_or_else(|| Error::invalid("graph has no UEs"))?;
        tape.pair_dot(out.ap_states, ue, pairs)
    }

    /// Summed BCE over the given labeled pairs.
    pub fn loss(&self, tape: &mut Tape, graph: &TypedGraph, pairs: &[(usize, usize)], labels: &[f64]) -> Result<Var> {
        let logits = self.forward_logits(tape, graph, pairs)?;
        tape.bce_with_logits(logits, labels)
    }

    /// 64-bit hash over the configuration and every parameter value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in self.params.iter() {
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in t.values() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        digest_u64(h)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            hidden_dim: self.config.hidden_dim,
            n_iters: self.config.n_iters,
            m_iters: self.config.m_iters,
            feature_scale: self.config.feature_scale,
            l2_normalize: self.config.l2_normalize,
            tensors: self.params.to_named(),
            rng_seed: self.rng_seed,
            training_step_count: self.params.step_count(),
            run_config: None,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        io::check_version("checkpoint", ckpt.version, CHECKPOINT_VERSION)?;
        let config = ModelConfig {
            hidden_dim: ckpt.hidden_dim,
            n_iters: ckpt.n_iters,
            m_iters: ckpt.m_iters,
            feature_scale: ckpt.feature_scale,
            l2_normalize: ckpt.l2_normalize,
        };
        let reference = Self::new(config.clone(), ckpt.rng_seed)?;
        let params = ParamStore::from_named(ckpt.tensors, ckpt.training_step_count)?;
        let expected: Vec<_> = reference.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let found: Vec<_> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != found {
            return Err(Error::invalid("checkpoint tensors do not match the model layout"));
        }
        Ok(Self {
            config,
            params,
            rng_seed: ckpt.rng_seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(io::read_json(path)?)
    }
}

fn digest_u64(h: Sha256) -> u64 {
    let out = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&out[..8]);
    u64::from_le_bytes(bytes)
}

/// Hash of everything `Z_AP` depends on besides the model.
pub fn ap_graph_fingerprint(graph: &TypedGraph) -> u64 {
    let mut h = Sha256::new();
    h.update((graph.ap_count as u64).to_le_bytes());
    for &(u, v) in &graph.ap_edges {
        h.update((u as u64).to_le_bytes());
        h.update((v as u64).to_le_bytes());
    }
    for v in graph.ap_features.values() {
        h.update(v.to_bits().to_le_bytes());
    }
    digest_u64(h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub hidden_dim: usize,
    pub n_iters: usize,
    pub m_iters: usize,
    pub feature_scale: f64,
    pub l2_normalize: bool,
    pub tensors: std::collections::BTreeMap<String, NamedTensor>,
    pub rng_seed: u64,
    pub training_step_count: u64,
    /// Configuration of the run that produced the checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

/// `Z_AP` for all APs.
pub fn embed_aps(graph: &TypedGraph, model: &GnnModel) -> Result<Tensor> {
    let mut tape = Tape::new();
    let z = model.forward_aps(&mut tape, graph)?;
    Ok(tape.value(z).clone())
}

/// Final embeddings, APs first then UEs: an (L+K)×d matrix.
pub fn embed_ues(graph: &TypedGraph, z_ap: &Tensor, model: &GnnModel) -> Result<Tensor> {
    if z_ap.shape() != [graph.ap_count, model.config.hidden_dim] {
        return Err(Error::invalid(format!("z_ap has shape {:?}", z_ap.shape())));
    }
    let mut tape = Tape::new();
    let z = tape.input(z_ap.clone())?;
    let out = model.forward_joint(&mut tape, graph, z)?;
    let mut values = tape.value(out.ap_states).values().to_vec();
    if let Some(u) = out.ue_states {
        values.extend_from_slice(tape.value(u).values());
    }
    Tensor::matrix(graph.ap_count + graph.ue_count, model.config.hidden_dim, values)
}

/// Cached `Z_AP`, valid for one model and one AP graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingCache {
    pub version: u32,
    pub model_fingerprint: u64,
    pub graph_fingerprint: u64,
    pub z_ap: Tensor,
}

impl EmbeddingCache {
    pub fn build(graph: &TypedGraph, model: &GnnModel) -> Result<Self> {
        Ok(Self {
            version: CACHE_VERSION,
            model_fingerprint: model.fingerprint(),
            graph_fingerprint: ap_graph_fingerprint(graph),
            z_ap: embed_aps(graph, model)?,
        })
    }

    pub fn check(&self, graph: &TypedGraph, model: &GnnModel) -> Result<()> {
        if self.model_fingerprint != model.fingerprint() {
            return Err(Error::CacheInvalid("model changed".into()));
        }
        if self.graph_fingerprint != ap_graph_fingerprint(graph) {
            return Err(Error::CacheInvalid("AP graph changed".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cache: Self = io::read_json(path)?;
        io::check_version("embedding cache", cache.version, CACHE_VERSION)?;
        Ok(cache)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkScore {
    pub ap: usize,
    pub confidence: f64,
    pub selected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UePrediction {
    pub ue: usize,
    pub master_ap: usize,
    pub candidate_cluster: Vec<usize>,
    /// One entry per candidate-cluster AP, in cluster order.
    pub links: Vec<LinkScore>,
}

impl UePrediction {
    pub fn selected_aps(&self) -> Vec<usize> {
        self.links.iter().filter(|l| l.selected).map(|l| l.ap).collect()
    }
}

/// Scores every candidate-cluster link. A link is selected when its
/// confidence exceeds `threshold`; the master AP is always selected.
pub fn predict(
    graph: &TypedGraph,
    model: &GnnModel,
    cache: Option<&EmbeddingCache>,
    threshold: f64,
) -> Result<Vec<UePrediction>> {
    let z_ap = match cache {
        Some(c) => {
            c.check(graph, model)?;
            c.z_ap.clone()
        }
        None => embed_aps(graph, model)?,
    };
    let z = embed_ues(graph, &z_ap, model)?;
    let l_count = graph.ap_count;
    (0..graph.ue_count)
        .map(|k| {
            let master = graph.master_ap[k];
            let links = graph.candidate_cluster[k]
                .iter()
                .map(|&ap| {
                    let confidence = score_link(z.row(ap), z.row(l_count + k))?;
                    Ok(LinkScore {
                        ap,
                        confidence,
                        selected: ap == master || confidence > threshold,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(UePrediction {
                ue: k,
                master_ap: master,
                candidate_cluster: graph.candidate_cluster[k].clone(),
                links,
            })
        })
        .collect()
}
