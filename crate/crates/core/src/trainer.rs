//! Labeled dataset generation and the online training loop.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::graph::{build_graph, label_edges, EdgeLabelSet, GraphParams, ProximityOrder, TypedGraph};
use crate::model::GnnModel;
use crate::numerics::{Adam, ParamStore, Tape, Tensor};
use crate::rng;
use crate::scenario::{build_rsrp_table, Point, RsrpTable, Scenario};

/// How many UEs each graph holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UeCount {
    Fixed(usize),
    /// Drawn uniformly from `min..=max` per graph.
    Uniform {
        min: usize,
        max: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    /// Model selection during training.
    Validation,
    /// Held-out evaluation, disjoint from both of the above.
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_graphs: usize,
    pub ue_count: UeCount,
    pub d_db: f64,
    pub graph: GraphParams,
    pub seed: u64,
    pub split: Split,
}

impl DatasetSpec {
    pub const DEFAULT_D_DB: f64 = 10.0;
    pub const VALIDATION_UES: UeCount = UeCount::Uniform { min: 50, max: 150 };

    /// 100 graphs of 100 UEs.
    pub fn training(seed: u64) -> Self {
        Self {
            n_graphs: 100,
            ue_count: UeCount::Fixed(100),
            d_db: Self::DEFAULT_D_DB,
            graph: GraphParams::default(),
            seed,
            split: Split::Train,
        }
    }

    /// Graphs with 50–150 UEs each.
    pub fn validation(seed: u64, n_graphs: usize) -> Self {
        Self {
            n_graphs,
            ue_count: Self::VALIDATION_UES,
            split: Split::Validation,
            ..Self::training(seed)
        }
    }

    /// Like [`DatasetSpec::validation`] but drawn from the held-out stream.
    pub fn test(seed: u64, n_graphs: usize) -> Self {
        Self {
            split: Split::Test,
            ..Self::validation(seed, n_graphs)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_graphs == 0 {
            return Err(Error::invalid("n_graphs must be positive"));
        }
        match self.ue_count {
            UeCount::Fixed(0) => return Err(Error::invalid("UE count must be positive")),
            UeCount::Uniform { min, max } if min == 0 || min > max => {
                return Err(Error::invalid(format!("empty UE count range {min}..={max}")))
            }
            _ => {}
        }
        if !(self.d_db > 0.0 && self.d_db.is_finite()) {
            return Err(Error::invalid("d_db must be positive"));
        }
        Ok(())
    }
}

/// One labeled graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub ue_positions: Vec<Point>,
    pub rsrp: RsrpTable,
    pub graph: TypedGraph,
    pub labels: EdgeLabelSet,
}

impl Sample {
    pub fn build(
        scenario: &Scenario,
        proximity: &ProximityOrder,
        ue_positions: Vec<Point>,
        params: &GraphParams,
        d_db: f64,
    ) -> Result<Self> {
        let rsrp = build_rsrp_table(scenario, &ue_positions)?;
        let graph = build_graph(&rsrp, proximity, params)?;
        let labels = label_edges(&rsrp, &graph, d_db)?;
        Ok(Self {
            ue_positions,
            rsrp,
            graph,
            labels,
        })
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.labels.edges.iter().map(|e| (e.ap, e.ue)).collect()
    }
}

/// Fresh uniform UE drops over the fixed deployment, one per graph.
pub fn make_dataset(scenario: &Scenario, spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let proximity = ProximityOrder::new(scenario.ap_positions());
    let tag = match spec.split {
        Split::Train => rng::TAG_TRAIN_UES,
        Split::Validation => rng::TAG_VALIDATION_UES,
        Split::Test => rng::TAG_TEST_UES,
    };
    (0..spec.n_graphs)
        .into_par_iter()
        .map(|i| {
            let count = match spec.ue_count {
                UeCount::Fixed(n) => n,
                UeCount::Uniform { min, max } => {
                    rng::stream(spec.seed, &[rng::TAG_VALIDATION_COUNTS, tag, i as u64]).random_range(min..=max)
                }
            };
            let mut r = rng::stream(spec.seed, &[tag, i as u64]);
            let positions = scenario.place_ues(&mut r, count)?;
            Sample::build(scenario, &proximity, positions, &spec.graph, spec.d_db)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// One optimizer step per graph on the summed loss of all its edges.
    PerGraph,
    /// One optimizer step per labeled edge.
    PerEdge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub shuffle_seed: u64,
    /// Epochs without validation-AP improvement before stopping; `None`
    /// disables early stopping.
    pub patience: Option<usize>,
    pub step_mode: StepMode,
    /// Threshold used for the per-epoch validation report.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 1e-3,
            shuffle_seed: 0,
            patience: Some(5),
            step_mode: StepMode::PerGraph,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub epoch: usize,
    pub graph_id: usize,
    /// BCE averaged over the edges of this step.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation: Option<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub trace: Vec<TraceRecord>,
    pub epochs: Vec<EpochSummary>,
    /// Epoch whose parameters the model holds on return.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

pub enum TrainEvent<'a> {
    Step(&'a TraceRecord),
    Epoch(&'a EpochSummary, &'a GnnModel),
}

pub fn train(
    model: &mut GnnModel,
    train_set: &[Sample],
    validation: Option<&[Sample]>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    train_with(model, train_set, validation, config, &mut |_| Ok(()))
}

/// Runs the training loop, calling `observer` after every step and epoch.
/// On error the model keeps the parameters of its last successful step.
pub fn train_with(
    model: &mut GnnModel,
    train_set: &[Sample],
    validation: Option<&[Sample]>,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&TrainEvent) -> Result<()>,
) -> Result<TrainReport> {
    if config.epochs == 0 {
        return Err(Error::invalid("epochs must be positive"));
    }
    if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::invalid("learning rate must be non-negative"));
    }
    if train_set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let hidden = model.config().hidden_dim;
    if let Some(s) = train_set
        .iter()
        .chain(validation.unwrap_or(&[]))
        .find(|s| s.graph.ap_count != hidden)
    {
        return Err(Error::invalid(format!(
            "model hidden_dim {hidden} does not match graph with {} APs",
            s.graph.ap_count
        )));
    }
    let proximity_free = ProximityOrder::new(&[]);
    let adam = Adam::new(config.learning_rate);
    let mut report = TrainReport {
        trace: Vec::new(),
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::stream(config.shuffle_seed, &[rng::TAG_SHUFFLE, epoch as u64]));
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        for &graph_id in &order {
            let sample = &train_set[graph_id];
            let losses = match config.step_mode {
                StepMode::PerGraph => vec![graph_step(
                    model,
                    &adam,
                    &sample.graph,
                    &sample.pairs(),
                    &sample.labels.labels_f64(),
                )?],
                StepMode::PerEdge => edge_steps(model, &adam, sample)?,
            };
            for loss in losses {
                let record = TraceRecord {
                    step: model.step_count(),
                    epoch,
                    graph_id,
                    loss,
                };
                loss_sum += loss;
                loss_count += 1;
                observer(&TrainEvent::Step(&record))?;
                report.trace.push(record);
            }
        }
        let validation_report = match validation {
            Some(v) if !v.is_empty() => {
                let options = EvalOptions {
                    threshold: config.threshold,
                    ..EvalOptions::default()
                };
                Some(evaluate(Some(model), v, &proximity_free, &options)?.report)
            }
            _ => None,
        };
        let summary = EpochSummary {
            epoch,
            mean_loss: loss_sum / loss_count.max(1) as f64,
            validation: validation_report,
        };
        observer(&TrainEvent::Epoch(&summary, model))?;
        let score = summary.validation.as_ref().and_then(|r| r.average_precision);
        report.epochs.push(summary);

        match score {
            Some(ap) if best.as_ref().is_none_or(|(b, _)| ap > *b) => {
                best = Some((ap, model.params().clone()));
                report.best_epoch = epoch;
                since_best = 0;
            }
            Some(_) => since_best += 1,
            None => report.best_epoch = epoch,
        }
        if config.patience.is_some_and(|p| since_best >= p) {
            report.stopped_early = epoch + 1 < config.epochs;
            break;
        }
    }
    if let Some((_, params)) = best {
        *model.params_mut() = params;
    }
    Ok(report)
}

/// Forward, backward and one optimizer step; returns the mean edge loss.
fn graph_step(
    model: &mut GnnModel,
    adam: &Adam,
    graph: &TypedGraph,
    pairs: &[(usize, usize)],
    labels: &[f64],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("graph has no labeled edges"));
    }
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, graph, pairs, labels)?;
    let value = tape.value(loss).values()[0];
    tape.backward_into(loss, model.params_mut())?;
    if let Err(e) = adam.step(model.params_mut()) {
        model.params_mut().zero_grad();
        return Err(e);
    }
    Ok(value / pairs.len() as f64)
}

fn edge_steps(model: &mut GnnModel, adam: &Adam, sample: &Sample) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(sample.labels.edges.len());
    for k in 0..sample.graph.ue_count {
        let single = single_ue_graph(&sample.graph, k)?;
        for e in sample.labels.edges.iter().filter(|e| e.ue == k) {
            let y = if e.positive { 1.0 } else { 0.0 };
            losses.push(graph_step(model, adam, &single, &[(e.ap, 0)], &[y])?);
        }
    }
    Ok(losses)
}

/// The AP side of `graph` with only UE `k` attached (as UE 0).
pub fn single_ue_graph(graph: &TypedGraph, k: usize) -> Result<TypedGraph> {
    if k >= graph.ue_count {
        return Err(Error::invalid(format!("UE {k} out of range")));
    }
    let mut g = graph.ap_only();
    g.ue_count = 1;
    g.ue_features = Tensor::matrix(1, graph.ap_count, graph.ue_features.row(k).to_vec())?;
    g.master_ap = vec![graph.master_ap[k]];
    g.candidate_cluster = vec![graph.candidate_cluster[k].clone()];
    g.measured_set = vec![graph.measured_set[k].clone()];
    g.ap_to_ue_edges = graph.candidate_cluster[k].iter().map(|&l| (l, 0)).collect();
    Ok(g)
}

/// Evaluates the frozen model on `validation_set`.
pub fn validate(
    model: &GnnModel,
    validation_set: &[Sample],
    proximity: &ProximityOrder,
    threshold: f64,
) -> Result<EvalReport> {
    let options = EvalOptions {
        threshold,
        baselines: vec![1, 3],
        checkpoint: None,
    };
    Ok(evaluate(Some(model), validation_set, proximity, &options)?.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::scenario::ScenarioConfig;

    fn scenario() -> Scenario {
        Scenario::generate(&ScenarioConfig {
            ap_count: 10,
            side_length_km: 0.3,
            sigma_sh_db: 6.0,
            decorrelation_distance_m: 100.0,
            grid_resolution_m: 10.0,
            seed: 3,
        })
        .unwrap()
    }

    fn small_spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            n_graphs: 3,
            ue_count: UeCount::Fixed(6),
            d_db: 10.0,
            graph: GraphParams {
                c_ap: 3,
                c_ue: 4,
                c_hat_ue: 2,
            },
            seed,
            split: Split::Train,
        }
    }

    #[test]
    fn validation_counts_stay_in_range() {
        let s = scenario();
        let spec = DatasetSpec {
            n_graphs: 8,
            ue_count: UeCount::Uniform { min: 2, max: 5 },
            split: Split::Validation,
            ..small_spec(1)
        };
        let data = make_dataset(&s, &spec).unwrap();
        assert_eq!(data.len(), 8);
        assert!(data.iter().all(|d| (2..=5).contains(&d.graph.ue_count)));
    }

    #[test]
    fn minimal_dataset_has_a_labeled_edge() {
        let spec = DatasetSpec {
            n_graphs: 1,
            ue_count: UeCount::Fixed(1),
            ..small_spec(1)
        };
        let data = make_dataset(&scenario(), &spec).unwrap();
        assert!(!data[0].labels.edges.is_empty());
    }

    #[test]
    fn rejects_bad_specs() {
        let s = scenario();
        let bad = [
            DatasetSpec {
                n_graphs: 0,
                ..small_spec(1)
            },
            DatasetSpec {
                d_db: 0.0,
                ..small_spec(1)
            },
            DatasetSpec {
                ue_count: UeCount::Uniform { min: 5, max: 4 },
                ..small_spec(1)
            },
        ];
        for spec in bad {
            assert!(make_dataset(&s, &spec).is_err());
        }
    }

    #[test]
    fn single_ue_graph_matches_row() {
        let data = make_dataset(&scenario(), &small_spec(2)).unwrap();
        let g = &data[0].graph;
        let one = single_ue_graph(g, 3).unwrap();
        assert_eq!(one.ue_features.row(0), g.ue_features.row(3));
        assert_eq!(one.ap_to_ue_edges.len(), g.candidate_cluster[3].len());
    }

    #[test]
    fn per_edge_mode_takes_one_step_per_edge() {
        let s = scenario();
        let data = make_dataset(
            &s,
            &DatasetSpec {
                n_graphs: 1,
                ..small_spec(4)
            },
        )
        .unwrap();
        let mut m = GnnModel::new(ModelConfig::for_aps(10), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            step_mode: StepMode::PerEdge,
            ..TrainConfig::default()
        };
        let report = train(&mut m, &data, None, &cfg).unwrap();
        assert_eq!(report.trace.len(), data[0].labels.edges.len());
        assert_eq!(m.step_count() as usize, report.trace.len());
    }
}
