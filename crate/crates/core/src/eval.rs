//! Link-classification metrics, proximity baselines and clustering
//! diagnostics.
//!
//! Two recall figures are reported. *Total* recall divides true positives
//! by every positive link of the UE, including positives the candidate
//! cluster never offered to the classifier. *In-cluster* recall uses only
//! the positives among scored links.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{is_potential_link, select_master_ap, EdgeLabelSet, ProximityOrder};
use crate::model::{predict, GnnModel, UePrediction};
use crate::scenario::RsrpTable;
use crate::trainer::Sample;

/// Confusion counts over scored links.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_selections(items: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Self::default();
        for (selected, positive) in items {
            match (selected, positive) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// `None` when nothing was selected.
    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    /// Recall over scored positives plus `unscored_positives`.
    pub fn recall(&self, unscored_positives: usize) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_ + unscored_positives)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub confusion: Confusion,
    pub precision: Option<f64>,
    /// Denominator includes out-of-cluster positives.
    pub recall: Option<f64>,
    pub in_cluster_recall: Option<f64>,
}

impl PrecisionRecall {
    pub fn new(confusion: Confusion, out_of_cluster_positives: usize) -> Self {
        Self {
            confusion,
            precision: confusion.precision(),
            recall: confusion.recall(out_of_cluster_positives),
            in_cluster_recall: confusion.recall(0),
        }
    }
}

/// Selects every link with confidence above `threshold`.
pub fn precision_recall(scores: &[(f64, bool)], out_of_cluster_positives: usize, threshold: f64) -> PrecisionRecall {
    let c = Confusion::from_selections(scores.iter().map(|&(s, y)| (s > threshold, y)));
    PrecisionRecall::new(c, out_of_cluster_positives)
}

/// Distinct scores in descending order with their positive/negative counts.
fn tie_groups(scores: &[(f64, bool)]) -> Result<Vec<(f64, usize, usize)>> {
    if scores.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::invalid("NaN confidence"));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for (s, y) in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if y {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((s, usize::from(y), usize::from(!y))),
        }
    }
    Ok(groups)
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half.
pub fn auc(scores: &[(f64, bool)]) -> Result<f64> {
    let groups = tie_groups(scores)?;
    let pos: usize = groups.iter().map(|g| g.1).sum();
    let neg: usize = groups.iter().map(|g| g.2).sum();
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes"));
    }
    let mut neg_below = neg as f64;
    let mut wins = 0.0;
    for &(_, p, n) in &groups {
        neg_below -= n as f64;
        wins += p as f64 * (neg_below + 0.5 * n as f64);
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Step-wise average precision over the descending-score sweep; tied
/// scores enter the sweep together.
pub fn average_precision(scores: &[(f64, bool)]) -> Result<f64> {
    let groups = tie_groups(scores)?;
    let pos: usize = groups.iter().map(|g| g.1).sum();
    if pos == 0 {
        return Err(Error::UndefinedMetric("average precision needs a positive"));
    }
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    for &(_, p, n) in &groups {
        tp += p;
        fp += n;
        if p > 0 {
            ap += (p as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// ROC points for "score ≥ threshold", from (0,0) to (1,1).
pub fn roc_curve(scores: &[(f64, bool)]) -> Result<Vec<RocPoint>> {
    let groups = tie_groups(scores)?;
    let pos: usize = groups.iter().map(|g| g.1).sum();
    let neg: usize = groups.iter().map(|g| g.2).sum();
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ROC needs both classes"));
    }
    let mut out = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0, 0);
    for &(s, p, n) in &groups {
        tp += p;
        fp += n;
        out.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(out)
}

/// Trapezoidal area under a ROC curve.
pub fn trapezoid_area(curve: &[RocPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Precision/recall for "score ≥ threshold" at every distinct score.
pub fn pr_curve(scores: &[(f64, bool)]) -> Result<Vec<PrPoint>> {
    let groups = tie_groups(scores)?;
    let pos: usize = groups.iter().map(|g| g.1).sum();
    if pos == 0 {
        return Err(Error::UndefinedMetric("PR curve needs a positive"));
    }
    let (mut tp, mut fp) = (0, 0);
    Ok(groups
        .iter()
        .map(|&(s, p, n)| {
            tp += p;
            fp += n;
            PrPoint {
                threshold: s,
                recall: tp as f64 / pos as f64,
                precision: tp as f64 / (tp + fp) as f64,
            }
        })
        .collect())
}

/// Selecting the master plus the `n_closest` APs nearest to it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineStats {
    pub n_closest: usize,
    /// Mean over UEs of the positive share among the `n_closest` APs
    /// (master excluded).
    pub positive_fraction: f64,
    /// Over all selected links, master included.
    pub precision: f64,
    /// Over all positive links of every UE, master included.
    pub recall: f64,
}

/// Running totals so baselines can be pooled over several graphs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BaselineAccumulator {
    ues: usize,
    fraction_sum: f64,
    selected: usize,
    selected_positive: usize,
    positives: usize,
}

impl BaselineAccumulator {
    pub fn add(&mut self, rsrp: &RsrpTable, proximity: &ProximityOrder, d_db: f64, n_closest: usize) -> Result<()> {
        if n_closest == 0 || n_closest >= rsrp.ap_count() {
            return Err(Error::invalid(format!(
                "n_closest must be in 1..{}, got {n_closest}",
                rsrp.ap_count()
            )));
        }
        if d_db.is_nan() || d_db <= 0.0 {
            return Err(Error::invalid("d_db must be positive"));
        }
        for k in 0..rsrp.ue_count() {
            let master = select_master_ap(rsrp, k);
            let m = rsrp.ap_to_ue(master, k);
            let positive = |l: usize| l == master || is_potential_link(m, rsrp.ap_to_ue(l, k), d_db);
            let hits = proximity
                .nearest(master, n_closest)
                .iter()
                .filter(|&&l| positive(l))
                .count();
            self.ues += 1;
            self.fraction_sum += hits as f64 / n_closest as f64;
            self.selected += n_closest + 1;
            self.selected_positive += hits + 1;
            self.positives += (0..rsrp.ap_count()).filter(|&l| positive(l)).count();
        }
        Ok(())
    }

    pub fn finish(&self, n_closest: usize) -> Result<BaselineStats> {
        if self.ues == 0 {
            return Err(Error::UndefinedMetric("baseline over zero UEs"));
        }
        Ok(BaselineStats {
            n_closest,
            positive_fraction: self.fraction_sum / self.ues as f64,
            precision: self.selected_positive as f64 / self.selected as f64,
            recall: self.selected_positive as f64 / self.positives as f64,
        })
    }
}

pub fn proximity_baseline(
    rsrp: &RsrpTable,
    proximity: &ProximityOrder,
    d_db: f64,
    n_closest: usize,
) -> Result<BaselineStats> {
    let mut acc = BaselineAccumulator::default();
    acc.add(rsrp, proximity, d_db, n_closest)?;
    acc.finish(n_closest)
}

/// Share of all positive links (master included) lying outside the
/// candidate clusters, pooled over label sets.
pub fn cluster_recall_ceiling<'a>(labels: impl IntoIterator<Item = &'a EdgeLabelSet>) -> Result<f64> {
    let (mut inside, mut outside) = (0usize, 0usize);
    for l in labels {
        inside += l.positive_count();
        outside += l.total_out_of_cluster_positives();
    }
    ratio(outside, inside + outside).ok_or(Error::UndefinedMetric("no positive links"))
}

/// One scored candidate link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkOutcome {
    pub confidence: f64,
    pub selected: bool,
    pub positive: bool,
}

/// Joins predictions with labels by `(ap, ue)`.
pub fn link_outcomes(predictions: &[UePrediction], labels: &EdgeLabelSet) -> Result<Vec<LinkOutcome>> {
    let by_edge: HashMap<(usize, usize), bool> = labels.edges.iter().map(|e| ((e.ap, e.ue), e.positive)).collect();
    if by_edge.len() != labels.edges.len() {
        return Err(Error::invalid("duplicate labeled edge"));
    }
    let mut out = Vec::with_capacity(labels.edges.len());
    for p in predictions {
        for link in &p.links {
            let positive = *by_edge
                .get(&(link.ap, p.ue))
                .ok_or_else(|| Error::invalid(format!("no label for AP {} / UE {}", link.ap, p.ue)))?;
            out.push(LinkOutcome {
                confidence: link.confidence,
                selected: link.selected,
                positive,
            });
        }
    }
    if out.len() != labels.edges.len() {
        return Err(Error::invalid("labels cover links that were not scored"));
    }
    Ok(out)
}

/// Metrics of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_count: usize,
    pub c_ue: usize,
    pub d_db: f64,
    pub threshold: f64,
    pub checkpoint: Option<String>,
    pub graph_count: usize,
    pub ue_count: usize,
    pub scored_links: usize,
    pub out_of_cluster_positives: usize,
    pub confusion: Confusion,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub in_cluster_recall: Option<f64>,
    pub auc: Option<f64>,
    pub average_precision: Option<f64>,
    pub cluster_recall_ceiling: Option<f64>,
    pub baselines: Vec<BaselineStats>,
    /// Resolved configuration of the producing run.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Header plus one row for `metrics.csv`.
    pub fn metrics_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "ap_count,c_ue,d_db,threshold,checkpoint,precision,recall,in_cluster_recall,auc,average_precision,cluster_recall_ceiling\n\
             {},{},{},{},{},{},{},{},{},{},{}\n",
            self.ap_count,
            self.c_ue,
            self.d_db,
            self.threshold,
            self.checkpoint.as_deref().unwrap_or(""),
            f(self.precision),
            f(self.recall),
            f(self.in_cluster_recall),
            f(self.auc),
            f(self.average_precision),
            f(self.cluster_recall_ceiling),
        )
    }
}

pub fn roc_csv(curve: &[RocPoint]) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in curve {
        let _ = writeln!(s, "{},{:.6},{:.6}", p.threshold, p.fpr, p.tpr);
    }
    s
}

pub fn pr_csv(curve: &[PrPoint]) -> String {
    let mut s = String::from("threshold,recall,precision\n");
    for p in curve {
        let _ = writeln!(s, "{},{:.6},{:.6}", p.threshold, p.recall, p.precision);
    }
    s
}

/// Report plus the per-link outcomes it was computed from.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub outcomes: Vec<LinkOutcome>,
}

impl Evaluation {
    pub fn scores(&self) -> Vec<(f64, bool)> {
        self.outcomes.iter().map(|o| (o.confidence, o.positive)).collect()
    }
}

/// Options for [`evaluate`] beyond the model itself.
#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub threshold: f64,
    /// Baseline neighbourhood sizes; empty skips baselines.
    pub baselines: Vec<usize>,
    pub checkpoint: Option<String>,
}

/// Scores `samples` with the frozen model. With `model = None` only the
/// label statistics and baselines are computed.
pub fn evaluate(
    model: Option<&GnnModel>,
    samples: &[Sample],
    proximity: &ProximityOrder,
    options: &EvalOptions,
) -> Result<Evaluation> {
    let first = samples.first().ok_or_else(|| Error::invalid("no evaluation graphs"))?;
    let ap_count = first.graph.ap_count;
    let c_ue = first
        .graph
        .candidate_cluster
        .first()
        .map_or(0, |c| c.len().saturating_sub(1));
    let d_db = first.labels.d_db;

    let outcomes: Vec<LinkOutcome> = match model {
        Some(m) => {
            let per_graph = samples
                .par_iter()
                .map(|s| link_outcomes(&predict(&s.graph, m, None, options.threshold)?, &s.labels))
                .collect::<Result<Vec<_>>>()?;
            per_graph.into_iter().flatten().collect()
        }
        None => Vec::new(),
    };
    let out_of_cluster: usize = samples.iter().map(|s| s.labels.total_out_of_cluster_positives()).sum();

    let mut baselines = Vec::with_capacity(options.baselines.len());
    for &n in &options.baselines {
        let mut acc = BaselineAccumulator::default();
        for s in samples {
            acc.add(&s.rsrp, proximity, d_db, n)?;
        }
        baselines.push(acc.finish(n)?);
    }

    let scores: Vec<(f64, bool)> = outcomes.iter().map(|o| (o.confidence, o.positive)).collect();
    let pr = PrecisionRecall::new(
        Confusion::from_selections(outcomes.iter().map(|o| (o.selected, o.positive))),
        out_of_cluster,
    );
    let scored = model.is_some();
    let report = EvalReport {
        ap_count,
        c_ue,
        d_db,
        threshold: options.threshold,
        checkpoint: options.checkpoint.clone(),
        graph_count: samples.len(),
        ue_count: samples.iter().map(|s| s.graph.ue_count).sum(),
        scored_links: outcomes.len(),
        out_of_cluster_positives: out_of_cluster,
        confusion: pr.confusion,
        precision: pr.precision.filter(|_| scored),
        recall: pr.recall.filter(|_| scored),
        in_cluster_recall: pr.in_cluster_recall.filter(|_| scored),
        auc: auc(&scores).ok(),
        average_precision: average_precision(&scores).ok(),
        cluster_recall_ceiling: cluster_recall_ceiling(samples.iter().map(|s| &s.labels)).ok(),
        baselines,
        config: serde_json::Value::Null,
    };
    Ok(Evaluation { report, outcomes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precision_recall_examples() {
        let s = [(0.9, true), (0.8, false), (0.3, true)];
        let pr = precision_recall(&s, 0, 0.5);
        assert_eq!(pr.precision, Some(0.5));
        assert_eq!(pr.recall, Some(0.5));

        let all = [(1.0, true), (1.0, true)];
        let pr = precision_recall(&all, 0, 0.5);
        assert_eq!((pr.precision, pr.recall), (Some(1.0), Some(1.0)));

        let found: Vec<(f64, bool)> = vec![(0.9, true); 84];
        let pr = precision_recall(&found, 16, 0.5);
        assert!((pr.recall.unwrap() - 0.84).abs() < 1e-12);
        assert_eq!(pr.in_cluster_recall, Some(1.0));
    }

    #[test]
    fn precision_is_undefined_without_selections() {
        let pr = precision_recall(&[(0.1, true)], 0, 0.5);
        assert_eq!(pr.precision, None);
        assert_eq!(pr.recall, Some(0.0));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            auc(&[(0.9, true), (0.7, false), (0.6, true), (0.2, false)]).unwrap(),
            0.75
        );
        assert_eq!(auc(&[(0.9, true), (0.1, false)]).unwrap(), 1.0);
        assert_eq!(auc(&[(0.5, true), (0.5, false)]).unwrap(), 0.5);
        assert!(matches!(auc(&[(0.5, true)]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&[(0.9, false), (0.8, true)]).unwrap(), 0.5);
        assert_eq!(
            average_precision(&[(0.9, true), (0.8, true), (0.1, false)]).unwrap(),
            1.0
        );
        assert!(matches!(
            average_precision(&[(0.3, false)]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ceiling_counts_all_positives() {
        use crate::graph::LabeledEdge;
        let e = |positive| LabeledEdge { ap: 0, ue: 0, positive };
        let labels = EdgeLabelSet {
            edges: vec![e(true), e(true), e(false)],
            d_db: 10.0,
            out_of_cluster_positives: vec![2],
        };
        assert_eq!(cluster_recall_ceiling([&labels]).unwrap(), 0.5);
        let none = EdgeLabelSet {
            out_of_cluster_positives: vec![0],
            ..labels
        };
        assert_eq!(cluster_recall_ceiling([&none]).unwrap(), 0.0);
    }

    #[test]
    fn curves_end_at_full_recall() {
        let s = [(0.9, true), (0.7, false), (0.6, true), (0.2, false)];
        let roc = roc_curve(&s).unwrap();
        let last = roc.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert!((trapezoid_area(&roc) - 0.75).abs() < 1e-12);
        let pr = pr_curve(&s).unwrap();
        assert_eq!(pr.last().unwrap().recall, 1.0);
        assert!(roc_csv(&roc).starts_with("threshold,fpr,tpr\n"));
        assert_eq!(pr_csv(&pr).lines().count(), 5);
    }
}
