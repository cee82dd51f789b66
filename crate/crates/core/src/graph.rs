//! The homogeneous AP graph and the AP→UE attachment graph.
//!
//! AP features: row `l` holds, at column `l̂`, the power AP `l̂` measures
//! from AP `l`, for every `l̂` adjacent to `l` after symmetrization, and 0
//! elsewhere. UE features: row `k` holds the RSRP of the master AP and of
//! the `ĉ_UE` APs nearest the master, and 0 elsewhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scenario::{Point, RsrpTable};

pub const GRAPH_FILE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphParams {
    /// Nearest APs linked to each AP.
    pub c_ap: usize,
    /// APs nearest the master considered for link prediction.
    pub c_ue: usize,
    /// APs nearest the master whose RSRP the UE reports.
    pub c_hat_ue: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            c_ap: 5,
            c_ue: 10,
            c_hat_ue: 2,
        }
    }
}

/// For every AP, all other APs sorted by distance (ties: lower index first).
#[derive(Clone, Debug, PartialEq)]
pub struct ProximityOrder {
    order: Vec<Vec<usize>>,
}

impl ProximityOrder {
    pub fn new(ap_positions: &[Point]) -> Self {
        let order = ap_positions
            .iter()
            .enumerate()
            .map(|(l, p)| {
                let mut others: Vec<(f64, usize)> = ap_positions
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != l)
                    .map(|(j, q)| (p.distance(q), j))
                    .collect();
                others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                others.into_iter().map(|(_, j)| j).collect()
            })
            .collect();
        Self { order }
    }

    pub fn ap_count(&self) -> usize {
        self.order.len()
    }

    /// The `n` APs nearest `ap`, excluding `ap` itself.
    pub fn nearest(&self, ap: usize, n: usize) -> &[usize] {
        let o = &self.order[ap];
        &o[..n.min(o.len())]
    }
}

/// AP adjacency and AP feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ApGraph {
    pub edges: Vec<(usize, usize)>,
    pub neighbors: Vec<Vec<usize>>,
    pub features: Tensor,
}

pub fn build_ap_graph(rsrp: &RsrpTable, proximity: &ProximityOrder, c_ap: usize) -> Result<ApGraph> {
    let l_count = rsrp.ap_count();
    if proximity.ap_count() != l_count {
        return Err(Error::invalid("AP positions and RSRP table disagree on L"));
    }
    if c_ap == 0 || c_ap >= l_count {
        return Err(Error::invalid(format!(
            "c_ap must lie in [1, L-1], got {c_ap} with L={l_count}"
        )));
    }
    let mut adjacent = vec![false; l_count * l_count];
    for l in 0..l_count {
        for &j in proximity.nearest(l, c_ap) {
            adjacent[l * l_count + j] = true;
            adjacent[j * l_count + l] = true;
        }
    }
    let mut edges = Vec::new();
    let mut neighbors = vec![Vec::new(); l_count];
    let mut features = vec![0.0; l_count * l_count];
    for l in 0..l_count {
        for j in 0..l_count {
            if !adjacent[l * l_count + j] {
                continue;
            }
            neighbors[l].push(j);
            if l < j {
                edges.push((l, j));
            }
            features[l * l_count + j] = rsrp
                .ap_to_ap(l, j)
                .ok_or_else(|| Error::invalid("self loop in AP graph"))?;
        }
    }
    Ok(ApGraph {
        edges,
        neighbors,
        features: Tensor::matrix(l_count, l_count, features)?,
    })
}

/// Strongest AP for a UE; ties go to the lower index.
pub fn select_master_ap(rsrp: &RsrpTable, ue: usize) -> usize {
    let mut best = 0;
    for l in 1..rsrp.ap_count() {
        if rsrp.ap_to_ue(l, ue) > rsrp.ap_to_ue(best, ue) {
            best = l;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct UeAttachment {
    pub master: usize,
    /// Master first, then the `c_ue` APs nearest the master.
    pub candidate_cluster: Vec<usize>,
    pub measured_set: Vec<usize>,
    pub feature_row: Vec<f64>,
    /// Directed `(ap, ue)` edges, one per candidate-cluster AP.
    pub edges: Vec<(usize, usize)>,
}

pub fn build_ue_attachment(
    rsrp: &RsrpTable,
    proximity: &ProximityOrder,
    ue: usize,
    c_ue: usize,
    c_hat_ue: usize,
) -> Result<UeAttachment> {
    let l_count = rsrp.ap_count();
    if c_hat_ue > c_ue {
        return Err(Error::invalid(format!("c_hat_ue ({c_hat_ue}) exceeds c_ue ({c_ue})")));
    }
    if c_ue >= l_count {
        return Err(Error::invalid(format!("c_ue must be below L={l_count}, got {c_ue}")));
    }
    if ue >= rsrp.ue_count() {
        return Err(Error::invalid(format!("UE {ue} not in table")));
    }
    let master = select_master_ap(rsrp, ue);
    let mut candidate_cluster = Vec::with_capacity(c_ue + 1);
    candidate_cluster.push(master);
    candidate_cluster.extend_from_slice(proximity.nearest(master, c_ue));
    let measured_set = proximity.nearest(master, c_hat_ue).to_vec();
    let mut feature_row = vec![0.0; l_count];
    for &l in std::iter::once(&master).chain(&measured_set) {
        feature_row[l] = rsrp.ap_to_ue(l, ue);
    }
    let edges = candidate_cluster.iter().map(|&l| (l, ue)).collect();
    Ok(UeAttachment {
        master,
        candidate_cluster,
        measured_set,
        feature_row,
        edges,
    })
}

/// Both graphs with their features.
#[derive(Clone, Debug, PartialEq)]
pub struct TypedGraph {
    pub ap_count: usize,
    pub ue_count: usize,
    pub ap_edges: Vec<(usize, usize)>,
    pub ap_neighbors: Vec<Vec<usize>>,
    pub ap_to_ue_edges: Vec<(usize, usize)>,
    /// L×L.
    pub ap_features: Tensor,
    /// K×L.
    pub ue_features: Tensor,
    pub master_ap: Vec<usize>,
    pub candidate_cluster: Vec<Vec<usize>>,
    pub measured_set: Vec<Vec<usize>>,
}

impl TypedGraph {
    pub fn from_parts(ap: ApGraph, attachments: Vec<UeAttachment>) -> Result<Self> {
        let ap_count = ap.neighbors.len();
        let ue_count = attachments.len();
        let mut ue_features = Vec::with_capacity(ue_count * ap_count);
        let mut graph = Self {
            ap_count,
            ue_count,
            ap_edges: ap.edges,
            ap_neighbors: ap.neighbors,
            ap_to_ue_edges: Vec::new(),
            ap_features: ap.features,
            ue_features: Tensor::zeros(&[0, ap_count]),
            master_ap: Vec::with_capacity(ue_count),
            candidate_cluster: Vec::with_capacity(ue_count),
            measured_set: Vec::with_capacity(ue_count),
        };
        for (k, a) in attachments.into_iter().enumerate() {
            if a.feature_row.len() != ap_count || a.edges.iter().any(|&(_, u)| u != k) {
                return Err(Error::invalid(format!("attachment {k} does not fit the graph")));
            }
            ue_features.extend(a.feature_row);
            graph.ap_to_ue_edges.extend(a.edges);
            graph.master_ap.push(a.master);
            graph.candidate_cluster.push(a.candidate_cluster);
            graph.measured_set.push(a.measured_set);
        }
        graph.ue_features = Tensor::matrix(ue_count, ap_count, ue_features)?;
        Ok(graph)
    }

    /// The same AP side with no UEs attached.
    pub fn ap_only(&self) -> Self {
        Self {
            ue_count: 0,
            ap_to_ue_edges: Vec::new(),
            ue_features: Tensor::zeros(&[0, self.ap_count]),
            master_ap: Vec::new(),
            candidate_cluster: Vec::new(),
            measured_set: Vec::new(),
            ..self.clone()
        }
    }

    /// Incoming AP neighbours of UE `k` (its candidate cluster).
    pub fn ue_neighbors(&self) -> &[Vec<usize>] {
        &self.candidate_cluster
    }

    pub fn to_file(&self, labels: Option<&EdgeLabelSet>) -> GraphFile {
        GraphFile {
            version: GRAPH_FILE_VERSION,
            ap_count: self.ap_count,
            ue_count: self.ue_count,
            ap_edges: self.ap_edges.clone(),
            ap_to_ue_edges: self.ap_to_ue_edges.clone(),
            ap_features: self.ap_features.values().to_vec(),
            ue_features: self.ue_features.values().to_vec(),
            master_ap: self.master_ap.clone(),
            candidate_cluster: self.candidate_cluster.clone(),
            measured_set: self.measured_set.clone(),
            d_db: labels.map(|l| l.d_db),
            labels: labels.map(|l| l.edges.iter().map(|e| (e.ap, e.ue, u8::from(e.positive))).collect()),
            out_of_cluster_positives: labels.map(|l| l.out_of_cluster_positives.clone()),
        }
    }
}

/// Builds both graphs for one set of UEs.
pub fn build_graph(rsrp: &RsrpTable, proximity: &ProximityOrder, params: &GraphParams) -> Result<TypedGraph> {
    let ap = build_ap_graph(rsrp, proximity, params.c_ap)?;
    let attachments = (0..rsrp.ue_count())
        .map(|k| build_ue_attachment(rsrp, proximity, k, params.c_ue, params.c_hat_ue))
        .collect::<Result<Vec<_>>>()?;
    TypedGraph::from_parts(ap, attachments)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledEdge {
    pub ap: usize,
    pub ue: usize,
    pub positive: bool,
}

/// Link labels: positive iff the link is within `d_db` of the master's RSRP.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeLabelSet {
    pub edges: Vec<LabeledEdge>,
    pub d_db: f64,
    /// Per UE: positives among APs outside the labeled set.
    pub out_of_cluster_positives: Vec<usize>,
}

impl EdgeLabelSet {
    pub fn labels_f64(&self) -> Vec<f64> {
        self.edges.iter().map(|e| if e.positive { 1.0 } else { 0.0 }).collect()
    }

    pub fn positive_count(&self) -> usize {
        self.edges.iter().filter(|e| e.positive).count()
    }

    pub fn total_out_of_cluster_positives(&self) -> usize {
        self.out_of_cluster_positives.iter().sum()
    }
}

/// `R_{master,k} − R_{l,k} < d_db`.
pub fn is_potential_link(master_rsrp: f64, link_rsrp: f64, d_db: f64) -> bool {
    master_rsrp - link_rsrp < d_db
}

fn check_d_db(d_db: f64) -> Result<()> {
    if d_db > 0.0 && d_db.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("d_db must be positive, got {d_db}")))
    }
}

/// Labels every candidate-cluster edge of `graph`.
pub fn label_edges(rsrp: &RsrpTable, graph: &TypedGraph, d_db: f64) -> Result<EdgeLabelSet> {
    check_d_db(d_db)?;
    if rsrp.ue_count() != graph.ue_count || rsrp.ap_count() != graph.ap_count {
        return Err(Error::invalid("graph was not built from this RSRP table"));
    }
    let mut edges = Vec::with_capacity(graph.ap_to_ue_edges.len());
    let mut outside = Vec::with_capacity(graph.ue_count);
    for k in 0..graph.ue_count {
        let master = graph.master_ap[k];
        let master_rsrp = rsrp.ap_to_ue(master, k);
        let cluster = &graph.candidate_cluster[k];
        let mut in_cluster = vec![false; graph.ap_count];
        for &l in cluster {
            in_cluster[l] = true;
            edges.push(LabeledEdge {
                ap: l,
                ue: k,
                positive: is_potential_link(master_rsrp, rsrp.ap_to_ue(l, k), d_db),
            });
        }
        outside.push(
            (0..graph.ap_count)
                .filter(|&l| !in_cluster[l] && is_potential_link(master_rsrp, rsrp.ap_to_ue(l, k), d_db))
                .count(),
        );
    }
    Ok(EdgeLabelSet {
        edges,
        d_db,
        out_of_cluster_positives: outside,
    })
}

/// Labels every AP–UE pair in the table (no clustering).
pub fn label_all_links(rsrp: &RsrpTable, d_db: f64) -> Result<EdgeLabelSet> {
    check_d_db(d_db)?;
    let mut edges = Vec::with_capacity(rsrp.ap_count() * rsrp.ue_count());
    for k in 0..rsrp.ue_count() {
        let master_rsrp = rsrp.ap_to_ue(select_master_ap(rsrp, k), k);
        for l in 0..rsrp.ap_count() {
            edges.push(LabeledEdge {
                ap: l,
                ue: k,
                positive: is_potential_link(master_rsrp, rsrp.ap_to_ue(l, k), d_db),
            });
        }
    }
    Ok(EdgeLabelSet {
        edges,
        d_db,
        out_of_cluster_positives: vec![0; rsrp.ue_count()],
    })
}

/// Share of UE `ue`'s total received power (linear scale, over all APs)
/// carried by its positive-labeled links plus the master.
pub fn positive_power_fraction(rsrp: &RsrpTable, labels: &EdgeLabelSet, ue: usize) -> Result<f64> {
    let master = select_master_ap(rsrp, ue);
    let mut selected = vec![false; rsrp.ap_count()];
    selected[master] = true;
    let mut any = false;
    for e in labels.edges.iter().filter(|e| e.ue == ue) {
        any = true;
        if e.positive {
            selected[e.ap] = true;
        }
    }
    if !any {
        return Err(Error::invalid(format!("no labels for UE {ue}")));
    }
    let power = |l: usize| 10f64.powf(rsrp.ap_to_ue(l, ue) / 10.0);
    let total: f64 = (0..rsrp.ap_count()).map(power).sum();
    let kept: f64 = (0..rsrp.ap_count()).filter(|&l| selected[l]).map(power).sum();
    Ok(kept / total)
}

/// On-disk form of a graph, optionally with labels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphFile {
    pub version: u32,
    pub ap_count: usize,
    pub ue_count: usize,
    pub ap_edges: Vec<(usize, usize)>,
    pub ap_to_ue_edges: Vec<(usize, usize)>,
    pub ap_features: Vec<f64>,
    pub ue_features: Vec<f64>,
    pub master_ap: Vec<usize>,
    pub candidate_cluster: Vec<Vec<usize>>,
    pub measured_set: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<(usize, usize, u8)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_of_cluster_positives: Option<Vec<usize>>,
}

impl GraphFile {
    pub fn into_graph(self) -> Result<(TypedGraph, Option<EdgeLabelSet>)> {
        crate::io::check_version("graph", self.version, GRAPH_FILE_VERSION)?;
        let l = self.ap_count;
        let mut neighbors = vec![Vec::new(); l];
        for &(u, v) in &self.ap_edges {
            if u >= l || v >= l || u == v {
                return Err(Error::invalid(format!("bad AP edge ({u}, {v})")));
            }
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        neighbors.iter_mut().for_each(|n| n.sort_unstable());
        if self.master_ap.len() != self.ue_count
            || self.candidate_cluster.len() != self.ue_count
            || self.measured_set.len() != self.ue_count
        {
            return Err(Error::invalid("per-UE arrays do not match ue_count"));
        }
        let expected: Vec<(usize, usize)> = self
            .candidate_cluster
            .iter()
            .enumerate()
            .flat_map(|(k, c)| c.iter().map(move |&ap| (ap, k)))
            .collect();
        if expected != self.ap_to_ue_edges {
            return Err(Error::invalid("AP→UE edges do not match candidate clusters"));
        }
        let graph = TypedGraph {
            ap_count: l,
            ue_count: self.ue_count,
            ap_edges: self.ap_edges,
            ap_neighbors: neighbors,
            ap_to_ue_edges: self.ap_to_ue_edges,
            ap_features: Tensor::matrix(l, l, self.ap_features)?,
            ue_features: Tensor::matrix(self.ue_count, l, self.ue_features)?,
            master_ap: self.master_ap,
            candidate_cluster: self.candidate_cluster,
            measured_set: self.measured_set,
        };
        let labels = match (self.labels, self.d_db) {
            (Some(triples), Some(d_db)) => Some(EdgeLabelSet {
                edges: triples
                    .into_iter()
                    .map(|(ap, ue, y)| LabeledEdge {
                        ap,
                        ue,
                        positive: y != 0,
                    })
                    .collect(),
                d_db,
                out_of_cluster_positives: self.out_of_cluster_positives.unwrap_or_else(|| vec![0; graph.ue_count]),
            }),
            _ => None,
        };
        Ok((graph, labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(ap_to_ue: Vec<Vec<f64>>) -> RsrpTable {
        let l = ap_to_ue.len();
        let k = ap_to_ue[0].len();
        RsrpTable::from_values(l, k, ap_to_ue.concat(), vec![-50.0; l * l]).unwrap()
    }

    fn line(n: usize) -> Vec<Point> {
        (0..n).map(|i| Point::new(i as f64, 0.0)).collect()
    }

    #[test]
    fn three_collinear_aps_with_one_neighbor() {
        let rsrp = table(vec![vec![0.0]; 3]);
        let g = build_ap_graph(&rsrp, &ProximityOrder::new(&line(3)), 1).unwrap();
        assert_eq!(g.edges, vec![(0, 1), (1, 2)]);
        assert_eq!(g.neighbors, vec![vec![1], vec![0, 2], vec![1]]);
    }

    #[test]
    fn saturated_c_ap_gives_complete_dense_graph() {
        let rsrp = table(vec![vec![0.0]; 4]);
        let g = build_ap_graph(&rsrp, &ProximityOrder::new(&line(4)), 3).unwrap();
        assert_eq!(g.edges.len(), 6);
        for l in 0..4 {
            for j in 0..4 {
                assert_eq!(g.features.get2(l, j) != 0.0, l != j);
            }
        }
        assert!(build_ap_graph(&rsrp, &ProximityOrder::new(&line(4)), 4).is_err());
    }

    #[test]
    fn master_is_argmax_with_low_index_ties() {
        let t = table(vec![vec![-80.0, -70.0], vec![-70.0, -70.0], vec![-90.0, -75.0]]);
        assert_eq!(select_master_ap(&t, 0), 1);
        assert_eq!(select_master_ap(&t, 1), 0);
    }

    #[test]
    fn attachment_on_a_line() {
        // UE strongest at AP 2; APs 1 and 3 are equidistant, 1 wins the tie.
        let t = table(vec![vec![-90.0], vec![-80.0], vec![-60.0], vec![-85.0], vec![-95.0]]);
        let prox = ProximityOrder::new(&line(5));
        let a = build_ue_attachment(&t, &prox, 0, 2, 2).unwrap();
        assert_eq!(a.master, 2);
        assert_eq!(a.candidate_cluster, vec![2, 1, 3]);
        assert_eq!(a.measured_set, vec![1, 3]);
        assert_eq!(a.feature_row, vec![0.0, -80.0, -60.0, -85.0, 0.0]);
        assert_eq!(a.edges, vec![(2, 0), (1, 0), (3, 0)]);

        let full = build_ue_attachment(&t, &prox, 0, 4, 1).unwrap();
        assert_eq!(full.candidate_cluster.len(), 5);

        assert!(build_ue_attachment(&t, &prox, 0, 1, 2).is_err());
        assert!(build_ue_attachment(&t, &prox, 0, 5, 2).is_err());
    }

    #[test]
    fn label_boundaries() {
        assert!(is_potential_link(-80.0, -85.0, 10.0));
        assert!(is_potential_link(-80.0, -80.0, 10.0));
        assert!(!is_potential_link(-80.0, -90.0, 10.0));
    }

    #[test]
    fn labels_follow_cluster_and_count_outside_positives() {
        let t = table(vec![vec![-88.0], vec![-85.0], vec![-80.0], vec![-95.0], vec![-82.0]]);
        let prox = ProximityOrder::new(&line(5));
        let g = build_graph(
            &t,
            &prox,
            &GraphParams {
                c_ap: 1,
                c_ue: 2,
                c_hat_ue: 1,
            },
        )
        .unwrap();
        let labels = label_edges(&t, &g, 10.0).unwrap();
        let got: Vec<_> = labels.edges.iter().map(|e| (e.ap, e.positive)).collect();
        assert_eq!(got, vec![(2, true), (1, true), (3, false)]);
        // APs 0 (-88) and 4 (-82) are positive and outside the cluster.
        assert_eq!(labels.out_of_cluster_positives, vec![2]);
        assert!(label_edges(&t, &g, 0.0).is_err());
    }

    #[test]
    fn single_ap_power_fraction_is_one() {
        let t = table(vec![vec![-70.0, -20.0]]);
        let labels = label_all_links(&t, 10.0).unwrap();
        assert_eq!(positive_power_fraction(&t, &labels, 0).unwrap(), 1.0);
        assert_eq!(positive_power_fraction(&t, &labels, 1).unwrap(), 1.0);
    }

    #[test]
    fn power_fraction_excludes_weak_links() {
        // -60 dB and -80 dB: the second is 20 dB down and carries 1% of the power.
        let t = table(vec![vec![-60.0], vec![-80.0]]);
        let labels = label_all_links(&t, 10.0).unwrap();
        let f = positive_power_fraction(&t, &labels, 0).unwrap();
        assert!((f - 1.0 / 1.01).abs() < 1e-12);
    }

    #[test]
    fn graph_file_round_trip() {
        let t = table(vec![vec![-88.0, -70.0], vec![-85.0, -72.0], vec![-80.0, -90.0]]);
        let prox = ProximityOrder::new(&line(3));
        let g = build_graph(
            &t,
            &prox,
            &GraphParams {
                c_ap: 1,
                c_ue: 1,
                c_hat_ue: 1,
            },
        )
        .unwrap();
        let labels = label_edges(&t, &g, 10.0).unwrap();
        let json = serde_json::to_string(&g.to_file(Some(&labels))).unwrap();
        let file: GraphFile = serde_json::from_str(&json).unwrap();
        let (g2, l2) = file.into_graph().unwrap();
        assert_eq!(g2, g);
        assert_eq!(l2.unwrap(), labels);
    }
}
