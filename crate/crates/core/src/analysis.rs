//! Routing-graph construction, percentile-threshold pruning, per-expert
//! importance, location-filtered evaluation, affinity matrices and
//! species-coverage statistics.

use crate::geocell::{self, CellId, LatLng};
use crate::model::{evaluate, Model, TrainSample};
use crate::moe::RouteTraces;
use crate::tensor::{softmax_t, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, thiserror::Error)]
pub enum AnalysisError {
    #[error("{0}")]
    Invalid(String),
    #[error("no test records remain after filtering to cell {0}")]
    EmptyLocation(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Patch-transition counts between consecutive MoE layers, with
/// layer-normalized weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutingGraph {
    pub num_experts: usize,
    /// Consecutive MoE layer pairs in depth order.
    pub layer_pairs: Vec<(usize, usize)>,
    /// Per pair: `counts[from * E + to]`.
    pub counts: Vec<Vec<u64>>,
    /// Per pair: counts normalized by the pair's total traversals.
    pub weights: Vec<Vec<f64>>,
    /// All MoE layers, including the case of a single layer with no pairs.
    pub layers: Vec<usize>,
    /// Per layer: patches routed through each expert (used for node
    /// incidence when only one MoE layer exists and for plots).
    pub node_loads: BTreeMap<usize, Vec<u64>>,
}

impl RoutingGraph {
    /// Stable content hash of the edge counts (manifest provenance).
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.num_experts as u64).to_le_bytes());
        for ((a, b), counts) in self.layer_pairs.iter().zip(&self.counts) {
            h.update((*a as u64).to_le_bytes());
            h.update((*b as u64).to_le_bytes());
            for &c in counts {
                h.update(c.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Build the routing graph from traces.
///
/// Patch lineage across resolution changes: when the later layer has a
/// coarser grid, each earlier-layer patch contributes one edge to the expert
/// of the merged patch that spatially contains it, so the pair total equals
/// the number of patches that went through the earlier layer. Grids are
/// assumed square (patch counts must be perfect squares).
pub fn build_routing_graph(traces: &RouteTraces) -> Result<RoutingGraph, AnalysisError> {
    if traces.records.is_empty() {
        return Err(AnalysisError::Invalid("no trace records".into()));
    }
    let e = traces.num_experts;
    let layers = traces.moe_layers.clone();

    // sample -> layer -> patch -> expert
    let mut by_sample: BTreeMap<u64, BTreeMap<usize, BTreeMap<usize, usize>>> = BTreeMap::new();
    let mut patch_count: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &traces.records {
        by_sample
            .entry(r.sample_id)
            .or_default()
            .entry(r.layer)
            .or_default()
            .insert(r.patch, r.expert);
        let c = patch_count.entry(r.layer).or_insert(0);
        *c = (*c).max(r.patch + 1);
    }
    let grids: BTreeMap<usize, usize> = patch_count
        .iter()
        .map(|(&l, &p)| {
            let g = (p as f64).sqrt().round() as usize;
            if g * g != p {
                return Err(AnalysisError::Invalid(format!(
                    "layer {l}: {p} patches is not a square grid"
                )));
            }
            Ok((l, g))
        })
        .collect::<Result<_, _>>()?;

    let mut node_loads: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for r in &traces.records {
        let loads = node_loads.entry(r.layer).or_insert_with(|| vec![0; e]);
        loads[r.expert] += 1;
    }

    let layer_pairs: Vec<(usize, usize)> = layers.windows(2).map(|w| (w[0], w[1])).collect();
    let mut counts = vec![vec![0u64; e * e]; layer_pairs.len()];
    for per_layer in by_sample.values() {
        // every sample must cover the same layer set
        let sample_layers: Vec<usize> = per_layer.keys().copied().collect();
        if sample_layers != layers {
            return Err(AnalysisError::Invalid(format!(
                "inconsistent layer sets across traces: {sample_layers:?} vs {layers:?}"
            )));
        }
        for (pi, &(la, lb)) in layer_pairs.iter().enumerate() {
            let (ga, gb) = (grids[&la], grids[&lb]);
            if ga < gb || ga % gb != 0 {
                return Err(AnalysisError::Invalid(format!(
                    "grid {ga} at layer {la} does not refine grid {gb} at layer {lb}"
                )));
            }
            let factor = ga / gb;
            let ea = &per_layer[&la];
            let eb = &per_layer[&lb];
            for (&pa, &expert_a) in ea {
                let (ra, ca) = (pa / ga, pa % ga);
                let pb = (ra / factor) * gb + (ca / factor);
                let expert_b = *eb.get(&pb).ok_or_else(|| {
                    AnalysisError::Invalid(format!(
                        "missing patch {pb} at layer {lb} for lineage of patch {pa}"
                    ))
                })?;
                counts[pi][expert_a * e + expert_b] += 1;
            }
        }
    }

    let weights = counts
        .iter()
        .map(|c| {
            let total: u64 = c.iter().sum();
            c.iter()
                .map(|&v| {
                    if total == 0 {
                        0.0
                    } else {
                        v as f64 / total as f64
                    }
                })
                .collect()
        })
        .collect();

    Ok(RoutingGraph {
        num_experts: e,
        layer_pairs,
        counts,
        weights,
        layers,
        node_loads,
    })
}

/// How a prune set was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum PruneMethod {
    Threshold { percentile: f64 },
    PerExpert { count: usize },
    Random { count: usize, seed: u64 },
}

/// Expert nodes marked for removal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneSet {
    pub method: PruneMethod,
    /// (layer, expert) nodes.
    pub nodes: BTreeSet<(usize, usize)>,
}

impl PruneSet {
    pub fn empty(method: PruneMethod) -> Self {
        Self {
            method,
            nodes: BTreeSet::new(),
        }
    }
}

/// Where the percentile population comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PercentileMode {
    /// One threshold over all layer pairs (default reading).
    Pooled,
    /// A threshold per layer pair.
    PerLayer,
}

/// Nearest-rank percentile of an unsorted population.
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if p <= 0.0 {
        return sorted[0];
    }
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Mark nodes whose every traversed incident edge falls below the
/// percentile threshold of layer-normalized edge weights. Nodes with no
/// traversed edges at all are removed whenever `p > 0`. Boundary layers use
/// outgoing (first) or incoming (last) edges only.
pub fn threshold_prune(
    graph: &RoutingGraph,
    percentile: f64,
    mode: PercentileMode,
) -> Result<PruneSet, AnalysisError> {
    if !(0.0..=100.0).contains(&percentile) {
        return Err(AnalysisError::Invalid(format!(
            "percentile {percentile} out of range 0..=100"
        )));
    }
    let e = graph.num_experts;
    let mut set = PruneSet::empty(PruneMethod::Threshold { percentile });

    if graph.layer_pairs.is_empty() {
        // single MoE layer: incidence degenerates to node loads
        let total: u64 = graph
            .node_loads
            .values()
            .next()
            .map(|l| l.iter().sum())
            .unwrap_or(0);
        if total == 0 {
            return Err(AnalysisError::Invalid("graph has no traversals".into()));
        }
        let layer = graph.layers[0];
        let loads = &graph.node_loads[&layer];
        let mut weights: Vec<f64> = loads
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| c as f64 / total as f64)
            .collect();
        weights.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let theta = nearest_rank(&weights, percentile);
        for (ex, &c) in loads.iter().enumerate() {
            let w = c as f64 / total as f64;
            if (c == 0 && percentile > 0.0) || (c > 0 && w < theta) {
                set.nodes.insert((layer, ex));
            }
        }
        return Ok(set);
    }

    // positive-count weights pooled (or grouped per pair)
    let pair_weights = |pi: usize| -> Vec<f64> {
        graph.weights[pi]
            .iter()
            .zip(&graph.counts[pi])
            .filter(|(_, &c)| c > 0)
            .map(|(&w, _)| w)
            .collect()
    };
    let thetas: Vec<f64> = match mode {
        PercentileMode::Pooled => {
            let mut all: Vec<f64> = (0..graph.layer_pairs.len())
                .flat_map(pair_weights)
                .collect();
            if all.is_empty() {
                return Err(AnalysisError::Invalid("graph has no traversals".into()));
            }
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let theta = nearest_rank(&all, percentile);
            vec![theta; graph.layer_pairs.len()]
        }
        PercentileMode::PerLayer => (0..graph.layer_pairs.len())
            .map(|pi| {
                let mut w = pair_weights(pi);
                if w.is_empty() {
                    return Err(AnalysisError::Invalid(format!(
                        "layer pair {:?} has no traversals",
                        graph.layer_pairs[pi]
                    )));
                }
                w.sort_by(|a, b| a.partial_cmp(b).unwrap());
                Ok(nearest_rank(&w, percentile))
            })
            .collect::<Result<_, _>>()?,
    };

    for (li, &layer) in graph.layers.iter().enumerate() {
        for ex in 0..e {
            // traversed incident edges: outgoing from pair li (if any),
            // incoming from pair li-1 (if any)
            let mut any_edge = false;
            let mut all_below = true;
            if li < graph.layer_pairs.len() {
                let (c, w, theta) = (&graph.counts[li], &graph.weights[li], thetas[li]);
                for to in 0..e {
                    if c[ex * e + to] > 0 {
                        any_edge = true;
                        if w[ex * e + to] >= theta {
                            all_below = false;
                        }
                    }
                }
            }
            if li > 0 {
                let pi = li - 1;
                let (c, w, theta) = (&graph.counts[pi], &graph.weights[pi], thetas[pi]);
                for from in 0..e {
                    if c[from * e + ex] > 0 {
                        any_edge = true;
                        if w[from * e + ex] >= theta {
                            all_below = false;
                        }
                    }
                }
            }
            if (!any_edge && percentile > 0.0) || (any_edge && all_below) {
                set.nodes.insert((layer, ex));
            }
        }
    }
    Ok(set)
}

/// Per-node accuracy drop when ablated alone, on a (location-filtered)
/// validation set. One entry per (layer, expert).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub baseline_acc: f64,
    /// ((layer, expert), accuracy drop in points)
    pub entries: Vec<((usize, usize), f64)>,
}

impl ImportanceTable {
    /// The `count` least-important nodes (smallest accuracy drop first;
    /// ties break on node order for determinism).
    pub fn least_important(&self, count: usize) -> PruneSet {
        self.least_important_ranked(count, |_| 0)
    }

    /// Like [`Self::least_important`], but equal-importance ties break
    /// toward the lower route load first. Small validation sets leave most
    /// experts tied at exactly zero drop; route load is the natural
    /// secondary ordering there.
    pub fn least_important_with_loads(&self, count: usize, graph: &RoutingGraph) -> PruneSet {
        self.least_important_ranked(count, |node| {
            graph
                .node_loads
                .get(&node.0)
                .and_then(|l| l.get(node.1))
                .copied()
                .unwrap_or(0)
        })
    }

    fn least_important_ranked(
        &self,
        count: usize,
        load_of: impl Fn(&(usize, usize)) -> u64,
    ) -> PruneSet {
        let mut sorted = self.entries.clone();
        sorted.sort_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .unwrap()
                .then(load_of(&a.0).cmp(&load_of(&b.0)))
                .then(a.0.cmp(&b.0))
        });
        PruneSet {
            method: PruneMethod::PerExpert { count },
            nodes: sorted.into_iter().take(count).map(|(n, _)| n).collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# baseline_acc={:.6}\n", self.baseline_acc);
        out.push_str("layer,expert,importance\n");
        for ((l, e), imp) in &self.entries {
            out.push_str(&format!("{l},{e},{imp:.6}\n"));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<ImportanceTable, AnalysisError> {
        let mut baseline = 0.0;
        let mut entries = Vec::new();
        let mut saw_header = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# baseline_acc=") {
                baseline = rest
                    .parse()
                    .map_err(|_| AnalysisError::Invalid(format!("line {}: bad baseline", i + 1)))?;
                continue;
            }
            if line == "layer,expert,importance" {
                saw_header = true;
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(AnalysisError::Invalid(format!(
                    "line {}: expected layer,expert,importance",
                    i + 1
                )));
            }
            let bad = |f: &str| AnalysisError::Invalid(format!("line {}: bad {f}", i + 1));
            entries.push((
                (
                    cols[0].parse().map_err(|_| bad("layer"))?,
                    cols[1].parse().map_err(|_| bad("expert"))?,
                ),
                cols[2].parse().map_err(|_| bad("importance"))?,
            ));
        }
        if !saw_header {
            return Err(AnalysisError::Invalid(
                "importance csv missing header".into(),
            ));
        }
        Ok(ImportanceTable {
            baseline_acc: baseline,
            entries,
        })
    }
}

/// Accuracy drop from ablating each expert alone. Deterministic evaluation
/// makes a never-routed expert's importance exactly zero.
pub fn per_expert_importance<S: Scalar>(
    model: &mut Model<S>,
    valset: &[TrainSample<S>],
    batch_size: usize,
) -> Result<ImportanceTable, AnalysisError> {
    if valset.is_empty() {
        return Err(AnalysisError::Invalid(
            "importance needs a non-empty validation set".into(),
        ));
    }
    let layers = model.moe_layers();
    if layers.is_empty() {
        return Err(AnalysisError::Invalid("model has no MoE layers".into()));
    }
    let saved: Vec<(usize, BTreeSet<usize>)> = layers
        .iter()
        .map(|&l| (l, model.moe_layer(l).unwrap().ablated.clone()))
        .collect();
    model.clear_ablations();
    let baseline = evaluate(model, valset, batch_size)
        .map_err(|e| AnalysisError::Invalid(e.to_string()))?
        .accuracy;

    let mut entries = Vec::new();
    for &layer in &layers {
        let e = model.moe_layer(layer).unwrap().num_experts();
        for ex in 0..e {
            model
                .set_ablated(layer, &[ex])
                .map_err(|err| AnalysisError::Invalid(err.to_string()))?;
            let acc = evaluate(model, valset, batch_size)
                .map_err(|err| AnalysisError::Invalid(err.to_string()))?
                .accuracy;
            entries.push(((layer, ex), baseline - acc));
            model.set_ablated(layer, &[]).expect("layer exists");
        }
    }
    // restore whatever ablations the caller had
    for (l, abl) in saved {
        let v: Vec<usize> = abl.into_iter().collect();
        model.set_ablated(l, &v).expect("layer exists");
    }
    Ok(ImportanceTable {
        baseline_acc: baseline,
        entries,
    })
}

/// Outcome of a pruned evaluation.
#[derive(Debug, Clone)]
pub struct PrunedEval {
    pub baseline_acc: f64,
    pub pruned_acc: f64,
    pub per_class: BTreeMap<u32, (usize, usize)>,
}

/// Filter a test set to species present in a location's training records.
pub fn location_filter<S: Scalar>(
    testset: &[TrainSample<S>],
    train_records: &[(LatLng, u32)],
    cell: &CellId,
) -> Result<Vec<TrainSample<S>>, AnalysisError> {
    let present = geocell::species_in_cell(train_records, cell);
    let filtered: Vec<TrainSample<S>> = testset
        .iter()
        .filter(|s| present.contains(&s.label) && cell.contains_point(&s.location))
        .cloned()
        .collect();
    if filtered.is_empty() {
        return Err(AnalysisError::EmptyLocation(cell.token()));
    }
    Ok(filtered)
}

/// Top-1 accuracy with every node of the prune set ablated simultaneously.
/// Restores the model's previous ablation state afterwards.
pub fn evaluate_pruned<S: Scalar>(
    model: &mut Model<S>,
    prune: &PruneSet,
    testset: &[TrainSample<S>],
    batch_size: usize,
) -> Result<PrunedEval, AnalysisError> {
    if testset.is_empty() {
        return Err(AnalysisError::Invalid("empty test set".into()));
    }
    let layers = model.moe_layers();
    for &(l, _) in &prune.nodes {
        if !layers.contains(&l) {
            return Err(AnalysisError::Invalid(format!(
                "prune node references non-MoE layer {l}"
            )));
        }
    }
    let saved: Vec<(usize, BTreeSet<usize>)> = layers
        .iter()
        .map(|&l| (l, model.moe_layer(l).unwrap().ablated.clone()))
        .collect();

    model.clear_ablations();
    let base =
        evaluate(model, testset, batch_size).map_err(|e| AnalysisError::Invalid(e.to_string()))?;
    for &layer in &layers {
        let nodes: Vec<usize> = prune
            .nodes
            .iter()
            .filter(|&&(l, _)| l == layer)
            .map(|&(_, ex)| ex)
            .collect();
        model
            .set_ablated(layer, &nodes)
            .map_err(|e| AnalysisError::Invalid(e.to_string()))?;
    }
    let pruned =
        evaluate(model, testset, batch_size).map_err(|e| AnalysisError::Invalid(e.to_string()))?;

    for (l, abl) in saved {
        let v: Vec<usize> = abl.into_iter().collect();
        model.set_ablated(l, &v).expect("layer exists");
    }
    Ok(PrunedEval {
        baseline_acc: base.accuracy,
        pruned_acc: pruned.accuracy,
        per_class: pruned.per_class,
    })
}

/// Deployment manifest: which nodes to drop for a location, with provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruningManifest {
    #[serde(flatten)]
    pub method: PruneMethod,
    pub nodes: Vec<ManifestNode>,
    pub location: Option<String>,
    pub baseline_acc: f64,
    pub pruned_acc: f64,
    pub graph_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestNode {
    pub layer: usize,
    pub expert: usize,
}

impl PruningManifest {
    pub fn new(
        prune: &PruneSet,
        location: Option<String>,
        baseline_acc: f64,
        pruned_acc: f64,
        graph_hash: String,
    ) -> Self {
        Self {
            method: prune.method.clone(),
            nodes: prune
                .nodes
                .iter()
                .map(|&(layer, expert)| ManifestNode { layer, expert })
                .collect(),
            location,
            baseline_acc,
            pruned_acc,
            graph_hash,
        }
    }

    pub fn prune_set(&self) -> PruneSet {
        PruneSet {
            method: self.method.clone(),
            nodes: self.nodes.iter().map(|n| (n.layer, n.expert)).collect(),
        }
    }
}

/// Row-labelled stochastic matrix (rows sum to 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffinityMatrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// Row-major `[rows x cols]`.
    pub data: Vec<f64>,
    /// Rows that had no patches and were omitted.
    pub absent_rows: Vec<String>,
}

impl AffinityMatrix {
    pub fn rows(&self) -> usize {
        self.row_labels.len()
    }

    pub fn cols(&self) -> usize {
        self.col_labels.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row");
        for c in &self.col_labels {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (r, label) in self.row_labels.iter().enumerate() {
            out.push_str(label);
            for c in 0..self.cols() {
                out.push_str(&format!(",{:.6}", self.data[r * self.cols() + c]));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<AffinityMatrix, AnalysisError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| AnalysisError::Invalid("empty affinity csv".into()))?;
        let mut cols: Vec<&str> = header.split(',').collect();
        if cols.is_empty() || cols[0] != "row" {
            return Err(AnalysisError::Invalid(
                "affinity csv must start with a 'row' column".into(),
            ));
        }
        cols.remove(0);
        let col_labels: Vec<String> = cols.iter().map(|s| s.to_string()).collect();
        let mut row_labels = Vec::new();
        let mut data = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != col_labels.len() + 1 {
                return Err(AnalysisError::Invalid(format!(
                    "affinity row {}: expected {} fields",
                    i + 2,
                    col_labels.len() + 1
                )));
            }
            row_labels.push(fields[0].to_string());
            for f in &fields[1..] {
                data.push(f.parse().map_err(|_| {
                    AnalysisError::Invalid(format!("affinity row {}: bad number", i + 2))
                })?);
            }
        }
        Ok(AffinityMatrix {
            row_labels,
            col_labels,
            data,
            absent_rows: Vec::new(),
        })
    }
}

/// Class-to-expert affinity at one layer: accumulate the gate's soft
/// assignments (temperature `t`) over every patch of a class, then divide by
/// the class's patch count.
pub fn class_expert_affinity<S: Scalar>(
    model: &Model<S>,
    samples: &[TrainSample<S>],
    layer: usize,
    batch_size: usize,
) -> Result<AffinityMatrix, AnalysisError> {
    let moe = model
        .moe_layer(layer)
        .ok_or_else(|| AnalysisError::Invalid(format!("layer {layer} is not a MoE layer")))?;
    let e = moe.num_experts();
    let mut acc: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    let mut rng = crate::Rng::new(0);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&TrainSample<S>> = chunk.iter().collect();
        let images = stack_refs(&refs);
        let fp = model
            .forward(&images, &crate::model::ForwardOpts::eval_hooked(), &mut rng)
            .map_err(|err| AnalysisError::Invalid(err.to_string()))?;
        let f = fp
            .pre_mlp_tensor(layer)
            .ok_or_else(|| AnalysisError::Invalid("hooks missing".into()))?;
        let d = *f.shape().last().unwrap();
        let flat = f.reshaped(vec![f.numel() / d, d])?;
        let probs = moe.gate.probabilities(&flat)?;
        let per_sample = flat.shape()[0] / chunk.len();
        for (row, p) in probs.data().chunks(e).enumerate() {
            let class = chunk[row / per_sample].label;
            let slot = acc.entry(class).or_insert_with(|| (vec![0.0; e], 0));
            for (a, &v) in slot.0.iter_mut().zip(p) {
                *a += v;
            }
            slot.1 += 1;
        }
    }

    let mut row_labels = Vec::new();
    let mut data = Vec::new();
    let mut absent = Vec::new();
    for (class, (sums, count)) in acc {
        if count == 0 {
            absent.push(class.to_string());
            continue;
        }
        row_labels.push(class.to_string());
        data.extend(sums.iter().map(|v| v / count as f64));
    }
    Ok(AffinityMatrix {
        row_labels,
        col_labels: (0..e).map(|i| format!("expert{i}")).collect(),
        data,
        absent_rows: absent,
    })
}

fn stack_refs<S: Scalar>(samples: &[&TrainSample<S>]) -> Tensor<S> {
    let per = samples[0].image.numel();
    let mut data = Vec::with_capacity(per * samples.len());
    for s in samples {
        data.extend_from_slice(s.image.data());
    }
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(samples[0].image.shape());
    Tensor::from_vec(shape, data).expect("stacked batch shape")
}

/// Class-to-cell affinity at one layer: per patch, softmax (temperature `t`)
/// over cells of the cosine similarity between the patch's pre-MLP vector
/// and each cell's projected mean location embedding; averaged per class.
/// Cells without training records are excluded (reported in the result).
pub struct ClassCellAffinity {
    pub matrix: AffinityMatrix,
    pub excluded_cells: Vec<String>,
}

pub fn class_cell_affinity<S: Scalar>(
    model: &Model<S>,
    samples: &[TrainSample<S>],
    train_records: &[(LatLng, u32)],
    cells: &[CellId],
    layer: usize,
    temperature: f64,
    batch_size: usize,
) -> Result<ClassCellAffinity, AnalysisError> {
    if layer >= model.layers.len() {
        return Err(AnalysisError::Invalid(format!(
            "layer {layer} out of range"
        )));
    }
    let block = model.cfg.block_of_layer(layer).expect("validated");
    let mut rng = crate::Rng::new(0);

    // per-cell mean embedding of its training records, projected to the block
    let mut kept_cells: Vec<CellId> = Vec::new();
    let mut excluded = Vec::new();
    let mut cell_vecs: Vec<Vec<f64>> = Vec::new();
    for cell in cells {
        let pts: Vec<LatLng> = train_records
            .iter()
            .filter(|(p, _)| cell.contains_point(p))
            .map(|(p, _)| *p)
            .collect();
        if pts.is_empty() {
            excluded.push(cell.token());
            continue;
        }
        let mut g = crate::tensor::Graph::new();
        let mut bind = crate::tensor::Binding::new();
        let emb = model
            .loc
            .encoder
            .encode_batch(&mut g, &mut bind, &model.params, &pts)
            .map_err(|e| AnalysisError::Invalid(e.to_string()))?;
        let mean = g.mean_axis(emb, 0)?;
        let mean = g.reshape(mean, vec![1, model.cfg.loc_encoder.out_dim])?;
        let proj = model.loc.projectors[block]
            .project(&mut g, &mut bind, &model.params, mean, false, &mut rng)
            .map_err(|e| AnalysisError::Invalid(e.to_string()))?;
        cell_vecs.push(g.value(proj).data().iter().map(|v| v.to_f64_()).collect());
        kept_cells.push(cell.clone());
    }
    if kept_cells.is_empty() {
        return Err(AnalysisError::Invalid(
            "no cell has training records".into(),
        ));
    }

    let nc = kept_cells.len();
    let mut acc: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&TrainSample<S>> = chunk.iter().collect();
        let images = stack_refs(&refs);
        let fp = model
            .forward(&images, &crate::model::ForwardOpts::eval_hooked(), &mut rng)
            .map_err(|err| AnalysisError::Invalid(err.to_string()))?;
        let f = fp
            .pre_mlp_tensor(layer)
            .ok_or_else(|| AnalysisError::Invalid("hooks missing".into()))?;
        let d = *f.shape().last().unwrap();
        let rows = f.numel() / d;
        let per_sample = rows / chunk.len();
        for row in 0..rows {
            let patch: Vec<f64> = f.data()[row * d..(row + 1) * d]
                .iter()
                .map(|v| v.to_f64_())
                .collect();
            let sims: Vec<f64> = cell_vecs
                .iter()
                .map(|cv| crate::tensor::cosine(&patch, cv))
                .collect();
            let sims = Tensor::<f64>::from_vec(vec![1, nc], sims)?;
            let probs = softmax_t(&sims, temperature)?;
            let class = chunk[row / per_sample].label;
            let slot = acc.entry(class).or_insert_with(|| (vec![0.0; nc], 0));
            for (a, &v) in slot.0.iter_mut().zip(probs.data()) {
                *a += v;
            }
            slot.1 += 1;
        }
    }

    let mut row_labels = Vec::new();
    let mut data = Vec::new();
    for (class, (sums, count)) in acc {
        row_labels.push(class.to_string());
        data.extend(sums.iter().map(|v| v / count as f64));
    }
    Ok(ClassCellAffinity {
        matrix: AffinityMatrix {
            row_labels,
            col_labels: kept_cells.iter().map(|c| c.token()).collect(),
            data,
            absent_rows: Vec::new(),
        },
        excluded_cells: excluded,
    })
}

/// Coverage statistics over a class-by-cell presence grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageStats {
    /// Per class: fraction of land cells with score above the threshold.
    pub coverage: Vec<f64>,
    pub threshold: f64,
    /// (bin_low, bin_high, count) histogram over coverage fractions.
    pub histogram: Vec<(f64, f64, usize)>,
}

impl CoverageStats {
    pub fn median(&self) -> f64 {
        let mut v = self.coverage.clone();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if v.is_empty() {
            return 0.0;
        }
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    /// Mean coverage of the top decile of classes.
    pub fn top_decile_mean(&self) -> f64 {
        let mut v = self.coverage.clone();
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let k = (v.len() as f64 / 10.0).ceil().max(1.0) as usize;
        v.truncate(k);
        v.iter().sum::<f64>() / k as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,coverage\n");
        for (i, c) in self.coverage.iter().enumerate() {
            out.push_str(&format!("{i},{c:.6}\n"));
        }
        out
    }
}

/// Coverage per class: fraction of cells whose presence score exceeds the
/// threshold. `scores` is row-major `[classes x cells]`.
pub fn coverage_density(
    scores: &[f64],
    num_cells: usize,
    threshold: f64,
    bins: usize,
) -> Result<CoverageStats, AnalysisError> {
    if num_cells == 0 || !scores.len().is_multiple_of(num_cells) {
        return Err(AnalysisError::Invalid(format!(
            "scores length {} is not a multiple of cells {num_cells}",
            scores.len()
        )));
    }
    let coverage: Vec<f64> = scores
        .chunks(num_cells)
        .map(|row| row.iter().filter(|&&s| s > threshold).count() as f64 / num_cells as f64)
        .collect();
    let bins = bins.max(1);
    let mut histogram = Vec::with_capacity(bins);
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let count = coverage
            .iter()
            .filter(|&&c| c >= lo && (c < hi || (b == bins - 1 && c <= hi)))
            .count();
        histogram.push((lo, hi, count));
    }
    Ok(CoverageStats {
        coverage,
        threshold,
        histogram,
    })
}
