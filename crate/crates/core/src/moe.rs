//! Routed expert layers: k-means gate initialization, low-rank gate
//! factorization, top-1 routed forward with trace capture, and expert
//! ablation.
//!
//! A converted transformer layer replaces its dense MLP with E small expert
//! MLPs behind a cosine gate. Each patch picks one expert (hard top-1) and
//! the layer output is `F + Expert(F)`. Ablating an expert rewrites its
//! output to `-F`, so the residual sum zeroes the patch exactly.

use crate::tensor::nn::{self, LinearParams};
use crate::tensor::{Binding, Graph, ParamGroup, ParamSet, Scalar, Tensor, TensorError, Var};
use crate::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::sync::Arc;

#[derive(Debug, Clone, thiserror::Error)]
pub enum MoeError {
    #[error("{0}")]
    Invalid(String),
    #[error("activation cache missing for layer {0}")]
    MissingActivations(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Gate temperature from the patch-assignment setup.
pub const GATE_TEMPERATURE: f64 = 0.001;

/// Structural settings of the expert layers, carried in the model config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeSettings {
    /// Experts per converted layer.
    pub experts: usize,
    /// Hidden units in each expert MLP.
    pub hidden: usize,
    /// Gate low-rank factorization; `rank >= min(E, D)` keeps the full matrix.
    pub rank: usize,
    pub temperature: f64,
}

impl Default for MoeSettings {
    fn default() -> Self {
        Self {
            experts: 8,
            hidden: 2,
            rank: 8,
            temperature: GATE_TEMPERATURE,
        }
    }
}

/// Cosine-scoring expert gate, optionally rank-factorized.
#[derive(Debug, Clone)]
pub struct ExpertGate<S: Scalar> {
    /// Row-normalized centroid matrix `[E, D]` (pre-factorization).
    pub centroids: Tensor<S>,
    /// Low-rank factors `(U: [E, r], V: [r, D])`, if rank < min(E, D).
    pub factors: Option<(Tensor<S>, Tensor<S>)>,
    pub temperature: f64,
}

impl<S: Scalar> ExpertGate<S> {
    pub fn num_experts(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }

    /// The matrix actually used for scoring: U*V when factorized, else the
    /// normalized centroids.
    pub fn effective_matrix(&self) -> Tensor<S> {
        match &self.factors {
            None => self.centroids.clone(),
            Some((u, v)) => {
                let (e, r) = (u.shape()[0], u.shape()[1]);
                let d = v.shape()[1];
                let mut out = vec![S::zero(); e * d];
                let ud = u.data();
                let vd = v.data();
                for i in 0..e {
                    for p in 0..r {
                        let uip = ud[i * r + p];
                        for j in 0..d {
                            out[i * d + j] += uip * vd[p * d + j];
                        }
                    }
                }
                Tensor::from_vec(vec![e, d], out).expect("factor product shape")
            }
        }
    }

    /// Cosine scores of each row of `rows` (flattened `[M, D]`) against each
    /// expert: `[M, E]` in f64.
    pub fn cosine_scores(&self, rows: &Tensor<S>) -> Vec<f64> {
        let eff = self.effective_matrix();
        let (e, d) = (eff.shape()[0], eff.shape()[1]);
        debug_assert_eq!(rows.shape()[1], d);
        let m = rows.shape()[0];
        let ed = eff.data();
        let enorms: Vec<f64> = (0..e)
            .map(|i| {
                ed[i * d..(i + 1) * d]
                    .iter()
                    .map(|&v| v.to_f64_() * v.to_f64_())
                    .sum::<f64>()
                    .sqrt()
                    .max(1e-30)
            })
            .collect();
        let rd = rows.data();
        let mut scores = vec![0.0f64; m * e];
        for a in 0..m {
            let row = &rd[a * d..(a + 1) * d];
            let rnorm = row
                .iter()
                .map(|&v| v.to_f64_() * v.to_f64_())
                .sum::<f64>()
                .sqrt()
                .max(1e-30);
            for i in 0..e {
                let dot: f64 = row
                    .iter()
                    .zip(&ed[i * d..(i + 1) * d])
                    .map(|(&x, &c)| x.to_f64_() * c.to_f64_())
                    .sum();
                scores[a * e + i] = dot / (rnorm * enorms[i]);
            }
        }
        scores
    }

    /// Hard top-1 route per row; ties break to the lowest expert index.
    pub fn route(&self, rows: &Tensor<S>) -> Vec<usize> {
        let e = self.num_experts();
        let scores = self.cosine_scores(rows);
        scores
            .chunks(e)
            .map(|row| {
                let mut best = 0usize;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Soft assignment probabilities `[M, E]` at the gate temperature.
    pub fn probabilities(&self, rows: &Tensor<S>) -> Result<Tensor<f64>, TensorError> {
        let e = self.num_experts();
        let m = rows.shape()[0];
        let scores = Tensor::<f64>::from_vec(vec![m, e], self.cosine_scores(rows))?;
        crate::tensor::softmax_t(&scores, self.temperature)
    }
}

/// Two-layer expert perceptron D -> N -> D (parameters live in the model's
/// ParamSet under the `experts` group).
#[derive(Debug, Clone, Copy)]
pub struct ExpertMlp {
    pub l1: LinearParams,
    pub l2: LinearParams,
}

impl ExpertMlp {
    pub fn init<S: Scalar>(
        set: &mut ParamSet<S>,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            l1: LinearParams::init(
                set,
                &format!("{name}.l1"),
                ParamGroup::Experts,
                d,
                hidden,
                rng,
            ),
            l2: LinearParams::init(
                set,
                &format!("{name}.l2"),
                ParamGroup::Experts,
                hidden,
                d,
                rng,
            ),
        }
    }
}

/// A routed expert layer replacing one dense transformer MLP.
#[derive(Debug, Clone)]
pub struct MoeLayer<S: Scalar> {
    pub gate: ExpertGate<S>,
    pub experts: Vec<ExpertMlp>,
    pub hidden: usize,
    /// Experts currently ablated (their output becomes `-F`).
    pub ablated: BTreeSet<usize>,
}

impl<S: Scalar> MoeLayer<S> {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }
}

/// Apply a routed expert layer to flattened pre-MLP rows `f: [M, D]`.
///
/// Returns the layer output `[M, D]` (residual included) and the per-row
/// expert route. Ablated experts contribute `-F`, zeroing those rows.
pub fn apply_moe_layer<S: Scalar>(
    g: &mut Graph<S>,
    bind: &mut Binding,
    set: &ParamSet<S>,
    layer: &MoeLayer<S>,
    f: Var,
) -> Result<(Var, Vec<usize>), TensorError> {
    let rows = g.shape(f)[0];
    let routes = layer.gate.route(g.value(f));
    debug_assert_eq!(routes.len(), rows);

    let mut acc: Option<Var> = None;
    for (e, expert) in layer.experts.iter().enumerate() {
        let idx: Vec<usize> = routes
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == e)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let idx = Arc::new(idx);
        let fe = g.gather_rows(f, Arc::clone(&idx))?;
        let out = if layer.ablated.contains(&e) {
            g.scale(fe, -1.0)?
        } else {
            let h = nn::linear(g, bind, set, fe, expert.l1)?;
            let h = g.relu(h)?;
            nn::linear(g, bind, set, h, expert.l2)?
        };
        let scattered = g.scatter_rows(out, idx, rows)?;
        acc = Some(match acc {
            None => scattered,
            Some(prev) => g.add(prev, scattered)?,
        });
    }
    let expert_out = acc.expect("every row routes to some expert");
    let y = g.add(f, expert_out)?;
    Ok((y, routes))
}

/// Duplicate records of under-represented classes (sampling with
/// replacement) until every class has at least `min_count` entries.
/// Returns indices into the original slice.
pub fn balanced_resample_indices(
    class_ids: &[u32],
    min_count: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>, MoeError> {
    if min_count == 0 {
        return Err(MoeError::Invalid("min_count must be >= 1".into()));
    }
    if class_ids.is_empty() {
        return Err(MoeError::Invalid("empty class list".into()));
    }
    let mut by_class: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, &c) in class_ids.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let mut out: Vec<usize> = (0..class_ids.len()).collect();
    for idxs in by_class.values() {
        let mut need = min_count.saturating_sub(idxs.len());
        while need > 0 {
            out.push(idxs[rng.below(idxs.len())]);
            need -= 1;
        }
    }
    Ok(out)
}

/// Output of [`kmeans`].
#[derive(Debug, Clone)]
pub struct KmeansResult {
    /// `[E, D]`
    pub centroids: Tensor<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration (monotone non-increasing).
    pub inertia_history: Vec<f64>,
}

/// Seeded k-means++ initialization followed by `refine_iters` Lloyd steps.
/// Empty clusters are re-seeded from the point farthest from its centroid.
pub fn kmeans(
    points: &Tensor<f64>,
    e: usize,
    refine_iters: usize,
    rng: &mut Rng,
) -> Result<KmeansResult, MoeError> {
    let shape = points.shape();
    if shape.len() != 2 {
        return Err(MoeError::Invalid(format!(
            "points must be [N, D], got {shape:?}"
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    if e == 0 || e > n {
        return Err(MoeError::Invalid(format!(
            "cluster count {e} out of range 1..={n}"
        )));
    }
    let pd = points.data();
    let dist2 =
        |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum() };

    // k-means++ seeding
    let mut centroids: Vec<f64> = Vec::with_capacity(e * d);
    let first = rng.below(n);
    centroids.extend_from_slice(&pd[first * d..(first + 1) * d]);
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| dist2(&pd[i * d..(i + 1) * d], &centroids[..d]))
        .collect();
    for k in 1..e {
        let total: f64 = min_d2.iter().sum();
        let pick = if total <= 0.0 {
            // all points coincide with chosen centroids; fall back to uniform
            rng.below(n)
        } else {
            let mut target = rng.uniform() * total;
            let mut chosen = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.extend_from_slice(&pd[pick * d..(pick + 1) * d]);
        for i in 0..n {
            let dd = dist2(&pd[i * d..(i + 1) * d], &centroids[k * d..(k + 1) * d]);
            if dd < min_d2[i] {
                min_d2[i] = dd;
            }
        }
    }

    let assign = |centroids: &[f64]| -> (Vec<usize>, f64) {
        let mut asg = vec![0usize; n];
        let mut inertia = 0.0;
        for i in 0..n {
            let row = &pd[i * d..(i + 1) * d];
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for k in 0..e {
                let dd = dist2(row, &centroids[k * d..(k + 1) * d]);
                if dd < best_d {
                    best_d = dd;
                    best = k;
                }
            }
            asg[i] = best;
            inertia += best_d;
        }
        (asg, inertia)
    };

    let (mut assignments, mut inertia) = assign(&centroids);
    let mut history = Vec::with_capacity(refine_iters);
    for _ in 0..refine_iters {
        // recompute means
        let mut sums = vec![0.0f64; e * d];
        let mut counts = vec![0usize; e];
        for i in 0..n {
            let k = assignments[i];
            counts[k] += 1;
            for c in 0..d {
                sums[k * d + c] += pd[i * d + c];
            }
        }
        for k in 0..e {
            if counts[k] == 0 {
                // re-seed from the farthest point
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = dist2(
                            &pd[a * d..(a + 1) * d],
                            &centroids[assignments[a] * d..(assignments[a] + 1) * d],
                        );
                        let db = dist2(
                            &pd[b * d..(b + 1) * d],
                            &centroids[assignments[b] * d..(assignments[b] + 1) * d],
                        );
                        da.partial_cmp(&db).unwrap()
                    })
                    .expect("n >= 1");
                centroids[k * d..(k + 1) * d].copy_from_slice(&pd[far * d..(far + 1) * d]);
            } else {
                for c in 0..d {
                    centroids[k * d + c] = sums[k * d + c] / counts[k] as f64;
                }
            }
        }
        let (next_assignments, next_inertia) = assign(&centroids);
        assignments = next_assignments;
        inertia = next_inertia;
        history.push(inertia);
        // fixed point: assignments stable means means are stable too
        if history.len() >= 2 && history[history.len() - 2] == inertia {
            break;
        }
    }

    Ok(KmeansResult {
        centroids: Tensor::from_vec(vec![e, d], centroids).expect("centroid shape"),
        assignments,
        inertia,
        inertia_history: history,
    })
}

/// Build a gate from k-means centroids: rows are L2-normalized, then, when
/// `rank < min(E, D)`, replaced by the best rank-r approximation (truncated
/// SVD, factors kept as U*Sigma and V^T).
pub fn init_gate<S: Scalar>(
    centroids: &Tensor<f64>,
    rank: usize,
    temperature: f64,
) -> Result<ExpertGate<S>, MoeError> {
    let shape = centroids.shape();
    if shape.len() != 2 {
        return Err(MoeError::Invalid("centroids must be [E, D]".into()));
    }
    let (e, d) = (shape[0], shape[1]);
    if rank == 0 || rank > e.min(d) {
        return Err(MoeError::Invalid(format!(
            "rank {rank} out of range 1..={}",
            e.min(d)
        )));
    }
    // normalize rows
    let mut rowsn = vec![0.0f64; e * d];
    for i in 0..e {
        let row = &centroids.data()[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
        for c in 0..d {
            rowsn[i * d + c] = row[c] / norm;
        }
    }

    let factors = if rank < e.min(d) {
        let m = nalgebra::DMatrix::from_row_slice(e, d, &rowsn);
        let svd = m.svd(true, true);
        let u = svd.u.as_ref().expect("svd with u");
        let vt = svd.v_t.as_ref().expect("svd with v_t");
        let mut uf = vec![S::zero(); e * rank];
        for i in 0..e {
            for r in 0..rank {
                uf[i * rank + r] = S::from_f64(u[(i, r)] * svd.singular_values[r]);
            }
        }
        let mut vf = vec![S::zero(); rank * d];
        for r in 0..rank {
            for c in 0..d {
                vf[r * d + c] = S::from_f64(vt[(r, c)]);
            }
        }
        Some((
            Tensor::from_vec(vec![e, rank], uf)?,
            Tensor::from_vec(vec![rank, d], vf)?,
        ))
    } else {
        None
    };

    let cent = Tensor::from_vec(vec![e, d], rowsn.iter().map(|&v| S::from_f64(v)).collect())?;
    Ok(ExpertGate {
        centroids: cent,
        factors,
        temperature,
    })
}

/// Pre-MLP patch activations of one layer over a dataset, rows in
/// (dataset order x patch order).
pub fn collect_activations<S: Scalar>(
    model: &crate::model::Model<S>,
    samples: &[crate::model::TrainSample<S>],
    layer: usize,
    batch_size: usize,
) -> Result<Tensor<S>, MoeError> {
    if !model.cfg.expert_layers.contains(&layer) {
        return Err(MoeError::Invalid(format!(
            "layer {layer} is not an expert layer (configured: {:?})",
            model.cfg.expert_layers
        )));
    }
    let mut rng = Rng::new(0); // eval path draws nothing
    let mut rows: Vec<S> = Vec::new();
    let mut d = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let images = stack(chunk);
        let fp = model
            .forward(&images, &crate::model::ForwardOpts::eval_hooked(), &mut rng)
            .map_err(|e| MoeError::Invalid(e.to_string()))?;
        let f = fp
            .pre_mlp_tensor(layer)
            .ok_or(MoeError::MissingActivations(layer))?;
        d = *f.shape().last().expect("activation has a dim");
        rows.extend_from_slice(f.data());
    }
    let n = rows.len() / d.max(1);
    Ok(Tensor::from_vec(vec![n, d], rows)?)
}

fn stack<S: Scalar>(samples: &[crate::model::TrainSample<S>]) -> Tensor<S> {
    let per = samples[0].image.numel();
    let mut data = Vec::with_capacity(per * samples.len());
    for s in samples {
        data.extend_from_slice(s.image.data());
    }
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(samples[0].image.shape());
    Tensor::from_vec(shape, data).expect("stacked batch shape")
}

/// Settings for dense-to-MoE conversion.
#[derive(Debug, Clone)]
pub struct ConvertOptions {
    pub settings: MoeSettings,
    /// Layers to convert; defaults to the model's configured expert layers.
    pub layers: Option<Vec<usize>>,
    /// Lloyd refinement steps after k-means++ seeding (5 suits dense
    /// citizen-science-like data, 100 imbalanced camera-trap-like data).
    pub refine_iters: usize,
    /// Class floor for the clustering sample.
    pub min_class_count: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self {
            settings: MoeSettings::default(),
            layers: None,
            refine_iters: 5,
            min_class_count: 10,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerConversion {
    pub layer: usize,
    pub inertia: f64,
    pub cluster_sizes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ConversionReport {
    pub layers: Vec<LayerConversion>,
    pub entries_before: usize,
    pub entries_after: usize,
}

/// Convert a dense model into a routed expert model.
///
/// Per target layer: gather pre-MLP activations over a class-balanced
/// resample of `samples`, cluster them, and initialize the gate from the
/// centroids (rank-reduced when configured). Expert MLPs start from fresh
/// seeded weights scaled by 1/sqrt(D); everything else is copied bitwise.
pub fn convert_to_moe<S: Scalar>(
    model: &crate::model::Model<S>,
    samples: &[crate::model::TrainSample<S>],
    opts: &ConvertOptions,
) -> Result<(crate::model::Model<S>, ConversionReport), MoeError> {
    if model.cfg.moe.is_some() {
        return Err(MoeError::Invalid("model is already converted".into()));
    }
    if samples.is_empty() {
        return Err(MoeError::Invalid("conversion needs a dataset".into()));
    }
    let layers = opts
        .layers
        .clone()
        .unwrap_or_else(|| model.cfg.expert_layers.clone());
    if layers.is_empty() {
        return Err(MoeError::Invalid("no layers to convert".into()));
    }
    for &l in &layers {
        if l >= model.layers.len() {
            return Err(MoeError::Invalid(format!(
                "layer {l} out of range 0..{}",
                model.layers.len()
            )));
        }
    }

    let root = Rng::new(opts.seed).derive(0x636f6e76);
    let class_ids: Vec<u32> = samples.iter().map(|s| s.label).collect();
    let mut resample_rng = root.derive(1);
    let picked = balanced_resample_indices(&class_ids, opts.min_class_count, &mut resample_rng)?;
    let cluster_set: Vec<crate::model::TrainSample<S>> =
        picked.iter().map(|&i| samples[i].clone()).collect();

    // the conversion target must advertise the layers being converted
    let mut new_cfg = model.cfg.clone();
    new_cfg.expert_layers = layers.clone();
    new_cfg.moe = Some(opts.settings.clone());

    // the clustering input is the dense model's activation geometry
    let mut acts_model = model.clone();
    acts_model.cfg.expert_layers = layers.clone();

    let mut tensors = model.named_tensors();
    let mut report_layers = Vec::new();
    for &layer in &layers {
        let acts = collect_activations(&acts_model, &cluster_set, layer, opts.batch_size)?;
        if acts.shape()[0] < opts.settings.experts {
            return Err(MoeError::Invalid(format!(
                "layer {layer}: {} activation rows cannot seed {} experts",
                acts.shape()[0],
                opts.settings.experts
            )));
        }
        let mut krng = root.derive(0x6b00 + layer as u64);
        let res = kmeans(
            &acts.cast::<f64>(),
            opts.settings.experts,
            opts.refine_iters,
            &mut krng,
        )?;
        let d = acts.shape()[1];
        let rank = opts.settings.rank.min(opts.settings.experts.min(d));
        let gate: ExpertGate<S> = init_gate(&res.centroids, rank, opts.settings.temperature)?;

        let lname = format!("layer{layer}");
        tensors.remove(&format!("{lname}.mlp.l1.w"));
        tensors.remove(&format!("{lname}.mlp.l1.b"));
        tensors.remove(&format!("{lname}.mlp.l2.w"));
        tensors.remove(&format!("{lname}.mlp.l2.b"));
        tensors.insert(
            format!("{lname}.moe.gate.centroids"),
            gate.centroids.clone(),
        );
        if let Some((u, v)) = &gate.factors {
            tensors.insert(format!("{lname}.moe.gate.u"), u.clone());
            tensors.insert(format!("{lname}.moe.gate.v"), v.clone());
        }
        // fresh expert weights, seeded, 1/sqrt(fan-in) scale
        let mut erng = root.derive(0x6500 + layer as u64);
        let n = opts.settings.hidden;
        for k in 0..opts.settings.experts {
            let ename = format!("{lname}.moe.expert{k}");
            tensors.insert(
                format!("{ename}.l1.w"),
                Tensor::randn(&[d, n], 1.0 / (d as f64).sqrt(), &mut erng),
            );
            tensors.insert(format!("{ename}.l1.b"), Tensor::zeros(&[n]));
            tensors.insert(
                format!("{ename}.l2.w"),
                Tensor::randn(&[n, d], 1.0 / (n as f64).sqrt(), &mut erng),
            );
            tensors.insert(format!("{ename}.l2.b"), Tensor::zeros(&[d]));
        }

        let mut sizes = vec![0usize; opts.settings.experts];
        for &a in &res.assignments {
            sizes[a] += 1;
        }
        report_layers.push(LayerConversion {
            layer,
            inertia: res.inertia,
            cluster_sizes: sizes,
        });
    }

    let converted = crate::model::Model::from_tensors(new_cfg, tensors)
        .map_err(|e| MoeError::Invalid(e.to_string()))?;
    let report = ConversionReport {
        layers: report_layers,
        entries_before: model.num_entries(),
        entries_after: converted.num_entries(),
    };
    Ok((converted, report))
}

/// One routed patch: which expert it used at which layer, plus the sample's
/// identity and location group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteRecord {
    pub sample_id: u64,
    pub class_id: u32,
    pub cell_token: String,
    pub layer: usize,
    pub patch: usize,
    pub expert: usize,
}

/// Routing map of a dataset through a converted model.
#[derive(Debug, Clone, Default)]
pub struct RouteTraces {
    pub records: Vec<RouteRecord>,
    pub num_experts: usize,
    pub moe_layers: Vec<usize>,
}

impl RouteTraces {
    /// Merge per-shard traces; the result is independent of shard order
    /// because downstream analyses only aggregate counts.
    pub fn merge(mut shards: Vec<RouteTraces>) -> RouteTraces {
        let mut out = RouteTraces::default();
        for shard in shards.iter_mut() {
            out.records.append(&mut shard.records);
            out.num_experts = out.num_experts.max(shard.num_experts);
            for &l in &shard.moe_layers {
                if !out.moe_layers.contains(&l) {
                    out.moe_layers.push(l);
                }
            }
        }
        out.moe_layers.sort_unstable();
        out
    }

    /// Keep only records whose cell token lies inside `location`
    /// (prefix containment on the token hierarchy).
    pub fn filter_location(&self, location: &crate::geocell::CellId) -> RouteTraces {
        let records: Vec<RouteRecord> = self
            .records
            .iter()
            .filter(|r| {
                crate::geocell::CellId::parse(&r.cell_token)
                    .map(|c| location.contains(&c))
                    .unwrap_or(false)
            })
            .cloned()
            .collect();
        RouteTraces {
            records,
            num_experts: self.num_experts,
            moe_layers: self.moe_layers.clone(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,class_id,cell_token,layer,patch,expert\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.sample_id, r.class_id, r.cell_token, r.layer, r.patch, r.expert
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<RouteTraces, MoeError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header.trim() != "sample_id,class_id,cell_token,layer,patch,expert" {
            return Err(MoeError::Invalid(format!(
                "unexpected trace header {header:?}"
            )));
        }
        let mut records = Vec::new();
        let mut num_experts = 0usize;
        let mut layers = std::collections::BTreeSet::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(MoeError::Invalid(format!(
                    "trace line {}: expected 6 columns",
                    lineno + 2
                )));
            }
            let parse_err =
                |field: &str| MoeError::Invalid(format!("trace line {}: bad {field}", lineno + 2));
            let rec = RouteRecord {
                sample_id: cols[0].parse().map_err(|_| parse_err("sample_id"))?,
                class_id: cols[1].parse().map_err(|_| parse_err("class_id"))?,
                cell_token: cols[2].to_string(),
                layer: cols[3].parse().map_err(|_| parse_err("layer"))?,
                patch: cols[4].parse().map_err(|_| parse_err("patch"))?,
                expert: cols[5].parse().map_err(|_| parse_err("expert"))?,
            };
            num_experts = num_experts.max(rec.expert + 1);
            layers.insert(rec.layer);
            records.push(rec);
        }
        Ok(RouteTraces {
            records,
            num_experts,
            moe_layers: layers.into_iter().collect(),
        })
    }
}

/// Run the dataset through a converted model and record every patch route.
/// `cell_level` controls the granularity of the location token attached to
/// each record.
pub fn trace_dataset<S: Scalar>(
    model: &crate::model::Model<S>,
    samples: &[crate::model::TrainSample<S>],
    cell_level: u8,
    batch_size: usize,
) -> Result<RouteTraces, MoeError> {
    let moe_layers = model.moe_layers();
    if moe_layers.is_empty() {
        return Err(MoeError::Invalid("model has no MoE layers to trace".into()));
    }
    let num_experts = model
        .moe_layer(moe_layers[0])
        .map(|m| m.num_experts())
        .unwrap_or(0);
    let mut rng = Rng::new(0);
    let mut records = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let images = stack(chunk);
        let fp = model
            .forward(&images, &crate::model::ForwardOpts::traced(), &mut rng)
            .map_err(|e| MoeError::Invalid(e.to_string()))?;
        for (&layer, routes) in fp.routes.iter() {
            let per_sample = routes.len() / chunk.len();
            for (row, &expert) in routes.iter().enumerate() {
                let s = &chunk[row / per_sample];
                let cell = crate::geocell::cell_from_latlng(&s.location, cell_level)
                    .map_err(|e| MoeError::Invalid(e.to_string()))?;
                records.push(RouteRecord {
                    sample_id: s.id,
                    class_id: s.label,
                    cell_token: cell.token(),
                    layer,
                    patch: row % per_sample,
                    expert,
                });
            }
        }
    }
    Ok(RouteTraces {
        records,
        num_experts,
        moe_layers,
    })
}
