//! Memory construction: horizon-labeled observation pairs, the siamese
//! similarity network, connection probabilities, and the topological graph
//! (consecutive edges plus global top-L classifier edges).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GamError, Result};
use crate::maze::{geodesic_distance, Cell, DbStep, ExplorationDB, MazeSpec, OBS_DIM};
use crate::nn::{
    binary_cross_entropy, binary_cross_entropy_grad, Activation, Mlp, MlpSpec, OutputMode,
    ParamStore,
};

/// Positive-label horizon bounds in exploration steps.
pub const T_MIN: usize = 5;
pub const T_MAX: usize = 20;

pub const DEFAULT_EMBED_DIM: usize = 32;
pub const DEFAULT_NODE_STRIDE: usize = 5;
/// Global top-L edge count as a fraction of the node count.
pub const DEFAULT_L_GLOBAL_FRAC: f64 = 0.65;

/// A labeled observation pair, referencing steps of an [`ExplorationDB`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSample {
    pub a: usize,
    pub b: usize,
    pub label: u8,
}

/// Horizon labeling rule: 1 iff same trajectory and T_MIN <= k - t <= T_MAX.
pub fn horizon_label(traj_a: usize, t_a: usize, traj_b: usize, t_b: usize) -> u8 {
    if traj_a != traj_b {
        return 0;
    }
    let dt = t_b.abs_diff(t_a);
    u8::from((T_MIN..=T_MAX).contains(&dt))
}

/// Sample `n` pairs, balanced 1:1 positive:negative. Negatives mix
/// beyond-horizon in-trajectory pairs with cross-trajectory pairs, with
/// sub-T_MIN pairs down-weighted to 10% of negatives.
pub fn sample_pairs<R: Rng>(db: &ExplorationDB, n: usize, rng: &mut R) -> Result<Vec<PairSample>> {
    let trajs = db.trajectories();
    // trajectory index ranges into db.steps
    let mut ranges: Vec<(usize, usize)> = Vec::new();
    let mut off = 0;
    for t in &trajs {
        ranges.push((off, off + t.len()));
        off += t.len();
    }
    let pos_capable: Vec<usize> = ranges
        .iter()
        .enumerate()
        .filter(|(_, (s, e))| e - s > T_MIN)
        .map(|(i, _)| i)
        .collect();
    if pos_capable.is_empty() {
        return Err(GamError::Precondition(
            "no trajectory long enough for a positive pair".into(),
        ));
    }
    let multi_traj = ranges.len() > 1;
    let mut out = Vec::with_capacity(n);
    let n_pos = n / 2;
    for i in 0..n {
        if i < n_pos {
            // positive: uniform over valid (t, k) with T_MIN <= k - t <= T_MAX
            let ti = pos_capable[rng.gen_range(0..pos_capable.len())];
            let (s, e) = ranges[ti];
            let len = e - s;
            let t = rng.gen_range(0..len - T_MIN);
            let max_dt = T_MAX.min(len - 1 - t);
            let dt = rng.gen_range(T_MIN..=max_dt);
            out.push(PairSample {
                a: s + t,
                b: s + t + dt,
                label: 1,
            });
        } else {
            // negative: 10% sub-T_MIN, rest split between far in-traj and cross-traj
            let r: f64 = rng.gen();
            let sample = if r < 0.10 {
                let ti = pos_capable[rng.gen_range(0..pos_capable.len())];
                let (s, e) = ranges[ti];
                let len = e - s;
                let t = rng.gen_range(0..len - 1);
                let dt = rng.gen_range(1..T_MIN.min(len - t));
                Some((s + t, s + t + dt))
            } else if (r < 0.55 || !multi_traj) && ranges.iter().any(|(s, e)| e - s > T_MAX + 1) {
                // far in-trajectory
                let capable: Vec<usize> = ranges
                    .iter()
                    .enumerate()
                    .filter(|(_, (s, e))| e - s > T_MAX + 1)
                    .map(|(i, _)| i)
                    .collect();
                let ti = capable[rng.gen_range(0..capable.len())];
                let (s, e) = ranges[ti];
                let len = e - s;
                let t = rng.gen_range(0..len - T_MAX - 1);
                let dt = rng.gen_range(T_MAX + 1..len - t);
                Some((s + t, s + t + dt))
            } else if multi_traj {
                let ta = rng.gen_range(0..ranges.len());
                let tb = loop {
                    let c = rng.gen_range(0..ranges.len());
                    if c != ta {
                        break c;
                    }
                };
                let (sa, ea) = ranges[ta];
                let (sb, eb) = ranges[tb];
                Some((
                    sa + rng.gen_range(0..ea - sa),
                    sb + rng.gen_range(0..eb - sb),
                ))
            } else {
                None
            };
            match sample {
                Some((a, b)) => out.push(PairSample { a, b, label: 0 }),
                None => {
                    // single short trajectory: fall back to sub-horizon negative
                    let (s, e) = ranges[0];
                    let len = e - s;
                    let t = rng.gen_range(0..len - 1);
                    let dt = rng.gen_range(1..T_MIN.min(len - t));
                    out.push(PairSample {
                        a: s + t,
                        b: s + t + dt,
                        label: 0,
                    });
                }
            }
        }
    }
    // sanity: labels must agree with the horizon rule
    debug_assert!(out.iter().all(|p| {
        let sa = &db.steps[p.a];
        let sb = &db.steps[p.b];
        horizon_label(sa.traj_id, sa.t, sb.traj_id, sb.t) == p.label
    }));
    Ok(out)
}

/// Siamese similarity classifier: a shared observation encoder producing
/// the node embedding, and a head mapping concatenated embeddings to a
/// connection probability.
#[derive(Debug, Clone)]
pub struct SimilarityModel {
    pub embed_dim: usize,
    pub encoder: Mlp,
    pub head: Mlp,
    pub params: ParamStore,
}

impl SimilarityModel {
    pub fn new<R: Rng>(embed_dim: usize, rng: &mut R) -> Self {
        let encoder = Mlp::new(
            MlpSpec::new(
                vec![OBS_DIM, 64, embed_dim],
                Activation::Relu,
                OutputMode::Linear,
            )
            .unwrap(),
            "sim.enc",
        );
        let head = Mlp::new(
            MlpSpec::new(
                vec![2 * embed_dim, 64, 1],
                Activation::Relu,
                OutputMode::Sigmoid,
            )
            .unwrap(),
            "sim.head",
        );
        let mut params = ParamStore::new();
        encoder.init_params(&mut params, rng);
        head.init_params(&mut params, rng);
        Self {
            embed_dim,
            encoder,
            head,
            params,
        }
    }

    /// Node embedding: the encoder output.
    pub fn embed(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encoder.forward(&self.params, features)?.0)
    }

    /// Connection probability from precomputed embeddings.
    pub fn prob_from_embeddings(&self, xa: &[f64], xb: &[f64]) -> Result<f64> {
        let mut cat = Vec::with_capacity(2 * self.embed_dim);
        cat.extend_from_slice(xa);
        cat.extend_from_slice(xb);
        Ok(self.head.forward(&self.params, &cat)?.0[0])
    }

    /// Connection probability phi(o_a, o_b) from raw observations.
    pub fn prob(&self, obs_a: &[f64], obs_b: &[f64]) -> Result<f64> {
        let xa = self.embed(obs_a)?;
        let xb = self.embed(obs_b)?;
        self.prob_from_embeddings(&xa, &xb)
    }

    /// Mean BCE loss over a batch; accumulates gradients when asked.
    pub fn batch_loss(
        &mut self,
        db: &ExplorationDB,
        batch: &[PairSample],
        with_grad: bool,
    ) -> Result<f64> {
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for p in batch {
            let oa = &db.steps[p.a].features;
            let ob = &db.steps[p.b].features;
            let (xa, tape_a) = self.encoder.forward(&self.params, oa)?;
            let (xb, tape_b) = self.encoder.forward(&self.params, ob)?;
            let mut cat = Vec::with_capacity(2 * self.embed_dim);
            cat.extend_from_slice(&xa);
            cat.extend_from_slice(&xb);
            let (out, tape_h) = self.head.forward(&self.params, &cat)?;
            let pred = out[0];
            total += binary_cross_entropy(pred, p.label)?;
            if with_grad {
                let dpred = scale * binary_cross_entropy_grad(pred, p.label);
                let dcat = self.head.backward(&mut self.params, &tape_h, &[dpred]);
                self.encoder
                    .backward(&mut self.params, &tape_a, &dcat[..self.embed_dim]);
                self.encoder
                    .backward(&mut self.params, &tape_b, &dcat[self.embed_dim..]);
            }
        }
        Ok(total * scale)
    }
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub holdout_accuracy: Vec<f64>,
    pub final_holdout_accuracy: f64,
}

/// Train the similarity network with Adam on balanced horizon-labeled
/// pairs, holding out 10% for accuracy reporting.
pub fn train_similarity<R: Rng>(
    model: &mut SimilarityModel,
    db: &ExplorationDB,
    n_pairs: usize,
    epochs: usize,
    batch: usize,
    lr: f64,
    rng: &mut R,
) -> Result<TrainReport> {
    let mut pairs = sample_pairs(db, n_pairs, rng)?;
    pairs.shuffle(rng);
    let n_holdout = (pairs.len() / 10).max(1);
    let (holdout, train) = pairs.split_at(n_holdout);
    let mut train: Vec<PairSample> = train.to_vec();

    let mut report = TrainReport {
        epoch_loss: Vec::with_capacity(epochs),
        holdout_accuracy: Vec::with_capacity(epochs),
        final_holdout_accuracy: 0.0,
    };
    for epoch in 0..epochs {
        train.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for chunk in train.chunks(batch) {
            model.params.zero_grads();
            let loss = model.batch_loss(db, chunk, true)?;
            if !loss.is_finite() {
                return Err(GamError::Numerical(format!(
                    "similarity training diverged at epoch {epoch}, batch {n_batches}"
                )));
            }
            model.params.adam_step(lr)?;
            epoch_loss += loss;
            n_batches += 1;
        }
        report.epoch_loss.push(epoch_loss / n_batches.max(1) as f64);
        report
            .holdout_accuracy
            .push(pair_accuracy(model, db, holdout)?);
    }
    report.final_holdout_accuracy = pair_accuracy(model, db, holdout)?;
    Ok(report)
}

/// Fraction of pairs classified correctly at the 0.5 threshold.
pub fn pair_accuracy(
    model: &SimilarityModel,
    db: &ExplorationDB,
    pairs: &[PairSample],
) -> Result<f64> {
    let mut correct = 0usize;
    for p in pairs {
        let pred = model.prob(&db.steps[p.a].features, &db.steps[p.b].features)?;
        if (pred > 0.5) == (p.label == 1) {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// Connection probabilities of node `i` against every node:
/// `p[k] = phi(o_i, o_k)` for all k, including k = i.
pub fn connection_probs(
    model: &SimilarityModel,
    embeddings: &[Vec<f64>],
    i: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(embeddings.len());
    for k in 0..embeddings.len() {
        out.push(model.prob_from_embeddings(&embeddings[i], &embeddings[k])?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub feature: Vec<f64>,
    pub traj: usize,
    pub t: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphMeta {
    pub l_global: usize,
    pub stride: usize,
}

/// The topological graph memory: embedded nodes, an undirected edge set,
/// and adjacency lists that always contain the node itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopoGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<(usize, usize)>,
    pub meta: GraphMeta,
    /// Number of edges that came from consecutive samples.
    pub n_consecutive: usize,
}

impl TopoGraph {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Neighbor lists including self, symmetric.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj: Vec<Vec<usize>> = (0..self.nodes.len()).map(|i| vec![i]).collect();
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for l in &mut adj {
            l.sort_unstable();
            l.dedup();
        }
        adj
    }

    /// Connected components over the undirected edge set.
    pub fn components(&self) -> Vec<usize> {
        let n = self.nodes.len();
        let adj = self.adjacency();
        let mut comp = vec![usize::MAX; n];
        let mut next = 0;
        for s in 0..n {
            if comp[s] != usize::MAX {
                continue;
            }
            let mut stack = vec![s];
            comp[s] = next;
            while let Some(u) = stack.pop() {
                for &v in &adj[u] {
                    if comp[v] == usize::MAX {
                        comp[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Build the topological graph: one node per stride-th exploration sample
/// (ordered by trajectory and time), consecutive-sample edges, and the
/// `l_global` highest-probability non-consecutive classifier edges.
/// Uses observations only; no actions and no poses.
pub fn build_graph(
    model: &SimilarityModel,
    db: &ExplorationDB,
    stride: usize,
    l_global: usize,
) -> Result<TopoGraph> {
    if stride == 0 {
        return Err(GamError::Config("node stride must be >= 1".into()));
    }
    // select nodes
    let mut node_steps: Vec<&DbStep> = Vec::new();
    for traj in db.trajectories() {
        for (i, step) in traj.iter().enumerate() {
            if i % stride == 0 {
                node_steps.push(step);
            }
        }
    }
    let n = node_steps.len();
    if n == 0 {
        return Err(GamError::Precondition("empty exploration database".into()));
    }
    let embeddings: Vec<Vec<f64>> = node_steps
        .iter()
        .map(|s| model.embed(&s.features))
        .collect::<Result<_>>()?;

    // consecutive same-trajectory edges
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for i in 1..n {
        if node_steps[i].traj_id == node_steps[i - 1].traj_id {
            edges.push((i - 1, i));
        }
    }
    let n_consecutive = edges.len();
    let consecutive: std::collections::HashSet<(usize, usize)> = edges.iter().cloned().collect();

    // classifier edges: top-L over non-consecutive unordered pairs,
    // scored by the mean of both direction probabilities
    let mut scored: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if consecutive.contains(&(i, j)) {
                continue;
            }
            let pij = model.prob_from_embeddings(&embeddings[i], &embeddings[j])?;
            let pji = model.prob_from_embeddings(&embeddings[j], &embeddings[i])?;
            scored.push((0.5 * (pij + pji), i, j));
        }
    }
    if l_global > scored.len() {
        return Err(GamError::Precondition(format!(
            "l_global = {l_global} exceeds candidate pair count {}",
            scored.len()
        )));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1).then(a.2.cmp(&b.2))));
    for &(_, i, j) in scored.iter().take(l_global) {
        edges.push((i, j));
    }
    edges.sort_unstable();
    edges.dedup();

    let nodes = node_steps
        .iter()
        .enumerate()
        .map(|(id, s)| GraphNode {
            id,
            feature: embeddings[id].clone(),
            traj: s.traj_id,
            t: s.t,
        })
        .collect();
    Ok(TopoGraph {
        nodes,
        edges,
        meta: GraphMeta { l_global, stride },
        n_consecutive,
    })
}

/// Oracle-only: ground-truth cell of each graph node, looked up in the
/// (non-blind) exploration database.
pub fn node_cells(graph: &TopoGraph, db: &ExplorationDB) -> Result<Vec<Cell>> {
    let mut cells = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let step = db
            .steps
            .iter()
            .find(|s| s.traj_id == node.traj && s.t == node.t)
            .ok_or_else(|| {
                GamError::Precondition(format!(
                    "graph node (traj {}, t {}) not found in database",
                    node.traj, node.t
                ))
            })?;
        let pose = step.pose.ok_or_else(|| {
            GamError::Precondition("graph quality oracle needs a non-blind database".into())
        })?;
        cells.push(Cell::new(pose.x, pose.y));
    }
    Ok(cells)
}

/// Graph quality against the BFS oracle (the "no wrong connections" check).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphQuality {
    pub n_nodes: usize,
    pub n_edges: usize,
    pub n_consecutive: usize,
    pub n_classifier: usize,
    /// Fraction of classifier edges with geodesic distance <= 8 cells.
    pub frac_geodesic_le8: f64,
    /// Classifier edges whose geodesic exceeds 3 x euclidean + 4 cells.
    pub wall_violations: usize,
    pub n_components: usize,
}

pub fn graph_quality(
    graph: &TopoGraph,
    db: &ExplorationDB,
    maze: &MazeSpec,
) -> Result<GraphQuality> {
    let cells = node_cells(graph, db)?;
    let consecutive: std::collections::HashSet<(usize, usize)> = {
        let mut set = std::collections::HashSet::new();
        let mut prev: Option<usize> = None;
        for i in 0..graph.nodes.len() {
            if let Some(p) = prev {
                if graph.nodes[i].traj == graph.nodes[p].traj {
                    set.insert((p, i));
                }
            }
            prev = Some(i);
        }
        set
    };
    let mut n_classifier = 0usize;
    let mut ok8 = 0usize;
    let mut violations = 0usize;
    for &(a, b) in &graph.edges {
        if consecutive.contains(&(a, b)) {
            continue;
        }
        n_classifier += 1;
        let geo = geodesic_distance(maze, cells[a], cells[b])?
            .map(|d| d as f64)
            .unwrap_or(f64::INFINITY);
        if geo <= 8.0 {
            ok8 += 1;
        }
        let dx = (cells[a].x - cells[b].x) as f64;
        let dy = (cells[a].y - cells[b].y) as f64;
        let euclid = (dx * dx + dy * dy).sqrt();
        if geo > 3.0 * euclid + 4.0 {
            violations += 1;
        }
    }
    let comps = graph.components();
    Ok(GraphQuality {
        n_nodes: graph.n_nodes(),
        n_edges: graph.edges.len(),
        n_consecutive: graph.n_consecutive,
        n_classifier,
        frac_geodesic_le8: if n_classifier == 0 {
            1.0
        } else {
            ok8 as f64 / n_classifier as f64
        },
        wall_violations: violations,
        n_components: comps.iter().max().map(|m| m + 1).unwrap_or(0),
    })
}
