//! Graph attention memory core: localization on the topological graph,
//! attention coefficients forming a row-stochastic matrix, recurrent
//! feature aggregation with convergence diagnostics against an
//! independent stationary-distribution oracle, and the guided attention
//! feature (aggregated current-node minus goal-node feature).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GamError, Result};
use crate::memory::{SimilarityModel, TopoGraph};
use crate::nn::{softmax, Activation, Mlp, MlpSpec, MlpTape, OutputMode, ParamStore};

pub const DEFAULT_N_HEADS: usize = 4;
pub const DEFAULT_K: usize = 3;
pub const DEFAULT_L_LOC: usize = 5;
pub const PSI_HIDDEN: usize = 16;

/// One attention head: a scalar-logit network psi over a concatenated
/// node-feature pair, with one 16-unit hidden layer.
#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub mlp: Mlp,
}

impl AttentionHead {
    pub fn new(embed_dim: usize, index: usize) -> Self {
        let spec = MlpSpec::new(
            vec![2 * embed_dim, PSI_HIDDEN, 1],
            Activation::Relu,
            OutputMode::Linear,
        )
        .unwrap();
        Self {
            mlp: Mlp::new(spec, &format!("attn{index}.psi")),
        }
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.mlp.init_params(store, rng);
    }

    pub fn logit(&self, store: &ParamStore, xi: &[f64], xj: &[f64]) -> Result<(f64, MlpTape)> {
        let mut cat = Vec::with_capacity(xi.len() + xj.len());
        cat.extend_from_slice(xi);
        cat.extend_from_slice(xj);
        let (out, tape) = self.mlp.forward(store, &cat)?;
        Ok((out[0], tape))
    }
}

/// Row-stochastic attention matrix: dense storage, with neighbor lists so
/// multiplication only touches the support.
#[derive(Debug, Clone)]
pub struct StochasticMatrix {
    pub n: usize,
    dense: Vec<f64>,
    pub neighbors: Vec<Vec<usize>>,
}

impl StochasticMatrix {
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.dense[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.dense[i * self.n..(i + 1) * self.n]
    }

    /// Build directly from per-row (neighbor, weight) lists. Rows must be
    /// probability distributions on their support.
    pub fn from_rows(n: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut dense = vec![0.0; n * n];
        let mut neighbors = Vec::with_capacity(n);
        for (i, row) in rows.into_iter().enumerate() {
            let mut ns = Vec::with_capacity(row.len());
            for (j, w) in row {
                dense[i * n + j] = w;
                ns.push(j);
            }
            neighbors.push(ns);
        }
        Self { n, dense, neighbors }
    }

    /// Connected components of the (symmetric) support.
    pub fn components(&self) -> Vec<usize> {
        let mut comp = vec![usize::MAX; self.n];
        let mut next = 0;
        for s in 0..self.n {
            if comp[s] != usize::MAX {
                continue;
            }
            comp[s] = next;
            let mut stack = vec![s];
            while let Some(u) = stack.pop() {
                for &v in &self.neighbors[u] {
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

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            let sum: f64 = self.neighbors[i].iter().map(|&j| self.at(i, j)).sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(GamError::Numerical(format!(
                    "row {i} sums to {sum}, not 1"
                )));
            }
            if self.at(i, i) <= 0.0 {
                return Err(GamError::Numerical(format!("row {i} has no self weight")));
            }
            let support: f64 = self.row(i).iter().map(|v| v.abs()).sum::<f64>()
                - self.neighbors[i].iter().map(|&j| self.at(i, j).abs()).sum::<f64>();
            if support != 0.0 {
                return Err(GamError::Numerical(format!(
                    "row {i} has weight outside its neighborhood"
                )));
            }
        }
        Ok(())
    }
}

/// Forward tapes for every (i, j) psi evaluation, for backprop into theta_a.
pub struct AttentionTapes {
    /// Per row i: (neighbor j, logit tape), in neighbor order.
    pub rows: Vec<Vec<(usize, MlpTape)>>,
}

/// Attention coefficients (softmax of psi logits over each neighborhood),
/// assembled into the stochastic matrix W. Entries outside N_i are exact
/// zeros; the diagonal is positive because i is in N_i.
pub fn attention_coeffs(
    head: &AttentionHead,
    store: &ParamStore,
    adjacency: &[Vec<usize>],
    features: &[Vec<f64>],
    want_tapes: bool,
) -> Result<(StochasticMatrix, Option<AttentionTapes>)> {
    let n = adjacency.len();
    if features.len() != n {
        return Err(GamError::Dimension {
            context: "attention features row count".into(),
            expected: n,
            got: features.len(),
        });
    }
    let mut rows = Vec::with_capacity(n);
    let mut tapes = if want_tapes { Some(Vec::with_capacity(n)) } else { None };
    for i in 0..n {
        assert!(
            adjacency[i].contains(&i),
            "node {i} missing from its own neighborhood"
        );
        let mut logits = Vec::with_capacity(adjacency[i].len());
        let mut row_tapes = Vec::new();
        for &j in &adjacency[i] {
            let (z, tape) = head.logit(store, &features[i], &features[j])?;
            logits.push(z);
            if want_tapes {
                row_tapes.push((j, tape));
            }
        }
        let alpha = softmax(&logits)?;
        rows.push(
            adjacency[i]
                .iter()
                .cloned()
                .zip(alpha)
                .collect::<Vec<_>>(),
        );
        if let Some(t) = tapes.as_mut() {
            t.push(row_tapes);
        }
    }
    Ok((
        StochasticMatrix::from_rows(n, rows),
        tapes.map(|rows| AttentionTapes { rows }),
    ))
}

/// One aggregation step: X' = W X, rows as convex combinations over N_i.
pub fn aggregate_step(w: &StochasticMatrix, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if features.len() != w.n {
        return Err(GamError::Dimension {
            context: "aggregate_step feature rows".into(),
            expected: w.n,
            got: features.len(),
        });
    }
    let d = features.first().map(|r| r.len()).unwrap_or(0);
    let mut out = vec![vec![0.0; d]; w.n];
    for i in 0..w.n {
        let row = &mut out[i];
        for &j in &w.neighbors[i] {
            let a = w.at(i, j);
            for (o, x) in row.iter_mut().zip(features[j].iter()) {
                *o += a * x;
            }
        }
    }
    Ok(out)
}

/// K applications of `aggregate_step`; K = 0 returns the input unchanged.
pub fn recurrent_aggregate(
    w: &StochasticMatrix,
    x0: &[Vec<f64>],
    k: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut x = x0.to_vec();
    for _ in 0..k {
        x = aggregate_step(w, &x)?;
    }
    Ok(x)
}

/// Stationary distribution of W (left Perron vector), computed
/// independently of the aggregation path: per connected component, either
/// a direct linear solve (small components) or left power iteration from
/// the uniform vector. Components are weighted by their share of nodes.
pub fn stationary_oracle(w: &StochasticMatrix) -> Result<Vec<f64>> {
    w.validate()?;
    let comp = w.components();
    let n_comp = comp.iter().max().map(|m| m + 1).unwrap_or(0);
    let mut pi = vec![0.0; w.n];
    for c in 0..n_comp {
        let idx: Vec<usize> = (0..w.n).filter(|&i| comp[i] == c).collect();
        let local = stationary_component(w, &idx)?;
        let weight = idx.len() as f64 / w.n as f64;
        for (slot, &i) in idx.iter().enumerate() {
            pi[i] = weight * local[slot];
        }
    }
    Ok(pi)
}

/// Stationary vector restricted to one component (sums to 1 on it).
fn stationary_component(w: &StochasticMatrix, idx: &[usize]) -> Result<Vec<f64>> {
    let m = idx.len();
    if m == 1 {
        return Ok(vec![1.0]);
    }
    if m <= 64 {
        // solve pi^T W = pi^T, sum(pi) = 1 as a dense linear system:
        // (W^T - I) pi = 0 with the last equation replaced by sum = 1
        let mut a = vec![0.0; m * m];
        for (r, &i) in idx.iter().enumerate() {
            for (c, &j) in idx.iter().enumerate() {
                // A[r][c] = W[j][i] - delta(i,j), i.e. (W^T - I)
                a[r * m + c] = w.at(j, i) - if r == c { 1.0 } else { 0.0 };
            }
        }
        for c in 0..m {
            a[(m - 1) * m + c] = 1.0;
        }
        let mut b = vec![0.0; m];
        b[m - 1] = 1.0;
        let pi = solve_dense(&mut a, &mut b, m)?;
        if pi.iter().any(|&p| p < -1e-9) {
            return Err(GamError::Numerical("negative stationary entry".into()));
        }
        Ok(pi.into_iter().map(|p| p.max(0.0)).collect())
    } else {
        // left power iteration v <- v^T W from uniform
        let mut v = vec![1.0 / m as f64; m];
        for _ in 0..1_000_000 {
            let mut next = vec![0.0; m];
            for (r, &i) in idx.iter().enumerate() {
                // next[c] += v[r] * W[i][j]
                for &j in &w.neighbors[i] {
                    let c = idx.iter().position(|&x| x == j).unwrap();
                    next[c] += v[r] * w.at(i, j);
                }
            }
            let sum: f64 = next.iter().sum();
            next.iter_mut().for_each(|x| *x /= sum);
            let gap = v
                .iter()
                .zip(next.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = next;
            if gap <= 1e-15 {
                break;
            }
        }
        Ok(v)
    }
}

/// Gaussian elimination with partial pivoting (in place).
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Result<Vec<f64>> {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r1, &r2| {
                a[r1 * n + col]
                    .abs()
                    .partial_cmp(&a[r2 * n + col].abs())
                    .unwrap()
            })
            .unwrap();
        if a[pivot * n + col].abs() < 1e-14 {
            return Err(GamError::Numerical("singular stationary system".into()));
        }
        if pivot != col {
            for c in 0..n {
                a.swap(col * n + c, pivot * n + c);
            }
            b.swap(col, pivot);
        }
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r * n + c] -= f * a[col * n + c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut acc = b[r];
        for c in r + 1..n {
            acc -= a[r * n + c] * x[c];
        }
        x[r] = acc / a[r * n + r];
    }
    Ok(x)
}

/// Localize an observation on the graph: score every node with the
/// similarity network, take the top `l_loc` scores, and return the node
/// of median score among them (ties resolved toward the lowest node id).
/// Uses observations only, never poses.
pub fn localize(
    model: &SimilarityModel,
    graph: &TopoGraph,
    obs: &[f64],
    l_loc: usize,
) -> Result<usize> {
    if graph.nodes.is_empty() {
        return Err(GamError::Precondition("localize on empty graph".into()));
    }
    if l_loc.is_multiple_of(2) || l_loc > graph.nodes.len() {
        return Err(GamError::Precondition(format!(
            "l_loc must be odd and within 1..={}, got {l_loc}",
            graph.nodes.len()
        )));
    }
    let query = model.embed(obs)?;
    localize_scored(model, graph, &query, l_loc)
}

/// Localization from a precomputed query embedding.
pub fn localize_scored(
    model: &SimilarityModel,
    graph: &TopoGraph,
    query_embedding: &[f64],
    l_loc: usize,
) -> Result<usize> {
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let p = model.prob_from_embeddings(query_embedding, &node.feature)?;
        scored.push((p, node.id));
    }
    // descending score, ascending id on ties
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let top = &scored[..l_loc];
    Ok(top[l_loc / 2].1)
}

/// Guided attention feature: concatenation over heads of the K-step
/// aggregated current-node feature minus the goal-node feature.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedFeature {
    pub eta: Vec<f64>,
    pub k_used: usize,
    /// Set when current and goal nodes fall in different components, in
    /// which case eta carries no path information.
    pub cross_component: bool,
}

/// Precomputed per-head aggregation state for one setting of theta_a.
/// W is computed once from the initial node features and reused for all
/// K iterations.
pub struct HeadAggregation {
    pub w: StochasticMatrix,
    /// X^[0] .. X^[K].
    pub levels: Vec<Vec<Vec<f64>>>,
    tapes: Option<AttentionTapes>,
}

/// Aggregation context shared by every `eta` query until theta_a changes.
pub struct GamContext {
    pub heads: Vec<AttentionHead>,
    pub k: usize,
    pub embed_dim: usize,
    pub per_head: Vec<HeadAggregation>,
    pub components: Vec<usize>,
}

impl GamContext {
    pub fn build(
        heads: Vec<AttentionHead>,
        store: &ParamStore,
        graph: &TopoGraph,
        k: usize,
        want_tapes: bool,
    ) -> Result<Self> {
        Self::build_mode(heads, store, graph, k, want_tapes, false)
    }

    /// As `build`, but `adaptive_w` recomputes the attention matrix from
    /// the evolving features at every iteration instead of keeping the
    /// matrix fixed from the initial features. Documented alternative,
    /// off by default: the fixed-matrix Markov-chain convergence argument
    /// does not apply to it, and backprop is unsupported.
    pub fn build_mode(
        heads: Vec<AttentionHead>,
        store: &ParamStore,
        graph: &TopoGraph,
        k: usize,
        want_tapes: bool,
        adaptive_w: bool,
    ) -> Result<Self> {
        if adaptive_w && want_tapes {
            return Err(GamError::Precondition(
                "adaptive attention recomputation does not support backprop".into(),
            ));
        }
        let features: Vec<Vec<f64>> = graph.nodes.iter().map(|n| n.feature.clone()).collect();
        let embed_dim = features.first().map(|f| f.len()).unwrap_or(0);
        let adjacency = graph.adjacency();
        let mut per_head = Vec::with_capacity(heads.len());
        let mut components = Vec::new();
        for head in &heads {
            let (w, tapes) = attention_coeffs(head, store, &adjacency, &features, want_tapes)?;
            if components.is_empty() {
                components = w.components();
            }
            let mut levels = Vec::with_capacity(k + 1);
            levels.push(features.clone());
            let mut w_cur = w;
            for step in 0..k {
                if adaptive_w && step > 0 {
                    let (w_next, _) =
                        attention_coeffs(head, store, &adjacency, &levels[step], false)?;
                    w_cur = w_next;
                }
                let next = aggregate_step(&w_cur, &levels[step])?;
                levels.push(next);
            }
            per_head.push(HeadAggregation {
                w: w_cur,
                levels,
                tapes,
            });
        }
        Ok(Self {
            heads,
            k,
            embed_dim,
            per_head,
            components,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.components.len()
    }

    pub fn eta_dim(&self) -> usize {
        self.heads.len() * self.embed_dim
    }

    /// Guided feature for a (current, goal) node pair: per-head difference
    /// of the K-step aggregated embeddings, concatenated across heads.
    pub fn eta(&self, cur: usize, goal: usize) -> Result<GuidedFeature> {
        let n = self.n_nodes();
        if cur >= n || goal >= n {
            return Err(GamError::Precondition(format!(
                "node id out of range (cur {cur}, goal {goal}, n {n})"
            )));
        }
        let mut eta = Vec::with_capacity(self.eta_dim());
        for agg in &self.per_head {
            let xk = &agg.levels[self.k];
            eta.extend(xk[cur].iter().zip(xk[goal].iter()).map(|(a, b)| a - b));
        }
        Ok(GuidedFeature {
            eta,
            k_used: self.k,
            cross_component: self.components[cur] != self.components[goal],
        })
    }

    /// Backprop eta gradients into theta_a. `deltas` holds, per rollout
    /// step, (cur, goal, dL/d eta). Requires the context to have been
    /// built with tapes.
    pub fn backward(&self, store: &mut ParamStore, deltas: &[(usize, usize, Vec<f64>)]) {
        let n = self.n_nodes();
        let d = self.embed_dim;
        for (h, (head, agg)) in self.heads.iter().zip(self.per_head.iter()).enumerate() {
            let tapes = agg
                .tapes
                .as_ref()
                .expect("GamContext built without tapes cannot backprop");
            // gradient w.r.t. X^[K] for this head
            let mut dx = vec![vec![0.0; d]; n];
            for (cur, goal, deta) in deltas {
                let slice = &deta[h * d..(h + 1) * d];
                for (g, v) in dx[*cur].iter_mut().zip(slice.iter()) {
                    *g += v;
                }
                for (g, v) in dx[*goal].iter_mut().zip(slice.iter()) {
                    *g -= v;
                }
            }
            // backward through X^[k+1] = W X^[k], accumulating dW
            let w = &agg.w;
            let mut dw: Vec<Vec<f64>> = w
                .neighbors
                .iter()
                .map(|ns| vec![0.0; ns.len()])
                .collect();
            for k in (0..self.k).rev() {
                let xk = &agg.levels[k];
                let mut dx_prev = vec![vec![0.0; d]; n];
                for i in 0..n {
                    let dxi = &dx[i];
                    for (slot, &j) in w.neighbors[i].iter().enumerate() {
                        let mut dot = 0.0;
                        for (a, b) in dxi.iter().zip(xk[j].iter()) {
                            dot += a * b;
                        }
                        dw[i][slot] += dot;
                        let a = w.at(i, j);
                        for (g, v) in dx_prev[j].iter_mut().zip(dxi.iter()) {
                            *g += a * v;
                        }
                    }
                }
                dx = dx_prev;
            }
            // softmax rows -> psi logits -> head parameters
            for i in 0..n {
                let alphas: Vec<f64> = w.neighbors[i].iter().map(|&j| w.at(i, j)).collect();
                let inner: f64 = alphas.iter().zip(dw[i].iter()).map(|(a, g)| a * g).sum();
                for (slot, _) in w.neighbors[i].iter().enumerate() {
                    let dlogit = alphas[slot] * (dw[i][slot] - inner);
                    if dlogit != 0.0 {
                        let (_, tape) = &tapes.rows[i][slot];
                        head.mlp.backward(store, tape, &[dlogit]);
                    }
                }
            }
        }
    }
}

/// Convergence diagnostics for the recurrent aggregation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub k: usize,
    /// max-norm of X^[k+1] - X^[k].
    pub step_gap: f64,
    /// max-norm of X^[k] minus the per-component stationary limit.
    pub gap_to_limit: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    pub first_k_below_1e9: Option<usize>,
    pub final_gap_to_limit: f64,
    pub n_components: usize,
    pub stationary_residual: f64,
}

/// Iterate X <- W X up to `k_max` steps, reporting per-step gaps and the
/// distance to the stationary limit 1 pi^T X0 (per component).
pub fn converge_diag(
    w: &StochasticMatrix,
    x0: &[Vec<f64>],
    k_max: usize,
) -> Result<ConvergenceReport> {
    let comp = w.components();
    let n_comp = comp.iter().max().map(|m| m + 1).unwrap_or(0);
    let d = x0.first().map(|r| r.len()).unwrap_or(0);
    let n = w.n;

    // stationary limit per component, via the independent oracle
    let mut limit = vec![vec![0.0; d]; n];
    let mut residual = 0.0f64;
    for c in 0..n_comp {
        let idx: Vec<usize> = (0..n).filter(|&i| comp[i] == c).collect();
        let pi = stationary_component(w, &idx)?;
        // residual ||pi^T W - pi^T||_inf restricted to the component
        for (slot_j, &j) in idx.iter().enumerate() {
            let mut acc = 0.0;
            for (slot_i, &i) in idx.iter().enumerate() {
                acc += pi[slot_i] * w.at(i, j);
            }
            residual = residual.max((acc - pi[slot_j]).abs());
        }
        let mut row = vec![0.0; d];
        for (slot, &i) in idx.iter().enumerate() {
            for (r, v) in row.iter_mut().zip(x0[i].iter()) {
                *r += pi[slot] * v;
            }
        }
        for &i in &idx {
            limit[i] = row.clone();
        }
    }

    let max_gap = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        a.iter()
            .zip(b.iter())
            .flat_map(|(ra, rb)| ra.iter().zip(rb.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    };

    let mut rows = Vec::new();
    let mut first_k = None;
    let mut x = x0.to_vec();
    let mut gap_limit = max_gap(&x, &limit);
    for k in 0..k_max {
        let next = aggregate_step(w, &x)?;
        let step_gap = max_gap(&next, &x);
        x = next;
        gap_limit = max_gap(&x, &limit);
        rows.push(ConvergenceRow {
            k: k + 1,
            step_gap,
            gap_to_limit: gap_limit,
        });
        if first_k.is_none() && step_gap <= 1e-9 {
            first_k = Some(k + 1);
        }
        // once at the limit to well below every reporting tolerance,
        // further iterations cannot widen the convex-hull interval
        if gap_limit <= 1e-13 && step_gap <= 1e-13 {
            break;
        }
    }
    Ok(ConvergenceReport {
        rows,
        first_k_below_1e9: first_k,
        final_gap_to_limit: gap_limit,
        n_components: n_comp,
        stationary_residual: residual,
    })
}

/// Test/diagnostic helper: random connected adjacency with self-loops,
/// built from a random spanning tree plus `extra_edges` random edges.
pub fn random_connected_adjacency<R: Rng>(
    n: usize,
    extra_edges: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut adj: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let add = |adj: &mut Vec<Vec<usize>>, a: usize, b: usize| {
        if !adj[a].contains(&b) {
            adj[a].push(b);
            adj[b].push(a);
        }
    };
    for i in 1..n {
        let j = rng.gen_range(0..i);
        add(&mut adj, i, j);
    }
    for _ in 0..extra_edges {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b {
            add(&mut adj, a, b);
        }
    }
    for l in &mut adj {
        l.sort_unstable();
    }
    adj
}

/// Random row-stochastic matrix on an adjacency via a random psi head.
pub fn random_attention_matrix<R: Rng>(
    adjacency: &[Vec<usize>],
    feature_dim: usize,
    rng: &mut R,
) -> Result<(StochasticMatrix, Vec<Vec<f64>>)> {
    let n = adjacency.len();
    let features: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let head = AttentionHead::new(feature_dim, 0);
    let mut store = ParamStore::new();
    head.init_params(&mut store, rng);
    let (w, _) = attention_coeffs(&head, &store, adjacency, &features, false)?;
    Ok((w, features))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maze::{bundled_maze_small, explore_collect, ExplorePolicy};
    use crate::memory::build_graph;
    use crate::nn::grad_check;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn zero_head_matrix(adjacency: &[Vec<usize>], d: usize) -> StochasticMatrix {
        // zero psi params -> uniform softmax on each neighborhood
        let head = AttentionHead::new(d, 0);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        head.init_params(&mut store, &mut rng);
        for b in store.blocks_mut() {
            b.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let features: Vec<Vec<f64>> = (0..adjacency.len()).map(|_| vec![0.5; d]).collect();
        attention_coeffs(&head, &store, adjacency, &features, false)
            .unwrap()
            .0
    }

    #[test]
    fn zero_psi_gives_uniform_rows() {
        let adjacency = vec![vec![0, 1, 2, 3], vec![0, 1], vec![0, 2], vec![0, 3]];
        let w = zero_head_matrix(&adjacency, 4);
        for &j in &adjacency[0] {
            assert!((w.at(0, j) - 0.25).abs() < 1e-15);
        }
        w.validate().unwrap();
    }

    #[test]
    fn two_node_analytic_alpha() {
        // direct construction with known logits (ln 2, 0)
        let w = StochasticMatrix::from_rows(
            2,
            vec![
                vec![(0, 2.0 / 3.0), (1, 1.0 / 3.0)],
                vec![(0, 0.5), (1, 0.5)],
            ],
        );
        w.validate().unwrap();
        assert!((w.at(0, 0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rows_sum_to_one_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let adj = random_connected_adjacency(10, 8, &mut rng);
            let (w, _) = random_attention_matrix(&adj, 6, &mut rng).unwrap();
            w.validate().unwrap();
        }
    }

    #[test]
    fn single_node_fixed_point() {
        let w = StochasticMatrix::from_rows(1, vec![vec![(0, 1.0)]]);
        let x = vec![vec![1.0, 2.0]];
        let out = recurrent_aggregate(&w, &x, 50).unwrap();
        assert_eq!(out, x);
        let pi = stationary_oracle(&w).unwrap();
        assert_eq!(pi, vec![1.0]);
    }

    #[test]
    fn two_node_mean_after_one_step() {
        let w = StochasticMatrix::from_rows(
            2,
            vec![vec![(0, 0.5), (1, 0.5)], vec![(0, 0.5), (1, 0.5)]],
        );
        let x = vec![vec![1.0, 0.0], vec![3.0, 2.0]];
        let out = aggregate_step(&w, &x).unwrap();
        assert_eq!(out[0], vec![2.0, 1.0]);
        assert_eq!(out[1], vec![2.0, 1.0]);
    }

    #[test]
    fn convex_hull_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let adj = random_connected_adjacency(12, 10, &mut rng);
        let (w, x0) = random_attention_matrix(&adj, 5, &mut rng).unwrap();
        let mut lo = [f64::INFINITY; 5];
        let mut hi = [f64::NEG_INFINITY; 5];
        for row in &x0 {
            for c in 0..5 {
                lo[c] = lo[c].min(row[c]);
                hi[c] = hi[c].max(row[c]);
            }
        }
        let mut x = x0.clone();
        for _ in 0..30 {
            x = aggregate_step(&w, &x).unwrap();
            for row in &x {
                for c in 0..5 {
                    assert!(row[c] >= lo[c] - 1e-12 && row[c] <= hi[c] + 1e-12);
                }
            }
            // interval never widens
            let mut nlo = [f64::INFINITY; 5];
            let mut nhi = [f64::NEG_INFINITY; 5];
            for row in &x {
                for c in 0..5 {
                    nlo[c] = nlo[c].min(row[c]);
                    nhi[c] = nhi[c].max(row[c]);
                }
            }
            for c in 0..5 {
                assert!(nlo[c] >= lo[c] - 1e-12 && nhi[c] <= hi[c] + 1e-12);
                lo[c] = nlo[c];
                hi[c] = nhi[c];
            }
        }
    }

    #[test]
    fn doubly_stochastic_gives_uniform_pi() {
        let w = StochasticMatrix::from_rows(
            3,
            vec![
                vec![(0, 0.5), (1, 0.25), (2, 0.25)],
                vec![(0, 0.25), (1, 0.5), (2, 0.25)],
                vec![(0, 0.25), (1, 0.25), (2, 0.5)],
            ],
        );
        let pi = stationary_oracle(&w).unwrap();
        for p in pi {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_residual_small_random_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let adj = random_connected_adjacency(20, 15, &mut rng);
        let (w, _) = random_attention_matrix(&adj, 4, &mut rng).unwrap();
        let pi = stationary_oracle(&w).unwrap();
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut residual = 0.0f64;
        for j in 0..w.n {
            let mut acc = 0.0;
            for i in 0..w.n {
                acc += pi[i] * w.at(i, j);
            }
            residual = residual.max((acc - pi[j]).abs());
        }
        assert!(residual <= 1e-10, "residual {residual}");
    }

    #[test]
    fn aggregation_converges_to_rank_one_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let adj = random_connected_adjacency(15, 12, &mut rng);
        let (w, x0) = random_attention_matrix(&adj, 3, &mut rng).unwrap();
        let report = converge_diag(&w, &x0, 10_000).unwrap();
        assert!(report.final_gap_to_limit <= 1e-6, "{}", report.final_gap_to_limit);
        assert_eq!(report.n_components, 1);
        assert!(report.stationary_residual <= 1e-10);
    }

    #[test]
    fn disconnected_components_have_independent_limits() {
        // two 2-node components with distinct values
        let w = StochasticMatrix::from_rows(
            4,
            vec![
                vec![(0, 0.5), (1, 0.5)],
                vec![(0, 0.5), (1, 0.5)],
                vec![(2, 0.5), (3, 0.5)],
                vec![(2, 0.5), (3, 0.5)],
            ],
        );
        let x0 = vec![vec![0.0], vec![2.0], vec![10.0], vec![20.0]];
        let report = converge_diag(&w, &x0, 200).unwrap();
        assert_eq!(report.n_components, 2);
        assert!(report.final_gap_to_limit <= 1e-9);
        let xk = recurrent_aggregate(&w, &x0, 100).unwrap();
        assert!((xk[0][0] - 1.0).abs() < 1e-9);
        assert!((xk[2][0] - 15.0).abs() < 1e-9);
    }

    fn toy_graph_context(
        k: usize,
        seed: u64,
    ) -> (GamContext, ParamStore, TopoGraph) {
        let m = Arc::new(bundled_maze_small());
        let db = explore_collect(&m, ExplorePolicy::Random, 200, 0.0, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = crate::memory::SimilarityModel::new(6, &mut rng);
        let graph = build_graph(&model, &db, 10, 8).unwrap();
        let heads: Vec<AttentionHead> = (0..2).map(|h| AttentionHead::new(6, h)).collect();
        let mut store = ParamStore::new();
        for h in &heads {
            h.init_params(&mut store, &mut rng);
        }
        let ctx = GamContext::build(heads, &store, &graph, k, true).unwrap();
        (ctx, store, graph)
    }

    #[test]
    fn eta_zero_at_goal_and_antisymmetric() {
        let (ctx, _, _) = toy_graph_context(3, 11);
        let g = ctx.eta(4, 4).unwrap();
        assert!(g.eta.iter().all(|&v| v == 0.0));
        let ab = ctx.eta(2, 7).unwrap();
        let ba = ctx.eta(7, 2).unwrap();
        for (x, y) in ab.eta.iter().zip(ba.eta.iter()) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn eta_vanishes_for_large_k_on_connected_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let adj = random_connected_adjacency(12, 10, &mut rng);
        let (w, x0) = random_attention_matrix(&adj, 4, &mut rng).unwrap();
        let xk = recurrent_aggregate(&w, &x0, 10_000).unwrap();
        for i in 1..12 {
            let diff: f64 = xk[0]
                .iter()
                .zip(xk[i].iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-6, "rows {i}: diff {diff}");
        }
    }

    #[test]
    fn eta_grad_matches_fd_through_aggregation() {
        let (ctx, store, graph) = toy_graph_context(3, 17);
        let heads_spec: Vec<AttentionHead> =
            (0..2).map(|h| AttentionHead::new(6, h)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut params = store.clone();
        let (cur, goal) = (1, graph.n_nodes() - 2);
        let err = grad_check(&mut params, 120, 1e-5, &mut rng, |params, with_grad| {
            let heads: Vec<AttentionHead> =
                (0..2).map(|h| AttentionHead::new(6, h)).collect();
            let ctx2 = GamContext::build(heads, params, &graph, ctx.k, with_grad).unwrap();
            let g = ctx2.eta(cur, goal).unwrap();
            let loss: f64 = g.eta.iter().map(|v| v * v).sum::<f64>() * 0.5;
            if with_grad {
                ctx2.backward(params, &[(cur, goal, g.eta.clone())]);
            }
            loss
        })
        .unwrap();
        drop(heads_spec);
        assert!(err <= 1e-4, "max rel err {err}");
    }

    #[test]
    fn localize_argmax_when_l_is_one() {
        let m = Arc::new(bundled_maze_small());
        let db = explore_collect(&m, ExplorePolicy::Random, 300, 0.0, 23).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let model = crate::memory::SimilarityModel::new(8, &mut rng);
        let graph = build_graph(&model, &db, 10, 5).unwrap();
        let obs = &db.steps[40].features;
        let id = localize(&model, &graph, obs, 1).unwrap();
        // must equal the argmax over explicit scores
        let q = model.embed(obs).unwrap();
        let mut best = (f64::NEG_INFINITY, 0);
        for node in &graph.nodes {
            let p = model.prob_from_embeddings(&q, &node.feature).unwrap();
            if p > best.0 {
                best = (p, node.id);
            }
        }
        assert_eq!(id, best.1);
    }

    #[test]
    fn localize_validates_l_loc() {
        let m = Arc::new(bundled_maze_small());
        let db = explore_collect(&m, ExplorePolicy::Random, 200, 0.0, 29).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let model = crate::memory::SimilarityModel::new(8, &mut rng);
        let graph = build_graph(&model, &db, 10, 5).unwrap();
        let obs = &db.steps[0].features;
        assert!(localize(&model, &graph, obs, 2).is_err());
        assert!(localize(&model, &graph, obs, 9999).is_err());
    }

    #[test]
    fn k_zero_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let adj = random_connected_adjacency(5, 3, &mut rng);
        let (w, x0) = random_attention_matrix(&adj, 3, &mut rng).unwrap();
        assert_eq!(recurrent_aggregate(&w, &x0, 0).unwrap(), x0);
    }
}
