//! A2C navigation agents: the graph-attention agent that consumes guided
//! attention features, plus reactive (with and without goal observation)
//! and recurrent baselines. Synchronous multi-worker rollouts, shared
//! RMSProp-updated parameters, detached-advantage actor-critic loss.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GamError, Result};
use crate::gam::{
    localize_scored, AttentionHead, GamContext, DEFAULT_K, DEFAULT_L_LOC, DEFAULT_N_HEADS,
};
use crate::maze::{
    render_observation, Action, AgentPose, Env, Heading, MazeSpec, N_ACTIONS, OBS_DIM,
};
use crate::memory::{SimilarityModel, TopoGraph};
use crate::nn::{
    clamp_prob, entropy, softmax, Activation, Lstm, LstmState, LstmTape, Mlp, MlpSpec, MlpTape,
    OutputMode, ParamStore,
};

pub const TRUNK_HIDDEN: usize = 64;
pub const SUCCESS_HORIZON: usize = 500;

/// Agent input variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Observation plus guided attention feature.
    Gam,
    /// Observation only, feed-forward.
    FfNogoal,
    /// Observation concatenated with the goal observation, feed-forward.
    FfGoal,
    /// Observation only, recurrent.
    LstmNogoal,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Gam => "gam",
            Variant::FfNogoal => "ff",
            Variant::FfGoal => "ff-goal",
            Variant::LstmNogoal => "lstm",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = GamError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gam" => Ok(Variant::Gam),
            "ff" | "ff-nogoal" => Ok(Variant::FfNogoal),
            "ff-goal" => Ok(Variant::FfGoal),
            "lstm" | "lstm-nogoal" => Ok(Variant::LstmNogoal),
            other => Err(GamError::Config(format!(
                "unknown variant '{other}' (expected gam, ff, ff-goal, or lstm)"
            ))),
        }
    }
}

/// Training hyperparameters. Defaults follow the reference setup:
/// discount 0.99, entropy weight 0.01, epsilon-greedy exploration
/// annealed 0.1 -> 0.02 over the first half of training, 20-step
/// rollouts, RMSProp at 2.5e-4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub gamma: f64,
    pub entropy_beta: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub t_h: usize,
    pub lr: f64,
    pub total_steps: usize,
    pub n_workers: usize,
    pub k: usize,
    pub n_heads: usize,
    pub l_loc: usize,
    pub episode_len: usize,
    pub max_grad_norm: Option<f64>,
    /// Recompute the attention matrix from evolving features at each
    /// aggregation iteration (documented alternative; evaluation only).
    pub adaptive_w: bool,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            entropy_beta: 0.01,
            eps_start: 0.1,
            eps_end: 0.02,
            t_h: 20,
            lr: 2.5e-4,
            total_steps: 200_000,
            n_workers: 8,
            k: DEFAULT_K,
            n_heads: DEFAULT_N_HEADS,
            l_loc: DEFAULT_L_LOC,
            episode_len: 2000,
            max_grad_norm: Some(5.0),
            adaptive_w: false,
            seed: 0,
        }
    }
}

/// Linearly annealed exploration rate: `eps_start` -> `eps_end` over the
/// first half of training, flat afterwards.
pub fn epsilon_at(cfg: &AgentConfig, step: usize) -> f64 {
    let half = (cfg.total_steps / 2).max(1);
    if step >= half {
        cfg.eps_end
    } else {
        let f = step as f64 / half as f64;
        cfg.eps_start + f * (cfg.eps_end - cfg.eps_start)
    }
}

/// Policy/value network. Feed-forward variants share a two-hidden-layer
/// trunk; the recurrent variant replaces the trunk with an LSTM. Both
/// heads emit linear outputs (policy logits, scalar value).
pub struct PolicyNet {
    pub variant: Variant,
    pub state_dim: usize,
    trunk: Option<Mlp>,
    lstm: Option<Lstm>,
    policy_head: Mlp,
    value_head: Mlp,
}

pub struct NetTape {
    trunk: Option<MlpTape>,
    lstm: Option<LstmTape>,
    policy: MlpTape,
    value: MlpTape,
    pub probs: Vec<f64>,
    pub value_out: f64,
}

impl PolicyNet {
    pub fn new(variant: Variant, state_dim: usize) -> Self {
        let (trunk, lstm) = match variant {
            Variant::LstmNogoal => (None, Some(Lstm::new(state_dim, TRUNK_HIDDEN, "net.lstm"))),
            _ => (
                Some(Mlp::new(
                    MlpSpec::new(
                        vec![state_dim, TRUNK_HIDDEN, TRUNK_HIDDEN],
                        Activation::Relu,
                        OutputMode::Linear,
                    )
                    .unwrap(),
                    "net.trunk",
                )),
                None,
            ),
        };
        let policy_head = Mlp::new(
            MlpSpec::new(vec![TRUNK_HIDDEN, N_ACTIONS], Activation::Relu, OutputMode::Linear)
                .unwrap(),
            "net.pi",
        );
        let value_head = Mlp::new(
            MlpSpec::new(vec![TRUNK_HIDDEN, 1], Activation::Relu, OutputMode::Linear).unwrap(),
            "net.v",
        );
        Self {
            variant,
            state_dim,
            trunk,
            lstm,
            policy_head,
            value_head,
        }
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        if let Some(t) = &self.trunk {
            t.init_params(store, rng);
        }
        if let Some(l) = &self.lstm {
            l.init_params(store, rng);
        }
        self.policy_head.init_params(store, rng);
        self.value_head.init_params(store, rng);
    }

    /// Forward pass; for the recurrent variant `lstm_state` must be given
    /// and the successor state is returned.
    pub fn forward(
        &self,
        store: &ParamStore,
        state: &[f64],
        lstm_state: Option<&LstmState>,
    ) -> Result<(NetTape, Option<LstmState>)> {
        let (feat, trunk_tape, lstm_tape, next_state) = match (&self.trunk, &self.lstm) {
            (Some(trunk), None) => {
                let (out, tape) = trunk.forward(store, state)?;
                let relu: Vec<f64> = out.iter().map(|&v| v.max(0.0)).collect();
                // trunk output mode is linear; final nonlinearity applied
                // here so the tape stays a plain MLP tape
                (relu, Some(tape), None, None)
            }
            (None, Some(lstm)) => {
                let st = lstm_state.ok_or_else(|| {
                    GamError::Precondition("recurrent forward needs an LSTM state".into())
                })?;
                let (next, tape) = lstm.step(store, state, st)?;
                (next.hidden.clone(), None, Some(tape), Some(next))
            }
            _ => unreachable!(),
        };
        let (logits, policy) = self.policy_head.forward(store, &feat)?;
        let (v, value) = self.value_head.forward(store, &feat)?;
        let probs = softmax(&logits)?;
        Ok((
            NetTape {
                trunk: trunk_tape,
                lstm: lstm_tape,
                policy,
                value,
                probs,
                value_out: v[0],
            },
            next_state,
        ))
    }

    /// Backward for one step given logit/value gradients. Returns the
    /// state gradient and, for the recurrent variant, the gradients
    /// w.r.t. the previous hidden/cell state (given the incoming carried
    /// gradients `dh_carry`/`dc_carry` from later steps).
    fn backward(
        &self,
        store: &mut ParamStore,
        tape: &NetTape,
        dlogits: &[f64],
        dvalue: f64,
        dh_carry: &[f64],
        dc_carry: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let dpi = self.policy_head.backward(store, &tape.policy, dlogits);
        let dv = self.value_head.backward(store, &tape.value, &[dvalue]);
        let mut dfeat: Vec<f64> = dpi.iter().zip(dv.iter()).map(|(a, b)| a + b).collect();
        match (&self.trunk, &self.lstm) {
            (Some(trunk), None) => {
                // undo the external relu on the trunk output
                let t = tape.trunk.as_ref().unwrap();
                for (g, &pre) in dfeat.iter_mut().zip(t.output().iter()) {
                    if pre <= 0.0 {
                        *g = 0.0;
                    }
                }
                let dstate = trunk.backward(store, t, &dfeat);
                (dstate, Vec::new(), Vec::new())
            }
            (None, Some(lstm)) => {
                for (g, c) in dfeat.iter_mut().zip(dh_carry.iter()) {
                    *g += c;
                }
                let (dstate, dh_prev, dc_prev) =
                    lstm.backward_step(store, tape.lstm.as_ref().unwrap(), &dfeat, dc_carry);
                (dstate, dh_prev, dc_prev)
            }
            _ => unreachable!(),
        }
    }
}

/// Frozen artifacts the graph-attention agent depends on: the similarity
/// model (for localization), the topological graph, and the goal node
/// (obtained by localizing the goal observation, never from poses).
pub struct GamAssets {
    pub model: SimilarityModel,
    pub graph: TopoGraph,
    pub goal_node: usize,
    pub l_loc: usize,
}

impl GamAssets {
    pub fn new(
        model: SimilarityModel,
        graph: TopoGraph,
        goal_obs: &[f64],
        l_loc: usize,
    ) -> Result<Self> {
        let q = model.embed(goal_obs)?;
        let goal_node = localize_scored(&model, &graph, &q, l_loc)?;
        Ok(Self {
            model,
            graph,
            goal_node,
            l_loc,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.graph.nodes.first().map(|n| n.feature.len()).unwrap_or(0)
    }
}

/// Observation of the goal cell (north-facing, noiseless), used both to
/// localize the goal node and as the goal half of the ff-goal state.
pub fn goal_observation(maze: &MazeSpec) -> Vec<f64> {
    let pose = AgentPose {
        cell: maze.goal_cell,
        heading: Heading::N,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    render_observation(maze, pose, 0.0, &mut rng).features
}

/// Localization cache: the similarity parameters are frozen during
/// control training and noiseless observations are a pure function of
/// pose, so node lookups can be memoized on the raw observation bytes.
pub struct Localizer {
    memo: HashMap<Vec<u64>, usize>,
    pub l_loc: usize,
}

impl Localizer {
    pub fn new(l_loc: usize) -> Self {
        Self {
            memo: HashMap::new(),
            l_loc,
        }
    }

    pub fn node(
        &mut self,
        model: &SimilarityModel,
        graph: &TopoGraph,
        obs: &[f64],
    ) -> Result<usize> {
        let key: Vec<u64> = obs.iter().map(|v| v.to_bits()).collect();
        if let Some(&id) = self.memo.get(&key) {
            return Ok(id);
        }
        let q = model.embed(obs)?;
        let id = localize_scored(model, graph, &q, self.l_loc)?;
        self.memo.insert(key, id);
        Ok(id)
    }
}

/// State vector fed to the policy network.
pub fn make_state(
    variant: Variant,
    obs: &[f64],
    goal_obs: Option<&[f64]>,
    ctx: Option<&GamContext>,
    nodes: Option<(usize, usize)>,
) -> Result<Vec<f64>> {
    match variant {
        Variant::FfNogoal | Variant::LstmNogoal => Ok(obs.to_vec()),
        Variant::FfGoal => {
            let g = goal_obs
                .ok_or_else(|| GamError::Precondition("ff-goal state needs goal_obs".into()))?;
            let mut s = obs.to_vec();
            s.extend_from_slice(g);
            Ok(s)
        }
        Variant::Gam => {
            let ctx = ctx.ok_or_else(|| {
                GamError::Precondition("gam state needs an aggregation context".into())
            })?;
            let (cur, goal) = nodes.ok_or_else(|| {
                GamError::Precondition("gam state needs (current, goal) nodes".into())
            })?;
            let g = ctx.eta(cur, goal)?;
            let mut s = obs.to_vec();
            s.extend_from_slice(&g.eta);
            Ok(s)
        }
    }
}

pub fn state_dim(variant: Variant, n_heads: usize, embed_dim: usize) -> usize {
    match variant {
        Variant::FfNogoal | Variant::LstmNogoal => OBS_DIM,
        Variant::FfGoal => 2 * OBS_DIM,
        Variant::Gam => OBS_DIM + n_heads * embed_dim,
    }
}

/// One recorded rollout step. `ret` and `adv` are fixed targets computed
/// at collection time; the loss treats them as constants.
#[derive(Debug, Clone)]
pub struct RolloutStep {
    pub obs: Vec<f64>,
    /// (current, goal) graph nodes; graph-attention variant only.
    pub nodes: Option<(usize, usize)>,
    pub action: usize,
    pub ret: f64,
    pub adv: f64,
    /// True when the life ended after this step (goal reached or episode
    /// timed out); the recurrent state is reset across this boundary.
    pub terminal: bool,
}

/// A contiguous rollout from a single worker.
pub struct WorkerSegment {
    pub steps: Vec<RolloutStep>,
    pub lstm_init: LstmState,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// Discounted returns with bootstrap; terminal steps cut the recursion.
pub fn compute_returns(
    rewards: &[f64],
    terminals: &[bool],
    bootstrap: f64,
    gamma: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut r = bootstrap;
    for t in (0..rewards.len()).rev() {
        if terminals[t] {
            r = 0.0;
        }
        r = rewards[t] + gamma * r;
        out[t] = r;
    }
    out
}

/// Actor-critic loss over rollout segments, averaged per step:
/// -log pi(a) * A + (R - V)^2 - beta * H(pi), with A and R fixed.
/// With `with_grad`, accumulates gradients for the network and (through
/// the guided feature) the attention parameters in `ctx`.
pub fn a2c_loss(
    net: &PolicyNet,
    store: &mut ParamStore,
    ctx: Option<&GamContext>,
    goal_obs: Option<&[f64]>,
    segments: &[WorkerSegment],
    beta: f64,
    with_grad: bool,
) -> Result<LossStats> {
    let n_total: usize = segments.iter().map(|s| s.steps.len()).sum();
    if n_total == 0 {
        return Err(GamError::Precondition("empty rollout".into()));
    }
    let scale = 1.0 / n_total as f64;
    let mut stats = LossStats::default();
    let mut eta_deltas: Vec<(usize, usize, Vec<f64>)> = Vec::new();

    for seg in segments {
        // forward pass, keeping tapes for the backward sweep
        let mut tapes: Vec<NetTape> = Vec::with_capacity(seg.steps.len());
        let mut lstm_state = seg.lstm_init.clone();
        for step in &seg.steps {
            let state = make_state(net.variant, &step.obs, goal_obs, ctx, step.nodes)?;
            let (tape, next) = net.forward(store, &state, Some(&lstm_state))?;
            if let Some(next) = next {
                lstm_state = if step.terminal {
                    LstmState::zeros(TRUNK_HIDDEN)
                } else {
                    next
                };
            }
            tapes.push(tape);
        }

        for (step, tape) in seg.steps.iter().zip(tapes.iter()) {
            let p_a = clamp_prob(tape.probs[step.action]);
            let h = entropy(&tape.probs);
            let td = step.ret - tape.value_out;
            stats.policy_loss += scale * (-p_a.ln() * step.adv);
            stats.value_loss += scale * td * td;
            stats.entropy += scale * h;
        }

        if with_grad {
            let mut dh_carry = vec![0.0; TRUNK_HIDDEN];
            let mut dc_carry = vec![0.0; TRUNK_HIDDEN];
            for (step, tape) in seg.steps.iter().zip(tapes.iter()).rev() {
                if step.terminal {
                    dh_carry.iter_mut().for_each(|v| *v = 0.0);
                    dc_carry.iter_mut().for_each(|v| *v = 0.0);
                }
                let p = &tape.probs;
                let h = entropy(p);
                let mut dlogits = vec![0.0; N_ACTIONS];
                for j in 0..N_ACTIONS {
                    let ind = if j == step.action { 1.0 } else { 0.0 };
                    let policy_term = -step.adv * (ind - p[j]);
                    let entropy_term = beta * p[j] * (clamp_prob(p[j]).ln() + h);
                    dlogits[j] = scale * (policy_term + entropy_term);
                }
                let dvalue = scale * (-2.0 * (step.ret - tape.value_out));
                let (dstate, dh_prev, dc_prev) =
                    net.backward(store, tape, &dlogits, dvalue, &dh_carry, &dc_carry);
                if net.variant == Variant::LstmNogoal {
                    dh_carry = dh_prev;
                    dc_carry = dc_prev;
                }
                if net.variant == Variant::Gam {
                    let (cur, goal) = step.nodes.unwrap();
                    eta_deltas.push((cur, goal, dstate[OBS_DIM..].to_vec()));
                }
            }
        }
    }

    if with_grad && !eta_deltas.is_empty() {
        let ctx = ctx.unwrap();
        ctx.backward(store, &eta_deltas);
    }
    stats.loss = stats.policy_loss + stats.value_loss - beta * stats.entropy;
    Ok(stats)
}

/// Per-update training metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMetricsRow {
    pub step: usize,
    pub update: usize,
    pub epsilon: f64,
    pub mean_episode_reward: f64,
    pub success_rate: f64,
    pub entropy: f64,
    pub value_loss: f64,
    pub eta_norm: f64,
}

pub struct TrainedAgent {
    pub variant: Variant,
    pub net: PolicyNet,
    pub store: ParamStore,
    pub heads: Vec<AttentionHead>,
    pub metrics: Vec<TrainMetricsRow>,
    pub config: AgentConfig,
}

struct Worker {
    env: Env,
    obs: Vec<f64>,
    lstm: LstmState,
    segment_steps: usize,
    episode_reward: f64,
    rng: ChaCha8Rng,
}

/// Train an agent with synchronous multi-worker A2C. For the
/// graph-attention variant, `assets` must be given; attention parameters
/// are optimized jointly with the policy, the similarity model stays
/// frozen, and the attention matrix is recomputed once per update.
pub fn train_agent(
    maze: &Arc<MazeSpec>,
    variant: Variant,
    cfg: &AgentConfig,
    assets: Option<&GamAssets>,
) -> Result<TrainedAgent> {
    if cfg.n_workers == 0 || cfg.t_h == 0 || cfg.total_steps == 0 {
        return Err(GamError::Config(
            "n_workers, t_h, and total_steps must be positive".into(),
        ));
    }
    if variant == Variant::Gam && assets.is_none() {
        return Err(GamError::Precondition(
            "graph-attention training needs a similarity model and graph".into(),
        ));
    }

    let embed_dim = assets.map(|a| a.embed_dim()).unwrap_or(0);
    let sdim = state_dim(variant, cfg.n_heads, embed_dim);
    let net = PolicyNet::new(variant, sdim);
    let heads: Vec<AttentionHead> = if variant == Variant::Gam {
        (0..cfg.n_heads).map(|h| AttentionHead::new(embed_dim, h)).collect()
    } else {
        Vec::new()
    };
    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    net.init_params(&mut store, &mut init_rng);
    for h in &heads {
        h.init_params(&mut store, &mut init_rng);
    }

    let goal_obs = goal_observation(maze);
    let goal_obs_opt = (variant == Variant::FfGoal).then_some(goal_obs.as_slice());
    let mut localizer = Localizer::new(cfg.l_loc);

    let mut workers: Vec<Worker> = (0..cfg.n_workers)
        .map(|i| {
            let mut env = Env::new(Arc::clone(maze), cfg.seed.wrapping_add(i as u64));
            env.episode_len = cfg.episode_len;
            let obs = env.observe().features;
            Worker {
                env,
                obs,
                lstm: LstmState::zeros(TRUNK_HIDDEN),
                segment_steps: 0,
                episode_reward: 0.0,
                rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1000 + i as u64)),
            }
        })
        .collect();

    let mut successes: VecDeque<bool> = VecDeque::with_capacity(100);
    let mut episode_rewards: VecDeque<f64> = VecDeque::with_capacity(20);
    let mut metrics = Vec::new();
    let mut step_count = 0usize;
    let mut update = 0usize;

    while step_count < cfg.total_steps {
        let eps = epsilon_at(cfg, step_count);
        let ctx = if variant == Variant::Gam {
            let a = assets.unwrap();
            Some(GamContext::build(
                heads.clone(),
                &store,
                &a.graph,
                cfg.k,
                true,
            )?)
        } else {
            None
        };

        let mut segments: Vec<WorkerSegment> = Vec::with_capacity(cfg.n_workers);
        let mut eta_norm_sum = 0.0;
        let mut eta_norm_n = 0usize;
        for w in workers.iter_mut() {
            let lstm_init = w.lstm.clone();
            let mut steps: Vec<RolloutStep> = Vec::with_capacity(cfg.t_h);
            let mut rewards = Vec::with_capacity(cfg.t_h);
            let mut terminals = Vec::with_capacity(cfg.t_h);
            let mut values = Vec::with_capacity(cfg.t_h);
            for _ in 0..cfg.t_h {
                let nodes = if let Some(a) = assets.filter(|_| variant == Variant::Gam) {
                    let cur = localizer.node(&a.model, &a.graph, &w.obs)?;
                    Some((cur, a.goal_node))
                } else {
                    None
                };
                let state =
                    make_state(variant, &w.obs, goal_obs_opt, ctx.as_ref(), nodes)?;
                if variant == Variant::Gam {
                    let eta = &state[OBS_DIM..];
                    eta_norm_sum += eta.iter().map(|v| v * v).sum::<f64>().sqrt();
                    eta_norm_n += 1;
                }
                let (tape, next_lstm) = net.forward(&store, &state, Some(&w.lstm))?;
                let action = select_action(&tape.probs, eps, &mut w.rng)?;
                let sr = w.env.step(Action::from_index(action)?);
                w.segment_steps += 1;
                w.episode_reward += sr.reward;

                let mut terminal = false;
                if sr.respawned {
                    push_capped(&mut successes, w.segment_steps <= SUCCESS_HORIZON, 100);
                    w.segment_steps = 0;
                    terminal = true;
                }
                if w.env.episode_over() {
                    if !sr.respawned {
                        push_capped(&mut successes, false, 100);
                    }
                    push_capped(&mut episode_rewards, w.episode_reward, 20);
                    w.episode_reward = 0.0;
                    w.segment_steps = 0;
                    w.env.begin_episode();
                    terminal = true;
                }

                steps.push(RolloutStep {
                    obs: std::mem::take(&mut w.obs),
                    nodes,
                    action,
                    ret: 0.0,
                    adv: 0.0,
                    terminal,
                });
                rewards.push(sr.reward);
                terminals.push(terminal);
                values.push(tape.value_out);

                w.obs = if terminal && w.env.episode_over() {
                    // begin_episode already respawned; render fresh
                    w.env.observe().features
                } else {
                    sr.observation.features
                };
                w.lstm = if terminal {
                    LstmState::zeros(TRUNK_HIDDEN)
                } else {
                    next_lstm.unwrap_or_else(|| LstmState::zeros(TRUNK_HIDDEN))
                };
            }

            let bootstrap = if *terminals.last().unwrap() {
                0.0
            } else {
                let nodes = if let Some(a) = assets.filter(|_| variant == Variant::Gam) {
                    let cur = localizer.node(&a.model, &a.graph, &w.obs)?;
                    Some((cur, a.goal_node))
                } else {
                    None
                };
                let state =
                    make_state(variant, &w.obs, goal_obs_opt, ctx.as_ref(), nodes)?;
                let (tape, _) = net.forward(&store, &state, Some(&w.lstm))?;
                tape.value_out
            };
            let rets = compute_returns(&rewards, &terminals, bootstrap, cfg.gamma);
            for ((s, r), v) in steps.iter_mut().zip(rets.iter()).zip(values.iter()) {
                s.ret = *r;
                s.adv = *r - *v;
            }
            segments.push(WorkerSegment { steps, lstm_init });
        }

        store.zero_grads();
        let stats = a2c_loss(
            &net,
            &mut store,
            ctx.as_ref(),
            goal_obs_opt,
            &segments,
            cfg.entropy_beta,
            true,
        )?;
        if let Some(max_norm) = cfg.max_grad_norm {
            let norm = store.grad_sq_norm().sqrt();
            if norm > max_norm {
                store.scale_grads(max_norm / norm);
            }
        }
        store.rmsprop_step(cfg.lr)?;

        step_count += cfg.t_h * cfg.n_workers;
        update += 1;
        metrics.push(TrainMetricsRow {
            step: step_count,
            update,
            epsilon: eps,
            mean_episode_reward: mean_or_nan(episode_rewards.iter().cloned()),
            success_rate: if successes.is_empty() {
                0.0
            } else {
                successes.iter().filter(|&&s| s).count() as f64 / successes.len() as f64
            },
            entropy: stats.entropy,
            value_loss: stats.value_loss,
            eta_norm: if eta_norm_n > 0 {
                eta_norm_sum / eta_norm_n as f64
            } else {
                0.0
            },
        });
    }

    Ok(TrainedAgent {
        variant,
        net,
        store,
        heads,
        metrics,
        config: cfg.clone(),
    })
}

fn push_capped<T>(q: &mut VecDeque<T>, v: T, cap: usize) {
    if q.len() == cap {
        q.pop_front();
    }
    q.push_back(v);
}

fn mean_or_nan(it: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in it {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Sample an action: with probability `eps` uniform, otherwise from the
/// policy distribution.
pub fn select_action<R: Rng>(probs: &[f64], eps: f64, rng: &mut R) -> Result<usize> {
    if eps > 0.0 && rng.gen::<f64>() < eps {
        return Ok(rng.gen_range(0..probs.len()));
    }
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if r < acc {
            return Ok(i);
        }
    }
    Ok(probs.len() - 1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub start_x: i32,
    pub start_y: i32,
    pub success: bool,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Vec<(i32, i32)>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub outcomes: Vec<EvalOutcome>,
    pub success_rate: f64,
}

/// Evaluate from fixed start poses: one life per start, success when the
/// goal is reached within `max_steps`. No exploration noise; actions are
/// either sampled from the policy or taken greedily.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_starts(
    maze: &Arc<MazeSpec>,
    agent: &TrainedAgent,
    assets: Option<&GamAssets>,
    starts: &[AgentPose],
    max_steps: usize,
    argmax: bool,
    seed: u64,
    record_traj: bool,
) -> Result<EvalReport> {
    let cfg = &agent.config;
    let goal_obs = goal_observation(maze);
    let goal_obs_opt = (agent.variant == Variant::FfGoal).then_some(goal_obs.as_slice());
    let ctx = if agent.variant == Variant::Gam {
        let a = assets.ok_or_else(|| {
            GamError::Precondition("graph-attention evaluation needs assets".into())
        })?;
        Some(GamContext::build_mode(
            agent.heads.clone(),
            &agent.store,
            &a.graph,
            cfg.k,
            false,
            cfg.adaptive_w,
        )?)
    } else {
        None
    };
    let mut localizer = Localizer::new(cfg.l_loc);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcomes = Vec::with_capacity(starts.len());
    for &start in starts {
        let mut env = Env::new(Arc::clone(maze), seed);
        env.episode_len = max_steps + 1;
        env.reset_to(start);
        let mut obs = env.observe().features;
        let mut lstm = LstmState::zeros(TRUNK_HIDDEN);
        let mut traj = record_traj.then(|| vec![(start.cell.x, start.cell.y)]);
        let mut success = false;
        let mut steps = 0usize;
        while steps < max_steps {
            let nodes = if let Some(a) = assets.filter(|_| agent.variant == Variant::Gam) {
                let cur = localizer.node(&a.model, &a.graph, &obs)?;
                Some((cur, a.goal_node))
            } else {
                None
            };
            let state = make_state(agent.variant, &obs, goal_obs_opt, ctx.as_ref(), nodes)?;
            let (tape, next_lstm) = agent.net.forward(&agent.store, &state, Some(&lstm))?;
            let action = if argmax {
                tape.probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            } else {
                select_action(&tape.probs, 0.0, &mut rng)?
            };
            let sr = env.step(Action::from_index(action)?);
            steps += 1;
            if let Some(t) = traj.as_mut() {
                t.push((sr.pose.cell.x, sr.pose.cell.y));
            }
            if sr.respawned {
                success = true;
                break;
            }
            obs = sr.observation.features;
            if let Some(n) = next_lstm {
                lstm = n;
            }
        }
        outcomes.push(EvalOutcome {
            start_x: start.cell.x,
            start_y: start.cell.y,
            success,
            steps,
            trajectory: traj,
        });
    }
    let success_rate =
        outcomes.iter().filter(|o| o.success).count() as f64 / outcomes.len().max(1) as f64;
    Ok(EvalReport {
        outcomes,
        success_rate,
    })
}

/// Continuous scoring run: act for `window_steps` environment steps with
/// respawns and count goal reaches.
pub fn score_run(
    maze: &Arc<MazeSpec>,
    agent: &TrainedAgent,
    assets: Option<&GamAssets>,
    window_steps: usize,
    seed: u64,
) -> Result<u32> {
    let cfg = &agent.config;
    let goal_obs = goal_observation(maze);
    let goal_obs_opt = (agent.variant == Variant::FfGoal).then_some(goal_obs.as_slice());
    let ctx = if agent.variant == Variant::Gam {
        let a = assets.ok_or_else(|| {
            GamError::Precondition("graph-attention evaluation needs assets".into())
        })?;
        Some(GamContext::build_mode(
            agent.heads.clone(),
            &agent.store,
            &a.graph,
            cfg.k,
            false,
            cfg.adaptive_w,
        )?)
    } else {
        None
    };
    let mut localizer = Localizer::new(cfg.l_loc);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = Env::new(Arc::clone(maze), seed);
    env.episode_len = window_steps + 1;
    let mut obs = env.observe().features;
    let mut lstm = LstmState::zeros(TRUNK_HIDDEN);
    let mut goals = 0u32;
    for _ in 0..window_steps {
        let nodes = if let Some(a) = assets.filter(|_| agent.variant == Variant::Gam) {
            let cur = localizer.node(&a.model, &a.graph, &obs)?;
            Some((cur, a.goal_node))
        } else {
            None
        };
        let state = make_state(agent.variant, &obs, goal_obs_opt, ctx.as_ref(), nodes)?;
        let (tape, next_lstm) = agent.net.forward(&agent.store, &state, Some(&lstm))?;
        let action = select_action(&tape.probs, 0.0, &mut rng)?;
        let sr = env.step(Action::from_index(action)?);
        if sr.respawned {
            goals += 1;
            lstm = LstmState::zeros(TRUNK_HIDDEN);
        } else if let Some(n) = next_lstm {
            lstm = n;
        }
        obs = sr.observation.features;
    }
    Ok(goals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maze::{bundled_maze_small, explore_collect, ExplorePolicy};
    use crate::memory::build_graph;
    use crate::nn::grad_check;

    #[test]
    fn returns_match_hand_computation() {
        let r = compute_returns(&[1.0, 0.0, 2.0], &[false, false, false], 10.0, 0.5);
        // R2 = 2 + 0.5*10 = 7; R1 = 0 + 3.5 = 3.5; R0 = 1 + 1.75 = 2.75
        assert_eq!(r, vec![2.75, 3.5, 7.0]);
        let r = compute_returns(&[1.0, 0.0, 2.0], &[false, true, false], 10.0, 0.5);
        // terminal at t=1 cuts both the bootstrap path and t=2's return
        assert_eq!(r, vec![1.0, 0.0, 7.0]);
    }

    #[test]
    fn epsilon_anneals_linearly_then_flattens() {
        let cfg = AgentConfig {
            total_steps: 1000,
            ..Default::default()
        };
        assert!((epsilon_at(&cfg, 0) - 0.1).abs() < 1e-12);
        assert!((epsilon_at(&cfg, 250) - 0.06).abs() < 1e-12);
        assert!((epsilon_at(&cfg, 500) - 0.02).abs() < 1e-12);
        assert!((epsilon_at(&cfg, 999) - 0.02).abs() < 1e-12);
    }

    fn random_segments<R: Rng>(
        variant: Variant,
        sdim: usize,
        n_steps: usize,
        rng: &mut R,
    ) -> Vec<WorkerSegment> {
        let steps = (0..n_steps)
            .map(|t| RolloutStep {
                obs: (0..sdim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                nodes: None,
                action: rng.gen_range(0..N_ACTIONS),
                ret: rng.gen_range(-1.0..1.0),
                adv: rng.gen_range(-1.0..1.0),
                terminal: variant == Variant::LstmNogoal && t == n_steps / 2,
            })
            .collect();
        vec![WorkerSegment {
            steps,
            lstm_init: LstmState::zeros(TRUNK_HIDDEN),
        }]
    }

    #[test]
    fn a2c_grad_matches_fd_feedforward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = PolicyNet::new(Variant::FfNogoal, 10);
        let mut store = ParamStore::new();
        // state_dim 10 here, not OBS_DIM: the loss only reads dimensions
        let net = PolicyNet {
            state_dim: 10,
            ..net
        };
        net.init_params(&mut store, &mut rng);
        let segs = random_segments(Variant::FfNogoal, 10, 8, &mut rng);
        let err = grad_check(&mut store, 100, 1e-5, &mut rng, |params, with_grad| {
            a2c_loss(&net, params, None, None, &segs, 0.01, with_grad)
                .unwrap()
                .loss
        })
        .unwrap();
        assert!(err <= 1e-4, "max rel err {err}");
    }

    #[test]
    fn a2c_grad_matches_fd_recurrent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = PolicyNet::new(Variant::LstmNogoal, 6);
        let mut store = ParamStore::new();
        net.init_params(&mut store, &mut rng);
        let segs = random_segments(Variant::LstmNogoal, 6, 7, &mut rng);
        let err = grad_check(&mut store, 100, 1e-5, &mut rng, |params, with_grad| {
            a2c_loss(&net, params, None, None, &segs, 0.01, with_grad)
                .unwrap()
                .loss
        })
        .unwrap();
        assert!(err <= 1e-4, "max rel err {err}");
    }

    #[test]
    fn a2c_grad_matches_fd_through_attention() {
        let maze = Arc::new(bundled_maze_small());
        let db = explore_collect(&maze, ExplorePolicy::Random, 200, 0.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = crate::memory::SimilarityModel::new(5, &mut rng);
        let graph = build_graph(&model, &db, 10, 8).unwrap();
        let n = graph.n_nodes();
        let n_heads = 2;
        let sdim = state_dim(Variant::Gam, n_heads, 5);
        let net = PolicyNet::new(Variant::Gam, sdim);
        let heads: Vec<AttentionHead> =
            (0..n_heads).map(|h| AttentionHead::new(5, h)).collect();
        let mut store = ParamStore::new();
        net.init_params(&mut store, &mut rng);
        for h in &heads {
            h.init_params(&mut store, &mut rng);
        }
        let steps: Vec<RolloutStep> = (0..6)
            .map(|_| RolloutStep {
                obs: (0..OBS_DIM).map(|_| rng.gen_range(0.0..1.0)).collect(),
                nodes: Some((rng.gen_range(0..n), n - 1)),
                action: rng.gen_range(0..N_ACTIONS),
                ret: rng.gen_range(-1.0..1.0),
                adv: rng.gen_range(-1.0..1.0),
                terminal: false,
            })
            .collect();
        let segs = vec![WorkerSegment {
            steps,
            lstm_init: LstmState::zeros(TRUNK_HIDDEN),
        }];
        let err = grad_check(&mut store, 150, 1e-5, &mut rng, |params, with_grad| {
            let heads: Vec<AttentionHead> =
                (0..n_heads).map(|h| AttentionHead::new(5, h)).collect();
            let ctx = GamContext::build(heads, params, &graph, 3, with_grad).unwrap();
            a2c_loss(&net, params, Some(&ctx), None, &segs, 0.01, with_grad)
                .unwrap()
                .loss
        })
        .unwrap();
        assert!(err <= 1e-4, "max rel err {err}");
    }

    #[test]
    fn short_training_runs_are_deterministic() {
        let maze = Arc::new(bundled_maze_small());
        let cfg = AgentConfig {
            total_steps: 400,
            n_workers: 1,
            seed: 7,
            ..Default::default()
        };
        let a = train_agent(&maze, Variant::FfNogoal, &cfg, None).unwrap();
        let b = train_agent(&maze, Variant::FfNogoal, &cfg, None).unwrap();
        for (ba, bb) in a.store.blocks().iter().zip(b.store.blocks().iter()) {
            assert_eq!(ba.name, bb.name);
            for (x, y) in ba.values.iter().zip(bb.values.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert!(!a.metrics.is_empty());
        assert!(a.metrics.iter().all(|m| m.value_loss.is_finite()));
    }

    #[test]
    fn lstm_training_smoke() {
        let maze = Arc::new(bundled_maze_small());
        let cfg = AgentConfig {
            total_steps: 200,
            n_workers: 2,
            seed: 9,
            ..Default::default()
        };
        let a = train_agent(&maze, Variant::LstmNogoal, &cfg, None).unwrap();
        assert!(a.metrics.iter().all(|m| m.entropy.is_finite()));
    }

    #[test]
    fn evaluate_covers_all_starts() {
        let maze = Arc::new(bundled_maze_small());
        let cfg = AgentConfig {
            total_steps: 200,
            n_workers: 1,
            seed: 11,
            ..Default::default()
        };
        let agent = train_agent(&maze, Variant::FfNogoal, &cfg, None).unwrap();
        let starts = maze.spawn_poses.clone();
        let report =
            evaluate_starts(&maze, &agent, None, &starts, 100, false, 1, true).unwrap();
        assert_eq!(report.outcomes.len(), starts.len());
        for o in &report.outcomes {
            assert!(!o.trajectory.as_ref().unwrap().is_empty());
        }
    }

    #[test]
    fn gam_training_smoke() {
        let maze = Arc::new(bundled_maze_small());
        let db = explore_collect(&maze, ExplorePolicy::Random, 300, 0.0, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = crate::memory::SimilarityModel::new(6, &mut rng);
        let graph = build_graph(&model, &db, 10, 10).unwrap();
        let goal_obs = goal_observation(&maze);
        let assets = GamAssets::new(model, graph, &goal_obs, 3).unwrap();
        let cfg = AgentConfig {
            total_steps: 200,
            n_workers: 1,
            n_heads: 2,
            l_loc: 3,
            seed: 13,
            ..Default::default()
        };
        let agent = train_agent(&maze, Variant::Gam, &cfg, Some(&assets)).unwrap();
        assert!(agent.metrics.iter().all(|m| m.eta_norm.is_finite()));
        let report = evaluate_starts(
            &maze,
            &agent,
            Some(&assets),
            &maze.spawn_poses,
            50,
            true,
            1,
            false,
        )
        .unwrap();
        assert_eq!(report.outcomes.len(), maze.spawn_poses.len());
    }
}
