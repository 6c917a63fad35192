//! Finite-difference verification of every analytic gradient path: the
//! siamese pair loss, the actor-critic loss for the feed-forward and
//! recurrent policies, and the actor-critic loss flowing through the
//! guided attention feature into the attention parameters.
//!
//! Run with: cargo run --release --example gradient_checks

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gam_nav::agent::{a2c_loss, state_dim, PolicyNet, RolloutStep, Variant, WorkerSegment};
use gam_nav::gam::{AttentionHead, GamContext};
use gam_nav::maze::{bundled_maze_small, explore_collect, ExplorePolicy, N_ACTIONS, OBS_DIM};
use gam_nav::memory::{build_graph, sample_pairs, SimilarityModel};
use gam_nav::nn::{grad_check, LstmState, ParamStore};

fn main() -> gam_nav::Result<()> {
    let maze = Arc::new(bundled_maze_small());
    let db = explore_collect(&maze, ExplorePolicy::Random, 300, 0.0, 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // 1. siamese pair loss
    let mut model = SimilarityModel::new(6, &mut rng);
    let pairs = sample_pairs(&db, 32, &mut rng)?;
    let db_ref = &db;
    let mut params = model.params.clone();
    let err = grad_check(&mut params, 120, 1e-5, &mut rng, |p, with_grad| {
        model.params = p.clone();
        let loss = model.batch_loss(db_ref, &pairs, with_grad).unwrap();
        if with_grad {
            *p = model.params.clone();
        }
        loss
    })?;
    println!("pair loss gradient:            max rel err {err:.3e}");

    // 2. feed-forward actor-critic loss
    let net = PolicyNet::new(Variant::FfNogoal, OBS_DIM);
    let mut store = ParamStore::new();
    net.init_params(&mut store, &mut rng);
    let segs = demo_segments(OBS_DIM, 8, &mut rng);
    let err = grad_check(&mut store, 120, 1e-5, &mut rng, |p, wg| {
        a2c_loss(&net, p, None, None, &segs, 0.01, wg).unwrap().loss
    })?;
    println!("feed-forward a2c gradient:     max rel err {err:.3e}");

    // 3. recurrent actor-critic loss (truncated BPTT)
    let net = PolicyNet::new(Variant::LstmNogoal, 12);
    let mut store = ParamStore::new();
    net.init_params(&mut store, &mut rng);
    let segs = demo_segments(12, 8, &mut rng);
    let err = grad_check(&mut store, 120, 1e-5, &mut rng, |p, wg| {
        a2c_loss(&net, p, None, None, &segs, 0.01, wg).unwrap().loss
    })?;
    println!("recurrent a2c gradient:        max rel err {err:.3e}");

    // 4. a2c loss through the guided feature into the attention params
    let model = SimilarityModel::new(5, &mut rng);
    let graph = build_graph(&model, &db, 10, 8)?;
    let n = graph.n_nodes();
    let n_heads = 2;
    let net = PolicyNet::new(Variant::Gam, state_dim(Variant::Gam, n_heads, 5));
    let mut store = ParamStore::new();
    net.init_params(&mut store, &mut rng);
    for h in 0..n_heads {
        AttentionHead::new(5, h).init_params(&mut store, &mut rng);
    }
    let mut segs = demo_segments(OBS_DIM, 6, &mut rng);
    for s in &mut segs[0].steps {
        s.nodes = Some((rng.gen_range(0..n), n - 1));
    }
    let err = grad_check(&mut store, 150, 1e-5, &mut rng, |p, wg| {
        let heads: Vec<AttentionHead> = (0..n_heads).map(|h| AttentionHead::new(5, h)).collect();
        let ctx = GamContext::build(heads, p, &graph, 3, wg).unwrap();
        a2c_loss(&net, p, Some(&ctx), None, &segs, 0.01, wg).unwrap().loss
    })?;
    println!("a2c-through-attention gradient: max rel err {err:.3e}");
    Ok(())
}

fn demo_segments<R: Rng>(dim: usize, n: usize, rng: &mut R) -> Vec<WorkerSegment> {
    let steps = (0..n)
        .map(|t| RolloutStep {
            obs: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            nodes: None,
            action: rng.gen_range(0..N_ACTIONS),
            ret: rng.gen_range(-1.0..1.0),
            adv: rng.gen_range(-1.0..1.0),
            terminal: t == n / 2,
        })
        .collect();
    vec![WorkerSegment {
        steps,
        lstm_init: LstmState::zeros(gam_nav::agent::TRUNK_HIDDEN),
    }]
}
