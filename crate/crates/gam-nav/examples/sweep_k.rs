//! Effect of the aggregation depth K on the guided feature and on
//! navigation: K = 0 reduces the feature to a raw embedding difference,
//! moderate K spreads goal information along graph edges, and very large
//! K collapses every node onto the stationary mixture (eta -> 0).
//!
//! Run with: cargo run --release --example sweep_k

use std::sync::Arc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gam_nav::agent::{evaluate_starts, goal_observation, train_agent, AgentConfig, GamAssets, Variant};
use gam_nav::gam::{AttentionHead, GamContext};
use gam_nav::maze::{bundled_maze_small, explore_collect, ExplorePolicy};
use gam_nav::memory::{build_graph, train_similarity, SimilarityModel};
use gam_nav::nn::ParamStore;

fn main() -> gam_nav::Result<()> {
    let maze = Arc::new(bundled_maze_small());
    let db = explore_collect(&maze, ExplorePolicy::Random, 2000, 0.0, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut model = SimilarityModel::new(32, &mut rng);
    train_similarity(&mut model, &db, 20_000, 10, 64, 1e-3, &mut rng)?;
    let l_global = (0.65 * (db.steps.len() / 5) as f64).round() as usize;
    let graph = build_graph(&model, &db, 5, l_global)?;
    let goal_obs = goal_observation(&maze);
    let assets = GamAssets::new(model, graph, &goal_obs, 5)?;

    // mean ||eta|| over all (node, goal) pairs at fixed random attention
    println!("  K      mean ||eta||   (untrained attention)");
    let heads: Vec<AttentionHead> = (0..4).map(|h| AttentionHead::new(32, h)).collect();
    let mut store = ParamStore::new();
    for h in &heads {
        h.init_params(&mut store, &mut rng);
    }
    for k in [0usize, 1, 3, 10, 100, 1000] {
        let ctx = GamContext::build(heads.clone(), &store, &assets.graph, k, false)?;
        let n = ctx.n_nodes();
        let mut sum = 0.0;
        for i in 0..n {
            let g = ctx.eta(i, assets.goal_node)?;
            sum += g.eta.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        println!("{k:>5}    {:.6e}", sum / n as f64);
    }

    // short navigation training per K
    println!("\n  K    success rate (40k-step training budget)");
    for k in [0usize, 1, 3] {
        let cfg = AgentConfig {
            total_steps: 40_000,
            k,
            seed: 2,
            ..Default::default()
        };
        let agent = train_agent(&maze, Variant::Gam, &cfg, Some(&assets))?;
        let eval =
            evaluate_starts(&maze, &agent, Some(&assets), &maze.spawn_poses, 500, false, 2, false)?;
        println!("{k:>3}    {:.2}", eval.success_rate);
    }
    Ok(())
}
