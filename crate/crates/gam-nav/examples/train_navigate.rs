//! End-to-end navigation on the small maze with a reduced budget:
//! explore, train the similarity classifier, build the graph, train the
//! graph-attention agent and the feed-forward baseline, and evaluate
//! both from every spawn.
//!
//! Run with: cargo run --release --example train_navigate

use std::sync::Arc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gam_nav::agent::{
    evaluate_starts, goal_observation, train_agent, AgentConfig, GamAssets, Variant,
};
use gam_nav::maze::{bundled_maze_small, explore_collect, ExplorePolicy};
use gam_nav::memory::{build_graph, train_similarity, SimilarityModel};

fn main() -> gam_nav::Result<()> {
    let maze = Arc::new(bundled_maze_small());
    let db = explore_collect(&maze, ExplorePolicy::Random, 2000, 0.0, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = SimilarityModel::new(32, &mut rng);
    let report = train_similarity(&mut model, &db, 30_000, 20, 64, 1e-3, &mut rng)?;
    println!("similarity holdout accuracy: {:.3}", report.final_holdout_accuracy);

    let l_global = (0.65 * (db.steps.len() / 5) as f64).round() as usize;
    let graph = build_graph(&model, &db, 5, l_global)?;
    println!("graph: {} nodes, {} edges", graph.n_nodes(), graph.edges.len());
    let goal_obs = goal_observation(&maze);
    let assets = GamAssets::new(model, graph, &goal_obs, 5)?;
    println!("goal localized to node {}", assets.goal_node);

    let cfg = AgentConfig {
        total_steps: 120_000,
        seed: 1,
        ..Default::default()
    };
    for variant in [Variant::Gam, Variant::FfNogoal] {
        let a = (variant == Variant::Gam).then_some(&assets);
        let agent = train_agent(&maze, variant, &cfg, a)?;
        let rolling = agent.metrics.last().map(|m| m.success_rate).unwrap_or(0.0);
        let eval = evaluate_starts(&maze, &agent, a, &maze.spawn_poses, 500, false, 1, false)?;
        println!(
            "{:<8} rolling success {rolling:.2}, eval success from {} spawns: {:.2}",
            variant.as_str(),
            maze.spawn_poses.len(),
            eval.success_rate
        );
    }
    Ok(())
}
