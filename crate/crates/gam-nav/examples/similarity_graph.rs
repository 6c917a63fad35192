//! Similarity classifier and topological graph construction: explore the
//! small maze, train the siamese horizon classifier on temporally
//! labeled observation pairs, build the graph, and check its quality
//! against ground-truth poses.
//!
//! Run with: cargo run --release --example similarity_graph

use std::sync::Arc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gam_nav::maze::{bundled_maze_small, explore_collect, ExplorePolicy};
use gam_nav::memory::{build_graph, graph_quality, train_similarity, SimilarityModel};

fn main() -> gam_nav::Result<()> {
    let maze = Arc::new(bundled_maze_small());
    let db = explore_collect(&maze, ExplorePolicy::Random, 2000, 0.0, 1)?;
    println!(
        "explored {} steps, coverage {:.2}",
        db.steps.len(),
        db.coverage(&maze)
    );

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = SimilarityModel::new(32, &mut rng);
    // short budget for a demo; the acceptance fixture uses 60k pairs x 60
    let report = train_similarity(&mut model, &db, 20_000, 15, 64, 1e-3, &mut rng)?;
    for (i, (loss, acc)) in report
        .epoch_loss
        .iter()
        .zip(report.holdout_accuracy.iter())
        .enumerate()
    {
        println!("epoch {:>2}: loss {loss:.4}, holdout accuracy {acc:.4}", i + 1);
    }

    let n_nodes_est = db.steps.len() / 5;
    let l_global = (0.65 * n_nodes_est as f64).round() as usize;
    let graph = build_graph(&model, &db, 5, l_global)?;
    let q = graph_quality(&graph, &db, &maze)?;
    println!(
        "\ngraph: {} nodes, {} edges ({} consecutive, {} classifier)",
        q.n_nodes, q.n_edges, q.n_consecutive, q.n_classifier
    );
    println!(
        "quality: {:.1}% of classifier edges within geodesic 8, {} wall violations, {} component(s)",
        100.0 * q.frac_geodesic_le8,
        q.wall_violations,
        q.n_components
    );
    Ok(())
}
