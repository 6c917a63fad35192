//! Recurrent aggregation convergence: builds a random attention matrix
//! on a random connected graph, iterates X <- W X, and verifies the
//! limit against the independent stationary-distribution oracle
//! (all rows of W^k collapse onto pi^T X as k grows).
//!
//! Run with: cargo run --release --example convergence_demo

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gam_nav::gam::{
    converge_diag, random_attention_matrix, random_connected_adjacency, stationary_oracle,
};

fn main() -> gam_nav::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let adjacency = random_connected_adjacency(30, 25, &mut rng);
    let (w, x0) = random_attention_matrix(&adjacency, 8, &mut rng)?;
    w.validate()?;

    let pi = stationary_oracle(&w)?;
    let mut residual = 0.0f64;
    for j in 0..w.n {
        let acc: f64 = (0..w.n).map(|i| pi[i] * w.at(i, j)).sum();
        residual = residual.max((acc - pi[j]).abs());
    }
    println!("stationary oracle: sum(pi) = {:.12}, residual ||pi^T W - pi^T||_inf = {residual:.3e}", pi.iter().sum::<f64>());

    let report = converge_diag(&w, &x0, 10_000)?;
    println!("\n    k    step gap        gap to 1 pi^T X0");
    for row in report
        .rows
        .iter()
        .filter(|r| [1, 2, 5, 10, 20, 50, 100, 200].contains(&r.k) || r.k == report.rows.len())
    {
        println!("{:>5}    {:.6e}    {:.6e}", row.k, row.step_gap, row.gap_to_limit);
    }
    println!(
        "\nfinal gap to rank-one limit: {:.3e} after {} iterations ({} component(s))",
        report.final_gap_to_limit,
        report.rows.len(),
        report.n_components
    );
    if let Some(k) = report.first_k_below_1e9 {
        println!("step gap first below 1e-9 at k = {k}");
    }
    Ok(())
}
