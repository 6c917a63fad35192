//! Tour of the maze simulator: bundled fixtures, the observation layout,
//! reward bookkeeping, and a short scripted episode.
//!
//! Run with: cargo run --release --example maze_tour

use std::sync::Arc;

use gam_nav::maze::{
    bundled_maze_large, bundled_maze_small, geodesic_distance, Action, Env, N_RAYS, N_TEXTURES,
    OBS_DIM,
};

fn main() -> gam_nav::Result<()> {
    for (name, maze) in [
        ("maze-small", bundled_maze_small()),
        ("maze-large", bundled_maze_large()),
    ] {
        println!("== {name}: {}x{} ==", maze.width, maze.height);
        println!(
            "free cells: {}, spawns: {}, goal: ({}, {})",
            maze.free_cells().len(),
            maze.spawn_poses.len(),
            maze.goal_cell.x,
            maze.goal_cell.y
        );
        for pose in &maze.spawn_poses {
            let d = geodesic_distance(&maze, pose.cell, maze.goal_cell)?.unwrap();
            println!("  spawn ({:>2},{:>2}) geodesic to goal: {d}", pose.cell.x, pose.cell.y);
        }
    }

    let maze = Arc::new(bundled_maze_small());
    let mut env = Env::new(Arc::clone(&maze), 7);
    let obs = env.observe();
    println!("\nobservation dim: {OBS_DIM} = {N_RAYS} depths + {N_RAYS}x{N_TEXTURES} textures + {N_RAYS}x2 bearings");
    println!("first 4 depth channels: {:?}", &obs.features[..4]);

    // a few steps with reward bookkeeping
    let mut total = 0.0;
    for (i, action) in [
        Action::MoveForward,
        Action::TurnRight,
        Action::MoveForward,
        Action::NotMove,
    ]
    .into_iter()
    .enumerate()
    {
        let r = env.step(action);
        total += r.reward;
        println!(
            "step {i}: {action:?} -> reward {:+.2}, pose ({}, {}) {}",
            r.reward, r.pose.cell.x, r.pose.cell.y, r.pose.heading
        );
    }
    println!("return after 4 steps: {total:+.2} (step penalty -0.05, goal +10)");
    Ok(())
}
