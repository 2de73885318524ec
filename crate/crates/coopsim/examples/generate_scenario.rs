//! Generate a deterministic intersection scenario and write it to JSON.
//!
//! ```bash
//! cargo run --example generate_scenario
//! ```

use coopsim::planner::Command;
use coopsim::scenario::{generate_scenario, Layout, ScenarioConfig};

fn main() -> coopsim::Result<()> {
    let config = ScenarioConfig {
        seed: 42,
        duration: 10.0,
        dt: 0.5,
        n_agents: 8,
        layout: Layout::CrossIntersection,
        ego_command: Command::KeepForward,
    };
    let scenario = generate_scenario(&config)?;

    println!(
        "scenario: {} frames over {:.1}s, {} lanes/crosswalks, {} drivable cells",
        scenario.frames.len(),
        config.duration,
        scenario.lanes.len(),
        scenario.drivable.count_true(),
    );
    for frame in scenario.frames.iter().step_by(4) {
        let ego = &frame.ego;
        println!(
            "t={:>4.1}s  ego at ({:>6.2}, {:>6.2}) heading {:>5.2} rad, {} agents",
            frame.time,
            ego.position[0],
            ego.position[1],
            ego.heading,
            frame.agents.len()
        );
    }

    // The crosser (agent 0) is timed to reach the junction alongside the ego.
    let crosser = &scenario.frames[0].agents[0];
    println!(
        "crossing agent starts at ({:.1}, {:.1}) doing {:.1} m/s",
        crosser.position[0], crosser.position[1], crosser.speed
    );

    let path = std::path::Path::new("scenario_seed42.json");
    scenario.save_json(path)?;
    println!("wrote {}", path.display());
    Ok(())
}
