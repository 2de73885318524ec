//! Plan around a crossing vehicle: candidate arcs and speed profiles scored
//! against forecast occupied grids.
//!
//! ```bash
//! cargo run --example plan_avoidance
//! ```

use coopsim::core::{AgentClass, AgentQuery, Grid, GridSpec, OccupancyMessage};
use coopsim::fusion::{mask_from, FusedScene};
use coopsim::planner::{
    forecast_agents, generate_candidates, plan, trajectory_cost, Command, PlannerConfig,
};

fn crossing_car(x: f64, y: f64, vx: f64, vy: f64) -> AgentQuery {
    AgentQuery {
        feature: vec![0.0; 8],
        ref_point: [x, y, 0.0],
        heading: vy.atan2(vx),
        velocity: [vx, vy],
        flow_ref: [vx, vy],
        flow_feature: vec![0.0; 8],
        track_id: 1,
        confidence: 0.9,
        box_size: [4.6, 1.8, 1.5],
        class: AgentClass::Car,
        timestamp: 0.0,
    }
}

fn main() {
    let spec = GridSpec::ego_default();
    let cfg = PlannerConfig::default();
    let drivable = Grid::filled(spec, true);

    // A car 25 m ahead, crossing left to right; the ego drives 8 m/s.
    let occupancy = OccupancyMessage::zeros(spec, 0.0);
    let mask = mask_from(&occupancy.p0, 0.8);
    let scene = FusedScene {
        queries: vec![crossing_car(25.0, 12.0, 0.0, -4.0)],
        lanes: vec![],
        occupancy,
        mask,
    };

    let masks = forecast_agents(&scene, &cfg);
    println!(
        "forecast: {} step masks over {:.1}s horizon",
        masks.len(),
        cfg.horizon
    );

    let candidates = generate_candidates(8.0, Command::KeepForward, &cfg);
    println!(
        "{} forward candidates (curvature x speed profile):",
        candidates.len()
    );
    for (i, cand) in candidates.iter().enumerate().take(8) {
        let c = trajectory_cost(cand, &masks, &drivable, &cfg);
        let last = cand.waypoints.last().unwrap();
        println!(
            "  candidate {i:>2}: ends at ({:>5.1}, {:>5.1}), cost {c:>8.2}",
            last.x, last.y
        );
    }

    let chosen = plan(&scene, 8.0, Command::KeepForward, &drivable, &cfg);
    println!("chosen trajectory:");
    for w in chosen.waypoints.iter().step_by(3) {
        println!("  t={:.1}s -> ({:>5.2}, {:>5.2})", w.t, w.x, w.y);
    }
    let final_cost = trajectory_cost(&chosen, &masks, &drivable, &cfg);
    println!("chosen cost {final_cost:.2} (collision weight is {}, so anything under it is collision-free)", cfg.w_col);
}
