use aatrace::scenarios::{run_scenario, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args().nth(1).unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/insert_point.json").into());
    let config = ScenarioConfig::load(&path)?;
    let report = run_scenario(&config)?;
    println!("{} K={} p={} loss={:.4} ({:.2}s)", report.scenario, report.num_steps, report.param_count, report.final_train_loss, report.runtime_seconds);
    for u in &report.units {
        println!("  {:<14} pearson {:+.4}  spearman {:+.4}  joint {:+.4}", u.name, u.pearson, u.spearman, u.joint_pearson);
    }
    for (k, v) in &report.checks {
        println!("  check {k}: {v}");
    }
    for (k, v) in &report.metrics {
        println!("  metric {k}: {v:.6}");
    }
    for t in &report.test_sets {
        println!("  set {:<14} {:?}", t.name, t.unit_means);
    }
    Ok(())
}
