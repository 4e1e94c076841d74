//! Runs two configs of a preset into fresh directories and compares them,
//! the same path the `geofed` binary takes.

use geofed::cli::{compare, run_to_dir};
use geofed::presets::preset;

fn main() -> geofed::Result<()> {
    let p = preset("comm_audit")?.with_seed(3);
    let root = std::env::temp_dir().join(format!("geofed_runs_{}", std::process::id()));
    let mut dirs = Vec::new();
    for label in ["toy_geolora", "toy_fedavg_full"] {
        let cfg = p.config(label).expect("label is part of the preset");
        let dir = root.join(label);
        println!("== {label}\n{}", run_to_dir(cfg, &dir, label)?);
        dirs.push(dir);
    }
    println!("{}", compare(&dirs[0], &dirs[1])?);
    std::fs::remove_dir_all(&root)?;
    Ok(())
}
