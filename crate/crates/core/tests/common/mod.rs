#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use transpca::appkit::io::write_panel_csv;
use transpca::simgen::{generate_world, replication_rng, GeneratedWorld, Scenario, ScenarioConfig};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_transpca"))
}

pub fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

/// Small half-informative world: target plus four sources.
pub fn small_world(seed: u64) -> GeneratedWorld {
    let mut cfg = ScenarioConfig::new(4, 30, 60, 120);
    cfg.scenario = Scenario::HalfInformative;
    generate_world(&cfg, &mut replication_rng(seed, 0)).expect("valid config")
}

/// Writes `target.csv` and `source1.csv`… into `dir`; returns the source paths.
pub fn write_world(dir: &Path, world: &GeneratedWorld) -> Vec<PathBuf> {
    write_panel_csv(&dir.join("target.csv"), &world.target).unwrap();
    world
        .sources
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let path = dir.join(format!("source{}.csv", k + 1));
            write_panel_csv(&path, p).unwrap();
            path
        })
        .collect()
}
