#![allow(dead_code)]

use std::path::Path;

use posefill::config::RunConfig;
use posefill::datasets::{synth_dataset, MaskedSample, StickFigureSpec};
use posefill::trainer::{build_branches, Trainer};

/// Small single-resolution (18x10) setup that trains in milliseconds per step.
pub fn tiny_toml(budget: u64, batch: usize) -> String {
    format!(
        r#"
        [generator]
        resolutions = [[18, 10]]
        channels = [16]
        style_dim = 16
        [projector]
        networks = [{{ kind = "desk", name = "desk", seed = 1, channels = [8, 8, 16, 16] }}]
        proj_channels = 8
        [discriminator]
        channels = 16
        [trainer]
        stage_budgets = [{budget}]
        batch_size = {batch}
        checkpoint_every = 0
        sample_every = 0
        [dataset]
        height = 18
        width = 10
        "#
    )
}

/// Two-stage progressive setup (18x10 then 36x20).
pub fn tiny_progressive_toml(budgets: [u64; 2], batch: usize) -> String {
    format!(
        r#"
        preset = "config-d"
        [generator]
        resolutions = [[18, 10], [36, 20]]
        channels = [16, 8]
        style_dim = 16
        [projector]
        networks = [{{ kind = "desk", name = "desk", seed = 1, channels = [8, 8, 16, 16] }}]
        proj_channels = 8
        [discriminator]
        channels = 16
        [trainer]
        progressive = true
        stage_budgets = [{}, {}]
        batch_size = {batch}
        checkpoint_every = 0
        sample_every = 0
        [dataset]
        height = 36
        width = 20
        "#,
        budgets[0], budgets[1]
    )
}

pub fn config(preset: &str, toml: &str) -> RunConfig {
    RunConfig::from_toml(preset, toml).expect("valid test config")
}

pub fn data_for(cfg: &RunConfig, seed: u64, count: usize) -> Vec<MaskedSample> {
    synth_dataset(&StickFigureSpec::default(), seed, count, cfg.dataset.height, cfg.dataset.width)
}

pub fn trainer(cfg: RunConfig, data: Vec<MaskedSample>) -> Trainer {
    let branches = build_branches(&cfg, Path::new(".")).unwrap();
    Trainer::new(cfg, branches, data).unwrap()
}

/// Least-squares slope of `ys` against their index.
pub fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}
