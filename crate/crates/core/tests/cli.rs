mod common;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use posefill::checkpoint;
use posefill::cli::run;

fn args(parts: &[&dyn AsRef<std::ffi::OsStr>]) -> Vec<OsString> {
    std::iter::once(OsString::from("posefill"))
        .chain(parts.iter().map(|p| p.as_ref().to_os_string()))
        .collect()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// Writes a tiny config and synthesizes a matching dataset.
    fn setup(&self, name: &str, preset: &str, budget: u64, batch: usize) -> (PathBuf, PathBuf) {
        let cfg = self.path(&format!("{name}.toml"));
        let data = self.path("data");
        fs::write(&cfg, format!("preset = \"{preset}\"\n{}", common::tiny_toml(budget, batch))).unwrap();
        if !data.exists() {
            assert_eq!(run(args(&[&"data-synth", &"--config", &cfg, &"--out", &data, &"--count", &"12"])), 0);
        }
        (cfg, data)
    }
}

fn csv_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(str::to_string).collect()
}

#[test]
fn data_synth_counts_and_is_byte_stable() {
    let ws = Workspace::new();
    let a = ws.path("a");
    let b = ws.path("b");
    for out in [&a, &b] {
        assert_eq!(run(args(&[&"data-synth", &"--out", out, &"--count", &"10", &"--seed", &"4"])), 0);
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["ids"].as_array().unwrap().len(), 10);
    for sub in ["manifest.json", "images/000003.png", "masks/000009.png", "annotations/000000.json"] {
        assert_eq!(fs::read(a.join(sub)).unwrap(), fs::read(b.join(sub)).unwrap(), "{sub}");
    }

    let empty = ws.path("empty");
    assert_eq!(run(args(&[&"data-synth", &"--out", &empty, &"--count", &"0"])), 0);
    let ds = posefill::datasets::load_dataset(&empty).unwrap();
    assert!(ds.is_empty());
    assert_eq!(ds.resolution(), (72, 40));
}

#[test]
fn train_writes_one_row_per_step_with_objective() {
    let ws = Workspace::new();
    let (cfg_a, data) = ws.setup("a", "config-a", 400, 2);
    let (cfg_b, _) = ws.setup("b", "config-b", 20, 2);
    let run_a = ws.path("run-a");
    let run_b = ws.path("run-b");
    assert_eq!(run(args(&[&"train", &"--config", &cfg_a, &"--data", &data, &"--out", &run_a])), 0);
    assert_eq!(run(args(&[&"train", &"--config", &cfg_b, &"--data", &data, &"--out", &run_b])), 0);

    let rows_a = csv_rows(&run_a.join("metrics.csv"));
    assert_eq!(rows_a.len(), 200);
    assert!(rows_a.iter().all(|r| r.split(',').nth(2) == Some("baseline")));
    let rows_b = csv_rows(&run_b.join("metrics.csv"));
    assert!(rows_b.iter().all(|r| r.split(',').nth(2) == Some("mask_aware")));
    let header = fs::read_to_string(run_a.join("metrics.csv")).unwrap();
    assert!(header.starts_with("step,stage,objective,d_loss,g_loss,blur_sigma,images_seen"));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ws = Workspace::new();
    let (cfg, data) = ws.setup("c", "config-b", 24, 2);
    let full = ws.path("full");
    let part = ws.path("part");
    assert_eq!(run(args(&[&"train", &"--config", &cfg, &"--data", &data, &"--out", &full])), 0);
    assert_eq!(run(args(&[&"train", &"--config", &cfg, &"--data", &data, &"--out", &part, &"--max-steps", &"5"])), 0);
    assert_eq!(csv_rows(&part.join("metrics.csv")).len(), 5);
    let latest = part.join("checkpoints/latest.ckpt");
    assert_eq!(run(args(&[&"train", &"--resume", &latest, &"--data", &data, &"--out", &part])), 0);

    let (a, _) = checkpoint::load(&full.join("checkpoints/stage-0.ckpt")).unwrap();
    let (b, _) = checkpoint::load(&part.join("checkpoints/stage-0.ckpt")).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(csv_rows(&full.join("metrics.csv")), csv_rows(&part.join("metrics.csv")));
}

#[test]
fn eval_reports_and_sample_grids() {
    let ws = Workspace::new();
    let (cfg, data) = ws.setup("e", "config-b", 8, 2);
    let out = ws.path("run");
    assert_eq!(run(args(&[&"train", &"--config", &cfg, &"--data", &data, &"--out", &out])), 0);
    let ckpt = out.join("checkpoints/stage-0.ckpt");
    let (loaded, id) = checkpoint::load(&ckpt).unwrap();

    let report_path = ws.path("report.json");
    let code = run(args(&[
        &"eval",
        &"--checkpoint",
        &ckpt,
        &"--data",
        &data,
        &"--metrics",
        &"oks,fid",
        &"--redetector",
        &"passthrough",
        &"--inpainter",
        &"ground-truth",
        &"--out",
        &report_path,
    ]));
    assert_eq!(code, 0);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&report_path).unwrap()).unwrap();
    assert!((report["oks"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(report["fid"].as_f64().unwrap().abs() < 1e-6, "{report}");
    assert_eq!(report["config-hash"], loaded.config_hash);
    assert_eq!(report["checkpoint-id"], id);
    assert_eq!(report["n"], 12);

    let gen_report = ws.path("gen.json");
    assert_eq!(
        run(args(&[&"eval", &"--checkpoint", &ckpt, &"--data", &data, &"--metrics", &"oks,ppl", &"--out", &gen_report])),
        0
    );
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&gen_report).unwrap()).unwrap();
    let oks = report["oks"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&oks));
    assert!(report["ppl"].as_f64().unwrap() >= 0.0);

    let g1 = ws.path("g1.png");
    let g2 = ws.path("g2.png");
    for g in [&g1, &g2] {
        assert_eq!(
            run(args(&[&"sample", &"--checkpoint", &ckpt, &"--data", &data, &"--count", &"4", &"--seed", &"9", &"--out", g])),
            0
        );
    }
    assert_eq!(fs::read(&g1).unwrap(), fs::read(&g2).unwrap());
    let img = image::open(&g1).unwrap();
    // 18-px rows upscaled 4x with 1-px separators.
    assert_eq!(img.height(), 4 * (18 * 4 + 1) - 1);
    let latents: Vec<Vec<f64>> = serde_json::from_slice(&fs::read(g1.with_extension("latents.json")).unwrap()).unwrap();
    assert_eq!(latents.len(), 4);
}

#[test]
fn exit_codes_follow_error_class() {
    let ws = Workspace::new();
    let (cfg, data) = ws.setup("x", "config-b", 4, 2);
    let bin = env!("CARGO_BIN_EXE_posefill");

    // Unknown config key: exit 2 and no output directory.
    let bad = ws.path("bad.toml");
    fs::write(&bad, "[trainer]\nlearning_rate = 1.0\n").unwrap();
    let out = ws.path("never");
    let st = Command::new(bin).args(["train", "--config"]).arg(&bad).arg("--out").arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(2));
    assert!(!out.exists());

    // Missing dataset: exit 3 and no output directory.
    let st = Command::new(bin)
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(ws.path("nowhere"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));
    assert!(!out.exists());

    let run_dir = ws.path("run");
    let st = Command::new(bin).args(["train", "--config"]).arg(&cfg).arg("--data").arg(&data).arg("--out").arg(&run_dir).status().unwrap();
    assert_eq!(st.code(), Some(0));
    let ckpt = run_dir.join("checkpoints/stage-0.ckpt");

    // Unknown metric: exit 2.
    let st = Command::new(bin).args(["eval", "--metrics", "oks,lpips", "--checkpoint"]).arg(&ckpt).arg("--data").arg(&data).status().unwrap();
    assert_eq!(st.code(), Some(2));

    // Growing a single-stage run: runtime failure.
    let st = Command::new(bin).args(["grow", "--checkpoint"]).arg(&ckpt).arg("--out").arg(ws.path("g.ckpt")).status().unwrap();
    assert_eq!(st.code(), Some(4));
}

#[test]
fn grow_advances_a_progressive_checkpoint() {
    let ws = Workspace::new();
    let cfg = ws.path("p.toml");
    fs::write(&cfg, common::tiny_progressive_toml([4, 4], 2)).unwrap();
    let data = ws.path("data");
    assert_eq!(run(args(&[&"data-synth", &"--config", &cfg, &"--out", &data, &"--count", &"4"])), 0);
    let out = ws.path("run");
    assert_eq!(run(args(&[&"train", &"--config", &cfg, &"--data", &data, &"--out", &out, &"--max-steps", &"1"])), 0);
    let ckpt = out.join("checkpoints/latest.ckpt");
    let grown = ws.path("grown.ckpt");
    assert_eq!(run(args(&[&"grow", &"--checkpoint", &ckpt, &"--out", &grown])), 0);
    let (before, _) = checkpoint::load(&ckpt).unwrap();
    let (after, _) = checkpoint::load(&grown).unwrap();
    assert_eq!(after.state.stage, 1);
    assert_eq!(after.state.generator.resolution(), (36, 20));
    for (name, v) in before.state.generator.params.iter() {
        assert_eq!(after.state.generator.params.get(name), v);
    }
    assert_eq!(run(args(&[&"grow", &"--checkpoint", &grown])), 4);
}
