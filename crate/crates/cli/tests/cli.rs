use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use core2::denoiser::{ArchConfig, BaseModel};
use core2::reflect::{ReflectConfig, WeakModel};
use serde_json::json;

fn core2(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_core2"))
        .args(args)
        .current_dir(cwd)
        .env("CORE2_THREADS", "2")
        .output()
        .expect("spawn core2")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SUBCOMMANDS: [&str; 7] = [
    "pipeline", "theory", "collect", "reflect", "refine", "report", "ablate",
];

#[test]
fn help_matches_snapshots() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots");
    let update = std::env::var_os("UPDATE_SNAPSHOTS").is_some();
    let tmp = tempfile::tempdir().unwrap();
    let mut names = vec![None];
    names.extend(SUBCOMMANDS.map(Some));
    for name in names {
        let args: Vec<&str> = name.into_iter().chain(["--help"]).collect();
        let out = core2(&args, tmp.path());
        assert_eq!(out.status.code(), Some(0), "{args:?}");
        let text = String::from_utf8(out.stdout).unwrap();
        let file = dir.join(format!("help_{}.txt", name.unwrap_or("main")));
        if update {
            std::fs::create_dir_all(&dir).unwrap();
            std::fs::write(&file, &text).unwrap();
        } else {
            let expected = std::fs::read_to_string(&file).unwrap_or_else(|_| {
                panic!("missing {}; rerun with UPDATE_SNAPSHOTS=1", file.display())
            });
            assert_eq!(text, expected, "help for {args:?} changed");
        }
    }
}

#[test]
fn refine_help_lists_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let text = String::from_utf8(core2(&["refine", "--help"], tmp.path()).stdout).unwrap();
    assert!(text.contains("[default: samples.jsonl]"), "{text}");
    let text = String::from_utf8(core2(&["theory", "--help"], tmp.path()).stdout).unwrap();
    assert!(text.contains("[default: 200]"), "{text}");
}

#[test]
fn unknown_flag_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = core2(&["theory", "--bogus"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let out = core2(&["frobnicate"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_mixture_exits_one_naming_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, json!({"mixture": "nowhere/mix.json"}).to_string()).unwrap();
    let out = core2(&["pipeline", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(
        err.contains(&tmp.path().join("nowhere/mix.json").display().to_string()),
        "{err}"
    );
}

#[test]
fn missing_checkpoint_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = core2(
        &["refine", "--base", "absent.ckpt", "--cfg-only"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("absent.ckpt"));
}

#[test]
fn version_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = core2(&["--version"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn theory_writes_two_hundred_passing_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = core2(&["theory", "--out", "t.csv"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = std::fs::read_to_string(tmp.path().join("t.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let pass_col = header.iter().position(|h| *h == "pass").unwrap();
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 200);
    assert!(rows
        .iter()
        .all(|r| r.split(',').nth(pass_col) == Some("true")));
}

/// Untrained base and weak checkpoints on the built-in benchmark dimensions.
fn tiny_checkpoints(dir: &Path, num_steps: usize) -> (PathBuf, PathBuf) {
    let arch = ArchConfig {
        hidden: vec![16],
        ..ArchConfig::default()
    };
    let base = BaseModel::new(&arch, 64, 4, num_steps, 5).unwrap();
    let weak = WeakModel::new(
        &ReflectConfig {
            hidden: vec![8, 4],
            ..ReflectConfig::default()
        },
        64,
        num_steps,
        base.cond.clone(),
        6,
    )
    .unwrap();
    let (b, w) = (dir.join("base.ckpt"), dir.join("weak.ckpt"));
    base.save(&b).unwrap();
    weak.save(&w).unwrap();
    (b, w)
}

#[test]
fn unit_w2s_all_slow_replays_cfg_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(
        &cfg,
        json!({"num_steps": 6, "refine": {"samples": 24}}).to_string(),
    )
    .unwrap();
    tiny_checkpoints(tmp.path(), 6);
    let c = cfg.to_str().unwrap();
    let slow = core2(
        &[
            "refine",
            "--config",
            c,
            "--base",
            "base.ckpt",
            "--weak",
            "weak.ckpt",
            "--modes",
            "slow",
            "--omega-w2s",
            "1",
            "--omega-cfg",
            "1.7",
            "--seed",
            "9",
            "--out",
            "slow.jsonl",
        ],
        tmp.path(),
    );
    assert_eq!(slow.status.code(), Some(0), "{}", stderr(&slow));
    let cfg_only = core2(
        &[
            "refine",
            "--config",
            c,
            "--base",
            "base.ckpt",
            "--cfg-only",
            "--omega-cfg",
            "1.7",
            "--seed",
            "9",
            "--out",
            "cfg.jsonl",
        ],
        tmp.path(),
    );
    assert_eq!(cfg_only.status.code(), Some(0), "{}", stderr(&cfg_only));
    let a = std::fs::read(tmp.path().join("slow.jsonl")).unwrap();
    let b = std::fs::read(tmp.path().join("cfg.jsonl")).unwrap();
    assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), 24);
    assert!(a == b, "all-slow unit-W2S samples differ from CFG");
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("slow.jsonl.json")).unwrap())
            .unwrap();
    assert_eq!(sidecar["sampling_seed"], 9);
}

#[test]
fn refine_without_weak_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_checkpoints(tmp.path(), 28);
    let out = core2(
        &["refine", "--base", "base.ckpt", "--samples", "4"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--weak"));
}

fn tiny_run_config() -> serde_json::Value {
    json!({
        "seed": 3,
        "num_steps": 6,
        "base": {"iterations": 30, "batch_size": 16, "arch": {"hidden": [16]}},
        "collect": {"trajectories_per_label": 4},
        "reflect": {"iterations": 20, "batch_size": 16, "hidden": [8, 4]},
        "refine": {"samples": 16},
        "eval": {
            "queries": 64,
            "sweep": {"samples": 32, "projections": 8},
            "omegas_w2s": [1.0, 1.5],
            "spectrum_trajectories": 4,
            "ablation_iterations": [5, 10],
            "theory_seeds": 5
        }
    })
}

#[test]
fn pipeline_rerun_is_cached_and_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, tiny_run_config().to_string()).unwrap();
    let args = [
        "pipeline",
        "--config",
        cfg.to_str().unwrap(),
        "--runs",
        "runs",
    ];
    let first = core2(&args, tmp.path());
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let run_dir = tmp.path().join(
        String::from_utf8(first.stdout.clone())
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    );
    let snapshot = |dir: &Path| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .map(|p| {
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                )
            })
            .collect();
        files.sort();
        files
    };
    let before = snapshot(&run_dir);
    let names: Vec<&str> = before.iter().map(|(n, _)| n.as_str()).collect();
    for expected in [
        "base.ckpt",
        "data.core2ds",
        "weak.ckpt",
        "samples.jsonl",
        "partition_mse.csv",
        "spectrum.csv",
        "tradeoff.csv",
        "w2s_sweep.csv",
        "reflect_ablation.csv",
        "theorem_report.csv",
        "manifest.json",
    ] {
        assert!(names.contains(&expected), "missing {expected} in {names:?}");
    }

    let schema: serde_json::Map<String, serde_json::Value> = serde_json::from_str(
        &std::fs::read_to_string(
            Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/csv_columns.json"),
        )
        .unwrap(),
    )
    .unwrap();
    for (file, columns) in &schema {
        let text = std::fs::read_to_string(run_dir.join(file)).unwrap();
        let mut lines = text.lines();
        let comment = lines.next().unwrap();
        assert!(
            comment.starts_with("# ") && comment.contains("seed 3"),
            "{file}: {comment}"
        );
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        let expected: Vec<&str> = columns
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c.as_str().unwrap())
            .collect();
        assert_eq!(header, expected, "{file}");
    }

    let second = core2(&args, tmp.path());
    assert_eq!(second.status.code(), Some(0), "{}", stderr(&second));
    let err = stderr(&second);
    for stage in ["base", "collect", "reflect", "refine"] {
        assert!(err.contains(&format!("stage {stage} cached")), "{err}");
    }
    assert!(!err.contains("running"), "{err}");
    assert!(before == snapshot(&run_dir), "re-run changed outputs");

    let report = core2(&["report", "--run", run_dir.to_str().unwrap()], tmp.path());
    assert_eq!(report.status.code(), Some(0), "{}", stderr(&report));
    assert!(String::from_utf8(report.stdout)
        .unwrap()
        .contains("partitioned eps mse"));

    // forcing reruns everything; only the manifest's stage timings may move
    let forced = core2(&[&args[..], &["--force"]].concat(), tmp.path());
    assert_eq!(forced.status.code(), Some(0), "{}", stderr(&forced));
    assert!(!stderr(&forced).contains("cached"));
    let after = snapshot(&run_dir);
    let manifest = |files: &[(String, Vec<u8>)]| -> serde_json::Value {
        let (_, bytes) = files.iter().find(|(n, _)| n == "manifest.json").unwrap();
        let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
        v["report"].as_object_mut().unwrap().remove("stage_seconds");
        v
    };
    assert_eq!(manifest(&before), manifest(&after));
    let strip = |files: Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> {
        files
            .into_iter()
            .filter(|(n, _)| n != "manifest.json")
            .collect()
    };
    assert!(
        strip(before) == strip(after),
        "forced re-run changed outputs"
    );
}

#[test]
fn stage_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, tiny_run_config().to_string()).unwrap();
    let c = cfg.to_str().unwrap();
    tiny_checkpoints(tmp.path(), 6);
    let steps: [&[&str]; 4] = [
        &[
            "collect",
            "--config",
            c,
            "--base",
            "base.ckpt",
            "--out",
            "d.core2ds",
        ],
        &[
            "reflect",
            "--config",
            c,
            "--data",
            "d.core2ds",
            "--out",
            "w.ckpt",
        ],
        &[
            "refine",
            "--config",
            c,
            "--base",
            "base.ckpt",
            "--weak",
            "w.ckpt",
            "--zigzag",
            "--out",
            "z.jsonl",
        ],
        &[
            "ablate",
            "--config",
            c,
            "--base",
            "base.ckpt",
            "--data",
            "d.core2ds",
            "--iterations",
            "3,6",
            "--out",
            "a.csv",
        ],
    ];
    for args in steps {
        let out = core2(args, tmp.path());
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", stderr(&out));
    }
    for f in ["d.core2ds.json", "w.ckpt.json", "z.jsonl.json", "a.csv"] {
        assert!(tmp.path().join(f).is_file(), "{f}");
    }
    let ablation = std::fs::read_to_string(tmp.path().join("a.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 4);
}

#[test]
fn oracle_base_with_aliases() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, json!({"num_steps": 6}).to_string()).unwrap();
    tiny_checkpoints(tmp.path(), 6);
    let c = cfg.to_str().unwrap();
    let run = |extra: &[&str], out: &str| {
        let mut args = vec![
            "refine", "--config", c, "--base", "oracle", "--seed", "5", "--out", out,
        ];
        args.extend_from_slice(extra);
        let o = core2(&args, tmp.path());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        std::fs::read(tmp.path().join(out)).unwrap()
    };
    let slow = run(
        &[
            "--weak",
            "weak.ckpt",
            "--mode-schedule",
            "slow",
            "--omega-w2s",
            "1",
            "--n",
            "10",
        ],
        "slow.jsonl",
    );
    let cfg_only = run(&["--cfg-only", "--samples", "10"], "cfg.jsonl");
    assert_eq!(slow.iter().filter(|&&b| b == b'\n').count(), 10);
    assert!(slow == cfg_only);
}
