use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 10] = [
    "head_widths=[4,4,8,8]",
    "gre_channels=4",
    "gre_hidden=8",
    "parts=4",
    "embedding_dim=8",
    "batch_p=2",
    "batch_k=2",
    "batch_l=2",
    "total_iters=2",
    "milestones=[]",
];

fn gregait(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gregait"))
        .args(args)
        .env_remove("GREGAIT_CACHE_DIR")
        .output()
        .expect("binary runs")
}

fn tiny_sets() -> Vec<String> {
    TINY.iter().flat_map(|s| ["--set".to_string(), s.to_string()]).collect()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(gregait(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(gregait(&["eval", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(gregait(&[]).status.code(), Some(2));
    let help = gregait(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for cmd in ["train", "eval", "cross-eval", "extract", "viz-pca", "viz-cam", "ablate"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn runtime_errors_exit_1_with_diagnostic() {
    let out = gregait(&["train", "--manifest", "/nonexistent/m.json", "--out", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = gregait(&["train", "--manifest", "x.json", "--set", "bogus_field=1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn end_to_end_commands() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&gregait(&["synth", "--out", s(&data), "--identities", "3", "--frames", "2"]));
    let manifest = data.join("manifest.json");
    assert!(manifest.exists());

    let run = dir.path().join("run");
    let mut args = vec!["train", "--manifest", s(&manifest), "--out", s(&run), "--seed", "7"];
    let sets = tiny_sets();
    args.extend(sets.iter().map(String::as_str));
    ok(&gregait(&args));
    for f in ["last.bin", "log.jsonl", "config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 7);
    let ck = run.join("last.bin");

    let report_dir = dir.path().join("report");
    let out = gregait(&["eval", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--out", s(&report_dir)]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("Rank-1"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["protocol"], "synthetic");
    assert!(report_dir.join("report.txt").exists());

    let out = gregait(&["cross-eval", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--protocol", "synthetic"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("domains:"));
    assert!(run.join("report.json").exists(), "defaults to the checkpoint directory");

    let emb = dir.path().join("emb.bin");
    ok(&gregait(&["extract", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--split", "gallery", "--out", s(&emb)]));
    assert!(emb.exists());

    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    let e = &m["entries"][0];
    let key = format!("{}/{}/{}/{}", e["id"].as_str().unwrap(), e["condition"].as_str().unwrap(), e["view"].as_str().unwrap(), e["seq"].as_str().unwrap());

    let pca = dir.path().join("pca");
    ok(&gregait(&["viz-pca", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--sequence", &key, "--out", s(&pca)]));
    for name in ["f_c_000.png", "f_m_001.png", "f_ap_000.png", "f_de_001.png"] {
        assert!(pca.join(name).exists(), "{name}");
    }

    let cam = dir.path().join("cam");
    ok(&gregait(&["viz-cam", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--sequence", &key, "--layer", "head-B1-de", "--out", s(&cam)]));
    assert!(cam.join("head-B1-de_000.png").exists());
    let bad = gregait(&["viz-cam", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--sequence", &key, "--layer", "head-B9", "--out", s(&cam)]);
    assert_eq!(bad.status.code(), Some(1));

    let abl = dir.path().join("abl");
    let mut args = vec!["ablate", "--axis", "denoising", "--manifest", s(&manifest), "--iters", "1", "--out", s(&abl)];
    args.extend(sets.iter().map(String::as_str));
    let out = gregait(&args);
    ok(&out);
    let table = String::from_utf8_lossy(&out.stdout);
    for row in ["full", "no-smooth", "no-div", "neither"] {
        assert!(table.lines().any(|l| l.starts_with(row)), "{row} missing:\n{table}");
    }
    assert!(abl.join("ablation.json").exists());
}
