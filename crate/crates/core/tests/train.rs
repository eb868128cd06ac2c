use gregait::ingest::DatasetManifest;
use gregait::model::build_extractor;
use gregait::synth::{manifest, SynthConfig, SynthFrames};
use gregait::train::{read_log, Checkpoint, LogRecord, RunOutputs, TrainConfig, TrainData, Trainer};

fn tiny() -> (TrainConfig, SynthConfig, DatasetManifest) {
    let scfg = SynthConfig {
        identities: 4,
        frames_per_seq: 4,
        ..SynthConfig::default()
    };
    let m = manifest(&scfg).unwrap();
    let cfg = TrainConfig {
        head_widths: [4, 4, 8, 8],
        gre_channels: 4,
        gre_hidden: 8,
        parts: 4,
        embedding_dim: 8,
        batch_p: 2,
        batch_k: 2,
        batch_l: 2,
        milestones: vec![3],
        total_iters: 6,
        log_interval: 2,
        checkpoint_interval: 3,
        deterministic: true,
        ..TrainConfig::desk()
    };
    (cfg, scfg, m)
}

fn bits(r: &[LogRecord]) -> Vec<[u64; 7]> {
    r.iter()
        .map(|r| {
            let c = r.components();
            [r.lr, c.tri, c.ce, c.rec, c.smo, c.div, r.l_total].map(f64::to_bits)
        })
        .collect()
}

#[test]
fn equal_seeds_give_bitwise_equal_logs() {
    let (cfg, scfg, m) = tiny();
    let src = SynthFrames { cfg: scfg };
    let ex = build_extractor(&cfg, None).unwrap();
    let data = TrainData { manifest: &m, source: &src, extractor: &ex };
    let a = Trainer::new(cfg.clone(), &m).unwrap().run(&data, 5, &RunOutputs::default()).unwrap();
    let b = Trainer::new(cfg, &m).unwrap().run(&data, 5, &RunOutputs::default()).unwrap();
    assert_eq!(a.len(), 5);
    assert_eq!(bits(&a), bits(&b));
    assert!(a.iter().all(|r| r.l_total.is_finite()));
}

#[test]
fn checkpoint_round_trip_and_resume_are_bitwise() {
    let (cfg, scfg, m) = tiny();
    let src = SynthFrames { cfg: scfg };
    let ex = build_extractor(&cfg, None).unwrap();
    let data = TrainData { manifest: &m, source: &src, extractor: &ex };
    let mut t = Trainer::new(cfg, &m).unwrap();
    t.run(&data, 2, &RunOutputs::default()).unwrap();
    let bytes = t.checkpoint().encode().unwrap();
    let decoded = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(decoded.encode().unwrap(), bytes);

    let mut resumed = Trainer::resume(decoded, &m).unwrap();
    assert_eq!(resumed.iteration(), 2);
    let next = t.step(&data).unwrap();
    let again = resumed.step(&data).unwrap();
    assert_eq!(bits(&[next]), bits(&[again]));
    assert_eq!(t.checkpoint().encode().unwrap(), resumed.checkpoint().encode().unwrap());
}

#[test]
fn run_writes_log_and_checkpoints() {
    let (cfg, scfg, m) = tiny();
    let src = SynthFrames { cfg: scfg };
    let ex = build_extractor(&cfg, None).unwrap();
    let data = TrainData { manifest: &m, source: &src, extractor: &ex };
    let dir = tempfile::tempdir().unwrap();
    let outputs = RunOutputs {
        log: Some(dir.path().join("log.jsonl")),
        checkpoint_dir: Some(dir.path().to_path_buf()),
    };
    let records = Trainer::new(cfg, &m).unwrap().run(&data, 100, &outputs).unwrap();
    assert_eq!(records.len(), 6, "capped at total_iters");
    let logged = read_log(&dir.path().join("log.jsonl")).unwrap();
    let iters: Vec<_> = logged.iter().map(|r| r.iter).collect();
    assert_eq!(iters, vec![0, 2, 4, 5]);
    assert_eq!(bits(&logged[..1]), bits(&records[..1]));
    assert_eq!(logged[1].lr, 0.1);
    assert!((logged[2].lr - 0.01).abs() < 1e-15);
    for f in ["ckpt_000003.bin", "ckpt_000006.bin", "last.bin"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let last = Checkpoint::load(&dir.path().join("last.bin")).unwrap();
    assert_eq!(last.iteration, 6);
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise() {
    let (mut cfg, scfg, m) = tiny();
    cfg.lr = 0.0;
    let src = SynthFrames { cfg: scfg };
    let ex = build_extractor(&cfg, None).unwrap();
    let data = TrainData { manifest: &m, source: &src, extractor: &ex };
    let mut t = Trainer::new(cfg, &m).unwrap();
    let snapshot = |t: &Trainer| -> Vec<(String, Vec<u64>)> {
        t.store().params().map(|(n, v)| (n.clone(), v.iter().map(|x| x.to_bits()).collect())).collect()
    };
    let before = snapshot(&t);
    t.run(&data, 3, &RunOutputs::default()).unwrap();
    assert_eq!(before, snapshot(&t));
}

#[test]
fn resume_rejects_a_different_class_count() {
    let (cfg, _, m) = tiny();
    let ck = Trainer::new(cfg, &m).unwrap().checkpoint();
    let bigger = manifest(&SynthConfig { identities: 5, frames_per_seq: 4, ..SynthConfig::default() }).unwrap();
    assert!(Trainer::resume(ck, &bigger).is_err());
}
