mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use fbdiff_cli::{
    cmd_eval, cmd_preprocess, cmd_report, cmd_synth, cmd_train, config_help, env_overrides, exit_code,
    parse_from, resolve_config, PreprocessStats, EVAL_JSON, PREPROCESS_STATS, PROCESSED_DIR,
};
use fbdiff_core::config::{DatasetSource, PhaseConfig, RunConfig, SyntheticSource};
use fbdiff_core::data::io::{read_image, write_image};
use fbdiff_core::data::load_dataset;
use fbdiff_core::detectors::synth::toy_vocabulary;
use fbdiff_core::detectors::SceneSampler;
use fbdiff_core::evaluation::{gaze_cases, EvalReport};
use fbdiff_core::losses::crop_box;
use fbdiff_core::policy::{FeedbackConfig, LossTerm};
use fbdiff_core::train::{read_loss_log, StepRecord, LOSS_LOG};
use fbdiff_core::Tape;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fbdiff"))
}

fn tiny_config(steps: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.batch_size = 2;
    c.phases = vec![PhaseConfig {
        name: "only".into(),
        steps,
        dataset: DatasetSource::Synthetic(SyntheticSource {
            count: 8,
            seed: 3,
            scene: SceneSampler::default(),
        }),
    }];
    c
}

fn synth(out: &Path, count: usize) -> PathBuf {
    cmd_synth(&RunConfig::default(), count, 11, out).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_lists_every_config_key() {
    let text = config_help();
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let help = String::from_utf8(out.stdout).unwrap();
    for (key, _) in RunConfig::documented_keys() {
        assert!(text.contains(&format!("  {key} = ")), "{key}");
        assert!(help.contains(&key), "{key} missing from --help");
    }
    for cmd in ["preprocess", "train", "profile", "eval", "report"] {
        assert!(help.contains(cmd));
    }
}

#[test]
fn environment_and_flag_overrides() {
    let env = env_overrides([
        ("FBDIFF_OPTIM__LR_BODY".to_string(), "0.5".to_string()),
        ("FBDIFF_BATCH_SIZE".to_string(), "3".to_string()),
        ("HOME".to_string(), "/root".to_string()),
    ]);
    assert_eq!(
        env,
        [
            ("batch_size".to_string(), "3".to_string()),
            ("optim.lr_body".to_string(), "0.5".to_string())
        ]
    );
    let cli = parse_from(["fbdiff", "--set", "batch_size=5", "--seed", "9", "report"]).unwrap();
    let (cfg, _) = resolve_config(&cli.global, &env).unwrap();
    assert_eq!(cfg.optim.lr_body, 0.5);
    // flags win over the environment
    assert_eq!(cfg.batch_size, 5);
    assert_eq!(cfg.seed, 9);

    let bad = vec![("optim.lr_body".to_string(), "fast".to_string())];
    let err = resolve_config(&cli.global, &bad).unwrap_err();
    assert_eq!(exit_code(&err.into()), 2);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--out", dir.path().to_str().unwrap(), "--set", "no.such.key=1", "report"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args(["--out", dir.path().to_str().unwrap(), "train", "--phase", "missing"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "batch_size = \"many\"\n").unwrap();
    let out = bin()
        .args(["--out", dir.path().to_str().unwrap(), "--config", cfg.to_str().unwrap(), "report"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(bin().arg("--no-such-flag").output().unwrap().status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = bin()
        .args(["--out", dir.path().to_str().unwrap(), "preprocess", "--manifest", missing.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn diverging_training_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, tiny_config(5).to_toml_string().unwrap()).unwrap();
    let out = bin()
        .args([
            "--out",
            dir.path().join("out").to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "optim.lr_body=1e300",
            "--set",
            "optim.clip_norm=1e300",
            "train",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn preprocess_of_an_empty_manifest_warns_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("empty.jsonl");
    fs::write(&manifest, "").unwrap();
    let out = dir.path().join("out");
    let status = bin()
        .args(["--out", out.to_str().unwrap(), "preprocess", "--manifest", manifest.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("warning"));
    let written = fs::read_to_string(out.join(PROCESSED_DIR).join("manifest.jsonl")).unwrap();
    assert!(written.trim().is_empty());
    let stats: PreprocessStats =
        serde_json::from_str(&fs::read_to_string(out.join(PREPROCESS_STATS)).unwrap()).unwrap();
    assert_eq!(stats.samples, 0);
}

#[test]
fn preprocess_is_idempotent_and_counts_match_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 12);
    let cfg = RunConfig::default();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let stats = cmd_preprocess(&cfg, &manifest, &a).unwrap();
    cmd_preprocess(&cfg, &manifest, &b).unwrap();
    // and again into the same directory
    cmd_preprocess(&cfg, &manifest, &b).unwrap();
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    // walk the raw records independently
    let (mut samples, mut subjects, mut faces, mut gaze, mut interactions) = (0, 0, 0, 0, 0);
    for line in fs::read_to_string(&manifest).unwrap().lines().filter(|l| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).unwrap();
        samples += 1;
        let subs = v["subjects"].as_array().cloned().unwrap_or_default();
        subjects += subs.len();
        faces += subs.iter().filter(|s| !s["face_bbox"].is_null()).count();
        gaze += v["gaze"].as_array().map_or(0, Vec::len);
        interactions += v["interactions"].as_array().map_or(0, Vec::len);
    }
    assert_eq!(stats.samples, samples);
    assert_eq!(stats.subjects + stats.dropped.subjects, subjects);
    assert_eq!(stats.faces + stats.dropped.faces, faces);
    assert_eq!(stats.gaze + stats.dropped.gaze, gaze);
    assert!(stats.interactions <= interactions);
    assert_eq!(stats.config_hash, cfg.hash());
    let processed = load_dataset(&a.join(PROCESSED_DIR).join("manifest.jsonl"), &toy_vocabulary()).unwrap();
    assert_eq!(processed.len(), samples);
}

fn without_hash(log: Vec<StepRecord>) -> Vec<StepRecord> {
    log.into_iter()
        .map(|mut r| {
            r.config_hash.clear();
            r
        })
        .collect()
}

#[test]
fn zero_lambdas_log_what_the_baseline_logs() {
    let dir = tempfile::tempdir().unwrap();
    let mut zero = tiny_config(6);
    for term in LossTerm::AUXILIARY {
        zero.feedback.lambdas.insert(term, 0.0);
    }
    let mut baseline = tiny_config(6);
    baseline.feedback = FeedbackConfig::baseline(1000);
    baseline.feedback.lambdas.clear();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_train(&zero, None, None, None, &a).unwrap();
    cmd_train(&baseline, None, None, None, &b).unwrap();
    let la = read_loss_log(&a.join(LOSS_LOG)).unwrap();
    let lb = read_loss_log(&b.join(LOSS_LOG)).unwrap();
    assert_eq!(la.len(), 6);
    assert_eq!(without_hash(la), without_hash(lb));
}

#[test]
fn forced_high_noise_run_logs_gated_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config(3);
    for term in LossTerm::AUXILIARY {
        c.feedback.lambdas.insert(term, 1.0);
    }
    c.forced_t = Some(900);
    cmd_train(&c, None, None, None, dir.path()).unwrap();
    for r in read_loss_log(&dir.path().join(LOSS_LOG)).unwrap() {
        for term in [LossTerm::Gaze, LossTerm::Id, LossTerm::Interaction, LossTerm::Pose] {
            assert_eq!(r.breakdown.get(term), 0.0);
            assert!(!r.breakdown.active.contains(&term));
        }
    }
}

#[test]
fn two_hundred_steps_reduce_the_denoise_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = RunConfig::default();
    c.phases.truncate(1);
    c.phases[0].steps = 200;
    let summary = cmd_train(&c, None, None, None, dir.path()).unwrap();
    assert_eq!(summary.steps, 200);
    let d: Vec<f64> = read_loss_log(&dir.path().join(LOSS_LOG))
        .unwrap()
        .iter()
        .map(|r| r.breakdown.get(LossTerm::Denoise))
        .collect();
    let early = d[..10].iter().sum::<f64>() / 10.0;
    let late = d[d.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(late <= 0.7 * early, "{early} -> {late}");
    let report = cmd_report(dir.path()).unwrap();
    assert!(report.contains("loss log: 200 steps"));
}

#[test]
fn phase_selection_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config(2);
    c.phases.push(PhaseConfig {
        name: "second".into(),
        ..c.phases[0].clone()
    });
    let full = dir.path().join("full");
    let summary = cmd_train(&c, None, None, None, &full).unwrap();
    assert_eq!(summary.steps, 4);
    let only = dir.path().join("only");
    let summary = cmd_train(&c, None, Some("second"), None, &only).unwrap();
    assert_eq!(summary.steps, 2);
    let log = read_loss_log(&only.join(LOSS_LOG)).unwrap();
    assert!(log.iter().all(|r| r.phase == "second"));
}

#[test]
fn evaluating_references_against_themselves() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 10);
    let refs = load_dataset(&manifest, &toy_vocabulary()).unwrap();
    let gen = dir.path().join("gen");
    fs::create_dir_all(&gen).unwrap();
    for r in &refs {
        write_image(&gen.join(format!("{}.png", r.id)), &r.image).unwrap();
    }
    let out = dir.path().join("out");
    fs::create_dir_all(&out).unwrap();
    let report = cmd_eval(&RunConfig::default(), None, &gen, &manifest, Some(&manifest), &out).unwrap();
    let cos = report.facial_cos_sim.unwrap();
    // stored reference embeddings are f32
    assert!((cos - 1.0).abs() < 1e-6, "{cos}");
    if report.counts.gaze_correct + report.counts.gaze_incorrect > 0 {
        assert_eq!(report.gaze_accuracy, Some(100.0));
    }
    let saved: EvalReport = serde_json::from_str(&fs::read_to_string(out.join(EVAL_JSON)).unwrap()).unwrap();
    assert_eq!(saved, report);
    assert!(cmd_report(&out).unwrap().contains("evaluation"));
}

#[test]
fn empty_generated_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 2);
    let gen = dir.path().join("gen");
    fs::create_dir_all(&gen).unwrap();
    let err = cmd_eval(&RunConfig::default(), None, &gen, &manifest, None, dir.path()).unwrap_err();
    assert_eq!(exit_code(&err), 3);
    let err = cmd_eval(&RunConfig::default(), None, &dir.path().join("absent"), &manifest, None, dir.path())
        .unwrap_err();
    assert_eq!(exit_code(&err), 3);
}

#[test]
fn crafted_corpus_matches_the_oracle_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 12);
    let refs = load_dataset(&manifest, &toy_vocabulary()).unwrap();
    // every generated image is another scene's reference, blended with its own
    let gen = dir.path().join("gen");
    fs::create_dir_all(&gen).unwrap();
    for (i, r) in refs.iter().enumerate() {
        let other = refs[(i + 1) % refs.len()].image.tensor();
        let mixed = r.image.tensor().zip_map(other, |a, b| 0.5 * a + 0.5 * b);
        let img = fbdiff_core::diffusion::ImageGrid::new(mixed).unwrap();
        write_image(&gen.join(format!("{}.png", r.id)), &img).unwrap();
    }
    let cfg = RunConfig::default();
    let out = dir.path().join("out");
    fs::create_dir_all(&out).unwrap();
    let report = cmd_eval(&cfg, None, &gen, &manifest, Some(&manifest), &out).unwrap();

    let det = cfg.adapters.build().unwrap();
    let mut dets = Vec::new();
    let mut ref_faces = Vec::new();
    let mut gen_faces = Vec::new();
    let mut raw_gaze = Vec::new();
    let mut counts = vec![0usize; toy_vocabulary().len()];
    for (i, r) in refs.iter().enumerate() {
        let img = read_image(&gen.join(format!("{}.png", r.id))).unwrap();
        let tape = Tape::new();
        let g = tape.constant(img.tensor().clone());
        for d in det.hoi.predict(g).unwrap().detections {
            dets.push((d.class_id, d.score, i));
        }
        let (boxes, ids) = r.faces_with_identity();
        ref_faces.push(ids.iter().map(|e| e.values().to_vec()).collect::<Vec<_>>());
        gen_faces.push(
            boxes
                .iter()
                .map(|b| {
                    let v = det.face.embed(crop_box(g, b)).unwrap().value().data().to_vec();
                    fbdiff_core::losses::IdentityEmbedding::normalized(v).unwrap().values().to_vec()
                })
                .collect::<Vec<_>>(),
        );
        for c in gaze_cases(&img, r, &det).unwrap() {
            raw_gaze.push((
                c.target_labels.into_iter().collect::<Vec<_>>(),
                c.generated_boxes
                    .into_iter()
                    .map(|(l, b)| (l, [b.x_min, b.y_min, b.x_max, b.y_max]))
                    .collect(),
                c.predicted,
            ));
        }
        for &c in &r.hoi_labels.0 {
            counts[c] += 1;
        }
    }
    let gt: Vec<BTreeSet<usize>> = refs.iter().map(|r| r.hoi_labels.0.clone()).collect();
    let rare: BTreeSet<usize> = (0..counts.len()).filter(|&c| counts[c] < 10).collect();
    let (full, rare_map, non_rare) = common::oracle_map(&dets, &gt, &rare);
    assert_eq!((report.map_full, report.map_rare, report.map_non_rare), (full, rare_map, non_rare));
    assert_eq!(report.facial_cos_sim, common::oracle_identity(&ref_faces, &gen_faces));
    let (c, i, e, pct) = common::oracle_gaze(&raw_gaze);
    assert_eq!(
        (report.counts.gaze_correct, report.counts.gaze_incorrect, report.counts.gaze_excluded),
        (c, i, e)
    );
    assert_eq!(report.gaze_accuracy, pct);
    assert_eq!(report.counts.detections, dets.len());
    assert!(report.facial_cos_sim.is_some());
}

#[test]
fn end_to_end_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, tiny_config(2).to_toml_string().unwrap()).unwrap();
    let o = out.to_str().unwrap();
    let c = cfg.to_str().unwrap();
    let run = |args: &[&str]| {
        let r = bin().args(["--out", o, "--config", c]).args(args).output().unwrap();
        assert!(r.status.success(), "{args:?}: {}", String::from_utf8_lossy(&r.stderr));
        r
    };
    run(&["synth", "--count", "3"]);
    let manifest = out.join("synthetic").join("manifest.jsonl");
    run(&["preprocess", "--manifest", manifest.to_str().unwrap()]);
    run(&["train"]);
    let ckpt = fs::read_dir(out.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .max()
        .unwrap();
    run(&["sample", "--checkpoint", ckpt.to_str().unwrap(), "--reference", manifest.to_str().unwrap()]);
    run(&["profile", "--t-grid", "0,500,999", "--oracle"]);
    run(&[
        "eval",
        "--generated",
        out.join("generated").to_str().unwrap(),
        "--reference",
        manifest.to_str().unwrap(),
        "--train-manifest",
        manifest.to_str().unwrap(),
    ]);
    let r = run(&["report"]);
    let text = String::from_utf8(r.stdout).unwrap();
    assert!(text.contains("loss log: 2 steps"), "{text}");
    for f in ["curves.csv", "curves.svg", "profile.json", "eval_report.json", "train_summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert!(csv.starts_with("# config_hash: "));
}
