use std::path::Path;
use std::process::Command;

use serde_json::Value;

const TINY: &str = "\
corpus.size=240
corpus.topics=6
model.hidden_dim=16
model.layers=1
model.heads=2
model.ffn_dim=32
model.latent_dim=8
train.steps=12
train.batch_size=8
train.pretrain_steps=4
train.warmup_steps=6
scorer.emotion_steps=10
scorer.coherence_steps=10
scorer.lm_steps=10
eval.max_posts=2
eval.emotions=happiness,sadness
eval.candidates=2
eval.beam_size=2
eval.max_len=6
eval.sweep_min=0.2
eval.sweep_max=1.2
eval.sweep_step=0.1
ablate.variants=EMO_CVAE,SEQ2SEQ
ablate.seeds=1
";

fn emocvae(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_emocvae"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) {
    let out = emocvae(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_writes_artifacts_and_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let (data, run, scorers, gen, eval, lat, abl) = (
        root.join("data"),
        root.join("run"),
        root.join("scorers"),
        root.join("gen"),
        root.join("eval"),
        root.join("lat"),
        root.join("abl"),
    );

    run_ok(&["synth-data", "--config", s(&cfg), "--out", s(&data)]);
    for f in ["train.tsv", "dev.tsv", "test.tsv", "vocab.txt"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let m = manifest(&data);
    assert_eq!(m["command"], "synth-data");
    assert_eq!(m["config"]["corpus.size"], "240");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 4);
    assert_eq!(m["outputs"][0]["sha256"].as_str().unwrap().len(), 64);

    run_ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--seed",
        "5",
        "--out",
        s(&run),
    ]);
    let m = manifest(&run);
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config"]["train.seed"], "5");
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 13);
    let model = run.join("model.ckpt");

    run_ok(&[
        "train-scorers",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&scorers),
    ]);
    for f in ["emotion.ckpt", "coherence.ckpt", "lm.ckpt", "scorers.json"] {
        assert!(scorers.join(f).exists(), "{f}");
    }

    run_ok(&[
        "generate",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--model",
        s(&model),
        "--out",
        s(&gen),
    ]);
    let cands = std::fs::read_to_string(gen.join("candidates.tsv")).unwrap();
    assert_eq!(cands.lines().count(), 2 * 2 * 2);

    let cand_path = gen.join("candidates.tsv");
    run_ok(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--model",
        s(&model),
        "--scorers",
        s(&scorers),
        "--candidates",
        s(&cand_path),
        "--out",
        s(&eval),
    ]);
    let sweep = std::fs::read_to_string(eval.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 11);
    let report = std::fs::read_to_string(eval.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);
    assert!(report.lines().nth(1).unwrap().starts_with("reranked,"));
    let m = manifest(&eval);
    let inputs: Vec<&str> = m["inputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["path"].as_str().unwrap())
        .collect();
    assert!(inputs.iter().any(|p| p.ends_with("candidates.tsv")));
    assert!(inputs.iter().any(|p| p.ends_with("model.ckpt")));

    run_ok(&[
        "dump-latents",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--model",
        s(&model),
        "--out",
        s(&lat),
    ]);
    let dump = std::fs::read_to_string(lat.join("latents.tsv")).unwrap();
    assert!(dump.starts_with("latent_dim=8"));
    assert!(lat.join("projection.tsv").exists());

    run_ok(&[
        "ablate",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--scorers",
        s(&scorers),
        "--out",
        s(&abl),
    ]);
    let csv = std::fs::read_to_string(abl.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let data = root.join("data");
    run_ok(&["synth-data", "--config", s(&cfg), "--out", s(&data)]);
    let (a, b) = (root.join("a"), root.join("b"));
    for dir in [&a, &b] {
        run_ok(&[
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&data),
            "--out",
            s(dir),
        ]);
    }
    for f in ["model.ckpt", "metrics.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let digests = |dir: &Path| {
        manifest(dir)["outputs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|o| o["sha256"].clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(digests(&a), digests(&b));
}

#[test]
fn rejects_bad_input_with_nonzero_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let out = emocvae(&[
        "synth-data",
        "--set",
        "no.such.key=1",
        "--out",
        s(&root.join("x")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));

    let out = emocvae(&[
        "train",
        "--data",
        s(&root.join("missing")),
        "--out",
        s(&root.join("y")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn vocabulary_mismatch_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let (d1, d2, run) = (root.join("d1"), root.join("d2"), root.join("run"));
    run_ok(&["synth-data", "--config", s(&cfg), "--out", s(&d1)]);
    run_ok(&[
        "synth-data",
        "--config",
        s(&cfg),
        "--set",
        "corpus.topics=3",
        "--out",
        s(&d2),
    ]);
    run_ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&d1),
        "--out",
        s(&run),
    ]);
    let out = emocvae(&[
        "generate",
        "--config",
        s(&cfg),
        "--data",
        s(&d2),
        "--model",
        s(&run.join("model.ckpt")),
        "--out",
        s(&root.join("g")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary"));
}
