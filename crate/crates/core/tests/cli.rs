use std::path::Path;
use std::process::{Command, Output};

use vlt::metrics::EvalReport;

const SMALL: &[&str] = &[
    "--set",
    "model.image_size=32",
    "--set",
    "transformer.dim=8",
    "--set",
    "model.nq=2",
    "--set",
    "data.scenes=3",
    "--set",
    "data.eval_scenes=2",
    "--set",
    "train.batch_size=4",
    "--set",
    "train.steps=2",
];

fn vlt(args: &[&str], extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlt"))
        .args(args)
        .args(extra)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], extra: &[&str]) -> String {
    let out = vlt(args, extra);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_train_eval_infer_dump() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["generate-data", "--out", p(&data)], SMALL);
    assert!(data.join("samples.jsonl").exists());
    assert!(data.join("scenes/000000.ppm").exists());

    ok(&["train", "--out", p(&run), "--dataset", p(&data)], SMALL);
    for f in ["config.txt", "vocab.txt", "train.log", "final.vltw", "final.manifest"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert_eq!(log.lines().nth(1).unwrap().split('\t').count(), 6);

    let ckpt = run.join("final.vltw");
    let report = dir.path().join("report.tsv");
    let stdout = ok(&["eval", "--checkpoint", p(&ckpt), "--dataset", p(&data), "--out", p(&report)], &[]);
    assert!(stdout.starts_with("variant\tmean_iou"));
    let r = EvalReport::parse_tsv(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(!r.mask_eval);
    assert!((0.0..=1.0).contains(&r.mean_iou));
    let masked = EvalReport::parse_tsv(&ok(
        &["eval", "--checkpoint", p(&ckpt), "--dataset", p(&data), "--mask-eval"],
        &[],
    ))
    .unwrap();
    assert!(masked.mask_eval);
    assert_eq!(masked.fingerprint, r.fingerprint);

    let image = data.join("scenes/000000.ppm");
    let inf = dir.path().join("infer");
    ok(
        &["infer", "--checkpoint", p(&ckpt), "--image", p(&image), "--expression", "the red one", "--out", p(&inf), "--raw-logits"],
        &[],
    );
    let (h, w, _) = vlt::raster::decode_pgm(&std::fs::read(inf.join("prob.pgm")).unwrap()).unwrap();
    assert_eq!((h, w), (32, 32));
    assert_eq!(std::fs::read(inf.join("logits.f32")).unwrap().len(), 32 * 32 * 4);
    vlt::raster::read_pbm(&inf.join("mask.pbm")).unwrap();

    let att = dir.path().join("att");
    ok(
        &["dump-attention", "--checkpoint", p(&ckpt), "--image", p(&image), "--expression", "the red one", "--out", p(&att)],
        &[],
    );
    let txt = std::fs::read_to_string(att.join("attention.txt")).unwrap();
    assert!(txt.starts_with("# words\tthe\tred\tone"));
    assert!(att.join("query_words.pgm").exists());
    assert!(att.join("query_01.pgm").exists());
}

#[test]
fn untrained_eval_is_reproducible() {
    let a = EvalReport::parse_tsv(&ok(&["eval"], SMALL)).unwrap();
    let b = EvalReport::parse_tsv(&ok(&["eval"], SMALL)).unwrap();
    assert_eq!(a, b);
    assert!(a.mean_iou < 0.5);
    let c = EvalReport::parse_tsv(&ok(&["eval", "--seed", "7"], SMALL)).unwrap();
    assert_ne!(a.fingerprint, c.fingerprint);
}

#[test]
fn ablate_rows_share_eval_columns() {
    let out = ok(&["ablate", "nq", "--values", "1,2"], SMALL);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    let header: Vec<&str> = lines[0].split('\t').collect();
    let eval = ok(&["eval", "--out", "/dev/null"], SMALL);
    assert_eq!(lines[0], eval.lines().next().unwrap());
    assert!(lines[1].starts_with("model.nq=1\t"));
    assert!(lines[2].starts_with("model.nq=2\t"));
    for l in &lines[1..] {
        assert_eq!(l.split('\t').count(), header.len());
    }
}

#[test]
fn unknown_key_exits_with_usage() {
    let out = vlt(&["eval", "--set", "model.depth=3"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.depth"));
    assert!(err.contains("Usage"));
    let out = vlt(&["ablate", "depth"], SMALL);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grad_check_passes() {
    let out = ok(&["grad-check"], &[]);
    assert!(out.contains(": ok"), "{out}");
}
