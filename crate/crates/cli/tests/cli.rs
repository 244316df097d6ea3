use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pointfuse::ca_decoder::AttentionMaps;
use pointfuse::training::{Checkpoint, Stage};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointfuse"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dataset(dir: &Path, count: &str, seed: &str) {
    ok(&[
        "dataset",
        "--out",
        s(dir),
        "--count",
        count,
        "--n",
        "256",
        "--image-size",
        "32",
        "--seed",
        seed,
    ]);
}

fn train(data: &Path, out: &Path, stage: &str, extra: &[&str]) -> String {
    let mut args = vec![
        "train",
        "--data",
        s(data),
        "--preset",
        "tiny",
        "--stage",
        stage,
        "--epochs",
        "2",
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

fn sorted_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn dataset_layout_and_determinism() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&[
        "dataset",
        "--out",
        s(&a),
        "--count",
        "4",
        "--shapes",
        "sphere",
        "--n",
        "300",
    ]);
    ok(&[
        "dataset",
        "--out",
        s(&b),
        "--count",
        "4",
        "--shapes",
        "sphere",
        "--n",
        "300",
    ]);
    let files = sorted_files(&a);
    assert_eq!(files.iter().filter(|(n, _)| n.ends_with(".xyz")).count(), 4);
    assert_eq!(files.iter().filter(|(n, _)| n.ends_with(".pgm")).count(), 4);
    let manifest = fs::read_to_string(a.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
    assert_eq!(files, sorted_files(&b));
}

#[test]
fn usage_errors_exit_with_two() {
    let t = tempfile::tempdir().unwrap();
    let missing = run(&[
        "train",
        "--data",
        s(&t.path().join("nowhere")),
        "--stage",
        "1",
        "--out",
        "x",
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("manifest.csv"));

    let bad_shape = run(&["dataset", "--out", s(t.path()), "--shapes", "cone"]);
    assert_eq!(bad_shape.status.code(), Some(2));
    assert_eq!(run(&["train", "--stage", "1"]).status.code(), Some(2));

    let data = t.path().join("d");
    dataset(&data, "1", "0");
    let unknown = run(&[
        "train",
        "--data",
        s(&data),
        "--set",
        "bogus=1",
        "--stage",
        "1",
        "--out",
        "x",
    ]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("bogus"));
}

#[test]
fn indivisible_image_size_is_refused() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    ok(&[
        "dataset",
        "--out",
        s(&data),
        "--count",
        "1",
        "--n",
        "300",
        "--image-size",
        "60",
    ]);
    let out = run(&[
        "train",
        "--data",
        s(&data),
        "--preset",
        "base",
        "--stage",
        "1",
        "--out",
        s(&t.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("not divisible"), "{err}");
}

#[test]
fn staged_training_reconstruct_and_eval() {
    let t = tempfile::tempdir().unwrap();
    let p = |n: &str| t.path().join(n);
    let data = p("data");
    dataset(&data, "3", "4");
    let stdout = train(&data, &p("s1.ckpt"), "1", &[]);
    assert!(stdout.contains("# resolved config\npreset = tiny"));
    train(&data, &p("s2.ckpt"), "2", &["--resume", s(&p("s1.ckpt"))]);
    let ck = Checkpoint::load(p("s2.ckpt")).unwrap();
    assert!(ck.checksum_ok);
    assert_eq!(ck.checkpoint.stage, Some(Stage::Two));
    assert_eq!(ck.checkpoint.epoch, 4);
    let log = fs::read_to_string(p("s2.csv")).unwrap();
    assert_eq!(log, log.lines().take(3).map(|l| format!("{l}\n")).collect::<String>());
    assert!(log.starts_with("epoch,stage,loss\n3,2,"));

    // Running stage 1 after stage 2 needs the override.
    let regress = run(&[
        "train",
        "--data",
        s(&data),
        "--stage",
        "1",
        "--resume",
        s(&p("s2.ckpt")),
        "--out",
        s(&p("r.ckpt")),
    ]);
    assert_eq!(regress.status.code(), Some(2));

    let cloud = data.join("sphere_0000.xyz");
    let image = data.join("sphere_0000.pgm");
    for run_id in ["a", "b"] {
        ok(&[
            "reconstruct",
            "--ckpt",
            s(&p("s2.ckpt")),
            "--cloud",
            s(&cloud),
            "--image",
            s(&image),
            "--mask-seed",
            "9",
            "--out",
            s(&p(&format!("{run_id}.xyz"))),
            "--dump-attn",
            s(&p(&format!("{run_id}.attn"))),
        ]);
    }
    let recon = fs::read_to_string(p("a.xyz")).unwrap();
    assert_eq!(recon.lines().count(), 16 * 8);
    assert_eq!(fs::read(p("a.xyz")).unwrap(), fs::read(p("b.xyz")).unwrap());
    assert_eq!(fs::read(p("a.attn")).unwrap(), fs::read(p("b.attn")).unwrap());
    assert_eq!(fs::read_to_string(p("a.input.xyz")).unwrap().lines().count(), 5 * 8);
    let maps = AttentionMaps::load(p("a.attn")).unwrap();
    assert!(maps.max_row_deviation() < 1e-6);

    // A stage-1 checkpoint has no cross-attention to export.
    let no_attn = run(&[
        "reconstruct",
        "--ckpt",
        s(&p("s1.ckpt")),
        "--cloud",
        s(&cloud),
        "--out",
        s(&p("c.xyz")),
        "--dump-attn",
        s(&p("c.attn")),
    ]);
    assert_eq!(no_attn.status.code(), Some(2));

    for out in ["e1.csv", "e2.csv"] {
        ok(&[
            "eval",
            "--ckpt",
            s(&p("s2.ckpt")),
            "--data",
            s(&data),
            "--out",
            s(&p(out)),
        ]);
    }
    let csv = fs::read_to_string(p("e1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("sample_id,chamfer_l2sq,chamfer_l1\n"));
    assert_eq!(csv, fs::read_to_string(p("e2.csv")).unwrap());

    ok(&[
        "eval",
        "--ckpt",
        s(&p("s2.ckpt")),
        "--data",
        s(&data),
        "--out",
        s(&p("id.csv")),
        "--identity-bypass",
        "--set",
        "mask_ratio=0",
    ]);
    for line in fs::read_to_string(p("id.csv")).unwrap().lines().skip(1) {
        let f: Vec<f64> = line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert!(f.iter().all(|v| v.abs() <= 1e-9), "{line}");
    }
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    dataset(&data, "1", "0");
    let ck = t.path().join("m.ckpt");
    train(&data, &ck, "1", &[]);
    let mut bytes = fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&ck, bytes).unwrap();
    let out = run(&[
        "eval",
        "--ckpt",
        s(&ck),
        "--data",
        s(&data),
        "--out",
        s(&t.path().join("e.csv")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

#[test]
fn tokenize_writes_the_partition() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    dataset(&data, "1", "0");
    let out = t.path().join("tok");
    ok(&[
        "tokenize",
        "--cloud",
        s(&data.join("sphere_0000.xyz")),
        "--preset",
        "tiny",
        "--out",
        s(&out),
    ]);
    let lines = |n: &str| fs::read_to_string(out.join(n)).unwrap().lines().count();
    assert_eq!(lines("centers.xyz"), 16);
    assert_eq!(lines("visible.xyz") + lines("masked.xyz"), 16 * 8);
}

#[test]
fn selftest_passes_and_catches_injected_fault() {
    let good = run(&["selftest"]);
    let text = String::from_utf8_lossy(&good.stdout);
    assert_eq!(good.status.code(), Some(0), "{text}");
    assert!(!text.contains("FAIL"));
    let bad = run(&["selftest", "--inject-fault"]);
    let text = String::from_utf8_lossy(&bad.stdout);
    assert_eq!(bad.status.code(), Some(1));
    assert!(text.contains("FAIL op gradients"), "{text}");
    assert!(text.contains("FAIL model gradients"), "{text}");
    assert!(text.contains("PASS fps matches greedy oracle"));
}
