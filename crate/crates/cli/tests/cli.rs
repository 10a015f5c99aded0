use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use specmimic::dsp::BINS;
use specmimic::io::{self, Manifest, Split};
use specmimic::tensor::Tensor;
use specmimic::training::data::features;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_specmimic"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small corpus plus a trained classifier and mapper, shared by tests.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    cls: PathBuf,
    mapper: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("corpus");
        ok(&[
            "synth-data",
            "--out",
            s(&data),
            "--train",
            "8",
            "--dev",
            "4",
            "--test",
            "2",
            "--classes",
            "6",
            "--seed",
            "5",
        ]);
        let cls = root.join("cls.ck");
        ok(&[
            "train-classifier",
            "--arch",
            "dnn",
            "--data",
            s(&data),
            "--out",
            s(&cls),
            "--epochs",
            "3",
            "--lr",
            "1e-3",
        ]);
        let mapper = root.join("map.ck");
        ok(&[
            "pretrain-mapper",
            "--arch",
            "dnn",
            "--data",
            s(&data),
            "--out",
            s(&mapper),
            "--epochs",
            "4",
        ]);
        Fixture {
            _dir: dir,
            root,
            data,
            cls,
            mapper,
        }
    })
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_data_is_reproducible_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let printed = ok(&[
            "synth-data",
            "--out",
            s(d),
            "--train",
            "4",
            "--dev",
            "2",
            "--test",
            "2",
            "--seed",
            "7",
        ]);
        assert_eq!(printed.trim(), s(&d.join(Manifest::FILE_NAME)));
    }
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
    assert_eq!(code(&["synth-data", "--out", s(&a), "--train", "0"]), 2);
    assert_eq!(code(&["synth-data", "--out", s(&a), "--classes", "x"]), 2);
}

#[test]
fn synth_data_defaults_give_full_split_sizes() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth-data", "--out", s(dir.path())]);
    let m = Manifest::read(&dir.path().join(Manifest::FILE_NAME)).unwrap();
    let sizes: Vec<usize> = Split::ALL.iter().map(|&sp| m.split(sp).len()).collect();
    assert_eq!(sizes, [200, 69, 55]);
    assert_eq!(m.header["classes"], "40");
}

#[test]
fn usage_and_io_exit_codes() {
    let f = fixture();
    let out = f.root.join("never.ck");
    assert_eq!(
        code(&[
            "train-classifier",
            "--arch",
            "cnn",
            "--data",
            s(&f.data),
            "--out",
            s(&out)
        ]),
        2
    );
    assert_eq!(
        code(&[
            "pretrain-mapper",
            "--arch",
            "dnn",
            "--data",
            s(&f.data),
            "--out",
            s(&out),
            "--lr-mode",
            "sideways"
        ]),
        2
    );
    assert_eq!(
        code(&[
            "train-classifier",
            "--arch",
            "dnn",
            "--data",
            "/no/such/corpus",
            "--out",
            s(&out)
        ]),
        3
    );
    assert_eq!(
        code(&[
            "train-classifier",
            "--arch",
            "dnn",
            "--data",
            s(&f.data),
            "--out",
            s(&out),
            "--set",
            "bogus=1"
        ]),
        2
    );
    assert_eq!(
        code(&[
            "enhance",
            "--mapper",
            s(&f.mapper),
            "--in",
            "/no/such.wav",
            "--out",
            s(&out)
        ]),
        3
    );
    assert_eq!(
        code(&[
            "export-spectrogram",
            "--in",
            "/no/such.smap",
            "--out",
            s(&out)
        ]),
        3
    );
    assert!(!out.exists());
}

#[test]
fn corrupt_checkpoints_fail_cleanly() {
    let f = fixture();
    let bytes = std::fs::read(&f.mapper).unwrap();
    let bad = f.root.join("trunc.ck");
    std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    let out = f.root.join("x.smap");
    let wav = first_noisy(f);
    assert_eq!(
        code(&[
            "enhance",
            "--mapper",
            s(&bad),
            "--in",
            s(&wav),
            "--out",
            s(&out)
        ]),
        3
    );
    let mut flipped = bytes.clone();
    flipped[40] ^= 0xFF;
    std::fs::write(&bad, &flipped).unwrap();
    let r = run(&[
        "enhance",
        "--mapper",
        s(&bad),
        "--in",
        s(&wav),
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("corrupt"));
}

#[test]
fn role_and_architecture_mismatches_exit_5() {
    let f = fixture();
    let out = f.root.join("mm.ck");
    assert_eq!(
        code(&[
            "train-mimic",
            "--mapper",
            s(&f.cls),
            "--classifier",
            s(&f.cls),
            "--data",
            s(&f.data),
            "--out",
            s(&out)
        ]),
        5
    );
    assert_eq!(
        code(&[
            "pretrain-mapper",
            "--arch",
            "resnet",
            "--init",
            s(&f.mapper),
            "--data",
            s(&f.data),
            "--out",
            s(&out)
        ]),
        5
    );
    // A classifier whose width disagrees with the corpus.
    let other = f.root.join("other");
    ok(&[
        "synth-data",
        "--out",
        s(&other),
        "--train",
        "2",
        "--dev",
        "1",
        "--test",
        "1",
        "--classes",
        "9",
    ]);
    assert_eq!(
        code(&[
            "train-mimic",
            "--mapper",
            s(&f.mapper),
            "--classifier",
            s(&f.cls),
            "--data",
            s(&other),
            "--out",
            s(&out)
        ]),
        5
    );
    let narrow = f.root.join("narrow.smap");
    io::write_smap(&narrow, &Tensor::zeros([4, 10])).unwrap();
    assert_eq!(
        code(&[
            "enhance",
            "--mapper",
            s(&f.mapper),
            "--in",
            s(&narrow),
            "--out",
            s(&out)
        ]),
        5
    );
}

#[test]
fn divergence_exits_4() {
    let f = fixture();
    let out = f.root.join("div.ck");
    assert_eq!(
        code(&[
            "pretrain-mapper",
            "--arch",
            "dnn",
            "--data",
            s(&f.data),
            "--out",
            s(&out),
            "--epochs",
            "3",
            "--lr",
            "1e5"
        ]),
        4
    );
}

#[test]
fn config_file_is_overridden_by_flags_and_echoed() {
    let f = fixture();
    let cfg = f.root.join("run.cfg");
    std::fs::write(&cfg, "# desk run\nlr0=0.002\nepochs=1\nhidden=12\n").unwrap();
    let out = f.root.join("cfg.ck");
    ok(&[
        "pretrain-mapper",
        "--arch",
        "dnn",
        "--data",
        s(&f.data),
        "--out",
        s(&out),
        "--config",
        s(&cfg),
        "--lr",
        "0.003",
    ]);
    let ck = io::read_checkpoint(&out).unwrap();
    assert_eq!(ck.config_value("train.lr0"), Some("0.003"));
    assert_eq!(ck.config_value("train.epochs"), Some("1"));
    assert_eq!(ck.config_value("hidden"), Some("12"));
    assert_eq!(ck.config_value("kind"), Some("model"));
    assert_eq!(ck.tensor("mapper/fc1/w").map(|t| t.dims()[1]), Some(12));
}

#[test]
fn train_mimic_keeps_classifier_file_and_alpha_zero_matches_pretraining() {
    let f = fixture();
    let before = std::fs::read(&f.cls).unwrap();
    let mim = f.root.join("mim0.ck");
    ok(&[
        "train-mimic",
        "--mapper",
        s(&f.mapper),
        "--classifier",
        s(&f.cls),
        "--data",
        s(&f.data),
        "--out",
        s(&mim),
        "--alpha",
        "0",
        "--epochs",
        "2",
        "--seed",
        "4",
    ]);
    assert_eq!(before, std::fs::read(&f.cls).unwrap());
    let cont = f.root.join("cont.ck");
    ok(&[
        "pretrain-mapper",
        "--arch",
        "dnn",
        "--init",
        s(&f.mapper),
        "--data",
        s(&f.data),
        "--out",
        s(&cont),
        "--epochs",
        "2",
        "--seed",
        "4",
    ]);
    let a = io::read_checkpoint(&mim).unwrap();
    let b = io::read_checkpoint(&cont).unwrap();
    assert_eq!(a.tensors, b.tensors);
    assert_eq!(a.config_value("train.alpha"), Some("0"));

    let printed = ok(&[
        "train-mimic",
        "--mapper",
        s(&f.mapper),
        "--classifier",
        s(&f.cls),
        "--data",
        s(&f.data),
        "--out",
        s(&mim),
        "--epochs",
        "1",
        "--alpha",
        "auto",
    ]);
    assert!(printed.lines().any(|l| l.starts_with("alpha=")));
    let default = ok(&[
        "train-mimic",
        "--mapper",
        s(&f.mapper),
        "--classifier",
        s(&f.cls),
        "--data",
        s(&f.data),
        "--out",
        s(&mim),
        "--epochs",
        "1",
    ]);
    assert!(default.contains("dev_accuracy="));
    assert_eq!(
        io::read_checkpoint(&mim)
            .unwrap()
            .config_value("train.alpha"),
        Some("0.1")
    );
}

#[test]
fn resume_from_state_matches_uninterrupted_run() {
    let f = fixture();
    let full = f.root.join("full.ck");
    let full_trace = f.root.join("full.csv");
    ok(&[
        "pretrain-mapper",
        "--arch",
        "dnn",
        "--data",
        s(&f.data),
        "--out",
        s(&full),
        "--epochs",
        "3",
        "--trace",
        s(&full_trace),
        "--seed",
        "11",
    ]);
    let part = f.root.join("part.ck");
    let state = f.root.join("state.ck");
    let trace = f.root.join("part.csv");
    ok(&[
        "pretrain-mapper",
        "--arch",
        "dnn",
        "--data",
        s(&f.data),
        "--out",
        s(&part),
        "--epochs",
        "1",
        "--trace",
        s(&trace),
        "--state",
        s(&state),
        "--seed",
        "11",
    ]);
    ok(&[
        "pretrain-mapper",
        "--arch",
        "dnn",
        "--data",
        s(&f.data),
        "--out",
        s(&part),
        "--epochs",
        "3",
        "--trace",
        s(&trace),
        "--resume",
        s(&state),
    ]);
    assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&part).unwrap());
    assert_eq!(
        std::fs::read(&full_trace).unwrap(),
        std::fs::read(&trace).unwrap()
    );
    assert_eq!(
        code(&[
            "train-classifier",
            "--arch",
            "dnn",
            "--data",
            s(&f.data),
            "--out",
            s(&part),
            "--resume",
            s(&state),
        ]),
        5
    );
}

fn first_noisy(f: &Fixture) -> PathBuf {
    let m = Manifest::read(&f.data.join(Manifest::FILE_NAME)).unwrap();
    f.data.join(&m.split(Split::Dev)[0].noisy)
}

fn distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

#[test]
fn enhance_maps_every_frame_deterministically() {
    let f = fixture();
    let m = Manifest::read(&f.data.join(Manifest::FILE_NAME)).unwrap();
    let e = m.split(Split::Dev)[0];
    let clean = features(&io::read_wav(&f.data.join(&e.clean)).unwrap()).unwrap();
    let (a, b, c) = (
        f.root.join("a.smap"),
        f.root.join("b.smap"),
        f.root.join("c.smap"),
    );
    let noisy = f.data.join(&e.noisy);
    let printed = ok(&[
        "enhance",
        "--mapper",
        s(&f.mapper),
        "--in",
        s(&noisy),
        "--out",
        s(&a),
    ]);
    assert_eq!(printed.trim(), format!("frames={}", clean.dims()[0]));
    ok(&[
        "enhance",
        "--mapper",
        s(&f.mapper),
        "--in",
        s(&noisy),
        "--out",
        s(&b),
    ]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    ok(&[
        "enhance",
        "--mapper",
        s(&f.mapper),
        "--in",
        s(&f.data.join(&e.clean)),
        "--out",
        s(&c),
    ]);
    let from_noisy = io::read_smap(&a).unwrap();
    let from_clean = io::read_smap(&c).unwrap();
    assert_eq!(from_noisy.dims(), [clean.dims()[0], BINS]);
    assert!(distance(&from_clean, &clean) < distance(&from_noisy, &clean));

    // SMAP input gives the same result as the WAV it came from.
    let feats = f.root.join("feats.smap");
    io::write_smap(&feats, &features(&io::read_wav(&noisy).unwrap()).unwrap()).unwrap();
    ok(&[
        "enhance",
        "--mapper",
        s(&f.mapper),
        "--in",
        s(&feats),
        "--out",
        s(&b),
    ]);
    let via_smap = io::read_smap(&b).unwrap();
    assert!(distance(&via_smap, &from_noisy) < 1e-10);
}

fn report(args: &[&str]) -> serde_json::Value {
    serde_json::from_str(&ok(args)).unwrap()
}

#[test]
fn eval_identity_and_aggregation() {
    let f = fixture();
    let out = f.root.join("report.json");
    let r = report(&[
        "eval",
        "--mapper",
        "identity",
        "--classifier",
        s(&f.cls),
        "--data",
        s(&f.data),
        "--split",
        "dev",
        "--out",
        s(&out),
    ]);
    assert_eq!(
        r,
        serde_json::from_str::<serde_json::Value>(&std::fs::read_to_string(&out).unwrap()).unwrap()
    );
    let set = specmimic::training::FeatureSet::load(&f.data, Split::Dev).unwrap();
    let mut sq = 0.0;
    for u in &set.utterances {
        sq += distance(&u.noisy, &u.clean) * u.frames() as f64;
    }
    let raw = sq / set.frames() as f64;
    assert!((r["fidelity"].as_f64().unwrap() - raw).abs() < 1e-9);
    assert_eq!(r["mapper"], "identity");
    assert!(r["note"].as_str().unwrap().contains("proxy"));

    let m = report(&[
        "eval",
        "--mapper",
        s(&f.mapper),
        "--classifier",
        s(&f.cls),
        "--data",
        s(&f.data),
        "--split",
        "test",
    ]);
    for key in ["fidelity", "ce", "accuracy"] {
        let mut num = 0.0;
        let mut n = 0.0;
        for b in m["per_snr"].as_array().unwrap() {
            let w = b["frames"].as_f64().unwrap();
            num += b[key].as_f64().unwrap() * w;
            n += w;
        }
        assert!((num / n - m[key].as_f64().unwrap()).abs() < 1e-9, "{key}");
    }
    let no_cls = report(&["eval", "--mapper", s(&f.mapper), "--data", s(&f.data)]);
    assert!(no_cls["accuracy"].is_null());
    assert_eq!(
        code(&["eval", "--mapper", s(&f.cls), "--data", s(&f.data)]),
        5
    );
    assert_eq!(
        code(&[
            "eval",
            "--mapper",
            "identity",
            "--data",
            s(&f.data),
            "--split",
            "valid"
        ]),
        2
    );
}

#[test]
fn export_spectrogram_layout() {
    let f = fixture();
    let flat = f.root.join("flat.smap");
    io::write_smap(&flat, &Tensor::full([5, BINS], 0.25)).unwrap();
    let pgm = f.root.join("flat.pgm");
    ok(&["export-spectrogram", "--in", s(&flat), "--out", s(&pgm)]);
    let img = io::decode_pgm(&std::fs::read(&pgm).unwrap()).unwrap();
    assert_eq!((img.width, img.height), (5, BINS));
    assert!(img.pixels.iter().all(|&p| p == 128));
}
