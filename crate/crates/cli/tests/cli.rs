use std::path::Path;
use std::process::{Command, Output};

use tvc_core::config::ModelConfig;
use tvc_core::model::Model;
use tvc_core::synth::{generate_clip, SynthSpec};

fn tvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvc")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn encode_inspect_decode() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.tvcw");
    Model::new(ModelConfig::default(), 4).unwrap().save(&w).unwrap();
    let clip = dir.path().join("c.tvcr");
    generate_clip(&SynthSpec::random(9, 9, 32, 32)).unwrap().clip.save(&clip).unwrap();
    let stream = dir.path().join("s.tvc");
    let o = tvc(&["encode", "--input", s(&clip), "--weights", s(&w), "--n-visible", "3", "--mask-interval", "7", "--out", s(&stream)]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("bpp"));
    let o = tvc(&["inspect", s(&stream)]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("mask interval 7 n_visible 3"), "{text}");
    assert!(text.contains("z_C"));
    let out = dir.path().join("d.tvcr");
    let o = tvc(&["decode", "--input", s(&stream), "--weights", s(&w), "--out", s(&out)]);
    assert!(o.status.success(), "{o:?}");
    assert!(out.exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.tvcw");
    Model::new(ModelConfig::default(), 4).unwrap().save(&w).unwrap();
    let other = dir.path().join("o.tvcw");
    Model::new(ModelConfig::default(), 5).unwrap().save(&other).unwrap();
    let clip = dir.path().join("c.tvcr");
    generate_clip(&SynthSpec::random(9, 9, 32, 32)).unwrap().clip.save(&clip).unwrap();
    let stream = dir.path().join("s.tvc");
    let o = tvc(&["encode", "--input", s(&clip), "--weights", s(&w), "--n-visible", "7", "--out", s(&stream)]);
    assert!(o.status.success());
    let out = dir.path().join("d.tvcr");

    let o = tvc(&["decode", "--input", s(&stream), "--weights", s(&other), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{o:?}");

    let mut bytes = std::fs::read(&stream).unwrap();
    bytes[0] = b'Z';
    let bad = dir.path().join("bad.tvc");
    std::fs::write(&bad, &bytes).unwrap();
    let o = tvc(&["decode", "--input", s(&bad), "--weights", s(&w), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = tvc(&["inspect", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));

    let mut nan = Model::new(ModelConfig::default(), 4).unwrap();
    let id = nan.store.id("tok.disc.dec.out.b").unwrap();
    nan.store.value_mut(id).data_mut()[0] = f32::NAN;
    let nan_w = dir.path().join("nan.tvcw");
    std::fs::write(&nan_w, nan.to_bytes().unwrap()).unwrap();
    let o = tvc(&["encode", "--input", s(&clip), "--weights", s(&nan_w), "--n-visible", "7", "--out", s(&stream)]);
    assert_eq!(o.status.code(), Some(4), "{o:?}");
}

#[test]
fn train_then_eval_and_macs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.cfg");
    std::fs::write(
        &cfg,
        "seed = 3\nheight = 32\nwidth = 32\nstage1.epochs = 1\nstage1.batch_size = 2\nstage1.clips = 2\nstage1.lr = 2e-3\n",
    )
    .unwrap();
    let w = dir.path().join("w1.tvcw");
    let hist = dir.path().join("h.csv");
    let o = tvc(&["train", "--stage", "1", "--config", s(&cfg), "--out", s(&w), "--history", s(&hist)]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("stage 1 epoch 1 loss"));
    assert_eq!(std::fs::read_to_string(&hist).unwrap().lines().count(), 2);

    let o = tvc(&["train", "--stage", "2", "--config", s(&cfg), "--out", s(&w)]);
    assert_eq!(o.status.code(), Some(1), "stage 2 without weights");

    let clips = dir.path().join("clips");
    std::fs::create_dir(&clips).unwrap();
    for i in 0..2 {
        generate_clip(&SynthSpec::random(40 + i, 9, 32, 32)).unwrap().clip.save(&clips.join(format!("c{i}.tvcr"))).unwrap();
    }
    let csv = dir.path().join("rd.csv");
    let o = tvc(&["eval", "--clips", s(&clips), "--weights", s(&w), "--sweep", "0..2", "--csv", s(&csv)]);
    assert!(o.status.success(), "{o:?}");
    let rows = tvc_core::pipeline::parse_sweep_csv(&std::fs::read_to_string(&csv).unwrap()).unwrap();
    assert_eq!(rows.len(), 2 * 3 + 3);

    let o = tvc(&["macs", "--weights", s(&w), "--frames", "9", "--height", "32", "--width", "32"]);
    assert!(o.status.success());
    let t = stdout(&o);
    for m in ["tokenizer", "checkerboard", "predictor", "fusion"] {
        assert!(t.to_lowercase().contains(m), "{t}");
    }
}
