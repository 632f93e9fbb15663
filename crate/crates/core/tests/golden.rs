//! Committed clips must encode to the committed streams byte for byte.
//! Set `TVC_BLESS=1` to rewrite the expected files after an intentional format change.

use std::path::PathBuf;

use tvc_core::bitstream::TvcBitstream;
use tvc_core::clip::Clip;
use tvc_core::config::ModelConfig;
use tvc_core::masking::MaskSpec;
use tvc_core::model::Model;
use tvc_core::pipeline::{decode_stream, encode_clip};
use tvc_core::synth::{generate_clip, SynthSpec};

const WEIGHT_SEED: u64 = 2024;

/// (name, frames, height, width, n_visible)
const CASES: [(&str, usize, usize, usize, u32); 3] = [
    ("single_gop", 9, 64, 64, 3),
    ("two_gops_wide", 17, 64, 96, 7),
    ("padded_odd", 12, 40, 56, 0),
];

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn bless() -> bool {
    std::env::var_os("TVC_BLESS").is_some()
}

fn model() -> Model {
    Model::new(ModelConfig::default(), WEIGHT_SEED).unwrap()
}

fn fixture_clip(i: usize) -> Clip {
    let (name, f, h, w, _) = CASES[i];
    let path = dir().join(format!("{name}.tvcr"));
    if bless() {
        std::fs::create_dir_all(dir()).unwrap();
        let c = generate_clip(&SynthSpec::random(100 + i as u64, f, h, w)).unwrap().clip.quantized();
        c.save(&path).unwrap();
    }
    Clip::load(&path).unwrap()
}

#[test]
pub fn seeded_weights_are_stable() {
    let path = dir().join("weights.hash");
    let got = format!("{:016x}\n", model().weight_hash().unwrap());
    if bless() {
        std::fs::write(&path, &got).unwrap();
    }
    assert_eq!(std::fs::read_to_string(path).unwrap(), got);
}

#[test]
pub fn fixtures_encode_to_committed_streams() {
    let m = model();
    for (i, &(name, f, h, w, n_visible)) in CASES.iter().enumerate() {
        let clip = fixture_clip(i);
        assert_eq!((clip.frames(), clip.height(), clip.width()), (f, h, w));
        let spec = MaskSpec::fixed(7, n_visible).unwrap();
        let first = encode_clip(&m, &clip, &spec).unwrap().0.to_bytes().unwrap();
        let second = encode_clip(&m, &clip, &spec).unwrap().0.to_bytes().unwrap();
        assert_eq!(first, second, "{name}: consecutive runs differ");

        let path = dir().join(format!("{name}.tvc"));
        if bless() {
            std::fs::write(&path, &first).unwrap();
        }
        let expected = std::fs::read(&path).unwrap();
        assert_eq!(first.len(), expected.len(), "{name}: length");
        let at = first.iter().zip(&expected).position(|(a, b)| a != b);
        assert_eq!(at, None, "{name}: first differing byte");

        let decoded = decode_stream(&m, &TvcBitstream::parse(&expected).unwrap()).unwrap();
        assert_eq!((decoded.frames(), decoded.height(), decoded.width()), (f, h, w));
    }
}
