use av_anchor_core::anchors::{AnchorTable, Av};
use av_anchor_core::config::{EmbedConfig, HeadConfig};
use av_anchor_core::embed::{self, encode_model, load_model, save_model};
use av_anchor_core::formats::{self, AvRecord};
use av_anchor_core::head::{self, HeadParams};
use av_anchor_core::types::{EmotionFeature, LayerStack, Row, Split};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

fn features(n: usize, dim: usize, seed: u64) -> Vec<EmotionFeature> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| EmotionFeature {
            utterance_id: format!("u{i}"),
            vector: (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect(),
        })
        .collect()
}

/// Write, read back, write again, and require identical bytes.
fn assert_stable(path: &std::path::Path, rewrite: impl Fn(&std::path::Path)) {
    let first = std::fs::read(path).unwrap();
    let second = path.with_extension("again");
    rewrite(&second);
    assert_eq!(first, std::fs::read(&second).unwrap(), "{}", path.display());
}

#[test]
fn layer_stack_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data = (0..3 * 4 * 5).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let stack = LayerStack::new("s", 3, 4, 5, data).unwrap();
    let p = dir.path().join("s.avls");
    formats::write_layer_stack(&p, &stack).unwrap();
    let back = formats::read_layer_stack(&p, "s").unwrap();
    assert_eq!(back, stack);
    assert_stable(&p, |q| formats::write_layer_stack(q, &back).unwrap());
}

#[test]
fn feature_matrix_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let feats = features(17, 9, 2);
    let p = dir.path().join("f.avfm");
    formats::write_feature_matrix(&p, &feats).unwrap();
    let raw = formats::read_feature_matrix(&p).unwrap();
    assert_eq!(raw.len(), 17);
    let back: Vec<EmotionFeature> = feats
        .iter()
        .zip(raw)
        .map(|(f, v)| EmotionFeature {
            utterance_id: f.utterance_id.clone(),
            vector: v,
        })
        .collect();
    assert_stable(&p, |q| formats::write_feature_matrix(q, &back).unwrap());
    for (a, b) in feats.iter().zip(&back) {
        for (x, y) in a.vector.iter().zip(&b.vector) {
            assert_eq!(*x as f32 as f64, *y);
        }
    }
}

#[test]
fn head_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = HeadParams::init(4, 6, 5, vec!["angry".into(), "happy".into(), "sad".into()], &mut rng);
    let cfg = HeadConfig {
        feature_dim: 5,
        ..HeadConfig::default()
    };
    let p = dir.path().join("h.avhd");
    head::save_checkpoint(&p, &params, &cfg).unwrap();
    let (back, back_cfg) = head::load_checkpoint(&p).unwrap();
    assert_eq!(back, params);
    assert_eq!(back_cfg, cfg);
    assert_stable(&p, |q| head::save_checkpoint(q, &back, &back_cfg).unwrap());
}

#[test]
fn embed_model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let feats = features(30, 4, 4);
    let labels: Vec<&str> = (0..30).map(|i| ["happy", "sad", "neutral"][i % 3]).collect();
    let cfg = EmbedConfig {
        k_neighbors: 6,
        epochs: 20,
        ..EmbedConfig::default()
    };
    let model = embed::fit(&feats, &labels, &AnchorTable::default_table(), &cfg).unwrap();
    let p = dir.path().join("m.avem");
    save_model(&p, &model).unwrap();
    let back = load_model(&p).unwrap();
    assert_eq!(back.embedding, model.embedding);
    assert_eq!(encode_model(&back).unwrap(), encode_model(&model).unwrap());
    assert_stable(&p, |q| save_model(q, &back).unwrap());
}

#[test]
fn anchor_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let table = AnchorTable::default_table();
    let p = dir.path().join("anchors.json");
    table.save(&p).unwrap();
    let back = AnchorTable::load(&p).unwrap();
    assert_eq!(back, table);
    assert_stable(&p, |q| back.save(q).unwrap());
}

#[test]
fn default_anchors_match_reference_table() {
    let expected = [
        ("angry", -0.51, 0.59),
        ("boredom", -0.65, -0.62),
        ("contempt", -0.80, 0.20),
        ("disgusted", -0.60, 0.35),
        ("excited", 0.62, 0.75),
        ("fearful", -0.64, 0.60),
        ("frustrated", -0.64, 0.52),
        ("happy", 0.81, 0.51),
        ("sad", -0.63, -0.27),
        ("surprised", 0.40, 0.67),
        ("neutral", 0.0, 0.0),
    ];
    let t = AnchorTable::default_table();
    assert_eq!(t.len(), expected.len());
    for (name, v, a) in expected {
        assert_eq!(t.get(name), Some(Av::new(v, a)), "{name}");
    }
    assert_eq!(t.get("Happy"), t.get("happy"));
}

#[test]
fn anchor_table_rejects_bad_entries() {
    assert!(AnchorTable::new([("happy", Av::new(0.5, 0.5))]).is_err());
    assert!(AnchorTable::new([("neutral", Av::new(0.1, 0.0))]).is_err());
    assert!(AnchorTable::new([("neutral", Av::new(0.0, 0.0)), ("x", Av::new(1.5, 0.0))]).is_err());
    assert!(AnchorTable::from_json_str("{\"neutral\": [0.0, 0.0], \"calm\": [0.2, -0.4]}").is_ok());
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![
        Row {
            utterance_id: "a".into(),
            label: Some("happy".into()),
            speaker: Some("s1".into()),
            split: Split::Train,
            feature_path: Some(PathBuf::from("stacks/a.avls")),
        },
        Row {
            utterance_id: "b".into(),
            label: None,
            speaker: None,
            split: Split::Test,
            feature_path: None,
        },
    ];
    let p = dir.path().join("manifest.csv");
    formats::write_manifest(&p, &rows).unwrap();
    let back = formats::read_manifest(&p).unwrap();
    assert_eq!(back[1], rows[1]);
    assert_eq!(back[0].label, rows[0].label);
    assert_stable(&p, |q| formats::write_manifest(q, &back).unwrap());
}

#[test]
fn feature_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let feats: Vec<EmotionFeature> = features(5, 3, 6)
        .into_iter()
        .map(|f| EmotionFeature {
            vector: f.vector.iter().map(|&v| v as f32 as f64).collect(),
            ..f
        })
        .collect();
    let p = dir.path().join("f.csv");
    formats::write_feature_csv(&p, &feats).unwrap();
    assert_eq!(formats::read_feature_csv(&p).unwrap(), feats);
}

#[test]
fn ragged_or_nonfinite_features_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut feats = features(3, 2, 7);
    feats[1].vector.push(0.0);
    assert!(formats::write_feature_matrix(dir.path().join("x.avfm"), &feats).is_err());
    feats[1].vector.pop();
    feats[2].vector[0] = f64::NAN;
    assert!(formats::write_feature_matrix(dir.path().join("y.avfm"), &feats).is_err());
}

#[test]
fn truncated_binary_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.avfm");
    formats::write_feature_matrix(&p, &features(4, 4, 8)).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(formats::read_feature_matrix(&p).is_err());
    std::fs::write(&p, b"NOPE").unwrap();
    assert!(formats::read_feature_matrix(&p).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn av_csv_round_trips_exactly(
        vals in prop::collection::vec((-1.2f64..1.2, -1.2f64..1.2, prop::option::of("[a-z]{1,8}")), 0..20)
    ) {
        let records: Vec<AvRecord> = vals
            .iter()
            .enumerate()
            .map(|(i, (v, a, l))| AvRecord { utterance_id: format!("id,{i}"), valence: *v, arousal: *a, label: l.clone() })
            .collect();
        let bytes = formats::encode_av_csv(&records).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        let back = formats::parse_av_csv(&text, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &records);
        prop_assert_eq!(formats::encode_av_csv(&back).unwrap(), bytes);
    }

    #[test]
    fn stack_bytes_are_stable(l in 1usize..4, t in 1usize..4, d in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..l * t * d).map(|_| rng.random_range(-10.0f32..10.0)).collect();
        let s = LayerStack::new("p", l, t, d, data).unwrap();
        let bytes = formats::encode_layer_stack(&s).unwrap();
        prop_assert_eq!(bytes.len(), 16 + 4 * l * t * d);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.avls");
        std::fs::write(&p, &bytes).unwrap();
        let back = formats::read_layer_stack(&p, "p").unwrap();
        prop_assert_eq!(formats::encode_layer_stack(&back).unwrap(), bytes);
    }
}
