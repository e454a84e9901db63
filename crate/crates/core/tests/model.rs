use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use genrel_core::conditioning::FusionVariant;
use genrel_core::encoders::{EmbeddingStore, MolecularInput, StreamConfig, StreamKind, TokenSequence};
use genrel_core::heads::LabelSpace;
use genrel_core::model::{Architecture, FreezePattern, Model, ModelConfig};
use genrel_core::tensor::Tensor;

fn config(space: LabelSpace, fusion: FusionVariant) -> ModelConfig {
    let mut cfg = ModelConfig {
        d: 8,
        heads: 2,
        fusion,
        label_space: space,
        ..Default::default()
    };
    for s in &mut cfg.streams {
        s.max_len = 12;
    }
    cfg
}

#[test]
fn every_variant_predicts_a_distribution() {
    let a = MolecularInput::new("a", "CC(=O)N");
    let b = MolecularInput::new("b", "c1ccccc1O");
    for space in [LabelSpace::binary(false), LabelSpace::multiclass(5, true).unwrap()] {
        for fusion in FusionVariant::ALL {
            for tied in [false, true] {
                let cfg = ModelConfig {
                    trunk_tied: tied,
                    ..config(space, fusion)
                };
                let model = Model::new(cfg, 7).unwrap();
                let dist = model.predict(&a, &b).unwrap().distribution();
                assert_eq!(dist.len(), space.classes);
                assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(dist.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }
}

#[test]
fn config_round_trips_through_json() {
    let cfg = ModelConfig {
        freeze: FreezePattern::Both,
        trunk_tied: true,
        ..config(LabelSpace::multiclass(3, false).unwrap(), FusionVariant::OneWayRFromT)
    };
    let back: ModelConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert!(serde_json::from_str::<ModelConfig>(r#"{"dd": 3}"#).is_err());
}

#[test]
fn precomputed_stream_reads_stored_embeddings() {
    let mut cfg = config(LabelSpace::binary(false), FusionVariant::TwoWayUntied);
    cfg.streams[1] = StreamConfig {
        name: "mol".into(),
        kind: StreamKind::Precomputed,
        width: 6,
        max_len: 12,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = EmbeddingStore::new();
    for id in ["a", "b"] {
        let seq = TokenSequence::new(Tensor::uniform(&[4, 6], 1.0, &mut rng), vec![true, true, true, false]).unwrap();
        store.insert(id, 1, seq);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.bin");
    store.save(&path).unwrap();
    let loaded = EmbeddingStore::load(&path).unwrap();
    assert_eq!(loaded, store);

    let arch = Architecture::new(cfg).unwrap().with_embeddings(Arc::new(loaded));
    let params = arch.init_params(2);
    let a = MolecularInput::new("a", "CCO");
    let b = MolecularInput::new("b", "CCN");
    let p = arch.predict(&params, &a, &b).unwrap();
    assert!(p.probs[0].is_finite());
    let missing = MolecularInput::new("zz", "CCN");
    assert!(arch.predict(&params, &a, &missing).is_err());
}
