use cace_core::data::{generate_bars, BarsConfig, ConceptAxis, Dataset};
use cace_core::models::{
    load_model, save_model, train_classifier, train_cvae, ClassifierConfig, DiscreteLatentConfig, Predictor,
    SavedModel, VaeConfig, VaeLatent,
};

fn bars(n: usize) -> Dataset {
    let mut cfg = BarsConfig::with_bias(0.9, 0.1);
    cfg.n_train = n;
    cfg.n_test = 10;
    cfg.seed = 21;
    generate_bars(&cfg).unwrap().train
}

fn small_vae(discrete: bool) -> VaeConfig {
    let mut cfg = VaeConfig {
        latent_dim: 2,
        encoder_hidden: vec![32],
        decoder_hidden: vec![32],
        balance_conditions: true,
        ..VaeConfig::default()
    };
    if discrete {
        cfg.discrete = Some(DiscreteLatentConfig {
            n_categories: 3,
            temperature_start: 1.0,
            temperature_end: 0.5,
        });
    }
    cfg.training.epochs = 3;
    cfg.training.batch_size = 32;
    cfg
}

#[test]
fn classifier_checkpoint_preserves_predictions_exactly() {
    let d = bars(400);
    let mut cfg = ClassifierConfig::small(d.input_dim(), 2);
    cfg.training.epochs = 2;
    let clf = train_classifier(&d, &cfg).unwrap();
    assert!(clf.history.final_accuracy().is_some());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clf.ckpt");
    save_model(&SavedModel::Classifier(clf.clone()), &path).unwrap();
    let back = load_model(&path).unwrap().into_classifier().unwrap();
    let x: Vec<f64> = d.records[..50]
        .iter()
        .flat_map(|r| r.pixels.data().to_vec())
        .collect();
    assert_eq!(
        clf.predict_batch(&x, 50).unwrap(),
        back.predict_batch(&x, 50).unwrap()
    );
    assert_eq!(clf.history, back.history);
}

#[test]
fn vae_checkpoint_preserves_decodes_exactly() {
    let d = bars(300);
    for discrete in [false, true] {
        let vae = train_cvae(&d, &small_vae(discrete)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.ckpt");
        save_model(&SavedModel::Vae(vae.clone()), &path).unwrap();
        let back = load_model(&path).unwrap().into_vae().unwrap();
        let z = VaeLatent {
            continuous: vec![0.3, -1.2],
            category: discrete.then_some(1),
        };
        assert_eq!(vae.decode(&z, 0, 1).unwrap(), back.decode(&z, 0, 1).unwrap());
        let r = &d.records[0];
        assert_eq!(
            vae.encode(r.pixels.data(), r.class_label, r.concept_label)
                .unwrap(),
            back.encode(r.pixels.data(), r.class_label, r.concept_label)
                .unwrap()
        );
        // Asking a VAE checkpoint for a classifier is an error, not a panic.
        assert!(load_model(&path).unwrap().into_classifier().is_err());
    }
}

#[test]
fn vae_training_lowers_the_loss_and_is_reproducible() {
    let d = bars(600);
    let mut cfg = small_vae(false);
    cfg.training.epochs = 6;
    let a = train_cvae(&d, &cfg).unwrap();
    let b = train_cvae(&d, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    let e = &a.history.epochs;
    assert_eq!(e.len(), 6);
    assert!(e.last().unwrap().reconstruction < e[0].reconstruction);
    assert_eq!(a.config.concept_axis, ConceptAxis::Primary);
    let out = a
        .decode(
            &VaeLatent {
                continuous: vec![0.0, 0.0],
                category: None,
            },
            1,
            0,
        )
        .unwrap();
    assert_eq!(out.len(), d.input_dim());
    assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let d = bars(100);
    let clf = cace_core::models::Classifier::initialize(ClassifierConfig::small(d.input_dim(), 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    save_model(&SavedModel::Classifier(clf), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_model(&path).is_err());
}
