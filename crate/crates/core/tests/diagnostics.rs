use cace_core::data::{
    add_dummy_concept, generate_colored_digits, ColoredDigitsConfig, ConceptAxis, Dataset,
};
use cace_core::diagnostics::{null_effect_test, positive_effect_test, Bound, DiagnosticConfig};
use cace_core::estimators::{gt_cace, ConceptSpec, Estimator, NwayDivisor};
use cace_core::models::{
    train_classifier, Classifier, ClassifierConfig, GeneratorOracle, GlyphMatcher, GroundTruthGenerator,
    MarkerMaskingPredictor,
};

fn digits(n: usize, seed: u64, one_colour: bool) -> Dataset {
    let mut cfg = ColoredDigitsConfig::with_sigma(0.02);
    cfg.n_train = n;
    cfg.n_test = 10;
    cfg.seed = seed;
    if one_colour {
        // Colour carries no information, so accuracy depends on shape alone.
        cfg.class_colors = vec![0; 10];
    }
    generate_colored_digits(&cfg).unwrap().train
}

fn cfg(estimator: Estimator) -> DiagnosticConfig {
    DiagnosticConfig {
        estimator,
        divisor: NwayDivisor::NMinus1,
        ..DiagnosticConfig::default()
    }
}

#[test]
fn perfect_classifier_with_ground_truth_generator_hits_the_limit() {
    let d = digits(300, 1, false);
    let gen = GroundTruthGenerator::new(d.clone(), ConceptAxis::Label).unwrap();
    for est in [Estimator::Gt, Estimator::EncDec] {
        let r = positive_effect_test(Some(&gen), &GlyphMatcher::default(), &d, &cfg(est)).unwrap();
        assert!((r.value - 0.2).abs() < 1e-9, "{est:?}: {}", r.value);
        assert_eq!(r.upper_limit, Some(0.2));
        assert!(r.passed);
    }
}

#[test]
fn masked_marker_passes_the_null_test_exactly() {
    let d = add_dummy_concept(&digits(300, 2, false), 0.5, 9).unwrap();
    let f = MarkerMaskingPredictor {
        inner: GlyphMatcher::default(),
        height: 16,
        width: 16,
    };
    let gen = GroundTruthGenerator::new(d.clone(), ConceptAxis::Dummy).unwrap();
    for est in [Estimator::Gt, Estimator::Dec, Estimator::EncDec] {
        let r = null_effect_test(Some(&gen), &f, &d, &cfg(est)).unwrap();
        assert_eq!(r.value, 0.0, "{est:?}");
        assert!(r.passed);
        assert_eq!(r.bound, Bound::AtMost(0.05));
    }
}

#[test]
fn null_test_under_ground_truth_equals_gt_of_the_dummy_axis() {
    let d = add_dummy_concept(&digits(400, 3, false), 0.5, 4).unwrap();
    let mut c = ClassifierConfig::small(d.input_dim(), 10);
    c.training.epochs = 2;
    let clf = train_classifier(&d, &c).unwrap();
    let gen = GroundTruthGenerator::new(d.clone(), ConceptAxis::Dummy).unwrap();
    let direct = gt_cace(&d, &clf, &ConceptSpec::binary(ConceptAxis::Dummy, 1)).unwrap();
    for est in [Estimator::Gt, Estimator::EncDec] {
        let r = null_effect_test(Some(&gen), &clf, &d, &cfg(est)).unwrap();
        assert!((r.value - direct.summary).abs() < 1e-12, "{est:?}");
    }
}

#[test]
fn positive_effect_grows_with_accuracy() {
    let d = digits(2000, 4, true);
    let gen = GroundTruthGenerator::new(d.clone(), ConceptAxis::Label).unwrap();
    let base = ClassifierConfig::small(d.input_dim(), 10);
    let mut checkpoints = vec![Classifier::initialize(base.clone()).unwrap()];
    for epochs in [1, 8] {
        let mut c = base.clone();
        c.training.epochs = epochs;
        checkpoints.push(train_classifier(&d, &c).unwrap());
    }
    let mut last = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for clf in &checkpoints {
        let acc = clf.accuracy(&d).unwrap();
        let r = positive_effect_test(Some(&gen), clf, &d, &cfg(Estimator::EncDec)).unwrap();
        assert!(
            acc > last.0 && r.value > last.1,
            "acc {acc} effect {} after {last:?}",
            r.value
        );
        last = (acc, r.value);
    }
}

#[test]
fn untrained_classifier_fails_the_positive_test() {
    let d = digits(300, 5, false);
    let gen = GroundTruthGenerator::new(d.clone(), ConceptAxis::Label).unwrap();
    let clf = Classifier::initialize(ClassifierConfig::small(d.input_dim(), 10)).unwrap();
    let r = positive_effect_test(Some(&gen), &clf, &d, &cfg(Estimator::EncDec)).unwrap();
    assert!(!r.passed, "{}", r.value);
    assert_eq!(r.bound, Bound::AtLeast(0.1));
}

#[test]
fn generator_on_the_wrong_axis_is_rejected() {
    let d = add_dummy_concept(&digits(50, 6, false), 0.5, 1).unwrap();
    let gen = GroundTruthGenerator::new(d.clone(), ConceptAxis::Dummy).unwrap();
    assert_eq!(gen.concept_axis(), ConceptAxis::Dummy);
    assert!(positive_effect_test(Some(&gen), &GlyphMatcher::default(), &d, &cfg(Estimator::Dec)).is_err());
    assert!(positive_effect_test(None, &GlyphMatcher::default(), &d, &cfg(Estimator::Dec)).is_err());
    assert!(positive_effect_test(None, &GlyphMatcher::default(), &d, &cfg(Estimator::ConExp)).is_err());
}

#[test]
fn null_test_needs_a_dummy_concept() {
    let d = digits(50, 7, false);
    assert!(null_effect_test(None, &GlyphMatcher::default(), &d, &cfg(Estimator::Gt)).is_err());
}
