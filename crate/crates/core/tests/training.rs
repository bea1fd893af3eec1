mod common;

use car_core::bow_model::{BowModel, Document, PlantedSpec};
use car_core::equilibrium::{best_response_counterfactual, induced_distribution};
use car_core::objectives::RegularizerConfig;
use car_core::trainer::{bow_selection_policy, infer_rationale, multiclass_train, train, TrainData};

#[test]
fn six_word_training_matches_closed_form() {
    let model = common::six_word();
    let cfg = common::bow_config(&model, 0);
    assert!((cfg.reg.alpha_for(0) - 1.3 / 6.0).abs() < 1e-12);
    let out = train(TrainData::Model(&model), &cfg).unwrap();

    let factual = bow_selection_policy(&out.params, 0, 0).unwrap();
    for (i, &s) in factual.select_prob.iter().enumerate() {
        if i == 2 || i == 3 {
            assert!(s > 0.9, "word {i}: {s}");
        } else {
            assert!(s < 0.1, "word {i}: {s}");
        }
    }

    let counterfactual = bow_selection_policy(&out.params, 0, 1).unwrap();
    let achieved = induced_distribution(&counterfactual, &model, 1).unwrap();
    let target = induced_distribution(&best_response_counterfactual(&factual, &model, 0).unwrap(), &model, 1).unwrap();
    for (a, b) in achieved.iter().zip(&target) {
        assert!((a - b).abs() <= 0.05, "{achieved:?} vs {target:?}");
    }

    let no_class_words = Document {
        label: 1,
        bag: vec![true, true, false, false, true, true],
        tokens: None,
        truth_mask: None,
    };
    let mask = infer_rationale(&out.params, &no_class_words, 0, None).unwrap();
    assert_eq!(mask.count(), 0);
}

#[test]
fn three_class_policies_concentrate_on_own_words() {
    let model = BowModel::planted(&PlantedSpec {
        vocab_size: 8,
        class_words: vec![2, 2, 2],
        high: vec![0.8],
        low: 0.1,
        neutral: 0.5,
        prior: vec![1.0 / 3.0; 3],
    })
    .unwrap();
    let mut cfg = common::bow_config(&common::six_word(), 3);
    cfg.reg = RegularizerConfig::new(3.0, 0.0, 1.6 / 8.0);
    let out = multiclass_train(TrainData::Model(&model), &cfg).unwrap();
    for t in 0..3 {
        let policy = bow_selection_policy(&out.params, t, t).unwrap();
        for k in 0..2 {
            let s = policy.select_prob[2 * t + k];
            assert!(s > 0.8, "class {t} word {}: {s}", 2 * t + k);
        }
    }
}

#[test]
fn strong_sparsity_weight_hits_target() {
    let model = common::six_word();
    let mut cfg = car_core::TrainConfig::new(car_core::Variant::Bow);
    cfg.steps = 3000;
    cfg.reg = RegularizerConfig::new(10.0, 0.0, 0.2);
    let out = train(TrainData::Model(&model), &cfg).unwrap();
    for t in 0..2 {
        let sparsity = out.history.recent_sparsity(t, 100).unwrap();
        assert!((sparsity - 0.2).abs() <= 0.02 * 0.2, "class {t}: {sparsity}");
    }
}
