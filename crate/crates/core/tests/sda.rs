use std::collections::BTreeSet;

use proptest::prelude::*;
use sif_core::mutate::{finetune, SyntheticTask};
use sif_core::sda::{
    false_positive_rate, high_perplexity_prompt, jaccard_nonstop, sda_serve, semantic_sim, FixedPhrase, FlagReason,
    SdaConfig,
};
use sif_core::synth::{self, STOPWORDS};
use sif_core::tokenizer::encode;
use sif_core::vlm::{init_model, perplexity, DecodeConfig, ImageTensor, ModelConfig, ModelParams};

fn model(seed: u64) -> ModelParams<f64> {
    init_model(seed, ModelConfig::default()).unwrap()
}

fn queries(n: u64) -> Vec<(ImageTensor<f64>, Vec<u32>)> {
    (0..n)
        .map(|i| {
            let s = synth::sample::<f64>(21, "sda-test", i, 3, 32);
            (s.image, s.prompt)
        })
        .collect()
}

#[test]
fn semantic_similarity_properties() {
    let m = model(1);
    let a = encode("a red circle on blue");
    let b = encode("green stripe");
    let mut rev = a.clone();
    rev.reverse();
    assert_eq!(semantic_sim(&a, &a, &m).unwrap(), 1.0);
    assert_eq!(semantic_sim(&a, &rev, &m).unwrap(), 1.0);
    assert_eq!(semantic_sim(&a, &b, &m).unwrap(), semantic_sim(&b, &a, &m).unwrap());
    assert!(semantic_sim(&[], &b, &m).is_err());
}

#[test]
fn identical_models_never_diverge() {
    let m = model(2);
    let cfg = SdaConfig::default();
    let dc = DecodeConfig::greedy(40);
    for (img, prompt) in queries(4) {
        let d = sda_serve(&m, &m, &img, &prompt, &cfg, &dc).unwrap();
        assert_eq!(d.jaccard, 1.0);
        assert!(!d.flagged);
        assert_eq!(d.reason, FlagReason::None);
        assert_eq!(d.served_response, d.stolen_response);
    }
    assert_eq!(false_positive_rate(&m, &m, &queries(4), &cfg, &dc).unwrap(), 0.0);
}

#[test]
fn implausible_prompt_hits_the_gate() {
    let m = model(3);
    let stolen = model(4);
    let prompt = high_perplexity_prompt(&m, 16, 0).unwrap();
    assert!(perplexity(&m, &prompt).unwrap() > 1000.0);
    let img = &queries(1)[0].0;
    let d = sda_serve(&stolen, &m, img, &prompt, &SdaConfig::default(), &DecodeConfig::greedy(40)).unwrap();
    assert!(d.flagged);
    assert_eq!(d.reason, FlagReason::PplGate);
    assert_eq!(d.served_response, d.reference_response);

    let gib: Vec<_> = (0..3u64).map(|s| (img.clone(), high_perplexity_prompt(&m, 16, s).unwrap())).collect();
    let rate = false_positive_rate(&m, &m, &gib, &SdaConfig::default(), &DecodeConfig::greedy(20)).unwrap();
    assert_eq!(rate, 1.0);
}

#[test]
fn fixed_phrase_is_substituted() {
    let m = model(5);
    let q = queries(3);
    let images: Vec<_> = q.iter().map(|(i, _)| i.clone()).collect();
    let backdoor = FixedPhrase::new(&m, &images[..2], encode("CVPR conference"));
    let cfg = SdaConfig::default();
    let dc = DecodeConfig::greedy(60);
    for (i, (img, p)) in q.iter().enumerate() {
        let d = sda_serve(&backdoor, &m, img, p, &cfg, &dc).unwrap();
        if i < 2 {
            assert!(d.jaccard < 0.1, "jaccard {}", d.jaccard);
            assert_eq!(d.reason, FlagReason::LexicalDivergence);
            assert_eq!(d.served_response, d.reference_response);
        } else {
            assert!(!d.flagged);
        }
    }
}

#[test]
fn thresholds_are_monotone() {
    let reference = model(6);
    let stolen = finetune(&reference, &SyntheticTask::new(3, 16), 30, 0.02).unwrap().params;
    let dc = DecodeConfig::greedy(40);
    let q = queries(6);
    let flags = |cfg: &SdaConfig| -> Vec<bool> {
        q.iter()
            .map(|(i, p)| sda_serve(&stolen, &reference, i, p, cfg, &dc).unwrap().flagged)
            .collect()
    };
    let base = SdaConfig {
        jaccard_threshold: 0.4,
        ppl_threshold: 600.0,
        ..SdaConfig::default()
    };
    let looser_ppl = SdaConfig {
        ppl_threshold: 2000.0,
        ..base.clone()
    };
    let looser_jac = SdaConfig {
        jaccard_threshold: 0.1,
        ..base.clone()
    };
    let (b, lp, lj) = (flags(&base), flags(&looser_ppl), flags(&looser_jac));
    for i in 0..q.len() {
        assert!(!lp[i] || b[i]);
        assert!(!lj[i] || b[i]);
    }
}

#[test]
fn semantic_check_only_when_enabled() {
    let m = model(7);
    let other = model(8);
    let (img, p) = &queries(1)[0];
    let dc = DecodeConfig::greedy(40);
    let off = sda_serve(&other, &m, img, p, &SdaConfig { jaccard_threshold: 0.0, ..SdaConfig::default() }, &dc).unwrap();
    assert_eq!(off.sem_sim, None);
    let on_cfg = SdaConfig {
        jaccard_threshold: 0.0,
        sem_threshold: Some(1.0),
        ..SdaConfig::default()
    };
    let on = sda_serve(&other, &m, img, p, &on_cfg, &dc).unwrap();
    let s = on.sem_sim.unwrap();
    assert!((-1.0..=1.0).contains(&s));
    if s < 1.0 {
        assert_eq!(on.reason, FlagReason::SemanticDivergence);
    }
}

#[test]
fn empty_query_list_rejected() {
    let m = model(9);
    assert!(false_positive_rate(&m, &m, &[], &SdaConfig::default(), &DecodeConfig::greedy(8)).is_err());
}

proptest! {
    #[test]
    fn jaccard_symmetric_and_bounded(a in prop::collection::vec(0u32..300, 0..40), b in prop::collection::vec(0u32..300, 0..40)) {
        let stop: BTreeSet<u32> = STOPWORDS.iter().copied().collect();
        let x = jaccard_nonstop(&a, &b, &stop);
        prop_assert_eq!(x, jaccard_nonstop(&b, &a, &stop));
        prop_assert!((0.0..=1.0).contains(&x));
    }

    #[test]
    fn semantic_sim_symmetric(a in prop::collection::vec(2u32..512, 1..30), b in prop::collection::vec(2u32..512, 1..30)) {
        let m = model(1);
        let x = semantic_sim(&a, &b, &m).unwrap();
        prop_assert_eq!(x, semantic_sim(&b, &a, &m).unwrap());
        prop_assert!((-1.0..=1.0).contains(&x));
    }
}
