use std::fs;

use reflectionflow::curation::{
    bundled_corpus, curate, export_dataset, post_filter, read_dataset, CurationConfig, Triplet, TripletScores,
    DATASET_FILE, EDIT_FIXTURE, MANIFEST_FILE, TRIPLET_SOURCES,
};
use reflectionflow::backend::Reflection;
use reflectionflow::reward::{featurize, synthetic_pairs, train_bt, PairSource, TrainConfig};
use reflectionflow::vocab::Vocabulary;

#[test]
fn bundled_corpus_run_covers_sources_and_reruns_identically() {
    let vocab = Vocabulary::default();
    let prompts = bundled_corpus(&vocab).unwrap();
    let cfg = CurationConfig {
        seed: 7,
        ..CurationConfig::default()
    };
    let out = curate(&prompts, EDIT_FIXTURE, &cfg, &vocab).unwrap();
    println!("{:?}", out.manifest);
    assert!(out.triplets.len() >= 200, "{} triplets", out.triplets.len());
    for s in TRIPLET_SOURCES {
        assert!(out.manifest.counts[s.as_str()] > 0, "no {} triplets", s.as_str());
    }
    for t in &out.triplets {
        assert!(t.scores.good_score >= t.scores.flawed_score);
        let gap = out.model.score(&t.structured_prompt, &t.good, &vocab).unwrap()
            - out.model.score(&t.structured_prompt, &t.flawed, &vocab).unwrap();
        assert!(gap >= cfg.margin);
        assert!(!t.reflection.text.trim().is_empty());
    }

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    export_dataset(&out.triplets, &out.manifest, a.path()).unwrap();
    let again = curate(&prompts, EDIT_FIXTURE, &cfg, &vocab).unwrap();
    export_dataset(&again.triplets, &again.manifest, b.path()).unwrap();
    for f in [DATASET_FILE, MANIFEST_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert_eq!(read_dataset(&a.path().join(DATASET_FILE)).unwrap(), out.triplets);
}

#[test]
fn post_filter_matches_independent_filter() {
    let vocab = Vocabulary::default();
    let train = synthetic_pairs(500, 1, &vocab);
    let model = train_bt(&train, &[], &TrainConfig { epochs: 50, ..TrainConfig::default() }, &vocab)
        .unwrap()
        .model;
    let triplets: Vec<Triplet> = synthetic_pairs(500, 2, &vocab)
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            // swap half the pairs so some gaps are negative
            let (good, flawed) = if i % 2 == 0 { (p.winner, p.loser) } else { (p.loser, p.winner) };
            Triplet {
                prompt_text: p.prompt.id.clone(),
                structured_prompt: p.prompt,
                flawed,
                good,
                reflection: Reflection::from_text("fix it"),
                source: PairSource::Reward,
                scores: TripletScores {
                    flawed_score: 0.0,
                    good_score: 0.0,
                    reward_gap: 0.0,
                },
            }
        })
        .collect();
    for margin in [0.0, 0.1, 0.5] {
        let dot = |t: &Triplet, s| -> f64 {
            let f = featurize(&t.structured_prompt, s, &vocab).unwrap();
            model.bias + f.iter().zip(&model.weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let expected: Vec<&Triplet> = triplets.iter().filter(|t| dot(t, &t.good) - dot(t, &t.flawed) >= margin).collect();
        let kept = post_filter(triplets.clone(), &model, margin, &vocab).unwrap();
        assert_eq!(kept.len(), expected.len(), "margin {margin}");
        assert!(kept.iter().zip(&expected).all(|(a, b)| a.good == b.good && a.flawed == b.flawed));
        assert!(kept.len() > 0 && kept.len() < triplets.len());
    }
}
