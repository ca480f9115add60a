mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tempattn::change::{
    embed_occurrences, semantic_change_scores, time_specific_embedding,
};
use tempattn::corpus::{
    build_vocab, encode_sequence, mask_for_mlm, sample_sentences, time_vocab_for, Corpus,
    TargetWordRecord,
};
use tempattn::training::{train_mlm, TrainConfig};
use tempattn::vocab::{MASK_ID, MASK_TIME};
use tempattn::{AttentionMode, Model, ModelConfig, TimedSequence, Vocab};

fn targets(words: &[&str]) -> Vec<TargetWordRecord> {
    words
        .iter()
        .map(|w| TargetWordRecord {
            word: w.to_string(),
            gold_score: 0.5,
        })
        .collect()
}

fn toy_corpora() -> (Corpus, Corpus) {
    let t1 = [
        "the river bank was muddy",
        "she sat on the bank of the river",
        "the bank near the water flooded",
        "a cell in the old prison",
        "the monk slept in his cell",
        "water ran past the bank and the bank",
    ];
    let t2 = [
        "the bank raised its rates",
        "he deposited cash at the bank",
        "the bank approved the loan",
        "my cell phone rang",
        "the cell battery died",
        "cash and water and a cell",
    ];
    let c = |label: &str, s: &[&str]| {
        Corpus::from_sentences(label, s.iter().map(|x| x.to_string()).collect())
    };
    (c("1990", &t1), c("2020", &t2))
}

fn toy_model(mode: AttentionMode, layers: usize) -> (Model, Vocab, Corpus, Corpus) {
    let (c1, c2) = toy_corpora();
    let vocab = build_vocab(&[&c1, &c2], &targets(&["bank", "cell"]), 1).unwrap();
    let tv = time_vocab_for(&[&c1, &c2]).unwrap();
    let mut cfg = ModelConfig::new(layers, 8, 2, vocab.len(), &tv, mode);
    cfg.max_len = 12;
    cfg.seed = 21;
    cfg.init_std = 0.3;
    (Model::build(cfg).unwrap(), vocab, c1, c2)
}

#[test]
fn masking_follows_the_corruption_rule() {
    let words: Vec<String> = (0..500).map(|i| format!("w{i}")).collect();
    let corpus = Corpus::from_sentences("t", vec![words.join(" ")]);
    let vocab = build_vocab(&[&corpus], &[], 1).unwrap();
    let seq = encode_sequence(&vocab, &corpus.sentences[0], 0, AttentionMode::Standard, 500).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut draws, mut selected, mut masked, mut random, mut kept) = (0, 0, 0, 0, 0);
    for _ in 0..200 {
        let m = mask_for_mlm(&seq, &vocab, &mut rng, 0.15).unwrap();
        draws += seq.len();
        selected += m.labels.len();
        for &(pos, original) in &m.labels {
            let now = m.input.token_ids[pos];
            if now == MASK_ID {
                assert_eq!(m.input.time_ids[pos], MASK_TIME);
                masked += 1;
            } else if now == original {
                kept += 1;
            } else {
                random += 1;
            }
        }
        let labelled: Vec<usize> = m.labels.iter().map(|l| l.0).collect();
        for p in 0..seq.len() {
            if !labelled.contains(&p) {
                assert_eq!(m.input.token_ids[p], seq.token_ids[p]);
            }
        }
    }
    assert_eq!(draws, 100_000);
    let frac = |a: usize, b: usize| a as f64 / b as f64;
    assert!((frac(selected, draws) - 0.15).abs() < 0.01);
    assert!((frac(masked, selected) - 0.8).abs() < 0.01);
    assert!((frac(random, selected) - 0.1).abs() < 0.01);
    assert!((frac(kept, selected) - 0.1).abs() < 0.01);
}

#[test]
fn sampling_is_bounded_and_reproducible() {
    let (c1, _) = toy_corpora();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let all = sample_sentences(&c1, "bank", 100, &mut rng).unwrap();
    assert_eq!(all.len(), 4);
    let a = sample_sentences(&c1, "bank", 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = sample_sentences(&c1, "bank", 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2);
    assert!(a.iter().all(|s| s.split(' ').any(|w| w == "bank")));
    assert!(sample_sentences(&c1, "phone", 3, &mut rng).is_err());
}

#[test]
fn occurrence_vectors_match_scalar_reference() {
    for mode in [AttentionMode::Standard, AttentionMode::Temporal, AttentionMode::TemporalPrepend] {
        let (model, vocab, c1, _) = toy_model(mode, 2);
        let sentence = &c1.sentences[5];
        let seq = encode_sequence(&vocab, sentence, 0, mode, 12).unwrap();
        let reference = common::reference_encode(&model, &seq);
        let encoded = model.encode(&seq).unwrap();
        for (r, e) in reference.iter().zip(&encoded.layers) {
            assert!(r.max_abs_diff(e) <= 1e-12, "{mode}");
        }

        let bank = vocab.id("bank").unwrap();
        let positions: Vec<usize> = (0..seq.len()).filter(|&p| seq.token_ids[p] == bank).collect();
        assert_eq!(positions.len(), 2);
        let h1 = embed_occurrences(&model, &vocab, sentence, 0, "bank", 1).unwrap();
        let h2 = embed_occurrences(&model, &vocab, sentence, 0, "bank", 2).unwrap();
        for (k, &p) in positions.iter().enumerate() {
            for c in 0..8 {
                assert_eq!(h1[k][c], encoded.layers[1].get(p, c));
                assert!((h1[k][c] - reference[1].get(p, c)).abs() <= 1e-12);
                let mean = (reference[0].get(p, c) + reference[1].get(p, c)) / 2.0;
                assert!((h2[k][c] - mean).abs() <= 1e-12);
            }
        }
        assert!(embed_occurrences(&model, &vocab, sentence, 0, "bank", 3).is_err());
    }
}

#[test]
fn time_specific_embedding_is_flat_mean() {
    let (model, vocab, c1, _) = toy_model(AttentionMode::Temporal, 1);
    // "cell" appears once in each of two sentences of c1
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let e = time_specific_embedding(&model, &vocab, &c1, 0, "cell", 10, 1, &mut rng).unwrap();
    assert_eq!(e.support, 2);
    let u = &embed_occurrences(&model, &vocab, &c1.sentences[3], 0, "cell", 1).unwrap()[0];
    let v = &embed_occurrences(&model, &vocab, &c1.sentences[4], 0, "cell", 1).unwrap()[0];
    for c in 0..8 {
        assert!((e.vector[c] - (u[c] + v[c]) / 2.0).abs() <= 1e-15);
    }

    // single-occurrence corpus
    let one = Corpus::from_sentences("1990", vec![c1.sentences[3].clone()]);
    let e = time_specific_embedding(&model, &vocab, &one, 0, "cell", 10, 1, &mut rng).unwrap();
    assert_eq!(e.support, 1);
    assert_eq!(&e.vector, u);

    // "bank" has 1 + 1 + 1 + 2 occurrences in four sentences
    let e = time_specific_embedding(&model, &vocab, &c1, 0, "bank", 10, 1, &mut rng).unwrap();
    assert_eq!(e.support, 5);

    // reordering the corpus leaves the flat mean unchanged
    let mut rev = c1.clone();
    rev.sentences.reverse();
    let a = time_specific_embedding(&model, &vocab, &c1, 0, "bank", 10, 1, &mut rng).unwrap();
    let b = time_specific_embedding(&model, &vocab, &rev, 0, "bank", 10, 1, &mut rng).unwrap();
    for (x, y) in a.vector.iter().zip(&b.vector) {
        assert!((x - y).abs() <= 1e-14);
    }
}

#[test]
fn identical_slices_in_standard_mode_score_zero() {
    let (model, vocab, c1, _) = toy_model(AttentionMode::Standard, 2);
    let mut twin = c1.clone();
    twin.time_point = "2020".into();
    let r = semantic_change_scores(&model, &vocab, &c1, &twin, &targets(&["bank", "cell"]), 3, 2, 5)
        .unwrap();
    assert_eq!(r.n_unscored(), 0);
    for (_, s) in r.scored() {
        assert!(s.abs() <= 1e-12);
    }
}

#[test]
fn scoring_is_deterministic_and_reports_absent_words() {
    let (model, vocab, c1, c2) = toy_model(AttentionMode::Temporal, 2);
    let t = targets(&["bank", "cell", "river"]);
    let run = || semantic_change_scores(&model, &vocab, &c1, &c2, &t, 2, 1, 8).unwrap();
    let a = run();
    assert_eq!(a.to_tsv(), run().to_tsv());
    let last = a.entries.last().unwrap();
    assert_eq!(last.word, "river");
    assert!(last.score().is_none());
    assert!(a.to_tsv().contains("river\tNA\tabsent@t2\n"));
}

#[test]
fn standard_training_stays_blind_to_time() {
    let (mut model, vocab, c1, c2) = toy_model(AttentionMode::Standard, 1);
    let tcfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed: 2,
        ..Default::default()
    };
    train_mlm(&mut model, &[&c1, &c2], &vocab, &tcfg).unwrap();
    let seq = encode_sequence(&vocab, &c2.sentences[0], 1, AttentionMode::Standard, 12).unwrap();
    let swapped = TimedSequence::new(seq.token_ids.clone(), seq.time_ids.iter().map(|_| 3).collect())
        .unwrap();
    let a = model.encode(&seq).unwrap();
    let b = model.encode(&swapped).unwrap();
    assert_eq!(a, b);
}

#[test]
fn training_is_deterministic() {
    let tcfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        seed: 6,
        ..Default::default()
    };
    let run = || {
        let (mut model, vocab, c1, c2) = toy_model(AttentionMode::Temporal, 1);
        let report = train_mlm(&mut model, &[&c1, &c2], &vocab, &tcfg).unwrap();
        (model, report.to_csv())
    };
    let (m1, log1) = run();
    let (m2, log2) = run();
    assert_eq!(log1, log2);
    assert_eq!(m1.params(), m2.params());
    assert!(log1.lines().skip(1).all(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap().is_finite()));
}
