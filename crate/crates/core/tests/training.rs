use pmkit::autoencoder::{ae_score, score_corpus_ae, train_ae, AeConfig, AeModel};
use pmkit::datamodel::{ActivationMatrix, Corpus, Matrix, UtteranceRecord};
use pmkit::rnn::{score_corpus_rnn, train_rnn, RnnConfig, RnnModel};
use pmkit::synthcorpus::{generate, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_corpus(n: usize, seed: u64) -> Corpus {
    generate(&SynthConfig {
        k: 12,
        l_range: (4, 9),
        t_range: (10, 20),
        seed,
        ..SynthConfig::default().single("train", n)
    })
    .unwrap()
}

#[test]
fn autoencoder_overfits_ten_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let records = (0..10)
        .map(|i| UtteranceRecord {
            id: format!("v{i}"),
            dataset: "x".into(),
            presoftmax: Some(ActivationMatrix(
                Matrix::from_rows(vec![(0..20).map(|_| rng.random_range(-1.0..1.0)).collect()])
                    .unwrap(),
            )),
            ..Default::default()
        })
        .collect();
    let corpus = Corpus::new(records).unwrap();
    let (model, history) = train_ae(
        &corpus,
        &AeConfig {
            epochs: 2000,
            batch_size: 10,
            validation_fraction: 0.0,
            ..AeConfig::desk()
        },
    )
    .unwrap();
    assert!(history.final_loss < 1e-3, "final loss {}", history.final_loss);
    let worst = corpus
        .records()
        .iter()
        .map(|r| ae_score(&model, r).unwrap())
        .fold(0.0, f64::max);
    assert!(worst < 1e-2, "worst per-vector error {worst}");
}

#[test]
fn autoencoder_training_reduces_loss_and_round_trips() {
    let corpus = small_corpus(30, 2);
    let (model, history) = train_ae(&corpus, &AeConfig { hidden: vec![8, 4, 8], epochs: 15, seed: 4, ..AeConfig::desk() }).unwrap();
    assert!(history.final_loss < history.initial_loss);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ae.ckpt");
    model.save(&path).unwrap();
    let back = AeModel::load(&path).unwrap();
    assert_eq!(back, model);
    let a = score_corpus_ae(&model, &corpus, 1).scores;
    let b = score_corpus_ae(&back, &corpus, 0).scores;
    assert_eq!(a, b);
}

#[test]
fn rnn_training_is_deterministic_and_thread_count_free() {
    let corpus = small_corpus(24, 3);
    let config = RnnConfig {
        hidden: 6,
        linear_width: 5,
        epochs: 4,
        seed: 11,
        ..RnnConfig::desk()
    };
    let (m1, h1) = train_rnn(&corpus, &config).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let (m2, h2) = pool.install(|| train_rnn(&corpus, &config)).unwrap();
    assert_eq!(m1.to_checkpoint().to_bytes(), m2.to_checkpoint().to_bytes());
    assert_eq!(h1.epoch_losses, h2.epoch_losses);

    let other = train_rnn(&corpus, &RnnConfig { seed: 12, ..config }).unwrap().0;
    assert_ne!(m1.to_checkpoint().to_bytes(), other.to_checkpoint().to_bytes());

    let s1 = score_corpus_rnn(&m1, &corpus, 1).scores;
    let s4 = score_corpus_rnn(&m1, &corpus, 4).scores;
    assert_eq!(s1, s4);
    let ids: Vec<_> = s1.iter().map(|s| s.utterance_id.as_str()).collect();
    let want: Vec<_> = corpus.records().iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, want);
}

#[test]
fn rnn_checkpoint_rejects_other_kinds() {
    let corpus = small_corpus(10, 5);
    let (ae, _) = train_ae(&corpus, &AeConfig { hidden: vec![8, 4, 8], epochs: 1, ..AeConfig::desk() }).unwrap();
    let err = RnnModel::from_checkpoint(&ae.to_checkpoint()).unwrap_err();
    assert_eq!(err.category(), "checkpoint");
}

#[test]
fn rnn_requires_cer() {
    let mut corpus = small_corpus(6, 6).into_records();
    corpus[3].cer = None;
    let err = train_rnn(&Corpus::new(corpus).unwrap(), &RnnConfig::desk()).unwrap_err();
    assert_eq!(err.category(), "cer-required");
}
