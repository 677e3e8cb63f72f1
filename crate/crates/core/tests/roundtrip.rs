use emocvae::checkpoint::Checkpoint;
use emocvae::corpus::{
    build_vocab, read_corpus, write_corpus, ConversationPair, Emotion, DEFAULT_MAX_LEN,
};
use emocvae::decode::{read_candidates, write_candidates, GenerationCandidate, Provenance};
use emocvae::model::{Model, ModelConfig};
use emocvae::training::TrainConfig;
use emocvae::variant::VariantId;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,6}"
}

fn pair() -> impl Strategy<Value = ConversationPair> {
    (
        prop::collection::vec(word(), 1..8),
        prop::collection::vec(word(), 1..8),
        0usize..Emotion::COUNT,
    )
        .prop_map(|(post, response, e)| {
            ConversationPair::new(
                post,
                response,
                Emotion::from_id(e).unwrap(),
                DEFAULT_MAX_LEN,
            )
            .unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corpus_files_round_trip(pairs in prop::collection::vec(pair(), 1..20)) {
        let mut buf = Vec::new();
        write_corpus(&pairs, &mut buf).unwrap();
        let back = read_corpus(buf.as_slice(), DEFAULT_MAX_LEN).unwrap();
        prop_assert_eq!(back, pairs);
    }

    #[test]
    fn candidate_files_keep_tokens_and_scores(
        pairs in prop::collection::vec(pair(), 1..10),
        log_probs in prop::collection::vec(-50.0f64..0.0, 10),
    ) {
        let vocab = build_vocab(&pairs, 1).unwrap();
        let cands: Vec<GenerationCandidate> = pairs
            .iter()
            .zip(&log_probs)
            .enumerate()
            .map(|(i, (p, &lp))| GenerationCandidate {
                post_id: i / 2,
                emotion: p.emotion,
                tokens: vocab.encode(&p.response),
                log_prob: lp,
                ended: true,
                provenance: Provenance::Unknown,
            })
            .collect();
        let mut buf = Vec::new();
        write_candidates(&cands, &vocab, &mut buf).unwrap();
        let back = read_candidates(buf.as_slice(), &vocab).unwrap();
        prop_assert_eq!(back, cands);
    }
}

#[test]
fn generator_checkpoint_round_trips_bit_exactly() {
    let pairs: Vec<ConversationPair> = (0..6)
        .map(|i| {
            ConversationPair::new(
                vec![format!("post{i}"), "about".into()],
                vec!["reply".into(), format!("word{i}")],
                Emotion::ALL[i % Emotion::COUNT],
                DEFAULT_MAX_LEN,
            )
            .unwrap()
        })
        .collect();
    let vocab = build_vocab(&pairs, 1).unwrap();
    for variant in VariantId::ALL {
        let mut cfg = ModelConfig::new(variant);
        cfg.hidden_dim = 8;
        cfg.ffn_dim = 16;
        cfg.latent_dim = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::new(cfg.clone(), vocab.len(), &mut rng).unwrap();
        let ckpt = Checkpoint {
            model,
            vocab: vocab.clone(),
            train: TrainConfig::new(cfg),
            step: 9,
        };
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::read(bytes.as_slice()).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes, "{variant}");
        assert_eq!(back.step, 9);
        assert_eq!(back.model.variant(), variant);
    }
}
