use rtal::model::{ModelConfig, Seq2SeqModel, BOS, EOS, NUM_SPECIAL};
use rtal::params::ParamStore;
use rtal::train::{beam_search, greedy_decode, length_penalty, BeamConfig};

fn tiny(vocab: usize, seed: u64) -> (Seq2SeqModel, ParamStore<f64>) {
    let mut cfg = ModelConfig::toy(vocab);
    cfg.num_layers = 2;
    cfg.d_model = 8;
    cfg.num_heads = 2;
    cfg.d_ff = 16;
    cfg.max_len = 12;
    cfg.seed = seed;
    let (model, mut store) = Seq2SeqModel::build::<f64>(&cfg).unwrap();
    // sharpen the output distribution so optima are well separated
    for v in store.value_mut(model.embedding).data_mut() {
        *v *= 4.0;
    }
    (model, store)
}

/// Best finished sequence by scoring every path explicitly.
fn enumerate(model: &Seq2SeqModel, params: &ParamStore<f64>, source: &[usize], alpha: f64, max_len: usize) -> (Vec<usize>, f64) {
    let memory = model.encode_sources(params, &[source.to_vec()]).unwrap();
    let vocab = model.config.vocab_size;
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut stack = vec![(vec![], 0.0f64)];
    while let Some((tokens, lp)) = stack.pop() {
        let mut prefix = vec![BOS];
        prefix.extend(&tokens);
        let row = model.forward_step(params, &memory, &[prefix]).unwrap().remove(0);
        for tok in std::iter::once(EOS).chain(NUM_SPECIAL..vocab) {
            let mut next = tokens.clone();
            next.push(tok);
            let total = lp + row[tok];
            if tok == EOS {
                let score = total / length_penalty(next.len(), alpha);
                let better = match &best {
                    None => true,
                    Some((b, s)) => score > *s || (score == *s && (next.len(), &next) < (b.len(), b)),
                };
                if better {
                    best = Some((next, score));
                }
            } else if next.len() < max_len {
                stack.push((next, total));
            }
        }
    }
    best.expect("some path ends in EOS")
}

#[test]
fn exhaustive_beam_matches_enumeration() {
    let vocab = 6;
    let max_len = 4;
    for seed in 0..12 {
        let (model, params) = tiny(vocab, seed);
        let source: Vec<usize> = (0..3).map(|i| NUM_SPECIAL + (seed as usize + i) % (vocab - NUM_SPECIAL)).collect();
        let cfg = BeamConfig {
            beam_size: (vocab - NUM_SPECIAL + 1).pow(max_len as u32),
            alpha: 0.6,
            max_len,
        };
        let got = beam_search(&model, &params, &source, &cfg).unwrap();
        let (tokens, score) = enumerate(&model, &params, &source, cfg.alpha, max_len);
        assert!(got.finished);
        assert!((got.score(cfg.alpha) - score).abs() < 1e-9, "seed {seed}");
        assert_eq!(got.tokens, tokens, "seed {seed}");
    }
}

#[test]
fn beam_of_one_is_greedy() {
    for seed in 0..8 {
        let (model, params) = tiny(8, seed);
        let source = vec![3, 4, 5, 6, 7];
        let cfg = BeamConfig {
            beam_size: 1,
            alpha: 0.6,
            max_len: 8,
        };
        let beam = beam_search(&model, &params, &source, &cfg).unwrap();
        let greedy = greedy_decode(&model, &params, &source, cfg.max_len).unwrap();
        assert_eq!(beam.tokens, greedy.tokens, "seed {seed}");
        assert_eq!(beam.finished, greedy.finished);
        assert!((beam.log_prob - greedy.log_prob).abs() < 1e-12);
    }
}

#[test]
fn wider_beams_never_score_worse_than_greedy() {
    for seed in 0..6 {
        let (model, params) = tiny(7, seed);
        let source = vec![3, 4, 5];
        let mut cfg = BeamConfig {
            beam_size: 1,
            alpha: 0.0,
            max_len: 5,
        };
        let narrow = beam_search(&model, &params, &source, &cfg).unwrap();
        cfg.beam_size = 4usize.pow(5);
        let wide = beam_search(&model, &params, &source, &cfg).unwrap();
        if narrow.finished {
            assert!(wide.score(0.0) >= narrow.score(0.0) - 1e-12);
        }
    }
}
