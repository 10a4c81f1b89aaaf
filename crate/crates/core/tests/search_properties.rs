use hmer_core::data::synth::synth_vocab;
use hmer_core::data::{Bitmap, EOS, PAD, RESERVED, SOS};
use hmer_core::inference::{
    beam_search, encode_image, joint_search, recognize, sequence_logp, DecodeMode, Direction, Scorer, SearchParams,
};
use hmer_core::model::Model;
use hmer_core::selfcheck::tiny_model_config;
use proptest::prelude::*;

fn image(w: usize, h: usize, pixels: &[f32]) -> Bitmap {
    let mut b = Bitmap::new(w, h);
    for (dst, src) in b.pixels.iter_mut().zip(pixels.iter().cycle()) {
        *dst = *src;
    }
    b
}

fn params(beam: usize, max_len: usize, alpha: f64) -> SearchParams {
    SearchParams { beam, max_len, alpha, ..SearchParams::default() }
}

fn arb_case() -> impl Strategy<Value = (u64, usize, usize, Vec<f32>, usize, usize, f64)> {
    (any::<u64>(), 8usize..24, 8usize..40, prop::collection::vec(0f32..=1.0, 1..64), 1usize..5, 1usize..7, 0f64..=1.5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn memory_is_finite_and_mask_covers_the_image((seed, h, w, px, ..) in arb_case()) {
        let vocab = synth_vocab();
        let model = Model::<f32>::new(&tiny_model_config(vocab.len()), seed).unwrap();
        let mem = encode_image(&model, &image(w, h, &px)).unwrap();
        prop_assert!(mem.features.data().iter().all(|x| x.is_finite()));
        prop_assert!(mem.key_mask.iter().all(|&m| m));
    }

    #[test]
    fn finished_hypotheses_are_well_formed((seed, h, w, px, beam, max_len, alpha) in arb_case()) {
        let vocab = synth_vocab();
        let model = Model::<f32>::new(&tiny_model_config(vocab.len()), seed).unwrap();
        let mem = encode_image(&model, &image(w, h, &px)).unwrap();
        let scorer = Scorer::new(&[&model.decoder], &[&mem], 0).unwrap();
        let p = params(beam, max_len, alpha);
        for dir in [Direction::L2R, Direction::R2L] {
            let pool = beam_search(&scorer, dir, &p).unwrap();
            prop_assert!(!pool.is_empty() && pool.len() <= beam);
            let cores: Vec<Vec<usize>> = pool.iter().map(|h| h.core().to_vec()).collect();
            let rescored = sequence_logp(&scorer, dir, &cores).unwrap();
            for (hyp, lp) in pool.iter().zip(rescored) {
                prop_assert!(hyp.finished);
                prop_assert_eq!(hyp.ids[0], dir.start());
                prop_assert!(!hyp.core().is_empty() && hyp.core().len() <= max_len);
                prop_assert!(hyp.core().iter().all(|&t| t >= RESERVED && t < vocab.len()));
                prop_assert!(hyp.logp <= 0.0);
                prop_assert!((hyp.logp - lp).abs() < 1e-6, "search logp {} vs rescored {}", hyp.logp, lp);
            }
            let scores: Vec<f64> = pool.iter().map(|h| p.penalized(h.logp, h.core().len())).collect();
            prop_assert!(scores.windows(2).all(|s| s[0] >= s[1]), "{:?}", scores);
        }
    }

    #[test]
    fn prefix_log_probabilities_never_increase((seed, h, w, px, beam, max_len, alpha) in arb_case()) {
        let vocab = synth_vocab();
        let model = Model::<f32>::new(&tiny_model_config(vocab.len()), seed).unwrap();
        let mem = encode_image(&model, &image(w, h, &px)).unwrap();
        let scorer = Scorer::new(&[&model.decoder], &[&mem], 0).unwrap();
        for dir in [Direction::L2R, Direction::R2L] {
            for hyp in beam_search(&scorer, dir, &params(beam, max_len, alpha)).unwrap() {
                let mut states = scorer.fresh(1);
                let mut running = 0.0;
                let mut inputs = hyp.ids.clone();
                let mut targets = hyp.core().to_vec();
                targets.push(dir.stop());
                inputs.truncate(targets.len());
                for (&input, &target) in inputs.iter().zip(&targets) {
                    let lp = scorer.step(&mut states, &[input]).unwrap();
                    let next = running + lp[0][target];
                    prop_assert!(next <= running);
                    running = next;
                }
                prop_assert!((running - hyp.logp).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn joint_winner_dominates_every_candidate((seed, h, w, px, beam, max_len, alpha) in arb_case()) {
        let vocab = synth_vocab();
        let model = Model::<f32>::new(&tiny_model_config(vocab.len()), seed).unwrap();
        let mem = encode_image(&model, &image(w, h, &px)).unwrap();
        let scorer = Scorer::new(&[&model.decoder], &[&mem], 0).unwrap();
        let out = joint_search(&scorer, &params(beam, max_len, alpha)).unwrap();
        prop_assert!(out.candidates.iter().all(|c| out.best.score >= c.score));
        prop_assert!(out.candidates.iter().any(|c| c.direction == Direction::R2L));
        for c in &out.candidates {
            prop_assert!(c.score.is_finite());
            prop_assert!(!c.tokens.iter().any(|&t| t == PAD || t == SOS || t == EOS));
            prop_assert!(vocab.detokenize(&c.tokens).is_ok());
        }
    }

    #[test]
    fn r2l_winner_reads_left_to_right((seed, h, w, px, beam, max_len, alpha) in arb_case()) {
        let vocab = synth_vocab();
        let model = Model::<f32>::new(&tiny_model_config(vocab.len()), seed).unwrap();
        let img = image(w, h, &px);
        let p = SearchParams { mode: DecodeMode::R2L, ..params(beam, max_len, alpha) };
        let out = recognize(&[&model], &img, &p).unwrap();
        let mem = encode_image(&model, &img).unwrap();
        let scorer = Scorer::new(&[&model.decoder], &[&mem], 0).unwrap();
        let top = &beam_search(&scorer, Direction::R2L, &p).unwrap()[0];
        prop_assert_eq!(&out.best.tokens, &top.reading_order());
        let mut decoding_order = out.best.tokens.clone();
        decoding_order.reverse();
        prop_assert_eq!(decoding_order.as_slice(), top.core());
        let text = vocab.detokenize(&out.best.tokens).unwrap();
        prop_assert_eq!(vocab.tokenize(&text).unwrap(), out.best.tokens.clone());
    }
}
