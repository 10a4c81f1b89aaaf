use std::sync::Arc;

use super::*;
use crate::data::RESERVED;
use crate::decoder::DecoderConfig;
use crate::nn::{Module, Slot, Visitor};
use crate::numerics::RngState;

fn decoder(regular: usize, seed: u64) -> Decoder<f64> {
    let cfg = DecoderConfig {
        d_model: 8,
        heads: 2,
        d_ff: 16,
        layers: 2,
        dropout: 0.0,
        vocab_size: RESERVED + regular,
        max_positions: 16,
        tie_embeddings: false,
    };
    let mut rng = RngState::new(seed);
    let mut dec = Decoder::new(&cfg, &mut rng).unwrap();
    // Larger weights give peaked, clearly separated distributions.
    let mut f = |_: &str, s: Slot<'_, f64>| {
        if let Slot::Param(t) = s {
            let data = t.data().iter().map(|&v| 3.0 * v + rng.uniform(-0.3, 0.3)).collect();
            *t = Tensor::param(data, t.shape()).unwrap();
        }
    };
    dec.visit(&mut Visitor::new(&mut f));
    dec
}

fn memory(seed: u64) -> Memory<f64> {
    let mut rng = RngState::new(seed);
    let data = (0..6 * 8).map(|_| rng.uniform(-1.0, 1.0)).collect();
    Memory {
        features: Tensor::new(data, &[1, 6, 8]).unwrap(),
        key_mask: Arc::new(vec![true, true, true, true, true, false]),
        grid: (2, 3),
        extents: vec![(2, 3)],
    }
}

fn params(beam: usize, max_len: usize, alpha: f64) -> SearchParams {
    SearchParams { beam, max_len, alpha, ..Default::default() }
}

/// Every core of length `1..=max_len` over the regular tokens.
fn all_cores(regular: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|p| (RESERVED..RESERVED + regular).map(move |t| [p.clone(), vec![t]].concat()))
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

/// Log probability of `core` then stop, from one teacher-forced pass.
fn oracle_logp(dec: &Decoder<f64>, mem: &Memory<f64>, dir: Direction, core: &[usize]) -> f64 {
    let input: Vec<usize> = std::iter::once(dir.start()).chain(core.iter().copied()).collect();
    let len = input.len();
    let logits = dec.forward_teacher_forced(mem, &[0], &input, len, &mut Phase::Eval).unwrap();
    let v = dec.vocab_size();
    (0..len)
        .map(|t| {
            let row = &logits.data()[t * v..(t + 1) * v];
            let target = core.get(t).copied().unwrap_or(dir.stop());
            log_softmax(row)[target]
        })
        .sum()
}

fn oracle_best(cores: &[Vec<usize>], score: impl Fn(&[usize]) -> f64) -> Vec<usize> {
    let mut best: Option<(f64, &Vec<usize>)> = None;
    for c in cores {
        let s = score(c);
        let better = match best {
            None => true,
            Some((bs, bc)) => rank((s, c), (bs, bc)) == Ordering::Less,
        };
        if better {
            best = Some((s, c));
        }
    }
    best.unwrap().1.clone()
}

#[test]
fn beam_matches_exhaustive_enumeration() {
    for regular in 1..=3 {
        for seed in 0..4 {
            let dec = decoder(regular, seed);
            let mem = memory(seed + 100);
            let scorer = Scorer::new(&[&dec], &[&mem], 0).unwrap();
            let cores = all_cores(regular, 3);
            for alpha in [0.0, 1.0] {
                let p = params(64, 3, alpha);
                for dir in [Direction::L2R, Direction::R2L] {
                    let pool = beam_search(&scorer, dir, &p).unwrap();
                    assert_eq!(pool.len(), cores.len().min(64));
                    let want = oracle_best(&cores, |c| p.penalized(oracle_logp(&dec, &mem, dir, c), c.len()));
                    assert_eq!(pool[0].core(), &want[..], "regular={regular} seed={seed} alpha={alpha} {dir:?}");
                    let lp = oracle_logp(&dec, &mem, dir, pool[0].core());
                    assert!((pool[0].logp - lp).abs() < 1e-9);
                    assert!(pool.iter().all(|h| h.finished && h.logp <= 0.0 && h.ids[0] == dir.start()));
                }
            }
        }
    }
}

#[test]
fn joint_matches_exhaustive_enumeration() {
    for regular in 1..=3 {
        for seed in 0..4 {
            let dec = decoder(regular, seed + 10);
            let mem = memory(seed + 200);
            let scorer = Scorer::new(&[&dec], &[&mem], 0).unwrap();
            let cores = all_cores(regular, 3);
            for alpha in [0.0, 1.0] {
                let p = params(64, 3, alpha);
                let got = joint_search(&scorer, &p).unwrap();
                let want = oracle_best(&cores, |c| {
                    let rev: Vec<usize> = c.iter().rev().copied().collect();
                    let both = oracle_logp(&dec, &mem, Direction::L2R, c) + oracle_logp(&dec, &mem, Direction::R2L, &rev);
                    p.penalized(both, c.len())
                });
                assert_eq!(got.best.tokens, want, "regular={regular} seed={seed} alpha={alpha}");
                assert!(got.candidates.iter().all(|c| got.best.score >= c.score));
                assert_eq!(got.candidates.len(), 2 * cores.len());
            }
        }
    }
}

#[test]
fn beam_of_one_is_greedy() {
    for seed in 0..6 {
        let dec = decoder(5, seed + 20);
        let mem = memory(seed);
        let scorer = Scorer::new(&[&dec], &[&mem], 0).unwrap();
        let cache = dec.memory_cache(&mem, 0).unwrap();
        for dir in [Direction::L2R, Direction::R2L] {
            let p = params(1, 10, 0.0);
            let mut prefix = vec![dir.start()];
            loop {
                let t = prefix.len() - 1;
                let lp = log_softmax(&dec.decode_prefix(&cache, &prefix).unwrap());
                let allowed = |v: usize| v != PAD && v != dir.start() && (v != dir.stop() || t > 0) && (v == dir.stop() || t < 10);
                let best = (0..lp.len()).filter(|&v| allowed(v)).max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a))).unwrap();
                if best == dir.stop() {
                    break;
                }
                prefix.push(best);
            }
            let pool = beam_search(&scorer, dir, &p).unwrap();
            assert_eq!(pool[0].ids, prefix, "seed={seed} {dir:?}");
        }
    }
}

#[test]
fn zero_alpha_ranks_by_log_probability() {
    let dec = decoder(3, 30);
    let mem = memory(31);
    let scorer = Scorer::new(&[&dec], &[&mem], 0).unwrap();
    let pool = beam_search(&scorer, Direction::L2R, &params(8, 5, 0.0)).unwrap();
    assert!(pool.windows(2).all(|w| w[0].logp >= w[1].logp));
    let pool = beam_search(&scorer, Direction::L2R, &params(8, 5, 1.0)).unwrap();
    let key = |h: &Hypothesis| h.logp / h.core().len() as f64;
    assert!(pool.windows(2).all(|w| key(&w[0]) >= key(&w[1])));
}

#[test]
fn ties_prefer_shorter_then_smaller_ids() {
    let mut dec = decoder(3, 32);
    let mut f = |_: &str, s: Slot<'_, f64>| {
        if let Slot::Param(t) = s {
            *t = Tensor::zeros(t.shape()).unwrap();
        }
    };
    dec.visit(&mut Visitor::new(&mut f));
    let mem = memory(33);
    let scorer = Scorer::new(&[&dec], &[&mem], 0).unwrap();
    for alpha in [0.0, 1.0] {
        let p = params(64, 3, alpha);
        // Uniform steps: with alpha = 0 the shortest cores win; with
        // alpha = 1 the stop term is amortized, so the longest cores win.
        let (first, second) = if alpha == 0.0 {
            (vec![RESERVED], vec![RESERVED + 1])
        } else {
            (vec![RESERVED; 3], vec![RESERVED, RESERVED, RESERVED + 1])
        };
        for dir in [Direction::L2R, Direction::R2L] {
            let pool = beam_search(&scorer, dir, &p).unwrap();
            assert_eq!(pool[0].core(), &first[..]);
            assert_eq!(pool[1].core(), &second[..]);
        }
        let joint = joint_search(&scorer, &p).unwrap();
        assert_eq!(joint.best.tokens, first);
        assert_eq!(joint.best.direction, Direction::L2R);
    }
}

#[test]
fn sequence_logp_matches_chain_rule() {
    let dec = decoder(4, 34);
    let mem = memory(35);
    let scorer = Scorer::new(&[&dec], &[&mem], 0).unwrap();
    let cache = dec.memory_cache(&mem, 0).unwrap();
    let cores = vec![vec![5, 3, 6, 4], vec![3], vec![6, 6], vec![4, 5, 3]];
    for dir in [Direction::L2R, Direction::R2L] {
        let got = sequence_logp(&scorer, dir, &cores).unwrap();
        for (c, g) in cores.iter().zip(got) {
            let mut prob = 1.0;
            let mut prefix = vec![dir.start()];
            for &tok in c.iter().chain(std::iter::once(&dir.stop())) {
                let logits = dec.decode_prefix(&cache, &prefix).unwrap();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                prob *= (logits[tok] - mx).exp() / z;
                prefix.push(tok);
            }
            assert!((g - prob.ln()).abs() < 1e-9, "{c:?}: {g} vs {}", prob.ln());
        }
    }
}

#[test]
fn reverse_rescore_reads_backwards_with_opposite_direction() {
    let dec = decoder(4, 36);
    let mem = memory(37);
    let scorer = Scorer::new(&[&dec], &[&mem], 0).unwrap();
    let hyp = |dir: Direction, core: &[usize]| Hypothesis {
        direction: dir,
        ids: [vec![dir.start()], core.to_vec()].concat(),
        logp: -1.0,
        finished: true,
    };
    let hyps = vec![hyp(Direction::L2R, &[5]), hyp(Direction::L2R, &[3, 4, 6]), hyp(Direction::R2L, &[4, 6, 4]), hyp(Direction::R2L, &[3, 5])];
    let got = reverse_rescore(&scorer, &hyps).unwrap();
    // Single token: the opposite direction's probability of it, then stop.
    assert!((got[0] - oracle_logp(&dec, &mem, Direction::R2L, &[5])).abs() < 1e-9);
    assert!((got[1] - oracle_logp(&dec, &mem, Direction::R2L, &[6, 4, 3])).abs() < 1e-9);
    // Palindrome: the reversed core is the core itself.
    assert!((got[2] - oracle_logp(&dec, &mem, Direction::L2R, &[4, 6, 4])).abs() < 1e-9);
    assert!((got[3] - oracle_logp(&dec, &mem, Direction::L2R, &[5, 3])).abs() < 1e-9);
}

#[test]
fn zero_weight_joint_is_best_directional_result() {
    for seed in 0..5 {
        let dec = decoder(4, 40 + seed);
        let mem = memory(seed);
        let scorer = Scorer::new(&[&dec], &[&mem], 0).unwrap();
        let p = SearchParams { rescore_weight: 0.0, ..params(5, 6, 1.0) };
        let joint = joint_search(&scorer, &p).unwrap();
        let l = directional_search(&scorer, Direction::L2R, &p).unwrap().best;
        let r = directional_search(&scorer, Direction::R2L, &p).unwrap().best;
        let want = if rank((l.score, &l.tokens), (r.score, &r.tokens)) != Ordering::Greater { l } else { r };
        assert_eq!(joint.best.tokens, want.tokens);
        assert_eq!(joint.best.score, want.score);
    }
}

#[test]
fn rescore_sign_flips_the_reverse_term() {
    let dec = decoder(4, 45);
    let mem = memory(46);
    let scorer = Scorer::new(&[&dec], &[&mem], 0).unwrap();
    let p = params(4, 5, 1.0);
    let add = joint_search(&scorer, &p).unwrap();
    let loss = joint_search(&scorer, &SearchParams { rescore_sign: RescoreSign::AddLoss, ..p.clone() }).unwrap();
    for c in add.candidates.iter().chain(&loss.candidates) {
        assert!(c.reverse_logp <= 0.0);
    }
    let find = |o: &SearchOutcome| o.candidates.iter().find(|c| c.tokens == add.best.tokens && c.direction == add.best.direction).cloned().unwrap();
    let (a, b) = (find(&add), find(&loss));
    assert!((a.score - a.search_score + (b.score - b.search_score)).abs() < 1e-12);
}

#[test]
fn ensemble_reductions() {
    let (d1, d2) = (decoder(4, 50), decoder(4, 51));
    let (m1, m2) = (memory(52), memory(53));
    let p = params(4, 6, 1.0);
    let single = joint_search(&Scorer::new(&[&d1], &[&m1], 0).unwrap(), &p).unwrap();
    let copies = joint_search(&Scorer::new(&[&d1, &d1, &d1], &[&m1, &m1, &m1], 0).unwrap(), &p).unwrap();
    assert_eq!(single.best.tokens, copies.best.tokens);
    assert!((single.best.score - copies.best.score).abs() < 1e-9);

    let pair = Scorer::new(&[&d1, &d2], &[&m1, &m2], 0).unwrap();
    let mut states = pair.fresh(2);
    let lp = pair.step(&mut states, &[SOS, EOS]).unwrap();
    let c1 = d1.memory_cache(&m1, 0).unwrap();
    let c2 = d2.memory_cache(&m2, 0).unwrap();
    for (row, start) in [SOS, EOS].into_iter().enumerate() {
        let p1 = log_softmax(&d1.decode_prefix(&c1, &[start]).unwrap());
        let p2 = log_softmax(&d2.decode_prefix(&c2, &[start]).unwrap());
        let total: f64 = lp[row].iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for v in 0..lp[row].len() {
            let mean = (p1[v].exp() + p2[v].exp()) / 2.0;
            assert!((lp[row][v].exp() - mean).abs() < 1e-12);
        }
    }

    let other = decoder(5, 54);
    assert!(matches!(Scorer::new(&[&d1, &other], &[&m1, &m1], 0), Err(Error::Config(_))));
}

#[test]
fn search_respects_length_limits() {
    let dec = decoder(3, 60);
    let mem = memory(61);
    let scorer = Scorer::new(&[&dec], &[&mem], 0).unwrap();
    for max_len in [1, 2, 7] {
        let out = joint_search(&scorer, &params(3, max_len, 0.5)).unwrap();
        assert!(out.candidates.iter().all(|c| (1..=max_len).contains(&c.tokens.len())));
        assert!(out.best.tokens.iter().all(|&t| t >= RESERVED));
    }
    assert!(joint_search(&scorer, &params(3, 16, 1.0)).is_err());
    assert!(joint_search(&scorer, &params(0, 3, 1.0)).is_err());
}

#[test]
fn recognize_blank_image_terminates() {
    let cfg = crate::model::ModelConfig::toy(10);
    let model = Model::<f32>::new(&cfg, 3).unwrap();
    let blank = Bitmap::from_pixels(40, 20, vec![0.0; 800]).unwrap();
    let out = recognize(&[&model], &blank, &params(2, 5, 1.0)).unwrap();
    assert!((1..=5).contains(&out.best.tokens.len()));
    // Images below the downsampling factor are padded, not rejected.
    let tiny = Bitmap::from_pixels(3, 2, vec![1.0; 6]).unwrap();
    assert!(recognize(&[&model], &tiny, &params(2, 3, 1.0)).is_ok());
}

#[test]
fn prediction_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pred.tsv");
    let rows = vec![("a".to_string(), "x ^ { 2 }".to_string()), ("b".to_string(), String::new())];
    write_predictions(&path, &rows).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "a\tx ^ { 2 }\nb\t\n");
    assert_eq!(read_predictions(&path).unwrap(), rows);
    assert!(write_predictions(&path, &[("a\tb".into(), "x".into())]).is_err());
    std::fs::write(&path, "ok\t1\nbroken line\n").unwrap();
    let err = read_predictions(&path).unwrap_err();
    assert!(err.to_string().contains('2'), "{err}");
}

#[test]
fn search_params_from_keys() {
    let mut p = SearchParams::default();
    assert_eq!((p.beam, p.max_len, p.alpha), (10, 200, 1.0));
    p.set("beam", "3").unwrap();
    p.set("mode", "l2r").unwrap();
    p.set("rescore_sign", "loss").unwrap();
    assert_eq!((p.beam, p.mode, p.rescore_sign), (3, DecodeMode::L2R, RescoreSign::AddLoss));
    assert!(p.set("mode", "both").is_err());
    assert!(p.set("width", "3").is_err());
}

