use super::*;
use crate::data::synth::{synth_generate, synth_vocab, SynthParams};
use crate::data::{EOS, PAD, SOS};
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::model::ModelConfig;
use crate::numerics::{gradcheck, GradcheckOptions};

fn tiny_config(vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::toy(vocab);
    c.encoder = EncoderConfig { growth_rate: 2, block_depth: 1, n_blocks: 2, d_model: 8, ..c.encoder };
    c.decoder = DecoderConfig { d_model: 8, heads: 2, d_ff: 16, layers: 1, dropout: 0.0, ..c.decoder };
    c
}

fn tiny_data(n: usize, seed: u64) -> Vec<Sample> {
    let mut params = SynthParams::default();
    params.raster.target_height = 12;
    params.raster.margin = 2;
    params.depth = 1;
    synth_generate(&mut RngState::new(seed), n, &params, &synth_vocab()).unwrap()
}

/// Hand-built one-sample batch over ids {0, 1, 2} with two target positions.
fn manual_batch() -> BiBatch {
    BiBatch {
        batch: 1,
        len: 2,
        images: vec![0.0],
        height: 1,
        width: 1,
        extents: vec![(1, 1)],
        l2r_input: vec![SOS, 1],
        l2r_target: vec![1, EOS],
        r2l_input: vec![EOS, 1],
        r2l_target: vec![EOS, SOS],
        token_mask: vec![true, true],
        ids: vec!["m".into()],
    }
}

fn t3(data: Vec<f64>, b: usize, l: usize) -> Tensor<f64> {
    let v = data.len() / (b * l);
    Tensor::new(data, &[b, l, v]).unwrap()
}

fn batch_of(data: &[Sample]) -> BiBatch {
    let refs: Vec<&Sample> = data.iter().collect();
    let l = refs.iter().map(|s| s.tokens.len() + 1).max().unwrap();
    make_bibatch(&refs, l).unwrap()
}

#[test]
fn uniform_logits_give_log_vocab() {
    let data = tiny_data(3, 1);
    let b = batch_of(&data);
    let z = t3(vec![0.0; b.batch * b.len * 26], b.batch, b.len);
    let loss = bidirectional_loss(&z, Some(&z), &b).unwrap();
    assert!((loss.value() - 26f64.ln()).abs() < 1e-12);
    assert!((loss.l2r - 26f64.ln()).abs() < 1e-12);
}

#[test]
fn confident_logits_give_vanishing_loss() {
    let data = tiny_data(3, 2);
    let b = batch_of(&data);
    let onehot = |targets: &[usize]| {
        let mut v = vec![0.0; targets.len() * 26];
        for (i, &t) in targets.iter().enumerate() {
            v[i * 26 + t] = 50.0;
        }
        t3(v, b.batch, b.len)
    };
    let loss = bidirectional_loss(&onehot(&b.l2r_target), Some(&onehot(&b.r2l_target)), &b).unwrap();
    assert!(loss.value() < 1e-12);
    assert_eq!(loss.correct, loss.counted);
}

#[test]
fn manual_two_token_example() {
    let b = manual_batch();
    let l2r = t3(vec![1.0, 2.0, 0.0, 0.0, 0.0, 3.0], 1, 2);
    let r2l = t3(vec![2.0, 0.0, 1.0, 1.0, 1.0, 1.0], 1, 2);
    let loss = bidirectional_loss(&l2r, Some(&r2l), &b).unwrap();
    // Per-row -log softmax values averaged by hand.
    assert!((loss.l2r - 0.2512644604326706).abs() < 1e-12);
    assert!((loss.r2l.unwrap() - 1.2531091265562448).abs() < 1e-12);
    assert!((loss.value() - 0.7521867934944577).abs() < 1e-12);
    assert_eq!((loss.correct, loss.counted), (2, 4));
}

#[test]
fn samples_weigh_equally_regardless_of_length() {
    let data = tiny_data(4, 3);
    let b = batch_of(&data);
    let mut rng = RngState::new(4);
    let n = b.batch * b.len * 26;
    let l2r = t3((0..n).map(|_| rng.uniform(-2.0, 2.0)).collect(), b.batch, b.len);
    let r2l = t3((0..n).map(|_| rng.uniform(-2.0, 2.0)).collect(), b.batch, b.len);
    let loss = bidirectional_loss(&l2r, Some(&r2l), &b).unwrap();
    let mut want = 0.0;
    for (logits, targets) in [(&l2r, &b.l2r_target), (&r2l, &b.r2l_target)] {
        for s in 0..b.batch {
            let mut sum = 0.0;
            let mut count = 0.0;
            for t in 0..b.len {
                let i = s * b.len + t;
                if !b.token_mask[i] {
                    continue;
                }
                let row = &logits.data()[i * 26..(i + 1) * 26];
                sum += row.iter().map(|x| x.exp()).sum::<f64>().ln() - row[targets[i]];
                count += 1.0;
            }
            want += sum / count;
        }
    }
    want /= 2.0 * b.batch as f64;
    assert!((loss.value() - want).abs() < 1e-12);
}

#[test]
fn pad_logits_do_not_matter() {
    let data = tiny_data(4, 5);
    let b = batch_of(&data);
    assert!(b.token_mask.iter().any(|&m| !m), "fixture needs padding");
    let mut rng = RngState::new(6);
    let n = b.batch * b.len * 26;
    let base: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
    let mut noisy = base.clone();
    for (i, &m) in b.token_mask.iter().enumerate() {
        if !m {
            for v in &mut noisy[i * 26..(i + 1) * 26] {
                *v += rng.uniform(-100.0, 100.0);
            }
        }
    }
    let a = bidirectional_loss(&t3(base.clone(), b.batch, b.len), Some(&t3(base, b.batch, b.len)), &b).unwrap();
    let c = bidirectional_loss(&t3(noisy.clone(), b.batch, b.len), Some(&t3(noisy, b.batch, b.len)), &b).unwrap();
    assert_eq!(a.value(), c.value());
}

#[test]
fn swapping_halves_keeps_total() {
    let data = tiny_data(5, 7);
    let b = batch_of(&data);
    let mut rng = RngState::new(8);
    let n = b.batch * b.len * 26;
    let x = t3((0..n).map(|_| rng.uniform(-3.0, 3.0)).collect(), b.batch, b.len);
    let y = t3((0..n).map(|_| rng.uniform(-3.0, 3.0)).collect(), b.batch, b.len);
    let mut swapped = b.clone();
    std::mem::swap(&mut swapped.l2r_target, &mut swapped.r2l_target);
    std::mem::swap(&mut swapped.l2r_input, &mut swapped.r2l_input);
    let a = bidirectional_loss(&x, Some(&y), &b).unwrap();
    let c = bidirectional_loss(&y, Some(&x), &swapped).unwrap();
    assert!((a.value() - c.value()).abs() < 1e-6);
}

#[test]
fn all_pad_batch_is_rejected() {
    let mut b = manual_batch();
    b.token_mask = vec![false, false];
    b.l2r_target = vec![PAD, PAD];
    let z = t3(vec![0.0; 6], 1, 2);
    assert!(bidirectional_loss(&z, Some(&z), &b).is_err());
}

#[test]
fn adadelta_first_step_matches_closed_form() {
    let cfg = OptimConfig { weight_decay: 0.0, ..Default::default() };
    for g in [0.5, -3.0, 1e-3] {
        let (mut th, mut a, mut u) = ([1.0], [0.0], [0.0]);
        adadelta_update(&mut th, &[g], &mut a, &mut u, &cfg, 1.0);
        let delta = -(cfg.eps / (cfg.rho * 0.0 + (1.0 - cfg.rho) * g * g + cfg.eps)).sqrt() * g;
        assert!((th[0] - (1.0 + delta)).abs() < 1e-15);
    }
}

#[test]
fn zero_gradient_only_decays() {
    let cfg = OptimConfig::default();
    let (mut th, mut a, mut u) = ([2.0, -1.0, 0.0], [0.0; 3], [0.0; 3]);
    adadelta_update(&mut th, &[0.0; 3], &mut a, &mut u, &cfg, 1.0);
    assert!(th[0] < 2.0 && th[0] > 0.0);
    assert!(th[1] > -1.0 && th[1] < 0.0);
    assert_eq!(th[2], 0.0);
}

#[test]
fn constant_gradient_updates_settle() {
    let cfg = OptimConfig { weight_decay: 0.0, ..Default::default() };
    let mut last = Vec::new();
    for g in [1e-3, 1.0, 50.0] {
        let (mut th, mut a, mut u) = ([0.0], [0.0], [0.0]);
        let mut prev = 0.0;
        let mut ratio = 0.0;
        for _ in 0..100 {
            let before = th[0];
            adadelta_update(&mut th, &[g], &mut a, &mut u, &cfg, 1.0);
            let step = (th[0] - before).abs();
            if prev > 0.0 {
                ratio = step / prev;
            }
            prev = step;
        }
        assert!((ratio - 1.0).abs() < 0.05, "g={g}: ratio {ratio}");
        if g * g > 1e3 * cfg.eps {
            last.push(prev);
        }
    }
    // Once g^2 dominates eps the settled step no longer scales with |g|.
    let spread = last.iter().cloned().fold(0.0, f64::max) / last.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(spread < 2.0, "{last:?}");
}

#[test]
fn optimizer_reports_nan_gradient_path() {
    let mut model = Model::<f64>::new(&tiny_config(26), 1).unwrap();
    let (path, t) = model.named_params().into_iter().nth(2).unwrap();
    let bad = t.mul(&Tensor::full(t.shape(), f64::NAN).unwrap()).unwrap().sum().unwrap();
    bad.backward().unwrap();
    let before: Vec<_> = model.named_params().into_iter().map(|(_, t)| t.to_vec()).collect();
    let mut opt = Adadelta::new(OptimConfig::default());
    let err = opt.step(&mut model).unwrap_err();
    assert!(err.to_string().contains(&path), "{err}");
    let after: Vec<_> = model.named_params().into_iter().map(|(_, t)| t.to_vec()).collect();
    assert_eq!(before, after);
}

#[test]
fn optimizer_state_mirrors_parameters() {
    let data = tiny_data(2, 9);
    let mut trainer = Trainer::new(Model::<f64>::new(&tiny_config(26), 2).unwrap(), TrainConfig::toy()).unwrap();
    trainer.step(&batch_of(&data)).unwrap();
    for (path, t) in trainer.model.named_params() {
        let (g, u) = trainer.optim.accumulators(&path).unwrap_or_else(|| panic!("no state for {path}"));
        assert_eq!(g.len(), t.numel());
        assert_eq!(u.len(), t.numel());
        assert!(g.iter().chain(u).all(|&v| v >= 0.0));
    }
}

#[test]
fn clipping_bounds_the_gradient_norm() {
    let mut model = Model::<f64>::new(&tiny_config(26), 3).unwrap();
    let (_, t) = model.named_params().into_iter().next().unwrap();
    t.scale(1e6).unwrap().sum().unwrap().backward().unwrap();
    let mut opt = Adadelta::new(OptimConfig::default());
    let s = opt.step(&mut model).unwrap();
    assert!(s.clipped && s.grad_norm > 100.0);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let data = tiny_data(2, 10);
    let b = batch_of(&data);
    let model = Model::<f64>::new(&tiny_config(26), 4).unwrap();
    let mut probe = model.clone();
    let params = probe.named_params();
    let picks = ["encoder.stem.weight", "encoder.proj.weight", "decoder.embed", "decoder.layers.0.ffn.w1.weight", "decoder.out.weight"];
    for name in picks {
        let (_, t) = params.iter().find(|(p, _)| p == name).unwrap_or_else(|| panic!("{name} missing"));
        let f = |inputs: &[Tensor<f64>]| -> crate::numerics::Result<Tensor<f64>> {
            let mut m = model.clone();
            let mut swap = |p: &str, s: Slot<'_, f64>| {
                if let (Slot::Param(slot), true) = (s, p == name) {
                    *slot = inputs[0].clone();
                }
            };
            m.visit(&mut Visitor::new(&mut swap));
            let mut rng = RngState::new(0);
            let (l, r) = forward_batch(&m, &b, true, &mut Phase::Train(&mut rng)).map_err(|e| NumericsError::Contract(e.to_string()))?;
            Ok(bidirectional_loss(&l, r.as_ref(), &b).map_err(|e| NumericsError::Contract(e.to_string()))?.total)
        };
        let opts = GradcheckOptions { step: 1e-5, max_coords: 24, ..Default::default() };
        let rep = gradcheck(f, &[(name.to_string(), t.clone())], &opts).unwrap();
        assert!(rep.max_rel_err() <= 1e-3, "{name}: {rep:?}");
    }
}

#[test]
fn initial_loss_is_near_log_vocab() {
    let data = tiny_data(8, 11);
    let b = batch_of(&data);
    let model = Model::<f32>::new(&ModelConfig::toy(26), 5).unwrap();
    let (l, r) = forward_batch(&model, &b, true, &mut Phase::Eval).unwrap();
    let loss = bidirectional_loss(&l, r.as_ref(), &b).unwrap().value();
    assert!((loss / 26f64.ln() - 1.0).abs() < 0.2, "{loss}");
}

#[test]
fn unidirectional_loss_equals_left_to_right_component() {
    let data = tiny_data(4, 12);
    let b = batch_of(&data);
    let model = Model::<f64>::new(&tiny_config(26), 6).unwrap();
    let (l, r) = forward_batch(&model, &b, true, &mut Phase::Eval).unwrap();
    let bi = bidirectional_loss(&l, r.as_ref(), &b).unwrap();
    let (l1, none) = forward_batch(&model, &b, false, &mut Phase::Eval).unwrap();
    assert!(none.is_none());
    let uni = bidirectional_loss(&l1, None, &b).unwrap();
    assert!((uni.value() - bi.l2r).abs() < 1e-12);
    assert!((bi.value() - (bi.l2r + bi.r2l.unwrap()) / 2.0).abs() < 1e-12);
}

#[test]
fn seeded_runs_are_identical() {
    let data = tiny_data(6, 13);
    let cfg = TrainConfig { epochs: 1, batch_size: 4, seed: 9, ..TrainConfig::toy() };
    let mut mc = tiny_config(26);
    mc.decoder.dropout = 0.2;
    let run = || train(Model::<f32>::new(&mc, 7).unwrap(), &data, &cfg, None, |_| Ok(())).unwrap().reports[0].loss;
    assert_eq!(run().to_bits(), run().to_bits());
}

#[test]
fn training_reduces_loss_and_keeps_best() {
    let data = tiny_data(1, 14);
    let cfg = TrainConfig { epochs: 15, batch_size: 1, ..TrainConfig::toy() };
    let mut seen = 0;
    let out = train(Model::<f32>::new(&tiny_config(26), 8).unwrap(), &data, &cfg, None, |r| {
        seen += 1;
        assert!(r.to_string().starts_with(&format!("epoch={} loss=", r.epoch)));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, 15);
    assert_eq!(out.stop, StopReason::Epochs);
    let first = out.reports[0].loss;
    let best = out.reports.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
    assert!(best < first);
    assert_eq!(out.reports[out.best_epoch - 1].loss, best);
}

#[test]
fn batch_plan_covers_every_sample_once() {
    let data = tiny_data(23, 15);
    let mut trainer = Trainer::new(Model::<f32>::new(&tiny_config(26), 9).unwrap(), TrainConfig { batch_size: 4, bucket: 3, ..TrainConfig::toy() }).unwrap();
    let plan = trainer.plan_batches(&data);
    let mut all: Vec<usize> = plan.iter().flatten().copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..23).collect::<Vec<_>>());
    assert!(plan.iter().all(|b| !b.is_empty() && b.len() <= 4));
}

#[test]
fn config_text_parsing() {
    let text = "# comment\nencoder.growth_rate = 12\n\ntrain.epochs=3 # trailing\noptim.lr = 0.5\n";
    let entries = parse_config_text(text).unwrap();
    assert_eq!(entries.len(), 3);
    assert_eq!(entries[1], ConfigEntry { key: "train.epochs".into(), value: "3".into(), line: 4 });
    let mut mc = ModelConfig::toy(26);
    let mut tc = TrainConfig::toy();
    for e in &entries {
        match e.key.strip_prefix("train.") {
            Some(k) => tc.set(k, &e.value).unwrap(),
            None => mc.set(&e.key, &e.value).unwrap(),
        }
    }
    assert_eq!((mc.encoder.growth_rate, tc.epochs, mc.optim.lr), (12, 3, 0.5));
    assert!(parse_config_text("a = 1\na = 2").unwrap_err().to_string().contains("already set"));
    assert!(parse_config_text("novalue").is_err());
    assert!(mc.set("decoder.bogus", "1").is_err());
    assert!(mc.set("decoder.heads", "four").unwrap_err().to_string().contains("decoder.heads"));
    assert!(tc.set("nope", "1").is_err());
}
