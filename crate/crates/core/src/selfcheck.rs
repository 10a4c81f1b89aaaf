//! Invariant suites runnable from a release binary.
//!
//! Each suite returns one [`Check`] per property so callers can print a
//! report and pick an exit status.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use crate::data::synth::{synth_generate, SynthParams};
use crate::data::{make_bibatch, Sample, Vocab, EOS, PAD, RESERVED, SOS};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{EncoderConfig, Memory};
use crate::evaluation::{token_edit_distance, EvalResult};
use crate::inference::{beam_search, joint_search, log_softmax, rank, Direction, Scorer, SearchParams};
use crate::model::{Model, ModelConfig};
use crate::nn::{Module, Phase, Slot, Visitor};
use crate::numerics::{
    gradcheck_resampled, AttnMask, Conv2dSpec, GradcheckOptions, NumericsError, RngState, RunningStats, Tensor,
};
use crate::training::{bidirectional_loss, forward_batch};
use crate::Result;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

type Inputs = Vec<(String, Tensor<f64>)>;
type OpFn = fn(&[Tensor<f64>]) -> crate::numerics::Result<Tensor<f64>>;

struct OpCase {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    f: OpFn,
}

fn uniform(rng: &mut RngState, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.uniform(lo, hi)).collect(), shape).expect("shape matches data")
}

/// Fixed random weighting that turns any output into a scalar whose
/// gradient touches every element.
fn project(y: Tensor<f64>) -> crate::numerics::Result<Tensor<f64>> {
    let mut rng = RngState::new(0x5eed ^ y.numel() as u64);
    let w = uniform(&mut rng, y.shape(), -1.0, 1.0);
    y.mul(&w)?.sum()
}

fn conv(x: &[Tensor<f64>], stride: usize) -> crate::numerics::Result<Tensor<f64>> {
    x[0].conv2d(&x[1], x.get(2), Conv2dSpec { stride, padding: 1 })
}

const OPS: &[OpCase] = &[
    OpCase { name: "matmul", shapes: &[&[3, 4], &[4, 5]], f: |x| project(x[0].matmul(&x[1])?) },
    OpCase { name: "matmul_t", shapes: &[&[2, 3, 4], &[5, 4]], f: |x| project(x[0].matmul_t(&x[1])?) },
    OpCase { name: "bmm", shapes: &[&[2, 3, 4], &[2, 4, 5]], f: |x| project(x[0].bmm(&x[1], false)?) },
    OpCase { name: "bmm_t", shapes: &[&[2, 3, 4], &[2, 5, 4]], f: |x| project(x[0].bmm(&x[1], true)?) },
    OpCase { name: "add", shapes: &[&[3, 4], &[3, 4]], f: |x| project(x[0].add(&x[1])?) },
    OpCase { name: "mul", shapes: &[&[3, 4], &[3, 4]], f: |x| project(x[0].mul(&x[1])?) },
    OpCase { name: "add_bias", shapes: &[&[2, 3, 4], &[4]], f: |x| project(x[0].add_bias(&x[1])?) },
    OpCase { name: "scale", shapes: &[&[3, 4]], f: |x| project(x[0].scale(-0.7)?) },
    OpCase { name: "relu", shapes: &[&[4, 5]], f: |x| project(x[0].relu()?) },
    OpCase {
        name: "dropout",
        shapes: &[&[3, 4]],
        f: |x| {
            let keep: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
            project(x[0].dropout(&keep, 0.3)?)
        },
    },
    OpCase { name: "sum", shapes: &[&[3, 4]], f: |x| x[0].mul(&x[0])?.sum() },
    OpCase { name: "mean", shapes: &[&[3, 4]], f: |x| x[0].mul(&x[0])?.mean() },
    OpCase {
        name: "reshape_permute",
        shapes: &[&[2, 3, 4]],
        f: |x| project(x[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?),
    },
    OpCase { name: "transpose", shapes: &[&[3, 5]], f: |x| project(x[0].transpose()?) },
    OpCase {
        name: "concat",
        shapes: &[&[2, 3], &[2, 2]],
        f: |x| project(Tensor::concat(&[x[0].clone(), x[1].clone()], 1)?),
    },
    OpCase { name: "narrow", shapes: &[&[5, 3]], f: |x| project(x[0].narrow(1, 3)?) },
    OpCase { name: "gather_rows", shapes: &[&[5, 3]], f: |x| project(x[0].gather_rows(&[4, 0, 4, 2])?) },
    OpCase { name: "embedding", shapes: &[&[6, 4]], f: |x| project(x[0].embedding(&[5, 1, 1])?) },
    OpCase { name: "softmax", shapes: &[&[3, 5]], f: |x| project(x[0].softmax()?) },
    OpCase {
        name: "softmax_causal",
        shapes: &[&[2, 3, 4]],
        f: |x| project(x[0].softmax_masked(&AttnMask::Causal { offset: 1 })?),
    },
    OpCase {
        name: "softmax_keys",
        shapes: &[&[4, 2, 3]],
        f: |x| {
            let valid = Arc::new(vec![true, false, true, true, true, false]);
            project(x[0].softmax_masked(&AttnMask::Keys { valid, groups_per_row: 2 })?)
        },
    },
    OpCase {
        name: "layer_norm",
        shapes: &[&[3, 6], &[6], &[6]],
        f: |x| project(x[0].layer_norm(&x[1], &x[2], 1e-5)?),
    },
    OpCase {
        name: "cross_entropy",
        shapes: &[&[4, 5]],
        f: |x| x[0].cross_entropy(&[0, 3, 1, 4], &[0.5, 1.0, 0.0, 0.25]),
    },
    OpCase { name: "conv2d", shapes: &[&[2, 2, 5, 6], &[3, 2, 3, 3], &[3]], f: |x| project(conv(x, 1)?) },
    OpCase { name: "conv2d_stride2", shapes: &[&[1, 2, 5, 6], &[3, 2, 3, 3]], f: |x| project(conv(x, 2)?) },
    OpCase { name: "avg_pool2d", shapes: &[&[1, 2, 5, 7]], f: |x| project(x[0].avg_pool2d()?) },
    OpCase {
        name: "batch_norm2d",
        shapes: &[&[3, 2, 3, 4], &[2], &[2]],
        f: |x| {
            let running = Mutex::new(RunningStats::new(2));
            project(x[0].batch_norm2d(&x[1], &x[2], &running, true, 0.1, 1e-5)?)
        },
    },
];

/// Finite-difference checks of every differentiable op and of the whole
/// toy model, one [`Check`] per op aggregated over `seeds`.
pub fn gradient_suite(seeds: &[u64]) -> Result<Vec<Check>> {
    let opts = GradcheckOptions::default();
    let mut out = Vec::new();
    for case in OPS {
        let mut worst = 0f64;
        let mut failures = Vec::new();
        let mut resamples = 0;
        for &seed in seeds {
            let sample = |rng: &mut RngState| -> Inputs {
                case.shapes.iter().enumerate().map(|(i, s)| (format!("x{i}"), uniform(rng, s, -1.5, 1.5))).collect()
            };
            let mut rng = RngState::new(seed);
            let (rep, tries) =
                gradcheck_resampled(case.f, sample, &mut rng, 8, &GradcheckOptions { seed, ..opts.clone() })?;
            resamples += tries;
            worst = worst.max(rep.max_rel_err());
            if !rep.passed() {
                failures.push(seed);
            }
        }
        out.push(Check::new(
            format!("gradient {}", case.name),
            failures.is_empty(),
            format!("{} seeds, max rel err {worst:.2e}, resamples {resamples}, failing seeds {failures:?}", seeds.len()),
        ));
    }
    out.push(model_gradient(seeds)?);
    Ok(out)
}

/// Smallest model exercising every layer kind: one dense block and one
/// decoder layer at width 8.
pub fn tiny_model_config(vocab_size: usize) -> ModelConfig {
    let mut c = ModelConfig::toy(vocab_size);
    c.encoder = EncoderConfig {
        growth_rate: 2,
        block_depth: 2,
        n_blocks: 1,
        d_model: 8,
        stem_channels: 4,
        ..EncoderConfig::default()
    };
    c.decoder = DecoderConfig { d_model: 8, heads: 2, d_ff: 16, layers: 1, dropout: 0.0, ..c.decoder };
    c
}

fn tiny_samples(seed: u64, n: usize) -> Result<(Vocab, Vec<Sample>)> {
    let vocab = crate::data::synth::synth_vocab();
    let mut params = SynthParams::default();
    params.raster.target_height = 12;
    params.raster.margin = 2;
    params.depth = 1;
    let samples = synth_generate(&mut RngState::new(seed), n, &params, &vocab)?;
    Ok((vocab, samples))
}

fn numerics_err(e: crate::Error) -> NumericsError {
    NumericsError::Contract(e.to_string())
}

/// Gradient of the bidirectional loss with respect to every parameter of
/// the tiny model, in training mode so batch statistics are exercised.
fn model_gradient(seeds: &[u64]) -> Result<Check> {
    let opts = GradcheckOptions { step: 1e-6, max_coords: 3, ..Default::default() };
    let mut worst = 0f64;
    let mut failures = Vec::new();
    let mut tensors = 0;
    for &seed in seeds {
        let (vocab, samples) = tiny_samples(seed, 2)?;
        let refs: Vec<&Sample> = samples.iter().collect();
        let l_max = refs.iter().map(|s| s.tokens.len() + 1).max().unwrap_or(1);
        let batch = make_bibatch(&refs, l_max)?;
        let base = Model::<f64>::new(&tiny_model_config(vocab.len()), seed)?;
        let f = |inputs: &[Tensor<f64>]| -> crate::numerics::Result<Tensor<f64>> {
            let mut m = base.clone();
            let mut i = 0;
            let mut swap = |_: &str, s: Slot<'_, f64>| {
                if let Slot::Param(slot) = s {
                    *slot = inputs[i].clone();
                    i += 1;
                }
            };
            m.visit(&mut Visitor::new(&mut swap));
            let mut rng = RngState::new(0);
            let (l, r) = forward_batch(&m, &batch, true, &mut Phase::Train(&mut rng)).map_err(numerics_err)?;
            Ok(bidirectional_loss(&l, r.as_ref(), &batch).map_err(numerics_err)?.total)
        };
        // Parameters are fixed by the seed, so a kink is resolved by
        // perturbing them slightly instead of redrawing the model.
        let params = base.clone().named_params();
        tensors = params.len();
        let sample = |rng: &mut RngState| -> Inputs {
            params
                .iter()
                .map(|(n, t)| {
                    let data = t.data().iter().map(|&v| v + rng.uniform(-1e-3, 1e-3)).collect();
                    (n.clone(), Tensor::new(data, t.shape()).expect("same shape"))
                })
                .collect()
        };
        let mut rng = RngState::new(seed ^ 0xface);
        let (rep, _) = gradcheck_resampled(f, sample, &mut rng, 4, &GradcheckOptions { seed, ..opts.clone() })?;
        worst = worst.max(rep.max_rel_err());
        if !rep.passed() {
            let bad = rep.inputs.iter().filter(|r| r.max_rel_err > rep.tolerance).map(|r| r.name.clone());
            failures.push(format!("seed {seed}: {:?}", bad.collect::<Vec<_>>()));
        }
    }
    Ok(Check::new(
        "gradient tiny model",
        failures.is_empty(),
        format!("{} seeds x {tensors} tensors, max rel err {worst:.2e}, failures {failures:?}", seeds.len()),
    ))
}

fn random_decoder(regular: usize, seed: u64) -> Result<Decoder<f64>> {
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
    let mut dec = Decoder::new(&cfg, &mut rng)?;
    // Scaled weights give peaked, well separated distributions.
    let mut f = |_: &str, s: Slot<'_, f64>| {
        if let Slot::Param(t) = s {
            let data = t.data().iter().map(|&v| 3.0 * v + rng.uniform(-0.3, 0.3)).collect();
            *t = Tensor::param(data, t.shape()).expect("same shape");
        }
    };
    dec.visit(&mut Visitor::new(&mut f));
    Ok(dec)
}

fn random_memory(seed: u64, valid: usize) -> Result<Memory<f64>> {
    let mut rng = RngState::new(seed);
    let mut mask = vec![true; 6];
    mask[valid.min(6)..].fill(false);
    Ok(Memory { features: uniform(&mut rng, &[1, 6, 8], -1.0, 1.0), key_mask: Arc::new(mask), grid: (2, 3), extents: vec![(2, 3)] })
}

/// Log probability of `core` followed by the stop token, from one
/// teacher-forced pass.
fn full_pass_logp(dec: &Decoder<f64>, mem: &Memory<f64>, dir: Direction, core: &[usize]) -> Result<f64> {
    let input: Vec<usize> = std::iter::once(dir.start()).chain(core.iter().copied()).collect();
    let len = input.len();
    let logits = dec.forward_teacher_forced(mem, &[0], &input, len, &mut Phase::Eval)?;
    let v = dec.vocab_size();
    Ok((0..len).map(|t| log_softmax(&logits.data()[t * v..(t + 1) * v])[core.get(t).copied().unwrap_or(dir.stop())]).sum())
}

fn enumerate_cores(regular: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|p: &Vec<usize>| (RESERVED..RESERVED + regular).map(move |t| [p.as_slice(), &[t]].concat()))
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

fn argmax_core(cores: &[Vec<usize>], scores: &[f64]) -> Vec<usize> {
    let mut best = 0;
    for i in 1..cores.len() {
        if rank((scores[i], &cores[i]), (scores[best], &cores[best])).is_lt() {
            best = i;
        }
    }
    cores[best].clone()
}

/// Exhaustive enumeration against beam and joint search winners on small
/// random decoders where a wide beam covers every sequence.
pub fn decoding_oracle(seeds: &[u64]) -> Result<Check> {
    let max_len = 3;
    let mut cases = 0;
    let mut failures = Vec::new();
    for regular in 1..=3 {
        let cores = enumerate_cores(regular, max_len);
        for &seed in seeds {
            let dec = random_decoder(regular, seed)?;
            let mem = random_memory(seed + 100, 5)?;
            let scorer = Scorer::new(&[&dec], &[&mem], 0)?;
            let lp = |dir| cores.iter().map(|c| full_pass_logp(&dec, &mem, dir, c)).collect::<Result<Vec<f64>>>();
            let (fwd, bwd) = (lp(Direction::L2R)?, lp(Direction::R2L)?);
            for alpha in [0.0, 1.0] {
                let params = SearchParams { beam: 64, max_len, alpha, ..Default::default() };
                for (dir, lps) in [(Direction::L2R, &fwd), (Direction::R2L, &bwd)] {
                    let scores: Vec<f64> = cores.iter().zip(lps).map(|(c, &l)| params.penalized(l, c.len())).collect();
                    let want = argmax_core(&cores, &scores);
                    let got = beam_search(&scorer, dir, &params)?;
                    cases += 1;
                    if got.first().map(|h| h.core().to_vec()) != Some(want.clone()) {
                        failures.push(format!("beam regular={regular} seed={seed} alpha={alpha} {dir:?}"));
                    }
                }
                // Every core is found in both directions, so the joint
                // winner maximizes the summed penalized scores in reading
                // order.
                let rev = |c: &Vec<usize>| c.iter().rev().copied().collect::<Vec<_>>();
                let mut best: Option<(f64, Vec<usize>)> = None;
                for (i, c) in cores.iter().enumerate() {
                    let j = cores.iter().position(|d| *d == rev(c)).expect("closed under reversal");
                    let s = params.penalized(fwd[i], c.len()) + params.rescore_weight * params.penalized(bwd[j], c.len());
                    if best.as_ref().is_none_or(|(bs, bc)| rank((s, c), (*bs, bc)).is_lt()) {
                        best = Some((s, c.clone()));
                    }
                }
                let got = joint_search(&scorer, &params)?;
                cases += 1;
                let (bs, bc) = best.expect("nonempty");
                if got.best.tokens != bc || (got.best.score - bs).abs() > 1e-9 {
                    failures.push(format!("joint regular={regular} seed={seed} alpha={alpha}"));
                }
            }
        }
    }
    Ok(Check::new("decoding oracle", failures.is_empty(), format!("{cases} cases, failures {failures:?}")))
}

/// Causality under perturbation of later tokens and agreement between the
/// incremental and teacher-forced decoders on `cases` random cases.
pub fn decoder_consistency(cases: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = RngState::new(seed);
    let (mut causal_bad, mut equiv_worst) = (0, 0f64);
    for case in 0..cases {
        let regular = 1 + rng.below(5);
        let dec = random_decoder(regular, seed.wrapping_add(case as u64))?;
        let mem = random_memory(rng.next_u64(), 1 + rng.below(6))?;
        let v = dec.vocab_size();
        let len = 2 + rng.below(8);
        let mut ids: Vec<usize> = vec![SOS];
        ids.extend((1..len).map(|_| RESERVED + rng.below(regular)));
        let full = dec.forward_teacher_forced(&mem, &[0], &ids, len, &mut Phase::Eval)?;
        let cut = 1 + rng.below(len - 1);
        let mut changed = ids.clone();
        for t in changed.iter_mut().skip(cut) {
            *t = if *t == EOS { RESERVED } else { EOS };
        }
        let other = dec.forward_teacher_forced(&mem, &[0], &changed, len, &mut Phase::Eval)?;
        if full.data()[..cut * v] != other.data()[..cut * v] {
            causal_bad += 1;
        }
        let cache = dec.memory_cache(&mem, 0)?;
        for t in 0..len {
            let inc = dec.decode_prefix(&cache, &ids[..=t])?;
            for (a, b) in inc.iter().zip(&full.data()[t * v..(t + 1) * v]) {
                equiv_worst = equiv_worst.max((a - b).abs());
            }
        }
    }
    Ok(vec![
        Check::new("decoder causality", causal_bad == 0, format!("{cases} cases, {causal_bad} with leaked future tokens")),
        Check::new(
            "incremental decoding",
            equiv_worst <= 1e-5,
            format!("{cases} cases, max |incremental - full| {equiv_worst:.2e}"),
        ),
    ])
}

/// Reversal structure of random bidirectional batches and invariance of
/// the loss when the two halves trade places.
pub fn bidirectional_construction(batches: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = RngState::new(seed);
    let mut bad = 0;
    for _ in 0..batches {
        let n = 1 + rng.below(4);
        let samples: Vec<Sample> = (0..n)
            .map(|i| {
                let len = 1 + rng.below(7);
                let tokens = (0..len).map(|_| RESERVED + rng.below(10)).collect();
                let img = crate::data::Bitmap::new(1 + rng.below(5), 1 + rng.below(5));
                Sample::new(format!("s{i}"), img, tokens)
            })
            .collect::<std::result::Result<_, _>>()?;
        let refs: Vec<&Sample> = samples.iter().collect();
        let l_max = refs.iter().map(|s| s.tokens.len() + 1).max().unwrap_or(1) + rng.below(3);
        let b = make_bibatch(&refs, l_max)?;
        for (r, s) in samples.iter().enumerate() {
            let y = &s.tokens;
            let k = y.len();
            let rev: Vec<usize> = y.iter().rev().copied().collect();
            let pad = |mut v: Vec<usize>| {
                v.resize(b.len, PAD);
                v
            };
            let ok = b.row(&b.l2r_input, r) == &pad([&[SOS], &y[..]].concat())[..]
                && b.row(&b.l2r_target, r) == &pad([&y[..], &[EOS]].concat())[..]
                && b.row(&b.r2l_input, r) == &pad([&[EOS], &rev[..]].concat())[..]
                && b.row(&b.r2l_target, r) == &pad([&rev[..], &[SOS]].concat())[..]
                && b.lengths()[r] == k + 1;
            if !ok {
                bad += 1;
            }
        }
    }
    let (_, samples) = tiny_samples(seed, 5)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let l_max = refs.iter().map(|s| s.tokens.len() + 1).max().unwrap_or(1);
    let b = make_bibatch(&refs, l_max)?;
    let v = 26;
    let shape = [b.batch, b.len, v];
    let x = uniform(&mut rng, &shape, -3.0, 3.0);
    let y = uniform(&mut rng, &shape, -3.0, 3.0);
    let mut swapped = b.clone();
    std::mem::swap(&mut swapped.l2r_target, &mut swapped.r2l_target);
    std::mem::swap(&mut swapped.l2r_input, &mut swapped.r2l_input);
    let gap = (bidirectional_loss(&x, Some(&y), &b)?.value() - bidirectional_loss(&y, Some(&x), &swapped)?.value()).abs();
    Ok(vec![
        Check::new("batch reversal", bad == 0, format!("{batches} batches, {bad} malformed rows")),
        Check::new("loss swap symmetry", gap <= 1e-6, format!("|difference| {gap:.2e}")),
    ])
}

/// Metric axioms of the token edit distance and ordering of the tolerant
/// rates on random perturbations.
pub fn metric_properties(triples: usize, seed: u64) -> Check {
    let mut rng = RngState::new(seed);
    let seq = |rng: &mut RngState| (0..rng.below(10)).map(|_| rng.below(5)).collect::<Vec<_>>();
    let mut bad = 0;
    for _ in 0..triples {
        let (a, b, c) = (seq(&mut rng), seq(&mut rng), seq(&mut rng));
        let (ab, bc, ac) = (token_edit_distance(&a, &b), token_edit_distance(&b, &c), token_edit_distance(&a, &c));
        if ab != token_edit_distance(&b, &a) || (ab == 0) != (a == b) || ac > ab + bc {
            bad += 1;
        }
        let distances: Vec<usize> = (0..1 + rng.below(20)).map(|_| rng.below(5)).collect();
        let r = EvalResult::from_distances(&distances);
        if !(r.exprate <= r.le1_rate && r.le1_rate <= r.le2_rate && r.le2_rate <= 1.0) {
            bad += 1;
        }
    }
    Check::new("metric properties", bad == 0, format!("{triples} triples, {bad} violations"))
}

/// Every suite; `quick` trims seed and case counts for a fast smoke run.
pub fn run_all(quick: bool) -> Result<Vec<(Check, f64)>> {
    let seeds: Vec<u64> = (0..if quick { 3 } else { 20 }).collect();
    let cases = if quick { 10 } else { 50 };
    let mut out = Vec::new();
    let mut timed = |checks: Result<Vec<Check>>, start: Instant| -> Result<()> {
        let secs = start.elapsed().as_secs_f64();
        out.extend(checks?.into_iter().map(|c| (c, secs)));
        Ok(())
    };
    let t = Instant::now();
    timed(gradient_suite(&seeds), t)?;
    let t = Instant::now();
    timed(decoding_oracle(&seeds[..seeds.len().min(5)]).map(|c| vec![c]), t)?;
    let t = Instant::now();
    timed(decoder_consistency(cases, 1), t)?;
    let t = Instant::now();
    timed(bidirectional_construction(if quick { 100 } else { 1000 }, 2), t)?;
    let t = Instant::now();
    timed(Ok(vec![metric_properties(if quick { 100 } else { 1000 }, 3)]), t)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        for (c, _) in run_all(true).unwrap() {
            assert!(c.passed, "{c}");
        }
    }
}
