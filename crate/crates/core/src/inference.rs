//! Beam search in either direction, joint search that rescores each
//! direction's hypotheses with the other, and ensembles that average
//! per-step probabilities across models.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use crate::data::{Bitmap, EOS, PAD, SOS};
use crate::decoder::{Decoder, DecoderState, MemoryCache};
use crate::encoder::Memory;
use crate::model::Model;
use crate::nn::Phase;
use crate::numerics::{Float, Tensor};
use crate::training::parse_value;
use crate::{io_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    L2R,
    R2L,
}

impl Direction {
    pub fn start(self) -> usize {
        match self {
            Direction::L2R => SOS,
            Direction::R2L => EOS,
        }
    }

    pub fn stop(self) -> usize {
        self.opposite().start()
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::L2R => Direction::R2L,
            Direction::R2L => Direction::L2R,
        }
    }
}

/// How the reverse log-likelihood enters the joint score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RescoreSign {
    /// `score + w * reverse_logp / len^alpha`: agreement is rewarded.
    AddLogLikelihood,
    /// `score + w * reverse_loss / len^alpha` with `loss = -logp`.
    AddLoss,
}

/// Which searches produce the final sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Joint,
    L2R,
    R2L,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchParams {
    pub beam: usize,
    /// Longest core sequence; the stop symbol is forced after it.
    pub max_len: usize,
    /// Length penalty exponent: hypotheses rank by `logp / len^alpha`.
    pub alpha: f64,
    pub rescore_weight: f64,
    pub rescore_sign: RescoreSign,
    pub mode: DecodeMode,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            beam: 10,
            max_len: 200,
            alpha: 1.0,
            rescore_weight: 1.0,
            rescore_sign: RescoreSign::AddLogLikelihood,
            mode: DecodeMode::Joint,
        }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.max_len == 0 || !(self.alpha >= 0.0) || !self.rescore_weight.is_finite() {
            return Err(Error::Config(format!("invalid search parameters {self:?}")));
        }
        Ok(())
    }

    /// `logp / len^alpha`.
    pub fn penalized(&self, logp: f64, len: usize) -> f64 {
        logp / (len as f64).powf(self.alpha)
    }

    /// Applies one `search.*` key without its prefix.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "beam" => self.beam = parse_value(key, value)?,
            "max_len" => self.max_len = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "rescore_weight" => self.rescore_weight = parse_value(key, value)?,
            "rescore_sign" => {
                self.rescore_sign = match value.trim() {
                    "loglik" => RescoreSign::AddLogLikelihood,
                    "loss" => RescoreSign::AddLoss,
                    v => return Err(Error::Config(format!("rescore_sign: expected loglik or loss, got {v:?}"))),
                }
            }
            "mode" => {
                self.mode = match value.trim() {
                    "joint" => DecodeMode::Joint,
                    "l2r" => DecodeMode::L2R,
                    "r2l" => DecodeMode::R2L,
                    v => return Err(Error::Config(format!("mode: expected joint, l2r or r2l, got {v:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key search.{key}"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub direction: Direction,
    /// Start symbol followed by the core; the stop symbol is never stored.
    pub ids: Vec<usize>,
    /// Includes the stop symbol's log probability once finished.
    pub logp: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens after the start symbol, in decoding order.
    pub fn core(&self) -> &[usize] {
        &self.ids[1..]
    }

    /// Core in reading (left-to-right) order.
    pub fn reading_order(&self) -> Vec<usize> {
        let mut c = self.core().to_vec();
        if self.direction == Direction::R2L {
            c.reverse();
        }
        c
    }
}

/// Descending score, then shorter, then lexicographically smaller.
pub fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.len().cmp(&b.1.len())).then_with(|| a.1.cmp(b.1))
}

/// Next-token log probabilities for one image under one or more models.
///
/// With several members, per-step probabilities are averaged before the
/// logarithm is taken. Decoder states are stored member-major:
/// `states[member][hypothesis]`.
pub struct Scorer<'a, T: Float> {
    members: Vec<(&'a Decoder<T>, MemoryCache<T>)>,
    vocab: usize,
    max_positions: usize,
}

impl<'a, T: Float> Scorer<'a, T> {
    /// `memories[m]` must come from the encoder paired with `decoders[m]`;
    /// `entry` selects the batch entry of every memory.
    pub fn new(decoders: &[&'a Decoder<T>], memories: &[&Memory<T>], entry: usize) -> Result<Self> {
        if decoders.is_empty() || decoders.len() != memories.len() {
            return Err(Error::Config(format!("{} decoders for {} memories", decoders.len(), memories.len())));
        }
        let vocab = decoders[0].vocab_size();
        if let Some(d) = decoders.iter().find(|d| d.vocab_size() != vocab) {
            return Err(Error::Config(format!(
                "ensemble members disagree on vocabulary size: {vocab} and {}",
                d.vocab_size()
            )));
        }
        let members = decoders
            .iter()
            .zip(memories)
            .map(|(d, m)| Ok((*d, d.memory_cache(m, entry)?)))
            .collect::<Result<_>>()?;
        let max_positions = decoders.iter().map(|d| d.config.max_positions).min().unwrap_or(0);
        Ok(Scorer { members, vocab, max_positions })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn members(&self) -> usize {
        self.members.len()
    }

    /// Fresh states for `n` hypotheses.
    pub fn fresh(&self, n: usize) -> Vec<Vec<DecoderState<T>>> {
        self.members
            .iter()
            .map(|(d, _)| (0..n).map(|_| DecoderState::new(d.layers.len())).collect())
            .collect()
    }

    /// Feeds `tokens[i]` to hypothesis `i` and returns its next-token log
    /// probabilities.
    pub fn step(&self, states: &mut [Vec<DecoderState<T>>], tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let n = tokens.len();
        let mut per_member = Vec::with_capacity(self.members.len());
        for ((dec, cache), st) in self.members.iter().zip(states.iter_mut()) {
            let logits = dec.decode_step(cache, &mut st[..n], tokens)?;
            per_member.push(logits.iter().map(|row| log_softmax(row)).collect::<Vec<_>>());
        }
        if per_member.len() == 1 {
            return Ok(per_member.pop().expect("one member"));
        }
        let ln_m = (per_member.len() as f64).ln();
        Ok((0..n)
            .map(|i| {
                (0..self.vocab)
                    .map(|v| {
                        let mx = per_member.iter().map(|m| m[i][v]).fold(f64::NEG_INFINITY, f64::max);
                        if mx == f64::NEG_INFINITY {
                            return mx;
                        }
                        let s: f64 = per_member.iter().map(|m| (m[i][v] - mx).exp()).sum();
                        mx + s.ln() - ln_m
                    })
                    .collect()
            })
            .collect())
    }
}

pub fn log_softmax<T: Float>(row: &[T]) -> Vec<f64> {
    let mx = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|x| (x.f64() - mx).exp()).sum::<f64>().ln();
    row.iter().map(|x| x.f64() - lse).collect()
}

fn check_len<T: Float>(scorer: &Scorer<'_, T>, params: &SearchParams) -> Result<()> {
    params.validate()?;
    if params.max_len + 1 > scorer.max_positions {
        return Err(Error::Config(format!(
            "max_len {} needs {} decoder positions, model has {}",
            params.max_len,
            params.max_len + 1,
            scorer.max_positions
        )));
    }
    Ok(())
}

/// Up to `beam` finished hypotheses, best first by `logp / len^alpha`.
///
/// Each step expands every live hypothesis; candidates are visited in
/// descending log probability, those ending in the stop symbol joining the
/// finished pool, until `beam` continuing candidates have been kept. Search
/// ends when nothing is live, or when the pool holds `beam` entries and no
/// live prefix can reach the worst of them: extending a prefix never raises
/// its log probability, so `logp / max_len^alpha` bounds its final score.
pub fn beam_search<T: Float>(scorer: &Scorer<'_, T>, direction: Direction, params: &SearchParams) -> Result<Vec<Hypothesis>> {
    check_len(scorer, params)?;
    let k = params.beam;
    let (start, stop) = (direction.start(), direction.stop());
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![start], 0.0)];
    let mut states = scorer.fresh(1);
    let mut pool: Vec<Hypothesis> = Vec::new();
    for t in 0..=params.max_len {
        let last: Vec<usize> = live.iter().map(|(ids, _)| *ids.last().expect("start symbol")).collect();
        let lp = scorer.step(&mut states, &last)?;
        let allowed = |v: usize| {
            v != PAD && v != start && (v != stop || t > 0) && (v == stop || t < params.max_len)
        };
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (i, (_, base)) in live.iter().enumerate() {
            for (v, &l) in lp[i].iter().enumerate() {
                if allowed(v) && l > f64::NEG_INFINITY {
                    cands.push((base + l, i, v));
                }
            }
        }
        // Live prefixes are ordered, so (parent, token) is lexicographic.
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let mut next: Vec<(usize, usize, f64)> = Vec::new();
        for &(l, i, v) in &cands {
            if next.len() == k {
                break;
            }
            if v == stop {
                pool.push(Hypothesis { direction, ids: live[i].0.clone(), logp: l, finished: true });
            } else {
                next.push((i, v, l));
            }
        }
        if next.is_empty() {
            break;
        }
        states = states
            .iter()
            .map(|member| next.iter().map(|&(i, _, _)| member[i].clone()).collect())
            .collect();
        live = next
            .iter()
            .map(|&(i, v, l)| {
                let mut ids = live[i].0.clone();
                ids.push(v);
                (ids, l)
            })
            .collect();
        if pool.len() >= k {
            sort_pool(&mut pool, params);
            let worst = params.penalized(pool[k - 1].logp, pool[k - 1].core().len());
            let best_live = live.iter().map(|(_, l)| *l).fold(f64::NEG_INFINITY, f64::max);
            if params.penalized(best_live, params.max_len) < worst {
                break;
            }
        }
    }
    sort_pool(&mut pool, params);
    pool.truncate(k);
    Ok(pool)
}

fn sort_pool(pool: &mut [Hypothesis], params: &SearchParams) {
    pool.sort_by(|a, b| {
        rank((params.penalized(a.logp, a.core().len()), a.core()), (params.penalized(b.logp, b.core().len()), b.core()))
    });
}

/// Log probability of each `core` (in `direction`'s order) followed by
/// the stop symbol, starting from the start symbol.
pub fn sequence_logp<T: Float>(scorer: &Scorer<'_, T>, direction: Direction, cores: &[Vec<usize>]) -> Result<Vec<f64>> {
    let n = cores.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if let Some(c) = cores.iter().find(|c| c.len() + 1 > scorer.max_positions) {
        return Err(Error::Config(format!("sequence of {} tokens exceeds the decoder's positions", c.len())));
    }
    // Longest first, so the rows still running at step t form a prefix.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(cores[i].len()));
    let mut states = scorer.fresh(n);
    let mut out = vec![0f64; n];
    for t in 0..=cores[order[0]].len() {
        let active = order.iter().take_while(|&&i| cores[i].len() >= t).count();
        for member in states.iter_mut() {
            member.truncate(active);
        }
        let tokens: Vec<usize> =
            order[..active].iter().map(|&i| if t == 0 { direction.start() } else { cores[i][t - 1] }).collect();
        let lp = scorer.step(&mut states, &tokens)?;
        for (row, &i) in order[..active].iter().enumerate() {
            let target = cores[i].get(t).copied().unwrap_or(direction.stop());
            out[i] += lp[row][target];
        }
    }
    Ok(out)
}

/// Log likelihood of each hypothesis read backwards by the opposite
/// direction, stop symbol included.
pub fn reverse_rescore<T: Float>(scorer: &Scorer<'_, T>, hyps: &[Hypothesis]) -> Result<Vec<f64>> {
    let mut out = vec![0f64; hyps.len()];
    for dir in [Direction::L2R, Direction::R2L] {
        let idx: Vec<usize> = (0..hyps.len()).filter(|&i| hyps[i].direction == dir).collect();
        let cores: Vec<Vec<usize>> = idx.iter().map(|&i| hyps[i].core().iter().rev().copied().collect()).collect();
        for (&i, lp) in idx.iter().zip(sequence_logp(scorer, dir.opposite(), &cores)?) {
            out[i] = lp;
        }
    }
    Ok(out)
}

/// A candidate of the final selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    /// Core in reading order.
    pub tokens: Vec<usize>,
    pub direction: Direction,
    /// Penalized score from the hypothesis' own search.
    pub search_score: f64,
    /// Opposite-direction log likelihood; zero when not rescored.
    pub reverse_logp: f64,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub best: Scored,
    /// Every candidate considered, best first.
    pub candidates: Vec<Scored>,
}

fn select(mut candidates: Vec<Scored>) -> Result<SearchOutcome> {
    candidates.sort_by(|a, b| rank((a.score, &a.tokens), (b.score, &b.tokens)).then(a.direction.cmp(&b.direction)));
    let best = candidates.first().cloned().ok_or_else(|| Error::Config("search produced no hypotheses".into()))?;
    Ok(SearchOutcome { best, candidates })
}

/// Beam search in both directions, each hypothesis rescored by the other
/// direction, argmax of the combined score over both pools.
pub fn joint_search<T: Float>(scorer: &Scorer<'_, T>, params: &SearchParams) -> Result<SearchOutcome> {
    let mut hyps = beam_search(scorer, Direction::L2R, params)?;
    hyps.extend(beam_search(scorer, Direction::R2L, params)?);
    let reverse = if params.rescore_weight != 0.0 { reverse_rescore(scorer, &hyps)? } else { vec![0.0; hyps.len()] };
    let sign = match params.rescore_sign {
        RescoreSign::AddLogLikelihood => 1.0,
        RescoreSign::AddLoss => -1.0,
    };
    let candidates = hyps
        .iter()
        .zip(reverse)
        .map(|(h, rev)| {
            let len = h.core().len();
            let search_score = params.penalized(h.logp, len);
            Scored {
                tokens: h.reading_order(),
                direction: h.direction,
                search_score,
                reverse_logp: rev,
                score: search_score + sign * params.rescore_weight * params.penalized(rev, len),
            }
        })
        .collect();
    select(candidates)
}

/// Single-direction search result in the same shape as [`joint_search`].
pub fn directional_search<T: Float>(scorer: &Scorer<'_, T>, direction: Direction, params: &SearchParams) -> Result<SearchOutcome> {
    let candidates = beam_search(scorer, direction, params)?
        .iter()
        .map(|h| {
            let s = params.penalized(h.logp, h.core().len());
            Scored { tokens: h.reading_order(), direction, search_score: s, reverse_logp: 0.0, score: s }
        })
        .collect();
    select(candidates)
}

/// Dispatches on `params.mode`.
pub fn search<T: Float>(scorer: &Scorer<'_, T>, params: &SearchParams) -> Result<SearchOutcome> {
    match params.mode {
        DecodeMode::Joint => joint_search(scorer, params),
        DecodeMode::L2R => directional_search(scorer, Direction::L2R, params),
        DecodeMode::R2L => directional_search(scorer, Direction::R2L, params),
    }
}

/// Encodes one bitmap. Images smaller than the encoder's downsampling
/// factor are padded with background; the valid extent stays the original.
pub fn encode_image<T: Float>(model: &Model<T>, image: &Bitmap) -> Result<Memory<T>> {
    let f = model.encoder.config.downsampling();
    let (h, w) = (image.height.max(f), image.width.max(f));
    let mut pixels = vec![T::zero(); h * w];
    for y in 0..image.height {
        for x in 0..image.width {
            pixels[y * w + x] = T::lit(image.pixels[y * image.width + x] as f64);
        }
    }
    let t = Tensor::new(pixels, &[1, model.encoder.config.in_channels, h, w])?;
    model.encoder.encode(&t, &[(image.height, image.width)], &Phase::Eval)
}

/// Most likely core sequence for `image`; several models form an ensemble.
pub fn recognize<T: Float>(models: &[&Model<T>], image: &Bitmap, params: &SearchParams) -> Result<SearchOutcome> {
    let memories = models.iter().map(|m| encode_image(m, image)).collect::<Result<Vec<_>>>()?;
    let decoders: Vec<&Decoder<T>> = models.iter().map(|m| &m.decoder).collect();
    let refs: Vec<&Memory<T>> = memories.iter().collect();
    let scorer = Scorer::new(&decoders, &refs, 0)?;
    search(&scorer, params)
}

/// Writes `id <TAB> markup` lines.
pub fn write_predictions(path: impl AsRef<Path>, rows: &[(String, String)]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    for (id, text) in rows {
        if id.contains(['\t', '\n']) || text.contains(['\t', '\n']) {
            return Err(Error::Config(format!("prediction for {id:?} contains a tab or newline")));
        }
        writeln!(f, "{id}\t{text}").map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

/// Reads `id <TAB> markup` lines; blank lines are skipped.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, markup) = line.split_once('\t').ok_or_else(|| {
            crate::data::DataError::Format { what: path.display().to_string(), line: i + 1, message: "expected id<TAB>markup".into() }
        })?;
        out.push((id.to_string(), markup.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
