use proptest::prelude::*;

use super::crohme::{crohme_vocab, fixture_truths, FIXTURE_INKML};
use super::synth::{synth_generate, synth_vocab, Expr, Grammar, SynthParams};
use super::*;
use crate::numerics::RngState;

fn abc() -> Vocab {
    Vocab::new(&["a", "b", "c", "\\frac", "\\f", "{", "}", "^", "x", "2"]).unwrap()
}

#[test]
fn vocab_reserved_ids_and_round_trip() {
    let v = abc();
    assert_eq!(v.id("a"), Some(RESERVED));
    assert_eq!((PAD, SOS, EOS), (0, 1, 2));
    assert_eq!(v.len(), 13);
    let back = Vocab::parse(&v.to_text()).unwrap();
    assert_eq!(back, v);
    assert_eq!(back.to_text(), v.to_text());
    assert!(Vocab::new(&["a", "a"]).is_err());
    assert!(Vocab::new(&["<eos>"]).is_err());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("v.txt");
    crohme_vocab().save(&p).unwrap();
    assert_eq!(Vocab::load(&p).unwrap(), crohme_vocab());
}

#[test]
fn tokenize_examples() {
    let v = abc();
    let ids = |s: &[&str]| s.iter().map(|t| v.id(t).unwrap()).collect::<Vec<_>>();
    assert_eq!(v.tokenize("x^{2}").unwrap(), ids(&["x", "^", "{", "2", "}"]));
    assert_eq!(v.tokenize("\\frac{a}{b}").unwrap(), ids(&["\\frac", "{", "a", "}", "{", "b", "}"]));
    assert_eq!(v.tokenize("  \\f a ").unwrap(), ids(&["\\f", "a"]));
    match v.tokenize("a+b") {
        Err(DataError::UnknownToken { token, position }) => {
            assert_eq!(position, 1);
            assert_eq!(token, "+b");
        }
        other => panic!("{other:?}"),
    }
    assert!(v.tokenize("<sos>").is_err());
}

#[test]
fn fixture_truths_round_trip_to_canonical_spacing() {
    let v = crohme_vocab();
    assert!(v.len() > 100);
    let fixtures = fixture_truths();
    assert_eq!(fixtures.len(), 20);
    for (raw, canonical) in fixtures {
        let ids = v.tokenize(raw).unwrap();
        assert_eq!(v.detokenize(&ids).unwrap(), canonical, "{raw}");
        assert_eq!(v.tokenize(canonical).unwrap(), ids);
    }
}

proptest! {
    #[test]
    fn tokenize_inverts_detokenize(ids in prop::collection::vec(RESERVED..110usize, 1..40)) {
        let v = crohme_vocab();
        let ids: Vec<usize> = ids.into_iter().filter(|&i| i < v.len()).collect();
        let text = v.detokenize(&ids).unwrap();
        prop_assert_eq!(v.tokenize(&text).unwrap(), ids);
    }
}

#[test]
fn inkml_single_and_multiple_traces() {
    let doc = br#"<ink><annotation type="truth">$a$</annotation><trace>0 0, 1 1</trace></ink>"#;
    let ink = parse_inkml(doc).unwrap();
    assert_eq!(ink.strokes.strokes, vec![vec![(0.0, 0.0), (1.0, 1.0)]]);
    assert_eq!(ink.truth.as_deref(), Some("$a$"));
    assert_eq!(strip_math_delimiters(ink.truth.as_deref().unwrap()), "a");

    let doc = br#"<ink><trace>0 0</trace><trace>1 1 0.5, 2 2 0.6</trace><trace>3 3</trace></ink>"#;
    let ink = parse_inkml(doc).unwrap();
    assert_eq!(ink.strokes.strokes.len(), 3);
    assert_eq!(ink.strokes.strokes[1], vec![(1.0, 1.0), (2.0, 2.0)]);
    assert_eq!(ink.strokes.strokes[2], vec![(3.0, 3.0)]);
    assert_eq!(ink.truth, None);
}

#[test]
fn inkml_crohme_style_fixture() {
    // Counted by hand: x (2 strokes), 2 (1), + (2), 1 (1).
    let ink = parse_inkml(FIXTURE_INKML.as_bytes()).unwrap();
    assert_eq!(ink.strokes.strokes.len(), 6);
    assert_eq!(ink.truth.as_deref(), Some("$x^{2}+1$"));
    assert_eq!(ink.strokes.strokes[2].len(), 7);
    let v = crohme_vocab();
    let ids = v.tokenize(strip_math_delimiters(ink.truth.as_deref().unwrap())).unwrap();
    assert_eq!(v.detokenize(&ids).unwrap(), "x ^ { 2 } + 1");
}

#[test]
fn inkml_errors_carry_offsets() {
    let doc = b"<ink><trace>0 0</trace></inx>";
    match parse_inkml(doc) {
        Err(DataError::Parse { offset, .. }) => assert!(offset > 0 && offset <= doc.len() as u64),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_inkml(b"<ink><trace>0 0</trace>"), Err(DataError::Parse { .. })));
    match parse_inkml(b"<ink><trace>0 zero</trace></ink>") {
        Err(DataError::Parse { offset, message }) => {
            assert_eq!(offset, 12);
            assert!(message.contains("zero"));
        }
        other => panic!("{other:?}"),
    }
    assert!(parse_inkml(b"<svg/>").is_err());
}

fn line(points: &[(f64, f64)]) -> StrokeSet {
    StrokeSet::new(vec![points.to_vec()]).unwrap()
}

#[test]
fn horizontal_stroke_is_a_unimodal_band() {
    let p = RasterParams { target_height: 32, ..Default::default() };
    let img = rasterize(&line(&[(0.0, 5.0), (10.0, 5.0)]), &p).unwrap();
    assert_eq!(img.height, 40);
    let rows: Vec<f32> = (0..img.height).map(|y| (0..img.width).map(|x| img.get(x, y)).sum()).collect();
    let inked: Vec<usize> = (0..img.height).filter(|&y| rows[y] > 0.0).collect();
    assert!(inked.len() <= 3, "{inked:?}");
    let peak = (0..rows.len()).max_by(|&a, &b| rows[a].total_cmp(&rows[b])).unwrap();
    assert!(rows[..peak].windows(2).all(|w| w[0] <= w[1]));
    assert!(rows[peak..].windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn raster_invariant_to_uniform_scale_and_translation() {
    let strokes = vec![vec![(0.0, 0.0), (3.0, 7.0), (9.0, 2.0)], vec![(4.0, 4.0)], vec![(1.0, 6.0), (8.0, 6.0)]];
    let base = rasterize(&StrokeSet::new(strokes.clone()).unwrap(), &RasterParams::default()).unwrap();
    for (s, dx, dy) in [(2.0, 0.0, 0.0), (4.0, 0.0, 0.0), (1.0, 128.0, -64.0), (0.5, 16.0, 1024.0)] {
        let moved: Vec<Vec<(f64, f64)>> =
            strokes.iter().map(|st| st.iter().map(|&(x, y)| (x * s + dx, y * s + dy)).collect()).collect();
        let img = rasterize(&StrokeSet::new(moved).unwrap(), &RasterParams::default()).unwrap();
        assert_eq!(img, base, "scale {s} shift ({dx}, {dy})");
    }
}

#[test]
fn diagonal_ink_count_matches_coverage_estimate() {
    let p = RasterParams { target_height: 100, pen_width: 3.0, margin: 4, max_width: 1600 };
    let img = rasterize(&line(&[(0.0, 0.0), (100.0, 100.0)]), &p).unwrap();
    let inked = img.pixels.iter().filter(|&&v| v >= 0.5).count() as f64;
    let estimate = 100.0 * 2f64.sqrt() * 3.0;
    assert!((inked - estimate).abs() <= 0.2 * estimate, "{inked} vs {estimate}");
}

#[test]
fn single_point_renders_centered_dot_and_width_is_clamped() {
    let p = RasterParams::default();
    let img = rasterize(&line(&[(5.0, 5.0)]), &p).unwrap();
    let (cx, cy) = (img.width / 2, img.height / 2);
    assert!(img.get(cx, cy) > 0.0);
    let total: f32 = img.pixels.iter().sum();
    assert!(total > 0.0 && total < 20.0);
    let long = rasterize(&line(&[(0.0, 0.0), (1000.0, 10.0)]), &p).unwrap();
    assert_eq!(long.width, p.max_width);
    assert!(rasterize(&StrokeSet::default(), &p).is_err());
}

#[test]
fn pgm_round_trip_within_quantization() {
    let img = rasterize(&line(&[(0.0, 0.0), (4.0, 9.0)]), &RasterParams { target_height: 20, ..Default::default() }).unwrap();
    let back = Bitmap::from_pgm(&img.to_pgm()).unwrap();
    assert_eq!((back.width, back.height), (img.width, img.height));
    assert!(img.pixels.iter().zip(&back.pixels).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-6));
    let twice = Bitmap::from_pgm(&back.to_pgm()).unwrap();
    assert_eq!(twice, back);
}

fn sample(id: &str, tokens: Vec<usize>, h: usize, w: usize) -> Sample {
    Sample::new(id, Bitmap { width: w, height: h, pixels: vec![1.0; w * h] }, tokens).unwrap()
}

#[test]
fn bibatch_definition_examples() {
    let (a, b) = (10, 11);
    let s = sample("s", vec![a, b], 2, 3);
    let bb = make_bibatch(&[&s], 4).unwrap();
    assert_eq!(bb.l2r_input, vec![SOS, a, b, PAD]);
    assert_eq!(bb.l2r_target, vec![a, b, EOS, PAD]);
    assert_eq!(bb.r2l_input, vec![EOS, b, a, PAD]);
    assert_eq!(bb.r2l_target, vec![b, a, SOS, PAD]);
    assert_eq!(bb.token_mask, vec![true, true, true, false]);

    let one = sample("one", vec![a], 1, 1);
    let bb = make_bibatch(&[&one], 3).unwrap();
    assert_eq!(bb.r2l_target, vec![a, SOS, PAD]);

    match make_bibatch(&[&s, &one], 2) {
        Err(DataError::TooLong { id, .. }) => assert_eq!(id, "s"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn bibatch_pads_images_bottom_right() {
    let s1 = sample("a", vec![5], 2, 3);
    let s2 = sample("b", vec![5], 4, 1);
    let bb = make_bibatch(&[&s1, &s2], 3).unwrap();
    assert_eq!((bb.height, bb.width), (4, 3));
    let mask = bb.image_mask();
    for b in 0..2 {
        for y in 0..4 {
            for x in 0..3 {
                let i = (b * 4 + y) * 3 + x;
                assert_eq!(bb.images[i] == 1.0, mask[i]);
            }
        }
    }
    assert_eq!(mask.iter().filter(|&&m| m).count(), 6 + 4);
}

fn strip_core(row: &[usize], stop: usize) -> Vec<usize> {
    row.iter().copied().take_while(|&t| t != stop && t != PAD).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn bibatch_reversal_invariant(
        seqs in prop::collection::vec(prop::collection::vec(RESERVED..30usize, 1..12), 1..6),
        extra in 1usize..4,
    ) {
        let samples: Vec<Sample> = seqs.iter().enumerate().map(|(i, s)| sample(&i.to_string(), s.clone(), 1, 1)).collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let l_max = seqs.iter().map(Vec::len).max().unwrap() + extra;
        let bb = make_bibatch(&refs, l_max).unwrap();
        for (b, s) in seqs.iter().enumerate() {
            let mut r2l = strip_core(bb.row(&bb.r2l_target, b), SOS);
            r2l.reverse();
            prop_assert_eq!(&r2l, s);
            prop_assert_eq!(&strip_core(bb.row(&bb.l2r_target, b), EOS), s);
            prop_assert_eq!(&bb.row(&bb.l2r_input, b)[1..=s.len()], &s[..]);
            prop_assert_eq!(bb.lengths()[b], s.len() + 1);
        }
    }
}

/// Longest token sequence the grammar can produce, by exhaustive recursion
/// over productions.
fn max_len_oracle(depth: usize) -> usize {
    if depth == 0 {
        return 1;
    }
    let rest = max_len_oracle(depth - 1);
    let frac = 6 + max_len_oracle(depth.saturating_sub(2));
    [rest, 2 + rest, 4 + rest, 4 + rest, frac].into_iter().max().unwrap()
}

fn balanced(tokens: &[&str]) -> bool {
    let mut d = 0i32;
    for t in tokens {
        d += match *t {
            "{" => 1,
            "}" => -1,
            _ => 0,
        };
        if d < 0 {
            return false;
        }
    }
    d == 0
}

#[test]
fn grammar_depth_zero_is_single_atoms() {
    let mut rng = RngState::new(1);
    for _ in 0..200 {
        assert!(matches!(Grammar::default().generate(&mut rng, 0), Expr::Atom(_)));
    }
}

#[test]
fn grammar_lengths_bounded_and_braces_balanced() {
    let mut rng = RngState::new(2);
    for depth in 0..5 {
        let bound = max_len_oracle(depth);
        assert!(bound <= 4 * depth + 3);
        let mut longest = 0;
        for _ in 0..2000 {
            let t = Grammar::default().generate(&mut rng, depth).tokens();
            assert!(balanced(&t), "{t:?}");
            longest = longest.max(t.len());
        }
        assert!(longest <= bound);
        if depth >= 1 {
            assert_eq!(longest, bound, "depth {depth} never reached its bound");
        }
    }
}

#[test]
fn synth_generate_is_reproducible_and_valid() {
    let v = synth_vocab();
    assert_eq!(v.len(), 26);
    let params = SynthParams { raster: RasterParams { target_height: 32, ..Default::default() }, ..Default::default() };
    let a = synth_generate(&mut RngState::new(9), 20, &params, &v).unwrap();
    let b = synth_generate(&mut RngState::new(9), 20, &params, &v).unwrap();
    assert_eq!(a, b);
    for s in &a {
        assert_eq!(s.image.height, 40);
        assert!(s.image.pixels.iter().any(|&p| p > 0.5));
        assert!(s.tokens.len() <= 11);
    }
    assert!(synth_generate(&mut RngState::new(9), 1, &params, &abc()).is_err());
}

#[test]
fn dataset_index_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let v = synth_vocab();
    let params = SynthParams { raster: RasterParams { target_height: 16, ..Default::default() }, ..Default::default() };
    let samples = synth_generate(&mut RngState::new(3), 3, &params, &v).unwrap();
    let mut entries = Vec::new();
    for s in &samples {
        let name = format!("{}.pgm", s.id);
        s.image.save_pgm(dir.path().join(&name)).unwrap();
        entries.push(IndexEntry { path: name.into(), truth: v.detokenize(&s.tokens).unwrap() });
    }
    write_index(dir.path().join("index.tsv"), &entries).unwrap();
    assert_eq!(read_index(dir.path().join("index.tsv")).unwrap(), entries);
    let loaded = load_dataset(dir.path().join("index.tsv"), &v).unwrap();
    for (l, s) in loaded.iter().zip(&samples) {
        assert_eq!(l.tokens, s.tokens);
        assert_eq!((l.image.width, l.image.height), (s.image.width, s.image.height));
    }
}
