use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use rayon::prelude::*;

use hmer_core::data::synth::{synth_generate, synth_vocab, SynthParams};
use hmer_core::data::{
    load_dataset, parse_inkml, rasterize, read_index, strip_math_delimiters, write_index, Bitmap, IndexEntry, RasterParams,
    Sample, Vocab,
};
use hmer_core::evaluation::{evaluate, EvalResult};
use hmer_core::inference::{read_predictions, recognize, write_predictions, SearchParams};
use hmer_core::model::Model;
use hmer_core::numerics::RngState;
use hmer_core::selfcheck::{self, Check};
use hmer_core::training;

use crate::config::RunConfig;
use crate::{ConfigArgs, EvalArgs, Exit, GradcheckArgs, InferArgs, RenderArgs, SearchFlags, SelftestArgs, SynthArgs, TrainArgs};

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Exit { code: 2, message: format!("{what} {} does not exist", path.display()) }.into());
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn resolve(args: &ConfigArgs, vocab_size: usize, flags: Vec<(String, String)>) -> Result<RunConfig> {
    if let Some(p) = &args.config {
        require_file(p, "config")?;
    }
    let mut cli = flags;
    cli.extend(args.set.iter().cloned());
    let cfg = RunConfig::defaults(args.toy, vocab_size).resolve(args.config.as_deref(), &cli)?;
    for line in &cfg.log {
        eprintln!("config: {line}");
    }
    Ok(cfg)
}

fn flag<V: ToString>(key: &str, v: &Option<V>) -> Option<(String, String)> {
    v.as_ref().map(|v| (key.to_string(), v.to_string()))
}

pub fn render(a: &RenderArgs) -> Result<()> {
    if !a.inkml_dir.is_dir() {
        return Err(Exit { code: 2, message: format!("{} is not a directory", a.inkml_dir.display()) }.into());
    }
    let vocab = a.vocab.as_ref().map(Vocab::load).transpose()?;
    let mut files: Vec<PathBuf> = fs::read_dir(&a.inkml_dir)
        .with_context(|| format!("listing {}", a.inkml_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("inkml")))
        .collect();
    files.sort();
    create_dir(&a.out)?;
    let params = RasterParams { target_height: a.height, ..Default::default() };
    let results: Vec<std::result::Result<IndexEntry, String>> = files
        .par_iter()
        .map(|path| {
            let one = || -> Result<IndexEntry> {
                let ink = parse_inkml(&fs::read(path).with_context(|| format!("reading {}", path.display()))?)?;
                let truth = ink.truth.as_deref().ok_or_else(|| anyhow::anyhow!("no truth annotation"))?;
                let truth = strip_math_delimiters(truth).trim().to_string();
                if let Some(v) = &vocab {
                    v.tokenize(&truth)?;
                }
                let name = PathBuf::from(path.file_stem().expect("listed files have names")).with_extension("pgm");
                rasterize(&ink.strokes, &params)?.save_pgm(a.out.join(&name))?;
                Ok(IndexEntry { path: name, truth })
            };
            one().map_err(|e| format!("{e:#}"))
        })
        .collect();
    let mut entries = Vec::new();
    let mut manifest = String::new();
    for (path, r) in files.iter().zip(results) {
        match r {
            Ok(e) => entries.push(e),
            Err(msg) => manifest.push_str(&format!("{}\t{}\n", path.display(), msg.replace(['\t', '\n'], " "))),
        }
    }
    let failures = files.len() - entries.len();
    let manifest_path = a.out.join("failures.tsv");
    fs::write(&manifest_path, &manifest).with_context(|| format!("writing {}", manifest_path.display()))?;
    if failures > 0 && !a.skip_bad {
        return Err(Exit {
            code: 2,
            message: format!("{failures} of {} files failed; see {} or pass --skip-bad", files.len(), manifest_path.display()),
        }
        .into());
    }
    write_index(a.out.join("index.tsv"), &entries)?;
    eprintln!("rendered {} files, {failures} skipped", entries.len());
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let vocab = synth_vocab();
    let mut params = SynthParams { depth: a.depth, ..Default::default() };
    params.raster.target_height = a.height;
    params.raster.margin = 2;
    params.raster.pen_width = (a.height as f64 / 24.0).max(1.0);
    let samples = synth_generate(&mut RngState::new(a.seed), a.n, &params, &vocab)?;
    let images = a.out.join("images");
    create_dir(&images)?;
    let entries = samples
        .iter()
        .map(|s| {
            let rel = PathBuf::from("images").join(format!("{}.pgm", s.id));
            s.image.save_pgm(a.out.join(&rel))?;
            Ok(IndexEntry { path: rel, truth: vocab.detokenize(&s.tokens)? })
        })
        .collect::<Result<Vec<_>>>()?;
    write_index(a.out.join("index.tsv"), &entries)?;
    vocab.save(a.out.join("vocab.txt"))?;
    eprintln!("wrote {} samples to {}", entries.len(), a.out.display());
    Ok(())
}

/// Fraction of `data` decoded exactly.
fn exact_match(model: &Model<f32>, data: &[Sample], params: &SearchParams) -> hmer_core::Result<f64> {
    let hits = data
        .par_iter()
        .map(|s| Ok(recognize(&[model], &s.image, params)?.best.tokens == s.tokens))
        .collect::<hmer_core::Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len().max(1) as f64)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    require_file(&a.data, "dataset index")?;
    require_file(&a.vocab, "vocabulary")?;
    if let Some(d) = &a.dev {
        require_file(d, "dev index")?;
    }
    let vocab = Vocab::load(&a.vocab)?;
    let flags = [flag("train.seed", &a.seed), flag("train.epochs", &a.epochs), flag("train.time_budget", &a.time_budget)];
    let cfg = resolve(&a.config, vocab.len(), flags.into_iter().flatten().collect())?;
    let data = load_dataset(&a.data, &vocab)?;
    if data.is_empty() {
        return Err(Exit { code: 2, message: format!("{} lists no samples", a.data.display()) }.into());
    }
    let dev = a.dev.as_ref().map(|d| load_dataset(d, &vocab)).transpose()?;
    create_dir(&a.out)?;
    let log_path = a.out.join("train.log");
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    for line in &cfg.log {
        writeln!(log, "config: {line}")?;
    }
    writeln!(log, "samples: {} train, {} dev", data.len(), dev.as_ref().map_or(0, Vec::len))?;
    let model = Model::<f32>::new(&cfg.model, cfg.train.seed)?;
    let mut select = |m: &Model<f32>| -> hmer_core::Result<f64> {
        let score = exact_match(m, dev.as_deref().unwrap_or(&[]), &cfg.search)?;
        eprintln!("  dev exact match {score:.4}");
        Ok(score)
    };
    let selector: Option<&mut dyn FnMut(&Model<f32>) -> hmer_core::Result<f64>> =
        if dev.is_some() { Some(&mut select) } else { None };
    let outcome = training::train(model, &data, &cfg.train, selector, |r| {
        eprintln!("{r}");
        writeln!(log, "{r}").map_err(|e| hmer_core::Error::Io { path: log_path.clone(), source: e })
    })?;
    outcome.best.save(a.out.join("best.ckpt"))?;
    outcome.last.save(a.out.join("last.ckpt"))?;
    let summary = format!("stop: {:?}, best epoch {}", outcome.stop, outcome.best_epoch);
    writeln!(log, "{summary}")?;
    eprintln!("{summary}");
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<()> {
    for c in &a.checkpoint {
        require_file(c, "checkpoint")?;
    }
    require_file(&a.data, "index")?;
    require_file(&a.vocab, "vocabulary")?;
    let vocab = Vocab::load(&a.vocab)?;
    let SearchFlags { beam, alpha, max_len, mode } = &a.search;
    let flags = [flag("search.beam", beam), flag("search.alpha", alpha), flag("search.max_len", max_len), flag("search.mode", mode)];
    let cfg = resolve(&a.config, vocab.len(), flags.into_iter().flatten().collect())?;
    let models = a
        .checkpoint
        .iter()
        .map(|p| {
            let m = Model::<f32>::load(p)?;
            if m.config.decoder.vocab_size != vocab.len() {
                return Err(Exit {
                    code: 2,
                    message: format!(
                        "{} has {} output classes but {} lists {}",
                        p.display(),
                        m.config.decoder.vocab_size,
                        a.vocab.display(),
                        vocab.len()
                    ),
                }
                .into());
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    if models.len() > 1 {
        eprintln!("ensemble of {} checkpoints", models.len());
    }
    let refs: Vec<&Model<f32>> = models.iter().collect();
    let base = a.data.parent().unwrap_or(Path::new("."));
    let entries = read_index(&a.data)?;
    let start = Instant::now();
    let rows = entries
        .par_iter()
        .map(|e| {
            let image = Bitmap::load_pgm(base.join(&e.path))?;
            let out = recognize(&refs, &image, &cfg.search)?;
            Ok((e.path.to_string_lossy().into_owned(), vocab.detokenize(&out.best.tokens)?))
        })
        .collect::<hmer_core::Result<Vec<_>>>()?;
    write_predictions(&a.out, &rows)?;
    eprintln!("decoded {} images in {:.1}s", rows.len(), start.elapsed().as_secs_f64());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    require_file(&a.pred, "prediction file")?;
    require_file(&a.truth, "truth index")?;
    require_file(&a.vocab, "vocabulary")?;
    let vocab = Vocab::load(&a.vocab)?;
    let pred = read_predictions(&a.pred)?;
    let truth: Vec<(String, String)> =
        read_index(&a.truth)?.into_iter().map(|e| (e.path.to_string_lossy().into_owned(), e.truth)).collect();
    let result: EvalResult = evaluate(&pred, &truth, &vocab).map_err(|e| Exit { code: 2, message: e.to_string() })?;
    println!("{result}");
    print!("{}", result.to_key_values());
    if let Some(out) = &a.out {
        fs::write(out, result.to_key_values()).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn report(checks: &[(Check, Option<f64>)]) -> Result<()> {
    let mut failed = 0;
    for (c, secs) in checks {
        match secs {
            Some(s) => println!("{c} [{s:.1}s]"),
            None => println!("{c}"),
        }
        failed += usize::from(!c.passed);
    }
    println!("{} checks, {failed} failed", checks.len());
    if failed > 0 {
        return Err(Exit { code: 3, message: format!("{failed} checks failed") }.into());
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let checks = selfcheck::gradient_suite(&seeds)?;
    report(&checks.into_iter().map(|c| (c, None)).collect::<Vec<_>>())
}

pub fn selftest(a: &SelftestArgs) -> Result<()> {
    let start = Instant::now();
    let checks = selfcheck::run_all(a.quick)?;
    let checks: Vec<_> = checks.into_iter().map(|(c, s)| (c, Some(s))).collect();
    let r = report(&checks);
    eprintln!("selftest took {:.1}s", start.elapsed().as_secs_f64());
    r
}
