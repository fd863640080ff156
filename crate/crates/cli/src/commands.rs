use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use mixencoder::bench::corpus::{gen_synthetic, Corpus, CorpusTask, TokenizedRecord};
use mixencoder::bench::cost::{cost_eval, CostInputs, CostKind};
use mixencoder::bench::latency::bench_latency;
use mixencoder::bench::metrics::{evaluate, ranking_metrics, MetricMap};
use mixencoder::encoder::Vocab;
use mixencoder::heads::AblationFlags;
use mixencoder::model::{Model, ModelConfig, TaskKind};
use mixencoder::precompute::CandidateCache;
use mixencoder::train::{load_checkpoint, save_checkpoint, train, TrainConfig};
use mixencoder::Scalar;
use serde::Deserialize;

use crate::config::{model_config, parse_kind, FileConfig};
use crate::{AblateArgs, BenchArgs, Cli, Command, CostArgs, EvalArgs, Float, GenArgs, PrecomputeArgs, TrainArgs};

/// Classes of the synthetic classification corpus.
const NUM_CLASSES: usize = 3;

pub fn run(cli: &Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match (&cli.command, cli.float) {
        (Command::Gen(a), _) => gen(cli, &file, a),
        (Command::Cost(a), _) => cost(cli, a),
        (Command::Precompute(a), Float::F32) => precompute::<f32>(a),
        (Command::Precompute(a), Float::F64) => precompute::<f64>(a),
        (Command::Train(a), Float::F32) => train_cmd::<f32>(cli, &file, a),
        (Command::Train(a), Float::F64) => train_cmd::<f64>(cli, &file, a),
        (Command::Eval(a), Float::F32) => eval::<f32>(a),
        (Command::Eval(a), Float::F64) => eval::<f64>(a),
        (Command::Bench(a), Float::F32) => bench::<f32>(cli, &file, a),
        (Command::Bench(a), Float::F64) => bench::<f64>(cli, &file, a),
        (Command::Ablate(a), Float::F32) => ablate::<f32>(cli, &file, a),
        (Command::Ablate(a), Float::F64) => ablate::<f64>(cli, &file, a),
    }
}

fn print_json<S: serde::Serialize>(value: &S) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn gen(cli: &Cli, file: &FileConfig, a: &GenArgs) -> Result<()> {
    let mut cfg = file.gen.clone().unwrap_or_default();
    if let Some(t) = &a.task {
        cfg.task = CorpusTask::parse(t)?;
    }
    cfg.queries = a.queries.unwrap_or(cfg.queries);
    cfg.candidates = a.candidates.unwrap_or(cfg.candidates);
    cfg.query_len = a.query_len.unwrap_or(cfg.query_len);
    cfg.candidate_len = a.candidate_len.unwrap_or(cfg.candidate_len);
    cfg.vocab_size = a.vocab_size.unwrap_or(cfg.vocab_size);
    cfg.first_query_id = a.first_query_id.unwrap_or(cfg.first_query_id);
    cfg.seed = cli.seed.unwrap_or(cfg.seed);
    let corpus = gen_synthetic(&cfg)?;
    match &a.out {
        Some(path) => corpus.save(path).with_context(|| format!("writing {}", path.display()))?,
        None => io::stdout().lock().write_all(corpus.to_jsonl()?.as_bytes())?,
    }
    if let Some(path) = &a.vocab_out {
        Vocab::synthetic(cfg.vocab_size, cfg.kmax)?.save(path)?;
    }
    Ok(())
}

fn cost(cli: &Cli, a: &CostArgs) -> Result<()> {
    let Some(model) = &cli.model else {
        bail!("cost needs --model (dual, cross or mix)");
    };
    let inputs = CostInputs {
        h: a.h,
        q: a.q,
        d: a.d.unwrap_or(a.q),
        k: a.k,
        nc: a.nc,
    };
    let c = cost_eval(CostKind::parse(model)?, inputs)?;
    if a.json {
        print_json(&c)
    } else {
        println!("{c}");
        Ok(())
    }
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    Corpus::load(path).with_context(|| format!("reading corpus {}", path.display()))
}

/// The vocabulary file if given, otherwise the synthetic vocabulary implied by
/// the model configuration.
fn vocab_for(path: Option<&Path>, cfg: &ModelConfig) -> Result<Vocab> {
    match path {
        Some(p) => Vocab::load(p).with_context(|| format!("reading vocabulary {}", p.display())),
        None => Ok(Vocab::synthetic(cfg.encoder.vocab_size, cfg.kmax)?),
    }
}

fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    load_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn precompute<T: Scalar>(a: &PrecomputeArgs) -> Result<()> {
    let model = load_model::<T>(&a.checkpoint)?;
    if !model.kind().is_mix() {
        bail!("{} has no candidate cache; use a MixEncoder checkpoint", model.kind().name());
    }
    let vocab = vocab_for(a.vocab.as_deref(), &model.config)?;
    let candidates = load_corpus(&a.corpus)?
        .candidates()
        .into_iter()
        .map(|c| Ok((c.id, mixencoder::encoder::TokenSequence::new(vocab.tokenize(&c.text)?))))
        .collect::<Result<Vec<_>>>()?;
    let cache = model.build_cache(&candidates, a.chunk)?;
    cache.save(&a.out)?;
    println!(
        "{} candidates, k = {}, d = {}, {} bytes",
        cache.len(),
        cache.k(),
        cache.d(),
        std::fs::metadata(&a.out)?.len()
    );
    Ok(())
}

fn train_config(cli: &Cli, file: &FileConfig) -> TrainConfig {
    let mut cfg = file.train.clone().unwrap_or_default();
    cfg.seed = cli.seed.unwrap_or(cfg.seed);
    cfg
}

/// Model configuration for `records`, switching to a classification head for
/// labelled corpora unless the configuration already chose one.
fn model_for_corpus(cli: &Cli, file: &FileConfig, corpus: &Corpus) -> Result<ModelConfig> {
    let mut cfg = model_config(file, cli.model.as_deref())?;
    if corpus.is_classification() && cfg.task == TaskKind::Ranking {
        cfg.task = TaskKind::Classification {
            num_classes: NUM_CLASSES,
        };
    }
    Ok(cfg)
}

struct Data {
    train: Vec<TokenizedRecord>,
    eval: Option<Vec<TokenizedRecord>>,
}

fn load_data(mut cfg: ModelConfig, vocab: Option<&Path>, train: &Corpus, eval: Option<&Path>) -> Result<(ModelConfig, Data)> {
    let vocab = vocab_for(vocab, &cfg)?;
    if cfg.encoder.vocab_size != vocab.len() {
        cfg.encoder.vocab_size = vocab.len();
    }
    cfg.kmax = vocab.kmax();
    let train = train.tokenize(&vocab)?;
    let eval = match eval {
        Some(p) => Some(load_corpus(p)?.tokenize(&vocab)?),
        None => None,
    };
    Ok((cfg, Data { train, eval }))
}

fn train_cmd<T: Scalar>(cli: &Cli, file: &FileConfig, a: &TrainArgs) -> Result<()> {
    let corpus = load_corpus(&a.train)?;
    let cfg = model_for_corpus(cli, file, &corpus)?;
    let (cfg, data) = load_data(cfg, a.vocab.as_deref(), &corpus, a.eval.as_deref())?;
    let mut tc = train_config(cli, file);
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    tc.batch_size = a.batch_size.or(tc.batch_size);
    tc.lr = a.lr.unwrap_or(tc.lr);
    tc.max_steps = a.max_steps.or(tc.max_steps);

    let mut model = Model::<T>::new(cfg, tc.seed)?;
    let mut log = a
        .log
        .as_ref()
        .map(|p| File::create(p).map(BufWriter::new))
        .transpose()
        .context("creating metrics log")?;
    let report = train(
        &mut model,
        &data.train,
        data.eval.as_deref(),
        &tc,
        log.as_mut().map(|w| w as &mut dyn Write),
    )?;
    if let Some(mut w) = log {
        w.flush()?;
    }
    save_checkpoint(&model, &a.out)?;
    print_json(&serde_json::json!({
        "model": model.kind().name(),
        "steps": report.steps,
        "epochs": report.epochs,
        "final_loss": report.losses.last(),
        "metrics": report.final_metrics(),
        "checkpoint": a.out,
    }))
}

#[derive(Deserialize)]
struct ScoreLine {
    query_id: u64,
    scores: Vec<(u64, f64)>,
}

/// Metrics for externally produced scores against the corpus positives.
fn eval_scores(corpus: &Corpus, path: &Path) -> Result<MetricMap> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("reading {}", path.display()))?);
    let mut by_query = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: ScoreLine = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        by_query.insert(s.query_id, s.scores);
    }
    let ranked = corpus
        .records
        .iter()
        .map(|r| {
            let scores = by_query
                .remove(&r.query_id)
                .with_context(|| format!("no scores for query {}", r.query_id))?;
            Ok((scores, r.positive_ids.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ranking_metrics(&ranked)?)
}

fn eval<T: Scalar>(a: &EvalArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let metrics = match (&a.scores, &a.checkpoint) {
        (Some(path), _) => eval_scores(&corpus, path)?,
        (None, Some(ckpt)) => {
            let model = load_model::<T>(ckpt)?;
            let vocab = vocab_for(a.vocab.as_deref(), &model.config)?;
            let records = corpus.tokenize(&vocab)?;
            let cache = a
                .cache
                .as_ref()
                .map(|p| CandidateCache::<T>::load(p).with_context(|| format!("reading cache {}", p.display())))
                .transpose()?;
            evaluate(&model, &records, cache.as_ref(), a.batch)?
        }
        (None, None) => bail!("eval needs --checkpoint or --scores"),
    };
    print_json(&metrics)
}

fn bench<T: Scalar>(cli: &Cli, file: &FileConfig, a: &BenchArgs) -> Result<()> {
    let mut cfg = file.bench.clone().unwrap_or_default();
    if let Some(models) = &a.models {
        cfg.models = models.iter().map(|m| parse_kind(m)).collect::<Result<_>>()?;
    } else if let Some(m) = &cli.model {
        cfg.models = vec![parse_kind(m)?];
    }
    cfg.n_list = a.n.clone().unwrap_or(cfg.n_list);
    cfg.reps = a.reps.unwrap_or(cfg.reps);
    cfg.warmups = a.warmups.unwrap_or(cfg.warmups);
    cfg.queries = a.queries.unwrap_or(cfg.queries);
    cfg.seed = cli.seed.unwrap_or(cfg.seed);
    let report = bench_latency::<T>(&cfg)?;
    print!("{}", report.table());
    if let Some(path) = &a.out {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn ablation_flags(name: &str) -> Result<AblationFlags> {
    Ok(match name {
        "original" => AblationFlags::ORIGINAL,
        "without-h" => AblationFlags::WITHOUT_H,
        "without-e" => AblationFlags::WITHOUT_E,
        "eq6" => AblationFlags::EQ6_ONLY,
        other => bail!("unknown ablation {other:?}"),
    })
}

fn ablate<T: Scalar>(cli: &Cli, file: &FileConfig, a: &AblateArgs) -> Result<()> {
    let corpus = load_corpus(&a.train)?;
    let base = model_for_corpus(cli, file, &corpus)?;
    if !base.kind.is_mix() {
        bail!("ablations apply to MixEncoder models, not {}", base.kind.name());
    }
    let (base, data) = load_data(base, a.vocab.as_deref(), &corpus, Some(&a.eval))?;
    let eval_set = data.eval.as_deref().unwrap_or_default();
    let mut tc = train_config(cli, file);
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    tc.max_steps = a.max_steps.or(tc.max_steps);
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut results = Vec::new();
    for name in &a.runs {
        let cfg = ModelConfig {
            ablation: ablation_flags(name)?,
            ..base.clone()
        };
        let mut model = Model::<T>::new(cfg, tc.seed)?;
        let report = train(&mut model, &data.train, None, &tc, None)?;
        let metrics = evaluate(&model, eval_set, None, tc.eval_batch)?;
        if let Some(dir) = &a.out_dir {
            save_checkpoint(&model, &dir.join(format!("{name}.ckpt")))?;
        }
        eprintln!("{name}: {metrics:?}");
        results.push(serde_json::json!({
            "run": name,
            "steps": report.steps,
            "final_loss": report.losses.last(),
            "metrics": metrics,
        }));
    }
    print_json(&results)
}
