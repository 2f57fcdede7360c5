use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use qrt_core::analysis::AnalysisConfig;
use qrt_core::bm25::{Bm25Params, InvertedIndex};
use qrt_core::corpus::{
    load_documents, load_qrels, load_queries, load_training_samples, write_documents, write_qrels,
    write_queries, write_training_samples, IngestConfig,
};
use qrt_core::curation::{
    build_v1, build_v2, filter_records, load_caps, load_generated_answers, load_records, v1_caps, v2_caps,
    FilterConfig,
};
use qrt_core::evalkit::{
    compare_runs, evaluate_run, rewrite_and_retrieve, EvalOptions, EvalReport, IdentityRewriter, MapRewriter,
    Rewriter,
};
use qrt_core::grpo::{train, GrpoConfig, PolicyRewriter, ToyExpansionPolicy};
use qrt_core::relevance::{HashedEmbedder, PrecomputedStore, RelevanceProvider, RemoteConfig, RemoteEmbedder};
use qrt_core::reward::{score_group, RewardConfig};
use qrt_core::synthetic::SyntheticTask;

use crate::config::AppConfig;
use crate::error::Failure;
use crate::{
    Command, CompareArgs, CurateArgs, CurateMode, IndexArgs, RewardArgs, RewardCommand, RewriteEvalArgs,
    SearchArgs, TrainArgs,
};

pub fn dispatch(command: Command, cfg: &mut AppConfig) -> Result<(), Failure> {
    match command {
        Command::Index(a) => index(a, cfg),
        Command::Search(a) => search(a, cfg),
        Command::Curate(a) => curate(a, cfg),
        Command::Reward(RewardCommand::Score(a)) => reward_score(a, cfg),
        Command::TrainToy(a) => train_toy(a, cfg),
        Command::RewriteEval(a) => rewrite_eval(a, cfg),
        Command::Compare(a) => compare(a),
    }
}

/// Apply `--flag` values on top of the configuration.
fn override_with<T: ToString>(cfg: &mut AppConfig, key: &str, value: Option<T>) -> Result<(), Failure> {
    match value {
        Some(v) => cfg.set(key, &v.to_string()),
        None => Ok(()),
    }
}

/// Buffered writer for `path`, or standard output.
fn sink(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Failure::io(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_all(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    let mut w = sink(path)?;
    let label = path.map_or_else(|| "standard output".into(), |p| p.display().to_string());
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Failure::Data(format!("{label}: {e}")))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let json = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, json + "\n").map_err(|e| Failure::io(path, e))
}

fn analysis(cfg: &AppConfig) -> Result<AnalysisConfig, Failure> {
    let base = AnalysisConfig {
        lowercase: cfg.get("analysis.lowercase")?,
        stopwords: None,
    };
    match cfg.path("analysis.stopwords")? {
        Some(p) => base.with_stopword_file(&p).map_err(|e| Failure::io(&p, e)),
        None => Ok(base),
    }
}

fn bm25_params(cfg: &AppConfig) -> Result<Bm25Params, Failure> {
    Ok(Bm25Params {
        k1: cfg.get("bm25.k1")?,
        b: cfg.get("bm25.b")?,
    })
}

fn provider(cfg: &AppConfig) -> Result<Box<dyn RelevanceProvider>, Failure> {
    let dim: usize = cfg.get("relevance.dim")?;
    match cfg.raw("relevance.provider") {
        "hashed" => {
            if dim == 0 {
                return Err(Failure::Usage("relevance.dim must be at least 1".into()));
            }
            Ok(Box::new(HashedEmbedder::new(dim).with_analysis(analysis(cfg)?)))
        }
        "precomputed" => {
            let path = cfg
                .path("relevance.vectors")?
                .ok_or_else(|| Failure::Usage("relevance.vectors is required for the precomputed provider".into()))?;
            Ok(Box::new(PrecomputedStore::load(&path)?))
        }
        "remote" => {
            let endpoint: String = cfg
                .get_opt("relevance.endpoint")?
                .ok_or_else(|| Failure::Usage("relevance.endpoint is required for the remote provider".into()))?;
            let mut rc = RemoteConfig::new(endpoint, dim);
            rc.timeout = Duration::from_secs(cfg.get("relevance.timeout_secs")?);
            rc.retries = cfg.get("relevance.retries")?;
            rc.max_in_flight = cfg.get("relevance.max_in_flight")?;
            rc.batch_size = cfg.get("relevance.batch_size")?;
            rc.max_tokens = cfg.get_opt("relevance.max_tokens")?;
            Ok(Box::new(RemoteEmbedder::new(rc)))
        }
        other => Err(Failure::Usage(format!("unknown relevance.provider {other:?}"))),
    }
}

fn reward_config(cfg: &AppConfig) -> Result<RewardConfig, Failure> {
    Ok(RewardConfig {
        mode: cfg.get_enum("reward.mode")?,
        content: cfg.get_enum("reward.content")?,
        max_completion_tokens: cfg.get("reward.max_completion_tokens")?,
    })
}

fn grpo_config(cfg: &AppConfig) -> Result<GrpoConfig, Failure> {
    let c = GrpoConfig {
        group_size: cfg.get("grpo.group_size")?,
        clip_epsilon: cfg.get("grpo.clip_epsilon")?,
        kl_beta: cfg.get("grpo.kl_beta")?,
        delta: cfg.get("grpo.delta")?,
        learning_rate: cfg.get("grpo.learning_rate")?,
        group_weight: cfg.get_enum("grpo.group_weight")?,
        loss_aggregation: cfg.get_enum("grpo.loss_aggregation")?,
        epochs_per_batch: cfg.get("grpo.epochs_per_batch")?,
        batch_size: cfg.get_opt("grpo.batch_size")?,
        seed: cfg.get("seed")?,
    };
    c.validate()?;
    Ok(c)
}

fn index(a: IndexArgs, cfg: &AppConfig) -> Result<(), Failure> {
    let docs = load_documents(&a.docs, IngestConfig { allow_empty_text: a.allow_empty_text })?;
    let idx = InvertedIndex::build(&docs, &analysis(cfg)?);
    let path = idx.save(&a.out)?;
    log::info!("indexed {} documents into {}", idx.doc_count(), path.display());
    eprintln!("indexed {} documents, {} terms -> {}", idx.doc_count(), idx.terms().count(), path.display());
    Ok(())
}

fn search(a: SearchArgs, cfg: &mut AppConfig) -> Result<(), Failure> {
    override_with(cfg, "bm25.depth", a.k)?;
    let idx = InvertedIndex::load(&a.index)?;
    let queries = load_queries(&a.queries)?;
    let run = rewrite_and_retrieve(&queries, &IdentityRewriter, &idx, cfg.get("bm25.depth")?, bm25_params(cfg)?)?;
    let mut w = sink(a.out.as_deref())?;
    run.write_to(&mut w, &a.tag)
        .map_err(|e| Failure::Data(format!("writing run: {e}")))
}

fn curate(a: CurateArgs, cfg: &AppConfig) -> Result<(), Failure> {
    let seed: u64 = cfg.get("seed")?;
    let caps = match (&a.caps, a.mode) {
        (Some(p), _) => load_caps(p)?,
        (None, CurateMode::V1) => v1_caps(),
        (None, CurateMode::V2) => v2_caps(),
    };
    let filter = if a.markers.is_empty() {
        FilterConfig::default()
    } else {
        FilterConfig { markers: a.markers.clone(), ..FilterConfig::default() }
    };
    let records = load_records(&a.records)?;
    let total = records.len();
    let kept: Vec<_> = filter_records(records, &filter).collect();
    eprintln!("{} of {total} records pass the text-only filter", kept.len());
    let curated = match a.mode {
        CurateMode::V2 => build_v2(kept, &caps, seed)?,
        CurateMode::V1 => {
            let path = a
                .generated
                .as_deref()
                .ok_or_else(|| Failure::Usage("--generated is required for --mode v1".into()))?;
            build_v1(kept, &load_generated_answers(path)?, &caps, seed)?
        }
    };
    write_training_samples(&a.out, &curated.samples)?;
    if curated.report.missing_generated > 0 {
        eprintln!("skipped {} sampled questions without a generated answer", curated.report.missing_generated);
    }
    for c in &curated.report.unknown_categories {
        eprintln!("warning: no records for category {c}");
    }
    eprintln!("wrote {} samples to {}", curated.samples.len(), a.out.display());
    if let Some(p) = &a.report {
        write_json(p, &curated.report)?;
    }
    Ok(())
}

fn reward_score(a: RewardArgs, cfg: &mut AppConfig) -> Result<(), Failure> {
    override_with(cfg, "reward.mode", a.mode)?;
    override_with(cfg, "reward.content", a.content)?;
    override_with(cfg, "reward.max_completion_tokens", a.max_completion_tokens)?;
    let rc = reward_config(cfg)?;
    let samples = load_training_samples(&a.samples)?;
    let rewrites = read_rewrite_lines(&a.rewrites)?;

    let mut grouped: HashMap<&str, Vec<String>> = HashMap::new();
    for (id, text) in &rewrites {
        if !samples.iter().any(|s| s.id() == id) {
            return Err(Failure::Data(format!("{}: unknown sample id {id:?}", a.rewrites.display())));
        }
        grouped.entry(id.as_str()).or_default().push(text.clone());
    }
    let provider = provider(cfg)?;
    let mut w = sink(a.out.as_deref())?;
    for s in &samples {
        let Some(texts) = grouped.get(s.id()) else {
            continue;
        };
        for record in score_group(provider.as_ref(), s, texts, &rc)? {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Failure::Data(format!("writing rewards: {e}")))?;
        }
    }
    w.flush().map_err(|e| Failure::Data(format!("writing rewards: {e}")))
}

/// `(id, text)` pairs in file order.
fn read_rewrite_lines(path: &Path) -> Result<Vec<(String, String)>, Failure> {
    let raw = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: serde_json::Value =
                serde_json::from_str(l).map_err(|e| Failure::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            match (v.get("id").and_then(|x| x.as_str()), v.get("text").and_then(|x| x.as_str())) {
                (Some(id), Some(text)) => Ok((id.to_string(), text.to_string())),
                _ => Err(Failure::Data(format!(
                    "{}:{}: expected string fields \"id\" and \"text\"",
                    path.display(),
                    i + 1
                ))),
            }
        })
        .collect()
}

fn read_vocab(path: &Path) -> Result<Vec<String>, Failure> {
    let raw = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    Ok(raw
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn train_toy(a: TrainArgs, cfg: &mut AppConfig) -> Result<(), Failure> {
    override_with(cfg, "grpo.iterations", a.iterations)?;
    override_with(cfg, "grpo.group_size", a.group_size)?;
    override_with(cfg, "grpo.clip_epsilon", a.clip_epsilon)?;
    override_with(cfg, "grpo.kl_beta", a.kl_beta)?;
    override_with(cfg, "grpo.delta", a.delta)?;
    override_with(cfg, "grpo.learning_rate", a.learning_rate)?;
    override_with(cfg, "grpo.group_weight", a.group_weight)?;
    override_with(cfg, "grpo.loss_aggregation", a.loss_aggregation)?;
    override_with(cfg, "grpo.epochs_per_batch", a.epochs_per_batch)?;
    override_with(cfg, "grpo.batch_size", a.batch_size)?;
    override_with(cfg, "grpo.buckets", a.buckets)?;
    override_with(cfg, "grpo.expansion_length", a.expansion_length)?;

    let gc = grpo_config(cfg)?;
    let iterations: usize = cfg.get("grpo.iterations")?;
    let buckets: usize = cfg.get("grpo.buckets")?;
    let length: usize = cfg.get("grpo.expansion_length")?;

    let task = a.synthetic.then(|| SyntheticTask::standard(gc.seed));
    let (samples, vocab) = match (&task, &a.train, &a.vocab) {
        (Some(t), _, _) => (t.samples.clone(), t.vocab.clone()),
        (None, Some(train), Some(vocab)) => (load_training_samples(train)?, read_vocab(vocab)?),
        _ => return Err(Failure::Usage("either --synthetic or --train with --vocab is required".into())),
    };
    if let (Some(t), Some(dir)) = (&task, &a.task_out) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
        write_documents(&dir.join("documents.jsonl"), &t.documents)?;
        write_queries(&dir.join("queries.jsonl"), &t.queries)?;
        write_qrels(&dir.join("qrels.tsv"), &t.qrels)?;
        write_training_samples(&dir.join("train.jsonl"), &t.samples)?;
    }

    let initial = ToyExpansionPolicy::new(vocab, buckets, length)?;
    let provider = provider(cfg)?;
    let (policy, log) = train(&initial, &samples, provider.as_ref(), &gc, &reward_config(cfg)?, iterations)?;

    let mut w = sink(a.log.as_deref())?;
    log.write_jsonl(&mut w)
        .map_err(|e| Failure::Data(format!("writing training log: {e}")))?;
    if let Some(p) = &a.checkpoint {
        policy.save(p)?;
    }
    if let Some(p) = &a.rewrites_out {
        let mut out = String::new();
        for s in &samples {
            let line = serde_json::json!({"id": s.id(), "text": policy.greedy_rewrite(&s.query.text)});
            out.push_str(&line.to_string());
            out.push('\n');
        }
        write_all(Some(p), &out)?;
    }
    if let Some(last) = log.entries.last() {
        eprintln!("iteration {}: mean reward {:.4}, mean KL {:.5}", last.iter, last.mean_reward, last.mean_kl);
    }
    if let Some(t) = &task {
        let hits = t.greedy_gold_hits(&policy);
        let covered = hits.iter().filter(|&&h| h >= 2).count();
        eprintln!("greedy rewrites contain >= 2 gold terms for {covered} of {} queries", hits.len());
    }
    Ok(())
}

fn rewrite_eval(a: RewriteEvalArgs, cfg: &mut AppConfig) -> Result<(), Failure> {
    override_with(cfg, "eval.k", a.k)?;
    override_with(cfg, "bm25.depth", a.depth)?;
    if a.skip_unjudged {
        cfg.set("eval.skip_unjudged", "true")?;
    }
    let options = EvalOptions {
        k: cfg.get("eval.k")?,
        skip_unjudged: cfg.get("eval.skip_unjudged")?,
    };
    if options.k == 0 {
        return Err(Failure::Usage("eval.k must be at least 1".into()));
    }
    let depth: usize = cfg.get("bm25.depth")?;

    // Load the rewrites first so a bad rewrite file fails before heavier work.
    let map = a.rewrites.as_deref().map(MapRewriter::load).transpose()?;
    let policy = a.policy.as_deref().map(ToyExpansionPolicy::load).transpose()?;
    let idx = InvertedIndex::load(&a.index)?;
    let queries = load_queries(&a.queries)?;
    let qrels = load_qrels(&a.qrels)?;

    let policy_rewriter = policy.as_ref().map(PolicyRewriter);
    let rewriter: &dyn Rewriter = match (&map, &policy_rewriter) {
        (Some(m), _) => m,
        (None, Some(p)) => p,
        (None, None) => &IdentityRewriter,
    };
    let run = rewrite_and_retrieve(&queries, rewriter, &idx, depth.max(options.k), bm25_params(cfg)?)?;
    if let Some(p) = &a.run_out {
        run.save(p, &a.tag)?;
    }
    let report = evaluate_run(&run, &qrels, options);
    if let Some(p) = &a.report_out {
        write_json(p, &report)?;
    }
    write_all(None, &report.to_table())
}

fn read_report(path: &Path) -> Result<EvalReport, Failure> {
    let raw = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    serde_json::from_str(&raw).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn compare(a: CompareArgs) -> Result<(), Failure> {
    let cmp = compare_runs(&read_report(&a.a)?, &read_report(&a.b)?)?;
    if let Some(p) = &a.out {
        write_json(p, &cmp)?;
    }
    write_all(None, &cmp.to_table())
}
