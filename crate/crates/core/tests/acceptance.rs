//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criterion 8 needs a local copy of BRIGHT; point `BRIGHT_DIR` at a
//! directory with one sub-directory per task, each holding `documents.jsonl`,
//! `queries.jsonl` and `qrels.tsv`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use qrt_core::analysis::{tokenize, AnalysisConfig};
use qrt_core::bm25::{Bm25Params, InvertedIndex};
use qrt_core::corpus::{
    load_documents, load_qrels, load_queries, Document, DocumentCollection, IngestConfig, QrelSet, Query,
    TrainingSample,
};
use qrt_core::evalkit::{evaluate_run, ndcg_at_k, rewrite_and_retrieve, EvalOptions, IdentityRewriter};
use qrt_core::grpo::{
    grpo_gradient, grpo_loss, normalize_advantages, sample_group, train, GroupWeightMode, GrpoConfig,
    PolicyRewriter, ToyExpansionPolicy,
};
use qrt_core::relevance::{CountingProvider, HashedEmbedder};
use qrt_core::reward::{score_group, semi_rule_reward, AnswerContent, FormatMode, RewardConfig, FORMAT_PENALTY};
use qrt_core::synthetic::SyntheticTask;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

const WORDS: [&str; 24] = [
    "river", "enzyme", "orbit", "lattice", "proof", "market", "neuron", "signal", "glacier", "kernel",
    "torque", "theorem", "protein", "compiler", "erosion", "inflation", "voltage", "graph", "fossil",
    "catalyst", "momentum", "entropy", "syntax", "basin",
];

fn random_text(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    let n = rng.gen_range(1..=max_len);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn reward_identity() -> Outcome {
    let provider = HashedEmbedder::new(64);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let a = random_text(&mut rng, 8);
        let b = random_text(&mut rng, 8);
        let docs: Vec<Document> = (0..rng.gen_range(1..=4))
            .map(|j| Document::new(format!("d{j}"), random_text(&mut rng, 12)))
            .collect();
        let same = semi_rule_reward(&provider, &a, &a, &docs).map_err(|e| e.to_string())?;
        check(same == 0.0, || format!("fixture {i}: R(q, q) = {same}"))?;
        let ab = semi_rule_reward(&provider, &a, &b, &docs).map_err(|e| e.to_string())?;
        let ba = semi_rule_reward(&provider, &b, &a, &docs).map_err(|e| e.to_string())?;
        worst = worst.max((ab + ba).abs());
        check((ab + ba).abs() < 1e-12, || format!("fixture {i}: {ab} vs {ba}"))?;
    }
    Ok(format!("1000 fixtures, max |R(a,b) + R(b,a)| = {worst:.1e}"))
}

fn advantage_normalization() -> Outcome {
    let delta = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for i in 0..1000 {
        let g = [2, 4, 16][i % 3];
        let rewards: Vec<f64> = (0..g).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = g as f64;
        let mu = rewards.iter().sum::<f64>() / n;
        let sd = (rewards.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / n).sqrt();
        if sd == 0.0 {
            continue;
        }
        let a = normalize_advantages(&rewards, delta, GroupWeightMode::Uniform);
        let am = a.iter().sum::<f64>() / n;
        let asd = (a.iter().map(|x| (x - am) * (x - am)).sum::<f64>() / n).sqrt();
        check(am.abs() <= 1e-9, || format!("group {i}: mean {am}"))?;
        check((asd - sd / (sd + delta)).abs() < 1e-9, || format!("group {i}: std {asd}"))?;
        checked += 1;
    }
    let a = normalize_advantages(&[1.0, 2.0, 3.0], delta, GroupWeightMode::Uniform);
    check(
        (a[0] + 1.22459).abs() < 1e-5 && a[1].abs() < 1e-12 && (a[2] - 1.22459).abs() < 1e-5,
        || format!("[1,2,3] gave {a:?}"),
    )?;
    Ok(format!("{checked} groups; [1,2,3] -> {:.5}", a[2]))
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut coords = 0;
    for case in 0..50 {
        let v = rng.gen_range(2..=8);
        let f = rng.gen_range(1..=4);
        let l = rng.gen_range(1..=3);
        let vocab: Vec<String> = (0..v).map(|i| format!("w{i}")).collect();
        let logits: Vec<f64> = (0..v * f).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let policy = ToyExpansionPolicy::from_logits(vocab.clone(), f, l, logits).unwrap();
        let reference = ToyExpansionPolicy::from_logits(
            vocab,
            f,
            l,
            policy.logits().iter().map(|z| z + rng.gen_range(-0.5..0.5)).collect(),
        )
        .unwrap();
        let cfg = GrpoConfig {
            group_size: 4,
            kl_beta: rng.gen_range(0.0..0.1),
            ..Default::default()
        };
        let mut rollouts = Vec::new();
        for s in 0..3 {
            let q = Query::new(format!("q{s}"), format!("query {case} {s}"));
            let mut r = sample_group(&policy, &q, cfg.group_size, rng.gen());
            r.fill_reference(&reference).unwrap();
            // Shift the behavior log-probs so ratios differ from 1 but stay
            // inside the clip band, away from the surrogate's kinks.
            for t in r.token_logp_old.iter_mut().flatten() {
                *t += rng.gen_range(-0.15..0.15);
            }
            r.set_rewards((0..cfg.group_size).map(|_| rng.gen()).collect(), cfg.delta, GroupWeightMode::Uniform);
            rollouts.push(r);
        }
        let (_, grad) = grpo_gradient(&policy, &rollouts, &cfg).map_err(|e| e.to_string())?;
        let h = 1e-5;
        for (k, &g) in grad.iter().enumerate() {
            let mut plus = policy.clone();
            plus.logits_mut()[k] += h;
            let mut minus = policy.clone();
            minus.logits_mut()[k] -= h;
            let fd = (grpo_loss(&plus, &rollouts, &cfg).unwrap().loss - grpo_loss(&minus, &rollouts, &cfg).unwrap().loss)
                / (2.0 * h);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            coords += 1;
            check(rel < 1e-4, || format!("policy {case}, coordinate {k}: analytic {} vs numeric {fd}", g))?;
        }
    }
    Ok(format!("50 policies, {coords} coordinates, max relative error {worst:.1e}"))
}

/// BM25 from raw counts, scoring every document.
fn brute_force(docs: &DocumentCollection, query: &str, k: usize) -> Vec<(String, f64)> {
    let cfg = AnalysisConfig::default();
    let tokens: Vec<Vec<String>> = docs.iter().map(|d| tokenize(&d.text, &cfg).into_vec()).collect();
    let n = tokens.len() as f64;
    let avg = tokens.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let (k1, b) = (1.2, 0.75);
    let q = tokenize(query, &cfg).into_vec();
    let mut scored: Vec<(String, f64)> = docs
        .iter()
        .zip(&tokens)
        .map(|(d, toks)| {
            let mut s = 0.0;
            for term in &q {
                let df = tokens.iter().filter(|t| t.contains(term)).count() as f64;
                let tf = toks.iter().filter(|t| *t == term).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                s += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * toks.len() as f64 / avg));
            }
            (d.id.clone(), s)
        })
        .filter(|(_, s)| *s > 0.0)
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

fn bm25_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let docs = DocumentCollection::from_items((0..20).map(|i| Document::new(format!("doc{i:02}"), random_text(&mut rng, 15))))
        .unwrap();
    let index = InvertedIndex::build(&docs, &AnalysisConfig::default());
    let mut compared = 0;
    for qi in 0..10 {
        let text = random_text(&mut rng, 4);
        let got = index.search_text(&text, 20, Bm25Params::default()).entries;
        let want = brute_force(&docs, &text, 20);
        let ids = |v: &[(String, f64)]| v.iter().map(|(d, _)| d.clone()).collect::<Vec<_>>();
        check(ids(&got) == ids(&want), || format!("query {qi} {text:?}: order differs"))?;
        for ((_, a), (_, b)) in got.iter().zip(&want) {
            check((a - b).abs() < 1e-9, || format!("query {qi}: score {a} vs {b}"))?;
        }
        compared += got.len();
    }
    Ok(format!("10 queries, {compared} ranked entries identical"))
}

fn permutations(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == items.len() {
        out.push(items.clone());
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permutations(items, k + 1, out);
        items.swap(k, i);
    }
}

fn ndcg_cases() -> Outcome {
    let mut q = QrelSet::new();
    q.insert("one", "r", 1).unwrap();
    q.insert("two", "a", 1).unwrap();
    q.insert("two", "b", 1).unwrap();
    let v = ndcg_at_k(&["x", "y", "r"], &q, "one", 10);
    check(v == 0.5, || format!("rank-3 case gave {v}"))?;
    let v = ndcg_at_k(&["b", "a", "z"], &q, "two", 10);
    check(v == 1.0, || format!("ideal case gave {v}"))?;
    let v = ndcg_at_k(&["a"], &q, "absent", 10);
    check(v == 0.0, || format!("empty qrels gave {v}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut perms = Vec::new();
    permutations(&mut (0..6).collect(), 0, &mut perms);
    let mut evaluated = 0;
    for trial in 0..20 {
        let grades: Vec<u32> = (0..6).map(|_| rng.gen_range(0..4)).collect();
        let mut qrels = QrelSet::new();
        for (i, &g) in grades.iter().enumerate() {
            qrels.insert("q", &format!("c{i}"), g).unwrap();
        }
        for k in 1..=6 {
            let mut ideal: Vec<usize> = (0..6).collect();
            ideal.sort_by(|&a, &b| grades[b].cmp(&grades[a]));
            let name = |p: &[usize]| p.iter().map(|i| format!("c{i}")).collect::<Vec<_>>();
            let best = ndcg_at_k(&name(&ideal), &qrels, "q", k);
            for p in &perms {
                let v = ndcg_at_k(&name(p), &qrels, "q", k);
                check(v <= best + 1e-15 && (0.0..=1.0).contains(&v), || {
                    format!("trial {trial}, k={k}: {v} exceeds ideal {best}")
                })?;
                evaluated += 1;
            }
        }
    }
    Ok(format!("hand cases exact; {evaluated} permuted rankings within the ideal bound"))
}

fn toy_convergence() -> Outcome {
    let task = SyntheticTask::standard(7);
    let provider = HashedEmbedder::new(1024);
    let cfg = GrpoConfig {
        group_size: 16,
        clip_epsilon: 0.2,
        kl_beta: 0.008,
        delta: 1e-4,
        learning_rate: 0.1,
        seed: 7,
        ..Default::default()
    };
    let initial = task.initial_policy(1024);
    let (policy, log) = train(&initial, &task.samples, &provider, &cfg, &RewardConfig::default(), 200)
        .map_err(|e| e.to_string())?;
    let smooth = log.smoothed_reward(20);
    let gain = smooth[199] - smooth[19];

    let hits = task.greedy_gold_hits(&policy);
    let covered = hits.iter().filter(|&&h| h >= 2).count() as f64 / hits.len() as f64;

    let index = InvertedIndex::build(&task.documents, &AnalysisConfig::default());
    let p = Bm25Params::default();
    let opts = EvalOptions::default();
    let base = rewrite_and_retrieve(&task.queries, &IdentityRewriter, &index, 10, p).map_err(|e| e.to_string())?;
    let tuned = rewrite_and_retrieve(&task.queries, &PolicyRewriter(&policy), &index, 10, p).map_err(|e| e.to_string())?;
    let base = evaluate_run(&base, &task.qrels, opts).mean;
    let tuned = evaluate_run(&tuned, &task.qrels, opts).mean;

    let detail = format!(
        "smoothed reward {:.4} -> {:.4} (+{gain:.4}); >=2 gold terms for {:.0}% of queries; ndcg@10 {base:.3} -> {tuned:.3}",
        smooth[19],
        smooth[199],
        covered * 100.0
    );
    check(gain >= 0.1, || format!("reward gain below 0.1: {detail}"))?;
    check(covered >= 0.8, || format!("greedy coverage below 80%: {detail}"))?;
    check(tuned - base >= 0.05, || format!("ndcg gain below 0.05: {detail}"))?;
    Ok(detail)
}

fn format_gate() -> Outcome {
    let provider = CountingProvider::new(HashedEmbedder::new(64));
    let cfg = RewardConfig {
        mode: FormatMode::ExplicitThinking,
        content: AnswerContent::Answer,
        ..Default::default()
    };
    let sample = TrainingSample::from_texts("s", "why is the sky blue", ["rayleigh scattering".to_string()], None).unwrap();
    let bad = [
        "",
        "plain rewrite",
        "<answer>x</answer>",
        "<think>x</think>",
        "<answer>x</answer><think>y</think>",
        "<think>a</think>junk<answer>b</answer>",
        "<think>a</think><answer>b</answer><answer>c</answer>",
        "<think>a<think>b</think><answer>c</answer>",
        "<think>a</think><answer>b",
        "prefix <think>a</think><answer>b</answer> suffix",
    ]
    .map(String::from);
    let records = score_group(&provider, &sample, &bad, &cfg).map_err(|e| e.to_string())?;
    for r in &records {
        check(r.reward == FORMAT_PENALTY && r.format_failed, || {
            format!("{:?} got reward {}", r.rewrite_text, r.reward)
        })?;
    }
    check(provider.calls() == 0, || format!("provider called {} times", provider.calls()))?;
    let good = score_group(&provider, &sample, &["<think>t</think><answer>light scattering</answer>".to_string()], &cfg)
        .map_err(|e| e.to_string())?;
    check(!good[0].format_failed && provider.calls() > 0, || "well-formed output was rejected".into())?;
    Ok(format!("{} malformed outputs scored -1 with 0 provider calls", bad.len()))
}

fn bright_tasks(root: &Path) -> Result<Vec<PathBuf>, String> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| format!("{}: {e}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("documents.jsonl").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(format!("no task directories under {}", root.display()));
    }
    Ok(dirs)
}

fn bright_bm25(root: &Path) -> Outcome {
    let mut scores = BTreeMap::new();
    for dir in bright_tasks(root)? {
        let docs = load_documents(&dir.join("documents.jsonl"), IngestConfig { allow_empty_text: true })
            .map_err(|e| e.to_string())?;
        let queries = load_queries(&dir.join("queries.jsonl")).map_err(|e| e.to_string())?;
        let qrels = load_qrels(&dir.join("qrels.tsv")).map_err(|e| e.to_string())?;
        let index = InvertedIndex::build(&docs, &AnalysisConfig::default());
        let run = rewrite_and_retrieve(&queries, &IdentityRewriter, &index, 10, Bm25Params::default())
            .map_err(|e| e.to_string())?;
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        scores.insert(name, 100.0 * evaluate_run(&run, &qrels, EvalOptions::default()).mean);
    }
    let avg = scores.values().sum::<f64>() / scores.len() as f64;
    let detail = format!("{} tasks, average ndcg@10 {avg:.1}", scores.len());
    check((avg - 14.5).abs() <= 1.0, || format!("outside 14.5 +- 1.0: {detail}"))?;
    Ok(detail)
}

fn main() -> ExitCode {
    let bright = std::env::var_os("BRIGHT_DIR").map(PathBuf::from);
    type Criterion = (u32, &'static str, Duration, Option<Box<dyn Fn() -> Outcome>>);
    let criteria: Vec<Criterion> = vec![
        (1, "reward identity and antisymmetry", Duration::from_secs(5), Some(Box::new(reward_identity))),
        (2, "advantage normalization", Duration::from_secs(2), Some(Box::new(advantage_normalization))),
        (3, "GRPO gradient check", Duration::from_secs(30), Some(Box::new(gradient_check))),
        (4, "BM25 oracle equivalence", Duration::from_secs(1), Some(Box::new(bm25_oracle))),
        (5, "nDCG correctness", Duration::from_secs(5), Some(Box::new(ndcg_cases))),
        (6, "toy GRPO convergence", Duration::from_secs(180), Some(Box::new(toy_convergence))),
        (7, "explicit-thinking format gate", Duration::from_secs(1), Some(Box::new(format_gate))),
        (
            8,
            "BRIGHT BM25 baseline",
            Duration::from_secs(24 * 3600),
            bright.map(|root| Box::new(move || bright_bm25(&root)) as Box<dyn Fn() -> Outcome>),
        ),
    ];

    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        let Some(run) = run else {
            println!("criterion {id} SKIP  {name}: set BRIGHT_DIR to run");
            continue;
        };
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let (label, detail) = match outcome {
            Ok(d) if elapsed <= budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; exceeded {budget:?} budget")),
            Err(d) => ("FAIL", d),
        };
        failed += usize::from(label == "FAIL");
        println!("criterion {id} {label}  {name}: {detail} [{:.2}s]", elapsed.as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
