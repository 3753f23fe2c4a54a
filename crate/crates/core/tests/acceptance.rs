//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use skillsynth_core::cost::{adaptation_calls, AdaptationMethod, CostLedger, CostModelInput, TokenMetric};
use skillsynth_core::harness::{
    make_synthetic_family, pass_at_k, prepare_experiment_pool, run_ablation, split_dataset, AblationArm, Experiment,
    MetricsDocument, ScriptedSolver, SplitSpec, SyntheticVerifier,
};
use skillsynth_core::pipeline::{PipelineSettings, Providers};
use skillsynth_core::pool::{Benchmark, CompactedEvidence, Label, LabelFilter, TaskContext};
use skillsynth_core::profile::Profile;
use skillsynth_core::provider::{MockEmbedder, MockSynthesizer};
use skillsynth_core::retrieval::{retrieve, EmbeddingVector, VectorIndex};
use skillsynth_core::synthesis::{
    assemble_synthesis_prompt, detect_leakage, parse_skill_document, target_block, LeakKind, LeakThresholds,
    SynthesisRequest, NEVER_OVERRIDE_SENTENCE,
};

const RETRIEVAL_CASES: usize = 500;
const RETRIEVAL_BUDGET: Duration = Duration::from_secs(10);
const SYNTHETIC_SEEDS: u64 = 20;
const SYNTHETIC_TASKS: usize = 40;
const SYNTHETIC_BUDGET: Duration = Duration::from_secs(60);
const PASS_AT_K_TRIPLES: usize = 20;
const MONTE_CARLO_DRAWS: usize = 1_000_000;
const PASS_AT_K_TOLERANCE: f64 = 0.003;
const PROMPT_CASES: usize = 100;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("retrieval matches brute-force oracle", retrieval_oracle),
        ("leakage guard on adversarial corpus", leakage_corpus),
        ("seed-7 pipeline is byte-identical across runs", determinism),
        ("full pipeline beats no-retrieval and raw arms", synthetic_effect),
        ("pass@k matches Monte Carlo", pass_at_k_estimator),
        ("dataset splits", split_reproduction),
        ("adaptation cost model", cost_model),
        ("synthesis prompt contract", prompt_contract),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn plain_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn random_vector(rng: &mut ChaCha20Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if v.iter().any(|x| x.abs() > 1e-3) {
            return v;
        }
    }
}

fn retrieval_oracle() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(0x5eed);
    let started = Instant::now();
    let filters = [LabelFilter::All, LabelFilter::SuccessOnly, LabelFilter::FailureOnly];
    let labels = [Label::Success, Label::Failure, Label::Unknown];
    for case in 0..RETRIEVAL_CASES {
        let pool = rng.random_range(1..=200usize);
        let dim = rng.random_range(2..=16usize);
        let k = rng.random_range(1..=10usize);
        let filter = filters[rng.random_range(0..3)];
        let mut index = VectorIndex::new(dim, "oracle");
        let mut rows: Vec<(String, Label, Vec<f64>)> = Vec::with_capacity(pool);
        for i in 0..pool {
            let id = format!("t{:05}", rng.random_range(0..100_000u32) * 1000 + i as u32);
            // Exact ties: power-of-two rescaled copies of earlier vectors.
            let vector = if i > 0 && rng.random_bool(0.2) {
                let scale = [0.5, 2.0, 4.0][rng.random_range(0..3)];
                rows[rng.random_range(0..i)].2.iter().map(|x| x * scale).collect()
            } else {
                random_vector(&mut rng, dim)
            };
            let label = labels[rng.random_range(0..3)];
            index
                .insert(id.clone(), label, EmbeddingVector::new(vector.clone()))
                .map_err(|e| format!("case {case}: insert: {e}"))?;
            rows.push((id, label, vector));
        }
        let query = random_vector(&mut rng, dim);
        let exclude = rng.random_bool(0.3).then(|| rows[rng.random_range(0..pool)].0.clone());

        let mut expected: Vec<(f64, &str)> = rows
            .iter()
            .filter(|(id, label, _)| filter.admits(*label) && Some(id) != exclude.as_ref())
            .map(|(id, _, v)| (plain_cosine(v, &query), id.as_str()))
            .collect();
        expected.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        let expected: Vec<&str> = expected.into_iter().take(k).map(|(_, id)| id).collect();

        let got = retrieve(&index, &EmbeddingVector::new(query), k, filter, exclude.as_deref())
            .map_err(|e| format!("case {case}: {e}"))?;
        if got.ids() != expected {
            return Err(format!("case {case}: got {:?}, expected {:?}", got.ids(), expected));
        }
    }
    let elapsed = started.elapsed();
    if elapsed >= RETRIEVAL_BUDGET {
        return Err(format!("{RETRIEVAL_CASES} cases exact but took {elapsed:?}"));
    }
    Ok(format!("{RETRIEVAL_CASES}/{RETRIEVAL_CASES} exact in {elapsed:.2?}"))
}

const SKELETON: &str = "# SKILL.md

## When to use
- A concise summary of when to use this skill.

## Possible Failure Modes
- Summarize mistakes indicated by retrieved trajectories.
- Convert failures into corrective checks and reusable warnings.

## Possible procedures
- Give generative guidance for solving this family of tasks.
- Do not give the detailed solution directly.
";

/// Nonsense words so filler never collides with skill boilerplate.
fn filler(rng: &mut ChaCha20Rng, n: usize) -> Vec<String> {
    const SYL: [&str; 12] = ["zor", "vek", "qua", "mib", "tal", "dru", "pex", "lon", "wib", "sag", "fyr", "hoz"];
    (0..n)
        .map(|_| format!("{}{}{}", SYL[rng.random_range(0..12)], SYL[rng.random_range(0..12)], SYL[rng.random_range(0..12)]))
        .collect()
}

struct LeakCase {
    skill_line: String,
    evidence: CompactedEvidence,
    target: TaskContext,
    expect: Option<LeakKind>,
}

fn evidence(id: String, excerpt: String) -> CompactedEvidence {
    CompactedEvidence { source_id: id, label: Label::Failure, excerpt, truncated: false, original_step_count: 3 }
}

fn leak_cases() -> Vec<LeakCase> {
    let mut rng = ChaCha20Rng::seed_from_u64(0x1ea6);
    let plain_target = |i: usize| {
        TaskContext::new(format!("target-{i}"), Benchmark::Synthetic, "Transcribe the visible value.")
            .with("family", "offset")
            .with("input", "7")
    };
    let mut cases = Vec::new();
    for i in 0..100 {
        let id = format!("traj-{}", 100 + i);
        let words = filler(&mut rng, 40);
        let case = match i % 10 {
            // Constructed violations.
            0 | 1 => {
                let len = rng.random_range(12..=20);
                let start = rng.random_range(0..=40 - len);
                LeakCase {
                    skill_line: format!("Remember: {}.", words[start..start + len].join(" ")),
                    evidence: evidence(id, words.join(" ")),
                    target: plain_target(i),
                    expect: Some(LeakKind::LongOverlap),
                }
            }
            2 | 3 => {
                let digits = rng.random_range(4..=7);
                let n: u64 = rng.random_range(10u64.pow(digits - 1)..10u64.pow(digits));
                LeakCase {
                    skill_line: format!("Set the total to {n} first."),
                    evidence: evidence(id, format!("{} wrote {n} into the cell", words[..5].join(" "))),
                    target: plain_target(i),
                    expect: Some(LeakKind::NumericConstant),
                }
            }
            4 => {
                let path = format!("/data/{}/{}.xlsx", words[0], words[1]);
                LeakCase {
                    skill_line: format!("Open {path} before editing."),
                    evidence: evidence(id, format!("{} saved {path}", words[2])),
                    target: plain_target(i),
                    expect: Some(LeakKind::PathLiteral),
                }
            }
            5 => LeakCase {
                skill_line: format!("Follow the approach of {id} exactly."),
                evidence: evidence(id, words[..8].join(" ")),
                target: plain_target(i),
                expect: Some(LeakKind::IdLiteral),
            },
            // Controls kept under every threshold.
            6 => {
                let start = rng.random_range(0..=29);
                LeakCase {
                    skill_line: format!("Remember: {}.", words[start..start + 11].join(" ")),
                    evidence: evidence(id, words.join(" ")),
                    target: plain_target(i),
                    expect: None,
                }
            }
            7 => {
                let n = rng.random_range(100..1000);
                LeakCase {
                    skill_line: format!("Keep at most {n} rows."),
                    evidence: evidence(id, format!("{} kept {n} rows", words[0])),
                    target: plain_target(i),
                    expect: None,
                }
            }
            8 => LeakCase {
                skill_line: format!("Use a {} folder and a {}.xlsx workbook; see {id}0 for style.", words[0], words[1]),
                evidence: evidence(id, format!("data/{}/{} saved", words[0], words[1])),
                target: plain_target(i),
                expect: None,
            },
            _ => {
                // Shared with evidence but visible in the target itself.
                let n: u64 = rng.random_range(10_000..100_000);
                let target = TaskContext::new(
                    format!("target-{i}"),
                    Benchmark::Synthetic,
                    format!("Write {n} into {}.", words[3]),
                )
                .with("family", "offset")
                .with("input", n.to_string());
                LeakCase {
                    skill_line: format!("Write {n} exactly as given."),
                    evidence: evidence(id, format!("{} wrote {n}", words[4])),
                    target,
                    expect: None,
                }
            }
        };
        cases.push(case);
    }
    cases
}

fn leakage_corpus() -> Outcome {
    let cases = leak_cases();
    let thresholds = LeakThresholds::default();
    let (mut false_neg, mut false_pos, mut positives) = (Vec::new(), Vec::new(), 0);
    for (i, case) in cases.iter().enumerate() {
        let text = SKELETON.replace(
            "- Do not give the detailed solution directly.",
            &format!("- Do not give the detailed solution directly.\n- {}", case.skill_line),
        );
        let skill = parse_skill_document(&text).map_err(|e| format!("case {i}: {e}"))?;
        let report = detect_leakage(&skill, std::slice::from_ref(&case.evidence), &case.target, &thresholds);
        match case.expect {
            Some(kind) => {
                positives += 1;
                if !report.violations.iter().any(|v| v.kind == kind && v.evidence_source_id == case.evidence.source_id) {
                    false_neg.push(i);
                }
            }
            None => {
                if !report.is_clean() {
                    false_pos.push((i, report.violations));
                }
            }
        }
    }
    if false_neg.is_empty() && false_pos.is_empty() {
        Ok(format!("{} cases, {positives} violations caught, 0 FN, 0 FP", cases.len()))
    } else {
        Err(format!("false negatives {false_neg:?}; false positives {false_pos:?}"))
    }
}

struct RunArtifacts {
    skills: String,
    metrics_json: String,
    cost_csv: String,
}

fn full_mock_run(seed: u64, workers: usize) -> Result<RunArtifacts, String> {
    let fam = make_synthetic_family(seed, SYNTHETIC_TASKS).map_err(|e| e.to_string())?;
    let (embedder, synth, solver) = (MockEmbedder::default(), MockSynthesizer::new(), ScriptedSolver);
    let providers = Providers { embedder: &embedder, synthesizer: &synth, solver: &solver };
    let settings = PipelineSettings { random_seed: seed, workers, ..Default::default() };
    let ledger = CostLedger::new();
    let prepared = prepare_experiment_pool(fam.pool, &providers, &settings, &ledger).map_err(|e| e.to_string())?;
    let summaries = HashMap::new();
    let exp = Experiment {
        prepared: &prepared,
        tests: &fam.tests,
        providers,
        settings,
        verifier: &SyntheticVerifier,
        summaries: &summaries,
    };
    let run = run_ablation(AblationArm::FullPipeline, &exp).map_err(|e| e.to_string())?;
    for entry in run.ledger.entries() {
        ledger.push(entry);
    }
    let mut skills = String::new();
    for task in &run.runs {
        skills.push_str(&format!("## {}\n", task.adaptation.task_id));
        skills.push_str(&task.adaptation.skill.as_ref().map(|s| s.raw.clone()).unwrap_or_default());
    }
    let metrics_json = MetricsDocument::new(seed, vec![run.report]).to_json();
    let cost_csv = ledger
        .report_csv(AdaptationMethod::TestTimeSynthesis.as_str(), fam.tests.len(), TokenMetric::Decoded)
        .map_err(|e| e.to_string())?;
    Ok(RunArtifacts { skills, metrics_json, cost_csv })
}

fn determinism() -> Outcome {
    let a = full_mock_run(7, 1)?;
    let b = full_mock_run(7, 8)?;
    let mut diffs = Vec::new();
    if a.skills != b.skills {
        diffs.push("skills");
    }
    if a.metrics_json != b.metrics_json {
        diffs.push("metrics JSON");
    }
    if a.cost_csv != b.cost_csv {
        diffs.push("cost CSV");
    }
    if diffs.is_empty() {
        Ok(format!(
            "skills {} B, metrics {} B, cost {} B identical (1 vs 8 workers)",
            a.skills.len(),
            a.metrics_json.len(),
            a.cost_csv.len()
        ))
    } else {
        Err(format!("differing artifacts: {}", diffs.join(", ")))
    }
}

fn synthetic_effect() -> Outcome {
    let started = Instant::now();
    let mut worst_margin = f64::INFINITY;
    for seed in 1..=SYNTHETIC_SEEDS {
        let fam = make_synthetic_family(seed, SYNTHETIC_TASKS).map_err(|e| e.to_string())?;
        let (embedder, synth, solver) = (MockEmbedder::default(), MockSynthesizer::new(), ScriptedSolver);
        let providers = Providers { embedder: &embedder, synthesizer: &synth, solver: &solver };
        let settings = PipelineSettings { random_seed: seed, ..Default::default() };
        let prepared = prepare_experiment_pool(fam.pool, &providers, &settings, &CostLedger::new())
            .map_err(|e| e.to_string())?;
        let summaries = HashMap::new();
        let exp = Experiment {
            prepared: &prepared,
            tests: &fam.tests,
            providers,
            settings,
            verifier: &SyntheticVerifier,
            summaries: &summaries,
        };
        let score = |arm| run_ablation(arm, &exp).map(|r| r.report.metrics.pass_at_1).map_err(|e| e.to_string());
        let full = score(AblationArm::FullPipeline)?;
        let none = score(AblationArm::NoRetrieval)?;
        let raw = score(AblationArm::RawTrajectoryPrompting)?;
        if !(full > none && full > raw) {
            return Err(format!("seed {seed}: full {full:.3}, no-retrieval {none:.3}, raw {raw:.3}"));
        }
        worst_margin = worst_margin.min(full - none.max(raw));
    }
    let elapsed = started.elapsed();
    if elapsed >= SYNTHETIC_BUDGET {
        return Err(format!("effect held but took {elapsed:?}"));
    }
    Ok(format!("{SYNTHETIC_SEEDS} seeds x {SYNTHETIC_TASKS} tasks, smallest margin {worst_margin:.3}, {elapsed:.2?}"))
}

fn pass_at_k_estimator() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(0xbadc0de);
    let mut worst: f64 = 0.0;
    for _ in 0..PASS_AT_K_TRIPLES {
        let n = rng.random_range(1..=10u64);
        let c = rng.random_range(0..=n);
        let k = rng.random_range(1..=n);
        let analytic = pass_at_k(n, c, k).map_err(|e| e.to_string())?;
        // Samples 0..c are the correct ones; draw k without replacement.
        let mut hits = 0usize;
        let mut idx: Vec<u64> = (0..n).collect();
        for _ in 0..MONTE_CARLO_DRAWS {
            let mut any = false;
            for i in 0..k as usize {
                let j = rng.random_range(i..n as usize);
                idx.swap(i, j);
                any |= idx[i] < c;
            }
            hits += any as usize;
        }
        let mc = hits as f64 / MONTE_CARLO_DRAWS as f64;
        let err = (mc - analytic).abs();
        if err > PASS_AT_K_TOLERANCE {
            return Err(format!("n={n} c={c} k={k}: analytic {analytic:.5}, Monte Carlo {mc:.5}"));
        }
        worst = worst.max(err);
    }
    for n in 1..=50u64 {
        for c in 0..=n {
            let got = pass_at_k(n, c, 1).map_err(|e| e.to_string())?;
            if got != c as f64 / n as f64 {
                return Err(format!("pass_at_k({n}, {c}, 1) = {got}, expected c/n exactly"));
            }
        }
    }
    Ok(format!("{PASS_AT_K_TRIPLES} triples, max |error| {worst:.5} <= {PASS_AT_K_TOLERANCE}; k=1 exact for n<=50"))
}

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// `(seed, train, test, fingerprint)`; fingerprints were recorded from the
/// first run and pin the split across runs and platforms.
const SPLITS: [(u64, usize, usize, u64); 3] = [
    (0, 200, 200, SPLIT_FP_0),
    (42, 1000, 140, SPLIT_FP_42),
    (123, 798, 342, SPLIT_FP_123),
];
const SPLIT_FP_0: u64 = 0x3d09e5e938af8c8b;
const SPLIT_FP_42: u64 = 0x063a6b5af7b5a81f;
const SPLIT_FP_123: u64 = 0xe404a8af30a64247;

fn split_reproduction() -> Outcome {
    let mut notes = Vec::new();
    for (seed, train_count, test_count, pinned) in SPLITS {
        let ids: Vec<String> = (0..train_count + test_count).map(|i| format!("task-{i:04}")).collect();
        let spec = SplitSpec { seed, train_count, test_count };
        let (train, test) = split_dataset(&ids, spec).map_err(|e| e.to_string())?;
        let (train2, test2) = split_dataset(&ids, spec).map_err(|e| e.to_string())?;
        if train.len() != train_count || test.len() != test_count {
            return Err(format!("seed {seed}: sizes {}/{}", train.len(), test.len()));
        }
        let train_set: std::collections::HashSet<&String> = train.iter().collect();
        if train_set.len() != train_count || test.iter().any(|t| train_set.contains(t)) {
            return Err(format!("seed {seed}: train and test overlap or repeat"));
        }
        if (&train, &test) != (&train2, &test2) {
            return Err(format!("seed {seed}: split differs between runs"));
        }
        let fp = fnv1a(&format!("{}|{}", train.join(","), test.join(",")));
        if fp != pinned {
            return Err(format!("seed {seed}: fingerprint {fp:#018x} differs from pinned {pinned:#018x}"));
        }
        notes.push(format!("seed {seed} {train_count}/{test_count}"));
    }
    Ok(notes.join(", "))
}

fn cost_model() -> Outcome {
    let tts = adaptation_calls(
        AdaptationMethod::TestTimeSynthesis,
        &CostModelInput { n_test: 200, ..Default::default() },
    )
    .map_err(|e| e.to_string())?;
    if tts.calls != 200 {
        return Err(format!("test-time synthesis calls {} != 200", tts.calls));
    }
    let memrl = adaptation_calls(AdaptationMethod::MemRl, &CostModelInput { n_train: 200, epochs: 3, ..Default::default() })
        .map_err(|e| e.to_string())?;
    if memrl.calls != 600 {
        return Err(format!("epoch-based memory calls {} != 600", memrl.calls));
    }
    for n in 2..=4096u64 {
        // Smallest r with 2^r >= n, by repeated doubling.
        let mut want = 0;
        while (1u64 << want) < n {
            want += 1;
        }
        let got = adaptation_calls(AdaptationMethod::Trace2Skill, &CostModelInput { pool_size: n, ..Default::default() })
            .map_err(|e| e.to_string())?;
        if got.rounds != want {
            return Err(format!("pool {n}: {} rounds, expected {want}", got.rounds));
        }
    }
    Ok("200 one-shot calls, 600 epoch calls, log rounds exact for n in 2..=4096".to_string())
}

fn random_context(rng: &mut ChaCha20Rng, profile: Profile, i: usize) -> TaskContext {
    let words = filler(rng, 6).join(" ");
    let mut ctx = TaskContext::new(format!("q-{i}"), profile.benchmark(), format!("Target task {i}: {words}"));
    for key in profile.benchmark().required_keys() {
        ctx = ctx.with(*key, format!("{key}-{}", rng.random_range(0..1000)));
    }
    ctx
}

fn prompt_contract() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(0xc0ffee);
    let profiles = [Profile::Spreadsheet, Profile::Alfworld, Profile::BigCode, Profile::Synthetic];
    let labels = [Label::Success, Label::Failure, Label::Unknown];
    for i in 0..PROMPT_CASES {
        let profile = profiles[rng.random_range(0..4)];
        let target = random_context(&mut rng, profile, i);
        let evidence: Vec<CompactedEvidence> = (0..rng.random_range(0..=5))
            .map(|j| CompactedEvidence {
                source_id: format!("e-{i}-{j}"),
                label: labels[rng.random_range(0..3)],
                excerpt: filler(&mut rng, 30).join(" "),
                truncated: false,
                original_step_count: 2,
            })
            .collect();
        let req = SynthesisRequest { target: target.clone(), evidence: evidence.clone(), profile };
        let prompt = assemble_synthesis_prompt(&req).map_err(|e| format!("case {i}: {e}"))?;
        let text = &prompt.user_text;
        let target_at = text
            .find(&target_block(&target))
            .ok_or_else(|| format!("case {i}: target block missing"))?;
        for ev in &evidence {
            let at = text.find(&ev.excerpt).ok_or_else(|| format!("case {i}: evidence missing"))?;
            if at < target_at {
                return Err(format!("case {i}: evidence precedes target block"));
            }
        }
        if !text.contains(NEVER_OVERRIDE_SENTENCE) {
            return Err(format!("case {i}: never-override sentence missing"));
        }
    }

    parse_skill_document(SKELETON).map_err(|e| format!("skeleton rejected: {e}"))?;
    let sections: Vec<&str> = SKELETON.split("\n\n").collect();
    for drop in 1..sections.len() {
        let without: Vec<&str> =
            sections.iter().enumerate().filter(|(j, _)| *j != drop).map(|(_, s)| *s).collect();
        if parse_skill_document(&without.join("\n\n")).is_ok() {
            return Err(format!("skeleton without section {drop} was accepted"));
        }
    }
    Ok(format!("{PROMPT_CASES} prompts ordered, skeleton accepted, {} deletions rejected", sections.len() - 1))
}
