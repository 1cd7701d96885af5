//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use schemalink::dataset::{
    load_examples, load_spider_schemas, read_jsonl, sim_questions, to_jsonl,
};
use schemalink::grpo::{
    group_advantages, grpo_gradient, grpo_objective, kl_estimate, Decision, DifferentiablePolicy,
    GrpoConfig, Trajectory, TrajectoryGroup,
};
use schemalink::metrics::{aggregate_report, MetricReport};
use schemalink::response::{
    count_markers, parse_answer, render_response, token_count, validate_format, ParsedResponse,
};
use schemalink::reward::{
    column_reward, format_reward, length_reward, marker_reward, max_total_reward, table_reward,
    total_reward, RewardConfig,
};
use schemalink::schema::{DbSchema, LinkedExample, SchemaLinkSet};
use schemalink::sim::{render_run_log, train_loop, SimConfig, SimQuestion, TrainOutcome};
use schemalink::sql::build_ground_truth;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------- rewards

/// Straight transcription of the linking reward: gain per recovered truth
/// item, penalty per wrong predicted item.
fn reward_oracle(truth: &BTreeSet<String>, pred: &BTreeSet<String>, rmax: f64, pmax: f64) -> f64 {
    let hits = pred.iter().filter(|p| truth.contains(*p)).count() as f64;
    let wrong = pred.len() as f64 - hits;
    let gain = if truth.is_empty() {
        0.0
    } else {
        rmax * hits / truth.len() as f64
    };
    let loss = if pred.is_empty() {
        0.0
    } else {
        pmax * wrong / pred.len() as f64
    };
    gain - loss
}

fn random_subset(rng: &mut ChaCha8Rng, universe: &[String], p: f64) -> BTreeSet<String> {
    universe
        .iter()
        .filter(|_| rng.random::<f64>() < p)
        .cloned()
        .collect()
}

fn reward_bounds() -> Outcome {
    let start = Instant::now();
    let cfg = RewardConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tables: Vec<String> = (0..8).map(|i| format!("t{i}")).collect();
    let columns: Vec<String> = (0..12).map(|i| format!("t{}.c{i}", i % 4)).collect();
    let mut checked = 0usize;

    for task in ["table", "column"] {
        let (universe, rmax, pmax) = match task {
            "table" => (&tables, cfg.r_tmax, cfg.p_tmax),
            _ => (&columns, cfg.r_cmax, cfg.p_cmax),
        };
        let score = |t: &BTreeSet<String>, p: &BTreeSet<String>| -> f64 {
            match task {
                "table" => table_reward(t, p, &cfg).expect("non-empty truth"),
                _ => column_reward(t, p, &cfg),
            }
        };
        let mut n = 0;
        while n < 10_000 {
            let density = rng.random_range(0.05..0.9);
            let truth = random_subset(&mut rng, universe, density);
            if task == "table" && truth.is_empty() {
                ensure!(
                    table_reward(&truth, &set(&["t0"]), &cfg).is_err(),
                    "empty table truth accepted"
                );
                continue;
            }
            let density = rng.random_range(0.05..0.9);
            let pred = random_subset(&mut rng, universe, density);
            let r = score(&truth, &pred);
            let oracle = reward_oracle(&truth, &pred, rmax, pmax);
            ensure!(
                close(r, oracle, 1e-12),
                "{task}: {r} != oracle {oracle} for {truth:?} / {pred:?}"
            );
            ensure!(
                (-pmax..=rmax).contains(&r),
                "{task}: {r} outside [-{pmax}, {rmax}]"
            );

            let best = if truth.is_empty() { 0.0 } else { rmax };
            ensure!(
                close(r, best, 1e-12) == (pred == truth),
                "{task}: maximality mismatch for {truth:?} / {pred:?} (r = {r})"
            );

            for u in universe.iter() {
                if truth.contains(u) && !pred.contains(u) {
                    let mut more = pred.clone();
                    more.insert(u.clone());
                    ensure!(
                        score(&truth, &more) > r,
                        "{task}: adding truth item {u} did not raise reward"
                    );
                }
                if pred.contains(u) && !truth.contains(u) {
                    let mut less = pred.clone();
                    less.remove(u);
                    ensure!(
                        score(&truth, &less) >= r,
                        "{task}: dropping wrong item {u} lowered reward"
                    );
                }
            }
            n += 1;
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("{checked} pairs in {elapsed:.2?}"))
}

// ------------------------------------------------------ boundary table

fn boundary_schema() -> DbSchema {
    DbSchema::new(
        "concert_singer",
        vec![
            ("singer", vec!["singer_id", "name", "age"]),
            ("concert", vec!["concert_id", "theme", "year"]),
        ],
    )
    .unwrap()
}

fn words(n: usize) -> String {
    vec!["w"; n].join(" ")
}

fn boundary_cases() -> Outcome {
    let schema = boundary_schema();
    let cfg = RewardConfig::default();
    let canonical =
        "<think>reason</think><answer>###table: singer\n###columns: singer.name</answer>";
    let mut cases = 0;

    let format_cases: &[(&str, bool)] = &[
        (canonical, true),
        ("<think>reason<answer>x</answer>", false),
        ("<answer>x</answer><think>y</think>", false),
        ("", false),
        ("  <think>a</think>\n<answer>b</answer>\n", true),
        ("pre<think>a</think><answer>b</answer>", false),
        ("<think>a</think><answer>b</answer>post", false),
        ("<think>a</think><think>b</think><answer>c</answer>", false),
        (
            "<think>a</think><answer>b</answer><answer>c</answer>",
            false,
        ),
        ("<think>a</think>", false),
        ("<answer>b</answer>", false),
    ];
    for (raw, ok) in format_cases {
        ensure!(
            validate_format(raw).ok == *ok,
            "validate_format({raw:?}) should be {ok}"
        );
        let parsed = ParsedResponse::parse(raw, &schema);
        let expected = if *ok { 1.0 } else { 0.0 };
        ensure!(
            format_reward(&parsed) == expected,
            "R_f({raw:?}) should be {expected}"
        );
        cases += 1;
    }

    let marker_cases: &[(&str, (usize, usize), f64)] = &[
        ("###table: a\n###columns: a.b", (1, 1), 2.0),
        ("###table: a ###table: b ###columns: x", (2, 1), 1.0),
        ("", (0, 0), 0.0),
        ("###table: a", (1, 0), 1.0),
        ("###columns: a.b", (0, 1), 1.0),
        ("###table: a\n###columns: a.b\n###columns: a.c", (1, 2), 1.0),
    ];
    for (answer, counts, reward) in marker_cases {
        ensure!(
            count_markers(answer) == *counts,
            "count_markers({answer:?}) should be {counts:?}"
        );
        let parsed = ParsedResponse::parse(
            &format!("<think>x</think><answer>{answer}</answer>"),
            &schema,
        );
        ensure!(
            marker_reward(&parsed) == *reward,
            "R_c for {answer:?} should be {reward}"
        );
        cases += 1;
    }

    for (len, lower, upper, expected) in [
        (64, 64, 512, 1.0),
        (512, 64, 512, 0.0),
        (10, 64, 512, 0.0),
        (63, 64, 512, 0.0),
        (511, 64, 512, 1.0),
        (0, 64, 512, 0.0),
        (0, 0, 1, 1.0),
        (1, 0, 1, 0.0),
    ] {
        let c = RewardConfig {
            lower_len: lower,
            upper_len: upper,
            ..RewardConfig::default()
        };
        ensure!(
            length_reward(len, &c) == expected,
            "R_l({len}, {lower}, {upper}) should be {expected}"
        );
        cases += 1;
    }

    for (raw, n) in [
        ("a b  c", 3),
        ("", 0),
        ("<think>x</think>", 1),
        (" \n\t", 0),
    ] {
        ensure!(token_count(raw) == n, "token_count({raw:?}) should be {n}");
        cases += 1;
    }

    let answers: &[(&str, SchemaLinkSet)] = &[
        (
            "###table: singer\n###columns: singer.name, singer.age",
            SchemaLinkSet::new(["singer"], ["singer.name", "singer.age"]),
        ),
        (
            "###table: singer, concert\n###columns: name",
            SchemaLinkSet::new(["singer", "concert"], ["singer.name"]),
        ),
        (
            "###table: singer\n###columns:",
            SchemaLinkSet::new(["singer"], Vec::<&str>::new()),
        ),
    ];
    for (answer, expected) in answers {
        let got =
            parse_answer(answer, &schema).map_err(|e| format!("parse_answer({answer:?}): {e}"))?;
        ensure!(
            &got == expected,
            "parse_answer({answer:?}) = {got}, expected {expected}"
        );
        cases += 1;
    }
    ensure!(
        parse_answer("###table: a ###table: b ###columns: x", &schema).is_err(),
        "duplicate markers parsed"
    );
    ensure!(
        render_response("x", &SchemaLinkSet::new(["a"], ["a.b"]))
            == "<think>x</think><answer>###table: a\n###columns: a.b</answer>",
        "canonical rendering differs"
    );
    cases += 2;

    let tr = |t: &[&str], p: &[&str]| table_reward(&set(t), &set(p), &cfg).unwrap();
    let cr = |t: &[&str], p: &[&str]| column_reward(&set(t), &set(p), &cfg);
    for (got, expected, label) in [
        (tr(&["a", "b"], &["a", "b"]), 2.0, "R_st exact"),
        (tr(&["a", "b"], &["a", "c"]), 0.0, "R_st half right"),
        (tr(&["a", "b"], &[]), 0.0, "R_st empty pred"),
        (cr(&["a.x"], &["a.x"]), 1.0, "R_sc exact"),
        (cr(&["a.x", "a.y"], &["a.x", "b.z"]), 0.0, "R_sc half right"),
        (cr(&[], &["a.x"]), -1.0, "R_sc pure penalty"),
    ] {
        ensure!(got == expected, "{label}: {got} != {expected}");
        cases += 1;
    }

    let truth = SchemaLinkSet::new(["singer"], ["singer.name"]);
    let good = ParsedResponse::parse(&render_response(&words(80), &truth), &schema);
    let b = total_reward(&good, &truth, &cfg);
    ensure!(b.total == 7.0, "canonical correct total {} != 7", b.total);

    let malformed = ParsedResponse::parse(
        &format!(
            "<think>{}<answer>###table: singer\n###columns: singer.name</answer>",
            words(80)
        ),
        &schema,
    );
    let b = total_reward(&malformed, &truth, &cfg);
    ensure!(
        b.r_f == 0.0
            && b.r_s == 0.0
            && b.parse_failed
            && b.total == b.r_c + b.r_l
            && b.total == 3.0,
        "malformed response scored {b:?}"
    );

    let wrong = SchemaLinkSet::new(["concert"], ["concert.theme"]);
    for think in [words(80), words(2)] {
        let parsed = ParsedResponse::parse(&render_response(&think, &wrong), &schema);
        let b = total_reward(&parsed, &truth, &cfg);
        let expected = 1.0 + 2.0 + b.r_l - cfg.p_tmax - cfg.p_cmax;
        ensure!(
            b.total == expected,
            "fully wrong total {} != {expected}",
            b.total
        );
    }
    cases += 4;
    Ok(format!("{cases} exact cases"))
}

// -------------------------------------------------------- advantages

fn advantage_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut varied, mut flat) = (0, 0);
    for i in 0..1000 {
        let g = rng.random_range(2..=16);
        let rewards: Vec<f64> = if i % 10 == 0 {
            vec![rng.random_range(-3.0..7.0); g]
        } else {
            (0..g).map(|_| rng.random_range(-3.0..7.0)).collect()
        };
        let adv = group_advantages(&rewards, 1e-8).map_err(|e| e.to_string())?;
        let n = g as f64;
        if rewards.iter().any(|&r| r != rewards[0]) {
            let mean = adv.iter().sum::<f64>() / n;
            let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
            ensure!(mean.abs() < 1e-9, "group {i}: mean advantage {mean}");
            ensure!((std - 1.0).abs() < 1e-9, "group {i}: std {std}");
            varied += 1;
        } else {
            ensure!(
                adv.iter().all(|&a| a == 0.0),
                "group {i}: flat group gave {adv:?}"
            );
            flat += 1;
        }
    }
    ensure!(
        group_advantages(&[1.0], 1e-8).is_err(),
        "singleton group accepted"
    );
    Ok(format!("{varied} varied groups, {flat} flat groups"))
}

// ---------------------------------------------------------- gradient

/// Bernoulli policy whose decision logits are linear in 5 shared
/// parameters, so every parameter touches every decision.
#[derive(Clone)]
struct LinearBernoulli {
    theta: Vec<f64>,
    features: Vec<Vec<f64>>,
}

impl LinearBernoulli {
    fn logit(&self, k: usize) -> f64 {
        self.features[k]
            .iter()
            .zip(&self.theta)
            .map(|(f, t)| f * t)
            .sum()
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl DifferentiablePolicy for LinearBernoulli {
    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn decision_logprob(&self, d: &Decision) -> f64 {
        let z = self.logit(d.param);
        if d.taken {
            log_sigmoid(z)
        } else {
            log_sigmoid(-z)
        }
    }

    fn accumulate_logprob_grad(&self, d: &Decision, scale: f64, grad: &mut [f64]) {
        let p = 1.0 / (1.0 + (-self.logit(d.param)).exp());
        let x = if d.taken { 1.0 } else { 0.0 };
        for (g, f) in grad.iter_mut().zip(&self.features[d.param]) {
            *g += scale * (x - p) * f;
        }
    }
}

fn gradient_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut clipped_seen = 0usize;
    for config in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + config);
        let n_elems = rng.random_range(4..8);
        let policy = LinearBernoulli {
            theta: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
            features: (0..n_elems)
                .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        };
        let perturb = |p: &LinearBernoulli, rng: &mut ChaCha8Rng, s: f64| {
            let mut q = p.clone();
            q.theta
                .iter_mut()
                .for_each(|t| *t += rng.random_range(-s..s));
            q
        };
        let old = perturb(&policy, &mut rng, 0.4);
        let reference = perturb(&policy, &mut rng, 0.8);
        let cfg = GrpoConfig {
            clip_eps: 0.2,
            kl_coef: rng.random_range(0.0..0.2),
            ..GrpoConfig::default()
        };
        let groups: Vec<TrajectoryGroup> = (0..rng.random_range(1..4))
            .map(|gi| {
                let g = rng.random_range(2..6);
                let mut group = TrajectoryGroup {
                    question_id: format!("g{gi}"),
                    trajectories: (0..g)
                        .map(|_| {
                            let len = rng.random_range(1..=n_elems);
                            let decisions = (0..len)
                                .map(|k| Decision {
                                    param: k,
                                    taken: rng.random::<bool>(),
                                })
                                .collect();
                            let mut t = Trajectory::sampled(decisions, &old, &reference);
                            t.reward = rng.random_range(0.0..7.0);
                            t
                        })
                        .collect(),
                };
                group.assign_advantages(1e-8).unwrap();
                group
            })
            .collect();

        for g in &groups {
            for t in &g.trajectories {
                for (d, lo) in t.decisions.iter().zip(&t.logp_old) {
                    let ratio = (policy.decision_logprob(d) - lo).exp();
                    if !(1.0 - cfg.clip_eps..=1.0 + cfg.clip_eps).contains(&ratio) {
                        clipped_seen += 1;
                    }
                }
            }
        }

        let (_, analytic) = grpo_gradient(&policy, &groups, &cfg).map_err(|e| e.to_string())?;
        let h = 1e-5;
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = policy.clone();
            plus.theta[j] += h;
            let mut minus = policy.clone();
            minus.theta[j] -= h;
            let jp = grpo_objective(&plus, &groups, &cfg).unwrap();
            let jm = grpo_objective(&minus, &groups, &cfg).unwrap();
            let numeric = (jp - jm) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            ensure!(
                rel < 1e-4,
                "config {config} param {j}: analytic {a} vs numeric {numeric} (rel {rel:e})"
            );
            worst = worst.max(rel);
        }
    }
    ensure!(
        clipped_seen > 0,
        "no configuration exercised the clipped branch"
    );
    Ok(format!(
        "20 configs, max relative error {worst:.2e}, {clipped_seen} clipped decisions"
    ))
}

// ---------------------------------------------------------------- KL

fn kl_estimator() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10_000 {
        let a = rng.random_range(-30.0..0.0);
        let b = rng.random_range(-30.0..0.0);
        let k = kl_estimate(a, b);
        ensure!(k >= 0.0 && k.is_finite(), "kl_estimate({a}, {b}) = {k}");
        ensure!(kl_estimate(a, a) == 0.0, "kl_estimate({a}, {a}) != 0");
    }

    let mut worst: f64 = 0.0;
    for trial in 0..3 {
        let dims = 5;
        let p: Vec<f64> = (0..dims).map(|_| rng.random_range(0.1..0.9)).collect();
        let q: Vec<f64> = (0..dims).map(|_| rng.random_range(0.1..0.9)).collect();
        let exact: f64 = p
            .iter()
            .zip(&q)
            .map(|(p, q)| p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln())
            .sum();
        let n = 100_000;
        let mut total = 0.0;
        for _ in 0..n {
            for i in 0..dims {
                let x = rng.random::<f64>() < p[i];
                let (lp, lq) = if x {
                    (p[i].ln(), q[i].ln())
                } else {
                    ((1.0 - p[i]).ln(), (1.0 - q[i]).ln())
                };
                total += kl_estimate(lp, lq);
            }
        }
        let mean = total / n as f64;
        let rel = (mean - exact).abs() / exact;
        ensure!(
            rel < 0.02,
            "trial {trial}: estimate {mean} vs exact {exact} ({:.2}%)",
            rel * 100.0
        );
        worst = worst.max(rel);
    }
    Ok(format!(
        "10000 pairs non-negative, Bernoulli mean within {:.2}% of exact",
        worst * 100.0
    ))
}

// ------------------------------------------------------------ corpus

#[derive(Deserialize)]
struct Labelled {
    db_id: String,
    query: String,
    tables: Vec<String>,
    columns: Vec<String>,
}

fn sql_corpus() -> Outcome {
    let schemas =
        load_spider_schemas(&fixtures().join("toy/tables.json")).map_err(|e| e.to_string())?;
    let text =
        std::fs::read_to_string(fixtures().join("sql_corpus.json")).map_err(|e| e.to_string())?;
    let corpus: Vec<Labelled> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    ensure!(
        corpus.len() >= 50,
        "corpus has only {} queries",
        corpus.len()
    );
    let mut agree = 0;
    for (i, case) in corpus.iter().enumerate() {
        let expected =
            SchemaLinkSet::from_raw(&case.tables, &case.columns).map_err(|e| e.to_string())?;
        match build_ground_truth(&case.query, &schemas[&case.db_id]) {
            Ok(got) if got == expected => agree += 1,
            Ok(got) => return Err(format!("#{i} {:?}: want {expected}, got {got}", case.query)),
            Err(e) => return Err(format!("#{i} {:?}: {e}", case.query)),
        }
    }
    Ok(format!("{agree}/{} queries agree", corpus.len()))
}

// ----------------------------------------------------------- metrics

fn ordered(r: &MetricReport) -> bool {
    let ok = |m: &schemalink::metrics::TaskMetrics| {
        m.em <= m.filtered_acc + 1e-9 && m.filtered_acc <= m.recall + 1e-9
    };
    ok(&r.tables) && ok(&r.columns)
}

fn metric_ordering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tables: Vec<String> = (0..6).map(|i| format!("t{i}")).collect();
    let columns: Vec<String> = (0..10).map(|i| format!("t{}.c{i}", i % 6)).collect();
    for list in 0..1000 {
        let n = rng.random_range(1..30);
        let pairs: Vec<(SchemaLinkSet, SchemaLinkSet)> = (0..n)
            .map(|_| {
                let mut side = || SchemaLinkSet {
                    tables: random_subset(&mut rng, &tables, 0.4),
                    columns: random_subset(&mut rng, &columns, 0.3),
                };
                (side(), side())
            })
            .collect();
        let r = aggregate_report(&pairs).map_err(|e| e.to_string())?;
        ensure!(ordered(&r), "generated list {list} breaks ordering: {r:?}");
    }

    let run = toy_run()?;
    ensure!(
        ordered(&run.outcome.final_eval),
        "toy final eval breaks ordering"
    );
    let mut evaluated = 0;
    for rec in &run.outcome.log {
        if let (Some(a), Some(b), Some(c), Some(d), Some(e), Some(f)) = (
            rec.table_em,
            rec.table_filtered,
            rec.table_rec,
            rec.col_em,
            rec.col_filtered,
            rec.col_rec,
        ) {
            ensure!(
                a <= b && b <= c && d <= e && e <= f,
                "iteration {} breaks ordering",
                rec.iteration
            );
            evaluated += 1;
        }
    }

    let reference = [(73.21, 89.94, 94.40), (38.24, 68.82, 81.85)];
    for (em, fa, rec) in reference {
        ensure!(
            em <= fa && fa <= rec,
            "reference triple {em} {fa} {rec} out of order"
        );
    }
    Ok(format!(
        "1000 generated lists, {evaluated} toy evaluations, 2 reference triples"
    ))
}

// ---------------------------------------------------------- toy run

struct ToyRun {
    questions: Vec<SimQuestion>,
    cfg: SimConfig,
    outcome: TrainOutcome,
    elapsed: Duration,
}

fn toy_config() -> SimConfig {
    SimConfig {
        grpo: GrpoConfig {
            group_size: 10,
            iterations: 300,
            seed: 7,
            ..GrpoConfig::default()
        },
        batch_size: 10,
        temperature: 1.0,
        ..SimConfig::default()
    }
}

fn toy_questions() -> Result<(Vec<SimQuestion>, BTreeMap<String, DbSchema>), String> {
    let dir = fixtures().join("toy");
    let schemas = load_spider_schemas(&dir.join("tables.json")).map_err(|e| e.to_string())?;
    let loaded = load_examples(&dir.join("train.json"), &schemas).map_err(|e| e.to_string())?;
    ensure!(
        loaded.rejections.is_empty(),
        "toy fixtures rejected: {:?}",
        loaded.rejections
    );
    let questions = sim_questions(&loaded.examples, &schemas).map_err(|e| e.to_string())?;
    Ok((questions, schemas))
}

static TOY_RUN: OnceLock<Result<ToyRun, String>> = OnceLock::new();

fn toy_run() -> Result<&'static ToyRun, String> {
    TOY_RUN
        .get_or_init(|| {
            let (questions, _) = toy_questions()?;
            let cfg = toy_config();
            let start = Instant::now();
            let outcome = train_loop(&questions, &cfg).map_err(|e| e.to_string())?;
            Ok(ToyRun {
                questions,
                cfg,
                outcome,
                elapsed: start.elapsed(),
            })
        })
        .as_ref()
        .map_err(Clone::clone)
}

/// Best total reward by brute force over every subset of tables and of
/// columns, counting hits and misses with bit masks.
fn brute_force_max(q: &SimQuestion, cfg: &RewardConfig) -> f64 {
    let best = |names: Vec<String>, truth: &BTreeSet<String>, rmax: f64, pmax: f64| {
        let truth_mask: u64 = names
            .iter()
            .enumerate()
            .filter(|(_, n)| truth.contains(*n))
            .map(|(i, _)| 1u64 << i)
            .sum();
        let t = truth_mask.count_ones() as f64;
        (0u64..1 << names.len())
            .map(|mask| {
                let hits = (mask & truth_mask).count_ones() as f64;
                let wrong = (mask & !truth_mask).count_ones() as f64;
                let gain = if t == 0.0 { 0.0 } else { rmax * hits / t };
                let loss = if mask == 0 {
                    0.0
                } else {
                    pmax * wrong / (hits + wrong)
                };
                gain - loss
            })
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let tables = q.schema.tables().iter().map(|t| t.name.clone()).collect();
    let st = best(tables, &q.example.truth.tables, cfg.r_tmax, cfg.p_tmax);
    let sc = best(
        q.schema.qualified_columns(),
        &q.example.truth.columns,
        cfg.r_cmax,
        cfg.p_cmax,
    );
    1.0 + 2.0 + 1.0 + st + sc
}

fn toy_training() -> Outcome {
    let run = toy_run()?;
    let (q, cfg, out) = (&run.questions, &run.cfg, &run.outcome);
    let dbs: BTreeSet<&str> = q.iter().map(|x| x.example.db_id.as_str()).collect();
    ensure!(
        dbs.len() == 3 && q.len() == 20,
        "{} dbs, {} questions",
        dbs.len(),
        q.len()
    );
    ensure!(
        run.elapsed < Duration::from_secs(60),
        "training took {:?}",
        run.elapsed
    );

    let mut max_sum = 0.0;
    for x in q {
        let enumerated = max_total_reward(
            &x.example.truth,
            x.schema.tables().len(),
            x.schema.column_count(),
            &cfg.reward,
        );
        let brute = brute_force_max(x, &cfg.reward);
        ensure!(
            close(enumerated, brute, 1e-12),
            "question {}: max {enumerated} vs brute force {brute}",
            x.example.id
        );
        max_sum += enumerated;
    }
    let mean_max = max_sum / q.len() as f64;
    ensure!(
        close(mean_max, out.mean_max_reward, 1e-12),
        "reported max differs"
    );
    let ratio = out.final_mean_reward / mean_max;
    ensure!(
        ratio >= 0.8,
        "final reward {:.3} is {:.1}% of max {mean_max:.3}",
        out.final_mean_reward,
        ratio * 100.0
    );

    let table_fa = out.final_eval.tables.filtered_acc / 100.0;
    let col_fa = out.final_eval.columns.filtered_acc / 100.0;
    ensure!(table_fa >= 0.9, "table FilteredAcc {table_fa}");
    ensure!(col_fa >= 0.7, "column FilteredAcc {col_fa}");

    let first = &out.log[0];
    let last = out.log.last().unwrap();
    ensure!(
        last.iteration == 300 && out.log.len() == 301,
        "log ends at {}",
        last.iteration
    );
    ensure!(
        last.mean_reward >= first.mean_reward,
        "reward fell from {} to {}",
        first.mean_reward,
        last.mean_reward
    );
    Ok(format!(
        "{:.2?}; reward {:.2} -> {:.2}, final {:.3} = {:.1}% of max {:.3}; table FA {table_fa:.2}, column FA {col_fa:.2}; mean length {:.0} -> {:.0}",
        run.elapsed,
        first.mean_reward,
        last.mean_reward,
        out.final_mean_reward,
        ratio * 100.0,
        mean_max,
        first.mean_len,
        last.mean_len
    ))
}

// ------------------------------------------------------- determinism

fn determinism() -> Outcome {
    let run = toy_run()?;
    let again = train_loop(&run.questions, &run.cfg).map_err(|e| e.to_string())?;
    let a = render_run_log(&run.outcome.log);
    let b = render_run_log(&again.log);
    ensure!(
        a.as_bytes() == b.as_bytes(),
        "same seed produced different logs"
    );
    ensure!(
        run.outcome.policy == again.policy,
        "same seed produced different policies"
    );

    let mut other = run.cfg.clone();
    other.grpo.seed += 1;
    other.grpo.iterations = 5;
    let c = train_loop(&run.questions, &other).map_err(|e| e.to_string())?;
    ensure!(
        render_run_log(&c.log) != render_run_log(&run.outcome.log[..6]),
        "seed had no effect"
    );

    let (questions, schemas) = toy_questions()?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dataset = dir.path().join("linked.jsonl");
    let examples: Vec<LinkedExample> = questions.iter().map(|q| q.example.clone()).collect();
    std::fs::write(&dataset, to_jsonl(&examples)).map_err(|e| e.to_string())?;
    let reloaded: Vec<LinkedExample> = read_jsonl(&dataset).map_err(|e| e.to_string())?;
    ensure!(
        reloaded == examples,
        "dataset did not survive a file round trip"
    );
    let pairs: Vec<(SchemaLinkSet, SchemaLinkSet)> = reloaded
        .iter()
        .map(|ex| {
            let raw = render_response("echo", &ex.truth);
            let parsed = ParsedResponse::parse(&raw, &schemas[&ex.db_id]);
            (parsed.predicted.unwrap_or_default(), ex.truth.clone())
        })
        .collect();
    let report = aggregate_report(&pairs).map_err(|e| e.to_string())?;
    ensure!(
        report.tables.em == 100.0 && report.columns.em == 100.0,
        "echo scored {:?}",
        report
    );
    Ok(format!(
        "{} byte-identical log bytes; echo EM {:.0}/{:.0}",
        a.len(),
        report.tables.em,
        report.columns.em
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("reward bounds, maximality and monotonicity", reward_bounds),
        ("format, marker and length boundary table", boundary_cases),
        ("group advantage normalization", advantage_normalization),
        ("analytic gradient vs finite differences", gradient_oracle),
        ("KL estimator", kl_estimator),
        ("SQL extraction corpus", sql_corpus),
        ("metric ordering", metric_ordering),
        ("end-to-end toy training", toy_training),
        ("determinism and extract/score echo", determinism),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        match result {
            Ok(detail) => println!("PASS criterion {}: {name} ({detail})", i + 1),
            Err(reason) => {
                failures += 1;
                println!("FAIL criterion {}: {name} ({reason})", i + 1);
            }
        }
    }
    println!("{} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
