//! A differentiable stand-in for the language model.
//!
//! [`ToyPolicy`] selects each table and column of a question's database with
//! an independent Bernoulli draw, writes filler reasoning of a learnable
//! length, and renders the result in the regular response format. Rewards,
//! advantages and updates then go through exactly the same code a real policy
//! would use, which makes whole training runs cheap and reproducible.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::{
    policy_update, Decision, DifferentiablePolicy, GrpoConfig, GrpoError, Trajectory,
    TrajectoryGroup,
};
use crate::metrics::{aggregate_report, MetricReport};
use crate::response::{render_response, ParsedResponse, THINK_CLOSE};
use crate::reward::{max_total_reward, total_reward, RewardBreakdown, RewardConfig, RewardError};
use crate::schema::{DbSchema, LinkedExample, SchemaLinkSet};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Grpo(GrpoError),
    /// The update at `iteration` failed; `checkpoint` is the last good policy.
    #[error("update failed at iteration {iteration}: {source}")]
    UpdateFailed {
        iteration: usize,
        source: GrpoError,
        checkpoint: Box<ToyPolicy>,
        log: Vec<LogRecord>,
    },
}

impl From<GrpoError> for SimError {
    fn from(e: GrpoError) -> Self {
        SimError::Grpo(e)
    }
}

/// A training question together with its database.
#[derive(Debug, Clone, PartialEq)]
pub struct SimQuestion {
    pub example: LinkedExample,
    pub schema: DbSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub grpo: GrpoConfig,
    pub reward: RewardConfig,
    pub batch_size: usize,
    pub eval_every: usize,
    pub temperature: f64,
    pub init_logit: f64,
    pub init_think_len: f64,
    /// Log-normal spread of per-sample reasoning length around the learned
    /// base length.
    pub length_jitter: f64,
    /// Multiplicative step for the reasoning-length update.
    pub length_step: f64,
    pub malform_prob: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            grpo: GrpoConfig::default(),
            reward: RewardConfig::default(),
            batch_size: 10,
            eval_every: 10,
            temperature: 1.0,
            init_logit: 0.0,
            init_think_len: 24.0,
            length_jitter: 0.5,
            length_step: 0.1,
            malform_prob: 0.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.grpo.validate()?;
        self.reward.validate()?;
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if !self.init_logit.is_finite() {
            return bad("init_logit must be finite".into());
        }
        if !(self.init_think_len >= 1.0 && self.init_think_len.is_finite()) {
            return bad(format!(
                "init_think_len must be at least 1, got {}",
                self.init_think_len
            ));
        }
        if !(self.length_jitter >= 0.0 && self.length_jitter.is_finite()) {
            return bad("length_jitter must be non-negative".into());
        }
        if !(self.length_step >= 0.0 && self.length_step.is_finite()) {
            return bad("length_step must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.malform_prob) {
            return bad(format!(
                "malform_prob must lie in [0, 1], got {}",
                self.malform_prob
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Layout {
    offset: usize,
    n_tables: usize,
    n_columns: usize,
}

/// Per-question selection logits for every table and column of the
/// question's database, plus a per-question reasoning length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    logits: Vec<f64>,
    layout: Vec<Layout>,
    think_len: Vec<f64>,
    pub temperature: f64,
    pub malform_prob: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl ToyPolicy {
    pub fn new(questions: &[SimQuestion], cfg: &SimConfig) -> Self {
        let mut layout = Vec::with_capacity(questions.len());
        let mut offset = 0;
        for q in questions {
            let n_tables = q.schema.tables().len();
            let n_columns = q.schema.column_count();
            layout.push(Layout {
                offset,
                n_tables,
                n_columns,
            });
            offset += n_tables + n_columns;
        }
        ToyPolicy {
            logits: vec![cfg.init_logit; offset],
            layout,
            think_len: vec![cfg.init_think_len; questions.len()],
            temperature: cfg.temperature,
            malform_prob: cfg.malform_prob,
        }
    }

    pub fn num_questions(&self) -> usize {
        self.layout.len()
    }

    pub fn think_len(&self, question: usize) -> f64 {
        self.think_len[question]
    }

    pub fn set_think_len(&mut self, question: usize, len: f64) {
        self.think_len[question] = len.clamp(1.0, 10_000.0);
    }

    /// Parameter indices for a question's tables, then its columns.
    pub fn question_params(&self, question: usize) -> std::ops::Range<usize> {
        let l = self.layout[question];
        l.offset..l.offset + l.n_tables + l.n_columns
    }

    pub fn inclusion_prob(&self, param: usize) -> f64 {
        sigmoid(self.logits[param] / self.temperature)
    }

    /// Include an element iff its probability exceeds 0.5.
    pub fn greedy_prediction(&self, question: usize, schema: &DbSchema) -> SchemaLinkSet {
        let decisions: Vec<Decision> = self
            .question_params(question)
            .map(|param| Decision {
                param,
                taken: self.inclusion_prob(param) > 0.5,
            })
            .collect();
        self.decode(question, schema, &decisions)
    }

    /// Maps sampled decisions back to table and column names.
    pub fn decode(
        &self,
        question: usize,
        schema: &DbSchema,
        decisions: &[Decision],
    ) -> SchemaLinkSet {
        let l = self.layout[question];
        let columns = schema.qualified_columns();
        let mut link = SchemaLinkSet::default();
        for d in decisions.iter().filter(|d| d.taken) {
            let local = d.param - l.offset;
            if local < l.n_tables {
                link.tables.insert(schema.tables()[local].name.clone());
            } else {
                link.columns.insert(columns[local - l.n_tables].clone());
            }
        }
        link
    }
}

impl DifferentiablePolicy for ToyPolicy {
    fn params(&self) -> &[f64] {
        &self.logits
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn decision_logprob(&self, d: &Decision) -> f64 {
        let z = self.logits[d.param] / self.temperature;
        if d.taken {
            log_sigmoid(z)
        } else {
            log_sigmoid(-z)
        }
    }

    fn accumulate_logprob_grad(&self, d: &Decision, scale: f64, grad: &mut [f64]) {
        let p = self.inclusion_prob(d.param);
        let x = if d.taken { 1.0 } else { 0.0 };
        grad[d.param] += scale * (x - p) / self.temperature;
    }
}

/// Sum of per-decision log-probabilities of a trajectory under `policy`.
pub fn trajectory_logprob<P: DifferentiablePolicy>(policy: &P, trajectory: &Trajectory) -> f64 {
    policy.trajectory_logprob(&trajectory.decisions)
}

/// A scored group plus the surface forms that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledGroup {
    pub question: usize,
    pub group: TrajectoryGroup,
    pub responses: Vec<String>,
    pub think_lens: Vec<usize>,
    pub token_lens: Vec<usize>,
    pub predictions: Vec<SchemaLinkSet>,
    pub breakdowns: Vec<RewardBreakdown>,
}

fn filler(tokens: usize) -> String {
    vec!["reason"; tokens].join(" ")
}

/// Draws `group_size` responses for one question. Rewards and advantages are
/// left at zero; see [`score_group`].
pub fn sample_group<R: Rng>(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    question: usize,
    sq: &SimQuestion,
    group_size: usize,
    length_jitter: f64,
    rng: &mut R,
) -> SampledGroup {
    let jitter = LogNormal::new(0.0, length_jitter).expect("validated jitter");
    let mut trajectories = Vec::with_capacity(group_size);
    let mut responses = Vec::with_capacity(group_size);
    let mut think_lens = Vec::with_capacity(group_size);
    let mut predictions = Vec::with_capacity(group_size);
    for _ in 0..group_size {
        let decisions: Vec<Decision> = policy
            .question_params(question)
            .map(|param| Decision {
                param,
                taken: rng.random::<f64>() < policy.inclusion_prob(param),
            })
            .collect();
        let link = policy.decode(question, &sq.schema, &decisions);
        let scale: f64 = if length_jitter > 0.0 {
            jitter.sample(rng)
        } else {
            1.0
        };
        let think_len = (policy.think_len(question) * scale).round().max(1.0) as usize;
        let mut response = render_response(&filler(think_len), &link);
        if policy.malform_prob > 0.0 && rng.random::<f64>() < policy.malform_prob {
            response = response.replacen(THINK_CLOSE, "", 1);
        }
        trajectories.push(Trajectory::sampled(decisions, policy, reference));
        responses.push(response);
        think_lens.push(think_len);
        predictions.push(link);
    }
    SampledGroup {
        question,
        group: TrajectoryGroup {
            question_id: sq.example.id.clone(),
            trajectories,
        },
        responses,
        think_lens,
        token_lens: Vec::new(),
        predictions,
        breakdowns: Vec::new(),
    }
}

/// Parses and scores every response, then assigns group advantages.
pub fn score_group(
    sampled: &mut SampledGroup,
    sq: &SimQuestion,
    reward: &RewardConfig,
    std_floor: f64,
) -> Result<(), GrpoError> {
    sampled.breakdowns.clear();
    sampled.token_lens.clear();
    for (traj, raw) in sampled
        .group
        .trajectories
        .iter_mut()
        .zip(&sampled.responses)
    {
        let parsed = ParsedResponse::parse(raw, &sq.schema);
        let b = total_reward(&parsed, &sq.example.truth, reward);
        traj.reward = b.total;
        sampled.token_lens.push(parsed.token_len);
        sampled.breakdowns.push(b);
    }
    sampled.group.assign_advantages(std_floor)
}

/// Moves the question's reasoning length one multiplicative step in the
/// direction whose samples earned more length reward. Returns the sign of
/// the move.
pub fn update_think_len(policy: &mut ToyPolicy, sampled: &SampledGroup, step: f64) -> i8 {
    let base = policy.think_len(sampled.question);
    let n = sampled.breakdowns.len();
    if n == 0 || step == 0.0 {
        return 0;
    }
    let mean_rl = sampled.breakdowns.iter().map(|b| b.r_l).sum::<f64>() / n as f64;
    let slope: f64 = sampled
        .breakdowns
        .iter()
        .zip(&sampled.think_lens)
        .map(|(b, &len)| (b.r_l - mean_rl) * (len as f64 / base).ln())
        .sum();
    let sign = if slope > 1e-12 {
        1
    } else if slope < -1e-12 {
        -1
    } else {
        0
    };
    match sign {
        1 => policy.set_think_len(sampled.question, base * (1.0 + step)),
        -1 => policy.set_think_len(sampled.question, base / (1.0 + step)),
        _ => {}
    }
    sign
}

/// Greedy-decoded metrics over a set of questions.
pub fn evaluate_policy(policy: &ToyPolicy, questions: &[SimQuestion]) -> MetricReport {
    let pairs: Vec<(SchemaLinkSet, SchemaLinkSet)> = questions
        .iter()
        .enumerate()
        .map(|(i, q)| {
            (
                policy.greedy_prediction(i, &q.schema),
                q.example.truth.clone(),
            )
        })
        .collect();
    aggregate_report(&pairs).unwrap_or_default()
}

/// One line of the run log. Metric fields are percentages and are only
/// present on evaluation iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_len: f64,
    pub table_em: Option<f64>,
    pub table_filtered: Option<f64>,
    pub table_rec: Option<f64>,
    pub col_em: Option<f64>,
    pub col_filtered: Option<f64>,
    pub col_rec: Option<f64>,
}

impl LogRecord {
    fn new(iteration: usize, groups: &[SampledGroup], eval: Option<&MetricReport>) -> Self {
        let (mut reward, mut len, mut n) = (0.0, 0.0, 0usize);
        for g in groups {
            for (b, l) in g.breakdowns.iter().zip(&g.token_lens) {
                reward += b.total;
                len += *l as f64;
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        LogRecord {
            iteration,
            mean_reward: reward / n,
            mean_len: len / n,
            table_em: eval.map(|r| r.tables.em),
            table_filtered: eval.map(|r| r.tables.filtered_acc),
            table_rec: eval.map(|r| r.tables.recall),
            col_em: eval.map(|r| r.columns.em),
            col_filtered: eval.map(|r| r.columns.filtered_acc),
            col_rec: eval.map(|r| r.columns.recall),
        }
    }
}

/// Serializes a run log as one JSON object per line.
pub fn render_run_log(log: &[LogRecord]) -> String {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r).expect("plain record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_run_log(text: &str) -> Result<Vec<LogRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub policy: ToyPolicy,
    pub final_eval: MetricReport,
    /// Mean sampled total reward over every question after training.
    pub final_mean_reward: f64,
    /// Mean over questions of the best achievable total reward.
    pub mean_max_reward: f64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for one (iteration, question) pair so groups can be
/// sampled in any order.
fn group_rng(seed: u64, iteration: usize, question: usize) -> ChaCha8Rng {
    let s = splitmix64(seed ^ splitmix64(iteration as u64 ^ splitmix64(question as u64 + 1)));
    ChaCha8Rng::seed_from_u64(s)
}

fn sample_batch(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    questions: &[SimQuestion],
    batch: &[usize],
    cfg: &SimConfig,
    iteration: usize,
) -> Result<Vec<SampledGroup>, SimError> {
    batch
        .iter()
        .map(|&q| {
            let mut rng = group_rng(cfg.grpo.seed, iteration, q);
            let mut g = sample_group(
                policy,
                reference,
                q,
                &questions[q],
                cfg.grpo.group_size,
                cfg.length_jitter,
                &mut rng,
            );
            score_group(&mut g, &questions[q], &cfg.reward, cfg.grpo.std_floor)?;
            Ok(g)
        })
        .collect()
}

/// Runs GRPO on the toy policy.
///
/// Record 0 holds samples and an evaluation of the initial policy. Each
/// later iteration draws a batch, samples and scores a group per question
/// under the current policy, nudges reasoning lengths and takes one
/// gradient step. Evaluation runs every `eval_every` iterations and after
/// the last one.
pub fn train_loop(questions: &[SimQuestion], cfg: &SimConfig) -> Result<TrainOutcome, SimError> {
    cfg.validate()?;
    if questions.is_empty() {
        return Err(SimError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.grpo.seed);
    let batch_size = cfg.batch_size.min(questions.len());
    let mut policy = ToyPolicy::new(questions, cfg);
    let reference = policy.clone();
    let mut log = Vec::with_capacity(cfg.grpo.iterations + 1);

    let batch = sample_indices(&mut rng, questions.len(), batch_size).into_vec();
    let groups = sample_batch(&policy, &reference, questions, &batch, cfg, 0)?;
    let eval = evaluate_policy(&policy, questions);
    log.push(LogRecord::new(0, &groups, Some(&eval)));

    for iteration in 1..=cfg.grpo.iterations {
        let batch = sample_indices(&mut rng, questions.len(), batch_size).into_vec();
        let groups = sample_batch(&policy, &reference, questions, &batch, cfg, iteration)?;
        for g in &groups {
            update_think_len(&mut policy, g, cfg.length_step);
        }
        let plain: Vec<TrajectoryGroup> = groups.iter().map(|g| g.group.clone()).collect();
        if let Err(source) = policy_update(&mut policy, &plain, &cfg.grpo) {
            return Err(SimError::UpdateFailed {
                iteration,
                source,
                checkpoint: Box::new(policy),
                log,
            });
        }
        let due = iteration % cfg.eval_every == 0 || iteration == cfg.grpo.iterations;
        let eval = due.then(|| evaluate_policy(&policy, questions));
        log.push(LogRecord::new(iteration, &groups, eval.as_ref()));
    }

    let all: Vec<usize> = (0..questions.len()).collect();
    let finals = sample_batch(
        &policy,
        &reference,
        questions,
        &all,
        cfg,
        cfg.grpo.iterations + 1,
    )?;
    let final_mean_reward = LogRecord::new(0, &finals, None).mean_reward;
    let mean_max_reward = questions
        .iter()
        .map(|q| {
            max_total_reward(
                &q.example.truth,
                q.schema.tables().len(),
                q.schema.column_count(),
                &cfg.reward,
            )
        })
        .sum::<f64>()
        / questions.len() as f64;
    let final_eval = evaluate_policy(&policy, questions);
    Ok(TrainOutcome {
        log,
        policy,
        final_eval,
        final_mean_reward,
        mean_max_reward,
    })
}
