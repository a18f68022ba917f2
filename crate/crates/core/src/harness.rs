//! The unlearning loop, probe evaluation, gradient-geometry diagnostics and
//! hyperparameter sweeps.
//!
//! Each step of [`unlearn`] samples one forget batch and one retain batch,
//! computes `g_f` (forget objective) and `g_r` (cross-entropy on the retain
//! batch), synthesises `g_final` with the configured combiner and applies
//! `theta <- theta - eta * g_final`. The structural guarantees of the
//! combiner are re-checked on every step and a violation aborts the run.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combiners::{combine, verify_outcome, CombinerConfig, CombinerKind, ZeroProductPolicy};
use crate::data::{Corpus, Dataset, ProbeSet};
use crate::error::{Error, Result};
use crate::gradcore::{cosine_slice, flatten, ModuleGradients};
use crate::model::{NextTokenModel, TinyLM, TokenSequence};
use crate::objectives::{compute_loss, LossContext, LossKind, ObjectiveParams};

pub const DEFAULT_EVAL_EVERY: usize = 10;
/// Slack for the live `cos(g_final, g_r) >= 0` check.
pub const COS_RETAIN_SLACK: f64 = 1e-12;

pub const STEP_LOG_HEADER: [&str; 9] = [
    "step",
    "forget_loss",
    "retain_loss",
    "cos_fr",
    "cos_cf",
    "cos_cr",
    "conflict_fraction",
    "forget_acc",
    "retain_acc",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnConfig {
    pub forget_objective: LossKind,
    pub combiner: CombinerKind,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default)]
    pub gamma_margin: f64,
    #[serde(default)]
    pub zero_product_policy: ZeroProductPolicy,
    pub eta: f64,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub forget_batch_size: usize,
    #[serde(default = "default_batch")]
    pub retain_batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn one() -> f64 {
    1.0
}

fn default_batch() -> usize {
    8
}

fn default_eval_every() -> usize {
    DEFAULT_EVAL_EVERY
}

impl UnlearnConfig {
    pub fn new(forget_objective: LossKind, combiner: CombinerKind, eta: f64, steps: usize) -> Self {
        UnlearnConfig {
            forget_objective,
            combiner,
            alpha: 1.0,
            gamma: 1.0,
            beta: 1.0,
            gamma_margin: 0.0,
            zero_product_policy: ZeroProductPolicy::PaperLiteral,
            eta,
            steps,
            forget_batch_size: default_batch(),
            retain_batch_size: default_batch(),
            seed: 0,
            eval_every: DEFAULT_EVAL_EVERY,
        }
    }

    pub fn combiner_config(&self) -> CombinerConfig {
        CombinerConfig {
            alpha: self.alpha,
            gamma: self.gamma,
            zero_product_policy: self.zero_product_policy,
            ..Default::default()
        }
    }

    pub fn objective_params(&self) -> ObjectiveParams {
        ObjectiveParams {
            beta: self.beta,
            gamma_margin: self.gamma_margin,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.forget_objective == LossKind::Gd {
            return Err(Error::input(
                "forget_objective must be one of {ga, npo, simnpo}",
            ));
        }
        if self.steps == 0 {
            return Err(Error::input("steps must be at least 1"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::input(format!("eta must be positive, got {}", self.eta)));
        }
        if self.forget_batch_size == 0 || self.retain_batch_size == 0 {
            return Err(Error::input("batch sizes must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::input("eval_every must be at least 1"));
        }
        self.combiner_config().validate()?;
        self.objective_params().validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    /// Cross-entropy (mean `-log p`) of the forget batch, before the update.
    pub forget_loss: f64,
    /// Cross-entropy of the retain batch, before the update.
    pub retain_loss: f64,
    pub cos_fr: f64,
    pub cos_cf: f64,
    pub cos_cr: f64,
    pub conflict_fraction: f64,
    /// Probe accuracies after the update; present on evaluation steps only.
    pub forget_acc: Option<f64>,
    pub retain_acc: Option<f64>,
}

/// Seeded permutation per epoch, cycled forever.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::input("cannot sample from an empty corpus"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(BatchSampler { order, pos: 0, rng })
    }

    pub fn next_indices(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }

    pub fn next_batch(&mut self, corpus: &Corpus, size: usize) -> Vec<TokenSequence> {
        self.next_indices(size)
            .into_iter()
            .map(|i| corpus.sequences[i].clone())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mean_log_likelihood: f64,
}

/// Top-1 accuracy at the answer position; ties go to the lowest token id.
pub fn evaluate<M: NextTokenModel + ?Sized>(model: &M, probes: &ProbeSet) -> Result<EvalResult> {
    if probes.is_empty() {
        return Err(Error::input("empty probe set"));
    }
    let mut correct = 0usize;
    let mut ll = 0.0;
    for p in &probes.probes {
        if p.prefix.len() != model.context_len() {
            return Err(Error::input(format!(
                "probe prefix has {} tokens, model context is {}",
                p.prefix.len(),
                model.context_len()
            )));
        }
        if p.answer as usize >= model.vocab_size() {
            return Err(Error::input(format!("probe answer {} out of vocabulary", p.answer)));
        }
        let lp = model.next_log_probs(&p.prefix)?;
        let mut best = 0;
        for (k, v) in lp.iter().enumerate() {
            if *v > lp[best] {
                best = k;
            }
        }
        if best == p.answer as usize {
            correct += 1;
        }
        ll += lp[p.answer as usize];
    }
    Ok(EvalResult {
        accuracy: correct as f64 / probes.len() as f64,
        mean_log_likelihood: ll / probes.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientGeometry {
    pub cos_forget_retain: f64,
    pub cos_comb_forget: f64,
    pub cos_comb_retain: f64,
}

/// The three pairwise cosines on flattened vectors.
pub fn gradient_geometry(
    g_f: &ModuleGradients,
    g_r: &ModuleGradients,
    g_final: &ModuleGradients,
) -> Result<GradientGeometry> {
    g_f.check_aligned(g_r)?;
    g_f.check_aligned(g_final)?;
    let (f, r, c) = (flatten(g_f)?, flatten(g_r)?, flatten(g_final)?);
    Ok(GradientGeometry {
        cos_forget_retain: cosine_slice(f.as_slice(), r.as_slice()),
        cos_comb_forget: cosine_slice(c.as_slice(), f.as_slice()),
        cos_comb_retain: cosine_slice(c.as_slice(), r.as_slice()),
    })
}

#[derive(Debug, Clone)]
pub struct UnlearnRun {
    pub model: TinyLM,
    pub logs: Vec<StepLog>,
}

/// Runs the unlearning loop from `model`.
pub fn unlearn(model: &TinyLM, data: &Dataset, cfg: &UnlearnConfig) -> Result<UnlearnRun> {
    cfg.validate()?;
    if data.forget.is_empty() || data.retain.is_empty() {
        return Err(Error::input("forget and retain corpora must be non-empty"));
    }
    let v = model.dims().vocab_size as u32;
    for corpus in [&data.forget, &data.retain] {
        if corpus.max_token().is_some_and(|t| t >= v) {
            return Err(Error::input(format!(
                "corpus uses token ids outside the model vocabulary of {v}"
            )));
        }
    }
    let evaluate_probes = !data.forget_probes.is_empty() && !data.retain_probes.is_empty();

    let reference = model.snapshot();
    let forget_ctx = LossContext::new(cfg.forget_objective)
        .with_params(cfg.objective_params())
        .with_reference(&reference);
    let retain_ctx = LossContext::new(LossKind::Gd);
    let combiner_cfg = cfg.combiner_config();

    // Same seed for both streams: with identical corpora they yield identical batches.
    let mut forget_sampler = BatchSampler::new(data.forget.len(), cfg.seed)?;
    let mut retain_sampler = BatchSampler::new(data.retain.len(), cfg.seed)?;

    let mut theta = model.clone();
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let b_f = forget_sampler.next_batch(&data.forget, cfg.forget_batch_size);
        let b_r = retain_sampler.next_batch(&data.retain, cfg.retain_batch_size);
        let forget = compute_loss(&forget_ctx, &theta, &b_f)?;
        let retain = compute_loss(&retain_ctx, &theta, &b_r)?;

        let outcome = combine(cfg.combiner, &retain.grads, &forget.grads, &combiner_cfg)?;
        verify_outcome(cfg.combiner, &retain.grads, &forget.grads, &outcome)
            .map_err(|e| Error::Invariant(format!("step {step}: {e}")))?;
        let geometry = gradient_geometry(&forget.grads, &retain.grads, &outcome.g_final)?;
        if cfg.combiner != CombinerKind::Naive && geometry.cos_comb_retain < -COS_RETAIN_SLACK {
            return Err(Error::Invariant(format!(
                "step {step}: cos(g_final, g_r) = {} < 0 for {}",
                geometry.cos_comb_retain, cfg.combiner
            )));
        }

        theta.apply_update(&outcome.g_final, cfg.eta)?;

        let (forget_acc, retain_acc) =
            if evaluate_probes && (step % cfg.eval_every == 0 || step == cfg.steps) {
                (
                    Some(evaluate(&theta, &data.forget_probes)?.accuracy),
                    Some(evaluate(&theta, &data.retain_probes)?.accuracy),
                )
            } else {
                (None, None)
            };
        logs.push(StepLog {
            step,
            forget_loss: -forget.mean_log_prob,
            retain_loss: -retain.mean_log_prob,
            cos_fr: geometry.cos_forget_retain,
            cos_cf: geometry.cos_comb_forget,
            cos_cr: geometry.cos_comb_retain,
            conflict_fraction: outcome.conflict_fraction,
            forget_acc,
            retain_acc,
        });
    }
    Ok(UnlearnRun { model: theta, logs })
}

/// Plain gradient descent on the retain objective only (the `gamma = 0` reference path).
pub fn retain_descent(
    model: &TinyLM,
    retain: &Corpus,
    eta: f64,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<TinyLM> {
    let mut sampler = BatchSampler::new(retain.len(), seed)?;
    let ctx = LossContext::new(LossKind::Gd);
    let mut theta = model.clone();
    for _ in 0..steps {
        let batch = sampler.next_batch(retain, batch_size);
        let report = compute_loss(&ctx, &theta, &batch)?;
        theta.apply_update(&report.grads, eta)?;
    }
    Ok(theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub eta: f64,
    /// `None` trains on the full combined corpus every step.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainReport {
    pub final_loss: f64,
    pub forget_acc: f64,
    pub retain_acc: f64,
}

/// Gradient descent on the cross-entropy of `forget ∪ retain`, producing the target model.
pub fn pretrain(model: &TinyLM, data: &Dataset, cfg: &PretrainConfig) -> Result<(TinyLM, PretrainReport)> {
    if cfg.steps == 0 {
        return Err(Error::input("steps must be at least 1"));
    }
    if !(cfg.eta > 0.0 && cfg.eta.is_finite()) {
        return Err(Error::input(format!("eta must be positive, got {}", cfg.eta)));
    }
    let combined = Corpus {
        sequences: data
            .forget
            .sequences
            .iter()
            .chain(&data.retain.sequences)
            .cloned()
            .collect(),
    };
    if combined.is_empty() {
        return Err(Error::input("no training sequences"));
    }
    let ctx = LossContext::new(LossKind::Gd);
    let mut sampler = BatchSampler::new(combined.len(), cfg.seed)?;
    let mut theta = model.clone();
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.steps {
        let report = match cfg.batch_size {
            None | Some(0) => compute_loss(&ctx, &theta, &combined.sequences)?,
            Some(b) => compute_loss(&ctx, &theta, &sampler.next_batch(&combined, b))?,
        };
        final_loss = report.loss;
        theta.apply_update(&report.grads, cfg.eta)?;
    }
    let forget_acc = evaluate(&theta, &data.forget_probes)?.accuracy;
    let retain_acc = evaluate(&theta, &data.retain_probes)?.accuracy;
    Ok((
        theta,
        PretrainReport {
            final_loss,
            forget_acc,
            retain_acc,
        },
    ))
}

/// Axes of a sweep. An absent axis takes the base config's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub combiner: Option<Vec<CombinerKind>>,
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(default)]
    pub gamma: Option<Vec<f64>>,
    #[serde(default)]
    pub eta: Option<Vec<f64>>,
}

/// Admissible range for swept `alpha` and `gamma` values.
pub const SWEEP_WEIGHT_RANGE: (f64, f64) = (0.1, 1.0);

impl SweepGrid {
    /// Cells in grid order (combiner-major, then alpha, gamma, eta).
    pub fn cells(&self, base: &UnlearnConfig) -> Result<Vec<UnlearnConfig>> {
        if self.combiner.is_none() && self.alpha.is_none() && self.gamma.is_none() && self.eta.is_none() {
            return Err(Error::input("empty grid: no axes given"));
        }
        fn axis<T: Clone>(name: &str, values: &Option<Vec<T>>, base: T) -> Result<Vec<T>> {
            match values {
                None => Ok(vec![base]),
                Some(v) if v.is_empty() => Err(Error::input(format!("empty grid axis {name:?}"))),
                Some(v) => Ok(v.clone()),
            }
        }
        let combiners = axis("combiner", &self.combiner, base.combiner)?;
        let alphas = axis("alpha", &self.alpha, base.alpha)?;
        let gammas = axis("gamma", &self.gamma, base.gamma)?;
        let etas = axis("eta", &self.eta, base.eta)?;
        let (lo, hi) = SWEEP_WEIGHT_RANGE;
        for (name, vals) in [("alpha", &self.alpha), ("gamma", &self.gamma)] {
            if let Some(bad) = vals.iter().flatten().find(|x| !(lo..=hi).contains(*x)) {
                return Err(Error::input(format!(
                    "swept {name} value {bad} outside [{lo}, {hi}]"
                )));
            }
        }
        let mut cells = Vec::new();
        for &combiner in &combiners {
            for &alpha in &alphas {
                for &gamma in &gammas {
                    for &eta in &etas {
                        let cfg = UnlearnConfig {
                            combiner,
                            alpha,
                            gamma,
                            eta,
                            ..base.clone()
                        };
                        cfg.validate()?;
                        cells.push(cfg);
                    }
                }
            }
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// Position of the cell in grid order.
    pub cell: usize,
    pub combiner: CombinerKind,
    pub alpha: f64,
    pub gamma: f64,
    pub eta: f64,
    pub forget_acc: f64,
    pub retain_acc: f64,
    pub forget_loss: f64,
    pub retain_loss: f64,
    pub mean_cos_fr: f64,
    pub mean_cos_cf: f64,
    pub mean_cos_cr: f64,
    pub pareto: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    /// Sorted by forget accuracy (ascending), then retain accuracy (descending), then cell.
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn frontier(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| r.pareto)
    }
}

/// Non-dominated flags for `(forget, retain)` points: lower forget and higher retain are better.
pub fn pareto_flags(points: &[(f64, f64)]) -> Vec<bool> {
    points
        .iter()
        .map(|&(f, r)| {
            !points
                .iter()
                .any(|&(f2, r2)| f2 <= f && r2 >= r && (f2 < f || r2 > r))
        })
        .collect()
}

fn mean_of(logs: &[StepLog], f: impl Fn(&StepLog) -> f64) -> f64 {
    logs.iter().map(f).sum::<f64>() / logs.len() as f64
}

pub fn summarize_run(cell: usize, cfg: &UnlearnConfig, logs: &[StepLog]) -> Result<SweepRow> {
    let last = logs.last().ok_or_else(|| Error::input("run produced no logs"))?;
    let (forget_acc, retain_acc) = match (last.forget_acc, last.retain_acc) {
        (Some(f), Some(r)) => (f, r),
        _ => return Err(Error::input("final step carries no probe accuracies")),
    };
    Ok(SweepRow {
        cell,
        combiner: cfg.combiner,
        alpha: cfg.alpha,
        gamma: cfg.gamma,
        eta: cfg.eta,
        forget_acc,
        retain_acc,
        forget_loss: last.forget_loss,
        retain_loss: last.retain_loss,
        mean_cos_fr: mean_of(logs, |l| l.cos_fr),
        mean_cos_cf: mean_of(logs, |l| l.cos_cf),
        mean_cos_cr: mean_of(logs, |l| l.cos_cr),
        pareto: false,
    })
}

/// Runs every cell (in parallel; each owns its model copy) and marks the Pareto frontier.
pub fn run_sweep(
    model: &TinyLM,
    data: &Dataset,
    base: &UnlearnConfig,
    grid: &SweepGrid,
) -> Result<SweepTable> {
    if data.forget_probes.is_empty() || data.retain_probes.is_empty() {
        return Err(Error::input("a sweep needs non-empty probe sets"));
    }
    let cells = grid.cells(base)?;
    let mut rows = cells
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| {
            let run = unlearn(model, data, cfg)?;
            summarize_run(i, cfg, &run.logs)
        })
        .collect::<Result<Vec<_>>>()?;
    let flags = pareto_flags(&rows.iter().map(|r| (r.forget_acc, r.retain_acc)).collect::<Vec<_>>());
    for (row, flag) in rows.iter_mut().zip(flags) {
        row.pareto = flag;
    }
    rows.sort_by(|a, b| {
        a.forget_acc
            .total_cmp(&b.forget_acc)
            .then(b.retain_acc.total_cmp(&a.retain_acc))
            .then(a.cell.cmp(&b.cell))
    });
    Ok(SweepTable { rows })
}

/// Forgetting-matched selection: for `combiner`, the row whose forget accuracy is
/// closest to `target_forget_acc`; ties go to higher retain accuracy, then grid order.
pub fn select_matched<'a>(
    rows: &'a [SweepRow],
    combiner: CombinerKind,
    target_forget_acc: f64,
) -> Option<&'a SweepRow> {
    rows.iter().filter(|r| r.combiner == combiner).min_by(|a, b| {
        let da = (a.forget_acc - target_forget_acc).abs();
        let db = (b.forget_acc - target_forget_acc).abs();
        da.total_cmp(&db)
            .then(b.retain_acc.total_cmp(&a.retain_acc))
            .then(a.cell.cmp(&b.cell))
    })
}

/// `%.{digits}g`-style formatting: shortest of fixed or exponent notation, trailing
/// zeros removed.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -4 || exp >= digits as i32 {
        let sign = if exp < 0 { "-" } else { "+" };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim(&format!("{x:.decimals$}"))
    }
}

fn fmt9(x: f64) -> String {
    format_sig(x, 9)
}

pub fn write_step_logs(path: impl AsRef<Path>, logs: &[StepLog]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Invariant(format!("csv encoding failed: {e}"));
    w.write_record(STEP_LOG_HEADER).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(fmt9).unwrap_or_default();
    for l in logs {
        w.write_record([
            l.step.to_string(),
            fmt9(l.forget_loss),
            fmt9(l.retain_loss),
            fmt9(l.cos_fr),
            fmt9(l.cos_cf),
            fmt9(l.cos_cr),
            fmt9(l.conflict_fraction),
            opt(l.forget_acc),
            opt(l.retain_acc),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Invariant(format!("csv encoding failed: {e}")))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_step_logs(path: impl AsRef<Path>) -> Result<Vec<StepLog>> {
    let path = path.as_ref();
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_slice());
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = r.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().ne(STEP_LOG_HEADER) {
        return Err(parse_err(
            1,
            format!("expected header {}", STEP_LOG_HEADER.join(",")),
        ));
    }
    let mut logs = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(line);
            parse_err(line, e.to_string())
        })?;
        let num = |k: usize| -> Result<f64> {
            rec[k].parse::<f64>().map_err(|_| {
                parse_err(line, format!("column {} is not a number: {:?}", STEP_LOG_HEADER[k], &rec[k]))
            })
        };
        let opt = |k: usize| -> Result<Option<f64>> {
            if rec[k].is_empty() {
                Ok(None)
            } else {
                num(k).map(Some)
            }
        };
        let step = rec[0]
            .parse::<usize>()
            .map_err(|_| parse_err(line, format!("step is not an integer: {:?}", &rec[0])))?;
        logs.push(StepLog {
            step,
            forget_loss: num(1)?,
            retain_loss: num(2)?,
            cos_fr: num(3)?,
            cos_cf: num(4)?,
            cos_cr: num(5)?,
            conflict_fraction: num(6)?,
            forget_acc: opt(7)?,
            retain_acc: opt(8)?,
        });
    }
    Ok(logs)
}

pub fn write_sweep_table(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Invariant(format!("csv encoding failed: {e}"));
    w.write_record([
        "cell",
        "combiner",
        "alpha",
        "gamma",
        "eta",
        "forget_acc",
        "retain_acc",
        "forget_loss",
        "retain_loss",
        "mean_cos_fr",
        "mean_cos_cf",
        "mean_cos_cr",
        "pareto",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.cell.to_string(),
            r.combiner.to_string(),
            fmt9(r.alpha),
            fmt9(r.gamma),
            fmt9(r.eta),
            fmt9(r.forget_acc),
            fmt9(r.retain_acc),
            fmt9(r.forget_loss),
            fmt9(r.retain_loss),
            fmt9(r.mean_cos_fr),
            fmt9(r.mean_cos_cf),
            fmt9(r.mean_cos_cr),
            r.pareto.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Invariant(format!("csv encoding failed: {e}")))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
