//! Training loop for the toy adapted network: minibatch AdamW steps with the
//! orthogonality penalty, interleaved with budgeted rank allocation.

pub mod model;
pub mod optim;
pub mod task;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::adapter::SvdAdapter;
use crate::allocator::{apply_allocation, select_candidates, RankStatus};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::importance::{score_all, MetricKind, SensitivityState};
use crate::rng::SeededRng;
use crate::trace::{EventRecord, Trace, TraceAdapter, TraceHeader, TraceRecord, TRACE_FORMAT_VERSION};

use model::{Layer, Linear, LinearWeight, ToyModel};
use optim::AdamW;
use task::{make_task, Task};

const STREAM_TASK: u64 = 1;
const STREAM_MODEL: u64 = 2;
const STREAM_BATCHES: u64 = 3;
const STREAM_EXPANSION: u64 = 4;

/// Number of leading samples used to check that expansions leave the
/// objective unchanged.
pub const PROBE_SAMPLES: usize = 64;

/// A batch loss this many times larger than the first one counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    /// Data loss over the full training set.
    pub loss: f64,
    pub total_rank: usize,
    pub param_count: usize,
    pub ranks: Vec<usize>,
}

/// Probe-batch data loss just before and just after the expansions of one
/// allocation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeCheck {
    pub step: usize,
    pub expansions: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub task: Task,
    pub trace: Trace,
    pub metrics: Vec<MetricsRow>,
    pub probe_checks: Vec<ProbeCheck>,
    /// Full-dataset data loss of the final model.
    pub final_loss: f64,
    pub steps_completed: usize,
    /// `Some((step, loss))` if training stopped on a non-finite or exploding loss.
    pub divergence: Option<(usize, f64)>,
}

impl TrainOutcome {
    pub fn final_ranks(&self) -> BTreeMap<String, usize> {
        self.model.adapters().iter().map(|a| (a.id().to_string(), a.rank())).collect()
    }

    pub fn metrics_csv(&self) -> String {
        let ids: Vec<String> = self.model.adapters().iter().map(|a| a.id().to_string()).collect();
        let mut out = String::from("step,loss,total_rank,param_count");
        for id in &ids {
            write!(out, ",rank_{id}").unwrap();
        }
        out.push('\n');
        for row in &self.metrics {
            write!(out, "{},{:?},{},{}", row.step, row.loss, row.total_rank, row.param_count).unwrap();
            for r in &row.ranks {
                write!(out, ",{r}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Wraps the task's base weights into a network, attaching adapters to the
/// configured layers. Adapter ids are `layer<k>` with `k` the linear layer
/// index.
pub fn build_model(config: &ExperimentConfig, task: &Task, rng: &mut SeededRng) -> Result<ToyModel> {
    let adapted = config.adapted_layers();
    let a = &config.adapters;
    let n = task.base_weights.len();
    let mut layers = Vec::with_capacity(2 * n);
    for (k, w) in task.base_weights.iter().enumerate() {
        let weight = if adapted.contains(&k) {
            LinearWeight::Adapted(SvdAdapter::new(
                format!("layer{k}"),
                w.clone(),
                a.r_init,
                a.r_max(),
                a.alpha,
                a.init_std,
                rng,
            )?)
        } else {
            LinearWeight::Frozen(w.clone())
        };
        let bias = a.bias.then(|| vec![0.0; w.rows()]);
        layers.push(Layer::Linear(Linear { weight, bias }));
        if k + 1 < n {
            layers.push(Layer::Activation(task.activation));
        }
    }
    ToyModel::new(layers, task.loss)
}

fn trace_header(config: &ExperimentConfig, model: &ToyModel) -> TraceHeader {
    TraceHeader {
        format_version: TRACE_FORMAT_VERSION,
        config_hash: config.hash(),
        seed: config.seed,
        mode: config.mode,
        init: config.init.name().to_string(),
        metric: config.metric.name().to_string(),
        schedule: config.schedule,
        adapters: model
            .adapters()
            .iter()
            .enumerate()
            .map(|(depth, a)| TraceAdapter {
                id: a.id().to_string(),
                depth,
                r_init: a.rank(),
                r_max: a.r_max(),
            })
            .collect(),
    }
}

fn metrics_row(step: usize, model: &ToyModel, task: &Task) -> Result<MetricsRow> {
    Ok(MetricsRow {
        step,
        loss: model.data_loss(&task.inputs, &task.targets)?,
        total_rank: model.total_rank(),
        param_count: model.param_count(),
        ranks: model.adapters().iter().map(|a| a.rank()).collect(),
    })
}

/// Runs one experiment end to end. Everything random derives from
/// `config.seed`, so equal configs give bitwise-equal outcomes.
pub fn run_training(config: &ExperimentConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let root = SeededRng::new(config.seed);
    let task = make_task(&config.task, &mut root.fork(STREAM_TASK))?;
    let mut model = build_model(config, &task, &mut root.fork(STREAM_MODEL))?;
    let mut batch_rng = root.fork(STREAM_BATCHES);
    let mut expansion_rng = root.fork(STREAM_EXPANSION);
    let mut optimizer = AdamW::new(config.optimizer, &model);

    let probe_idx: Vec<usize> = (0..task.samples().min(PROBE_SAMPLES)).collect();
    let (probe_x, probe_y) = task.batch(&probe_idx);

    let mut trace = Trace::new(trace_header(config, &model));
    let mut metrics = Vec::new();
    let mut probe_checks = Vec::new();
    let mut sensitivity: BTreeMap<String, SensitivityState> = BTreeMap::new();
    let mut event_count = 0;
    let mut first_loss = None;
    let mut divergence = None;
    let schedule = config.schedule;
    let total_steps = schedule.total_steps;
    let batch_size = config.batch_size.min(task.samples());
    let mut steps_completed = 0;

    for t in 0..total_steps {
        let idx: Vec<usize> = (0..batch_size).map(|_| batch_rng.below(task.samples())).collect();
        let (x, y) = task.batch(&idx);
        let (loss, grads) = model.loss_and_grad(&x, &y, config.gamma)?;
        let reference = *first_loss.get_or_insert(loss);
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * reference.max(f64::MIN_POSITIVE) {
            let reason = if loss.is_finite() {
                format!("loss exceeded {DIVERGENCE_FACTOR:e} times the initial batch loss")
            } else {
                "non-finite loss".to_string()
            };
            trace.records.push(TraceRecord::Divergence { step: t, loss, reason });
            divergence = Some((t, loss));
            break;
        }

        if let MetricKind::Sensitivity { beta1, beta2 } = config.metric {
            for (layer, adapter) in model.adapters_mut() {
                if let Some(g) = grads.adapter(layer) {
                    sensitivity
                        .entry(adapter.id().to_string())
                        .or_default()
                        .update(adapter, g, beta1, beta2)?;
                }
            }
        }
        optimizer.step(&mut model, &grads)?;

        if schedule.is_allocation_step(t) {
            let b = schedule.budget(t);
            let report = score_all(t, model.adapters(), config.metric, &sensitivity)?;
            let statuses: Vec<RankStatus> = model.adapters().into_iter().map(RankStatus::from).collect();
            let selection = select_candidates(&report, &statuses, b, config.mode);
            if !selection.is_empty() {
                let (prunes, expands) = selection.split();
                let mut changes = Vec::new();
                let mut events = {
                    let mut adapters: Vec<&mut SvdAdapter> = model.adapters_mut().into_iter().map(|(_, a)| a).collect();
                    apply_allocation(t, &mut adapters, &prunes, &report, config.init, &mut expansion_rng, |c| {
                        changes.push(c.clone())
                    })?
                };
                let before = model.data_loss(&probe_x, &probe_y)?;
                {
                    let mut adapters: Vec<&mut SvdAdapter> = model.adapters_mut().into_iter().map(|(_, a)| a).collect();
                    events.extend(apply_allocation(
                        t,
                        &mut adapters,
                        &expands,
                        &report,
                        config.init,
                        &mut expansion_rng,
                        |c| changes.push(c.clone()),
                    )?);
                }
                if !expands.is_empty() {
                    let after = model.data_loss(&probe_x, &probe_y)?;
                    probe_checks.push(ProbeCheck {
                        step: t,
                        expansions: expands.expand.len(),
                        before,
                        after,
                    });
                }
                for c in &changes {
                    optimizer.on_rank_change(c)?;
                }
                let total_rank = model.total_rank();
                let param_count = model.param_count();
                for event in events {
                    event_count += 1;
                    trace.records.push(TraceRecord::Event(EventRecord {
                        event,
                        total_rank,
                        param_count,
                    }));
                }
            }
        }

        steps_completed = t + 1;
        if config.log_every > 0 && t % config.log_every == 0 {
            metrics.push(metrics_row(t, &model, &task)?);
        }
    }

    let final_row = metrics_row(steps_completed, &model, &task)?;
    let final_loss = final_row.loss;
    if metrics.last().map(|r| r.step) != Some(final_row.step) {
        metrics.push(final_row);
    }
    trace.records.push(TraceRecord::End {
        steps_completed,
        event_count,
        final_ranks: model.adapters().iter().map(|a| (a.id().to_string(), a.rank())).collect(),
    });

    Ok(TrainOutcome {
        model,
        task,
        trace,
        metrics,
        probe_checks,
        final_loss,
        steps_completed,
        divergence,
    })
}
