//! One complete run: learn the curriculum stage by stage and fill the
//! performance matrix after each stage.

use crate::config::{Baseline, RunConfig};
use crate::error::Result;
use crate::metrics::{eval_task, PerformanceMatrix};
use crate::taskgen::{gen_synthetic_stream, load_stream, TaskDef, TaskStream};
use crate::trainer::{StepLog, Trainer};

pub enum Event<'a> {
    Step(&'a StepLog),
    /// A stage finished and its matrix row was written.
    Stage { trainer: &'a Trainer, matrix: &'a PerformanceMatrix },
}

pub struct Outcome {
    pub trainer: Trainer,
    pub matrix: PerformanceMatrix,
}

pub fn load_stream_for(cfg: &RunConfig) -> Result<TaskStream> {
    let stream = match &cfg.stream_path {
        Some(p) => load_stream(std::path::Path::new(p))?,
        None => gen_synthetic_stream(&cfg.stream_spec())?,
    };
    stream.validate()?;
    Ok(stream)
}

/// Seen tasks in learning order.
pub fn ordered_seen<'a>(cfg: &RunConfig, stream: &'a TaskStream) -> Vec<&'a TaskDef> {
    stream
        .curriculum(Some(cfg.order_seed()))
        .into_iter()
        .map(|i| &stream.seen[i])
        .collect()
}

/// Matrix columns: seen tasks in learning order, then unseen tasks.
pub fn columns<'a>(cfg: &RunConfig, stream: &'a TaskStream) -> Vec<&'a TaskDef> {
    let mut cols = ordered_seen(cfg, stream);
    cols.extend(stream.unseen.iter());
    cols
}

pub fn eval_row(trainer: &Trainer, cols: &[&TaskDef]) -> Result<Vec<f64>> {
    cols.iter().map(|t| eval_task(trainer, t)).collect()
}

/// Runs from scratch, or continues `resume` past its completed stages.
pub fn run(
    cfg: &RunConfig,
    stream: &TaskStream,
    resume: Option<(Trainer, PerformanceMatrix)>,
    on_event: &mut dyn FnMut(Event) -> Result<()>,
) -> Result<Outcome> {
    let cols = columns(cfg, stream);
    let n_seen = stream.seen.len();
    let (mut trainer, mut matrix) = match resume {
        Some(r) => r,
        None => (
            Trainer::new(cfg.clone(), stream.vocab())?,
            PerformanceMatrix::new(
                cols.iter().map(|t| t.id).collect(),
                cols.iter().map(|t| t.name.clone()).collect(),
                n_seen,
            ),
        ),
    };
    let stages: Vec<Vec<&TaskDef>> = match cfg.baseline {
        Baseline::Multitask => vec![cols[..n_seen].to_vec()],
        _ => cols[..n_seen].iter().map(|t| vec![*t]).collect(),
    };
    for stage in stages.iter().skip(trainer.stages) {
        let mut err = None;
        trainer.train_stage(stage, &mut |log| {
            if err.is_none() {
                if let Err(e) = on_event(Event::Step(log)) {
                    err = Some(e);
                }
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        matrix.push_row(eval_row(&trainer, &cols)?)?;
        on_event(Event::Stage {
            trainer: &trainer,
            matrix: &matrix,
        })?;
    }
    Ok(Outcome { trainer, matrix })
}
