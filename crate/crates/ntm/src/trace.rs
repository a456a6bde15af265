//! Diagnostics: per-step traces of what the machine reads, writes and
//! emits, exported as CSV matrices plus 16-bit greyscale portable graymaps
//! (value 0 = black, 1 = white); least-squares fit of sort priorities to
//! observed write locations; generalization sweeps over task size.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::{ParameterStore, Tape};
use crate::error::{NtmError, Result};
use crate::model::Ntm;
use crate::tasks::{Episode, EpisodeMeta};
use crate::training::{evaluate, Model, TaskSpec};

/// One timestep of a trace: everything visible at the memory interface.
#[derive(Clone, Debug)]
pub struct TraceRecord {
    pub input: Vec<f64>,
    pub output: Vec<f64>,
    pub read_weightings: Vec<Vec<f64>>,
    pub write_weightings: Vec<Vec<f64>>,
    pub adds: Vec<Vec<f64>>,
    pub reads: Vec<Vec<f64>>,
}

/// A full-episode trace; one record per step.
#[derive(Clone, Debug)]
pub struct TraceLog {
    pub episode: Episode,
    pub records: Vec<TraceRecord>,
}

/// Run one episode forward and record the memory-interface activity.
pub fn run_trace(ntm: &Ntm, store: &ParameterStore, episode: &Episode) -> Result<TraceLog> {
    let mut tape = Tape::new();
    let bound = ntm.bind(&mut tape, store)?;
    let mut state = ntm.initial_state(&mut tape, store)?;
    let mut records = Vec::with_capacity(episode.steps());
    for x in &episode.inputs {
        let (next, logits) = ntm.step(&mut tape, &bound, &state, x)?;
        let grab = |ids: &[crate::autodiff::NodeId]| -> Vec<Vec<f64>> {
            ids.iter().map(|&id| tape.value(id).to_vec()).collect()
        };
        records.push(TraceRecord {
            input: x.clone(),
            output: tape
                .value(logits)
                .iter()
                .map(|&z| crate::autodiff::sigmoid_scalar(z))
                .collect(),
            read_weightings: grab(ntm.read_weightings(&next)),
            write_weightings: grab(ntm.write_weightings(&next)),
            adds: grab(&next.adds),
            reads: grab(&next.reads),
        });
        state = next;
    }
    Ok(TraceLog { episode: episode.clone(), records })
}

fn write_csv(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(())
}

fn write_pgm(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "P2")?;
    writeln!(f, "{w} {h}")?;
    writeln!(f, "65535")?;
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .map(|&v| format!("{}", (v.clamp(0.0, 1.0) * 65535.0).round() as u32))
            .collect();
        writeln!(f, "{}", line.join(" "))?;
    }
    Ok(())
}

fn export_panel(dir: &Path, name: &str, rows: &[Vec<f64>], out: &mut Vec<PathBuf>) -> Result<()> {
    let csv = dir.join(format!("{name}.csv"));
    let pgm = dir.join(format!("{name}.pgm"));
    write_csv(&csv, rows)?;
    write_pgm(&pgm, rows)?;
    out.push(csv);
    out.push(pgm);
    Ok(())
}

/// Export one panel pair (CSV + graymap) per quantity: inputs, targets,
/// outputs, and per-head weightings, adds and reads. Rows are timesteps.
/// The graymap is the CSV clamped to [0,1] and quantized to 16 bits.
pub fn export_trace(log: &TraceLog, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let collect = |pick: &dyn Fn(&TraceRecord) -> Vec<f64>| -> Vec<Vec<f64>> {
        log.records.iter().map(pick).collect()
    };
    export_panel(dir, "inputs", &collect(&|r| r.input.clone()), &mut files)?;
    export_panel(dir, "targets", &log.episode.targets, &mut files)?;
    export_panel(dir, "outputs", &collect(&|r| r.output.clone()), &mut files)?;
    let heads = |n: usize,
                 label: &str,
                 pick: &dyn Fn(&TraceRecord, usize) -> Vec<f64>,
                 files: &mut Vec<PathBuf>|
     -> Result<()> {
        for h in 0..n {
            let rows: Vec<Vec<f64>> = log.records.iter().map(|r| pick(r, h)).collect();
            export_panel(dir, &format!("{label}{h}"), &rows, files)?;
        }
        Ok(())
    };
    let first = log.records.first().ok_or_else(|| NtmError::Config("empty trace".to_string()))?;
    heads(first.read_weightings.len(), "read_weighting", &|r, h| r.read_weightings[h].clone(), &mut files)?;
    heads(first.write_weightings.len(), "write_weighting", &|r, h| r.write_weightings[h].clone(), &mut files)?;
    heads(first.adds.len(), "add", &|r, h| r.adds[h].clone(), &mut files)?;
    heads(first.reads.len(), "read", &|r, h| r.reads[h].clone(), &mut files)?;
    Ok(files)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// On a copy episode, the fraction of data steps whose write location
/// during the input phase matches the read location at the corresponding
/// output step (head 0 each way). Requires copy metadata.
pub fn copy_phase_match(log: &TraceLog) -> Result<f64> {
    let len = match log.episode.meta {
        EpisodeMeta::Copy { len } => len,
        _ => return Err(NtmError::Config("phase match needs a copy episode".to_string())),
    };
    if len == 0 || log.records.len() < 2 * len + 1 {
        return Err(NtmError::Config("trace shorter than copy layout".to_string()));
    }
    let mut hits = 0;
    for i in 0..len {
        let written = argmax(&log.records[i].write_weightings[0]);
        let read = argmax(&log.records[len + 1 + i].read_weightings[0]);
        if written == read {
            hits += 1;
        }
    }
    Ok(hits as f64 / len as f64)
}

/// Least-squares line through (priority, location) pairs. `slope` is None
/// when all priorities coincide, which leaves the line undefined.
#[derive(Clone, Debug)]
pub struct LineFit {
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub residual_rms: f64,
    pub pairs: usize,
}

fn least_squares(pairs: &[(f64, f64)]) -> LineFit {
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx < 1e-12 {
        // all priorities equal: residual measured around the mean location
        let rms = (pairs.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>() / n).sqrt();
        return LineFit { slope: None, intercept: None, residual_rms: rms, pairs: pairs.len() };
    }
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let a = sxy / sxx;
    let b = my - a * mx;
    let rms = (pairs.iter().map(|p| (p.1 - (a * p.0 + b)).powi(2)).sum::<f64>() / n).sqrt();
    LineFit { slope: Some(a), intercept: Some(b), residual_rms: rms, pairs: pairs.len() }
}

/// Fits for write location against input priority over sort traces.
/// `by_argmax` takes the peak of each write weighting as the observed
/// location; `by_expectation` uses the weighting's mean location.
#[derive(Clone, Debug)]
pub struct SortFit {
    pub by_argmax: LineFit,
    pub by_expectation: LineFit,
}

/// Pair each presented item's priority with the write location observed at
/// that step (write head 0) and fit a line to each location measure.
pub fn fit_write_locations(logs: &[TraceLog]) -> Result<SortFit> {
    let mut argmax_pairs = Vec::new();
    let mut expect_pairs = Vec::new();
    for log in logs {
        let priorities = match &log.episode.meta {
            EpisodeMeta::PrioritySort { priorities } => priorities,
            _ => return Err(NtmError::Config("sort fit needs priority-sort episodes".to_string())),
        };
        if log.records.len() < priorities.len() {
            return Err(NtmError::Config("trace shorter than item phase".to_string()));
        }
        for (i, &p) in priorities.iter().enumerate() {
            let w = &log.records[i].write_weightings[0];
            argmax_pairs.push((p, argmax(w) as f64));
            let expected: f64 = w.iter().enumerate().map(|(j, &wj)| j as f64 * wj).sum();
            expect_pairs.push((p, expected));
        }
    }
    if argmax_pairs.is_empty() {
        return Err(NtmError::Config("no (priority, location) pairs".to_string()));
    }
    Ok(SortFit { by_argmax: least_squares(&argmax_pairs), by_expectation: least_squares(&expect_pairs) })
}

/// Which task parameter a generalization sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Length,
    Repeats,
    Items,
}

impl std::str::FromStr for SweepAxis {
    type Err = NtmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "length" => Ok(SweepAxis::Length),
            "repeats" => Ok(SweepAxis::Repeats),
            "items" => Ok(SweepAxis::Items),
            other => Err(NtmError::Config(format!("unknown sweep axis '{other}'"))),
        }
    }
}

/// Pin one task parameter to a fixed value for a sweep point.
pub fn apply_axis(task: &TaskSpec, axis: SweepAxis, value: usize) -> Result<TaskSpec> {
    let mut t = task.clone();
    match (&mut t, axis) {
        (TaskSpec::Copy { len_min, len_max, .. }, SweepAxis::Length)
        | (TaskSpec::RepeatCopy { len_min, len_max, .. }, SweepAxis::Length) => {
            *len_min = value;
            *len_max = value;
        }
        (TaskSpec::RepeatCopy { rep_min, rep_max, .. }, SweepAxis::Repeats) => {
            *rep_min = value;
            *rep_max = value;
        }
        (TaskSpec::AssocRecall { items_min, items_max }, SweepAxis::Items) => {
            *items_min = value;
            *items_max = value;
        }
        (TaskSpec::PrioritySort { .. }, SweepAxis::Items) => {
            return Err(NtmError::Config(
                "sort item count is structural; set it in the task config".to_string(),
            ));
        }
        (TaskSpec::Ngram { length }, SweepAxis::Length) => *length = value,
        _ => {
            return Err(NtmError::Config(format!(
                "axis {axis:?} does not apply to task '{}'",
                task.name()
            )))
        }
    }
    Ok(t)
}

/// One sweep point: cost statistics at a fixed task size.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: usize,
    pub mean: f64,
    pub median: f64,
    pub episodes: usize,
}

/// Evaluate the model at each axis value and return one row per value.
pub fn generalization_sweep(
    model: &Model,
    store: &ParameterStore,
    task: &TaskSpec,
    axis: SweepAxis,
    values: &[usize],
    episodes: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let point = apply_axis(task, axis, value)?;
        let stats = evaluate(model, store, &point, episodes, seed)?;
        rows.push(SweepRow { value, mean: stats.mean, median: stats.median, episodes });
    }
    Ok(rows)
}

/// Write sweep rows as CSV with a header line.
pub fn write_sweep_csv(path: &Path, axis: SweepAxis, rows: &[SweepRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let axis_name = format!("{axis:?}").to_lowercase();
    writeln!(f, "{axis_name},mean_bits,median_bits,episodes")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.value, r.mean, r.median, r.episodes)?;
    }
    Ok(())
}
