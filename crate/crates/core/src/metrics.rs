//! Accuracy, Jaccard index and CO2e estimation.

use std::fmt::Write as _;
use std::io::Read;

use rayon::prelude::*;

use crate::composer::{compose_predict, ClassLabel, ModuleSet, VoteMode};
use crate::concern::ConcernMap;
use crate::error::{Error, Result};
use crate::graph::{LabeledDataset, ModelGraph};
use crate::inference::forward;
use crate::modularizer::Module;
use crate::tensor::Tensor;

/// Power usage effectiveness applied to measured draw.
pub const PUE: f64 = 1.58;
/// Pounds of CO2e per kWh.
pub const LBS_PER_KWH: f64 = 0.954;

/// Fraction of examples whose label is among the first `k` ranked entries.
pub fn top_k_accuracy<T: PartialEq>(ranked: &[Vec<T>], labels: &[T], k: usize) -> Result<f64> {
    if ranked.is_empty() {
        return Err(Error::Empty("no predictions".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if ranked.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} labels", ranked.len(), labels.len())));
    }
    let hits = ranked.iter().zip(labels).filter(|(r, l)| r.iter().take(k).any(|x| x == *l)).count();
    Ok(hits as f64 / ranked.len() as f64)
}

/// Number of maskable positions: every positional layer output plus every
/// hidden dense node.
pub fn position_universe(model: &ModelGraph) -> usize {
    let positional: usize = model.positional_indices().iter().map(|&l| model.output_len(l)).sum();
    let dense: usize = model.dense_chain().hidden.iter().map(|&l| model.output_len(l)).sum();
    positional + dense
}

/// Active positions over all maskable positions. Model input positions are
/// not part of the universe.
pub fn jaccard_map(model: &ModelGraph, map: &ConcernMap) -> f64 {
    let universe = position_universe(model);
    let inactive: usize = map.positional_entries().chain(map.dense_entries()).map(|(_, s)| s.len()).sum();
    (universe - inactive) as f64 / universe as f64
}

pub fn jaccard(module: &Module) -> f64 {
    jaccard_map(module.model(), module.map())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerSample {
    pub t_seconds: f64,
    pub cpu_w: f64,
    pub dram_w: f64,
    pub gpu_w: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerLog {
    samples: Vec<PowerSample>,
    pub gpu_count: u32,
    pub baseline_cpu_w: f64,
    pub baseline_dram_w: f64,
}

/// Average draw in watts, baseline subtracted and clamped at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AveragePower {
    pub cpu_w: f64,
    pub dram_w: f64,
    pub gpu_w: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Emission {
    pub kwh: f64,
    pub lbs: f64,
}

impl PowerLog {
    pub fn new(samples: Vec<PowerSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("power log has no samples".into()));
        }
        for s in &samples {
            let values = [s.t_seconds, s.cpu_w, s.dram_w, s.gpu_w];
            if values.iter().any(|v| !v.is_finite()) || values[1..].iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidArgument(format!("bad power sample at t = {}", s.t_seconds)));
            }
        }
        if samples.windows(2).any(|w| w[1].t_seconds <= w[0].t_seconds) {
            return Err(Error::InvalidArgument("power log timestamps must be strictly increasing".into()));
        }
        Ok(PowerLog { samples, gpu_count: 0, baseline_cpu_w: 0.0, baseline_dram_w: 0.0 })
    }

    /// Reads `t_seconds,p_cpu_w,p_dram_w,p_gpu_w` CSV.
    pub fn from_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
        let expected = ["t_seconds", "p_cpu_w", "p_dram_w", "p_gpu_w"];
        if header.iter().ne(expected) {
            return Err(Error::Parse(format!("power log header must be {}", expected.join(","))));
        }
        let mut samples = Vec::new();
        for (n, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| Error::Parse(e.to_string()))?;
            let field = |i: usize| {
                record[i]
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("row {}: bad number {:?}", n + 2, &record[i])))
            };
            samples.push(PowerSample { t_seconds: field(0)?, cpu_w: field(1)?, dram_w: field(2)?, gpu_w: field(3)? });
        }
        PowerLog::new(samples)
    }

    pub fn samples(&self) -> &[PowerSample] {
        &self.samples
    }

    /// Trapezoidal time-weighted averages; a single sample is its own
    /// average.
    pub fn averages(&self) -> AveragePower {
        let avg = |f: fn(&PowerSample) -> f64| {
            if self.samples.len() == 1 {
                return f(&self.samples[0]);
            }
            let area: f64 =
                self.samples.windows(2).map(|w| 0.5 * (f(&w[0]) + f(&w[1])) * (w[1].t_seconds - w[0].t_seconds)).sum();
            area / (self.samples.last().unwrap().t_seconds - self.samples[0].t_seconds)
        };
        AveragePower {
            cpu_w: (avg(|s| s.cpu_w) - self.baseline_cpu_w).max(0.0),
            dram_w: (avg(|s| s.dram_w) - self.baseline_dram_w).max(0.0),
            gpu_w: avg(|s| s.gpu_w),
        }
    }
}

/// `kWh = PUE · t · (cpu + dram + g · gpu) / 1000` with `t` in hours and
/// powers in watts; `lbs = 0.954 · kWh`.
pub fn co2e_from_averages(t_hours: f64, power: AveragePower, gpu_count: u32) -> Result<Emission> {
    if !t_hours.is_finite() || t_hours < 0.0 {
        return Err(Error::InvalidArgument(format!("duration must be a non-negative number of hours, got {t_hours}")));
    }
    let watts = power.cpu_w + power.dram_w + f64::from(gpu_count) * power.gpu_w;
    let kwh = PUE * t_hours * watts / 1000.0;
    Ok(Emission { kwh, lbs: LBS_PER_KWH * kwh })
}

pub fn co2e(log: &PowerLog, t_hours: f64) -> Result<Emission> {
    co2e_from_averages(t_hours, log.averages(), log.gpu_count)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassTally {
    pub label: ClassLabel,
    pub correct: usize,
    pub total: usize,
}

impl ClassTally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub per_class: Vec<ClassTally>,
    pub jaccard: Vec<(ClassLabel, f64)>,
    pub n_examples: usize,
    pub vote: VoteMode,
}

impl EvalReport {
    pub fn mean_jaccard(&self) -> f64 {
        self.jaccard.iter().map(|(_, j)| j).sum::<f64>() / self.jaccard.len().max(1) as f64
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "examples  {}", self.n_examples);
        let _ = writeln!(s, "vote      {}", self.vote.as_str());
        let _ = writeln!(s, "top-1     {:.4}", self.top1);
        let _ = writeln!(s, "top-5     {:.4}", self.top5);
        let _ = writeln!(s, "mean JI   {:.4}", self.mean_jaccard());
        let _ = writeln!(s, "{:<24} {:>8} {:>8} {:>8}", "label", "correct", "total", "JI");
        for t in &self.per_class {
            let ji = self.jaccard.iter().find(|(l, _)| *l == t.label).map_or(f64::NAN, |(_, j)| *j);
            let _ = writeln!(s, "{:<24} {:>8} {:>8} {:>8.4}", t.label.to_string(), t.correct, t.total, ji);
        }
        s
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_examples = {}", self.n_examples);
        let _ = writeln!(s, "vote = {}", self.vote.as_str());
        let _ = writeln!(s, "top1 = {}", self.top1);
        let _ = writeln!(s, "top5 = {}", self.top5);
        for t in &self.per_class {
            let _ = writeln!(s, "class.{}.correct = {}", t.label, t.correct);
            let _ = writeln!(s, "class.{}.total = {}", t.label, t.total);
        }
        for (l, j) in &self.jaccard {
            let _ = writeln!(s, "jaccard.{l} = {j}");
        }
        s
    }
}

/// Dataset examples labelled `dataset:class`, restricted to labels in `set`.
pub fn labelled_examples<'a>(set: &ModuleSet, dataset: &'a LabeledDataset) -> Vec<(&'a Tensor, ClassLabel)> {
    dataset
        .images()
        .iter()
        .zip(dataset.labels())
        .map(|(x, &c)| (x, ClassLabel::new(dataset.name(), c)))
        .filter(|(_, l)| set.contains(l))
        .collect()
}

pub fn evaluate_examples(set: &ModuleSet, examples: &[(&Tensor, ClassLabel)], mode: VoteMode) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Empty("no test examples".into()));
    }
    if let Some((_, l)) = examples.iter().find(|(_, l)| !set.contains(l)) {
        return Err(Error::UnknownLabel(format!("test label {l} has no module in the set")));
    }
    let ranked = examples
        .par_iter()
        .map(|(x, _)| Ok(compose_predict(set, x, mode)?.into_iter().map(|v| v.label).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<ClassLabel> = examples.iter().map(|(_, l)| l.clone()).collect();
    let per_class = set
        .labels()
        .into_iter()
        .map(|label| {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
            let correct = rows.iter().filter(|&&i| ranked[i][0] == label).count();
            ClassTally { label, correct, total: rows.len() }
        })
        .collect();
    Ok(EvalReport {
        top1: top_k_accuracy(&ranked, &labels, 1)?,
        top5: top_k_accuracy(&ranked, &labels, 5)?,
        per_class,
        jaccard: set.entries().iter().map(|(l, m)| (l.clone(), jaccard(m))).collect(),
        n_examples: examples.len(),
        vote: mode,
    })
}

/// Evaluates on every example of `dataset`; each of its labels must be in
/// the set.
pub fn evaluate(set: &ModuleSet, dataset: &LabeledDataset, mode: VoteMode) -> Result<EvalReport> {
    let examples: Vec<(&Tensor, ClassLabel)> =
        dataset.images().iter().zip(dataset.labels()).map(|(x, &c)| (x, ClassLabel::new(dataset.name(), c))).collect();
    evaluate_examples(set, &examples, mode)
}

/// Top-1 and top-5 accuracy of the unmodified model.
pub fn model_accuracy(model: &ModelGraph, dataset: &LabeledDataset) -> Result<(f64, f64)> {
    let ranked = dataset
        .images()
        .par_iter()
        .map(|x| {
            let logits = forward(model, x)?.logits;
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|&a, &b| logits.data()[b].total_cmp(&logits.data()[a]).then(a.cmp(&b)));
            Ok(order)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((top_k_accuracy(&ranked, dataset.labels(), 1)?, top_k_accuracy(&ranked, dataset.labels(), 5)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_basics() {
        let ranked = vec![vec![1, 2, 3], vec![2, 1, 3]];
        assert_eq!(top_k_accuracy(&ranked, &[1, 2], 1).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&ranked, &[3, 3], 1).unwrap(), 0.0);
        assert_eq!(top_k_accuracy(&ranked, &[3, 3], 5).unwrap(), 1.0);
        assert!(top_k_accuracy::<u8>(&[], &[], 1).is_err());
        assert!(top_k_accuracy(&ranked, &[1, 2], 0).is_err());
        assert!(top_k_accuracy(&ranked, &[1], 1).is_err());
    }

    #[test]
    fn co2e_worked_example() {
        let e = co2e_from_averages(1.0, AveragePower { cpu_w: 800.0, dram_w: 200.0, gpu_w: 0.0 }, 0).unwrap();
        assert!((e.kwh - 1.58).abs() < 1e-12);
        assert!((e.lbs - 1.50732).abs() < 1e-12);
        let zero = co2e_from_averages(3.0, AveragePower { cpu_w: 0.0, dram_w: 0.0, gpu_w: 250.0 }, 0).unwrap();
        assert_eq!(zero, Emission { kwh: 0.0, lbs: 0.0 });
        assert!(co2e_from_averages(-1.0, AveragePower { cpu_w: 1.0, dram_w: 0.0, gpu_w: 0.0 }, 0).is_err());
        assert!(co2e_from_averages(f64::NAN, AveragePower { cpu_w: 1.0, dram_w: 0.0, gpu_w: 0.0 }, 0).is_err());
    }

    #[test]
    fn log_parsing_and_trapezoid() {
        let csv = "t_seconds,p_cpu_w,p_dram_w,p_gpu_w\n0,100,10,0\n10,300,10,0\n30,300,30,0\n";
        let mut log = PowerLog::from_csv(csv.as_bytes()).unwrap();
        let a = log.averages();
        // cpu: (200*10 + 300*20) / 30, dram: (10*10 + 20*20) / 30
        assert!((a.cpu_w - 8000.0 / 30.0).abs() < 1e-12);
        assert!((a.dram_w - 500.0 / 30.0).abs() < 1e-12);
        log.baseline_cpu_w = 1000.0;
        assert_eq!(log.averages().cpu_w, 0.0);
        assert!(PowerLog::from_csv("t,c,d,g\n0,1,1,1\n".as_bytes()).is_err());
        assert!(PowerLog::from_csv("t_seconds,p_cpu_w,p_dram_w,p_gpu_w\n".as_bytes()).is_err());
        assert!(PowerLog::from_csv("t_seconds,p_cpu_w,p_dram_w,p_gpu_w\n1,1,1,1\n1,2,2,2\n".as_bytes()).is_err());
        assert!(PowerLog::from_csv("t_seconds,p_cpu_w,p_dram_w,p_gpu_w\n0,-1,1,1\n".as_bytes()).is_err());
    }
}
