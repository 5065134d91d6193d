//! Classification, accuracy matrices and run reports.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{MemoryBudget, PrototypeBank};
use crate::config::RunConfig;
use crate::error::{contract, Result};
use crate::linalg::dist;
use crate::sampler::SessionDataset;
use crate::trainer::{Learner, SessionLog};

/// How a test embedding is turned into a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classifier {
    /// Nearest class prototype in the bank.
    Ncm { average_copies: bool },
    /// Output-head argmax restricted to the seen classes.
    Head,
}

/// Nearest-class-mean label for `z`. Uses each class's newest copy, or the
/// mean of its stored copies with `average_copies`. Ties go to the smaller
/// class id.
pub fn classify_ncm(bank: &PrototypeBank, z: &[f64], average_copies: bool) -> Result<usize> {
    if bank.is_empty() {
        return Err(contract("classify_ncm: empty bank"));
    }
    if z.len() != bank.dim() {
        return Err(contract("classify_ncm: dimension mismatch"));
    }
    let mut best = (f64::INFINITY, usize::MAX);
    for class in bank.classes() {
        let d = if average_copies {
            dist(z, &class.average())
        } else {
            dist(z, class.newest())
        };
        if d < best.0 || (d == best.0 && class.class_id < best.1) {
            best = (d, class.class_id);
        }
    }
    Ok(best.1)
}

fn classify_head(learner: &Learner, z: &[f64], seen: &[usize]) -> Result<usize> {
    let logits = learner.head.logits(z)?;
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for &c in seen {
        let v = logits[c];
        if v > best.0 || (v == best.0 && c < best.1) {
            best = (v, c);
        }
    }
    Ok(best.1)
}

/// Accuracy on each test split, `None` for empty splits. Samples are scored
/// in parallel; counts are exact so the result does not depend on thread
/// count.
pub fn session_accuracy(
    learner: &Learner,
    classifier: Classifier,
    seen: &[usize],
    tests: &[SessionDataset],
) -> Result<Vec<Option<f64>>> {
    tests
        .iter()
        .map(|split| {
            if split.is_empty() {
                return Ok(None);
            }
            let correct = split
                .samples
                .par_iter()
                .map(|s| {
                    let z = learner.embed(&s.features)?;
                    let label = match classifier {
                        Classifier::Ncm { average_copies } => {
                            classify_ncm(&learner.bank, &z, average_copies)?
                        }
                        Classifier::Head => classify_head(learner, &z, seen)?,
                    };
                    Ok(usize::from(label == s.label))
                })
                .collect::<Result<Vec<usize>>>()?
                .into_iter()
                .sum::<usize>();
            Ok(Some(correct as f64 / split.len() as f64))
        })
        .collect()
}

/// `1/(T−1) Σ_{i<T} (R[T][i] − R[i][i])` over the sessions whose cells are
/// present. `None` for a single-session run.
pub fn backward_transfer(r: &[Vec<Option<f64>>]) -> Option<f64> {
    let t = r.len();
    if t < 2 {
        return None;
    }
    let last = &r[t - 1];
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..t - 1 {
        if let (Some(a), Some(b)) = (last[i], r[i][i]) {
            sum += a - b;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Sample-weighted accuracy over all present cells of a row.
fn pooled(row: &[Option<f64>], sizes: &[usize]) -> f64 {
    let (mut hit, mut tot) = (0.0, 0usize);
    for (cell, &n) in row.iter().zip(sizes) {
        if let Some(a) = cell {
            hit += a * n as f64;
            tot += n;
        }
    }
    if tot == 0 {
        0.0
    } else {
        hit / tot as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    /// `accuracy[t][i]`: accuracy on session `i`'s test split after training
    /// session `t`. Row `t` has `t + 1` cells.
    pub accuracy: Vec<Vec<Option<f64>>>,
    /// Test accuracy over every seen class after each session.
    pub cumulative: Vec<f64>,
    pub final_accuracy: f64,
    pub backward_transfer: Option<f64>,
    pub memory: MemoryBudget,
    pub sessions: Vec<SessionLog>,
    pub config: RunConfig,
}

impl RunReport {
    /// Assemble a report from per-session accuracy rows. `test_sizes` holds
    /// the sample count of each session's test split.
    pub fn new(
        accuracy: Vec<Vec<Option<f64>>>,
        test_sizes: &[usize],
        sessions: Vec<SessionLog>,
        memory: MemoryBudget,
        config: RunConfig,
    ) -> Self {
        let cumulative: Vec<f64> = accuracy.iter().map(|row| pooled(row, test_sizes)).collect();
        Self {
            seed: config.plan.seed,
            final_accuracy: cumulative.last().copied().unwrap_or(0.0),
            backward_transfer: backward_transfer(&accuracy),
            cumulative,
            accuracy,
            memory,
            sessions,
            config,
        }
    }

    /// `accuracy.csv`: one row per session `t` holding `A_t` and then
    /// `R[t][1..=T]`, blank where undefined.
    pub fn write_accuracy_csv(&self, w: impl Write) -> Result<()> {
        let t_max = self.accuracy.len();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["session".to_string(), "cumulative".to_string()];
        header.extend((1..=t_max).map(|i| format!("r{i}")));
        out.write_record(&header).map_err(csv_err)?;
        for (t, row) in self.accuracy.iter().enumerate() {
            let mut rec = vec![(t + 1).to_string(), self.cumulative[t].to_string()];
            rec.extend((0..t_max).map(|i| {
                row.get(i)
                    .copied()
                    .flatten()
                    .map(|a| a.to_string())
                    .unwrap_or_default()
            }));
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Data(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::BankConfig;

    fn bank(protos: &[(usize, Vec<f64>)]) -> PrototypeBank {
        let mut b = PrototypeBank::new(protos[0].1.len());
        for (id, p) in protos {
            b.insert(*id, 1, p.clone(), &BankConfig::default()).unwrap();
        }
        b
    }

    #[test]
    fn ncm_picks_nearest() {
        let b = bank(&[(3, vec![0.0, 0.0]), (7, vec![2.0, 0.0])]);
        assert_eq!(classify_ncm(&b, &[1.5, 0.1], false).unwrap(), 7);
        assert_eq!(classify_ncm(&b, &[0.4, 0.1], false).unwrap(), 3);
    }

    #[test]
    fn ncm_tie_goes_to_smaller_id() {
        let b = bank(&[(9, vec![1.0, 0.0]), (4, vec![-1.0, 0.0])]);
        assert_eq!(classify_ncm(&b, &[0.0, 3.0], false).unwrap(), 4);
    }

    #[test]
    fn ncm_rejects_bad_input() {
        let b = PrototypeBank::new(2);
        assert!(classify_ncm(&b, &[0.0, 0.0], false).is_err());
        let b = bank(&[(0, vec![0.0, 0.0])]);
        assert!(classify_ncm(&b, &[0.0], false).is_err());
    }

    #[test]
    fn bwt_of_three_sessions() {
        let r = vec![
            vec![Some(0.9)],
            vec![Some(0.8), Some(0.7)],
            vec![Some(0.6), Some(0.5), Some(0.65)],
        ];
        let want = ((0.6 - 0.9) + (0.5 - 0.7)) / 2.0;
        assert!((backward_transfer(&r).unwrap() - want).abs() < 1e-15);
        assert_eq!(backward_transfer(&r[..1]), None);
    }

    #[test]
    fn bwt_skips_absent_cells() {
        let r = vec![vec![Some(1.0)], vec![None, Some(0.5)], vec![Some(0.75), None, Some(0.5)]];
        assert_eq!(backward_transfer(&r), Some(-0.25));
    }

    #[test]
    fn pooled_weights_by_size() {
        assert_eq!(pooled(&[Some(1.0), Some(0.0)], &[30, 10]), 0.75);
        assert_eq!(pooled(&[None, Some(0.5)], &[30, 10]), 0.5);
        assert_eq!(pooled(&[None], &[0]), 0.0);
    }
}
