//! Challenge scoring: per-metric exponential scores, the weighted final
//! score, the PSNR eligibility gate and leaderboard ranking.

use std::collections::HashSet;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One leaderboard row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub team: String,
    pub psnr_val: f64,
    pub psnr_test: f64,
    #[serde(rename = "runtime_val_ms")]
    pub runtime_val: f64,
    #[serde(rename = "runtime_test_ms")]
    pub runtime_test: f64,
    /// Printed average runtime; the mean of val and test when absent.
    #[serde(rename = "runtime_avg_ms", default)]
    pub runtime_avg: Option<f64>,
    #[serde(rename = "params_M")]
    pub params: f64,
    #[serde(rename = "flops_G")]
    pub flops: f64,
}

/// Largest accepted gap between a printed average and the val/test mean:
/// one unit in the third decimal plus half-unit rounding.
pub const RUNTIME_AVG_TOLERANCE: f64 = 1.5e-3;

impl MetricRecord {
    pub fn runtime(&self) -> f64 {
        self.runtime_avg
            .unwrap_or(0.5 * (self.runtime_val + self.runtime_test))
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("psnr_val", self.psnr_val),
            ("psnr_test", self.psnr_test),
            ("runtime_val_ms", self.runtime_val),
            ("runtime_test_ms", self.runtime_test),
            ("runtime_avg_ms", self.runtime()),
            ("params_M", self.params),
            ("flops_G", self.flops),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid("score", format!("team {:?}: {name} must be positive, got {v}", self.team)));
            }
        }
        let mean = 0.5 * (self.runtime_val + self.runtime_test);
        if (self.runtime() - mean).abs() > RUNTIME_AVG_TOLERANCE {
            return Err(Error::invalid(
                "score",
                format!(
                    "team {:?}: average runtime {} disagrees with val/test mean {mean}",
                    self.team,
                    self.runtime()
                ),
            ));
        }
        Ok(())
    }
}

/// Reference model the scores are relative to, and the PSNR floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub runtime: f64,
    pub params: f64,
    pub flops: f64,
    pub psnr_val: f64,
    pub psnr_test: f64,
}

impl Default for Baseline {
    fn default() -> Self {
        Baseline {
            runtime: 22.183,
            params: 0.276,
            flops: 16.70,
            psnr_val: 26.90,
            psnr_test: 26.99,
        }
    }
}

impl Baseline {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("runtime", self.runtime), ("params", self.params), ("flops", self.flops)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid("score", format!("baseline {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_eligible(&self, r: &MetricRecord) -> bool {
        r.psnr_val >= self.psnr_val && r.psnr_test >= self.psnr_test
    }
}

/// Weights of the runtime, FLOPs and parameter scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub runtime: f64,
    pub flops: f64,
    pub params: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            runtime: 0.7,
            flops: 0.15,
            params: 0.15,
        }
    }
}

/// `exp(2 · value / baseline)`; lower is better and equals e² at the
/// baseline.
pub fn metric_score(value: f64, baseline: f64) -> Result<f64> {
    if !(value > 0.0 && baseline > 0.0) {
        return Err(Error::invalid(
            "metric_score",
            format!("value {value} and baseline {baseline} must both be positive"),
        ));
    }
    Ok((2.0 * value / baseline).exp())
}

pub fn final_score(s_runtime: f64, s_flops: f64, s_params: f64, w: ScoreWeights) -> Result<f64> {
    let sum = w.runtime + w.flops + w.params;
    if (sum - 1.0).abs() > 1e-9 || w.runtime < 0.0 || w.flops < 0.0 || w.params < 0.0 {
        return Err(Error::invalid("final_score", format!("weights must be non-negative and sum to 1, got {sum}")));
    }
    Ok(w.runtime * s_runtime + w.flops * s_flops + w.params * s_params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub team: String,
    pub score_runtime: f64,
    pub score_params: f64,
    pub score_flops: f64,
    pub score_final: f64,
    pub eligible: bool,
    /// Main-track position, 1-based; eligible records only.
    pub rank: Option<usize>,
    /// Per-metric positions among eligible records; equal values share a
    /// position and the next one skips accordingly.
    pub rank_runtime: Option<usize>,
    pub rank_params: Option<usize>,
    pub rank_flops: Option<usize>,
}

fn competition_ranks(values: &[f64]) -> Vec<usize> {
    values
        .iter()
        .map(|v| 1 + values.iter().filter(|&&o| o < *v).count())
        .collect()
}

/// Scores every record, gates on PSNR and ranks the eligible ones by final
/// score. Ties go to the better runtime score, then to the team name.
/// Eligible records come first in rank order, then the rest in input
/// order.
pub fn rank(records: &[MetricRecord], baseline: &Baseline, weights: ScoreWeights) -> Result<Vec<ScoreReport>> {
    baseline.validate()?;
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.team.as_str()) {
            return Err(Error::invalid("score", format!("duplicate team {:?}", r.team)));
        }
        r.validate()?;
    }
    let mut reports = records
        .iter()
        .map(|r| {
            let score_runtime = metric_score(r.runtime(), baseline.runtime)?;
            let score_params = metric_score(r.params, baseline.params)?;
            let score_flops = metric_score(r.flops, baseline.flops)?;
            Ok(ScoreReport {
                team: r.team.clone(),
                score_runtime,
                score_params,
                score_flops,
                score_final: final_score(score_runtime, score_flops, score_params, weights)?,
                eligible: baseline.is_eligible(r),
                rank: None,
                rank_runtime: None,
                rank_params: None,
                rank_flops: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let eligible: Vec<usize> = (0..records.len()).filter(|&i| reports[i].eligible).collect();
    let sub = |f: fn(&MetricRecord) -> f64| {
        competition_ranks(&eligible.iter().map(|&i| f(&records[i])).collect::<Vec<_>>())
    };
    let (rr, rp, rf) = (sub(MetricRecord::runtime), sub(|r| r.params), sub(|r| r.flops));
    for (k, &i) in eligible.iter().enumerate() {
        reports[i].rank_runtime = Some(rr[k]);
        reports[i].rank_params = Some(rp[k]);
        reports[i].rank_flops = Some(rf[k]);
    }

    let (mut ranked, rest): (Vec<_>, Vec<_>) = reports.into_iter().partition(|r| r.eligible);
    ranked.sort_by(|a, b| {
        a.score_final
            .total_cmp(&b.score_final)
            .then(a.score_runtime.total_cmp(&b.score_runtime))
            .then_with(|| a.team.cmp(&b.team))
    });
    for (i, r) in ranked.iter_mut().enumerate() {
        r.rank = Some(i + 1);
    }
    ranked.extend(rest);
    Ok(ranked)
}

/// Reads records from CSV with the header
/// `team,psnr_val,psnr_test,runtime_val_ms,runtime_test_ms,params_M,flops_G`
/// and an optional trailing `runtime_avg_ms` column.
pub fn read_records<R: Read>(reader: R) -> Result<Vec<MetricRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::Format(format!("csv row {}: {e}", i + 1))))
        .collect()
}

pub fn load_records(path: &std::path::Path) -> Result<Vec<MetricRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_records(file)
}

/// Two decimals, switching to `d.dde<exp>` from 1000 up.
pub fn format_score(v: f64) -> String {
    if v.abs() >= 1000.0 {
        let exp = v.abs().log10().floor() as i32;
        let mantissa = v / 10f64.powi(exp);
        let m = format!("{mantissa:.2}");
        if m.starts_with("10.") {
            format!("{:.2}e{}", mantissa / 10.0, exp + 1)
        } else {
            format!("{m}e{exp}")
        }
    } else {
        format!("{v:.2}")
    }
}

/// Fixed-width leaderboard table.
pub fn format_table(reports: &[ScoreReport]) -> String {
    let sub = |s: f64, r: Option<usize>| match r {
        Some(r) => format!("{} ({r})", format_score(s)),
        None => format_score(s),
    };
    let header = ["Rank", "Team", "Runtime", "Params", "FLOPs", "Final"];
    let rows: Vec<[String; 6]> = reports
        .iter()
        .map(|r| {
            [
                r.rank.map_or_else(|| "-".into(), |k| k.to_string()),
                r.team.clone(),
                sub(r.score_runtime, r.rank_runtime),
                sub(r.score_params, r.rank_params),
                sub(r.score_flops, r.rank_flops),
                format_score(r.score_final),
            ]
        })
        .collect();
    let mut width = header.map(str::len);
    for row in &rows {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(width).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i == 1 {
                s.push_str(&format!("{cell:<w$}"));
            } else {
                s.push_str(&format!("{cell:>w$}"));
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(&header.map(String::from));
    out.push('\n');
    for row in &rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(team: &str, psnr: (f64, f64), runtime: f64, params: f64, flops: f64) -> MetricRecord {
        MetricRecord {
            team: team.into(),
            psnr_val: psnr.0,
            psnr_test: psnr.1,
            runtime_val: runtime,
            runtime_test: runtime,
            runtime_avg: None,
            params,
            flops,
        }
    }

    #[test]
    fn metric_score_examples() {
        let e2 = 2f64.exp();
        assert_eq!(metric_score(22.183, 22.183).unwrap(), e2);
        let emsr = metric_score(9.994, 22.183).unwrap();
        assert!((emsr - 2.46219).abs() < 1e-5);
        assert_eq!(format_score(emsr), "2.46");
        let shannon = metric_score(8.620, 22.183).unwrap();
        assert!((shannon - 2.17531).abs() < 1e-5);
        assert_eq!(format_score(shannon), "2.18");
        assert!(metric_score(0.0, 1.0).is_err());
        assert!(metric_score(1.0, -1.0).is_err());
    }

    #[test]
    fn final_score_examples() {
        let w = ScoreWeights::default();
        let f = final_score(2.4623, 2.7809, 2.5833, w).unwrap();
        assert!((f - 2.528).abs() < 1e-3);
        let third = 1.0 / 3.0;
        let u = ScoreWeights { runtime: third, flops: third, params: third };
        assert!((final_score(4.2, 4.2, 4.2, u).unwrap() - 4.2).abs() < 1e-12);
        assert!(final_score(1.0, 1.0, 1.0, ScoreWeights { runtime: 0.5, ..w }).is_err());
    }

    #[test]
    fn eligibility_and_single_rank() {
        let b = Baseline::default();
        let rows = vec![rec("a", (24.36, 24.46), 20.0, 0.1, 5.0), rec("b", (26.90, 26.99), 30.0, 0.3, 9.0)];
        let r = rank(&rows, &b, ScoreWeights::default()).unwrap();
        assert_eq!((r[0].team.as_str(), r[0].rank), ("b", Some(1)));
        assert_eq!((r[1].team.as_str(), r[1].rank, r[1].eligible), ("a", None, false));
        assert_eq!(r[1].rank_runtime, None);
    }

    #[test]
    fn ties_break_on_runtime_then_name() {
        let b = Baseline::default();
        let w = ScoreWeights { runtime: 0.5, flops: 0.5, params: 0.0 };
        let rows = vec![
            rec("zeta", (27.0, 27.0), 10.0, 0.2, 10.0),
            rec("alpha", (27.0, 27.0), 10.0, 0.2, 10.0),
        ];
        let r = rank(&rows, &b, w).unwrap();
        assert_eq!(r[0].team, "alpha");
        assert_eq!(r[0].rank_runtime, Some(1));
        assert_eq!(r[1].rank_runtime, Some(1));
    }

    #[test]
    fn duplicate_team_rejected() {
        let rows = vec![rec("x", (27.0, 27.0), 10.0, 0.2, 10.0), rec("x", (27.0, 27.0), 11.0, 0.2, 10.0)];
        assert!(rank(&rows, &Baseline::default(), ScoreWeights::default()).is_err());
    }

    #[test]
    fn average_must_match_mean() {
        let mut r = rec("x", (27.0, 27.0), 10.0, 0.2, 10.0);
        r.runtime_avg = Some(10.001);
        assert!(r.validate().is_ok());
        r.runtime_avg = Some(10.01);
        assert!(r.validate().is_err());
    }

    #[test]
    fn csv_with_and_without_average() {
        let with = "team,psnr_val,psnr_test,runtime_val_ms,runtime_test_ms,params_M,flops_G,runtime_avg_ms\n\
                    A,27,27,10,12,0.1,5,11.0\n";
        let without = "team,psnr_val,psnr_test,runtime_val_ms,runtime_test_ms,params_M,flops_G\nA,27,27,10,12,0.1,5\n";
        assert_eq!(read_records(with.as_bytes()).unwrap()[0].runtime_avg, Some(11.0));
        let r = read_records(without.as_bytes()).unwrap();
        assert_eq!(r[0].runtime(), 11.0);
        assert!(read_records("team,psnr_val\nA,x\n".as_bytes()).is_err());
    }

    #[test]
    fn score_formatting() {
        assert_eq!(format_score(2.4623), "2.46");
        assert_eq!(format_score(9020.4), "9.02e3");
        assert_eq!(format_score(9999.0), "1.00e4");
        assert_eq!(format_score(6321.0), "6.32e3");
    }

    #[test]
    fn table_is_aligned() {
        let rows = vec![rec("EMSR", (27.0, 27.0), 9.994, 0.131, 8.54)];
        let t = format_table(&rank(&rows, &Baseline::default(), ScoreWeights::default()).unwrap());
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].contains("EMSR"));
        assert!(lines[1].ends_with("2.53"));
    }
}
