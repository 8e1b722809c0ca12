use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use seca_core::trainer::Metrics;

use crate::args::Format;
use crate::error::{CliError, CliResult};
use crate::io::write_text;

pub const REPORT_FILE: &str = "report.json";
pub const CURVES_FILE: &str = "curves.csv";

/// One seeded run of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub last: f64,
    pub avg: f64,
    pub per_task: Vec<f64>,
}

impl RunResult {
    pub fn new(seed: u64, m: &Metrics) -> Self {
        RunResult {
            seed,
            last: m.last,
            avg: m.avg,
            per_task: m.per_task.iter().map(|t| t.acc).collect(),
        }
    }
}

/// A variant's accuracies averaged over its seeded runs (all in percent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub last: f64,
    pub avg: f64,
    pub per_task: Vec<f64>,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunResult>,
}

impl ReportRow {
    pub fn from_runs(variant: &str, runs: Vec<RunResult>) -> CliResult<Self> {
        let n = runs.len();
        if n == 0 {
            return Err(CliError::config(format!("variant {variant} has no runs")));
        }
        let tasks = runs[0].per_task.len();
        if runs.iter().any(|r| r.per_task.len() != tasks) {
            return Err(CliError::malformed(format!("variant {variant}: runs disagree on task count")));
        }
        let mean = |f: &dyn Fn(&RunResult) -> f64| runs.iter().map(f).sum::<f64>() / n as f64;
        Ok(ReportRow {
            variant: variant.to_string(),
            last: mean(&|r| r.last),
            avg: mean(&|r| r.avg),
            per_task: (0..tasks).map(|t| mean(&|r| r.per_task[t])).collect(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            runs,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn read(dir: &Path) -> CliResult<Self> {
        let path = dir.join(REPORT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::malformed(format!("{}: {e}", path.display())))
    }

    pub fn row(&self, variant: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    fn tasks(&self) -> usize {
        self.rows.iter().map(|r| r.per_task.len()).max().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// `variant,last,avg,seeds,task_1..task_S`. Numbers use the shortest
    /// representation that parses back to the same value; seeds are `;`-joined.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["variant".to_string(), "last".into(), "avg".into(), "seeds".into()];
        header.extend((1..=self.tasks()).map(|t| format!("task_{t}")));
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![
                r.variant.clone(),
                r.last.to_string(),
                r.avg.to_string(),
                r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";"),
            ];
            rec.extend(r.per_task.iter().map(f64::to_string));
            rec.resize(header.len(), String::new());
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn to_markdown(&self) -> String {
        let tasks = self.tasks();
        let mut s = String::from("| variant | Last | Avg | seeds |");
        for t in 1..=tasks {
            let _ = write!(s, " T{t} |");
        }
        s.push_str("\n|---|---:|---:|---|");
        s.push_str(&"---:|".repeat(tasks));
        s.push('\n');
        for r in &self.rows {
            let seeds = r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
            let _ = write!(s, "| {} | {:.2} | {:.2} | {} |", r.variant, r.last, r.avg, seeds);
            for t in 0..tasks {
                match r.per_task.get(t) {
                    Some(a) => {
                        let _ = write!(s, " {a:.2} |");
                    }
                    None => s.push_str("  |"),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Long-form task curves: one `(task, variant, acc)` line per point.
    pub fn curves_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task", "variant", "acc"]).expect("in-memory write");
        for r in &self.rows {
            for (t, a) in r.per_task.iter().enumerate() {
                w.write_record([(t + 1).to_string(), r.variant.clone(), a.to_string()])
                    .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => self.to_json(),
            Format::Md => self.to_markdown(),
        }
    }

    /// Writes `report.json`, `report.{csv,md}` and `curves.csv`.
    pub fn write_all(&self, dir: &Path) -> CliResult<()> {
        write_text(&dir.join(REPORT_FILE), &self.to_json())?;
        write_text(&dir.join("report.csv"), &self.to_csv())?;
        write_text(&dir.join("report.md"), &self.to_markdown())?;
        write_text(&dir.join(CURVES_FILE), &self.curves_csv())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> Report {
        let a = ReportRow::from_runs(
            "a",
            vec![
                RunResult { seed: 0, last: 50.0, avg: 75.0, per_task: vec![100.0, 50.0] },
                RunResult { seed: 1, last: 60.0, avg: 70.0, per_task: vec![80.0, 60.0] },
            ],
        )
        .unwrap();
        let b = ReportRow::from_runs(
            "b",
            vec![RunResult { seed: 0, last: 1.0 / 3.0, avg: 0.1, per_task: vec![0.1, 1.0 / 3.0] }],
        )
        .unwrap();
        Report { rows: vec![a, b] }
    }

    #[test]
    fn rows_average_their_runs() {
        let r = report();
        assert_eq!(r.rows[0].last, 55.0);
        assert_eq!(r.rows[0].avg, 72.5);
        assert_eq!(r.rows[0].per_task, vec![90.0, 55.0]);
        assert_eq!(r.rows[0].seeds, vec![0, 1]);
        assert!(ReportRow::from_runs("x", vec![]).is_err());
    }

    #[test]
    fn csv_numbers_parse_back_exactly() {
        let r = report();
        let text = r.to_csv();
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let recs: Vec<csv::StringRecord> = rd.records().map(|x| x.unwrap()).collect();
        assert_eq!(recs.len(), 2);
        for (rec, row) in recs.iter().zip(&r.rows) {
            assert_eq!(&rec[0], row.variant);
            assert_eq!(rec[1].parse::<f64>().unwrap(), row.last);
            assert_eq!(rec[2].parse::<f64>().unwrap(), row.avg);
            for (t, a) in row.per_task.iter().enumerate() {
                assert_eq!(rec[4 + t].parse::<f64>().unwrap(), *a);
            }
        }
    }

    #[test]
    fn markdown_has_one_line_per_variant() {
        let md = report().to_markdown();
        assert_eq!(md.lines().count(), 2 + 2);
        assert!(md.lines().nth(2).unwrap().starts_with("| a | 55.00 | 72.50 | 0,1 |"));
    }

    #[test]
    fn curves_are_long_form() {
        let c = report().curves_csv();
        let lines: Vec<&str> = c.lines().collect();
        assert_eq!(lines[0], "task,variant,acc");
        assert_eq!(lines[1], "1,a,90");
        assert_eq!(lines.len(), 1 + 4);
    }
}
