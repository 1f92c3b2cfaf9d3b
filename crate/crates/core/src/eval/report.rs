//! CSV form of evaluation reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "attack,epsilon,acc_attacked,acc_defended,linf_mean,l2_mean,n";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    /// Attack kind, or `none` for a clean pass.
    pub attack: String,
    pub epsilon: f64,
    pub acc_attacked: f64,
    pub acc_defended: Option<f64>,
    pub linf_mean: f64,
    pub l2_mean: f64,
    pub n: usize,
}

impl EvalRow {
    /// The row as it reads back from CSV (reals rounded to 6 places).
    pub fn quantized(&self) -> Self {
        let q = |v: f64| format!("{v:.6}").parse::<f64>().expect("formatted float");
        Self {
            attack: self.attack.clone(),
            epsilon: q(self.epsilon),
            acc_attacked: q(self.acc_attacked),
            acc_defended: self.acc_defended.map(q),
            linf_mean: q(self.linf_mean),
            l2_mean: q(self.l2_mean),
            n: self.n,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Written as `# key=value` comment lines.
    pub metadata: Vec<(String, String)>,
}

impl EvalReport {
    pub fn with_metadata(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.metadata.push((key.into(), value.to_string()));
        self
    }

    /// Stable sort by epsilon.
    pub fn sort_rows(&mut self) {
        self.rows.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
    }

    pub fn row(&self, attack: &str, epsilon: f64) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.attack == attack && r.epsilon == epsilon)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "# {}={}", k.replace('\n', " "), v.replace('\n', " "));
        }
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let defended = r.acc_defended.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{},{:.6},{:.6},{}",
                r.attack, r.epsilon, r.acc_attacked, defended, r.linf_mean, r.l2_mean, r.n
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut report = Self::default();
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            let bad = |m: &str| Error::Parse(format!("line {}: {m}", i + 1));
            if let Some(comment) = line.strip_prefix('#') {
                let (k, v) = comment.trim_start().split_once('=').ok_or_else(|| bad("metadata without '='"))?;
                report.metadata.push((k.to_string(), v.to_string()));
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !header_seen {
                if line != CSV_HEADER {
                    return Err(bad("unexpected header"));
                }
                header_seen = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad("expected 7 fields"));
            }
            let real = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number {s:?}")));
            report.rows.push(EvalRow {
                attack: f[0].to_string(),
                epsilon: real(f[1])?,
                acc_attacked: real(f[2])?,
                acc_defended: if f[3].is_empty() { None } else { Some(real(f[3])?) },
                linf_mean: real(f[4])?,
                l2_mean: real(f[5])?,
                n: f[6].parse().map_err(|_| bad("bad count"))?,
            });
        }
        if !header_seen {
            return Err(Error::Parse("missing CSV header".into()));
        }
        Ok(report)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }
}
