use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Column order of the results CSV.
pub const CSV_COLUMNS: [&str; 11] = [
    "run_id",
    "dataset",
    "bias_or_sigma",
    "classifier_arch",
    "estimator",
    "class0_effect",
    "summary",
    "n_samples",
    "stderr",
    "seed",
    "pass_fail",
];

/// One estimate or diagnostic. `detail` carries the full report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    /// Position in the grid; rows are written in this order.
    pub cell_order: usize,
    pub run_id: String,
    pub dataset: String,
    pub bias_or_sigma: String,
    pub classifier_arch: String,
    pub estimator: String,
    pub class0_effect: Option<f64>,
    pub summary: Option<f64>,
    pub n_samples: usize,
    pub stderr: Option<f64>,
    pub seed: Option<u64>,
    /// `pass` / `fail` for diagnostics, `error` for failed cells.
    pub pass_fail: Option<String>,
    pub error: Option<String>,
    pub detail: serde_json::Value,
}

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_csv(rows: &[ResultRow], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Io(e.into()))?;
    let io = |e: csv::Error| HarnessError::Io(e.into());
    w.write_record(CSV_COLUMNS).map_err(io)?;
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.dataset.clone(),
            r.bias_or_sigma.clone(),
            r.classifier_arch.clone(),
            r.estimator.clone(),
            num(r.class0_effect),
            num(r.summary),
            r.n_samples.to_string(),
            num(r.stderr),
            r.seed.map(|s| s.to_string()).unwrap_or_default(),
            r.pass_fail.clone().unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl(rows: &[ResultRow], path: &Path) -> Result<(), HarnessError> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ResultRow>, HarnessError> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(HarnessError::from))
        .collect()
}

fn bound_text(bound: Option<&serde_json::Value>) -> String {
    let Some(obj) = bound.and_then(|b| b.as_object()) else {
        return String::new();
    };
    obj.iter()
        .map(|(k, v)| match k.as_str() {
            "at_least" => format!(">= {v}"),
            "at_most" => format!("|x| <= {v}"),
            _ => format!("{k} {v}"),
        })
        .collect::<Vec<_>>()
        .join(", ")
}

const TABLE_ESTIMATORS: [(&str, &str); 5] = [
    ("gt_cace", "GT-CaCE"),
    ("dec_cace", "Dec-CaCE"),
    ("encdec_cace", "EncDec-CaCE"),
    ("conexp", "ConExp"),
    ("tcav", "TCAV"),
];

/// Plain-text table: one line per (dataset, classifier) with the summary of
/// each estimator in its own column, then the diagnostics.
pub fn render_table(title: &str, sweep_header: &str, rows: &[ResultRow]) -> String {
    let mut keys: Vec<(String, String, String)> = Vec::new();
    for r in rows
        .iter()
        .filter(|r| r.estimator != "positive_effect" && r.estimator != "null_effect")
    {
        let k = (
            r.dataset.clone(),
            r.bias_or_sigma.clone(),
            r.classifier_arch.clone(),
        );
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let present: Vec<(&str, &str)> = TABLE_ESTIMATORS
        .iter()
        .copied()
        .filter(|(name, _)| rows.iter().any(|r| r.estimator == *name))
        .collect();

    let mut header = vec![sweep_header.to_string(), "classifier".to_string()];
    header.extend(present.iter().map(|(_, h)| h.to_string()));
    let mut body: Vec<Vec<String>> = Vec::new();
    for (dataset, sweep, arch) in &keys {
        let mut line = vec![sweep.clone(), arch.clone()];
        for (name, _) in &present {
            let cell = rows
                .iter()
                .find(|r| &r.dataset == dataset && &r.classifier_arch == arch && r.estimator == *name);
            line.push(match cell {
                Some(r) if r.error.is_some() => "error".into(),
                Some(r) => r.summary.map(|v| format!("{v:.3}")).unwrap_or_default(),
                None => "-".into(),
            });
        }
        body.push(line);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            body.iter()
                .map(|l| l[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let fmt = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
    };
    let mut out = format!("{title}\n");
    if !body.is_empty() {
        out += &fmt(&header);
        out.push('\n');
        out += &widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .join("-+-");
        out.push('\n');
        for l in &body {
            out += &fmt(l);
            out.push('\n');
        }
    }
    let diags: Vec<&ResultRow> = rows
        .iter()
        .filter(|r| r.estimator == "positive_effect" || r.estimator == "null_effect")
        .collect();
    if !diags.is_empty() {
        out += "\ndiagnostics\n";
        for r in diags {
            let value = match (&r.error, r.summary) {
                (Some(e), _) => format!("error: {e}"),
                (None, Some(v)) => format!("{v:.4}"),
                (None, None) => String::new(),
            };
            out += &format!(
                "  {:<16} {} [{}] {}\n",
                r.estimator,
                value,
                bound_text(r.detail.get("bound")),
                r.pass_fail.as_deref().unwrap_or("")
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(est: &str, summary: f64) -> ResultRow {
        ResultRow {
            cell_order: 0,
            run_id: format!("t/c00-a0/{est}"),
            dataset: "bars@abc".into(),
            bias_or_sigma: "0.6/0.4".into(),
            classifier_arch: "relu-8".into(),
            estimator: est.into(),
            class0_effect: Some(summary),
            summary: Some(summary),
            n_samples: 10,
            stderr: None,
            seed: Some(1),
            pass_fail: None,
            error: None,
            detail: serde_json::Value::Null,
        }
    }

    #[test]
    fn csv_has_fixed_header_and_blank_optionals() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_csv(&[row("gt_cace", 0.25)], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(
            lines.next().unwrap(),
            "t/c00-a0/gt_cace,bars@abc,0.6/0.4,relu-8,gt_cace,0.25,0.25,10,,1,"
        );
    }

    #[test]
    fn table_has_one_column_per_estimator() {
        let t = render_table("t", "bias", &[row("gt_cace", 0.1), row("conexp", 0.3)]);
        assert!(t.contains("GT-CaCE"));
        assert!(t.contains("ConExp"));
        assert!(!t.contains("TCAV"));
        assert!(t.contains("0.300"));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let rows = vec![row("gt_cace", 0.1), row("tcav", 1.0)];
        write_jsonl(&rows, &p).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), rows);
    }
}
