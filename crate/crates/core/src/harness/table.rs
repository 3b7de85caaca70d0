//! Comparison tables: rows are models, columns are metric × class.

use std::path::Path;

use crate::catalog::DiagnosisClass;
use crate::error::{Error, Result};
use crate::metrics::{AggregationMode, Metric, MetricSet, MetricsReport, ReportRow};

const CSV_HEADER: [&str; 7] = ["model", "class", "mode", "dice", "sensitivity", "specificity", "mcc"];

#[derive(Debug, Clone, PartialEq)]
pub struct TableOutput {
    pub markdown: String,
    /// Fold means, columns `model,class,mode,dice,sensitivity,specificity,mcc`.
    pub csv: String,
    /// Sample standard deviations across folds, same columns plus `folds`.
    pub dispersion_csv: String,
}

impl TableOutput {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("table.md", &self.markdown),
            ("metrics.csv", &self.csv),
            ("dispersion.csv", &self.dispersion_csv),
        ] {
            crate::weights::atomic_write(&dir.join(name), body.as_bytes())?;
        }
        Ok(())
    }
}

fn columns() -> impl Iterator<Item = (Metric, DiagnosisClass)> {
    Metric::TABLE_ORDER
        .into_iter()
        .flat_map(|m| DiagnosisClass::ALL.into_iter().map(move |c| (m, c)))
}

fn csv_rows(rows: &[ReportRow], pick: impl Fn(&ReportRow) -> MetricSet, with_folds: bool) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = CSV_HEADER.to_vec();
    if with_folds {
        header.push("folds");
    }
    let csv_err = |e: csv::Error| Error::Metrics(format!("csv encoding failed: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let m = pick(r);
        let mut rec = vec![
            r.model.clone(),
            r.class.short_name().to_string(),
            r.mode.as_str().to_string(),
            m.dice.to_string(),
            m.sensitivity.to_string(),
            m.specificity.to_string(),
            m.mcc.to_string(),
        ];
        if with_folds {
            rec.push(r.folds.to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Metrics(format!("csv encoding failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Markdown table for one aggregation mode, with the best mean per column in
/// bold, and CSV files for every row of the report.
pub fn emit_table(report: &MetricsReport, mode: AggregationMode) -> Result<TableOutput> {
    let models = report.models();
    let mut md = String::from("| Model |");
    let mut rule = String::from("|---|");
    for (m, c) in columns() {
        md.push_str(&format!(" {} {} |", m.title(), c.short_name()));
        rule.push_str("---:|");
    }
    md.push('\n');
    md.push_str(&rule);
    md.push('\n');

    let value = |model: &str, m: Metric, c: DiagnosisClass| {
        report.find(model, c, mode).map(|r| (r.mean.get(m), r.sd.get(m), r.folds))
    };
    let best: Vec<f64> = columns()
        .map(|(m, c)| {
            models
                .iter()
                .filter_map(|model| value(model, m, c).map(|v| v.0))
                .filter(|v| !v.is_nan())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    for model in &models {
        md.push_str(&format!("| {model} |"));
        for ((m, c), best) in columns().zip(&best) {
            let cell = match value(model, m, c) {
                None => "-".to_string(),
                Some((mean, _, _)) if mean.is_nan() => "n/a".to_string(),
                Some((mean, sd, folds)) => {
                    let num = if mean == *best {
                        format!("**{mean:.3}**")
                    } else {
                        format!("{mean:.3}")
                    };
                    if folds > 1 {
                        format!("{num} ± {sd:.3}")
                    } else {
                        num
                    }
                }
            };
            md.push_str(&format!(" {cell} |"));
        }
        md.push('\n');
    }
    Ok(TableOutput {
        markdown: md,
        csv: csv_rows(&report.rows, |r| r.mean, false)?,
        dispersion_csv: csv_rows(&report.rows, |r| r.sd, true)?,
    })
}

/// Parse a metrics CSV in the format written by [`emit_table`]. The `mode`
/// column may be omitted, in which case rows are read as micro-averaged.
/// Standard deviations are unknown and set to zero with a fold count of one.
pub fn read_metrics_csv(text: &str) -> Result<MetricsReport> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let headers = rd
        .headers()
        .map_err(|e| Error::Metrics(format!("bad metrics csv header: {e}")))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let need = |name: &str| col(name).ok_or_else(|| Error::Metrics(format!("metrics csv lacks a `{name}` column")));
    let (im, ic, id, ise, isp, imc) = (
        need("model")?,
        need("class")?,
        need("dice")?,
        need("sensitivity")?,
        need("specificity")?,
        need("mcc")?,
    );
    let imode = col("mode");
    let mut rows = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::Metrics(format!("metrics csv row {}: {e}", line + 2)))?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse()
                .map_err(|_| Error::Metrics(format!("metrics csv row {}: `{}` is not a number", line + 2, &rec[i])))
        };
        rows.push(ReportRow {
            model: rec[im].trim().to_string(),
            class: rec[ic].trim().parse()?,
            mode: match imode {
                Some(i) => rec[i].trim().parse()?,
                None => AggregationMode::Micro,
            },
            mean: MetricSet {
                dice: num(id)?,
                sensitivity: num(ise)?,
                specificity: num(isp)?,
                mcc: num(imc)?,
            },
            sd: MetricSet {
                dice: 0.0,
                sensitivity: 0.0,
                specificity: 0.0,
                mcc: 0.0,
            },
            folds: 1,
        });
    }
    Ok(MetricsReport { rows })
}
