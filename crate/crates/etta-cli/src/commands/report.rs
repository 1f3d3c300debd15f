//! `etta report`: aggregates one or more adaptation run directories into a
//! method-by-corruption accuracy table, a long-format CSV, and an
//! accuracy-versus-compute scatter (CSV plus a self-contained SVG).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use etta::{Error, Result};

use super::adapt::SUMMARY_HEADER;

#[derive(Debug, Clone)]
struct SummaryRow {
    label: String,
    corruption: String,
    severity: u8,
    accuracy: f64,
    mean_entropy: f64,
    r: usize,
    flops_ratio: f64,
}

fn parse_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::State(format!("cannot read {}: {e}; run `etta adapt` first", path.display())))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != SUMMARY_HEADER {
        return Err(Error::Format(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(Error::Format(format!(
                "{} line {}: expected 12 fields, found {}",
                path.display(),
                i + 2,
                fields.len()
            )));
        }
        let num = |idx: usize| -> Result<f64> {
            fields[idx].parse::<f64>().map_err(|_| {
                Error::Format(format!(
                    "{} line {}: field {} ({:?}) is not a number",
                    path.display(),
                    i + 2,
                    idx,
                    fields[idx]
                ))
            })
        };
        rows.push(SummaryRow {
            label: fields[0].to_string(),
            corruption: fields[1].to_string(),
            severity: num(2)? as u8,
            accuracy: num(5)?,
            mean_entropy: num(6)?,
            r: num(10)? as usize,
            flops_ratio: num(11)?,
        });
    }
    Ok(rows)
}

/// Ordered-by-first-appearance grouping key list.
fn ordered_keys<'a>(rows: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut keys: Vec<String> = Vec::new();
    for k in rows {
        if !keys.iter().any(|existing| existing == k) {
            keys.push(k.to_string());
        }
    }
    keys
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

struct LabelSummary {
    label: String,
    per_corruption: Vec<Option<f64>>,
    mean_accuracy: f64,
    r: usize,
    flops_ratio: f64,
}

fn aggregate(rows: &[SummaryRow], corruptions: &[String]) -> Vec<LabelSummary> {
    let labels = ordered_keys(rows.iter().map(|r| r.label.as_str()));
    labels
        .into_iter()
        .map(|label| {
            let own: Vec<&SummaryRow> = rows.iter().filter(|r| r.label == label).collect();
            let per_corruption: Vec<Option<f64>> = corruptions
                .iter()
                .map(|c| {
                    let acc: Vec<f64> = own
                        .iter()
                        .filter(|r| &r.corruption == c)
                        .map(|r| r.accuracy)
                        .collect();
                    if acc.is_empty() { None } else { Some(mean(&acc)) }
                })
                .collect();
            let present: Vec<f64> = per_corruption.iter().flatten().copied().collect();
            let ratios: Vec<f64> = own.iter().map(|r| r.flops_ratio).collect();
            LabelSummary {
                label,
                mean_accuracy: mean(&present),
                r: own[0].r,
                flops_ratio: mean(&ratios),
                per_corruption,
            }
        })
        .collect()
}

fn render_table(summaries: &[LabelSummary], corruptions: &[String]) -> String {
    let label_w = summaries
        .iter()
        .map(|s| s.label.len())
        .chain(["method".len()].into_iter())
        .max()
        .unwrap_or(6);
    let mut out = String::new();
    let mut header = format!("{:<label_w$}", "method");
    for c in corruptions {
        let _ = write!(header, "  {:>w$}", c, w = c.len().max(8));
    }
    header.push_str("      mean     r  flops_ratio");
    let rule = "-".repeat(header.len());
    out.push_str(&header);
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    for s in summaries {
        let _ = write!(out, "{:<label_w$}", s.label);
        for (c, acc) in corruptions.iter().zip(&s.per_corruption) {
            let w = c.len().max(8);
            match acc {
                Some(a) => {
                    let _ = write!(out, "  {:>w$.4}", a);
                }
                None => {
                    let _ = write!(out, "  {:>w$}", "-");
                }
            }
        }
        let _ = writeln!(out, "  {:>8.4}  {:>4}  {:>11.4}", s.mean_accuracy, s.r, s.flops_ratio);
    }
    out
}

fn render_scatter_svg(summaries: &[LabelSummary]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 440.0;
    const ML: f64 = 70.0; // left margin
    const MR: f64 = 25.0;
    const MT: f64 = 35.0;
    const MB: f64 = 55.0;
    let xs: Vec<f64> = summaries.iter().map(|s| s.flops_ratio).collect();
    let ys: Vec<f64> = summaries.iter().map(|s| s.mean_accuracy).collect();
    let pad = |lo: f64, hi: f64| {
        let span = (hi - lo).max(1e-3);
        (lo - 0.1 * span, hi + 0.1 * span)
    };
    let (x_lo, x_hi) = pad(
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let (y_lo, y_hi) = pad(
        ys.iter().cloned().fold(f64::INFINITY, f64::min),
        ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let sx = |x: f64| ML + (x - x_lo) / (x_hi - x_lo) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - y_lo) / (y_hi - y_lo) * (H - MT - MB);

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">\n"
    );
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">accuracy vs compute</text>\n",
        W / 2.0
    );
    // axes
    let _ = write!(
        svg,
        "<line x1=\"{ML}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR,
        H - MB
    );
    let _ = write!(
        svg,
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        H - MB
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = x_lo + t * (x_hi - x_lo);
        let yv = y_lo + t * (y_hi - y_lo);
        let xp = sx(xv);
        let yp = sy(yv);
        let _ = write!(
            svg,
            "<line x1=\"{xp:.1}\" y1=\"{:.1}\" x2=\"{xp:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
             <text x=\"{xp:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{xv:.3}</text>\n",
            H - MB,
            H - MB + 6.0,
            H - MB + 22.0
        );
        let _ = write!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{yp:.1}\" x2=\"{ML}\" y2=\"{yp:.1}\" stroke=\"black\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{yv:.3}</text>\n",
            ML - 6.0,
            ML - 10.0,
            yp + 4.0
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">FLOPs ratio vs unmerged baseline</text>\n",
        ML + (W - ML - MR) / 2.0,
        H - 12.0
    );
    let _ = write!(
        svg,
        "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">mean accuracy</text>\n",
        MT + (H - MT - MB) / 2.0,
        MT + (H - MT - MB) / 2.0
    );
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    for (i, s) in summaries.iter().enumerate() {
        let xp = sx(s.flops_ratio);
        let yp = sy(s.mean_accuracy);
        let color = COLORS[i % COLORS.len()];
        let _ = write!(
            svg,
            "<circle cx=\"{xp:.1}\" cy=\"{yp:.1}\" r=\"5\" fill=\"{color}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{}</text>\n",
            xp + 8.0,
            yp + 4.0,
            s.label
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn run(run_dirs: &[PathBuf], out_dir: &Path) -> Result<()> {
    if run_dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut rows = Vec::new();
    for dir in run_dirs {
        rows.extend(parse_summary(&dir.join("summary.csv"))?);
    }
    if rows.is_empty() {
        return Err(Error::Data("run directories contained no summary rows".into()));
    }
    let corruptions = ordered_keys(rows.iter().map(|r| r.corruption.as_str()));
    let summaries = aggregate(&rows, &corruptions);

    let table = render_table(&summaries, &corruptions);
    print!("{table}");

    let mut long = String::from("label,corruption,severity,accuracy,mean_entropy,flops_ratio\n");
    for r in &rows {
        let _ = writeln!(
            long,
            "{},{},{},{},{},{}",
            r.label, r.corruption, r.severity, r.accuracy, r.mean_entropy, r.flops_ratio
        );
    }
    let mut scatter = String::from("label,flops_ratio,mean_accuracy\n");
    for s in &summaries {
        let _ = writeln!(scatter, "{},{},{}", s.label, s.flops_ratio, s.mean_accuracy);
    }

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("table.txt"), &table)?;
    std::fs::write(out_dir.join("rows.csv"), long)?;
    std::fs::write(out_dir.join("scatter.csv"), scatter)?;
    std::fs::write(out_dir.join("scatter.svg"), render_scatter_svg(&summaries))?;
    println!("report written to {}", out_dir.display());
    Ok(())
}
