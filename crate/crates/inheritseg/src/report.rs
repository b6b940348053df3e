//! Report tables: one CSV for any number of reports and a fixed-width text
//! table with Dice and ASSD columns per class.

use std::fmt::Write as _;
use std::path::Path;

use inheritseg_core::metrics::{ClassMetrics, MetricReport};

use crate::error::{HarnessError, Result};

pub const CSV_HEADER: [&str; 9] = ["experiment", "unseen_set", "row", "class", "name", "role", "dice", "assd", "assd_undefined"];

/// `fully supervised` for an empty unseen set, else the class names.
pub fn unseen_label(report: &MetricReport) -> String {
    if report.fully_supervised() {
        return "fully supervised".into();
    }
    let names: Vec<String> = report
        .unseen
        .iter()
        .map(|&c| report.class(c).map(|m| m.name.clone()).unwrap_or_else(|| c.to_string()))
        .collect();
    format!("unseen: {}", names.join("+"))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn role(m: &ClassMetrics) -> &'static str {
    if m.unseen {
        "unseen"
    } else {
        "seen"
    }
}

/// One row per class, then seen, unseen and overall mean rows per report.
pub fn report_rows(report: &MetricReport) -> Vec<[String; 9]> {
    let exp = report.tag.clone();
    let set = unseen_label(report);
    let mut rows: Vec<[String; 9]> = report
        .classes
        .iter()
        .map(|m| {
            [
                exp.clone(),
                set.clone(),
                "class".into(),
                m.class.to_string(),
                m.name.clone(),
                role(m).into(),
                m.dice.to_string(),
                opt(m.assd),
                m.assd_undefined.to_string(),
            ]
        })
        .collect();
    let mut agg = |row: &str, dice: Option<f64>, assd: Option<f64>| {
        rows.push([exp.clone(), set.clone(), row.into(), String::new(), String::new(), String::new(), opt(dice), opt(assd), String::new()]);
    };
    agg("seen_mean", report.seen_dice(), report.seen_assd());
    agg("unseen_mean", report.unseen_dice(), report.unseen_assd());
    agg("mean", Some(report.mean_dice()), report.mean_assd());
    rows
}

pub fn write_report_csv(path: &Path, reports: &[&MetricReport]) -> Result<()> {
    let fail = |e: csv::Error| HarnessError::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    w.write_record(CSV_HEADER).map_err(fail)?;
    for r in reports {
        for row in report_rows(r) {
            w.write_record(&row).map_err(fail)?;
        }
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Reads the per-class rows of a file written by [`write_report_csv`] back
/// into reports, in file order. Aggregate rows are recomputed, not read;
/// the image count is not stored and comes back as 0.
pub fn read_report_csv(path: &Path) -> Result<Vec<MetricReport>> {
    let fail = |reason: String| HarnessError::format(path, reason);
    let mut r = csv::Reader::from_path(path).map_err(|e| fail(e.to_string()))?;
    let header: Vec<String> = r.headers().map_err(|e| fail(e.to_string()))?.iter().map(String::from).collect();
    if header != CSV_HEADER {
        return Err(fail(format!("unexpected header {header:?}")));
    }
    let mut out: Vec<MetricReport> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| fail(e.to_string()))?;
        if &rec[2] != "class" {
            continue;
        }
        let num = |i: usize| -> Result<f64> { rec[i].parse().map_err(|_| fail(format!("bad number `{}`", &rec[i]))) };
        let class: usize = rec[3].parse().map_err(|_| fail(format!("bad class `{}`", &rec[3])))?;
        let unseen = &rec[5] == "unseen";
        let m = ClassMetrics {
            class,
            name: rec[4].to_string(),
            unseen,
            dice: num(6)?,
            assd: if rec[7].is_empty() { None } else { Some(num(7)?) },
            assd_undefined: rec[8].parse().map_err(|_| fail(format!("bad count `{}`", &rec[8])))?,
        };
        let tag = &rec[0];
        if out.last().map_or(true, |last| last.tag != tag) {
            out.push(MetricReport {
                tag: tag.to_string(),
                unseen: Vec::new(),
                classes: Vec::new(),
                images: 0,
            });
        }
        let report = out.last_mut().expect("just pushed");
        if unseen {
            report.unseen.push(class);
        }
        report.classes.push(m);
    }
    Ok(out)
}

/// Fixed-width table: Dice (%) per class and mean, then ASSD per class and
/// mean. Unseen classes carry a `*`; undefined distances print as `-`.
pub fn format_table(title: &str, reports: &[&MetricReport]) -> String {
    let mut out = String::new();
    let Some(first) = reports.first() else {
        return out;
    };
    let names: Vec<&str> = first.classes.iter().map(|m| m.name.as_str()).collect();
    let label_w = reports.iter().map(|r| r.tag.len()).max().unwrap_or(0).max(10);
    let set_w = reports.iter().map(|r| unseen_label(r).len()).max().unwrap_or(0).max(10);
    let _ = writeln!(out, "{title}");
    let mut header = format!("{:<label_w$}  {:<set_w$}  |", "experiment", "classes");
    for part in ["Dice %", "ASSD"] {
        for n in &names {
            let _ = write!(header, " {:>9}", format!("{part}:{}", short(n)));
        }
        let _ = write!(header, " {:>9} |", format!("{part}:mean"));
    }
    let _ = writeln!(out, "{header}");
    let _ = writeln!(out, "{}", "-".repeat(header.len()));
    for r in reports {
        let mut line = format!("{:<label_w$}  {:<set_w$}  |", r.tag, unseen_label(r));
        for m in &r.classes {
            let mark = if m.unseen { "*" } else { "" };
            let _ = write!(line, " {:>9}", format!("{:.2}{mark}", 100.0 * m.dice));
        }
        let _ = write!(line, " {:>9} |", format!("{:.2}", 100.0 * r.mean_dice()));
        for m in &r.classes {
            let _ = write!(line, " {:>9}", m.assd.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()));
        }
        let _ = write!(line, " {:>9} |", r.mean_assd().map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()));
        let _ = writeln!(out, "{line}");
    }
    out
}

fn short(name: &str) -> String {
    name.chars().take(6).collect()
}

pub fn write_table(path: &Path, title: &str, reports: &[&MetricReport]) -> Result<()> {
    std::fs::write(path, format_table(title, reports)).map_err(|e| HarnessError::io(path, e))
}

/// Per-class results of the runs where each class was the single unseen
/// class, gathered into one report (every class marked unseen).
pub fn collective_unseen(tag: &str, single_unseen_runs: &[&MetricReport]) -> Option<MetricReport> {
    let first = single_unseen_runs.first()?;
    let mut classes = Vec::new();
    for m in &first.classes {
        let run = single_unseen_runs.iter().find(|r| r.unseen == [m.class])?;
        let mut c = run.class(m.class)?.clone();
        c.unseen = true;
        classes.push(c);
    }
    Some(MetricReport {
        tag: tag.into(),
        unseen: classes.iter().map(|c| c.class).collect(),
        classes,
        images: first.images,
    })
}
