//! Charts and summaries from step-log CSVs. SVG is written by hand.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::{format_sig, pareto_flags, read_step_logs, StepLog};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run: String,
    pub steps: usize,
    pub mean_cos_fr: f64,
    pub mean_cos_cf: f64,
    pub mean_cos_cr: f64,
    pub mean_conflict_fraction: f64,
    pub final_forget_loss: f64,
    pub final_retain_loss: f64,
    /// Last logged accuracies, if any step was evaluated.
    pub final_forget_acc: Option<f64>,
    pub final_retain_acc: Option<f64>,
    pub pareto: Option<bool>,
}

pub fn summarize(run: &str, logs: &[StepLog]) -> Result<RunSummary> {
    let last = logs
        .last()
        .ok_or_else(|| Error::input(format!("log {run:?} has no rows")))?;
    let n = logs.len() as f64;
    let mean = |f: fn(&StepLog) -> f64| logs.iter().map(f).sum::<f64>() / n;
    let last_acc = |f: fn(&StepLog) -> Option<f64>| logs.iter().rev().find_map(f);
    Ok(RunSummary {
        run: run.to_string(),
        steps: logs.len(),
        mean_cos_fr: mean(|l| l.cos_fr),
        mean_cos_cf: mean(|l| l.cos_cf),
        mean_cos_cr: mean(|l| l.cos_cr),
        mean_conflict_fraction: mean(|l| l.conflict_fraction),
        final_forget_loss: last.forget_loss,
        final_retain_loss: last.retain_loss,
        final_forget_acc: last_acc(|l| l.forget_acc),
        final_retain_acc: last_acc(|l| l.retain_acc),
        pareto: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutput {
    pub files: Vec<PathBuf>,
    pub summaries: Vec<RunSummary>,
}

/// Run names are file stems; repeated stems get a `-2`, `-3`, ... suffix.
pub fn run_names(paths: &[PathBuf]) -> Vec<String> {
    let mut names: Vec<String> = Vec::with_capacity(paths.len());
    for p in paths {
        let stem = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".to_string());
        let mut name = stem.clone();
        let mut k = 2;
        while names.contains(&name) {
            name = format!("{stem}-{k}");
            k += 1;
        }
        names.push(name);
    }
    names
}

/// Writes `<run>_loss.svg` and `<run>_cosine.svg` per log, `tradeoff.svg` for two or
/// more logs, and `summary.csv`.
pub fn write_report(logs: &[PathBuf], out: &Path) -> Result<ReportOutput> {
    if logs.is_empty() {
        return Err(Error::input("at least one log CSV is required"));
    }
    let runs = logs
        .iter()
        .map(read_step_logs)
        .collect::<Result<Vec<_>>>()?;
    let names = run_names(logs);
    let mut summaries = names
        .iter()
        .zip(&runs)
        .map(|(name, l)| summarize(name, l))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut files = Vec::new();
    let mut emit = |name: String, body: String| -> Result<()> {
        let path = out.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        files.push(path);
        Ok(())
    };
    for (name, l) in names.iter().zip(&runs) {
        emit(format!("{name}_loss.svg"), loss_chart(name, l))?;
        emit(format!("{name}_cosine.svg"), cosine_chart(name, l))?;
    }
    if runs.len() >= 2 {
        let scored: Vec<usize> = (0..summaries.len())
            .filter(|&i| summaries[i].final_forget_acc.is_some() && summaries[i].final_retain_acc.is_some())
            .collect();
        let points: Vec<(f64, f64)> = scored
            .iter()
            .map(|&i| (summaries[i].final_forget_acc.unwrap(), summaries[i].final_retain_acc.unwrap()))
            .collect();
        let flags = pareto_flags(&points);
        for (&i, &flag) in scored.iter().zip(&flags) {
            summaries[i].pareto = Some(flag);
        }
        let labelled: Vec<(&str, f64, f64, bool)> = scored
            .iter()
            .zip(&points)
            .zip(&flags)
            .map(|((&i, &(f, r)), &flag)| (summaries[i].run.as_str(), f, r, flag))
            .collect();
        emit("tradeoff.svg".to_string(), tradeoff_chart(&labelled))?;
    }
    emit("summary.csv".to_string(), summary_csv(&summaries))?;
    Ok(ReportOutput { files, summaries })
}

pub fn summary_csv(summaries: &[RunSummary]) -> String {
    let mut s = String::from(
        "run,steps,forget_retain,comb_forget,comb_retain,conflict_fraction,final_forget_loss,final_retain_loss,final_forget_acc,final_retain_acc,pareto\n",
    );
    let opt = |v: Option<f64>| v.map(|x| format_sig(x, 12)).unwrap_or_default();
    for r in summaries {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&r.run),
            r.steps,
            format_sig(r.mean_cos_fr, 12),
            format_sig(r.mean_cos_cf, 12),
            format_sig(r.mean_cos_cr, 12),
            format_sig(r.mean_conflict_fraction, 12),
            format_sig(r.final_forget_loss, 12),
            format_sig(r.final_retain_loss, 12),
            opt(r.final_forget_acc),
            opt(r.final_retain_acc),
            r.pareto.map(|b| b.to_string()).unwrap_or_default(),
        );
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Axis range padded so flat series still get a visible band.
fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }

    fn open(&self, title: &str, x_label: &str, y_label: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            escape(title)
        );
        let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
        let _ = writeln!(
            s,
            r#"<path d="M{x0} {y0} L{x0} {y1} L{x1} {y1}" fill="none" stroke="black"/>"#
        );
        for k in 0..=4 {
            let t = k as f64 / 4.0;
            let xv = self.x.0 + t * (self.x.1 - self.x.0);
            let yv = self.y.0 + t * (self.y.1 - self.y.0);
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                self.px(xv),
                y1 + 16.0,
                format_sig(xv, 3)
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                x0 - 6.0,
                self.py(yv) + 4.0,
                format_sig(yv, 3)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            WIDTH / 2.0,
            HEIGHT - 12.0,
            escape(x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(y_label)
        );
        s
    }

    fn polyline(&self, s: &mut String, points: &[(f64, f64)], color: &str) {
        let pts: Vec<String> = points
            .iter()
            .filter(|(_, y)| y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
    }
}

fn legend(s: &mut String, entries: &[(&str, &str)]) {
    for (i, (label, color)) in entries.iter().enumerate() {
        let y = MARGIN + 4.0 + 16.0 * i as f64;
        let x = WIDTH - MARGIN - 130.0;
        let _ = writeln!(
            s,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#,
            x + 18.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, x + 24.0, y + 4.0, escape(label));
    }
}

fn series_chart(title: &str, y_label: &str, logs: &[StepLog], series: &[(&str, fn(&StepLog) -> f64)]) -> String {
    let xs = padded_range(logs.iter().map(|l| l.step as f64));
    let x = if logs.len() > 1 {
        (logs[0].step as f64, logs[logs.len() - 1].step as f64)
    } else {
        xs
    };
    let y = padded_range(series.iter().flat_map(|(_, f)| logs.iter().map(f)));
    let frame = Frame { x, y };
    let mut s = frame.open(title, "step", y_label);
    let mut entries = Vec::new();
    for (i, (label, f)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = logs.iter().map(|l| (l.step as f64, f(l))).collect();
        frame.polyline(&mut s, &pts, color);
        entries.push((*label, color));
    }
    legend(&mut s, &entries);
    s.push_str("</svg>\n");
    s
}

pub fn loss_chart(run: &str, logs: &[StepLog]) -> String {
    series_chart(
        &format!("{run}: loss dynamics"),
        "loss",
        logs,
        &[
            ("retain loss", |l| l.retain_loss),
            ("forget loss", |l| l.forget_loss),
        ],
    )
}

pub fn cosine_chart(run: &str, logs: &[StepLog]) -> String {
    series_chart(
        &format!("{run}: gradient cosines"),
        "cosine",
        logs,
        &[
            ("forget-retain", |l| l.cos_fr),
            ("comb-forget", |l| l.cos_cf),
            ("comb-retain", |l| l.cos_cr),
        ],
    )
}

/// Scatter of final (forget, retain) accuracy; frontier points are filled and joined.
pub fn tradeoff_chart(points: &[(&str, f64, f64, bool)]) -> String {
    let frame = Frame {
        x: padded_range(points.iter().map(|p| p.1).chain([0.0, 1.0])),
        y: padded_range(points.iter().map(|p| p.2).chain([0.0, 1.0])),
    };
    let mut s = frame.open("forget/retain trade-off", "forget accuracy (lower is better)", "retain accuracy");
    let mut front: Vec<(f64, f64)> = points.iter().filter(|p| p.3).map(|p| (p.1, p.2)).collect();
    front.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    if front.len() > 1 {
        frame.polyline(&mut s, &front, "#888888");
    }
    for (i, (label, f, r, on_front)) in points.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let fill = if *on_front { color } else { "white" };
        let (cx, cy) = (frame.px(*f), frame.py(*r));
        let _ = writeln!(
            s,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="5" fill="{fill}" stroke="{color}" stroke-width="2" data-pareto="{on_front}"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            cx + 8.0,
            cy - 6.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::write_step_logs;

    fn log(step: usize, cos: f64, acc: Option<(f64, f64)>) -> StepLog {
        StepLog {
            step,
            forget_loss: 2.0 + step as f64,
            retain_loss: 1.0 / step as f64,
            cos_fr: -cos,
            cos_cf: cos / 2.0,
            cos_cr: cos,
            conflict_fraction: 0.5,
            forget_acc: acc.map(|a| a.0),
            retain_acc: acc.map(|a| a.1),
        }
    }

    #[test]
    fn one_log_gives_two_charts_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sago.csv");
        write_step_logs(&p, &[log(1, 0.2, None), log(2, 0.4, Some((0.1, 0.9)))]).unwrap();
        let out = dir.path().join("report");
        let r = write_report(&[p], &out).unwrap();
        assert_eq!(r.files.len(), 3);
        assert!(out.join("sago_loss.svg").exists());
        assert!(out.join("sago_cosine.svg").exists());
        assert!(!out.join("tradeoff.svg").exists());
        let s = &r.summaries[0];
        assert!((s.mean_cos_cr - 0.3).abs() < 1e-12);
        assert_eq!(s.final_retain_acc, Some(0.9));
        let svg = fs::read_to_string(out.join("sago_loss.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn three_logs_give_scatter_with_frontier() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for (name, acc) in [("naive", (0.1, 0.5)), ("pcgrad", (0.1, 0.7)), ("sago", (0.05, 0.6))] {
            let p = dir.path().join(format!("{name}.csv"));
            write_step_logs(&p, &[log(1, 0.3, Some(acc))]).unwrap();
            paths.push(p);
        }
        let out = dir.path().join("r");
        let r = write_report(&paths, &out).unwrap();
        let svg = fs::read_to_string(out.join("tradeoff.svg")).unwrap();
        assert_eq!(svg.matches("<circle").count(), 3);
        assert_eq!(svg.matches(r#"data-pareto="true""#).count(), 2);
        let flags: Vec<_> = r.summaries.iter().map(|s| s.pareto).collect();
        assert_eq!(flags, vec![Some(false), Some(true), Some(true)]);
        let csv = fs::read_to_string(out.join("summary.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn malformed_log_reports_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        let good = dir.path().join("good.csv");
        write_step_logs(&good, &[log(1, 0.3, None)]).unwrap();
        let mut text = fs::read_to_string(&good).unwrap();
        text.push_str("2,oops,1,1,1,1,1,,\n");
        fs::write(&p, text).unwrap();
        let err = write_report(&[p.clone()], &dir.path().join("r")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.csv:3"), "{msg}");
        assert!(write_report(&[], dir.path()).is_err());
    }

    #[test]
    fn duplicate_stems_are_disambiguated() {
        let names = run_names(&[PathBuf::from("a/log.csv"), PathBuf::from("b/log.csv")]);
        assert_eq!(names, vec!["log".to_string(), "log-2".to_string()]);
    }
}
