use std::fmt::Write as _;
use std::path::Path;

use super::{ClassMetrics, EvalError, MetricsReport, RankingReport};

/// Metrics CSV: a `method,seed,ep_used,accuracy,macro_f1,reject_rate` block,
/// a blank line, then one `class,precision,recall,f1` row per class.
pub fn metrics_csv(method: &str, report: &MetricsReport) -> String {
    let mut s = String::from("method,seed,ep_used,accuracy,macro_f1,reject_rate\n");
    writeln!(
        s,
        "{method},{},{},{:?},{:?},{:?}",
        report.seed, report.ep_used, report.accuracy, report.macro_f1, report.reject_rate
    )
    .expect("string");
    s.push_str("\nclass,precision,recall,f1\n");
    for (c, m) in report.per_class.iter().enumerate() {
        writeln!(s, "{c},{:?},{:?},{:?}", m.precision, m.recall, m.f1).expect("string");
    }
    s
}

/// Parses [`metrics_csv`] output back into its method name and report.
/// Supports are not part of the file and come back as 0.
pub fn parse_metrics_csv(text: &str) -> Result<(String, MetricsReport), EvalError> {
    let bad = |line: usize, msg: &str| EvalError::Parse(format!("line {line}: {msg}"));
    let lines: Vec<&str> = text.lines().collect();
    if lines.first() != Some(&"method,seed,ep_used,accuracy,macro_f1,reject_rate") {
        return Err(bad(1, "missing metrics header"));
    }
    let f: Vec<&str> = lines.get(1).ok_or_else(|| bad(2, "missing summary row"))?.split(',').collect();
    if f.len() != 6 {
        return Err(bad(2, "expected 6 fields"));
    }
    let num = |line: usize, s: &str| s.parse::<f64>().map_err(|_| bad(line, "bad number"));
    let method = f[0].to_string();
    let seed = f[1].parse().map_err(|_| bad(2, "bad seed"))?;
    let ep_used = f[2].parse().map_err(|_| bad(2, "bad ep_used"))?;
    let (accuracy, macro_f1, reject_rate) = (num(2, f[3])?, num(2, f[4])?, num(2, f[5])?);
    if lines.get(3) != Some(&"class,precision,recall,f1") {
        return Err(bad(4, "missing per-class header"));
    }
    let mut per_class = Vec::new();
    for (i, l) in lines.iter().enumerate().skip(4) {
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 4 || f[0].parse::<usize>() != Ok(per_class.len()) {
            return Err(bad(i + 1, "bad per-class row"));
        }
        per_class.push(ClassMetrics {
            precision: num(i + 1, f[1])?,
            recall: num(i + 1, f[2])?,
            f1: num(i + 1, f[3])?,
            support: 0,
        });
    }
    Ok((method, MetricsReport { accuracy, macro_f1, per_class, n_samples: 0, reject_rate, ep_used, seed }))
}

/// Ranking CSV: `pair_id,pos_prob,neg_prob,strict_win`.
pub fn ranking_csv(report: &RankingReport) -> String {
    let mut s = String::from("pair_id,pos_prob,neg_prob,strict_win\n");
    for (i, ((p, n), w)) in report.pos_probs.iter().zip(&report.neg_probs).zip(report.strict_wins()).enumerate() {
        writeln!(s, "{i},{p:?},{n:?},{}", u8::from(w)).expect("string");
    }
    s
}

/// Parses [`ranking_csv`] output into `(pos, neg)` probabilities.
pub fn parse_ranking_csv(text: &str) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    let mut lines = text.lines();
    if lines.next() != Some("pair_id,pos_prob,neg_prob,strict_win") {
        return Err(EvalError::Parse("line 1: missing ranking header".into()));
    }
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (i, l) in lines.enumerate() {
        let f: Vec<&str> = l.split(',').collect();
        let parsed = (f.len() == 4).then(|| (f[1].parse::<f64>(), f[2].parse::<f64>()));
        match parsed {
            Some((Ok(p), Ok(n))) => {
                pos.push(p);
                neg.push(n);
            }
            _ => return Err(EvalError::Parse(format!("line {}: bad ranking row", i + 2))),
        }
    }
    Ok((pos, neg))
}

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 200.0;
const MARGIN: f64 = 30.0;

/// Overlaid positive (blue) and negative (orange) densities, one panel per
/// labelled report, side by side. Empty bins are zero-height bars.
pub fn ranking_svg(panels: &[(&str, &RankingReport)]) -> String {
    let width = MARGIN + panels.len() as f64 * (PANEL_W + MARGIN);
    let height = PANEL_H + 2.0 * MARGIN;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    );
    for (k, (label, r)) in panels.iter().enumerate() {
        let x0 = MARGIN + k as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN;
        writeln!(s, "<g id=\"panel-{k}\">").expect("string");
        writeln!(s, "<text x=\"{x0}\" y=\"{}\" font-size=\"12\">{}</text>", y0 - 8.0, escape(label)).expect("string");
        writeln!(
            s,
            "<rect x=\"{x0}\" y=\"{y0}\" width=\"{PANEL_W}\" height=\"{PANEL_H}\" fill=\"none\" stroke=\"black\"/>"
        )
        .expect("string");
        let top = r.pos_density.iter().chain(&r.neg_density).cloned().fold(0.0, f64::max).max(1e-12);
        let bins = r.pos_density.len();
        let bw = PANEL_W / bins as f64;
        for (class, dens, color) in [("pos", &r.pos_density, "#1f77b4"), ("neg", &r.neg_density, "#ff7f0e")] {
            for (b, &d) in dens.iter().enumerate() {
                let h = d / top * PANEL_H;
                writeln!(
                    s,
                    "<rect class=\"{class}\" x=\"{:.3}\" y=\"{:.3}\" width=\"{bw:.3}\" height=\"{h:.3}\" fill=\"{color}\" fill-opacity=\"0.5\"/>",
                    x0 + b as f64 * bw,
                    y0 + PANEL_H - h
                )
                .expect("string");
            }
        }
        writeln!(
            s,
            "<text x=\"{x0}\" y=\"{}\" font-size=\"10\">ranking fraction {:.3}</text>",
            y0 + PANEL_H + 16.0,
            r.ranking_fraction
        )
        .expect("string");
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_report(path: &Path, contents: &str) -> Result<(), EvalError> {
    std::fs::write(path, contents).map_err(|e| EvalError::Io { path: path.to_path_buf(), source: e })
}
