//! Plain-text tables, CSV and SVG renderings of an evaluation.

use std::fmt::Write as _;

use crate::metrics::{Ratio, RocCurve};
use crate::pipeline::{
    EnsembleTables, Evaluation, LocalizationColumn, MetricRow, PointEvaluation, SideStats,
};

/// Left-aligned first column, right-aligned rest, two spaces apart.
fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, cell) in width.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &mut dyn Iterator<Item = &str>| {
        let mut s = String::new();
        for (i, cell) in cells.enumerate().take(cols) {
            if i == 0 {
                let _ = write!(s, "{cell:<w$}", w = width[0]);
            } else {
                let _ = write!(s, "  {cell:>w$}", w = width[i]);
            }
        }
        out.push_str(s.trim_end());
        out.push('\n');
    };
    line(&mut out, &mut header.iter().copied());
    let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
    line(&mut out, &mut rule.iter().map(String::as_str));
    for r in rows {
        line(&mut out, &mut r.iter().map(String::as_str));
    }
    out
}

fn ratio(r: &Ratio) -> String {
    if r.degenerate {
        "n/a".into()
    } else {
        format!("{:.3}", r.value)
    }
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.digits$}"))
}

fn metric_rows(rows: &[MetricRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            let c = &r.confusion;
            vec![
                r.name.clone(),
                c.tp.to_string(),
                c.fn_.to_string(),
                c.tn.to_string(),
                c.fp.to_string(),
                ratio(&r.ppv),
                ratio(&r.npv),
                ratio(&r.recall),
                ratio(&r.f1),
            ]
        })
        .collect()
}

const METRIC_HEADER: [&str; 9] = ["", "TP", "FN", "TN", "FP", "PPV", "NPV", "recall", "F1"];

pub fn ensemble_text(t: &EnsembleTables) -> String {
    let mut out = format!("Naive scan classification ({} test scans)\n\n", t.scans);
    out += &table(&METRIC_HEADER, &metric_rows(&t.scan_level));
    out += "\nSlice classification inside the slices of interest\n\n";
    out += &table(&METRIC_HEADER, &metric_rows(&t.slice_level));
    out
}

fn side_cells(s: &SideStats) -> [String; 3] {
    [s.count.to_string(), opt(s.mean_iou, 3), opt(s.mean_delta, 2)]
}

fn localization_rows(cols: &[LocalizationColumn]) -> Vec<Vec<String>> {
    cols.iter()
        .map(|c| {
            let mut row = vec![
                c.name.clone(),
                fmt_threshold(c.threshold),
                c.eval_base.to_string(),
            ];
            row.extend(side_cells(&c.left));
            row.extend(side_cells(&c.right));
            row
        })
        .collect()
}

fn fmt_threshold(t: f64) -> String {
    if t.is_finite() {
        format!("{t:.3}")
    } else {
        "inf".into()
    }
}

fn point_rows(points: &[PointEvaluation]) -> Vec<Vec<String>> {
    let mut rows = metric_rows(&points.iter().map(|p| p.metrics.clone()).collect::<Vec<_>>());
    for (row, p) in rows.iter_mut().zip(points) {
        row.insert(1, fmt_threshold(p.threshold));
        row.insert(2, format!("{:?}", p.source).to_lowercase());
    }
    rows
}

pub fn render_text(e: &Evaluation) -> String {
    let mut out = String::new();
    let s = &e.split;
    let _ = writeln!(
        out,
        "Dataset: {} scans, {} abnormal (prevalence {:.3})\n  train {} ({} abnormal), test {} ({} abnormal)\n",
        s.scans, s.abnormal, s.prevalence, s.train, s.train_abnormal, s.test, s.test_abnormal
    );

    let soi = &e.soi;
    out += "Slices of interest\n\n";
    out += &table(
        &["", "value"],
        &[
            vec!["scans with a segment".into(), format!("{}/{}", soi.with_segment, soi.scans)],
            vec!["covering the annotations".into(), format!("{}/{}", soi.covering, soi.evaluated)],
            vec!["mean IoU".into(), opt(soi.mean_iou, 3)],
            vec!["mean left margin".into(), opt(soi.mean_left_delta, 3)],
            vec!["mean right margin".into(), opt(soi.mean_right_delta, 3)],
            vec!["mean segment fraction".into(), opt(soi.mean_segment_fraction, 3)],
        ],
    );
    out.push('\n');

    out += &ensemble_text(&e.ensemble);
    out.push('\n');

    out += "Graph classifier on the test split\n\n";
    if e.classifier.single_class {
        out += "test split holds a single class; AUC and ROC are undefined\n";
    } else {
        let _ = writeln!(out, "AUC {}", opt(e.classifier.auc, 3));
    }
    let _ = writeln!(out, "majority-vote baseline AUC {}\n", opt(e.baseline.auc, 3));
    let mut header = vec!["point", "threshold", "source"];
    header.extend_from_slice(&METRIC_HEADER[1..]);
    out += &table(&header, &point_rows(&e.classifier.points));
    out.push('\n');

    out += "Majority-vote baseline by minimum run length\n\n";
    let mut header = vec!["s_min"];
    header.extend_from_slice(&METRIC_HEADER[1..]);
    out += &table(&header, &metric_rows(&e.baseline.sweep));
    out.push('\n');

    out += "Localization on flagged abnormal scans\n\n";
    out += &table(
        &[
            "point", "threshold", "scans", "L n", "L IoU", "L dist", "R n", "R IoU", "R dist",
        ],
        &localization_rows(&e.localization),
    );
    out
}

pub fn roc_csv(roc: &RocCurve) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in &roc.points {
        let th = if p.threshold.is_finite() {
            p.threshold.to_string()
        } else {
            "inf".into()
        };
        let _ = writeln!(out, "{th},{},{}", p.fpr, p.tpr);
    }
    out
}

/// Square ROC plot with the chance diagonal and one marker per point.
pub fn roc_svg(roc: &RocCurve, points: &[PointEvaluation]) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 50.0;
    let x = |fpr: f64| PAD + fpr * SIZE;
    let y = |tpr: f64| PAD + (1.0 - tpr) * SIZE;
    let total = SIZE + 2.0 * PAD;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        out,
        r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 4"/>"##,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{v:.2}</text>"#,
            x(v),
            PAD + SIZE + 18.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#,
            PAD - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">false positive rate</text>"#,
        PAD + SIZE / 2.0,
        total - 8.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">true positive rate</text>"#,
        PAD + SIZE / 2.0,
        PAD + SIZE / 2.0
    );
    let path: Vec<String> = roc
        .points
        .iter()
        .map(|p| format!("{:.2},{:.2}", x(p.fpr), y(p.tpr)))
        .collect();
    let _ = writeln!(
        out,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        path.join(" ")
    );
    for p in points {
        let c = &p.metrics.confusion;
        let (Some(tpr), Some(fpr)) = (
            (c.positives() > 0).then(|| c.tp as f64 / c.positives() as f64),
            (c.negatives() > 0).then(|| c.fp as f64 / c.negatives() as f64),
        ) else {
            continue;
        };
        let _ = writeln!(
            out,
            r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="#d62728"/><text x="{:.2}" y="{:.2}">{}</text>"##,
            x(fpr),
            y(tpr),
            x(fpr) + 6.0,
            y(tpr) - 6.0,
            xml_escape(&p.metrics.name)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="end">AUC {:.3}</text>"#,
        PAD + SIZE - 8.0,
        PAD + SIZE - 8.0,
        roc.auc
    );
    out += "</svg>\n";
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
