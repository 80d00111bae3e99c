use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::analysis::{Analysis, EstimateRow, ALL, GRADCAM_LABELS, GRADCAM_PAIRS, PROB_PAIRS};
use crate::error::Result;
use crate::lexicon::WordType;
use crate::util::write_atomic;

/// Published unique-label ratios per model and word type.
pub const REFERENCE_UNIQUENESS: [(&str, WordType, f64); 8] = [
    ("resnet50", WordType::Original, 0.667),
    ("resnet50", WordType::Adjective, 0.283),
    ("resnet50", WordType::Nielsen, 0.328),
    ("resnet50", WordType::Alper, 0.436),
    ("vit", WordType::Original, 0.792),
    ("vit", WordType::Adjective, 0.325),
    ("vit", WordType::Nielsen, 0.333),
    ("vit", WordType::Alper, 0.466),
];

/// Published positional-consistency ratios per model and word type.
pub const REFERENCE_CONSISTENCY: [(&str, WordType, f64); 8] = [
    ("resnet50", WordType::Original, 0.799),
    ("resnet50", WordType::Adjective, 0.761),
    ("resnet50", WordType::Nielsen, 0.758),
    ("resnet50", WordType::Alper, 0.765),
    ("vit", WordType::Original, 0.723),
    ("vit", WordType::Adjective, 0.749),
    ("vit", WordType::Nielsen, 0.722),
    ("vit", WordType::Alper, 0.739),
];

/// Published overall positional consistency per model.
pub const REFERENCE_CONSISTENCY_OVERALL: [(&str, f64); 2] = [("resnet50", 0.770), ("vit", 0.735)];

pub const FIGURES: [&str; 3] = ["prob_pairs.svg", "gradcam_pairs.svg", "gradcam_labels.svg"];
pub const SUMMARY_FILE: &str = "summary.md";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub store_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bar {
    pub group: String,
    pub series: String,
    pub value: f64,
    pub low: f64,
    pub high: f64,
}

fn bars(rows: &[EstimateRow], experiment: &str, group: impl Fn(&EstimateRow) -> String) -> Vec<Bar> {
    rows.iter()
        .filter(|r| r.experiment == experiment && r.prompt == ALL)
        .map(|r| Bar {
            group: group(r),
            series: r.model.clone(),
            value: r.successes as f64 / r.trials.max(1) as f64,
            low: r.ci_low,
            high: r.ci_high,
        })
        .collect()
}

const PALETTE: [&str; 5] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bars (descriptive proportion) with posterior-interval whiskers
/// and horizontal reference lines.
pub fn bar_chart(title: &str, bars: &[Bar], lines: &[(f64, &str, &str)], provenance: &Provenance) -> String {
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 70.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, "<!-- config-hash: {} store-hash: {} -->", provenance.config_hash, provenance.store_hash);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" font-size="15" text-anchor="middle">{}</text>"#, w / 2.0, esc(title));
    let _ = writeln!(svg, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, top + plot_h);
    let _ = writeln!(svg, r#"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, top + plot_h, left + plot_w);
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, left - 6.0, y(v) + 4.0);
        let _ = writeln!(svg, r##"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="#eeeeee"/>"##, y(v), left + plot_w);
    }
    let mut groups: Vec<&str> = Vec::new();
    let mut series: Vec<&str> = Vec::new();
    for b in bars {
        if !groups.contains(&b.group.as_str()) {
            groups.push(&b.group);
        }
        if !series.contains(&b.series.as_str()) {
            series.push(&b.series);
        }
    }
    if bars.is_empty() {
        let _ = writeln!(
            svg,
            r##"<text x="{}" y="{}" font-size="20" fill="#888888" text-anchor="middle">no data</text>"##,
            left + plot_w / 2.0,
            top + plot_h / 2.0
        );
    } else {
        let slot = plot_w / groups.len() as f64;
        let bar_w = slot * 0.8 / series.len() as f64;
        for b in bars {
            let g = groups.iter().position(|x| *x == b.group).unwrap();
            let s = series.iter().position(|x| *x == b.series).unwrap();
            let x = left + g as f64 * slot + slot * 0.1 + s as f64 * bar_w;
            let colour = PALETTE[s % PALETTE.len()];
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{colour}"/>"#,
                y(b.value),
                bar_w * 0.9,
                y(0.0) - y(b.value)
            );
            let cx = x + bar_w * 0.45;
            let _ =
                writeln!(svg, r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#, y(b.low), y(b.high));
            let _ = writeln!(svg, r#"<circle cx="{cx:.1}" cy="{:.1}" r="2.5" fill="black"/>"#, y(b.value));
        }
        for (g, name) in groups.iter().enumerate() {
            let x = left + (g as f64 + 0.5) * slot;
            let _ = writeln!(svg, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#, top + plot_h + 18.0, esc(name));
        }
        for (s, name) in series.iter().enumerate() {
            let ly = top + 10.0 + s as f64 * 18.0;
            let _ = writeln!(
                svg,
                r#"<rect x="{}" y="{}" width="12" height="12" fill="{}"/>"#,
                left + plot_w + 14.0,
                ly - 10.0,
                PALETTE[s % PALETTE.len()]
            );
            let _ = writeln!(svg, r#"<text x="{}" y="{ly}">{}</text>"#, left + plot_w + 32.0, esc(name));
        }
    }
    for (i, (v, label, colour)) in lines.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<line x1="{left}" y1="{0:.1}" x2="{1}" y2="{0:.1}" stroke="{colour}" stroke-dasharray="6 4"/>"#,
            y(*v),
            left + plot_w
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" fill="{colour}">{} ({v})</text>"#,
            left + plot_w + 14.0,
            top + plot_h - 10.0 - i as f64 * 16.0,
            esc(label)
        );
    }
    let _ = writeln!(
        svg,
        r##"<text x="{left}" y="{}" font-size="9" fill="#666666">config {} | store {}</text>"##,
        h - 10.0,
        &provenance.config_hash[..12.min(provenance.config_hash.len())],
        &provenance.store_hash[..12.min(provenance.store_hash.len())]
    );
    svg.push_str("</svg>\n");
    svg
}

fn lookup(table: &[(&str, WordType, f64)], model: &str, word_type: &str) -> Option<f64> {
    table.iter().find(|(m, w, _)| *m == model && w.as_str() == word_type).map(|(_, _, v)| *v)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.3}"))
}

fn delta(a: Option<f64>, b: Option<f64>) -> String {
    match (a, b) {
        (Some(a), Some(b)) => format!("{:+.3}", a - b),
        _ => "n/a".into(),
    }
}

fn estimate_table(md: &mut String, rows: &[EstimateRow], experiment: &str) {
    let rows: Vec<_> = rows.iter().filter(|r| r.experiment == experiment && r.prompt == ALL).collect();
    if rows.is_empty() {
        md.push_str("_no data_\n\n");
        return;
    }
    md.push_str(
        "| model | word type | category | correct / trials | posterior mean | 95% interval | bootstrap 95% | above chance |\n",
    );
    md.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let boot = match (r.boot_low, r.boot_high) {
            (Some(l), Some(h)) => format!("[{l:.3}, {h:.3}]"),
            _ => "n/a".into(),
        };
        let _ = writeln!(
            md,
            "| {} | {} | {} | {}/{} | {:.3} | [{:.3}, {:.3}] | {} | {} |",
            r.model,
            r.word_type,
            r.category,
            r.successes,
            r.trials,
            r.posterior_mean,
            r.ci_low,
            r.ci_high,
            boot,
            if r.significant { "yes" } else { "no" }
        );
    }
    md.push('\n');
}

pub fn summary_markdown(a: &Analysis, provenance: &Provenance, human_baseline: Option<f64>) -> String {
    let mut md = String::from("# Bouba-kiki probe report\n\n");
    let _ = writeln!(md, "- config hash: `{}`\n- result-store hash: `{}`\n", provenance.config_hash, provenance.store_hash);

    md.push_str("## Label probabilities: both images of a pair matched (chance 0.25)\n\n");
    estimate_table(&mut md, &a.estimates, PROB_PAIRS);
    md.push_str("## Grad-CAM: both labels of a pair matched (chance 0.25)\n\n");
    if let Some(b) = human_baseline {
        let _ = writeln!(md, "Human baseline: {b:.3}\n");
    }
    estimate_table(&mut md, &a.estimates, GRADCAM_PAIRS);
    md.push_str("## Grad-CAM: single label matched (chance 0.5)\n\n");
    estimate_table(&mut md, &a.estimates, GRADCAM_LABELS);

    md.push_str("## Unique-label ratios against the reference table\n\n");
    if a.uniqueness.is_empty() {
        md.push_str("_no data_\n\n");
    } else {
        md.push_str("| model | word type | unique / set | ratio | per-image ratio | reference | delta | stimuli |\n|---|---|---|---|---|---|---|---|\n");
        for r in &a.uniqueness {
            let reference = lookup(&REFERENCE_UNIQUENESS, &r.model, &r.word_type);
            let _ = writeln!(
                md,
                "| {} | {} | {}/{} | {} | {} | {} | {} | {} |",
                r.model,
                r.word_type,
                r.unique_labels,
                r.label_set_size,
                fmt_opt(r.ratio),
                fmt_opt(r.per_image_ratio),
                fmt_opt(reference),
                delta(r.ratio, reference),
                r.stimuli
            );
        }
        md.push('\n');
    }

    md.push_str("## Positional consistency against the reference table\n\n");
    if a.consistency.is_empty() {
        md.push_str("_no data_\n\n");
    } else {
        md.push_str("| model | word type | consistent / total | ratio | reference | delta |\n|---|---|---|---|---|---|\n");
        for r in &a.consistency {
            let reference = if r.word_type == ALL {
                REFERENCE_CONSISTENCY_OVERALL.iter().find(|(m, _)| *m == r.model).map(|(_, v)| *v)
            } else {
                lookup(&REFERENCE_CONSISTENCY, &r.model, &r.word_type)
            };
            let _ = writeln!(
                md,
                "| {} | {} | {}/{} | {} | {} | {} |",
                r.model,
                r.word_type,
                r.consistent,
                r.total,
                fmt_opt(r.ratio),
                fmt_opt(reference),
                delta(r.ratio, reference)
            );
        }
        md.push('\n');
    }

    md.push_str("## Linear separability (cross-validated accuracy)\n\n");
    if a.separability.is_empty() {
        md.push_str("_no data_\n\n");
    } else {
        md.push_str("| model | subject | prompt | points | score |\n|---|---|---|---|---|\n");
        for r in &a.separability {
            let _ = writeln!(md, "| {} | {} | {} | {} | {:.3} |", r.model, r.subject, r.prompt, r.points, r.score);
        }
        md.push('\n');
    }
    md
}

/// Writes the three figures and the summary; returns the files written.
pub fn write_report(dir: &Path, a: &Analysis, provenance: &Provenance, human_baseline: Option<f64>) -> Result<Vec<PathBuf>> {
    let chance_25 = (0.25, "chance", "#777777");
    let prob_fig = bar_chart(
        "Label probabilities: proportion of pairs with both images matched",
        &bars(&a.estimates, PROB_PAIRS, |r| r.word_type.clone()),
        &[chance_25],
        provenance,
    );
    let mut pair_lines = vec![chance_25];
    if let Some(b) = human_baseline {
        pair_lines.push((b, "human", "#2ca02c"));
    }
    let pair_fig = bar_chart(
        "Grad-CAM: proportion of pairs with both labels matched",
        &bars(&a.estimates, GRADCAM_PAIRS, |r| r.word_type.clone()),
        &pair_lines,
        provenance,
    );
    let label_fig = bar_chart(
        "Grad-CAM: proportion of correct matches by word type and category",
        &bars(&a.estimates, GRADCAM_LABELS, |r| format!("{} {}", r.word_type, r.category)),
        &[(0.5, "chance", "#777777")],
        provenance,
    );
    let mut written = Vec::new();
    for (name, svg) in FIGURES.iter().zip([prob_fig, pair_fig, label_fig]) {
        let path = dir.join(name);
        write_atomic(&path, svg.as_bytes())?;
        written.push(path);
    }
    let path = dir.join(SUMMARY_FILE);
    write_atomic(&path, summary_markdown(a, provenance, human_baseline).as_bytes())?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli_report::analysis::UniquenessRow;

    fn provenance() -> Provenance {
        Provenance { config_hash: "c".repeat(64), store_hash: "s".repeat(64) }
    }

    #[test]
    fn empty_analysis_gives_no_data_panels() {
        let dir = tempfile::tempdir().unwrap();
        let files = write_report(dir.path(), &Analysis::default(), &provenance(), None).unwrap();
        assert_eq!(files.len(), 4);
        for f in &files[..3] {
            let svg = std::fs::read_to_string(f).unwrap();
            assert!(svg.contains("no data"));
            assert!(svg.contains(&"c".repeat(64)) && svg.contains(&"s".repeat(64)));
        }
    }

    #[test]
    fn chance_and_baseline_lines() {
        let svg = bar_chart("t", &[], &[(0.25, "chance", "#777"), (0.9, "human", "#0a0")], &provenance());
        assert!(svg.contains("chance (0.25)"));
        assert!(svg.contains("human (0.9)"));
    }

    #[test]
    fn uniqueness_rows_carry_deltas() {
        let a = Analysis {
            uniqueness: vec![UniquenessRow {
                model: "resnet50".into(),
                word_type: "adjective".into(),
                unique_labels: 6,
                label_set_size: 20,
                trials: 340,
                ratio: Some(0.3),
                per_image_ratio: Some(0.1),
                stimuli: "generated-only".into(),
                note: String::new(),
            }],
            ..Default::default()
        };
        let md = summary_markdown(&a, &provenance(), None);
        assert!(md.contains("| resnet50 | adjective | 6/20 | 0.300 | 0.100 | 0.283 | +0.017 | generated-only |"));
    }
}
