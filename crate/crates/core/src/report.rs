//! Plain-text summary tables over experiment reports.

use std::fmt::Write;

use crate::engine::ExperimentReport;

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |a| format!("{:.2}", 100.0 * a))
}

fn count(v: Option<usize>) -> String {
    v.map_or_else(|| "-".to_string(), |r| r.to_string())
}

fn label(r: &ExperimentReport) -> String {
    let mut s = format!("{} seed={}", r.method, r.seed);
    if r.method == crate::config::Method::Fedrac {
        s += if r.kd_enabled { " kd" } else { " no-kd" };
    }
    if let Some(c) = r.left_out_class {
        let _ = write!(s, " loo={c}");
    }
    s
}

/// Final accuracy and macro F1 per cluster, then rounds needed to reach
/// each report's plateau threshold and the total required rounds.
pub fn render_tables(reports: &[ExperimentReport]) -> String {
    let width = reports.iter().map(|r| r.clusters.len()).max().unwrap_or(0);
    let mut out = String::new();

    let _ = writeln!(out, "Accuracy / macro F1 (%)");
    let mut header = format!("{:<28}", "run");
    for f in 1..=width {
        let _ = write!(header, " {:>15}", format!("C{f}"));
    }
    let _ = writeln!(out, "{header} {:>15}", "global");
    for r in reports {
        let mut line = format!("{:<28}", label(r));
        for f in 0..width {
            let cell = r
                .clusters
                .get(f)
                .map(|c| format!("{} / {}", pct(c.final_accuracy), pct(c.final_macro_f1)))
                .unwrap_or_default();
            let _ = write!(line, " {cell:>15}");
        }
        let global = format!(
            "{} / {}",
            pct(Some(r.global_accuracy)),
            pct(Some(r.global_macro_f1))
        );
        let _ = writeln!(out, "{line} {global:>15}");
    }

    let _ = writeln!(out, "\nRounds to reach threshold");
    let mut header = format!("{:<28} {:>9}", "run", "x (%)");
    for f in 1..=width {
        let _ = write!(header, " {:>6}", format!("C{f}"));
    }
    let _ = writeln!(out, "{header} {:>6}", "TRR");
    for r in reports {
        let mut line = format!("{:<28} {:>9}", label(r), pct(r.plateau_threshold));
        for f in 0..width {
            let cell = r
                .clusters
                .get(f)
                .map(|c| count(c.rounds_to_threshold))
                .unwrap_or_default();
            let _ = write!(line, " {cell:>6}");
        }
        let _ = writeln!(out, "{line} {:>6}", count(r.total_required_rounds));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::TrainingMode;
    use crate::config::Method;
    use crate::engine::ClusterReport;

    fn cluster(rank: usize, acc: Option<f64>, rounds: Option<usize>) -> ClusterReport {
        ClusterReport {
            rank,
            members: vec![],
            hidden_widths: vec![4],
            param_count: 10,
            epochs: 1,
            rounds: 5,
            mar_share: 1.0,
            final_accuracy: acc,
            final_macro_f1: acc,
            rounds_to_threshold: rounds,
            history: vec![],
        }
    }

    #[test]
    fn renders_missing_values_as_dashes() {
        let r = ExperimentReport {
            method: Method::Fedrac,
            seed: 7,
            kd_enabled: true,
            mode: TrainingMode::Parallel,
            k_star: Some(2),
            dunn_curve: vec![],
            m: 2,
            left_out_class: None,
            clusters: vec![cluster(1, Some(0.9), Some(3)), cluster(2, None, None)],
            global_accuracy: 0.9,
            global_macro_f1: 0.9,
            plateau_threshold: Some(0.81),
            total_required_rounds: None,
            simulated_seconds: 1.0,
            assignment: vec![],
        };
        let text = render_tables(&[r]);
        assert!(text.contains("fedrac seed=7 kd"));
        assert!(text.contains("90.00 / 90.00"));
        assert!(text.contains("81.00"));
        let rounds_line = text.lines().last().unwrap();
        assert!(rounds_line.trim_end().ends_with('-'), "{rounds_line}");
    }
}
