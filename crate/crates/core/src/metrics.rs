//! Confusion matrix, derived classification metrics, and their file renderings.

use std::fmt::Write as _;

use serde::Serialize;

/// Counts indexed `[true class][predicted class]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        let n = counts.len();
        assert!(counts.iter().all(|r| r.len() == n), "confusion matrix must be square");
        Self {
            num_classes: n,
            counts,
        }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn col_sum(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.trace(), self.total())
    }

    /// Diagonal over row sum; 0 for a class with no true samples.
    pub fn recall(&self, class: usize) -> f64 {
        ratio(self.counts[class][class], self.row_sum(class))
    }

    /// Diagonal over column sum; 0 for a class never predicted.
    pub fn precision(&self, class: usize) -> f64 {
        ratio(self.counts[class][class], self.col_sum(class))
    }

    pub fn f1(&self, class: usize) -> f64 {
        let (p, r) = (self.precision(class), self.recall(class));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn macro_f1(&self) -> f64 {
        (0..self.num_classes).map(|c| self.f1(c)).sum::<f64>() / self.num_classes as f64
    }

    pub fn to_csv(&self, names: &[&str]) -> String {
        let mut out = String::from("true\\predicted");
        for c in 0..self.num_classes {
            let _ = write!(out, ",{}", class_name(names, c));
        }
        out.push('\n');
        for (t, row) in self.counts.iter().enumerate() {
            out.push_str(&class_name(names, t));
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Heatmap of row-normalized rates with the raw count printed in each cell.
    pub fn to_svg(&self, names: &[&str], title: &str) -> String {
        let n = self.num_classes;
        let cell = 56.0;
        let left = 110.0;
        let top = 70.0;
        let width = left + cell * n as f64 + 20.0;
        let height = top + cell * n as f64 + 90.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            width / 2.0,
            escape(title)
        );
        for t in 0..n {
            let row_total = self.row_sum(t);
            for p in 0..n {
                let v = self.counts[t][p];
                let rate = ratio(v, row_total);
                let shade = (255.0 * (1.0 - rate)).round() as u8;
                let (x, y) = (left + cell * p as f64, top + cell * t as f64);
                let _ = writeln!(
                    s,
                    r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="#888"/>"##
                );
                let color = if rate > 0.5 { "white" } else { "black" };
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle" fill="{color}">{v}</text>"#,
                    x + cell / 2.0,
                    y + cell / 2.0 + 4.0
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                left - 6.0,
                top + cell * t as f64 + cell / 2.0 + 4.0,
                escape(&class_name(names, t))
            );
        }
        for p in 0..n {
            let x = left + cell * p as f64 + cell / 2.0;
            let y = top + cell * n as f64 + 14.0;
            let _ = writeln!(
                s,
                r#"<text x="{x}" y="{y}" text-anchor="end" transform="rotate(-40 {x} {y})">{}</text>"#,
                escape(&class_name(names, p))
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">predicted</text>"#,
            left + cell * n as f64 / 2.0,
            height - 10.0
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">true</text>"#,
            top + cell * n as f64 / 2.0,
            top + cell * n as f64 / 2.0
        );
        s.push_str("</svg>\n");
        s
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_name(names: &[&str], c: usize) -> String {
    names.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyStats {
    pub mean_s: f64,
    pub p95_s: f64,
    pub repetitions: usize,
}

impl LatencyStats {
    /// Mean and nearest-rank 95th percentile.
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self {
                mean_s: 0.0,
                p95_s: 0.0,
                repetitions: 0,
            };
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        Self {
            mean_s: samples.iter().sum::<f64>() / samples.len() as f64,
            p95_s: sorted[rank - 1],
            repetitions: samples.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub num_lstm_layers: usize,
    pub num_params: usize,
    pub samples: u64,
    pub accuracy: f64,
    pub per_class_recall: Vec<f64>,
    pub per_class_precision: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    /// Classes absent from the evaluated set; their recall is reported as 0.
    pub undefined_recall: Vec<usize>,
    pub latency: LatencyStats,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(
        confusion: ConfusionMatrix,
        latency: LatencyStats,
        num_lstm_layers: usize,
        num_params: usize,
    ) -> Self {
        let n = confusion.num_classes();
        Self {
            num_lstm_layers,
            num_params,
            samples: confusion.total(),
            accuracy: confusion.accuracy(),
            per_class_recall: (0..n).map(|c| confusion.recall(c)).collect(),
            per_class_precision: (0..n).map(|c| confusion.precision(c)).collect(),
            per_class_f1: (0..n).map(|c| confusion.f1(c)).collect(),
            macro_f1: confusion.macro_f1(),
            undefined_recall: (0..n).filter(|&c| confusion.row_sum(c) == 0).collect(),
            latency,
            confusion,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_two_class_metrics() {
        let cm = ConfusionMatrix::from_counts(vec![vec![3, 1], vec![2, 4]]);
        assert_eq!(cm.total(), 10);
        assert!((cm.accuracy() - 0.7).abs() < 1e-15);
        assert_eq!(cm.recall(0), 0.75);
        assert!((cm.recall(1) - 4.0 / 6.0).abs() < 1e-15);
        assert!((cm.precision(0) - 0.6).abs() < 1e-15);
        let f1 = 2.0 * 0.6 * 0.75 / (0.6 + 0.75);
        assert!((cm.f1(0) - f1).abs() < 1e-15);
        assert!((cm.f1(0) - 0.6667).abs() < 1e-4);
    }

    #[test]
    fn perfect_predictions() {
        let mut cm = ConfusionMatrix::new(3);
        for c in 0..3 {
            cm.record(c, c);
            cm.record(c, c);
        }
        let r = MetricsReport::from_confusion(cm, LatencyStats::from_samples(&[1.0]), 2, 10);
        assert_eq!(r.accuracy, 1.0);
        assert!(r.per_class_recall.iter().all(|&v| v == 1.0));
        assert_eq!(r.macro_f1, 1.0);
        assert!(r.undefined_recall.is_empty());
    }

    #[test]
    fn absent_class_is_flagged() {
        let mut cm = ConfusionMatrix::new(3);
        cm.record(0, 0);
        cm.record(1, 0);
        let r = MetricsReport::from_confusion(cm, LatencyStats::from_samples(&[]), 1, 1);
        assert_eq!(r.undefined_recall, vec![2]);
        assert_eq!(r.per_class_recall[2], 0.0);
        let rows: u64 = (0..3).map(|c| r.confusion.row_sum(c)).sum();
        assert_eq!(rows, r.samples);
    }

    #[test]
    fn p95_nearest_rank() {
        let samples: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = LatencyStats::from_samples(&samples);
        assert_eq!(s.p95_s, 95.0);
        assert_eq!(s.mean_s, 50.5);
    }

    #[test]
    fn csv_and_svg_render() {
        let cm = ConfusionMatrix::from_counts(vec![vec![3, 1], vec![2, 4]]);
        let csv = cm.to_csv(&["a", "b"]);
        assert_eq!(csv, "true\\predicted,a,b\na,3,1\nb,2,4\n");
        let svg = cm.to_svg(&["a", "b"], "test <1>");
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("test &lt;1&gt;"));
        assert_eq!(svg.matches("<rect x=").count(), 4);
    }
}
