//! Text renderings of evaluation results and training progress.

use std::fmt::Write as _;

use mcncl_core::metrics::EvalReport;
use mcncl_core::train::EpochRecord;

/// One metrics-log line. Floats use the shortest round-trip form, so equal
/// runs produce byte-identical logs.
pub fn epoch_line(r: &EpochRecord) -> String {
    let val = match r.val_weighted_f1 {
        Some(f) => format!("{f}"),
        None => "nan".into(),
    };
    format!("epoch={} train_loss={} val_weighted_f1={}", r.epoch, r.train_loss, val)
}

/// Aligned per-class table followed by the confusion matrix.
pub fn table(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>6} {:>10} {:>10} {:>10} {:>8}",
        "class", "precision", "recall", "f1", "support"
    );
    for (c, m) in report.per_class.iter().enumerate() {
        let _ = writeln!(
            s,
            "{:>6} {:>10.4} {:>10.4} {:>10.4} {:>8}",
            c, m.precision, m.recall, m.f1, m.support
        );
    }
    let _ = writeln!(
        s,
        "\nweighted F1 {:.4}   accuracy {:.4}   utterances {}",
        report.weighted_f1,
        report.accuracy,
        report.total()
    );
    let _ = writeln!(s, "\nconfusion (rows: true, columns: predicted)");
    for row in &report.confusion {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>6}")).collect();
        let _ = writeln!(s, "{}", cells.join(""));
    }
    s
}

/// Machine-readable form of the report.
pub fn to_toml(report: &EvalReport) -> Result<String, toml::ser::Error> {
    toml::to_string(report)
}
