//! Day / night / all metric tables.

use std::path::Path;

use scanet::data::Sample;
use scanet::objective::{confusion_from_masks, metrics_from_counts, ConfusionCounts, Metrics};
use scanet::tensor::Tensor;

pub const TABLE_HEADER: &str = "subset,accuracy,precision,recall,f_score,error_rate,miou";

/// Index lists for `all`, then `day` and `night` when both kinds are present.
pub fn subsets(samples: &[Sample]) -> Vec<(&'static str, Vec<usize>)> {
    let all: Vec<usize> = (0..samples.len()).collect();
    let night: Vec<usize> = all.iter().copied().filter(|&i| samples[i].night).collect();
    let day: Vec<usize> = all.iter().copied().filter(|&i| !samples[i].night).collect();
    let mut out = vec![("all", all)];
    if !night.is_empty() && !day.is_empty() {
        out.push(("day", day));
        out.push(("night", night));
    }
    out
}

/// Metrics per subset with pooled counts at threshold 0.5.
pub fn subset_metrics(
    samples: &[Sample],
    mut predict: impl FnMut(&Sample) -> scanet::Result<Tensor>,
) -> scanet::Result<Vec<(&'static str, (Metrics, ConfusionCounts))>> {
    let mut counts = Vec::with_capacity(samples.len());
    for s in samples {
        counts.push(confusion_from_masks(&predict(s)?, &s.mask, 0.5)?);
    }
    subsets(samples)
        .into_iter()
        .map(|(name, idx)| {
            let mut c = ConfusionCounts::default();
            idx.iter().for_each(|&i| c += counts[i]);
            Ok((name, (metrics_from_counts(&c)?, c)))
        })
        .collect()
}

fn row(name: &str, m: &Metrics) -> String {
    format!(
        "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        m.accuracy, m.precision, m.recall, m.f_score, m.error_rate, m.miou
    )
}

pub fn write_metrics_table(path: &Path, rows: &[(&str, (Metrics, ConfusionCounts))]) -> std::io::Result<()> {
    let mut text = format!("{TABLE_HEADER}\n");
    for (name, (m, _)) in rows {
        text.push_str(&row(name, m));
        text.push('\n');
    }
    std::fs::write(path, text)
}

pub fn print_table(rows: &[(&str, (Metrics, ConfusionCounts))]) {
    println!("{TABLE_HEADER}");
    for (name, (m, _)) in rows {
        println!("{}", row(name, m));
    }
}
