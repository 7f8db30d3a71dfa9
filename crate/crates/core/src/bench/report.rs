//! Summary tables and plot data derived purely from run records.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::error::{invalid_arg, Result};
use crate::objectives::{build_histogram, hellinger, union_range, MetricRecord, DEFAULT_BINS};

use super::records::RunRecord;

/// Mean and population standard deviation; `None` for no values.
pub fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    Some((m, var.sqrt()))
}

/// Linear-interpolation quantile of a non-empty sample.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

fn cells(v: &[f64]) -> String {
    match mean_std(v) {
        Some((m, s)) => format!("{m},{s}"),
        None => ",".into(),
    }
}

fn metric(records: &[&RunRecord], f: impl Fn(&MetricRecord) -> Option<f64>) -> Vec<f64> {
    records.iter().filter_map(|r| r.metrics.as_ref().and_then(&f)).collect()
}

/// Groups by `key` in order of first appearance.
fn group_by<'a, K: PartialEq + Clone>(records: &[&'a RunRecord], key: impl Fn(&RunRecord) -> K) -> Vec<(K, Vec<&'a RunRecord>)> {
    let mut groups: Vec<(K, Vec<&RunRecord>)> = Vec::new();
    for &r in records {
        let k = key(r);
        match groups.iter_mut().find(|(g, _)| *g == k) {
            Some((_, v)) => v.push(r),
            None => groups.push((k, vec![r])),
        }
    }
    groups
}

fn of_experiment<'a>(records: &'a [RunRecord], name: &str) -> Vec<&'a RunRecord> {
    records.iter().filter(|r| r.experiment == name).collect()
}

const METRIC_HEADER: &str = "n,r2_mean,r2_std,corr_mean,corr_std,mse_mean,mse_std,mae_mean,mae_std,hellinger_mean,hellinger_std";

fn metric_row(group: &[&RunRecord]) -> String {
    let ok: Vec<&RunRecord> = group.iter().copied().filter(|r| r.metrics.is_some()).collect();
    format!(
        "{},{},{},{},{},{}",
        ok.len(),
        cells(&metric(&ok, |m| Some(m.r2))),
        cells(&metric(&ok, |m| m.corr)),
        cells(&metric(&ok, |m| Some(m.mse))),
        cells(&metric(&ok, |m| Some(m.mae))),
        cells(&metric(&ok, |m| Some(m.hellinger))),
    )
}

/// Per-method mean ± std of the cross-validated runs.
pub fn method_table(records: &[RunRecord]) -> String {
    let mut out = format!("method,{METRIC_HEADER}\n");
    for (name, g) in group_by(&of_experiment(records, "cv"), |r| r.method.clone()) {
        let _ = writeln!(out, "{name},{}", metric_row(&g));
    }
    out
}

/// MSE quantiles per injection ratio.
pub fn sweep_table(records: &[RunRecord]) -> String {
    let mut out = String::from(
        "injection_frac,injection_source_frac,n,n_failed,mse_mean,mse_std,mse_min,mse_q25,mse_median,mse_q75,mse_max,corr_mean,corr_std\n",
    );
    let mut groups = group_by(&of_experiment(records, "sweep"), |r| r.injection_frac.map(f64::to_bits));
    groups.sort_by(|a, b| a.0.map(f64::from_bits).unwrap_or(f64::NAN).total_cmp(&b.0.map(f64::from_bits).unwrap_or(f64::NAN)));
    for (key, g) in groups {
        let frac = key.map(|b| f64::from_bits(b).to_string()).unwrap_or_default();
        let src = g.iter().find_map(|r| r.injection_source_frac).map(|v| v.to_string()).unwrap_or_default();
        let mse = metric(&g, |m| Some(m.mse));
        let failed = g.len() - mse.len();
        let q = if mse.is_empty() {
            ",,,,".to_string()
        } else {
            [0.0, 0.25, 0.5, 0.75, 1.0].map(|p| quantile(&mse, p).to_string()).join(",")
        };
        let _ = writeln!(out, "{frac},{src},{},{failed},{},{q},{}", mse.len(), cells(&mse), cells(&metric(&g, |m| m.corr)));
    }
    out
}

/// Per-variant summary of the ablation runs.
pub fn ablation_table(records: &[RunRecord]) -> String {
    let mut out = format!("variant,{METRIC_HEADER}\n");
    for (name, g) in group_by(&of_experiment(records, "ablation"), |r| r.method.clone()) {
        let _ = writeln!(out, "{name},{}", metric_row(&g));
    }
    out
}

/// One row per shift: the measured label KL and each method's correlation.
pub fn stress_table(records: &[RunRecord]) -> String {
    let stress = of_experiment(records, "stress");
    let methods: Vec<String> = group_by(&stress, |r| r.method.clone()).into_iter().map(|(m, _)| m).collect();
    let mut out = String::from("shift_offset,shift_noise,label_kl");
    for m in &methods {
        let _ = write!(out, ",{m}_n,{m}_corr_mean,{m}_corr_std,{m}_mse_mean,{m}_mse_std");
    }
    out.push('\n');
    for ((off, noise), g) in group_by(&stress, |r| (r.shift_offset.to_bits(), r.shift_noise.to_bits())) {
        let kl = g.iter().find_map(|r| r.label_kl).map(|v| v.to_string()).unwrap_or_default();
        let _ = write!(out, "{},{},{kl}", f64::from_bits(off), f64::from_bits(noise));
        for m in &methods {
            let mg: Vec<&RunRecord> = g.iter().copied().filter(|r| &r.method == m && r.metrics.is_some()).collect();
            let _ = write!(out, ",{},{},{}", mg.len(), cells(&metric(&mg, |x| x.corr)), cells(&metric(&mg, |x| Some(x.mse))));
        }
        out.push('\n');
    }
    out
}

/// Pooled test-label and per-method prediction histograms of the
/// cross-validated runs, on shared bin edges.
pub fn histogram_data(records: &[RunRecord]) -> Result<serde_json::Value> {
    let cv: Vec<&RunRecord> = of_experiment(records, "cv").into_iter().filter(|r| !r.y_pred.is_empty()).collect();
    let groups = group_by(&cv, |r| r.method.clone());
    let Some((_, first)) = groups.first() else {
        return Ok(json!({ "bins": DEFAULT_BINS, "bin_edges": [], "truth": [], "methods": [] }));
    };
    let truth: Vec<f64> = first.iter().flat_map(|r| r.y_true.iter().copied()).collect();
    let all_pred: Vec<f64> = cv.iter().flat_map(|r| r.y_pred.iter().copied()).collect();
    let range = union_range(&truth, &all_pred)?;
    let ht = build_histogram(&truth, DEFAULT_BINS, range)?;
    let mut methods = Vec::new();
    for (name, g) in &groups {
        let pred: Vec<f64> = g.iter().flat_map(|r| r.y_pred.iter().copied()).collect();
        let hp = build_histogram(&pred, DEFAULT_BINS, range)?;
        methods.push(json!({ "method": name, "mass": hp.mass, "hellinger_to_truth": hellinger(&ht, &hp)? }));
    }
    Ok(json!({ "bins": DEFAULT_BINS, "bin_edges": ht.bin_edges, "truth": ht.mass, "methods": methods }))
}

/// Writes every table and the histogram data into `out_dir`.
pub fn make_report(records: &[RunRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(invalid_arg!("no records to report"));
    }
    fs::create_dir_all(out_dir)?;
    let files = [
        ("methods.csv", method_table(records)),
        ("sweep.csv", sweep_table(records)),
        ("ablation.csv", ablation_table(records)),
        ("stress.csv", stress_table(records)),
        ("histograms.json", serde_json::to_string_pretty(&histogram_data(records)?)? + "\n"),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = out_dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}
