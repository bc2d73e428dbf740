//! CSV sweep reports.

use std::path::Path;

use crate::error::Result;

use super::experiment::{sort_rows, SweepRow};

pub const REPORT_HEADER: [&str; 8] = [
    "method",
    "config_id",
    "param_fraction",
    "zero_shot_acc",
    "finetuned_acc",
    "epoch",
    "wall_ms",
    "pareto",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReportOptions {
    /// Write measured wall time; when false the column is written as 0 so
    /// reports of identical runs compare byte for byte.
    pub wall_time: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { wall_time: true }
    }
}

/// `x` with 9 significant digits in the shortest of fixed or exponent form.
pub fn format_sig9(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!(
            "{}e{}{:02}",
            trim_zeros(mantissa.to_string()),
            if exp < 0 { '-' } else { '+' },
            exp.abs()
        )
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Renders rows sorted by `(method, config_id, epoch)`.
pub fn render_report(rows: &[SweepRow], options: ReportOptions) -> Result<String> {
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER)?;
    for r in &sorted {
        w.write_record([
            r.method.clone(),
            r.config_id.clone(),
            format_sig9(r.param_fraction),
            format_sig9(r.zero_shot_acc),
            format_sig9(r.finetuned_acc),
            r.epoch.to_string(),
            if options.wall_time {
                r.wall_ms.to_string()
            } else {
                "0".into()
            },
            r.pareto.to_string(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Column notes written next to every report.
pub fn report_metadata(options: ReportOptions) -> String {
    format!(
        "zero_shot_acc = \"test accuracy right after the latest projection or cut, NaN before the first\"\n\
         finetuned_acc = \"test accuracy at each epoch end; one-shot methods report it during a refit of training.finetune_steps steps (default 200) that trains only S and biases on frozen bases\"\n\
         param_fraction = \"deployed parameters over the dense count of the same layer shapes\"\n\
         wall_ms = \"{}\"\n",
        if options.wall_time {
            "elapsed wall time of the run"
        } else {
            "masked to 0"
        }
    )
}

/// Writes the CSV at `path` and its column notes at `path` with extension `meta`.
pub fn emit_report(rows: &[SweepRow], path: &Path, options: ReportOptions) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, render_report(rows, options)?)?;
    std::fs::write(path.with_extension("meta"), report_metadata(options))?;
    Ok(())
}
