//! Tab-separated outputs: training curves and the policy comparison table.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::evaluate::MetricReport;
use crate::training::StepRecord;

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new().delimiter(b'\t').from_path(path).map_err(csv_err)
}

pub fn write_curve_tsv(records: &[StepRecord], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["phase", "epoch", "step", "total", "recon", "kl_base", "log_det", "grad_norm", "applied"])
        .map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.phase.clone(),
            r.epoch.to_string(),
            r.step.to_string(),
            format!("{:.6}", r.loss.total),
            format!("{:.6}", r.loss.recon),
            format!("{:.6}", r.loss.kl_base),
            format!("{:.6}", r.loss.log_det),
            format!("{:.6}", r.grad_norm),
            r.applied.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per (policy, lines): observed fraction, L1, SSIM, PSNR.
pub fn table_text(reports: &[MetricReport]) -> String {
    let mut out = String::from("policy\tlines\tfraction_pct\tl1\tssim\tpsnr_db\n");
    for r in reports {
        out.push_str(&format!(
            "{}\t{}\t{:.1}\t{:.4}\t{:.4}\t{:.2}\n",
            r.policy,
            r.lines,
            100.0 * r.observed_fraction(),
            r.l1,
            r.ssim,
            r.psnr
        ));
    }
    out
}

pub fn write_table_tsv(reports: &[MetricReport], path: &Path) -> Result<()> {
    Ok(std::fs::write(path, table_text(reports))?)
}
