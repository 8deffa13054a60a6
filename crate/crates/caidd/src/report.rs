//! CSV and text outputs: loss logs, metric reports and ablation tables.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use caidd_core::ablation::AblationRow;
use caidd_core::metrics::MetricsReport;
use caidd_core::trainer::{Checkpoint, StepLog, TrainObserver, Trainer};

use crate::checkpoint;
use crate::error::{Error, Result};

pub const LOSS_HEADER: &str = "step,l_diff,l_id,l_parse,l_gaze,l_total,lr";

pub fn loss_row(log: &StepLog) -> String {
    let l = &log.losses;
    format!(
        "{},{},{},{},{},{},{}",
        log.step, l.l_diff, l.l_id, l.l_parse, l.l_gaze, l.l_total, log.lr
    )
}

/// Observer writing `losses.csv` and periodic `step_XXXXXX.ckpt` files.
pub struct RunWriter {
    dir: PathBuf,
    csv: BufWriter<File>,
    csv_path: PathBuf,
    pub logs: Vec<StepLog>,
    pub quiet: bool,
}

impl RunWriter {
    /// Creates `losses.csv`; with `append` an existing log is continued.
    pub fn create(dir: &Path, append: bool) -> Result<Self> {
        let csv_path = dir.join("losses.csv");
        let exists = append && csv_path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(exists)
            .truncate(!exists)
            .open(&csv_path)
            .map_err(|e| Error::io(&csv_path, e))?;
        let mut csv = BufWriter::new(file);
        if !exists {
            writeln!(csv, "{}", LOSS_HEADER).map_err(|e| Error::io(&csv_path, e))?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            csv,
            csv_path,
            logs: Vec::new(),
            quiet: true,
        })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.csv.flush().map_err(|e| Error::io(&self.csv_path, e))
    }
}

fn core_io(path: &Path, e: std::io::Error) -> caidd_core::Error {
    caidd_core::Error::contract(format!("{}: {}", path.display(), e))
}

impl TrainObserver for RunWriter {
    fn on_step(&mut self, log: &StepLog) -> caidd_core::Result<()> {
        writeln!(self.csv, "{}", loss_row(log)).map_err(|e| core_io(&self.csv_path, e))?;
        if !self.quiet && (log.step % 100 == 0 || log.step == 1) {
            eprintln!("step {:>6}  l_diff {:.5}  l_total {:.5}  lr {:.2e}", log.step, log.losses.l_diff, log.losses.l_total, log.lr);
        }
        self.logs.push(*log);
        Ok(())
    }

    fn on_checkpoint(&mut self, ckpt: &Checkpoint) -> caidd_core::Result<()> {
        let path = self.dir.join(format!("step_{:06}.ckpt", ckpt.step));
        checkpoint::save(ckpt, &path).map_err(|e| caidd_core::Error::contract(e.to_string()))
    }

    fn on_eval(&mut self, step: usize, trainer: &Trainer) -> caidd_core::Result<()> {
        if !self.quiet {
            eprintln!("step {:>6}  parameters finite: {}", step, trainer.params().is_finite());
        }
        Ok(())
    }
}

/// Reads a `losses.csv` back into rows of numbers (header skipped).
pub fn read_losses(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_HEADER) {
        return Err(Error::format(path, "missing loss header"));
    }
    lines
        .map(|l| {
            l.split(',')
                .map(|v| v.parse::<f64>().map_err(|_| Error::format(path, format!("bad row `{}`", l))))
                .collect()
        })
        .collect()
}

pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut s = String::from("metric,value,n_samples\n");
    for (name, m) in &report.values {
        writeln!(s, "{},{},{}", name, m.value, m.n_samples).expect("String");
    }
    s
}

pub fn metrics_text(report: &MetricsReport) -> String {
    let mut s = String::new();
    writeln!(s, "samples: {}", report.n_samples).expect("String");
    writeln!(s, "feature extractor: {}", report.feature_extractor_id).expect("String");
    writeln!(s, "config digest: {}", report.config_digest).expect("String");
    for (name, m) in &report.values {
        writeln!(s, "{:<14} {:.6}", name, m.value).expect("String");
    }
    s
}

pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    for (file, body) in [("report.csv", metrics_csv(report)), ("report.txt", metrics_text(report))] {
        let p = dir.join(file);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub const ABLATION_HEADER: &str = "variant,placements,ssim,fid,id_similarity,perceptual,final_l_id";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{}\n", ABLATION_HEADER);
    for r in rows {
        let placements = caidd_core::denoiser::Resolution::format_list(&r.spec.placements).replace(',', "+");
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.spec.variant.name(),
            placements,
            r.ssim(),
            r.fid(),
            r.id_similarity(),
            r.report.get("perceptual").unwrap_or(f64::NAN),
            r.final_l_id
        )
        .expect("String");
    }
    s
}
