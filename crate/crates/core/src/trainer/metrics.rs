use std::fmt::Write as _;

/// Column order of the metrics CSV.
pub const CSV_HEADER: &str = "epoch,loss_rec,loss_dcp,loss_total,psnr_pred,psnr_hazy,accuracy";

/// One epoch of training. Fields that do not apply to an experiment are
/// `None` and written as empty CSV cells.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean Frobenius reconstruction error.
    pub loss_rec: Option<f64>,
    pub loss_dcp: Option<f64>,
    /// Mean optimized objective.
    pub loss_total: f64,
    /// Median PSNR of the prediction against ground truth, in dB.
    pub psnr_pred: Option<f64>,
    /// Median PSNR of the hazy input against ground truth, in dB.
    pub psnr_hazy: Option<f64>,
    /// Held-out accuracy in `[0, 1]`.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub records: Vec<EpochRecord>,
}

impl Metrics {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Header line plus one line per record. Floats use Rust's shortest
    /// round-trip formatting, so identical runs give identical bytes.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch,
                cell(r.loss_rec),
                cell(r.loss_dcp),
                r.loss_total,
                cell(r.psnr_pred),
                cell(r.psnr_hazy),
                cell(r.accuracy)
            );
        }
        out
    }
}
