//! Per-step metric records and their CSV form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::GeometryReport;

pub const CSV_HEADER: &str = "step,epoch,train_loss,val_loss,train_acc,val_acc,gen_gap,ncc,kappa,kappa_simplified,mean_angle_dev,representativeness,effective_reg_coeff";

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// `val_loss − train_loss`.
    pub gen_gap: f64,
    pub ncc: f64,
    pub kappa: f64,
    pub kappa_simplified: f64,
    pub mean_angle_dev: f64,
    pub representativeness: f64,
    pub effective_reg_coeff: f64,
}

impl MetricRecord {
    pub fn geometry(&self) -> GeometryReport {
        GeometryReport {
            step: self.step,
            ncc: self.ncc,
            kappa: self.kappa,
            kappa_simplified: self.kappa_simplified,
            mean_angle_dev: self.mean_angle_dev,
            representativeness: self.representativeness,
        }
    }

    fn floats(&self) -> [f64; 11] {
        [
            self.train_loss,
            self.val_loss,
            self.train_acc,
            self.val_acc,
            self.gen_gap,
            self.ncc,
            self.kappa,
            self.kappa_simplified,
            self.mean_angle_dev,
            self.representativeness,
            self.effective_reg_coeff,
        ]
    }

    fn from_floats(step: usize, epoch: u64, f: [f64; 11]) -> Self {
        MetricRecord {
            step,
            epoch,
            train_loss: f[0],
            val_loss: f[1],
            train_acc: f[2],
            val_acc: f[3],
            gen_gap: f[4],
            ncc: f[5],
            kappa: f[6],
            kappa_simplified: f[7],
            mean_angle_dev: f[8],
            representativeness: f[9],
            effective_reg_coeff: f[10],
        }
    }
}

/// Records in strictly increasing step order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    records: Vec<MetricRecord>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: MetricRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.step <= last.step {
                return Err(Error::InvalidArgument(format!("step {} does not follow step {}", r.step, last.step)));
            }
        }
        if !(0.0..=1.0).contains(&r.train_acc) || !(0.0..=1.0).contains(&r.val_acc) {
            return Err(Error::InvalidArgument(format!(
                "accuracies out of range at step {}: {} / {}",
                r.step, r.train_acc, r.val_acc
            )));
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&MetricRecord> {
        self.records.last()
    }

    /// First record satisfying `pred`.
    pub fn first_where(&self, pred: impl Fn(&MetricRecord) -> bool) -> Option<&MetricRecord> {
        self.records.iter().find(|r| pred(r))
    }

    pub fn at_step(&self, step: usize) -> Option<&MetricRecord> {
        self.records.iter().find(|r| r.step == step)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(64 + self.records.len() * 256);
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            write!(out, "{},{}", r.step, r.epoch).unwrap();
            for v in r.floats() {
                write!(out, ",{v:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, m: String| Error::Parse {
            path: origin.to_path_buf(),
            message: format!("line {line}: {m}"),
        };
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == CSV_HEADER => {}
            Some(h) => return Err(err(1, format!("unexpected header {h:?}"))),
            None => return Err(err(1, "empty file".into())),
        }
        let mut log = MetricsLog::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 13 {
                return Err(err(lineno, format!("expected 13 fields, got {}", fields.len())));
            }
            let step = fields[0].parse().map_err(|e| err(lineno, format!("step: {e}")))?;
            let epoch = fields[1].parse().map_err(|e| err(lineno, format!("epoch: {e}")))?;
            let mut f = [0.0; 11];
            for (j, slot) in f.iter_mut().enumerate() {
                *slot = fields[j + 2].parse().map_err(|e| err(lineno, format!("column {}: {e}", j + 3)))?;
            }
            log.push(MetricRecord::from_floats(step, epoch, f))
                .map_err(|e| err(lineno, e.to_string()))?;
        }
        Ok(log)
    }
}

pub fn write_metrics_csv(log: &MetricsLog, path: &Path) -> Result<()> {
    std::fs::write(path, log.to_csv_string()).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<MetricsLog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MetricsLog::parse_csv(&text, path)
}

/// Column-wise mean of logs measured at identical steps.
pub fn mean_log(logs: &[&MetricsLog]) -> Result<MetricsLog> {
    let first = logs.first().ok_or_else(|| Error::InvalidArgument("no logs to average".into()))?;
    let mut out = MetricsLog::new();
    for (i, r0) in first.records().iter().enumerate() {
        let mut acc = [0.0; 11];
        for log in logs {
            let r = log.records().get(i).filter(|r| r.step == r0.step && r.epoch == r0.epoch).ok_or_else(|| {
                Error::InvalidArgument(format!("logs disagree on the measurement at step {}", r0.step))
            })?;
            for (a, v) in acc.iter_mut().zip(r.floats()) {
                *a += v;
            }
        }
        let n = logs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        out.push(MetricRecord::from_floats(r0.step, r0.epoch, acc))?;
    }
    if logs.iter().any(|l| l.len() != first.len()) {
        return Err(Error::InvalidArgument("logs have different lengths".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    fn record(step: usize, rng: &mut Rng) -> MetricRecord {
        let mut f = [0.0; 11];
        for v in f.iter_mut() {
            *v = rng.standard_normal() * 10f64.powi(rng.below(20) as i32 - 10);
        }
        f[2] = rng.uniform();
        f[3] = rng.uniform();
        MetricRecord::from_floats(step, step as u64, f)
    }

    #[test]
    fn empty_log_is_header_only() {
        assert_eq!(MetricsLog::new().to_csv_string(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn one_record_two_lines() {
        let mut log = MetricsLog::new();
        log.push(record(0, &mut Rng::new(1))).unwrap();
        assert_eq!(log.to_csv_string().lines().count(), 2);
    }

    #[test]
    fn csv_roundtrip_is_bitwise() {
        let mut rng = Rng::new(4);
        let mut log = MetricsLog::new();
        for s in 0..50 {
            log.push(record(s * 7, &mut rng)).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&log, &path).unwrap();
        let back = read_metrics_csv(&path).unwrap();
        for (a, b) in log.records().iter().zip(back.records()) {
            assert_eq!(a.floats().map(f64::to_bits), b.floats().map(f64::to_bits));
        }
        assert_eq!(back, log);
    }

    #[test]
    fn special_values_roundtrip() {
        let mut log = MetricsLog::new();
        let mut r = MetricRecord::default();
        r.kappa = f64::INFINITY;
        r.ncc = f64::MIN_POSITIVE;
        r.gen_gap = -0.0;
        log.push(r).unwrap();
        let back = MetricsLog::parse_csv(&log.to_csv_string(), Path::new("x")).unwrap();
        assert_eq!(back.records()[0].kappa, f64::INFINITY);
        assert_eq!(back.records()[0].ncc, f64::MIN_POSITIVE);
        assert!(back.records()[0].gen_gap.is_sign_negative());
    }

    #[test]
    fn steps_must_increase() {
        let mut log = MetricsLog::new();
        log.push(MetricRecord { step: 5, ..Default::default() }).unwrap();
        assert!(log.push(MetricRecord { step: 5, ..Default::default() }).is_err());
    }

    #[test]
    fn accuracy_range_enforced() {
        let mut log = MetricsLog::new();
        assert!(log.push(MetricRecord { val_acc: 1.5, ..Default::default() }).is_err());
    }

    #[test]
    fn bad_header_rejected() {
        assert!(MetricsLog::parse_csv("step,epoch\n", Path::new("x")).is_err());
    }

    #[test]
    fn io_error_names_path() {
        let e = write_metrics_csv(&MetricsLog::new(), Path::new("/nonexistent-dir/m.csv")).unwrap_err();
        assert!(e.to_string().contains("/nonexistent-dir/m.csv"));
    }

    #[test]
    fn mean_of_logs() {
        let mut a = MetricsLog::new();
        let mut b = MetricsLog::new();
        a.push(MetricRecord { step: 0, ncc: 1.0, train_acc: 0.5, ..Default::default() }).unwrap();
        b.push(MetricRecord { step: 0, ncc: 3.0, train_acc: 1.0, ..Default::default() }).unwrap();
        let m = mean_log(&[&a, &b]).unwrap();
        assert_eq!(m.records()[0].ncc, 2.0);
        assert_eq!(m.records()[0].train_acc, 0.75);
        b.push(MetricRecord { step: 1, ..Default::default() }).unwrap();
        assert!(mean_log(&[&a, &b]).is_err());
    }
}
