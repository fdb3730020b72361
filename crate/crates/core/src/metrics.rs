//! Segmentation metrics: intersection-over-union and precision at IoU
//! thresholds, plus the evaluation report emitted by the harness.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::fmt_shape;
use crate::{Error, Result};

/// Thresholds reported as Pr@X.
pub const PRECISION_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Binarizes a real-valued mask at the threshold (strictly greater).
pub fn binarize(mask: &Tensor, threshold: f64) -> Vec<bool> {
    mask.data().iter().map(|v| *v > threshold).collect()
}

/// IoU of two binary masks of equal length. Both empty counts as a perfect
/// match (1.0); that case cannot arise from our data, which always has a
/// nonempty ground truth.
pub fn iou_bits(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "iou",
            format!("mask lengths {} and {} differ", pred.len(), gt.len()),
        ));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        inter += usize::from(*p && *g);
        union += usize::from(*p || *g);
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// IoU of a predicted soft mask against a binary ground truth, both
/// binarized at 0.5.
pub fn iou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "iou",
            format!(
                "prediction {} and target {} differ",
                fmt_shape(pred.shape()),
                fmt_shape(gt.shape())
            ),
        ));
    }
    iou_bits(&binarize(pred, 0.5), &binarize(gt, 0.5))
}

/// Fraction of samples with IoU strictly greater than the threshold.
pub fn precision_at(ious: &[f64], x: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Data("precision over an empty sample set is undefined".into()));
    }
    if !(0.0..1.0).contains(&x) || x == 0.0 {
        return Err(Error::Config(format!("precision threshold {x} must lie in (0,1)")));
    }
    let hits = ious.iter().filter(|v| **v > x).count();
    Ok(hits as f64 / ious.len() as f64)
}

/// Aggregate evaluation result over a sample set.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub n: usize,
    pub mean_iou: f64,
    /// (threshold, precision) pairs in threshold order.
    pub precisions: [(f64, f64); 5],
    pub per_sample: Vec<f64>,
}

impl EvalReport {
    pub fn from_ious(per_sample: Vec<f64>) -> Result<EvalReport> {
        let n = per_sample.len();
        if n == 0 {
            return Err(Error::Data("cannot build a report from zero samples".into()));
        }
        let mean_iou = per_sample.iter().sum::<f64>() / n as f64;
        let mut precisions = [(0.0, 0.0); 5];
        for (slot, x) in precisions.iter_mut().zip(PRECISION_THRESHOLDS) {
            *slot = (x, precision_at(&per_sample, x)?);
        }
        Ok(EvalReport {
            n,
            mean_iou,
            precisions,
            per_sample,
        })
    }

    /// Human-readable key=value block; deterministic, no timestamps.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("n={}\n", self.n));
        out.push_str(&format!("mean_iou={:.6}\n", self.mean_iou));
        for (x, p) in self.precisions {
            out.push_str(&format!("pr@{x:.1}={p:.6}\n"));
        }
        out
    }
}

/// Header for the append-only results ledger.
pub const LEDGER_HEADER: &str = "suite\tconfig\tseed\tiou\tpr@0.5\tpr@0.6\tpr@0.7\tpr@0.8\tpr@0.9\twall_seconds\n";

/// One ledger row.
pub fn ledger_row(suite: &str, config: &str, seed: u64, report: &EvalReport, wall_seconds: f64) -> String {
    let prs: Vec<String> = report.precisions.iter().map(|(_, p)| format!("{p:.6}")).collect();
    format!(
        "{suite}\t{config}\t{seed}\t{:.6}\t{}\t{wall_seconds:.1}\n",
        report.mean_iou,
        prs.join("\t")
    )
}

/// Appends a row to the ledger, writing the header first when the file is
/// new.
pub fn append_ledger(path: &Path, row: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        f.write_all(LEDGER_HEADER.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    f.write_all(row.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn bits(v: &[u8]) -> Vec<bool> {
        v.iter().map(|b| *b > 0).collect()
    }

    #[test]
    fn identical_masks_score_one() {
        let m = bits(&[1, 0, 1, 1, 0]);
        assert_eq!(iou_bits(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_nonempty_masks_score_zero() {
        let a = bits(&[1, 1, 0, 0]);
        let b = bits(&[0, 0, 1, 1]);
        assert_eq!(iou_bits(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn counting_example_two_over_six() {
        // overlap 2, union 6
        let a = bits(&[1, 1, 1, 1, 0, 0, 0]);
        let b = bits(&[1, 1, 0, 0, 1, 1, 0]);
        let v = iou_bits(&a, &b).unwrap();
        assert_eq!(v, 1.0 / 3.0);
    }

    #[test]
    fn both_empty_is_defined_as_one() {
        let e = bits(&[0, 0, 0]);
        assert_eq!(iou_bits(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn iou_is_symmetric() {
        let mut r = rng::seeded(5);
        for _ in 0..50 {
            let a: Vec<bool> = (0..64).map(|_| rng::unit(&mut r) < 0.3).collect();
            let b: Vec<bool> = (0..64).map(|_| rng::unit(&mut r) < 0.3).collect();
            assert_eq!(iou_bits(&a, &b).unwrap(), iou_bits(&b, &a).unwrap());
        }
    }

    #[test]
    fn tensor_iou_binarizes_at_half() {
        let pred = Tensor::from_vec(&[1, 2, 2], vec![0.9, 0.51, 0.49, 0.1]).unwrap();
        let gt = Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        // pred on = {0,1}, gt on = {0,2}: inter 1, union 3
        assert_eq!(iou(&pred, &gt).unwrap(), 1.0 / 3.0);
        assert!(iou(&pred, &Tensor::zeros(&[1, 2, 3])).is_err());
        assert!(iou_bits(&[true], &[true, false]).is_err());
    }

    #[test]
    fn precision_examples_are_exact() {
        let ious = [0.6, 0.4, 0.9];
        assert_eq!(precision_at(&ious, 0.5).unwrap(), 2.0 / 3.0);
        // strictly greater: a score equal to the threshold does not count
        assert_eq!(precision_at(&[0.5, 0.5], 0.5).unwrap(), 0.0);
        assert_eq!(precision_at(&[0.1, 0.2], 0.9).unwrap(), 0.0);
        assert!(precision_at(&[], 0.5).is_err());
        assert!(precision_at(&[0.5], 0.0).is_err());
        assert!(precision_at(&[0.5], 1.0).is_err());
    }

    #[test]
    fn report_mean_and_monotonicity() {
        let mut r = rng::seeded(6);
        for _ in 0..20 {
            let ious: Vec<f64> = (0..30).map(|_| rng::unit(&mut r)).collect();
            let report = EvalReport::from_ious(ious.clone()).unwrap();
            let mean = ious.iter().sum::<f64>() / ious.len() as f64;
            assert!((report.mean_iou - mean).abs() < 1e-15);
            for pair in report.precisions.windows(2) {
                assert!(pair[0].1 >= pair[1].1, "precision increased with threshold");
            }
        }
    }

    #[test]
    fn report_text_is_deterministic_and_timestamp_free() {
        let report = EvalReport::from_ious(vec![0.25, 0.75]).unwrap();
        let text = report.render_text();
        assert_eq!(text, report.render_text());
        assert!(text.starts_with("n=2\nmean_iou=0.500000\n"));
        assert!(text.contains("pr@0.7=0.500000"));
    }

    #[test]
    fn ledger_appends_and_keeps_one_header() {
        let dir = std::env::temp_dir().join("m3att-metrics-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("ledger-{}.tsv", std::process::id()));
        let _ = std::fs::remove_file(&path);
        let report = EvalReport::from_ious(vec![0.8, 0.6]).unwrap();
        append_ledger(&path, &ledger_row("suite", "cfg", 1, &report, 2.0)).unwrap();
        append_ledger(&path, &ledger_row("suite", "cfg", 2, &report, 2.5)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let headers = text.matches("suite\tconfig").count();
        assert_eq!(headers, 1);
        assert_eq!(text.lines().count(), 3);
        std::fs::remove_file(&path).unwrap();
    }
}
