//! Image-quality metrics (SSIM, PSNR) and VOC-style detection evaluation
//! (IoU, per-class AP, mAP) over serialized detections.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::ImageBuf;
use crate::{Error, Result};

/// One detection or ground-truth box. Boxes are (cx, cy, w, h), normalized
/// to the unit square; `score` is present only for predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: Option<f64>,
}

const BOX_SLACK: f64 = 1e-6;

impl DetectionRecord {
    /// Enforce the unit-square invariant (with a tiny float slack) and the
    /// score range.
    pub fn validate(&self) -> Result<()> {
        let (x0, x1) = (self.cx - self.w / 2.0, self.cx + self.w / 2.0);
        let (y0, y1) = (self.cy - self.h / 2.0, self.cy + self.h / 2.0);
        if self.w < 0.0
            || self.h < 0.0
            || x0 < -BOX_SLACK
            || y0 < -BOX_SLACK
            || x1 > 1.0 + BOX_SLACK
            || y1 > 1.0 + BOX_SLACK
        {
            return Err(Error::Precondition(format!(
                "box ({}, {}, {}, {}) of image {} extends outside the unit square",
                self.cx, self.cy, self.w, self.h, self.image_id
            )));
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Precondition(format!(
                    "score {s} of image {} outside [0, 1]",
                    self.image_id
                )));
            }
        }
        Ok(())
    }
}

/// Aggregated metric results with stable field names.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_ssim: Option<f64>,
    pub mean_psnr: Option<f64>,
    pub per_class_ap: BTreeMap<u32, f64>,
    pub map50: Option<f64>,
    pub sample_count: usize,
    /// Set when mAP was requested but the ground truth was entirely empty.
    pub empty_ground_truth: bool,
}

impl MetricsReport {
    pub fn empty() -> Self {
        MetricsReport {
            mean_ssim: None,
            mean_psnr: None,
            per_class_ap: BTreeMap::new(),
            map50: None,
            sample_count: 0,
            empty_ground_truth: false,
        }
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01; // (0.01 L)^2 with L = 1
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel(n: usize, sigma: f64) -> Vec<f64> {
    let mid = (n as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= s;
    }
    k
}

/// Separable valid-mode filtering: output shrinks by n-1 per axis.
fn filter_valid(plane: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let n = kernel.len();
    let mut horiz = Array2::<f64>::zeros((h, w - n + 1));
    for y in 0..h {
        for x in 0..w - n + 1 {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * plane[[y, x + i]];
            }
            horiz[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h - n + 1, w - n + 1));
    for y in 0..h - n + 1 {
        for x in 0..w - n + 1 {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * horiz[[y + i, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Structural similarity on luminance, Gaussian-windowed (11x11, sigma 1.5),
/// mean over valid window positions. Inputs must share dimensions and live
/// in [0, 1].
pub fn ssim(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::Precondition(format!(
            "ssim inputs differ in shape: {:?} vs {:?}",
            a.data.dim(),
            b.data.dim()
        )));
    }
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::Precondition(format!(
            "image {}x{} smaller than the {}x{} ssim window",
            a.width(),
            a.height(),
            SSIM_WINDOW,
            SSIM_WINDOW
        )));
    }
    let x = a.luminance()?;
    let y = b.luminance()?;
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);

    let mu_x = filter_valid(&x, &k);
    let mu_y = filter_valid(&y, &k);
    let xx = filter_valid(&(&x * &x), &k);
    let yy = filter_valid(&(&y * &y), &k);
    let xy = filter_valid(&(&x * &y), &k);

    let mut acc = 0.0;
    let mut count = 0usize;
    ndarray::Zip::from(&mu_x)
        .and(&mu_y)
        .and(&xx)
        .and(&yy)
        .and(&xy)
        .for_each(|&mx, &my, &sxx, &syy, &sxy| {
            let var_x = sxx - mx * mx;
            let var_y = syy - my * my;
            let cov = sxy - mx * my;
            let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mx * mx + my * my + SSIM_C1) * (var_x + var_y + SSIM_C2);
            acc += num / den;
            count += 1;
        });
    Ok(acc / count as f64)
}

/// PSNR cap returned for identical images (zero MSE).
pub const PSNR_CAP: f64 = 100.0;

/// Peak signal-to-noise ratio in dB over all channels, inputs in [0, 1].
/// Zero (or vanishing) MSE saturates at the documented cap of 100 dB.
pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::Precondition(format!(
            "psnr inputs differ in shape: {:?} vs {:?}",
            a.data.dim(),
            b.data.dim()
        )));
    }
    let n = a.data.len() as f64;
    let mse = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Intersection-over-union of two (cx, cy, w, h) boxes.
pub fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let (ax0, ay0, ax1, ay1) = (
        a.0 - a.2 / 2.0,
        a.1 - a.3 / 2.0,
        a.0 + a.2 / 2.0,
        a.1 + a.3 / 2.0,
    );
    let (bx0, by0, bx1, by1) = (
        b.0 - b.2 / 2.0,
        b.1 - b.3 / 2.0,
        b.0 + b.2 / 2.0,
        b.1 + b.3 / 2.0,
    );
    let ix = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let iy = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn record_box(r: &DetectionRecord) -> (f64, f64, f64, f64) {
    (r.cx, r.cy, r.w, r.h)
}

/// Confidence ordering: descending score, ties broken by image id then by
/// input position, so evaluation is reproducible.
fn prediction_order(preds: &[(usize, &DetectionRecord)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| {
        let (pi, pj) = (preds[i].1, preds[j].1);
        pj.score
            .unwrap()
            .partial_cmp(&pi.score.unwrap())
            .unwrap()
            .then_with(|| pi.image_id.cmp(&pj.image_id))
            .then_with(|| preds[i].0.cmp(&preds[j].0))
    });
    order
}

/// Greedy matching in confidence order: each prediction takes the
/// highest-IoU unmatched ground truth of its class in its image, if that
/// IoU reaches the threshold. Returns one TP/FP flag per ranked prediction.
fn greedy_flags(
    ranked: &[&DetectionRecord],
    gts: &[(usize, &DetectionRecord)],
    iou_thresh: f64,
) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(ranked.len());
    for pred in ranked {
        let mut best: Option<(usize, f64)> = None;
        for (slot, (_, gt)) in gts.iter().enumerate() {
            if taken[slot] || gt.image_id != pred.image_id {
                continue;
            }
            let v = iou(record_box(pred), record_box(gt));
            if v >= iou_thresh {
                let better = match best {
                    None => true,
                    Some((_, bv)) => v > bv,
                };
                if better {
                    best = Some((slot, v));
                }
            }
        }
        match best {
            Some((slot, _)) => {
                taken[slot] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    flags
}

/// Area under the precision/recall curve with all-point interpolation
/// (running-max precision envelope, exact step integration).
fn ap_from_flags(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut points = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        let precision = tp as f64 / (i + 1) as f64;
        let recall = tp as f64 / n_gt as f64;
        points.push((recall, precision));
    }
    // Precision envelope: max precision at any recall >= r.
    let mut env = vec![0.0; points.len()];
    let mut run_max = 0.0f64;
    for i in (0..points.len()).rev() {
        run_max = run_max.max(points[i].1);
        env[i] = run_max;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        ap += (r - prev_recall) * env[i];
        prev_recall = r;
    }
    ap
}

/// VOC-style mAP: per class, greedy-match ranked predictions to ground
/// truths at `iou_thresh`, integrate the all-point-interpolated PR curve,
/// then average over the classes present in the ground truth.
pub fn mean_average_precision(
    preds: &[DetectionRecord],
    gts: &[DetectionRecord],
    iou_thresh: f64,
) -> Result<MetricsReport> {
    for p in preds {
        p.validate()?;
        if p.score.is_none() {
            return Err(Error::Precondition(format!(
                "prediction for image {} has no confidence score",
                p.image_id
            )));
        }
    }
    for g in gts {
        g.validate()?;
    }

    let mut report = MetricsReport::empty();
    report.sample_count = preds.len();
    if gts.is_empty() {
        report.map50 = Some(0.0);
        report.empty_ground_truth = true;
        return Ok(report);
    }

    let classes: BTreeSet<u32> = gts.iter().map(|g| g.class_id).collect();
    let mut ap_sum = 0.0;
    for &class in &classes {
        let class_preds: Vec<(usize, &DetectionRecord)> = preds
            .iter()
            .enumerate()
            .filter(|(_, p)| p.class_id == class)
            .collect();
        let class_gts: Vec<(usize, &DetectionRecord)> = gts
            .iter()
            .enumerate()
            .filter(|(_, g)| g.class_id == class)
            .collect();
        let order = prediction_order(&class_preds);
        let ranked: Vec<&DetectionRecord> = order.iter().map(|&i| class_preds[i].1).collect();
        let flags = greedy_flags(&ranked, &class_gts, iou_thresh);
        let ap = ap_from_flags(&flags, class_gts.len());
        report.per_class_ap.insert(class, ap);
        ap_sum += ap;
    }
    report.map50 = Some(ap_sum / classes.len() as f64);
    Ok(report)
}

/// Parse a per-image label file: one `class cx cy w h` line per box, with a
/// trailing confidence column when `with_scores` is set.
pub fn read_label_file(
    path: &Path,
    image_id: &str,
    with_scores: bool,
) -> Result<Vec<DetectionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let expected = if with_scores { 6 } else { 5 };
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != expected {
            return Err(Error::Dataset(format!(
                "{}:{}: expected {expected} fields, found {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| {
                Error::Dataset(format!(
                    "{}:{}: bad {what} value '{s}'",
                    path.display(),
                    lineno + 1
                ))
            })
        };
        let class_id = fields[0].parse::<u32>().map_err(|_| {
            Error::Dataset(format!(
                "{}:{}: bad class id '{}'",
                path.display(),
                lineno + 1,
                fields[0]
            ))
        })?;
        let rec = DetectionRecord {
            image_id: image_id.to_string(),
            class_id,
            cx: parse(fields[1], "cx")?,
            cy: parse(fields[2], "cy")?,
            w: parse(fields[3], "w")?,
            h: parse(fields[4], "h")?,
            score: if with_scores {
                Some(parse(fields[5], "score")?)
            } else {
                None
            },
        };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

/// Write records in the label format (trailing score column only when
/// present).
pub fn write_label_file(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        match r.score {
            Some(s) => text.push_str(&format!(
                "{} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
                r.class_id, r.cx, r.cy, r.w, r.h, s
            )),
            None => text.push_str(&format!(
                "{} {:.6} {:.6} {:.6} {:.6}\n",
                r.class_id, r.cx, r.cy, r.w, r.h
            )),
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn gray(data: Array2<f64>) -> ImageBuf {
        let (h, w) = data.dim();
        ImageBuf::new(data.into_shape_with_order((1, h, w)).unwrap(), (0.0, 1.0))
    }

    fn ramp(h: usize, w: usize) -> ImageBuf {
        gray(Array2::from_shape_fn((h, w), |(y, x)| {
            0.25 + 0.5 * ((x + y) as f64 / (h + w - 2) as f64)
        }))
    }

    #[test]
    fn ssim_identity_is_one() {
        let img = ramp(16, 20);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_symmetry() {
        let a = ramp(16, 16);
        let b = gray(Array2::from_shape_fn((16, 16), |(y, x)| {
            0.5 + 0.3 * ((x as f64 * 0.7).sin() * (y as f64 * 0.4).cos())
        }));
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn ssim_anticorrelated_ramp_is_negative() {
        // Mid-contrast ramp against its inversion: structure is perfectly
        // anticorrelated, so the covariance term drives SSIM below zero.
        let a = ramp(24, 24);
        let b = gray(a.data.index_axis(ndarray::Axis(0), 0).mapv(|v| 1.0 - v));
        let v = ssim(&a, &b).unwrap();
        assert!(v < 0.0, "ssim = {v}");
    }

    #[test]
    fn ssim_rejects_small_or_mismatched() {
        let a = ramp(8, 8);
        assert!(ssim(&a, &a).is_err());
        let b = ramp(16, 16);
        let c = ramp(16, 18);
        assert!(ssim(&b, &c).is_err());
    }

    #[test]
    fn psnr_identity_caps() {
        let img = ramp(12, 12);
        assert_eq!(psnr(&img, &img).unwrap(), PSNR_CAP);
    }

    #[test]
    fn psnr_closed_form() {
        let a = gray(Array2::zeros((10, 10)));
        let b = gray(Array2::from_elem((10, 10), 0.1));
        let v = psnr(&a, &b).unwrap();
        assert!((v - 20.0).abs() < 1e-9, "psnr = {v}");
    }

    #[test]
    fn psnr_multichannel_mse() {
        let a = ImageBuf::new(Array3::zeros((3, 4, 4)), (0.0, 1.0));
        let mut d = Array3::zeros((3, 4, 4));
        d[[0, 0, 0]] = 0.4; // mse = 0.16 / 48
        let b = ImageBuf::new(d, (0.0, 1.0));
        let expect = 10.0 * (48.0 / 0.16f64).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn iou_cases() {
        let a = (0.1, 0.1, 0.2, 0.2);
        assert!((iou(a, a) - 1.0).abs() < 1e-12);
        let far = (0.8, 0.8, 0.2, 0.2);
        assert_eq!(iou(a, far), 0.0);
        // Half-overlap fixture: intersection 0.02, union 0.06.
        let b = (0.2, 0.1, 0.2, 0.2);
        assert!((iou(a, b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_translation_invariant() {
        let a = (0.2, 0.2, 0.2, 0.1);
        let b = (0.25, 0.2, 0.2, 0.1);
        let shift = |t: (f64, f64, f64, f64)| (t.0 + 0.3, t.1 + 0.4, t.2, t.3);
        assert!((iou(a, b) - iou(shift(a), shift(b))).abs() < 1e-12);
    }

    fn det(
        image: &str,
        class: u32,
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
        score: Option<f64>,
    ) -> DetectionRecord {
        DetectionRecord {
            image_id: image.into(),
            class_id: class,
            cx,
            cy,
            w,
            h,
            score,
        }
    }

    #[test]
    fn map_perfect_predictions() {
        let gts = vec![
            det("a", 0, 0.3, 0.3, 0.2, 0.2, None),
            det("a", 1, 0.7, 0.7, 0.2, 0.2, None),
            det("b", 0, 0.5, 0.5, 0.3, 0.3, None),
        ];
        let preds: Vec<_> = gts
            .iter()
            .map(|g| DetectionRecord {
                score: Some(1.0),
                ..g.clone()
            })
            .collect();
        let rep = mean_average_precision(&preds, &gts, 0.5).unwrap();
        assert!((rep.map50.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rep.per_class_ap.len(), 2);
    }

    #[test]
    fn map_no_predictions_is_zero() {
        let gts = vec![det("a", 0, 0.3, 0.3, 0.2, 0.2, None)];
        let rep = mean_average_precision(&[], &gts, 0.5).unwrap();
        assert_eq!(rep.map50.unwrap(), 0.0);
        assert!(!rep.empty_ground_truth);
    }

    #[test]
    fn map_empty_ground_truth_flagged() {
        let preds = vec![det("a", 0, 0.3, 0.3, 0.2, 0.2, Some(0.9))];
        let rep = mean_average_precision(&preds, &[], 0.5).unwrap();
        assert_eq!(rep.map50.unwrap(), 0.0);
        assert!(rep.empty_ground_truth);
    }

    #[test]
    fn map_hand_fixture_two_classes() {
        // Class 0: gts in images a and b. Ranked preds: TP, duplicate FP
        // (ground truth already taken), TP. AP = 0.5*1 + 0.5*(2/3) = 5/6.
        // Class 1: one gt; ranked preds: FP (low IoU), TP. AP = 0.5.
        let gts = vec![
            det("a", 0, 0.30, 0.30, 0.20, 0.20, None),
            det("b", 0, 0.50, 0.50, 0.20, 0.20, None),
            det("a", 1, 0.70, 0.70, 0.20, 0.20, None),
        ];
        let preds = vec![
            det("a", 0, 0.30, 0.30, 0.20, 0.20, Some(0.9)),
            det("a", 0, 0.31, 0.30, 0.20, 0.20, Some(0.8)),
            det("b", 0, 0.50, 0.50, 0.20, 0.20, Some(0.7)),
            det("a", 1, 0.10, 0.10, 0.10, 0.10, Some(0.95)),
            det("a", 1, 0.70, 0.70, 0.20, 0.20, Some(0.6)),
        ];
        let rep = mean_average_precision(&preds, &gts, 0.5).unwrap();
        let ap0 = rep.per_class_ap[&0];
        let ap1 = rep.per_class_ap[&1];
        assert!((ap0 - 5.0 / 6.0).abs() < 1e-12, "ap0 = {ap0}");
        assert!((ap1 - 0.5).abs() < 1e-12, "ap1 = {ap1}");
        assert!((rep.map50.unwrap() - (5.0 / 6.0 + 0.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn map_score_rescaling_invariance() {
        let gts = vec![
            det("a", 0, 0.30, 0.30, 0.20, 0.20, None),
            det("b", 0, 0.50, 0.50, 0.20, 0.20, None),
        ];
        let preds = vec![
            det("a", 0, 0.30, 0.30, 0.20, 0.20, Some(0.8)),
            det("b", 0, 0.52, 0.50, 0.20, 0.20, Some(0.4)),
            det("b", 0, 0.90, 0.90, 0.10, 0.10, Some(0.6)),
        ];
        let r1 = mean_average_precision(&preds, &gts, 0.5).unwrap();
        let scaled: Vec<_> = preds
            .iter()
            .map(|p| DetectionRecord {
                score: p.score.map(|s| s * 0.5),
                ..p.clone()
            })
            .collect();
        let r2 = mean_average_precision(&scaled, &gts, 0.5).unwrap();
        assert_eq!(r1.map50, r2.map50);
        assert_eq!(r1.per_class_ap, r2.per_class_ap);
    }

    #[test]
    fn record_validation() {
        assert!(det("a", 0, 0.5, 0.5, 0.2, 0.2, Some(0.5)).validate().is_ok());
        assert!(det("a", 0, 0.05, 0.5, 0.2, 0.2, None).validate().is_err());
        assert!(det("a", 0, 0.5, 0.5, 0.2, 0.2, Some(1.5)).validate().is_err());
    }
}
