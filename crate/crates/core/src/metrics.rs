//! Image-quality and detection metrics.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Number of gray levels of an 8-bit image.
pub const LEVELS: usize = 256;
/// Side of the square contrast window.
pub const CONTRAST_WINDOW: usize = 60;

fn histogram<'a>(pixels: impl IntoIterator<Item = &'a u8>) -> [u64; LEVELS] {
    let mut h = [0u64; LEVELS];
    for &p in pixels {
        h[p as usize] += 1;
    }
    h
}

/// Shannon entropy in bits of the gray-level histogram over valid pixels.
pub fn entropy(img: &[u8], mask: Option<&[bool]>) -> Result<f64> {
    let hist = match mask {
        Some(mask) => {
            if mask.len() != img.len() {
                return Err(Error::invalid("mask length differs from image length"));
            }
            histogram(img.iter().zip(mask).filter(|(_, v)| **v).map(|(p, _)| p))
        }
        None => histogram(img),
    };
    entropy_of_histogram(&hist)
}

pub fn entropy_of_histogram(hist: &[u64; LEVELS]) -> Result<f64> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(Error::EmptyRegion);
    }
    let total = total as f64;
    let h = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Standard deviation of the 256-bin histogram of a pixel set.
pub fn histogram_contrast(pixels: &[u8]) -> Result<f64> {
    if pixels.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let hist = histogram(pixels);
    let mean = pixels.len() as f64 / LEVELS as f64;
    let var = hist.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / LEVELS as f64;
    Ok(var.sqrt())
}

/// Histogram contrast of the `window x window` region centred on `center`,
/// clipped to the image.
pub fn contrast(img: &[u8], width: usize, height: usize, center: (usize, usize), window: usize) -> Result<f64> {
    if img.len() != width * height {
        return Err(Error::invalid("image length differs from width x height"));
    }
    let (cx, cy) = (center.0 as isize, center.1 as isize);
    let half = (window / 2) as isize;
    let x0 = cx - half;
    let y0 = cy - half;
    let x1 = x0 + window as isize;
    let y1 = y0 + window as isize;
    let cx0 = x0.max(0) as usize;
    let cy0 = y0.max(0) as usize;
    let cx1 = x1.clamp(0, width as isize) as usize;
    let cy1 = y1.clamp(0, height as isize) as usize;
    if cx0 >= cx1 || cy0 >= cy1 {
        return Err(Error::EmptyRegion);
    }
    if x0 < 0 || y0 < 0 || x1 > width as isize || y1 > height as isize {
        log::warn!("contrast window at ({}, {}) clipped to the image", center.0, center.1);
    }
    let mut region = Vec::with_capacity((cx1 - cx0) * (cy1 - cy0));
    for y in cy0..cy1 {
        region.extend_from_slice(&img[y * width + cx0..y * width + cx1]);
    }
    histogram_contrast(&region)
}

/// Share of singular-value mass in the leading `max(1, floor(ρ% min(d, n)))`
/// singular values. Values below `σ_max · max(d, n) · ε` count as zero; a
/// zero matrix gives 1.
pub fn cdf_curve(m: &DMatrix<f64>, rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho <= 100.0) {
        return Err(Error::invalid(format!("rho must lie in (0, 100], got {rho}")));
    }
    let mut s = linalg::singular_values(m);
    // numerical rank cut-off
    let tol = s.first().copied().unwrap_or(0.0) * m.nrows().max(m.ncols()) as f64 * f64::EPSILON;
    for v in s.iter_mut() {
        if *v <= tol {
            *v = 0.0;
        }
    }
    let total: f64 = s.iter().sum();
    if s.is_empty() || total == 0.0 {
        return Ok(1.0);
    }
    let count = ((rho / 100.0 * s.len() as f64).floor() as usize).clamp(1, s.len());
    let head: f64 = s[..count].iter().sum();
    Ok((head / total).min(1.0))
}

/// Axis-aligned pixel box `[x, x + w) x [y, y + h)` in frame `frame`.
/// Ground truth uses the same record; its score defaults to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub frame: usize,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    #[serde(default = "unit_score")]
    pub score: f64,
}

fn unit_score() -> f64 {
    1.0
}

impl DetectionBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

pub fn iou(a: &DetectionBox, b: &DetectionBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w).saturating_sub(a.x.max(b.x));
    let iy = (a.y + a.h).min(b.y + b.h).saturating_sub(a.y.max(b.y));
    let inter = (ix * iy) as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Reads JSON-lines boxes, skipping blank lines.
pub fn parse_boxes_jsonl(text: &str) -> Result<Vec<DetectionBox>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn boxes_to_jsonl(boxes: &[DetectionBox]) -> Result<String> {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&serde_json::to_string(b)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub n_g: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub undefined: bool,
}

impl DetectionScores {
    pub fn from_counts(tp: usize, fp: usize, n_g: usize) -> Self {
        let mut undefined = false;
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            undefined = true;
            0.0
        };
        let recall = if n_g > 0 {
            tp as f64 / n_g as f64
        } else {
            undefined = true;
            0.0
        };
        Self {
            precision,
            recall,
            f1: f1_score(precision, recall),
            undefined,
        }
    }
}

/// `2 P R / (P + R)`, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Greedy one-to-one matching in descending score order. Returns, for each
/// detection in that order, its score and whether it matched.
fn greedy_flags(dets: &[DetectionBox], gts: &[DetectionBox], iou_thresh: f64) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|di| {
            let det = &dets[di];
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                if taken[gi] || gt.frame != det.frame {
                    continue;
                }
                let v = iou(det, gt);
                if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
            }
            (det.score, best.is_some())
        })
        .collect()
}

pub fn match_and_score(dets: &[DetectionBox], gts: &[DetectionBox], iou_thresh: f64) -> (MatchResult, DetectionScores) {
    let flags = greedy_flags(dets, gts, iou_thresh);
    let tp = flags.iter().filter(|(_, m)| *m).count();
    let result = MatchResult {
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
        n_g: gts.len(),
    };
    (result, DetectionScores::from_counts(tp, result.fp, gts.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// PR points at every distinct score threshold and the all-point AP of the
/// monotone precision envelope.
pub fn pr_curve_and_ap(dets: &[DetectionBox], gts: &[DetectionBox], iou_thresh: f64) -> (Vec<PrPoint>, f64) {
    if dets.is_empty() || gts.is_empty() {
        return (Vec::new(), 0.0);
    }
    let flags = greedy_flags(dets, gts, iou_thresh);
    let n_g = gts.len() as f64;
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (k, (score, matched)) in flags.iter().enumerate() {
        if *matched {
            tp += 1;
        }
        let last_of_tie = flags.get(k + 1).is_none_or(|(next, _)| next != score);
        if last_of_tie {
            points.push(PrPoint {
                threshold: *score,
                precision: tp as f64 / (k + 1) as f64,
                recall: tp as f64 / n_g,
            });
        }
    }
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    (points, ap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(frame: usize, x: usize, y: usize, w: usize, h: usize, score: f64) -> DetectionBox {
        DetectionBox {
            frame,
            x,
            y,
            w,
            h,
            score,
        }
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[7; 100], None).unwrap(), 0.0);
        let half: Vec<u8> = (0..100).map(|i| if i < 50 { 0 } else { 255 }).collect();
        assert_eq!(entropy(&half, None).unwrap(), 1.0);
        let uniform: Vec<u8> = (0..=255).collect();
        assert_eq!(entropy(&uniform, None).unwrap(), 8.0);
        assert!(matches!(entropy(&[], None), Err(Error::EmptyRegion)));
        let masked = entropy(&[1, 2, 3, 4], Some(&[true, true, false, false])).unwrap();
        assert_eq!(masked, 1.0);
    }

    #[test]
    fn contrast_examples() {
        let flat: Vec<u8> = (0..=255).collect();
        assert_eq!(histogram_contrast(&flat).unwrap(), 0.0);
        let mu = 3600.0 / 256.0;
        let oracle = (((3600.0 - mu) * (3600.0 - mu) + 255.0 * mu * mu) / 256.0f64).sqrt();
        let got = histogram_contrast(&[90; 3600]).unwrap();
        assert!((got - oracle).abs() < 1e-9);
        assert!((got - 224.560_116_881_315_34).abs() < 1e-9);
        let img = vec![90u8; 100 * 100];
        assert!((contrast(&img, 100, 100, (50, 50), 60).unwrap() - oracle).abs() < 1e-9);
        assert!(contrast(&img, 100, 100, (0, 0), 60).is_ok());
    }

    #[test]
    fn contrast_permutation_invariance() {
        let img: Vec<u8> = (0..3600).map(|i| ((i * 7919) % 97) as u8).collect();
        let perm: Vec<u8> = img.iter().map(|&p| 255 - p).collect();
        assert_eq!(histogram_contrast(&img).unwrap(), histogram_contrast(&perm).unwrap());
    }

    #[test]
    fn cdf_examples() {
        let u = DMatrix::from_fn(8, 1, |i, _| i as f64 + 1.0);
        let v = DMatrix::from_fn(5, 1, |i, _| 2.0 - i as f64);
        let rank1 = &u * v.transpose();
        for rho in [1.0, 20.0, 100.0] {
            assert_eq!(cdf_curve(&rank1, rho).unwrap(), 1.0);
        }
        let eye = DMatrix::<f64>::identity(10, 10);
        assert!((cdf_curve(&eye, 30.0).unwrap() - 0.3).abs() < 1e-12);
        assert!((cdf_curve(&eye, 5.0).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(cdf_curve(&DMatrix::zeros(3, 3), 10.0).unwrap(), 1.0);
        assert!(cdf_curve(&eye, 0.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = bx(0, 0, 0, 10, 10, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(0, 20, 20, 10, 10, 1.0)), 0.0);
        assert!((iou(&a, &bx(0, 5, 0, 10, 10, 1.0)) - 50.0 / 150.0).abs() < 1e-15);
    }

    #[test]
    fn table_counts() {
        let s = DetectionScores::from_counts(139, 4265, 563);
        assert!((s.precision - 139.0 / 4404.0).abs() < 1e-15);
        assert!((s.recall - 139.0 / 563.0).abs() < 1e-15);
        assert_eq!((s.precision * 1000.0).round() / 10.0, 3.2);
        assert_eq!((s.recall * 1000.0).round() / 10.0, 24.7);
        assert!((f1_score(0.032, 0.247) - 0.057).abs() < 5e-4);
        let s = DetectionScores::from_counts(418, 542, 563);
        assert_eq!((s.recall * 1000.0).round() / 10.0, 74.2);
        assert!((f1_score(0.435, 0.742) - 0.548).abs() < 5e-4);
    }

    #[test]
    fn perfect_detections() {
        let gts = vec![bx(0, 1, 1, 5, 5, 1.0), bx(1, 10, 10, 4, 4, 1.0)];
        let (m, s) = match_and_score(&gts, &gts, 0.5);
        assert_eq!(
            m,
            MatchResult {
                tp: 2,
                fp: 0,
                fn_: 0,
                n_g: 2
            }
        );
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        assert_eq!(pr_curve_and_ap(&gts, &gts, 0.5).1, 1.0);
        assert_eq!(pr_curve_and_ap(&[], &gts, 0.5).1, 0.0);
        let (_, s) = match_and_score(&[], &gts, 0.5);
        assert!(s.undefined);
    }

    #[test]
    fn matching_is_one_to_one_and_score_ordered() {
        let gts = vec![bx(0, 0, 0, 10, 10, 1.0)];
        let dets = vec![bx(0, 1, 0, 10, 10, 0.2), bx(0, 0, 0, 10, 10, 0.9)];
        let (m, _) = match_and_score(&dets, &gts, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
        // the other frame's ground truth never matches
        let (m, _) = match_and_score(&[bx(1, 0, 0, 10, 10, 1.0)], &gts, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
    }

    #[test]
    fn three_detection_envelope() {
        // two gts; detections by score: hit (0.9), miss (0.8), hit (0.7)
        let gts = vec![bx(0, 0, 0, 10, 10, 1.0), bx(0, 50, 50, 10, 10, 1.0)];
        let dets = vec![
            bx(0, 0, 0, 10, 10, 0.9),
            bx(0, 30, 30, 10, 10, 0.8),
            bx(0, 50, 50, 10, 10, 0.7),
        ];
        let (points, ap) = pr_curve_and_ap(&dets, &gts, 0.5);
        let pr: Vec<(f64, f64)> = points.iter().map(|p| (p.precision, p.recall)).collect();
        assert_eq!(pr, vec![(1.0, 0.5), (0.5, 0.5), (2.0 / 3.0, 1.0)]);
        // envelope (1, 2/3, 2/3): 0.5 * 1 + 0 * 2/3 + 0.5 * 2/3
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn jsonl_round_trip() {
        let boxes = vec![bx(3, 1, 2, 3, 4, 0.5)];
        let text = boxes_to_jsonl(&boxes).unwrap();
        assert_eq!(parse_boxes_jsonl(&text).unwrap(), boxes);
        let gt = parse_boxes_jsonl("{\"frame\":0,\"x\":1,\"y\":1,\"w\":2,\"h\":2}\n\n").unwrap();
        assert_eq!(gt[0].score, 1.0);
    }

    fn box_strategy() -> impl Strategy<Value = DetectionBox> {
        (0usize..3, 0usize..40, 0usize..40, 1usize..15, 1usize..15, 0.0f64..1.0)
            .prop_map(|(f, x, y, w, h, s)| bx(f, x, y, w, h, s))
    }

    proptest! {
        #[test]
        fn entropy_bounded(img in proptest::collection::vec(any::<u8>(), 1..600)) {
            let h = entropy(&img, None).unwrap();
            prop_assert!((0.0..=8.0).contains(&h));
        }

        #[test]
        fn cdf_monotone_in_rho(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = DMatrix::from_fn(9, 7, |_, _| rng.random_range(-1.0..1.0));
            let mut prev = 0.0;
            for rho in [5.0, 15.0, 30.0, 50.0, 75.0, 100.0] {
                let c = cdf_curve(&m, rho).unwrap();
                prop_assert!(c >= prev - 1e-15);
                prev = c;
            }
            prop_assert!((prev - 1.0).abs() < 1e-12);
        }

        #[test]
        fn accounting_identity(
            dets in proptest::collection::vec(box_strategy(), 0..20),
            gts in proptest::collection::vec(box_strategy(), 0..20),
        ) {
            let (m, _) = match_and_score(&dets, &gts, 0.5);
            prop_assert_eq!(m.tp + m.fn_, m.n_g);
            prop_assert_eq!(m.tp + m.fp, dets.len());
        }

        #[test]
        fn ap_invariant_under_monotone_rescaling(
            dets in proptest::collection::vec(box_strategy(), 1..20),
            gts in proptest::collection::vec(box_strategy(), 1..20),
        ) {
            let rescaled: Vec<DetectionBox> = dets.iter().map(|d| DetectionBox { score: (3.0 * d.score).exp(), ..*d }).collect();
            let (_, a) = pr_curve_and_ap(&dets, &gts, 0.5);
            let (_, b) = pr_curve_and_ap(&rescaled, &gts, 0.5);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
