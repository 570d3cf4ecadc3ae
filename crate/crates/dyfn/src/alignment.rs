//! Affine scale-shift alignment of predicted depth to ground truth, the
//! AbsRel / delta1 metrics, and the three sequence evaluation protocols
//! (metric, video, image) including prefix-interval evaluation for long
//! sequences.
//!
//! The default solver minimizes the inverse-depth-weighted least-squares
//! objective `sum (1/d_i) (s * x_i + t - d_i)^2` in closed form via the 2x2
//! normal equations. An iteratively-reweighted mode approximates the L1
//! variant of the same objective.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Sequence};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("insufficient data: {n_valid} valid pixels")]
    InsufficientData { n_valid: usize },
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, AlignError>;

/// The affine map `d_aligned = scale * d_pred + shift`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineAlignment {
    #[serde(rename = "s")]
    pub scale: f64,
    #[serde(rename = "t")]
    pub shift: f64,
}

impl AffineAlignment {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            shift: 0.0,
        }
    }

    pub fn apply(&self, depth: f64) -> f64 {
        self.scale * depth + self.shift
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// Closed-form inverse-depth-weighted least squares.
    WeightedL2,
    /// Iteratively reweighted approximation of the L1 objective
    /// (weights `1 / max(|r|, 1e-6)`, 10 iterations from the L2 solution).
    IrlsL1,
}

pub const DELTA1_THRESHOLD: f64 = 1.25;
const IRLS_ITERATIONS: usize = 10;
const IRLS_RESIDUAL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub delta1: f64,
    pub n_valid: usize,
}

/// One (pred, gt) depth pair with its inverse-depth weight.
#[derive(Clone, Copy)]
struct Obs {
    pred: f64,
    gt: f64,
}

fn collect_obs(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Vec<Obs> {
    debug_assert_eq!(pred.shape(), gt.shape());
    debug_assert_eq!(pred.shape(), mask.shape());
    let mut obs = Vec::new();
    for i in 0..gt.len() {
        if mask.data()[i] == 1.0 {
            obs.push(Obs {
                pred: pred.data()[i],
                gt: gt.data()[i],
            });
        }
    }
    obs
}

/// Weighted normal-equation solve over observations with per-observation
/// weights `base_w * extra_w`. Accumulation order follows the slice.
fn solve_weighted(obs: &[Obs], extra_w: Option<&[f64]>) -> Result<AffineAlignment> {
    if obs.len() < 2 {
        return Err(AlignError::InsufficientData { n_valid: obs.len() });
    }
    let (mut sw, mut swx, mut swxx, mut swxy, mut swy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, o) in obs.iter().enumerate() {
        let mut w = 1.0 / o.gt;
        if let Some(e) = extra_w {
            w *= e[i];
        }
        sw += w;
        swx += w * o.pred;
        swxx += w * o.pred * o.pred;
        swxy += w * o.pred * o.gt;
        swy += w * o.gt;
    }
    let det = sw * swxx - swx * swx;
    if det.abs() <= 1e-12 * sw.abs().max(1.0) * swxx.abs().max(1.0) {
        return Err(AlignError::DegenerateFit(
            "singular normal equations (all predictions equal?)".into(),
        ));
    }
    let scale = (sw * swxy - swx * swy) / det;
    let shift = (swxx * swy - swx * swxy) / det;
    if scale <= 0.0 {
        return Err(AlignError::DegenerateFit(format!(
            "non-positive scale {scale}"
        )));
    }
    Ok(AffineAlignment { scale, shift })
}

fn solve_mode(obs: &[Obs], mode: AlignMode) -> Result<AffineAlignment> {
    let l2 = solve_weighted(obs, None)?;
    match mode {
        AlignMode::WeightedL2 => Ok(l2),
        AlignMode::IrlsL1 => {
            let mut fit = l2;
            for _ in 0..IRLS_ITERATIONS {
                let w: Vec<f64> = obs
                    .iter()
                    .map(|o| 1.0 / (fit.apply(o.pred) - o.gt).abs().max(IRLS_RESIDUAL_FLOOR))
                    .collect();
                fit = solve_weighted(obs, Some(&w))?;
            }
            Ok(fit)
        }
    }
}

/// The weighted objective value the solvers minimize (L2 form).
pub fn weighted_objective(pred: &Tensor, gt: &Tensor, mask: &Tensor, fit: &AffineAlignment) -> f64 {
    let mut acc = 0.0;
    for i in 0..gt.len() {
        if mask.data()[i] == 1.0 {
            let r = fit.apply(pred.data()[i]) - gt.data()[i];
            acc += r * r / gt.data()[i];
        }
    }
    acc
}

/// Align one frame's predicted depth to ground truth.
pub fn solve_affine_frame(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<AffineAlignment> {
    solve_affine_frame_mode(pred, gt, mask, AlignMode::WeightedL2)
}

pub fn solve_affine_frame_mode(
    pred: &Tensor,
    gt: &Tensor,
    mask: &Tensor,
    mode: AlignMode,
) -> Result<AffineAlignment> {
    solve_mode(&collect_obs(pred, gt, mask), mode)
}

/// One (s, t) for the whole sequence: the same weighted objective pooled
/// across frames.
pub fn solve_affine_global(seq: &Sequence) -> Result<AffineAlignment> {
    solve_affine_global_mode(seq, AlignMode::WeightedL2)
}

pub fn solve_affine_global_mode(seq: &Sequence, mode: AlignMode) -> Result<AffineAlignment> {
    let mut obs = Vec::new();
    for (j, frame) in seq.frames.iter().enumerate() {
        let pred = seq.pred(j)?;
        obs.extend(collect_obs(
            &pred.depth,
            &frame.sample.depth,
            &frame.sample.valid_mask,
        ));
    }
    solve_mode(&obs, mode)
}

/// The first-frame strategy: fit on frame 0 only, apply everywhere.
pub fn solve_affine_firstframe(seq: &Sequence) -> Result<AffineAlignment> {
    let pred = seq.pred(0)?;
    let frame = &seq.frames[0];
    solve_affine_frame(&pred.depth, &frame.sample.depth, &frame.sample.valid_mask)
}

/// AbsRel and delta1 over valid pixels, with the alignment applied to the
/// prediction when given. Aligned depths <= 0 count as delta1 failures;
/// AbsRel always uses `|d - d_hat| / d`.
pub fn compute_metrics(
    pred: &Tensor,
    gt: &Tensor,
    mask: &Tensor,
    align: Option<AffineAlignment>,
) -> Result<DepthMetrics> {
    let mut acc = MetricAccumulator::default();
    acc.update(pred, gt, mask, align);
    acc.finish()
}

/// Streaming pooled accumulation of AbsRel / delta1 across frames.
#[derive(Default, Clone)]
pub struct MetricAccumulator {
    abs_rel_sum: f64,
    delta_hits: usize,
    n: usize,
}

impl MetricAccumulator {
    pub fn update(
        &mut self,
        pred: &Tensor,
        gt: &Tensor,
        mask: &Tensor,
        align: Option<AffineAlignment>,
    ) {
        for i in 0..gt.len() {
            if mask.data()[i] != 1.0 {
                continue;
            }
            let d = gt.data()[i];
            let a = match align {
                Some(fit) => fit.apply(pred.data()[i]),
                None => pred.data()[i],
            };
            self.abs_rel_sum += (d - a).abs() / d;
            if a > 0.0 && (d / a).max(a / d) < DELTA1_THRESHOLD {
                self.delta_hits += 1;
            }
            self.n += 1;
        }
    }

    pub fn finish(&self) -> Result<DepthMetrics> {
        if self.n == 0 {
            return Err(AlignError::InsufficientData { n_valid: 0 });
        }
        Ok(DepthMetrics {
            abs_rel: self.abs_rel_sum / self.n as f64,
            delta1: self.delta_hits as f64 / self.n as f64,
            n_valid: self.n,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Raw predictions, no alignment.
    Metric,
    /// One global (s, t) for the whole sequence.
    Video,
    /// An independent (s, t) per frame.
    Image,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub prefix: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global_alignment: Option<AffineAlignment>,
    #[serde(flatten)]
    pub pooled: DepthMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceEvaluation {
    pub protocol: Protocol,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global_alignment: Option<AffineAlignment>,
    pub per_frame: Vec<DepthMetrics>,
    pub pooled: DepthMetrics,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub intervals: Vec<IntervalRecord>,
}

/// Evaluate a sequence under one protocol; `intervals` lists prefix lengths
/// for the long-sequence study (the sequence-wide alignment is re-solved for
/// each prefix).
pub fn evaluate_sequence(
    seq: &Sequence,
    protocol: Protocol,
    intervals: &[usize],
) -> Result<SequenceEvaluation> {
    let global = match protocol {
        Protocol::Video => Some(solve_affine_global(seq)?),
        Protocol::Metric | Protocol::Image => None,
    };
    let mut per_frame = Vec::with_capacity(seq.len());
    let mut pooled = MetricAccumulator::default();
    for (j, frame) in seq.frames.iter().enumerate() {
        let pred = seq.pred(j)?;
        let align = match protocol {
            Protocol::Metric => None,
            Protocol::Video => global,
            Protocol::Image => Some(solve_affine_frame(
                &pred.depth,
                &frame.sample.depth,
                &frame.sample.valid_mask,
            )?),
        };
        per_frame.push(compute_metrics(
            &pred.depth,
            &frame.sample.depth,
            &frame.sample.valid_mask,
            align,
        )?);
        pooled.update(&pred.depth, &frame.sample.depth, &frame.sample.valid_mask, align);
    }

    let mut interval_records = Vec::new();
    for &prefix in intervals {
        let prefix = prefix.min(seq.len());
        let sub = Sequence {
            frames: seq.frames[..prefix].to_vec(),
            stride: seq.stride,
        };
        let fit = match protocol {
            Protocol::Video => Some(solve_affine_global(&sub)?),
            Protocol::Metric | Protocol::Image => None,
        };
        let mut acc = MetricAccumulator::default();
        for (j, frame) in sub.frames.iter().enumerate() {
            let pred = sub.pred(j)?;
            let align = match protocol {
                Protocol::Metric => None,
                Protocol::Video => fit,
                Protocol::Image => Some(solve_affine_frame(
                    &pred.depth,
                    &frame.sample.depth,
                    &frame.sample.valid_mask,
                )?),
            };
            acc.update(&pred.depth, &frame.sample.depth, &frame.sample.valid_mask, align);
        }
        interval_records.push(IntervalRecord {
            prefix,
            global_alignment: fit,
            pooled: acc.finish()?,
        });
    }

    Ok(SequenceEvaluation {
        protocol,
        global_alignment: global,
        per_frame,
        pooled: pooled.finish()?,
        intervals: interval_records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::test_fixtures::flat_frame;
    use crate::geometry::{Frame, Prediction, Sequence};

    fn mask_all(h: usize, w: usize) -> Tensor {
        Tensor::full(&[h, w], 1.0)
    }

    fn pred_from_depth(depth: &Tensor, intr: crate::geometry::Intrinsics) -> Prediction {
        let (h, w) = (depth.shape()[0], depth.shape()[1]);
        let n = h * w;
        let mut pm = vec![0.0; 3 * n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let z = depth.data()[i];
                pm[i] = (x as f64 - intr.cx) / intr.f * z;
                pm[n + i] = (y as f64 - intr.cy) / intr.f * z;
                pm[2 * n + i] = z;
            }
        }
        Prediction {
            point_map: Tensor::new(vec![3, h, w], pm).unwrap(),
            depth: depth.clone(),
            mask_logits: Tensor::full(&[h, w], 1.0),
        }
    }

    fn varied_depth(h: usize, w: usize, base: f64) -> Tensor {
        Tensor::from_fn(&[h, w], |i| base + 0.12 * (i % 7) as f64 + 0.03 * (i % 3) as f64)
    }

    fn seq_with_pred_depths(gt: Vec<Tensor>, pred: Vec<Tensor>) -> Sequence {
        let frames = gt
            .into_iter()
            .zip(pred)
            .map(|(g, p)| {
                let h = g.shape()[0];
                let w = g.shape()[1];
                let mut sample = flat_frame(h, w, 1.0);
                let n = h * w;
                let mut pm = sample.point_map.data().to_vec();
                for y in 0..h {
                    for x in 0..w {
                        let i = y * w + x;
                        let z = g.data()[i];
                        pm[i] = (x as f64 - sample.intrinsics.cx) / sample.intrinsics.f * z;
                        pm[n + i] = (y as f64 - sample.intrinsics.cy) / sample.intrinsics.f * z;
                        pm[2 * n + i] = z;
                    }
                }
                sample.point_map = Tensor::new(vec![3, h, w], pm).unwrap();
                sample.depth = g;
                let pred = pred_from_depth(&p, sample.intrinsics);
                Frame {
                    sample,
                    pred: Some(pred),
                }
            })
            .collect();
        Sequence { frames, stride: 1 }
    }

    #[test]
    fn perfect_prediction_fits_identity() {
        let gt = varied_depth(4, 4, 2.0);
        let fit = solve_affine_frame(&gt, &gt, &mask_all(4, 4)).unwrap();
        assert_eq!(fit.scale, 1.0);
        assert_eq!(fit.shift, 0.0);
    }

    #[test]
    fn exact_affine_relation_recovered() {
        let pred = varied_depth(4, 4, 2.0);
        let gt = pred.map(|v| 2.0 * v + 3.0);
        let fit = solve_affine_frame(&pred, &gt, &mask_all(4, 4)).unwrap();
        assert!((fit.scale - 2.0).abs() < 1e-12);
        assert!((fit.shift - 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_prediction_is_degenerate() {
        let pred = Tensor::full(&[3, 3], 1.0);
        let gt = varied_depth(3, 3, 2.0);
        assert!(matches!(
            solve_affine_frame(&pred, &gt, &mask_all(3, 3)),
            Err(AlignError::DegenerateFit(_))
        ));
    }

    #[test]
    fn too_few_pixels_is_insufficient() {
        let pred = varied_depth(2, 2, 1.0);
        let gt = varied_depth(2, 2, 2.0);
        let mut mask = vec![0.0; 4];
        mask[0] = 1.0;
        let mask = Tensor::new(vec![2, 2], mask).unwrap();
        assert!(matches!(
            solve_affine_frame(&pred, &gt, &mask),
            Err(AlignError::InsufficientData { n_valid: 1 })
        ));
    }

    #[test]
    fn anticorrelated_prediction_rejected_nonpositive_scale() {
        let pred = varied_depth(3, 3, 1.0);
        let gt = pred.map(|v| 10.0 - v);
        assert!(matches!(
            solve_affine_frame(&pred, &gt, &mask_all(3, 3)),
            Err(AlignError::DegenerateFit(_))
        ));
    }

    #[test]
    fn global_fit_recovers_shared_affine() {
        let p0 = varied_depth(4, 4, 4.0);
        let p1 = varied_depth(4, 4, 6.0);
        let g0 = p0.map(|v| 0.5 * v + 1.0);
        let g1 = p1.map(|v| 0.5 * v + 1.0);
        let seq = seq_with_pred_depths(vec![g0, g1], vec![p0, p1]);
        let fit = solve_affine_global(&seq).unwrap();
        assert!((fit.scale - 0.5).abs() < 1e-12);
        assert!((fit.shift - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_frame_global_equals_frame_fit() {
        let p = varied_depth(4, 4, 3.0);
        let g = p.map(|v| 1.7 * v - 0.4);
        let seq = seq_with_pred_depths(vec![g.clone()], vec![p.clone()]);
        let global = solve_affine_global(&seq).unwrap();
        let frame = solve_affine_frame(&p, &g, &mask_all(4, 4)).unwrap();
        assert_eq!(global, frame);
        let first = solve_affine_firstframe(&seq).unwrap();
        assert_eq!(global, first);
    }

    #[test]
    fn first_frame_fit_ignores_later_frames() {
        let p0 = varied_depth(4, 4, 2.0);
        let g0 = p0.map(|v| 3.0 * v);
        let p1 = varied_depth(4, 4, 5.0);
        let g1 = p1.map(|v| 0.25 * v + 2.0);
        let seq = seq_with_pred_depths(vec![g0, g1], vec![p0, p1]);
        let fit = solve_affine_firstframe(&seq).unwrap();
        assert!((fit.scale - 3.0).abs() < 1e-12);
        assert!(fit.shift.abs() < 1e-12);
    }

    #[test]
    fn metrics_on_perfect_prediction() {
        let gt = varied_depth(4, 4, 2.0);
        let m = compute_metrics(&gt, &gt, &mask_all(4, 4), None).unwrap();
        assert_eq!(m.abs_rel, 0.0);
        assert_eq!(m.delta1, 1.0);
        assert_eq!(m.n_valid, 16);
    }

    #[test]
    fn abs_rel_hand_computed() {
        let pred = Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap();
        let gt = Tensor::new(vec![1, 2], vec![4.0, 4.0]).unwrap();
        let m = compute_metrics(&pred, &gt, &mask_all(1, 2), None).unwrap();
        assert!((m.abs_rel - 0.375).abs() < 1e-15);
    }

    #[test]
    fn uniform_ratio_above_threshold_fails_delta() {
        let gt = varied_depth(3, 3, 2.0);
        let pred = gt.scale(1.3);
        let m = compute_metrics(&pred, &gt, &mask_all(3, 3), None).unwrap();
        assert_eq!(m.delta1, 0.0);
        assert!((m.abs_rel - 0.3).abs() < 1e-12);
    }

    #[test]
    fn negative_aligned_depth_fails_delta_not_absrel() {
        let pred = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let gt = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let fit = AffineAlignment {
            scale: 1.0,
            shift: -1.5,
        };
        let m = compute_metrics(&pred, &gt, &mask_all(1, 2), Some(fit)).unwrap();
        // aligned = [-0.5, 0.5]; first pixel negative -> delta fail
        assert_eq!(m.delta1, 0.0);
        assert!((m.abs_rel - (1.5 / 1.0 + 1.5 / 2.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn delta1_symmetric_under_swap() {
        let a = varied_depth(4, 4, 2.0);
        let b = varied_depth(4, 4, 2.0).map(|v| v * 1.21 + 0.05);
        let m1 = compute_metrics(&a, &b, &mask_all(4, 4), None).unwrap();
        let m2 = compute_metrics(&b, &a, &mask_all(4, 4), None).unwrap();
        assert_eq!(m1.delta1, m2.delta1);
    }

    #[test]
    fn zero_valid_pixels_is_error() {
        let t = varied_depth(2, 2, 1.0);
        let mask = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            compute_metrics(&t, &t, &mask, None),
            Err(AlignError::InsufficientData { n_valid: 0 })
        ));
    }

    #[test]
    fn scale_equivariance_exact_for_power_of_two() {
        let pred = varied_depth(4, 4, 3.0);
        let gt = pred.map(|v| 1.3 * v + 0.2);
        let mask = mask_all(4, 4);
        let base = solve_affine_frame(&pred, &gt, &mask).unwrap();
        let scaled = solve_affine_frame(&pred.scale(4.0), &gt, &mask).unwrap();
        assert_eq!(scaled.scale, base.scale / 4.0);
        let m0 = compute_metrics(&pred, &gt, &mask, Some(base)).unwrap();
        let m1 = compute_metrics(&pred.scale(4.0), &gt, &mask, Some(scaled)).unwrap();
        assert!((m0.abs_rel - m1.abs_rel).abs() < 1e-10);
        assert_eq!(m0.delta1, m1.delta1);
    }

    #[test]
    fn irls_mode_converges_on_exact_data() {
        let pred = varied_depth(4, 4, 2.0);
        let gt = pred.map(|v| 2.0 * v + 1.0);
        let fit = solve_affine_frame_mode(&pred, &gt, &mask_all(4, 4), AlignMode::IrlsL1).unwrap();
        assert!((fit.scale - 2.0).abs() < 1e-9);
        assert!((fit.shift - 1.0).abs() < 1e-9);
    }

    #[test]
    fn irls_is_robust_to_one_outlier() {
        // one wild pixel: L1-style reweighting should track the inlier line
        // more closely than plain weighted L2
        let pred = varied_depth(4, 4, 2.0);
        let mut gt_v = pred.map(|v| 2.0 * v + 1.0).data().to_vec();
        gt_v[5] = 40.0;
        let gt = Tensor::new(vec![4, 4], gt_v).unwrap();
        let mask = mask_all(4, 4);
        let l2 = solve_affine_frame_mode(&pred, &gt, &mask, AlignMode::WeightedL2).unwrap();
        let l1 = solve_affine_frame_mode(&pred, &gt, &mask, AlignMode::IrlsL1).unwrap();
        assert!((l1.scale - 2.0).abs() < (l2.scale - 2.0).abs());
    }

    #[test]
    fn evaluate_sequence_protocols_on_perfect_preds() {
        let d0 = varied_depth(4, 4, 2.0);
        let d1 = varied_depth(4, 4, 3.0);
        let seq = seq_with_pred_depths(vec![d0.clone(), d1.clone()], vec![d0, d1]);
        for protocol in [Protocol::Metric, Protocol::Video, Protocol::Image] {
            let eval = evaluate_sequence(&seq, protocol, &[]).unwrap();
            assert!(eval.pooled.abs_rel < 1e-12, "{protocol:?}");
            assert_eq!(eval.pooled.delta1, 1.0);
            assert_eq!(eval.per_frame.len(), 2);
        }
    }

    #[test]
    fn interval_prefix_one_equals_single_frame() {
        let d0 = varied_depth(4, 4, 2.0);
        let p0 = d0.map(|v| v * 1.1);
        let d1 = varied_depth(4, 4, 3.0);
        let p1 = d1.map(|v| v * 0.8);
        let seq = seq_with_pred_depths(vec![d0, d1], vec![p0, p1]);
        let eval = evaluate_sequence(&seq, Protocol::Video, &[1]).unwrap();
        let single = Sequence {
            frames: vec![seq.frames[0].clone()],
            stride: 1,
        };
        let single_eval = evaluate_sequence(&single, Protocol::Video, &[]).unwrap();
        assert_eq!(eval.intervals[0].pooled, single_eval.pooled);
    }
}
