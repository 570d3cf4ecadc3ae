//! Frame- and sequence-level containers shared by alignment, losses, and
//! reconstruction: ground-truth samples, predictions, camera intrinsics, and
//! SE(3) poses, plus the sequence manifest format.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{read_tensor, write_tensor, Tensor, TensorError};
use crate::util::write_json;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("manifest {0}: {1}")]
    Manifest(PathBuf, String),
    #[error("frame {frame}: {what} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        frame: usize,
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("frame {frame}: mask value {value} is not binary")]
    NonBinaryMask { frame: usize, value: f64 },
    #[error("frame {frame}: depth does not equal the point-map z channel at valid pixel {pixel}")]
    DepthZMismatch { frame: usize, pixel: usize },
    #[error("frame {frame}: non-positive depth {value} at valid pixel {pixel}")]
    NonPositiveDepth {
        frame: usize,
        pixel: usize,
        value: f64,
    },
    #[error("rotation is not special orthogonal (|R^T R - I| = {ortho:.3e}, det = {det:.12})")]
    BadRotation { ortho: f64, det: f64 },
    #[error("sequence is empty")]
    EmptySequence,
    #[error("stride {0} outside [1, 5]")]
    BadStride(usize),
    #[error("frame {0}: prediction required but absent")]
    MissingPrediction(usize),
    #[error("points tensor must be 3xN or 3xHxW, got {0:?}")]
    BadPointShape(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Pinhole intrinsics in pixels. Pixel (u, v) maps to the camera ray
/// `((u - cx)/f, (v - cy)/f, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Ground truth for one frame: camera-frame point map, its z-channel as
/// depth, validity mask, and intrinsics. Invalid pixels carry zeros.
#[derive(Debug, Clone)]
pub struct FrameSample {
    pub point_map: Tensor,
    pub depth: Tensor,
    pub valid_mask: Tensor,
    pub intrinsics: Intrinsics,
}

/// Model output for one frame. `mask_logits` live in [0, 1] and binarize at
/// 0.5.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub point_map: Tensor,
    pub depth: Tensor,
    pub mask_logits: Tensor,
}

pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct Frame {
    pub sample: FrameSample,
    pub pred: Option<Prediction>,
}

/// An ordered run of frames sharing one resolution and camera.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub stride: usize,
}

/// Rigid transform: `p_out = R * p_in + t`. Scene-frame poses here map
/// camera coordinates into the world anchored at frame 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Validated constructor: R must be orthonormal with det +1 within 1e-9.
    pub fn from_parts(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        let (ortho, det) = pose.orthonormality();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(GeometryError::BadRotation { ortho, det });
        }
        Ok(pose)
    }

    fn orthonormality(&self) -> (f64, f64) {
        let r = &self.rotation;
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        (worst, det)
    }

    pub fn rotation_y(angle: f64) -> [[f64; 3]; 3] {
        let (s, c) = angle.sin_cos();
        [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
    }

    pub fn rotation_x(angle: f64) -> [[f64; 3]; 3] {
        let (s, c) = angle.sin_cos();
        [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
    }

    pub fn rotation_z(angle: f64) -> [[f64; 3]; 3] {
        let (s, c) = angle.sin_cos();
        [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = self.translation;
        let ti = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        Self {
            rotation: rt,
            translation: ti,
        }
    }

    /// `self` after `other`: (self ∘ other)(p) = self(other(p)).
    pub fn compose(&self, other: &PoseSE3) -> Self {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Self {
            rotation: r,
            translation: self.apply(other.translation),
        }
    }

    /// Angle in radians between this rotation and another.
    pub fn rotation_angle_to(&self, other: &PoseSE3) -> f64 {
        let rel = self.inverse().compose(other);
        let trace = rel.rotation[0][0] + rel.rotation[1][1] + rel.rotation[2][2];
        ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    pub fn translation_distance_to(&self, other: &PoseSE3) -> f64 {
        let d = [
            self.translation[0] - other.translation[0],
            self.translation[1] - other.translation[1],
            self.translation[2] - other.translation[2],
        ];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }
}

/// Transform a 3xN (or 3xHxW) point tensor by a pose, column by column.
pub fn apply_pose(points: &Tensor, pose: &PoseSE3) -> Result<Tensor> {
    let n = match points.shape() {
        [3, n] => *n,
        [3, h, w] => h * w,
        s => return Err(GeometryError::BadPointShape(s.to_vec())),
    };
    let data = points.data();
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let p = pose.apply([data[i], data[n + i], data[2 * n + i]]);
        out[i] = p[0];
        out[n + i] = p[1];
        out[2 * n + i] = p[2];
    }
    Ok(Tensor::new(points.shape().to_vec(), out).unwrap())
}

impl FrameSample {
    pub fn resolution(&self) -> (usize, usize) {
        (self.depth.shape()[0], self.depth.shape()[1])
    }

    /// Enforce the container invariants: binary mask, depth == point-map z,
    /// positive depth at valid pixels, finite everywhere.
    pub fn validate(&self, frame: usize) -> Result<()> {
        let (h, w) = self.resolution();
        expect_shape(frame, "point_map", &[3, h, w], self.point_map.shape())?;
        expect_shape(frame, "mask", &[h, w], self.valid_mask.shape())?;
        self.point_map.validate_finite()?;
        self.depth.validate_finite()?;
        let n = h * w;
        let z = &self.point_map.data()[2 * n..];
        for i in 0..n {
            let m = self.valid_mask.data()[i];
            if m != 0.0 && m != 1.0 {
                return Err(GeometryError::NonBinaryMask { frame, value: m });
            }
            if m == 1.0 {
                let d = self.depth.data()[i];
                if d != z[i] {
                    return Err(GeometryError::DepthZMismatch { frame, pixel: i });
                }
                if d <= 0.0 {
                    return Err(GeometryError::NonPositiveDepth {
                        frame,
                        pixel: i,
                        value: d,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn valid_count(&self) -> usize {
        self.valid_mask.data().iter().filter(|&&m| m == 1.0).count()
    }
}

impl Prediction {
    pub fn validate(&self, frame: usize) -> Result<()> {
        let (h, w) = (self.depth.shape()[0], self.depth.shape()[1]);
        expect_shape(frame, "pred_point_map", &[3, h, w], self.point_map.shape())?;
        expect_shape(frame, "pred_mask", &[h, w], self.mask_logits.shape())?;
        self.point_map.validate_finite()?;
        self.depth.validate_finite()?;
        self.mask_logits.validate_finite()?;
        Ok(())
    }

    pub fn binary_mask(&self) -> Tensor {
        self.mask_logits
            .map(|v| if v > MASK_THRESHOLD { 1.0 } else { 0.0 })
    }
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.frames[0].sample.resolution()
    }

    pub fn intrinsics(&self) -> Intrinsics {
        self.frames[0].sample.intrinsics
    }

    pub fn pred(&self, j: usize) -> Result<&Prediction> {
        self.frames[j]
            .pred
            .as_ref()
            .ok_or(GeometryError::MissingPrediction(j))
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(GeometryError::EmptySequence);
        }
        if !(1..=5).contains(&self.stride) {
            return Err(GeometryError::BadStride(self.stride));
        }
        let (h, w) = self.resolution();
        for (j, frame) in self.frames.iter().enumerate() {
            expect_shape(j, "depth", &[h, w], frame.sample.depth.shape())?;
            frame.sample.validate(j)?;
            if let Some(pred) = &frame.pred {
                expect_shape(j, "pred_depth", &[h, w], pred.depth.shape())?;
                pred.validate(j)?;
            }
        }
        Ok(())
    }
}

fn expect_shape(
    frame: usize,
    what: &'static str,
    expected: &[usize],
    got: &[usize],
) -> Result<()> {
    if expected != got {
        return Err(GeometryError::ShapeMismatch {
            frame,
            what,
            expected: expected.to_vec(),
            got: got.to_vec(),
        });
    }
    Ok(())
}

// --- manifest format -------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameEntry {
    pub point_map: String,
    pub depth: String,
    pub mask: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred_point_map: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred_depth: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred_mask: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub length: usize,
    pub stride: usize,
    pub intrinsics: Intrinsics,
    pub frames: Vec<FrameEntry>,
}

/// Per-frame camera-to-world poses, row-major rotations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseFile {
    pub poses: Vec<PoseSE3>,
}

pub fn save_poses(path: &Path, poses: &[PoseSE3]) -> Result<()> {
    write_json(
        path,
        &PoseFile {
            poses: poses.to_vec(),
        },
    )?;
    Ok(())
}

pub fn load_poses(path: &Path) -> Result<Vec<PoseSE3>> {
    let raw = std::fs::read(path)?;
    let file: PoseFile = serde_json::from_slice(&raw)
        .map_err(|e| GeometryError::Manifest(path.to_path_buf(), e.to_string()))?;
    for p in &file.poses {
        PoseSE3::from_parts(p.rotation, p.translation)?;
    }
    Ok(file.poses)
}

/// Load and fully validate a sequence from `manifest.json`. Tensor paths are
/// resolved relative to the manifest's directory.
pub fn load_sequence(manifest_path: &Path) -> Result<Sequence> {
    let raw = std::fs::read(manifest_path)?;
    let manifest: Manifest = serde_json::from_slice(&raw)
        .map_err(|e| GeometryError::Manifest(manifest_path.to_path_buf(), e.to_string()))?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    if manifest.frames.len() != manifest.length {
        return Err(GeometryError::Manifest(
            manifest_path.to_path_buf(),
            format!(
                "length field {} does not match {} frame entries",
                manifest.length,
                manifest.frames.len()
            ),
        ));
    }
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for entry in &manifest.frames {
        let sample = FrameSample {
            point_map: read_tensor(&dir.join(&entry.point_map))?,
            depth: read_tensor(&dir.join(&entry.depth))?,
            valid_mask: read_tensor(&dir.join(&entry.mask))?,
            intrinsics: manifest.intrinsics,
        };
        let pred = match (&entry.pred_point_map, &entry.pred_depth, &entry.pred_mask) {
            (Some(pm), Some(d), Some(m)) => Some(Prediction {
                point_map: read_tensor(&dir.join(pm))?,
                depth: read_tensor(&dir.join(d))?,
                mask_logits: read_tensor(&dir.join(m))?,
            }),
            (None, None, None) => None,
            _ => {
                return Err(GeometryError::Manifest(
                    manifest_path.to_path_buf(),
                    "prediction entries must be all present or all absent".into(),
                ))
            }
        };
        frames.push(Frame { sample, pred });
    }
    let seq = Sequence {
        frames,
        stride: manifest.stride,
    };
    seq.validate()?;
    Ok(seq)
}

/// Write a sequence into `dir` as NTF tensors plus `manifest.json`.
pub fn save_sequence(dir: &Path, seq: &Sequence) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(seq.frames.len());
    for (j, frame) in seq.frames.iter().enumerate() {
        let names = FrameEntry {
            point_map: format!("frame_{j:04}_point_map.ntf"),
            depth: format!("frame_{j:04}_depth.ntf"),
            mask: format!("frame_{j:04}_mask.ntf"),
            pred_point_map: frame
                .pred
                .as_ref()
                .map(|_| format!("frame_{j:04}_pred_point_map.ntf")),
            pred_depth: frame
                .pred
                .as_ref()
                .map(|_| format!("frame_{j:04}_pred_depth.ntf")),
            pred_mask: frame
                .pred
                .as_ref()
                .map(|_| format!("frame_{j:04}_pred_mask.ntf")),
        };
        write_tensor(
            &dir.join(&names.point_map),
            &format!("point_map_{j}"),
            &frame.sample.point_map,
        )?;
        write_tensor(
            &dir.join(&names.depth),
            &format!("depth_{j}"),
            &frame.sample.depth,
        )?;
        write_tensor(
            &dir.join(&names.mask),
            &format!("mask_{j}"),
            &frame.sample.valid_mask,
        )?;
        if let Some(pred) = &frame.pred {
            write_tensor(
                &dir.join(names.pred_point_map.as_ref().unwrap()),
                &format!("pred_point_map_{j}"),
                &pred.point_map,
            )?;
            write_tensor(
                &dir.join(names.pred_depth.as_ref().unwrap()),
                &format!("pred_depth_{j}"),
                &pred.depth,
            )?;
            write_tensor(
                &dir.join(names.pred_mask.as_ref().unwrap()),
                &format!("pred_mask_{j}"),
                &pred.mask_logits,
            )?;
        }
        entries.push(names);
    }
    let manifest = Manifest {
        length: seq.frames.len(),
        stride: seq.stride,
        intrinsics: seq.intrinsics(),
        frames: entries,
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}
