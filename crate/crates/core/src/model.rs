//! Domain types shared across the pipeline.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identity label of an individual animal.
pub type IdentityId = u32;

/// A single depth image in millimeters. Zero means "no measurement".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthFrame {
    width: usize,
    height: usize,
    data: Vec<u16>,
    pub sequence_id: String,
    pub frame_index: u64,
}

impl DepthFrame {
    pub fn new(
        width: usize,
        height: usize,
        data: Vec<u16>,
        sequence_id: impl Into<String>,
        frame_index: u64,
    ) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} frame",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            sequence_id: sequence_id.into(),
            frame_index,
        })
    }

    /// All-zero frame (every pixel invalid).
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
            sequence_id: String::new(),
            frame_index: 0,
        }
    }

    /// Same shape and provenance, new pixel data.
    pub(crate) fn with_data(&self, data: Vec<u16>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            width: self.width,
            height: self.height,
            data,
            sequence_id: self.sequence_id.clone(),
            frame_index: self.frame_index,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major pixel values.
    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> u16 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: u16) {
        self.data[v * self.width + u] = value;
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&d| d != 0).count()
    }

    pub fn same_shape(&self, other: &DepthFrame) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    /// Nominal Kinect V2 depth camera (512x424 grid).
    pub fn kinect_v2() -> Self {
        Self {
            fx: 365.0,
            fy: 365.0,
            cx: 256.0,
            cy: 212.0,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidParam(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < width as f64 && self.cy >= 0.0 && self.cy < height as f64)
        {
            return Err(Error::InvalidParam(format!(
                "principal point ({}, {}) outside {width}x{height}",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    /// Pixel coordinates and depth of a camera-frame point.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64, f64) {
        let [x, y, z] = p;
        (x * self.fx / z + self.cx, y * self.fy / z + self.cy, z)
    }
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self::kinect_v2()
    }
}

/// Tight box around a blob. `u_max` and `v_max` are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub u_min: usize,
    pub v_min: usize,
    pub u_max: usize,
    pub v_max: usize,
    pub area: usize,
}

impl BoundingBox {
    pub fn width(&self) -> usize {
        self.u_max - self.u_min
    }

    pub fn height(&self) -> usize {
        self.v_max - self.v_min
    }

    pub fn contains(&self, u: usize, v: usize) -> bool {
        u >= self.u_min && u < self.u_max && v >= self.v_min && v < self.v_max
    }

    /// Box covering a whole crop placed at the frame origin.
    pub fn whole(frame: &DepthFrame) -> Self {
        Self {
            u_min: 0,
            v_min: 0,
            u_max: frame.width(),
            v_max: frame.height(),
            area: frame.valid_count().max(1),
        }
    }
}

/// Ordered 3D points in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub label: Option<IdentityId>,
    pub sequence_id: String,
    pub frame_index: u64,
    /// Source pixel `(u, v)` of each point, when the cloud came from a depth crop.
    pub pixels: Option<Vec<(u32, u32)>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self {
            points,
            label: None,
            sequence_id: String::new(),
            frame_index: 0,
            pixels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::Invariant(format!("point {i} is not finite")));
        }
        Ok(())
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for j in 0..3 {
                c[j] += p[j];
            }
        }
        c.map(|s| s / n)
    }

    /// Copy of provenance with new points; per-point pixels are dropped.
    pub fn with_points(&self, points: Vec<[f64; 3]>) -> Self {
        Self {
            points,
            label: self.label,
            sequence_id: self.sequence_id.clone(),
            frame_index: self.frame_index,
            pixels: None,
        }
    }

    /// Subset by index, carrying pixel provenance along.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            label: self.label,
            sequence_id: self.sequence_id.clone(),
            frame_index: self.frame_index,
            pixels: self
                .pixels
                .as_ref()
                .map(|px| indices.iter().map(|&i| px[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

/// Reference to one labeled sample, with the temporal position the
/// neighbor-removal step needs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleRef {
    pub id: String,
    pub identity: IdentityId,
    pub sequence_id: String,
    pub frame_index: u64,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub cloud: PointCloud,
    pub identity: IdentityId,
    pub split_tag: SplitTag,
}

impl Sample {
    pub fn reference(&self) -> SampleRef {
        SampleRef {
            id: self.id.clone(),
            identity: self.identity,
            sequence_id: self.cloud.sequence_id.clone(),
            frame_index: self.cloud.frame_index,
        }
    }
}

/// Train/test membership plus the neighbor-removal radius that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratio: f64,
    pub n: u64,
    /// Dataset index the references resolve against, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub unknown_identities: Vec<IdentityId>,
    pub train_ids: Vec<SampleRef>,
    pub test_ids: Vec<SampleRef>,
    pub pre_removal_train_ids: Vec<SampleRef>,
}

impl SplitManifest {
    pub fn validate(&self) -> Result<()> {
        let train: HashSet<&str> = self.train_ids.iter().map(|s| s.id.as_str()).collect();
        if let Some(s) = self.test_ids.iter().find(|s| train.contains(s.id.as_str())) {
            return Err(Error::Invariant(format!(
                "train_ids and test_ids overlap (sample `{}`)",
                s.id
            )));
        }
        for &u in &self.unknown_identities {
            if self.train_ids.iter().any(|s| s.identity == u) {
                return Err(Error::Invariant(format!(
                    "unknown identity {u} still has entries in train_ids"
                )));
            }
        }
        let pre: HashSet<&str> = self
            .pre_removal_train_ids
            .iter()
            .map(|s| s.id.as_str())
            .collect();
        if let Some(s) = self.train_ids.iter().find(|s| !pre.contains(s.id.as_str())) {
            return Err(Error::Invariant(format!(
                "train_ids is not a subset of pre_removal_train_ids (sample `{}`)",
                s.id
            )));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Invariant(format!("ratio {} outside (0, 1)", self.ratio)));
        }
        Ok(())
    }

    pub fn is_unknown(&self, identity: IdentityId) -> bool {
        self.unknown_identities.contains(&identity)
    }
}

/// Labeled embeddings plus the kNN rule configuration. Distance is Euclidean.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    pub entries: Vec<GalleryEntry>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub embedding: Vec<f64>,
    pub identity: IdentityId,
    /// Sample the embedding came from, if recorded.
    pub sample_id: Option<String>,
}

impl Gallery {
    pub fn new(entries: Vec<GalleryEntry>, k: usize) -> Result<Self> {
        let g = Self { entries, k };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.entries.first().ok_or(Error::EmptyGallery)?;
        let dim = first.embedding.len();
        if let Some(i) = self.entries.iter().position(|e| e.embedding.len() != dim) {
            return Err(Error::DimensionMismatch(format!(
                "gallery entry {i} has dimension {} (expected {dim})",
                self.entries[i].embedding.len()
            )));
        }
        if self.k == 0 || self.k > self.entries.len() {
            return Err(Error::InvalidParam(format!(
                "k = {} must lie in 1..={}",
                self.k,
                self.entries.len()
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, |e| e.embedding.len())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
