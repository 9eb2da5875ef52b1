//! Deterministic synthetic herd: per-identity dorsal heightfields rendered
//! by a top-down depth camera, with sensor noise, dropout holes and walking
//! sequences, plus writing and reading the on-disk dataset layout.
//!
//! Body-local coordinates: `a` runs along the spine (head at `+L/2`),
//! `b` across it. The footprint is an ellipse; height above the floor is
//! smooth inside it and drops to the floor as a vertical wall at its rim.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloudops::{farthest_point_sample, normalize_cloud, unproject, StartRule};
use crate::error::{Error, Result};
use crate::io::{read_depth_crop, read_ply, write_depth_crop, write_depth_frame, write_ply};
use crate::model::{BoundingBox, CameraIntrinsics, DepthFrame, IdentityId, PointCloud, Sample, SampleRef, SplitTag};
use crate::segmentation::{segment_frame, SegmentationParams};

/// A Gaussian bump placed symmetrically left and right of the spine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    /// Along the body, 0 at the head and 1 at the tail.
    pub position: f64,
    pub amplitude: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityShape {
    pub body_length: f64,
    pub body_width: f64,
    /// Back height above the floor as `c0 + c1 s + c2 s^2 + c3 s^3`, `s` in [-1, 1] head to tail.
    pub height_profile: [f64; 4],
    /// Height lost between the spine and the rim.
    pub side_drop: f64,
    /// `(amplitude, width)`.
    pub spine_ridge: (f64, f64),
    pub hook_bumps: Bump,
    pub pin_bumps: Bump,
    pub seed: u64,
}

/// Lateral offsets of hook and pin bumps as fractions of the half width.
const HOOK_SPREAD: f64 = 0.55;
const PIN_SPREAD: f64 = 0.3;

/// Sampling range of each shape parameter, in [`IdentityShape::features`] order.
pub const PARAMETER_RANGES: [(f64, f64); 15] = [
    (1.35, 1.65),   // body_length
    (0.45, 0.60),   // body_width
    (1.35, 1.50),   // c0
    (-0.06, 0.06),  // c1
    (-0.20, -0.05), // c2
    (-0.05, 0.05),  // c3
    (0.12, 0.25),   // side_drop
    (0.01, 0.04),   // ridge amplitude
    (0.03, 0.08),   // ridge width
    (0.55, 0.70),   // hook position
    (0.02, 0.06),   // hook amplitude
    (0.06, 0.10),   // hook radius
    (0.80, 0.92),   // pin position
    (0.01, 0.05),   // pin amplitude
    (0.04, 0.08),   // pin radius
];

/// Ridge of the exaggerated-spine identity.
pub const EXAGGERATED_RIDGE: (f64, f64) = (0.12, 0.05);

fn gauss(d2: f64, r: f64) -> f64 {
    (-d2 / (2.0 * r * r)).exp()
}

impl IdentityShape {
    fn draw<R: Rng + ?Sized>(rng: &mut R, seed: u64) -> Self {
        let v: Vec<f64> = PARAMETER_RANGES.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect();
        Self {
            body_length: v[0],
            body_width: v[1],
            height_profile: [v[2], v[3], v[4], v[5]],
            side_drop: v[6],
            spine_ridge: (v[7], v[8]),
            hook_bumps: Bump {
                position: v[9],
                amplitude: v[10],
                radius: v[11],
            },
            pin_bumps: Bump {
                position: v[12],
                amplitude: v[13],
                radius: v[14],
            },
            seed,
        }
    }

    /// Parameters in [`PARAMETER_RANGES`] order.
    pub fn features(&self) -> [f64; 15] {
        let [c0, c1, c2, c3] = self.height_profile;
        let (h, p) = (self.hook_bumps, self.pin_bumps);
        [
            self.body_length,
            self.body_width,
            c0,
            c1,
            c2,
            c3,
            self.side_drop,
            self.spine_ridge.0,
            self.spine_ridge.1,
            h.position,
            h.amplitude,
            h.radius,
            p.position,
            p.amplitude,
            p.radius,
        ]
    }

    /// Largest per-parameter difference, each scaled by its sampling range.
    pub fn separation(&self, other: &IdentityShape) -> f64 {
        self.features()
            .iter()
            .zip(other.features())
            .zip(PARAMETER_RANGES)
            .map(|((a, b), (lo, hi))| (a - b).abs() / (hi - lo))
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        let amps = [self.spine_ridge.0, self.hook_bumps.amplitude, self.pin_bumps.amplitude, self.side_drop];
        let pos = [self.hook_bumps.position, self.pin_bumps.position];
        if amps.iter().any(|&a| !(a >= 0.0))
            || pos.iter().any(|p| !(0.0..=1.0).contains(p))
            || !(self.body_length > 0.0 && self.body_width > 0.0)
            || !(self.spine_ridge.1 > 0.0 && self.hook_bumps.radius > 0.0 && self.pin_bumps.radius > 0.0)
        {
            return Err(Error::InvalidParam("identity shape out of its valid ranges".into()));
        }
        Ok(())
    }

    /// `rho^2 - 1`: negative strictly inside the footprint.
    fn rim(&self, a: f64, b: f64) -> f64 {
        let (ha, hb) = (self.body_length / 2.0, self.body_width / 2.0);
        (a / ha).powi(2) + (b / hb).powi(2) - 1.0
    }

    /// Height of the smooth top surface, valid inside the footprint.
    pub fn top_height(&self, a: f64, b: f64) -> f64 {
        let ha = self.body_length / 2.0;
        let hw = self.body_width / 2.0;
        let s = -a / ha;
        let [c0, c1, c2, c3] = self.height_profile;
        let base = c0 + s * (c1 + s * (c2 + s * c3));
        let q = self.rim(a, b) + 1.0;
        let mut h = base - self.side_drop * q * q;
        let (ra, rw) = self.spine_ridge;
        h += ra * gauss(b * b, rw);
        for (bump, spread) in [(self.hook_bumps, HOOK_SPREAD), (self.pin_bumps, PIN_SPREAD)] {
            let ab = (0.5 - bump.position) * self.body_length;
            let lat = spread * hw;
            let da2 = (a - ab).powi(2);
            h += bump.amplitude * (gauss(da2 + (b - lat).powi(2), bump.radius) + gauss(da2 + (b + lat).powi(2), bump.radius));
        }
        h
    }

    /// Height above the floor; zero outside the footprint.
    pub fn height(&self, a: f64, b: f64) -> f64 {
        if self.rim(a, b) < 0.0 {
            self.top_height(a, b)
        } else {
            0.0
        }
    }

    /// Upper bound on the surface height: the peak over a grid plus the
    /// most the surface can rise between grid points.
    pub fn max_height(&self) -> f64 {
        let (ha, hb) = (self.body_length / 2.0, self.body_width / 2.0);
        let (na, nb) = (120, 48);
        let (da, db) = (2.0 * ha / na as f64, 2.0 * hb / nb as f64);
        let mut peak = 0.0f64;
        for i in 0..=na {
            for j in 0..=nb {
                let (a, b) = (-ha + da * i as f64, -hb + db * j as f64);
                if self.rim(a, b) <= 0.0 {
                    peak = peak.max(self.top_height(a, b));
                }
            }
        }
        // The footprint edge can fall between grid points too.
        peak + self.slope_bound() * da.hypot(db)
    }

    /// Lipschitz bound of [`Self::top_height`] over the footprint.
    pub fn slope_bound(&self) -> f64 {
        let [_, c1, c2, c3] = self.height_profile;
        let ha = self.body_length / 2.0;
        let hw = self.body_width / 2.0;
        let base = (c1.abs() + 2.0 * c2.abs() + 3.0 * c3.abs()) / ha;
        // |grad q^2| <= 2 q |grad q| <= 2 * 2 / hw on the footprint.
        let drop = self.side_drop * 4.0 / hw.min(ha);
        let peak = (-0.5f64).exp();
        let ridge = self.spine_ridge.0 / self.spine_ridge.1 * peak;
        let bumps = 2.0 * peak * (self.hook_bumps.amplitude / self.hook_bumps.radius + self.pin_bumps.amplitude / self.pin_bumps.radius);
        base + drop + ridge + bumps
    }
}

/// Issues identities in order, redrawing any candidate closer than
/// `separation` to an earlier one.
#[derive(Debug, Clone)]
pub struct IdentityIssuer {
    rng: ChaCha8Rng,
    separation: f64,
    issued: Vec<IdentityShape>,
    /// Total candidates drawn so far.
    pub draws: usize,
}

pub const REJECTION_BUDGET: usize = 10_000;

impl IdentityIssuer {
    pub fn new(seed: u64, separation: f64) -> Result<Self> {
        if !(separation >= 0.0) {
            return Err(Error::InvalidParam("identity separation must be >= 0".into()));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            separation,
            issued: Vec::new(),
            draws: 0,
        })
    }

    pub fn next_identity(&mut self) -> Result<IdentityShape> {
        for _ in 0..REJECTION_BUDGET {
            self.draws += 1;
            let seed = self.rng.random();
            let candidate = IdentityShape::draw(&mut ChaCha8Rng::seed_from_u64(seed), seed);
            if self.issued.iter().all(|s| s.separation(&candidate) >= self.separation) {
                self.issued.push(candidate.clone());
                return Ok(candidate);
            }
        }
        Err(Error::RejectionBudget(REJECTION_BUDGET))
    }
}

/// The first `count` identities issued from `seed`.
pub fn make_identities(count: usize, seed: u64, separation: f64) -> Result<Vec<IdentityShape>> {
    let mut issuer = IdentityIssuer::new(seed, separation)?;
    (0..count).map(|_| issuer.next_identity()).collect()
}

/// Position of the body centre along the walking direction and heading of
/// the spine, measured from the +x image axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Camera {
    /// Taken from the top-level camera section, not from this one.
    #[serde(skip)]
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    /// Distance from the lens to the floor in meters.
    pub mount_height: f64,
    /// Draw the static gate rail at 3 m depth across rows 20..32.
    pub rail: bool,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::kinect_v2(),
            width: 512,
            height: 424,
            mount_height: 4.0,
            rail: true,
        }
    }
}

const RAIL_ROWS: std::ops::Range<usize> = 20..32;
const RAIL_DEPTH: f64 = 3.0;

/// Sensor noise: Gaussian depth error and per-pixel dropout to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Noise {
    pub sigma_mm: f64,
    pub dropout: f64,
}

impl Noise {
    pub const NONE: Noise = Noise {
        sigma_mm: 0.0,
        dropout: 0.0,
    };
}

struct Placed<'a> {
    shape: &'a IdentityShape,
    pose: Pose,
    cos: f64,
    sin: f64,
}

impl Placed<'_> {
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - self.pose.x;
        (dx * self.cos + y * self.sin, -dx * self.sin + y * self.cos)
    }
}

/// First surface depth along the pixel ray `(rx, ry, 1)`.
fn trace_ray(body: &Placed, floor: f64, lipschitz: f64, z_lo: f64, rx: f64, ry: f64) -> f64 {
    let s = body.shape;
    let (c, sn) = (body.cos, body.sin);
    let x0 = body.pose.x;
    // Local coordinates are affine in z: a = a1 z + a0, b = b1 z + b0.
    let (a1, a0) = (rx * c + ry * sn, -x0 * c);
    let (b1, b0) = (-rx * sn + ry * c, x0 * sn);
    let (ha, hb) = (s.body_length / 2.0, s.body_width / 2.0);
    let qa = (a1 / ha).powi(2) + (b1 / hb).powi(2);
    let qb = 2.0 * (a1 * a0 / (ha * ha) + b1 * b0 / (hb * hb));
    let qc = (a0 / ha).powi(2) + (b0 / hb).powi(2) - 1.0;
    let (enter, exit) = if qa == 0.0 {
        if qc < 0.0 { (f64::NEG_INFINITY, f64::INFINITY) } else { return floor }
    } else {
        let disc = qb * qb - 4.0 * qa * qc;
        if disc <= 0.0 {
            return floor;
        }
        let r = disc.sqrt();
        ((-qb - r) / (2.0 * qa), (-qb + r) / (2.0 * qa))
    };
    let start = enter.max(z_lo);
    let end = exit.min(floor);
    if start >= end {
        return floor;
    }
    let f = |z: f64| {
        let (a, b) = body.local(rx * z, ry * z);
        z - floor + s.top_height(a, b)
    };
    if enter > z_lo && f(enter) >= 0.0 {
        // Ray meets the side wall.
        return enter;
    }
    let rate = 1.0 + lipschitz * (rx * rx + ry * ry).sqrt();
    let mut z = start;
    for _ in 0..100_000 {
        let fz = f(z);
        if fz >= -1e-9 {
            return z;
        }
        z -= fz / rate;
        if z >= end {
            return floor;
        }
    }
    z
}

/// Noise-free depth in meters for every pixel, row-major. `body` is `None`
/// for an empty scene.
pub fn render_exact(body: Option<(&IdentityShape, Pose)>, camera: &Camera) -> Result<Vec<f64>> {
    let k = camera.intrinsics;
    k.validate(camera.width, camera.height)?;
    let floor = camera.mount_height;
    let mut depth = vec![floor; camera.width * camera.height];
    if let Some((shape, pose)) = body {
        shape.validate()?;
        let placed = Placed {
            shape,
            pose,
            cos: pose.heading.cos(),
            sin: pose.heading.sin(),
        };
        let z_lo = floor - shape.max_height();
        if z_lo <= 0.0 {
            return Err(Error::InvalidParam("animal taller than the camera mount".into()));
        }
        // World-axis half extents of the elliptical footprint.
        let (ha, hb) = (shape.body_length / 2.0, shape.body_width / 2.0);
        let ex = ((ha * placed.cos).powi(2) + (hb * placed.sin).powi(2)).sqrt();
        let ey = ((ha * placed.sin).powi(2) + (hb * placed.cos).powi(2)).sqrt();
        let (x_min, x_max, y_min, y_max) = (pose.x - ex, pose.x + ex, -ey, ey);
        // Nearest depth gives the widest image footprint.
        let u_lo = x_min.min(x_min * z_lo / floor) * k.fx / z_lo + k.cx;
        let u_hi = x_max.max(x_max * z_lo / floor) * k.fx / z_lo + k.cx;
        let v_lo = y_min * k.fy / z_lo + k.cy;
        let v_hi = y_max * k.fy / z_lo + k.cy;
        if u_lo < 0.0 || v_lo < 0.0 || u_hi >= camera.width as f64 || v_hi >= camera.height as f64 {
            return Err(Error::OutsideFrustum(format!(
                "footprint spans u {u_lo:.1}..{u_hi:.1}, v {v_lo:.1}..{v_hi:.1}"
            )));
        }
        let lipschitz = shape.slope_bound();
        let (u0, u1) = (u_lo.floor() as usize, (u_hi.ceil() as usize + 1).min(camera.width));
        let (v0, v1) = (v_lo.floor() as usize, (v_hi.ceil() as usize + 1).min(camera.height));
        let w = camera.width;
        depth
            .par_chunks_mut(w)
            .enumerate()
            .filter(|(v, _)| (v0..v1).contains(v))
            .for_each(|(v, row)| {
                let ry = (v as f64 - k.cy) / k.fy;
                for (u, d) in row.iter_mut().enumerate().take(u1).skip(u0) {
                    let rx = (u as f64 - k.cx) / k.fx;
                    *d = trace_ray(&placed, floor, lipschitz, z_lo, rx, ry);
                }
            });
    }
    if camera.rail {
        for v in RAIL_ROWS.filter(|&v| v < camera.height) {
            for d in &mut depth[v * camera.width..(v + 1) * camera.width] {
                *d = d.min(RAIL_DEPTH);
            }
        }
    }
    Ok(depth)
}

/// Renders a millimeter depth frame with Gaussian noise and dropout.
pub fn render_depth<R: Rng + ?Sized>(
    body: Option<(&IdentityShape, Pose)>,
    camera: &Camera,
    noise: Noise,
    rng: &mut R,
) -> Result<DepthFrame> {
    if !(0.0..1.0).contains(&noise.dropout) || !(noise.sigma_mm >= 0.0) {
        return Err(Error::InvalidParam("dropout must lie in [0, 1) and sigma_mm >= 0".into()));
    }
    let exact = render_exact(body, camera)?;
    let gauss = Normal::new(0.0, noise.sigma_mm.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let holes = Bernoulli::new(noise.dropout).expect("dropout in [0, 1)");
    let data = exact
        .iter()
        .map(|&z| {
            let mut mm = z * 1000.0;
            if noise.sigma_mm > 0.0 {
                mm += gauss.sample(rng);
            }
            if noise.dropout > 0.0 && holes.sample(rng) {
                return 0;
            }
            mm.round().clamp(1.0, 65535.0) as u16
        })
        .collect();
    DepthFrame::new(camera.width, camera.height, data, String::new(), 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub identities: usize,
    pub sequences: usize,
    pub frames: usize,
    /// Forward motion per frame in meters.
    pub walk: f64,
    /// Amplitude of the heading sway in radians.
    pub heading_sway: f64,
    /// Minimum range-scaled parameter gap between identities.
    pub separation: f64,
    pub noise_mm: f64,
    pub dropout: f64,
    pub camera: Camera,
    /// Points per cloud after farthest point sampling.
    #[serde(skip)]
    pub points: usize,
    /// Identity whose spine ridge is replaced by [`EXAGGERATED_RIDGE`].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exaggerated_spine: Option<IdentityId>,
    #[serde(skip)]
    pub segmentation: SegmentationParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            identities: 10,
            sequences: 1,
            frames: 40,
            walk: 0.04,
            heading_sway: 0.05,
            separation: 0.25,
            noise_mm: 3.0,
            dropout: 0.01,
            camera: Camera::default(),
            points: 2048,
            exaggerated_spine: None,
            segmentation: SegmentationParams::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 || self.sequences == 0 || self.frames == 0 || self.points == 0 {
            return Err(Error::InvalidParam("identity, sequence, frame and point counts must be >= 1".into()));
        }
        self.segmentation.validate()
    }

    pub fn noise(&self) -> Noise {
        Noise {
            sigma_mm: self.noise_mm,
            dropout: self.dropout,
        }
    }

    fn sequence_rng(&self, identity: usize, sequence: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((identity as u64) << 32) | sequence as u64);
        rng
    }
}

pub fn sequence_id(identity: usize, sequence: usize) -> String {
    format!("i{identity:03}s{sequence:02}")
}

/// Poses of one walk: centred on the optical axis, advancing by `walk`,
/// with a heading sway that depends only on position.
pub fn sequence_poses(frames: usize, walk: f64, sway: f64, rng: &mut impl Rng) -> Vec<Pose> {
    let base_heading = rng.random_range(-sway..=sway);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let start = -walk * (frames.saturating_sub(1)) as f64 / 2.0;
    (0..frames)
        .map(|k| {
            let x = start + walk * k as f64;
            Pose {
                x,
                heading: base_heading + sway * (std::f64::consts::TAU * x / 1.2 + phase).sin(),
            }
        })
        .collect()
}

/// Renders one walking sequence with consecutive frame indices from 0.
pub fn make_sequence(
    shape: &IdentityShape,
    frames: usize,
    walk: f64,
    sequence: &str,
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DepthFrame>> {
    if frames == 0 {
        return Err(Error::InvalidParam("a sequence needs at least one frame".into()));
    }
    let poses = sequence_poses(frames, walk, config.heading_sway, rng);
    let seeds: Vec<u64> = poses.iter().map(|_| rng.random()).collect();
    poses
        .par_iter()
        .zip(seeds)
        .enumerate()
        .map(|(k, (pose, seed))| {
            let mut frame = render_depth(
                Some((shape, *pose)),
                &config.camera,
                config.noise(),
                &mut ChaCha8Rng::seed_from_u64(seed),
            )?;
            frame.sequence_id = sequence.to_string();
            frame.frame_index = k as u64;
            Ok(frame)
        })
        .collect()
}

/// One rendered, segmented and sampled frame.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub reference: SampleRef,
    pub frame: DepthFrame,
    pub crop: DepthFrame,
    pub bbox: BoundingBox,
    /// Farthest-point-sampled cloud in camera meters.
    pub cloud: PointCloud,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub config: SynthConfig,
    pub shapes: Vec<IdentityShape>,
    pub background: DepthFrame,
    pub samples: Vec<SynthSample>,
}

impl Cohort {
    /// Network-ready samples: normalized clouds resampled to `points` when
    /// given and smaller than the stored resolution.
    pub fn samples(&self, points: Option<usize>) -> Result<Vec<Sample>> {
        self.samples
            .par_iter()
            .map(|s| to_sample(&s.reference, &s.cloud, points))
            .collect()
    }
}

/// Id of the `blob`-th crop of a frame.
pub fn sample_id(sequence: &str, frame_index: u64, blob: usize) -> String {
    format!("{sequence}_{frame_index}_{blob}")
}

fn to_sample(reference: &SampleRef, cloud: &PointCloud, points: Option<usize>) -> Result<Sample> {
    let sampled = match points {
        Some(k) if k < cloud.len() => farthest_point_sample(cloud, k, StartRule::Lexicographic)?,
        _ => cloud.clone(),
    };
    let mut cloud = normalize_cloud(&sampled);
    cloud.label = Some(reference.identity);
    Ok(Sample {
        id: reference.id.clone(),
        cloud,
        identity: reference.identity,
        split_tag: SplitTag::Train,
    })
}

/// Renders every identity, sequence and frame, segments each frame against
/// the empty-scene background and keeps the largest blob.
pub fn generate_cohort(config: &SynthConfig) -> Result<Cohort> {
    config.validate()?;
    let mut shapes = make_identities(config.identities, config.seed, config.separation)?;
    if let Some(id) = config.exaggerated_spine {
        let shape = shapes
            .get_mut(id as usize)
            .ok_or_else(|| Error::InvalidParam(format!("exaggerated identity {id} out of range")))?;
        shape.spine_ridge = EXAGGERATED_RIDGE;
    }
    let background = render_depth(None, &config.camera, Noise::NONE, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut frames = Vec::new();
    for (identity, shape) in shapes.iter().enumerate() {
        for sequence in 0..config.sequences {
            let seq = sequence_id(identity, sequence);
            let mut rng = config.sequence_rng(identity, sequence);
            for frame in make_sequence(shape, config.frames, config.walk, &seq, config, &mut rng)? {
                frames.push((identity as IdentityId, frame));
            }
        }
    }
    let samples = frames
        .into_par_iter()
        .map(|(identity, frame)| {
            let seq = frame.sequence_id.clone();
            let k = frame.frame_index;
            let crop = segment_frame(&frame, &background, &config.segmentation)?
                .into_iter()
                .next()
                .ok_or_else(|| Error::Invariant(format!("frame {seq}/{k} produced no blob")))?;
            let raw = unproject(&crop.depth, &crop.bbox, &config.camera.intrinsics)?;
            let mut cloud = farthest_point_sample(&raw, config.points.min(raw.len()), StartRule::Lexicographic)?;
            cloud.pixels = None;
            cloud.label = Some(identity);
            Ok(SynthSample {
                reference: SampleRef {
                    id: sample_id(&seq, k, 0),
                    identity,
                    sequence_id: seq,
                    frame_index: k,
                },
                frame,
                crop: crop.depth,
                bbox: crop.bbox,
                cloud,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort {
        config: config.clone(),
        shapes,
        background,
        samples,
    })
}

/// One row of the dataset index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub identity: IdentityId,
    pub sequence_id: String,
    pub frame_index: u64,
    /// Paths relative to the dataset root.
    pub crop: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cloud: Option<String>,
}

impl DatasetEntry {
    pub fn reference(&self) -> SampleRef {
        SampleRef {
            id: self.id.clone(),
            identity: self.identity,
            sequence_id: self.sequence_id.clone(),
            frame_index: self.frame_index,
        }
    }
}

/// Top-level `dataset.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub intrinsics: CameraIntrinsics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub identities: Vec<IdentityShape>,
    #[serde(default)]
    pub samples: Vec<DatasetEntry>,
}

pub const INDEX_FILE: &str = "dataset.toml";

fn rel(root: &Path, parts: &[&str]) -> (PathBuf, String) {
    let relative = parts.join("/");
    (root.join(&relative), relative)
}

/// Writes frames, crops, clouds and the index under `root`.
pub fn write_dataset(cohort: &Cohort, root: &Path) -> Result<DatasetIndex> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_depth_frame(&cohort.background, &root.join("background.png"))?;
    let mut entries = Vec::with_capacity(cohort.samples.len());
    for s in &cohort.samples {
        let r = &s.reference;
        let id_dir = r.identity.to_string();
        let frame_name = format!("{}.png", r.frame_index);
        let (frame_path, _) = rel(root, &[&r.sequence_id, &frame_name]);
        let (crop_path, crop_rel) = rel(root, &["crops", &id_dir, &format!("{}.png", r.id)]);
        let (cloud_path, cloud_rel) = rel(root, &["clouds", &id_dir, &format!("{}.ply", r.id)]);
        for p in [&frame_path, &crop_path, &cloud_path] {
            let dir = p.parent().expect("nested path");
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_depth_frame(&s.frame, &frame_path)?;
        write_depth_crop(&s.crop, Some(r.identity), Some(s.bbox), &crop_path)?;
        write_ply(&s.cloud, None, &cloud_path)?;
        entries.push(DatasetEntry {
            id: r.id.clone(),
            identity: r.identity,
            sequence_id: r.sequence_id.clone(),
            frame_index: r.frame_index,
            crop: crop_rel,
            cloud: Some(cloud_rel),
        });
    }
    // The record keeps generator settings only; shared camera, cloud and
    // segmentation settings are not serialized with it.
    let defaults = SynthConfig::default();
    let mut record = cohort.config.clone();
    record.camera.intrinsics = defaults.camera.intrinsics;
    record.points = defaults.points;
    record.segmentation = defaults.segmentation;
    let index = DatasetIndex {
        intrinsics: cohort.config.camera.intrinsics,
        synth: Some(record),
        identities: cohort.shapes.clone(),
        samples: entries,
    };
    let path = root.join(INDEX_FILE);
    let text = toml::to_string(&index).map_err(|e| Error::Invariant(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// Generates a cohort and writes it under `root`.
pub fn make_dataset(config: &SynthConfig, root: &Path) -> Result<(Cohort, DatasetIndex)> {
    let cohort = generate_cohort(config)?;
    let index = write_dataset(&cohort, root)?;
    Ok((cohort, index))
}

/// Reads `dataset.toml`, or indexes `crops/<identity>/*.png` when the root
/// has no index (the layout of an externally captured dataset).
pub fn read_dataset_index(root: &Path, intrinsics: CameraIntrinsics) -> Result<DatasetIndex> {
    let path = root.join(INDEX_FILE);
    if path.exists() {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        return toml::from_str(&text).map_err(|e| Error::parse(&path, e));
    }
    let crops = root.join("crops");
    let mut by_id: BTreeMap<(IdentityId, String, u64, String), DatasetEntry> = BTreeMap::new();
    let dirs = fs::read_dir(&crops).map_err(|e| Error::io(&crops, e))?;
    for dir in dirs {
        let dir = dir.map_err(|e| Error::io(&crops, e))?.path();
        let Some(identity) = dir.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse::<IdentityId>().ok()) else {
            continue;
        };
        for file in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let file = file.map_err(|e| Error::io(&dir, e))?.path();
            if file.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let meta = crate::io::read_frame_meta(&file)?;
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let relative = file
                .strip_prefix(root)
                .map(|p| p.to_string_lossy().replace('\\', "/"))
                .unwrap_or_else(|_| file.to_string_lossy().into_owned());
            by_id.insert(
                (identity, meta.sequence_id.clone(), meta.frame_index, stem.clone()),
                DatasetEntry {
                    id: stem,
                    identity: meta.identity.unwrap_or(identity),
                    sequence_id: meta.sequence_id,
                    frame_index: meta.frame_index,
                    crop: relative,
                    cloud: None,
                },
            );
        }
    }
    if by_id.is_empty() {
        return Err(Error::EmptyInput(format!("no crops under {}", crops.display())));
    }
    Ok(DatasetIndex {
        intrinsics,
        synth: None,
        identities: Vec::new(),
        samples: by_id.into_values().collect(),
    })
}

/// Camera-frame cloud of one entry: the stored cloud when the index names
/// one, otherwise the crop reprojected and sampled to `points`.
pub fn load_raw_cloud(root: &Path, index: &DatasetIndex, entry: &DatasetEntry, points: usize) -> Result<PointCloud> {
    let mut cloud = match &entry.cloud {
        Some(c) => read_ply(&root.join(c))?,
        None => {
            let (crop, meta) = read_depth_crop(&root.join(&entry.crop))?;
            let bbox = meta
                .bbox
                .ok_or_else(|| Error::MissingMetadata(crate::io::sidecar_path(&root.join(&entry.crop))))?;
            let raw = unproject(&crop, &bbox, &index.intrinsics)?;
            farthest_point_sample(&raw, points.min(raw.len()), StartRule::Lexicographic)?
        }
    };
    cloud.sequence_id = entry.sequence_id.clone();
    cloud.frame_index = entry.frame_index;
    Ok(cloud)
}

/// Loads every indexed sample as a normalized, network-ready cloud with at
/// most `points` points.
pub fn load_samples(root: &Path, index: &DatasetIndex, points: usize) -> Result<Vec<Sample>> {
    index
        .samples
        .par_iter()
        .map(|e| {
            let raw = load_raw_cloud(root, index, e, points)?;
            to_sample(&e.reference(), &raw, Some(points))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::extract_blobs;

    #[test]
    fn issuing_is_deterministic_and_separated() {
        let a = make_identities(10, 5, 0.25).unwrap();
        assert_eq!(a, make_identities(10, 5, 0.25).unwrap());
        for i in 0..10 {
            a[i].validate().unwrap();
            for j in 0..i {
                assert!(a[i].separation(&a[j]) >= 0.25);
            }
        }
        let mut free = IdentityIssuer::new(5, 0.0).unwrap();
        for _ in 0..20 {
            free.next_identity().unwrap();
        }
        assert_eq!(free.draws, 20);
        let mut tight = IdentityIssuer::new(5, 2.0).unwrap();
        tight.next_identity().unwrap();
        assert!(matches!(tight.next_identity(), Err(Error::RejectionBudget(_))));
    }

    #[test]
    fn slope_bound_holds_numerically() {
        for shape in make_identities(6, 9, 0.0).unwrap() {
            let g = shape.slope_bound();
            let (ha, hb) = (shape.body_length / 2.0, shape.body_width / 2.0);
            let e = 1e-6;
            for i in 0..60 {
                for j in 0..30 {
                    let a = -ha + 2.0 * ha * (i as f64 + 0.5) / 60.0;
                    let b = -hb + 2.0 * hb * (j as f64 + 0.5) / 30.0;
                    if shape.rim(a, b) > -0.01 {
                        continue;
                    }
                    let ga = (shape.top_height(a + e, b) - shape.top_height(a - e, b)) / (2.0 * e);
                    let gb = (shape.top_height(a, b + e) - shape.top_height(a, b - e)) / (2.0 * e);
                    assert!(ga.hypot(gb) <= g, "{} > {g}", ga.hypot(gb));
                }
            }
        }
    }

    fn camera() -> Camera {
        Camera {
            rail: false,
            ..Camera::default()
        }
    }

    #[test]
    fn exact_render_lies_on_the_surface() {
        let shape = &make_identities(3, 2, 0.25).unwrap()[2];
        let pose = Pose { x: 0.3, heading: 0.2 };
        let cam = camera();
        let depth = render_exact(Some((shape, pose)), &cam).unwrap();
        let k = cam.intrinsics;
        let placed = Placed {
            shape,
            pose,
            cos: pose.heading.cos(),
            sin: pose.heading.sin(),
        };
        let (mut top, mut wall) = (0, 0);
        for v in 0..cam.height {
            for u in 0..cam.width {
                let z = depth[v * cam.width + u];
                let (x, y) = ((u as f64 - k.cx) * z / k.fx, (v as f64 - k.cy) * z / k.fy);
                let (a, b) = placed.local(x, y);
                if z == cam.mount_height {
                    // Floor pixels see no body in front of them.
                    assert!(shape.rim(a, b) >= -1e-9 || shape.top_height(a, b) < 1e-9);
                    continue;
                }
                if (z - (cam.mount_height - shape.top_height(a, b))).abs() < 1e-3 {
                    top += 1;
                } else {
                    assert!(shape.rim(a, b).abs() < 1e-9, "({u}, {v}) off the surface");
                    assert!(z >= cam.mount_height - shape.top_height(a, b));
                    wall += 1;
                }
            }
        }
        assert!(top > 8000, "{top}");
        assert!(wall < top / 10, "{wall}");
    }

    #[test]
    fn quantized_frame_reprojects_onto_the_surface() {
        // Away from steep regions rounding to millimeters stays within 1 mm.
        let shape = &make_identities(1, 4, 0.25).unwrap()[0];
        let pose = Pose { x: 0.0, heading: 0.0 };
        let cam = camera();
        let frame = render_depth(Some((shape, pose)), &cam, Noise::NONE, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let k = cam.intrinsics;
        let mut checked = 0;
        for v in 0..cam.height {
            for u in 0..cam.width {
                let d = frame.get(u, v);
                if d == 4000 {
                    continue;
                }
                let z = f64::from(d) / 1000.0;
                let (a, b) = ((u as f64 - k.cx) * z / k.fx, (v as f64 - k.cy) * z / k.fy);
                if shape.rim(a, b) > -0.3 {
                    continue;
                }
                let err = (z - (cam.mount_height - shape.top_height(a, b))).abs();
                assert!(err < 1e-3, "{err}");
                checked += 1;
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn dropout_rate_is_respected() {
        let shape = &make_identities(1, 1, 0.25).unwrap()[0];
        let pose = Pose { x: 0.0, heading: 0.0 };
        let cam = camera();
        let clean = render_depth(Some((shape, pose)), &cam, Noise::NONE, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let noisy = render_depth(
            Some((shape, pose)),
            &cam,
            Noise {
                sigma_mm: 0.0,
                dropout: 0.3,
            },
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let animal: Vec<usize> = (0..clean.data().len()).filter(|&i| clean.data()[i] < 4000).collect();
        assert!(animal.len() >= 10_000);
        let zeroed = animal.iter().filter(|&&i| noisy.data()[i] == 0).count();
        let rate = zeroed as f64 / animal.len() as f64;
        assert!((rate - 0.3).abs() <= 0.02, "{rate}");
    }

    #[test]
    fn floor_only_scene_has_no_blobs() {
        let frame = render_depth(None, &Camera::default(), Noise { sigma_mm: 3.0, dropout: 0.01 }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bg = render_depth(None, &Camera::default(), Noise::NONE, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(segment_frame(&frame, &bg, &SegmentationParams::default()).unwrap().is_empty());
        // The rail survives thresholding but not background subtraction.
        let fg = crate::segmentation::threshold_depth(&frame, (2.0, 3.4));
        assert!(!extract_blobs(&fg, &SegmentationParams { blob_area: (1, usize::MAX), ..Default::default() }).is_empty());
    }

    #[test]
    fn frustum_is_enforced() {
        let shape = &make_identities(1, 1, 0.25).unwrap()[0];
        let far = Pose { x: 2.5, heading: 0.0 };
        assert!(matches!(render_exact(Some((shape, far)), &camera()), Err(Error::OutsideFrustum(_))));
    }

    #[test]
    fn sequences() {
        let shape = &make_identities(1, 6, 0.25).unwrap()[0];
        let quiet = SynthConfig {
            noise_mm: 0.0,
            dropout: 0.0,
            ..SynthConfig::default()
        };
        let one = make_sequence(shape, 1, 0.04, "s", &quiet, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((one.len(), one[0].frame_index), (1, 0));

        let still = make_sequence(shape, 3, 0.0, "s", &SynthConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let clean_still = make_sequence(shape, 3, 0.0, "s", &quiet, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(clean_still[0].data(), clean_still[2].data());
        assert_ne!(still[0].data(), still[1].data());

        let walk = make_sequence(shape, 40, 0.04, "s", &quiet, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let bg = render_depth(None, &quiet.camera, Noise::NONE, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut last = f64::MIN;
        for (k, f) in walk.iter().enumerate() {
            assert_eq!(f.frame_index, k as u64);
            let crops = segment_frame(f, &bg, &quiet.segmentation).unwrap();
            assert_eq!(crops.len(), 1);
            let c = &crops[0];
            let (mut sum, mut n) = (0.0, 0.0);
            for j in 0..c.depth.height() {
                for i in 0..c.depth.width() {
                    if c.depth.get(i, j) != 0 {
                        sum += (c.bbox.u_min + i) as f64;
                        n += 1.0;
                    }
                }
            }
            let centroid = sum / n;
            assert!(centroid > last);
            last = centroid;
        }
    }

    fn chamfer_rms(a: &PointCloud, b: &PointCloud) -> f64 {
        let one_way = |p: &PointCloud, q: &PointCloud| {
            p.points
                .iter()
                .map(|x| {
                    q.points
                        .iter()
                        .map(|y| (0..3).map(|i| (x[i] - y[i]).powi(2)).sum::<f64>())
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / p.len() as f64
        };
        ((one_way(a, b) + one_way(b, a)) / 2.0).sqrt()
    }

    #[test]
    fn identities_are_separable_without_noise() {
        let config = SynthConfig {
            identities: 4,
            frames: 3,
            walk: 0.3,
            noise_mm: 0.0,
            dropout: 0.0,
            points: 256,
            ..SynthConfig::default()
        };
        let cohort = generate_cohort(&config).unwrap();
        let samples = cohort.samples(None).unwrap();
        let (mut intra, mut inter) = (Vec::new(), Vec::new());
        for i in 0..samples.len() {
            for j in 0..i {
                let d = chamfer_rms(&samples[i].cloud, &samples[j].cloud);
                if samples[i].identity == samples[j].identity { intra.push(d) } else { inter.push(d) }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&inter) > mean(&intra), "inter {} intra {}", mean(&inter), mean(&intra));
    }

    #[test]
    fn dataset_counts_roundtrip_and_determinism() {
        let config = SynthConfig {
            identities: 2,
            sequences: 1,
            frames: 2,
            points: 128,
            ..SynthConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let (cohort, index) = make_dataset(&config, dir.path()).unwrap();
        assert_eq!(index.samples.len(), 4);
        assert!(cohort.samples.iter().all(|s| s.cloud.len() == 128));
        let reread = read_dataset_index(dir.path(), CameraIntrinsics::default()).unwrap();
        assert_eq!(reread, index);
        let loaded = load_samples(dir.path(), &reread, 128).unwrap();
        let direct = cohort.samples(Some(128)).unwrap();
        for (a, b) in loaded.iter().zip(&direct) {
            assert_eq!(a.cloud.points, b.cloud.points);
            assert_eq!(a.id, b.id);
        }

        // Without the index the crops are reprojected and resampled.
        fs::remove_file(dir.path().join(INDEX_FILE)).unwrap();
        let scanned = read_dataset_index(dir.path(), CameraIntrinsics::default()).unwrap();
        assert_eq!(scanned.samples.len(), 4);
        let from_crops = load_samples(dir.path(), &scanned, 128).unwrap();
        let mut ids: Vec<_> = from_crops.iter().map(|s| (s.id.clone(), s.cloud.points.clone())).collect();
        ids.sort_by(|a, b| a.0.cmp(&b.0));
        let mut want: Vec<_> = direct.iter().map(|s| (s.id.clone(), s.cloud.points.clone())).collect();
        want.sort_by(|a, b| a.0.cmp(&b.0));
        assert_eq!(ids, want);

        let one = SynthConfig {
            identities: 1,
            frames: 1,
            points: 64,
            ..SynthConfig::default()
        };
        assert_eq!(generate_cohort(&one).unwrap().samples.len(), 1);
    }

    #[test]
    fn blob_areas_stay_inside_segmentation_bounds() {
        let config = SynthConfig {
            identities: 10,
            frames: 3,
            walk: 0.6,
            points: 32,
            ..SynthConfig::default()
        };
        let cohort = generate_cohort(&config).unwrap();
        assert_eq!(cohort.samples.len(), 30);
        for s in &cohort.samples {
            let area = s.crop.valid_count();
            assert!((8000..=22000).contains(&area), "{area}");
        }
    }
}
