//! Deterministic synthetic hand images with exact 2D/3D joint labels.
//!
//! Pixel `(x, y)` has its centre at integer coordinates. The camera looks down
//! the `-z` axis of the rotated hand frame, so larger `z` is nearer.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::posehead::geometry::{axis_rotation, mat_mul, mat_vec, rodrigues, rotation_log, Mat3};
use crate::posehead::{forward_kinematics, project_points, PoseParams, Skeleton, NUM_BONES, NUM_DOF, NUM_JOINTS, POSE_DIM};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"IPD1";
pub const VERSION: u32 = 1;
pub const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Flat,
    Gradient,
    Noise,
}

/// Generator settings. Ranges are inclusive `[min, max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub samples: usize,
    pub image_size: usize,
    /// Per joint-angle range, radians.
    pub theta: Vec<[f64; 2]>,
    pub beta: [f64; 2],
    /// Global rotation as `Rz(z) Rx(x) Ry(y)`, radians.
    pub rot_x: [f64; 2],
    pub rot_y: [f64; 2],
    pub rot_z: [f64; 2],
    /// Pixels per model unit, as a fraction of the image size.
    pub scale: [f64; 2],
    /// Wrist position, as a fraction of the image size.
    pub translation: [f64; 2],
    pub background: Background,
    pub noise_sigma: f64,
    /// Bone diameter in pixels.
    pub thickness: f64,
    /// Minimum distance of every joint from the image border, pixels.
    pub margin: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        let flex = 60f64.to_radians();
        let abd = 15f64.to_radians();
        let theta = (0..NUM_DOF).map(|i| if i % 4 == 0 { [-abd, abd] } else { [-flex, flex] }).collect();
        let tilt = 30f64.to_radians();
        GenConfig {
            samples: 2500,
            image_size: 64,
            theta,
            beta: [0.9, 1.1],
            rot_x: [-tilt, tilt],
            rot_y: [-tilt, tilt],
            rot_z: [-std::f64::consts::PI, std::f64::consts::PI],
            scale: [0.2, 0.38],
            translation: [0.25, 0.75],
            background: Background::Noise,
            noise_sigma: 0.03,
            thickness: 2.0,
            margin: 1.0,
            seed: 0,
        }
    }
}

fn check_range(field: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::config(field, format!("invalid range [{}, {}]", r[0], r[1])));
    }
    Ok(())
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::config("image_size", format!("{} is not a positive multiple of 32", self.image_size)));
        }
        if self.samples == 0 {
            return Err(Error::config("samples", "must be positive"));
        }
        if self.theta.len() != NUM_DOF {
            return Err(Error::config("theta", format!("expected {NUM_DOF} ranges, got {}", self.theta.len())));
        }
        for (i, r) in self.theta.iter().enumerate() {
            check_range(&format!("theta[{i}]"), *r)?;
        }
        for (name, r) in [
            ("beta", self.beta),
            ("rot_x", self.rot_x),
            ("rot_y", self.rot_y),
            ("rot_z", self.rot_z),
            ("scale", self.scale),
            ("translation", self.translation),
        ] {
            check_range(name, r)?;
        }
        if self.beta[0] < crate::posehead::BETA_MIN || self.beta[1] > crate::posehead::BETA_MAX {
            return Err(Error::config("beta", "must lie within [0.5, 2]"));
        }
        if self.scale[0] <= 0.0 {
            return Err(Error::config("scale", "must be positive"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma", "must be non-negative"));
        }
        if !(self.thickness > 0.0) {
            return Err(Error::config("thickness", "must be positive"));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::config("margin", "must be non-negative"));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sample `index` under global seed `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index)
}

fn draw<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    rng.gen_range(r[0]..=r[1])
}

fn inside(points: &[[f64; 2]], size: usize, margin: f64) -> bool {
    let hi = size as f64 - margin;
    points.iter().all(|p| p.iter().all(|&c| c >= margin && c < hi))
}

/// Uniform pose within the configured ranges whose projected joints all lie
/// inside the image.
pub fn sample_pose<R: Rng>(rng: &mut R, cfg: &GenConfig) -> Result<PoseParams<f64>> {
    let skel = Skeleton::hand();
    let size = cfg.image_size as f64;
    for _ in 0..MAX_ATTEMPTS {
        let theta: Vec<f64> = cfg.theta.iter().map(|&r| draw(rng, r)).collect();
        let beta: Vec<f64> = (0..NUM_BONES).map(|_| draw(rng, cfg.beta)).collect();
        let (z, x, y) = (draw(rng, cfg.rot_z), draw(rng, cfg.rot_x), draw(rng, cfg.rot_y));
        let rz: Mat3<f64> = axis_rotation(&[0.0, 0.0, 1.0], z);
        let rx: Mat3<f64> = axis_rotation(&[1.0, 0.0, 0.0], x);
        let ry: Mat3<f64> = axis_rotation(&[0.0, 1.0, 0.0], y);
        let axis_angle = rotation_log(&mat_mul(&mat_mul(&rz, &rx), &ry));
        let s = draw(rng, cfg.scale) * size;
        let t = [draw(rng, cfg.translation) * size, draw(rng, cfg.translation) * size];
        let pose = round_to_f32(&PoseParams { theta, beta, axis_angle, t, s });
        let j3 = forward_kinematics(&skel, &pose.theta, &pose.beta);
        if inside(&project_points(&j3, &pose.rotation(), pose.t, pose.s), cfg.image_size, cfg.margin) {
            return Ok(pose);
        }
    }
    Err(Error::Sampling { attempts: MAX_ATTEMPTS })
}

/// Pose whose parameters are exactly representable in the stored format.
fn round_to_f32(p: &PoseParams<f64>) -> PoseParams<f64> {
    let v: Vec<f64> = p.to_vector().iter().map(|&x| x as f32 as f64).collect();
    PoseParams::from_vector(&v)
}

/// Drawable element of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub a: [f64; 2],
    /// Equal to `a` for a disk.
    pub b: [f64; 2],
    pub radius: f64,
    /// Camera-frame depth; larger is nearer.
    pub depth: f64,
    pub color: [f32; 3],
}

impl Primitive {
    /// Fraction of pixel `(x, y)` covered, from the distance to the centre line.
    pub fn coverage(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (self.b[0] - self.a[0], self.b[1] - self.a[1]);
        let len2 = dx * dx + dy * dy;
        let u = if len2 > 0.0 { (((x - self.a[0]) * dx + (y - self.a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (px, py) = (self.a[0] + u * dx, self.a[1] + u * dy);
        let d = ((x - px).powi(2) + (y - py).powi(2)).sqrt();
        (self.radius + 0.5 - d).clamp(0.0, 1.0)
    }
}

const FINGER_COLORS: [[f32; 3]; 5] = [
    [1.0, 0.55, 0.45],
    [0.95, 0.9, 0.4],
    [0.45, 0.95, 0.5],
    [0.45, 0.7, 1.0],
    [0.9, 0.5, 1.0],
];
const PALM_COLOR: [f32; 3] = [0.85, 0.85, 0.85];

/// Colour of the bone ending at `joint`.
pub fn bone_color(joint: usize, parent: usize) -> [f32; 3] {
    if parent == 0 { PALM_COLOR } else { FINGER_COLORS[(joint - 1) / 4] }
}

/// Radius of the disk drawn at each joint.
pub fn joint_radius(cfg: &GenConfig) -> f64 {
    (0.8 * cfg.thickness).max(1.25)
}

pub fn joint_color(joint: usize) -> [f32; 3] {
    let base = if joint == 0 { PALM_COLOR } else { FINGER_COLORS[(joint - 1) / 4] };
    base.map(|c| 0.5 * c + 0.5)
}

/// Bones and joint disks of a pose, in drawing order (far to near).
pub fn scene(pose: &PoseParams<f64>, cfg: &GenConfig) -> Vec<Primitive> {
    let skel = Skeleton::hand();
    let j3 = forward_kinematics(&skel, &pose.theta, &pose.beta);
    let rot = pose.rotation();
    let j2 = project_points(&j3, &rot, pose.t, pose.s);
    let depth: Vec<f64> = j3.iter().map(|p| pose.s * mat_vec(&rot, p)[2]).collect();
    let mut items = Vec::with_capacity(2 * NUM_JOINTS);
    for (j, spec) in skel.joints.iter().enumerate() {
        if let Some(p) = spec.parent {
            let color = bone_color(j, p);
            items.push(Primitive {
                a: j2[p],
                b: j2[j],
                radius: cfg.thickness / 2.0,
                depth: (depth[p] + depth[j]) / 2.0,
                color,
            });
        }
    }
    for j in 0..NUM_JOINTS {
        items.push(Primitive {
            a: j2[j],
            b: j2[j],
            radius: joint_radius(cfg),
            depth: depth[j],
            color: joint_color(j),
        });
    }
    items.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    items
}

fn background(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = cfg.image_size;
    let plane = n * n;
    let mut img = vec![0.0f32; 3 * plane];
    match cfg.background {
        Background::Flat => {
            for (c, v) in [0.12f32, 0.14, 0.18].iter().enumerate() {
                img[c * plane..(c + 1) * plane].fill(*v);
            }
        }
        Background::Gradient => {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let half = (n as f64 - 1.0) / 2.0;
            for y in 0..n {
                for x in 0..n {
                    let u = ((x as f64 - half) * dx + (y as f64 - half) * dy) / (half * std::f64::consts::SQRT_2);
                    let v = (0.175 + 0.125 * u) as f32;
                    for c in 0..3 {
                        img[c * plane + y * n + x] = v;
                    }
                }
            }
        }
        Background::Noise => {
            for v in img.iter_mut() {
                *v = 0.15 + rng.gen_range(-0.1f32..0.1);
            }
        }
    }
    img
}

/// Renders a pose as a `3 x H x H` image in `[0, 1]`; `seed` drives the
/// background and the pixel noise.
pub fn render(pose: &PoseParams<f64>, cfg: &GenConfig, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_size;
    let plane = n * n;
    let mut img = background(cfg, &mut rng);
    for item in scene(pose, cfg) {
        let reach = item.radius + 1.0;
        let x0 = (item.a[0].min(item.b[0]) - reach).floor().max(0.0) as usize;
        let y0 = (item.a[1].min(item.b[1]) - reach).floor().max(0.0) as usize;
        let x1 = ((item.a[0].max(item.b[0]) + reach).ceil().max(0.0) as usize).min(n - 1);
        let y1 = ((item.a[1].max(item.b[1]) + reach).ceil().max(0.0) as usize).min(n - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let cov = item.coverage(x as f64, y as f64) as f32;
                if cov <= 0.0 {
                    continue;
                }
                for c in 0..3 {
                    let px = &mut img[c * plane + y * n + x];
                    *px = if cov >= 1.0 { item.color[c] } else { *px * (1.0 - cov) + item.color[c] * cov };
                }
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, cfg.noise_sigma as f32).expect("valid sigma");
        for v in img.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    img
}

/// One labelled image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Vec<f32>,
    pub joints_2d: Vec<f32>,
    pub joints_3d: Vec<f32>,
    pub pose: Vec<f32>,
    pub seed: u64,
}

pub fn generate_sample(cfg: &GenConfig, index: usize) -> Result<Sample> {
    let seed = sample_seed(cfg.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = sample_pose(&mut rng, cfg)?;
    let (j3, j2) = pose.joints(&Skeleton::hand());
    let image = render(&pose, cfg, rng.gen());
    Ok(Sample {
        image,
        joints_2d: j2.iter().map(|&v| v as f32).collect(),
        joints_3d: j3.iter().map(|&v| v as f32).collect(),
        pose: pose.to_vector().iter().map(|&v| v as f32).collect(),
        seed,
    })
}

/// Index ranges `[start, end)` of the three splits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: [usize; 2],
    pub val: [usize; 2],
    pub test: [usize; 2],
}

impl Split {
    /// 80 / 10 / 10 by index.
    pub fn for_count(n: usize) -> Self {
        let a = n * 8 / 10;
        let b = n * 9 / 10;
        Split { train: [0, a], val: [a, b], test: [b, n] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub config: GenConfig,
    pub count: usize,
    pub image_size: usize,
    pub pose_dim: usize,
    pub split: Split,
    /// Free-form provenance recorded by the caller.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

/// Images and labels of a set of samples as tensors.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub joints_2d: Tensor<T>,
    pub joints_3d: Tensor<T>,
}

/// Generates all samples; `jobs` threads (0 = all cores). The result does not
/// depend on the thread count.
pub fn generate_dataset(cfg: &GenConfig, jobs: usize) -> Result<Dataset> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::arg("generate_dataset", e.to_string()))?;
    let samples = pool.install(|| (0..cfg.samples).into_par_iter().map(|i| generate_sample(cfg, i)).collect::<Result<Vec<_>>>())?;
    Ok(Dataset {
        header: DatasetHeader {
            config: cfg.clone(),
            count: cfg.samples,
            image_size: cfg.image_size,
            pose_dim: POSE_DIM,
            split: Split::for_count(cfg.samples),
            meta: serde_json::Value::Null,
        },
        samples,
    })
}

impl Dataset {
    pub fn sample_floats(&self) -> usize {
        3 * self.header.image_size * self.header.image_size + 2 * NUM_JOINTS + 3 * NUM_JOINTS + POSE_DIM
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(header.len() + 9 + self.samples.len() * self.sample_floats() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        for s in &self.samples {
            for v in s.image.iter().chain(&s.joints_2d).chain(&s.joints_3d).chain(&s.pose) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "missing IPD1 magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let nl = bytes[8..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "unterminated header"))?;
        let header: DatasetHeader = serde_json::from_slice(&bytes[8..8 + nl])
            .map_err(|e| Error::format(path, format!("header: {e}")))?;
        let body = &bytes[8 + nl + 1..];
        let h = header.image_size;
        let sizes = [3 * h * h, 2 * NUM_JOINTS, 3 * NUM_JOINTS, POSE_DIM];
        let per = sizes.iter().sum::<usize>() * 4;
        if header.pose_dim != POSE_DIM || body.len() != per * header.count {
            return Err(Error::format(
                path,
                format!("expected {} sample bytes, found {}", per * header.count, body.len()),
            ));
        }
        let floats: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let per = per / 4;
        let samples = floats
            .chunks_exact(per)
            .enumerate()
            .map(|(i, block)| {
                let (image, rest) = block.split_at(sizes[0]);
                let (j2, rest) = rest.split_at(sizes[1]);
                let (j3, pose) = rest.split_at(sizes[2]);
                Sample {
                    image: image.to_vec(),
                    joints_2d: j2.to_vec(),
                    joints_3d: j3.to_vec(),
                    pose: pose.to_vec(),
                    seed: sample_seed(header.config.seed, i as u64),
                }
            })
            .collect();
        Ok(Dataset { header, samples })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn range(&self, r: [usize; 2]) -> Vec<usize> {
        (r[0]..r[1]).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.range(self.header.split.train)
    }

    pub fn val_indices(&self) -> Vec<usize> {
        self.range(self.header.split.val)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.range(self.header.split.test)
    }

    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<Batch<T>> {
        let h = self.header.image_size;
        let n = indices.len();
        let cvt = |f: &dyn Fn(&Sample) -> &[f32]| -> Vec<T> {
            indices.iter().flat_map(|&i| f(&self.samples[i]).iter().map(|&v| T::lit(v as f64))).collect()
        };
        Ok(Batch {
            images: Tensor::new([n, 3, h, h], cvt(&|s| &s.image))?,
            joints_2d: Tensor::new([n, NUM_JOINTS, 2], cvt(&|s| &s.joints_2d))?,
            joints_3d: Tensor::new([n, NUM_JOINTS, 3], cvt(&|s| &s.joints_3d))?,
        })
    }
}

/// Projection of stored 3D joints with the stored camera.
pub fn reproject(sample: &Sample) -> Vec<f64> {
    let pose = PoseParams::from_vector(&sample.pose.iter().map(|&v| v as f64).collect::<Vec<_>>());
    let j3: Vec<[f64; 3]> = sample.joints_3d.chunks_exact(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect();
    project_points(&j3, &rodrigues(&pose.axis_angle), pose.t, pose.s).into_iter().flatten().collect()
}
