//! Point clouds, normalization, group splitting, merging, and the training
//! augmentations.
//!
//! Clouds are immutable values; every randomized operation takes an explicit
//! seed and is bit-reproducible.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::util::write_atomic;
use crate::voxel::VoxelVolume;

/// Coordinates slightly outside [0,1] are tolerated in the normalized frame
/// so that jittered and augmented clouds stay representable.
pub const NORMALIZED_SLACK: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    WorldMm,
    Normalized,
}

impl Frame {
    pub fn name(self) -> &'static str {
        match self {
            Frame::WorldMm => "world_mm",
            Frame::Normalized => "normalized",
        }
    }
}

/// Invertible map between world millimeters and the normalized unit frame:
/// `normalized = (world - shift) / scale` with a single isotropic scale, so
/// aspect ratios survive normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormTransform {
    pub shift: [f64; 3],
    pub scale: f64,
}

impl NormTransform {
    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.shift[0]) / self.scale,
            (p[1] - self.shift[1]) / self.scale,
            (p[2] - self.shift[2]) / self.scale,
        ]
    }

    pub fn denormalize(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0] * self.scale + self.shift[0],
            p[1] * self.scale + self.shift[1],
            p[2] * self.scale + self.shift[2],
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    transform: Option<NormTransform>,
    frame: Frame,
}

impl PointCloud {
    /// Cloud in world millimeters.
    pub fn world(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        Ok(PointCloud {
            points,
            transform: None,
            frame: Frame::WorldMm,
        })
    }

    /// Cloud in the normalized frame; coordinates must respect the slack
    /// invariant and the transform back to world space must be present.
    pub fn normalized(points: Vec<[f64; 3]>, transform: NormTransform) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let lo = -NORMALIZED_SLACK;
        let hi = 1.0 + NORMALIZED_SLACK;
        if points
            .iter()
            .any(|p| p.iter().any(|&c| !(lo..=hi).contains(&c) || !c.is_finite()))
        {
            return Err(Error::InvalidInput(
                "normalized coordinates outside slack range".into(),
            ));
        }
        Ok(PointCloud {
            points,
            transform: Some(transform),
            frame: Frame::Normalized,
        })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn transform(&self) -> Option<NormTransform> {
        self.transform
    }

    pub fn expect_frame(&self, frame: Frame) -> Result<()> {
        if self.frame != frame {
            return Err(Error::WrongFrame {
                expected: frame.name(),
                found: self.frame.name(),
            });
        }
        Ok(())
    }
}

/// One point per positive voxel, at the voxel's world-space center.
pub fn cloud_from_volume(v: &VoxelVolume) -> Result<PointCloud> {
    if v.is_empty_foreground() {
        return Err(Error::EmptyVolume);
    }
    let points: Vec<[f64; 3]> = v
        .foreground_voxels()
        .map(|[i, j, k]| v.world_center(i, j, k))
        .collect();
    PointCloud::world(points)
}

/// Shifts to the per-axis minima and scales by the largest axis extent, so
/// coordinates land in [0,1] with the longest axis exactly spanning it.
pub fn normalize(pc: &PointCloud) -> Result<PointCloud> {
    pc.expect_frame(Frame::WorldMm)?;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in pc.points() {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let scale = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
    if !(scale > 0.0) {
        return Err(Error::DegenerateCloud);
    }
    let t = NormTransform { shift: lo, scale };
    let points = pc.points().iter().map(|p| t.normalize(*p)).collect();
    PointCloud::normalized(points, t)
}

/// Round trip back to world millimeters.
pub fn denormalize(pc: &PointCloud) -> Result<PointCloud> {
    pc.expect_frame(Frame::Normalized)?;
    let t = pc.transform().ok_or(Error::MissingTransform)?;
    PointCloud::world(pc.points().iter().map(|p| t.denormalize(*p)).collect())
}

/// Partition of a permuted cloud into groups of exactly `group_in` indices.
/// Only the final group may contain padded (resampled) indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSplit {
    pub groups: Vec<Vec<u32>>,
    pub permutation: Vec<u32>,
    pub group_in: usize,
    /// Indices in the final group beyond this count are padding.
    pub tail_distinct: usize,
}

impl GroupSplit {
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    /// Materializes one group as a cloud (same frame and transform).
    pub fn group_cloud(&self, pc: &PointCloud, g: usize) -> Result<PointCloud> {
        let points: Vec<[f64; 3]> = self.groups[g]
            .iter()
            .map(|&i| pc.points()[i as usize])
            .collect();
        match (pc.frame(), pc.transform()) {
            (Frame::Normalized, Some(t)) => PointCloud::normalized(points, t),
            _ => PointCloud::world(points),
        }
    }
}

/// Randomly permutes the cloud and splits it into `ceil(P / group_in)` groups
/// of exactly `group_in` indices. The final group is padded by uniform
/// resampling (with replacement) from the whole cloud, drawn from the same
/// seed stream.
pub fn split_groups(pc: &PointCloud, group_in: usize, seed: u64) -> Result<GroupSplit> {
    pc.expect_frame(Frame::Normalized)?;
    if pc.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if group_in < 1 {
        return Err(Error::InvalidConfig("group_in must be >= 1".into()));
    }
    let p = pc.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut permutation: Vec<u32> = (0..p as u32).collect();
    permutation.shuffle(&mut rng);

    let n_groups = p.div_ceil(group_in);
    let mut groups = Vec::with_capacity(n_groups);
    for g in 0..n_groups {
        let start = g * group_in;
        let end = ((g + 1) * group_in).min(p);
        groups.push(permutation[start..end].to_vec());
    }
    let tail_distinct = groups.last().map(|g| g.len()).unwrap_or(0);
    if let Some(last) = groups.last_mut() {
        while last.len() < group_in {
            last.push(rng.gen_range(0..p) as u32);
        }
    }
    Ok(GroupSplit {
        groups,
        permutation,
        group_in,
        tail_distinct,
    })
}

/// Concatenates normalized clouds that share one transform.
pub fn merge(clouds: &[PointCloud]) -> Result<PointCloud> {
    let first = clouds.first().ok_or(Error::EmptyCloud)?;
    first.expect_frame(Frame::Normalized)?;
    let t = first.transform().ok_or(Error::MissingTransform)?;
    let mut points = Vec::with_capacity(clouds.iter().map(|c| c.len()).sum());
    for c in clouds {
        c.expect_frame(Frame::Normalized)?;
        if c.transform() != Some(t) {
            return Err(Error::TransformMismatch);
        }
        points.extend_from_slice(c.points());
    }
    PointCloud::normalized(points, t)
}

/// Adds independent Gaussian noise (std `sigma`, normalized units) to every
/// coordinate. `sigma == 0` returns the cloud unchanged. Coordinates are kept
/// inside the slack range.
pub fn jitter(pc: &PointCloud, sigma: f64, seed: u64) -> Result<PointCloud> {
    pc.expect_frame(Frame::Normalized)?;
    if sigma < 0.0 {
        return Err(Error::InvalidConfig("jitter sigma must be >= 0".into()));
    }
    if sigma == 0.0 {
        return Ok(pc.clone());
    }
    let t = pc.transform().ok_or(Error::MissingTransform)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = -NORMALIZED_SLACK;
    let hi = 1.0 + NORMALIZED_SLACK;
    let points = pc
        .points()
        .iter()
        .map(|p| {
            let mut q = *p;
            for c in q.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *c = (*c + sigma * n).clamp(lo, hi);
            }
            q
        })
        .collect();
    PointCloud::normalized(points, t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Largest fraction of points an axis-aligned crop may remove.
    pub max_crop_fraction: f64,
    /// Largest rotation angle about a random axis, radians.
    pub max_angle: f64,
    /// Largest per-axis translation, normalized units.
    pub max_shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_crop_fraction: 0.1,
            max_angle: 0.2,
            max_shift: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            max_crop_fraction: 0.0,
            max_angle: 0.0,
            max_shift: 0.0,
        }
    }
}

/// Draws the random parameters of one augmentation so that a paired cloud can
/// be transformed consistently (rigid parts shared, crop applied to the input
/// only).
#[derive(Debug, Clone, Copy)]
pub struct AugmentSample {
    pub crop_axis: usize,
    pub crop_upper_side: bool,
    pub crop_fraction: f64,
    pub rotation_axis: [f64; 3],
    pub angle: f64,
    pub shift: [f64; 3],
}

impl AugmentSample {
    pub fn draw(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Self {
        let crop_axis = rng.gen_range(0..3usize);
        let crop_upper_side = rng.gen_bool(0.5);
        let crop_fraction = if cfg.max_crop_fraction > 0.0 {
            rng.gen_range(0.0..cfg.max_crop_fraction)
        } else {
            0.0
        };
        // uniform direction on the sphere
        let axis = loop {
            let v: [f64; 3] = [
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-12 {
                break [v[0] / n, v[1] / n, v[2] / n];
            }
        };
        let angle = if cfg.max_angle > 0.0 {
            rng.gen_range(-cfg.max_angle..cfg.max_angle)
        } else {
            0.0
        };
        let shift = if cfg.max_shift > 0.0 {
            [
                rng.gen_range(-cfg.max_shift..cfg.max_shift),
                rng.gen_range(-cfg.max_shift..cfg.max_shift),
                rng.gen_range(-cfg.max_shift..cfg.max_shift),
            ]
        } else {
            [0.0; 3]
        };
        AugmentSample {
            crop_axis,
            crop_upper_side,
            crop_fraction,
            rotation_axis: axis,
            angle,
            shift,
        }
    }
}

fn rotation_matrix(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = axis;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

pub fn centroid(points: &[[f64; 3]]) -> [f64; 3] {
    let n = points.len() as f64;
    let mut c = [0.0f64; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    for v in c.iter_mut() {
        *v /= n;
    }
    c
}

/// Rotates about `pivot` and translates, clamping back into the slack range
/// only. Shared by augment and by paired input/target transforms, which must
/// use one common pivot.
pub fn apply_rigid(points: &mut [[f64; 3]], sample: &AugmentSample, pivot: [f64; 3]) {
    let lo = -NORMALIZED_SLACK;
    let hi = 1.0 + NORMALIZED_SLACK;
    if sample.angle == 0.0 {
        if sample.shift != [0.0; 3] {
            for p in points.iter_mut() {
                for a in 0..3 {
                    p[a] = (p[a] + sample.shift[a]).clamp(lo, hi);
                }
            }
        }
        return;
    }
    let m = rotation_matrix(sample.rotation_axis, sample.angle);
    for p in points.iter_mut() {
        let d = [p[0] - pivot[0], p[1] - pivot[1], p[2] - pivot[2]];
        for a in 0..3 {
            let r = m[a][0] * d[0] + m[a][1] * d[1] + m[a][2] * d[2];
            p[a] = (pivot[a] + r + sample.shift[a]).clamp(lo, hi);
        }
    }
}

/// Training augmentation: permutation, axis-aligned crop, rotation about a
/// random axis, and translation, in that order.
pub fn augment(pc: &PointCloud, cfg: &AugmentConfig, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = AugmentSample::draw(cfg, &mut rng);
    augment_with(pc, &sample, &mut rng, None)
}

/// Applies a pre-drawn augmentation; the rng drives the permutation only.
/// `pivot` overrides the rotation center (defaults to the post-crop
/// centroid), letting a paired target share the same rigid motion.
pub fn augment_with(
    pc: &PointCloud,
    sample: &AugmentSample,
    rng: &mut ChaCha8Rng,
    pivot: Option<[f64; 3]>,
) -> Result<PointCloud> {
    pc.expect_frame(Frame::Normalized)?;
    let t = pc.transform().ok_or(Error::MissingTransform)?;
    let mut points = pc.points().to_vec();
    points.shuffle(rng);

    if sample.crop_fraction > 0.0 {
        let remove = (sample.crop_fraction * points.len() as f64).floor() as usize;
        if points.len().saturating_sub(remove) < 2 {
            return Err(Error::CloudTooSmall {
                needed: 2,
                have: points.len().saturating_sub(remove),
            });
        }
        if remove > 0 {
            let axis = sample.crop_axis;
            let mut coords: Vec<f64> = points.iter().map(|p| p[axis]).collect();
            coords.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if sample.crop_upper_side {
                let threshold = coords[coords.len() - remove];
                points.retain(|p| p[axis] < threshold);
            } else {
                let threshold = coords[remove - 1];
                points.retain(|p| p[axis] > threshold);
            }
            if points.len() < 2 {
                return Err(Error::CloudTooSmall {
                    needed: 2,
                    have: points.len(),
                });
            }
        }
    }

    let pivot = pivot.unwrap_or_else(|| centroid(&points));
    apply_rigid(&mut points, sample, pivot);
    PointCloud::normalized(points, t)
}

// --- PLY import/export -----------------------------------------------------

/// Writes x,y,z as 32-bit floats. Normalized clouds carry their transform in
/// a `comment norm <sx> <sy> <sz> <scale>` header line.
pub fn save_ply(pc: &PointCloud, path: &Path, binary: bool) -> Result<()> {
    let mut header = String::new();
    header.push_str("ply\n");
    header.push_str(if binary {
        "format binary_little_endian 1.0\n"
    } else {
        "format ascii 1.0\n"
    });
    if let Some(t) = pc.transform() {
        header.push_str(&format!(
            "comment norm {} {} {} {}\n",
            t.shift[0], t.shift[1], t.shift[2], t.scale
        ));
    }
    header.push_str(&format!("element vertex {}\n", pc.len()));
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    header.push_str("end_header\n");

    let mut bytes = header.into_bytes();
    if binary {
        for p in pc.points() {
            for &c in p {
                bytes.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
    } else {
        for p in pc.points() {
            bytes.extend_from_slice(format!("{} {} {}\n", p[0] as f32, p[1] as f32, p[2] as f32).as_bytes());
        }
    }
    write_atomic(path, &bytes)
}

pub fn load_ply(path: &Path) -> Result<PointCloud> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let mut read_line = |reader: &mut BufReader<std::fs::File>| -> Result<String> {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::malformed(path, "unexpected end of header"));
        }
        Ok(line.trim_end().to_string())
    };

    if read_line(&mut reader)? != "ply" {
        return Err(Error::malformed(path, "missing ply magic"));
    }
    let mut binary = false;
    let mut count: Option<usize> = None;
    let mut transform: Option<NormTransform> = None;
    let mut properties: Vec<String> = Vec::new();
    loop {
        let l = read_line(&mut reader)?;
        if l == "end_header" {
            break;
        }
        if l.starts_with("format ") {
            binary = match l.as_str() {
                "format ascii 1.0" => false,
                "format binary_little_endian 1.0" => true,
                other => {
                    return Err(Error::Unsupported {
                        path: path.into(),
                        reason: format!("ply format {other:?}"),
                    })
                }
            };
        } else if let Some(rest) = l.strip_prefix("comment norm ") {
            let vals: Vec<f64> = rest
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::malformed(path, "bad norm comment"))?;
            if vals.len() != 4 || !(vals[3] > 0.0) {
                return Err(Error::malformed(path, "bad norm comment"));
            }
            transform = Some(NormTransform {
                shift: [vals[0], vals[1], vals[2]],
                scale: vals[3],
            });
        } else if let Some(rest) = l.strip_prefix("element vertex ") {
            count = Some(
                rest.parse()
                    .map_err(|_| Error::malformed(path, "bad vertex count"))?,
            );
        } else if l.starts_with("element ") {
            return Err(Error::Unsupported {
                path: path.into(),
                reason: format!("ply element {l:?}"),
            });
        } else if let Some(rest) = l.strip_prefix("property ") {
            properties.push(rest.to_string());
        }
    }
    if properties != ["float x", "float y", "float z"] {
        return Err(Error::Unsupported {
            path: path.into(),
            reason: "ply properties must be float x,y,z".into(),
        });
    }
    let count = count.ok_or_else(|| Error::malformed(path, "missing vertex element"))?;

    let mut points = Vec::with_capacity(count);
    if binary {
        let mut buf = vec![0u8; count * 12];
        reader
            .read_exact(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        for chunk in buf.chunks_exact(12) {
            let x = f32::from_le_bytes(chunk[0..4].try_into().unwrap()) as f64;
            let y = f32::from_le_bytes(chunk[4..8].try_into().unwrap()) as f64;
            let z = f32::from_le_bytes(chunk[8..12].try_into().unwrap()) as f64;
            points.push([x, y, z]);
        }
    } else {
        let mut text = String::new();
        reader
            .read_to_string(&mut text)
            .map_err(|e| Error::io(path, e))?;
        for l in text.lines().take(count) {
            let vals: Vec<f64> = l
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::malformed(path, "bad vertex line"))?;
            if vals.len() != 3 {
                return Err(Error::malformed(path, "bad vertex line"));
            }
            points.push([vals[0], vals[1], vals[2]]);
        }
        if points.len() != count {
            return Err(Error::malformed(path, "vertex count mismatch"));
        }
    }
    match transform {
        Some(t) => PointCloud::normalized(points, t),
        None => PointCloud::world(points),
    }
}
