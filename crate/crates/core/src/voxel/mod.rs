//! Binary occupancy volumes with anisotropic physical spacing, plus the
//! morphology used by postprocessing and metrics.

mod io;
mod mc_tables;
mod mesh;

pub use io::{load_volume, save_volume};
pub use mesh::{extract_surface_mesh, write_ply_mesh, write_stl, TriMesh};

use crate::cloud::{Frame, PointCloud};
use crate::error::{Error, Result};

/// Dense binary volume, x-fastest voxel order. `origin` is the world position
/// (mm) of the center of voxel (0,0,0); voxel (i,j,k) is centered at
/// `origin + (i,j,k) * spacing`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<u8>,
}

impl VoxelVolume {
    pub fn new(
        shape: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        data: Vec<u8>,
    ) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::InvalidInput("volume shape must be positive".into()));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidInput(
                "voxel spacing must be strictly positive".into(),
            ));
        }
        let expected = shape[0] * shape[1] * shape[2];
        if data.len() != expected {
            return Err(Error::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("volume data must be 0/1".into()));
        }
        Ok(VoxelVolume {
            shape,
            spacing,
            origin,
            data,
        })
    }

    pub fn empty(shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Self {
        VoxelVolume::new(shape, spacing, origin, vec![0; shape[0] * shape[1] * shape[2]])
            .expect("valid empty volume")
    }

    /// Empty volume on the same grid as `self`.
    pub fn empty_like(&self) -> Self {
        VoxelVolume::empty(self.shape, self.spacing, self.origin)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn linear(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.shape[0] * (j + self.shape[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[self.linear(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: u8) {
        let idx = self.linear(i, j, k);
        self.data[idx] = v;
    }

    #[inline]
    fn get_signed(&self, i: isize, j: isize, k: isize) -> Option<u8> {
        if i < 0
            || j < 0
            || k < 0
            || i as usize >= self.shape[0]
            || j as usize >= self.shape[1]
            || k as usize >= self.shape[2]
        {
            None
        } else {
            Some(self.get(i as usize, j as usize, k as usize))
        }
    }

    /// World-space center (mm) of voxel (i,j,k).
    pub fn world_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty_foreground(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Grid identity: shape, spacing, and origin all equal.
    pub fn same_grid(&self, other: &VoxelVolume) -> bool {
        self.shape == other.shape && self.spacing == other.spacing && self.origin == other.origin
    }

    /// Iterator over (i,j,k) of foreground voxels in linear order.
    pub fn foreground_voxels(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [nx, ny, _] = self.shape;
        self.data.iter().enumerate().filter_map(move |(idx, &v)| {
            (v != 0).then(|| {
                let i = idx % nx;
                let j = (idx / nx) % ny;
                let k = idx / (nx * ny);
                [i, j, k]
            })
        })
    }
}

/// Neighborhood shape for morphology.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeKind {
    /// 6-neighborhood ball (L1 distance <= radius).
    Cross6,
    /// 26-neighborhood ball (Chebyshev distance <= radius).
    Cube26,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructuringElement {
    pub kind: SeKind,
    pub radius: usize,
}

impl StructuringElement {
    pub fn new(kind: SeKind, radius: usize) -> Result<Self> {
        if radius < 1 {
            return Err(Error::InvalidInput(
                "structuring element radius must be >= 1".into(),
            ));
        }
        Ok(StructuringElement { kind, radius })
    }

    pub fn cross6(radius: usize) -> Self {
        StructuringElement::new(SeKind::Cross6, radius).unwrap()
    }

    pub fn cube26(radius: usize) -> Self {
        StructuringElement::new(SeKind::Cube26, radius).unwrap()
    }

    /// Offsets of the element, including the center.
    pub fn offsets(&self) -> Vec<[isize; 3]> {
        let r = self.radius as isize;
        let mut out = Vec::new();
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let keep = match self.kind {
                        SeKind::Cross6 => dx.abs() + dy.abs() + dz.abs() <= r,
                        SeKind::Cube26 => true,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Dilation: a voxel is set if any element offset lands on foreground.
pub fn dilate(v: &VoxelVolume, se: &StructuringElement) -> VoxelVolume {
    let offsets = se.offsets();
    let mut out = v.empty_like();
    for [i, j, k] in v.foreground_voxels() {
        for o in &offsets {
            let (x, y, z) = (i as isize + o[0], j as isize + o[1], k as isize + o[2]);
            if x >= 0
                && y >= 0
                && z >= 0
                && (x as usize) < v.shape[0]
                && (y as usize) < v.shape[1]
                && (z as usize) < v.shape[2]
            {
                out.set(x as usize, y as usize, z as usize, 1);
            }
        }
    }
    out
}

/// Erosion: a foreground voxel survives if every element offset lands on
/// foreground. Offsets falling outside the grid read as `border_value`.
pub fn erode(v: &VoxelVolume, se: &StructuringElement, border_value: bool) -> VoxelVolume {
    let offsets = se.offsets();
    let mut out = v.empty_like();
    'voxels: for [i, j, k] in v.foreground_voxels() {
        for o in &offsets {
            let inside = match v.get_signed(i as isize + o[0], j as isize + o[1], k as isize + o[2])
            {
                Some(val) => val != 0,
                None => border_value,
            };
            if !inside {
                continue 'voxels;
            }
        }
        out.set(i, j, k, 1);
    }
    out
}

/// Dilation followed by erosion. The erosion treats out-of-grid samples as
/// foreground so that closing stays extensive at the grid boundary.
pub fn binary_closing(v: &VoxelVolume, se: &StructuringElement) -> VoxelVolume {
    erode(&dilate(v, se), se, true)
}

/// Foreground voxels that touch background: the volume minus its erosion
/// (cross6 radius 1, background outside the grid).
pub fn boundary(v: &VoxelVolume) -> VoxelVolume {
    let eroded = erode(v, &StructuringElement::cross6(1), false);
    let mut out = v.clone();
    for (o, e) in out.data.iter_mut().zip(&eroded.data) {
        if *e != 0 {
            *o = 0;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[isize; 3]> {
        match self {
            Connectivity::Six => vec![
                [-1, 0, 0],
                [1, 0, 0],
                [0, -1, 0],
                [0, 1, 0],
                [0, 0, -1],
                [0, 0, 1],
            ],
            Connectivity::TwentySix => {
                let mut out = Vec::with_capacity(26);
                for dz in -1..=1isize {
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            if dx != 0 || dy != 0 || dz != 0 {
                                out.push([dx, dy, dz]);
                            }
                        }
                    }
                }
                out
            }
        }
    }
}

/// Largest connected component plus how many components were found.
#[derive(Debug, Clone)]
pub struct LargestComponent {
    pub volume: VoxelVolume,
    pub component_count: usize,
    /// Voxels in the selected component; 0 when the foreground is empty.
    pub voxels: usize,
}

/// Keeps only the largest connected foreground component. Ties go to the
/// component with the smallest minimum linear index (the one discovered
/// first by an ascending scan). An empty foreground is not an error; the
/// result reports zero components.
pub fn largest_component(v: &VoxelVolume, connectivity: Connectivity) -> LargestComponent {
    let offsets = connectivity.offsets();
    let [nx, ny, nz] = v.shape;
    let mut label = vec![0u32; v.data.len()]; // 0 = unvisited/background
    let mut best_label = 0u32;
    let mut best_size = 0usize;
    let mut component_count = 0usize;
    let mut queue: Vec<usize> = Vec::new();

    for seed in 0..v.data.len() {
        if v.data[seed] == 0 || label[seed] != 0 {
            continue;
        }
        component_count += 1;
        let id = component_count as u32;
        let mut size = 0usize;
        queue.clear();
        queue.push(seed);
        label[seed] = id;
        while let Some(idx) = queue.pop() {
            size += 1;
            let i = (idx % nx) as isize;
            let j = ((idx / nx) % ny) as isize;
            let k = (idx / (nx * ny)) as isize;
            for o in &offsets {
                let (x, y, z) = (i + o[0], j + o[1], k + o[2]);
                if x < 0
                    || y < 0
                    || z < 0
                    || x as usize >= nx
                    || y as usize >= ny
                    || z as usize >= nz
                {
                    continue;
                }
                let nidx = x as usize + nx * (y as usize + ny * z as usize);
                if v.data[nidx] != 0 && label[nidx] == 0 {
                    label[nidx] = id;
                    queue.push(nidx);
                }
            }
        }
        // strict > keeps the earlier (smaller min linear index) on ties
        if size > best_size {
            best_size = size;
            best_label = id;
        }
    }

    let mut out = v.empty_like();
    if best_label != 0 {
        for (o, l) in out.data.iter_mut().zip(&label) {
            if *l == best_label {
                *o = 1;
            }
        }
    }
    LargestComponent {
        volume: out,
        component_count,
        voxels: best_size,
    }
}

/// `defect AND NOT defective_input`, on identical grids.
pub fn subtract_overlap(defect: &VoxelVolume, defective_input: &VoxelVolume) -> Result<VoxelVolume> {
    if !defect.same_grid(defective_input) {
        return Err(Error::GridMismatch);
    }
    let mut out = defect.clone();
    for (o, i) in out.data.iter_mut().zip(&defective_input.data) {
        if *i != 0 {
            *o = 0;
        }
    }
    Ok(out)
}

/// Marks the voxel whose box contains each point of the cloud. Boxes are
/// half-open with the upper boundary included in the lower-index voxel, so a
/// point exactly between two voxels lands in the lower one. Points outside
/// the grid are dropped and counted, not fatal.
pub fn voxelize(pc: &PointCloud, like: &VoxelVolume) -> Result<(VoxelVolume, usize)> {
    if pc.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let world_points: Vec<[f64; 3]> = match pc.frame() {
        Frame::WorldMm => pc.points().to_vec(),
        Frame::Normalized => {
            let t = pc.transform().ok_or(Error::MissingTransform)?;
            pc.points().iter().map(|p| t.denormalize(*p)).collect()
        }
    };
    let mut out = like.empty_like();
    let mut dropped = 0usize;
    for p in &world_points {
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let u = (p[a] - like.origin[a]) / like.spacing[a];
            let i = (u - 0.5).ceil();
            if i < 0.0 || i >= like.shape[a] as f64 {
                inside = false;
                break;
            }
            idx[a] = i as usize;
        }
        if inside {
            out.set(idx[0], idx[1], idx[2], 1);
        } else {
            dropped += 1;
        }
    }
    Ok((out, dropped))
}

#[cfg(test)]
mod tests;
