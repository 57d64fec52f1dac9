//! Dataset ingestion for the cranial-defect directory layouts, isotropic
//! nearest-neighbor resampling for the input-size ablation, and a synthetic
//! shell-phantom generator that stands in for the medical data at desk scale.
//!
//! Expected directory layouts (volumes are `.json` sidecars or `.nrrd`):
//!
//! * `skullbreak`: `<root>/<split>/defective_skull/<class>/<id>.<ext>`,
//!   `<root>/<split>/defect/<class>/<id>.<ext>`, optional
//!   `<root>/<split>/complete_skull/<id>.<ext>`, with splits `train`/`test`
//!   and five defect classes per skull.
//! * `skullfix`: the same without the class level.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::{save_volume, VoxelVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetLayout {
    SkullBreak,
    SkullFix,
}

impl DatasetLayout {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "skullbreak" => Ok(DatasetLayout::SkullBreak),
            "skullfix" => Ok(DatasetLayout::SkullFix),
            other => Err(Error::InvalidConfig(format!(
                "unknown dataset layout {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub defective_path: PathBuf,
    pub defect_path: Option<PathBuf>,
    pub complete_path: Option<PathBuf>,
    pub defect_class: Option<String>,
    pub split: Split,
    /// Set when the ground-truth defect file is missing.
    pub flagged: bool,
}

fn is_volume_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("json") | Some("nrrd")
    )
}

fn sorted_volume_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() && is_volume_file(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Enumerates the cases under `root`. Cases with a missing ground-truth
/// defect are flagged, not dropped; an empty scan is an error.
pub fn scan_dataset(root: &Path, layout: DatasetLayout) -> Result<Vec<CaseRecord>> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
        ));
    }
    let mut records = Vec::new();
    for (split, split_name) in [(Split::Train, "train"), (Split::Test, "test")] {
        let split_dir = root.join(split_name);
        let defective_root = split_dir.join("defective_skull");
        let defect_root = split_dir.join("defect");
        let complete_root = split_dir.join("complete_skull");

        let class_dirs: Vec<(Option<String>, PathBuf)> = match layout {
            DatasetLayout::SkullBreak => sorted_subdirs(&defective_root)?
                .into_iter()
                .map(|d| (Some(stem_of(&d)), d))
                .collect(),
            DatasetLayout::SkullFix => {
                if defective_root.is_dir() {
                    vec![(None, defective_root.clone())]
                } else {
                    Vec::new()
                }
            }
        };

        for (class, dir) in class_dirs {
            for defective_path in sorted_volume_files(&dir)? {
                let id_stem = stem_of(&defective_path);
                let ext = defective_path
                    .extension()
                    .and_then(|e| e.to_str())
                    .unwrap_or("json");
                let defect_dir = match &class {
                    Some(c) => defect_root.join(c),
                    None => defect_root.clone(),
                };
                let defect_path = defect_dir.join(format!("{id_stem}.{ext}"));
                let defect_exists = defect_path.is_file();
                let complete_path = complete_root.join(format!("{id_stem}.{ext}"));
                let id = match &class {
                    Some(c) => format!("{split_name}/{c}/{id_stem}"),
                    None => format!("{split_name}/{id_stem}"),
                };
                records.push(CaseRecord {
                    id,
                    defective_path,
                    defect_path: defect_exists.then_some(defect_path),
                    complete_path: complete_path.is_file().then_some(complete_path),
                    defect_class: class.clone(),
                    split,
                    flagged: !defect_exists,
                });
            }
        }
    }
    if records.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no cases found under {}",
            root.display()
        )));
    }
    Ok(records)
}

/// Nearest-neighbor resample onto an isotropic grid of `target_mm`, covering
/// the same physical extent and keeping the volume binary. The identity
/// spacing is a bit-exact identity.
pub fn resample_spacing(v: &VoxelVolume, target_mm: f64) -> Result<VoxelVolume> {
    if !(target_mm > 0.0) || !target_mm.is_finite() {
        return Err(Error::InvalidConfig("target spacing must be > 0".into()));
    }
    let shape = v.shape();
    let spacing = v.spacing();
    if spacing == [target_mm; 3] {
        return Ok(v.clone());
    }
    let mut new_shape = [0usize; 3];
    for a in 0..3 {
        new_shape[a] = ((shape[a] as f64 * spacing[a]) / target_mm).ceil() as usize;
        if new_shape[a] < 2 {
            return Err(Error::InvalidInput(format!(
                "resampling to {target_mm} mm degenerates axis {a}"
            )));
        }
    }
    let mut out = VoxelVolume::empty(new_shape, [target_mm; 3], v.origin());
    for k in 0..new_shape[2] {
        let sk = nearest_index(k, target_mm, spacing[2], shape[2]);
        for j in 0..new_shape[1] {
            let sj = nearest_index(j, target_mm, spacing[1], shape[1]);
            for i in 0..new_shape[0] {
                let si = nearest_index(i, target_mm, spacing[0], shape[0]);
                if v.get(si, sj, sk) != 0 {
                    out.set(i, j, k, 1);
                }
            }
        }
    }
    Ok(out)
}

fn nearest_index(i: usize, target: f64, spacing: f64, extent: usize) -> usize {
    let world = i as f64 * target;
    let idx = (world / spacing).round() as isize;
    idx.clamp(0, extent as isize - 1) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShellKind {
    SphereShell,
    EllipsoidShell,
}

/// Synthetic thin-walled solid: a shell with a cone-shaped defect cut out of
/// it, mimicking the topology this pipeline targets.
#[derive(Debug, Clone, Copy)]
pub struct PhantomSpec {
    pub kind: ShellKind,
    pub grid: usize,
    /// Shell thickness in voxels.
    pub thickness: f64,
    /// Defect solid-angle fraction of the full sphere, in (0, 0.5).
    pub defect_fraction: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 8 {
            return Err(Error::InvalidConfig("phantom grid must be >= 8".into()));
        }
        if self.thickness < 1.0 {
            return Err(Error::InvalidConfig(
                "phantom shell thickness must be >= 1 voxel".into(),
            ));
        }
        if !(self.defect_fraction > 0.0 && self.defect_fraction < 0.5) {
            return Err(Error::InvalidConfig(
                "phantom defect fraction must lie in (0, 0.5)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub defective: VoxelVolume,
    pub defect: VoxelVolume,
    pub complete: VoxelVolume,
}

/// Builds the phantom triple on a unit-spacing grid: `complete` is the solid
/// shell, `defect` its intersection with a random cone from the centroid, and
/// `defective = complete AND NOT defect`. The three satisfy
/// `defective ∪ defect == complete` exactly, with empty intersection.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let n = spec.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // random cone axis, uniform on the sphere
    let axis = loop {
        let v: [f64; 3] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-6 && norm <= 1.0 {
            break [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    };
    // spherical-cap solid angle fraction f = (1 - cos θ) / 2
    let cos_half_angle = 1.0 - 2.0 * spec.defect_fraction;

    let c = (n as f64 - 1.0) / 2.0;
    let outer = 0.375 * n as f64;
    let inner = (outer - spec.thickness).max(0.0);
    // ellipsoid: squash one axis to 70%
    let radii = match spec.kind {
        ShellKind::SphereShell => [1.0, 1.0, 1.0],
        ShellKind::EllipsoidShell => [1.0, 1.0, 0.7],
    };

    let mut complete = VoxelVolume::empty([n, n, n], [1.0; 3], [0.0; 3]);
    let mut defect = complete.empty_like();
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let d = [
                    (i as f64 - c) / radii[0],
                    (j as f64 - c) / radii[1],
                    (k as f64 - c) / radii[2],
                ];
                let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if r < inner || r > outer {
                    continue;
                }
                complete.set(i, j, k, 1);
                let raw = [i as f64 - c, j as f64 - c, k as f64 - c];
                let rn = (raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2]).sqrt();
                if rn > 0.0 {
                    let cos = (raw[0] * axis[0] + raw[1] * axis[1] + raw[2] * axis[2]) / rn;
                    if cos >= cos_half_angle {
                        defect.set(i, j, k, 1);
                    }
                }
            }
        }
    }
    if defect.is_empty_foreground() {
        return Err(Error::InvalidInput(
            "phantom defect is empty at the given fraction/thickness".into(),
        ));
    }
    let defective = crate::voxel::subtract_overlap(&complete, &defect)?;
    if defective.is_empty_foreground() {
        return Err(Error::InvalidInput("phantom defective part is empty".into()));
    }
    Ok(Phantom {
        defective,
        defect,
        complete,
    })
}

/// Writes `count` phantoms under `<root>/phantoms/<seed>/case_<i>/` in the
/// sidecar format; returns the per-case directories.
pub fn write_phantom_set(
    root: &Path,
    base: &PhantomSpec,
    count: usize,
    master_seed: u64,
) -> Result<Vec<PathBuf>> {
    let set_dir = root.join("phantoms").join(master_seed.to_string());
    std::fs::create_dir_all(&set_dir).map_err(|e| Error::io(&set_dir, e))?;
    let mut dirs = Vec::with_capacity(count);
    for i in 0..count {
        let spec = PhantomSpec {
            seed: master_seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            ..*base
        };
        let phantom = make_phantom(&spec)?;
        let dir = set_dir.join(format!("case_{i:03}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_volume(&phantom.defective, &dir.join("defective.json"))?;
        save_volume(&phantom.defect, &dir.join("defect.json"))?;
        save_volume(&phantom.complete, &dir.join("complete.json"))?;
        dirs.push(dir);
    }
    Ok(dirs)
}
