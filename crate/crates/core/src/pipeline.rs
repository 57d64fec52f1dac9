//! End-to-end case completion: volume → cloud → normalize → M rounds of
//! {jitter, split, per-group completion, merge} → union → voxelize →
//! closing → largest component → overlap subtraction → optional meshing.
//!
//! Every case derives its own seed stream from the master seed, so results
//! are bit-identical across runs and across batch parallelism.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{self, PointCloud};
use crate::error::{Error, Result};
use crate::model::{forward, ModelParams};
use crate::track;
use crate::voxel::{
    binary_closing, extract_surface_mesh, largest_component, subtract_overlap, voxelize,
    Connectivity, SeKind, StructuringElement, TriMesh, VoxelVolume,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Completion rounds; the first runs on the unjittered cloud.
    pub refinements: usize,
    /// Gaussian jitter std in normalized units, applied from round 2 on.
    pub jitter_sigma: f64,
    pub group_in: usize,
    pub group_out: usize,
    /// Closing element: "cross6" or "cube26".
    pub closing_kind: ClosingKind,
    pub closing_radius: usize,
    /// Component connectivity: 6 or 26.
    pub connectivity: u8,
    pub master_seed: u64,
    /// Extract a triangle mesh of the reconstructed defect.
    pub mesh: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClosingKind {
    Cross6,
    Cube26,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            refinements: 3,
            jitter_sigma: 0.005,
            group_in: 1024,
            group_out: 512,
            closing_kind: ClosingKind::Cube26,
            closing_radius: 1,
            connectivity: 26,
            master_seed: 0,
            mesh: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.refinements < 1 {
            return Err(Error::InvalidConfig("refinements must be >= 1".into()));
        }
        if self.jitter_sigma < 0.0 || !self.jitter_sigma.is_finite() {
            return Err(Error::InvalidConfig("jitter sigma must be >= 0".into()));
        }
        if self.closing_radius < 1 {
            return Err(Error::InvalidConfig("closing radius must be >= 1".into()));
        }
        if self.connectivity != 6 && self.connectivity != 26 {
            return Err(Error::InvalidConfig("connectivity must be 6 or 26".into()));
        }
        Ok(())
    }

    pub fn structuring_element(&self) -> StructuringElement {
        let kind = match self.closing_kind {
            ClosingKind::Cross6 => SeKind::Cross6,
            ClosingKind::Cube26 => SeKind::Cube26,
        };
        StructuringElement::new(kind, self.closing_radius).expect("validated radius")
    }

    pub fn component_connectivity(&self) -> Connectivity {
        if self.connectivity == 6 {
            Connectivity::Six
        } else {
            Connectivity::TwentySix
        }
    }

    /// The per-case budgets must match the checkpoint the model was trained
    /// with; a mismatch is fatal.
    pub fn check_budgets(&self, params: &ModelParams) -> Result<()> {
        if self.group_in != params.config.group_in || self.group_out != params.config.group_out {
            return Err(Error::BudgetMismatch {
                pipeline_in: self.group_in,
                pipeline_out: self.group_out,
                model_in: params.config.group_in,
                model_out: params.config.group_out,
            });
        }
        Ok(())
    }
}

/// Everything recorded about one completion run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub case_seed: u64,
    pub refinements: usize,
    pub jitter_sigma: f64,
    pub input_points: usize,
    /// Group count per refinement round.
    pub iteration_groups: Vec<usize>,
    pub output_points: usize,
    /// Points falling outside the grid during voxelization.
    pub dropped_points: usize,
    pub components_found: usize,
    /// True when postprocessing erased every voxel.
    pub empty_result: bool,
    pub elapsed_ms: u64,
    pub peak_tracked_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    /// Merged reconstruction across all rounds, normalized frame.
    pub defect_cloud: PointCloud,
    /// Postprocessed defect on the input grid, disjoint from the input.
    pub defect_volume: VoxelVolume,
    pub mesh: Option<TriMesh>,
    pub provenance: Provenance,
}

/// Completes one defective volume. Deterministic for a given
/// `cfg.master_seed`; an empty postprocessed defect is flagged, not fatal.
pub fn complete_case(
    defective: &VoxelVolume,
    params: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<ReconstructionResult> {
    cfg.validate()?;
    cfg.check_budgets(params)?;
    let start = std::time::Instant::now();
    track::reset_peak();

    let world = cloud::cloud_from_volume(defective)?;
    let normalized = cloud::normalize(&world)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);

    let mut merged_rounds: Vec<PointCloud> = Vec::with_capacity(cfg.refinements);
    let mut iteration_groups = Vec::with_capacity(cfg.refinements);
    for round in 0..cfg.refinements {
        // the unperturbed cloud contributes in round one
        let round_cloud = if round == 0 {
            normalized.clone()
        } else {
            cloud::jitter(&normalized, cfg.jitter_sigma, rng.gen())?
        };
        let split = cloud::split_groups(&round_cloud, cfg.group_in, rng.gen())?;
        iteration_groups.push(split.group_count());
        let mut outputs = Vec::with_capacity(split.group_count());
        for g in 0..split.group_count() {
            let group = split.group_cloud(&round_cloud, g)?;
            outputs.push(forward(&group, params, rng.gen())?);
        }
        merged_rounds.push(cloud::merge(&outputs)?);
    }
    let defect_cloud = cloud::merge(&merged_rounds)?;
    drop(merged_rounds);

    let (raw_volume, dropped_points) = voxelize(&defect_cloud, defective)?;
    let closed = binary_closing(&raw_volume, &cfg.structuring_element());
    let component = largest_component(&closed, cfg.component_connectivity());
    let defect_volume = subtract_overlap(&component.volume, defective)?;

    let empty_result = defect_volume.is_empty_foreground();
    let mesh = if cfg.mesh && !empty_result {
        Some(extract_surface_mesh(&defect_volume)?)
    } else {
        None
    };

    let provenance = Provenance {
        case_seed: cfg.master_seed,
        refinements: cfg.refinements,
        jitter_sigma: cfg.jitter_sigma,
        input_points: world.len(),
        iteration_groups,
        output_points: defect_cloud.len(),
        dropped_points,
        components_found: component.component_count,
        empty_result,
        elapsed_ms: start.elapsed().as_millis() as u64,
        peak_tracked_bytes: track::peak_bytes(),
    };
    Ok(ReconstructionResult {
        defect_cloud,
        defect_volume,
        mesh,
        provenance,
    })
}

/// Case-level parallel batch. Each case runs with seed
/// `master_seed XOR case index`, entirely on one worker, so results match
/// sequential execution for any `parallelism`. Per-case failures are
/// collected, not fatal.
pub fn complete_batch(
    cases: &[VoxelVolume],
    params: &ModelParams,
    cfg: &PipelineConfig,
    parallelism: usize,
) -> Vec<Result<ReconstructionResult>> {
    let run = |(i, case): (usize, &VoxelVolume)| {
        let case_cfg = PipelineConfig {
            master_seed: cfg.master_seed ^ i as u64,
            ..*cfg
        };
        complete_case(case, params, &case_cfg)
    };
    if parallelism <= 1 {
        cases.iter().enumerate().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .expect("thread pool");
        pool.install(|| {
            use rayon::prelude::*;
            cases.par_iter().enumerate().map(run).collect()
        })
    }
}
