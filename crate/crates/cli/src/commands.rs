use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};

use defrec_core::cloud::{cloud_from_volume, normalize, save_ply, PointCloud};
use defrec_core::data::{
    make_phantom, scan_dataset, write_phantom_set, DatasetLayout, PhantomSpec, Split,
};
use defrec_core::metrics::{evaluate_volumes, reports_to_csv, MetricsReport};
use defrec_core::model::{
    load_checkpoint, save_checkpoint, train as train_model, Checkpoint, TrainSample, TrainState,
};
use defrec_core::pipeline::{complete_batch, complete_case, PipelineConfig};
use defrec_core::util::write_atomic;
use defrec_core::voxel::{load_volume, save_volume, write_stl, VoxelVolume};
use defrec_core::Error as CoreError;

use crate::config::{load_config, write_resolved, AppConfig};
use crate::Common;

/// Exit-code contract: 2 I/O or file format, 3 validation, 4 divergence.
pub fn classify_error(err: &anyhow::Error) -> u8 {
    if let Some(core) = err.downcast_ref::<CoreError>() {
        return match core {
            CoreError::Io { .. }
            | CoreError::Malformed { .. }
            | CoreError::Unsupported { .. }
            | CoreError::ShapeDataMismatch { .. } => 2,
            CoreError::Divergence { .. } => 4,
            _ => 3,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 2;
    }
    3
}

fn setup(common: &Common) -> Result<AppConfig> {
    let cfg = load_config(common.config.as_deref(), &common.overrides)?;
    std::fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))?;
    write_resolved(&cfg, &common.out, common.seed, common.jobs)?;
    Ok(cfg)
}

fn say(common: &Common, msg: impl AsRef<str>) {
    if common.verbose {
        eprintln!("{}", msg.as_ref());
    }
}

// --- convert -----------------------------------------------------------------

pub fn convert(
    common: &Common,
    input: &Path,
    spacing: Option<f64>,
    binary: bool,
) -> Result<ExitCode> {
    let cfg = setup(common)?;
    let _ = &cfg;
    let mut volume = load_volume(input)?;
    if let Some(mm) = spacing {
        volume = defrec_core::data::resample_spacing(&volume, mm)?;
        say(common, format!("resampled to {:?} voxels", volume.shape()));
    }
    let cloud = normalize(&cloud_from_volume(&volume)?)?;
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cloud".into());
    let out_path = common.out.join(format!("{stem}.ply"));
    save_ply(&cloud, &out_path, binary)?;
    println!("{}", cloud.len());
    say(common, format!("wrote {}", out_path.display()));
    Ok(ExitCode::SUCCESS)
}

// --- train -------------------------------------------------------------------

fn phantom_dataset(
    common: &Common,
    cfg: &AppConfig,
    count: usize,
) -> Result<Vec<TrainSample>> {
    let base = cfg.phantom.build(common.seed)?;
    let dirs = write_phantom_set(&common.out, &base, count, common.seed)?;
    say(common, format!("wrote {} phantoms under {}", dirs.len(), common.out.display()));
    let mut samples = Vec::with_capacity(count);
    for dir in &dirs {
        let defective = load_volume(&dir.join("defective.json"))?;
        let defect = load_volume(&dir.join("defect.json"))?;
        samples.push(pair_to_sample(&defective, &defect)?);
    }
    Ok(samples)
}

/// Normalizes the defective cloud and expresses the defect target in the
/// same frame.
fn pair_to_sample(defective: &VoxelVolume, defect: &VoxelVolume) -> Result<TrainSample> {
    let defective_cloud = normalize(&cloud_from_volume(defective)?)?;
    let t = defective_cloud
        .transform()
        .ok_or_else(|| anyhow!("normalization produced no transform"))?;
    let defect_world = cloud_from_volume(defect)?;
    let points: Vec<[f64; 3]> = defect_world
        .points()
        .iter()
        .map(|p| t.normalize(*p))
        .collect();
    let defect_cloud = PointCloud::normalized(points, t)?;
    Ok(TrainSample::new(defective_cloud, defect_cloud)?)
}

fn dataset_samples(root: &Path, layout: &str) -> Result<Vec<TrainSample>> {
    let layout = DatasetLayout::parse(layout)?;
    let records = scan_dataset(root, layout)?;
    let mut samples = Vec::new();
    for record in records
        .iter()
        .filter(|r| r.split == Split::Train && !r.flagged)
    {
        let defective = load_volume(&record.defective_path)?;
        let defect_path = record
            .defect_path
            .as_ref()
            .ok_or_else(|| anyhow!("record {} lacks a defect volume", record.id))?;
        let defect = load_volume(defect_path)?;
        samples.push(pair_to_sample(&defective, &defect)?);
    }
    if samples.is_empty() {
        bail!("no usable training cases found under {}", root.display());
    }
    Ok(samples)
}

pub fn train(
    common: &Common,
    phantoms: Option<usize>,
    dataset: Option<&Path>,
    layout: &str,
    steps: Option<usize>,
    resume: Option<&Path>,
) -> Result<ExitCode> {
    let mut cfg = setup(common)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
        write_resolved(&cfg, &common.out, common.seed, common.jobs)?;
    }
    let samples = match (phantoms, dataset) {
        (Some(n), None) => phantom_dataset(common, &cfg, n)?,
        (None, Some(root)) => dataset_samples(root, layout)?,
        _ => bail!("exactly one of --phantoms or --dataset is required"),
    };
    say(common, format!("training on {} cases", samples.len()));

    let objective = cfg.objective.build()?;
    let augment = cfg.augment.build();
    let tcfg = cfg.train.build(objective, augment, common.seed);
    let resume_state = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let (m, v) = ckpt
                .optimizer
                .ok_or_else(|| anyhow!("checkpoint has no optimizer state, cannot resume"))?;
            Some(TrainState {
                params: ckpt.params,
                opt_m: m,
                opt_v: v,
                step: ckpt.step as usize,
            })
        }
        None => None,
    };

    // checkpoint_every splits the run into segments; per-step seeds are
    // stateless, so segmented and unsegmented runs take identical steps
    let every = cfg.train.checkpoint_every;
    let mut remaining = tcfg.steps;
    let mut state = resume_state;
    let mut history: Vec<f64> = Vec::new();
    let ckpt_path = common.out.join("model.ckpt");
    while remaining > 0 {
        let chunk = if every == 0 { remaining } else { every.min(remaining) };
        let seg_cfg = defrec_core::model::TrainConfig {
            steps: chunk,
            ..tcfg
        };
        let outcome = train_model(&samples, cfg.model, &seg_cfg, state.take())?;
        history.extend(&outcome.loss_history);
        let diverged = outcome.diverged_at;
        state = Some(outcome.state);
        let s = state.as_ref().unwrap();
        save_checkpoint(
            &Checkpoint {
                params: s.params.clone(),
                optimizer: Some((s.opt_m.clone(), s.opt_v.clone())),
                step: s.step as u64,
            },
            &ckpt_path,
        )?;
        let mut csv = String::from("step,loss\n");
        let start = s.step - history.len();
        for (i, l) in history.iter().enumerate() {
            csv.push_str(&format!("{},{}\n", start + i, l));
        }
        write_atomic(&common.out.join("loss.csv"), csv.as_bytes())?;
        if let Some(step) = diverged {
            eprintln!("training diverged at step {step}; last good checkpoint kept");
            return Err(CoreError::Divergence { step }.into());
        }
        remaining -= chunk;
        say(common, format!("checkpoint at step {}", s.step));
    }
    println!("{}", ckpt_path.display());
    Ok(ExitCode::SUCCESS)
}

// --- complete -----------------------------------------------------------------

fn collect_inputs(inputs: &[PathBuf], input_dir: Option<&Path>) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = inputs.to_vec();
    if let Some(dir) = input_dir {
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(&d)
                .with_context(|| format!("reading {}", d.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            entries.sort();
            for path in entries {
                if path.is_dir() {
                    stack.push(path);
                } else if path.file_name().and_then(|n| n.to_str()) == Some("defective.json") {
                    files.push(path);
                }
            }
        }
        files.sort();
    }
    if files.is_empty() {
        bail!("no input volumes given (use --input or --input-dir)");
    }
    Ok(files)
}

fn case_stem(path: &Path, index: usize) -> String {
    // phantom layout stores each case as <case_dir>/defective.json
    if path.file_name().and_then(|n| n.to_str()) == Some("defective.json") {
        if let Some(parent) = path.parent().and_then(|p| p.file_name()) {
            return parent.to_string_lossy().into_owned();
        }
    }
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("case_{index:03}"))
}

pub fn complete(
    common: &Common,
    checkpoint: &Path,
    inputs: &[PathBuf],
    input_dir: Option<&Path>,
    refinements: Option<usize>,
    mesh: bool,
) -> Result<ExitCode> {
    let mut cfg = setup(common)?;
    if let Some(m) = refinements {
        cfg.pipeline.refinements = m;
    }
    if mesh {
        cfg.pipeline.mesh = true;
    }
    write_resolved(&cfg, &common.out, common.seed, common.jobs)?;

    let ckpt = load_checkpoint(checkpoint)?;
    let pcfg = cfg.pipeline.build(&ckpt.params.config, common.seed)?;
    let files = collect_inputs(inputs, input_dir)?;
    let volumes: Vec<VoxelVolume> = files
        .iter()
        .map(|p| load_volume(p))
        .collect::<std::result::Result<_, _>>()?;

    say(common, format!("completing {} cases", volumes.len()));
    let results = complete_batch(&volumes, &ckpt.params, &pcfg, common.jobs.max(1));

    let mut failures = 0usize;
    for ((path, result), index) in files.iter().zip(results).zip(0..) {
        let stem = case_stem(path, index);
        match result {
            Ok(r) => {
                save_ply(&r.defect_cloud, &common.out.join(format!("{stem}_cloud.ply")), false)?;
                save_volume(&r.defect_volume, &common.out.join(format!("{stem}_defect.json")))?;
                if let Some(m) = &r.mesh {
                    write_stl(m, &common.out.join(format!("{stem}_mesh.stl")))?;
                }
                let json = serde_json::to_string_pretty(&r.provenance)?;
                write_atomic(
                    &common.out.join(format!("{stem}_provenance.json")),
                    json.as_bytes(),
                )?;
                say(
                    common,
                    format!(
                        "{stem}: {} output points, {} groups/round, empty={}",
                        r.provenance.output_points,
                        r.provenance.iteration_groups.first().copied().unwrap_or(0),
                        r.provenance.empty_result
                    ),
                );
            }
            Err(e) => {
                failures += 1;
                eprintln!("{stem}: {e}");
            }
        }
    }
    if failures > 0 {
        bail!("{failures} of {} cases failed", files.len());
    }
    Ok(ExitCode::SUCCESS)
}

// --- evaluate -----------------------------------------------------------------

pub fn evaluate(
    common: &Common,
    pairs: &[String],
    pred_dir: Option<&Path>,
    gt_dir: Option<&Path>,
) -> Result<ExitCode> {
    let _cfg = setup(common)?;
    let mut matched: Vec<(String, PathBuf, PathBuf)> = Vec::new();
    for pair in pairs {
        let (pred, gt) = pair
            .split_once('=')
            .with_context(|| format!("--pair {pair:?} must look like pred.json=gt.json"))?;
        let pred = PathBuf::from(pred);
        let id = pred
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| pair.clone());
        matched.push((id, pred, PathBuf::from(gt)));
    }
    if let (Some(pd), Some(gd)) = (pred_dir, gt_dir) {
        let mut preds: Vec<PathBuf> = std::fs::read_dir(pd)
            .with_context(|| format!("reading {}", pd.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
            .collect();
        preds.sort();
        for pred in preds {
            let stem = pred.file_stem().unwrap().to_string_lossy().into_owned();
            let gt = gd.join(format!("{stem}.json"));
            if gt.is_file() {
                matched.push((stem, pred, gt));
            }
        }
    }
    if matched.is_empty() {
        bail!("nothing to evaluate (use --pair or --pred-dir/--gt-dir)");
    }

    let mut reports: Vec<MetricsReport> = Vec::new();
    let mut failures = 0usize;
    for (id, pred_path, gt_path) in &matched {
        let run = || -> Result<MetricsReport> {
            let pred = load_volume(pred_path)?;
            let gt = load_volume(gt_path)?;
            Ok(evaluate_volumes(id, &pred, &gt)?)
        };
        match run() {
            Ok(report) => {
                let json = serde_json::to_string_pretty(&report)?;
                write_atomic(
                    &common.out.join(format!("{id}_metrics.json")),
                    json.as_bytes(),
                )?;
                reports.push(report);
            }
            Err(e) => {
                failures += 1;
                eprintln!("{id}: {e}");
            }
        }
    }
    let csv = reports_to_csv(&reports);
    write_atomic(&common.out.join("metrics.csv"), csv.as_bytes())?;
    if let Some(mean) = defrec_core::metrics::aggregate(&reports) {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "mean DSC {:.4} BDSC {:.4} HD95 {} CD {}",
            mean.dsc,
            mean.bdsc,
            fmt(mean.hd95_mm),
            fmt(mean.cd_mm)
        );
    }
    if failures > 0 {
        bail!("{failures} of {} cases failed to evaluate", matched.len());
    }
    Ok(ExitCode::SUCCESS)
}

// --- bench -----------------------------------------------------------------------

/// Builds a shell phantom whose defective cloud splits into exactly
/// `target_groups` groups: finds a grid with enough foreground, then thins
/// randomly chosen voxels (seeded) down to the middle of the group band.
fn phantom_with_group_count(
    group_in: usize,
    target_groups: usize,
    seed: u64,
) -> Result<VoxelVolume> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let target_points = ((target_groups - 1) * group_in + group_in / 2 + 1).max(2);
    let mut grid = 10usize;
    while grid <= 512 {
        let spec = PhantomSpec {
            kind: defrec_core::data::ShellKind::SphereShell,
            grid,
            thickness: 3.0,
            defect_fraction: 0.08,
            seed,
        };
        if let Ok(p) = make_phantom(&spec) {
            let count = p.defective.foreground_count();
            if count >= target_points {
                let mut volume = p.defective;
                let mut filled: Vec<[usize; 3]> = volume.foreground_voxels().collect();
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xBE9C);
                filled.shuffle(&mut rng);
                for [i, j, k] in filled.into_iter().take(count - target_points) {
                    volume.set(i, j, k, 0);
                }
                assert_eq!(volume.foreground_count(), target_points);
                return Ok(volume);
            }
        }
        grid += 4;
    }
    bail!("no phantom grid yields {target_groups} groups of {group_in}")
}

pub fn bench(
    common: &Common,
    checkpoint: &Path,
    groups: &[usize],
    assert_flat: bool,
) -> Result<ExitCode> {
    let cfg = setup(common)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let pcfg = cfg.pipeline.build(&ckpt.params.config, common.seed)?;
    if groups.is_empty() || groups.iter().any(|&g| g == 0) {
        bail!("--groups needs positive group counts");
    }

    let mut rows = Vec::new();
    let mut csv = String::from("groups,input_points,peak_tracked_bytes,wall_ms\n");
    for &g in groups {
        let volume = phantom_with_group_count(ckpt.params.config.group_in, g, common.seed)?;
        let case_cfg = PipelineConfig {
            master_seed: common.seed ^ g as u64,
            ..pcfg
        };
        let result = complete_case(&volume, &ckpt.params, &case_cfg)?;
        let p = result.provenance;
        say(
            common,
            format!(
                "groups {g}: peak {} bytes, {} ms",
                p.peak_tracked_bytes, p.elapsed_ms
            ),
        );
        csv.push_str(&format!(
            "{g},{},{},{}\n",
            p.input_points, p.peak_tracked_bytes, p.elapsed_ms
        ));
        rows.push((g, p.peak_tracked_bytes, p.elapsed_ms));
    }
    write_atomic(&common.out.join("bench.csv"), csv.as_bytes())?;
    for (g, peak, ms) in &rows {
        println!("groups {g}: peak_tracked_bytes {peak} wall_ms {ms}");
    }

    if assert_flat {
        let peaks: Vec<f64> = rows.iter().map(|r| r.1 as f64).collect();
        let max = peaks.iter().cloned().fold(f64::MIN, f64::max);
        let min = peaks.iter().cloned().fold(f64::MAX, f64::min);
        let spread = (max - min) / min;
        if spread >= 0.10 {
            eprintln!("assertion failed: peak tracked bytes spread {spread:.3} >= 0.10");
            return Ok(ExitCode::from(5));
        }
        if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
            if first.0 == 1 && last.0 == 10 {
                let ratio = last.2 as f64 / (first.2 as f64).max(1.0);
                if !(6.0..=14.0).contains(&ratio) {
                    eprintln!("assertion failed: wall-time ratio {ratio:.2} outside [6, 14]");
                    return Ok(ExitCode::from(5));
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
