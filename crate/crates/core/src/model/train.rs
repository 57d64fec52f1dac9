//! Supervised trainer: each step draws one case, augments the pair with a
//! shared rigid motion, splits the defective cloud, completes one group, and
//! minimizes the configured objective against the downsampled defect target
//! with Adam under a warmup + cosine schedule.
//!
//! Per-step randomness is derived statelessly from `(seed, step)`, so a run
//! resumed from a checkpoint replays exactly the steps it would have taken.

use std::collections::BTreeMap;

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{
    apply_rigid, augment_with, centroid, split_groups, AugmentConfig, AugmentSample, Frame,
    PointCloud,
};
use crate::error::{Error, Result};
use crate::objective::{objective, ObjectiveConfig, ObjectiveKind};
use crate::tensor::Tensor;

use super::{forward_pass, ModelConfig, ModelParams};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Peak step size after warmup.
    pub lr: f64,
    /// Cosine floor.
    pub lr_min: f64,
    pub warmup: usize,
    /// Groups of one case whose gradients are averaged per step.
    pub batch_groups: usize,
    /// Global-norm gradient clip; 0 disables.
    pub clip_norm: f64,
    /// Initial steps whose parameter gradient comes from plain Chamfer
    /// distance. The density-aware objective conditions poorly from a cold
    /// start (its exponential term has no long-range pull), so a short
    /// Chamfer phase organizes the output geometry first. The loss history
    /// records the configured objective for every step either way.
    pub cd_warmup: usize,
    pub seed: u64,
    pub objective: ObjectiveConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            lr: 1e-3,
            lr_min: 1e-5,
            warmup: 50,
            batch_groups: 1,
            clip_norm: 1.0,
            cd_warmup: 0,
            seed: 0,
            objective: ObjectiveConfig::default(),
            augment: AugmentConfig::none(),
        }
    }
}

/// One training case: the defective cloud and its ground-truth defect, both
/// normalized with the defective cloud's transform.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub defective: PointCloud,
    pub defect: PointCloud,
}

impl TrainSample {
    pub fn new(defective: PointCloud, defect: PointCloud) -> Result<Self> {
        defective.expect_frame(Frame::Normalized)?;
        defect.expect_frame(Frame::Normalized)?;
        if defective.transform() != defect.transform() {
            return Err(Error::TransformMismatch);
        }
        Ok(TrainSample { defective, defect })
    }
}

/// Parameters plus optimizer state; the unit of checkpointing.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub opt_m: BTreeMap<String, Tensor>,
    pub opt_v: BTreeMap<String, Tensor>,
    pub step: usize,
}

impl TrainState {
    pub fn fresh(params: ModelParams) -> Self {
        let zeros = |p: &ModelParams| -> BTreeMap<String, Tensor> {
            p.tensors()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.rows(), t.cols())))
                .collect()
        };
        TrainState {
            opt_m: zeros(&params),
            opt_v: zeros(&params),
            params,
            step: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final state, or the last good state when training diverged.
    pub state: TrainState,
    /// One objective value per executed step.
    pub loss_history: Vec<f64>,
    pub diverged_at: Option<usize>,
}

fn mix_seed(seed: u64, step: usize) -> u64 {
    // splitmix64 over the pair
    let mut z = seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn learning_rate(tcfg: &TrainConfig, step: usize) -> f64 {
    if tcfg.steps == 0 {
        return tcfg.lr;
    }
    if step < tcfg.warmup {
        return tcfg.lr * (step + 1) as f64 / tcfg.warmup as f64;
    }
    let span = (tcfg.steps.saturating_sub(tcfg.warmup)).max(1) as f64;
    let progress = ((step - tcfg.warmup) as f64 / span).min(1.0);
    tcfg.lr_min + 0.5 * (tcfg.lr - tcfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Uniform downsample of the defect target to `budget` points: without
/// replacement when the cloud is large enough, with replacement otherwise.
/// Seeded per case and drawn once, so every group of a case trains against
/// one fixed target set; redrawing per step would leave the density-aware
/// objective floored by random nearest-neighbor collision counts.
fn downsample_target(defect: &[[f64; 3]], budget: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if defect.len() >= budget {
        index_sample(&mut rng, defect.len(), budget)
            .into_iter()
            .map(|i| defect[i])
            .collect()
    } else {
        (0..budget)
            .map(|_| defect[rng.gen_range(0..defect.len())])
            .collect()
    }
}

/// Runs `tcfg.steps` optimization steps (continuing from `resume` when
/// given). A non-finite loss or gradient stops the run and returns the last
/// good state with `diverged_at` set.
pub fn train(
    dataset: &[TrainSample],
    config: ModelConfig,
    tcfg: &TrainConfig,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    config.validate()?;
    tcfg.objective.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }

    let mut state = match resume {
        Some(s) => {
            if s.params.config != config {
                return Err(Error::BudgetMismatch {
                    pipeline_in: config.group_in,
                    pipeline_out: config.group_out,
                    model_in: s.params.config.group_in,
                    model_out: s.params.config.group_out,
                });
            }
            s
        }
        None => TrainState::fresh(ModelParams::init(config, tcfg.seed)?),
    };

    // fixed per-case targets
    let targets: Vec<Vec<[f64; 3]>> = dataset
        .iter()
        .enumerate()
        .map(|(i, s)| {
            downsample_target(
                s.defect.points(),
                config.group_out,
                mix_seed(tcfg.seed.wrapping_add(0xDEF0), i),
            )
        })
        .collect();

    let mut history = Vec::with_capacity(tcfg.steps);
    let end = state.step + tcfg.steps;
    while state.step < end {
        let step = state.step;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(tcfg.seed, step));

        let case = rng.gen_range(0..dataset.len());
        let sample = &dataset[case];
        let aug = AugmentSample::draw(&tcfg.augment, &mut rng);
        let pivot = centroid(sample.defective.points());
        let defective = augment_with(&sample.defective, &aug, &mut rng, Some(pivot))?;
        let mut target = targets[case].clone();
        apply_rigid(&mut target, &aug, pivot);

        let split = split_groups(&defective, config.group_in, rng.gen())?;
        let batch = tcfg.batch_groups.max(1).min(split.group_count());

        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut batch_loss = 0.0;
        let mut diverged = false;
        for _ in 0..batch {
            let g = rng.gen_range(0..split.group_count());
            let group = split.group_cloud(&defective, g)?;
            let fps_seed: u64 = rng.gen();
            let pass = match forward_pass(group.points(), &state.params, fps_seed) {
                Ok(p) => p,
                Err(Error::NonFinite) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            let out_points = pass.output_points();
            let loss = objective(&out_points, &target, &tcfg.objective)?;
            if !loss.value.is_finite() {
                diverged = true;
                break;
            }
            batch_loss += loss.value;
            let grad_loss = if step < tcfg.cd_warmup && tcfg.objective.kind != ObjectiveKind::Cd {
                let cd_cfg = ObjectiveConfig {
                    kind: ObjectiveKind::Cd,
                    ..tcfg.objective
                };
                objective(&out_points, &target, &cd_cfg)?
            } else {
                loss
            };
            if !grad_loss.value.is_finite() {
                diverged = true;
                break;
            }
            for (name, g) in pass.parameter_gradients(grad_loss.grad()) {
                match grads.get_mut(&name) {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += v;
                        }
                    }
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
        if diverged || grads.values().any(|g| !g.is_finite()) {
            return Ok(TrainOutcome {
                state,
                loss_history: history,
                diverged_at: Some(step),
            });
        }
        if batch > 1 {
            let inv = 1.0 / batch as f64;
            for g in grads.values_mut() {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
        }
        if tcfg.clip_norm > 0.0 {
            let norm: f64 = grads
                .values()
                .flat_map(|g| g.data().iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > tcfg.clip_norm {
                let scale = tcfg.clip_norm / norm;
                for g in grads.values_mut() {
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                }
            }
        }
        history.push(batch_loss / batch as f64);

        let lr = learning_rate(tcfg, step);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, grad) in &grads {
            let m = state.opt_m.get_mut(name).expect("moment tensor");
            let v = state.opt_v.get_mut(name).expect("moment tensor");
            let p = state.params.get_mut(name);
            for ((pv, mv), (vv, gv)) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut().iter_mut().zip(grad.data()))
            {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        state.step += 1;
    }

    Ok(TrainOutcome {
        state,
        loss_history: history,
        diverged_at: None,
    })
}
