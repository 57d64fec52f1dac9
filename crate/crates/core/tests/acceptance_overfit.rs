//! The long acceptance criteria: the desk-scale overfit run (criterion 5)
//! and the refinement trend measured with its checkpoint (criterion 6).
//! Run with `--nocapture` for the PASS lines.

use defrec_core::cloud::{cloud_from_volume, normalize, AugmentConfig, PointCloud};
use defrec_core::data::{make_phantom, Phantom, PhantomSpec, ShellKind};
use defrec_core::metrics::{chamfer_mm, dice};
use defrec_core::model::{train, ModelConfig, TrainConfig, TrainSample};
use defrec_core::objective::{ObjectiveConfig, ObjectiveKind};
use defrec_core::pipeline::{complete_case, PipelineConfig};

const TRAIN_STEPS: usize = 1600; // criterion budget is <= 2000
const CD_WARMUP: usize = 600;
const BATCH_GROUPS: usize = 4;
const LEARNING_RATE: f64 = 1e-3;
const DACD_TEMPERATURE: f64 = 40.0;

fn phantom_set() -> Vec<Phantom> {
    (0..8u64)
        .map(|i| {
            make_phantom(&PhantomSpec {
                kind: ShellKind::SphereShell,
                grid: 64,
                thickness: 3.0,
                defect_fraction: 0.08,
                seed: 1000 + i,
            })
            .unwrap()
        })
        .collect()
}

fn to_sample(p: &Phantom) -> TrainSample {
    let defective = normalize(&cloud_from_volume(&p.defective).unwrap()).unwrap();
    let t = defective.transform().unwrap();
    let pts: Vec<[f64; 3]> = cloud_from_volume(&p.defect)
        .unwrap()
        .points()
        .iter()
        .map(|q| t.normalize(*q))
        .collect();
    TrainSample::new(defective, PointCloud::normalized(pts, t).unwrap()).unwrap()
}

#[test]
fn criterion_5_overfit_and_criterion_6_refinement_trend() {
    let wall = std::time::Instant::now();
    let phantoms = phantom_set();
    let dataset: Vec<TrainSample> = phantoms.iter().map(to_sample).collect();

    let mcfg = ModelConfig::default();
    let tcfg = TrainConfig {
        steps: TRAIN_STEPS,
        lr: LEARNING_RATE,
        lr_min: LEARNING_RATE * 0.01,
        warmup: 20,
        batch_groups: BATCH_GROUPS,
        clip_norm: 1.0,
        cd_warmup: CD_WARMUP,
        seed: 7,
        objective: ObjectiveConfig {
            kind: ObjectiveKind::DacdKnn,
            dacd_temperature: DACD_TEMPERATURE,
            ..Default::default()
        },
        augment: AugmentConfig::none(),
    };
    let outcome = train(&dataset, mcfg, &tcfg, None).unwrap();
    assert!(outcome.diverged_at.is_none(), "training diverged");
    let h = &outcome.loss_history;
    assert!(h.len() <= 2000, "step budget exceeded");
    let initial: f64 = h[..10].iter().sum::<f64>() / 10.0;
    let fin: f64 = h[h.len() - 10..].iter().sum::<f64>() / 10.0;
    let ratio = fin / initial;
    assert!(
        ratio < 0.30,
        "final objective {fin:.4} is {:.1}% of initial {initial:.4}, needs < 30%",
        ratio * 100.0
    );

    // complete the training phantoms at M = 1 and M = 3 with the checkpoint
    let params = &outcome.state.params;
    let mut mean_dsc = [0.0f64; 2];
    let mut mean_cd = [0.0f64; 2];
    for (slot, m) in [1usize, 3].into_iter().enumerate() {
        let mut dscs = Vec::new();
        let mut cds = Vec::new();
        for (i, p) in phantoms.iter().enumerate() {
            let pcfg = PipelineConfig {
                refinements: m,
                group_in: mcfg.group_in,
                group_out: mcfg.group_out,
                master_seed: 100 + i as u64,
                ..Default::default()
            };
            let r = complete_case(&p.defective, params, &pcfg).unwrap();
            dscs.push(dice(&r.defect_volume, &p.defect).unwrap());
            if !r.defect_volume.is_empty_foreground() {
                cds.push(chamfer_mm(&r.defect_volume, &p.defect).unwrap());
            }
        }
        assert_eq!(cds.len(), phantoms.len(), "an M={m} reconstruction came out empty");
        mean_dsc[slot] = dscs.iter().sum::<f64>() / dscs.len() as f64;
        mean_cd[slot] = cds.iter().sum::<f64>() / cds.len() as f64;
    }

    let elapsed_min = wall.elapsed().as_secs_f64() / 60.0;
    assert!(
        mean_dsc[1] >= 0.5,
        "mean DSC at M=3 is {:.3}, needs >= 0.5",
        mean_dsc[1]
    );
    assert!(
        elapsed_min <= 30.0,
        "overfit criterion took {elapsed_min:.1} min, budget 30"
    );
    println!(
        "criterion 5 PASS: objective {initial:.4} -> {fin:.4} ({:.1}% of initial, < 30%), mean DSC {:.3} (>= 0.5) in {elapsed_min:.1} min / {} steps",
        ratio * 100.0,
        mean_dsc[1],
        h.len()
    );

    assert!(
        mean_cd[1] <= mean_cd[0],
        "mean CD rose from M=1 {:.4} to M=3 {:.4}",
        mean_cd[0],
        mean_cd[1]
    );
    println!(
        "criterion 6 PASS: mean CD M=1 {:.4} mm -> M=3 {:.4} mm (non-increasing)",
        mean_cd[0], mean_cd[1]
    );
}
