use defrec_core::cloud::{cloud_from_volume, normalize, split_groups, PointCloud};
use defrec_core::data::{make_phantom, PhantomSpec, ShellKind};
use defrec_core::model::{forward_pass, train, ModelConfig, ModelParams, TrainConfig, TrainSample};
use defrec_core::objective::{dacd, uniformity_term, ObjectiveConfig};
use defrec_core::cloud::AugmentConfig;

fn main() {
    let spec = PhantomSpec {
        kind: ShellKind::SphereShell, grid: 64, thickness: 3.0, defect_fraction: 0.08, seed: 1000,
    };
    let p = make_phantom(&spec).unwrap();
    let defective = normalize(&cloud_from_volume(&p.defective).unwrap()).unwrap();
    let t = defective.transform().unwrap();
    let defect_pts: Vec<[f64; 3]> = cloud_from_volume(&p.defect).unwrap().points().iter().map(|q| t.normalize(*q)).collect();
    let defect = PointCloud::normalized(defect_pts.clone(), t).unwrap();
    let dataset = vec![TrainSample::new(defective.clone(), defect).unwrap()];

    let cfg = ModelConfig::default();
    let ocfg = ObjectiveConfig { dacd_temperature: 40.0, ..Default::default() };
    let tcfg = TrainConfig { steps: 30, lr: 1e-3, lr_min: 1e-5, warmup: 5, seed: 7, objective: ocfg, augment: AugmentConfig::none(), ..Default::default() };

    // manual inspection: loss decomposition before/after training
    let eval = |params: &ModelParams, label: &str| {
        let split = split_groups(&defective, cfg.group_in, 3).unwrap();
        let group = split.group_cloud(&defective, 0).unwrap();
        let pass = forward_pass(group.points(), params, 5).unwrap();
        let out = pass.output_points();
        let target: Vec<[f64; 3]> = defect_pts.iter().take(cfg.group_out).cloned().collect();
        let d = dacd(&out, &target, &ocfg).unwrap().value;
        let u = uniformity_term(&out, 4).unwrap().value;
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &out { for a in 0..3 { lo[a] = lo[a].min(p[a]); hi[a] = hi[a].max(p[a]); } }
        println!("{label}: dacd {d:.4} uniformity {u:.4} bbox lo [{:.2} {:.2} {:.2}] hi [{:.2} {:.2} {:.2}]",
                 lo[0], lo[1], lo[2], hi[0], hi[1], hi[2]);
    };

    let init = ModelParams::init(cfg, 7).unwrap();
    eval(&init, "before");
    let outcome = train(&dataset, cfg, &tcfg, None).unwrap();
    println!("losses: {:?}", outcome.loss_history.iter().map(|l| (l * 1e4).round() / 1e4).collect::<Vec<_>>());
    eval(&outcome.state.params, "after 30 steps");
}
