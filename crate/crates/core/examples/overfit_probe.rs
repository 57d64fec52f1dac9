// Scratch probe for the desk-scale overfit run: loss trajectory and step cost.
use std::time::Instant;

use defrec_core::cloud::{cloud_from_volume, normalize, PointCloud};
use defrec_core::data::{make_phantom, PhantomSpec, ShellKind};
use defrec_core::model::{train, ModelConfig, TrainConfig, TrainSample};
use defrec_core::objective::ObjectiveConfig;
use defrec_core::cloud::AugmentConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let temp: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);
    let kind_s: String = args.get(5).cloned().unwrap_or_else(|| "dacd_knn".into());
    let cd_warmup: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0);

    let mut dataset = Vec::new();
    for i in 0..8u64 {
        let spec = PhantomSpec {
            kind: ShellKind::SphereShell,
            grid: 64,
            thickness: 3.0,
            defect_fraction: 0.08,
            seed: 1000 + i,
        };
        let p = make_phantom(&spec).unwrap();
        let defective_world = cloud_from_volume(&p.defective).unwrap();
        let defective = normalize(&defective_world).unwrap();
        let t = defective.transform().unwrap();
        let defect_world = cloud_from_volume(&p.defect).unwrap();
        let defect_pts: Vec<[f64; 3]> = defect_world.points().iter().map(|q| t.normalize(*q)).collect();
        let defect = PointCloud::normalized(defect_pts, t).unwrap();
        println!(
            "phantom {i}: defective {} pts, defect {} pts",
            defective.len(),
            defect.len()
        );
        dataset.push(TrainSample::new(defective, defect).unwrap());
    }

    let cfg = ModelConfig::default();
    let tcfg = TrainConfig {
        steps,
        lr,
        lr_min: lr * 0.01,
        warmup: 20,
        clip_norm: 1.0,
        cd_warmup,
        seed: 7,
        batch_groups: batch,
        objective: ObjectiveConfig {
            kind: defrec_core::objective::ObjectiveKind::parse(&kind_s).unwrap(),
            dacd_temperature: temp,
            ..Default::default()
        },
        augment: AugmentConfig::none(),
    };
    let t0 = Instant::now();
    let outcome = train(&dataset, cfg, &tcfg, None).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let h = &outcome.loss_history;
    let window = 10.min(h.len());
    let first: f64 = h[..window].iter().sum::<f64>() / window as f64;
    let last: f64 = h[h.len() - window..].iter().sum::<f64>() / window as f64;
    println!(
        "steps {} in {:.1}s ({:.2} s/step), loss first10 {:.4} last10 {:.4} ratio {:.3}",
        h.len(),
        dt,
        dt / h.len() as f64,
        first,
        last,
        last / first
    );
    for (i, l) in h.iter().enumerate() {
        if i % 25 == 0 {
            println!("  step {i:4}  loss {l:.4}");
        }
    }
}
