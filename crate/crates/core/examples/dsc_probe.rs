// End-to-end probe: train on 8 phantoms, complete them, report DSC and the
// M=1 vs M=3 chamfer trend.
use defrec_core::cloud::{cloud_from_volume, normalize, AugmentConfig, PointCloud};
use defrec_core::data::{make_phantom, PhantomSpec, ShellKind};
use defrec_core::metrics::{chamfer_mm, dice};
use defrec_core::model::{train, ModelConfig, TrainConfig, TrainSample};
use defrec_core::objective::{ObjectiveConfig, ObjectiveKind};
use defrec_core::pipeline::{complete_case, PipelineConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let temp: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4.0);
    let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(4);
    let kind_s: String = args.get(5).cloned().unwrap_or_else(|| "dacd_knn".into());
    let cd_warmup: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0);

    let specs: Vec<PhantomSpec> = (0..8u64)
        .map(|i| PhantomSpec {
            kind: ShellKind::SphereShell,
            grid: 64,
            thickness: 3.0,
            defect_fraction: 0.08,
            seed: 1000 + i,
        })
        .collect();
    let phantoms: Vec<_> = specs.iter().map(|s| make_phantom(s).unwrap()).collect();
    let dataset: Vec<TrainSample> = phantoms
        .iter()
        .map(|p| {
            let defective = normalize(&cloud_from_volume(&p.defective).unwrap()).unwrap();
            let t = defective.transform().unwrap();
            let pts: Vec<[f64; 3]> = cloud_from_volume(&p.defect)
                .unwrap()
                .points()
                .iter()
                .map(|q| t.normalize(*q))
                .collect();
            TrainSample::new(defective, PointCloud::normalized(pts, t).unwrap()).unwrap()
        })
        .collect();

    let cfg = ModelConfig::default();
    let tcfg = TrainConfig {
        steps,
        lr,
        lr_min: lr * 0.01,
        warmup: 20,
        batch_groups: batch,
        clip_norm: 1.0,
        cd_warmup,
        seed: 7,
        objective: ObjectiveConfig {
            kind: ObjectiveKind::parse(&kind_s).unwrap(),
            dacd_temperature: temp,
            ..Default::default()
        },
        augment: AugmentConfig::none(),
    };
    let t0 = std::time::Instant::now();
    let outcome = train(&dataset, cfg, &tcfg, None).unwrap();
    let h = &outcome.loss_history;
    let w = 10.min(h.len());
    let first: f64 = h[..w].iter().sum::<f64>() / w as f64;
    let last: f64 = h[h.len() - w..].iter().sum::<f64>() / w as f64;
    println!(
        "train {} steps in {:.0}s: first10 {first:.4} last10 {last:.4} ratio {:.3}",
        h.len(),
        t0.elapsed().as_secs_f64(),
        last / first
    );

    for m in [1usize, 3] {
        let mut dscs = Vec::new();
        let mut cds = Vec::new();
        for (i, p) in phantoms.iter().enumerate() {
            let pcfg = PipelineConfig {
                refinements: m,
                group_in: cfg.group_in,
                group_out: cfg.group_out,
                master_seed: 100 + i as u64,
                ..Default::default()
            };
            let r = complete_case(&p.defective, &outcome.state.params, &pcfg).unwrap();
            dscs.push(dice(&r.defect_volume, &p.defect).unwrap());
            if !r.defect_volume.is_empty_foreground() {
                cds.push(chamfer_mm(&r.defect_volume, &p.defect).unwrap());
            }
        }
        let mean_dsc = dscs.iter().sum::<f64>() / dscs.len() as f64;
        let mean_cd = cds.iter().sum::<f64>() / cds.len().max(1) as f64;
        println!(
            "M={m}: mean DSC {mean_dsc:.4} (per-case {:?}), mean CD {mean_cd:.3} over {} nonempty",
            dscs.iter().map(|d| (d * 100.0).round() / 100.0).collect::<Vec<_>>(),
            cds.len()
        );
    }
}
