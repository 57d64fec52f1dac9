use defrec_core::cloud::{cloud_from_volume, normalize, split_groups, PointCloud};
use defrec_core::data::{make_phantom, PhantomSpec, ShellKind};
use defrec_core::model::{forward_pass, ModelConfig, ModelParams};
use defrec_core::objective::{objective, ObjectiveConfig, ObjectiveKind};

fn main() {
    let spec = PhantomSpec {
        kind: ShellKind::SphereShell,
        grid: 64,
        thickness: 3.0,
        defect_fraction: 0.08,
        seed: 1000,
    };
    let p = make_phantom(&spec).unwrap();
    let defective = normalize(&cloud_from_volume(&p.defective).unwrap()).unwrap();
    let t = defective.transform().unwrap();
    let defect: Vec<[f64; 3]> = cloud_from_volume(&p.defect)
        .unwrap()
        .points()
        .iter()
        .map(|q| t.normalize(*q))
        .collect();

    let cfg = ModelConfig::default();
    let params = ModelParams::init(cfg, 7).unwrap();
    let split = split_groups(&defective, cfg.group_in, 3).unwrap();
    let group = split.group_cloud(&defective, 0).unwrap();
    let target: Vec<[f64; 3]> = defect.iter().take(cfg.group_out).cloned().collect();

    let pass = forward_pass(group.points(), &params, 5).unwrap();
    let out = pass.output_points();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &out {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    println!("output bbox lo {lo:?} hi {hi:?}");
    println!("first 4 outputs: {:?}", &out[..4]);
    println!("coarse centers: {:?}", pass.tape.value(pass.coarse_centers).to_points());

    for (kind, temp) in [(ObjectiveKind::Cd, 1.0), (ObjectiveKind::Dacd, 1.0), (ObjectiveKind::Dacd, 40.0), (ObjectiveKind::DacdKnn, 40.0)] {
        let ocfg = ObjectiveConfig { kind, dacd_temperature: temp, ..Default::default() };
        let loss = objective(&out, &target, &ocfg).unwrap();
        let gnorm: f64 = loss.grad().iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
        let grads = pass.parameter_gradients(loss.grad());
        let pnorm: f64 = grads.values().flat_map(|t| t.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
        println!("{:?} t={temp}: loss {:.4}, dL/dout norm {:.3e}, dL/dparams norm {:.3e}", kind, loss.value, gnorm, pnorm);
    }
}
