use defrec_core::cloud::{cloud_from_volume, normalize};
use defrec_core::data::{make_phantom, PhantomSpec, ShellKind};

fn main() {
    for i in 0..8u64 {
        let spec = PhantomSpec {
            kind: ShellKind::SphereShell,
            grid: 64,
            thickness: 3.0,
            defect_fraction: 0.08,
            seed: 1000 + i,
        };
        let p = make_phantom(&spec).unwrap();
        let defective = normalize(&cloud_from_volume(&p.defective).unwrap()).unwrap();
        let t = defective.transform().unwrap();
        let defect_world = cloud_from_volume(&p.defect).unwrap();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for q in defect_world.points() {
            let n = t.normalize(*q);
            for a in 0..3 {
                lo[a] = lo[a].min(n[a]);
                hi[a] = hi[a].max(n[a]);
            }
        }
        println!("phantom {i}: defect normalized lo {lo:?} hi {hi:?}");
    }
}
