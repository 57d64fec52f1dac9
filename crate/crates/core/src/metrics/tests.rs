use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn volume_from_fill(n: usize, spacing: f64, fill: impl Fn(usize, usize, usize) -> bool) -> VoxelVolume {
    let mut v = VoxelVolume::empty([n, n, n], [spacing; 3], [0.0; 3]);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                if fill(i, j, k) {
                    v.set(i, j, k, 1);
                }
            }
        }
    }
    v
}

fn random_volume(rng: &mut ChaCha8Rng, n: usize, fill: f64) -> VoxelVolume {
    let data = (0..n * n * n).map(|_| u8::from(rng.gen_bool(fill))).collect();
    VoxelVolume::new([n, n, n], [1.0; 3], [0.0; 3], data).unwrap()
}

// independent brute-force oracles -------------------------------------------------

fn oracle_surface(v: &VoxelVolume) -> Vec<[f64; 3]> {
    // 6-neighbor definition: foreground with any background 6-neighbor or at
    // the grid border
    let [nx, ny, nz] = v.shape();
    let mut out = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if v.get(i, j, k) == 0 {
                    continue;
                }
                let mut is_surface = false;
                for (dx, dy, dz) in [(1i64, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)] {
                    let (x, y, z) = (i as i64 + dx, j as i64 + dy, k as i64 + dz);
                    if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
                        is_surface = true;
                        break;
                    }
                    if v.get(x as usize, y as usize, z as usize) == 0 {
                        is_surface = true;
                        break;
                    }
                }
                if is_surface {
                    out.push(v.world_center(i, j, k));
                }
            }
        }
    }
    out
}

fn oracle_directed(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| {
                    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn oracle_hd95(pred: &VoxelVolume, gt: &VoxelVolume) -> f64 {
    let sp = oracle_surface(pred);
    let sg = oracle_surface(gt);
    let mut pooled = oracle_directed(&sp, &sg);
    pooled.extend(oracle_directed(&sg, &sp));
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = 0.95 * (pooled.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let w = rank - lo as f64;
    pooled[lo] * (1.0 - w) + pooled[hi] * w
}

fn oracle_cd(pred: &VoxelVolume, gt: &VoxelVolume) -> f64 {
    let sp = oracle_surface(pred);
    let sg = oracle_surface(gt);
    let f = oracle_directed(&sp, &sg);
    let b = oracle_directed(&sg, &sp);
    0.5 * (f.iter().sum::<f64>() / f.len() as f64 + b.iter().sum::<f64>() / b.len() as f64)
}

/// Set-arithmetic reference: Dice over in-grid Chebyshev dilations of the
/// two boundary voxel sets.
fn oracle_bdsc(pred: &VoxelVolume, gt: &VoxelVolume, tol: usize) -> f64 {
    use std::collections::HashSet;
    let [nx, ny, nz] = pred.shape();
    let surface_set = |v: &VoxelVolume| -> HashSet<[i64; 3]> {
        oracle_surface(v)
            .iter()
            .map(|p| {
                [
                    (p[0] / v.spacing()[0]).round() as i64,
                    (p[1] / v.spacing()[1]).round() as i64,
                    (p[2] / v.spacing()[2]).round() as i64,
                ]
            })
            .collect()
    };
    let dilated = |s: &HashSet<[i64; 3]>| -> HashSet<[i64; 3]> {
        let t = tol as i64;
        let mut out = HashSet::new();
        for p in s {
            for dz in -t..=t {
                for dy in -t..=t {
                    for dx in -t..=t {
                        let q = [p[0] + dx, p[1] + dy, p[2] + dz];
                        if q[0] >= 0
                            && q[1] >= 0
                            && q[2] >= 0
                            && q[0] < nx as i64
                            && q[1] < ny as i64
                            && q[2] < nz as i64
                        {
                            out.insert(q);
                        }
                    }
                }
            }
        }
        out
    };
    let dp = dilated(&surface_set(pred));
    let dg = dilated(&surface_set(gt));
    if dp.is_empty() && dg.is_empty() {
        return 1.0;
    }
    let inter = dp.intersection(&dg).count();
    2.0 * inter as f64 / (dp.len() + dg.len()) as f64
}

// --- dice ------------------------------------------------------------------------

#[test]
fn dice_identical_disjoint_and_empty() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = random_volume(&mut rng, 12, 0.3);
    assert_eq!(dice(&v, &v).unwrap(), 1.0);
    let empty = v.empty_like();
    assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
    let mut other = v.empty_like();
    other.set(0, 0, 0, 1);
    let mut lone = v.empty_like();
    lone.set(11, 11, 11, 1);
    assert_eq!(dice(&other, &lone).unwrap(), 0.0);
}

#[test]
fn dice_half_overlap_hand_count() {
    // |P| = |G| = 4, |P∩G| = 2 → 0.5
    let mut p = VoxelVolume::empty([8, 8, 8], [1.0; 3], [0.0; 3]);
    let mut g = p.empty_like();
    for i in 0..4 {
        p.set(i, 0, 0, 1);
        g.set(i + 2, 0, 0, 1);
    }
    assert_eq!(dice(&p, &g).unwrap(), 0.5);
}

#[test]
fn dice_symmetry_and_grid_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_volume(&mut rng, 10, 0.4);
    let b = random_volume(&mut rng, 10, 0.4);
    assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
    let c = VoxelVolume::empty([10, 10, 10], [2.0; 3], [0.0; 3]);
    assert!(matches!(dice(&a, &c), Err(Error::GridMismatch)));
}

// --- boundary dice ------------------------------------------------------------------

#[test]
fn bdsc_identical_is_one_and_disjoint_far_is_zero() {
    let cube = volume_from_fill(16, 1.0, |i, j, k| (4..12).contains(&i) && (4..12).contains(&j) && (4..12).contains(&k));
    assert_eq!(boundary_dice(&cube, &cube, 1).unwrap(), 1.0);

    let a = volume_from_fill(16, 1.0, |i, j, k| i < 2 && j < 2 && k < 2);
    let b = volume_from_fill(16, 1.0, |i, j, k| i > 12 && j > 12 && k > 12);
    assert_eq!(boundary_dice(&a, &b, 1).unwrap(), 0.0);
}

#[test]
fn bdsc_shifted_cube_matches_set_oracle() {
    let cube = volume_from_fill(16, 1.0, |i, j, k| (4..10).contains(&i) && (4..10).contains(&j) && (4..10).contains(&k));
    let shifted = volume_from_fill(16, 1.0, |i, j, k| (5..11).contains(&i) && (4..10).contains(&j) && (4..10).contains(&k));
    let got = boundary_dice(&cube, &shifted, 1).unwrap();
    let want = oracle_bdsc(&cube, &shifted, 1);
    assert!((got - want).abs() < 1e-12);
    assert!(got > 0.0 && got < 1.0);
}

#[test]
fn bdsc_random_volumes_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..3 {
        let a = random_volume(&mut rng, 14, 0.25);
        let b = random_volume(&mut rng, 14, 0.25);
        let got = boundary_dice(&a, &b, 1).unwrap();
        let want = oracle_bdsc(&a, &b, 1);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

// --- hd95 / chamfer -----------------------------------------------------------------

#[test]
fn hd95_identical_is_zero_and_two_voxels_give_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = random_volume(&mut rng, 10, 0.3);
    assert_eq!(hausdorff95(&v, &v).unwrap(), 0.0);

    let mut a = VoxelVolume::empty([16, 16, 16], [1.0; 3], [0.0; 3]);
    a.set(2, 2, 2, 1);
    let mut b = a.empty_like();
    b.set(7, 2, 2, 1);
    assert_eq!(hausdorff95(&a, &b).unwrap(), 5.0);
    assert_eq!(chamfer_mm(&a, &b).unwrap(), 5.0);
}

#[test]
fn chamfer_two_voxels_two_mm_apart() {
    let mut a = VoxelVolume::empty([8, 8, 8], [2.0; 3], [0.0; 3]);
    a.set(1, 1, 1, 1);
    let mut b = a.empty_like();
    b.set(2, 1, 1, 1);
    assert_eq!(chamfer_mm(&a, &b).unwrap(), 2.0);
}

#[test]
fn distance_metrics_match_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for round in 0..4 {
        let a = random_volume(&mut rng, 16, 0.2);
        let b = random_volume(&mut rng, 16, 0.2);
        if a.is_empty_foreground() || b.is_empty_foreground() {
            continue;
        }
        let hd = hausdorff95(&a, &b).unwrap();
        let cd = chamfer_mm(&a, &b).unwrap();
        assert!((hd - oracle_hd95(&a, &b)).abs() < 1e-9, "round {round}");
        assert!((cd - oracle_cd(&a, &b)).abs() < 1e-9, "round {round}");
    }
}

#[test]
fn spacing_awareness_doubles_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_volume(&mut rng, 12, 0.3);
    let b = random_volume(&mut rng, 12, 0.3);
    let a2 = VoxelVolume::new(a.shape(), [2.0; 3], a.origin(), a.data().to_vec()).unwrap();
    let b2 = VoxelVolume::new(b.shape(), [2.0; 3], b.origin(), b.data().to_vec()).unwrap();
    let hd1 = hausdorff95(&a, &b).unwrap();
    let hd2 = hausdorff95(&a2, &b2).unwrap();
    assert!((hd2 - 2.0 * hd1).abs() < 1e-12);
    let cd1 = chamfer_mm(&a, &b).unwrap();
    let cd2 = chamfer_mm(&a2, &b2).unwrap();
    assert!((cd2 - 2.0 * cd1).abs() < 1e-12);
}

#[test]
fn monotone_degradation_on_cube() {
    let cube = volume_from_fill(20, 1.0, |i, j, k| (4..16).contains(&i) && (4..16).contains(&j) && (4..16).contains(&k));
    let eroded = crate::voxel::erode(&cube, &StructuringElement::cross6(1), false);
    let d = dice(&eroded, &cube).unwrap();
    assert!(d < 1.0);
    let hd = hausdorff95(&eroded, &cube).unwrap();
    assert!(hd > 0.0);
}

// --- evaluate/aggregate -----------------------------------------------------------------

#[test]
fn perfect_prediction_scores_perfectly() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let v = random_volume(&mut rng, 12, 0.3);
    let r = evaluate_volumes("case", &v, &v).unwrap();
    assert_eq!(r.dsc, 1.0);
    assert_eq!(r.bdsc, 1.0);
    assert_eq!(r.hd95_mm, Some(0.0));
    assert_eq!(r.cd_mm, Some(0.0));
}

#[test]
fn empty_prediction_reports_missing_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gt = random_volume(&mut rng, 10, 0.3);
    let empty = gt.empty_like();
    let r = evaluate_volumes("e", &empty, &gt).unwrap();
    assert_eq!(r.dsc, 0.0);
    assert_eq!(r.hd95_mm, None);
    assert_eq!(r.cd_mm, None);
}

#[test]
fn table_fixture_renders_in_column_order() {
    let fixture = MetricsReport {
        case_id: "skullbreak-mean".into(),
        dsc: 0.87,
        bdsc: 0.85,
        hd95_mm: Some(1.91),
        cd_mm: Some(0.31),
        grid_shape: [512, 512, 512],
        spacing_mm: [1.0; 3],
    };
    let csv = reports_to_csv(std::slice::from_ref(&fixture));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("id,dsc,bdsc,hd95_mm,cd_mm"));
    let row = lines.next().unwrap();
    assert!(row.starts_with("skullbreak-mean,0.870000,0.850000,1.910000,0.310000"));
}

#[test]
fn aggregate_means_ignore_missing() {
    let mk = |dsc: f64, hd: Option<f64>| MetricsReport {
        case_id: "c".into(),
        dsc,
        bdsc: dsc,
        hd95_mm: hd,
        cd_mm: hd,
        grid_shape: [4, 4, 4],
        spacing_mm: [1.0; 3],
    };
    let mean = aggregate(&[mk(1.0, Some(2.0)), mk(0.0, None)]).unwrap();
    assert_eq!(mean.dsc, 0.5);
    assert_eq!(mean.hd95_mm, Some(2.0));
}
