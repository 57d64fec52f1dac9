use std::collections::HashSet;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::cloud::{cloud_from_volume, normalize, PointCloud};

fn random_volume(rng: &mut ChaCha8Rng, n: usize, fill: f64) -> VoxelVolume {
    let data = (0..n * n * n)
        .map(|_| u8::from(rng.gen_bool(fill)))
        .collect();
    VoxelVolume::new([n, n, n], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0], data).unwrap()
}

fn sphere_volume(n: usize, r: f64, spacing: f64) -> VoxelVolume {
    let c = (n as f64 - 1.0) / 2.0;
    let mut v = VoxelVolume::empty([n, n, n], [spacing; 3], [0.0; 3]);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2);
                if d2 <= r * r {
                    v.set(i, j, k, 1);
                }
            }
        }
    }
    v
}

// --- construction and I/O ----------------------------------------------------

#[test]
fn constructor_enforces_invariants() {
    assert!(matches!(
        VoxelVolume::new([2, 2, 2], [1.0; 3], [0.0; 3], vec![0; 7]),
        Err(Error::ShapeDataMismatch { .. })
    ));
    assert!(VoxelVolume::new([2, 2, 2], [0.0, 1.0, 1.0], [0.0; 3], vec![0; 8]).is_err());
    assert!(VoxelVolume::new([2, 2, 2], [1.0; 3], [0.0; 3], vec![2; 8]).is_err());
}

#[test]
fn handcrafted_sidecar_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("tiny.json");
    std::fs::write(
        &json,
        r#"{"shape":[2,2,2],"spacing_mm":[1.0,1.0,1.0],"origin_mm":[0.0,0.0,0.0],"dtype":"u8","order":"x-fastest"}"#,
    )
    .unwrap();
    std::fs::write(dir.path().join("tiny.raw"), [0u8, 0, 0, 1, 0, 0, 0, 0]).unwrap();
    let v = load_volume(&json).unwrap();
    assert_eq!(v.foreground_count(), 1);
    assert_eq!(v.get(1, 1, 0), 1);
}

#[test]
fn save_load_bit_exact_with_anisotropic_spacing() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut v = random_volume(&mut rng, 9, 0.3);
    v = VoxelVolume::new(v.shape(), [0.5, 0.5, 1.0], [1.5, -2.0, 0.25], v.data().to_vec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vol.json");
    save_volume(&v, &path).unwrap();
    let back = load_volume(&path).unwrap();
    assert_eq!(back, v);
}

#[test]
fn declared_shape_payload_mismatch_is_error() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("bad.json");
    std::fs::write(
        &json,
        r#"{"shape":[2,2,2],"spacing_mm":[1.0,1.0,1.0],"origin_mm":[0.0,0.0,0.0],"dtype":"u8","order":"x-fastest"}"#,
    )
    .unwrap();
    std::fs::write(dir.path().join("bad.raw"), [1u8; 9]).unwrap();
    assert!(matches!(
        load_volume(&json),
        Err(Error::ShapeDataMismatch { .. })
    ));
}

#[test]
fn unwritable_destination_is_io_error() {
    // parent is a regular file, so nothing can be created "inside" it
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, b"x").unwrap();
    let v = VoxelVolume::empty([2, 2, 2], [1.0; 3], [0.0; 3]);
    let err = save_volume(&v, &blocker.join("x.json")).unwrap_err();
    assert!(err.is_io());
}

#[test]
fn nrrd_raw_and_gzip_uint8() {
    let dir = tempfile::tempdir().unwrap();
    let payload: Vec<u8> = vec![0, 3, 0, 0, 0, 1, 0, 0, 0, 0, 0, 9];
    let header = "NRRD0004\n# a comment\ndimension: 3\nsizes: 3 2 2\ntype: uint8\nencoding: raw\nspace directions: (0.5,0,0) (0,0.5,0) (0,0,2.0)\nspace origin: (1,2,3)\n\n";

    let raw = dir.path().join("v.nrrd");
    let mut bytes = header.as_bytes().to_vec();
    bytes.extend_from_slice(&payload);
    std::fs::write(&raw, &bytes).unwrap();
    let v = load_volume(&raw).unwrap();
    assert_eq!(v.shape(), [3, 2, 2]);
    assert_eq!(v.spacing(), [0.5, 0.5, 2.0]);
    assert_eq!(v.origin(), [1.0, 2.0, 3.0]);
    assert_eq!(v.foreground_count(), 3);

    let gz = dir.path().join("vgz.nrrd");
    let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
    enc.write_all(&payload).unwrap();
    let compressed = enc.finish().unwrap();
    let mut bytes = header.replace("encoding: raw", "encoding: gzip").into_bytes();
    bytes.extend_from_slice(&compressed);
    std::fs::write(&gz, &bytes).unwrap();
    let vg = load_volume(&gz).unwrap();
    assert_eq!(vg, v);
}

#[test]
fn nrrd_short_binarizes_positive_values() {
    let dir = tempfile::tempdir().unwrap();
    let header =
        "NRRD0004\ndimension: 3\nsizes: 2 1 1\ntype: short\nencoding: raw\nendian: little\n\n";
    let mut bytes = header.as_bytes().to_vec();
    bytes.extend_from_slice(&(-5i16).to_le_bytes());
    bytes.extend_from_slice(&300i16.to_le_bytes());
    let path = dir.path().join("s.nrrd");
    std::fs::write(&path, &bytes).unwrap();
    let v = load_volume(&path).unwrap();
    assert_eq!(v.data(), &[0, 1]);
}

#[test]
fn nrrd_unsupported_features_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("dim4.nrrd", "NRRD0004\ndimension: 4\nsizes: 2 2 2 2\ntype: uint8\nencoding: raw\n\n"),
        ("float.nrrd", "NRRD0004\ndimension: 3\nsizes: 2 2 2\ntype: float\nencoding: raw\n\n"),
        ("hex.nrrd", "NRRD0004\ndimension: 3\nsizes: 2 2 2\ntype: uint8\nencoding: hex\n\n"),
        (
            "skew.nrrd",
            "NRRD0004\ndimension: 3\nsizes: 2 2 2\ntype: uint8\nencoding: raw\nspace directions: (1,0.1,0) (0,1,0) (0,0,1)\n\n",
        ),
    ];
    for (name, header) in cases {
        let path = dir.path().join(name);
        let mut bytes = header.as_bytes().to_vec();
        bytes.extend_from_slice(&[1u8; 32]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(
            matches!(load_volume(&path), Err(Error::Unsupported { .. })),
            "{name} should be unsupported"
        );
    }
}

// --- voxelize ------------------------------------------------------------------

#[test]
fn voxelize_inverts_cloud_from_volume_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let v = random_volume(&mut rng, 12, 0.2);
        if v.is_empty_foreground() {
            continue;
        }
        let pc = cloud_from_volume(&v).unwrap();
        let (back, dropped) = voxelize(&pc, &v).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(back, v);
    }
}

#[test]
fn voxelize_single_point_hits_expected_voxel() {
    let like = VoxelVolume::empty([8, 8, 8], [2.0, 1.0, 0.5], [10.0, -4.0, 0.0]);
    let center = like.world_center(3, 4, 5);
    let pc = PointCloud::world(vec![center]).unwrap();
    let (v, dropped) = voxelize(&pc, &like).unwrap();
    assert_eq!(dropped, 0);
    assert_eq!(v.foreground_count(), 1);
    assert_eq!(v.get(3, 4, 5), 1);
}

#[test]
fn voxelize_boundary_point_goes_to_lower_voxel() {
    let like = VoxelVolume::empty([4, 4, 4], [1.0; 3], [0.0; 3]);
    // exactly between voxels 1 and 2 on x
    let pc = PointCloud::world(vec![[1.5, 0.0, 0.0]]).unwrap();
    let (v, _) = voxelize(&pc, &like).unwrap();
    assert_eq!(v.get(1, 0, 0), 1);
    assert_eq!(v.get(2, 0, 0), 0);
}

#[test]
fn voxelize_matches_quantization_oracle_and_counts_dropped() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let like = VoxelVolume::empty([16, 16, 16], [0.7, 1.1, 0.9], [-2.0, 3.0, 0.5]);
    let mut points = Vec::new();
    for _ in 0..100_000 {
        points.push([
            rng.gen_range(-3.0..10.0),
            rng.gen_range(2.0..20.0),
            rng.gen_range(0.0..15.0),
        ]);
    }
    let pc = PointCloud::world(points.clone()).unwrap();
    let (v, dropped) = voxelize(&pc, &like).unwrap();

    let mut expect: HashSet<[i64; 3]> = HashSet::new();
    let mut expect_dropped = 0usize;
    for p in &points {
        let mut idx = [0i64; 3];
        let mut inside = true;
        for a in 0..3 {
            let u = (p[a] - like.origin()[a]) / like.spacing()[a];
            let i = (u + 0.5).floor() as i64;
            if i < 0 || i >= 16 {
                inside = false;
            }
            idx[a] = i;
        }
        if inside {
            expect.insert(idx);
        } else {
            expect_dropped += 1;
        }
    }
    assert_eq!(dropped, expect_dropped);
    assert_eq!(v.foreground_count(), expect.len());
}

#[test]
fn voxelize_requires_transform_for_normalized_clouds() {
    let like = VoxelVolume::empty([4, 4, 4], [1.0; 3], [0.0; 3]);
    let pc = PointCloud::world(vec![[0.0; 3], [2.0, 1.0, 3.0]]).unwrap();
    let norm = normalize(&pc).unwrap();
    // normalized cloud carries its transform: works
    let (v, _) = voxelize(&norm, &like).unwrap();
    assert_eq!(v.foreground_count(), 2);
}

// --- morphology ----------------------------------------------------------------

fn oracle_dilate(v: &VoxelVolume, se: &StructuringElement) -> VoxelVolume {
    let mut out = v.empty_like();
    let [nx, ny, nz] = v.shape();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                'probe: for o in se.offsets() {
                    let (x, y, z) = (i as isize - o[0], j as isize - o[1], k as isize - o[2]);
                    if x >= 0
                        && y >= 0
                        && z >= 0
                        && (x as usize) < nx
                        && (y as usize) < ny
                        && (z as usize) < nz
                        && v.get(x as usize, y as usize, z as usize) != 0
                    {
                        out.set(i, j, k, 1);
                        break 'probe;
                    }
                }
            }
        }
    }
    out
}

fn oracle_erode(v: &VoxelVolume, se: &StructuringElement, border: bool) -> VoxelVolume {
    let mut out = v.empty_like();
    let [nx, ny, nz] = v.shape();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if v.get(i, j, k) == 0 {
                    continue;
                }
                let mut keep = true;
                for o in se.offsets() {
                    let (x, y, z) = (i as isize + o[0], j as isize + o[1], k as isize + o[2]);
                    let inside = if x < 0
                        || y < 0
                        || z < 0
                        || x as usize >= nx
                        || y as usize >= ny
                        || z as usize >= nz
                    {
                        border
                    } else {
                        v.get(x as usize, y as usize, z as usize) != 0
                    };
                    if !inside {
                        keep = false;
                        break;
                    }
                }
                if keep {
                    out.set(i, j, k, 1);
                }
            }
        }
    }
    out
}

#[test]
fn closing_fills_one_voxel_gap() {
    let mut v = VoxelVolume::empty([7, 7, 7], [1.0; 3], [0.0; 3]);
    v.set(2, 3, 3, 1);
    v.set(4, 3, 3, 1);
    let closed = binary_closing(&v, &StructuringElement::cube26(1));
    assert_eq!(closed.get(3, 3, 3), 1);
}

#[test]
fn closing_leaves_solid_cube_unchanged() {
    let mut v = VoxelVolume::empty([10, 10, 10], [1.0; 3], [0.0; 3]);
    for k in 2..8 {
        for j in 2..8 {
            for i in 2..8 {
                v.set(i, j, k, 1);
            }
        }
    }
    let closed = binary_closing(&v, &StructuringElement::cube26(1));
    assert_eq!(closed, v);
}

#[test]
fn closing_matches_two_pass_oracle_and_is_extensive() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for se in [StructuringElement::cube26(1), StructuringElement::cross6(2)] {
        for _ in 0..5 {
            let v = random_volume(&mut rng, 32, 0.08);
            let closed = binary_closing(&v, &se);
            let expect = oracle_erode(&oracle_dilate(&v, &se), &se, true);
            assert_eq!(closed, expect);
            for (c, o) in closed.data().iter().zip(v.data()) {
                assert!(*c >= *o, "closing must be extensive");
            }
        }
    }
}

#[test]
fn erode_dilate_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let v = random_volume(&mut rng, 24, 0.2);
    for se in [StructuringElement::cross6(1), StructuringElement::cube26(2)] {
        assert_eq!(dilate(&v, &se), oracle_dilate(&v, &se));
        assert_eq!(erode(&v, &se, false), oracle_erode(&v, &se, false));
        assert_eq!(erode(&v, &se, true), oracle_erode(&v, &se, true));
    }
}

// --- connected components ------------------------------------------------------

/// Independent flood fill: iterative DFS over a freshly built adjacency scan.
fn oracle_components(v: &VoxelVolume, conn: Connectivity) -> Vec<Vec<usize>> {
    let offsets = match conn {
        Connectivity::Six => vec![[1, 0, 0], [0, 1, 0], [0, 0, 1], [-1, 0, 0], [0, -1, 0], [0, 0, -1]],
        Connectivity::TwentySix => {
            let mut o = Vec::new();
            for dz in -1..=1isize {
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        if (dx, dy, dz) != (0, 0, 0) {
                            o.push([dx, dy, dz]);
                        }
                    }
                }
            }
            o
        }
    };
    let [nx, ny, nz] = v.shape();
    let mut seen = vec![false; v.data().len()];
    let mut comps = Vec::new();
    for start in 0..v.data().len() {
        if v.data()[start] == 0 || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut comp = Vec::new();
        while let Some(idx) = stack.pop() {
            comp.push(idx);
            let i = (idx % nx) as isize;
            let j = ((idx / nx) % ny) as isize;
            let k = (idx / (nx * ny)) as isize;
            for o in &offsets {
                let (x, y, z) = (i + o[0], j + o[1], k + o[2]);
                if x < 0 || y < 0 || z < 0 {
                    continue;
                }
                let (x, y, z) = (x as usize, y as usize, z as usize);
                if x >= nx || y >= ny || z >= nz {
                    continue;
                }
                let n = x + nx * (y + ny * z);
                if v.data()[n] != 0 && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

#[test]
fn largest_component_keeps_bigger_blob() {
    let mut v = VoxelVolume::empty([12, 12, 12], [1.0; 3], [0.0; 3]);
    // 10-voxel bar
    for i in 0..10 {
        v.set(i, 1, 1, 1);
    }
    // 3-voxel bar, far away
    for i in 0..3 {
        v.set(i, 9, 9, 1);
    }
    let res = largest_component(&v, Connectivity::TwentySix);
    assert_eq!(res.component_count, 2);
    assert_eq!(res.voxels, 10);
    assert_eq!(res.volume.foreground_count(), 10);
    assert_eq!(res.volume.get(0, 1, 1), 1);
    assert_eq!(res.volume.get(0, 9, 9), 0);
}

#[test]
fn largest_component_single_blob_is_identity() {
    let v = sphere_volume(16, 5.0, 1.0);
    let res = largest_component(&v, Connectivity::Six);
    assert_eq!(res.component_count, 1);
    assert_eq!(res.volume, v);
}

#[test]
fn largest_component_empty_foreground_is_flagged_not_error() {
    let v = VoxelVolume::empty([4, 4, 4], [1.0; 3], [0.0; 3]);
    let res = largest_component(&v, Connectivity::TwentySix);
    assert_eq!(res.component_count, 0);
    assert_eq!(res.voxels, 0);
    assert!(res.volume.is_empty_foreground());
}

#[test]
fn largest_component_matches_flood_fill_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for conn in [Connectivity::Six, Connectivity::TwentySix] {
        for _ in 0..5 {
            let v = random_volume(&mut rng, 32, 0.12);
            let res = largest_component(&v, conn);
            let comps = oracle_components(&v, conn);
            assert_eq!(res.component_count, comps.len());
            if comps.is_empty() {
                continue;
            }
            // expected winner: max size, ties by smallest minimum linear index
            let best = comps
                .iter()
                .max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0])))
                .unwrap();
            assert_eq!(res.voxels, best.len());
            let got: Vec<usize> = res
                .volume
                .data()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(&got, best);
        }
    }
}

#[test]
fn tie_break_takes_smallest_min_linear_index() {
    let mut v = VoxelVolume::empty([8, 8, 8], [1.0; 3], [0.0; 3]);
    // two 2-voxel blobs; the one containing linear index of (1,1,1) comes first
    v.set(1, 1, 1, 1);
    v.set(2, 1, 1, 1);
    v.set(5, 5, 5, 1);
    v.set(6, 5, 5, 1);
    let res = largest_component(&v, Connectivity::Six);
    assert_eq!(res.voxels, 2);
    assert_eq!(res.volume.get(1, 1, 1), 1);
    assert_eq!(res.volume.get(5, 5, 5), 0);
}

// --- subtract_overlap ------------------------------------------------------------

#[test]
fn subtract_overlap_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let defect = random_volume(&mut rng, 16, 0.3);
    let input = random_volume(&mut rng, 16, 0.3);

    let out = subtract_overlap(&defect, &input).unwrap();
    for i in 0..out.data().len() {
        let expect = u8::from(defect.data()[i] != 0 && input.data()[i] == 0);
        assert_eq!(out.data()[i], expect);
        assert!(out.data()[i] == 0 || input.data()[i] == 0, "must be disjoint");
    }

    // disjoint: unchanged
    let empty = defect.empty_like();
    assert_eq!(subtract_overlap(&defect, &empty).unwrap(), defect);
    // subset: empty
    assert!(subtract_overlap(&defect, &defect)
        .unwrap()
        .is_empty_foreground());
    // grid mismatch
    let other = VoxelVolume::empty([16, 16, 16], [2.0; 3], [0.0; 3]);
    assert!(matches!(
        subtract_overlap(&defect, &other),
        Err(Error::GridMismatch)
    ));
}

// --- meshing ----------------------------------------------------------------------

#[test]
fn single_voxel_meshes_to_closed_octahedron() {
    let mut v = VoxelVolume::empty([5, 5, 5], [2.0; 3], [0.0; 3]);
    v.set(2, 2, 2, 1);
    let mesh = extract_surface_mesh(&v).unwrap();
    assert_eq!(mesh.vertices.len(), 6);
    assert_eq!(mesh.triangles.len(), 8);
    assert!(mesh.is_closed());
    // midpoint crossings form an octahedron of "radius" spacing/2
    let s = 2.0f64;
    let expect = 3.0f64.sqrt() * s * s;
    assert!((mesh.area() - expect).abs() < 1e-9);
    assert!(mesh.signed_volume() > 0.0, "winding must face outward");
}

#[test]
fn solid_cube_meshes_to_genus_zero_surface() {
    let mut v = VoxelVolume::empty([14, 14, 14], [1.0; 3], [0.0; 3]);
    for k in 2..12 {
        for j in 2..12 {
            for i in 2..12 {
                v.set(i, j, k, 1);
            }
        }
    }
    let mesh = extract_surface_mesh(&v).unwrap();
    assert!(mesh.is_closed());
    let verts = mesh.vertices.len() as i64;
    let faces = mesh.triangles.len() as i64;
    let edges = faces * 3 / 2;
    assert_eq!(verts - edges + faces, 2, "Euler characteristic of a sphere");
    assert!(mesh.signed_volume() > 0.0);
}

#[test]
fn sphere_mesh_area_close_to_analytic() {
    let r = 10.0;
    let spacing = 0.5; // mm; r is in voxels
    let v = sphere_volume(32, r, spacing);
    let mesh = extract_surface_mesh(&v).unwrap();
    let analytic = 4.0 * std::f64::consts::PI * (r * spacing) * (r * spacing);
    let rel = (mesh.area() - analytic).abs() / analytic;
    assert!(rel < 0.10, "area {} vs analytic {analytic}", mesh.area());
    assert!(mesh.is_closed());
}

#[test]
fn empty_volume_meshing_is_error() {
    let v = VoxelVolume::empty([4, 4, 4], [1.0; 3], [0.0; 3]);
    assert!(matches!(extract_surface_mesh(&v), Err(Error::EmptyVolume)));
}

#[test]
fn boundary_touching_foreground_still_closes() {
    let mut v = VoxelVolume::empty([4, 4, 4], [1.0; 3], [0.0; 3]);
    for k in 0..4 {
        for j in 0..4 {
            for i in 0..2 {
                v.set(i, j, k, 1);
            }
        }
    }
    let mesh = extract_surface_mesh(&v).unwrap();
    assert!(mesh.is_closed());
    assert!(mesh.signed_volume() > 0.0);
}

#[test]
fn stl_and_ply_exports_write_files() {
    let mut v = VoxelVolume::empty([5, 5, 5], [1.0; 3], [0.0; 3]);
    v.set(2, 2, 2, 1);
    let mesh = extract_surface_mesh(&v).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stl = dir.path().join("m.stl");
    let ply = dir.path().join("m.ply");
    write_stl(&mesh, &stl).unwrap();
    write_ply_mesh(&mesh, &ply).unwrap();
    let stl_bytes = std::fs::read(&stl).unwrap();
    assert_eq!(stl_bytes.len(), 84 + 50 * mesh.triangles.len());
    let tri_count = u32::from_le_bytes(stl_bytes[80..84].try_into().unwrap());
    assert_eq!(tri_count as usize, mesh.triangles.len());
    let ply_text = std::fs::read_to_string(&ply).unwrap();
    assert!(ply_text.starts_with("ply\nformat ascii 1.0\n"));
    assert!(ply_text.contains(&format!("element face {}", mesh.triangles.len())));
}
