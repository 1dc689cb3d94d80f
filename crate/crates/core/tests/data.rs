use std::fs;

use promptmt::data::mtt::{self, NamedTensor, TensorData};
use promptmt::data::scene::{gen_scene, label_edges, normals_from_depth, pixel_pitch};
use promptmt::data::{generate, load_dataset, write_dataset, GenSpec, Manifest};
use promptmt::error::Error;
use promptmt::par::Parallelism;

fn small_spec() -> GenSpec {
    GenSpec {
        train: 6,
        val: 3,
        height: 16,
        width: 16,
        ..GenSpec::default()
    }
}

fn brute_edges(labels: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut seen = vec![labels[(y * w as i64 + x) as usize]];
            for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (yy, xx) = (y + dy, x + dx);
                if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 {
                    seen.push(labels[(yy * w as i64 + xx) as usize]);
                }
            }
            seen.sort_unstable();
            seen.dedup();
            out[(y * w as i64 + x) as usize] = (seen.len() >= 2) as u8;
        }
    }
    out
}

#[test]
fn centered_square_edge_band() {
    let (h, w) = (12, 12);
    let inside = |y: usize, x: usize| (4..8).contains(&y) && (4..8).contains(&x);
    let labels: Vec<u8> = (0..h * w).map(|i| inside(i / w, i % w) as u8 * 3).collect();
    let edges = label_edges(&labels, h, w);
    for y in 0..h {
        for x in 0..w {
            let ring = inside(y, x) && (y == 4 || y == 7 || x == 4 || x == 7);
            let touching = !inside(y, x)
                && [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)]
                    .iter()
                    .any(|&(yy, xx)| yy < h && xx < w && inside(yy, xx));
            assert_eq!(edges[y * w + x] == 1, ring || touching, "({y},{x})");
        }
    }
}

#[test]
fn generated_edges_match_the_neighbourhood_oracle() {
    for seed in 0..15 {
        let s = gen_scene(seed, 24, 20, 5, 5).unwrap();
        assert_eq!(s.edge, brute_edges(&s.semseg, 24, 20));
    }
}

#[test]
fn empty_scene_has_no_labels_or_edges() {
    let s = gen_scene(7, 16, 16, 3, 0).unwrap();
    assert!(s.semseg.iter().all(|&c| c == 0));
    assert!(s.edge.iter().all(|&e| e == 0));
    assert!(s.saliency.as_ref().map_or(true, |m| m.iter().all(|&v| v == 0)));
}

#[test]
fn stored_normals_follow_stored_depth() {
    for seed in 0..10 {
        let s = gen_scene(seed, 32, 32, 5, 5).unwrap();
        let re = normals_from_depth(s.depth.data(), 32, 32, pixel_pitch(32));
        for p in 0..32 * 32 {
            if s.normal_mask[p] == 0 {
                continue;
            }
            for c in 0..3 {
                assert!((re[3 * p + c] - s.normal.data()[3 * p + c]).abs() < 1e-5, "seed {seed} pixel {p}");
            }
        }
        let masked = s.normal_mask.iter().filter(|&&m| m == 0).count();
        assert!(masked < 32 * 32 / 2);
    }
}

#[test]
fn generation_is_deterministic_and_mode_independent() {
    let spec = small_spec();
    let (a, av) = generate(&spec, Parallelism::Sequential).unwrap();
    let (b, bv) = generate(&spec, Parallelism::Rayon).unwrap();
    assert_eq!(a, b);
    assert_eq!(av, bv);
    assert_eq!((a.len(), av.len()), (6, 3));
    assert_ne!(a[0], av[0]);
}

#[test]
fn gen_spec_validation() {
    for bad in [
        GenSpec { classes: 1, ..small_spec() },
        GenSpec { classes: 256, ..small_spec() },
        GenSpec { min_objects: 4, max_objects: 2, ..small_spec() },
        GenSpec { height: 1, ..small_spec() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let manifest = write_dataset(dir.path(), &spec, Parallelism::Sequential).unwrap();
    assert_eq!(manifest.split("train").unwrap().count, 6);
    assert_eq!(Manifest::load(dir.path()).unwrap(), manifest);
    assert!(dir.path().join("train/sample_00000.mtt").is_file());
    assert!(dir.path().join("val/sample_00002.mtt").is_file());

    let (tr, va) = generate(&spec, Parallelism::Sequential).unwrap();
    assert_eq!(load_dataset(dir.path(), "train").unwrap(), tr);
    assert_eq!(load_dataset(dir.path(), "val").unwrap(), va);
    assert!(load_dataset(dir.path(), "test").is_err());
}

#[test]
fn default_split_sizes() {
    let spec = GenSpec::default();
    assert_eq!((spec.train, spec.val, spec.height, spec.width, spec.classes), (200, 50, 64, 64, 5));
    assert_eq!((spec.min_objects, spec.max_objects), (3, 6));
}

#[test]
fn missing_sample_fails_before_loading() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &small_spec(), Parallelism::Sequential).unwrap();
    fs::remove_file(dir.path().join("train/sample_00004.mtt")).unwrap();
    // also break an earlier file: the missing one must be reported first
    fs::write(dir.path().join("train/sample_00000.mtt"), b"junk").unwrap();
    match load_dataset(dir.path(), "train") {
        Err(Error::Data(msg)) => assert!(msg.contains("sample_00004"), "{msg}"),
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn corrupted_depth_names_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &small_spec(), Parallelism::Sequential).unwrap();
    let path = dir.path().join("val/sample_00001.mtt");
    let entries: Vec<NamedTensor> = mtt::read_mtt(&path)
        .unwrap()
        .into_iter()
        .map(|e| {
            if e.name == "depth" {
                NamedTensor::new("depth", &[3], TensorData::F32(vec![1.0; 3])).unwrap()
            } else {
                e
            }
        })
        .collect();
    mtt::write_mtt(&path, &entries).unwrap();
    match load_dataset(dir.path(), "val") {
        Err(Error::Data(msg)) => assert!(msg.contains("sample_00001"), "{msg}"),
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn truncated_file_reports_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.mtt");
    let t = NamedTensor::new("x", &[4], TensorData::F64(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
    mtt::write_mtt(&path, &[t]).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(mtt::read_mtt(&path), Err(Error::Parse { .. })));
    fs::write(&path, b"XXXX\0\0\0\0").unwrap();
    assert!(matches!(mtt::read_mtt(&path), Err(Error::Parse { offset: 0, .. })));
}
