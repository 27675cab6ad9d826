mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use adafgrad_core::data::{
    load_manifest, read_slide_features, synth_sequence, write_prototypes, write_slide_features, FeatureDims,
    ManifestFile, PrototypeFile, SlideEntry, Split, SyntheticSpec, TaskEntry, MANIFEST_FILE,
};
use adafgrad_core::Error;
use common::*;
use ndarray::{arr1, Array1};
use proptest::prelude::*;

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn slide_files_round_trip_bit_exactly(seed in any::<u64>(), n_r in 1usize..10, k in 1usize..4, d_vis in 1usize..9) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wsf");
        let s = random_slide(&mut rng(seed), n_r, k, d_vis, 2);
        write_slide_features(&s, &path).unwrap();
        let size = fs::metadata(&path).unwrap().len() as usize;
        prop_assert_eq!(size, 16 + 4 * (n_r * d_vis + n_r * k * k * d_vis));
        let back = read_slide_features(&path, s.labels()).unwrap();
        prop_assert_eq!(back, s);
    }
}

#[test]
fn corrupt_and_truncated_files_are_rejected_with_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.wsf");
    let s = random_slide(&mut rng(0), 3, 2, 4, 0);
    write_slide_features(&s, &path).unwrap();
    let bytes = fs::read(&path).unwrap();

    let mut magic = bytes.clone();
    magic[0] = b'X';
    fs::write(&path, &magic).unwrap();
    let err = read_slide_features(&path, s.labels()).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert!(err.to_string().contains("bad.wsf"), "{err}");

    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let err = read_slide_features(&path, s.labels()).unwrap_err();
    assert!(err.to_string().contains("bad.wsf"), "{err}");
}

fn minimal(dir: &Path, slides: Vec<SlideEntry>) -> PathBuf {
    write_prototypes(
        &PrototypeFile {
            c_text: 2,
            cls: vec![arr1(&[1.0f32, 0.0])],
            neg: vec![],
        },
        &dir.join("p.wsp"),
    )
    .unwrap();
    let s = random_slide(&mut rng(1), 2, 1, 3, 0);
    write_slide_features(&s, &dir.join("a.wsf")).unwrap();
    let file = ManifestFile {
        dims: FeatureDims { d_vis: 3, k: 1, c_text: 2 },
        prototypes: "p.wsp".into(),
        tasks: vec![TaskEntry {
            name: "only".into(),
            classes: vec!["c".into()],
            negatives: vec![],
            slides,
        }],
    };
    let path = dir.join("m.json");
    fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
    path
}

fn entry(id: &str, split: Split) -> SlideEntry {
    SlideEntry {
        id: id.into(),
        path: "a.wsf".into(),
        task_index: 0,
        class_in_task: 0,
        split,
    }
}

#[test]
fn minimal_manifest_loads() {
    let dir = tempfile::tempdir().unwrap();
    let m = load_manifest(&minimal(dir.path(), vec![entry("a", Split::Train)])).unwrap();
    assert_eq!(m.n_tasks(), 1);
    assert_eq!(m.c_total(), 1);
    let slides = m.load_split(0, Split::Train).unwrap();
    assert_eq!(slides.len(), 1);
    assert_eq!(slides[0].global_class, 0);
}

#[test]
fn overlapping_splits_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let path = minimal(dir.path(), vec![entry("a", Split::Train), entry("b", Split::Test)]);
    let err = load_manifest(&path).unwrap_err().to_string();
    assert!(err.contains("overlap") && err.contains("a.wsf"), "{err}");
}

#[test]
fn default_sequence_shape_and_mask_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth_sequence(&SyntheticSpec::default(), 3, dir.path()).unwrap();
    let m = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(m, out.manifest);
    assert_eq!(m.n_tasks(), 6);
    assert_eq!(m.c_total(), 13);
    assert_eq!(m.mask_ranges().ranges, vec![(0, 2), (2, 5), (5, 7), (7, 9), (9, 11), (11, 13)]);
    let protos = m.load_task_prototypes().unwrap();
    let classes: Vec<usize> = protos.iter().flat_map(|t| t.cls.iter().map(|(g, _)| *g)).collect();
    assert_eq!(classes, (0..13).collect::<Vec<_>>());
    for t in 0..6 {
        let counts: Vec<usize> = [Split::Train, Split::Val, Split::Test]
            .iter()
            .map(|&s| m.entries(t, s).count())
            .collect();
        let c = m.class_counts()[t];
        assert_eq!(counts, vec![24 * c, 3 * c, 3 * c]);
    }
}

#[test]
fn same_seed_gives_byte_identical_trees() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = SyntheticSpec {
        slides_per_class: 5,
        ..Default::default()
    };
    synth_sequence(&spec, 11, a.path()).unwrap();
    synth_sequence(&spec, 11, b.path()).unwrap();
    synth_sequence(&spec, 12, c.path()).unwrap();
    let ta = tree(a.path());
    assert_eq!(ta.len(), 1 + 1 + 13 * 5);
    assert_eq!(ta, tree(b.path()));
    assert_ne!(ta, tree(c.path()));
}

#[test]
fn zero_noise_gives_identical_region_rows_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        slides_per_class: 4,
        region_noise: 0.0,
        patch_noise: 0.0,
        template_noise: 0.0,
        ..Default::default()
    };
    let m = synth_sequence(&spec, 0, dir.path()).unwrap().manifest;
    for t in 0..m.n_tasks() {
        let slides: Vec<_> = [Split::Train, Split::Val, Split::Test]
            .iter()
            .flat_map(|&s| m.load_split(t, s).unwrap())
            .collect();
        for c in 0..m.class_counts()[t] {
            let rows: Vec<Vec<f32>> = slides
                .iter()
                .filter(|s| s.class_in_task == c)
                .flat_map(|s| s.regions.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>())
                .collect();
            assert!(rows.len() >= 4 * spec.min_regions);
            assert!(rows.iter().all(|r| *r == rows[0]));
        }
    }
}

#[test]
fn nearest_class_mean_separates_the_default_geometry() {
    // 60 degrees between unit means is a chord of 1.0; noise 0.1 is a tenth of it.
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        region_noise: 0.1,
        ..Default::default()
    };
    let m = synth_sequence(&spec, 4, dir.path()).unwrap().manifest;
    let slide_mean = |s: &adafgrad_core::model::SlideFeatures| -> Array1<f64> {
        s.regions.mapv(f64::from).mean_axis(ndarray::Axis(0)).unwrap()
    };
    let mut centroids = vec![Array1::<f64>::zeros(spec.d_vis); 13];
    let mut n = vec![0.0; 13];
    let mut tests = Vec::new();
    for t in 0..m.n_tasks() {
        for s in m.load_split(t, Split::Train).unwrap() {
            centroids[s.global_class] += &slide_mean(&s);
            n[s.global_class] += 1.0;
        }
        tests.extend(m.load_split(t, Split::Test).unwrap());
    }
    for (c, k) in centroids.iter_mut().zip(&n) {
        *c /= *k;
    }
    let correct = tests
        .iter()
        .filter(|s| {
            let x = slide_mean(s);
            let d = |c: &Array1<f64>| (&x - c).mapv(|v| v * v).sum();
            let best = (0..13).min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b]))).unwrap();
            best == s.global_class
        })
        .count();
    assert!(correct as f64 / tests.len() as f64 >= 0.99, "{correct}/{}", tests.len());
}

#[test]
fn unreachable_separation_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        d_vis: 2,
        min_separation_deg: 100.0,
        ..Default::default()
    };
    assert!(matches!(synth_sequence(&spec, 0, dir.path()), Err(Error::Config(_))));
}
