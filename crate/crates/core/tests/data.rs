mod common;

use std::path::Path;

use common::{rng, small_pair};
use grla_core::data::*;
use grla_core::Error;
use grla_tensor::Tensor;
use image::{GrayImage, Luma, Rgb, RgbImage};
use proptest::prelude::*;
use rand::Rng;

fn write_rgb(path: &Path, w: u32, h: u32, color: [u8; 3]) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    RgbImage::from_pixel(w, h, Rgb(color)).save(path).unwrap();
}

fn breast_tree(root: &Path) {
    for i in 0..3 {
        write_rgb(&root.join(format!("benign/b{i}.png")), 8, 8, [200, 100, 50]);
    }
    for i in 0..2 {
        write_rgb(&root.join(format!("malignant/m{i}.png")), 8, 8, [10, 20, 30]);
    }
}

fn opts(size: usize) -> LoadOptions {
    LoadOptions { size: (size, size), lenient: false }
}

#[test]
fn loads_binarized_tree_in_path_order() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("breast");
    breast_tree(&root);
    let map = BinarizationMap::preset("breast").unwrap();
    let report = load_image_dataset(&root, &map, &opts(8)).unwrap();
    assert_eq!(report.set.labels(), &[0, 0, 0, 1, 1]);
    assert_eq!(report.set.domain_id, "breast");
    assert_eq!(report.set.image_shape(), [3, 8, 8]);
    assert_eq!(report.files[0], Path::new("benign/b0.png"));
    let px = report.set.image(0);
    assert!((px[0] - 200.0 / 255.0).abs() < 1e-6);
    assert!((px[64] - 100.0 / 255.0).abs() < 1e-6);
    let again = load_image_dataset(&root, &map, &opts(8)).unwrap();
    assert_eq!(again.set.fingerprint, report.set.fingerprint);
}

#[test]
fn unmapped_subdirectory_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("breast");
    breast_tree(&root);
    write_rgb(&root.join("weird/w.png"), 8, 8, [0, 0, 0]);
    let err = load_image_dataset(&root, &BinarizationMap::preset("breast").unwrap(), &opts(8)).unwrap_err();
    assert!(matches!(&err, Error::UnmappedSublabel(_)));
    assert!(err.to_string().contains("weird"));
}

#[test]
fn corrupt_files_fail_or_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("breast");
    breast_tree(&root);
    std::fs::write(root.join("benign/broken.png"), b"not an image").unwrap();
    let map = BinarizationMap::preset("breast").unwrap();
    match load_image_dataset(&root, &map, &opts(8)) {
        Err(Error::Decode { path, .. }) => assert!(path.ends_with("benign/broken.png")),
        other => panic!("expected a decode error, got {:?}", other.map(|r| r.set.len())),
    }
    let report = load_image_dataset(&root, &map, &LoadOptions { lenient: true, ..opts(8) }).unwrap();
    assert_eq!(report.set.len(), 5);
    assert_eq!(report.skipped.len(), 1);
}

#[test]
fn grayscale_is_replicated_and_sizes_are_resampled() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("kidney");
    std::fs::create_dir_all(root.join("normal")).unwrap();
    GrayImage::from_pixel(10, 6, Luma([77])).save(root.join("normal/g.png")).unwrap();
    write_rgb(&root.join("tumor/t.png"), 4, 4, [1, 2, 3]);
    let report = load_image_dataset(&root, &BinarizationMap::preset("kidney").unwrap(), &opts(5)).unwrap();
    assert_eq!(report.set.image_shape(), [3, 5, 5]);
    let g = report.set.image(0);
    assert!(g.iter().all(|&v| (v - 77.0 / 255.0).abs() < 1e-6));
}

#[test]
fn empty_root_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("lung/lung_aca")).unwrap();
    let r = load_image_dataset(&dir.path().join("lung"), &BinarizationMap::preset("lung").unwrap(), &opts(4));
    assert!(matches!(r, Err(Error::EmptyDataset(_))));
}

#[test]
fn presets_are_total_and_binary() {
    for domain in ["breast", "kidney", "lung", "colon"] {
        let map = BinarizationMap::preset(domain).unwrap();
        let values: std::collections::BTreeSet<u8> = map.entries().values().copied().collect();
        assert_eq!(values.into_iter().collect::<Vec<_>>(), vec![0, 1]);
    }
    assert!(BinarizationMap::preset("liver").is_err());
    assert!(BinarizationMap::new("x", [("a".to_string(), 0)]).is_err());
}

#[test]
fn dataset_rejects_bad_inputs() {
    let ok = Tensor::new(vec![2, 3, 2, 2], vec![0.5f32; 24]).unwrap();
    assert!(LabeledImageSet::new("d", ok.clone(), vec![0, 2]).is_err());
    assert!(LabeledImageSet::new("d", ok.clone(), vec![0]).is_err());
    let bad = Tensor::new(vec![2, 3, 2, 2], vec![1.5f32; 24]).unwrap();
    assert!(LabeledImageSet::new("d", bad, vec![0, 1]).is_err());
    let set = LabeledImageSet::new("d", ok, vec![0, 1]).unwrap();
    assert_eq!(set.class_counts(), [1, 1]);
}

#[test]
fn split_sizes_for_ten_thousand() {
    let labels = vec![0u8; 10_000];
    let spec = SplitSpec { stratify: false, ..SplitSpec::default() };
    let parts = split_indices(&labels, &spec).unwrap();
    assert_eq!(parts.each_ref().map(|p| p.len()), [7000, 1500, 1500]);
}

#[test]
fn stratified_split_keeps_class_balance() {
    let labels: Vec<u8> = (0..1000).map(|i| u8::from(i >= 600)).collect();
    let parts = split_indices(&labels, &SplitSpec::default()).unwrap();
    let ones = parts[0].iter().filter(|&&i| labels[i] == 1).count();
    let zeros = parts[0].len() - ones;
    assert!(zeros.abs_diff(420) <= 1 && ones.abs_diff(280) <= 1, "{zeros}/{ones}");
}

#[test]
fn bad_split_ratios_are_rejected() {
    let spec = SplitSpec { ratios: [0.5, 0.3, 0.3], ..SplitSpec::default() };
    assert!(split_indices(&[0, 1, 0, 1], &spec).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]
    #[test]
    fn splits_partition_and_repeat(n in 10usize..400, seed in any::<u64>(), stratify in any::<bool>()) {
        let mut r = rng(seed);
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        let spec = SplitSpec { seed, stratify, ..SplitSpec::default() };
        let parts = split_indices(&labels, &spec).unwrap();
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split_indices(&labels, &spec).unwrap(), parts);
    }
}

#[test]
fn synthetic_pair_is_deterministic_and_shifted() {
    let (s1, t1) = small_pair(30, 32, 7);
    let (s2, t2) = small_pair(30, 32, 7);
    assert_eq!(s1.content_hash(), s2.content_hash());
    assert_eq!(t1.content_hash(), t2.content_hash());
    let (s3, _) = small_pair(30, 32, 8);
    assert_ne!(s1.content_hash(), s3.content_hash());
    assert_eq!(s1.class_counts(), [30, 30]);
}

#[test]
fn default_pair_meets_shift_and_oracle_bounds() {
    let spec = ShiftSpec::default();
    let (src, tgt) = synth_shifted_pair(&spec).unwrap();
    let oracle = spec.oracle();
    for set in [&src, &tgt] {
        assert!(density_oracle(set, &oracle) >= 0.95, "{}", set.domain_id);
    }
    for (a, b) in src.channel_means().iter().zip(tgt.channel_means()) {
        assert!((a - b).abs() >= 0.1, "channel means {a} vs {b}");
    }
}

#[test]
fn swapping_recipes_keeps_oracle_accuracy() {
    let spec = ShiftSpec { n_per_class: 200, ..ShiftSpec::default() };
    let swapped = ShiftSpec { source: spec.target.clone(), target: spec.source.clone(), ..spec.clone() };
    let (s, t) = synth_shifted_pair(&spec).unwrap();
    let (ss, st) = synth_shifted_pair(&swapped).unwrap();
    let o = spec.oracle();
    for a in [density_oracle(&s, &o), density_oracle(&t, &o), density_oracle(&ss, &o), density_oracle(&st, &o)] {
        assert!(a >= 0.95, "{a}");
    }
    assert_eq!(s.labels(), ss.labels());
}

#[test]
fn degenerate_recipes_are_rejected() {
    let mut spec = ShiftSpec::default();
    spec.classes[1] = spec.classes[0];
    assert!(synth_shifted_pair(&spec).is_err());
    let same = ShiftSpec { target: DomainRecipe::source(), ..ShiftSpec::default() };
    assert!(synth_shifted_pair(&same).is_err());
}

#[test]
fn mean_baseline_examples() {
    let zero = LabeledImageSet::new("a", Tensor::zeros(&[1, 3, 2, 2]), vec![0]).unwrap();
    let one = LabeledImageSet::new("b", Tensor::full(&[1, 3, 2, 2], 1.0), vec![1]).unwrap();
    let b = mean_image_baseline(&[&zero, &one]).unwrap();
    assert!(b.data().iter().all(|&v| v == 0.5));
    let (src, _) = small_pair(3, 8, 0);
    let first = src.subset(&[0]).unwrap();
    let twice = LabeledImageSet::new("c", Tensor::new(vec![2, 3, 8, 8], [first.image(0), first.image(0)].concat()).unwrap(), vec![0, 0]).unwrap();
    let b = mean_image_baseline(&[&twice]).unwrap();
    assert_eq!(b.data(), first.image(0));
}

#[test]
fn mean_baseline_matches_brute_force() {
    let mut r = rng(11);
    let data: Vec<f32> = (0..100 * 3 * 4 * 4).map(|_| r.random_range(0.0..1.0)).collect();
    let set = LabeledImageSet::new("r", Tensor::new(vec![100, 3, 4, 4], data.clone()).unwrap(), vec![0; 100]).unwrap();
    let (a, b) = (set.subset(&(0..37).collect::<Vec<_>>()).unwrap(), set.subset(&(37..100).collect::<Vec<_>>()).unwrap());
    let got = mean_image_baseline(&[&a, &b]).unwrap();
    for j in 0..48 {
        let mut s = 0.0f64;
        for i in 0..100 {
            s += data[i * 48 + j] as f64;
        }
        assert!((got.data()[j] as f64 - s / 100.0).abs() <= 1e-6);
    }
    let ch = channel_mean_baseline(&[&a, &b]).unwrap();
    for c in 0..3 {
        let want: f64 = (0..100).flat_map(|i| (0..16).map(move |k| (i, k))).map(|(i, k)| data[i * 48 + c * 16 + k] as f64).sum::<f64>() / 1600.0;
        assert!(ch.data()[c * 16..(c + 1) * 16].iter().all(|&v| (v as f64 - want).abs() <= 1e-6));
    }
}

#[test]
fn single_domains_match_the_pair_and_auxiliary_is_learnable() {
    let spec = ShiftSpec { n_per_class: 100, ..ShiftSpec::default() };
    let (src, _) = synth_shifted_pair(&spec).unwrap();
    let again = synth_domain(&spec, &DomainRecipe::source(), 1, "synth_source").unwrap();
    assert_eq!(again.content_hash(), src.content_hash());
    let aux = synth_domain(&spec, &DomainRecipe::preset("auxiliary").unwrap(), 3, "synth_aux").unwrap();
    assert!(density_oracle(&aux, &spec.oracle()) >= 0.95);
    for (a, b) in src.channel_means().iter().zip(aux.channel_means()) {
        assert!((a - b).abs() >= 0.05, "{a} vs {b}");
    }
    assert!(DomainRecipe::preset("purple").is_err());
}

#[test]
fn concat_stacks_rows_in_order() {
    let (src, tgt) = small_pair(3, 8, 0);
    let both = LabeledImageSet::concat("both", &[&src, &tgt]).unwrap();
    assert_eq!(both.len(), 12);
    assert_eq!(both.image(6), tgt.image(0));
    assert_eq!(&both.labels()[..6], src.labels());
    let (other, _) = small_pair(3, 16, 0);
    assert!(LabeledImageSet::concat("bad", &[&src, &other]).is_err());
}
