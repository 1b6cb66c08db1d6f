use std::path::Path;

use fss::archive::Archive;
use fss::correlation::{vt_correlation, vv_layer_correlation};
use fss::episodes::{split_folds, DatasetManifest, EpisodeSampler, ManifestRecord};
use fss::mask::Mask;
use fss::metrics::FoldMetrics;
use fss::patterns::{box_to_mask, kshot_vote, PatternTag};
use fss::synth::synth_generate;
use fss::Tensor64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: &'static [usize]) -> impl Strategy<Value = Tensor64> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |v| Tensor64::new(shape, v).unwrap())
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(0u8..2, h * w).prop_map(move |b| Mask::from_bytes(h, w, &b).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn correlation_ignores_positive_rescaling(fq in tensor(&[3, 2, 3]), fs in tensor(&[3, 3, 2]), a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let fo = fs.scale(0.5);
        let base = vv_layer_correlation(&fq, &fs, &fo).unwrap();
        let scaled = vv_layer_correlation(&fq.scale(a), &fs.scale(b), &fo.scale(a * b)).unwrap();
        prop_assert!(base.max_abs_diff(&scaled) < 1e-12);
    }

    #[test]
    fn correlation_permutes_with_query_positions(fq in tensor(&[2, 3, 4]), ft in tensor(&[2])) {
        prop_assume!(ft.data().iter().any(|v| v.abs() > 1e-3));
        // transposing the query grid transposes the map
        let transposed = Tensor64::from_fn(&[2, 4, 3], |i| fq.get(&[i[0], i[2], i[1]]));
        let a = vt_correlation(&fq, &ft).unwrap().map;
        let b = vt_correlation(&transposed, &ft).unwrap().map;
        for y in 0..3 {
            for x in 0..4 {
                prop_assert_eq!(a.get(&[y, x]), b.get(&[x, y]));
            }
        }
    }

    #[test]
    fn vote_ignores_shot_order(shots in prop::collection::vec(mask(3, 4), 1..6), rot in 0usize..6) {
        let mut rotated = shots.clone();
        let r = rot % shots.len();
        rotated.rotate_left(r);
        prop_assert_eq!(kshot_vote(&shots).unwrap(), kshot_vote(&rotated).unwrap());
    }

    #[test]
    fn unanimous_votes_win(m in mask(4, 4), k in 1usize..6) {
        prop_assert_eq!(kshot_vote(&vec![m.clone(); k]).unwrap(), m);
    }

    #[test]
    fn merge_is_order_free(stream in prop::collection::vec((0u32..4, mask(3, 3), mask(3, 3)), 0..20), split in 0usize..20) {
        let split = split.min(stream.len());
        let (mut left, mut right, mut whole) = (FoldMetrics::new(), FoldMetrics::new(), FoldMetrics::new());
        for (i, (c, p, g)) in stream.iter().enumerate() {
            whole.accumulate(*c, p, g).unwrap();
            if i < split { left.accumulate(*c, p, g).unwrap() } else { right.accumulate(*c, p, g).unwrap() }
        }
        prop_assert_eq!(left.clone().merged(&right), whole.clone());
        prop_assert_eq!(right.merged(&left), whole);
    }

    #[test]
    fn tight_box_covers_and_touches(m in mask(6, 5)) {
        match m.tight_box() {
            None => prop_assert!(m.is_empty()),
            Some(b) => {
                let hull = box_to_mask(b, m.dims()).unwrap();
                prop_assert!(m.is_subset_of(&hull));
                prop_assert_eq!(hull.area(), b.area());
                prop_assert!(b.area() >= m.area());
                prop_assert!((b.x_min..b.x_max).any(|x| m.get(b.y_min, x)));
                prop_assert!((b.y_min..b.y_max).any(|y| m.get(y, b.x_max - 1)));
            }
        }
    }

    #[test]
    fn archive_round_trips(t in tensor(&[2, 3]), meta in "[a-z ]{0,12}") {
        let mut a = Archive::new();
        a.set_meta("note", &meta);
        a.insert("w", &t);
        a.insert("w32", &t.cast::<f32>());
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        prop_assert_eq!(b.meta("note"), Some(meta.as_str()));
        prop_assert_eq!(b.get::<f64>("w").unwrap(), t.clone());
        prop_assert_eq!(b.get::<f32>("w32").unwrap(), t.cast::<f32>());
    }

    #[test]
    fn manifest_round_trips(rows in prop::collection::vec((0u32..5, "[a-z]{1,8}"), 1..10)) {
        let records: Vec<ManifestRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, (c, _))| ManifestRecord {
                image_path: format!("img/{i}.png").into(),
                mask_path: format!("mask/{i}.png").into(),
                class_id: *c,
                class_name: format!("class {}", rows.iter().find(|r| r.0 == *c).unwrap().1),
            })
            .collect();
        let m = DatasetManifest { name: "d".into(), root: "/data".into(), records };
        let back = DatasetManifest::parse(&m.to_tsv(), "d", Path::new("/data")).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn folds_partition_classes(n_folds in 1usize..6, per in 1usize..5) {
        let ids: Vec<u32> = (0..(n_folds * per) as u32).map(|i| i * 3 + 1).collect();
        let mut seen = Vec::new();
        for f in 0..n_folds {
            let (base, novel) = split_folds(&ids, f, n_folds).unwrap();
            prop_assert_eq!(novel.len(), per);
            prop_assert_eq!(base.len() + novel.len(), ids.len());
            prop_assert!(novel.iter().all(|c| !base.contains(c)));
            seen.extend(novel);
        }
        seen.sort_unstable();
        prop_assert_eq!(seen, ids);
    }
}

#[test]
fn sampler_draws_classes_uniformly() {
    let ds = synth_generate(2, 20, 3, 16).unwrap();
    let classes = ds.class_ids();
    let mut sampler = EpisodeSampler::new(&ds, &classes, 2, 9, PatternTag::Mask, 0).unwrap();
    let n = 20_000;
    let mut counts = vec![0f64; classes.len()];
    for e in sampler.take(&ds, n) {
        counts[classes.iter().position(|&c| c == e.class_id).unwrap()] += 1.0;
        let mut records: Vec<usize> = e.records().collect();
        records.sort_unstable();
        records.dedup();
        assert_eq!(records.len(), 3, "query and supports must be distinct");
    }
    let expected = n as f64 / classes.len() as f64;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    // 19 degrees of freedom, p = 0.001
    assert!(chi2 < 43.82, "chi-square {chi2}");
}

#[test]
fn sampler_is_reproducible() {
    let ds = synth_generate(2, 4, 3, 16).unwrap();
    let draw = |seed| EpisodeSampler::new(&ds, &ds.class_ids(), 1, seed, PatternTag::Box, 0).unwrap().take(&ds, 50);
    assert_eq!(draw(4), draw(4));
    assert_ne!(draw(4), draw(5));
    assert!(EpisodeSampler::new(&ds, &ds.class_ids(), 3, 0, PatternTag::Box, 0).is_err());
}

#[test]
fn vote_matches_counting_oracle_on_random_shots() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for k in 1..=7 {
        let shots: Vec<Mask> = (0..k)
            .map(|_| {
                let bytes: Vec<u8> = (0..25).map(|_| u8::from(rng.gen_bool(0.5))).collect();
                Mask::from_bytes(5, 5, &bytes).unwrap()
            })
            .collect();
        let v = kshot_vote(&shots).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let fg = shots.iter().filter(|m| m.get(y, x)).count();
                assert_eq!(v.get(y, x), fg >= k - fg);
            }
        }
    }
}
