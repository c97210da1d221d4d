use proptest::prelude::*;
use pyraflow::boxes::{BBox, GtObject};
use pyraflow::detect::{decode_image, DecodeParams, LevelMaps};
use pyraflow::heads::{assign_targets, LevelRanges};
use pyraflow::metrics::evaluate_ap;
use pyraflow::scene::{generate_scene, SceneSpec, SizeBin};
use pyraflow::Tensor;

const IMAGE: usize = 64;
const LEVELS: [usize; 4] = [2, 3, 4, 5];

fn object() -> impl Strategy<Value = GtObject> {
    (1usize..=60, 1usize..=60, 0usize..3)
        .prop_flat_map(|(w, h, class)| {
            (0..=IMAGE - w, 0..=IMAGE - h, Just(w), Just(h), Just(class))
        })
        .prop_map(|(x, y, w, h, class)| GtObject {
            bbox: BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64),
            class,
        })
}

fn grids() -> Vec<(usize, usize, usize)> {
    LEVELS
        .iter()
        .map(|&l| (l, IMAGE >> l, IMAGE >> l))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_positive_cell_belongs_to_one_object_of_its_level(
        images in prop::collection::vec(prop::collection::vec(object(), 0..6), 1..3),
        b1 in 4.0f64..12.0,
        b2 in 12.0f64..24.0,
        b3 in 24.0f64..48.0,
    ) {
        let ranges = LevelRanges::from_boundaries(&LEVELS, &[b1, b2, b3]).unwrap();
        let assignment = assign_targets(&images, &grids(), &ranges).unwrap();
        prop_assert_eq!(assignment.object_levels.len(), images.len());
        for (n, objects) in images.iter().enumerate() {
            let chosen = &assignment.object_levels[n];
            prop_assert_eq!(chosen.len(), objects.len());
            for (obj, &level) in objects.iter().zip(chosen) {
                let side = obj.bbox.max_side();
                let matching = ranges.ranges().iter().filter(|r| side > r.1 && side <= r.2).count();
                prop_assert_eq!(matching, 1);
                prop_assert_eq!(ranges.level_for(side), Some(level));
            }
        }
        for t in &assignment.levels {
            prop_assert_eq!(t.stride, (1u64 << t.level) as f64);
            let hw = t.height * t.width;
            for (idx, owner) in t.owners.iter().enumerate() {
                let n = idx / hw;
                match *owner {
                    None => prop_assert!(t.labels[idx].is_none()),
                    Some(j) => {
                        let obj = images[n][j];
                        prop_assert_eq!(assignment.object_levels[n][j], t.level);
                        prop_assert_eq!(t.labels[idx], Some(obj.class));
                        let (y, x) = ((idx % hw) / t.width, idx % t.width);
                        let cx = (x as f64 + 0.5) * t.stride;
                        let cy = (y as f64 + 0.5) * t.stride;
                        prop_assert!(obj.bbox.contains(cx, cy));
                        prop_assert!(t.distances[idx].iter().all(|&d| d >= 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn size_bins_partition_the_ground_truth(seed in 0u64..1000, index in 0u64..64) {
        let spec = SceneSpec { seed, ..SceneSpec::default() };
        let scene = generate_scene(&spec, index).unwrap();
        let gts = vec![scene.objects.clone()];
        let perfect = vec![scene
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| pyraflow::detect::Detection { bbox: o.bbox, class: o.class, score: 1.0 - i as f64 * 0.01, level: 3 })
            .collect::<Vec<_>>()];
        let summary = evaluate_ap(&perfect, &gts, 3, &[0.5, 0.75]).unwrap();
        prop_assert_eq!(summary.overall, 1.0);
        let mut counted = 0;
        for (bin, ap) in [(SizeBin::Small, summary.small), (SizeBin::Medium, summary.medium), (SizeBin::Large, summary.large)] {
            let members = scene.objects.iter().filter(|o| SizeBin::of(&o.bbox) == bin).count();
            counted += members;
            prop_assert_eq!(ap.is_some(), members > 0);
            if let Some(ap) = ap {
                prop_assert_eq!(ap, 1.0);
            }
        }
        prop_assert_eq!(counted, scene.objects.len());
    }

    #[test]
    fn decode_respects_threshold_and_limit(
        seed in any::<u64>(),
        thresh in 0.0f64..0.9,
        max_total in 1usize..40,
        topk in 1usize..50,
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let levels: Vec<LevelMaps> = [3usize, 4]
            .iter()
            .map(|&l| {
                let s = IMAGE >> l;
                LevelMaps {
                    level: l,
                    cls: Tensor::randn([1, 3, s, s], 2.0, &mut rng),
                    reg: Tensor::uniform([1, 4, s, s], 0.1, 3.0, &mut rng),
                }
            })
            .collect();
        let params = DecodeParams { score_thresh: thresh, per_level_topk: topk, nms_iou: 0.5, max_total };
        let dets = decode_image(&levels, 0, IMAGE as f64, &params).unwrap();
        prop_assert!(dets.len() <= max_total);
        prop_assert!(dets.len() <= 2 * topk);
        prop_assert!(dets.iter().all(|d| d.score >= thresh));
        prop_assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
        for (i, a) in dets.iter().enumerate() {
            prop_assert!(a.bbox.x1 >= 0.0 && a.bbox.x2 <= IMAGE as f64);
            for b in &dets[i + 1..] {
                prop_assert!(a.class != b.class || a.bbox.iou(&b.bbox) <= 0.5);
            }
        }
    }
}
