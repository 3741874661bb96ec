use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use taco_core::contrastive::{cosine_similarity, nce_pair_loss, MemoryBank, MomentumQueue, Negatives};
use taco_core::transforms::{
    apply_transform_set, clip_order_task, invert_permutation, reverse, rotation_jitter, shuffle_task, speed_task,
    TransformConfigs, PERMUTATIONS_3,
};
use taco_core::videodata::{sample_clip, sample_clip_at, ClipSampleConfig, SyntheticDatasetConfig};
use taco_core::{Clip, Encoder, ExperimentConfig, TransformKind, TransformSet, Video};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_video(seed: u64, length: usize, size: usize) -> Video {
    SyntheticDatasetConfig {
        num_videos: 1,
        length,
        height: size,
        width: size,
        seed,
        ..Default::default()
    }
    .generate()
    .unwrap()
    .videos()[0]
    .clone()
}

fn in_unit_range(c: &Clip) -> bool {
    c.frames.iter().all(|v| (0.0..=1.0).contains(v))
}

fn unit_vec(raw: &[f32]) -> Vec<f32> {
    let n = raw.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-3);
    raw.iter().map(|x| x / n).collect()
}

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

const KINDS: [TransformKind; 5] = [
    TransformKind::RotationJitter,
    TransformKind::Reverse,
    TransformKind::Shuffle,
    TransformKind::Speed,
    TransformKind::ClipOrder,
];

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn generation_is_deterministic_and_in_range(seed in 0u64..1000, length in 2usize..20, size in 8usize..14) {
        let a = small_video(seed, length, size);
        let b = small_video(seed, length, size);
        prop_assert_eq!(&a, &b);
        prop_assert!(a.frames.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(a.frames.len(), length * size * size * 3);
    }

    #[test]
    fn dataset_ids_match_positions(n in 1usize..12, seed in 0u64..100) {
        let d = SyntheticDatasetConfig { num_videos: n, length: 4, height: 8, width: 8, seed, ..Default::default() }
            .generate()
            .unwrap();
        prop_assert_eq!(d.len(), n);
        for (i, v) in d.videos().iter().enumerate() {
            prop_assert_eq!(v.id, i);
            prop_assert!(v.class_label.is_some());
        }
    }

    #[test]
    fn sampled_clips_follow_the_stride(seed in 0u64..500, t in 2usize..6, stride in 1usize..4, extra in 0usize..10) {
        let length = t * stride + extra;
        let v = small_video(seed, length, 8);
        let cfg = ClipSampleConfig::new(t, stride).unwrap();
        let c = sample_clip(&v, &cfg, &mut rng(seed)).unwrap();
        let s = c.provenance.start;
        prop_assert_eq!(c.provenance.video_id, v.id);
        prop_assert!(s + cfg.span() <= v.length);
        let frame = 8 * 8 * 3;
        for k in 0..t {
            let i = s + k * stride;
            prop_assert_eq!(c.frame(k), &v.frames[i * frame..(i + 1) * frame]);
        }
        prop_assert!(sample_clip_at(&v, &cfg, v.length).is_err());
    }

    #[test]
    fn transform_outcomes_are_labelled_and_in_range(seed in 0u64..500, which in 0usize..5) {
        let v = small_video(seed, 48, 8);
        let clip_cfg = ClipSampleConfig::new(8, 1).unwrap();
        let tcfg = TransformConfigs::default();
        let set = TransformSet::new(vec![KINDS[which]]).unwrap();
        let outs = apply_transform_set(&v, &set, &tcfg, &clip_cfg, &mut rng(seed)).unwrap();
        prop_assert_eq!(outs.len(), 1);
        let o = &outs[0];
        prop_assert_eq!(o.kind, KINDS[which]);
        prop_assert!(o.task_label < o.label_space && o.label_space >= 2);
        prop_assert_eq!(o.label_space, KINDS[which].label_space(&tcfg));
        prop_assert!(o.clips.iter().all(in_unit_range));
    }

    #[test]
    fn reverse_inverts_frame_order(seed in 0u64..500) {
        let v = small_video(seed, 16, 8);
        let c = sample_clip(&v, &ClipSampleConfig::new(5, 2).unwrap(), &mut rng(seed)).unwrap();
        prop_assert_eq!(&reverse(&c, 0).unwrap().clips[0], &c);
        let r = reverse(&c, 1).unwrap().clips.remove(0);
        for k in 0..c.num_frames {
            prop_assert_eq!(r.frame(k), c.frame(c.num_frames - 1 - k));
        }
    }

    #[test]
    fn rotation_label_and_range(seed in 0u64..500, angle in 0usize..4) {
        let v = small_video(seed, 8, 8);
        let c = sample_clip(&v, &ClipSampleConfig::new(4, 1).unwrap(), &mut rng(seed)).unwrap();
        let o = rotation_jitter(&c, angle, &TransformConfigs::default().rotation, &mut rng(seed + 1)).unwrap();
        prop_assert_eq!(o.task_label, angle);
        prop_assert_eq!(o.label_space, 4);
        prop_assert!(in_unit_range(&o.clips[0]));
    }

    #[test]
    fn shuffle_permutes_exactly_one_half_length_subclip(seed in 0u64..500, half in 2usize..5) {
        let v = small_video(seed, 32, 8);
        let t = 2 * half;
        let c = sample_clip(&v, &ClipSampleConfig::new(t, 1).unwrap(), &mut rng(seed)).unwrap();
        let o = shuffle_task(&c, &TransformConfigs::default().shuffle, &mut rng(seed + 7)).unwrap();
        prop_assert_eq!(o.clips.len(), 3);
        prop_assert!(o.clips.iter().all(|s| s.num_frames == half));
        // a subclip is unshuffled iff it matches some contiguous window of the source clip
        let contiguous = |s: &Clip| (0..=t - half).any(|a| (0..half).all(|k| s.frame(k) == c.frame(a + k)));
        for (i, s) in o.clips.iter().enumerate() {
            if i != o.task_label {
                prop_assert!(contiguous(s));
            }
        }
    }

    #[test]
    fn speed_subsamples_at_the_labelled_rate(seed in 0u64..500, rate_index in 0usize..3) {
        let v = small_video(seed, 40, 8);
        let cfg = TransformConfigs::default().speed;
        let o = speed_task(&v, rate_index, &cfg, 8, &mut rng(seed)).unwrap();
        let c = &o.clips[0];
        prop_assert_eq!(o.task_label, rate_index);
        prop_assert_eq!(c.provenance.stride, cfg.rates[rate_index]);
        let frame = 8 * 8 * 3;
        for k in 0..8 {
            let i = c.provenance.start + k * cfg.rates[rate_index];
            prop_assert_eq!(c.frame(k), &v.frames[i * frame..(i + 1) * frame]);
        }
    }

    #[test]
    fn clip_order_inverse_restores_chronology(seed in 0u64..500) {
        let v = small_video(seed, 40, 8);
        let o = clip_order_task(&v, 3, 2, &mut rng(seed)).unwrap();
        prop_assert_eq!(o.label_space, 6);
        let perm = PERMUTATIONS_3[o.task_label];
        let inv = invert_permutation(&perm);
        let starts: Vec<usize> = inv.iter().map(|&i| o.clips[i].provenance.start).collect();
        prop_assert!(starts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn transform_sets_reject_duplicates(a in 0usize..5, b in 0usize..5) {
        let set = TransformSet::new(vec![KINDS[a], KINDS[b]]);
        prop_assert_eq!(set.is_ok(), a != b);
        prop_assert!(TransformSet::new(vec![]).is_err());
    }

    #[test]
    fn cosine_is_bounded(u in prop::collection::vec(-5.0f64..5.0, 6), v in prop::collection::vec(-5.0f64..5.0, 6)) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
        let c = cosine_similarity(&u, &v).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
    }

    #[test]
    fn nce_loss_is_positive_and_finite(
        seed in 0u64..1000,
        k in 1usize..20,
        tau in 0.01f64..1.0,
    ) {
        use rand::Rng;
        let mut r = rng(seed);
        let mut draw = || -> Vec<f64> {
            let v: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        };
        let (a, o) = (draw(), draw());
        let negs: Vec<f64> = (0..k).flat_map(|_| draw()).collect();
        let l = nce_pair_loss(&a, &o, &Negatives { data: &negs, dim: 8 }, tau).unwrap();
        prop_assert!(l.is_finite() && l > 0.0);
    }

    #[test]
    fn memory_bank_updates_stay_unit_norm(
        seed in 0u64..1000,
        updates in prop::collection::vec((0usize..6, prop::collection::vec(-1.0f32..1.0, 5)), 1..30),
    ) {
        let mut bank = MemoryBank::random(6, 5, 0.5, &mut rng(seed));
        for (id, raw) in updates {
            prop_assume!(raw.iter().any(|x| x.abs() > 0.05));
            bank.update(id, &unit_vec(&raw)).unwrap();
        }
        prop_assert_eq!(bank.len(), 6);
        for v in bank.as_slice().chunks_exact(5) {
            let n = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn queue_size_never_exceeds_capacity(cap in 1usize..10, batches in prop::collection::vec(1usize..5, 1..20)) {
        let mut q = MomentumQueue::new(cap, 3);
        let mut pushed = 0;
        for b in batches {
            let keys: Vec<Vec<f32>> = (0..b).map(|i| unit_vec(&[1.0, i as f32, 0.5])).collect();
            q.push(&keys).unwrap();
            pushed += b;
            prop_assert_eq!(q.len(), pushed.min(cap));
        }
    }

    #[test]
    fn config_round_trips_through_toml(seed in 0u64..u64::MAX, lambda in 0.0f64..50.0, epochs in 2usize..100) {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.objective.lambda = lambda;
        cfg.schedule.total_epochs = epochs;
        cfg.schedule.warmup_epochs = 1;
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        prop_assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(cases(8))]

    #[test]
    fn encoder_features_are_finite_and_embeddings_unit(seed in 0u64..1000, t in 2usize..6) {
        let cfg = ExperimentConfig::default();
        let mut r = rng(seed);
        let enc = Encoder::<f32>::new(&cfg.encoder, &mut r).unwrap();
        let v = small_video(seed, 16, 32);
        let c = sample_clip(&v, &ClipSampleConfig::new(t, 2).unwrap(), &mut r).unwrap();
        let f = enc.encode_batch(&[&c]).unwrap();
        prop_assert_eq!(f.len(), enc.feature_dim());
        prop_assert!(f.iter().all(|x| x.is_finite()));
        // deterministic in inference mode
        prop_assert_eq!(&enc.encode_batch(&[&c]).unwrap(), &f);
        let proj = taco_core::ProjectionHead::<f32>::new(
            taco_core::encoder::ProjectionKind::Linear,
            enc.feature_dim(),
            16,
            &mut r,
        );
        let z = proj.forward(&f, 1).unwrap();
        let n = z.embeddings().iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() < 1e-6);
    }
}
