use fmfnet::augment::{AugmentConfig, AugmentParams};
use fmfnet::checkpoint::Checkpoint;
use fmfnet::config::TrainConfig;
use fmfnet::io::{read_detections, write_detections};
use fmfnet::nn::Module;
use fmfnet::pipeline::{infer_dataset, to_records};
use fmfnet::synth::{generate_dataset, generate_scene, SceneSpec};
use fmfnet::targets::{render_targets, TargetConfig};
use fmfnet::train::{total_steps, trace_csv, train, training_pairs, TRACE_HEADER};
use fmfnet::types::SceneSequence;
use fmfnet::voxel::{desk_pillar_config, voxelize};
use fmfnet::Error;

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.backbone.pfn_channels = 8;
    cfg.backbone.neck_channels = vec![8, 16];
    cfg.backbone.out_channels = 16;
    cfg.head.head_channels = 8;
    cfg.max_steps = Some(10);
    cfg.seed = 1;
    cfg
}

fn scenes(n: usize, seed: u64) -> Vec<SceneSequence> {
    generate_dataset(
        &SceneSpec {
            num_frames: 3,
            ego_speed: 1.0,
            seed,
            ..Default::default()
        },
        n,
    )
    .unwrap()
}

#[test]
fn voxelization_is_bit_identical() {
    let s = scenes(1, 3);
    let grid = desk_pillar_config();
    for f in &s[0].frames {
        let a = voxelize(f, &grid, 42).unwrap().to_bytes();
        let b = voxelize(f, &grid, 42).unwrap().to_bytes();
        assert_eq!(a, b);
    }
}

#[test]
fn loss_trace_is_reproducible() {
    let cfg = small_config();
    let data = scenes(2, 4);
    let a = train(&cfg, &data, None).unwrap();
    let b = train(&cfg, &data, None).unwrap();
    assert_eq!(a.trace.len(), 10);
    let bits = |t: &[fmfnet::train::TraceRow]| -> Vec<u64> {
        t.iter()
            .flat_map(|r| [r.lr, r.heatmap, r.offset, r.size, r.height, r.rotation, r.velocity, r.total])
            .map(f64::to_bits)
            .collect()
    };
    assert_eq!(bits(&a.trace), bits(&b.trace));
    assert!(a.trace.iter().all(|r| r.total.is_finite()));
    let csv = trace_csv(&a.trace);
    assert_eq!(csv.lines().next(), Some(TRACE_HEADER));
    assert_eq!(csv.lines().count(), 11);
}

#[test]
fn detection_files_are_identical_across_runs() {
    let mut cfg = small_config();
    cfg.decode.score_threshold = 0.0;
    let data = scenes(2, 5);
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for run in 0..2 {
        let mut out = train(&cfg, &data, None).unwrap();
        let dets: Vec<_> = infer_dataset(&mut out.model, &data)
            .unwrap()
            .into_iter()
            .map(|o| o.detections)
            .collect();
        let path = dir.path().join(format!("dets{run}.jsonl"));
        write_detections(&to_records(&dets, &out.class_names).unwrap(), &path).unwrap();
        files.push(std::fs::read(&path).unwrap());
        assert_eq!(read_detections(&path).unwrap().len(), dets.iter().map(Vec::len).sum::<usize>());
    }
    assert!(!files[0].is_empty());
    assert_eq!(files[0], files[1]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = small_config();
    let data = scenes(1, 6);
    let out = train(&cfg, &data, None).unwrap();
    let ckpt = out.checkpoint(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.step, 10);
    let mut before = out.model.clone();
    let mut after = loaded.restore().unwrap();
    let a = before.infer_sequence(&data[0].frames).unwrap();
    let b = after.infer_sequence(&data[0].frames).unwrap();
    for (x, y) in a.iter().zip(&b) {
        for (p, q) in [
            (&x.maps.heatmap, &y.maps.heatmap),
            (&x.maps.offset, &y.maps.offset),
            (&x.maps.size, &y.maps.size),
            (&x.maps.rotation, &y.maps.rotation),
            (&x.maps.velocity, &y.maps.velocity),
            (&x.maps.height, &y.maps.height),
        ] {
            let pb: Vec<u64> = p.data().iter().map(|v| v.to_bits()).collect();
            let qb: Vec<u64> = q.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(pb, qb);
        }
        assert_eq!(x.detections, y.detections);
    }
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"format_version\": 1").unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
    let cfg = small_config();
    let out = train(&cfg, &scenes(1, 7), None).unwrap();
    let mut ckpt = out.checkpoint(&cfg);
    ckpt.params.pop();
    assert!(matches!(ckpt.restore(), Err(Error::State(_))));
}

#[test]
fn disabling_fmf_trains_without_fusion_params() {
    let mut cfg = small_config();
    cfg.fmf.enabled = false;
    cfg.max_steps = Some(2);
    let out = train(&cfg, &scenes(1, 8), None).unwrap();
    assert!(out.model.fmf.is_none());
    assert_eq!(out.model.num_trainable(), cfg.model_config().param_count(2));
}

#[test]
fn huge_learning_rate_is_reported_as_divergence() {
    let mut cfg = small_config();
    cfg.lr_init = 1e250;
    cfg.grad_clip = None;
    cfg.max_steps = Some(30);
    match train(&cfg, &scenes(1, 9), None) {
        Err(Error::Divergence { step, .. }) => assert!(step > 0),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training did not diverge"),
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let cfg = small_config();
    assert!(matches!(train(&cfg, &[], None), Err(Error::Data(_))));
    let mut bad = cfg.clone();
    bad.lr_init = 0.0;
    assert!(matches!(train(&bad, &scenes(1, 1), None), Err(Error::Config(_))));
    let mut bad = cfg.clone();
    bad.momentum_range = (0.9, 1.2);
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn pairs_and_step_counts() {
    let data = scenes(3, 10);
    let pairs = training_pairs(&data);
    assert_eq!(pairs.len(), 9);
    let mut cfg = TrainConfig::default();
    cfg.epochs = 4;
    assert_eq!(total_steps(&cfg, pairs.len()), 4 * 5);
    cfg.max_steps = Some(7);
    assert_eq!(total_steps(&cfg, pairs.len()), 7);
}

#[test]
fn flips_commute_with_target_rendering() {
    let geom = desk_pillar_config().bev_geometry(2).unwrap();
    let tc = TargetConfig::default();
    let (w, h) = (geom.width, geom.height);
    for seed in 0..10 {
        let scene = generate_scene(&SceneSpec {
            num_frames: 1,
            num_objects: 4,
            seed,
            ..Default::default()
        })
        .unwrap();
        let f = &scene.frames[0];
        let k = scene.num_classes();
        let base = render_targets(&f.gt_boxes, &geom, k, &tc);
        for (fx, fy) in [(true, false), (false, true), (true, true)] {
            let p = AugmentParams {
                flip_x: fx,
                flip_y: fy,
                ..AugmentParams::IDENTITY
            };
            let aug = p.apply(f);
            let got = render_targets(&aug.gt_boxes, &geom, k, &tc);
            for c in 0..k {
                for y in 0..h {
                    for x in 0..w {
                        let sx = if fy { w - 1 - x } else { x };
                        let sy = if fx { h - 1 - y } else { y };
                        assert_eq!(
                            got.heatmap.at4(0, c, y, x),
                            base.heatmap.at4(0, c, sy, sx),
                            "seed {seed} flips ({fx}, {fy})"
                        );
                    }
                }
            }
            assert_eq!(got.centers.len(), base.centers.len());
            for (g, b) in got.centers.iter().zip(&base.centers) {
                let (bi, bj) = b.pixel;
                let want = (if fy { w - 1 - bi } else { bi }, if fx { h - 1 - bj } else { bj });
                assert_eq!(g.pixel, want);
                assert_eq!(g.size, b.size);
                assert!((g.rotation[0].hypot(g.rotation[1]) - 1.0).abs() < 1e-12);
            }
            // Points stay with their boxes.
            for (ab, ob) in aug.gt_boxes.iter().zip(&f.gt_boxes) {
                assert_eq!((ab.w, ab.l, ab.h), (ob.w, ob.l, ob.h));
            }
        }
    }
    assert!(AugmentConfig::default().validate().is_ok());
}
