use fmfnet::ablation::{ablation_run, MIN_LATENCY_FRAMES};
use fmfnet::bench::bench;
use fmfnet::config::TrainConfig;
use fmfnet::model::{Detector, StageTimes};
use fmfnet::synth::{generate_dataset, SceneSpec};
use fmfnet::types::SceneSequence;
use fmfnet::Error;

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.backbone.pfn_channels = 8;
    cfg.backbone.neck_channels = vec![8, 16];
    cfg.backbone.out_channels = 16;
    cfg.head.head_channels = 8;
    cfg.max_steps = Some(3);
    cfg
}

fn data(n: usize, frames: usize, seed: u64) -> Vec<SceneSequence> {
    generate_dataset(
        &SceneSpec {
            num_frames: frames,
            ego_speed: 1.5,
            seed,
            ..Default::default()
        },
        n,
    )
    .unwrap()
}

#[test]
fn ablation_reports_both_arms() {
    let a = small_config();
    let mut b = a.clone();
    b.fmf.enabled = false;
    let report = ablation_run(&a, &b, &data(20, 2, 1), &data(5, 4, 1000)).unwrap();
    assert!(report.a.fmf_enabled && !report.b.fmf_enabled);
    assert_eq!(report.nds_delta, report.b.eval.nds - report.a.eval.nds);
    for arm in [&report.a, &report.b] {
        assert!(arm.latency.frames >= MIN_LATENCY_FRAMES);
        assert_eq!(arm.latency.stages.len(), StageTimes::STAGES.len());
        assert!((0.0..=1.0).contains(&arm.eval.nds));
    }
    assert!(report.a.param_count > report.b.param_count);
    let table = report.to_table();
    assert!(table.contains("NDS a:") && table.contains("delta"));
}

#[test]
fn identical_configs_give_identical_metrics() {
    let a = small_config();
    let report = ablation_run(&a, &a, &data(3, 2, 2), &data(2, 3, 2000)).unwrap();
    assert_eq!(report.a.eval, report.b.eval);
    assert_eq!(report.nds_delta, 0.0);
}

#[test]
fn configs_differing_outside_fmf_are_rejected() {
    let a = small_config();
    let mut b = a.clone();
    b.epochs += 1;
    let r = ablation_run(&a, &b, &data(1, 2, 3), &data(1, 2, 3));
    assert!(matches!(r, Err(Error::Usage(_))));
}

#[test]
fn bench_accounts_for_stages_and_is_deterministic() {
    let cfg = small_config();
    let model = Detector::new(&cfg.model_config(), 2, 0).unwrap();
    let scenes = data(4, 5, 4);
    let (r1, d1) = bench(&model, &scenes, Some(20)).unwrap();
    let (r2, d2) = bench(&model, &scenes, Some(20)).unwrap();
    assert_eq!(r1.single.frames, 20);
    assert_eq!(r1.parallel.frames, 20);
    assert_eq!(d1, d2);
    for r in [&r1.single, &r2.single] {
        let sum = r.stage_mean_sum();
        assert!(
            (sum - r.total.mean).abs() <= 0.1 * r.total.mean,
            "stage means {sum} vs total {}",
            r.total.mean
        );
        for (_, s) in &r.stages {
            assert!(s.p50 <= s.p99 && s.mean >= 0.0);
        }
    }
    assert!(matches!(bench(&model, &scenes, Some(0)), Err(Error::Usage(_))));
    assert!(matches!(bench(&model, &[], None), Err(Error::Usage(_))));
}
