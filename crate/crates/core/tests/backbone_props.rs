use fmfnet::autodiff::Tape;
use fmfnet::backbone::{BackboneConfig, Neck, PillarFeatureNet};
use fmfnet::config::TrainConfig;
use fmfnet::fmf::FmfConfig;
use fmfnet::model::Detector;
use fmfnet::nn::Module;
use fmfnet::tensor::Tensor;
use fmfnet::types::{Point, PointCloudFrame};
use fmfnet::voxel::{desk_pillar_config, voxelize, GridConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn frame(points: Vec<Point>) -> PointCloudFrame {
    PointCloudFrame {
        points,
        timestamp: 0.0,
        ego_pose: None,
        gt_boxes: vec![],
    }
}

fn random_points(n: usize, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Point::new(
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-2.0..2.0),
                rng.gen(),
            )
        })
        .collect()
}

fn pfn_image(pfn: &mut PillarFeatureNet, f: &PointCloudFrame, grid: &GridConfig) -> Tensor {
    let p = voxelize(f, grid, 0).unwrap();
    let mut t = Tape::new();
    let y = pfn.forward(&mut t, &p, false).unwrap();
    t.value(y).clone()
}

fn pfn(grid: &GridConfig, seed: u64) -> PillarFeatureNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PillarFeatureNet::new(grid.feature_dim(), 8, grid.mode, &mut rng)
}

#[test]
fn empty_frame_gives_zero_features() {
    let grid = desk_pillar_config();
    let mut net = pfn(&grid, 1);
    let img = pfn_image(&mut net, &frame(vec![]), &grid);
    assert_eq!(img.shape(), &[1, 8, 80, 80]);
    assert!(img.data().iter().all(|&v| v == 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut neck = Neck::new(&BackboneConfig { pfn_channels: 8, ..Default::default() }, &mut rng).unwrap();
    let mut t = Tape::new();
    let x = t.constant(img);
    for train in [false, true] {
        let y = neck.forward(&mut t, x, train).unwrap();
        assert_eq!(t.shape(y), &[1, 64, 40, 40]);
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn pillar_features_are_local() {
    let grid = desk_pillar_config();
    let mut net = pfn(&grid, 3);
    let base = random_points(400, 4);
    let mut more = base.clone();
    // Extra point in the cell containing (5.1, -3.3).
    more.push(Point::new(5.1, -3.3, 0.4, 0.9));
    let a = pfn_image(&mut net, &frame(base), &grid);
    let b = pfn_image(&mut net, &frame(more), &grid);
    let (ci, cj) = (((5.1 + 12.8) / 0.32) as usize, ((-3.3 + 12.8) / 0.32) as usize);
    for c in 0..8 {
        for y in 0..80 {
            for x in 0..80 {
                if (x, y) != (ci, cj) {
                    assert_eq!(a.at4(0, c, y, x), b.at4(0, c, y, x));
                }
            }
        }
    }
    assert!((0..8).any(|c| a.at4(0, c, cj, ci) != b.at4(0, c, cj, ci)));
}

#[test]
fn point_padding_is_invisible() {
    let mut small = desk_pillar_config();
    small.max_points_per_cell = 40;
    let mut large = small.clone();
    large.max_points_per_cell = 64;
    // Sparse enough that no cell reaches 40 points, so the caps never bind.
    let f = frame(random_points(300, 5));
    let mut net = pfn(&small, 6);
    for train in [false, true] {
        let imgs: Vec<Tensor> = [&small, &large]
            .iter()
            .map(|g| {
                let p = voxelize(&f, g, 0).unwrap();
                let mut t = Tape::new();
                let y = net.forward(&mut t, &p, train).unwrap();
                t.value(y).clone()
            })
            .collect();
        assert!(imgs[0].max_abs_diff(&imgs[1]) < 1e-12, "train={train}");
    }
}

#[test]
fn neck_is_translation_equivariant_on_interior() {
    let cfg = BackboneConfig {
        pfn_channels: 4,
        neck_channels: vec![6, 8],
        out_channels: 8,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut neck = Neck::new(&cfg, &mut rng).unwrap();
    let (h, w) = (32, 32);
    let img = Tensor::from_fn([1, 4, h, w], |_| rng.gen_range(-1.0..1.0));
    let s = neck.output_stride();
    // Shift right by s input pixels.
    let shifted = Tensor::from_fn([1, 4, h, w], |i| {
        let x = i % w;
        if x < s { 0.0 } else { img.data()[i - s] }
    });
    let mut t = Tape::new();
    let (a, b) = (t.constant(img), t.constant(shifted));
    let ya = neck.forward(&mut t, a, false).unwrap();
    let yb = neck.forward(&mut t, b, false).unwrap();
    let (ya, yb) = (t.value(ya).clone(), t.value(yb).clone());
    let (_, c, oh, ow) = ya.dims4().unwrap();
    let margin = 4;
    let mut compared = 0;
    for ch in 0..c {
        for y in margin..oh - margin {
            for x in margin..ow - margin - 1 {
                assert_eq!(ya.at4(0, ch, y, x), yb.at4(0, ch, y, x + 1), "({ch}, {y}, {x})");
                compared += 1;
            }
        }
    }
    assert!(compared >= 400);
}

#[test]
fn indivisible_input_is_shape_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut neck = Neck::new(&BackboneConfig::default(), &mut rng).unwrap();
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros([1, 32, 10, 9]));
    assert!(matches!(neck.forward(&mut t, x, false), Err(fmfnet::Error::Shape(_))));
}

#[test]
fn model_param_count_is_closed_form_and_fmf_removal_is_exact() {
    let cfg = TrainConfig::default();
    let on = Detector::new(&cfg.model_config(), 2, 0).unwrap();
    assert_eq!(on.num_trainable(), cfg.model_config().param_count(2));
    let mut off_cfg = cfg.model_config();
    off_cfg.fmf.enabled = false;
    let off = Detector::new(&off_cfg, 2, 0).unwrap();
    assert_eq!(off.num_trainable(), off_cfg.param_count(2));
    assert_eq!(
        on.num_trainable() - off.num_trainable(),
        FmfConfig::default().param_count(cfg.backbone.out_channels)
    );
}
