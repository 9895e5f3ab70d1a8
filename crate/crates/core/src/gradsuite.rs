//! The finite-difference suite shared by the tests and the `grad-check`
//! command: every differentiable op in isolation, then the full training
//! loss on a small detector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{BnStats, Tape, Var};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::fmf::warp_grid;
use crate::gradcheck::{check_inputs, check_params, GradReport};
use crate::losses::compute_losses;
use crate::model::Detector;
use crate::nn::Module;
use crate::synth::{generate_scene, SceneSpec};
use crate::targets::render_targets;
use crate::tensor::Tensor;
use crate::types::Pose2D;
use crate::voxel::BevGeometry;

pub const OP_TOLERANCE: f64 = 1e-5;
pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const MAX_LOSS_PARAMS: usize = 5000;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub tolerance: f64,
    pub checked: usize,
    pub max_rel_err: f64,
    pub kinks: usize,
}

impl SuiteEntry {
    fn new(name: impl Into<String>, r: GradReport, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            tolerance,
            checked: r.checked,
            max_rel_err: r.max_rel_err,
            kinks: r.kinks,
        }
    }

    /// Something was scored, every score is within tolerance, and at most a
    /// tenth as many probes were discarded at kinks.
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance && self.kinks * 10 <= self.checked
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<24} {:>5} coords  max rel err {:.2e} (< {:.0e})  kinks {}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.checked,
            self.max_rel_err,
            self.tolerance,
            self.kinks
        )
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Contracts `y` with fixed random weights so every output element matters.
fn probe(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = rand_tensor(t.shape(y), seed);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type OpFn<'a> = Box<dyn FnMut(&mut Tape, &[Var]) -> Result<Var> + 'a>;

pub fn op_suite() -> Result<Vec<SuiteEntry>> {
    let a = rand_tensor(&[3, 4], 1);
    let b = rand_tensor(&[3, 4], 2);
    let m2 = rand_tensor(&[1, 2, 3, 3], 3);
    let m3 = rand_tensor(&[1, 3, 3, 3], 4);
    let bn_x = rand_tensor(&[2, 3, 4, 4], 12);
    let bn_g = rand_tensor(&[3], 13);
    let bn_b = rand_tensor(&[3], 14);
    let bn_rows = rand_tensor(&[10, 3], 16);
    let mask: Vec<bool> = (0..10).map(|i| i % 3 != 0).collect();
    let running_mean = [0.1, -0.2, 0.3];
    let running_var = [0.5, 1.5, 2.0];
    let geom = BevGeometry {
        x_min: -4.0,
        y_min: -4.0,
        cell: 1.0,
        width: 8,
        height: 8,
    };
    let grid = warp_grid(&Pose2D::new(0.37, -0.61, 0.21), &geom);
    let mut focal_target = Tensor::from_fn([1, 2, 5, 5], |i| ((i * 37) % 11) as f64 / 11.0);
    focal_target.data_mut()[7] = 1.0;
    focal_target.data_mut()[31] = 1.0;

    let mut cases: Vec<(String, Vec<Tensor>, OpFn)> = vec![
        ("add".into(), vec![a.clone(), b.clone()], Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            probe(t, y, 9)
        })),
        ("sub".into(), vec![a.clone(), b.clone()], Box::new(|t, v| {
            let y = t.sub(v[0], v[1])?;
            probe(t, y, 9)
        })),
        ("mul".into(), vec![a.clone(), b.clone()], Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            probe(t, y, 9)
        })),
        ("scale".into(), vec![a.clone()], Box::new(|t, v| {
            let y = t.scale(v[0], -1.7);
            probe(t, y, 9)
        })),
        ("add_scalar".into(), vec![a.clone()], Box::new(|t, v| {
            let y = t.add_scalar(v[0], 0.3);
            let y = t.mul(y, y)?;
            probe(t, y, 9)
        })),
        ("abs".into(), vec![a.clone()], Box::new(|t, v| {
            let y = t.abs(v[0]);
            probe(t, y, 9)
        })),
        ("relu".into(), vec![a.clone()], Box::new(|t, v| {
            let y = t.relu(v[0]);
            probe(t, y, 9)
        })),
        ("sigmoid".into(), vec![a.clone()], Box::new(|t, v| {
            let y = t.scale(v[0], 4.0);
            let y = t.sigmoid(y);
            probe(t, y, 9)
        })),
        ("sum".into(), vec![a.clone()], Box::new(|t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.sum(y))
        })),
        ("mean".into(), vec![a.clone()], Box::new(|t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.mean(y))
        })),
        ("reshape".into(), vec![a.clone()], Box::new(|t, v| {
            let y = t.reshape(v[0], &[2, 6])?;
            probe(t, y, 9)
        })),
        ("concat_channels".into(), vec![m2.clone(), m3.clone()], Box::new(|t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            probe(t, y, 9)
        })),
        ("concat".into(), vec![m2.clone(), m2.clone()], Box::new(|t, v| {
            let y = t.concat(&[v[0], v[1]], 3)?;
            probe(t, y, 9)
        })),
        ("narrow".into(), vec![m3.clone()], Box::new(|t, v| {
            let y = t.narrow(v[0], 1, 1, 2)?;
            probe(t, y, 9)
        })),
        ("upsample_nearest".into(), vec![m2.clone()], Box::new(|t, v| {
            let y = t.upsample_nearest(v[0], 2)?;
            probe(t, y, 9)
        })),
        ("gather_pixels".into(), vec![m3.clone()], Box::new(|t, v| {
            let y = t.gather_pixels(v[0], &[(0, 0, 2), (0, 1, 1), (0, 2, 0), (0, 1, 1)])?;
            probe(t, y, 9)
        })),
        (
            "linear".into(),
            vec![rand_tensor(&[5, 3], 5), rand_tensor(&[4, 3], 6), rand_tensor(&[4], 7)],
            Box::new(|t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                probe(t, y, 9)
            }),
        ),
        ("batch_norm/batch".into(), vec![bn_x.clone(), bn_g.clone(), bn_b.clone()], Box::new(|t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], BnStats::Batch, 1e-3, None)?;
            probe(t, y, 15)
        })),
        ("batch_norm/running".into(), vec![bn_x, bn_g.clone(), bn_b.clone()], Box::new(|t, v| {
            let stats = BnStats::Running {
                mean: &running_mean,
                var: &running_var,
            };
            let (y, _) = t.batch_norm(v[0], v[1], v[2], stats, 1e-3, None)?;
            probe(t, y, 15)
        })),
        ("batch_norm/masked".into(), vec![bn_rows, bn_g, bn_b], Box::new(|t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], BnStats::Batch, 1e-3, Some(&mask))?;
            probe(t, y, 17)
        })),
        ("max_over_axis".into(), vec![rand_tensor(&[4, 5, 3], 18)], Box::new(|t, v| {
            let y = t.max_over_axis(v[0], &[5, 2, 0, 3])?;
            probe(t, y, 19)
        })),
        ("scatter_to_grid".into(), vec![rand_tensor(&[3, 2], 20)], Box::new(|t, v| {
            let y = t.scatter_to_grid(v[0], &[(0, 0), (2, 1), (1, 3)], (3, 4))?;
            probe(t, y, 21)
        })),
        ("scatter_add_to_grid".into(), vec![rand_tensor(&[3, 2], 20)], Box::new(|t, v| {
            let y = t.scatter_add_to_grid(v[0], &[(0, 0), (0, 0), (1, 3)], (3, 4), 0.5)?;
            probe(t, y, 21)
        })),
        ("bilinear_sample".into(), vec![rand_tensor(&[1, 2, 8, 8], 22)], Box::new(|t, v| {
            let y = t.bilinear_sample(v[0], &grid)?;
            probe(t, y, 23)
        })),
        ("focal_loss".into(), vec![rand_tensor(&[1, 2, 5, 5], 24)], Box::new(|t, v| {
            let z = t.sigmoid(v[0]);
            t.focal_loss(z, &focal_target, 2.0, 4.0, 2.0)
        })),
    ];
    for (stride, k) in [(1usize, 3usize), (2, 3), (1, 1), (2, 5)] {
        cases.push((
            format!("conv2d/k{k}s{stride}"),
            vec![rand_tensor(&[2, 3, 6, 6], 8), rand_tensor(&[4, 3, k, k], 9), rand_tensor(&[4], 10)],
            Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, k / 2)?;
                probe(t, y, 11)
            }),
        ));
    }
    cases
        .into_iter()
        .map(|(name, inputs, f)| {
            let r = check_inputs(&inputs, 64, 7, f)?;
            Ok(SuiteEntry::new(name, r, OP_TOLERANCE))
        })
        .collect()
}

/// A detector small enough for an exhaustive-ish parameter check.
pub fn small_loss_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.grid.x_range = (-6.4, 6.4);
    cfg.grid.y_range = (-6.4, 6.4);
    cfg.grid.cell_size = (0.8, 0.8, 6.0);
    cfg.backbone.pfn_channels = 4;
    cfg.backbone.neck_channels = vec![4, 6];
    cfg.backbone.out_channels = 6;
    cfg.head.head_channels = 4;
    cfg.augment_enabled = false;
    cfg
}

/// Checks d(total loss)/d(param) for up to `samples` coordinates of every
/// trainable tensor of the small detector, over one frame pair.
pub fn full_loss_check(samples: usize) -> Result<SuiteEntry> {
    let cfg = small_loss_config();
    let scene = generate_scene(&SceneSpec {
        num_frames: 2,
        num_objects: 3,
        range: 6.0,
        ego_speed: 1.0,
        seed: 5,
        ..Default::default()
    })?;
    let k = scene.num_classes();
    let mut model = Detector::new(&cfg.model_config(), k, 3)?;
    let n = model.num_trainable();
    if n > MAX_LOSS_PARAMS {
        return Err(Error::Config(format!(
            "gradient-check model has {n} parameters, limit {MAX_LOSS_PARAMS}"
        )));
    }
    let targets = render_targets(&scene.frames[1].gt_boxes, &model.geom, k, &cfg.targets);
    let (prev, cur) = (&scene.frames[0], &scene.frames[1]);
    let r = check_params(&mut model, samples, 25, |m, t| {
        let heads = vec![m.forward_pair(t, prev, cur, 1, true)?];
        let terms = compute_losses(t, &heads, &[&targets], &cfg.focal, &cfg.loss_weights)?;
        Ok(terms.total)
    })?;
    Ok(SuiteEntry::new(format!("full loss ({n} params)"), r, LOSS_TOLERANCE))
}
