//! The full detector: voxelizer, pillar network, neck, optional FMF block
//! and head.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{BackboneConfig, Neck, PillarFeatureNet};
use crate::decode::{decode, Detection, MatchConfig};
use crate::error::{Error, Result};
use crate::fmf::{fmf_pair, fmf_step, relative_pose, FmfConfig, FmfParams, FmfState};
use crate::head::{Head, HeadConfig, HeadMaps, HeadOutput};
use crate::nn::{Module, Param};
use crate::types::PointCloudFrame;
use crate::voxel::{voxelize, BevGeometry, GridConfig};

/// Architecture and decoding settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid: GridConfig,
    pub backbone: BackboneConfig,
    pub fmf: FmfConfig,
    pub head: HeadConfig,
    pub decode: MatchConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<BevGeometry> {
        self.backbone.validate()?;
        self.fmf.validate()?;
        let dims = self.grid.validate()?;
        let div = self.backbone.required_divisor();
        if dims.width % div != 0 || dims.height % div != 0 {
            return Err(Error::Config(format!(
                "grid {}x{} is not divisible by the neck's stride {div}",
                dims.width, dims.height
            )));
        }
        self.grid.bev_geometry(self.backbone.output_stride)
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self, num_classes: usize) -> usize {
        let c = self.backbone.out_channels;
        let fmf = if self.fmf.enabled {
            self.fmf.param_count(c)
        } else {
            0
        };
        self.backbone.param_count(self.grid.feature_dim())
            + fmf
            + self.head.param_count(c, num_classes)
    }
}

/// Wall-clock seconds per pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub voxelize: f64,
    pub backbone: f64,
    pub neck: f64,
    pub fmf: f64,
    pub head: f64,
    pub decode: f64,
    pub total: f64,
}

impl StageTimes {
    pub const STAGES: [&'static str; 6] = ["voxelize", "backbone", "neck", "fmf", "head", "decode"];

    pub fn stages(&self) -> [f64; 6] {
        [
            self.voxelize,
            self.backbone,
            self.neck,
            self.fmf,
            self.head,
            self.decode,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub num_classes: usize,
    pub geom: BevGeometry,
    pub pfn: PillarFeatureNet,
    pub neck: Neck,
    pub fmf: Option<FmfParams>,
    pub head: Head,
}

/// Output of one inference step.
#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub maps: HeadMaps,
    pub detections: Vec<Detection>,
    pub times: StageTimes,
}

impl Detector {
    pub fn new(cfg: &ModelConfig, num_classes: usize, seed: u64) -> Result<Self> {
        let geom = cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pfn = PillarFeatureNet::new(
            cfg.grid.feature_dim(),
            cfg.backbone.pfn_channels,
            cfg.grid.mode,
            &mut rng,
        );
        let neck = Neck::new(&cfg.backbone, &mut rng)?;
        let c = cfg.backbone.out_channels;
        let fmf = cfg
            .fmf
            .enabled
            .then(|| FmfParams::new(c, cfg.fmf.kernel_size, &mut rng));
        let head = Head::new(&cfg.head, c, num_classes, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            num_classes,
            geom,
            pfn,
            neck,
            fmf,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.num_trainable()
    }

    /// Voxelize, pillar network and neck for one frame.
    pub fn bev_features(
        &mut self,
        tape: &mut Tape,
        frame: &PointCloudFrame,
        voxel_seed: u64,
        train: bool,
    ) -> Result<Var> {
        let pillars = voxelize(frame, &self.cfg.grid, voxel_seed)?;
        let pseudo = self.pfn.forward(tape, &pillars, train)?;
        self.neck.forward(tape, pseudo, train)
    }

    /// Training forward over a frame pair `(t-1, t)`; gradients reach both
    /// frames' feature extraction through the fusion block.
    pub fn forward_pair(
        &mut self,
        tape: &mut Tape,
        prev: &PointCloudFrame,
        cur: &PointCloudFrame,
        voxel_seed: u64,
        train: bool,
    ) -> Result<HeadOutput> {
        let current = self.bev_features(tape, cur, voxel_seed, train)?;
        let fused = if self.fmf.is_some() {
            let previous = self.bev_features(tape, prev, voxel_seed ^ 0x9e37_79b9, train)?;
            let rel = if self.cfg.fmf.use_odometry {
                relative_pose(prev.ego_pose, cur.ego_pose)
            } else {
                None
            };
            let geom = self.geom;
            let params = self.fmf.as_mut().expect("checked");
            fmf_pair(tape, current, previous, rel.as_ref(), &geom, params, train)?
        } else {
            current
        };
        self.head.forward(tape, fused)
    }

    /// Eval-mode inference of one frame, threading the recurrent state.
    pub fn infer_frame(
        &mut self,
        frame: &PointCloudFrame,
        state: &FmfState,
        voxel_seed: u64,
    ) -> Result<(FrameOutput, FmfState)> {
        let start = Instant::now();
        let mut times = StageTimes::default();
        let mut tape = Tape::new();
        let t = Instant::now();
        let pillars = voxelize(frame, &self.cfg.grid, voxel_seed)?;
        times.voxelize = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let pseudo = self.pfn.forward(&mut tape, &pillars, false)?;
        times.backbone = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let bev = self.neck.forward(&mut tape, pseudo, false)?;
        times.neck = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let (fused, next) = match self.fmf.as_mut() {
            Some(params) => fmf_step(
                &mut tape,
                bev,
                state,
                params,
                frame.ego_pose,
                self.cfg.fmf.use_odometry,
                &self.geom,
                false,
            )?,
            None => (bev, FmfState::default()),
        };
        times.fmf = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let out = self.head.forward(&mut tape, fused)?;
        let maps = out.maps(&tape);
        times.head = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let detections = decode(&maps, &self.geom, &self.cfg.decode)?;
        times.decode = t.elapsed().as_secs_f64();
        times.total = start.elapsed().as_secs_f64();
        Ok((
            FrameOutput {
                maps,
                detections,
                times,
            },
            next,
        ))
    }

    /// Runs a whole sequence in frame order from a cold state.
    pub fn infer_sequence(&mut self, frames: &[PointCloudFrame]) -> Result<Vec<FrameOutput>> {
        let mut state = FmfState::default();
        let mut out = Vec::with_capacity(frames.len());
        for (i, f) in frames.iter().enumerate() {
            let (o, next) = self.infer_frame(f, &state, i as u64)?;
            state = next;
            out.push(o);
        }
        Ok(out)
    }
}

impl Module for Detector {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.pfn.visit(f);
        self.neck.visit(f);
        if let Some(p) = &self.fmf {
            p.visit(f);
        }
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.pfn.visit_mut(f);
        self.neck.visit_mut(f);
        if let Some(p) = &mut self.fmf {
            p.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}
