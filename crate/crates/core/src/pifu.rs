//! Pixel-aligned implicit SDF field.
//!
//! A convolutional encoder turns the conditioning rasters (any subset of
//! image / normal / depth) into a feature map at `out_stride` resolution; a
//! skip-MLP decoder maps (bilinearly sampled feature ⊕ query depth) to one
//! signed distance. Sign convention: positive outside the surface (in front,
//! toward the viewer), negative inside.
//!
//! Geometry lives in world units throughout: query points in [-1, 1]^3,
//! features indexed through the camera's continuous pixel coordinates
//! divided by the encoder stride, so a feature texel sits exactly on the
//! input pixel it is centred on.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ckpt::{load_checkpoint, save_checkpoint, CkptError};
use crate::diffcore::{Adam, Element, ParamStore, Tape, Tensor, Var};
use crate::geometry::{DepthMap, GeomError, ImageMap, NormalMap, OrthoCamera, Vec3};
use crate::nets::{EncoderConfig, Mlp, MlpConfig, PixelEncoder};
use crate::seed;
use crate::synthdata::{AnalyticShape, LoadedSample};

/// Std-dev of the Gaussian that scatters surface samples, world units (3 cm).
pub const NEAR_SIGMA: f64 = 0.03;
/// Supervised regression labels are clamped to this band around the surface.
pub const LABEL_CLAMP: f64 = 0.1;
/// Longest distance representable inside the [-1, 1]^3 volume.
pub const MAX_ABS_LABEL: f64 = 3.4641016151377544; // 2 * sqrt(3)

#[derive(Debug, Error)]
pub enum PifuError {
    #[error("conditioning raster missing for {0}")]
    MissingChannel(&'static str),
    #[error("conditioning cameras disagree")]
    CameraMismatch,
    #[error("conditioning masks disagree")]
    MaskMismatch,
    #[error("conditioning has {got} channels, field expects {want}")]
    ChannelMismatch { got: usize, want: usize },
    #[error("unknown input mode {0:?} (expected one of I N D IN ID ND IND)")]
    UnknownMode(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which rasters condition the field. The short codes (`I`, `ND`, ...) are
/// the external names used by checkpoints and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputMode {
    #[serde(rename = "I")]
    Image,
    #[serde(rename = "N")]
    Normal,
    #[serde(rename = "D")]
    Depth,
    #[serde(rename = "IN")]
    ImageNormal,
    #[serde(rename = "ID")]
    ImageDepth,
    #[serde(rename = "ND")]
    NormalDepth,
    #[serde(rename = "IND")]
    ImageNormalDepth,
}

/// All modes in the ablation order used by reports: depth-free first.
pub const ALL_MODES: [InputMode; 7] = [
    InputMode::Image,
    InputMode::Normal,
    InputMode::ImageNormal,
    InputMode::Depth,
    InputMode::ImageDepth,
    InputMode::NormalDepth,
    InputMode::ImageNormalDepth,
];

impl InputMode {
    pub fn code(self) -> &'static str {
        match self {
            InputMode::Image => "I",
            InputMode::Normal => "N",
            InputMode::Depth => "D",
            InputMode::ImageNormal => "IN",
            InputMode::ImageDepth => "ID",
            InputMode::NormalDepth => "ND",
            InputMode::ImageNormalDepth => "IND",
        }
    }

    pub fn uses_image(self) -> bool {
        matches!(
            self,
            InputMode::Image
                | InputMode::ImageNormal
                | InputMode::ImageDepth
                | InputMode::ImageNormalDepth
        )
    }

    pub fn uses_normal(self) -> bool {
        matches!(
            self,
            InputMode::Normal
                | InputMode::ImageNormal
                | InputMode::NormalDepth
                | InputMode::ImageNormalDepth
        )
    }

    pub fn uses_depth(self) -> bool {
        matches!(
            self,
            InputMode::Depth
                | InputMode::ImageDepth
                | InputMode::NormalDepth
                | InputMode::ImageNormalDepth
        )
    }

    /// Conditioning channel count: image and normal carry three planes,
    /// depth carries its value plane plus the mask plane.
    pub fn channels(self) -> usize {
        let mut c = 0;
        if self.uses_image() {
            c += 3;
        }
        if self.uses_normal() {
            c += 3;
        }
        if self.uses_depth() {
            c += 2;
        }
        c
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for InputMode {
    type Err = PifuError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "I" => Ok(InputMode::Image),
            "N" => Ok(InputMode::Normal),
            "D" => Ok(InputMode::Depth),
            "IN" => Ok(InputMode::ImageNormal),
            "ID" => Ok(InputMode::ImageDepth),
            "ND" => Ok(InputMode::NormalDepth),
            "IND" => Ok(InputMode::ImageNormalDepth),
            _ => Err(PifuError::UnknownMode(s.to_string())),
        }
    }
}

/// Stacks the rasters selected by `mode` into a `[C, H, W]` tensor, in
/// image / normal / depth order. Rasters keep their native background
/// conventions (zeros off-mask, depth sentinel), so the mask is recoverable
/// from any mode.
pub fn conditioning_tensor<T: Element>(
    mode: InputMode,
    image: Option<&ImageMap>,
    normal: Option<&NormalMap>,
    depth: Option<&DepthMap>,
) -> Result<(Tensor<T>, OrthoCamera), PifuError> {
    let mut cameras: Vec<&OrthoCamera> = Vec::new();
    let mut masks: Vec<&[u8]> = Vec::new();
    let mut planes: Vec<f64> = Vec::new();
    if mode.uses_image() {
        let m = image.ok_or(PifuError::MissingChannel("image"))?;
        cameras.push(&m.camera);
        masks.push(m.mask());
        planes.extend_from_slice(m.planes());
    }
    if mode.uses_normal() {
        let m = normal.ok_or(PifuError::MissingChannel("normal"))?;
        cameras.push(&m.camera);
        masks.push(m.mask());
        planes.extend_from_slice(m.planes());
    }
    if mode.uses_depth() {
        let m = depth.ok_or(PifuError::MissingChannel("depth"))?;
        cameras.push(&m.camera);
        masks.push(m.mask());
        planes.extend_from_slice(m.depth_raster());
        planes.extend(m.mask().iter().map(|&v| v as f64));
    }
    let cam = cameras[0].clone();
    if cameras.iter().any(|c| **c != cam) {
        return Err(PifuError::CameraMismatch);
    }
    if masks.iter().any(|m| *m != masks[0]) {
        return Err(PifuError::MaskMismatch);
    }
    let data = planes.iter().map(|&v| T::from_f64(v)).collect();
    Ok((Tensor::new(vec![mode.channels(), cam.height, cam.width], data), cam))
}

/// Encoder + decoder shapes for one field instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldConfig {
    pub input_mode: InputMode,
    pub encoder: EncoderConfig,
    pub decoder: MlpConfig,
}

impl FieldConfig {
    /// Desk scale at an arbitrary feature width `c`: decoder widths scale
    /// with the encoder, skips feed the second and third weight layers.
    pub fn desk_width(input_mode: InputMode, c: usize) -> Self {
        Self {
            input_mode,
            encoder: EncoderConfig::desk(input_mode.channels(), c),
            decoder: MlpConfig {
                widths: vec![c + 1, 2 * c, 2 * c, c, 1],
                skip_layers: vec![1, 2],
            },
        }
    }

    /// Default desk scale: 64 feature channels, decoder {65,128,128,64,1}.
    pub fn desk(input_mode: InputMode) -> Self {
        Self::desk_width(input_mode, 64)
    }

    /// Published scale: stride-4 encoder to 256 channels, decoder
    /// {257,512,256,128,1} with the same skip wiring.
    pub fn paper_scale(input_mode: InputMode) -> Self {
        Self {
            input_mode,
            encoder: EncoderConfig::large(input_mode.channels(), 256),
            decoder: MlpConfig {
                widths: vec![257, 512, 256, 128, 1],
                skip_layers: vec![1, 2],
            },
        }
    }
}

/// Encoded conditioning: the feature raster plus enough camera state to
/// project query points into it.
#[derive(Debug, Clone)]
pub struct FeatureMap<T: Element> {
    pub data: Tensor<T>,
    pub camera: OrthoCamera,
    pub stride: usize,
}

impl<T: Element> FeatureMap<T> {
    /// Bilinear feature lookup at continuous *input-pixel* coordinates,
    /// clamped to the border. Integer multiples of the stride land exactly
    /// on feature texels.
    pub fn sample(&self, u: f64, v: f64) -> Vec<f64> {
        let sh = self.data.shape();
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let x = u / self.stride as f64;
        let y = v / self.stride as f64;
        let x0f = x.floor();
        let y0f = y.floor();
        let (fx, fy) = (x - x0f, y - y0f);
        let clampi = |v: f64, hi: usize| -> usize { (v.max(0.0) as usize).min(hi - 1) };
        let (x0, x1) = (clampi(x0f, w), clampi(x0f + 1.0, w));
        let (y0, y1) = (clampi(y0f, h), clampi(y0f + 1.0, h));
        let d = self.data.data();
        (0..c)
            .map(|ci| {
                let base = ci * h * w;
                let v00 = d[base + y0 * w + x0].to_f64();
                let v01 = d[base + y0 * w + x1].to_f64();
                let v10 = d[base + y1 * w + x0].to_f64();
                let v11 = d[base + y1 * w + x1].to_f64();
                (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
            })
            .collect()
    }
}

/// `[N, 2]` feature-texel coordinates of world points under `camera`.
pub fn feature_coords<T: Element>(
    camera: &OrthoCamera,
    stride: usize,
    points: &[Vec3],
) -> Tensor<T> {
    let s = stride as f64;
    let mut data = Vec::with_capacity(2 * points.len());
    for p in points {
        let (u, v, _) = camera.project(*p);
        data.push(T::from_f64(u / s));
        data.push(T::from_f64(v / s));
    }
    Tensor::new(vec![points.len(), 2], data)
}

/// `[N, 1]` query depth column.
pub fn z_coords<T: Element>(points: &[Vec3]) -> Tensor<T> {
    let data = points.iter().map(|p| T::from_f64(p[2])).collect();
    Tensor::new(vec![points.len(), 1], data)
}

fn assert_points_in_volume(points: &[Vec3]) {
    for p in points {
        assert!(
            p.iter().all(|c| c.abs() <= 1.0 + 1e-9),
            "query point {p:?} outside [-1,1]^3"
        );
    }
}

/// Samples the on-tape feature map at the query projections and decodes
/// (feature ⊕ z) to `[N, 1]` signed distances. Gradients flow into the
/// feature map (if it is not a constant) and the decoder parameters.
pub fn decode_on_tape<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    decoder: &Mlp,
    fm: Var,
    camera: &OrthoCamera,
    stride: usize,
    points: &[Vec3],
) -> Var {
    assert_points_in_volume(points);
    let coords = feature_coords::<T>(camera, stride, points);
    let feat = tape.grid_sample(fm, &coords);
    let z = tape.constant(z_coords::<T>(points));
    let x = tape.concat(&[feat, z], 1);
    decoder.forward(tape, store, x)
}

/// Full conditioning -> SDF forward pass on one tape.
pub fn field_forward_on_tape<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    encoder: &PixelEncoder,
    decoder: &Mlp,
    cond: &Tensor<T>,
    camera: &OrthoCamera,
    points: &[Vec3],
) -> Var {
    let x = tape.constant(cond.clone());
    let fm = encoder.forward(tape, store, x);
    decode_on_tape(tape, store, decoder, fm, camera, encoder.config.out_stride, points)
}

/// The implicit field: encoder, decoder and their parameters.
#[derive(Clone)]
pub struct ImplicitField {
    pub config: FieldConfig,
    pub encoder: PixelEncoder,
    pub decoder: Mlp,
    pub store: ParamStore<f32>,
}

impl ImplicitField {
    pub fn init(config: FieldConfig, seed_root: u64) -> Self {
        assert_eq!(
            config.decoder.widths[0],
            config.encoder.width + 1,
            "decoder input width must be feature channels + 1"
        );
        assert_eq!(config.encoder.in_ch, config.input_mode.channels(), "encoder channel plan");
        assert_eq!(*config.decoder.widths.last().unwrap(), 1, "decoder must output one scalar");
        let mut store = ParamStore::new();
        let mut rng = seed::rng(seed_root, "field-init");
        let encoder = PixelEncoder::register(&mut store, &mut rng, "enc", config.encoder.clone());
        let decoder = Mlp::register(&mut store, &mut rng, "dec", config.decoder.clone());
        Self { config, encoder, decoder, store }
    }

    /// Runs the encoder once; the returned map answers any number of
    /// queries against this conditioning.
    pub fn encode(
        &self,
        cond: &Tensor<f32>,
        camera: &OrthoCamera,
    ) -> Result<FeatureMap<f32>, PifuError> {
        let sh = cond.shape();
        if sh[0] != self.config.encoder.in_ch {
            return Err(PifuError::ChannelMismatch {
                got: sh[0],
                want: self.config.encoder.in_ch,
            });
        }
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(cond.clone());
        let fm = self.encoder.forward(&mut tape, &self.store, x);
        Ok(FeatureMap {
            data: tape.value(fm).clone(),
            camera: camera.clone(),
            stride: self.config.encoder.out_stride,
        })
    }

    /// Convenience wrapper: build the conditioning for this field's mode
    /// from whole maps and encode it.
    pub fn encode_maps(
        &self,
        image: Option<&ImageMap>,
        normal: Option<&NormalMap>,
        depth: Option<&DepthMap>,
    ) -> Result<FeatureMap<f32>, PifuError> {
        let (cond, cam) = conditioning_tensor::<f32>(self.config.input_mode, image, normal, depth)?;
        self.encode(&cond, &cam)
    }

    /// Signed distances at `points`. Evaluating points one by one or in one
    /// batch is bitwise identical; order is preserved.
    pub fn eval_sdf(&self, fm: &FeatureMap<f32>, points: &[Vec3]) -> Vec<f64> {
        if points.is_empty() {
            return Vec::new();
        }
        let mut tape = Tape::<f32>::new();
        let fm_var = tape.constant(fm.data.clone());
        let out = decode_on_tape(
            &mut tape,
            &self.store,
            &self.decoder,
            fm_var,
            &fm.camera,
            fm.stride,
            points,
        );
        tape.value(out).data().iter().map(|v| v.to_f64()).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), PifuError> {
        let meta = serde_json::json!({
            "kind": "pixel-aligned-sdf",
            "input_mode": self.config.input_mode,
            "config": self.config,
        });
        Ok(save_checkpoint(dir, &meta, &self.store)?)
    }

    pub fn load(dir: &Path) -> Result<Self, PifuError> {
        let (meta, store) = load_checkpoint::<f32>(dir)?;
        let config: FieldConfig =
            serde_json::from_value(meta["config"].clone()).expect("checkpoint missing field config");
        let mut scratch = ParamStore::<f32>::new();
        let mut rng = seed::rng(0, "rebuild");
        let encoder = PixelEncoder::register(&mut scratch, &mut rng, "enc", config.encoder.clone());
        let decoder = Mlp::register(&mut scratch, &mut rng, "dec", config.decoder.clone());
        for (name, t, _) in scratch.iter() {
            assert!(store.contains(name), "checkpoint missing parameter {name}");
            assert_eq!(store.get(name).shape(), t.shape(), "checkpoint shape mismatch for {name}");
        }
        Ok(Self { config, encoder, decoder, store })
    }
}

/// Anything that answers batched signed-distance queries at world points.
pub trait SdfQuery {
    fn eval_batch(&self, points: &[Vec3]) -> Vec<f64>;
}

/// A frozen field bound to one encoded conditioning.
pub struct FieldQuery<'a> {
    pub field: &'a ImplicitField,
    pub fm: &'a FeatureMap<f32>,
}

impl SdfQuery for FieldQuery<'_> {
    fn eval_batch(&self, points: &[Vec3]) -> Vec<f64> {
        self.field.eval_sdf(self.fm, points)
    }
}

impl SdfQuery for AnalyticShape {
    fn eval_batch(&self, points: &[Vec3]) -> Vec<f64> {
        points.iter().map(|&p| self.sdf(p)).collect()
    }
}

/// Adapter for closures, mainly for oracles in tests.
pub struct FnQuery<F: Fn(&[Vec3]) -> Vec<f64>>(pub F);

impl<F: Fn(&[Vec3]) -> Vec<f64>> SdfQuery for FnQuery<F> {
    fn eval_batch(&self, points: &[Vec3]) -> Vec<f64> {
        (self.0)(points)
    }
}

/// Query points with their signed-distance labels. `sign_valid[i]` says the
/// label's sign is trustworthy, so the opposite-sign penalty may gate on it.
#[derive(Debug, Clone)]
pub struct SdfSampleBatch {
    pub points: Vec<Vec3>,
    pub labels: Vec<f64>,
    pub sign_valid: Vec<bool>,
}

impl SdfSampleBatch {
    pub fn new(points: Vec<Vec3>, labels: Vec<f64>, sign_valid: Vec<bool>) -> Self {
        assert_eq!(points.len(), labels.len());
        assert_eq!(points.len(), sign_valid.len());
        assert_points_in_volume(&points);
        for &l in &labels {
            assert!(l.abs() <= MAX_ABS_LABEL, "label {l} exceeds the volume diameter");
        }
        Self { points, labels, sign_valid }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Near-surface share of a supervised batch: ceil(15/16 · n).
pub fn near_surface_count(n: usize) -> usize {
    (15 * n).div_ceil(16)
}

/// Draws the supervised training batch for one shape: `near_surface_count`
/// surface points scattered by an isotropic Gaussian (σ = `NEAR_SIGMA`),
/// the remainder uniform over the volume, every label evaluated with the
/// shape's own SDF. Near-surface points come first.
pub fn sample_supervised_batch(shape: &AnalyticShape, n: usize, seed: u64) -> SdfSampleBatch {
    assert!(n >= 2, "batch needs at least one point of each kind");
    let mut rng = seed::rng(seed, "supervised-batch");
    let n_near = near_surface_count(n);
    let gauss = Normal::new(0.0, NEAR_SIGMA).expect("valid sigma");
    let mut points = Vec::with_capacity(n);
    for p in shape.surface_samples(n_near, &mut rng) {
        let q = [
            (p[0] + gauss.sample(&mut rng)).clamp(-1.0, 1.0),
            (p[1] + gauss.sample(&mut rng)).clamp(-1.0, 1.0),
            (p[2] + gauss.sample(&mut rng)).clamp(-1.0, 1.0),
        ];
        points.push(q);
    }
    for _ in n_near..n {
        points.push([
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ]);
    }
    let labels: Vec<f64> = points.iter().map(|&p| shape.sdf(p)).collect();
    let sign_valid = vec![true; n];
    SdfSampleBatch::new(points, labels, sign_valid)
}

/// L1 regression plus opposite-sign penalty:
/// mean|s - s*| + λ_m · mean(|s - s*| · M), M = 1 iff signs disagree and the
/// label's sign is valid. Straight-line reference route.
pub fn sdf_loss(preds: &[f64], labels: &[f64], sign_valid: &[bool], lambda_m: f64) -> f64 {
    assert_eq!(preds.len(), labels.len());
    assert_eq!(preds.len(), sign_valid.len());
    assert!(!preds.is_empty());
    let n = preds.len() as f64;
    let mut l1 = 0.0;
    let mut pen = 0.0;
    for i in 0..preds.len() {
        let d = (preds[i] - labels[i]).abs();
        l1 += d;
        if sign_valid[i] && preds[i] * labels[i] < 0.0 {
            pen += d;
        }
    }
    l1 / n + lambda_m * pen / n
}

/// Tape route of [`sdf_loss`]. The sign gate is recomputed from the current
/// forward values and enters the graph as a constant, so gradients flow
/// through the L1 terms only.
pub fn sdf_loss_on_tape<T: Element>(
    tape: &mut Tape<T>,
    preds: Var,
    labels: &[f64],
    sign_valid: &[bool],
    lambda_m: f64,
) -> Var {
    let n = labels.len();
    assert_eq!(tape.shape(preds), &[n, 1], "predictions must be [N, 1]");
    let gate: Vec<T> = {
        let pv = tape.value(preds).data();
        (0..n)
            .map(|i| {
                if sign_valid[i] && pv[i].to_f64() * labels[i] < 0.0 {
                    T::ONE
                } else {
                    T::ZERO
                }
            })
            .collect()
    };
    let lab = tape.constant(Tensor::new(
        vec![n, 1],
        labels.iter().map(|&v| T::from_f64(v)).collect(),
    ));
    let gate = tape.constant(Tensor::new(vec![n, 1], gate));
    let diff = tape.sub(preds, lab);
    let diff = tape.abs(diff);
    let l1 = tape.mean(diff);
    let gated = tape.mul(diff, gate);
    let pen = tape.mean(gated);
    let pen = tape.scale(pen, lambda_m);
    tape.add(l1, pen)
}

/// Occupancy IoU of a predicted SDF against a reference SDF, Monte Carlo
/// over uniform volume samples. Used as the per-epoch training probe.
pub fn montecarlo_iou<F, G>(pred_sdf: F, ref_sdf: G, n: usize, seed: u64) -> f64
where
    F: Fn(&[Vec3]) -> Vec<f64>,
    G: Fn(Vec3) -> f64,
{
    let mut rng = seed::rng(seed, "iou-probe");
    let points: Vec<Vec3> = (0..n)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();
    let pv = pred_sdf(&points);
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, &s) in points.iter().zip(&pv) {
        let a = s < 0.0;
        let b = ref_sdf(*p) < 0.0;
        if a && b {
            inter += 1;
        }
        if a || b {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PifuTrainConfig {
    pub input_mode: InputMode,
    /// Encoder feature channels; decoder widths scale with it.
    pub width: usize,
    pub epochs: usize,
    /// Fresh SDF samples drawn per image per visit.
    pub points_per_image: usize,
    pub lr: f64,
    pub lambda_m: f64,
    pub label_clamp: f64,
    pub seed: u64,
    /// Monte Carlo samples for the per-epoch IoU probe; 0 disables probing.
    pub probe_points: usize,
}

impl PifuTrainConfig {
    /// Small setting sized for single-core runs.
    pub fn desk(input_mode: InputMode) -> Self {
        Self {
            input_mode,
            width: 16,
            epochs: 30,
            points_per_image: 512,
            lr: 1e-3,
            lambda_m: 1.0,
            label_clamp: LABEL_CLAMP,
            seed: 0,
            probe_points: 2000,
        }
    }

    /// Published setting: 100 epochs of Adam at 1e-4, 8000 points per view.
    pub fn paper_scale(input_mode: InputMode) -> Self {
        Self {
            input_mode,
            width: 256,
            epochs: 100,
            points_per_image: 8000,
            lr: 1e-4,
            lambda_m: 1.0,
            label_clamp: LABEL_CLAMP,
            seed: 0,
            probe_points: 8000,
        }
    }

    fn field_config(&self) -> FieldConfig {
        FieldConfig::desk_width(self.input_mode, self.width)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PifuLogEntry {
    pub epoch: usize,
    pub loss: f64,
    pub train_iou: Option<f64>,
    pub test_iou: Option<f64>,
}

/// Mean Monte Carlo IoU of a field against the known shape of each sample,
/// conditioning on the sample's own rasters.
pub fn mean_probe_iou(field: &ImplicitField, samples: &[LoadedSample], n: usize, seed: u64) -> f64 {
    let mut acc = 0.0;
    for s in samples {
        let fm = field
            .encode_maps(Some(&s.image), Some(&s.normal), Some(&s.depth))
            .expect("dataset rasters are consistent");
        acc += montecarlo_iou(|pts| field.eval_sdf(&fm, pts), |p| s.shape.sdf(p), n, seed);
    }
    acc / samples.len() as f64
}

/// Supervised regression of the field against analytic SDF labels. One Adam
/// step per image visit with a fresh point batch each time; labels are
/// clamped to ±`label_clamp` before the loss. Logs the epoch loss and, when
/// probing is on, mean train/test IoU. When `out_dir` is given, writes
/// `pifu-{mode}.ckpt/` and `train_log.jsonl` under it.
pub fn train_pifu_supervised(
    train: &[LoadedSample],
    test: &[LoadedSample],
    cfg: &PifuTrainConfig,
    out_dir: Option<&Path>,
) -> Result<(ImplicitField, Vec<PifuLogEntry>), PifuError> {
    if train.is_empty() {
        return Err(PifuError::EmptyDataset);
    }
    let mut field = ImplicitField::init(cfg.field_config(), cfg.seed);
    let conds: Vec<(Tensor<f32>, OrthoCamera)> = train
        .iter()
        .map(|s| {
            conditioning_tensor::<f32>(
                cfg.input_mode,
                Some(&s.image),
                Some(&s.normal),
                Some(&s.depth),
            )
        })
        .collect::<Result<_, _>>()?;

    let mut adam = Adam::new(cfg.lr);
    let mut rng = seed::rng(cfg.seed, "pifu-train");
    let point_stream = seed::stream(cfg.seed, "pifu-points");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        adam.lr = cfg.lr * crate::estimators::step_decay(epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let batch = sample_supervised_batch(
                &train[i].shape,
                cfg.points_per_image,
                seed::indexed(point_stream, (epoch * train.len() + step) as u64),
            );
            let labels: Vec<f64> = batch
                .labels
                .iter()
                .map(|&l| l.clamp(-cfg.label_clamp, cfg.label_clamp))
                .collect();
            let mut tape = Tape::<f32>::new();
            let preds = field_forward_on_tape(
                &mut tape,
                &field.store,
                &field.encoder,
                &field.decoder,
                &conds[i].0,
                &conds[i].1,
                &batch.points,
            );
            let loss = sdf_loss_on_tape(&mut tape, preds, &labels, &batch.sign_valid, cfg.lambda_m);
            let grads = tape.backward(loss);
            adam.step(&mut field.store, &grads);
            epoch_loss += tape.value(loss).item().to_f64();
        }
        let (train_iou, test_iou) = if cfg.probe_points > 0 {
            let probe_seed = seed::stream(cfg.seed, "pifu-probe");
            let ti = mean_probe_iou(&field, train, cfg.probe_points, probe_seed);
            let te = if test.is_empty() {
                None
            } else {
                Some(mean_probe_iou(&field, test, cfg.probe_points, probe_seed))
            };
            (Some(ti), te)
        } else {
            (None, None)
        };
        log.push(PifuLogEntry {
            epoch,
            loss: epoch_loss / train.len() as f64,
            train_iou,
            test_iou,
        });
    }

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        field.save(&dir.join(format!("pifu-{}.ckpt", cfg.input_mode.code())))?;
        let mut f = fs::File::create(dir.join("train_log.jsonl"))?;
        for entry in &log {
            writeln!(f, "{}", serde_json::to_string(entry).expect("log entry serializes"))?;
        }
    }
    Ok((field, log))
}
