//! Image-space estimators: normals from the image, depth from image plus
//! estimated normals, with their supervised losses.
//!
//! Each loss exists twice: once as tape ops for training and once as a
//! straight-line f64 loop. The loop route is the oracle; tests hold the two
//! within 1e-6 of each other and neither route may be deleted in favor of
//! the other.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ckpt::{load_checkpoint, save_checkpoint, CkptError};
use crate::diffcore::{Adam, Element, ParamStore, Tape, Tensor, Var};
use crate::geometry::{DepthMap, GeomError, ImageMap, NormalMap};
use crate::nets::UNet;
use crate::seed;
use crate::synthdata::SampleTriplet;

/// Weight on the angular term of the normal loss.
pub const LAMBDA_COS: f64 = 1.25;
/// Weight on the per-channel absolute term of the normal loss.
pub const LAMBDA_L1: f64 = 1.0;
/// The angle's cosine is clamped to this magnitude before arccos, which
/// removes the gradient singularity at perfect alignment.
pub const COS_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum EstError {
    #[error("masks differ between prediction and target")]
    MaskMismatch,
    #[error("resolution mismatch: {0}")]
    Resolution(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Ckpt(#[from] CkptError),
    #[error("raster: {0}")]
    Geom(#[from] GeomError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn mask_tensor<T: Element>(mask: &[u8], c: usize, h: usize, w: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        data.extend(mask.iter().map(|&m| if m != 0 { T::ONE } else { T::ZERO }));
    }
    Tensor::new(vec![c, h, w], data)
}

fn fg_count(mask: &[u8]) -> usize {
    mask.iter().filter(|&&m| m != 0).count()
}

/// Angular-plus-absolute normal loss as tape ops. `pred` must already be
/// unit length per pixel; `gt` is the target planes tensor.
pub fn loss_normal_on_tape<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: &Tensor<T>,
    mask: &[u8],
) -> Var {
    let sh = tape.shape(pred).to_vec();
    assert_eq!(sh.len(), 3, "normal raster must be [3, H, W]");
    assert_eq!(sh[0], 3, "normal raster must be [3, H, W]");
    let (h, w) = (sh[1], sh[2]);
    let fg = fg_count(mask);
    assert!(fg > 0, "loss over an empty mask");
    let gtv = tape.constant(gt.clone());
    let prod = tape.mul(pred, gtv);
    let dot = tape.sum_channels(prod);
    let dotc = tape.clamp(dot, -COS_CLAMP, COS_CLAMP);
    let ang = tape.acos(dotc);
    let m1 = {
        let t = mask_tensor::<T>(mask, 1, h, w);
        let flat = Tensor::new(vec![h, w], t.into_data());
        tape.constant(flat)
    };
    let angm = tape.mul(ang, m1);
    let s1 = tape.sum(angm);
    let t1 = tape.scale(s1, LAMBDA_COS / fg as f64);
    let diff = tape.sub(pred, gtv);
    let ad = tape.abs(diff);
    let m3 = tape.constant(mask_tensor::<T>(mask, 3, h, w));
    let adm = tape.mul(ad, m3);
    let s2 = tape.sum(adm);
    let t2 = tape.scale(s2, LAMBDA_L1 / (3 * fg) as f64);
    tape.add(t1, t2)
}

/// Loop route of the normal loss over channel-major planes.
pub fn loss_normal_planes(pred: &[f64], gt: &[f64], mask: &[u8]) -> f64 {
    let n = mask.len();
    assert_eq!(pred.len(), 3 * n);
    assert_eq!(gt.len(), 3 * n);
    let fg = fg_count(mask);
    assert!(fg > 0, "loss over an empty mask");
    let mut ang_sum = 0.0;
    let mut l1_sum = 0.0;
    for i in 0..n {
        if mask[i] == 0 {
            continue;
        }
        let mut dot = 0.0;
        for c in 0..3 {
            dot += pred[c * n + i] * gt[c * n + i];
            l1_sum += (pred[c * n + i] - gt[c * n + i]).abs();
        }
        ang_sum += dot.clamp(-COS_CLAMP, COS_CLAMP).acos();
    }
    LAMBDA_COS * ang_sum / fg as f64 + LAMBDA_L1 * l1_sum / (3 * fg) as f64
}

/// Mean foreground angular-plus-absolute difference between two unit-normal
/// maps, loop route.
pub fn loss_normal(pred: &NormalMap, gt: &NormalMap) -> Result<f64, EstError> {
    if pred.mask() != gt.mask() {
        return Err(EstError::MaskMismatch);
    }
    Ok(loss_normal_planes(pred.planes(), gt.planes(), pred.mask()))
}

/// Mean foreground absolute depth difference as tape ops; `pred` is the
/// `[1, H, W]` head output, `gt` a matching tensor with zeros off the mask.
pub fn loss_depth_on_tape<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: &Tensor<T>,
    mask: &[u8],
) -> Var {
    let sh = tape.shape(pred).to_vec();
    assert_eq!(sh.len(), 3, "depth raster must be [1, H, W]");
    assert_eq!(sh[0], 1, "depth raster must be [1, H, W]");
    let fg = fg_count(mask);
    assert!(fg > 0, "loss over an empty mask");
    let gtv = tape.constant(gt.clone());
    let diff = tape.sub(pred, gtv);
    let ad = tape.abs(diff);
    let m = tape.constant(mask_tensor::<T>(mask, 1, sh[1], sh[2]));
    let adm = tape.mul(ad, m);
    let s = tape.sum(adm);
    tape.scale(s, 1.0 / fg as f64)
}

/// Loop route of the depth loss over flat rasters.
pub fn loss_depth_flat(pred: &[f64], gt: &[f64], mask: &[u8]) -> f64 {
    let fg = fg_count(mask);
    assert!(fg > 0, "loss over an empty mask");
    let mut sum = 0.0;
    for i in 0..mask.len() {
        if mask[i] != 0 {
            sum += (pred[i] - gt[i]).abs();
        }
    }
    sum / fg as f64
}

/// Mean foreground absolute difference between two depth maps, loop route.
pub fn loss_depth(pred: &DepthMap, gt: &DepthMap) -> Result<f64, EstError> {
    if pred.mask() != gt.mask() {
        return Err(EstError::MaskMismatch);
    }
    Ok(loss_depth_flat(pred.depth_raster(), gt.depth_raster(), pred.mask()))
}

/// Normal estimator: image in, unit normal raster out.
#[derive(Clone)]
pub struct NormalEstimator {
    pub net: UNet,
    pub store: ParamStore<f32>,
}

/// Depth estimator: image and normal raster in, depth raster out. The head
/// goes through tanh, so predictions always lie strictly inside the depth
/// range.
#[derive(Clone)]
pub struct DepthEstimator {
    pub net: UNet,
    pub store: ParamStore<f32>,
}

const NORM_EPS: f64 = 1e-12;

impl NormalEstimator {
    pub fn init(base: usize, seed_root: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = seed::rng(seed_root, "normal-net-init");
        let net = UNet::register(&mut store, &mut rng, "nrm", 3, 3, base);
        Self { net, store }
    }

    /// Builds the graph on the caller's tape; output is unit length per
    /// pixel.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> Var {
        let raw = self.net.forward(tape, store, image);
        tape.normalize_channels(raw, NORM_EPS)
    }

    pub fn estimate(&self, image: &ImageMap) -> NormalMap {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(image.to_tensor());
        let y = self.forward(&mut tape, &self.store, x);
        let vals = tape.value(y).clone();
        let n = image.camera.width * image.camera.height;
        let mut planes = vec![0.0f64; 3 * n];
        for i in 0..n {
            if image.mask()[i] == 0 {
                continue;
            }
            let v = [
                vals.data()[i] as f64,
                vals.data()[n + i] as f64,
                vals.data()[2 * n + i] as f64,
            ];
            // Exact renormalization in f64; the layer's epsilon leaves the
            // length a hair under one.
            let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let u = if len > 1e-6 { [v[0] / len, v[1] / len, v[2] / len] } else { [0.0, 0.0, 1.0] };
            for c in 0..3 {
                planes[c * n + i] = u[c];
            }
        }
        NormalMap::new(image.camera.clone(), planes, image.mask().to_vec())
            .expect("renormalized raster must be valid")
    }

    pub fn save(&self, dir: &Path) -> Result<(), EstError> {
        let meta = serde_json::json!({
            "kind": "normal-estimator", "in_ch": 3, "out_ch": 3, "base": self.net.base,
        });
        Ok(save_checkpoint(dir, &meta, &self.store)?)
    }

    pub fn load(dir: &Path) -> Result<Self, EstError> {
        let (meta, store) = load_checkpoint::<f32>(dir)?;
        let base = meta["base"].as_u64().expect("checkpoint missing base width") as usize;
        let net = rebuild_unet("nrm", 3, 3, base, &store);
        Ok(Self { net, store })
    }
}

impl DepthEstimator {
    pub fn init(base: usize, seed_root: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = seed::rng(seed_root, "depth-net-init");
        let net = UNet::register(&mut store, &mut rng, "dpt", 6, 1, base);
        Self { net, store }
    }

    /// Input is the 6-channel concatenation of image and normal raster;
    /// output passes through tanh.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        stacked: Var,
    ) -> Var {
        let raw = self.net.forward(tape, store, stacked);
        tape.tanh(raw)
    }

    pub fn estimate(&self, image: &ImageMap, normal: &NormalMap) -> Result<DepthMap, EstError> {
        if image.camera != normal.camera {
            return Err(EstError::Resolution("image and normal cameras differ".into()));
        }
        if image.mask() != normal.mask() {
            return Err(EstError::MaskMismatch);
        }
        let mut tape = Tape::<f32>::new();
        let img = tape.constant(image.to_tensor());
        let nrm = {
            let cam = &normal.camera;
            let data = normal.planes().iter().map(|&v| v as f32).collect();
            tape.constant(Tensor::new(vec![3, cam.height, cam.width], data))
        };
        let stacked = tape.concat(&[img, nrm], 0);
        let y = self.forward(&mut tape, &self.store, stacked);
        let depth = tape.value(y).data().iter().map(|&v| v as f64).collect();
        Ok(DepthMap::new(image.camera.clone(), depth, image.mask().to_vec())?)
    }

    pub fn save(&self, dir: &Path) -> Result<(), EstError> {
        let meta = serde_json::json!({
            "kind": "depth-estimator", "in_ch": 6, "out_ch": 1, "base": self.net.base,
        });
        Ok(save_checkpoint(dir, &meta, &self.store)?)
    }

    pub fn load(dir: &Path) -> Result<Self, EstError> {
        let (meta, store) = load_checkpoint::<f32>(dir)?;
        let base = meta["base"].as_u64().expect("checkpoint missing base width") as usize;
        let net = rebuild_unet("dpt", 6, 1, base, &store);
        Ok(Self { net, store })
    }
}

/// Re-registers the architecture into a scratch store to recover the layer
/// plan, then checks every expected name exists in the loaded store.
fn rebuild_unet(prefix: &str, in_c: usize, out_c: usize, base: usize, store: &ParamStore<f32>) -> UNet {
    let mut scratch = ParamStore::<f32>::new();
    let mut rng = seed::rng(0, "rebuild");
    let net = UNet::register(&mut scratch, &mut rng, prefix, in_c, out_c, base);
    for (name, t, _) in scratch.iter() {
        assert!(store.contains(name), "checkpoint missing parameter {name}");
        assert_eq!(store.get(name).shape(), t.shape(), "checkpoint shape mismatch for {name}");
    }
    net
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorTrainConfig {
    pub base_width: usize,
    pub epochs_normal: usize,
    pub epochs_depth: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl EstimatorTrainConfig {
    /// Small setting sized for single-core runs.
    pub fn desk() -> Self {
        Self {
            base_width: 16,
            epochs_normal: 40,
            epochs_depth: 40,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        }
    }

    /// Published setting: 100 epochs at learning rate 1e-4, batch 8.
    pub fn paper_scale() -> Self {
        Self {
            base_width: 64,
            epochs_normal: 100,
            epochs_depth: 100,
            batch_size: 8,
            lr: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
}

/// Step decay: full rate for the first 60% of epochs, 0.3x until 85%,
/// 0.09x after. Settles the late-phase loss bounce at desk scale.
pub(crate) fn step_decay(epoch: usize, total: usize) -> f64 {
    let frac = (epoch as f64 + 0.5) / total.max(1) as f64;
    if frac < 0.6 {
        1.0
    } else if frac < 0.85 {
        0.3
    } else {
        0.09
    }
}

/// Trains the normal estimator on image to normal, freezes it, then trains
/// the depth estimator on image plus *predicted* normal so training matches
/// the inference path. Returns both estimators and the per-epoch loss log;
/// when `out_dir` is given, writes `normal.ckpt/`, `depth.ckpt/` and
/// `train_log.jsonl` under it.
pub fn train_estimators(
    samples: &[SampleTriplet],
    cfg: &EstimatorTrainConfig,
    out_dir: Option<&Path>,
) -> Result<(NormalEstimator, DepthEstimator, Vec<TrainLogEntry>), EstError> {
    if samples.is_empty() {
        return Err(EstError::EmptyDataset);
    }
    let mut log = Vec::new();
    let mut normal = NormalEstimator::init(cfg.base_width, cfg.seed);
    let mut rng = seed::rng(cfg.seed, "estimator-train");

    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.to_tensor()).collect();
    let gt_normals: Vec<Tensor<f32>> = samples
        .iter()
        .map(|s| {
            let cam = &s.normal.camera;
            let data = s.normal.planes().iter().map(|&v| v as f32).collect();
            Tensor::new(vec![3, cam.height, cam.width], data)
        })
        .collect();
    let gt_depths: Vec<Tensor<f32>> = samples
        .iter()
        .map(|s| {
            let cam = &s.depth.camera;
            let data = s
                .depth
                .depth_raster()
                .iter()
                .zip(s.depth.mask())
                .map(|(&d, &m)| if m != 0 { d as f32 } else { 0.0 })
                .collect();
            Tensor::new(vec![1, cam.height, cam.width], data)
        })
        .collect();

    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs_normal {
        adam.lr = cfg.lr * step_decay(epoch, cfg.epochs_normal);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::<f32>::new();
            let mut acc: Option<Var> = None;
            for &i in chunk {
                let x = tape.constant(images[i].clone());
                let pred = normal.forward(&mut tape, &normal.store, x);
                let l = loss_normal_on_tape(&mut tape, pred, &gt_normals[i], samples[i].normal.mask());
                acc = Some(match acc {
                    Some(a) => tape.add(a, l),
                    None => l,
                });
            }
            let total = tape.scale(acc.unwrap(), 1.0 / chunk.len() as f64);
            let grads = tape.backward(total);
            adam.step(&mut normal.store, &grads);
            epoch_loss += tape.value(total).item().to_f64();
            batches += 1.0;
        }
        log.push(TrainLogEntry { phase: "normal".into(), epoch, loss: epoch_loss / batches });
    }

    // Depth phase sees the frozen normal estimator's predictions, masked to
    // the silhouette.
    let stacked_inputs: Vec<Tensor<f32>> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let pred = normal.estimate(&s.image);
            let cam = &s.image.camera;
            let mut data = Vec::with_capacity(6 * cam.width * cam.height);
            data.extend(images[i].data().iter().copied());
            data.extend(pred.planes().iter().map(|&v| v as f32));
            Tensor::new(vec![6, cam.height, cam.width], data)
        })
        .collect();

    let mut depth = DepthEstimator::init(cfg.base_width, cfg.seed);
    let mut adam_d = Adam::new(cfg.lr);
    for epoch in 0..cfg.epochs_depth {
        adam_d.lr = cfg.lr * step_decay(epoch, cfg.epochs_depth);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::<f32>::new();
            let mut acc: Option<Var> = None;
            for &i in chunk {
                let x = tape.constant(stacked_inputs[i].clone());
                let pred = depth.forward(&mut tape, &depth.store, x);
                let l = loss_depth_on_tape(&mut tape, pred, &gt_depths[i], samples[i].depth.mask());
                acc = Some(match acc {
                    Some(a) => tape.add(a, l),
                    None => l,
                });
            }
            let total = tape.scale(acc.unwrap(), 1.0 / chunk.len() as f64);
            let grads = tape.backward(total);
            adam_d.step(&mut depth.store, &grads);
            epoch_loss += tape.value(total).item().to_f64();
            batches += 1.0;
        }
        log.push(TrainLogEntry { phase: "depth".into(), epoch, loss: epoch_loss / batches });
    }

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        normal.save(&dir.join("normal.ckpt"))?;
        depth.save(&dir.join("depth.ckpt"))?;
        let mut f = fs::File::create(dir.join("train_log.jsonl"))?;
        for entry in &log {
            writeln!(f, "{}", serde_json::to_string(entry).expect("log entry serializes"))?;
        }
    }
    Ok((normal, depth, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_gradients, max_grad_error};
    use crate::geometry::OrthoCamera;
    use crate::synthdata::{raycast, sample_shape, train_distribution, AnalyticShape};
    use rand::Rng;

    fn one_pixel_normal(n: [f64; 3]) -> NormalMap {
        let cam = OrthoCamera::new(1, 1, 1.0);
        NormalMap::new(cam, vec![n[0], n[1], n[2]], vec![1]).unwrap()
    }

    #[test]
    fn normal_loss_matches_hand_values() {
        let pred = one_pixel_normal([1.0, 0.0, 0.0]);
        let gt = one_pixel_normal([-1.0, 0.0, 0.0]);
        let l = loss_normal(&pred, &gt).unwrap();
        let expect = LAMBDA_COS * std::f64::consts::PI + 2.0 / 3.0;
        assert!((l - expect).abs() < 1e-3, "{l} vs {expect}");
        // Identical normals: zero up to the arccos clamp.
        let same = loss_normal(&gt, &gt).unwrap();
        assert!(same >= 0.0 && same < 1e-3, "{same}");
    }

    #[test]
    fn normal_loss_routes_agree() {
        let mut rng = seed::rng(21, "nl-routes");
        let (h, w) = (6, 5);
        let n = h * w;
        let mask: Vec<u8> = (0..n).map(|i| u8::from(i % 3 != 0)).collect();
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            let mut planes = vec![0.0f64; 3 * n];
            for i in 0..n {
                let v = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.1..1.0),
                ];
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                for c in 0..3 {
                    planes[c * n + i] = v[c] / len;
                }
            }
            planes
        };
        let pred = mk(&mut rng);
        let gt = mk(&mut rng);
        let loops = loss_normal_planes(&pred, &gt, &mask);
        assert!(loops > 0.0);

        let mut tape = Tape::<f64>::new();
        let pv = tape.constant(Tensor::new(vec![3, h, w], pred.clone()));
        let gtt = Tensor::new(vec![3, h, w], gt.clone());
        let lv = loss_normal_on_tape(&mut tape, pv, &gtt, &mask);
        let taped = tape.value(lv).item();
        assert!((taped - loops).abs() < 1e-6, "{taped} vs {loops}");

        let via_maps = loss_normal(
            &NormalMap::new(OrthoCamera::new(w, h, 1.0), pred, mask.clone()).unwrap(),
            &NormalMap::new(OrthoCamera::new(w, h, 1.0), gt, mask.clone()).unwrap(),
        )
        .unwrap();
        assert!((via_maps - loops).abs() < 1e-12);
    }

    #[test]
    fn depth_loss_matches_hand_values() {
        let cam = OrthoCamera::new(3, 3, 1.0);
        let mask = vec![1, 1, 0, 1, 1, 0, 0, 0, 0];
        let base: Vec<f64> = vec![0.2, 0.3, 0.0, -0.1, 0.25, 0.0, 0.0, 0.0, 0.0];
        let gt = DepthMap::new(cam.clone(), base.clone(), mask.clone()).unwrap();
        assert_eq!(loss_depth(&gt, &gt).unwrap(), 0.0);

        let shifted: Vec<f64> = base.iter().map(|v| v + 0.1).collect();
        let pred = DepthMap::new(cam.clone(), shifted, mask.clone()).unwrap();
        let l = loss_depth(&pred, &gt).unwrap();
        assert!((l - 0.1).abs() < 1e-12, "constant offset must average to itself: {l}");

        // Translation covariance: shifting both leaves the loss unchanged.
        let both: Vec<f64> = base.iter().map(|v| v + 0.3).collect();
        let gt2 = DepthMap::new(cam.clone(), both.clone(), mask.clone()).unwrap();
        let pred2 = DepthMap::new(
            cam.clone(),
            both.iter().map(|v| v + 0.1).collect(),
            mask.clone(),
        )
        .unwrap();
        let l2 = loss_depth(&pred2, &gt2).unwrap();
        assert!((l2 - l).abs() < 1e-12);
    }

    #[test]
    fn depth_loss_routes_agree() {
        let mut rng = seed::rng(22, "dl-routes");
        let (h, w) = (5, 7);
        let n = h * w;
        let mask: Vec<u8> = (0..n).map(|i| u8::from(i % 4 != 1)).collect();
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let loops = loss_depth_flat(&pred, &gt, &mask);

        let mut tape = Tape::<f64>::new();
        let pv = tape.constant(Tensor::new(vec![1, h, w], pred.clone()));
        let gtt = Tensor::new(vec![1, h, w], gt.clone());
        let lv = loss_depth_on_tape(&mut tape, pv, &gtt, &mask);
        assert!((tape.value(lv).item() - loops).abs() < 1e-6);
    }

    #[test]
    fn mask_mismatch_is_an_error() {
        let a = one_pixel_normal([0.0, 0.0, 1.0]);
        let b = NormalMap::new(OrthoCamera::new(1, 1, 1.0), vec![0.0; 3], vec![0]).unwrap();
        assert!(matches!(loss_normal(&a, &b), Err(EstError::MaskMismatch)));
        let cam = OrthoCamera::new(1, 1, 1.0);
        let d1 = DepthMap::new(cam.clone(), vec![0.5], vec![1]).unwrap();
        let d0 = DepthMap::new(cam, vec![0.0], vec![0]).unwrap();
        assert!(matches!(loss_depth(&d1, &d0), Err(EstError::MaskMismatch)));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = seed::rng(23, "loss-grad");
        let (h, w) = (4, 4);
        let n = h * w;
        let mask: Vec<u8> = (0..n).map(|i| u8::from(i % 5 != 0)).collect();
        let raw: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gtp: Vec<f64> = {
            let mut planes = vec![0.0; 3 * n];
            for i in 0..n {
                planes[2 * n + i] = 1.0;
            }
            planes
        };
        let mut store = ParamStore::<f64>::new();
        store.register("raw", Tensor::new(vec![3, h, w], raw));
        let gtt = Tensor::new(vec![3, h, w], gtp);
        let run = |s: &ParamStore<f64>| {
            let mut tape = Tape::<f64>::new();
            let x = tape.param(s, "raw");
            let unit = tape.normalize_channels(x, NORM_EPS);
            let l = loss_normal_on_tape(&mut tape, unit, &gtt, &mask);
            (tape, l)
        };
        let (tape, l) = run(&store);
        let grads = tape.backward(l);
        let fd = finite_diff_gradients(&store, 1e-6, |s| {
            let (tape, l) = run(s);
            tape.value(l).item()
        });
        let err = max_grad_error(&grads, &fd);
        assert!(err < 1e-4, "normal loss grad error {err}");

        let rawd: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gtd = Tensor::new(vec![1, h, w], vec![0.1; n]);
        let mut store_d = ParamStore::<f64>::new();
        store_d.register("raw", Tensor::new(vec![1, h, w], rawd));
        let run_d = |s: &ParamStore<f64>| {
            let mut tape = Tape::<f64>::new();
            let x = tape.param(s, "raw");
            let y = tape.tanh(x);
            let l = loss_depth_on_tape(&mut tape, y, &gtd, &mask);
            (tape, l)
        };
        let (tape_d, ld) = run_d(&store_d);
        let grads_d = tape_d.backward(ld);
        let fd_d = finite_diff_gradients(&store_d, 1e-6, |s| {
            let (tape, l) = run_d(s);
            tape.value(l).item()
        });
        let err_d = max_grad_error(&grads_d, &fd_d);
        assert!(err_d < 1e-4, "depth loss grad error {err_d}");
    }

    #[test]
    fn untrained_estimators_produce_valid_outputs() {
        let cam = OrthoCamera::new(16, 16, 1.0);
        let shape = AnalyticShape::sphere(0.5);
        let t = raycast(&shape, &cam, 1);
        let ne = NormalEstimator::init(8, 99);
        let nm = ne.estimate(&t.image);
        assert_eq!(nm.mask(), t.image.mask());
        for (u, v) in t.depth.foreground_pixels() {
            let n = nm.normal_at(u, v);
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            assert!((len - 1.0).abs() < 1e-5);
        }
        // Deterministic inference.
        let nm2 = ne.estimate(&t.image);
        assert_eq!(nm.planes(), nm2.planes());
        // Zero image stays finite.
        let zero = ImageMap::new(cam.clone(), vec![0.0; 3 * 256], t.image.mask().to_vec()).unwrap();
        let nz = ne.estimate(&zero);
        assert!(nz.planes().iter().all(|v| v.is_finite()));

        let de = DepthEstimator::init(8, 98);
        let dm = de.estimate(&t.image, &nm).unwrap();
        assert_eq!(dm.mask(), t.image.mask());
        let dm2 = de.estimate(&t.image, &nm).unwrap();
        assert_eq!(dm.depth_raster(), dm2.depth_raster());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_estimates() {
        let cam = OrthoCamera::new(16, 16, 1.0);
        let t = raycast(&AnalyticShape::sphere(0.4), &cam, 2);
        let ne = NormalEstimator::init(8, 5);
        let tmp = tempfile::tempdir().unwrap();
        ne.save(&tmp.path().join("n")).unwrap();
        let ne2 = NormalEstimator::load(&tmp.path().join("n")).unwrap();
        assert_eq!(
            ne.estimate(&t.image).planes(),
            ne2.estimate(&t.image).planes()
        );
        let de = DepthEstimator::init(8, 6);
        de.save(&tmp.path().join("d")).unwrap();
        let de2 = DepthEstimator::load(&tmp.path().join("d")).unwrap();
        let nm = ne.estimate(&t.image);
        assert_eq!(
            de.estimate(&t.image, &nm).unwrap().depth_raster(),
            de2.estimate(&t.image, &nm).unwrap().depth_raster()
        );
    }

    #[test]
    fn same_seed_reproduces_the_loss_curve() {
        let cam = OrthoCamera::new(16, 16, 1.0);
        let triplets: Vec<_> = (0..3)
            .map(|i| raycast(&sample_shape(&train_distribution(), 100 + i), &cam, 100 + i))
            .collect();
        let cfg = EstimatorTrainConfig {
            base_width: 4,
            epochs_normal: 3,
            epochs_depth: 3,
            batch_size: 2,
            lr: 1e-3,
            seed: 77,
        };
        let (_, _, log_a) = train_estimators(&triplets, &cfg, None).unwrap();
        let (_, _, log_b) = train_estimators(&triplets, &cfg, None).unwrap();
        let la: Vec<f64> = log_a.iter().map(|e| e.loss).collect();
        let lb: Vec<f64> = log_b.iter().map(|e| e.loss).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn single_sample_overfit_drives_depth_loss_down() {
        let cam = OrthoCamera::new(16, 16, 1.0);
        let t = raycast(&sample_shape(&train_distribution(), 55), &cam, 55);
        let cfg = EstimatorTrainConfig {
            base_width: 8,
            epochs_normal: 25,
            epochs_depth: 300,
            batch_size: 1,
            lr: 3e-3,
            seed: 3,
        };
        let (normal_est, depth_est, log) = train_estimators(&[t.clone()], &cfg, None).unwrap();
        let final_depth = log.iter().filter(|e| e.phase == "depth").last().unwrap().loss;
        assert!(final_depth < 0.01, "overfit depth loss {final_depth}");
        // Evaluate along the inference path the net was trained on:
        // estimated normals feed the depth estimator.
        let nm = normal_est.estimate(&t.image);
        let dm = depth_est.estimate(&t.image, &nm).unwrap();
        let err = loss_depth(&dm, &t.depth).unwrap();
        assert!(err < 0.02, "overfit estimate error {err}");
    }

    #[test]
    fn training_generalizes_to_a_held_out_sphere() {
        let cam = OrthoCamera::new(32, 32, 1.0);
        // Blended shapes plus plain spheres of other radii; the held-out
        // radius below is absent from training.
        let mut triplets: Vec<_> = (0..8)
            .map(|i| raycast(&sample_shape(&train_distribution(), 200 + i), &cam, 200 + i))
            .collect();
        for (k, r) in [0.30, 0.34, 0.38, 0.42, 0.48, 0.52, 0.56, 0.60].into_iter().enumerate() {
            triplets.push(raycast(&AnalyticShape::sphere(r), &cam, 300 + k as u64));
        }
        let cfg = EstimatorTrainConfig {
            base_width: 12,
            epochs_normal: 100,
            epochs_depth: 220,
            batch_size: 4,
            lr: 3e-3,
            seed: 9,
        };
        let tmp = tempfile::tempdir().unwrap();
        let (ne, de, log) = train_estimators(&triplets, &cfg, Some(tmp.path())).unwrap();
        let phase_losses = |phase: &str| -> Vec<f64> {
            log.iter().filter(|e| e.phase == phase).map(|e| e.loss).collect()
        };
        let ln = phase_losses("normal");
        let ld = phase_losses("depth");
        assert!(
            ln.last().unwrap() < &(0.5 * ln[0]),
            "normal loss fell only {} -> {}",
            ln[0],
            ln.last().unwrap()
        );
        assert!(
            ld.last().unwrap() < &(0.5 * ld[0]),
            "depth loss fell only {} -> {}",
            ld[0],
            ld.last().unwrap()
        );
        assert!(tmp.path().join("normal.ckpt/model.json").exists());
        assert!(tmp.path().join("depth.ckpt/model.json").exists());
        assert!(tmp.path().join("train_log.jsonl").exists());

        // Held-out sphere, never in the training set.
        let held = raycast(&AnalyticShape::sphere(0.45), &cam, 500);
        let nm = ne.estimate(&held.image);
        let mut ang = 0.0;
        let mut cnt = 0.0;
        for (u, v) in held.depth.foreground_pixels() {
            let p = nm.normal_at(u, v);
            let g = held.normal.normal_at(u, v);
            let dot = (p[0] * g[0] + p[1] * g[1] + p[2] * g[2]).clamp(-1.0, 1.0);
            ang += dot.acos();
            cnt += 1.0;
        }
        let mean_deg = (ang / cnt).to_degrees();
        assert!(mean_deg < 15.0, "mean angular error {mean_deg} deg");

        let dm = de.estimate(&held.image, &nm).unwrap();
        let derr = loss_depth(&dm, &held.depth).unwrap();
        assert!(derr < 0.02, "held-out depth error {derr}");
    }
}
