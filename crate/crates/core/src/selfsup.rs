//! Self-supervision from depth maps alone: pseudo signed distances sampled
//! along camera rays, a rendered-vs-estimated depth loss, and the fine-tune
//! loop that optimizes their weighted sum on wild samples.
//!
//! The estimator side is frozen throughout: every depth map entering this
//! module is a fixed raster, whether it came from an estimator or from the
//! synthetic ground truth. Only field parameters move.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Adam, Element, Tape, Tensor, Var};
use crate::geometry::{DepthMap, OrthoCamera};
use crate::pifu::{
    conditioning_tensor, decode_on_tape, mean_probe_iou, sample_supervised_batch, sdf_loss,
    sdf_loss_on_tape, FeatureMap, FieldQuery, ImplicitField, PifuError, SdfSampleBatch,
    LABEL_CLAMP,
};
use crate::render::{march_pixels, refined_depth_on_tape, RayMarchConfig};
use crate::seed;
use crate::synthdata::LoadedSample;

/// Weight of the rendered-depth term in the combined loss.
pub const DEFAULT_LAMBDA: f64 = 0.618;
/// Ray offset bound for pseudo labels, world units (1 unit = 1 m analog).
pub const DEFAULT_SIGMA: f64 = 0.015;
/// Foreground pixels consumed per depth map per visit.
pub const DEFAULT_PIXEL_BUDGET: usize = 2048;
/// Offset points drawn per chosen pixel, besides the surface point.
pub const DEFAULT_N_PER_PIXEL: usize = 3;

#[derive(Debug, Error)]
pub enum SelfsupError {
    #[error("depth map has no foreground pixels")]
    EmptyMask,
    #[error("got {got} predictions for {want} labels")]
    LengthMismatch { got: usize, want: usize },
    #[error("depth maps live on different cameras")]
    CameraMismatch,
    #[error("no pixel is valid in both depth maps")]
    NoOverlap,
    #[error("wild sample set is empty")]
    EmptyWild,
    #[error(transparent)]
    Field(#[from] PifuError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("log serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Pseudo-labelled query points read off one depth map. Labels are signed
/// ray offsets standing in for signed distances: zero exactly at the
/// back-projected surface, positive toward the viewer.
#[derive(Debug, Clone)]
pub struct VolumePseudoBatch {
    pub batch: SdfSampleBatch,
    /// Sample id of the depth map that produced the labels.
    pub source_id: usize,
    /// Offset bound the labels were drawn under.
    pub sigma: f64,
}

/// Draws `pixel_budget` foreground pixels uniformly with replacement. Each
/// contributes its back-projected surface point (label 0) plus `n_per_pixel`
/// points offset along the viewing axis by t ~ U(−σ, σ) \ {0}, labelled t.
/// The offset window shrinks near the volume faces so every point stays in
/// the box; labels still never exceed σ in magnitude.
pub fn sample_volume_pseudo(
    dm: &DepthMap,
    source_id: usize,
    n_per_pixel: usize,
    pixel_budget: usize,
    sigma: f64,
    seed: u64,
) -> Result<VolumePseudoBatch, SelfsupError> {
    assert!(sigma > 0.0, "offset bound must be positive");
    assert!(pixel_budget > 0, "need at least one pixel");
    let fg = dm.foreground_pixels();
    if fg.is_empty() {
        return Err(SelfsupError::EmptyMask);
    }
    let mut rng = seed::rng(seed, "volume-pseudo");
    let total = pixel_budget * (1 + n_per_pixel);
    let mut points = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for _ in 0..pixel_budget {
        let (u, v) = fg[rng.gen_range(0..fg.len())];
        let (x, y) = dm.camera.pixel_center(u, v);
        let d = dm.at(u, v);
        points.push([x, y, d]);
        labels.push(0.0);
        let lo = (-sigma).max(-1.0 - d);
        let hi = sigma.min(1.0 - d);
        for _ in 0..n_per_pixel {
            let t = loop {
                let t = rng.gen_range(lo..hi);
                if t != 0.0 {
                    break t;
                }
            };
            points.push([x, y, d + t]);
            labels.push(t);
        }
    }
    let sign_valid = vec![true; points.len()];
    Ok(VolumePseudoBatch {
        batch: SdfSampleBatch::new(points, labels, sign_valid),
        source_id,
        sigma,
    })
}

/// Mean absolute residual against the pseudo labels, plus `lambda_m` times
/// the same residual restricted to sign-disagreeing points.
pub fn loss_volume(
    preds: &[f64],
    batch: &VolumePseudoBatch,
    lambda_m: f64,
) -> Result<f64, SelfsupError> {
    if preds.len() != batch.batch.len() {
        return Err(SelfsupError::LengthMismatch { got: preds.len(), want: batch.batch.len() });
    }
    Ok(sdf_loss(preds, &batch.batch.labels, &batch.batch.sign_valid, lambda_m))
}

/// Mean squared depth difference over pixels valid in both maps.
pub fn loss_surface(rendered: &DepthMap, estimated: &DepthMap) -> Result<f64, SelfsupError> {
    if rendered.camera != estimated.camera {
        return Err(SelfsupError::CameraMismatch);
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for (u, v) in rendered.foreground_pixels() {
        if estimated.mask_at(u, v) {
            let d = rendered.at(u, v) - estimated.at(u, v);
            acc += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(SelfsupError::NoOverlap);
    }
    Ok(acc / n as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    /// Weight of the rendered-depth term.
    pub lambda: f64,
    /// Weight of the pseudo-label volume term; 0 disables it, giving a
    /// depth-render-only objective.
    pub volume_weight: f64,
    /// Opposite-sign penalty weight inside the volume term.
    pub lambda_m: f64,
    /// Ray offset bound for pseudo labels, world units.
    pub sigma: f64,
    /// Foreground pixels consumed per depth map per visit.
    pub pixel_budget: usize,
    /// Offset points per chosen pixel, besides the surface point.
    pub n_per_pixel: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Synthetic SDF points mixed in per wild batch; 0 disables the mix.
    pub supervised_points: usize,
    /// Label clamp applied to the supervised mix.
    pub label_clamp: f64,
    /// Foreground pixels marched per sample for the depth term; 0 disables
    /// the term, as does lambda = 0.
    pub surface_pixels: usize,
    pub march: RayMarchConfig,
    pub seed: u64,
    /// Monte Carlo samples for the per-epoch IoU probe; 0 disables probing.
    pub probe_points: usize,
}

impl FinetuneConfig {
    /// Desk-scale defaults: a tenth of the desk pretraining rate, batches
    /// of two, budgets sized for single-core runs.
    pub fn desk() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            lambda_m: 1.0,
            sigma: DEFAULT_SIGMA,
            pixel_budget: 256,
            n_per_pixel: DEFAULT_N_PER_PIXEL,
            lr: 1e-4,
            batch_size: 2,
            epochs: 10,
            supervised_points: 128,
            label_clamp: LABEL_CLAMP,
            surface_pixels: 96,
            march: RayMarchConfig::default(),
            seed: 0,
            probe_points: 2000,
        }
    }

    /// Published setting: full pixel budget, a tenth of the published
    /// pretraining rate.
    pub fn paper_scale() -> Self {
        Self {
            pixel_budget: DEFAULT_PIXEL_BUDGET,
            lr: 1e-5,
            epochs: 20,
            supervised_points: 8000,
            surface_pixels: 512,
            probe_points: 8000,
            ..Self::desk()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneLogEntry {
    pub epoch: usize,
    /// Combined objective averaged over the epoch's batches.
    pub loss: f64,
    pub volume: f64,
    pub surface: f64,
    pub supervised: f64,
    /// Mean IoU probe over the wild samples' known shapes.
    pub wild_iou: Option<f64>,
}

/// Optimizes volume + λ·surface on the wild set, mixing one supervised
/// synthetic batch per wild batch. Conditioning rasters are constants; one
/// Adam step per batch at a fixed rate.
pub fn finetune_field(
    field: &mut ImplicitField,
    wild: &[LoadedSample],
    synthetic: &[LoadedSample],
    cfg: &FinetuneConfig,
) -> Result<Vec<FinetuneLogEntry>, SelfsupError> {
    if wild.is_empty() {
        return Err(SelfsupError::EmptyWild);
    }
    let mode = field.config.input_mode;
    let stride = field.config.encoder.out_stride;
    let cond_of = |s: &LoadedSample| {
        conditioning_tensor::<f32>(mode, Some(&s.image), Some(&s.normal), Some(&s.depth))
    };
    let conds: Vec<(Tensor<f32>, OrthoCamera)> =
        wild.iter().map(cond_of).collect::<Result<_, _>>()?;
    let syn_conds: Vec<(Tensor<f32>, OrthoCamera)> =
        synthetic.iter().map(cond_of).collect::<Result<_, _>>()?;
    let use_surface = cfg.lambda > 0.0 && cfg.surface_pixels > 0;
    let mix = cfg.supervised_points >= 2 && !synthetic.is_empty();

    let mut adam = Adam::new(cfg.lr);
    let mut order_rng = seed::rng(cfg.seed, "finetune-order");
    let pseudo_stream = seed::stream(cfg.seed, "finetune-pseudo");
    let pixel_stream = seed::stream(cfg.seed, "finetune-pixels");
    let sup_stream = seed::stream(cfg.seed, "finetune-sup");
    let probe_seed = seed::stream(cfg.seed, "finetune-probe");
    let mut order: Vec<usize> = (0..wild.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut visit = 0u64;
    let mut batch_no = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::<f32>::new();
            let mut vol_terms: Vec<Var> = Vec::new();
            let mut surf_terms: Vec<Var> = Vec::new();
            for &i in chunk {
                let (cond, cam) = &conds[i];
                let x = tape.constant(cond.clone());
                let fm_var = field.encoder.forward(&mut tape, &field.store, x);

                let pseudo = sample_volume_pseudo(
                    &wild[i].depth,
                    wild[i].id,
                    cfg.n_per_pixel,
                    cfg.pixel_budget,
                    cfg.sigma,
                    seed::indexed(pseudo_stream, visit),
                )?;
                let preds = decode_on_tape(
                    &mut tape,
                    &field.store,
                    &field.decoder,
                    fm_var,
                    cam,
                    stride,
                    &pseudo.batch.points,
                );
                vol_terms.push(sdf_loss_on_tape(
                    &mut tape,
                    preds,
                    &pseudo.batch.labels,
                    &pseudo.batch.sign_valid,
                    cfg.lambda_m,
                ));

                if use_surface {
                    // March against a frozen snapshot of this forward pass;
                    // gradients flow only through the re-evaluated hits.
                    let fm_plain = FeatureMap {
                        data: tape.value(fm_var).clone(),
                        camera: cam.clone(),
                        stride,
                    };
                    let fg = wild[i].depth.foreground_pixels();
                    let mut prng = seed::rng(seed::indexed(pixel_stream, visit), "surface-px");
                    let pixels: Vec<(usize, usize)> = (0..cfg.surface_pixels)
                        .map(|_| fg[prng.gen_range(0..fg.len())])
                        .collect();
                    let query = FieldQuery { field, fm: &fm_plain };
                    let marched = march_pixels(&query, cam, &cfg.march, &pixels);
                    let mut hits = Vec::new();
                    let mut targets: Vec<f32> = Vec::new();
                    for (&(u, v), h) in pixels.iter().zip(&marched) {
                        if let Some(h) = h {
                            hits.push((u, v, h.z_final));
                            targets.push(wild[i].depth.at(u, v) as f32);
                        }
                    }
                    if !hits.is_empty() {
                        let dr = refined_depth_on_tape(
                            &mut tape,
                            &field.store,
                            &field.decoder,
                            fm_var,
                            cam,
                            stride,
                            &hits,
                        );
                        let tg = tape.constant(Tensor::new(vec![targets.len(), 1], targets));
                        let diff = tape.sub(dr, tg);
                        let sq = tape.mul(diff, diff);
                        surf_terms.push(tape.mean(sq));
                    }
                }
                visit += 1;
            }

            let inv = 1.0 / chunk.len() as f64;
            let vol_sum = sum_vars(&mut tape, &vol_terms).expect("chunk is never empty");
            let vol_mean = tape.scale(vol_sum, inv);
            let mut loss = vol_mean;
            let mut surf_logged = 0.0;
            if let Some(surf_sum) = sum_vars(&mut tape, &surf_terms) {
                let surf_mean = tape.scale(surf_sum, 1.0 / surf_terms.len() as f64);
                surf_logged = tape.value(surf_mean).item().to_f64();
                let weighted = tape.scale(surf_mean, cfg.lambda);
                loss = tape.add(loss, weighted);
            }
            let mut sup_logged = 0.0;
            if mix {
                let k = (batch_no as usize) % synthetic.len();
                let batch = sample_supervised_batch(
                    &synthetic[k].shape,
                    cfg.supervised_points,
                    seed::indexed(sup_stream, batch_no),
                );
                let labels: Vec<f64> = batch
                    .labels
                    .iter()
                    .map(|&l| l.clamp(-cfg.label_clamp, cfg.label_clamp))
                    .collect();
                let (cond, cam) = &syn_conds[k];
                let x = tape.constant(cond.clone());
                let fm_var = field.encoder.forward(&mut tape, &field.store, x);
                let preds = decode_on_tape(
                    &mut tape,
                    &field.store,
                    &field.decoder,
                    fm_var,
                    cam,
                    stride,
                    &batch.points,
                );
                let sup =
                    sdf_loss_on_tape(&mut tape, preds, &labels, &batch.sign_valid, cfg.lambda_m);
                sup_logged = tape.value(sup).item().to_f64();
                loss = tape.add(loss, sup);
            }

            let grads = tape.backward(loss);
            adam.step(&mut field.store, &grads);
            sums[0] += tape.value(loss).item().to_f64();
            sums[1] += tape.value(vol_mean).item().to_f64();
            sums[2] += surf_logged;
            sums[3] += sup_logged;
            batches += 1;
            batch_no += 1;
        }

        let inv = 1.0 / batches as f64;
        let wild_iou = if cfg.probe_points > 0 {
            Some(mean_probe_iou(field, wild, cfg.probe_points, probe_seed))
        } else {
            None
        };
        log.push(FinetuneLogEntry {
            epoch,
            loss: sums[0] * inv,
            volume: sums[1] * inv,
            surface: sums[2] * inv,
            supervised: sums[3] * inv,
            wild_iou,
        });
    }
    Ok(log)
}

fn sum_vars(tape: &mut Tape<f32>, terms: &[Var]) -> Option<Var> {
    let mut it = terms.iter().copied();
    let first = it.next()?;
    Some(it.fold(first, |acc, v| tape.add(acc, v)))
}

/// Loads a pretrained field, fine-tunes it on the wild set and writes the
/// new checkpoint plus `finetune_log.json` under `out_dir`. The log echoes
/// the full config next to the per-epoch entries.
pub fn finetune_self(
    ckpt: &Path,
    wild: &[LoadedSample],
    synthetic: &[LoadedSample],
    cfg: &FinetuneConfig,
    out_dir: &Path,
) -> Result<(ImplicitField, Vec<FinetuneLogEntry>), SelfsupError> {
    let mut field = ImplicitField::load(ckpt)?;
    let log = finetune_field(&mut field, wild, synthetic, cfg)?;
    fs::create_dir_all(out_dir)?;
    let name = format!("pifu-{}-selfsup.ckpt", field.config.input_mode.code());
    field.save(&out_dir.join(name))?;
    let doc = serde_json::json!({ "config": cfg, "epochs": log });
    fs::write(out_dir.join("finetune_log.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok((field, log))
}
