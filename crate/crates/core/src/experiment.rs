//! Rate-distortion curves over model families and the trellis rate-weight sweep.

use serde::{Deserialize, Serialize};

use crate::codec::{evaluate, pretrain, CodecModel, ImageEval, ModelConfig, Surrogate, TrainConfig, LAMBDAS};
use crate::error::{Error, Result};
use crate::metrics::{bd_rate, RdCurve, RdPoint};
use crate::tensor::{ImagePatch, QuantizerKind};

/// Mean bpp and mean PSNR over the images.
pub fn average_point(lambda: f64, evals: &[ImageEval]) -> Result<RdPoint> {
    if evals.is_empty() {
        return Err(Error::InvalidArgument("no evaluations".into()));
    }
    let n = evals.len() as f64;
    Ok(RdPoint {
        lambda,
        bpp: evals.iter().map(|e| e.bpp).sum::<f64>() / n,
        psnr_db: evals.iter().map(|e| e.psnr_db).sum::<f64>() / n,
    })
}

pub fn rd_curve(models: &[CodecModel], images: &[ImagePatch]) -> Result<RdCurve> {
    let pts = models
        .iter()
        .map(|m| average_point(m.config.lambda, &evaluate(m, images)?))
        .collect::<Result<Vec<_>>>()?;
    RdCurve::new(pts)
}

/// Per-image curves, one per image, each with one point per model.
pub fn per_image_curves(models: &[CodecModel], images: &[ImagePatch]) -> Result<Vec<RdCurve>> {
    let evals = models.iter().map(|m| evaluate(m, images)).collect::<Result<Vec<_>>>()?;
    (0..images.len())
        .map(|i| {
            RdCurve::new(
                models
                    .iter()
                    .zip(&evals)
                    .map(|(m, e)| RdPoint { lambda: m.config.lambda, bpp: e[i].bpp, psnr_db: e[i].psnr_db })
                    .collect(),
            )
        })
        .collect()
}

/// One model per entry of `lambdas`, otherwise sharing `base`.
pub fn pretrain_family(
    base: &ModelConfig,
    lambdas: &[f64],
    images: &[ImagePatch],
    tcfg: &TrainConfig,
) -> Result<Vec<CodecModel>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let cfg = ModelConfig { lambda, ..base.clone() };
            pretrain(cfg, images, Surrogate::for_kind(base.kind), tcfg).map(|(m, _)| m)
        })
        .collect()
}

pub fn default_family(kind: QuantizerKind, seed: u64, images: &[ImagePatch], tcfg: &TrainConfig) -> Result<Vec<CodecModel>> {
    pretrain_family(&ModelConfig { kind, seed, ..Default::default() }, &LAMBDAS, images, tcfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_q_rel: f64,
    pub bd_rate_pct: f64,
}

/// BD-rate of the TCQ family against `reference` for each trellis rate weight.
pub fn sweep_lambda_q(tcq: &[CodecModel], reference: &RdCurve, images: &[ImagePatch], values: &[f64]) -> Result<Vec<SweepRow>> {
    if tcq.iter().any(|m| m.kind() != QuantizerKind::Tcq) {
        return Err(Error::InvalidArgument("sweep needs TCQ models".into()));
    }
    values
        .iter()
        .map(|&q| {
            let models: Vec<CodecModel> = tcq
                .iter()
                .map(|m| {
                    let mut m = m.clone();
                    m.config.lambda_q_rel = q;
                    m
                })
                .collect();
            let curve = rd_curve(&models, images)?;
            Ok(SweepRow { lambda_q_rel: q, bd_rate_pct: bd_rate(&curve, reference)? })
        })
        .collect()
}

/// The row with the lowest BD-rate.
pub fn best_lambda_q(rows: &[SweepRow]) -> Option<SweepRow> {
    rows.iter().copied().min_by(|a, b| a.bd_rate_pct.total_cmp(&b.bd_rate_pct))
}
