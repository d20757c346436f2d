//! Image, mask and point-cloud quality metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{KnnIndex, Vec3};
use crate::imaging::{Mask, RgbImage};

/// PSNR reported for identical inputs (MSE = 0).
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub per_item: Vec<f64>,
}

impl MetricReport {
    /// Mean over items.
    pub fn from_items(name: &str, per_item: Vec<f64>) -> Self {
        let value = if per_item.is_empty() {
            f64::NAN
        } else {
            per_item.iter().sum::<f64>() / per_item.len() as f64
        };
        Self {
            name: name.to_string(),
            value,
            per_item,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,item,value\n");
        for (i, v) in self.per_item.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.name, i, v));
        }
        out.push_str(&format!("{},mean,{}\n", self.name, self.value));
        out
    }
}

fn check_dims(a: (u32, u32), b: (u32, u32)) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

/// `10 log10(MAX² / MSE)` over all values; capped at [`PSNR_CAP_DB`].
pub fn psnr_values(a: &[f64], b: &[f64], max_value: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} values", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_value * max_value / mse).log10()).min(PSNR_CAP_DB))
}

pub fn psnr(a: &RgbImage, b: &RgbImage, max_value: f64) -> Result<f64> {
    check_dims((a.width, a.height), (b.width, b.height))?;
    let av: Vec<f64> = a.data.iter().map(|&v| v as f64).collect();
    let bv: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
    psnr_values(&av, &bv, max_value)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - half;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filtering.
fn filter_valid(img: &[f64], w: usize, h: usize, kernel: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = kernel.len();
    let ow = w + 1 - n;
    let oh = h + 1 - n;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|k| kernel[k] * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|k| kernel[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

fn ssim_term(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Mean SSIM of two grayscale images (11×11 Gaussian window, σ = 1.5,
/// `C1 = (0.01 MAX)²`, `C2 = (0.03 MAX)²`). Images smaller than the window
/// are scored with a single global window.
pub fn ssim_gray(a: &[f64], b: &[f64], width: usize, height: usize, max_value: f64) -> Result<f64> {
    if a.len() != width * height || b.len() != width * height {
        return Err(Error::DimensionMismatch("SSIM buffers do not match dimensions".into()));
    }
    let c1 = (0.01 * max_value).powi(2);
    let c2 = (0.03 * max_value).powi(2);
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        let n = a.len() as f64;
        let mx = a.iter().sum::<f64>() / n;
        let my = b.iter().sum::<f64>() / n;
        let vx = a.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
        let vy = b.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
        let cxy = a.iter().zip(b).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
        return Ok(ssim_term(mx, my, vx, vy, cxy, c1, c2));
    }
    let k = gaussian_kernel();
    let (mu_x, ow, oh) = filter_valid(a, width, height, &k);
    let (mu_y, ..) = filter_valid(b, width, height, &k);
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let (exx, ..) = filter_valid(&sq(a), width, height, &k);
    let (eyy, ..) = filter_valid(&sq(b), width, height, &k);
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (exy, ..) = filter_valid(&prod, width, height, &k);
    let total: f64 = (0..ow * oh)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            ssim_term(mx, my, exx[i] - mx * mx, eyy[i] - my * my, exy[i] - mx * my, c1, c2)
        })
        .sum();
    Ok(total / (ow * oh) as f64)
}

/// SSIM of two RGB images after luma conversion, `MAX = 1`.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_dims((a.width, a.height), (b.width, b.height))?;
    ssim_gray(&a.to_gray(), &b.to_gray(), a.width as usize, a.height as usize, 1.0)
}

/// Confusion counts for the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<Confusion> {
    check_dims((pred.width, pred.height), (gt.width, gt.height))?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio_or_one(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// IoU of the positive ("object") class. Two empty masks score 1.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let c = confusion(pred, gt)?;
    Ok(ratio_or_one(c.tp, c.tp + c.fp + c.fn_))
}

/// Mean IoU over the two classes {object, other}.
pub fn miou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let c = confusion(pred, gt)?;
    let object = ratio_or_one(c.tp, c.tp + c.fp + c.fn_);
    let other = ratio_or_one(c.tn, c.tn + c.fn_ + c.fp);
    Ok(0.5 * (object + other))
}

pub fn accuracy(pred: &Mask, gt: &Mask) -> Result<f64> {
    let c = confusion(pred, gt)?;
    Ok(ratio_or_one(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn_))
}

fn mean_nn_distance(from: &[Vec3], to: &KnnIndex) -> f64 {
    from.iter().map(|p| to.query(p, 1)[0].distance).sum::<f64>() / from.len() as f64
}

/// Symmetric Chamfer distance: the sum of the two directional mean
/// nearest-neighbour distances.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let ia = KnnIndex::new(a.to_vec())?;
    let ib = KnnIndex::new(b.to_vec())?;
    Ok(mean_nn_distance(a, &ib) + mean_nn_distance(b, &ia))
}
