//! Training loss: appearance + smoothness + left-right consistency + weight
//! decay, each evaluated for both stereo sides.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::depth::DisparityMap;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

use super::{CapsNetParams, StereoPair};

/// Term weights of the training loss.
///
/// The regularizing term is realized as weight decay
/// `zeta_coef * sum |params|^2`; `zeta_coef = 0` reduces it to a literal
/// constant (zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_ap: f64,
    pub alpha_ds: f64,
    pub alpha_lr: f64,
    pub zeta_coef: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha_ap: 1.0, alpha_ds: 0.1, alpha_lr: 1.0, zeta_coef: 1e-4 }
    }
}

impl LossWeights {
    fn validate_non_negative(&self) -> Result<()> {
        let all = [self.alpha_ap, self.alpha_ds, self.alpha_lr, self.zeta_coef];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Training-time validation: a weight set with every alpha zero trains
    /// nothing.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate_non_negative()?;
        if self.alpha_ap <= 0.0 && self.alpha_ds <= 0.0 && self.alpha_lr <= 0.0 {
            return Err(Error::InvalidConfig("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// SSIM + L1 mixing weight.
const SSIM_ALPHA: f64 = 0.85;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Charbonnier knees of the absolute-value terms, sized to each term's
/// units (intensities vs disparity pixels) so the knee swallows the
/// optimizer's per-step jitter.
const ABS_EPS_INTENSITY: f64 = 1e-3;
const ABS_EPS_DISPARITY: f64 = 5e-2;

/// Smoothed |x|: `sqrt(x^2 + eps^2) - eps`. Exactly zero at zero and within
/// `eps` of |x| everywhere, but with a continuous gradient, which keeps
/// Adam from limit-cycling on the L1 cones.
fn smooth_abs(tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
    let sq = tape.square(x)?;
    let sq = tape.add_scalar(sq, eps * eps)?;
    let r = tape.sqrt(sq)?;
    tape.add_scalar(r, -eps)
}

fn image_leaf(tape: &mut Tape, img: &ImageBuffer) -> Result<Var> {
    let t = Tensor::new(vec![img.height(), img.width()], img.data().to_vec())?;
    Ok(tape.leaf(t, false))
}

fn grid_leaves(tape: &mut Tape, w: usize, h: usize) -> (Var, Var) {
    let mut us = Vec::with_capacity(w * h);
    let mut vs = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            us.push(x as f64);
            vs.push(y as f64);
        }
    }
    let u = tape.leaf(Tensor::new(vec![h, w], us).expect("sized"), false);
    let v = tape.leaf(Tensor::new(vec![h, w], vs).expect("sized"), false);
    (u, v)
}

/// Mean of `x` restricted to columns `[skip_left, W - skip_right)`,
/// realized as a constant 0/1 mask so gradients flow only through the
/// retained pixels.
fn masked_mean(
    tape: &mut Tape,
    x: Var,
    skip_left: usize,
    skip_right: usize,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let w = *shape.last().expect("non-scalar");
    if skip_left + skip_right == 0 {
        return tape.mean(x);
    }
    if skip_left + skip_right >= w {
        return Err(Error::ShapeMismatch(format!(
            "mask {skip_left}+{skip_right} leaves no columns of {w}"
        )));
    }
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let mut mask = vec![0.0; rows * w];
    for r in 0..rows {
        for c in skip_left..(w - skip_right) {
            mask[r * w + c] = 1.0;
        }
    }
    let count = (rows * (w - skip_left - skip_right)) as f64;
    let mask = tape.leaf(Tensor::new(shape, mask)?, false);
    let masked = tape.mul(x, mask)?;
    let total = tape.sum(masked)?;
    tape.scale(total, 1.0 / count)
}

/// `mean(alpha (1 - SSIM)/2) + (1 - alpha) mean(|a - b|)` on `(H, W)` vars,
/// with `skip_left`/`skip_right` columns excluded from both means. The
/// exclusion drops the band where disparity-shifted sampling would leave
/// the opposite image; edge-clamped junk there would otherwise penalize
/// large disparities outright on small images.
pub(crate) fn appearance_on_tape(
    tape: &mut Tape,
    a: Var,
    b: Var,
    skip_left: usize,
    skip_right: usize,
) -> Result<Var> {
    let shape = tape.value(a).shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    let a3 = tape.reshape(a, vec![1, h, w])?;
    let b3 = tape.reshape(b, vec![1, h, w])?;
    let mean_k = tape.leaf(Tensor::filled(vec![1, 1, 3, 3], 1.0 / 9.0), false);

    let mu_a = tape.conv2d(a3, mean_k, 1, 0)?;
    let mu_b = tape.conv2d(b3, mean_k, 1, 0)?;
    let aa = tape.mul(a3, a3)?;
    let bb = tape.mul(b3, b3)?;
    let ab = tape.mul(a3, b3)?;
    let m_aa = tape.conv2d(aa, mean_k, 1, 0)?;
    let m_bb = tape.conv2d(bb, mean_k, 1, 0)?;
    let m_ab = tape.conv2d(ab, mean_k, 1, 0)?;

    let mu_a2 = tape.mul(mu_a, mu_a)?;
    let mu_b2 = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(m_aa, mu_a2)?;
    let var_b = tape.sub(m_bb, mu_b2)?;
    let cov = tape.sub(m_ab, mu_ab)?;

    let n1 = tape.scale(mu_ab, 2.0)?;
    let n1 = tape.add_scalar(n1, SSIM_C1)?;
    let n2 = tape.scale(cov, 2.0)?;
    let n2 = tape.add_scalar(n2, SSIM_C2)?;
    let num = tape.mul(n1, n2)?;
    let d1 = tape.add(mu_a2, mu_b2)?;
    let d1 = tape.add_scalar(d1, SSIM_C1)?;
    let d2 = tape.add(var_a, var_b)?;
    let d2 = tape.add_scalar(d2, SSIM_C2)?;
    let den = tape.mul(d1, d2)?;
    let ssim = tape.div(num, den)?;

    let one_minus = tape.scale(ssim, -1.0)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    // The SSIM map lost one pixel per border to the valid convolution.
    let ssim_term = masked_mean(tape, one_minus, skip_left.saturating_sub(1), skip_right.saturating_sub(1))?;
    let ssim_term = tape.scale(ssim_term, SSIM_ALPHA * 0.5)?;

    let diff = tape.sub(a, b)?;
    let l1 = smooth_abs(tape, diff, ABS_EPS_INTENSITY)?;
    let l1_term = masked_mean(tape, l1, skip_left, skip_right)?;
    let l1_term = tape.scale(l1_term, 1.0 - SSIM_ALPHA)?;

    tape.add(ssim_term, l1_term)
}

/// Edge-aware smoothness: `mean(|dx d| e^{-|dx I|}) + mean(|dy d| e^{-|dy I|})`.
pub(crate) fn smoothness_on_tape(tape: &mut Tape, disp: Var, image: &ImageBuffer) -> Result<Var> {
    let shape = tape.value(disp).shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    if image.width() != w || image.height() != h {
        return Err(Error::DimensionMismatch(format!(
            "smoothness: disparity {h}x{w} vs image {}x{}",
            image.height(),
            image.width()
        )));
    }
    let d3 = tape.reshape(disp, vec![1, h, w])?;
    let kx = tape.leaf(Tensor::new(vec![1, 1, 1, 2], vec![-1.0, 1.0])?, false);
    let ky = tape.leaf(Tensor::new(vec![1, 1, 2, 1], vec![-1.0, 1.0])?, false);

    // Image gradients enter as constants: the image carries no gradient.
    let mut wx = Vec::with_capacity(h * (w - 1));
    for y in 0..h {
        for x in 0..w - 1 {
            wx.push((-(image.get(x + 1, y) - image.get(x, y)).abs()).exp());
        }
    }
    let mut wy = Vec::with_capacity((h - 1) * w);
    for y in 0..h - 1 {
        for x in 0..w {
            wy.push((-(image.get(x, y + 1) - image.get(x, y)).abs()).exp());
        }
    }
    let wx = tape.leaf(Tensor::new(vec![1, h, w - 1], wx)?, false);
    let wy = tape.leaf(Tensor::new(vec![1, h - 1, w], wy)?, false);

    let gx = tape.conv2d(d3, kx, 1, 0)?;
    let gx = smooth_abs(tape, gx, ABS_EPS_DISPARITY)?;
    let gx = tape.mul(gx, wx)?;
    let tx = tape.mean(gx)?;

    let gy = tape.conv2d(d3, ky, 1, 0)?;
    let gy = smooth_abs(tape, gy, ABS_EPS_DISPARITY)?;
    let gy = tape.mul(gy, wy)?;
    let ty = tape.mean(gy)?;

    tape.add(tx, ty)
}

/// Left-right consistency for one side: `mean |d_a(u) - d_b(u + sign d_a(u))|`,
/// restricted to the columns whose shifted sample stays inside the field.
pub(crate) fn lr_on_tape(
    tape: &mut Tape,
    d_a: Var,
    d_b: Var,
    sign: f64,
    skip_left: usize,
    skip_right: usize,
) -> Result<Var> {
    let shape = tape.value(d_a).shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    let (ugrid, vgrid) = grid_leaves(tape, w, h);
    let offset = tape.scale(d_a, sign)?;
    let coords_x = tape.add(ugrid, offset)?;
    let sampled = tape.bilinear_sample(d_b, coords_x, vgrid)?;
    let diff = tape.sub(d_a, sampled)?;
    let diff = smooth_abs(tape, diff, ABS_EPS_DISPARITY)?;
    masked_mean(tape, diff, skip_left, skip_right)
}

/// Reconstruction of one side by sampling the opposite image at
/// disparity-shifted positions, on the tape.
pub(crate) fn reconstruct_on_tape(
    tape: &mut Tape,
    opposite: Var,
    disp: Var,
    sign: f64,
) -> Result<Var> {
    let shape = tape.value(disp).shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    let (ugrid, vgrid) = grid_leaves(tape, w, h);
    let offset = tape.scale(disp, sign)?;
    let coords_x = tape.add(ugrid, offset)?;
    tape.bilinear_sample(opposite, coords_x, vgrid)
}

/// All loss terms of one stereo pair.
pub(crate) struct LossNodes {
    pub total: Var,
    pub l_ap: f64,
    pub l_ds: f64,
    pub l_lr: f64,
    pub zeta: f64,
}

/// Columns to exclude on the sampling side: the usable disparity range
/// cannot exceed the image, and at least one column must survive.
pub(crate) fn border_margin(d_max: f64, width: usize) -> usize {
    (d_max.ceil() as usize).min(width.saturating_sub(2) / 2)
}

pub(crate) fn loss_on_tape(
    tape: &mut Tape,
    pair: &StereoPair,
    disp_left: Var,
    disp_right: Var,
    param_vars: &[(String, Var)],
    weights: &LossWeights,
    d_max: f64,
) -> Result<LossNodes> {
    weights.validate_non_negative()?;
    let margin = border_margin(d_max, pair.left.width());
    let left = image_leaf(tape, &pair.left)?;
    let right = image_leaf(tape, &pair.right)?;

    // Left-aligned terms sample the right image at u - d: the left band is
    // unobservable. Right-aligned terms mirror it.
    let rec_left = reconstruct_on_tape(tape, right, disp_left, -1.0)?;
    let rec_right = reconstruct_on_tape(tape, left, disp_right, 1.0)?;
    let ap_left = appearance_on_tape(tape, left, rec_left, margin, 0)?;
    let ap_right = appearance_on_tape(tape, right, rec_right, 0, margin)?;
    let l_ap = tape.add(ap_left, ap_right)?;

    let ds_left = smoothness_on_tape(tape, disp_left, &pair.left)?;
    let ds_right = smoothness_on_tape(tape, disp_right, &pair.right)?;
    let l_ds = tape.add(ds_left, ds_right)?;

    let lr_left = lr_on_tape(tape, disp_left, disp_right, -1.0, margin, 0)?;
    let lr_right = lr_on_tape(tape, disp_right, disp_left, 1.0, 0, margin)?;
    let l_lr = tape.add(lr_left, lr_right)?;

    let mut zeta = tape.leaf(Tensor::scalar(0.0), false);
    if weights.zeta_coef > 0.0 {
        for (_, var) in param_vars {
            let sq = tape.square(*var)?;
            let s = tape.sum(sq)?;
            zeta = tape.add(zeta, s)?;
        }
        zeta = tape.scale(zeta, weights.zeta_coef)?;
    }

    let t_ap = tape.scale(l_ap, weights.alpha_ap)?;
    let t_ds = tape.scale(l_ds, weights.alpha_ds)?;
    let t_lr = tape.scale(l_lr, weights.alpha_lr)?;
    let partial = tape.add(t_ap, t_ds)?;
    let partial = tape.add(partial, t_lr)?;
    let total = tape.add(partial, zeta)?;

    Ok(LossNodes {
        total,
        l_ap: tape.value(l_ap).item()?,
        l_ds: tape.value(l_ds).item()?,
        l_lr: tape.value(l_lr).item()?,
        zeta: tape.value(zeta).item()?,
    })
}

/// Appearance loss between an image and its reconstruction.
pub fn loss_appearance(image: &ImageBuffer, reconstruction: &ImageBuffer) -> Result<f64> {
    loss_appearance_region(image, reconstruction, 0, 0)
}

/// Appearance loss with `skip_left`/`skip_right` columns excluded, matching
/// the training loss's treatment of the disparity-unobservable band.
pub fn loss_appearance_region(
    image: &ImageBuffer,
    reconstruction: &ImageBuffer,
    skip_left: usize,
    skip_right: usize,
) -> Result<f64> {
    if image.width() != reconstruction.width() || image.height() != reconstruction.height() {
        return Err(Error::DimensionMismatch(format!(
            "appearance: {}x{} vs {}x{}",
            image.width(),
            image.height(),
            reconstruction.width(),
            reconstruction.height()
        )));
    }
    let mut tape = Tape::new();
    let a = image_leaf(&mut tape, image)?;
    let b = image_leaf(&mut tape, reconstruction)?;
    let l = appearance_on_tape(&mut tape, a, b, skip_left, skip_right)?;
    tape.value(l).item()
}

/// Edge-aware smoothness loss of a disparity field under its image.
pub fn loss_smoothness(disparity: &DisparityMap, image: &ImageBuffer) -> Result<f64> {
    let mut tape = Tape::new();
    let d = tape.leaf(
        Tensor::new(
            vec![disparity.height(), disparity.width()],
            disparity.values().to_vec(),
        )?,
        false,
    );
    let l = smoothness_on_tape(&mut tape, d, image)?;
    tape.value(l).item()
}

/// Left-right consistency loss, summed over both sides.
pub fn loss_lr(disp_left: &DisparityMap, disp_right: &DisparityMap) -> Result<f64> {
    if disp_left.width() != disp_right.width() || disp_left.height() != disp_right.height() {
        return Err(Error::DimensionMismatch(format!(
            "lr: {}x{} vs {}x{}",
            disp_left.width(),
            disp_left.height(),
            disp_right.width(),
            disp_right.height()
        )));
    }
    let mut tape = Tape::new();
    let dl = tape.leaf(
        Tensor::new(
            vec![disp_left.height(), disp_left.width()],
            disp_left.values().to_vec(),
        )?,
        false,
    );
    let dr = tape.leaf(
        Tensor::new(
            vec![disp_right.height(), disp_right.width()],
            disp_right.values().to_vec(),
        )?,
        false,
    );
    let a = lr_on_tape(&mut tape, dl, dr, -1.0, 0, 0)?;
    let b = lr_on_tape(&mut tape, dr, dl, 1.0, 0, 0)?;
    let s = tape.add(a, b)?;
    tape.value(s).item()
}

/// Full training loss of one pair under the given parameters.
pub fn loss_total(pair: &StereoPair, params: &CapsNetParams, weights: &LossWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let param_vars = params.add_to_tape(&mut tape, false);
    let img = image_leaf(&mut tape, &pair.left)?;
    let fwd = params.forward(&mut tape, &param_vars, img)?;
    let nodes = loss_on_tape(
        &mut tape,
        pair,
        fwd.disp_left,
        fwd.disp_right,
        &param_vars,
        weights,
        params.config().d_max,
    )?;
    let v = tape.value(nodes.total).item()?;
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss(0));
    }
    Ok(v)
}

/// Loss value plus its gradient for every parameter, by one forward and one
/// reverse pass.
pub fn loss_gradients(
    pair: &StereoPair,
    params: &CapsNetParams,
    weights: &LossWeights,
) -> Result<(f64, crate::autodiff::NamedParams)> {
    let mut tape = Tape::new();
    let param_vars = params.add_to_tape(&mut tape, true);
    let img = image_leaf(&mut tape, &pair.left)?;
    let fwd = params.forward(&mut tape, &param_vars, img)?;
    let nodes = loss_on_tape(
        &mut tape,
        pair,
        fwd.disp_left,
        fwd.disp_right,
        &param_vars,
        weights,
        params.config().d_max,
    )?;
    let value = tape.value(nodes.total).item()?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(0));
    }
    let grads = tape.backward(nodes.total)?;
    let named = param_vars
        .iter()
        .map(|(name, var)| {
            let g = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(*var).shape().to_vec()));
            (name.clone(), g)
        })
        .collect();
    Ok((value, named))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraIntrinsics;
    use crate::capsnet::{CapsNetConfig, CapsNetParams};

    fn textured(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |x, y| {
            0.5 + 0.3 * ((x as f64 * 0.9).sin() * (y as f64 * 0.7).cos())
        })
    }

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(16.0, 16.0, 7.5, 7.5, Some(0.5)).unwrap()
    }

    #[test]
    fn perfect_reconstruction_has_zero_appearance_loss() {
        let img = textured(12, 10);
        assert_eq!(loss_appearance(&img, &img).unwrap(), 0.0);
        let other = textured(12, 10).offset(0.1);
        assert!(loss_appearance(&img, &other).unwrap() > 0.0);
    }

    #[test]
    fn constant_disparity_has_zero_smoothness() {
        let img = textured(12, 10);
        let d = DisparityMap::from_values(12, 10, vec![2.0; 120], 4.0).unwrap();
        assert_eq!(loss_smoothness(&d, &img).unwrap(), 0.0);
        let ramp =
            DisparityMap::from_values(12, 10, (0..120).map(|i| (i % 12) as f64 * 0.3).collect(), 4.0)
                .unwrap();
        assert!(loss_smoothness(&ramp, &img).unwrap() > 0.0);
    }

    #[test]
    fn consistent_constant_fields_have_zero_lr_loss() {
        let c = DisparityMap::from_values(10, 8, vec![1.5; 80], 3.0).unwrap();
        assert_eq!(loss_lr(&c, &c).unwrap(), 0.0);
        let other = DisparityMap::from_values(10, 8, vec![2.5; 80], 3.0).unwrap();
        assert!(loss_lr(&c, &other).unwrap() > 0.0);
    }

    #[test]
    fn zero_weights_give_zero_loss() {
        let pair = StereoPair::new(textured(8, 8), textured(8, 8), intr()).unwrap();
        let params = CapsNetParams::init(CapsNetConfig::for_input(8, 8), 3).unwrap();
        let w = LossWeights { alpha_ap: 0.0, alpha_ds: 0.0, alpha_lr: 0.0, zeta_coef: 0.0 };
        assert_eq!(loss_total(&pair, &params, &w).unwrap(), 0.0);
        // A weight set that trains nothing is rejected at training time.
        assert!(w.validate_for_training().is_err());
    }

    #[test]
    fn loss_total_is_linear_in_its_terms() {
        let left = textured(8, 8);
        let right = ImageBuffer::from_fn(8, 8, |x, y| left.get(x.saturating_sub(1), y));
        let pair = StereoPair::new(left, right, intr()).unwrap();
        let params = CapsNetParams::init(CapsNetConfig::for_input(8, 8), 3).unwrap();

        let ap_only = LossWeights { alpha_ap: 1.0, alpha_ds: 0.0, alpha_lr: 0.0, zeta_coef: 0.0 };
        let ds_only = LossWeights { alpha_ap: 0.0, alpha_ds: 1.0, alpha_lr: 0.0, zeta_coef: 0.0 };
        let lr_only = LossWeights { alpha_ap: 0.0, alpha_ds: 0.0, alpha_lr: 1.0, zeta_coef: 0.0 };
        let all = LossWeights { alpha_ap: 1.0, alpha_ds: 1.0, alpha_lr: 1.0, zeta_coef: 0.0 };

        let a = loss_total(&pair, &params, &ap_only).unwrap();
        let d = loss_total(&pair, &params, &ds_only).unwrap();
        let l = loss_total(&pair, &params, &lr_only).unwrap();
        let t = loss_total(&pair, &params, &all).unwrap();
        assert!((t - (a + d + l)).abs() < 1e-12);

        // The appearance-only total equals the two appearance terms computed
        // independently from the predicted disparities, over the same
        // unobservable-band exclusion the training loss applies.
        let margin = border_margin(params.config().d_max, pair.left.width());
        let (dl, dr) = params.predict_disparity(&pair.left).unwrap();
        let (rec_l, _) = crate::capsnet::reconstruct(&pair.right, &dl, crate::capsnet::Direction::Left)
            .unwrap();
        let (rec_r, _) =
            crate::capsnet::reconstruct(&pair.left, &dr, crate::capsnet::Direction::Right).unwrap();
        let expected = loss_appearance_region(&pair.left, &rec_l, margin, 0).unwrap()
            + loss_appearance_region(&pair.right, &rec_r, 0, margin).unwrap();
        assert!((a - expected).abs() < 1e-12, "{a} vs {expected}");
    }

    #[test]
    fn zeta_term_is_weight_decay() {
        let pair = StereoPair::new(textured(8, 8), textured(8, 8), intr()).unwrap();
        let params = CapsNetParams::init(CapsNetConfig::for_input(8, 8), 9).unwrap();
        let base = LossWeights { alpha_ap: 1.0, alpha_ds: 0.0, alpha_lr: 0.0, zeta_coef: 0.0 };
        let with_zeta = LossWeights { zeta_coef: 1e-3, ..base };
        let l0 = loss_total(&pair, &params, &base).unwrap();
        let l1 = loss_total(&pair, &params, &with_zeta).unwrap();
        let sq_sum: f64 = params
            .named()
            .values()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum();
        assert!((l1 - l0 - 1e-3 * sq_sum).abs() < 1e-9);
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        // 20-parameter slice of the decoder bias/weights, probed through the
        // complete forward + loss graph.
        let left = textured(8, 8);
        let right = ImageBuffer::from_fn(8, 8, |x, y| left.get(x.saturating_sub(1), y));
        let pair = StereoPair::new(left, right, intr()).unwrap();
        let params = CapsNetParams::init(CapsNetConfig::for_input(8, 8), 11).unwrap();
        let weights = LossWeights::default();

        let eval = |p: &CapsNetParams| -> f64 {
            let mut tape = Tape::new();
            let vars = p.add_to_tape(&mut tape, false);
            let img = image_leaf(&mut tape, &pair.left).unwrap();
            let fwd = p.forward(&mut tape, &vars, img).unwrap();
            let nodes =
                loss_on_tape(&mut tape, &pair, fwd.disp_left, fwd.disp_right, &vars, &weights, p.config().d_max)
                    .unwrap();
            tape.value(nodes.total).item().unwrap()
        };

        let mut tape = Tape::new();
        let vars = params.add_to_tape(&mut tape, true);
        let img = image_leaf(&mut tape, &pair.left).unwrap();
        let fwd = params.forward(&mut tape, &vars, img).unwrap();
        let nodes =
            loss_on_tape(&mut tape, &pair, fwd.disp_left, fwd.disp_right, &vars, &weights, params.config().d_max).unwrap();
        let grads = tape.backward(nodes.total).unwrap();

        let h = 1e-5;
        let mut checked = 0;
        for (name, var) in &vars {
            if !(name == "dec2.w" || name == "dec3l.b" || name == "dec3r.w") {
                continue;
            }
            let ad = grads.get(*var).expect("param gradient").clone();
            let n = params.named()[name].numel();
            let stride = (n / 10).max(1);
            for e in (0..n).step_by(stride) {
                let orig = params.named()[name].data()[e];
                let mut plus = params.named().clone();
                plus.get_mut(name).unwrap().data_mut()[e] = orig + h;
                let mut minus = params.named().clone();
                minus.get_mut(name).unwrap().data_mut()[e] = orig - h;
                let fp = eval(&CapsNetParams::from_named(params.config().clone(), plus).unwrap());
                let fm = eval(&CapsNetParams::from_named(params.config().clone(), minus).unwrap());
                let fd = (fp - fm) / (2.0 * h);
                let a = ad.data()[e];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(0.01);
                assert!(
                    rel < 1e-3,
                    "{name}[{e}]: ad {a:.6e} vs fd {fd:.6e} (rel {rel:.2e})"
                );
                checked += 1;
            }
        }
        assert!(checked >= 20, "only {checked} elements checked");
    }
}
