//! Reconstruction and temporal-consistency objectives.

use crate::error::{Error, Result};
use crate::image::{FlowField, Image};
use crate::nn::kernels::warp_plane;
use crate::nn::{Graph, Tensor4, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconKind {
    L1,
    Mse,
}

impl std::str::FromStr for ReconKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(ReconKind::L1),
            "mse" | "l2" => Ok(ReconKind::Mse),
            _ => Err(Error::invalid(format!("reconstruction loss must be l1|mse, got `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_tc: f64,
    pub alpha: f64,
    /// First step (0-based) at which the temporal term is counted.
    pub l0: usize,
    pub recon: ReconKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_tc: 5.0,
            alpha: 50.0,
            l0: 2,
            recon: ReconKind::L1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, unroll: usize) -> Result<()> {
        if !(self.lambda_tc >= 0.0) || !(self.alpha > 0.0) {
            return Err(Error::invalid(format!(
                "need lambda_tc >= 0 and alpha > 0 (got {}, {})",
                self.lambda_tc, self.alpha
            )));
        }
        if self.l0 > unroll {
            return Err(Error::invalid(format!("L0 = {} exceeds L = {unroll}", self.l0)));
        }
        Ok(())
    }
}

fn check_flow(img: &Image, flow: &FlowField) -> Result<()> {
    if img.width != flow.width || img.height != flow.height {
        return Err(Error::shape(format!(
            "flow {}x{} for image {}x{}",
            flow.width, flow.height, img.width, img.height
        )));
    }
    Ok(())
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::shape(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// `out(u) = image(u + flow(u))`, bilinear with clamped sample positions.
pub fn backward_warp(image: &Image, flow: &FlowField) -> Result<Image> {
    check_flow(image, flow)?;
    let mut out = Image::new(image.width, image.height);
    warp_plane(
        &image.data,
        &flow.dx,
        &flow.dy,
        image.width,
        image.height,
        &mut out.data,
    );
    Ok(out)
}

/// `M(u) = exp(-α (I_k(u) - W(I_{k-1})(u))²)`.
pub fn occlusion_mask(gt_k: &Image, gt_km1: &Image, flow: &FlowField, alpha: f64) -> Result<Image> {
    check_pair(gt_k, gt_km1)?;
    let warped = backward_warp(gt_km1, flow)?;
    let data = gt_k
        .data
        .iter()
        .zip(&warped.data)
        .map(|(a, b)| (-alpha * (a - b) * (a - b)).exp())
        .collect();
    Image::from_vec(gt_k.width, gt_k.height, data)
}

/// Mean over pixels of `M ⊙ |Î_k - W(Î_{k-1})|`.
pub fn temporal_loss(pred_k: &Image, pred_km1: &Image, flow: &FlowField, mask: &Image) -> Result<f64> {
    check_pair(pred_k, pred_km1)?;
    check_pair(pred_k, mask)?;
    let warped = backward_warp(pred_km1, flow)?;
    let sum: f64 = pred_k
        .data
        .iter()
        .zip(&warped.data)
        .zip(&mask.data)
        .map(|((a, b), m)| m * (a - b).abs())
        .sum();
    Ok(sum / pred_k.len() as f64)
}

pub fn reconstruction_loss(pred: &Image, target: &Image, kind: ReconKind) -> Result<f64> {
    check_pair(pred, target)?;
    let sum: f64 = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| match kind {
            ReconKind::L1 => (a - b).abs(),
            ReconKind::Mse => (a - b) * (a - b),
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// `Σ_k recon[k] + λ_TC Σ_{k ≥ L0} temporal[k]`. `temporal[k]` pairs step `k`
/// with step `k-1`, so entry 0 is ignored whatever `L0` is.
pub fn total_loss(recon: &[f64], temporal: &[f64], config: &LossConfig) -> Result<f64> {
    if recon.len() != temporal.len() {
        return Err(Error::shape(format!(
            "{} reconstruction terms vs {} temporal terms",
            recon.len(),
            temporal.len()
        )));
    }
    let first = config.l0.max(1);
    let tc: f64 = temporal.iter().skip(first).sum();
    Ok(recon.iter().sum::<f64>() + config.lambda_tc * tc)
}

/// `[N, 2, H, W]` tensor from per-sample flows.
pub fn flow_tensor(flows: &[&FlowField]) -> Result<Tensor4> {
    let first = flows
        .first()
        .ok_or_else(|| Error::shape("no flow fields"))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(flows.len() * 2 * w * h);
    for f in flows {
        if f.width != w || f.height != h {
            return Err(Error::shape("flow fields differ in size"));
        }
        data.extend_from_slice(&f.dx);
        data.extend_from_slice(&f.dy);
    }
    Tensor4::from_vec([flows.len(), 2, h, w], data)
}

/// Mask tensor `[N, 1, H, W]` from ground truth, as a graph constant input.
pub fn mask_tensor(gt_k: &Tensor4, gt_km1: &Tensor4, flow: &Tensor4, alpha: f64) -> Result<Tensor4> {
    let warped = crate::nn::kernels::warp_forward(gt_km1, flow)?;
    if gt_k.shape() != warped.shape() {
        return Err(Error::shape(format!(
            "ground truth {:?} vs {:?}",
            gt_k.shape(),
            warped.shape()
        )));
    }
    let data = gt_k
        .data()
        .iter()
        .zip(warped.data())
        .map(|(a, b)| (-alpha * (a - b) * (a - b)).exp())
        .collect();
    Tensor4::from_vec(gt_k.shape(), data)
}

/// Differentiable reconstruction term, averaged over batch and pixels.
pub fn graph_reconstruction_loss(g: &mut Graph, pred: Var, target: Var, kind: ReconKind) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let e = match kind {
        ReconKind::L1 => g.abs(d),
        ReconKind::Mse => g.square(d),
    };
    Ok(g.mean(e))
}

/// Differentiable temporal term; gradients reach both predictions, the flow
/// and mask are constants.
pub fn graph_temporal_loss(g: &mut Graph, pred_k: Var, pred_km1: Var, flow: &Tensor4, mask: Var) -> Result<Var> {
    let warped = g.warp(pred_km1, flow.clone())?;
    let d = g.sub(pred_k, warped)?;
    let a = g.abs(d);
    let m = g.mul(mask, a)?;
    Ok(g.mean(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_function, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, _| x as f64 * 0.1)
    }

    #[test]
    fn zero_flow_is_identity() {
        let img = Image::from_fn(7, 5, |x, y| ((x * 13 + y * 7) % 10) as f64 / 10.0);
        assert_eq!(backward_warp(&img, &FlowField::zeros(7, 5)).unwrap(), img);
    }

    #[test]
    fn constant_flow_shifts_a_ramp() {
        let img = ramp(8, 4);
        let out = backward_warp(&img, &FlowField::constant(8, 4, -1.0, 0.0)).unwrap();
        for y in 0..4 {
            for x in 1..8 {
                assert!((out.get(x, y) - (img.get(x, y) - 0.1)).abs() < 1e-12);
            }
            assert_eq!(out.get(0, y), img.get(0, y));
        }
    }

    #[test]
    fn mask_closed_forms() {
        let a = Image::filled(4, 4, 0.3);
        let m = occlusion_mask(&a, &a, &FlowField::zeros(4, 4), 50.0).unwrap();
        assert!(m.data.iter().all(|v| *v == 1.0));
        let z = Image::filled(4, 4, 0.0);
        let o = Image::filled(4, 4, 1.0);
        let m = occlusion_mask(&o, &z, &FlowField::zeros(4, 4), 50.0).unwrap();
        assert!(m.data.iter().all(|v| (*v - (-50.0f64).exp()).abs() < 1e-30));
        let mut prev = 2.0;
        for e in [0.0, 0.05, 0.1, 0.3, 0.7, 1.0] {
            let k = Image::filled(1, 1, e);
            let w = occlusion_mask(&k, &Image::filled(1, 1, 0.0), &FlowField::zeros(1, 1), 50.0).unwrap().data[0];
            assert!(w < prev && w > 0.0 || e == 0.0 && w == 1.0);
            prev = w;
        }
    }

    #[test]
    fn temporal_loss_direct_sum() {
        let a = Image::from_vec(3, 3, vec![0.1, 0.5, 0.9, 0.2, 0.3, 0.4, 0.8, 0.7, 0.6]).unwrap();
        let b = Image::from_vec(3, 3, vec![0.0, 0.6, 0.2, 0.9, 0.1, 0.4, 0.5, 0.5, 0.3]).unwrap();
        let m = Image::from_vec(3, 3, vec![1.0, 0.5, 0.25, 0.0, 1.0, 0.75, 0.1, 0.2, 0.3]).unwrap();
        let flow = FlowField::zeros(3, 3);
        let mut want = 0.0;
        for i in 0..9 {
            want += m.data[i] * (a.data[i] - b.data[i]).abs();
        }
        want /= 9.0;
        assert!((temporal_loss(&a, &b, &flow, &m).unwrap() - want).abs() < 1e-15);
        assert_eq!(temporal_loss(&a, &b, &flow, &Image::new(3, 3)).unwrap(), 0.0);
        assert_eq!(temporal_loss(&a, &a, &flow, &m).unwrap(), 0.0);
    }

    #[test]
    fn reconstruction_closed_forms() {
        let z = Image::new(4, 3);
        let o = Image::filled(4, 3, 1.0);
        assert_eq!(reconstruction_loss(&z, &o, ReconKind::L1).unwrap(), 1.0);
        assert_eq!(reconstruction_loss(&z, &o, ReconKind::Mse).unwrap(), 1.0);
        assert_eq!(reconstruction_loss(&o, &o, ReconKind::L1).unwrap(), 0.0);
        let a = Image::from_fn(5, 5, |x, y| ((x * 3 + y * 11) % 7) as f64 / 7.0);
        let b = Image::from_fn(5, 5, |x, y| ((x * 5 + y * 2) % 9) as f64 / 9.0);
        let (mut l1, mut l2) = (0.0, 0.0);
        for y in 0..5 {
            for x in 0..5 {
                let d = a.get(x, y) - b.get(x, y);
                l1 += d.abs();
                l2 += d * d;
            }
        }
        assert!((reconstruction_loss(&a, &b, ReconKind::L1).unwrap() - l1 / 25.0).abs() < 1e-15);
        assert!((reconstruction_loss(&a, &b, ReconKind::Mse).unwrap() - l2 / 25.0).abs() < 1e-15);
    }

    #[test]
    fn total_loss_hand_sum() {
        let cfg = LossConfig::default();
        let r = [0.5, 0.25, 0.125];
        let t = [9.0, 0.3, 0.2];
        let want = 0.5 + 0.25 + 0.125 + 5.0 * 0.2;
        assert!((total_loss(&r, &t, &cfg).unwrap() - want).abs() < 1e-15);
        let pure = LossConfig { lambda_tc: 0.0, ..cfg };
        assert_eq!(total_loss(&r, &t, &pure).unwrap(), 0.875);
        assert_eq!(total_loss(&[0.0; 3], &[0.0; 3], &cfg).unwrap(), 0.0);
        let l = |lam: f64| total_loss(&r, &t, &LossConfig { lambda_tc: lam, ..cfg }).unwrap();
        assert!((l(3.0) - (l(0.0) + 3.0 * (l(1.0) - l(0.0)))).abs() < 1e-12);
    }

    #[test]
    fn graph_losses_match_image_versions() {
        let a = Image::from_fn(6, 5, |x, y| ((x * 3 + y * 11) % 7) as f64 / 7.0);
        let b = Image::from_fn(6, 5, |x, y| ((x * 5 + y * 2) % 9) as f64 / 9.0);
        let flow = FlowField::constant(6, 5, 0.4, -0.7);
        let mask = occlusion_mask(&a, &b, &flow, 50.0).unwrap();
        let ft = flow_tensor(&[&flow]).unwrap();
        let mut g = Graph::new();
        let (va, vb) = (g.input(Tensor4::from_image(&a)), g.input(Tensor4::from_image(&b)));
        let vm = g.input(Tensor4::from_image(&mask));
        let tl = graph_temporal_loss(&mut g, va, vb, &ft, vm).unwrap();
        let rl = graph_reconstruction_loss(&mut g, va, vb, ReconKind::L1).unwrap();
        assert!((g.value(tl).item() - temporal_loss(&a, &b, &flow, &mask).unwrap()).abs() < 1e-15);
        assert!((g.value(rl).item() - reconstruction_loss(&a, &b, ReconKind::L1).unwrap()).abs() < 1e-15);
        let mt = mask_tensor(&Tensor4::from_image(&a), &Tensor4::from_image(&b), &ft, 50.0).unwrap();
        assert_eq!(mt.data(), &mask.data[..]);
    }

    #[test]
    fn loss_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = [2, 1, 6, 7];
        let flow = random_tensor(&mut rng, [2, 2, 6, 7], 1.2);
        let mask = random_tensor(&mut rng, shape, 1.0);
        let leaves = vec![
            ("pred_k".to_string(), random_tensor(&mut rng, shape, 1.0)),
            ("pred_km1".to_string(), random_tensor(&mut rng, shape, 1.0)),
        ];
        let r = check_function(
            &leaves,
            |g, v| {
                let m = g.input(mask.clone());
                let t = graph_temporal_loss(g, v[0], v[1], &flow, m)?;
                let r1 = graph_reconstruction_loss(g, v[0], v[1], ReconKind::L1)?;
                let r2 = graph_reconstruction_loss(g, v[0], v[1], ReconKind::Mse)?;
                let s = g.add(t, r1)?;
                g.add(s, r2)
            },
            1,
            84,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
