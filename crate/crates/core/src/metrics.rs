//! Image-quality and temporal-consistency metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::{FlowField, Image};
use crate::losses::{occlusion_mask, temporal_loss};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::shape(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" filtering: output is `(w-k+1) x (h-k+1)`.
fn filter_valid(data: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &data[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (j, kj) in k.iter().enumerate() {
                s += kj * rows[(y + j) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (σ = 1.5), dynamic range
/// 1, averaged over positions where the window fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let (w, h) = (a.width, a.height);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect()
    };
    let mu_a = filter_valid(&a.data, w, h, &k);
    let mu_b = filter_valid(&b.data, w, h, &k);
    let aa = filter_valid(&prod(&|x, _| x * x), w, h, &k);
    let bb = filter_valid(&prod(&|_, y| y * y), w, h, &k);
    let ab = filter_valid(&prod(&|x, y| x * y), w, h, &k);
    let (c1, c2) = ((K1 * K1), (K2 * K2));
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// 8-bit bin of a value in `[0, 1]`.
fn bin_of(v: f64) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

fn tile_bounds(n: usize, tiles: usize, t: usize) -> (usize, usize) {
    (t * n / tiles, (t + 1) * n / tiles)
}

/// Contrast-limited adaptive histogram equalization on a `tiles x tiles` grid
/// with 256 bins. `clip` is relative to the mean bin count; excess is spread
/// evenly over all bins. Tile maps are blended bilinearly between tile centers.
pub fn local_hist_eq(img: &Image, tiles: usize, clip: f64) -> Result<Image> {
    if tiles == 0 || img.width < 2 * tiles || img.height < 2 * tiles {
        return Err(Error::shape(format!(
            "{}x{} image is too small for a {tiles}x{tiles} tile grid",
            img.width, img.height
        )));
    }
    let (w, h) = (img.width, img.height);
    let bins: Vec<u8> = img.data.iter().map(|v| bin_of(*v) as u8).collect();
    let mut luts = vec![[0.0f64; 256]; tiles * tiles];
    for ty in 0..tiles {
        let (y0, y1) = tile_bounds(h, tiles, ty);
        for tx in 0..tiles {
            let (x0, x1) = tile_bounds(w, tiles, tx);
            let mut hist = [0.0f64; 256];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[bins[y * w + x] as usize] += 1.0;
                }
            }
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            if clip > 0.0 {
                let limit = (clip * count / 256.0).max(1.0);
                let mut excess = 0.0;
                for v in hist.iter_mut() {
                    if *v > limit {
                        excess += *v - limit;
                        *v = limit;
                    }
                }
                let share = excess / 256.0;
                hist.iter_mut().for_each(|v| *v += share);
            }
            let lut = &mut luts[ty * tiles + tx];
            let mut acc = 0.0;
            for (b, v) in hist.iter().enumerate() {
                acc += v;
                lut[b] = (acc / count).min(1.0);
            }
        }
    }
    // tile centres in pixel coordinates
    let centre = |n: usize, t: usize| {
        let (a, b) = tile_bounds(n, tiles, t);
        (a + b) as f64 / 2.0 - 0.5
    };
    let locate = |n: usize, p: usize| -> (usize, usize, f64) {
        let p = p as f64;
        if p <= centre(n, 0) {
            return (0, 0, 0.0);
        }
        if p >= centre(n, tiles - 1) {
            return (tiles - 1, tiles - 1, 0.0);
        }
        let mut t = 0;
        while centre(n, t + 1) < p {
            t += 1;
        }
        let (c0, c1) = (centre(n, t), centre(n, t + 1));
        (t, t + 1, (p - c0) / (c1 - c0))
    };
    let xs: Vec<_> = (0..w).map(|x| locate(w, x)).collect();
    let ys: Vec<_> = (0..h).map(|y| locate(h, y)).collect();
    let mut out = Image::new(w, h);
    for (y, &(ty0, ty1, fy)) in ys.iter().enumerate() {
        for (x, &(tx0, tx1, fx)) in xs.iter().enumerate() {
            let b = bins[y * w + x] as usize;
            let lerp = |a: f64, b: f64, f: f64| a + (b - a) * f;
            let top = lerp(luts[ty0 * tiles + tx0][b], luts[ty0 * tiles + tx1][b], fx);
            let bot = lerp(luts[ty1 * tiles + tx0][b], luts[ty1 * tiles + tx1][b], fx);
            out.data[y * w + x] = lerp(top, bot, fy).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Default CLAHE used by the evaluation protocol.
pub fn equalize(img: &Image) -> Result<Image> {
    local_hist_eq(img, 8, 2.0)
}

/// Mean over consecutive pairs of the masked warping error. `flows[k]` maps
/// frame `k+1` back onto frame `k`; masks come from the ground truth.
pub fn temporal_error(frames: &[Image], flows: &[FlowField], gts: &[Image], alpha: f64) -> Result<f64> {
    if frames.len() != gts.len() || flows.len() + 1 != frames.len() {
        return Err(Error::shape(format!(
            "{} frames, {} ground-truth frames, {} flows",
            frames.len(),
            gts.len(),
            flows.len()
        )));
    }
    if flows.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for k in 1..frames.len() {
        let mask = occlusion_mask(&gts[k], &gts[k - 1], &flows[k - 1], alpha)?;
        total += temporal_loss(&frames[k], &frames[k - 1], &flows[k - 1], &mask)?;
    }
    Ok(total / flows.len() as f64)
}

/// For each reference time, the index of the nearest query time within
/// `tol`. Both slices must be sorted.
pub fn match_timestamps(queries: &[f64], references: &[f64], tol: f64) -> Vec<Option<usize>> {
    let mut j = 0;
    references
        .iter()
        .map(|&t| {
            while j + 1 < queries.len() && (queries[j + 1] - t).abs() <= (queries[j] - t).abs() {
                j += 1;
            }
            queries
                .get(j)
                .filter(|q| (*q - t).abs() <= tol + 1e-12)
                .map(|_| j)
        })
        .collect()
}

/// Frame matching and exclusion settings for [`evaluate_sequence`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Matching tolerance in seconds.
    pub tolerance: f64,
    /// Ground-truth frames earlier than `first_gt + skip_head` are ignored.
    pub skip_head: f64,
    /// Ground-truth frames later than `last_gt - skip_tail` are ignored.
    pub skip_tail: f64,
    pub alpha: f64,
    /// Apply [`equalize`] to both sides before scoring.
    pub equalize: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-3,
            skip_head: 0.0,
            skip_tail: 0.0,
            alpha: 50.0,
            equalize: true,
        }
    }
}

/// Scores reconstructions against a ground-truth sequence. Each kept
/// ground-truth frame is paired with the reconstruction nearest in time;
/// frames without one inside the tolerance are counted as skipped. Temporal
/// error is averaged over consecutive ground-truth frames that both matched.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_sequence(
    name: &str,
    rec_times: &[f64],
    rec: &[Image],
    gt_times: &[f64],
    gt: &[Image],
    gt_flows: &[FlowField],
    opts: &EvalOptions,
) -> Result<SequenceMetrics> {
    if rec_times.len() != rec.len() || gt_times.len() != gt.len() || gt_flows.len() + 1 != gt.len().max(1) {
        return Err(Error::shape(format!(
            "{name}: {} reconstruction times for {} frames, {} gt times for {} frames, {} flows",
            rec_times.len(),
            rec.len(),
            gt_times.len(),
            gt.len(),
            gt_flows.len()
        )));
    }
    let (Some(&first), Some(&last)) = (gt_times.first(), gt_times.last()) else {
        return Err(Error::invalid(format!("{name}: no ground-truth frames")));
    };
    let prep = |img: &Image| if opts.equalize { equalize(img) } else { Ok(img.clone()) };
    let matches = match_timestamps(rec_times, gt_times, opts.tolerance);
    let mut scored: Vec<Option<(Image, Image)>> = vec![None; gt.len()];
    let mut skipped = 0;
    for (k, m) in matches.iter().enumerate() {
        let t = gt_times[k];
        if t < first + opts.skip_head - 1e-12 || t > last - opts.skip_tail + 1e-12 {
            continue;
        }
        match m {
            Some(j) => scored[k] = Some((prep(&rec[*j])?, prep(&gt[k])?)),
            None => skipped += 1,
        }
    }
    let pairs = scored.iter().flatten().count();
    if pairs == 0 {
        return Err(Error::invalid(format!(
            "{name}: no reconstruction within {} s of any ground-truth frame",
            opts.tolerance
        )));
    }
    let (mut mse_sum, mut ssim_sum) = (0.0, 0.0);
    for (r, g) in scored.iter().flatten() {
        mse_sum += mse(r, g)?;
        ssim_sum += ssim(r, g)?;
    }
    let (mut tc_sum, mut tc_pairs) = (0.0, 0);
    for k in 1..gt.len() {
        if let (Some((r0, g0)), Some((r1, g1))) = (&scored[k - 1], &scored[k]) {
            let f = std::slice::from_ref(&gt_flows[k - 1]);
            tc_sum += temporal_error(&[r0.clone(), r1.clone()], f, &[g0.clone(), g1.clone()], opts.alpha)?;
            tc_pairs += 1;
        }
    }
    Ok(SequenceMetrics {
        name: name.to_string(),
        mse: mse_sum / pairs as f64,
        ssim: ssim_sum / pairs as f64,
        temporal_error: if tc_pairs > 0 { tc_sum / tc_pairs as f64 } else { 0.0 },
        pairs,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceMetrics {
    pub name: String,
    pub mse: f64,
    pub ssim: f64,
    pub temporal_error: f64,
    /// Frame pairs compared.
    pub pairs: usize,
    /// Ground-truth frames without a reconstruction inside the tolerance.
    pub skipped: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub sequences: Vec<SequenceMetrics>,
}

impl EvalReport {
    /// Unweighted mean over sequences.
    pub fn mean(&self) -> SequenceMetrics {
        let n = self.sequences.len().max(1) as f64;
        let sum = |f: fn(&SequenceMetrics) -> f64| self.sequences.iter().map(f).sum::<f64>() / n;
        SequenceMetrics {
            name: "mean".into(),
            mse: sum(|s| s.mse),
            ssim: sum(|s| s.ssim),
            temporal_error: sum(|s| s.temporal_error),
            pairs: self.sequences.iter().map(|s| s.pairs).sum(),
            skipped: self.sequences.iter().map(|s| s.skipped).sum(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,mse,ssim,temporal_error,pairs,skipped\n");
        for s in self.sequences.iter().chain(std::iter::once(&self.mean())) {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{},{}",
                s.name, s.mse, s.ssim, s.temporal_error, s.pairs, s.skipped
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<20} {:>10} {:>10} {:>10} {:>6} {:>7}\n",
            "sequence", "MSE", "SSIM", "temporal", "pairs", "skipped"
        );
        for s in self.sequences.iter().chain(std::iter::once(&self.mean())) {
            let _ = writeln!(
                out,
                "{:<20} {:>10.4} {:>10.4} {:>10.4} {:>6} {:>7}",
                s.name, s.mse, s.ssim, s.temporal_error, s.pairs, s.skipped
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(w: usize, h: usize, seed: u64) -> Image {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Image::from_fn(w, h, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    /// Direct per-window SSIM with explicit 2-D weights.
    fn ssim_brute(a: &Image, b: &Image) -> f64 {
        let k = gaussian_kernel(11, 1.5);
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=a.height - 11 {
            for x0 in 0..=a.width - 11 {
                let (mut ma, mut mb) = (0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let wgt = k[i] * k[j];
                        ma += wgt * a.get(x0 + i, y0 + j);
                        mb += wgt * b.get(x0 + i, y0 + j);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let wgt = k[i] * k[j];
                        let da = a.get(x0 + i, y0 + j) - ma;
                        let db = b.get(x0 + i, y0 + j) - mb;
                        va += wgt * da * da;
                        vb += wgt * db * db;
                        cov += wgt * da * db;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_identity_and_brute_force() {
        let a = noise(16, 16, 1);
        let b = noise(16, 16, 2);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!((ssim(&a, &b).unwrap() - ssim_brute(&a, &b)).abs() < 1e-9);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    }

    #[test]
    fn ssim_checkerboard_inverse_is_negative() {
        let a = Image::from_fn(16, 16, |x, y| ((x + y) % 2) as f64);
        let b = Image::from_fn(16, 16, |x, y| 1.0 - a.get(x, y));
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ssim_constant_offset_closed_form() {
        let a = Image::filled(12, 12, 0.4);
        let b = Image::filled(12, 12, 0.5);
        let want = (2.0 * 0.4 * 0.5 + 1e-4) / (0.16 + 0.25 + 1e-4);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn mse_cases() {
        let a = noise(7, 5, 3);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&Image::new(3, 3), &Image::filled(3, 3, 1.0)).unwrap(), 1.0);
        let b = noise(7, 5, 4);
        let direct: f64 = (0..35).map(|i| (a.data[i] - b.data[i]).powi(2)).sum::<f64>() / 35.0;
        assert!((mse(&a, &b).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn clahe_uniform_tiles_near_identity() {
        // every 32x32 tile holds each 8-bit level exactly four times
        let img = Image::from_fn(256, 256, |x, y| (((y % 32) * 32 + x % 32) / 4) as f64 / 255.0);
        let out = equalize(&img).unwrap();
        let worst = img.data.iter().zip(&out.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn clahe_constant_and_range() {
        let c = equalize(&Image::filled(32, 24, 0.3)).unwrap();
        assert!(c.data.iter().all(|v| *v == c.data[0]));
        let n = equalize(&noise(40, 33, 5)).unwrap();
        assert!(n.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(equalize(&Image::new(15, 40)).is_err());
    }

    #[test]
    fn temporal_error_cases() {
        let f = noise(8, 8, 9);
        let frames = vec![f.clone(); 4];
        let flows = vec![FlowField::zeros(8, 8); 3];
        assert_eq!(temporal_error(&frames, &flows, &frames, 50.0).unwrap(), 0.0);
        let gts = vec![Image::filled(8, 8, 0.5); 3];
        let a = vec![Image::filled(8, 8, 0.2), Image::filled(8, 8, 0.3), Image::filled(8, 8, 0.1)];
        let b: Vec<Image> = a.iter().map(|i| Image::from_fn(8, 8, |x, y| 2.0 * i.get(x, y))).collect();
        let ea = temporal_error(&a, &flows[..2], &gts, 50.0).unwrap();
        let eb = temporal_error(&b, &flows[..2], &gts, 50.0).unwrap();
        assert!((eb - 2.0 * ea).abs() < 1e-12);
        assert!(temporal_error(&a, &flows, &gts, 50.0).is_err());
    }

    #[test]
    fn timestamp_matching() {
        let q = [0.0, 0.010, 0.0205, 0.031];
        let r = [0.0, 0.0104, 0.02, 0.0295, 0.5];
        assert_eq!(
            match_timestamps(&q, &r, 1e-3),
            vec![Some(0), Some(1), Some(2), None, None]
        );
    }

    #[test]
    fn report_has_mean_row() {
        let rep = EvalReport {
            sequences: vec![
                SequenceMetrics { name: "a".into(), mse: 0.1, ssim: 0.5, temporal_error: 0.2, pairs: 3, skipped: 0 },
                SequenceMetrics { name: "b".into(), mse: 0.3, ssim: 0.7, temporal_error: 0.4, pairs: 5, skipped: 1 },
            ],
        };
        let csv = rep.to_csv();
        assert!(csv.lines().last().unwrap().starts_with("mean,0.200000,0.600000,0.300000,8,1"));
        assert!(rep.to_table().contains("mean"));
    }
}
