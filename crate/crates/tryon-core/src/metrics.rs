//! Image-quality metrics: SSIM and PSNR for paired evaluation, Fréchet
//! distance and kernel MMD (KID) over feature sets for unpaired evaluation.
//!
//! The distributional formulas are exact; the features come from a small
//! documented extractor over codec latents, and every report names that
//! extractor so its numbers are never mistaken for Inception-based scores.

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::rng::{Purpose, Stream};
use crate::tensor::Tensor;

// ── SSIM ─────────────────────────────────────────────────────────────

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Mirror index (edge not repeated): -1 -> 1, n -> n-2.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * n - 2 - i;
        }
    }
    i as usize
}

/// Separable Gaussian filter with reflection padding.
fn gauss_filter(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let half = SSIM_WINDOW as isize / 2;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = reflect(xx as isize + i as isize - half, w);
                acc += kv * x[y * w + sx];
            }
            tmp[y * w + xx] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = reflect(y as isize + i as isize - half, h);
                acc += kv * tmp[sy * w + xx];
            }
            out[y * w + xx] = acc;
        }
    }
    out
}

/// Mean local SSIM between two `[1, c, H, W]` images in [-1, 1] (converted
/// to unit range internally), 11x11 Gaussian window with sigma 1.5,
/// averaged over channels.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let s = x.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::invalid("ssim", format!("expected [1,c,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    if h < SSIM_WINDOW / 2 + 2 || w < SSIM_WINDOW / 2 + 2 {
        return Err(Error::invalid("ssim", "image smaller than the SSIM window"));
    }
    let k = gaussian_kernel();
    let unit = |v: f64| (v + 1.0) / 2.0;

    let mut total = 0.0;
    for ch in 0..c {
        let base = ch * h * w;
        let xs: Vec<f64> = x.data()[base..base + h * w].iter().map(|&v| unit(v)).collect();
        let ys: Vec<f64> = y.data()[base..base + h * w].iter().map(|&v| unit(v)).collect();
        let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();

        let mu_x = gauss_filter(&xs, h, w, &k);
        let mu_y = gauss_filter(&ys, h, w, &k);
        let m_xx = gauss_filter(&xx, h, w, &k);
        let m_yy = gauss_filter(&yy, h, w, &k);
        let m_xy = gauss_filter(&xy, h, w, &k);

        let mut acc = 0.0;
        for i in 0..h * w {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let sx = m_xx[i] - mx * mx;
            let sy = m_yy[i] - my * my;
            let sxy = m_xy[i] - mx * my;
            let num = (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2);
            let den = (mx * mx + my * my + SSIM_C1) * (sx + sy + SSIM_C2);
            acc += num / den;
        }
        total += acc / (h * w) as f64;
    }
    Ok(total / c as f64)
}

/// Peak signal-to-noise ratio in dB on unit range; +inf for identical inputs.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let mse: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| {
            let d = (a - b) / 2.0; // [-1,1] -> unit range
            d * d
        })
        .sum::<f64>()
        / x.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

// ── feature sets ─────────────────────────────────────────────────────

/// Embedding matrix (`n x d`, row-major) plus the extractor that made it.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub data: Vec<f64>,
    pub n: usize,
    pub d: usize,
    pub extractor: String,
}

impl FeatureSet {
    pub fn new(data: Vec<f64>, n: usize, d: usize, extractor: impl Into<String>) -> FeatureSet {
        assert_eq!(data.len(), n * d);
        FeatureSet { data, n, d, extractor: extractor.into() }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    fn mean(&self) -> Vec<f64> {
        let mut mu = vec![0.0; self.d];
        for i in 0..self.n {
            for (m, v) in mu.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        for m in mu.iter_mut() {
            *m /= self.n as f64;
        }
        mu
    }

    /// Unbiased covariance (divides by n - 1).
    fn covariance(&self, mu: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut cov = vec![0.0; d * d];
        for i in 0..self.n {
            let r = self.row(i);
            for a in 0..d {
                let da = r[a] - mu[a];
                for b in a..d {
                    cov[a * d + b] += da * (r[b] - mu[b]);
                }
            }
        }
        let norm = 1.0 / (self.n as f64 - 1.0);
        for a in 0..d {
            for b in a..d {
                cov[a * d + b] *= norm;
                cov[b * d + a] = cov[a * d + b];
            }
        }
        cov
    }
}

/// Feature extractor id for [`toy_features`].
pub const TOY_EXTRACTOR_VERSION: &str = "toy-latent-moments-v1";

/// Documented stand-in extractor: encode each image, then per latent
/// channel take mean, standard deviation, and the magnitude-weighted
/// centroid (row, column) — 4 channels x 4 statistics = 16 dims.
pub fn toy_features(images: &[Tensor], codec: &Codec) -> Result<FeatureSet> {
    let d = 16;
    let mut data = Vec::with_capacity(images.len() * d);
    for img in images {
        let z = codec.encode(img)?;
        let s = z.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        for ch in 0..c {
            let plane = &z.data()[ch * h * w..(ch + 1) * h * w];
            let n = (h * w) as f64;
            let mean = plane.iter().sum::<f64>() / n;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let mut wsum = 0.0;
            let (mut cy, mut cx) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let m = plane[y * w + x].abs();
                    wsum += m;
                    cy += m * y as f64 / (h.max(2) - 1) as f64;
                    cx += m * x as f64 / (w.max(2) - 1) as f64;
                }
            }
            let denom = wsum.max(1e-12);
            data.extend_from_slice(&[mean, var.sqrt(), cy / denom, cx / denom]);
        }
    }
    Ok(FeatureSet::new(data, images.len(), d, format!("{TOY_EXTRACTOR_VERSION}/{}", codec.mode_name())))
}

// ── symmetric eigendecomposition (cyclic Jacobi) ─────────────────────

/// Eigenvalues and eigenvectors (columns) of a symmetric matrix.
fn sym_eig(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in p + 1..d {
                off += m[p * d + q] * m[p * d + q];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let (app, aqq) = (m[p * d + p], m[q * d + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (mkp, mkq) = (m[k * d + p], m[k * d + q]);
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let (mpk, mqk) = (m[p * d + k], m[q * d + k]);
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let vals = (0..d).map(|i| m[i * d + i]).collect();
    (vals, v)
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut c = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let av = a[i * d + k];
            if av == 0.0 {
                continue;
            }
            for j in 0..d {
                c[i * d + j] += av * b[k * d + j];
            }
        }
    }
    c
}

const EIG_CLAMP: f64 = -1e-8;

/// Symmetric PSD square root via eigendecomposition. Eigenvalues in
/// `[-1e-8, 0)` are clamped to zero; anything more negative is an error —
/// a sign of genuinely broken features rather than rounding.
fn sym_sqrt(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let (vals, vecs) = sym_eig(a, d);
    let mut roots = vec![0.0; d];
    for (i, &l) in vals.iter().enumerate() {
        if l < EIG_CLAMP {
            return Err(Error::invalid(
                "frechet_distance",
                format!("covariance eigenvalue {l} below clamp threshold"),
            ));
        }
        roots[i] = l.max(0.0).sqrt();
    }
    // V diag(sqrt) V^T
    let mut scaled = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            scaled[i * d + j] = vecs[i * d + j] * roots[j];
        }
    }
    let mut vt = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            vt[i * d + j] = vecs[j * d + i];
        }
    }
    Ok(matmul_sq(&scaled, &vt, d))
}

/// Fréchet distance from explicit Gaussian moments:
/// `|mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2})`, with the matrix root
/// evaluated as `(Sa^{1/2} Sb Sa^{1/2})^{1/2}`.
pub fn frechet_from_moments(
    mu_a: &[f64],
    cov_a: &[f64],
    mu_b: &[f64],
    cov_b: &[f64],
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.len() != d * d || cov_b.len() != d * d {
        return Err(Error::invalid("frechet_distance", "inconsistent moment dimensions"));
    }
    let mean_term: f64 = mu_a.iter().zip(mu_b).map(|(a, b)| (a - b) * (a - b)).sum();
    let tr_a: f64 = (0..d).map(|i| cov_a[i * d + i]).sum();
    let tr_b: f64 = (0..d).map(|i| cov_b[i * d + i]).sum();

    let root_a = sym_sqrt(cov_a, d)?;
    let inner = matmul_sq(&matmul_sq(&root_a, cov_b, d), &root_a, d);
    // symmetrize against rounding before the second root
    let mut sym = inner.clone();
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
        }
    }
    let (vals, _) = sym_eig(&sym, d);
    let mut tr_root = 0.0;
    for &l in &vals {
        if l < EIG_CLAMP {
            return Err(Error::invalid(
                "frechet_distance",
                format!("cross-covariance eigenvalue {l} below clamp threshold"),
            ));
        }
        tr_root += l.max(0.0).sqrt();
    }
    let dist = mean_term + tr_a + tr_b - 2.0 * tr_root;
    Ok(if dist < 0.0 && dist > -1e-8 { 0.0 } else { dist })
}

/// Fréchet distance between two feature sets. Each set needs more rows
/// than dimensions for a valid covariance.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.d != b.d {
        return Err(Error::invalid("frechet_distance", "dimension mismatch"));
    }
    if a.n <= a.d || b.n <= b.d {
        return Err(Error::invalid(
            "frechet_distance",
            format!("need n > d for covariance (got n={}, {} with d={})", a.n, b.n, a.d),
        ));
    }
    let (mu_a, mu_b) = (a.mean(), b.mean());
    let cov_a = a.covariance(&mu_a);
    let cov_b = b.covariance(&mu_b);
    frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}

// ── KID / kernel MMD ─────────────────────────────────────────────────

/// Polynomial kernel `(x . y / d + 1)^3`.
fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let v = dot / d + 1.0;
    v * v * v
}

/// Unbiased MMD^2 between two equal-size index subsets.
fn mmd2_unbiased(a: &FeatureSet, ia: &[usize], b: &FeatureSet, ib: &[usize]) -> f64 {
    let m = ia.len() as f64;
    let n = ib.len() as f64;
    let mut xx = 0.0;
    for &i in ia {
        for &j in ia {
            if i != j {
                xx += poly_kernel(a.row(i), a.row(j));
            }
        }
    }
    let mut yy = 0.0;
    for &i in ib {
        for &j in ib {
            if i != j {
                yy += poly_kernel(b.row(i), b.row(j));
            }
        }
    }
    let mut xy = 0.0;
    for &i in ia {
        for &j in ib {
            xy += poly_kernel(a.row(i), b.row(j));
        }
    }
    xx / (m * (m - 1.0)) + yy / (n * (n - 1.0)) - 2.0 * xy / (m * n)
}

/// KID protocol: default 100 subsets of size min(100, n).
pub const KID_SUBSETS: usize = 100;
pub const KID_SUBSET_CAP: usize = 100;

/// Kernel MMD^2 averaged over random subsets; returns (mean, std). When the
/// subset covers a whole set it is taken in index order, so a full-set call
/// reproduces the plain unbiased estimator exactly.
pub fn kid_mmd(
    a: &FeatureSet,
    b: &FeatureSet,
    subset_size: usize,
    subsets: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if a.d != b.d {
        return Err(Error::invalid("kid_mmd", "dimension mismatch"));
    }
    if subset_size < 2 {
        return Err(Error::invalid("kid_mmd", "subset size must be at least 2"));
    }
    if subset_size > a.n || subset_size > b.n {
        return Err(Error::invalid(
            "kid_mmd",
            format!("subset size {subset_size} exceeds set sizes {} / {}", a.n, b.n),
        ));
    }
    if subsets == 0 {
        return Err(Error::invalid("kid_mmd", "need at least one subset"));
    }
    let mut vals = Vec::with_capacity(subsets);
    for s in 0..subsets {
        let mut stream = Stream::derive(seed, Purpose::MetricSubsets, s as u64);
        let pick = |stream: &mut Stream, n: usize| -> Vec<usize> {
            if subset_size == n {
                (0..n).collect()
            } else {
                let mut perm = stream.permutation(n);
                perm.truncate(subset_size);
                perm
            }
        };
        let ia = pick(&mut stream, a.n);
        let ib = pick(&mut stream, b.n);
        vals.push(mmd2_unbiased(a, &ia, b, &ib));
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
    Ok((mean, var.sqrt()))
}

// ── reports ──────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct PairedMetrics {
    pub ssim: f64,
    pub psnr: f64,
    pub samples: usize,
}

#[derive(Clone, Debug)]
pub struct UnpairedMetrics {
    pub frechet: f64,
    pub kid_mean: f64,
    pub kid_std: f64,
    pub samples: usize,
}

/// Evaluation summary; always names its feature extractor.
#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub extractor: String,
    pub paired: Option<PairedMetrics>,
    pub unpaired: Option<UnpairedMetrics>,
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "extractor: {}", self.extractor)?;
        writeln!(f, "{:<10} {:>12} {:>12}", "setting", "metric", "value")?;
        if let Some(p) = &self.paired {
            writeln!(f, "{:<10} {:>12} {:>12.4}", format!("paired({})", p.samples), "SSIM", p.ssim)?;
            writeln!(f, "{:<10} {:>12} {:>12.4}", "", "PSNR(dB)", p.psnr)?;
        }
        if let Some(u) = &self.unpaired {
            writeln!(
                f,
                "{:<10} {:>12} {:>12.6}",
                format!("unpaired({})", u.samples),
                "FRECHET",
                u.frechet
            )?;
            writeln!(
                f,
                "{:<10} {:>12} {:>12.6} ± {:.6}",
                "", "KID", u.kid_mean, u.kid_std
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn_img(shape: &[usize], seed: u64) -> Tensor {
        let mut s = Stream::derive(seed, Purpose::Init, 50);
        let data: Vec<f64> =
            (0..shape.iter().product()).map(|_| s.uniform_in(-1.0, 1.0)).collect();
        Tensor::from_vec(data, shape.to_vec())
    }

    #[test]
    fn ssim_self_is_exactly_one() {
        let x = randn_img(&[1, 3, 24, 20], 1);
        let v = ssim(&x, &x).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "ssim(x,x) = {v}");
    }

    #[test]
    fn ssim_symmetric_to_machine_precision() {
        let x = randn_img(&[1, 3, 24, 20], 2);
        let y = randn_img(&[1, 3, 24, 20], 3);
        let a = ssim(&x, &y).unwrap();
        let b = ssim(&y, &x).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ssim_anticorrelated_checkerboard_is_negative() {
        let (h, w) = (24, 24);
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] = if (x / 2 + y / 2) % 2 == 0 { 1.0 } else { -1.0 };
            }
        }
        let x = Tensor::from_vec(data.clone(), vec![1, 1, h, w]);
        let inv = Tensor::from_vec(data.iter().map(|v| -v).collect(), vec![1, 1, h, w]);
        let v = ssim(&x, &inv).unwrap();
        assert!(v < 0.0, "anti-correlated ssim {v}");
    }

    #[test]
    fn ssim_constant_images_match_closed_form() {
        // zero variance: second factor is exactly 1, first factor is the
        // luminance term of the constants in unit range
        let x = Tensor::full(&[1, 1, 16, 16], 0.0); // unit value 0.5
        let y = Tensor::full(&[1, 1, 16, 16], 0.2); // unit value 0.6
        let (m1, m2) = (0.5, 0.6);
        let expect = (2.0 * m1 * m2 + SSIM_C1) / (m1 * m1 + m2 * m2 + SSIM_C1);
        let v = ssim(&x, &y).unwrap();
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
    }

    #[test]
    fn psnr_contracts() {
        let x = randn_img(&[1, 3, 8, 8], 4);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);

        // MSE 0.01 on unit range -> 20 dB
        let a = Tensor::full(&[1, 1, 8, 8], 0.0);
        let b = Tensor::full(&[1, 1, 8, 8], 0.2); // unit diff 0.1
        let v = psnr(&a, &b).unwrap();
        assert!((v - 20.0).abs() < 1e-12, "psnr {v}");

        // monotone in noise level
        let y1 = Tensor::from_vec(x.data().iter().map(|v| v + 0.01).collect(), x.shape().to_vec());
        let y2 = Tensor::from_vec(x.data().iter().map(|v| v + 0.1).collect(), x.shape().to_vec());
        assert!(psnr(&x, &y1).unwrap() > psnr(&x, &y2).unwrap());
    }

    #[test]
    fn frechet_identical_sets_is_zero() {
        let fs = FeatureSet::new(
            randn_img(&[40, 4], 5).data().to_vec(),
            40,
            4,
            "test",
        );
        let d = frechet_distance(&fs, &fs).unwrap();
        assert!(d.abs() < 1e-8, "self distance {d}");
    }

    #[test]
    fn frechet_analytic_unit_gaussians() {
        // N(0,1) vs N(1,1) in 1-d: (0-1)^2 + (1+1-2) = 1
        let d = frechet_from_moments(&[0.0], &[1.0], &[1.0], &[1.0]).unwrap();
        assert!((d - 1.0).abs() < 1e-6, "analytic distance {d}");
    }

    #[test]
    fn frechet_sampled_gaussians_approach_closed_form() {
        // 2-d Gaussians with diagonal covariances
        let n = 10_000;
        let mut s = Stream::derive(6, Purpose::Init, 51);
        let mut a = Vec::with_capacity(n * 2);
        let mut b = Vec::with_capacity(n * 2);
        for _ in 0..n {
            a.push(s.normal());
            a.push(2.0 * s.normal());
            b.push(1.0 + s.normal() * 0.5);
            b.push(s.normal());
        }
        let fa = FeatureSet::new(a, n, 2, "test");
        let fb = FeatureSet::new(b, n, 2, "test");
        let est = frechet_distance(&fa, &fb).unwrap();
        // closed form: |mu|^2 + sum over dims of (sa + sb - 2 sqrt(sa sb))
        let expect = 1.0
            + (1.0 + 0.25 - 2.0 * (0.25f64).sqrt())
            + (4.0 + 1.0 - 2.0 * (4.0f64).sqrt());
        assert!(
            (est - expect).abs() < 0.05 * expect,
            "estimate {est} vs closed form {expect}"
        );
    }

    #[test]
    fn frechet_needs_more_rows_than_dims() {
        let fs = FeatureSet::new(vec![0.0; 4 * 4], 4, 4, "test");
        assert!(frechet_distance(&fs, &fs).is_err());
    }

    #[test]
    fn frechet_symmetry() {
        let fa = FeatureSet::new(randn_img(&[30, 3], 7).data().to_vec(), 30, 3, "t");
        let fb = FeatureSet::new(
            randn_img(&[30, 3], 8).data().iter().map(|v| v + 0.3).collect(),
            30,
            3,
            "t",
        );
        let ab = frechet_distance(&fa, &fb).unwrap();
        let ba = frechet_distance(&fb, &fa).unwrap();
        assert!((ab - ba).abs() < 1e-9 * ab.max(1.0), "{ab} vs {ba}");
        assert!(ab >= 0.0);
    }

    #[test]
    fn kid_matches_brute_force_exactly_on_full_sets() {
        let n = 24;
        let fa = FeatureSet::new(randn_img(&[n, 5], 9).data().to_vec(), n, 5, "t");
        let fb = FeatureSet::new(
            randn_img(&[n, 5], 10).data().iter().map(|v| v * 1.3 + 0.1).collect(),
            n,
            5,
            "t",
        );
        let (mean, std) = kid_mmd(&fa, &fb, n, 1, 0).unwrap();
        assert_eq!(std, 0.0);

        // independent brute force: build the full kernel matrices, then the
        // unbiased estimator by direct summation in the same index order
        let kernel = |x: &[f64], y: &[f64]| {
            let d = x.len() as f64;
            let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            (dot / d + 1.0).powi(3)
        };
        let mut xx = 0.0;
        let mut yy = 0.0;
        let mut xy = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    xx += kernel(fa.row(i), fa.row(j));
                    yy += kernel(fb.row(i), fb.row(j));
                }
                xy += kernel(fa.row(i), fb.row(j));
            }
        }
        let m = n as f64;
        let brute = xx / (m * (m - 1.0)) + yy / (m * (m - 1.0)) - 2.0 * xy / (m * m);
        assert_eq!(mean, brute, "estimator must equal brute force bit for bit");
    }

    #[test]
    fn kid_near_zero_for_same_distribution_and_grows_with_separation() {
        let n = 64;
        let fa = FeatureSet::new(randn_img(&[n, 4], 11).data().to_vec(), n, 4, "t");
        let fb = FeatureSet::new(randn_img(&[n, 4], 12).data().to_vec(), n, 4, "t");
        let (same, std) = kid_mmd(&fa, &fb, n, 1, 0).unwrap();
        assert!(same.abs() < 3.0 * std.max(0.05), "same-dist KID {same} (std {std})");

        let mut prev = same;
        for delta in [1.0, 2.0, 4.0] {
            let shifted = FeatureSet::new(
                fb.data.iter().map(|v| v + delta).collect(),
                n,
                4,
                "t",
            );
            let (kid, _) = kid_mmd(&fa, &shifted, n, 1, 0).unwrap();
            assert!(kid > prev, "KID must grow with separation ({kid} after {prev})");
            prev = kid;
        }
    }

    #[test]
    fn kid_deterministic_given_seed() {
        let fa = FeatureSet::new(randn_img(&[50, 4], 13).data().to_vec(), 50, 4, "t");
        let fb = FeatureSet::new(randn_img(&[50, 4], 14).data().to_vec(), 50, 4, "t");
        let a = kid_mmd(&fa, &fb, 20, 10, 77).unwrap();
        let b = kid_mmd(&fa, &fb, 20, 10, 77).unwrap();
        assert_eq!(a, b);
        assert!(kid_mmd(&fa, &fb, 1, 10, 0).is_err());
        assert!(kid_mmd(&fa, &fb, 51, 10, 0).is_err());
    }

    #[test]
    fn toy_features_shape_and_determinism() {
        let imgs: Vec<Tensor> = (0..3).map(|i| randn_img(&[1, 3, 16, 16], 20 + i)).collect();
        let a = toy_features(&imgs, &Codec::Analytic).unwrap();
        let b = toy_features(&imgs, &Codec::Analytic).unwrap();
        assert_eq!(a.d, 16);
        assert_eq!(a.n, 3);
        assert_eq!(a.data, b.data);
        assert!(a.extractor.contains(TOY_EXTRACTOR_VERSION));
    }

    #[test]
    fn toy_features_react_to_translation() {
        // content shifted within the canvas must move the centroid features
        let (h, w) = (32, 32);
        let mut img_a = vec![-1.0; 3 * h * w];
        let mut img_b = vec![-1.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    img_a[(c * h + y) * w + x] = 1.0;
                    img_b[(c * h + y + 20) * w + x + 20] = 1.0;
                }
            }
        }
        let fa = toy_features(&[Tensor::from_vec(img_a, vec![1, 3, h, w])], &Codec::Analytic)
            .unwrap();
        let fb = toy_features(&[Tensor::from_vec(img_b, vec![1, 3, h, w])], &Codec::Analytic)
            .unwrap();
        let diff: f64 =
            fa.data.iter().zip(&fb.data).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 0.1, "translation left features unchanged (diff {diff})");
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // symmetric 3x3 with known eigenvalues {6, 3, 1} (diag similar)
        let a = [4.0, 1.0, 1.0, 1.0, 4.0, 1.0, 1.0, 1.0, 4.0];
        let (mut vals, vecs) = sym_eig(&a, 3);
        vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!((vals[0] - 3.0).abs() < 1e-10);
        assert!((vals[1] - 3.0).abs() < 1e-10);
        assert!((vals[2] - 6.0).abs() < 1e-10);
        // residual check A v = lambda v for one eigenpair
        let (vals2, _) = sym_eig(&a, 3);
        for (idx, &l) in vals2.iter().enumerate() {
            for r in 0..3 {
                let av: f64 = (0..3).map(|c| a[r * 3 + c] * vecs[c * 3 + idx]).sum();
                assert!((av - l * vecs[r * 3 + idx]).abs() < 1e-9);
            }
        }
    }
}
