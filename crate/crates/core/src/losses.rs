//! Pixel, frequency and distillation losses as pure functions.
//!
//! Every loss is a mean over elements and is computed in `f64`.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_CHARBONNIER_EPS: f64 = 1e-3;
pub const DEFAULT_FREQ_WEIGHT: f64 = 0.1;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Shape> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(op, format!("shapes {} and {} differ", a.shape(), b.shape())));
    }
    Ok(a.shape())
}

fn mean_of(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64) -> f64) -> Result<f64> {
    same_shape(op, a, b)?;
    if a.is_empty() {
        return Err(Error::invalid(op, "empty tensors"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x as f64 - y as f64))
        .sum();
    Ok(sum / a.len() as f64)
}

pub fn l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    mean_of("l1", a, b, f64::abs)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    mean_of("mse", a, b, |d| d * d)
}

/// `mean √(Δ² + ε²)`; equals `ε` when the inputs match.
pub fn charbonnier(a: &Tensor, b: &Tensor, eps: f64) -> Result<f64> {
    mean_of("charbonnier", a, b, |d| (d * d + eps * eps).sqrt())
}

/// Unnormalized 2-D DFT of an `h × w` row-major plane.
pub fn fft2(plane: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let rows = planner.plan_fft_forward(w);
    for row in buf.chunks_exact_mut(w) {
        rows.process(row);
    }
    let cols = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        cols.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    buf
}

/// Pixel L1 plus `weight` times the L1 distance between the 2-D spectra of
/// every channel plane. Spectra are compared on their real and imaginary
/// parts taken as one real vector (mean over `2·N` values).
pub fn fft_freq_loss(sr: &Tensor, hr: &Tensor, weight: f64) -> Result<f64> {
    let pixel = l1(sr, hr)?;
    if weight == 0.0 {
        return Ok(pixel);
    }
    let s = sr.shape();
    let mut sum = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let a: Vec<f64> = sr.plane(n, c).iter().map(|&v| v as f64).collect();
            let b: Vec<f64> = hr.plane(n, c).iter().map(|&v| v as f64).collect();
            let fa = fft2(&a, s.h, s.w);
            let fb = fft2(&b, s.h, s.w);
            sum += fa
                .iter()
                .zip(&fb)
                .map(|(x, y)| (x.re - y.re).abs() + (x.im - y.im).abs())
                .sum::<f64>();
        }
    }
    Ok(pixel + weight * sum / (2 * s.len()) as f64)
}

/// Orthonormal 1-D DCT-II.
pub fn dct1(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let nf = n as f64;
    (0..n)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / nf).cos())
                .sum();
            let norm = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
            s * norm
        })
        .collect()
}

/// Orthonormal separable 2-D DCT-II of an `h × w` plane.
pub fn dct2(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out: Vec<f64> = plane.chunks_exact(w).flat_map(dct1).collect();
    let mut col = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = out[y * w + x];
        }
        for (y, v) in dct1(&col).into_iter().enumerate() {
            out[y * w + x] = v;
        }
    }
    out
}

/// L1 between the per-channel 2-D DCT coefficients.
pub fn dct_loss(sr: &Tensor, hr: &Tensor) -> Result<f64> {
    let s = same_shape("dct_loss", sr, hr)?;
    let mut sum = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let a: Vec<f64> = sr.plane(n, c).iter().map(|&v| v as f64).collect();
            let b: Vec<f64> = hr.plane(n, c).iter().map(|&v| v as f64).collect();
            sum += dct2(&a, s.h, s.w)
                .iter()
                .zip(dct2(&b, s.h, s.w))
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>();
        }
    }
    Ok(sum / s.len() as f64)
}

/// `x − boxblur_k(x)` per plane, with edge-replicating borders so that a
/// constant image has no high-frequency residue.
fn high_pass(x: &Tensor, k: usize) -> Vec<f64> {
    let s = x.shape();
    let r = (k / 2) as isize;
    let area = (k * k) as f64;
    let mut out = Vec::with_capacity(s.len());
    for n in 0..s.n {
        for c in 0..s.c {
            let p = x.plane(n, c);
            let at = |y: isize, xx: isize| {
                let yy = y.clamp(0, s.h as isize - 1) as usize;
                let xc = xx.clamp(0, s.w as isize - 1) as usize;
                p[yy * s.w + xc] as f64
            };
            for y in 0..s.h as isize {
                for xx in 0..s.w as isize {
                    let mut acc = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            acc += at(y + dy, xx + dx);
                        }
                    }
                    out.push(at(y, xx) - acc / area);
                }
            }
        }
    }
    out
}

/// L1 between the high-frequency residues `img − boxblur_k(img)`.
pub fn edge_loss(sr: &Tensor, hr: &Tensor, blur_k: usize) -> Result<f64> {
    let s = same_shape("edge_loss", sr, hr)?;
    if blur_k == 0 || blur_k % 2 == 0 {
        return Err(Error::invalid("edge_loss", format!("blur size must be odd, got {blur_k}")));
    }
    let (a, b) = (high_pass(sr, blur_k), high_pass(hr, blur_k));
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / s.len() as f64)
}

/// Spatial affinity of one batch item: cosine similarity between the
/// channel vectors of every pair of positions, `(h·w) × (h·w)`.
pub fn spatial_affinity(f: &Tensor, n: usize) -> Vec<f64> {
    let s = f.shape();
    let hw = s.plane();
    let mut cols = vec![0.0; hw * s.c];
    for c in 0..s.c {
        for (p, &v) in f.plane(n, c).iter().enumerate() {
            cols[p * s.c + c] = v as f64;
        }
    }
    for v in cols.chunks_exact_mut(s.c) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
    }
    let mut a = vec![0.0; hw * hw];
    for i in 0..hw {
        let vi = &cols[i * s.c..(i + 1) * s.c];
        for j in 0..hw {
            let vj = &cols[j * s.c..(j + 1) * s.c];
            a[i * hw + j] = vi.iter().zip(vj).map(|(x, y)| x * y).sum();
        }
    }
    a
}

/// Affinity distillation: per layer, the mean absolute difference between
/// student and teacher spatial affinity matrices (over every batch item and
/// matrix entry), summed over layers. Channel counts may differ between the
/// two networks; spatial sizes may not.
pub fn affinity_distill_loss(student: &[Tensor], teacher: &[Tensor]) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::invalid(
            "affinity_distill_loss",
            format!("{} student layers vs {} teacher layers", student.len(), teacher.len()),
        ));
    }
    let mut total = 0.0;
    for (l, (fs, ft)) in student.iter().zip(teacher).enumerate() {
        let (a, b) = (fs.shape(), ft.shape());
        if (a.n, a.h, a.w) != (b.n, b.h, b.w) {
            return Err(Error::invalid(
                "affinity_distill_loss",
                format!("layer {l}: student {a} and teacher {b} differ spatially"),
            ));
        }
        let mut sum = 0.0;
        for n in 0..a.n {
            let (sa, ta) = (spatial_affinity(fs, n), spatial_affinity(ft, n));
            sum += sa.iter().zip(&ta).map(|(x, y)| (x - y).abs()).sum::<f64>();
        }
        total += sum / (a.n * a.plane() * a.plane()) as f64;
    }
    Ok(total)
}

/// L1 between teacher and student outputs.
pub fn pixel_distill_loss(teacher_out: &Tensor, student_out: &Tensor) -> Result<f64> {
    l1(teacher_out, student_out)
}

/// Weights of the reconstruction, output-distillation and
/// affinity-distillation terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillWeights {
    pub rec: f64,
    pub pixel: f64,
    pub affinity: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        DistillWeights {
            rec: 1.0,
            pixel: 1.0,
            affinity: 1.0,
        }
    }
}

/// Everything the combined distillation objective looks at.
#[derive(Debug, Clone, Copy)]
pub struct DistillInputs<'a> {
    pub hr: &'a Tensor,
    pub student_out: &'a Tensor,
    pub teacher_out: &'a Tensor,
    pub student_feats: &'a [Tensor],
    pub teacher_feats: &'a [Tensor],
}

/// `rec·MSE(hr, S) + pixel·L1(T, S) + affinity·L_AD`.
pub fn distill_total_loss(inputs: DistillInputs<'_>, w: DistillWeights) -> Result<f64> {
    Ok(w.rec * mse(inputs.hr, inputs.student_out)?
        + w.pixel * pixel_distill_loss(inputs.teacher_out, inputs.student_out)?
        + w.affinity * affinity_distill_loss(inputs.student_feats, inputs.teacher_feats)?)
}
