use super::{MacCounter, Tensor};
use crate::error::{Error, Result};
use crate::exec;

pub const LAYERNORM_EPS: f32 = 1e-5;

fn check_matmul(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::shape(
            "matmul",
            format!("expected 2-d operands, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions differ: {m}x{k} · {k2}x{n}"),
        ));
    }
    Ok((m, k, n))
}

// Each output element accumulates a[i][p]·b[p][j] for p = 0, 1, … in order,
// starting from zero. The i-p-j loop nest keeps that order per element while
// letting the innermost loop run over contiguous memory.
fn matmul_row(a_row: &[f32], b: &[f32], n: usize, out: &mut [f32]) {
    out.fill(0.0);
    for (p, &av) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

fn matmul_with(
    a: &Tensor,
    b: &Tensor,
    counter: Option<&mut MacCounter>,
    label: &str,
    parallel: bool,
) -> Result<Tensor> {
    let (m, k, n) = check_matmul(a, b)?;
    let mut out = vec![0.0f32; m * n];
    let (ad, bd) = (a.data(), b.data());
    let kernel = |i: usize, row: &mut [f32]| matmul_row(&ad[i * k..(i + 1) * k], bd, n, row);
    if parallel {
        exec::for_each_row(&mut out, n, m * k * n, kernel);
    } else {
        exec::for_each_row_sequential(&mut out, n, kernel);
    }
    let out = Tensor::new(vec![m, n], out)?;
    out.check_finite("matmul")?;
    if let Some(c) = counter {
        c.add(label, (m * k * n) as u64);
    }
    Ok(out)
}

/// (m×k)·(k×n) product. Counts m·k·n MACs under `label` when a counter is given.
pub fn matmul(
    a: &Tensor,
    b: &Tensor,
    counter: Option<&mut MacCounter>,
    label: &str,
) -> Result<Tensor> {
    matmul_with(a, b, counter, label, exec::is_parallel())
}

/// Same as [`matmul`], always on the calling thread.
pub fn matmul_sequential(
    a: &Tensor,
    b: &Tensor,
    counter: Option<&mut MacCounter>,
    label: &str,
) -> Result<Tensor> {
    matmul_with(a, b, counter, label, false)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 {
        return Err(Error::shape("transpose", format!("expected 2-d, got {:?}", a.shape())));
    }
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    Tensor::new(vec![c, r], (0..r * c).map(|idx| d[(idx % r) * c + idx / r]).collect())
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    x.check_finite("softmax_rows input")?;
    let c = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = libm::expf(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    let out = Tensor::new(x.shape().to_vec(), out)?;
    out.check_finite("softmax_rows")?;
    Ok(out)
}

/// Normalizes the last axis to zero mean and unit variance, then applies
/// `gain` and `bias` (both of length `cols`).
pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(Error::shape(
            "layernorm",
            format!("affine length {}/{} vs last axis {c}", gain.len(), bias.len()),
        ));
    }
    let (g, b) = (gain.data(), bias.data());
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let mut sum = 0.0f32;
        for &v in row.iter() {
            sum += v;
        }
        let mean = sum / c as f32;
        let mut sq = 0.0f32;
        for &v in row.iter() {
            sq += (v - mean) * (v - mean);
        }
        let inv = 1.0 / (sq / c as f32 + LAYERNORM_EPS).sqrt();
        for ((v, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
            *v = (*v - mean) * inv * gv + bv;
        }
    }
    let out = Tensor::new(x.shape().to_vec(), out)?;
    out.check_finite("layernorm")?;
    Ok(out)
}

/// Exact-erf GELU: x·Φ(x).
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let data = x
        .data()
        .iter()
        .map(|&v| 0.5 * v * (1.0 + libm::erff(v * std::f32::consts::FRAC_1_SQRT_2)))
        .collect();
    let out = Tensor::new(x.shape().to_vec(), data)?;
    out.check_finite("gelu")?;
    Ok(out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_shape(b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    let out = Tensor::new(a.shape().to_vec(), data)?;
    out.check_finite("add")?;
    Ok(out)
}

pub fn scale(a: &Tensor, s: f32) -> Result<Tensor> {
    let out = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| v * s).collect())?;
    out.check_finite("scale")?;
    Ok(out)
}
