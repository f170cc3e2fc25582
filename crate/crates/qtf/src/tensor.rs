//! Dense row-major tensors and the full-precision kernels the simulator
//! runs on: matmuls, softmax, activations, normalization, cross-entropy,
//! and the `QTNSR1` dump format.
//!
//! Values are held as f64 in memory; dumps serialize as 32-bit floats.
//! Matmul accumulation is never quantized — the simulator quantizes
//! operands, not accumulators. All reductions run in a fixed order, so
//! results are bitwise reproducible; enabling threads only parallelizes
//! over output rows, which preserves that order.

use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const DUMP_MAGIC: &[u8; 6] = b"QTNSR1";

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Configure worker threads for row-parallel kernels. `1` (the default)
/// keeps everything on the calling thread. Results are identical for any
/// thread count.
pub fn set_threads(n: usize) {
    let n = n.max(1);
    THREADS.store(n, Ordering::Relaxed);
    if n > 1 {
        // Best effort: the global pool can only be sized once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn parallel() -> bool {
    THREADS.load(Ordering::Relaxed) > 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected rank 2, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().expect("rank >= 1");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// `self += s * other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, s: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add_scaled: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn mul_elem(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "mul_elem: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Round every element to its nearest f32. Master weights and optimizer
    /// moments live on the f32 lattice so checkpoints serialize losslessly.
    pub fn round_to_f32(&mut self) {
        for x in &mut self.data {
            *x = *x as f32 as f64;
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; self.data.len()];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_vec(vec![c, r], out)
    }

    /// `[M,K] @ [K,N] -> [M,N]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul: [{m},{k}] @ [{k2},{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        let a = &self.data;
        let b = &other.data;
        let row_kernel = |i: usize, out_row: &mut [f64]| {
            for kk in 0..k {
                let aik = a[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let b_row = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bv;
                }
            }
        };
        if parallel() && m > 1 {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, row)| row_kernel(i, row));
        } else {
            for (i, row) in out.chunks_mut(n).enumerate() {
                row_kernel(i, row);
            }
        }
        Tensor::from_vec(vec![m, n], out)
    }

    /// `[M,K] @ [N,K]^T -> [M,N]`; contracts matching last axes (row dots).
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul_nt: [{m},{k}] @ [{n},{k2}]^T"
            )));
        }
        let mut out = vec![0.0; m * n];
        let a = &self.data;
        let b = &other.data;
        let row_kernel = |i: usize, out_row: &mut [f64]| {
            let a_row = &a[i * k..(i + 1) * k];
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot(a_row, &b[j * k..(j + 1) * k]);
            }
        };
        if parallel() && m > 1 {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, row)| row_kernel(i, row));
        } else {
            for (i, row) in out.chunks_mut(n).enumerate() {
                row_kernel(i, row);
            }
        }
        Tensor::from_vec(vec![m, n], out)
    }

    /// `[K,M]^T @ [K,N] -> [M,N]`; contracts matching first axes.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul_tn: [{k},{m}]^T @ [{k2},{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        let a = &self.data;
        let b = &other.data;
        if parallel() && m > 1 {
            // Row-gather form: out[i,:] = sum_k a[k,i] * b[k,:]; k ascends,
            // matching the serial accumulation order below.
            out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                for kk in 0..k {
                    let aki = a[kk * m + i];
                    if aki == 0.0 {
                        continue;
                    }
                    let b_row = &b[kk * n..(kk + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(b_row) {
                        *o += aki * bv;
                    }
                }
            });
        } else {
            for kk in 0..k {
                let a_row = &a[kk * m..(kk + 1) * m];
                let b_row = &b[kk * n..(kk + 1) * n];
                for (i, &aki) in a_row.iter().enumerate() {
                    if aki == 0.0 {
                        continue;
                    }
                    let out_row = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += aki * bv;
                    }
                }
            }
        }
        Tensor::from_vec(vec![m, n], out)
    }

    pub fn write_dump<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &x in &self.data {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn write_dump_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_dump(&mut f)?;
        Ok(())
    }

    pub fn read_dump<R: Read>(r: &mut R, origin: &Path) -> Result<Tensor> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::BadMagic {
                path: origin.to_path_buf(),
                expected: "QTNSR1",
            });
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rank = u32::from_le_bytes(b4) as usize;
        if rank > 8 {
            return Err(Error::ShapeMismatch(format!(
                "tensor dump rank {rank} exceeds limit 8"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut b8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut b8)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let len: usize = shape.iter().try_fold(1usize, |acc, &d| {
            acc.checked_mul(d)
        }).ok_or_else(|| Error::ShapeMismatch(format!("tensor dump shape {shape:?} overflows")))?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut b4)?;
            data.push(f32::from_le_bytes(b4) as f64);
        }
        Tensor::from_vec(shape, data)
    }

    pub fn read_dump_file(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let mut f = io::BufReader::new(std::fs::File::open(path)?);
        Self::read_dump(&mut f, path)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let (ai, bi) = (&a[i * 4..i * 4 + 4], &b[i * 4..i * 4 + 4]);
        acc[0] += ai[0] * bi[0];
        acc[1] += ai[1] * bi[1];
        acc[2] += ai[2] * bi[2];
        acc[3] += ai[3] * bi[3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let cols = *x.shape().last().expect("rank >= 1");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor {
        shape: x.shape().to_vec(),
        data: out,
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// SwiGLU gate: `silu(gate) * up`, elementwise on equal shapes.
pub fn swiglu(gate: &Tensor, up: &Tensor) -> Result<Tensor> {
    if gate.shape() != up.shape() {
        return Err(Error::ShapeMismatch(format!(
            "swiglu: {:?} vs {:?}",
            gate.shape(),
            up.shape()
        )));
    }
    let data = gate
        .data()
        .iter()
        .zip(up.data())
        .map(|(&g, &u)| silu(g) * u)
        .collect();
    Ok(Tensor {
        shape: gate.shape().to_vec(),
        data,
    })
}

pub const NORM_EPS: f64 = 1e-5;

/// LayerNorm over the last axis with affine parameters.
/// Returns `(y, mean, inv_std)`; the per-row stats feed the backward pass.
pub fn layer_norm_fwd(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> (Tensor, Vec<f64>, Vec<f64>) {
    let cols = *x.shape().last().expect("rank >= 1");
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut means = vec![0.0; rows];
    let mut inv_stds = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x.data()[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        means[r] = mean;
        inv_stds[r] = inv_std;
        let or = &mut out[r * cols..(r + 1) * cols];
        for j in 0..cols {
            or[j] = gamma[j] * (xr[j] - mean) * inv_std + beta[j];
        }
    }
    (
        Tensor {
            shape: x.shape().to_vec(),
            data: out,
        },
        means,
        inv_stds,
    )
}

pub fn layer_norm_bwd(
    x: &Tensor,
    gamma: &[f64],
    means: &[f64],
    inv_stds: &[f64],
    dy: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let cols = *x.shape().last().expect("rank >= 1");
    let rows = x.len() / cols;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; cols];
    let mut dbeta = vec![0.0; cols];
    for r in 0..rows {
        let xr = &x.data()[r * cols..(r + 1) * cols];
        let dyr = &dy.data()[r * cols..(r + 1) * cols];
        let (mean, inv_std) = (means[r], inv_stds[r]);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..cols {
            let xhat = (xr[j] - mean) * inv_std;
            let dxhat = dyr[j] * gamma[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgamma[j] += dyr[j] * xhat;
            dbeta[j] += dyr[j];
        }
        let n = cols as f64;
        let dxr = &mut dx[r * cols..(r + 1) * cols];
        for j in 0..cols {
            let xhat = (xr[j] - mean) * inv_std;
            let dxhat = dyr[j] * gamma[j];
            dxr[j] = inv_std * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
        }
    }
    (
        Tensor {
            shape: x.shape().to_vec(),
            data: dx,
        },
        dgamma,
        dbeta,
    )
}

/// RMSNorm over the last axis with gain. Returns `(y, inv_rms)`.
pub fn rms_norm_fwd(x: &Tensor, gamma: &[f64], eps: f64) -> (Tensor, Vec<f64>) {
    let cols = *x.shape().last().expect("rank >= 1");
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut inv_rms = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x.data()[r * cols..(r + 1) * cols];
        let ms = xr.iter().map(|&v| v * v).sum::<f64>() / cols as f64;
        let ir = 1.0 / (ms + eps).sqrt();
        inv_rms[r] = ir;
        let or = &mut out[r * cols..(r + 1) * cols];
        for j in 0..cols {
            or[j] = gamma[j] * xr[j] * ir;
        }
    }
    (
        Tensor {
            shape: x.shape().to_vec(),
            data: out,
        },
        inv_rms,
    )
}

pub fn rms_norm_bwd(
    x: &Tensor,
    gamma: &[f64],
    inv_rms: &[f64],
    dy: &Tensor,
) -> (Tensor, Vec<f64>) {
    let cols = *x.shape().last().expect("rank >= 1");
    let rows = x.len() / cols;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; cols];
    for r in 0..rows {
        let xr = &x.data()[r * cols..(r + 1) * cols];
        let dyr = &dy.data()[r * cols..(r + 1) * cols];
        let ir = inv_rms[r];
        let mut dot = 0.0;
        for j in 0..cols {
            dgamma[j] += dyr[j] * xr[j] * ir;
            dot += dyr[j] * gamma[j] * xr[j];
        }
        let n = cols as f64;
        let dxr = &mut dx[r * cols..(r + 1) * cols];
        for j in 0..cols {
            dxr[j] = dyr[j] * gamma[j] * ir - xr[j] * dot * ir * ir * ir / n;
        }
    }
    (
        Tensor {
            shape: x.shape().to_vec(),
            data: dx,
        },
        dgamma,
    )
}

/// Gather rows of `table` at `ids`.
pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (vocab, h) = table.dims2()?;
    let mut out = Vec::with_capacity(ids.len() * h);
    for &id in ids {
        if id >= vocab {
            return Err(Error::TokenOutOfRange {
                token: id,
                vocab,
            });
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::from_vec(vec![ids.len(), h], out)
}

/// Mean next-token cross-entropy with a log-sum-exp stable softmax.
/// Returns the loss and, when `want_grad`, `d loss / d logits`.
pub fn cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    want_grad: bool,
) -> Result<(f64, Option<Tensor>)> {
    let (n, vocab) = logits.dims2()?;
    if targets.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "cross_entropy: {n} rows vs {} targets",
            targets.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = if want_grad {
        Some(vec![0.0; logits.len()])
    } else {
        None
    };
    for (r, &t) in targets.iter().enumerate() {
        if t >= vocab {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab,
            });
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        loss += lse - row[t];
        if let Some(g) = grad.as_mut() {
            let gr = &mut g[r * vocab..(r + 1) * vocab];
            let inv = 1.0 / (n as f64);
            for (j, gj) in gr.iter_mut().enumerate() {
                let p = (row[j] - max).exp() / sum_exp;
                *gj = (p - if j == t { 1.0 } else { 0.0 }) * inv;
            }
        }
    }
    let loss = loss / n as f64;
    let grad = match grad {
        Some(g) => Some(Tensor::from_vec(vec![n, vocab], g)?),
        None => None,
    };
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::path::Path;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(&mut rng, vec![4, 4]);
        let y = eye(4).matmul(&x).unwrap();
        assert_eq!(x.data(), y.data());
        let a = Tensor::from_vec(vec![1, 1], vec![2.0]).unwrap();
        let b = Tensor::from_vec(vec![1, 1], vec![3.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, vec![4, 5]);
        let b = rand_tensor(&mut rng, vec![5, 3]);
        let c = a.matmul(&b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += a.data()[i * 5 + k] * b.data()[k * 3 + j];
                }
                assert_abs_diff_eq!(c.data()[i * 3 + j], acc, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn matmul_variants_agree_with_explicit_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![5, 4]);
        let nt = a.matmul_nt(&b).unwrap();
        let via_t = a.matmul(&b.transpose().unwrap()).unwrap();
        for (x, y) in nt.data().iter().zip(via_t.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }

        let c = rand_tensor(&mut rng, vec![4, 3]);
        let d = rand_tensor(&mut rng, vec![4, 5]);
        let tn = c.matmul_tn(&d).unwrap();
        let via_t = c.transpose().unwrap().matmul(&d).unwrap();
        for (x, y) in tn.data().iter().zip(via_t.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn matmul_distributes_over_addition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, vec![4, 4]);
        let b = rand_tensor(&mut rng, vec![4, 4]);
        let c = rand_tensor(&mut rng, vec![4, 4]);
        let lhs = a.matmul(&b.add(&c).unwrap()).unwrap();
        let rhs = a.matmul(&b).unwrap().add(&a.matmul(&c).unwrap()).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn matmul_rejects_shape_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(a.matmul(&b).is_err());
        assert!(a.matmul_nt(&a.transpose().unwrap()).is_err());
    }

    #[test]
    fn softmax_rows_basics() {
        let x = Tensor::from_vec(vec![2, 2], vec![0.0, 0.0, 1000.0, 0.0]).unwrap();
        let p = softmax_rows(&x);
        assert_abs_diff_eq!(p.data()[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p.data()[1], 0.5, epsilon = 1e-12);
        assert!(p.data()[2] > 0.999_999);
        assert!(p.data().iter().all(|v| v.is_finite()));
        for r in 0..2 {
            let sum: f64 = p.row(r).iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn activation_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert_abs_diff_eq!(gelu(10.0), 10.0, epsilon = 1e-4);
        assert!(gelu(-10.0).abs() < 1e-4);
        assert_eq!(silu(0.0), 0.0);
        let gate = Tensor::from_vec(vec![2], vec![0.0, 1.0]).unwrap();
        let up = Tensor::from_vec(vec![2], vec![5.0, 2.0]).unwrap();
        let y = swiglu(&gate, &up).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert_abs_diff_eq!(y.data()[1], silu(1.0) * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        let h = 1e-6;
        for x in [-3.0, -0.7, 0.0, 0.4, 2.3] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_prime(x), fd, epsilon = 1e-6);
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(silu_prime(x), fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, vec![3, 16]);
        let gamma = vec![1.0; 16];
        let beta = vec![0.0; 16];
        let (y, _, _) = layer_norm_fwd(&x, &gamma, &beta, NORM_EPS);
        for r in 0..3 {
            let row = y.row(r);
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-5);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn norm_backwards_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, vec![2, 6]);
        let gamma: Vec<f64> = (0..6).map(|i| 0.8 + 0.1 * i as f64).collect();
        let beta: Vec<f64> = (0..6).map(|i| 0.1 * i as f64).collect();
        let dy = rand_tensor(&mut rng, vec![2, 6]);
        let h = 1e-5;

        let loss = |x: &Tensor| {
            let (y, _, _) = layer_norm_fwd(x, &gamma, &beta, NORM_EPS);
            y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, means, inv_stds) = layer_norm_fwd(&x, &gamma, &beta, NORM_EPS);
        let (dx, _, _) = layer_norm_bwd(&x, &gamma, &means, &inv_stds, &dy);
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert_abs_diff_eq!(dx.data()[i], fd, epsilon = 1e-5);
        }

        let rms_loss = |x: &Tensor| {
            let (y, _) = rms_norm_fwd(x, &gamma, NORM_EPS);
            y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, inv_rms) = rms_norm_fwd(&x, &gamma, NORM_EPS);
        let (dx, _) = rms_norm_bwd(&x, &gamma, &inv_rms, &dy);
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (rms_loss(&xp) - rms_loss(&xm)) / (2.0 * h);
            assert_abs_diff_eq!(dx.data()[i], fd, epsilon = 1e-5);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::zeros(vec![3, 32]);
        let (loss, grad) = cross_entropy(&logits, &[0, 5, 31], true).unwrap();
        assert_abs_diff_eq!(loss, (32f64).ln(), epsilon = 1e-12);
        let g = grad.unwrap();
        // Gradient rows sum to zero.
        for r in 0..3 {
            let s: f64 = g.row(r).iter().sum();
            assert_abs_diff_eq!(s, 0.0, epsilon = 1e-12);
        }
        assert!(matches!(
            cross_entropy(&logits, &[32, 0, 0], false),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn embedding_gathers_rows() {
        let table = Tensor::from_vec(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let e = embedding(&table, &[2, 0]).unwrap();
        assert_eq!(e.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert!(embedding(&table, &[3]).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let t = Tensor::from_vec(vec![2, 3], vec![1.0, -2.5, 0.0, 0.5, 3.25, -6.0]).unwrap();
        let mut buf = Vec::new();
        t.write_dump(&mut buf).unwrap();
        assert_eq!(&buf[..6], DUMP_MAGIC);
        let back = Tensor::read_dump(&mut buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn dump_rejects_bad_magic() {
        let mut buf = b"BOGUS1".to_vec();
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u64.to_le_bytes());
        buf.extend_from_slice(&1.0f32.to_le_bytes());
        assert!(matches!(
            Tensor::read_dump(&mut buf.as_slice(), Path::new("mem")),
            Err(Error::BadMagic { .. })
        ));
    }
}
