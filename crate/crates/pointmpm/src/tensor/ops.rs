//! Differentiable tensor operations. Each op computes its forward value and
//! registers a backward closure that accumulates into its parents.

use crate::error::{Error, Result};
use crate::tensor::{numel_of, Tensor};

// ---------------------------------------------------------------------------
// broadcasting helpers
// ---------------------------------------------------------------------------

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Binary ops accept equal shapes, a single-element operand, or an operand
/// whose shape is a trailing suffix of the other (row-major tiling).
enum Broadcast {
    Equal,
    SmallIsB(usize),
    SmallIsA(usize),
}

fn resolve_broadcast(a: &Tensor, b: &Tensor, op: &str) -> Result<(Vec<usize>, Broadcast)> {
    if a.shape() == b.shape() {
        return Ok((a.shape().to_vec(), Broadcast::Equal));
    }
    if b.numel() == 1 || is_suffix(b.shape(), a.shape()) {
        return Ok((a.shape().to_vec(), Broadcast::SmallIsB(b.numel())));
    }
    if a.numel() == 1 || is_suffix(a.shape(), b.shape()) {
        return Ok((b.shape().to_vec(), Broadcast::SmallIsA(a.numel())));
    }
    Err(Error::Shape(format!(
        "{op}: incompatible shapes {:?} and {:?}",
        a.shape(),
        b.shape()
    )))
}

fn binary_op(
    a: &Tensor,
    b: &Tensor,
    op: &str,
    fwd: impl Fn(f64, f64) -> f64 + 'static,
    dfa: impl Fn(f64, f64) -> f64 + 'static,
    dfb: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    let (out_shape, pattern) = resolve_broadcast(a, b, op)?;
    let n = numel_of(&out_shape);
    let ad = a.data();
    let bd = b.data();
    let data: Vec<f64> = match pattern {
        Broadcast::Equal => (0..n).map(|i| fwd(ad[i], bd[i])).collect(),
        Broadcast::SmallIsB(nb) => (0..n).map(|i| fwd(ad[i], bd[i % nb])).collect(),
        Broadcast::SmallIsA(na) => (0..n).map(|i| fwd(ad[i % na], bd[i])).collect(),
    };
    drop(ad);
    drop(bd);
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let ad = pa.data();
            let bd = pb.data();
            let mut ga = vec![0.0; ad.len()];
            let mut gb = vec![0.0; bd.len()];
            match pattern {
                Broadcast::Equal => {
                    for i in 0..g.len() {
                        ga[i] += dfa(ad[i], bd[i]) * g[i];
                        gb[i] += dfb(ad[i], bd[i]) * g[i];
                    }
                }
                Broadcast::SmallIsB(nb) => {
                    for i in 0..g.len() {
                        let bv = bd[i % nb];
                        ga[i] += dfa(ad[i], bv) * g[i];
                        gb[i % nb] += dfb(ad[i], bv) * g[i];
                    }
                }
                Broadcast::SmallIsA(na) => {
                    for i in 0..g.len() {
                        let av = ad[i % na];
                        ga[i % na] += dfa(av, bd[i]) * g[i];
                        gb[i] += dfb(av, bd[i]) * g[i];
                    }
                }
            }
            drop(ad);
            drop(bd);
            pa.accumulate_grad(&ga);
            pb.accumulate_grad(&gb);
        }),
    ))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_op(a, b, "add", |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_op(a, b, "sub", |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_op(a, b, "mul", |x, y| x * y, |_, y| y, |x, _| x)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.data().iter().any(|v| *v == 0.0) {
        return Err(Error::Domain("div: division by zero".into()));
    }
    binary_op(
        a,
        b,
        "div",
        |x, y| x / y,
        |_, y| 1.0 / y,
        |x, y| -x / (y * y),
    )
}

// ---------------------------------------------------------------------------
// unary elementwise ops
// ---------------------------------------------------------------------------

fn unary_op(
    a: &Tensor,
    fwd: impl Fn(f64) -> f64,
    // derivative given (input, output)
    dfdx: impl Fn(f64, f64) -> f64 + 'static,
) -> Tensor {
    let data: Vec<f64> = a.data().iter().map(|x| fwd(*x)).collect();
    let out_copy = data.clone();
    let pa = a.clone();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g| {
            let ad = pa.data();
            let ga: Vec<f64> = (0..g.len())
                .map(|i| dfdx(ad[i], out_copy[i]) * g[i])
                .collect();
            drop(ad);
            pa.accumulate_grad(&ga);
        }),
    )
}

pub fn neg(a: &Tensor) -> Tensor {
    unary_op(a, |x| -x, |_, _| -1.0)
}

pub fn exp(a: &Tensor) -> Tensor {
    unary_op(a, f64::exp, |_, y| y)
}

pub fn log(a: &Tensor) -> Result<Tensor> {
    if a.data().iter().any(|v| *v <= 0.0) {
        return Err(Error::Domain("log: input must be strictly positive".into()));
    }
    Ok(unary_op(a, f64::ln, |x, _| 1.0 / x))
}

pub fn sqrt(a: &Tensor) -> Result<Tensor> {
    if a.data().iter().any(|v| *v < 0.0) {
        return Err(Error::Domain("sqrt: input must be non-negative".into()));
    }
    Ok(unary_op(a, f64::sqrt, |_, y| 0.5 / y))
}

pub fn relu(a: &Tensor) -> Tensor {
    unary_op(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
}

pub fn leaky_relu(a: &Tensor, slope: f64) -> Tensor {
    unary_op(
        a,
        move |x| if x > 0.0 { x } else { slope * x },
        move |x, _| if x > 0.0 { 1.0 } else { slope },
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-form approximation; the gradient differentiates this exact expression,
/// not the erf form.
pub fn gelu(a: &Tensor) -> Tensor {
    unary_op(
        a,
        |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        |x, _| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        },
    )
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    unary_op(a, move |x| c * x, move |_, _| c)
}

pub fn add_scalar(a: &Tensor, c: f64) -> Tensor {
    unary_op(a, move |x| x + c, |_, _| 1.0)
}

/// x·ln(x) with the 0·ln(0) = 0 convention; keeps entropy terms finite when a
/// softmax output underflows to zero.
pub fn xlnx(a: &Tensor) -> Result<Tensor> {
    if a.data().iter().any(|v| *v < 0.0) {
        return Err(Error::Domain("xlnx: input must be non-negative".into()));
    }
    Ok(unary_op(
        a,
        |x| if x == 0.0 { 0.0 } else { x * x.ln() },
        |x, _| x.max(1e-300).ln() + 1.0,
    ))
}

// ---------------------------------------------------------------------------
// matmul and layout ops
// ---------------------------------------------------------------------------

fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av != 0.0 {
                let brow = &b[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
}

// out[m,k] += g[m,n] @ b[k,n]^T
fn mm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            out[i * k + l] += s;
        }
    }
}

// out[k,n] += a[m,k]^T @ g[m,n]
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for l in 0..k {
            let av = arow[l];
            if av != 0.0 {
                let orow = &mut out[l * n..(l + 1) * n];
                for j in 0..n {
                    orow[j] += av * grow[j];
                }
            }
        }
    }
}

/// Matrix product. Rank-2 operands multiply directly; higher ranks are treated
/// as batches and must share all leading dimensions.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
    if ash.len() < 2 || bsh.len() < 2 {
        return Err(Error::Shape(format!(
            "matmul: operands must have rank >= 2, got {:?} x {:?}",
            ash, bsh
        )));
    }
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul: inner dimensions differ, {:?} x {:?}",
            ash, bsh
        )));
    }
    let alead = &ash[..ash.len() - 2];
    let blead = &bsh[..bsh.len() - 2];
    if alead != blead {
        return Err(Error::Shape(format!(
            "matmul: leading (batch) dimensions differ, {:?} x {:?}",
            ash, bsh
        )));
    }
    let batches = numel_of(alead);
    let mut out_shape = alead.to_vec();
    out_shape.push(m);
    out_shape.push(n);

    let mut data = vec![0.0; batches * m * n];
    {
        let ad = a.data();
        let bd = b.data();
        for t in 0..batches {
            mm_nn(
                &ad[t * m * k..(t + 1) * m * k],
                &bd[t * k * n..(t + 1) * k * n],
                m,
                k,
                n,
                &mut data[t * m * n..(t + 1) * m * n],
            );
        }
    }
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let ad = pa.data();
            let bd = pb.data();
            let mut ga = vec![0.0; ad.len()];
            let mut gb = vec![0.0; bd.len()];
            for t in 0..batches {
                let gt = &g[t * m * n..(t + 1) * m * n];
                mm_nt(
                    gt,
                    &bd[t * k * n..(t + 1) * k * n],
                    m,
                    n,
                    k,
                    &mut ga[t * m * k..(t + 1) * m * k],
                );
                mm_tn(
                    &ad[t * m * k..(t + 1) * m * k],
                    gt,
                    m,
                    k,
                    n,
                    &mut gb[t * k * n..(t + 1) * k * n],
                );
            }
            drop(ad);
            drop(bd);
            pa.accumulate_grad(&ga);
            pb.accumulate_grad(&gb);
        }),
    ))
}

fn transpose_last2(data: &[f64], lead: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for t in 0..lead {
        let src = &data[t * m * n..(t + 1) * m * n];
        let dst = &mut out[t * m * n..(t + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

/// Swap the last two axes (matrix transpose; batched for higher ranks).
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let sh = a.shape().to_vec();
    if sh.len() < 2 {
        return Err(Error::Shape(format!(
            "transpose: rank >= 2 required, got {:?}",
            sh
        )));
    }
    let (m, n) = (sh[sh.len() - 2], sh[sh.len() - 1]);
    let lead = numel_of(&sh[..sh.len() - 2]);
    let data = transpose_last2(&a.data(), lead, m, n);
    let mut out_shape = sh.clone();
    let r = out_shape.len();
    out_shape.swap(r - 2, r - 1);
    let pa = a.clone();
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![a.clone()],
        Box::new(move |g| {
            // grad has shape [..., n, m]; transpose back
            let ga = transpose_last2(g, lead, n, m);
            pa.accumulate_grad(&ga);
        }),
    ))
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if numel_of(shape) != a.numel() {
        return Err(Error::Shape(format!(
            "reshape: cannot view {:?} as {:?}",
            a.shape(),
            shape
        )));
    }
    let pa = a.clone();
    Ok(Tensor::from_op(
        shape.to_vec(),
        a.to_vec(),
        vec![a.clone()],
        Box::new(move |g| pa.accumulate_grad(g)),
    ))
}

/// Concatenate along the last axis. All other dimensions must agree.
pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Shape("concat_last: empty input list".into()));
    }
    let rank = parts[0].shape().len();
    if rank == 0 {
        return Err(Error::Shape("concat_last: operands must have rank >= 1".into()));
    }
    let lead = &parts[0].shape()[..rank - 1];
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        if p.shape().len() != rank || &p.shape()[..rank - 1] != lead {
            return Err(Error::Shape(format!(
                "concat_last: mismatched shapes {:?} vs {:?}",
                parts[0].shape(),
                p.shape()
            )));
        }
        widths.push(p.shape()[rank - 1]);
    }
    let rows = numel_of(lead);
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, w) in parts.iter().zip(&widths) {
            let d = p.data();
            data.extend_from_slice(&d[r * w..(r + 1) * w]);
        }
    }
    let mut out_shape = lead.to_vec();
    out_shape.push(total);
    let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    let widths_c = widths.clone();
    let owned_c = owned.clone();
    Ok(Tensor::from_op(
        out_shape,
        data,
        owned,
        Box::new(move |g| {
            for (pi, p) in owned_c.iter().enumerate() {
                let w = widths_c[pi];
                let offset: usize = widths_c[..pi].iter().sum();
                let mut gp = vec![0.0; rows * w];
                for r in 0..rows {
                    gp[r * w..(r + 1) * w]
                        .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                }
                p.accumulate_grad(&gp);
            }
        }),
    ))
}

/// Stack equally-shaped tensors along a new leading axis.
pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Shape("stack: empty input list".into()));
    }
    let inner = parts[0].shape().to_vec();
    let step = numel_of(&inner);
    let mut data = Vec::with_capacity(parts.len() * step);
    for p in parts {
        if p.shape() != inner.as_slice() {
            return Err(Error::Shape(format!(
                "stack: mismatched shapes {:?} vs {:?}",
                inner,
                p.shape()
            )));
        }
        data.extend_from_slice(&p.data());
    }
    let mut out_shape = vec![parts.len()];
    out_shape.extend_from_slice(&inner);
    let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    let owned_c = owned.clone();
    Ok(Tensor::from_op(
        out_shape,
        data,
        owned,
        Box::new(move |g| {
            for (pi, p) in owned_c.iter().enumerate() {
                p.accumulate_grad(&g[pi * step..(pi + 1) * step]);
            }
        }),
    ))
}

/// Gather rows (leading-axis slices) by index; duplicate indices accumulate
/// their gradients.
pub fn index_rows(a: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let sh = a.shape();
    if sh.is_empty() {
        return Err(Error::Shape("index_rows: rank >= 1 required".into()));
    }
    let rows = sh[0];
    let rowlen = a.numel() / rows.max(1);
    for &i in idx {
        if i >= rows {
            return Err(Error::Size(format!(
                "index_rows: index {i} out of range for {rows} rows"
            )));
        }
    }
    let ad = a.data();
    let mut data = Vec::with_capacity(idx.len() * rowlen);
    for &i in idx {
        data.extend_from_slice(&ad[i * rowlen..(i + 1) * rowlen]);
    }
    drop(ad);
    let mut out_shape = vec![idx.len()];
    out_shape.extend_from_slice(&sh[1..]);
    let pa = a.clone();
    let idx_c = idx.to_vec();
    let total = a.numel();
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![a.clone()],
        Box::new(move |g| {
            let mut ga = vec![0.0; total];
            for (o, &i) in idx_c.iter().enumerate() {
                for j in 0..rowlen {
                    ga[i * rowlen + j] += g[o * rowlen + j];
                }
            }
            pa.accumulate_grad(&ga);
        }),
    ))
}

/// Contiguous leading-axis slice.
pub fn slice_rows(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let sh = a.shape();
    if sh.is_empty() {
        return Err(Error::Shape("slice_rows: rank >= 1 required".into()));
    }
    let rows = sh[0];
    if start + len > rows {
        return Err(Error::Size(format!(
            "slice_rows: range {start}..{} out of {rows} rows",
            start + len
        )));
    }
    let rowlen = a.numel() / rows.max(1);
    let data = a.data()[start * rowlen..(start + len) * rowlen].to_vec();
    let mut out_shape = vec![len];
    out_shape.extend_from_slice(&sh[1..]);
    let pa = a.clone();
    let total = a.numel();
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![a.clone()],
        Box::new(move |g| {
            let mut ga = vec![0.0; total];
            ga[start * rowlen..(start + len) * rowlen].copy_from_slice(g);
            pa.accumulate_grad(&ga);
        }),
    ))
}

/// Single row as a rank-(r-1) tensor.
pub fn row(a: &Tensor, i: usize) -> Result<Tensor> {
    let rest = a.shape()[1..].to_vec();
    reshape(&index_rows(a, &[i])?, &rest)
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

/// Reduce one axis. Max routes its gradient to the first maximal element
/// (ties break toward the lowest index).
pub fn reduce(a: &Tensor, kind: Reduce, axis: usize) -> Result<Tensor> {
    let sh = a.shape().to_vec();
    if axis >= sh.len() {
        return Err(Error::Shape(format!(
            "reduce: axis {axis} invalid for shape {:?}",
            sh
        )));
    }
    let outer = numel_of(&sh[..axis]);
    let alen = sh[axis];
    let inner = numel_of(&sh[axis + 1..]);
    let mut out_shape = sh.clone();
    out_shape.remove(axis);

    let ad = a.data();
    let mut data = vec![0.0; outer * inner];
    let mut argmax: Vec<usize> = Vec::new();
    match kind {
        Reduce::Sum | Reduce::Mean => {
            for o in 0..outer {
                for ii in 0..inner {
                    let mut s = 0.0;
                    for j in 0..alen {
                        s += ad[(o * alen + j) * inner + ii];
                    }
                    data[o * inner + ii] = if kind == Reduce::Mean {
                        s / alen as f64
                    } else {
                        s
                    };
                }
            }
        }
        Reduce::Max => {
            argmax = vec![0; outer * inner];
            for o in 0..outer {
                for ii in 0..inner {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_j = 0;
                    for j in 0..alen {
                        let v = ad[(o * alen + j) * inner + ii];
                        if v > best {
                            best = v;
                            best_j = j;
                        }
                    }
                    data[o * inner + ii] = best;
                    argmax[o * inner + ii] = best_j;
                }
            }
        }
    }
    drop(ad);
    let pa = a.clone();
    let total = a.numel();
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![a.clone()],
        Box::new(move |g| {
            let mut ga = vec![0.0; total];
            match kind {
                Reduce::Sum => {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let gv = g[o * inner + ii];
                            for j in 0..alen {
                                ga[(o * alen + j) * inner + ii] += gv;
                            }
                        }
                    }
                }
                Reduce::Mean => {
                    let inv = 1.0 / alen as f64;
                    for o in 0..outer {
                        for ii in 0..inner {
                            let gv = g[o * inner + ii] * inv;
                            for j in 0..alen {
                                ga[(o * alen + j) * inner + ii] += gv;
                            }
                        }
                    }
                }
                Reduce::Max => {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let j = argmax[o * inner + ii];
                            ga[(o * alen + j) * inner + ii] += g[o * inner + ii];
                        }
                    }
                }
            }
            pa.accumulate_grad(&ga);
        }),
    ))
}

pub fn sum_all(a: &Tensor) -> Tensor {
    let flat = reshape(a, &[a.numel()]).expect("reshape to flat cannot fail");
    reduce(&flat, Reduce::Sum, 0).expect("axis 0 valid for rank-1")
}

pub fn mean_all(a: &Tensor) -> Tensor {
    let flat = reshape(a, &[a.numel()]).expect("reshape to flat cannot fail");
    reduce(&flat, Reduce::Mean, 0).expect("axis 0 valid for rank-1")
}

// ---------------------------------------------------------------------------
// softmax / layernorm / losses
// ---------------------------------------------------------------------------

/// Numerically stabilized softmax along `axis`.
pub fn softmax(a: &Tensor, axis: usize) -> Result<Tensor> {
    let sh = a.shape().to_vec();
    if axis >= sh.len() {
        return Err(Error::Shape(format!(
            "softmax: axis {axis} invalid for shape {:?}",
            sh
        )));
    }
    let outer = numel_of(&sh[..axis]);
    let alen = sh[axis];
    let inner = numel_of(&sh[axis + 1..]);
    let ad = a.data();
    let mut data = vec![0.0; ad.len()];
    for o in 0..outer {
        for ii in 0..inner {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..alen {
                mx = mx.max(ad[(o * alen + j) * inner + ii]);
            }
            let mut z = 0.0;
            for j in 0..alen {
                let e = (ad[(o * alen + j) * inner + ii] - mx).exp();
                data[(o * alen + j) * inner + ii] = e;
                z += e;
            }
            for j in 0..alen {
                data[(o * alen + j) * inner + ii] /= z;
            }
        }
    }
    drop(ad);
    let y = data.clone();
    let pa = a.clone();
    Ok(Tensor::from_op(
        sh,
        data,
        vec![a.clone()],
        Box::new(move |g| {
            let mut ga = vec![0.0; g.len()];
            for o in 0..outer {
                for ii in 0..inner {
                    let mut dot = 0.0;
                    for j in 0..alen {
                        let idx = (o * alen + j) * inner + ii;
                        dot += g[idx] * y[idx];
                    }
                    for j in 0..alen {
                        let idx = (o * alen + j) * inner + ii;
                        ga[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
            pa.accumulate_grad(&ga);
        }),
    ))
}

/// Layer normalization over the last axis with learnable gain and bias.
pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let sh = x.shape().to_vec();
    if sh.is_empty() {
        return Err(Error::Shape("layernorm: rank >= 1 required".into()));
    }
    let n = sh[sh.len() - 1];
    if gain.shape() != [n] || bias.shape() != [n] {
        return Err(Error::Shape(format!(
            "layernorm: gain/bias must have shape [{n}], got {:?}/{:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    let rows = x.numel() / n;
    let xd = x.data();
    let gd = gain.data();
    let bd = bias.data();
    let mut data = vec![0.0; xd.len()];
    let mut xhat = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = &xd[r * n..(r + 1) * n];
        let mu = xr.iter().sum::<f64>() / n as f64;
        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let s = (var + eps).sqrt();
        inv_std[r] = 1.0 / s;
        for j in 0..n {
            let xh = (xr[j] - mu) / s;
            xhat[r * n + j] = xh;
            data[r * n + j] = xh * gd[j] + bd[j];
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);
    let (px, pg, pb) = (x.clone(), gain.clone(), bias.clone());
    Ok(Tensor::from_op(
        sh,
        data,
        vec![x.clone(), gain.clone(), bias.clone()],
        Box::new(move |g| {
            let gd = pg.data();
            let mut gx = vec![0.0; g.len()];
            let mut gg = vec![0.0; gd.len()];
            let mut gb = vec![0.0; gd.len()];
            for r in 0..rows {
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..n {
                    let idx = r * n + j;
                    gg[j] += g[idx] * xhat[idx];
                    gb[j] += g[idx];
                    let h = g[idx] * gd[j];
                    m1 += h;
                    m2 += h * xhat[idx];
                }
                m1 /= n as f64;
                m2 /= n as f64;
                for j in 0..n {
                    let idx = r * n + j;
                    let h = g[idx] * gd[j];
                    gx[idx] += (h - m1 - xhat[idx] * m2) * inv_std[r];
                }
            }
            drop(gd);
            px.accumulate_grad(&gx);
            pg.accumulate_grad(&gg);
            pb.accumulate_grad(&gb);
        }),
    ))
}

/// Mean negative log-likelihood of integer targets under a row-wise softmax.
pub fn cross_entropy_logits(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let sh = logits.shape();
    if sh.len() != 2 {
        return Err(Error::Shape(format!(
            "cross_entropy_logits: expected [batch, classes], got {:?}",
            sh
        )));
    }
    let (b, n) = (sh[0], sh[1]);
    if targets.len() != b {
        return Err(Error::Shape(format!(
            "cross_entropy_logits: {b} rows but {} targets",
            targets.len()
        )));
    }
    for &t in targets {
        if t >= n {
            return Err(Error::Label(format!(
                "cross_entropy_logits: target {t} out of range [0,{n})"
            )));
        }
    }
    let ld = logits.data();
    let mut probs = vec![0.0; b * n];
    let mut loss = 0.0;
    for r in 0..b {
        let rowd = &ld[r * n..(r + 1) * n];
        let mx = rowd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = rowd.iter().map(|v| (v - mx).exp()).sum();
        let lse = mx + z.ln();
        loss += lse - rowd[targets[r]];
        for j in 0..n {
            probs[r * n + j] = (rowd[j] - lse).exp();
        }
    }
    loss /= b as f64;
    drop(ld);
    let pl = logits.clone();
    let targets_c = targets.to_vec();
    Ok(Tensor::from_op(
        vec![],
        vec![loss],
        vec![logits.clone()],
        Box::new(move |g| {
            let gv = g[0] / b as f64;
            let mut ga = vec![0.0; b * n];
            for r in 0..b {
                for j in 0..n {
                    let ind = if j == targets_c[r] { 1.0 } else { 0.0 };
                    ga[r * n + j] += gv * (probs[r * n + j] - ind);
                }
            }
            pl.accumulate_grad(&ga);
        }),
    ))
}

// ---------------------------------------------------------------------------
// Chamfer distance (l1 form)
// ---------------------------------------------------------------------------

/// Symmetric mean nearest-neighbor Euclidean distance between two point sets
/// of shape [n,3] and [m,3]. Differentiable w.r.t. both sides at configurations
/// where the nearest-neighbor assignments are locally stable.
pub fn chamfer_l1(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    for (name, t) in [("first", p), ("second", q)] {
        let sh = t.shape();
        if sh.len() != 2 || sh[1] != 3 {
            return Err(Error::Shape(format!(
                "chamfer_l1: {name} set must have shape [*, 3], got {:?}",
                sh
            )));
        }
        if sh[0] == 0 {
            return Err(Error::Size(format!("chamfer_l1: {name} set is empty")));
        }
    }
    let n = p.shape()[0];
    let m = q.shape()[0];
    let pd = p.data();
    let qd = q.data();
    let dist = |i: usize, j: usize| -> f64 {
        let dx = pd[3 * i] - qd[3 * j];
        let dy = pd[3 * i + 1] - qd[3 * j + 1];
        let dz = pd[3 * i + 2] - qd[3 * j + 2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    };
    let mut nn_pq = vec![0usize; n];
    let mut d_pq = vec![0.0; n];
    for i in 0..n {
        let mut best = f64::INFINITY;
        let mut bj = 0;
        for j in 0..m {
            let d = dist(i, j);
            if d < best {
                best = d;
                bj = j;
            }
        }
        nn_pq[i] = bj;
        d_pq[i] = best;
    }
    let mut nn_qp = vec![0usize; m];
    let mut d_qp = vec![0.0; m];
    for j in 0..m {
        let mut best = f64::INFINITY;
        let mut bi = 0;
        for i in 0..n {
            let d = dist(i, j);
            if d < best {
                best = d;
                bi = i;
            }
        }
        nn_qp[j] = bi;
        d_qp[j] = best;
    }
    let value = d_pq.iter().sum::<f64>() / n as f64 + d_qp.iter().sum::<f64>() / m as f64;
    drop(pd);
    drop(qd);
    let (pp, pq) = (p.clone(), q.clone());
    Ok(Tensor::from_op(
        vec![],
        vec![value],
        vec![p.clone(), q.clone()],
        Box::new(move |g| {
            let gv = g[0];
            let pd = pp.data();
            let qd = pq.data();
            let mut gp = vec![0.0; 3 * n];
            let mut gq = vec![0.0; 3 * m];
            let inv_n = gv / n as f64;
            for i in 0..n {
                let j = nn_pq[i];
                let d = d_pq[i];
                if d > 0.0 {
                    for c in 0..3 {
                        let u = (pd[3 * i + c] - qd[3 * j + c]) / d;
                        gp[3 * i + c] += inv_n * u;
                        gq[3 * j + c] -= inv_n * u;
                    }
                }
            }
            let inv_m = gv / m as f64;
            for j in 0..m {
                let i = nn_qp[j];
                let d = d_qp[j];
                if d > 0.0 {
                    for c in 0..3 {
                        let u = (qd[3 * j + c] - pd[3 * i + c]) / d;
                        gq[3 * j + c] += inv_m * u;
                        gp[3 * i + c] -= inv_m * u;
                    }
                }
            }
            drop(pd);
            drop(qd);
            pp.accumulate_grad(&gp);
            pq.accumulate_grad(&gq);
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_rel_err_fd;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::param(shape, data.to_vec())
    }

    #[test]
    fn add_and_relu_examples() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(add(&a, &b).unwrap().to_vec(), vec![4.0, 6.0]);
        let x = t(&[2], &[-1.0, 2.0]);
        assert_eq!(relu(&x).to_vec(), vec![0.0, 2.0]);
    }

    #[test]
    fn broadcast_suffix_and_scalar() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        let y = add(&a, &b).unwrap();
        assert_eq!(y.to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let s = Tensor::scalar(2.0);
        let z = mul(&a, &s).unwrap();
        assert_eq!(z.to_vec(), vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
        // gradient of the broadcast operand sums over the tiled positions
        let loss = sum_all(&y);
        loss.backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn incompatible_shapes_error() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2], &[0.0; 2]);
        assert!(matches!(add(&a, &b), Err(crate::error::Error::Shape(_))));
    }

    #[test]
    fn div_by_zero_and_log_nonpositive_are_domain_errors() {
        let a = t(&[2], &[1.0, 2.0]);
        let z = t(&[2], &[1.0, 0.0]);
        assert!(matches!(div(&a, &z), Err(crate::error::Error::Domain(_))));
        let neg = t(&[2], &[1.0, -1.0]);
        assert!(matches!(log(&neg), Err(crate::error::Error::Domain(_))));
    }

    #[test]
    fn exp_gradient_matches_finite_differences_tightly() {
        let x = t(&[], &[1.0]);
        let err = max_rel_err_fd(&[x.clone()], || Ok(exp(&x)), 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn matmul_examples_and_gradient() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&eye, &m).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);

        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(matmul(&a, &b).unwrap().to_vec(), vec![11.0]);

        let a = t(&[3, 4], &[0.3, -0.7, 1.2, 0.5, -0.1, 0.9, 0.2, -1.4, 0.8, 0.6, -0.3, 1.1]);
        let b = t(&[4, 2], &[0.2, -0.5, 1.0, 0.7, -0.9, 0.4, 0.1, 0.3]);
        let err = max_rel_err_fd(
            &[a.clone(), b.clone()],
            || Ok(sum_all(&matmul(&a, &b)?)),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn matmul_batched_matches_per_slice() {
        let a = t(&[2, 2, 3], &[1., 2., 3., 4., 5., 6., -1., 0., 2., 3., 1., -2.]);
        let b = t(&[2, 3, 2], &[1., 0., 0., 1., 1., 1., 2., 1., 0., -1., 1., 0.]);
        let y = matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        let a0 = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b0 = t(&[3, 2], &[1., 0., 0., 1., 1., 1.]);
        assert_eq!(y.to_vec()[..4], matmul(&a0, &b0).unwrap().to_vec()[..]);
    }

    #[test]
    fn matmul_inner_mismatch_is_shape_error() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(
            matmul(&a, &b),
            Err(crate::error::Error::Shape(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let x = t(&[2], &[0.0, 0.0]);
        assert_eq!(softmax(&x, 0).unwrap().to_vec(), vec![0.5, 0.5]);
        let big = t(&[2], &[1000.0, 1000.0]);
        let y = softmax(&big, 0).unwrap().to_vec();
        assert!((y[0] - 0.5).abs() < 1e-12 && y[1].is_finite());
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let x = t(&[2, 4], &[0.3, -1.0, 0.7, 0.1, 2.0, -0.5, 0.0, 1.3]);
        let w = Tensor::constant(&[2, 4], vec![0.2, -0.4, 0.9, 0.5, -0.7, 0.3, 0.8, -0.2]);
        let err = max_rel_err_fd(
            &[x.clone()],
            || Ok(sum_all(&mul(&softmax(&x, 1)?, &w)?)),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn layernorm_examples_and_gradient() {
        let gain = t(&[3], &[1.0, 1.0, 1.0]);
        let bias = t(&[3], &[0.0, 0.0, 0.0]);
        let constant = t(&[3], &[5.0, 5.0, 5.0]);
        let y = layernorm(&constant, &gain, &bias, 1e-5).unwrap();
        assert!(y.to_vec().iter().all(|v| v.abs() < 1e-9));

        let gain2 = t(&[2], &[1.0, 1.0]);
        let bias2 = t(&[2], &[0.0, 0.0]);
        let x2 = t(&[2], &[1.0, 3.0]);
        let y2 = layernorm(&x2, &gain2, &bias2, 1e-12).unwrap().to_vec();
        assert!((y2[0] + 1.0).abs() < 1e-5 && (y2[1] - 1.0).abs() < 1e-5);

        let x = t(&[2, 3], &[0.3, -0.9, 1.5, 2.0, 0.1, -0.4]);
        let g = t(&[3], &[1.1, 0.9, 1.3]);
        let b = t(&[3], &[0.1, -0.2, 0.05]);
        let w = Tensor::constant(&[2, 3], vec![0.5, -0.3, 0.8, 0.2, 0.9, -0.6]);
        let err = max_rel_err_fd(
            &[x.clone(), g.clone(), b.clone()],
            || Ok(sum_all(&mul(&layernorm(&x, &g, &b, 1e-5)?, &w)?)),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn reduce_examples() {
        let x = t(&[2, 2], &[1.0, 5.0, 2.0, 2.0]);
        assert_eq!(reduce(&x, Reduce::Max, 1).unwrap().to_vec(), vec![5.0, 2.0]);
        let m = t(&[2], &[2.0, 4.0]);
        assert_eq!(reduce(&m, Reduce::Mean, 0).unwrap().to_vec(), vec![3.0]);
    }

    #[test]
    fn max_gradient_is_one_hot_at_first_argmax() {
        let x = t(&[3], &[2.0, 7.0, 7.0]);
        let loss = reduce(&x, Reduce::Max, 0).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn cross_entropy_examples_and_gradient() {
        let logits = t(&[1, 8], &[0.0; 8]);
        let loss = cross_entropy_logits(&logits, &[3]).unwrap();
        assert!((loss.item() - (8.0f64).ln()).abs() < 1e-12);

        let mut sharp = vec![0.0; 8];
        sharp[2] = 60.0;
        let confident = t(&[1, 8], &sharp);
        assert!(cross_entropy_logits(&confident, &[2]).unwrap().item() < 1e-12);

        let x = t(&[3, 5], &[0.2, -0.6, 1.0, 0.4, -0.3, 1.5, 0.0, -0.8, 0.3, 0.9, -1.1, 0.5, 0.2, -0.2, 0.7]);
        let err = max_rel_err_fd(
            &[x.clone()],
            || cross_entropy_logits(&x, &[2, 0, 4]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");

        assert!(matches!(
            cross_entropy_logits(&t(&[1, 4], &[0.0; 4]), &[4]),
            Err(crate::error::Error::Label(_))
        ));
    }

    #[test]
    fn chamfer_examples() {
        let p = t(&[2, 3], &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let same = t(&[2, 3], &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        assert_eq!(chamfer_l1(&p, &same).unwrap().item(), 0.0);

        let a = t(&[1, 3], &[0.0, 0.0, 0.0]);
        let b = t(&[1, 3], &[1.0, 0.0, 0.0]);
        assert!((chamfer_l1(&a, &b).unwrap().item() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn chamfer_gradient_matches_finite_differences() {
        // generic positions, so nearest-neighbor assignments are stable
        let p = t(&[3, 3], &[0.1, 0.2, 0.0, 1.3, -0.4, 0.5, -0.8, 0.9, 1.1]);
        let q = t(&[4, 3], &[0.0, 0.3, 0.1, 1.0, -0.5, 0.6, -1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let err = max_rel_err_fd(&[p.clone(), q.clone()], || chamfer_l1(&p, &q), 1e-6).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn concat_stack_index_slice_gradients() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 3], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let c = concat_last(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(c.to_vec(), vec![1., 2., 5., 6., 7., 3., 4., 8., 9., 10.]);
        let err = max_rel_err_fd(
            &[a.clone(), b.clone()],
            || {
                let c = concat_last(&[&a, &b])?;
                Ok(sum_all(&mul(&c, &c)?))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");

        let r0 = t(&[3], &[1.0, 2.0, 3.0]);
        let r1 = t(&[3], &[4.0, 5.0, 6.0]);
        let s = stack(&[&r0, &r1]).unwrap();
        assert_eq!(s.shape(), &[2, 3]);

        let picked = index_rows(&s, &[1, 1, 0]).unwrap();
        assert_eq!(picked.shape(), &[3, 3]);
        let loss = sum_all(&picked);
        loss.backward().unwrap();
        // row 1 selected twice, row 0 once
        assert_eq!(r0.grad().unwrap(), vec![1.0; 3]);
        assert_eq!(r1.grad().unwrap(), vec![2.0; 3]);

        let sl = slice_rows(&s, 1, 1).unwrap();
        assert_eq!(sl.to_vec(), vec![4.0, 5.0, 6.0]);
        assert!(matches!(
            index_rows(&s, &[2]),
            Err(crate::error::Error::Size(_))
        ));
    }

    #[test]
    fn gelu_and_misc_unary_gradients() {
        let x = t(&[5], &[-1.3, -0.2, 0.0, 0.7, 2.1]);
        let err = max_rel_err_fd(&[x.clone()], || Ok(sum_all(&gelu(&x))), 1e-5).unwrap();
        assert!(err < 1e-6, "gelu rel err {err}");

        let y = t(&[3], &[0.4, 1.7, 3.2]);
        let err = max_rel_err_fd(
            &[y.clone()],
            || {
                let s = sqrt(&y)?;
                let l = log(&y)?;
                Ok(sum_all(&add(&s, &l)?))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "sqrt/log rel err {err}");

        let z = t(&[3], &[0.2, 0.5, 0.9]);
        let err = max_rel_err_fd(&[z.clone()], || Ok(sum_all(&xlnx(&z)?)), 1e-6).unwrap();
        assert!(err < 1e-5, "xlnx rel err {err}");
    }

    #[test]
    fn transpose_round_trip() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let at = transpose(&a).unwrap();
        assert_eq!(at.shape(), &[3, 2]);
        assert_eq!(at.to_vec(), vec![1., 4., 2., 5., 3., 6.]);
        let back = transpose(&at).unwrap();
        assert_eq!(back.to_vec(), a.to_vec());
        let err = max_rel_err_fd(
            &[a.clone()],
            || {
                let at = transpose(&a)?;
                Ok(sum_all(&mul(&at, &at)?))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
    }
}
