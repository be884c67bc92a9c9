//! Forward kernels and their vector-Jacobian products, on plain arrays.
//!
//! The tape calls into these; they are also usable directly when no
//! gradient is needed.

use crate::array::Array;
use crate::error::{Error, Result};

/// Log-probabilities are clamped at this floor in [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

fn expect2(op: &'static str, a: &Array) -> Result<(usize, usize)> {
    a.dims2()
        .ok_or_else(|| Error::shape(op, format!("expected 2-D array, got {:?}", a.shape())))
}

/// Same-length dilated 1-D convolution with stride 1 and symmetric zero
/// padding. `input` is `T x Cin`, `kernels` is `Cout x Cin x k` with odd `k`.
pub fn conv1d(input: &Array, kernels: &Array, dilation: usize) -> Result<Array> {
    let (t_len, c_in) = expect2("conv1d", input)?;
    let [c_out, k_in, k] = kernels.shape()[..] else {
        return Err(Error::shape(
            "conv1d",
            format!("kernels must be Cout x Cin x k, got {:?}", kernels.shape()),
        ));
    };
    if k_in != c_in {
        return Err(Error::shape(
            "conv1d",
            format!("input has {c_in} channels but kernels expect {k_in}"),
        ));
    }
    if k % 2 == 0 {
        return Err(Error::invalid(format!(
            "conv1d kernel size must be odd, got {k}"
        )));
    }
    if dilation == 0 {
        return Err(Error::invalid("conv1d dilation must be >= 1"));
    }
    let x = input.data();
    let wt = taps_major(kernels);
    let half = (k / 2) as isize;
    let mut out = vec![0.0; t_len * c_out];
    for j in 0..k {
        let off = (j as isize - half) * dilation as isize;
        // valid output rows: 0 <= t + off < t_len
        let t_lo = (-off).max(0) as usize;
        let t_hi = (t_len as isize - off).clamp(0, t_len as isize) as usize;
        let wj = &wt[j * c_out * c_in..][..c_out * c_in];
        for t in t_lo..t_hi {
            let src = &x[(t as isize + off) as usize * c_in..][..c_in];
            let dst = &mut out[t * c_out..][..c_out];
            for (d, wr) in dst.iter_mut().zip(wj.chunks_exact(c_in)) {
                *d += dot(wr, src);
            }
        }
    }
    Array::new(vec![t_len, c_out], out)
}

/// Reorders `Cout x Cin x k` kernels to `k x Cout x Cin`.
fn taps_major(kernels: &Array) -> Vec<f64> {
    let [c_out, c_in, k] = kernels.shape()[..] else {
        unreachable!()
    };
    let w = kernels.data();
    let mut out = vec![0.0; w.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            for j in 0..k {
                out[(j * c_out + co) * c_in + ci] = w[(co * c_in + ci) * k + j];
            }
        }
    }
    out
}

/// Gradients of [`conv1d`] with respect to input and kernels.
pub fn conv1d_backward(
    input: &Array,
    kernels: &Array,
    dilation: usize,
    grad_out: &Array,
    need_input: bool,
) -> (Option<Array>, Array) {
    let (t_len, c_in) = input.dims2().expect("conv1d input");
    let (c_out, k) = (kernels.shape()[0], kernels.shape()[2]);
    let x = input.data();
    let wt = taps_major(kernels);
    let g = grad_out.data();
    let half = (k / 2) as isize;
    let mut gx = need_input.then(|| vec![0.0; x.len()]);
    // accumulated in [j][co][ci] order, transposed back at the end
    let mut gwt = vec![0.0; wt.len()];
    for j in 0..k {
        let off = (j as isize - half) * dilation as isize;
        let t_lo = (-off).max(0) as usize;
        let t_hi = (t_len as isize - off).clamp(0, t_len as isize) as usize;
        let wj = &wt[j * c_out * c_in..][..c_out * c_in];
        let gwj = &mut gwt[j * c_out * c_in..][..c_out * c_in];
        for t in t_lo..t_hi {
            let s = (t as isize + off) as usize;
            let src = &x[s * c_in..][..c_in];
            let go = &g[t * c_out..][..c_out];
            for (co, &gv) in go.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                for (a, b) in gwj[co * c_in..][..c_in].iter_mut().zip(src) {
                    *a += gv * b;
                }
                if let Some(gx) = gx.as_mut() {
                    for (a, b) in gx[s * c_in..][..c_in]
                        .iter_mut()
                        .zip(&wj[co * c_in..][..c_in])
                    {
                        *a += gv * b;
                    }
                }
            }
        }
    }
    let mut gw = vec![0.0; gwt.len()];
    for j in 0..k {
        for co in 0..c_out {
            for ci in 0..c_in {
                gw[(co * c_in + ci) * k + j] = gwt[(j * c_out + co) * c_in + ci];
            }
        }
    }
    (
        gx.map(|v| Array::new(input.shape().to_vec(), v).expect("shape")),
        Array::new(kernels.shape().to_vec(), gw).expect("shape"),
    )
}

/// `input · weightsᵀ + bias`. A 1-D input is treated as a single row and a
/// 1-D result is returned.
pub fn dense(input: &Array, weights: &Array, bias: &Array) -> Result<Array> {
    let (rows, d_in, one_d) = match input.shape() {
        [d] => (1, *d, true),
        [b, d] => (*b, *d, false),
        s => {
            return Err(Error::shape(
                "dense",
                format!("input must be 1-D or 2-D, got {s:?}"),
            ))
        }
    };
    let (d_out, w_in) = expect2("dense", weights)?;
    if w_in != d_in {
        return Err(Error::shape(
            "dense",
            format!("input width {d_in} but weights are {d_out}x{w_in}"),
        ));
    }
    if bias.shape() != [d_out] {
        return Err(Error::shape(
            "dense",
            format!("bias must be [{d_out}], got {:?}", bias.shape()),
        ));
    }
    let x = input.data();
    let w = weights.data();
    let b = bias.data();
    let mut out = Vec::with_capacity(rows * d_out);
    for r in 0..rows {
        let xr = &x[r * d_in..][..d_in];
        for o in 0..d_out {
            let wr = &w[o * d_in..][..d_in];
            out.push(b[o] + dot(xr, wr));
        }
    }
    let shape = if one_d {
        vec![d_out]
    } else {
        vec![rows, d_out]
    };
    Array::new(shape, out)
}

pub fn dense_backward(
    input: &Array,
    weights: &Array,
    grad_out: &Array,
    need_input: bool,
) -> (Option<Array>, Array, Array) {
    let d_in = *input.shape().last().unwrap();
    let rows = input.len() / d_in.max(1);
    let d_out = weights.shape()[0];
    let x = input.data();
    let w = weights.data();
    let g = grad_out.data();
    let mut gx = need_input.then(|| vec![0.0; x.len()]);
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; d_out];
    for r in 0..rows {
        let xr = &x[r * d_in..][..d_in];
        for o in 0..d_out {
            let gv = g[r * d_out + o];
            if gv == 0.0 {
                continue;
            }
            gb[o] += gv;
            let wr = &w[o * d_in..][..d_in];
            let gwr = &mut gw[o * d_in..][..d_in];
            for i in 0..d_in {
                gwr[i] += gv * xr[i];
            }
            if let Some(gx) = gx.as_mut() {
                let gxr = &mut gx[r * d_in..][..d_in];
                for i in 0..d_in {
                    gxr[i] += gv * wr[i];
                }
            }
        }
    }
    (
        gx.map(|v| Array::new(input.shape().to_vec(), v).unwrap()),
        Array::new(weights.shape().to_vec(), gw).unwrap(),
        Array::vector(gb),
    )
}

pub fn relu(input: &Array) -> Array {
    input.map(|x| x.max(0.0))
}

pub fn sigmoid(input: &Array) -> Array {
    input.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax over the last axis, with max subtraction.
pub fn softmax(input: &Array) -> Result<Array> {
    let c = *input.shape().last().unwrap_or(&0);
    if c == 0 || input.ndim() == 0 || input.ndim() > 2 {
        return Err(Error::shape(
            "softmax",
            format!(
                "expected 1-D or 2-D input with C >= 1, got {:?}",
                input.shape()
            ),
        ));
    }
    let mut out = Vec::with_capacity(input.len());
    for row in input.data().chunks(c) {
        softmax_row(row, &mut out);
    }
    Array::new(input.shape().to_vec(), out)
}

fn softmax_row(row: &[f64], out: &mut Vec<f64>) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut z = 0.0;
    for &v in row {
        let e = (v - m).exp();
        z += e;
        out.push(e);
    }
    for v in &mut out[start..] {
        *v /= z;
    }
}

/// Gradient of a row-wise softmax given its output `p`.
pub fn softmax_backward(p: &Array, grad_out: &Array) -> Array {
    let c = *p.shape().last().unwrap();
    let mut gx = Vec::with_capacity(p.len());
    for (pr, gr) in p.data().chunks(c).zip(grad_out.data().chunks(c)) {
        let s: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        gx.extend(pr.iter().zip(gr).map(|(pi, gi)| pi * (gi - s)));
    }
    Array::new(p.shape().to_vec(), gx).unwrap()
}

fn mask_count(op: &'static str, mask: &[bool], t_len: usize) -> Result<usize> {
    if mask.len() != t_len {
        return Err(Error::shape(
            op,
            format!("mask length {} but sequence length {t_len}", mask.len()),
        ));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::invalid(format!("{op}: mask selects no timesteps")));
    }
    Ok(n)
}

/// Per-channel mean over the timesteps whose mask entry is true.
pub fn gap_time(input: &Array, mask: &[bool]) -> Result<Array> {
    let (t_len, c) = expect2("gap_time", input)?;
    let n = mask_count("gap_time", mask, t_len)? as f64;
    let mut out = vec![0.0; c];
    for (row, _) in input.rows().zip(mask).filter(|(_, &m)| m) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= n;
    }
    Ok(Array::vector(out))
}

pub fn gap_time_backward(shape: &[usize], mask: &[bool], grad_out: &Array) -> Array {
    let c = shape[1];
    let n = mask.iter().filter(|&&m| m).count() as f64;
    let mut gx = Array::zeros(shape);
    let g = grad_out.data();
    for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for (dst, gv) in gx.data_mut()[t * c..][..c].iter_mut().zip(g) {
            *dst = gv / n;
        }
    }
    gx
}

/// Zeroes rows whose mask entry is false.
pub fn mask_rows(input: &Array, mask: &[bool]) -> Result<Array> {
    let (t_len, c) = expect2("mask_rows", input)?;
    if mask.len() != t_len {
        return Err(Error::shape(
            "mask_rows",
            format!("mask length {} but {t_len} rows", mask.len()),
        ));
    }
    let mut out = input.clone();
    for (t, _) in mask.iter().enumerate().filter(|(_, &m)| !m) {
        out.data_mut()[t * c..][..c].fill(0.0);
    }
    Ok(out)
}

/// Mean over non-overlapping contiguous channel windows: `T x D -> T x target`.
pub fn avg_pool_channels(input: &Array, target: usize) -> Result<Array> {
    let (t_len, d) = expect2("avg_pool_channels", input)?;
    if target == 0 || d % target != 0 {
        return Err(Error::invalid(format!(
            "avg_pool_channels: width {d} is not divisible by {target}"
        )));
    }
    let win = d / target;
    let mut out = Vec::with_capacity(t_len * target);
    for row in input.rows() {
        out.extend(row.chunks(win).map(|w| w.iter().sum::<f64>() / win as f64));
    }
    Array::new(vec![t_len, target], out)
}

pub fn avg_pool_channels_backward(shape: &[usize], target: usize, grad_out: &Array) -> Array {
    let win = shape[1] / target;
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / win as f64, win))
        .collect();
    Array::new(shape.to_vec(), data).unwrap()
}

fn check_labels(op: &'static str, rows: usize, classes: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(
            op,
            format!("{} labels for {rows} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!(
            "{op}: label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean over the batch of `-ln p[true]`, with `p` clamped below at
/// [`PROB_FLOOR`].
pub fn cross_entropy(probs: &Array, labels: &[usize]) -> Result<f64> {
    let (b, c) = expect2("cross_entropy", probs)?;
    check_labels("cross_entropy", b, c, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| -probs.data()[r * c + l].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / b as f64)
}

pub fn cross_entropy_backward(probs: &Array, labels: &[usize], grad_out: f64) -> Array {
    let (b, c) = probs.dims2().unwrap();
    let mut g = Array::zeros(probs.shape());
    for (r, &l) in labels.iter().enumerate() {
        let p = probs.data()[r * c + l];
        if p > PROB_FLOOR {
            g.data_mut()[r * c + l] = -grad_out / (b as f64 * p);
        }
    }
    g
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: &Array) -> Result<Array> {
    let c = *logits.shape().last().unwrap_or(&0);
    if c == 0 {
        return Err(Error::shape("log_softmax", "no classes"));
    }
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    Array::new(logits.shape().to_vec(), out)
}

/// Mean softmax cross-entropy computed from logits.
pub fn softmax_cross_entropy(logits: &Array, labels: &[usize]) -> Result<f64> {
    let (b, c) = expect2("softmax_cross_entropy", logits)?;
    check_labels("softmax_cross_entropy", b, c, labels)?;
    let ls = log_softmax(logits)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| -ls.data()[r * c + l])
        .sum();
    Ok(total / b as f64)
}

pub fn softmax_cross_entropy_backward(logits: &Array, labels: &[usize], grad_out: f64) -> Array {
    let (b, c) = logits.dims2().unwrap();
    let mut p = softmax(logits).unwrap();
    let scale = grad_out / b as f64;
    for (r, &l) in labels.iter().enumerate() {
        p.data_mut()[r * c + l] -= 1.0;
    }
    for v in p.data_mut() {
        *v *= scale;
    }
    p
}

/// `out[b, c] = -‖q_b − p_c‖²`.
pub fn neg_sq_dist(queries: &Array, protos: &Array) -> Result<Array> {
    let (b, d) = expect2("neg_sq_dist", queries)?;
    let (c, d2) = expect2("neg_sq_dist", protos)?;
    if d != d2 {
        return Err(Error::shape(
            "neg_sq_dist",
            format!("query dim {d} but prototype dim {d2}"),
        ));
    }
    let mut out = Vec::with_capacity(b * c);
    for q in queries.rows() {
        for p in protos.rows() {
            out.push(-q.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
        }
    }
    Array::new(vec![b, c], out)
}

pub fn neg_sq_dist_backward(queries: &Array, protos: &Array, grad_out: &Array) -> (Array, Array) {
    let (b, d) = queries.dims2().unwrap();
    let c = protos.shape()[0];
    let mut gq = Array::zeros(queries.shape());
    let mut gp = Array::zeros(protos.shape());
    let (q, p, g) = (queries.data(), protos.data(), grad_out.data());
    for i in 0..b {
        for j in 0..c {
            let gv = g[i * c + j];
            if gv == 0.0 {
                continue;
            }
            for k in 0..d {
                let diff = q[i * d + k] - p[j * d + k];
                gq.data_mut()[i * d + k] -= 2.0 * gv * diff;
                gp.data_mut()[j * d + k] += 2.0 * gv * diff;
            }
        }
    }
    (gq, gp)
}

/// Mean row per class: `B x D -> C x D`.
pub fn class_means(input: &Array, labels: &[usize], classes: usize) -> Result<Array> {
    let (b, d) = expect2("class_means", input)?;
    check_labels("class_means", b, classes, labels)?;
    let counts = class_counts(labels, classes);
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!(
            "class_means: class {c} has no rows"
        )));
    }
    let mut out = vec![0.0; classes * d];
    for (row, &l) in input.rows().zip(labels) {
        for (o, v) in out[l * d..][..d].iter_mut().zip(row) {
            *o += v;
        }
    }
    for (l, n) in counts.iter().enumerate() {
        for o in &mut out[l * d..][..d] {
            *o /= *n as f64;
        }
    }
    Array::new(vec![classes, d], out)
}

pub(crate) fn class_counts(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

pub fn class_means_backward(
    shape: &[usize],
    labels: &[usize],
    classes: usize,
    grad_out: &Array,
) -> Array {
    let d = shape[1];
    let counts = class_counts(labels, classes);
    let mut gx = Array::zeros(shape);
    for (r, &l) in labels.iter().enumerate() {
        let n = counts[l] as f64;
        for k in 0..d {
            gx.data_mut()[r * d + k] = grad_out.data()[l * d + k] / n;
        }
    }
    gx
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
