//! Forward and gradient kernels on flat row-major buffers.
//!
//! Gradient kernels accumulate into `out` and take an optional per-row
//! filter over axis 0 of the tensor being written; filtered rows are not
//! touched. Each returns the FLOPs it executed (one multiply-accumulate
//! counts as 2).

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (cj, bj) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cj += av * bj;
            }
        }
    }
    c
}

/// `dA[i,p] += Σ_j dC[i,j] · B[p,j]`
pub(crate) fn matmul_grad_a(
    dc: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    rows: Option<&[bool]>,
    out: &mut [f64],
) -> u64 {
    let mut flops = 0;
    for i in 0..m {
        if !on(rows, i) {
            continue;
        }
        let dci = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let bp = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(dci, bp);
        }
        flops += 2 * (k * n) as u64;
    }
    flops
}

/// `dB[p,j] += Σ_i A[i,p] · dC[i,j]`
pub(crate) fn matmul_grad_b(
    a: &[f64],
    dc: &[f64],
    m: usize,
    k: usize,
    n: usize,
    rows: Option<&[bool]>,
    out: &mut [f64],
) -> u64 {
    let mut flops = 0;
    for p in 0..k {
        if !on(rows, p) {
            continue;
        }
        let row = &mut out[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[i * k + p];
            for (o, d) in row.iter_mut().zip(&dc[i * n..(i + 1) * n]) {
                *o += av * d;
            }
        }
        flops += 2 * (m * n) as u64;
    }
    flops
}

pub(crate) fn linear(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    batch: usize,
    inputs: usize,
    outputs: usize,
) -> Vec<f64> {
    let mut y = Vec::with_capacity(batch * outputs);
    for s in 0..batch {
        let xs = &x[s * inputs..(s + 1) * inputs];
        for o in 0..outputs {
            y.push(dot(xs, &w[o * inputs..(o + 1) * inputs]) + b[o]);
        }
    }
    y
}

/// `dW[o,i] += Σ_s dY[s,o] · X[s,i]` for the rows `o` that are on.
pub(crate) fn linear_grad_w(
    dy: &[f64],
    x: &[f64],
    batch: usize,
    inputs: usize,
    outputs: usize,
    rows: Option<&[bool]>,
    out: &mut [f64],
) -> u64 {
    let mut flops = 0;
    for o in 0..outputs {
        if !on(rows, o) {
            continue;
        }
        let row = &mut out[o * inputs..(o + 1) * inputs];
        for s in 0..batch {
            let g = dy[s * outputs + o];
            for (r, xv) in row.iter_mut().zip(&x[s * inputs..(s + 1) * inputs]) {
                *r += g * xv;
            }
        }
        flops += 2 * (batch * inputs) as u64;
    }
    flops
}

/// `dX[s,i] += Σ_o dY[s,o] · W[o,i]`
pub(crate) fn linear_grad_x(
    dy: &[f64],
    w: &[f64],
    batch: usize,
    inputs: usize,
    outputs: usize,
    rows: Option<&[bool]>,
    out: &mut [f64],
) -> u64 {
    let mut flops = 0;
    for s in 0..batch {
        if !on(rows, s) {
            continue;
        }
        let row = &mut out[s * inputs..(s + 1) * inputs];
        for o in 0..outputs {
            let g = dy[s * outputs + o];
            for (r, wv) in row.iter_mut().zip(&w[o * inputs..(o + 1) * inputs]) {
                *r += g * wv;
            }
        }
        flops += 2 * (inputs * outputs) as u64;
    }
    flops
}

/// Bias gradient for a `[n, c, plane]` upstream: `db[c] += Σ_{s,q} dY[s,c,q]`.
pub(crate) fn bias_grad(
    dy: &[f64],
    n: usize,
    c: usize,
    plane: usize,
    rows: Option<&[bool]>,
    out: &mut [f64],
) -> u64 {
    let mut flops = 0;
    for ch in 0..c {
        if !on(rows, ch) {
            continue;
        }
        let mut acc = 0.0;
        for s in 0..n {
            let base = (s * c + ch) * plane;
            acc += dy[base..base + plane].iter().sum::<f64>();
        }
        out[ch] += acc;
        flops += (n * plane) as u64;
    }
    flops
}

pub(crate) fn channel_bias(x: &[f64], b: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut y = x.to_vec();
    for s in 0..n {
        for (ch, bv) in b.iter().enumerate().take(c) {
            let base = (s * c + ch) * plane;
            for v in &mut y[base..base + plane] {
                *v += bv;
            }
        }
    }
    y
}

pub(crate) fn accumulate_rows(dy: &[f64], row_len: usize, rows: Option<&[bool]>, out: &mut [f64]) {
    for (r, (o, d)) in out.chunks_mut(row_len).zip(dy.chunks(row_len)).enumerate() {
        if on(rows, r) {
            for (a, b) in o.iter_mut().zip(d) {
                *a += b;
            }
        }
    }
}

pub(crate) fn relu_grad(
    dy: &[f64],
    x: &[f64],
    row_len: usize,
    rows: Option<&[bool]>,
    out: &mut [f64],
) -> u64 {
    let mut flops = 0;
    for (r, ((o, d), xv)) in out
        .chunks_mut(row_len)
        .zip(dy.chunks(row_len))
        .zip(x.chunks(row_len))
        .enumerate()
    {
        if !on(rows, r) {
            continue;
        }
        for ((a, g), v) in o.iter_mut().zip(d).zip(xv) {
            if *v > 0.0 {
                *a += g;
            }
        }
        flops += row_len as u64;
    }
    flops
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height - 2
    }

    pub fn out_w(&self) -> usize {
        self.width - 2
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// FLOPs of the full correlation (forward, or either full gradient).
    pub fn mac_flops(&self) -> u64 {
        2 * (self.batch * self.filters * self.channels * 9 * self.positions()) as u64
    }

    fn x_at(&self, s: usize, c: usize, r: usize, q: usize) -> usize {
        ((s * self.channels + c) * self.height + r) * self.width + q
    }

    fn y_at(&self, s: usize, f: usize, r: usize, q: usize) -> usize {
        ((s * self.filters + f) * self.out_h() + r) * self.out_w() + q
    }

    fn k_at(&self, f: usize, c: usize, a: usize, b: usize) -> usize {
        ((f * self.channels + c) * 3 + a) * 3 + b
    }
}

pub(crate) fn conv2d(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut y = vec![0.0; g.batch * g.filters * g.positions()];
    for s in 0..g.batch {
        for f in 0..g.filters {
            for r in 0..g.out_h() {
                for q in 0..g.out_w() {
                    let mut acc = 0.0;
                    for c in 0..g.channels {
                        for a in 0..3 {
                            for b in 0..3 {
                                acc += x[g.x_at(s, c, r + a, q + b)] * k[g.k_at(f, c, a, b)];
                            }
                        }
                    }
                    y[g.y_at(s, f, r, q)] = acc;
                }
            }
        }
    }
    y
}

/// Kernel gradient, one filter (axis-0 row of the kernel tensor) at a time.
pub(crate) fn conv2d_grad_k(
    dy: &[f64],
    x: &[f64],
    g: &ConvGeom,
    rows: Option<&[bool]>,
    out: &mut [f64],
) -> u64 {
    let mut flops = 0;
    for f in 0..g.filters {
        if !on(rows, f) {
            continue;
        }
        for c in 0..g.channels {
            for a in 0..3 {
                for b in 0..3 {
                    let mut acc = 0.0;
                    for s in 0..g.batch {
                        for r in 0..g.out_h() {
                            for q in 0..g.out_w() {
                                acc += dy[g.y_at(s, f, r, q)] * x[g.x_at(s, c, r + a, q + b)];
                            }
                        }
                    }
                    out[g.k_at(f, c, a, b)] += acc;
                }
            }
        }
        flops += 2 * (g.batch * g.channels * 9 * g.positions()) as u64;
    }
    flops
}

/// Input gradient; `rows` filters samples (axis 0 of the input).
pub(crate) fn conv2d_grad_x(
    dy: &[f64],
    k: &[f64],
    g: &ConvGeom,
    rows: Option<&[bool]>,
    out: &mut [f64],
) -> u64 {
    let mut flops = 0;
    for s in 0..g.batch {
        if !on(rows, s) {
            continue;
        }
        for f in 0..g.filters {
            for r in 0..g.out_h() {
                for q in 0..g.out_w() {
                    let d = dy[g.y_at(s, f, r, q)];
                    for c in 0..g.channels {
                        for a in 0..3 {
                            for b in 0..3 {
                                out[g.x_at(s, c, r + a, q + b)] += d * k[g.k_at(f, c, a, b)];
                            }
                        }
                    }
                }
            }
        }
        flops += 2 * (g.filters * g.channels * 9 * g.positions()) as u64;
    }
    flops
}

/// Returns the mean loss and the row-wise softmax probabilities.
pub(crate) fn softmax_cross_entropy(
    logits: &[f64],
    labels: &[usize],
    n: usize,
    k: usize,
) -> (f64, Vec<f64>) {
    let mut probs = Vec::with_capacity(n * k);
    let mut total = 0.0;
    for (s, &label) in labels.iter().enumerate().take(n) {
        let row = &logits[s * k..(s + 1) * k];
        let (arg, max) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(ai, am), (i, v)| if v > am { (i, v) } else { (ai, am) });
        // the argmax term is exactly 1; ln_1p keeps tiny tails accurate
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != arg)
            .map(|(_, v)| (v - max).exp())
            .sum();
        let z = 1.0 + rest;
        let log_z = rest.ln_1p();
        total += log_z - (row[label] - max);
        probs.extend(row.iter().map(|v| (v - max).exp() / z));
    }
    (total / n as f64, probs)
}

pub(crate) fn softmax_cross_entropy_grad(
    probs: &[f64],
    labels: &[usize],
    k: usize,
    upstream: f64,
    rows: Option<&[bool]>,
    out: &mut [f64],
) {
    let n = labels.len();
    let scale = upstream / n as f64;
    for (s, &label) in labels.iter().enumerate() {
        if !on(rows, s) {
            continue;
        }
        for j in 0..k {
            let onehot = if j == label { 1.0 } else { 0.0 };
            out[s * k + j] += (probs[s * k + j] - onehot) * scale;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn on(rows: Option<&[bool]>, r: usize) -> bool {
    rows.is_none_or(|m| m[r])
}
