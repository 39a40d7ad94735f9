//! Layer primitives: forward and backward passes for everything the model
//! is assembled from.
//!
//! Kernels are generic over [`Scalar`] so the gradient checker can run the
//! identical code at f64. All sequence kernels are strictly causal: output
//! frame `t` never reads input frames after `t`.

pub mod gradcheck;

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul, matmul_a_bt, matmul_at_b, Scalar, TensorOf};

pub const LAYER_NORM_EPS: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// `y = x . w + b` with `w: [in x out]`, applied per row.
pub fn linear_fwd<F: Scalar>(x: &TensorOf<F>, w: &TensorOf<F>, b: &TensorOf<F>) -> TensorOf<F> {
    assert_eq!(x.cols(), w.rows(), "linear: input dim mismatch");
    assert_eq!(w.cols(), b.len(), "linear: bias dim mismatch");
    let mut y = matmul(x, w);
    for r in 0..y.rows() {
        for (v, &bv) in y.row_mut(r).iter_mut().zip(b.data()) {
            *v = *v + bv;
        }
    }
    y
}

/// Returns `(grad_x, grad_w, grad_b)`; `grad_w = x^T . g`.
pub fn linear_bwd<F: Scalar>(
    x: &TensorOf<F>,
    w: &TensorOf<F>,
    g: &TensorOf<F>,
) -> (TensorOf<F>, TensorOf<F>, TensorOf<F>) {
    let gx = matmul_a_bt(g, w);
    let gw = matmul_at_b(x, g);
    let mut gb = TensorOf::zeros(&[w.cols()]);
    for r in 0..g.rows() {
        for (acc, &gv) in gb.data_mut().iter_mut().zip(g.row(r)) {
            *acc = *acc + gv;
        }
    }
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// Layer norm (per row, over the last dimension)
// ---------------------------------------------------------------------------

pub fn layer_norm_fwd<F: Scalar>(
    x: &TensorOf<F>,
    gamma: &TensorOf<F>,
    beta: &TensorOf<F>,
) -> TensorOf<F> {
    assert_eq!(x.cols(), gamma.len(), "layer_norm: scale dim mismatch");
    let eps = F::from_f64(LAYER_NORM_EPS);
    let n = F::from_f64(x.cols() as f64);
    let mut y = TensorOf::zeros(x.shape());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mut mean = F::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean / n;
        let mut var = F::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / n;
        let rstd = F::one() / (var + eps).sqrt();
        let out = y.row_mut(r);
        for (j, &v) in row.iter().enumerate() {
            out[j] = (v - mean) * rstd * gamma.data()[j] + beta.data()[j];
        }
    }
    y
}

/// Returns `(grad_x, grad_gamma, grad_beta)`. Statistics are recomputed from
/// `x` rather than cached.
pub fn layer_norm_bwd<F: Scalar>(
    x: &TensorOf<F>,
    gamma: &TensorOf<F>,
    g: &TensorOf<F>,
) -> (TensorOf<F>, TensorOf<F>, TensorOf<F>) {
    let eps = F::from_f64(LAYER_NORM_EPS);
    let cols = x.cols();
    let n = F::from_f64(cols as f64);
    let mut gx = TensorOf::zeros(x.shape());
    let mut ggamma = TensorOf::zeros(&[cols]);
    let mut gbeta = TensorOf::zeros(&[cols]);
    for r in 0..x.rows() {
        let row = x.row(r);
        let grow = g.row(r);
        let mut mean = F::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean / n;
        let mut var = F::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / n;
        let rstd = F::one() / (var + eps).sqrt();

        // xhat_j = (x_j - mean) * rstd; dy_j = g_j * gamma_j
        let mut sum_dy = F::zero();
        let mut sum_dy_xhat = F::zero();
        for j in 0..cols {
            let xhat = (row[j] - mean) * rstd;
            let dy = grow[j] * gamma.data()[j];
            sum_dy = sum_dy + dy;
            sum_dy_xhat = sum_dy_xhat + dy * xhat;
            ggamma.data_mut()[j] = ggamma.data_mut()[j] + grow[j] * xhat;
            gbeta.data_mut()[j] = gbeta.data_mut()[j] + grow[j];
        }
        let out = gx.row_mut(r);
        for j in 0..cols {
            let xhat = (row[j] - mean) * rstd;
            let dy = grow[j] * gamma.data()[j];
            out[j] = (dy - sum_dy / n - xhat * sum_dy_xhat / n) * rstd;
        }
    }
    (gx, ggamma, gbeta)
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

fn sigmoid<F: Scalar>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

pub fn swish_fwd<F: Scalar>(x: &TensorOf<F>) -> TensorOf<F> {
    x.map(|v| v * sigmoid(v))
}

pub fn swish_bwd<F: Scalar>(x: &TensorOf<F>, g: &TensorOf<F>) -> TensorOf<F> {
    assert_eq!(x.shape(), g.shape());
    let mut gx = TensorOf::zeros(x.shape());
    for ((o, &xv), &gv) in gx.data_mut().iter_mut().zip(x.data()).zip(g.data()) {
        let s = sigmoid(xv);
        *o = gv * (s + xv * s * (F::one() - s));
    }
    gx
}

pub fn relu_fwd<F: Scalar>(x: &TensorOf<F>) -> TensorOf<F> {
    x.map(|v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu_bwd<F: Scalar>(x: &TensorOf<F>, g: &TensorOf<F>) -> TensorOf<F> {
    assert_eq!(x.shape(), g.shape());
    let mut gx = TensorOf::zeros(x.shape());
    for ((o, &xv), &gv) in gx.data_mut().iter_mut().zip(x.data()).zip(g.data()) {
        *o = if xv > F::zero() { gv } else { F::zero() };
    }
    gx
}

/// Gated linear unit over the last dimension: the first half gates through
/// the sigmoid of the second half.
pub fn glu_fwd<F: Scalar>(x: &TensorOf<F>) -> TensorOf<F> {
    let cols = x.cols();
    assert!(cols % 2 == 0, "glu needs an even column count");
    let half = cols / 2;
    let mut y = TensorOf::zeros(&[x.rows(), half]);
    for r in 0..x.rows() {
        let row = x.row(r);
        let out = y.row_mut(r);
        for j in 0..half {
            out[j] = row[j] * sigmoid(row[half + j]);
        }
    }
    y
}

pub fn glu_bwd<F: Scalar>(x: &TensorOf<F>, g: &TensorOf<F>) -> TensorOf<F> {
    let half = x.cols() / 2;
    assert_eq!(g.cols(), half);
    let mut gx = TensorOf::zeros(x.shape());
    for r in 0..x.rows() {
        let row = x.row(r);
        let grow = g.row(r);
        let out = gx.row_mut(r);
        for j in 0..half {
            let s = sigmoid(row[half + j]);
            out[j] = grow[j] * s;
            out[half + j] = grow[j] * row[j] * s * (F::one() - s);
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Softmax (per row)
// ---------------------------------------------------------------------------

pub fn softmax_rows_fwd<F: Scalar>(x: &TensorOf<F>) -> TensorOf<F> {
    let mut y = TensorOf::zeros(x.shape());
    for r in 0..x.rows() {
        softmax_slice(x.row(r), y.row_mut(r));
    }
    y
}

/// Stable softmax of `row` into `out`.
pub fn softmax_slice<F: Scalar>(row: &[F], out: &mut [F]) {
    let mut max = F::neg_infinity();
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// Backward through row softmax given the forward output `y`.
pub fn softmax_rows_bwd<F: Scalar>(y: &TensorOf<F>, g: &TensorOf<F>) -> TensorOf<F> {
    assert_eq!(y.shape(), g.shape());
    let mut gx = TensorOf::zeros(y.shape());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let gr = g.row(r);
        let mut s = F::zero();
        for (yv, gv) in yr.iter().zip(gr) {
            s = s + *yv * *gv;
        }
        let out = gx.row_mut(r);
        for j in 0..yr.len() {
            out[j] = yr[j] * (gr[j] - s);
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Causal depthwise convolution
// ---------------------------------------------------------------------------

/// Rolling tail of the last `K-1` input frames feeding a causal depthwise
/// conv. Holds zero rows before warm-up so early frames see zero padding.
#[derive(Clone, Debug)]
pub struct ConvState {
    tail: TensorOf<f32>,
}

impl ConvState {
    pub fn new(kernel_width: usize, channels: usize) -> Self {
        Self {
            tail: TensorOf::zeros(&[kernel_width - 1, channels]),
        }
    }

    pub fn tail(&self) -> &TensorOf<f32> {
        &self.tail
    }

    pub(crate) fn roll_in(&mut self, x: &TensorOf<f32>) {
        let keep = self.tail.rows();
        let merged = TensorOf::vcat(&[&self.tail.clone(), x]);
        let total = merged.rows();
        for i in 0..keep {
            let src = merged.row(total - keep + i).to_vec();
            self.tail.row_mut(i).copy_from_slice(&src);
        }
    }
}

/// Causal depthwise conv: `y[t][c] = b[c] + sum_k w[k][c] * pad(x)[t-K+1+k][c]`
/// where `pad(x)` prefixes `prepad` (zeros offline, the stream tail online).
pub fn causal_dw_conv_fwd<F: Scalar>(
    x: &TensorOf<F>,
    w: &TensorOf<F>,
    b: &TensorOf<F>,
    prepad: Option<&TensorOf<F>>,
) -> TensorOf<F> {
    let k = w.rows();
    let c = x.cols();
    assert_eq!(w.cols(), c, "conv kernel channel mismatch");
    let zeros;
    let pad = match prepad {
        Some(p) => {
            assert_eq!(p.rows(), k - 1, "conv prepad must hold K-1 rows");
            p
        }
        None => {
            zeros = TensorOf::zeros(&[k - 1, c]);
            &zeros
        }
    };
    let t_len = x.rows();
    let mut y = TensorOf::zeros(&[t_len, c]);
    for t in 0..t_len {
        let out = y.row_mut(t);
        for kk in 0..k {
            // source frame index in the padded stream: t + kk (pad occupies 0..K-1)
            let src = t + kk;
            let row = if src < k - 1 {
                pad.row(src)
            } else {
                x.row(src - (k - 1))
            };
            let wrow = w.row(kk);
            for j in 0..c {
                out[j] = out[j] + wrow[j] * row[j];
            }
        }
        for (j, o) in out.iter_mut().enumerate() {
            *o = *o + b.data()[j];
        }
    }
    y
}

/// Backward for the zero-padded (offline) causal depthwise conv.
pub fn causal_dw_conv_bwd<F: Scalar>(
    x: &TensorOf<F>,
    w: &TensorOf<F>,
    g: &TensorOf<F>,
) -> (TensorOf<F>, TensorOf<F>, TensorOf<F>) {
    let k = w.rows();
    let c = x.cols();
    let t_len = x.rows();
    let mut gx = TensorOf::zeros(x.shape());
    let mut gw = TensorOf::zeros(w.shape());
    let mut gb = TensorOf::zeros(&[c]);
    for t in 0..t_len {
        let grow = g.row(t);
        for (j, &gv) in grow.iter().enumerate() {
            gb.data_mut()[j] = gb.data_mut()[j] + gv;
        }
        for kk in 0..k {
            let src = t + kk;
            if src < k - 1 {
                continue; // zero padding region
            }
            let xi = src - (k - 1);
            let xrow = x.row(xi);
            for j in 0..c {
                gw.set(kk, j, gw.at(kk, j) + grow[j] * xrow[j]);
            }
            let wrow = w.row(kk);
            let gxrow = gx.row_mut(xi);
            for j in 0..c {
                gxrow[j] = gxrow[j] + grow[j] * wrow[j];
            }
        }
    }
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// Masked self-attention with limited left context
// ---------------------------------------------------------------------------

/// Attention projections. The key projection carries no bias: softmax is
/// invariant to a constant shift of a query's logits, so a key bias is a
/// dead parameter.
pub struct AttnParams<'a, F> {
    pub wq: &'a TensorOf<F>,
    pub bq: &'a TensorOf<F>,
    pub wk: &'a TensorOf<F>,
    pub wv: &'a TensorOf<F>,
    pub bv: &'a TensorOf<F>,
    pub wo: &'a TensorOf<F>,
    pub bo: &'a TensorOf<F>,
}

/// Forward intermediates kept for the backward pass.
pub struct AttnTape<F> {
    q: TensorOf<F>,
    k: TensorOf<F>,
    v: TensorOf<F>,
    ctx: TensorOf<F>,
    /// Attention probabilities per query row, over its visible window.
    probs: Vec<Vec<F>>,
    win_starts: Vec<usize>,
    heads: usize,
}

pub struct AttnGrads<F> {
    pub wq: TensorOf<F>,
    pub bq: TensorOf<F>,
    pub wk: TensorOf<F>,
    pub wv: TensorOf<F>,
    pub bv: TensorOf<F>,
    pub wo: TensorOf<F>,
    pub bo: TensorOf<F>,
}

fn attn_core<F: Scalar>(
    q: &TensorOf<F>,
    k: &TensorOf<F>,
    v: &TensorOf<F>,
    q_global_of: impl Fn(usize) -> usize + Sync,
    kv_global_start: usize,
    left: usize,
    heads: usize,
    mut record: Option<&mut (Vec<Vec<F>>, Vec<usize>)>,
) -> TensorOf<F> {
    let d = q.cols();
    let dh = d / heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let tq = q.rows();
    let mut ctx = TensorOf::zeros(&[tq, d]);

    let rows: Vec<(Vec<F>, Vec<F>, usize)> = crate::parallel::map_range(tq, |i| {
        let g = q_global_of(i);
        let lo_global = g.saturating_sub(left);
        let lo = lo_global - kv_global_start;
        let hi = g - kv_global_start; // inclusive
        let win = hi - lo + 1;
        let mut out = vec![F::zero(); d];
        let mut probs_row = vec![F::zero(); win * heads];
        for h in 0..heads {
            let qh = &q.row(i)[h * dh..(h + 1) * dh];
            let mut logits = vec![F::zero(); win];
            for (jj, logit) in logits.iter_mut().enumerate() {
                let kh = &k.row(lo + jj)[h * dh..(h + 1) * dh];
                *logit = dot(qh, kh) * scale;
            }
            let probs = &mut probs_row[h * win..(h + 1) * win];
            softmax_slice(&logits, probs);
            let outh = &mut out[h * dh..(h + 1) * dh];
            for (jj, &p) in probs.iter().enumerate() {
                let vh = &v.row(lo + jj)[h * dh..(h + 1) * dh];
                for (o, &vv) in outh.iter_mut().zip(vh) {
                    *o = *o + p * vv;
                }
            }
        }
        (out, probs_row, lo)
    });

    for (i, (out, probs_row, lo)) in rows.into_iter().enumerate() {
        ctx.row_mut(i).copy_from_slice(&out);
        if let Some(rec) = record.as_deref_mut() {
            rec.0.push(probs_row);
            rec.1.push(lo);
        }
    }
    ctx
}

/// Whole-sequence masked self-attention. Frame `t` attends to frames
/// `max(0, t-left) ..= t` only.
pub fn masked_attention_fwd<F: Scalar>(
    u: &TensorOf<F>,
    left: usize,
    heads: usize,
    p: &AttnParams<F>,
) -> (TensorOf<F>, AttnTape<F>) {
    let q = linear_fwd(u, p.wq, p.bq);
    let k = matmul(u, p.wk);
    let v = linear_fwd(u, p.wv, p.bv);
    let mut rec = (Vec::new(), Vec::new());
    let ctx = attn_core(&q, &k, &v, |i| i, 0, left, heads, Some(&mut rec));
    let y = linear_fwd(&ctx, p.wo, p.bo);
    (
        y,
        AttnTape {
            q,
            k,
            v,
            ctx,
            probs: rec.0,
            win_starts: rec.1,
            heads,
        },
    )
}

/// Incremental attention: queries are the rows of `q_src` (the trailing rows
/// of `kv_src`), with `kv_src` row 0 at global frame `kv_global_start`.
pub fn masked_attention_fwd_inc<F: Scalar>(
    q_src: &TensorOf<F>,
    kv_src: &TensorOf<F>,
    kv_global_start: usize,
    left: usize,
    heads: usize,
    p: &AttnParams<F>,
) -> TensorOf<F> {
    let q = linear_fwd(q_src, p.wq, p.bq);
    let k = matmul(kv_src, p.wk);
    let v = linear_fwd(kv_src, p.wv, p.bv);
    let first_q_global = kv_global_start + kv_src.rows() - q_src.rows();
    let ctx = attn_core(
        &q,
        &k,
        &v,
        |i| first_q_global + i,
        kv_global_start,
        left,
        heads,
        None,
    );
    linear_fwd(&ctx, p.wo, p.bo)
}

pub fn masked_attention_bwd<F: Scalar>(
    u: &TensorOf<F>,
    tape: &AttnTape<F>,
    p: &AttnParams<F>,
    gy: &TensorOf<F>,
) -> (TensorOf<F>, AttnGrads<F>) {
    let d = u.cols();
    let heads = tape.heads;
    let dh = d / heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let t_len = u.rows();

    // Output projection.
    let (gctx, gwo, gbo) = linear_bwd(&tape.ctx, p.wo, gy);

    let mut gq = TensorOf::zeros(&[t_len, d]);
    let mut gk = TensorOf::zeros(&[t_len, d]);
    let mut gv = TensorOf::zeros(&[t_len, d]);
    for t in 0..t_len {
        let lo = tape.win_starts[t];
        let probs_row = &tape.probs[t];
        let win = probs_row.len() / heads;
        for h in 0..heads {
            let probs = &probs_row[h * win..(h + 1) * win];
            let gctx_h = &gctx.row(t)[h * dh..(h + 1) * dh];
            // ga_j = gctx . v_j ; softmax backward
            let mut ga = vec![F::zero(); win];
            let mut inner = F::zero();
            for jj in 0..win {
                let vh = &tape.v.row(lo + jj)[h * dh..(h + 1) * dh];
                ga[jj] = dot(gctx_h, vh);
                inner = inner + probs[jj] * ga[jj];
            }
            let qh: Vec<F> = tape.q.row(t)[h * dh..(h + 1) * dh].to_vec();
            for jj in 0..win {
                let gs = probs[jj] * (ga[jj] - inner) * scale;
                let kh: Vec<F> = tape.k.row(lo + jj)[h * dh..(h + 1) * dh].to_vec();
                let gq_h = &mut gq.row_mut(t)[h * dh..(h + 1) * dh];
                for (o, &kv) in gq_h.iter_mut().zip(&kh) {
                    *o = *o + gs * kv;
                }
                let gk_h = &mut gk.row_mut(lo + jj)[h * dh..(h + 1) * dh];
                for (o, &qv) in gk_h.iter_mut().zip(&qh) {
                    *o = *o + gs * qv;
                }
                let gv_h = &mut gv.row_mut(lo + jj)[h * dh..(h + 1) * dh];
                for (o, &gc) in gv_h.iter_mut().zip(gctx_h) {
                    *o = *o + probs[jj] * gc;
                }
            }
        }
    }

    let (gu_q, gwq, gbq) = linear_bwd(u, p.wq, &gq);
    let gwk = matmul_at_b(u, &gk);
    let gu_k = matmul_a_bt(&gk, p.wk);
    let (gu_v, gwv, gbv) = linear_bwd(u, p.wv, &gv);
    let mut gu = gu_q;
    gu.add_assign(&gu_k);
    gu.add_assign(&gu_v);
    (
        gu,
        AttnGrads {
            wq: gwq,
            bq: gbq,
            wk: gwk,
            wv: gwv,
            bv: gbv,
            wo: gwo,
            bo: gbo,
        },
    )
}

// ---------------------------------------------------------------------------
// Spec-facing primitive dispatcher (used by the gradient-check sweep and CLI)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Linear,
    LayerNorm,
    Swish,
    Relu,
    Softmax,
    CausalDepthwiseConv,
    PointwiseConv,
    Glu,
}

impl Primitive {
    pub const ALL: [Primitive; 8] = [
        Primitive::Linear,
        Primitive::LayerNorm,
        Primitive::Swish,
        Primitive::Relu,
        Primitive::Softmax,
        Primitive::CausalDepthwiseConv,
        Primitive::PointwiseConv,
        Primitive::Glu,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Linear => "linear",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Swish => "swish",
            Primitive::Relu => "relu",
            Primitive::Softmax => "softmax",
            Primitive::CausalDepthwiseConv => "causal_depthwise_conv",
            Primitive::PointwiseConv => "pointwise_conv",
            Primitive::Glu => "glu",
        }
    }

    /// Parameter tensors this primitive expects, as `(suffix, shape)` given
    /// an input of `cols` columns.
    pub fn param_shapes(&self, cols: usize) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            Primitive::Linear | Primitive::PointwiseConv => vec![
                ("w", vec![cols, cols + 1]),
                ("b", vec![cols + 1]),
            ],
            Primitive::LayerNorm => vec![("gamma", vec![cols]), ("beta", vec![cols])],
            Primitive::CausalDepthwiseConv => {
                vec![("w", vec![5, cols]), ("b", vec![cols])]
            }
            _ => vec![],
        }
    }

    /// Forward with an explicit parameter list as produced by
    /// [`Primitive::param_shapes`]. `Glu` halves the column count.
    pub fn forward<F: Scalar>(&self, x: &TensorOf<F>, params: &[TensorOf<F>]) -> Result<TensorOf<F>> {
        self.check_params(x, params)?;
        Ok(match self {
            Primitive::Linear | Primitive::PointwiseConv => linear_fwd(x, &params[0], &params[1]),
            Primitive::LayerNorm => layer_norm_fwd(x, &params[0], &params[1]),
            Primitive::Swish => swish_fwd(x),
            Primitive::Relu => relu_fwd(x),
            Primitive::Softmax => softmax_rows_fwd(x),
            Primitive::CausalDepthwiseConv => causal_dw_conv_fwd(x, &params[0], &params[1], None),
            Primitive::Glu => glu_fwd(x),
        })
    }

    /// Backward returning `(grad_x, grad_params)`.
    pub fn backward<F: Scalar>(
        &self,
        x: &TensorOf<F>,
        params: &[TensorOf<F>],
        g: &TensorOf<F>,
    ) -> Result<(TensorOf<F>, Vec<TensorOf<F>>)> {
        self.check_params(x, params)?;
        Ok(match self {
            Primitive::Linear | Primitive::PointwiseConv => {
                let (gx, gw, gb) = linear_bwd(x, &params[0], g);
                (gx, vec![gw, gb])
            }
            Primitive::LayerNorm => {
                let (gx, gg, gb) = layer_norm_bwd(x, &params[0], g);
                (gx, vec![gg, gb])
            }
            Primitive::Swish => (swish_bwd(x, g), vec![]),
            Primitive::Relu => (relu_bwd(x, g), vec![]),
            Primitive::Softmax => {
                let y = softmax_rows_fwd(x);
                (softmax_rows_bwd(&y, g), vec![])
            }
            Primitive::CausalDepthwiseConv => {
                let (gx, gw, gb) = causal_dw_conv_bwd(x, &params[0], g);
                (gx, vec![gw, gb])
            }
            Primitive::Glu => (glu_bwd(x, g), vec![]),
        })
    }

    fn check_params<F: Scalar>(&self, x: &TensorOf<F>, params: &[TensorOf<F>]) -> Result<()> {
        let want = self.param_shapes(x.cols());
        if params.len() != want.len() {
            return Err(Error::Contract(format!(
                "{}: expected {} parameter tensors, got {}",
                self.name(),
                want.len(),
                params.len()
            )));
        }
        for (i, (name, shape)) in want.iter().enumerate() {
            if params[i].shape() != shape.as_slice() {
                return Err(Error::Contract(format!(
                    "{}: parameter {} has shape {:?}, expected {:?}",
                    self.name(),
                    name,
                    params[i].shape(),
                    shape
                )));
            }
        }
        Ok(())
    }
}
