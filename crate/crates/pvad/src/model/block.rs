//! One conformer block: half-step FFN, masked self-attention, gated causal
//! convolution, second half-step FFN, final norm. All residual paths are
//! strictly causal.

use super::{GradMap, ModelBundle, ModelBundleOf, ModelConfig};
use crate::layers::{
    causal_dw_conv_bwd, causal_dw_conv_fwd, glu_bwd, glu_fwd, layer_norm_bwd, layer_norm_fwd,
    linear_bwd, linear_fwd, masked_attention_bwd, masked_attention_fwd, masked_attention_fwd_inc,
    swish_bwd, swish_fwd, AttnParams, AttnTape, ConvState,
};
use crate::tensor::{Scalar, Tensor, TensorOf};

fn attn_params<'a, F: Scalar>(b: &'a ModelBundleOf<F>, prefix: &str) -> AttnParams<'a, F> {
    AttnParams {
        wq: b.get(&format!("{prefix}.attn.wq.w")),
        bq: b.get(&format!("{prefix}.attn.wq.b")),
        wk: b.get(&format!("{prefix}.attn.wk.w")),
        wv: b.get(&format!("{prefix}.attn.wv.w")),
        bv: b.get(&format!("{prefix}.attn.wv.b")),
        wo: b.get(&format!("{prefix}.attn.wo.w")),
        bo: b.get(&format!("{prefix}.attn.wo.b")),
    }
}

struct FfnTape<F> {
    x: TensorOf<F>,
    u: TensorOf<F>,
    z: TensorOf<F>,
    s: TensorOf<F>,
}

pub(crate) struct BlockTape<F> {
    ffn1: FfnTape<F>,
    x1: TensorOf<F>,
    u_attn: TensorOf<F>,
    attn: AttnTape<F>,
    x2: TensorOf<F>,
    u_conv: TensorOf<F>,
    pw1_out: TensorOf<F>,
    gated: TensorOf<F>,
    conv_out: TensorOf<F>,
    conv_normed: TensorOf<F>,
    ffn2: FfnTape<F>,
    x4: TensorOf<F>,
}

fn half<F: Scalar>() -> F {
    F::from_f64(0.5)
}

pub(crate) fn add_grad<F: Scalar>(grads: &mut GradMap<F>, name: &str, g: TensorOf<F>) {
    match grads.get_mut(name) {
        Some(acc) => acc.add_assign(&g),
        None => {
            grads.insert(name.to_string(), g);
        }
    }
}

fn ffn_fwd<F: Scalar>(
    b: &ModelBundleOf<F>,
    name: &str,
    x: &TensorOf<F>,
) -> (TensorOf<F>, FfnTape<F>) {
    let u = layer_norm_fwd(
        x,
        b.get(&format!("{name}.ln.gamma")),
        b.get(&format!("{name}.ln.beta")),
    );
    let z = linear_fwd(
        &u,
        b.get(&format!("{name}.in.w")),
        b.get(&format!("{name}.in.b")),
    );
    let s = swish_fwd(&z);
    let y = linear_fwd(
        &s,
        b.get(&format!("{name}.out.w")),
        b.get(&format!("{name}.out.b")),
    );
    (
        y,
        FfnTape {
            x: x.clone(),
            u,
            z,
            s,
        },
    )
}

fn ffn_infer<F: Scalar>(b: &ModelBundleOf<F>, name: &str, x: &TensorOf<F>) -> TensorOf<F> {
    let u = layer_norm_fwd(
        x,
        b.get(&format!("{name}.ln.gamma")),
        b.get(&format!("{name}.ln.beta")),
    );
    let z = linear_fwd(
        &u,
        b.get(&format!("{name}.in.w")),
        b.get(&format!("{name}.in.b")),
    );
    let s = swish_fwd(&z);
    linear_fwd(
        &s,
        b.get(&format!("{name}.out.w")),
        b.get(&format!("{name}.out.b")),
    )
}

fn ffn_bwd<F: Scalar>(
    b: &ModelBundleOf<F>,
    name: &str,
    tape: &FfnTape<F>,
    gy: &TensorOf<F>,
    grads: &mut GradMap<F>,
) -> TensorOf<F> {
    let (gs, gw_out, gb_out) = linear_bwd(&tape.s, b.get(&format!("{name}.out.w")), gy);
    add_grad(grads, &format!("{name}.out.w"), gw_out);
    add_grad(grads, &format!("{name}.out.b"), gb_out);
    let gz = swish_bwd(&tape.z, &gs);
    let (gu, gw_in, gb_in) = linear_bwd(&tape.u, b.get(&format!("{name}.in.w")), &gz);
    add_grad(grads, &format!("{name}.in.w"), gw_in);
    add_grad(grads, &format!("{name}.in.b"), gb_in);
    let (gx, gg, gbeta) = layer_norm_bwd(&tape.x, b.get(&format!("{name}.ln.gamma")), &gu);
    add_grad(grads, &format!("{name}.ln.gamma"), gg);
    add_grad(grads, &format!("{name}.ln.beta"), gbeta);
    gx
}

/// Forward pass keeping every intermediate needed by [`block_bwd`].
pub(crate) fn block_train<F: Scalar>(
    b: &ModelBundleOf<F>,
    prefix: &str,
    x: &TensorOf<F>,
    cfg: &ModelConfig,
) -> (TensorOf<F>, BlockTape<F>) {
    let h = half::<F>();

    let (f1, ffn1_tape) = ffn_fwd(b, &format!("{prefix}.ffn1"), x);
    let mut x1 = x.clone();
    for (a, &fv) in x1.data_mut().iter_mut().zip(f1.data()) {
        *a = *a + h * fv;
    }

    let u_attn = layer_norm_fwd(
        &x1,
        b.get(&format!("{prefix}.attn.ln.gamma")),
        b.get(&format!("{prefix}.attn.ln.beta")),
    );
    let (attn_out, attn_tape) = masked_attention_fwd(
        &u_attn,
        cfg.left_context,
        cfg.heads,
        &attn_params(b, prefix),
    );
    let mut x2 = x1.clone();
    x2.add_assign(&attn_out);

    let u_conv = layer_norm_fwd(
        &x2,
        b.get(&format!("{prefix}.conv.ln.gamma")),
        b.get(&format!("{prefix}.conv.ln.beta")),
    );
    let pw1_out = linear_fwd(
        &u_conv,
        b.get(&format!("{prefix}.conv.pw1.w")),
        b.get(&format!("{prefix}.conv.pw1.b")),
    );
    let gated = glu_fwd(&pw1_out);
    let conv_out = causal_dw_conv_fwd(
        &gated,
        b.get(&format!("{prefix}.conv.dw.w")),
        b.get(&format!("{prefix}.conv.dw.b")),
        None,
    );
    let conv_normed = layer_norm_fwd(
        &conv_out,
        b.get(&format!("{prefix}.conv.norm.gamma")),
        b.get(&format!("{prefix}.conv.norm.beta")),
    );
    let conv_act = swish_fwd(&conv_normed);
    let pw2_out = linear_fwd(
        &conv_act,
        b.get(&format!("{prefix}.conv.pw2.w")),
        b.get(&format!("{prefix}.conv.pw2.b")),
    );
    let mut x3 = x2.clone();
    x3.add_assign(&pw2_out);

    let (f2, ffn2_tape) = ffn_fwd(b, &format!("{prefix}.ffn2"), &x3);
    let mut x4 = x3.clone();
    for (a, &fv) in x4.data_mut().iter_mut().zip(f2.data()) {
        *a = *a + h * fv;
    }

    let y = layer_norm_fwd(
        &x4,
        b.get(&format!("{prefix}.out_ln.gamma")),
        b.get(&format!("{prefix}.out_ln.beta")),
    );

    (
        y,
        BlockTape {
            ffn1: ffn1_tape,
            x1,
            u_attn,
            attn: attn_tape,
            x2,
            u_conv,
            pw1_out,
            gated,
            conv_out,
            conv_normed,
            ffn2: ffn2_tape,
            x4,
        },
    )
}

pub(crate) fn block_bwd<F: Scalar>(
    b: &ModelBundleOf<F>,
    prefix: &str,
    tape: &BlockTape<F>,
    gy: &TensorOf<F>,
    grads: &mut GradMap<F>,
) -> TensorOf<F> {
    let h = half::<F>();

    let (gx4, gg, gbeta) = layer_norm_bwd(&tape.x4, b.get(&format!("{prefix}.out_ln.gamma")), gy);
    add_grad(grads, &format!("{prefix}.out_ln.gamma"), gg);
    add_grad(grads, &format!("{prefix}.out_ln.beta"), gbeta);

    // x4 = x3 + 0.5 * ffn2(x3)
    let mut gf2 = gx4.clone();
    gf2.scale_assign(h);
    let mut gx3 = ffn_bwd(b, &format!("{prefix}.ffn2"), &tape.ffn2, &gf2, grads);
    gx3.add_assign(&gx4);

    // x3 = x2 + pw2(swish(norm(conv(glu(pw1(ln(x2)))))))
    let conv_act = swish_fwd(&tape.conv_normed);
    let (gact, gw_pw2, gb_pw2) =
        linear_bwd(&conv_act, b.get(&format!("{prefix}.conv.pw2.w")), &gx3);
    add_grad(grads, &format!("{prefix}.conv.pw2.w"), gw_pw2);
    add_grad(grads, &format!("{prefix}.conv.pw2.b"), gb_pw2);
    let gnormed = swish_bwd(&tape.conv_normed, &gact);
    let (gconv, gg_n, gb_n) = layer_norm_bwd(
        &tape.conv_out,
        b.get(&format!("{prefix}.conv.norm.gamma")),
        &gnormed,
    );
    add_grad(grads, &format!("{prefix}.conv.norm.gamma"), gg_n);
    add_grad(grads, &format!("{prefix}.conv.norm.beta"), gb_n);
    let (ggated, gw_dw, gb_dw) =
        causal_dw_conv_bwd(&tape.gated, b.get(&format!("{prefix}.conv.dw.w")), &gconv);
    add_grad(grads, &format!("{prefix}.conv.dw.w"), gw_dw);
    add_grad(grads, &format!("{prefix}.conv.dw.b"), gb_dw);
    let gpw1 = glu_bwd(&tape.pw1_out, &ggated);
    let (gu_conv, gw_pw1, gb_pw1) =
        linear_bwd(&tape.u_conv, b.get(&format!("{prefix}.conv.pw1.w")), &gpw1);
    add_grad(grads, &format!("{prefix}.conv.pw1.w"), gw_pw1);
    add_grad(grads, &format!("{prefix}.conv.pw1.b"), gb_pw1);
    let (gx2_conv, gg_c, gb_c) =
        layer_norm_bwd(&tape.x2, b.get(&format!("{prefix}.conv.ln.gamma")), &gu_conv);
    add_grad(grads, &format!("{prefix}.conv.ln.gamma"), gg_c);
    add_grad(grads, &format!("{prefix}.conv.ln.beta"), gb_c);
    let mut gx2 = gx3;
    gx2.add_assign(&gx2_conv);

    // x2 = x1 + attn(ln(x1))
    let (gu_attn, ag) = masked_attention_bwd(&tape.u_attn, &tape.attn, &attn_params(b, prefix), &gx2);
    add_grad(grads, &format!("{prefix}.attn.wq.w"), ag.wq);
    add_grad(grads, &format!("{prefix}.attn.wq.b"), ag.bq);
    add_grad(grads, &format!("{prefix}.attn.wk.w"), ag.wk);
    add_grad(grads, &format!("{prefix}.attn.wv.w"), ag.wv);
    add_grad(grads, &format!("{prefix}.attn.wv.b"), ag.bv);
    add_grad(grads, &format!("{prefix}.attn.wo.w"), ag.wo);
    add_grad(grads, &format!("{prefix}.attn.wo.b"), ag.bo);
    let (gx1_attn, gg_a, gb_a) =
        layer_norm_bwd(&tape.x1, b.get(&format!("{prefix}.attn.ln.gamma")), &gu_attn);
    add_grad(grads, &format!("{prefix}.attn.ln.gamma"), gg_a);
    add_grad(grads, &format!("{prefix}.attn.ln.beta"), gb_a);
    let mut gx1 = gx2;
    gx1.add_assign(&gx1_attn);

    // x1 = x + 0.5 * ffn1(x)
    let mut gf1 = gx1.clone();
    gf1.scale_assign(h);
    let mut gx = ffn_bwd(b, &format!("{prefix}.ffn1"), &tape.ffn1, &gf1, grads);
    gx.add_assign(&gx1);
    gx
}

/// Streaming state for one block: the attention sublayer's input history and
/// the causal conv tail.
#[derive(Clone)]
pub(crate) struct BlockStreamState {
    attn_cache: Tensor,
    conv: ConvState,
    frames_seen: usize,
}

impl BlockStreamState {
    pub(crate) fn new(cfg: &ModelConfig) -> Self {
        Self {
            attn_cache: Tensor::zeros(&[0, cfg.model_dim]),
            conv: ConvState::new(cfg.conv_kernel, cfg.model_dim),
            frames_seen: 0,
        }
    }

    pub(crate) fn cache_rows(&self) -> usize {
        self.attn_cache.rows()
    }
}

/// Push new frames through one block, updating its stream state. Produces
/// outputs bit-identical to the offline forward over the whole stream.
pub(crate) fn block_stream_step(
    b: &ModelBundle,
    prefix: &str,
    state: &mut BlockStreamState,
    x_new: &Tensor,
    cfg: &ModelConfig,
) -> Tensor {
    if x_new.rows() == 0 {
        return Tensor::zeros(&[0, cfg.model_dim]);
    }
    let f1 = ffn_infer(b, &format!("{prefix}.ffn1"), x_new);
    let mut x1 = x_new.clone();
    for (a, &fv) in x1.data_mut().iter_mut().zip(f1.data()) {
        *a = *a + 0.5 * fv;
    }

    let cache_len = state.attn_cache.rows();
    let pre_norm = Tensor::vcat(&[&state.attn_cache, &x1]);
    let u_all = layer_norm_fwd(
        &pre_norm,
        b.get(&format!("{prefix}.attn.ln.gamma")),
        b.get(&format!("{prefix}.attn.ln.beta")),
    );
    let u_new = Tensor::from_rows(
        &(cache_len..u_all.rows())
            .map(|i| u_all.row(i).to_vec())
            .collect::<Vec<_>>(),
    );
    let kv_global_start = state.frames_seen - cache_len;
    let attn_out = masked_attention_fwd_inc(
        &u_new,
        &u_all,
        kv_global_start,
        cfg.left_context,
        cfg.heads,
        &attn_params(b, prefix),
    );
    let mut x2 = x1.clone();
    x2.add_assign(&attn_out);

    let u_conv = layer_norm_fwd(
        &x2,
        b.get(&format!("{prefix}.conv.ln.gamma")),
        b.get(&format!("{prefix}.conv.ln.beta")),
    );
    let pw1_out = linear_fwd(
        &u_conv,
        b.get(&format!("{prefix}.conv.pw1.w")),
        b.get(&format!("{prefix}.conv.pw1.b")),
    );
    let gated = glu_fwd(&pw1_out);
    let conv_out = causal_dw_conv_fwd(
        &gated,
        b.get(&format!("{prefix}.conv.dw.w")),
        b.get(&format!("{prefix}.conv.dw.b")),
        Some(state.conv.tail()),
    );
    state.conv.roll_in(&gated);
    let conv_normed = layer_norm_fwd(
        &conv_out,
        b.get(&format!("{prefix}.conv.norm.gamma")),
        b.get(&format!("{prefix}.conv.norm.beta")),
    );
    let conv_act = swish_fwd(&conv_normed);
    let pw2_out = linear_fwd(
        &conv_act,
        b.get(&format!("{prefix}.conv.pw2.w")),
        b.get(&format!("{prefix}.conv.pw2.b")),
    );
    let mut x3 = x2;
    x3.add_assign(&pw2_out);

    let f2 = ffn_infer(b, &format!("{prefix}.ffn2"), &x3);
    let mut x4 = x3;
    for (a, &fv) in x4.data_mut().iter_mut().zip(f2.data()) {
        *a = *a + 0.5 * fv;
    }
    let y = layer_norm_fwd(
        &x4,
        b.get(&format!("{prefix}.out_ln.gamma")),
        b.get(&format!("{prefix}.out_ln.beta")),
    );

    // Keep the trailing `left_context` attention inputs.
    let keep = pre_norm.rows().min(cfg.left_context);
    state.attn_cache = Tensor::from_rows(
        &(pre_norm.rows() - keep..pre_norm.rows())
            .map(|i| pre_norm.row(i).to_vec())
            .collect::<Vec<_>>(),
    );
    if keep == 0 {
        state.attn_cache = Tensor::zeros(&[0, cfg.model_dim]);
    }
    state.frames_seen += x_new.rows();
    y
}
