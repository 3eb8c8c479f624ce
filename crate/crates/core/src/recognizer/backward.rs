//! Hand-written backpropagation: cross-entropy through the output
//! projections, attention, the LSTM (through time, with the previous
//! context fed into the next input), and the convolution stack.
//!
//! Correctness is enforced by the finite-difference check in `gradcheck`.

use super::forward::{col2im, im2col, teacher_forward, ForwardTrace};
use super::params::ModelParams;
use crate::error::Result;
use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};

/// `dst += a ⊗ b`.
fn add_outer(dst: &mut Array2<f64>, a: &Array1<f64>, b: &ArrayView1<f64>) {
    for (r, &av) in a.iter().enumerate() {
        if av != 0.0 {
            dst.row_mut(r).scaled_add(av, b);
        }
    }
}

/// Teacher-forced loss and gradients for one sample. Gradients accumulate
/// into `grads` (callers zero or reuse as they batch). Returns the summed
/// cross-entropy and the token count.
pub fn sample_loss_grads(
    params: &ModelParams,
    gray: &Array3<f64>,
    targets: &[usize],
    grads: &mut ModelParams,
) -> Result<(f64, usize)> {
    let trace = teacher_forward(params, gray, targets)?;
    backward(params, &trace, grads);
    Ok((trace.loss, targets.len()))
}

fn backward(params: &ModelParams, trace: &ForwardTrace, grads: &mut ModelParams) {
    let cfg = &params.config;
    let h_dim = cfg.hidden_dim;
    let p_dim = cfg.embed_dim;
    let dc = cfg.ctx_dim();
    let a_dim = cfg.attn_dim;
    let n = trace.grid.cells();
    let feats = &trace.grid.feats;

    let mut d_feats = Array2::<f64>::zeros((n, dc));
    let mut dh_next = Array1::<f64>::zeros(h_dim);
    let mut dcell_next = Array1::<f64>::zeros(h_dim);
    let mut dctx_next = Array1::<f64>::zeros(dc);

    for st in trace.steps.iter().rev() {
        let core = &st.core;

        // Softmax cross-entropy.
        let mut dlogits = st.probs.clone();
        dlogits[st.target] -= 1.0;

        // logits = out_proj · u, u = e_prev + hidden_proj·h + context_proj·ctx.
        add_outer(&mut grads.out_proj, &dlogits, &core.u.view());
        let du = params.out_proj.t().dot(&dlogits);

        let mut de_prev = du.clone();
        add_outer(&mut grads.hidden_proj, &du, &core.h.view());
        let mut dh = params.hidden_proj.t().dot(&du);
        dh += &dh_next;
        add_outer(&mut grads.context_proj, &du, &core.ctx.view());
        let mut dctx = params.context_proj.t().dot(&du);
        dctx += &dctx_next;

        // Attention: ctx = featsᵀ·alpha, alpha = softmax(s),
        // s_j = Σ_k v_k tanh(wh_h_k + uf_kj + b_k).
        let dalpha = feats.dot(&dctx);
        for j in 0..n {
            let a = core.alpha[j];
            if a != 0.0 {
                d_feats.row_mut(j).scaled_add(a, &dctx.view());
            }
        }
        let dot = core.alpha.dot(&dalpha);
        let ds = &core.alpha * &(&dalpha - dot);

        let mut da = Array2::<f64>::zeros((a_dim, n));
        let mut da_sum = Array1::<f64>::zeros(a_dim);
        for j in 0..n {
            let dsj = ds[j];
            for k in 0..a_dim {
                let t = (core.wh_h[k] + trace.uf[[k, j]] + params.attn.b[k]).tanh();
                grads.attn.v[k] += dsj * t;
                let dakj = dsj * params.attn.v[k] * (1.0 - t * t);
                da[[k, j]] = dakj;
                da_sum[k] += dakj;
            }
        }
        grads.attn.b += &da_sum;
        add_outer(&mut grads.attn.w_h, &da_sum, &core.h.view());
        dh += &params.attn.w_h.t().dot(&da_sum);
        grads.attn.u_f += &da.dot(feats);
        d_feats += &da.t().dot(&params.attn.u_f);

        // LSTM cell, gate order (input, forget, cell, output).
        let gates = &core.gates;
        let mut dz = Array1::<f64>::zeros(4 * h_dim);
        let mut dcell_prev = Array1::<f64>::zeros(h_dim);
        for k in 0..h_dim {
            let i = gates[k];
            let f = gates[h_dim + k];
            let g = gates[2 * h_dim + k];
            let o = gates[3 * h_dim + k];
            let tc = core.cell[k].tanh();
            let d_o = dh[k] * tc;
            let dtc = dh[k] * o * (1.0 - tc * tc) + dcell_next[k];
            let d_f = dtc * st.cell_prev[k];
            dcell_prev[k] = dtc * f;
            let d_i = dtc * g;
            let d_g = dtc * i;
            dz[k] = d_i * i * (1.0 - i);
            dz[h_dim + k] = d_f * f * (1.0 - f);
            dz[2 * h_dim + k] = d_g * (1.0 - g * g);
            dz[3 * h_dim + k] = d_o * o * (1.0 - o);
        }
        add_outer(&mut grads.lstm.w_ih, &dz, &core.x.view());
        add_outer(&mut grads.lstm.w_hh, &dz, &st.h_prev.view());
        grads.lstm.b += &dz;
        let dx = params.lstm.w_ih.t().dot(&dz);
        let dh_prev = params.lstm.w_hh.t().dot(&dz);

        // The embedding feeds both the output sum and the LSTM input; the
        // context part of the input flows to the previous step's attention.
        de_prev += &dx.slice(s![..p_dim]);
        dctx_next.assign(&dx.slice(s![p_dim..]));
        dh_next = dh_prev;
        dcell_next = dcell_prev;

        grads.embed.row_mut(st.prev).scaled_add(1.0, &de_prev.view());
    }

    // Feature gradients (minus the constant coordinate channels) flow back
    // through the convolution stack.
    let d = cfg.feat_dim();
    let (hp, wp) = (trace.grid.hp, trace.grid.wp);
    let mut d_out = Array3::<f64>::zeros((d, hp, wp));
    for r in 0..hp {
        for c in 0..wp {
            let j = r * wp + c;
            for ch in 0..d {
                d_out[[ch, r, c]] = d_feats[[j, ch]];
            }
        }
    }
    conv_backward_stack(params, trace, d_out, grads);
}

fn conv_backward_stack(
    params: &ModelParams,
    trace: &ForwardTrace,
    d_last: Array3<f64>,
    grads: &mut ModelParams,
) {
    let mut d_out = d_last;
    for l in (0..params.conv.len()).rev() {
        let input = &trace.encode.inputs[l];
        let pre = &trace.encode.pre[l];
        let (out_ch, hp, wp) = d_out.dim();
        let mut dpre = d_out
            .into_shape_with_order((out_ch, hp * wp))
            .expect("row-major reshape");
        ndarray::Zip::from(&mut dpre).and(pre).for_each(|dv, &p| {
            if p <= 0.0 {
                *dv = 0.0;
            }
        });
        let cols = im2col(input);
        grads.conv[l].w += &dpre.dot(&cols.t());
        grads.conv[l].b += &dpre.sum_axis(Axis(1));
        if l == 0 {
            break;
        }
        let dcols = params.conv[l].w.t().dot(&dpre);
        d_out = col2im(&dcols, input.dim());
    }
}
