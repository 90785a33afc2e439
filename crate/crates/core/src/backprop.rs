//! Exact reverse-mode gradients for every training and defense objective,
//! plus the central finite-difference checker used to validate them.
//!
//! The architecture is static, so backprop is written as an explicit sweep
//! over the fixed operator set (affine, SiLU, RMS norm, causal attention,
//! lens projection) rather than a taped graph. Objectives that probe
//! intermediate layers inject their logit gradients at the matching points
//! of the sweep; the lens head (final norm + unembedding) is shared, so its
//! parameters accumulate contributions from every probed layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::editor::EditTarget;
use crate::error::{Error, Result};
use crate::model::{rms, rmsnorm, silu, silu_grad, ModelState, Token};
use crate::tensor::{
    axpy, dot, entropy_slice, log_softmax_slice, matvec, matvec_t, outer_acc, softmax_slice,
    GradientSet,
};

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    All,
    AdapterOnly,
}

/// One training or evaluation input with its objective token.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub image: Vec<f64>,
    pub question: Vec<Token>,
    /// Answer token for cross-entropy/erasure objectives, false target for
    /// error injection, the deleted answer for head projection; unused by
    /// max-entropy.
    pub target: Token,
}

/// Differentiable objective kinds shared by pretraining and the defenses.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// −ln p(target) at the output distribution.
    CrossEntropy,
    /// −ln p(empty) at the output distribution.
    EmptyResponse { empty: Token },
    /// +ln p(target): descending this drives the answer probability down.
    FactErasure,
    /// −ln p(false_target) at the output distribution.
    ErrorInjection { false_target: Token },
    /// Max-margin expulsion of the target from the lens top-k at each probed
    /// layer: Σ_ℓ max(0, m + s_ℓ(target) − s_ℓ(kth largest other token)).
    HeadProjection {
        layers: Vec<usize>,
        top_k: usize,
        margin: f64,
    },
    /// Negated lens entropy summed over the probed layers.
    MaxEntropy { layers: Vec<usize> },
}

impl Objective {
    /// Probed layers as 0-based indices, sorted and deduplicated.
    fn probe_layers(&self, n_layers: usize) -> Result<Vec<usize>> {
        let one_based: Vec<usize> = match self {
            Objective::HeadProjection { layers, .. } | Objective::MaxEntropy { layers } => {
                layers.clone()
            }
            _ => vec![n_layers],
        };
        if one_based.is_empty() {
            return Err(Error::Config("objective probes no layers".into()));
        }
        let mut out = Vec::with_capacity(one_based.len());
        for l in one_based {
            if l == 0 || l > n_layers {
                return Err(Error::Config(format!(
                    "probed layer {l} outside 1..={n_layers}"
                )));
            }
            out.push(l - 1);
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Cached forward pass.
// ---------------------------------------------------------------------------

struct ProjCache {
    image: Vec<f64>,
    pre1: Vec<f64>,
    hidden: Vec<f64>,
}

struct LayerCache {
    xn1: Vec<Vec<f64>>,
    r1: Vec<f64>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Attention weights `aw[t][h][s]` for s ≤ t.
    aw: Vec<Vec<Vec<f64>>>,
    ho: Vec<Vec<f64>>,
    x_mid: Vec<Vec<f64>>,
    xn2: Vec<Vec<f64>>,
    r2: Vec<f64>,
    u_pre: Vec<Vec<f64>>,
    u_act: Vec<Vec<f64>>,
    x_out: Vec<Vec<f64>>,
}

struct ForwardCache {
    x0: Vec<Vec<f64>>,
    proj: ProjCache,
    layers: Vec<LayerCache>,
}

fn forward_cached(state: &ModelState, item: &BatchItem) -> Result<ForwardCache> {
    let cfg = &state.config;
    let d = cfg.width;
    let heads = cfg.heads;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let f = cfg.mlp_expansion * d;

    let x0 = state.embed_sequence(&item.image, &item.question)?;
    let mut pre1 = matvec(
        state.param("proj.w1").data(),
        &item.image,
        d,
        cfg.image_dim,
    );
    for (h, b) in pre1.iter_mut().zip(state.param("proj.b1").data()) {
        *h += b;
    }
    let hidden: Vec<f64> = pre1.iter().map(|&v| silu(v)).collect();
    let proj = ProjCache {
        image: item.image.clone(),
        pre1,
        hidden,
    };

    let t_len = x0.len();
    let mut x = x0.clone();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        let wq = state.param(&format!("layer{layer}.attn.wq"));
        let wk = state.param(&format!("layer{layer}.attn.wk"));
        let wv = state.param(&format!("layer{layer}.attn.wv"));
        let wo = state.param(&format!("layer{layer}.attn.wo"));

        let mut xn1 = Vec::with_capacity(t_len);
        let mut r1 = Vec::with_capacity(t_len);
        let mut qs = Vec::with_capacity(t_len);
        let mut ks = Vec::with_capacity(t_len);
        let mut vs = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let r = rms(&x[t]);
            let xn: Vec<f64> = x[t].iter().map(|v| v / r).collect();
            qs.push(matvec(wq.data(), &xn, d, d));
            ks.push(matvec(wk.data(), &xn, d, d));
            vs.push(matvec(wv.data(), &xn, d, d));
            xn1.push(xn);
            r1.push(r);
        }
        let mut aw = Vec::with_capacity(t_len);
        let mut ho_all = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut ho = vec![0.0; d];
            let mut aw_t = Vec::with_capacity(heads);
            for h in 0..heads {
                let r = h * hd..(h + 1) * hd;
                let logits: Vec<f64> = (0..=t)
                    .map(|s| dot(&qs[t][r.clone()], &ks[s][r.clone()]) * scale)
                    .collect();
                let weights = softmax_slice(&logits);
                for (s, w) in weights.iter().enumerate() {
                    axpy(&mut ho[r.clone()], *w, &vs[s][r.clone()]);
                }
                aw_t.push(weights);
            }
            ho_all.push(ho);
            aw.push(aw_t);
        }
        for t in 0..t_len {
            let attn_out = matvec(wo.data(), &ho_all[t], d, d);
            for (xi, a) in x[t].iter_mut().zip(&attn_out) {
                *xi += a;
            }
        }
        let x_mid = x.clone();

        let up = state.param(&format!("layer{layer}.mlp.up"));
        let down = state.param(&format!("layer{layer}.mlp.down"));
        let adapter = state
            .adapter
            .as_ref()
            .filter(|a| a.target == EditTarget::LlmMlpDown { layer: layer + 1 });
        let mut xn2 = Vec::with_capacity(t_len);
        let mut r2 = Vec::with_capacity(t_len);
        let mut u_pre_all = Vec::with_capacity(t_len);
        let mut u_act_all = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let r = rms(&x[t]);
            let xn: Vec<f64> = x[t].iter().map(|v| v / r).collect();
            let u_pre = matvec(up.data(), &xn, f, d);
            let u_act: Vec<f64> = u_pre.iter().map(|&v| silu(v)).collect();
            let mut m = matvec(down.data(), &u_act, d, f);
            if let Some(a) = adapter {
                let coeff = a.alpha * dot(a.a_vec.data(), &u_act);
                axpy(&mut m, coeff, a.b.data());
            }
            for (xi, mi) in x[t].iter_mut().zip(&m) {
                *xi += mi;
            }
            xn2.push(xn);
            r2.push(r);
            u_pre_all.push(u_pre);
            u_act_all.push(u_act);
        }

        layers.push(LayerCache {
            xn1,
            r1,
            q: qs,
            k: ks,
            v: vs,
            aw,
            ho: ho_all,
            x_mid,
            xn2,
            r2,
            u_pre: u_pre_all,
            u_act: u_act_all,
            x_out: x.clone(),
        });
    }

    Ok(ForwardCache { x0, proj, layers })
}

// ---------------------------------------------------------------------------
// Objective values and logit gradients.
// ---------------------------------------------------------------------------

/// Loss plus, per probed layer, the gradient w.r.t. that layer's lens logits
/// at the final position.
fn objective_at_logits(
    objective: &Objective,
    target: Token,
    per_layer_logits: &[(usize, Vec<f64>)],
) -> (f64, Vec<(usize, Vec<f64>)>) {
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(per_layer_logits.len());
    for (layer, logits) in per_layer_logits {
        let v = logits.len();
        let mut dz = vec![0.0; v];
        match objective {
            Objective::CrossEntropy => {
                let logp = log_softmax_slice(logits);
                loss += -logp[target.idx()];
                let p = softmax_slice(logits);
                dz.copy_from_slice(&p);
                dz[target.idx()] -= 1.0;
            }
            Objective::EmptyResponse { empty } => {
                let logp = log_softmax_slice(logits);
                loss += -logp[empty.idx()];
                let p = softmax_slice(logits);
                dz.copy_from_slice(&p);
                dz[empty.idx()] -= 1.0;
            }
            Objective::FactErasure => {
                let logp = log_softmax_slice(logits);
                loss += logp[target.idx()];
                let p = softmax_slice(logits);
                for (g, pi) in dz.iter_mut().zip(&p) {
                    *g = -pi;
                }
                dz[target.idx()] += 1.0;
            }
            Objective::ErrorInjection { false_target } => {
                let logp = log_softmax_slice(logits);
                loss += -logp[false_target.idx()];
                let p = softmax_slice(logits);
                dz.copy_from_slice(&p);
                dz[false_target.idx()] -= 1.0;
            }
            Objective::HeadProjection { top_k, margin, .. } => {
                let s = log_softmax_slice(logits);
                if let Some(kth) = kth_largest_excluding(&s, target, *top_k) {
                    let hinge = margin + s[target.idx()] - s[kth];
                    if hinge > 0.0 {
                        loss += hinge;
                        // s(a) − s(t) reduces to z(a) − z(t): the log-sum-exp cancels
                        dz[target.idx()] += 1.0;
                        dz[kth] -= 1.0;
                    }
                }
            }
            Objective::MaxEntropy { .. } => {
                let p = softmax_slice(logits);
                let h = entropy_slice(&p);
                loss += -h;
                for (g, &pi) in dz.iter_mut().zip(&p) {
                    *g = if pi > 0.0 { pi * (pi.ln() + h) } else { 0.0 };
                }
            }
        }
        grads.push((*layer, dz));
    }
    (loss, grads)
}

/// Index of the k-th largest entry excluding `target` (1-based k), ties to
/// the lower token index.
pub(crate) fn kth_largest_excluding(scores: &[f64], target: Token, k: usize) -> Option<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| i != target.idx()).collect();
    if k == 0 || order.len() < k {
        return None;
    }
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    Some(order[k - 1])
}

/// Forward-only objective value (mean over the batch). This is the
/// independent path the finite-difference oracle drives; it reuses the plain
/// model forward rather than the cached training pass.
pub fn objective_loss(state: &ModelState, batch: &[BatchItem], objective: &Objective) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let probes = objective.probe_layers(state.config.n_layers)?;
    let mut total = 0.0;
    for item in batch {
        let (hidden, _) = state.forward(&item.image, &item.question)?;
        let per_layer: Vec<(usize, Vec<f64>)> = probes
            .iter()
            .map(|&l| (l, state.project_to_logits(&hidden[l])))
            .collect();
        let (loss, _) = objective_at_logits(objective, item.target, &per_layer);
        total += loss;
    }
    Ok(total / batch.len() as f64)
}

// ---------------------------------------------------------------------------
// Backward sweep.
// ---------------------------------------------------------------------------

fn rmsnorm_bwd(dy: &[f64], x: &[f64], r: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let proj = dot(dy, x) / (n * r * r * r);
    dy.iter().zip(x).map(|(g, xi)| g / r - proj * xi).collect()
}

/// Accumulate into `grads` only when the parameter is in the trainable set.
macro_rules! acc {
    ($grads:expr, $name:expr, $body:expr) => {
        if let Some(slot) = $grads.get_mut($name) {
            let body: &mut dyn FnMut(&mut [f64]) = &mut $body;
            body(slot.data_mut());
        }
    };
}

/// Backprop through the shared lens head: returns d_h and accumulates
/// unembedding and final-norm-gain gradients.
fn lens_head_backward(
    state: &ModelState,
    h: &[f64],
    d_logits: &[f64],
    grads: &mut GradientSet,
) -> Vec<f64> {
    let d = state.config.width;
    let v = state.config.vocab_size;
    let (normed, r) = rmsnorm(h);
    let gain = state.param("final_norm.gain").data();
    let scaled: Vec<f64> = normed.iter().zip(gain).map(|(n, g)| n * g).collect();
    let wu = state.param("unembed.w").data();
    acc!(grads, "unembed.w", |dw| outer_acc(dw, d_logits, &scaled));
    let d_scaled = matvec_t(wu, d_logits, v, d);
    acc!(grads, "final_norm.gain", |dg| {
        for i in 0..d {
            dg[i] += d_scaled[i] * normed[i];
        }
    });
    let d_normed: Vec<f64> = d_scaled.iter().zip(gain).map(|(g, w)| g * w).collect();
    rmsnorm_bwd(&d_normed, h, r)
}

#[allow(clippy::too_many_arguments)]
fn block_backward(
    state: &ModelState,
    layer: usize,
    lc: &LayerCache,
    x_in: &[Vec<f64>],
    dx: &mut [Vec<f64>],
    grads: &mut GradientSet,
) {
    let cfg = &state.config;
    let d = cfg.width;
    let heads = cfg.heads;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let f = cfg.mlp_expansion * d;
    let t_len = dx.len();
    let up = state.param(&format!("layer{layer}.mlp.up"));
    let down = state.param(&format!("layer{layer}.mlp.down"));
    let adapter = state
        .adapter
        .as_ref()
        .filter(|a| a.target == EditTarget::LlmMlpDown { layer: layer + 1 });

    // MLP path: dx holds d_x_out; after this loop it holds d_x_mid.
    let up_name = format!("layer{layer}.mlp.up");
    let down_name = format!("layer{layer}.mlp.down");
    for t in 0..t_len {
        let d_m = dx[t].clone();
        let mut d_u = matvec_t(down.data(), &d_m, d, f);
        acc!(grads, down_name.as_str(), |dw| outer_acc(
            dw,
            &d_m,
            &lc.u_act[t]
        ));
        if let Some(a) = adapter {
            let coeff = dot(a.a_vec.data(), &lc.u_act[t]);
            let bdm = dot(a.b.data(), &d_m);
            acc!(grads, "adapter.b", |db| axpy(db, a.alpha * coeff, &d_m));
            acc!(grads, "adapter.a", |da| axpy(
                da,
                a.alpha * bdm,
                &lc.u_act[t]
            ));
            axpy(&mut d_u, a.alpha * bdm, a.a_vec.data());
        }
        let d_u_pre: Vec<f64> = d_u
            .iter()
            .zip(&lc.u_pre[t])
            .map(|(g, &pre)| g * silu_grad(pre))
            .collect();
        acc!(grads, up_name.as_str(), |dw| outer_acc(
            dw,
            &d_u_pre,
            &lc.xn2[t]
        ));
        let d_xn2 = matvec_t(up.data(), &d_u_pre, f, d);
        let d_from_norm = rmsnorm_bwd(&d_xn2, &lc.x_mid[t], lc.r2[t]);
        axpy(&mut dx[t], 1.0, &d_from_norm);
    }

    // Attention path, phase A: distribute d_x_mid to q/k/v across positions.
    let wq = state.param(&format!("layer{layer}.attn.wq"));
    let wk = state.param(&format!("layer{layer}.attn.wk"));
    let wv = state.param(&format!("layer{layer}.attn.wv"));
    let wo = state.param(&format!("layer{layer}.attn.wo"));
    let wo_name = format!("layer{layer}.attn.wo");
    let mut d_q = vec![vec![0.0; d]; t_len];
    let mut d_k = vec![vec![0.0; d]; t_len];
    let mut d_v = vec![vec![0.0; d]; t_len];
    for t in 0..t_len {
        let d_ao = &dx[t];
        acc!(grads, wo_name.as_str(), |dw| outer_acc(dw, d_ao, &lc.ho[t]));
        let d_ho = matvec_t(wo.data(), d_ao, d, d);
        for h in 0..heads {
            let range = h * hd..(h + 1) * hd;
            let aw = &lc.aw[t][h];
            let d_w: Vec<f64> = (0..=t)
                .map(|s| dot(&d_ho[range.clone()], &lc.v[s][range.clone()]))
                .collect();
            let dot_aw = dot(aw, &d_w);
            for s in 0..=t {
                let d_logit = aw[s] * (d_w[s] - dot_aw);
                axpy(&mut d_v[s][range.clone()], aw[s], &d_ho[range.clone()]);
                axpy(
                    &mut d_q[t][range.clone()],
                    d_logit * scale,
                    &lc.k[s][range.clone()],
                );
                axpy(
                    &mut d_k[s][range.clone()],
                    d_logit * scale,
                    &lc.q[t][range.clone()],
                );
            }
        }
    }

    // Phase B: project q/k/v gradients back through the input norm.
    let wq_name = format!("layer{layer}.attn.wq");
    let wk_name = format!("layer{layer}.attn.wk");
    let wv_name = format!("layer{layer}.attn.wv");
    for t in 0..t_len {
        acc!(grads, wq_name.as_str(), |dw| outer_acc(
            dw,
            &d_q[t],
            &lc.xn1[t]
        ));
        acc!(grads, wk_name.as_str(), |dw| outer_acc(
            dw,
            &d_k[t],
            &lc.xn1[t]
        ));
        acc!(grads, wv_name.as_str(), |dw| outer_acc(
            dw,
            &d_v[t],
            &lc.xn1[t]
        ));
        let mut d_xn1 = matvec_t(wq.data(), &d_q[t], d, d);
        let dk_part = matvec_t(wk.data(), &d_k[t], d, d);
        let dv_part = matvec_t(wv.data(), &d_v[t], d, d);
        axpy(&mut d_xn1, 1.0, &dk_part);
        axpy(&mut d_xn1, 1.0, &dv_part);
        let d_from_norm = rmsnorm_bwd(&d_xn1, &x_in[t], lc.r1[t]);
        axpy(&mut dx[t], 1.0, &d_from_norm);
    }
}

fn projector_backward(
    state: &ModelState,
    proj: &ProjCache,
    d_prefix: &[f64],
    grads: &mut GradientSet,
) {
    let cfg = &state.config;
    let d = cfg.width;
    let p = cfg.prefix_len * d;
    let w2 = state.param("proj.w2").data();
    acc!(grads, "proj.w2", |dw| outer_acc(dw, d_prefix, &proj.hidden));
    acc!(grads, "proj.b2", |db| axpy(db, 1.0, d_prefix));
    let mut d_hidden = matvec_t(w2, d_prefix, p, d);
    if let Some(a) = state
        .adapter
        .as_ref()
        .filter(|a| a.target == EditTarget::ProjectorMlp)
    {
        let coeff = dot(a.a_vec.data(), &proj.hidden);
        let bd = dot(a.b.data(), d_prefix);
        acc!(grads, "adapter.b", |db| axpy(db, a.alpha * coeff, d_prefix));
        acc!(grads, "adapter.a", |da| axpy(da, a.alpha * bd, &proj.hidden));
        axpy(&mut d_hidden, a.alpha * bd, a.a_vec.data());
    }
    let d_pre1: Vec<f64> = d_hidden
        .iter()
        .zip(&proj.pre1)
        .map(|(g, &pre)| g * silu_grad(pre))
        .collect();
    acc!(grads, "proj.w1", |dw| outer_acc(dw, &d_pre1, &proj.image));
    acc!(grads, "proj.b1", |db| axpy(db, 1.0, &d_pre1));
}

fn backward_item(
    state: &ModelState,
    cache: &ForwardCache,
    item: &BatchItem,
    injections: &[(usize, Vec<f64>)],
    grads: &mut GradientSet,
) {
    let cfg = &state.config;
    let d = cfg.width;
    let n = cfg.n_layers;
    let t_len = cache.x0.len();
    let last = t_len - 1;

    let mut inject: Vec<Option<Vec<f64>>> = vec![None; n];
    for (layer, d_logits) in injections {
        let h = &cache.layers[*layer].x_out[last];
        let dh = lens_head_backward(state, h, d_logits, grads);
        match &mut inject[*layer] {
            Some(existing) => axpy(existing, 1.0, &dh),
            slot => *slot = Some(dh),
        }
    }

    let mut dx = vec![vec![0.0; d]; t_len];
    for layer in (0..n).rev() {
        if let Some(dh) = inject[layer].take() {
            axpy(&mut dx[last], 1.0, &dh);
        }
        let x_in: &[Vec<f64>] = if layer == 0 {
            &cache.x0
        } else {
            &cache.layers[layer - 1].x_out
        };
        block_backward(state, layer, &cache.layers[layer], x_in, &mut dx, grads);
    }

    let p = cfg.prefix_len;
    acc!(grads, "embed.tok", |de| {
        for (i, tok) in item.question.iter().enumerate() {
            let row = tok.idx() * d;
            axpy(&mut de[row..row + d], 1.0, &dx[p + i]);
        }
    });
    let mut d_prefix = Vec::with_capacity(p * d);
    for pos in dx.iter().take(p) {
        d_prefix.extend_from_slice(pos);
    }
    projector_backward(state, &cache.proj, &d_prefix, grads);
}

fn registered_grads(state: &ModelState, scope: TrainScope) -> Result<GradientSet> {
    if scope == TrainScope::AdapterOnly && state.adapter.is_none() {
        return Err(Error::State(
            "adapter-only training requested with no adapter attached".into(),
        ));
    }
    let mut grads = GradientSet::new();
    for name in state.trainable_names(scope) {
        let shape = state.any_param(&name).shape().to_vec();
        grads.register(&name, &shape);
    }
    Ok(grads)
}

fn process_items(
    state: &ModelState,
    items: &[BatchItem],
    objective: &Objective,
    probes: &[usize],
    inv_batch: f64,
    scope: TrainScope,
) -> Result<(f64, GradientSet)> {
    let mut grads = registered_grads(state, scope)?;
    let mut loss = 0.0;
    for item in items {
        let cache = forward_cached(state, item)?;
        let last = cache.x0.len() - 1;
        let per_layer: Vec<(usize, Vec<f64>)> = probes
            .iter()
            .map(|&l| (l, state.project_to_logits(&cache.layers[l].x_out[last])))
            .collect();
        let (item_loss, mut d_logits) = objective_at_logits(objective, item.target, &per_layer);
        loss += item_loss * inv_batch;
        for (_, dz) in d_logits.iter_mut() {
            for g in dz.iter_mut() {
                *g *= inv_batch;
            }
        }
        backward_item(state, &cache, item, &d_logits, &mut grads);
    }
    Ok((loss, grads))
}

/// Fixed chunk size so that parallel gradient accumulation reduces in a
/// machine-independent order.
const CHUNK: usize = 32;

/// Mean objective over the batch plus exact gradients for the trainable set.
pub fn forward_backward(
    state: &ModelState,
    batch: &[BatchItem],
    objective: &Objective,
    scope: TrainScope,
) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let probes = objective.probe_layers(state.config.n_layers)?;
    let inv = 1.0 / batch.len() as f64;

    let (loss, grads) = if batch.len() <= CHUNK {
        process_items(state, batch, objective, &probes, inv, scope)?
    } else {
        let partials: Result<Vec<(f64, GradientSet)>> = batch
            .par_chunks(CHUNK)
            .map(|chunk| process_items(state, chunk, objective, &probes, inv, scope))
            .collect();
        let mut iter = partials?.into_iter();
        let (mut loss, mut grads) = iter.next().expect("nonempty batch");
        for (l, g) in iter {
            loss += l;
            grads.add_assign(&g);
        }
        (loss, grads)
    };

    if !loss.is_finite() {
        return Err(Error::InvalidInput("non-finite loss".into()));
    }
    grads.check_finite()?;
    Ok((loss, grads))
}

/// Compare analytic gradients against central finite differences on a random
/// subsample of at least `MIN_COORDS` coordinates; returns the maximum
/// relative error. Meaningful only in 64-bit, which is all this crate does.
pub fn grad_check(
    state: &ModelState,
    batch: &[BatchItem],
    objective: &Objective,
    step: f64,
) -> Result<f64> {
    const MIN_COORDS: usize = 200;
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::InvalidInput("finite positive step required".into()));
    }
    let scope = TrainScope::All;
    let (_, grads) = forward_backward(state, batch, objective, scope)?;

    let names = state.trainable_names(scope);
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (ni, name) in names.iter().enumerate() {
        for i in 0..state.any_param(name).len() {
            coords.push((ni, i));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c0de);
    let sample: Vec<(usize, usize)> = if coords.len() <= MIN_COORDS {
        coords
    } else {
        let mut picked = Vec::with_capacity(MIN_COORDS);
        let mut remaining = coords;
        for _ in 0..MIN_COORDS {
            let j = rng.gen_range(0..remaining.len());
            picked.push(remaining.swap_remove(j));
        }
        picked
    };

    let mut probe = state.clone();
    let mut max_rel: f64 = 0.0;
    for (ni, i) in sample {
        let name = &names[ni];
        let orig = probe.any_param(name).data()[i];
        probe.any_param_mut(name).data_mut()[i] = orig + step;
        let plus = objective_loss(&probe, batch, objective)?;
        probe.any_param_mut(name).data_mut()[i] = orig - step;
        let minus = objective_loss(&probe, batch, objective)?;
        probe.any_param_mut(name).data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * step);
        let analytic = grads.get(name).expect("registered grad").data()[i];
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-5);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::tensor::Tensor;

    fn small_state(seed: u64) -> ModelState {
        init_model(&ModelConfig {
            vocab_size: 32,
            width: 16,
            n_layers: 2,
            heads: 2,
            mlp_expansion: 2,
            image_dim: 8,
            prefix_len: 2,
            max_seq: 16,
            seed,
        })
        .unwrap()
    }

    fn small_batch(seed: u64) -> Vec<BatchItem> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3)
            .map(|_| BatchItem {
                image: (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                question: (0..3).map(|_| Token(rng.gen_range(8..32))).collect(),
                target: Token(rng.gen_range(8..32)),
            })
            .collect()
    }

    #[test]
    fn zero_weight_model_cross_entropy_is_ln_v() {
        let mut state = small_state(0);
        let names: Vec<String> = state.trainable_names(TrainScope::All);
        for name in names {
            let shape = state.any_param(&name).shape().to_vec();
            *state.any_param_mut(&name) = Tensor::zeros(&shape);
        }
        let batch = small_batch(1);
        let (loss, _) =
            forward_backward(&state, &batch, &Objective::CrossEntropy, TrainScope::All).unwrap();
        assert!((loss - 32f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn adapter_scope_covers_exactly_the_adapter() {
        let state = small_state(3);
        let state = crate::editor::attach_lora(&state, EditTarget::LlmMlpDown { layer: 1 }, 1.0)
            .unwrap();
        let batch = small_batch(2);
        let (_, grads) = forward_backward(
            &state,
            &batch,
            &Objective::FactErasure,
            TrainScope::AdapterOnly,
        )
        .unwrap();
        let keys: Vec<&String> = grads.keys().collect();
        assert_eq!(keys, vec!["adapter.a", "adapter.b"]);
    }

    #[test]
    fn adapter_scope_without_adapter_is_a_state_error() {
        let state = small_state(3);
        let batch = small_batch(2);
        assert!(matches!(
            forward_backward(
                &state,
                &batch,
                &Objective::FactErasure,
                TrainScope::AdapterOnly
            ),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn cached_forward_agrees_with_plain_forward_bitwise() {
        let state = small_state(5);
        let batch = small_batch(7);
        let item = &batch[0];
        let cache = forward_cached(&state, item).unwrap();
        let (hidden, dist) = state.forward(&item.image, &item.question).unwrap();
        let last = cache.x0.len() - 1;
        for (l, h) in hidden.iter().enumerate() {
            assert_eq!(h, &cache.layers[l].x_out[last]);
        }
        let cached_dist = state.project_to_dist(&cache.layers[1].x_out[last]);
        assert_eq!(dist.data(), cached_dist.as_slice());
    }

    fn objectives() -> Vec<Objective> {
        vec![
            Objective::CrossEntropy,
            Objective::EmptyResponse { empty: Token(1) },
            Objective::FactErasure,
            Objective::ErrorInjection {
                false_target: Token(9),
            },
            Objective::HeadProjection {
                layers: vec![1, 2],
                top_k: 4,
                margin: 0.1,
            },
            Objective::MaxEntropy { layers: vec![1, 2] },
        ]
    }

    #[test]
    fn gradients_match_finite_differences_for_every_objective() {
        for seed in 0..5u64 {
            let state = small_state(seed);
            let batch = small_batch(seed + 100);
            for objective in objectives() {
                let err = grad_check(&state, &batch, &objective, 1e-5).unwrap();
                assert!(
                    err <= 1e-4,
                    "objective {objective:?} seed {seed}: max rel error {err}"
                );
            }
        }
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        for target in [
            EditTarget::LlmMlpDown { layer: 2 },
            EditTarget::ProjectorMlp,
        ] {
            let state = small_state(11);
            let mut state = crate::editor::attach_lora(&state, target, 1.0).unwrap();
            // move b off zero so adapter gradients are nondegenerate
            let b = state.adapter.as_mut().unwrap();
            for (i, v) in b.b.data_mut().iter_mut().enumerate() {
                *v = 0.01 * ((i as f64) * 0.7).sin();
            }
            let batch = small_batch(13);
            for objective in objectives() {
                let err = grad_check(&state, &batch, &objective, 1e-5).unwrap();
                assert!(
                    err <= 1e-4,
                    "adapter target {:?}, objective {objective:?}: {err}",
                    state.adapter.as_ref().unwrap().target
                );
            }
        }
    }

    #[test]
    fn zero_step_size_is_rejected() {
        let state = small_state(0);
        let batch = small_batch(0);
        assert!(matches!(
            grad_check(&state, &batch, &Objective::CrossEntropy, 0.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn linear_softmax_closed_form_validates_the_fd_oracle() {
        // Independent sanity check of the finite-difference machinery against
        // the closed-form softmax cross-entropy gradient dL/dW = (p − y) xᵀ.
        let rows = 6;
        let cols = 4;
        let mut w: Vec<f64> = (0..rows * cols).map(|i| ((i as f64) * 0.37).sin() * 0.5).collect();
        let x: Vec<f64> = (0..cols).map(|i| ((i as f64) * 1.3).cos()).collect();
        let target = 2usize;
        let loss = |w: &[f64]| -> f64 {
            let z = matvec(w, &x, rows, cols);
            -log_softmax_slice(&z)[target]
        };
        let z = matvec(&w, &x, rows, cols);
        let p = softmax_slice(&z);
        let mut max_rel: f64 = 0.0;
        for r in 0..rows {
            for c in 0..cols {
                let analytic = (p[r] - if r == target { 1.0 } else { 0.0 }) * x[c];
                let idx = r * cols + c;
                let orig = w[idx];
                w[idx] = orig + 1e-6;
                let plus = loss(&w);
                w[idx] = orig - 1e-6;
                let minus = loss(&w);
                w[idx] = orig;
                let fd = (plus - minus) / 2e-6;
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-5);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel <= 1e-6, "closed-form vs FD: {max_rel}");
    }

    #[test]
    fn hp_loss_is_zero_when_target_is_already_buried() {
        // Construct logits where the target is far below the top-k by more
        // than the margin at every probed layer.
        let state = small_state(21);
        let batch = vec![BatchItem {
            image: vec![0.0; 8],
            question: vec![Token(9), Token(10)],
            target: Token(31),
        }];
        // With a tiny margin and large k the hinge can still be active, so
        // check the constructed-logit path directly.
        let logits: Vec<f64> = (0..8).map(|i| if i == 7 { -50.0 } else { i as f64 }).collect();
        let (loss, grads) = objective_at_logits(
            &Objective::HeadProjection {
                layers: vec![1],
                top_k: 3,
                margin: 0.1,
            },
            Token(7),
            &[(0, logits)],
        );
        assert_eq!(loss, 0.0);
        assert!(grads[0].1.iter().all(|&g| g == 0.0));
        drop((state, batch));
    }

    #[test]
    fn max_entropy_loss_at_uniform_lens_is_minus_l_ln_v() {
        let mut state = small_state(2);
        let names: Vec<String> = state.trainable_names(TrainScope::All);
        for name in names {
            let shape = state.any_param(&name).shape().to_vec();
            *state.any_param_mut(&name) = Tensor::zeros(&shape);
        }
        let batch = vec![BatchItem {
            image: vec![0.0; 8],
            question: vec![Token(9), Token(10)],
            target: Token(12),
        }];
        let objective = Objective::MaxEntropy { layers: vec![1, 2] };
        let loss = objective_loss(&state, &batch, &objective).unwrap();
        assert!((loss - (-2.0 * 32f64.ln())).abs() < 1e-12);
    }
}
