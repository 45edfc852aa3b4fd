//! Toy conditioned U-Net: a single-step latent-to-latent predictor.
//!
//! ```text
//! z ──in-proj+SiLU──► h0 ──(+ self-attn)──► h1 ──(+ cross-attn(prompt))──► h2 ──out-proj──► ẑ
//! ```
//!
//! Low-rank deltas are applied functionally at the eight attention projection
//! sites; base weights are never touched. The backward pass only produces
//! gradients for those deltas.

use crate::tensor::{softmax_rows, softmax_rows_backward, Mat};

/// Attention projection sites in canonical order.
pub const SITES: [&str; 8] = [
    "unet.self_attn.q",
    "unet.self_attn.k",
    "unet.self_attn.v",
    "unet.self_attn.out",
    "unet.cross_attn.q",
    "unet.cross_attn.k",
    "unet.cross_attn.v",
    "unet.cross_attn.out",
];

const SA_Q: usize = 0;
const SA_K: usize = 1;
const SA_V: usize = 2;
const SA_O: usize = 3;
const CA_Q: usize = 4;
const CA_K: usize = 5;
const CA_V: usize = 6;
const CA_O: usize = 7;

/// 64-bit copy of the base U-Net weights.
#[derive(Clone, Debug)]
pub(crate) struct UnetWeights {
    pub w_in: Mat,
    pub b_in: Vec<f64>,
    /// Projection weights indexed like [`SITES`], each `d_out × d_in`.
    pub proj: Vec<Mat>,
    pub w_out: Mat,
    pub b_out: Vec<f64>,
}

/// Low-rank factors of one site in 64-bit form.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    /// `r × d_in`
    pub a: Mat,
    /// `d_out × r`
    pub b: Mat,
    /// `α / r`
    pub scale: f64,
}

/// Per-site factors in [`SITES`] order; `None` means the bare base weight.
pub type SiteFactors = Vec<Option<LoraFactors>>;

/// Gradients of `A` and `B` for one site.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorGrads {
    pub a: Mat,
    pub b: Mat,
}

/// Result of applying a (possibly adapted) projection to a row batch.
struct Projected {
    y: Mat,
    /// `x · Aᵀ`, kept for the backward pass.
    xa: Option<Mat>,
}

fn project(x: &Mat, w: &Mat, lora: Option<&LoraFactors>) -> Projected {
    let mut y = x.matmul_t(w);
    match lora {
        None => Projected { y, xa: None },
        Some(f) => {
            let xa = x.matmul_t(&f.a);
            let delta = xa.matmul_t(&f.b);
            y.add_scaled(&delta, f.scale);
            Projected { y, xa: Some(xa) }
        }
    }
}

/// Backward of [`project`]: accumulates factor gradients and optionally returns `dx`.
fn project_backward(
    x: &Mat,
    w: &Mat,
    lora: Option<&LoraFactors>,
    xa: Option<&Mat>,
    dy: &Mat,
    grads: Option<&mut FactorGrads>,
    want_dx: bool,
) -> Option<Mat> {
    let mut dx = want_dx.then(|| dy.matmul(w));
    if let (Some(f), Some(xa)) = (lora, xa) {
        let dyb = dy.matmul(&f.b);
        if let Some(g) = grads {
            let mut db = dy.t_matmul(xa);
            db.scale(f.scale);
            g.b.add_assign(&db);
            let mut da = dyb.t_matmul(x);
            da.scale(f.scale);
            g.a.add_assign(&da);
        }
        if let Some(dx) = dx.as_mut() {
            dx.add_scaled(&dyb.matmul(&f.a), f.scale);
        }
    }
    dx
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

struct AttnCache {
    xq: Mat,
    xkv: Mat,
    q: Projected,
    k: Projected,
    v: Projected,
    probs: Mat,
    mixed: Mat,
    out_xa: Option<Mat>,
}

fn attention(xq: &Mat, xkv: &Mat, w: &[Mat], loras: &[Option<LoraFactors>], sites: [usize; 4]) -> (Mat, AttnCache) {
    let [sq, sk, sv, so] = sites;
    let q = project(xq, &w[sq], loras[sq].as_ref());
    let k = project(xkv, &w[sk], loras[sk].as_ref());
    let v = project(xkv, &w[sv], loras[sv].as_ref());
    let mut probs = q.y.matmul_t(&k.y);
    probs.scale(1.0 / (q.y.cols() as f64).sqrt());
    softmax_rows(&mut probs);
    let mixed = probs.matmul(&v.y);
    let o = project(&mixed, &w[so], loras[so].as_ref());
    let cache = AttnCache {
        xq: xq.clone(),
        xkv: xkv.clone(),
        q,
        k,
        v,
        probs,
        mixed,
        out_xa: o.xa,
    };
    (o.y, cache)
}

/// Backward through an attention block; returns `d xq` when requested.
fn attention_backward(
    cache: &AttnCache,
    dout: &Mat,
    w: &[Mat],
    loras: &[Option<LoraFactors>],
    grads: &mut [Option<FactorGrads>],
    sites: [usize; 4],
    want_dxq: bool,
) -> Option<Mat> {
    let [sq, sk, sv, so] = sites;
    let dmixed = project_backward(
        &cache.mixed,
        &w[so],
        loras[so].as_ref(),
        cache.out_xa.as_ref(),
        dout,
        grads[so].as_mut(),
        true,
    )
    .expect("dx requested");
    let dprobs = dmixed.matmul_t(&cache.v.y);
    let dv = cache.probs.t_matmul(&dmixed);
    let mut dscores = softmax_rows_backward(&cache.probs, &dprobs);
    dscores.scale(1.0 / (cache.q.y.cols() as f64).sqrt());
    let dq = dscores.matmul(&cache.k.y);
    let dk = dscores.t_matmul(&cache.q.y);

    project_backward(
        &cache.xkv,
        &w[sv],
        loras[sv].as_ref(),
        cache.v.xa.as_ref(),
        &dv,
        grads[sv].as_mut(),
        false,
    );
    project_backward(
        &cache.xkv,
        &w[sk],
        loras[sk].as_ref(),
        cache.k.xa.as_ref(),
        &dk,
        grads[sk].as_mut(),
        false,
    );
    project_backward(
        &cache.xq,
        &w[sq],
        loras[sq].as_ref(),
        cache.q.xa.as_ref(),
        &dq,
        grads[sq].as_mut(),
        want_dxq,
    )
}

/// Everything the backward pass needs from one forward evaluation.
pub(crate) struct ForwardCache {
    self_attn: AttnCache,
    cross_attn: AttnCache,
    pub(crate) hidden: Mat,
}

impl UnetWeights {
    /// Hidden features before the output projection, plus the backward cache.
    ///
    /// `z` is `tokens × C_z`, `prompt` is `L × d_t`.
    pub(crate) fn trunk(&self, z: &Mat, prompt: &Mat, loras: &[Option<LoraFactors>]) -> ForwardCache {
        let mut h0 = z.matmul_t(&self.w_in);
        h0.add_row_bias(&self.b_in);
        for v in h0.as_mut_slice() {
            *v = silu(*v);
        }
        let (sa, self_attn) = attention(&h0, &h0, &self.proj, loras, [SA_Q, SA_K, SA_V, SA_O]);
        let mut h1 = h0;
        h1.add_assign(&sa);
        let (ca, cross_attn) = attention(&h1, prompt, &self.proj, loras, [CA_Q, CA_K, CA_V, CA_O]);
        let mut hidden = h1;
        hidden.add_assign(&ca);
        ForwardCache {
            self_attn,
            cross_attn,
            hidden,
        }
    }

    /// One forward pass over a single sample.
    pub(crate) fn forward(&self, z: &Mat, prompt: &Mat, loras: &[Option<LoraFactors>]) -> (Mat, ForwardCache) {
        let cache = self.trunk(z, prompt, loras);
        let mut out = cache.hidden.matmul_t(&self.w_out);
        out.add_row_bias(&self.b_out);
        (out, cache)
    }

    /// Accumulates factor gradients for upstream gradient `dout` (`tokens × C_z`).
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        dout: &Mat,
        loras: &[Option<LoraFactors>],
        grads: &mut [Option<FactorGrads>],
    ) {
        debug_assert_eq!(cache.hidden.rows(), dout.rows());
        let dhidden = dout.matmul(&self.w_out);
        // hidden = h1 + CA(h1); h1 = h0 + SA(h0), and h0 has no factors upstream.
        let mut dh1 = attention_backward(
            &cache.cross_attn,
            &dhidden,
            &self.proj,
            loras,
            grads,
            [CA_Q, CA_K, CA_V, CA_O],
            true,
        )
        .expect("dx requested");
        dh1.add_assign(&dhidden);
        attention_backward(
            &cache.self_attn,
            &dh1,
            &self.proj,
            loras,
            grads,
            [SA_Q, SA_K, SA_V, SA_O],
            false,
        );
    }
}

/// Zeroed gradient buffers matching the factor layout.
pub(crate) fn zero_grads(loras: &[Option<LoraFactors>]) -> Vec<Option<FactorGrads>> {
    loras
        .iter()
        .map(|f| {
            f.as_ref().map(|f| FactorGrads {
                a: Mat::zeros(f.a.rows(), f.a.cols()),
                b: Mat::zeros(f.b.rows(), f.b.cols()),
            })
        })
        .collect()
}
