//! Patch embedding, multi-head self/cross attention, standard and adaptive
//! layer normalization, and the conditioning MLP that regresses per-site
//! (scale, shift, gate) triples.

use std::sync::Arc;

use rand::Rng;

use crate::camera::ConditioningVector;
use crate::tensor::{ParamGroup, ParamId, ParamStore, Scalar, Session, TensorId};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// y = x W + b with W stored [in, out].
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Linear {
        Linear {
            w: store.normal(&format!("{name}.w"), &[d_in, d_out], INIT_STD, group, rng),
            b: store.zeros(&format!("{name}.b"), &[d_out], group),
        }
    }

    /// Same layout with explicitly zero weights (used for gate-regressing heads).
    pub fn new_zero<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        group: ParamGroup,
    ) -> Linear {
        Linear {
            w: store.zeros(&format!("{name}.w"), &[d_in, d_out], group),
            b: store.zeros(&format!("{name}.b"), &[d_out], group),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        sess: &mut Session<T>,
        x: TensorId,
    ) -> TensorId {
        let w = sess.param(store, self.w);
        let b = sess.param(store, self.b);
        let y = sess.tape.matmul(x, w);
        sess.tape.add_row(y, b)
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

/// Parameter-free token normalization: per token, subtract the mean and
/// divide by the population standard deviation over the embedding axis.
pub fn normalize_tokens<T: Scalar>(sess: &mut Session<T>, x: TensorId) -> TensorId {
    let tape = &mut sess.tape;
    let mean = tape.mean_axis(x, 1);
    let neg_mean = tape.neg(mean);
    let centered = tape.add_col(x, neg_mean);
    let sq = tape.mul(centered, centered);
    let var = tape.mean_axis(sq, 1);
    let var_eps = tape.add_scalar(var, LN_EPS);
    let std = tape.sqrt(var_eps);
    let inv = tape.recip(std);
    tape.mul_col(centered, inv)
}

/// Standard layer normalization with learned affine parameters.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, group: ParamGroup) -> LayerNorm {
        let scale = store.add(
            &format!("{name}.scale"),
            &[dim],
            vec![T::one(); dim],
            group,
        );
        let shift = store.zeros(&format!("{name}.shift"), &[dim], group);
        LayerNorm { scale, shift }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, sess: &mut Session<T>, x: TensorId) -> TensorId {
        let normed = normalize_tokens(sess, x);
        let scale = sess.param(store, self.scale);
        let shift = sess.param(store, self.shift);
        let scaled = sess.tape.mul_row(normed, scale);
        sess.tape.add_row(scaled, shift)
    }
}

/// One (scale, shift, gate) triple regressed for a normalization site,
/// living on the tape of the current pass.
#[derive(Clone, Copy, Debug)]
pub struct AdaLnParams {
    pub alpha: TensorId,
    pub delta: TensorId,
    pub gamma: TensorId,
}

/// delta + alpha * Norm(x), with a parameter-free norm (alpha and delta
/// subsume the affine role).
pub fn adaptive_layer_norm<T: Scalar>(sess: &mut Session<T>, x: TensorId, p: &AdaLnParams) -> TensorId {
    let normed = normalize_tokens(sess, x);
    let scaled = sess.tape.mul_row(normed, p.alpha);
    sess.tape.add_row(scaled, p.delta)
}

/// The conditioning MLP: 18 -> hidden -> 3*e per site, emitting one
/// (alpha, delta, gamma) triple per normalization site. The final layer
/// starts at zero weights with bias (1, 0, 0) per site, so every block
/// begins as a plain pre-norm block with zero gate.
#[derive(Clone, Debug)]
pub struct AdaLnMlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub embed: usize,
    pub sites: usize,
}

impl AdaLnMlp {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        embed: usize,
        hidden: usize,
        sites: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> AdaLnMlp {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), crate::camera::CONDITIONING_DIM, hidden, group, rng);
        let fc2 = Linear::new_zero(store, &format!("{name}.fc2"), hidden, 3 * embed * sites, group);
        {
            // alpha = 1 (unit norm scale); the shift and the residual gates
            // start at zero, so every block begins as the identity.
            let bias = store.get_mut(fc2.b);
            for s in 0..sites {
                for j in 0..embed {
                    bias.data[s * 3 * embed + j] = T::one();
                }
            }
        }
        AdaLnMlp { fc1, fc2, embed, sites }
    }

    /// Regress all per-site triples for one conditioning vector.
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        sess: &mut Session<T>,
        cond: &ConditioningVector,
    ) -> Vec<AdaLnParams> {
        let data: Vec<T> = cond.as_slice().iter().map(|&v| T::from_f64(v)).collect();
        let c = sess.tape.constant(&[1, data.len()], data);
        let h = self.fc1.forward(store, sess, c);
        let act = silu(sess, h);
        let out = self.fc2.forward(store, sess, act);
        let e = self.embed;
        (0..self.sites)
            .map(|s| {
                let mut part = |k: usize| {
                    let sl = sess.tape.slice_cols(out, (s * 3 + k) * e, e);
                    sess.tape.reshape(sl, &[e])
                };
                AdaLnParams { alpha: part(0), delta: part(1), gamma: part(2) }
            })
            .collect()
    }

    pub fn param_count(embed: usize, hidden: usize, sites: usize) -> usize {
        Linear::param_count(crate::camera::CONDITIONING_DIM, hidden)
            + Linear::param_count(hidden, 3 * embed * sites)
    }
}

/// x * sigmoid(x), the smooth activation used in the MLPs.
pub fn silu<T: Scalar>(sess: &mut Session<T>, x: TensorId) -> TensorId {
    let s = sess.tape.sigmoid(x);
    sess.tape.mul(x, s)
}

/// Multi-head attention with learned projections. Self-attention is the
/// special case `ctx == x`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub embed: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        embed: usize,
        heads: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> MultiHeadAttention {
        assert!(
            embed % heads == 0,
            "embedding dim {} not divisible by {} heads",
            embed,
            heads
        );
        MultiHeadAttention {
            wq: Linear::new(store, &format!("{name}.q"), embed, embed, group, rng),
            wk: Linear::new(store, &format!("{name}.k"), embed, embed, group, rng),
            wv: Linear::new(store, &format!("{name}.v"), embed, embed, group, rng),
            wo: Linear::new(store, &format!("{name}.o"), embed, embed, group, rng),
            heads,
            embed,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        sess: &mut Session<T>,
        queries: TensorId,
        keys_values: TensorId,
    ) -> TensorId {
        self.forward_with_weights(store, sess, queries, keys_values).0
    }

    /// Also returns the per-head attention weight matrices (rows sum to 1).
    pub fn forward_with_weights<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        sess: &mut Session<T>,
        queries: TensorId,
        keys_values: TensorId,
    ) -> (TensorId, Vec<TensorId>) {
        let q = self.wq.forward(store, sess, queries);
        let k = self.wk.forward(store, sess, keys_values);
        let v = self.wv.forward(store, sess, keys_values);
        let d = self.embed / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = sess.tape.slice_cols(q, h * d, d);
            let kh = sess.tape.slice_cols(k, h * d, d);
            let vh = sess.tape.slice_cols(v, h * d, d);
            let kt = sess.tape.transpose(kh);
            let scores = sess.tape.matmul(qh, kt);
            let scaled = sess.tape.mul_scalar(scores, scale);
            let attn = sess.tape.softmax(scaled, 1);
            weights.push(attn);
            head_outs.push(sess.tape.matmul(attn, vh));
        }
        let merged = sess.tape.concat(&head_outs, 1);
        (self.wo.forward(store, sess, merged), weights)
    }

    pub fn param_count(embed: usize) -> usize {
        4 * Linear::param_count(embed, embed)
    }
}

/// Two-layer MLP with expansion ratio 4 and smooth activation.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const MLP_RATIO: usize = 4;

impl FeedForward {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        embed: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> FeedForward {
        FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), embed, MLP_RATIO * embed, group, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), MLP_RATIO * embed, embed, group, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, sess: &mut Session<T>, x: TensorId) -> TensorId {
        let h = self.fc1.forward(store, sess, x);
        let a = silu(sess, h);
        self.fc2.forward(store, sess, a)
    }

    pub fn param_count(embed: usize) -> usize {
        Linear::param_count(embed, MLP_RATIO * embed) + Linear::param_count(MLP_RATIO * embed, embed)
    }
}

/// Pre-norm transformer block. Unconditioned blocks use learned layer norms
/// and plain residuals; conditioned blocks use adaptive normalization with
/// gated residuals, one (alpha, delta, gamma) triple per site in order
/// self-attention, [cross-attention,] MLP. Context tokens always go through
/// a standard learned layer norm.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: Option<MultiHeadAttention>,
    pub mlp: FeedForward,
    pub ln1: Option<LayerNorm>,
    pub ln2: Option<LayerNorm>,
    pub ln_ctx: Option<LayerNorm>,
    pub conditioned: bool,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        embed: usize,
        heads: usize,
        cross: bool,
        conditioned: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> TransformerBlock {
        let self_attn = MultiHeadAttention::new(store, &format!("{name}.self"), embed, heads, group, rng);
        let cross_attn = cross
            .then(|| MultiHeadAttention::new(store, &format!("{name}.cross"), embed, heads, group, rng));
        let mlp = FeedForward::new(store, &format!("{name}.mlp"), embed, group, rng);
        let (ln1, ln2) = if conditioned {
            (None, None)
        } else {
            (
                Some(LayerNorm::new(store, &format!("{name}.ln1"), embed, group)),
                Some(LayerNorm::new(store, &format!("{name}.ln2"), embed, group)),
            )
        };
        let ln_ctx = cross.then(|| LayerNorm::new(store, &format!("{name}.ln_ctx"), embed, group));
        TransformerBlock { self_attn, cross_attn, mlp, ln1, ln2, ln_ctx, conditioned }
    }

    /// Number of conditioning sites this block consumes.
    pub fn site_count(&self) -> usize {
        if self.conditioned {
            2 + usize::from(self.cross_attn.is_some())
        } else {
            0
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        sess: &mut Session<T>,
        x: TensorId,
        context: Option<TensorId>,
        adaln: Option<&[AdaLnParams]>,
    ) -> TensorId {
        assert_eq!(adaln.is_some(), self.conditioned, "conditioning mismatch for block");
        let mut x = x;
        let mut site = 0usize;
        let norm =
            |sess: &mut Session<T>, x: TensorId, ln: Option<&LayerNorm>, site: usize| match adaln {
                Some(ps) => adaptive_layer_norm(sess, x, &ps[site]),
                None => ln.expect("unconditioned block has learned norms").forward(store, sess, x),
            };

        // Self-attention.
        let normed = norm(sess, x, self.ln1.as_ref(), site);
        let attn = self.self_attn.forward(store, sess, normed, normed);
        x = self.residual(sess, x, attn, adaln, site);
        site += usize::from(self.conditioned);

        // Cross-attention against the (standard-normalized) context.
        if let Some(cross) = &self.cross_attn {
            let ctx = context.expect("cross block requires context tokens");
            let ctx_n = self.ln_ctx.as_ref().unwrap().forward(store, sess, ctx);
            let q = norm(sess, x, self.ln1.as_ref(), site);
            let attn = cross.forward(store, sess, q, ctx_n);
            x = self.residual(sess, x, attn, adaln, site);
            site += usize::from(self.conditioned);
        } else {
            assert!(context.is_none(), "context given to a block without cross-attention");
        }

        // MLP.
        let normed = norm(sess, x, self.ln2.as_ref(), site);
        let out = self.mlp.forward(store, sess, normed);
        self.residual(sess, x, out, adaln, site)
    }

    fn residual<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        x: TensorId,
        branch: TensorId,
        adaln: Option<&[AdaLnParams]>,
        site: usize,
    ) -> TensorId {
        let gated = match adaln {
            Some(ps) => sess.tape.mul_row(branch, ps[site].gamma),
            None => branch,
        };
        sess.tape.add(x, gated)
    }

    pub fn param_count(embed: usize, cross: bool, conditioned: bool) -> usize {
        let mut n = MultiHeadAttention::param_count(embed) + FeedForward::param_count(embed);
        if cross {
            n += MultiHeadAttention::param_count(embed) + 2 * embed; // ln_ctx
        }
        if !conditioned {
            n += 4 * embed; // ln1, ln2
        }
        n
    }
}

/// Flattened-pixel indices that cut an H x W x 3 image into non-overlapping
/// p x p patches in row-major patch order, pixels row-major within a patch,
/// channels innermost.
pub fn patchify_indices(h: usize, w: usize, p: usize) -> Vec<usize> {
    assert!(h % p == 0 && w % p == 0, "patch size {} does not divide image {}x{}", p, w, h);
    let mut idx = Vec::with_capacity(h * w * 3);
    for pr in 0..h / p {
        for pc in 0..w / p {
            for py in 0..p {
                for px in 0..p {
                    for c in 0..3 {
                        idx.push(((pr * p + py) * w + (pc * p + px)) * 3 + c);
                    }
                }
            }
        }
    }
    idx
}

/// Inverse permutation of `patchify_indices` (token layout back to pixels).
pub fn unpatchify_indices(h: usize, w: usize, p: usize) -> Vec<usize> {
    let fwd = patchify_indices(h, w, p);
    let mut inv = vec![0usize; fwd.len()];
    for (i, &j) in fwd.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Patch embedding: cut into patches and project each flattened patch to the
/// model width.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub h: usize,
    pub w: usize,
    pub p: usize,
    idx: Arc<Vec<usize>>,
}

impl PatchEmbed {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        h: usize,
        w: usize,
        p: usize,
        embed: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> PatchEmbed {
        let idx = Arc::new(patchify_indices(h, w, p));
        let proj = Linear::new(store, name, p * p * 3, embed, group, rng);
        PatchEmbed { proj, h, w, p, idx }
    }

    pub fn token_count(&self) -> usize {
        (self.h / self.p) * (self.w / self.p)
    }

    /// `image` is a flattened [h*w*3] tensor; returns [tokens, embed].
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, sess: &mut Session<T>, image: TensorId) -> TensorId {
        let patches = self.patches(sess, image);
        self.proj.forward(store, sess, patches)
    }

    /// Raw flattened patches [tokens, p*p*3] without the projection.
    pub fn patches<T: Scalar>(&self, sess: &mut Session<T>, image: TensorId) -> TensorId {
        let n = self.token_count();
        sess.tape.index_select(image, self.idx.clone(), &[n, self.p * self.p * 3])
    }
}
