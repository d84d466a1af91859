//! Masked-patch pretraining: mask a random subset of patches, encode the
//! visible ones, and reconstruct pixel values of the masked patches with a
//! small decoder, scoring L2 on the masked patches only.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::attention::{LayerNorm, Linear, TransformerBlock, INIT_STD};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Scalar, Session, TensorId};

use super::encoder::{sincos_pos_embed_2d, Encoder};

/// Number of masked patches for a given ratio: ceil(ratio * n).
pub fn masked_count(n: usize, mask_ratio: f64) -> usize {
    assert!((0.0..1.0).contains(&mask_ratio), "mask ratio {} outside [0, 1)", mask_ratio);
    (mask_ratio * n as f64).ceil() as usize
}

/// Split patch indices into (masked, visible) with a seeded shuffle. Both
/// halves are returned sorted.
pub fn choose_mask<R: Rng>(n: usize, mask_ratio: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let m = masked_count(n, mask_ratio);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut masked = idx[..m].to_vec();
    let mut visible = idx[m..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    (masked, visible)
}

/// The reconstruction head used only during pretraining: a narrow decoder
/// with a shared mask token and its own positional embeddings.
pub struct MaeHead {
    pub proj: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_ln: LayerNorm,
    pub out: Linear,
    pub dim: usize,
    pos: Vec<f64>,
}

impl MaeHead {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        enc_cfg: &super::EncoderConfig,
        depth: usize,
        rng: &mut R,
    ) -> MaeHead {
        let g = ParamGroup::DecoderRenderer;
        let e = enc_cfg.embed_dim;
        let dim = (e / 2).max(4);
        let proj = Linear::new(store, "mae.proj", e, dim, g, rng);
        let mask_token = store.normal("mae.mask_token", &[1, dim], INIT_STD, g, rng);
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(store, &format!("mae.block{i}"), dim, 2, false, false, g, rng))
            .collect();
        let final_ln = LayerNorm::new(store, "mae.final_ln", dim, g);
        let p = enc_cfg.patch_size;
        let out = Linear::new(store, "mae.out", dim, p * p * 3, g, rng);
        let gh = enc_cfg.image_height / p;
        let gw = enc_cfg.image_width / p;
        MaeHead { proj, mask_token, blocks, final_ln, out, dim, pos: sincos_pos_embed_2d(gh, gw, dim) }
    }
}

/// One masked-reconstruction loss evaluation. Returns a scalar loss tensor;
/// exactly zero (constant) when the mask is empty.
pub fn mae_pretrain_step<T: Scalar, R: Rng>(
    store: &ParamStore<T>,
    sess: &mut Session<T>,
    encoder: &Encoder,
    head: &MaeHead,
    image: TensorId,
    mask_ratio: f64,
    rng: &mut R,
) -> TensorId {
    let n = encoder.token_count();
    let (masked, visible) = choose_mask(n, mask_ratio, rng);
    if masked.is_empty() {
        return sess.tape.scalar(0.0);
    }
    let encoded = encoder.encode_rows(store, sess, image, &visible);
    let narrow = head.proj.forward(store, sess, encoded);
    // Assemble the full sequence: class row, then one row per patch taking
    // either its projected visible token or the shared mask token.
    let mask_row = sess.param(store, head.mask_token);
    let source = sess.tape.concat(&[narrow, mask_row], 0);
    let mut row_of = vec![1 + visible.len(); n]; // default: the mask token row
    for (j, &p) in visible.iter().enumerate() {
        row_of[p] = 1 + j;
    }
    let mut gather = Vec::with_capacity(n + 1);
    gather.push(0); // class
    gather.extend(row_of);
    let seq = sess.tape.gather_rows(source, Arc::new(gather));
    let d = head.dim;
    let mut pos_data = vec![T::zero(); d]; // class slot carries no position
    pos_data.extend(head.pos.iter().map(|&v| T::from_f64(v)));
    let pos = sess.tape.constant(&[n + 1, d], pos_data);
    let mut x = sess.tape.add(seq, pos);
    for block in &head.blocks {
        x = block.forward(store, sess, x, None, None);
    }
    let x = head.final_ln.forward(store, sess, x);
    let pred_all = head.out.forward(store, sess, x);
    let pred_patches = sess.tape.slice_rows(pred_all, 1, n);
    let masked_idx = Arc::new(masked);
    let pred = sess.tape.gather_rows(pred_patches, masked_idx.clone());
    let target_all = encoder.patch.patches(sess, image);
    let target = sess.tape.gather_rows(target_all, masked_idx);
    let neg_t = sess.tape.neg(target);
    let diff = sess.tape.add(pred, neg_t);
    let sq = sess.tape.mul(diff, diff);
    let total = sess.tape.sum_all(sq);
    let count = sess.tape.shape(sq).iter().product::<usize>();
    sess.tape.mul_scalar(total, 1.0 / count as f64)
}
