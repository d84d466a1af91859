//! Camera-conditioned decoder: learned output tokens joined by the class
//! token, adaptive-layer-norm blocks with cross-attention to the feature
//! tokens, and linear heads that unpatchify the final tokens into the
//! vector-matrix field.

use std::sync::Arc;

use rand::Rng;

use crate::attention::{AdaLnMlp, LayerNorm, Linear, TransformerBlock, INIT_STD};
use crate::camera::ConditioningVector;
use crate::render::VMRepresentation;
use crate::tensor::{ParamGroup, ParamId, ParamStore, Scalar, Session, TensorId};

use super::DecoderConfig;

/// Flat source indices that rearrange the [g*g, q*q*k] matrix-head output
/// (g = R/q patch grid) into a row-major [R*R, k] matrix.
pub fn vm_matrix_indices(r: usize, q: usize, k: usize) -> Vec<usize> {
    let g = r / q;
    let mut idx = Vec::with_capacity(r * r * k);
    for a in 0..r {
        for b in 0..r {
            for c in 0..k {
                let token = (a / q) * g + b / q;
                let offset = ((a % q) * q + b % q) * k + c;
                idx.push(token * (q * q * k) + offset);
            }
        }
    }
    idx
}

/// Flat source indices that rearrange the [g, q*k] vector-head output into
/// an [R, k] vector.
pub fn vm_vector_indices(r: usize, q: usize, k: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(r * k);
    for i in 0..r {
        for c in 0..k {
            idx.push((i / q) * (q * k) + (i % q) * k + c);
        }
    }
    idx
}

pub struct Decoder {
    pub output_tokens: ParamId,
    pub pos_emb: ParamId,
    pub cond_mlp: AdaLnMlp,
    pub blocks: Vec<TransformerBlock>,
    pub final_ln: LayerNorm,
    pub matrix_head: Linear,
    pub vector_head: Linear,
    pub cfg: DecoderConfig,
    matrix_idx: Arc<Vec<usize>>,
    vector_idx: Arc<Vec<usize>>,
}

pub const ADALN_SITES_PER_BLOCK: usize = 3;

impl Decoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &DecoderConfig, rng: &mut R) -> Decoder {
        cfg.validate().expect("invalid decoder config");
        let g = ParamGroup::DecoderRenderer;
        let e = cfg.embed_dim;
        let n_out = cfg.output_token_count();
        let output_tokens = store.normal("decoder.output_tokens", &[n_out, e], INIT_STD, g, rng);
        let pos_emb = store.normal("decoder.pos_emb", &[n_out + 1, e], INIT_STD, g, rng);
        let cond_mlp = AdaLnMlp::new(
            store,
            "decoder.cond",
            e,
            e / 4,
            ADALN_SITES_PER_BLOCK * cfg.depth,
            g,
            rng,
        );
        let blocks = (0..cfg.depth)
            .map(|i| {
                TransformerBlock::new(store, &format!("decoder.block{i}"), e, cfg.heads, true, true, g, rng)
            })
            .collect();
        let final_ln = LayerNorm::new(store, "decoder.final_ln", e, g);
        let q = cfg.decoder_patch;
        let k = cfg.vm_channels;
        let matrix_head = Linear::new(store, "decoder.matrix_head", e, q * q * k, g, rng);
        let vector_head = Linear::new(store, "decoder.vector_head", e, q * k, g, rng);
        Decoder {
            output_tokens,
            pos_emb,
            cond_mlp,
            blocks,
            final_ln,
            matrix_head,
            vector_head,
            cfg: cfg.clone(),
            matrix_idx: Arc::new(vm_matrix_indices(cfg.vm_resolution, q, k)),
            vector_idx: Arc::new(vm_vector_indices(cfg.vm_resolution, q, k)),
        }
    }

    /// Decode feature tokens F and class token C under the camera
    /// conditioning vector into the VM field.
    pub fn decode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        sess: &mut Session<T>,
        f: TensorId,
        c: TensorId,
        cond: &ConditioningVector,
    ) -> VMRepresentation {
        let e = self.cfg.embed_dim;
        assert_eq!(sess.tape.shape(f)[1], e, "feature token width does not match decoder width {}", e);
        assert_eq!(sess.tape.shape(c), &[1, e], "class token must be a single row of width {}", e);
        let o = sess.param(store, self.output_tokens);
        let seq = sess.tape.concat(&[o, c], 0);
        let pos = sess.param(store, self.pos_emb);
        let mut x = sess.tape.add(seq, pos);
        let sites = self.cond_mlp.forward(store, sess, cond);
        for (i, block) in self.blocks.iter().enumerate() {
            let s = &sites[i * ADALN_SITES_PER_BLOCK..(i + 1) * ADALN_SITES_PER_BLOCK];
            x = block.forward(store, sess, x, Some(f), Some(s));
        }
        let x = self.final_ln.forward(store, sess, x);
        // The class slot is a global conduit only; drop it before reshaping.
        let spatial = sess.tape.slice_rows(x, 0, self.cfg.output_token_count());
        self.reshape_to_vm(store, sess, spatial)
    }

    /// Project spatial tokens through the matrix/vector heads and unpatchify
    /// into three R x R x k matrices and three R x k vectors, in the fixed
    /// order M_yz, M_zx, M_xy, V_x, V_y, V_z.
    pub fn reshape_to_vm<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        sess: &mut Session<T>,
        tokens: TensorId,
    ) -> VMRepresentation {
        let cfg = &self.cfg;
        let n_out = cfg.output_token_count();
        assert_eq!(
            sess.tape.shape(tokens)[0],
            n_out,
            "token count does not match the VM layout ({} expected)",
            n_out
        );
        let r = cfg.vm_resolution;
        let k = cfg.vm_channels;
        let g = r / cfg.decoder_patch;
        let n_mat = 3 * g * g;
        let m = std::array::from_fn(|axis| {
            let rows = sess.tape.slice_rows(tokens, axis * g * g, g * g);
            let head = self.matrix_head.forward(store, sess, rows);
            sess.tape.index_select(head, self.matrix_idx.clone(), &[r * r, k])
        });
        let v = std::array::from_fn(|axis| {
            let rows = sess.tape.slice_rows(tokens, n_mat + axis * g, g);
            let head = self.vector_head.forward(store, sess, rows);
            sess.tape.index_select(head, self.vector_idx.clone(), &[r, k])
        });
        VMRepresentation { v, m, resolution: r, channels: k }
    }
}
