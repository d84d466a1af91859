//! Image encoder: patch embedding, fixed 2-D sinusoidal positional
//! embeddings, a learned class token, and a stack of plain pre-norm
//! self-attention blocks.

use rand::Rng;

use crate::attention::{LayerNorm, PatchEmbed, TransformerBlock};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Scalar, Session, TensorId};

use super::EncoderConfig;

/// Fixed 2-D sinusoidal embeddings for a gh x gw token grid, row-major.
/// The first half of each embedding encodes the row, the second the column;
/// each half is interleaved sin/cos over a geometric frequency ladder.
pub fn sincos_pos_embed_2d(gh: usize, gw: usize, dim: usize) -> Vec<f64> {
    assert!(dim % 4 == 0, "positional embedding dim {} must be divisible by 4", dim);
    let half = dim / 2;
    let freq = |i: usize| 1.0 / 10000f64.powf(2.0 * (i / 2) as f64 / half as f64);
    let mut out = Vec::with_capacity(gh * gw * dim);
    for y in 0..gh {
        for x in 0..gw {
            for (axis_pos, _) in [(y, 0), (x, 1)] {
                for i in 0..half {
                    let v = axis_pos as f64 * freq(i);
                    out.push(if i % 2 == 0 { v.sin() } else { v.cos() });
                }
            }
        }
    }
    out
}

pub struct Encoder {
    pub patch: PatchEmbed,
    pub class_token: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_ln: LayerNorm,
    pub pos: Vec<f64>,
    pub cfg: EncoderConfig,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut R) -> Encoder {
        cfg.validate().expect("invalid encoder config");
        let g = ParamGroup::Encoder;
        let e = cfg.embed_dim;
        let patch = PatchEmbed::new(
            store,
            "encoder.patch",
            cfg.image_height,
            cfg.image_width,
            cfg.patch_size,
            e,
            g,
            rng,
        );
        let class_token = store.normal("encoder.class_token", &[1, e], crate::attention::INIT_STD, g, rng);
        let blocks = (0..cfg.depth)
            .map(|i| {
                TransformerBlock::new(store, &format!("encoder.block{i}"), e, cfg.heads, false, false, g, rng)
            })
            .collect();
        let final_ln = LayerNorm::new(store, "encoder.final_ln", e, g);
        let gh = cfg.image_height / cfg.patch_size;
        let gw = cfg.image_width / cfg.patch_size;
        let pos = sincos_pos_embed_2d(gh, gw, e);
        Encoder { patch, class_token, blocks, final_ln, pos, cfg: cfg.clone() }
    }

    fn pos_tensor<T: Scalar>(&self, sess: &mut Session<T>, rows: &[usize]) -> TensorId {
        let e = self.cfg.embed_dim;
        let data: Vec<T> = rows
            .iter()
            .flat_map(|&r| self.pos[r * e..(r + 1) * e].iter().map(|&v| T::from_f64(v)))
            .collect();
        sess.tape.constant(&[rows.len(), e], data)
    }

    /// Encode a full image (flattened [h*w*3] tensor) into feature tokens F
    /// and the class token C.
    pub fn encode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        sess: &mut Session<T>,
        image: TensorId,
    ) -> (TensorId, TensorId) {
        let n = self.patch.token_count();
        let all: Vec<usize> = (0..n).collect();
        let seq = self.encode_rows(store, sess, image, &all);
        let c = sess.tape.slice_rows(seq, 0, 1);
        let f = sess.tape.slice_rows(seq, 1, n);
        (f, c)
    }

    /// Encode only the listed patch rows (the visible set during masked
    /// pretraining). Returns [1 + rows, e] with the class token first.
    pub fn encode_rows<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        sess: &mut Session<T>,
        image: TensorId,
        rows: &[usize],
    ) -> TensorId {
        let expect = self.cfg.image_height * self.cfg.image_width * 3;
        assert_eq!(
            sess.tape.shape(image).iter().product::<usize>(),
            expect,
            "image does not match encoder size {}x{}",
            self.cfg.image_width,
            self.cfg.image_height
        );
        let tokens = self.patch.forward(store, sess, image);
        let picked = if rows.len() == self.patch.token_count() {
            tokens
        } else {
            sess.tape.gather_rows(tokens, std::sync::Arc::new(rows.to_vec()))
        };
        let pos = self.pos_tensor(sess, rows);
        let with_pos = sess.tape.add(picked, pos);
        let cls = sess.param(store, self.class_token);
        let mut x = sess.tape.concat(&[cls, with_pos], 0);
        for block in &self.blocks {
            x = block.forward(store, sess, x, None, None);
        }
        self.final_ln.forward(store, sess, x)
    }

    pub fn token_count(&self) -> usize {
        self.patch.token_count()
    }
}
