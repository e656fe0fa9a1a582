//! Frozen visual backbone: patch embedding, learned positions, and a small
//! stack of pre-norm transformer layers. Produces one token per image patch.

use image::RgbImage;
use ndarray::Array2;

use crate::blocks;
use crate::graph::{Graph, NodeId};
use crate::media::{resize_bilinear, Frame};
use crate::param::ParamStore;
use crate::scalar::{s, Scalar};

#[derive(Debug, Clone)]
pub struct BackboneCfg {
    pub image_size: u32,
    pub patch_size: u32,
    pub channel_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

pub struct VisionBackbone {
    pub cfg: BackboneCfg,
}

impl VisionBackbone {
    pub fn new(cfg: BackboneCfg) -> Self {
        assert!(
            cfg.patch_size > 0 && cfg.image_size.is_multiple_of(cfg.patch_size),
            "config validation guarantees divisibility"
        );
        VisionBackbone { cfg }
    }

    /// Tokens per frame: (image_size / patch_size)^2.
    pub fn token_count(&self) -> usize {
        let per_side = (self.cfg.image_size / self.cfg.patch_size) as usize;
        per_side * per_side
    }

    /// Registers the frozen backbone weights.
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let c = self.cfg.channel_dim;
        let patch_in = (self.cfg.patch_size * self.cfg.patch_size * 3) as usize;
        store.init_normal(
            "backbone.patch_embed",
            (patch_in, c),
            1.0 / (patch_in as f64).sqrt(),
            false,
        );
        store.init_normal("backbone.pos", (self.token_count(), c), 0.02, false);
        for l in 0..self.cfg.layers {
            blocks::init_ln(store, &format!("backbone.l{l}.ln1"), c, false);
            blocks::init_attn(store, &format!("backbone.l{l}.attn"), c, false);
            blocks::init_ln(store, &format!("backbone.l{l}.ln2"), c, false);
            blocks::init_ffn(store, &format!("backbone.l{l}.ffn"), c, c * self.cfg.ffn_mult, false);
        }
        blocks::init_ln(store, "backbone.ln_out", c, false);
    }

    /// Flattens an image into its patch matrix (tokens x patch pixels),
    /// resizing to the backbone input size first. Values are scaled to
    /// [0, 1]; patches are row-major, pixels row-major RGB within a patch.
    pub fn patch_matrix<T: Scalar>(&self, img: &RgbImage) -> Array2<T> {
        let side = self.cfg.image_size;
        let resized = if img.width() == side && img.height() == side {
            img.clone()
        } else {
            resize_bilinear(img, side, side)
        };
        let p = self.cfg.patch_size as usize;
        let per_side = (side / self.cfg.patch_size) as usize;
        let mut out = Array2::zeros((per_side * per_side, p * p * 3));
        for pr in 0..per_side {
            for pc in 0..per_side {
                let token = pr * per_side + pc;
                for dy in 0..p {
                    for dx in 0..p {
                        let px = resized.get_pixel((pc * p + dx) as u32, (pr * p + dy) as u32);
                        for ch in 0..3 {
                            out[[token, (dy * p + dx) * 3 + ch]] =
                                s::<T>(px[ch] as f64 / 255.0);
                        }
                    }
                }
            }
        }
        out
    }

    /// Encodes a frame on the graph: returns the visual token node (N x C).
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        frame: &Frame,
    ) -> NodeId {
        let patches = self.patch_matrix::<T>(&frame.pixels);
        let patch_node = g.constant(patches);
        self.encode_patches(g, store, patch_node)
    }

    /// Same as [`Self::encode`] starting from an existing patch-matrix node
    /// (lets callers cache the pixel work between steps).
    pub fn encode_patches<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        patch_node: NodeId,
    ) -> NodeId {
        let mut x = blocks::linear(g, store, patch_node, "backbone.patch_embed");
        let pos = g.param(store, "backbone.pos");
        x = g.add(x, pos);
        for l in 0..self.cfg.layers {
            let normed = blocks::ln(g, store, &format!("backbone.l{l}.ln1"), x);
            let attn = blocks::mha(
                g,
                store,
                &format!("backbone.l{l}.attn"),
                normed,
                normed,
                self.cfg.heads,
                None,
                true,
            );
            x = g.add(x, attn);
            let normed = blocks::ln(g, store, &format!("backbone.l{l}.ln2"), x);
            let f = blocks::ffn(g, store, &format!("backbone.l{l}.ffn"), normed);
            x = g.add(x, f);
        }
        blocks::ln(g, store, "backbone.ln_out", x)
    }

    /// Off-graph convenience: encode and return the values.
    pub fn encode_values<T: Scalar>(&self, store: &ParamStore<T>, frame: &Frame) -> Array2<T> {
        let mut g = Graph::new();
        let node = self.encode(&mut g, store, frame);
        g.value(node).clone()
    }
}
