//! Face-information mining: a shared self-attention trunk over the visual
//! tokens feeds two branches conditioned on the facial tokens. The global
//! branch cross-attends to all facial tokens and passes through a
//! feed-forward block; the local branch cross-attends within
//! landmark-derived action regions. The branch outputs are summed (the
//! local branch contributes its attention readout, without a second
//! residual, so zeroing both branch output projections reduces the whole
//! block to the shared trunk) and mean-pooled into one enhanced token.

use ndarray::Array2;

use crate::blocks;
use crate::graph::{Graph, NodeId};
use crate::param::ParamStore;
use crate::priors::LandmarkSet;
use crate::scalar::{s, Scalar};

#[derive(Debug, Clone)]
pub struct MiningCfg {
    pub channel_dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Keep the local (region-masked) branch.
    pub local_attention: bool,
}

pub struct FaceInfoMining {
    pub cfg: MiningCfg,
}

/// Attention masks for the local branch: one row of facial-token
/// memberships per action region.
#[derive(Debug, Clone)]
pub struct AuRegions {
    /// `token_masks[r][t]`: region r may attend facial token t.
    pub token_masks: Vec<Vec<bool>>,
    /// Regions whose landmarks mapped to no token; these fall back to the
    /// full face.
    pub fallback_regions: Vec<usize>,
}

impl AuRegions {
    pub fn region_count(&self) -> usize {
        self.token_masks.len()
    }

    /// Expands region `r` into an Lq x N^F attention mask.
    pub fn mask_matrix(&self, r: usize, query_rows: usize) -> Array2<bool> {
        let row = &self.token_masks[r];
        Array2::from_shape_fn((query_rows, row.len()), |(_, j)| row[j])
    }
}

/// Landmark index groups for the eight facial action regions, laid out for
/// the 68-landmark 4 x 17 grid: brows, inter-brow, eyes, nose, left cheek,
/// right cheek, mouth corners, chin.
pub fn default_landmark_groups() -> Vec<Vec<usize>> {
    let at = |row: usize, cols: std::ops::RangeInclusive<usize>| -> Vec<usize> {
        cols.map(|c| row * 17 + c).collect()
    };
    let join = |mut a: Vec<usize>, b: Vec<usize>| -> Vec<usize> {
        a.extend(b);
        a
    };
    vec![
        join(at(0, 2..=6), at(0, 10..=14)), // brows
        at(0, 7..=9),                       // inter-brow
        join(at(1, 2..=6), at(1, 10..=14)), // eyes
        join(at(1, 7..=9), at(2, 7..=9)),   // nose
        at(2, 0..=5),                       // left cheek
        at(2, 11..=16),                     // right cheek
        join(at(3, 3..=5), at(3, 11..=13)), // mouth corners
        at(3, 6..=10),                      // chin
    ]
}

/// Maps landmark groups onto the facial token grid. A landmark at (x, y) in
/// [0, 1]^2 belongs to the token cell containing it; a region's mask is the
/// union over its landmarks. Regions that end up empty (possible only with
/// degenerate custom groups) fall back to the full face and are reported.
pub fn au_regions_from_landmarks<T: Scalar>(
    landmarks: &LandmarkSet<T>,
    token_grid: (usize, usize),
    groups: &[Vec<usize>],
) -> AuRegions {
    let (rows, cols) = token_grid;
    let n_tokens = rows * cols;
    let token_of = |k: usize| -> Option<usize> {
        if k >= landmarks.len() || !landmarks.visibility[k] {
            return None;
        }
        let x = landmarks.points[[k, 0]].to_f64().unwrap().clamp(0.0, 1.0);
        let y = landmarks.points[[k, 1]].to_f64().unwrap().clamp(0.0, 1.0);
        let tr = ((y * rows as f64).floor() as usize).min(rows - 1);
        let tc = ((x * cols as f64).floor() as usize).min(cols - 1);
        Some(tr * cols + tc)
    };
    let mut token_masks = Vec::with_capacity(groups.len());
    let mut fallback_regions = Vec::new();
    for (r, group) in groups.iter().enumerate() {
        let mut mask = vec![false; n_tokens];
        let mut any = false;
        for &k in group {
            if let Some(t) = token_of(k) {
                mask[t] = true;
                any = true;
            }
        }
        if !any {
            mask = vec![true; n_tokens];
            fallback_regions.push(r);
        }
        token_masks.push(mask);
    }
    AuRegions {
        token_masks,
        fallback_regions,
    }
}

impl FaceInfoMining {
    pub fn new(cfg: MiningCfg) -> Self {
        FaceInfoMining { cfg }
    }

    /// Registers the trainable mining weights. The local and global
    /// branches have independent weights.
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let c = self.cfg.channel_dim;
        for part in ["sattn", "gf", "lf"] {
            blocks::init_ln(store, &format!("mine.{part}_ln"), c, true);
            blocks::init_attn(store, &format!("mine.{part}"), c, true);
        }
        blocks::init_ln(store, "mine.ffn_ln", c, true);
        blocks::init_ffn(store, "mine.ffn", c, c * self.cfg.ffn_mult, true);
    }

    /// Shared trunk: pre-norm self-attention with residual over the visual
    /// tokens.
    pub fn self_attn<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        visual: NodeId,
    ) -> NodeId {
        let normed = blocks::ln(g, store, "mine.sattn_ln", visual);
        let attn = blocks::mha(
            g,
            store,
            "mine.sattn",
            normed,
            normed,
            self.cfg.heads,
            None,
            true,
        );
        g.add(visual, attn)
    }

    /// Global branch: cross-attention from the trunk output into all facial
    /// tokens, with residual.
    pub fn global_face_attn<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        trunk: NodeId,
        facial: NodeId,
    ) -> NodeId {
        let readout = self.gf_readout(g, store, trunk, facial);
        g.add(trunk, readout)
    }

    fn gf_readout<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        trunk: NodeId,
        facial: NodeId,
    ) -> NodeId {
        let normed = blocks::ln(g, store, "mine.gf_ln", trunk);
        blocks::mha(
            g,
            store,
            "mine.gf",
            normed,
            facial,
            self.cfg.heads,
            None,
            true,
        )
    }

    /// Local branch as a standalone op: region-masked cross-attention
    /// readouts averaged over regions, with residual.
    pub fn local_face_attn<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        trunk: NodeId,
        facial: NodeId,
        regions: &AuRegions,
    ) -> NodeId {
        let readout = self.lf_readout(g, store, trunk, facial, regions);
        g.add(trunk, readout)
    }

    fn lf_readout<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        trunk: NodeId,
        facial: NodeId,
        regions: &AuRegions,
    ) -> NodeId {
        assert!(regions.region_count() > 0, "at least one action region");
        let rows = g.shape(trunk).0;
        let normed = blocks::ln(g, store, "mine.lf_ln", trunk);
        let mut acc: Option<NodeId> = None;
        for r in 0..regions.region_count() {
            let mask = regions.mask_matrix(r, rows);
            let part = blocks::mha(
                g,
                store,
                "mine.lf",
                normed,
                facial,
                self.cfg.heads,
                Some(&mask),
                true,
            );
            acc = Some(match acc {
                Some(a) => g.add(a, part),
                None => part,
            });
        }
        let total = acc.expect("non-empty region loop");
        g.scale(total, s::<T>(1.0 / regions.region_count() as f64))
    }

    /// Feed-forward block with pre-norm and residual.
    pub fn ffn_block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> NodeId {
        let normed = blocks::ln(g, store, "mine.ffn_ln", x);
        let f = blocks::ffn(g, store, "mine.ffn", normed);
        g.add(x, f)
    }

    /// Full mining pass: returns the enhanced token (1 x C).
    ///
    /// With facial tokens present the global branch (trunk -> global face
    /// attention -> feed-forward) is summed with the local branch readout;
    /// without them only the trunk and feed-forward remain.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        visual: NodeId,
        facial: Option<NodeId>,
        regions: Option<&AuRegions>,
    ) -> NodeId {
        let trunk = self.self_attn(g, store, visual);
        let combined = match facial {
            None => self.ffn_block(g, store, trunk),
            Some(f) => {
                let gf = self.global_face_attn(g, store, trunk, f);
                let branch1 = self.ffn_block(g, store, gf);
                if self.cfg.local_attention {
                    let regions = regions.expect("local attention requires regions");
                    let local = self.lf_readout(g, store, trunk, f, regions);
                    g.add(branch1, local)
                } else {
                    branch1
                }
            }
        };
        g.mean_rows(combined)
    }

    /// Baseline strategy: mean-pool the visual and facial tokens and stack
    /// them (2 x C). A missing facial side contributes zeros so the output
    /// shape is stable.
    pub fn pool_concat<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        visual: NodeId,
        facial: Option<NodeId>,
    ) -> NodeId {
        let v = g.mean_rows(visual);
        let f = match facial {
            Some(f) => g.mean_rows(f),
            None => g.constant(Array2::zeros((1, self.cfg.channel_dim))),
        };
        g.concat_rows(&[v, f])
    }
}
