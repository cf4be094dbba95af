//! The transformer lifting head.
//!
//! Every block runs three stages in order:
//!
//! 1. 2D encoder: `a = MHA(e2d, e2d, e2d)`, `b = relu(LN(a + e2d))`, `e2d' = FFN(b)`
//! 2. template encoder: `a = MHA(e3d, e3d, e3d)`, `t = relu(LN(a + e3d))` (no FFN)
//! 3. decoder: `a = MHA(t, e2d', e2d')`, `b = relu(LN(a + t))`, `e3d' = FFN(b)`
//!
//! `e3d` for the first block is the assembled template matrix; later blocks
//! take the previous decoder output. There is no residual around the FFNs.

use rand::Rng;

use crate::error::{LiftError, Result};
use crate::nn::{
    feed_forward, multi_head_attention, Binder, FfnParams, ForwardCtx, Init, Initializer,
    LayerNormParams, LinearParams, MhaParams, ParamSink,
};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Template type rows inside `type_emb`.
pub const TYPE_KEYPOINT: usize = 0;
pub const TYPE_TWIST: usize = 1;
pub const TYPE_SHAPE: usize = 2;

/// Divisor used inside the attention softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionScale {
    /// `sqrt(d)`, the model width.
    ModelWidth,
    /// `sqrt(d / h)`, the per-head width.
    HeadWidth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub n_patches: usize,
    pub c_in: usize,
    pub dropout: f64,
    pub n_joints: usize,
    pub n_twists: usize,
    pub beta_dim: usize,
    pub attention_scale: AttentionScale,
    pub ln_eps: f64,
    /// Guard for twist normalization during training.
    pub twist_eps: f64,
    /// Twist template `j` uses joint embedding `j + twist_joint_offset`.
    pub twist_joint_offset: usize,
    /// Joint embedding that anchors the shape template.
    pub shape_anchor_joint: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl HeadConfig {
    /// L=6, h=8, d=512 over an 8×8 grid of 512-channel backbone features.
    pub fn paper() -> Self {
        Self {
            layers: 6,
            heads: 8,
            width: 512,
            n_patches: 64,
            c_in: 512,
            dropout: 0.1,
            n_joints: 24,
            n_twists: 23,
            beta_dim: 10,
            attention_scale: AttentionScale::ModelWidth,
            ln_eps: 1e-5,
            twist_eps: 1e-8,
            twist_joint_offset: 1,
            shape_anchor_joint: 0,
        }
    }

    /// L=2, h=2, d=32 over a 4×4 grid of 32 channels, without dropout.
    /// Meant for fast runs that should fit a small set closely.
    pub fn tiny() -> Self {
        Self {
            layers: 2,
            heads: 2,
            width: 32,
            n_patches: 16,
            c_in: 32,
            dropout: 0.0,
            ..Self::paper()
        }
    }

    /// Number of template rows: keypoints, then twists, then one shape row.
    pub fn n_queries(&self) -> usize {
        self.n_joints + self.n_twists + 1
    }

    pub fn scale_dim(&self) -> usize {
        match self.attention_scale {
            AttentionScale::ModelWidth => self.width,
            AttentionScale::HeadWidth => self.width / self.heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("width", self.width),
            ("n_patches", self.n_patches),
            ("c_in", self.c_in),
            ("n_joints", self.n_joints),
            ("n_twists", self.n_twists),
            ("beta_dim", self.beta_dim),
        ] {
            if v == 0 {
                return Err(LiftError::config(field, "must be positive"));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(LiftError::config(
                "heads",
                format!("width {} is not divisible by {} heads", self.width, self.heads),
            ));
        }
        if self.width < 2 {
            return Err(LiftError::config("width", "layer norm needs width >= 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LiftError::config("dropout", format!("{} is outside [0, 1)", self.dropout)));
        }
        if self.twist_joint_offset + self.n_twists > self.n_joints {
            return Err(LiftError::config(
                "twist_joint_offset",
                "twist templates would index past the last joint",
            ));
        }
        if self.shape_anchor_joint >= self.n_joints {
            return Err(LiftError::config("shape_anchor_joint", "not a joint index"));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 || self.twist_eps.is_nan() || self.twist_eps <= 0.0 {
            return Err(LiftError::config("ln_eps", "epsilons must be positive"));
        }
        Ok(())
    }

    /// `(joint row, type row)` for every template row, in output order.
    pub fn template_rows(&self) -> Vec<(usize, usize)> {
        let mut rows = Vec::with_capacity(self.n_queries());
        rows.extend((0..self.n_joints).map(|j| (j, TYPE_KEYPOINT)));
        rows.extend((0..self.n_twists).map(|j| (j + self.twist_joint_offset, TYPE_TWIST)));
        rows.push((self.shape_anchor_joint, TYPE_SHAPE));
        rows
    }
}

/// Learnable inputs of the head: embeddings, position encodings and the
/// backbone-feature projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    pub joint_emb: ParamId,
    pub type_emb: ParamId,
    pub pos_enc: ParamId,
    pub input_proj: LinearParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub mha_2d: MhaParams,
    pub ln_2d: LayerNormParams,
    pub ffn_2d: FfnParams,
    pub mha_3d: MhaParams,
    pub ln_3d: LayerNormParams,
    pub mha_cross: MhaParams,
    pub ln_cross: LayerNormParams,
    pub ffn_3d: FfnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputProjections {
    pub keypoint: LinearParams,
    pub twist: LinearParams,
    pub beta: LinearParams,
}

/// Concrete pose quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseOutput<T: Scalar> {
    /// `n_joints × 3`
    pub keypoints: Tensor<T>,
    /// `n_twists × 2`, rows are `(cos φ, sin φ)`
    pub twists: Tensor<T>,
    /// `beta_dim`
    pub beta: Tensor<T>,
}

impl<T: Scalar> PoseOutput<T> {
    pub fn flat_len(&self) -> usize {
        self.keypoints.numel() + self.twists.numel() + self.beta.numel()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.keypoints.to_f64_vec();
        v.extend(self.twists.to_f64_vec());
        v.extend(self.beta.to_f64_vec());
        v
    }

    /// Inverse of [`flatten`](Self::flatten) for the given group sizes.
    pub fn from_flat(flat: &[f64], n_joints: usize, n_twists: usize, beta_dim: usize) -> Result<Self> {
        let (nk, nt) = (n_joints * 3, n_twists * 2);
        if flat.len() != nk + nt + beta_dim {
            return Err(LiftError::InvalidTensor(format!(
                "flat pose needs {} values, got {}",
                nk + nt + beta_dim,
                flat.len()
            )));
        }
        let conv = |s: &[f64]| s.iter().map(|&v| T::from_f64_lossy(v)).collect::<Vec<_>>();
        Ok(Self {
            keypoints: Tensor::from_vec(&[n_joints, 3], conv(&flat[..nk]))?,
            twists: Tensor::from_vec(&[n_twists, 2], conv(&flat[nk..nk + nt]))?,
            beta: Tensor::from_vec(&[beta_dim], conv(&flat[nk + nt..]))?,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.keypoints.is_finite() && self.twists.is_finite() && self.beta.is_finite()
    }

    pub fn cast<U: Scalar>(&self) -> PoseOutput<U> {
        PoseOutput {
            keypoints: self.keypoints.cast(),
            twists: self.twists.cast(),
            beta: self.beta.cast(),
        }
    }
}

/// Pose outputs still living on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PoseVars {
    pub keypoints: Var,
    pub twists: Var,
    /// Shape `1 × beta_dim`.
    pub beta: Var,
}

impl PoseVars {
    pub fn extract<T: Scalar>(&self, tape: &Tape<'_, T>) -> PoseOutput<T> {
        let beta = tape.value(self.beta).clone();
        let n = beta.numel();
        PoseOutput {
            keypoints: tape.value(self.keypoints).clone(),
            twists: tape.value(self.twists).clone(),
            beta: beta.reshape(&[n]).expect("same numel"),
        }
    }
}

/// Intermediate handles of a forward pass.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    /// Final decoder output `e_L`, `n_queries × d`.
    pub e_last: Var,
    pub pose: PoseVars,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftingHead {
    cfg: HeadConfig,
    pub templates: Templates,
    pub blocks: Vec<BlockParams>,
    pub outputs: OutputProjections,
}

impl LiftingHead {
    pub fn declare(cfg: &HeadConfig, sink: &mut dyn ParamSink) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let emb_init = Init::Normal { std: 0.02 };
        let templates = Templates {
            input_proj: LinearParams::declare(sink, "input_proj", cfg.c_in, d)?,
            pos_enc: sink.declare("pos_enc".into(), &[cfg.n_patches, d], emb_init)?,
            joint_emb: sink.declare("joint_emb".into(), &[cfg.n_joints, d], emb_init)?,
            type_emb: sink.declare("type_emb".into(), &[3, d], emb_init)?,
        };
        let scale = cfg.scale_dim();
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("block{l}");
                Ok(BlockParams {
                    mha_2d: MhaParams::declare(sink, &format!("{p}.mha_2d"), d, cfg.heads, scale)?,
                    ln_2d: LayerNormParams::declare(sink, &format!("{p}.ln_2d"), d, cfg.ln_eps)?,
                    ffn_2d: FfnParams::declare(sink, &format!("{p}.ffn_2d"), d)?,
                    mha_3d: MhaParams::declare(sink, &format!("{p}.mha_3d"), d, cfg.heads, scale)?,
                    ln_3d: LayerNormParams::declare(sink, &format!("{p}.ln_3d"), d, cfg.ln_eps)?,
                    mha_cross: MhaParams::declare(sink, &format!("{p}.mha_cross"), d, cfg.heads, scale)?,
                    ln_cross: LayerNormParams::declare(sink, &format!("{p}.ln_cross"), d, cfg.ln_eps)?,
                    ffn_3d: FfnParams::declare(sink, &format!("{p}.ffn_3d"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let outputs = OutputProjections {
            keypoint: LinearParams::declare(sink, "proj_keypoint", d, 3)?,
            twist: LinearParams::declare(sink, "proj_twist", d, 2)?,
            beta: LinearParams::declare(sink, "proj_beta", d, cfg.beta_dim)?,
        };
        Ok(Self {
            cfg: cfg.clone(),
            templates,
            blocks,
            outputs,
        })
    }

    /// Builds the head with freshly initialized parameters.
    pub fn init<T: Scalar, R: Rng + ?Sized>(cfg: &HeadConfig, rng: &mut R) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let head = Self::declare(cfg, &mut Initializer { store: &mut store, rng })?;
        Ok((head, store))
    }

    /// Resolves the head layout against an existing parameter set.
    pub fn bind<T: Scalar>(cfg: &HeadConfig, store: &ParamStore<T>) -> Result<Self> {
        let head = Self::declare(cfg, &mut Binder { store })?;
        let mut counter = Counter::default();
        Self::declare(cfg, &mut counter)?;
        if store.len() != counter.count {
            return Err(LiftError::StructureMismatch(format!(
                "store holds {} tensors, head declares {}",
                store.len(),
                counter.count
            )));
        }
        Ok(head)
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    /// `e₀²ᵈ = features·W_in + b_in + pos_enc`. With `patch_rows`, only
    /// those patches are present in `features` and the matching position
    /// encodings are selected.
    pub fn embed_source<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        features: Var,
        patch_rows: Option<&[usize]>,
    ) -> Result<Var> {
        let expected_rows = patch_rows.map_or(self.cfg.n_patches, <[usize]>::len);
        if tape.shape(features) != [expected_rows, self.cfg.c_in] {
            return Err(LiftError::shape(
                "embed_source",
                tape.shape(features),
                &[expected_rows, self.cfg.c_in],
            ));
        }
        let proj = self.templates.input_proj.forward(tape, features)?;
        let mut pos = tape.param(self.templates.pos_enc);
        if let Some(rows) = patch_rows {
            pos = tape.gather_rows(pos, rows)?;
        }
        tape.add(proj, pos)
    }

    /// Template matrix `e₀³ᵈ`: each row is a joint embedding plus a type embedding.
    pub fn assemble_templates<T: Scalar>(&self, tape: &mut Tape<'_, T>) -> Result<Var> {
        let (joints, types): (Vec<usize>, Vec<usize>) = self.cfg.template_rows().into_iter().unzip();
        let je = tape.param(self.templates.joint_emb);
        let te = tape.param(self.templates.type_emb);
        let j = tape.gather_rows(je, &joints)?;
        let t = tape.gather_rows(te, &types)?;
        tape.add(j, t)
    }

    pub fn encode_2d_block<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        block: &BlockParams,
        e_prev: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let a = multi_head_attention(tape, &block.mha_2d, e_prev, e_prev, e_prev)?;
        let a = ctx.dropout(tape, a)?;
        let r = tape.add(a, e_prev)?;
        let n = block.ln_2d.forward(tape, r)?;
        let b = tape.relu(n);
        feed_forward(tape, &block.ffn_2d, b, ctx)
    }

    pub fn encode_templates_block<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        block: &BlockParams,
        e_prev_3d: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let a = multi_head_attention(tape, &block.mha_3d, e_prev_3d, e_prev_3d, e_prev_3d)?;
        let a = ctx.dropout(tape, a)?;
        let r = tape.add(a, e_prev_3d)?;
        let n = block.ln_3d.forward(tape, r)?;
        Ok(tape.relu(n))
    }

    /// Cross-attention from the encoded templates to the same block's 2D encoding.
    pub fn decode_block<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        block: &BlockParams,
        e_3d_t: Var,
        e_2d: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let a = multi_head_attention(tape, &block.mha_cross, e_3d_t, e_2d, e_2d)?;
        let a = ctx.dropout(tape, a)?;
        let r = tape.add(a, e_3d_t)?;
        let n = block.ln_cross.forward(tape, r)?;
        let b = tape.relu(n);
        feed_forward(tape, &block.ffn_3d, b, ctx)
    }

    /// Row-wise output projections. Twist pairs are L2-normalized; in eval
    /// mode a pair with norm below `twist_eps` is an error.
    pub fn project_outputs<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        e_last: Var,
        ctx: &ForwardCtx<'_>,
    ) -> Result<PoseVars> {
        let (nj, nt) = (self.cfg.n_joints, self.cfg.n_twists);
        if tape.shape(e_last) != [self.cfg.n_queries(), self.cfg.width] {
            return Err(LiftError::shape(
                "project_outputs",
                tape.shape(e_last),
                &[self.cfg.n_queries(), self.cfg.width],
            ));
        }
        let kp_rows = tape.slice_rows(e_last, 0, nj)?;
        let keypoints = self.outputs.keypoint.forward(tape, kp_rows)?;

        let tw_rows = tape.slice_rows(e_last, nj, nj + nt)?;
        let raw = self.outputs.twist.forward(tape, tw_rows)?;
        if !ctx.is_training() {
            for (row, pair) in tape.value(raw).data().chunks(2).enumerate() {
                let norm = pair.iter().map(|v| v.to_f64_lossless().powi(2)).sum::<f64>().sqrt();
                if norm < self.cfg.twist_eps {
                    return Err(LiftError::DegenerateTwist { row, norm });
                }
            }
        }
        let twists = tape.normalize_rows(raw, T::from_f64_lossy(self.cfg.twist_eps))?;

        let shape_row = tape.slice_rows(e_last, nj + nt, nj + nt + 1)?;
        let beta = self.outputs.beta.forward(tape, shape_row)?;
        Ok(PoseVars {
            keypoints,
            twists,
            beta,
        })
    }

    /// Full forward pass. `features` holds `n_patches` rows, or only the
    /// rows listed in `patch_rows` when a subset is passed.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        features: Var,
        patch_rows: Option<&[usize]>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<HeadTrace> {
        let mut e_2d = self.embed_source(tape, features, patch_rows)?;
        let mut e_3d = self.assemble_templates(tape)?;
        for block in &self.blocks {
            e_2d = self.encode_2d_block(tape, block, e_2d, ctx)?;
            let t = self.encode_templates_block(tape, block, e_3d, ctx)?;
            e_3d = self.decode_block(tape, block, t, e_2d, ctx)?;
        }
        let pose = self.project_outputs(tape, e_3d, ctx)?;
        Ok(HeadTrace { e_last: e_3d, pose })
    }

    /// Eval-mode prediction over all patches.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, features: &Tensor<T>) -> Result<PoseOutput<T>> {
        let mut tape = Tape::with_params(store);
        let x = tape.leaf(features.clone());
        let trace = self.forward(&mut tape, x, None, &mut ForwardCtx::eval())?;
        Ok(trace.pose.extract(&tape))
    }
}

#[derive(Default)]
struct Counter {
    count: usize,
}

impl ParamSink for Counter {
    fn declare(&mut self, _name: String, _shape: &[usize], _init: Init) -> Result<ParamId> {
        self.count += 1;
        Ok(ParamId(self.count - 1))
    }
}
