use crate::error::{LiftError, Result};
use crate::head::{PoseOutput, PoseVars};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub keypoint: f64,
    pub twist: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            keypoint: 1.0,
            twist: 1.0,
            beta: 1.0,
        }
    }
}

/// `w_kpt·mean|Δkeypoints| + w_twist·mean|Δtwists| + w_beta·mean(Δβ²)`
pub fn pose_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    pred: &PoseVars,
    target: &PoseOutput<T>,
    weights: &LossWeights,
) -> Result<Var> {
    let beta_shape = [1, target.beta.numel()];
    let kp_t = tape.leaf(target.keypoints.clone());
    let tw_t = tape.leaf(target.twists.clone());
    let be_t = tape.leaf(target.beta.clone().reshape(&beta_shape)?);

    let kp = group_loss(tape, pred.keypoints, kp_t, Penalty::Abs, "loss(keypoints)")?;
    let tw = group_loss(tape, pred.twists, tw_t, Penalty::Abs, "loss(twists)")?;
    let be = group_loss(tape, pred.beta, be_t, Penalty::Square, "loss(beta)")?;

    let kp = tape.scale(kp, T::from_f64_lossy(weights.keypoint));
    let tw = tape.scale(tw, T::from_f64_lossy(weights.twist));
    let be = tape.scale(be, T::from_f64_lossy(weights.beta));
    let partial = tape.add(kp, tw)?;
    tape.add(partial, be)
}

enum Penalty {
    Abs,
    Square,
}

fn group_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    pred: Var,
    target: Var,
    penalty: Penalty,
    op: &'static str,
) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(LiftError::shape(op, tape.shape(pred), tape.shape(target)));
    }
    let diff = tape.sub(pred, target)?;
    let e = match penalty {
        Penalty::Abs => tape.abs(diff),
        Penalty::Square => tape.square(diff),
    };
    Ok(tape.mean(e))
}

/// Loss between two concrete poses.
pub fn loss_value<T: Scalar>(pred: &PoseOutput<T>, target: &PoseOutput<T>, weights: &LossWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let beta_shape = [1, pred.beta.numel()];
    let vars = PoseVars {
        keypoints: tape.leaf(pred.keypoints.clone()),
        twists: tape.leaf(pred.twists.clone()),
        beta: tape.leaf(pred.beta.clone().reshape(&beta_shape)?),
    };
    let l = pose_loss(&mut tape, &vars, target, weights)?;
    Ok(tape.value(l).data()[0].to_f64_lossless())
}
