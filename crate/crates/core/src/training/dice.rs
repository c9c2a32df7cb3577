use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `(2·Σ pred·gt + smooth) / (Σ pred + Σ gt + smooth)`.
pub fn soft_dice(pred: &Tensor, gt: &Tensor, smooth: f64) -> Result<f64> {
    same_shape("soft_dice", pred, gt)?;
    let inter: f64 = pred.data().iter().zip(gt.data()).map(|(p, g)| p * g).sum();
    Ok((2.0 * inter + smooth) / (pred.sum() + gt.sum() + smooth))
}

pub fn dice_loss(pred: &Tensor, gt: &Tensor, smooth: f64) -> Result<f64> {
    Ok(1.0 - soft_dice(pred, gt, smooth)?)
}

/// [`dice_loss`] on a graph node of probabilities.
pub fn dice_loss_graph(g: &mut Graph, pred: Var, gt: &Tensor, smooth: f64) -> Result<Var> {
    if g.shape(pred) != gt.shape() {
        return Err(Error::shape("dice_loss", format!("{:?} vs {:?}", g.shape(pred), gt.shape())));
    }
    let overlap = g.mul_const(pred, gt)?;
    let inter = g.sum(overlap)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, smooth)?;
    let total = g.sum(pred)?;
    let den = g.add_scalar(total, gt.sum() + smooth)?;
    let dice = g.div(num, den)?;
    let neg = g.scale(dice, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// `2|A∩B| / (|A| + |B|)` on boolean pixel sets; 1 when both are empty.
pub fn set_dice(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Probability at or above which a pixel counts as foreground.
pub const THRESHOLD: f64 = 0.5;

pub fn binarize(t: &Tensor, threshold: f64) -> Vec<bool> {
    t.data().iter().map(|&v| v >= threshold).collect()
}

/// Dice of the thresholded prediction against a binary mask.
pub fn hard_dice(pred: &Tensor, gt: &Tensor, threshold: f64) -> Result<f64> {
    same_shape("hard_dice", pred, gt)?;
    Ok(set_dice(&binarize(pred, threshold), &binarize(gt, 0.5)))
}
