//! The four training objectives and their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Reduction, Tape, Var};

pub const RATIO_EPS: f64 = 1e-8;
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Graph regularization.
    pub alpha: f64,
    /// Cross-channel contrastive.
    pub beta: f64,
    /// Reconstruction.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.4,
            gamma: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Contract(format!("loss weight {name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mc: f64,
    pub l_gc: f64,
    pub l_ccc: f64,
    pub l_re: f64,
    pub l_total: f64,
}

/// How per-sample contrastive ratios are combined over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveReduction {
    /// Mean over samples with at least two views.
    #[default]
    Mean,
    /// Plain sum over those samples.
    Sum,
}

fn col(values: Vec<f64>) -> Matrix {
    let n = values.len();
    Matrix::new(n, 1, values).expect("finite column")
}

/// Row-wise cosine similarity of two already-normalized matrices (b × 1).
fn row_cos(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let prod = tape.mul(a, b)?;
    Ok(tape.reduce(prod, Reduction::SumRows))
}

/// Cross-channel contrastive loss.
///
/// For sample `i` with `k ≥ 2` available views:
///
/// ```text
/// neg = [2·Σ_{u,v} cos(s_u, o_v)² + Σ_{u≠v} cos(o_u, o_v)²] / (3k² − k)
/// pos =  Σ_{u≠v} (cos(s_u, s_v) + 1) / 2                    / (k² − k)
/// ```
///
/// and the sample contributes `neg / max(pos, 1e-8)`. Samples with fewer than
/// two views are skipped.
pub fn contrastive_loss(
    tape: &mut Tape,
    shared: &[Var],
    private: &[Var],
    w: &Matrix,
    reduction: ContrastiveReduction,
) -> Result<Var> {
    let m = shared.len();
    if m < 2 {
        return Err(Error::Contract(format!("contrastive loss needs at least 2 views, got {m}")));
    }
    if private.len() != m || w.cols() != m {
        return Err(Error::dim("contrastive_loss", (w.rows(), m), (private.len(), w.cols())));
    }
    let b = w.rows();
    let avail: Vec<f64> = (0..b).map(|i| w.row(i).iter().sum()).collect();
    let contributing = avail.iter().filter(|&&k| k >= 2.0).count();
    if contributing == 0 {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    // Pair weights W_iu·W_iv with the per-sample normalizer folded in.
    let pair = |u: usize, v: usize, factor: f64, norm: fn(f64) -> f64| {
        col((0..b)
            .map(|i| {
                let k = avail[i];
                if k < 2.0 {
                    0.0
                } else {
                    factor * w.get(i, u) * w.get(i, v) / norm(k)
                }
            })
            .collect())
    };
    let neg_norm: fn(f64) -> f64 = |k| 3.0 * k * k - k;
    let pos_norm: fn(f64) -> f64 = |k| k * k - k;

    let s_hat: Vec<Var> = shared.iter().map(|&s| tape.row_l2_normalize(s)).collect();
    let o_hat: Vec<Var> = private.iter().map(|&o| tape.row_l2_normalize(o)).collect();

    let mut neg: Option<Var> = None;
    let mut pos: Option<Var> = None;
    let push = |tape: &mut Tape, acc: &mut Option<Var>, term: Var| -> Result<()> {
        *acc = Some(match *acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
        Ok(())
    };
    for u in 0..m {
        for v in 0..m {
            let c = row_cos(tape, s_hat[u], o_hat[v])?;
            let c2 = tape.mul(c, c)?;
            let wv = tape.constant(pair(u, v, 2.0, neg_norm));
            let term = tape.scale_rows(c2, wv)?;
            push(tape, &mut neg, term)?;
        }
    }
    for u in 0..m {
        for v in u + 1..m {
            // Ordered pairs u≠v: each unordered pair counts twice.
            let c = row_cos(tape, o_hat[u], o_hat[v])?;
            let c2 = tape.mul(c, c)?;
            let wv = tape.constant(pair(u, v, 2.0, neg_norm));
            let term = tape.scale_rows(c2, wv)?;
            push(tape, &mut neg, term)?;

            let c = row_cos(tape, s_hat[u], s_hat[v])?;
            let one = tape.constant(Matrix::scalar(1.0));
            let shifted = tape.add(c, one)?;
            let half = tape.scale(shifted, 0.5);
            let wv = tape.constant(pair(u, v, 2.0, pos_norm));
            let term = tape.scale_rows(half, wv)?;
            push(tape, &mut pos, term)?;
        }
    }
    let (neg, pos) = (neg.unwrap(), pos.unwrap());
    let pos = tape.clamp_min(pos, RATIO_EPS);
    let ratio = tape.div(neg, pos)?;
    let scale = match reduction {
        ContrastiveReduction::Mean => 1.0 / contributing as f64,
        ContrastiveReduction::Sum => 1.0,
    };
    let keep = tape.constant(col(avail.iter().map(|&k| if k >= 2.0 { scale } else { 0.0 }).collect()));
    let kept = tape.scale_rows(ratio, keep)?;
    Ok(tape.sum(kept))
}

/// `(1/b)·Σ_v Σ_i (1/d_v)·‖X̄_i − X_i‖²·W_iv` against unmasked targets.
pub fn reconstruction_loss(tape: &mut Tape, recon: &[Var], targets: &[Matrix], w: &Matrix) -> Result<Var> {
    if recon.len() != targets.len() || w.cols() != targets.len() {
        return Err(Error::dim("reconstruction_loss", (recon.len(), 0), (targets.len(), w.cols())));
    }
    let b = w.rows();
    let mut total: Option<Var> = None;
    for (v, (&xr, x)) in recon.iter().zip(targets).enumerate() {
        if tape.shape(xr) != x.shape() || x.rows() != b {
            return Err(Error::dim("reconstruction_loss", tape.shape(xr), x.shape()));
        }
        let d = x.cols() as f64;
        let target = tape.constant(x.clone());
        let diff = tape.sub(xr, target)?;
        let sq = tape.mul(diff, diff)?;
        let per_row = tape.reduce(sq, Reduction::SumRows);
        let gate = tape.constant(col((0..b).map(|i| w.get(i, v) / (d * b as f64)).collect()));
        let gated = tape.scale_rows(per_row, gate)?;
        let s = tape.sum(gated);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    total.ok_or_else(|| Error::Contract("no views to reconstruct".into()))
}

/// `−(1/bc)·Σ [Y·ln P + (1−Y)·ln(1−P)]·G`, logs floored at 1e-12.
pub fn classification_loss(tape: &mut Tape, p: Var, y: &Matrix, g: &Matrix) -> Result<Var> {
    if tape.shape(p) != y.shape() || y.shape() != g.shape() {
        return Err(Error::dim("classification_loss", tape.shape(p), y.shape()));
    }
    let (b, c) = y.shape();
    let pos_w = tape.constant(y.zip_map(g, |y, g| y * g)?);
    let neg_w = tape.constant(y.zip_map(g, |y, g| (1.0 - y) * g)?);
    let log_p = tape.ln_clamped(p, LOG_FLOOR);
    let one = tape.constant(Matrix::scalar(1.0));
    let neg_p = tape.scale(p, -1.0);
    let q = tape.add(neg_p, one)?;
    let log_q = tape.ln_clamped(q, LOG_FLOOR);
    let a = tape.mul(log_p, pos_w)?;
    let bq = tape.mul(log_q, neg_w)?;
    let sa = tape.sum(a);
    let sb = tape.sum(bq);
    let s = tape.add(sa, sb)?;
    let denom = (b * c).max(1) as f64;
    Ok(tape.scale(s, -1.0 / denom))
}

/// Loss handles for one batch; any of them may be omitted.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub mc: Var,
    pub gc: Option<Var>,
    pub ccc: Option<Var>,
    pub re: Option<Var>,
}

/// `L_mc + α·L_gc + β·L_ccc + γ·L_re`. Terms with zero weight are left off
/// the graph so backward skips them; their values still show up in the
/// breakdown.
pub fn total_loss(tape: &mut Tape, parts: &LossParts, weights: &LossWeights) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let mut total = parts.mc;
    for (part, wt) in [(parts.gc, weights.alpha), (parts.ccc, weights.beta), (parts.re, weights.gamma)] {
        if let Some(v) = part {
            if wt != 0.0 {
                let scaled = tape.scale(v, wt);
                total = tape.add(total, scaled)?;
            }
        }
    }
    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).get(0, 0));
    let breakdown = LossBreakdown {
        l_mc: val(Some(parts.mc)),
        l_gc: val(parts.gc),
        l_ccc: val(parts.ccc),
        l_re: val(parts.re),
        l_total: val(Some(total)),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).get(0, 0)
    }

    #[test]
    fn contrastive_hand_example() {
        let mut t = Tape::new();
        let s1 = t.constant(Matrix::from_rows(&[[1.0, 0.0]]).unwrap());
        let s2 = t.constant(Matrix::from_rows(&[[1.0, 0.0]]).unwrap());
        let o1 = t.constant(Matrix::from_rows(&[[0.0, 1.0]]).unwrap());
        let o2 = t.constant(Matrix::from_rows(&[[0.0, -1.0]]).unwrap());
        let l = contrastive_loss(&mut t, &[s1, s2], &[o1, o2], &Matrix::ones(1, 2), ContrastiveReduction::Mean).unwrap();
        assert!((scalar(&t, l) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn contrastive_zero_numerator() {
        let mut t = Tape::new();
        let s = t.constant(Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]).unwrap());
        let s2 = t.constant(Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]).unwrap());
        let o1 = t.constant(Matrix::from_rows(&[[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]).unwrap());
        let o2 = t.constant(Matrix::from_rows(&[[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]).unwrap());
        let l = contrastive_loss(&mut t, &[s, s2], &[o1, o2], &Matrix::ones(2, 2), ContrastiveReduction::Mean).unwrap();
        assert_eq!(scalar(&t, l), 0.0);
    }

    #[test]
    fn contrastive_skips_single_view_samples() {
        let mut t = Tape::new();
        let s1 = t.constant(Matrix::from_rows(&[[1.0, 0.3]]).unwrap());
        let s2 = t.constant(Matrix::from_rows(&[[0.0, 0.0]]).unwrap());
        let o1 = t.constant(Matrix::from_rows(&[[0.5, 1.0]]).unwrap());
        let o2 = t.constant(Matrix::from_rows(&[[0.0, 0.0]]).unwrap());
        let w = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let l = contrastive_loss(&mut t, &[s1, s2], &[o1, o2], &w, ContrastiveReduction::Mean).unwrap();
        assert_eq!(scalar(&t, l), 0.0);
        assert!(contrastive_loss(&mut t, &[s1], &[o1], &Matrix::ones(1, 1), ContrastiveReduction::Mean).is_err());
    }

    #[test]
    fn contrastive_scale_invariance() {
        let base = |scale: f64| {
            let mut t = Tape::new();
            let s1 = t.constant(Matrix::from_rows(&[[0.3, -0.8, 0.1], [1.0, 0.2, 0.4]]).unwrap());
            let s2 = t.constant(Matrix::from_rows(&[[0.5, 0.5, -0.2], [0.1, 0.9, 0.3]]).unwrap().map(|x| x * scale));
            let o1 = t.constant(Matrix::from_rows(&[[0.2, 0.1, 0.9], [-0.4, 0.6, 0.1]]).unwrap());
            let o2 = t.constant(Matrix::from_rows(&[[0.7, -0.3, 0.2], [0.3, 0.3, -0.9]]).unwrap());
            let l = contrastive_loss(&mut t, &[s1, s2], &[o1, o2], &Matrix::ones(2, 2), ContrastiveReduction::Mean).unwrap();
            scalar(&t, l)
        };
        assert!((base(1.0) - base(37.5)).abs() < 1e-9);
        assert!(base(1.0) > 0.0);
    }

    #[test]
    fn reconstruction_hand_value_and_gate() {
        let mut t = Tape::new();
        let target = Matrix::from_rows(&[[1.0, 1.0], [2.0, 2.0]]).unwrap();
        let recon = t.constant(Matrix::from_rows(&[[2.0, 1.0], [2.0, 4.0]]).unwrap());
        let l = reconstruction_loss(&mut t, &[recon], &[target.clone()], &Matrix::ones(2, 1)).unwrap();
        assert_eq!(scalar(&t, l), 1.25);
        let perfect = t.constant(target.clone());
        let l = reconstruction_loss(&mut t, &[perfect], &[target.clone()], &Matrix::ones(2, 1)).unwrap();
        assert_eq!(scalar(&t, l), 0.0);

        let w = Matrix::from_rows(&[[1.0], [0.0]]).unwrap();
        let a = reconstruction_loss(&mut t, &[recon], &[target.clone()], &w).unwrap();
        let mut other = target.clone();
        other.set_row(1, &[-30.0, 8.0]);
        let b = reconstruction_loss(&mut t, &[recon], &[other], &w).unwrap();
        assert_eq!(scalar(&t, a).to_bits(), scalar(&t, b).to_bits());
    }

    #[test]
    fn classification_cases() {
        let mut t = Tape::new();
        let p = t.constant(Matrix::from_rows(&[[0.5, 0.5]]).unwrap());
        let y = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let l = classification_loss(&mut t, p, &y, &Matrix::ones(1, 2)).unwrap();
        assert!((scalar(&t, l) - std::f64::consts::LN_2).abs() < 1e-15);
        let l = classification_loss(&mut t, p, &y, &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(scalar(&t, l), 0.0);
        let exact = t.constant(y.clone());
        let l = classification_loss(&mut t, exact, &y, &Matrix::ones(1, 2)).unwrap();
        assert!(scalar(&t, l) < 1e-11);
    }

    #[test]
    fn total_combines_parts() {
        let mut t = Tape::new();
        let vals: Vec<Var> = (1..=4).map(|k| t.leaf(Matrix::scalar(k as f64))).collect();
        let parts = LossParts {
            mc: vals[0],
            gc: Some(vals[1]),
            ccc: Some(vals[2]),
            re: Some(vals[3]),
        };
        let ones = LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        };
        let (_, b) = total_loss(&mut t, &parts, &ones).unwrap();
        assert_eq!(b.l_total, 10.0);
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        let (v, b) = total_loss(&mut t, &parts, &zero).unwrap();
        assert_eq!(v, vals[0]);
        assert_eq!(b.l_total, b.l_mc);
        let (_, b) = total_loss(&mut t, &parts, &LossWeights::default()).unwrap();
        let recomposed = b.l_mc + 0.4 * b.l_gc + 0.4 * b.l_ccc + 0.1 * b.l_re;
        assert!((b.l_total - recomposed).abs() < 1e-12);
        assert!(total_loss(&mut t, &parts, &LossWeights { alpha: -1.0, ..ones }).is_err());
    }
}
