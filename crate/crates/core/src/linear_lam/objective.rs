//! Losses and analytic gradients on a block of rows.

use serde::{Deserialize, Serialize};

use super::{LamError, LinearLamParams};
use crate::exbmdp::{Field, TransitionBatch};
use crate::numerics::{gemm_into, Matrix, Trans};

/// Rows large enough to amortize the gemm calls, small enough to stay cache-friendly.
const EVAL_CHUNK: usize = 4096;

/// Which blocks to gather alongside `o` and `o'`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Needs {
    pub pairs: bool,
    pub target: Option<Field>,
}

/// Observations for a set of rows, one sample per matrix row.
#[derive(Clone, Debug)]
pub struct Block {
    pub o: Matrix,
    pub o_next: Matrix,
    pub o_tilde: Option<Matrix>,
    pub o_tilde_next: Option<Matrix>,
    pub y: Option<Matrix>,
}

impl Block {
    pub fn len(&self) -> usize {
        self.o.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn gather_block(batch: &TransitionBatch, rows: &[usize], needs: Needs) -> Result<Block, LamError> {
    if needs.pairs && !batch.has_pairs {
        return Err(LamError::MissingPairs);
    }
    let (o_tilde, o_tilde_next) = if needs.pairs {
        (Some(batch.gather(Field::OTilde, rows)), Some(batch.gather(Field::OTildeNext, rows)))
    } else {
        (None, None)
    };
    Ok(Block {
        o: batch.gather(Field::O, rows),
        o_next: batch.gather(Field::ONext, rows),
        o_tilde,
        o_tilde_next,
        y: needs.target.map(|f| batch.gather(f, rows)),
    })
}

/// Unweighted component losses (each a mean over rows) and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub lam: f64,
    pub xexo: Option<f64>,
    pub robust: Option<f64>,
}

/// Forward pass over a block, with gradients of the weighted total when asked.
///
/// The cross-exogenous term is active when the block carries paired
/// observations and `lambda_xexo > 0`; the robust term when it carries `y`,
/// the model has `W` and `lambda_robust > 0`.
pub fn evaluate_block(
    p: &LinearLamParams,
    blk: &Block,
    lambda_xexo: f64,
    lambda_robust: f64,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<Matrix>>), LamError> {
    let n = blk.len();
    if n == 0 {
        return Err(LamError::Dimension("empty block".into()));
    }
    let d_o = p.d_o();
    if blk.o.cols() != d_o || blk.o_next.cols() != d_o {
        return Err(LamError::Dimension(format!("block has width {}, model expects {d_o}", blk.o.cols())));
    }
    let inv_n = 1.0 / n as f64;

    let ao = blk.o.matmul_nt(&p.a);
    let z = p.encode_rows(&blk.o, &blk.o_next);
    let mut r = blk.o_next.clone();
    r.axpy(-1.0, &ao);
    gemm_into(-1.0, &z, Trans::No, &p.b, Trans::Yes, 1.0, &mut r);
    let lam = r.frobenius_sq() * inv_n;

    let xexo_on = lambda_xexo > 0.0 && blk.o_tilde.is_some();
    let mut xexo_state = None;
    let mut xexo = None;
    if xexo_on {
        let (ot, otn) = (blk.o_tilde.as_ref().unwrap(), blk.o_tilde_next.as_ref().unwrap());
        let zt = p.encode_rows(ot, otn);
        let mut r2 = blk.o_next.clone();
        r2.axpy(-1.0, &ao);
        gemm_into(-1.0, &zt, Trans::No, &p.b, Trans::Yes, 1.0, &mut r2);
        xexo = Some(r2.frobenius_sq() * inv_n);
        xexo_state = Some((zt, r2));
    }

    let mut robust = None;
    let mut robust_resid = None;
    if lambda_robust > 0.0 {
        if let Some(y) = &blk.y {
            let w = p.w.as_ref().ok_or(LamError::MissingHead)?;
            if w.shape() != (y.cols(), p.d_z()) {
                return Err(LamError::RobustShape { got: w.shape(), expected: (y.cols(), p.d_z()) });
            }
            let mut r3 = y.clone();
            gemm_into(-1.0, &z, Trans::No, w, Trans::Yes, 1.0, &mut r3);
            robust = Some(r3.frobenius_sq() * inv_n);
            robust_resid = Some(r3);
        }
    }

    let total = lam + lambda_xexo * xexo.unwrap_or(0.0) + lambda_robust * robust.unwrap_or(0.0);
    let losses = LossBreakdown { total, lam, xexo, robust };
    if !want_grad {
        return Ok((losses, None));
    }

    // Residual gradients: dL/dR = -2 R / n for each squared term.
    let g = r.scaled(-2.0 * inv_n);
    let mut g_a = g.clone();
    let mut db = g.matmul_tn(&z);
    let mut dz = g.matmul(&p.b);
    let mut dc;
    let mut dd;
    if let Some((zt, r2)) = &xexo_state {
        let g2 = r2.scaled(-2.0 * lambda_xexo * inv_n);
        g_a.axpy(1.0, &g2);
        gemm_into(1.0, &g2, Trans::Yes, zt, Trans::No, 1.0, &mut db);
        let dzt = g2.matmul(&p.b);
        dc = dzt.matmul_tn(blk.o_tilde.as_ref().unwrap());
        dd = dzt.matmul_tn(blk.o_tilde_next.as_ref().unwrap());
    } else {
        dc = Matrix::zeros(p.c.rows(), p.c.cols());
        dd = Matrix::zeros(p.d.rows(), p.d.cols());
    }
    let mut dw = None;
    if let Some(r3) = &robust_resid {
        let g3 = r3.scaled(-2.0 * lambda_robust * inv_n);
        gemm_into(1.0, &g3, Trans::No, p.w.as_ref().unwrap(), Trans::No, 1.0, &mut dz);
        dw = Some(g3.matmul_tn(&z));
    }
    let da = g_a.matmul_tn(&blk.o);
    gemm_into(1.0, &dz, Trans::Yes, &blk.o, Trans::No, 1.0, &mut dc);
    gemm_into(1.0, &dz, Trans::Yes, &blk.o_next, Trans::No, 1.0, &mut dd);

    let mut grads = vec![da, db, dc, dd];
    if let Some(w) = &p.w {
        grads.push(dw.unwrap_or_else(|| Matrix::zeros(w.rows(), w.cols())));
    }
    Ok((losses, Some(grads)))
}

/// Gradient of the weighted total on a block, in the order of
/// [`LinearLamParams::to_list`].
pub fn grad_total(
    p: &LinearLamParams,
    blk: &Block,
    lambda_xexo: f64,
    lambda_robust: f64,
) -> Result<(LossBreakdown, Vec<Matrix>), LamError> {
    let (l, g) = evaluate_block(p, blk, lambda_xexo, lambda_robust, true)?;
    Ok((l, g.expect("gradient requested")))
}

fn mean_over_batch(
    p: &LinearLamParams,
    batch: &TransitionBatch,
    needs: Needs,
    pick: impl Fn(&LossBreakdown) -> f64,
    lx: f64,
    lr: f64,
) -> Result<f64, LamError> {
    let n = batch.len();
    if n == 0 {
        return Err(LamError::Dimension("empty batch".into()));
    }
    let mut acc = 0.0;
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let blk = gather_block(batch, chunk, needs)?;
        let (l, _) = evaluate_block(p, &blk, lx, lr, false)?;
        acc += pick(&l) * chunk.len() as f64;
    }
    Ok(acc / n as f64)
}

/// `mean ‖o' − (A o + B (C o + D o'))‖²` over every row of the batch.
pub fn loss_lam(p: &LinearLamParams, batch: &TransitionBatch) -> Result<f64, LamError> {
    mean_over_batch(p, batch, Needs::default(), |l| l.lam, 0.0, 0.0)
}

/// `mean ‖o' − (A o + B (C õ + D õ'))‖²` using the paired stream.
pub fn loss_xexo(p: &LinearLamParams, batch: &TransitionBatch) -> Result<f64, LamError> {
    let needs = Needs { pairs: true, target: None };
    mean_over_batch(p, batch, needs, |l| l.xexo.unwrap_or(f64::NAN), 1.0, 0.0)
}

/// `mean ‖y − W z‖²` with `y` the chosen field (`Field::A` or `Field::Q`).
pub fn loss_robust(p: &LinearLamParams, batch: &TransitionBatch, target: Field) -> Result<f64, LamError> {
    if p.w.is_none() {
        return Err(LamError::MissingHead);
    }
    let needs = Needs { pairs: false, target: Some(target) };
    mean_over_batch(p, batch, needs, |l| l.robust.unwrap_or(f64::NAN), 0.0, 1.0)
}
