//! Fused batched multi-head scaled dot-product attention.
//!
//! Queries are `[batch·tq × d]`, keys and values `[batch·tk × d]`; head `h`
//! owns columns `h·d/heads .. (h+1)·d/heads`. The projections around this
//! kernel are ordinary tape ops.

use super::gemm::gemm_strided;
use super::softmax_row;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Query `i` sees keys `j <= i`.
    Causal,
    /// Keys below the prefix length are visible to everyone; beyond it the
    /// mask is causal.
    PrefixCausal(usize),
}

impl Mask {
    #[inline]
    pub fn visible(self, i: usize, j: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Causal => j <= i,
            Mask::PrefixCausal(p) => j < p || j <= i,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    pub heads: usize,
    pub mask: Mask,
}

impl AttnShape {
    pub fn head_dim(&self, d: usize) -> usize {
        d / self.heads
    }

    pub fn probs_len(&self) -> usize {
        self.batch * self.heads * self.tq * self.tk
    }

    fn probs_offset(&self, b: usize, h: usize) -> usize {
        (b * self.heads + h) * self.tq * self.tk
    }
}

pub(crate) fn forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    s: &AttnShape,
) -> (Vec<f64>, Vec<f64>) {
    let hd = s.head_dim(d);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; s.batch * s.tq * d];
    let mut probs = vec![0.0; s.probs_len()];
    let mut scores = vec![0.0; s.tq * s.tk];
    let mut row = vec![0.0; s.tk];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let qo = b * s.tq * d + h * hd;
            let ko = b * s.tk * d + h * hd;
            gemm_strided(
                s.tq,
                hd,
                s.tk,
                scale,
                &q[qo..],
                (d, 1),
                &k[ko..],
                (1, d),
                0.0,
                &mut scores,
                (s.tk, 1),
            );
            let p = &mut probs[s.probs_offset(b, h)..][..s.tq * s.tk];
            for i in 0..s.tq {
                let src = &scores[i * s.tk..(i + 1) * s.tk];
                let dst = &mut p[i * s.tk..(i + 1) * s.tk];
                if s.mask == Mask::None {
                    softmax_row(src, dst);
                    continue;
                }
                let mut max = f64::NEG_INFINITY;
                for (j, &v) in src.iter().enumerate() {
                    if s.mask.visible(i, j) {
                        max = max.max(v);
                    }
                }
                let mut z = 0.0;
                for j in 0..s.tk {
                    row[j] = if s.mask.visible(i, j) {
                        (src[j] - max).exp()
                    } else {
                        0.0
                    };
                    z += row[j];
                }
                let inv = 1.0 / z;
                for (o, r) in dst.iter_mut().zip(&row) {
                    *o = r * inv;
                }
            }
            gemm_strided(
                s.tq,
                s.tk,
                hd,
                1.0,
                p,
                (s.tk, 1),
                &v[ko..],
                (d, 1),
                0.0,
                &mut out[qo..],
                (d, 1),
            );
        }
    }
    (out, probs)
}

/// Accumulates input gradients for whichever of `dq`, `dk`, `dv` are present.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    d: usize,
    s: &AttnShape,
    mut dq: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut dv: Option<&mut [f64]>,
) {
    let hd = s.head_dim(d);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dp = vec![0.0; s.tq * s.tk];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let qo = b * s.tq * d + h * hd;
            let ko = b * s.tk * d + h * hd;
            let p = &probs[s.probs_offset(b, h)..][..s.tq * s.tk];
            if let Some(dv) = dv.as_deref_mut() {
                // dV += Pᵀ · dO
                gemm_strided(
                    s.tk,
                    s.tq,
                    hd,
                    1.0,
                    p,
                    (1, s.tk),
                    &dout[qo..],
                    (d, 1),
                    1.0,
                    &mut dv[ko..],
                    (d, 1),
                );
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            // dP = dO · Vᵀ
            gemm_strided(
                s.tq,
                hd,
                s.tk,
                1.0,
                &dout[qo..],
                (d, 1),
                &v[ko..],
                (1, d),
                0.0,
                &mut dp,
                (s.tk, 1),
            );
            // dS = P ⊙ (dP − Σ_j P·dP), stored in place
            for i in 0..s.tq {
                let pr = &p[i * s.tk..(i + 1) * s.tk];
                let dr = &mut dp[i * s.tk..(i + 1) * s.tk];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (g, &pv) in dr.iter_mut().zip(pr) {
                    *g = pv * (*g - dot);
                }
            }
            if let Some(dq) = dq.as_deref_mut() {
                gemm_strided(
                    s.tq,
                    s.tk,
                    hd,
                    scale,
                    &dp,
                    (s.tk, 1),
                    &k[ko..],
                    (d, 1),
                    1.0,
                    &mut dq[qo..],
                    (d, 1),
                );
            }
            if let Some(dk) = dk.as_deref_mut() {
                gemm_strided(
                    s.tk,
                    s.tq,
                    hd,
                    scale,
                    &dp,
                    (1, s.tk),
                    &q[qo..],
                    (d, 1),
                    1.0,
                    &mut dk[ko..],
                    (d, 1),
                );
            }
        }
    }
}
