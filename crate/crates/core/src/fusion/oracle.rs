//! Scalar-loop reference for the fusion block.
//!
//! Everything here is written with plain nested loops over `f64` and shares no
//! code with the graph kernels, so agreement between the two is meaningful.

use super::{FusionVariant, HdgffmParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest per-sample `C·H·W` the oracle accepts.
pub const ORACLE_LIMIT: usize = 4096;

/// Plain nested-vector feature map `[n][c][p]`, `p = y·W + x`.
type Planes = Vec<Vec<Vec<f64>>>;

fn to_planes(t: &Tensor<f64>) -> Result<(Planes, usize, usize)> {
    let (n, c, h, w) = t.dims4()?;
    let mut out = vec![vec![vec![0.0; h * w]; c]; n];
    for (b, sample) in out.iter_mut().enumerate() {
        for (ch, plane) in sample.iter_mut().enumerate() {
            for (p, v) in plane.iter_mut().enumerate() {
                *v = t.data()[(b * c + ch) * h * w + p];
            }
        }
    }
    Ok((out, h, w))
}

fn from_planes(x: &Planes, h: usize, w: usize) -> Tensor<f64> {
    let (n, c) = (x.len(), x[0].len());
    let mut data = Vec::with_capacity(n * c * h * w);
    for sample in x {
        for plane in sample {
            data.extend_from_slice(plane);
        }
    }
    Tensor::new(vec![n, c, h, w], data).expect("consistent planes")
}

/// `out[o][p] = Σ_i W[o][i] · x[i][p] (+ b[o])`.
fn proj(w: &Tensor<f64>, bias: Option<&Tensor<f64>>, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (cout, cin) = (w.shape()[0], w.shape()[1]);
    let p = x[0].len();
    let mut out = vec![vec![0.0; p]; cout];
    for o in 0..cout {
        for pix in 0..p {
            let mut s = match bias {
                Some(b) => b.data()[o],
                None => 0.0,
            };
            for i in 0..cin {
                s += w.data()[o * cin + i] * x[i][pix];
            }
            out[o][pix] = s;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Per-head attention matrices for one sample: `[head][i][j]`.
fn attention_matrix(q: &[Vec<f64>], k: &[Vec<f64>], tau: f64, heads: usize) -> Vec<Vec<Vec<f64>>> {
    let (dq, dk) = (q.len() / heads, k.len() / heads);
    let p = q[0].len();
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut m = vec![vec![0.0; dk]; dq];
        for i in 0..dq {
            for j in 0..dk {
                let mut s = 0.0;
                for pix in 0..p {
                    s += q[h * dq + i][pix] * k[h * dk + j][pix];
                }
                m[i][j] = s * tau;
            }
            let max = m[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..dk {
                m[i][j] = (m[i][j] - max).exp();
                total += m[i][j];
            }
            for j in 0..dk {
                m[i][j] /= total;
            }
        }
        out.push(m);
    }
    out
}

fn apply_attention(a: &[Vec<Vec<f64>>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let heads = a.len();
    let (dq, dk) = (a[0].len(), a[0][0].len());
    let p = v[0].len();
    let mut out = vec![vec![0.0; p]; dq * heads];
    for h in 0..heads {
        for i in 0..dq {
            for pix in 0..p {
                let mut s = 0.0;
                for j in 0..dk {
                    s += a[h][i][j] * v[h * dk + j][pix];
                }
                out[h * dq + i][pix] = s;
            }
        }
    }
    out
}

fn guard(t: &Tensor<f64>) -> Result<()> {
    let (_, c, h, w) = t.dims4()?;
    if c * h * w > ORACLE_LIMIT {
        return Err(Error::TooLarge {
            size: c * h * w,
            limit: ORACLE_LIMIT,
        });
    }
    Ok(())
}

/// Attention map of already-projected features, flattened `(N, C_q, C_k)` (one head).
pub fn oracle_attention_map(
    q_proj: &Tensor<f64>,
    k_proj: &Tensor<f64>,
    tau: f64,
) -> Result<Vec<f64>> {
    guard(q_proj)?;
    guard(k_proj)?;
    let (q, _, _) = to_planes(q_proj)?;
    let (k, _, _) = to_planes(k_proj)?;
    let mut out = Vec::new();
    for (qs, ks) in q.iter().zip(&k) {
        for row in &attention_matrix(qs, ks, tau, 1)[0] {
            out.extend_from_slice(row);
        }
    }
    Ok(out)
}

pub fn oracle_self_attention(feat: &Tensor<f64>, p: &HdgffmParams<f64>) -> Result<Tensor<f64>> {
    guard(feat)?;
    let (x, h, w) = to_planes(feat)?;
    let out: Planes = x
        .iter()
        .map(|s| {
            let a = attention_matrix(
                &proj(&p.w_q, None, s),
                &proj(&p.w_k, None, s),
                p.tau,
                p.heads,
            );
            apply_attention(&a, &proj(&p.w_v, None, s))
        })
        .collect();
    Ok(from_planes(&out, h, w))
}

pub fn oracle_cross_attention(
    img: &Tensor<f64>,
    depth_embedded: &Tensor<f64>,
    p: &HdgffmParams<f64>,
) -> Result<Tensor<f64>> {
    guard(img)?;
    guard(depth_embedded)?;
    let (x, h, w) = to_planes(img)?;
    let (d, _, _) = to_planes(depth_embedded)?;
    let wq = p.w_q_cross.as_ref().unwrap_or(&p.w_q);
    let out: Planes = x
        .iter()
        .zip(&d)
        .map(|(s, ds)| {
            let a = attention_matrix(
                &proj(wq, None, s),
                &proj(&p.w_k_depth, None, ds),
                p.tau,
                p.heads,
            );
            apply_attention(&a, &proj(&p.w_v_depth, None, ds))
        })
        .collect();
    Ok(from_planes(&out, h, w))
}

pub fn oracle_gate(
    self_out: &Tensor<f64>,
    cross_out: &Tensor<f64>,
    p: &HdgffmParams<f64>,
) -> Result<Tensor<f64>> {
    let (a, h, w) = to_planes(self_out)?;
    let (b, _, _) = to_planes(cross_out)?;
    let (gw, gb) = match (&p.gate_w, &p.gate_b) {
        (Some(w), Some(b)) => (w, b),
        _ => return Err(Error::Config("block has no gate parameters".into())),
    };
    let out: Planes = a
        .iter()
        .zip(&b)
        .map(|(sa, sb)| {
            let cat: Vec<Vec<f64>> = sa.iter().chain(sb.iter()).cloned().collect();
            proj(gw, Some(gb), &cat)
                .into_iter()
                .map(|row| row.into_iter().map(sigmoid).collect())
                .collect()
        })
        .collect();
    Ok(from_planes(&out, h, w))
}

/// Reference evaluation of the whole block for any fusion variant.
pub fn hdgffm_oracle_variant(
    img_feat: &Tensor<f64>,
    depth_feat_raw: &Tensor<f64>,
    p: &HdgffmParams<f64>,
    variant: FusionVariant,
) -> Result<Tensor<f64>> {
    guard(img_feat)?;
    guard(depth_feat_raw)?;
    let (x, h, w) = to_planes(img_feat)?;
    let (dr, dh, dw) = to_planes(depth_feat_raw)?;
    if (dh, dw) != (h, w) || dr.len() != x.len() {
        return Err(Error::Shape(
            "depth features do not match image features".into(),
        ));
    }
    let wq_cross = p.w_q_cross.as_ref().unwrap_or(&p.w_q);
    let mut out: Planes = Vec::with_capacity(x.len());
    for (f, fd) in x.iter().zip(&dr) {
        let c = f.len();
        let pix_count = f[0].len();
        let embedded = proj(&p.embed, None, fd);

        let a_self = attention_matrix(
            &proj(&p.w_q, None, f),
            &proj(&p.w_k, None, f),
            p.tau,
            p.heads,
        );
        let self_out = apply_attention(&a_self, &proj(&p.w_v, None, f));

        let a_cross = attention_matrix(
            &proj(wq_cross, None, f),
            &proj(&p.w_k_depth, None, &embedded),
            p.tau,
            p.heads,
        );
        let cross_out = apply_attention(&a_cross, &proj(&p.w_v_depth, None, &embedded));

        let weight: Vec<Vec<f64>> = match variant {
            FusionVariant::Additive => vec![vec![1.0; pix_count]; c],
            _ => {
                let (gw, gb) = match (&p.gate_w, &p.gate_b) {
                    (Some(w), Some(b)) => (w, b),
                    _ => return Err(Error::Config("block has no gate parameters".into())),
                };
                let cat: Vec<Vec<f64>> = self_out.iter().chain(cross_out.iter()).cloned().collect();
                let logits = proj(gw, Some(gb), &cat);
                if variant == FusionVariant::Gated {
                    logits
                        .into_iter()
                        .map(|r| r.into_iter().map(sigmoid).collect())
                        .collect()
                } else {
                    logits
                }
            }
        };

        let mut fused = vec![vec![0.0; pix_count]; c];
        for ch in 0..c {
            for pix in 0..pix_count {
                fused[ch][pix] =
                    weight[ch][pix] * cross_out[ch][pix] + self_out[ch][pix] + f[ch][pix];
            }
        }
        let hidden: Vec<Vec<f64>> = proj(&p.ffn_in, None, &fused)
            .into_iter()
            .map(|r| r.into_iter().map(silu).collect())
            .collect();
        let ffn = proj(&p.ffn_out, None, &hidden);
        let mut sample = vec![vec![0.0; pix_count]; c];
        for ch in 0..c {
            for pix in 0..pix_count {
                sample[ch][pix] = ffn[ch][pix] + f[ch][pix];
            }
        }
        out.push(sample);
    }
    Ok(from_planes(&out, h, w))
}

/// Reference evaluation of the gated block.
pub fn hdgffm_oracle(
    img_feat: &Tensor<f64>,
    depth_feat_raw: &Tensor<f64>,
    p: &HdgffmParams<f64>,
) -> Result<Tensor<f64>> {
    hdgffm_oracle_variant(img_feat, depth_feat_raw, p, p.variant())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_large_instances() {
        let p = HdgffmParams::<f64>::zeros(8, 1, FusionVariant::Gated);
        let x = Tensor::zeros(vec![1, 8, 32, 32]);
        let d = Tensor::zeros(vec![1, 1, 32, 32]);
        assert!(matches!(
            hdgffm_oracle(&x, &d, &p),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn zero_params_pass_input_through() {
        let p = HdgffmParams::<f64>::zeros(3, 2, FusionVariant::Gated);
        let x = Tensor::from_fn(vec![1, 3, 2, 2], |i| i as f64 - 4.0);
        let d = Tensor::from_fn(vec![1, 2, 2, 2], |i| i as f64);
        assert_eq!(hdgffm_oracle(&x, &d, &p).unwrap(), x);
    }

    /// C = 1 with identity projections: attention is [[1]], so
    /// f' = x, f'' = x, w = sigmoid(g1·x + g2·x + b) and f̄ = w·x + 2x.
    #[test]
    fn single_channel_hand_trace() {
        let one = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let p = HdgffmParams {
            w_q: one.clone(),
            w_k: one.clone(),
            w_v: one.clone(),
            w_q_cross: None,
            w_k_depth: one.clone(),
            w_v_depth: one.clone(),
            gate_w: Some(Tensor::new(vec![1, 2, 1, 1], vec![0.5, -0.25]).unwrap()),
            gate_b: Some(Tensor::new(vec![1], vec![0.1]).unwrap()),
            ffn_in: Tensor::new(vec![2, 1, 1, 1], vec![1.0, -2.0]).unwrap(),
            ffn_out: Tensor::new(vec![1, 2, 1, 1], vec![0.3, 0.7]).unwrap(),
            embed: one,
            tau: 0.9,
            heads: 1,
        };
        let xv = 0.8;
        let x = Tensor::new(vec![1, 1, 1, 1], vec![xv]).unwrap();
        let gate = 1.0 / (1.0 + (-(0.5 * xv - 0.25 * xv + 0.1f64)).exp());
        let fbar = gate * xv + xv + xv;
        let silu = |z: f64| z / (1.0 + (-z).exp());
        let want = 0.3 * silu(fbar) + 0.7 * silu(-2.0 * fbar) + xv;
        let got = hdgffm_oracle(&x, &x, &p).unwrap().data()[0];
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        let fast = super::super::hdgffm_forward(&x, &x, &p).unwrap().data()[0];
        assert!((fast - want).abs() < 1e-15);
    }
}
