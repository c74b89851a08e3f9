use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Which attention directions feed the query-aware context.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    #[default]
    Bidaf,
    C2q,
    Q2c,
}

impl AttentionVariant {
    /// Width of `G` for contextual states of width `d` (`2h`).
    pub fn output_width(self, d: usize) -> usize {
        match self {
            AttentionVariant::Bidaf => 4 * d,
            AttentionVariant::C2q | AttentionVariant::Q2c => 3 * d,
        }
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bidaf" => Ok(AttentionVariant::Bidaf),
            "c2q" => Ok(AttentionVariant::C2q),
            "q2c" => Ok(AttentionVariant::Q2c),
            _ => Err(Error::Config(format!("unknown attention variant {s} (bidaf|c2q|q2c)"))),
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionVariant::Bidaf => "bidaf",
            AttentionVariant::C2q => "c2q",
            AttentionVariant::Q2c => "q2c",
        })
    }
}

/// Query-aware context and the attention weights that produced it.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// `n × d_G`
    pub g: Var,
    /// Context-to-query weights, `n × m`, rows sum to one.
    pub c2q: Option<Var>,
    /// Query-to-context weights over passage positions, `n × 1`.
    pub q2c: Option<Var>,
}

/// `S[j, i] = w_sᵀ [h_j ; u_i ; h_j ∘ u_i]` for passage states `h` (`n × d`)
/// and question states `u` (`m × d`); `w_s` is `1 × 3d`.
pub fn similarity<S: Scalar>(g: &mut Graph<'_, S>, w_s: Var, u: Var, h: Var) -> Result<Var> {
    let (n, d) = g.shape(h);
    let (m, du) = g.shape(u);
    if du != d || g.shape(w_s) != (1, 3 * d) {
        return Err(Error::dim(
            "bidaf_attention",
            format!("h {:?}, u {:?}, w_s {:?}", (n, d), (m, du), g.shape(w_s)),
        ));
    }
    let w1 = g.slice_cols(w_s, 0, d)?;
    let w2 = g.slice_cols(w_s, d, d)?;
    let w3 = g.slice_cols(w_s, 2 * d, d)?;
    let hp = g.matmul_bt(h, w1)?;
    let hp = g.repeat_cols(hp, m)?;
    let up = g.matmul_bt(w2, u)?;
    let up = g.repeat_rows(up, n)?;
    let w3n = g.repeat_rows(w3, n)?;
    let hw = g.mul(h, w3n)?;
    let cross = g.matmul_bt(hw, u)?;
    let s = g.add(cross, hp)?;
    g.add(s, up)
}

/// Builds `G` from a similarity matrix `s` (`n × m`).
pub fn attend<S: Scalar>(g: &mut Graph<'_, S>, s: Var, u: Var, h: Var, variant: AttentionVariant) -> Result<Attended> {
    let (n, m) = g.shape(s);
    if g.shape(h).0 != n || g.shape(u).0 != m {
        return Err(Error::dim(
            "bidaf_attention",
            format!("similarity {:?} vs h {:?}, u {:?}", (n, m), g.shape(h), g.shape(u)),
        ));
    }
    let c2q = match variant {
        AttentionVariant::Bidaf | AttentionVariant::C2q => {
            let a = g.softmax_rows(s)?;
            let u_tilde = g.matmul(a, u)?;
            Some((a, u_tilde))
        }
        AttentionVariant::Q2c => None,
    };
    let q2c = match variant {
        AttentionVariant::Bidaf | AttentionVariant::Q2c => {
            let mx = g.max_cols(s)?;
            let b = g.softmax(mx, 0)?;
            let bt = g.transpose(b)?;
            let h_tilde = g.matmul(bt, h)?;
            let h_tilde = g.repeat_rows(h_tilde, n)?;
            Some((b, h_tilde))
        }
        AttentionVariant::C2q => None,
    };
    let mut parts = vec![h];
    if let Some((_, ut)) = c2q {
        let hu = g.mul(h, ut)?;
        parts.extend([ut, hu]);
    }
    if let Some((_, ht)) = q2c {
        let hh = g.mul(h, ht)?;
        if c2q.is_none() {
            parts.push(ht);
        }
        parts.push(hh);
    }
    let out = g.concat(&parts, 1)?;
    Ok(Attended {
        g: out,
        c2q: c2q.map(|(a, _)| a),
        q2c: q2c.map(|(b, _)| b),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn softmax(xs: &[f64]) -> Vec<f64> {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    fn setup(g: &mut Graph<'_, f64>, n: usize, m: usize, d: usize) -> (Var, Var) {
        let h: Vec<f64> = (0..n * d).map(|i| ((i * 7 % 11) as f64 - 5.0) / 7.0).collect();
        let u: Vec<f64> = (0..m * d).map(|i| ((i * 5 % 13) as f64 - 6.0) / 9.0).collect();
        let h = g.constant(Tensor::new(vec![n, d], h).unwrap()).unwrap();
        let u = g.constant(Tensor::new(vec![m, d], u).unwrap()).unwrap();
        (h, u)
    }

    #[test]
    fn widths_per_variant() {
        for (v, w) in [
            (AttentionVariant::Bidaf, 16),
            (AttentionVariant::C2q, 12),
            (AttentionVariant::Q2c, 12),
        ] {
            let mut g = Graph::<f64>::bare();
            let (h, u) = setup(&mut g, 3, 2, 4);
            let s = g.constant(Tensor::zeros(&[3, 2])).unwrap();
            let a = attend(&mut g, s, u, h, v).unwrap();
            assert_eq!(g.shape(a.g), (3, w));
            assert_eq!(v.output_width(4), w);
        }
    }

    #[test]
    fn single_question_word_gets_all_weight() {
        let mut g = Graph::<f64>::bare();
        let (h, u) = setup(&mut g, 4, 1, 3);
        let s = g
            .constant(Tensor::from_rows(&[&[0.3], &[-2.0], &[5.0], &[1.0]]))
            .unwrap();
        let a = attend(&mut g, s, u, h, AttentionVariant::Bidaf).unwrap();
        assert!(g.value(a.c2q.unwrap()).data().iter().all(|&w| w == 1.0));
        let gv = g.value(a.g).clone();
        let uv = g.value(u).clone();
        for j in 0..4 {
            assert_eq!(&gv.row(j)[3..6], uv.row(0));
        }
    }

    #[test]
    fn constant_similarity_is_uniform() {
        let mut g = Graph::<f64>::bare();
        let (h, u) = setup(&mut g, 3, 4, 2);
        let s = g.constant(Tensor::full(&[3, 4], 0.7)).unwrap();
        let a = attend(&mut g, s, u, h, AttentionVariant::C2q).unwrap();
        for &w in g.value(a.c2q.unwrap()).data() {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_set_similarity_matches_brute_force() {
        let rows: [&[f64]; 3] = [&[1.0, 2.0], &[0.5, -0.5], &[3.0, 0.0]];
        let mut g = Graph::<f64>::bare();
        let (h, u) = setup(&mut g, 3, 2, 2);
        let s = g.constant(Tensor::from_rows(&rows)).unwrap();
        let a = attend(&mut g, s, u, h, AttentionVariant::Bidaf).unwrap();
        let c2q = g.value(a.c2q.unwrap()).clone();
        for (j, r) in rows.iter().enumerate() {
            for (x, y) in c2q.row(j).iter().zip(softmax(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let b = softmax(&[2.0, 0.5, 3.0]);
        for (x, y) in g.value(a.q2c.unwrap()).data().iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        // last block of G is h ∘ (Σ_j b_j h_j)
        let hv = g.value(h).clone();
        let gv = g.value(a.g).clone();
        for k in 0..2 {
            let ht: f64 = (0..3).map(|j| b[j] * hv.at(j, k)).sum();
            for j in 0..3 {
                assert!((gv.at(j, 6 + k) - hv.at(j, k) * ht).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_matches_definition() {
        let mut g = Graph::<f64>::bare();
        let (h, u) = setup(&mut g, 2, 3, 2);
        let wv = [0.1, -0.2, 0.3, 0.4, -0.5, 0.6];
        let w = g.constant(Tensor::row_vector(&wv)).unwrap();
        let s = similarity(&mut g, w, u, h).unwrap();
        let (hv, uv) = (g.value(h).clone(), g.value(u).clone());
        for j in 0..2 {
            for i in 0..3 {
                let mut e = 0.0;
                for k in 0..2 {
                    e += wv[k] * hv.at(j, k) + wv[2 + k] * uv.at(i, k) + wv[4 + k] * hv.at(j, k) * uv.at(i, k);
                }
                assert!((g.value(s).at(j, i) - e).abs() < 1e-12);
            }
        }
    }
}
