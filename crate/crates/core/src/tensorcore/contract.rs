//! Axis-labelled tensor contraction (`"mak,akv->mkv"` style).
//!
//! Every contraction is lowered to a batched matrix product: operand `a` is
//! permuted to `[batch.., a_free.., summed..]`, operand `b` to
//! `[batch.., summed.., b_free..]`, and the product is permuted into the
//! requested output order. Summation over the contracted labels runs in
//! ascending row-major order of those labels, so the result is
//! bit-deterministic.

use std::collections::HashMap;

use super::tensor::{permute, Tensor};
use crate::error::{dim_err, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ContractSpec {
    pub a: Vec<char>,
    pub b: Vec<char>,
    pub out: Vec<char>,
}

impl ContractSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let spec: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
        let Some((lhs, out)) = spec.split_once("->") else {
            return dim_err(format!("contraction `{spec}` lacks `->`"));
        };
        let Some((a, b)) = lhs.split_once(',') else {
            return dim_err(format!("contraction `{spec}` needs two operands"));
        };
        let parsed = Self {
            a: a.chars().collect(),
            b: b.chars().collect(),
            out: out.chars().collect(),
        };
        for (name, labels) in [("a", &parsed.a), ("b", &parsed.b), ("output", &parsed.out)] {
            for (i, c) in labels.iter().enumerate() {
                if !c.is_ascii_alphabetic() {
                    return dim_err(format!("bad label `{c}` in `{spec}`"));
                }
                if labels[..i].contains(c) {
                    return dim_err(format!("label `{c}` repeated in {name} of `{spec}`"));
                }
            }
        }
        for c in &parsed.out {
            if !parsed.a.contains(c) && !parsed.b.contains(c) {
                return dim_err(format!("output label `{c}` absent from operands in `{spec}`"));
            }
        }
        for c in parsed.a.iter().filter(|c| !parsed.b.contains(c)) {
            if !parsed.out.contains(c) {
                return dim_err(format!("label `{c}` is summed over a single operand in `{spec}`"));
            }
        }
        for c in parsed.b.iter().filter(|c| !parsed.a.contains(c)) {
            if !parsed.out.contains(c) {
                return dim_err(format!("label `{c}` is summed over a single operand in `{spec}`"));
            }
        }
        Ok(parsed)
    }

    /// Spec producing the gradient of operand `a`: `out,b->a`.
    pub fn grad_a(&self) -> Self {
        Self { a: self.out.clone(), b: self.b.clone(), out: self.a.clone() }
    }

    /// Spec producing the gradient of operand `b`: `a,out->b`.
    pub fn grad_b(&self) -> Self {
        Self { a: self.a.clone(), b: self.out.clone(), out: self.b.clone() }
    }

    pub fn render(&self) -> String {
        let s = |v: &[char]| v.iter().collect::<String>();
        format!("{},{}->{}", s(&self.a), s(&self.b), s(&self.out))
    }
}

pub(crate) fn contract(spec: &ContractSpec, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if spec.a.len() != a.rank() || spec.b.len() != b.rank() {
        return dim_err(format!(
            "`{}` expects ranks ({}, {}) but got shapes {:?} and {:?}",
            spec.render(),
            spec.a.len(),
            spec.b.len(),
            a.shape(),
            b.shape()
        ));
    }
    let mut extent: HashMap<char, usize> = HashMap::new();
    for (labels, t) in [(&spec.a, a), (&spec.b, b)] {
        for (c, &e) in labels.iter().zip(t.shape()) {
            match extent.get(c) {
                Some(&prev) if prev != e => {
                    return dim_err(format!(
                        "label `{c}` has extents {prev} and {e} in `{}`",
                        spec.render()
                    ));
                }
                _ => {
                    extent.insert(*c, e);
                }
            }
        }
    }

    let in_b = |c: &char| spec.b.contains(c);
    let in_out = |c: &char| spec.out.contains(c);
    let batch: Vec<char> = spec.a.iter().copied().filter(|c| in_b(c) && in_out(c)).collect();
    let a_free: Vec<char> = spec.a.iter().copied().filter(|c| !in_b(c)).collect();
    let summed: Vec<char> = spec.a.iter().copied().filter(|c| in_b(c) && !in_out(c)).collect();
    let b_free: Vec<char> = spec.b.iter().copied().filter(|c| !spec.a.contains(c)).collect();

    let size = |labels: &[char]| labels.iter().map(|c| extent[c]).product::<usize>();
    let (nb, m, k, n) = (size(&batch), size(&a_free), size(&summed), size(&b_free));

    let pos = |labels: &[char], c: char| labels.iter().position(|&x| x == c).unwrap();
    let a_perm: Vec<usize> = batch
        .iter()
        .chain(&a_free)
        .chain(&summed)
        .map(|&c| pos(&spec.a, c))
        .collect();
    let b_perm: Vec<usize> = batch
        .iter()
        .chain(&summed)
        .chain(&b_free)
        .map(|&c| pos(&spec.b, c))
        .collect();
    let ap = permute(a.data(), a.shape(), &a_perm);
    let bp = permute(b.data(), b.shape(), &b_perm);

    let mut c = vec![0.0; nb * m * n];
    for bi in 0..nb {
        gemm_acc(
            &ap[bi * m * k..(bi + 1) * m * k],
            &bp[bi * k * n..(bi + 1) * k * n],
            &mut c[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }

    let mid: Vec<char> = batch.iter().chain(&a_free).chain(&b_free).copied().collect();
    let mid_shape: Vec<usize> = mid.iter().map(|c| extent[c]).collect();
    let out_perm: Vec<usize> = spec.out.iter().map(|&ch| pos(&mid, ch)).collect();
    let out_shape: Vec<usize> = spec.out.iter().map(|c| extent[c]).collect();
    let data = if mid.is_empty() { c } else { permute(&c, &mid_shape, &out_perm) };
    Ok(Tensor::from_parts(out_shape, data))
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let spec = ContractSpec::parse("ij,jk->ik").unwrap();
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(contract(&spec, &eye, &b).unwrap(), b);
    }

    #[test]
    fn dot_product() {
        let spec = ContractSpec::parse("a,a->").unwrap();
        let r = contract(&spec, &t(&[2], &[1.0, 2.0]), &t(&[2], &[3.0, 4.0])).unwrap();
        assert_eq!(r.shape(), &[] as &[usize]);
        assert_eq!(r.item().unwrap(), 11.0);
    }

    #[test]
    fn attention_value_contraction_on_ones() {
        let spec = ContractSpec::parse("mak,akv->mkv").unwrap();
        let r = contract(&spec, &Tensor::ones(&[2, 3, 1]), &Tensor::ones(&[3, 1, 2])).unwrap();
        assert_eq!(r.shape(), &[2, 1, 2]);
        assert!(r.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn matches_naive_loops_with_batch_labels() {
        // scores "akd,mkd->mak"
        let q: Vec<f64> = (0..3 * 2 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let kk: Vec<f64> = (0..5 * 2 * 4).map(|i| (i as f64 * 0.11).cos()).collect();
        let spec = ContractSpec::parse("akd,mkd->mak").unwrap();
        let r = contract(&spec, &t(&[3, 2, 4], &q), &t(&[5, 2, 4], &kk)).unwrap();
        assert_eq!(r.shape(), &[5, 3, 2]);
        for m in 0..5 {
            for a in 0..3 {
                for k in 0..2 {
                    let mut s = 0.0;
                    for d in 0..4 {
                        s += q[(a * 2 + k) * 4 + d] * kk[(m * 2 + k) * 4 + d];
                    }
                    assert!((r.data()[(m * 3 + a) * 2 + k] - s).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn errors() {
        assert!(ContractSpec::parse("ij,jk").is_err());
        assert!(ContractSpec::parse("ii,ij->j").is_err());
        assert!(ContractSpec::parse("ij,jk->iz").is_err());
        assert!(ContractSpec::parse("ij,k->k").is_err());
        let spec = ContractSpec::parse("ij,jk->ik").unwrap();
        let err = contract(&spec, &Tensor::ones(&[2, 3]), &Tensor::ones(&[2, 2]));
        assert!(matches!(err, Err(crate::Error::Dimension(_))));
    }
}
