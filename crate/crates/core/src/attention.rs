//! Kernel-gated attention: input attention (observations to modules),
//! inter-cell attention (modules to modules), output attention (modules to a
//! query position) and the sigmoidal gates that mix attention results with
//! their kernel-weighted bypass.
//!
//! Shapes use `M` modules, `A` observations, `k` heads, `d` key size and `v`
//! value size. Scores are unscaled dot products unless
//! [`AttentionOptions::scale_scores`] is set, and the kernel weights multiply
//! the softmax output (post-softmax masking) unless
//! [`AttentionOptions::pre_softmax_mask`] is set.

use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Result};
use crate::init::fan_in_uniform;
use crate::tensorcore::{BoundParams, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadShape {
    pub heads: usize,
    pub key: usize,
    pub value: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionOptions {
    /// Divide scores by `sqrt(key)`.
    pub scale_scores: bool,
    /// Exclude zero-kernel sources from the softmax normalization as well.
    pub pre_softmax_mask: bool,
}

/// Projection tensors of one attention block.
///
/// `query`/`key` are `(in, k, d)`, `value` is `(in, k, v)` and `out` is the
/// `(k*v, width)` projection back to the target width.
#[derive(Clone, Copy)]
pub struct AttentionVars<'g> {
    pub query: Var<'g>,
    pub key: Var<'g>,
    pub value: Var<'g>,
    pub out: Var<'g>,
}

/// Two-layer perceptron `concat(candidate, bypass) -> hidden -> 1` with a
/// tanh hidden layer and sigmoid output.
#[derive(Clone, Copy)]
pub struct GateVars<'g> {
    pub w1: Var<'g>,
    pub b1: Var<'g>,
    pub w2: Var<'g>,
    pub b2: Var<'g>,
}

/// Registers `{prefix}.q/.k/.v/.o` in `store`.
pub fn init_attention(
    store: &mut ParamStore,
    prefix: &str,
    query_in: usize,
    key_in: usize,
    value_in: usize,
    width: usize,
    shape: HeadShape,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let HeadShape { heads, key, value } = shape;
    store.insert(format!("{prefix}.q"), fan_in_uniform(&[query_in, heads, key], query_in, rng))?;
    store.insert(format!("{prefix}.k"), fan_in_uniform(&[key_in, heads, key], key_in, rng))?;
    store.insert(format!("{prefix}.v"), fan_in_uniform(&[value_in, heads, value], value_in, rng))?;
    let flat = heads * value;
    store.insert(format!("{prefix}.o"), fan_in_uniform(&[flat, width], flat, rng))?;
    Ok(())
}

pub fn bind_attention<'g>(p: &BoundParams<'g>, prefix: &str) -> Result<AttentionVars<'g>> {
    Ok(AttentionVars {
        query: p.get(&format!("{prefix}.q"))?,
        key: p.get(&format!("{prefix}.k"))?,
        value: p.get(&format!("{prefix}.v"))?,
        out: p.get(&format!("{prefix}.o"))?,
    })
}

/// Registers a gate for candidate/bypass vectors of `width`.
pub fn init_gate(
    store: &mut ParamStore,
    prefix: &str,
    width: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.insert(format!("{prefix}.w1"), fan_in_uniform(&[2 * width, hidden], 2 * width, rng))?;
    store.insert(format!("{prefix}.b1"), Tensor::zeros(&[hidden]))?;
    store.insert(format!("{prefix}.w2"), fan_in_uniform(&[hidden, 1], hidden, rng))?;
    store.insert(format!("{prefix}.b2"), Tensor::zeros(&[1]))?;
    Ok(())
}

pub fn bind_gate<'g>(p: &BoundParams<'g>, prefix: &str) -> Result<GateVars<'g>> {
    Ok(GateVars {
        w1: p.get(&format!("{prefix}.w1"))?,
        b1: p.get(&format!("{prefix}.b1"))?,
        w2: p.get(&format!("{prefix}.w2"))?,
        b2: p.get(&format!("{prefix}.b2"))?,
    })
}

/// Row-wise gate: returns `(g, g * bypass + (1 - g) * candidate)` with `g`
/// of shape `(rows, 1)`.
pub fn gate<'g>(
    candidate: &Var<'g>,
    bypass: &Var<'g>,
    params: &GateVars<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    let (cs, bs) = (candidate.shape(), bypass.shape());
    if cs != bs || cs.len() != 2 {
        return dim_err(format!("gate candidate {cs:?} vs bypass {bs:?}"));
    }
    let joined = Var::concat(&[*candidate, *bypass], 1)?;
    let hidden = joined.affine(&params.w1, &params.b1)?.tanh();
    let g = hidden.affine(&params.w2, &params.b2)?.sigmoid();
    let combined = g.mul(bypass)?.add(&g.one_minus().mul(candidate)?)?;
    Ok((g, combined))
}

/// Result of one kernel-gated attention block.
pub struct AttentionOutput<'g> {
    /// Gated output, `(M, width)`.
    pub out: Var<'g>,
    /// Attention result before gating, `(M, width)`.
    pub candidate: Var<'g>,
    /// Kernel-weighted bypass, `(M, width)`.
    pub bypass: Var<'g>,
    /// Gate values, `(M, 1)`.
    pub gate: Var<'g>,
    /// Softmax weights before kernel weighting, `(M, sources, k)`; absent
    /// when there are no sources.
    pub softmax_weights: Option<Var<'g>>,
    /// Kernel-weighted attention weights, `(M, sources, k)`.
    pub weights: Option<Var<'g>>,
}

struct Attended<'g> {
    candidate: Var<'g>,
    softmax_weights: Var<'g>,
    weights: Var<'g>,
}

/// Shared pipeline: scores between target-side projections `(M, k, d)` and
/// source-side projections `(N, k, d)`, softmax over sources, kernel
/// weighting, value aggregation and output projection.
fn attend<'g>(
    target_proj: &Var<'g>,
    source_proj: &Var<'g>,
    values: &Var<'g>,
    out_proj: &Var<'g>,
    local: &Var<'g>,
    opts: &AttentionOptions,
) -> Result<Attended<'g>> {
    let g = target_proj.graph();
    let mut scores = source_proj.contract("nkd,mkd->mnk", target_proj)?;
    if opts.scale_scores {
        let key = target_proj.shape()[2] as f64;
        scores = scores.scale(1.0 / key.sqrt());
    }
    let ls = local.shape();
    let (m, n) = (ls[0], ls[1]);
    if opts.pre_softmax_mask {
        let bias: Vec<f64> =
            local.value().data().iter().map(|&w| if w > 0.0 { 0.0 } else { -1e30 }).collect();
        let bias = g.constant(Tensor::new(vec![m, n, 1], bias)?);
        scores = scores.add(&bias)?;
    }
    let softmax_weights = scores.softmax(1)?;
    let weights = local.reshape(&[m, n, 1])?.mul(&softmax_weights)?;
    let heads = values.shape()[1];
    let value = values.shape()[2];
    let mixed = weights.contract("mnk,nkv->mkv", values)?.reshape(&[m, heads * value])?;
    let candidate = mixed.contract("mx,xo->mo", out_proj)?;
    Ok(Attended { candidate, softmax_weights, weights })
}

/// Maps observation encodings `e: (A, E)` to module inputs `u: (M, E)`.
///
/// Queries come from the observations and keys from the module hidden states
/// `h: (M, H)`; `local: (M, A)` holds the kernel weights. With no
/// observations (`obs = None`) the candidate and bypass are zero and only the
/// gate runs.
pub fn input_attention<'g>(
    obs: Option<(&Var<'g>, &Var<'g>)>,
    h: &Var<'g>,
    params: &AttentionVars<'g>,
    gate_params: &GateVars<'g>,
    opts: &AttentionOptions,
) -> Result<AttentionOutput<'g>> {
    let g = h.graph();
    let m = h.shape()[0];
    let width = params.out.shape()[1];
    let Some((e, local)) = obs else {
        let zeros = g.constant(Tensor::zeros(&[m, width]));
        let (gv, out) = gate(&zeros, &zeros, gate_params)?;
        return Ok(AttentionOutput {
            out,
            candidate: zeros,
            bypass: zeros,
            gate: gv,
            softmax_weights: None,
            weights: None,
        });
    };
    let (es, ls) = (e.shape(), local.shape());
    if es.len() != 2 || ls != [m, es[0]] || es[1] != width {
        return dim_err(format!(
            "input attention with e {es:?}, local {ls:?}, h {:?}, width {width}",
            h.shape()
        ));
    }
    let queries = e.contract("ai,ikd->akd", &params.query)?;
    let keys = h.contract("mj,jkd->mkd", &params.key)?;
    let values = e.contract("ai,ikv->akv", &params.value)?;
    let att = attend(&keys, &queries, &values, &params.out, local, opts)?;
    let bypass = local.contract("ma,ai->mi", e)?;
    let (gv, out) = gate(&att.candidate, &bypass, gate_params)?;
    Ok(AttentionOutput {
        out,
        candidate: att.candidate,
        bypass,
        gate: gv,
        softmax_weights: Some(att.softmax_weights),
        weights: Some(att.weights),
    })
}

/// Maps module hidden states `h: (M, H)` to aggregated states `(M, H)`;
/// `local: (M, M)` holds module-pair kernel weights.
pub fn inter_cell_attention<'g>(
    h: &Var<'g>,
    local: &Var<'g>,
    params: &AttentionVars<'g>,
    gate_params: &GateVars<'g>,
    opts: &AttentionOptions,
) -> Result<AttentionOutput<'g>> {
    let (hs, ls) = (h.shape(), local.shape());
    if hs.len() != 2 || ls != [hs[0], hs[0]] || params.out.shape()[1] != hs[1] {
        return dim_err(format!("inter-cell attention with h {hs:?}, local {ls:?}"));
    }
    let queries = h.contract("mj,jkd->mkd", &params.query)?;
    let keys = h.contract("li,ikd->lkd", &params.key)?;
    let values = h.contract("li,ikv->lkv", &params.value)?;
    let att = attend(&queries, &keys, &values, &params.out, local, opts)?;
    let bypass = local.contract("ml,lj->mj", h)?;
    let (gv, out) = gate(&att.candidate, &bypass, gate_params)?;
    Ok(AttentionOutput {
        out,
        candidate: att.candidate,
        bypass,
        gate: gv,
        softmax_weights: Some(att.softmax_weights),
        weights: Some(att.weights),
    })
}

/// Kernel-weighted poll of module states: `d[q, j] = sum_m Z[q, m] h[m, j]`
/// for query kernel weights `z: (Q, M)` and `h: (M, H)`.
pub fn output_attention<'g>(h: &Var<'g>, z: &Var<'g>) -> Result<Var<'g>> {
    z.contract("qm,mj->qj", h)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::tensorcore::{Graph, Tensor};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn zero_gate<'g>(g: &'g Graph, width: usize, hidden: usize) -> GateVars<'g> {
        GateVars {
            w1: g.param(Tensor::zeros(&[2 * width, hidden])),
            b1: g.param(Tensor::zeros(&[hidden])),
            w2: g.param(Tensor::zeros(&[hidden, 1])),
            b2: g.param(Tensor::zeros(&[1])),
        }
    }

    fn random_params<'g>(g: &'g Graph, inq: usize, ink: usize, inv: usize, width: usize, s: HeadShape, seed: u64) -> (AttentionVars<'g>, GateVars<'g>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_attention(&mut store, "att", inq, ink, inv, width, s, &mut rng).unwrap();
        init_gate(&mut store, "gate", width, 5, &mut rng).unwrap();
        let bound = store.bind(g);
        (bind_attention(&bound, "att").unwrap(), bind_gate(&bound, "gate").unwrap())
    }

    #[test]
    fn scalar_input_attention_example() {
        let g = Graph::new();
        let params = AttentionVars {
            query: g.param(t(&[1, 1, 1], &[0.3])),
            key: g.param(t(&[1, 1, 1], &[-0.7])),
            value: g.param(t(&[1, 1, 1], &[2.0])),
            out: g.param(t(&[1, 1], &[1.0])),
        };
        let gate_params = zero_gate(&g, 1, 3);
        let e = g.constant(t(&[1, 1], &[1.0]));
        let local = g.constant(t(&[1, 1], &[1.0]));
        let h = g.constant(t(&[1, 1], &[0.4]));
        let out = input_attention(Some((&e, &local)), &h, &params, &gate_params, &Default::default()).unwrap();
        assert_eq!(out.candidate.value().data(), &[2.0]);
        assert_eq!(out.bypass.value().data(), &[1.0]);
        assert_eq!(out.gate.value().data(), &[0.5]);
        assert_eq!(out.out.value().data(), &[1.5]);
    }

    #[test]
    fn zero_kernel_observation_contributes_nothing() {
        let g = Graph::new();
        let s = HeadShape { heads: 2, key: 3, value: 4 };
        let (params, gate_params) = random_params(&g, 5, 6, 5, 5, s, 1);
        let e = g.constant(Tensor::new(vec![3, 5], (0..15).map(|i| (i as f64).sin()).collect()).unwrap());
        let h = g.constant(Tensor::new(vec![2, 6], (0..12).map(|i| (i as f64).cos()).collect()).unwrap());
        let local = g.constant(t(&[2, 3], &[0.5, 0.0, 1.0, 0.0, 0.3, 0.2]));
        let out = input_attention(Some((&e, &local)), &h, &params, &gate_params, &Default::default()).unwrap();
        let w = out.weights.unwrap().value();
        for k in 0..2 {
            assert_eq!(w.data()[(0 * 3 + 1) * 2 + k], 0.0);
            assert_eq!(w.data()[(1 * 3 + 0) * 2 + k], 0.0);
        }
    }

    #[test]
    fn input_attention_is_permutation_invariant() {
        let g = Graph::new();
        let s = HeadShape { heads: 2, key: 3, value: 4 };
        let (params, gate_params) = random_params(&g, 5, 6, 5, 5, s, 2);
        let ed: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin()).collect();
        let ld: Vec<f64> = (0..8).map(|i| 0.1 + 0.1 * i as f64).collect();
        let h = g.constant(Tensor::new(vec![2, 6], (0..12).map(|i| (i as f64).cos()).collect()).unwrap());
        let perm = [2usize, 0, 3, 1];
        let ep: Vec<f64> = perm.iter().flat_map(|&a| ed[a * 5..a * 5 + 5].to_vec()).collect();
        let lp: Vec<f64> = (0..2).flat_map(|m| perm.iter().map(|&a| ld[m * 4 + a]).collect::<Vec<_>>()).collect();
        let run = |e: Vec<f64>, l: Vec<f64>| {
            let e = g.constant(Tensor::new(vec![4, 5], e).unwrap());
            let l = g.constant(Tensor::new(vec![2, 4], l).unwrap());
            input_attention(Some((&e, &l)), &h, &params, &gate_params, &Default::default())
                .unwrap()
                .out
                .value()
        };
        let a = run(ed.clone(), ld.clone());
        let b = run(ep, lp);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn weights_sum_to_one_before_kernel_and_at_most_one_after() {
        let g = Graph::new();
        let s = HeadShape { heads: 3, key: 2, value: 2 };
        let (params, gate_params) = random_params(&g, 4, 4, 4, 4, s, 3);
        let e = g.constant(Tensor::new(vec![5, 4], (0..20).map(|i| (i as f64 * 1.3).sin()).collect()).unwrap());
        let h = g.constant(Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.4).cos()).collect()).unwrap());
        let local = g.constant(Tensor::new(vec![3, 5], (0..15).map(|i| (i % 4) as f64 / 3.0).collect()).unwrap());
        let out = input_attention(Some((&e, &local)), &h, &params, &gate_params, &Default::default()).unwrap();
        let (sw, w) = (out.softmax_weights.unwrap().value(), out.weights.unwrap().value());
        for m in 0..3 {
            for k in 0..3 {
                let total: f64 = (0..5).map(|a| sw.data()[(m * 5 + a) * 3 + k]).sum();
                let kernel: f64 = (0..5).map(|a| w.data()[(m * 5 + a) * 3 + k]).sum();
                assert!((total - 1.0).abs() < 1e-12);
                assert!((-1e-15..=1.0 + 1e-12).contains(&kernel));
            }
        }
    }

    #[test]
    fn no_observations_runs_gate_on_zeros() {
        let g = Graph::new();
        let s = HeadShape { heads: 2, key: 3, value: 4 };
        let (params, gate_params) = random_params(&g, 5, 6, 5, 5, s, 4);
        let h = g.constant(Tensor::ones(&[3, 6]));
        let out = input_attention(None, &h, &params, &gate_params, &Default::default()).unwrap();
        assert_eq!(out.out.shape(), vec![3, 5]);
        assert!(out.out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pre_softmax_mask_renormalizes_over_kernel_support() {
        let g = Graph::new();
        let s = HeadShape { heads: 1, key: 2, value: 2 };
        let (params, gate_params) = random_params(&g, 3, 3, 3, 3, s, 5);
        let e = g.constant(Tensor::new(vec![3, 3], (0..9).map(|i| (i as f64).sin()).collect()).unwrap());
        let h = g.constant(Tensor::ones(&[1, 3]));
        let local = g.constant(t(&[1, 3], &[1.0, 0.0, 1.0]));
        let opts = AttentionOptions { pre_softmax_mask: true, ..Default::default() };
        let out = input_attention(Some((&e, &local)), &h, &params, &gate_params, &opts).unwrap();
        let sw = out.softmax_weights.unwrap().value();
        assert_eq!(sw.data()[1], 0.0);
        assert!((sw.data()[0] + sw.data()[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_module_inter_cell_is_value_projection() {
        let g = Graph::new();
        let params = AttentionVars {
            query: g.param(t(&[1, 1, 1], &[0.9])),
            key: g.param(t(&[1, 1, 1], &[0.2])),
            value: g.param(t(&[1, 1, 1], &[3.0])),
            out: g.param(t(&[1, 1], &[1.0])),
        };
        // a very negative output bias drives the gate to 0
        let gate_params = GateVars {
            w1: g.param(Tensor::zeros(&[2, 2])),
            b1: g.param(Tensor::zeros(&[2])),
            w2: g.param(Tensor::zeros(&[2, 1])),
            b2: g.param(t(&[1], &[-800.0])),
        };
        let h = g.constant(t(&[1, 1], &[0.7]));
        let local = g.constant(t(&[1, 1], &[1.0]));
        let out = inter_cell_attention(&h, &local, &params, &gate_params, &Default::default()).unwrap();
        assert_eq!(out.softmax_weights.unwrap().value().data(), &[1.0]);
        assert!((out.out.value().data()[0] - 2.1).abs() < 1e-12);
    }

    #[test]
    fn zero_kernel_module_pair_contributes_nothing() {
        let g = Graph::new();
        let s = HeadShape { heads: 2, key: 2, value: 3 };
        let (params, gate_params) = random_params(&g, 4, 4, 4, 4, s, 6);
        let h = g.constant(Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.9).sin()).collect()).unwrap());
        let local = g.constant(t(&[3, 3], &[1.0, 0.0, 0.4, 0.0, 1.0, 0.7, 0.4, 0.7, 1.0]));
        let out = inter_cell_attention(&h, &local, &params, &gate_params, &Default::default()).unwrap();
        let w = out.weights.unwrap().value();
        for k in 0..2 {
            assert_eq!(w.data()[(0 * 3 + 1) * 2 + k], 0.0);
            assert_eq!(w.data()[(1 * 3 + 0) * 2 + k], 0.0);
        }
    }

    #[test]
    fn output_attention_examples() {
        let g = Graph::new();
        let h = g.constant(t(&[2, 1], &[2.0, 4.0]));
        let z = g.constant(t(&[1, 2], &[1.0, 0.5]));
        assert_eq!(output_attention(&h, &z).unwrap().value().data(), &[4.0]);
        let zero = g.constant(Tensor::zeros(&[1, 2]));
        assert_eq!(output_attention(&h, &zero).unwrap().value().data(), &[0.0]);
        let h1 = g.constant(t(&[1, 3], &[1.0, -2.0, 0.5]));
        let one = g.constant(t(&[1, 1], &[1.0]));
        assert_eq!(output_attention(&h1, &one).unwrap().value().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn output_attention_is_linear_in_states() {
        let g = Graph::new();
        let hd: Vec<f64> = (0..6).map(|i| (i as f64 * 0.77).sin()).collect();
        let z = g.constant(t(&[2, 3], &[0.1, 0.9, 0.0, 0.5, 0.25, 1.0]));
        let alpha = 4.0;
        let h = g.constant(Tensor::new(vec![3, 2], hd.clone()).unwrap());
        let ha = g.constant(Tensor::new(vec![3, 2], hd.iter().map(|v| v * alpha).collect()).unwrap());
        let base = output_attention(&h, &z).unwrap().value();
        let scaled = output_attention(&ha, &z).unwrap().value();
        for (a, b) in base.data().iter().zip(scaled.data()) {
            assert_eq!(a * alpha, *b);
        }
    }

    #[test]
    fn gate_examples() {
        let g = Graph::new();
        let gp = zero_gate(&g, 2, 3);
        let c = g.constant(t(&[1, 2], &[1.0, 3.0]));
        let b = g.constant(t(&[1, 2], &[3.0, 5.0]));
        let (gv, mixed) = gate(&c, &b, &gp).unwrap();
        assert_eq!(gv.value().data(), &[0.5]);
        assert_eq!(mixed.value().data(), &[2.0, 4.0]);

        let (_, same) = gate(&c, &c, &gp).unwrap();
        assert_eq!(same.value().data(), c.value().data());

        let saturated = GateVars { b2: g.param(t(&[1], &[30.0])), ..gp };
        let (gv, mixed) = gate(&c, &b, &saturated).unwrap();
        assert!(gv.value().data()[0] < 1.0);
        assert!(mixed.value().max_abs_diff(&b.value()) < 1e-12);

        let wide = g.constant(Tensor::ones(&[1, 3]));
        assert!(gate(&c, &wide, &gp).is_err());
    }

    /// Naive loop implementation of input attention with all-ones kernel
    /// weights, used as an independent reference.
    fn dense_reference(e: &Tensor, h: &Tensor, att: &AttentionVars, gate_params: &GateVars) -> Vec<f64> {
        let (a_n, ew) = (e.shape()[0], e.shape()[1]);
        let (m_n, hw) = (h.shape()[0], h.shape()[1]);
        let q = att.query.value();
        let k = att.key.value();
        let v = att.value.value();
        let o = att.out.value();
        let (heads, key) = (q.shape()[1], q.shape()[2]);
        let value = v.shape()[2];
        let width = o.shape()[1];
        let at3 = |t: &Tensor, i: usize, j: usize, l: usize| {
            let s = t.shape();
            t.data()[(i * s[1] + j) * s[2] + l]
        };
        let mut out = Vec::new();
        for m in 0..m_n {
            let mut flat = vec![0.0; heads * value];
            for hd in 0..heads {
                let mut scores = vec![0.0; a_n];
                for (a, sc) in scores.iter_mut().enumerate() {
                    for dk in 0..key {
                        let qv: f64 = (0..ew).map(|i| e.data()[a * ew + i] * at3(&q, i, hd, dk)).sum();
                        let kv: f64 = (0..hw).map(|j| h.data()[m * hw + j] * at3(&k, j, hd, dk)).sum();
                        *sc += qv * kv;
                    }
                }
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for a in 0..a_n {
                    let w = (scores[a] - mx).exp() / z;
                    for vv in 0..value {
                        let val: f64 = (0..ew).map(|i| e.data()[a * ew + i] * at3(&v, i, hd, vv)).sum();
                        flat[hd * value + vv] += w * val;
                    }
                }
            }
            let cand: Vec<f64> = (0..width)
                .map(|c| (0..heads * value).map(|x| flat[x] * o.data()[x * width + c]).sum())
                .collect();
            let byp: Vec<f64> = (0..ew).map(|i| (0..a_n).map(|a| e.data()[a * ew + i]).sum()).collect();
            let w1 = gate_params.w1.value();
            let b1 = gate_params.b1.value();
            let w2 = gate_params.w2.value();
            let b2 = gate_params.b2.value();
            let hid = b1.len();
            let joined: Vec<f64> = cand.iter().chain(byp.iter()).cloned().collect();
            let mut logit = b2.data()[0];
            for j in 0..hid {
                let pre: f64 = b1.data()[j] + (0..joined.len()).map(|i| joined[i] * w1.data()[i * hid + j]).sum::<f64>();
                logit += pre.tanh() * w2.data()[j];
            }
            let gv = 1.0 / (1.0 + (-logit).exp());
            out.extend((0..width).map(|c| gv * byp[c] + (1.0 - gv) * cand[c]));
        }
        out
    }

    #[test]
    fn dense_kernel_matches_reference() {
        use crate::geometry::{embed_positions, kernel_batch, KernelConfig, ModuleEmbeddings};
        let g = Graph::new();
        let s = HeadShape { heads: 2, key: 3, value: 2 };
        let (params, gate_params) = random_params(&g, 4, 5, 4, 4, s, 7);
        let e = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.31).sin()).collect()).unwrap();
        let h = Tensor::new(vec![2, 5], (0..10).map(|i| (i as f64 * 0.57).cos()).collect()).unwrap();
        let bank = ModuleEmbeddings::random(2, 8, 3).unwrap();
        let obs_pos = embed_positions(&[[3.0, 4.0], [40.0, 2.0], [20.0, 30.0]], 8).unwrap();
        let local = kernel_batch(&g.constant(bank.rows.clone()), &g.constant(obs_pos), &KernelConfig::dense()).unwrap();
        assert!(local.value().data().iter().all(|&z| z == 1.0));
        let (ev, hv) = (g.constant(e.clone()), g.constant(h.clone()));
        let out = input_attention(Some((&ev, &local)), &hv, &params, &gate_params, &Default::default()).unwrap();
        let reference = dense_reference(&e, &h, &params, &gate_params);
        for (a, b) in out.out.value().data().iter().zip(&reference) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    fn composition<'g>(g: &'g Graph, xs: &[Var<'g>], names: &[String]) -> Result<Var<'g>> {
        let get = |n: &str| xs[names.iter().position(|x| x == n).unwrap()];
        let att = |p: &str| AttentionVars {
            query: get(&format!("{p}.q")),
            key: get(&format!("{p}.k")),
            value: get(&format!("{p}.v")),
            out: get(&format!("{p}.o")),
        };
        let gt = |p: &str| GateVars {
            w1: get(&format!("{p}.w1")),
            b1: get(&format!("{p}.b1")),
            w2: get(&format!("{p}.w2")),
            b2: get(&format!("{p}.b2")),
        };
        let e = xs[names.len()];
        let h = xs[names.len() + 1];
        let local_in = g.constant(t(&[3, 2], &[0.9, 0.2, 0.5, 1.0, 0.3, 0.7]));
        let local_ic = g.constant(t(&[3, 3], &[1.0, 0.4, 0.6, 0.4, 1.0, 0.8, 0.6, 0.8, 1.0]));
        let opts = AttentionOptions::default();
        let u = input_attention(Some((&e, &local_in)), &h, &att("in"), &gt("gin"), &opts)?.out;
        let hbar = inter_cell_attention(&h, &local_ic, &att("ic"), &gt("gic"), &opts)?.out;
        let hu = Var::concat(&[u, hbar], 1)?;
        Ok(hu.mul(&hu)?.sum())
    }

    #[test]
    fn composition_passes_grad_check() {
        use crate::tensorcore::grad_check_many;
        let s = HeadShape { heads: 2, key: 2, value: 3 };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        init_attention(&mut store, "in", 3, 4, 3, 3, s, &mut rng).unwrap();
        init_gate(&mut store, "gin", 3, 4, &mut rng).unwrap();
        init_attention(&mut store, "ic", 4, 4, 4, 4, s, &mut rng).unwrap();
        init_gate(&mut store, "gic", 4, 4, &mut rng).unwrap();
        let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
        inputs.push(Tensor::new(vec![2, 3], (0..6).map(|i| (i as f64 * 0.9).sin()).collect()).unwrap());
        inputs.push(Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.4).cos()).collect()).unwrap());
        let names: Vec<String> = store.names().map(|n| n.to_string()).collect();
        let err = grad_check_many(|g, xs| composition(g, xs, &names), &inputs, 1e-6).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
