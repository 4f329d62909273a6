//! Finite-difference gradient checks over every differentiable building
//! block and over one full structured-model step with its query and loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    bind_attention, bind_gate, gate, init_attention, init_gate, inter_cell_attention, input_attention,
    output_attention, AttentionOptions, HeadShape,
};
use crate::codec::{bind_mlp, decode, encode, encode_with_position, init_mlp, CROP_PIXELS};
use crate::geometry::{kernel_batch, KernelConfig};
use crate::recurrent::{
    bind_gru, bind_lstm, gru_step, init_gru, init_lstm, lstm_step, Model, ModelConfig, ModelKind, Observations,
    State,
};
use crate::tensorcore::{grad_check_many, BoundParams, Graph, ParamStore, Tensor, Var};
use crate::Result;

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: &'static str,
    pub relative_error: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.relative_error < TOLERANCE
    }
}

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..=scale)).collect())
}

fn unit_rows(rows: usize, d: usize, seed: u64) -> Tensor {
    let mut t = random(&[rows, d], seed, 1.0);
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

fn binary(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_bool(0.3) as u8 as f64).collect())
}

/// Weighted sum so that every output component carries a distinct gradient.
fn probe<'g>(v: Var<'g>) -> Result<Var<'g>> {
    let shape = v.shape();
    let n: usize = shape.iter().product();
    let w = Tensor::from_parts(shape, (0..n).map(|i| ((i as f64 + 1.0) * 0.77).sin()).collect());
    Ok(v.mul(&v.graph().constant(w))?.sum())
}

type StoreLoss = for<'g> fn(&'g Graph, &BoundParams<'g>, &[Var<'g>]) -> Result<Var<'g>>;

/// Checks `loss` with respect to every parameter of `store` and every extra input.
fn store_case(store: &ParamStore, extra: Vec<Tensor>, loss: StoreLoss) -> Result<f64> {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    inputs.extend(extra);
    grad_check_many(
        |g, xs| {
            let bound = BoundParams::from_vars(names.iter().cloned().zip(xs.iter().copied()));
            loss(g, &bound, &xs[names.len()..])
        },
        &inputs,
        STEP,
    )
}

fn primitives() -> Result<Vec<GradCase>> {
    let x = random(&[3, 4], 1, 1.0);
    let y = random(&[4, 2], 2, 1.0);
    let b4 = random(&[4], 3, 1.0);
    let b31 = random(&[3, 1], 4, 1.0);
    let x2 = random(&[3, 4], 5, 1.0);
    let targets = binary(&[3, 4], 6);
    let one = |f: for<'g> fn(Var<'g>) -> Result<Var<'g>>| grad_check_many(|_, v| f(v[0]), std::slice::from_ref(&x), STEP);
    let cases = vec![
        ("contract", grad_check_many(|_, v| probe(v[0].contract("ij,jk->ik", &v[1])?), &[x.clone(), y.clone()], STEP)?),
        (
            "contract-batched",
            grad_check_many(
                |_, v| probe(v[0].contract("mak,akv->mkv", &v[1])?),
                &[random(&[2, 3, 2], 7, 1.0), random(&[3, 2, 4], 8, 1.0)],
                STEP,
            )?,
        ),
        ("add-broadcast", grad_check_many(|_, v| probe(v[0].add(&v[1])?), &[x.clone(), b4.clone()], STEP)?),
        ("sub-broadcast", grad_check_many(|_, v| probe(v[0].sub(&v[1])?), &[x.clone(), b31.clone()], STEP)?),
        ("mul", grad_check_many(|_, v| probe(v[0].mul(&v[1])?), &[x.clone(), x2.clone()], STEP)?),
        ("mul-self", one(|v| probe(v.mul(&v)?))?),
        ("scale", one(|v| probe(v.scale(-1.5).add_scalar(2.0)))?),
        ("one-minus", one(|v| probe(v.one_minus()))?),
        ("exp", one(|v| probe(v.exp()))?),
        ("tanh", one(|v| probe(v.tanh()))?),
        ("sigmoid", one(|v| probe(v.sigmoid()))?),
        ("relu", one(|v| probe(v.relu()))?),
        ("softmax-0", one(|v| probe(v.softmax(0)?))?),
        ("softmax-1", one(|v| probe(v.softmax(1)?))?),
        ("reduce-sum", one(|v| probe(v.reduce_sum(0)?))?),
        ("mean", one(|v| Ok(v.mul(&v)?.mean()))?),
        ("concat", grad_check_many(|_, v| probe(Var::concat(&[v[0], v[1]], 0)?), &[x.clone(), x2.clone()], STEP)?),
        ("narrow", one(|v| probe(v.narrow(1, 1, 2)?))?),
        ("reshape", one(|v| probe(v.reshape(&[2, 6])?))?),
        (
            "affine",
            grad_check_many(
                |_, v| probe(v[0].affine(&v[1], &v[2])?),
                &[x.clone(), y.clone(), random(&[2], 9, 1.0)],
                STEP,
            )?,
        ),
        ("l2-normalize", one(|v| probe(v.l2_normalize(1)?))?),
        ("bce-with-logits", grad_check_many(|_, v| v[0].bce_with_logits(&targets), std::slice::from_ref(&x), STEP)?),
    ];
    Ok(cases.into_iter().map(|(name, relative_error)| GradCase { name, relative_error }).collect())
}

fn kernel_loss<'g>(_g: &'g Graph, xs: &[Var<'g>]) -> Result<Var<'g>> {
    let cfg = KernelConfig { epsilon: 0.7, tau: -1.0 };
    probe(kernel_batch(&xs[0], &xs[1], &cfg)?)
}

fn gate_loss<'g>(_g: &'g Graph, p: &BoundParams<'g>, xs: &[Var<'g>]) -> Result<Var<'g>> {
    let (g, combined) = gate(&xs[0], &xs[1], &bind_gate(p, "gate")?)?;
    Ok(probe(combined)?.add(&probe(g)?)?)
}

fn input_attention_loss<'g>(_g: &'g Graph, p: &BoundParams<'g>, xs: &[Var<'g>]) -> Result<Var<'g>> {
    let local = xs[2].sigmoid();
    let out = input_attention(
        Some((&xs[0], &local)),
        &xs[1],
        &bind_attention(p, "att")?,
        &bind_gate(p, "gate")?,
        &AttentionOptions::default(),
    )?;
    probe(out.out)
}

fn inter_cell_loss<'g>(_g: &'g Graph, p: &BoundParams<'g>, xs: &[Var<'g>]) -> Result<Var<'g>> {
    let local = xs[1].sigmoid();
    let out = inter_cell_attention(&xs[0], &local, &bind_attention(p, "att")?, &bind_gate(p, "gate")?, &AttentionOptions::default())?;
    probe(out.out)
}

fn output_attention_loss<'g>(_g: &'g Graph, xs: &[Var<'g>]) -> Result<Var<'g>> {
    probe(output_attention(&xs[0], &xs[1])?)
}

fn codec_loss<'g>(g: &'g Graph, p: &BoundParams<'g>, xs: &[Var<'g>]) -> Result<Var<'g>> {
    let crops = g.constant(binary(&[3, CROP_PIXELS], 21));
    let z = encode(&crops, &bind_mlp(p, "enc")?)?;
    let zp = encode_with_position(&crops, &xs[0], &bind_mlp(p, "encp")?)?;
    let logits = decode(&z.add(&zp)?, &bind_mlp(p, "dec")?)?;
    logits.bce_with_logits(&binary(&[3, CROP_PIXELS], 22))
}

fn gru_loss<'g>(_g: &'g Graph, p: &BoundParams<'g>, xs: &[Var<'g>]) -> Result<Var<'g>> {
    probe(gru_step(&xs[0], &xs[1], &bind_gru(p, "gru")?)?)
}

fn lstm_loss<'g>(_g: &'g Graph, p: &BoundParams<'g>, xs: &[Var<'g>]) -> Result<Var<'g>> {
    let (h, c) = lstm_step(&xs[0], &xs[1], &xs[2], &bind_lstm(p, "lstm")?)?;
    Ok(probe(h)?.add(&probe(c.scale(0.5))?)?)
}

/// Reduced configuration of the full-step check: two modules, width four.
pub fn composition_config() -> ModelConfig {
    ModelConfig {
        modules: 2,
        hidden: 4,
        embed_dim: 8,
        encoding: 5,
        kernel: KernelConfig { epsilon: 1.0, tau: -1.0 },
        input_heads: HeadShape { heads: 2, key: 3, value: 2 },
        inter_heads: HeadShape { heads: 2, key: 3, value: 2 },
        gate_hidden: 3,
        codec_hidden: 6,
        seed: 13,
        ..ModelConfig::desk(ModelKind::S2Gru)
    }
}

fn composition_observations() -> Observations {
    let centers = vec![[8.0, 30.0], [21.0, 12.0], [40.0, 41.0]];
    Observations::new(centers, binary(&[3, CROP_PIXELS], 31).into_data()).expect("valid observations")
}

const COMPOSITION_QUERIES: [[f64; 2]; 2] = [[10.0, 28.0], [35.0, 40.0]];

fn composition_loss<'g>(_g: &'g Graph, p: &BoundParams<'g>, xs: &[Var<'g>]) -> Result<Var<'g>> {
    let model = Model::new(composition_config())?;
    let vars = model.vars(p)?;
    let state = State { h: xs[0], c: None };
    let next = model.step(&vars, &state, &composition_observations(), None)?;
    let logits = model.query(&vars, &next, &COMPOSITION_QUERIES)?;
    logits.bce_with_logits(&binary(&[COMPOSITION_QUERIES.len(), CROP_PIXELS], 32))
}

/// Runs every check and reports the worst relative error of each.
pub fn run() -> Result<Vec<GradCase>> {
    let mut cases = primitives()?;
    let mut push = |name, relative_error| cases.push(GradCase { name, relative_error });
    let mut rng = ChaCha8Rng::seed_from_u64(17);

    push("kernel", grad_check_many(kernel_loss, &[unit_rows(3, 5, 41), unit_rows(4, 5, 42)], STEP)?);

    let mut store = ParamStore::new();
    init_gate(&mut store, "gate", 4, 3, &mut rng)?;
    push("gate", store_case(&store, vec![random(&[3, 4], 43, 1.0), random(&[3, 4], 44, 1.0)], gate_loss)?);

    let shape = HeadShape { heads: 2, key: 3, value: 2 };
    let mut store = ParamStore::new();
    init_attention(&mut store, "att", 5, 4, 5, 5, shape, &mut rng)?;
    init_gate(&mut store, "gate", 5, 3, &mut rng)?;
    push(
        "input-attention",
        store_case(
            &store,
            vec![random(&[3, 5], 45, 1.0), random(&[2, 4], 46, 1.0), random(&[2, 3], 47, 1.0)],
            input_attention_loss,
        )?,
    );

    let mut store = ParamStore::new();
    init_attention(&mut store, "att", 4, 4, 4, 4, shape, &mut rng)?;
    init_gate(&mut store, "gate", 4, 3, &mut rng)?;
    push(
        "inter-cell-attention",
        store_case(&store, vec![random(&[3, 4], 48, 1.0), random(&[3, 3], 49, 1.0)], inter_cell_loss)?,
    );

    push(
        "output-attention",
        grad_check_many(output_attention_loss, &[random(&[3, 4], 50, 1.0), random(&[2, 3], 51, 1.0)], STEP)?,
    );

    let mut store = ParamStore::new();
    init_mlp(&mut store, "enc", CROP_PIXELS, 6, 5, &mut rng)?;
    init_mlp(&mut store, "encp", CROP_PIXELS + 4, 6, 5, &mut rng)?;
    init_mlp(&mut store, "dec", 5, 6, CROP_PIXELS, &mut rng)?;
    push("codec-bce", store_case(&store, vec![unit_rows(3, 4, 52)], codec_loss)?);

    let mut store = ParamStore::new();
    init_gru(&mut store, "gru", 2, 3, 4, &mut rng)?;
    for (i, (_, t)) in store.iter_mut().enumerate() {
        if t.rank() == 2 {
            *t = random(t.shape(), 60 + i as u64, 0.5);
        }
    }
    push("gru-step", store_case(&store, vec![random(&[2, 3], 53, 1.0), random(&[2, 4], 54, 1.0)], gru_loss)?);

    let mut store = ParamStore::new();
    init_lstm(&mut store, "lstm", 2, 3, 4, &mut rng)?;
    push(
        "lstm-step",
        store_case(
            &store,
            vec![random(&[2, 3], 55, 1.0), random(&[2, 4], 56, 1.0), random(&[2, 4], 57, 1.0)],
            lstm_loss,
        )?,
    );

    let model = Model::new(composition_config())?;
    push("s2rm-step-query-bce", store_case(model.params(), vec![random(&[2, 4], 58, 1.0)], composition_loss)?);
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes() {
        let cases = run().unwrap();
        assert!(cases.len() >= 30);
        for c in &cases {
            assert!(c.passed(), "{}: relative error {}", c.name, c.relative_error);
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // straight-through masking deliberately disagrees with finite differences
        let err = grad_check_many(
            |_, v| Ok(v[0].straight_through_mask(&[true, false])?.sum()),
            &[Tensor::vector(vec![0.3, 0.4]).unwrap()],
            STEP,
        )
        .unwrap();
        assert!(err > TOLERANCE);
    }
}
