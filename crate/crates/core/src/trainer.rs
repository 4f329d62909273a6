//! Loss, optimizer, learning-rate schedule, training loop and checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::renormalize_embeddings;
use crate::recurrent::{Model, ModelConfig, EMBEDDING_PARAM};
use crate::tensorcore::{bce_term, BoundParams, Graph, ParamStore, Tensor, Var};
use crate::worldsim::{Dataset, Episode};

/// Mean binary cross-entropy of `logits` against binary `targets`, in the
/// stable logit form.
pub fn bce_loss(logits: &[f64], targets: &[f64]) -> Result<f64> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::Dimension(format!(
            "{} logits against {} targets",
            logits.len(),
            targets.len()
        )));
    }
    Ok(logits.iter().zip(targets).map(|(&l, &t)| bce_term(l, t)).sum::<f64>() / logits.len() as f64)
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Bias-corrected Adam update of every parameter, in store order,
    /// followed by re-projection of the module-embedding bank.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Dimension(format!(
                "{} gradients and {} moment buffers for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (name, p)) in params.iter_mut().enumerate() {
            let g = &grads[k];
            if g.shape() != p.shape() {
                return Err(Error::Dimension(format!("gradient of `{name}` has shape {:?}", g.shape())));
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        if let Some(bank) = params.get_mut(EMBEDDING_PARAM) {
            renormalize_embeddings(bank)?;
        }
        Ok(())
    }
}

/// Scales `grads` in place so that their joint L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Divides the learning rate by `factor` once the validation loss has gone
/// `patience` epochs without a relative improvement of `threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub threshold: f64,
    pub patience: usize,
    pub best: f64,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, threshold: f64, patience: usize) -> Self {
        Self { lr, factor, threshold, patience, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Records one epoch's validation loss and returns the learning rate for
    /// the next epoch.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best * (1.0 - self.threshold) {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr /= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip: f64,
    pub plateau_factor: f64,
    pub plateau_threshold: f64,
    pub plateau_patience: usize,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            lr: 3e-3,
            batch: 8,
            epochs: 40,
            seed: 0,
            clip: 5.0,
            plateau_factor: 2.0,
            plateau_threshold: 1e-4,
            plateau_patience: 5,
        }
    }

    pub fn paper() -> Self {
        Self { lr: 3e-4, batch: 32, epochs: 100, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch == 0 || self.epochs == 0 || self.plateau_patience == 0 {
            return Err(Error::Config("batch, epochs and patience must be positive".into()));
        }
        if !(self.plateau_factor > 1.0) {
            return Err(Error::Config(format!("plateau divisor {} must exceed 1", self.plateau_factor)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip norm {} must be positive", self.clip)));
        }
        Ok(())
    }
}

/// Teacher-forced one-step loss of one episode: after observing step `t`,
/// predict the crops of step `t + 1` at that step's view centers.
pub fn episode_loss<'g>(
    g: &'g Graph,
    model: &Model,
    params: &BoundParams<'g>,
    ep: &Episode,
) -> Result<Var<'g>> {
    if ep.len() < 2 {
        return Err(Error::Input("an episode needs at least two frames".into()));
    }
    let vars = model.vars(params)?;
    let mut state = model.initial_state(g);
    let mut logits = Vec::with_capacity(ep.len() - 1);
    let mut targets = Vec::new();
    let mut next = ep.observations(0);
    for t in 0..ep.len() - 1 {
        let obs = next;
        next = ep.observations(t + 1);
        state = model.step(&vars, &state, &obs, Some(&next))?;
        if next.is_empty() {
            continue;
        }
        logits.push(model.query(&vars, &state, next.centers())?);
        targets.extend_from_slice(next.crops());
    }
    if logits.is_empty() {
        return Err(Error::Input("episode has no views to predict".into()));
    }
    let all = Var::concat(&logits, 0)?;
    let shape = all.shape();
    all.bce_with_logits(&Tensor::new(shape, targets)?)
}

/// Loss and parameter gradients (store order) of one episode.
pub fn episode_gradients(model: &Model, ep: &Episode) -> Result<(f64, Vec<Tensor>)> {
    let g = Graph::new();
    let bound = model.params().bind(&g);
    let loss = episode_loss(&g, model, &bound, ep)?;
    let value = loss.value().item()?;
    let grads = g.backward(loss);
    Ok((value, bound.grads(&grads)))
}

/// Mean per-episode loss over a dataset without gradients.
pub fn dataset_loss(model: &Model, data: &Dataset) -> Result<f64> {
    let losses: Vec<f64> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let ep = data.episode(i)?;
            let g = Graph::new();
            let bound = model.params().bind_frozen(&g);
            episode_loss(&g, model, &bound, &ep)?.value().item()
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// CSV text with header `epoch,lr,train_loss,val_loss`.
pub fn epochs_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_loss\n");
    for l in logs {
        s.push_str(&format!("{},{:e},{:.9},{:.9}\n", l.epoch, l.lr, l.train_loss, l.val_loss));
    }
    s
}

pub struct TrainReport {
    /// Parameters at the epoch with the lowest validation loss.
    pub best: Checkpoint,
    pub epochs: Vec<EpochLog>,
}

/// Trains `model` in place on `train`, selecting the parameters with the
/// lowest loss on `val`. `on_epoch` sees every epoch's log as it completes.
///
/// Episodes of a batch are processed in parallel and their gradients are
/// summed in batch order, so results do not depend on the thread count.
pub fn train(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    let mut adam = Adam::new(model.params());
    let mut plateau = Plateau::new(cfg.lr, cfg.plateau_factor, cfg.plateau_threshold, cfg.plateau_patience);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;
    for epoch in 1..=cfg.epochs {
        let lr = plateau.lr;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch).enumerate() {
            let results: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| episode_gradients(model, &train.episode(i)?))
                .collect::<Result<_>>()?;
            let n = results.len() as f64;
            let mut loss = 0.0;
            let mut grads: Vec<Tensor> = model.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
            for (l, gs) in &results {
                loss += l;
                for (acc, g) in grads.iter_mut().zip(gs) {
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, v)| *a += v / n);
                }
            }
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                let seeds: Vec<u64> = batch.iter().map(|&i| train.episode(i).map(|e| e.seed)).collect::<Result<_>>()?;
                return Err(Error::Numeric(format!(
                    "non-finite loss in epoch {epoch}, batch {b}; episode seeds {seeds:?}"
                )));
            }
            total += loss;
            clip_global_norm(&mut grads, cfg.clip);
            adam.update(model.params_mut(), &grads, lr)?;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = dataset_loss(model, val)?;
        let log = EpochLog { epoch, lr, train_loss, val_loss };
        on_epoch(&log);
        logs.push(log);
        if best.as_ref().is_none_or(|c| val_loss < c.val_loss) {
            best = Some(Checkpoint::from_model(model, Some(&adam), epoch, val_loss));
        }
        plateau.step(val_loss);
    }
    Ok(TrainReport { best: best.expect("at least one epoch ran"), epochs: logs })
}

const CKPT_MAGIC: &[u8; 9] = b"S2RMCKPT1";
const CKPT_VERSION: u32 = 1;

/// Serialized model and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<Adam>,
    pub epoch: usize,
    pub val_loss: f64,
}

impl Checkpoint {
    pub fn from_model(model: &Model, optimizer: Option<&Adam>, epoch: usize, val_loss: f64) -> Self {
        Self {
            config: model.config().clone(),
            tensors: model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            optimizer: optimizer.cloned(),
            epoch,
            val_loss,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut store = ParamStore::new();
        for (n, t) in &self.tensors {
            store.insert(n.clone(), t.clone())?;
        }
        Model::from_parts(self.config.clone(), store)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = std::collections::HashSet::new();
        for (n, _) in &self.tensors {
            if !seen.insert(n.as_str()) {
                return Err(Error::Config(format!("duplicate tensor name `{n}` in checkpoint")));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let words = self.config.to_words();
        out.extend_from_slice(&(words.len() as u32).to_le_bytes());
        for w in words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.val_loss.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            write_tensor(&mut out, name, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                for v in [a.beta1, a.beta2, a.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&a.step.to_le_bytes());
                out.extend_from_slice(&(a.m.len() as u32).to_le_bytes());
                for t in a.m.iter().chain(&a.v) {
                    write_tensor(&mut out, "", t);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(CKPT_MAGIC.len())? != CKPT_MAGIC {
            return Err(Error::Format { offset: 0, msg: "not a checkpoint (bad magic)".into() });
        }
        let version_at = r.at;
        if r.u32()? != CKPT_VERSION {
            return Err(Error::Format { offset: version_at as u64, msg: "unsupported checkpoint version".into() });
        }
        let n_words = r.u32()? as usize;
        let words: Vec<u64> = (0..n_words).map(|_| r.u64()).collect::<Result<_>>()?;
        let config = ModelConfig::from_words(&words)?;
        let epoch = r.u64()? as usize;
        let val_loss = r.f64()?;
        let n = r.u32()? as usize;
        let tensors = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
                let step = r.u64()?;
                let k = r.u32()? as usize;
                let m = (0..k).map(|_| r.tensor().map(|(_, t)| t)).collect::<Result<Vec<_>>>()?;
                let v = (0..k).map(|_| r.tensor().map(|(_, t)| t)).collect::<Result<Vec<_>>>()?;
                Some(Adam { beta1, beta2, eps, step, m, v })
            }
            f => return Err(Error::Format { offset: (r.at - 1) as u64, msg: format!("bad optimizer flag {f}") }),
        };
        if r.at != bytes.len() {
            return Err(Error::Format { offset: r.at as u64, msg: "trailing bytes after checkpoint".into() });
        }
        Ok(Self { config, tensors, optimizer, epoch, val_loss })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.bytes.len() as u64,
            msg: format!("truncated: needed {n} bytes at offset {}", self.at),
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let start = self.at;
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format { offset: start as u64, msg: "tensor name is not UTF-8".into() })?;
        let rank = self.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format {
            offset: start as u64,
            msg: "tensor size overflows".into(),
        })?;
        let data: Vec<f64> = (0..count).map(|_| self.f64()).collect::<Result<_>>()?;
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Format { offset: start as u64, msg: format!("bad tensor `{name}`: {e}") })?;
        Ok((name, t))
    }
}

#[cfg(test)]
mod tests;
