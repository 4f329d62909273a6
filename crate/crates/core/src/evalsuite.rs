//! Metrics, one-step evaluation, the rollout protocol, enclave maps,
//! dropped-view robustness sweeps and frame stitching.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::{CROP, CROP_PIXELS};
use crate::geometry::{embed_position, kernel};
use crate::recurrent::{Model, ModelKind, Observations, Runner};
use crate::worldsim::{center_position, random_center, splitmix, Dataset, Episode, FRAME, FRAME_PIXELS, HALF};
use crate::{Error, Result};

/// Pixel confusion counts with predictions thresholded at 0.5.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    /// Counts `probabilities >= 0.5` against binary `targets`.
    pub fn from_predictions(probabilities: &[f64], targets: &[f64]) -> Self {
        let mut c = Self::default();
        c.add(probabilities, targets);
        c
    }

    pub fn add(&mut self, probabilities: &[f64], targets: &[f64]) {
        for (&p, &t) in probabilities.iter().zip(targets) {
            match (p >= 0.5, t >= 0.5) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, false) => self.tn += 1,
                (false, true) => self.fn_ += 1,
            }
        }
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self { tp: self.tp + other.tp, fp: self.fp + other.fp, tn: self.tn + other.tn, fn_: self.fn_ + other.fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Balanced accuracy and whether it had to fall back to a single term
/// because one target class never occurs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BalancedAccuracy {
    pub value: f64,
    pub flagged: bool,
}

/// Mean of recall and specificity. When a target class is absent its term is
/// undefined; the defined term is reported alone and the result flagged.
pub fn balanced_accuracy(c: &Confusion) -> BalancedAccuracy {
    let pos = c.tp + c.fn_;
    let neg = c.tn + c.fp;
    let recall = (pos > 0).then(|| c.tp as f64 / pos as f64);
    let specificity = (neg > 0).then(|| c.tn as f64 / neg as f64);
    match (recall, specificity) {
        (Some(r), Some(s)) => BalancedAccuracy { value: (r + s) / 2.0, flagged: false },
        (Some(v), None) | (None, Some(v)) => BalancedAccuracy { value: v, flagged: true },
        (None, None) => BalancedAccuracy { value: 0.0, flagged: true },
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0 or undefined.
pub fn f1(c: &Confusion) -> f64 {
    let precision = if c.tp + c.fp > 0 { c.tp as f64 / (c.tp + c.fp) as f64 } else { 0.0 };
    let recall = if c.tp + c.fn_ > 0 { c.tp as f64 / (c.tp + c.fn_) as f64 } else { 0.0 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

const PROB_FLOOR: f64 = 1e-12;

/// Binary cross-entropy of a probability, with the probability clamped to
/// `[1e-12, 1 - 1e-12]` so that hard predictors score finitely.
pub fn bce_probability(p: f64, target: f64) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// A predictor evaluated one episode at a time.
pub trait Predictor: Sync {
    fn name(&self) -> String;
    /// Starts a fresh pass over `episode`. Only ground-truth stubs may look
    /// at the episode's frames.
    fn start<'a>(&'a self, episode: &'a Episode) -> Box<dyn Session + 'a>;
}

/// Per-episode predictor state.
pub trait Session {
    /// Consumes one step of observations. `lookahead` holds next-step views
    /// for predictors that are defined on them.
    fn observe(&mut self, obs: &Observations, lookahead: Option<&Observations>) -> Result<()>;
    /// Pixel probabilities of the next frame's crops at `centers`,
    /// concatenated in query order.
    fn predict(&mut self, centers: &[[usize; 2]]) -> Result<Vec<f64>>;
}

/// Wraps a trained model.
pub struct ModelPredictor<'m>(pub &'m Model);

struct ModelSession<'m> {
    runner: Runner<'m>,
}

impl Predictor for ModelPredictor<'_> {
    fn name(&self) -> String {
        self.0.kind().name().to_string()
    }

    fn start<'a>(&'a self, _: &'a Episode) -> Box<dyn Session + 'a> {
        Box::new(ModelSession { runner: Runner::new(self.0) })
    }
}

impl Session for ModelSession<'_> {
    fn observe(&mut self, obs: &Observations, lookahead: Option<&Observations>) -> Result<()> {
        self.runner.observe(obs, lookahead)
    }

    fn predict(&mut self, centers: &[[usize; 2]]) -> Result<Vec<f64>> {
        if centers.is_empty() {
            return Ok(Vec::new());
        }
        let positions: Vec<[f64; 2]> = centers.iter().map(|&c| center_position(c)).collect();
        Ok(self.runner.predict(&positions)?.into_data())
    }
}

/// Predicts the same probability for every pixel.
pub struct Constant(pub f64);

impl Predictor for Constant {
    fn name(&self) -> String {
        format!("constant-{}", self.0)
    }

    fn start<'a>(&'a self, _: &'a Episode) -> Box<dyn Session + 'a> {
        Box::new(ConstantSession(self.0))
    }
}

struct ConstantSession(f64);

impl Session for ConstantSession {
    fn observe(&mut self, _: &Observations, _: Option<&Observations>) -> Result<()> {
        Ok(())
    }

    fn predict(&mut self, centers: &[[usize; 2]]) -> Result<Vec<f64>> {
        Ok(vec![self.0; centers.len() * CROP_PIXELS])
    }
}

/// Pastes the crops of the latest step onto a blank canvas and predicts the
/// canvas; pixels no current view covers are predicted as 0.
pub struct CopyPrevious;

impl Predictor for CopyPrevious {
    fn name(&self) -> String {
        "copy-previous".into()
    }

    fn start<'a>(&'a self, _: &'a Episode) -> Box<dyn Session + 'a> {
        Box::new(CopySession { canvas: vec![0.0; FRAME_PIXELS] })
    }
}

struct CopySession {
    canvas: Vec<f64>,
}

impl Session for CopySession {
    fn observe(&mut self, obs: &Observations, _: Option<&Observations>) -> Result<()> {
        self.canvas.iter_mut().for_each(|v| *v = 0.0);
        for (a, c) in obs.centers().iter().enumerate() {
            let center = pixel_center(*c)?;
            paste(&mut self.canvas, center, obs.crop(a));
        }
        Ok(())
    }

    fn predict(&mut self, centers: &[[usize; 2]]) -> Result<Vec<f64>> {
        Ok(centers.iter().flat_map(|&c| crop_of(&self.canvas, c)).collect())
    }
}

/// Answers every query with the ground-truth crop of the next frame.
pub struct Oracle;

impl Predictor for Oracle {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn start<'a>(&'a self, episode: &'a Episode) -> Box<dyn Session + 'a> {
        Box::new(OracleSession { episode, seen: 0 })
    }
}

struct OracleSession<'a> {
    episode: &'a Episode,
    seen: usize,
}

impl Session for OracleSession<'_> {
    fn observe(&mut self, _: &Observations, _: Option<&Observations>) -> Result<()> {
        self.seen += 1;
        Ok(())
    }

    fn predict(&mut self, centers: &[[usize; 2]]) -> Result<Vec<f64>> {
        let frame = self
            .episode
            .frames
            .get(self.seen)
            .ok_or_else(|| Error::Input(format!("no ground truth for frame {}", self.seen)))?;
        Ok(centers.iter().flat_map(|&c| frame.crop(c)).collect())
    }
}

fn pixel_center(p: [f64; 2]) -> Result<[usize; 2]> {
    let ok = |v: f64| v.fract() == 0.0 && (HALF as f64..=(FRAME - 1 - HALF) as f64).contains(&v);
    if ok(p[0]) && ok(p[1]) {
        Ok([p[0] as usize, p[1] as usize])
    } else {
        Err(Error::Input(format!("position {p:?} is not a valid view center")))
    }
}

fn paste(canvas: &mut [f64], center: [usize; 2], crop: &[f64]) {
    for i in 0..CROP {
        let row = center[0] + i - HALF;
        let start = row * FRAME + center[1] - HALF;
        canvas[start..start + CROP].copy_from_slice(&crop[i * CROP..(i + 1) * CROP]);
    }
}

fn crop_of(canvas: &[f64], center: [usize; 2]) -> Vec<f64> {
    let mut out = Vec::with_capacity(CROP_PIXELS);
    for i in 0..CROP {
        let start = (center[0] + i - HALF) * FRAME + center[1] - HALF;
        out.extend_from_slice(&canvas[start..start + CROP]);
    }
    out
}

/// Number of views kept out of `available` at a drop fraction.
pub fn kept_views(available: usize, drop_fraction: f64) -> usize {
    // the small slack keeps e.g. (1 - 0.7) * 10 = 3.0000000000000004 at 3
    ((((1.0 - drop_fraction) * available as f64) - 1e-9).ceil().max(0.0) as usize).min(available)
}

/// Seeded subset of view indices (ascending) kept at step `t` of an episode.
pub fn subsample(available: usize, drop_fraction: f64, seed: u64, episode_seed: u64, t: usize) -> Vec<usize> {
    let keep = kept_views(available, drop_fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ episode_seed, t as u64));
    let mut idx = sample(&mut rng, available, keep).into_vec();
    idx.sort_unstable();
    idx
}

/// One row of a metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub dataset: String,
    pub n_balls: usize,
    pub drop_fraction: f64,
    pub confusion: Confusion,
    pub balanced_accuracy: f64,
    pub f1: f64,
    pub mean_bce: f64,
    /// A target class was absent, so balanced accuracy is a single term.
    pub flagged: bool,
}

impl MetricsRow {
    fn new(dataset: &str, n_balls: usize, drop_fraction: f64, confusion: Confusion, bce_sum: f64) -> Self {
        let ba = balanced_accuracy(&confusion);
        let n = confusion.total().max(1) as f64;
        Self {
            dataset: dataset.to_string(),
            n_balls,
            drop_fraction,
            confusion,
            balanced_accuracy: ba.value,
            f1: f1(&confusion),
            mean_bce: bce_sum / n,
            flagged: ba.flagged,
        }
    }
}

pub const METRICS_HEADER: &str = "dataset,n_balls,drop_fraction,balanced_accuracy,f1,mean_bce";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            r.dataset, r.n_balls, r.drop_fraction, r.balanced_accuracy, r.f1, r.mean_bce
        ));
    }
    s
}

struct EpisodeTally {
    seed: u64,
    confusion: Confusion,
    bce: f64,
}

fn evaluate_episode(predictor: &dyn Predictor, ep: &Episode, drop_fraction: f64, seed: u64) -> Result<EpisodeTally> {
    let mut session = predictor.start(ep);
    let mut confusion = Confusion::default();
    let mut bce = 0.0;
    let select = |t: usize| {
        let centers = &ep.centers[t];
        let keep = subsample(centers.len(), drop_fraction, seed, ep.seed, t);
        let chosen: Vec<[usize; 2]> = keep.iter().map(|&i| centers[i]).collect();
        ep.observe_at(t, &chosen)
    };
    let mut current = select(0);
    for t in 0..ep.len() - 1 {
        let next = select(t + 1);
        session.observe(&current, Some(&next))?;
        let targets = ep.observations(t + 1);
        let probs = session.predict(&ep.centers[t + 1])?;
        confusion.add(&probs, targets.crops());
        bce += probs.iter().zip(targets.crops()).map(|(&p, &y)| bce_probability(p, y)).sum::<f64>();
        current = next;
    }
    Ok(EpisodeTally { seed: ep.seed, confusion, bce })
}

/// Teacher-forced one-step evaluation. At each step a seeded subset of
/// `ceil((1 - drop_fraction) A)` views is fed; all `A` view centers of the
/// next step are queried. Results do not depend on sequence order.
pub fn one_step_eval(
    predictor: &dyn Predictor,
    dataset: &Dataset,
    dataset_id: &str,
    drop_fraction: f64,
    seed: u64,
) -> Result<MetricsRow> {
    let episodes: Vec<Episode> = (0..dataset.len()).map(|i| dataset.episode(i)).collect::<Result<_>>()?;
    one_step_eval_episodes(predictor, &episodes, dataset_id, dataset.header().n_balls, drop_fraction, seed)
}

/// [`one_step_eval`] over episodes held in memory.
pub fn one_step_eval_episodes(
    predictor: &dyn Predictor,
    episodes: &[Episode],
    dataset_id: &str,
    n_balls: usize,
    drop_fraction: f64,
    seed: u64,
) -> Result<MetricsRow> {
    if !(0.0..=1.0).contains(&drop_fraction) {
        return Err(Error::Input(format!("drop fraction {drop_fraction} outside [0, 1]")));
    }
    if episodes.iter().any(|e| e.len() < 2) {
        return Err(Error::Input("one-step evaluation needs at least two frames".into()));
    }
    let mut tallies: Vec<EpisodeTally> = episodes
        .par_iter()
        .map(|ep| evaluate_episode(predictor, ep, drop_fraction, seed))
        .collect::<Result<_>>()?;
    tallies.sort_by(|a, b| a.seed.cmp(&b.seed).then(a.bce.total_cmp(&b.bce)));
    let confusion = tallies.iter().fold(Confusion::default(), |acc, t| acc.merge(&t.confusion));
    let bce = tallies.iter().map(|t| t.bce).sum();
    Ok(MetricsRow::new(dataset_id, n_balls, drop_fraction, confusion, bce))
}

/// Drop fractions `{0.0, 0.1, ..., 0.8}`.
pub fn default_fractions() -> Vec<f64> {
    (0..=8).map(|i| i as f64 / 10.0).collect()
}

/// One-step evaluation over every dataset and drop fraction.
pub fn robustness_sweep(
    predictor: &dyn Predictor,
    datasets: &[(String, &Dataset)],
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::with_capacity(datasets.len() * fractions.len());
    for (id, data) in datasets {
        for &f in fractions {
            rows.push(one_step_eval(predictor, data, id, f, seed)?);
        }
    }
    Ok(rows)
}

pub const PROMPT_STEPS: usize = 20;
pub const ROLLOUT_STEPS: usize = 25;
pub const ROLLOUT_VIEWS: usize = 10;
/// Rows and columns of the stitching grid.
pub const GRID: [usize; 4] = [6, 18, 30, 42];

pub fn grid_centers() -> Vec<[usize; 2]> {
    GRID.iter().flat_map(|&r| GRID.iter().map(move |&c| [r, c])).collect()
}

/// Pastes 16 crops (grid order, row-major) into a 48x48 image; pixels no
/// window covers stay 0.
pub fn stitch_grid(crops: &[f64]) -> Result<Vec<f64>> {
    if crops.len() != GRID.len() * GRID.len() * CROP_PIXELS {
        return Err(Error::Dimension(format!("stitching needs 16 crops, got {} values", crops.len())));
    }
    let mut image = vec![0.0; FRAME_PIXELS];
    for (c, crop) in grid_centers().into_iter().zip(crops.chunks(CROP_PIXELS)) {
        paste(&mut image, c, crop);
    }
    Ok(image)
}

/// One step of a rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based step number.
    pub step: usize,
    pub prompt: bool,
    /// Fresh random query centers of this step.
    pub centers: Vec<[usize; 2]>,
    /// Probabilities at `centers`, `centers.len() * 121` values.
    pub probabilities: Vec<f64>,
    /// Stitched 4x4-grid prediction of this step's frame.
    pub stitched: Vec<f64>,
    /// Observations fed to the model at this step.
    pub observed: Observations,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub steps: Vec<StepRecord>,
}

impl RolloutResult {
    pub fn prompt(&self) -> &[StepRecord] {
        &self.steps[..PROMPT_STEPS]
    }

    pub fn rollout(&self) -> &[StepRecord] {
        &self.steps[PROMPT_STEPS..]
    }
}

/// Rollout protocol over 45 steps. At step `s` the predictor first predicts
/// frame `s - 1` at ten fresh random centers and on the stitching grid; it
/// then observes that frame, through ground-truth crops at those centers for
/// the 20 prompt steps and through its own predictions thresholded at 0.5
/// for the 25 rollout steps. Centers depend only on `seed` and the episode
/// seed, so all predictors see the same sequence.
pub fn rollout(predictor: &dyn Predictor, episode: &Episode, seed: u64) -> Result<RolloutResult> {
    let total = PROMPT_STEPS + ROLLOUT_STEPS;
    if episode.len() < total {
        return Err(Error::Input(format!("rollout needs {total} frames, episode has {}", episode.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed, episode.seed));
    let centers: Vec<Vec<[usize; 2]>> =
        (0..total).map(|_| (0..ROLLOUT_VIEWS).map(|_| random_center(&mut rng)).collect()).collect();
    let grid = grid_centers();
    let mut session = predictor.start(episode);
    let mut steps = Vec::with_capacity(total);
    for t in 0..total {
        let mut queries = centers[t].clone();
        queries.extend_from_slice(&grid);
        let probs = session.predict(&queries)?;
        let split = centers[t].len() * CROP_PIXELS;
        let stitched = stitch_grid(&probs[split..])?;
        let probabilities = probs[..split].to_vec();
        let prompt = t < PROMPT_STEPS;
        let observed = if prompt {
            episode.observe_at(t, &centers[t])
        } else {
            let hard = probabilities.iter().map(|&p| (p >= 0.5) as u8 as f64).collect();
            Observations::new(centers[t].iter().map(|&c| center_position(c)).collect(), hard)?
        };
        if t + 1 < total {
            let lookahead = episode.observe_at(t + 1, &centers[t + 1]);
            session.observe(&observed, Some(&lookahead))?;
        }
        steps.push(StepRecord { step: t + 1, prompt, centers: centers[t].clone(), probabilities, stitched, observed });
    }
    Ok(RolloutResult { steps })
}

/// Per-module maps of `Z(P(x), p^m)` over all pixels, row-major 48x48.
pub fn enclave_map(model: &Model) -> Result<Vec<Vec<f64>>> {
    if model.kind() != ModelKind::S2Gru {
        return Err(Error::Input(format!("{} has no module embeddings", model.kind().name())));
    }
    let bank = model.module_embeddings().expect("structured model has embeddings");
    let cfg = model.config();
    let pixels: Vec<_> = (0..FRAME_PIXELS)
        .map(|k| embed_position(&center_position([k / FRAME, k % FRAME]), cfg.embed_dim))
        .collect::<Result<_>>()?;
    Ok((0..bank.count())
        .map(|m| {
            let p = bank.row(m);
            pixels.iter().map(|x| kernel(x, &p, &cfg.kernel)).collect()
        })
        .collect())
}

/// Writes an 8-bit binary PGM, scaling `[0, 1]` to `[0, 255]`.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Dimension(format!("{} values for a {width}x{height} image", values.len())));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}
