//! Two-pass training objective, optimizer, training loop and gradient
//! verification.
//!
//! The per-frame objective is
//!
//! ```text
//! L   = L_f + L_s
//! L_f = CE(z_joint) + CE(z_rgb) + CE(z_aux)                all inputs
//! L_s = CE(z_joint') + CE(z_aux')                          RGB zeroed
//! ```
//!
//! where the side-head terms are present only for multi-head models and
//! `L_s` only for double-pass training.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{FrameBundle, Modality, ModalitySet};
use crate::eval::evaluate;
use crate::model::{backward, forward, init_params, softmax_ce, softmax_ce_with_grad, softmax_nll_map, HeadGradients, ModelConfig, Params, PredictionSet};
use crate::raster::LabelMap;
use crate::{Error, Result};

/// The five cross-entropy terms and their sums.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce_joint: f64,
    pub ce_head_rgb: f64,
    pub ce_head_aux: f64,
    pub ce_masked_joint: f64,
    pub ce_masked_aux: f64,
    pub l_f: f64,
    pub l_s: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 8] = [
        "ce_joint",
        "ce_head_rgb",
        "ce_head_aux",
        "ce_masked_joint",
        "ce_masked_aux",
        "l_f",
        "l_s",
        "total",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.ce_joint,
            self.ce_head_rgb,
            self.ce_head_aux,
            self.ce_masked_joint,
            self.ce_masked_aux,
            self.l_f,
            self.l_s,
            self.total,
        ]
    }

    fn from_values(v: [f64; 8]) -> Self {
        LossBreakdown {
            ce_joint: v[0],
            ce_head_rgb: v[1],
            ce_head_aux: v[2],
            ce_masked_joint: v[3],
            ce_masked_aux: v[4],
            l_f: v[5],
            l_s: v[6],
            total: v[7],
        }
    }

    /// Largest violation of the sum identities.
    pub fn identity_error(&self) -> f64 {
        let e_f = (self.l_f - (self.ce_joint + self.ce_head_rgb + self.ce_head_aux)).abs();
        let e_s = (self.l_s - (self.ce_masked_joint + self.ce_masked_aux)).abs();
        let e_t = (self.total - (self.l_f + self.l_s)).abs();
        e_f.max(e_s).max(e_t)
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let mut acc = [0.0; 8];
        for it in items {
            for (a, v) in acc.iter_mut().zip(it.values()) {
                *a += v;
            }
        }
        let n = items.len().max(1) as f64;
        LossBreakdown::from_values(acc.map(|a| a / n))
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = Self::FIELDS
            .iter()
            .zip(self.values())
            .map(|(n, v)| format!("{n}={v}"))
            .collect();
        f.write_str(&parts.join(" "))
    }
}

fn side_head<'a>(z: &'a Option<crate::tensor::Feature>, name: &str) -> Result<&'a crate::tensor::Feature> {
    z.as_ref()
        .ok_or_else(|| Error::Invalid(format!("multi-head loss needs the {name} head")))
}

/// First-pass terms (all modalities present).
pub fn loss_first_pass(preds: &PredictionSet, gt: &LabelMap, multihead: bool) -> Result<LossBreakdown> {
    let mut b = LossBreakdown {
        ce_joint: softmax_ce(&preds.joint, gt)?,
        ..Default::default()
    };
    if multihead {
        b.ce_head_rgb = softmax_ce(side_head(&preds.rgb, "rgb")?, gt)?;
        b.ce_head_aux = softmax_ce(side_head(&preds.aux, "auxiliary")?, gt)?;
    }
    b.l_f = b.ce_joint + b.ce_head_rgb + b.ce_head_aux;
    b.total = b.l_f;
    Ok(b)
}

/// Second-pass terms (RGB zeroed). The RGB head never contributes.
pub fn loss_second_pass(preds_masked: &PredictionSet, gt: &LabelMap, multihead: bool) -> Result<LossBreakdown> {
    let mut b = LossBreakdown {
        ce_masked_joint: softmax_ce(&preds_masked.joint, gt)?,
        ..Default::default()
    };
    if multihead {
        b.ce_masked_aux = softmax_ce(side_head(&preds_masked.aux, "auxiliary")?, gt)?;
    }
    b.l_s = b.ce_masked_joint + b.ce_masked_aux;
    b.total = b.l_s;
    Ok(b)
}

/// Combine the two partial breakdowns. Without the double pass the
/// second-pass fields are zero and `total = l_f`.
pub fn total_loss(first: &LossBreakdown, second: &LossBreakdown, double_pass: bool) -> LossBreakdown {
    let mut b = LossBreakdown {
        ce_joint: first.ce_joint,
        ce_head_rgb: first.ce_head_rgb,
        ce_head_aux: first.ce_head_aux,
        l_f: first.l_f,
        ..Default::default()
    };
    if double_pass {
        b.ce_masked_joint = second.ce_masked_joint;
        b.ce_masked_aux = second.ce_masked_aux;
        b.l_s = second.l_s;
    }
    b.total = b.l_f + b.l_s;
    b
}

/// The four training variants: single or double pass, one or three heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    H,
    D,
    DH,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::H, Variant::D, Variant::DH];

    pub fn from_flags(double_pass: bool, multihead: bool) -> Variant {
        match (double_pass, multihead) {
            (false, false) => Variant::Baseline,
            (false, true) => Variant::H,
            (true, false) => Variant::D,
            (true, true) => Variant::DH,
        }
    }

    pub fn double_pass(self) -> bool {
        matches!(self, Variant::D | Variant::DH)
    }

    pub fn multihead(self) -> bool {
        matches!(self, Variant::H | Variant::DH)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::H => "h",
            Variant::D => "d",
            Variant::DH => "dh",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Invalid(format!("unknown variant '{s}' (baseline, h, d, dh)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    /// Adaptive moments, decay rates 0.9 / 0.999, epsilon 1e-8.
    Adam,
    /// Plain gradient descent.
    Sgd,
}

impl FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            other => Err(Error::Invalid(format!("unknown optimizer '{other}'"))),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Adam => "adam",
            Optimizer::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub double_pass: bool,
    pub multihead: bool,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            epochs: 100,
            batch_size: 4,
            seed: 0,
            double_pass: true,
            multihead: true,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn variant(&self) -> Variant {
        Variant::from_flags(self.double_pass, self.multihead)
    }

    pub fn set_variant(&mut self, v: Variant) {
        self.double_pass = v.double_pass();
        self.multihead = v.multihead();
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Invalid("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer moments, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: Params,
    pub v: Params,
    pub step: usize,
}

impl OptimState {
    pub fn new(params: &Params) -> Self {
        OptimState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Loss and parameter gradients for one frame.
pub fn frame_loss_and_grad(
    params: &Params,
    bundle: &FrameBundle,
    double_pass: bool,
    multihead: bool,
) -> Result<(LossBreakdown, Params)> {
    let gt = &bundle.labels;
    let (preds, cache) = forward(params, bundle, ModalitySet::EMPTY)?;
    let (ce_joint, g_joint) = softmax_ce_with_grad(&preds.joint, gt)?;
    let mut first = LossBreakdown {
        ce_joint,
        ..Default::default()
    };
    let mut up = HeadGradients {
        joint: g_joint,
        rgb: None,
        aux: None,
    };
    if multihead {
        let (l_r, g_r) = softmax_ce_with_grad(side_head(&preds.rgb, "rgb")?, gt)?;
        let (l_a, g_a) = softmax_ce_with_grad(side_head(&preds.aux, "auxiliary")?, gt)?;
        first.ce_head_rgb = l_r;
        first.ce_head_aux = l_a;
        up.rgb = Some(g_r);
        up.aux = Some(g_a);
    }
    first.l_f = first.ce_joint + first.ce_head_rgb + first.ce_head_aux;
    let mut grads = backward(params, &cache, &up)?;

    let mut second = LossBreakdown::default();
    if double_pass {
        let (preds, cache) = forward(params, bundle, ModalitySet::only(Modality::Rgb))?;
        let (l_j, g_j) = softmax_ce_with_grad(&preds.joint, gt)?;
        second.ce_masked_joint = l_j;
        let mut up = HeadGradients {
            joint: g_j,
            rgb: None,
            aux: None,
        };
        if multihead {
            let (l_a, g_a) = softmax_ce_with_grad(side_head(&preds.aux, "auxiliary")?, gt)?;
            second.ce_masked_aux = l_a;
            up.aux = Some(g_a);
        }
        second.l_s = second.ce_masked_joint + second.ce_masked_aux;
        grads.add_assign(&backward(params, &cache, &up)?);
    }
    Ok((total_loss(&first, &second, double_pass), grads))
}

/// Loss only, no gradients.
pub fn frame_loss(params: &Params, bundle: &FrameBundle, double_pass: bool, multihead: bool) -> Result<LossBreakdown> {
    let (preds, _) = forward(params, bundle, ModalitySet::EMPTY)?;
    let first = loss_first_pass(&preds, &bundle.labels, multihead)?;
    let second = if double_pass {
        let (preds, _) = forward(params, bundle, ModalitySet::only(Modality::Rgb))?;
        loss_second_pass(&preds, &bundle.labels, multihead)?
    } else {
        LossBreakdown::default()
    };
    Ok(total_loss(&first, &second, double_pass))
}

/// Mean loss and gradient over a batch.
pub fn batch_loss_and_grad(
    params: &Params,
    batch: &[&FrameBundle],
    double_pass: bool,
    multihead: bool,
) -> Result<(LossBreakdown, Params)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut grads = params.zeros_like();
    let mut losses = Vec::with_capacity(batch.len());
    for b in batch {
        let (l, g) = frame_loss_and_grad(params, b, double_pass, multihead)?;
        losses.push(l);
        grads.add_assign(&g);
    }
    grads.scale(1.0 / batch.len() as f64);
    Ok((LossBreakdown::mean(&losses), grads))
}

/// Apply one optimizer update with the given gradients.
pub fn apply_update(params: &mut Params, optim: &mut OptimState, grads: &Params, config: &TrainConfig) {
    optim.step += 1;
    let lr = config.lr;
    let g_all: Vec<&[f64]> = grads.named_tensors().into_iter().map(|(_, t)| t.data()).collect();
    match config.optimizer {
        Optimizer::Sgd => {
            for (p, g) in params.tensors_mut().into_iter().zip(g_all) {
                for (pv, gv) in p.data_mut().iter_mut().zip(g) {
                    *pv -= lr * gv;
                }
            }
        }
        Optimizer::Adam => {
            let t = optim.step as i32;
            let c1 = 1.0 - BETA1.powi(t);
            let c2 = 1.0 - BETA2.powi(t);
            let ps = params.tensors_mut();
            let ms = optim.m.tensors_mut();
            let vs = optim.v.tensors_mut();
            for (((p, m), v), g) in ps.into_iter().zip(ms).zip(vs).zip(g_all) {
                let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
                for i in 0..p.len() {
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// One iteration: both passes on the same batch, gradients summed, a single
/// optimizer update. A non-finite loss aborts before the update.
pub fn train_step(
    params: &mut Params,
    optim: &mut OptimState,
    batch: &[&FrameBundle],
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let (loss, grads) = batch_loss_and_grad(params, batch, config.double_pass, config.multihead)?;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite {
            step: optim.step,
            terms: loss.to_string(),
        });
    }
    apply_update(params, optim, &grads, config);
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's steps.
    pub loss: LossBreakdown,
    pub val_miou: Option<f64>,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,ce_joint,ce_head_rgb,ce_head_aux,ce_masked_joint,ce_masked_aux,l_f,l_s,total,val_miou";

pub fn epoch_log_csv(records: &[EpochRecord]) -> String {
    let mut out = format!("{EPOCH_LOG_HEADER}\n");
    for r in records {
        let vals: Vec<String> = r.loss.values().iter().map(|v| v.to_string()).collect();
        let miou = r.val_miou.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", r.epoch, vals.join(","), miou));
    }
    out
}

pub fn parse_epoch_log(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(EPOCH_LOG_HEADER) {
        return Err(Error::Config {
            line: 1,
            msg: "missing epoch log header".into(),
        });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |msg: String| Error::Config { line: i + 2, msg };
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() != 10 {
                return Err(bad(format!("expected 10 columns, found {}", cols.len())));
            }
            let mut v = [0.0; 8];
            for (k, c) in cols[1..9].iter().enumerate() {
                v[k] = c.parse().map_err(|e| bad(format!("{c}: {e}")))?;
            }
            Ok(EpochRecord {
                epoch: cols[0].parse().map_err(|e| bad(format!("epoch: {e}")))?,
                loss: LossBreakdown::from_values(v),
                val_miou: match cols[9] {
                    "" => None,
                    c => Some(c.parse().map_err(|e| bad(format!("{c}: {e}")))?),
                },
            })
        })
        .collect()
}

pub fn write_epoch_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    fs::write(path, epoch_log_csv(records)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation mIoU.
    pub best: Params,
    /// 1-based.
    pub best_epoch: usize,
    pub best_val_miou: Option<f64>,
    pub last: Params,
    pub log: Vec<EpochRecord>,
}

/// Train a fresh model. Parameters are initialized from `config.seed`; the
/// training frames are reshuffled every epoch from the same seed. The
/// returned best model is the earliest epoch with the highest validation
/// mIoU.
pub fn train(
    config: &TrainConfig,
    model: &ModelConfig,
    train_set: &[FrameBundle],
    val_set: &[FrameBundle],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Invalid("training and validation sets must be non-empty".into()));
    }
    let model = ModelConfig {
        multihead: config.multihead,
        ..model.clone()
    };
    let mut params = init_params(&model, config.seed)?;
    let mut optim = OptimState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, Option<f64>, Params)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&FrameBundle> = chunk.iter().map(|&i| &train_set[i]).collect();
            losses.push(train_step(&mut params, &mut optim, &batch, config)?);
        }
        let val_miou = evaluate(&params, val_set, ModalitySet::EMPTY)?.miou;
        let rec = EpochRecord {
            epoch,
            loss: LossBreakdown::mean(&losses),
            val_miou,
        };
        log::info!("epoch {epoch}: total {:.5} val mIoU {:?}", rec.loss.total, val_miou);
        let score = val_miou.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            Some((_, b, _)) => score > b.unwrap_or(f64::NEG_INFINITY),
        };
        if improved {
            best = Some((epoch, val_miou, params.clone()));
        }
        log.push(rec);
    }
    let (best_epoch, best_val_miou, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_miou,
        last: params,
        log,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub samples: Vec<GradSample>,
    /// Candidates redrawn because the perturbation switched a rectifier.
    pub redrawn: usize,
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}

const MAX_REDRAWS: usize = 20;

/// Compensated (Neumaier) sum.
pub fn accurate_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Compare `analytic` against central differences of a loss. `loss`
/// returns the loss as a list of additive terms together with a switching
/// pattern (for piecewise-linear models, the set of active rectifiers).
/// The difference `L(θ+eps) - L(θ-eps)` is formed term by term and summed
/// with compensation, which keeps cancellation error far below that of
/// differencing two rounded totals.
///
/// Samples are spread round-robin over tensors with a random element in
/// each; a candidate whose `+eps` and `-eps` evaluations have different
/// patterns straddles a kink, where the derivative is undefined, and is
/// redrawn.
pub fn check_gradients<F>(
    params: &Params,
    analytic: &Params,
    mut loss: F,
    eps: f64,
    n_samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&Params) -> Result<(Vec<f64>, Vec<bool>)>,
{
    if !(eps > 0.0) {
        return Err(Error::Invalid("eps must be positive".into()));
    }
    let names = params.names();
    let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.len()).collect();
    let g_all: Vec<Vec<f64>> = analytic.named_tensors().iter().map(|(_, t)| t.data().to_vec()).collect();
    if g_all.len() != sizes.len() || g_all.iter().zip(&sizes).any(|(g, &s)| g.len() != s) {
        return Err(Error::Shape("analytic gradients do not mirror the parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut samples = Vec::with_capacity(n_samples);
    let mut redrawn = 0;
    for k in 0..n_samples {
        let ti = k % sizes.len();
        let mut attempt = 0;
        loop {
            let idx = rng.random_range(0..sizes[ti]);
            let orig = params.named_tensors()[ti].1.data()[idx];
            probe.tensors_mut()[ti].data_mut()[idx] = orig + eps;
            let (lp, pat_p) = loss(&probe)?;
            probe.tensors_mut()[ti].data_mut()[idx] = orig - eps;
            let (lm, pat_m) = loss(&probe)?;
            probe.tensors_mut()[ti].data_mut()[idx] = orig;
            if pat_p != pat_m && attempt < MAX_REDRAWS {
                attempt += 1;
                redrawn += 1;
                continue;
            }
            if lp.len() != lm.len() {
                return Err(Error::Shape("loss term count changed under perturbation".into()));
            }
            let numeric = accurate_sum(lp.iter().zip(&lm).map(|(a, b)| a - b)) / (2.0 * eps);
            let a = g_all[ti][idx];
            samples.push(GradSample {
                tensor: names[ti].clone(),
                index: idx,
                analytic: a,
                numeric,
                rel_error: rel_error(a, numeric),
            });
            break;
        }
    }
    let max_rel_error = samples.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        samples,
        redrawn,
    })
}

/// Copy of `params` with every bias drawn from `N(0, std)`. Freshly
/// initialized biases are zero, so a branch fed an all-zero input sits
/// exactly on the rectifier kink where the loss has no derivative;
/// gradient checks are run from this nearby generic point instead.
pub fn jitter_biases(params: &Params, std: f64, seed: u64) -> Params {
    let mut out = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let normal = rand_distr::Normal::new(0.0, std).expect("valid std");
    let names = out.names();
    for (name, t) in names.iter().zip(out.tensors_mut()) {
        if name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rand_distr::Distribution::sample(&normal, &mut rng));
        }
    }
    out
}

/// Per-pixel contributions of every loss term, so that their sum is the
/// total loss.
fn loss_terms(gt: &LabelMap, heads: &[&crate::tensor::Feature], out: &mut Vec<f64>) -> Result<()> {
    let count = gt.ids.iter().filter(|&&id| id != crate::raster::IGNORE).count();
    if count == 0 {
        return Ok(());
    }
    for z in heads {
        out.extend(softmax_nll_map(z, gt)?.into_iter().map(|v| v / count as f64));
    }
    Ok(())
}

fn loss_with_pattern(
    params: &Params,
    bundle: &FrameBundle,
    double_pass: bool,
    multihead: bool,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let gt = &bundle.labels;
    let mut terms = Vec::new();
    let (preds, cache) = forward(params, bundle, ModalitySet::EMPTY)?;
    let mut heads = vec![&preds.joint];
    if multihead {
        heads.push(side_head(&preds.rgb, "rgb")?);
        heads.push(side_head(&preds.aux, "auxiliary")?);
    }
    loss_terms(gt, &heads, &mut terms)?;
    let mut pattern = cache.relu_pattern();
    if double_pass {
        let (preds, cache) = forward(params, bundle, ModalitySet::only(Modality::Rgb))?;
        let mut heads = vec![&preds.joint];
        if multihead {
            heads.push(side_head(&preds.aux, "auxiliary")?);
        }
        loss_terms(gt, &heads, &mut terms)?;
        pattern.extend(cache.relu_pattern());
    }
    Ok((terms, pattern))
}

/// Check the analytic gradient of the full training objective for one
/// frame against central differences.
pub fn grad_check(
    params: &Params,
    bundle: &FrameBundle,
    gt: &LabelMap,
    config: &TrainConfig,
    eps: f64,
    n_samples: usize,
) -> Result<GradCheckReport> {
    let mut frame = bundle.clone();
    frame.labels = gt.clone();
    let (_, analytic) = frame_loss_and_grad(params, &frame, config.double_pass, config.multihead)?;
    grad_check_against(params, &frame, config, &analytic, eps, n_samples)
}

/// As [`grad_check`] but against caller-supplied analytic gradients.
pub fn grad_check_against(
    params: &Params,
    frame: &FrameBundle,
    config: &TrainConfig,
    analytic: &Params,
    eps: f64,
    n_samples: usize,
) -> Result<GradCheckReport> {
    check_gradients(
        params,
        analytic,
        |p| loss_with_pattern(p, frame, config.double_pass, config.multihead),
        eps,
        n_samples,
        config.seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Feature;

    const LN4: f64 = std::f64::consts::LN_2 * 2.0;

    fn uniform_preds(heads: bool) -> PredictionSet {
        let z = Feature::zeros(4, 2, 2);
        PredictionSet {
            joint: z.clone(),
            rgb: heads.then(|| z.clone()),
            aux: heads.then(|| z.clone()),
        }
    }

    fn labels() -> LabelMap {
        LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap()
    }

    #[test]
    fn uniform_logit_examples() {
        let gt = labels();
        let f = loss_first_pass(&uniform_preds(true), &gt, true).unwrap();
        assert!((f.l_f - 3.0 * LN4).abs() < 1e-12);
        assert!((f.l_f - 4.158883).abs() < 1e-6);
        let f1 = loss_first_pass(&uniform_preds(false), &gt, false).unwrap();
        assert!((f1.l_f - LN4).abs() < 1e-12);
        let s = loss_second_pass(&uniform_preds(true), &gt, true).unwrap();
        assert!((s.l_s - 2.772589).abs() < 1e-6);
        let s1 = loss_second_pass(&uniform_preds(true), &gt, false).unwrap();
        assert!((s1.l_s - LN4).abs() < 1e-12);
        let t = total_loss(&f, &s, true);
        assert!((t.total - 6.931472).abs() < 1e-6);
        assert!(t.identity_error() < 1e-12);
        let t0 = total_loss(&f, &s, false);
        assert_eq!((t0.total, t0.l_s, t0.ce_masked_joint, t0.ce_masked_aux), (f.l_f, 0.0, 0.0, 0.0));
    }

    #[test]
    fn missing_heads_are_an_error() {
        assert!(loss_first_pass(&uniform_preds(false), &labels(), true).is_err());
        assert!(loss_second_pass(&uniform_preds(false), &labels(), true).is_err());
    }

    #[test]
    fn rgb_head_excluded_from_second_pass() {
        let gt = labels();
        let mut p = uniform_preds(true);
        let a = loss_second_pass(&p, &gt, true).unwrap();
        p.rgb.as_mut().unwrap().data[3] = 17.0;
        let b = loss_second_pass(&p, &gt, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn variant_names_and_flags() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(Variant::from_flags(v.double_pass(), v.multihead()), v);
        }
        assert!("x".parse::<Variant>().is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert_eq!(rel_error(1.0, 0.5), 0.5);
        assert!((rel_error(1e-13, 0.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn linear_loss_check_is_exact() {
        let cfg = ModelConfig {
            stages: 1,
            channels: vec![2],
            height: 4,
            width: 4,
            ..ModelConfig::default()
        };
        let params = init_params(&cfg, 3).unwrap();
        let mut coeffs = params.clone();
        for (i, t) in coeffs.tensors_mut().into_iter().enumerate() {
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                *v = ((i * 31 + j * 7) % 13) as f64 / 13.0 - 0.4;
            }
        }
        let c = coeffs.flatten();
        let report = check_gradients(
            &params,
            &coeffs,
            |p| Ok((p.flatten().iter().zip(&c).map(|(a, b)| a * b).collect(), Vec::new())),
            1e-5,
            100,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
        assert_eq!(report.samples.len(), 100);
    }

    #[test]
    fn epoch_log_round_trip() {
        let recs = vec![
            EpochRecord {
                epoch: 1,
                loss: LossBreakdown {
                    ce_joint: 0.1 + 0.2,
                    l_f: 1.0 / 3.0,
                    total: 1.0 / 3.0,
                    ..Default::default()
                },
                val_miou: Some(0.7),
            },
            EpochRecord {
                epoch: 2,
                loss: LossBreakdown::default(),
                val_miou: None,
            },
        ];
        assert_eq!(parse_epoch_log(&epoch_log_csv(&recs)).unwrap(), recs);
    }
}
