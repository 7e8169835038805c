//! Epoch loop: fragment masks, mini-batches, loss assembly, SGD with momentum.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::MultiViewDataset;
use crate::error::{Error, Result};
use crate::graph::{build_graph, graph_loss, DEFAULT_ETA};
use crate::losses::{
    classification_loss, contrastive_loss, reconstruction_loss, total_loss, ContrastiveReduction, LossBreakdown,
    LossParts, LossWeights,
};
use crate::masking::{apply_masks, build_masks, MaskSpec};
use crate::metrics::{evaluate_all, MetricsReport};
use crate::model::{Channels, ModelConfig, ModelVars, MtdModel};
use crate::tensor::{Matrix, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(flatten)]
    pub weights: LossWeights,
    pub mask_rate: f64,
    /// Zero `l + 1` positions per fragment instead of `l`.
    pub mask_inclusive: bool,
    pub seed: u64,
    /// Evaluate every this many epochs; 0 evaluates only after the last one.
    pub eval_every: usize,
    pub weight_decay: f64,
    /// Graph similarity smoothing constant.
    pub eta: f64,
    pub contrastive_reduction: ContrastiveReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 128,
            epochs: 100,
            weights: LossWeights::default(),
            mask_rate: 0.25,
            mask_inclusive: false,
            seed: 0,
            eval_every: 0,
            weight_decay: 0.0,
            eta: DEFAULT_ETA,
            contrastive_reduction: ContrastiveReduction::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be nonnegative, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return bad(format!("mask_rate must be in [0, 1), got {}", self.mask_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        self.weights.validate()
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            weights: self.weights,
            eta: self.eta,
            contrastive_reduction: self.contrastive_reduction,
        }
    }
}

/// Everything the loss assembly needs besides data and parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub eta: f64,
    pub contrastive_reduction: ContrastiveReduction,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        TrainConfig::default().objective()
    }
}

/// One mini-batch: masked encoder inputs plus the unmasked reconstruction
/// targets, view availability, weak labels and label availability.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Vec<Matrix>,
    pub targets: Vec<Matrix>,
    pub view_index: Matrix,
    pub labels: Matrix,
    pub label_index: Matrix,
}

impl Batch {
    /// The unmasked batch of `data` rows `idx`.
    pub fn from_rows(data: &MultiViewDataset, idx: &[usize]) -> Self {
        let targets: Vec<Matrix> = data.views().iter().map(|x| x.select_rows(idx)).collect();
        Self {
            inputs: targets.clone(),
            targets,
            view_index: data.view_index().select_rows(idx),
            labels: data.labels().select_rows(idx),
            label_index: data.label_index().select_rows(idx),
        }
    }

    pub fn len(&self) -> usize {
        self.view_index.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builds `L_all` for `batch` on `tape`. The contrastive term is dropped for
/// single-channel models and for data with one view.
pub fn objective(
    model: &MtdModel,
    tape: &mut Tape,
    vars: &ModelVars,
    batch: &Batch,
    cfg: &ObjectiveConfig,
) -> Result<(Var, LossBreakdown)> {
    let inputs: Vec<Var> = batch.inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = model.forward(tape, vars, &inputs, &batch.view_index)?;
    let mc = classification_loss(tape, out.predictions, &batch.labels, &batch.label_index)?;
    let graph = build_graph(&batch.labels, &batch.label_index, cfg.eta)?;
    let gc = graph_loss(tape, out.fused, &graph)?;
    let ccc = if out.private.is_empty() || out.shared.len() < 2 {
        None
    } else {
        Some(contrastive_loss(
            tape,
            &out.shared,
            &out.private,
            &batch.view_index,
            cfg.contrastive_reduction,
        )?)
    };
    let re = reconstruction_loss(tape, &out.reconstructions, &batch.targets, &batch.view_index)?;
    total_loss(
        tape,
        &LossParts {
            mc,
            gc: Some(gc),
            ccc,
            re: Some(re),
        },
        &cfg.weights,
    )
}

/// Value and per-parameter gradients of `L_all`, in [`MtdModel::params`] order.
pub fn loss_and_gradients(model: &MtdModel, batch: &Batch, cfg: &ObjectiveConfig) -> Result<(LossBreakdown, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let (loss, breakdown) = objective(model, &mut tape, &vars, batch, cfg)?;
    tape.backward(loss)?;
    let grads = vars.all().into_iter().map(|v| tape.grad(v)).collect();
    Ok((breakdown, grads))
}

/// Classical momentum: `v ← μv − lr·(g + λp)`, `p ← p + v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(model: &MtdModel, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: model.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Matrix] {
        &self.velocity
    }

    pub fn step(&mut self, model: &mut MtdModel, grads: &[Matrix]) -> Result<()> {
        let mut params = model.params_mut();
        if grads.len() != params.len() {
            return Err(Error::dim("sgd step", (grads.len(), 0), (params.len(), 0)));
        }
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            if g.shape() != p.shape() {
                return Err(Error::dim("sgd step", g.shape(), p.shape()));
            }
            let (mu, lr, wd) = (self.momentum, self.learning_rate, self.weight_decay);
            for ((pk, vk), gk) in p.as_mut_slice().iter_mut().zip(v.as_mut_slice()).zip(g.as_slice()) {
                let grad = if wd == 0.0 { *gk } else { *gk + wd * *pk };
                *vk = mu * *vk - lr * grad;
                *pk += *vk;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub epoch: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub per_epoch_losses: Vec<EpochLosses>,
    pub evaluations: Vec<Evaluation>,
    pub checkpoint_path: Option<String>,
    pub seed: u64,
    /// Total training time.
    pub wall_clock_s: f64,
    pub epoch_wall_clock_s: Vec<f64>,
}

pub const LOSS_CSV_HEADER: &str = "epoch,l_mc,l_gc,l_ccc,l_re,l_total";

impl RunRecord {
    pub fn final_metrics(&self) -> Option<&MetricsReport> {
        self.evaluations.last().map(|e| &e.metrics)
    }

    /// Flat per-epoch loss table.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from(LOSS_CSV_HEADER);
        out.push('\n');
        for e in &self.per_epoch_losses {
            let l = &e.losses;
            out.push_str(&format!("{},{},{},{},{},{}\n", e.epoch, l.l_mc, l.l_gc, l.l_ccc, l.l_re, l.l_total));
        }
        out
    }
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<EpochLosses>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_CSV_HEADER) {
        return Err(Error::Format("loss table header mismatch".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Format(format!("loss row has {} fields: {line}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s}: {e}")));
            Ok(EpochLosses {
                epoch: f[0].parse().map_err(|e| Error::Format(format!("{}: {e}", f[0])))?,
                losses: LossBreakdown {
                    l_mc: num(f[1])?,
                    l_gc: num(f[2])?,
                    l_ccc: num(f[3])?,
                    l_re: num(f[4])?,
                    l_total: num(f[5])?,
                },
            })
        })
        .collect()
}

/// Scores predictions on unmasked inputs against the split's full labels.
pub fn evaluate(model: &MtdModel, data: &MultiViewDataset) -> Result<MetricsReport> {
    let truth = data
        .ground_truth()
        .ok_or_else(|| Error::Contract("evaluation split has no complete labels".into()))?;
    let p = model.predict(data.views(), data.view_index())?;
    evaluate_all(&p, truth)
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut acc = LossBreakdown::default();
    for b in items {
        acc.l_mc += b.l_mc;
        acc.l_gc += b.l_gc;
        acc.l_ccc += b.l_ccc;
        acc.l_re += b.l_re;
        acc.l_total += b.l_total;
    }
    LossBreakdown {
        l_mc: acc.l_mc / n,
        l_gc: acc.l_gc / n,
        l_ccc: acc.l_ccc / n,
        l_re: acc.l_re / n,
        l_total: acc.l_total / n,
    }
}

/// Trains `model` in place on `data`. `eval` is called on the scheduled
/// epochs; it closes over the test split so training never sees test rows.
pub fn train(
    data: &MultiViewDataset,
    model: &mut MtdModel,
    cfg: &TrainConfig,
    mut eval: Option<&mut dyn FnMut(&MtdModel) -> Result<MetricsReport>>,
) -> Result<RunRecord> {
    cfg.validate()?;
    let n = data.n();
    if n == 0 {
        return Err(Error::Contract("empty training split".into()));
    }
    if data.view_dims() != model.view_dims() || data.num_labels() != model.num_labels() {
        return Err(Error::dim(
            "train",
            (data.view_dims().len(), data.num_labels()),
            (model.view_dims().len(), model.num_labels()),
        ));
    }
    let objective_cfg = cfg.objective();
    let mut sgd = Sgd::new(model, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = data.view_dims();
    let mut per_epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut evaluations = Vec::new();
    let mut epoch_wall_clock_s = Vec::with_capacity(cfg.epochs);
    let started = Instant::now();

    for epoch in 1..=cfg.epochs {
        let epoch_start = Instant::now();
        let mask_spec = MaskSpec {
            rate: cfg.mask_rate,
            seed: rng.next_u64(),
            inclusive: cfg.mask_inclusive,
        };
        let masks = build_masks(n, &dims, &mask_spec)?;
        let masked = apply_masks(data.views(), &masks)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut batch_losses = Vec::with_capacity(n.div_ceil(cfg.batch_size));
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch = Batch::from_rows(data, idx);
            batch.inputs = masked.iter().map(|x| x.select_rows(idx)).collect();
            let fail = |msg: String| Error::Training { epoch, batch: b, msg };
            let (breakdown, grads) = loss_and_gradients(model, &batch, &objective_cfg).map_err(|e| fail(e.to_string()))?;
            let values = [breakdown.l_mc, breakdown.l_gc, breakdown.l_ccc, breakdown.l_re, breakdown.l_total];
            if values.iter().any(|v| !v.is_finite()) {
                return Err(fail(format!("non-finite loss {breakdown:?}")));
            }
            sgd.step(model, &grads)?;
            if !model.is_finite() {
                return Err(fail("parameters became non-finite".into()));
            }
            batch_losses.push(breakdown);
        }
        per_epoch_losses.push(EpochLosses {
            epoch,
            losses: mean_breakdown(&batch_losses),
        });
        epoch_wall_clock_s.push(epoch_start.elapsed().as_secs_f64());

        let scheduled = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        if let (true, Some(f)) = (scheduled, eval.as_mut()) {
            evaluations.push(Evaluation { epoch, metrics: f(model)? });
        }
    }

    Ok(RunRecord {
        config: RunConfig {
            train: cfg.clone(),
            model: model.config().clone(),
            variant: None,
        },
        per_epoch_losses,
        evaluations,
        checkpoint_path: None,
        seed: cfg.seed,
        wall_clock_s: started.elapsed().as_secs_f64(),
        epoch_wall_clock_s,
    })
}

/// Initializes a model from `cfg.seed`, trains it on `train_data` and
/// evaluates on `test` when given.
pub fn fit(
    train_data: &MultiViewDataset,
    test: Option<&MultiViewDataset>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(MtdModel, RunRecord)> {
    let mut model = MtdModel::init(&train_data.view_dims(), train_data.num_labels(), model_cfg, cfg.seed)?;
    let record = match test {
        Some(test) => {
            let mut eval = |m: &MtdModel| evaluate(m, test);
            train(train_data, &mut model, cfg, Some(&mut eval))?
        }
        None => train(train_data, &mut model, cfg, None)?,
    };
    Ok((model, record))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoMask,
    NoGc,
    NoRe,
    NoCcc,
    SingleChannel,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::SingleChannel,
        Variant::Full,
        Variant::NoMask,
        Variant::NoGc,
        Variant::NoRe,
        Variant::NoCcc,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMask => "no_mask",
            Variant::NoGc => "no_gc",
            Variant::NoRe => "no_re",
            Variant::NoCcc => "no_ccc",
            Variant::SingleChannel => "single_channel",
        }
    }

    /// The configuration this variant trains with.
    pub fn apply(&self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let (mut model, mut train) = (model.clone(), train.clone());
        match self {
            Variant::Full => {}
            Variant::NoMask => train.mask_rate = 0.0,
            Variant::NoGc => train.weights.alpha = 0.0,
            Variant::NoRe => train.weights.gamma = 0.0,
            Variant::NoCcc => train.weights.beta = 0.0,
            Variant::SingleChannel => {
                model.channels = Channels::Single;
                train.weights.beta = 0.0;
            }
        }
        (model, train)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Trains every variant from the same seed and reports its test metrics.
pub fn run_ablation(
    train_data: &MultiViewDataset,
    test: &MultiViewDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    variants: &[Variant],
) -> Result<Vec<(Variant, RunRecord)>> {
    variants
        .iter()
        .map(|&v| {
            let (mc, tc) = v.apply(model_cfg, cfg);
            let (_, mut record) = fit(train_data, Some(test), &mc, &tc)?;
            record.config.variant = Some(v);
            Ok((v, record))
        })
        .collect()
}
