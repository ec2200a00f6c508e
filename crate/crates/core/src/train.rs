//! Training loops: NTP pretraining, adapter finetuning of the base model,
//! heads-only MTP training and joint backbone+heads finetuning with the
//! loss-balancing, warmup, differential-LR and WHS strategies.

use std::collections::BTreeMap;
use std::time::Instant;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{Batch, SequencePair};
use crate::model::{
    is_adapter, ntp_loss, read_container, shifted_targets, write_container, Checkpoint, Forward,
    ModelConfig,
};
use crate::mtp::{build_heads, init_mtp, is_head_param, MtpConfig, MtpModel};
use crate::numerics::{
    adamw_step, cosine_lr, seeded, streams, AdamWConfig, Grads, OptimizerState, ParamStore, Scalar,
    Tensor,
};
use crate::{MtpError, Result};

/// Learning rates used for the published finetuning runs, by model size.
/// Toy runs take their rate from the config; these are for reference.
pub const REFERENCE_LRS: [(&str, f64); 4] = [("410M", 1.5e-4), ("1B", 1.5e-4), ("1.4B", 8e-5), ("2.8B", 6e-6)];

/// Finetuning runs default to this fraction of the pretraining rate.
pub const FINETUNE_LR_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    PretrainNtp,
    FinetuneBaseLora,
    HeadsOnly,
    Joint,
}

impl TrainMode {
    pub fn is_mtp(self) -> bool {
        matches!(self, TrainMode::HeadsOnly | TrainMode::Joint)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Strategies {
    /// Rescale each head's loss so its per-position RMS matches head 1.
    pub loss_balance: bool,
    /// Start joint training from heads trained with a frozen backbone.
    pub head_warmup: bool,
    /// Train heads with `diff_lr_multiplier × base_lr`.
    pub diff_lr: bool,
    pub diff_lr_multiplier: f64,
    pub whs: bool,
}

impl Default for Strategies {
    fn default() -> Self {
        Strategies {
            loss_balance: true,
            head_warmup: false,
            diff_lr: false,
            diff_lr_multiplier: 4.0,
            whs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub mode: TrainMode,
    pub strategies: Strategies,
    /// Required for pretraining; finetuning defaults to half the
    /// checkpoint's pretraining rate.
    pub base_lr: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub adapter_rank: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Record wall-clock milliseconds in metrics (makes streams differ run
    /// to run).
    pub record_wall_clock: bool,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            mode: TrainMode::PretrainNtp,
            strategies: Strategies::default(),
            base_lr: None,
            epochs: 1,
            batch_size: 16,
            adapter_rank: 8,
            seed: 0,
            optimizer: AdamWConfig::default(),
            record_wall_clock: false,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MtpError::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(self.strategies.diff_lr_multiplier >= 1.0) {
            return bad(format!(
                "diff_lr_multiplier {} must be >= 1",
                self.strategies.diff_lr_multiplier
            ));
        }
        if let Some(lr) = self.base_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("base_lr {lr} must be positive"));
            }
        }
        if matches!(self.mode, TrainMode::FinetuneBaseLora | TrainMode::Joint) && self.adapter_rank == 0 {
            return bad("adapter finetuning needs adapter_rank >= 1".into());
        }
        let s = &self.strategies;
        if self.mode != TrainMode::Joint && (s.head_warmup || s.diff_lr) {
            return bad("warmup and differential LR only apply to joint training".into());
        }
        if !self.mode.is_mtp() && s.whs {
            return bad("WHS only applies to MTP training".into());
        }
        Ok(())
    }

    /// The rate this plan starts from, before any per-group multiplier.
    pub fn resolve_base_lr(&self, pretrain_lr: Option<f64>) -> Result<f64> {
        match (self.base_lr, self.mode, pretrain_lr) {
            (Some(lr), ..) => Ok(lr),
            (None, TrainMode::PretrainNtp, _) => {
                Err(MtpError::InvalidConfig("pretraining needs an explicit base_lr".into()))
            }
            (None, _, Some(p)) => Ok(FINETUNE_LR_FRACTION * p),
            (None, _, None) => Err(MtpError::InvalidConfig(
                "no base_lr and the checkpoint records no pretraining rate".into(),
            )),
        }
    }
}

/// The joint finetuning variants compared in the strategy matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "none")]
    Vanilla,
    #[serde(rename = "warmup")]
    Warmup,
    #[serde(rename = "diff-lr")]
    DiffLr,
    #[serde(rename = "warmup+diff-lr")]
    WarmupDiffLr,
    #[serde(rename = "diff-lr+whs")]
    DiffLrWhs,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Vanilla,
        Strategy::Warmup,
        Strategy::DiffLr,
        Strategy::WarmupDiffLr,
        Strategy::DiffLrWhs,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            Strategy::Vanilla => "none",
            Strategy::Warmup => "warmup",
            Strategy::DiffLr => "diff-lr",
            Strategy::WarmupDiffLr => "warmup+diff-lr",
            Strategy::DiffLrWhs => "diff-lr+whs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.cli_name() == s)
            .ok_or_else(|| MtpError::InvalidConfig(format!("unknown strategy '{s}'")))
    }

    /// Row label in the strategy matrix.
    pub fn label(self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::Warmup => "warmup",
            Strategy::DiffLr => "diff_lr",
            Strategy::WarmupDiffLr => "warmup+diff_lr",
            Strategy::DiffLrWhs => "diff_lr+whs",
        }
    }

    /// Run-directory stage name.
    pub fn stage(self) -> &'static str {
        match self {
            Strategy::Vanilla => "joint_vanilla",
            Strategy::Warmup => "joint_warmup",
            Strategy::DiffLr => "joint_diff_lr",
            Strategy::WarmupDiffLr => "joint_warmup_diff_lr",
            Strategy::DiffLrWhs => "joint_diff_lr_whs",
        }
    }

    pub fn uses_warmup(self) -> bool {
        matches!(self, Strategy::Warmup | Strategy::WarmupDiffLr)
    }

    pub fn uses_whs(self) -> bool {
        self == Strategy::DiffLrWhs
    }

    /// `template` with mode and strategy flags set for this variant.
    pub fn plan(self, template: &TrainPlan) -> TrainPlan {
        let mut p = template.clone();
        p.mode = TrainMode::Joint;
        p.strategies.head_warmup = self.uses_warmup();
        p.strategies.diff_lr = matches!(self, Strategy::DiffLr | Strategy::WarmupDiffLr | Strategy::DiffLrWhs);
        p.strategies.whs = self.uses_whs();
        p
    }
}

pub fn heads_only_plan(template: &TrainPlan) -> TrainPlan {
    let mut p = template.clone();
    p.mode = TrainMode::HeadsOnly;
    p.strategies.head_warmup = false;
    p.strategies.diff_lr = false;
    p.strategies.whs = false;
    p
}

pub fn baseline_plan(template: &TrainPlan) -> TrainPlan {
    let mut p = heads_only_plan(template);
    p.mode = TrainMode::FinetuneBaseLora;
    p
}

/// Multipliers that bring every head's per-position loss RMS to head 1's.
/// `per_position[n]` holds head `n+1`'s losses on its valid positions.
/// A head with zero RMS keeps factor 1.
pub fn rms_factors(per_position: &[Vec<f64>]) -> Vec<f64> {
    let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt();
    let Some(first) = per_position.first() else {
        return Vec::new();
    };
    let r1 = rms(first);
    per_position
        .iter()
        .enumerate()
        .map(|(n, v)| {
            let rn = rms(v);
            if n == 0 {
                1.0
            } else if rn == 0.0 || r1 == 0.0 {
                warn!("head {} has zero loss RMS; leaving its loss unscaled", n + 1);
                1.0
            } else {
                r1 / rn
            }
        })
        .collect()
}

/// Per-position losses with each head rescaled by [`rms_factors`].
pub fn rms_balance(per_position: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rms_factors(per_position)
        .into_iter()
        .zip(per_position)
        .map(|(f, v)| v.iter().map(|x| x * f).collect())
        .collect()
}

/// Objective value and gradients of one MTP batch.
#[derive(Debug, Clone)]
pub struct MtpLoss<T: Scalar = f32> {
    /// Mean CE per head; `None` when the batch has no valid position for it.
    pub per_head: Vec<Option<f64>>,
    pub factors: Vec<f64>,
    /// `Σ_n factor_n · loss_n` over heads that were not skipped.
    pub total: f64,
    pub skipped: usize,
    pub grads: Grads<T>,
}

/// Sum of per-head cross-entropies; head `n` predicts `ids[t + n]` on
/// positions where `t+1 ..= t+n` all lie in the target span.
pub fn mtp_objective<T: Scalar>(
    cfg: &ModelConfig,
    mtp: &MtpConfig,
    params: &ParamStore<T>,
    batch: &Batch,
    balance: bool,
    with_grads: bool,
) -> Result<MtpLoss<T>> {
    let mut fwd = Forward::new(cfg, params);
    let heads = build_heads(&mut fwd, mtp, batch)?;
    let mut per_head = Vec::with_capacity(heads.len());
    let mut terms = Vec::new();
    let mut rows = Vec::new();
    for (i, &logits) in heads.iter().enumerate() {
        let (targets, mask) = shifted_targets(batch, i + 1);
        if !mask.iter().any(|&m| m) {
            warn!("head {} has no valid target in this batch; skipped", i + 1);
            per_head.push(None);
            continue;
        }
        let (loss, row) = fwd.tape.cross_entropy(logits, &targets, &mask)?;
        per_head.push(Some(fwd.tape.value(loss)[0].as_f64()));
        rows.push(row.into_iter().zip(&mask).filter(|(_, &m)| m).map(|(x, _)| x).collect::<Vec<_>>());
        terms.push(loss);
    }
    if terms.is_empty() {
        return Err(MtpError::DegenerateBatch("no head has a valid target".into()));
    }
    let factors = if balance {
        rms_factors(&rows)
    } else {
        vec![1.0; rows.len()]
    };
    let mut total = None;
    for (&loss, &f) in terms.iter().zip(&factors) {
        let scaled = if f == 1.0 { loss } else { fwd.tape.scale(loss, f)? };
        total = Some(match total {
            None => scaled,
            Some(acc) => fwd.tape.add(acc, scaled)?,
        });
    }
    let total = total.expect("at least one term");
    let value = fwd.tape.value(total)[0].as_f64();
    let grads = if with_grads {
        fwd.tape.backward(total)?;
        fwd.grads()
    } else {
        Grads::new()
    };
    Ok(MtpLoss {
        skipped: per_head.iter().filter(|h| h.is_none()).count(),
        per_head,
        factors,
        total: value,
        grads,
    })
}

/// Per-head losses of an MTP model on one batch (no gradients).
pub fn mtp_loss(m: &MtpModel, batch: &Batch, balance: bool) -> Result<MtpLoss> {
    mtp_objective(&m.config, &m.mtp, &m.params, batch, balance, false)
}

/// The model a training run updates.
#[derive(Debug, Clone, PartialEq)]
pub enum Trainee {
    Base(Checkpoint),
    Mtp(MtpModel),
}

impl Trainee {
    pub fn params(&self) -> &ParamStore {
        match self {
            Trainee::Base(c) => &c.params,
            Trainee::Mtp(m) => &m.params,
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Trainee::Base(c) => &mut c.params,
            Trainee::Mtp(m) => &mut m.params,
        }
    }

    pub fn header(&self) -> Value {
        match self {
            Trainee::Base(c) => c.header(),
            Trainee::Mtp(m) => m.header(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        match self {
            Trainee::Base(c) => c.to_bytes(),
            Trainee::Mtp(m) => m.to_bytes(),
        }
    }

    pub fn from_parts(header: &Value, params: ParamStore) -> Result<Self> {
        match header.get("kind").and_then(Value::as_str) {
            Some("base") => Ok(Trainee::Base(Checkpoint::from_parts(header, params)?)),
            Some("mtp") => Ok(Trainee::Mtp(MtpModel::from_parts(header, params)?)),
            other => Err(MtpError::Format(format!("unknown model kind {other:?}"))),
        }
    }

    pub fn into_base(self) -> Result<Checkpoint> {
        match self {
            Trainee::Base(c) => Ok(c),
            Trainee::Mtp(_) => Err(MtpError::InvalidConfig("expected a base checkpoint".into())),
        }
    }

    pub fn into_mtp(self) -> Result<MtpModel> {
        match self {
            Trainee::Mtp(m) => Ok(m),
            Trainee::Base(_) => Err(MtpError::InvalidConfig("expected an MTP model".into())),
        }
    }

    fn pretrain_lr(&self) -> Option<f64> {
        match self {
            Trainee::Base(c) => c.pretrain_lr,
            Trainee::Mtp(m) => m.pretrain_lr,
        }
    }
}

/// Puts `model` into the parameter layout and freezing state `plan` needs.
/// Joint training with warmup takes its heads from `warmup`.
pub fn prepare(plan: &TrainPlan, model: Trainee, warmup: Option<&MtpModel>) -> Result<Trainee> {
    plan.validate()?;
    match (plan.mode, model) {
        (TrainMode::PretrainNtp, Trainee::Base(mut c)) => {
            if c.params.names().any(|n| is_adapter(n)) {
                return Err(MtpError::AdaptersAttached);
            }
            c.params.set_trainable(true, |_| true);
            Ok(Trainee::Base(c))
        }
        (TrainMode::FinetuneBaseLora, Trainee::Base(mut c)) => {
            c.attach_adapters(plan.adapter_rank, plan.seed)?;
            Ok(Trainee::Base(c))
        }
        (TrainMode::HeadsOnly, Trainee::Mtp(mut m)) => {
            check_whs(plan, &m)?;
            if m.config.adapter_rank > 0 {
                return Err(MtpError::AdaptersAttached);
            }
            m.set_heads_only();
            Ok(Trainee::Mtp(m))
        }
        (TrainMode::Joint, Trainee::Mtp(mut m)) => {
            check_whs(plan, &m)?;
            match (plan.strategies.head_warmup, warmup) {
                (true, Some(w)) => m.load_heads_from(w)?,
                (true, None) => {
                    return Err(MtpError::InvalidConfig(
                        "head warmup requested without warmup heads".into(),
                    ))
                }
                (false, Some(_)) => {
                    return Err(MtpError::InvalidConfig(
                        "warmup heads supplied but head_warmup is off".into(),
                    ))
                }
                (false, None) => {}
            }
            m.prepare_joint(plan.adapter_rank, plan.seed)?;
            Ok(Trainee::Mtp(m))
        }
        (mode, _) => Err(MtpError::InvalidConfig(format!(
            "{mode:?} cannot train this kind of model"
        ))),
    }
}

fn check_whs(plan: &TrainPlan, m: &MtpModel) -> Result<()> {
    if plan.strategies.whs != m.mtp.whs {
        return Err(MtpError::InvalidConfig(format!(
            "plan whs={} but model whs={}",
            plan.strategies.whs, m.mtp.whs
        )));
    }
    Ok(())
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    /// Mean CE per head (a single entry for NTP runs); `null` for skipped heads.
    pub head_losses: Vec<Option<f64>>,
    pub loss_factors: Vec<f64>,
    pub total_loss: f64,
    /// Learning rate per parameter group at this step.
    pub lrs: BTreeMap<String, f64>,
    pub skipped_heads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<Value>,
}

/// Parameter group names used for per-group learning rates.
pub const GROUP_ALL: &str = "all";
pub const GROUP_BACKBONE: &str = "backbone";
pub const GROUP_HEADS: &str = "heads";

/// Stepwise trainer over a fixed corpus. The schedule spans
/// `epochs × ceil(n_train / batch_size)` steps.
pub struct Trainer<'a> {
    plan: TrainPlan,
    corpus: &'a [SequencePair],
    model: Trainee,
    optimizer: OptimizerState,
    base_lr: f64,
    step: u64,
    order: Option<(usize, Vec<usize>)>,
    started: Instant,
}

impl<'a> Trainer<'a> {
    /// Starts a fresh run; `model` must already be [`prepare`]d.
    pub fn new(plan: TrainPlan, model: Trainee, corpus: &'a [SequencePair]) -> Result<Self> {
        plan.validate()?;
        if corpus.is_empty() {
            return Err(MtpError::InvalidConfig("empty training corpus".into()));
        }
        if plan.mode.is_mtp() != matches!(model, Trainee::Mtp(_)) {
            return Err(MtpError::InvalidConfig(format!(
                "{:?} does not match the supplied model",
                plan.mode
            )));
        }
        let base_lr = plan.resolve_base_lr(model.pretrain_lr())?;
        Ok(Trainer {
            optimizer: OptimizerState::new(plan.optimizer),
            plan,
            corpus,
            model,
            base_lr,
            step: 0,
            order: None,
            started: Instant::now(),
        })
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    pub fn model(&self) -> &Trainee {
        &self.model
    }

    pub fn into_model(self) -> Trainee {
        self.model
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.corpus.len().div_ceil(self.plan.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.plan.epochs * self.steps_per_epoch()) as u64
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Group a parameter belongs to.
    pub fn group_of(&self, name: &str) -> &'static str {
        match self.plan.mode {
            TrainMode::Joint if is_head_param(name) => GROUP_HEADS,
            TrainMode::Joint => GROUP_BACKBONE,
            TrainMode::HeadsOnly => GROUP_HEADS,
            TrainMode::FinetuneBaseLora => GROUP_BACKBONE,
            TrainMode::PretrainNtp => GROUP_ALL,
        }
    }

    fn group_base(&self, group: &str) -> f64 {
        if group == GROUP_HEADS && self.plan.strategies.diff_lr {
            self.base_lr * self.plan.strategies.diff_lr_multiplier
        } else {
            self.base_lr
        }
    }

    fn groups(&self) -> &'static [&'static str] {
        match self.plan.mode {
            TrainMode::Joint => &[GROUP_BACKBONE, GROUP_HEADS],
            TrainMode::HeadsOnly => &[GROUP_HEADS],
            TrainMode::FinetuneBaseLora => &[GROUP_BACKBONE],
            TrainMode::PretrainNtp => &[GROUP_ALL],
        }
    }

    /// Cosine-annealed rate of every group at `step`; the last step reaches 0.
    pub fn lrs_at(&self, step: u64) -> Result<BTreeMap<String, f64>> {
        let last = self.total_steps().saturating_sub(1);
        self.groups()
            .iter()
            .map(|&g| Ok((g.to_string(), cosine_lr(step, last, self.group_base(g))?)))
            .collect()
    }

    /// Pair indices of epoch `epoch`, a seeded permutation.
    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = seeded(self.plan.seed, streams::SHUFFLE);
        let mut order: Vec<usize> = (0..self.corpus.len()).collect();
        for _ in 0..=epoch {
            order = (0..self.corpus.len()).collect();
            order.shuffle(&mut rng);
        }
        order
    }

    fn next_batch(&mut self) -> Result<(usize, Batch)> {
        let spe = self.steps_per_epoch();
        let epoch = self.step as usize / spe;
        let i = self.step as usize % spe;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.order = Some((epoch, self.epoch_order(epoch)));
        }
        let order = &self.order.as_ref().expect("order set").1;
        let bs = self.plan.batch_size;
        let idx = &order[i * bs..((i + 1) * bs).min(order.len())];
        let pairs: Vec<&SequencePair> = idx.iter().map(|&j| &self.corpus[j]).collect();
        let pad_to = pairs.iter().map(|p| p.len()).max().unwrap_or(1);
        Ok((epoch, Batch::from_pairs(&pairs, pad_to)?))
    }

    /// One optimizer step. On a numerical failure the model is left as it
    /// was before the step and the error is returned.
    pub fn step(&mut self) -> Result<MetricRecord> {
        if self.is_done() {
            return Err(MtpError::InvalidConfig("training already finished".into()));
        }
        let (epoch, batch) = self.next_batch()?;
        let (head_losses, loss_factors, total_loss, skipped, grads) = match &self.model {
            Trainee::Base(c) => {
                let (loss, grads) = ntp_loss(&c.config, &c.params, &batch, true)?;
                (vec![Some(loss)], vec![1.0], loss, 0, grads)
            }
            Trainee::Mtp(m) => {
                let l = mtp_objective(
                    &m.config,
                    &m.mtp,
                    &m.params,
                    &batch,
                    self.plan.strategies.loss_balance,
                    true,
                )?;
                (l.per_head, l.factors, l.total, l.skipped, l.grads)
            }
        };
        if !total_loss.is_finite() {
            return Err(MtpError::NonFinite("training loss"));
        }
        let lrs = self.lrs_at(self.step)?;
        let lr_of: BTreeMap<&str, f64> = lrs.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        let groups: BTreeMap<String, &'static str> = grads
            .keys()
            .map(|n| (n.clone(), self.group_of(n)))
            .collect();
        let backup: Vec<(String, Tensor)> = grads
            .keys()
            .map(|n| Ok((n.clone(), self.model.params().get(n)?.clone())))
            .collect::<Result<_>>()?;
        let opt_backup = self.optimizer.clone();
        adamw_step(self.model.params_mut(), &grads, &mut self.optimizer, |n| {
            lr_of[groups[n]]
        })?;
        let finite = grads
            .keys()
            .all(|n| self.model.params().get(n).map(|t| t.is_finite()).unwrap_or(false));
        if !finite {
            for (n, t) in backup {
                *self.model.params_mut().get_mut(&n)? = t;
            }
            self.optimizer = opt_backup;
            return Err(MtpError::NonFinite("parameters after update"));
        }
        let record = MetricRecord {
            step: self.step,
            epoch,
            head_losses,
            loss_factors,
            total_loss,
            lrs,
            skipped_heads: skipped,
            wall_clock_ms: self
                .plan
                .record_wall_clock
                .then(|| self.started.elapsed().as_secs_f64() * 1e3),
            eval: None,
        };
        self.step += 1;
        Ok(record)
    }

    /// Runs to completion, handing every record to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&MetricRecord, &Trainer<'a>) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let rec = self.step()?;
            on_step(&rec, self)?;
        }
        Ok(())
    }

    /// Model, optimizer moments, plan and position, enough to continue the
    /// run bit-identically.
    pub fn state_bytes(&self) -> Result<Vec<u8>> {
        let mut store = ParamStore::new();
        for (n, t) in self.model.params().iter() {
            store.insert(format!("param:{n}"), t.clone());
        }
        for (prefix, moments) in [
            ("m:", &self.optimizer.first_moment),
            ("v:", &self.optimizer.second_moment),
        ] {
            for (n, v) in moments {
                store.insert(format!("{prefix}{n}"), Tensor::from_vec(v.clone()));
            }
        }
        let header = json!({
            "kind": "train_state",
            "model": self.model.header(),
            "plan": self.plan,
            "step": self.step,
            "optimizer_step": self.optimizer.step,
        });
        let mut buf = Vec::new();
        write_container(&mut buf, &header, &store)?;
        Ok(buf)
    }

    /// Continues a run saved with [`Trainer::state_bytes`].
    pub fn resume(bytes: &[u8], corpus: &'a [SequencePair]) -> Result<Self> {
        let (header, store) = read_container(bytes)?;
        if header.get("kind").and_then(Value::as_str) != Some("train_state") {
            return Err(MtpError::Format("not a training state".into()));
        }
        let plan: TrainPlan = serde_json::from_value(header["plan"].clone())?;
        let step: u64 = serde_json::from_value(header["step"].clone())?;
        let mut params = ParamStore::new();
        let mut optimizer = OptimizerState::new(plan.optimizer);
        optimizer.step = serde_json::from_value(header["optimizer_step"].clone())?;
        for (n, t) in store.iter() {
            if let Some(p) = n.strip_prefix("param:") {
                params.insert(p, t.clone());
            } else if let Some(p) = n.strip_prefix("m:") {
                optimizer.first_moment.insert(p.to_string(), t.data().to_vec());
            } else if let Some(p) = n.strip_prefix("v:") {
                optimizer.second_moment.insert(p.to_string(), t.data().to_vec());
            } else {
                return Err(MtpError::Format(format!("unexpected tensor '{n}' in training state")));
            }
        }
        let model = Trainee::from_parts(&header["model"], params)?;
        let mut t = Trainer::new(plan, model, corpus)?;
        if step > t.total_steps() {
            return Err(MtpError::Format(format!("saved step {step} beyond schedule")));
        }
        t.step = step;
        t.optimizer = optimizer;
        Ok(t)
    }
}

/// Prepares `model` for `plan`, trains it to completion and returns it with
/// the metrics stream.
pub fn run_training(
    plan: &TrainPlan,
    model: Trainee,
    corpus: &[SequencePair],
    warmup: Option<&MtpModel>,
) -> Result<(Trainee, Vec<MetricRecord>)> {
    let model = prepare(plan, model, warmup)?;
    let mut trainer = Trainer::new(plan.clone(), model, corpus)?;
    let mut records = Vec::with_capacity(trainer.total_steps() as usize);
    trainer.run(|r, _| {
        records.push(r.clone());
        Ok(())
    })?;
    let mut model = trainer.into_model();
    if let (TrainMode::PretrainNtp, Trainee::Base(c)) = (plan.mode, &mut model) {
        c.pretrain_lr = plan.base_lr;
    }
    Ok((model, records))
}

/// NTP pretraining from a random initialization.
pub fn pretrain(
    config: ModelConfig,
    corpus: &[SequencePair],
    plan: &TrainPlan,
) -> Result<(Checkpoint, Vec<MetricRecord>)> {
    let mut plan = plan.clone();
    plan.mode = TrainMode::PretrainNtp;
    let ck = Checkpoint::init(config, plan.seed)?;
    let (m, rec) = run_training(&plan, Trainee::Base(ck), corpus, None)?;
    Ok((m.into_base()?, rec))
}

/// Adapter-only finetuning of an unmodified base model.
pub fn baseline_finetune(
    base: &Checkpoint,
    corpus: &[SequencePair],
    plan: &TrainPlan,
) -> Result<(Checkpoint, Vec<MetricRecord>)> {
    let (m, rec) = run_training(&baseline_plan(plan), Trainee::Base(base.clone()), corpus, None)?;
    Ok((m.into_base()?, rec))
}

/// Heads-only training of a fresh MTP model built on `base`.
pub fn train_heads(
    base: &Checkpoint,
    mtp: &MtpConfig,
    corpus: &[SequencePair],
    plan: &TrainPlan,
) -> Result<(MtpModel, Vec<MetricRecord>)> {
    let plan = heads_only_plan(plan);
    let cfg = MtpConfig { whs: false, ..mtp.clone() };
    let m = init_mtp(base, &cfg, plan.seed)?;
    let (m, rec) = run_training(&plan, Trainee::Mtp(m), corpus, None)?;
    Ok((m.into_mtp()?, rec))
}

/// Joint finetuning of a fresh MTP model built on `base` with `strategy`.
pub fn train_joint(
    base: &Checkpoint,
    mtp: &MtpConfig,
    corpus: &[SequencePair],
    template: &TrainPlan,
    strategy: Strategy,
    warmup: Option<&MtpModel>,
) -> Result<(MtpModel, Vec<MetricRecord>)> {
    let plan = strategy.plan(template);
    let cfg = MtpConfig {
        whs: strategy.uses_whs(),
        ..mtp.clone()
    };
    let m = init_mtp(base, &cfg, plan.seed)?;
    let (m, rec) = run_training(&plan, Trainee::Mtp(m), corpus, warmup)?;
    Ok((m.into_mtp()?, rec))
}

/// Every model of the strategy matrix trained from one base checkpoint.
pub struct MatrixRuns {
    pub baseline: Checkpoint,
    pub heads_only: MtpModel,
    pub joint: Vec<(Strategy, MtpModel)>,
}

/// Trains the baseline, heads-only and every joint variant; warmup variants
/// start from the heads-only result.
pub fn run_matrix(
    base: &Checkpoint,
    mtp: &MtpConfig,
    corpus: &[SequencePair],
    template: &TrainPlan,
) -> Result<MatrixRuns> {
    let (baseline, _) = baseline_finetune(base, corpus, template)?;
    let (heads_only, _) = train_heads(base, mtp, corpus, template)?;
    let joint = Strategy::ALL
        .into_iter()
        .map(|s| {
            let warm = s.uses_warmup().then_some(&heads_only);
            Ok((s, train_joint(base, mtp, corpus, template, s, warm)?.0))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MatrixRuns {
        baseline,
        heads_only,
        joint,
    })
}
