use std::path::Path;

use anyhow::{bail, Context};
use log::{info, warn};
use mtplab::data::{read_jsonl, write_jsonl, Corpus, SequencePair};
use mtplab::eval::{evaluate, report_matrix, EvalReport, EvalSpec, Predictor, PredictorKind, EVAL_FILE, MATRIX_ROWS};
use mtplab::marginal::{second_token_exact, second_token_truncated, MarginalSpec};
use mtplab::model::{read_container, Checkpoint};
use mtplab::mtp::{init_mtp, is_head_param, MtpConfig, MtpModel};
use mtplab::probes::{entropy_csv, entropy_profile, kl_profile, summarize};
use mtplab::train::{baseline_plan, heads_only_plan, prepare, MetricRecord, Strategy, Trainee, Trainer, TrainPlan};
use mtplab::MtpError;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::rundir::{RunDir, CONFIG};
use crate::CliError;

pub const TRAIN_FILE: &str = "corpus/train.jsonl";
pub const EVAL_CORPUS_FILE: &str = "corpus/eval.jsonl";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const STATE: &str = "state.bin";
pub const METRICS: &str = "metrics.jsonl";

/// Resolved configuration plus the locked run directory.
pub struct Ctx {
    pub cfg: RunConfig,
    pub dir: RunDir,
}

impl Ctx {
    /// `config`: file to read; without it the run directory's snapshot is
    /// used. The run-level snapshot is written once and later configs must
    /// match it; `overrides` only affect this command.
    pub fn open(config: Option<&Path>, out: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let (file_cfg, cfg, root) = match config {
            Some(path) => {
                let file_cfg = RunConfig::load(path, &[])?;
                let cfg = RunConfig::load(path, overrides)?;
                let root = cfg.run_dir(out, Some(path))?;
                (file_cfg, cfg, root)
            }
            None => {
                let root = out.ok_or_else(|| CliError::Config("pass --config or --out <run dir>".into()))?;
                let snap = root.join(CONFIG);
                if !snap.exists() {
                    bail!(CliError::Missing(snap));
                }
                let text = std::fs::read_to_string(&snap)?;
                let file_cfg = RunConfig::parse(&text, &[])?;
                let cfg = RunConfig::parse(&text, overrides)?;
                (file_cfg, cfg, root.to_path_buf())
            }
        };
        let mut dir = RunDir::open(&root)?;
        let canonical = file_cfg.to_canonical();
        if dir.exists(CONFIG) {
            let existing = String::from_utf8(dir.read(CONFIG)?)?;
            if RunConfig::parse(&existing, &[])? != file_cfg {
                bail!(CliError::Config(format!(
                    "{} was created with a different config; use a new run directory",
                    root.display()
                )));
            }
        } else {
            dir.write(CONFIG, canonical.as_bytes())?;
        }
        Ok(Ctx { cfg, dir })
    }

    fn corpus(&self, rel: &str) -> anyhow::Result<Vec<SequencePair>> {
        let bytes = self.dir.read(rel)?;
        Ok(read_jsonl(&bytes[..]).with_context(|| format!("reading {rel}"))?)
    }

    pub fn train_corpus(&self) -> anyhow::Result<Vec<SequencePair>> {
        self.corpus(TRAIN_FILE)
    }

    pub fn eval_corpus(&self) -> anyhow::Result<Vec<SequencePair>> {
        self.corpus(EVAL_CORPUS_FILE)
    }

    fn write_json(&mut self, rel: &str, v: &impl serde::Serialize) -> anyhow::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(v)?;
        bytes.push(b'\n');
        self.dir.write(rel, &bytes)
    }

    /// A model checkpoint from a file, a stage directory, or a run
    /// directory (then `default_stage` inside it). `None` means this run's
    /// `default_stage`.
    fn load_model(&self, path: Option<&Path>, default_stage: &str) -> anyhow::Result<Trainee> {
        let file = match path {
            None => self.dir.path(&format!("{default_stage}/{CHECKPOINT}")),
            Some(p) if p.is_dir() && p.join(CHECKPOINT).exists() => p.join(CHECKPOINT),
            Some(p) if p.is_dir() => p.join(default_stage).join(CHECKPOINT),
            Some(p) => p.to_path_buf(),
        };
        if !file.exists() {
            bail!(CliError::Missing(file));
        }
        let bytes = std::fs::read(&file)?;
        let (header, params) = read_container(&bytes[..]).with_context(|| format!("reading {}", file.display()))?;
        Ok(Trainee::from_parts(&header, params)?)
    }

    fn load_base(&self, path: Option<&Path>, stage: &str) -> anyhow::Result<Checkpoint> {
        match self.load_model(path, stage)? {
            Trainee::Base(c) => Ok(c),
            Trainee::Mtp(_) => Err(CliError::Config(format!("{stage}: expected a base checkpoint, found an MTP model")).into()),
        }
    }

    fn load_mtp(&self, path: Option<&Path>, stage: &str) -> anyhow::Result<MtpModel> {
        match self.load_model(path, stage)? {
            Trainee::Mtp(m) => Ok(m),
            Trainee::Base(_) => Err(CliError::Config(format!("{stage}: expected an MTP model, found a base checkpoint")).into()),
        }
    }
}

pub fn gen_corpus(ctx: &mut Ctx) -> anyhow::Result<()> {
    let corpus = Corpus::generate(&ctx.cfg.corpus).map_err(|e| CliError::Config(e.to_string()))?;
    for (rel, pairs) in [(TRAIN_FILE, &corpus.train), (EVAL_CORPUS_FILE, &corpus.eval)] {
        let mut buf = Vec::new();
        write_jsonl(pairs, &mut buf)?;
        ctx.dir.write(rel, &buf)?;
    }
    let snapshot = ctx.cfg.to_canonical();
    ctx.dir.write(&format!("corpus/{CONFIG}"), snapshot.as_bytes())?;
    println!(
        "wrote {} train and {} eval pairs to {}",
        corpus.train.len(),
        corpus.eval.len(),
        ctx.dir.path("corpus").display()
    );
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub force: bool,
    pub max_steps: Option<u64>,
}

fn checksums(model: &Trainee) -> Value {
    let p = model.params();
    let trainable = p.trainable_names();
    json!({
        "all": format!("{:016x}", p.checksum(|_| true)),
        "trainable": format!("{:016x}", p.checksum(|n| trainable.iter().any(|t| t == n))),
        "heads": format!("{:016x}", p.checksum(is_head_param)),
    })
}

fn metrics_bytes(records: &[MetricRecord]) -> anyhow::Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Trains (or resumes) one stage. Returns `None` when stopped early by
/// `--max-steps`.
fn train_stage(
    ctx: &mut Ctx,
    stage: &str,
    plan: &TrainPlan,
    corpus: &[SequencePair],
    args: &TrainArgs,
    fresh: impl FnOnce() -> anyhow::Result<Trainee>,
) -> anyhow::Result<Option<Trainee>> {
    let ckpt = format!("{stage}/{CHECKPOINT}");
    let state = format!("{stage}/{STATE}");
    let metrics_rel = format!("{stage}/{METRICS}");
    let snapshot_rel = format!("{stage}/{CONFIG}");
    if args.force {
        ctx.dir.clear_stage(stage)?;
    } else if ctx.dir.exists(&ckpt) {
        bail!(CliError::Config(format!(
            "stage '{stage}' is already complete; pass --force to retrain it"
        )));
    }
    let snapshot = ctx.cfg.to_canonical();
    let (mut trainer, mut records) = if ctx.dir.exists(&state) {
        let existing = String::from_utf8(ctx.dir.read(&snapshot_rel)?)?;
        if existing != snapshot {
            bail!(CliError::Config(format!(
                "effective config differs from the one '{stage}' was started with"
            )));
        }
        let bytes = ctx.dir.read(&state)?;
        let t = Trainer::resume(&bytes, corpus)?;
        if t.plan() != plan {
            bail!(CliError::Config(format!("saved plan of '{stage}' differs from the requested one")));
        }
        let mut records = Vec::new();
        if ctx.dir.exists(&metrics_rel) {
            for line in String::from_utf8(ctx.dir.read(&metrics_rel)?)?.lines() {
                let r: MetricRecord = serde_json::from_str(line)?;
                if r.step < t.step_index() {
                    records.push(r);
                }
            }
        }
        info!("{stage}: resuming at step {} of {}", t.step_index(), t.total_steps());
        (t, records)
    } else {
        ctx.dir.write(&snapshot_rel, snapshot.as_bytes())?;
        let model = fresh()?;
        ctx.write_json(&format!("{stage}/init.json"), &checksums(&model))?;
        let t = Trainer::new(plan.clone(), model, corpus)?;
        (t, Vec::new())
    };
    let total = trainer.total_steps();
    let every = ctx.cfg.checkpoint_every;
    let mut budget = args.max_steps;
    let persist = |ctx: &mut Ctx, trainer: &Trainer, records: &[MetricRecord]| -> anyhow::Result<()> {
        ctx.dir.write(&metrics_rel, &metrics_bytes(records)?)?;
        ctx.dir.write(&state, &trainer.state_bytes()?)
    };
    while !trainer.is_done() {
        if budget == Some(0) {
            persist(ctx, &trainer, &records)?;
            println!(
                "{stage}: stopped at step {} of {total}; rerun the same command to resume",
                trainer.step_index()
            );
            return Ok(None);
        }
        let rec = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                // the trainer rolled back, so the saved state is clean
                persist(ctx, &trainer, &records)?;
                return Err(e.into());
            }
        };
        if rec.step % 100 == 0 || rec.step + 1 == total {
            info!("{stage}: step {}/{total} loss {:.4}", rec.step + 1, rec.total_loss);
        }
        records.push(rec);
        budget = budget.map(|b| b - 1);
        if trainer.step_index() % every == 0 && !trainer.is_done() {
            persist(ctx, &trainer, &records)?;
        }
    }
    let mut model = trainer.into_model();
    if let (mtplab::train::TrainMode::PretrainNtp, Trainee::Base(c)) = (plan.mode, &mut model) {
        c.pretrain_lr = plan.base_lr;
    }
    ctx.dir.write(&metrics_rel, &metrics_bytes(&records)?)?;
    ctx.dir.write(&ckpt, &model.to_bytes()?)?;
    ctx.dir.remove(&state)?;
    let last = records.last().map(|r| r.total_loss);
    ctx.write_json(
        &format!("{stage}/summary.json"),
        &json!({ "steps": total, "final_loss": last, "checksums": checksums(&model) }),
    )?;
    println!("{stage}: trained {total} steps, final loss {}", last.map(|l| format!("{l:.4}")).unwrap_or_default());
    Ok(Some(model))
}

pub fn pretrain(ctx: &mut Ctx, args: &TrainArgs) -> anyhow::Result<()> {
    let corpus = ctx.train_corpus()?;
    let plan = ctx.cfg.pretrain.clone();
    let config = ctx.cfg.model.clone();
    train_stage(ctx, "pretrain", &plan, &corpus, args, || {
        let ck = Checkpoint::init(config, plan.seed)?;
        Ok(prepare(&plan, Trainee::Base(ck), None)?)
    })?;
    Ok(())
}

pub fn finetune_baseline(ctx: &mut Ctx, base: Option<&Path>, args: &TrainArgs) -> anyhow::Result<()> {
    let corpus = ctx.train_corpus()?;
    let base = ctx.load_base(base, "pretrain")?;
    let plan = baseline_plan(&ctx.cfg.finetune);
    train_stage(ctx, "baseline", &plan, &corpus, args, || {
        Ok(prepare(&plan, Trainee::Base(base), None)?)
    })?;
    Ok(())
}

pub fn train_heads(ctx: &mut Ctx, base: Option<&Path>, args: &TrainArgs) -> anyhow::Result<()> {
    let corpus = ctx.train_corpus()?;
    let base = ctx.load_base(base, "pretrain")?;
    let plan = heads_only_plan(&ctx.cfg.finetune);
    let mtp = MtpConfig { whs: false, ..ctx.cfg.mtp.clone() };
    train_stage(ctx, "heads_only", &plan, &corpus, args, || {
        let m = init_mtp(&base, &mtp, plan.seed)?;
        Ok(prepare(&plan, Trainee::Mtp(m), None)?)
    })?;
    Ok(())
}

pub fn joint(
    ctx: &mut Ctx,
    strategy: Strategy,
    base: Option<&Path>,
    warmup_from: Option<&Path>,
    args: &TrainArgs,
) -> anyhow::Result<()> {
    let plan = strategy.plan(&ctx.cfg.finetune);
    if warmup_from.is_some() && !strategy.uses_warmup() {
        bail!(CliError::Config(format!(
            "--warmup-from given but strategy '{}' does not use warmup",
            strategy.cli_name()
        )));
    }
    let corpus = ctx.train_corpus()?;
    let base = ctx.load_base(base, "pretrain")?;
    let warm = if strategy.uses_warmup() {
        Some(ctx.load_mtp(warmup_from, "heads_only")?)
    } else {
        None
    };
    let mtp = MtpConfig {
        whs: strategy.uses_whs(),
        ..ctx.cfg.mtp.clone()
    };
    if let Some(w) = &warm {
        if w.mtp.n_heads != mtp.n_heads || w.config.n_layers != base.config.n_layers {
            bail!(CliError::Config("warmup heads do not match the configured model".into()));
        }
    }
    train_stage(ctx, strategy.stage(), &plan, &corpus, args, || {
        let m = init_mtp(&base, &mtp, plan.seed)?;
        Ok(prepare(&plan, Trainee::Mtp(m), warm.as_ref())?)
    })?;
    Ok(())
}

fn positions_csv(records: &[mtplab::eval::PositionRecord], tv: Option<&[Option<f64>]>) -> String {
    let mut out = String::from("sequence,position,next_hit,second_hit,tv_exact\n");
    for (i, r) in records.iter().enumerate() {
        let second = r.second_hit.map(|h| (h as u8).to_string()).unwrap_or_default();
        let tv = tv
            .and_then(|t| t[i])
            .map(|x| format!("{x:.9}"))
            .unwrap_or_default();
        out.push_str(&format!("{},{},{},{second},{tv}\n", r.sequence, r.position, r.next_hit as u8));
    }
    out
}

fn print_report(stage: &str, r: &EvalReport) {
    let second = r.second_top5.map(|s| format!("{s:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "{stage}: next top-{k} {:.4}, 2nd top-{k} {second} over {} positions",
        r.next_top5,
        r.n_positions,
        k = r.top_k
    );
}

pub fn eval_marginal(ctx: &mut Ctx, stage: &str, top_p: Option<f64>, with_tv: bool) -> anyhow::Result<()> {
    let eval = ctx.eval_corpus()?;
    let ck = ctx.load_base(None, stage)?;
    let spec = MarginalSpec {
        top_p: top_p.unwrap_or(ctx.cfg.marginal.top_p),
        ..ctx.cfg.marginal.clone()
    };
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let es = EvalSpec {
        predictor: PredictorKind::Marginal,
        ..ctx.cfg.eval.clone()
    };
    let (report, records) = evaluate(&Predictor::Marginal(&ck, spec.clone()), &eval, &es)?;
    let tv = if with_tv {
        let mut tv = Vec::with_capacity(records.len());
        for r in &records {
            let ctx_ids = &eval[r.sequence].ids[..=r.position];
            match second_token_exact(&ck, ctx_ids) {
                Ok(exact) => {
                    let trunc = second_token_truncated(&ck, ctx_ids, &spec)?;
                    tv.push(Some(trunc.total_variation(&exact)));
                }
                Err(e @ (MtpError::VocabTooLarge(_) | MtpError::BudgetExceeded(_))) => {
                    warn!("no exact reference: {e}");
                    tv.clear();
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        (!tv.is_empty()).then_some(tv)
    } else {
        None
    };
    let tag = format!("{}/marginal_p{}", stage, spec.top_p);
    ctx.dir.write(&format!("{tag}.csv"), positions_csv(&records, tv.as_deref()).as_bytes())?;
    let max_tv = tv.as_ref().map(|t| t.iter().flatten().copied().fold(0.0, f64::max));
    ctx.write_json(
        &format!("{tag}.json"),
        &json!({ "report": report, "marginal": spec, "max_tv_exact": max_tv }),
    )?;
    if spec.top_p == ctx.cfg.marginal.top_p {
        ctx.write_json(&format!("{stage}/{EVAL_FILE}"), &report)?;
    }
    print_report(stage, &report);
    if let Some(m) = max_tv {
        println!("{stage}: max TV to exact marginal {m:.6}");
    }
    Ok(())
}

pub fn eval_heads(ctx: &mut Ctx, stage: &str) -> anyhow::Result<()> {
    let eval = ctx.eval_corpus()?;
    let m = ctx.load_mtp(None, stage)?;
    let es = EvalSpec {
        predictor: PredictorKind::MtpHeads,
        ..ctx.cfg.eval.clone()
    };
    let (report, records) = evaluate(&Predictor::MtpHeads(&m), &eval, &es)?;
    ctx.dir.write(&format!("{stage}/heads_positions.csv"), positions_csv(&records, None).as_bytes())?;
    ctx.write_json(&format!("{stage}/{EVAL_FILE}"), &report)?;
    print_report(stage, &report);
    Ok(())
}

/// Probe target: a trained stage, or `init` for the untrained model the
/// pretraining stage starts from.
fn probe_model(ctx: &Ctx, stage: &str) -> anyhow::Result<Checkpoint> {
    if stage == "init" {
        Ok(Checkpoint::init(ctx.cfg.model.clone(), ctx.cfg.pretrain.seed)?)
    } else {
        ctx.load_base(None, stage)
    }
}

fn probe_corpus(ctx: &Ctx, which: &str) -> anyhow::Result<Vec<SequencePair>> {
    match which {
        "eval" => ctx.eval_corpus(),
        "train" => ctx.train_corpus(),
        other => Err(CliError::Config(format!("unknown corpus '{other}' (eval|train)")).into()),
    }
}

pub fn probe_kl(ctx: &mut Ctx, stage: &str, which: &str) -> anyhow::Result<()> {
    let pairs = probe_corpus(ctx, which)?;
    let ck = probe_model(ctx, stage)?;
    let profile = kl_profile(&ck, &pairs)?;
    let tag = format!("probes/kl_{stage}_{which}");
    ctx.dir.write(&format!("{tag}.csv"), profile.to_csv().as_bytes())?;
    ctx.write_json(&format!("{tag}.json"), &profile.sidecar(which, json!({ "stage": stage })))?;
    for (i, v) in profile.values.iter().enumerate() {
        println!("{stage} layer {}/{}: KL {v:.6}", i + 1, profile.n_layers);
    }
    Ok(())
}

pub fn probe_entropy(ctx: &mut Ctx, stage: &str, which: &str, top_p: Option<f64>) -> anyhow::Result<()> {
    let pairs = probe_corpus(ctx, which)?;
    let ck = probe_model(ctx, stage)?;
    let p = top_p.unwrap_or(ctx.cfg.marginal.top_p);
    let rows = entropy_profile(&ck, &pairs, p)?;
    let summary = summarize(&rows)?;
    let tag = format!("probes/entropy_{stage}_{which}");
    ctx.dir.write(&format!("{tag}.csv"), entropy_csv(&rows).as_bytes())?;
    ctx.write_json(
        &format!("{tag}.json"),
        &json!({ "stage": stage, "corpus": which, "top_p": p, "summary": summary }),
    )?;
    println!(
        "{stage}: mean entropy {:.4} nats, mean top-{p} count {:.2} over {} positions",
        summary.mean_entropy, summary.mean_top_p_count, summary.n_positions
    );
    Ok(())
}

pub fn report(ctx: &mut Ctx, model: &str, tolerance: Option<f64>) -> anyhow::Result<()> {
    let tol = tolerance.unwrap_or(ctx.cfg.report_tolerance);
    let present: Vec<&str> = MATRIX_ROWS
        .iter()
        .filter(|(_, s)| ctx.dir.exists(&format!("{s}/{EVAL_FILE}")))
        .map(|(_, s)| *s)
        .collect();
    if present.is_empty() {
        bail!(CliError::Missing(ctx.dir.path(&format!("baseline/{EVAL_FILE}"))));
    }
    for (_, s) in MATRIX_ROWS.iter().filter(|(_, s)| !present.contains(s)) {
        warn!("no {s}/{EVAL_FILE}; its row is left empty");
    }
    let matrix = report_matrix(ctx.dir.root(), model, tol)?;
    ctx.dir.write("report.csv", matrix.to_csv().as_bytes())?;
    ctx.write_json("report.json", &matrix)?;
    let (kl, entropy) = probe_tables(ctx)?;
    ctx.dir.write("report_kl.csv", kl.as_bytes())?;
    ctx.dir.write("report_entropy.csv", entropy.as_bytes())?;
    print!("{}", matrix.to_csv());
    println!("ordering: {}", serde_json::to_string(&matrix.flags)?);
    Ok(())
}

/// Layer profiles and span summaries of every probe run, one table each.
fn probe_tables(ctx: &Ctx) -> anyhow::Result<(String, String)> {
    let mut kl = String::from("stage,corpus,layer_frac,metric,value\n");
    let mut ent = String::from("stage,corpus,top_p,mean_entropy,mean_top_p_count,n_positions\n");
    let names: Vec<String> = ctx
        .dir
        .manifest()
        .artifacts
        .keys()
        .filter(|k| k.starts_with("probes/"))
        .cloned()
        .collect();
    for name in names {
        if let Some(tag) = name.strip_prefix("probes/kl_").and_then(|s| s.strip_suffix(".json")) {
            let side: Value = serde_json::from_slice(&ctx.dir.read(&name)?)?;
            let stage = side["extra"]["stage"].as_str().unwrap_or(tag);
            let corpus = side["corpus"].as_str().unwrap_or("");
            let csv = String::from_utf8(ctx.dir.read(&name.replace(".json", ".csv"))?)?;
            for line in csv.lines().skip(1) {
                kl.push_str(&format!("{stage},{corpus},{line}\n"));
            }
        } else if name.starts_with("probes/entropy_") && name.ends_with(".json") {
            let v: Value = serde_json::from_slice(&ctx.dir.read(&name)?)?;
            let s = &v["summary"];
            ent.push_str(&format!(
                "{},{},{},{},{},{}\n",
                v["stage"].as_str().unwrap_or(""),
                v["corpus"].as_str().unwrap_or(""),
                v["top_p"],
                s["mean_entropy"],
                s["mean_top_p_count"],
                s["n_positions"]
            ));
        }
    }
    Ok((kl, ent))
}

pub fn default_config() -> String {
    RunConfig::default().to_canonical()
}
