use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use recycled_core::decoding::{BeamConfig, EnsembleScorer, Scorer};
use recycled_core::exec::ExecMode;
use recycled_core::gradsuite::{self, GradSuiteConfig};
use recycled_core::metrics::{evaluate, GoldRecord, Prediction};
use recycled_core::model::{
    build_examples, decode_examples, fit_with_checkpoints, load_model, restrict_to_queried, save_model, AnyModel,
    DualSourceConfig, Example, FitConfig, LogEntry, ModelMeta, ModelSpec, Seq2Seq, Seq2SeqConfig, TaskMode, Trainer,
    TrainerConfig,
};
use recycled_core::recycler::{
    apply_annotation_filter, audit_splits, draft_splits, merge, partition_labels, read_instances, read_jsonl,
    tag_records, write_jsonl, Block, BlockSizes, EmInTag, FilterEntry, InstanceFields, LabelPartition,
    MultiPropertyRecord, ValueTag,
};
use recycled_core::synth;
use recycled_core::tokenize::{SubwordModel, Truecaser};

use crate::failure::Failure;
use crate::overrides;
use crate::{
    AuditArgs, BuildArgs, Cli, Command, DecodeArgs, EvaluateArgs, GradCheckArgs, SplitArgs, SynthArgs, SynthKind,
    TagArgs, TokenizerTrainArgs, TrainArgs,
};

const VERSION: &str = env!("CARGO_PKG_VERSION");

struct Ctx<'a> {
    cli: &'a Cli,
    exec: ExecMode,
}

impl Ctx<'_> {
    /// Creates the output directory and records the resolved configuration.
    fn prepare(&self, out_dir: &Path, resolved: Value) -> Result<()> {
        fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        let doc = json!({
            "tool": "recycled",
            "version": VERSION,
            "seed": self.cli.seed,
            "jobs": self.cli.jobs,
            "command": serde_json::to_value(&self.cli.command)?,
            "resolved": resolved,
        });
        write_json(&out_dir.join("resolved_config.json"), &doc)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())).into())
}

fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(path).with_context(|| format!("reading {}", path.display()))
}

fn read_records(paths: &[PathBuf]) -> Result<Vec<MultiPropertyRecord>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(load_jsonl::<MultiPropertyRecord>(p)?);
    }
    Ok(out)
}

fn exec_mode(jobs: Option<usize>) -> Result<ExecMode> {
    match jobs {
        Some(0) => Err(Failure::Usage("--jobs must be at least 1".into()).into()),
        Some(1) => Ok(ExecMode::Sequential),
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Failure::Usage(format!("--jobs {n}: {e}")))?;
            Ok(ExecMode::Parallel)
        }
        None => Ok(ExecMode::Parallel),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = Ctx {
        cli,
        exec: exec_mode(cli.jobs)?,
    };
    match &cli.command {
        Command::Synth(a) => synth_cmd(&ctx, a),
        Command::TokenizerTrain(a) => tokenizer_train(&ctx, a),
        Command::BuildRecycled(a) => build_recycled(&ctx, a),
        Command::Split(a) => split(&ctx, a),
        Command::TagEmIn(a) => tag_em_in(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Decode(a) => decode(&ctx, a),
        Command::Evaluate(a) => evaluate_cmd(&ctx, a),
        Command::GradCheck(a) => grad_check(&ctx, a),
        Command::AuditSplit(a) => audit_split(&ctx, a),
    }
}

fn synth_cmd(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    ctx.prepare(&a.out_dir, Value::Null)?;
    let seed = ctx.cli.seed;
    let records = match a.kind {
        SynthKind::Split => synth::split_corpus(a.count, a.properties, seed),
        SynthKind::Extraction => synth::extraction_fixture(a.count, seed),
        SynthKind::Leakage => synth::leakage_corpus(a.count, true, seed),
        SynthKind::LeakageControl => synth::leakage_corpus(a.count, false, seed),
    };
    write_jsonl(&a.out_dir.join("records.jsonl"), &records)?;
    info!("wrote {} records", records.len());
    Ok(())
}

fn tokenizer_train(ctx: &Ctx, a: &TokenizerTrainArgs) -> Result<()> {
    ctx.prepare(&a.out_dir, Value::Null)?;
    let records = read_records(&a.records)?;
    if records.is_empty() {
        return Err(Failure::Data("no records to train the tokenizer on".into()).into());
    }
    let tok = SubwordModel::train(synth::tokenizer_corpus(&records), a.vocab_size)?;
    tok.save(&a.out_dir.join("tokenizer.json"))?;
    let tc = Truecaser::train(records.iter().map(|r| r.text.as_str()), true);
    tc.save(&a.out_dir.join("truecaser.json"))?;
    info!(
        "tokenizer: {} entries ({} merges)",
        tok.vocab_size(),
        tok.merges().len()
    );
    Ok(())
}

fn build_recycled(ctx: &Ctx, a: &BuildArgs) -> Result<()> {
    ctx.prepare(&a.out_dir, Value::Null)?;
    let fields = InstanceFields {
        id: a.id_field.clone(),
        text: a.text_field.clone(),
        property: a.property_field.clone(),
        values: a.values_field.clone(),
    };
    let mut instances = Vec::new();
    for p in &a.instances {
        instances.extend(read_instances(p, &fields).with_context(|| format!("reading {}", p.display()))?);
    }
    let n = instances.len();
    let out = merge(instances);
    write_jsonl(&a.out_dir.join("records.jsonl"), &out.records)?;
    let report = json!({
        "instances": n,
        "articles": out.records.len(),
        "text_conflicts": out.text_conflicts,
    });
    write_json(&a.out_dir.join("merge_report.json"), &report)?;
    println!("{report}");
    Ok(())
}

fn split(ctx: &Ctx, a: &SplitArgs) -> Result<()> {
    let proportions: [f64; 4] = a
        .proportions
        .clone()
        .try_into()
        .map_err(|_| Failure::Usage("--proportions takes four values".into()))?;
    if a.scale.is_nan() || a.scale <= 0.0 {
        return Err(Failure::Usage("--scale must be positive".into()).into());
    }
    let sizes = BlockSizes::PAPER.scaled(a.scale);
    ctx.prepare(&a.out_dir, json!({ "proportions": proportions, "block_sizes": sizes }))?;
    let records = load_jsonl::<MultiPropertyRecord>(&a.records)?;
    let universe = records.iter().flat_map(|r| r.properties.keys().cloned()).collect();
    let partition = partition_labels(&universe, proportions, ctx.cli.seed)?;
    let mut plan = draft_splits(&records, &partition, sizes, ctx.cli.seed)?;
    if let Some(path) = &a.annotation_filter {
        let entries: Vec<FilterEntry> = load_jsonl(path)?;
        let (validation, val_report) = apply_annotation_filter(&plan.validation, &entries);
        let (test, test_report) = apply_annotation_filter(&plan.test, &entries);
        plan.validation = validation;
        plan.test = test;
        write_json(
            &a.out_dir.join("filter_report.json"),
            &json!({ "validation": val_report, "test": test_report }),
        )?;
        plan.audit = audit_splits(
            &plan.train,
            &plan.validation,
            &plan.test,
            &partition,
            Some(&plan.blocks),
        );
    }
    write_jsonl(&a.out_dir.join("train.jsonl"), &plan.train)?;
    write_jsonl(&a.out_dir.join("validation.jsonl"), &plan.validation)?;
    write_jsonl(&a.out_dir.join("test.jsonl"), &plan.test)?;
    write_json(&a.out_dir.join("partition.json"), &partition)?;
    write_json(&a.out_dir.join("blocks.json"), &plan.blocks)?;
    write_json(&a.out_dir.join("audit.json"), &plan.audit)?;
    println!("{}", serde_json::to_string(&plan.audit)?);
    check_audit(&plan.audit)
}

fn check_audit(audit: &recycled_core::recycler::AuditReport) -> Result<()> {
    if audit.leakage_free() {
        Ok(())
    } else {
        Err(Failure::Audit(format!("split leaks: {}", audit.failures().join(", "))).into())
    }
}

fn audit_split(ctx: &Ctx, a: &AuditArgs) -> Result<()> {
    ctx.prepare(&a.out_dir, Value::Null)?;
    let dir = &a.split_dir;
    let train = load_jsonl::<MultiPropertyRecord>(&dir.join("train.jsonl"))?;
    let validation = load_jsonl::<MultiPropertyRecord>(&dir.join("validation.jsonl"))?;
    let test = load_jsonl::<MultiPropertyRecord>(&dir.join("test.jsonl"))?;
    let partition: LabelPartition = read_json(&dir.join("partition.json"))?;
    let blocks_path = dir.join("blocks.json");
    let blocks: Option<BTreeMap<String, Block>> = if blocks_path.exists() {
        Some(read_json(&blocks_path)?)
    } else {
        None
    };
    let audit = audit_splits(&train, &validation, &test, &partition, blocks.as_ref());
    write_json(&a.out_dir.join("audit.json"), &audit)?;
    println!("{}", serde_json::to_string(&audit)?);
    check_audit(&audit)
}

fn tag_em_in(ctx: &Ctx, a: &TagArgs) -> Result<()> {
    ctx.prepare(&a.out_dir, Value::Null)?;
    let records = load_jsonl::<MultiPropertyRecord>(&a.records)?;
    let tags = tag_records(ctx.exec, &records);
    write_jsonl(&a.out_dir.join("tags.jsonl"), &tags)?;
    let em = tags.iter().filter(|t| t.tag == ValueTag::ExactMatch).count();
    let summary = json!({ "values": tags.len(), "em": em, "in": tags.len() - em });
    write_json(&a.out_dir.join("tag_summary.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Architecture {
    Dual,
    Basic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Preset {
    Desk,
    Paper,
}

/// Everything `train` resolves before it starts.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainPlan {
    architecture: Architecture,
    task: TaskMode,
    preset: Preset,
    model: Value,
    trainer: TrainerConfig,
    fit: FitConfig,
}

impl TrainPlan {
    fn spec(&self) -> Result<ModelSpec> {
        let bad = |e: serde_json::Error| Failure::Usage(format!("model config: {e}"));
        Ok(match self.architecture {
            Architecture::Dual => ModelSpec::Dual(serde_json::from_value(self.model.clone()).map_err(bad)?),
            Architecture::Basic => ModelSpec::Basic(serde_json::from_value(self.model.clone()).map_err(bad)?),
        })
    }
}

fn parse_choice<T: for<'de> Deserialize<'de>>(key: &str, raw: &str) -> Result<T> {
    serde_json::from_value(Value::String(raw.to_string()))
        .map_err(|_| Failure::Usage(format!("{key}={raw} is not a valid choice")).into())
}

fn resolve_plan(overrides_raw: &[String], vocab: usize, seed: u64) -> Result<TrainPlan> {
    let mut arch = Architecture::Dual;
    let mut task = None;
    let mut preset = Preset::Desk;
    let mut rest = Vec::new();
    for raw in overrides_raw {
        let (k, v) = overrides::split_pair(raw)?;
        match k {
            "model" => arch = parse_choice(k, v)?,
            "mode" | "task" => task = Some(parse_choice(k, v)?),
            "preset" => preset = parse_choice(k, v)?,
            _ => rest.push((k, v)),
        }
    }
    let task = task.unwrap_or(match arch {
        Architecture::Dual => TaskMode::Multi,
        Architecture::Basic => TaskMode::Single,
    });
    let model = match (arch, preset) {
        (Architecture::Dual, Preset::Desk) => serde_json::to_value(DualSourceConfig {
            vocab,
            ..DualSourceConfig::desk()
        })?,
        (Architecture::Dual, Preset::Paper) => serde_json::to_value(DualSourceConfig {
            vocab,
            ..DualSourceConfig::paper()
        })?,
        (Architecture::Basic, Preset::Desk) => serde_json::to_value(Seq2SeqConfig {
            vocab,
            ..Seq2SeqConfig::desk()
        })?,
        (Architecture::Basic, Preset::Paper) => serde_json::to_value(Seq2SeqConfig {
            vocab,
            ..Seq2SeqConfig::paper()
        })?,
    };
    let (trainer, fit) = match preset {
        Preset::Desk => (
            TrainerConfig::desk(),
            FitConfig {
                patience: Some(5),
                ..FitConfig::default()
            },
        ),
        Preset::Paper => (
            TrainerConfig::paper(),
            FitConfig {
                max_steps: 1_000_000,
                validation_interval: 10_000,
                patience: Some(10),
                ..FitConfig::default()
            },
        ),
    };
    let plan = TrainPlan {
        architecture: arch,
        task,
        preset,
        model,
        trainer: TrainerConfig { seed, ..trainer },
        fit,
    };
    let mut value = serde_json::to_value(&plan)?;
    for (k, v) in rest {
        overrides::apply(&mut value, k, v)?;
    }
    let plan: TrainPlan = serde_json::from_value(value).map_err(|e| Failure::Usage(format!("train config: {e}")))?;
    if plan.spec()?.vocab() != vocab {
        return Err(Failure::Usage(format!(
            "model.vocab={} does not match the tokenizer ({vocab})",
            plan.spec()?.vocab()
        ))
        .into());
    }
    Ok(plan)
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let tok = SubwordModel::load(&a.tokenizer).with_context(|| format!("reading {}", a.tokenizer.display()))?;
    let plan = resolve_plan(&a.overrides, tok.vocab_size(), ctx.cli.seed)?;
    let spec = plan.spec()?;
    ctx.prepare(&a.out_dir, serde_json::to_value(&plan)?)?;
    let truecaser = match &a.truecaser {
        Some(p) => Some(Truecaser::load(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };

    let train_records = load_jsonl::<MultiPropertyRecord>(&a.train)?;
    let (train_ex, stats) = build_examples(&train_records, &tok, plan.task, spec.layout(), spec.max_positions());
    info!(
        "{} training examples, {} truncated sources",
        stats.examples, stats.truncated_sources
    );
    let val_ex = match &a.validation {
        Some(p) => {
            build_examples(
                &load_jsonl::<MultiPropertyRecord>(p)?,
                &tok,
                plan.task,
                spec.layout(),
                spec.max_positions(),
            )
            .0
        }
        None => Vec::new(),
    };

    let mut model = AnyModel::<f32>::new(&spec, ctx.cli.seed)?;
    model.set_exec(ctx.exec);
    let mut trainer = Trainer::new(plan.trainer, model.store());
    let meta = ModelMeta {
        model: spec,
        task: plan.task,
        tokenizer: tok,
        truecaser,
        tool_version: VERSION.to_string(),
    };

    let mut log = BufWriter::new(File::create(a.out_dir.join("log.jsonl"))?);
    let mut log_err = None;
    let mut on_log = |e: &LogEntry| {
        info!("step {} loss {:.4} lr {:.2e}", e.step, e.loss, e.lr);
        if let Err(err) = serde_json::to_writer(&mut log, e)
            .map_err(anyhow::Error::from)
            .and_then(|_| Ok(log.write_all(b"\n")?))
        {
            log_err.get_or_insert(err);
        }
    };

    let out_dir = &a.out_dir;
    let report = fit_with_checkpoints(
        &mut model,
        &mut trainer,
        &train_ex,
        &val_ex,
        &plan.fit,
        &mut on_log,
        |step, m| save_model(&out_dir.join(format!("checkpoint-{step}.ckpt")), m, &meta, step),
    )?;
    if let Some(err) = log_err {
        return Err(err.context("writing log.jsonl"));
    }
    log.flush()?;
    save_model(&a.out_dir.join("model.ckpt"), &model, &meta, trainer.step)?;
    write_json(&a.out_dir.join("fit_report.json"), &report)?;
    let last = report.final_train_loss;
    if !last.is_finite() {
        return Err(Failure::Numeric(format!("final training loss is {last}")).into());
    }
    println!("{}", json!({ "steps": trainer.step, "final_train_loss": last }));
    Ok(())
}

fn decode(ctx: &Ctx, a: &DecodeArgs) -> Result<()> {
    let beam = BeamConfig {
        width: a.beam,
        max_len: a.max_len,
        length_norm: a.length_norm,
    };
    ctx.prepare(&a.out_dir, serde_json::to_value(beam)?)?;
    let mut members = Vec::new();
    let mut meta: Option<ModelMeta> = None;
    for path in std::iter::once(&a.checkpoint).chain(&a.ensemble) {
        let (mut m, mm, step) = load_model::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
        m.set_exec(ExecMode::Sequential);
        info!("loaded {} (step {step})", path.display());
        if let Some(first) = &meta {
            if first.tokenizer != mm.tokenizer || first.task != mm.task {
                return Err(Failure::Data(format!(
                    "{}: tokenizer or task differs from {}",
                    path.display(),
                    a.checkpoint.display()
                ))
                .into());
            }
        } else {
            meta = Some(mm);
        }
        members.push(m);
    }
    let meta = meta.expect("at least one checkpoint");
    if a.ablate_article && members.iter().any(|m| matches!(m, AnyModel::Basic(_))) {
        return Err(Failure::Usage("--ablate-article needs dual-source checkpoints".into()).into());
    }
    let truecaser = match (a.truecase, &meta.truecaser) {
        (false, _) => None,
        (true, Some(tc)) => Some(tc),
        (true, None) => return Err(Failure::Usage("--truecase: checkpoint has no truecaser".into()).into()),
    };

    let records = load_jsonl::<MultiPropertyRecord>(&a.records)?;
    let (examples, _) = build_examples(
        &records,
        &meta.tokenizer,
        meta.task,
        meta.model.layout(),
        meta.model.max_positions(),
    );
    let ablate = a.ablate_article;
    let make = |ex: &Example| -> recycled_core::Result<Box<dyn Scorer + '_>> {
        if members.len() == 1 {
            return member_scorer(&members[0], ex, ablate);
        }
        let scorers = members
            .iter()
            .map(|m| member_scorer(m, ex, ablate))
            .collect::<recycled_core::Result<Vec<_>>>()?;
        Ok(Box::new(EnsembleScorer::new(scorers)?))
    };
    let post = |s: &str| truecaser.map_or_else(|| s.to_string(), |tc| tc.apply(s));
    let mut decoded = decode_examples(ctx.exec, &examples, make, &meta.tokenizer, meta.task, &beam, post)?;
    restrict_to_queried(&mut decoded, &examples);
    write_jsonl(&a.out_dir.join("predictions.jsonl"), &decoded)?;
    let unfinished = decoded
        .iter()
        .filter(|d| d.flags.iter().any(|f| f == "unfinished"))
        .count();
    println!(
        "{}",
        json!({ "articles": decoded.len(), "members": members.len(), "unfinished": unfinished })
    );
    Ok(())
}

fn member_scorer<'m>(m: &'m AnyModel<f32>, ex: &Example, ablate: bool) -> recycled_core::Result<Box<dyn Scorer + 'm>> {
    if ablate {
        m.ablated_scorer(ex)
    } else {
        m.scorer(ex)
    }
}

fn evaluate_cmd(ctx: &Ctx, a: &EvaluateArgs) -> Result<()> {
    ctx.prepare(&a.out_dir, Value::Null)?;
    let preds: Vec<Prediction> = load_jsonl(&a.predictions)?;
    let golds: Vec<GoldRecord> = load_jsonl::<MultiPropertyRecord>(&a.gold)?
        .iter()
        .map(GoldRecord::from)
        .collect();
    let tags: Option<Vec<EmInTag>> = a.tags.as_deref().map(load_jsonl).transpose()?;
    let report = evaluate(ctx.exec, &preds, &golds, tags.as_deref())?;
    write_json(&a.out_dir.join("metrics.json"), &report)?;
    print!("{}", report.to_table());
    Ok(())
}

fn grad_check(ctx: &Ctx, a: &GradCheckArgs) -> Result<()> {
    let cfg = GradSuiteConfig {
        op_seeds: a.op_seeds,
        model_seeds: a.model_seeds,
        tol: a.tol,
        base_seed: ctx.cli.seed,
        ..GradSuiteConfig::default()
    };
    ctx.prepare(&a.out_dir, json!({ "model_entries": cfg.model_entries }))?;
    let report = gradsuite::run(&cfg)?;
    write_json(&a.out_dir.join("grad_report.json"), &report)?;
    for e in &report.entries {
        println!(
            "{} {:<32} max rel err {:.2e} (seed {})",
            if e.passed { "ok  " } else { "FAIL" },
            e.check,
            e.max_rel_err,
            e.worst_seed
        );
    }
    if !report.passed() {
        let bad: Vec<&str> = report
            .entries
            .iter()
            .filter(|e| !e.passed)
            .map(|e| e.check.as_str())
            .collect();
        return Err(Failure::Numeric(format!("gradient check failed: {}", bad.join(", "))).into());
    }
    Ok(())
}
