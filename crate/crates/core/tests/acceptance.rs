//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recycled_core::decoding::{beam_search, greedy, BeamConfig, EnsembleScorer, Scorer};
use recycled_core::exec::ExecMode;
use recycled_core::gradsuite::{self, GradSuiteConfig};
use recycled_core::metrics::{evaluate, GoldRecord, Prediction};
use recycled_core::model::{
    build_examples, decode_examples, fit, fit_with_checkpoints, load_model, parse_target, save_model, serialize_target,
    AnyModel, DualSourceConfig, Example, FitConfig, ModelMeta, ModelSpec, PropertyMap, Seq2Seq, Seq2SeqConfig,
    TaskMode, Trainer, TrainerConfig,
};
use recycled_core::recycler::{
    audit_splits, draft_splits, partition_labels, write_jsonl, Block, BlockSizes, LabelPartition, LabelSet,
    MultiPropertyRecord, PAPER_PROPORTIONS,
};
use recycled_core::synth;
use recycled_core::tokenize::SubwordModel;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

// 1 ------------------------------------------------------------------------

fn gradients() -> Outcome {
    let report = gradsuite::run(&GradSuiteConfig::default()).map_err(|e| e.to_string())?;
    let failing: Vec<String> = report
        .entries
        .iter()
        .filter(|e| !e.passed)
        .map(|e| format!("{} (seed {}, {:.2e})", e.check, e.worst_seed, e.max_rel_err))
        .collect();
    let summary = format!(
        "{} checks x 100 seeds, max rel err {:.2e}, {:.1}s",
        report.entries.len(),
        report.max_rel_err(),
        report.elapsed_secs
    );
    if !failing.is_empty() {
        return Err(format!("{summary}; failing: {}", failing.join(", ")));
    }
    check(
        report.elapsed_secs < 120.0,
        summary.clone(),
        format!("{summary}; over the 120s budget"),
    )
}

// 2, 3 ---------------------------------------------------------------------

fn oracle_norm(s: &str) -> String {
    let lower = s.to_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    words
        .join(" ")
        .trim_matches(|c: char| !c.is_alphanumeric() && !c.is_whitespace())
        .trim()
        .to_string()
}

/// F1(out, expected) over normalised value sets.
fn oracle_f1(out: &[String], expected: &[String]) -> f64 {
    let o: BTreeSet<String> = out.iter().map(|v| oracle_norm(v)).filter(|v| !v.is_empty()).collect();
    let e: BTreeSet<String> = expected
        .iter()
        .map(|v| oracle_norm(v))
        .filter(|v| !v.is_empty())
        .collect();
    if o.is_empty() && e.is_empty() {
        return 1.0;
    }
    if o.is_empty() || e.is_empty() {
        return 0.0;
    }
    let inter = o.intersection(&e).count() as f64;
    let p = inter / o.len() as f64;
    let r = inter / e.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn out_values<'a>(preds: &'a [Prediction], id: &str, key: &str) -> &'a [String] {
    preds
        .iter()
        .find(|p| p.id == id)
        .and_then(|p| p.properties.get(key))
        .map_or(&[], Vec::as_slice)
}

/// Mean F1 = (1/|keys|) Σ_k F1(out(k), expected(k)) over every (article, key).
fn oracle_mean_f1(preds: &[Prediction], golds: &[GoldRecord]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for g in golds {
        for (k, exp) in &g.properties {
            total += oracle_f1(out_values(preds, &g.id, k), exp);
            n += 1;
        }
    }
    total / n as f64
}

/// Mean Multilabel F1 = (1/|A|) Σ_a (1/|keys(a)|) Σ_k F1(out(a,k), expected(a,k)).
fn oracle_mm_f1(preds: &[Prediction], golds: &[GoldRecord]) -> f64 {
    let mut total = 0.0;
    for g in golds {
        let mut inner = 0.0;
        for (k, exp) in &g.properties {
            inner += oracle_f1(out_values(preds, &g.id, k), exp);
        }
        total += inner / g.properties.len() as f64;
    }
    total / golds.len() as f64
}

/// Multilabel F1(key) = mean of F1 over the articles that have `key`.
fn oracle_label_f1(preds: &[Prediction], golds: &[GoldRecord], key: &str) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for g in golds {
        if let Some(exp) = g.properties.get(key) {
            total += oracle_f1(out_values(preds, &g.id, key), exp);
            n += 1;
        }
    }
    total / n as f64
}

const KEYS: [&str; 3] = ["p", "q", "r"];
const GOLD_POOL: [&str; 5] = ["a", "b", "New York", "c d", "e"];
const PRED_POOL: [&str; 9] = ["a", "A", "b.", "new  york", "c d", "x", "e", "(a)", "zz"];

fn micro_corpus(rng: &mut ChaCha8Rng, max_keys: usize) -> (Vec<Prediction>, Vec<GoldRecord>) {
    let n = rng.random_range(1..=5);
    let mut golds = Vec::new();
    let mut preds = Vec::new();
    for a in 0..n {
        let id = format!("A{a}");
        let nk = rng.random_range(1..=max_keys);
        let keys: Vec<&str> = KEYS.choose_multiple(rng, nk).copied().collect();
        let mut gp = BTreeMap::new();
        let mut pp = BTreeMap::new();
        for k in keys {
            let nv = rng.random_range(1..=3);
            gp.insert(
                k.to_string(),
                GOLD_POOL.choose_multiple(rng, nv).map(|s| s.to_string()).collect(),
            );
            if rng.random_bool(0.8) {
                let pv = rng.random_range(0..=3);
                pp.insert(
                    k.to_string(),
                    PRED_POOL.choose_multiple(rng, pv).map(|s| s.to_string()).collect(),
                );
            }
        }
        golds.push(GoldRecord {
            id: id.clone(),
            properties: gp,
        });
        if rng.random_bool(0.9) {
            preds.push(Prediction { id, properties: pp });
        }
    }
    (preds, golds)
}

fn shuffle_corpus(rng: &mut ChaCha8Rng, preds: &mut [Prediction], golds: &mut [GoldRecord]) {
    preds.shuffle(rng);
    golds.shuffle(rng);
    for p in preds.iter_mut() {
        p.properties.values_mut().for_each(|v| v.shuffle(rng));
    }
    for g in golds.iter_mut() {
        g.properties.values_mut().for_each(|v| v.shuffle(rng));
    }
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut worst_perm: f64 = 0.0;
    for c in 0..1000 {
        let (preds, golds) = micro_corpus(&mut rng, 3);
        for mode in [ExecMode::Sequential, ExecMode::Parallel] {
            let r = evaluate(mode, &preds, &golds, None).map_err(|e| format!("corpus {c}: {e}"))?;
            worst = worst
                .max((r.mean_f1 - oracle_mean_f1(&preds, &golds)).abs())
                .max((r.mean_multilabel_f1 - oracle_mm_f1(&preds, &golds)).abs());
            for (k, v) in &r.per_label {
                worst = worst.max((v - oracle_label_f1(&preds, &golds, k)).abs());
            }
        }
        let base = evaluate(ExecMode::Sequential, &preds, &golds, None).map_err(|e| e.to_string())?;
        for _ in 0..50 {
            let (mut p, mut g) = (preds.clone(), golds.clone());
            shuffle_corpus(&mut rng, &mut p, &mut g);
            let r = evaluate(ExecMode::Sequential, &p, &g, None).map_err(|e| e.to_string())?;
            worst_perm = worst_perm
                .max((r.mean_f1 - base.mean_f1).abs())
                .max((r.mean_multilabel_f1 - base.mean_multilabel_f1).abs());
            for (k, v) in &r.per_label {
                worst_perm = worst_perm.max((v - base.per_label[k]).abs());
            }
        }
    }
    let msg = format!("1000 corpora, max oracle gap {worst:.1e}, max permutation gap {worst_perm:.1e} (50 each)");
    check(worst <= 1e-12 && worst_perm <= 1e-12, msg.clone(), msg)
}

fn degenerate_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for c in 0..1000 {
        let (preds, golds) = micro_corpus(&mut rng, 1);
        let r = evaluate(ExecMode::Sequential, &preds, &golds, None).map_err(|e| e.to_string())?;
        if r.mean_multilabel_f1 != r.mean_f1 {
            return Err(format!(
                "corpus {c}: MM-F1 {} != Mean-F1 {}",
                r.mean_multilabel_f1, r.mean_f1
            ));
        }
    }
    Ok("MM-F1 == Mean-F1 bit-for-bit on 1000 one-key-per-article corpora".into())
}

// 4, 5 ---------------------------------------------------------------------

fn universe(records: &[MultiPropertyRecord]) -> BTreeSet<String> {
    records.iter().flat_map(|r| r.properties.keys().cloned()).collect()
}

/// Block and split constraints, checked record by record.
fn constraint_violations(
    train: &[MultiPropertyRecord],
    validation: &[MultiPropertyRecord],
    test: &[MultiPropertyRecord],
    blocks: &BTreeMap<String, Block>,
    p: &LabelPartition,
) -> Vec<String> {
    let mut bad = Vec::new();
    let sets = |r: &MultiPropertyRecord| -> Vec<LabelSet> { r.properties.keys().filter_map(|k| p.set_of(k)).collect() };
    let has = |s: &[LabelSet], l: LabelSet| s.contains(&l);
    for (split, records, allowed) in [
        ("train", train, ["G"].as_slice()),
        ("validation", validation, &["B", "D", "F"]),
        ("test", test, &["A", "C", "E"]),
    ] {
        for r in records {
            let s = sets(r);
            if s.len() != r.properties.len() {
                bad.push(format!("{} has a property outside the partition", r.id));
            }
            if r.properties.is_empty() {
                bad.push(format!("{} is empty", r.id));
            }
            let Some(block) = blocks.get(&r.id) else {
                bad.push(format!("{} has no block", r.id));
                continue;
            };
            if !allowed.contains(&format!("{block:?}").as_str()) {
                bad.push(format!("{} in {split} but block {block:?}", r.id));
            }
            let only4 = s.iter().all(|&l| l == LabelSet::Free);
            let ok = match block {
                Block::A => has(&s, LabelSet::TestOnly) && !has(&s, LabelSet::ValidationOnly),
                Block::B => has(&s, LabelSet::ValidationOnly) && !has(&s, LabelSet::TestOnly),
                Block::C | Block::D => {
                    has(&s, LabelSet::Shared) && !has(&s, LabelSet::TestOnly) && !has(&s, LabelSet::ValidationOnly)
                }
                Block::E | Block::F | Block::G => only4,
            };
            if !ok {
                bad.push(format!("{} violates block {block:?}", r.id));
            }
            if split == "validation" && has(&s, LabelSet::TestOnly) {
                bad.push(format!("{} leaks a test-only label into validation", r.id));
            }
            if split == "test" && has(&s, LabelSet::ValidationOnly) {
                bad.push(format!("{} leaks a validation-only label into test", r.id));
            }
        }
    }
    bad
}

fn split_bytes(dir: &Path, tag: &str, plan: &recycled_core::recycler::SplitPlan) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    for (name, rs) in [
        ("train", &plan.train),
        ("validation", &plan.validation),
        ("test", &plan.test),
    ] {
        let path = dir.join(format!("{tag}-{name}.jsonl"));
        write_jsonl(&path, rs).map_err(|e| e.to_string())?;
        out.extend(std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    out.extend(serde_json::to_vec(&plan.audit).map_err(|e| e.to_string())?);
    out.extend(serde_json::to_vec(&plan.blocks).map_err(|e| e.to_string())?);
    Ok(out)
}

fn split_audit() -> Outcome {
    let records = synth::split_corpus(5000, 40, 11);
    let props = universe(&records);
    if props.len() != 40 {
        return Err(format!("corpus has {} properties", props.len()));
    }
    let p = partition_labels(&props, PAPER_PROPORTIONS, 5).map_err(|e| e.to_string())?;
    let sizes = BlockSizes::PAPER.scaled(0.1);
    let plan = draft_splits(&records, &p, sizes, 5).map_err(|e| e.to_string())?;
    let ids = |rs: &[MultiPropertyRecord]| rs.iter().map(|r| r.id.clone()).collect::<BTreeSet<_>>();
    let (tr, va, te) = (ids(&plan.train), ids(&plan.validation), ids(&plan.test));
    let overlap = tr.intersection(&va).count() + tr.intersection(&te).count() + va.intersection(&te).count();
    let bad = constraint_violations(&plan.train, &plan.validation, &plan.test, &plan.blocks, &p);
    let audit = audit_splits(&plan.train, &plan.validation, &plan.test, &p, Some(&plan.blocks));

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = split_bytes(dir.path(), "a", &plan)?;
    let again = draft_splits(&records, &p, sizes, 5).map_err(|e| e.to_string())?;
    let second = split_bytes(dir.path(), "b", &again)?;

    let msg = format!(
        "train {} / validation {} / test {}, overlap {overlap}, {} constraint violations, audit leakage-free {}, rerun identical: {}",
        plan.train.len(),
        plan.validation.len(),
        plan.test.len(),
        bad.len(),
        audit.leakage_free(),
        first == second
    );
    check(
        overlap == 0
            && bad.is_empty()
            && audit.leakage_free()
            && first == second
            && plan.test.len() == sizes.test_total(),
        msg.clone(),
        format!("{msg}; first violations: {:?}", &bad[..bad.len().min(3)]),
    )
}

fn partition_sizing() -> Outcome {
    let props: BTreeSet<String> = (0..703).map(|i| format!("P{i}")).collect();
    let p = partition_labels(&props, PAPER_PROPORTIONS, 0).map_err(|e| e.to_string())?;
    let sizes = p.sizes();
    let full = BlockSizes::PAPER;
    // draft the full-size blocks for real on a large synthetic corpus
    let records = synth::split_corpus(50_000, 40, 11);
    let part = partition_labels(&universe(&records), PAPER_PROPORTIONS, 3).map_err(|e| e.to_string())?;
    let plan = draft_splits(&records, &part, full, 3).map_err(|e| e.to_string())?;
    let msg = format!(
        "703 -> {sizes:?}; preset sums test {} / validation {}; drafted on 50k articles: test {} / validation {}",
        full.test_total(),
        full.validation_total(),
        plan.test.len(),
        plan.validation.len()
    );
    check(
        sizes == [141, 141, 70, 351]
            && full.test_total() == 5000
            && full.validation_total() == 5000
            && plan.test.len() == 5000
            && plan.validation.len() == 5000,
        msg.clone(),
        msg,
    )
}

// 6, 8 ---------------------------------------------------------------------

struct Fixture {
    records: Vec<MultiPropertyRecord>,
    golds: Vec<GoldRecord>,
    tok: SubwordModel,
}

fn fixture() -> Fixture {
    let records = synth::extraction_fixture(50, 7);
    let tok = SubwordModel::train(synth::tokenizer_corpus(&records), 800).expect("tokenizer trains");
    let golds = records.iter().map(GoldRecord::from).collect();
    Fixture { records, golds, tok }
}

fn beam() -> BeamConfig {
    BeamConfig::default()
}

fn mm_f1<'m, F>(fx: &Fixture, examples: &[Example], task: TaskMode, make: F) -> Result<f64, String>
where
    F: Fn(&Example) -> recycled_core::Result<Box<dyn Scorer + 'm>> + Sync,
{
    let decoded = decode_examples(ExecMode::Sequential, examples, make, &fx.tok, task, &beam(), |s| {
        s.to_string()
    })
    .map_err(|e| e.to_string())?;
    let preds: Vec<Prediction> = decoded
        .into_iter()
        .map(|d| Prediction {
            id: d.id,
            properties: d.properties,
        })
        .collect();
    let r = evaluate(ExecMode::Sequential, &preds, &fx.golds, None).map_err(|e| e.to_string())?;
    Ok(r.mean_multilabel_f1)
}

struct DualRun {
    examples: Vec<Example>,
    checkpoints: Vec<std::path::PathBuf>,
    train_secs: f64,
    _dir: tempfile::TempDir,
}

/// Trains the desk dual model on the fixture for 2,000 steps, saving
/// checkpoints at steps 1400, 1600, 1800 and 2000.
fn train_dual(fx: &Fixture) -> Result<DualRun, String> {
    let spec = ModelSpec::Dual(DualSourceConfig {
        vocab: fx.tok.vocab_size(),
        ..DualSourceConfig::desk()
    });
    let (examples, _) = build_examples(
        &fx.records,
        &fx.tok,
        TaskMode::Multi,
        spec.layout(),
        spec.max_positions(),
    );
    let meta = ModelMeta {
        model: spec.clone(),
        task: TaskMode::Multi,
        tokenizer: fx.tok.clone(),
        truecaser: None,
        tool_version: env!("CARGO_PKG_VERSION").into(),
    };
    let mut model = AnyModel::<f32>::new(&spec, 1).map_err(|e| e.to_string())?;
    model.set_exec(ExecMode::Sequential);
    let mut trainer = Trainer::new(TrainerConfig::desk(), model.store());
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut checkpoints = Vec::new();
    let cfg = FitConfig {
        max_steps: 2000,
        checkpoint_every: 200,
        ..FitConfig::default()
    };
    let start = Instant::now();
    fit_with_checkpoints(
        &mut model,
        &mut trainer,
        &examples,
        &[],
        &cfg,
        |_| {},
        |step, m| {
            if step >= 1400 {
                let path = dir.path().join(format!("dual-{step}.ckpt"));
                save_model(&path, m, &meta, step)?;
                checkpoints.push(path);
            }
            Ok(())
        },
    )
    .map_err(|e| e.to_string())?;
    let train_secs = start.elapsed().as_secs_f64();
    Ok(DualRun {
        examples,
        checkpoints,
        train_secs,
        _dir: dir,
    })
}

fn load(path: &Path) -> Result<AnyModel<f32>, String> {
    let (mut m, _, _) = load_model::<f32>(path).map_err(|e| e.to_string())?;
    m.set_exec(ExecMode::Sequential);
    Ok(m)
}

fn overfit(fx: &Fixture, run: &DualRun) -> Outcome {
    let dual = load(run.checkpoints.last().expect("four checkpoints"))?;
    let dual_f1 = mm_f1(fx, &run.examples, TaskMode::Multi, |e| dual.scorer(e))?;

    let spec = ModelSpec::Basic(Seq2SeqConfig {
        vocab: fx.tok.vocab_size(),
        ..Seq2SeqConfig::desk()
    });
    let (basic_ex, _) = build_examples(
        &fx.records,
        &fx.tok,
        TaskMode::Single,
        spec.layout(),
        spec.max_positions(),
    );
    let mut basic = AnyModel::<f32>::new(&spec, 1).map_err(|e| e.to_string())?;
    basic.set_exec(ExecMode::Sequential);
    let mut trainer = Trainer::new(TrainerConfig::desk(), basic.store());
    let t = Instant::now();
    let cfg = FitConfig {
        max_steps: 2000,
        ..FitConfig::default()
    };
    fit(&mut basic, &mut trainer, &basic_ex, &[], &cfg, |_| {}).map_err(|e| e.to_string())?;
    let basic_secs = t.elapsed().as_secs_f64();
    let basic_f1 = mm_f1(fx, &basic_ex, TaskMode::Single, |e| basic.scorer(e))?;

    let msg = format!(
        "dual MM-F1 {dual_f1:.4} after 2000 steps in {:.0}s (one core); basic MM-F1 {basic_f1:.4} ({basic_secs:.0}s)",
        run.train_secs
    );
    check(
        dual_f1 >= 0.95 && run.train_secs < 600.0 && basic_f1 >= 0.90,
        msg.clone(),
        msg,
    )
}

fn ensemble(fx: &Fixture, run: &DualRun) -> Outcome {
    let last = run.checkpoints.last().expect("four checkpoints");
    let single = load(last)?;
    let copies: Vec<AnyModel<f32>> = (0..3).map(|_| load(last)).collect::<Result<_, _>>()?;
    let mut mismatches = 0;
    for ex in &run.examples {
        let a = beam_search(&*single.scorer(ex).map_err(|e| e.to_string())?, &beam()).map_err(|e| e.to_string())?;
        let members = copies
            .iter()
            .map(|m| m.scorer(ex))
            .collect::<recycled_core::Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        let ens = EnsembleScorer::new(members).map_err(|e| e.to_string())?;
        let b = beam_search(&ens, &beam()).map_err(|e| e.to_string())?;
        if a.best.tokens != b.best.tokens {
            mismatches += 1;
        }
    }
    let four: Vec<AnyModel<f32>> = run.checkpoints.iter().map(|p| load(p)).collect::<Result<_, _>>()?;
    let single_f1 = mm_f1(fx, &run.examples, TaskMode::Multi, |e| single.scorer(e))?;
    let ens_f1 = mm_f1(fx, &run.examples, TaskMode::Multi, |e| {
        let members = four
            .iter()
            .map(|m| m.scorer(e))
            .collect::<recycled_core::Result<Vec<_>>>()?;
        Ok(Box::new(EnsembleScorer::new(members)?) as Box<dyn Scorer>)
    })?;
    let msg = format!(
        "3 copies differ on {mismatches}/{} examples; 4-checkpoint MM-F1 {ens_f1:.4} vs single {single_f1:.4}",
        run.examples.len()
    );
    check(mismatches == 0 && ens_f1 >= single_f1 - 0.01, msg.clone(), msg)
}

// 7 ------------------------------------------------------------------------

/// Random next-token distributions keyed on (seed, prefix).
struct RandomScorer {
    vocab: usize,
    seed: u64,
}

impl Scorer for RandomScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn eos(&self) -> u32 {
        0
    }
    fn log_probs(&self, prefixes: &[&[u32]]) -> recycled_core::Result<Vec<Vec<f64>>> {
        Ok(prefixes
            .iter()
            .map(|p| {
                let mut h = self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
                for &t in *p {
                    h = (h ^ (t as u64 + 1)).wrapping_mul(0x100_0000_01b3);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(h);
                let logits: Vec<f64> = (0..self.vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
                logits.iter().map(|x| x - lse).collect()
            })
            .collect())
    }
}

/// Every EOS-terminated sequence of length ≤ `max_len`, best normalised
/// score first, ties toward the smaller token sequence.
fn enumerate(s: &RandomScorer, max_len: usize, alpha: f64) -> Vec<(f64, Vec<u32>)> {
    let mut out = Vec::new();
    let mut frontier: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for (prefix, lp) in &frontier {
            let dist = s.log_probs(&[prefix]).unwrap().remove(0);
            for (t, l) in dist.iter().enumerate() {
                let mut seq = prefix.clone();
                seq.push(t as u32);
                let total = lp + l;
                if t == 0 {
                    out.push((total / (seq.len() as f64).powf(alpha), seq));
                } else {
                    next.push((seq, total));
                }
            }
        }
        frontier = next;
    }
    out.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    out
}

fn beam_oracle() -> Outcome {
    let alpha = BeamConfig::default().length_norm;
    for seed in 0..100 {
        let s = RandomScorer { vocab: 3, seed };
        let truth = enumerate(&s, 3, alpha);
        for width in [27, 40] {
            let cfg = BeamConfig {
                width,
                max_len: 3,
                length_norm: alpha,
            };
            let out = beam_search(&s, &cfg).map_err(|e| e.to_string())?;
            let got: Vec<(f64, Vec<u32>)> = out
                .nbest
                .iter()
                .map(|h| (h.normalized(alpha), h.tokens.clone()))
                .collect();
            if got.len() != truth.len()
                || got
                    .iter()
                    .zip(&truth)
                    .any(|(a, b)| a.1 != b.1 || (a.0 - b.0).abs() > 1e-12)
            {
                return Err(format!(
                    "seed {seed}, width {width}: beam {got:?} vs exhaustive {truth:?}"
                ));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..100 {
        let s = RandomScorer {
            vocab: rng.random_range(2..=8),
            seed: 1000 + seed,
        };
        let max_len = rng.random_range(1..=8);
        let cfg = BeamConfig {
            width: 1,
            max_len,
            length_norm: alpha,
        };
        let b = beam_search(&s, &cfg).map_err(|e| e.to_string())?.best;
        let g = greedy(&s, max_len).map_err(|e| e.to_string())?;
        if b.tokens != g.tokens || (b.log_prob - g.log_prob).abs() > 1e-12 {
            return Err(format!("scorer {seed}: beam-1 {:?} vs greedy {:?}", b.tokens, g.tokens));
        }
    }
    Ok("widths 27 and 40 match exhaustive enumeration on 100 vocab-3 scorers; beam-1 == greedy on 100 scorers".into())
}

// 9 ------------------------------------------------------------------------

fn ablated_score(correlated: bool) -> Result<f64, String> {
    let records = synth::leakage_corpus(120, correlated, 21);
    let (train, held_out) = records.split_at(80);
    let tok = SubwordModel::train(synth::tokenizer_corpus(&records), 800).map_err(|e| e.to_string())?;
    let cfg = DualSourceConfig {
        vocab: tok.vocab_size(),
        ..DualSourceConfig::desk()
    };
    let spec = ModelSpec::Dual(cfg.clone());
    let (tr, _) = build_examples(train, &tok, TaskMode::Multi, spec.layout(), cfg.max_positions);
    let (te, _) = build_examples(held_out, &tok, TaskMode::Multi, spec.layout(), cfg.max_positions);
    let mut model = AnyModel::<f32>::new(&spec, 1).map_err(|e| e.to_string())?;
    model.set_exec(ExecMode::Sequential);
    if let AnyModel::Dual(m) = &mut model {
        m.ablate_article = true;
    }
    let mut trainer = Trainer::new(TrainerConfig::desk(), model.store());
    let fc = FitConfig {
        max_steps: 600,
        ..FitConfig::default()
    };
    fit(&mut model, &mut trainer, &tr, &[], &fc, |_| {}).map_err(|e| e.to_string())?;
    let fx = Fixture {
        records: held_out.to_vec(),
        golds: held_out.iter().map(GoldRecord::from).collect(),
        tok,
    };
    mm_f1(&fx, &te, TaskMode::Multi, |e| model.ablated_scorer(e))
}

fn ablation() -> Outcome {
    let correlated = ablated_score(true)?;
    let control = ablated_score(false)?;
    let msg = format!("ablated MM-F1 on held-out articles: correlated {correlated:.4}, control {control:.4}");
    check(correlated > control, msg.clone(), msg)
}

// 10 -----------------------------------------------------------------------

const WORDS: [&str; 12] = [
    "alpha", "Beta", "=", "|", "<sep>", "\\x", "\\", "é", "42", "new", "york", "<pad>",
];

fn random_map(rng: &mut ChaCha8Rng) -> PropertyMap {
    let phrase = |rng: &mut ChaCha8Rng| {
        let n = rng.random_range(1..=3);
        (0..n)
            .map(|_| *WORDS.choose(rng).unwrap())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut m = PropertyMap::new();
    for _ in 0..rng.random_range(0..=4) {
        let key = phrase(rng);
        let values: BTreeSet<String> = (0..rng.random_range(0..=3)).map(|_| phrase(rng)).collect();
        m.insert(key, values.into_iter().collect());
    }
    m
}

fn round_trips() -> Outcome {
    let fx = fixture();
    let mut lines = synth::tokenizer_corpus(&fx.records);
    lines.extend(synth::tokenizer_corpus(&synth::leakage_corpus(40, true, 1)));
    let tok = SubwordModel::train(&lines, 800).map_err(|e| e.to_string())?;
    let tok_fail = lines.iter().filter(|l| tok.decode(&tok.encode(l, true)) != **l).count();

    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    let mut target_fail = 0;
    let mut example = None;
    for _ in 0..10_000 {
        let m = random_map(&mut rng);
        let s = serialize_target(&m);
        let back = parse_target(&s);
        if back.properties != m || back.malformed != 0 {
            target_fail += 1;
            example.get_or_insert((m, s));
        }
    }
    let msg = format!(
        "tokenizer: {tok_fail}/{} lines differ; targets: {target_fail}/10000 maps differ",
        lines.len()
    );
    check(
        tok_fail == 0 && target_fail == 0,
        msg.clone(),
        format!("{msg}; first: {example:?}"),
    )
}

fn main() {
    let start = Instant::now();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| match outcome {
        Ok(msg) => println!("PASS {n:>2} {name}: {msg}"),
        Err(msg) => {
            failed += 1;
            println!("FAIL {n:>2} {name}: {msg}");
        }
    };
    report(1, "gradient suite", gradients());
    report(2, "metric oracle", metric_oracle());
    report(3, "degenerate equivalence", degenerate_equivalence());
    report(4, "split audit", split_audit());
    report(5, "partition sizing", partition_sizing());
    let fx = fixture();
    let run = train_dual(&fx);
    match &run {
        Ok(run) => {
            report(6, "overfit", overfit(&fx, run));
            report(7, "beam oracle", beam_oracle());
            report(8, "ensemble", ensemble(&fx, run));
        }
        Err(e) => {
            report(6, "overfit", Err(format!("training failed: {e}")));
            report(7, "beam oracle", beam_oracle());
            report(8, "ensemble", Err(format!("training failed: {e}")));
        }
    }
    report(9, "ablation direction", ablation());
    report(10, "round trips", round_trips());
    println!(
        "acceptance: {} of 10 passed in {:.0}s",
        10 - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
