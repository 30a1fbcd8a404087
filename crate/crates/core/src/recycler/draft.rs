use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LabelPartition, LabelSet, MultiPropertyRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Block {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
}

impl Block {
    pub const DRAFTED: [Block; 6] = [Block::A, Block::B, Block::C, Block::D, Block::E, Block::F];

    pub fn split(self) -> &'static str {
        match self {
            Block::A | Block::C | Block::E => "test",
            Block::B | Block::D | Block::F => "validation",
            Block::G => "train",
        }
    }
}

/// Article counts for the drafted blocks; G takes the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSizes {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub d: usize,
    pub e: usize,
    pub f: usize,
}

impl BlockSizes {
    pub const PAPER: BlockSizes = BlockSizes {
        a: 1000,
        b: 1000,
        c: 2000,
        d: 2000,
        e: 2000,
        f: 2000,
    };

    pub fn scaled(self, factor: f64) -> Self {
        let s = |n: usize| (n as f64 * factor).round() as usize;
        BlockSizes {
            a: s(self.a),
            b: s(self.b),
            c: s(self.c),
            d: s(self.d),
            e: s(self.e),
            f: s(self.f),
        }
    }

    pub fn get(&self, b: Block) -> usize {
        match b {
            Block::A => self.a,
            Block::B => self.b,
            Block::C => self.c,
            Block::D => self.d,
            Block::E => self.e,
            Block::F => self.f,
            Block::G => 0,
        }
    }

    pub fn test_total(&self) -> usize {
        self.a + self.c + self.e
    }

    pub fn validation_total(&self) -> usize {
        self.b + self.d + self.f
    }
}

impl Default for BlockSizes {
    fn default() -> Self {
        Self::PAPER
    }
}

/// Exhaustive leakage and accounting audit of a three-way split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub train_articles: usize,
    pub validation_articles: usize,
    pub test_articles: usize,
    pub overlap_train_test: usize,
    pub overlap_train_validation: usize,
    pub overlap_test_validation: usize,
    /// Property slots violating the label-set containment rules.
    pub set1_in_train: usize,
    pub set1_in_validation: usize,
    pub set2_in_train: usize,
    pub set2_in_test: usize,
    pub set3_in_train: usize,
    pub unknown_properties: usize,
    /// Articles breaking their block's must-have / not-allowed constraints.
    pub block_violations: usize,
    pub block_counts: BTreeMap<Block, usize>,
    pub values_in: usize,
    pub values_out: usize,
    pub values_stripped: usize,
    pub articles_dropped: usize,
    /// Fraction of test property slots whose property never occurs in train.
    pub test_slots_unseen_in_train: f64,
    pub validation_slots_unseen_in_train: f64,
}

impl AuditReport {
    pub fn leakage_free(&self) -> bool {
        self.overlap_train_test == 0
            && self.overlap_train_validation == 0
            && self.overlap_test_validation == 0
            && self.set1_in_train == 0
            && self.set1_in_validation == 0
            && self.set2_in_train == 0
            && self.set2_in_test == 0
            && self.set3_in_train == 0
            && self.unknown_properties == 0
            && self.block_violations == 0
    }

    /// Values in = values out + values stripped (only checkable right after drafting).
    pub fn balanced(&self) -> bool {
        self.values_in == self.values_out + self.values_stripped
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        let checks = [
            ("overlap_train_test", self.overlap_train_test),
            ("overlap_train_validation", self.overlap_train_validation),
            ("overlap_test_validation", self.overlap_test_validation),
            ("set1_in_train", self.set1_in_train),
            ("set1_in_validation", self.set1_in_validation),
            ("set2_in_train", self.set2_in_train),
            ("set2_in_test", self.set2_in_test),
            ("set3_in_train", self.set3_in_train),
            ("unknown_properties", self.unknown_properties),
            ("block_violations", self.block_violations),
        ];
        for (name, n) in checks {
            if n > 0 {
                out.push(format!("{name}={n}"));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SplitPlan {
    pub train: Vec<MultiPropertyRecord>,
    pub validation: Vec<MultiPropertyRecord>,
    pub test: Vec<MultiPropertyRecord>,
    pub blocks: BTreeMap<String, Block>,
    pub audit: AuditReport,
}

struct Counts {
    set1: usize,
    set2: usize,
    set3: usize,
    set4: usize,
}

fn counts(r: &MultiPropertyRecord, p: &LabelPartition) -> Counts {
    let mut c = Counts {
        set1: 0,
        set2: 0,
        set3: 0,
        set4: 0,
    };
    for k in r.properties.keys() {
        match p.set_of(k) {
            Some(LabelSet::TestOnly) => c.set1 += 1,
            Some(LabelSet::ValidationOnly) => c.set2 += 1,
            Some(LabelSet::Shared) => c.set3 += 1,
            Some(LabelSet::Free) => c.set4 += 1,
            None => {}
        }
    }
    c
}

/// Removes properties whose label set is rejected by `keep`; returns the
/// number of values removed.
fn strip(r: &mut MultiPropertyRecord, p: &LabelPartition, keep: impl Fn(LabelSet) -> bool) -> usize {
    let mut removed = 0;
    r.properties.retain(|k, vals| {
        let ok = p.set_of(k).is_some_and(&keep);
        if !ok {
            removed += vals.len();
        }
        ok
    });
    removed
}

fn block_ok(block: Block, r: &MultiPropertyRecord, p: &LabelPartition) -> bool {
    let c = counts(r, p);
    match block {
        Block::A => c.set1 >= 1 && c.set2 == 0,
        Block::B => c.set2 >= 1 && c.set1 == 0,
        Block::C | Block::D => c.set3 >= 1 && c.set1 == 0 && c.set2 == 0,
        Block::E | Block::F | Block::G => c.set4 >= 1 && c.set1 + c.set2 + c.set3 == 0,
    }
}

/// Drafts blocks A→F from the pool in order, then builds the training block
/// G from whatever is left.
///
/// * A (test): ≥1 set-1 property, set-2 properties stripped. Articles with
///   the most set-1 properties are drafted first, ties by id.
/// * B (validation): ≥1 set-2 property, set-1 stripped; same preference.
/// * C (test), D (validation): ≥1 set-3 property and no set-1/set-2 at all.
/// * E (test), F (validation): set-4 properties only.
/// * G (train): the remainder with everything but set 4 stripped; articles
///   left with no property are dropped.
///
/// C–F draw from a seeded shuffle of their eligible pools. Stripped values
/// are discarded.
pub fn draft_splits(
    records: &[MultiPropertyRecord],
    partition: &LabelPartition,
    sizes: BlockSizes,
    seed: u64,
) -> Result<SplitPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sorted: Vec<&MultiPropertyRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for w in sorted.windows(2) {
        if w[0].id == w[1].id {
            return Err(Error::Data(format!("duplicate article id {:?}; merge first", w[0].id)));
        }
    }
    let values_in: usize = sorted.iter().map(|r| r.value_count()).sum();

    let mut pool: Vec<bool> = vec![true; sorted.len()];
    let mut stripped = 0usize;
    let mut blocks: BTreeMap<String, Block> = BTreeMap::new();
    let mut test = Vec::new();
    let mut validation = Vec::new();
    let mut shortfalls = Vec::new();

    for block in Block::DRAFTED {
        let want = sizes.get(block);
        let mut eligible: Vec<usize> = (0..sorted.len())
            .filter(|&i| pool[i])
            .filter(|&i| {
                let c = counts(sorted[i], partition);
                match block {
                    Block::A => c.set1 >= 1,
                    Block::B => c.set2 >= 1,
                    Block::C | Block::D => c.set3 >= 1 && c.set1 == 0 && c.set2 == 0,
                    _ => c.set4 >= 1 && c.set1 + c.set2 + c.set3 == 0,
                }
            })
            .collect();
        match block {
            Block::A | Block::B => {
                let key = |i: usize| {
                    let c = counts(sorted[i], partition);
                    if block == Block::A {
                        c.set1
                    } else {
                        c.set2
                    }
                };
                // stable sort keeps id order among equal counts
                eligible.sort_by_key(|&i| std::cmp::Reverse(key(i)));
            }
            _ => eligible.shuffle(&mut rng),
        }
        if eligible.len() < want {
            shortfalls.push(format!("{block:?} short by {}", want - eligible.len()));
        }
        for &i in eligible.iter().take(want) {
            pool[i] = false;
            let mut rec = sorted[i].clone();
            stripped += match block {
                Block::A => strip(&mut rec, partition, |s| s != LabelSet::ValidationOnly),
                Block::B => strip(&mut rec, partition, |s| s != LabelSet::TestOnly),
                _ => strip(&mut rec, partition, |_| true),
            };
            blocks.insert(rec.id.clone(), block);
            if block.split() == "test" {
                test.push(rec);
            } else {
                validation.push(rec);
            }
        }
    }
    if !shortfalls.is_empty() {
        return Err(Error::Data(format!(
            "insufficient eligible articles: {}",
            shortfalls.join(", ")
        )));
    }

    let mut train = Vec::new();
    let mut dropped = 0usize;
    for (i, r) in sorted.iter().enumerate() {
        if !pool[i] {
            continue;
        }
        let mut rec = (*r).clone();
        stripped += strip(&mut rec, partition, |s| s == LabelSet::Free);
        if rec.properties.is_empty() {
            dropped += 1;
            continue;
        }
        blocks.insert(rec.id.clone(), Block::G);
        train.push(rec);
    }
    test.sort_by(|a, b| a.id.cmp(&b.id));
    validation.sort_by(|a, b| a.id.cmp(&b.id));

    let mut audit = audit_splits(&train, &validation, &test, partition, Some(&blocks));
    audit.values_in = values_in;
    audit.values_stripped = stripped;
    audit.articles_dropped = dropped;
    Ok(SplitPlan {
        train,
        validation,
        test,
        blocks,
        audit,
    })
}

/// Recomputes every leakage invariant from the split contents alone.
/// Block constraints are checked when the block assignment is supplied.
pub fn audit_splits(
    train: &[MultiPropertyRecord],
    validation: &[MultiPropertyRecord],
    test: &[MultiPropertyRecord],
    partition: &LabelPartition,
    blocks: Option<&BTreeMap<String, Block>>,
) -> AuditReport {
    let ids = |rs: &[MultiPropertyRecord]| rs.iter().map(|r| r.id.clone()).collect::<BTreeSet<_>>();
    let (tr, va, te) = (ids(train), ids(validation), ids(test));
    let mut a = AuditReport {
        train_articles: train.len(),
        validation_articles: validation.len(),
        test_articles: test.len(),
        overlap_train_test: tr.intersection(&te).count(),
        overlap_train_validation: tr.intersection(&va).count(),
        overlap_test_validation: te.intersection(&va).count(),
        ..AuditReport::default()
    };
    for (rs, split) in [(train, "train"), (validation, "validation"), (test, "test")] {
        for r in rs {
            a.values_out += r.value_count();
            for k in r.properties.keys() {
                match (partition.set_of(k), split) {
                    (None, _) => a.unknown_properties += 1,
                    (Some(LabelSet::TestOnly), "train") => a.set1_in_train += 1,
                    (Some(LabelSet::TestOnly), "validation") => a.set1_in_validation += 1,
                    (Some(LabelSet::ValidationOnly), "train") => a.set2_in_train += 1,
                    (Some(LabelSet::ValidationOnly), "test") => a.set2_in_test += 1,
                    (Some(LabelSet::Shared), "train") => a.set3_in_train += 1,
                    _ => {}
                }
            }
            if let Some(blocks) = blocks {
                match blocks.get(&r.id) {
                    Some(&b) if b.split() == split && block_ok(b, r, partition) => {
                        *a.block_counts.entry(b).or_default() += 1;
                    }
                    _ => a.block_violations += 1,
                }
            }
        }
    }
    let train_props: BTreeSet<&String> = train.iter().flat_map(|r| r.properties.keys()).collect();
    let unseen = |rs: &[MultiPropertyRecord]| {
        let (mut n, mut u) = (0usize, 0usize);
        for k in rs.iter().flat_map(|r| r.properties.keys()) {
            n += 1;
            if !train_props.contains(k) {
                u += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            u as f64 / n as f64
        }
    };
    a.test_slots_unseen_in_train = unseen(test);
    a.validation_slots_unseen_in_train = unseen(validation);
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recycler::{partition_labels, PAPER_PROPORTIONS};

    fn rec(id: &str, props: &[&str]) -> MultiPropertyRecord {
        MultiPropertyRecord {
            id: id.into(),
            text: format!("text of {id}"),
            properties: props.iter().map(|p| (p.to_string(), vec![format!("{p}-v")])).collect(),
        }
    }

    fn fixed_partition() -> LabelPartition {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
        LabelPartition {
            set1: s(&["t1"]),
            set2: s(&["v1"]),
            set3: s(&["s1"]),
            set4: s(&["f1", "f2"]),
            seed: 0,
        }
    }

    #[test]
    fn small_hand_built_draft() {
        let records = vec![
            rec("a", &["t1", "v1", "f1"]),
            rec("b", &["v1", "t1"]),
            rec("c", &["s1", "f1"]),
            rec("d", &["s1"]),
            rec("e", &["f1"]),
            rec("f", &["f2"]),
            rec("g", &["f1", "s1", "t1"]),
            rec("h", &["f2", "f1"]),
            rec("i", &["v1"]),
        ];
        let sizes = BlockSizes {
            a: 1,
            b: 1,
            c: 1,
            d: 1,
            e: 1,
            f: 1,
        };
        let plan = draft_splits(&records, &fixed_partition(), sizes, 3).unwrap();
        // A prefers most set-1 properties; all tie at one, so id order: "a".
        assert_eq!(plan.blocks["a"], Block::A);
        let a = plan.test.iter().find(|r| r.id == "a").unwrap();
        assert!(!a.properties.contains_key("v1"));
        // B takes "b" and strips its set-1 property.
        assert_eq!(plan.blocks["b"], Block::B);
        let b = plan.validation.iter().find(|r| r.id == "b").unwrap();
        assert_eq!(b.properties.keys().collect::<Vec<_>>(), ["v1"]);
        // "g" is left over with set-1/set-3 stripped; "i" has only v1 and is dropped.
        assert_eq!(plan.blocks["g"], Block::G);
        assert!(!plan.blocks.contains_key("i"));
        assert_eq!(plan.audit.articles_dropped, 1);
        assert!(plan.audit.leakage_free(), "{:?}", plan.audit);
        assert!(plan.audit.balanced());
        assert_eq!(plan.test.len(), 3);
        assert_eq!(plan.validation.len(), 3);
    }

    #[test]
    fn shortfall_reports_every_block() {
        let records = vec![rec("a", &["t1"]), rec("e", &["f1"])];
        let err = draft_splits(&records, &fixed_partition(), BlockSizes::PAPER, 0)
            .unwrap_err()
            .to_string();
        for b in [
            "A short by 999",
            "B short by 1000",
            "C short by 2000",
            "F short by 2000",
        ] {
            assert!(err.contains(b), "{err}");
        }
    }

    #[test]
    fn audit_flags_leaks() {
        let p = fixed_partition();
        let train = vec![rec("x", &["t1"])];
        let test = vec![rec("x", &["v1"])];
        let a = audit_splits(&train, &[], &test, &p, None);
        assert_eq!(a.overlap_train_test, 1);
        assert_eq!(a.set1_in_train, 1);
        assert_eq!(a.set2_in_test, 1);
        assert!(!a.leakage_free());
    }

    #[test]
    fn paper_sizes_sum_to_five_thousand() {
        assert_eq!(BlockSizes::PAPER.test_total(), 5000);
        assert_eq!(BlockSizes::PAPER.validation_total(), 5000);
        assert_eq!(BlockSizes::PAPER.scaled(0.1).test_total(), 500);
    }

    #[test]
    fn partition_then_draft_is_deterministic() {
        let records: Vec<_> = (0..300)
            .map(|i| {
                let props: Vec<String> = (0..3).map(|k| format!("P{}", (i * 7 + k * 5) % 20)).collect();
                let refs: Vec<&str> = props.iter().map(String::as_str).collect();
                rec(&format!("art{i:04}"), &refs)
            })
            .collect();
        let universe: BTreeSet<String> = records.iter().flat_map(|r| r.properties.keys().cloned()).collect();
        let p = partition_labels(&universe, PAPER_PROPORTIONS, 5).unwrap();
        let sizes = BlockSizes {
            a: 10,
            b: 10,
            c: 5,
            d: 5,
            e: 5,
            f: 5,
        };
        let x = draft_splits(&records, &p, sizes, 11).unwrap();
        let y = draft_splits(&records, &p, sizes, 11).unwrap();
        assert_eq!(x.train, y.train);
        assert_eq!(x.test, y.test);
        assert_eq!(x.blocks, y.blocks);
        assert!(x.audit.leakage_free());
        assert!(x.audit.balanced());
    }
}
