//! Builds the multi-property dataset from per-property instances: merging,
//! label partitioning, block drafting into leakage-free splits, annotation
//! filtering and explicit/inferable value tagging.

mod draft;
mod filter;
mod io;
mod merge;
mod partition;
mod tags;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use draft::{audit_splits, draft_splits, AuditReport, Block, BlockSizes, SplitPlan};
pub use filter::{apply_annotation_filter, FilterEntry, FilterReport};
pub use io::{read_instances, read_jsonl, write_jsonl, InstanceFields};
pub use merge::{merge, MergeOutput};
pub use partition::{partition_labels, LabelPartition, LabelSet, PAPER_PROPORTIONS};
pub use tags::{tag_em_in, tag_records, EmInTag, ValueTag};

/// One (article, property, values) record in the original per-property schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleInstance {
    pub id: String,
    pub text: String,
    pub property: String,
    pub values: Vec<String>,
}

/// One article with every property it carries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiPropertyRecord {
    pub id: String,
    pub text: String,
    pub properties: BTreeMap<String, Vec<String>>,
}

impl MultiPropertyRecord {
    pub fn value_count(&self) -> usize {
        self.properties.values().map(Vec::len).sum()
    }
}

/// Order-preserving deduplication.
pub(crate) fn dedup_values<I: IntoIterator<Item = String>>(values: I) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for v in values {
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}
