use std::collections::BTreeMap;

use super::{dedup_values, MultiPropertyRecord, SingleInstance};

#[derive(Debug, Clone, Default)]
pub struct MergeOutput {
    /// One record per article id, sorted by id.
    pub records: Vec<MultiPropertyRecord>,
    /// Articles whose instances disagreed on the text.
    pub text_conflicts: usize,
}

/// Groups instances by article, unioning value lists per property.
///
/// When instances of one article carry different texts the longest one is
/// kept (ties go to the lexicographically greater text, so the result does
/// not depend on arrival order).
pub fn merge<I>(instances: I) -> MergeOutput
where
    I: IntoIterator<Item = SingleInstance>,
{
    let mut by_id: BTreeMap<String, (MultiPropertyRecord, bool)> = BTreeMap::new();
    for inst in instances {
        let entry = by_id.entry(inst.id.clone()).or_insert_with(|| {
            (
                MultiPropertyRecord {
                    id: inst.id.clone(),
                    text: inst.text.clone(),
                    properties: BTreeMap::new(),
                },
                false,
            )
        });
        let (rec, conflict) = entry;
        if rec.text != inst.text {
            *conflict = true;
            if (inst.text.len(), &inst.text) > (rec.text.len(), &rec.text) {
                rec.text = inst.text.clone();
            }
        }
        let slot = rec.properties.entry(inst.property).or_default();
        let merged = dedup_values(slot.drain(..).chain(inst.values));
        *slot = merged;
    }
    let mut out = MergeOutput::default();
    for (_, (rec, conflict)) in by_id {
        if conflict {
            out.text_conflicts += 1;
            log::warn!("article {} has conflicting texts; kept the longest", rec.id);
        }
        out.records.push(rec);
    }
    out
}
