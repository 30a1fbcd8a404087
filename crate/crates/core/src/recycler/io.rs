use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use super::SingleInstance;
use crate::error::{Error, Result};

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Field names of an instance dump; lets original-schema files be ingested
/// without rewriting them.
#[derive(Debug, Clone)]
pub struct InstanceFields {
    pub id: String,
    pub text: String,
    pub property: String,
    pub values: String,
}

impl Default for InstanceFields {
    fn default() -> Self {
        Self {
            id: "id".into(),
            text: "text".into(),
            property: "property".into(),
            values: "values".into(),
        }
    }
}

impl InstanceFields {
    pub fn parse(&self, v: &Value) -> Result<SingleInstance> {
        let field = |name: &str| {
            v.get(name)
                .ok_or_else(|| Error::Data(format!("missing field {name:?}")))
        };
        let string = |name: &str| -> Result<String> {
            match field(name)? {
                Value::String(s) => Ok(s.clone()),
                Value::Number(n) => Ok(n.to_string()),
                other => Err(Error::Data(format!("field {name:?} must be a string, got {other}"))),
            }
        };
        let values = match field(&self.values)? {
            Value::String(s) => vec![s.clone()],
            Value::Array(items) => items
                .iter()
                .map(|x| match x {
                    Value::String(s) => Ok(s.clone()),
                    other => Err(Error::Data(format!("value entries must be strings, got {other}"))),
                })
                .collect::<Result<Vec<_>>>()?,
            other => return Err(Error::Data(format!("values must be a string or list, got {other}"))),
        };
        let values = super::dedup_values(values.into_iter().filter(|s| !s.trim().is_empty()));
        if values.is_empty() {
            return Err(Error::Data("instance has no values".into()));
        }
        Ok(SingleInstance {
            id: string(&self.id)?,
            text: string(&self.text)?,
            property: string(&self.property)?,
            values,
        })
    }
}

pub fn read_instances(path: &Path, fields: &InstanceFields) -> Result<Vec<SingleInstance>> {
    let raw: Vec<Value> = read_jsonl(path)?;
    raw.iter()
        .enumerate()
        .map(|(n, v)| {
            fields
                .parse(v)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn adapter_renames_and_wraps_scalar_values() {
        let f = InstanceFields {
            id: "key".into(),
            text: "string_sequence".into(),
            property: "question".into(),
            values: "answer".into(),
        };
        let v = json!({"key": 7, "string_sequence": "t", "question": "p", "answer": "x"});
        let inst = f.parse(&v).unwrap();
        assert_eq!(inst.id, "7");
        assert_eq!(inst.values, vec!["x"]);
    }

    #[test]
    fn empty_values_rejected_and_duplicates_dropped() {
        let f = InstanceFields::default();
        assert!(f
            .parse(&json!({"id":"a","text":"t","property":"p","values":[]}))
            .is_err());
        let inst = f
            .parse(&json!({"id":"a","text":"t","property":"p","values":["x","y","x"]}))
            .unwrap();
        assert_eq!(inst.values, vec!["x", "y"]);
    }
}
