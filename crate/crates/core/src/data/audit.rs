//! Exact-duplicate leakage audit between a training and an evaluation split.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::example::TrainingExample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collision {
    pub hash: String,
    pub train_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
    pub train_ids: Vec<String>,
    pub eval_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AuditReport {
    pub image_collisions: Vec<Collision>,
    pub text_collisions: Vec<Collision>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.image_collisions.is_empty() && self.text_collisions.is_empty()
    }

    /// Distinct eval examples involved in any collision.
    pub fn leaked_eval_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .image_collisions
            .iter()
            .chain(&self.text_collisions)
            .flat_map(|c| c.eval_indices.iter().copied())
            .collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }
}

fn index<'a>(
    set: &'a [TrainingExample],
    which: &str,
    field: fn(&TrainingExample) -> Option<&String>,
) -> Result<BTreeMap<&'a str, Vec<usize>>> {
    let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ex) in set.iter().enumerate() {
        let h = field(ex).ok_or_else(|| {
            Error::MissingHash(format!("{which} example {i} ({})", ex.metadata.source_id))
        })?;
        map.entry(h.as_str()).or_default().push(i);
    }
    Ok(map)
}

fn collisions(
    train: &[TrainingExample],
    eval: &[TrainingExample],
    field: fn(&TrainingExample) -> Option<&String>,
) -> Result<Vec<Collision>> {
    let t = index(train, "train", field)?;
    let e = index(eval, "eval", field)?;
    let ids = |set: &[TrainingExample], idx: &[usize]| -> Vec<String> {
        idx.iter().map(|&i| set[i].metadata.source_id.clone()).collect()
    };
    Ok(t.iter()
        .filter_map(|(hash, ti)| {
            let ei = e.get(hash)?;
            Some(Collision {
                hash: (*hash).to_string(),
                train_indices: ti.clone(),
                eval_indices: ei.clone(),
                train_ids: ids(train, ti),
                eval_ids: ids(eval, ei),
            })
        })
        .collect())
}

/// Reports every exact image-hash and question-hash match between the splits,
/// one entry per shared hash, ordered by hash.
pub fn leakage_audit(train: &[TrainingExample], eval: &[TrainingExample]) -> Result<AuditReport> {
    Ok(AuditReport {
        image_collisions: collisions(train, eval, |ex| ex.metadata.image_hash.as_ref())?,
        text_collisions: collisions(train, eval, |ex| ex.metadata.question_hash.as_ref())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::example::{Accuracy, ExampleMetadata, SupervisionMode};
    use crate::data::format::ResponseSegments;

    fn ex(id: &str, image: &str, text: &str) -> TrainingExample {
        TrainingExample {
            query_image: vec![],
            query_tokens: vec![],
            segments: ResponseSegments::default(),
            accuracy: Accuracy::new(0, 1),
            mode: SupervisionMode::TextOnly,
            metadata: ExampleMetadata {
                source_id: id.into(),
                image_hash: Some(image.into()),
                question_hash: Some(text.into()),
            },
        }
    }

    #[test]
    fn disjoint_and_planted() {
        let train = vec![ex("a", "i1", "t1"), ex("b", "i2", "t2")];
        let eval = vec![ex("c", "i3", "t3")];
        assert!(leakage_audit(&train, &eval).unwrap().is_clean());

        let eval = vec![ex("c", "i3", "t3"), ex("d", "i2", "t9")];
        let r = leakage_audit(&train, &eval).unwrap();
        assert_eq!(r.image_collisions.len(), 1);
        assert!(r.text_collisions.is_empty());
        assert_eq!(r.image_collisions[0].train_ids, vec!["b"]);
        assert_eq!(r.image_collisions[0].eval_indices, vec![1]);
    }

    #[test]
    fn missing_hash_is_error() {
        let mut bad = ex("x", "i", "t");
        bad.metadata.question_hash = None;
        assert!(matches!(
            leakage_audit(&[bad], &[ex("y", "j", "u")]),
            Err(Error::MissingHash(_))
        ));
    }

    #[test]
    fn report_json_shape() {
        let r = leakage_audit(&[ex("a", "h", "t")], &[ex("b", "h", "t")]).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["image_collisions"].as_array().unwrap().len(), 1);
        assert_eq!(v["text_collisions"].as_array().unwrap().len(), 1);
    }
}
