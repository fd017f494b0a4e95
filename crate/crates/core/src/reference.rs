//! The two-latent reference instance used in tests, examples and the demo
//! session: latents `A` and `B` under a uniform prior, binary answers with
//! index 0 = "yes".
//!
//! | question | P(yes \| A) | P(yes \| B) |
//! |----------|-------------|-------------|
//! | qDet, qDet2     | 1.0 | 0.0 |
//! | qNoise, qNoise2 | 0.5 | 0.5 |
//! | qSkew, qSkew2   | 0.8 | 0.2 |

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::data::{Dataset, Entity};
use crate::table::LatentTable;
use crate::types::{CatalogEntry, QuestionCatalog};

const QUESTIONS: [(&str, &str, f64, f64); 6] = [
    ("qDet", "Is it an A?", 1.0, 0.0),
    ("qNoise", "Did the coin land heads?", 0.5, 0.5),
    ("qSkew", "Does it usually look like an A?", 0.8, 0.2),
    ("qDet2", "Is it really an A?", 1.0, 0.0),
    ("qSkew2", "Does it often behave like an A?", 0.8, 0.2),
    ("qNoise2", "Did the second coin land heads?", 0.5, 0.5),
];

pub fn r1_catalog() -> QuestionCatalog {
    QuestionCatalog::new(
        QUESTIONS
            .iter()
            .map(|&(id, text, _, _)| CatalogEntry {
                id: id.into(),
                text: text.into(),
                choices: vec!["yes".into(), "no".into()],
                features: None,
                tags: None,
            })
            .collect(),
    )
    .expect("static catalog")
}

pub fn r1() -> LatentTable {
    let likelihood = QUESTIONS
        .iter()
        .map(|&(_, _, a, b)| vec![vec![a, 1.0 - a], vec![b, 1.0 - b]])
        .collect();
    LatentTable::new(
        Arc::new(r1_catalog()),
        vec!["A".into(), "B".into()],
        vec![0.5, 0.5],
        likelihood,
    )
    .expect("static table")
}

/// Two recorded entities, one of each type, answering every question with
/// its most likely answer (coin questions answered "yes").
pub fn r1_corpus() -> Dataset {
    let entity = |id: &str, is_a: bool| {
        let answers: BTreeMap<_, _> = QUESTIONS
            .iter()
            .map(|&(q, _, pa, _)| {
                let yes = if pa == 0.5 { true } else { is_a };
                (q.into(), if yes { 0 } else { 1 })
            })
            .collect();
        Entity {
            id: id.into(),
            answers,
            meta: None,
        }
    };
    Dataset::new(r1_catalog(), vec![entity("A", true), entity("B", false)]).expect("static corpus")
}
