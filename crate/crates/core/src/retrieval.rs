//! Demonstration retrieval from a coreset and multiple-choice prompt assembly.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coreset::Coreset;
use crate::error::{KecoError, Result};
use crate::fsio;
use crate::metric;
use crate::rng;
use crate::store::{EmbeddingPack, EmbeddingRecord};

pub const PROMPT_QUESTION: &str = "Which of these choices is shown in the image?";
pub const PROMPT_INSTRUCTION: &str = "Answer with the letter from the given choices directly.";
pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
    /// Raw inner product.
    Dot,
}

impl std::str::FromStr for Similarity {
    type Err = KecoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "dot" => Ok(Self::Dot),
            other => Err(KecoError::InvalidConfig(format!("unknown similarity {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub index: usize,
    pub source_id: String,
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub ranked: Vec<RankedEntry>,
}

/// Similarity of `query` against every key, in coreset order.
pub fn score_all(coreset: &Coreset, query: &EmbeddingRecord, similarity: Similarity) -> Result<Vec<f64>> {
    if query.vector.len() != coreset.dim() {
        return Err(KecoError::DimensionMismatch {
            id: query.id.clone(),
            expected: coreset.dim(),
            found: query.vector.len(),
        });
    }
    let q = query.to_f64();
    let qn = metric::norm(&q);
    if qn == 0.0 {
        return Err(KecoError::ZeroNormVector(query.id.clone()));
    }
    Ok(coreset
        .entries()
        .iter()
        .map(|e| match similarity {
            Similarity::Cosine => metric::cosine_with_query(&e.key, &q, qn),
            Similarity::Dot => metric::dot(&e.key, &q),
        })
        .collect())
}

/// Exact top-`k` by exhaustive scan; equal scores rank by lower coreset index.
/// Class labels are not consulted.
pub fn retrieve_topk(
    coreset: &Coreset,
    query: &EmbeddingRecord,
    k: usize,
    similarity: Similarity,
) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(KecoError::InvalidConfig("shot count must be at least 1".into()));
    }
    if k > coreset.len() {
        return Err(KecoError::ShotCountExceedsCoreset {
            shots: k,
            size: coreset.len(),
        });
    }
    let scores = score_all(coreset, query, similarity)?;
    let rank = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, rank);
        idx.truncate(k);
    }
    idx.sort_unstable_by(rank);
    let entries = coreset.entries();
    Ok(RetrievalResult {
        query_id: query.id.clone(),
        ranked: idx
            .into_iter()
            .map(|i| RankedEntry {
                index: i,
                source_id: entries[i].source_id.clone(),
                label: entries[i].label.clone(),
                score: scores[i],
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemoOrder {
    /// Least similar first; the best match sits next to the query.
    #[default]
    Asc,
    Desc,
}

impl std::str::FromStr for DemoOrder {
    type Err = KecoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asc" => Ok(Self::Asc),
            "desc" => Ok(Self::Desc),
            other => Err(KecoError::InvalidConfig(format!("unknown order {other:?}"))),
        }
    }
}

pub fn assemble_sequence(result: &RetrievalResult, order: DemoOrder) -> Vec<RankedEntry> {
    let mut seq = result.ranked.clone();
    if order == DemoOrder::Asc {
        seq.reverse();
    }
    seq
}

/// Four distinct class names, exactly one of them correct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceBlock {
    pub options: [String; 4],
    pub correct: usize,
}

impl ChoiceBlock {
    pub fn correct_letter(&self) -> char {
        LETTERS[self.correct]
    }

    pub fn render(&self) -> String {
        let o = &self.options;
        format!(
            "<image> {PROMPT_QUESTION} Choices: A.{}, B.{}, C.{}, D.{} {PROMPT_INSTRUCTION}",
            o[0], o[1], o[2], o[3]
        )
    }
}

/// Draws three distractors from `labels` (excluding `correct`) and shuffles
/// the four options.
pub fn draw_choices<R: rand::Rng>(labels: &[String], correct: &str, rng: &mut R) -> Result<ChoiceBlock> {
    let others: Vec<&String> = labels.iter().filter(|l| *l != correct).collect();
    if others.len() == labels.len() {
        return Err(KecoError::UnknownLabel(correct.to_string()));
    }
    if others.len() < 3 {
        return Err(KecoError::InsufficientChoices(labels.len()));
    }
    let mut opts: Vec<String> = vec![correct.to_string()];
    opts.extend(index::sample(rng, others.len(), 3).into_iter().map(|i| others[i].clone()));
    opts.shuffle(rng);
    let correct_pos = opts.iter().position(|o| o == correct).expect("inserted above");
    let options: [String; 4] = opts.try_into().expect("four options");
    Ok(ChoiceBlock {
        options,
        correct: correct_pos,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub source_id: String,
    pub label: String,
    pub score: f64,
    pub choices: ChoiceBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub query_id: String,
    pub demos: Vec<Demonstration>,
    pub query: ChoiceBlock,
}

impl PromptRecord {
    pub fn correct_letter(&self) -> char {
        self.query.correct_letter()
    }

    pub fn to_json_line(&self) -> String {
        let line = PromptLine {
            query_id: &self.query_id,
            shots: self.demos.len(),
            demos: self
                .demos
                .iter()
                .map(|d| DemoLine {
                    image_ref: &d.source_id,
                    prompt_text: d.choices.render(),
                    answer_letter: d.choices.correct_letter().to_string(),
                })
                .collect(),
            query: QueryLine {
                image_ref: &self.query_id,
                prompt_text: self.query.render(),
            },
            correct_letter: self.correct_letter().to_string(),
        };
        serde_json::to_string(&line).expect("prompt serializes")
    }
}

#[derive(Serialize)]
struct PromptLine<'a> {
    query_id: &'a str,
    shots: usize,
    demos: Vec<DemoLine<'a>>,
    query: QueryLine<'a>,
    correct_letter: String,
}

#[derive(Serialize)]
struct DemoLine<'a> {
    image_ref: &'a str,
    prompt_text: String,
    answer_letter: String,
}

#[derive(Serialize)]
struct QueryLine<'a> {
    image_ref: &'a str,
    prompt_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptOptions {
    pub shots: usize,
    pub seed: u64,
    pub order: DemoOrder,
    pub similarity: Similarity,
}

/// One prompt per test record, in test-pack order.
pub fn build_prompts(coreset: &Coreset, test: &EmbeddingPack, opts: &PromptOptions) -> Result<Vec<PromptRecord>> {
    let labels = coreset.labels();
    if labels.len() < 4 {
        return Err(KecoError::InsufficientChoices(labels.len()));
    }
    for l in test.labels() {
        if coreset.class_index(l).is_none() {
            return Err(KecoError::UnknownLabel(l.clone()));
        }
    }
    test.records()
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let result = retrieve_topk(coreset, q, opts.shots, opts.similarity)?;
            let mut r = rng::stream(opts.seed, rng::TAG_PROMPTS, &[qi as u64]);
            let demos = assemble_sequence(&result, opts.order)
                .into_iter()
                .map(|d| {
                    let choices = draw_choices(labels, &d.label, &mut r)?;
                    Ok(Demonstration {
                        source_id: d.source_id,
                        label: d.label,
                        score: d.score,
                        choices,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let query = draw_choices(labels, &q.label, &mut r)?;
            Ok(PromptRecord {
                query_id: q.id.clone(),
                demos,
                query,
            })
        })
        .collect()
}

/// Writes prompts as JSONL and returns the record count.
pub fn emit_prompts(
    coreset: &Coreset,
    test: &EmbeddingPack,
    opts: &PromptOptions,
    out: impl AsRef<Path>,
) -> Result<usize> {
    let prompts = build_prompts(coreset, test, opts)?;
    let mut text = String::new();
    for p in &prompts {
        text.push_str(&p.to_json_line());
        text.push('\n');
    }
    fsio::atomic_write(out.as_ref(), text.as_bytes())?;
    Ok(prompts.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coreset::CoresetEntry;

    fn cs(keys: &[[f64; 2]], labels: &[&str]) -> Coreset {
        let ls: Vec<String> = {
            let mut v: Vec<String> = Vec::new();
            for l in labels {
                if !v.iter().any(|x| x == l) {
                    v.push(l.to_string());
                }
            }
            v
        };
        let entries = keys
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (k, l))| CoresetEntry {
                source_id: format!("e{i}"),
                label: l.to_string(),
                class: ls.iter().position(|x| x == l).unwrap(),
                key: k.to_vec(),
                updates_applied: 0,
            })
            .collect();
        let n = ls.len();
        Coreset::from_entries(2, ls, entries, 1, vec![1; n], String::new()).unwrap()
    }

    fn q(v: [f32; 2]) -> EmbeddingRecord {
        EmbeddingRecord::new("q", "a", v.to_vec())
    }

    #[test]
    fn topk_orders_exhaustively() {
        let c = cs(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]], &["a", "b", "c"]);
        let r = retrieve_topk(&c, &q([1.0, 0.0]), 2, Similarity::Cosine).unwrap();
        let got: Vec<(usize, f64)> = r.ranked.iter().map(|e| (e.index, e.score)).collect();
        assert_eq!(got, [(0, 1.0), (1, 0.0)]);
        let all = retrieve_topk(&c, &q([1.0, 0.0]), 3, Similarity::Cosine).unwrap();
        assert_eq!(all.ranked.iter().map(|e| e.index).collect::<Vec<_>>(), [0, 1, 2]);
        assert!(matches!(
            retrieve_topk(&c, &q([1.0, 0.0]), 4, Similarity::Cosine),
            Err(KecoError::ShotCountExceedsCoreset { shots: 4, size: 3 })
        ));
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let c = cs(&[[0.0, 1.0], [2.0, 0.0], [1.0, 0.0]], &["a", "b", "a"]);
        let r = retrieve_topk(&c, &q([3.0, 0.0]), 2, Similarity::Cosine).unwrap();
        assert_eq!(r.ranked.iter().map(|e| e.index).collect::<Vec<_>>(), [1, 2]);
        let d = retrieve_topk(&c, &q([3.0, 0.0]), 1, Similarity::Dot).unwrap();
        assert_eq!(d.ranked[0].index, 1);
        assert_eq!(d.ranked[0].score, 6.0);
    }

    #[test]
    fn sequence_orders() {
        let c = cs(&[[1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [-1.0, 0.2]], &["a", "b", "c", "d"]);
        let r = retrieve_topk(&c, &q([1.0, 0.0]), 4, Similarity::Cosine).unwrap();
        let asc = assemble_sequence(&r, DemoOrder::Asc);
        let mut desc = assemble_sequence(&r, DemoOrder::Desc);
        assert_eq!(asc.last().unwrap().index, 0);
        desc.reverse();
        assert_eq!(asc, desc);
        let one = retrieve_topk(&c, &q([1.0, 0.0]), 1, Similarity::Cosine).unwrap();
        assert_eq!(assemble_sequence(&one, DemoOrder::Asc), assemble_sequence(&one, DemoOrder::Desc));
    }

    #[test]
    fn choice_block_rendering() {
        let b = ChoiceBlock {
            options: ["hen".into(), "owl".into(), "crow".into(), "wren".into()],
            correct: 2,
        };
        assert_eq!(
            b.render(),
            "<image> Which of these choices is shown in the image? Choices: A.hen, B.owl, C.crow, D.wren Answer with the letter from the given choices directly."
        );
        assert_eq!(b.correct_letter(), 'C');
    }

    #[test]
    fn three_classes_are_not_enough() {
        let c = cs(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]], &["a", "b", "c"]);
        let test = EmbeddingPack::new(2, vec!["a".into()], vec![q([1.0, 0.0])]).unwrap();
        let opts = PromptOptions { shots: 1, seed: 0, order: DemoOrder::Asc, similarity: Similarity::Cosine };
        assert!(matches!(build_prompts(&c, &test, &opts), Err(KecoError::InsufficientChoices(3))));
    }
}
