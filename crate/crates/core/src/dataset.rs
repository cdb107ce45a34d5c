//! Multiple-choice datasets: loading, validation, canonical choice order and
//! train/eval splits.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One multiple-choice item.
///
/// `choice_permutation[i]` is the position in the source file of the choice
/// now stored at index `i`. A freshly loaded question carries the identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub stem: String,
    pub choices: Vec<String>,
    pub correct_index: usize,
    pub choice_permutation: Vec<usize>,
}

impl Question {
    /// Builds and validates a question in source order.
    pub fn new(
        id: impl Into<String>,
        stem: impl Into<String>,
        choices: Vec<String>,
        correct_index: usize,
    ) -> Result<Self> {
        let k = choices.len();
        let q = Question {
            id: id.into(),
            stem: stem.into(),
            choices,
            correct_index,
            choice_permutation: (0..k).collect(),
        };
        q.validate()?;
        Ok(q)
    }

    pub fn k(&self) -> usize {
        self.choices.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.choices.len();
        if k < 2 {
            return Err(Error::Validation(format!(
                "question `{}` has {k} choice(s); at least 2 required",
                self.id
            )));
        }
        if self.correct_index >= k {
            return Err(Error::Validation(format!(
                "question `{}`: correct index {} out of range for {k} choices",
                self.id, self.correct_index
            )));
        }
        let mut seen = HashSet::new();
        for (i, c) in self.choices.iter().enumerate() {
            let norm = normalize_whitespace(c);
            if norm.is_empty() {
                return Err(Error::Validation(format!(
                    "question `{}`: choice {i} is empty",
                    self.id
                )));
            }
            if !seen.insert(norm) {
                return Err(Error::Validation(format!(
                    "question `{}`: choice {i} duplicates an earlier choice",
                    self.id
                )));
            }
        }
        let mut perm = self.choice_permutation.clone();
        perm.sort_unstable();
        if perm != (0..k).collect::<Vec<_>>() {
            return Err(Error::Validation(format!(
                "question `{}`: choice permutation is not a permutation of 0..{k}",
                self.id
            )));
        }
        Ok(())
    }

    /// Maps a choice index in source order to the current (canonical) order.
    pub fn canonical_from_original(&self, original: usize) -> Option<usize> {
        self.choice_permutation.iter().position(|&p| p == original)
    }

    /// Choices listed in source order, as a model should see them.
    pub fn original_choices(&self) -> Vec<&str> {
        let mut out = vec![""; self.k()];
        for (i, &p) in self.choice_permutation.iter().enumerate() {
            out[p] = &self.choices[i];
        }
        out
    }
}

fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Supported on-disk dataset encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    McqJsonl,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnswerField {
    Index(i64),
    Text(String),
}

#[derive(Deserialize)]
struct McqRecord {
    id: String,
    question: String,
    choices: Vec<String>,
    answer: AnswerField,
}

/// Letter `A`, `B`, ... to a zero-based index. Accepts `(C)` and `C.` too.
pub fn letter_to_index(s: &str) -> Option<usize> {
    let t = s.trim().trim_start_matches('(').trim_end_matches([')', '.']);
    let mut chars = t.chars();
    let c = chars.next()?;
    if chars.next().is_some() || !c.is_ascii_alphabetic() {
        return None;
    }
    Some((c.to_ascii_uppercase() as u8 - b'A') as usize)
}

pub fn index_to_letter(i: usize) -> char {
    (b'A' + (i % 26) as u8) as char
}

/// Loads and validates every question in `path`, in file order.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<Question>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        DatasetFormat::McqJsonl => parse_mcq_jsonl(&text),
    }
}

pub fn parse_mcq_jsonl(text: &str) -> Result<Vec<Question>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: McqRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let correct = match &rec.answer {
            AnswerField::Index(i) if *i >= 0 => *i as usize,
            AnswerField::Index(i) => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("negative answer index {i}"),
                })
            }
            AnswerField::Text(s) => letter_to_index(s).ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("answer `{s}` is not a choice letter"),
            })?,
        };
        if !ids.insert(rec.id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate question id `{}` at line {line_no}",
                rec.id
            )));
        }
        out.push(Question::new(rec.id, rec.question, rec.choices, correct)?);
    }
    Ok(out)
}

/// Moves the correct choice to index 0, keeping the relative order of the
/// others. Idempotent.
pub fn reorder_choices(q: &Question) -> Question {
    let order: Vec<usize> = std::iter::once(q.correct_index)
        .chain((0..q.k()).filter(|&i| i != q.correct_index))
        .collect();
    Question {
        id: q.id.clone(),
        stem: q.stem.clone(),
        choices: order.iter().map(|&i| q.choices[i].clone()).collect(),
        correct_index: 0,
        choice_permutation: order.iter().map(|&i| q.choice_permutation[i]).collect(),
    }
}

/// Undoes every recorded reordering, returning the question in source order.
pub fn restore_original_order(q: &Question) -> Question {
    let k = q.k();
    let mut choices = vec![String::new(); k];
    for (i, &p) in q.choice_permutation.iter().enumerate() {
        choices[p] = q.choices[i].clone();
    }
    Question {
        id: q.id.clone(),
        stem: q.stem.clone(),
        choices,
        correct_index: q.choice_permutation[q.correct_index],
        choice_permutation: (0..k).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Question>,
    pub eval: Vec<Question>,
    pub seed: u64,
}

/// Seeded disjoint train/eval draw.
///
/// Selection depends only on the set of ids, the seed and the sizes; each
/// split keeps the dataset's order.
pub fn split_train_eval(
    ds: &[Question],
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    if n_train + n_eval > ds.len() {
        return Err(Error::Size(format!(
            "requested {n_train} train + {n_eval} eval questions but dataset has {}",
            ds.len()
        )));
    }
    let mut ids: Vec<&str> = ds.iter().map(|q| q.id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let train_ids: HashSet<&str> = ids[..n_train].iter().copied().collect();
    let eval_ids: HashSet<&str> = ids[n_train..n_train + n_eval].iter().copied().collect();
    Ok(DatasetSplit {
        train: ds.iter().filter(|q| train_ids.contains(q.id.as_str())).cloned().collect(),
        eval: ds.iter().filter(|q| eval_ids.contains(q.id.as_str())).cloned().collect(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn five() -> Question {
        let ch = ["A", "B", "C", "D", "E"].iter().map(|s| s.to_string()).collect();
        Question::new("q", "stem", ch, 3).unwrap()
    }

    #[test]
    fn loads_three_records_with_letter_answers() {
        let text = r#"{"id":"a","question":"1+1?","choices":["1","2","3","4","5"],"answer":"C"}
{"id":"b","question":"x?","choices":["yes","no"],"answer":1}

{"id":"c","question":"y?","choices":["p","q","r"],"answer":"(a)"}
"#;
        let qs = parse_mcq_jsonl(text).unwrap();
        assert_eq!(qs.len(), 3);
        assert_eq!(qs[0].correct_index, 2);
        assert_eq!(qs[1].correct_index, 1);
        assert_eq!(qs[2].correct_index, 0);
    }

    #[test]
    fn single_choice_is_rejected() {
        let text = r#"{"id":"a","question":"?","choices":["only"],"answer":0}"#;
        assert!(matches!(parse_mcq_jsonl(text), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_record_names_line() {
        let text = "{\"id\":\"a\",\"question\":\"?\",\"choices\":[\"x\",\"y\"],\"answer\":0}\n{not json}\n";
        match parse_mcq_jsonl(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_and_choices_rejected() {
        let dup_id = r#"{"id":"a","question":"?","choices":["x","y"],"answer":0}
{"id":"a","question":"?","choices":["x","y"],"answer":0}"#;
        assert!(matches!(parse_mcq_jsonl(dup_id), Err(Error::Validation(_))));
        let dup_choice = r#"{"id":"a","question":"?","choices":["x  y","x y"],"answer":0}"#;
        assert!(matches!(parse_mcq_jsonl(dup_choice), Err(Error::Validation(_))));
        let out_of_range = r#"{"id":"a","question":"?","choices":["x","y"],"answer":"C"}"#;
        assert!(matches!(parse_mcq_jsonl(out_of_range), Err(Error::Validation(_))));
    }

    #[test]
    fn reorder_moves_correct_first() {
        let r = reorder_choices(&five());
        assert_eq!(r.choices, vec!["D", "A", "B", "C", "E"]);
        assert_eq!(r.correct_index, 0);
        assert_eq!(r.choice_permutation, vec![3, 0, 1, 2, 4]);
        assert_eq!(restore_original_order(&r), five());
    }

    #[test]
    fn reorder_identity_when_already_first() {
        let mut q = five();
        q.correct_index = 0;
        let r = reorder_choices(&q);
        assert_eq!(r, q);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds: Vec<Question> = (0..70)
            .map(|i| Question::new(format!("q{i}"), "s", vec!["a".into(), "b".into()], 0).unwrap())
            .collect();
        let a = split_train_eval(&ds, 20, 50, 7).unwrap();
        assert_eq!((a.train.len(), a.eval.len()), (20, 50));
        let b = split_train_eval(&ds, 20, 50, 7).unwrap();
        assert_eq!(a, b);
        let train: HashSet<_> = a.train.iter().map(|q| &q.id).collect();
        assert!(a.eval.iter().all(|q| !train.contains(&q.id)));
        assert!(matches!(split_train_eval(&ds, 21, 50, 7), Err(Error::Size(_))));
    }

    proptest! {
        #[test]
        fn reorder_is_idempotent_and_invertible(k in 2usize..9, correct in 0usize..9) {
            let correct = correct % k;
            let ch = (0..k).map(|i| format!("choice {i}")).collect();
            let q = Question::new("p", "s", ch, correct).unwrap();
            let once = reorder_choices(&q);
            prop_assert_eq!(&reorder_choices(&once), &once);
            prop_assert_eq!(once.correct_index, 0);
            prop_assert_eq!(&once.choices[0], &q.choices[correct]);
            prop_assert_eq!(restore_original_order(&once), q);
        }
    }
}
