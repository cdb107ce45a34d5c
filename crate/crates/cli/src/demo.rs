//! Offline stand-in for a real endpoint: a mock script derived from the
//! dataset, so the whole pipeline runs without network access.
//!
//! Every question gets a few canned reasoning texts. Some hesitate and
//! settle on the right answer at the end; others commit to a distractor in
//! the first sentence. Scoring rules raise the probability of whichever
//! choice the latest thought endorses, so the landscape has structure.

use lot_core::dataset::{index_to_letter, Question};
use lot_core::model_client::{MockCompletion, MockRule, MockScript};

fn first_token(s: &str) -> &str {
    s.split_whitespace().next().unwrap_or(s)
}

fn settles_late(q: &Question, decoy: usize) -> String {
    let c = q.correct_index;
    format!(
        "Read the question carefully. {d} fits at first glance. Check the numbers once more. {d} fails the check. {a} fits after the full count. The answer is ({l}).",
        d = q.choices[decoy],
        a = q.choices[c],
        l = index_to_letter(c)
    )
}

fn commits_early(q: &Question, wrong: usize) -> String {
    format!(
        "{w} fits right away. Keep {w} as the answer. {w} fits the numbers. The answer is ({l}).",
        w = q.choices[wrong],
        l = index_to_letter(wrong)
    )
}

/// Script for `questions` given in source order.
pub fn demo_script(model_name: &str, questions: &[Question]) -> MockScript {
    let mut completions = Vec::new();
    let mut rules = Vec::new();
    for (i, q) in questions.iter().enumerate() {
        let wrong: Vec<usize> = (0..q.k()).filter(|j| *j != q.correct_index).collect();
        let trap = wrong[i % wrong.len()];
        let other = wrong[(i + 1) % wrong.len()];
        let late = |d| settles_late(q, d);
        let texts = match i % 3 {
            0 => vec![late(trap), late(other), commits_early(q, trap), late(trap)],
            1 => vec![late(trap), commits_early(q, trap), commits_early(q, other), late(other)],
            _ => vec![commits_early(q, trap), late(trap), commits_early(q, trap), commits_early(q, other)],
        };
        completions.push(MockCompletion { prompt_pattern: format!("Question: {}\n", q.stem.trim()), texts });
        for (j, choice) in q.choices.iter().enumerate() {
            let token = first_token(choice).to_string();
            for (pattern, p) in [
                (format!(" {choice} fits"), 0.6),
                (format!("Keep {choice} "), 0.7),
                (format!(" {choice} fails"), 0.02),
                (format!("answer is ({})", index_to_letter(j)), 0.85),
            ] {
                rules.push(MockRule { prefix_pattern: pattern, token: token.clone(), probability: p });
            }
        }
    }
    MockScript {
        model_name: model_name.to_string(),
        rules,
        default_probability: 0.2,
        completions,
        supports_logprobs: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lot_core::model_client::{make_mock_model, LanguageModel, SamplingParams};

    fn q() -> Question {
        Question::new("q1", "What is 2 + 3?", vec!["4".into(), "5".into(), "6".into()], 1).unwrap()
    }

    #[test]
    fn endorsed_choice_becomes_likely() {
        let m = make_mock_model(demo_script("demo", &[q()])).unwrap();
        let prefix = "Question: What is 2 + 3? 4 fits at first glance.";
        assert_eq!(m.score(prefix, " 4").unwrap().token_logprobs, vec![0.6f64.ln()]);
        assert_eq!(m.score(prefix, " 5").unwrap().token_logprobs, vec![0.2f64.ln()]);
        let later = format!("{prefix} 4 fails the check.");
        assert_eq!(m.score(&later, " 4").unwrap().token_logprobs, vec![0.02f64.ln()]);
    }

    #[test]
    fn completions_cover_every_question() {
        let m = make_mock_model(demo_script("demo", &[q()])).unwrap();
        let text = m
            .complete("Question: What is 2 + 3?\nAnswer Choices: (A) 4 (B) 5 (C) 6", &SamplingParams::default())
            .unwrap();
        assert!(text.contains("The answer is ("));
    }
}
