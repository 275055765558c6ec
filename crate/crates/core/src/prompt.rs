//! Prompt templates and the small rendering helpers they share.
//!
//! Templates use `{num_choices}`, `{num_choices_word}`, `{labels}` and
//! `{format_lines}` slots, filled from the query's own choice list so the
//! system text always agrees with the choices shown.

use crate::kb::Choice;

pub const ACKNOWLEDGEMENT: &str =
    "Yes, I understand. Please provide the question and the possible choices.";

pub const KNOWLEDGE_CUE: &str = "List of knowledge:";

pub const ANSWER_CUE: &str = "Answer:";

pub const KNOWLEDGE_SYSTEM_TEMPLATE: &str = "You are given a question and {num_choices} choices.\n\
Your task is to write one or more explanations that support the most likely option.\n\
Note that:\n\
* there is always one option that is correct and more likely than the others.\n\
* the explanations must support only the most likely option and refute all the others.\n\
* the explanations must be simple and concise (max 15 words).\n\
Do you understand the task?";

pub const QA_SYSTEM_TEMPLATE: &str = "You are a helpful assistant for question answering.\n\
You are given a question and {num_choices} choices (labeled {labels}).\n\
Your task is to choose the label corresponding to the best answer for the question.\n\
Do you understand the task?";

pub const INFORMED_SYSTEM_TEMPLATE: &str = "You are a helpful assistant for question answering.\n\
You are given a question, {num_choices} choices (labeled {labels}) and a list of explanations.\n\
Your task is to choose the label corresponding to the best answer for the question based on the given explanations.\n\
Do you understand the task?";

pub const SILVER_SYSTEM_TEMPLATE: &str = "You are a helpful assistant for question answering.\n\
You are given a question requiring commonsense knowledge to be solved, together with {num_choices_word} possible choices (labeled {labels}) and the label corresponding to the correct answer.\n\
For each choice, generate a sentence with explicit commonsense knowledge that supports or refutes the choice.\n\
The format of the generated knowledge should be in the following form:\n\
{format_lines}";

/// `A`, `A and B`, `A, B and C`, ...
pub fn label_list(labels: &[char]) -> String {
    match labels {
        [] => String::new(),
        [only] => only.to_string(),
        [init @ .., last] => {
            let head: Vec<String> = init.iter().map(char::to_string).collect();
            format!("{} and {last}", head.join(", "))
        }
    }
}

/// English word for small counts, digits otherwise.
pub fn count_word(n: usize) -> String {
    const WORDS: [&str; 21] = [
        "zero",
        "one",
        "two",
        "three",
        "four",
        "five",
        "six",
        "seven",
        "eight",
        "nine",
        "ten",
        "eleven",
        "twelve",
        "thirteen",
        "fourteen",
        "fifteen",
        "sixteen",
        "seventeen",
        "eighteen",
        "nineteen",
        "twenty",
    ];
    WORDS
        .get(n)
        .map_or_else(|| n.to_string(), |w| w.to_string())
}

/// One `X. text` line per choice.
pub fn choice_lines(choices: &[Choice]) -> String {
    choices
        .iter()
        .map(|c| format!("{}. {}", c.label, c.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn question_block(question: &str, choices: &[Choice]) -> String {
    format!("Question:\n{question}\nChoices:\n{}", choice_lines(choices))
}

/// Fill the template slots from a choice list.
pub fn fill_template(template: &str, choices: &[Choice]) -> String {
    let labels: Vec<char> = choices.iter().map(|c| c.label).collect();
    let format_lines = labels
        .iter()
        .map(|l| format!("{l}. ..."))
        .collect::<Vec<_>>()
        .join("\n");
    template
        .replace("{num_choices_word}", &count_word(choices.len()))
        .replace("{num_choices}", &choices.len().to_string())
        .replace("{labels}", &label_list(&labels))
        .replace("{format_lines}", &format_lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::labeled_choices;

    #[test]
    fn label_lists() {
        assert_eq!(label_list(&['A', 'B']), "A and B");
        assert_eq!(label_list(&['A', 'B', 'C']), "A, B and C");
        assert_eq!(label_list(&['A', 'B', 'C', 'D', 'E']), "A, B, C, D and E");
    }

    #[test]
    fn count_words() {
        assert_eq!(count_word(3), "three");
        assert_eq!(count_word(5), "five");
        assert_eq!(count_word(26), "26");
    }

    #[test]
    fn five_choice_qa_system_text() {
        let choices = labeled_choices(["a", "b", "c", "d", "e"]);
        assert_eq!(
            fill_template(QA_SYSTEM_TEMPLATE, &choices),
            "You are a helpful assistant for question answering.\n\
             You are given a question and 5 choices (labeled A, B, C, D and E).\n\
             Your task is to choose the label corresponding to the best answer for the question.\n\
             Do you understand the task?"
        );
    }

    #[test]
    fn silver_format_lines_follow_count() {
        let text = fill_template(SILVER_SYSTEM_TEMPLATE, &labeled_choices(["x", "y", "z"]));
        assert!(text.contains("three possible choices (labeled A, B and C)"));
        assert!(text.ends_with("following form:\nA. ...\nB. ...\nC. ..."));
    }
}
