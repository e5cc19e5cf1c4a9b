/// Stand-in for answers that normalize to nothing.
pub const EMPTY_ANSWER: &str = "⟨empty⟩";

/// Text sent to embedding and NLI backends for an answer; blank answers
/// become [`EMPTY_ANSWER`] since backends reject blank input.
pub fn embedding_text(answer: &str) -> String {
    if answer.trim().is_empty() {
        EMPTY_ANSWER.to_string()
    } else {
        answer.to_string()
    }
}

/// Lowercases, strips punctuation, drops the articles "a", "an" and "the", and
/// collapses whitespace. Answers with nothing left become [`EMPTY_ANSWER`].
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let depunct: String = lowered
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    let words: Vec<&str> = depunct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect();
    if words.is_empty() {
        EMPTY_ANSWER.to_string()
    } else {
        words.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squad_style_normalization() {
        assert_eq!(normalize_answer("The Eiffel Tower."), "eiffel tower");
        assert_eq!(normalize_answer(""), EMPTY_ANSWER);
        assert_eq!(normalize_answer("PARIS"), normalize_answer("paris."));
        assert_eq!(normalize_answer("  a  cat,  an owl "), "cat owl");
        assert_eq!(normalize_answer("The."), EMPTY_ANSWER);
        assert_eq!(normalize_answer("theatre"), "theatre");
        assert_eq!(normalize_answer("U.S.A."), "usa");
        assert_eq!(normalize_answer("well-known"), "wellknown");
    }
}
