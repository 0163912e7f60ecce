//! Rule-based sentence splitting on terminal punctuation.
//!
//! A boundary is a run of `.`, `!`, `?` (optionally followed by closing
//! quotes/brackets) followed by whitespace and an uppercase letter, digit, or
//! opening quote. A small abbreviation stop-list plus single-letter initials
//! suppress false splits after `.`. Blank lines always force a boundary.

const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "st", "sr", "jr", "vs", "etc", "inc", "ltd", "co", "corp",
    "no", "fig", "al", "approx", "dept", "est", "mt", "gen", "col", "capt", "sgt", "rev", "hon",
    "pres", "gov", "sen", "rep", "ave", "blvd", "rd",
];

fn is_closing_trail(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}')
}

fn is_sentence_start(c: char) -> bool {
    c.is_uppercase() || c.is_ascii_digit() || matches!(c, '"' | '\'' | '(' | '\u{201c}' | '\u{2018}')
}

/// The word immediately preceding byte offset `end` (exclusive), without any
/// trailing dot.
fn word_before(chars: &[char], end: usize) -> String {
    let mut start = end;
    while start > 0 && !chars[start - 1].is_whitespace() {
        start -= 1;
    }
    chars[start..end].iter().collect()
}

fn looks_like_abbreviation(chars: &[char], dot_idx: usize) -> bool {
    let word = word_before(chars, dot_idx);
    if word.is_empty() {
        return false;
    }
    // Initials ("A.") and dotted acronyms ("U.S.") keep their sentence.
    if word.chars().count() == 1 && word.chars().all(|c| c.is_uppercase()) {
        return true;
    }
    if word.contains('.') {
        return true;
    }
    let lowered = word.to_lowercase();
    ABBREVIATIONS.contains(&lowered.as_str())
}

/// Splits `text` into an ordered list of sentences. Boundary whitespace is
/// trimmed; interior whitespace is preserved. Empty input yields an empty
/// list.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut sentences = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;

    let flush = |from: usize, to: usize, out: &mut Vec<String>| {
        let segment: String = chars[from..to].iter().collect();
        let trimmed = segment.trim();
        if !trimmed.is_empty() {
            out.push(trimmed.to_string());
        }
    };

    while i < n {
        let c = chars[i];

        // Blank line: hard paragraph boundary.
        if c == '\n' {
            let mut j = i + 1;
            let mut newlines = 1;
            while j < n && chars[j].is_whitespace() {
                if chars[j] == '\n' {
                    newlines += 1;
                }
                j += 1;
            }
            if newlines >= 2 {
                flush(start, i, &mut sentences);
                start = j;
                i = j;
                continue;
            }
        }

        if matches!(c, '.' | '!' | '?') {
            let punct_start = i;
            let mut j = i;
            while j < n && matches!(chars[j], '.' | '!' | '?') {
                j += 1;
            }
            while j < n && is_closing_trail(chars[j]) {
                j += 1;
            }
            // Candidate boundary only when whitespace follows the run.
            if j >= n {
                i = j;
                continue;
            }
            if !chars[j].is_whitespace() {
                i = j;
                continue;
            }
            let run: String = chars[punct_start..j.min(n)].iter().collect();
            let dot_only = run.chars().all(|c| c == '.' || is_closing_trail(c));
            if dot_only && looks_like_abbreviation(&chars, punct_start) {
                i = j;
                continue;
            }
            // Peek at the next non-whitespace character.
            let mut k = j;
            while k < n && chars[k].is_whitespace() {
                k += 1;
            }
            if k < n && !is_sentence_start(chars[k]) {
                i = j;
                continue;
            }
            flush(start, j, &mut sentences);
            start = k;
            i = k;
            continue;
        }

        i += 1;
    }
    flush(start, n, &mut sentences);
    sentences
}
