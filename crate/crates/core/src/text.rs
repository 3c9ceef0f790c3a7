//! Sentence segmentation, tokenization and text normalization.
//!
//! Every function here is a pure, deterministic function of its input. The
//! tokenizer is shared by triple cleaning, word counting, ontology matching
//! and BLEU, so all of them agree on what a "word" is.

use std::collections::HashSet;
use std::sync::OnceLock;

const ABBREVIATIONS: &str = include_str!("../data/abbrev.txt");

/// Characters that separate tokens and are then dropped.
const DROPPED_PUNCT: [char; 9] = ['.', ',', '?', '!', ':', ';', '"', '(', ')'];

const SENTENCE_FINAL: [char; 3] = ['.', '!', '?'];

/// Closing characters that may trail sentence-final punctuation (`He said "no."`).
const CLOSERS: [char; 5] = ['"', '\'', ')', ']', '\u{201d}'];

/// Opening characters stripped before an abbreviation lookup.
const OPENERS: [char; 5] = ['"', '\'', '(', '[', '\u{201c}'];

fn abbreviations() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        ABBREVIATIONS
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

/// Returns true when `word` (including its trailing period) is a known abbreviation
/// or a single-letter initial such as `j.`.
pub fn is_abbreviation(word: &str) -> bool {
    let word = word
        .trim_start_matches(OPENERS)
        .trim_end_matches(CLOSERS)
        .to_lowercase();
    if abbreviations().contains(word.as_str()) {
        return true;
    }
    let mut chars = word.chars();
    matches!((chars.next(), chars.next(), chars.next()), (Some(c), Some('.'), None) if c.is_alphabetic())
}

/// Lowercased word tokens of `text`.
///
/// Whitespace separates tokens. The characters `. , ? ! : ; " ( )` also
/// separate tokens and are dropped, except for a colon with a digit on both
/// sides (`12:30`). Apostrophes stay inside words.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut current = String::new();
        for (i, &c) in chars.iter().enumerate() {
            if DROPPED_PUNCT.contains(&c) {
                let keep = c == ':'
                    && i > 0
                    && chars[i - 1].is_ascii_digit()
                    && chars.get(i + 1).is_some_and(char::is_ascii_digit);
                if keep {
                    current.push(c);
                } else if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
            } else {
                current.extend(c.to_lowercase());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Tokens of `text` joined with single spaces.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Collapses every whitespace run to a single space and trims the ends.
pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Characters that make up a word for boundary checks.
pub fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Splits `raw_text` into trimmed, non-blank sentence strings.
///
/// A split happens after a run of `.`, `!` or `?` (plus any closing quotes or
/// brackets) that is followed by whitespace or the end of input. A run made
/// only of periods does not split when the word it ends is an abbreviation.
pub fn split_sentences(raw_text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut iter = raw_text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if !SENTENCE_FINAL.contains(&c) {
            continue;
        }
        let mut end = i + c.len_utf8();
        let mut only_periods = c == '.';
        while let Some(&(j, d)) = iter.peek() {
            if SENTENCE_FINAL.contains(&d) {
                only_periods &= d == '.';
            } else if !CLOSERS.contains(&d) {
                break;
            }
            end = j + d.len_utf8();
            iter.next();
        }
        let at_boundary = raw_text[end..]
            .chars()
            .next()
            .is_none_or(char::is_whitespace);
        if !at_boundary {
            continue;
        }
        if only_periods {
            let word_start = raw_text[..end].rfind(char::is_whitespace).map_or(0, |p| {
                p + raw_text[p..].chars().next().map_or(1, char::len_utf8)
            });
            if is_abbreviation(&raw_text[word_start.max(start)..end]) {
                continue;
            }
        }
        push_trimmed(&mut out, &raw_text[start..end]);
        start = end;
    }
    push_trimmed(&mut out, &raw_text[start..]);
    out
}

fn push_trimmed<'a>(out: &mut Vec<&'a str>, piece: &'a str) {
    let piece = piece.trim();
    if !piece.is_empty() {
        out.push(piece);
    }
}
