//! Character-level lexing shared by the canonical tokenizer and the SQL front end.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LexemeKind {
    /// Identifiers, keywords, qualified names (`t.c`) and bucket keys.
    Word,
    /// Integer or decimal literal, optionally negative.
    Number,
    /// Single-quoted string literal. `text` keeps the quotes.
    Str,
    /// Operators and punctuation.
    Punct,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexeme {
    pub kind: LexemeKind,
    pub text: String,
    /// 1-based character column of the first character.
    pub column: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LexError {
    #[error("unexpected character {ch:?} at column {column}")]
    UnexpectedChar { ch: char, column: usize },
    #[error("unterminated string literal starting at column {column}")]
    UnterminatedString { column: usize },
}

impl LexError {
    pub fn column(&self) -> usize {
        match self {
            LexError::UnexpectedChar { column, .. } | LexError::UnterminatedString { column } => {
                *column
            }
        }
    }
}

fn is_word_start(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

/// Splits `input` into lexemes. Whitespace is insignificant.
pub fn lex(input: &str) -> Result<Vec<Lexeme>, LexError> {
    let chars: Vec<char> = input.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = i + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if is_word_start(c) || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            i += 1;
            while i < chars.len() && is_word_char(chars[i]) {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            let kind = if looks_numeric(&text) {
                LexemeKind::Number
            } else if c == '-' {
                return Err(LexError::UnexpectedChar { ch: '-', column });
            } else {
                LexemeKind::Word
            };
            out.push(Lexeme { kind, text, column });
            continue;
        }
        if c == '\'' {
            let start = i;
            i += 1;
            loop {
                match chars.get(i) {
                    None => return Err(LexError::UnterminatedString { column }),
                    Some('\'') if chars.get(i + 1) == Some(&'\'') => i += 2,
                    Some('\'') => {
                        i += 1;
                        break;
                    }
                    Some(_) => i += 1,
                }
            }
            let text: String = chars[start..i].iter().collect();
            out.push(Lexeme { kind: LexemeKind::Str, text, column });
            continue;
        }
        let two: Option<String> = chars.get(i + 1).map(|d| [c, *d].iter().collect());
        if let Some(op) = two.filter(|s| matches!(s.as_str(), "!=" | "<>" | "<=" | ">=")) {
            out.push(Lexeme { kind: LexemeKind::Punct, text: op, column });
            i += 2;
            continue;
        }
        if matches!(c, '=' | '<' | '>' | '*' | ',' | '(' | ')' | ';') {
            out.push(Lexeme { kind: LexemeKind::Punct, text: c.to_string(), column });
            i += 1;
            continue;
        }
        return Err(LexError::UnexpectedChar { ch: c, column });
    }
    Ok(out)
}

pub(crate) fn looks_numeric(text: &str) -> bool {
    let body = text.strip_prefix('-').unwrap_or(text);
    !body.is_empty()
        && body.chars().next().is_some_and(|c| c.is_ascii_digit())
        && body.chars().all(|c| c.is_ascii_digit() || c == '.')
        && body.matches('.').count() <= 1
        && !body.ends_with('.')
}

/// Unquotes a string literal lexeme (`'it''s'` -> `it's`).
pub fn unquote(text: &str) -> String {
    let inner = text
        .strip_prefix('\'')
        .and_then(|s| s.strip_suffix('\''))
        .unwrap_or(text);
    inner.replace("''", "'")
}

pub fn quote(value: &str) -> String {
    format!("'{}'", value.replace('\'', "''"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(s: &str) -> Vec<String> {
        lex(s).unwrap().into_iter().map(|l| l.text).collect()
    }

    #[test]
    fn splits_canonical_query() {
        assert_eq!(
            texts("FROM TITLE SELECT * WHERE ID = 1"),
            ["FROM", "TITLE", "SELECT", "*", "WHERE", "ID", "=", "1"]
        );
    }

    #[test]
    fn qualified_names_and_operators() {
        assert_eq!(
            texts("t.a>=3 AND t.b!='x''y' AND COUNT(t.c)<-2.5"),
            ["t.a", ">=", "3", "AND", "t.b", "!=", "'x''y'", "AND", "COUNT", "(", "t.c", ")", "<", "-2.5"]
        );
    }

    #[test]
    fn reports_column_of_bad_char() {
        let err = lex("FROM @@@").unwrap_err();
        assert_eq!(err.column(), 6);
    }

    #[test]
    fn unterminated_string() {
        assert!(matches!(lex("a = 'abc"), Err(LexError::UnterminatedString { column: 5 })));
    }

    #[test]
    fn quote_roundtrip() {
        assert_eq!(unquote(&quote("it's")), "it's");
    }

    #[test]
    fn numeric_classification() {
        assert!(looks_numeric("12"));
        assert!(looks_numeric("-1.5"));
        assert!(!looks_numeric("1.2.3"));
        assert!(!looks_numeric("t.a"));
        assert!(!looks_numeric("K0"));
    }
}
