//! Lossless ABC tokenizer.
//!
//! Every byte of the input lands in exactly one token, so joining the
//! lexemes reproduces the source. Whitespace, comments and line
//! continuations become [`TokenKind::Separator`] tokens; anything the parser
//! does not interpret is kept as an opaque [`TokenKind::Decoration`].

use std::ops::Range;

use serde::Serialize;

use super::AbcError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenKind {
    /// Any information field line other than K/M/L (X:, T:, C:, V:, Q:, ...).
    HeaderField,
    Key,
    Meter,
    UnitLength,
    Note,
    Rest,
    ChordOpen,
    /// `]` plus the chord length multiplier, e.g. `]2`.
    ChordClose,
    Barline,
    Tuplet,
    Tie,
    BrokenRhythm,
    Decoration,
    InlineField,
    Separator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AbcToken {
    pub kind: TokenKind,
    pub lexeme: String,
    /// Byte range in the source text.
    pub span: Range<usize>,
}

/// Fields that may appear as their own line inside a tune body.
const BODY_FIELDS: &str = "IKLMmNPQRrsTUVWwX";

pub fn tokenize_abc(text: &str) -> Result<Vec<AbcToken>, AbcError> {
    Lexer::new(text, false).run()
}

/// Tokenizes music without a header block, e.g. a single measure fragment.
pub fn tokenize_body(text: &str) -> Result<Vec<AbcToken>, AbcError> {
    Lexer::new(text, true).run()
}

pub fn detokenize(tokens: &[AbcToken]) -> String {
    tokens.iter().map(|t| t.lexeme.as_str()).collect()
}

fn field_kind(letter: u8) -> TokenKind {
    match letter {
        b'K' => TokenKind::Key,
        b'M' => TokenKind::Meter,
        b'L' => TokenKind::UnitLength,
        _ => TokenKind::HeaderField,
    }
}

fn is_field_line(line: &str, allowed: Option<&str>) -> bool {
    let b = line.as_bytes();
    b.len() >= 2
        && b[0].is_ascii_alphabetic()
        && b[1] == b':'
        && allowed.is_none_or(|set| set.as_bytes().contains(&b[0]))
}

struct Lexer<'a> {
    src: &'a str,
    in_body: bool,
    tokens: Vec<AbcToken>,
    chord_open: Option<usize>,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str, in_body: bool) -> Self {
        Self { src, in_body, tokens: Vec::new(), chord_open: None }
    }

    fn push(&mut self, kind: TokenKind, range: Range<usize>) {
        // Merge adjacent separators so whitespace runs stay one token.
        if kind == TokenKind::Separator {
            if let Some(last) = self.tokens.last_mut() {
                if last.kind == TokenKind::Separator && last.span.end == range.start {
                    last.lexeme.push_str(&self.src[range.clone()]);
                    last.span.end = range.end;
                    return;
                }
            }
        }
        self.tokens.push(AbcToken { kind, lexeme: self.src[range.clone()].to_string(), span: range });
    }

    fn run(mut self) -> Result<Vec<AbcToken>, AbcError> {
        let mut pos = 0;
        let mut line_no = 0;
        while pos < self.src.len() {
            let rest = &self.src[pos..];
            let line_len = rest.find('\n').unwrap_or(rest.len());
            let mut content_end = pos + line_len;
            if content_end > pos && self.src.as_bytes()[content_end - 1] == b'\r' {
                content_end -= 1;
            }
            self.line(pos, content_end, line_no)?;
            let next = (pos + line_len + 1).min(self.src.len());
            if content_end < next {
                self.push(TokenKind::Separator, content_end..next);
            }
            pos = next;
            line_no += 1;
        }
        if let Some(at) = self.chord_open {
            return Err(AbcError::UnbalancedChord { offset: at });
        }
        Ok(self.tokens)
    }

    fn line(&mut self, start: usize, end: usize, line_no: usize) -> Result<(), AbcError> {
        let line = &self.src[start..end];
        if line.is_empty() {
            return Ok(());
        }
        let trimmed = line.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            self.push(TokenKind::Separator, start..end);
            return Ok(());
        }
        if !self.in_body {
            if !is_field_line(line, None) {
                return Err(AbcError::MalformedHeader { line: line_no + 1, text: line.to_string() });
            }
            let letter = line.as_bytes()[0];
            self.push(field_kind(letter), start..end);
            if letter == b'K' {
                self.in_body = true;
            }
            return Ok(());
        }
        if is_field_line(line, Some(BODY_FIELDS)) {
            self.push(field_kind(line.as_bytes()[0]), start..end);
            return Ok(());
        }
        self.music(start, end)
    }

    fn music(&mut self, start: usize, end: usize) -> Result<(), AbcError> {
        let b = self.src.as_bytes();
        let mut i = start;
        while i < end {
            let c = b[i];
            let begin = i;
            match c {
                b' ' | b'\t' | b'`' | b'\\' => {
                    i += 1;
                    while i < end && matches!(b[i], b' ' | b'\t' | b'`') {
                        i += 1;
                    }
                    self.push(TokenKind::Separator, begin..i);
                }
                b'%' => {
                    self.push(TokenKind::Separator, begin..end);
                    i = end;
                }
                b'[' => {
                    if i + 2 < end && b[i + 1].is_ascii_alphabetic() && b[i + 2] == b':' {
                        match self.src[i..end].find(']') {
                            Some(close) => {
                                i += close + 1;
                                self.push(TokenKind::InlineField, begin..i);
                            }
                            None => return Err(AbcError::UnbalancedChord { offset: begin }),
                        }
                    } else if i + 1 < end && b[i + 1] == b'|' {
                        i = self.barline(i + 1, end);
                        self.push(TokenKind::Barline, begin..i);
                    } else if i + 1 < end && b[i + 1].is_ascii_digit() {
                        i += 1;
                        i = ending_digits(b, i, end);
                        self.push(TokenKind::Barline, begin..i);
                    } else {
                        if self.chord_open.is_some() {
                            return Err(AbcError::UnbalancedChord { offset: begin });
                        }
                        self.chord_open = Some(begin);
                        i += 1;
                        self.push(TokenKind::ChordOpen, begin..i);
                    }
                }
                b']' => {
                    i += 1;
                    if self.chord_open.take().is_some() {
                        i = length_suffix(b, i, end);
                        self.push(TokenKind::ChordClose, begin..i);
                    } else {
                        self.push(TokenKind::Decoration, begin..i);
                    }
                }
                b'|' => {
                    self.check_chord_closed()?;
                    i = self.barline(i, end);
                    self.push(TokenKind::Barline, begin..i);
                }
                b':' => {
                    if i + 1 < end && matches!(b[i + 1], b'|' | b':') {
                        self.check_chord_closed()?;
                        i = self.barline(i, end);
                        self.push(TokenKind::Barline, begin..i);
                    } else {
                        i += 1;
                        self.push(TokenKind::Decoration, begin..i);
                    }
                }
                b'^' | b'_' | b'=' | b'A'..=b'G' | b'a'..=b'g' => {
                    let mut j = i;
                    while j < end && matches!(b[j], b'^' | b'_' | b'=') && j - i < 2 {
                        j += 1;
                    }
                    if j < end && matches!(b[j], b'A'..=b'G' | b'a'..=b'g') {
                        j += 1;
                        while j < end && matches!(b[j], b'\'' | b',') {
                            j += 1;
                        }
                        i = length_suffix(b, j, end);
                        self.push(TokenKind::Note, begin..i);
                    } else {
                        i = j.max(i + 1);
                        self.push(TokenKind::Decoration, begin..i);
                    }
                }
                b'z' | b'x' | b'Z' | b'X' => {
                    i = length_suffix(b, i + 1, end);
                    self.push(TokenKind::Rest, begin..i);
                }
                b'(' => {
                    if i + 1 < end && b[i + 1].is_ascii_digit() {
                        i += 1;
                        while i < end && b[i].is_ascii_digit() {
                            i += 1;
                        }
                        // Optional ":q" and ":r" parts.
                        for _ in 0..2 {
                            if i < end && b[i] == b':' && !(i + 1 < end && b[i + 1] == b'|') {
                                i += 1;
                                while i < end && b[i].is_ascii_digit() {
                                    i += 1;
                                }
                            }
                        }
                        self.push(TokenKind::Tuplet, begin..i);
                    } else {
                        i += 1;
                        self.push(TokenKind::Decoration, begin..i);
                    }
                }
                b'-' => {
                    i += 1;
                    self.push(TokenKind::Tie, begin..i);
                }
                b'>' | b'<' => {
                    while i < end && b[i] == c {
                        i += 1;
                    }
                    self.push(TokenKind::BrokenRhythm, begin..i);
                }
                b'!' | b'+' | b'"' => {
                    i = match self.src[i + 1..end].find(c as char) {
                        Some(close) => i + 1 + close + 1,
                        None => i + 1,
                    };
                    self.push(TokenKind::Decoration, begin..i);
                }
                b'{' => {
                    i = match self.src[i..end].find('}') {
                        Some(close) => i + close + 1,
                        None => i + 1,
                    };
                    self.push(TokenKind::Decoration, begin..i);
                }
                _ => {
                    // Single opaque character; keep multi-byte chars whole.
                    let ch_len = self.src[i..].chars().next().map_or(1, char::len_utf8);
                    i += ch_len;
                    self.push(TokenKind::Decoration, begin..i);
                }
            }
        }
        Ok(())
    }

    fn check_chord_closed(&self) -> Result<(), AbcError> {
        match self.chord_open {
            Some(at) => Err(AbcError::UnbalancedChord { offset: at }),
            None => Ok(()),
        }
    }

    /// Consumes a barline starting at `i` (on `|` or `:`).
    fn barline(&self, mut i: usize, end: usize) -> usize {
        let b = self.src.as_bytes();
        while i < end && matches!(b[i], b'|' | b':') {
            i += 1;
        }
        if i < end && b[i] == b']' {
            i += 1;
        }
        ending_digits(b, i, end)
    }
}

fn ending_digits(b: &[u8], mut i: usize, end: usize) -> usize {
    if i < end && b[i].is_ascii_digit() {
        while i < end
            && (b[i].is_ascii_digit() || ((b[i] == b',' || b[i] == b'-') && i + 1 < end && b[i + 1].is_ascii_digit()))
        {
            i += 1;
        }
    }
    i
}

/// Consumes a note length like `3`, `/`, `3/2`, `//`.
fn length_suffix(b: &[u8], mut i: usize, end: usize) -> usize {
    while i < end && b[i].is_ascii_digit() {
        i += 1;
    }
    while i < end && b[i] == b'/' {
        i += 1;
        while i < end && b[i].is_ascii_digit() {
            i += 1;
        }
    }
    i
}
