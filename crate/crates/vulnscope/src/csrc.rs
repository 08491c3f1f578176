//! Lightweight lexical analysis of C/C++ source shared by the graph builder
//! and the scanner. Nothing here parses C properly; these helpers blank out
//! the parts that confuse bracket matching (comments, string and char
//! literals, preprocessor lines) while preserving byte offsets and newlines,
//! so later passes can reason about structure positionally.

/// Replaces comment bodies and string/char literal contents with spaces.
/// The output has the same byte length as the input and every newline is
/// kept, so byte offsets and line numbers remain valid. Quote delimiters
/// stay; an unterminated literal ends at the line break.
pub(crate) fn blank_comments_and_strings(src: &str) -> String {
    #[derive(PartialEq)]
    enum State {
        Normal,
        LineComment,
        BlockComment,
        Str,
        Char,
    }
    let bytes = src.as_bytes();
    let mut out = bytes.to_vec();
    let mut state = State::Normal;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match state {
            State::Normal => match b {
                b'/' if bytes.get(i + 1) == Some(&b'/') => {
                    out[i] = b' ';
                    out[i + 1] = b' ';
                    state = State::LineComment;
                    i += 1;
                }
                b'/' if bytes.get(i + 1) == Some(&b'*') => {
                    out[i] = b' ';
                    out[i + 1] = b' ';
                    state = State::BlockComment;
                    i += 1;
                }
                b'"' => state = State::Str,
                b'\'' => state = State::Char,
                _ => {}
            },
            State::LineComment => {
                if b == b'\n' {
                    // A backslash right before the newline splices the next
                    // line into the comment.
                    if i > 0 && bytes[i - 1] == b'\\' {
                        // newline stays, comment continues
                    } else {
                        state = State::Normal;
                    }
                } else {
                    out[i] = b' ';
                }
            }
            State::BlockComment => {
                if b == b'*' && bytes.get(i + 1) == Some(&b'/') {
                    out[i] = b' ';
                    out[i + 1] = b' ';
                    state = State::Normal;
                    i += 1;
                } else if b != b'\n' {
                    out[i] = b' ';
                }
            }
            State::Str | State::Char => {
                let quote = if state == State::Str { b'"' } else { b'\'' };
                if b == b'\\' && i + 1 < bytes.len() && bytes[i + 1] != b'\n' {
                    out[i] = b' ';
                    out[i + 1] = b' ';
                    i += 1;
                } else if b == quote {
                    state = State::Normal;
                } else if b == b'\n' {
                    state = State::Normal; // unterminated literal
                } else {
                    out[i] = b' ';
                }
            }
        }
        i += 1;
    }
    // Blanking never touches multi-byte UTF-8 sequences partially: only
    // ASCII bytes are overwritten, and non-ASCII bytes inside literals are
    // replaced byte-for-byte with spaces.
    String::from_utf8(out).expect("blanking preserves UTF-8")
}

/// Additionally blanks preprocessor lines (including `\`-continuations) in
/// already comment-blanked text. Needed before brace counting: a
/// `#define WRAP(x) { ... }` would otherwise unbalance the file.
pub(crate) fn blank_preprocessor(blanked: &str) -> String {
    let bytes = blanked.as_bytes();
    let mut out = bytes.to_vec();
    let mut i = 0;
    while i < bytes.len() {
        let line_start = i;
        let mut j = i;
        while j < bytes.len() && bytes[j] != b'\n' {
            j += 1;
        }
        let first = bytes[line_start..j].iter().position(|&b| b != b' ' && b != b'\t');
        if first.map(|f| bytes[line_start + f]) == Some(b'#') {
            let mut k = line_start;
            loop {
                let mut end = k;
                while end < bytes.len() && bytes[end] != b'\n' {
                    end += 1;
                }
                let continued = end > k && bytes[end - 1] == b'\\';
                for cell in &mut out[k..end] {
                    *cell = b' ';
                }
                if continued && end < bytes.len() {
                    k = end + 1;
                } else {
                    j = end;
                    break;
                }
            }
        }
        i = j + 1;
    }
    String::from_utf8(out).expect("blanking preserves UTF-8")
}

/// Finds the matching close bracket for the open bracket at `open`, nesting
/// aware. `bytes[open]` must equal `open_ch`. Returns `None` if unbalanced.
pub(crate) fn match_forward(bytes: &[u8], open: usize, open_ch: u8, close_ch: u8) -> Option<usize> {
    debug_assert_eq!(bytes[open], open_ch);
    let mut depth = 0usize;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if b == open_ch {
            depth += 1;
        } else if b == close_ch {
            depth -= 1;
            if depth == 0 {
                return Some(i);
            }
        }
    }
    None
}

/// Scans forward from `from` for the end of a statement: the first `;` at
/// bracket depth zero, or the `}` matching a `{` opened at depth zero (a
/// compound statement). Returns the inclusive end index.
pub(crate) fn statement_end(bytes: &[u8], from: usize) -> Option<usize> {
    let mut paren = 0i32;
    let mut i = from;
    while i < bytes.len() {
        match bytes[i] {
            b'(' | b'[' => paren += 1,
            b')' | b']' => paren -= 1,
            b';' if paren <= 0 => return Some(i),
            b'{' if paren <= 0 => return match_forward(bytes, i, b'{', b'}'),
            b'}' if paren <= 0 => return None, // ran out of the enclosing block
            _ => {}
        }
        i += 1;
    }
    None
}

pub(crate) fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

/// A maximal `[A-Za-z0-9_]+` run in the source, with its byte offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct WordRun<'a> {
    pub start: usize,
    pub text: &'a str,
}

/// All word runs in (blanked) text, in source order.
pub(crate) fn word_runs(text: &str) -> Vec<WordRun<'_>> {
    let bytes = text.as_bytes();
    let mut runs = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if is_word_byte(bytes[i]) {
            let start = i;
            while i < bytes.len() && is_word_byte(bytes[i]) {
                i += 1;
            }
            runs.push(WordRun {
                start,
                text: &text[start..i],
            });
        } else {
            i += 1;
        }
    }
    runs
}

/// Index of the first non-whitespace byte at or after `from`.
pub(crate) fn skip_ws(bytes: &[u8], mut from: usize) -> usize {
    while from < bytes.len() && bytes[from].is_ascii_whitespace() {
        from += 1;
    }
    from
}

pub(crate) const C_KEYWORDS: &[&str] = &[
    "auto", "break", "case", "char", "const", "continue", "default", "do", "double", "else",
    "enum", "extern", "float", "for", "goto", "if", "inline", "int", "long", "register",
    "restrict", "return", "short", "signed", "sizeof", "static", "struct", "switch", "typedef",
    "union", "unsigned", "void", "volatile", "while",
];

/// Control keywords that seed CONTROL edges in the semantic graph.
pub(crate) const CONTROL_KEYWORDS: &[&str] = &[
    "if", "else", "for", "while", "switch", "return", "goto", "break", "continue",
];

pub(crate) fn is_c_keyword(word: &str) -> bool {
    C_KEYWORDS.contains(&word)
}

/// Valid C identifier: starts with a letter or underscore, not a keyword.
pub(crate) fn is_identifier(word: &str) -> bool {
    let mut chars = word.bytes();
    match chars.next() {
        Some(b) if b.is_ascii_alphabetic() || b == b'_' => {}
        _ => return false,
    }
    chars.all(is_word_byte) && !is_c_keyword(word)
}

/// 1-based line number of byte offset `off`.
pub(crate) fn line_of_offset(bytes: &[u8], off: usize) -> u32 {
    1 + bytes[..off.min(bytes.len())]
        .iter()
        .filter(|&&b| b == b'\n')
        .count() as u32
}
