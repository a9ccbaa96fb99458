/// Characters emitted as standalone tokens.
pub const PUNCTUATION: &[char] = &['(', ')', ',', '=', ':', '?', '.', '!'];

/// Lowercases, splits on whitespace, and splits off [`PUNCTUATION`].
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        let mut cur = String::new();
        for ch in lower.chars() {
            if PUNCTUATION.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

fn is_digits(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

fn is_glue(s: &str) -> bool {
    s == ":" || s == "."
}

/// Joins tokens with single spaces, except that `:` and `.` between two
/// digit runs are glued back (`19 : 30` becomes `19:30`).
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = false;
    for (i, tok) in tokens.iter().enumerate() {
        let tok = tok.as_ref();
        let glued = is_glue(tok)
            && i > 0
            && i + 1 < tokens.len()
            && is_digits(tokens[i - 1].as_ref())
            && is_digits(tokens[i + 1].as_ref());
        if i > 0 && !glued && !glue_next {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = glued;
    }
    out
}

/// Text as the model sees it after a tokenize/detokenize round trip.
pub fn canonicalize(text: &str) -> String {
    detokenize(&tokenize(text))
}
