//! Tokenization, vocabulary, dialog corpora, and the sequence formats the
//! model reads and writes.

mod action;
mod dialog;
mod tokenizer;
mod vocab;

pub use action::ActionCall;
pub use dialog::{load_dialogs, parse_dialogs, save_dialogs, Dialog, Provenance, Speaker, Turn};
pub use tokenizer::{canonicalize, detokenize, tokenize, PUNCTUATION};
pub use vocab::{
    is_special, TokenId, Vocabulary, ACTION, ASSISTANT, BOS, EOS, PAD, RESPONSE, SPECIALS, UNK, USER,
};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_HISTORY: usize = 512;

/// Builds a vocabulary over dialog text, rendered actions, and extra
/// strings such as KB triple surface forms.
pub fn build_vocab<'a, I>(dialogs: &[Dialog], extra: I, min_count: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut texts: Vec<String> = Vec::new();
    for d in dialogs {
        for t in &d.turns {
            texts.push(t.text.clone());
            if let Some(a) = &t.action {
                texts.push(a.to_string());
            }
        }
    }
    texts.extend(extra.into_iter().map(str::to_string));
    Vocabulary::build(texts, min_count)
}

/// Serializes a history prefix as
/// `<user> u1 <assistant> a1 ... <user> uN`.
///
/// When the result exceeds `max_len`, whole turns are dropped from the left.
/// If the final user turn alone is too long, its leftmost tokens are cut.
pub fn encode_history(turns: &[Turn], vocab: &Vocabulary, max_len: usize) -> Result<Vec<TokenId>> {
    let last = turns.last().ok_or_else(|| Error::invalid("history is empty"))?;
    if last.speaker != Speaker::User {
        return Err(Error::invalid("history must end with a user turn"));
    }
    if max_len < 2 {
        return Err(Error::invalid("max history length must allow a delimiter and a token"));
    }
    let mut segments: Vec<Vec<TokenId>> = Vec::with_capacity(turns.len());
    for t in turns {
        let delim = match t.speaker {
            Speaker::User => USER,
            Speaker::Assistant => ASSISTANT,
        };
        let mut seg = vec![delim];
        seg.extend(vocab.encode(&t.text));
        segments.push(seg);
    }
    let mut total = 0;
    let mut first = segments.len();
    while first > 0 && total + segments[first - 1].len() <= max_len {
        first -= 1;
        total += segments[first].len();
    }
    if first == segments.len() {
        let seg = segments.last().expect("nonempty");
        let mut out = vec![USER];
        out.extend_from_slice(&seg[seg.len() - (max_len - 1)..]);
        return Ok(out);
    }
    Ok(segments[first..].concat())
}

/// `[<action> action-tokens] <response> response-tokens <eos>`; the action
/// segment is omitted when there is no action.
pub fn serialize_target(action: Option<&ActionCall>, response: &str, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    let resp = vocab.encode(response);
    if resp.is_empty() {
        return Err(Error::invalid("target response is empty"));
    }
    let mut out = Vec::with_capacity(resp.len() + 16);
    if let Some(a) = action {
        out.push(ACTION);
        out.extend(vocab.encode(&a.to_string()));
    }
    out.push(RESPONSE);
    out.extend(resp);
    out.push(EOS);
    Ok(out)
}

/// Result of splitting a decoded sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedOutput {
    pub action: Option<ActionCall>,
    /// Action segment text as generated, present whenever an action
    /// delimiter was emitted.
    pub raw_action: Option<String>,
    pub response: String,
    /// An action segment was present but did not parse.
    pub malformed_action: bool,
}

/// Splits a decoded sequence at the response delimiter and parses the
/// action segment. Never fails; parse problems set `malformed_action`.
pub fn parse_output(tokens: &[TokenId], vocab: &Vocabulary) -> ParsedOutput {
    let end = tokens.iter().position(|&t| t == EOS).unwrap_or(tokens.len());
    let toks = &tokens[..end];
    let words = |ids: &[TokenId]| -> Vec<String> {
        ids.iter()
            .filter(|&&t| !is_special(t) || t == UNK)
            .map(|&t| vocab.token(t).to_string())
            .collect()
    };
    let resp_at = toks.iter().position(|&t| t == RESPONSE);
    let (head, response_ids) = match resp_at {
        Some(i) => (&toks[..i], &toks[i + 1..]),
        None => match toks.iter().position(|&t| t == ACTION) {
            Some(_) => (toks, &toks[toks.len()..]),
            None => (&toks[..0], toks),
        },
    };
    let response = detokenize(&words(response_ids));

    let head: Vec<TokenId> = head.iter().copied().filter(|&t| t != BOS && t != PAD).collect();
    if head.is_empty() {
        return ParsedOutput {
            action: None,
            raw_action: None,
            response,
            malformed_action: false,
        };
    }
    let (raw_action, action) = if head[0] == ACTION {
        let w = words(&head[1..]);
        let raw = detokenize(&w);
        let parsed = if head[1..].iter().any(|&t| is_special(t)) {
            None
        } else {
            ActionCall::parse_tokens(&w)
        };
        (Some(raw), parsed)
    } else {
        (Some(detokenize(&words(&head))), None)
    };
    ParsedOutput {
        malformed_action: action.is_none(),
        action,
        raw_action,
        response,
    }
}
