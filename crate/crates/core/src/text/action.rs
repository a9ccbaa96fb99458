use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tokenizer::{detokenize, tokenize};
use crate::error::{Error, Result};

/// A system action such as `restaurant-book(people=4,time=19:30,day=monday)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionCall {
    pub name: String,
    pub slots: Vec<(String, String)>,
}

impl ActionCall {
    pub fn new<N: Into<String>>(name: N, slots: Vec<(String, String)>) -> Result<Self> {
        let call = ActionCall {
            name: name.into(),
            slots,
        };
        call.validate()?;
        Ok(call)
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::invalid("action name is empty"));
        }
        for (i, (slot, _)) in self.slots.iter().enumerate() {
            if slot.is_empty() {
                return Err(Error::invalid(format!("action {}: empty slot name", self.name)));
            }
            if self.slots[..i].iter().any(|(s, _)| s == slot) {
                return Err(Error::invalid(format!("action {}: duplicate slot {slot}", self.name)));
            }
        }
        Ok(())
    }

    /// Parses `name ( slot = value {, slot = value} )` from tokens.
    ///
    /// Values may span several tokens; they are rejoined with the
    /// tokenizer's canonical spacing.
    pub fn parse_tokens<S: AsRef<str>>(tokens: &[S]) -> Option<Self> {
        let toks: Vec<&str> = tokens.iter().map(|t| t.as_ref()).collect();
        let is_struct = |t: &str| matches!(t, "(" | ")" | "," | "=");
        let (&name, rest) = toks.split_first()?;
        if is_struct(name) {
            return None;
        }
        let inner = rest.strip_prefix(&["("])?.strip_suffix(&[")"])?;
        let mut slots = Vec::new();
        if !inner.is_empty() {
            for part in inner.split(|t| *t == ",") {
                let (&slot, after) = part.split_first()?;
                let value = after.strip_prefix(&["="])?;
                if is_struct(slot) || value.is_empty() || value.iter().any(|t| is_struct(t)) {
                    return None;
                }
                slots.push((slot.to_string(), detokenize(value)));
            }
        }
        ActionCall::new(name, slots).ok()
    }
}

impl fmt::Display for ActionCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.name)?;
        for (i, (slot, value)) in self.slots.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{slot}={value}")?;
        }
        f.write_str(")")
    }
}

impl FromStr for ActionCall {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ActionCall::parse_tokens(&tokenize(s)).ok_or_else(|| Error::invalid(format!("malformed action `{s}`")))
    }
}
