use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::action::ActionCall;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Assistant,
}

/// Where the text of a turn came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// Read from an annotated corpus.
    GroundTruth,
    /// Typed by a live user.
    UserTyped,
    /// Decoded by the model.
    ModelGenerated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<ActionCall>,
    /// Gold relevant triples as `[subject, relation, object]` surface forms.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relevant: Vec<[String; 3]>,
    pub provenance: Provenance,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Turn {
            speaker: Speaker::User,
            text: text.into(),
            action: None,
            relevant: Vec::new(),
            provenance: Provenance::GroundTruth,
        }
    }

    pub fn assistant(text: impl Into<String>, action: Option<ActionCall>) -> Self {
        Turn {
            speaker: Speaker::Assistant,
            text: text.into(),
            action,
            relevant: Vec::new(),
            provenance: Provenance::GroundTruth,
        }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialog {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Dialog {
    /// Checks that turns alternate starting with the user and that
    /// assistant turns carry text. Returns the offending field on failure.
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::User } else { Speaker::Assistant };
            if turn.speaker != expected {
                return Err((
                    format!("turns[{i}].speaker"),
                    format!("expected {expected:?}; turns must alternate starting with the user"),
                ));
            }
            if turn.speaker == Speaker::Assistant && turn.text.trim().is_empty() {
                return Err((format!("turns[{i}].text"), "assistant turn has no text".into()));
            }
        }
        Ok(())
    }

    /// Indices of assistant turns; each one is a training example.
    pub fn assistant_turns(&self) -> impl Iterator<Item = usize> + '_ {
        self.turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.speaker == Speaker::Assistant)
            .map(|(i, _)| i)
    }

    pub fn to_json(&self) -> Value {
        let turns: Vec<Value> = self
            .turns
            .iter()
            .map(|t| {
                let mut m = Map::new();
                m.insert("speaker".into(), json!(t.speaker));
                m.insert("text".into(), json!(t.text));
                if let Some(a) = &t.action {
                    m.insert("action".into(), json!(a.to_string()));
                }
                if !t.relevant.is_empty() {
                    m.insert("relevant".into(), json!(t.relevant));
                }
                Value::Object(m)
            })
            .collect();
        json!({ "id": self.id, "turns": turns })
    }
}

/// Reads a dialog corpus: either a JSON array of records or one JSON
/// record per line. Each record is
/// `{id, turns: [{speaker: "user"|"assistant", text, action?, relevant?}]}`.
pub fn load_dialogs(path: &Path) -> Result<Vec<Dialog>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dialogs(&body, path)
}

pub fn parse_dialogs(body: &str, path: &Path) -> Result<Vec<Dialog>> {
    let schema = |record: String, field: &str, message: String| Error::Schema {
        path: path.to_path_buf(),
        record,
        field: field.to_string(),
        message,
    };
    let records: Vec<Value> = if body.trim_start().starts_with('[') {
        serde_json::from_str(body).map_err(|e| schema("-".into(), "-", e.to_string()))?
    } else {
        body.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| serde_json::from_str(l).map_err(|e| schema(format!("line {}", n + 1), "-", e.to_string())))
            .collect::<Result<_>>()?
    };
    records
        .iter()
        .enumerate()
        .map(|(i, r)| parse_record(i, r).map_err(|(rec, field, msg)| schema(rec, &field, msg)))
        .collect()
}

type RecordError = (String, String, String);

fn parse_record(index: usize, rec: &Value) -> std::result::Result<Dialog, RecordError> {
    let label = |id: &str| if id.is_empty() { format!("#{index}") } else { format!("#{index} ({id})") };
    let err = |id: &str, field: &str, msg: &str| (label(id), field.to_string(), msg.to_string());

    let obj = rec.as_object().ok_or_else(|| err("", "-", "record is not an object"))?;
    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err(err("", "id", "must be a string")),
        None => return Err(err("", "id", "missing")),
    };
    let turns_v = obj
        .get("turns")
        .ok_or_else(|| err(&id, "turns", "missing"))?
        .as_array()
        .ok_or_else(|| err(&id, "turns", "must be an array"))?;

    let mut turns = Vec::with_capacity(turns_v.len());
    for (ti, tv) in turns_v.iter().enumerate() {
        let f = |name: &str| format!("turns[{ti}].{name}");
        let t = tv.as_object().ok_or_else(|| err(&id, &format!("turns[{ti}]"), "must be an object"))?;
        let speaker = match t.get("speaker").and_then(Value::as_str) {
            Some("user") => Speaker::User,
            Some("assistant") => Speaker::Assistant,
            Some(other) => return Err(err(&id, &f("speaker"), &format!("unknown speaker `{other}`"))),
            None => return Err(err(&id, &f("speaker"), "missing")),
        };
        let text = t
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| err(&id, &f("text"), "missing or not a string"))?
            .to_string();
        let action = match t.get("action") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) if s.trim().is_empty() => None,
            Some(Value::String(s)) => Some(s.parse::<ActionCall>().map_err(|e| err(&id, &f("action"), &e.to_string()))?),
            Some(_) => return Err(err(&id, &f("action"), "must be a string")),
        };
        let relevant = match t.get("relevant") {
            None | Some(Value::Null) => Vec::new(),
            Some(v) => serde_json::from_value::<Vec<[String; 3]>>(v.clone())
                .map_err(|e| err(&id, &f("relevant"), &format!("expected [[subject, relation, object], ...]: {e}")))?,
        };
        if speaker == Speaker::User && (action.is_some() || !relevant.is_empty()) {
            return Err(err(&id, &f("action"), "only assistant turns may carry actions or relevant triples"));
        }
        turns.push(Turn {
            speaker,
            text,
            action,
            relevant,
            provenance: Provenance::GroundTruth,
        });
    }
    let dialog = Dialog { id: id.clone(), turns };
    dialog.validate().map_err(|(field, msg)| err(&id, &field, &msg))?;
    Ok(dialog)
}

/// Writes dialogs one JSON record per line.
pub fn save_dialogs(path: &Path, dialogs: &[Dialog]) -> Result<()> {
    let mut body = String::new();
    for d in dialogs {
        body.push_str(&d.to_json().to_string());
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}
