//! Fixed toy vocabulary and prompt templates.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::color::ColorSpec;
use crate::error::{PvpError, Result};
use crate::universe::ObjectSpec;

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    Color,
    Size,
}

impl Task {
    pub fn label(self) -> &'static str {
        match self {
            Task::Color => "color",
            Task::Size => "size",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptKind {
    /// "this"-style prompt: asks about the rendered image.
    This,
    /// "most"-style prompt: asks about the general case.
    Most,
}

impl PromptKind {
    pub fn label(self) -> &'static str {
        match self {
            PromptKind::This => "this",
            PromptKind::Most => "most",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Rendered attribute matches the canonical one.
    Wk,
    /// Rendered attribute contradicts the canonical one.
    Cf,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Wk => "wk",
            Variant::Cf => "cf",
        }
    }
}

const TEMPLATE_WORDS: &[&str] = &[
    "what", "color", "is", "are", "this", "most", "which", "bigger", "in", "image", "or",
    "cases", "?",
];

/// Token table: answer cue first, then template words, palette color names,
/// and object names. Ids are assigned in that fixed order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
    n_colors: usize,
    n_objects: usize,
}

impl Vocab {
    /// The answer-cue token terminates every prompt; its position is the
    /// "last text token" where states are read and steered.
    pub const ANSWER_CUE: &'static str = "<ans>";

    pub fn build(palette: &[ColorSpec], universe: &[ObjectSpec]) -> Result<Self> {
        let mut tokens = vec![Self::ANSWER_CUE.to_string()];
        tokens.extend(TEMPLATE_WORDS.iter().map(|w| w.to_string()));
        tokens.extend(palette.iter().map(|c| c.name.clone()));
        tokens.extend(universe.iter().map(|o| o.name.clone()));
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(PvpError::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self {
            tokens,
            index,
            n_colors: palette.len(),
            n_objects: universe.len(),
        })
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| PvpError::Vocab(token.to_string()))
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| PvpError::Vocab(format!("<id {id}>")))
    }

    pub fn answer_cue(&self) -> TokenId {
        0
    }

    /// Token id of palette color `index`.
    pub fn color_token(&self, index: usize) -> Result<TokenId> {
        if index >= self.n_colors {
            return Err(PvpError::Vocab(format!("<color {index}>")));
        }
        Ok((1 + TEMPLATE_WORDS.len() + index) as TokenId)
    }

    /// Token id of object `index`.
    pub fn object_token(&self, index: usize) -> Result<TokenId> {
        if index >= self.n_objects {
            return Err(PvpError::Vocab(format!("<object {index}>")));
        }
        Ok((1 + TEMPLATE_WORDS.len() + self.n_colors + index) as TokenId)
    }

    fn encode(&self, words: &[&str]) -> Result<Vec<TokenId>> {
        words.iter().map(|w| self.id(w)).collect()
    }
}

/// Build the fixed prompt for a task and prompt kind. Color prompts take one
/// object, size prompts two; the sequence always ends with the answer cue.
pub fn build_prompt(
    vocab: &Vocab,
    task: Task,
    kind: PromptKind,
    objects: &[&str],
) -> Result<Vec<TokenId>> {
    match (task, objects) {
        (Task::Color, [obj]) => {
            let words: Vec<&str> = match kind {
                PromptKind::This => vec!["what", "color", "is", "this", obj, "?", Vocab::ANSWER_CUE],
                PromptKind::Most => vec!["what", "color", "are", "most", obj, "?", Vocab::ANSWER_CUE],
            };
            vocab.encode(&words)
        }
        (Task::Size, [a, b]) => {
            let words: Vec<&str> = match kind {
                PromptKind::This => vec![
                    "which", "is", "bigger", "in", "this", "image", a, "or", b, "?",
                    Vocab::ANSWER_CUE,
                ],
                PromptKind::Most => vec![
                    "which", "is", "bigger", "in", "most", "cases", a, "or", b, "?",
                    Vocab::ANSWER_CUE,
                ],
            };
            vocab.encode(&words)
        }
        (Task::Color, objs) => Err(PvpError::Argument(format!(
            "color prompt takes exactly 1 object, got {}",
            objs.len()
        ))),
        (Task::Size, objs) => Err(PvpError::Argument(format!(
            "size prompt takes exactly 2 objects, got {}",
            objs.len()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::default_palette;
    use crate::universe::build_universe;

    fn vocab() -> Vocab {
        let palette = default_palette();
        let universe = build_universe(1, 8, &palette).unwrap();
        Vocab::build(&palette, &universe).unwrap()
    }

    #[test]
    fn prompts_end_with_answer_cue() {
        let v = vocab();
        for (task, objs) in [
            (Task::Color, vec!["strawberry"]),
            (Task::Size, vec!["strawberry", "cherry"]),
        ] {
            for kind in [PromptKind::This, PromptKind::Most] {
                let toks = build_prompt(&v, task, kind, &objs).unwrap();
                assert_eq!(*toks.last().unwrap(), v.answer_cue());
            }
        }
    }

    #[test]
    fn this_and_most_differ_only_in_template_slots() {
        let v = vocab();
        let this = build_prompt(&v, Task::Color, PromptKind::This, &["strawberry"]).unwrap();
        let most = build_prompt(&v, Task::Color, PromptKind::Most, &["strawberry"]).unwrap();
        assert_eq!(this.len(), most.len());
        let diffs: Vec<usize> = (0..this.len()).filter(|&i| this[i] != most[i]).collect();
        assert_eq!(diffs, vec![2, 3]);

        let this = build_prompt(&v, Task::Size, PromptKind::This, &["plum", "carrot"]).unwrap();
        let most = build_prompt(&v, Task::Size, PromptKind::Most, &["plum", "carrot"]).unwrap();
        let diffs: Vec<usize> = (0..this.len()).filter(|&i| this[i] != most[i]).collect();
        assert_eq!(diffs, vec![4, 5]);
    }

    #[test]
    fn token_ids_round_trip() {
        let v = vocab();
        for id in 0..v.len() as TokenId {
            let tok = v.token(id).unwrap().to_string();
            assert_eq!(v.id(&tok).unwrap(), id);
        }
    }

    #[test]
    fn unknown_object_is_a_vocab_error() {
        let v = vocab();
        let err = build_prompt(&v, Task::Color, PromptKind::This, &["zeppelin"]);
        assert!(matches!(err, Err(PvpError::Vocab(_))));
    }

    #[test]
    fn arity_is_enforced() {
        let v = vocab();
        assert!(build_prompt(&v, Task::Color, PromptKind::This, &["plum", "carrot"]).is_err());
        assert!(build_prompt(&v, Task::Size, PromptKind::This, &["plum"]).is_err());
    }
}
