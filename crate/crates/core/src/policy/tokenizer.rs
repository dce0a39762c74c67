//! Whitespace/punctuation word tokenizer over a fixed vocabulary.

use std::collections::HashMap;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Words the surrogate knows. Everything else maps to `[UNK]`. The list is
/// part of the model format; append only.
const WORDS: &[&str] = &[
    "a",
    "an",
    "the",
    "to",
    "of",
    "in",
    "on",
    "at",
    "into",
    "onto",
    "from",
    "with",
    "for",
    "and",
    "or",
    "it",
    "its",
    "itself",
    "them",
    "they",
    "this",
    "that",
    "these",
    "those",
    "there",
    "here",
    "then",
    "by",
    "as",
    "be",
    "is",
    "are",
    "s",
    "should",
    "must",
    "will",
    "can",
    "could",
    "would",
    "need",
    "needs",
    "please",
    "now",
    "first",
    "next",
    "finally",
    "after",
    "before",
    "while",
    "until",
    "when",
    "if",
    "so",
    "up",
    "down",
    "over",
    "under",
    "above",
    "below",
    "near",
    "beside",
    "left",
    "right",
    "front",
    "back",
    "behind",
    "top",
    "bottom",
    "side",
    "middle",
    "center",
    "new",
    "other",
    "another",
    "same",
    "location",
    "place",
    "position",
    "spot",
    "area",
    "surface",
    "table",
    "counter",
    "sink",
    "stove",
    "burner",
    "rack",
    "board",
    "plate",
    "pot",
    "bowl",
    "cup",
    "mug",
    "spoon",
    "fork",
    "knife",
    "carrot",
    "sponge",
    "towel",
    "block",
    "cloth",
    "item",
    "items",
    "object",
    "objects",
    "thing",
    "things",
    "target",
    "utensil",
    "utensils",
    "tool",
    "tools",
    "task",
    "goal",
    "robot",
    "arm",
    "gripper",
    "hand",
    "end",
    "effector",
    "pick",
    "picks",
    "picked",
    "picking",
    "put",
    "puts",
    "placing",
    "placed",
    "move",
    "moves",
    "moving",
    "moved",
    "relocate",
    "relocating",
    "relocated",
    "grasp",
    "grasps",
    "grasping",
    "grab",
    "take",
    "takes",
    "carry",
    "carrying",
    "bring",
    "transport",
    "transfer",
    "lift",
    "lifting",
    "lower",
    "lowering",
    "set",
    "drop",
    "release",
    "releasing",
    "open",
    "close",
    "closed",
    "hold",
    "holding",
    "reach",
    "reaching",
    "approach",
    "manipulate",
    "manipulating",
    "complete",
    "completing",
    "execute",
    "perform",
    "order",
    "achieve",
    "make",
    "get",
    "go",
    "leave",
    "rest",
    "slide",
    "push",
    "pull",
    "turn",
    "rotate",
    "align",
    "descend",
    "raise",
    "drying",
    "cutting",
    "dish",
    "dishes",
    "kitchen",
    "carefully",
    "gently",
    "slowly",
    "precisely",
    "securely",
    "steady",
    "motion",
    "action",
    "actions",
    "sequence",
    "step",
    "steps",
    "way",
    "ensure",
    "using",
    "use",
    "one",
    "two",
    "three",
    "your",
    "you",
    "what",
    "where",
    "which",
    "all",
    "each",
    "every",
    "final",
    "initial",
    "current",
    "desired",
    "specified",
    "designated",
    "appropriate",
    "successfully",
    "safely",
    "toward",
    "towards",
    "across",
    "around",
    "inside",
    "out",
    "off",
    "away",
    "scene",
    "environment",
    "workspace",
    "nearby",
    "relocation",
    "placement",
    "grip",
    "secure",
    "deliver",
    "delivering",
    "shift",
    "shifting",
    "positioning",
];

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Build the fixed vocabulary padded to `base_vocab` entries with
    /// `[unused_k]` fillers.
    pub fn new(base_vocab: usize) -> Self {
        let mut vocab: Vec<String> = vec!["[PAD]".into(), "[UNK]".into()];
        let mut index = HashMap::new();
        for w in WORDS {
            if !index.contains_key(*w) && vocab.len() < base_vocab {
                index.insert((*w).to_string(), vocab.len() as u32);
                vocab.push((*w).to_string());
            }
        }
        while vocab.len() < base_vocab {
            vocab.push(format!("[unused_{}]", vocab.len()));
        }
        Self { vocab, index }
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    /// Lowercase, split on anything that is not ASCII alphanumeric.
    pub fn pieces(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_ascii_alphanumeric()).filter(|s| !s.is_empty()).map(str::to_ascii_lowercase)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        Self::pieces(text).map(|p| self.index.get(&p).copied().unwrap_or(UNK_ID)).collect()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }
}
