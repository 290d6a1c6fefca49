//! Word-level tokenizer, prompt templates, and class-query rendering.
//!
//! Text is lowercased (ASCII) and split on whitespace and punctuation;
//! punctuation characters become their own tokens when the vocabulary holds
//! them and are dropped otherwise; unknown words map to `<unk>`. Everything
//! here is pure and immutable after load.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const PAD: u32 = 3;
pub const NUM_SPECIALS: u32 = 4;

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from plain tokens; the four specials are prepended
    /// at fixed indices 0-3.
    pub fn new<I: IntoIterator<Item = String>>(words: I) -> Result<Self> {
        let mut tokens: Vec<String> =
            vec!["<bos>".into(), "<eos>".into(), "<unk>".into(), "<pad>".into()];
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            index.insert(t.clone(), i as u32);
        }
        let mut any = false;
        for w in words {
            any = true;
            if index.contains_key(&w) {
                return Err(Error::DuplicateToken(w));
            }
            index.insert(w.clone(), tokens.len() as u32);
            tokens.push(w);
        }
        if !any {
            return Err(Error::EmptyVocabulary);
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Loads a UTF-8 vocabulary file, one token per line. Blank lines are
    /// rejected as part of the no-duplicates rule only if literally duplicated;
    /// an entirely empty file is an error.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut words = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line?;
            let t = line.trim();
            if !t.is_empty() {
                words.push(t.to_string());
            }
        }
        Self::new(words)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body: String = self.tokens[NUM_SPECIALS as usize..]
            .iter()
            .map(|t| format!("{t}\n"))
            .collect();
        crate::data::atomic_write(path, body.as_bytes())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lookup(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token_at(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Non-special tokens, in id order starting at id 4.
    pub fn words(&self) -> &[String] {
        &self.tokens[NUM_SPECIALS as usize..]
    }
}

/// Lowercases and splits into word/punctuation tokens; unknown words become
/// `<unk>`, unknown punctuation is dropped.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    let mut ids = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, ids: &mut Vec<u32>| {
        if !word.is_empty() {
            ids.push(vocab.lookup(word).unwrap_or(UNK));
            word.clear();
        }
    };
    for ch in text.chars() {
        let c = ch.to_ascii_lowercase();
        if c.is_whitespace() {
            flush(&mut word, &mut ids);
        } else if c.is_alphanumeric() {
            word.push(c);
        } else {
            flush(&mut word, &mut ids);
            if let Some(id) = vocab.lookup(&c.to_string()) {
                ids.push(id);
            }
        }
    }
    flush(&mut word, &mut ids);
    ids
}

/// Fixed text surrounding the class slot, shared across all classes.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub prefix: String,
    pub suffix: String,
}

impl PromptTemplate {
    pub fn new(name: &str, prefix: &str, suffix: &str) -> Self {
        PromptTemplate {
            name: name.into(),
            prefix: prefix.into(),
            suffix: suffix.into(),
        }
    }

    /// The standard prompt: "a photo of a [CLASS]."
    pub fn default_photo() -> Self {
        Self::new("default", "a photo of a", ".")
    }
}

/// The engineered per-dataset templates, keyed by dataset name; `default`
/// is "a photo of a [CLASS].".
pub fn builtin_templates() -> Vec<PromptTemplate> {
    vec![
        PromptTemplate::default_photo(),
        PromptTemplate::new("eurosat", "a centered satellite photo of", "."),
        PromptTemplate::new("stanford_cars", "a photo of a", "."),
        PromptTemplate::new("flowers102", "a photo of a", ", a type of flower."),
        PromptTemplate::new("oxford_pets", "a photo of a", ", a type of pet."),
        PromptTemplate::new("ucf101", "a photo of a person doing", "."),
        PromptTemplate::new("aircraft", "a photo of a", ", a type of aircraft."),
        PromptTemplate::new("dtd", "", "texture."),
        PromptTemplate::new("imagenet", "a photo of a", "."),
        PromptTemplate::new("caltech101", "a photo of a", "."),
        PromptTemplate::new("food101", "a photo of", ", a type of food."),
        PromptTemplate::new("sun397", "a photo of a", "."),
    ]
}

pub fn find_template(name: &str) -> Result<PromptTemplate> {
    builtin_templates()
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::UnknownTemplate(name.to_string()))
}

/// Loads a JSON array of {name, prefix, suffix} records.
pub fn load_templates(path: &Path) -> Result<Vec<PromptTemplate>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })
}

/// One position of a rendered query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeqItem {
    Vocab(u32),
    /// Class-specific learnable slot: row `class_id * m + slot` of the class
    /// table.
    ClassSlot { class_id: usize, slot: usize },
    /// Shared learnable context slot (prompt-context learning).
    ContextSlot { index: usize },
}

/// A rendered query: always exactly `context_len` items, `<bos>` first,
/// `<eos>` at `eos_index`, `<pad>` after.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    items: Vec<SeqItem>,
    eos_index: usize,
}

impl TokenSequence {
    fn assemble(middle: Vec<SeqItem>, prefix: &[u32], suffix: &[u32], context_len: usize) -> Result<Self> {
        let needed = 2 + prefix.len() + middle.len() + suffix.len();
        if needed > context_len {
            return Err(Error::ContextOverflow {
                needed,
                context: context_len,
            });
        }
        let mut items = Vec::with_capacity(context_len);
        items.push(SeqItem::Vocab(BOS));
        items.extend(prefix.iter().map(|&id| SeqItem::Vocab(id)));
        items.extend(middle);
        items.extend(suffix.iter().map(|&id| SeqItem::Vocab(id)));
        let eos_index = items.len();
        items.push(SeqItem::Vocab(EOS));
        while items.len() < context_len {
            items.push(SeqItem::Vocab(PAD));
        }
        Ok(TokenSequence { items, eos_index })
    }

    pub fn items(&self) -> &[SeqItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn eos_index(&self) -> usize {
        self.eos_index
    }

    /// True if any position is a learnable slot (class or context).
    pub fn has_learnable(&self) -> bool {
        self.items
            .iter()
            .any(|i| !matches!(i, SeqItem::Vocab(_)))
    }
}

/// Renders `<bos> prefix slot*m suffix <eos> pad...` for one class.
pub fn render_query(
    template: &PromptTemplate,
    class_id: usize,
    m: usize,
    vocab: &Vocabulary,
    context_len: usize,
) -> Result<TokenSequence> {
    let prefix = tokenize(&template.prefix, vocab);
    let suffix = tokenize(&template.suffix, vocab);
    let middle = (0..m)
        .map(|slot| SeqItem::ClassSlot { class_id, slot })
        .collect();
    TokenSequence::assemble(middle, &prefix, &suffix, context_len)
}

/// Renders the handcrafted-name version of a query (open-vocabulary path).
/// Fully out-of-vocabulary words are inserted as `<unk>` and reported in the
/// returned warning list.
pub fn render_named_query(
    template: &PromptTemplate,
    class_name: &str,
    vocab: &Vocabulary,
    context_len: usize,
) -> Result<(TokenSequence, Vec<String>)> {
    let prefix = tokenize(&template.prefix, vocab);
    let suffix = tokenize(&template.suffix, vocab);
    let name_ids = tokenize(class_name, vocab);
    let mut warnings = Vec::new();
    if name_ids.iter().any(|&id| id == UNK) {
        warnings.push(format!(
            "class name {class_name:?} contains out-of-vocabulary words"
        ));
    }
    let middle = name_ids.iter().map(|&id| SeqItem::Vocab(id)).collect();
    let seq = TokenSequence::assemble(middle, &prefix, &suffix, context_len)?;
    Ok((seq, warnings))
}

/// Renders a query whose prompt context is made of shared learnable slots:
/// `<bos> ctx*n_ctx [class tokens or slots] suffix <eos>`. Used by the
/// context-learning baseline; `class_part` supplies either the handcrafted
/// name tokens or class slots.
pub fn render_context_query(
    template: &PromptTemplate,
    n_ctx: usize,
    class_part: Vec<SeqItem>,
    vocab: &Vocabulary,
    context_len: usize,
) -> Result<TokenSequence> {
    let suffix = tokenize(&template.suffix, vocab);
    let mut middle: Vec<SeqItem> = (0..n_ctx).map(|index| SeqItem::ContextSlot { index }).collect();
    middle.extend(class_part);
    TokenSequence::assemble(middle, &[], &suffix, context_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(
            ["a", "photo", "of", "dog", "bell", "pepper", ".", ","]
                .into_iter()
                .map(String::from),
        )
        .unwrap()
    }

    #[test]
    fn specials_and_indexing() {
        let v = Vocabulary::new(["photo", "of", "a"].into_iter().map(String::from)).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.lookup("photo"), Some(4));
        assert_eq!(v.token_at(4), Some("photo"));
        // lookup . token_at is the identity on every id
        for id in 0..v.len() as u32 {
            let t = v.token_at(id).unwrap();
            assert_eq!(v.lookup(t), Some(id));
        }
    }

    #[test]
    fn duplicate_token_rejected() {
        let err = Vocabulary::new(["a", "b", "a"].into_iter().map(String::from)).unwrap_err();
        assert!(matches!(err, Error::DuplicateToken(t) if t == "a"));
    }

    #[test]
    fn empty_vocabulary_rejected() {
        assert!(matches!(
            Vocabulary::new(std::iter::empty()),
            Err(Error::EmptyVocabulary)
        ));
    }

    #[test]
    fn tokenize_sentence() {
        let v = vocab();
        let ids = tokenize("A photo of a dog.", &v);
        let expect: Vec<u32> = ["a", "photo", "of", "a", "dog", "."]
            .iter()
            .map(|t| v.lookup(t).unwrap())
            .collect();
        assert_eq!(ids, expect);
    }

    #[test]
    fn tokenize_empty_and_oov() {
        let v = vocab();
        assert!(tokenize("", &v).is_empty());
        let ids = tokenize("qzx photo", &v);
        assert_eq!(ids, vec![UNK, v.lookup("photo").unwrap()]);
    }

    #[test]
    fn tokenize_drops_unknown_punctuation() {
        let v = vocab();
        let ids = tokenize("dog; photo", &v);
        assert_eq!(ids, vec![v.lookup("dog").unwrap(), v.lookup("photo").unwrap()]);
    }

    #[test]
    fn tokenize_idempotent_on_lowercased_token() {
        let v = vocab();
        let once = tokenize("photo", &v);
        assert_eq!(once.len(), 1);
        let again = tokenize(v.token_at(once[0]).unwrap(), &v);
        assert_eq!(once, again);
    }

    #[test]
    fn render_default_query() {
        let v = vocab();
        let t = PromptTemplate::default_photo();
        let seq = render_query(&t, 3, 1, &v, 16).unwrap();
        let a = v.lookup("a").unwrap();
        let photo = v.lookup("photo").unwrap();
        let of = v.lookup("of").unwrap();
        let dot = v.lookup(".").unwrap();
        let mut expect = vec![
            SeqItem::Vocab(BOS),
            SeqItem::Vocab(a),
            SeqItem::Vocab(photo),
            SeqItem::Vocab(of),
            SeqItem::Vocab(a),
            SeqItem::ClassSlot { class_id: 3, slot: 0 },
            SeqItem::Vocab(dot),
            SeqItem::Vocab(EOS),
        ];
        while expect.len() < 16 {
            expect.push(SeqItem::Vocab(PAD));
        }
        assert_eq!(seq.items(), &expect[..]);
        assert_eq!(seq.eos_index(), 7);
    }

    #[test]
    fn render_multi_slot_query() {
        let v = vocab();
        let t = PromptTemplate::default_photo();
        let seq = render_query(&t, 2, 3, &v, 16).unwrap();
        let slots: Vec<_> = seq
            .items()
            .iter()
            .filter(|i| matches!(i, SeqItem::ClassSlot { .. }))
            .collect();
        assert_eq!(slots.len(), 3);
        for (k, s) in slots.iter().enumerate() {
            assert_eq!(**s, SeqItem::ClassSlot { class_id: 2, slot: k });
        }
        // three consecutive positions
        assert_eq!(seq.eos_index(), 1 + 4 + 3 + 1);
    }

    #[test]
    fn render_overflow() {
        let v = vocab();
        let t = PromptTemplate::default_photo();
        assert!(matches!(
            render_query(&t, 0, 1, &v, 7),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn render_named_query_multi_token() {
        let v = vocab();
        let t = PromptTemplate::default_photo();
        let (seq, warn) = render_named_query(&t, "bell pepper", &v, 16).unwrap();
        assert!(warn.is_empty());
        assert_eq!(seq.eos_index(), 1 + 4 + 2 + 1);
        assert_eq!(
            seq.items()[5],
            SeqItem::Vocab(v.lookup("bell").unwrap())
        );
        assert_eq!(
            seq.items()[6],
            SeqItem::Vocab(v.lookup("pepper").unwrap())
        );
    }

    #[test]
    fn render_named_query_oov_flags_warning() {
        let v = vocab();
        let t = PromptTemplate::default_photo();
        let (seq, warn) = render_named_query(&t, "zyzzyva", &v, 16).unwrap();
        assert_eq!(warn.len(), 1);
        assert_eq!(seq.items()[5], SeqItem::Vocab(UNK));
    }

    #[test]
    fn queries_differ_only_in_slot_ids() {
        let v = vocab();
        let t = PromptTemplate::default_photo();
        let a = render_query(&t, 1, 2, &v, 16).unwrap();
        let b = render_query(&t, 5, 2, &v, 16).unwrap();
        assert_eq!(a.eos_index(), b.eos_index());
        for (x, y) in a.items().iter().zip(b.items()) {
            match (x, y) {
                (
                    SeqItem::ClassSlot { class_id: ca, slot: sa },
                    SeqItem::ClassSlot { class_id: cb, slot: sb },
                ) => {
                    assert_eq!(ca, &1);
                    assert_eq!(cb, &5);
                    assert_eq!(sa, sb);
                }
                _ => assert_eq!(x, y),
            }
        }
    }

    #[test]
    fn builtin_template_lookup() {
        assert_eq!(find_template("flowers102").unwrap().suffix, ", a type of flower.");
        assert!(find_template("nope").is_err());
    }

    #[test]
    fn context_query_layout() {
        let v = vocab();
        let t = PromptTemplate::default_photo();
        let dog = v.lookup("dog").unwrap();
        let seq =
            render_context_query(&t, 4, vec![SeqItem::Vocab(dog)], &v, 16).unwrap();
        assert_eq!(seq.items()[1], SeqItem::ContextSlot { index: 0 });
        assert_eq!(seq.items()[4], SeqItem::ContextSlot { index: 3 });
        assert_eq!(seq.items()[5], SeqItem::Vocab(dog));
        assert_eq!(seq.eos_index(), 1 + 4 + 1 + 1);
    }
}
