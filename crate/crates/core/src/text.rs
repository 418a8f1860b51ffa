//! Prompt model: a fixed vocabulary with frozen Gaussian embeddings, concept
//! bindings (rare token + class token), and prompt encoding into the
//! conditioning matrix `X` (d x n, one column per token).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const BOS_TEXT: &str = "[BOS]";
pub const EOS_TEXT: &str = "[EOS]";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenId(pub usize);

impl TokenId {
    pub const BOS: TokenId = TokenId(0);
    pub const EOS: TokenId = TokenId(1);

    pub fn is_special(self) -> bool {
        self == TokenId::BOS || self == TokenId::EOS
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// On-disk form of a vocabulary. Embeddings are regenerated from the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabFile {
    pub d: usize,
    pub seed: u64,
    pub words: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    d: usize,
    seed: u64,
    /// Index 0 and 1 are BOS and EOS.
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    /// |vocab| x d, row i is the embedding of token i.
    table: Matrix,
}

/// Builds a vocabulary whose embeddings are i.i.d. N(0, 1/d), drawn from a
/// ChaCha8 stream seeded with `seed`, one row per token in id order.
pub fn build_vocab(seed: u64, d: usize, words: &[String]) -> Result<Vocabulary> {
    if d < 4 {
        return Err(Error::Config(format!("embedding width {d} must be >= 4")));
    }
    if words.is_empty() {
        return Err(Error::Config("vocabulary needs at least one word".into()));
    }
    let mut tokens = vec![BOS_TEXT.to_string(), EOS_TEXT.to_string()];
    let mut index = HashMap::new();
    index.insert(BOS_TEXT.to_string(), TokenId::BOS);
    index.insert(EOS_TEXT.to_string(), TokenId::EOS);
    for w in words {
        if w.is_empty() || w.chars().any(char::is_whitespace) {
            return Err(Error::Config(format!("invalid vocabulary word {w:?}")));
        }
        if index.contains_key(w) {
            return Err(Error::DuplicateWord(w.clone()));
        }
        index.insert(w.clone(), TokenId(tokens.len()));
        tokens.push(w.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = Matrix::gaussian(tokens.len(), d, 1.0 / (d as f64).sqrt(), &mut rng);
    Ok(Vocabulary {
        d,
        seed,
        tokens,
        index,
        table,
    })
}

impl Vocabulary {
    pub fn from_file(file: &VocabFile) -> Result<Self> {
        build_vocab(file.seed, file.d, &file.words)
    }

    pub fn to_file(&self) -> VocabFile {
        VocabFile {
            d: self.d,
            seed: self.seed,
            words: self.tokens[2..].to_vec(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&text)?;
        Vocabulary::from_file(&file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file())?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of tokens including BOS and EOS.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn table(&self) -> &Matrix {
        &self.table
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn require(&self, word: &str) -> Result<TokenId> {
        self.id(word).ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id.0]
    }

    pub fn embedding(&self, id: TokenId) -> &[f64] {
        self.table.row(id.0)
    }

    pub fn checksum(&self) -> u64 {
        self.table.checksum()
    }
}

/// A personalized concept: its rare identifier token and its class noun.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptBinding {
    pub name: String,
    pub rare: TokenId,
    pub class: TokenId,
}

impl ConceptBinding {
    pub fn new(name: impl Into<String>, rare: TokenId, class: TokenId) -> Result<Self> {
        let name = name.into();
        if rare.is_special() {
            return Err(Error::InvalidBinding(format!(
                "rare token of `{name}` cannot be BOS or EOS"
            )));
        }
        if rare == class {
            return Err(Error::InvalidBinding(format!(
                "rare and class token of `{name}` coincide"
            )));
        }
        Ok(ConceptBinding { name, rare, class })
    }

    /// Binding from vocabulary words.
    pub fn from_words(vocab: &Vocabulary, name: &str, rare: &str, class: &str) -> Result<Self> {
        ConceptBinding::new(name, vocab.require(rare)?, vocab.require(class)?)
    }
}

/// An encoded prompt: BOS + tokens + EOS, and its embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    x: Matrix,
    rare_positions: BTreeMap<String, Vec<usize>>,
    class_positions: BTreeMap<String, Vec<usize>>,
}

impl TokenSequence {
    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// d x n embedding matrix.
    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn rare_positions(&self, concept: &str) -> &[usize] {
        self.rare_positions.get(concept).map_or(&[], |v| v.as_slice())
    }

    pub fn class_positions(&self, concept: &str) -> &[usize] {
        self.class_positions.get(concept).map_or(&[], |v| v.as_slice())
    }

    /// Positions holding `token`.
    pub fn positions_of(&self, token: TokenId) -> Vec<usize> {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == token)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Splits prompt text into vocabulary words: lowercase, whitespace separated,
/// with `.` and `,` split off as their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut word = String::new();
        for ch in raw.chars() {
            if ch == '.' || ch == ',' {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.extend(ch.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Encodes `prompt` (vocabulary words, without BOS/EOS) against the given
/// concept bindings.
pub fn encode_prompt<S: AsRef<str>>(
    vocab: &Vocabulary,
    bindings: &[ConceptBinding],
    prompt: &[S],
) -> Result<TokenSequence> {
    for (i, a) in bindings.iter().enumerate() {
        if bindings[..i].iter().any(|b| b.rare == a.rare) {
            return Err(Error::DuplicateRareToken(vocab.token(a.rare).to_string()));
        }
    }
    let mut ids = Vec::with_capacity(prompt.len() + 2);
    ids.push(TokenId::BOS);
    for w in prompt {
        ids.push(vocab.require(w.as_ref())?);
    }
    ids.push(TokenId::EOS);

    let d = vocab.d();
    let n = ids.len();
    let x = Matrix::from_fn(d, n, |i, j| vocab.embedding(ids[j])[i]);

    let mut rare_positions = BTreeMap::new();
    let mut class_positions = BTreeMap::new();
    for b in bindings {
        let scan = |tok: TokenId| -> Vec<usize> {
            (1..n - 1).filter(|&j| ids[j] == tok).collect()
        };
        rare_positions.insert(b.name.clone(), scan(b.rare));
        class_positions.insert(b.name.clone(), scan(b.class));
    }
    Ok(TokenSequence {
        ids,
        x,
        rare_positions,
        class_positions,
    })
}

/// Inverse of [`encode_prompt`] on ids: the prompt words without BOS/EOS.
pub fn decode(vocab: &Vocabulary, seq: &TokenSequence) -> Vec<String> {
    seq.ids[1..seq.ids.len() - 1]
        .iter()
        .map(|id| vocab.token(*id).to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(ws: &[&str]) -> Vec<String> {
        ws.iter().map(|s| s.to_string()).collect()
    }

    fn vocab() -> Vocabulary {
        build_vocab(
            7,
            8,
            &words(&["a", "<v1>", "dog", "<v2>", "cat", "and", ".", "x", "y", "z"]),
        )
        .unwrap()
    }

    #[test]
    fn table_shape_counts_specials() {
        let v = vocab();
        assert_eq!(v.table().shape(), (12, 8));
    }

    #[test]
    fn seeding_is_deterministic() {
        let w = words(&["a", "b"]);
        let a = build_vocab(7, 8, &w).unwrap();
        let b = build_vocab(7, 8, &w).unwrap();
        assert!(a.table().bitwise_eq(b.table()));
        let c = build_vocab(8, 8, &w).unwrap();
        assert!(!a.table().bitwise_eq(c.table()));
    }

    #[test]
    fn rejects_duplicates_and_narrow_width() {
        assert!(matches!(
            build_vocab(1, 8, &words(&["a", "a"])),
            Err(Error::DuplicateWord(_))
        ));
        assert!(build_vocab(1, 3, &words(&["a"])).is_err());
    }

    #[test]
    fn encodes_single_concept_prompt() {
        let v = vocab();
        let c1 = ConceptBinding::from_words(&v, "c1", "<v1>", "dog").unwrap();
        let seq = encode_prompt(&v, &[c1], &["a", "<v1>", "dog"]).unwrap();
        let expect: Vec<TokenId> = vec![
            TokenId::BOS,
            v.id("a").unwrap(),
            v.id("<v1>").unwrap(),
            v.id("dog").unwrap(),
            TokenId::EOS,
        ];
        assert_eq!(seq.ids(), expect.as_slice());
        assert_eq!(seq.rare_positions("c1"), &[2]);
        assert_eq!(seq.class_positions("c1"), &[3]);
        for j in 0..seq.len() {
            assert_eq!(seq.x().col(j), v.embedding(seq.ids()[j]).to_vec());
        }
    }

    #[test]
    fn absent_rare_token_gives_empty_positions() {
        let v = vocab();
        let c1 = ConceptBinding::from_words(&v, "c1", "<v1>", "dog").unwrap();
        let seq = encode_prompt(&v, &[c1], &["a", "dog"]).unwrap();
        assert!(seq.rare_positions("c1").is_empty());
    }

    #[test]
    fn two_concepts_recorded() {
        let v = vocab();
        let c1 = ConceptBinding::from_words(&v, "c1", "<v1>", "dog").unwrap();
        let c2 = ConceptBinding::from_words(&v, "c2", "<v2>", "cat").unwrap();
        let prompt = tokenize("a <v1> dog and a <v2> cat.");
        let seq = encode_prompt(&v, &[c1, c2], &prompt).unwrap();
        // index-scan oracle
        for (name, tok) in [("c1", "<v1>"), ("c2", "<v2>")] {
            let id = v.id(tok).unwrap();
            let scan: Vec<usize> = seq
                .ids()
                .iter()
                .enumerate()
                .filter(|(_, t)| **t == id)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(seq.rare_positions(name), scan.as_slice());
        }
        assert_eq!(seq.rare_positions("c1"), &[2]);
        assert_eq!(seq.rare_positions("c2"), &[6]);
    }

    #[test]
    fn repeated_rare_token_records_every_occurrence() {
        let v = vocab();
        let c1 = ConceptBinding::from_words(&v, "c1", "<v1>", "dog").unwrap();
        let seq = encode_prompt(&v, &[c1], &["<v1>", "and", "<v1>"]).unwrap();
        assert_eq!(seq.rare_positions("c1"), &[1, 3]);
    }

    #[test]
    fn unknown_token_is_named() {
        let v = vocab();
        match encode_prompt(&v, &[], &["a", "wolf"]) {
            Err(Error::UnknownToken(t)) => assert_eq!(t, "wolf"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn binding_validation() {
        let v = vocab();
        assert!(ConceptBinding::new("c", TokenId::BOS, v.id("dog").unwrap()).is_err());
        let d = v.id("dog").unwrap();
        assert!(ConceptBinding::new("c", d, d).is_err());
        let c1 = ConceptBinding::from_words(&v, "c1", "<v1>", "dog").unwrap();
        let c2 = ConceptBinding::from_words(&v, "c2", "<v1>", "cat").unwrap();
        assert!(matches!(
            encode_prompt(&v, &[c1, c2], &["a"]),
            Err(Error::DuplicateRareToken(_))
        ));
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = vocab();
        let json = serde_json::to_string(&v.to_file()).unwrap();
        let back = Vocabulary::from_file(&serde_json::from_str(&json).unwrap()).unwrap();
        assert!(back.table().bitwise_eq(v.table()));
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("A <v1> Dog."), vec!["a", "<v1>", "dog", "."]);
    }
}
