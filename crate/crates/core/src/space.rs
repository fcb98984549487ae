//! The layer-wise search space: six action classes, their candidate sets and
//! the token encodings of architectures.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
pub use crate::tensor::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActionClass {
    HiddenDim,
    AttentionFn,
    Heads,
    Aggregator,
    Combiner,
    Activation,
}

impl ActionClass {
    pub const ALL: [ActionClass; 6] = [
        ActionClass::HiddenDim,
        ActionClass::AttentionFn,
        ActionClass::Heads,
        ActionClass::Aggregator,
        ActionClass::Combiner,
        ActionClass::Activation,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Key used in architecture strings.
    pub fn key(self) -> &'static str {
        match self {
            ActionClass::HiddenDim => "dim",
            ActionClass::AttentionFn => "att",
            ActionClass::Heads => "heads",
            ActionClass::Aggregator => "agg",
            ActionClass::Combiner => "comb",
            ActionClass::Activation => "act",
        }
    }

    pub fn cardinality(self) -> usize {
        match self {
            ActionClass::HiddenDim => HIDDEN_DIMS.len(),
            ActionClass::AttentionFn => AttentionFn::ALL.len(),
            ActionClass::Heads => HEADS.len(),
            ActionClass::Aggregator => Aggregator::ALL.len(),
            ActionClass::Combiner => Combiner::ALL.len(),
            ActionClass::Activation => Activation::ALL.len(),
        }
    }

    /// Offset of this class's first token in the shared vocabulary.
    pub fn token_offset(self) -> usize {
        ActionClass::ALL[..self.index()].iter().map(|c| c.cardinality()).sum()
    }

    /// Display name of candidate `choice`.
    pub fn value_name(self, choice: usize) -> String {
        match self {
            ActionClass::HiddenDim => HIDDEN_DIMS[choice].to_string(),
            ActionClass::AttentionFn => AttentionFn::ALL[choice].name().to_string(),
            ActionClass::Heads => HEADS[choice].to_string(),
            ActionClass::Aggregator => Aggregator::ALL[choice].name().to_string(),
            ActionClass::Combiner => Combiner::ALL[choice].name().to_string(),
            ActionClass::Activation => Activation::ALL[choice].name().to_string(),
        }
    }

    fn parse_value(self, text: &str) -> Option<usize> {
        (0..self.cardinality()).find(|&i| self.value_name(i).eq_ignore_ascii_case(text))
    }
}

impl fmt::Display for ActionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

pub const HIDDEN_DIMS: [usize; 7] = [4, 8, 16, 32, 64, 128, 256];
pub const HEADS: [usize; 6] = [1, 2, 4, 6, 8, 16];
/// Size of the shared token vocabulary (sum of all candidate set sizes).
pub const VOCAB_SIZE: usize = 33;
/// Combinations per layer.
pub const LAYER_COMBINATIONS: u64 = 14112;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttentionFn {
    Constant,
    Gcn,
    Gat,
    SymGat,
    Cos,
    Linear,
    GeneLinear,
}

impl AttentionFn {
    pub const ALL: [AttentionFn; 7] = [
        AttentionFn::Constant,
        AttentionFn::Gcn,
        AttentionFn::Gat,
        AttentionFn::SymGat,
        AttentionFn::Cos,
        AttentionFn::Linear,
        AttentionFn::GeneLinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionFn::Constant => "constant",
            AttentionFn::Gcn => "gcn",
            AttentionFn::Gat => "gat",
            AttentionFn::SymGat => "sym-gat",
            AttentionFn::Cos => "cos",
            AttentionFn::Linear => "linear",
            AttentionFn::GeneLinear => "gene-linear",
        }
    }

    /// Whether raw scores are normalized by a softmax over each in-neighborhood.
    pub fn is_normalized(self) -> bool {
        !matches!(self, AttentionFn::Constant | AttentionFn::Gcn)
    }
}

impl FromStr for AttentionFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionFn::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attention function `{}`", s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Aggregator {
    Sum,
    Mean,
    MaxPool,
}

impl Aggregator {
    pub const ALL: [Aggregator; 3] = [Aggregator::Sum, Aggregator::Mean, Aggregator::MaxPool];

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Sum => "sum",
            Aggregator::Mean => "mean",
            Aggregator::MaxPool => "maxpool",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Combiner {
    Identity,
    Mlp,
}

impl Combiner {
    pub const ALL: [Combiner; 2] = [Combiner::Identity, Combiner::Mlp];

    pub fn name(self) -> &'static str {
        match self {
            Combiner::Identity => "identity",
            Combiner::Mlp => "mlp",
        }
    }
}

/// One id in the 33-token vocabulary: the disjoint union of all candidate
/// sets, in class order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(u8);

impl Token {
    pub fn new(class: ActionClass, choice: usize) -> Self {
        debug_assert!(choice < class.cardinality());
        Token((class.token_offset() + choice) as u8)
    }

    pub fn from_id(id: usize) -> Result<Self> {
        if id < VOCAB_SIZE {
            Ok(Token(id as u8))
        } else {
            Err(Error::InvalidArgument(format!("token id {} outside the {}-token vocabulary", id, VOCAB_SIZE)))
        }
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn class(self) -> ActionClass {
        let id = self.id();
        *ActionClass::ALL
            .iter()
            .rev()
            .find(|c| c.token_offset() <= id)
            .expect("offset of the first class is zero")
    }

    pub fn choice(self) -> usize {
        self.id() - self.class().token_offset()
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = self.class();
        write!(f, "{}={}", c.key(), c.value_name(self.choice()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerSpec {
    pub hidden_dim: usize,
    pub attention: AttentionFn,
    pub heads: usize,
    pub aggregator: Aggregator,
    pub combiner: Combiner,
    pub activation: Activation,
}

impl LayerSpec {
    /// Candidate index chosen for `class`.
    pub fn choice(&self, class: ActionClass) -> usize {
        match class {
            ActionClass::HiddenDim => HIDDEN_DIMS.iter().position(|&d| d == self.hidden_dim).expect("valid hidden dim"),
            ActionClass::AttentionFn => self.attention as usize,
            ActionClass::Heads => HEADS.iter().position(|&h| h == self.heads).expect("valid head count"),
            ActionClass::Aggregator => self.aggregator as usize,
            ActionClass::Combiner => self.combiner as usize,
            ActionClass::Activation => self.activation as usize,
        }
    }

    pub fn set_choice(&mut self, class: ActionClass, choice: usize) {
        match class {
            ActionClass::HiddenDim => self.hidden_dim = HIDDEN_DIMS[choice],
            ActionClass::AttentionFn => self.attention = AttentionFn::ALL[choice],
            ActionClass::Heads => self.heads = HEADS[choice],
            ActionClass::Aggregator => self.aggregator = Aggregator::ALL[choice],
            ActionClass::Combiner => self.combiner = Combiner::ALL[choice],
            ActionClass::Activation => self.activation = Activation::ALL[choice],
        }
    }

    pub fn from_choices(choices: [usize; 6]) -> Self {
        let mut spec = LayerSpec::default();
        for (class, choice) in ActionClass::ALL.into_iter().zip(choices) {
            spec.set_choice(class, choice);
        }
        spec
    }

    pub fn choices(&self) -> [usize; 6] {
        ActionClass::ALL.map(|c| self.choice(c))
    }

    pub fn is_valid(&self) -> bool {
        HIDDEN_DIMS.contains(&self.hidden_dim) && HEADS.contains(&self.heads)
    }
}

impl Default for LayerSpec {
    fn default() -> Self {
        Self {
            hidden_dim: HIDDEN_DIMS[0],
            attention: AttentionFn::Constant,
            heads: HEADS[0],
            aggregator: Aggregator::Sum,
            combiner: Combiner::Identity,
            activation: Activation::Sigmoid,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (k, class) in ActionClass::ALL.iter().enumerate() {
            if k > 0 {
                f.write_str("|")?;
            }
            write!(f, "{}", Token::new(*class, self.choice(*class)))?;
        }
        f.write_str("]")
    }
}

/// An `n`-layer architecture, `n >= 1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Architecture {
    layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(String::from("an architecture needs at least one layer")));
        }
        if let Some(pos) = layers.iter().position(|l| !l.is_valid()) {
            return Err(Error::InvalidArgument(format!("layer {} has an out-of-space value", pos)));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerSpec] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Uniform independent draw of every action.
    pub fn random<R: Rng + ?Sized>(n_layers: usize, rng: &mut R) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|_| LayerSpec::from_choices(ActionClass::ALL.map(|c| rng.random_range(0..c.cardinality()))))
            .collect();
        Self::new(layers)
    }

    /// Choices of `class` for every layer.
    pub fn class_choices(&self, class: ActionClass) -> Vec<usize> {
        self.layers.iter().map(|l| l.choice(class)).collect()
    }

    /// Copy with `class` replaced layer by layer from `choices`.
    pub fn with_class_choices(&self, class: ActionClass, choices: &[usize]) -> Result<Self> {
        if choices.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} choices for {} layers",
                choices.len(),
                self.layers.len()
            )));
        }
        let mut out = self.clone();
        for (layer, &choice) in out.layers.iter_mut().zip(choices) {
            if choice >= class.cardinality() {
                return Err(Error::InvalidArgument(format!("choice {} outside class {}", choice, class)));
            }
            layer.set_choice(class, choice);
        }
        Ok(out)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.layers {
            write!(f, "{}", l)?;
        }
        Ok(())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    /// Parses `[dim=8|att=gat|heads=2|agg=sum|comb=mlp|act=relu][...]`.
    fn from_str(s: &str) -> Result<Self> {
        let mut words = Vec::new();
        for chunk in s.trim().split(']') {
            let chunk = chunk.trim();
            if chunk.is_empty() {
                continue;
            }
            let inner = chunk
                .strip_prefix('[')
                .ok_or_else(|| Error::InvalidArgument(format!("malformed architecture string near `{}`", chunk)))?;
            words.extend(inner.split('|').map(str::trim));
        }
        decode_words(&words)
    }
}

pub fn candidate_set(class: ActionClass) -> Vec<Token> {
    (0..class.cardinality()).map(|i| Token::new(class, i)).collect()
}

/// `14112^n_layers`.
pub fn space_cardinality(n_layers: u32) -> BigUint {
    BigUint::from(LAYER_COMBINATIONS).pow(n_layers)
}

/// Length-`6n` token sequence, layer by layer in canonical class order.
pub fn encode(a: &Architecture) -> Vec<Token> {
    a.layers
        .iter()
        .flat_map(|l| ActionClass::ALL.map(|c| Token::new(c, l.choice(c))))
        .collect()
}

pub fn decode(tokens: &[Token]) -> Result<Architecture> {
    if tokens.is_empty() || tokens.len() % 6 != 0 {
        return Err(Error::TokenLength(tokens.len()));
    }
    let mut layers = Vec::with_capacity(tokens.len() / 6);
    for (l, chunk) in tokens.chunks(6).enumerate() {
        let mut spec = LayerSpec::default();
        for (k, (&tok, class)) in chunk.iter().zip(ActionClass::ALL).enumerate() {
            if tok.class() != class {
                return Err(Error::UnknownToken {
                    position: l * 6 + k,
                    class: class.key(),
                    token: tok.to_string(),
                });
            }
            spec.set_choice(class, tok.choice());
        }
        layers.push(spec);
    }
    Architecture::new(layers)
}

/// Decodes textual `key=value` tokens such as `heads=4`.
pub fn decode_words(words: &[&str]) -> Result<Architecture> {
    if words.is_empty() || words.len() % 6 != 0 {
        return Err(Error::TokenLength(words.len()));
    }
    let mut tokens = Vec::with_capacity(words.len());
    for (pos, word) in words.iter().enumerate() {
        let class = ActionClass::ALL[pos % 6];
        let bad = || Error::UnknownToken {
            position: pos,
            class: class.key(),
            token: word.to_string(),
        };
        let (key, value) = word.split_once('=').ok_or_else(bad)?;
        if key.trim() != class.key() {
            return Err(bad());
        }
        let choice = class.parse_value(value.trim()).ok_or_else(bad)?;
        tokens.push(Token::new(class, choice));
    }
    decode(&tokens)
}

/// `encode(a)` with the `n` tokens of `class` removed (length `5n`).
pub fn subarchitecture(a: &Architecture, class: ActionClass) -> Vec<Token> {
    encode(a).into_iter().filter(|t| t.class() != class).collect()
}

pub fn random_architecture(n_layers: usize, seed: u64) -> Result<Architecture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Architecture::random(n_layers, &mut rng)
}
