//! Arithmetic vocabulary, prompt templates, constrained sampling and the
//! token groups used for context-aware mean ablation.
//!
//! Token positions are 0-based throughout the crate: `<BOS>` sits at
//! position 0.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::predict;
use crate::model::ModelWeights;
use crate::util::{self, Rng};

pub const BOS: u32 = 0;
pub const MAX_NUMBER: u32 = 999;
pub const DEFAULT_OPERAND_RANGE: RangeInclusive<u32> = 0..=100;
pub const DEFAULT_ANSWER_RANGE: RangeInclusive<i64> = 0..=999;

const OPERATOR_TOKENS: [&str; 9] = ["+", "−", "×", "÷", "=", "␣+", "␣−", "␣=", "␣"];

/// Token table: `<BOS>` = 0, integers 0..=999 at ids 1..=1000, then the
/// operator tokens, then any extra word tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn build() -> Self {
        Self::with_words(&[])
    }

    /// Arithmetic vocab extended with extra word tokens (style packs).
    pub fn with_words(words: &[&str]) -> Self {
        let mut tokens = Vec::with_capacity(1 + 1000 + OPERATOR_TOKENS.len() + words.len());
        tokens.push("<BOS>".to_string());
        tokens.extend((0..=MAX_NUMBER).map(|n| n.to_string()));
        tokens.extend(OPERATOR_TOKENS.iter().map(|s| s.to_string()));
        for w in words {
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of a token string. ASCII spellings of the operators (`-`, `*`,
    /// `/`, and a leading space for the space-fused forms) are accepted.
    pub fn id(&self, token: &str) -> Result<u32> {
        if let Some(&id) = self.index.get(token) {
            return Ok(id);
        }
        let canonical: String = token
            .replace('-', "−")
            .replace('*', "×")
            .replace('/', "÷")
            .replace(' ', "␣");
        self.index
            .get(&canonical)
            .copied()
            .ok_or_else(|| Error::Lookup(token.to_string()))
    }

    pub fn number(&self, n: i64) -> Result<u32> {
        if (0..=MAX_NUMBER as i64).contains(&n) {
            Ok(n as u32 + 1)
        } else {
            Err(Error::Lookup(n.to_string()))
        }
    }

    pub fn value_of(&self, id: u32) -> Option<u32> {
        (1..=MAX_NUMBER + 1).contains(&id).then(|| id - 1)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or("<UNK>")
    }

    /// One `id<TAB>token` line per entry.
    pub fn manifest(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{i}\t{t}\n"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

impl Op {
    fn apply(self, lhs: i64, rhs: i64) -> Option<i64> {
        match self {
            Op::Add => Some(lhs + rhs),
            Op::Sub => Some(lhs - rhs),
            Op::Mul => Some(lhs * rhs),
            Op::Div => (rhs != 0 && lhs % rhs == 0).then(|| lhs / rhs),
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Sub => "−",
            Op::Mul => "×",
            Op::Div => "÷",
        }
    }

    fn ascii(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
            Op::Div => '/',
        }
    }

    fn from_ascii(c: char) -> Option<Self> {
        match c {
            '+' => Some(Op::Add),
            '-' | '−' => Some(Op::Sub),
            '*' | '×' => Some(Op::Mul),
            '/' | '÷' => Some(Op::Div),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Fixed(u32),
    Operand(usize),
}

/// A fixed-length prompt pattern with operand slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub name: String,
    pub slots: Vec<Slot>,
    /// `ops[i]` combines the running value with operand `i + 1`, left to right.
    pub ops: Vec<Op>,
    pub operand_range: RangeInclusive<u32>,
    pub answer_range: RangeInclusive<i64>,
}

impl Template {
    /// `<BOS> A ∘ B =`
    pub fn two_operand(op: Op, vocab: &Vocab) -> Self {
        let slots = vec![
            Slot::Fixed(BOS),
            Slot::Operand(0),
            Slot::Fixed(vocab.id(op.symbol()).unwrap()),
            Slot::Operand(1),
            Slot::Fixed(vocab.id("=").unwrap()),
        ];
        Self {
            name: format!("A{}B", op.ascii()),
            slots,
            ops: vec![op],
            operand_range: DEFAULT_OPERAND_RANGE,
            answer_range: DEFAULT_ANSWER_RANGE,
        }
    }

    /// `<BOS> A ␣∘ ␣ B ␣∘ ␣ C ␣= ␣`
    pub fn three_operand(first: Op, second: Op, vocab: &Vocab) -> Result<Self> {
        let fused = |op: Op| vocab.id(&format!("␣{}", op.symbol()));
        let space = vocab.id("␣")?;
        let slots = vec![
            Slot::Fixed(BOS),
            Slot::Operand(0),
            Slot::Fixed(fused(first)?),
            Slot::Fixed(space),
            Slot::Operand(1),
            Slot::Fixed(fused(second)?),
            Slot::Fixed(space),
            Slot::Operand(2),
            Slot::Fixed(vocab.id("␣=")?),
            Slot::Fixed(space),
        ];
        Ok(Self {
            name: format!("A{}B{}C", first.ascii(), second.ascii()),
            slots,
            ops: vec![first, second],
            operand_range: DEFAULT_OPERAND_RANGE,
            answer_range: DEFAULT_ANSWER_RANGE,
        })
    }

    /// Resolve names such as `A+B`, `A/B`, `A+B-C`.
    pub fn builtin(name: &str, vocab: &Vocab) -> Result<Self> {
        let chars: Vec<char> = name.chars().collect();
        let bad = || Error::Argument(format!("unknown template {name:?}"));
        match chars.as_slice() {
            ['A', op, 'B'] => Ok(Self::two_operand(Op::from_ascii(*op).ok_or_else(bad)?, vocab)),
            ['A', a, 'B', b, 'C'] => {
                let (a, b) = (
                    Op::from_ascii(*a).ok_or_else(bad)?,
                    Op::from_ascii(*b).ok_or_else(bad)?,
                );
                if matches!(a, Op::Mul | Op::Div) || matches!(b, Op::Mul | Op::Div) {
                    return Err(bad());
                }
                Self::three_operand(a, b, vocab)
            }
            _ => Err(bad()),
        }
    }

    /// Build a template from whitespace-separated tokens where `A`, `B`,
    /// `C`, ... mark operand slots, e.g. `"<BOS> A + B ="`.
    pub fn from_pattern(name: &str, pattern: &str, ops: Vec<Op>, vocab: &Vocab) -> Result<Self> {
        let mut slots = Vec::new();
        for tok in pattern.split_whitespace() {
            let mut chars = tok.chars();
            match (chars.next(), chars.next()) {
                (Some(c @ 'A'..='Z'), None) => slots.push(Slot::Operand((c as u8 - b'A') as usize)),
                _ => slots.push(Slot::Fixed(vocab.id(tok)?)),
            }
        }
        let t = Self {
            name: name.to_string(),
            slots,
            ops,
            operand_range: DEFAULT_OPERAND_RANGE,
            answer_range: DEFAULT_ANSWER_RANGE,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn with_operand_range(mut self, range: RangeInclusive<u32>) -> Self {
        self.operand_range = range;
        self
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn n_operands(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s, Slot::Operand(_)))
            .count()
    }

    /// Position of each operand slot, indexed by operand.
    pub fn operand_positions(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.n_operands()];
        for (pos, s) in self.slots.iter().enumerate() {
            if let Slot::Operand(i) = s {
                out[*i] = pos;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.slots.first() != Some(&Slot::Fixed(BOS)) {
            return Err(Error::Structure(format!(
                "template {} must start with a fixed <BOS> token",
                self.name
            )));
        }
        if self.slots[1..].contains(&Slot::Fixed(BOS)) {
            return Err(Error::Structure(format!(
                "template {} uses <BOS> after the first position",
                self.name
            )));
        }
        let n = self.n_operands();
        let mut seen = vec![false; n];
        for s in &self.slots {
            if let Slot::Operand(i) = s {
                if *i >= n || seen[*i] {
                    return Err(Error::Structure(format!(
                        "template {} has non-contiguous or repeated operand slots",
                        self.name
                    )));
                }
                seen[*i] = true;
            }
        }
        if n > 0 && self.ops.len() != n - 1 {
            return Err(Error::Structure(format!(
                "template {} has {n} operands but {} operators",
                self.name,
                self.ops.len()
            )));
        }
        Ok(())
    }

    /// Answer for these operands, `None` when outside the answer range or
    /// not an exact integer.
    pub fn answer(&self, operands: &[u32]) -> Option<i64> {
        let (&first, rest) = operands.split_first()?;
        let mut acc = first as i64;
        for (op, &x) in self.ops.iter().zip(rest) {
            acc = op.apply(acc, x as i64)?;
        }
        self.answer_range.contains(&acc).then_some(acc)
    }

    pub fn render(&self, operands: &[u32], vocab: &Vocab) -> Result<Vec<u32>> {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Fixed(id) => Ok(*id),
                Slot::Operand(i) => vocab.number(operands[*i] as i64),
            })
            .collect()
    }

    /// Checked instance; `None` when the operands violate a constraint.
    pub fn instance(&self, operands: &[u32], vocab: &Vocab) -> Option<TaskInstance> {
        if operands.len() != self.n_operands()
            || operands.iter().any(|o| !self.operand_range.contains(o))
        {
            return None;
        }
        let answer = self.answer(operands)?;
        let answer_id = vocab.number(answer).ok()?;
        Some(TaskInstance {
            tokens: self.render(operands, vocab).ok()?,
            operands: operands.to_vec(),
            answer,
            answer_id,
        })
    }

    /// Labels for display: operand letters at operand slots, token text
    /// elsewhere.
    pub fn labels(&self, vocab: &Vocab) -> Vec<String> {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Fixed(id) => vocab.token(*id).to_string(),
                Slot::Operand(i) => ((b'A' + *i as u8) as char).to_string(),
            })
            .collect()
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub tokens: Vec<u32>,
    pub operands: Vec<u32>,
    pub answer: i64,
    pub answer_id: u32,
}

/// Rejection-sample operands uniformly from the operand range until the
/// answer satisfies the template's constraints.
pub fn sample_instance(template: &Template, vocab: &Vocab, rng: &mut Rng) -> TaskInstance {
    let n = template.n_operands();
    let mut operands = vec![0u32; n];
    loop {
        for o in operands.iter_mut() {
            *o = rng.random_range(template.operand_range.clone());
        }
        if let Some(inst) = template.instance(&operands, vocab) {
            return inst;
        }
    }
}

/// Contiguous span `start..=end` whose tokens before `end` are fixed by the
/// template; conditioning happens on the token at `end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGroup {
    pub start: usize,
    pub end: usize,
    /// Operand carried at `end`, or `None` for an all-fixed group.
    pub operand: Option<usize>,
}

impl TokenGroup {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn positions(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

/// Each run of fixed tokens joins the operand that follows it; trailing
/// fixed tokens form a final all-fixed group.
pub fn token_groups(template: &Template) -> Result<Vec<TokenGroup>> {
    match template.slots.first() {
        Some(Slot::Fixed(BOS)) => {}
        Some(Slot::Operand(_)) => {
            return Err(Error::Structure(format!(
                "template {} has an operand slot at the first position",
                template.name
            )))
        }
        _ => {
            return Err(Error::Structure(format!(
                "template {} must start with <BOS>",
                template.name
            )))
        }
    }
    let mut groups = Vec::new();
    let mut start = 0;
    for (pos, slot) in template.slots.iter().enumerate() {
        if let Slot::Operand(i) = slot {
            groups.push(TokenGroup {
                start,
                end: pos,
                operand: Some(*i),
            });
            start = pos + 1;
        }
    }
    if start < template.slots.len() {
        groups.push(TokenGroup {
            start,
            end: template.slots.len() - 1,
            operand: None,
        });
    }
    Ok(groups)
}

/// One group per position; used for single-token conditioning.
pub fn single_token_groups(template: &Template) -> Result<Vec<TokenGroup>> {
    token_groups(template)?;
    Ok(template
        .slots
        .iter()
        .enumerate()
        .map(|(pos, s)| TokenGroup {
            start: pos,
            end: pos,
            operand: match s {
                Slot::Operand(i) => Some(*i),
                Slot::Fixed(_) => None,
            },
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub template: String,
    pub seed: u64,
    /// Hash of the model used to keep only correctly answered prompts.
    pub filter_model_hash: Option<String>,
    pub instances: Vec<TaskInstance>,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    template: String,
    seed: u64,
    filter_model_hash: Option<String>,
    n: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// JSON lines: one record per instance.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for inst in &self.instances {
            out.push_str(&serde_json::to_string(inst).expect("instances serialise"));
            out.push('\n');
        }
        out
    }

    pub fn content_hash(&self) -> String {
        util::sha256_hex(self.records().as_bytes())
    }

    /// Writes `path` (records) and `path.meta.json` (template, seed, filter
    /// hash).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.records().as_bytes())?;
        f.flush()?;
        let meta = DatasetMeta {
            template: self.template.clone(),
            seed: self.seed,
            filter_model_hash: self.filter_model_hash.clone(),
            n: self.instances.len(),
        };
        std::fs::write(meta_path(path), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_slice(&std::fs::read(meta_path(path))?)?;
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut instances = Vec::new();
        for line in file.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                instances.push(serde_json::from_str(&line)?);
            }
        }
        if instances.len() != meta.n {
            return Err(Error::Integrity(format!(
                "dataset {} has {} records, metadata says {}",
                path.display(),
                instances.len(),
                meta.n
            )));
        }
        Ok(Self {
            template: meta.template,
            seed: meta.seed,
            filter_model_hash: meta.filter_model_hash,
            instances,
        })
    }
}

pub fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    s.into()
}

/// Sample `n` instances. With `filter`, keep only prompts the model answers
/// correctly, giving up after `n * 1000` attempts.
pub fn make_dataset(
    template: &Template,
    vocab: &Vocab,
    n: usize,
    seed: u64,
    filter: Option<&ModelWeights>,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Argument("dataset size must be at least 1".into()));
    }
    let mut rng = util::rng_from_seed(seed);
    let mut instances = Vec::with_capacity(n);
    match filter {
        None => {
            instances.extend((0..n).map(|_| sample_instance(template, vocab, &mut rng)));
        }
        Some(weights) => {
            let max_attempts = n * 1000;
            let mut attempts = 0;
            while instances.len() < n {
                if attempts == max_attempts {
                    return Err(Error::InsufficientAccuracy {
                        wanted: n,
                        found: instances.len(),
                        attempts,
                    });
                }
                attempts += 1;
                let inst = sample_instance(template, vocab, &mut rng);
                if predict(weights, &inst.tokens, &Default::default())? == inst.answer_id {
                    instances.push(inst);
                }
            }
        }
    }
    Ok(Dataset {
        template: template.name.clone(),
        seed,
        filter_model_hash: filter.map(ModelWeights::content_hash),
        instances,
    })
}
