//! Synthetic chain-arithmetic reasoning tasks.
//!
//! A task is a prompt holding a chain of assignments plus distractor
//! assignments, a question naming the chain variables to resolve, a gold
//! chain-of-thought that resolves both chain and distractor variables, and a
//! gold answer. Every token has a fixed class over a closed vocabulary, and
//! each instance carries exact ground truth for which CoT tokens are causally
//! required, verified exhaustively by single-token ablation against an
//! independent arithmetic evaluator at generation time.

use crate::error::{Error, Result};
use crate::rng::DetRng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::OnceLock;

pub const DELIMITER: &str = "####";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

const VAR_NAMES: [&str; 16] = [
    "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o", "p",
];
const FILLERS: [&str; 10] = [
    "so", "then", "thus", "now", "note", "and", "we", "see", "ok", "well",
];
const SYMBOLS: [&str; 7] = ["=", "+", "-", "×", ".", "?", ","];
const QUESTION_WORDS: [&str; 2] = ["what", "is"];

const MAX_VALUE: i64 = 99;
const GEN_RETRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenClass {
    Number,
    Symbol,
    Filler,
    Word,
    Structural,
}

/// Closed symbol table. Every token belongs to exactly one class.
#[derive(Debug)]
pub struct Vocabulary {
    symbols: Vec<String>,
    classes: Vec<TokenClass>,
    index: HashMap<String, usize>,
}

static VOCAB: OnceLock<Vocabulary> = OnceLock::new();

impl Vocabulary {
    /// The one vocabulary used across the project, built in a fixed order.
    pub fn standard() -> &'static Vocabulary {
        VOCAB.get_or_init(|| {
            let mut symbols: Vec<(String, TokenClass)> = Vec::new();
            for s in [BOS, EOS, DELIMITER] {
                symbols.push((s.to_string(), TokenClass::Structural));
            }
            for d in 0..10 {
                symbols.push((d.to_string(), TokenClass::Number));
            }
            for s in SYMBOLS {
                symbols.push((s.to_string(), TokenClass::Symbol));
            }
            for v in VAR_NAMES {
                symbols.push((v.to_string(), TokenClass::Word));
            }
            for w in QUESTION_WORDS {
                symbols.push((w.to_string(), TokenClass::Word));
            }
            for f in FILLERS {
                symbols.push((f.to_string(), TokenClass::Filler));
            }
            let index = symbols
                .iter()
                .enumerate()
                .map(|(i, (s, _))| (s.clone(), i))
                .collect();
            Vocabulary {
                classes: symbols.iter().map(|(_, c)| *c).collect(),
                symbols: symbols.into_iter().map(|(s, _)| s).collect(),
                index,
            }
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Result<&str> {
        self.symbols
            .get(id)
            .map(|s| s.as_str())
            .ok_or(Error::TokenOutOfRange {
                id,
                vocab: self.symbols.len(),
            })
    }

    pub fn class(&self, id: usize) -> Result<TokenClass> {
        self.classes
            .get(id)
            .copied()
            .ok_or(Error::TokenOutOfRange {
                id,
                vocab: self.symbols.len(),
            })
    }

    pub fn bos(&self) -> usize {
        self.index[BOS]
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn delimiter(&self) -> usize {
        self.index[DELIMITER]
    }

    pub fn question_mark(&self) -> usize {
        self.index["?"]
    }

    pub fn equals(&self) -> usize {
        self.index["="]
    }

    pub fn is_digit(&self, id: usize) -> bool {
        self.classes.get(id) == Some(&TokenClass::Number)
    }

    fn digit_value(&self, id: usize) -> Option<i64> {
        if self.is_digit(id) {
            self.symbols[id].parse().ok()
        } else {
            None
        }
    }

    /// Splits text into token ids. Whitespace separates words; a run of
    /// digits becomes one token per digit. Anything else must be a vocabulary
    /// symbol.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if let Some(id) = self.id(word) {
                out.push(id);
            } else if !word.is_empty() && word.chars().all(|c| c.is_ascii_digit()) {
                for c in word.chars() {
                    out.push(self.index[&c.to_string()]);
                }
            } else {
                return Err(Error::UnknownSymbol {
                    symbol: word.to_string(),
                });
            }
        }
        Ok(out)
    }

    /// Inverse of `tokenize` over generated texts: tokens join with single
    /// spaces except consecutive digits, which concatenate into one number.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        let mut prev_digit = false;
        for &id in ids {
            let sym = self.symbol(id)?;
            let digit = self.is_digit(id);
            if !out.is_empty() && !(digit && prev_digit) {
                out.push(' ');
            }
            out.push_str(sym);
            prev_digit = digit;
        }
        Ok(out)
    }

    /// Writes the ordered symbol list, one symbol per line.
    pub fn write_symbols(&self, w: &mut impl Write) -> Result<()> {
        for s in &self.symbols {
            writeln!(w, "{s}")?;
        }
        Ok(())
    }
}

/// Token index spans over one full sequence: prompt, CoT, answer. The
/// delimiter sits between the CoT and answer spans and belongs to neither;
/// a trailing EOS likewise stays outside the answer span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedSequence {
    pub tokens: Vec<usize>,
    pub prompt: (usize, usize),
    pub cot: (usize, usize),
    pub answer: (usize, usize),
    pub delimiter_pos: Option<usize>,
    pub multi_delimiter: bool,
}

impl SegmentedSequence {
    pub fn prompt_tokens(&self) -> &[usize] {
        &self.tokens[self.prompt.0..self.prompt.1]
    }

    pub fn cot_tokens(&self) -> &[usize] {
        &self.tokens[self.cot.0..self.cot.1]
    }

    pub fn answer_tokens(&self) -> &[usize] {
        &self.tokens[self.answer.0..self.answer.1]
    }

    pub fn cot_len(&self) -> usize {
        self.cot.1 - self.cot.0
    }

    pub fn cot_columns(&self) -> std::ops::Range<usize> {
        self.cot.0..self.cot.1
    }
}

/// Splits a sequence at a known prompt boundary. The CoT is everything after
/// the prompt up to the first delimiter; the answer is everything after the
/// delimiter up to (not including) a trailing EOS. With no delimiter the
/// answer span is empty and the CoT runs to the end (minus a trailing EOS).
pub fn segment_with_prompt(tokens: &[usize], prompt_len: usize) -> SegmentedSequence {
    let vocab = Vocabulary::standard();
    let delim = vocab.delimiter();
    let eos = vocab.eos();
    let end = if tokens.last() == Some(&eos) {
        tokens.len() - 1
    } else {
        tokens.len()
    };
    let prompt_len = prompt_len.min(end);
    let delim_positions: Vec<usize> = tokens[prompt_len..end]
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == delim)
        .map(|(i, _)| i + prompt_len)
        .collect();
    let (cot_end, ans, delimiter_pos) = match delim_positions.first() {
        Some(&d) => (d, (d + 1, end), Some(d)),
        None => (end, (end, end), None),
    };
    SegmentedSequence {
        tokens: tokens.to_vec(),
        prompt: (0, prompt_len),
        cot: (prompt_len, cot_end),
        answer: ans,
        delimiter_pos,
        multi_delimiter: delim_positions.len() > 1,
    }
}

/// Splits a sequence inferring the prompt boundary as everything through the
/// first `?` token (prompts always end with the question mark).
pub fn segment(tokens: &[usize]) -> SegmentedSequence {
    let vocab = Vocabulary::standard();
    let q = vocab.question_mark();
    let prompt_len = tokens
        .iter()
        .position(|&t| t == q)
        .map(|p| p + 1)
        .unwrap_or(0);
    segment_with_prompt(tokens, prompt_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum OpKind {
    Add,
    Sub,
    Mul,
}

impl OpKind {
    fn symbol(self) -> &'static str {
        match self {
            OpKind::Add => "+",
            OpKind::Sub => "-",
            OpKind::Mul => "×",
        }
    }

    fn apply(self, lhs: i64, rhs: i64) -> i64 {
        match self {
            OpKind::Add => lhs + rhs,
            OpKind::Sub => lhs - rhs,
            OpKind::Mul => lhs * rhs,
        }
    }
}

#[derive(Debug, Clone)]
enum Formula {
    Const(i64),
    Apply { lhs: String, op: OpKind, rhs: i64 },
}

#[derive(Debug, Clone)]
struct Statement {
    var: String,
    formula: Formula,
}

/// One synthetic reasoning instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt: String,
    pub gold_answer: String,
    pub gold_cot: String,
    /// Indices into the tokenized `gold_cot` of tokens causally required for
    /// the answer (ablation-verified).
    pub salient_positions: Vec<usize>,
    /// Chain length (number of prompt chain assignments).
    pub difficulty: usize,
    pub seed: u64,
}

impl TaskInstance {
    /// Full gold token sequence `<bos> prompt cot #### answer <eos>` with
    /// its segmentation.
    pub fn gold_sequence(&self) -> Result<SegmentedSequence> {
        let vocab = Vocabulary::standard();
        let mut tokens = vec![vocab.bos()];
        tokens.extend(vocab.tokenize(&self.prompt)?);
        let prompt_len = tokens.len();
        tokens.extend(vocab.tokenize(&self.gold_cot)?);
        tokens.push(vocab.delimiter());
        tokens.extend(vocab.tokenize(&self.gold_answer)?);
        tokens.push(vocab.eos());
        Ok(segment_with_prompt(&tokens, prompt_len))
    }

    /// Prompt tokens including the leading BOS.
    pub fn prompt_tokens(&self) -> Result<Vec<usize>> {
        let vocab = Vocabulary::standard();
        let mut tokens = vec![vocab.bos()];
        tokens.extend(vocab.tokenize(&self.prompt)?);
        Ok(tokens)
    }

    /// Salient positions mapped into full-sequence coordinates.
    pub fn salient_sequence_positions(&self, seg: &SegmentedSequence) -> Vec<usize> {
        self.salient_positions.iter().map(|p| p + seg.cot.0).collect()
    }
}

/// Prompt-side formulas plus the asked variable list, as parsed back from
/// prompt text. This is the evaluator's only view of the problem.
#[derive(Debug, Clone)]
pub struct PromptSpec {
    statements: Vec<Statement>,
    pub asked: Vec<String>,
}

/// Parses "v = n ." / "v = u op n ." statements and the trailing
/// "what is v1 .. vk ?" question.
pub fn parse_prompt(prompt: &str) -> Result<PromptSpec> {
    let vocab = Vocabulary::standard();
    let toks = vocab.tokenize(prompt)?;
    let words: Vec<&str> = toks
        .iter()
        .map(|&t| vocab.symbol(t))
        .collect::<Result<_>>()?;
    let mut statements = Vec::new();
    let mut segment: Vec<&str> = Vec::new();
    let mut question: Vec<&str> = Vec::new();
    let mut in_question = false;
    for w in words {
        if w == "what" {
            in_question = true;
        }
        if in_question {
            question.push(w);
            continue;
        }
        if w == "." {
            statements.push(parse_statement(&segment)?);
            segment.clear();
        } else {
            segment.push(w);
        }
    }
    if !segment.is_empty() {
        return Err(Error::Contract("dangling prompt statement".into()));
    }
    let asked: Vec<String> = question
        .iter()
        .filter(|w| VAR_NAMES.contains(w))
        .map(|w| w.to_string())
        .collect();
    if asked.is_empty() {
        return Err(Error::Contract("prompt question names no variables".into()));
    }
    Ok(PromptSpec { statements, asked })
}

fn parse_statement(words: &[&str]) -> Result<Statement> {
    let parse_num = |s: &str| -> Result<i64> {
        s.parse()
            .map_err(|_| Error::Contract(format!("bad number {s:?} in prompt")))
    };
    match words {
        [v, "=", n] if VAR_NAMES.contains(v) => Ok(Statement {
            var: v.to_string(),
            formula: Formula::Const(parse_num(n)?),
        }),
        [v, "=", u, op, n] if VAR_NAMES.contains(v) && VAR_NAMES.contains(u) => {
            let op = match *op {
                "+" => OpKind::Add,
                "-" => OpKind::Sub,
                "×" => OpKind::Mul,
                other => {
                    return Err(Error::Contract(format!("bad operator {other:?} in prompt")))
                }
            };
            Ok(Statement {
                var: v.to_string(),
                formula: Formula::Apply {
                    lhs: u.to_string(),
                    op,
                    rhs: parse_num(n)?,
                },
            })
        }
        _ => Err(Error::Contract(format!("unparseable prompt statement {words:?}"))),
    }
}

/// Scans CoT tokens for `var = digits` resolutions; first occurrence wins.
fn scan_resolutions(cot_tokens: &[usize]) -> HashMap<String, i64> {
    let vocab = Vocabulary::standard();
    let eq = vocab.equals();
    let mut out = HashMap::new();
    let mut i = 0;
    while i < cot_tokens.len() {
        let sym = match vocab.symbol(cot_tokens[i]) {
            Ok(s) => s,
            Err(_) => break,
        };
        if VAR_NAMES.contains(&sym) && i + 2 <= cot_tokens.len() && cot_tokens.get(i + 1) == Some(&eq)
        {
            let mut j = i + 2;
            let mut value: i64 = 0;
            let mut digits = 0;
            while j < cot_tokens.len() {
                match vocab.digit_value(cot_tokens[j]) {
                    Some(d) if digits < 6 => {
                        value = value * 10 + d;
                        digits += 1;
                        j += 1;
                    }
                    _ => break,
                }
            }
            if digits > 0 {
                out.entry(sym.to_string()).or_insert(value);
                i = j;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Independent arithmetic evaluator: recomputes the dependency chain from
/// the prompt and demands a matching CoT resolution for every asked
/// variable's chain. Returns the derived gold answer, or None when the CoT
/// does not support the chain.
pub fn derive_answer(spec: &PromptSpec, cot_tokens: &[usize]) -> Option<String> {
    let resolutions = scan_resolutions(cot_tokens);
    let mut env: HashMap<String, i64> = HashMap::new();
    let mut answers = Vec::new();
    for st in &spec.statements {
        let expected = match &st.formula {
            Formula::Const(n) => *n,
            Formula::Apply { lhs, op, rhs } => op.apply(*env.get(lhs)?, *rhs),
        };
        // Asked variables must be resolved, correctly, in the CoT. Their
        // chain ancestors likewise when they themselves are resolutions the
        // question depends on transitively through asked order.
        if spec.asked.contains(&st.var) {
            if resolutions.get(&st.var) != Some(&expected) {
                return None;
            }
        }
        env.insert(st.var.clone(), expected);
    }
    for v in &spec.asked {
        answers.push(env.get(v)?.to_string());
    }
    Some(answers.join(" , "))
}

fn cot_statement_text(fillers: &[&str], var: &str, value: i64) -> String {
    let mut parts: Vec<String> = fillers.iter().map(|f| f.to_string()).collect();
    parts.push(var.to_string());
    parts.push("=".to_string());
    parts.push(value.to_string());
    parts.join(" ")
}

/// Generates one chain-arithmetic instance with distractors.
///
/// The prompt holds `n_steps` chain assignments (a constant base plus
/// derived steps) interleaved with `n_distractors` distractor assignments,
/// then asks for the derived chain values. The gold CoT resolves asked and
/// distractor variables in prompt order with occasional filler words; only
/// asked-statement computation tokens are causally required.
pub fn generate_chain_arithmetic(seed: u64, n_steps: usize, n_distractors: usize) -> Result<TaskInstance> {
    if n_steps < 1 {
        return Err(Error::Contract("n_steps must be >= 1".into()));
    }
    if n_steps + n_distractors > VAR_NAMES.len() {
        return Err(Error::Contract(format!(
            "n_steps + n_distractors must be <= {}",
            VAR_NAMES.len()
        )));
    }
    let mut rng = DetRng::derive(seed, &[0x7a5c]);

    let mut vars: Vec<&str> = VAR_NAMES.to_vec();
    rng.shuffle(&mut vars);
    let chain_vars: Vec<String> = vars[..n_steps].iter().map(|s| s.to_string()).collect();
    let distractor_vars: Vec<String> = vars[n_steps..n_steps + n_distractors]
        .iter()
        .map(|s| s.to_string())
        .collect();

    let sample_step = |rng: &mut DetRng, prev: i64| -> Option<(OpKind, i64, i64)> {
        for _ in 0..GEN_RETRIES {
            let (op, k) = match rng.below(4) {
                0 | 1 => (OpKind::Add, rng.range_inclusive(2, 9)),
                2 => (OpKind::Sub, rng.range_inclusive(1, 9)),
                _ => (OpKind::Mul, rng.range_inclusive(2, 3)),
            };
            let v = op.apply(prev, k);
            if (1..=MAX_VALUE).contains(&v) {
                return Some((op, k, v));
            }
        }
        None
    };

    // chain: v0 = const, v_i = v_{i-1} op k
    let mut chain_stmts: Vec<Statement> = Vec::new();
    let mut chain_vals: Vec<i64> = Vec::new();
    let base = rng.range_inclusive(2, 20);
    chain_stmts.push(Statement {
        var: chain_vars[0].clone(),
        formula: Formula::Const(base),
    });
    chain_vals.push(base);
    for i in 1..n_steps {
        let prev = chain_vals[i - 1];
        let (op, k, v) =
            sample_step(&mut rng, prev).ok_or(Error::VocabularyOverflow {
                retries: GEN_RETRIES,
                seed,
            })?;
        chain_stmts.push(Statement {
            var: chain_vars[i].clone(),
            formula: Formula::Apply {
                lhs: chain_vars[i - 1].clone(),
                op,
                rhs: k,
            },
        });
        chain_vals.push(v);
    }

    // distractors: constants or one-hop references to the previous distractor
    let mut distractor_stmts: Vec<Statement> = Vec::new();
    let mut distractor_vals: Vec<i64> = Vec::new();
    for j in 0..n_distractors {
        if j == 0 || rng.below(2) == 0 {
            let v = rng.range_inclusive(2, 20);
            distractor_stmts.push(Statement {
                var: distractor_vars[j].clone(),
                formula: Formula::Const(v),
            });
            distractor_vals.push(v);
        } else {
            let prev = distractor_vals[j - 1];
            let (op, k, v) =
                sample_step(&mut rng, prev).ok_or(Error::VocabularyOverflow {
                    retries: GEN_RETRIES,
                    seed,
                })?;
            distractor_stmts.push(Statement {
                var: distractor_vars[j].clone(),
                formula: Formula::Apply {
                    lhs: distractor_vars[j - 1].clone(),
                    op,
                    rhs: k,
                },
            });
            distractor_vals.push(v);
        }
    }

    // riffle-merge prompt order, preserving both relative orders
    #[derive(Clone, Copy, PartialEq)]
    enum Src {
        Chain,
        Distractor,
    }
    let mut order: Vec<Src> = Vec::new();
    let (mut nc, mut nd) = (n_steps, n_distractors);
    while nc + nd > 0 {
        let pick_chain = nd == 0 || (nc > 0 && rng.below(nc + nd) < nc);
        if pick_chain {
            order.push(Src::Chain);
            nc -= 1;
        } else {
            order.push(Src::Distractor);
            nd -= 1;
        }
    }

    let (mut ci, mut di) = (0usize, 0usize);
    let mut prompt_stmts: Vec<&Statement> = Vec::new();
    for s in &order {
        match s {
            Src::Chain => {
                prompt_stmts.push(&chain_stmts[ci]);
                ci += 1;
            }
            Src::Distractor => {
                prompt_stmts.push(&distractor_stmts[di]);
                di += 1;
            }
        }
    }

    // asked: derived chain vars; the degenerate single-step chain asks its base
    let asked: Vec<String> = if n_steps == 1 {
        vec![chain_vars[0].clone()]
    } else {
        chain_vars[1..].to_vec()
    };
    let asked_vals: Vec<i64> = if n_steps == 1 {
        vec![chain_vals[0]]
    } else {
        chain_vals[1..].to_vec()
    };

    let mut prompt_parts: Vec<String> = Vec::new();
    for st in &prompt_stmts {
        let rhs = match &st.formula {
            Formula::Const(n) => n.to_string(),
            Formula::Apply { lhs, op, rhs } => format!("{lhs} {} {rhs}", op.symbol()),
        };
        prompt_parts.push(format!("{} = {rhs} .", st.var));
    }
    prompt_parts.push(format!("what is {} ?", asked.join(" ")));
    let prompt = prompt_parts.join(" ");

    // gold CoT resolves asked and distractor variables in prompt order
    let value_of = |var: &str| -> i64 {
        if let Some(i) = chain_vars.iter().position(|v| v == var) {
            chain_vals[i]
        } else {
            let i = distractor_vars.iter().position(|v| v == var).unwrap();
            distractor_vals[i]
        }
    };
    let vocab = Vocabulary::standard();
    let mut cot_parts: Vec<String> = Vec::new();
    let mut salient_positions: Vec<usize> = Vec::new();
    let mut cot_token_cursor = 0usize;
    for st in &prompt_stmts {
        let resolved_here = asked.contains(&st.var) || distractor_vars.contains(&st.var);
        if !resolved_here {
            continue;
        }
        let n_fillers = match rng.below(10) {
            0..=4 => 0,
            5..=7 => 1,
            _ => 2,
        };
        let fillers: Vec<&str> = (0..n_fillers)
            .map(|_| FILLERS[rng.below(FILLERS.len())])
            .collect();
        let text = cot_statement_text(&fillers, &st.var, value_of(&st.var));
        let stmt_tokens = vocab.tokenize(&text)?;
        if asked.contains(&st.var) {
            for k in n_fillers..stmt_tokens.len() {
                salient_positions.push(cot_token_cursor + k);
            }
        }
        cot_token_cursor += stmt_tokens.len();
        cot_parts.push(text);
    }
    let gold_cot = cot_parts.join(" ");
    let gold_answer = asked_vals
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" , ");

    let instance = TaskInstance {
        prompt,
        gold_answer,
        gold_cot,
        salient_positions,
        difficulty: n_steps,
        seed,
    };
    verify_instance(&instance)?;
    Ok(instance)
}

/// Generation-time soundness check: the evaluator reproduces the gold answer
/// from the full CoT, deleting any salient token breaks it, and deleting any
/// non-salient token does not.
fn verify_instance(inst: &TaskInstance) -> Result<()> {
    let vocab = Vocabulary::standard();
    let spec = parse_prompt(&inst.prompt)?;
    let cot = vocab.tokenize(&inst.gold_cot)?;
    if inst.salient_positions.is_empty() {
        return Err(Error::Contract("empty salient set".into()));
    }
    match derive_answer(&spec, &cot) {
        Some(a) if a == inst.gold_answer => {}
        other => {
            return Err(Error::Contract(format!(
                "evaluator disagrees with gold answer: {other:?} vs {:?}",
                inst.gold_answer
            )))
        }
    }
    for drop in 0..cot.len() {
        let ablated: Vec<usize> = cot
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != drop)
            .map(|(_, &t)| t)
            .collect();
        let derivable = derive_answer(&spec, &ablated) == Some(inst.gold_answer.clone());
        let salient = inst.salient_positions.contains(&drop);
        if derivable == salient {
            return Err(Error::Contract(format!(
                "ablation mismatch at CoT token {drop} (salient={salient}, derivable={derivable})"
            )));
        }
    }
    Ok(())
}

/// Writes instances as one JSON record per line.
pub fn write_corpus(path: &std::path::Path, instances: &[TaskInstance]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut f, inst)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_corpus(path: &std::path::Path) -> Result<Vec<TaskInstance>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_bijective_and_classed() {
        let v = Vocabulary::standard();
        assert!(v.len() <= 64);
        for id in 0..v.len() {
            let s = v.symbol(id).unwrap();
            assert_eq!(v.id(s), Some(id));
            v.class(id).unwrap();
        }
        assert_eq!(v.id(DELIMITER), Some(2));
    }

    #[test]
    fn delimiter_tokenizes_to_fixed_id() {
        let v = Vocabulary::standard();
        assert_eq!(v.tokenize("####").unwrap(), vec![v.delimiter()]);
    }

    #[test]
    fn class_tagging_example() {
        let v = Vocabulary::standard();
        let toks = v.tokenize("b = a + 2").unwrap();
        let classes: Vec<TokenClass> = toks.iter().map(|&t| v.class(t).unwrap()).collect();
        assert_eq!(
            classes,
            vec![
                TokenClass::Word,
                TokenClass::Symbol,
                TokenClass::Word,
                TokenClass::Symbol,
                TokenClass::Number
            ]
        );
    }

    #[test]
    fn unknown_symbol_is_reported() {
        let v = Vocabulary::standard();
        match v.tokenize("b = zorp") {
            Err(Error::UnknownSymbol { symbol }) => assert_eq!(symbol, "zorp"),
            other => panic!("expected unknown symbol, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_chain_matches_contract() {
        let inst = generate_chain_arithmetic(7, 1, 0).unwrap();
        let spec = parse_prompt(&inst.prompt).unwrap();
        assert_eq!(spec.asked.len(), 1);
        let v = Vocabulary::standard();
        let cot = v.tokenize(&inst.gold_cot).unwrap();
        // every computation token (var, =, digits) of the single statement is salient
        let non_filler: Vec<usize> = cot
            .iter()
            .enumerate()
            .filter(|(_, &t)| v.class(t).unwrap() != TokenClass::Filler)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(inst.salient_positions, non_filler);
        assert_eq!(inst.difficulty, 1);
    }

    #[test]
    fn no_distractors_means_salient_equals_all_non_filler() {
        for seed in 0..20 {
            let inst = generate_chain_arithmetic(seed, 3, 0).unwrap();
            let v = Vocabulary::standard();
            let cot = v.tokenize(&inst.gold_cot).unwrap();
            let non_filler: Vec<usize> = cot
                .iter()
                .enumerate()
                .filter(|(_, &t)| v.class(t).unwrap() != TokenClass::Filler)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(inst.salient_positions, non_filler, "seed {seed}");
        }
    }

    #[test]
    fn evaluator_reproduces_gold_answer_over_many_seeds() {
        // generation itself runs the exhaustive per-token ablation check;
        // this exercises 1000 random instances end to end
        for seed in 0..1000u64 {
            let n_steps = 1 + (seed % 3) as usize;
            let n_distractors = (seed % 6) as usize;
            let inst = generate_chain_arithmetic(seed, n_steps, n_distractors)
                .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            let spec = parse_prompt(&inst.prompt).unwrap();
            let cot = Vocabulary::standard().tokenize(&inst.gold_cot).unwrap();
            assert_eq!(derive_answer(&spec, &cot), Some(inst.gold_answer.clone()));
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = generate_chain_arithmetic(99, 3, 5).unwrap();
        let b = generate_chain_arithmetic(99, 3, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tokenize_detokenize_roundtrip_on_generated_instances() {
        let v = Vocabulary::standard();
        for seed in 0..1000u64 {
            let inst = generate_chain_arithmetic(seed, 1 + (seed % 3) as usize, (seed % 5) as usize)
                .unwrap();
            for text in [&inst.prompt, &inst.gold_cot, &inst.gold_answer] {
                let toks = v.tokenize(text).unwrap();
                assert_eq!(&v.detokenize(&toks).unwrap(), text, "seed {seed}");
            }
        }
    }

    #[test]
    fn segment_splits_spans_and_excludes_delimiter() {
        let inst = generate_chain_arithmetic(3, 2, 2).unwrap();
        let seg = inst.gold_sequence().unwrap();
        let v = Vocabulary::standard();
        assert_eq!(seg.tokens[seg.prompt.1 - 1], v.question_mark());
        let d = seg.delimiter_pos.unwrap();
        assert_eq!(seg.tokens[d], v.delimiter());
        assert_eq!(seg.cot.1, d);
        assert_eq!(seg.answer.0, d + 1);
        assert!(!seg.multi_delimiter);
        assert_eq!(
            v.detokenize(seg.answer_tokens()).unwrap(),
            inst.gold_answer
        );
        assert_eq!(v.detokenize(seg.cot_tokens()).unwrap(), inst.gold_cot);
        // spans partition: prompt | cot | #### | answer | eos
        assert_eq!(seg.prompt.1, seg.cot.0);
        assert_eq!(seg.answer.1, seg.tokens.len() - 1);
    }

    #[test]
    fn segment_without_delimiter_flags_empty_answer() {
        let v = Vocabulary::standard();
        let toks = v.tokenize("a = 3 . what is a ? a = 3").unwrap();
        let seg = segment(&toks);
        assert_eq!(seg.answer.0, seg.answer.1);
        assert!(seg.delimiter_pos.is_none());
        assert_eq!(seg.cot_len(), 3);
    }

    #[test]
    fn segment_uses_first_of_multiple_delimiters() {
        let v = Vocabulary::standard();
        let toks = v
            .tokenize("a = 3 . what is a ? a = 3 #### 3 #### 4")
            .unwrap();
        let seg = segment(&toks);
        assert!(seg.multi_delimiter);
        assert_eq!(v.detokenize(seg.answer_tokens()).unwrap(), "3 #### 4");
        assert_eq!(seg.cot_len(), 3);
    }

    #[test]
    fn segment_roundtrip_over_generated_instances() {
        let v = Vocabulary::standard();
        for seed in 1000..2000u64 {
            let inst =
                generate_chain_arithmetic(seed, 1 + (seed % 3) as usize, (seed % 4) as usize)
                    .unwrap();
            let seg = inst.gold_sequence().unwrap();
            assert_eq!(v.detokenize(seg.cot_tokens()).unwrap(), inst.gold_cot);
            assert_eq!(v.detokenize(seg.answer_tokens()).unwrap(), inst.gold_answer);
            let prompt_wo_bos = &seg.prompt_tokens()[1..];
            assert_eq!(v.detokenize(prompt_wo_bos).unwrap(), inst.prompt);
        }
    }

    #[test]
    fn corpus_roundtrips_through_jsonl() {
        let dir = std::env::temp_dir().join("atman_tasks_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corpus.jsonl");
        let instances: Vec<TaskInstance> = (0..5)
            .map(|s| generate_chain_arithmetic(s, 2, 1).unwrap())
            .collect();
        write_corpus(&path, &instances).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(instances, back);
    }

    #[test]
    fn var_budget_enforced() {
        assert!(generate_chain_arithmetic(1, 10, 10).is_err());
        assert!(generate_chain_arithmetic(1, 0, 3).is_err());
    }
}
