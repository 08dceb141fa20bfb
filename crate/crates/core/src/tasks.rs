//! Synthetic in-context-learning tasks and few-shot prompt assembly.
//!
//! Token layout of a prompt with `S` shots:
//!
//! ```text
//! <X> x_1 <Y> y_1 <SEP> ... <X> x_S <Y> y_S <SEP> <Q> x_q <Y>
//! ```
//!
//! With `S = 0` only the query block `<Q> x_q <Y>` remains. The four
//! separators occupy the head of the vocabulary; task symbols follow them.

use std::fmt;
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::RngState;
use crate::model::ScoredSequence;

pub const TOK_X: u32 = 0;
pub const TOK_Y: u32 = 1;
pub const TOK_Q: u32 = 2;
pub const TOK_SEP: u32 = 3;
/// First id available to task symbols.
pub const FIRST_SYMBOL: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    /// `x -> table(x)`, a balanced map from input symbols onto output symbols.
    SymbolMapping,
    /// `x -> [marker, x]`, one marker per instance; two-token answers.
    CopyWithMarker,
    /// `x -> label(x)`, a balanced random partition of inputs into labels.
    LabelClassification,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 3] = [
        TaskFamily::SymbolMapping,
        TaskFamily::CopyWithMarker,
        TaskFamily::LabelClassification,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TaskFamily::SymbolMapping => "symbol-mapping",
            TaskFamily::CopyWithMarker => "copy-with-marker",
            TaskFamily::LabelClassification => "label-classification",
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task family {s:?}")))
    }
}

/// A contiguous block of token ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolRange {
    pub start: u32,
    pub len: u32,
}

impl SymbolRange {
    pub fn end(&self) -> u32 {
        self.start + self.len
    }

    pub fn token(&self, i: usize) -> u32 {
        self.start + i as u32
    }

    pub fn contains(&self, tok: u32) -> bool {
        tok >= self.start && tok < self.end()
    }

    fn overlaps(&self, other: &SymbolRange) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

/// A task family plus its vocabulary partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub inputs: SymbolRange,
    pub outputs: SymbolRange,
    /// Outputs per library instance: instance `i` answers with block
    /// `i mod (outputs.len / block)` of `outputs`. `None` shares all outputs.
    #[serde(default)]
    pub block: Option<u32>,
}

impl TaskSpec {
    /// Default partition for each family within a 96-token vocabulary. The
    /// families share their input symbols; each mapping instance owns eight
    /// output symbols and each copy instance its own marker.
    pub fn default_for(family: TaskFamily) -> Self {
        let (outputs, block) = match family {
            TaskFamily::SymbolMapping => ((20, 64), Some(8)),
            TaskFamily::CopyWithMarker => ((84, 8), Some(1)),
            TaskFamily::LabelClassification => ((92, 4), None),
        };
        Self {
            family,
            inputs: SymbolRange { start: 4, len: 16 },
            outputs: SymbolRange {
                start: outputs.0,
                len: outputs.1,
            },
            block,
        }
    }

    /// The spec a library instance is generated from: outputs narrowed to
    /// the instance's block.
    pub fn for_instance(&self, instance: usize) -> TaskSpec {
        match self.block {
            Some(b) => {
                let blocks = (self.outputs.len / b).max(1) as usize;
                TaskSpec {
                    outputs: SymbolRange {
                        start: self.outputs.start + (instance % blocks) as u32 * b,
                        len: b,
                    },
                    block: None,
                    ..self.clone()
                }
            }
            None => self.clone(),
        }
    }

    /// Output symbols available to one instance.
    fn instance_outputs(&self) -> u32 {
        self.block.unwrap_or(self.outputs.len)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.inputs.len == 0 || self.outputs.len == 0 {
            return Err(Error::Config(format!(
                "{}: empty symbol range",
                self.family
            )));
        }
        if self.inputs.start < FIRST_SYMBOL || self.outputs.start < FIRST_SYMBOL {
            return Err(Error::Config(format!(
                "{}: symbols overlap the separator tokens",
                self.family
            )));
        }
        if self.inputs.overlaps(&self.outputs) {
            return Err(Error::Config(format!(
                "{}: input and output symbols overlap",
                self.family
            )));
        }
        let top = self.inputs.end().max(self.outputs.end()) as usize;
        if top > vocab_size {
            return Err(Error::Config(format!(
                "{}: symbols need {top} vocabulary entries, model has {vocab_size}",
                self.family
            )));
        }
        if let Some(b) = self.block {
            if b == 0 || self.outputs.len % b != 0 {
                return Err(Error::Config(format!(
                    "{}: output block {b} does not divide {} outputs",
                    self.family, self.outputs.len
                )));
            }
        }
        let n_out = self.instance_outputs();
        match self.family {
            TaskFamily::SymbolMapping if self.inputs.len % n_out != 0 => {
                Err(Error::Config(format!(
                    "symbol-mapping needs a balanced map: {} inputs onto {n_out} outputs",
                    self.inputs.len
                )))
            }
            TaskFamily::LabelClassification if n_out > self.inputs.len => {
                Err(Error::Config("more labels than inputs".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<u32>,
    pub y: Vec<u32>,
}

/// One concrete task: a spec and its generated answer table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub spec: TaskSpec,
    /// Answer for input symbol `i`.
    answers: Vec<Vec<u32>>,
}

/// Draws a task instance over the full output range of `spec` (see
/// [`TaskSpec::for_instance`] for library blocks). Mapping and
/// classification tables are balanced: every output answers
/// `n_inputs / n_outputs` inputs, so equal counts give a bijection.
/// Deterministic in `rng`.
pub fn gen_task(spec: &TaskSpec, rng: &mut RngState) -> Result<Task> {
    let spec = &TaskSpec {
        block: None,
        ..spec.clone()
    };
    spec.validate(usize::MAX)?;
    let n_in = spec.inputs.len as usize;
    let n_out = spec.outputs.len as usize;
    let answers = match spec.family {
        TaskFamily::SymbolMapping | TaskFamily::LabelClassification => {
            let mut labels: Vec<usize> = (0..n_in).map(|i| i % n_out).collect();
            rng.shuffle(&mut labels);
            labels
                .iter()
                .map(|&o| vec![spec.outputs.token(o)])
                .collect()
        }
        TaskFamily::CopyWithMarker => {
            let marker = spec.outputs.token(rng.below(n_out));
            (0..n_in)
                .map(|i| vec![marker, spec.inputs.token(i)])
                .collect()
        }
    };
    Ok(Task {
        spec: spec.clone(),
        answers,
    })
}

impl Task {
    pub fn family(&self) -> TaskFamily {
        self.spec.family
    }

    pub fn n_inputs(&self) -> usize {
        self.answers.len()
    }

    pub fn input_token(&self, i: usize) -> u32 {
        self.spec.inputs.token(i)
    }

    pub fn answer(&self, input: usize) -> &[u32] {
        &self.answers[input]
    }

    pub fn example(&self, input: usize) -> Example {
        Example {
            x: vec![self.input_token(input)],
            y: self.answers[input].clone(),
        }
    }

    /// Answer for an input token, if it belongs to this task.
    pub fn apply(&self, x: u32) -> Option<&[u32]> {
        self.spec
            .inputs
            .contains(x)
            .then(|| self.answers[(x - self.spec.inputs.start) as usize].as_slice())
    }

    /// Inverse of a symbol-mapping table.
    pub fn invert(&self, y: u32) -> Option<u32> {
        if self.family() != TaskFamily::SymbolMapping {
            return None;
        }
        self.answers
            .iter()
            .position(|a| a[0] == y)
            .map(|i| self.input_token(i))
    }

    /// Answer length (1 for mapping and classification, 2 for copy).
    pub fn answer_len(&self) -> usize {
        self.answers[0].len()
    }

    /// Inputs that may demonstrate for `query`: every other input except,
    /// outside classification, those sharing the query's answer.
    pub fn shot_candidates(&self, query: usize) -> Vec<usize> {
        let classify = self.family() == TaskFamily::LabelClassification;
        (0..self.n_inputs())
            .filter(|&i| i != query && (classify || self.answers[i] != self.answers[query]))
            .collect()
    }

    /// Prompt for query input `query` with `shots` distinct demonstrations
    /// from [`Task::shot_candidates`].
    pub fn prompt_for(&self, query: usize, shots: usize, rng: &mut RngState) -> Result<Prompt> {
        let n = self.n_inputs();
        if query >= n {
            return Err(Error::Invalid(format!(
                "query index {query} out of {n} inputs"
            )));
        }
        let pool = self.shot_candidates(query);
        if shots > pool.len() {
            return Err(Error::Invalid(format!(
                "{shots} distinct shots but only {} candidates",
                pool.len()
            )));
        }
        let shot_examples = rng
            .distinct(pool.len(), shots)
            .into_iter()
            .map(|i| self.example(pool[i]))
            .collect();
        let q = self.example(query);
        Ok(Prompt {
            shots: shot_examples,
            query: q.x,
            gold: q.y,
        })
    }

    /// Prompt whose query is drawn uniformly from `pool` (all inputs if empty).
    pub fn prompt_from_pool(
        &self,
        pool: &[usize],
        shots: usize,
        rng: &mut RngState,
    ) -> Result<Prompt> {
        let q = if pool.is_empty() {
            rng.below(self.n_inputs())
        } else {
            pool[rng.below(pool.len())]
        };
        self.prompt_for(q, shots, rng)
    }

    /// Writes every example of the task as one JSON object per line.
    pub fn dump_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for i in 0..self.n_inputs() {
            serde_json::to_writer(&mut out, &self.example(i))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `build_prompt`: a prompt with `shots` demonstrations and a uniformly drawn query.
pub fn build_prompt(task: &Task, shots: usize, rng: &mut RngState) -> Result<Prompt> {
    task.prompt_from_pool(&[], shots, rng)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Few-shot prompt: demonstrations, query input and gold answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub shots: Vec<Example>,
    pub query: Vec<u32>,
    pub gold: Vec<u32>,
}

impl Prompt {
    /// The bare query block `<Q> x <Y>`.
    pub fn query_tokens(&self) -> Vec<u32> {
        let mut t = Vec::with_capacity(self.query.len() + 2);
        t.push(TOK_Q);
        t.extend_from_slice(&self.query);
        t.push(TOK_Y);
        t
    }

    /// Demonstrations followed by the query block.
    pub fn tokens(&self) -> Vec<u32> {
        let mut t = Vec::new();
        for ex in &self.shots {
            t.push(TOK_X);
            t.extend_from_slice(&ex.x);
            t.push(TOK_Y);
            t.extend_from_slice(&ex.y);
            t.push(TOK_SEP);
        }
        t.extend(self.query_tokens());
        t
    }

    /// Same query without demonstrations.
    pub fn zero_shot(&self) -> Prompt {
        Prompt {
            shots: Vec::new(),
            query: self.query.clone(),
            gold: self.gold.clone(),
        }
    }

    /// Input tokens plus teacher-forced gold answer, with the gold tokens as
    /// targets. Returns the sequence and the index of the first answer logit.
    pub fn scored(&self, input: Vec<u32>) -> ScoredSequence {
        let start = input.len() - 1;
        let mut tokens = input;
        tokens.extend_from_slice(&self.gold[..self.gold.len() - 1]);
        let targets = self
            .gold
            .iter()
            .enumerate()
            .map(|(j, &g)| (start + j, g))
            .collect();
        ScoredSequence { tokens, targets }
    }

    /// Full training sequence: every demonstration answer, the query answer
    /// and each closing separator are targets.
    pub fn training_sequence(&self) -> ScoredSequence {
        let mut tokens = Vec::new();
        let mut targets = Vec::new();
        let answer = |tokens: &mut Vec<u32>, targets: &mut Vec<(usize, u32)>, y: &[u32]| {
            for &tok in y.iter().chain(std::iter::once(&TOK_SEP)) {
                targets.push((tokens.len() - 1, tok));
                tokens.push(tok);
            }
        };
        for ex in &self.shots {
            tokens.push(TOK_X);
            tokens.extend_from_slice(&ex.x);
            tokens.push(TOK_Y);
            answer(&mut tokens, &mut targets, &ex.y);
        }
        tokens.push(TOK_Q);
        tokens.extend_from_slice(&self.query);
        tokens.push(TOK_Y);
        answer(&mut tokens, &mut targets, &self.gold);
        ScoredSequence { tokens, targets }
    }
}

/// Closed-form prompt length: `S * (|x| + |y| + 3) + |x| + 2`.
pub fn prompt_len(shots: usize, x_len: usize, y_len: usize) -> usize {
    shots * (x_len + y_len + 3) + x_len + 2
}

/// Recovers demonstrations and query from assembled prompt tokens.
pub fn parse_prompt(tokens: &[u32]) -> Result<(Vec<Example>, Vec<u32>)> {
    let bad = |msg: &str| Error::Format(format!("malformed prompt: {msg}"));
    let mut shots = Vec::new();
    let mut i = 0;
    while i < tokens.len() && tokens[i] == TOK_X {
        let y_at = tokens[i + 1..]
            .iter()
            .position(|&t| t == TOK_Y)
            .ok_or_else(|| bad("demonstration without <Y>"))?
            + i
            + 1;
        let sep_at = tokens[y_at + 1..]
            .iter()
            .position(|&t| t == TOK_SEP)
            .ok_or_else(|| bad("demonstration without <SEP>"))?
            + y_at
            + 1;
        shots.push(Example {
            x: tokens[i + 1..y_at].to_vec(),
            y: tokens[y_at + 1..sep_at].to_vec(),
        });
        i = sep_at + 1;
    }
    if tokens.get(i) != Some(&TOK_Q) || tokens.last() != Some(&TOK_Y) || tokens.len() < i + 3 {
        return Err(bad("missing <Q> x <Y> query block"));
    }
    Ok((shots, tokens[i + 1..tokens.len() - 1].to_vec()))
}

/// Disjoint query pools (input indices) for selection and evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPools {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_eval(
    task: &Task,
    n_train: usize,
    n_test: usize,
    rng: &mut RngState,
) -> Result<QueryPools> {
    let n = task.n_inputs();
    if n_train + n_test > n {
        return Err(Error::Invalid(format!(
            "{n_train} + {n_test} queries requested from {n} input symbols"
        )));
    }
    if n_train == 0 || n_test == 0 {
        return Err(Error::Invalid("query pools must be non-empty".into()));
    }
    let picks = rng.distinct(n, n_train + n_test);
    let mut train = picks[..n_train].to_vec();
    let mut test = picks[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(QueryPools { train, test })
}

/// A fixed family of task instances the model is trained on.
///
/// Instance `i` of a family is generated from its own RNG substream, so the
/// library is a pure function of `(seed, size)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLibrary {
    pub seed: u64,
    pub size: usize,
    pub specs: Vec<TaskSpec>,
}

impl TaskLibrary {
    pub fn new(seed: u64, size: usize, specs: Vec<TaskSpec>) -> Self {
        Self { seed, size, specs }
    }

    /// Every family with its default vocabulary partition.
    pub fn standard(seed: u64, size: usize) -> Self {
        Self::new(
            seed,
            size,
            TaskFamily::ALL
                .iter()
                .map(|&f| TaskSpec::default_for(f))
                .collect(),
        )
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.size == 0 || self.specs.is_empty() {
            return Err(Error::Config("task library is empty".into()));
        }
        for s in &self.specs {
            s.validate(vocab_size)?;
        }
        Ok(())
    }

    pub fn spec(&self, family: TaskFamily) -> Result<&TaskSpec> {
        self.specs
            .iter()
            .find(|s| s.family == family)
            .ok_or_else(|| Error::Config(format!("library has no {family} tasks")))
    }

    pub fn task(&self, family: TaskFamily, instance: usize) -> Result<Task> {
        if instance >= self.size {
            return Err(Error::Invalid(format!(
                "instance {instance} outside library of {}",
                self.size
            )));
        }
        let spec = self.spec(family)?.for_instance(instance);
        let mut rng = RngState::new(self.seed)
            .derive(family.name())
            .substream(instance as u64);
        gen_task(&spec, &mut rng)
    }

    /// Training batch of `batch` sequences, each with a shot count drawn
    /// uniformly from `shots`. Every demonstration answer is a target, so one
    /// sequence also trains all smaller shot counts. Families are drawn with
    /// `weights` (aligned with `specs`); instance and query are uniform.
    pub fn training_batch(
        &self,
        batch: usize,
        shots: RangeInclusive<usize>,
        weights: &[f64],
        rng: &mut RngState,
    ) -> Result<Vec<ScoredSequence>> {
        if weights.len() != self.specs.len() {
            return Err(Error::Config(format!(
                "{} family weights for {} families",
                weights.len(),
                self.specs.len()
            )));
        }
        if shots.is_empty() {
            return Err(Error::Config("empty training shot range".into()));
        }
        let pick = WeightedIndex::new(weights)
            .map_err(|e| Error::Config(format!("bad family weights: {e}")))?;
        (0..batch)
            .map(|_| {
                let spec = &self.specs[pick.sample(rng)];
                let task = self.task(spec.family, rng.below(self.size))?;
                let s = shots.start() + rng.below(shots.end() - shots.start() + 1);
                let s = s.min(task.shot_candidates(0).len());
                Ok(build_prompt(&task, s, rng)?.training_sequence())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mapping(seed: u64) -> Task {
        gen_task(
            &TaskSpec::default_for(TaskFamily::SymbolMapping).for_instance(0),
            &mut RngState::new(seed),
        )
        .unwrap()
    }

    fn bijection(seed: u64) -> Task {
        let mut spec = TaskSpec::default_for(TaskFamily::SymbolMapping).for_instance(0);
        spec.outputs.len = 16;
        gen_task(&spec, &mut RngState::new(seed)).unwrap()
    }

    #[test]
    fn gen_task_is_seeded() {
        assert_eq!(mapping(1), mapping(1));
        assert_ne!(mapping(1), mapping(2));
    }

    #[test]
    fn equal_ranges_give_a_bijection() {
        let t = bijection(7);
        for i in 0..t.n_inputs() {
            let x = t.input_token(i);
            let y = t.apply(x).unwrap()[0];
            assert!(t.spec.outputs.contains(y));
            assert_eq!(t.invert(y), Some(x));
        }
        for o in 0..t.spec.outputs.len {
            let y = t.spec.outputs.token(o as usize);
            let x = t.invert(y).unwrap();
            assert_eq!(t.apply(x).unwrap()[0], y);
        }
    }

    #[test]
    fn mapping_is_balanced_onto_its_block() {
        let lib = TaskLibrary::standard(3, 8);
        let mut blocks = std::collections::BTreeSet::new();
        for i in 0..8 {
            let t = lib.task(TaskFamily::SymbolMapping, i).unwrap();
            assert_eq!(
                t.spec.outputs,
                SymbolRange {
                    start: 20 + 8 * i as u32,
                    len: 8
                }
            );
            let mut counts = std::collections::BTreeMap::new();
            for x in 0..t.n_inputs() {
                *counts.entry(t.answer(x)[0]).or_insert(0) += 1;
            }
            assert_eq!(counts.len(), 8);
            assert!(counts.values().all(|&c| c == 2));
            blocks.insert(t.spec.outputs.start);
        }
        assert_eq!(blocks.len(), 8);
        let markers: std::collections::BTreeSet<u32> = (0..8)
            .map(|i| lib.task(TaskFamily::CopyWithMarker, i).unwrap().answer(0)[0])
            .collect();
        assert_eq!(markers.len(), 8);
    }

    #[test]
    fn held_out_gold_never_appears_in_shots() {
        let t = mapping(5);
        for q in 0..t.n_inputs() {
            assert_eq!(t.shot_candidates(q).len(), 14);
            let p = t.prompt_for(q, 14, &mut RngState::new(q as u64)).unwrap();
            assert!(p.shots.iter().all(|e| e.y != p.gold && e.x != p.query));
            assert!(t.prompt_for(q, 15, &mut RngState::new(0)).is_err());
        }
    }

    #[test]
    fn specs_are_checked() {
        let mut s = TaskSpec::default_for(TaskFamily::SymbolMapping);
        s.block = Some(6);
        assert!(s.validate(96).is_err());
        s.block = Some(32);
        assert!(s.validate(96).is_err());
        s.block = None;
        assert!(s.validate(96).is_err());
        let s = TaskSpec::default_for(TaskFamily::CopyWithMarker);
        assert!(s.validate(64).is_err());
        assert!(s.validate(96).is_ok());
        let lib = TaskLibrary::standard(0, 8);
        assert!(lib.validate(96).is_ok());
    }

    #[test]
    fn zero_shot_prompt_is_query_only() {
        let t = mapping(3);
        let p = t.prompt_for(5, 0, &mut RngState::new(0)).unwrap();
        assert_eq!(p.tokens(), vec![TOK_Q, t.input_token(5), TOK_Y]);
        assert_eq!(p.tokens(), p.query_tokens());
    }

    #[test]
    fn four_shot_prompt_layout() {
        let t = mapping(3);
        let p = t.prompt_for(2, 4, &mut RngState::new(9)).unwrap();
        let toks = p.tokens();
        assert_eq!(toks.len(), prompt_len(4, 1, 1));
        for (k, ex) in p.shots.iter().enumerate() {
            let block = &toks[k * 5..k * 5 + 5];
            assert_eq!(block, &[TOK_X, ex.x[0], TOK_Y, ex.y[0], TOK_SEP]);
            assert_ne!(ex.x, p.query);
            assert_ne!(ex.y, p.gold);
        }
        let xs: std::collections::BTreeSet<_> = p.shots.iter().map(|e| e.x[0]).collect();
        assert_eq!(xs.len(), 4);
    }

    #[test]
    fn copy_prompts_have_two_token_answers() {
        let lib = TaskLibrary::standard(5, 4);
        let t = lib.task(TaskFamily::CopyWithMarker, 1).unwrap();
        let p = t.prompt_for(0, 3, &mut RngState::new(1)).unwrap();
        assert_eq!(p.gold.len(), 2);
        assert_eq!(p.tokens().len(), prompt_len(3, 1, 2));
        let s = p.scored(p.query_tokens());
        assert_eq!(s.tokens.len(), 4);
        assert_eq!(s.targets, vec![(2, p.gold[0]), (3, p.gold[1])]);
    }

    #[test]
    fn training_sequence_targets_answers_and_separators() {
        let t = mapping(4);
        let p = t.prompt_for(1, 2, &mut RngState::new(2)).unwrap();
        let s = p.training_sequence();
        assert_eq!(s.tokens.len(), p.tokens().len() + 2);
        assert_eq!(s.targets.len(), 6);
        for &(pos, tok) in &s.targets {
            assert_eq!(s.tokens[pos + 1], tok);
        }
        assert_eq!(s.targets.last().unwrap().1, TOK_SEP);
    }

    #[test]
    fn split_eval_pools() {
        let t = mapping(6);
        let a = split_eval(&t, 8, 8, &mut RngState::new(3)).unwrap();
        let b = split_eval(&t, 8, 8, &mut RngState::new(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.test.len()), (8, 8));
        assert!(a.train.iter().all(|q| !a.test.contains(q)));
        assert!(split_eval(&t, 10, 7, &mut RngState::new(3)).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.jsonl");
        let t = mapping(8);
        t.dump_jsonl(&path).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 16);
        assert_eq!(back[3], t.example(3));
    }

    #[test]
    fn library_instances_are_stable() {
        let lib = TaskLibrary::standard(11, 8);
        let a = lib.task(TaskFamily::SymbolMapping, 3).unwrap();
        assert_eq!(a, lib.task(TaskFamily::SymbolMapping, 3).unwrap());
        assert_ne!(a, lib.task(TaskFamily::SymbolMapping, 4).unwrap());
        assert!(lib.task(TaskFamily::SymbolMapping, 8).is_err());
    }

    proptest! {
        #[test]
        fn prompts_parse_back(seed in 0u64..500, shots in 0usize..8, fam in 0usize..3) {
            let lib = TaskLibrary::standard(seed, 4);
            let t = lib.task(TaskFamily::ALL[fam], (seed % 4) as usize).unwrap();
            let p = build_prompt(&t, shots, &mut RngState::new(seed)).unwrap();
            let toks = p.tokens();
            prop_assert_eq!(toks.len(), prompt_len(shots, 1, t.answer_len()));
            let (ex, q) = parse_prompt(&toks).unwrap();
            prop_assert_eq!(ex, p.shots);
            prop_assert_eq!(q, p.query);
        }
    }
}
