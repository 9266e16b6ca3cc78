//! Task streams: the sample model, deterministic synthetic generation,
//! format inference, serialization to token ids and the line-delimited
//! stream file format.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::vocab::{self, option_label, Vocab, EOS, SEP};

pub const STREAM_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Extractive,
    Abstractive,
    MultiChoice,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::Extractive, Format::Abstractive, Format::MultiChoice];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn marker(self) -> &'static str {
        match self {
            Format::Extractive => vocab::EXT_TOKEN,
            Format::Abstractive => vocab::ABS_TOKEN,
            Format::MultiChoice => vocab::MC_TOKEN,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Format::Extractive => "ext",
            Format::Abstractive => "abs",
            Format::MultiChoice => "mc",
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Extractive => "extractive",
            Format::Abstractive => "abstractive",
            Format::MultiChoice => "multichoice",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub context: String,
    pub question: String,
    pub answer: String,
    pub format: Format,
    pub task_id: Option<u32>,
    pub options: Option<Vec<String>>,
}

impl Sample {
    /// The question as the model and the query encoder see it: options, if
    /// any, are rendered after it as `(A) x (B) y ...` in the given order.
    pub fn full_question(&self) -> String {
        let mut q = self.question.clone();
        if let Some(opts) = &self.options {
            for (i, o) in opts.iter().enumerate() {
                q.push(' ');
                q.push_str(&option_label(i));
                q.push(' ');
                q.push_str(o);
            }
        }
        q
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if vocab::tokenize(&self.answer).next().is_none() {
            return Err("answer is empty".into());
        }
        match (&self.format, &self.options) {
            (Format::MultiChoice, None) => return Err("multichoice sample has no options".into()),
            (Format::MultiChoice, Some(opts)) => {
                if opts.len() < 2 {
                    return Err("multichoice sample needs at least 2 options".into());
                }
                if opts.len() > vocab::MAX_OPTIONS {
                    return Err(format!("more than {} options", vocab::MAX_OPTIONS));
                }
                let answer = normalize_answer(&self.answer);
                let hits = opts.iter().filter(|o| normalize_answer(o) == answer).count();
                if hits != 1 {
                    return Err(format!("answer matches {hits} options, expected exactly 1"));
                }
            }
            (_, Some(_)) => return Err("options are only allowed for multichoice".into()),
            (_, None) => {}
        }
        let inferred = infer_format(&self.context, &self.full_question());
        if inferred != self.format {
            return Err(format!(
                "declared format {} but the text reads as {}",
                self.format, inferred
            ));
        }
        Ok(())
    }
}

/// Collapses runs of whitespace and trims.
pub fn normalize_answer(s: &str) -> String {
    vocab::tokenize(s).collect::<Vec<_>>().join(" ")
}

/// Format of a sample judged from its text alone. `question` is the full
/// question, options included.
pub fn infer_format(context: &str, question: &str) -> Format {
    let first_option = option_label(0);
    if vocab::tokenize(question).any(|t| t == first_option) {
        return Format::MultiChoice;
    }
    let ext = vocab::EXT_TOKEN;
    if vocab::tokenize(context).chain(vocab::tokenize(question)).any(|t| t == ext) {
        return Format::Extractive;
    }
    Format::Abstractive
}

/// Model input for a `(context, full question)` pair under `format`.
pub fn encode_input(vocab: &Vocab, format: Format, context: &str, question: &str) -> Vec<usize> {
    let mut input = vec![vocab.id(format.marker())];
    input.extend(vocab.encode(context));
    input.push(SEP);
    input.extend(vocab.encode(question));
    input
}

/// `(input, target)` token ids. Input is the format marker, the context, a
/// separator and the full question; target is the answer followed by EOS.
pub fn serialize_sample(sample: &Sample, vocab: &Vocab) -> (Vec<usize>, Vec<usize>) {
    let input = encode_input(vocab, sample.format, &sample.context, &sample.full_question());
    let mut target = vocab.encode(&sample.answer);
    target.push(EOS);
    (input, target)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskDef {
    pub id: u32,
    pub name: String,
    pub format: Format,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskDef {
    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskStream {
    pub seen: Vec<TaskDef>,
    pub unseen: Vec<TaskDef>,
    pub order_seed: u64,
}

impl TaskStream {
    pub fn tasks(&self) -> impl Iterator<Item = &TaskDef> {
        self.seen.iter().chain(&self.unseen)
    }

    pub fn task(&self, id: u32) -> Option<&TaskDef> {
        self.tasks().find(|t| t.id == id)
    }

    /// Vocabulary over every token in the stream.
    pub fn vocab(&self) -> Vocab {
        let mut words = Vec::new();
        for t in self.tasks() {
            for s in t.samples() {
                words.extend(vocab::tokenize(&s.context));
                words.extend(vocab::tokenize(&s.question));
                words.extend(vocab::tokenize(&s.answer));
                if let Some(o) = &s.options {
                    words.extend(o.iter().flat_map(|x| vocab::tokenize(x)));
                }
            }
        }
        Vocab::build(words)
    }

    /// Learning order of the seen tasks as indices into `seen`: a seeded
    /// permutation, or the stored order when `order_seed` is `None`.
    pub fn curriculum(&self, order_seed: Option<u64>) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.seen.len()).collect();
        if let Some(s) = order_seed {
            order.shuffle(&mut seed::rng(s, &[seed::stream::CURRICULUM]));
        }
        order
    }

    pub fn validate(&self) -> Result<()> {
        if self.seen.is_empty() {
            return Err(Error::NoTasks);
        }
        let n = self.seen.len() as u32;
        for (i, t) in self.seen.iter().enumerate() {
            if t.id != i as u32 + 1 {
                return Err(Error::Validation(format!(
                    "seen task ids must be 1..{n} in order, found {} at position {}",
                    t.id,
                    i + 1
                )));
            }
            if t.train.is_empty() {
                return Err(Error::Validation(format!("seen task {} has no training samples", t.id)));
            }
        }
        for (i, t) in self.unseen.iter().enumerate() {
            if t.id != n + i as u32 + 1 {
                return Err(Error::Validation(format!(
                    "unseen task ids must follow the seen ids, found {}",
                    t.id
                )));
            }
        }
        if self.seen.len() >= Format::ALL.len() {
            for f in Format::ALL {
                if !self.seen.iter().any(|t| t.format == f) {
                    return Err(Error::Validation(format!("no seen task has format {f}")));
                }
            }
        }
        for t in &self.unseen {
            if !self.seen.iter().any(|s| s.format == t.format) {
                return Err(Error::Validation(format!(
                    "unseen task {} has format {} which no seen task has",
                    t.id, t.format
                )));
            }
        }
        let mut owner: BTreeMap<(String, String, String), u32> = BTreeMap::new();
        for t in self.tasks() {
            for s in t.samples() {
                let name = format!("task {} `{}`", t.id, s.question);
                if s.format != t.format {
                    return Err(Error::InvalidSample {
                        sample: name,
                        reason: format!("format {} differs from task format {}", s.format, t.format),
                    });
                }
                if s.task_id != Some(t.id) {
                    return Err(Error::InvalidSample {
                        sample: name,
                        reason: "task_id does not match its task".into(),
                    });
                }
                s.validate().map_err(|reason| Error::InvalidSample { sample: name.clone(), reason })?;
                let key = (s.context.clone(), s.full_question(), s.answer.clone());
                if let Some(&other) = owner.get(&key) {
                    if other != t.id {
                        return Err(Error::InvalidSample {
                            sample: name,
                            reason: format!("also appears in task {other}"),
                        });
                    }
                }
                owner.insert(key, t.id);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSpec {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub samples_per_split: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            n_seen: 8,
            n_unseen: 3,
            samples_per_split: 512,
            vocab_size: 128,
            seed: 42,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_seen < Format::ALL.len() {
            return Err(Error::field("n_seen", "must be at least 3 (one task per format)"));
        }
        if self.vocab_size < 16 {
            return Err(Error::field("vocab_size", "must be at least 16"));
        }
        if self.samples_per_split < 8 {
            return Err(Error::field("samples_per_split", "must be at least 8"));
        }
        Ok(())
    }
}

/// Filler tokens per context.
const FILLER: usize = 6;
/// Size of each task's word window.
const DOMAIN: usize = 12;
/// Length of the transformed subsequence.
const SPAN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Transform {
    Reverse,
    Rotate1,
    Swap12,
    Rotate2,
    Swap23,
    Copy,
    Sort,
}

const TRANSFORMS: [Transform; 7] = [
    Transform::Reverse,
    Transform::Rotate1,
    Transform::Swap12,
    Transform::Rotate2,
    Transform::Swap23,
    Transform::Copy,
    Transform::Sort,
];

impl Transform {
    fn name(self) -> &'static str {
        match self {
            Transform::Reverse => "reverse",
            Transform::Rotate1 => "rotate1",
            Transform::Swap12 => "swap12",
            Transform::Rotate2 => "rotate2",
            Transform::Swap23 => "swap23",
            Transform::Copy => "copy",
            Transform::Sort => "sort",
        }
    }

    /// `span` holds indices into the task's word window.
    fn apply(self, span: &[usize]) -> Vec<usize> {
        let (a, b, c) = (span[0], span[1], span[2]);
        match self {
            Transform::Reverse => vec![c, b, a],
            Transform::Rotate1 => vec![b, c, a],
            Transform::Swap12 => vec![b, a, c],
            Transform::Rotate2 => vec![c, a, b],
            Transform::Swap23 => vec![a, c, b],
            Transform::Copy => vec![a, b, c],
            Transform::Sort => {
                let mut v = vec![a, b, c];
                v.sort_unstable();
                v
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Predicate {
    InContext,
    First,
    Last,
    Absent,
    /// Equal to the context token at this position.
    At(usize),
}

impl Predicate {
    fn from_param(k: usize) -> Self {
        match k {
            0 => Predicate::InContext,
            1 => Predicate::First,
            2 => Predicate::Last,
            3 => Predicate::Absent,
            _ => Predicate::At(1 + (k - 4) % (FILLER - 2)),
        }
    }

    fn name(self) -> String {
        match self {
            Predicate::InContext => "present".into(),
            Predicate::First => "first".into(),
            Predicate::Last => "last".into(),
            Predicate::Absent => "absent".into(),
            Predicate::At(p) => format!("at{p}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Rule {
    Extract { marker: usize },
    Transform { kind: Transform, offset: usize, param: usize },
    Choose { predicate: Predicate, param: usize },
}

impl Rule {
    fn new(format: Format, param: usize) -> Self {
        match format {
            Format::Extractive => Rule::Extract { marker: param },
            Format::Abstractive => Rule::Transform {
                kind: TRANSFORMS[param % TRANSFORMS.len()],
                offset: param / TRANSFORMS.len(),
                param,
            },
            Format::MultiChoice => Rule::Choose {
                predicate: Predicate::from_param(param),
                param,
            },
        }
    }

    fn name(&self) -> String {
        match self {
            Rule::Extract { marker } => format!("ext-m{marker}"),
            Rule::Transform { kind, offset, .. } if *offset == 0 => format!("abs-{}", kind.name()),
            Rule::Transform { kind, offset, .. } => format!("abs-{}-o{offset}", kind.name()),
            Rule::Choose { predicate, .. } => format!("mc-{}", predicate.name()),
        }
    }
}

struct TaskGen {
    words: Vec<String>,
    rule: Rule,
}

impl TaskGen {
    fn sample<R: Rng>(&self, rng: &mut R, format: Format, task_id: u32) -> Sample {
        let w = |i: usize| self.words[i].clone();
        let pick = |rng: &mut R| rng.gen_range(0..self.words.len());
        let (context, question, answer, options) = match self.rule {
            Rule::Extract { marker } => {
                let mut ctx: Vec<String> = (0..FILLER).map(|_| w(pick(rng))).collect();
                let ans = w(pick(rng));
                let pos = rng.gen_range(0..=FILLER);
                ctx.insert(pos, ans.clone());
                ctx.insert(pos, format!("m{marker}"));
                (ctx.join(" "), format!("{} after m{marker}", vocab::EXT_TOKEN), ans, None)
            }
            Rule::Transform { kind, offset, param } => {
                let span: Vec<usize> = rand::seq::index::sample(rng, self.words.len(), SPAN).into_vec();
                let mut ctx: Vec<String> = (0..offset).map(|_| w(pick(rng))).collect();
                ctx.push("|".into());
                ctx.extend(span.iter().map(|&i| w(i)));
                ctx.push("|".into());
                ctx.extend((0..FILLER - SPAN).map(|_| w(pick(rng))));
                let ans: Vec<String> = kind.apply(&span).into_iter().map(w).collect();
                (ctx.join(" "), format!("rule r{param}"), ans.join(" "), None)
            }
            Rule::Choose { predicate, param } => {
                let n = self.words.len();
                let ctx_idx: Vec<usize> = match predicate {
                    // Needs at least two distinct context tokens for distractors.
                    Predicate::Absent => rand::seq::index::sample(rng, n, FILLER).into_vec(),
                    _ => (0..FILLER).map(|_| pick(rng)).collect(),
                };
                let in_ctx: HashSet<usize> = ctx_idx.iter().copied().collect();
                let outside: Vec<usize> = (0..n).filter(|i| !in_ctx.contains(i)).collect();
                let (ans, pool): (usize, Vec<usize>) = match predicate {
                    Predicate::InContext => (ctx_idx[rng.gen_range(0..FILLER)], outside.clone()),
                    Predicate::Absent => {
                        let a = outside[rng.gen_range(0..outside.len())];
                        (a, in_ctx.iter().copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect())
                    }
                    Predicate::First => (ctx_idx[0], (0..n).filter(|&i| i != ctx_idx[0]).collect()),
                    Predicate::Last => (
                        ctx_idx[FILLER - 1],
                        (0..n).filter(|&i| i != ctx_idx[FILLER - 1]).collect(),
                    ),
                    Predicate::At(p) => (ctx_idx[p], (0..n).filter(|&i| i != ctx_idx[p]).collect()),
                };
                let mut opts: Vec<usize> = pool.choose_multiple(rng, 2).copied().collect();
                opts.insert(rng.gen_range(0..=opts.len()), ans);
                let ctx: Vec<String> = ctx_idx.into_iter().map(w).collect();
                (
                    ctx.join(" "),
                    format!("pick p{param}"),
                    w(ans),
                    Some(opts.into_iter().map(w).collect()),
                )
            }
        };
        Sample {
            context,
            question,
            answer,
            format,
            task_id: Some(task_id),
            options,
        }
    }
}

/// Deterministic synthetic stream. Formats are assigned round-robin; within
/// a format each task gets the next rule parameter, and unseen tasks take
/// the parameters after all seen ones, so their rules are held out. Each
/// seen task draws words from its own window of the word list; an unseen
/// task borrows the window of a seen task of another format, so its rule is
/// new but its words are not.
pub fn gen_synthetic_stream(spec: &StreamSpec) -> Result<TaskStream> {
    spec.validate()?;
    let total = spec.n_seen + spec.n_unseen;
    let stride = (spec.vocab_size / spec.n_seen).max(1);
    let width = DOMAIN.min(spec.vocab_size);
    let mut next_param = [0usize; 3];
    let mut plans = Vec::with_capacity(total);
    for t in 0..spec.n_seen {
        let f = Format::ALL[t % 3];
        plans.push((f, next_param[f.index()]));
        next_param[f.index()] += 1;
    }
    for t in 0..spec.n_unseen {
        let f = Format::ALL[t % 3];
        plans.push((f, next_param[f.index()]));
        next_param[f.index()] += 1;
    }

    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    for (t, &(format, param)) in plans.iter().enumerate() {
        let id = t as u32 + 1;
        let start = if t < spec.n_seen {
            t * stride
        } else {
            ((t - spec.n_seen + 1) % spec.n_seen) * stride
        };
        let words: Vec<String> = (0..width)
            .map(|j| format!("w{}", (start + j) % spec.vocab_size))
            .collect();
        let gen = TaskGen {
            words,
            rule: Rule::new(format, param),
        };
        let is_seen = t < spec.n_seen;
        let wanted = if is_seen { 3 * spec.samples_per_split } else { spec.samples_per_split };
        let mut rng = seed::rng(spec.seed, &[seed::stream::GENERATOR, id as u64]);
        let mut keys = HashSet::new();
        let mut samples = Vec::with_capacity(wanted);
        let mut attempts = 0usize;
        while samples.len() < wanted {
            attempts += 1;
            if attempts > 1000 * wanted {
                return Err(Error::field(
                    "samples_per_split",
                    format!("task {id} cannot produce {wanted} distinct samples"),
                ));
            }
            let s = gen.sample(&mut rng, format, id);
            if keys.insert((s.context.clone(), s.full_question())) {
                samples.push(s);
            }
        }
        let name = format!("t{id}-{}", gen.rule.name());
        let mut def = TaskDef {
            id,
            name,
            format,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        if is_seen {
            let n = spec.samples_per_split;
            def.test = samples.split_off(2 * n);
            def.val = samples.split_off(n);
            def.train = samples;
            seen.push(def);
        } else {
            def.test = samples;
            unseen.push(def);
        }
    }
    let stream = TaskStream {
        seen,
        unseen,
        order_seed: spec.seed,
    };
    stream.validate()?;
    Ok(stream)
}

// ---------------------------------------------------------------------------
// Stream files
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskHeader {
    id: u32,
    name: String,
    format: Format,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    n_seen: usize,
    n_unseen: usize,
    order_seed: u64,
    #[serde(default)]
    tasks: Vec<TaskHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderLine {
    manifest: Manifest,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    task_id: Option<u32>,
    split: Split,
    format: Format,
    context: String,
    question: String,
    answer: String,
    #[serde(default)]
    options: Option<Vec<String>>,
}

pub fn write_stream<W: Write>(stream: &TaskStream, mut out: W) -> Result<()> {
    let header = HeaderLine {
        manifest: Manifest {
            version: STREAM_VERSION,
            n_seen: stream.seen.len(),
            n_unseen: stream.unseen.len(),
            order_seed: stream.order_seed,
            tasks: stream
                .tasks()
                .map(|t| TaskHeader {
                    id: t.id,
                    name: t.name.clone(),
                    format: t.format,
                })
                .collect(),
        },
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for t in stream.tasks() {
        for (split, samples) in [(Split::Train, &t.train), (Split::Val, &t.val), (Split::Test, &t.test)] {
            for s in samples {
                let r = Record {
                    task_id: s.task_id,
                    split,
                    format: s.format,
                    context: s.context.clone(),
                    question: s.question.clone(),
                    answer: s.answer.clone(),
                    options: s.options.clone(),
                };
                serde_json::to_writer(&mut out, &r)?;
                out.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

pub fn save_stream(stream: &TaskStream, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_stream(stream, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_stream<R: BufRead>(input: R) -> Result<TaskStream> {
    let mut lines = input.lines().enumerate().filter_map(|(i, l)| match l {
        Ok(s) if s.trim().is_empty() => None,
        other => Some((i + 1, other)),
    });
    let (hline, header) = match lines.next() {
        None => return Err(Error::NoTasks),
        Some((n, l)) => (n, l?),
    };
    let manifest = serde_json::from_str::<HeaderLine>(&header)
        .map_err(|e| Error::Parse {
            line: hline,
            reason: format!("bad manifest header: {e}"),
        })?
        .manifest;
    if manifest.version != STREAM_VERSION {
        return Err(Error::Parse {
            line: hline,
            reason: format!("unsupported version {}", manifest.version),
        });
    }
    let total = manifest.n_seen + manifest.n_unseen;
    let mut tasks: BTreeMap<u32, TaskDef> = BTreeMap::new();
    for h in &manifest.tasks {
        tasks.insert(
            h.id,
            TaskDef {
                id: h.id,
                name: h.name.clone(),
                format: h.format,
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
            },
        );
    }
    for (line, text) in lines {
        let text = text?;
        let r: Record = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line,
            reason: e.to_string(),
        })?;
        let id = r.task_id.ok_or_else(|| Error::Parse {
            line,
            reason: "record has no task_id".into(),
        })?;
        if id == 0 || id as usize > total {
            return Err(Error::Parse {
                line,
                reason: format!("task_id {id} outside 1..={total}"),
            });
        }
        let sample = Sample {
            context: r.context,
            question: r.question,
            answer: r.answer,
            format: r.format,
            task_id: Some(id),
            options: r.options,
        };
        sample.validate().map_err(|reason| Error::InvalidSample {
            sample: format!("line {line} (task {id})"),
            reason,
        })?;
        let task = tasks.entry(id).or_insert_with(|| TaskDef {
            id,
            name: format!("task{id}"),
            format: sample.format,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        });
        match r.split {
            Split::Train => task.train.push(sample),
            Split::Val => task.val.push(sample),
            Split::Test => task.test.push(sample),
        }
    }
    if tasks.values().all(|t| t.samples().next().is_none()) {
        return Err(Error::NoTasks);
    }
    if tasks.len() != total {
        return Err(Error::Validation(format!(
            "manifest declares {total} tasks but the file has {}",
            tasks.len()
        )));
    }
    let mut all: Vec<TaskDef> = tasks.into_values().collect();
    let unseen = all.split_off(manifest.n_seen);
    let stream = TaskStream {
        seen: all,
        unseen,
        order_seed: manifest.order_seed,
    };
    stream.validate()?;
    Ok(stream)
}

pub fn load_stream(path: &Path) -> Result<TaskStream> {
    let f = std::fs::File::open(path)?;
    read_stream(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> StreamSpec {
        StreamSpec {
            n_seen: 3,
            n_unseen: 0,
            samples_per_split: 8,
            vocab_size: 32,
            seed: 7,
        }
    }

    #[test]
    fn default_stream_has_eight_seen_and_three_unseen() {
        let s = gen_synthetic_stream(&StreamSpec::default()).unwrap();
        assert_eq!(s.seen.len(), 8);
        assert_eq!(s.unseen.len(), 3);
        let ids: Vec<u32> = s.tasks().map(|t| t.id).collect();
        assert_eq!(ids, (1..=11).collect::<Vec<_>>());
        for t in &s.unseen {
            assert!(t.train.is_empty() && !t.test.is_empty());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_synthetic_stream(&small()).unwrap();
        let b = gen_synthetic_stream(&small()).unwrap();
        assert_eq!(a, b);
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        write_stream(&a, &mut ba).unwrap();
        write_stream(&b, &mut bb).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn too_few_tasks_is_rejected_naming_the_field() {
        let spec = StreamSpec { n_seen: 2, ..small() };
        match gen_synthetic_stream(&spec) {
            Err(Error::InvalidField { field, .. }) => assert_eq!(field, "n_seen"),
            other => panic!("unexpected {other:?}"),
        }
        for (spec, field) in [
            (StreamSpec { vocab_size: 15, ..small() }, "vocab_size"),
            (StreamSpec { samples_per_split: 7, ..small() }, "samples_per_split"),
        ] {
            match gen_synthetic_stream(&spec) {
                Err(Error::InvalidField { field: f, .. }) => assert_eq!(f, field),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn unseen_rules_are_held_out() {
        let s = gen_synthetic_stream(&StreamSpec::default()).unwrap();
        let rule = |n: &str| n.split_once('-').unwrap().1.to_string();
        let seen: HashSet<String> = s.seen.iter().map(|t| rule(&t.name)).collect();
        for t in &s.unseen {
            assert!(!seen.contains(&rule(&t.name)), "{} reuses a seen rule", t.name);
            assert!(s.seen.iter().any(|x| x.format == t.format));
        }
    }

    #[test]
    fn infer_format_cases() {
        assert_eq!(infer_format("x y", "pick p0 (A) a (B) b"), Format::MultiChoice);
        assert_eq!(infer_format("x y", "<ext> after m0"), Format::Extractive);
        assert_eq!(infer_format("x y", "what is it"), Format::Abstractive);
    }

    #[test]
    fn serialize_and_round_trip_answer() {
        let s = Sample {
            context: "ab c".into(),
            question: "q?".into(),
            answer: "c".into(),
            format: Format::Abstractive,
            task_id: None,
            options: None,
        };
        let v = Vocab::build(["ab", "c", "q?"]);
        let (input, target) = serialize_sample(&s, &v);
        assert_eq!(input.last(), Some(&v.id("q?")));
        assert_eq!(input[0], v.id(vocab::ABS_TOKEN));
        assert_eq!(target, vec![v.id("c"), EOS]);
        assert_eq!(v.decode(&target), "c");
    }

    #[test]
    fn multichoice_serialization_matches_frozen_fixture() {
        let s = Sample {
            context: "w1 w2".into(),
            question: "pick p0".into(),
            answer: "w2".into(),
            format: Format::MultiChoice,
            task_id: Some(1),
            options: Some(vec!["w3".into(), "w2".into()]),
        };
        let v = Vocab::build(["w1", "w2", "w3", "pick", "p0"]);
        let (input, _) = serialize_sample(&s, &v);
        let text: Vec<&str> = input.iter().map(|&i| v.token(i)).collect();
        assert_eq!(
            text.join(" "),
            "<mc> w1 w2 <sep> pick p0 (A) w3 (B) w2"
        );
    }

    #[test]
    fn stream_file_round_trip() {
        let s = gen_synthetic_stream(&small()).unwrap();
        let mut buf = Vec::new();
        write_stream(&s, &mut buf).unwrap();
        let back = read_stream(&buf[..]).unwrap();
        assert_eq!(back, s);
        let mut buf2 = Vec::new();
        write_stream(&back, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn empty_file_has_no_tasks() {
        assert!(matches!(read_stream(&b""[..]), Err(Error::NoTasks)));
    }

    #[test]
    fn multichoice_without_options_is_rejected() {
        let text = concat!(
            r#"{"manifest":{"version":1,"n_seen":1,"n_unseen":0,"order_seed":0}}"#,
            "\n",
            r#"{"task_id":1,"split":"train","format":"multichoice","context":"a","question":"b","answer":"a"}"#,
            "\n"
        );
        match read_stream(text.as_bytes()) {
            Err(Error::InvalidSample { sample, .. }) => assert!(sample.contains("line 2")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let text = concat!(
            r#"{"manifest":{"version":1,"n_seen":1,"n_unseen":0,"order_seed":0}}"#,
            "\n",
            "{not json\n"
        );
        assert!(matches!(read_stream(text.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn every_generated_sample_is_valid() {
        let s = gen_synthetic_stream(&StreamSpec::default()).unwrap();
        for t in s.tasks() {
            for x in t.samples() {
                x.validate().unwrap();
                assert_eq!(x.format, t.format);
            }
        }
    }
}
