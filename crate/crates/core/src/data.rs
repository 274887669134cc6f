//! Instruction corpora, byte-level tokenization and non-IID client partitions.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;
use rand_distr::{Distribution, Gamma};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// 256 byte tokens plus BOS, SEP, EOS.
pub const VOCAB_SIZE: usize = 259;
pub const BOS: u32 = 256;
pub const SEP: u32 = 257;
pub const EOS: u32 = 258;

const SYNTH_STREAM: u64 = 0x5E;
const PATHOLOGICAL_STREAM: u64 = 0xA7;
const DIRICHLET_STREAM: u64 = 0xD1;
const SPLIT_STREAM: u64 = 0x5B;
const PATHOLOGICAL_RETRIES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    CreativeWriting,
    Brainstorming,
    Classification,
    ClosedQa,
    Generation,
    InformationExtraction,
    OpenQa,
    Summarization,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::CreativeWriting,
        Category::Brainstorming,
        Category::Classification,
        Category::ClosedQa,
        Category::Generation,
        Category::InformationExtraction,
        Category::OpenQa,
        Category::Summarization,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::CreativeWriting => "creative_writing",
            Category::Brainstorming => "brainstorming",
            Category::Classification => "classification",
            Category::ClosedQa => "closed_qa",
            Category::Generation => "generation",
            Category::InformationExtraction => "information_extraction",
            Category::OpenQa => "open_qa",
            Category::Summarization => "summarization",
        }
    }

    /// Accepts the canonical labels, plus `general_qa` (the label dolly-15k
    /// files use for the generation category).
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "general_qa" => Some(Category::Generation),
            _ => Category::ALL.into_iter().find(|c| c.as_str() == s),
        }
    }

    fn lead(self) -> &'static str {
        match self {
            Category::CreativeWriting => "write",
            Category::Brainstorming => "list",
            Category::Classification => "classify",
            Category::ClosedQa => "answer",
            Category::Generation => "generate",
            Category::InformationExtraction => "extract",
            Category::OpenQa => "explain",
            Category::Summarization => "summarize",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub instruction: String,
    pub context: String,
    pub response: String,
    pub category: Category,
}

#[derive(Deserialize)]
struct RawExample {
    instruction: String,
    #[serde(default)]
    context: String,
    response: String,
    category: String,
}

/// One JSON object per line with `instruction`, `context` (optional),
/// `response` and `category`. Blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file), &path.display().to_string())
}

pub fn parse_jsonl(reader: impl BufRead, source: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::data(format!("{source}:{n}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("{source}:{n}: {e}")))?;
        let category = Category::parse(&raw.category).ok_or_else(|| {
            Error::data(format!("{source}:{n}: unknown category '{}'", raw.category))
        })?;
        if raw.response.is_empty() {
            return Err(Error::data(format!("{source}:{n}: empty response")));
        }
        out.push(Example {
            instruction: raw.instruction,
            context: raw.context,
            response: raw.response,
            category,
        });
    }
    Ok(out)
}

pub fn write_jsonl(examples: &[Example], path: &Path) -> Result<()> {
    let mut s = String::new();
    for ex in examples {
        let obj = serde_json::json!({
            "instruction": ex.instruction,
            "context": ex.context,
            "response": ex.response,
            "category": ex.category.as_str(),
        });
        let _ = writeln!(s, "{obj}");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

const SYNTH_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz ";

/// First-order character Markov chain over [`SYNTH_ALPHABET`]. Each source
/// favours its own subset of letters, and every state additionally prefers
/// two specific successors.
struct MarkovSource {
    /// Row-normalized cumulative transition table.
    cumulative: Vec<Vec<f64>>,
}

impl MarkovSource {
    fn new(rng: &mut RngStream) -> Self {
        let n = SYNTH_ALPHABET.len();
        let mut letters: Vec<usize> = (0..n - 1).collect();
        rng.shuffle(&mut letters);
        let favoured = &letters[..9];
        let cumulative = (0..n)
            .map(|_| {
                let mut w = vec![0.2; n];
                w[n - 1] = 2.0;
                for &f in favoured {
                    w[f] += 3.0;
                }
                for _ in 0..2 {
                    w[favoured[rng.below(favoured.len())]] += 10.0;
                }
                let total: f64 = w.iter().sum();
                let mut acc = 0.0;
                w.iter()
                    .map(|v| {
                        acc += v / total;
                        acc
                    })
                    .collect()
            })
            .collect();
        MarkovSource { cumulative }
    }

    fn generate(&self, rng: &mut RngStream, len: usize) -> String {
        let mut state = rng.below(SYNTH_ALPHABET.len());
        let mut s = String::with_capacity(len);
        for _ in 0..len {
            s.push(SYNTH_ALPHABET[state] as char);
            let u = rng.uniform();
            let row = &self.cumulative[state];
            state = row.iter().position(|&c| u < c).unwrap_or(row.len() - 1);
        }
        s
    }
}

/// Synthetic corpus of `per_category` examples for each of the 8 categories,
/// category-major order. Each category draws text from its own Markov source;
/// instructions open with a category lead word.
pub fn synth_corpus(per_category: usize, seed: u64) -> Vec<Example> {
    let mut out = Vec::with_capacity(per_category * Category::ALL.len());
    for cat in Category::ALL {
        let mut src_rng = RngStream::derive(seed, &[SYNTH_STREAM, cat.index() as u64, 0]);
        let source = MarkovSource::new(&mut src_rng);
        let mut rng = RngStream::derive(seed, &[SYNTH_STREAM, cat.index() as u64, 1]);
        for _ in 0..per_category {
            let instr_len = 6 + rng.below(7);
            let instruction = format!("{} {}", cat.lead(), source.generate(&mut rng, instr_len));
            let context = if rng.below(2) == 0 {
                String::new()
            } else {
                let len = 4 + rng.below(7);
                source.generate(&mut rng, len)
            };
            let resp_len = 12 + rng.below(13);
            let response = source.generate(&mut rng, resp_len);
            out.push(Example {
                instruction,
                context,
                response,
                category: cat,
            });
        }
    }
    out
}

/// Serialized token sequence: `BOS instruction SEP context SEP response EOS`,
/// truncated to `max_seq`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    /// Index of the first response token (or `ids.len()` if truncated away).
    pub response_start: usize,
}

/// Which predicted positions count toward the training and evaluation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossScope {
    /// Every next-token prediction of the serialized example.
    Full,
    /// Only predictions of response tokens (and the closing EOS).
    Response,
}

impl LossScope {
    pub fn as_str(self) -> &'static str {
        match self {
            LossScope::Full => "full",
            LossScope::Response => "response",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(LossScope::Full),
            "response" => Ok(LossScope::Response),
            other => Err(Error::config(format!("unknown loss scope '{other}'"))),
        }
    }
}

impl TokenSeq {
    /// First target index counted under `scope`.
    pub fn first_target(&self, scope: LossScope) -> usize {
        match scope {
            LossScope::Full => 1,
            LossScope::Response => self.response_start.max(1),
        }
    }
}

pub fn encode_bytes(text: &str) -> impl Iterator<Item = u32> + '_ {
    text.bytes().map(u32::from)
}

/// Bytes of every non-special token, specials dropped.
pub fn decode_bytes(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

pub fn tokenize(ex: &Example, max_seq: usize) -> TokenSeq {
    let mut ids = Vec::with_capacity(ex.instruction.len() + ex.context.len() + ex.response.len() + 4);
    ids.push(BOS);
    ids.extend(encode_bytes(&ex.instruction));
    ids.push(SEP);
    ids.extend(encode_bytes(&ex.context));
    ids.push(SEP);
    let response_start = ids.len();
    ids.extend(encode_bytes(&ex.response));
    ids.push(EOS);
    ids.truncate(max_seq);
    TokenSeq {
        response_start: response_start.min(ids.len()),
        ids,
    }
}

/// Splits a serialized sequence back into (instruction, context, response) bytes.
pub fn detokenize(ids: &[u32]) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let body = ids.strip_prefix(&[BOS]).unwrap_or(ids);
    let mut fields = body.split(|&t| t == SEP);
    let instruction = decode_bytes(fields.next().unwrap_or(&[]));
    let context = decode_bytes(fields.next().unwrap_or(&[]));
    let rest = fields.next().unwrap_or(&[]);
    let response = decode_bytes(rest.strip_suffix(&[EOS]).unwrap_or(rest));
    (instruction, context, response)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PartitionKind {
    Pathological { classes_per_client: usize },
    Dirichlet { beta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("partition needs at least one client"));
        }
        match self.kind {
            PartitionKind::Pathological { classes_per_client } => {
                if classes_per_client == 0 || classes_per_client > Category::ALL.len() {
                    return Err(Error::config(format!(
                        "classes_per_client {classes_per_client} outside 1..=8"
                    )));
                }
            }
            PartitionKind::Dirichlet { beta } => {
                if !(beta > 0.0 && beta.is_finite()) {
                    return Err(Error::config(format!("Dirichlet beta {beta} must be positive")));
                }
            }
        }
        Ok(())
    }
}

/// Example ids per client, each shard in ascending id order.
pub type Partition = Vec<Vec<usize>>;

pub fn partition(corpus: &[Example], spec: &PartitionSpec) -> Result<Partition> {
    match spec.kind {
        PartitionKind::Pathological { .. } => partition_pathological(corpus, spec),
        PartitionKind::Dirichlet { .. } => partition_dirichlet(corpus, spec),
    }
}

fn ids_by_class(corpus: &[Example]) -> Vec<Vec<usize>> {
    let mut by = vec![Vec::new(); Category::ALL.len()];
    for (i, ex) in corpus.iter().enumerate() {
        by[ex.category.index()].push(i);
    }
    by
}

/// Every client draws `classes_per_client` distinct classes; each class's
/// examples are shuffled and cut into equal (±1) contiguous shards, one per
/// holder in client order. Assignments leaving a non-empty class without a
/// holder are redrawn.
pub fn partition_pathological(corpus: &[Example], spec: &PartitionSpec) -> Result<Partition> {
    spec.validate()?;
    let PartitionKind::Pathological { classes_per_client } = spec.kind else {
        return Err(Error::config("pathological partition called with a Dirichlet spec"));
    };
    let by_class = ids_by_class(corpus);
    let mut rng = RngStream::derive(spec.seed, &[PATHOLOGICAL_STREAM]);
    let n_classes = Category::ALL.len();

    let mut holders: Vec<Vec<usize>> = Vec::new();
    let mut covered = false;
    for _ in 0..PATHOLOGICAL_RETRIES {
        holders = vec![Vec::new(); n_classes];
        for client in 0..spec.clients {
            let mut classes: Vec<usize> = (0..n_classes).collect();
            rng.shuffle(&mut classes);
            for &c in &classes[..classes_per_client] {
                holders[c].push(client);
            }
        }
        covered = (0..n_classes).all(|c| by_class[c].is_empty() || !holders[c].is_empty());
        if covered {
            break;
        }
    }
    if !covered {
        return Err(Error::config(format!(
            "could not give every class a holder with {} clients x {classes_per_client} classes",
            spec.clients
        )));
    }

    let mut shards = vec![Vec::new(); spec.clients];
    for (c, ids) in by_class.iter().enumerate() {
        let mut ids = ids.clone();
        rng.shuffle(&mut ids);
        let h = &holders[c];
        if h.is_empty() {
            continue;
        }
        let base = ids.len() / h.len();
        let extra = ids.len() % h.len();
        let mut start = 0;
        for (k, &client) in h.iter().enumerate() {
            let len = base + usize::from(k < extra);
            shards[client].extend_from_slice(&ids[start..start + len]);
            start += len;
        }
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

/// Draws `Dir(β)` proportions over clients for each class.
pub fn dirichlet_proportions(rng: &mut RngStream, clients: usize, beta: f64) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta > 0");
    loop {
        let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(rng.inner_mut())).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|v| v / total).collect();
        }
    }
}

/// Integer counts summing to `n`: floors of `p·n`, leftovers to the largest
/// fractional parts (lower index first on ties).
pub fn largest_remainder(props: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per class, `Dir(β)` proportions over clients, largest-remainder counts, and
/// contiguous chunks of the shuffled class examples in client order.
pub fn partition_dirichlet(corpus: &[Example], spec: &PartitionSpec) -> Result<Partition> {
    spec.validate()?;
    let PartitionKind::Dirichlet { beta } = spec.kind else {
        return Err(Error::config("Dirichlet partition called with a pathological spec"));
    };
    let mut rng = RngStream::derive(spec.seed, &[DIRICHLET_STREAM]);
    let mut shards = vec![Vec::new(); spec.clients];
    for ids in ids_by_class(corpus) {
        let props = dirichlet_proportions(&mut rng, spec.clients, beta);
        let counts = largest_remainder(&props, ids.len());
        let mut ids = ids;
        rng.shuffle(&mut ids);
        let mut start = 0;
        for (client, &c) in counts.iter().enumerate() {
            shards[client].extend_from_slice(&ids[start..start + c]);
            start += c;
        }
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

/// Deterministic shuffled split. `round(fraction·n)` examples train, but the
/// eval side keeps at least one example whenever `n >= 2`.
pub fn split_train_eval(
    shard: &[usize],
    fraction: f64,
    seed: u64,
    client: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if shard.is_empty() {
        return Err(Error::data(format!("client {client} has an empty shard")));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(format!("train fraction {fraction} outside [0, 1]")));
    }
    let n = shard.len();
    let mut ids = shard.to_vec();
    RngStream::derive(seed, &[SPLIT_STREAM, client as u64]).shuffle(&mut ids);
    let n_train = if n == 1 {
        warn!("client {client} has a single example; it gets no eval split");
        1
    } else {
        ((fraction * n as f64).round() as usize).clamp(1, n - 1)
    };
    let eval = ids.split_off(n_train);
    Ok((ids, eval))
}

/// `example_id,client_id` rows in ascending example id order.
pub fn partition_csv(partition: &Partition) -> String {
    let mut rows: Vec<(usize, usize)> = partition
        .iter()
        .enumerate()
        .flat_map(|(c, ids)| ids.iter().map(move |&e| (e, c)))
        .collect();
    rows.sort_unstable();
    let mut s = String::from("example_id,client_id\n");
    for (e, c) in rows {
        let _ = writeln!(s, "{e},{c}");
    }
    s
}

pub fn parse_partition_csv(text: &str, clients: usize) -> Result<Partition> {
    let mut lines = text.lines();
    if lines.next() != Some("example_id,client_id") {
        return Err(Error::data("partition CSV header must be 'example_id,client_id'"));
    }
    let mut shards = vec![Vec::new(); clients];
    for (i, line) in lines.enumerate() {
        let (e, c) = line
            .split_once(',')
            .and_then(|(e, c)| Some((e.parse::<usize>().ok()?, c.parse::<usize>().ok()?)))
            .ok_or_else(|| Error::data(format!("partition CSV line {}: '{line}'", i + 2)))?;
        if c >= clients {
            return Err(Error::data(format!("partition CSV line {}: client {c} out of range", i + 2)));
        }
        shards[c].push(e);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}
