//! Synthetic task generators and line-delimited dataset files.
//!
//! Prompts always end with `=` and references always end with `=<answer>`
//! (for copy and sort the reference is the bare answer, with the `=` coming
//! from the prompt), so answer extraction is uniform: everything after the
//! final `=`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One synthetic task item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt: String,
    pub answer: String,
    /// Reference response the model is trained to produce (reasoning steps
    /// for addition, the bare answer otherwise).
    pub trace: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Addition,
    Copy,
    Sort,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Addition => "addition",
            TaskKind::Copy => "copy",
            TaskKind::Sort => "sort",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "addition" => Ok(TaskKind::Addition),
            "copy" => Ok(TaskKind::Copy),
            "sort" => Ok(TaskKind::Sort),
            other => Err(Error::Config(format!(
                "field `task`: unknown task {other:?} (expected addition, copy or sort)"
            ))),
        }
    }
}

/// Deterministic dataset generation: the same (task, n, digit range, seed)
/// always produces the same items.
pub fn generate_task_dataset(
    task: TaskKind,
    n: usize,
    digits_min: u32,
    digits_max: u32,
    seed: u64,
) -> Result<Vec<TaskInstance>> {
    if n == 0 {
        return Err(Error::InvalidParameter("dataset size must be positive".into()));
    }
    if digits_min == 0 || digits_min > digits_max {
        return Err(Error::InvalidParameter(format!(
            "digit range {digits_min}..={digits_max} is empty"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let item = match task {
            // Every even-indexed item must contain a carry, so at least half
            // of the dataset exercises non-trivial column arithmetic.
            TaskKind::Addition => addition_item(&mut rng, digits_min, digits_max, i % 2 == 0),
            TaskKind::Copy => {
                let s = random_letters(&mut rng);
                TaskInstance {
                    prompt: format!("{s}="),
                    answer: s.clone(),
                    trace: s,
                }
            }
            TaskKind::Sort => {
                let s = random_letters(&mut rng);
                let mut chars: Vec<char> = s.chars().collect();
                chars.sort_unstable();
                let sorted: String = chars.into_iter().collect();
                TaskInstance {
                    prompt: format!("{s}="),
                    answer: sorted.clone(),
                    trace: sorted,
                }
            }
        };
        items.push(item);
    }
    Ok(items)
}

fn random_letters(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(3..=6usize);
    (0..len)
        .map(|_| char::from(b'a' + rng.random_range(0..10u8)))
        .collect()
}

fn addition_item(
    rng: &mut ChaCha8Rng,
    digits_min: u32,
    digits_max: u32,
    require_carry: bool,
) -> TaskInstance {
    loop {
        let a = random_operand(rng, digits_min, digits_max);
        let b = random_operand(rng, digits_min, digits_max);
        let (trace, has_carry) = addition_trace(a, b);
        if require_carry && !has_carry {
            continue;
        }
        return TaskInstance {
            prompt: format!("{a}+{b}="),
            answer: (a + b).to_string(),
            trace,
        };
    }
}

fn random_operand(rng: &mut ChaCha8Rng, digits_min: u32, digits_max: u32) -> u64 {
    let digits = rng.random_range(digits_min..=digits_max);
    let lo = if digits == 1 { 0 } else { 10u64.pow(digits - 1) };
    let hi = 10u64.pow(digits);
    rng.random_range(lo..hi)
}

/// Column-wise addition trace, units first. Each step spells out the two
/// column digits and the carry in, then their sum; the final segment
/// restates the assembled answer:
/// `347+285` becomes `7+5+0=12;4+8+1=13;3+2+1=6;=632`.
pub fn addition_trace(a: u64, b: u64) -> (String, bool) {
    let mut da = digits_of(a);
    let mut db = digits_of(b);
    let width = da.len().max(db.len());
    da.resize(width, 0);
    db.resize(width, 0);
    let mut carry = 0u64;
    let mut parts = Vec::with_capacity(width + 1);
    let mut any_carry = false;
    for i in 0..width {
        let s = da[i] + db[i] + carry;
        parts.push(format!("{}+{}+{}={}", da[i], db[i], carry, s));
        carry = s / 10;
        if carry > 0 {
            any_carry = true;
        }
    }
    let trace = format!("{};={}", parts.join(";"), a + b);
    (trace, any_carry)
}

/// Least-significant digit first.
fn digits_of(mut x: u64) -> Vec<u64> {
    if x == 0 {
        return vec![0];
    }
    let mut out = Vec::new();
    while x > 0 {
        out.push(x % 10);
        x /= 10;
    }
    out
}

/// Writes one JSON record per line: `{prompt, answer, trace}`.
pub fn write_dataset(path: &Path, items: &[TaskInstance]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| Error::InvalidInput(format!("unserializable item: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<TaskInstance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut items = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: TaskInstance = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidInput(format!(
                "{}:{}: malformed dataset record: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        items.push(item);
    }
    Ok(items)
}
