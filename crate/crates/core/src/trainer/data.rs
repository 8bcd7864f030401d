use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::IndexedMutRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::last_occurrence;
use crate::error::{Error, Result};
use crate::TokenId;

/// One supervised example: only `target` positions carry loss.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub context: Vec<TokenId>,
    pub invocation: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl SftExample {
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut t = Vec::with_capacity(self.len());
        t.extend_from_slice(&self.context);
        t.extend_from_slice(&self.invocation);
        t.extend_from_slice(&self.target);
        t
    }

    /// Context followed by the invocation: what inference is prompted with.
    pub fn prompt(&self) -> Vec<TokenId> {
        let mut t = self.context.clone();
        t.extend_from_slice(&self.invocation);
        t
    }

    pub fn len(&self) -> usize {
        self.context.len() + self.invocation.len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First adapted position: one token after the invocation starts.
    pub fn t_invoke(&self) -> usize {
        self.context.len() + 1
    }

    /// Positions whose token is predicted under the loss.
    pub fn target_positions(&self) -> std::ops::Range<usize> {
        let start = self.context.len() + self.invocation.len();
        start..start + self.target.len()
    }

    /// Rejects examples whose context already contains the invocation, so
    /// the only occurrence is the one right after the context.
    pub fn validate(&self) -> Result<()> {
        if self.target.is_empty() {
            return Err(Error::contract("example has an empty target"));
        }
        if self.invocation.is_empty() {
            return Err(Error::contract("example has an empty invocation"));
        }
        let prompt = self.prompt();
        match last_occurrence(&prompt[..prompt.len() - 1], &self.invocation) {
            None => Ok(()),
            Some(start) => Err(Error::contract(format!(
                "invocation also occurs at {start}, before position {}",
                self.context.len()
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Context hides one `(key marker, value)` pair among filler; the target
    /// is the value.
    CopyKey,
    /// Target is one of two answer tokens depending on whether a marker
    /// token appears in the context.
    ClassifyMarker,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSizes {
    pub examples: usize,
    /// Filler tokens in each context.
    pub distractors: usize,
    /// Number of distinct values (copy_key).
    pub n_values: usize,
}

impl Default for TaskSizes {
    fn default() -> Self {
        Self {
            examples: 1000,
            distractors: 8,
            n_values: 8,
        }
    }
}

/// Token ranges reserved by the synthetic tasks, carved from the top of the
/// vocabulary. Filler tokens start at 1 so end-of-sequence never appears.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskLayout {
    pub invocation: Vec<TokenId>,
    pub key_marker: TokenId,
    pub yes: TokenId,
    pub no: TokenId,
    pub marker: TokenId,
    pub values: std::ops::Range<TokenId>,
    pub filler: std::ops::Range<TokenId>,
}

impl TaskLayout {
    pub fn new(vocab_size: usize, n_values: usize) -> Result<Self> {
        let v = vocab_size as TokenId;
        let reserved = 7 + n_values as TokenId;
        if n_values == 0 || v < reserved + 4 {
            return Err(Error::config(format!(
                "vocabulary of {vocab_size} too small for {n_values} values"
            )));
        }
        let values_end = v - 7;
        let values_start = values_end - n_values as TokenId;
        Ok(Self {
            invocation: vec![v - 3, v - 2, v - 1],
            key_marker: v - 4,
            yes: v - 5,
            no: v - 6,
            marker: v - 7,
            values: values_start..values_end,
            filler: 1..values_start,
        })
    }
}

pub fn make_synthetic_task(
    kind: TaskKind,
    sizes: &TaskSizes,
    layout: &TaskLayout,
    seed: u64,
) -> Result<Vec<SftExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(sizes.examples);
    for _ in 0..sizes.examples {
        let mut context: Vec<TokenId> = (0..sizes.distractors)
            .map(|_| rng.random_range(layout.filler.clone()))
            .collect();
        let target = match kind {
            TaskKind::CopyKey => {
                let value = rng.random_range(layout.values.clone());
                let at = rng.random_range(0..=context.len());
                context.splice(at..at, [layout.key_marker, value]);
                vec![value]
            }
            TaskKind::ClassifyMarker => {
                if rng.random_bool(0.5) && !context.is_empty() {
                    let slot = context.choose_mut(&mut rng).unwrap();
                    *slot = layout.marker;
                    vec![layout.yes]
                } else {
                    vec![layout.no]
                }
            }
        };
        let ex = SftExample {
            context,
            invocation: layout.invocation.clone(),
            target,
        };
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_jsonl(examples: &[SftExample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut buf, &JsonExample::from(ex)).expect("serialisable");
        buf.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<SftExample>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            let ex: JsonExample = serde_json::from_str(&line)
                .map_err(|e| Error::format(offset, format!("dataset line: {e}")))?;
            let ex = SftExample::from(ex);
            ex.validate()?;
            out.push(ex);
        }
        offset += line.len() + 1;
    }
    Ok(out)
}

/// On-disk field names.
#[derive(Serialize, Deserialize)]
struct JsonExample {
    context: Vec<TokenId>,
    invocation: Vec<TokenId>,
    target: Vec<TokenId>,
}

impl From<&SftExample> for JsonExample {
    fn from(e: &SftExample) -> Self {
        Self {
            context: e.context.clone(),
            invocation: e.invocation.clone(),
            target: e.target.clone(),
        }
    }
}

impl From<JsonExample> for SftExample {
    fn from(e: JsonExample) -> Self {
        Self {
            context: e.context,
            invocation: e.invocation,
            target: e.target,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> TaskLayout {
        TaskLayout::new(256, 8).unwrap()
    }

    #[test]
    fn copy_key_without_distractors_is_just_the_pair() {
        let sizes = TaskSizes {
            examples: 20,
            distractors: 0,
            n_values: 8,
        };
        let l = layout();
        for ex in make_synthetic_task(TaskKind::CopyKey, &sizes, &l, 1).unwrap() {
            assert_eq!(ex.context, vec![l.key_marker, ex.target[0]]);
            assert!(l.values.contains(&ex.target[0]));
        }
    }

    #[test]
    fn datasets_are_seeded() {
        let s = TaskSizes::default();
        let a = make_synthetic_task(TaskKind::CopyKey, &s, &layout(), 4).unwrap();
        assert_eq!(
            a,
            make_synthetic_task(TaskKind::CopyKey, &s, &layout(), 4).unwrap()
        );
        assert_ne!(
            a,
            make_synthetic_task(TaskKind::CopyKey, &s, &layout(), 5).unwrap()
        );
    }

    #[test]
    fn classify_marker_labels_are_balanced() {
        let l = layout();
        let ds =
            make_synthetic_task(TaskKind::ClassifyMarker, &TaskSizes::default(), &l, 9).unwrap();
        assert_eq!(ds.len(), 1000);
        let yes = ds.iter().filter(|e| e.target == vec![l.yes]).count();
        assert!((450..=550).contains(&yes), "{yes}");
        for e in &ds {
            assert_eq!(e.context.contains(&l.marker), e.target == vec![l.yes]);
        }
    }

    #[test]
    fn misplaced_invocation_rejected() {
        let l = layout();
        let mut ctx = vec![5, 6];
        ctx.extend_from_slice(&l.invocation);
        ctx.push(7);
        let ex = SftExample {
            context: ctx,
            invocation: l.invocation.clone(),
            target: vec![1],
        };
        assert!(ex.validate().is_err());
        let ok = SftExample {
            context: vec![5, 6],
            ..ex
        };
        assert!(ok.validate().is_ok());
        let bad = SftExample {
            context: vec![1],
            invocation: vec![2, 2],
            target: vec![],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let ds = make_synthetic_task(
            TaskKind::CopyKey,
            &TaskSizes {
                examples: 5,
                ..Default::default()
            },
            &layout(),
            2,
        )
        .unwrap();
        write_jsonl(&ds, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().next().unwrap().starts_with("{\"context\":["));
        assert_eq!(read_jsonl(&p).unwrap(), ds);
    }
}
