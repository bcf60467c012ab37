//! Line protocol for oracles running as a child process.
//!
//! One request per line on the child's stdin:
//!
//! ```text
//! <sample_id>\t<task>\t<retained_mass>
//! ```
//!
//! and one response per line on its stdout:
//!
//! ```text
//! <latency_s>\t<answer>
//! ```
//!
//! `task` is `qa`, `classification` or `detection`. Answers are written as
//! space-separated token ids (qa), a label (classification), or
//! `x_min,y_min,x_max,y_max` (detection).

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use super::{answer_embedding, render_tokens, OracleOutput};
use crate::domain::{BBox, Sample, TaskAnswer, TaskKind};
use crate::embedding::EncoderSpec;
use crate::error::{Error, Result};

pub fn format_request(sample_id: u64, kind: TaskKind, retained_mass: f64) -> String {
    format!("{sample_id}\t{}\t{retained_mass}", kind.as_str())
}

pub fn format_answer(answer: &TaskAnswer) -> String {
    match answer {
        TaskAnswer::Qa(t) => t.iter().map(u32::to_string).collect::<Vec<_>>().join(" "),
        TaskAnswer::Classification(l) => l.to_string(),
        TaskAnswer::Detection(b) => format!("{},{},{},{}", b.x_min, b.y_min, b.x_max, b.y_max),
    }
}

pub fn parse_answer(text: &str, kind: TaskKind) -> Result<TaskAnswer> {
    let bad = |e: &dyn std::fmt::Display| Error::Format(format!("bad {} answer {text:?}: {e}", kind.as_str()));
    let text = text.trim();
    match kind {
        TaskKind::Qa => text
            .split_whitespace()
            .map(|t| t.parse::<u32>().map_err(|e| bad(&e)))
            .collect::<Result<Vec<_>>>()
            .map(TaskAnswer::Qa),
        TaskKind::Classification => text.parse().map(TaskAnswer::Classification).map_err(|e| bad(&e)),
        TaskKind::Detection => {
            let v = text
                .split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|e| bad(&e)))
                .collect::<Result<Vec<_>>>()?;
            let [a, b, c, d] = v[..] else {
                return Err(bad(&"expected four coordinates"));
            };
            BBox::new(a, b, c, d).map(TaskAnswer::Detection).map_err(|e| bad(&e))
        }
    }
}

/// Parses one response line into `(latency_s, answer)`.
pub fn parse_response(line: &str, kind: TaskKind) -> Result<(f64, TaskAnswer)> {
    let (lat, ans) = line
        .trim_end_matches(['\r', '\n'])
        .split_once('\t')
        .ok_or_else(|| Error::Format(format!("response {line:?} has no tab separator")))?;
    let latency: f64 = lat
        .trim()
        .parse()
        .map_err(|e| Error::Format(format!("bad latency {lat:?}: {e}")))?;
    if !(latency.is_finite() && latency > 0.0) {
        return Err(Error::Format(format!("latency must be positive, got {latency}")));
    }
    Ok((latency, parse_answer(ans, kind)?))
}

/// A child process answering requests over stdin/stdout.
pub struct ExternalOracle {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    output_tokens: usize,
}

impl ExternalOracle {
    /// `output_tokens` is the length of the token sequence rendered for
    /// each answer, since the protocol carries only the answer itself.
    pub fn spawn(program: &str, args: &[String], output_tokens: usize) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::io(program, e))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            child,
            stdin,
            stdout,
            output_tokens,
        })
    }

    pub fn infer(&mut self, sample: &Sample, retained_mass: f64, encoder: &EncoderSpec) -> Result<OracleOutput> {
        let kind = sample.task_kind();
        writeln!(self.stdin, "{}", format_request(sample.id, kind, retained_mass))
            .and_then(|_| self.stdin.flush())
            .map_err(|e| Error::io("external oracle stdin", e))?;
        let mut line = String::new();
        let n = self
            .stdout
            .read_line(&mut line)
            .map_err(|e| Error::io("external oracle stdout", e))?;
        if n == 0 {
            return Err(Error::Format("external oracle closed its output".into()));
        }
        let (latency_s, answer) = parse_response(&line, kind)?;
        Ok(OracleOutput {
            correct: answer == sample.ground_truth,
            tokens: render_tokens(&answer, self.output_tokens, 0.0, 0, sample.id, encoder.seed),
            answer_embedding: answer_embedding(&answer, encoder),
            latency_s,
            answer,
        })
    }
}

impl Drop for ExternalOracle {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
