//! Classifier backends running as child processes.
//!
//! The parent writes one JSON request per line to the child's stdin and
//! reads one JSON response per line from its stdout:
//!
//! ```text
//! {"op":"train","schema":[..],"labeled":[{"id","text","label"},..],"validation":[..],"config":{..}}
//!     -> {"ok":true}
//! {"op":"predict_proba","items":[{"id","text"},..]}
//!     -> {"probs":[[p_0,..,p_K-1],..]}      (request order)
//! {"op":"shutdown"}
//! ```
//!
//! Items carry `features` when the post has a precomputed vector. A child
//! may answer any request with `{"ok":false,"error":"..."}`. Standard error
//! is passed through; stdout must carry nothing but responses.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, ClassifierConfig, FitSummary, ProbMatrix};
use crate::corpus::{Dataset, Item, LabelSchema, Origin, Post};
use crate::error::{Error, Result};

/// Row sums further than this from one are renormalized with a warning.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Serialize)]
struct WireItem<'a> {
    id: &'a str,
    text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<&'a [f64]>,
}

fn wire_items(ds: &Dataset) -> Vec<WireItem<'_>> {
    ds.items()
        .iter()
        .map(|item| WireItem {
            id: item.id(),
            text: &item.post.text,
            label: item.class().map(|c| ds.schema().name(c)),
            features: item.post.features.as_deref(),
        })
        .collect()
}

#[derive(Debug, Serialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Request<'a> {
    Train {
        schema: Vec<String>,
        labeled: Vec<WireItem<'a>>,
        validation: Vec<WireItem<'a>>,
        config: &'a ClassifierConfig,
    },
    PredictProba {
        items: Vec<WireItem<'a>>,
    },
    Shutdown,
}

#[derive(Debug, Deserialize)]
struct Response {
    #[serde(default)]
    ok: Option<bool>,
    #[serde(default)]
    error: Option<String>,
    #[serde(default)]
    probs: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    val_accuracy: Option<f64>,
}

pub struct ExternalBackend {
    command: String,
    config: ClassifierConfig,
    timeout: Duration,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    num_classes: Option<usize>,
}

impl ExternalBackend {
    pub fn spawn(command: &[String], timeout: Duration, config: ClassifierConfig) -> Result<Self> {
        let display = command.join(" ");
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("empty backend command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend {
                command: display.clone(),
                message: format!("failed to spawn: {e}"),
            })?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            command: display,
            config,
            timeout,
            child,
            stdin,
            lines,
            num_classes: None,
        })
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Backend {
            command: self.command.clone(),
            message: message.into(),
        }
    }

    fn exit_status(&mut self) -> String {
        // Give a dying child a moment to be reaped so the status is reported.
        for _ in 0..20 {
            if let Ok(Some(status)) = self.child.try_wait() {
                return format!("process exited ({status})");
            }
            thread::sleep(Duration::from_millis(10));
        }
        "process closed its output".into()
    }

    fn call(&mut self, request: &Request<'_>) -> Result<Response> {
        let mut line = serde_json::to_vec(request)?;
        line.push(b'\n');
        let write = match self.stdin.as_mut() {
            Some(stdin) => stdin.write_all(&line).and_then(|_| stdin.flush()),
            None => Err(std::io::Error::other("stdin closed")),
        };
        if let Err(e) = write {
            let status = self.exit_status();
            return Err(self.fail(format!("write failed: {e}; {status}")));
        }
        let raw = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(raw)) => raw,
            Ok(Err(e)) => return Err(self.fail(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                let _ = self.child.kill();
                return Err(self.fail(format!("no response within {:?}", self.timeout)));
            }
            Err(RecvTimeoutError::Disconnected) => {
                let status = self.exit_status();
                return Err(self.fail(status));
            }
        };
        let response: Response =
            serde_json::from_str(&raw).map_err(|e| self.fail(format!("malformed response {raw:?}: {e}")))?;
        if response.ok == Some(false) || response.error.is_some() {
            return Err(self.fail(response.error.unwrap_or_else(|| "request failed".into())));
        }
        Ok(response)
    }
}

impl Backend for ExternalBackend {
    fn describe(&self) -> String {
        self.command.clone()
    }

    fn fit(&mut self, train: &Dataset, validation: &Dataset) -> Result<FitSummary> {
        let config = self.config.clone();
        let response = self.call(&Request::Train {
            schema: train.schema().names(),
            labeled: wire_items(train),
            validation: wire_items(validation),
            config: &config,
        })?;
        if response.ok != Some(true) {
            return Err(self.fail("train response lacks \"ok\":true"));
        }
        self.num_classes = Some(train.num_classes());
        Ok(FitSummary {
            val_accuracy: response.val_accuracy,
        })
    }

    fn predict_proba(&mut self, items: &Dataset) -> Result<ProbMatrix> {
        let k = self.num_classes.unwrap_or(items.num_classes());
        let response = self.call(&Request::PredictProba {
            items: wire_items(items),
        })?;
        let rows = response
            .probs
            .ok_or_else(|| self.fail("predict_proba response lacks \"probs\""))?;
        if rows.len() != items.len() {
            return Err(self.fail(format!("{} probability rows for {} items", rows.len(), items.len())));
        }
        let (matrix, adjusted) =
            ProbMatrix::renormalized(k, rows, ROW_SUM_TOLERANCE).map_err(|e| self.fail(e.to_string()))?;
        if !adjusted.is_empty() {
            log::warn!(
                "backend `{}`: renormalized {} probability rows (first: item {:?})",
                self.command,
                adjusted.len(),
                items.items()[adjusted[0]].id()
            );
        }
        Ok(matrix)
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        if self.stdin.is_some() {
            if let Ok(mut line) = serde_json::to_vec(&Request::Shutdown) {
                line.push(b'\n');
                if let Some(stdin) = self.stdin.as_mut() {
                    let _ = stdin.write_all(&line).and_then(|_| stdin.flush());
                }
            }
        }
        // Closing stdin lets well-behaved children exit on EOF.
        self.stdin.take();
        for _ in 0..50 {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Debug, Deserialize)]
struct IncomingItem {
    id: String,
    #[serde(default)]
    text: String,
    #[serde(default)]
    label: Option<Value>,
    #[serde(default)]
    features: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum IncomingRequest {
    Train {
        schema: Vec<String>,
        labeled: Vec<IncomingItem>,
        #[serde(default)]
        validation: Vec<IncomingItem>,
        #[serde(default)]
        config: Option<ClassifierConfig>,
    },
    PredictProba {
        items: Vec<IncomingItem>,
    },
    Shutdown,
}

fn incoming_dataset(schema: &Arc<LabelSchema>, items: Vec<IncomingItem>) -> Result<Dataset> {
    let items = items
        .into_iter()
        .map(|it| {
            let class = match &it.label {
                None | Some(Value::Null) => None,
                Some(Value::String(s)) => Some(schema.parse_label(s).ok_or_else(|| Error::UnknownLabel {
                    record: it.id.clone(),
                    label: s.clone(),
                })?),
                Some(Value::Number(n)) => Some(
                    n.as_u64()
                        .map(|v| v as usize)
                        .filter(|&v| v < schema.num_classes())
                        .ok_or_else(|| Error::UnknownLabel {
                            record: it.id.clone(),
                            label: n.to_string(),
                        })?,
                ),
                Some(other) => {
                    return Err(Error::UnknownLabel {
                        record: it.id.clone(),
                        label: other.to_string(),
                    })
                }
            };
            let post = Post {
                id: it.id,
                text: it.text,
                features: it.features,
            };
            Ok(match class {
                Some(c) => Item::labeled(post, c, Origin::GroundTruth),
                None => Item::unlabeled(post),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(Arc::clone(schema), items)
}

/// Runs the child side of the protocol over `input`/`output`, training a
/// fresh backend from `make` on every `train` request. Returns on
/// `shutdown` or end of input.
pub fn serve<R, W, F>(input: R, mut output: W, mut make: F) -> Result<()>
where
    R: BufRead,
    W: Write,
    F: FnMut(ClassifierConfig) -> Box<dyn Backend>,
{
    let mut state: Option<(Arc<LabelSchema>, Box<dyn Backend>)> = None;
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<IncomingRequest>(&line) {
            Err(e) => json!({"ok": false, "error": format!("malformed request: {e}")}),
            Ok(IncomingRequest::Shutdown) => return Ok(()),
            Ok(IncomingRequest::Train {
                schema,
                labeled,
                validation,
                config,
            }) => {
                let result = (|| {
                    let schema = Arc::new(LabelSchema::new(&schema)?);
                    let train = incoming_dataset(&schema, labeled)?;
                    let val = incoming_dataset(&schema, validation)?;
                    let mut backend = make(config.unwrap_or_default());
                    let summary = backend.fit(&train, &val)?;
                    state = Some((schema, backend));
                    Ok::<_, Error>(summary)
                })();
                match result {
                    Ok(summary) => json!({"ok": true, "val_accuracy": summary.val_accuracy}),
                    Err(e) => json!({"ok": false, "error": e.to_string()}),
                }
            }
            Ok(IncomingRequest::PredictProba { items }) => match state.as_mut() {
                None => json!({"ok": false, "error": "predict_proba before train"}),
                Some((schema, backend)) => {
                    match incoming_dataset(schema, items).and_then(|ds| backend.predict_proba(&ds)) {
                        Ok(probs) => json!({"probs": probs.rows().collect::<Vec<_>>()}),
                        Err(e) => json!({"ok": false, "error": e.to_string()}),
                    }
                }
            },
        };
        serde_json::to_writer(&mut output, &reply)?;
        output
            .write_all(b"\n")
            .and_then(|_| output.flush())
            .map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}
