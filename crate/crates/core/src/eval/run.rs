use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use super::client::{ModelClient, QueryRequest, RawOutput};
use super::extract::{AnswerExtractor, SimilarityScorer};
use super::{build_templated_benchmark, score, EvalItem, EvalReport};
use crate::error::{Error, Result};
use crate::sampler::TemplateSet;

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Raw outputs are appended here as they arrive; existing entries are
    /// reused instead of re-queried.
    pub raw_path: PathBuf,
    pub concurrency: usize,
    /// Retries after the first failed attempt.
    pub max_retries: u32,
    pub retry_backoff: Duration,
    /// Base directory for relative image paths passed to the client.
    pub image_root: Option<PathBuf>,
}

impl RunOptions {
    pub fn new(raw_path: impl Into<PathBuf>) -> Self {
        RunOptions {
            raw_path: raw_path.into(),
            concurrency: 4,
            max_retries: 3,
            retry_backoff: Duration::from_millis(200),
            image_root: None,
        }
    }
}

/// Read a raw-output file. A torn final line, as left by an interrupted
/// run, is dropped; malformed lines elsewhere are errors.
pub fn read_raw_outputs(path: &Path) -> Result<Vec<RawOutput>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let last = lines.len().saturating_sub(1);
    let mut out = Vec::with_capacity(lines.len());
    for (n, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawOutput>(line) {
            Ok(r) => out.push(r),
            Err(_) if n == last => {
                tracing::warn!(path = %path.display(), "dropping incomplete final raw-output line");
            }
            Err(e) => return Err(Error::json(format!("{} line {}", path.display(), n + 1), e)),
        }
    }
    Ok(out)
}

fn write_raw<W: Write>(w: &mut W, r: &RawOutput) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, r)?;
    w.write_all(b"\n")?;
    w.flush()
}

/// Query every item × template pair not yet in the raw-output file, persist
/// each reply as it arrives, then extract answers and score the grid.
///
/// A pair whose client call still fails after the configured retries stops
/// the run; everything already received stays in the raw-output file.
pub fn run_eval<C, S>(
    items: &[EvalItem],
    templates: &TemplateSet,
    client: &C,
    extractor: &AnswerExtractor<S>,
    options: &RunOptions,
) -> Result<EvalReport>
where
    C: ModelClient + ?Sized,
    S: SimilarityScorer,
{
    let bench = build_templated_benchmark(items, templates)?;
    let path = &options.raw_path;

    let mut outputs: HashMap<(String, u64), String> = HashMap::new();
    if path.exists() {
        for r in read_raw_outputs(path)? {
            outputs.insert((r.item_id, r.template_id), r.output);
        }
        // Rewrite so a torn last line cannot corrupt what gets appended.
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        let mut kept: Vec<_> = outputs.iter().collect();
        kept.sort();
        for ((item_id, template_id), output) in kept {
            let r = RawOutput {
                item_id: item_id.clone(),
                template_id: *template_id,
                output: output.clone(),
            };
            write_raw(&mut w, &r).map_err(|e| Error::io(path, e))?;
        }
    }

    let pending: Vec<usize> = (0..bench.len())
        .filter(|&i| !outputs.contains_key(&(bench[i].item.id.clone(), bench[i].template_id)))
        .collect();
    tracing::info!(
        total = bench.len(),
        cached = bench.len() - pending.len(),
        "querying model"
    );

    if !pending.is_empty() {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let writer = Mutex::new(BufWriter::new(file));
        let received = Mutex::new(Vec::with_capacity(pending.len()));
        let failure: Mutex<Option<Error>> = Mutex::new(None);
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let workers = options.concurrency.max(1).min(pending.len());

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if abort.load(Ordering::SeqCst) {
                        break;
                    }
                    let k = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&i) = pending.get(k) else { break };
                    let t = &bench[i];
                    let image = t.item.image.as_deref().map(|p| match &options.image_root {
                        Some(root) => root.join(p),
                        None => PathBuf::from(p),
                    });
                    let request = QueryRequest {
                        item_id: &t.item.id,
                        template_id: t.template_id,
                        prompt: &t.prompt,
                        image: image.as_deref(),
                    };
                    let mut attempt = 0;
                    let result = loop {
                        attempt += 1;
                        match client.query(&request) {
                            Ok(text) => break Ok(text),
                            Err(e) if attempt > options.max_retries => break Err(e),
                            Err(e) => {
                                tracing::warn!(item = %t.item.id, template = t.template_id, attempt, error = %e, "retrying");
                                std::thread::sleep(options.retry_backoff * attempt);
                            }
                        }
                    };
                    match result {
                        Ok(output) => {
                            let r = RawOutput {
                                item_id: t.item.id.clone(),
                                template_id: t.template_id,
                                output,
                            };
                            let written = write_raw(&mut *writer.lock().unwrap(), &r);
                            if let Err(e) = written {
                                abort.store(true, Ordering::SeqCst);
                                failure.lock().unwrap().get_or_insert(Error::io(path, e));
                                break;
                            }
                            received.lock().unwrap().push(r);
                        }
                        Err(source) => {
                            abort.store(true, Ordering::SeqCst);
                            failure.lock().unwrap().get_or_insert(Error::Client {
                                item_id: t.item.id.clone(),
                                template_id: t.template_id,
                                attempts: attempt,
                                source,
                            });
                            break;
                        }
                    }
                });
            }
        });

        if let Some(e) = failure.into_inner().unwrap() {
            return Err(e);
        }
        for r in received.into_inner().unwrap() {
            outputs.insert((r.item_id, r.template_id), r.output);
        }
    }

    let mut responses = Vec::with_capacity(bench.len());
    for t in bench {
        let output = &outputs[&(t.item.id.clone(), t.template_id)];
        let e = extractor.extract(output, &t.item.choices)?;
        responses.push((t, e.index));
    }
    score(&responses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{LexicalScorer, MockClient, ReplayClient};

    fn items(n: usize) -> Vec<EvalItem> {
        (0..n)
            .map(|i| EvalItem {
                id: format!("q{i}"),
                image: None,
                question: format!("Question {i}?"),
                choices: vec!["cat".into(), "dog".into(), "bird".into()],
                answer_index: i % 3,
            })
            .collect()
    }

    fn templates() -> TemplateSet {
        TemplateSet::from_templates([
            "{question}\n{choices}",
            "Question: {question}\nChoices: {choices}",
        ])
    }

    #[test]
    fn mock_echo_a_scores_answer_zero_fraction() {
        let dir = tempfile::tempdir().unwrap();
        let items = items(9);
        let client = MockClient::constant("(A)");
        let x = AnswerExtractor::new(LexicalScorer);
        let r = run_eval(&items, &templates(), &client, &x, &RunOptions::new(dir.path().join("raw.jsonl"))).unwrap();
        for acc in r.per_template_accuracy.values() {
            assert!((acc - 3.0 / 9.0).abs() < 1e-12);
        }
        assert_eq!(client.calls(), 18);
    }

    #[test]
    fn replay_is_repeatable_and_resumes_without_queries() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw.jsonl");
        let items = items(6);
        let x = AnswerExtractor::new(LexicalScorer);
        let mock = MockClient::from_fn(|r| Ok(if r.prompt.len() % 2 == 0 { "dog" } else { "(C) bird" }.into()));
        let first = run_eval(&items, &templates(), &mock, &x, &RunOptions::new(&raw)).unwrap();

        let replay = ReplayClient::load(&raw).unwrap();
        assert_eq!(replay.len(), 12);
        let other = dir.path().join("other.jsonl");
        let a = run_eval(&items, &templates(), &replay, &x, &RunOptions::new(&other)).unwrap();
        let b = run_eval(&items, &templates(), &replay, &x, &RunOptions::new(dir.path().join("third.jsonl"))).unwrap();
        assert_eq!(a, first);
        assert_eq!(a, b);

        // Same raw file again: nothing is re-queried.
        let failing = MockClient::failing();
        let again = run_eval(&items, &templates(), &failing, &x, &RunOptions::new(&raw)).unwrap();
        assert_eq!(again, first);
        assert_eq!(failing.calls(), 0);
    }

    #[test]
    fn failing_client_aborts_and_keeps_partial_file() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw.jsonl");
        let items = items(5);
        let client = MockClient::from_fn(|r| {
            if r.item_id == "q3" {
                Err(crate::eval::ClientError::Other("down".into()))
            } else {
                Ok("(A)".into())
            }
        });
        let mut opts = RunOptions::new(&raw);
        opts.concurrency = 1;
        opts.max_retries = 2;
        opts.retry_backoff = Duration::ZERO;
        let err = run_eval(&items, &templates(), &client, &AnswerExtractor::new(LexicalScorer), &opts)
            .unwrap_err();
        assert!(matches!(err, Error::Client { attempts: 3, .. }), "{err}");
        let partial = read_raw_outputs(&raw).unwrap();
        assert_eq!(partial.len(), 6);
    }

    #[test]
    fn torn_last_line_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw.jsonl");
        std::fs::write(
            &raw,
            "{\"item_id\":\"q0\",\"template_id\":0,\"output\":\"(A)\"}\n{\"item_id\":\"q0\",\"templ",
        )
        .unwrap();
        assert_eq!(read_raw_outputs(&raw).unwrap().len(), 1);
        let items = items(1);
        let client = MockClient::constant("(A)");
        run_eval(&items, &templates(), &client, &AnswerExtractor::new(LexicalScorer), &RunOptions::new(&raw)).unwrap();
        assert_eq!(client.calls(), 1);
        assert_eq!(read_raw_outputs(&raw).unwrap().len(), 2);
    }
}
