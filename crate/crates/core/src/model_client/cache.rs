use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{digest_hex, ScoredContinuation};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct LogLine {
    key: String,
    check: String,
    record: ScoredContinuation,
}

/// Append-only, content-addressed score store, one log per model at
/// `<root>/<model_name>/scores.log`.
///
/// Keys are digests of `(model_name, prefix, continuation)`. Each line carries
/// a checksum of its record; lines that fail to parse or verify are corrupt.
pub struct ScoreCache {
    model_name: String,
    path: PathBuf,
    index: RwLock<HashMap<String, ScoredContinuation>>,
    writer: Mutex<File>,
}

impl std::fmt::Debug for ScoreCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScoreCache")
            .field("model_name", &self.model_name)
            .field("path", &self.path)
            .field("entries", &self.len())
            .finish()
    }
}

impl ScoreCache {
    pub fn key(model_name: &str, prefix: &str, continuation: &str) -> String {
        let mut buf = Vec::with_capacity(model_name.len() + prefix.len() + continuation.len() + 2);
        buf.extend_from_slice(model_name.as_bytes());
        buf.push(0);
        buf.extend_from_slice(prefix.as_bytes());
        buf.push(0);
        buf.extend_from_slice(continuation.as_bytes());
        digest_hex(&buf)
    }

    pub fn log_path(root: &Path, model_name: &str) -> PathBuf {
        root.join(sanitize(model_name)).join("scores.log")
    }

    /// Opens (creating if needed) the cache for `model_name` under `root`.
    ///
    /// A corrupt entry fails with [`Error::Integrity`] naming its key unless
    /// `repair` is set, in which case corrupt lines are evicted and the log is
    /// rewritten.
    pub fn open(root: &Path, model_name: &str, repair: bool) -> Result<Self> {
        let path = Self::log_path(root, model_name);
        let dir = path.parent().expect("log path has a parent");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let mut index = HashMap::new();
        let mut good_lines = Vec::new();
        let mut corrupt = None;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match verify_line(line) {
                Ok(entry) => {
                    good_lines.push(line);
                    index.insert(entry.key, entry.record);
                }
                Err(key) => {
                    if corrupt.is_none() {
                        corrupt = Some(key.unwrap_or_else(|| format!("<line {}>", n + 1)));
                    }
                }
            }
        }
        if let Some(key) = corrupt {
            if !repair {
                return Err(Error::Integrity {
                    key,
                    message: format!("corrupt entry in {}", path.display()),
                });
            }
            let tmp = path.with_extension("log.tmp");
            let mut body = good_lines.join("\n");
            if !body.is_empty() {
                body.push('\n');
            }
            std::fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
            std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(ScoreCache {
            model_name: model_name.to_string(),
            path,
            index: RwLock::new(index),
            writer: Mutex::new(writer),
        })
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("cache index poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<ScoredContinuation> {
        self.index.read().expect("cache index poisoned").get(key).cloned()
    }

    pub fn insert(&self, key: &str, record: &ScoredContinuation) -> Result<()> {
        let line = LogLine {
            key: key.to_string(),
            check: record_check(record)?,
            record: record.clone(),
        };
        let mut text = serde_json::to_string(&line)?;
        text.push('\n');
        {
            let mut w = self.writer.lock().expect("cache writer poisoned");
            if self.index.read().expect("cache index poisoned").contains_key(key) {
                return Ok(());
            }
            w.write_all(text.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
            w.flush().map_err(|e| Error::io(&self.path, e))?;
            self.index
                .write()
                .expect("cache index poisoned")
                .insert(key.to_string(), record.clone());
        }
        Ok(())
    }
}

fn record_check(record: &ScoredContinuation) -> Result<String> {
    Ok(digest_hex(serde_json::to_string(record)?.as_bytes()))
}

/// Parses and verifies one log line; on failure returns the key if it could
/// be recovered.
fn verify_line(line: &str) -> std::result::Result<LogLine, Option<String>> {
    match serde_json::from_str::<LogLine>(line) {
        Ok(entry) => match record_check(&entry.record) {
            Ok(c) if c == entry.check => Ok(entry),
            _ => Err(Some(entry.key)),
        },
        Err(_) => {
            let key = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("key").and_then(|k| k.as_str()).map(str::to_string));
            Err(key)
        }
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_client::{cached_score, make_mock_model, score_continuation, MockRule, MockScript};

    fn mock(name: &str) -> crate::model_client::MockModel {
        make_mock_model(MockScript {
            model_name: name.into(),
            rules: vec![MockRule { prefix_pattern: "".into(), token: "b".into(), probability: 0.3 }],
            default_probability: 0.7,
            ..MockScript::default()
        })
        .unwrap()
    }

    #[test]
    fn second_call_hits_cache() {
        let dir = tempfile::tempdir().unwrap();
        let m = mock("m1");
        let cache = ScoreCache::open(dir.path(), "m1", false).unwrap();
        let a = cached_score(&cache, &m, "pre", "a b").unwrap();
        assert_eq!(m.score_calls(), 1);
        let b = cached_score(&cache, &m, "pre", "a b").unwrap();
        assert_eq!(m.score_calls(), 1);
        assert_eq!(a, b);
        assert_eq!(a, score_continuation(&m, "pre", "a b").unwrap());

        // Reopen from disk: still a hit, bit-identical logprobs.
        drop(cache);
        let cache = ScoreCache::open(dir.path(), "m1", false).unwrap();
        let c = cached_score(&cache, &m, "pre", "a b").unwrap();
        assert_eq!(m.score_calls(), 2);
        assert_eq!(
            c.token_logprobs.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            a.token_logprobs.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert!(ScoreCache::log_path(dir.path(), "m1").exists());
    }

    #[test]
    fn key_includes_model_name() {
        assert_ne!(ScoreCache::key("m1", "p", "c"), ScoreCache::key("m2", "p", "c"));
        let dir = tempfile::tempdir().unwrap();
        let m2 = mock("m2");
        let cache = ScoreCache::open(dir.path(), "m1", false).unwrap();
        cached_score(&cache, &mock("m1"), "p", "a").unwrap();
        cached_score(&cache, &m2, "p", "a").unwrap();
        assert_eq!(m2.score_calls(), 1);
    }

    #[test]
    fn corrupt_entry_reports_key_and_repairs() {
        let dir = tempfile::tempdir().unwrap();
        let m = mock("m");
        {
            let cache = ScoreCache::open(dir.path(), "m", false).unwrap();
            cached_score(&cache, &m, "p", "a").unwrap();
            cached_score(&cache, &m, "p", "b").unwrap();
        }
        let path = ScoreCache::log_path(dir.path(), "m");
        let text = std::fs::read_to_string(&path).unwrap();
        let bad_key = ScoreCache::key("m", "p", "b");
        let tampered = text.replace("-1.2039728043259361", "-1.0");
        assert_ne!(tampered, text);
        std::fs::write(&path, tampered).unwrap();
        match ScoreCache::open(dir.path(), "m", false) {
            Err(Error::Integrity { key, .. }) => assert_eq!(key, bad_key),
            other => panic!("expected integrity error, got {other:?}"),
        }
        let repaired = ScoreCache::open(dir.path(), "m", true).unwrap();
        assert_eq!(repaired.len(), 1);
        assert!(repaired.get(&bad_key).is_none());
        drop(repaired);
        assert!(ScoreCache::open(dir.path(), "m", false).is_ok());
    }

    #[test]
    fn concurrent_inserts_are_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let m = mock("m");
        let cache = ScoreCache::open(dir.path(), "m", false).unwrap();
        let conts: Vec<String> = (0..32).map(|i| format!("a b {i}")).collect();
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| {
                    for c in &conts {
                        cached_score(&cache, &m, "p", c).unwrap();
                    }
                });
            }
        });
        assert_eq!(cache.len(), 32);
        drop(cache);
        let reopened = ScoreCache::open(dir.path(), "m", false).unwrap();
        assert_eq!(reopened.len(), 32);
    }
}
