use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::providers::{
    context_id, ContextRecord, GenerationRequest, Provider, ProviderCapabilities, TraceRecord,
};
use crate::types::{text_digest, TokenScores};

type Key = (String, String, String);

#[derive(Default)]
struct State {
    scores: HashMap<Key, TokenScores>,
    loaded: HashSet<String>,
    traces: HashMap<String, BufWriter<File>>,
    contexts: HashMap<String, BufWriter<File>>,
    known_contexts: HashSet<(String, String)>,
}

/// Token scores keyed by (provider URI, context id, text digest).
///
/// With a directory, entries persist as trace files readable by
/// `trace:<dir>/<name>.jsonl`: one `<name>.jsonl` and one
/// `<name>.contexts.jsonl` per provider, where `<name>` is the digest of the
/// provider URI and each record's sample id is the digest of its text.
pub struct LlCache {
    dir: Option<PathBuf>,
    state: Mutex<State>,
}

impl LlCache {
    pub fn in_memory() -> Self {
        LlCache {
            dir: None,
            state: Mutex::new(State::default()),
        }
    }

    pub fn on_disk(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(LlCache {
            dir: Some(dir.to_path_buf()),
            state: Mutex::new(State::default()),
        })
    }

    /// Trace file name used for a provider.
    pub fn file_stem(provider_uri: &str) -> String {
        text_digest(provider_uri)
    }

    pub fn trace_path(&self, provider_uri: &str) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(format!("{}.jsonl", Self::file_stem(provider_uri))))
    }

    fn contexts_path(&self, provider_uri: &str) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(format!("{}.contexts.jsonl", Self::file_stem(provider_uri))))
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("cache lock").scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn ensure_loaded(&self, state: &mut State, uri: &str) -> Result<()> {
        if !state.loaded.insert(uri.to_string()) {
            return Ok(());
        }
        let Some(path) = self.trace_path(uri) else {
            return Ok(());
        };
        if path.is_file() {
            let reader = BufReader::new(File::open(&path).map_err(|e| Error::io(&path, e))?);
            let mut n = 0;
            for line in reader.lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                // a run aborted mid-write can leave a torn last line
                let Ok(rec) = serde_json::from_str::<TraceRecord>(&line) else {
                    log::warn!("skipping unreadable cache line in {}", path.display());
                    continue;
                };
                let key = (uri.to_string(), rec.context_id.clone(), rec.sample_id.clone());
                let digest = rec.sample_id.clone();
                let mut ts = rec.into_scores();
                ts.text_digest = Some(digest);
                if ts.validate().is_ok() {
                    state.scores.insert(key, ts);
                    n += 1;
                }
            }
            log::debug!("loaded {n} cached scores for {uri}");
        }
        if let Some(ctx_path) = self.contexts_path(uri).filter(|p| p.is_file()) {
            let reader = BufReader::new(File::open(&ctx_path).map_err(|e| Error::io(&ctx_path, e))?);
            for line in reader.lines() {
                let line = line.map_err(|e| Error::io(&ctx_path, e))?;
                if let Ok(rec) = serde_json::from_str::<ContextRecord>(&line) {
                    state.known_contexts.insert((uri.to_string(), rec.context_id));
                }
            }
        }
        Ok(())
    }

    fn get(&self, uri: &str, ctx: &str, digest: &str, need_stats: bool) -> Result<Option<TokenScores>> {
        let mut state = self.state.lock().expect("cache lock");
        self.ensure_loaded(&mut state, uri)?;
        let key = (uri.to_string(), ctx.to_string(), digest.to_string());
        Ok(state
            .scores
            .get(&key)
            .filter(|ts| !need_stats || ts.has_stats())
            .cloned())
    }

    fn put(&self, uri: &str, context: Option<&str>, digest: &str, ts: &TokenScores) -> Result<()> {
        let mut state = self.state.lock().expect("cache lock");
        let key = (uri.to_string(), ts.context_id.clone(), digest.to_string());
        state.scores.insert(key, ts.clone());
        let (Some(trace_path), Some(ctx_path)) = (self.trace_path(uri), self.contexts_path(uri)) else {
            return Ok(());
        };
        if let Some(text) = context {
            let ctx_key = (uri.to_string(), ts.context_id.clone());
            if !state.known_contexts.contains(&ctx_key) {
                let w = writer(&mut state.contexts, uri, &ctx_path)?;
                let rec = ContextRecord {
                    context_id: ts.context_id.clone(),
                    text: text.to_string(),
                };
                writeln!(w, "{}", serde_json::to_string(&rec)?)
                    .and_then(|_| w.flush())
                    .map_err(|e| Error::io(&ctx_path, e))?;
                state.known_contexts.insert(ctx_key);
            }
        }
        let w = writer(&mut state.traces, uri, &trace_path)?;
        let rec = TraceRecord::from_scores(digest, ts);
        writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&trace_path, e))?;
        Ok(())
    }

    pub fn flush(&self) -> Result<()> {
        let mut guard = self.state.lock().expect("cache lock");
        let state = &mut *guard;
        for w in state.traces.values_mut().chain(state.contexts.values_mut()) {
            w.flush()
                .map_err(|e| Error::io(self.dir.clone().unwrap_or_default(), e))?;
        }
        Ok(())
    }
}

impl Drop for LlCache {
    fn drop(&mut self) {
        if let Err(e) = self.flush() {
            log::warn!("cache flush failed: {e}");
        }
    }
}

fn last_byte(path: &Path) -> Option<u8> {
    use std::io::{Read, Seek, SeekFrom};
    let mut f = File::open(path).ok()?;
    f.seek(SeekFrom::End(-1)).ok()?;
    let mut b = [0u8];
    f.read_exact(&mut b).ok()?;
    Some(b[0])
}

fn writer<'a>(
    map: &'a mut HashMap<String, BufWriter<File>>,
    uri: &str,
    path: &Path,
) -> Result<&'a mut BufWriter<File>> {
    if !map.contains_key(uri) {
        let torn = last_byte(path).is_some_and(|c| c != b'\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if torn {
            file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        map.insert(uri.to_string(), BufWriter::new(file));
    }
    Ok(map.get_mut(uri).expect("just inserted"))
}

/// A provider whose scores are served from, and recorded into, an [`LlCache`].
pub struct CachedProvider<'a> {
    inner: &'a dyn Provider,
    cache: &'a LlCache,
}

impl<'a> CachedProvider<'a> {
    pub fn new(inner: &'a dyn Provider, cache: &'a LlCache) -> Self {
        CachedProvider { inner, cache }
    }
}

impl Provider for CachedProvider<'_> {
    fn uri(&self) -> &str {
        self.inner.uri()
    }

    fn capabilities(&self) -> ProviderCapabilities {
        self.inner.capabilities()
    }

    fn max_concurrency(&self) -> Option<usize> {
        self.inner.max_concurrency()
    }

    fn score(&self, text: &str, context: Option<&str>, with_stats: bool) -> Result<TokenScores> {
        let uri = self.inner.uri();
        let digest = text_digest(text);
        let ctx = context_id(context);
        if let Some(hit) = self.cache.get(uri, &ctx, &digest, with_stats)? {
            return Ok(hit);
        }
        let mut ts = self.inner.score(text, context, with_stats)?;
        ts.context_id = ctx;
        ts.text_digest = Some(digest.clone());
        self.cache.put(uri, context, &digest, &ts)?;
        Ok(ts)
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String> {
        self.inner.generate(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{score_text, SyntheticConfig, TraceProvider};
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting<P> {
        inner: P,
        calls: AtomicUsize,
    }

    impl<P: Provider> Provider for Counting<P> {
        fn uri(&self) -> &str {
            self.inner.uri()
        }
        fn capabilities(&self) -> ProviderCapabilities {
            self.inner.capabilities()
        }
        fn score(&self, text: &str, context: Option<&str>, with_stats: bool) -> Result<TokenScores> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.score(text, context, with_stats)
        }
    }

    fn counting() -> Counting<crate::providers::TopicMixtureProvider> {
        Counting {
            inner: SyntheticConfig::with_seed(1).target_model().unwrap(),
            calls: AtomicUsize::new(0),
        }
    }

    #[test]
    fn memory_hits_skip_the_provider() {
        let inner = counting();
        let cache = LlCache::in_memory();
        let p = CachedProvider::new(&inner, &cache);
        let a = score_text(&p, "w001 w002", Some("w003")).unwrap();
        let b = score_text(&p, "w001 w002", Some("w003")).unwrap();
        assert_eq!(a, b);
        assert_eq!(inner.calls.load(Ordering::SeqCst), 1);
        // stats requested after a stat-less entry force a rescore
        p.score("w001 w002", Some("w003"), true).unwrap();
        assert_eq!(inner.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn disk_cache_survives_and_replays_as_trace() {
        let dir = tempfile::tempdir().unwrap();
        let inner = counting();
        let first = {
            let cache = LlCache::on_disk(dir.path()).unwrap();
            let p = CachedProvider::new(&inner, &cache);
            score_text(&p, "w004 w005 w006", Some("w001 w001")).unwrap()
        };
        let cache = LlCache::on_disk(dir.path()).unwrap();
        let p = CachedProvider::new(&inner, &cache);
        let again = score_text(&p, "w004 w005 w006", Some("w001 w001")).unwrap();
        assert_eq!(first.logprobs, again.logprobs);
        assert_eq!(inner.calls.load(Ordering::SeqCst), 1);

        let path = cache.trace_path(inner.uri()).unwrap();
        let trace = TraceProvider::open(&path).unwrap();
        let replay = score_text(&trace, "w004 w005 w006", Some("w001 w001")).unwrap();
        assert_eq!(replay.logprobs, first.logprobs);
    }

    #[test]
    fn torn_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let inner = counting();
        {
            let cache = LlCache::on_disk(dir.path()).unwrap();
            let p = CachedProvider::new(&inner, &cache);
            score_text(&p, "w001", None).unwrap();
        }
        let cache = LlCache::on_disk(dir.path()).unwrap();
        let path = cache.trace_path(inner.uri()).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        write!(f, "{{\"context_id\":\"\",\"sam").unwrap();
        let p = CachedProvider::new(&inner, &cache);
        score_text(&p, "w001", None).unwrap();
        assert_eq!(inner.calls.load(Ordering::SeqCst), 1);
    }
}
