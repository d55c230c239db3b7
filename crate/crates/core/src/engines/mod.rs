//! Black-box OCR backends, the response cache and the query ledger.

mod cache;
mod external;
mod ledger;
mod simulated;

use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use cache::{image_hash, parse_cache_lines, CacheRecord, ResponseCache};
pub use external::{external_recognize_http, external_recognize_subprocess, parse_http_response, DEFAULT_TIMEOUT};
pub use ledger::{LedgerEntry, Phase, QueryContext, QueryLedger};
pub use simulated::{simulated_recognize, SimulatedEngineConfig};

use crate::error::{Error, Result};
use crate::imaging::{Gray8, Image};
use crate::synthdoc::GlyphAtlas;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcrBackendDescriptor {
    pub backend_id: String,
    pub cost_per_query: f64,
}

/// A black-box text recognizer over 8-bit grayscale word images.
pub trait Recognizer: Send + Sync {
    fn descriptor(&self) -> &OcrBackendDescriptor;

    fn recognize_raw(&self, image: &Gray8) -> Result<String>;
}

pub struct SimulatedEngine {
    descriptor: OcrBackendDescriptor,
    config: SimulatedEngineConfig,
    atlas: GlyphAtlas,
}

impl SimulatedEngine {
    pub fn new(config: SimulatedEngineConfig, atlas: GlyphAtlas) -> Self {
        SimulatedEngine {
            descriptor: OcrBackendDescriptor {
                backend_id: "simulated".into(),
                cost_per_query: 0.0,
            },
            config,
            atlas,
        }
    }

    pub fn builtin() -> Self {
        Self::new(SimulatedEngineConfig::default(), GlyphAtlas::builtin())
    }

    pub fn config(&self) -> &SimulatedEngineConfig {
        &self.config
    }
}

impl Recognizer for SimulatedEngine {
    fn descriptor(&self) -> &OcrBackendDescriptor {
        &self.descriptor
    }

    fn recognize_raw(&self, image: &Gray8) -> Result<String> {
        Ok(simulated_recognize(&self.config, &self.atlas, image))
    }
}

/// Runs a shell command template with `{image}` replaced by a temporary PNG path.
pub struct SubprocessEngine {
    descriptor: OcrBackendDescriptor,
    template: String,
    timeout: Duration,
    scratch: PathBuf,
}

static SCRATCH_COUNTER: AtomicU64 = AtomicU64::new(0);

impl SubprocessEngine {
    pub fn new(template: impl Into<String>, cost_per_query: f64) -> Self {
        SubprocessEngine {
            descriptor: OcrBackendDescriptor {
                backend_id: "subprocess".into(),
                cost_per_query,
            },
            template: template.into(),
            timeout: DEFAULT_TIMEOUT,
            scratch: std::env::temp_dir(),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl Recognizer for SubprocessEngine {
    fn descriptor(&self) -> &OcrBackendDescriptor {
        &self.descriptor
    }

    fn recognize_raw(&self, image: &Gray8) -> Result<String> {
        let n = SCRATCH_COUNTER.fetch_add(1, Ordering::Relaxed);
        let path = self.scratch.join(format!("docclean-{}-{n}.png", std::process::id()));
        image.write_png(&path)?;
        let result = external_recognize_subprocess(&self.descriptor.backend_id, &self.template, &path, self.timeout);
        let _ = std::fs::remove_file(&path);
        result
    }
}

pub struct HttpEngine {
    descriptor: OcrBackendDescriptor,
    endpoint: String,
    timeout: Duration,
}

impl HttpEngine {
    pub fn new(endpoint: impl Into<String>, cost_per_query: f64) -> Self {
        HttpEngine {
            descriptor: OcrBackendDescriptor {
                backend_id: "http".into(),
                cost_per_query,
            },
            endpoint: endpoint.into(),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl Recognizer for HttpEngine {
    fn descriptor(&self) -> &OcrBackendDescriptor {
        &self.descriptor
    }

    fn recognize_raw(&self, image: &Gray8) -> Result<String> {
        let png = image.encode_png()?;
        external_recognize_http(&self.descriptor.backend_id, &self.endpoint, &png, self.timeout)
    }
}

/// Backend selector: `simulated`, `subprocess:<template>` or `http:<url>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackendSpec {
    Simulated,
    Subprocess(String),
    Http(String),
}

impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "simulated" {
            return Ok(BackendSpec::Simulated);
        }
        if let Some(t) = s.strip_prefix("subprocess:") {
            if t.trim().is_empty() {
                return Err(Error::Config("subprocess backend needs a command template".into()));
            }
            return Ok(BackendSpec::Subprocess(t.to_string()));
        }
        if s.starts_with("https://") {
            return Ok(BackendSpec::Http(s.to_string()));
        }
        if let Some(url) = s.strip_prefix("http:") {
            // accept both `http:http://host/...` and the shorthand `http://host/...`
            let url = if url.starts_with("//") { format!("http:{url}") } else { url.to_string() };
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                return Err(Error::Config(format!("http backend needs an http(s) URL, got {url:?}")));
            }
            return Ok(BackendSpec::Http(url));
        }
        Err(Error::Config(format!(
            "unknown backend {s:?} (expected simulated, subprocess:<template> or http:<url>)"
        )))
    }
}

impl TryFrom<String> for BackendSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BackendSpec> for String {
    fn from(b: BackendSpec) -> String {
        b.to_string()
    }
}

impl std::fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendSpec::Simulated => f.write_str("simulated"),
            BackendSpec::Subprocess(t) => write!(f, "subprocess:{t}"),
            BackendSpec::Http(u) => write!(f, "http:{u}"),
        }
    }
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Simulated
    }
}

impl BackendSpec {
    pub fn build(&self, cost_per_query: f64, simulated: &SimulatedEngineConfig) -> Box<dyn Recognizer> {
        match self {
            BackendSpec::Simulated => Box::new(SimulatedEngine::new(simulated.clone(), GlyphAtlas::builtin())),
            BackendSpec::Subprocess(t) => Box::new(SubprocessEngine::new(t.clone(), cost_per_query)),
            BackendSpec::Http(u) => Box::new(HttpEngine::new(u.clone(), cost_per_query)),
        }
    }

    /// Like [`BackendSpec::build`], with a per-query timeout for external engines.
    pub fn build_with_timeout(
        &self,
        cost_per_query: f64,
        simulated: &SimulatedEngineConfig,
        timeout: Duration,
    ) -> Box<dyn Recognizer> {
        match self {
            BackendSpec::Simulated => self.build(cost_per_query, simulated),
            BackendSpec::Subprocess(t) => Box::new(SubprocessEngine::new(t.clone(), cost_per_query).with_timeout(timeout)),
            BackendSpec::Http(u) => Box::new(HttpEngine::new(u.clone(), cost_per_query).with_timeout(timeout)),
        }
    }
}

/// Issue one query and charge the ledger, whether or not it succeeded.
pub fn recognize(backend: &dyn Recognizer, image: &Image, ctx: &QueryContext, ledger: &QueryLedger) -> Result<String> {
    let raster = image.to_gray8();
    let result = backend.recognize_raw(&raster);
    ledger.append(entry_for(backend, ctx));
    result
}

/// Serve from the cache when possible; otherwise query, charge and persist.
pub fn cached_recognize(
    backend: &dyn Recognizer,
    image: &Image,
    ctx: &QueryContext,
    ledger: &QueryLedger,
    cache: &ResponseCache,
) -> Result<String> {
    let raster = image.to_gray8();
    let hash = image_hash(&raster);
    let id = &backend.descriptor().backend_id;
    if let Some(text) = cache.get(id, &hash) {
        return Ok(text);
    }
    let result = backend.recognize_raw(&raster);
    ledger.append(entry_for(backend, ctx));
    let text = result?;
    cache.insert(id, &hash, &text)?;
    Ok(text)
}

fn entry_for(backend: &dyn Recognizer, ctx: &QueryContext) -> LedgerEntry {
    let d = backend.descriptor();
    LedgerEntry {
        backend_id: d.backend_id.clone(),
        phase: ctx.phase,
        sample_id: ctx.sample_id.clone(),
        epoch: ctx.epoch,
        cost: d.cost_per_query,
    }
}

/// A backend with its ledger and optional cache, issuing batches with a
/// bounded number of requests in flight.
pub struct OcrService {
    backend: Box<dyn Recognizer>,
    ledger: Arc<QueryLedger>,
    cache: Option<ResponseCache>,
    max_in_flight: usize,
}

impl OcrService {
    pub fn new(backend: Box<dyn Recognizer>) -> Self {
        OcrService {
            backend,
            ledger: Arc::new(QueryLedger::new()),
            cache: None,
            max_in_flight: 4,
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn backend(&self) -> &dyn Recognizer {
        self.backend.as_ref()
    }

    pub fn ledger(&self) -> &QueryLedger {
        &self.ledger
    }

    pub fn shared_ledger(&self) -> Arc<QueryLedger> {
        Arc::clone(&self.ledger)
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }

    /// Always queries the backend; never consults the cache.
    pub fn query(&self, image: &Image, ctx: &QueryContext) -> Result<String> {
        recognize(self.backend.as_ref(), image, ctx, &self.ledger)
    }

    /// Uses the cache when one is configured.
    pub fn query_cached(&self, image: &Image, ctx: &QueryContext) -> Result<String> {
        match &self.cache {
            Some(cache) => cached_recognize(self.backend.as_ref(), image, ctx, &self.ledger, cache),
            None => self.query(image, ctx),
        }
    }

    /// Query a batch. Results and ledger entries come back in request order.
    pub fn query_batch(&self, requests: &[(&Image, QueryContext)], use_cache: bool) -> Vec<Result<String>> {
        let mut out = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(self.max_in_flight) {
            let rasters: Vec<Gray8> = chunk.iter().map(|(img, _)| img.to_gray8()).collect();
            let id = self.backend.descriptor().backend_id.clone();
            let hashes: Vec<Option<String>> = rasters
                .iter()
                .map(|r| if use_cache && self.cache.is_some() { Some(image_hash(r)) } else { None })
                .collect();
            let cached: Vec<Option<String>> = hashes
                .iter()
                .map(|h| h.as_ref().and_then(|h| self.cache.as_ref().and_then(|c| c.get(&id, h))))
                .collect();
            let fresh: Vec<Option<Result<String>>> = if chunk.len() == 1 || self.max_in_flight == 1 {
                rasters
                    .iter()
                    .zip(&cached)
                    .map(|(r, c)| c.is_none().then(|| self.backend.recognize_raw(r)))
                    .collect()
            } else {
                std::thread::scope(|s| {
                    let handles: Vec<_> = rasters
                        .iter()
                        .zip(&cached)
                        .map(|(r, c)| c.is_none().then(|| s.spawn(|| self.backend.recognize_raw(r))))
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| {
                            h.map(|h| {
                                h.join().unwrap_or_else(|_| {
                                    Err(Error::Backend {
                                        backend_id: id.clone(),
                                        cause: "worker panicked".into(),
                                    })
                                })
                            })
                        })
                        .collect()
                })
            };
            for (i, ((_, ctx), result)) in chunk.iter().zip(fresh).enumerate() {
                match result {
                    None => out.push(Ok(cached[i].clone().expect("cache hit"))),
                    Some(result) => {
                        self.ledger.append(entry_for(self.backend.as_ref(), ctx));
                        let result = match (&result, &hashes[i], &self.cache) {
                            (Ok(text), Some(h), Some(c)) => c.insert(&id, h, text).map(|_| text.clone()),
                            _ => result,
                        };
                        out.push(result);
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdoc::render_clean;

    fn ctx(id: &str) -> QueryContext {
        QueryContext::new(Phase::Eval, id, 0)
    }

    struct Failing(OcrBackendDescriptor);

    impl Recognizer for Failing {
        fn descriptor(&self) -> &OcrBackendDescriptor {
            &self.0
        }
        fn recognize_raw(&self, _: &Gray8) -> Result<String> {
            Err(Error::Backend {
                backend_id: self.0.backend_id.clone(),
                cause: "down".into(),
            })
        }
    }

    #[test]
    fn recognize_charges_one_entry() {
        let engine = SimulatedEngine::builtin();
        let ledger = QueryLedger::new();
        let img = render_clean("cat", &GlyphAtlas::builtin(), 2).unwrap();
        assert_eq!(recognize(&engine, &img, &ctx("s1"), &ledger).unwrap(), "cat");
        assert_eq!(ledger.len(), 1);
        assert_eq!(ledger.snapshot()[0].sample_id, "s1");
    }

    #[test]
    fn failed_queries_still_charge() {
        let engine = Failing(OcrBackendDescriptor {
            backend_id: "paid".into(),
            cost_per_query: 0.0015,
        });
        let ledger = QueryLedger::new();
        let img = Image::filled(12, 12, 1.0);
        let err = recognize(&engine, &img, &ctx("s"), &ledger).unwrap_err();
        assert!(matches!(err, Error::Backend { ref backend_id, .. } if backend_id == "paid"));
        assert_eq!(ledger.len(), 1);
        assert_eq!(ledger.total_cost(), 0.0015);
    }

    #[test]
    fn cache_hits_add_no_entries() {
        let engine = SimulatedEngine::builtin();
        let ledger = QueryLedger::new();
        let cache = ResponseCache::in_memory();
        let atlas = GlyphAtlas::builtin();
        let a = render_clean("dog", &atlas, 2).unwrap();
        let mut b = a.clone();
        b.set(0, 0, 0.9);
        cached_recognize(&engine, &a, &ctx("a"), &ledger, &cache).unwrap();
        cached_recognize(&engine, &a, &ctx("a"), &ledger, &cache).unwrap();
        assert_eq!(ledger.len(), 1);
        cached_recognize(&engine, &b, &ctx("b"), &ledger, &cache).unwrap();
        assert_eq!(ledger.len(), 2);
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn cold_cache_counts_distinct_images() {
        let service = OcrService::new(Box::new(SimulatedEngine::builtin())).with_cache(ResponseCache::in_memory());
        let atlas = GlyphAtlas::builtin();
        let words = ["ab", "cd", "ef", "gh", "ij"];
        let imgs: Vec<Image> = words.iter().map(|w| render_clean(w, &atlas, 2).unwrap()).collect();
        let reqs: Vec<_> = imgs.iter().zip(words).map(|(i, w)| (i, ctx(w))).collect();
        let out = service.query_batch(&reqs, true);
        assert_eq!(out.into_iter().map(Result::unwrap).collect::<Vec<_>>(), words);
        assert_eq!(service.ledger().len(), 5);
        service.query_batch(&reqs, true);
        assert_eq!(service.ledger().len(), 5);
        service.query_batch(&reqs, false);
        assert_eq!(service.ledger().len(), 10);
    }

    #[test]
    fn batch_ledger_is_in_request_order() {
        let service = OcrService::new(Box::new(SimulatedEngine::builtin())).with_max_in_flight(3);
        let img = Image::filled(12, 20, 1.0);
        let reqs: Vec<_> = (0..10).map(|i| (&img, ctx(&format!("s{i}")))).collect();
        service.query_batch(&reqs, false);
        let ids: Vec<String> = service.ledger().snapshot().into_iter().map(|e| e.sample_id).collect();
        assert_eq!(ids, (0..10).map(|i| format!("s{i}")).collect::<Vec<_>>());
    }

    #[test]
    fn backend_spec_parsing() {
        assert_eq!("simulated".parse::<BackendSpec>().unwrap(), BackendSpec::Simulated);
        assert_eq!(
            "subprocess:tesseract {image} stdout".parse::<BackendSpec>().unwrap(),
            BackendSpec::Subprocess("tesseract {image} stdout".into())
        );
        assert_eq!(
            "http:http://localhost:8080/ocr".parse::<BackendSpec>().unwrap(),
            BackendSpec::Http("http://localhost:8080/ocr".into())
        );
        assert_eq!(
            "http://localhost/ocr".parse::<BackendSpec>().unwrap(),
            BackendSpec::Http("http://localhost/ocr".into())
        );
        assert!("tesseract".parse::<BackendSpec>().is_err());
        assert!("subprocess:".parse::<BackendSpec>().is_err());
        assert!("http:ftp://x".parse::<BackendSpec>().is_err());
    }
}
