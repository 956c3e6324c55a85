//! From raw tweet dumps and crawled pages to [`Article`] records.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use scraper::{Html, Selector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{self, Article, DomainCoding, TweetRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Twitter,
    Opengraph,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreviewCard {
    pub title: Option<String>,
    pub title_source: SourceTag,
    pub image_url: Option<String>,
    pub image_source: SourceTag,
}

/// Reads the preview title and image from `twitter:*` meta tags, falling back
/// to `og:*`. The first occurrence of each tag wins.
pub fn extract_preview(html: &[u8]) -> Result<PreviewCard> {
    let text = std::str::from_utf8(html).map_err(|e| Error::Parse(format!("page is not UTF-8: {e}")))?;
    let doc = Html::parse_document(text);
    let sel = Selector::parse("meta").map_err(|e| Error::Parse(format!("{e:?}")))?;

    let mut found: HashMap<&'static str, String> = HashMap::new();
    const KEYS: [&str; 4] = ["twitter:title", "og:title", "twitter:image", "og:image"];
    for el in doc.select(&sel) {
        let v = el.value();
        let Some(content) = v.attr("content") else { continue };
        for attr in ["name", "property"] {
            let Some(key) = v.attr(attr) else { continue };
            if let Some(k) = KEYS.iter().find(|k| key.trim().eq_ignore_ascii_case(k)) {
                found.entry(k).or_insert_with(|| content.trim().to_string());
            }
        }
    }
    let mut pick = |tw: &str, og: &str| -> (Option<String>, SourceTag) {
        let nonempty = |s: Option<String>| s.filter(|s| !s.is_empty());
        if let Some(v) = nonempty(found.remove(tw)) {
            (Some(v), SourceTag::Twitter)
        } else if let Some(v) = nonempty(found.remove(og)) {
            (Some(v), SourceTag::Opengraph)
        } else {
            (None, SourceTag::None)
        }
    };
    let (title, title_source) = pick("twitter:title", "og:title");
    let (image_url, image_source) = pick("twitter:image", "og:image");
    Ok(PreviewCard { title, title_source, image_url, image_source })
}

fn host_allowed<'a>(host: &str, allowed: &'a HashMap<String, DomainCoding>) -> Option<&'a DomainCoding> {
    let host = host.to_ascii_lowercase();
    let mut h = host.as_str();
    loop {
        if let Some(c) = allowed.get(h) {
            return Some(c);
        }
        match h.find('.') {
            Some(i) => h = &h[i + 1..],
            None => return None,
        }
    }
}

pub fn article_id_for(url: &str) -> String {
    hex::encode(&Sha256::digest(url.as_bytes())[..8])
}

/// Keeps tweets linking to an allowed host (or one of its subdomains) and
/// groups them by canonical URL, one [`Article`] per URL, sorted by URL.
pub fn group_tweets_by_article(
    tweets: &[TweetRecord],
    allowed_domains: &HashMap<String, DomainCoding>,
) -> Vec<Article> {
    let mut groups: BTreeMap<&str, (DomainCoding, Vec<TweetRecord>)> = BTreeMap::new();
    for t in tweets {
        let Ok(u) = url::Url::parse(&t.linked_url) else { continue };
        let Some(host) = u.host_str() else { continue };
        let Some(&coding) = host_allowed(host, allowed_domains) else { continue };
        groups
            .entry(t.linked_url.as_str())
            .or_insert_with(|| (coding, Vec::new()))
            .1
            .push(t.clone());
    }
    groups
        .into_iter()
        .map(|(url, (coding, tweets))| Article::new(article_id_for(url), url, coding, tweets))
        .collect()
}

/// Texts of the `k` most engaging tweets (retweets + likes, ties by id),
/// cycling through the ranking when the article has fewer than `k` tweets.
pub fn select_top_tweets(article: &Article, k: usize) -> Result<Vec<String>> {
    if article.tweets.is_empty() {
        return Err(Error::invalid(format!("article {} has no tweets", article.article_id)));
    }
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    let mut ranked: Vec<&TweetRecord> = article.tweets.iter().collect();
    ranked.sort_by(|a, b| b.engagement().cmp(&a.engagement()).then_with(|| a.tweet_id.cmp(&b.tweet_id)));
    Ok(ranked.iter().cycle().take(k).map(|t| t.text.clone()).collect())
}

#[derive(Debug, Clone)]
pub struct Fetched {
    pub bytes: Vec<u8>,
    pub content_type: Option<String>,
}

/// Network access for pages and images.
pub trait Fetcher: Send + Sync {
    fn fetch(&self, url: &str) -> Result<Fetched>;
}

/// Cache file stem for a URL.
pub fn cache_key(url: &str) -> String {
    hex::encode(Sha256::digest(url.as_bytes()))
}

fn content_type_for_extension(ext: &str) -> Option<&'static str> {
    match ext.to_ascii_lowercase().as_str() {
        "html" | "htm" => Some("text/html"),
        "png" => Some("image/png"),
        "jpg" | "jpeg" => Some("image/jpeg"),
        "gif" => Some("image/gif"),
        "webp" => Some("image/webp"),
        _ => None,
    }
}

fn extension_for_content_type(ct: &str) -> Option<&'static str> {
    let ct = ct.split(';').next().unwrap_or("").trim().to_ascii_lowercase();
    match ct.as_str() {
        "image/png" => Some("png"),
        "image/jpeg" | "image/jpg" => Some("jpg"),
        "image/gif" => Some("gif"),
        "image/webp" => Some("webp"),
        _ => None,
    }
}

/// Offline fetcher over a directory of `<sha256(url)>.<ext>` files.
#[derive(Debug, Clone)]
pub struct CacheFetcher {
    dir: PathBuf,
    index: HashMap<String, PathBuf>,
}

impl CacheFetcher {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let mut index = HashMap::new();
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                index.insert(stem.to_string(), path.clone());
            }
        }
        Ok(Self { dir, index })
    }

    /// Writes a fixture so that `fetch(url)` returns `bytes`.
    pub fn store(dir: &Path, url: &str, ext: &str, bytes: &[u8]) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.{ext}", cache_key(url)));
        std::fs::write(&path, bytes)?;
        Ok(path)
    }
}

impl Fetcher for CacheFetcher {
    fn fetch(&self, url: &str) -> Result<Fetched> {
        let path = self.index.get(&cache_key(url)).ok_or_else(|| {
            Error::Fetch(format!("{url} not in offline cache {}", self.dir.display()))
        })?;
        let content_type = path
            .extension()
            .and_then(|e| e.to_str())
            .and_then(content_type_for_extension)
            .map(String::from);
        Ok(Fetched { bytes: std::fs::read(path)?, content_type })
    }
}

/// Blocking HTTP client.
pub struct HttpFetcher {
    agent: ureq::Agent,
}

impl HttpFetcher {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).build();
        Self { agent: config.into() }
    }
}

impl Fetcher for HttpFetcher {
    fn fetch(&self, url: &str) -> Result<Fetched> {
        let mut resp = self.agent.get(url).call().map_err(|e| Error::Fetch(format!("{url}: {e}")))?;
        let content_type = resp
            .headers()
            .get("content-type")
            .and_then(|v| v.to_str().ok())
            .map(String::from);
        let bytes = resp
            .body_mut()
            .with_config()
            .limit(20 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| Error::Fetch(format!("{url}: {e}")))?;
        Ok(Fetched { bytes, content_type })
    }
}

/// Retries a fetcher with exponential backoff (`base_delay · 2^attempt`).
pub struct Retrying<F> {
    inner: F,
    attempts: usize,
    base_delay: Duration,
}

impl<F: Fetcher> Retrying<F> {
    pub fn new(inner: F, attempts: usize, base_delay: Duration) -> Self {
        Self { inner, attempts: attempts.max(1), base_delay }
    }
}

impl<F: Fetcher> Fetcher for Retrying<F> {
    fn fetch(&self, url: &str) -> Result<Fetched> {
        let mut last = None;
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(self.base_delay * (1u32 << (attempt - 1)));
            }
            match self.inner.fetch(url) {
                Ok(f) => return Ok(f),
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap_or_else(|| Error::Fetch(url.to_string())))
    }
}

/// Stores image bytes under `<sha256(bytes)>.<ext>` and returns the file name.
/// Non-image content types are rejected.
pub fn store_image(dir: &Path, fetched: &Fetched) -> Result<String> {
    let ext = match fetched.content_type.as_deref() {
        Some(ct) => extension_for_content_type(ct)
            .ok_or_else(|| Error::Fetch(format!("content type `{ct}` is not a supported image")))?,
        None => match image::guess_format(&fetched.bytes) {
            Ok(image::ImageFormat::Png) => "png",
            Ok(image::ImageFormat::Jpeg) => "jpg",
            _ => return Err(Error::Fetch("untyped response is not a known image".into())),
        },
    };
    std::fs::create_dir_all(dir)?;
    let name = format!("{}.{ext}", hex::encode(Sha256::digest(&fetched.bytes)));
    let path = dir.join(&name);
    if !path.exists() {
        std::fs::write(&path, &fetched.bytes)?;
    }
    Ok(name)
}

/// Reads `host,coding` lines (blank lines and `#` comments ignored).
pub fn read_domains(path: impl AsRef<Path>) -> Result<HashMap<String, DomainCoding>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (host, coding) = line
            .split_once(',')
            .ok_or_else(|| Error::Parse(format!("domains line {}: expected `host,coding`", i + 1)))?;
        out.insert(host.trim().to_ascii_lowercase(), coding.parse()?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub tweets: PathBuf,
    pub domains: PathBuf,
    pub html_cache: PathBuf,
    pub out: PathBuf,
    pub offline: bool,
    pub max_parallel: usize,
    pub retries: usize,
    pub backoff: Duration,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub tweets_read: usize,
    pub tweets_bad_url: usize,
    pub tweets_kept: usize,
    pub articles: usize,
    pub page_failures: usize,
    pub missing_title: usize,
    pub missing_image: usize,
    pub image_failures: usize,
}

pub const ARTICLES_FILE: &str = "articles.jsonl";
pub const IMAGES_DIR: &str = "images";

/// Runs the whole ingest step and writes `articles.jsonl` plus the image blob
/// directory under `opts.out`.
pub fn run_ingest(opts: &IngestOptions) -> Result<IngestReport> {
    let fetcher: Box<dyn Fetcher> = if opts.offline {
        Box::new(CacheFetcher::new(&opts.html_cache)?)
    } else {
        Box::new(Retrying::new(HttpFetcher::new(Duration::from_secs(30)), opts.retries, opts.backoff))
    };
    ingest_with(opts, fetcher.as_ref())
}

pub fn ingest_with(opts: &IngestOptions, fetcher: &dyn Fetcher) -> Result<IngestReport> {
    let raw: Vec<TweetRecord> = corpus::read_jsonl(&opts.tweets)?;
    let domains = read_domains(&opts.domains)?;
    let mut report = IngestReport { tweets_read: raw.len(), ..Default::default() };
    let mut tweets = Vec::with_capacity(raw.len());
    for mut t in raw {
        t.validate()?;
        match corpus::canonicalize_url(&t.linked_url) {
            Ok(u) => {
                t.linked_url = u;
                tweets.push(t);
            }
            Err(_) => report.tweets_bad_url += 1,
        }
    }
    let mut articles = group_tweets_by_article(&tweets, &domains);
    report.tweets_kept = articles.iter().map(|a| a.tweets.len()).sum();
    report.articles = articles.len();

    let image_dir = opts.out.join(IMAGES_DIR);
    std::fs::create_dir_all(&image_dir)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Outcome)>> = Mutex::new(Vec::with_capacity(articles.len()));
    std::thread::scope(|s| {
        for _ in 0..opts.max_parallel.max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= articles.len() {
                    break;
                }
                let outcome = fetch_preview(&articles[i].url, fetcher, &image_dir);
                results.lock().unwrap().push((i, outcome));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _)| *i);
    for (i, outcome) in results {
        let a = &mut articles[i];
        match outcome {
            Outcome::PageFailed => report.page_failures += 1,
            Outcome::Card { title, image_ref, image_failed } => {
                if title.is_none() {
                    report.missing_title += 1;
                }
                if image_failed {
                    report.image_failures += 1;
                } else if image_ref.is_none() {
                    report.missing_image += 1;
                }
                a.title = title;
                a.image_ref = image_ref.map(|n| format!("{IMAGES_DIR}/{n}"));
            }
        }
    }

    std::fs::create_dir_all(&opts.out)?;
    let f = std::fs::File::create(opts.out.join(ARTICLES_FILE))?;
    corpus::write_jsonl(std::io::BufWriter::new(f), &articles)?;
    std::fs::write(opts.out.join("ingest_report.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

enum Outcome {
    PageFailed,
    Card { title: Option<String>, image_ref: Option<String>, image_failed: bool },
}

fn fetch_preview(url: &str, fetcher: &dyn Fetcher, image_dir: &Path) -> Outcome {
    let Ok(page) = fetcher.fetch(url) else { return Outcome::PageFailed };
    let Ok(card) = extract_preview(&page.bytes) else { return Outcome::PageFailed };
    let mut image_failed = false;
    let image_ref = card.image_url.as_deref().and_then(|img| {
        let resolved = url::Url::parse(url)
            .and_then(|base| base.join(img))
            .map(|u| u.to_string())
            .unwrap_or_else(|_| img.to_string());
        match fetcher.fetch(&resolved).and_then(|f| store_image(image_dir, &f)) {
            Ok(name) => Some(name),
            Err(_) => {
                image_failed = true;
                None
            }
        }
    });
    Outcome::Card { title: card.title, image_ref, image_failed }
}
