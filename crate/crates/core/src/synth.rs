//! Seeded synthetic corpora: class-conditional articles for the classifier
//! and saliency checks, paired image/text data for retrieval, and offline
//! ingest fixtures.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Article, DomainCoding, TweetRecord};
use crate::error::Result;
use crate::ingest::{article_id_for, CacheFetcher};

pub const POPULAR_TRIGGER: &str = "trending";
pub const UNPOPULAR_TRIGGER: &str = "yawn";
pub const RELIABLE_TRIGGER: &str = "verified";
pub const UNRELIABLE_TRIGGER: &str = "hoax";

const FILLER: [&str; 48] = [
    "the", "a", "news", "today", "report", "people", "city", "new", "said", "after", "year", "time", "state", "world",
    "local", "week", "story", "update", "more", "first", "group", "plan", "case", "team", "public", "school", "water",
    "market", "health", "night", "home", "road", "power", "park", "game", "music", "food", "price", "house", "police",
    "court", "event", "weather", "film", "study", "data", "video", "photo",
];

pub const RELIABLE_HOSTS: [&str; 2] = ["daily-ledger.example", "civic-times.example"];
pub const UNRELIABLE_HOSTS: [&str; 2] = ["truth-blast.example", "wire-alert.example"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSynth {
    pub n_articles: usize,
    pub seed: u64,
    pub image_size: u32,
    /// Share of articles with mid-range engagement (neither class).
    pub middle_fraction: f64,
    pub min_tweets: usize,
    pub max_tweets: usize,
    /// Side length of the colored patch.
    pub patch: u32,
}

impl Default for ClassificationSynth {
    fn default() -> Self {
        Self { n_articles: 2000, seed: 0, image_size: 32, middle_fraction: 0.0, min_tweets: 3, max_tweets: 6, patch: 10 }
    }
}

#[derive(Debug, Clone)]
pub struct SynthArticle {
    pub article: Article,
    pub image: RgbImage,
    /// `None` for mid-range articles.
    pub popular: Option<bool>,
    pub reliable: bool,
}

fn filler(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    (0..n).map(|_| FILLER.choose(rng).expect("non-empty").to_string()).collect()
}

fn insert_at_random(rng: &mut ChaCha8Rng, words: &mut Vec<String>, token: &str) {
    let pos = rng.random_range(0..=words.len());
    words.insert(pos, token.to_string());
}

fn noise_canvas(rng: &mut ChaCha8Rng, size: u32) -> RgbImage {
    RgbImage::from_fn(size, size, |_, _| {
        let v = rng.random_range(0..48u8);
        Rgb([v, v.saturating_add(rng.random_range(0..8)), v])
    })
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, color: [u8; 3]) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, Rgb(color));
        }
    }
}

/// Dark noise with a red patch inside the top-left quadrant (reliable) or a
/// blue patch inside the bottom-right quadrant (unreliable).
pub fn class_image(rng: &mut ChaCha8Rng, size: u32, patch: u32, reliable: bool) -> RgbImage {
    let mut img = noise_canvas(rng, size);
    let half = size / 2;
    let span = half.saturating_sub(patch).max(1);
    let (ox, oy) = if reliable { (0, 0) } else { (half, half) };
    let x0 = ox + rng.random_range(0..span);
    let y0 = oy + rng.random_range(0..span);
    let color = if reliable { [230, 40, 40] } else { [40, 60, 230] };
    fill_rect(&mut img, x0, y0, patch.min(half), patch.min(half), color);
    img
}

/// Articles whose tweets carry a popularity trigger, whose titles carry a
/// reliability trigger, and whose engagement-to-audience ratio separates
/// popular from unpopular articles. Classes are balanced.
pub fn generate_classification(cfg: &ClassificationSynth) -> Vec<SynthArticle> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_middle = (cfg.middle_fraction * cfg.n_articles as f64).round() as usize;
    let mut out = Vec::with_capacity(cfg.n_articles);
    for i in 0..cfg.n_articles {
        let reliable = i % 2 == 0;
        let popular = if i >= cfg.n_articles - n_middle { None } else { Some((i / 2) % 2 == 0) };
        let hosts = if reliable { &RELIABLE_HOSTS } else { &UNRELIABLE_HOSTS };
        let host = hosts[i % hosts.len()];
        let url = format!("https://{host}/story/{i:05}");
        let coding = if reliable { DomainCoding::Green } else { DomainCoding::Red };

        let n_title = rng.random_range(3..7);
        let mut title = filler(&mut rng, n_title);
        insert_at_random(&mut rng, &mut title, if reliable { RELIABLE_TRIGGER } else { UNRELIABLE_TRIGGER });

        let n_tweets = rng.random_range(cfg.min_tweets..=cfg.max_tweets);
        let tweets = (0..n_tweets)
            .map(|t| {
                let n_words = rng.random_range(3..7);
                let mut words = filler(&mut rng, n_words);
                match popular {
                    Some(true) => insert_at_random(&mut rng, &mut words, POPULAR_TRIGGER),
                    Some(false) => insert_at_random(&mut rng, &mut words, UNPOPULAR_TRIGGER),
                    None => {}
                }
                let followers = rng.random_range(200..5000i64);
                let rate = match popular {
                    Some(true) => rng.random_range(0.2..0.4),
                    Some(false) => rng.random_range(0.001..0.01),
                    None => rng.random_range(0.04..0.08),
                };
                let engagement = (followers as f64 * rate).round() as i64;
                let retweets = engagement / 3;
                TweetRecord {
                    tweet_id: format!("{i:05}-{t}"),
                    text: words.join(" "),
                    retweet_count: retweets,
                    like_count: engagement - retweets,
                    author_followers: followers,
                    linked_url: url.clone(),
                }
            })
            .collect();
        let mut article = Article::new(article_id_for(&url), url, coding, tweets);
        article.title = Some(title.join(" "));
        out.push(SynthArticle {
            article,
            image: class_image(&mut rng, cfg.image_size, cfg.patch, reliable),
            popular,
            reliable,
        });
    }
    out
}

#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub tweets: PathBuf,
    pub domains: PathBuf,
    pub html_cache: PathBuf,
}

fn escape_attr(s: &str) -> String {
    s.replace('&', "&amp;").replace('"', "&quot;").replace('<', "&lt;")
}

/// Writes `tweets.jsonl`, `domains.csv` and an offline page/image cache so
/// that ingest can rebuild the articles without network access.
pub fn write_ingest_fixtures(articles: &[SynthArticle], dir: &Path) -> Result<FixturePaths> {
    std::fs::create_dir_all(dir)?;
    let cache = dir.join("html_cache");
    std::fs::create_dir_all(&cache)?;
    let mut tweets = Vec::new();
    for (i, s) in articles.iter().enumerate() {
        let a = &s.article;
        tweets.extend(a.tweets.iter().cloned());
        let image_url = format!("/media/{i:05}.png");
        let title = a.title.clone().unwrap_or_default();
        let page = format!(
            "<!doctype html><html><head><title>{t}</title>\n\
             <meta property=\"og:title\" content=\"{t} (og)\">\n\
             <meta name=\"twitter:title\" content=\"{t}\">\n\
             <meta property=\"og:image\" content=\"{image_url}\">\n\
             </head><body><p>{t}</p></body></html>\n",
            t = escape_attr(&title)
        );
        CacheFetcher::store(&cache, &a.url, "html", page.as_bytes())?;
        let mut png = Vec::new();
        s.image
            .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| crate::Error::Decode(e.to_string()))?;
        let abs = url::Url::parse(&a.url).and_then(|u| u.join(&image_url)).map_err(|e| crate::Error::Parse(e.to_string()))?;
        CacheFetcher::store(&cache, abs.as_str(), "png", &png)?;
    }
    let tweets_path = dir.join("tweets.jsonl");
    crate::corpus::write_jsonl(std::io::BufWriter::new(std::fs::File::create(&tweets_path)?), &tweets)?;
    let domains_path = dir.join("domains.csv");
    let mut csv = String::from("# host,coding\n");
    for h in RELIABLE_HOSTS {
        csv.push_str(&format!("{h},green\n"));
    }
    for h in UNRELIABLE_HOSTS {
        csv.push_str(&format!("{h},red\n"));
    }
    std::fs::write(&domains_path, csv)?;
    Ok(FixturePaths { tweets: tweets_path, domains: domains_path, html_cache: cache })
}

/// Paired-data domain: in `Biased`, a stripe shade and a `tag*` token agree,
/// giving an easy shortcut; in `Clean` both are present but drawn
/// independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairDomain {
    Biased,
    Clean,
}

pub const PALETTE_LEVELS: usize = 5;
pub const TAG_LEVELS: usize = 8;
const STRIPE: u32 = 6;

#[derive(Debug, Clone)]
pub struct SynthPair {
    pub id: String,
    pub url: String,
    pub title: String,
    pub tweets: Vec<String>,
    pub image: RgbImage,
    /// Palette level per channel.
    pub color: [usize; 3],
    /// Index into `PATTERN_WORDS`.
    pub pattern: usize,
    pub image_tag: usize,
    pub text_tag: usize,
}

/// Patch fill styles and the word naming each.
pub const PATTERN_WORDS: [&str; 4] = ["solid", "ring", "bands", "columns"];

fn draw_pattern(img: &mut RgbImage, x0: u32, y0: u32, side: u32, pattern: usize, rgb: [u8; 3]) {
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            let (dx, dy) = (x - x0, y - y0);
            let on = match pattern {
                0 => true,
                1 => dx < 4 || dy < 4 || dx >= side - 4 || dy >= side - 4,
                2 => (dy / 3) % 2 == 0,
                _ => (dx / 3) % 2 == 0,
            };
            if on {
                img.put_pixel(x, y, Rgb(rgb));
            }
        }
    }
}

fn level_value(level: usize) -> u8 {
    (64 * level).min(255) as u8
}

/// Images with one patch in a palette color; the title names the color with
/// one word per channel level. Both carry a domain tag (see [`PairDomain`]).
pub fn generate_pairs(n: usize, seed: u64, domain: PairDomain, size: u32, id_prefix: &str) -> Vec<SynthPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channel_words = [["crimson", "scarlet", "ruby", "cherry", "rose"], ["olive", "fern", "jade", "lime", "mint"], [
        "navy", "cobalt", "azure", "indigo", "sky",
    ]];
    (0..n)
        .map(|i| {
            let color = [0, 1, 2].map(|_| rng.random_range(0..PALETTE_LEVELS));
            let image_tag = rng.random_range(0..TAG_LEVELS);
            let text_tag = match domain {
                PairDomain::Biased => image_tag,
                PairDomain::Clean => rng.random_range(0..TAG_LEVELS),
            };
            let mut img = noise_canvas(&mut rng, size);
            let patch = size * 3 / 4;
            let x0 = rng.random_range(0..=size - patch);
            let y0 = rng.random_range(0..=size - patch - STRIPE);
            let pattern = rng.random_range(0..PATTERN_WORDS.len());
            draw_pattern(&mut img, x0, y0, patch, pattern, color.map(level_value));
            let shade = (30 + 30 * image_tag) as u8;
            fill_rect(&mut img, 0, size - STRIPE, size, STRIPE, [shade, shade, shade]);

            let mut title = filler(&mut rng, 1);
            for (c, &lvl) in color.iter().enumerate() {
                insert_at_random(&mut rng, &mut title, channel_words[c][lvl]);
            }
            insert_at_random(&mut rng, &mut title, PATTERN_WORDS[pattern]);
            insert_at_random(&mut rng, &mut title, &format!("tag{text_tag}"));
            let tweets = (0..2)
                .map(|_| {
                    let mut w = filler(&mut rng, 2);
                    for (c, &lvl) in color.iter().enumerate() {
                        insert_at_random(&mut rng, &mut w, channel_words[c][lvl]);
                    }
                    insert_at_random(&mut rng, &mut w, PATTERN_WORDS[pattern]);
                    insert_at_random(&mut rng, &mut w, &format!("tag{text_tag}"));
                    w.join(" ")
                })
                .collect();
            let id = format!("{id_prefix}{i:05}");
            SynthPair {
                url: format!("https://pairs.example/{id}"),
                id,
                title: title.join(" "),
                tweets,
                image: img,
                color,
                pattern,
                image_tag,
                text_tag,
            }
        })
        .collect()
}

/// Two-dimensional Gaussian-ish feature clouds for homogeneity checks.
pub fn gaussian_rows(n: usize, dim: usize, shift: f64, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(shift, scale).expect("positive scale");
    (0..n).map(|_| (0..dim).map(|_| d.sample(&mut rng)).collect()).collect()
}
