//! Article data model, popularity measure, λ selection, label assignment,
//! class balancing and train/val/test splitting.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default smoothing constant for the popularity measure.
pub const DEFAULT_LAMBDA: f64 = 1e4;
/// Fraction of articles taken as popular (top) and unpopular (bottom).
pub const DEFAULT_QUANTILE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TweetRecord {
    pub tweet_id: String,
    pub text: String,
    pub retweet_count: i64,
    pub like_count: i64,
    pub author_followers: i64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub linked_url: String,
}

impl TweetRecord {
    pub fn validate(&self) -> Result<()> {
        if self.retweet_count < 0 || self.like_count < 0 || self.author_followers < 0 {
            return Err(Error::invalid(format!(
                "tweet {} has a negative count (retweets {}, likes {}, followers {})",
                self.tweet_id, self.retweet_count, self.like_count, self.author_followers
            )));
        }
        Ok(())
    }

    pub fn engagement(&self) -> i64 {
        self.retweet_count + self.like_count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainCoding {
    Red,
    Orange,
    Yellow,
    Green,
    Satire,
}

impl DomainCoding {
    pub fn reliability(self) -> ReliabilityLabel {
        match self {
            DomainCoding::Green => ReliabilityLabel::Reliable,
            DomainCoding::Red | DomainCoding::Orange => ReliabilityLabel::Unreliable,
            DomainCoding::Yellow | DomainCoding::Satire => ReliabilityLabel::Excluded,
        }
    }
}

impl std::str::FromStr for DomainCoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "red" => Ok(DomainCoding::Red),
            "orange" => Ok(DomainCoding::Orange),
            "yellow" => Ok(DomainCoding::Yellow),
            "green" => Ok(DomainCoding::Green),
            "satire" => Ok(DomainCoding::Satire),
            other => Err(Error::Parse(format!("unknown domain coding `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopularityLabel {
    Popular,
    Unpopular,
    Middle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReliabilityLabel {
    Reliable,
    Unreliable,
    Excluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Article {
    pub article_id: String,
    pub url: String,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub image_ref: Option<String>,
    pub domain_coding: DomainCoding,
    pub tweets: Vec<TweetRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub popularity_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub popularity_label: Option<PopularityLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reliability_label: Option<ReliabilityLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl Article {
    pub fn new(
        article_id: impl Into<String>,
        url: impl Into<String>,
        domain_coding: DomainCoding,
        tweets: Vec<TweetRecord>,
    ) -> Self {
        Self {
            article_id: article_id.into(),
            url: url.into(),
            title: None,
            image_ref: None,
            domain_coding,
            tweets,
            popularity_score: None,
            popularity_label: None,
            reliability_label: None,
            split: None,
        }
    }

    pub fn audience_size(&self) -> i64 {
        self.tweets.iter().map(|t| t.author_followers).sum()
    }

    fn has_preview(&self) -> bool {
        let present = |s: &Option<String>| s.as_deref().is_some_and(|s| !s.trim().is_empty());
        present(&self.title) && present(&self.image_ref)
    }

    /// 1 for popular, 0 for unpopular.
    pub fn popularity_target(&self) -> Option<u8> {
        match self.popularity_label? {
            PopularityLabel::Popular => Some(1),
            PopularityLabel::Unpopular => Some(0),
            PopularityLabel::Middle => None,
        }
    }

    /// 1 for reliable, 0 for unreliable.
    pub fn reliability_target(&self) -> Option<u8> {
        match self.reliability_label? {
            ReliabilityLabel::Reliable => Some(1),
            ReliabilityLabel::Unreliable => Some(0),
            ReliabilityLabel::Excluded => None,
        }
    }
}

/// Engagement over smoothed audience size:
/// `Σ(retweets + likes) / (Σ followers + λ)`.
pub fn popularity_score(tweets: &[TweetRecord], lambda: f64) -> Result<f64> {
    if tweets.is_empty() {
        return Err(Error::invalid("popularity score needs at least one tweet"));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    let mut engagement = 0.0;
    let mut audience = 0.0;
    for t in tweets {
        t.validate()?;
        engagement += t.engagement() as f64;
        audience += t.author_followers as f64;
    }
    Ok(engagement / (audience + lambda))
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 1.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaCandidate {
    pub lambda: f64,
    /// `None` when no article has a positive score under this λ.
    pub ks: Option<f64>,
}

/// KS distance between the log-audience distribution of the top-`quantile`
/// set and of all articles with positive score, for every candidate.
pub fn lambda_diagnostics(
    candidates: &[f64],
    articles: &[Article],
    quantile: f64,
) -> Result<Vec<LambdaCandidate>> {
    let mut out = Vec::with_capacity(candidates.len());
    for &lambda in candidates {
        let mut scored: Vec<(f64, &Article)> = Vec::with_capacity(articles.len());
        for a in articles {
            scored.push((popularity_score(&a.tweets, lambda)?, a));
        }
        let positive: Vec<f64> = scored
            .iter()
            .filter(|(p, _)| *p > 0.0)
            .map(|(_, a)| (a.audience_size() as f64).ln_1p())
            .collect();
        if positive.is_empty() {
            out.push(LambdaCandidate { lambda, ks: None });
            continue;
        }
        scored.sort_by(|x, y| y.0.total_cmp(&x.0).then_with(|| x.1.article_id.cmp(&y.1.article_id)));
        let k = ((quantile * articles.len() as f64).floor() as usize).max(1);
        let top: Vec<f64> = scored[..k.min(scored.len())]
            .iter()
            .map(|(_, a)| (a.audience_size() as f64).ln_1p())
            .collect();
        out.push(LambdaCandidate { lambda, ks: Some(ks_statistic(&top, &positive)) });
    }
    Ok(out)
}

/// Picks the λ whose top-20% set has the audience distribution closest (KS on
/// `log1p` audience) to the set of articles with any engagement.
pub fn tune_lambda(candidates: &[f64], articles: &[Article]) -> Result<f64> {
    tune_lambda_with_quantile(candidates, articles, DEFAULT_QUANTILE)
}

pub fn tune_lambda_with_quantile(
    candidates: &[f64],
    articles: &[Article],
    quantile: f64,
) -> Result<f64> {
    if candidates.len() < 2 {
        if let [only] = candidates {
            if *only > 0.0 {
                return Ok(*only);
            }
        }
        return Err(Error::invalid("tune_lambda needs at least two candidates"));
    }
    if let Some(bad) = candidates.iter().find(|l| !(**l > 0.0)) {
        return Err(Error::invalid(format!("lambda candidate {bad} is not positive")));
    }
    let diag = lambda_diagnostics(candidates, articles, quantile)?;
    diag.iter()
        .filter_map(|c| c.ks.map(|ks| (ks, c.lambda)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.total_cmp(&b.1)))
        .map(|(_, l)| l)
        .ok_or_else(|| Error::NoValidCandidate("no article has a positive score under any candidate".into()))
}

/// Labels the top `⌊q·n⌋` articles popular and the bottom `⌊q·n⌋` unpopular,
/// ordering by (score desc, article_id asc). Output keeps input order.
pub fn assign_popularity_labels(articles: &[Article], quantile: f64) -> Result<Vec<Article>> {
    if !(quantile > 0.0 && quantile <= 0.5) {
        return Err(Error::invalid(format!("quantile must lie in (0, 0.5], got {quantile}")));
    }
    let n = articles.len();
    if (n as f64) < 2.0 / quantile {
        return Err(Error::insufficient(format!(
            "{n} articles are too few for quantile {quantile} (need at least {})",
            (2.0 / quantile).ceil()
        )));
    }
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, a) in articles.iter().enumerate() {
        let s = a.popularity_score.ok_or_else(|| {
            Error::invalid(format!("article {} has no popularity score", a.article_id))
        })?;
        order.push((s, i));
    }
    order.sort_by(|x, y| {
        y.0.total_cmp(&x.0)
            .then_with(|| articles[x.1].article_id.cmp(&articles[y.1].article_id))
    });
    let k = (quantile * n as f64).floor() as usize;
    let mut labels = vec![PopularityLabel::Middle; n];
    for &(_, i) in &order[..k] {
        labels[i] = PopularityLabel::Popular;
    }
    for &(_, i) in &order[n - k..] {
        labels[i] = PopularityLabel::Unpopular;
    }
    Ok(articles
        .iter()
        .zip(labels)
        .map(|(a, l)| Article { popularity_label: Some(l), ..a.clone() })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub lambda_used: f64,
    pub quantile: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub train: Vec<Article>,
    pub val: Vec<Article>,
    pub test: Vec<Article>,
    pub seed: u64,
    pub lambda_used: f64,
    pub quantile: f64,
}

/// Counts collected while building a dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub input_articles: usize,
    pub missing_preview: usize,
    pub middle_popularity: usize,
    pub excluded_domain: usize,
    pub undersampled_away: usize,
    pub reliable: usize,
    pub unreliable: usize,
}

impl LabeledDataset {
    pub fn split(&self, split: Split) -> &[Article] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta { seed: self.seed, lambda_used: self.lambda_used, quantile: self.quantile }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Article> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    /// Line-delimited JSON of all articles (train, val, test order).
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, self.iter())?;
        Ok(buf)
    }

    pub fn from_articles(articles: Vec<Article>, meta: DatasetMeta) -> Result<Self> {
        let mut ds = LabeledDataset {
            train: vec![],
            val: vec![],
            test: vec![],
            seed: meta.seed,
            lambda_used: meta.lambda_used,
            quantile: meta.quantile,
        };
        for a in articles {
            match a.split {
                Some(Split::Train) => ds.train.push(a),
                Some(Split::Val) => ds.val.push(a),
                Some(Split::Test) => ds.test.push(a),
                None => {
                    return Err(Error::Parse(format!("article {} has no split", a.article_id)))
                }
            }
        }
        Ok(ds)
    }
}

/// Full labeling pipeline: score, label popularity (quantiles over every
/// article with a preview), map reliability, drop middle/excluded, undersample
/// the majority reliability class and split 70/10/20 stratified on both labels.
pub fn build_dataset(
    articles: &[Article],
    lambda: f64,
    quantile: f64,
    seed: u64,
) -> Result<(LabeledDataset, BuildReport)> {
    let mut report = BuildReport { input_articles: articles.len(), ..Default::default() };
    let mut kept: Vec<Article> = Vec::with_capacity(articles.len());
    for a in articles {
        if a.tweets.is_empty() {
            return Err(Error::invalid(format!("article {} has no tweets", a.article_id)));
        }
        if !a.has_preview() {
            report.missing_preview += 1;
            continue;
        }
        let mut a = a.clone();
        a.popularity_score = Some(popularity_score(&a.tweets, lambda)?);
        a.popularity_label = None;
        a.reliability_label = None;
        a.split = None;
        kept.push(a);
    }
    kept.sort_by(|x, y| x.article_id.cmp(&y.article_id));
    let labeled = assign_popularity_labels(&kept, quantile)?;

    let mut reliable = Vec::new();
    let mut unreliable = Vec::new();
    for mut a in labeled {
        if a.popularity_label == Some(PopularityLabel::Middle) {
            report.middle_popularity += 1;
            continue;
        }
        let rel = a.domain_coding.reliability();
        a.reliability_label = Some(rel);
        match rel {
            ReliabilityLabel::Reliable => reliable.push(a),
            ReliabilityLabel::Unreliable => unreliable.push(a),
            ReliabilityLabel::Excluded => report.excluded_domain += 1,
        }
    }
    for (name, class) in [("reliable", &reliable), ("unreliable", &unreliable)] {
        if class.is_empty() {
            return Err(Error::insufficient(format!("no {name} articles after filtering")));
        }
        for pop in [PopularityLabel::Popular, PopularityLabel::Unpopular] {
            if !class.iter().any(|a| a.popularity_label == Some(pop)) {
                return Err(Error::insufficient(format!("no {pop:?} {name} articles after filtering")));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = reliable.len().min(unreliable.len());
    for class in [&mut reliable, &mut unreliable] {
        if class.len() > target {
            report.undersampled_away += class.len() - target;
            class.shuffle(&mut rng);
            class.truncate(target);
            class.sort_by(|x, y| x.article_id.cmp(&y.article_id));
        }
    }
    report.reliable = reliable.len();
    report.unreliable = unreliable.len();

    let rel_seq = interleave_by_popularity(reliable, &mut rng);
    let unrel_seq = interleave_by_popularity(unreliable, &mut rng);
    let mut sequence = Vec::with_capacity(rel_seq.len() * 2);
    for (r, u) in rel_seq.into_iter().zip(unrel_seq) {
        sequence.push(r);
        sequence.push(u);
    }

    let n = sequence.len();
    let n_train = (0.7 * n as f64).round() as usize;
    let n_val = (0.1 * n as f64).round() as usize;
    let mut ds = LabeledDataset {
        train: Vec::with_capacity(n_train),
        val: Vec::with_capacity(n_val),
        test: Vec::with_capacity(n - n_train - n_val),
        seed,
        lambda_used: lambda,
        quantile,
    };
    for (i, mut a) in sequence.into_iter().enumerate() {
        if i < n_train {
            a.split = Some(Split::Train);
            ds.train.push(a);
        } else if i < n_train + n_val {
            a.split = Some(Split::Val);
            ds.val.push(a);
        } else {
            a.split = Some(Split::Test);
            ds.test.push(a);
        }
    }
    Ok((ds, report))
}

/// Shuffles each popularity stratum and merges them so every contiguous
/// block holds the strata in proportion (±1).
fn interleave_by_popularity(class: Vec<Article>, rng: &mut ChaCha8Rng) -> Vec<Article> {
    let (mut pop, mut unpop): (Vec<_>, Vec<_>) = class
        .into_iter()
        .partition(|a| a.popularity_label == Some(PopularityLabel::Popular));
    pop.shuffle(rng);
    unpop.shuffle(rng);
    let mut keyed: Vec<(f64, usize, Article)> = Vec::with_capacity(pop.len() + unpop.len());
    for (stratum, items) in [pop, unpop].into_iter().enumerate() {
        let n = items.len() as f64;
        for (j, a) in items.into_iter().enumerate() {
            keyed.push(((j as f64 + 0.5) / n, stratum, a));
        }
    }
    keyed.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    keyed.into_iter().map(|(_, _, a)| a).collect()
}

/// Lowercases scheme and host, drops the fragment and `utm_*` tracking
/// parameters.
pub fn canonicalize_url(raw: &str) -> Result<String> {
    let mut u = url::Url::parse(raw.trim()).map_err(|e| Error::Parse(format!("url `{raw}`: {e}")))?;
    u.set_fragment(None);
    let kept: Vec<(String, String)> = u
        .query_pairs()
        .filter(|(k, _)| !k.to_ascii_lowercase().starts_with("utm_"))
        .map(|(k, v)| (k.into_owned(), v.into_owned()))
        .collect();
    if kept.is_empty() {
        u.set_query(None);
    } else {
        u.query_pairs_mut().clear().extend_pairs(kept);
    }
    Ok(u.to_string())
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::Parse(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    mut w: impl Write,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const DATASET_META_FILE: &str = "dataset_meta.json";

pub fn save_dataset(ds: &LabeledDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(DATASET_FILE), ds.to_jsonl()?)?;
    std::fs::write(dir.join(DATASET_META_FILE), serde_json::to_vec_pretty(&ds.meta())?)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let meta: DatasetMeta = serde_json::from_slice(&std::fs::read(dir.join(DATASET_META_FILE))?)?;
    LabeledDataset::from_articles(read_jsonl(dir.join(DATASET_FILE))?, meta)
}

/// Per (reliability, popularity) label counts.
pub fn label_counts(articles: &[Article]) -> HashMap<(Option<u8>, Option<u8>), usize> {
    let mut m = HashMap::new();
    for a in articles {
        *m.entry((a.reliability_target(), a.popularity_target())).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn tweet(id: &str, rt: i64, like: i64, followers: i64) -> TweetRecord {
        TweetRecord {
            tweet_id: id.into(),
            text: format!("tweet {id}"),
            retweet_count: rt,
            like_count: like,
            author_followers: followers,
            linked_url: String::new(),
        }
    }

    fn scored(id: &str, score: f64) -> Article {
        let mut a = Article::new(id, format!("https://x.org/{id}"), DomainCoding::Green, vec![tweet(id, 0, 0, 1)]);
        a.popularity_score = Some(score);
        a
    }

    #[test]
    fn zero_engagement_scores_zero() {
        assert_eq!(popularity_score(&[tweet("a", 0, 0, 500)], 1e4).unwrap(), 0.0);
    }

    #[test]
    fn hand_evaluated_score() {
        let tweets = [tweet("a", 10, 20, 1000), tweet("b", 0, 5, 500), tweet("c", 3, 2, 100_000)];
        let p = popularity_score(&tweets, 1e4).unwrap();
        assert_eq!(p, 40.0 / 111_500.0);
        assert!((p - 3.587e-4).abs() < 1e-7);
    }

    #[test]
    fn score_errors() {
        assert!(matches!(popularity_score(&[], 1e4), Err(Error::InvalidInput(_))));
        assert!(matches!(popularity_score(&[tweet("a", -1, 0, 5)], 1e4), Err(Error::InvalidInput(_))));
        assert!(matches!(popularity_score(&[tweet("a", 1, 0, 5)], 0.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn ks_matches_definition() {
        assert_eq!(ks_statistic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(ks_statistic(&[1.0, 2.0], &[3.0, 4.0]), 1.0);
        // F_a jumps to 0.5 at 1, F_b is 0 until 2.
        assert!((ks_statistic(&[1.0, 3.0], &[2.0, 4.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_candidate_is_returned() {
        assert_eq!(tune_lambda(&[1e4], &[]).unwrap(), 1e4);
    }

    #[test]
    fn all_candidates_skipped_is_an_error() {
        let arts: Vec<Article> = (0..10)
            .map(|i| Article::new(format!("{i}"), "u", DomainCoding::Red, vec![tweet("t", 0, 0, 10)]))
            .collect();
        assert!(matches!(tune_lambda(&[1.0, 10.0], &arts), Err(Error::NoValidCandidate(_))));
    }

    #[test]
    fn ten_articles_label_oracle() {
        let arts: Vec<Article> = (0..10).map(|i| scored(&format!("a{i}"), i as f64)).collect();
        let out = assign_popularity_labels(&arts, 0.2).unwrap();
        let ids = |l| {
            let mut v: Vec<_> = out.iter().filter(|a| a.popularity_label == Some(l)).map(|a| a.article_id.clone()).collect();
            v.sort();
            v
        };
        assert_eq!(ids(PopularityLabel::Popular), vec!["a8", "a9"]);
        assert_eq!(ids(PopularityLabel::Unpopular), vec!["a0", "a1"]);
    }

    #[test]
    fn equal_scores_fall_back_to_id() {
        let arts: Vec<Article> = (0..10).map(|i| scored(&format!("a{i}"), 1.0)).collect();
        let out = assign_popularity_labels(&arts, 0.2).unwrap();
        let pop: Vec<_> = out.iter().filter(|a| a.popularity_label == Some(PopularityLabel::Popular)).map(|a| a.article_id.as_str()).collect();
        let unpop: Vec<_> = out.iter().filter(|a| a.popularity_label == Some(PopularityLabel::Unpopular)).map(|a| a.article_id.as_str()).collect();
        assert_eq!(pop, ["a0", "a1"]);
        assert_eq!(unpop, ["a8", "a9"]);
    }

    #[test]
    fn too_few_articles() {
        let arts: Vec<Article> = (0..9).map(|i| scored(&format!("a{i}"), i as f64)).collect();
        assert!(matches!(assign_popularity_labels(&arts, 0.2), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn canonical_urls() {
        assert_eq!(
            canonicalize_url("HTTPS://WWW.Example.COM/Path?utm_source=tw&id=3&UTM_medium=x#frag").unwrap(),
            "https://www.example.com/Path?id=3"
        );
        assert_eq!(canonicalize_url("http://a.org/x?utm_campaign=1").unwrap(), "http://a.org/x");
        assert!(canonicalize_url("not a url").is_err());
    }

    #[test]
    fn reliability_mapping() {
        use DomainCoding::*;
        assert_eq!(Green.reliability(), ReliabilityLabel::Reliable);
        assert_eq!(Red.reliability(), ReliabilityLabel::Unreliable);
        assert_eq!(Orange.reliability(), ReliabilityLabel::Unreliable);
        assert_eq!(Yellow.reliability(), ReliabilityLabel::Excluded);
        assert_eq!(Satire.reliability(), ReliabilityLabel::Excluded);
    }

    fn previewed(id: usize, coding: DomainCoding, engagement: i64, followers: i64) -> Article {
        let mut a = Article::new(
            format!("a{id:03}"),
            format!("https://x.org/{id}"),
            coding,
            vec![tweet(&format!("t{id}"), engagement, 0, followers)],
        );
        a.title = Some(format!("title {id}"));
        a.image_ref = Some(format!("img/{id}.png"));
        a
    }

    #[test]
    fn hundred_articles_split_28_4_8() {
        // Even ids are green; engagement is high for ids < 40 and zero beyond
        // 60, so both quantile cuts hold 10 green and 10 red articles.
        let arts: Vec<Article> = (0..100)
            .map(|i| {
                let coding = if i % 2 == 0 { DomainCoding::Green } else { DomainCoding::Red };
                let engagement = if i < 40 { 1000 + i as i64 } else if i < 60 { 1 } else { 0 };
                previewed(i, coding, engagement, 100)
            })
            .collect();
        let (ds, report) = build_dataset(&arts, DEFAULT_LAMBDA, 0.2, 7).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (28, 4, 8));
        assert_eq!(report.middle_popularity, 60);
        assert_eq!((report.reliable, report.unreliable, report.undersampled_away), (20, 20, 0));
        let (again, _) = build_dataset(&arts, DEFAULT_LAMBDA, 0.2, 7).unwrap();
        assert_eq!(ds.to_jsonl().unwrap(), again.to_jsonl().unwrap());
    }

    #[test]
    fn all_green_is_insufficient() {
        let arts: Vec<Article> = (0..50).map(|i| previewed(i, DomainCoding::Green, i as i64, 100)).collect();
        assert!(matches!(build_dataset(&arts, DEFAULT_LAMBDA, 0.2, 0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn tuned_lambda_beats_small_extreme_on_independent_engagement() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let arts: Vec<Article> = (0..2000)
            .map(|i| {
                let followers = 10f64.powf(rng.random_range(1.0..6.0)) as i64;
                let engagement = if rng.random_bool(0.7) { rng.random_range(1..500) } else { 0 };
                previewed(i, DomainCoding::Green, engagement, followers)
            })
            .collect();
        // Brute-force KS per candidate, written out independently of
        // `lambda_diagnostics`.
        let ks = |lambda: f64| {
            let mut scored: Vec<(f64, &Article)> =
                arts.iter().map(|a| (popularity_score(&a.tweets, lambda).unwrap(), a)).collect();
            scored.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then_with(|| x.1.article_id.cmp(&y.1.article_id)));
            let top: Vec<f64> = scored[..400].iter().map(|(_, a)| (a.audience_size() as f64).ln_1p()).collect();
            let pos: Vec<f64> =
                scored.iter().filter(|(p, _)| *p > 0.0).map(|(_, a)| (a.audience_size() as f64).ln_1p()).collect();
            let mut grid: Vec<f64> = top.iter().chain(&pos).copied().collect();
            grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
            grid.iter()
                .map(|&x| {
                    let fa = top.iter().filter(|&&v| v <= x).count() as f64 / top.len() as f64;
                    let fb = pos.iter().filter(|&&v| v <= x).count() as f64 / pos.len() as f64;
                    (fa - fb).abs()
                })
                .fold(0.0, f64::max)
        };
        let candidates = [1.0, 1e2, 1e4, 1e6, 1e8];
        let chosen = tune_lambda(&candidates, &arts).unwrap();
        let best = candidates.iter().map(|&l| ks(l)).fold(f64::INFINITY, f64::min);
        assert_eq!(ks(chosen), best);
        assert!(ks(chosen) < ks(1.0));
        assert!(ks(chosen) <= ks(1e8));
    }

    proptest! {
        #[test]
        fn score_monotone(rt in 0i64..1000, like in 0i64..1000, f in 0i64..100_000, lambda in 1.0f64..1e6) {
            prop_assume!(rt + like > 0);
            let base = popularity_score(&[tweet("a", rt, like, f)], lambda).unwrap();
            prop_assert!(popularity_score(&[tweet("a", rt + 1, like, f)], lambda).unwrap() > base);
            prop_assert!(popularity_score(&[tweet("a", rt, like + 1, f)], lambda).unwrap() > base);
            prop_assert!(popularity_score(&[tweet("a", rt, like, f + 1)], lambda).unwrap() < base);
            prop_assert!(popularity_score(&[tweet("a", rt, like, f)], lambda * 1.01).unwrap() < base);
        }

        #[test]
        fn labels_permutation_invariant(scores in proptest::collection::vec(0u32..20, 10..40), seed in any::<u64>()) {
            let arts: Vec<Article> = scores.iter().enumerate().map(|(i, s)| scored(&format!("a{i:03}"), *s as f64)).collect();
            let a = assign_popularity_labels(&arts, 0.2).unwrap();
            let mut shuffled = arts.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let b = assign_popularity_labels(&shuffled, 0.2).unwrap();
            let map: HashMap<_, _> = b.iter().map(|x| (x.article_id.clone(), x.popularity_label)).collect();
            for x in &a {
                prop_assert_eq!(map[&x.article_id], x.popularity_label);
            }
            let again = assign_popularity_labels(&a, 0.2).unwrap();
            prop_assert_eq!(again, a);
        }
    }
}
