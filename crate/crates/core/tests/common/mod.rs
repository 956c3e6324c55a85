#![allow(dead_code)]

use std::collections::HashMap;

use mmrl::corpus::{build_dataset, Article, LabeledDataset, DEFAULT_LAMBDA};
use mmrl::encoders::{content_hash, prepare_rgb, ImageEncoderConfig, PreparedImage};
use mmrl::multitask::ArticleInputs;
use mmrl::pipeline::{encode_article, fit_text_encoding};
use mmrl::synth::{generate_classification, ClassificationSynth, SynthArticle};
use mmrl::textenc::{EmbeddingTable, Word2VecConfig};

pub struct SynthSplits {
    pub dataset: LabeledDataset,
    pub train: Vec<ArticleInputs>,
    pub val: Vec<ArticleInputs>,
    pub test: Vec<ArticleInputs>,
    pub title_table: EmbeddingTable,
    pub tweet_table: EmbeddingTable,
}

pub fn prepared(s: &SynthArticle, cfg: &ImageEncoderConfig) -> PreparedImage {
    prepare_rgb(&s.image, content_hash(s.image.as_raw()), cfg)
}

/// Synthetic articles labeled by the real dataset builder (quantile 0.5, so
/// every article with a clear engagement class is kept) and encoded.
pub fn classification_splits(synth: &ClassificationSynth, image: &ImageEncoderConfig, seed: u64) -> SynthSplits {
    let arts = generate_classification(synth);
    let by_id: HashMap<String, &SynthArticle> = arts.iter().map(|s| (s.article.article_id.clone(), s)).collect();
    let mut plain: Vec<Article> = arts.iter().map(|s| s.article.clone()).collect();
    for a in &mut plain {
        a.image_ref = Some(format!("images/{}.png", a.article_id));
    }
    let (dataset, _) = build_dataset(&plain, DEFAULT_LAMBDA, 0.5, seed).unwrap();
    let w2v = Word2VecConfig { seed, ..Default::default() };
    let (title_table, tweet_table, tl, wl) = fit_text_encoding(&dataset.train, &w2v, false).unwrap();
    let enc = |xs: &[Article]| -> Vec<ArticleInputs> {
        xs.iter()
            .map(|a| {
                let img = prepared(by_id[&a.article_id], image);
                encode_article(a, Some(img), &title_table, &tweet_table, tl, wl).unwrap()
            })
            .collect()
    };
    let (train, val, test) = (enc(&dataset.train), enc(&dataset.val), enc(&dataset.test));
    SynthSplits { dataset, train, val, test, title_table, tweet_table }
}

use mmrl::synth::{generate_pairs, PairDomain, SynthPair};
use mmrl::textenc::{sequence_cap, SpaceTag, TWEET_SEPARATOR};

pub fn pair_article(p: &SynthPair) -> Article {
    let tweets = p
        .tweets
        .iter()
        .enumerate()
        .map(|(i, t)| mmrl::corpus::TweetRecord {
            tweet_id: format!("{}-{i}", p.id),
            text: t.clone(),
            retweet_count: 1,
            like_count: 1,
            author_followers: 10,
            linked_url: p.url.clone(),
        })
        .collect();
    let mut a = Article::new(p.id.clone(), p.url.clone(), mmrl::corpus::DomainCoding::Green, tweets);
    a.title = Some(p.title.clone());
    a
}

pub struct PairSplits {
    pub train: Vec<ArticleInputs>,
    pub val: Vec<ArticleInputs>,
    pub test: Vec<ArticleInputs>,
}

/// Paired data for one domain, encoded with word embeddings fitted on
/// `vocab_pairs` (shared across domains so both models read text the same
/// way).
pub fn pair_inputs(pairs: &[SynthPair], title: &EmbeddingTable, tweet: &EmbeddingTable, caps: (usize, usize), image: &ImageEncoderConfig) -> Vec<ArticleInputs> {
    pairs
        .iter()
        .map(|p| {
            let a = pair_article(p);
            let img = prepare_rgb(&p.image, content_hash(p.image.as_raw()), image);
            encode_article(&a, Some(img), title, tweet, caps.0, caps.1).unwrap()
        })
        .collect()
}

pub fn pair_tables(pairs: &[SynthPair], seed: u64) -> (EmbeddingTable, EmbeddingTable, (usize, usize)) {
    let arts: Vec<Article> = pairs.iter().map(pair_article).collect();
    let w2v = Word2VecConfig { seed, ..Default::default() };
    let (t, w, tl, wl) = fit_text_encoding(&arts, &w2v, true).unwrap();
    (t, w, (tl, wl))
}

pub fn domain_pairs(domain: PairDomain, seed: u64, n_train: usize, n_val: usize, n_test: usize, prefix: &str) -> (Vec<SynthPair>, Vec<SynthPair>, Vec<SynthPair>) {
    let mut all = generate_pairs(n_train + n_val + n_test, seed, domain, 32, prefix);
    let test = all.split_off(n_train + n_val);
    let val = all.split_off(n_train);
    (all, val, test)
}

/// Independent Gaussian vectors per token, one table per field.
pub fn random_tables(pairs: &[SynthPair], seed: u64) -> (EmbeddingTable, EmbeddingTable, (usize, usize)) {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let arts: Vec<Article> = pairs.iter().map(pair_article).collect();
    let make = |docs: Vec<Vec<String>>, space: SpaceTag, salt: u64| {
        let mut vocab: Vec<String> = docs.iter().flatten().filter(|t| *t != TWEET_SEPARATOR).cloned().collect();
        vocab.sort();
        vocab.dedup();
        vocab.insert(0, mmrl::textenc::OOV_TOKEN.to_string());
        let dim = mmrl::textenc::EMBEDDING_DIM;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ salt);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let mut v = vec![0f32; dim];
        v.extend((0..(vocab.len() - 1) * dim).map(|_| normal.sample(&mut rng)));
        let cap = sequence_cap(&docs.iter().map(Vec::len).collect::<Vec<_>>(), true);
        (EmbeddingTable::from_parts(vocab, v, dim, space).unwrap(), cap)
    };
    let (t, tl) = make(arts.iter().map(mmrl::textenc::title_tokens).collect(), SpaceTag::Title, 1);
    let (w, wl) = make(arts.iter().map(|a| mmrl::textenc::tweet_tokens(a).unwrap()).collect(), SpaceTag::Tweet, 2);
    (t, w, (tl, wl))
}

/// Prints the verdict line for one acceptance criterion and fails the test
/// when it does not hold.
pub fn verdict(id: u32, name: &str, ok: bool, detail: &str) {
    use std::io::Write;
    // Written to the process stdout so the line shows without --nocapture.
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{} criterion {id:02} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    let _ = out.flush();
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

/// Worst relative error between autograd and central differences.
pub struct GradCheck {
    pub checked: usize,
    /// Entries whose gradient magnitude exceeds the floor.
    pub above_floor: usize,
    pub worst: f64,
    pub worst_at: String,
}

/// Central differences with step `h` on up to `per_var` entries of each
/// variable (the largest-gradient entry plus random ones). Relative error is
/// `|fd − g| / max(|fd|, |g|, floor)`.
pub fn gradient_check(
    vars: &[(String, candle::Var)],
    loss: &dyn Fn() -> candle::Tensor,
    per_var: usize,
    h: f64,
    floor: f64,
    seed: u64,
) -> GradCheck {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let grads = loss().backward().unwrap();
    let scalar = |t: candle::Tensor| t.to_dtype(candle::DType::F64).unwrap().to_scalar::<f64>().unwrap();
    let mut out = GradCheck { checked: 0, above_floor: 0, worst: 0.0, worst_at: String::new() };
    for (name, var) in vars {
        let shape = var.as_tensor().shape().clone();
        let base: Vec<f64> = var.as_tensor().to_dtype(candle::DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let g: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.to_dtype(candle::DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; base.len()],
        };
        let mut idx = vec![(0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap()];
        while idx.len() < per_var.min(g.len()) {
            idx.push(rng.random_range(0..g.len()));
        }
        let set = |values: &[f64]| {
            let t = candle::Tensor::from_vec(values.to_vec(), shape.clone(), var.device()).unwrap().to_dtype(var.dtype()).unwrap();
            var.set(&t).unwrap();
        };
        for &i in &idx {
            let mut v = base.clone();
            v[i] = base[i] + h;
            set(&v);
            let plus = scalar(loss());
            v[i] = base[i] - h;
            set(&v);
            let minus = scalar(loss());
            set(&base);
            let fd = (plus - minus) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(floor);
            out.checked += 1;
            out.above_floor += usize::from(fd.abs().max(g[i].abs()) > floor);
            if rel > out.worst {
                out.worst = rel;
                out.worst_at = format!("{name}[{i}] fd {fd:.6e} autograd {:.6e}", g[i]);
            }
        }
    }
    out
}
