mod common;

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use candle::{DType, Device, Tensor, Var};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{gradient_check, verdict};
use mmrl::corpus::*;
use mmrl::crossmodal::*;
use mmrl::encoders::{ImageEncoderConfig, PreparedImage, TextCnnConfig};
use mmrl::homogeneity::*;
use mmrl::multitask::*;
use mmrl::saliency::*;
use mmrl::synth::*;
use mmrl::textenc::{title_tokens, tweet_tokens, EncodedSequence};

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

#[test]
fn criterion_01_popularity_math() {
    let zero = popularity_score(&[tweet("a", 0, 0, 500)], 1e4).unwrap();
    let three = popularity_score(&[tweet("a", 10, 20, 1000), tweet("b", 0, 5, 500), tweet("c", 3, 2, 100_000)], 1e4).unwrap();
    let exact = zero == 0.0 && three == 40.0 / 111_500.0;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut violations = 0;
    for trial in 0..1000 {
        let tweets: Vec<TweetRecord> = (0..rng.random_range(1..6))
            .map(|i| tweet(&format!("{trial}-{i}"), rng.random_range(0..200), rng.random_range(0..200), rng.random_range(0..50_000)))
            .collect();
        let mut tweets = tweets;
        tweets[0].like_count += 1;
        let lambda = 10f64.powf(rng.random_range(0.0..8.0));
        let base = popularity_score(&tweets, lambda).unwrap();
        let j = rng.random_range(0..tweets.len());
        let d = rng.random_range(1..100);
        let perturbed = |f: &dyn Fn(&mut TweetRecord)| {
            let mut t = tweets.clone();
            f(&mut t[j]);
            popularity_score(&t, lambda).unwrap()
        };
        let ok = perturbed(&|t| t.retweet_count += d) > base
            && perturbed(&|t| t.like_count += d) > base
            && perturbed(&|t| t.author_followers += d) < base
            && popularity_score(&tweets, lambda * 1.5).unwrap() < base;
        if !ok {
            violations += 1;
        }
    }
    verdict(
        1,
        "popularity math",
        exact && violations == 0,
        &format!("hand values {zero} and {three:.6e} exact: {exact}; monotonicity violations {violations}/1000"),
    );
}

fn scored(id: usize, score: f64) -> Article {
    let mut a = Article::new(format!("a{id:03}"), format!("https://x.org/{id}"), DomainCoding::Green, vec![tweet("t", 0, 0, 1)]);
    a.popularity_score = Some(score);
    a
}

fn random_corpus(n: usize, seed: u64) -> Vec<Article> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codings = [DomainCoding::Red, DomainCoding::Orange, DomainCoding::Yellow, DomainCoding::Green, DomainCoding::Satire];
    (0..n)
        .map(|i| {
            let tweets = (0..rng.random_range(1..4))
                .map(|k| tweet(&format!("{i}-{k}"), rng.random_range(0..20), rng.random_range(0..20), rng.random_range(0..5000)))
                .collect();
            let mut a = Article::new(format!("art{i:05}"), format!("https://n.org/{i}"), *codings.choose(&mut rng).unwrap(), tweets);
            a.title = Some(format!("title {i}"));
            a.image_ref = Some(format!("img/{i}.png"));
            a
        })
        .collect()
}

#[test]
fn criterion_02_labels_and_splits() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut oracle_mismatches = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(10..60);
        let q = rng.random_range(2.0 / n as f64..=0.5);
        let arts: Vec<Article> = (0..n).map(|i| scored(i, rng.random_range(0..8) as f64)).collect();
        if assign_popularity_labels(&arts, 1.9 / n as f64).is_ok() {
            oracle_mismatches += 1;
        }
        let out = assign_popularity_labels(&arts, q).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            arts[b].popularity_score.unwrap().partial_cmp(&arts[a].popularity_score.unwrap()).unwrap().then(arts[a].article_id.cmp(&arts[b].article_id))
        });
        let k = (q * n as f64).floor() as usize;
        let mut want = vec![PopularityLabel::Middle; n];
        for &i in &order[..k] {
            want[i] = PopularityLabel::Popular;
        }
        for &i in &order[n - k..] {
            want[i] = PopularityLabel::Unpopular;
        }
        if out.iter().zip(&want).any(|(a, w)| a.popularity_label != Some(*w)) {
            oracle_mismatches += 1;
        }
    }

    let mut split_problems = Vec::new();
    for seed in 0..10u64 {
        let arts = random_corpus(300 + 50 * seed as usize, seed);
        let (ds, _) = build_dataset(&arts, DEFAULT_LAMBDA, 0.2, seed).unwrap();
        let n = ds.len() as f64;
        let sizes = [ds.train.len(), ds.val.len(), ds.test.len()];
        for (got, frac) in sizes.iter().zip([0.7, 0.1, 0.2]) {
            if (*got as f64 - frac * n).abs() > 1.0 {
                split_problems.push(format!("seed {seed}: split size {got} vs {:.1}", frac * n));
            }
        }
        let count = |xs: &[Article], l: ReliabilityLabel| xs.iter().filter(|a| a.reliability_label == Some(l)).count() as i64;
        for (name, xs) in [("all", ds.iter().cloned().collect::<Vec<_>>()), ("train", ds.train.clone())] {
            let d = count(&xs, ReliabilityLabel::Reliable) - count(&xs, ReliabilityLabel::Unreliable);
            if d.abs() > 1 {
                split_problems.push(format!("seed {seed}: {name} reliability imbalance {d}"));
            }
        }
        let ids: HashSet<&str> = ds.iter().map(|a| a.article_id.as_str()).collect();
        if ids.len() != ds.len() {
            split_problems.push(format!("seed {seed}: splits overlap"));
        }
        if ds.iter().any(|a| a.popularity_target().is_none() || a.reliability_target().is_none()) {
            split_problems.push(format!("seed {seed}: unlabeled article"));
        }
        let (again, _) = build_dataset(&arts, DEFAULT_LAMBDA, 0.2, seed).unwrap();
        if again.to_jsonl().unwrap() != ds.to_jsonl().unwrap() {
            split_problems.push(format!("seed {seed}: not byte-identical"));
        }
    }
    verdict(
        2,
        "label and split correctness",
        oracle_mismatches == 0 && split_problems.is_empty(),
        &format!("oracle mismatches {oracle_mismatches}/10000; split problems {split_problems:?}"),
    );
}

#[test]
fn criterion_03_multitask_learning() {
    let t0 = Instant::now();
    let image = ImageEncoderConfig::small_cnn(32);
    let mut s = common::classification_splits(&ClassificationSynth { n_articles: 2000, ..Default::default() }, &image, 0);
    let mut model = MultiTaskModel::new(&ModelConfig { image, ..Default::default() }, 0, DType::F32).unwrap();
    model.cache_image_features(&mut s.train).unwrap();
    model.cache_image_features(&mut s.val).unwrap();
    let config = TrainConfig { max_epochs: 20, ..Default::default() };
    let schedule_ok = config.initial_lr == 1e-4
        && config.lr_decay_factor == 0.1
        && config.lr_patience == 4
        && config.early_stop_patience == 6
        && (config.beta1, config.beta2) == (0.9, 0.999);
    let history = train(&mut model, &s.train, &s.val, &config).unwrap();
    let report = evaluate(&model, &s.val).unwrap();
    let acc_pop = report.popularity.as_ref().unwrap().accuracy;
    let acc_rel = report.reliability.as_ref().unwrap().accuracy;

    let refs: Vec<&ArticleInputs> = s.val.iter().collect();
    let preds = model.predict(&refs).unwrap();
    let y_pop: Vec<u8> = s.val.iter().map(|a| a.y_pop.unwrap()).collect();
    let y_rel: Vec<u8> = s.val.iter().map(|a| a.y_rel.unwrap()).collect();
    let joint = multitask_loss(&preds, &y_pop, &y_rel).unwrap();
    let single = bce_sum(&preds.iter().map(|p| p.p_pop).collect::<Vec<_>>(), &y_pop).unwrap()
        + bce_sum(&preds.iter().map(|p| p.p_rel).collect::<Vec<_>>(), &y_rel).unwrap();
    let batch = model.make_batch(&refs).unwrap();
    let tensor_loss = |m: &MultiTaskModel| m.batch_loss(&batch, None).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
    let both = tensor_loss(&model);
    model.config.tasks = vec![Task::Popularity];
    let only_pop = tensor_loss(&model);
    model.config.tasks = vec![Task::Reliability];
    let only_rel = tensor_loss(&model);
    let additive = (joint - single).abs() <= 1e-6 && (both - only_pop - only_rel).abs() <= 1e-6;

    verdict(
        3,
        "multi-task learning",
        schedule_ok && history.epochs.len() <= 20 && acc_pop >= 0.95 && acc_rel >= 0.95 && additive,
        &format!(
            "val accuracy popularity {acc_pop:.3}, reliability {acc_rel:.3} after {} epochs (best {}); loss additivity {:.1e} / {:.1e}; {:.0?}",
            history.epochs.len(),
            history.best_epoch,
            (joint - single).abs(),
            (both - only_pop - only_rel).abs(),
            t0.elapsed()
        ),
    );
}

fn tiny_text() -> TextCnnConfig {
    TextCnnConfig { input_dim: 6, ..Default::default() }
}

fn tiny_image() -> ImageEncoderConfig {
    ImageEncoderConfig { small_cnn_channels: [2, 3, 4], frozen: false, ..ImageEncoderConfig::small_cnn(8) }
}

fn tiny_inputs(n: usize, seed: u64) -> Vec<ArticleInputs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seq = |rng: &mut ChaCha8Rng, len: usize, max_len: usize| {
        let mut data = vec![0f32; max_len * 6];
        for v in data.iter_mut().take(len * 6) {
            *v = rng.random_range(-1.0..1.0);
        }
        EncodedSequence { data, length: len, max_len, dim: 6 }
    };
    (0..n)
        .map(|i| {
            let title = seq(&mut rng, 5 + i % 3, 9);
            let tweet = seq(&mut rng, 8 + i % 4, 12);
            let pixels = (0..3 * 64).map(|_| rng.random_range(-2.0..2.0)).collect();
            ArticleInputs {
                id: format!("t{i}"),
                url: format!("https://t.org/{i}"),
                image: Some(PreparedImage { content_hash: format!("h{i}"), pixels, size: 8 }),
                image_features: None,
                title,
                tweet,
                y_pop: Some((i % 2) as u8),
                y_rel: Some((i / 2 % 2) as u8),
            }
        })
        .collect()
}

fn trainable(params: &mmrl::nn::ParamStore, prefixes: &[String]) -> Vec<(String, Var)> {
    params
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p.as_str())) && !n.contains("running_"))
        .map(|n| (n.clone(), params.get(n).unwrap().clone()))
        .collect()
}

#[test]
fn criterion_04_gradient_integrity() {
    let inputs = tiny_inputs(4, 4);
    let refs: Vec<&ArticleInputs> = inputs.iter().collect();

    let mt_config = ModelConfig { text_cnn: tiny_text(), image: tiny_image(), hidden: 8, dropout: 0.0, ..Default::default() };
    let mt = MultiTaskModel::new(&mt_config, 3, DType::F64).unwrap();
    let fused = mt_config.fused_dim();
    let batch = mt.make_batch(&refs).unwrap();
    let mt_vars = trainable(&mt.params, &mt.trainable_prefixes());
    let mt_check = gradient_check(&mt_vars, &|| mt.batch_loss(&batch, None).unwrap(), 4, 1e-6, 1e-6, 0);

    let cm_config = CrossModalConfig { text_cnn: tiny_text(), image: tiny_image(), ..Default::default() };
    let cm = CrossModalEmbedder::new(&cm_config, 5, DType::F64).unwrap();
    let cm_vars = trainable(&cm.params, &cm.trainable_prefixes());
    // The loss is about B(B − 1)α at initialization, so rounding in the
    // differences is near 1e-10; entries below 1e-5 are compared against that
    // floor.
    let cm_check = gradient_check(&cm_vars, &|| cm.batch_loss(&refs).unwrap(), 4, 1e-4, 1e-5, 1);

    let ok = fused == 2816 && mt_check.worst <= 1e-4 && cm_check.worst <= 1e-4;
    verdict(
        4,
        "gradient integrity",
        ok,
        &format!(
            "multitask ({fused}→8→2 heads, {} vars, {} entries, h 1e-6) worst {:.2e} at {}; N-pairs ({} vars, {} entries, {} above floor 1e-5, h 1e-4) worst {:.2e} at {}",
            mt_vars.len(),
            mt_check.checked,
            mt_check.worst,
            mt_check.worst_at,
            cm_vars.len(),
            cm_check.checked,
            cm_check.above_floor,
            cm_check.worst,
            cm_check.worst_at
        ),
    );
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn brute_npairs(f: &[Vec<f64>], g: &[Vec<f64>], margin: f64) -> f64 {
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut total = 0.0;
    for i in 0..f.len() {
        for j in 0..f.len() {
            if i != j {
                total += (d2(&f[i], &g[i]) - d2(&f[i], &g[j]) + margin).max(0.0);
            }
        }
    }
    total
}

#[test]
fn criterion_05_embedding_geometry() {
    let (train, _, test) = common::domain_pairs(PairDomain::Clean, 5, 200, 0, 200, "g");
    let (tt, wt, caps) = common::random_tables(&train, 5);
    let image = ImageEncoderConfig::small_cnn(32);
    let mut items = common::pair_inputs(&train, &tt, &wt, caps, &image);
    items.extend(common::pair_inputs(&test, &tt, &wt, caps, &image));
    let model = CrossModalEmbedder::new(&CrossModalConfig { image, ..Default::default() }, 5, DType::F32).unwrap();
    let (img, txt) = model.embed_all(&items).unwrap();
    let worst_norm = img
        .iter()
        .chain(&txt)
        .map(|v| (v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst_oracle: f64 = 0.0;
    for _ in 0..100 {
        let b = rng.random_range(2..17);
        let f = unit_rows(&mut rng, b, EMBED_DIM);
        let g = unit_rows(&mut rng, b, EMBED_DIM);
        let want = brute_npairs(&f, &g, DEFAULT_MARGIN);
        let plain = npairs_loss(&f, &g, DEFAULT_MARGIN).unwrap();
        let to_t = |rows: &[Vec<f64>]| Tensor::from_vec(rows.concat(), (b, EMBED_DIM), &Device::Cpu).unwrap();
        let tensor = npairs_loss_tensor(&to_t(&f), &to_t(&g), DEFAULT_MARGIN, false).unwrap().to_scalar::<f64>().unwrap();
        worst_oracle = worst_oracle.max((plain - want).abs()).max((tensor - want).abs());
    }

    // Positives coincide and negatives are orthogonal (d² = 2 ≥ α): zero.
    let basis: Vec<Vec<f64>> = (0..4).map(|i| (0..8).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let satisfied = npairs_loss(&basis, &basis, DEFAULT_MARGIN).unwrap();
    // All texts identical: every positive ties with every negative.
    let same_text = vec![basis[0].clone(); 4];
    let tied = npairs_loss(&basis, &same_text, DEFAULT_MARGIN).unwrap();
    let hinge_ok = satisfied == 0.0 && tied == 12.0 * DEFAULT_MARGIN;

    verdict(
        5,
        "embedding geometry",
        worst_norm <= 1e-5 && worst_oracle <= 1e-8 && hinge_ok,
        &format!(
            "{} embeddings, worst |norm − 1| {worst_norm:.1e}; oracle error {worst_oracle:.1e} over 100 batches; hinge cases {satisfied} and {tied}",
            img.len() + txt.len()
        ),
    );
}

#[test]
fn criterion_06_retrieval_protocol() {
    let t0 = Instant::now();
    let image = ImageEncoderConfig::small_cnn(32);
    let (tr, va, te) = common::domain_pairs(PairDomain::Clean, 1, 2000, 200, 400, "r");
    let (tt, wt, caps) = common::random_tables(&tr, 0);
    let mut train_set = common::pair_inputs(&tr, &tt, &wt, caps, &image);
    let mut val_set = common::pair_inputs(&va, &tt, &wt, caps, &image);
    let mut test_set = common::pair_inputs(&te, &tt, &wt, caps, &image);
    let mut model = CrossModalEmbedder::new(&CrossModalConfig { image, ..Default::default() }, 0, DType::F32).unwrap();
    for set in [&mut train_set, &mut val_set, &mut test_set] {
        model.cache_image_features(set).unwrap();
    }
    let mut chance_ok = true;
    let mut untrained = Vec::new();
    for k in [3, 5, 10] {
        let r = kway_accuracy(&model, &test_set, k, 3, 0).unwrap();
        chance_ok &= r.trials >= 1000 && (r.accuracy - 1.0 / k as f64).abs() <= 0.03;
        untrained.push(format!("{k}-way {:.3} ({} trials)", r.accuracy, r.trials));
    }
    train_embedding(&mut model, &train_set, &val_set, &TrainConfig { max_epochs: 20, batch_size: 32, ..Default::default() }).unwrap();
    let trained = kway_accuracy(&model, &test_set, 10, 3, 0).unwrap();
    verdict(
        6,
        "retrieval protocol",
        chance_ok && trained.accuracy >= 0.9,
        &format!(
            "untrained {}; trained 10-way {:.3} over {} trials; {:.0?}",
            untrained.join(", "),
            trained.accuracy,
            trained.trials,
            t0.elapsed()
        ),
    );
}

#[test]
fn criterion_07_cross_domain_bias() {
    let t0 = Instant::now();
    let image = ImageEncoderConfig::small_cnn(32);
    let mut gaps = Vec::new();
    for seed in 0..5u64 {
        let (atr, ava, ate) = common::domain_pairs(PairDomain::Biased, 100 + seed, 600, 100, 300, "a");
        let (btr, bva, bte) = common::domain_pairs(PairDomain::Clean, 200 + seed, 600, 100, 300, "b");
        let vocab: Vec<SynthPair> = atr.iter().chain(&btr).cloned().collect();
        let (tt, wt, caps) = common::random_tables(&vocab, seed);
        let split = |name: &str, tr: &[SynthPair], va: &[SynthPair], te: &[SynthPair]| DomainSplits {
            name: name.into(),
            train: common::pair_inputs(tr, &tt, &wt, caps, &image),
            val: common::pair_inputs(va, &tt, &wt, caps, &image),
            test: common::pair_inputs(te, &tt, &wt, caps, &image),
        };
        let a = split("biased", &atr, &ava, &ate);
        let b = split("clean", &btr, &bva, &bte);
        let grid = cross_domain_experiment(
            &a,
            &b,
            &CrossModalConfig { image: image.clone(), ..Default::default() },
            &TrainConfig { max_epochs: 10, batch_size: 32, seed, ..Default::default() },
            &CrossDomainConfig { seed, ..Default::default() },
        )
        .unwrap();
        let (da, db) = (grid.drop("biased", 10).unwrap(), grid.drop("clean", 10).unwrap());
        gaps.push((da, db));
    }
    let all = gaps.iter().all(|(da, db)| da - db >= 0.05);
    let text: Vec<String> = gaps.iter().map(|(da, db)| format!("{:.1}% vs {:.1}%", 100.0 * da, 100.0 * db)).collect();
    verdict(
        7,
        "cross-domain bias detection",
        all,
        &format!("10-way relative drop biased vs clean per seed: {}; {:.0?}", text.join(", "), t0.elapsed()),
    );
}

fn brute_mmd(x: &[Vec<f64>], y: &[Vec<f64>], alpha: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| (-alpha * a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()).exp();
    let (m, n) = (x.len() as f64, y.len() as f64);
    let mut xx = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                xx += k(&x[i], &x[j]);
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..y.len() {
        for j in 0..y.len() {
            if i != j {
                yy += k(&y[i], &y[j]);
            }
        }
    }
    let mut xy = 0.0;
    for a in x {
        for b in y {
            xy += k(a, b);
        }
    }
    xx / (m * (m - 1.0)) + yy / (n * (n - 1.0)) - 2.0 * xy / (m * n)
}

#[test]
fn criterion_08_mmd() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut symmetric = true;
    for _ in 0..100 {
        let dim = rng.random_range(1..7);
        let x = gaussian_rows(rng.random_range(2..20), dim, 0.0, 1.0, rng.random());
        let y = gaussian_rows(rng.random_range(2..20), dim, rng.random_range(-1.0..1.0), 1.5, rng.random());
        let alpha = rng.random_range(0.1..3.0);
        let v = mmd2_unbiased(&x, &y, alpha).unwrap();
        worst = worst.max((v - brute_mmd(&x, &y, alpha)).abs());
        symmetric &= v.to_bits() == mmd2_unbiased(&y, &x, alpha).unwrap().to_bits();
    }

    let cloud = gaussian_rows(2000, 8, 0.0, 1.0, 80);
    let alpha = median_heuristic_alpha(&cloud, 1000, 0).unwrap();
    let same = summarize(&within_domain_protocol(&cloud, 100, 250, alpha, 1).unwrap().values).unwrap();
    let shifted = gaussian_rows(2000, 8, 0.5, 1.0, 81);
    let diff = summarize(&between_domain_mmd(&cloud, &shifted, 100, 250, alpha, 2).unwrap()).unwrap();
    let same_ok = same.mean.abs() <= 2.0 * same.stderr;
    let diff_ok = diff.mean > 5.0 * diff.stderr;

    let protocol = |values: Vec<f64>| MmdProtocolResult { mean: values.iter().sum::<f64>() / values.len() as f64, values, n: 0, alpha: 1.0 };
    let t = compare_protocols(&protocol(vec![1.0, 2.0, 3.0, 4.0]), &protocol(vec![2.0, 3.0, 4.0, 5.0])).unwrap();
    let t_ok = (t.t - -1.549).abs() <= 1e-3 && t.df == 6.0;

    verdict(
        8,
        "MMD",
        worst <= 1e-10 && symmetric && same_ok && diff_ok && t_ok,
        &format!(
            "oracle error {worst:.1e}; symmetric {symmetric}; same-distribution {:.2e} ± {:.1e}; shifted {:.2e} ± {:.1e}; t = {:.4}, df = {} (expected −1.549, 6)",
            same.mean, same.stderr, diff.mean, diff.stderr, t.t, t.df
        ),
    );
}

fn quadrant_mass(map: &SaliencyMap, reliable: bool) -> f64 {
    let (h, w) = (map.shape[0], map.shape[1]);
    if reliable {
        region_mass(map, 0..h / 2, 0..w / 2)
    } else {
        region_mass(map, h / 2..h, w / 2..w)
    }
}

fn class_target(task: Task, y: u8) -> Target {
    Target { task, class: if y == 1 { TargetClass::Positive } else { TargetClass::Negative } }
}

/// Distinct tokens of `tokens` ordered by their best score in `map`.
fn top_distinct(tokens: &[String], map: &SaliencyMap, k: usize) -> Vec<String> {
    let mut best: Vec<(String, f64)> = Vec::new();
    for (t, &s) in tokens.iter().zip(&map.values) {
        match best.iter_mut().find(|(b, _)| b == t) {
            Some(e) => e.1 = e.1.max(s),
            None => best.push((t.clone(), s)),
        }
    }
    best.sort_by(|a, b| b.1.total_cmp(&a.1));
    best.into_iter().take(k).map(|(t, _)| t).collect()
}

#[test]
fn criterion_09_saliency() {
    let t0 = Instant::now();
    let frozen = ImageEncoderConfig::small_cnn(32);
    let synth = ClassificationSynth { n_articles: 2000, ..Default::default() };

    // Full model for the token checks and the bitwise SmoothGrad check.
    let mut s = common::classification_splits(&synth, &frozen, 0);
    let mut full = MultiTaskModel::new(&ModelConfig { image: frozen.clone(), ..Default::default() }, 0, DType::F32).unwrap();
    full.cache_image_features(&mut s.train).unwrap();
    full.cache_image_features(&mut s.val).unwrap();
    train(&mut full, &s.train, &s.val, &TrainConfig { max_epochs: 8, ..Default::default() }).unwrap();

    let zero = SmoothGradConfig { samples: 25, sigma: Some(0.0), seed: 9 };
    let mut bitwise = true;
    for a in s.test.iter().take(10) {
        for target in Target::all() {
            bitwise &= smoothgrad_image(&full, a, target, &zero).unwrap() == gradcam_image(&full, a, target).unwrap();
            for field in [TextField::Title, TextField::Tweet] {
                bitwise &= smoothgrad_tokens(&full, a, field, target, &zero).unwrap() == token_attention(&full, a, field, target).unwrap();
            }
        }
    }

    // Single-channel GAP logit on a real feature map.
    let img = s.test[0].image.as_ref().unwrap();
    let pixels = Tensor::from_vec(img.pixels.clone(), (1, 3, img.size, img.size), &Device::Cpu).unwrap();
    let fmap = full.image.feature_map(&pixels).unwrap();
    let (_, channels, h, w) = fmap.dims4().unwrap();
    let flat: Vec<f32> = fmap.flatten_all().unwrap().to_vec1().unwrap();
    let c = (0..channels)
        .max_by(|&a, &b| {
            let sum = |c: usize| flat[c * h * w..(c + 1) * h * w].iter().sum::<f32>();
            sum(a).total_cmp(&sum(b))
        })
        .unwrap();
    let maps = gradcam_raw(&fmap, |a| Ok(a.narrow(1, c, 1)?.mean(3)?.mean(2)?.flatten_all()?)).unwrap();
    let act: Vec<f64> = flat[c * h * w..(c + 1) * h * w].iter().map(|&v| v.max(0.0) as f64).collect();
    let dot: f64 = maps[0].iter().zip(&act).map(|(a, b)| a * b).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cosine = dot / (norm(&maps[0]) * norm(&act));

    // Planted tweet triggers for the popularity classes.
    let test_articles = &s.dataset.test;
    let mut per_article = 0;
    let mut title_hits = 0;
    let mut token_lists = Vec::new();
    for (a, x) in test_articles.iter().zip(&s.test) {
        let tokens = tweet_tokens(a).unwrap();
        let y = x.y_pop.unwrap();
        let map = token_attention(&full, x, TextField::Tweet, class_target(Task::Popularity, y)).unwrap();
        let trigger = if y == 1 { POPULAR_TRIGGER } else { UNPOPULAR_TRIGGER };
        if top_distinct(&tokens[..x.tweet.length], &map, 3).iter().any(|t| t == trigger) {
            per_article += 1;
        }
        let title = title_tokens(a);
        let yr = x.y_rel.unwrap();
        let tmap = token_attention(&full, x, TextField::Title, class_target(Task::Reliability, yr)).unwrap();
        let trig = if yr == 1 { RELIABLE_TRIGGER } else { UNRELIABLE_TRIGGER };
        if top_distinct(&title[..x.title.length], &tmap, 3).iter().any(|t| t == trig) {
            title_hits += 1;
        }
        token_lists.push(tokens[..x.tweet.length].to_vec());
    }
    let report = top_tokens_report(&full, &s.test, &token_lists, &TokenReportConfig::default()).unwrap();
    let class_rank = |label: &str, trigger: &str| {
        report.iter().find(|r| r.label == label).and_then(|r| r.tokens.iter().position(|e| e.token == trigger))
    };
    let ranks = [class_rank("popular", POPULAR_TRIGGER), class_rank("unpopular", UNPOPULAR_TRIGGER)];
    let tokens_ok = ranks.iter().all(|r| matches!(r, Some(i) if *i < 3));

    // Image-only model with a trainable backbone for the quadrant test.
    let tuned = ImageEncoderConfig { frozen: false, ..frozen };
    let s2 = common::classification_splits(&synth, &tuned, 1);
    let image_only = ModelConfig { image: tuned, modalities: "image".parse().unwrap(), ..Default::default() };
    let mut model = MultiTaskModel::new(&image_only, 1, DType::F32).unwrap();
    train(&mut model, &s2.train, &s2.val, &TrainConfig { max_epochs: 10, ..Default::default() }).unwrap();
    let mut localized = 0;
    for a in &s2.test {
        let y = a.y_rel.unwrap();
        let map = smoothgrad_image(&model, a, class_target(Task::Reliability, y), &SmoothGradConfig::default()).unwrap();
        if quadrant_mass(&map, y == 1) >= 0.6 {
            localized += 1;
        }
    }
    let quadrant_share = localized as f64 / s2.test.len() as f64;

    verdict(
        9,
        "saliency",
        bitwise && cosine >= 0.999 && quadrant_share >= 0.8 && tokens_ok,
        &format!(
            "sigma 0 bitwise {bitwise}; GAP cosine {cosine:.6}; quadrant ≥60% mass on {localized}/{} test images; \
             tweet trigger class ranks {ranks:?}, per-article top-3 {per_article}/{n}; \
             title reliability trigger per-article top-3 {title_hits}/{n} (information); {:.0?}",
            s2.test.len(),
            t0.elapsed(),
            n = test_articles.len(),
        ),
    );
}

fn run_cli(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_mmrl"))
        .current_dir(dir)
        .args(["--config", "smoke.toml"])
        .args(args)
        .output()
        .unwrap();
    let code = out.status.code().unwrap_or(-1);
    if code != 0 {
        eprintln!("{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    (code, String::from_utf8_lossy(&out.stdout).trim().to_string())
}

#[test]
fn criterion_10_end_to_end() {
    let t0 = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("smoke.toml"),
        "experiment_id = \"smoke\"\n\
         [paths]\noutput = \"runs\"\n\
         [train]\nmax_epochs = 3\n\
         [embed.train]\nmax_epochs = 2\n\
         [saliency.smoothgrad]\nsamples = 5\n\
         [saliency.token_report]\nmin_count = 3\n\
         [homogeneity]\nsample_sizes = [10, 20]\nrepeats = 20\n",
    )
    .unwrap();
    let mut codes = Vec::new();
    let mut step = |args: &[&str]| {
        let (code, out) = run_cli(dir, args);
        codes.push((args[0].to_string(), code));
        out
    };
    step(&["synth", "--out", "fixtures", "--articles", "300"]);
    step(&["ingest", "--tweets", "fixtures/tweets.jsonl", "--domains", "fixtures/domains.csv", "--html-cache", "fixtures/html_cache", "--out", "corpus", "--offline"]);
    step(&["build-dataset", "--corpus", "corpus", "--out", "dataset"]);
    step(&["train", "--dataset", "dataset", "--out", "model.ckp"]);
    step(&["eval", "--ckpt", "model.ckp", "--split", "test"]);
    step(&["eval", "--ckpt", "model.ckp", "--split", "test", "--modalities", "tweet"]);
    let first = std::fs::read_to_string(dir.join("dataset").join(DATASET_FILE)).unwrap();
    let id = serde_json::from_str::<serde_json::Value>(first.lines().next().unwrap()).unwrap()["article_id"].as_str().unwrap().to_string();
    step(&["saliency", "--ckpt", "model.ckp", "--input", &id, "--task", "reliability", "--class", "reliable"]);
    step(&["token-report", "--ckpt", "model.ckp", "--split", "test"]);
    step(&["embed-train", "--dataset", "dataset", "--domain", "red", "--out", "red.ckp"]);
    step(&["retrieve", "--ckpt", "red.ckp", "--test-domain", "green", "--k", "3,5"]);
    step(&["mmd", "--features", "dataset", "--kind", "image"]);
    step(&["mmd", "--features", "dataset/features_tweet.fea", "--kind", "tweet", "--domain", "green"]);
    let report_dir = step(&["report", "--runs", "runs"]);
    let report = std::fs::read_to_string(Path::new(dir).join(&report_dir).join(mmrl::pipeline::REPORT_FILE)).unwrap_or_default();
    let missing: Vec<&str> = mmrl::pipeline::REPORT_SECTIONS.iter().copied().filter(|s| !report.contains(s)).collect();
    let failed: Vec<&(String, i32)> = codes.iter().filter(|(_, c)| *c != 0).collect();
    verdict(
        10,
        "end-to-end smoke",
        failed.is_empty() && missing.is_empty(),
        &format!("{} commands, non-zero exits {failed:?}; missing report sections {missing:?}; {:.0?}", codes.len(), t0.elapsed()),
    );
}
