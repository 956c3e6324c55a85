//! Domain homogeneity: unbiased MMD² under a Laplace kernel, the repeated
//! subsampling protocol, and pooled two-sample t-tests on the results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub const DEFAULT_REPEATS: usize = 250;

fn distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn kernel(x: &[f64], y: &[f64], alpha: f64) -> f64 {
    (-alpha * distance(x, y)).exp()
}

/// `exp(−α‖x − y‖)`.
pub fn laplace_kernel(x: &[f64], y: &[f64], alpha: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("kernel inputs differ in dimension: {} vs {}", x.len(), y.len())));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("kernel bandwidth must be positive, got {alpha}")));
    }
    Ok(kernel(x, y, alpha))
}

fn check_rows(rows: &[Vec<f64>], what: &str) -> Result<usize> {
    let dim = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::invalid(format!("{what} rows differ in dimension")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} contains non-finite values")));
    }
    Ok(dim)
}

fn within_sum(x: &[Vec<f64>], alpha: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..x.len() {
        for j in (i + 1)..x.len() {
            s += kernel(&x[i], &x[j], alpha);
        }
    }
    2.0 * s
}

/// Unbiased MMD² estimate between two samples. Both samples need at least
/// two rows. The result is exactly symmetric in its arguments.
pub fn mmd2_unbiased(x: &[Vec<f64>], y: &[Vec<f64>], alpha: f64) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::invalid("MMD² needs at least two rows per sample"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("kernel bandwidth must be positive, got {alpha}")));
    }
    if check_rows(x, "first sample")? != check_rows(y, "second sample")? {
        return Err(Error::invalid("samples differ in dimension"));
    }
    // Evaluate in a canonical argument order so that swapping the inputs
    // performs the identical sequence of floating-point operations.
    let (a, b) = if canonical_le(x, y) { (x, y) } else { (y, x) };
    let (n, m) = (a.len() as f64, b.len() as f64);
    let kaa = within_sum(a, alpha) / (n * (n - 1.0));
    let kbb = within_sum(b, alpha) / (m * (m - 1.0));
    let mut kab = 0.0;
    for u in a {
        for v in b {
            kab += kernel(u, v, alpha);
        }
    }
    Ok(kaa + kbb - 2.0 * kab / (n * m))
}

fn canonical_le(x: &[Vec<f64>], y: &[Vec<f64>]) -> bool {
    if x.len() != y.len() {
        return x.len() < y.len();
    }
    for (u, v) in x.iter().flatten().zip(y.iter().flatten()) {
        match u.total_cmp(v) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    true
}

/// `1 / median pairwise distance`. Samples above `max_rows` are thinned
/// deterministically with `seed` first.
pub fn median_heuristic_alpha(rows: &[Vec<f64>], max_rows: usize, seed: u64) -> Result<f64> {
    check_rows(rows, "pooled sample")?;
    if rows.len() < 2 {
        return Err(Error::insufficient("median heuristic needs two rows"));
    }
    let picked: Vec<&Vec<f64>> = if rows.len() > max_rows {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, rows.len(), max_rows).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &rows[i]).collect()
    } else {
        rows.iter().collect()
    };
    let mut d = Vec::with_capacity(picked.len() * (picked.len() - 1) / 2);
    for i in 0..picked.len() {
        for j in (i + 1)..picked.len() {
            d.push(distance(picked[i], picked[j]));
        }
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let median = if d.len() % 2 == 0 { 0.5 * (d[mid - 1] + d[mid]) } else { d[mid] };
    if median <= 0.0 {
        return Err(Error::invalid("median pairwise distance is zero"));
    }
    Ok(1.0 / median)
}

fn repeat_rng(seed: u64, repeat: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(repeat as u64);
    rng
}

/// MMD² between two disjoint size-`n` subsamples of one domain, drawn
/// without replacement, for each of `repeats` repeats.
pub fn within_domain_mmd(rows: &[Vec<f64>], n: usize, repeats: usize, alpha: f64, seed: u64) -> Result<Vec<f64>> {
    if n < 2 || 2 * n > rows.len() {
        return Err(Error::invalid(format!("need 2×{n} rows, domain has {}", rows.len())));
    }
    (0..repeats)
        .map(|r| {
            let idx = sample(&mut repeat_rng(seed, r), rows.len(), 2 * n).into_vec();
            let x: Vec<Vec<f64>> = idx[..n].iter().map(|&i| rows[i].clone()).collect();
            let y: Vec<Vec<f64>> = idx[n..].iter().map(|&i| rows[i].clone()).collect();
            mmd2_unbiased(&x, &y, alpha)
        })
        .collect()
}

/// MMD² between size-`n` subsamples of two domains.
pub fn between_domain_mmd(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    n: usize,
    repeats: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if n < 2 || n > a.len() || n > b.len() {
        return Err(Error::invalid(format!("need {n} rows per domain")));
    }
    (0..repeats)
        .map(|r| {
            let mut rng = repeat_rng(seed, r);
            let x: Vec<Vec<f64>> = sample(&mut rng, a.len(), n).iter().map(|i| a[i].clone()).collect();
            let y: Vec<Vec<f64>> = sample(&mut rng, b.len(), n).iter().map(|i| b[i].clone()).collect();
            mmd2_unbiased(&x, &y, alpha)
        })
        .collect()
}

/// Per-repeat values of one subsampling protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdProtocolResult {
    pub values: Vec<f64>,
    pub mean: f64,
    pub n: usize,
    pub alpha: f64,
}

pub fn within_domain_protocol(rows: &[Vec<f64>], n: usize, repeats: usize, alpha: f64, seed: u64) -> Result<MmdProtocolResult> {
    let values = within_domain_mmd(rows, n, repeats, alpha, seed)?;
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    Ok(MmdProtocolResult { values, mean, n, alpha })
}

/// Pooled t-test between two protocol runs of equal repeat count.
pub fn compare_protocols(a: &MmdProtocolResult, b: &MmdProtocolResult) -> Result<TTest> {
    if a.values.len() != b.values.len() {
        return Err(Error::invalid(format!("repeat counts differ: {} vs {}", a.values.len(), b.values.len())));
    }
    pooled_t_test(&a.values, &b.values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.len() < 2 {
        return Err(Error::insufficient("need two values for a standard error"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(Summary { mean, stderr: (var / n).sqrt(), count: values.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p_value: f64,
}

/// Equal-variance two-sample t-test.
pub fn pooled_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::insufficient("t-test needs two values per group"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let ma = a.iter().sum::<f64>() / na;
    let mb = b.iter().sum::<f64>() / nb;
    let ssa: f64 = a.iter().map(|v| (v - ma).powi(2)).sum();
    let ssb: f64 = b.iter().map(|v| (v - mb).powi(2)).sum();
    let df = na + nb - 2.0;
    let sp2 = (ssa + ssb) / df;
    let se = (sp2 * (1.0 / na + 1.0 / nb)).sqrt();
    if se == 0.0 {
        if ma == mb {
            return Ok(TTest { t: 0.0, df, p_value: 1.0 });
        }
        return Err(Error::invalid("both groups are constant with different means"));
    }
    let t = (ma - mb) / se;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(TTest { t, df, p_value: 2.0 * dist.cdf(-t.abs()) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogeneityConfig {
    pub sample_sizes: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    /// Fixed bandwidth; the median heuristic is used when absent.
    pub alpha: Option<f64>,
    pub median_max_rows: usize,
}

impl Default for HomogeneityConfig {
    fn default() -> Self {
        Self { sample_sizes: vec![50, 100, 200, 400], repeats: DEFAULT_REPEATS, seed: 0, alpha: None, median_max_rows: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogeneityRow {
    pub n: usize,
    pub domain: String,
    pub kind: String,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainComparison {
    pub n: usize,
    pub kind: String,
    pub first: String,
    pub second: String,
    pub test: TTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogeneityResult {
    pub alpha: f64,
    pub rows: Vec<HomogeneityRow>,
    pub comparisons: Vec<DomainComparison>,
}

/// Within-domain MMD² curves for every domain and sample size, plus t-tests
/// between every pair of domains at each size. Sizes a domain cannot supply
/// are skipped for that domain.
pub fn homogeneity_experiment(
    domains: &BTreeMap<String, Vec<Vec<f64>>>,
    kind: &str,
    config: &HomogeneityConfig,
) -> Result<HomogeneityResult> {
    let pooled: Vec<Vec<f64>> = domains.values().flatten().cloned().collect();
    let alpha = match config.alpha {
        Some(a) => a,
        None => median_heuristic_alpha(&pooled, config.median_max_rows, config.seed)?,
    };
    let mut rows = Vec::new();
    let mut comparisons = Vec::new();
    for &n in &config.sample_sizes {
        let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (name, feats) in domains {
            if 2 * n > feats.len() {
                continue;
            }
            let v = within_domain_mmd(feats, n, config.repeats, alpha, config.seed)?;
            let s = summarize(&v)?;
            rows.push(HomogeneityRow { n, domain: name.clone(), kind: kind.to_string(), mean: s.mean, stderr: s.stderr });
            values.insert(name, v);
        }
        let names: Vec<&str> = values.keys().copied().collect();
        for i in 0..names.len() {
            for j in (i + 1)..names.len() {
                comparisons.push(DomainComparison {
                    n,
                    kind: kind.to_string(),
                    first: names[i].to_string(),
                    second: names[j].to_string(),
                    test: pooled_t_test(&values[names[i]], &values[names[j]])?,
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::insufficient("no domain is large enough for any sample size"));
    }
    Ok(HomogeneityResult { alpha, rows, comparisons })
}

pub fn write_csv(rows: &[HomogeneityRow], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("N,domain,kind,mean,stderr\n");
    for r in rows {
        writeln!(s, "{},{},{},{:.10e},{:.10e}", r.n, r.domain, r.kind, r.mean, r.stderr).unwrap();
    }
    std::fs::write(path, s)?;
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Mean MMD² against N with ±1 SE bars, one line per (domain, kind).
pub fn render_svg(rows: &[HomogeneityRow], title: &str) -> String {
    let (w, h, m) = (640.0, 400.0, 60.0);
    let mut series: BTreeMap<(String, String), Vec<&HomogeneityRow>> = BTreeMap::new();
    for r in rows {
        series.entry((r.kind.clone(), r.domain.clone())).or_default().push(r);
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let (x0, x1) = (xs.iter().copied().fold(f64::INFINITY, f64::min), xs.iter().copied().fold(0.0, f64::max));
    let y1 = rows.iter().map(|r| r.mean + r.stderr).fold(0.0, f64::max).max(1e-12);
    let y0 = rows.iter().map(|r| r.mean - r.stderr).fold(0.0, f64::min);
    let px = |x: f64| if x1 > x0 { m + (x - x0) / (x1 - x0) * (w - 2.0 * m) } else { w / 2.0 };
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, w / 2.0, xml_escape(title)).unwrap();
    writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m).unwrap();
    writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">N</text>"#, w / 2.0, h - 15.0).unwrap();
    writeln!(s, r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">MMD²</text>"#, h / 2.0, h / 2.0).unwrap();
    for (tick, label) in [(y0, y0), (y1, y1)] {
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{label:.3e}</text>"#, m - 4.0, py(tick) + 4.0).unwrap();
    }
    let mut ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    for n in ns {
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{n}</text>"#, px(n as f64), h - m + 16.0).unwrap();
    }
    for (i, ((kind, domain), pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|r| format!("{:.1},{:.1}", px(r.n as f64), py(r.mean))).collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" ")).unwrap();
        for r in pts {
            let x = px(r.n as f64);
            writeln!(
                s,
                r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{color}"/><circle cx="{x:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                py(r.mean - r.stderr),
                py(r.mean + r.stderr),
                py(r.mean)
            )
            .unwrap();
        }
        let ly = m + 16.0 * i as f64;
        writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, w - m - 150.0, ly - 9.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{ly}">{} ({})</text>"#, w - m - 135.0, xml_escape(domain), xml_escape(kind)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
