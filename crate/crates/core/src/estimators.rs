//! Cost, token-length and latency estimators.
//!
//! * cost: `λ_in · ℓ_in + λ_out · ℓ_out`
//! * input length: a deterministic per-model tokenizer
//! * output length: a per-model table of mean lengths over bins of the
//!   complexity score `s = αᵀb`, calibrated on anchor responses
//! * latency: `TTFT + ℓ_out · TPOT`, fitted by least squares on anchors

use std::collections::BTreeMap;
use std::io::Read;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::irt::ItemParams;
use crate::math::dot;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelPricing {
    /// Currency per input token.
    pub price_in: f64,
    /// Currency per output token.
    pub price_out: f64,
}

impl ModelPricing {
    pub fn new(price_in: f64, price_out: f64) -> Result<Self> {
        let p = Self {
            price_in,
            price_out,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.price_in >= 0.0 && self.price_out >= 0.0)
            || !self.price_in.is_finite()
            || !self.price_out.is_finite()
        {
            return Err(Error::invalid("token prices must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl std::ops::Add for TokenCounts {
    type Output = TokenCounts;

    fn add(self, o: TokenCounts) -> TokenCounts {
        TokenCounts {
            input_tokens: self.input_tokens + o.input_tokens,
            output_tokens: self.output_tokens + o.output_tokens,
        }
    }
}

pub fn estimate_cost(pricing: &ModelPricing, tokens: &TokenCounts) -> f64 {
    cost_with_length(pricing, tokens.input_tokens as f64, tokens.output_tokens as f64)
}

/// Cost with a fractional (estimated) output length.
pub fn cost_with_length(pricing: &ModelPricing, input_tokens: f64, output_tokens: f64) -> f64 {
    pricing.price_in * input_tokens + pricing.price_out * output_tokens
}

// ---------------------------------------------------------------------------
// Tokenizers
// ---------------------------------------------------------------------------

pub trait Tokenizer: Send + Sync {
    fn id(&self) -> &str;
    fn count(&self, text: &str) -> u64;
}

/// Splits on Unicode whitespace.
#[derive(Debug, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn id(&self) -> &str {
        WHITESPACE_TOKENIZER
    }

    fn count(&self, text: &str) -> u64 {
        text.split_whitespace().count() as u64
    }
}

/// Byte-pair approximation: `ceil(chars / 4)`.
#[derive(Debug, Default)]
pub struct CharQuarterTokenizer;

impl Tokenizer for CharQuarterTokenizer {
    fn id(&self) -> &str {
        BPE_APPROX_TOKENIZER
    }

    fn count(&self, text: &str) -> u64 {
        (text.chars().count() as u64).div_ceil(4)
    }
}

pub const WHITESPACE_TOKENIZER: &str = "whitespace";
pub const BPE_APPROX_TOKENIZER: &str = "bpe-approx";

/// Tokenizers addressable by id.
#[derive(Clone)]
pub struct TokenizerRegistry {
    by_id: BTreeMap<String, Arc<dyn Tokenizer>>,
}

impl std::fmt::Debug for TokenizerRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TokenizerRegistry")
            .field("ids", &self.by_id.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Default for TokenizerRegistry {
    fn default() -> Self {
        let mut r = Self {
            by_id: BTreeMap::new(),
        };
        r.register(Arc::new(WhitespaceTokenizer));
        r.register(Arc::new(CharQuarterTokenizer));
        r
    }
}

impl TokenizerRegistry {
    pub fn register(&mut self, tok: Arc<dyn Tokenizer>) {
        self.by_id.insert(tok.id().to_string(), tok);
    }

    pub fn get(&self, id: &str) -> Result<&Arc<dyn Tokenizer>> {
        self.by_id.get(id).ok_or_else(|| Error::UnknownId {
            kind: "tokenizer",
            id: id.to_string(),
        })
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }
}

pub fn count_input_tokens(tokenizers: &TokenizerRegistry, tokenizer_id: &str, query: &str) -> Result<u64> {
    Ok(tokenizers.get(tokenizer_id)?.count(query))
}

// ---------------------------------------------------------------------------
// Output length
// ---------------------------------------------------------------------------

/// Task-aware complexity `αᵀb`.
pub fn complexity_score(item: &ItemParams) -> Result<f64> {
    check_dim("difficulty vector", item.alpha.len(), item.b.len())?;
    Ok(dot(&item.alpha, &item.b))
}

/// One anchor response used to calibrate the verbosity table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthRecord {
    pub item_id: String,
    pub score: f64,
    pub output_tokens: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerbosityTable {
    pub model_id: String,
    /// K+1 strictly increasing edges over the complexity score.
    pub bin_edges: Vec<f64>,
    /// Mean output length per bin.
    pub mean_lengths: Vec<f64>,
    pub global_mean: f64,
}

pub const DEFAULT_VERBOSITY_BINS: usize = 10;

impl VerbosityTable {
    pub fn bins(&self) -> usize {
        self.mean_lengths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean_lengths.is_empty() {
            return Err(Error::invalid("verbosity table needs at least one bin"));
        }
        check_dim("bin edges", self.mean_lengths.len() + 1, self.bin_edges.len())?;
        if self.bin_edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("verbosity bin edges must be strictly increasing"));
        }
        if self
            .mean_lengths
            .iter()
            .chain(std::iter::once(&self.global_mean))
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(Error::invalid("verbosity lengths must be finite and >= 0"));
        }
        Ok(())
    }

    /// Bin index for `score`, clamping to the edge bins.
    pub fn bin_of(&self, score: f64) -> usize {
        let k = self.bins();
        self.bin_edges[1..k].partition_point(|&e| e <= score)
    }
}

/// Builds `k` equal-frequency bins over the observed complexity scores.
///
/// Records are sorted by score (ties by item id) and split into `k` runs whose
/// sizes differ by at most one; interior edges sit at the midpoint between the
/// neighbouring runs. Bins left empty after edge de-duplication inherit the
/// global mean.
pub fn calibrate_verbosity(model_id: &str, records: &[LengthRecord], k: usize) -> Result<VerbosityTable> {
    if k == 0 {
        return Err(Error::invalid("bin count must be >= 1"));
    }
    if records.len() < k.max(2) {
        return Err(Error::TooFew {
            what: "verbosity records",
            minimum: k.max(2),
            found: records.len(),
        });
    }
    for r in records {
        if !r.score.is_finite() || !(r.output_tokens.is_finite() && r.output_tokens >= 0.0) {
            return Err(Error::invalid(format!("bad verbosity record for `{}`", r.item_id)));
        }
    }
    let mut sorted: Vec<&LengthRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.item_id.cmp(&b.item_id)));
    let lo = sorted[0].score;
    let hi = sorted[sorted.len() - 1].score;
    if !(hi > lo) {
        return Err(Error::TooFew {
            what: "distinct complexity scores",
            minimum: 2,
            found: 1,
        });
    }

    let n = sorted.len();
    let mut edges = Vec::with_capacity(k + 1);
    edges.push(lo);
    let mut start = 0;
    for bin in 0..k - 1 {
        let size = n / k + usize::from(bin < n % k);
        let end = start + size;
        edges.push(0.5 * (sorted[end - 1].score + sorted[end].score));
        start = end;
    }
    edges.push(hi);
    // Tied scores can collapse neighbouring edges; nudge them apart.
    let tiny = (hi - lo) * 1e-9;
    for j in 1..edges.len() {
        if edges[j] <= edges[j - 1] {
            edges[j] = edges[j - 1] + tiny;
        }
    }

    let global_mean = records.iter().map(|r| r.output_tokens).sum::<f64>() / n as f64;
    let mut table = VerbosityTable {
        model_id: model_id.to_string(),
        bin_edges: edges,
        mean_lengths: vec![0.0; k],
        global_mean,
    };
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for r in &sorted {
        let b = table.bin_of(r.score);
        sums[b] += r.output_tokens;
        counts[b] += 1;
    }
    for b in 0..k {
        table.mean_lengths[b] = if counts[b] == 0 {
            global_mean
        } else {
            sums[b] / counts[b] as f64
        };
    }
    table.validate()?;
    Ok(table)
}

/// Table lookup of the expected output length for a complexity score.
pub fn estimate_output_length(table: &VerbosityTable, score: f64) -> f64 {
    table.mean_lengths[table.bin_of(score)]
}

// ---------------------------------------------------------------------------
// Latency
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    /// Seconds to first token.
    pub ttft: f64,
    /// Seconds per output token.
    pub tpot: f64,
    /// RMS residual of the fit, computed with the clamped parameters.
    pub residual_rms: f64,
    /// Set when the regression produced a negative coefficient.
    #[serde(default)]
    pub clamped: bool,
}

impl LatencyProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.ttft.is_finite() && self.ttft >= 0.0 && self.tpot.is_finite() && self.tpot >= 0.0) {
            return Err(Error::invalid("latency parameters must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyMeasurement {
    pub output_tokens: f64,
    pub seconds: f64,
}

/// Ordinary least squares of latency on output length; intercept → TTFT,
/// slope → TPOT, each clamped at zero.
pub fn calibrate_latency(measurements: &[LatencyMeasurement]) -> Result<LatencyProfile> {
    if measurements.len() < 2 {
        return Err(Error::TooFew {
            what: "latency measurements",
            minimum: 2,
            found: measurements.len(),
        });
    }
    let n = measurements.len() as f64;
    let mx = measurements.iter().map(|m| m.output_tokens).sum::<f64>() / n;
    let my = measurements.iter().map(|m| m.seconds).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for m in measurements {
        let dx = m.output_tokens - mx;
        sxx += dx * dx;
        sxy += dx * (m.seconds - my);
    }
    if !(sxx > 0.0) {
        return Err(Error::invalid(
            "degenerate latency design: all output lengths are equal",
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ttft = intercept.max(0.0);
    let tpot = slope.max(0.0);
    let clamped = intercept < 0.0 || slope < 0.0;
    let sse: f64 = measurements
        .iter()
        .map(|m| {
            let r = m.seconds - (ttft + tpot * m.output_tokens);
            r * r
        })
        .sum();
    let profile = LatencyProfile {
        ttft,
        tpot,
        residual_rms: (sse / n).sqrt(),
        clamped,
    };
    profile.validate()?;
    Ok(profile)
}

pub fn estimate_latency(profile: &LatencyProfile, output_length: f64) -> f64 {
    profile.ttft + output_length * profile.tpot
}

// ---------------------------------------------------------------------------
// Anchor measurement CSV
// ---------------------------------------------------------------------------

/// One row of an anchor measurement file:
/// `item_id,score,output_tokens,latency_seconds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorMeasurement {
    pub item_id: String,
    pub score: f64,
    pub output_tokens: f64,
    pub latency_seconds: f64,
}

pub fn read_measurements<R: Read>(reader: R) -> Result<Vec<AnchorMeasurement>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

pub fn write_measurements<W: std::io::Write>(writer: W, rows: &[AnchorMeasurement]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cost_examples() {
        let free = ModelPricing::new(0.0, 0.0).unwrap();
        let toks = TokenCounts {
            input_tokens: 123,
            output_tokens: 456,
        };
        assert_eq!(estimate_cost(&free, &toks), 0.0);
        let p = ModelPricing::new(2e-6, 6e-6).unwrap();
        let c = estimate_cost(
            &p,
            &TokenCounts {
                input_tokens: 100,
                output_tokens: 50,
            },
        );
        assert!((c - 5e-4).abs() < 1e-18);
        assert_eq!(estimate_cost(&p, &TokenCounts::default()), 0.0);
        assert!(ModelPricing::new(-1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn cost_is_linear_in_tokens(
            pi in 0.0f64..1e-3, po in 0.0f64..1e-3,
            a in (0u64..100_000, 0u64..100_000), b in (0u64..100_000, 0u64..100_000),
        ) {
            let p = ModelPricing::new(pi, po).unwrap();
            let ta = TokenCounts { input_tokens: a.0, output_tokens: a.1 };
            let tb = TokenCounts { input_tokens: b.0, output_tokens: b.1 };
            let lhs = estimate_cost(&p, &(ta + tb));
            let rhs = estimate_cost(&p, &ta) + estimate_cost(&p, &tb);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1e-12));
        }
    }

    #[test]
    fn tokenizers() {
        let reg = TokenizerRegistry::default();
        assert_eq!(count_input_tokens(&reg, WHITESPACE_TOKENIZER, "").unwrap(), 0);
        assert_eq!(count_input_tokens(&reg, BPE_APPROX_TOKENIZER, "").unwrap(), 0);
        assert_eq!(count_input_tokens(&reg, WHITESPACE_TOKENIZER, "a b c").unwrap(), 3);
        assert_eq!(count_input_tokens(&reg, BPE_APPROX_TOKENIZER, "hello, world!").unwrap(), 4);
        assert!(matches!(
            count_input_tokens(&reg, "gpt-who", "x"),
            Err(Error::UnknownId { .. })
        ));
    }

    #[test]
    fn complexity_examples() {
        let it = |a: &[f64], b: &[f64]| ItemParams::new("q", a.to_vec(), b.to_vec()).unwrap();
        assert_eq!(complexity_score(&it(&[0.0, 0.0], &[4.0, 1.0])).unwrap(), 0.0);
        assert_eq!(complexity_score(&it(&[1.0, 2.0], &[3.0, -1.0])).unwrap(), 1.0);
        assert_eq!(complexity_score(&it(&[1.0, 2.0], &[0.0, 0.0])).unwrap(), 0.0);
        let bad = ItemParams {
            item_id: "q".into(),
            alpha: vec![1.0],
            b: vec![1.0, 2.0],
        };
        assert!(complexity_score(&bad).is_err());
    }

    fn rec(id: &str, s: f64, len: f64) -> LengthRecord {
        LengthRecord {
            item_id: id.into(),
            score: s,
            output_tokens: len,
        }
    }

    fn four() -> Vec<LengthRecord> {
        vec![rec("a", 1.0, 10.0), rec("b", 2.0, 10.0), rec("c", 3.0, 100.0), rec("d", 4.0, 100.0)]
    }

    #[test]
    fn verbosity_two_bins_by_hand() {
        let t = calibrate_verbosity("m", &four(), 2).unwrap();
        assert_eq!(t.bin_edges, vec![1.0, 2.5, 4.0]);
        assert_eq!(t.mean_lengths, vec![10.0, 100.0]);
        assert_eq!(t.global_mean, 55.0);
        assert_eq!(estimate_output_length(&t, 3.0), 100.0);
        assert_eq!(estimate_output_length(&t, -50.0), 10.0);
        assert_eq!(estimate_output_length(&t, 1e9), 100.0);
    }

    #[test]
    fn verbosity_single_bin_is_global_mean() {
        let t = calibrate_verbosity("m", &four(), 1).unwrap();
        assert_eq!(t.mean_lengths, vec![55.0]);
        for s in [-10.0, 2.2, 99.0] {
            assert_eq!(estimate_output_length(&t, s), 55.0);
        }
    }

    #[test]
    fn verbosity_constant_lengths() {
        let recs: Vec<_> = (0..20).map(|k| rec(&format!("i{k}"), k as f64 * 0.7, 42.0)).collect();
        let t = calibrate_verbosity("m", &recs, 6).unwrap();
        assert!(t.mean_lengths.iter().all(|&l| l == 42.0));
    }

    #[test]
    fn verbosity_errors() {
        assert!(matches!(
            calibrate_verbosity("m", &four()[..2], 3),
            Err(Error::TooFew { minimum: 3, .. })
        ));
        let same = vec![rec("a", 1.0, 1.0), rec("b", 1.0, 2.0)];
        assert!(calibrate_verbosity("m", &same, 1).is_err());
        assert!(calibrate_verbosity("m", &four(), 0).is_err());
    }

    #[test]
    fn verbosity_ties_keep_edges_increasing() {
        let recs: Vec<_> = (0..12)
            .map(|k| rec(&format!("i{k:02}"), (k / 4) as f64, k as f64))
            .collect();
        let t = calibrate_verbosity("m", &recs, 6).unwrap();
        t.validate().unwrap();
        assert_eq!(t.bins(), 6);
    }

    proptest! {
        #[test]
        fn equal_frequency_bins_are_balanced(
            scores in prop::collection::btree_set(-1000i32..1000, 2..60),
            k in 1usize..8,
        ) {
            let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 10.0).collect();
            prop_assume!(scores.len() >= k);
            let recs: Vec<_> = scores
                .iter()
                .enumerate()
                .map(|(i, &s)| rec(&format!("i{i}"), s, s.abs()))
                .collect();
            let t = calibrate_verbosity("m", &recs, k).unwrap();
            let mut counts = vec![0usize; k];
            for r in &recs {
                counts[t.bin_of(r.score)] += 1;
            }
            let (mn, mx) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(mx - mn <= 1, "{counts:?}");
        }

        #[test]
        fn monotone_bin_means_give_monotone_lookup(
            scores in prop::collection::btree_set(-500i32..500, 4..50),
            k in 1usize..6,
            a in -10.0f64..10.0, b in -10.0f64..10.0,
        ) {
            let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 10.0).collect();
            prop_assume!(scores.len() >= k);
            let recs: Vec<_> = scores
                .iter()
                .enumerate()
                .map(|(i, &s)| rec(&format!("i{i}"), s, 200.0 + 3.0 * s))
                .collect();
            let t = calibrate_verbosity("m", &recs, k).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(estimate_output_length(&t, lo) <= estimate_output_length(&t, hi));
        }
    }

    fn meas(l: f64, s: f64) -> LatencyMeasurement {
        LatencyMeasurement {
            output_tokens: l,
            seconds: s,
        }
    }

    #[test]
    fn latency_exact_line() {
        let ms: Vec<_> = [0.0, 50.0, 120.0, 400.0].iter().map(|&l| meas(l, 0.5 + 0.01 * l)).collect();
        let p = calibrate_latency(&ms).unwrap();
        assert!((p.ttft - 0.5).abs() < 1e-12);
        assert!((p.tpot - 0.01).abs() < 1e-14);
        assert!(p.residual_rms < 1e-12);
        assert!(!p.clamped);
    }

    #[test]
    fn latency_two_points() {
        let p = calibrate_latency(&[meas(100.0, 1.5), meas(200.0, 2.5)]).unwrap();
        assert!((p.ttft - 0.5).abs() < 1e-12);
        assert!((p.tpot - 0.01).abs() < 1e-14);
    }

    #[test]
    fn latency_negative_slope_is_clamped() {
        let ms: Vec<_> = [10.0, 20.0, 30.0].iter().map(|&l| meas(l, 5.0 - 0.1 * l)).collect();
        let p = calibrate_latency(&ms).unwrap();
        assert_eq!(p.tpot, 0.0);
        assert!(p.clamped);
        assert!(p.residual_rms > 0.0);
    }

    #[test]
    fn latency_degenerate_design() {
        assert!(calibrate_latency(&[meas(5.0, 1.0), meas(5.0, 2.0)]).is_err());
        assert!(calibrate_latency(&[meas(5.0, 1.0)]).is_err());
    }

    #[test]
    fn latency_estimate_examples() {
        let p = LatencyProfile {
            ttft: 0.5,
            tpot: 0.01,
            residual_rms: 0.0,
            clamped: false,
        };
        assert_eq!(estimate_latency(&p, 0.0), 0.5);
        assert!((estimate_latency(&p, 100.0) - 1.5).abs() < 1e-12);
        let flat = LatencyProfile { tpot: 0.0, ..p };
        assert_eq!(estimate_latency(&flat, 1e6), 0.5);
    }

    proptest! {
        #[test]
        fn latency_is_affine_and_monotone(
            ttft in 0.0f64..5.0, tpot in 0.0f64..0.1, a in 0.0f64..1e4, b in 0.0f64..1e4,
        ) {
            let p = LatencyProfile { ttft, tpot, residual_rms: 0.0, clamped: false };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(estimate_latency(&p, lo) <= estimate_latency(&p, hi));
            let mid = estimate_latency(&p, 0.5 * (a + b));
            let avg = 0.5 * (estimate_latency(&p, a) + estimate_latency(&p, b));
            prop_assert!((mid - avg).abs() < 1e-9);
        }
    }

    #[test]
    fn measurement_csv_roundtrip() {
        let rows = vec![AnchorMeasurement {
            item_id: "q1".into(),
            score: 0.75,
            output_tokens: 120.0,
            latency_seconds: 1.7,
        }];
        let mut buf = Vec::new();
        write_measurements(&mut buf, &rows).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("item_id,score,output_tokens,latency_seconds"));
        assert_eq!(read_measurements(&buf[..]).unwrap(), rows);
    }
}
