//! Routing read-outs: deep share, path cosine, per-layer profiles, gate
//! density histograms, token tagging and anchor-aligned differencing, plus
//! the trace CSV/JSON files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::bytes::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::block::TokenRoute;
use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Deep share with a flag for the zero-denominator convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeepShare {
    pub rho_d: f64,
    pub degenerate: bool,
}

/// `rho_d = g_d|Δd| / (g_d|Δd| + g_w|Δw|)`, or 0.5 when both terms vanish.
pub fn deep_share(g_d: f64, g_w: f64, norm_dd: f64, norm_dw: f64) -> DeepShare {
    let a = g_d * norm_dd;
    let denom = a + g_w * norm_dw;
    if denom == 0.0 {
        DeepShare { rho_d: 0.5, degenerate: true }
    } else {
        DeepShare { rho_d: a / denom, degenerate: false }
    }
}

/// Cosine between the two path updates; 0 when either is zero.
pub fn path_cosine(delta_d: &[f64], delta_w: &[f64]) -> f64 {
    let dot: f64 = delta_d.iter().zip(delta_w).map(|(a, b)| a * b).sum();
    let na = delta_d.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = delta_w.iter().map(|b| b * b).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// One row of a routing trace.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingRecord {
    pub sequence_id: u64,
    pub layer: usize,
    pub token_index: usize,
    pub token_id: usize,
    pub g_d: f64,
    pub g_w: f64,
    pub norm_dd: f64,
    pub norm_dw: f64,
    pub cos_dw: f64,
    pub rho_d: f64,
    /// Not stored in the CSV; recomputed from gates and norms on load.
    pub degenerate: bool,
    pub q_steps: Vec<f64>,
}

impl RoutingRecord {
    pub fn from_route(sequence_id: u64, layer: usize, token_index: usize, token_id: usize, r: &TokenRoute) -> Self {
        RoutingRecord {
            sequence_id,
            layer,
            token_index,
            token_id,
            g_d: r.g_d,
            g_w: r.g_w,
            norm_dd: r.norm_dd,
            norm_dw: r.norm_dw,
            cos_dw: r.cos_dw,
            rho_d: r.rho_d,
            degenerate: r.degenerate,
            q_steps: r.q_steps.clone(),
        }
    }

    /// `rho_d` recomputed from the stored gates and norms.
    pub fn recomputed_share(&self) -> DeepShare {
        deep_share(self.g_d, self.g_w, self.norm_dd, self.norm_dw)
    }
}

/// Mean deep share and path cosine of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub layer: usize,
    pub mean_rho_d: f64,
    pub mean_cos_dw: f64,
    pub count: usize,
}

/// Per-layer means over every record. Layers with no records are left out
/// and reported in the returned warnings.
pub fn layer_profile(records: &[RoutingRecord], layers: usize) -> Result<(Vec<LayerProfile>, Vec<String>)> {
    if records.is_empty() {
        return Err(Error::Input("layer profile of an empty trace".into()));
    }
    let mut sums = vec![(0.0, 0.0, 0usize); layers];
    for r in records {
        let s = sums
            .get_mut(r.layer)
            .ok_or_else(|| Error::Input(format!("record for layer {} in a {layers}-layer trace", r.layer)))?;
        s.0 += r.rho_d;
        s.1 += r.cos_dw;
        s.2 += 1;
    }
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for (layer, (rho, cos, n)) in sums.into_iter().enumerate() {
        if n == 0 {
            warnings.push(format!("layer {layer} has no records"));
            continue;
        }
        out.push(LayerProfile {
            layer,
            mean_rho_d: rho / n as f64,
            mean_cos_dw: cos / n as f64,
            count: n,
        });
    }
    Ok((out, warnings))
}

/// A contiguous range of layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBand {
    pub name: String,
    pub first: usize,
    /// Exclusive.
    pub end: usize,
}

impl LayerBand {
    pub fn contains(&self, layer: usize) -> bool {
        (self.first..self.end).contains(&layer)
    }
}

/// Early / middle / late bands. Sixteen layers split 0-4, 5-9, 10-15; other
/// depths split into equal thirds with the remainder going to the middle.
pub fn layer_bands(layers: usize) -> Vec<LayerBand> {
    let (a, b) = if layers == 16 {
        (5, 10)
    } else {
        let third = layers / 3;
        (third, layers - third)
    };
    [("early", 0, a), ("middle", a, b), ("late", b, layers)]
        .into_iter()
        .map(|(name, first, end)| LayerBand { name: name.into(), first, end })
        .collect()
}

/// Joint gate histograms over `bins × bins` cells. `counts[i * bins + j]`
/// counts records whose `g_d` falls in bin `i` and `g_w` in bin `j`;
/// `magnitude` does the same on `log(1 + g·|Δ|)` axes over `[0, mag_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDensity {
    pub bins: usize,
    pub mag_max: f64,
    pub total: u64,
    pub counts: Vec<u64>,
    pub magnitude: Vec<u64>,
}

fn bin(v: f64, hi: f64, bins: usize) -> usize {
    if !(v > 0.0) || hi <= 0.0 {
        return 0;
    }
    ((v / hi * bins as f64) as usize).min(bins - 1)
}

/// Magnitude coordinates `(log(1 + g_w|Δw|), log(1 + g_d|Δd|))`.
pub fn magnitude_axes(r: &RoutingRecord) -> (f64, f64) {
    ((r.g_w * r.norm_dw).ln_1p(), (r.g_d * r.norm_dd).ln_1p())
}

/// Largest magnitude coordinate over a record set, for a shared axis range.
pub fn magnitude_max(records: &[RoutingRecord]) -> f64 {
    records
        .iter()
        .map(|r| {
            let (w, d) = magnitude_axes(r);
            w.max(d)
        })
        .fold(0.0, f64::max)
}

/// Histograms of the records whose layer is accepted by `band` (all records
/// when `None`). Magnitudes above `mag_max` land in the last bin.
pub fn gate_density(records: &[RoutingRecord], band: Option<&LayerBand>, bins: usize, mag_max: f64) -> Result<GateDensity> {
    if bins < 2 {
        return Err(Error::Input(format!("gate density needs at least 2 bins, got {bins}")));
    }
    if !(mag_max >= 0.0) {
        return Err(Error::Input(format!("magnitude range {mag_max} must be non-negative")));
    }
    let mut d = GateDensity {
        bins,
        mag_max,
        total: 0,
        counts: vec![0; bins * bins],
        magnitude: vec![0; bins * bins],
    };
    for r in records.iter().filter(|r| band.map_or(true, |b| b.contains(r.layer))) {
        d.counts[bin(r.g_d, 1.0, bins) * bins + bin(r.g_w, 1.0, bins)] += 1;
        let (mw, md) = magnitude_axes(r);
        d.magnitude[bin(md, mag_max, bins) * bins + bin(mw, mag_max, bins)] += 1;
        d.total += 1;
    }
    Ok(d)
}

/// Built-in token classes.
pub const ARITH: &str = "ARITH";
pub const SPACE: &str = "SPACE";
pub const PUNCT: &str = "PUNCT";
pub const WORD: &str = "WORD";
pub const OTHER: &str = "OTHER";

static ARITH_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"####|<<|>>|[0-9]+|[+\-*/=]|(?-u:\xE2\x88\x92|\xC3\x97|\xC3\xB7)").expect("valid regex"));

/// A tagged half-open byte span of the decoded text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagSpan {
    pub start: usize,
    pub end: usize,
    pub tag: String,
}

fn char_class(c: char) -> &'static str {
    if c.is_whitespace() {
        SPACE
    } else if c.is_alphabetic() {
        WORD
    } else if c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_control() && !c.is_ascii()) {
        PUNCT
    } else {
        OTHER
    }
}

fn push_span(spans: &mut Vec<TagSpan>, start: usize, end: usize, tag: &str) {
    if let Some(last) = spans.last_mut() {
        if last.tag == tag && last.end == start {
            last.end = end;
            return;
        }
    }
    spans.push(TagSpan { start, end, tag: tag.to_string() });
}

fn class_spans(text: &[u8], offset: usize, spans: &mut Vec<TagSpan>) {
    let mut pos = offset;
    for chunk in text.utf8_chunks() {
        for (i, c) in chunk.valid().char_indices() {
            push_span(spans, pos + i, pos + i + c.len_utf8(), char_class(c));
        }
        pos += chunk.valid().len();
        if !chunk.invalid().is_empty() {
            push_span(spans, pos, pos + chunk.invalid().len(), OTHER);
            pos += chunk.invalid().len();
        }
    }
}

/// Rule tagging of a text: arithmetic matches first, then runs of
/// whitespace, punctuation, letters and anything else.
pub fn rule_spans(text: &[u8]) -> Vec<TagSpan> {
    let mut spans = Vec::new();
    let mut cursor = 0;
    for m in ARITH_RE.find_iter(text) {
        class_spans(&text[cursor..m.start()], cursor, &mut spans);
        push_span(&mut spans, m.start(), m.end(), ARITH);
        cursor = m.end();
    }
    class_spans(&text[cursor..], cursor, &mut spans);
    spans
}

/// Rule tag of a single token's text on its own.
pub fn tag_text(token: &[u8]) -> &'static str {
    if token.is_empty() {
        return OTHER;
    }
    if ARITH_RE.find_iter(token).map(|m| m.len()).sum::<usize>() == token.len() {
        return ARITH;
    }
    let spans = rule_spans(token);
    if spans.len() == 1 {
        match spans[0].tag.as_str() {
            SPACE => SPACE,
            PUNCT => PUNCT,
            WORD => WORD,
            _ => OTHER,
        }
    } else {
        OTHER
    }
}

/// External tags: either per token index or per byte span of the decoded text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExternalTags {
    pub by_index: BTreeMap<usize, String>,
    pub spans: Vec<TagSpan>,
}

impl ExternalTags {
    /// Lines are `index<TAB>tag` or `start<TAB>end<TAB>tag`; blank lines and
    /// lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = ExternalTags::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("tag file line {}: {what}: {line:?}", n + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad("expected an integer"));
            match fields.as_slice() {
                [idx, tag] if !tag.trim().is_empty() => {
                    out.by_index.insert(num(idx)?, tag.trim().to_string());
                }
                [start, end, tag] if !tag.trim().is_empty() => {
                    let (start, end) = (num(start)?, num(end)?);
                    if end <= start {
                        return Err(bad("empty span"));
                    }
                    out.spans.push(TagSpan { start, end, tag: tag.trim().to_string() });
                }
                _ => return Err(bad("expected 2 or 3 tab-separated fields")),
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Tag of one token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTag {
    pub token_index: usize,
    pub tag: String,
}

fn largest_overlap<'a>(spans: &'a [TagSpan], start: usize, end: usize) -> Option<&'a str> {
    let mut best: Option<(usize, &str)> = None;
    for s in spans {
        let overlap = end.min(s.end).saturating_sub(start.max(s.start));
        if overlap > 0 && best.map_or(true, |(b, _)| overlap > b) {
            best = Some((overlap, &s.tag));
        }
    }
    best.map(|(_, t)| t)
}

/// One tag per token. Each token takes the rule tag of the character span
/// it overlaps most; external tags then override by index or by largest
/// span overlap.
pub fn tag_tokens(tokens: &[Vec<u8>], external: Option<&ExternalTags>) -> Vec<TokenTag> {
    let text: Vec<u8> = tokens.concat();
    let rules = rule_spans(&text);
    let mut start = 0;
    tokens
        .iter()
        .enumerate()
        .map(|(i, tok)| {
            let end = start + tok.len();
            let mut tag = largest_overlap(&rules, start, end)
                .map(str::to_string)
                .unwrap_or_else(|| OTHER.to_string());
            if let Some(ext) = external {
                if let Some(t) = largest_overlap(&ext.spans, start, end) {
                    tag = t.to_string();
                }
                if let Some(t) = ext.by_index.get(&i) {
                    tag = t.clone();
                }
            }
            start = end;
            TokenTag { token_index: i, tag }
        })
        .collect()
}

/// Byte-level decoding of a token id.
pub fn decode_byte_token(id: usize) -> Vec<u8> {
    if id < 256 {
        vec![id as u8]
    } else {
        Vec::new()
    }
}

/// Records grouped by sequence id, in order of first appearance.
pub fn group_sequences(records: &[RoutingRecord]) -> Vec<(u64, Vec<&RoutingRecord>)> {
    let mut order: Vec<u64> = Vec::new();
    let mut groups: BTreeMap<u64, Vec<&RoutingRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry(r.sequence_id)
            .or_insert_with(|| {
                order.push(r.sequence_id);
                Vec::new()
            })
            .push(r);
    }
    order
        .into_iter()
        .map(|id| {
            let g = groups.remove(&id).unwrap_or_default();
            (id, g)
        })
        .collect()
}

/// Token ids of a sequence in position order, taken from its layer-0 records.
pub fn sequence_tokens(records: &[&RoutingRecord]) -> Vec<usize> {
    let mut toks: Vec<(usize, usize)> = records
        .iter()
        .filter(|r| r.layer == 0)
        .map(|r| (r.token_index, r.token_id))
        .collect();
    toks.sort_unstable();
    toks.into_iter().map(|(_, t)| t).collect()
}

/// Index of the token containing the first byte of the first occurrence of
/// `anchor` in the decoded sequence.
pub fn find_anchor(tokens: &[Vec<u8>], anchor: &[u8]) -> Option<usize> {
    if anchor.is_empty() {
        return None;
    }
    let text = tokens.concat();
    let at = text.windows(anchor.len()).position(|w| w == anchor)?;
    let mut end = 0;
    tokens.iter().position(|t| {
        end += t.len();
        at < end
    })
}

/// Anchor-aligned deep-share difference between two trace sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorDiff {
    pub anchor: String,
    pub window: usize,
    pub offsets: Vec<i64>,
    /// `diff[layer][offset]`; `None` where either side has no coverage.
    pub diff: Vec<Vec<Option<f64>>>,
    pub mean_a: Vec<Vec<Option<f64>>>,
    pub mean_b: Vec<Vec<Option<f64>>>,
    /// `(sequence_id, anchor token index)` pairs that were aligned.
    pub anchors_a: Vec<(u64, usize)>,
    pub anchors_b: Vec<(u64, usize)>,
    pub excluded_a: usize,
    pub excluded_b: usize,
}

type OffsetMeans = (Vec<Vec<Option<f64>>>, Vec<(u64, usize)>, usize);

fn aligned_means(records: &[RoutingRecord], layers: usize, anchor: &[u8], window: usize) -> OffsetMeans {
    let width = 2 * window + 1;
    let mut sums = vec![vec![(0.0, 0usize); width]; layers];
    let mut anchors = Vec::new();
    let mut excluded = 0;
    for (seq, recs) in group_sequences(records) {
        let toks: Vec<Vec<u8>> = sequence_tokens(&recs).into_iter().map(decode_byte_token).collect();
        let Some(pos) = find_anchor(&toks, anchor) else {
            excluded += 1;
            continue;
        };
        anchors.push((seq, pos));
        for r in recs {
            let off = r.token_index as i64 - pos as i64;
            if off.unsigned_abs() as usize <= window && r.layer < layers {
                let cell = &mut sums[r.layer][(off + window as i64) as usize];
                cell.0 += r.rho_d;
                cell.1 += 1;
            }
        }
    }
    let means = sums
        .into_iter()
        .map(|row| row.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect())
        .collect();
    (means, anchors, excluded)
}

/// Mean `rho_d` per layer and offset around the first occurrence of
/// `anchor` in each byte-level sequence, as `a - b`. Sequences without the
/// anchor are excluded and counted.
pub fn anchor_align(a: &[RoutingRecord], b: &[RoutingRecord], anchor: &str, window: usize) -> Result<AnchorDiff> {
    if anchor.is_empty() {
        return Err(Error::Input("anchor text is empty".into()));
    }
    let layers = a.iter().chain(b).map(|r| r.layer + 1).max().unwrap_or(0);
    let (mean_a, anchors_a, excluded_a) = aligned_means(a, layers, anchor.as_bytes(), window);
    let (mean_b, anchors_b, excluded_b) = aligned_means(b, layers, anchor.as_bytes(), window);
    let diff = mean_a
        .iter()
        .zip(&mean_b)
        .map(|(ra, rb)| {
            ra.iter()
                .zip(rb)
                .map(|(x, y)| match (x, y) {
                    (Some(x), Some(y)) => Some(x - y),
                    _ => None,
                })
                .collect()
        })
        .collect();
    Ok(AnchorDiff {
        anchor: anchor.to_string(),
        window,
        offsets: (-(window as i64)..=window as i64).collect(),
        diff,
        mean_a,
        mean_b,
        anchors_a,
        anchors_b,
        excluded_a,
        excluded_b,
    })
}

/// Mean gates and deep share of one (tag, layer) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagProfile {
    pub tag: String,
    pub layer: usize,
    pub count: usize,
    pub mean_rho_d: f64,
    pub mean_g_d: f64,
    pub mean_g_w: f64,
}

/// Per-tag, per-layer means over byte-level traces, sorted by tag then
/// layer. External tag indices and spans are relative to each sequence.
pub fn tag_profile(records: &[RoutingRecord], external: Option<&ExternalTags>) -> Vec<TagProfile> {
    let mut cells: BTreeMap<(String, usize), (usize, f64, f64, f64)> = BTreeMap::new();
    for (_, recs) in group_sequences(records) {
        let toks: Vec<Vec<u8>> = sequence_tokens(&recs).into_iter().map(decode_byte_token).collect();
        let tags = tag_tokens(&toks, external);
        for r in recs {
            let Some(t) = tags.get(r.token_index) else { continue };
            let c = cells.entry((t.tag.clone(), r.layer)).or_default();
            c.0 += 1;
            c.1 += r.rho_d;
            c.2 += r.g_d;
            c.3 += r.g_w;
        }
    }
    cells
        .into_iter()
        .map(|((tag, layer), (n, rho, gd, gw))| {
            let n_f = n as f64;
            TagProfile { tag, layer, count: n, mean_rho_d: rho / n_f, mean_g_d: gd / n_f, mean_g_w: gw / n_f }
        })
        .collect()
}

/// Sidecar metadata of a trace CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub config_hash: String,
    #[serde(rename = "K")]
    pub loops: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub corpus: String,
    pub columns: Vec<String>,
    pub records: usize,
    pub model: ModelConfig,
}

/// SHA-256 of the model config's canonical JSON.
pub fn config_hash(config: &ModelConfig) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub const TRACE_CSV: &str = "trace.csv";
pub const TRACE_JSON: &str = "trace.json";

/// Column names for a `K`-step model.
pub fn trace_columns(loops: usize) -> Vec<String> {
    let mut cols: Vec<String> = [
        "sequence_id", "layer", "token_index", "token_id", "g_d", "g_w", "norm_dd", "norm_dw", "cos_dw", "rho_d",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend((1..loops).map(|k| format!("q_{k}")));
    cols
}

impl TraceHeader {
    pub fn new(config: &ModelConfig, corpus: &str, records: usize) -> Result<Self> {
        let loops = config.variant.loops();
        Ok(TraceHeader {
            config_hash: config_hash(config)?,
            loops,
            layers: config.layers(),
            corpus: corpus.to_string(),
            columns: trace_columns(loops),
            records,
            model: config.clone(),
        })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Writes `trace.csv` and `trace.json` into `dir`.
pub fn write_trace(dir: &Path, header: &TraceHeader, records: &[RoutingRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(TRACE_CSV);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_err(&csv_path, e))?;
    w.write_record(&header.columns).map_err(|e| csv_err(&csv_path, e))?;
    let q_cols = header.loops.saturating_sub(1);
    for r in records {
        if r.q_steps.len() != q_cols {
            return Err(Error::Input(format!(
                "record has {} router weights, header expects {q_cols}",
                r.q_steps.len()
            )));
        }
        let mut row = vec![
            r.sequence_id.to_string(),
            r.layer.to_string(),
            r.token_index.to_string(),
            r.token_id.to_string(),
        ];
        row.extend([r.g_d, r.g_w, r.norm_dd, r.norm_dw, r.cos_dw, r.rho_d].iter().map(f64::to_string));
        row.extend(r.q_steps.iter().map(f64::to_string));
        w.write_record(&row).map_err(|e| csv_err(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let json_path = dir.join(TRACE_JSON);
    let json = serde_json::to_string_pretty(header)?;
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))
}

/// Reads a trace directory written by [`write_trace`].
pub fn read_trace(dir: &Path) -> Result<(TraceHeader, Vec<RoutingRecord>)> {
    let json_path = dir.join(TRACE_JSON);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: TraceHeader = serde_json::from_str(&text)?;
    let csv_path = dir.join(TRACE_CSV);
    let mut rd = csv::Reader::from_path(&csv_path).map_err(|e| csv_err(&csv_path, e))?;
    let cols: Vec<String> = rd
        .headers()
        .map_err(|e| csv_err(&csv_path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if cols != header.columns {
        return Err(Error::Format(format!(
            "{}: columns {cols:?} do not match header {:?}",
            csv_path.display(),
            header.columns
        )));
    }
    let mut records = Vec::new();
    for (line, row) in rd.records().enumerate() {
        let row = row.map_err(|e| csv_err(&csv_path, e))?;
        let bad = |c: usize| Error::Format(format!("{} row {}: bad value in column {}", csv_path.display(), line + 2, cols[c]));
        let int = |c: usize| row[c].parse::<u64>().map_err(|_| bad(c));
        let float = |c: usize| row[c].parse::<f64>().map_err(|_| bad(c));
        let mut r = RoutingRecord {
            sequence_id: int(0)?,
            layer: int(1)? as usize,
            token_index: int(2)? as usize,
            token_id: int(3)? as usize,
            g_d: float(4)?,
            g_w: float(5)?,
            norm_dd: float(6)?,
            norm_dw: float(7)?,
            cos_dw: float(8)?,
            rho_d: float(9)?,
            degenerate: false,
            q_steps: (10..cols.len()).map(float).collect::<Result<_>>()?,
        };
        r.degenerate = r.recomputed_share().degenerate;
        records.push(r);
    }
    if records.len() != header.records {
        return Err(Error::Format(format!(
            "{}: {} records, header says {}",
            csv_path.display(),
            records.len(),
            header.records
        )));
    }
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(layer: usize, token_index: usize, token_id: usize, rho: f64) -> RoutingRecord {
        RoutingRecord {
            sequence_id: 0,
            layer,
            token_index,
            token_id,
            g_d: 0.5,
            g_w: 0.5,
            norm_dd: rho,
            norm_dw: 1.0 - rho,
            cos_dw: 0.0,
            rho_d: rho,
            degenerate: false,
            q_steps: vec![],
        }
    }

    #[test]
    fn deep_share_examples() {
        assert_eq!(deep_share(0.5, 0.5, 2.0, 0.0).rho_d, 1.0);
        assert_eq!(deep_share(0.2, 0.8, 4.0, 1.0).rho_d, 0.5);
        let z = deep_share(0.0, 0.0, 1.0, 1.0);
        assert_eq!((z.rho_d, z.degenerate), (0.5, true));
        assert!(!deep_share(0.5, 0.5, 1.0, 1.0).degenerate);
    }

    proptest! {
        #[test]
        fn deep_share_is_scale_invariant(gd in 0.0f64..1.0, gw in 0.0f64..1.0, a in 0.0f64..10.0, b in 0.0f64..10.0, c in 1e-3f64..1e3) {
            let base = deep_share(gd, gw, a, b).rho_d;
            let scaled = deep_share(gd, gw, a * c, b * c).rho_d;
            prop_assert!((base - scaled).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&base));
        }
    }

    #[test]
    fn path_cosine_examples() {
        assert!((path_cosine(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-15);
        assert_eq!(path_cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(path_cosine(&[1.0, 0.0], &[-1.0, 0.0]), -1.0);
        assert_eq!(path_cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn profile_means() {
        let recs = vec![rec(0, 0, 0, 0.2), rec(0, 1, 0, 0.6), rec(1, 0, 0, 1.0)];
        let (p, w) = layer_profile(&recs, 2).unwrap();
        assert!(w.is_empty());
        assert_eq!(p.len(), 2);
        assert!((p[0].mean_rho_d - 0.4).abs() < 1e-15);
        assert_eq!(p[1].mean_rho_d, 1.0);
        let (p, w) = layer_profile(&recs, 3).unwrap();
        assert_eq!((p.len(), w.len()), (2, 1));
        assert!(layer_profile(&[], 2).is_err());
    }

    #[test]
    fn bands() {
        let b = layer_bands(16);
        assert_eq!((b[0].first, b[0].end, b[1].end, b[2].end), (0, 5, 10, 16));
        let b = layer_bands(4);
        assert_eq!((b[0].end, b[1].end, b[2].end), (1, 3, 4));
        let b = layer_bands(8);
        assert_eq!((b[0].end, b[1].end), (2, 6));
        let b = layer_bands(9);
        assert_eq!((b[0].end, b[1].end), (3, 6));
    }

    #[test]
    fn density_single_cell_and_mass() {
        let recs: Vec<_> = (0..10).map(|i| rec(i % 4, i, 0, 0.5)).collect();
        let d = gate_density(&recs, None, 4, 1.0).unwrap();
        assert_eq!(d.total, 10);
        assert_eq!(d.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(d.counts.iter().sum::<u64>(), 10);
        assert_eq!(d.magnitude.iter().sum::<u64>(), 10);
        assert!(gate_density(&recs, None, 1, 1.0).is_err());
    }

    #[test]
    fn tags() {
        assert_eq!(tag_text(b"15"), ARITH);
        assert_eq!(tag_text(b"<<"), ARITH);
        assert_eq!(tag_text(b"####"), ARITH);
        assert_eq!(tag_text(b"the"), WORD);
        assert_eq!(tag_text(b"  "), SPACE);
        assert_eq!(tag_text(b"?!"), PUNCT);
        assert_eq!(tag_text(b"a1"), OTHER);
        let toks: Vec<Vec<u8>> = b"x <<3+4=7>> ok".iter().map(|&b| vec![b]).collect();
        let tags: Vec<String> = tag_tokens(&toks, None).into_iter().map(|t| t.tag).collect();
        assert_eq!(tags[0], WORD);
        assert_eq!(tags[1], SPACE);
        assert!(tags[2..11].iter().all(|t| t == ARITH));
        assert_eq!(tags[12], WORD);
        // A lone '<' is punctuation, not part of "<<".
        assert_eq!(tag_tokens(&[b"<".to_vec(), b"a".to_vec()], None)[0].tag, PUNCT);
    }

    #[test]
    fn external_tags_override() {
        let ext = ExternalTags::parse("# pos tags\n0\tNOUN\n2\t4\tVERB\n").unwrap();
        let toks: Vec<Vec<u8>> = vec![b"ab".to_vec(), b"c".to_vec(), b"de".to_vec(), b"f".to_vec()];
        let tags: Vec<String> = tag_tokens(&toks, Some(&ext)).into_iter().map(|t| t.tag).collect();
        assert_eq!(tags, vec!["NOUN", "VERB", "VERB", "WORD"]);
        assert!(ExternalTags::parse("x\tNOUN").is_err());
        assert!(ExternalTags::parse("1 2 3").is_err());
        assert!(ExternalTags::parse("3\t1\tX").is_err());
    }

    #[test]
    fn anchors() {
        let toks: Vec<Vec<u8>> = b"Q: hi Answer: 4".iter().map(|&b| vec![b]).collect();
        assert_eq!(find_anchor(&toks, b"Answer"), Some(6));
        assert_eq!(find_anchor(&toks, b"nope"), None);
        let wide = vec![b"ab".to_vec(), b"cd".to_vec()];
        assert_eq!(find_anchor(&wide, b"bc"), Some(0));
    }

    #[test]
    fn anchor_align_identity_and_window_zero() {
        let mut recs = Vec::new();
        for (i, &b) in b"xxAyy".iter().enumerate() {
            recs.push(rec(0, i, b as usize, i as f64 / 10.0));
        }
        let d = anchor_align(&recs, &recs, "A", 2).unwrap();
        assert!(d.diff[0].iter().all(|v| *v == Some(0.0)));
        let d = anchor_align(&recs, &recs, "A", 0).unwrap();
        assert_eq!(d.offsets, vec![0]);
        assert_eq!(d.diff[0].len(), 1);
        let d = anchor_align(&recs, &recs, "zz", 1).unwrap();
        assert_eq!((d.excluded_a, d.excluded_b), (1, 1));
        assert!(d.diff[0].iter().all(Option::is_none));
    }
}
