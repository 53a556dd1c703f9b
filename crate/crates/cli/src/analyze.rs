use std::path::PathBuf;

use clap::{Args, ValueEnum};
use dualpath::routing::{
    anchor_align, gate_density, layer_bands, layer_profile, magnitude_max, read_trace, tag_profile, write_trace, ExternalTags,
    GateDensity, LayerBand, TraceHeader,
};
use dualpath::{AblationSpec, Error, Result, RoutingRecord};
use serde::Serialize;

use crate::run::{load_model, with_model};

#[derive(Args, Debug)]
pub struct TraceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Text to trace, as raw bytes.
    #[arg(long)]
    pub input: PathBuf,
    /// Receives trace.csv and trace.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Sequence length; defaults to the model's T_max. A trailing partial
    /// window is dropped unless it is the whole input.
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub max_sequences: Option<usize>,
    /// Trace under an ablation instead of the unmodified model.
    #[arg(long)]
    pub spec: Option<AblationSpec>,
    /// Sequences per forward pass.
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
}

pub fn trace(a: &TraceArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let bytes = std::fs::read(&a.input).map_err(|e| Error::Io { path: a.input.clone(), source: e })?;
    if bytes.is_empty() {
        return Err(Error::Input(format!("{} is empty", a.input.display())));
    }
    let seq_len = a.seq_len.unwrap_or_else(|| model.max_seq_len()).min(bytes.len());
    let mut windows: Vec<Vec<usize>> = bytes.chunks_exact(seq_len).map(|w| w.iter().map(|&b| b as usize).collect()).collect();
    if let Some(n) = a.max_sequences {
        windows.truncate(n);
    }
    let opts = a.spec.as_ref().map(AblationSpec::options).unwrap_or_default();
    let mut records: Vec<RoutingRecord> = Vec::new();
    let batch = a.batch.max(1);
    for (chunk, group) in windows.chunks(batch).enumerate() {
        let tokens: Vec<usize> = group.concat();
        let ids: Vec<u64> = (0..group.len()).map(|i| (chunk * batch + i) as u64).collect();
        let recs = with_model!(&model, m => m.trace(&tokens, seq_len, &ids, &opts)?.1);
        records.extend(recs);
    }
    let config = with_model!(&model, m => m.config.clone());
    let name = a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let header = TraceHeader::new(&config, &name, records.len())?;
    write_trace(&a.out_dir, &header, &records)?;
    eprintln!("{} records from {} sequences of {seq_len} tokens", records.len(), windows.len());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Report {
    /// Per-layer mean deep share and path cosine (CSV).
    Layers,
    /// Joint gate histograms, overall, per band and per layer (JSON).
    Density,
    /// Per-tag, per-layer mean deep share (CSV).
    Tags,
    /// Anchor-aligned deep-share difference of two trace sets (JSON).
    Anchor,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Trace directory; give two for `anchor` (first minus second).
    #[arg(long, required = true, num_args = 1..=2)]
    pub traces: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub report: Report,
    #[arg(long)]
    pub anchor_text: Option<String>,
    /// Offsets on each side of the anchor.
    #[arg(long, default_value_t = 8)]
    pub window: usize,
    /// External tags: `index<TAB>tag` or `start<TAB>end<TAB>tag` per line.
    #[arg(long)]
    pub tags_file: Option<PathBuf>,
    /// Histogram bins per axis.
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct BandDensity {
    band: LayerBand,
    density: GateDensity,
}

#[derive(Serialize)]
struct DensityReport {
    layers: usize,
    all: GateDensity,
    bands: Vec<BandDensity>,
    per_layer: Vec<GateDensity>,
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let err = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn load_one(a: &AnalyzeArgs) -> Result<(TraceHeader, Vec<RoutingRecord>)> {
    if a.traces.len() != 1 {
        return Err(Error::Input(format!("{:?} takes one trace directory", a.report)));
    }
    read_trace(&a.traces[0])
}

pub fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let text = match a.report {
        Report::Layers => {
            let (h, recs) = load_one(a)?;
            let (profile, warnings) = layer_profile(&recs, h.layers)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            let bands = layer_bands(h.layers);
            let band_of = |l: usize| bands.iter().find(|b| b.contains(l)).map(|b| b.name.clone()).unwrap_or_default();
            let rows = profile.iter().map(|p| {
                vec![p.layer.to_string(), band_of(p.layer), p.mean_rho_d.to_string(), p.mean_cos_dw.to_string(), p.count.to_string()]
            });
            csv_text(&["layer", "band", "mean_rho_d", "mean_cos_dw", "count"], rows)?
        }
        Report::Density => {
            let (h, recs) = load_one(a)?;
            let mag = magnitude_max(&recs);
            let all = gate_density(&recs, None, a.bins, mag)?;
            let bands = layer_bands(h.layers)
                .into_iter()
                .map(|band| Ok(BandDensity { density: gate_density(&recs, Some(&band), a.bins, mag)?, band }))
                .collect::<Result<Vec<_>>>()?;
            let per_layer = (0..h.layers)
                .map(|l| {
                    let band = LayerBand { name: format!("L{l}"), first: l, end: l + 1 };
                    gate_density(&recs, Some(&band), a.bins, mag)
                })
                .collect::<Result<Vec<_>>>()?;
            serde_json::to_string_pretty(&DensityReport { layers: h.layers, all, bands, per_layer })? + "\n"
        }
        Report::Tags => {
            let (_, recs) = load_one(a)?;
            let ext = a.tags_file.as_deref().map(ExternalTags::load).transpose()?;
            let rows = tag_profile(&recs, ext.as_ref()).into_iter().map(|p| {
                vec![
                    p.tag,
                    p.layer.to_string(),
                    p.count.to_string(),
                    p.mean_rho_d.to_string(),
                    p.mean_g_d.to_string(),
                    p.mean_g_w.to_string(),
                ]
            });
            csv_text(&["tag", "layer", "count", "mean_rho_d", "mean_g_d", "mean_g_w"], rows)?
        }
        Report::Anchor => {
            let [da, db] = a.traces.as_slice() else {
                return Err(Error::Input("anchor takes two trace directories".into()));
            };
            let anchor = a
                .anchor_text
                .as_deref()
                .ok_or_else(|| Error::Input("anchor needs --anchor-text".into()))?;
            let (_, ra) = read_trace(da)?;
            let (_, rb) = read_trace(db)?;
            let diff = anchor_align(&ra, &rb, anchor, a.window)?;
            eprintln!(
                "aligned {} + {} sequences; excluded {} + {} without the anchor",
                diff.anchors_a.len(),
                diff.anchors_b.len(),
                diff.excluded_a,
                diff.excluded_b
            );
            serde_json::to_string_pretty(&diff)? + "\n"
        }
    };
    crate::emit(a.out.as_deref(), &text)
}
