//! Attention-map extraction and heatmap export.

use std::fmt::Write as _;
use std::path::Path;

use crate::autograd::Tensor;
use crate::dsp::ProcessedWindow;
use crate::model::{forward, ForwardOptions, Mode, ModelConfig, ModelError, ModelParams};

const CELL_PX: usize = 4;
const TRACE_HEIGHT_PX: usize = 120;

#[derive(Debug, thiserror::Error)]
pub enum AttentionError {
    #[error("layer {layer} out of range for {num_layers} layers")]
    LayerOutOfRange { layer: usize, num_layers: usize },
    #[error("head {head} out of range for {num_heads} heads")]
    HeadOutOfRange { head: usize, num_heads: usize },
    #[error("malformed attention CSV at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Single(usize),
    Mean,
}

impl HeadMode {
    pub fn label(&self) -> String {
        match self {
            HeadMode::Single(h) => format!("h{h}"),
            HeadMode::Mean => "mean".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Region {
    /// Patch tokens only, class token excluded.
    #[default]
    Patch,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Pgm,
    Svg,
    Csv,
}

impl ExportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ExportFormat::Pgm => "pgm",
            ExportFormat::Svg => "svg",
            ExportFormat::Csv => "csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub head_mode: HeadMode,
    /// `[(N+1) x (N+1)]`, row = query token, column = key token.
    pub matrix: Vec<Vec<f64>>,
}

impl AttentionMap {
    pub fn patch_submatrix(&self) -> Vec<Vec<f64>> {
        self.matrix[1..].iter().map(|r| r[1..].to_vec()).collect()
    }

    /// Class-token query attention over the patch keys.
    pub fn class_row(&self) -> Vec<f64> {
        self.matrix[0][1..].to_vec()
    }

    pub fn region(&self, region: Region) -> Vec<Vec<f64>> {
        match region {
            Region::Patch => self.patch_submatrix(),
            Region::Full => self.matrix.clone(),
        }
    }
}

/// Selects one layer from `[num_heads, S, S]` per-layer maps.
pub fn select_map(maps: &[Tensor], layer: usize, head_mode: HeadMode) -> Result<AttentionMap, AttentionError> {
    let t = maps.get(layer).ok_or(AttentionError::LayerOutOfRange {
        layer,
        num_layers: maps.len(),
    })?;
    let (heads, s) = (t.shape()[0], t.shape()[1]);
    let data = t.data();
    let cell = |h: usize, i: usize, j: usize| data[(h * s + i) * s + j];
    let matrix = match head_mode {
        HeadMode::Single(h) if h >= heads => {
            return Err(AttentionError::HeadOutOfRange { head: h, num_heads: heads });
        }
        HeadMode::Single(h) => (0..s).map(|i| (0..s).map(|j| cell(h, i, j)).collect()).collect(),
        HeadMode::Mean => (0..s)
            .map(|i| {
                (0..s)
                    .map(|j| (0..heads).map(|h| cell(h, i, j)).sum::<f64>() / heads as f64)
                    .collect()
            })
            .collect(),
    };
    Ok(AttentionMap {
        layer,
        head_mode,
        matrix,
    })
}

/// Eval-mode forward pass returning one layer's softmaxed attention.
pub fn extract_attention(
    window: &ProcessedWindow,
    wide: &[f64],
    params: &ModelParams,
    config: &ModelConfig,
    layer: usize,
    head_mode: HeadMode,
) -> Result<AttentionMap, AttentionError> {
    if layer >= config.num_layers {
        return Err(AttentionError::LayerOutOfRange {
            layer,
            num_layers: config.num_layers,
        });
    }
    let options = ForwardOptions {
        mode: Mode::Eval,
        dropout_seed: 0,
        capture_attention: true,
    };
    let out = forward(params, window, wide, config, &options)?;
    select_map(&out.attention_maps.expect("attention was requested"), layer, head_mode)
}

fn to_gray(values: &[Vec<f64>]) -> Vec<Vec<u8>> {
    let (lo, hi) = values
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    values
        .iter()
        .map(|r| {
            r.iter()
                .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
                .collect()
        })
        .collect()
}

/// Binary 8-bit PGM, min-max scaled over the chosen region.
pub fn to_pgm(map: &AttentionMap, region: Region) -> Vec<u8> {
    let gray = to_gray(&map.region(region));
    let (h, w) = (gray.len(), gray.first().map_or(0, Vec::len));
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for row in gray {
        out.extend(row);
    }
    out
}

/// Heatmap panel above the lead trace; one cell spans `d_patch` samples.
pub fn to_svg(map: &AttentionMap, region: Region, trace: &[f64], d_patch: usize) -> String {
    let gray = to_gray(&map.region(region));
    let n = gray.len();
    let side = n * CELL_PX;
    let height = side + TRACE_HEIGHT_PX;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{side}" height="{height}" viewBox="0 0 {side} {height}">"#
    );
    let _ = writeln!(s, r#"<g id="heatmap">"#);
    for (i, row) in gray.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{CELL_PX}" height="{CELL_PX}" fill="rgb({v},{v},{v})"/>"#,
                j * CELL_PX,
                i * CELL_PX
            );
        }
    }
    let _ = writeln!(s, "</g>");
    let x0 = if region == Region::Full { CELL_PX as f64 } else { 0.0 };
    let peak = trace.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mid = side as f64 + TRACE_HEIGHT_PX as f64 / 2.0;
    let amp = TRACE_HEIGHT_PX as f64 * 0.45;
    let mut points = String::new();
    for (k, v) in trace.iter().enumerate() {
        let x = x0 + k as f64 * CELL_PX as f64 / d_patch as f64;
        let y = mid - if peak > 0.0 { v / peak * amp } else { 0.0 };
        if k > 0 {
            points.push(' ');
        }
        let _ = write!(points, "{x:.2},{y:.2}");
    }
    let _ = writeln!(
        s,
        r#"<g id="trace"><polyline fill="none" stroke="black" stroke-width="1" points="{points}"/></g>"#
    );
    let _ = writeln!(s, "</svg>");
    s
}

/// Raw values, nine significant digits.
pub fn to_csv(map: &AttentionMap, region: Region) -> String {
    let mut s = String::new();
    for row in map.region(region) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<Vec<f64>>, AttentionError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| AttentionError::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })
        })
        .collect()
}

/// `<record_id>_L<layer>_<head>.<ext>`
pub fn file_name(record_id: &str, map: &AttentionMap, format: ExportFormat) -> String {
    format!(
        "{record_id}_L{}_{}.{}",
        map.layer,
        map.head_mode.label(),
        format.extension()
    )
}

pub fn export_heatmap(
    map: &AttentionMap,
    trace: &[f64],
    d_patch: usize,
    path: &Path,
    format: ExportFormat,
    region: Region,
) -> Result<(), AttentionError> {
    let bytes = match format {
        ExportFormat::Pgm => to_pgm(map, region),
        ExportFormat::Svg => to_svg(map, region, trace, d_patch).into_bytes(),
        ExportFormat::Csv => to_csv(map, region).into_bytes(),
    };
    std::fs::write(path, bytes).map_err(|source| AttentionError::Io {
        path: path.display().to_string(),
        source,
    })
}
