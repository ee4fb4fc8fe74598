//! Capture and export of the final-layer cross-attention maps.
//!
//! Exports per head `h`:
//! * `attn_head{h}.csv`: a header line, then one row per query position:
//!   the position followed by the attention mass on each key group.
//! * `attn_head{h}.pgm`: the same `[T, G]` matrix as a binary PGM.
//! * `attn_head{h}_group{g}.pgm`: the full `[T, T]` weight map of group `g`.
//!
//! PGM pixels use per-image min-max scaling,
//! `round(255 · (v − min) / (max − min))`, with the extrema on the comment
//! line. A constant image (`max == min`) is rendered flat at 128.

use std::fs;
use std::path::{Path, PathBuf};

use atsc_tensor::Tape;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{group_sums, AttentionRecord, ForwardOptions, Model};

#[derive(Clone, Debug, Serialize)]
pub struct AtlasDump {
    /// Hex SHA-256 of the model config and parameters.
    pub fingerprint: String,
    pub tokens: Vec<u32>,
    /// Source layer of each key group, in key order. The query stream
    /// group, when present, is labelled with its own layer index.
    pub group_layers: Vec<usize>,
    #[serde(skip)]
    pub record: AttentionRecord,
}

/// SHA-256 over the JSON config followed by every parameter's name, shape
/// and little-endian values.
pub fn fingerprint(model: &Model) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model.config()).expect("config serializes"));
    for (_, p) in model.params().iter() {
        h.update(p.name().as_bytes());
        for &s in p.value().shape() {
            h.update((s as u64).to_le_bytes());
        }
        for x in p.value().data() {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// One forward pass over `tokens` with attention capture.
pub fn capture(model: &Model, tokens: &[u32]) -> Result<AtlasDump> {
    let c = model.config();
    if !c.shortcut_enabled {
        return Err(Error::contract(
            "attention capture needs a shortcut model; this checkpoint is a baseline",
        ));
    }
    let mut tape = Tape::new();
    let out = model.forward_with(
        &mut tape,
        tokens,
        1,
        ForwardOptions {
            capture_attention: true,
            ..Default::default()
        },
    )?;
    let record = out
        .attention
        .into_iter()
        .next()
        .expect("one record per row");
    let mut group_layers = c.active_taps();
    if c.include_query_stream_group {
        group_layers.push(c.n_layers - 1);
    }
    Ok(AtlasDump {
        fingerprint: fingerprint(model),
        tokens: tokens.to_vec(),
        group_layers,
        record,
    })
}

/// `[heads, T, G]` attention mass per key group, recomputed from the full
/// weights.
pub fn aggregate_by_group(dump: &AtlasDump) -> Vec<f32> {
    let r = &dump.record;
    group_sums(&r.weights, r.heads, r.seq_len, r.groups)
}

/// Min-max scaled 8-bit pixels and the extrema used.
pub fn scale_pixels(values: &[f32]) -> (Vec<u8>, f32, f32) {
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let pixels = if max > min {
        let span = max as f64 - min as f64;
        values
            .iter()
            .map(|&v| (255.0 * (v as f64 - min as f64) / span).round() as u8)
            .collect()
    } else {
        vec![128; values.len()]
    };
    (pixels, min, max)
}

/// Binary PGM of a row-major `[height, width]` matrix.
pub fn render_pgm(values: &[f32], height: usize, width: usize) -> Vec<u8> {
    assert_eq!(values.len(), height * width);
    let (pixels, min, max) = scale_pixels(values);
    let mut out = format!(
        "P5\n# min={min:e} max={max:e} pixel=round(255*(v-min)/(max-min)), flat 128 when max==min\n{width} {height}\n255\n"
    )
    .into_bytes();
    out.extend_from_slice(&pixels);
    out
}

/// CSV of one head's `[T, G]` aggregate. Values are written in shortest
/// round-trip form, so parsing them recovers the f32 bits.
pub fn render_csv(agg: &[f32], seq_len: usize, group_layers: &[usize]) -> String {
    let g = group_layers.len();
    let mut s = String::from("position");
    for l in group_layers {
        s.push_str(&format!(",layer{l}"));
    }
    s.push('\n');
    for t in 0..seq_len {
        s.push_str(&t.to_string());
        for v in &agg[t * g..(t + 1) * g] {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

/// Parses a CSV written by [`render_csv`] back into `(T, G, values)`.
pub fn parse_csv(text: &str) -> Option<(usize, usize, Vec<f32>)> {
    let mut lines = text.lines();
    let g = lines.next()?.split(',').count() - 1;
    let mut values = Vec::new();
    let mut t = 0;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != g + 1 || fields[0].parse::<usize>().ok()? != t {
            return None;
        }
        for f in &fields[1..] {
            values.push(f.parse().ok()?);
        }
        t += 1;
    }
    Some((t, g, values))
}

fn write(path: PathBuf, bytes: &[u8], written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes every export file under `dir` and returns their paths.
pub fn export(dump: &AtlasDump, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let r = &dump.record;
    let (t, g) = (r.seq_len, r.groups);
    let agg = aggregate_by_group(dump);
    let mut written = Vec::new();
    for h in 0..r.heads {
        let head = &agg[h * t * g..(h + 1) * t * g];
        let csv = render_csv(head, t, &dump.group_layers);
        write(
            dir.join(format!("attn_head{h}.csv")),
            csv.as_bytes(),
            &mut written,
        )?;
        write(
            dir.join(format!("attn_head{h}.pgm")),
            &render_pgm(head, t, g),
            &mut written,
        )?;
        for grp in 0..g {
            let map: Vec<f32> = (0..t)
                .flat_map(|q| (0..t).map(move |k| (q, k)))
                .map(|(q, k)| r.weight(h, q, grp, k))
                .collect();
            write(
                dir.join(format!("attn_head{h}_group{grp}.pgm")),
                &render_pgm(&map, t, t),
                &mut written,
            )?;
        }
    }
    let meta = serde_json::to_vec_pretty(dump)?;
    write(dir.join("atlas.json"), &meta, &mut written)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_flat_gray() {
        let pgm = render_pgm(&[0.25; 8], 4, 2);
        assert!(pgm.ends_with(&[128; 8]));
    }

    #[test]
    fn extremes_map_to_black_and_white() {
        let (p, min, max) = scale_pixels(&[0.5, 0.0, 1.0]);
        assert_eq!((p, min, max), (vec![128, 0, 255], 0.0, 1.0));
    }
}
