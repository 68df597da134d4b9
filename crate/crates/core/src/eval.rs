//! Evaluation protocols and their line-delimited reports.
//!
//! Report file: one JSON record per image with the columns
//! `id, expert, psnr, ssim, delta_e, lpips, chosen_center`, followed by one
//! aggregate record `{"aggregate": true, protocol, count, psnr, ssim,
//! delta_e, lpips, ...}`. Infinite PSNR is written as the string `"inf"`.
//! `lpips` is always null.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::load_checkpoint;
use crate::encoder::progressive_extract;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{delta_e_ab, psnr, ssim, SSIM_WINDOW};
use crate::model::Model;
use crate::style_ops::{best_of_k, LatentCodebook};
use crate::synth::{load_dataset, Pair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    SingleLatent,
    BestOfK,
    PerExpert,
    Extracted,
}

impl std::fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProtocolKind::SingleLatent => "single-latent",
            ProtocolKind::BestOfK => "best-of-k",
            ProtocolKind::PerExpert => "per-expert",
            ProtocolKind::Extracted => "extracted",
        })
    }
}

/// What to render for every test pair.
#[derive(Debug, Clone)]
pub enum Protocol {
    /// One center for every image.
    SingleLatent { codebook: LatentCodebook, center: usize },
    /// Best center per image by PSNR.
    BestOfK { codebook: LatentCodebook },
    /// Each image rendered with its own expert's latent (center 0 of that
    /// expert's codebook). The aggregate also carries the cross-expert
    /// matrix of mean PSNRs.
    PerExpert { codebooks: BTreeMap<String, LatentCodebook> },
    /// Style extracted from the reference by the progressive encoder; needs
    /// a training checkpoint.
    Extracted,
}

impl Protocol {
    pub fn kind(&self) -> ProtocolKind {
        match self {
            Protocol::SingleLatent { .. } => ProtocolKind::SingleLatent,
            Protocol::BestOfK { .. } => ProtocolKind::BestOfK,
            Protocol::PerExpert { .. } => ProtocolKind::PerExpert,
            Protocol::Extracted => ProtocolKind::Extracted,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub expert: String,
    pub psnr: f64,
    /// `None` when the image is smaller than the SSIM window.
    pub ssim: Option<f64>,
    pub delta_e: f64,
    pub chosen_center: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: ProtocolKind,
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: Option<f64>,
    pub mean_delta_e: f64,
    /// `cross[latent_expert][subset_expert]` = mean PSNR (per-expert only).
    pub cross: Option<BTreeMap<String, BTreeMap<String, f64>>>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn number(v: f64) -> Value {
    if v.is_infinite() && v > 0.0 {
        json!("inf")
    } else {
        json!(v)
    }
}

fn parse_number(v: &Value) -> Option<f64> {
    match v {
        Value::String(s) if s == "inf" => Some(f64::INFINITY),
        other => other.as_f64(),
    }
}

impl EvalReport {
    pub fn from_rows(protocol: ProtocolKind, rows: Vec<EvalRow>) -> Self {
        let mean_psnr = mean(rows.iter().map(|r| r.psnr));
        let mean_ssim = if rows.iter().all(|r| r.ssim.is_some()) && !rows.is_empty() {
            Some(mean(rows.iter().filter_map(|r| r.ssim)))
        } else {
            None
        };
        let mean_delta_e = mean(rows.iter().map(|r| r.delta_e));
        Self {
            protocol,
            rows,
            mean_psnr,
            mean_ssim,
            mean_delta_e,
            cross: None,
        }
    }

    pub fn row_record(row: &EvalRow) -> Value {
        json!({
            "id": row.id,
            "expert": row.expert,
            "psnr": number(row.psnr),
            "ssim": row.ssim,
            "delta_e": row.delta_e,
            "lpips": Value::Null,
            "chosen_center": row.chosen_center,
        })
    }

    pub fn aggregate_record(&self) -> Value {
        let mut v = json!({
            "aggregate": true,
            "protocol": self.protocol.to_string(),
            "count": self.rows.len(),
            "psnr": number(self.mean_psnr),
            "ssim": self.mean_ssim,
            "delta_e": self.mean_delta_e,
            "lpips": Value::Null,
        });
        if let Some(cross) = &self.cross {
            v["cross_psnr"] = json!(cross);
        }
        v
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&Self::row_record(r).to_string());
            out.push('\n');
        }
        out.push_str(&self.aggregate_record().to_string());
        out.push('\n');
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Parses a report file back (rows and the stored aggregate).
    pub fn read(path: &Path) -> Result<(Vec<EvalRow>, Value)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        let mut aggregate = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let v: Value = serde_json::from_str(line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            if v.get("aggregate").and_then(Value::as_bool) == Some(true) {
                aggregate = Some(v);
                continue;
            }
            let bad = || Error::format(path, format!("line {}: malformed row", i + 1));
            rows.push(EvalRow {
                id: v["id"].as_str().ok_or_else(bad)?.to_string(),
                expert: v["expert"].as_str().unwrap_or("").to_string(),
                psnr: parse_number(&v["psnr"]).ok_or_else(bad)?,
                ssim: v["ssim"].as_f64(),
                delta_e: v["delta_e"].as_f64().ok_or_else(bad)?,
                chosen_center: v["chosen_center"].as_u64().map(|c| c as usize),
            });
        }
        let aggregate = aggregate.ok_or_else(|| Error::format(path, "missing aggregate record"))?;
        Ok((rows, aggregate))
    }
}

fn score(id: &str, expert: &str, out: &Image, y: &Image, chosen: Option<usize>) -> Result<EvalRow> {
    let ssim_v = if out.height() >= SSIM_WINDOW && out.width() >= SSIM_WINDOW {
        Some(ssim(out, y)?)
    } else {
        None
    };
    Ok(EvalRow {
        id: id.to_string(),
        expert: expert.to_string(),
        psnr: psnr(out, y)?,
        ssim: ssim_v,
        delta_e: delta_e_ab(out, y)?,
        chosen_center: chosen,
    })
}

fn check_dim(model: &Model, cb: &LatentCodebook) -> Result<()> {
    if cb.d != model.style_dim() {
        return Err(Error::Shape(format!(
            "codebook dimension {} does not match the model's {}",
            cb.d,
            model.style_dim()
        )));
    }
    Ok(())
}

/// Runs a protocol on in-memory pairs.
pub fn evaluate(model: &Model, pairs: &[Pair], protocol: &Protocol) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no evaluation pairs".into()));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    let mut cross = None;
    match protocol {
        Protocol::SingleLatent { codebook, center } => {
            check_dim(model, codebook)?;
            let z = codebook.center(*center)?;
            for p in pairs {
                let out = model.render(&p.input, z)?;
                rows.push(score(&p.id, &p.expert, &out, &p.reference, Some(*center))?);
            }
        }
        Protocol::BestOfK { codebook } => {
            check_dim(model, codebook)?;
            for p in pairs {
                let (out, j, _) = best_of_k(&p.input, &p.reference, codebook, model)?;
                rows.push(score(&p.id, &p.expert, &out, &p.reference, Some(j))?);
            }
        }
        Protocol::PerExpert { codebooks } => {
            for cb in codebooks.values() {
                check_dim(model, cb)?;
            }
            let mut matrix: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for p in pairs {
                let own = codebooks.get(&p.expert).ok_or_else(|| {
                    Error::Input(format!("no codebook for expert {:?}", p.expert))
                })?;
                *counts.entry(p.expert.clone()).or_default() += 1;
                for (name, cb) in codebooks {
                    let out = model.render(&p.input, cb.center(0)?)?;
                    let v = psnr(&out, &p.reference)?;
                    *matrix.entry(name.clone()).or_default().entry(p.expert.clone()).or_default() += v;
                }
                let out = model.render(&p.input, own.center(0)?)?;
                rows.push(score(&p.id, &p.expert, &out, &p.reference, Some(0))?);
            }
            for row in matrix.values_mut() {
                for (subset, v) in row.iter_mut() {
                    *v /= counts[subset] as f64;
                }
            }
            cross = Some(matrix);
        }
        Protocol::Extracted => {
            let enc = model.encoder().map_err(|_| {
                Error::State("the extracted-style protocol needs a training checkpoint with the encoder".into())
            })?;
            for p in pairs {
                let trace = progressive_extract(&p.input, &p.reference, enc, &model.retouch)?;
                rows.push(score(&p.id, &p.expert, trace.final_output(), &p.reference, None)?);
            }
        }
    }
    let mut report = EvalReport::from_rows(protocol.kind(), rows);
    report.cross = cross;
    Ok(report)
}

/// Loads a checkpoint and a manifest, runs the protocol and optionally
/// writes the report.
pub fn run_protocol(checkpoint: &Path, manifest: &Path, protocol: &Protocol, out: Option<&Path>) -> Result<EvalReport> {
    let model = load_checkpoint(checkpoint)?.model;
    let pairs = load_dataset(manifest)?.load_all()?;
    let report = evaluate(&model, &pairs, protocol)?;
    if let Some(path) = out {
        report.write(path)?;
    }
    Ok(report)
}
