//! Retrieval evaluation: protocol filtering, CMC, mAP, band rescoring and
//! gate statistics.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dual_input::{apply_rescore, dual_rescore, select_band};
use crate::error::{shape_err, Error, Result};
use crate::feature_store::{check_token_grid, FeatureVolume, Manifest, Split, TrackletMeta};
use crate::moe_core::{check_simplex, GatingTensor1, Model, SIMPLEX_TOL};
use crate::numerics::Tensor;

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err!("cosine of {}- and {}-vectors", a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    General,
    Sc,
    Dc,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "general" => Ok(Protocol::General),
            "sc" => Ok(Protocol::Sc),
            "dc" => Ok(Protocol::Dc),
            other => Err(Error::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::General => "general",
            Protocol::Sc => "sc",
            Protocol::Dc => "dc",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relevance {
    Relevant,
    Irrelevant,
    /// Removed from the ranking altogether.
    Excluded,
}

/// Classify every gallery entry for one query.
///
/// All protocols drop the query's own tracklet and same-subject entries
/// from the same camera. SC counts same-subject entries as relevant only in
/// the same clothes and drops the others; DC does the reverse.
pub fn protocol_filter(query: &TrackletMeta, gallery: &[TrackletMeta], protocol: Protocol) -> Result<Vec<Relevance>> {
    let clothes = |m: &TrackletMeta| -> Result<u32> {
        m.clothes_id.ok_or_else(|| {
            Error::Metadata(format!(
                "tracklet {} has no clothes_id, required by the {protocol} protocol",
                m.tracklet_id
            ))
        })
    };
    if protocol != Protocol::General {
        clothes(query)?;
    }
    gallery
        .iter()
        .map(|g| {
            if g.tracklet_id == query.tracklet_id {
                return Ok(Relevance::Excluded);
            }
            if g.subject_id != query.subject_id {
                if protocol != Protocol::General {
                    clothes(g)?;
                }
                return Ok(Relevance::Irrelevant);
            }
            if g.camera_id == query.camera_id {
                return Ok(Relevance::Excluded);
            }
            Ok(match protocol {
                Protocol::General => Relevance::Relevant,
                Protocol::Sc if clothes(g)? == clothes(query)? => Relevance::Relevant,
                Protocol::Sc => Relevance::Excluded,
                Protocol::Dc if clothes(g)? == clothes(query)? => Relevance::Excluded,
                Protocol::Dc => Relevance::Relevant,
            })
        })
        .collect()
}

/// Gallery relevance flags in descending-score order, excluded entries
/// removed. Equal scores keep gallery order.
pub fn rank_relevance(scores: &[f64], relevance: &[Relevance]) -> Result<Vec<bool>> {
    if scores.len() != relevance.len() {
        return Err(shape_err!(
            "{} scores for {} gallery entries",
            scores.len(),
            relevance.len()
        ));
    }
    let mut order: Vec<usize> = (0..scores.len())
        .filter(|&i| relevance[i] != Relevance::Excluded)
        .collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order.into_iter().map(|i| relevance[i] == Relevance::Relevant).collect())
}

/// `cmc[k − 1]` = fraction of queries whose first relevant entry is at rank ≤ k.
/// Queries without any relevant entry are ignored.
pub fn cmc_curve(lists: &[Vec<bool>]) -> Vec<f64> {
    let len = lists.iter().map(Vec::len).max().unwrap_or(0);
    let firsts: Vec<usize> = lists.iter().filter_map(|l| l.iter().position(|&r| r)).collect();
    if firsts.is_empty() {
        return vec![0.0; len];
    }
    let n = firsts.len() as f64;
    (0..len)
        .map(|k| firsts.iter().filter(|&&f| f <= k).count() as f64 / n)
        .collect()
}

pub fn average_precision(list: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in list.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Mean average precision over queries with at least one relevant entry.
pub fn map_score(lists: &[Vec<bool>]) -> f64 {
    let aps: Vec<f64> = lists.iter().filter_map(|l| average_precision(l)).collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub query: u32,
    pub gallery: u32,
    pub single: f64,
    #[serde(rename = "final")]
    pub final_score: f64,
    pub in_band: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc: Vec<f64>,
}

impl Metrics {
    pub fn top1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandInfo {
    pub q: f64,
    pub lower: f64,
    pub upper: f64,
    pub selected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc: Vec<f64>,
    /// Metrics from the single-input scores, before band rescoring.
    pub single_input: Metrics,
    pub band: BandInfo,
    pub mean_w2: [f64; 3],
    pub queries_evaluated: usize,
    /// Queries left with no relevant gallery entry after filtering.
    pub queries_dropped: usize,
    pub pairs: Vec<PairScore>,
}

impl EvalReport {
    pub fn top1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }
}

/// Volumes per single-input forward batch.
const EMBED_CHUNK: usize = 32;

fn embed(model: &Model, volumes: &[&FeatureVolume]) -> Result<(Vec<Vec<f64>>, Vec<[f64; 3]>)> {
    let mut fs = Vec::with_capacity(volumes.len());
    let mut w2s = Vec::with_capacity(volumes.len());
    for chunk in volumes.chunks(EMBED_CHUNK) {
        let data: Vec<&Tensor> = chunk.iter().map(|v| &v.data).collect();
        for out in model.forward_many(&data)? {
            fs.push(out.embedding.f);
            w2s.push(out.embedding.w2);
        }
    }
    Ok((fs, w2s))
}

fn metrics_for(scores: &[f64], n_gallery: usize, relevance: &[Vec<Relevance>]) -> Result<(Metrics, usize)> {
    let mut lists = Vec::new();
    let mut dropped = 0;
    for (qi, rel) in relevance.iter().enumerate() {
        let list = rank_relevance(&scores[qi * n_gallery..(qi + 1) * n_gallery], rel)?;
        if list.iter().any(|&r| r) {
            lists.push(list);
        } else {
            dropped += 1;
        }
    }
    Ok((
        Metrics {
            map: map_score(&lists),
            cmc: cmc_curve(&lists),
        },
        dropped,
    ))
}

/// Score every query against every gallery tracklet, rescore the central
/// `q` percent with dual-input gating, and compute metrics under `protocol`.
pub fn evaluate(
    model: &Model,
    manifest: &Manifest,
    volumes: &[FeatureVolume],
    protocol: Protocol,
    q: f64,
) -> Result<EvalReport> {
    if volumes.len() != manifest.records.len() {
        return Err(shape_err!(
            "{} volumes for {} manifest records",
            volumes.len(),
            manifest.records.len()
        ));
    }
    let queries: Vec<&FeatureVolume> = manifest.split(Split::Query).map(|(i, _)| &volumes[i]).collect();
    let gallery: Vec<&FeatureVolume> = manifest.split(Split::Gallery).map(|(i, _)| &volumes[i]).collect();
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::EmptyInput("evaluation needs query and gallery tracklets".into()));
    }

    let (qf, qw) = embed(model, &queries)?;
    let (gf, gw) = embed(model, &gallery)?;
    let ng = gallery.len();
    let mut single = Vec::with_capacity(queries.len() * ng);
    for a in &qf {
        for b in &gf {
            single.push(cosine_sim(a, b)?);
        }
    }

    let band = select_band(&single, q)?;
    let band_pairs: Vec<(&Tensor, &Tensor)> = band
        .selected
        .iter()
        .map(|&i| (&gallery[i % ng].data, &queries[i / ng].data))
        .collect();
    let rescored = dual_rescore(model, &band_pairs)?;
    let scores = apply_rescore(&single, &band, &rescored)?;

    let gallery_meta: Vec<TrackletMeta> = gallery.iter().map(|v| v.meta).collect();
    let relevance = queries
        .iter()
        .map(|qv| protocol_filter(&qv.meta, &gallery_meta, protocol))
        .collect::<Result<Vec<_>>>()?;
    let (single_metrics, _) = metrics_for(&single, ng, &relevance)?;
    let (metrics, dropped) = metrics_for(&scores, ng, &relevance)?;

    let mut mean_w2 = [0.0; 3];
    let all_w2: Vec<&[f64; 3]> = qw.iter().chain(&gw).collect();
    for w in &all_w2 {
        for (m, v) in mean_w2.iter_mut().zip(w.iter()) {
            *m += v / all_w2.len() as f64;
        }
    }
    check_simplex(&Tensor::vector(mean_w2.to_vec()), 0, SIMPLEX_TOL)?;

    let pairs = (0..single.len())
        .map(|i| PairScore {
            query: queries[i / ng].meta.tracklet_id,
            gallery: gallery[i % ng].meta.tracklet_id,
            single: single[i],
            final_score: scores[i],
            in_band: band.contains(i),
        })
        .collect();

    Ok(EvalReport {
        protocol,
        map: metrics.map,
        cmc: metrics.cmc,
        single_input: single_metrics,
        band: BandInfo {
            q,
            lower: band.lower,
            upper: band.upper,
            selected: band.selected.len(),
        },
        mean_w2,
        queries_evaluated: queries.len() - dropped,
        queries_dropped: dropped,
        pairs,
    })
}

/// Frame-mean of `W*1[:, :, i, j]` without the CLS token, as a
/// `[√(K−1), √(K−1)]` grid.
pub fn heatmap_grid(w1: &GatingTensor1, expert: usize, target: usize) -> Result<Tensor> {
    let [t, k, n1, n2] = w1.weights.shape()[..] else {
        return Err(shape_err!(
            "gating tensor must be [T, K, n1, n2], got {:?}",
            w1.weights.shape()
        ));
    };
    if expert >= n1 || target >= n2 {
        return Err(shape_err!(
            "expert {expert} / target {target} out of range for n1 = {n1}, n2 = {n2}"
        ));
    }
    let side = check_token_grid(k)?;
    Tensor::new(
        vec![side, side],
        (1..k)
            .map(|tok| (0..t).map(|f| w1.weights.get(&[f, tok, expert, target])).sum::<f64>() / t as f64)
            .collect(),
    )
}

/// 8-bit min-max normalized graymap bytes (binary PGM). A constant grid
/// maps to all zeros.
pub fn pgm_bytes(grid: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = grid.shape()[..] else {
        return Err(shape_err!("graymap needs a 2-D grid, got {:?}", grid.shape()));
    };
    let lo = grid.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(grid.data().iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn csv_text(grid: &Tensor) -> String {
    let w = grid.shape()[1];
    grid.data()
        .chunks(w)
        .map(|row| row.iter().map(|v| format!("{v:.17e}")).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

/// Gate heatmap for one volume, written to `<stem>.csv` and `<stem>.pgm`.
pub fn export_heatmap(model: &Model, g: &Tensor, expert: usize, target: usize, stem: &Path) -> Result<Tensor> {
    check_token_grid(g.shape().get(1).copied().unwrap_or(0))?;
    let out = model.forward(g)?;
    let grid = heatmap_grid(&out.gating1, expert, target)?;
    let csv = stem.with_extension("csv");
    let pgm = stem.with_extension("pgm");
    fs::write(&csv, csv_text(&grid)).map_err(|e| Error::io(&csv, e))?;
    fs::write(&pgm, pgm_bytes(&grid)?).map_err(|e| Error::io(&pgm, e))?;
    Ok(grid)
}
