//! Text-to-image retrieval: split embedding, cosine ranking, R@k, mAP and
//! static HTML retrieval reports.

use std::fmt::Write as _;
use std::io::Cursor;

use base64::Engine as _;
use candle_core::DType;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Raster, Split, Vocabulary};
use crate::encoders::{EmbeddingBatch, Encoders, Modality};
use crate::error::{Error, Result};

/// Rows encoded per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;

/// Encoded gallery (all split images) and queries (all split captions).
#[derive(Debug, Clone)]
pub struct SplitEmbeddings {
    pub split: Split,
    pub gallery: EmbeddingBatch,
    pub queries: EmbeddingBatch,
    /// Corpus image index of each gallery row.
    pub image_ids: Vec<usize>,
    /// Corpus text index of each query row.
    pub text_ids: Vec<usize>,
}

/// Loads split images in corpus order; decoding runs in parallel but the
/// result order is fixed.
pub fn load_images(corpus: &Corpus, images: &[usize]) -> Result<Vec<Raster>> {
    images.par_iter().map(|&i| corpus.load_image(i)).collect()
}

pub fn embed_split(corpus: &Corpus, split: Split, encoders: &Encoders, vocab: &Vocabulary) -> Result<SplitEmbeddings> {
    let image_ids = corpus.image_indices(split);
    let text_ids = corpus.text_indices(split);
    if image_ids.is_empty() || text_ids.is_empty() {
        return Err(Error::Data(format!("{split} split is empty")));
    }
    let mut gallery = Vec::new();
    for chunk in image_ids.chunks(EVAL_CHUNK) {
        let pixels = if encoders.needs_pixels() { Some(load_images(corpus, chunk)?) } else { None };
        gallery.push(encoders.encode_images(chunk, pixels.as_deref())?.global);
    }
    let mut queries = Vec::new();
    for chunk in text_ids.chunks(EVAL_CHUNK) {
        let tokens = chunk.iter().map(|&t| vocab.tokenize(&corpus.texts()[t].caption)).collect::<Result<Vec<_>>>()?;
        queries.push(encoders.encode_texts(chunk, &tokens)?.global);
    }
    Ok(SplitEmbeddings {
        split,
        gallery: EmbeddingBatch {
            features: candle_core::Tensor::cat(&gallery, 0)?.contiguous()?,
            labels: image_ids.iter().map(|&i| corpus.image_label(i)).collect(),
            modality: Modality::Image,
        },
        queries: EmbeddingBatch {
            features: candle_core::Tensor::cat(&queries, 0)?.contiguous()?,
            labels: text_ids.iter().map(|&t| corpus.text_label(t)).collect(),
            modality: Modality::Text,
        },
        image_ids,
        text_ids,
    })
}

/// Per-query rankings of gallery positions with relevance flags and scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRetrieval {
    pub rankings: Vec<Vec<usize>>,
    pub relevance: Vec<Vec<bool>>,
    /// Scores in ranked order, aligned with `rankings`.
    pub scores: Vec<Vec<f64>>,
}

fn unit_rows(batch: &EmbeddingBatch) -> Result<Vec<Vec<f64>>> {
    let rows = batch.features.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows
        .into_iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                r.into_iter().map(|x| x / n).collect()
            } else {
                r
            }
        })
        .collect())
}

/// Gallery positions sorted by descending score, ties by ascending position.
pub fn sort_scores(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Cosine ranking of every query against the full gallery.
pub fn rank(queries: &EmbeddingBatch, gallery: &EmbeddingBatch) -> Result<RankedRetrieval> {
    let (dq, dg) = (queries.features.dims2()?.1, gallery.features.dims2()?.1);
    if dq != dg {
        return Err(Error::Shape(format!("query width {dq} vs gallery width {dg}")));
    }
    let q = unit_rows(queries)?;
    let g = unit_rows(gallery)?;
    let per_query: Vec<(Vec<usize>, Vec<bool>, Vec<f64>)> = q
        .par_iter()
        .zip(queries.labels.par_iter())
        .map(|(qr, ql)| {
            let scores: Vec<f64> = g.iter().map(|gr| qr.iter().zip(gr).map(|(a, b)| a * b).sum()).collect();
            let order = sort_scores(&scores);
            let relevance = order.iter().map(|&j| gallery.labels[j] == *ql).collect();
            let sorted = order.iter().map(|&j| scores[j]).collect();
            (order, relevance, sorted)
        })
        .collect();
    let mut out = RankedRetrieval { rankings: Vec::new(), relevance: Vec::new(), scores: Vec::new() };
    for (o, r, s) in per_query {
        out.rankings.push(o);
        out.relevance.push(r);
        out.scores.push(s);
    }
    Ok(out)
}

impl RankedRetrieval {
    pub fn num_queries(&self) -> usize {
        self.rankings.len()
    }

    pub fn gallery_size(&self) -> usize {
        self.rankings.first().map_or(0, Vec::len)
    }
}

/// Fraction of queries with a relevant item among the first `k`.
pub fn recall_at_k(ranked: &RankedRetrieval, k: usize) -> Result<f64> {
    let g = ranked.gallery_size();
    if k == 0 || k > g {
        return Err(Error::Config(format!("k = {k} outside 1..={g}")));
    }
    if ranked.relevance.is_empty() {
        return Err(Error::Data("no queries".into()));
    }
    let hits = ranked.relevance.iter().filter(|r| r[..k].iter().any(|&x| x)).count();
    Ok(hits as f64 / ranked.num_queries() as f64)
}

/// Average precision of one relevance vector; `None` without relevant items.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapResult {
    pub map: f64,
    pub evaluated: usize,
    pub excluded: usize,
}

/// mAP over queries with at least one relevant item; the others are
/// excluded and counted.
pub fn mean_average_precision(ranked: &RankedRetrieval) -> Result<MapResult> {
    let aps: Vec<f64> = ranked.relevance.iter().filter_map(|r| average_precision(r)).collect();
    let excluded = ranked.num_queries() - aps.len();
    if excluded > 0 {
        log::warn!("{excluded} queries have no relevant gallery item and are excluded from mAP");
    }
    if aps.is_empty() {
        return Err(Error::Data("no query has a relevant gallery item".into()));
    }
    Ok(MapResult { map: aps.iter().sum::<f64>() / aps.len() as f64, evaluated: aps.len(), excluded })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub queries: usize,
    pub gallery: usize,
    pub excluded_queries: usize,
}

/// Retrieval metrics. A recall level larger than the gallery is `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    #[serde(rename = "R1")]
    pub r1: Option<f64>,
    #[serde(rename = "R5")]
    pub r5: Option<f64>,
    #[serde(rename = "R10")]
    pub r10: Option<f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub counts: EvalCounts,
}

impl EvalMetrics {
    pub fn from_ranking(ranked: &RankedRetrieval) -> Result<Self> {
        let g = ranked.gallery_size();
        let at = |k: usize| if k <= g { recall_at_k(ranked, k).map(Some) } else { Ok(None) };
        let m = mean_average_precision(ranked)?;
        Ok(Self {
            r1: at(1)?,
            r5: at(5)?,
            r10: at(10)?,
            map: m.map,
            counts: EvalCounts { queries: ranked.num_queries(), gallery: g, excluded_queries: m.excluded },
        })
    }
}

/// Embeds a split, ranks it and computes metrics.
pub fn evaluate(corpus: &Corpus, split: Split, encoders: &Encoders, vocab: &Vocabulary) -> Result<(EvalMetrics, RankedRetrieval)> {
    let emb = embed_split(corpus, split, encoders, vocab)?;
    let ranked = rank(&emb.queries, &emb.gallery)?;
    Ok((EvalMetrics::from_ranking(&ranked)?, ranked))
}

const THUMB_HEIGHT: usize = 96;
const THUMB_WIDTH: usize = 32;

fn thumbnail(corpus: &Corpus, image: usize) -> Option<String> {
    let raster = corpus.load_image(image).ok()?.resized(THUMB_HEIGHT, THUMB_WIDTH);
    let mut png = Vec::new();
    raster.to_rgb8().write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png).ok()?;
    Some(base64::engine::general_purpose::STANDARD.encode(png))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One named ranking over the same split embedding.
#[derive(Debug, Clone, Copy)]
pub struct ReportRun<'a> {
    pub name: &'a str,
    pub ranked: &'a RankedRetrieval,
}

/// Self-contained HTML: per query the caption and, for each run, a row of
/// the top `top_n` gallery thumbnails with green (match) or red borders.
/// `queries` are query row positions; `image_ids`/`text_ids` map rows to
/// corpus indices. Unreadable images become placeholder tiles.
pub fn render_report(corpus: &Corpus, image_ids: &[usize], text_ids: &[usize], queries: &[usize], runs: &[ReportRun<'_>], top_n: usize) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::Config("report needs at least one ranking".into()));
    }
    let mut cache: std::collections::HashMap<usize, Option<String>> = Default::default();
    let mut html = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Retrieval report</title>\n<style>\n\
         body{font-family:sans-serif;margin:16px}\n.panel{margin-bottom:24px}\n.run{display:flex;align-items:center;gap:4px;margin:4px 0}\n\
         .name{width:120px;font-weight:bold}\n.tile{border:3px solid;width:32px;height:96px}\n.hit{border-color:#2a2}\n.miss{border-color:#d22}\n\
         .placeholder{background:#bbb;display:inline-block}\n</style></head><body>\n",
    );
    for &q in queries {
        let text = *text_ids.get(q).ok_or_else(|| Error::Data(format!("query row {q} out of range")))?;
        let _ = writeln!(html, "<div class=\"panel\" data-query=\"{q}\"><p class=\"caption\">{}</p>", escape(&corpus.texts()[text].caption));
        for run in runs {
            let ranking = run.ranked.rankings.get(q).ok_or_else(|| Error::Data(format!("run {} lacks query {q}", run.name)))?;
            let _ = write!(html, "<div class=\"run\"><span class=\"name\">{}</span>", escape(run.name));
            for (pos, &g) in ranking.iter().take(top_n).enumerate() {
                let image = image_ids[g];
                let flag = if run.ranked.relevance[q][pos] { "hit" } else { "miss" };
                let data = cache.entry(image).or_insert_with(|| thumbnail(corpus, image));
                match data {
                    Some(b64) => {
                        let _ = write!(html, "<img class=\"tile {flag}\" data-image=\"{image}\" src=\"data:image/png;base64,{b64}\">");
                    }
                    None => {
                        let _ = write!(html, "<span class=\"tile placeholder {flag}\" data-image=\"{image}\"></span>");
                    }
                }
            }
            html.push_str("</div>\n");
        }
        html.push_str("</div>\n");
    }
    html.push_str("</body></html>\n");
    Ok(html)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Tensor};

    fn batch(rows: Vec<Vec<f64>>, labels: Vec<usize>, modality: Modality) -> EmbeddingBatch {
        let (n, d) = (rows.len(), rows[0].len());
        EmbeddingBatch { features: Tensor::from_vec(rows.concat(), (n, d), &Device::Cpu).unwrap(), labels, modality }
    }

    fn relevance(rows: Vec<Vec<bool>>) -> RankedRetrieval {
        let g = rows[0].len();
        RankedRetrieval { rankings: vec![(0..g).collect(); rows.len()], scores: vec![vec![0.0; g]; rows.len()], relevance: rows }
    }

    #[test]
    fn exact_match_ranks_first_and_ties_keep_order() {
        let gallery = batch(vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, -1.0]], vec![0, 1, 2], Modality::Image);
        let q = batch(vec![vec![2.0, 0.0]], vec![1], Modality::Text);
        let r = rank(&q, &gallery).unwrap();
        assert_eq!(r.rankings[0][0], 1);
        assert!(r.relevance[0][0]);
        let flat = batch(vec![vec![1.0, 0.0]; 4], vec![0, 0, 1, 1], Modality::Image);
        assert_eq!(rank(&q, &flat).unwrap().rankings[0], vec![0, 1, 2, 3]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, false]), Some(1.0));
        assert_eq!(average_precision(&[false, true]), Some(0.5));
        let ap = average_precision(&[true, false, true, false, true]).unwrap();
        assert!((ap - 0.7556).abs() < 1e-4);
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn recall_counts_and_errors() {
        let r = relevance(vec![vec![true, false], vec![false, true], vec![false, false]]);
        assert!((recall_at_k(&r, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((recall_at_k(&r, 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(recall_at_k(&r, 3).is_err());
        let m = mean_average_precision(&r).unwrap();
        assert_eq!((m.evaluated, m.excluded), (2, 1));
        assert!((m.map - 0.75).abs() < 1e-15);
    }

    #[test]
    fn metrics_json_keys() {
        let r = relevance(vec![vec![true, false]]);
        let m = EvalMetrics::from_ranking(&r).unwrap();
        let v: serde_json::Value = serde_json::to_value(m).unwrap();
        assert_eq!(v["R1"], 1.0);
        assert!(v["R10"].is_null());
        assert_eq!(v["mAP"], 1.0);
        assert_eq!(v["counts"]["gallery"], 2);
    }

    #[test]
    fn report_marks_hits_and_uses_placeholders() {
        let corpus = crate::corpus::generate_synthetic(&crate::corpus::SyntheticSpec { n_identities: 2, images_per_identity: 1, captions_per_image: 1, ..Default::default() }).unwrap();
        let r = RankedRetrieval { rankings: vec![vec![1, 0]], relevance: vec![vec![false, true]], scores: vec![vec![0.9, 0.1]] };
        let runs = [ReportRun { name: "A", ranked: &r }, ReportRun { name: "B", ranked: &r }];
        let html = render_report(&corpus, &[0, 1], &[0], &[0], &runs, 10).unwrap();
        assert_eq!(html.matches("class=\"panel\"").count(), 1);
        assert_eq!(html.matches("tile hit").count(), 2);
        assert_eq!(html.matches("tile miss").count(), 2);
        let rows: Vec<&str> = html.lines().filter(|l| l.starts_with("<div class=\"run\">")).collect();
        assert_eq!(rows[0].replace(">A<", ">B<"), rows[1]);
    }
}
