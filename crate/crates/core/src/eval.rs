//! Frozen-encoder evaluation: embedding extraction, the linear probe and
//! the embedding-geometry metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::nn::{matmul, FeatureMap, Matrix};
use crate::seed::rng_for;

/// Frames per forward pass when embedding a dataset.
const EMBED_CHUNK: usize = 64;

/// Which activation an [`EmbeddingSet`] holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerTag {
    Backbone,
    /// `k`-th hidden ReLU of the invariance head (1-based).
    InvHidden(usize),
    /// `k`-th hidden ReLU of the pair head fed `concat(h, h)`.
    AaHidden(usize),
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerTag::Backbone => f.write_str("backbone"),
            LayerTag::InvHidden(k) => write!(f, "inv_hidden_{k}"),
            LayerTag::AaHidden(k) => write!(f, "aa_hidden_{k}"),
        }
    }
}

impl FromStr for LayerTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown layer `{s}` (backbone, inv_hidden_K, aa_hidden_K)"));
        if s == "backbone" {
            return Ok(LayerTag::Backbone);
        }
        let (ctor, k): (fn(usize) -> LayerTag, &str) = if let Some(k) = s.strip_prefix("inv_hidden_") {
            (LayerTag::InvHidden, k)
        } else if let Some(k) = s.strip_prefix("aa_hidden_") {
            (LayerTag::AaHidden, k)
        } else {
            return Err(bad());
        };
        match k.parse::<usize>() {
            Ok(k) if k > 0 => Ok(ctor(k)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for LayerTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameLabel {
    pub category: usize,
    pub instance: usize,
    pub clip: usize,
    pub frame_index: usize,
    pub yaw_deg: f64,
    pub circular: bool,
}

/// Frozen embeddings, one row per frame, with aligned labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub embeddings: Matrix,
    pub labels: Vec<FrameLabel>,
    pub layer: LayerTag,
}

impl EmbeddingSet {
    pub fn new(embeddings: Matrix, labels: Vec<FrameLabel>, layer: LayerTag) -> Result<Self> {
        if embeddings.rows == 0 || embeddings.rows != labels.len() {
            return Err(Error::Metric(format!(
                "embedding set needs aligned, nonempty rows ({} rows, {} labels)",
                embeddings.rows,
                labels.len()
            )));
        }
        Ok(Self {
            embeddings,
            labels,
            layer,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn row64(&self, r: usize) -> Vec<f64> {
        self.embeddings.row(r).iter().map(|&v| v as f64).collect()
    }

    fn select(&self, rows: &[usize]) -> EmbeddingSet {
        let cols = self.embeddings.cols;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(self.embeddings.row(r));
        }
        EmbeddingSet {
            embeddings: Matrix::from_vec(rows.len(), cols, data),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            layer: self.layer,
        }
    }
}

pub fn frame_labels(manifest: &DatasetManifest) -> Vec<FrameLabel> {
    manifest
        .clips
        .iter()
        .flat_map(|c| {
            c.frames.iter().map(move |f| FrameLabel {
                category: c.category_id,
                instance: c.instance_id,
                clip: c.clip_id,
                frame_index: f.frame_index,
                yaw_deg: f.yaw_deg,
                circular: c.circular,
            })
        })
        .collect()
}

/// Embeds every frame (unaugmented) with the frozen bundle.
pub fn embed_dataset(bundle: &ModelBundle, manifest: &DatasetManifest, layer: LayerTag) -> Result<EmbeddingSet> {
    let check = |k: usize, n: usize| {
        if k == 0 || k > n {
            Err(Error::Config(format!("layer {layer} not present (head has {n} hidden layers)")))
        } else {
            Ok(())
        }
    };
    match layer {
        LayerTag::Backbone => {}
        LayerTag::InvHidden(k) => check(k, bundle.inv_head.hidden_layers())?,
        LayerTag::AaHidden(k) => check(k, bundle.pair_head.hidden_layers())?,
    }
    let refs = manifest.frame_refs();
    let size = manifest.image_size;
    let chunks: Vec<Matrix> = refs
        .par_chunks(EMBED_CHUNK)
        .map(|chunk| {
            let mut px = Vec::with_capacity(chunk.len() * size * size * 3);
            for &r in chunk {
                px.extend(manifest.frame(r).pixels.to_f32());
            }
            let h = bundle.encode_frozen(&FeatureMap::new(chunk.len(), size, size, 3, px))?;
            match layer {
                LayerTag::Backbone => Ok(h),
                LayerTag::InvHidden(k) => bundle.inv_head.hidden_activation(&h, k),
                LayerTag::AaHidden(k) => bundle.pair_head.hidden_activation(&h.hcat(&h), k),
            }
        })
        .collect::<Result<_>>()?;
    let cols = chunks[0].cols;
    let data = chunks.into_iter().flat_map(|m| m.data).collect();
    EmbeddingSet::new(Matrix::from_vec(refs.len(), cols, data), frame_labels(manifest), layer)
}

/// Category logits of the supervised classifier, as top-1 accuracy over
/// the unaugmented frames of `manifest`.
pub fn classifier_accuracy(bundle: &ModelBundle, manifest: &DatasetManifest) -> Result<f64> {
    let cls = bundle.classifier.as_ref().ok_or(Error::MissingComponent("classifier"))?;
    let emb = embed_dataset(bundle, manifest, LayerTag::Backbone)?;
    let logits = cls.forward_eval(&emb.embeddings);
    let correct = (0..logits.rows)
        .filter(|&r| argmax(logits.row(r)) == emb.labels[r].category)
        .count();
    Ok(correct as f64 / logits.rows as f64)
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Full-batch Adam iterations.
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fit on a single randomly chosen frame per training clip.
    pub one_view_per_clip: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.05,
            weight_decay: 0.0,
            one_view_per_clip: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub train_rows: usize,
}

/// Multinomial logistic regression on standardized frozen features,
/// zero-initialized and fit by full-batch Adam; top-1 category accuracy on
/// `test`.
pub fn linear_probe(train: &EmbeddingSet, test: &EmbeddingSet, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let train_ids: BTreeSet<usize> = train.labels.iter().map(|l| l.instance).collect();
    if test.labels.iter().any(|l| train_ids.contains(&l.instance)) {
        return Err(Error::Metric("probe train and test sets share instances".into()));
    }
    if train.embeddings.cols != test.embeddings.cols {
        return Err(Error::Metric("probe train and test widths differ".into()));
    }
    let train = if cfg.one_view_per_clip {
        let mut by_clip: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (r, l) in train.labels.iter().enumerate() {
            by_clip.entry(l.clip).or_default().push(r);
        }
        let rows: Vec<usize> = by_clip
            .iter()
            .map(|(&clip, rows)| rows[rng_for(&[cfg.seed, 0x0e5, clip as u64]).gen_range(0..rows.len())])
            .collect();
        train.select(&rows)
    } else {
        train.clone()
    };
    let classes: BTreeSet<usize> = train.labels.iter().map(|l| l.category).collect();
    if classes.len() < 2 {
        return Err(Error::Metric("probe training set has a single class".into()));
    }
    let k = 1 + train
        .labels
        .iter()
        .chain(&test.labels)
        .map(|l| l.category)
        .max()
        .expect("nonempty");
    let (n, d) = (train.len(), train.embeddings.cols);

    let mut mean = vec![0.0f64; d];
    let mut var = vec![0.0f64; d];
    for r in 0..n {
        for (j, &v) in train.embeddings.row(r).iter().enumerate() {
            mean[j] += v as f64 / n as f64;
        }
    }
    for r in 0..n {
        for (j, &v) in train.embeddings.row(r).iter().enumerate() {
            var[j] += (v as f64 - mean[j]).powi(2) / n as f64;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| if v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 }).collect();
    let standardize = |m: &Matrix| {
        let mut out = m.clone();
        for r in 0..out.rows {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = ((*v as f64 - mean[j]) * inv_std[j]) as f32;
            }
        }
        out
    };
    let x = standardize(&train.embeddings);
    let xt = standardize(&test.embeddings);
    let y: Vec<usize> = train.labels.iter().map(|l| l.category).collect();

    let mut w = Matrix::zeros(d, k);
    let mut b = vec![0.0f32; k];
    let (mut mw, mut vw) = (vec![0.0f64; d * k], vec![0.0f64; d * k]);
    let (mut mb, mut vb) = (vec![0.0f64; k], vec![0.0f64; k]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    for t in 1..=cfg.epochs {
        let mut dlogits = logits(&x, &w, &b);
        for r in 0..n {
            let row = dlogits.row_mut(r);
            softmax_inplace(row);
            row[y[r]] -= 1.0;
            row.iter_mut().for_each(|v| *v /= n as f32);
        }
        let gw = matmul(&x, true, &dlogits, false);
        let mut gb = vec![0.0f64; k];
        for r in 0..n {
            for (j, &g) in dlogits.row(r).iter().enumerate() {
                gb[j] += g as f64;
            }
        }
        let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
        for i in 0..d * k {
            let g = gw.data[i] as f64 + cfg.weight_decay * w.data[i] as f64;
            mw[i] = b1 * mw[i] + (1.0 - b1) * g;
            vw[i] = b2 * vw[i] + (1.0 - b2) * g * g;
            w.data[i] -= (cfg.lr * (mw[i] / c1) / ((vw[i] / c2).sqrt() + eps)) as f32;
        }
        for j in 0..k {
            mb[j] = b1 * mb[j] + (1.0 - b1) * gb[j];
            vb[j] = b2 * vb[j] + (1.0 - b2) * gb[j] * gb[j];
            b[j] -= (cfg.lr * (mb[j] / c1) / ((vb[j] / c2).sqrt() + eps)) as f32;
        }
    }
    let acc = |x: &Matrix, labels: &[FrameLabel]| {
        let l = logits(x, &w, &b);
        (0..l.rows).filter(|&r| argmax(l.row(r)) == labels[r].category).count() as f64 / l.rows as f64
    };
    Ok(ProbeResult {
        accuracy: acc(&xt, &test.labels),
        train_accuracy: acc(&x, &train.labels),
        train_rows: n,
    })
}

fn logits(x: &Matrix, w: &Matrix, b: &[f32]) -> Matrix {
    let mut l = matmul(x, false, w, false);
    for r in 0..l.rows {
        l.row_mut(r).iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
    }
    l
}

fn softmax_inplace(row: &mut [f32]) {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(nu > 0.0 && nv > 0.0) {
        return Err(Error::Metric("cosine of a zero vector".into()));
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv))
}

/// Unit rows in `f64`; errors on a zero row.
fn unit_rows(emb: &EmbeddingSet) -> Result<Vec<Vec<f64>>> {
    (0..emb.len())
        .map(|r| {
            let v = emb.row64(r);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > 0.0) {
                return Err(Error::Metric(format!("row {r} has zero norm")));
            }
            Ok(v.into_iter().map(|x| x / n).collect())
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rows grouped by clip, in frame order.
fn clips(emb: &EmbeddingSet) -> BTreeMap<usize, Vec<usize>> {
    let mut by_clip: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (r, l) in emb.labels.iter().enumerate() {
        by_clip.entry(l.clip).or_default().push(r);
    }
    for rows in by_clip.values_mut() {
        rows.sort_by_key(|&r| emb.labels[r].frame_index);
    }
    by_clip
}

/// Mean cosine similarity over within-clip adjacent frame pairs, including
/// the last→first pair of circular clips.
pub fn invariance_score(emb: &EmbeddingSet) -> Result<f64> {
    let u = unit_rows(emb)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (clip, rows) in clips(emb) {
        if rows.len() < 2 {
            return Err(Error::Metric(format!("clip {clip} has fewer than 2 frames")));
        }
        for w in rows.windows(2) {
            sum += dot(&u[w[0]], &u[w[1]]);
            count += 1;
        }
        if emb.labels[rows[0]].circular {
            sum += dot(&u[rows[rows.len() - 1]], &u[rows[0]]);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// View-alignment ratio over categories `c` and views `v`:
///
/// `G = mean_{c,v} (1/|O_c|) Σ_o cos(h_v^o, h_{v+90}^o) / Σ_{o'} cos(h_v^o, h_v^{o'})`
///
/// The denominator includes `o' = o` unless `exclude_self`. Views are the
/// yaw values present in the set; a view of an object is its frame within
/// half a yaw step of the requested angle.
pub fn view_alignment_g(emb: &EmbeddingSet, exclude_self: bool) -> Result<f64> {
    let u = unit_rows(emb)?;
    let by_clip = clips(emb);
    // category -> object -> rows
    let mut objects: BTreeMap<usize, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
    for rows in by_clip.values() {
        let l = emb.labels[rows[0]];
        objects.entry(l.category).or_default().entry(l.instance).or_default().extend(rows);
    }
    let mut views: Vec<f64> = emb.labels.iter().map(|l| l.yaw_deg).collect();
    views.sort_by(f64::total_cmp);
    views.dedup_by(|a, b| (*a - *b).abs() < 1e-9);

    let mut missing = Vec::new();
    let mut total = 0.0;
    let mut cells = 0usize;
    for (&cat, objs) in &objects {
        if objs.len() < 2 {
            return Err(Error::Metric(format!("category {cat} has fewer than 2 objects")));
        }
        for &v in &views {
            let mut at_v = Vec::with_capacity(objs.len());
            let mut at_v90 = Vec::with_capacity(objs.len());
            for (&inst, rows) in objs {
                match (find_view(emb, rows, v), find_view(emb, rows, v + 90.0)) {
                    (Some(a), Some(b)) => {
                        at_v.push(a);
                        at_v90.push(b);
                    }
                    _ => missing.push(format!("category {cat} object {inst} view {v}")),
                }
            }
            if at_v.len() != objs.len() {
                continue;
            }
            let mut cell = 0.0;
            for (i, (&a, &b)) in at_v.iter().zip(&at_v90).enumerate() {
                let num = dot(&u[a], &u[b]);
                let den: f64 = at_v
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| !(exclude_self && j == i))
                    .map(|(_, &o)| dot(&u[a], &u[o]))
                    .sum();
                cell += num / den;
            }
            total += cell / objs.len() as f64;
            cells += 1;
        }
    }
    if !missing.is_empty() {
        let shown: Vec<_> = missing.iter().take(10).cloned().collect();
        return Err(Error::Metric(format!(
            "{} view pairs lack a +90 degree partner: {}{}",
            missing.len(),
            shown.join(", "),
            if missing.len() > 10 { ", ..." } else { "" }
        )));
    }
    Ok(total / cells as f64)
}

/// The row of one object nearest to yaw `target`, if within half a step.
fn find_view(emb: &EmbeddingSet, rows: &[usize], target: f64) -> Option<usize> {
    let dist = |r: usize| crate::actions::wrap_degrees(emb.labels[r].yaw_deg - target).abs();
    let mut yaws: Vec<f64> = rows.iter().map(|&r| emb.labels[r].yaw_deg).collect();
    yaws.sort_by(f64::total_cmp);
    let step = yaws
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|&d| d > 1e-9)
        .fold(f64::INFINITY, f64::min);
    let best = rows.iter().copied().min_by(|&a, &b| dist(a).total_cmp(&dist(b)))?;
    (dist(best) <= step / 2.0 + 1e-9).then_some(best)
}
