//! Retrieval evaluation, layer redundancy probes and mask reports.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor};
use crate::corpus::PairBatch;
use crate::error::{Error, Result};
use crate::inheritance::{CompressionReport, MaskSet, TowerReport};
use crate::towers::{ForwardOpts, ModelConfig, TowerBatch, TowerKind, TwoTowerModel};

/// Pairs encoded per forward pass; fixed so results do not depend on the thread count.
pub const EVAL_CHUNK: usize = 64;

/// Worker count for evaluation: `TCDL_THREADS` if set, else the available parallelism.
pub fn eval_threads() -> usize {
    std::env::var("TCDL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

/// Runs `f` on every chunk of `n` items and returns the results in chunk order.
fn map_chunks<R: Send>(n: usize, f: impl Fn(std::ops::Range<usize>) -> Result<R> + Sync) -> Result<Vec<R>> {
    map_chunks_on(eval_threads(), n, f)
}

fn map_chunks_on<R: Send>(threads: usize, n: usize, f: impl Fn(std::ops::Range<usize>) -> Result<R> + Sync) -> Result<Vec<R>> {
    let ranges: Vec<_> = (0..n).step_by(EVAL_CHUNK).map(|s| s..(s + EVAL_CHUNK).min(n)).collect();
    let threads = threads.min(ranges.len()).max(1);
    if threads == 1 {
        return ranges.into_iter().map(&f).collect();
    }
    let mut slots: Vec<Option<Result<R>>> = (0..ranges.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let (ranges, f) = (&ranges, &f);
                s.spawn(move || ranges.iter().enumerate().skip(w).step_by(threads).map(|(i, r)| (i, f(r.clone()))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every chunk evaluated")).collect()
}

fn concat_rows<T: Real>(parts: Vec<Tensor<T>>, cols: usize) -> Tensor<T> {
    let rows = parts.iter().map(|p| p.shape()[0]).sum();
    Tensor::new(&[rows, cols], parts.into_iter().flat_map(Tensor::into_data).collect()).expect("row concat")
}

/// Image and text embeddings of every pair, encoded chunk by chunk.
pub fn encode_pairs<T: Real>(model: &TwoTowerModel<T>, pairs: &PairBatch<T>, opts: &ForwardOptsPair) -> Result<(Tensor<T>, Tensor<T>)> {
    encode_pairs_on(eval_threads(), model, pairs, opts)
}

fn encode_pairs_on<T: Real>(
    threads: usize,
    model: &TwoTowerModel<T>,
    pairs: &PairBatch<T>,
    opts: &ForwardOptsPair,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let chunks = map_chunks_on(threads, pairs.len(), |r| {
        let b = pairs.slice(r);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let i = model.run_tower(&mut tape, &bound, TowerKind::Image, TowerBatch::Image(&b.images), None, &opts.image)?;
        let t = model.run_tower(&mut tape, &bound, TowerKind::Text, TowerBatch::Text(&b.tokens), None, &opts.text)?;
        Ok((tape.value(i.embedding).clone(), tape.value(t.embedding).clone()))
    })?;
    let p = model.config.projection;
    let (imgs, txts): (Vec<_>, Vec<_>) = chunks.into_iter().unzip();
    Ok((concat_rows(imgs, p), concat_rows(txts, p)))
}

/// Forward switches for each tower.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptsPair {
    pub image: ForwardOpts,
    pub text: ForwardOpts,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub i2t: f64,
    pub t2i: f64,
}

/// Recall@1 in both directions from row-aligned unit embeddings; ties go to the lowest index.
pub fn recall_at_1<T: Real>(image: &Tensor<T>, text: &Tensor<T>) -> Result<Recall> {
    let (n, d) = image.dims2()?;
    if text.shape() != image.shape() {
        return Err(Error::shape("recall_at_1", format!("image {:?} vs text {:?}", image.shape(), text.shape())));
    }
    if n == 0 {
        return Err(Error::invalid("empty evaluation set"));
    }
    let dot = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| x.f64() * y.f64()).sum::<f64>();
    let hits = |q: &Tensor<T>, keys: &Tensor<T>| {
        (0..n)
            .filter(|&i| {
                let qi = &q.data()[i * d..(i + 1) * d];
                let mut best = (0, f64::NEG_INFINITY);
                for j in 0..n {
                    let s = dot(qi, &keys.data()[j * d..(j + 1) * d]);
                    if s > best.1 {
                        best = (j, s);
                    }
                }
                best.0 == i
            })
            .count() as f64
            / n as f64
    };
    Ok(Recall { i2t: hits(image, text), t2i: hits(text, image) })
}

/// Held-out recall@1 of `model` on aligned pairs.
pub fn retrieval_eval<T: Real>(model: &TwoTowerModel<T>, pairs: &PairBatch<T>) -> Result<Recall> {
    if pairs.len() < 2 {
        return Err(Error::invalid(format!("retrieval needs at least 2 pairs, got {}", pairs.len())));
    }
    let (i, t) = encode_pairs(model, pairs, &ForwardOptsPair::default())?;
    recall_at_1(&i, &t)
}

/// Mean cosine similarity between each block's input and output residual stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Redundancy {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
}

/// Per block, the mean over real (non-padding) tokens of `cos(input, output)`.
pub fn layer_redundancy<T: Real>(model: &TwoTowerModel<T>, pairs: &PairBatch<T>) -> Result<Redundancy> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let mut out = Redundancy { image: Vec::new(), text: Vec::new() };
    for kind in TowerKind::BOTH {
        let layers = model.config.tower(kind).layers();
        let chunks = map_chunks(pairs.len(), |r| {
            let b = pairs.slice(r);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let input = match kind {
                TowerKind::Image => TowerBatch::Image(&b.images),
                TowerKind::Text => TowerBatch::Text(&b.tokens),
            };
            let opts = ForwardOpts { skip_layer: None, capture: true };
            let run = model.run_tower(&mut tape, &bound, kind, input, None, &opts)?;
            let mut sums = vec![(0.0, 0usize); layers];
            for (l, s) in sums.iter_mut().enumerate() {
                let (a, b) = (tape.value(run.stream[l]), tape.value(run.stream[l + 1]));
                let d = a.shape()[1];
                for (row, _) in run.token_mask.iter().enumerate().filter(|(_, &keep)| keep) {
                    s.0 += cosine(&a.data()[row * d..(row + 1) * d], &b.data()[row * d..(row + 1) * d]);
                    s.1 += 1;
                }
            }
            Ok(sums)
        })?;
        let mut total = vec![(0.0, 0usize); layers];
        for c in chunks {
            for (t, s) in total.iter_mut().zip(c) {
                t.0 += s.0;
                t.1 += s.1;
            }
        }
        let v = total.into_iter().map(|(s, n)| s / n.max(1) as f64).collect();
        match kind {
            TowerKind::Image => out.image = v,
            TowerKind::Text => out.text = v,
        }
    }
    Ok(out)
}

fn cosine<T: Real>(a: &[T], b: &[T]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x.f64() * y.f64()).sum();
    let na: f64 = a.iter().map(|&x| x.f64() * x.f64()).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x.f64() * x.f64()).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Recall@1 with block `layer` of tower `kind` replaced by the identity.
pub fn layer_ablation<T: Real>(model: &TwoTowerModel<T>, kind: TowerKind, layer: usize, pairs: &PairBatch<T>) -> Result<Recall> {
    let layers = model.config.tower(kind).layers();
    if layer >= layers {
        return Err(Error::invalid(format!("layer {layer} out of range for the {}-layer {} tower", layers, kind.prefix())));
    }
    let mut opts = ForwardOptsPair::default();
    let skip = ForwardOpts { skip_layer: Some(layer), capture: false };
    match kind {
        TowerKind::Image => opts.image = skip,
        TowerKind::Text => opts.text = skip,
    }
    let (i, t) = encode_pairs(model, pairs, &opts)?;
    recall_at_1(&i, &t)
}

/// Spearman rank correlation with average ranks for ties; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid(format!("spearman needs two equal series of length >= 2, got {} and {}", a.len(), b.len())));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut s = 0;
    while s < idx.len() {
        let mut e = s;
        while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[s]] {
            e += 1;
        }
        let avg = (s + e) as f64 / 2.0 + 1.0;
        for &k in &idx[s..=e] {
            r[k] = avg;
        }
        s = e + 1;
    }
    r
}

/// One row of the layer profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProbe {
    pub tower: TowerKind,
    pub layer: usize,
    pub cosine: f64,
    pub ablated: Recall,
    /// Baseline image-to-text recall minus the ablated one.
    pub drop: f64,
}

/// Redundancy and ablation of every block of both towers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub baseline: Recall,
    pub layers: Vec<LayerProbe>,
    /// Rank correlation of `1 - cosine` with the recall drop.
    pub spearman: f64,
}

/// Redundancy measured on `probe` pairs, ablation recall on the distinct `eval` pairs.
pub fn profile<T: Real>(model: &TwoTowerModel<T>, probe: &PairBatch<T>, eval: &PairBatch<T>) -> Result<Profile> {
    let baseline = retrieval_eval(model, eval)?;
    let red = layer_redundancy(model, probe)?;
    let mut layers = Vec::new();
    for (kind, cos) in [(TowerKind::Image, &red.image), (TowerKind::Text, &red.text)] {
        for (l, &c) in cos.iter().enumerate() {
            let ablated = layer_ablation(model, kind, l, eval)?;
            layers.push(LayerProbe { tower: kind, layer: l, cosine: c, ablated, drop: baseline.i2t - ablated.i2t });
        }
    }
    let dissim: Vec<f64> = layers.iter().map(|p| 1.0 - p.cosine).collect();
    let drops: Vec<f64> = layers.iter().map(|p| p.drop).collect();
    let spearman = if layers.len() >= 2 { spearman(&dissim, &drops)? } else { 0.0 };
    Ok(Profile { baseline, layers, spearman })
}

pub fn render_profile(p: &Profile) -> String {
    let mut s = format!("baseline recall@1  i2t {:.4}  t2i {:.4}\n", p.baseline.i2t, p.baseline.t2i);
    s.push_str(&format!("{:<6} {:>5} {:>8} {:>10} {:>8}\n", "tower", "layer", "cosine", "ablated", "drop"));
    for l in &p.layers {
        s.push_str(&format!("{:<6} {:>5} {:>8.4} {:>10.4} {:>8.4}\n", l.tower.prefix(), l.layer, l.cosine, l.ablated.i2t, l.drop));
    }
    s.push_str(&format!("spearman(1 - cosine, drop) = {:.4}\n", p.spearman));
    s
}

/// Per-layer survivors of binary masks, as a [`CompressionReport`].
pub fn mask_report(masks: &MaskSet, cfg: &ModelConfig, reference_maskable: usize) -> Result<CompressionReport> {
    if !masks.is_binary() {
        return Err(Error::Mask("mask report needs binary masks; threshold relaxed masks first".into()));
    }
    CompressionReport::new(masks, cfg, reference_maskable)
}

/// Aligned-column text table of a compression report.
pub fn render_report(r: &CompressionReport) -> String {
    let mut s = format!("{:<6} {:>5} {:>9} {:>11}\n", "tower", "layer", "heads", "ffn");
    let tower = |s: &mut String, name: &str, t: &TowerReport| {
        for l in 0..t.heads.len() {
            let h = format!("{}/{}", t.heads[l], t.heads_total[l]);
            let f = format!("{}/{}", t.ffn[l], t.ffn_total[l]);
            s.push_str(&format!("{name:<6} {l:>5} {h:>9} {f:>11}\n"));
        }
        s.push_str(&format!("{name:<6} embed {:>9}\n", format!("{}/{}", t.embed, t.embed_total)));
    };
    tower(&mut s, "image", &r.image);
    tower(&mut s, "text", &r.text);
    s.push_str(&format!(
        "p = {:.6} ({} of {} maskable parameters kept)\nparameters: {} -> {}\n",
        r.p,
        r.image.kept + r.text.kept,
        r.reference_maskable,
        r.params_before,
        r.params_after
    ));
    s
}

#[cfg(test)]
mod tests;
