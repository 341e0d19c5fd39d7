use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::towers::{block_param, ModelConfig, Params, TowerConfig, TowerInput, TowerKind, TowerMasks, TwoTowerModel};

use super::masks::{MaskPhase, MaskSet};

/// Slack above the target that thresholding may use.
pub const THRESHOLD_SLACK: f64 = 0.02;

#[derive(Clone, Copy)]
struct Entry {
    logit: f64,
    index: usize,
    tower: usize,
    group: usize,
}

/// Binary masks from relaxed ones: entries are admitted in order of descending
/// logit (ties: lower global index first; global order is image head, int,
/// embed, then text head, int, embed), skipping any entry that would push the
/// compression rate above `q_target + 0.02`. The top entry of every group is
/// always kept. `denominator` is the maskable-parameter count `p` refers to.
pub fn threshold(masks: &MaskSet, cfg: &ModelConfig, q_target: f64, denominator: usize) -> Result<MaskSet> {
    masks.check_shapes(cfg)?;
    if !(q_target > 0.0 && q_target <= 1.0) {
        return Err(Error::invalid(format!("target kept fraction {q_target} outside (0, 1]")));
    }
    let towers = [(&masks.image, &cfg.image), (&masks.text, &cfg.text)];
    let mut entries = Vec::new();
    let mut offset = 0;
    for (t, (m, _)) in towers.iter().enumerate() {
        for (g, v) in [&m.head, &m.int, &m.embed].into_iter().enumerate() {
            entries.extend(v.iter().enumerate().map(|(i, &logit)| Entry { logit, index: offset + i, tower: t, group: g }));
            offset += v.len();
        }
    }
    entries.sort_by(|a, b| b.logit.total_cmp(&a.logit).then(a.index.cmp(&b.index)));

    // Sums of kept heads, int units and embed dims per tower.
    let mut sums = [[0usize; 3]; 2];
    let kept = |s: &[[usize; 3]; 2]| -> f64 {
        let per = |t: usize| s[t][2] as f64 * (4.0 * towers[t].1.head_dim as f64 * s[t][0] as f64 + 2.0 * s[t][1] as f64);
        (per(0) + per(1)) / denominator as f64
    };
    let mut chosen = vec![false; offset];
    for t in 0..2 {
        for g in 0..3 {
            let first = entries.iter().find(|e| e.tower == t && e.group == g);
            if let Some(e) = first {
                chosen[e.index] = true;
                sums[t][g] += 1;
            }
        }
    }
    let bound = q_target + THRESHOLD_SLACK;
    if kept(&sums) > bound {
        return Err(Error::Mask(format!(
            "target {q_target} unreachable: one head, unit and dim per tower already keep {:.4}",
            kept(&sums)
        )));
    }
    for e in &entries {
        if chosen[e.index] {
            continue;
        }
        sums[e.tower][e.group] += 1;
        if kept(&sums) <= bound {
            chosen[e.index] = true;
        } else {
            sums[e.tower][e.group] -= 1;
        }
    }
    let mut out = masks.clone();
    out.phase = MaskPhase::Hard;
    let mut offset = 0;
    for kind in TowerKind::BOTH {
        let t = out.tower_mut(kind);
        for v in [&mut t.head, &mut t.int, &mut t.embed] {
            for (i, x) in v.iter_mut().enumerate() {
                *x = if chosen[offset + i] { 1.0 } else { 0.0 };
            }
            offset += v.len();
        }
    }
    Ok(out)
}

/// Which source rows and columns a smaller tower keeps.
struct TowerSlice {
    embed: Vec<usize>,
    /// Source layer of each kept layer.
    layers: Vec<usize>,
    /// Kept columns of the `[d, heads * head_dim]` projections, per kept layer.
    head_cols: Vec<Vec<usize>>,
    heads: Vec<usize>,
    head_dim: usize,
    ffn: Vec<Vec<usize>>,
}

fn gather<T: Real>(t: &Tensor<T>, rows: Option<&[usize]>, cols: Option<&[usize]>) -> Tensor<T> {
    if t.shape().len() == 1 {
        let idx = cols.or(rows).expect("vector index");
        return Tensor::new(&[idx.len()], idx.iter().map(|&i| t.data()[i]).collect()).expect("vector gather");
    }
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let all_r: Vec<usize> = (0..r).collect();
    let all_c: Vec<usize> = (0..c).collect();
    let (rows, cols) = (rows.unwrap_or(&all_r), cols.unwrap_or(&all_c));
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &i in rows {
        out.extend(cols.iter().map(|&j| t.data()[i * c + j]));
    }
    Tensor::new(&[rows.len(), cols.len()], out).expect("matrix gather")
}

fn slice_tower<T: Real>(
    src: &Params<T>,
    dst: &mut Params<T>,
    kind: TowerKind,
    cfg: &TowerConfig,
    s: &TowerSlice,
) -> Result<TowerConfig> {
    let p = kind.prefix();
    let k = Some(s.embed.as_slice());
    let names: &[&str] = match cfg.input {
        TowerInput::Image { .. } => &["patch", "cls", "pos"],
        TowerInput::Text { .. } => &["tok", "pos"],
    };
    for n in names {
        let name = format!("{p}.{n}");
        dst.insert(name.clone(), gather(src.get(&name)?, None, k));
    }
    for (new, &old) in s.layers.iter().enumerate() {
        let get = |n: &str| src.get(&block_param(kind, old, n));
        let put = |dst: &mut Params<T>, n: &str, t: Tensor<T>| dst.insert(block_param(kind, new, n), t);
        let hc = Some(s.head_cols[new].as_slice());
        let fc = Some(s.ffn[new].as_slice());
        for n in ["ln1.g", "ln1.b", "ln2.g", "ln2.b"] {
            put(dst, n, gather(get(n)?, None, k));
        }
        for n in ["attn.wq", "attn.wk", "attn.wv"] {
            put(dst, n, gather(get(n)?, k, hc));
        }
        put(dst, "attn.wo", gather(get("attn.wo")?, hc, k));
        put(dst, "ffn.up", gather(get("ffn.up")?, k, fc));
        put(dst, "ffn.down", gather(get("ffn.down")?, fc, k));
    }
    for n in ["ln_post.g", "ln_post.b"] {
        let name = format!("{p}.{n}");
        dst.insert(name.clone(), gather(src.get(&name)?, None, k));
    }
    let name = format!("{p}.proj");
    dst.insert(name.clone(), gather(src.get(&name)?, k, None));
    Ok(TowerConfig {
        hidden: s.embed.len(),
        head_dim: s.head_dim,
        heads: s.heads.clone(),
        ffn: s.ffn.iter().map(Vec::len).collect(),
        input: cfg.input.clone(),
    })
}

fn ones(v: &[f64]) -> Vec<usize> {
    v.iter().enumerate().filter(|(_, &x)| x == 1.0).map(|(i, _)| i).collect()
}

fn mask_slice(m: &TowerMasks<f64>, cfg: &TowerConfig) -> TowerSlice {
    let mut slice = TowerSlice {
        embed: ones(&m.embed),
        layers: (0..cfg.layers()).collect(),
        head_cols: Vec::new(),
        heads: Vec::new(),
        head_dim: cfg.head_dim,
        ffn: Vec::new(),
    };
    for l in 0..cfg.layers() {
        let (ho, fo) = (cfg.head_offset(l), cfg.ffn_offset(l));
        let heads = ones(&m.head[ho..ho + cfg.heads[l]]);
        slice.head_cols.push(heads.iter().flat_map(|&h| h * cfg.head_dim..(h + 1) * cfg.head_dim).collect());
        slice.heads.push(heads.len());
        slice.ffn.push(ones(&m.int[fo..fo + cfg.ffn[l]]));
    }
    slice
}

fn require_binary(masks: &MaskSet, cfg: &ModelConfig) -> Result<()> {
    masks.check_shapes(cfg)?;
    if !masks.is_binary() {
        return Err(Error::Mask("materialization needs hard 0/1 masks".into()));
    }
    Ok(())
}

/// Config of the model [`materialize`] would produce.
pub fn pruned_config(cfg: &ModelConfig, masks: &MaskSet) -> Result<ModelConfig> {
    require_binary(masks, cfg)?;
    let shrink = |m: &TowerMasks<f64>, c: &TowerConfig| {
        let s = mask_slice(m, c);
        TowerConfig { hidden: s.embed.len(), head_dim: c.head_dim, heads: s.heads, ffn: s.ffn.iter().map(Vec::len).collect(), input: c.input.clone() }
    };
    Ok(ModelConfig { image: shrink(&masks.image, &cfg.image), text: shrink(&masks.text, &cfg.text), projection: cfg.projection })
}

/// Physically removes every masked head, intermediate unit and embedding dim.
pub fn materialize<T: Real>(model: &TwoTowerModel<T>, masks: &MaskSet) -> Result<TwoTowerModel<T>> {
    require_binary(masks, &model.config)?;
    let mut params = Params::new();
    let mut config = model.config.clone();
    for kind in TowerKind::BOTH {
        let c = model.config.tower(kind);
        let slice = mask_slice(masks.tower(kind), c);
        if slice.embed.is_empty() {
            return Err(Error::Mask(format!("{} tower would keep no embedding dims", kind.prefix())));
        }
        *config.tower_mut(kind) = slice_tower(&model.params, &mut params, kind, c, &slice)?;
    }
    params.insert("logit_scale", model.params.get("logit_scale")?.clone());
    TwoTowerModel::from_params(config, params)
}

/// Text layers kept when inheriting `k` of `total`: `floor(i * total / k)`.
pub fn uniform_layers(total: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| i * total / k).collect()
}

fn check_manual(cfg: &ModelConfig, k_text: usize, k_dims: usize) -> Result<()> {
    let (t, i) = (&cfg.text, &cfg.image);
    if k_text == 0 || k_text > t.layers() {
        return Err(Error::invalid(format!("text layers {k_text} outside 1..={}", t.layers())));
    }
    if k_dims == 0 || k_dims > i.hidden {
        return Err(Error::invalid(format!("image dims {k_dims} outside 1..={}", i.hidden)));
    }
    if (k_dims * i.head_dim) % i.hidden != 0 || i.ffn.iter().any(|f| (k_dims * f) % i.hidden != 0) {
        return Err(Error::invalid(format!(
            "image dims {k_dims} do not scale head dim {} and FFN widths {:?} of width {} to integers",
            i.head_dim, i.ffn, i.hidden
        )));
    }
    Ok(())
}

/// Student config of [`manual_inherit`], validated.
pub fn manual_config(cfg: &ModelConfig, k_text: usize, k_dims: usize) -> Result<ModelConfig> {
    check_manual(cfg, k_text, k_dims)?;
    let (t, i) = (&cfg.text, &cfg.image);
    let layers = uniform_layers(t.layers(), k_text);
    Ok(ModelConfig {
        text: TowerConfig {
            heads: layers.iter().map(|&l| t.heads[l]).collect(),
            ffn: layers.iter().map(|&l| t.ffn[l]).collect(),
            ..t.clone()
        },
        image: TowerConfig {
            hidden: k_dims,
            head_dim: k_dims * i.head_dim / i.hidden,
            heads: i.heads.clone(),
            ffn: i.ffn.iter().map(|f| k_dims * f / i.hidden).collect(),
            input: i.input.clone(),
        },
        projection: cfg.projection,
    })
}

/// Keeps `k_text` uniformly spaced text layers and the leading `k_dims`
/// channels of every image weight, each head narrowed proportionally.
pub fn manual_inherit<T: Real>(teacher: &TwoTowerModel<T>, k_text: usize, k_dims: usize) -> Result<TwoTowerModel<T>> {
    let cfg = &teacher.config;
    check_manual(cfg, k_text, k_dims)?;
    let (t, i) = (&cfg.text, &cfg.image);
    let mut params = Params::new();
    let layers = uniform_layers(t.layers(), k_text);
    let text = TowerSlice {
        embed: (0..t.hidden).collect(),
        head_cols: layers.iter().map(|&l| (0..t.heads[l] * t.head_dim).collect()).collect(),
        heads: layers.iter().map(|&l| t.heads[l]).collect(),
        head_dim: t.head_dim,
        ffn: layers.iter().map(|&l| (0..t.ffn[l]).collect()).collect(),
        layers,
    };
    let dh = k_dims * i.head_dim / i.hidden;
    let image = TowerSlice {
        embed: (0..k_dims).collect(),
        layers: (0..i.layers()).collect(),
        head_cols: (0..i.layers()).map(|l| (0..i.heads[l]).flat_map(|h| h * i.head_dim..h * i.head_dim + dh).collect()).collect(),
        heads: i.heads.clone(),
        head_dim: dh,
        ffn: i.ffn.iter().map(|f| (0..k_dims * f / i.hidden).collect()).collect(),
    };
    let mut config = cfg.clone();
    config.image = slice_tower(&teacher.params, &mut params, TowerKind::Image, i, &image)?;
    config.text = slice_tower(&teacher.params, &mut params, TowerKind::Text, t, &text)?;
    params.insert("logit_scale", teacher.params.get("logit_scale")?.clone());
    let out = TwoTowerModel::from_params(config, params)?;
    debug_assert_eq!(out.config, manual_config(cfg, k_text, k_dims)?);
    Ok(out)
}

/// The `(text layers, image dims)` manual cut of `cfg` whose maskable census,
/// divided by `reference_maskable`, is closest to `q`; ties prefer fewer text
/// layers cut.
pub fn manual_plan(cfg: &ModelConfig, q: f64, reference_maskable: usize) -> Result<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for k_text in (1..=cfg.text.layers()).rev() {
        for k_dims in (1..=cfg.image.hidden).rev() {
            let Ok(c) = manual_config(cfg, k_text, k_dims) else { continue };
            let gap = (c.maskable_params() as f64 / reference_maskable as f64 - q).abs();
            if best.is_none_or(|(_, g)| gap < g - 1e-12) {
                best = Some(((k_text, k_dims), gap));
            }
        }
    }
    best.map(|(k, _)| k).ok_or_else(|| Error::invalid("no valid manual cut"))
}
