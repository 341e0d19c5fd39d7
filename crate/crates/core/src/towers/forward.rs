use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::config::{TowerConfig, TowerInput, TowerKind};
use super::params::Bound;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Padding token id; padded positions are never attended to.
pub const PAD: u32 = 0;

/// Row-major token ids, `batch` sequences of `len` tokens each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<u32>,
    batch: usize,
    len: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<u32>, batch: usize, len: usize) -> Result<Self> {
        if ids.len() != batch * len {
            return Err(Error::shape("token_batch", format!("{} ids for {batch} x {len}", ids.len())));
        }
        Ok(TokenBatch { ids, batch, len })
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::shape("token_batch", "ragged token rows"));
        }
        Self::new(rows.concat(), rows.len(), len)
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.len..(i + 1) * self.len]
    }

    /// Sub-batch of the rows in `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> TokenBatch {
        TokenBatch { ids: self.ids[range.start * self.len..range.end * self.len].to_vec(), batch: range.len(), len: self.len }
    }
}

/// Encoder input for one tower.
#[derive(Clone, Copy, Debug)]
pub enum TowerBatch<'a, T> {
    /// `[batch, channels, grid, grid]` pixels.
    Image(&'a Tensor<T>),
    Text(&'a TokenBatch),
}

/// Mask values recorded on a tape for one tower, each a flat row vector:
/// heads `[sum H_l]`, intermediate units `[sum F_l]`, embedding dims `[d]`.
#[derive(Clone, Copy, Debug)]
pub struct TowerMaskVars {
    pub head: Var,
    pub int: Var,
    pub embed: Var,
}

/// Per-run switches used by the analysis probes.
#[derive(Clone, Debug, Default)]
pub struct ForwardOpts {
    /// Block replaced by the identity.
    pub skip_layer: Option<usize>,
    /// Keep the residual stream entering each block and leaving the last one.
    pub capture: bool,
}

pub struct TowerRun {
    /// `[batch, projection]`, unit rows.
    pub embedding: Var,
    /// Residual stream at block boundaries, `layers + 1` entries when captured.
    pub stream: Vec<Var>,
    /// Which stream rows are real tokens (false for padding).
    pub token_mask: Vec<bool>,
    pub batch: usize,
    pub tokens: usize,
}

/// Tape handles of one transformer block's weights.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub ln1: (Var, Var),
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2: (Var, Var),
    pub up: Var,
    pub down: Var,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn: usize,
}

impl BlockVars {
    pub fn bind(bound: &Bound, kind: TowerKind, cfg: &TowerConfig, layer: usize) -> Result<Self> {
        let p = |s: &str| bound.get(&block_param(kind, layer, s));
        Ok(BlockVars {
            ln1: (p("ln1.g")?, p("ln1.b")?),
            wq: p("attn.wq")?,
            wk: p("attn.wk")?,
            wv: p("attn.wv")?,
            wo: p("attn.wo")?,
            ln2: (p("ln2.g")?, p("ln2.b")?),
            up: p("ffn.up")?,
            down: p("ffn.down")?,
            heads: cfg.heads[layer],
            head_dim: cfg.head_dim,
            ffn: cfg.ffn[layer],
        })
    }
}

pub fn block_param(kind: TowerKind, layer: usize, name: &str) -> String {
    format!("{}.blocks.{layer}.{name}", kind.prefix())
}

/// Layout of the sequences flowing through a block.
#[derive(Clone, Copy, Debug)]
pub struct SeqShape<'a> {
    pub batch: usize,
    pub tokens: usize,
    pub key_mask: Option<&'a [bool]>,
}

/// Multi-head attention whose head `h` output is scaled by `m_head[h]` before
/// the output projection. `x` is `[batch * tokens, d]`.
pub fn masked_mha<T: Real>(
    tape: &mut Tape<T>,
    blk: &BlockVars,
    x: Var,
    seq: SeqShape<'_>,
    m_head: Option<Var>,
) -> Result<Var> {
    if let Some(m) = m_head {
        let n = tape.value(m).numel();
        if n != blk.heads {
            return Err(Error::shape("masked_mha", format!("head mask has {n} entries for {} heads", blk.heads)));
        }
    }
    if blk.heads == 0 {
        let (rows, _) = tape.value(x).dims2()?;
        let d = tape.value(blk.wo).shape()[1];
        return Ok(tape.constant(Tensor::zeros(&[rows, d])));
    }
    let q = tape.matmul(x, blk.wq)?;
    let k = tape.matmul(x, blk.wk)?;
    let v = tape.matmul(x, blk.wv)?;
    let mut a = tape.attention(q, k, v, seq.batch, seq.tokens, blk.heads, blk.head_dim, seq.key_mask)?;
    if let Some(m) = m_head {
        let expand: Vec<usize> = (0..blk.heads * blk.head_dim).map(|c| c / blk.head_dim).collect();
        let per_col = tape.select_cols(m, &expand)?;
        a = tape.mul_row(a, per_col)?;
    }
    tape.matmul(a, blk.wo)
}

/// `gelu(x W_up) diag(m_int) W_down`.
pub fn masked_ffn<T: Real>(tape: &mut Tape<T>, blk: &BlockVars, x: Var, m_int: Option<Var>) -> Result<Var> {
    if let Some(m) = m_int {
        let n = tape.value(m).numel();
        if n != blk.ffn {
            return Err(Error::shape("masked_ffn", format!("intermediate mask has {n} entries for {} units", blk.ffn)));
        }
    }
    if blk.ffn == 0 {
        let (rows, _) = tape.value(x).dims2()?;
        let d = tape.value(blk.down).shape()[1];
        return Ok(tape.constant(Tensor::zeros(&[rows, d])));
    }
    let h = tape.matmul(x, blk.up)?;
    let mut h = tape.gelu(h)?;
    if let Some(m) = m_int {
        h = tape.mul_row(h, m)?;
    }
    tape.matmul(h, blk.down)
}

/// Pre-norm block. The embedding mask gates both layer norms and the stream
/// after each residual add.
pub fn block_forward<T: Real>(
    tape: &mut Tape<T>,
    blk: &BlockVars,
    x: Var,
    seq: SeqShape<'_>,
    m_head: Option<Var>,
    m_int: Option<Var>,
    m_embed: Option<Var>,
) -> Result<Var> {
    let eps = T::c(LN_EPS);
    let h = tape.layer_norm(x, blk.ln1.0, blk.ln1.1, m_embed, eps)?;
    let a = masked_mha(tape, blk, h, seq, m_head)?;
    let mut x = tape.add(x, a)?;
    if let Some(m) = m_embed {
        x = tape.mul_row(x, m)?;
    }
    let h = tape.layer_norm(x, blk.ln2.0, blk.ln2.1, m_embed, eps)?;
    let f = masked_ffn(tape, blk, h, m_int)?;
    let mut x = tape.add(x, f)?;
    if let Some(m) = m_embed {
        x = tape.mul_row(x, m)?;
    }
    Ok(x)
}

/// Rearranges `[batch, channels, grid, grid]` into `[batch * patches, channels * patch * patch]`,
/// patches in row-major order, features ordered (channel, dy, dx).
pub fn patchify<T: Real>(images: &Tensor<T>, grid: usize, patch: usize, channels: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != channels || s[2] != grid || s[3] != grid {
        return Err(Error::shape("encode_image", format!("images {s:?}, expected [N, {channels}, {grid}, {grid}]")));
    }
    let (n, per) = (s[0], grid / patch);
    let feat = channels * patch * patch;
    let src = images.data();
    let mut out = Vec::with_capacity(n * per * per * feat);
    for b in 0..n {
        for py in 0..per {
            for px in 0..per {
                for c in 0..channels {
                    for dy in 0..patch {
                        let row = ((b * channels + c) * grid + py * patch + dy) * grid + px * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(&[n * per * per, feat], out)
}

fn embed_input<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &TowerConfig,
    kind: TowerKind,
    input: TowerBatch<'_, T>,
) -> Result<(Var, usize, usize, Vec<bool>, Vec<usize>)> {
    let p = kind.prefix();
    match (&cfg.input, input) {
        (&TowerInput::Image { grid, patch, channels }, TowerBatch::Image(images)) => {
            let patches = patchify(images, grid, patch, channels)?;
            let n = images.shape()[0];
            if n == 0 {
                return Err(Error::shape("encode_image", "empty batch"));
            }
            let per = (grid / patch) * (grid / patch);
            let tokens = per + 1;
            let pv = tape.constant(patches);
            let pe = tape.matmul(pv, bound.get(&format!("{p}.patch"))?)?;
            let cls = tape.select_rows(bound.get(&format!("{p}.cls"))?, &vec![0; n])?;
            let all = tape.concat_rows(&[cls, pe])?;
            let order: Vec<usize> =
                (0..n).flat_map(|s| std::iter::once(s).chain((0..per).map(move |j| n + s * per + j))).collect();
            let x = tape.select_rows(all, &order)?;
            let pos_idx: Vec<usize> = (0..n).flat_map(|_| 0..tokens).collect();
            let pos = tape.select_rows(bound.get(&format!("{p}.pos"))?, &pos_idx)?;
            let x = tape.add(x, pos)?;
            let pool = (0..n).map(|s| s * tokens).collect();
            Ok((x, n, tokens, vec![true; n * tokens], pool))
        }
        (&TowerInput::Text { vocab, max_len }, TowerBatch::Text(tb)) => {
            let (n, len) = (tb.batch(), tb.len());
            if n == 0 {
                return Err(Error::shape("encode_text", "empty batch"));
            }
            if len == 0 || len > max_len {
                return Err(Error::shape("encode_text", format!("sequence length {len} outside 1..={max_len}")));
            }
            if let Some(&bad) = tb.ids().iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::shape("encode_text", format!("token {bad} outside vocabulary of {vocab}")));
            }
            let keep: Vec<bool> = tb.ids().iter().map(|&t| t != PAD).collect();
            let mut pool = Vec::with_capacity(n);
            for s in 0..n {
                let last = (0..len)
                    .rev()
                    .find(|&j| keep[s * len + j])
                    .ok_or_else(|| Error::invalid(format!("sequence {s} is all padding")))?;
                pool.push(s * len + last);
            }
            let ids: Vec<usize> = tb.ids().iter().map(|&t| t as usize).collect();
            let x = tape.select_rows(bound.get(&format!("{p}.tok"))?, &ids)?;
            let pos_idx: Vec<usize> = (0..n).flat_map(|_| 0..len).collect();
            let pos = tape.select_rows(bound.get(&format!("{p}.pos"))?, &pos_idx)?;
            let x = tape.add(x, pos)?;
            Ok((x, n, len, keep, pool))
        }
        _ => Err(Error::invalid(format!("wrong input kind for the {p} tower"))),
    }
}

/// Full tower: embed, blocks, pool, final norm, projection, L2 normalization.
pub fn tower_forward<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &TowerConfig,
    kind: TowerKind,
    input: TowerBatch<'_, T>,
    masks: Option<&TowerMaskVars>,
    opts: &ForwardOpts,
) -> Result<TowerRun> {
    if let Some(m) = masks {
        for (what, v, want) in
            [("head", m.head, cfg.total_heads()), ("intermediate", m.int, cfg.total_ffn()), ("embedding", m.embed, cfg.hidden)]
        {
            let n = tape.value(v).numel();
            if n != want {
                return Err(Error::shape("tower_forward", format!("{what} mask has {n} entries, tower needs {want}")));
            }
        }
    }
    if let Some(l) = opts.skip_layer {
        if l >= cfg.layers() {
            return Err(Error::invalid(format!("layer {l} out of range for {} layers", cfg.layers())));
        }
    }
    let (mut x, batch, tokens, token_mask, pool) = embed_input(tape, bound, cfg, kind, input)?;
    let m_embed = masks.map(|m| m.embed);
    if let Some(m) = m_embed {
        x = tape.mul_row(x, m)?;
    }
    let key_mask = if token_mask.iter().all(|&k| k) { None } else { Some(token_mask.as_slice()) };
    let seq = SeqShape { batch, tokens, key_mask };
    let mut stream = Vec::new();
    for l in 0..cfg.layers() {
        if opts.capture {
            stream.push(x);
        }
        if opts.skip_layer == Some(l) {
            continue;
        }
        let blk = BlockVars::bind(bound, kind, cfg, l)?;
        let (m_head, m_int) = match masks {
            Some(m) => {
                let ho = cfg.head_offset(l);
                let fo = cfg.ffn_offset(l);
                let h: Vec<usize> = (ho..ho + cfg.heads[l]).collect();
                let f: Vec<usize> = (fo..fo + cfg.ffn[l]).collect();
                (Some(tape.select_cols(m.head, &h)?), Some(tape.select_cols(m.int, &f)?))
            }
            None => (None, None),
        };
        x = block_forward(tape, &blk, x, seq, m_head, m_int, m_embed)?;
    }
    if opts.capture {
        stream.push(x);
    }
    let p = kind.prefix();
    let pooled = tape.select_rows(x, &pool)?;
    let (g, b) = (bound.get(&format!("{p}.ln_post.g"))?, bound.get(&format!("{p}.ln_post.b"))?);
    let normed = tape.layer_norm(pooled, g, b, m_embed, T::c(LN_EPS))?;
    let projected = tape.matmul(normed, bound.get(&format!("{p}.proj"))?)?;
    let embedding = tape.l2_normalize_rows(projected)?;
    Ok(TowerRun { embedding, stream, token_mask, batch, tokens })
}
