//! Attention primitives: plain self-attention, key/value fusion with support
//! features, the joint query/key/value variant, cross-attention over a token
//! list, and random subsampling of pooled support keys/values.
//!
//! The graph-level functions are what the network uses; the value-level
//! wrappers run the same code on a throwaway [`Graph`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var, ZERO};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub num_heads: usize,
}

impl AttentionParams {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix, wo: Matrix, num_heads: usize) -> Result<Self> {
        let inner = wq.cols;
        let ok = num_heads > 0
            && inner % num_heads == 0
            && wk.cols == inner
            && wv.cols == inner
            && wk.rows == wv.rows
            && wo.rows == inner;
        if !ok {
            return Err(Error::ShapeMismatch("inconsistent attention projections".into()));
        }
        Ok(Self { wq, wk, wv, wo, num_heads })
    }

    /// Square projections of width `width` drawn from `N(0, 1/width)`.
    pub fn random(width: usize, num_heads: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (1.0 / width as f64).sqrt();
        let mut m = || Matrix::randn(width, width, std, &mut rng);
        Self::new(m(), m(), m(), m(), num_heads).expect("square projections")
    }

    pub fn head_dim(&self) -> usize {
        self.wq.cols / self.num_heads
    }

    pub fn vars(&self, g: &mut Graph) -> AttnVars {
        AttnVars {
            wq: g.constant(self.wq.clone()),
            wk: g.constant(self.wk.clone()),
            wv: g.constant(self.wv.clone()),
            wo: g.constant(self.wo.clone()),
            heads: self.num_heads,
        }
    }
}

/// Flattened `L×C` features of one image at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub tokens: Matrix,
    pub h: usize,
    pub w: usize,
}

impl FeatureMap {
    pub fn new(tokens: Matrix, h: usize, w: usize) -> Result<Self> {
        if tokens.rows != h * w {
            return Err(Error::ShapeMismatch(format!("{} tokens for a {h}x{w} grid", tokens.rows)));
        }
        Ok(Self { tokens, h, w })
    }

    /// A `1×L` strip, handy for token lists without spatial layout.
    pub fn strip(tokens: Matrix) -> Self {
        let w = tokens.rows;
        Self { tokens, h: 1, w }
    }

    pub fn len(&self) -> usize {
        self.tokens.rows
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows == 0
    }
}

/// Projected keys and values with the support index each row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct KVSet {
    pub keys: Matrix,
    pub values: Matrix,
    pub origin: Vec<usize>,
}

impl KVSet {
    pub fn new(keys: Matrix, values: Matrix, origin: usize) -> Result<Self> {
        if keys.rows != values.rows {
            return Err(Error::ShapeMismatch("keys and values differ in length".into()));
        }
        let n = keys.rows;
        Ok(Self { keys, values, origin: vec![origin; n] })
    }

    pub fn len(&self) -> usize {
        self.keys.rows
    }

    pub fn is_empty(&self) -> bool {
        self.keys.rows == 0
    }
}

/// Projection weights already placed on a graph.
#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

/// Multi-head scaled dot-product attention on projected `q`, `k`, `v`.
/// Key columns with `keep[j] == false` receive exactly zero weight.
pub fn multi_head(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, keep: Option<&[bool]>) -> Var {
    let inner = g.shape(q).1;
    let d = inner / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * d, d), g.slice_cols(k, h * d, d), g.slice_cols(v, h * d, d))
        };
        let s = g.matmul_t(qh, kh);
        let s = g.scale(s, scale);
        let p = g.softmax(s, keep);
        outs.push(g.matmul(p, vh));
    }
    g.concat_cols(&outs)
}

/// Query rows of `xq` attend over the keys/values of `sources`
/// (which should list `xq` first for self/fusion attention).
pub fn attend_graph(
    g: &mut Graph,
    p: &AttnVars,
    xq: Var,
    sources: &[Var],
    keep: Option<&[bool]>,
) -> Var {
    let q = g.matmul(xq, p.wq);
    let src = g.concat_rows(sources);
    let k = g.matmul(src, p.wk);
    let v = g.matmul(src, p.wv);
    let o = multi_head(g, q, k, v, p.heads, keep);
    g.matmul(o, p.wo)
}

fn check_width(x: &Matrix, w: &Matrix, what: &str) -> Result<()> {
    if x.cols != w.rows {
        return Err(Error::ShapeMismatch(format!(
            "{what}: input width {} vs projection {}",
            x.cols, w.rows
        )));
    }
    Ok(())
}

fn check_self(x: &FeatureMap, p: &AttentionParams) -> Result<()> {
    check_width(&x.tokens, &p.wq, "query")?;
    check_width(&x.tokens, &p.wk, "key")
}

pub fn self_attn(x: &FeatureMap, p: &AttentionParams) -> Result<FeatureMap> {
    fusion_attn(x, &[], p, None)
}

/// Key/value fusion: query tokens attend over `[K_q, K_s1, …]`.
///
/// `gate`, when present, holds one flag per support token (all supports
/// concatenated in order); gated-out tokens get zero attention weight.
pub fn fusion_attn(
    xq: &FeatureMap,
    supports: &[FeatureMap],
    p: &AttentionParams,
    gate: Option<&[bool]>,
) -> Result<FeatureMap> {
    check_self(xq, p)?;
    for s in supports {
        check_self(s, p)?;
    }
    let support_len: usize = supports.iter().map(FeatureMap::len).sum();
    let keep = match gate {
        Some(gt) if gt.len() != support_len => {
            return Err(Error::GateLength { expected: support_len, got: gt.len() })
        }
        Some(gt) => {
            let mut k = vec![true; xq.len()];
            k.extend_from_slice(gt);
            Some(k)
        }
        None => None,
    };
    let mut g = Graph::new();
    let vars = p.vars(&mut g);
    let q = g.constant(xq.tokens.clone());
    let mut sources = vec![q];
    sources.extend(supports.iter().map(|s| g.constant(s.tokens.clone())));
    let out = attend_graph(&mut g, &vars, q, &sources, keep.as_deref());
    FeatureMap::new(g.value(out).clone(), xq.h, xq.w)
}

/// Joint attention: query and support rows all attend over both token sets.
pub fn qkv_fusion_attn(
    xq: &FeatureMap,
    xs: &FeatureMap,
    p: &AttentionParams,
) -> Result<(FeatureMap, FeatureMap)> {
    check_self(xq, p)?;
    check_self(xs, p)?;
    let mut g = Graph::new();
    let vars = p.vars(&mut g);
    let q = g.constant(xq.tokens.clone());
    let s = g.constant(xs.tokens.clone());
    let joint = g.concat_rows(&[q, s]);
    let out = attend_graph(&mut g, &vars, joint, &[joint], None);
    let out = g.value(out);
    let nq = xq.len();
    let q_rows: Vec<usize> = (0..nq).collect();
    let s_rows: Vec<usize> = (nq..out.rows).collect();
    Ok((
        FeatureMap::new(out.select_rows(&q_rows), xq.h, xq.w)?,
        FeatureMap::new(out.select_rows(&s_rows), xs.h, xs.w)?,
    ))
}

/// Queries from `x`, keys and values from a token list.
pub fn cross_attn(x: &FeatureMap, tokens: &Matrix, p: &AttentionParams) -> Result<FeatureMap> {
    check_width(&x.tokens, &p.wq, "query")?;
    check_width(tokens, &p.wk, "token")?;
    let mut g = Graph::new();
    let vars = p.vars(&mut g);
    let q = g.constant(x.tokens.clone());
    let t = g.constant(tokens.clone());
    let out = attend_graph(&mut g, &vars, q, &[t], None);
    FeatureMap::new(g.value(out).clone(), x.h, x.w)
}

/// Per-head softmax weights of `q` against `k` (both already projected).
pub fn attention_weights(q: &Matrix, k: &Matrix, heads: usize) -> Vec<Matrix> {
    let d = q.cols / heads;
    let scale = 1.0 / (d as f64).sqrt();
    (0..heads)
        .map(|h| {
            let mut g = Graph::new();
            let qv = g.constant(q.clone());
            let kv = g.constant(k.clone());
            let qh = g.slice_cols(qv, h * d, d);
            let kh = g.slice_cols(kv, h * d, d);
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, scale);
            let p = g.softmax(s, None);
            g.value(p).clone()
        })
        .collect()
}

/// Uniform sample without replacement of `target_len` row indices out of
/// `total`, returned in ascending order. Identity when nothing is dropped.
pub fn sample_kv_indices(total: usize, target_len: usize, seed: u64) -> Result<Vec<usize>> {
    if target_len == 0 || target_len > total {
        return Err(Error::PoolTooSmall { requested: target_len, available: total });
    }
    if target_len == total {
        return Ok((0..total).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, total, target_len).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Pools the supports' key/value pairs and keeps a random `target_len` of them.
pub fn sample_support_kv(kvs: &[KVSet], target_len: usize, seed: u64) -> Result<KVSet> {
    let total: usize = kvs.iter().map(KVSet::len).sum();
    let idx = sample_kv_indices(total, target_len, seed)?;
    let keys: Vec<&Matrix> = kvs.iter().map(|k| &k.keys).collect();
    let values: Vec<&Matrix> = kvs.iter().map(|k| &k.values).collect();
    let origin: Vec<usize> = kvs.iter().flat_map(|k| k.origin.iter().copied()).collect();
    Ok(KVSet {
        keys: Matrix::vstack(&keys).select_rows(&idx),
        values: Matrix::vstack(&values).select_rows(&idx),
        origin: idx.iter().map(|&i| origin[i]).collect(),
    })
}

/// Row-gather of a graph node by the given row indices.
pub fn gather_rows(g: &mut Graph, x: Var, rows: &[usize]) -> Var {
    let cols = g.shape(x).1;
    let index = rows
        .iter()
        .flat_map(|&r| (0..cols).map(move |c| if r == ZERO { ZERO } else { r * cols + c }))
        .collect();
    g.gather(x, rows.len(), cols, index)
}
