//! Discrete codebook, exact nearest-neighbour and Top-k quantisation,
//! candidate fusion and hit-rate measurement.
//!
//! Distances are Euclidean. Candidates are ranked by `(squared distance,
//! index)`, so ties always resolve to the lowest code index.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::softmax_in_place;
use crate::error::{shape_err, Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// `size x dim` matrix of code vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    size: usize,
    dim: usize,
    entries: Vec<f64>,
}

impl Codebook {
    pub fn new(size: usize, dim: usize, entries: Vec<f64>) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::InvalidArgument("codebook needs K >= 1 and n_z >= 1".into()));
        }
        if entries.len() != size * dim {
            return Err(shape_err("Codebook::new", &[size, dim], &[entries.len()]));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook entries"));
        }
        Ok(Codebook { size, dim, entries })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(shape_err("Codebook::from_tensor", &[0, 0], t.shape()));
        }
        Self::new(t.shape()[0], t.shape()[1], t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.size, self.dim], self.entries.clone()).expect("sizes agree")
    }

    pub fn random<R: Rng + ?Sized>(size: usize, dim: usize, rng: &mut R) -> Self {
        let t = Tensor::randn(&[size, dim], 1.0, rng);
        Self::new(size, dim, t.into_data()).expect("finite gaussian entries")
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    /// Exhaustive `(index, squared distance)` of the nearest code.
    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for j in 0..self.size {
            let d = math::sq_dist(v, self.entry(j));
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    /// The `k` nearest codes of `v`, ascending by `(squared distance, index)`.
    pub fn nearest_k(&self, v: &[f64], k: usize, out: &mut Vec<(f64, usize)>) {
        out.clear();
        for j in 0..self.size {
            let d = math::sq_dist(v, self.entry(j));
            if out.len() == k {
                if d >= out[k - 1].0 {
                    continue;
                }
                out.pop();
            }
            let pos = out.iter().position(|&(od, _)| d < od).unwrap_or(out.len());
            out.insert(pos, (d, j));
        }
    }
}

/// `height x width` grid of `dim`-vectors, stored cell-major
/// (`values[(y * width + x) * dim + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<f64>,
}

impl LatentGrid {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * dim {
            return Err(shape_err("LatentGrid::new", &[height, width, dim], &[values.len()]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent grid"));
        }
        Ok(LatentGrid { height, width, dim, values })
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        LatentGrid { height, width, dim, values: vec![0.0; height * width * dim] }
    }

    pub fn random<R: Rng + ?Sized>(height: usize, width: usize, dim: usize, rng: &mut R) -> Self {
        let t = Tensor::randn(&[height * width * dim], 1.0, rng);
        LatentGrid { height, width, dim, values: t.into_data() }
    }

    /// Converts sample `n` of an NCHW tensor.
    pub fn from_nchw(t: &Tensor, n: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || n >= s[0] {
            return Err(shape_err("LatentGrid::from_nchw", &[n + 1, 0, 0, 0], s));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let src = &t.data()[n * c * h * w..(n + 1) * c * h * w];
        let mut values = vec![0.0; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                values[p * c + ch] = src[ch * h * w + p];
            }
        }
        Self::new(h, w, c, values)
    }

    /// All samples of an NCHW tensor.
    pub fn unbatch(t: &Tensor) -> Result<Vec<Self>> {
        let n = t.shape().first().copied().unwrap_or(0);
        (0..n).map(|i| Self::from_nchw(t, i)).collect()
    }

    /// `[1, dim, height, width]` tensor.
    pub fn to_nchw(&self) -> Tensor {
        let (c, hw) = (self.dim, self.height * self.width);
        let mut data = vec![0.0; c * hw];
        for p in 0..hw {
            for ch in 0..c {
                data[ch * hw + p] = self.values[p * c + ch];
            }
        }
        Tensor::from_vec(&[1, c, self.height, self.width], data).expect("sizes agree")
    }

    /// Stacks grids into an NCHW batch.
    pub fn batch(grids: &[LatentGrid]) -> Result<Tensor> {
        let parts: Vec<Tensor> = grids.iter().map(|g| g.to_nchw().index_outer(0)).collect();
        Tensor::stack(&parts)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    fn check_dim(&self, codebook: &Codebook) -> Result<()> {
        if self.dim != codebook.dim() {
            return Err(shape_err("latent dimension vs codebook", &[codebook.dim()], &[self.dim]));
        }
        Ok(())
    }
}

/// Per-cell match outcome. `candidate_*` hold `k` entries per cell in
/// ascending distance; `indices` holds the finally selected code.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub indices: Vec<usize>,
    pub candidate_indices: Vec<usize>,
    pub candidate_distances: Vec<f64>,
}

impl MatchResult {
    pub fn candidates(&self, cell: usize) -> &[usize] {
        &self.candidate_indices[cell * self.k..(cell + 1) * self.k]
    }

    pub fn distances(&self, cell: usize) -> &[f64] {
        &self.candidate_distances[cell * self.k..(cell + 1) * self.k]
    }
}

fn gather(codebook: &Codebook, indices: &[usize], height: usize, width: usize) -> LatentGrid {
    let mut values = Vec::with_capacity(indices.len() * codebook.dim());
    for &i in indices {
        values.extend_from_slice(codebook.entry(i));
    }
    LatentGrid { height, width, dim: codebook.dim(), values }
}

/// Exact nearest-code quantisation of every cell.
pub fn quantize_nearest(latents: &LatentGrid, codebook: &Codebook) -> Result<(MatchResult, LatentGrid)> {
    let m = topk_candidates(latents, codebook, 1)?;
    let q = gather(codebook, &m.indices, latents.height, latents.width);
    Ok((m, q))
}

/// The `k` nearest distinct codes per cell.
pub fn topk_candidates(latents: &LatentGrid, codebook: &Codebook, k: usize) -> Result<MatchResult> {
    latents.check_dim(codebook)?;
    if k == 0 || k > codebook.size() {
        return Err(Error::InvalidArgument(alloc::format!("k = {k} must lie in 1..={}", codebook.size())));
    }
    if latents.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent grid"));
    }
    let cells = latents.cells();
    let mut candidate_indices = Vec::with_capacity(cells * k);
    let mut candidate_distances = Vec::with_capacity(cells * k);
    let mut indices = Vec::with_capacity(cells);
    let mut best = Vec::with_capacity(k + 1);
    for i in 0..cells {
        codebook.nearest_k(latents.cell(i), k, &mut best);
        indices.push(best[0].1);
        for &(d, j) in &best {
            candidate_indices.push(j);
            candidate_distances.push(math::sqrt(d));
        }
    }
    Ok(MatchResult { height: latents.height, width: latents.width, k, indices, candidate_indices, candidate_distances })
}

/// Parameters of the attention-style candidate fusion.
///
/// Scores are `(q W_q) . (c_j W_k) / sqrt(dim)`; the softmax-weighted sum of
/// the raw candidates is blended with the nearest candidate through the
/// gate `g = clamp(gate, 0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub dim: usize,
    pub k: usize,
    /// `dim x dim`, row-major.
    pub query_proj: Vec<f64>,
    /// `dim x dim`, row-major.
    pub key_proj: Vec<f64>,
    pub gate: f64,
}

impl FusionParams {
    /// Random projections with a closed gate: fusion returns the nearest candidate.
    pub fn identity_gate<R: Rng + ?Sized>(dim: usize, k: usize, rng: &mut R) -> Self {
        let std = 1.0 / math::sqrt(dim as f64);
        FusionParams {
            dim,
            k,
            query_proj: Tensor::randn(&[dim, dim], std, rng).into_data(),
            key_proj: Tensor::randn(&[dim, dim], std, rng).into_data(),
            gate: 0.0,
        }
    }

    /// Zero projections with an open gate: fusion returns the candidate mean.
    pub fn uniform(dim: usize, k: usize) -> Self {
        FusionParams { dim, k, query_proj: vec![0.0; dim * dim], key_proj: vec![0.0; dim * dim], gate: 1.0 }
    }

    pub fn effective_gate(&self) -> f64 {
        self.gate.clamp(0.0, 1.0)
    }

    pub fn from_tensors(k: usize, query_proj: &Tensor, key_proj: &Tensor, gate: &Tensor) -> Result<Self> {
        let dim = query_proj.shape()[0];
        query_proj.expect_shape(&[dim, dim], "fusion query projection")?;
        key_proj.expect_shape(&[dim, dim], "fusion key projection")?;
        gate.expect_shape(&[1], "fusion gate")?;
        Ok(FusionParams {
            dim,
            k,
            query_proj: query_proj.data().to_vec(),
            key_proj: key_proj.data().to_vec(),
            gate: gate.data()[0],
        })
    }
}

/// `out = v W` for row-major `dim x dim` `W`.
fn project(v: &[f64], w: &[f64], dim: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (vi, row) in v.iter().zip(w.chunks_exact(dim)) {
        for (o, wij) in out.iter_mut().zip(row) {
            *o += vi * wij;
        }
    }
}

/// `out = W q` for row-major `dim x dim` `W`.
fn project_transposed(q: &[f64], w: &[f64], dim: usize, out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(dim)) {
        *o = math::dot(row, q);
    }
}

/// Fuses `candidates` (`k` vectors, nearest first) into one refined vector.
pub fn fuse_candidates(query: &[f64], candidates: &[&[f64]], params: &FusionParams) -> Result<Vec<f64>> {
    let dim = params.dim;
    if candidates.len() != params.k {
        return Err(shape_err("fusion candidate count", &[params.k], &[candidates.len()]));
    }
    if query.len() != dim || candidates.iter().any(|c| c.len() != dim) {
        return Err(shape_err("fusion vector dimension", &[dim], &[query.len()]));
    }
    let nearest = candidates[0];
    let g = params.effective_gate();
    if g == 0.0 {
        return Ok(nearest.to_vec());
    }
    // (q W_q) . (c W_k) = c . (W_k (q W_q)), so each candidate costs one dot product.
    let mut q = vec![0.0; dim];
    project(query, &params.query_proj, dim, &mut q);
    let mut u = vec![0.0; dim];
    project_transposed(&q, &params.key_proj, dim, &mut u);
    let inv = 1.0 / math::sqrt(dim as f64);
    let mut weights: Vec<f64> = candidates.iter().map(|c| math::dot(c, &u) * inv).collect();
    softmax_in_place(&mut weights);
    let mut out = vec![0.0; dim];
    for (w, c) in weights.iter().zip(candidates) {
        for (o, v) in out.iter_mut().zip(c.iter()) {
            *o += w * v;
        }
    }
    for (o, n) in out.iter_mut().zip(nearest) {
        *o = n + g * (*o - n);
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fused vector"));
    }
    Ok(out)
}

/// Top-k candidates, fusion, then nearest-code quantisation of the fused vector.
pub fn quantize_topk(
    latents: &LatentGrid,
    codebook: &Codebook,
    k: usize,
    params: &FusionParams,
) -> Result<(MatchResult, LatentGrid)> {
    if params.k != k || params.dim != codebook.dim() {
        return Err(shape_err("fusion parameters", &[k, codebook.dim()], &[params.k, params.dim]));
    }
    let mut m = topk_candidates(latents, codebook, k)?;
    for cell in 0..latents.cells() {
        let cands: Vec<&[f64]> = m.candidates(cell).iter().map(|&j| codebook.entry(j)).collect();
        let fused = fuse_candidates(latents.cell(cell), &cands, params)?;
        m.indices[cell] = codebook.nearest(&fused).0;
    }
    let q = gather(codebook, &m.indices, latents.height, latents.width);
    Ok((m, q))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitRateReport {
    pub k: usize,
    pub hits: u64,
    pub total: u64,
    pub rate: f64,
}

impl HitRateReport {
    pub fn empty(k: usize) -> Self {
        HitRateReport { k, hits: 0, total: 0, rate: 0.0 }
    }

    pub fn merge(self, other: HitRateReport) -> Result<Self> {
        if self.k != other.k {
            return Err(Error::InvalidArgument("merging hit rates with different k".into()));
        }
        let hits = self.hits + other.hits;
        let total = self.total + other.total;
        Ok(HitRateReport { k: self.k, hits, total, rate: if total == 0 { 0.0 } else { hits as f64 / total as f64 } })
    }
}

/// Fraction of cells whose ground-truth code is among the LQ latent's top-k.
pub fn hit_rate(lq_latents: &LatentGrid, gt_indices: &[usize], codebook: &Codebook, k: usize) -> Result<HitRateReport> {
    if gt_indices.len() != lq_latents.cells() {
        return Err(shape_err("hit_rate ground truth", &[lq_latents.cells()], &[gt_indices.len()]));
    }
    let m = topk_candidates(lq_latents, codebook, k)?;
    let hits = gt_indices.iter().enumerate().filter(|(cell, gt)| m.candidates(*cell).contains(gt)).count() as u64;
    let total = gt_indices.len() as u64;
    Ok(HitRateReport { k, hits, total, rate: if total == 0 { 0.0 } else { hits as f64 / total as f64 } })
}

/// Projections for the transformer-style global matcher used as a
/// complexity baseline.
#[derive(Debug, Clone)]
pub struct GlobalMatcher {
    dim: usize,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
}

impl GlobalMatcher {
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / math::sqrt(dim as f64);
        GlobalMatcher {
            dim,
            wq: Tensor::randn(&[dim, dim], std, rng).into_data(),
            wk: Tensor::randn(&[dim, dim], std, rng).into_data(),
            wv: Tensor::randn(&[dim, dim], std, rng).into_data(),
        }
    }

    /// One full softmax self-attention layer over the joint sequence of
    /// latent cells and codebook entries, then nearest-code classification
    /// of the updated cell tokens. Cost grows with `(cells + K)^2`.
    pub fn match_indices(&self, latents: &LatentGrid, codebook: &Codebook) -> Result<Vec<usize>> {
        latents.check_dim(codebook)?;
        let d = self.dim;
        let cells = latents.cells();
        let len = cells + codebook.size();
        let mut tokens = Vec::with_capacity(len * d);
        tokens.extend_from_slice(latents.values());
        tokens.extend_from_slice(codebook.entries());
        let proj = |w: &[f64]| {
            let mut out = vec![0.0; len * d];
            crate::tensor::gemm(len, d, d, &tokens, false, w, false, &mut out, 0.0);
            out
        };
        let q = proj(&self.wq);
        let k = proj(&self.wk);
        let v = proj(&self.wv);
        let mut scores = vec![0.0; len * len];
        crate::tensor::gemm(len, d, len, &q, false, &k, true, &mut scores, 0.0);
        let inv = 1.0 / math::sqrt(d as f64);
        for row in scores.chunks_mut(len) {
            row.iter_mut().for_each(|s| *s *= inv);
            softmax_in_place(row);
        }
        let mut updated = tokens.clone();
        crate::tensor::gemm(len, len, d, &scores, false, &v, false, &mut updated, 1.0);
        let mut logits = vec![0.0; cells * codebook.size()];
        crate::tensor::gemm(cells, d, codebook.size(), &updated, false, codebook.entries(), true, &mut logits, 0.0);
        Ok(logits
            .chunks(codebook.size())
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}
