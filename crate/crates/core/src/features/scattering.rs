use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Ctx};
use super::FeatureError;
use crate::asc_sim::ASC_PARAMS;
use crate::autodiff::{ParamId, ParamStore, ReduceKind, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScatteringConfig {
    /// Neighbours per vertex.
    pub k: usize,
    /// Output width of each EdgeConv layer.
    pub widths: Vec<usize>,
    /// Width of the per-vertex embedding of the concatenated layer outputs.
    pub embed: usize,
    pub leaky_slope: f64,
}

impl Default for ScatteringConfig {
    fn default() -> Self {
        Self {
            k: 8,
            widths: vec![64, 64, 128],
            embed: 128,
            leaky_slope: 0.2,
        }
    }
}

impl ScatteringConfig {
    /// `2·embed`: max and mean pooled halves.
    pub fn output_dim(&self) -> usize {
        2 * self.embed
    }
}

/// Indices of the `k` nearest rows (Euclidean) of each row of a `p × d` matrix.
///
/// Self is excluded and equal distances go to the lower index. Row-major `p × k`.
pub fn knn_graph<S: Scalar>(
    x: &[S],
    p: usize,
    d: usize,
    k: usize,
) -> Result<Vec<usize>, FeatureError> {
    if k == 0 || k >= p {
        return Err(FeatureError::Neighbours { k, p });
    }
    if x.len() != p * d {
        return Err(FeatureError::Input(format!(
            "{} values for {p} x {d} points",
            x.len()
        )));
    }
    let mut out = Vec::with_capacity(p * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(p - 1);
    for i in 0..p {
        let xi = &x[i * d..(i + 1) * d];
        cand.clear();
        for j in (0..p).filter(|&j| j != i) {
            let xj = &x[j * d..(j + 1) * d];
            let dist: f64 = xi
                .iter()
                .zip(xj)
                .map(|(a, b)| (a.f64() - b.f64()).powi(2))
                .sum();
            cand.push((dist, j));
        }
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        cand.select_nth_unstable_by(k - 1, order);
        cand[..k].sort_unstable_by(order);
        out.extend(cand[..k].iter().map(|c| c.1));
    }
    Ok(out)
}

/// Edge-pair tables for a batch of `n` graphs of `p` vertices:
/// `(centre, neighbour)` global row indices, `k` consecutive entries per vertex.
pub fn batch_edges<S: Scalar>(
    x: &[S],
    n: usize,
    p: usize,
    d: usize,
    k: usize,
) -> Result<(Vec<usize>, Vec<usize>), FeatureError> {
    let mut centre = Vec::with_capacity(n * p * k);
    let mut neighbour = Vec::with_capacity(n * p * k);
    for s in 0..n {
        let table = knn_graph(&x[s * p * d..(s + 1) * p * d], p, d, k)?;
        for i in 0..p {
            for &j in &table[i * k..(i + 1) * k] {
                centre.push(s * p + i);
                neighbour.push(s * p + j);
            }
        }
    }
    Ok((centre, neighbour))
}

/// Shared edge function `H(x_i, x_j − x_i)`: a 1×1 convolution over the pair,
/// normalization and leaky ReLU, summed over each vertex's neighbours.
#[derive(Clone, Debug)]
pub struct EdgeConv {
    /// `(2·d_in, d_out)`: rows `0..d_in` act on `x_i`, the rest on `x_j − x_i`.
    pub weight: ParamId,
    pub bn: BatchNorm,
    pub input: usize,
    pub output: usize,
    pub slope: f64,
}

impl EdgeConv {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
        slope: f64,
    ) -> Self {
        let std = (2.0 / (2 * input) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..2 * input * output)
            .map(|_| S::lit(dist.sample(rng)))
            .collect();
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::new(vec![2 * input, output], data).expect("shape"),
            ),
            bn: BatchNorm::new(store, &format!("{name}.bn"), output),
            input,
            output,
            slope,
        }
    }

    /// `x` is `(rows, d_in)`; the edge tables come from [`batch_edges`].
    ///
    /// Uses `[x_i, x_j − x_i]·W = x_i·(W_a − W_b) + x_j·W_b`, so the projection
    /// runs once per vertex instead of once per edge.
    pub fn forward<S: Scalar>(
        &self,
        ctx: &mut Ctx<S>,
        x: Var,
        centre: &[usize],
        neighbour: &[usize],
        k: usize,
    ) -> Result<Var, FeatureError> {
        let w = ctx.param(self.weight);
        let top: Vec<usize> = (0..self.input).collect();
        let bottom: Vec<usize> = (self.input..2 * self.input).collect();
        let w_a = ctx.g.gather_rows(w, &top)?;
        let w_b = ctx.g.gather_rows(w, &bottom)?;
        let w_self = ctx.g.sub(w_a, w_b)?;
        let own = ctx.g.matmul(x, w_self)?;
        let other = ctx.g.matmul(x, w_b)?;
        let own = ctx.g.gather_rows(own, centre)?;
        let other = ctx.g.gather_rows(other, neighbour)?;
        let pre = ctx.g.add(own, other)?;
        self.finish(ctx, pre, k)
    }

    /// Reference form that materializes every `[x_i, x_j − x_i]` pair.
    pub fn forward_naive<S: Scalar>(
        &self,
        ctx: &mut Ctx<S>,
        x: Var,
        centre: &[usize],
        neighbour: &[usize],
        k: usize,
    ) -> Result<Var, FeatureError> {
        let w = ctx.param(self.weight);
        let xi = ctx.g.gather_rows(x, centre)?;
        let xj = ctx.g.gather_rows(x, neighbour)?;
        let diff = ctx.g.sub(xj, xi)?;
        let pair = ctx.g.concat(&[xi, diff], 1)?;
        let pre = ctx.g.matmul(pair, w)?;
        self.finish(ctx, pre, k)
    }

    fn finish<S: Scalar>(&self, ctx: &mut Ctx<S>, pre: Var, k: usize) -> Result<Var, FeatureError> {
        let h = self.bn.forward(ctx, pre)?;
        let h = ctx.g.leaky_relu(h, S::lit(self.slope))?;
        Ok(ctx.g.reduce_row_groups(h, k, ReduceKind::Sum)?)
    }
}

/// Per-vertex 1×1 projection with normalization and leaky ReLU.
#[derive(Clone, Debug)]
pub struct PointEmbed {
    pub weight: ParamId,
    pub bn: BatchNorm,
    pub slope: f64,
}

impl PointEmbed {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
        slope: f64,
    ) -> Self {
        let dist = Normal::new(0.0, (2.0 / input as f64).sqrt()).expect("finite std");
        let data = (0..input * output).map(|_| S::lit(dist.sample(rng))).collect();
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::new(vec![input, output], data).expect("shape"),
            ),
            bn: BatchNorm::new(store, &format!("{name}.bn"), output),
            slope,
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var, FeatureError> {
        let w = ctx.param(self.weight);
        let h = ctx.g.matmul(x, w)?;
        let h = self.bn.forward(ctx, h)?;
        Ok(ctx.g.leaky_relu(h, S::lit(self.slope))?)
    }
}

/// Stacked EdgeConv layers over per-sample KNN graphs, recomputed in each
/// layer's input feature space; the concatenated layer outputs are embedded
/// per vertex, then max and mean pooled over vertices.
#[derive(Clone, Debug)]
pub struct ScatteringBranch {
    pub config: ScatteringConfig,
    pub layers: Vec<EdgeConv>,
    pub embed: PointEmbed,
}

impl ScatteringBranch {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        config: &ScatteringConfig,
    ) -> Self {
        let mut input = ASC_PARAMS;
        let layers = config
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = EdgeConv::new(
                    store,
                    rng,
                    &format!("scatter.edge{i}"),
                    input,
                    w,
                    config.leaky_slope,
                );
                input = w;
                l
            })
            .collect();
        let embed = PointEmbed::new(
            store,
            rng,
            "scatter.embed",
            config.widths.iter().sum(),
            config.embed,
            config.leaky_slope,
        );
        Self {
            config: config.clone(),
            layers,
            embed,
        }
    }

    /// `(n·p, 7)` normalized parameters to `(n, 2·embed)` features, max half first.
    pub fn forward<S: Scalar>(
        &self,
        ctx: &mut Ctx<S>,
        asc: Var,
        n: usize,
    ) -> Result<Var, FeatureError> {
        let s = ctx.g.shape(asc).to_vec();
        if s.len() != 2 || s[1] != ASC_PARAMS || n == 0 || s[0] % n != 0 {
            return Err(FeatureError::Input(format!(
                "scattering batch {s:?} for {n} samples"
            )));
        }
        let p = s[0] / n;
        let k = self.config.k;
        let mut x = asc;
        let mut outputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let d = ctx.g.shape(x)[1];
            let (centre, neighbour) = batch_edges(ctx.g.value(x), n, p, d, k)?;
            x = layer.forward(ctx, x, &centre, &neighbour, k)?;
            outputs.push(x);
        }
        let all = ctx.g.concat(&outputs, 1)?;
        let all = self.embed.forward(ctx, all)?;
        let max = ctx.g.reduce_row_groups(all, p, ReduceKind::Max)?;
        let mean = ctx.g.reduce_row_groups(all, p, ReduceKind::Mean)?;
        Ok(ctx.g.concat(&[max, mean], 1)?)
    }
}
