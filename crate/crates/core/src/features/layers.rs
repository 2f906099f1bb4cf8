use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{
    AutodiffError, BatchStats, Binding, Graph, ParamId, ParamStore, Scalar, Tensor, Var,
};

/// One forward pass: the tape, its parameter bindings and the batch statistics
/// it produced.
pub struct Ctx<'s, S: Scalar> {
    pub g: Graph<S>,
    pub bind: Binding,
    pub store: &'s ParamStore<S>,
    pub train: bool,
    pub stats: Vec<StatUpdate>,
}

/// Batch statistics waiting to be folded into a normalization layer's running averages.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch: BatchStats,
}

impl<'s, S: Scalar> Ctx<'s, S> {
    pub fn new(store: &'s ParamStore<S>, train: bool) -> Self {
        Self {
            g: Graph::new(),
            bind: Binding::new(),
            store,
            train,
            stats: Vec::new(),
        }
    }

    /// Continues recording onto an existing tape.
    pub fn with_graph(g: Graph<S>, store: &'s ParamStore<S>, train: bool) -> Self {
        Self {
            g,
            bind: Binding::new(),
            store,
            train,
            stats: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.bind.bind(&mut self.g, self.store, id)
    }
}

/// `running ← m·running + (1 − m)·batch` for every recorded update.
pub fn apply_running_stats<S: Scalar>(
    store: &mut ParamStore<S>,
    stats: &[StatUpdate],
    momentum: f64,
) {
    for u in stats {
        for (id, batch) in [(u.mean, &u.batch.mean), (u.var, &u.batch.var)] {
            let buf = store.get_mut(id).value.data_mut();
            for (r, &b) in buf.iter_mut().zip(batch) {
                *r = S::lit(momentum * r.f64() + (1.0 - momentum) * b);
            }
        }
    }
}

fn normal_tensor<S: Scalar, R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| S::lit(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Bias-free 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(rng, vec![cout, cin, k, k], std),
        );
        Self {
            weight,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var, AutodiffError> {
        let w = ctx.param(self.weight);
        ctx.g.conv2d(x, w, self.stride, self.pad)
    }
}

/// Per-channel normalization (channel axis 1) with running averages for evaluation.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::full(vec![channels], S::one()),
            ),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            running_mean: store.add_buffer(
                format!("{name}.running_mean"),
                Tensor::zeros(vec![channels]),
            ),
            running_var: store.add_buffer(
                format!("{name}.running_var"),
                Tensor::full(vec![channels], S::one()),
            ),
            eps: 1e-5,
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var, AutodiffError> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        if ctx.train {
            let (y, batch) = ctx.g.batch_norm_train(x, gamma, beta, self.eps)?;
            ctx.stats.push(StatUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch,
            });
            Ok(y)
        } else {
            let mean = ctx.store.value(self.running_mean).to_f64_vec();
            let var = ctx.store.value(self.running_var).to_f64_vec();
            ctx.g.batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
        }
    }
}

/// Affine map `x·W + b` on `(rows, in)` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
    ) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let data = (0..input * output)
            .map(|_| S::lit(rng.gen_range(-bound..bound)))
            .collect();
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::new(vec![input, output], data).expect("shape"),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![output])),
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var, AutodiffError> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let y = ctx.g.matmul(x, w)?;
        ctx.g.add_channel(y, b)
    }
}

/// Two 3×3 conv + normalization stages with an identity or projected shortcut.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    shortcut: Option<(Conv, BatchNorm)>,
}

impl ResidualBlock {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let shortcut = (cin != cout || stride != 1).then(|| {
            (
                Conv::new(
                    store,
                    rng,
                    &format!("{name}.shortcut"),
                    cin,
                    cout,
                    1,
                    stride,
                ),
                BatchNorm::new(store, &format!("{name}.shortcut_bn"), cout),
            )
        });
        Self {
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, stride),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), cout),
            conv2: Conv::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), cout),
            shortcut,
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var, AutodiffError> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.g.relu(h)?;
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let sum = ctx.g.add(h, skip)?;
        ctx.g.relu(sum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::<f32>::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let update = StatUpdate {
            mean: bn.running_mean,
            var: bn.running_var,
            batch: BatchStats {
                mean: vec![1.0, -2.0],
                var: vec![3.0, 0.0],
            },
        };
        apply_running_stats(&mut store, &[update], 0.9);
        let mean = store.value(bn.running_mean).data();
        let var = store.value(bn.running_var).data();
        assert!((mean[0] - 0.1).abs() < 1e-7 && (mean[1] + 0.2).abs() < 1e-7);
        assert!((var[0] - 1.2).abs() < 1e-6 && (var[1] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn eval_mode_records_no_statistics() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(1);
        let block = ResidualBlock::new(&mut store, &mut rng, "b", 2, 4, 2);
        let x = Tensor::full(vec![2, 2, 8, 8], 0.5);
        let mut ctx = Ctx::new(&store, false);
        let xv = ctx.g.constant(&x);
        let y = block.forward(&mut ctx, xv).unwrap();
        assert_eq!(ctx.g.shape(y), &[2, 4, 4, 4]);
        assert!(ctx.stats.is_empty());
        let mut ctx = Ctx::new(&store, true);
        let xv = ctx.g.constant(&x);
        block.forward(&mut ctx, xv).unwrap();
        assert_eq!(ctx.stats.len(), 3);
    }
}
