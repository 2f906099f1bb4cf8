#![allow(dead_code)]

use clsdf::autodiff::{
    gradcheck, AutodiffError, GradCheckReport, Graph, ParamStore, ReduceKind, Tensor, Var,
};
use clsdf::features::{
    knn_graph, Ctx, FeatureError, FusionNet, ImageConfig, NetConfig, ScatteringBranch,
    ScatteringConfig,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero so kinks at 0 are never straddled.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(0.2..2.0)).collect(),
    )
    .unwrap()
}

/// Reduces any output to a scalar through a fixed random projection.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var, AutodiffError> {
    let shape = g.shape(out).to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let weights = randn(&mut r, &shape);
    let w = g.constant(&weights);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

/// One instance of every differentiation primitive.
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut r = rng(seed);
    let mut cases: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($input:expr),*], $build:expr) => {
            cases.push(Case { name: $name, inputs: vec![$($input),*], build: Box::new($build) })
        };
    }
    case!(
        "add",
        [randn(&mut r, &[3, 4]), randn(&mut r, &[3, 4])],
        move |g, v| {
            let o = g.add(v[0], v[1])?;
            project(g, o, seed)
        }
    );
    case!(
        "sub",
        [randn(&mut r, &[3, 4]), randn(&mut r, &[3, 4])],
        move |g, v| {
            let o = g.sub(v[0], v[1])?;
            project(g, o, seed)
        }
    );
    case!(
        "mul",
        [randn(&mut r, &[3, 4]), randn(&mut r, &[3, 4])],
        move |g, v| {
            let o = g.mul(v[0], v[1])?;
            project(g, o, seed)
        }
    );
    case!("scale", [randn(&mut r, &[5])], move |g, v| {
        let o = g.scale(v[0], -1.7)?;
        project(g, o, seed)
    });
    case!(
        "add_channel",
        [randn(&mut r, &[2, 3, 2, 2]), randn(&mut r, &[3])],
        move |g, v| {
            let o = g.add_channel(v[0], v[1])?;
            project(g, o, seed)
        }
    );
    case!(
        "matmul",
        [randn(&mut r, &[3, 5]), randn(&mut r, &[5, 2])],
        move |g, v| {
            let o = g.matmul(v[0], v[1])?;
            project(g, o, seed)
        }
    );
    case!(
        "conv2d_s1_p1",
        [randn(&mut r, &[2, 2, 5, 5]), randn(&mut r, &[3, 2, 3, 3])],
        move |g, v| {
            let o = g.conv2d(v[0], v[1], 1, 1)?;
            project(g, o, seed)
        }
    );
    case!(
        "conv2d_s2_p1",
        [randn(&mut r, &[2, 2, 6, 6]), randn(&mut r, &[3, 2, 3, 3])],
        move |g, v| {
            let o = g.conv2d(v[0], v[1], 2, 1)?;
            project(g, o, seed)
        }
    );
    case!(
        "conv2d_1x1_s2",
        [randn(&mut r, &[1, 3, 4, 4]), randn(&mut r, &[2, 3, 1, 1])],
        move |g, v| {
            let o = g.conv2d(v[0], v[1], 2, 0)?;
            project(g, o, seed)
        }
    );
    case!("relu", [away_from_zero(&mut r, &[4, 4])], move |g, v| {
        let o = g.relu(v[0])?;
        project(g, o, seed)
    });
    case!(
        "leaky_relu",
        [away_from_zero(&mut r, &[4, 4])],
        move |g, v| {
            let o = g.leaky_relu(v[0], 0.2)?;
            project(g, o, seed)
        }
    );
    case!(
        "batch_norm_train",
        [
            randn(&mut r, &[3, 2, 2, 2]),
            positive(&mut r, &[2]),
            randn(&mut r, &[2])
        ],
        move |g, v| {
            let (o, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            project(g, o, seed)
        }
    );
    case!(
        "batch_norm_eval",
        [
            randn(&mut r, &[3, 2, 2, 2]),
            positive(&mut r, &[2]),
            randn(&mut r, &[2])
        ],
        move |g, v| {
            let o = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 1.5], 1e-5)?;
            project(g, o, seed)
        }
    );
    case!("max_pool2d", [randn(&mut r, &[2, 2, 4, 4])], move |g, v| {
        let o = g.max_pool2d(v[0], 2, 2)?;
        project(g, o, seed)
    });
    case!("avg_pool2d", [randn(&mut r, &[2, 2, 5, 5])], move |g, v| {
        let o = g.avg_pool2d(v[0], 3, 2)?;
        project(g, o, seed)
    });
    case!(
        "global_avg_pool",
        [randn(&mut r, &[2, 3, 3, 3])],
        move |g, v| {
            let o = g.global_avg_pool(v[0])?;
            project(g, o, seed)
        }
    );
    case!(
        "global_max_pool",
        [randn(&mut r, &[2, 3, 3, 3])],
        move |g, v| {
            let o = g.global_max_pool(v[0])?;
            project(g, o, seed)
        }
    );
    for (name, kind) in [
        ("group_sum", ReduceKind::Sum),
        ("group_mean", ReduceKind::Mean),
        ("group_max", ReduceKind::Max),
    ] {
        case!(name, [randn(&mut r, &[6, 3])], move |g, v| {
            let o = g.reduce_row_groups(v[0], 3, kind)?;
            project(g, o, seed)
        });
    }
    case!(
        "concat",
        [randn(&mut r, &[3, 2]), randn(&mut r, &[3, 4])],
        move |g, v| {
            let o = g.concat(&[v[0], v[1]], 1)?;
            project(g, o, seed)
        }
    );
    case!("gather_rows", [randn(&mut r, &[4, 3])], move |g, v| {
        let o = g.gather_rows(v[0], &[2, 0, 2, 3, 2])?;
        project(g, o, seed)
    });
    case!("softmax", [randn(&mut r, &[3, 4])], move |g, v| {
        let o = g.softmax(v[0])?;
        project(g, o, seed)
    });
    case!("log_softmax", [randn(&mut r, &[3, 4])], move |g, v| {
        let o = g.log_softmax(v[0])?;
        project(g, o, seed)
    });
    case!("log", [positive(&mut r, &[6])], move |g, v| {
        let o = g.log(v[0])?;
        project(g, o, seed)
    });
    case!("scale_rows", [randn(&mut r, &[3, 4])], move |g, v| {
        let o = g.scale_rows(v[0], &[0.3, -1.2, 2.0])?;
        project(g, o, seed)
    });
    case!("sum", [randn(&mut r, &[7])], move |g, v| {
        let sq = g.mul(v[0], v[0])?;
        g.sum(sq)
    });
    case!("mean", [randn(&mut r, &[7])], move |g, v| {
        let sq = g.mul(v[0], v[0])?;
        g.mean(sq)
    });
    case!("reshape", [randn(&mut r, &[2, 6])], move |g, v| {
        let o = g.reshape(v[0], vec![3, 4])?;
        project(g, o, seed)
    });
    cases
}

/// A small fused network for gradient checks: 16×16 images, 10 centers, 4 classes.
pub fn small_net_config() -> NetConfig {
    NetConfig {
        image: ImageConfig {
            input_size: 16,
            stem_channels: 3,
            stem_stride: 1,
            channels: vec![4, 6],
        },
        scatter: ScatteringConfig {
            k: 3,
            widths: vec![4, 4, 5],
            embed: 6,
            leaky_slope: 0.2,
        },
        bn_momentum: 0.9,
    }
}

fn as_autodiff(e: FeatureError) -> AutodiffError {
    match e {
        FeatureError::Autodiff(a) => a,
        other => AutodiffError::ShapeMismatch {
            op: "features",
            detail: other.to_string(),
        },
    }
}

/// Finite-difference check of a training-mode cross-entropy loss with respect to
/// image pixels and normalized scattering-center parameters, on a 2-sample batch.
pub fn end_to_end_check(seed: u64) -> GradCheckReport {
    let cfg = small_net_config();
    let (net, store) = FusionNet::new::<f64, _>(&cfg, 4, &mut rng(seed)).unwrap();
    let mut r = rng(seed ^ 0xe2e);
    let images = Tensor::new(
        vec![2, 1, 16, 16],
        (0..512).map(|_| r.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let asc = Tensor::new(
        vec![20, 7],
        (0..140).map(|_| r.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let targets = Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.3, 0.7]).unwrap();
    let mut coords: Vec<(usize, usize)> = (0..24).map(|_| (0, r.gen_range(0..512))).collect();
    coords.extend((0..24).map(|_| (1, r.gen_range(0..140))));
    let report = gradcheck(&[images, asc], 1e-6, Some(&coords), |g, v| {
        let mut ctx = Ctx::with_graph(std::mem::take(g), &store, true);
        let out = net.forward(&mut ctx, v[0], v[1]).map_err(as_autodiff);
        let loss = out.and_then(|out| {
            let logp = ctx.g.log_softmax(out.logits)?;
            let t = ctx.g.constant(&targets);
            let prod = ctx.g.mul(logp, t)?;
            let s = ctx.g.mean(prod)?;
            ctx.g.scale(s, -1.0)
        });
        *g = ctx.g;
        loss
    })
    .unwrap();
    report
}

/// Random `p × d` point sets and their exhaustive neighbour tables.
pub fn knn_oracle(x: &[f64], p: usize, d: usize, k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 0..p {
        let mut taken = vec![false; p];
        taken[i] = true;
        for _ in 0..k {
            // Selection by repeated scan: strict `<` keeps the lower index on ties.
            let mut best: Option<(f64, usize)> = None;
            for j in 0..p {
                if taken[j] {
                    continue;
                }
                let dist = (0..d)
                    .map(|c| (x[i * d + c] - x[j * d + c]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if best.map_or(true, |(bd, _)| dist < bd) {
                    best = Some((dist, j));
                }
            }
            let (_, j) = best.unwrap();
            taken[j] = true;
            out.push(j);
        }
    }
    out
}

/// Returns `(instances, mismatches)` over `count` random instances with `P <= 64`.
pub fn knn_suite(count: usize, seed: u64) -> (usize, usize) {
    let mut r = rng(seed);
    let mut bad = 0;
    for t in 0..count {
        let p = r.gen_range(2..=64);
        let d = r.gen_range(1..=9);
        let k = r.gen_range(1..p.min(12));
        // Every fifth instance is snapped to a coarse lattice to force ties.
        let coarse = t % 5 == 0;
        let x: Vec<f64> = (0..p * d)
            .map(|_| {
                let v: f64 = r.gen_range(-1.0..1.0);
                if coarse {
                    (v * 2.0).round()
                } else {
                    v
                }
            })
            .collect();
        if knn_graph(&x, p, d, k).unwrap() != knn_oracle(&x, p, d, k) {
            bad += 1;
        }
    }
    (count, bad)
}

/// Largest change of the scattering features under `count` random row permutations.
pub fn permutation_suite(count: usize, seed: u64) -> f64 {
    let cfg = ScatteringConfig::default();
    let mut store = ParamStore::<f32>::new();
    let mut r = rng(seed);
    let branch = ScatteringBranch::new(&mut store, &mut r, &cfg);
    // Non-trivial running statistics so evaluation mode is exercised.
    for p in store.iter_mut().filter(|p| !p.trainable) {
        for v in p.value.data_mut() {
            *v = r.gen_range(0.5..1.5);
        }
    }
    let base: Vec<f32> = (0..40 * 7).map(|_| r.gen_range(0.0..1.0)).collect();
    let run = |rows: &[f32]| -> Vec<f32> {
        let mut ctx = Ctx::new(&store, false);
        let x = ctx
            .g
            .constant(&Tensor::new(vec![40, 7], rows.to_vec()).unwrap());
        let z = branch.forward(&mut ctx, x, 1).unwrap();
        ctx.g.value(z).to_vec()
    };
    let reference = run(&base);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let mut perm: Vec<usize> = (0..40).collect();
        perm.shuffle(&mut r);
        let rows: Vec<f32> = perm
            .iter()
            .flat_map(|&i| base[i * 7..(i + 1) * 7].to_vec())
            .collect();
        for (a, b) in run(&rows).iter().zip(&reference) {
            worst = worst.max(((a - b).abs() / b.abs().max(1.0)) as f64);
        }
    }
    worst
}

pub struct GmmOracle {
    pub mean_error: f64,
    pub accuracy: f64,
    pub monotone: bool,
}

/// Fits 500 draws from `0.5·N(0.2, 0.05²) + 0.5·N(0.8, 0.05²)` and scores the fit
/// against the generating components.
pub fn gmm_oracle(seed: u64) -> GmmOracle {
    use rand_distr::{Distribution, Normal};
    let mut r = rng(seed);
    let low = Normal::new(0.2, 0.05).unwrap();
    let high = Normal::new(0.8, 0.05).unwrap();
    let mut xs = Vec::with_capacity(500);
    let mut from_low = Vec::with_capacity(500);
    for _ in 0..500 {
        let is_low = r.gen_bool(0.5);
        xs.push(if is_low {
            low.sample(&mut r)
        } else {
            high.sample(&mut r)
        });
        from_low.push(is_low);
    }
    let g = clsdf::divide::fit_gmm(&xs).unwrap();
    let correct = xs
        .iter()
        .zip(&from_low)
        .filter(|(&x, &l)| (g.low_posterior(x) >= 0.5) == l)
        .count();
    GmmOracle {
        mean_error: (g.means[0] - 0.2).abs().max((g.means[1] - 0.8).abs()),
        accuracy: correct as f64 / 500.0,
        monotone: g.log_likelihood.windows(2).all(|w| w[1] >= w[0]),
    }
}

/// Small radar and image sizes so whole training runs fit in a unit test.
pub fn tiny_sim() -> clsdf::asc_sim::SimConfig {
    let mut sim = clsdf::asc_sim::SimConfig::default();
    sim.radar.n_freq = 32;
    sim.radar.n_aspect = 32;
    sim.centers = 12;
    sim.image_size = 24;
    sim
}

pub fn tiny_hyper() -> clsdf::ssl::SslHyper {
    clsdf::ssl::SslHyper {
        augmentation: clsdf::dataset::AugmentationSpec {
            crop_size: 16,
            crop_region: 24,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Tiny prepared training set, optionally with symmetric noise.
pub fn tiny_set(
    classes: usize,
    per_class: usize,
    noise: f64,
    seed: u64,
) -> clsdf::ssl::PreparedSet {
    use clsdf::dataset::{generate_dataset, inject_noise, AscNormalizer, NoiseSpec};
    let clean = generate_dataset(&tiny_sim(), classes, per_class, seed).unwrap();
    let samples = if noise > 0.0 {
        inject_noise(&clean, &NoiseSpec::symmetric(noise), classes, seed + 1).unwrap()
    } else {
        clean
    };
    let norm = AscNormalizer::fit(&samples);
    clsdf::ssl::PreparedSet::new(&samples, &norm, classes).unwrap()
}

#[derive(Debug, Default)]
pub struct SimplexReport {
    pub calls: usize,
    pub violations: usize,
    pub entropy_checks: usize,
    pub entropy_violations: usize,
}

fn random_distribution(r: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    match r.gen_range(0..4) {
        0 => {
            let mut v = vec![0.0; c];
            v[r.gen_range(0..c)] = 1.0;
            v
        }
        1 => vec![1.0 / c as f64; c],
        _ => {
            let raw: Vec<f64> = (0..c).map(|_| r.gen_range(0.0f64..1.0).powi(3)).collect();
            let s: f64 = raw.iter().sum();
            if s == 0.0 {
                vec![1.0 / c as f64; c]
            } else {
                raw.into_iter().map(|v| v / s).collect()
            }
        }
    }
}

fn on_simplex(p: &[f64]) -> bool {
    p.iter().all(|v| v.is_finite() && *v >= -1e-12) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-6
}

/// Randomized calls of every label operation; counts off-simplex outputs and
/// sharpening steps (T = 0.5) that raise entropy.
pub fn simplex_suite(calls: usize, seed: u64) -> SimplexReport {
    use clsdf::ssl::{
        align, co_guess, co_refine, entropy, mix_pair, sharpen, AlignMode, AlignmentState,
    };
    let mut r = rng(seed);
    let mut rep = SimplexReport::default();
    for i in 0..calls {
        let c = r.gen_range(2..12);
        let m = r.gen_range(1..4);
        let out = match i % 5 {
            0 => {
                let preds: Vec<Vec<f64>> = (0..m).map(|_| random_distribution(&mut r, c)).collect();
                let refs: Vec<&[f64]> = preds.iter().map(|p| p.as_slice()).collect();
                co_refine(r.gen_range(0..c), r.gen_range(0.0..=1.0), &refs).unwrap()
            }
            1 => {
                let a: Vec<Vec<f64>> = (0..m).map(|_| random_distribution(&mut r, c)).collect();
                let b: Vec<Vec<f64>> = (0..m).map(|_| random_distribution(&mut r, c)).collect();
                let ra: Vec<&[f64]> = a.iter().map(|p| p.as_slice()).collect();
                let rb: Vec<&[f64]> = b.iter().map(|p| p.as_slice()).collect();
                co_guess(&ra, &rb).unwrap()
            }
            2 => {
                let mode = [AlignMode::Joint, AlignMode::Ratio, AlignMode::None][r.gen_range(0..3)];
                let mut state = AlignmentState::uniform(c, mode);
                state.target = random_distribution(&mut r, c);
                let scale = r.gen_range(0.0..=1.0);
                state.clean_marginal = random_distribution(&mut r, c)
                    .into_iter()
                    .map(|v| v * scale)
                    .collect();
                state.guess_marginal = random_distribution(&mut r, c);
                let mut q = random_distribution(&mut r, c);
                if q.iter().zip(&state.weights()).all(|(a, b)| a * b == 0.0) {
                    q = vec![1.0 / c as f64; c];
                }
                let out = align(&q, &mut state).unwrap();
                if !on_simplex(&state.guess_marginal) {
                    rep.violations += 1;
                }
                out
            }
            3 => {
                let p = random_distribution(&mut r, c);
                let s = sharpen(&p, 0.5).unwrap();
                rep.entropy_checks += 1;
                if entropy(&s) > entropy(&p) + 1e-12 {
                    rep.entropy_violations += 1;
                }
                let t = r.gen_range(0.05..3.0);
                let other = sharpen(&p, t).unwrap();
                if !on_simplex(&other) {
                    rep.violations += 1;
                }
                s
            }
            _ => {
                let (p1, p2) = (
                    random_distribution(&mut r, c),
                    random_distribution(&mut r, c),
                );
                let x1: Vec<f64> = (0..8).map(|_| r.gen_range(0.0..1.5)).collect();
                let x2: Vec<f64> = (0..8).map(|_| r.gen_range(0.0..1.5)).collect();
                let mixed = mix_pair((&x1, &p1), (&x2, &p2), 4.0, &mut r).unwrap();
                let convex = mixed
                    .input
                    .iter()
                    .zip(x1.iter().zip(&x2))
                    .all(|(v, (a, b))| *v >= a.min(*b) - 1e-12 && *v <= a.max(*b) + 1e-12);
                if !convex || mixed.weight < 0.5 {
                    rep.violations += 1;
                }
                mixed.label
            }
        };
        rep.calls += 1;
        if !on_simplex(&out) {
            rep.violations += 1;
        }
    }
    rep
}

/// Disjoint tiny train and test sets; the normalizer is fit on training only.
pub fn tiny_split(
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    noise: f64,
    seed: u64,
) -> (clsdf::ssl::PreparedSet, clsdf::ssl::PreparedSet) {
    use clsdf::dataset::{generate_dataset, inject_noise, split, AscNormalizer, NoiseSpec};
    let all = generate_dataset(&tiny_sim(), classes, train_per_class + test_per_class, seed).unwrap();
    let (train, test) = split(&all, classes, train_per_class, test_per_class, seed + 2).unwrap();
    let train = if noise > 0.0 {
        inject_noise(&train, &NoiseSpec::symmetric(noise), classes, seed + 1).unwrap()
    } else {
        train
    };
    let norm = AscNormalizer::fit(&train);
    (
        clsdf::ssl::PreparedSet::new(&train, &norm, classes).unwrap(),
        clsdf::ssl::PreparedSet::new(&test, &norm, classes).unwrap(),
    )
}

/// The smallest network that trains reliably on the tiny simulator.
pub fn tiny_train_net() -> NetConfig {
    NetConfig {
        image: ImageConfig {
            input_size: 16,
            stem_channels: 8,
            stem_stride: 1,
            channels: vec![8, 16],
        },
        scatter: ScatteringConfig {
            k: 4,
            widths: vec![16, 16, 32],
            embed: 32,
            leaky_slope: 0.2,
        },
        bn_momentum: 0.9,
    }
}

/// Clean tiny train and test sets drawn from the listed template classes,
/// relabeled `0..classes.len()`.
pub fn tiny_split_of(
    classes: &[usize],
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> (clsdf::ssl::PreparedSet, clsdf::ssl::PreparedSet) {
    use clsdf::dataset::{split, AscNormalizer};
    let per_class = train_per_class + test_per_class;
    let mut all = Vec::new();
    for (label, &class) in classes.iter().enumerate() {
        for i in 0..per_class {
            let draw = seed.wrapping_mul(1_000_003) + (label * per_class + i) as u64;
            let mut s = clsdf::asc_sim::generate_class_sample(class, draw, &tiny_sim()).unwrap();
            s.id = (label * per_class + i) as u64;
            s.true_label = label;
            s.train_label = label;
            s.asc.class_id = label;
            all.push(s);
        }
    }
    let k = classes.len();
    let (train, test) = split(&all, k, train_per_class, test_per_class, seed + 2).unwrap();
    let norm = AscNormalizer::fit(&train);
    (
        clsdf::ssl::PreparedSet::new(&train, &norm, k).unwrap(),
        clsdf::ssl::PreparedSet::new(&test, &norm, k).unwrap(),
    )
}

/// Short schedule on the tiny network.
pub fn tiny_train_config(total: usize, warm_up: usize) -> clsdf::cotrain::TrainConfig {
    let mut cfg = clsdf::cotrain::TrainConfig {
        net: tiny_train_net(),
        ssl: tiny_hyper(),
        ..Default::default()
    };
    cfg.schedule.total_epochs = total;
    cfg.schedule.warm_up_epochs = warm_up;
    cfg.eval_batch = 64;
    cfg
}

/// Whole experiment on the tiny simulator and network.
pub fn tiny_experiment(
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    total: usize,
    warm_up: usize,
) -> clsdf::harness::ExperimentConfig {
    let mut cfg = clsdf::harness::ExperimentConfig {
        train: tiny_train_config(total, warm_up),
        ..Default::default()
    };
    cfg.data.classes = classes;
    cfg.data.train_per_class = train_per_class;
    cfg.data.test_per_class = test_per_class;
    cfg.data.sim = tiny_sim();
    cfg.set_seed(3);
    cfg
}
