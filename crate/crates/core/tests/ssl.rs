mod common;

use clsdf::autodiff::{ParamStore, SgdConfig, Tensor};
use clsdf::divide::{divide, fit_class_mixtures, per_sample_losses};
use clsdf::features::{Ctx, FusionNet};
use clsdf::ssl::{
    batch_targets, mixed_objective, predict_set, ssl_epoch, warm_up, AlignMode, AlignmentState,
    BranchState, ExchangedDivision, MixPlan, SslError, SslHyper, StepBatch,
};
use common::{rng, simplex_suite, small_net_config, tiny_hyper, tiny_set};
use rand::Rng;

const CLASSES: usize = 3;
const CENTERS: usize = 6;

fn sgd() -> SgdConfig {
    SgdConfig {
        lr: 0.02,
        momentum: 0.9,
        weight_decay: 5e-4,
    }
}

fn hand_batch(seed: u64) -> StepBatch<f64> {
    let mut r = rng(seed);
    StepBatch {
        side: 16,
        pixels: (0..8 * 256).map(|_| r.gen_range(0.0..1.2)).collect(),
        asc: Tensor::new(
            vec![4 * CENTERS, 7],
            (0..4 * CENTERS * 7)
                .map(|_| r.gen_range(0.0..1.0))
                .collect(),
        )
        .unwrap(),
        centers: CENTERS,
        clean: vec![(0, 0.7), (2, 0.9)],
        noisy: 2,
        augmentations: 2,
    }
}

fn nets() -> ((FusionNet, ParamStore<f64>), (FusionNet, ParamStore<f64>)) {
    let cfg = small_net_config();
    (
        FusionNet::new::<f64, _>(&cfg, CLASSES, &mut rng(11)).unwrap(),
        FusionNet::new::<f64, _>(&cfg, CLASSES, &mut rng(12)).unwrap(),
    )
}

fn state() -> AlignmentState {
    let mut s = AlignmentState::uniform(CLASSES, AlignMode::Joint);
    s.clean_marginal = vec![0.3, 0.1, 0.2];
    s.guess_marginal = vec![0.5, 0.3, 0.2];
    s
}

/// Eval-mode softmax of one pool row, scored on its own.
fn single_row_probs(
    net: &FusionNet,
    store: &ParamStore<f64>,
    batch: &StepBatch<f64>,
    row: usize,
) -> Vec<f64> {
    let px = &batch.pixels[row * 256..(row + 1) * 256];
    let s = batch.sample_of_row(row);
    let asc = &batch.asc.data()[s * CENTERS * 7..(s + 1) * CENTERS * 7];
    let mut ctx = Ctx::new(store, false);
    let i = ctx
        .g
        .constant(&Tensor::new(vec![1, 1, 16, 16], px.to_vec()).unwrap());
    let a = ctx
        .g
        .constant(&Tensor::new(vec![CENTERS, 7], asc.to_vec()).unwrap());
    let out = net.forward(&mut ctx, i, a).unwrap();
    let z = ctx.g.value(out.logits).to_vec();
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sharpen2(p: &[f64]) -> Vec<f64> {
    let sq: Vec<f64> = p.iter().map(|v| v * v).collect();
    let s: f64 = sq.iter().sum();
    sq.into_iter().map(|v| v / s).collect()
}

/// Scalar recomputation of the whole objective for the hand batch.
fn straight_line_loss(
    own: &(FusionNet, ParamStore<f64>),
    other: &(FusionNet, ParamStore<f64>),
    batch: &StepBatch<f64>,
    plan: &MixPlan,
    lambda_u: f64,
) -> f64 {
    let p: Vec<Vec<f64>> = (0..8)
        .map(|r| single_row_probs(&own.0, &own.1, batch, r))
        .collect();
    let o: Vec<Vec<f64>> = (4..8)
        .map(|r| single_row_probs(&other.0, &other.1, batch, r))
        .collect();
    let mut targets = vec![vec![0.0; CLASSES]; 8];
    for (i, &(y, pi)) in batch.clean.iter().enumerate() {
        let mut t: Vec<f64> = (0..CLASSES)
            .map(|c| (1.0 - pi) * 0.5 * (p[i][c] + p[2 + i][c]))
            .collect();
        t[y] += pi;
        let t = sharpen2(&t);
        targets[i] = t.clone();
        targets[2 + i] = t;
    }
    let st = state();
    let w: Vec<f64> = (0..CLASSES)
        .map(|c| (st.target[c] - st.clean_marginal[c]).max(1e-8) / st.guess_marginal[c].max(1e-8))
        .collect();
    for j in 0..2 {
        let q: Vec<f64> = (0..CLASSES)
            .map(|c| 0.25 * (p[4 + j][c] + p[6 + j][c] + o[j][c] + o[2 + j][c]) * w[c])
            .collect();
        let s: f64 = q.iter().sum();
        let q: Vec<f64> = q.into_iter().map(|v| v / s).collect();
        let t = sharpen2(&q);
        targets[4 + j] = t.clone();
        targets[6 + j] = t;
    }

    let mut mixed_px = Vec::new();
    let mut mixed_t = Vec::new();
    for r in 0..8 {
        let (l, k) = (plan.weights[r], plan.partner[r]);
        for q in 0..256 {
            mixed_px.push(l * batch.pixels[r * 256 + q] + (1.0 - l) * batch.pixels[k * 256 + q]);
        }
        mixed_t.push(
            (0..CLASSES)
                .map(|c| l * targets[r][c] + (1.0 - l) * targets[k][c])
                .collect::<Vec<_>>(),
        );
    }
    let (net, store) = own;
    let mut ctx = Ctx::new(store, true);
    let iv = ctx
        .g
        .constant(&Tensor::new(vec![8, 1, 16, 16], mixed_px).unwrap());
    let zi = net.image_features(&mut ctx, iv).unwrap();
    let av = ctx.g.constant(&batch.asc);
    let zs = net.scatter_features(&mut ctx, av, 4).unwrap();
    let (di, ds) = (ctx.g.shape(zi)[1], ctx.g.shape(zs)[1]);
    let zi = ctx.g.value(zi).to_vec();
    let zs = ctx.g.value(zs).to_vec();
    let wt = store.value(net.head.weight).data().to_vec();
    let bias = store.value(net.head.bias).data().to_vec();
    let (mut ce, mut mse) = (0.0, 0.0);
    for r in 0..8 {
        let (l, k) = (plan.weights[r], plan.partner[r]);
        let (a, b) = (batch.sample_of_row(r), batch.sample_of_row(k));
        let mut fused: Vec<f64> = (0..ds)
            .map(|d| l * zs[a * ds + d] + (1.0 - l) * zs[b * ds + d])
            .collect();
        fused.extend_from_slice(&zi[r * di..(r + 1) * di]);
        let logits: Vec<f64> = (0..CLASSES)
            .map(|c| {
                bias[c]
                    + fused
                        .iter()
                        .enumerate()
                        .map(|(d, v)| v * wt[d * CLASSES + c])
                        .sum::<f64>()
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        if r < 4 {
            ce -= (0..CLASSES)
                .map(|c| mixed_t[r][c] * (logits[c] - lse))
                .sum::<f64>()
                / 4.0;
        } else {
            mse += (0..CLASSES)
                .map(|c| ((logits[c] - lse).exp() - mixed_t[r][c]).powi(2))
                .sum::<f64>()
                / 4.0;
        }
    }
    ce + lambda_u * mse
}

#[test]
fn objective_matches_straight_line_recomputation() {
    let (own, other) = nets();
    let hyper = SslHyper::default();
    for seed in 0..3 {
        let batch = hand_batch(seed);
        let plan = MixPlan::draw(8, 4.0, &mut rng(100 + seed)).unwrap();
        let mut st = state();
        let targets = batch_targets(
            (&own.0, &own.1),
            (&other.0, &other.1),
            &mut st,
            &batch,
            &hyper,
        )
        .unwrap();
        let (_, loss) = mixed_objective(&own.0, &own.1, &batch, &targets, &plan, 12.5).unwrap();
        let want = straight_line_loss(&own, &other, &batch, &plan, 12.5);
        assert!(
            (loss.value - want).abs() < 1e-6,
            "seed {seed}: {} vs {want}",
            loss.value
        );
        assert!(loss.value >= 0.0);
    }
}

#[test]
fn zero_unlabeled_weight_leaves_cross_entropy() {
    let (own, other) = nets();
    let batch = hand_batch(4);
    let plan = MixPlan::draw(8, 4.0, &mut rng(5)).unwrap();
    let mut st = state();
    let targets = batch_targets(
        (&own.0, &own.1),
        (&other.0, &other.1),
        &mut st,
        &batch,
        &SslHyper::default(),
    )
    .unwrap();
    let (_, loss) = mixed_objective(&own.0, &own.1, &batch, &targets, &plan, 0.0).unwrap();
    assert_eq!(loss.value, loss.ce);
    assert!(loss.mse > 0.0);
}

#[test]
fn label_operations_stay_on_simplex() {
    let rep = simplex_suite(20_000, 9);
    assert_eq!(rep.violations, 0, "{rep:?}");
    assert_eq!(rep.entropy_violations, 0, "{rep:?}");
}

fn branch(id: usize, seed: u64) -> BranchState {
    BranchState::new(
        id,
        &small_net_config(),
        CLASSES,
        seed,
        seed + 1000,
        AlignmentState::uniform(CLASSES, AlignMode::Joint),
    )
    .unwrap()
}

#[test]
fn warm_up_reduces_loss_and_is_deterministic() {
    let set = tiny_set(CLASSES, 20, 0.0, 3);
    let run = || {
        let mut b = branch(0, 7);
        let losses = warm_up(&mut b, &set, 5, sgd(), 16, 16).unwrap();
        (
            losses,
            predict_set(&b.net, &b.params, &set, 16, 32).unwrap(),
        )
    };
    let (losses, probs) = run();
    assert!(losses[4] < losses[0], "{losses:?}");
    let (again, probs2) = run();
    assert_eq!(losses, again);
    assert_eq!(probs, probs2);
}

#[test]
fn semi_supervised_epoch_consumes_other_branch_division() {
    let set = tiny_set(CLASSES, 24, 0.3, 5);
    let hyper = tiny_hyper();
    let (mut a, mut b) = (branch(0, 1), branch(1, 2));
    warm_up(&mut a, &set, 2, sgd(), 16, 16).unwrap();
    warm_up(&mut b, &set, 2, sgd(), 16, 16).unwrap();
    let probs = predict_set(&b.net, &b.params, &set, 16, 64).unwrap();
    let ledger = per_sample_losses(&probs, &set.ids, &set.labels, CLASSES).unwrap();
    let fits = fit_class_mixtures(&ledger).unwrap();
    let division = divide(&ledger, &fits, 0.5, 1).unwrap();
    let clean = division.clean.len();
    let exchanged = ExchangedDivision {
        producer: b.id,
        epoch: 2,
        division,
    };
    let before = a.params.value(a.net.head.weight).clone();
    let stats = ssl_epoch(&mut a, &b, &set, &exchanged, &hyper, sgd(), 0.0).unwrap();
    assert_eq!(stats.steps, (clean / 16).max(1));
    assert!(stats.ce.is_finite() && stats.mse.is_finite() && stats.lambda_u < 25.0);
    assert_ne!(a.params.value(a.net.head.weight), &before);
    assert!((a.align.guess_marginal.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    let own = ExchangedDivision {
        producer: a.id,
        ..exchanged
    };
    assert!(matches!(
        ssl_epoch(&mut a, &b, &set, &own, &hyper, sgd(), 1.0),
        Err(SslError::Provenance { branch: 0 })
    ));
}
