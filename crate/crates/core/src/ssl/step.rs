use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sgd_step, Binding, Gradients, ParamStore, Scalar, SgdConfig, Tensor, Var};
use crate::divide::Division;
use crate::features::{apply_running_stats, Ctx, FusionNet, NetConfig, StatUpdate};
use crate::rng::seeded;

use super::batch::{predict_batch, PreparedSet};
use super::labels::{
    align_batch, co_guess, co_refine, draw_mix_weight, lambda_u, sharpen, AlignmentState,
};
use super::{SslError, SslHyper};

/// One network branch with its own parameters, optimizer slots, alignment
/// statistics and random stream.
#[derive(Clone, Debug)]
pub struct BranchState {
    pub id: usize,
    pub net: FusionNet,
    pub params: ParamStore<f32>,
    pub align: AlignmentState,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl BranchState {
    pub fn new(
        id: usize,
        config: &NetConfig,
        classes: usize,
        init_seed: u64,
        stream_seed: u64,
        align: AlignmentState,
    ) -> Result<Self, SslError> {
        let (net, params) = FusionNet::new::<f32, _>(config, classes, &mut seeded(init_seed))?;
        Ok(Self {
            id,
            net,
            params,
            align,
            epoch: 0,
            rng: seeded(stream_seed),
        })
    }
}

/// A division tagged with the branch and epoch that produced it.
#[derive(Clone, Debug)]
pub struct ExchangedDivision {
    pub producer: usize,
    pub epoch: usize,
    pub division: Division,
}

/// Inputs of one semi-supervised mini-batch before mixing.
///
/// Pool rows are `M` blocks of the clean samples followed by `M` blocks of the
/// noisy samples; block `m` holds augmentation `m` of every sample.
#[derive(Clone, Debug)]
pub struct StepBatch<S> {
    pub side: usize,
    pub pixels: Vec<S>,
    /// ASC rows of the clean samples, then the noisy ones.
    pub asc: Tensor<S>,
    pub centers: usize,
    /// `(label, clean probability)` per clean sample.
    pub clean: Vec<(usize, f64)>,
    pub noisy: usize,
    pub augmentations: usize,
}

impl<S: Scalar> StepBatch<S> {
    pub fn rows(&self) -> usize {
        self.augmentations * (self.clean.len() + self.noisy)
    }

    pub fn labeled_rows(&self) -> usize {
        self.augmentations * self.clean.len()
    }

    /// Index into the sample list (clean first) of pool row `r`.
    pub fn sample_of_row(&self, r: usize) -> usize {
        let (nc, nu) = (self.clean.len(), self.noisy);
        if r < self.labeled_rows() {
            r % nc
        } else {
            nc + (r - self.labeled_rows()) % nu
        }
    }

    fn check(&self) -> Result<(), SslError> {
        let (rows, px) = (self.rows(), self.side * self.side);
        if self.clean.is_empty() {
            return Err(SslError::EmptySet);
        }
        if self.pixels.len() != rows * px {
            return Err(SslError::Shape(format!(
                "{} pixels for {rows} rows of {px}",
                self.pixels.len()
            )));
        }
        if self.asc.shape() != [(self.clean.len() + self.noisy) * self.centers, 7] {
            return Err(SslError::Shape(format!(
                "ASC tensor {:?}",
                self.asc.shape()
            )));
        }
        Ok(())
    }

    /// Network inputs for pool rows `rows`, unmixed.
    fn inputs(&self, rows: std::ops::Range<usize>) -> Result<(Tensor<S>, Tensor<S>), SslError> {
        let px = self.side * self.side;
        let n = rows.len();
        let images = Tensor::new(
            vec![n, 1, self.side, self.side],
            self.pixels[rows.start * px..rows.end * px].to_vec(),
        )?;
        let w = self.centers * 7;
        let asc_data = rows
            .flat_map(|r| {
                let s = self.sample_of_row(r);
                self.asc.data()[s * w..(s + 1) * w].to_vec()
            })
            .collect();
        Ok((images, Tensor::new(vec![n * self.centers, 7], asc_data)?))
    }
}

/// Refined-and-sharpened targets for every pool row.
///
/// Predictions come from eval-mode passes; the other branch only scores the
/// noisy rows. Guesses are aligned as one batch, which advances the guess
/// marginal once.
pub fn batch_targets<S: Scalar>(
    own: (&FusionNet, &ParamStore<S>),
    other: (&FusionNet, &ParamStore<S>),
    align: &mut AlignmentState,
    batch: &StepBatch<S>,
    hyper: &SslHyper,
) -> Result<Vec<Vec<f64>>, SslError> {
    batch.check()?;
    let (rows, labeled) = (batch.rows(), batch.labeled_rows());
    let (m, nc, nu) = (batch.augmentations, batch.clean.len(), batch.noisy);
    let (images, asc) = batch.inputs(0..rows)?;
    let own_preds = predict_batch(own.0, own.1, &images, &asc)?;
    let mut targets = vec![Vec::new(); rows];
    for (i, &(label, prob)) in batch.clean.iter().enumerate() {
        let preds: Vec<&[f64]> = (0..m).map(|k| own_preds[k * nc + i].as_slice()).collect();
        let t = sharpen(&co_refine(label, prob, &preds)?, hyper.temperature)?;
        for k in 0..m {
            targets[k * nc + i] = t.clone();
        }
    }
    if nu > 0 {
        let (images, asc) = batch.inputs(labeled..rows)?;
        let other_preds = predict_batch(other.0, other.1, &images, &asc)?;
        let guesses = (0..nu)
            .map(|j| {
                let mine: Vec<&[f64]> = (0..m)
                    .map(|k| own_preds[labeled + k * nu + j].as_slice())
                    .collect();
                let theirs: Vec<&[f64]> =
                    (0..m).map(|k| other_preds[k * nu + j].as_slice()).collect();
                co_guess(&mine, &theirs)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let aligned = align_batch(&guesses, align)?;
        for (j, q) in aligned.iter().enumerate() {
            let t = sharpen(q, hyper.temperature)?;
            for k in 0..m {
                targets[labeled + k * nu + j] = t.clone();
            }
        }
    }
    Ok(targets)
}

/// Partner row and folded Beta weight for every pool row.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub partner: Vec<usize>,
    pub weights: Vec<f64>,
}

impl MixPlan {
    pub fn draw<R: Rng>(rows: usize, alpha: f64, rng: &mut R) -> Result<Self, SslError> {
        let mut partner: Vec<usize> = (0..rows).collect();
        partner.shuffle(rng);
        let weights = (0..rows)
            .map(|_| draw_mix_weight(alpha, rng))
            .collect::<Result<_, _>>()?;
        Ok(Self { partner, weights })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub total: Var,
    pub value: f64,
    pub ce: f64,
    pub mse: f64,
}

/// Train-mode objective on the mixed pool.
///
/// Images mix in pixel space; scattering features are computed once per
/// sample and mixed with the same weights before fusion. Soft cross-entropy
/// covers the clean-origin rows and squared error the noisy-origin rows.
pub fn mixed_objective<'s, S: Scalar>(
    net: &FusionNet,
    params: &'s ParamStore<S>,
    batch: &StepBatch<S>,
    targets: &[Vec<f64>],
    plan: &MixPlan,
    lambda_u: f64,
) -> Result<(Ctx<'s, S>, StepLoss), SslError> {
    batch.check()?;
    let (rows, labeled, c) = (batch.rows(), batch.labeled_rows(), net.classes);
    if targets.len() != rows || plan.partner.len() != rows || plan.weights.len() != rows {
        return Err(SslError::Shape(format!(
            "{rows} pool rows, {} targets",
            targets.len()
        )));
    }
    let px = batch.side * batch.side;
    let mut pixels = Vec::with_capacity(rows * px);
    let mut mixed_targets = Vec::with_capacity(rows * c);
    for r in 0..rows {
        let (w, p) = (plan.weights[r], plan.partner[r]);
        let (a, b) = (
            &batch.pixels[r * px..(r + 1) * px],
            &batch.pixels[p * px..(p + 1) * px],
        );
        pixels.extend(
            a.iter()
                .zip(b)
                .map(|(x, y)| S::lit(w * x.f64() + (1.0 - w) * y.f64())),
        );
        mixed_targets.extend(
            targets[r]
                .iter()
                .zip(&targets[p])
                .map(|(x, y)| S::lit(w * x + (1.0 - w) * y)),
        );
    }
    let mut ctx = Ctx::new(params, true);
    let images = ctx
        .g
        .constant(&Tensor::new(vec![rows, 1, batch.side, batch.side], pixels)?);
    let z_image = net.image_features(&mut ctx, images)?;
    let asc = ctx.g.constant(&batch.asc);
    let z_scatter = net.scatter_features(&mut ctx, asc, batch.clean.len() + batch.noisy)?;
    let first: Vec<usize> = (0..rows).map(|r| batch.sample_of_row(r)).collect();
    let second: Vec<usize> = plan
        .partner
        .iter()
        .map(|&p| batch.sample_of_row(p))
        .collect();
    let own_w: Vec<S> = plan.weights.iter().map(|&w| S::lit(w)).collect();
    let partner_w: Vec<S> = plan.weights.iter().map(|&w| S::lit(1.0 - w)).collect();
    let a = ctx.g.gather_rows(z_scatter, &first)?;
    let a = ctx.g.scale_rows(a, &own_w)?;
    let b = ctx.g.gather_rows(z_scatter, &second)?;
    let b = ctx.g.scale_rows(b, &partner_w)?;
    let z_scatter = ctx.g.add(a, b)?;
    let fused = net.fuse(&mut ctx, z_scatter, z_image)?;
    let logits = net.classify(&mut ctx, fused)?;

    let clean_rows: Vec<usize> = (0..labeled).collect();
    let clean_logits = ctx.g.gather_rows(logits, &clean_rows)?;
    let log_p = ctx.g.log_softmax(clean_logits)?;
    let t = ctx.g.constant(&Tensor::new(
        vec![labeled, c],
        mixed_targets[..labeled * c].to_vec(),
    )?);
    let prod = ctx.g.mul(t, log_p)?;
    let s = ctx.g.sum(prod)?;
    let ce = ctx.g.scale(s, S::lit(-1.0 / labeled as f64))?;
    let ce_value = ctx.g.value(ce)[0].f64();
    let (total, mse_value) = if rows > labeled {
        let noisy_rows: Vec<usize> = (labeled..rows).collect();
        let u = ctx.g.gather_rows(logits, &noisy_rows)?;
        let p = ctx.g.softmax(u)?;
        let t = ctx.g.constant(&Tensor::new(
            vec![rows - labeled, c],
            mixed_targets[labeled * c..].to_vec(),
        )?);
        let d = ctx.g.sub(p, t)?;
        let sq = ctx.g.mul(d, d)?;
        let s = ctx.g.sum(sq)?;
        let mse = ctx.g.scale(s, S::lit(1.0 / (rows - labeled) as f64))?;
        let mse_value = ctx.g.value(mse)[0].f64();
        let weighted = ctx.g.scale(mse, S::lit(lambda_u))?;
        (ctx.g.add(ce, weighted)?, mse_value)
    } else {
        (ce, 0.0)
    };
    let value = ctx.g.value(total)[0].f64();
    if !value.is_finite() {
        return Err(SslError::NonFinite("semi-supervised objective"));
    }
    Ok((
        ctx,
        StepLoss {
            total,
            value,
            ce: ce_value,
            mse: mse_value,
        },
    ))
}

/// Parameter update from one tape's gradients, then running-statistics update.
fn apply_step(
    params: &mut ParamStore<f32>,
    grads: &Gradients<f32>,
    bind: &Binding,
    stats: &[StatUpdate],
    sgd: SgdConfig,
    momentum: f64,
) -> Result<(), SslError> {
    params.zero_grad();
    params.accumulate(grads, bind);
    sgd_step(params, sgd)?;
    apply_running_stats(params, stats, momentum);
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SslEpochStats {
    pub ce: f64,
    pub mse: f64,
    /// Unlabeled weight at the last step.
    pub lambda_u: f64,
    pub steps: usize,
    pub clean: usize,
    pub noisy: usize,
}

/// One semi-supervised epoch of `branch` on a division made by `other`.
///
/// `progress` is the number of finished epochs since warm-up. Steps per epoch
/// are `⌊clean / B⌋` (at least one); noisy samples are cycled to match each
/// clean batch.
pub fn ssl_epoch(
    branch: &mut BranchState,
    other: &BranchState,
    set: &PreparedSet,
    exchanged: &ExchangedDivision,
    hyper: &SslHyper,
    sgd: SgdConfig,
    progress: f64,
) -> Result<SslEpochStats, SslError> {
    if exchanged.producer == branch.id {
        return Err(SslError::Provenance { branch: branch.id });
    }
    let div = &exchanged.division;
    if div.probs.len() != set.len() {
        return Err(SslError::Shape(format!(
            "division over {} samples, set has {}",
            div.probs.len(),
            set.len()
        )));
    }
    for c in 0..set.classes {
        if set.labels.contains(&c) && !div.clean.iter().any(|e| e.label == c) {
            return Err(SslError::EmptyClean(c));
        }
    }
    branch
        .align
        .set_clean_labels(div.clean.iter().map(|e| e.label), set.len());

    let mut clean: Vec<usize> = (0..div.clean.len()).collect();
    clean.shuffle(&mut branch.rng);
    let mut noisy = div.noisy.clone();
    noisy.shuffle(&mut branch.rng);
    let b = hyper.batch_size.min(clean.len());
    let iters = (clean.len() / b).max(1);
    let spec = &hyper.augmentation;
    let mut stats = SslEpochStats {
        clean: clean.len(),
        noisy: noisy.len(),
        ..Default::default()
    };
    let mut cursor = 0;
    for it in 0..iters {
        let entries: Vec<_> = clean[it * b..(it + 1) * b]
            .iter()
            .map(|&k| &div.clean[k])
            .collect();
        let clean_idx: Vec<usize> = entries.iter().map(|e| e.index).collect();
        let noisy_idx: Vec<usize> = if noisy.is_empty() {
            Vec::new()
        } else {
            (0..b)
                .map(|_| {
                    let v = noisy[cursor % noisy.len()];
                    cursor += 1;
                    v
                })
                .collect()
        };
        let mut pixels = Vec::new();
        for _ in 0..hyper.augmentations {
            pixels.extend(set.augmented_pixels(&clean_idx, spec, &mut branch.rng)?);
        }
        for _ in 0..hyper.augmentations {
            pixels.extend(set.augmented_pixels(&noisy_idx, spec, &mut branch.rng)?);
        }
        let all: Vec<usize> = clean_idx.iter().chain(&noisy_idx).copied().collect();
        let batch = StepBatch {
            side: spec.crop_size,
            pixels,
            asc: set.asc_tensor(&all),
            centers: set.centers,
            clean: entries.iter().map(|e| (e.label, e.prob)).collect(),
            noisy: noisy_idx.len(),
            augmentations: hyper.augmentations,
        };
        let targets = batch_targets(
            (&branch.net, &branch.params),
            (&other.net, &other.params),
            &mut branch.align,
            &batch,
            hyper,
        )?;
        let plan = MixPlan::draw(batch.rows(), hyper.alpha, &mut branch.rng)?;
        let weight = lambda_u(
            hyper.lambda_u,
            hyper.ramp_epochs,
            progress + it as f64 / iters as f64,
        );
        let (grads, bind, bn_stats, loss) = {
            let (ctx, loss) =
                mixed_objective(&branch.net, &branch.params, &batch, &targets, &plan, weight)?;
            let grads = ctx.g.backward(loss.total)?;
            (grads, ctx.bind, ctx.stats, loss)
        };
        apply_step(
            &mut branch.params,
            &grads,
            &bind,
            &bn_stats,
            sgd,
            branch.net.config.bn_momentum,
        )?;
        stats.ce += loss.ce / iters as f64;
        stats.mse += loss.mse / iters as f64;
        stats.lambda_u = weight;
        stats.steps += 1;
    }
    branch.epoch += 1;
    Ok(stats)
}

/// One epoch of plain cross-entropy on center crops over the observed labels.
/// Returns the mean batch loss.
pub fn ce_epoch(
    branch: &mut BranchState,
    set: &PreparedSet,
    sgd: SgdConfig,
    batch_size: usize,
    crop: usize,
) -> Result<f64, SslError> {
    if set.is_empty() {
        return Err(SslError::EmptySet);
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut branch.rng);
    let c = branch.net.classes;
    let (mut total, mut batches) = (0.0, 0usize);
    for idx in order.chunks(batch_size.max(2)) {
        if idx.len() < 2 {
            continue;
        }
        let images = set.center_images::<f32>(idx, crop)?;
        let asc = set.asc_tensor::<f32>(idx);
        let mut onehot = vec![0.0f32; idx.len() * c];
        for (r, &i) in idx.iter().enumerate() {
            onehot[r * c + set.labels[i]] = 1.0;
        }
        let (grads, bind, stats, value) = {
            let mut ctx = Ctx::new(&branch.params, true);
            let iv = ctx.g.constant(&images);
            let av = ctx.g.constant(&asc);
            let out = branch.net.forward(&mut ctx, iv, av)?;
            let log_p = ctx.g.log_softmax(out.logits)?;
            let t = ctx.g.constant(&Tensor::new(vec![idx.len(), c], onehot)?);
            let prod = ctx.g.mul(t, log_p)?;
            let s = ctx.g.sum(prod)?;
            let loss = ctx.g.scale(s, -1.0 / idx.len() as f32)?;
            let value = ctx.g.value(loss)[0] as f64;
            if !value.is_finite() {
                return Err(SslError::NonFinite("cross-entropy"));
            }
            let grads = ctx.g.backward(loss)?;
            (grads, ctx.bind, ctx.stats, value)
        };
        apply_step(
            &mut branch.params,
            &grads,
            &bind,
            &stats,
            sgd,
            branch.net.config.bn_momentum,
        )?;
        total += value;
        batches += 1;
    }
    branch.epoch += 1;
    Ok(total / batches.max(1) as f64)
}

/// `epochs` of [`ce_epoch`]; returns the per-epoch mean losses.
pub fn warm_up(
    branch: &mut BranchState,
    set: &PreparedSet,
    epochs: usize,
    sgd: SgdConfig,
    batch_size: usize,
    crop: usize,
) -> Result<Vec<f64>, SslError> {
    (0..epochs)
        .map(|_| ce_epoch(branch, set, sgd, batch_size, crop))
        .collect()
}
