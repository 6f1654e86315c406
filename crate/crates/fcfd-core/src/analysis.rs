//! Diagnostics: the scalar two-network walkthrough, the random-direction
//! output-sensitivity probe, and the exit-branch functional-similarity probe.

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridges::{BridgeSet, Direction};
use crate::data::{make_batch, ImageDataset};
use crate::error::{FcfdError, Result};
use crate::graph::{Graph, NodeId, Scalar};
use crate::nn::Layer;
use crate::params::ParamStore;
use crate::pathing::{MissingStatsPolicy, Mode, NormStore, PathKey};
use crate::staged::{Feat, StagedModel};
use crate::trainer::{MetricsSink, SgdState, TrainConfig};

/// Output divergences of one perturbation experiment at position `k`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub k: usize,
    pub radius: f64,
    /// Mean-over-batch divergence per direction.
    pub divergences: Vec<f64>,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    /// Accuracy when every sample is pushed along its own worst direction.
    pub accuracy_worst: Option<f64>,
    /// Accuracy when every sample is pushed along its own best direction.
    pub accuracy_best: Option<f64>,
}

/// `n` directions drawn uniformly on the unit sphere of the flattened
/// feature space `shape`.
pub fn sample_directions<F: Scalar>(shape: &[usize], n: usize, seed: u64) -> Vec<ArrayD<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel: usize = shape.iter().product();
    (0..n)
        .map(|_| {
            let mut v: Vec<f64> = (0..numel)
                .map(|_| rng.sample(rand_distr::StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in &mut v {
                *x /= norm;
            }
            ArrayD::from_shape_vec(ndarray::IxDyn(shape), v.iter().map(|&x| F::f(x)).collect())
                .unwrap()
        })
        .collect()
}

fn run_to_stage<F: Scalar>(
    model: &mut StagedModel<F>,
    g: &mut Graph<F>,
    x: &ArrayD<F>,
    k: usize,
    mode: Mode,
    policy: &MissingStatsPolicy,
) -> Result<Feat> {
    let mut node = g.constant(x.clone());
    let mut key = PathKey::empty();
    for l in 1..=k {
        let (out, new_key) = model.run_stage(g, l, node, &key, mode, policy)?;
        node = out;
        key = new_key;
    }
    Ok(Feat {
        node,
        origin_stage: k,
        origin_role: model.role,
        key,
    })
}

fn head_from<F: Scalar>(
    model: &mut StagedModel<F>,
    g: &mut Graph<F>,
    feat: &Feat,
    mode: Mode,
    policy: &MissingStatsPolicy,
) -> Result<NodeId> {
    let n = model.num_stages();
    if feat.origin_stage == n {
        let (logits, _) = model.run_classifier(g, feat.node, &feat.key, mode, policy)?;
        return Ok(logits);
    }
    match model.forward_from(g, feat, feat.origin_stage, n + 1, mode, policy)? {
        crate::staged::FromOutput::Logits { node, .. } => Ok(node),
        crate::staged::FromOutput::Feature(_) => unreachable!("stop at n+1 yields logits"),
    }
}

/// Divergence of a perturbed output row against the unperturbed one:
/// KL between softmax distributions for classifiers, absolute difference for
/// single-output heads.
fn row_divergence<F: Scalar>(base: &[F], pert: &[F], scalar_head: bool) -> f64 {
    if scalar_head {
        (base[0].to_f64().unwrap() - pert[0].to_f64().unwrap()).abs()
    } else {
        let b: Vec<f64> = base.iter().map(|v| v.to_f64().unwrap()).collect();
        let p: Vec<f64> = pert.iter().map(|v| v.to_f64().unwrap()).collect();
        let sm = |z: &[f64]| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        let pb = sm(&b);
        let pp = sm(&p);
        pb.iter()
            .zip(&pp)
            .map(|(&a, &c)| if a > 0.0 { a * (a.ln() - c.ln()) } else { 0.0 })
            .sum()
    }
}

/// Perturbs the stage-`k` feature along each direction (scaled to `radius`)
/// and measures the output divergence. When `labels` is given, also reports
/// accuracy under per-sample worst / best direction selection.
#[allow(clippy::too_many_arguments)]
pub fn sensitivity_probe<F: Scalar>(
    model: &mut StagedModel<F>,
    k: usize,
    directions: &[ArrayD<F>],
    radius: f64,
    x: &ArrayD<F>,
    labels: Option<&[usize]>,
    mode: Mode,
    policy: &MissingStatsPolicy,
) -> Result<SensitivityReport> {
    let n = model.num_stages();
    if k < 1 || k > n {
        return Err(FcfdError::StageRange {
            start: k,
            stop: k,
            n,
        });
    }
    if radius < 0.0 {
        return Err(FcfdError::Config(format!("radius must be >= 0, got {radius}")));
    }
    let mut g = Graph::new();
    let feat = run_to_stage(model, &mut g, x, k, mode, policy)?;
    let base_logits = head_from(model, &mut g, &feat, mode, policy)?;
    let base = g.value(base_logits).clone();
    let base2 = base.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
    let batch = base2.nrows();
    let scalar_head = model.num_classes == 1;
    let feat_value = g.value(feat.node).clone();
    let feat_shape = &feat_value.shape()[1..];

    let mut per_dir_mean = Vec::with_capacity(directions.len());
    // div[d][i] and the perturbed logits per direction, for the accuracy
    // policies below.
    let mut div = Vec::with_capacity(directions.len());
    let mut pert_logits = Vec::with_capacity(directions.len());
    for dir in directions {
        if dir.shape() != feat_shape {
            return Err(FcfdError::ShapeMismatch {
                context: format!("perturbation direction at k={k}"),
                expected: feat_shape.to_vec(),
                actual: dir.shape().to_vec(),
            });
        }
        let mut pert = feat_value.clone();
        let r = F::f(radius);
        for mut row in pert.outer_iter_mut() {
            ndarray::Zip::from(&mut row).and(dir).for_each(|p, &d| *p = *p + d * r);
        }
        let node = g.constant(pert);
        let pfeat = Feat {
            node,
            origin_stage: k,
            origin_role: feat.origin_role,
            key: feat.key.clone(),
        };
        let plog = head_from(model, &mut g, &pfeat, mode, policy)?;
        let pv = g
            .value(plog)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let mut rows = Vec::with_capacity(batch);
        for i in 0..batch {
            let b: Vec<F> = base2.row(i).to_vec();
            let p: Vec<F> = pv.row(i).to_vec();
            rows.push(row_divergence(&b, &p, scalar_head));
        }
        per_dir_mean.push(rows.iter().sum::<f64>() / batch as f64);
        div.push(rows);
        pert_logits.push(pv);
    }

    let (mut accuracy_worst, mut accuracy_best) = (None, None);
    if let Some(y) = labels {
        assert_eq!(y.len(), batch);
        let mut correct_worst = 0usize;
        let mut correct_best = 0usize;
        for i in 0..batch {
            let mut worst = 0usize;
            let mut best = 0usize;
            for d in 1..directions.len() {
                if div[d][i] > div[worst][i] {
                    worst = d;
                }
                if div[d][i] < div[best][i] {
                    best = d;
                }
            }
            for (d, counter) in [(worst, &mut correct_worst), (best, &mut correct_best)] {
                let row = pert_logits[d].row(i);
                let mut arg = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[arg] {
                        arg = j;
                    }
                }
                if arg == y[i] {
                    *counter += 1;
                }
            }
        }
        accuracy_worst = Some(correct_worst as f64 / batch as f64);
        accuracy_best = Some(correct_best as f64 / batch as f64);
    }

    let min = per_dir_mean.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = per_dir_mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = per_dir_mean.iter().sum::<f64>() / per_dir_mean.len().max(1) as f64;
    Ok(SensitivityReport {
        k,
        radius,
        divergences: per_dir_mean,
        min,
        mean,
        max,
        accuracy_worst,
        accuracy_best,
    })
}

/// Auxiliary classifier attached to frozen teacher features at position `k`.
/// The fresh construction mirrors the teacher's remaining stages at doubled
/// channel width, so its capacity exceeds the tail it imitates.
pub struct ExitBranch<F: Scalar> {
    pub attach_k: usize,
    pub entry_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub stages: Vec<Vec<Layer>>,
    pub classifier: Vec<Layer>,
    /// Routing keys used per stage / for the head; empty keys for branches
    /// whose normalization layers are single-path.
    stage_keys: Vec<PathKey>,
    classifier_key: PathKey,
    pub params: ParamStore<F>,
    pub norms: NormStore<F>,
}

impl<F: Scalar> ExitBranch<F> {
    pub fn forward(
        &mut self,
        g: &mut Graph<F>,
        x: NodeId,
        mode: Mode,
        policy: &MissingStatsPolicy,
    ) -> Result<NodeId> {
        let mut h = x;
        for (i, stage) in self.stages.iter().enumerate() {
            let ctx = crate::nn::FwdCtx {
                mode,
                key: self.stage_keys[i].clone(),
                pure_key: None,
                policy: policy.clone(),
            };
            h = Layer::forward_seq(stage, g, &self.params, &mut self.norms, &ctx, h)?;
        }
        let ctx = crate::nn::FwdCtx {
            mode,
            key: self.classifier_key.clone(),
            pure_key: None,
            policy: policy.clone(),
        };
        Layer::forward_seq(&self.classifier, g, &self.params, &mut self.norms, &ctx, h)
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Drops all accumulated running statistics.
    pub fn reset_stats(&mut self) {
        for s in self.norms.states_mut() {
            s.stats.clear();
        }
    }

    /// Order-independent digest of the parameter values, used to verify that
    /// probes leave the weights untouched.
    pub fn param_checksum(&self) -> f64 {
        self.params
            .entries()
            .iter()
            .flat_map(|e| e.value.iter())
            .map(|v| v.to_f64().unwrap())
            .sum()
    }
}

/// Fresh branch: the teacher's stages after `k` duplicated at doubled width.
pub fn build_exit_branch<F: Scalar>(
    teacher: &StagedModel<F>,
    k: usize,
    seed: u64,
) -> Result<ExitBranch<F>> {
    let n = teacher.num_stages();
    if k < 1 || k >= n {
        return Err(FcfdError::StageRange { start: k, stop: n, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut norms = NormStore::new();
    let entry_shape = teacher.stage_output_shapes[k - 1];
    let mut cin = entry_shape.0;
    let mut stages = Vec::new();
    let mut prev_h = entry_shape.1;
    for l in (k + 1)..=n {
        let (tc, th, _) = teacher.stage_output_shapes[l - 1];
        let stride = prev_h / th;
        let cout = tc * 2;
        stages.push(vec![crate::nn::residual_block(
            &mut params,
            &mut norms,
            &mut rng,
            &format!("branch{l}"),
            cin,
            cout,
            stride,
            false,
        )]);
        cin = cout;
        prev_h = th;
    }
    let classifier = vec![
        Layer::GlobalAvgPool,
        crate::nn::linear(&mut params, &mut rng, "branch.head", cin, teacher.num_classes),
    ];
    let stage_keys = vec![PathKey::empty(); stages.len()];
    Ok(ExitBranch {
        attach_k: k,
        entry_shape,
        num_classes: teacher.num_classes,
        stages,
        classifier,
        stage_keys,
        classifier_key: PathKey::empty(),
        params,
        norms,
    })
}

/// Branch that IS the teacher's own tail: cloned layers, parameters and
/// statistics, routed with the teacher's pure keys. Its output equals the
/// teacher's by construction.
pub fn branch_from_teacher_tail<F: Scalar>(teacher: &StagedModel<F>, k: usize) -> Result<ExitBranch<F>> {
    let n = teacher.num_stages();
    if k < 1 || k > n {
        return Err(FcfdError::StageRange { start: k, stop: n, n });
    }
    let stage_keys = ((k + 1)..=n).map(|l| teacher.pure_key(l)).collect();
    Ok(ExitBranch {
        attach_k: k,
        entry_shape: teacher.stage_output_shapes[k - 1],
        num_classes: teacher.num_classes,
        stages: teacher.stages[k..].to_vec(),
        classifier: teacher.classifier.clone(),
        stage_keys,
        classifier_key: teacher.pure_classifier_key(),
        params: teacher.params.clone_fresh(),
        norms: teacher.norms.clone(),
    })
}

/// Number of scalar parameters in the teacher's stages after `k` plus its
/// head; the fresh branch must exceed this.
pub fn teacher_tail_param_count<F: Scalar>(teacher: &StagedModel<F>, k: usize) -> usize {
    teacher
        .params
        .entries()
        .iter()
        .filter(|e| {
            if let Some(rest) = e.name.strip_prefix("stage") {
                let idx: usize = rest
                    .split(|c: char| !c.is_ascii_digit())
                    .next()
                    .and_then(|d| d.parse().ok())
                    .unwrap_or(0);
                idx > k
            } else {
                e.name.starts_with("head.")
            }
        })
        .map(|e| e.value.len())
        .sum()
}

/// Trains a branch with cross-entropy on frozen teacher features at `k`.
#[allow(clippy::too_many_arguments)]
pub fn train_exit_branch<F: Scalar>(
    teacher: &mut StagedModel<F>,
    branch: &mut ExitBranch<F>,
    train: &ImageDataset,
    eval: &ImageDataset,
    cfg: &TrainConfig,
    sink: &mut MetricsSink,
) -> Result<f64> {
    cfg.validate()?;
    teacher.params.frozen = true;
    let k = branch.attach_k;
    let (mean, std) = train.channel_stats();
    let mut opt = SgdState::new(&branch.params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let policy = MissingStatsPolicy::Strict;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut indices: Vec<usize> = (0..train.len()).collect();
        order_rng.set_stream(epoch as u64);
        use rand::seq::SliceRandom;
        indices.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let batch = make_batch::<F>(train, chunk, &mean, &std);
            let mut g = Graph::new();
            let feat = run_to_stage(teacher, &mut g, &batch.x, k, Mode::Eval, &policy)?;
            let entry = g.detach(feat.node);
            let logits = branch.forward(&mut g, entry, Mode::Train, &policy)?;
            let loss = g.softmax_cross_entropy(logits, &batch.y);
            let lv = g.scalar(loss).to_f64().unwrap();
            if !lv.is_finite() {
                return Err(FcfdError::NonFinite {
                    term: "branch task loss".into(),
                    path: None,
                });
            }
            epoch_loss += lv;
            batches += 1;
            let grads = g.backward(loss);
            branch.params.zero_grads();
            branch.params.accumulate(&g, &grads);
            opt.step(&mut branch.params, lr, cfg.momentum, cfg.weight_decay);
        }
        sink.emit(&serde_json::json!({
            "event": "branch-epoch",
            "epoch": epoch,
            "lr": lr,
            "loss": epoch_loss / batches.max(1) as f64,
        }))?;
    }
    let acc = branch_accuracy(teacher, branch, eval, &mean, &std, cfg.batch_size)?;
    sink.emit(&serde_json::json!({"event": "branch-eval", "accuracy": acc}))?;
    Ok(acc)
}

/// Top-1 accuracy of branch(teacher features at attach_k) on `ds`.
pub fn branch_accuracy<F: Scalar>(
    teacher: &mut StagedModel<F>,
    branch: &mut ExitBranch<F>,
    ds: &ImageDataset,
    mean: &[f64],
    std: &[f64],
    batch_size: usize,
) -> Result<f64> {
    let policy = MissingStatsPolicy::Strict;
    let k = branch.attach_k;
    accuracy_over(ds, mean, std, batch_size, |g, x, y| {
        let feat = run_to_stage(teacher, g, x, k, Mode::Eval, &policy)?;
        let logits = branch.forward(g, feat.node, Mode::Eval, &policy)?;
        Ok(count_correct(g, logits, y))
    })
}

fn count_correct<F: Scalar>(g: &Graph<F>, logits: NodeId, y: &[usize]) -> usize {
    let lv = g.value(logits);
    let lv = lv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut correct = 0;
    for (row, &label) in lv.outer_iter().zip(y) {
        let mut arg = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[arg] {
                arg = j;
            }
        }
        if arg == label {
            correct += 1;
        }
    }
    correct
}

fn accuracy_over<F, Fun>(
    ds: &ImageDataset,
    mean: &[f64],
    std: &[f64],
    batch_size: usize,
    mut f: Fun,
) -> Result<f64>
where
    F: Scalar,
    Fun: FnMut(&mut Graph<F>, &ArrayD<F>, &[usize]) -> Result<usize>,
{
    let n = ds.len();
    let mut correct = 0usize;
    let mut i = 0;
    while i < n {
        let hi = (i + batch_size).min(n);
        let indices: Vec<usize> = (i..hi).collect();
        let batch = make_batch::<F>(ds, &indices, mean, std);
        let mut g = Graph::new();
        correct += f(&mut g, &batch.x, &batch.y)?;
        i = hi;
    }
    Ok(correct as f64 / n as f64)
}

/// Feeds `source` features at the branch's attach position (through the
/// student-to-teacher bridge when given) into the frozen branch.
///
/// First pass: statistics-only recalibration over the train split in train
/// mode; branch weights are never updated, but the branch's (and the bridge's
/// and source's) running statistics are refreshed. Second pass: eval-mode
/// accuracy on the eval split.
#[allow(clippy::too_many_arguments)]
pub fn cross_probe<F: Scalar>(
    branch: &mut ExitBranch<F>,
    source: &mut StagedModel<F>,
    bridges: Option<&mut BridgeSet<F>>,
    train: &ImageDataset,
    eval: &ImageDataset,
    mean: &[f64],
    std: &[f64],
    batch_size: usize,
) -> Result<f64> {
    let k = branch.attach_k;
    let policy = MissingStatsPolicy::Strict;
    branch.reset_stats();
    let mut bridges = bridges;

    // Statistics-only pass: forward in train mode, no gradients, no steps.
    let n = train.len();
    let mut i = 0;
    while i < n {
        let hi = (i + batch_size).min(n);
        let indices: Vec<usize> = (i..hi).collect();
        let batch = make_batch::<F>(train, &indices, mean, std);
        let mut g = Graph::new();
        let feat = run_to_stage(source, &mut g, &batch.x, k, Mode::Train, &policy)?;
        let entry = match bridges.as_deref_mut() {
            Some(b) => b.apply(&mut g, Direction::StudentToTeacher, k, &feat, Mode::Train)?,
            None => feat,
        };
        branch.forward(&mut g, entry.node, Mode::Train, &policy)?;
        i = hi;
    }

    accuracy_over(eval, mean, std, batch_size, |g, x, y| {
        let feat = run_to_stage(source, g, x, k, Mode::Eval, &policy)?;
        let entry = match bridges.as_deref_mut() {
            Some(b) => b.apply(g, Direction::StudentToTeacher, k, &feat, Mode::Eval)?,
            None => feat,
        };
        let logits = branch.forward(g, entry.node, Mode::Eval, &policy)?;
        Ok(count_correct(g, logits, y))
    })
}

/// One row of the scalar walkthrough.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyCandidate {
    pub feature: (f64, f64),
    pub output: f64,
    pub deviation: f64,
    pub appearance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyDemoReport {
    pub baseline_feature: (f64, f64),
    pub baseline_output: f64,
    pub candidates: Vec<ToyCandidate>,
    pub ring: Vec<ToyCandidate>,
}

/// The two-network scalar walkthrough: a baseline feature (4,4) with output
/// 336, two candidate approximations at equal feature distance but very
/// different output deviation, and a ring of equal-distance candidates
/// showing the distance/deviation mismatch.
pub fn toy_demo() -> ToyDemoReport {
    let (mut teacher, _) =
        crate::staged::build_reference_pair::<f64>("toy-scalar-pair", 0).expect("registry");
    let mut head = |m: (f64, f64)| -> f64 {
        let mut g = Graph::new();
        let x = g.constant(
            ArrayD::from_shape_vec(ndarray::IxDyn(&[1, 2, 1, 1]), vec![m.0, m.1]).unwrap(),
        );
        let (out, _) = teacher
            .run_classifier(
                &mut g,
                x,
                &PathKey::empty(),
                Mode::Eval,
                &MissingStatsPolicy::Strict,
            )
            .expect("toy head");
        g.scalar(out)
    };
    let baseline = (4.0, 4.0);
    let baseline_output = head(baseline);
    let appearance = |m: (f64, f64)| ((m.0 - baseline.0).powi(2) + (m.1 - baseline.1).powi(2)) / 2.0;
    let mut row = |m: (f64, f64)| {
        let output = head(m);
        ToyCandidate {
            feature: m,
            output,
            deviation: (output - baseline_output).abs(),
            appearance: appearance(m),
        }
    };
    let candidates = vec![row((3.0, 4.0)), row((4.0, 3.0))];
    let ring = (0..8)
        .map(|i| {
            let theta = 2.0 * PI_F64 * i as f64 / 8.0;
            row((baseline.0 + theta.cos(), baseline.1 + theta.sin()))
        })
        .collect();
    ToyDemoReport {
        baseline_feature: baseline,
        baseline_output,
        candidates,
        ring,
    }
}

const PI_F64: f64 = std::f64::consts::PI;

impl ToyDemoReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "baseline feature ({}, {}) -> output {}\n",
            self.baseline_feature.0, self.baseline_feature.1, self.baseline_output
        ));
        s.push_str("candidate        output   deviation   feature-distance\n");
        for c in &self.candidates {
            s.push_str(&format!(
                "({}, {})          {:<8} {:<11} {}\n",
                c.feature.0, c.feature.1, c.output, c.deviation, c.appearance
            ));
        }
        s.push_str("equal-distance ring samples:\n");
        for c in &self.ring {
            s.push_str(&format!(
                "({:.4}, {:.4})  output {:>9.4}  deviation {:>9.4}  feature-distance {:.9}\n",
                c.feature.0, c.feature.1, c.output, c.deviation, c.appearance
            ));
        }
        s
    }
}
