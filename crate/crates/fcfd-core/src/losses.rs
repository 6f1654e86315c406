//! Objective terms: task cross-entropy, tempered KD, appearance matching,
//! the two function-consistency losses, and the sampled composite objective.
//!
//! "L2" throughout is mean squared error over all elements; the hyperparameter
//! magnitudes only make sense with a magnitude-normalized reduction.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::bridges::{BridgeSet, Direction};
use crate::error::{FcfdError, Result};
use crate::graph::{Graph, NodeId, Scalar};
use crate::pathing::{MissingStatsPolicy, Mode, PathSpec};
use crate::staged::{Feat, StagedModel};

/// How far the teacher-lens loss propagates: every later stage plus the
/// classifier, or only the immediately following stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuncMode {
    Full,
    Partial,
}

/// All scalar hyperparameters of the composite objective. `w_func_fd` is
/// shared by the intermediate L2 terms of both function losses; `w_func_kl`
/// by their KL terms. There are up to `paths_per_iter * (stages - k)` such
/// L2 terms per iteration, so the per-term weight sits well below `w_app`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_task: f64,
    pub w_kd: f64,
    pub w_app: f64,
    pub w_func_fd: f64,
    pub w_func_kl: f64,
    pub temperature: f64,
    pub func_mode: FuncMode,
    pub enable_task: bool,
    pub enable_kd: bool,
    pub enable_app: bool,
    pub enable_func: bool,
    pub enable_func_prime: bool,
    /// Adds intermediate-stage L2 terms to the student-lens loss.
    pub include_func_prime_l2: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_task: 1.0,
            w_kd: 1.0,
            w_app: 1.0,
            w_func_fd: 1.0,
            w_func_kl: 0.2,
            temperature: 4.0,
            func_mode: FuncMode::Full,
            enable_task: true,
            enable_kd: true,
            enable_app: true,
            enable_func: true,
            enable_func_prime: true,
            include_func_prime_l2: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(FcfdError::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        for (n, v) in [
            ("w_task", self.w_task),
            ("w_kd", self.w_kd),
            ("w_app", self.w_app),
            ("w_func_fd", self.w_func_fd),
            ("w_func_kl", self.w_func_kl),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(FcfdError::Config(format!("weight {n} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Disable every distillation term: plain supervised training.
    pub fn task_only() -> Self {
        LossWeights {
            enable_kd: false,
            enable_app: false,
            enable_func: false,
            enable_func_prime: false,
            ..Default::default()
        }
    }

    /// Task + tempered KD only.
    pub fn kd_only() -> Self {
        LossWeights {
            enable_app: false,
            enable_func: false,
            enable_func_prime: false,
            ..Default::default()
        }
    }

    /// Task + KD + appearance matching, no function losses.
    pub fn appearance_only() -> Self {
        LossWeights {
            enable_func: false,
            enable_func_prime: false,
            ..Default::default()
        }
    }
}

/// One term of the teacher-lens loss: the distance at stage `l` (l = N+1 is
/// the tempered KL at the classifier output).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FuncTerm {
    pub k: usize,
    pub l: usize,
    pub is_kl: bool,
    pub value: f64,
}

/// Per-term scalar values of one composite-loss evaluation.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub task: f64,
    pub kd: f64,
    /// (k, value) per candidate position.
    pub app: Vec<(usize, f64)>,
    pub func: Vec<FuncTerm>,
    /// (k, value) KL terms of the student-lens loss.
    pub func_prime: Vec<(usize, f64)>,
    /// (k, l, value) optional intermediate L2 terms of the student-lens loss.
    pub func_prime_l2: Vec<FuncTerm>,
    pub total: f64,
    pub paths_used: Vec<PathSpec>,
}

impl LossReport {
    /// Recomputes the weighted sum from the reported terms; must match
    /// `total` within 1e-6 relative.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        let mut s = 0.0;
        if w.enable_task {
            s += w.w_task * self.task;
        }
        if w.enable_kd {
            s += w.w_kd * self.kd;
        }
        for &(_, v) in &self.app {
            s += w.w_app * v;
        }
        for t in &self.func {
            s += if t.is_kl { w.w_func_kl } else { w.w_func_fd } * t.value;
        }
        for &(_, v) in &self.func_prime {
            s += w.w_func_kl * v;
        }
        for t in &self.func_prime_l2 {
            s += w.w_func_fd * t.value;
        }
        s
    }
}

fn check_finite<F: Scalar>(g: &Graph<F>, node: NodeId, term: &str, path: Option<String>) -> Result<()> {
    if g.value(node).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FcfdError::NonFinite {
            term: term.to_string(),
            path,
        })
    }
}

/// Tempered distillation loss: tau^2 * KL(softmax(t/tau) || softmax(s/tau)),
/// mean over the batch. Gradient reaches only the student side.
pub fn kd_loss<F: Scalar>(
    g: &mut Graph<F>,
    teacher_logits: NodeId,
    student_logits: NodeId,
    tau: f64,
) -> Result<NodeId> {
    check_finite(g, teacher_logits, "kd_loss teacher logits", None)?;
    check_finite(g, student_logits, "kd_loss student logits", None)?;
    Ok(g.kl_tempered(teacher_logits, student_logits, F::f(tau)))
}

/// Appearance loss: mean squared difference between the teacher feature and
/// the bridged student feature. The teacher side is a constant target.
pub fn app_loss<F: Scalar>(
    g: &mut Graph<F>,
    teacher_feat: NodeId,
    bridged_student: NodeId,
    k: usize,
) -> Result<NodeId> {
    let ts = g.value(teacher_feat).shape().to_vec();
    let bs = g.value(bridged_student).shape().to_vec();
    if ts != bs {
        return Err(FcfdError::ShapeMismatch {
            context: format!("appearance loss at k={k}"),
            expected: ts,
            actual: bs,
        });
    }
    let t = g.detach(teacher_feat);
    Ok(g.mse(t, bridged_student))
}

/// Feature distance used inside the function losses: tempered KL on
/// distributions (l = N+1), mean squared difference otherwise.
pub fn fd_distance<F: Scalar>(
    g: &mut Graph<F>,
    a: NodeId,
    b: NodeId,
    is_distribution: bool,
    tau: f64,
) -> NodeId {
    if is_distribution {
        g.kl_tempered(a, b, F::f(tau))
    } else {
        g.mse(a, b)
    }
}

/// Teacher-lens function loss at position `k`: propagates the bridged student
/// feature through the teacher's later stages under its hybrid path key and
/// accumulates distances against the cached pure-teacher activations.
///
/// The teacher-side activations are constant targets. Returns the per-l term
/// nodes; the caller applies weights.
#[allow(clippy::too_many_arguments)]
pub fn func_loss<F: Scalar>(
    g: &mut Graph<F>,
    teacher: &mut StagedModel<F>,
    teacher_feats: &[Feat],
    teacher_logits: NodeId,
    bridged_student: &Feat,
    k: usize,
    mode: FuncMode,
    tau: f64,
    run_mode: Mode,
    policy: &MissingStatsPolicy,
) -> Result<Vec<(usize, bool, NodeId)>> {
    let n = teacher.num_stages();
    let mut terms = Vec::new();
    let mut x = bridged_student.node;
    let mut key = bridged_student.key.clone();
    let stop = match mode {
        FuncMode::Partial => (k + 1).min(n),
        FuncMode::Full => n,
    };
    for l in (k + 1)..=stop {
        let (out, new_key) = teacher.run_stage(g, l, x, &key, run_mode, policy)?;
        x = out;
        key = new_key;
        let target = g.detach(teacher_feats[l - 1].node);
        let d = g.mse(target, x);
        terms.push((l, false, d));
    }
    let include_head = match mode {
        FuncMode::Full => true,
        // Partial keeps only the l = k+1 term; when k = N that term is the head.
        FuncMode::Partial => k == n,
    };
    if include_head {
        let (hybrid_logits, _) = teacher.run_classifier(g, x, &key, run_mode, policy)?;
        let d = g.kl_tempered(teacher_logits, hybrid_logits, F::f(tau));
        terms.push((n + 1, true, d));
    }
    Ok(terms)
}

/// Student-lens function loss at position `k`: tempered KL matching the
/// hybrid output (teacher feature bridged into the student and propagated to
/// its head) towards the pure teacher output.
pub fn func_prime_loss<F: Scalar>(
    g: &mut Graph<F>,
    teacher_logits: NodeId,
    hybrid_logits: NodeId,
    tau: f64,
) -> Result<NodeId> {
    kd_loss(g, teacher_logits, hybrid_logits, tau)
}

/// Everything the composite objective produced for one batch.
pub struct LossOutput {
    pub total: NodeId,
    pub report: LossReport,
    pub teacher_logits: NodeId,
    pub student_logits: NodeId,
    pub teacher_feats: Vec<Feat>,
    pub student_feats: Vec<Feat>,
}

/// Builds the complete sampled objective for one batch:
///
/// total = w_task*L_task + w_kd*L_kd + sum_k w_app*L_app^k
///       + sum_{<k,d> in sampled} [ d*L_func^k + (1-d)*L_func'^k ]
///
/// The appearance loss is computed for every candidate position regardless of
/// the sample; shared prefixes (pure passes, bridged features) are computed
/// once and reused.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<F: Scalar>(
    g: &mut Graph<F>,
    teacher: &mut StagedModel<F>,
    student: &mut StagedModel<F>,
    bridges: &mut BridgeSet<F>,
    x: &ArrayD<F>,
    y: &[usize],
    positions: &[usize],
    sampled: &[PathSpec],
    weights: &LossWeights,
    mode: Mode,
    policy: &MissingStatsPolicy,
) -> Result<LossOutput> {
    weights.validate()?;
    let tau = weights.temperature;
    let mut report = LossReport {
        paths_used: sampled.to_vec(),
        ..Default::default()
    };
    let mut weighted: Vec<NodeId> = Vec::new();

    // Pure passes, computed once and shared by every path.
    let (t_logits, t_feats) = teacher.forward_full(g, x, mode, policy)?;
    let (s_logits, s_feats) = student.forward_full(g, x, mode, policy)?;
    check_finite(g, t_logits, "teacher logits", None)?;
    check_finite(g, s_logits, "student logits", None)?;

    if weights.enable_task {
        let task = g.softmax_cross_entropy(s_logits, y);
        check_finite(g, task, "task loss", None)?;
        report.task = g.scalar(task).to_f64().unwrap();
        weighted.push(g.mul_scalar(task, F::f(weights.w_task)));
    }
    if weights.enable_kd {
        let kd = kd_loss(g, t_logits, s_logits, tau)?;
        check_finite(g, kd, "kd loss", None)?;
        report.kd = g.scalar(kd).to_f64().unwrap();
        weighted.push(g.mul_scalar(kd, F::f(weights.w_kd)));
    }

    // Bridged student features, shared between the appearance loss and the
    // teacher-lens paths at the same position.
    let mut bridged_st: std::collections::BTreeMap<usize, Feat> = Default::default();
    let need_bridged: Vec<usize> = if weights.enable_app {
        positions.to_vec()
    } else {
        sampled
            .iter()
            .filter(|p| p.delta == 1 && weights.enable_func)
            .map(|p| p.k)
            .collect()
    };
    for &k in &need_bridged {
        if bridged_st.contains_key(&k) {
            continue;
        }
        let feat = bridges.apply(g, Direction::StudentToTeacher, k, &s_feats[k - 1], mode)?;
        bridged_st.insert(k, feat);
    }

    if weights.enable_app {
        for &k in positions {
            let b = &bridged_st[&k];
            let a = app_loss(g, t_feats[k - 1].node, b.node, k)?;
            check_finite(g, a, &format!("appearance loss k={k}"), None)?;
            report.app.push((k, g.scalar(a).to_f64().unwrap()));
            weighted.push(g.mul_scalar(a, F::f(weights.w_app)));
        }
    }

    for path in sampled {
        let k = path.k;
        if path.delta == 1 {
            if !weights.enable_func {
                continue;
            }
            let bridged = bridged_st[&k].clone();
            let terms = func_loss(
                g,
                teacher,
                &t_feats,
                t_logits,
                &bridged,
                k,
                weights.func_mode,
                tau,
                mode,
                policy,
            )?;
            for (l, is_kl, node) in terms {
                check_finite(g, node, &format!("func loss k={k} l={l}"), Some(path.to_string()))?;
                let v = g.scalar(node).to_f64().unwrap();
                report.func.push(FuncTerm { k, l, is_kl, value: v });
                let w = if is_kl { weights.w_func_kl } else { weights.w_func_fd };
                weighted.push(g.mul_scalar(node, F::f(w)));
            }
        } else {
            if !weights.enable_func_prime {
                continue;
            }
            let bridged = bridges.apply(g, Direction::TeacherToStudent, k, &t_feats[k - 1], mode)?;
            let n = student.num_stages();
            let mut h = bridged.node;
            let mut key = bridged.key.clone();
            for l in (k + 1)..=n {
                let (out, new_key) = student.run_stage(g, l, h, &key, mode, policy)?;
                h = out;
                key = new_key;
                if weights.include_func_prime_l2 {
                    let d = g.mse(h, s_feats[l - 1].node);
                    check_finite(
                        g,
                        d,
                        &format!("func' L2 k={k} l={l}"),
                        Some(path.to_string()),
                    )?;
                    let v = g.scalar(d).to_f64().unwrap();
                    report.func_prime_l2.push(FuncTerm {
                        k,
                        l,
                        is_kl: false,
                        value: v,
                    });
                    weighted.push(g.mul_scalar(d, F::f(weights.w_func_fd)));
                }
            }
            let (hybrid_logits, _) = student.run_classifier(g, h, &key, mode, policy)?;
            let fp = func_prime_loss(g, t_logits, hybrid_logits, tau)?;
            check_finite(g, fp, &format!("func' loss k={k}"), Some(path.to_string()))?;
            report.func_prime.push((k, g.scalar(fp).to_f64().unwrap()));
            weighted.push(g.mul_scalar(fp, F::f(weights.w_func_kl)));
        }
    }

    let total = if weighted.is_empty() {
        g.constant(ndarray::arr0(F::zero()).into_dyn())
    } else {
        g.sum_n(&weighted)
    };
    check_finite(g, total, "total loss", None)?;
    report.total = g.scalar(total).to_f64().unwrap();
    Ok(LossOutput {
        total,
        report,
        teacher_logits: t_logits,
        student_logits: s_logits,
        teacher_feats: t_feats,
        student_feats: s_feats,
    })
}
