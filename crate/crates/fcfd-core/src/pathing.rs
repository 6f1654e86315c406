//! Path descriptors, per-iteration path sampling, and provenance-keyed
//! normalization statistics.
//!
//! A hybrid forward route is identified by `<k, delta>`: the route switches
//! networks after stage `k`, with `delta = 1` for student-to-teacher and
//! `delta = 0` for teacher-to-student. Normalization layers that can receive
//! activations from several routes keep one running-statistics entry per
//! [`PathKey`] while sharing a single set of affine parameters.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FcfdError, Result};
use crate::graph::{Graph, NodeId, Scalar};

/// A hybrid forward route `<k, delta>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct PathSpec {
    pub k: usize,
    /// 1 = student feature continues through the teacher (function loss);
    /// 0 = teacher feature continues through the student (reversed function loss).
    pub delta: u8,
}

impl fmt::Display for PathSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{},{}>", self.k, self.delta)
    }
}

#[derive(Clone, Debug)]
pub struct SamplerConfig {
    /// Candidate switch positions, ordered.
    pub candidate_positions: Vec<usize>,
    /// Number of paths drawn per iteration.
    pub paths_per_iter: usize,
    pub rng_seed: u64,
}

impl SamplerConfig {
    pub fn new(candidate_positions: Vec<usize>, paths_per_iter: usize, rng_seed: u64) -> Self {
        SamplerConfig {
            candidate_positions,
            paths_per_iter,
            rng_seed,
        }
    }

    pub fn k_min(&self) -> usize {
        self.candidate_positions.iter().copied().min().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidate_positions.is_empty() {
            return Err(FcfdError::Config(
                "sampler: candidate position list is empty".into(),
            ));
        }
        let n = 2 * self.candidate_positions.len();
        if self.paths_per_iter == 0 || self.paths_per_iter > n {
            return Err(FcfdError::Config(format!(
                "sampler: paths_per_iter {} outside 1..={n}",
                self.paths_per_iter
            )));
        }
        Ok(())
    }
}

/// Cross product of candidate positions and delta in {0, 1}, in deterministic
/// order: all deltas for the first position, then the next position.
pub fn enumerate_candidates(cfg: &SamplerConfig) -> Result<Vec<PathSpec>> {
    if cfg.candidate_positions.is_empty() {
        return Err(FcfdError::Config(
            "sampler: candidate position list is empty".into(),
        ));
    }
    let mut out = Vec::with_capacity(cfg.candidate_positions.len() * 2);
    for &k in &cfg.candidate_positions {
        out.push(PathSpec { k, delta: 0 });
        out.push(PathSpec { k, delta: 1 });
    }
    Ok(out)
}

/// Uniform sample of `paths_per_iter` candidates without replacement,
/// deterministic given (rng_seed, iteration).
pub fn sample_paths(cfg: &SamplerConfig, iteration: u64) -> Result<Vec<PathSpec>> {
    cfg.validate()?;
    let mut candidates = enumerate_candidates(cfg)?;
    if cfg.paths_per_iter > candidates.len() {
        return Err(FcfdError::Config(format!(
            "sampler: paths_per_iter {} exceeds {} candidates",
            cfg.paths_per_iter,
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(iteration.wrapping_add(1));
    candidates.shuffle(&mut rng);
    candidates.truncate(cfg.paths_per_iter);
    Ok(candidates)
}

/// Provenance of an activation: the ordered identifiers of the modules that
/// produced it. Recorded at stage granularity.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PathKey {
    tokens: Vec<String>,
}

impl PathKey {
    pub fn empty() -> Self {
        PathKey { tokens: Vec::new() }
    }

    pub fn from_tokens<I: IntoIterator<Item = S>, S: Into<String>>(tokens: I) -> Self {
        PathKey {
            tokens: tokens.into_iter().map(Into::into).collect(),
        }
    }

    /// New key with `token` appended; keys are append-only.
    pub fn child(&self, token: impl Into<String>) -> Self {
        let mut tokens = self.tokens.clone();
        tokens.push(token.into());
        PathKey { tokens }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// '/'-joined token list, as used in checkpoint entry names.
    pub fn as_string(&self) -> String {
        self.tokens.join("/")
    }

    pub fn parse(s: &str) -> Self {
        if s.is_empty() {
            PathKey::empty()
        } else {
            PathKey {
                tokens: s.split('/').map(str::to_owned).collect(),
            }
        }
    }
}

impl fmt::Display for PathKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_string())
    }
}

/// What eval mode does when a key has no accumulated statistics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MissingStatsPolicy {
    /// Fail with a missing-statistics error.
    Strict,
    /// Fall back to the owning model's pure-path key.
    FallbackToPure,
}

#[derive(Clone, Debug)]
pub struct StatsEntry<F: Scalar> {
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub update_count: u64,
}

impl<F: Scalar> StatsEntry<F> {
    fn fresh(channels: usize) -> Self {
        StatsEntry {
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            update_count: 0,
        }
    }
}

/// Running statistics of one normalization layer, keyed by input provenance.
/// The affine parameters live in the owning model's parameter store and are
/// shared across all keys.
#[derive(Clone, Debug)]
pub struct RoutedNormState<F: Scalar> {
    /// Stable layer name used in checkpoint entry paths.
    pub name: String,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
    /// Non-routed layers (bridges, exit branches) see one input distribution
    /// and always use [`LOCAL_KEY`].
    pub routed: bool,
    pub stats: BTreeMap<PathKey, StatsEntry<F>>,
}

/// Fixed key for normalization layers that never see hybrid inputs.
pub const LOCAL_TOKEN: &str = "local";

impl<F: Scalar> RoutedNormState<F> {
    pub fn new(name: impl Into<String>, channels: usize, routed: bool) -> Self {
        RoutedNormState {
            name: name.into(),
            channels,
            momentum: 0.1,
            eps: 1e-5,
            routed,
            stats: BTreeMap::new(),
        }
    }

    pub fn effective_key(&self, key: &PathKey) -> PathKey {
        if self.routed {
            key.clone()
        } else {
            PathKey::from_tokens([LOCAL_TOKEN])
        }
    }

    /// EMA update of the statistics for `key` only; all other entries are
    /// untouched. Fresh keys start from mean 0, variance 1.
    pub fn update(&mut self, key: &PathKey, batch_mean: &Array1<F>, batch_var: &Array1<F>) {
        let key = self.effective_key(key);
        let entry = self
            .stats
            .entry(key)
            .or_insert_with(|| StatsEntry::fresh(self.channels));
        let m = F::f(self.momentum);
        let one_m = F::one() - m;
        entry.running_mean = entry.running_mean.mapv(|v| v * one_m) + &batch_mean.mapv(|v| v * m);
        entry.running_var = entry.running_var.mapv(|v| v * one_m) + &batch_var.mapv(|v| v * m);
        entry.update_count += 1;
    }

    pub fn lookup(
        &self,
        key: &PathKey,
        policy: &MissingStatsPolicy,
        pure_key: Option<&PathKey>,
    ) -> Result<&StatsEntry<F>> {
        let key = self.effective_key(key);
        if let Some(e) = self.stats.get(&key) {
            return Ok(e);
        }
        if let MissingStatsPolicy::FallbackToPure = policy {
            if let Some(pk) = pure_key {
                if let Some(e) = self.stats.get(&self.effective_key(pk)) {
                    return Ok(e);
                }
            }
        }
        Err(FcfdError::MissingStats {
            key: key.as_string(),
        })
    }
}

/// Identifies one [`RoutedNormState`] within a [`NormStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormId(pub usize);

/// All normalization states owned by one model (or bridge set / branch).
#[derive(Clone, Debug, Default)]
pub struct NormStore<F: Scalar> {
    states: Vec<RoutedNormState<F>>,
}

impl<F: Scalar> NormStore<F> {
    pub fn new() -> Self {
        NormStore { states: Vec::new() }
    }

    pub fn add(&mut self, state: RoutedNormState<F>) -> NormId {
        self.states.push(state);
        NormId(self.states.len() - 1)
    }

    pub fn get(&self, id: NormId) -> &RoutedNormState<F> {
        &self.states[id.0]
    }

    pub fn get_mut(&mut self, id: NormId) -> &mut RoutedNormState<F> {
        &mut self.states[id.0]
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[RoutedNormState<F>] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [RoutedNormState<F>] {
        &mut self.states
    }
}

/// Train or eval normalization semantics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Applies a routed normalization layer to graph node `x`.
///
/// Train mode normalizes by batch statistics and updates only `stats[key]`.
/// Eval mode normalizes by `stats[key]` (subject to `policy`). The shared
/// affine transform is applied in both modes through `gamma` / `beta` nodes.
#[allow(clippy::too_many_arguments)]
pub fn routed_norm_forward<F: Scalar>(
    state: &mut RoutedNormState<F>,
    graph: &mut Graph<F>,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    key: &PathKey,
    mode: Mode,
    policy: &MissingStatsPolicy,
    pure_key: Option<&PathKey>,
) -> Result<NodeId> {
    match mode {
        Mode::Train => {
            let (out, mean, var_unbiased) =
                graph.batch_norm_train(x, gamma, beta, F::f(state.eps));
            state.update(key, &mean, &var_unbiased);
            Ok(out)
        }
        Mode::Eval => {
            let entry = state.lookup(key, policy, pure_key)?;
            let (mean, var) = (entry.running_mean.clone(), entry.running_var.clone());
            Ok(graph.batch_norm_eval(x, gamma, beta, mean, var, F::f(state.eps)))
        }
    }
}
