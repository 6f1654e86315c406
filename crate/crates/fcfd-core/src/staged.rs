//! Staged networks: an ordered list of N stage transforms plus a classifier
//! head. Teacher and student are both wrapped into this shape, and hybrid
//! routes re-enter a model at an arbitrary stage via [`StagedModel::forward_from`].

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FcfdError, Result};
use crate::graph::{Graph, NodeId, Scalar};
use crate::nn::{self, FwdCtx, Layer};
use crate::params::ParamStore;
use crate::pathing::{MissingStatsPolicy, Mode, NormStore, PathKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    /// Provenance token for stage `k` (1-based): "Mt3", "Ms1", ...
    pub fn stage_token(&self, k: usize) -> String {
        match self {
            Role::Teacher => format!("Mt{k}"),
            Role::Student => format!("Ms{k}"),
        }
    }

    pub fn classifier_token(&self) -> &'static str {
        match self {
            Role::Teacher => "Ct",
            Role::Student => "Cs",
        }
    }
}

/// An activation inside a graph, together with its provenance.
#[derive(Clone, Debug)]
pub struct Feat {
    pub node: NodeId,
    /// 1-based stage index that produced this feature.
    pub origin_stage: usize,
    pub origin_role: Role,
    pub key: PathKey,
}

/// Result of propagating a feature forward to a stage or through the head.
pub enum FromOutput {
    Feature(Feat),
    Logits { node: NodeId, key: PathKey },
}

pub struct StagedModel<F: Scalar> {
    pub id: String,
    pub role: Role,
    pub stages: Vec<Vec<Layer>>,
    pub classifier: Vec<Layer>,
    pub params: ParamStore<F>,
    pub norms: NormStore<F>,
    /// Declared input shape (channels, height, width).
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub stage_output_shapes: Vec<(usize, usize, usize)>,
}

impl<F: Scalar> StagedModel<F> {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Pure-path key after stage `k`: [M?1, ..., M?k].
    pub fn pure_key(&self, k: usize) -> PathKey {
        PathKey::from_tokens((1..=k).map(|i| self.role.stage_token(i)))
    }

    pub fn pure_classifier_key(&self) -> PathKey {
        self.pure_key(self.num_stages())
            .child(self.role.classifier_token())
    }

    fn check_input_shape(&self, x: &ArrayD<F>) -> Result<()> {
        let s = x.shape();
        let expected = [self.input_shape.0, self.input_shape.1, self.input_shape.2];
        if s.len() != 4 || s[1..] != expected {
            return Err(FcfdError::ShapeMismatch {
                context: format!("input of model '{}'", self.id),
                expected: expected.to_vec(),
                actual: s.to_vec(),
            });
        }
        Ok(())
    }

    fn check_stage_shape(&self, s: &[usize], k: usize, context: &str) -> Result<()> {
        let (c, h, w) = self.stage_output_shapes[k - 1];
        if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w {
            return Err(FcfdError::ShapeMismatch {
                context: context.to_string(),
                expected: vec![c, h, w],
                actual: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Runs stage `k` (1-based) on `x`, extending `key` by the stage token.
    pub fn run_stage(
        &mut self,
        g: &mut Graph<F>,
        k: usize,
        x: NodeId,
        key: &PathKey,
        mode: Mode,
        policy: &MissingStatsPolicy,
    ) -> Result<(NodeId, PathKey)> {
        let new_key = key.child(self.role.stage_token(k));
        let ctx = FwdCtx {
            mode,
            key: new_key.clone(),
            pure_key: Some(self.pure_key(k)),
            policy: policy.clone(),
        };
        let out = Layer::forward_seq(&self.stages[k - 1], g, &self.params, &mut self.norms, &ctx, x)?;
        Ok((out, new_key))
    }

    /// Runs the classifier head on a final-stage feature.
    pub fn run_classifier(
        &mut self,
        g: &mut Graph<F>,
        x: NodeId,
        key: &PathKey,
        mode: Mode,
        policy: &MissingStatsPolicy,
    ) -> Result<(NodeId, PathKey)> {
        let new_key = key.child(self.role.classifier_token());
        let ctx = FwdCtx {
            mode,
            key: new_key.clone(),
            pure_key: Some(self.pure_classifier_key()),
            policy: policy.clone(),
        };
        let out = Layer::forward_seq(&self.classifier, g, &self.params, &mut self.norms, &ctx, x)?;
        Ok((out, new_key))
    }

    /// Full forward pass: returns logits and the features F^1..F^N in stage
    /// order, all under the model's pure path keys.
    pub fn forward_full(
        &mut self,
        g: &mut Graph<F>,
        batch: &ArrayD<F>,
        mode: Mode,
        policy: &MissingStatsPolicy,
    ) -> Result<(NodeId, Vec<Feat>)> {
        self.check_input_shape(batch)?;
        let mut x = g.constant(batch.clone());
        let mut key = PathKey::empty();
        let mut feats = Vec::with_capacity(self.num_stages());
        for k in 1..=self.num_stages() {
            let (out, new_key) = self.run_stage(g, k, x, &key, mode, policy)?;
            x = out;
            key = new_key;
            feats.push(Feat {
                node: x,
                origin_stage: k,
                origin_role: self.role,
                key: key.clone(),
            });
        }
        let (logits, _) = self.run_classifier(g, x, &key, mode, policy)?;
        Ok((logits, feats))
    }

    /// Propagates `feature` through stages start+1 ..= stop. `stop = N+1`
    /// means "through the classifier" and yields logits. The produced
    /// feature's key extends the input's key by the traversed modules; the
    /// input feature itself is never mutated.
    pub fn forward_from(
        &mut self,
        g: &mut Graph<F>,
        feature: &Feat,
        start_stage: usize,
        stop_stage: usize,
        mode: Mode,
        policy: &MissingStatsPolicy,
    ) -> Result<FromOutput> {
        let n = self.num_stages();
        if start_stage < 1 || start_stage >= stop_stage || stop_stage > n + 1 {
            return Err(FcfdError::StageRange {
                start: start_stage,
                stop: stop_stage,
                n,
            });
        }
        let value_shape = g.value(feature.node).shape().to_vec();
        self.check_stage_shape(
            &value_shape,
            start_stage,
            &format!("entry of stage {} of model '{}'", start_stage + 1, self.id),
        )?;
        let mut x = feature.node;
        let mut key = feature.key.clone();
        for k in (start_stage + 1)..=stop_stage.min(n) {
            let (out, new_key) = self.run_stage(g, k, x, &key, mode, policy)?;
            x = out;
            key = new_key;
        }
        if stop_stage == n + 1 {
            let (logits, key) = self.run_classifier(g, x, &key, mode, policy)?;
            Ok(FromOutput::Logits { node: logits, key })
        } else {
            Ok(FromOutput::Feature(Feat {
                node: x,
                origin_stage: stop_stage,
                origin_role: feature.origin_role,
                key,
            }))
        }
    }
}

/// Names accepted by [`build_reference_pair`].
pub const REGISTRY_NAMES: [&str; 3] = ["tiny-resnet-pair", "tiny-hetero-pair", "toy-scalar-pair"];

/// Builds a registered (teacher, student) pair at desk scale. Initialization
/// is deterministic given `seed`.
pub fn build_reference_pair<F: Scalar>(
    name: &str,
    seed: u64,
) -> Result<(StagedModel<F>, StagedModel<F>)> {
    match name {
        "tiny-resnet-pair" => Ok((
            build_tiny_resnet(Role::Teacher, "tiny-resnet-t", &[16, 24, 32, 32], seed),
            build_tiny_resnet(Role::Student, "tiny-resnet-s", &[8, 12, 16, 16], seed + 1),
        )),
        "tiny-hetero-pair" => Ok((
            build_tiny_resnet(Role::Teacher, "tiny-hetero-t", &[16, 24, 32, 32], seed),
            build_tiny_plain(Role::Student, "tiny-hetero-s", &[8, 12, 24, 24], seed + 1),
        )),
        "toy-scalar-pair" => Ok((build_toy_teacher(), build_toy_student(seed))),
        _ => Err(FcfdError::UnknownRegistryName {
            name: name.to_string(),
            valid: REGISTRY_NAMES.to_vec(),
        }),
    }
}

/// Four-stage residual network on 3x32x32 inputs, spatial 16/8/4/4.
fn build_tiny_resnet<F: Scalar>(
    role: Role,
    id: &str,
    channels: &[usize; 4],
    seed: u64,
) -> StagedModel<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut norms = NormStore::new();
    let (c1, c2, c3, c4) = (channels[0], channels[1], channels[2], channels[3]);
    let stages = vec![
        nn::conv_bn_relu(&mut params, &mut norms, &mut rng, "stage1", 3, c1, 2, true),
        vec![nn::residual_block(
            &mut params, &mut norms, &mut rng, "stage2", c1, c2, 2, true,
        )],
        vec![nn::residual_block(
            &mut params, &mut norms, &mut rng, "stage3", c2, c3, 2, true,
        )],
        vec![nn::residual_block(
            &mut params, &mut norms, &mut rng, "stage4", c3, c4, 1, true,
        )],
    ];
    let classifier = vec![
        Layer::GlobalAvgPool,
        nn::linear(&mut params, &mut rng, "head.fc", c4, 10),
    ];
    finish_model(id, role, stages, classifier, params, norms, (3, 32, 32), 10)
}

/// Four-stage plain conv network on 3x32x32 inputs, spatial 32/16/8/8.
fn build_tiny_plain<F: Scalar>(
    role: Role,
    id: &str,
    channels: &[usize; 4],
    seed: u64,
) -> StagedModel<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut norms = NormStore::new();
    let (c1, c2, c3, c4) = (channels[0], channels[1], channels[2], channels[3]);
    let stages = vec![
        nn::conv_bn_relu(&mut params, &mut norms, &mut rng, "stage1", 3, c1, 1, true),
        nn::conv_bn_relu(&mut params, &mut norms, &mut rng, "stage2", c1, c2, 2, true),
        nn::conv_bn_relu(&mut params, &mut norms, &mut rng, "stage3", c2, c3, 2, true),
        nn::conv_bn_relu(&mut params, &mut norms, &mut rng, "stage4", c3, c4, 1, true),
    ];
    let classifier = vec![
        Layer::GlobalAvgPool,
        nn::linear(&mut params, &mut rng, "head.fc", c4, 10),
    ];
    finish_model(id, role, stages, classifier, params, norms, (3, 32, 32), 10)
}

/// The single-stage scalar construction: stage (5x^2-1, 2x+2), head m1^4 + 5 m2^2.
fn build_toy_teacher<F: Scalar>() -> StagedModel<F> {
    finish_model(
        "toy-scalar-t",
        Role::Teacher,
        vec![vec![Layer::ToyPolyFeature]],
        vec![Layer::ToyPolyHead],
        ParamStore::new(),
        NormStore::new(),
        (1, 1, 1),
        1,
    )
}

fn build_toy_student<F: Scalar>(seed: u64) -> StagedModel<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let w = crate::params::uniform_fan_in(&mut rng, &[1, 2], 1);
    let wid = params.add("stage1.w", w);
    finish_model(
        "toy-scalar-s",
        Role::Student,
        vec![vec![Layer::ToyLinearFeature { w: wid }]],
        vec![Layer::ToyPolyHead],
        params,
        NormStore::new(),
        (1, 1, 1),
        1,
    )
}

/// Single flatten+linear model, used as the linear baseline in dataset
/// calibration checks.
pub fn build_linear_model<F: Scalar>(
    input_shape: (usize, usize, usize),
    num_classes: usize,
    seed: u64,
) -> StagedModel<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let din = input_shape.0 * input_shape.1 * input_shape.2;
    let stages = vec![vec![Layer::Flatten]];
    let classifier = vec![nn::linear(&mut params, &mut rng, "head.fc", din, num_classes)];
    finish_model(
        "linear-baseline",
        Role::Student,
        stages,
        classifier,
        params,
        NormStore::new(),
        input_shape,
        num_classes,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish_model<F: Scalar>(
    id: &str,
    role: Role,
    stages: Vec<Vec<Layer>>,
    classifier: Vec<Layer>,
    params: ParamStore<F>,
    norms: NormStore<F>,
    input_shape: (usize, usize, usize),
    num_classes: usize,
) -> StagedModel<F> {
    let mut model = StagedModel {
        id: id.to_string(),
        role,
        stages,
        classifier,
        params,
        norms,
        input_shape,
        num_classes,
        stage_output_shapes: Vec::new(),
    };
    model.stage_output_shapes = infer_stage_shapes(&mut model);
    model
}

/// Probes each stage's runtime output shape with a zero batch. Statistics are
/// restored afterwards so construction leaves no trace in the norm state.
fn infer_stage_shapes<F: Scalar>(model: &mut StagedModel<F>) -> Vec<(usize, usize, usize)> {
    let saved_norms = model.norms.clone();
    let (c, h, w) = model.input_shape;
    let batch = ArrayD::<F>::zeros(ndarray::IxDyn(&[2, c, h, w]));
    let mut g = Graph::new();
    let (_, feats) = model
        .forward_full(&mut g, &batch, Mode::Train, &MissingStatsPolicy::Strict)
        .expect("shape probe failed");
    let shapes = feats
        .iter()
        .map(|f| {
            let s = g.value(f.node).shape();
            // Flattened stages yield [N, D]; treat them as 1x1 spatial.
            match s.len() {
                2 => (s[1], 1, 1),
                _ => (s[1], s[2], s[3]),
            }
        })
        .collect();
    model.norms = saved_norms;
    shapes
}
