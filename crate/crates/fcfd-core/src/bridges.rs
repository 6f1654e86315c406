//! Shape-adapting bridge modules between student and teacher feature spaces.
//!
//! A bridge is exactly one convolution plus one batch-normalization layer,
//! with a leaky rectifier appended when the matched target is a
//! post-rectifier feature. The convolution kind is dictated by the spatial
//! ratio between source and target: equal -> 3x3 stride 1, half -> 3x3
//! stride 2, double -> transposed 4x4 stride 2.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FcfdError, Result};
use crate::graph::{Graph, Scalar};
use crate::nn::{self, FwdCtx, Layer};
use crate::params::ParamStore;
use crate::pathing::{MissingStatsPolicy, Mode, NormStore};
use crate::staged::{Feat, StagedModel};

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Direction {
    StudentToTeacher,
    TeacherToStudent,
}

impl Direction {
    /// Provenance token for the bridge at position `k`: "Bst2" / "Bts3".
    pub fn token(&self, k: usize) -> String {
        match self {
            Direction::StudentToTeacher => format!("Bst{k}"),
            Direction::TeacherToStudent => format!("Bts{k}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BridgeKind {
    Stride1Conv,
    Stride2Conv,
    TransposedConv,
}

/// Picks the convolution kind from the source/target spatial ratio.
pub fn infer_bridge_kind(
    in_shape: (usize, usize, usize),
    out_shape: (usize, usize, usize),
) -> Result<BridgeKind> {
    let (_, ih, iw) = in_shape;
    let (_, oh, ow) = out_shape;
    if oh == ih && ow == iw {
        Ok(BridgeKind::Stride1Conv)
    } else if oh * 2 == ih && ow * 2 == iw {
        Ok(BridgeKind::Stride2Conv)
    } else if oh == ih * 2 && ow == iw * 2 {
        Ok(BridgeKind::TransposedConv)
    } else {
        Err(FcfdError::UnsupportedGeometry {
            position: 0,
            from: in_shape,
            to: out_shape,
        })
    }
}

/// Closed-form parameter count of a bridge: convolution kernel plus the
/// normalization affine pair.
pub fn bridge_param_count(kind: BridgeKind, cin: usize, cout: usize) -> usize {
    let kernel = match kind {
        BridgeKind::Stride1Conv | BridgeKind::Stride2Conv => cin * cout * 3 * 3,
        BridgeKind::TransposedConv => cin * cout * 4 * 4,
    };
    kernel + 2 * cout
}

#[derive(Clone, Debug)]
pub struct Bridge {
    pub direction: Direction,
    pub position: usize,
    pub in_shape: (usize, usize, usize),
    pub out_shape: (usize, usize, usize),
    pub kind: BridgeKind,
    layers: Vec<Layer>,
}

impl Bridge {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }
}

/// All bridges of a teacher/student pair: one per (direction, position).
pub struct BridgeSet<F: Scalar> {
    pub params: ParamStore<F>,
    pub norms: NormStore<F>,
    bridges: BTreeMap<(Direction, usize), Bridge>,
}

impl<F: Scalar> BridgeSet<F> {
    pub fn len(&self) -> usize {
        self.bridges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bridges.is_empty()
    }

    pub fn get(&self, direction: Direction, k: usize) -> Option<&Bridge> {
        self.bridges.get(&(direction, k))
    }

    pub fn positions(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = self
            .bridges
            .keys()
            .filter(|(d, _)| *d == Direction::StudentToTeacher)
            .map(|(_, k)| *k)
            .collect();
        ks.sort_unstable();
        ks
    }

    /// Applies the bridge at (direction, k) to `feat`, extending its path key
    /// by the bridge token. The produced feature belongs to the target model's
    /// feature space at position k.
    pub fn apply(
        &mut self,
        g: &mut Graph<F>,
        direction: Direction,
        k: usize,
        feat: &Feat,
        mode: Mode,
    ) -> Result<Feat> {
        let bridge = self
            .bridges
            .get(&(direction, k))
            .ok_or_else(|| FcfdError::Config(format!("no bridge for {:?} at k={k}", direction)))?;
        let in_s = g.value(feat.node).shape().to_vec();
        let (c, h, w) = bridge.in_shape;
        if in_s.len() != 4 || in_s[1] != c || in_s[2] != h || in_s[3] != w {
            return Err(FcfdError::ShapeMismatch {
                context: format!("bridge {} input", direction.token(k)),
                expected: vec![c, h, w],
                actual: in_s,
            });
        }
        let key = feat.key.child(direction.token(k));
        let ctx = FwdCtx {
            mode,
            key: key.clone(),
            pure_key: None,
            policy: MissingStatsPolicy::Strict,
        };
        let layers = bridge.layers.clone();
        let out = Layer::forward_seq(&layers, g, &self.params, &mut self.norms, &ctx, feat.node)?;
        let origin_role = match direction {
            Direction::StudentToTeacher => crate::staged::Role::Teacher,
            Direction::TeacherToStudent => crate::staged::Role::Student,
        };
        Ok(Feat {
            node: out,
            origin_stage: k,
            origin_role,
            key,
        })
    }
}

/// Builds the 2·|K| bridges mapping student stage-k features to teacher
/// stage-k shape and vice versa.
pub fn build_bridge_set<F: Scalar>(
    teacher: &StagedModel<F>,
    student: &StagedModel<F>,
    positions: &[usize],
    seed: u64,
) -> Result<BridgeSet<F>> {
    if teacher.num_stages() != student.num_stages() {
        return Err(FcfdError::Config(format!(
            "teacher has {} stages but student has {}",
            teacher.num_stages(),
            student.num_stages()
        )));
    }
    let n = teacher.num_stages();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut norms = NormStore::new();
    let mut bridges = BTreeMap::new();
    for &k in positions {
        if k < 1 || k > n {
            return Err(FcfdError::Config(format!(
                "bridge position {k} outside 1..={n}"
            )));
        }
        let t_shape = teacher.stage_output_shapes[k - 1];
        let s_shape = student.stage_output_shapes[k - 1];
        for (direction, from, to, target_model) in [
            (Direction::StudentToTeacher, s_shape, t_shape, teacher),
            (Direction::TeacherToStudent, t_shape, s_shape, student),
        ] {
            let kind = infer_bridge_kind(from, to).map_err(|e| match e {
                FcfdError::UnsupportedGeometry { from, to, .. } => {
                    FcfdError::UnsupportedGeometry {
                        position: k,
                        from,
                        to,
                    }
                }
                other => other,
            })?;
            let name = direction.token(k);
            let mut layers = Vec::new();
            match kind {
                BridgeKind::Stride1Conv => layers.push(nn::conv2d(
                    &mut params,
                    &mut rng,
                    &format!("{name}.conv"),
                    from.0,
                    to.0,
                    3,
                    1,
                    1,
                )),
                BridgeKind::Stride2Conv => layers.push(nn::conv2d(
                    &mut params,
                    &mut rng,
                    &format!("{name}.conv"),
                    from.0,
                    to.0,
                    3,
                    2,
                    1,
                )),
                BridgeKind::TransposedConv => layers.push(nn::conv_transpose2d(
                    &mut params,
                    &mut rng,
                    &format!("{name}.conv"),
                    from.0,
                    to.0,
                    4,
                    2,
                    1,
                )),
            }
            // Bridges see exactly one input distribution each, so their
            // normalization keeps ordinary single-path statistics.
            layers.push(nn::batch_norm(
                &mut params,
                &mut norms,
                &format!("{name}.bn"),
                to.0,
                false,
            ));
            if stage_is_post_rectifier(target_model, k) {
                layers.push(Layer::LeakyRelu { slope: LEAKY_SLOPE });
            }
            bridges.insert(
                (direction, k),
                Bridge {
                    direction,
                    position: k,
                    in_shape: from,
                    out_shape: to,
                    kind,
                    layers,
                },
            );
        }
    }
    Ok(BridgeSet {
        params,
        norms,
        bridges,
    })
}

/// A bridge set whose bridges are all pass-throughs. Requires teacher and
/// student shapes to agree at every position; used for self-distillation
/// setups where the two feature spaces already coincide.
pub fn build_identity_bridge_set<F: Scalar>(
    teacher: &StagedModel<F>,
    student: &StagedModel<F>,
    positions: &[usize],
) -> Result<BridgeSet<F>> {
    let mut bridges = BTreeMap::new();
    for &k in positions {
        let t_shape = teacher.stage_output_shapes[k - 1];
        let s_shape = student.stage_output_shapes[k - 1];
        if t_shape != s_shape {
            return Err(FcfdError::UnsupportedGeometry {
                position: k,
                from: s_shape,
                to: t_shape,
            });
        }
        for direction in [Direction::StudentToTeacher, Direction::TeacherToStudent] {
            bridges.insert(
                (direction, k),
                Bridge {
                    direction,
                    position: k,
                    in_shape: t_shape,
                    out_shape: t_shape,
                    kind: BridgeKind::Stride1Conv,
                    layers: Vec::new(),
                },
            );
        }
    }
    Ok(BridgeSet {
        params: ParamStore::new(),
        norms: NormStore::new(),
        bridges,
    })
}

/// Whether the target model's stage-k output is a post-rectifier feature.
fn stage_is_post_rectifier<F: Scalar>(model: &StagedModel<F>, k: usize) -> bool {
    match model.stages[k - 1].last() {
        Some(Layer::Relu) | Some(Layer::Residual { .. }) => true,
        Some(Layer::LeakyRelu { .. }) => true,
        _ => false,
    }
}
