//! Discrete augmentation operators on integer parameter lattices.
//!
//! Every operator parameter lives on a small lattice of consecutive integer
//! levels. A `Pipeline` is an ordered list of operators with concrete levels,
//! sampled per batch and applied to the whole batch. Levels map to physical
//! units (degrees, pixels, factors) through fixed linear tables, so the
//! adaptation step can move a parameter one lattice step at a time.

mod kernels;

use rand::Rng;

use crate::data::ImageBatch;
use crate::error::{Error, Result};

/// Image height/width pair; resolves coordinate lattices and pixel maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Extent {
    pub height: usize,
    pub width: usize,
}

/// The augmentation operators a sampler can draw from.
///
/// Geometric operators resample nearest-neighbor with zero padding.
/// Magnitude lattices span levels 0..=9. Signed operators (translation,
/// brightness, contrast) carry a separate two-valued direction parameter
/// that is fixed at sampling time and never adapted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Rotate,
    TranslateX,
    TranslateY,
    ShearX,
    ShearY,
    Brightness,
    Contrast,
    Solarize,
    Posterize,
    Cutout,
}

/// One integer-lattice parameter of an operator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub min_level: i32,
    pub max_level: i32,
    /// Level at which the operator is a bit-exact identity, if one exists.
    pub identity_level: Option<i32>,
    /// Whether the adaptation step may move this parameter.
    pub adaptable: bool,
}

impl ParamSpec {
    pub fn contains(&self, level: i32) -> bool {
        (self.min_level..=self.max_level).contains(&level)
    }

    /// A lattice with a single level cannot be perturbed.
    pub fn single_level(&self) -> bool {
        self.min_level == self.max_level
    }
}

/// How a template parameter's bounds resolve against an image extent.
#[derive(Clone, Copy, Debug)]
enum Bound {
    /// The ten-level magnitude lattice 0..=9.
    Magnitude,
    /// Two-valued direction flag; level 0 maps to -1.0, level 1 to +1.0.
    Flag,
    /// Horizontal pixel coordinate 0..=width-1.
    WidthCoord,
    /// Vertical pixel coordinate 0..=height-1.
    HeightCoord,
}

#[derive(Clone, Copy, Debug)]
struct SpecTemplate {
    name: &'static str,
    bound: Bound,
    identity_level: Option<i32>,
    adaptable: bool,
}

const MAG: SpecTemplate = SpecTemplate {
    name: "magnitude",
    bound: Bound::Magnitude,
    identity_level: Some(0),
    adaptable: true,
};
const DIR: SpecTemplate = SpecTemplate {
    name: "direction",
    bound: Bound::Flag,
    identity_level: None,
    adaptable: false,
};

impl OpKind {
    pub const ALL: [OpKind; 10] = [
        OpKind::Rotate,
        OpKind::TranslateX,
        OpKind::TranslateY,
        OpKind::ShearX,
        OpKind::ShearY,
        OpKind::Brightness,
        OpKind::Contrast,
        OpKind::Solarize,
        OpKind::Posterize,
        OpKind::Cutout,
    ];

    fn template(self) -> &'static [SpecTemplate] {
        match self {
            OpKind::Rotate | OpKind::ShearX | OpKind::ShearY | OpKind::Posterize => &[MAG],
            // Solarize level 0 keeps threshold 1.0, which still inverts
            // pixels sitting exactly at 1.0, so it has no identity level.
            OpKind::Solarize => &[SpecTemplate {
                identity_level: None,
                ..MAG
            }],
            OpKind::TranslateX
            | OpKind::TranslateY
            | OpKind::Brightness
            | OpKind::Contrast => &[MAG, DIR],
            OpKind::Cutout => &[
                SpecTemplate { name: "size", ..MAG },
                SpecTemplate {
                    name: "center_x",
                    bound: Bound::WidthCoord,
                    identity_level: None,
                    adaptable: true,
                },
                SpecTemplate {
                    name: "center_y",
                    bound: Bound::HeightCoord,
                    identity_level: None,
                    adaptable: true,
                },
            ],
        }
    }

    /// The parameter lattices of this operator for the given image extent.
    pub fn param_specs(self, ext: Extent) -> Vec<ParamSpec> {
        self.template()
            .iter()
            .map(|t| {
                let (min_level, max_level) = match t.bound {
                    Bound::Magnitude => (0, 9),
                    Bound::Flag => (0, 1),
                    Bound::WidthCoord => (0, ext.width as i32 - 1),
                    Bound::HeightCoord => (0, ext.height as i32 - 1),
                };
                ParamSpec {
                    name: t.name,
                    min_level,
                    max_level,
                    identity_level: t.identity_level,
                    adaptable: t.adaptable,
                }
            })
            .collect()
    }

    pub fn param_count(self) -> usize {
        self.template().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Rotate => "rotate",
            OpKind::TranslateX => "translate-x",
            OpKind::TranslateY => "translate-y",
            OpKind::ShearX => "shear-x",
            OpKind::ShearY => "shear-y",
            OpKind::Brightness => "brightness",
            OpKind::Contrast => "contrast",
            OpKind::Solarize => "solarize",
            OpKind::Posterize => "posterize",
            OpKind::Cutout => "cutout",
        }
    }

    pub fn from_name(s: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// An operator with a concrete level for each of its parameters.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct OpInstance {
    pub kind: OpKind,
    pub levels: Vec<i32>,
}

impl OpInstance {
    pub fn new(kind: OpKind, levels: Vec<i32>) -> Self {
        OpInstance { kind, levels }
    }

    fn validate(&self, ext: Extent, op_index: usize) -> Result<()> {
        let specs = self.kind.param_specs(ext);
        if self.levels.len() != specs.len() {
            return Err(Error::Domain(format!(
                "op {op_index} ({}) has {} levels but {} parameters",
                self.kind,
                self.levels.len(),
                specs.len()
            )));
        }
        for (j, (level, spec)) in self.levels.iter().zip(&specs).enumerate() {
            if !spec.contains(*level) {
                return Err(Error::Domain(format!(
                    "op {op_index} ({}) parameter {j} ({}): level {level} outside [{}, {}]",
                    self.kind, spec.name, spec.min_level, spec.max_level
                )));
            }
        }
        Ok(())
    }
}

/// An ordered list of operators applied, in order, to a whole batch.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Pipeline {
    pub ops: Vec<OpInstance>,
}

impl Pipeline {
    pub fn new(ops: Vec<OpInstance>) -> Self {
        Pipeline { ops }
    }

    pub fn validate(&self, ext: Extent) -> Result<()> {
        for (i, op) in self.ops.iter().enumerate() {
            op.validate(ext, i)?;
        }
        Ok(())
    }

    pub fn level_at(&self, loc: ParamLocator) -> Option<i32> {
        self.ops
            .get(loc.op_index)
            .and_then(|op| op.levels.get(loc.param_index))
            .copied()
    }

    /// The lattice of the parameter at `loc`, resolved for `ext`.
    pub fn spec_at(&self, loc: ParamLocator, ext: Extent) -> Option<ParamSpec> {
        self.ops
            .get(loc.op_index)
            .and_then(|op| op.kind.param_specs(ext).into_iter().nth(loc.param_index))
    }

    /// A copy of this pipeline with the single scalar at `loc` replaced.
    pub fn with_level(&self, loc: ParamLocator, level: i32) -> Pipeline {
        let mut p = self.clone();
        p.ops[loc.op_index].levels[loc.param_index] = level;
        p
    }
}

impl std::fmt::Display for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[")?;
        for (i, op) in self.ops.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{}{:?}", op.kind, op.levels)?;
        }
        write!(f, "]")
    }
}

/// Position of one scalar parameter within a pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamLocator {
    pub op_index: usize,
    pub param_index: usize,
}

/// The operator kinds available to the sampler, bound to an image extent.
#[derive(Clone, Debug)]
pub struct Registry {
    kinds: Vec<OpKind>,
    extent: Extent,
}

impl Registry {
    pub fn new(kinds: Vec<OpKind>, extent: Extent) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::Config("operator registry is empty".into()));
        }
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                return Err(Error::Config(format!("duplicate operator {k} in registry")));
            }
        }
        Ok(Registry { kinds, extent })
    }

    /// All ten operators.
    pub fn full(extent: Extent) -> Self {
        Registry {
            kinds: OpKind::ALL.to_vec(),
            extent,
        }
    }

    pub fn kinds(&self) -> &[OpKind] {
        &self.kinds
    }

    pub fn extent(&self) -> Extent {
        self.extent
    }
}

/// Sample a pipeline of `n_ops` operators with uniform levels.
///
/// Kinds are drawn uniformly without replacement while `n_ops` fits in the
/// registry, with replacement otherwise. Each parameter level is then drawn
/// uniformly from its lattice. Only the given stream is consumed, in a fixed
/// order: all kind draws first, then levels op by op.
pub fn sample_pipeline(rng: &mut impl Rng, registry: &Registry, n_ops: usize) -> Result<Pipeline> {
    if n_ops == 0 {
        return Err(Error::Config("n_ops must be at least 1".into()));
    }
    let k = registry.kinds.len();
    let chosen: Vec<OpKind> = if n_ops <= k {
        // Partial Fisher-Yates: the first n_ops slots are a uniform draw
        // without replacement.
        let mut idx: Vec<usize> = (0..k).collect();
        for i in 0..n_ops {
            let j = rng.gen_range(i..k);
            idx.swap(i, j);
        }
        idx[..n_ops].iter().map(|&i| registry.kinds[i]).collect()
    } else {
        (0..n_ops)
            .map(|_| registry.kinds[rng.gen_range(0..k)])
            .collect()
    };

    let ops = chosen
        .into_iter()
        .map(|kind| {
            let levels = kind
                .param_specs(registry.extent)
                .iter()
                .map(|s| rng.gen_range(s.min_level..=s.max_level))
                .collect();
            OpInstance { kind, levels }
        })
        .collect();
    Ok(Pipeline { ops })
}

/// Map a lattice level to its physical value.
///
/// Magnitude tables (level 0..=9): rotate `level*30/9` degrees; translate
/// `round(level*0.3*side/9)` pixels along the op's axis; shear factor
/// `level*0.3/9`; brightness/contrast factor `1 + level*0.9/9`; solarize
/// threshold `(9-level)/9`; posterize `8 - floor(level*4/9)` bits retained;
/// cutout side `round(level*0.5*min(h,w)/9)`. Direction flags map to -1/+1,
/// cutout centers to their pixel coordinate.
pub fn level_to_physical(
    kind: OpKind,
    param_index: usize,
    level: i32,
    ext: Extent,
) -> Result<f64> {
    let specs = kind.param_specs(ext);
    let spec = specs.get(param_index).ok_or_else(|| {
        Error::Domain(format!(
            "{kind} has {} parameters, index {param_index} does not exist",
            specs.len()
        ))
    })?;
    if !spec.contains(level) {
        return Err(Error::Domain(format!(
            "{kind} parameter {param_index} ({}): level {level} outside [{}, {}]",
            spec.name, spec.min_level, spec.max_level
        )));
    }

    let l = level as f64;
    Ok(match (kind, param_index) {
        (OpKind::Rotate, 0) => l * 30.0 / 9.0,
        (OpKind::TranslateX, 0) => (l * 0.3 * ext.width as f64 / 9.0).round(),
        (OpKind::TranslateY, 0) => (l * 0.3 * ext.height as f64 / 9.0).round(),
        (OpKind::ShearX, 0) | (OpKind::ShearY, 0) => l * 0.3 / 9.0,
        (OpKind::Brightness, 0) | (OpKind::Contrast, 0) => 1.0 + l * 0.9 / 9.0,
        (OpKind::Solarize, 0) => (9 - level) as f64 / 9.0,
        (OpKind::Posterize, 0) => (8 - level * 4 / 9) as f64,
        (OpKind::Cutout, 0) => {
            let side = ext.height.min(ext.width) as f64;
            (l * 0.5 * side / 9.0).round()
        }
        (OpKind::Cutout, 1) | (OpKind::Cutout, 2) => l,
        // Direction flags.
        (_, 1) => {
            if level == 0 {
                -1.0
            } else {
                1.0
            }
        }
        _ => unreachable!("param_index validated against spec table"),
    })
}

/// The locators of every adaptable scalar in the pipeline, in
/// `(op_index, param_index)` order.
pub fn adaptable_params(p: &Pipeline) -> Vec<ParamLocator> {
    let mut out = Vec::new();
    for (i, op) in p.ops.iter().enumerate() {
        for (j, t) in op.kind.template().iter().enumerate() {
            if t.adaptable {
                out.push(ParamLocator {
                    op_index: i,
                    param_index: j,
                });
            }
        }
    }
    out
}

/// Apply one operator to a batch, returning a new batch.
///
/// The input is never modified. Output pixels stay in `[0, 1]`; geometric
/// operators resample nearest-neighbor and pad with zeros. An operator at
/// its identity level returns a bit-identical copy.
pub fn apply_op(op: &OpInstance, batch: &ImageBatch) -> Result<ImageBatch> {
    let ext = batch.extent();
    op.validate(ext, 0)?;
    let (cx, cy) = (
        (ext.width as f64 - 1.0) / 2.0,
        (ext.height as f64 - 1.0) / 2.0,
    );

    let data = match op.kind {
        OpKind::Rotate => {
            let theta = level_to_physical(op.kind, 0, op.levels[0], ext)?.to_radians();
            let (s, c) = theta.sin_cos();
            kernels::affine_nearest(
                &batch.data,
                [
                    c,
                    s,
                    cx - c * cx - s * cy,
                    -s,
                    c,
                    cy + s * cx - c * cy,
                ],
            )
        }
        OpKind::TranslateX => {
            let k = level_to_physical(op.kind, 0, op.levels[0], ext)?
                * level_to_physical(op.kind, 1, op.levels[1], ext)?;
            kernels::affine_nearest(&batch.data, [1.0, 0.0, -k, 0.0, 1.0, 0.0])
        }
        OpKind::TranslateY => {
            let k = level_to_physical(op.kind, 0, op.levels[0], ext)?
                * level_to_physical(op.kind, 1, op.levels[1], ext)?;
            kernels::affine_nearest(&batch.data, [1.0, 0.0, 0.0, 0.0, 1.0, -k])
        }
        OpKind::ShearX => {
            let s = level_to_physical(op.kind, 0, op.levels[0], ext)?;
            kernels::affine_nearest(&batch.data, [1.0, -s, s * cy, 0.0, 1.0, 0.0])
        }
        OpKind::ShearY => {
            let s = level_to_physical(op.kind, 0, op.levels[0], ext)?;
            kernels::affine_nearest(&batch.data, [1.0, 0.0, 0.0, -s, 1.0, s * cx])
        }
        OpKind::Brightness => {
            let mag = level_to_physical(op.kind, 0, op.levels[0], ext)?;
            let dir = level_to_physical(op.kind, 1, op.levels[1], ext)?;
            kernels::brightness(&batch.data, 1.0 + dir * (mag - 1.0))
        }
        OpKind::Contrast => {
            let mag = level_to_physical(op.kind, 0, op.levels[0], ext)?;
            let dir = level_to_physical(op.kind, 1, op.levels[1], ext)?;
            kernels::contrast(&batch.data, 1.0 + dir * (mag - 1.0))
        }
        OpKind::Solarize => {
            let t = level_to_physical(op.kind, 0, op.levels[0], ext)? as f32;
            kernels::solarize(&batch.data, t)
        }
        OpKind::Posterize => {
            let bits = level_to_physical(op.kind, 0, op.levels[0], ext)? as u32;
            kernels::posterize(&batch.data, bits)
        }
        OpKind::Cutout => {
            let side = level_to_physical(op.kind, 0, op.levels[0], ext)? as i64;
            kernels::cutout(&batch.data, side, op.levels[1] as i64, op.levels[2] as i64)
        }
    };
    Ok(ImageBatch::from_parts(data, batch.labels.clone()))
}

/// Apply every operator of the pipeline in order. An empty pipeline returns
/// an identical copy. Labels pass through unchanged.
pub fn apply_pipeline(p: &Pipeline, batch: &ImageBatch) -> Result<ImageBatch> {
    let mut out = batch.clone();
    for op in &p.ops {
        out = apply_op(op, &out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
