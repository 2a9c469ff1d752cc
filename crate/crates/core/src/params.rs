//! Named parameter storage shared by every network component.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{DcicError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Learnable parameter groups, one per network component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    PriorExtractor,
    Analysis,
    AnalysisFusion,
    Synthesis,
    SynthesisFusion,
    HyperAnalysisS,
    HyperSynthesisS,
    HyperAnalysisY,
    HyperSynthesisY,
    MeanHead,
    ScaleHead,
    DensityZs,
    DensityZy,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 13] = [
        ParamGroup::PriorExtractor,
        ParamGroup::Analysis,
        ParamGroup::AnalysisFusion,
        ParamGroup::Synthesis,
        ParamGroup::SynthesisFusion,
        ParamGroup::HyperAnalysisS,
        ParamGroup::HyperSynthesisS,
        ParamGroup::HyperAnalysisY,
        ParamGroup::HyperSynthesisY,
        ParamGroup::MeanHead,
        ParamGroup::ScaleHead,
        ParamGroup::DensityZs,
        ParamGroup::DensityZy,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::PriorExtractor => "prior_extractor",
            ParamGroup::Analysis => "analysis",
            ParamGroup::AnalysisFusion => "analysis_fusion",
            ParamGroup::Synthesis => "synthesis",
            ParamGroup::SynthesisFusion => "synthesis_fusion",
            ParamGroup::HyperAnalysisS => "hyper_analysis_s",
            ParamGroup::HyperSynthesisS => "hyper_synthesis_s",
            ParamGroup::HyperAnalysisY => "hyper_analysis_y",
            ParamGroup::HyperSynthesisY => "hyper_synthesis_y",
            ParamGroup::MeanHead => "mean_head",
            ParamGroup::ScaleHead => "scale_head",
            ParamGroup::DensityZs => "density_zs",
            ParamGroup::DensityZy => "density_zy",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), groups: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn add(&mut self, group: ParamGroup, name: String, t: Tensor<T>) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.groups.push(group);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn groups_present(&self) -> Vec<ParamGroup> {
        let mut g = self.groups.clone();
        g.sort();
        g.dedup();
        g
    }

    /// Pushes every parameter onto `tape` (differentiable when recording).
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }

    /// Snapshot as a name-keyed map of `f64` arrays.
    pub fn export(&self) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (n.clone(), (t.shape().to_vec(), t.to_f64_vec())))
            .collect()
    }

    /// Overwrites every parameter from `values`; names and shapes must match exactly.
    pub fn import(&mut self, values: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
        if values.len() != self.names.len() {
            return Err(DcicError::Checkpoint(format!(
                "checkpoint has {} arrays, model layout needs {}",
                values.len(),
                self.names.len()
            )));
        }
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let (shape, data) = values
                .get(name)
                .ok_or_else(|| DcicError::Checkpoint(format!("missing array {name}")))?;
            if shape.as_slice() != t.shape() {
                return Err(DcicError::Checkpoint(format!(
                    "array {name} has shape {shape:?}, expected {:?}",
                    t.shape()
                )));
            }
            *t = Tensor::new(shape, data.iter().map(|&v| T::lit(v)).collect())?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            groups: self.groups.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// Tape handles for every parameter, indexed by [`ParamId`].
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Uniform `U(-bound, bound)` tensor in `f64` draw order, cast to `T`.
pub fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("uniform shape")
}
