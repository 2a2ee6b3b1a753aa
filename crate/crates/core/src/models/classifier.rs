use ilmar_autodiff::{ParamVars, ParamVector, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use crate::envs::EnvSpec;
use crate::rng;

/// `D(s, a)`: probability that a state-action pair comes from the expert
/// set rather than the supplementary set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: Vec<usize>,
    pub clip_eps: f64,
}

impl ClassifierArch {
    pub fn for_env(env: &EnvSpec, hidden: Vec<usize>, clip_eps: f64) -> Self {
        ClassifierArch {
            obs_dim: env.obs_dim(),
            act_dim: env.action_dim(),
            hidden,
            clip_eps,
        }
    }

    fn net(&self) -> Mlp {
        let mut sizes = vec![self.obs_dim + self.act_dim];
        sizes.extend(&self.hidden);
        sizes.push(1);
        Mlp::new("dc", sizes)
    }

    pub fn init(&self, seed: u64) -> ParamVector {
        let mut p = ParamVector::new();
        self.net().init(&mut p, &mut rng::derive(seed, &[0xdc]), false);
        p
    }

    /// Clipped output, `[N, 1]`.
    pub fn forward<'t>(&self, p: &ParamVars<'t>, s: Var<'t>, a: Var<'t>) -> Var<'t> {
        let eps = self.clip_eps;
        self.net()
            .forward(p, Var::concat_cols(&[s, a]), false)
            .sigmoid()
            .clamp(eps, 1.0 - eps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub arch: ClassifierArch,
    pub params: ParamVector,
}

impl ClassifierModel {
    pub fn new(arch: ClassifierArch, seed: u64) -> Self {
        let params = arch.init(seed);
        ClassifierModel { arch, params }
    }

    pub fn forward(&self, s: &Tensor, a: &Tensor) -> Vec<f64> {
        let tape = Tape::new();
        let p = self.params.bind_const(&tape);
        self.arch
            .forward(&p, tape.constant(s.clone()), tape.constant(a.clone()))
            .to_tensor()
            .into_data()
    }
}
