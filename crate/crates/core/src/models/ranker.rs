use ilmar_autodiff::{AutodiffError, ParamVars, ParamVector, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use crate::envs::EnvSpec;
use crate::rng::{self, Rng};

pub const DEFAULT_CLIP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerSizes {
    pub state_hidden: Vec<usize>,
    pub action_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub clip_eps: f64,
    /// Start the output layer at zero, so every output is exactly 1/2.
    pub zero_head: bool,
}

impl Default for RankerSizes {
    fn default() -> Self {
        RankerSizes {
            state_hidden: vec![64, 64],
            action_hidden: vec![32, 32],
            head_hidden: vec![64],
            clip_eps: DEFAULT_CLIP,
            zero_head: false,
        }
    }
}

/// `C(s, a1, a2)`: estimated probability that `a1` is at least as good as
/// `a2` at `s`. Both actions pass through the same action encoder; the head
/// sees `[code(s), code(a1), code(a2)]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankerArch {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub sizes: RankerSizes,
}

fn chain(input: usize, hidden: &[usize], out: Option<usize>) -> Vec<usize> {
    let mut v = vec![input];
    v.extend(hidden);
    v.extend(out);
    v
}

impl RankerArch {
    pub fn for_env(env: &EnvSpec, sizes: RankerSizes) -> Self {
        RankerArch {
            obs_dim: env.obs_dim(),
            act_dim: env.action_dim(),
            sizes,
        }
    }

    fn state_encoder(&self) -> Mlp {
        Mlp::new("rk.state", chain(self.obs_dim, &self.sizes.state_hidden, None))
    }

    fn action_encoder(&self) -> Mlp {
        Mlp::new("rk.action", chain(self.act_dim, &self.sizes.action_hidden, None))
    }

    fn head(&self) -> Mlp {
        let s = self.sizes.state_hidden.last().copied().unwrap_or(self.obs_dim);
        let a = self.sizes.action_hidden.last().copied().unwrap_or(self.act_dim);
        Mlp::new("rk.head", chain(s + 2 * a, &self.sizes.head_hidden, Some(1)))
    }

    pub fn init(&self, seed: u64) -> ParamVector {
        let mut p = ParamVector::new();
        let mut r = rng::derive(seed, &[0x4a4c]);
        if !self.sizes.state_hidden.is_empty() {
            self.state_encoder().init(&mut p, &mut r, false);
        }
        if !self.sizes.action_hidden.is_empty() {
            self.action_encoder().init(&mut p, &mut r, false);
        }
        self.head().init(&mut p, &mut r, self.sizes.zero_head);
        p
    }

    pub fn encode_state<'t>(&self, p: &ParamVars<'t>, s: Var<'t>) -> Var<'t> {
        if self.sizes.state_hidden.is_empty() {
            return s;
        }
        self.state_encoder().forward(p, s, true)
    }

    pub fn encode_action<'t>(&self, p: &ParamVars<'t>, a: Var<'t>) -> Var<'t> {
        if self.sizes.action_hidden.is_empty() {
            return a;
        }
        self.action_encoder().forward(p, a, true)
    }

    /// Clipped output from precomputed codes, `[N, 1]`.
    pub fn from_codes<'t>(&self, p: &ParamVars<'t>, hs: Var<'t>, h1: Var<'t>, h2: Var<'t>) -> Var<'t> {
        let eps = self.sizes.clip_eps;
        self.head()
            .forward(p, Var::concat_cols(&[hs, h1, h2]), false)
            .sigmoid()
            .clamp(eps, 1.0 - eps)
    }

    pub fn forward<'t>(&self, p: &ParamVars<'t>, s: Var<'t>, a1: Var<'t>, a2: Var<'t>) -> Var<'t> {
        let hs = self.encode_state(p, s);
        self.from_codes(p, hs, self.encode_action(p, a1), self.encode_action(p, a2))
    }

    /// `(C(s, a1, a2), C(s, a2, a1))`, sharing the encoder passes.
    pub fn forward_both<'t>(&self, p: &ParamVars<'t>, s: Var<'t>, a1: Var<'t>, a2: Var<'t>) -> (Var<'t>, Var<'t>) {
        let hs = self.encode_state(p, s);
        let (h1, h2) = (self.encode_action(p, a1), self.encode_action(p, a2));
        (self.from_codes(p, hs, h1, h2), self.from_codes(p, hs, h2, h1))
    }

    /// Mean over rows of `(‖∇_(â, ǎ) C(s, â, ǎ)‖₂ - 1)²`, where
    /// `â = u a1 + (1-u) a2` and `ǎ = u a2 + (1-u) a1` with one `u ~ U(0,1)`
    /// per row. The result stays differentiable in the ranker parameters.
    pub fn gradient_penalty<'t>(
        &self,
        tape: &'t Tape,
        p: &ParamVars<'t>,
        s: &Tensor,
        a1: &Tensor,
        a2: &Tensor,
        rng: &mut Rng,
    ) -> Result<Var<'t>, AutodiffError> {
        let (n, k) = (a1.rows(), a1.cols());
        let mut hat = a1.clone();
        let mut check = a2.clone();
        for r in 0..n {
            let u: f64 = rand::Rng::random(rng);
            for c in 0..k {
                let (x, y) = (a1.get(r, c), a2.get(r, c));
                hat.data_mut()[r * k + c] = u * x + (1.0 - u) * y;
                check.data_mut()[r * k + c] = u * y + (1.0 - u) * x;
            }
        }
        let hat = tape.param(hat);
        let check = tape.param(check);
        let out = self.forward(p, tape.constant(s.clone()), hat, check).sum_all();
        let g = tape.grad(out, &[hat, check], true)?;
        let norm = (g[0].square().sum_cols() + g[1].square().sum_cols()).sqrt();
        Ok(norm.affine(1.0, -1.0).square().mean_all())
    }
}

/// The ranker network together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RankerModel {
    pub arch: RankerArch,
    pub params: ParamVector,
}

impl RankerModel {
    pub fn new(arch: RankerArch, seed: u64) -> Self {
        let params = arch.init(seed);
        RankerModel { arch, params }
    }

    pub fn forward(&self, s: &Tensor, a1: &Tensor, a2: &Tensor) -> Vec<f64> {
        let tape = Tape::new();
        let p = self.params.bind_const(&tape);
        let c = self.arch.forward(
            &p,
            tape.constant(s.clone()),
            tape.constant(a1.clone()),
            tape.constant(a2.clone()),
        );
        c.to_tensor().into_data()
    }
}

/// `w = c` when `c > 1/2`, else `0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightValue {
    pub c: f64,
    pub w: f64,
}

impl WeightValue {
    pub fn from_c(c: f64) -> Self {
        WeightValue {
            c,
            w: if c > 0.5 { c } else { 0.0 },
        }
    }
}

/// The strict indicator `c > 1/2` as a constant 0/1 column.
pub fn weight_mask(c: &Tensor) -> Tensor {
    c.map(|x| if x > 0.5 { 1.0 } else { 0.0 })
}
