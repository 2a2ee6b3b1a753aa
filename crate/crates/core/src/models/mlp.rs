use ilmar_autodiff::{ParamVars, ParamVector, Tensor, Var};
use rand::Rng as _;

use crate::rng::Rng;

/// Fully connected tanh network. `sizes` includes the input and output widths.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Mlp {
    prefix: String,
    sizes: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: &str, sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        Mlp {
            prefix: prefix.to_string(),
            sizes,
        }
    }

    fn names(&self, layer: usize) -> (String, String) {
        (format!("{}.w{layer}", self.prefix), format!("{}.b{layer}", self.prefix))
    }

    /// Glorot-uniform weights, zero biases. With `zero_last` the output
    /// layer starts at exactly zero.
    pub fn init(&self, params: &mut ParamVector, rng: &mut Rng, zero_last: bool) {
        let layers = self.sizes.len() - 1;
        for (l, pair) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = if zero_last && l + 1 == layers {
                vec![0.0; fan_in * fan_out]
            } else {
                (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect()
            };
            let (w, b) = self.names(l);
            params
                .insert(w, Tensor::new(vec![fan_in, fan_out], data).expect("layer shape"))
                .expect("unique layer name");
            params
                .insert(b, Tensor::zeros(&[1, fan_out]))
                .expect("unique layer name");
        }
    }

    /// `tanh` after every hidden layer; after the output layer only when
    /// `squash_output` is set.
    pub fn forward<'t>(&self, p: &ParamVars<'t>, x: Var<'t>, squash_output: bool) -> Var<'t> {
        let layers = self.sizes.len() - 1;
        let mut h = x;
        for l in 0..layers {
            let (w, b) = self.names(l);
            h = h.matmul(p.get(&w)).add_row(p.get(&b));
            if l + 1 < layers || squash_output {
                h = h.tanh();
            }
        }
        h
    }
}
