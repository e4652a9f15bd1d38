//! Small building blocks for the trainable networks around the machine.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::substrate::{ParamId, ParamStore, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform `[-bound, bound]` entries.
pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Fully connected layer `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    /// Glorot-uniform weights and zero bias.
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let w = store.add(&format!("{name}.w"), uniform(&[inputs, outputs], bound, rng));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[outputs]));
        Dense { w, b, inputs, outputs }
    }

    /// Applies to a vector `[inputs]` or a batch `[rows, inputs]`.
    pub fn apply<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        let (w, b) = (params[self.w.0], params[self.b.0]);
        let rank = x.shape().len();
        let y = x.contract(w, &[(rank - 1, 0)]).expect("dense input width");
        if rank == 1 {
            y.add(b)
        } else {
            let rows = x.shape()[0];
            let ones = x.tape().constant(Tensor::full(&[rows], 1.0));
            y.add(ones.contract(b, &[]).unwrap())
        }
    }
}
