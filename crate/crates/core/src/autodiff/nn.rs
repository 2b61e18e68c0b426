//! Dense layers built on the tape.

use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Var};

/// `y = x W + b` with `W [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add_he(&format!("{name}.weight"), &[inputs, outputs], inputs, rng);
        let bias = store.add_zeros(&format!("{name}.bias"), &[outputs]);
        Linear {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    /// Layer whose weight and bias start at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Self {
        let weight = store.add_zeros(&format!("{name}.weight"), &[inputs, outputs]);
        let bias = store.add_zeros(&format!("{name}.bias"), &[outputs]);
        Linear {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.add(tape.matmul(x, w), b)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// How to initialise the last layer of an [`Mlp`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinalInit {
    He,
    Zero,
    /// Uniform with a small bound so the head starts near zero but not at it.
    Small,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        last: FinalInit,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(
            widths.len() >= 2,
            "mlp {name}: needs at least input and output widths"
        );
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let lname = format!("{name}.{i}");
                if i + 1 < n {
                    return Linear::new(store, &lname, widths[i], widths[i + 1], rng);
                }
                match last {
                    FinalInit::He => Linear::new(store, &lname, widths[i], widths[i + 1], rng),
                    FinalInit::Zero => Linear::zeroed(store, &lname, widths[i], widths[i + 1]),
                    FinalInit::Small => {
                        let weight = store.add_uniform(
                            &format!("{lname}.weight"),
                            &[widths[i], widths[i + 1]],
                            1e-3,
                            rng,
                        );
                        let bias = store.add_zeros(&format!("{lname}.bias"), &[widths[i + 1]]);
                        Linear {
                            weight,
                            bias,
                            inputs: widths[i],
                            outputs: widths[i + 1],
                        }
                    }
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().unwrap()
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn out_width(&self) -> usize {
        self.last().outputs
    }
}
