//! Attention fusion of volume and temporal features, density and color heads,
//! compositing and the photometric loss.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::nn::{FinalInit, Linear, Mlp};
use crate::autodiff::{Csr, ParamId, ParamStore, Tape, Tensor, Var};

/// Single-head scaled dot-product attention of a volume feature (query) over
/// temporal features (keys and values), added back onto the query feature.
///
/// Keys and values are linear in the temporal feature, so both projections
/// are applied on the query side: `q . (W_k f + b_k)` differs from
/// `(W_k^T q) . f` by a per-row constant that softmax ignores, and
/// `sum_t a_t (W_v f_t + b_v) = W_v (sum_t a_t f_t) + b_v` whenever the
/// weights sum to one. This keeps the per-frame work at `C_f` wide.
#[derive(Clone, Debug)]
pub struct TemporalAttention {
    pub query: Linear,
    /// `[C_f, key_dim]`; a key bias would cancel in the softmax.
    pub key: ParamId,
    pub value: Linear,
    pub key_dim: usize,
}

impl TemporalAttention {
    /// `volume_dim` is both the query input width and the output width.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        volume_dim: usize,
        temporal_dim: usize,
        key_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        TemporalAttention {
            query: Linear::new(store, &format!("{name}.query"), volume_dim, key_dim, rng),
            key: store.add_he(
                &format!("{name}.key.weight"),
                &[temporal_dim, key_dim],
                temporal_dim,
                rng,
            ),
            value: Linear::new(
                store,
                &format!("{name}.value"),
                temporal_dim,
                volume_dim,
                rng,
            ),
            key_dim,
        }
    }

    /// Attention weights `[S, T]`; rows whose frames are all masked are zero.
    pub fn weights(
        &self,
        tape: &Tape,
        store: &ParamStore,
        fv: Var,
        ft: Var,
        masked: &[bool],
    ) -> Var {
        let q = self.query.forward(tape, store, fv);
        let qk = tape.matmul(q, tape.transpose(tape.param(store, self.key)));
        let logits = tape.scale(tape.batched_dot(qk, ft), 1.0 / (self.key_dim as f64).sqrt());
        let keep: Vec<bool> = masked.iter().map(|&m| !m).collect();
        tape.masked_softmax(logits, Some(&keep))
    }

    /// `F_e = F_v + sum_t a_t V(F_t)`; equals `F_v` where every frame is masked.
    pub fn enhance(
        &self,
        tape: &Tape,
        store: &ParamStore,
        fv: Var,
        ft: Var,
        masked: &[bool],
    ) -> Var {
        let t = tape.shape(ft)[1];
        let a = self.weights(tape, store, fv, ft, masked);
        let pooled = tape.batched_weighted_sum(a, ft);
        let any: Vec<f64> = masked
            .chunks(t)
            .map(|m| if m.iter().all(|&x| x) { 0.0 } else { 1.0 })
            .collect();
        let v = self.value.forward(tape, store, pooled);
        let v = tape.mul_rows(v, tape.constant(Tensor::from_vec(any)));
        tape.add(fv, v)
    }
}

/// `(d, sin(2^0 pi d), cos(2^0 pi d), ..., sin(2^(L-1) pi d), cos(2^(L-1) pi d))`.
pub fn positional_encode(d: [f64; 3], levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * levels);
    out.extend(d);
    for l in 0..levels {
        let f = (1u64 << l) as f64 * std::f64::consts::PI;
        out.extend(d.map(|x| (f * x).sin()));
        out.extend(d.map(|x| (f * x).cos()));
    }
    out
}

pub fn encoded_dim(levels: usize) -> usize {
    3 + 6 * levels
}

/// Learnable latent vector per training camera.
#[derive(Clone, Debug)]
pub struct CameraLatents {
    pub table: ParamId,
    pub cameras: usize,
    pub dim: usize,
}

impl CameraLatents {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cameras: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let table = store.add_uniform(&format!("{name}.table"), &[cameras.max(1), dim], 0.1, rng);
        CameraLatents {
            table,
            cameras: cameras.max(1),
            dim,
        }
    }

    /// Latent per row; ids without an entry get the mean of the table.
    pub fn lookup(&self, tape: &Tape, store: &ParamStore, ids: &[usize]) -> Var {
        let mean_row: Vec<(usize, f64)> = (0..self.cameras)
            .map(|c| (c, 1.0 / self.cameras as f64))
            .collect();
        let rows: Vec<Vec<(usize, f64)>> = ids
            .iter()
            .map(|&id| {
                if id < self.cameras {
                    vec![(id, 1.0)]
                } else {
                    mean_row.clone()
                }
            })
            .collect();
        tape.spmm(
            Rc::new(Csr::from_rows(self.cameras, &rows)),
            tape.param(store, self.table),
        )
    }

    pub fn knows(&self, id: usize) -> bool {
        id < self.cameras
    }
}

/// `sigma = softplus(MLP(F_e))`.
#[derive(Clone, Debug)]
pub struct DensityHead {
    pub mlp: Mlp,
}

impl DensityHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        last: FinalInit,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        DensityHead {
            mlp: Mlp::new(store, name, widths, last, rng),
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, fe: Var) -> Var {
        tape.softplus(self.mlp.forward(tape, store, fe))
    }
}

/// `c = sigmoid(MLP([F_e, gamma(d), latent]))`.
#[derive(Clone, Debug)]
pub struct ColorHead {
    pub mlp: Mlp,
}

impl ColorHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        last: FinalInit,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ColorHead {
            mlp: Mlp::new(store, name, widths, last, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        fe: Var,
        dir_enc: Var,
        latent: Var,
    ) -> Var {
        tape.sigmoid(
            self.mlp
                .forward(tape, store, tape.concat(&[fe, dir_enc, latent])),
        )
    }
}

/// Compositing weights `T_k (1 - exp(-sigma_k delta_k))` of one ray and its
/// residual transmittance.
pub fn composite_weights(sigma: &[f64], delta: &[f64]) -> (Vec<f64>, f64) {
    let mut acc: f64 = 0.0;
    let w = sigma
        .iter()
        .zip(delta)
        .map(|(&s, &d)| {
            let t = (-acc).exp();
            acc += s * d;
            t * (1.0 - (-s * d).exp())
        })
        .collect();
    (w, (-acc).exp())
}

/// Composites one ray without a tape.
pub fn composite_ray(
    sigma: &[f64],
    color: &[[f64; 3]],
    delta: &[f64],
    background: [f64; 3],
) -> [f64; 3] {
    let (w, t_end) = composite_weights(sigma, delta);
    let mut out = background.map(|b| b * t_end);
    for (wk, c) in w.iter().zip(color) {
        for ch in 0..3 {
            out[ch] += wk * c[ch];
        }
    }
    out
}

/// `sum_r |C~(r) - C(r)|^2` over the batch.
pub fn photometric_loss(tape: &Tape, rendered: Var, reference: &[f64]) -> Var {
    let shape = tape.shape(rendered);
    assert_eq!(
        shape.iter().product::<usize>(),
        reference.len(),
        "photometric_loss: ray count mismatch"
    );
    let target = tape.constant(Tensor::new(shape, reference.to_vec()));
    tape.sum(tape.square(tape.sub(rendered, target)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_shape_and_parity() {
        let d = [0.6, -0.8, 0.0];
        let a = positional_encode(d, 4);
        let b = positional_encode(d.map(|x| -x), 4);
        assert_eq!(a.len(), 27);
        assert_eq!(encoded_dim(4), 27);
        for l in 0..4 {
            for i in 0..3 {
                let (s, c) = (3 + 6 * l + i, 6 + 6 * l + i);
                assert_eq!(a[s], -b[s]);
                assert_eq!(a[c], b[c]);
            }
        }
        assert!(a.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn closed_form_compositing() {
        assert_eq!(
            composite_ray(&[0.0; 4], &[[1.0; 3]; 4], &[0.1; 4], [0.0; 3]),
            [0.0; 3]
        );
        let c = composite_ray(
            &[200.0, 1.0],
            &[[0.2, 0.4, 0.6], [1.0; 3]],
            &[0.1, 0.1],
            [0.0; 3],
        );
        assert!((c[0] - 0.2).abs() < 1e-8 && (c[2] - 0.6).abs() < 1e-8);
    }
}
