//! Dense feed-forward networks with tanh hidden layers and a linear output.
//!
//! Parameters live in a caller-owned flat slice so that several networks
//! and extra scalars can share one optimizer state. Per layer the layout is
//! the `out × in` weight matrix (row-major) followed by the `out` biases.

use rand::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    sizes: Vec<usize>,
}

/// Post-activation values of every layer from the last forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map_or(&[], |a| a.as_slice())
    }
}

impl Mlp {
    /// `sizes = [inputs, hidden.., outputs]`.
    pub fn new(sizes: Vec<usize>) -> Self {
        assert!(
            sizes.len() >= 2 && sizes.iter().all(|&s| s > 0),
            "bad layer sizes {sizes:?}"
        );
        Self { sizes }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    /// Uniform fan-in initialization, zero biases.
    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        debug_assert_eq!(params.len(), self.n_params());
        let mut at = 0;
        for w in self.sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for p in &mut params[at..at + w[0] * w[1]] {
                *p = rng.random_range(-bound..bound);
            }
            at += w[0] * w[1];
            params[at..at + w[1]].fill(0.0);
            at += w[1];
        }
    }

    pub fn forward<'t>(&self, params: &[f64], input: &[f64], tape: &'t mut Tape) -> &'t [f64] {
        debug_assert_eq!(input.len(), self.n_inputs());
        let layers = self.sizes.len() - 1;
        tape.acts.resize(self.sizes.len(), Vec::new());
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(input);
        let mut at = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w, b) = params[at..at + n_out * (n_in + 1)].split_at(n_out * n_in);
            let (head, tail) = tape.acts.split_at_mut(l + 1);
            let x = &head[l];
            let y = &mut tail[0];
            y.clear();
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                y.push(if l + 1 < layers { z.tanh() } else { z });
            }
            at += n_out * (n_in + 1);
        }
        tape.output()
    }

    /// Accumulates `∂(d_out · output)/∂params` into `grad`.
    pub fn backward(&self, params: &[f64], tape: &Tape, d_out: &[f64], grad: &mut [f64]) {
        let layers = self.sizes.len() - 1;
        let mut delta = d_out.to_vec();
        let mut at = self.n_params();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            at -= n_out * (n_in + 1);
            let x = &tape.acts[l];
            let w = &params[at..at + n_out * n_in];
            {
                let (gw, gb) = grad[at..at + n_out * (n_in + 1)].split_at_mut(n_out * n_in);
                for o in 0..n_out {
                    for (g, xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                        *g += delta[o] * xi;
                    }
                    gb[o] += delta[o];
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; n_in];
                for o in 0..n_out {
                    for (p, wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *p += delta[o] * wi;
                    }
                }
                for (p, a) in prev.iter_mut().zip(x) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, SeedDomain};

    #[test]
    fn gradient_matches_central_differences() {
        let net = Mlp::new(vec![3, 4, 4, 2]);
        let mut params = vec![0.0; net.n_params()];
        net.init(&mut params, &mut substream(1, SeedDomain::Policy, 0));
        for p in params.iter_mut() {
            *p += 0.1;
        }
        let x = [0.3, -0.2, 0.7];
        let d_out = [0.8, -1.3];
        let f = |p: &[f64]| {
            let mut t = Tape::default();
            let y = net.forward(p, &x, &mut t);
            y[0] * d_out[0] + y[1] * d_out[1]
        };
        let mut tape = Tape::default();
        net.forward(&params, &x, &mut tape);
        let mut grad = vec![0.0; params.len()];
        net.backward(&params, &tape, &d_out, &mut grad);
        for j in 0..params.len() {
            let mut up = params.clone();
            let mut dn = params.clone();
            up[j] += 1e-6;
            dn[j] -= 1e-6;
            let fd = (f(&up) - f(&dn)) / 2e-6;
            assert!(
                (fd - grad[j]).abs() <= 1e-7 * (1.0 + fd.abs()),
                "param {j}: {fd} vs {}",
                grad[j]
            );
        }
    }

    #[test]
    fn layout_and_linear_output() {
        let net = Mlp::new(vec![2, 1]);
        assert_eq!(net.n_params(), 3);
        let mut tape = Tape::default();
        assert_eq!(net.forward(&[2.0, -1.0, 0.5], &[1.0, 3.0], &mut tape), &[-0.5]);
    }
}
