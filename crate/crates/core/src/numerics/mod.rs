//! Dense tensors, a reverse-mode tape and the RMSProp optimizer.

pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Segment, Var};
pub use optim::{clip_grad_norm, grad_norm, RmsProp, RmsPropConfig};
pub use params::{ParamStore, OUTPUT_GAIN};
pub use tensor::Tensor;

use rand::Rng;

use crate::error::{Error, Result};

/// Parameter names of a single-layer GRU cell under a common prefix.
///
/// Gates follow the usual formulation:
/// `r = s(x W_xr + b_xr + h W_hr + b_hr)`,
/// `z = s(x W_xz + b_xz + h W_hz + b_hz)`,
/// `n = tanh(x W_xn + b_xn + r * (h W_hn + b_hn))`,
/// `h' = (1 - z) * n + z * h`.
#[derive(Clone, Debug)]
pub struct GruCell {
    prefix: String,
    pub input: usize,
    pub hidden: usize,
}

const GATES: [&str; 3] = ["r", "z", "n"];

impl GruCell {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        GruCell {
            prefix: prefix.into(),
            input,
            hidden,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for gate in GATES {
            store.init_linear(
                rng,
                &format!("{}.x{gate}", self.prefix),
                self.input,
                self.hidden,
            );
            store.init_linear(
                rng,
                &format!("{}.h{gate}", self.prefix),
                self.hidden,
                self.hidden,
            );
        }
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        for gate in GATES {
            let wx = store.get(&format!("{}.x{gate}.w", self.prefix))?;
            let wh = store.get(&format!("{}.h{gate}.w", self.prefix))?;
            if wx.shape() != [self.input, self.hidden] || wh.shape() != [self.hidden, self.hidden] {
                return Err(Error::dim(
                    "gru_step",
                    wx.shape(),
                    &[self.input, self.hidden],
                ));
            }
        }
        Ok(())
    }

    /// One step for a batch of rows: `x: B x input`, `h: B x hidden`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        self.check(store)?;
        if g.value(x).cols() != self.input || g.value(h).cols() != self.hidden {
            return Err(Error::dim(
                "gru_step",
                g.value(x).shape(),
                g.value(h).shape(),
            ));
        }
        let lin = |g: &mut Graph, input: Var, name: String| -> Result<Var> {
            let w = g.param_from(store, &format!("{name}.w"))?;
            let b = g.param_from(store, &format!("{name}.b"))?;
            g.linear(input, w, b)
        };
        let p = &self.prefix;
        let xr = lin(g, x, format!("{p}.xr"))?;
        let hr = lin(g, h, format!("{p}.hr"))?;
        let xz = lin(g, x, format!("{p}.xz"))?;
        let hz = lin(g, h, format!("{p}.hz"))?;
        let xn = lin(g, x, format!("{p}.xn"))?;
        let hn = lin(g, h, format!("{p}.hn"))?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let rh = g.mul(r, hn)?;
        let n = g.add(xn, rh)?;
        let n = g.tanh(n);
        // h' = n + z * (h - n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }
}

/// Convenience wrapper: one GRU step on plain tensors, no gradients kept.
pub fn gru_step(cell: &GruCell, store: &ParamStore, x: &Tensor, h: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.reshape(vec![x.rows(), x.cols()])?);
    let hv = g.constant(h.reshape(vec![h.rows(), h.cols()])?);
    let out = cell.step(&mut g, store, xv, hv)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_store(cell: &GruCell) -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        cell.init(&mut s, &mut rng);
        let names: Vec<String> = s.names().map(str::to_string).collect();
        for n in names {
            let shape = s.get(&n).unwrap().shape().to_vec();
            s.insert(n, Tensor::zeros(&shape));
        }
        s
    }

    #[test]
    fn zero_weights_halve_hidden_state() {
        let cell = GruCell::new("gru", 3, 4);
        let s = zero_store(&cell);
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let h = Tensor::vector(vec![0.4, -1.0, 2.0, 0.0]);
        let out = gru_step(&cell, &s, &x, &h).unwrap();
        assert_eq!(out.data(), &[0.2, -0.5, 1.0, 0.0]);

        let out = gru_step(&cell, &s, &x, &Tensor::zeros(&[4])).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gru_matches_scalar_gate_equations() {
        let cell = GruCell::new("gru", 3, 2);
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        cell.init(&mut s, &mut rng);
        let x = [0.3, -0.7, 1.1];
        let h = [0.5, -0.25];
        let out = gru_step(
            &cell,
            &s,
            &Tensor::vector(x.to_vec()),
            &Tensor::vector(h.to_vec()),
        )
        .unwrap();

        let affine = |name: &str, input: &[f64], j: usize| -> f64 {
            let w = s.get(&format!("gru.{name}.w")).unwrap();
            let b = s.get(&format!("gru.{name}.b")).unwrap();
            b.data()[j]
                + input
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * w.at(i, j))
                    .sum::<f64>()
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..2 {
            let r = sig(affine("xr", &x, j) + affine("hr", &h, j));
            let z = sig(affine("xz", &x, j) + affine("hz", &h, j));
            let n = (affine("xn", &x, j) + r * affine("hn", &h, j)).tanh();
            let expect = (1.0 - z) * n + z * h[j];
            assert!((out.data()[j] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn gru_shape_mismatch() {
        let cell = GruCell::new("gru", 3, 2);
        let s = zero_store(&cell);
        let err = gru_step(
            &cell,
            &s,
            &Tensor::vector(vec![0.0; 4]),
            &Tensor::zeros(&[2]),
        );
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }
}
