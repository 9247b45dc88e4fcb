use rand::Rng;

/// Dense layer, weights row-major `n_out × n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.w.chunks_exact(self.n_in).zip(&self.b).map(|(row, b)| {
            row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b
        }));
    }
}

/// Feed-forward network with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Layer inputs (post-activation) and the final output of one pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; weights and biases uniform in ±1/sqrt(fan_in).
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .map(|d| {
                let (n_in, n_out) = (d[0], d[1]);
                let bound = 1.0 / (n_in as f64).sqrt();
                let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
                let w = draw(n_in * n_out);
                let b = draw(n_out);
                Layer { n_in, n_out, w, b }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer { n_in: l.n_in, n_out: l.n_out, w: vec![0.0; l.w.len()], b: vec![0.0; l.b.len()] })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.n_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out)
    }

    /// Whether adjacent layers chain and every buffer has the declared length.
    pub fn is_consistent(&self) -> bool {
        !self.layers.is_empty()
            && self.layers.iter().all(|l| l.w.len() == l.n_in * l.n_out && l.b.len() == l.n_out)
            && self.layers.windows(2).all(|p| p[0].n_out == p[1].n_in)
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.w.as_slice(), l.b.as_slice()]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.as_mut_slice(), l.b.as_mut_slice()])
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).output
    }

    pub fn forward_cached(&self, x: &[f64]) -> MlpCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.n_out);
            layer.apply(&cur, &mut out);
            if i != last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut cur, out));
        }
        MlpCache { inputs, output: cur }
    }

    /// Accumulates parameter gradients into `grad` given dL/d(output).
    /// Input gradients are not needed (inputs are frozen embeddings).
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64], grad: &mut Mlp) {
        let mut delta = d_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let g = &mut grad.layers[i];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.b[o] += d;
                let row = &mut g.w[o * layer.n_in..(o + 1) * layer.n_in];
                row.iter_mut().zip(input).for_each(|(gw, x)| *gw += d * x);
            }
            if i == 0 {
                break;
            }
            // Through this layer, then through the ReLU that produced `input`.
            let mut prev = vec![0.0; layer.n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
            }
            prev.iter_mut().zip(input).for_each(|(p, &x)| {
                if x <= 0.0 {
                    *p = 0.0;
                }
            });
            delta = prev;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_between_layers_only() {
        let m = Mlp {
            layers: vec![
                Layer { n_in: 1, n_out: 2, w: vec![1.0, -1.0], b: vec![0.0, 0.0] },
                Layer { n_in: 2, n_out: 1, w: vec![1.0, 1.0], b: vec![-5.0] },
            ],
        };
        assert_eq!(m.forward(&[2.0]), vec![-3.0]);
        assert_eq!(m.forward(&[-2.0]), vec![-3.0]);
        assert!(m.is_consistent());
    }

    #[test]
    fn init_shapes() {
        let m = Mlp::init(&[4, 16, 3], &mut ChaCha8Rng::seed_from_u64(0));
        assert!(m.is_consistent());
        assert_eq!((m.input_dim(), m.output_dim()), (4, 3));
        assert_eq!(m.tensors().iter().map(|t| t.len()).collect::<Vec<_>>(), vec![64, 16, 48, 3]);
        let z = m.zeros_like();
        assert!(z.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }
}
