use super::params::{Init, ParamSpec, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{PctError, Result};

/// A multilayer perceptron with ReLU on hidden layers and a linear output.
///
/// `widths = [d_in, h_1, ..., d_out]`; layer `i` owns `{prefix}.l{i}.w`
/// (`widths[i] x widths[i+1]`) and `{prefix}.l{i}.b` (`1 x widths[i+1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    pub widths: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, widths: Vec<usize>) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        Mlp {
            prefix: prefix.into(),
            widths,
        }
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.b", self.prefix)
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::with_capacity(2 * self.layers());
        for (l, w) in self.widths.windows(2).enumerate() {
            specs.push(ParamSpec {
                name: self.weight_name(l),
                rows: w[0],
                cols: w[1],
                init: Init::Xavier { fan_in: w[0], fan_out: w[1] },
            });
            specs.push(ParamSpec {
                name: self.bias_name(l),
                rows: 1,
                cols: w[1],
                init: Init::Zeros,
            });
        }
        specs
    }

    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        mlp_forward(tape, input, &self.prefix, &self.widths)
    }
}

/// Row-wise MLP forward on the tape. Checks every parameter shape first and
/// reports a dimension error naming the offending tensor.
pub fn mlp_forward(tape: &mut Tape, input: Var, prefix: &str, widths: &[usize]) -> Result<Var> {
    let (_, d_in) = tape.shape(input);
    if widths.first() != Some(&d_in) {
        return Err(PctError::dim(format!("{prefix} input"), widths.first().copied().unwrap_or(0), d_in));
    }
    let params: &ParamStore = tape.params();
    let mut ids = Vec::with_capacity(widths.len() - 1);
    for (l, w) in widths.windows(2).enumerate() {
        let wid = params.expect(&format!("{prefix}.l{l}.w"), w[0], w[1])?;
        let bid = params.expect(&format!("{prefix}.l{l}.b"), 1, w[1])?;
        ids.push((wid, bid));
    }
    let last = ids.len() - 1;
    let mut x = input;
    for (l, (wid, bid)) in ids.into_iter().enumerate() {
        let w = tape.param(wid);
        let b = tape.param(bid);
        x = tape.affine(x, w, b);
        if l < last {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    #[test]
    fn zero_weights_give_zero_output() {
        let mlp = Mlp::new("m", vec![3, 5, 2]);
        let specs: Vec<ParamSpec> = mlp
            .param_specs()
            .into_iter()
            .map(|mut s| {
                s.init = Init::Zeros;
                s
            })
            .collect();
        let ps = ParamStore::initialize(&specs, 0).unwrap();
        let mut t = Tape::new(&ps);
        let x = t.input(Tensor::from_vec(2, 3, vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]));
        let y = mlp.forward(&mut t, x).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer() {
        let mut map = BTreeMap::new();
        map.insert("id.l0.w".to_string(), Tensor::identity(3));
        map.insert("id.l0.b".to_string(), Tensor::zeros(1, 3));
        let ps = ParamStore::from_map(map);
        let mut t = Tape::new(&ps);
        let input = Tensor::from_vec(2, 3, vec![1.5, -2.0, 3.0, 0.25, 5.0, -6.0]);
        let x = t.input(input.clone());
        let y = mlp_forward(&mut t, x, "id", &[3, 3]).unwrap();
        assert_eq!(t.value(y), &input);
    }

    #[test]
    fn matches_straight_line_forward() {
        let mlp = Mlp::new("m", vec![3, 6, 2]);
        let ps = ParamStore::initialize(&mlp.param_specs(), 9).unwrap();
        // Non-zero biases so they are exercised too.
        let mut ps = ps;
        for name in ["m.l0.b", "m.l1.b"] {
            let id = ps.id(name).unwrap();
            for (k, v) in ps.tensor_mut(id).data_mut().iter_mut().enumerate() {
                *v = 0.1 * (k as f64 + 1.0) - 0.25;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut t = Tape::new(&ps);
        let x = t.input(Tensor::from_vec(4, 3, input.clone()));
        let y = mlp.forward(&mut t, x).unwrap();

        let (w0, b0) = (ps.get("m.l0.w").unwrap(), ps.get("m.l0.b").unwrap());
        let (w1, b1) = (ps.get("m.l1.w").unwrap(), ps.get("m.l1.b").unwrap());
        for r in 0..4 {
            let row = &input[r * 3..r * 3 + 3];
            let mut hidden = [0.0; 6];
            for (j, h) in hidden.iter_mut().enumerate() {
                let mut s = b0.get(0, j);
                for i in 0..3 {
                    s += row[i] * w0.get(i, j);
                }
                *h = s.max(0.0);
            }
            for j in 0..2 {
                let mut s = b1.get(0, j);
                for (i, h) in hidden.iter().enumerate() {
                    s += h * w1.get(i, j);
                }
                assert!((t.value(y).get(r, j) - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let mlp = Mlp::new("m", vec![3, 4]);
        let ps = ParamStore::initialize(&mlp.param_specs(), 0).unwrap();
        let mut t = Tape::new(&ps);
        let x = t.input(Tensor::zeros(1, 3));
        match mlp_forward(&mut t, x, "m", &[3, 5]).unwrap_err() {
            PctError::Dimension { name, .. } => assert_eq!(name, "m.l0.w"),
            e => panic!("{e:?}"),
        }
        let x2 = t.input(Tensor::zeros(1, 2));
        assert!(matches!(mlp.forward(&mut t, x2), Err(PctError::Dimension { .. })));
    }
}
