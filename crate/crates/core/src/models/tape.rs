//! Minimal scalar reverse-mode differentiation.
//!
//! Every node stores its value and the local partial derivatives with
//! respect to its parents. Edges live in one flat arena.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Reverse-accumulation record of one scalar computation.
#[derive(Debug, Default, Clone)]
pub struct GradTape {
    values: Vec<f64>,
    spans: Vec<(usize, usize)>,
    edges: Vec<(usize, f64)>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop all nodes while keeping allocations.
    pub fn clear(&mut self) {
        self.values.clear();
        self.spans.clear();
        self.edges.clear();
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.0]
    }

    fn push<I: IntoIterator<Item = (Var, f64)>>(&mut self, value: f64, parents: I) -> Var {
        let start = self.edges.len();
        self.edges.extend(parents.into_iter().map(|(p, d)| (p.0, d)));
        self.spans.push((start, self.edges.len()));
        self.values.push(value);
        Var(self.values.len() - 1)
    }

    /// An input variable.
    pub fn leaf(&mut self, value: f64) -> Var {
        self.push(value, std::iter::empty())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, [(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, [(a, 1.0), (b, -1.0)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(x * y, [(a, y), (b, x)])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = c * self.value(a);
        self.push(v, [(a, c)])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        if x > 0.0 {
            self.push(x, [(a, 1.0)])
        } else {
            self.push(0.0, [(a, 0.0)])
        }
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let e = self.value(a).exp();
        self.push(e, [(a, e)])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(x.ln(), [(a, 1.0 / x)])
    }

    /// `bias + sum_i weights[i] * inputs[i]` with constant inputs.
    pub fn affine_const(&mut self, weights: &[Var], inputs: &[f64], bias: Var) -> Var {
        let v = self.value(bias) + weights.iter().zip(inputs).map(|(w, x)| self.value(*w) * x).sum::<f64>();
        let parents: Vec<(Var, f64)> = weights
            .iter()
            .zip(inputs)
            .map(|(w, x)| (*w, *x))
            .chain(std::iter::once((bias, 1.0)))
            .collect();
        self.push(v, parents)
    }

    /// `bias + sum_i weights[i] * inputs[i]` with variable inputs.
    pub fn affine(&mut self, weights: &[Var], inputs: &[Var], bias: Var) -> Var {
        let v = self.value(bias)
            + weights
                .iter()
                .zip(inputs)
                .map(|(w, x)| self.value(*w) * self.value(*x))
                .sum::<f64>();
        let mut parents = Vec::with_capacity(2 * weights.len() + 1);
        for (w, x) in weights.iter().zip(inputs) {
            parents.push((*w, self.value(*x)));
            parents.push((*x, self.value(*w)));
        }
        parents.push((bias, 1.0));
        self.push(v, parents)
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let v = xs.iter().map(|x| self.value(*x)).sum();
        let parents: Vec<(Var, f64)> = xs.iter().map(|x| (*x, 1.0)).collect();
        self.push(v, parents)
    }

    /// Numerically stable `log sum_i exp(x_i)`.
    pub fn logsumexp(&mut self, xs: &[Var]) -> Var {
        let vals: Vec<f64> = xs.iter().map(|x| self.value(*x)).collect();
        let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = vals.iter().map(|v| (v - mx).exp()).sum();
        let lse = mx + s.ln();
        let parents: Vec<(Var, f64)> = xs.iter().zip(&vals).map(|(x, v)| (*x, (v - lse).exp())).collect();
        self.push(lse, parents)
    }

    /// Adjoint of every node with respect to `output`.
    pub fn backward(&self, output: Var) -> Vec<f64> {
        let mut adj = vec![0.0; output.0 + 1];
        adj[output.0] = 1.0;
        for node in (0..=output.0).rev() {
            let a = adj[node];
            if a == 0.0 {
                continue;
            }
            let (s, e) = self.spans[node];
            for &(p, d) in &self.edges[s..e] {
                adj[p] += a * d;
            }
        }
        adj
    }

    /// Gradient of `output` with respect to the given leaves.
    pub fn gradient(&self, output: Var, leaves: &[Var]) -> Vec<f64> {
        let adj = self.backward(output);
        leaves.iter().map(|l| adj.get(l.0).copied().unwrap_or(0.0)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_and_reuse() {
        let mut t = GradTape::new();
        let x = t.leaf(3.0);
        let y = t.leaf(-2.0);
        let xy = t.mul(x, y);
        let f = t.add(xy, x);
        assert_eq!(t.value(f), -3.0);
        assert_eq!(t.gradient(f, &[x, y]), vec![-1.0, 3.0]);
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let mut t = GradTape::new();
        let xs: Vec<Var> = [1.0, 2.0, 3.0].iter().map(|v| t.leaf(*v)).collect();
        let l = t.logsumexp(&xs);
        let g = t.gradient(l, &xs);
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (gi, v) in g.iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((gi - v.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn affine_matches_manual_derivative() {
        let mut t = GradTape::new();
        let w: Vec<Var> = [0.5, -1.0].iter().map(|v| t.leaf(*v)).collect();
        let x: Vec<Var> = [2.0, 4.0].iter().map(|v| t.leaf(*v)).collect();
        let b = t.leaf(0.25);
        let a = t.affine(&w, &x, b);
        let r = t.relu(a);
        assert_eq!(t.value(r), 0.0);
        let a2 = t.affine_const(&w, &[2.0, 4.0], b);
        let e = t.exp(a2);
        let l = t.ln(e);
        let g = t.gradient(l, &w);
        assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] - 4.0).abs() < 1e-12);
    }
}
