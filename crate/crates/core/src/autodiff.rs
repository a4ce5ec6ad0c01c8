//! Minimal reverse-mode automatic differentiation over `f64` vectors.
//!
//! Parameters live in a [`ParamSet`] of named dense tensors. A [`Tape`]
//! records one forward computation (typically one query); `backward` returns
//! gradients for every parameter tensor. Matrices only appear as parameters,
//! so every tape value is a flat vector (scalars are length 1).

use std::collections::HashMap;

use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape mismatch for {name}");
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.tensors.len());
        self.tensors.push(Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, shape, vec![0.0; shape.iter().product()])
    }

    /// Uniform init on `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut impl Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, shape, data)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            data: self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }
}

/// Gradients aligned with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.data {
            for x in v {
                *x *= c;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|x| x.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param(ParamId),
    ParamRow(ParamId, usize),
    MatVec(ParamId, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Cos(Var),
    Sum(Var),
    Dot(Var, Var),
    Cosine(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Index(Var, usize),
    Softmax(Var),
    Normalize(Var),
    SumN(Vec<Var>),
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn len(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).data.clone();
        self.push(value, Op::Param(id))
    }

    /// Row `r` of a matrix parameter (embedding lookup).
    pub fn row(&mut self, id: ParamId, r: usize) -> Var {
        let value = self.params.get(id).row(r).to_vec();
        self.push(value, Op::ParamRow(id, r))
    }

    /// `W x` for a `rows x cols` parameter.
    pub fn matvec(&mut self, id: ParamId, x: Var) -> Var {
        let w = self.params.get(id);
        let cols = w.cols();
        let xv = &self.nodes[x.0].value;
        assert_eq!(cols, xv.len(), "matvec shape mismatch for {}", w.name);
        let rows = w.data.len() / cols;
        let value = (0..rows)
            .map(|i| w.data[i * cols..(i + 1) * cols].iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        self.push(value, Op::MatVec(id, x))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.len(), bv.len(), "elementwise shape mismatch");
        let value = av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect();
        self.push(value, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddConst(a))
    }

    /// Vector times a length-1 scalar.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        self.map(a, |x| x * sv, Op::MulScalar(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.map(a, f64::cos, Op::Cos(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(vec![s], Op::Sum(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.len(), bv.len());
        let s = av.iter().zip(bv).map(|(x, y)| x * y).sum();
        self.push(vec![s], Op::Dot(a, b))
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (d, na, nb) = cos_parts(av, bv);
        self.push(vec![d / (na * nb)], Op::Cosine(a, b))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let value = parts.iter().flat_map(|p| self.nodes[p.0].value.iter().copied()).collect();
        self.push(value, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[a.0].value[start..start + len].to_vec();
        self.push(value, Op::Slice(a, start))
    }

    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let v = self.nodes[a.0].value[i];
        self.push(vec![v], Op::Index(a, i))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let m = av.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = av.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let value = e.into_iter().map(|x| x / z).collect();
        self.push(value, Op::Softmax(a))
    }

    /// `a / sum(a)`.
    pub fn normalize(&mut self, a: Var) -> Var {
        let z: f64 = self.nodes[a.0].value.iter().sum();
        let value = self.nodes[a.0].value.iter().map(|x| x / z).collect();
        self.push(value, Op::Normalize(a))
    }

    /// Elementwise sum of equal-length vectors.
    pub fn sum_n(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut value = self.nodes[parts[0].0].value.clone();
        for p in &parts[1..] {
            for (x, y) in value.iter_mut().zip(&self.nodes[p.0].value) {
                *x += y;
            }
        }
        self.push(value, Op::SumN(parts.to_vec()))
    }

    /// Gradients of the scalar `out` with respect to every parameter.
    pub fn backward(&self, out: Var) -> Grads {
        let mut grads = self.params.zero_grads();
        self.backward_into(out, 1.0, &mut grads);
        grads
    }

    /// Accumulates `seed * d(out)/d(param)` into `grads`.
    pub fn backward_into(&self, out: Var, seed: f64, grads: &mut Grads) {
        assert_eq!(self.nodes[out.0].value.len(), 1, "backward needs a scalar output");
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        adj[out.0] = Some(vec![seed]);
        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let val = &node.value;
            let mut send = |v: Var, delta: &dyn Fn(usize) -> f64| {
                let n = self.nodes[v.0].value.len();
                let slot = adj[v.0].get_or_insert_with(|| vec![0.0; n]);
                for (k, s) in slot.iter_mut().enumerate() {
                    *s += delta(k);
                }
            };
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    for (a, b) in grads.data[id.0].iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::ParamRow(id, r) => {
                    let c = g.len();
                    for (a, b) in grads.data[id.0][r * c..(r + 1) * c].iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::MatVec(id, x) => {
                    let w = self.params.get(*id);
                    let cols = w.cols();
                    let xv = &self.nodes[x.0].value;
                    let gw = &mut grads.data[id.0];
                    for (r, gr) in g.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        for (c, xc) in xv.iter().enumerate() {
                            gw[r * cols + c] += gr * xc;
                        }
                    }
                    send(*x, &|c| (0..g.len()).map(|r| g[r] * w.data[r * cols + c]).sum());
                }
                Op::Add(a, b) => {
                    send(*a, &|k| g[k]);
                    send(*b, &|k| g[k]);
                }
                Op::Sub(a, b) => {
                    send(*a, &|k| g[k]);
                    send(*b, &|k| -g[k]);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    send(*a, &|k| g[k] * bv[k]);
                    send(*b, &|k| g[k] * av[k]);
                }
                Op::Scale(a, c) => send(*a, &|k| g[k] * c),
                Op::AddConst(a) => send(*a, &|k| g[k]),
                Op::MulScalar(a, s) => {
                    let av = &self.nodes[a.0].value;
                    let sv = self.nodes[s.0].value[0];
                    send(*a, &|k| g[k] * sv);
                    let ds: f64 = g.iter().zip(av).map(|(x, y)| x * y).sum();
                    send(*s, &|_| ds);
                }
                Op::Sigmoid(a) => send(*a, &|k| g[k] * val[k] * (1.0 - val[k])),
                Op::Tanh(a) => send(*a, &|k| g[k] * (1.0 - val[k] * val[k])),
                Op::Exp(a) => send(*a, &|k| g[k] * val[k]),
                Op::Log(a) => {
                    let av = &self.nodes[a.0].value;
                    send(*a, &|k| g[k] / av[k]);
                }
                Op::Cos(a) => {
                    let av = &self.nodes[a.0].value;
                    send(*a, &|k| -g[k] * av[k].sin());
                }
                Op::Sum(a) => send(*a, &|_| g[0]),
                Op::Dot(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    send(*a, &|k| g[0] * bv[k]);
                    send(*b, &|k| g[0] * av[k]);
                }
                Op::Cosine(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (d, na, nb) = cos_parts(av, bv);
                    let c = d / (na * nb);
                    send(*a, &|k| g[0] * (bv[k] / (na * nb) - c * av[k] / (na * na)));
                    send(*b, &|k| g[0] * (av[k] / (na * nb) - c * bv[k] / (nb * nb)));
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        let o = off;
                        send(*p, &|k| g[o + k]);
                        off += n;
                    }
                }
                Op::Slice(a, start) => {
                    let (s, n) = (*start, g.len());
                    send(*a, &|k| if k >= s && k < s + n { g[k - s] } else { 0.0 });
                }
                Op::Index(a, i) => {
                    let i = *i;
                    send(*a, &|k| if k == i { g[0] } else { 0.0 });
                }
                Op::Softmax(a) => {
                    let dot: f64 = g.iter().zip(val).map(|(x, y)| x * y).sum();
                    send(*a, &|k| val[k] * (g[k] - dot));
                }
                Op::Normalize(a) => {
                    let z: f64 = self.nodes[a.0].value.iter().sum();
                    let dot: f64 = g.iter().zip(val).map(|(x, y)| x * y).sum();
                    send(*a, &|k| (g[k] - dot) / z);
                }
                Op::SumN(parts) => {
                    for p in parts {
                        send(*p, &|k| g[k]);
                    }
                }
            }
        }
    }
}

fn cos_parts(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let d = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    // guards the zero vector; cosine is then 0
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    (d, na, nb)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adam with bias correction; no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = params.zero_grads().data;
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (ti, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[ti], &mut self.v[ti], &grads.data[ti]);
            for k in 0..tensor.data.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                tensor.data[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Central finite differences of `f` w.r.t. every parameter entry.
    pub fn numeric_grads(params: &ParamSet, f: impl Fn(&ParamSet) -> f64, h: f64) -> Grads {
        let mut out = params.zero_grads();
        let mut p = params.clone();
        for ti in 0..params.len() {
            for k in 0..params.tensors()[ti].data.len() {
                let orig = p.tensors()[ti].data[k];
                p.tensors_mut()[ti].data[k] = orig + h;
                let up = f(&p);
                p.tensors_mut()[ti].data[k] = orig - h;
                let down = f(&p);
                p.tensors_mut()[ti].data[k] = orig;
                out.data[ti][k] = (up - down) / (2.0 * h);
            }
        }
        out
    }

    /// `||a - n|| / max(||a||, ||n||, 1e-5)` per tensor.
    pub fn rel_errors(analytic: &Grads, numeric: &Grads) -> Vec<f64> {
        analytic
            .data
            .iter()
            .zip(&numeric.data)
            .map(|(a, n)| {
                let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                let scale = a
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
                    .max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
                // gradients that vanish analytically only carry rounding noise
                diff / scale.max(1e-5)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let mut ps = ParamSet::new();
            let w = ps.uniform("w", &[3, 4], 0.7, &mut rng);
            let e = ps.uniform("e", &[5, 4], 0.7, &mut rng);
            let b = ps.uniform("b", &[3], 0.5, &mut rng);
            let f = |t: &mut Tape<'_>| {
                let x = t.row(e, 2);
                let y = t.row(e, 4);
                let h = t.matvec(w, x);
                let bb = t.param(b);
                let h = t.add(h, bb);
                let h = t.tanh(h);
                let s = t.sigmoid(h);
                let c = t.cosine(x, y);
                let sm = t.softmax(s);
                let sc = t.mul_scalar(sm, c);
                let ex = t.exp(sc);
                let n = t.normalize(ex);
                let i0 = t.index(n, 0);
                let lg = t.log(i0);
                let sl = t.slice(x, 1, 2);
                let co = t.cos(sl);
                let cat = t.concat(&[co, lg]);
                let cat2 = t.scale(cat, 1.5);
                let d = t.dot(cat, cat2);
                let mul = t.mul(h, bb);
                let sub = t.sub(mul, s);
                let sn = t.sum_n(&[sub, h, s]);
                let tot = t.sum(sn);
                let out = t.add(d, tot);
                let out = t.add_const(out, 0.3);
                out
            };
            let mut tape = Tape::new(&ps);
            let out = f(&mut tape);
            let analytic = tape.backward(out);
            let numeric = numeric_grads(
                &ps,
                |p| {
                    let mut t = Tape::new(p);
                    let o = f(&mut t);
                    t.scalar(o)
                },
                1e-6,
            );
            for err in rel_errors(&analytic, &numeric) {
                assert!(err < 1e-6, "rel err {err}");
            }
        }
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", &[2], vec![1.0, -2.0]);
        let mut opt = Adam::new(&ps, 0.05);
        for _ in 0..500 {
            let mut t = Tape::new(&ps);
            let v = t.param(x);
            let sq = t.dot(v, v);
            let g = t.backward(sq);
            opt.step(&mut ps, &g);
        }
        assert!(ps.get(x).data.iter().all(|v| v.abs() < 0.05));
    }
}
