//! Named parameters and the small layer vocabulary shared by the encoder
//! and the decoders.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{concat_last, Gradients, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
}

/// Ordered map of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(
            name.into(),
            Param {
                value,
                frozen: false,
            },
        );
    }

    pub fn insert_param(&mut self, name: impl Into<String>, param: Param) {
        self.entries.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in self.entries.values_mut() {
            p.frozen = frozen;
        }
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }

    /// Records every entry on `tape`: frozen entries as constants,
    /// the rest as differentiable leaves.
    pub fn bind_into<'t>(&self, tape: &'t Tape, bound: &mut Bound<'t>) {
        for (name, p) in &self.entries {
            let v = tape.input(p.value.clone(), !p.frozen);
            bound.vars.insert(name.clone(), v);
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let mut b = Bound::default();
        self.bind_into(tape, &mut b);
        b
    }

    // Initializers.

    pub fn add_linear<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) {
        let std = (1.0 / fan_in as f64).sqrt();
        self.insert(format!("{prefix}.w"), Tensor::randn([fan_in, fan_out], std, rng));
        self.insert(format!("{prefix}.b"), Tensor::zeros([1, fan_out]));
    }

    pub fn add_layer_norm(&mut self, prefix: &str, dim: usize) {
        self.insert(format!("{prefix}.g"), Tensor::ones([1, dim]));
        self.insert(format!("{prefix}.b"), Tensor::zeros([1, dim]));
    }

    /// Per-head query/key/value maps plus an output projection.
    pub fn add_attention<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) {
        let head_dim = dim / heads;
        let std = (1.0 / dim as f64).sqrt();
        for h in 0..heads {
            for kind in ["q", "k", "v"] {
                self.insert(
                    format!("{prefix}.{kind}{h}"),
                    Tensor::randn([dim, head_dim], std, rng),
                );
            }
        }
        self.add_linear(&format!("{prefix}.o"), dim, dim, rng);
    }

    pub fn add_mlp<R: Rng + ?Sized>(&mut self, prefix: &str, dim: usize, hidden: usize, rng: &mut R) {
        self.add_linear(&format!("{prefix}.fc1"), dim, hidden, rng);
        self.add_linear(&format!("{prefix}.fc2"), hidden, dim, rng);
    }
}

/// Parameters recorded on one tape, addressable by name.
#[derive(Default)]
pub struct Bound<'t> {
    vars: HashMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var<'t>)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var<'t>) {
        self.vars.insert(name.into(), var);
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter {name} not bound")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    /// Gradients for every differentiable bound parameter.
    pub fn grads(&self, g: &Gradients) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.vars {
            if v.requires_grad() {
                out.insert(name.clone(), g.wrt(*v)?);
            }
        }
        Ok(out)
    }

    pub fn linear(&self, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        let w = self.get(&format!("{prefix}.w"))?;
        let b = self.get(&format!("{prefix}.b"))?;
        x.matmul(w)?.add(b)
    }

    pub fn layer_norm(&self, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        let g = self.get(&format!("{prefix}.g"))?;
        let b = self.get(&format!("{prefix}.b"))?;
        x.layer_norm(LN_EPS)?.mul(g)?.add(b)
    }

    /// Multi-head attention of `queries` over `context`, composed from
    /// recorded primitives.
    pub fn attention(
        &self,
        prefix: &str,
        queries: Var<'t>,
        context: Var<'t>,
        heads: usize,
    ) -> Result<Var<'t>> {
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let wq = self.get(&format!("{prefix}.q{h}"))?;
            let wk = self.get(&format!("{prefix}.k{h}"))?;
            let wv = self.get(&format!("{prefix}.v{h}"))?;
            let q = queries.matmul(wq)?;
            let k = context.matmul(wk)?;
            let v = context.matmul(wv)?;
            let head_dim = q.value().cols() as f64;
            let attn = q.matmul_t(k)?.scale(1.0 / head_dim.sqrt())?.softmax(1)?;
            outs.push(attn.matmul(v)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { concat_last(&outs)? };
        self.linear(&format!("{prefix}.o"), joined)
    }

    pub fn mlp(&self, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.linear(&format!("{prefix}.fc1"), x)?;
        let h = gelu(h)?;
        self.linear(&format!("{prefix}.fc2"), h)
    }
}

/// Sigmoid approximation of GELU: `x · σ(1.702 x)`.
pub fn gelu(x: Var<'_>) -> Result<Var<'_>> {
    x.mul(x.scale(1.702)?.sigmoid()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frozen_entries_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add_linear("a", 3, 2, &mut rng);
        store.get_mut("a.w").unwrap().frozen = true;
        let tape = Tape::new();
        let b = store.bind(&tape);
        let x = tape.constant(Tensor::ones([4, 3]));
        let loss = b.linear("a", x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        let grads = b.grads(&g).unwrap();
        assert!(grads.contains_key("a.b"));
        assert!(!grads.contains_key("a.w"));
    }

    #[test]
    fn attention_layer_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        store.add_attention("att", 4, 2, &mut rng);
        let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
        let mut inputs: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
        inputs.push(Tensor::randn([3, 4], 1.0, &mut rng));
        inputs.push(Tensor::randn([5, 4], 1.0, &mut rng));
        let r = finite_diff_check(
            |_, v| {
                let b = Bound::from_pairs(names.iter().cloned().zip(v.iter().copied()));
                let q = v[v.len() - 2];
                let c = v[v.len() - 1];
                let out = b.attention("att", q, c, 2)?;
                gelu(out)?.square()?.mean()
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r}");
    }
}
