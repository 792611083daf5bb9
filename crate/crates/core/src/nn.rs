//! Named parameter storage and the small layer helpers shared by the
//! backbone and the heads.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Ordered, name-addressed set of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter {name:?}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.values[i])
            .ok_or_else(|| Error::contract(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.values[i]),
            None => Err(Error::contract(format!("missing parameter {name:?}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let vars = self.values.iter().map(|v| g.param(v.clone())).collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Replaces every value from `entries`, which must match names and shapes.
    pub fn load(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, t) in entries {
            let cur = self.get_mut(name)?;
            if cur.shape() != t.shape() {
                return Err(Error::contract(format!(
                    "parameter {name:?}: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    cur.shape()
                )));
            }
            *cur = t.clone();
        }
        Ok(())
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor<T>)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }
}

/// Graph handles for a bound [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Pairs `names` with already-created graph leaves, in order.
    pub fn from_parts(names: &[String], vars: &[Var]) -> Result<Bound> {
        if names.len() != vars.len() {
            return Err(Error::contract(format!(
                "{} names for {} variables",
                names.len(),
                vars.len()
            )));
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Bound {
            vars: vars.to_vec(),
            index,
        })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::contract(format!("parameter {name:?} not bound")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }
}

fn gaussian<T: Scalar>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.normal() * std)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// He-initialized `k×k` convolution `{name}/w`, `{name}/b`.
pub fn init_conv<T: Scalar>(
    p: &mut ParamStore<T>,
    rng: &mut Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) -> Result<()> {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    p.insert(format!("{name}/w"), gaussian(rng, &[cout, cin, k, k], std))?;
    p.insert(format!("{name}/b"), Tensor::zeros(&[cout]))
}

/// Dense layer `{name}/w: [din, dout]`, `{name}/b: [dout]`.
pub fn init_linear<T: Scalar>(
    p: &mut ParamStore<T>,
    rng: &mut Rng,
    name: &str,
    din: usize,
    dout: usize,
) -> Result<()> {
    let std = (1.0 / din as f64).sqrt();
    p.insert(format!("{name}/w"), gaussian(rng, &[din, dout], std))?;
    p.insert(format!("{name}/b"), Tensor::zeros(&[dout]))
}

pub fn init_layer_norm<T: Scalar>(p: &mut ParamStore<T>, name: &str, d: usize) -> Result<()> {
    p.insert(format!("{name}/g"), Tensor::full(&[d], T::one()))?;
    p.insert(format!("{name}/b"), Tensor::zeros(&[d]))
}

pub fn init_embedding<T: Scalar>(
    p: &mut ParamStore<T>,
    rng: &mut Rng,
    name: &str,
    rows: usize,
    d: usize,
    std: f64,
) -> Result<()> {
    p.insert(name, gaussian(rng, &[rows, d], std))
}

pub fn conv<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = p.var(&format!("{name}/w"))?;
    let b = p.var(&format!("{name}/b"))?;
    g.conv2d(x, w, Some(b), stride)
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}/w"))?;
    let b = p.var(&format!("{name}/b"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let gamma = p.var(&format!("{name}/g"))?;
    let beta = p.var(&format!("{name}/b"))?;
    g.layer_norm(x, gamma, beta, 1e-5)
}
