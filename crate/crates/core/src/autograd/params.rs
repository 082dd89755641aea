use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub frozen: bool,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered collection of named parameters with per-tensor frozen flags.
///
/// Names are dotted paths (`dvae.g2d.blocks.3.attn.qkv.w`); insertion order
/// is preserved and defines checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter {name:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() || numel == 0 {
            return Err(Error::Shape(format!(
                "parameter {name:?}: shape {shape:?} with {} values",
                data.len()
            )));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.params.push(Param {
            shape,
            data,
            frozen: false,
        });
        Ok(())
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Result<()> {
        let n = shape.iter().product();
        self.insert(name, shape, vec![0.0; n])
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Result<()> {
        let n = shape.iter().product();
        self.insert(name, shape, vec![1.0; n])
    }

    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f32,
        rng: &mut R,
    ) -> Result<()> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        self.insert(name, shape, data)
    }

    pub fn uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f32,
        rng: &mut R,
    ) -> Result<()> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, shape, data)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(Param::numel).sum()
    }

    /// Marks every parameter whose name matches `pattern` (`*` wildcards) as
    /// frozen. Returns the number matched; zero matches is a config error.
    pub fn freeze(&mut self, pattern: &str) -> Result<usize> {
        self.set_frozen(pattern, true)
    }

    pub fn thaw(&mut self, pattern: &str) -> Result<usize> {
        self.set_frozen(pattern, false)
    }

    fn set_frozen(&mut self, pattern: &str, frozen: bool) -> Result<usize> {
        let mut hits = 0;
        for (name, p) in self.names.iter().zip(self.params.iter_mut()) {
            if wildcard_match(pattern, name) {
                p.frozen = frozen;
                hits += 1;
            }
        }
        if hits == 0 {
            return Err(Error::Config(format!(
                "selector {pattern:?} matches no parameter"
            )));
        }
        Ok(hits)
    }

    /// Moves every parameter of `other` in under `prefix.`.
    pub fn absorb(&mut self, prefix: &str, other: ParamStore) -> Result<()> {
        for (name, p) in other.names.into_iter().zip(other.params) {
            let frozen = p.frozen;
            let full = format!("{prefix}.{name}");
            self.insert(full.clone(), p.shape, p.data)?;
            self.get_mut(&full).unwrap().frozen = frozen;
        }
        Ok(())
    }

    /// Copies the values (not flags) of every parameter under `prefix.` in
    /// `other` whose remainder names a parameter here.
    pub fn extract(&self, prefix: &str) -> ParamStore {
        let lead = format!("{prefix}.");
        let mut out = ParamStore::new();
        for (name, p) in self.iter() {
            if let Some(rest) = name.strip_prefix(&lead) {
                out.insert(rest, p.shape.clone(), p.data.clone())
                    .expect("unique names stay unique");
                out.get_mut(rest).unwrap().frozen = p.frozen;
            }
        }
        out
    }
}

/// Glob match where `*` matches any (possibly empty) run of characters.
pub fn wildcard_match(pattern: &str, text: &str) -> bool {
    let (p, t) = (pattern.as_bytes(), text.as_bytes());
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && p[pi] == b'*' {
            star = Some((pi, ti));
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == b'*')
}
