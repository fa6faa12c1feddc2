use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;

/// Slice of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct P {
    pub off: usize,
    pub len: usize,
}

impl P {
    pub fn of<'a, T>(&self, data: &'a [T]) -> &'a [T] {
        &data[self.off..self.off + self.len]
    }

    pub fn of_mut<'a, T>(&self, data: &'a mut [T]) -> &'a mut [T] {
        &mut data[self.off..self.off + self.len]
    }

    /// Same tensor inside a buffer that starts at `base`.
    pub fn shifted(&self, base: usize) -> P {
        P {
            off: self.off - base,
            len: self.len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Names, shapes and offsets of every tensor in a flat buffer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
    pub len: usize,
}

impl Layout {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> P {
        let spec = ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.len,
            init,
        };
        let p = P {
            off: self.len,
            len: spec.len(),
        };
        self.len += p.len;
        self.specs.push(spec);
        p
    }

    /// Linear layer `[out, in]` weight plus bias, uniform in `±1/sqrt(fan_in)`.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (P, P) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.add(format!("{name}.weight"), &[fan_out, fan_in], Init::Uniform(bound));
        let b = self.add(format!("{name}.bias"), &[fan_out], Init::Uniform(bound));
        (w, b)
    }

    pub fn init<T: Scalar, R: Rng>(&self, rng: &mut R) -> Vec<T> {
        let mut data = vec![T::zero(); self.len];
        for spec in &self.specs {
            let dst = &mut data[spec.offset..spec.offset + spec.len()];
            match spec.init {
                Init::Zeros => {}
                Init::Ones => dst.fill(T::one()),
                Init::Uniform(b) => {
                    let dist = Uniform::new_inclusive(-b, b).expect("valid bound");
                    dst.iter_mut().for_each(|v| *v = T::c(dist.sample(rng)));
                }
                Init::Normal(s) => {
                    let dist = Normal::new(0.0, s).expect("valid std");
                    dst.iter_mut().for_each(|v| *v = T::c(dist.sample(rng)));
                }
            }
        }
        data
    }

    pub fn find(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }
}
