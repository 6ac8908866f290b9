use super::Array;

/// A named, learnable array. Names are the identity used for tape binding,
/// optimizer state and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

/// Anything that owns a fixed, ordered set of parameters.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

impl Parameterized for Vec<Param> {
    fn params(&self) -> Vec<&Param> {
        self.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.iter_mut().collect()
    }
}
