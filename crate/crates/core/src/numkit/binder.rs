use std::collections::HashMap;

use super::{ParamStore, Real, Tape, Var};

/// Binds named parameters onto a tape on first use, so each parameter is a
/// single leaf no matter how many times the forward pass reads it.
pub struct Binder<'a, T> {
    store: &'a ParamStore<T>,
    bound: HashMap<String, Var>,
}

impl<'a, T: Real> Binder<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    /// Panics on a name the model never registered.
    pub fn get(&mut self, tape: &mut Tape<T>, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let p = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        let v = if p.trainable {
            tape.param(name, &p.tensor)
        } else {
            tape.constant(p.tensor.clone())
        };
        self.bound.insert(name.to_string(), v);
        v
    }
}
