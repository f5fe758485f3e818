//! Dense numeric kernels, tape-based reverse-mode differentiation, AdamW,
//! and a finite-difference gradient oracle.

mod binder;
mod gradcheck;
pub mod init;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use binder::Binder;
pub use gradcheck::{
    finite_diff_check, relative_error, CoordError, GradCheckReport, DEFAULT_STEP, REL_ERR_FLOOR,
};
pub use optim::{adamw_step, AdamW, AdamWConfig, Moments};
pub use scalar::Real;
pub use tape::{
    gelu, softmax_row, AttnMask, AttnSpec, Gradients, Tape, Var, LAYER_NORM_EPS, PROB_FLOOR,
};
pub use tensor::{ParamStore, Parameter, Tensor};

/// Copies gradients of named leaves back into the parameter store.
pub fn store_grads<T: Real>(params: &mut ParamStore<T>, grads: &Gradients<T>) {
    params.zero_grad();
    for (name, g) in grads.named() {
        if let Some(p) = params.get_mut(name) {
            match &mut p.tensor.grad {
                Some(existing) => {
                    for (o, &v) in existing.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                None => p.tensor.grad = Some(g.to_vec()),
            }
        }
    }
}
