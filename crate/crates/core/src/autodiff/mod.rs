//! Dense-tensor reverse-mode differentiation: exactly the operations the
//! network needs, plus a finite-difference checking facility.

mod gradcheck;
mod params;
mod tape;

use crate::error::Result;

pub use gradcheck::{gradient_check, LossFn};
pub use params::{Initializer, ParamStore, ParamTensor};
pub use tape::{Gradients, Tape, Var};

/// Two linear layers with a ReLU between, applied over the last axis.
/// Parameters `<prefix>.w1` (d_in x d_h), `<prefix>.b1`, `<prefix>.w2`
/// (d_h x d_out), `<prefix>.b2`. Leading axes are flattened and restored.
pub fn mlp_apply(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w1 = tape.param(store, &format!("{prefix}.w1"));
    let b1 = tape.param(store, &format!("{prefix}.b1"));
    let w2 = tape.param(store, &format!("{prefix}.w2"));
    let b2 = tape.param(store, &format!("{prefix}.b2"));

    let in_shape = tape.shape(x).to_vec();
    let d_in = *in_shape.last().expect("mlp input must have a last axis");
    let rows: usize = in_shape[..in_shape.len() - 1].iter().product();
    let d_out = tape.shape(w2)[1];

    let flat = tape.reshape(x, &[rows, d_in])?;
    let h = tape.matmul(flat, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.relu(h);
    let y = tape.matmul(h, w2)?;
    let y = tape.add(y, b2)?;

    let mut out_shape = in_shape[..in_shape.len() - 1].to_vec();
    out_shape.push(d_out);
    tape.reshape(y, &out_shape)
}

/// Register MLP parameters for [`mlp_apply`] under `prefix`.
pub fn mlp_init(
    init: &mut Initializer,
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
) {
    init.linear(store, &format!("{prefix}.w1"), d_in, d_hidden);
    init.zeros(store, &format!("{prefix}.b1"), &[d_hidden]);
    init.linear(store, &format!("{prefix}.w2"), d_hidden, d_out);
    init.zeros(store, &format!("{prefix}.b2"), &[d_out]);
}
