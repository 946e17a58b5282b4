//! Reverse-mode gradients over tensor-valued operations.
//!
//! A [`Tape`] records each operation's inputs and output as it is
//! evaluated. [`Tape::backward`] walks the nodes in reverse recording order
//! (a valid reverse topological order, since inputs always precede their
//! consumers) and accumulates vector-Jacobian products. Only nodes that
//! depend on a registered parameter receive gradients.

mod tape;

pub use tape::{Gradients, Tape, TapeError, Var};
