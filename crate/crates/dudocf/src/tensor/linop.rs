//! Fixed linear operators that participate in the graph with exact gradients
//! (the derivative of a linear map is the map itself; its backward pass is the
//! adjoint). The scanner projectors plug in through this trait.

pub trait LinearOp: Send + Sync {
    fn in_len(&self) -> usize;
    fn out_len(&self) -> usize;
    /// out += is NOT implied; `out` arrives zeroed and is fully overwritten.
    fn apply(&self, x: &[f64], out: &mut [f64]);
    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]);
}
