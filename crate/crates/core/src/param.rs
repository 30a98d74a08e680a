/// Mutable view of one learnable tensor and its gradient buffer.
pub struct ParamSlot<'a> {
    pub name: String,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
    /// Whether decoupled weight decay applies.
    pub decay: bool,
    /// Whether the optimizer may update this slot at all.
    pub trainable: bool,
}

/// Anything that owns learnable parameters in a stable order.
pub trait Parameters {
    fn param_slots(&mut self) -> Vec<ParamSlot<'_>>;

    fn zero_grad(&mut self) {
        for s in self.param_slots() {
            s.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Flattened copy of every parameter value.
    fn flat_values(&mut self) -> Vec<f64> {
        self.param_slots().into_iter().flat_map(|s| s.value.to_vec()).collect()
    }

    fn flat_grads(&mut self) -> Vec<f64> {
        self.param_slots().into_iter().flat_map(|s| s.grad.to_vec()).collect()
    }
}
