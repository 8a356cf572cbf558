use ndarray::ArrayD;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn =
    Box<dyn Fn(&ArrayD<f32>, &[ArrayD<f32>], &mut dyn FnMut(usize, ArrayD<f32>))>;

pub(crate) struct Node {
    pub(crate) parents: Vec<usize>,
    pub(crate) backward: Option<BackwardFn>,
}

/// Append-only evaluation trace. Ops push a value and, when gradients are
/// enabled, a closure that maps the output cotangent to parent cotangents.
/// Node ids are topologically ordered by construction, so the reverse pass
/// is a single descending sweep.
pub struct Tape {
    pub(crate) vals: Vec<ArrayD<f32>>,
    pub(crate) nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self { vals: Vec::new(), nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that records values only; `backward` on it yields no gradients.
    pub fn no_grad() -> Self {
        Self { vals: Vec::new(), nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &ArrayD<f32> {
        &self.vals[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.vals[v.0].shape()
    }

    /// Scalar read of a 1-element value.
    pub fn scalar(&self, v: Var) -> f32 {
        let a = self.value(v);
        debug_assert_eq!(a.len(), 1);
        *a.iter().next().expect("scalar var")
    }

    /// Record a leaf. Leaves have no backward, but gradients still
    /// accumulate on them, which is how inputs and parameters are read.
    pub fn leaf(&mut self, value: ArrayD<f32>) -> Var {
        self.push(value, Vec::new(), None)
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<f32>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Var {
        let id = self.vals.len();
        self.vals.push(value);
        if self.grad_enabled {
            self.nodes.push(Node { parents, backward });
        } else {
            self.nodes.push(Node { parents: Vec::new(), backward: None });
        }
        Var(id)
    }

    /// Reverse sweep from a scalar root. Returns the cotangent of every node
    /// reachable from `root`; unreachable nodes are `None`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f32>>> = vec![None; self.vals.len()];
        let seed = ArrayD::from_elem(self.vals[root.0].raw_dim(), 1.0f32);
        grads[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = self.nodes[id].backward.as_ref() {
                back(&g, &self.vals, &mut |pid, delta| {
                    debug_assert_eq!(self.vals[pid].shape(), delta.shape());
                    match &mut grads[pid] {
                        Some(acc) => *acc += &delta,
                        slot => *slot = Some(delta),
                    }
                });
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f32>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f32>> {
        self.grads[v.0].take()
    }
}
