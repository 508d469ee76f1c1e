//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its tensors. Calling
//! [`Graph::backward`] on a scalar loss replays the tape in reverse and
//! accumulates gradients for every node, including leaves. Inference graphs
//! skip recording entirely; their tensors hold values only and cannot be
//! differentiated.
//!
//! Values are `f64` in memory. Checkpoints narrow to `f32` on disk, which is
//! where bitwise reproducibility is defined.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

pub(crate) struct NodeVal {
    pub data: Vec<f64>,
}

/// Reads node values, takes the output gradient, accumulates into input
/// gradients. Ops are replayed in reverse creation order, so the output
/// gradient is final when its producer runs.
type BackwardFn = Box<dyn Fn(&[NodeVal], &mut [Vec<f64>])>;

struct GraphInner {
    nodes: Vec<NodeVal>,
    ops: Vec<BackwardFn>,
    recording: bool,
    consumed: bool,
}

/// A computation tape. Clone handles share the same tape.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl Graph {
    /// A recording graph for training steps.
    pub fn training() -> Self {
        Graph::with_recording(true)
    }

    /// A non-recording graph: ops compute values only. Used for frozen
    /// teachers and evaluation.
    pub fn inference() -> Self {
        Graph::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                ops: Vec::new(),
                recording,
                consumed: false,
            })),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.inner.borrow().recording
    }

    pub(crate) fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Create a leaf tensor holding `data` with the given shape.
    pub fn tensor(&self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        let idx = {
            let mut inner = self.inner.borrow_mut();
            inner.nodes.push(NodeVal { data });
            inner.nodes.len() - 1
        };
        Tensor {
            graph: self.clone(),
            idx,
            shape,
        }
    }

    /// Create a scalar leaf.
    pub fn scalar(&self, v: f64) -> Tensor {
        self.tensor(vec![1], vec![v])
    }

    pub(crate) fn push_node(&self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        self.tensor(shape, data)
    }

    pub(crate) fn push_op(&self, f: BackwardFn) {
        let mut inner = self.inner.borrow_mut();
        if inner.recording {
            inner.ops.push(f);
        }
    }

    pub(crate) fn record_op<F>(&self, f: F)
    where
        F: Fn(&[NodeVal], &mut [Vec<f64>]) + 'static,
    {
        if self.is_recording() {
            self.push_op(Box::new(f));
        }
    }

    /// Reverse sweep from a scalar loss. Populates a gradient buffer for
    /// every node and frees the tape; a second call on the same graph fails.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if !self.same_graph(&loss.graph) {
            return Err(Error::Detached);
        }
        let ops = {
            let mut inner = self.inner.borrow_mut();
            if !inner.recording || inner.consumed {
                return Err(Error::Detached);
            }
            if loss.numel() != 1 {
                return Err(Error::ShapeMismatch {
                    expected: "scalar loss".into(),
                    actual: format!("{:?}", loss.shape),
                });
            }
            inner.consumed = true;
            std::mem::take(&mut inner.ops)
        };
        let inner = self.inner.borrow();
        let mut grads: Vec<Vec<f64>> = inner
            .nodes
            .iter()
            .map(|n| vec![0.0; n.data.len()])
            .collect();
        grads[loss.idx][0] = 1.0;
        for op in ops.iter().rev() {
            op(&inner.nodes, &mut grads);
        }
        Ok(Gradients {
            graph: self.clone(),
            grads,
        })
    }
}

/// A handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    pub(crate) graph: Graph,
    pub(crate) idx: usize,
    pub(crate) shape: Vec<usize>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Borrow the value buffer.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.graph.inner.borrow(), |inner| {
            inner.nodes[self.idx].data.as_slice()
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data()[0]
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    graph: Graph,
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> &[f64] {
        assert!(self.graph.same_graph(&t.graph), "tensor from another graph");
        &self.grads[t.idx]
    }
}
