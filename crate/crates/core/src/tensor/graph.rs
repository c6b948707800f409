use std::collections::HashMap;

use super::conv::ConvGeometry;
use super::{Float, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Forward-pass behaviour of batch norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<F> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<F>,
    pub(crate) op: Op<F>,
    pub(crate) needs_grad: bool,
}

/// A recorded primitive together with whatever its backward rule needs.
pub(crate) enum Op<F> {
    Leaf {
        param: Option<ParamId>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddRow(Var, Var),
    Relu(Var),
    LeakyRelu(Var, F),
    Elu(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        fan_in: usize,
        fan_out: usize,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanTrailing {
        x: Var,
        span: usize,
    },
    MaskedTimeMean {
        x: Var,
        lengths: Vec<usize>,
    },
    Softmax(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        layout: NormLayout,
        batch_stats: bool,
    },
    OuterAdd {
        a: Var,
        b: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
}

/// How normalization statistics group elements: `outer × channels × inner`
/// with one statistic per channel (batch norm) or per row (layer norm).
#[derive(Debug, Clone, Copy)]
pub(crate) enum NormLayout {
    /// `[N, C, S]`, statistics per channel over `N·S` values.
    Channel { outer: usize, channels: usize, inner: usize },
    /// `[R, D]`, statistics per row over `D` values.
    Row { rows: usize, width: usize },
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients<F> {
    params: Vec<(ParamId, Vec<F>)>,
    inputs: HashMap<usize, Vec<F>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of a parameter, if the loss depends on it.
    pub fn param(&self, id: ParamId) -> Option<&[F]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.params.iter().map(|(p, g)| (*p, g.as_slice()))
    }

    /// Gradient of an input leaf created with `requires_grad = true`.
    pub fn input(&self, var: Var) -> Option<&[F]> {
        self.inputs.get(&var.0).map(Vec::as_slice)
    }
}

/// One forward pass worth of recorded computation.
///
/// A graph supports exactly one call to [`Graph::backward`]; build a fresh
/// graph for the next step.
pub struct Graph<F> {
    pub(crate) nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    mode: Mode,
    pub(crate) rng: Rng,
    consumed: bool,
}

impl<F: Float> Graph<F> {
    pub fn new(mode: Mode) -> Self {
        Self::with_seed(mode, 0)
    }

    /// `seed` drives dropout masks.
    pub fn with_seed(mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            mode,
            rng: rng::stream(seed, "dropout"),
            consumed: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf { param: None }, false)
    }

    /// An input leaf. Its gradient is reported in [`Gradients::input`] when
    /// `requires_grad` is set.
    pub fn input(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf { param: None }, requires_grad)
    }

    /// Brings a stored parameter onto the graph, once per graph.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: Some(id) },
            t.requires_grad(),
        );
        self.params.insert(id, v);
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("recorded shapes are consistent")
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Fails on a non-scalar loss, and on any second call for the same graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::State(
                "backward already ran on this graph; rebuild the forward pass".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut out = Gradients {
            params: Vec::new(),
            inputs: HashMap::new(),
        };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf { param: Some(id) } => out.params.push((*id, g)),
                Op::Leaf { param: None } => {
                    out.inputs.insert(i, g);
                }
                _ => self.backward_node(i, &g, &mut grads),
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    /// Adds `delta` into the pending gradient of `v` if it participates.
    pub(crate) fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, delta: Vec<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }
}
