use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::tsp::TspInstance;

use super::NODE_FEATURES;

/// Encoder input for one node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeInput {
    pub x: f64,
    pub y: f64,
    pub is_current: bool,
    pub is_terminal: bool,
    pub is_visited: bool,
}

impl NodeInput {
    pub fn features(&self) -> [f64; NODE_FEATURES] {
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        [self.x, self.y, flag(self.is_current), flag(self.is_terminal), flag(self.is_visited)]
    }
}

/// Encoder input matrix (`n × 5`) for the initial state: all flags zero.
pub fn node_inputs(instance: &TspInstance) -> Tensor {
    let data = instance
        .coords
        .iter()
        .flat_map(|&[x, y]| {
            NodeInput { x, y, is_current: false, is_terminal: false, is_visited: false }.features()
        })
        .collect();
    Tensor::matrix(instance.n, NODE_FEATURES, data).expect("n x 5 inputs")
}

/// Partial tour under construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderState {
    visited: Vec<bool>,
    current: Option<usize>,
    order: Vec<usize>,
}

impl DecoderState {
    pub fn new(n: usize) -> Self {
        DecoderState { visited: vec![false; n], current: None, order: Vec::with_capacity(n) }
    }

    pub fn n(&self) -> usize {
        self.visited.len()
    }

    pub fn current(&self) -> Option<usize> {
        self.current
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn visited(&self) -> &[bool] {
        &self.visited
    }

    /// `true` for nodes that may still be selected.
    pub fn selectable(&self) -> Vec<bool> {
        self.visited.iter().map(|v| !v).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.order.len() == self.visited.len()
    }

    pub fn visit(&mut self, node: usize) -> Result<()> {
        match self.visited.get(node) {
            None => Err(Error::Parameter(format!("node {node} out of {}", self.n()))),
            Some(true) => Err(Error::Contract(format!("node {node} already visited"))),
            Some(false) => {
                self.visited[node] = true;
                self.current = Some(node);
                self.order.push(node);
                Ok(())
            }
        }
    }

    /// Encoder-style flags for the current state. The terminal flag marks the
    /// first node of the partial tour, where the cycle closes.
    pub fn node_inputs(&self, instance: &TspInstance) -> Vec<NodeInput> {
        instance
            .coords
            .iter()
            .enumerate()
            .map(|(i, &[x, y])| NodeInput {
                x,
                y,
                is_current: self.current == Some(i),
                is_terminal: self.order.first() == Some(&i),
                is_visited: self.visited[i],
            })
            .collect()
    }
}
