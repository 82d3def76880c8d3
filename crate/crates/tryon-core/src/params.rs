//! Named parameter trees.
//!
//! Model parameters live in plain structs; this module gives them a flat
//! view keyed by hierarchical names (`down.0.res.0.conv1.weight`). The
//! same names drive trainable-set selection, checkpoints, the optimizer,
//! and the parameter audit, so none of those can drift apart.

use std::collections::BTreeMap;

use crate::nn::{Affine, AttnBlockParams, Conv, LinearLayer, ResBlockParams};
use crate::tensor::Tensor;

/// Visit every parameter tensor with its full name.
pub trait ParamWalk: Sized {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));

    /// Rebuild the tree, transforming each leaf.
    fn map(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor) -> Tensor) -> Self;

    /// Flatten into an ordered name -> tensor map.
    fn to_map(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.for_each("", &mut |name, t| {
            out.insert(name.to_string(), t.clone());
        });
        out
    }

    /// Total number of scalar parameters.
    fn param_count(&self) -> u64 {
        let mut n = 0u64;
        self.for_each("", &mut |_, t| n += t.numel() as u64);
        n
    }

    /// All parameter names in traversal order.
    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each("", &mut |name, _| out.push(name.to_string()));
        out
    }
}

pub(crate) fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

impl ParamWalk for Conv {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn map(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor) -> Tensor) -> Self {
        Conv {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }
}

impl ParamWalk for LinearLayer {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn map(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor) -> Tensor) -> Self {
        LinearLayer {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }
}

impl ParamWalk for Affine {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn map(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor) -> Tensor) -> Self {
        Affine {
            gamma: f(&join(prefix, "gamma"), &self.gamma),
            beta: f(&join(prefix, "beta"), &self.beta),
        }
    }
}

impl ParamWalk for ResBlockParams {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norm1.for_each(&join(prefix, "norm1"), f);
        self.conv1.for_each(&join(prefix, "conv1"), f);
        self.temb_proj.for_each(&join(prefix, "temb_proj"), f);
        self.norm2.for_each(&join(prefix, "norm2"), f);
        self.conv2.for_each(&join(prefix, "conv2"), f);
        if let Some(skip) = &self.skip {
            skip.for_each(&join(prefix, "skip"), f);
        }
    }

    fn map(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor) -> Tensor) -> Self {
        ResBlockParams {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            norm1: self.norm1.map(&join(prefix, "norm1"), f),
            conv1: self.conv1.map(&join(prefix, "conv1"), f),
            temb_proj: self.temb_proj.map(&join(prefix, "temb_proj"), f),
            norm2: self.norm2.map(&join(prefix, "norm2"), f),
            conv2: self.conv2.map(&join(prefix, "conv2"), f),
            skip: self.skip.as_ref().map(|s| s.map(&join(prefix, "skip"), f)),
        }
    }
}

impl ParamWalk for AttnBlockParams {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norm.for_each(&join(prefix, "norm"), f);
        f(&join(prefix, "to_q.weight"), &self.to_q);
        f(&join(prefix, "to_k.weight"), &self.to_k);
        f(&join(prefix, "to_v.weight"), &self.to_v);
        f(&join(prefix, "to_out.weight"), &self.to_out_w);
        f(&join(prefix, "to_out.bias"), &self.to_out_b);
        self.norm_ff.for_each(&join(prefix, "norm_ff"), f);
        self.ff_w1.for_each(&join(prefix, "ff.w1"), f);
        self.ff_w2.for_each(&join(prefix, "ff.w2"), f);
    }

    fn map(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor) -> Tensor) -> Self {
        AttnBlockParams {
            channels: self.channels,
            heads: self.heads,
            norm: self.norm.map(&join(prefix, "norm"), f),
            to_q: f(&join(prefix, "to_q.weight"), &self.to_q),
            to_k: f(&join(prefix, "to_k.weight"), &self.to_k),
            to_v: f(&join(prefix, "to_v.weight"), &self.to_v),
            to_out_w: f(&join(prefix, "to_out.weight"), &self.to_out_w),
            to_out_b: f(&join(prefix, "to_out.bias"), &self.to_out_b),
            norm_ff: self.norm_ff.map(&join(prefix, "norm_ff"), f),
            ff_w1: self.ff_w1.map(&join(prefix, "ff.w1"), f),
            ff_w2: self.ff_w2.map(&join(prefix, "ff.w2"), f),
        }
    }
}

impl<T: ParamWalk> ParamWalk for Vec<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, item) in self.iter().enumerate() {
            item.for_each(&join(prefix, &i.to_string()), f);
        }
    }

    fn map(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor) -> Tensor) -> Self {
        self.iter()
            .enumerate()
            .map(|(i, item)| item.map(&join(prefix, &i.to_string()), f))
            .collect()
    }
}
