//! The layer cascade: taped forwards with feature-map masks, activation
//! taps, and gradient injections for distillation-style objectives.

use crate::layer::{chain_backward, LayerCache, NormMode};
use crate::{Layer, NnError, Real, Result};
use ndarray::{Array2, Array4, ArrayD, ArrayViewD, ArrayViewMutD, Axis, Ix2};

/// A plain cascade of layers.
#[derive(Debug, Clone)]
pub struct Stack<T: Real> {
    pub layers: Vec<Layer<T>>,
}

/// Options for a taped forward pass.
///
/// `masks` are `(layer_index, mask)` pairs, strictly increasing by index;
/// each mask is Hadamard-multiplied onto the output of its layer,
/// broadcast over the batch axis. `taps` request clones of (post-mask)
/// activations at the given layer indices.
pub struct ForwardOpts<'a, T: Real> {
    pub masks: &'a [(usize, &'a ArrayD<T>)],
    pub norm: NormMode,
    pub taps: &'a [usize],
}

impl<T: Real> Default for ForwardOpts<'_, T> {
    fn default() -> Self {
        ForwardOpts {
            masks: &[],
            norm: NormMode::Batch,
            taps: &[],
        }
    }
}

struct MaskTrace<T: Real> {
    layer: usize,
    pre: ArrayD<T>,
    mask: ArrayD<T>,
}

/// Backward state recorded by [`Stack::forward_tape`].
pub struct Tape<T: Real> {
    caches: Vec<LayerCache<T>>,
    masks: Vec<MaskTrace<T>>,
    /// Requested `(layer_index, activation)` clones, in request order.
    pub taps: Vec<(usize, ArrayD<T>)>,
}

/// Gradients produced by one reverse sweep.
pub struct BackwardResult<T: Real> {
    /// Parameter gradients in [`Stack::param_views`] order.
    pub param_grads: Vec<ArrayD<T>>,
    /// Mask gradients aligned with the forward pass's mask list.
    pub mask_grads: Vec<ArrayD<T>>,
    /// Gradient with respect to the input batch.
    pub input_grad: ArrayD<T>,
}

impl<T: Real> Stack<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Stack { layers }
    }

    /// Per-sample output shape, validating the whole cascade.
    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        let mut shape = in_shape.to_vec();
        for layer in &self.layers {
            shape = layer.out_shape(&shape)?;
        }
        Ok(shape)
    }

    /// Per-sample shapes after each layer.
    pub fn shapes(&self, in_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shape = in_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.out_shape(&shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn num_params(&self) -> usize {
        self.param_views().iter().map(|v| v.len()).sum()
    }

    fn validate_masks(&self, masks: &[(usize, &ArrayD<T>)]) -> Result<()> {
        let mut prev: Option<usize> = None;
        for (idx, _) in masks {
            if *idx >= self.layers.len() {
                return Err(NnError::Shape(format!(
                    "mask layer index {idx} out of range (cascade has {} layers)",
                    self.layers.len()
                )));
            }
            if let Some(p) = prev {
                if *idx <= p {
                    return Err(NnError::Shape(
                        "mask layer indices must be strictly increasing".into(),
                    ));
                }
            }
            prev = Some(*idx);
        }
        Ok(())
    }

    /// Evaluation forward (frozen statistics, no tape). Safe for shared use.
    pub fn forward_eval(&self, x: &Array4<T>, masks: &[(usize, &ArrayD<T>)]) -> Array2<T> {
        self.validate_masks(masks).expect("valid mask placement");
        let mut cur = x.clone().into_dyn();
        let mut next_mask = 0usize;
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, _) = layer.forward(&cur, NormMode::Frozen, false);
            cur = y;
            if next_mask < masks.len() && masks[next_mask].0 == i {
                cur = &cur * masks[next_mask].1;
                next_mask += 1;
            }
        }
        cur.into_dimensionality::<Ix2>().expect("logits rank 2")
    }

    /// Taped forward. In [`NormMode::Batch`] the batchnorm running
    /// statistics are updated in place.
    pub fn forward_tape(
        &mut self,
        x: &Array4<T>,
        opts: &ForwardOpts<'_, T>,
    ) -> (Array2<T>, Tape<T>) {
        self.validate_masks(opts.masks).expect("valid mask placement");
        let mut cur = x.clone().into_dyn();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut traces = Vec::with_capacity(opts.masks.len());
        let mut taps = Vec::with_capacity(opts.taps.len());
        let mut next_mask = 0usize;
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = layer.forward(&cur, opts.norm, true);
            caches.push(cache);
            cur = y;
            if next_mask < opts.masks.len() && opts.masks[next_mask].0 == i {
                let mask = opts.masks[next_mask].1;
                traces.push(MaskTrace {
                    layer: i,
                    pre: cur.clone(),
                    mask: mask.clone(),
                });
                cur = &cur * mask;
                next_mask += 1;
            }
            if opts.taps.contains(&i) {
                taps.push((i, cur.clone()));
            }
        }
        if opts.norm == NormMode::Batch {
            for (layer, cache) in self.layers.iter_mut().zip(&caches) {
                layer.absorb_batch_stats(cache);
            }
        }
        let logits = cur.into_dimensionality::<Ix2>().expect("logits rank 2");
        (logits, Tape { caches, masks: traces, taps })
    }

    /// Reverse sweep from `dlogits`. `injections` are extra gradients added
    /// to the (post-mask) activation at the given layer indices, as used by
    /// attention-distillation objectives.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        dlogits: &Array2<T>,
        injections: &[(usize, ArrayD<T>)],
    ) -> BackwardResult<T> {
        let n = self.layers.len();
        let mut per_layer: Vec<Vec<ArrayD<T>>> = Vec::with_capacity(n);
        per_layer.resize_with(n, Vec::new);
        let mut mask_grads: Vec<ArrayD<T>> = tape
            .masks
            .iter()
            .map(|t| ArrayD::zeros(t.mask.raw_dim()))
            .collect();
        let mut grad = dlogits.clone().into_dyn();
        let mut mask_pos = tape.masks.len();
        for i in (0..n).rev() {
            for (at, inj) in injections {
                if *at == i {
                    grad = &grad + inj;
                }
            }
            if mask_pos > 0 && tape.masks[mask_pos - 1].layer == i {
                mask_pos -= 1;
                let trace = &tape.masks[mask_pos];
                // d mask = sum over batch of grad * pre-mask activation
                let prod = &grad * &trace.pre;
                mask_grads[mask_pos] = prod.sum_axis(Axis(0));
                grad = &grad * &trace.mask;
            }
            let (dx, grads) = self.layers[i].backward(&tape.caches[i], &grad);
            per_layer[i] = grads;
            grad = dx;
        }
        BackwardResult {
            param_grads: per_layer.into_iter().flatten().collect(),
            mask_grads,
            input_grad: grad,
        }
    }

    pub fn param_views(&self) -> Vec<ArrayViewD<'_, T>> {
        self.layers.iter().flat_map(|l| l.param_views()).collect()
    }

    pub fn param_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.extend(l.param_views_mut());
        }
        v
    }

    pub fn buffer_views(&self) -> Vec<ArrayViewD<'_, T>> {
        self.layers.iter().flat_map(|l| l.buffer_views()).collect()
    }

    pub fn buffer_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.extend(l.buffer_views_mut());
        }
        v
    }

    /// Names aligned with [`Stack::param_views`].
    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.param_names(&format!("L{i}")))
            .collect()
    }

    /// Names aligned with [`Stack::buffer_views`].
    pub fn buffer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.buffer_names(&format!("L{i}")))
            .collect()
    }

    /// Run the cascade up to and including layer `upto`, returning that
    /// activation (frozen statistics, no masks). Used by channel-dormancy
    /// analyses.
    pub fn activation_at(&self, x: &Array4<T>, upto: usize) -> ArrayD<T> {
        assert!(upto < self.layers.len());
        let mut cur = x.clone().into_dyn();
        for layer in &self.layers[..=upto] {
            let (y, _) = layer.forward(&cur, NormMode::Frozen, false);
            cur = y;
        }
        cur
    }

    pub(crate) fn chain_backward_public(
        layers: &[Layer<T>],
        caches: &[LayerCache<T>],
        dy: &ArrayD<T>,
    ) -> (ArrayD<T>, Vec<ArrayD<T>>) {
        chain_backward(layers, caches, dy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;
    use ndarray::Array1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_stack(seed: u64) -> Stack<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = Layer::Conv2d {
            weight: init::kaiming_normal((4, 2, 3, 3), 18, &mut rng),
            bias: Array1::zeros(4),
            stride: 1,
            padding: 1,
        };
        let lin = Layer::Linear {
            weight: init::kaiming_normal((3, 4), 4, &mut rng),
            bias: Array1::zeros(3),
        };
        Stack::new(vec![conv, Layer::Relu, Layer::GlobalAvgPool, Layer::Flatten, lin])
    }

    #[test]
    fn eval_and_tape_agree_in_frozen_mode() {
        let mut stack = tiny_stack(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Array4<f64> = init::uniform((2, 2, 5, 5), -1.0, 1.0, &mut rng);
        let eval = stack.forward_eval(&x, &[]);
        let opts = ForwardOpts {
            norm: NormMode::Frozen,
            ..Default::default()
        };
        let (taped, _) = stack.forward_tape(&x, &opts);
        assert_eq!(eval, taped);
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let mut stack = tiny_stack(4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x: Array4<f64> = init::uniform((2, 2, 5, 5), -1.0, 1.0, &mut rng);
        let ones = ArrayD::<f64>::ones(ndarray::IxDyn(&[4, 5, 5]));
        let bare = stack.forward_eval(&x, &[]);
        let masked = stack.forward_eval(&x, &[(0, &ones)]);
        assert_eq!(bare, masked);
        let opts = ForwardOpts {
            masks: &[(0, &ones)],
            norm: NormMode::Frozen,
            taps: &[],
        };
        let (taped, _) = stack.forward_tape(&x, &opts);
        assert_eq!(bare, taped);
    }

    #[test]
    fn mask_out_of_range_is_rejected() {
        let stack = tiny_stack(5);
        let ones = ArrayD::<f64>::ones(ndarray::IxDyn(&[4, 5, 5]));
        let x = Array4::<f64>::zeros((1, 2, 5, 5));
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            stack.forward_eval(&x, &[(99, &ones)])
        }));
        assert!(result.is_err());
    }

    #[test]
    fn num_params_counts_all_tensors() {
        let stack = tiny_stack(6);
        // conv: 4*2*3*3 + 4, linear: 3*4 + 3
        assert_eq!(stack.num_params(), 72 + 4 + 12 + 3);
    }
}
