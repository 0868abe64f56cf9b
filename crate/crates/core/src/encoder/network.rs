//! Layered network with explicit forward and backward passes.
//!
//! Parameters live in one flat buffer, laid out layer by layer as
//! `weights, biases`. Gradients use the same layout, which keeps the
//! optimizer and the checkpoint format trivial.

use rand_distr::{Distribution, Normal};

use super::real::Real;
use super::spec::{LayerSpec, NetworkSpec, Shape};
use crate::error::{Error, Result};
use crate::seed;

/// Norms at or below this are rejected by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Real> {
    spec: NetworkSpec,
    shapes: Vec<Shape>,
    offsets: Vec<usize>,
    params: Vec<T>,
    init_seed: u64,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    /// `activations[0]` is the input, `activations[i + 1]` the output of
    /// layer `i`.
    activations: Vec<Vec<T>>,
    argmax: Vec<Vec<u32>>,
    norms: Vec<T>,
}

impl<T: Real> Trace<T> {
    pub fn output(&self) -> &[T] {
        self.activations.last().expect("trace has an input")
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Eight independent partial sums let the compiler vectorize without
    // reassociating; the order is fixed, so results stay reproducible.
    let mut acc = [T::ZERO; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// `v / ‖v‖`, refusing near-zero vectors.
pub fn l2_normalize<T: Real>(v: &[T]) -> Result<Vec<T>> {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if !(norm.to_f64() > NORM_EPS) {
        return Err(Error::Normalization(norm.to_f64()));
    }
    Ok(v.iter().map(|&x| x / norm).collect())
}

/// Applies the normalization Jacobian `(I − ê êᵀ) / ‖v‖` to `upstream`,
/// given the normalized output `unit` and the input norm.
pub fn l2_normalize_backward<T: Real>(unit: &[T], norm: T, upstream: &[T]) -> Vec<T> {
    let along = dot(unit, upstream);
    unit.iter()
        .zip(upstream)
        .map(|(&e, &g)| (g - e * along) / norm)
        .collect()
}

/// Output-column range `[lo, hi)` whose receptive taps at kernel offset
/// `k` land inside an input of width `len`.
#[inline]
fn valid_range(len: usize, out_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k {
        ((len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

struct ConvGeom {
    ic: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(layer: &LayerSpec, input: Shape, output: Shape) -> Self {
        let LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } = *layer
        else {
            unreachable!("not a conv layer")
        };
        Self {
            ic: in_channels,
            oc: out_channels,
            kh: kernel_h,
            kw: kernel_w,
            stride,
            pad: padding,
            ih: input[1],
            iw: input[2],
            oh: output[1],
            ow: output[2],
        }
    }

    /// Calls `f(weight_index, input_row_offset, output_row_offset, len)` for
    /// every contiguous run of taps, with input stride `stride`.
    #[inline]
    fn for_each_run(&self, o: usize, i: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        for ky in 0..self.kh {
            let (oy_lo, oy_hi) = valid_range(self.ih, self.oh, ky, self.stride, self.pad);
            for kx in 0..self.kw {
                let widx = ((o * self.ic + i) * self.kh + ky) * self.kw + kx;
                let (ox_lo, ox_hi) = valid_range(self.iw, self.ow, kx, self.stride, self.pad);
                if ox_hi <= ox_lo {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * self.stride + ky - self.pad;
                    let ix = ox_lo * self.stride + kx - self.pad;
                    f(
                        widx,
                        (i * self.ih + iy) * self.iw + ix,
                        (o * self.oh + oy) * self.ow + ox_lo,
                        ox_hi - ox_lo,
                    );
                }
            }
        }
    }
}

fn conv_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: &[T], out: &mut [T]) {
    let plane = g.oh * g.ow;
    for o in 0..g.oc {
        out[o * plane..(o + 1) * plane].fill(b[o]);
        for i in 0..g.ic {
            g.for_each_run(o, i, |widx, xi, yi, n| {
                let wv = w[widx];
                if g.stride == 1 {
                    axpy(wv, &x[xi..xi + n], &mut out[yi..yi + n]);
                } else {
                    for t in 0..n {
                        out[yi + t] += wv * x[xi + t * g.stride];
                    }
                }
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    let plane = g.oh * g.ow;
    for o in 0..g.oc {
        db[o] += dy[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
        for i in 0..g.ic {
            g.for_each_run(o, i, |widx, xi, yi, n| {
                let grad = &dy[yi..yi + n];
                if g.stride == 1 {
                    dw[widx] += dot(&x[xi..xi + n], grad);
                    if let Some(dx) = dx.as_deref_mut() {
                        axpy(w[widx], grad, &mut dx[xi..xi + n]);
                    }
                } else {
                    for t in 0..n {
                        dw[widx] += x[xi + t * g.stride] * grad[t];
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[xi + t * g.stride] += w[widx] * grad[t];
                        }
                    }
                }
            });
        }
    }
}

impl<T: Real> Network<T> {
    /// He-style initialization: weights ~ N(0, 2 / fan_in), biases 0.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec, seed)?;
        let mut rng = seed::rng(seed);
        for (li, layer) in net.spec.layers.iter().enumerate() {
            let (nw, _) = layer.param_counts();
            if nw == 0 {
                continue;
            }
            let std = (2.0 / layer.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let start = net.offsets[li];
            for p in &mut net.params[start..start + nw] {
                *p = T::from_f64(normal.sample(&mut rng));
            }
        }
        Ok(net)
    }

    fn zeros(spec: NetworkSpec, init_seed: u64) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.shapes()?;
        let mut offsets = Vec::with_capacity(spec.layers.len());
        let mut total = 0;
        for layer in &spec.layers {
            offsets.push(total);
            let (w, b) = layer.param_counts();
            total += w + b;
        }
        Ok(Self {
            spec,
            shapes,
            offsets,
            params: vec![T::ZERO; total],
            init_seed,
        })
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<T>, init_seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec, init_seed)?;
        if params.len() != net.params.len() {
            return Err(Error::Spec(format!(
                "{} parameters supplied, spec needs {}",
                params.len(),
                net.params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("network parameters".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn input_shape(&self) -> Shape {
        self.spec.input
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().map(|s| s[0]).unwrap_or(0)
    }

    /// Parameter range `(weights, biases)` of layer `li`.
    pub fn layer_params(&self, li: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (w, b) = self.spec.layers[li].param_counts();
        let s = self.offsets[li];
        (s..s + w, s + w..s + w + b)
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            shapes: self.shapes.clone(),
            offsets: self.offsets.clone(),
            params: self.params.iter().map(|&p| U::from_f64(p.to_f64())).collect(),
            init_seed: self.init_seed,
        }
    }

    fn input_of(&self, li: usize) -> Shape {
        if li == 0 {
            self.spec.input
        } else {
            self.shapes[li - 1]
        }
    }

    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        let mut trace = self.forward_trace(input)?;
        Ok(trace.activations.pop().expect("non-empty trace"))
    }

    pub fn forward_trace(&self, input: &[T]) -> Result<Trace<T>> {
        let expected = self.spec.input.iter().product::<usize>();
        if input.len() != expected {
            return Err(Error::Shape(format!(
                "input has {} values, network expects {:?}",
                input.len(),
                self.spec.input
            )));
        }
        let mut activations = Vec::with_capacity(self.spec.layers.len() + 1);
        activations.push(input.to_vec());
        let mut argmax = Vec::new();
        let mut norms = Vec::new();
        for (li, layer) in self.spec.layers.iter().enumerate() {
            let x = activations.last().unwrap();
            let in_shape = self.input_of(li);
            let out_shape = self.shapes[li];
            let (wr, br) = self.layer_params(li);
            let out = match *layer {
                LayerSpec::Conv { .. } => {
                    let g = ConvGeom::new(layer, in_shape, out_shape);
                    let mut out = vec![T::ZERO; out_shape.iter().product()];
                    conv_forward(&g, x, &self.params[wr], &self.params[br], &mut out);
                    out
                }
                LayerSpec::Relu => x
                    .iter()
                    .map(|&v| if v > T::ZERO { v } else { T::ZERO })
                    .collect(),
                LayerSpec::MaxPool => {
                    let [c, ih, iw] = in_shape;
                    let [_, oh, ow] = out_shape;
                    let mut out = Vec::with_capacity(c * oh * ow);
                    let mut idx = Vec::with_capacity(c * oh * ow);
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = (ch * ih + 2 * oy) * iw + 2 * ox;
                                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                    let k = (ch * ih + 2 * oy + dy) * iw + 2 * ox + dx;
                                    if x[k] > x[best] {
                                        best = k;
                                    }
                                }
                                out.push(x[best]);
                                idx.push(best as u32);
                            }
                        }
                    }
                    argmax.push(idx);
                    out
                }
                LayerSpec::Fc { inputs, outputs } => {
                    let w = &self.params[wr];
                    let b = &self.params[br];
                    (0..outputs)
                        .map(|o| b[o] + dot(&w[o * inputs..(o + 1) * inputs], x))
                        .collect()
                }
                LayerSpec::L2Norm => {
                    let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if !norm.is_finite() {
                        return Err(Error::Numeric(format!("activation of layer {li}")));
                    }
                    if !(norm.to_f64() > NORM_EPS) {
                        return Err(Error::Normalization(norm.to_f64()));
                    }
                    norms.push(norm);
                    x.iter().map(|&v| v / norm).collect()
                }
            };
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("activation of layer {li}")));
            }
            activations.push(out);
        }
        Ok(Trace {
            activations,
            argmax,
            norms,
        })
    }

    /// Accumulates `∂⟨output, upstream⟩/∂θ` into `grads` (same layout as
    /// the parameters). No finiteness check; see [`Network::backward`].
    pub fn backward_into(&self, trace: &Trace<T>, upstream: &[T], grads: &mut [T]) -> Result<()> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream gradient has {} entries, output has {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        if grads.len() != self.params.len() {
            return Err(Error::Shape("gradient buffer size".into()));
        }
        let mut dy = upstream.to_vec();
        let mut pool_k = trace.argmax.len();
        let mut norm_k = trace.norms.len();
        for li in (0..self.spec.layers.len()).rev() {
            let layer = &self.spec.layers[li];
            let x = &trace.activations[li];
            let y = &trace.activations[li + 1];
            let (wr, br) = self.layer_params(li);
            let need_dx = li > 0;
            let dx = match *layer {
                LayerSpec::Conv { .. } => {
                    let g = ConvGeom::new(layer, self.input_of(li), self.shapes[li]);
                    let (dw, db) = grads[wr.start..br.end].split_at_mut(wr.len());
                    let mut dx = if need_dx { vec![T::ZERO; x.len()] } else { Vec::new() };
                    conv_backward(
                        &g,
                        x,
                        &self.params[wr.clone()],
                        &dy,
                        dw,
                        db,
                        need_dx.then_some(dx.as_mut_slice()),
                    );
                    dx
                }
                LayerSpec::Relu => dy
                    .iter()
                    .zip(y)
                    .map(|(&g, &v)| if v > T::ZERO { g } else { T::ZERO })
                    .collect(),
                LayerSpec::MaxPool => {
                    pool_k -= 1;
                    let mut dx = vec![T::ZERO; x.len()];
                    for (&k, &g) in trace.argmax[pool_k].iter().zip(&dy) {
                        dx[k as usize] += g;
                    }
                    dx
                }
                LayerSpec::Fc { inputs, outputs } => {
                    let (dw, db) = grads[wr.start..br.end].split_at_mut(wr.len());
                    let w = &self.params[wr.clone()];
                    let mut dx = if need_dx { vec![T::ZERO; inputs] } else { Vec::new() };
                    for o in 0..outputs {
                        let g = dy[o];
                        db[o] += g;
                        axpy(g, x, &mut dw[o * inputs..(o + 1) * inputs]);
                        if need_dx {
                            axpy(g, &w[o * inputs..(o + 1) * inputs], &mut dx);
                        }
                    }
                    dx
                }
                LayerSpec::L2Norm => {
                    norm_k -= 1;
                    l2_normalize_backward(y, trace.norms[norm_k], &dy)
                }
            };
            dy = dx;
        }
        Ok(())
    }

    /// Fresh gradient of `⟨output, upstream⟩` with respect to every
    /// parameter.
    pub fn backward(&self, trace: &Trace<T>, upstream: &[T]) -> Result<Vec<T>> {
        let mut grads = vec![T::ZERO; self.params.len()];
        self.backward_into(trace, upstream, &mut grads)?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("parameter gradient".into()));
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_spec() -> NetworkSpec {
        NetworkSpec {
            input: [1, 8, 8],
            layers: vec![
                LayerSpec::conv3x3(1, 4),
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                LayerSpec::Conv {
                    in_channels: 4,
                    out_channels: 4,
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                LayerSpec::Fc {
                    inputs: 4,
                    outputs: 24,
                },
                LayerSpec::Relu,
                LayerSpec::Fc {
                    inputs: 24,
                    outputs: 16,
                },
                LayerSpec::L2Norm,
                LayerSpec::Fc {
                    inputs: 16,
                    outputs: 16,
                },
                LayerSpec::L2Norm,
            ],
        }
    }

    fn input(n: usize, phase: f64) -> Vec<f64> {
        (0..n).map(|i| 0.5 + 0.45 * ((i as f64) * 0.7 + phase).sin()).collect()
    }

    #[test]
    fn l2_normalize_cases() {
        assert_eq!(l2_normalize(&[3.0f64, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0f64, 1.0]).unwrap(), vec![0.0, 1.0]);
        assert!(matches!(l2_normalize(&[0.0f64, 0.0]), Err(Error::Normalization(_))));
    }

    #[test]
    fn normalization_jacobian_kills_radial_direction() {
        let unit = l2_normalize(&[1.0f64, -2.0, 0.5]).unwrap();
        let g = l2_normalize_backward(&unit, 3.7, &unit);
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = Network::<f32>::init(toy_spec(), 3).unwrap();
        let b = Network::<f32>::init(toy_spec(), 3).unwrap();
        assert_eq!(a, b);
        let c = Network::<f32>::init(toy_spec(), 4).unwrap();
        assert_ne!(a.params(), c.params());
        for li in 0..a.spec().layers.len() {
            let (_, br) = a.layer_params(li);
            assert!(a.params()[br].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn he_variance_for_3x3_kernels() {
        let spec = NetworkSpec {
            input: [1, 3, 3],
            layers: vec![
                LayerSpec::Conv {
                    in_channels: 1,
                    out_channels: 1200,
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Fc {
                    inputs: 1200,
                    outputs: 2,
                },
                LayerSpec::L2Norm,
            ],
        };
        let net = Network::<f64>::init(spec, 17).unwrap();
        let (wr, _) = net.layer_params(0);
        let w = &net.params()[wr];
        assert!(w.len() >= 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let expected = 2.0 / 9.0;
        assert!((var - expected).abs() / expected < 0.2, "variance {var}");
    }

    #[test]
    fn hand_set_single_fc() {
        // y = W x + b with x = (0.2, 0.6), W = [[1, 2], [3, -1]], b = (0.1, 0.3)
        // -> (1.5, 0.3), normalized by sqrt(2.34).
        let spec = NetworkSpec {
            input: [1, 1, 2],
            layers: vec![LayerSpec::Fc { inputs: 2, outputs: 2 }, LayerSpec::L2Norm],
        };
        let net = Network::from_params(spec, vec![1.0, 2.0, 3.0, -1.0, 0.1, 0.3], 0).unwrap();
        let out: Vec<f64> = net.forward(&[0.2, 0.6]).unwrap();
        let n = (1.5f64 * 1.5 + 0.3 * 0.3).sqrt();
        assert!((out[0] - 1.5 / n).abs() < 1e-15);
        assert!((out[1] - 0.3 / n).abs() < 1e-15);
    }

    #[test]
    fn forward_is_pure_and_unit_norm() {
        let net = Network::<f32>::init(toy_spec(), 5).unwrap();
        let x: Vec<f32> = input(64, 0.3).iter().map(|&v| v as f32).collect();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a, b);
        let norm = a.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-5);
        assert!(matches!(net.forward(&x[..10]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = Network::<f64>::init(toy_spec(), 5).unwrap();
        let trace = net.forward_trace(&input(64, 0.1)).unwrap();
        let g = net.backward(&trace, &[0.0; 16]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = Network::<f32>::init(toy_spec(), 9).unwrap().cast::<f64>();
        assert!(net.params().len() >= 500);
        let x = input(64, 1.1);
        let upstream: Vec<f64> = (0..16).map(|i| ((i * 5 % 7) as f64 - 3.0) / 3.0).collect();
        let trace = net.forward_trace(&x).unwrap();
        let grads = net.backward(&trace, &upstream).unwrap();
        let objective = |n: &Network<f64>| -> f64 {
            let y = n.forward(&x).unwrap();
            y.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let h = 1e-3;
        let mut worst = 0.0f64;
        for p in 0..net.params().len() {
            let mut plus = net.clone();
            plus.params_mut()[p] += h;
            let mut minus = net.clone();
            minus.params_mut()[p] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let rel = (fd - grads[p]).abs() / fd.abs().max(grads[p].abs()).max(1e-4);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }
}
