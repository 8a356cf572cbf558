use ndarray::ArrayD;
use rand::Rng;

use super::params::{ParamId, ParamStore, TapeBinding};
use super::tape::{Tape, Var};
use super::kaiming;

/// 3x3 (or kxk) convolution layer descriptor; parameters live in the store.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(kaiming(rng, &[cout, cin, k, k], cin * k * k));
        let b = store.add(ArrayD::zeros(ndarray::IxDyn(&[cout])));
        Self { w, b, stride, pad }
    }

    /// Zero-initialized variant; the layer starts as the zero map.
    pub fn zeros(store: &mut ParamStore, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        let w = store.add(ArrayD::zeros(ndarray::IxDyn(&[cout, cin, k, k])));
        let b = store.add(ArrayD::zeros(ndarray::IxDyn(&[cout])));
        Self { w, b, stride, pad }
    }

    pub fn apply(&self, tape: &mut Tape, bind: &TapeBinding, x: Var) -> Var {
        let w = bind.var(tape, self.w);
        let b = bind.var(tape, self.b);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Fully-connected layer.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, din: usize, dout: usize) -> Self {
        let w = store.add(kaiming(rng, &[din, dout], din));
        let b = store.add(ArrayD::zeros(ndarray::IxDyn(&[dout])));
        Self { w, b }
    }

    pub fn zeros(store: &mut ParamStore, din: usize, dout: usize) -> Self {
        let w = store.add(ArrayD::zeros(ndarray::IxDyn(&[din, dout])));
        let b = store.add(ArrayD::zeros(ndarray::IxDyn(&[dout])));
        Self { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, bind: &TapeBinding, x: Var) -> Var {
        let w = bind.var(tape, self.w);
        let b = bind.var(tape, self.b);
        let y = tape.matmul(x, w);
        tape.add_axis1(y, b)
    }
}

/// Five-layer dense block: each 3x3 conv sees the concatenation of the input
/// and all previous growth maps, followed by a 1x1 projection.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub convs: Vec<Conv2d>,
    pub proj: Conv2d,
}

impl DenseBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        cin: usize,
        growth: usize,
        layers: usize,
        cout: usize,
    ) -> Self {
        let mut convs = Vec::with_capacity(layers);
        let mut ch = cin;
        for _ in 0..layers {
            convs.push(Conv2d::new(store, rng, ch, growth, 3, 1, 1));
            ch += growth;
        }
        let proj = Conv2d::new(store, rng, ch, cout, 1, 1, 0);
        Self { convs, proj }
    }

    pub fn apply(&self, tape: &mut Tape, bind: &TapeBinding, x: Var) -> Var {
        let mut feats = vec![x];
        for conv in &self.convs {
            let cat = if feats.len() == 1 { feats[0] } else { tape.concat_axis1(&feats) };
            let y = conv.apply(tape, bind, cat);
            let y = tape.leaky_relu(y, 0.2);
            feats.push(y);
        }
        let cat = tape.concat_axis1(&feats);
        self.proj.apply(tape, bind, cat)
    }
}
