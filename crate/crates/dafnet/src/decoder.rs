//! Progressive top-down decoder: feature fusion (up-sample, 1x1 channel
//! alignment, point-wise add), bottleneck convolution blocks, and
//! mask/edge prediction heads at the three finest stages. The two
//! coarsest decoding levels carry no heads.

use crate::error::{Error, Result};
use crate::nn::{conv2d, upsample_bilinear};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Number of supervised decoder stages (1 = full resolution).
pub const SUPERVISED_STAGES: usize = 3;

pub struct Decoder {
    /// 1x1 fuse convs for stages 4..1 (deep channel count -> shallow).
    ff: Vec<(usize, usize)>,
    /// Bottleneck blocks for stages 4..1: C -> C/2 -> C, rectified.
    cb: Vec<[(usize, usize); 2]>,
    /// (mask, edge) heads for stages 3, 2, 1.
    heads: Vec<[(usize, usize); 2]>,
}

pub struct DecodedVars {
    /// Saliency maps for stages 1..3 (full, half, quarter resolution).
    pub masks: Vec<Var>,
    /// Edge maps at the same stages.
    pub edges: Vec<Var>,
}

impl Decoder {
    /// `enhanced_channels` are the encoder's per-stage output widths.
    pub fn new(enhanced_channels: [usize; 5], specs: &mut Vec<ParamSpec>) -> Decoder {
        let conv = |specs: &mut Vec<ParamSpec>, name: String, c_out: usize, c_in: usize, k: usize| {
            specs.push(ParamSpec::new(
                format!("{name}.weight"),
                &[c_out, c_in, k, k],
                Init::Xavier {
                    fan_in: c_in * k * k,
                    fan_out: c_out * k * k,
                },
            ));
            specs.push(ParamSpec::new(
                format!("{name}.bias"),
                &[c_out],
                Init::Zeros,
            ));
            (specs.len() - 2, specs.len() - 1)
        };

        let mut ff = Vec::new();
        let mut cb = Vec::new();
        let mut deep_c = enhanced_channels[4];
        for s in (1..=4).rev() {
            let shallow_c = enhanced_channels[s - 1];
            ff.push(conv(specs, format!("decoder.ff{s}"), shallow_c, deep_c, 1));
            let hidden = (shallow_c / 2).max(1);
            cb.push([
                conv(
                    specs,
                    format!("decoder.cb{s}.conv1"),
                    hidden,
                    shallow_c,
                    3,
                ),
                conv(
                    specs,
                    format!("decoder.cb{s}.conv2"),
                    shallow_c,
                    hidden,
                    3,
                ),
            ]);
            deep_c = shallow_c;
        }
        let mut heads = Vec::new();
        for s in (1..=SUPERVISED_STAGES).rev() {
            let c = enhanced_channels[s - 1];
            heads.push([
                conv(specs, format!("decoder.head{s}.mask"), 1, c, 3),
                conv(specs, format!("decoder.head{s}.edge"), 1, c, 3),
            ]);
        }
        Decoder { ff, cb, heads }
    }

    /// Up-sample the deep feature to the shallow grid, align channels with
    /// a 1x1 convolution and add.
    pub fn feature_fuse<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        stage: usize,
        deep: Var,
        shallow: Var,
    ) -> Result<Var> {
        let sd: Vec<usize> = tape.shape(deep).to_vec();
        let ss: Vec<usize> = tape.shape(shallow).to_vec();
        if sd[1] != (ss[1] / 2).max(1) || sd[2] != (ss[2] / 2).max(1) {
            return Err(Error::shape(
                "feature_fuse",
                format!(
                    "deep {}x{} is not half of shallow {}x{}",
                    sd[1], sd[2], ss[1], ss[2]
                ),
            ));
        }
        let (w, b) = self.ff[4 - stage];
        let up = upsample_bilinear(tape, deep, ss[1], ss[2]);
        let w = tape.param(store, w);
        let b = tape.param(store, b);
        let aligned = conv2d(tape, up, w, b);
        if tape.shape(aligned) != tape.shape(shallow) {
            return Err(Error::shape(
                "feature_fuse",
                format!(
                    "aligned deep {:?} vs shallow {:?}",
                    tape.shape(aligned),
                    tape.shape(shallow)
                ),
            ));
        }
        Ok(tape.add(aligned, shallow))
    }

    /// Two rectified 3x3 convolutions that halve then restore the width.
    pub fn conv_block<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        stage: usize,
        x: Var,
    ) -> Var {
        let [c1, c2] = self.cb[4 - stage];
        let w1 = tape.param(store, c1.0);
        let b1 = tape.param(store, c1.1);
        let y = conv2d(tape, x, w1, b1);
        let y = tape.relu(y);
        let w2 = tape.param(store, c2.0);
        let b2 = tape.param(store, c2.1);
        let y = conv2d(tape, y, w2, b2);
        tape.relu(y)
    }

    /// Independent 3x3 mask and edge heads, each sigmoid-squashed.
    pub fn predict_heads<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        stage: usize,
        x: Var,
    ) -> (Var, Var) {
        let [mask, edge] = self.heads[SUPERVISED_STAGES - stage];
        let mw = tape.param(store, mask.0);
        let mb = tape.param(store, mask.1);
        let m = conv2d(tape, x, mw, mb);
        let m = tape.sigmoid(m);
        let ew = tape.param(store, edge.0);
        let eb = tape.param(store, edge.1);
        let e = conv2d(tape, x, ew, eb);
        let e = tape.sigmoid(e);
        (m, e)
    }

    /// Walk from stage 5 down to 1, fusing and refining; emit predictions
    /// at stages 3, 2 and 1 (finest first in the result).
    pub fn decode<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        enhanced: &[Var],
    ) -> Result<DecodedVars> {
        if enhanced.len() != 5 {
            return Err(Error::shape(
                "decode",
                format!("expected 5 enhanced features, got {}", enhanced.len()),
            ));
        }
        let mut x = enhanced[4];
        let mut masks = Vec::with_capacity(SUPERVISED_STAGES);
        let mut edges = Vec::with_capacity(SUPERVISED_STAGES);
        for s in (1..=4).rev() {
            let fused = self.feature_fuse(tape, store, s, x, enhanced[s - 1])?;
            x = self.conv_block(tape, store, s, fused);
            if s <= SUPERVISED_STAGES {
                let (m, e) = self.predict_heads(tape, store, s, x);
                masks.push(m);
                edges.push(e);
            }
        }
        masks.reverse();
        edges.reverse();
        Ok(DecodedVars { masks, edges })
    }
}
