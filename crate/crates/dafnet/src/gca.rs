//! Global context-aware attention: global feature aggregation with a
//! residual fuse and channel recalibration, followed by cascaded pyramid
//! spatial attention.
//!
//! Flattening of the `H x W` sites into `P = H * W` positions is row-major
//! throughout, so correlation and context maps are reproducible.

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::nn::{conv2d, maxpool2, upsample_bilinear};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{l2norm_sites_kernel, softmax_cols_kernel, Tape, Var};

// ---- array-level operations (the math without learned state) -------------

/// Per-site L2 normalization of channel vectors; all-zero vectors stay zero.
pub fn channel_normalize<F: Scalar>(f: &Array3<F>) -> Array3<F> {
    l2norm_sites_kernel(&f.view())
}

/// Pairwise dot products between channel vectors of every pair of sites.
/// On channel-normalized input this is cosine similarity, symmetric with
/// entries in [-1, 1].
pub fn spatial_correlation<F: Scalar>(ft: &Array3<F>) -> Array2<F> {
    let (c, h, w) = ft.dim();
    let p = h * w;
    let m = ft
        .view()
        .into_shape_with_order((c, p))
        .expect("feature maps are contiguous");
    m.t().dot(&m)
}

/// Column softmax of the correlation map: entry (i, j) is the relative
/// impact of site i on site j; every column sums to 1.
pub fn global_context_map<F: Scalar>(c: &Array2<F>) -> Array2<F> {
    assert_eq!(c.nrows(), c.ncols(), "context map expects a square input");
    softmax_cols_kernel(&c.view())
}

/// Weighted aggregation: output channel vector at site j is the
/// context-weighted sum over all sites i of `ft`'s channel vectors.
pub fn aggregate_global<F: Scalar>(ft: &Array3<F>, w: &Array2<F>) -> Result<Array3<F>> {
    let (c, h, wdt) = ft.dim();
    let p = h * wdt;
    if w.nrows() != p || w.ncols() != p {
        return Err(Error::shape(
            "aggregate_global",
            format!("context map is {:?}, feature has P = {p}", w.dim()),
        ));
    }
    let m = ft
        .view()
        .into_shape_with_order((c, p))
        .expect("feature maps are contiguous");
    let g = m.dot(w);
    Ok(g.into_shape_with_order((c, h, wdt)).unwrap())
}

/// Residual fuse `F = f + delta * (f .* g)`. With `delta == 0` this is the
/// identity and returns `f` unchanged.
pub fn residual_fuse<F: Scalar>(f: &Array3<F>, g: &Array3<F>, delta: F) -> Result<Array3<F>> {
    if f.dim() != g.dim() {
        return Err(Error::shape(
            "residual_fuse",
            format!("{:?} vs {:?}", f.dim(), g.dim()),
        ));
    }
    if delta == F::zero() {
        return Ok(f.clone());
    }
    let mut out = f.clone();
    ndarray::Zip::from(&mut out).and(g).for_each(|o, &gv| {
        *o = *o + delta * *o * gv;
    });
    Ok(out)
}

// ---- tape-level building blocks ------------------------------------------

/// Spatial attention over a feature map: channel mean and max are stacked
/// into a 2-channel descriptor, convolved to one channel and squashed.
pub fn spatial_attention_op<F: Scalar>(tape: &mut Tape<F>, x: Var, w: Var, b: Var) -> Var {
    let avg = tape.mean_channels(x);
    let mx = tape.max_channels(x);
    let omega = tape.concat_ch(&[avg, mx]);
    let conv = conv2d(tape, omega, w, b);
    tape.sigmoid(conv)
}

// ---- the GCA unit ---------------------------------------------------------

#[derive(Clone, Debug)]
pub struct GcaConfig {
    /// 1-based stage index, used only for parameter naming.
    pub stage: usize,
    pub channels: usize,
    pub use_gfa: bool,
    pub use_cpa: bool,
    pub delta_init: f64,
    /// Bottleneck reduction ratio of the recalibration block.
    pub reduction: usize,
}

/// Attention kernel size at pyramid level 0 (and for the single-scale
/// fallback when the cascade is disabled); levels 1-2 use 3x3.
const ATT_KERNEL_FULL: usize = 7;
const ATT_KERNEL_COARSE: usize = 3;

pub struct GcaUnit {
    pub channels: usize,
    pub squeezed: usize,
    use_gfa: bool,
    use_cpa: bool,
    delta: Option<usize>,
    fc1: Option<(usize, usize)>,
    fc2: Option<(usize, usize)>,
    /// 1x1 channel-squeeze convs, one per pyramid level (single entry when
    /// the cascade is disabled).
    squeeze: Vec<(usize, usize)>,
    /// Spatial attention convs per level; unshared because each level sees
    /// a different mix of features.
    att: Vec<(usize, usize)>,
}

pub struct GcaOut {
    /// Full-resolution attention map `[1, h, w]` (before any fluid update).
    pub attention: Var,
    /// Attention-weighted level-1 feature; absent when the cascade is off.
    pub f_out1: Option<Var>,
    /// Level-0 squeezed feature.
    pub f_d0: Var,
}

impl GcaUnit {
    pub fn new(cfg: &GcaConfig, specs: &mut Vec<ParamSpec>) -> GcaUnit {
        let s = cfg.stage;
        let c = cfg.channels;
        let squeezed = (c / 3).max(1);
        let push = |specs: &mut Vec<ParamSpec>, name: String, shape: &[usize], init: Init| {
            specs.push(ParamSpec::new(name, shape, init));
            specs.len() - 1
        };
        let conv_spec = |specs: &mut Vec<ParamSpec>,
                         name: String,
                         c_out: usize,
                         c_in: usize,
                         k: usize|
         -> (usize, usize) {
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

        let (delta, fc1, fc2) = if cfg.use_gfa {
            let delta = push(
                specs,
                format!("gca.{s}.delta"),
                &[],
                Init::Const(cfg.delta_init),
            );
            let hidden = (c / cfg.reduction).max(1);
            let fc1_w = push(
                specs,
                format!("gca.{s}.recalib.fc1.weight"),
                &[hidden, c],
                Init::Xavier {
                    fan_in: c,
                    fan_out: hidden,
                },
            );
            let fc1_b = push(
                specs,
                format!("gca.{s}.recalib.fc1.bias"),
                &[hidden],
                Init::Zeros,
            );
            let fc2_w = push(
                specs,
                format!("gca.{s}.recalib.fc2.weight"),
                &[c, hidden],
                Init::Xavier {
                    fan_in: hidden,
                    fan_out: c,
                },
            );
            let fc2_b = push(
                specs,
                format!("gca.{s}.recalib.fc2.bias"),
                &[c],
                Init::Zeros,
            );
            (Some(delta), Some((fc1_w, fc1_b)), Some((fc2_w, fc2_b)))
        } else {
            (None, None, None)
        };

        let mut squeeze = Vec::new();
        let mut att = Vec::new();
        if cfg.use_cpa {
            for k in 0..3 {
                squeeze.push(conv_spec(
                    specs,
                    format!("gca.{s}.squeeze{k}"),
                    squeezed,
                    c,
                    1,
                ));
            }
            for k in 0..3 {
                let ksize = if k == 0 {
                    ATT_KERNEL_FULL
                } else {
                    ATT_KERNEL_COARSE
                };
                att.push(conv_spec(specs, format!("gca.{s}.att{k}"), 1, 2, ksize));
            }
        } else {
            squeeze.push(conv_spec(
                specs,
                format!("gca.{s}.squeeze0"),
                squeezed,
                c,
                1,
            ));
            att.push(conv_spec(
                specs,
                format!("gca.{s}.att_full"),
                1,
                2,
                ATT_KERNEL_FULL,
            ));
        }

        GcaUnit {
            channels: c,
            squeezed,
            use_gfa: cfg.use_gfa,
            use_cpa: cfg.use_cpa,
            delta,
            fc1,
            fc2,
            squeeze,
            att,
        }
    }

    /// Full unit: aggregation (if enabled), then pyramid attention (or the
    /// single-scale fallback).
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, f: Var) -> GcaOut {
        let feat = if self.use_gfa {
            let aggregated = self.gfa(tape, store, f);
            self.recalibrate(tape, store, aggregated)
        } else {
            f
        };
        if self.use_cpa {
            let pyr = self.build_pyramid(tape, store, feat);
            let (attention, f_out1, f_d0) = self.cascaded_attention(tape, store, &pyr);
            GcaOut {
                attention,
                f_out1: Some(f_out1),
                f_d0,
            }
        } else {
            let f_d0 = self.squeeze_conv(tape, store, 0, feat);
            let attention = self.spatial_attention(tape, store, 0, f_d0);
            GcaOut {
                attention,
                f_out1: None,
                f_d0,
            }
        }
    }

    /// Global feature aggregation plus the residual fuse of the raw side
    /// feature with its context-weighted counterpart.
    fn gfa<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, f: Var) -> Var {
        let shape: Vec<usize> = tape.shape(f).to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let p = h * w;
        let ft = tape.l2norm_sites(f);
        let ftm = tape.reshape(ft, &[c, p]);
        let corr = tape.gram(ftm);
        let ctx = tape.softmax_cols(corr);
        let gm = tape.matmul(ftm, ctx);
        let g = tape.reshape(gm, &[c, h, w]);
        // F = f + delta * (f .* G)
        let fg = tape.mul(f, g);
        let delta = tape.param(store, self.delta.unwrap());
        let scaled = tape.mul_scalar_var(fg, delta);
        tape.add(f, scaled)
    }

    /// Channel recalibration: sigmoid of a shared bottleneck MLP applied to
    /// both pooled descriptors, used to rescale channels.
    pub fn recalibrate<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Var {
        let (fc1_w, fc1_b) = self.fc1.expect("recalibration requires the GFA block");
        let (fc2_w, fc2_b) = self.fc2.unwrap();
        let w1 = tape.param(store, fc1_w);
        let b1 = tape.param(store, fc1_b);
        let w2 = tape.param(store, fc2_w);
        let b2 = tape.param(store, fc2_b);
        let avg = tape.mean_spatial(x);
        let mx = tape.max_spatial(x);
        let branch = |tape: &mut Tape<F>, v: Var| -> Var {
            let h1 = tape.linear(v, w1, b1);
            let h1 = tape.relu(h1);
            tape.linear(h1, w2, b2)
        };
        let a = branch(tape, avg);
        let m = branch(tape, mx);
        let sum = tape.add(a, m);
        let gamma = tape.sigmoid(sum);
        tape.scale_channels(x, gamma)
    }

    fn squeeze_conv<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        level: usize,
        x: Var,
    ) -> Var {
        let (w, b) = self.squeeze[level];
        let w = tape.param(store, w);
        let b = tape.param(store, b);
        conv2d(tape, x, w, b)
    }

    pub fn spatial_attention<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        level: usize,
        x: Var,
    ) -> Var {
        let (w, b) = self.att[level];
        let w = tape.param(store, w);
        let b = tape.param(store, b);
        spatial_attention_op(tape, x, w, b)
    }

    /// Three squeezed levels at full, half and quarter resolution. Pooling
    /// happens before the per-level 1x1 squeeze; spatial sizes clamp at 1
    /// so deep stages of small inputs degrade to repeated levels instead of
    /// failing.
    pub fn build_pyramid<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> [Var; 3] {
        assert!(self.use_cpa, "pyramid only exists with the cascade enabled");
        let pooled1 = maxpool2(tape, x);
        let pooled2 = maxpool2(tape, pooled1);
        let d0 = self.squeeze_conv(tape, store, 0, x);
        let d1 = self.squeeze_conv(tape, store, 1, pooled1);
        let d2 = self.squeeze_conv(tape, store, 2, pooled2);
        [d0, d1, d2]
    }

    /// Coarse-to-fine attention over the pyramid. Returns the
    /// full-resolution map plus the level-1 weighted feature and the
    /// level-0 feature needed by the enhancement step.
    pub fn cascaded_attention<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        pyramid: &[Var; 3],
    ) -> (Var, Var, Var) {
        let [d0, d1, d2] = *pyramid;
        let (h1, w1) = spatial(tape, d1);
        let (h0, w0) = spatial(tape, d0);

        let a2 = self.spatial_attention(tape, store, 2, d2);
        let weighted2 = tape.mul_attn(d2, a2);
        let out2 = tape.add(weighted2, d2);
        let up2 = upsample_bilinear(tape, out2, h1, w1);
        let cat1 = tape.concat_ch(&[d1, up2]);
        let a1 = self.spatial_attention(tape, store, 1, cat1);
        let weighted1 = tape.mul_attn(d1, a1);
        let out1 = tape.add(weighted1, d1);
        let up1 = upsample_bilinear(tape, out1, h0, w0);
        let cat0 = tape.concat_ch(&[d0, up1]);
        let a0 = self.spatial_attention(tape, store, 0, cat0);
        (a0, out1, d0)
    }
}

fn spatial<F: Scalar>(tape: &Tape<F>, v: Var) -> (usize, usize) {
    let s = tape.shape(v);
    (s[1], s[2])
}
