//! Five-stage backbone feature extractor and the dense attention fluid:
//! every stage runs a GCA unit, shallow post-fluid attention maps are
//! pooled down and convolved into deeper stages' maps, and the enhanced
//! side features are assembled for the decoder.

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::gca::{GcaConfig, GcaUnit};
use crate::nn::{area_downsample, conv2d, maxpool2, upsample_bilinear};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{as3, Tape, Var};

pub const STAGES: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stage_channels: [usize; STAGES],
    pub stage_convs: [usize; STAGES],
    pub input_size: (usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: [64, 128, 256, 512, 512],
            stage_convs: [2, 2, 3, 3, 3],
            input_size: (128, 128),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be divisible by 16 (four 2x pools after stage 1)"
            )));
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.stage_convs.iter().any(|&n| n == 0)
        {
            return Err(Error::Config(
                "stage channels and conv counts must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// VGG-style extractor: per stage a 2x2 max pool (none before stage 1)
/// followed by 3x3 conv + rectifier repeats.
pub struct Backbone {
    cfg: BackboneConfig,
    stages: Vec<Vec<(usize, usize)>>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, specs: &mut Vec<ParamSpec>) -> Backbone {
        let mut stages = Vec::with_capacity(STAGES);
        let mut in_ch = 3;
        for s in 0..STAGES {
            let out_ch = cfg.stage_channels[s];
            let mut convs = Vec::new();
            for i in 0..cfg.stage_convs[s] {
                let c_in = if i == 0 { in_ch } else { out_ch };
                specs.push(ParamSpec::new(
                    format!("backbone.stage{}.conv{}.weight", s + 1, i),
                    &[out_ch, c_in, 3, 3],
                    Init::Xavier {
                        fan_in: c_in * 9,
                        fan_out: out_ch * 9,
                    },
                ));
                specs.push(ParamSpec::new(
                    format!("backbone.stage{}.conv{}.bias", s + 1, i),
                    &[out_ch],
                    Init::Zeros,
                ));
                convs.push((specs.len() - 2, specs.len() - 1));
            }
            stages.push(convs);
            in_ch = out_ch;
        }
        Backbone { cfg, stages }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Side features at `H, H/2, H/4, H/8, H/16`.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        image: Var,
    ) -> Vec<Var> {
        let mut x = image;
        let mut side = Vec::with_capacity(STAGES);
        for (s, convs) in self.stages.iter().enumerate() {
            if s > 0 {
                x = maxpool2(tape, x);
            }
            for &(w, b) in convs {
                let w = tape.param(store, w);
                let b = tape.param(store, b);
                let y = conv2d(tape, x, w, b);
                x = tape.relu(y);
            }
            side.push(x);
        }
        side
    }
}

/// Fluid update for one stage: shallower post-fluid maps are pooled down
/// to the current resolution, stacked with the current map and mixed by a
/// 3x3 convolution into a refreshed attention map. Stage 1 has no priors
/// and runs the same conv + sigmoid on its own map.
pub fn daf_update<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    conv: (usize, usize),
    priors: &[Var],
    current: Var,
) -> Result<Var> {
    let cur_shape: Vec<usize> = tape.shape(current).to_vec();
    let (ch, cw) = (cur_shape[1], cur_shape[2]);
    let mut stack = Vec::with_capacity(priors.len() + 1);
    for &p in priors {
        let ps: Vec<usize> = tape.shape(p).to_vec();
        let (ph, pw) = (ps[1], ps[2]);
        if ph < ch || pw < cw {
            return Err(Error::shape(
                "daf_update",
                format!("prior map {ph}x{pw} is smaller than current {ch}x{cw}"),
            ));
        }
        if ph % ch != 0 || pw % cw != 0 {
            return Err(Error::shape(
                "daf_update",
                format!("prior {ph}x{pw} is not an integer multiple of {ch}x{cw}"),
            ));
        }
        stack.push(area_downsample(tape, p, ph / ch, pw / cw));
    }
    stack.push(current);
    let cat = tape.concat_ch(&stack);
    let w = tape.param(store, conv.0);
    let b = tape.param(store, conv.1);
    let mixed = conv2d(tape, cat, w, b);
    Ok(tape.sigmoid(mixed))
}

/// Residual attention enhancement: the level-0 feature is stacked with the
/// up-sampled level-1 weighted feature and multiplied by `attention + 1`,
/// so the attention scales features by a factor in [1, 2].
pub fn enhanced_feature<F: Scalar>(
    tape: &mut Tape<F>,
    f_d0: Var,
    f_out1: Var,
    attention: Var,
) -> Result<Var> {
    let s0: Vec<usize> = tape.shape(f_d0).to_vec();
    let s1: Vec<usize> = tape.shape(f_out1).to_vec();
    let sa: Vec<usize> = tape.shape(attention).to_vec();
    let (h0, w0) = (s0[1], s0[2]);
    if s1[1] != (h0 / 2).max(1) || s1[2] != (w0 / 2).max(1) {
        return Err(Error::shape(
            "enhanced_feature",
            format!(
                "level-1 feature {}x{} is not half of level-0 {h0}x{w0}",
                s1[1], s1[2]
            ),
        ));
    }
    if sa != [1, h0, w0] {
        return Err(Error::shape(
            "enhanced_feature",
            format!("attention {sa:?} does not match level-0 {h0}x{w0}"),
        ));
    }
    let up = upsample_bilinear(tape, f_out1, h0, w0);
    let cat = tape.concat_ch(&[f_d0, up]);
    let residual = tape.add_const(attention, 1.0);
    Ok(tape.mul_attn(cat, residual))
}

/// Architecture toggles matching the ablation variants: the bare encoder,
/// aggregation only, aggregation + cascade, and the full fluid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub use_gfa: bool,
    pub use_cpa: bool,
    pub use_daf: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            use_gfa: true,
            use_cpa: true,
            use_daf: true,
        }
    }
}

pub struct FluidEncoder {
    pub backbone: Backbone,
    pub gca: Vec<GcaUnit>,
    daf: Option<Vec<(usize, usize)>>,
    toggles: Toggles,
}

/// Tape handles produced by one encoder pass.
pub struct EncodedVars {
    pub side: Vec<Var>,
    /// Post-fluid attention maps, one `[1, h, w]` per stage.
    pub attentions: Vec<Var>,
    /// Attention maps as produced by the GCA units, before the fluid.
    pub pre_fluid: Vec<Var>,
    pub enhanced: Vec<Var>,
}

/// Extracted encoder output.
pub struct EncoderOutput<F> {
    pub enhanced: Vec<Array3<F>>,
    pub attentions: Vec<Array2<F>>,
}

impl FluidEncoder {
    pub fn new(
        backbone_cfg: BackboneConfig,
        toggles: Toggles,
        delta_init: f64,
        reduction: usize,
        specs: &mut Vec<ParamSpec>,
    ) -> FluidEncoder {
        let backbone = Backbone::new(backbone_cfg, specs);
        let gca = (0..STAGES)
            .map(|s| {
                GcaUnit::new(
                    &GcaConfig {
                        stage: s + 1,
                        channels: backbone.cfg.stage_channels[s],
                        use_gfa: toggles.use_gfa,
                        use_cpa: toggles.use_cpa,
                        delta_init,
                        reduction,
                    },
                    specs,
                )
            })
            .collect();
        let daf = toggles.use_daf.then(|| {
            (0..STAGES)
                .map(|s| {
                    specs.push(ParamSpec::new(
                        format!("daf.{}.conv.weight", s + 1),
                        &[1, s + 1, 3, 3],
                        Init::Xavier {
                            fan_in: (s + 1) * 9,
                            fan_out: 9,
                        },
                    ));
                    specs.push(ParamSpec::new(
                        format!("daf.{}.conv.bias", s + 1),
                        &[1],
                        Init::Zeros,
                    ));
                    (specs.len() - 2, specs.len() - 1)
                })
                .collect()
        });
        FluidEncoder {
            backbone,
            gca,
            daf,
            toggles,
        }
    }

    pub fn toggles(&self) -> Toggles {
        self.toggles
    }

    /// Channel count of each enhanced side feature, which dimensions the
    /// decoder. With the cascade on this is twice the squeezed width.
    pub fn enhanced_channels(&self) -> [usize; STAGES] {
        let mut out = [0; STAGES];
        for (s, slot) in out.iter_mut().enumerate() {
            let sq = self.gca[s].squeezed;
            *slot = if self.toggles.use_cpa { 2 * sq } else { sq };
        }
        out
    }

    /// Full encoder pass. The image must be `[3, h, w]` with both spatial
    /// sizes divisible by 16.
    pub fn encode<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        image: &Array3<F>,
    ) -> Result<EncodedVars> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::shape(
                "encode",
                format!("expected a 3-channel image, got {c}"),
            ));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::shape(
                "encode",
                format!("input {h}x{w} must be divisible by 16"),
            ));
        }
        let image = tape.constant3(image.clone());
        let side = self.backbone.forward(tape, store, image);

        let mut attentions: Vec<Var> = Vec::with_capacity(STAGES);
        let mut pre_fluid = Vec::with_capacity(STAGES);
        let mut enhanced = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let out = self.gca[s].forward(tape, store, side[s]);
            pre_fluid.push(out.attention);
            let attention = match &self.daf {
                Some(convs) => daf_update(tape, store, convs[s], &attentions, out.attention)?,
                None => out.attention,
            };
            attentions.push(attention);
            let feat = if self.toggles.use_cpa {
                enhanced_feature(tape, out.f_d0, out.f_out1.unwrap(), attention)?
            } else {
                // Baseline path: the squeezed side feature passes through
                // unmodulated; the attention map is still produced for the
                // fluid and for inspection.
                out.f_d0
            };
            enhanced.push(feat);
        }
        Ok(EncodedVars {
            side,
            attentions,
            pre_fluid,
            enhanced,
        })
    }

    /// Convenience wrapper that runs a throwaway tape and extracts arrays.
    pub fn encode_arrays<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        image: &Array3<F>,
    ) -> Result<EncoderOutput<F>> {
        let mut tape = Tape::new();
        let vars = self.encode(&mut tape, store, image)?;
        Ok(EncoderOutput {
            enhanced: vars
                .enhanced
                .iter()
                .map(|&v| as3(tape.value(v)).to_owned())
                .collect(),
            attentions: vars
                .attentions
                .iter()
                .map(|&v| as3(tape.value(v)).index_axis(Axis(0), 0).to_owned())
                .collect(),
        })
    }
}
