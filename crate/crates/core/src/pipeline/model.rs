//! The coarse-to-fine model: toy backbone, per-task preliminary decoders
//! with coarse heads, cross-task fusion, per-task distiller + window
//! block + output decoder, and the multi-task loss.

use alloc::format;
use alloc::vec::Vec;

use crate::cwib::{Cwib, CwibConfig, WindowGrid};
use crate::distiller::TokenDistiller;
use crate::error::{invalid, Result};
use crate::fusion::{FusionBlock, FusionConfig};
use crate::layers::Conv2d;
use crate::param::ParamStore;
use crate::pipeline::data::{Sample, TaskTargets};
use crate::pipeline::{LossKind, ModelConfig};
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::Real;
use crate::Phase;

pub struct Backbone {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
}

impl Backbone {
    fn new<T: Real>(w: usize, store: &mut ParamStore<T>, rng: &mut SeedRng) -> Result<Self> {
        Ok(Backbone {
            conv1: Conv2d::new(store, "backbone.conv1", 3, w, 3, 2, 1, rng)?,
            conv2: Conv2d::new(store, "backbone.conv2", w, 2 * w, 3, 2, 1, rng)?,
            conv3: Conv2d::new(store, "backbone.conv3", 2 * w, 3 * w, 3, 2, 1, rng)?,
        })
    }

    /// Two pyramid levels at strides 4 and 8.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        image: Var,
    ) -> Result<(Var, Var)> {
        let shape = tape.value(image).shape();
        if shape.len() != 3 || shape[0] != 3 || shape[1] < 8 || shape[2] < 8 {
            return Err(invalid(
                "backbone",
                "image must be 3 x h x w with h, w >= 8",
            ));
        }
        let x = self.conv1.apply(store, tape, image)?;
        let x = tape.relu(x);
        let l1 = self.conv2.apply(store, tape, x)?;
        let l1 = tape.relu(l1);
        let l2 = self.conv3.apply(store, tape, l1)?;
        let l2 = tape.relu(l2);
        Ok((l1, l2))
    }
}

/// Upsamples the deep level, concatenates both levels on channels and
/// decodes a task feature plus a coarse prediction head.
pub struct PreliminaryDecoder {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
    pub head: Conv2d,
}

impl PreliminaryDecoder {
    fn new<T: Real>(
        name: &str,
        backbone_w: usize,
        d: usize,
        channels: usize,
        store: &mut ParamStore<T>,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        Ok(PreliminaryDecoder {
            conv_a: Conv2d::new(
                store,
                &format!("{name}.conv_a"),
                5 * backbone_w,
                d,
                3,
                1,
                1,
                rng,
            )?,
            conv_b: Conv2d::new(store, &format!("{name}.conv_b"), d, d, 3, 1, 1, rng)?,
            head: Conv2d::new(store, &format!("{name}.head"), d, channels, 1, 1, 0, rng)?,
        })
    }

    /// Returns `(task feature d x h x w, coarse logits c_t x h x w)`.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        l1: Var,
        l2: Var,
    ) -> Result<(Var, Var)> {
        let up = tape.upsample_nearest(l2, 2)?;
        let cat = concat_channels(tape, &[l1, up])?;
        let x = self.conv_a.apply(store, tape, cat)?;
        let x = tape.relu(x);
        let p = self.conv_b.apply(store, tape, x)?;
        let p = tape.relu(p);
        let coarse = self.head.apply(store, tape, p)?;
        Ok((p, coarse))
    }
}

/// Channel-concat of `C x H x W` maps via a rows view.
pub fn concat_channels<T: Real>(tape: &mut Tape<T>, xs: &[Var]) -> Result<Var> {
    let (h, w) = {
        let s = tape.value(xs[0]).shape();
        (s[1], s[2])
    };
    let mut flat = Vec::with_capacity(xs.len());
    let mut channels = 0;
    for &x in xs {
        let s = tape.value(x).shape().to_vec();
        if s[1] != h || s[2] != w {
            return Err(invalid("concat_channels", "spatial extents differ"));
        }
        channels += s[0];
        flat.push(tape.reshape(x, &[s[0], h * w])?);
    }
    let cat = tape.concat_rows(&flat)?;
    tape.reshape(cat, &[channels, h, w])
}

/// Projects the concatenation of a task feature and its coarse
/// prediction to the unified width d.
pub struct InputFuser {
    pub proj: Conv2d,
}

impl InputFuser {
    fn new<T: Real>(
        name: &str,
        d: usize,
        channels: usize,
        store: &mut ParamStore<T>,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        Ok(InputFuser {
            proj: Conv2d::new(
                store,
                &format!("{name}.proj"),
                d + channels,
                d,
                1,
                1,
                0,
                rng,
            )?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        p: Var,
        coarse: Var,
    ) -> Result<Var> {
        let cat = concat_channels(tape, &[p, coarse])?;
        self.proj.apply(store, tape, cat)
    }
}

/// Output decoder, structurally a deeper copy of the preliminary one.
pub struct OutputDecoder {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
    pub head: Conv2d,
}

impl OutputDecoder {
    fn new<T: Real>(
        name: &str,
        d: usize,
        channels: usize,
        store: &mut ParamStore<T>,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        Ok(OutputDecoder {
            conv_a: Conv2d::new(store, &format!("{name}.conv_a"), d, d, 3, 1, 1, rng)?,
            conv_b: Conv2d::new(store, &format!("{name}.conv_b"), d, d, 3, 1, 1, rng)?,
            head: Conv2d::new(store, &format!("{name}.head"), d, channels, 1, 1, 0, rng)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
    ) -> Result<Var> {
        let y = self.conv_a.apply(store, tape, x)?;
        let y = tape.relu(y);
        let y = self.conv_b.apply(store, tape, y)?;
        let y = tape.relu(y);
        self.head.apply(store, tape, y)
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub decoders: Vec<PreliminaryDecoder>,
    pub fusers: Vec<InputFuser>,
    pub fusion: FusionBlock,
    pub distillers: Vec<TokenDistiller>,
    pub cwibs: Vec<Cwib>,
    pub grid: WindowGrid,
    pub out_decoders: Vec<OutputDecoder>,
}

/// Per-task coarse and refined logits, upsampled to image resolution.
pub struct ForwardOutputs {
    pub coarse: Vec<Var>,
    pub refined: Vec<Var>,
}

/// Scalar loss vars of one pass; `total = coarse + refined` with task
/// weights applied inside each term.
pub struct LossVars {
    pub total: Var,
    pub coarse: Var,
    pub refined: Var,
}

impl Model {
    pub fn new<T: Real>(
        cfg: ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (h, w, d) = (cfg.h(), cfg.w(), cfg.d);
        let backbone = Backbone::new(cfg.backbone_width, store, rng)?;
        let mut decoders = Vec::new();
        let mut fusers = Vec::new();
        let mut distillers = Vec::new();
        let mut cwibs = Vec::new();
        let mut out_decoders = Vec::new();
        for t in &cfg.tasks {
            decoders.push(PreliminaryDecoder::new(
                &format!("decoder.{}", t.name),
                cfg.backbone_width,
                d,
                t.channels,
                store,
                rng,
            )?);
            fusers.push(InputFuser::new(
                &format!("fuser.{}", t.name),
                d,
                t.channels,
                store,
                rng,
            )?);
            distillers.push(TokenDistiller::new(
                cfg.tokens,
                d,
                store,
                &format!("distiller.{}", t.name),
                rng,
            )?);
            cwibs.push(Cwib::new(
                CwibConfig {
                    d,
                    tokens: cfg.tokens,
                    win_h: cfg.win_h,
                    win_w: cfg.win_w,
                    heads: cfg.heads,
                },
                store,
                &format!("cwib.{}", t.name),
                rng,
            )?);
            out_decoders.push(OutputDecoder::new(
                &format!("out_decoder.{}", t.name),
                d,
                t.channels,
                store,
                rng,
            )?);
        }
        let fusion = FusionBlock::new(
            FusionConfig {
                tasks: cfg.task_count(),
                h,
                w,
                d,
                scales: cfg.scales.clone(),
                heads: cfg.heads,
            },
            store,
            "fusion",
            rng,
        )?;
        let grid = WindowGrid::new(h, w, cfg.win_h, cfg.win_w)?;
        Ok(Model {
            cfg,
            backbone,
            decoders,
            fusers,
            fusion,
            distillers,
            cwibs,
            grid,
            out_decoders,
        })
    }

    /// Whole coarse-to-fine pass over one image.
    pub fn full_forward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        tape: &mut Tape<T>,
        image: &crate::tensor::Tensor<T>,
        phase: Phase,
    ) -> Result<ForwardOutputs> {
        if image.shape() != [3, self.cfg.image_h, self.cfg.image_w] {
            return Err(invalid("full_forward", "image extent mismatch"));
        }
        let (h, w) = (self.cfg.h(), self.cfg.w());
        let img = tape.constant(image.clone());
        let (l1, l2) = self.backbone.forward(store, tape, img)?;

        let mut coarse = Vec::new();
        let mut coarse8 = Vec::new();
        let mut features = Vec::new();
        for t in 0..self.cfg.task_count() {
            let (p, c8) = self.decoders[t].forward(store, tape, l1, l2)?;
            coarse.push(tape.upsample_nearest(c8, 4)?);
            coarse8.push((p, c8));
            let f = self.fusers[t].forward(store, tape, p, c8)?;
            features.push(f);
        }

        let fused = self.fusion.forward(store, tape, &features, phase)?;

        let mut refined = Vec::new();
        for t in 0..self.cfg.task_count() {
            let tokens = self.distillers[t].forward(store, tape, fused, phase)?;
            let (p, _) = coarse8[t];
            let p_tok = tape.chw_to_tokens(p)?;
            let x = self.cwibs[t].forward(store, tape, p_tok, tokens, &self.grid)?;
            let x_chw = tape.tokens_to_chw(x, h, w)?;
            let logits = self.out_decoders[t].forward(store, tape, x_chw)?;
            refined.push(tape.upsample_nearest(logits, 4)?);
        }
        Ok(ForwardOutputs { coarse, refined })
    }

    fn task_loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        logits: Var,
        task: usize,
        targets: &TaskTargets<T>,
    ) -> Result<Var> {
        let spec = &self.cfg.tasks[task];
        match (spec.loss, spec.name.as_str()) {
            (LossKind::CrossEntropy, "boundary") => tape.cross_entropy(logits, &targets.boundary),
            (LossKind::CrossEntropy, _) => tape.cross_entropy(logits, &targets.seg),
            (LossKind::L1, "normal") => {
                let n = targets
                    .normal
                    .as_ref()
                    .ok_or_else(|| invalid("loss", "normal targets missing"))?;
                tape.l1_loss(logits, n.clone())
            }
            (LossKind::L1, _) => tape.l1_loss(logits, targets.depth.clone()),
        }
    }

    /// Unweighted scalar loss of one head against its task targets.
    pub fn task_loss_value<T: Real>(
        &self,
        tape: &mut Tape<T>,
        logits: Var,
        task: usize,
        targets: &TaskTargets<T>,
    ) -> Result<f64> {
        let v = self.task_loss(tape, logits, task, targets)?;
        Ok(tape.value(v).item().f64())
    }

    /// Weighted multi-task loss over both prediction stages:
    /// `sum_t w_t (loss(coarse_t) + loss(refined_t))`.
    pub fn total_loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        outputs: &ForwardOutputs,
        targets: &TaskTargets<T>,
    ) -> Result<LossVars> {
        let mut coarse_acc: Option<Var> = None;
        let mut refined_acc: Option<Var> = None;
        for t in 0..self.cfg.task_count() {
            let w = T::val(self.cfg.tasks[t].weight);
            let lc = self.task_loss(tape, outputs.coarse[t], t, targets)?;
            let lc = tape.scale(lc, w);
            let lr = self.task_loss(tape, outputs.refined[t], t, targets)?;
            let lr = tape.scale(lr, w);
            coarse_acc = Some(match coarse_acc {
                Some(acc) => tape.add(acc, lc)?,
                None => lc,
            });
            refined_acc = Some(match refined_acc {
                Some(acc) => tape.add(acc, lr)?,
                None => lr,
            });
        }
        let coarse = coarse_acc.expect("at least one task");
        let refined = refined_acc.expect("at least one task");
        let total = tape.add(coarse, refined)?;
        Ok(LossVars {
            total,
            coarse,
            refined,
        })
    }

    /// Forward + loss + backward for one sample; gradients are scaled by
    /// `grad_scale` (batch averaging) before accumulating into the store.
    pub fn backward_sample<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        sample: &Sample<T>,
        phase: Phase,
        grad_scale: T,
    ) -> Result<(f64, f64, f64)> {
        let mut tape = Tape::new();
        let outputs = self.full_forward(store, &mut tape, &sample.image, phase)?;
        let losses = self.total_loss(&mut tape, &outputs, &sample.targets)?;
        let scaled = tape.scale(losses.total, grad_scale);
        let grads = tape.backward(scaled)?;
        tape.accumulate_param_grads(&grads, store);
        Ok((
            tape.value(losses.coarse).item().f64(),
            tape.value(losses.refined).item().f64(),
            tape.value(losses.total).item().f64(),
        ))
    }
}
